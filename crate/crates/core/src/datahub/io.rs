use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{DataError, Dataset, DatasetSchema, Journey, Touchpoint};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum JourneyFormat {
    /// One journey object per line.
    #[serde(rename = "journey-jsonl")]
    Jsonl,
    /// One row per touchpoint with per-journey columns repeated.
    #[serde(rename = "journey-csv")]
    Csv,
}

impl FromStr for JourneyFormat {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "journey-jsonl" | "jsonl" => Ok(JourneyFormat::Jsonl),
            "journey-csv" | "csv" => Ok(JourneyFormat::Csv),
            other => Err(DataError::Invalid(format!("unknown journey format `{other}`"))),
        }
    }
}

/// Reads a journey file. Without a schema, the smallest admissible one is inferred.
pub fn load_journeys(path: &Path, format: JourneyFormat, schema: Option<&DatasetSchema>) -> Result<Dataset, DataError> {
    let records = match format {
        JourneyFormat::Jsonl => read_jsonl(path)?,
        JourneyFormat::Csv => read_csv(path)?,
    };
    if records.is_empty() {
        return Err(DataError::Empty(path.display().to_string()));
    }
    let schema = match schema {
        Some(s) => s.clone(),
        None => DatasetSchema::infer(&records.iter().map(|(_, j)| j.clone()).collect::<Vec<_>>())?,
    };
    for (line, j) in &records {
        schema.check(j).map_err(|(field, msg)| DataError::Record { line: *line, field, msg })?;
    }
    Dataset::new(schema, records.into_iter().map(|(_, j)| j).collect())
}

pub fn save_journeys(dataset: &Dataset, path: &Path, format: JourneyFormat) -> Result<(), DataError> {
    let file = File::create(path).map_err(|e| DataError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let res = match format {
        JourneyFormat::Jsonl => write_jsonl(dataset, &mut out),
        JourneyFormat::Csv => write_csv(dataset, &mut out),
    };
    res.and_then(|_| out.flush()).map_err(|e| DataError::io(path, e))
}

#[derive(Serialize)]
struct TouchRecord<'a> {
    c: usize,
    f: &'a [f64],
    ts: u64,
    cost: f64,
}

#[derive(Serialize)]
struct JourneyRecord<'a> {
    journey_id: &'a str,
    user_cat: &'a [usize],
    user_num: &'a [f64],
    y: u8,
    touchpoints: Vec<TouchRecord<'a>>,
}

fn write_jsonl(dataset: &Dataset, out: &mut impl Write) -> std::io::Result<()> {
    for j in dataset.journeys() {
        let rec = JourneyRecord {
            journey_id: &j.id,
            user_cat: &j.user_cat,
            user_num: &j.user_num,
            y: j.converted as u8,
            touchpoints: j
                .touchpoints
                .iter()
                .map(|t| TouchRecord { c: t.channel, f: &t.features, ts: t.timestamp, cost: t.cost })
                .collect(),
        };
        serde_json::to_writer(&mut *out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn record_err(line: usize, field: impl Into<String>, msg: impl Into<String>) -> DataError {
    DataError::Record { line, field: field.into(), msg: msg.into() }
}

fn field<'a>(obj: &'a Value, name: &str, line: usize) -> Result<&'a Value, DataError> {
    obj.get(name).ok_or_else(|| record_err(line, name, "missing"))
}

fn as_uint(v: &Value, line: usize, name: &str) -> Result<u64, DataError> {
    v.as_u64().ok_or_else(|| record_err(line, name, format!("expected a non-negative integer, got {v}")))
}

fn as_real(v: &Value, line: usize, name: &str) -> Result<f64, DataError> {
    v.as_f64().ok_or_else(|| record_err(line, name, format!("expected a number, got {v}")))
}

fn as_array<'a>(v: &'a Value, line: usize, name: &str) -> Result<&'a Vec<Value>, DataError> {
    v.as_array().ok_or_else(|| record_err(line, name, "expected a list"))
}

fn parse_journey(obj: &Value, line: usize) -> Result<Journey, DataError> {
    if !obj.is_object() {
        return Err(record_err(line, "<record>", "expected a JSON object"));
    }
    let id = field(obj, "journey_id", line)?;
    let id = match id {
        Value::String(s) => s.clone(),
        Value::Number(n) => n.to_string(),
        _ => return Err(record_err(line, "journey_id", "expected a string")),
    };
    let user_cat = as_array(field(obj, "user_cat", line)?, line, "user_cat")?
        .iter()
        .enumerate()
        .map(|(i, v)| as_uint(v, line, &format!("user_cat[{i}]")).map(|x| x as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let user_num = as_array(field(obj, "user_num", line)?, line, "user_num")?
        .iter()
        .enumerate()
        .map(|(i, v)| as_real(v, line, &format!("user_num[{i}]")))
        .collect::<Result<Vec<_>, _>>()?;
    let converted = match as_uint(field(obj, "y", line)?, line, "y")? {
        0 => false,
        1 => true,
        other => return Err(record_err(line, "y", format!("label must be 0 or 1, got {other}"))),
    };
    let mut touchpoints = Vec::new();
    for (t, tp) in as_array(field(obj, "touchpoints", line)?, line, "touchpoints")?.iter().enumerate() {
        let name = |f: &str| format!("touchpoints[{t}].{f}");
        let get = |f: &str| tp.get(f).ok_or_else(|| record_err(line, name(f), "missing"));
        let features = as_array(get("f")?, line, &name("f"))?
            .iter()
            .map(|v| as_real(v, line, &name("f")))
            .collect::<Result<Vec<_>, _>>()?;
        touchpoints.push(Touchpoint {
            channel: as_uint(get("c")?, line, &name("c"))? as usize,
            features,
            timestamp: as_uint(get("ts")?, line, &name("ts"))?,
            cost: as_real(get("cost")?, line, &name("cost"))?,
        });
    }
    Ok(Journey { id, user_cat, user_num, touchpoints, converted })
}

fn read_jsonl(path: &Path) -> Result<Vec<(usize, Journey)>, DataError> {
    let file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| DataError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: Value =
            serde_json::from_str(&line).map_err(|e| record_err(line_no, "<record>", format!("invalid JSON: {e}")))?;
        out.push((line_no, parse_journey(&value, line_no)?));
    }
    Ok(out)
}

fn write_csv(dataset: &Dataset, out: &mut impl Write) -> std::io::Result<()> {
    let s = dataset.schema();
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = ["journey_id", "ts", "c", "cost"].iter().map(|s| s.to_string()).collect();
    header.extend((0..s.n_touch_features).map(|i| format!("f_{i}")));
    header.push("y".into());
    header.extend((0..s.cat_cardinalities.len()).map(|i| format!("u_cat_{i}")));
    header.extend((0..s.n_user_numeric).map(|i| format!("u_num_{i}")));
    w.write_record(&header)?;
    for j in dataset.journeys() {
        for t in &j.touchpoints {
            let mut row = vec![j.id.clone(), t.timestamp.to_string(), t.channel.to_string(), t.cost.to_string()];
            row.extend(t.features.iter().map(|v| v.to_string()));
            row.push((j.converted as u8).to_string());
            row.extend(j.user_cat.iter().map(|v| v.to_string()));
            row.extend(j.user_num.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
    }
    w.flush()
}

fn read_csv(path: &Path) -> Result<Vec<(usize, Journey)>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path).map_err(|e| csv_err(path, e))?;
    let header = rdr.headers().map_err(|e| csv_err(path, e))?.clone();
    let col = |name: &str| header.iter().position(|h| h == name).ok_or_else(|| DataError::MissingColumn(name.into()));
    let (c_id, c_ts, c_c, c_cost, c_y) = (col("journey_id")?, col("ts")?, col("c")?, col("cost")?, col("y")?);
    let numbered = |prefix: &str| {
        let mut cols = Vec::new();
        while let Some(p) = header.iter().position(|h| h == format!("{prefix}{}", cols.len())) {
            cols.push(p);
        }
        cols
    };
    let (c_f, c_ucat, c_unum) = (numbered("f_"), numbered("u_cat_"), numbered("u_num_"));

    let mut out: Vec<(usize, Journey)> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        let line = rec.position().map_or(0, |p| p.line() as usize);
        let get = |i: usize, name: &str| rec.get(i).ok_or_else(|| record_err(line, name, "missing"));
        let parse_u = |i: usize, name: &str| -> Result<u64, DataError> {
            get(i, name)?.trim().parse::<u64>().map_err(|e| record_err(line, name, e.to_string()))
        };
        let parse_f = |i: usize, name: &str| -> Result<f64, DataError> {
            get(i, name)?.trim().parse::<f64>().map_err(|e| record_err(line, name, e.to_string()))
        };
        let id = get(c_id, "journey_id")?.to_string();
        let tp = Touchpoint {
            channel: parse_u(c_c, "c")? as usize,
            features: c_f.iter().enumerate().map(|(i, &c)| parse_f(c, &format!("f_{i}"))).collect::<Result<_, _>>()?,
            timestamp: parse_u(c_ts, "ts")?,
            cost: parse_f(c_cost, "cost")?,
        };
        let converted = match parse_u(c_y, "y")? {
            0 => false,
            1 => true,
            v => return Err(record_err(line, "y", format!("label must be 0 or 1, got {v}"))),
        };
        let user_cat: Vec<usize> = c_ucat
            .iter()
            .enumerate()
            .map(|(i, &c)| parse_u(c, &format!("u_cat_{i}")).map(|v| v as usize))
            .collect::<Result<_, _>>()?;
        let user_num: Vec<f64> =
            c_unum.iter().enumerate().map(|(i, &c)| parse_f(c, &format!("u_num_{i}"))).collect::<Result<_, _>>()?;
        match index.get(&id) {
            Some(&k) => {
                let j = &mut out[k].1;
                if j.converted != converted || j.user_cat != user_cat || j.user_num != user_num {
                    return Err(record_err(line, "y/u_*", format!("per-journey columns differ from earlier rows of {id}")));
                }
                j.touchpoints.push(tp);
            }
            None => {
                index.insert(id.clone(), out.len());
                out.push((line, Journey { id, user_cat, user_num, touchpoints: vec![tp], converted }));
            }
        }
    }
    Ok(out)
}

fn csv_err(path: &Path, e: csv::Error) -> DataError {
    let line = e.position().map_or(0, |p| p.line() as usize);
    match e.into_kind() {
        csv::ErrorKind::Io(io) => DataError::io(path, io),
        other => record_err(line, "<row>", format!("{other:?}")),
    }
}

//! Newline-delimited attribution records: one `meta` line, one `journey` line per
//! attributed journey, then an optional `channels` line.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{AttributionConfig, AttributionError, JourneyAttribution};

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionReport {
    pub config: AttributionConfig,
    pub journeys: Vec<JourneyAttribution>,
    pub channel_shares: Option<Vec<f64>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum ReportRecord {
    Meta { config: AttributionConfig },
    Journey(#[serde(with = "journey_record")] JourneyAttribution),
    Channels { shares: Vec<f64> },
}

/// Standard errors may be `NaN`, which JSON spells `null`.
mod journey_record {
    use super::*;

    #[derive(Serialize, Deserialize)]
    #[serde(deny_unknown_fields)]
    struct Raw {
        journey_id: String,
        sv: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        std_err: Option<Vec<Option<f64>>>,
        attr: Vec<f64>,
        degenerate: bool,
        method: super::super::Method,
    }

    pub fn serialize<S: Serializer>(j: &JourneyAttribution, s: S) -> Result<S::Ok, S::Error> {
        Raw {
            journey_id: j.journey_id.clone(),
            sv: j.sv.clone(),
            std_err: j.std_err.as_ref().map(|v| v.iter().map(|x| x.is_finite().then_some(*x)).collect()),
            attr: j.attr.clone(),
            degenerate: j.degenerate,
            method: j.method,
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<JourneyAttribution, D::Error> {
        let r = Raw::deserialize(d)?;
        Ok(JourneyAttribution {
            journey_id: r.journey_id,
            sv: r.sv,
            std_err: r.std_err.map(|v| v.into_iter().map(|x| x.unwrap_or(f64::NAN)).collect()),
            attr: r.attr,
            degenerate: r.degenerate,
            method: r.method,
        })
    }
}

fn io_err(path: &Path, source: std::io::Error) -> AttributionError {
    AttributionError::Io { path: path.display().to_string(), source }
}

pub fn write_report(report: &AttributionReport, path: &Path) -> Result<(), AttributionError> {
    let file = std::fs::File::create(path).map_err(|e| io_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut emit = |rec: &ReportRecord| -> Result<(), AttributionError> {
        serde_json::to_writer(&mut w, rec).map_err(|e| io_err(path, e.into()))?;
        w.write_all(b"\n").map_err(|e| io_err(path, e))
    };
    emit(&ReportRecord::Meta { config: report.config.clone() })?;
    for j in &report.journeys {
        emit(&ReportRecord::Journey(j.clone()))?;
    }
    if let Some(shares) = &report.channel_shares {
        emit(&ReportRecord::Channels { shares: shares.clone() })?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

pub fn read_report(path: &Path) -> Result<AttributionReport, AttributionError> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let fmt = |line: usize, msg: String| AttributionError::Format { path: path.display().to_string(), line, msg };
    let mut config = None;
    let mut journeys = Vec::new();
    let mut channel_shares = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: ReportRecord = serde_json::from_str(&line).map_err(|e| fmt(i + 1, e.to_string()))?;
        match rec {
            ReportRecord::Meta { config: c } if config.is_none() && i == 0 => config = Some(c),
            ReportRecord::Meta { .. } => return Err(fmt(i + 1, "meta record must come first and only once".into())),
            _ if config.is_none() => return Err(fmt(i + 1, "missing meta record".into())),
            ReportRecord::Journey(j) => journeys.push(j),
            ReportRecord::Channels { shares } => channel_shares = Some(shares),
        }
    }
    let config = config.ok_or_else(|| fmt(0, "empty report".into()))?;
    Ok(AttributionReport { config, journeys, channel_shares })
}

//! Journeys, datasets, file formats, log import and the synthetic generator.

mod batch;
mod criteo;
mod io;
mod synthetic;

use serde::{Deserialize, Serialize};

pub use batch::{make_batches, split, split_indices, Batch};
pub use criteo::{import_criteo, ColumnMap, FilterConfig, ImportReport};
pub use io::{load_journeys, save_journeys, JourneyFormat};
pub use synthetic::{generate_synthetic, GeneratorConfig, SyntheticGroundTruth};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}, field {field}: {msg}")]
    Record { line: usize, field: String, msg: String },
    #[error("{0}")]
    Invalid(String),
    #[error("{0}: no records")]
    Empty(String),
    #[error("mapped column `{0}` not found in header")]
    MissingColumn(String),
    #[error("no journeys survived filtering ({0} before filtering)")]
    NothingSurvived(usize),
    #[error("could not reach positive rate {target:.4}; achieved {achieved:.4}")]
    Calibration { target: f64, achieved: f64 },
}

impl DataError {
    pub(crate) fn io(path: &std::path::Path, source: std::io::Error) -> Self {
        DataError::Io { path: path.display().to_string(), source }
    }
}

/// One ad exposure.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Touchpoint {
    pub channel: usize,
    pub features: Vec<f64>,
    /// Ordinal time; only the order matters to the model.
    pub timestamp: u64,
    pub cost: f64,
}

/// A user's ordered exposures plus static attributes and the conversion outcome.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Journey {
    pub id: String,
    pub user_cat: Vec<usize>,
    pub user_num: Vec<f64>,
    pub touchpoints: Vec<Touchpoint>,
    pub converted: bool,
}

impl Journey {
    pub fn len(&self) -> usize {
        self.touchpoints.len()
    }

    pub fn is_empty(&self) -> bool {
        self.touchpoints.is_empty()
    }

    pub fn label(&self) -> f64 {
        if self.converted {
            1.0
        } else {
            0.0
        }
    }

    /// Copy keeping only the touchpoints where `keep` is true, in their original order.
    pub fn subset(&self, keep: &[bool]) -> Journey {
        debug_assert_eq!(keep.len(), self.len());
        Journey {
            touchpoints: self.touchpoints.iter().zip(keep).filter(|(_, &k)| k).map(|(t, _)| t.clone()).collect(),
            ..self.clone_header()
        }
    }

    fn clone_header(&self) -> Journey {
        Journey {
            id: self.id.clone(),
            user_cat: self.user_cat.clone(),
            user_num: self.user_num.clone(),
            touchpoints: Vec::new(),
            converted: self.converted,
        }
    }
}

/// Vocabulary sizes and widths shared by every journey of a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSchema {
    /// K; channel ids lie in `[0, K)` and `K` itself is the padding sentinel.
    pub n_channels: usize,
    pub n_touch_features: usize,
    pub cat_cardinalities: Vec<usize>,
    pub n_user_numeric: usize,
}

impl DatasetSchema {
    /// Checks one journey against the schema; `Err` carries the offending field and a message.
    pub fn check(&self, j: &Journey) -> Result<(), (String, String)> {
        if j.touchpoints.is_empty() {
            return Err(("touchpoints".into(), "a journey needs at least one touchpoint".into()));
        }
        if j.user_cat.len() != self.cat_cardinalities.len() {
            return Err((
                "user_cat".into(),
                format!("expected {} values, got {}", self.cat_cardinalities.len(), j.user_cat.len()),
            ));
        }
        for (i, (&v, &card)) in j.user_cat.iter().zip(&self.cat_cardinalities).enumerate() {
            if v >= card {
                return Err((format!("user_cat[{i}]"), format!("value {v} outside cardinality {card}")));
            }
        }
        if j.user_num.len() != self.n_user_numeric {
            return Err((
                "user_num".into(),
                format!("expected {} values, got {}", self.n_user_numeric, j.user_num.len()),
            ));
        }
        if let Some(i) = j.user_num.iter().position(|v| !v.is_finite()) {
            return Err((format!("user_num[{i}]"), "value is not finite".into()));
        }
        let mut prev = 0;
        for (t, tp) in j.touchpoints.iter().enumerate() {
            if tp.channel >= self.n_channels {
                return Err((
                    format!("touchpoints[{t}].c"),
                    format!("channel {} outside [0, {})", tp.channel, self.n_channels),
                ));
            }
            if tp.features.len() != self.n_touch_features {
                return Err((
                    format!("touchpoints[{t}].f"),
                    format!("expected {} features, got {}", self.n_touch_features, tp.features.len()),
                ));
            }
            if tp.features.iter().any(|v| !v.is_finite()) {
                return Err((format!("touchpoints[{t}].f"), "feature is not finite".into()));
            }
            if !(tp.cost >= 0.0) || !tp.cost.is_finite() {
                return Err((format!("touchpoints[{t}].cost"), format!("cost {} must be finite and >= 0", tp.cost)));
            }
            if tp.timestamp < prev {
                return Err((format!("touchpoints[{t}].ts"), "timestamps must be non-decreasing".into()));
            }
            prev = tp.timestamp;
        }
        Ok(())
    }

    /// Smallest schema that admits every journey given.
    pub fn infer(journeys: &[Journey]) -> Result<Self, DataError> {
        let first = journeys.first().ok_or_else(|| DataError::Invalid("cannot infer a schema from no journeys".into()))?;
        let n_touch_features = first.touchpoints.first().map_or(0, |t| t.features.len());
        let mut cards = vec![0usize; first.user_cat.len()];
        let mut n_channels = 0;
        for j in journeys {
            for (c, &v) in cards.iter_mut().zip(&j.user_cat) {
                *c = (*c).max(v + 1);
            }
            for tp in &j.touchpoints {
                n_channels = n_channels.max(tp.channel + 1);
            }
        }
        Ok(Self { n_channels, n_touch_features, cat_cardinalities: cards, n_user_numeric: first.user_num.len() })
    }
}

/// Validated, immutable collection of journeys.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    schema: DatasetSchema,
    journeys: Vec<Journey>,
}

impl Dataset {
    pub fn new(schema: DatasetSchema, journeys: Vec<Journey>) -> Result<Self, DataError> {
        let mut ids = std::collections::HashSet::with_capacity(journeys.len());
        for (i, j) in journeys.iter().enumerate() {
            schema
                .check(j)
                .map_err(|(field, msg)| DataError::Invalid(format!("journey {} (#{i}), {field}: {msg}", j.id)))?;
            if !ids.insert(j.id.as_str()) {
                return Err(DataError::Invalid(format!("duplicate journey id {} (#{i})", j.id)));
            }
        }
        Ok(Self { schema, journeys })
    }

    pub fn schema(&self) -> &DatasetSchema {
        &self.schema
    }

    pub fn journeys(&self) -> &[Journey] {
        &self.journeys
    }

    pub fn len(&self) -> usize {
        self.journeys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.journeys.is_empty()
    }

    pub fn n_conversions(&self) -> usize {
        self.journeys.iter().filter(|j| j.converted).count()
    }

    pub fn n_touchpoints(&self) -> usize {
        self.journeys.iter().map(Journey::len).sum()
    }

    pub fn positive_rate(&self) -> f64 {
        if self.journeys.is_empty() {
            return 0.0;
        }
        self.n_conversions() as f64 / self.len() as f64
    }

    /// Sub-dataset with the journeys at `indices`, in the given order.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset { schema: self.schema.clone(), journeys: indices.iter().map(|&i| self.journeys[i].clone()).collect() }
    }

    pub fn into_journeys(self) -> Vec<Journey> {
        self.journeys
    }

    /// Summary counts in the layout of a dataset overview table.
    pub fn stats(&self) -> DatasetStats {
        let users: std::collections::BTreeSet<&str> = self.journeys.iter().map(|j| j.id.as_str()).collect();
        DatasetStats {
            users: users.len(),
            channels: self.schema.n_channels,
            journeys: self.len(),
            conversions: self.n_conversions(),
            touchpoints: self.n_touchpoints(),
            positive_rate: self.positive_rate(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetStats {
    pub users: usize,
    pub channels: usize,
    pub journeys: usize,
    pub conversions: usize,
    pub touchpoints: usize,
    pub positive_rate: f64,
}

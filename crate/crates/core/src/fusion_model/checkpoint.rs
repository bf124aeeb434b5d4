//! Binary checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic "DCRMTACK" | u32 version | u64 len + JSON header (kind, config, schema, history, best epoch)
//! u64 array count | per array: u64 name len + UTF-8 name, u32 rank, rank x u64 extents, f64 values
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::train::{EpochRecord, ModelKind, TrainedModel};
use super::{ModelConfig, ModelError};
use crate::datahub::DatasetSchema;
use crate::diffcore::Array;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"DCRMTACK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    kind: ModelKind,
    config: ModelConfig,
    schema: DatasetSchema,
    history: Vec<EpochRecord>,
    best_epoch: usize,
}

fn io_err(path: &Path, source: std::io::Error) -> ModelError {
    ModelError::Io { path: path.display().to_string(), source }
}

pub fn to_bytes(model: &TrainedModel) -> Result<Vec<u8>, ModelError> {
    let header = Header {
        kind: model.kind,
        config: model.config.clone(),
        schema: model.schema.clone(),
        history: model.history.clone(),
        best_epoch: model.best_epoch,
    };
    let json = serde_json::to_vec(&header).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + model.params.num_scalars() * 8);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for id in model.params.ids() {
        let name = model.params.name(id).as_bytes();
        let value = model.params.value(id);
        out.extend_from_slice(&(name.len() as u64).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(value.rank() as u32).to_le_bytes());
        for &d in value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save_model(model: &TrainedModel, path: &Path) -> Result<(), ModelError> {
    std::fs::write(path, to_bytes(model)?).map_err(|e| io_err(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], ModelError> {
        if self.buf.len() - self.pos < n {
            return Err(ModelError::Checkpoint(format!("truncated while reading {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, ModelError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64, ModelError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize, ModelError> {
        let n = self.u64(what)?;
        usize::try_from(n)
            .ok()
            .filter(|&n| n <= self.buf.len())
            .ok_or_else(|| ModelError::Checkpoint(format!("implausible {what} {n}")))
    }
}

pub fn from_bytes(buf: &[u8]) -> Result<TrainedModel, ModelError> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(ModelError::Checkpoint("not a model checkpoint (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!("format version {version}, expected {CHECKPOINT_VERSION}")));
    }
    let n = r.len("header length")?;
    let header: Header =
        serde_json::from_slice(r.take(n, "header")?).map_err(|e| ModelError::Checkpoint(format!("header: {e}")))?;
    let mut model = TrainedModel::init(header.kind, &header.config, &header.schema)?;
    let count = r.len("array count")?;
    if count != model.params.len() {
        return Err(ModelError::Checkpoint(format!("{count} arrays stored, model has {}", model.params.len())));
    }
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let n = r.len("name length")?;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| ModelError::Checkpoint("array name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let shape = (0..rank).map(|_| r.len("extent")).collect::<Result<Vec<_>, _>>()?;
        let total: usize = shape.iter().product();
        let raw = r.take(total.checked_mul(8).ok_or_else(|| ModelError::Checkpoint("array too large".into()))?, &name)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let id = model
            .params
            .id(&name)
            .ok_or_else(|| ModelError::Checkpoint(format!("unknown array `{name}`")))?;
        if !seen.insert(id) {
            return Err(ModelError::Checkpoint(format!("array `{name}` stored twice")));
        }
        let value = Array::new(shape, data).map_err(|e| ModelError::Checkpoint(format!("{name}: {e}")))?;
        model.params.set_value(id, value).map_err(|e| ModelError::Checkpoint(format!("{name}: {e}")))?;
    }
    if r.pos != buf.len() {
        return Err(ModelError::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    model.history = header.history;
    model.best_epoch = header.best_epoch;
    Ok(model)
}

pub fn load_model(path: &Path) -> Result<TrainedModel, ModelError> {
    from_bytes(&std::fs::read(path).map_err(|e| io_err(path, e))?)
}

//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! | bytes | content |
//! |-------|---------|
//! | 8     | magic `DUALINC\0` |
//! | 4     | format version (`u32`) |
//! | 4     | kind: 1 = base model, 2 = trained state (`u32`) |
//! | 8     | header length `h` (`u64`) |
//! | h     | UTF-8 JSON header |
//! | 8     | value count `n` (`u64`) |
//! | 8·n   | parameter values (`f64`) in header order |
//! | 32    | SHA-256 of every preceding byte |

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autodiff::{ParamRegistry, Tensor};
use crate::encoder::SurrogateEncoder;
use crate::error::{Error, Result};
use crate::model::{ToyModel, ToyModelConfig};
use crate::pool::{ContextWeights, LowRankPool, TaskTrace};

use super::config::RunConfig;
use super::metrics::AccuracyMatrix;
use super::state::{BaseModel, QueryEncoder, RehearsalBuffer, TrainedState};

pub const MAGIC: &[u8; 8] = b"DUALINC\0";
pub const CHECKPOINT_VERSION: u32 = 1;
const KIND_BASE: u32 = 1;
const KIND_STATE: u32 = 2;
const DIGEST_LEN: usize = 32;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BaseHeader {
    model_config: ToyModelConfig,
    seed: u64,
    params: Vec<ParamEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EncoderMeta {
    buckets: usize,
    table_sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateHeader {
    config: RunConfig,
    model_config: ToyModelConfig,
    base_seed: u64,
    pools: Vec<LowRankPool>,
    context: Option<ContextWeights>,
    traces: Vec<Vec<TaskTrace>>,
    encoder: Option<EncoderMeta>,
    completed: usize,
    global_step: usize,
    matrix: AccuracyMatrix,
    buffer: Option<RehearsalBuffer>,
    params: Vec<ParamEntry>,
}

fn table_digest(enc: &SurrogateEncoder) -> String {
    let mut h = Sha256::new();
    for b in 0..enc.buckets() {
        for v in enc.bucket_vector(b) {
            h.update(v.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}

fn param_entries(registry: &ParamRegistry) -> Vec<ParamEntry> {
    registry
        .ids()
        .map(|id| ParamEntry {
            name: registry.name(id).to_string(),
            shape: registry.get(id).shape().to_vec(),
            trainable: registry.is_trainable(id),
        })
        .collect()
}

fn encode_container<H: Serialize>(
    kind: u32,
    header: &H,
    registry: &ParamRegistry,
) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header)?;
    let count: usize = registry.ids().map(|id| registry.get(id).numel()).sum();
    let mut out = Vec::with_capacity(32 + json.len() + 8 * count + DIGEST_LEN);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&kind.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for id in registry.ids() {
        for v in registry.get(id).data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt {
                path: self.path.to_path_buf(),
                detail: format!("truncated at byte {} (needed {n} more)", self.pos),
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Corrupt {
            path: self.path.to_path_buf(),
            detail: format!("length {v}"),
        })
    }
}

fn decode_container<H: DeserializeOwned>(
    path: &Path,
    bytes: &[u8],
    kind: u32,
) -> Result<(H, Vec<f64>)> {
    let corrupt = |detail: String| Error::Corrupt {
        path: path.to_path_buf(),
        detail,
    };
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(corrupt("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let found_kind = r.u32()?;
    if found_kind != kind {
        return Err(corrupt(format!(
            "checkpoint kind {found_kind}, expected {kind}"
        )));
    }
    let header_len = r.len()?;
    let header_bytes = r.take(header_len)?;
    let count = r.len()?;
    let payload = r.take(
        count
            .checked_mul(8)
            .ok_or_else(|| corrupt("value count overflow".into()))?,
    )?;
    let body_end = r.pos;
    let digest = r.take(DIGEST_LEN)?;
    if r.pos != bytes.len() {
        return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    if Sha256::digest(&bytes[..body_end]).as_slice() != digest {
        return Err(corrupt("checksum mismatch".into()));
    }
    let header: H =
        serde_json::from_slice(header_bytes).map_err(|e| corrupt(format!("header: {e}")))?;
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, values))
}

fn rebuild_registry(path: &Path, entries: &[ParamEntry], values: &[f64]) -> Result<ParamRegistry> {
    let mut registry = ParamRegistry::new();
    let mut offset = 0;
    for e in entries {
        let n: usize = e.shape.iter().product();
        let data = values
            .get(offset..offset + n)
            .ok_or_else(|| Error::Corrupt {
                path: path.to_path_buf(),
                detail: format!("payload too short for parameter {}", e.name),
            })?;
        offset += n;
        let tensor = Tensor::new(e.shape.clone(), data.to_vec()).map_err(|err| Error::Corrupt {
            path: path.to_path_buf(),
            detail: format!("parameter {}: {err}", e.name),
        })?;
        registry.register(e.name.clone(), tensor, e.trainable)?;
    }
    if offset != values.len() {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            detail: "payload longer than the parameter table".into(),
        });
    }
    Ok(registry)
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn base_model_bytes(base: &BaseModel) -> Result<Vec<u8>> {
    let header = BaseHeader {
        model_config: base.model.config,
        seed: base.seed,
        params: param_entries(&base.registry),
    };
    encode_container(KIND_BASE, &header, &base.registry)
}

pub fn save_base_model(base: &BaseModel, path: &Path) -> Result<()> {
    write_atomic(path, &base_model_bytes(base)?)
}

pub fn load_base_model(path: &Path) -> Result<BaseModel> {
    let bytes = read_bytes(path)?;
    let (header, values): (BaseHeader, _) = decode_container(path, &bytes, KIND_BASE)?;
    let registry = rebuild_registry(path, &header.params, &values)?;
    let model = ToyModel::attach(header.model_config, &registry)?;
    if !registry.trainable_ids().is_empty() {
        return Err(Error::Corrupt {
            path: path.to_path_buf(),
            detail: "base model has trainable weights".into(),
        });
    }
    Ok(BaseModel {
        registry,
        model,
        seed: header.seed,
    })
}

pub fn state_bytes(state: &TrainedState) -> Result<Vec<u8>> {
    let encoder = match &state.encoder {
        Some(QueryEncoder::Text(enc)) => Some(EncoderMeta {
            buckets: enc.buckets(),
            table_sha256: table_digest(enc),
        }),
        _ => None,
    };
    let header = StateHeader {
        config: state.config.clone(),
        model_config: state.model.config,
        base_seed: state.base_seed,
        pools: state.pools.clone(),
        context: state.context,
        traces: state.traces.clone(),
        encoder,
        completed: state.completed,
        global_step: state.global_step,
        matrix: state.matrix.clone(),
        buffer: state.buffer.clone(),
        params: param_entries(&state.registry),
    };
    encode_container(KIND_STATE, &header, &state.registry)
}

pub fn save_state(state: &TrainedState, path: &Path) -> Result<()> {
    write_atomic(path, &state_bytes(state)?)
}

pub fn load_state(path: &Path) -> Result<TrainedState> {
    let bytes = read_bytes(path)?;
    let (h, values): (StateHeader, _) = decode_container(path, &bytes, KIND_STATE)?;
    let registry = rebuild_registry(path, &h.params, &values)?;
    let model = ToyModel::attach(h.model_config, &registry)?;
    for pool in &h.pools {
        let again = LowRankPool::attach(&registry, pool.prefix(), pool.dims(), pool.is_low_rank())?;
        if &again != pool {
            return Err(Error::Corrupt {
                path: path.to_path_buf(),
                detail: "pool handles disagree with the parameter table".into(),
            });
        }
    }
    let encoder = if h.pools.is_empty() {
        None
    } else {
        Some(QueryEncoder::build(&h.config, &h.model_config)?)
    };
    if let (Some(QueryEncoder::Text(enc)), Some(meta)) = (&encoder, &h.encoder) {
        if enc.buckets() != meta.buckets || table_digest(enc) != meta.table_sha256 {
            return Err(Error::Integrity {
                path: path.to_path_buf(),
                detail: "surrogate encoder table differs from the one used in training".into(),
            });
        }
    }
    Ok(TrainedState {
        config: h.config,
        base_seed: h.base_seed,
        registry,
        model,
        pools: h.pools,
        context: h.context,
        traces: h.traces,
        encoder,
        completed: h.completed,
        global_step: h.global_step,
        matrix: h.matrix,
        buffer: h.buffer,
    })
}

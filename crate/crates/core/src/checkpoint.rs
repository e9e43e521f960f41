//! Single-file checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "TNETCKPT"
//! version  u32      1
//! hlen     u64      byte length of the JSON header
//! header   hlen     UTF-8 JSON, see below
//! data     ...      raw f32 little-endian tensor bytes
//! ```
//!
//! The header holds the run configuration, the number of completed epochs
//! and optimizer steps, the best-by-PSNR record, the RNG position and a
//! tensor manifest. Each manifest entry is
//! `{"group", "name", "shape", "dtype": "f32", "offset", "nbytes"}` with
//! `offset` counted from the start of the data section. Groups are `param`
//! for network weights and `adam_m` / `adam_v` for optimizer moments.
//!
//! Training RNG streams are derived from `(seed, epoch)`, so the RNG
//! position is fully described by the seed and the next epoch.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::stack::StackTNet;
use crate::tensor::Tensor;
use crate::train::{BestRecord, RunConfig};

pub const MAGIC: &[u8; 8] = b"TNETCKPT";
pub const VERSION: u32 = 1;

/// Adam step count and first/second moments, one entry per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<T> {
    pub t: u64,
    pub m: ParamStore<T>,
    pub v: ParamStore<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    /// Epochs completed; training resumes at this epoch.
    pub epoch: usize,
    /// Optimizer steps completed.
    pub step: usize,
    pub best: Option<BestRecord>,
    pub params: ParamStore<f32>,
    pub optimizer: Option<AdamState<f32>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct RngPosition {
    scheme: String,
    seed: u64,
    next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    group: String,
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: usize,
    nbytes: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: RunConfig,
    epoch: usize,
    step: usize,
    best: Option<BestRecord>,
    rng: RngPosition,
    adam_step: Option<u64>,
    tensors: Vec<TensorEntry>,
}

const RNG_SCHEME: &str = "chacha8-per-epoch";

impl Checkpoint {
    /// The model stored in the checkpoint.
    pub fn model(&self) -> Result<StackTNet<f32>> {
        StackTNet::with_params(self.config.model, self.config.stack, self.params.clone())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut groups: Vec<(&str, &ParamStore<f32>)> = vec![("param", &self.params)];
        if let Some(opt) = &self.optimizer {
            groups.push(("adam_m", &opt.m));
            groups.push(("adam_v", &opt.v));
        }
        let mut tensors = Vec::new();
        let mut data = Vec::new();
        for (group, store) in groups {
            for (name, t) in store.iter() {
                let offset = data.len();
                for v in t.data() {
                    data.extend_from_slice(&v.to_le_bytes());
                }
                tensors.push(TensorEntry {
                    group: group.to_string(),
                    name: name.to_string(),
                    shape: t.shape().to_vec(),
                    dtype: "f32".to_string(),
                    offset,
                    nbytes: data.len() - offset,
                });
            }
        }
        let header = Header {
            config: self.config.clone(),
            epoch: self.epoch,
            step: self.step,
            best: self.best,
            rng: RngPosition {
                scheme: RNG_SCHEME.to_string(),
                seed: self.config.train.seed,
                next_epoch: self.epoch,
            },
            adam_step: self.optimizer.as_ref().map(|o| o.t),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + data.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&data);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::format(path, reason);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header".into()))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..data_start]).map_err(|e| bad(format!("header: {e}")))?;
        let data = &bytes[data_start..];

        let mut params = ParamStore::new();
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        for e in &header.tensors {
            if e.dtype != "f32" {
                return Err(bad(format!("tensor `{}` has unsupported dtype {}", e.name, e.dtype)));
            }
            let numel: usize = e.shape.iter().product();
            let end = e.offset.checked_add(e.nbytes).filter(|&x| x <= data.len());
            let Some(end) = end.filter(|_| e.nbytes == 4 * numel) else {
                return Err(bad(format!("tensor `{}` has an inconsistent extent", e.name)));
            };
            let values = data[e.offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            let t = Tensor::new(&e.shape, values)?;
            let store = match e.group.as_str() {
                "param" => &mut params,
                "adam_m" => &mut m,
                "adam_v" => &mut v,
                other => return Err(bad(format!("unknown tensor group `{other}`"))),
            };
            store.insert(e.name.clone(), t)?;
        }
        let optimizer = header.adam_step.map(|t| AdamState { t, m, v });
        Ok(Self {
            config: header.config,
            epoch: header.epoch,
            step: header.step,
            best: header.best,
            params,
            optimizer,
        })
    }

    /// Write via a temporary file and rename, so a crash never leaves a
    /// partial checkpoint behind.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("ckpt.tmp");
        let mut f = std::fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::train::{Preset, TrainConfig, Adam};

    fn sample() -> Checkpoint {
        let config = RunConfig::preset(Preset::Micro);
        let model = StackTNet::<f32>::build(config.model, config.stack, 3).unwrap();
        let mut adam = Adam::new(&TrainConfig::micro(), &model.params);
        adam.state.t = 7;
        Checkpoint {
            config,
            epoch: 4,
            step: 32,
            best: Some(BestRecord { epoch: 2, psnr_db: Some(21.5) }),
            params: model.params,
            optimizer: Some(adam.state),
        }
    }

    #[test]
    fn round_trip_is_exact() {
        let ck = sample();
        let bytes = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = sample().to_bytes().unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..10], Path::new("x")).is_err());
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 4], Path::new("x")).is_err());
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&wrong, Path::new("x")), Err(Error::Format { .. })));
    }
}

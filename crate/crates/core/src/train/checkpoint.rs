//! Binary checkpoint format.
//!
//! Layout: `RRPI`, format version (u32 LE), header length (u64 LE), a JSON
//! header listing every blob, then the blobs as little-endian `f32` in
//! header order: parameters first, then the Adam first and second moments.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::config::Stage;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, RerenderModel};
use crate::nn::{Adam, AdamConfig, Moments, ParamSet};
use crate::scalar::Scalar;
use crate::tensor::Shape;

pub const MAGIC: [u8; 4] = *b"RRPI";
pub const FORMAT_VERSION: u32 = 1;

/// Where a training run stands. All random streams are derived from `seed`
/// and the step counter, so this is also the RNG state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub stage: Stage,
    /// Epoch the next step belongs to.
    pub epoch: usize,
    /// Steps completed in `stage`.
    pub step: usize,
    pub seed: u64,
    /// Stages finished so far, in order.
    pub history: Vec<Stage>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum BlobKind {
    Param,
    AdamM,
    AdamV,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct BlobEntry {
    name: String,
    kind: BlobKind,
    shape: [usize; 4],
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    state: TrainState,
    perceptual_seed: u64,
    optimizer: Option<(AdamConfig, u64)>,
    blobs: Vec<BlobEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedBlob {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub config: AdamConfig,
    pub step: u64,
    /// `(name, m, v)` in name order.
    pub moments: Vec<(String, Vec<f32>, Vec<f32>)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub state: TrainState,
    pub perceptual_seed: u64,
    pub params: Vec<NamedBlob>,
    pub optimizer: Option<OptimizerState>,
}

fn to_f32<T: Scalar>(v: &[T]) -> Vec<f32> {
    v.iter().map(|x| x.to_f32_lossy()).collect()
}

fn from_f32<T: Scalar>(v: &[f32]) -> Vec<T> {
    v.iter().map(|&x| T::of(x as f64)).collect()
}

impl Checkpoint {
    pub fn capture<T: Scalar>(
        model: &RerenderModel<T>,
        optimizer: Option<&Adam<T>>,
        state: TrainState,
        perceptual_seed: u64,
    ) -> Self {
        let params = model
            .params
            .iter()
            .map(|p| NamedBlob { name: p.name.clone(), shape: p.tensor.shape(), data: to_f32(&p.tensor.data()) })
            .collect();
        let optimizer = optimizer.map(|o| OptimizerState {
            config: o.config,
            step: o.step,
            moments: o.moments.iter().map(|(k, m)| (k.clone(), to_f32(&m.m), to_f32(&m.v))).collect(),
        });
        Self { model: model.config.clone(), state, perceptual_seed, params, optimizer }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs: Vec<BlobEntry> =
            self.params.iter().map(|p| BlobEntry { name: p.name.clone(), kind: BlobKind::Param, shape: p.shape.0 }).collect();
        let mut payload: Vec<&[f32]> = self.params.iter().map(|p| p.data.as_slice()).collect();
        if let Some(o) = &self.optimizer {
            for (kind, pick) in [(BlobKind::AdamM, 0usize), (BlobKind::AdamV, 1)] {
                for (name, m, v) in &o.moments {
                    let data = if pick == 0 { m } else { v };
                    blobs.push(BlobEntry { name: name.clone(), kind, shape: [data.len(), 1, 1, 1] });
                    payload.push(data);
                }
            }
        }
        let header = Header {
            model: self.model.clone(),
            state: self.state.clone(),
            perceptual_seed: self.perceptual_seed,
            optimizer: self.optimizer.as_ref().map(|o| (o.config, o.step)),
            blobs,
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        let total: usize = payload.iter().map(|p| p.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 4 * total);
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for p in payload {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: String| Error::Checkpoint(m);
        if bytes.len() < 16 || bytes[..4] != MAGIC {
            return Err(bad("not a checkpoint (bad magic bytes)".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!("format version {version}, expected {FORMAT_VERSION}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = &bytes[16..];
        if body.len() < hlen {
            return Err(bad("truncated header".into()));
        }
        let header: Header = serde_json::from_slice(&body[..hlen]).map_err(|e| bad(format!("header: {e}")))?;
        let mut rest = &body[hlen..];
        let mut take = |entry: &BlobEntry| -> Result<Vec<f32>> {
            let n: usize = entry.shape.iter().product();
            if rest.len() < 4 * n {
                return Err(bad(format!("truncated blob `{}`", entry.name)));
            }
            let (head, tail) = rest.split_at(4 * n);
            rest = tail;
            Ok(head.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes"))).collect())
        };
        let mut params = Vec::new();
        let mut ms = Vec::new();
        let mut vs = Vec::new();
        for entry in &header.blobs {
            let data = take(entry)?;
            match entry.kind {
                BlobKind::Param => params.push(NamedBlob { name: entry.name.clone(), shape: Shape(entry.shape), data }),
                BlobKind::AdamM => ms.push((entry.name.clone(), data)),
                BlobKind::AdamV => vs.push((entry.name.clone(), data)),
            }
        }
        if !rest.is_empty() {
            return Err(bad(format!("{} trailing bytes", rest.len())));
        }
        let optimizer = match header.optimizer {
            Some((config, step)) => {
                if ms.len() != vs.len() || ms.iter().zip(&vs).any(|(m, v)| m.0 != v.0 || m.1.len() != v.1.len()) {
                    return Err(bad("optimizer moments are inconsistent".into()));
                }
                let moments = ms.into_iter().zip(vs).map(|((name, m), (_, v))| (name, m, v)).collect();
                Some(OptimizerState { config, step, moments })
            }
            None if ms.is_empty() && vs.is_empty() => None,
            None => return Err(bad("moments present without optimizer settings".into())),
        };
        Ok(Self { model: header.model, state: header.state, perceptual_seed: header.perceptual_seed, params, optimizer })
    }

    /// Writes to a temporary sibling and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let name = path.file_name().ok_or_else(|| Error::Checkpoint(format!("{} is not a file path", path.display())))?;
        let tmp = dir.join(format!(".{}.tmp", name.to_string_lossy()));
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// Copies stored values into `params`; every parameter must be present
    /// with a matching shape and no stored name may be unknown.
    pub fn write_params<T: Scalar>(&self, params: &ParamSet<T>) -> Result<()> {
        if self.params.len() != params.len() {
            let unknown = self.params.iter().find(|b| params.get(&b.name).is_none());
            if let Some(b) = unknown {
                return Err(Error::Checkpoint(format!("unexpected parameter `{}`", b.name)));
            }
        }
        for p in params.iter() {
            let blob = self
                .params
                .iter()
                .find(|b| b.name == p.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{}`", p.name)))?;
            if blob.shape != p.tensor.shape() {
                return Err(Error::Checkpoint(format!("`{}` has shape {} but {} is stored", p.name, p.tensor.shape(), blob.shape)));
            }
        }
        // Validated in full before anything is written.
        for p in params.iter() {
            let blob = self.params.iter().find(|b| b.name == p.name).expect("validated");
            p.tensor.data_mut().copy_from_slice(&from_f32::<T>(&blob.data));
        }
        Ok(())
    }

    pub fn build_model<T: Scalar>(&self) -> Result<RerenderModel<T>> {
        let model = RerenderModel::new(self.model.clone())?;
        self.write_params(&model.params)?;
        Ok(model)
    }

    pub fn build_optimizer<T: Scalar>(&self) -> Option<Adam<T>> {
        self.optimizer.as_ref().map(|o| Adam {
            config: o.config,
            step: o.step,
            moments: o
                .moments
                .iter()
                .map(|(k, m, v)| (k.clone(), Moments { m: from_f32(m), v: from_f32(v) }))
                .collect(),
        })
    }

    /// SHA-256 over the names and values of parameters under `prefix`.
    pub fn hash_prefix(&self, prefix: &str) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.name.starts_with(prefix)) {
            h.update(p.name.as_bytes());
            for v in &p.data {
                h.update(v.to_le_bytes());
            }
        }
        hex(&h.finalize())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// SHA-256 over the names and values of live parameters under `prefix`,
/// identical to [`Checkpoint::hash_prefix`] for `f32` models.
pub fn hash_params<T: Scalar>(params: &ParamSet<T>, prefix: &str) -> String {
    let mut h = Sha256::new();
    for p in params.with_prefix(prefix) {
        h.update(p.name.as_bytes());
        for v in p.tensor.data().iter() {
            h.update(v.to_f32_lossy().to_le_bytes());
        }
    }
    hex(&h.finalize())
}

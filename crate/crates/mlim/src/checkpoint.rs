//! Checkpoint file: `MLIMCKPT`, header length (u64 LE), JSON header, then a
//! contiguous little-endian float payload whose byte ranges are listed in the
//! header.

use std::fs;
use std::path::Path;

use mlim_core::config::{AdamConfig, RunConfig};
use mlim_core::optim::Adam;
use mlim_core::{Matrix, Mlim, ParamStore};
use serde::{Deserialize, Serialize};

use crate::error::{AppError, AppResult};

pub const MAGIC: &[u8; 8] = b"MLIMCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerHeader {
    pub step: u64,
    pub config: AdamConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format_version: u32,
    pub dtype: Dtype,
    /// Parameters first, then `optimizer.m.<name>` and `optimizer.v.<name>`
    /// moments when an optimizer is stored.
    pub tensors: Vec<TensorEntry>,
    pub optimizer: Option<OptimizerHeader>,
    pub config: RunConfig,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub optimizer: Option<Adam>,
    pub config: RunConfig,
}

impl Checkpoint {
    /// Errors unless the parameters fit the model described by `config.model`.
    pub fn model(&self) -> AppResult<Mlim> {
        let model = Mlim::new(self.config.model.clone())?;
        model.check_params(&self.params)?;
        Ok(model)
    }
}

pub fn to_bytes(ckpt: &Checkpoint, dtype: Dtype) -> AppResult<Vec<u8>> {
    let mut tensors: Vec<(String, &Matrix)> = ckpt.params.iter().map(|(_, n, t)| (n.to_string(), t)).collect();
    if let Some(opt) = &ckpt.optimizer {
        if opt.m.len() != ckpt.params.len() {
            return Err(AppError::Config("optimizer state does not match parameters".into()));
        }
        for (kind, moments) in [("m", &opt.m), ("v", &opt.v)] {
            for ((_, name, _), t) in ckpt.params.iter().zip(moments) {
                tensors.push((format!("optimizer.{kind}.{name}"), t));
            }
        }
    }
    let mut entries = Vec::with_capacity(tensors.len());
    let mut payload = Vec::new();
    for (name, t) in &tensors {
        let offset = payload.len();
        for &x in t.data() {
            match dtype {
                Dtype::F32 => payload.extend_from_slice(&(x as f32).to_le_bytes()),
                Dtype::F64 => payload.extend_from_slice(&x.to_le_bytes()),
            }
        }
        entries.push(TensorEntry { name: name.clone(), shape: [t.rows(), t.cols()], offset, length: payload.len() - offset });
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype,
        tensors: entries,
        optimizer: ckpt.optimizer.as_ref().map(|o| OptimizerHeader { step: o.step, config: o.config.clone() }),
        config: ckpt.config.clone(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8], path: &Path) -> AppResult<Checkpoint> {
    let bad = |msg: String| AppError::format(path, msg);
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file".into()));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let json = bytes.get(16..16usize.saturating_add(hlen)).ok_or_else(|| bad("truncated header".into()))?;
    let version: serde_json::Value = serde_json::from_slice(json).map_err(|e| bad(format!("header: {e}")))?;
    match version.get("format_version").and_then(|v| v.as_u64()) {
        Some(v) if v == FORMAT_VERSION as u64 => {}
        Some(v) => return Err(bad(format!("format version {v}, this build reads version {FORMAT_VERSION}"))),
        None => return Err(bad("header lacks format_version".into())),
    }
    let header: Header = serde_json::from_value(version).map_err(|e| bad(format!("header: {e}")))?;
    let payload = &bytes[16 + hlen..];
    let size = header.dtype.size();
    let mut expected_offset = 0;
    for e in &header.tensors {
        if e.offset != expected_offset || e.length != e.shape[0] * e.shape[1] * size {
            return Err(bad(format!("corrupt offsets at tensor `{}`", e.name)));
        }
        expected_offset += e.length;
    }
    if payload.len() < expected_offset {
        return Err(bad(format!("truncated payload: {} of {expected_offset} bytes", payload.len())));
    }
    if payload.len() > expected_offset {
        return Err(bad(format!("corrupt offsets: {} bytes past the last tensor", payload.len() - expected_offset)));
    }
    let read = |e: &TensorEntry| -> Matrix {
        let raw = &payload[e.offset..e.offset + e.length];
        let data = match header.dtype {
            Dtype::F32 => raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            Dtype::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        Matrix::from_vec(e.shape[0], e.shape[1], data)
    };
    let n_params = if header.optimizer.is_some() {
        if header.tensors.len() % 3 != 0 {
            return Err(bad("optimizer moments do not pair with parameters".into()));
        }
        header.tensors.len() / 3
    } else {
        header.tensors.len()
    };
    let mut params = ParamStore::new();
    for e in &header.tensors[..n_params] {
        params.insert(e.name.clone(), read(e)).map_err(|err| bad(err.to_string()))?;
    }
    let optimizer = match &header.optimizer {
        None => None,
        Some(o) => {
            let mut moments = [Vec::with_capacity(n_params), Vec::with_capacity(n_params)];
            for (k, kind) in ["m", "v"].iter().enumerate() {
                for (i, e) in header.tensors[(k + 1) * n_params..(k + 2) * n_params].iter().enumerate() {
                    let want = format!("optimizer.{kind}.{}", header.tensors[i].name);
                    if e.name != want || e.shape != header.tensors[i].shape {
                        return Err(bad(format!("optimizer tensor `{}` does not match `{want}`", e.name)));
                    }
                    moments[k].push(read(e));
                }
            }
            let [m, v] = moments;
            Some(Adam { config: o.config.clone(), step: o.step, m, v })
        }
    };
    Ok(Checkpoint { params, optimizer, config: header.config })
}

/// Writes through a temporary file so a crash never leaves a torn checkpoint.
pub fn save(ckpt: &Checkpoint, path: &Path, dtype: Dtype) -> AppResult<()> {
    let bytes = to_bytes(ckpt, dtype)?;
    let tmp = path.with_extension("ckpt.tmp");
    fs::write(&tmp, bytes).map_err(|e| AppError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| AppError::io(path, e))
}

pub fn load(path: &Path) -> AppResult<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| AppError::io(path, e))?;
    from_bytes(&bytes, path)
}

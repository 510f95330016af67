//! Little-endian checkpoint layout:
//!
//! ```text
//! "EQVT" | u32 version | u32 len, JSON architecture | u32 count |
//! count x (u16 len, name | u8 dtype (0 = f32) | u8 rank | rank x u64 | f32 data)
//! ```
//!
//! Optimizer state, when present, is stored as extra tensors named
//! `optim.m.<param>`, `optim.v.<param>` and `optim.step`.

use std::fs;
use std::path::Path;

use super::OptimizerState;
use crate::error::{Error, Result};
use crate::tensorkit::Tensor;
use crate::vit::{ViTConfig, ViTModel};

pub const MAGIC: [u8; 4] = *b"EQVT";
pub const VERSION: u32 = 1;

const OPTIM_M: &str = "optim.m.";
const OPTIM_V: &str = "optim.v.";
const OPTIM_STEP: &str = "optim.step";

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: ViTModel,
    pub optimizer: Option<OptimizerState>,
}

pub fn encode_checkpoint(model: &ViTModel, state: Option<&OptimizerState>) -> Result<Vec<u8>> {
    let mut tensors: Vec<(String, &Tensor<f32>)> = model.named_params().map(|(n, t)| (n.to_string(), t)).collect();
    let step;
    if let Some(s) = state {
        if s.m.len() != tensors.len() || s.v.len() != tensors.len() {
            return Err(Error::Contract("optimizer state does not match the model".into()));
        }
        if s.t > 1 << 24 {
            return Err(Error::Contract(format!(
                "step counter {} exceeds the exact f32 range",
                s.t
            )));
        }
        step = Tensor::new(&[1], vec![s.t as f32])?;
        let names: Vec<String> = model.names().to_vec();
        tensors.extend(names.iter().zip(&s.m).map(|(n, t)| (format!("{OPTIM_M}{n}"), t)));
        tensors.extend(names.iter().zip(&s.v).map(|(n, t)| (format!("{OPTIM_V}{n}"), t)));
        tensors.push((OPTIM_STEP.to_string(), &step));
    }

    let config = serde_json::to_vec(model.config()).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(0);
        out.push(t.rank() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Write atomically: the bytes go to a sibling temp file that is renamed into place.
pub fn save_checkpoint(model: &ViTModel, state: Option<&OptimizerState>, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(model, state)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corruption(format!("file ends inside {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r
        .take(4, "magic")
        .map_err(|_| Error::Format("file is too short to be a checkpoint".into()))?;
    if magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:02x?}, expected \"EQVT\"")));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let len = r.u32("config length")? as usize;
    let config: ViTConfig = serde_json::from_slice(r.take(len, "architecture descriptor")?)
        .map_err(|e| Error::Corruption(format!("architecture descriptor: {e}")))?;
    let count = r.u32("tensor count")?;
    let mut named = Vec::new();
    for _ in 0..count {
        let name_len = r.u16("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| Error::Corruption("tensor name is not UTF-8".into()))?
            .to_string();
        let dtype = r.u8("dtype")?;
        if dtype != 0 {
            return Err(Error::Corruption(format!("{name}: unknown dtype code {dtype}")));
        }
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape
                .push(usize::try_from(r.u64("dims")?).map_err(|_| Error::Corruption(format!("{name}: dim overflow")))?);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| Error::Corruption(format!("{name}: shape {shape:?} overflows")))?;
        let raw = r.take(numel, &name)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Corruption(format!("{name}: {e}")))?;
        named.push((name, t));
    }
    if r.pos != bytes.len() {
        return Err(Error::Corruption(format!("{} trailing bytes", bytes.len() - r.pos)));
    }

    let mut params = Vec::new();
    let (mut m, mut v, mut step) = (Vec::new(), Vec::new(), None);
    for (name, t) in named {
        if let Some(p) = name.strip_prefix(OPTIM_M) {
            m.push((p.to_string(), t));
        } else if let Some(p) = name.strip_prefix(OPTIM_V) {
            v.push((p.to_string(), t));
        } else if name == OPTIM_STEP {
            step = Some(t);
        } else {
            params.push((name, t));
        }
    }
    let model = ViTModel::from_named(&config, params).map_err(|e| match e {
        Error::Config(msg) => Error::Corruption(format!("architecture descriptor: {msg}")),
        other => other,
    })?;
    let optimizer = match step {
        None if m.is_empty() && v.is_empty() => None,
        None => return Err(Error::Corruption("optimizer moments without a step counter".into())),
        Some(step) => {
            let t = match step.data() {
                [s] if s.fract() == 0.0 && *s >= 0.0 => *s as u64,
                _ => return Err(Error::Corruption("malformed optimizer step counter".into())),
            };
            let m = ViTModel::from_named(&config, m)?.params().to_vec();
            let v = ViTModel::from_named(&config, v)?.params().to_vec();
            Some(OptimizerState { m, v, t })
        }
    };
    Ok(Checkpoint { model, optimizer })
}

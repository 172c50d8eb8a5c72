use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{check_layout, Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"YNET";
pub const VERSION: u32 = 1;

/// Serialized model: config, named tensors (parameters followed by
/// running statistics) and the optimiser step count.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub step: u64,
}

const MEAN: &str = ".running_mean";
const VAR: &str = ".running_var";
const TRACKED: &str = ".tracked";

impl Checkpoint {
    pub fn from_model(model: &Model<f32>, step: u64) -> Self {
        let mut tensors: Vec<(String, Tensor<f32>)> = model
            .params
            .iter()
            .map(|(n, p)| (n.to_string(), p.value.clone()))
            .collect();
        for (name, s) in model.stats.iter() {
            let c = s.mean.len();
            let vec = |v: &Vec<f32>| Tensor::new(vec![c], v.clone()).expect("stat width");
            tensors.push((format!("{name}{MEAN}"), vec(&s.mean)));
            tensors.push((format!("{name}{VAR}"), vec(&s.var)));
            tensors.push((format!("{name}{TRACKED}"), Tensor::scalar(s.tracked as f32)));
        }
        Checkpoint {
            config: model.config.clone(),
            tensors,
            step,
        }
    }

    /// Rebuilds the model, rejecting unknown, missing or misshapen tensors.
    pub fn to_model(&self) -> Result<Model<f32>> {
        self.config
            .validate()
            .map_err(|e| Error::format(format!("checkpoint config: {e}")))?;
        let mut model = Model::<f32>::new(self.config.clone(), 0)?;
        let mut seen = std::collections::HashSet::new();
        for (name, t) in &self.tensors {
            if !seen.insert(name.as_str()) {
                return Err(Error::format(format!("tensor `{name}` appears twice")));
            }
            if let Some(p) = model.params.get_mut(name) {
                if p.value.shape() != t.shape() {
                    return Err(Error::format(format!(
                        "tensor `{name}` has shape {:?}, config expects {:?}",
                        t.shape(),
                        p.value.shape()
                    )));
                }
                p.value = t.clone();
                continue;
            }
            let stat = [MEAN, VAR, TRACKED]
                .iter()
                .find_map(|sfx| name.strip_suffix(sfx).map(|base| (base, *sfx)));
            let Some((base, sfx)) = stat else {
                return Err(Error::format(format!(
                    "unknown tensor `{name}` for architecture {}",
                    self.config.architecture
                )));
            };
            let s = model.stats.get_mut(base).map_err(|_| {
                Error::format(format!(
                    "unknown tensor `{name}` for architecture {}",
                    self.config.architecture
                ))
            })?;
            let want = if sfx == TRACKED { 1 } else { s.mean.len() };
            if t.shape() != [want] {
                return Err(Error::format(format!(
                    "tensor `{name}` has shape {:?}, expected [{want}]",
                    t.shape()
                )));
            }
            match sfx {
                MEAN => s.mean = t.data().to_vec(),
                VAR => s.var = t.data().to_vec(),
                _ => s.tracked = t.data()[0] as u64,
            }
        }
        let expected = model.params.len() + 3 * model.stats.len();
        if seen.len() != expected {
            let missing = model
                .params
                .names()
                .iter()
                .find(|n| !seen.contains(n.as_str()))
                .cloned()
                .unwrap_or_else(|| "batch-norm statistics".into());
            return Err(Error::format(format!("checkpoint is missing tensor `{missing}`")));
        }
        check_layout(&model.config, &model.params, &model.stats)?;
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let config = self.config.to_text();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(config.len() as u32).to_le_bytes());
        out.extend_from_slice(config.as_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out.extend_from_slice(&self.step.to_le_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::format("bad magic: not a checkpoint file"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::format(format!("unsupported version {version} (expected {VERSION})")));
        }
        let len = r.u32("config length")? as usize;
        let text = std::str::from_utf8(r.take(len, "config")?)
            .map_err(|_| Error::format("config is not valid UTF-8"))?;
        let config = ModelConfig::from_text(text).map_err(|e| Error::format(format!("config: {e}")))?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for i in 0..count {
            let field = format!("tensor {i} name");
            let name_len = r.u16(&field)? as usize;
            let name = std::str::from_utf8(r.take(name_len, &field)?)
                .map_err(|_| Error::format(format!("{field} is not valid UTF-8")))?
                .to_string();
            let rank = r.take(1, &format!("rank of `{name}`"))?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64(&format!("dims of `{name}`"))? as usize);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(4).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::format(format!("data of `{name}` truncated or oversized")))?;
            let raw = r.take(numel * 4, &format!("data of `{name}`"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::format(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, t));
        }
        let step = r.u64("step count")?;
        if r.remaining() != 0 {
            return Err(Error::format(format!("{} trailing bytes after step count", r.remaining())));
        }
        Ok(Checkpoint { config, tensors, step })
    }

    /// Atomic write: a temporary sibling file renamed over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let write = || -> std::io::Result<()> {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        std::fs::rename(&tmp, path)
    };
    write().map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(format!("file truncated in {field}")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, field: &str) -> Result<u16> {
        let b = self.take(2, field)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
}

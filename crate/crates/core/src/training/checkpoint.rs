//! Binary checkpoint: magic `MNOC`, `u32` version, `u32`-length-prefixed
//! `key = value` text, then each parameter as `name, rank, dims, f64 data`,
//! then an optional optimizer section. All integers and floats are
//! little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::optim::{AdamW, AdamWConfig};
use super::{Progress, TrainConfig};
use crate::config::KvMap;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, OperatorModel};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MNOC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: OperatorModel,
    pub train: TrainConfig,
    pub progress: Progress,
    pub optimizer: Option<AdamW>,
}

fn put_u32(buf: &mut Vec<u8>, v: usize) {
    buf.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(buf: &mut Vec<u8>, data: &[f64]) {
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serialises a checkpoint; identical inputs give identical bytes.
pub fn encode_checkpoint(ckpt: &Checkpoint) -> Vec<u8> {
    let mut kv = KvMap::new();
    ckpt.model.config.write_kv(&mut kv, "model.");
    ckpt.train.write_kv(&mut kv, "train.");
    ckpt.progress.write_kv(&mut kv, "progress.");
    let text = kv.render();

    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION as usize);
    put_u32(&mut buf, text.len());
    buf.extend_from_slice(text.as_bytes());

    let named = ckpt.model.params.named();
    put_u32(&mut buf, named.len());
    for (name, t) in &named {
        put_u32(&mut buf, name.len());
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.rank());
        for &d in t.shape() {
            put_u32(&mut buf, d);
        }
        put_f64s(&mut buf, t.data());
    }

    match &ckpt.optimizer {
        None => buf.push(0),
        Some(opt) => {
            buf.push(1);
            buf.extend_from_slice(&opt.t.to_le_bytes());
            let c = opt.config;
            put_f64s(&mut buf, &[c.beta1, c.beta2, c.eps, c.weight_decay]);
            for (m, v) in opt.m.iter().zip(&opt.v) {
                put_f64s(&mut buf, m.data());
                put_f64s(&mut buf, v.data());
            }
        }
    }
    buf
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    let bytes = encode_checkpoint(ckpt);
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format("checkpoint is truncated".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        Ok(self
            .take(n * 8)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint text is not UTF-8".into()))
    }
}

/// Parsed checkpoint pieces before they are matched against a model.
struct RawCheckpoint {
    model_cfg: ModelConfig,
    train: TrainConfig,
    progress: Progress,
    tensors: Vec<(String, Tensor)>,
    optimizer: Option<(u64, AdamWConfig, Vec<f64>)>,
}

fn decode(bytes: &[u8]) -> Result<RawCheckpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).ok() != Some(&CHECKPOINT_MAGIC[..]) {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()?;
    let text = r.string(len)?;
    let mut kv = KvMap::parse(&text)?;
    let mut model_cfg = ModelConfig::default();
    model_cfg.read_kv(&mut kv, "model.")?;
    let mut train = TrainConfig::default();
    train.read_kv(&mut kv, "train.")?;
    let mut progress = Progress::default();
    progress.read_kv(&mut kv, "progress.")?;
    kv.finish()?;

    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()?;
        let name = r.string(name_len)?;
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().product();
        let data = r.f64s(numel)?;
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let optimizer = match r.take(1)?[0] {
        0 => None,
        1 => {
            let t = r.u64()?;
            let c = r.f64s(4)?;
            let config = AdamWConfig {
                beta1: c[0],
                beta2: c[1],
                eps: c[2],
                weight_decay: c[3],
            };
            let numel: usize = tensors.iter().map(|(_, t)| t.numel()).sum();
            Some((t, config, r.f64s(2 * numel)?))
        }
        other => return Err(Error::Format(format!("bad optimizer flag {other}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(RawCheckpoint {
        model_cfg,
        train,
        progress,
        tensors,
        optimizer,
    })
}

/// Overwrites `model`'s parameters with the stored tensors, which must match
/// its names and shapes one for one.
fn install(model: &mut OperatorModel, tensors: Vec<(String, Tensor)>) -> Result<()> {
    let expected: Vec<(String, Vec<usize>)> = model
        .params
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect();
    for (i, (name, shape)) in expected.iter().enumerate() {
        match tensors.get(i) {
            Some((n, t)) if n == name && t.shape() == shape.as_slice() => {}
            Some((n, t)) if n == name => {
                return Err(Error::ParamShape {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: t.shape().to_vec(),
                })
            }
            Some((n, _)) => {
                return Err(Error::Format(format!(
                    "parameter {i} is `{n}` in the checkpoint but `{name}` in the model"
                )))
            }
            None => return Err(Error::Format(format!("checkpoint lacks parameter `{name}`"))),
        }
    }
    if tensors.len() != expected.len() {
        return Err(Error::Format(format!(
            "checkpoint holds {} parameters, model has {}",
            tensors.len(),
            expected.len()
        )));
    }
    let mut it = tensors.into_iter();
    model.params.for_each_mut(&mut |t| *t = it.next().expect("length checked").1);
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let raw = decode(&fs::read(path)?)?;
    let mut model = OperatorModel::new(raw.model_cfg)?;
    let shapes: Vec<Vec<usize>> = raw.tensors.iter().map(|(_, t)| t.shape().to_vec()).collect();
    install(&mut model, raw.tensors)?;
    let optimizer = raw.optimizer.map(|(t, config, flat)| {
        let mut opt = AdamW::new(config, &shapes.iter().map(Vec::as_slice).collect::<Vec<_>>());
        opt.t = t;
        let mut off = 0;
        for (m, v) in opt.m.iter_mut().zip(opt.v.iter_mut()) {
            let n = m.numel();
            m.data_mut().copy_from_slice(&flat[off..off + n]);
            v.data_mut().copy_from_slice(&flat[off + n..off + 2 * n]);
            off += 2 * n;
        }
        opt
    });
    Ok(Checkpoint {
        model,
        train: raw.train,
        progress: raw.progress,
        optimizer,
    })
}

/// Loads only the parameters into an existing model; any shape disagreement
/// is reported as [`Error::ParamShape`] naming the parameter.
pub fn load_params_into(path: &Path, model: &mut OperatorModel) -> Result<()> {
    let raw = decode(&fs::read(path)?)?;
    install(model, raw.tensors)
}

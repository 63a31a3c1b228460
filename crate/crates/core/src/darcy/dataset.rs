use std::fs;
use std::io::Write;
use std::path::Path;

use rayon::prelude::*;

use super::{generate_sample, CoefficientSpec, DarcySample, Field};
use crate::error::{Error, Result};
use crate::rng;

pub const DATASET_MAGIC: &[u8; 4] = b"MNO1";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 20;

/// Samples sharing one resolution, in generation order.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub n: usize,
    pub samples: Vec<DarcySample>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DatasetSummary {
    pub count: usize,
    pub n: usize,
    pub mean_u: f64,
    pub std_u: f64,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn summary(&self) -> DatasetSummary {
        let total = (self.samples.len() * self.n * self.n).max(1) as f64;
        let mean_u = self.samples.iter().flat_map(|s| s.u.values()).sum::<f64>() / total;
        let var = self
            .samples
            .iter()
            .flat_map(|s| s.u.values())
            .map(|v| (v - mean_u) * (v - mean_u))
            .sum::<f64>()
            / total;
        DatasetSummary {
            count: self.samples.len(),
            n: self.n,
            mean_u,
            std_u: var.sqrt(),
        }
    }
}

/// Sample `i` depends only on `(seed, i)`, so any thread schedule yields the
/// same dataset.
pub fn generate_dataset(n: usize, count: usize, seed: u64, spec: &CoefficientSpec) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::Config(format!("grid side must be at least 2, got {n}")));
    }
    let samples = (0..count as u64)
        .into_par_iter()
        .map(|i| generate_sample(n, rng::indexed_seed(seed, i), spec))
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { n, samples })
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let cells = data.n * data.n;
    let mut buf = Vec::with_capacity(HEADER_LEN + data.len() * cells * 16);
    buf.extend_from_slice(DATASET_MAGIC);
    for v in [DATASET_VERSION, data.len() as u32, data.n as u32, 0] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for s in &data.samples {
        for v in s.a.values().iter().chain(s.u.values()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    file.sync_all()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    if bytes.len() < HEADER_LEN || &bytes[..4] != DATASET_MAGIC {
        return Err(Error::Format(format!("{} is not a dataset file", path.display())));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
    let (version, count, n, reserved) = (word(0), word(1) as usize, word(2) as usize, word(3));
    if version != DATASET_VERSION {
        return Err(Error::Format(format!("unsupported dataset version {version}")));
    }
    if reserved != 0 || n == 0 {
        return Err(Error::Format("corrupt dataset header".into()));
    }
    let cells = n * n;
    let expected = HEADER_LEN + count * cells * 16;
    if bytes.len() != expected {
        return Err(Error::Format(format!(
            "dataset holds {} bytes, header implies {expected}",
            bytes.len()
        )));
    }
    let floats: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let samples = floats
        .chunks_exact(2 * cells)
        .map(|chunk| {
            Ok(DarcySample {
                a: Field::new(n, chunk[..cells].to_vec())?,
                u: Field::new(n, chunk[cells..].to_vec())?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset { n, samples })
}

/// Generates, writes and summarises a dataset.
pub fn generate_dataset_file(
    path: &Path,
    n: usize,
    count: usize,
    seed: u64,
    spec: &CoefficientSpec,
) -> Result<DatasetSummary> {
    let data = generate_dataset(n, count, seed, spec)?;
    write_dataset(path, &data)?;
    Ok(data.summary())
}

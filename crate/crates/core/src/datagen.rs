//! Synthetic bimodal datasets, feature-space perturbations, and the `BMF1`
//! binary dataset format.

use std::fs;
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::numerics::Vec64;

pub const MAGIC: &[u8; 4] = b"BMF1";
pub const FORMAT_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 8 + 4 + 4 + 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRecord {
    pub x_v: Vec64,
    pub x_l: Vec64,
    pub y: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub classes: u32,
    pub d_v: u32,
    pub d_l: u32,
    pub records: Vec<FeatureRecord>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes as usize];
        for r in &self.records {
            counts[r.y as usize] += 1;
        }
        counts
    }

    fn with_records(&self, records: Vec<FeatureRecord>) -> Dataset {
        Dataset {
            classes: self.classes,
            d_v: self.d_v,
            d_l: self.d_l,
            records,
        }
    }

    /// Seeded train/test split; the test part holds `round(test_fraction · N)` samples.
    pub fn split(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(invalid(format!(
                "test fraction {test_fraction} must lie in [0, 1)"
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (test_fraction * self.len() as f64).round() as usize;
        let pick = |idx: &[usize]| {
            let mut idx = idx.to_vec();
            idx.sort_unstable();
            self.with_records(idx.iter().map(|&i| self.records[i].clone()).collect())
        };
        Ok((pick(&order[n_test..]), pick(&order[..n_test])))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n: usize,
    pub classes: usize,
    pub d_v: usize,
    pub d_l: usize,
    /// 0.5 is balanced; above 0.5 the image modality is less noisy.
    pub alpha: f64,
    pub sigma: f64,
    pub seed: u64,
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(invalid("classes must be at least 2"));
        }
        if self.n < self.classes {
            return Err(invalid(format!(
                "n = {} must be at least classes = {}",
                self.n, self.classes
            )));
        }
        if self.d_v == 0 || self.d_l == 0 {
            return Err(invalid("feature dimensions must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(invalid(format!("alpha = {} must lie in [0, 1]", self.alpha)));
        }
        if !(self.sigma.is_finite() && self.sigma >= 0.0) {
            return Err(invalid(format!("sigma = {} must be >= 0", self.sigma)));
        }
        Ok(())
    }

    pub fn sigma_v(&self) -> f64 {
        self.sigma * (1.0 - self.alpha + 0.5)
    }

    pub fn sigma_l(&self) -> f64 {
        self.sigma * (self.alpha + 0.5)
    }
}

/// Gaussian class prototypes plus isotropic noise whose scale differs per
/// modality. Labels cycle through the classes so every class is present.
pub fn generate(config: &SynthConfig) -> Result<Dataset> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let gaussian = |n: usize, rng: &mut ChaCha8Rng| -> Vec64 {
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    };
    let protos_v: Vec<Vec64> = (0..config.classes)
        .map(|_| gaussian(config.d_v, &mut rng))
        .collect();
    let protos_l: Vec<Vec64> = (0..config.classes)
        .map(|_| gaussian(config.d_l, &mut rng))
        .collect();
    let (s_v, s_l) = (config.sigma_v(), config.sigma_l());
    let records = (0..config.n)
        .map(|i| {
            let y = i % config.classes;
            let x_v = protos_v[y]
                .iter()
                .zip(gaussian(config.d_v, &mut rng))
                .map(|(m, e)| m + s_v * e)
                .collect();
            let x_l = protos_l[y]
                .iter()
                .zip(gaussian(config.d_l, &mut rng))
                .map(|(m, e)| m + s_l * e)
                .collect();
            FeatureRecord {
                x_v,
                x_l,
                y: y as u32,
            }
        })
        .collect();
    Ok(Dataset {
        classes: config.classes as u32,
        d_v: config.d_v as u32,
        d_l: config.d_l as u32,
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PerturbKind {
    None,
    MissingImage,
    MissingText,
    NoisyImage,
    NoisyText,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerturbSpec {
    pub kind: PerturbKind,
    /// Fraction of samples affected.
    pub ratio: f64,
    /// Fraction of coordinates corrupted per affected sample (noisy kinds).
    pub rate: f64,
    /// Magnitude of the image spikes.
    #[serde(default = "default_spike")]
    pub spike: f64,
    pub seed: u64,
}

fn default_spike() -> f64 {
    3.0
}

impl PerturbSpec {
    pub fn none() -> Self {
        Self::new(PerturbKind::None, 0.0, 0.0, 0)
    }

    pub fn new(kind: PerturbKind, ratio: f64, rate: f64, seed: u64) -> Self {
        Self {
            kind,
            ratio,
            rate,
            spike: default_spike(),
            seed,
        }
    }

    pub fn missing_image(ratio: f64, seed: u64) -> Self {
        Self::new(PerturbKind::MissingImage, ratio, 0.0, seed)
    }

    pub fn missing_text(ratio: f64, seed: u64) -> Self {
        Self::new(PerturbKind::MissingText, ratio, 0.0, seed)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.ratio) || !(0.0..=1.0).contains(&self.rate) {
            return Err(invalid(format!(
                "perturbation ratio {} and rate {} must lie in [0, 1]",
                self.ratio, self.rate
            )));
        }
        if !self.spike.is_finite() {
            return Err(invalid("perturbation spike must be finite"));
        }
        Ok(())
    }
}

/// Returns a perturbed copy. The affected samples are the first
/// `round(ratio · N)` entries of a seeded permutation, so for a fixed seed a
/// larger ratio affects a superset of samples.
pub fn apply_perturbation(dataset: &Dataset, spec: &PerturbSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut out = dataset.clone();
    if spec.kind == PerturbKind::None {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng);
    let n_hit = (spec.ratio * dataset.len() as f64).round() as usize;
    for &i in &order[..n_hit] {
        let r = &mut out.records[i];
        match spec.kind {
            PerturbKind::None => {}
            PerturbKind::MissingImage => r.x_v.iter_mut().for_each(|x| *x = 0.0),
            PerturbKind::MissingText => r.x_l.iter_mut().for_each(|x| *x = 0.0),
            PerturbKind::NoisyImage => {
                let k = (spec.rate * r.x_v.len() as f64).round() as usize;
                for c in index::sample(&mut rng, r.x_v.len(), k) {
                    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
                    r.x_v[c] = sign * spec.spike;
                }
            }
            PerturbKind::NoisyText => {
                let k = (spec.rate * r.x_l.len() as f64).round() as usize;
                for c in index::sample(&mut rng, r.x_l.len(), k) {
                    r.x_l[c] = 0.0;
                }
            }
        }
    }
    Ok(out)
}

pub fn encode_dataset(dataset: &Dataset) -> Result<Vec<u8>> {
    let n = dataset.len();
    if n == 0 || n < dataset.classes as usize {
        return Err(invalid(format!(
            "dataset with {n} records and {} classes cannot be written (need N >= C >= 1)",
            dataset.classes
        )));
    }
    let (d_v, d_l) = (dataset.d_v as usize, dataset.d_l as usize);
    let mut buf = Vec::with_capacity(HEADER_LEN + n * (4 + 8 * (d_v + d_l)));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&dataset.classes.to_le_bytes());
    buf.extend_from_slice(&dataset.d_v.to_le_bytes());
    buf.extend_from_slice(&dataset.d_l.to_le_bytes());
    for (i, r) in dataset.records.iter().enumerate() {
        if r.x_v.len() != d_v || r.x_l.len() != d_l || r.y >= dataset.classes {
            return Err(invalid(format!("record {i} is inconsistent with the header")));
        }
        buf.extend_from_slice(&r.y.to_le_bytes());
        for x in r.x_v.iter().chain(&r.x_l) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let end = self.pos + N;
        let chunk = self.bytes.get(self.pos..end).ok_or_else(|| Error::Format {
            offset: self.pos as u64,
            message: format!("truncated while reading {what}"),
        })?;
        self.pos = end;
        Ok(chunk.try_into().expect("slice length checked"))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(what)?))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(what)?))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(what)?))
    }

    fn fail(&self, offset: usize, message: String) -> Error {
        Error::Format {
            offset: offset as u64,
            message,
        }
    }
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut rd = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = rd.take("magic")?;
    if &magic != MAGIC {
        return Err(rd.fail(0, format!("bad magic {magic:?}")));
    }
    let version = rd.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(rd.fail(4, format!("unsupported version {version}")));
    }
    let n = rd.u64("record count")?;
    let classes = rd.u32("class count")?;
    let d_v = rd.u32("image dimension")?;
    let d_l = rd.u32("text dimension")?;
    if classes == 0 || n < classes as u64 {
        return Err(rd.fail(8, format!("record count {n} below class count {classes}")));
    }
    let record_len = 4 + 8 * (d_v as u64 + d_l as u64);
    let expected = (HEADER_LEN as u64).checked_add(n.saturating_mul(record_len));
    match expected {
        Some(len) if len == bytes.len() as u64 => {}
        Some(len) if len > bytes.len() as u64 => {
            return Err(rd.fail(
                bytes.len(),
                format!("truncated: header promises {len} bytes, file has {}", bytes.len()),
            ))
        }
        Some(len) => {
            return Err(rd.fail(len as usize, "trailing bytes after last record".into()));
        }
        None => return Err(rd.fail(8, "record count overflows".into())),
    }
    let mut records = Vec::with_capacity(n as usize);
    for _ in 0..n {
        let offset = rd.pos;
        let y = rd.u32("label")?;
        if y >= classes {
            return Err(rd.fail(offset, format!("label {y} out of range")));
        }
        let x_v = (0..d_v).map(|_| rd.f64("image feature")).collect::<Result<_>>()?;
        let x_l = (0..d_l).map(|_| rd.f64("text feature")).collect::<Result<_>>()?;
        records.push(FeatureRecord { x_v, x_l, y });
    }
    Ok(Dataset {
        classes,
        d_v,
        d_l,
        records,
    })
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let bytes = encode_dataset(dataset)?;
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}

//! TOML experiment files.
//!
//! ```toml
//! name = "alpha09"
//!
//! [data]
//! n = 2000
//! classes = 10
//! d_v = 32
//! d_l = 32
//! alpha = 0.9
//! sigma = 1.0
//! seed = 0
//! test_fraction = 0.2
//!
//! [train]
//! lambda = 0.05
//! epochs = 30
//! batch_size = 64
//!
//! [balgrad]
//! mode = "full"
//! ```
//!
//! Every section and field except `[data]` has a default.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::balgrad::{builtin_registry, BalGradConfig, BUILTIN_MODES};
use crate::datagen::{PerturbKind, PerturbSpec, SynthConfig};
use crate::error::{Error, Result};
use crate::harness::{EvalConditions, TrainConfig};
use crate::model::{Fusion, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    pub data: DataSection,
    #[serde(default)]
    pub train: TrainSection,
    #[serde(default)]
    pub balgrad: BalGradConfig,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub ablate: AblateSection,
    #[serde(default)]
    pub verify: VerifySection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Read records from a BMF1 file instead of generating them.
    pub path: Option<PathBuf>,
    pub n: usize,
    pub classes: usize,
    pub d_v: usize,
    pub d_l: usize,
    pub alpha: f64,
    pub sigma: f64,
    pub seed: u64,
    pub test_fraction: f64,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            path: None,
            n: 2000,
            classes: 10,
            d_v: 32,
            d_l: 32,
            alpha: 0.5,
            sigma: 1.0,
            seed: 0,
            test_fraction: 0.2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub init_seed: u64,
    pub d_e: usize,
    pub fusion: Fusion,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            lambda: 0.05,
            epochs: 30,
            batch_size: 64,
            shuffle_seed: 0,
            init_seed: 0,
            d_e: 16,
            fusion: Fusion::Concat,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub seed: u64,
    pub noisy_image_rate: f64,
    pub noisy_text_rate: f64,
    pub spike: f64,
    pub missing_ratios: Vec<f64>,
    pub histogram_bins: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            seed: 0,
            noisy_image_rate: 0.3,
            noisy_text_rate: 0.15,
            spike: 3.0,
            missing_ratios: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
            histogram_bins: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub seeds: Vec<u64>,
    pub modes: Vec<String>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self {
            seeds: (0..5).collect(),
            modes: BUILTIN_MODES.iter().map(|s| s.to_string()).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifySection {
    /// Successively halved step sizes.
    pub lambdas: Vec<f64>,
    pub states: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub d_v: usize,
    pub d_l: usize,
    pub d_e: usize,
    pub classes: usize,
    pub fusion: Fusion,
}

impl Default for VerifySection {
    fn default() -> Self {
        Self {
            lambdas: vec![1e-3, 5e-4, 2.5e-4],
            states: 20,
            batch_size: 16,
            seed: 0,
            d_v: 6,
            d_l: 5,
            d_e: 4,
            classes: 3,
            fusion: Fusion::Concat,
        }
    }
}

fn config_err(field: &str, message: impl Into<String>) -> Error {
    Error::Config {
        field: field.to_string(),
        message: message.into(),
    }
}

fn unit_interval(field: &str, v: f64) -> Result<()> {
    if (0.0..=1.0).contains(&v) {
        Ok(())
    } else {
        Err(config_err(field, format!("{v} must lie in [0, 1]")))
    }
}

fn positive(field: &str, v: usize) -> Result<()> {
    if v >= 1 {
        Ok(())
    } else {
        Err(config_err(field, "must be at least 1"))
    }
}

impl ExperimentSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        let spec: ExperimentSpec =
            toml::from_str(text).map_err(|e| config_err("<parse>", e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    /// Reads a spec; a relative `data.path` is resolved against the spec's directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| config_err("<file>", format!("{}: {e}", path.display())))?;
        let mut spec = Self::from_toml(&text)?;
        if let (Some(p), Some(dir)) = (spec.data.path.as_mut(), path.parent()) {
            if p.is_relative() {
                *p = dir.join(&*p);
            }
        }
        if let Some(p) = &spec.data.path {
            if !p.is_file() {
                return Err(config_err("data.path", format!("{} does not exist", p.display())));
            }
        }
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.data;
        if d.path.is_none() {
            if d.classes < 2 {
                return Err(config_err("data.classes", "must be at least 2"));
            }
            if d.n < d.classes {
                return Err(config_err(
                    "data.n",
                    format!("{} must be at least data.classes = {}", d.n, d.classes),
                ));
            }
            positive("data.d_v", d.d_v)?;
            positive("data.d_l", d.d_l)?;
            unit_interval("data.alpha", d.alpha)?;
            if !(d.sigma.is_finite() && d.sigma >= 0.0) {
                return Err(config_err("data.sigma", format!("{} must be >= 0", d.sigma)));
            }
        }
        if !(0.0..1.0).contains(&d.test_fraction) {
            return Err(config_err(
                "data.test_fraction",
                format!("{} must lie in [0, 1)", d.test_fraction),
            ));
        }

        let t = &self.train;
        if !(t.lambda.is_finite() && t.lambda >= 0.0) {
            return Err(config_err("train.lambda", format!("{} must be >= 0", t.lambda)));
        }
        positive("train.epochs", t.epochs)?;
        positive("train.batch_size", t.batch_size)?;
        positive("train.d_e", t.d_e)?;

        let b = &self.balgrad;
        if !(b.gamma.is_finite() && b.gamma > 0.0) {
            return Err(config_err("balgrad.gamma", format!("{} must be > 0", b.gamma)));
        }
        if !(b.schedule_tau.is_finite() && b.schedule_tau > 0.0) {
            return Err(config_err(
                "balgrad.schedule_tau",
                format!("{} must be > 0", b.schedule_tau),
            ));
        }
        builtin_registry()
            .get(&b.mode)
            .map_err(|e| config_err("balgrad.mode", e.to_string()))?;

        let e = &self.eval;
        unit_interval("eval.noisy_image_rate", e.noisy_image_rate)?;
        unit_interval("eval.noisy_text_rate", e.noisy_text_rate)?;
        if !e.spike.is_finite() {
            return Err(config_err("eval.spike", "must be finite"));
        }
        for &r in &e.missing_ratios {
            unit_interval("eval.missing_ratios", r)?;
        }
        positive("eval.histogram_bins", e.histogram_bins)?;

        if self.ablate.seeds.is_empty() {
            return Err(config_err("ablate.seeds", "must not be empty"));
        }
        for m in &self.ablate.modes {
            builtin_registry()
                .get(m)
                .map_err(|e| config_err("ablate.modes", e.to_string()))?;
        }

        let v = &self.verify;
        if v.lambdas.is_empty() {
            return Err(config_err("verify.lambdas", "must not be empty"));
        }
        if v.lambdas.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(config_err("verify.lambdas", "step sizes must be > 0"));
        }
        if v.lambdas.windows(2).any(|w| (w[1] - 0.5 * w[0]).abs() > 1e-9 * w[0]) {
            return Err(config_err(
                "verify.lambdas",
                "each step size must be half the previous one",
            ));
        }
        positive("verify.states", v.states)?;
        positive("verify.batch_size", v.batch_size)?;
        positive("verify.d_v", v.d_v)?;
        positive("verify.d_l", v.d_l)?;
        positive("verify.d_e", v.d_e)?;
        if v.classes < 2 {
            return Err(config_err("verify.classes", "must be at least 2"));
        }
        Ok(())
    }

    /// Sets every seed (data, shuffling, initialization, evaluation, proposition
    /// states) to `seed` and restricts the ablation to that seed.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut s = self.clone();
        s.data.seed = seed;
        s.train.shuffle_seed = seed;
        s.train.init_seed = seed;
        s.eval.seed = seed;
        s.verify.seed = seed;
        s.ablate.seeds = vec![seed];
        s
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            n: self.data.n,
            classes: self.data.classes,
            d_v: self.data.d_v,
            d_l: self.data.d_l,
            alpha: self.data.alpha,
            sigma: self.data.sigma,
            seed: self.data.seed,
        }
    }

    /// Training config for a dataset with the given shape.
    pub fn train_config(&self, mode: &str, d_v: usize, d_l: usize, classes: usize) -> TrainConfig {
        TrainConfig {
            lambda: self.train.lambda,
            epochs: self.train.epochs,
            batch_size: self.train.batch_size,
            shuffle_seed: self.train.shuffle_seed,
            init_seed: self.train.init_seed,
            balgrad: BalGradConfig {
                mode: mode.to_string(),
                ..self.balgrad.clone()
            },
            model: ModelConfig {
                d_v,
                d_l,
                d_e: self.train.d_e,
                classes,
                fusion: self.train.fusion,
            },
        }
    }

    pub fn eval_conditions(&self) -> EvalConditions {
        let e = &self.eval;
        let mut c = EvalConditions::standard(e.seed);
        c.noisy_image = PerturbSpec::new(PerturbKind::NoisyImage, 1.0, e.noisy_image_rate, e.seed);
        c.noisy_image.spike = e.spike * self.data.sigma;
        c.noisy_text = PerturbSpec::new(PerturbKind::NoisyText, 1.0, e.noisy_text_rate, e.seed);
        c
    }
}

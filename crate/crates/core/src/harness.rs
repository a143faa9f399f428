//! Training loop, impaired-modality evaluation, and the diagnostics built on
//! the training log (loss curves, cosine histograms, missing-ratio sweeps).

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::balgrad::{builtin_registry, BalGradConfig};
use crate::datagen::{apply_perturbation, Dataset, FeatureRecord, PerturbKind, PerturbSpec};
use crate::error::{invalid, Error, Result};
use crate::model::{backward, forward, init_params, ModelConfig, Params};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle_seed: u64,
    pub init_seed: u64,
    pub balgrad: BalGradConfig,
    pub model: ModelConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(invalid(format!("lambda = {} must be >= 0", self.lambda)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(invalid("epochs and batch_size must be at least 1"));
        }
        self.model.validate()?;
        self.balgrad.validate()
    }
}

/// One optimizer step. Losses are measured on the step's batch before the update.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub t: u64,
    pub target: f64,
    pub target_v: f64,
    pub target_l: f64,
    pub kl_v: f64,
    pub kl_l: f64,
    pub w_v: f64,
    pub w_l: f64,
    pub schedule_factor: f64,
    pub dot_t_kl: Option<f64>,
    pub cos_t_kl: Option<f64>,
    pub conflicted: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

fn check_dims(dataset: &Dataset, model: &ModelConfig) -> Result<()> {
    if dataset.d_v as usize != model.d_v
        || dataset.d_l as usize != model.d_l
        || dataset.classes as usize != model.classes
    {
        return Err(invalid(format!(
            "dataset (d_v={}, d_l={}, classes={}) does not match model (d_v={}, d_l={}, classes={})",
            dataset.d_v, dataset.d_l, dataset.classes, model.d_v, model.d_l, model.classes
        )));
    }
    if dataset.is_empty() {
        return Err(invalid("cannot train on an empty dataset"));
    }
    Ok(())
}

pub fn train(dataset: &Dataset, config: &TrainConfig) -> Result<(Params, TrainLog)> {
    let mut log = TrainLog::default();
    let params = train_into(dataset, config, &mut log)?;
    Ok((params, log))
}

/// Like [`train`], but appends to a caller-owned log so the rows written
/// before a divergence survive the error.
pub fn train_into(dataset: &Dataset, config: &TrainConfig, log: &mut TrainLog) -> Result<Params> {
    config.validate()?;
    check_dims(dataset, &config.model)?;
    let strategy = builtin_registry().get(&config.balgrad.mode)?;
    let mut params = init_params(&config.model, config.init_seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.shuffle_seed);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut t: u64 = 0;
    let diverged = |t: u64| Error::TrainingDiverged {
        iteration: t,
        last_good: t.checked_sub(1),
    };

    for _ in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<FeatureRecord> =
                chunk.iter().map(|&i| dataset.records[i].clone()).collect();
            let out = match forward(&params, &batch) {
                Ok(out) if out.losses.is_finite() => out,
                // Non-finite logits surface as InvalidInput from softmax.
                Ok(_) | Err(Error::InvalidInput(_)) => return Err(diverged(t)),
                Err(e) => return Err(e),
            };
            let grads = backward(&params, &batch, &out)?;
            let update = strategy.compose(&grads, &out.losses, &config.balgrad, t)?;
            if !update.direction.is_finite() {
                return Err(diverged(t));
            }
            params.axpy(-config.lambda, &update.direction);
            if !params.is_finite() {
                return Err(diverged(t));
            }
            let d = update.diagnostics;
            let l = out.losses;
            log.rows.push(LogRow {
                t,
                target: l.target,
                target_v: l.target_v,
                target_l: l.target_l,
                kl_v: l.kl_v,
                kl_l: l.kl_l,
                w_v: d.w_v,
                w_l: d.w_l,
                schedule_factor: d.schedule_factor,
                dot_t_kl: d.dot_t_kl,
                cos_t_kl: d.cos_t_kl,
                conflicted: d.conflicted,
            });
            t += 1;
        }
    }
    Ok(params)
}

/// Fused-classifier predictions; ties go to the lowest class index.
pub fn predict(params: &Params, records: &[FeatureRecord]) -> Result<Vec<usize>> {
    const CHUNK: usize = 256;
    let mut preds = Vec::with_capacity(records.len());
    for chunk in records.chunks(CHUNK) {
        let out = forward(params, chunk)?;
        preds.extend(out.p_t.iter().map(|p| p.argmax()));
    }
    Ok(preds)
}

pub fn accuracy(params: &Params, dataset: &Dataset) -> Result<f64> {
    if dataset.is_empty() {
        return Err(invalid("accuracy of an empty dataset"));
    }
    let preds = predict(params, &dataset.records)?;
    let correct = preds
        .iter()
        .zip(&dataset.records)
        .filter(|(p, r)| **p == r.y as usize)
        .count();
    Ok(correct as f64 / dataset.len() as f64)
}

pub fn accuracy_under(params: &Params, dataset: &Dataset, spec: &PerturbSpec) -> Result<f64> {
    accuracy(params, &apply_perturbation(dataset, spec)?)
}

/// Mean of two accuracies given in percent.
pub fn impairment_avg(image_impaired_pct: f64, text_impaired_pct: f64) -> f64 {
    (image_impaired_pct + text_impaired_pct) / 2.0
}

/// Absolute difference of two accuracies given in percent.
pub fn impairment_gap(image_impaired_pct: f64, text_impaired_pct: f64) -> f64 {
    (image_impaired_pct - text_impaired_pct).abs()
}

/// Rounds to two decimals, halves away from zero.
pub fn round2(x: f64) -> f64 {
    (x * 100.0).round() / 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConditions {
    pub missing_image: PerturbSpec,
    pub missing_text: PerturbSpec,
    pub noisy_image: PerturbSpec,
    pub noisy_text: PerturbSpec,
}

impl EvalConditions {
    /// Whole-modality impairments: 30% image spikes, 15% text deletion.
    pub fn standard(seed: u64) -> Self {
        Self {
            missing_image: PerturbSpec::missing_image(1.0, seed),
            missing_text: PerturbSpec::missing_text(1.0, seed),
            noisy_image: PerturbSpec::new(PerturbKind::NoisyImage, 1.0, 0.3, seed),
            noisy_text: PerturbSpec::new(PerturbKind::NoisyText, 1.0, 0.15, seed),
        }
    }
}

impl Default for EvalConditions {
    fn default() -> Self {
        Self::standard(0)
    }
}

/// Accuracies are fractions in `[0, 1]`; averages and gaps are in
/// percentage points.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub acc_full: f64,
    pub acc_missing_image: f64,
    pub acc_missing_text: f64,
    pub acc_noisy_image: f64,
    pub acc_noisy_text: f64,
    pub avg_missing: f64,
    pub avg_noisy: f64,
    pub gap_missing: f64,
    pub gap_noisy: f64,
    pub conflict_fraction: Option<f64>,
}

impl MetricsReport {
    pub fn from_accuracies(
        acc_full: f64,
        acc_missing_image: f64,
        acc_missing_text: f64,
        acc_noisy_image: f64,
        acc_noisy_text: f64,
    ) -> Self {
        let pct = |a: f64| 100.0 * a;
        Self {
            acc_full,
            acc_missing_image,
            acc_missing_text,
            acc_noisy_image,
            acc_noisy_text,
            avg_missing: impairment_avg(pct(acc_missing_image), pct(acc_missing_text)),
            avg_noisy: impairment_avg(pct(acc_noisy_image), pct(acc_noisy_text)),
            gap_missing: impairment_gap(pct(acc_missing_image), pct(acc_missing_text)),
            gap_noisy: impairment_gap(pct(acc_noisy_image), pct(acc_noisy_text)),
            conflict_fraction: None,
        }
    }
}

pub fn evaluate(params: &Params, dataset: &Dataset, conditions: &EvalConditions) -> Result<MetricsReport> {
    Ok(MetricsReport::from_accuracies(
        accuracy(params, dataset)?,
        accuracy_under(params, dataset, &conditions.missing_image)?,
        accuracy_under(params, dataset, &conditions.missing_text)?,
        accuracy_under(params, dataset, &conditions.noisy_image)?,
        accuracy_under(params, dataset, &conditions.noisy_text)?,
    ))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub mode: String,
    pub ratio: f64,
    pub acc_missing_image: f64,
    pub acc_missing_text: f64,
    /// Percentage points.
    pub gap: f64,
}

/// Missing-modality gap as a function of the fraction of samples whose image
/// (resp. text) features are dropped.
pub fn missing_ratio_sweep(
    params_by_mode: &[(String, Params)],
    dataset: &Dataset,
    ratios: &[f64],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if let Some(r) = ratios.iter().find(|r| !(0.0..=1.0).contains(*r)) {
        return Err(invalid(format!("missing ratio {r} outside [0, 1]")));
    }
    let mut rows = Vec::with_capacity(params_by_mode.len() * ratios.len());
    for (mode, params) in params_by_mode {
        for &ratio in ratios {
            let img = accuracy_under(params, dataset, &PerturbSpec::missing_image(ratio, seed))?;
            let txt = accuracy_under(params, dataset, &PerturbSpec::missing_text(ratio, seed))?;
            rows.push(SweepRow {
                mode: mode.clone(),
                ratio,
                acc_missing_image: img,
                acc_missing_text: txt,
                gap: impairment_gap(100.0 * img, 100.0 * txt),
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    /// `bins + 1` edges spanning `[-1, 1]`.
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
    pub mean: f64,
}

/// Histogram of the pre-projection target/KL cosines over `[-1, 1]`.
pub fn cosine_histogram(log: &TrainLog, bins: usize) -> Result<Histogram> {
    if bins == 0 {
        return Err(invalid("histogram needs at least one bin"));
    }
    let values: Vec<f64> = log.rows.iter().filter_map(|r| r.cos_t_kl).collect();
    if values.is_empty() {
        return Err(invalid("cosine histogram of a log without KL steps"));
    }
    let width = 2.0 / bins as f64;
    let edges = (0..=bins).map(|i| -1.0 + i as f64 * width).collect();
    let mut counts = vec![0; bins];
    for &v in &values {
        let idx = (((v + 1.0) / width).floor() as isize).clamp(0, bins as isize - 1);
        counts[idx as usize] += 1;
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    Ok(Histogram {
        edges,
        counts,
        mean,
    })
}

/// Fixed-width rendering with 9 significant digits (`%.9g` style).
pub fn fmt_g9(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    if !x.is_finite() {
        return format!("{x}");
    }
    let sci = format!("{x:.8e}");
    let exp: i32 = sci[sci.find('e').expect("exponent present") + 1..]
        .parse()
        .expect("integer exponent");
    if (-4..9).contains(&exp) {
        let decimals = (8 - exp) as usize;
        let fixed = format!("{x:.decimals$}");
        if fixed.contains('.') {
            fixed.trim_end_matches('0').trim_end_matches('.').to_string()
        } else {
            fixed
        }
    } else {
        let (mantissa, _) = sci.split_once('e').expect("exponent present");
        let mantissa = if mantissa.contains('.') {
            mantissa.trim_end_matches('0').trim_end_matches('.')
        } else {
            mantissa
        };
        let sign = if exp < 0 { '-' } else { '+' };
        format!("{mantissa}e{sign}{:02}", exp.abs())
    }
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(fmt_g9).unwrap_or_default()
}

pub const LOG_CSV_HEADER: &str =
    "t,loss_target,loss_target_v,loss_target_l,loss_kl_v,loss_kl_l,w_v,w_l,schedule_factor,dot_t_kl,cos_t_kl,conflicted";

pub fn log_to_csv(log: &TrainLog) -> String {
    let mut s = String::from(LOG_CSV_HEADER);
    s.push('\n');
    for r in &log.rows {
        let fields = [
            r.t.to_string(),
            fmt_g9(r.target),
            fmt_g9(r.target_v),
            fmt_g9(r.target_l),
            fmt_g9(r.kl_v),
            fmt_g9(r.kl_l),
            fmt_g9(r.w_v),
            fmt_g9(r.w_l),
            fmt_g9(r.schedule_factor),
            fmt_opt(r.dot_t_kl),
            fmt_opt(r.cos_t_kl),
            u8::from(r.conflicted).to_string(),
        ];
        s.push_str(&fields.join(","));
        s.push('\n');
    }
    s
}

pub const METRICS_CSV_HEADER: &str = "condition,accuracy";

/// One row per evaluation condition plus the derived aggregates.
pub fn metrics_to_csv(m: &MetricsReport) -> String {
    let rows = [
        ("full", m.acc_full),
        ("missing_image", m.acc_missing_image),
        ("missing_text", m.acc_missing_text),
        ("noisy_image", m.acc_noisy_image),
        ("noisy_text", m.acc_noisy_text),
    ];
    let mut s = String::from(METRICS_CSV_HEADER);
    s.push('\n');
    for (name, acc) in rows {
        s.push_str(&format!("{name},{}\n", fmt_g9(acc)));
    }
    s
}

pub const SWEEP_CSV_HEADER: &str = "mode,ratio,acc_missing_image,acc_missing_text,gap";

pub fn sweep_to_csv(rows: &[SweepRow]) -> String {
    let mut s = String::from(SWEEP_CSV_HEADER);
    s.push('\n');
    for r in rows {
        s.push_str(&format!(
            "{},{},{},{},{}\n",
            r.mode,
            fmt_g9(r.ratio),
            fmt_g9(r.acc_missing_image),
            fmt_g9(r.acc_missing_text),
            fmt_g9(r.gap)
        ));
    }
    s
}

pub const HISTOGRAM_CSV_HEADER: &str = "bin_lo,bin_hi,count";

pub fn histogram_to_csv(h: &Histogram) -> String {
    let mut s = String::from(HISTOGRAM_CSV_HEADER);
    s.push('\n');
    for (i, c) in h.counts.iter().enumerate() {
        s.push_str(&format!("{},{},{c}\n", fmt_g9(h.edges[i]), fmt_g9(h.edges[i + 1])));
    }
    s
}

//! End-to-end runs driven by an [`ExperimentSpec`]: data preparation, training,
//! evaluation, and the proposition state grid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::ExperimentSpec;
use crate::datagen::{generate, read_dataset, Dataset};
use crate::error::Result;
use crate::harness::{evaluate, fmt_g9, train_into, MetricsReport, TrainLog};
use crate::model::{init_params, ModelConfig, Params};
use crate::propositions::{
    halving_ratios, in_halving_band, verify_prop1, verify_prop2, ResidualReport,
};

/// Train/test split from the spec's data section.
pub fn prepare_data(spec: &ExperimentSpec) -> Result<(Dataset, Dataset)> {
    let full = match &spec.data.path {
        Some(path) => read_dataset(path)?,
        None => generate(&spec.synth_config())?,
    };
    full.split(spec.data.test_fraction, spec.data.seed)
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub mode: String,
    pub params: Params,
    pub log: TrainLog,
    pub metrics: MetricsReport,
}

/// Trains `mode` on the spec's training split and evaluates on its test
/// split. Rows logged before a divergence remain in `log`.
pub fn run_mode_into(
    spec: &ExperimentSpec,
    data: &(Dataset, Dataset),
    mode: &str,
    log: &mut TrainLog,
) -> Result<(Params, MetricsReport)> {
    let (train, test) = data;
    let cfg = spec.train_config(
        mode,
        train.d_v as usize,
        train.d_l as usize,
        train.classes as usize,
    );
    let params = train_into(train, &cfg, log)?;
    let mut metrics = evaluate(&params, test, &spec.eval_conditions())?;
    if cfg.balgrad.mode != "baseline" {
        metrics.conflict_fraction = crate::propositions::conflict_fraction(log).ok();
    }
    Ok((params, metrics))
}

pub fn run_mode(spec: &ExperimentSpec, data: &(Dataset, Dataset), mode: &str) -> Result<RunOutput> {
    let mut log = TrainLog::default();
    let (params, metrics) = run_mode_into(spec, data, mode, &mut log)?;
    Ok(RunOutput {
        mode: mode.to_string(),
        params,
        log,
        metrics,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub seed: u64,
    pub mode: String,
    pub metrics: MetricsReport,
}

/// One ablation cell: the spec reseeded with `seed`, trained under `mode`.
pub fn ablation_cell(spec: &ExperimentSpec, seed: u64, mode: &str) -> Result<AblationRow> {
    let spec = spec.with_seed(seed);
    let data = prepare_data(&spec)?;
    let run = run_mode(&spec, &data, mode)?;
    Ok(AblationRow {
        seed,
        mode: mode.to_string(),
        metrics: run.metrics,
    })
}

/// Random parameters plus a random batch for the proposition checks.
pub fn proposition_state(spec: &ExperimentSpec, index: usize) -> Result<(Params, Vec<crate::datagen::FeatureRecord>)> {
    let v = &spec.verify;
    let seed = v.seed.wrapping_mul(1_000_003).wrapping_add(index as u64);
    let cfg = ModelConfig {
        d_v: v.d_v,
        d_l: v.d_l,
        d_e: v.d_e,
        classes: v.classes,
        fusion: v.fusion,
    };
    let mut params = init_params(&cfg, seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    // Nonzero biases so no block starts at a symmetric point.
    for blk in crate::model::Block::ALL {
        for b in params.block_mut(blk).b.iter_mut() {
            *b = rng.random_range(-0.5..0.5);
        }
    }
    let batch = (0..v.batch_size)
        .map(|i| crate::datagen::FeatureRecord {
            x_v: (0..v.d_v).map(|_| rng.random_range(-2.0..2.0)).collect(),
            x_l: (0..v.d_l).map(|_| rng.random_range(-2.0..2.0)).collect(),
            y: (i % v.classes) as u32,
        })
        .collect();
    Ok((params, batch))
}

#[derive(Debug, Clone, Serialize)]
pub struct PropositionRow {
    pub state: usize,
    pub lambda: f64,
    /// `None` when the step size is outside the first-order regime.
    pub prop1: Option<ResidualReport>,
    pub prop2: Option<ResidualReport>,
    /// Residual ratio against the previous (twice as large) step size.
    pub prop1_ratio: Option<f64>,
    pub prop2_ratio: Option<f64>,
    pub pass: bool,
}

/// Runs both checks over the spec's λ grid and random states.
pub fn verify_propositions(spec: &ExperimentSpec) -> Result<Vec<PropositionRow>> {
    let lambdas = &spec.verify.lambdas;
    let mut rows = Vec::with_capacity(lambdas.len() * spec.verify.states);
    for state in 0..spec.verify.states {
        let (params, batch) = proposition_state(spec, state)?;
        let p1: Vec<Option<ResidualReport>> = lambdas
            .iter()
            .map(|&l| verify_prop1(&params, &batch, l).ok())
            .collect();
        let p2: Vec<Option<ResidualReport>> = lambdas
            .iter()
            .map(|&l| verify_prop2(&params, &batch, l, &spec.balgrad).ok())
            .collect();
        for (i, &lambda) in lambdas.iter().enumerate() {
            let ratio = |reports: &[Option<ResidualReport>]| -> Option<f64> {
                if i == 0 {
                    return None;
                }
                match (reports[i - 1], reports[i]) {
                    (Some(a), Some(b)) => halving_ratios(&[a, b]).first().copied(),
                    _ => None,
                }
            };
            let (r1, r2) = (ratio(&p1), ratio(&p2));
            let computed = p1[i].is_some() && p2[i].is_some();
            let band_ok = i == 0 || (r1.is_some_and(in_halving_band) && r2.is_some_and(in_halving_band));
            rows.push(PropositionRow {
                state,
                lambda,
                prop1: p1[i],
                prop2: p2[i],
                prop1_ratio: r1,
                prop2_ratio: r2,
                pass: computed && band_ok,
            });
        }
    }
    Ok(rows)
}

pub const ABLATION_CSV_HEADER: &str = "seed,mode,acc_full,acc_missing_image,acc_missing_text,acc_noisy_image,acc_noisy_text,avg_missing,gap_missing,avg_noisy,gap_noisy,conflict_fraction";

/// Rows in input order; `conflict_fraction` is empty for modes without a KL term.
pub fn ablation_to_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from(ABLATION_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let m = &r.metrics;
        let fields = [
            r.seed.to_string(),
            r.mode.clone(),
            fmt_g9(m.acc_full),
            fmt_g9(m.acc_missing_image),
            fmt_g9(m.acc_missing_text),
            fmt_g9(m.acc_noisy_image),
            fmt_g9(m.acc_noisy_text),
            fmt_g9(m.avg_missing),
            fmt_g9(m.gap_missing),
            fmt_g9(m.avg_noisy),
            fmt_g9(m.gap_noisy),
            m.conflict_fraction.map(fmt_g9).unwrap_or_default(),
        ];
        s.push_str(&fields.join(","));
        s.push('\n');
    }
    s
}

pub const PROPOSITION_CSV_HEADER: &str = "state,lambda,prop1_delta_actual,prop1_delta_firstorder,prop1_residual,prop1_cross_term,prop1_ratio,prop2_delta_actual,prop2_delta_firstorder,prop2_residual,prop2_cross_term,prop2_ratio,pass";

pub fn propositions_to_csv(rows: &[PropositionRow]) -> String {
    let opt = |x: Option<f64>| x.map(fmt_g9).unwrap_or_default();
    let report = |r: Option<ResidualReport>| {
        [
            opt(r.map(|r| r.delta_actual)),
            opt(r.map(|r| r.delta_firstorder)),
            opt(r.map(|r| r.residual)),
            opt(r.map(|r| r.cross_term)),
        ]
    };
    let mut s = String::from(PROPOSITION_CSV_HEADER);
    s.push('\n');
    for r in rows {
        let mut fields = vec![r.state.to_string(), fmt_g9(r.lambda)];
        fields.extend(report(r.prop1));
        fields.push(opt(r.prop1_ratio));
        fields.extend(report(r.prop2));
        fields.push(opt(r.prop2_ratio));
        fields.push(u8::from(r.pass).to_string());
        s.push_str(&fields.join(","));
        s.push('\n');
    }
    s
}

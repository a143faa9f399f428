//! Numeric checks of the first-order loss-change expansions.
//!
//! Each check takes one plain gradient step of size `λ`, measures the actual
//! loss change, and compares it with the first-order prediction built from
//! gradient block norms and cross terms. The residual must shrink as `O(λ²)`,
//! which [`halving_ratios`] tests by halving `λ`.

use serde::Serialize;

use crate::balgrad::{builtin_registry, reweight, schedule_factor, BalGradConfig, KlWeighting};
use crate::datagen::FeatureRecord;
use crate::error::{invalid, Error, Result};
use crate::harness::TrainLog;
use crate::model::{backward, forward, kl_joint_gradient, Block, Fusion, Params};

/// Largest step size for which the first-order expansion is checked.
pub const MAX_LAMBDA: f64 = 1e-2;

/// Accepted range of `residual(λ/2) / residual(λ)`.
pub const HALVING_BAND: (f64, f64) = (0.15, 0.4);

/// Blocks updated by the checks; the per-modality heads stay fixed.
pub const UPDATED_BLOCKS: [Block; 3] = [Block::EmbedV, Block::EmbedL, Block::Fused];

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ResidualReport {
    pub lambda: f64,
    pub delta_actual: f64,
    pub delta_firstorder: f64,
    pub residual: f64,
    /// `g_T^v · g_T^l` for the target-only check, `(G^τ)ᵀ G^kl` for the
    /// combined check.
    pub cross_term: f64,
}

impl ResidualReport {
    fn new(lambda: f64, delta_actual: f64, delta_firstorder: f64, cross_term: f64) -> Self {
        Self {
            lambda,
            delta_actual,
            delta_firstorder,
            residual: (delta_actual - delta_firstorder).abs(),
            cross_term,
        }
    }

    pub fn conflicted(&self) -> bool {
        self.cross_term < 0.0
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if !(lambda > 0.0 && lambda <= MAX_LAMBDA) {
        return Err(invalid(format!(
            "step size {lambda} outside the first-order regime (0, {MAX_LAMBDA}]"
        )));
    }
    Ok(())
}

fn finite_or_fail(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::OracleFailure(format!("non-finite {what} after update")))
    }
}

/// Target-loss expansion: update the two embedding layers and the fused
/// classifier by `−λ ∇L_T` and compare the change of `L_T` with
/// `−λ(‖g_v‖² + ‖g_l‖² + ‖g_T‖²)`, where `‖g_T‖²` is assembled from the
/// modality blocks of the fused gradient. Under additive fusion the two
/// blocks share coordinates and contribute `‖g_T^v + g_T^l‖²`, which carries
/// the `2 g_T^v·g_T^l` cross term; under concatenation they occupy disjoint
/// coordinates and contribute `‖g_T^v‖² + ‖g_T^l‖²`. The cross term is
/// reported for both.
pub fn verify_prop1(params: &Params, batch: &[FeatureRecord], lambda: f64) -> Result<ResidualReport> {
    check_lambda(lambda)?;
    let out = forward(params, batch)?;
    let grads = backward(params, batch, &out)?;
    let g = &grads.target;

    let split_v = &grads.target_split_v;
    let split_l = &grads.target_split_l;
    let cross = split_v.dot(split_l)?;
    let blocks_sq = split_v.norm_sq() + split_l.norm_sq();
    let fused_w_sq = match params.fusion() {
        Fusion::Concat => blocks_sq,
        Fusion::Add => blocks_sq + 2.0 * cross,
    };
    let fused_b_sq: f64 = g.fused.b.iter().map(|x| x * x).sum();
    let first_order =
        -lambda * (g.embed_v.norm_sq() + g.embed_l.norm_sq() + fused_w_sq + fused_b_sq);

    let mut updated = params.clone();
    updated.axpy(-lambda, &g.restricted(&UPDATED_BLOCKS));
    let after = forward(&updated, batch)
        .map_err(|e| Error::OracleFailure(format!("forward after update failed: {e}")))?;
    let delta = finite_or_fail(after.losses.target, "target loss")? - out.losses.target;
    Ok(ResidualReport::new(lambda, delta, first_order, cross))
}

/// KL weights a strategy would apply to the current losses; strategies
/// without a KL term are checked with equal weights.
fn kl_weights(config: &BalGradConfig, loss_v: f64, loss_l: f64) -> Result<(f64, f64)> {
    let strategy = builtin_registry().get(&config.mode)?;
    match strategy.kl_weighting() {
        Some(KlWeighting::LossProportional) => reweight(loss_v, loss_l),
        Some(KlWeighting::Fixed) | None => Ok((0.5, 0.5)),
    }
}

/// Combined-loss expansion with `L = L_T + s·c·(W_v·KL(p_v‖p_l) + W_l·KL(p_l‖p_v))`,
/// where `c` is the schedule factor at step 0, the weights come from the
/// configured strategy and are frozen at the starting point, and `s = ±1`.
/// The embedding layers move by `−λ(G^τ + G^kl)` and the fused classifier by
/// `−λ G^τ`.
pub fn verify_prop2_signed(
    params: &Params,
    batch: &[FeatureRecord],
    lambda: f64,
    config: &BalGradConfig,
    kl_sign: f64,
) -> Result<ResidualReport> {
    check_lambda(lambda)?;
    config.validate()?;
    if kl_sign != 1.0 && kl_sign != -1.0 {
        return Err(invalid("kl_sign must be +1 or -1"));
    }
    let out = forward(params, batch)?;
    let grads = backward(params, batch, &out)?;
    let (w_v, w_l) = kl_weights(config, out.losses.target_v, out.losses.target_l)?;
    let c = kl_sign * schedule_factor(0.0, config.gamma, config.schedule_tau);
    let (kw_v, kw_l) = (c * w_v, c * w_l);
    let combined = |l: &crate::model::LossBundle| l.target + kw_v * l.kl_v + kw_l * l.kl_l;

    let g_tau = grads.target.restricted(&UPDATED_BLOCKS);
    let g_kl = kl_joint_gradient(params, batch, &out, kw_v, kw_l)?
        .restricted(&[Block::EmbedV, Block::EmbedL]);
    let cross = g_tau.dot(&g_kl);
    let first_order = -lambda * (g_tau.norm_sq() + g_kl.norm_sq() + 2.0 * cross);

    let mut updated = params.clone();
    updated.axpy(-lambda, &g_tau);
    updated.axpy(-lambda, &g_kl);
    let after = forward(&updated, batch)
        .map_err(|e| Error::OracleFailure(format!("forward after update failed: {e}")))?;
    let delta = finite_or_fail(combined(&after.losses), "combined loss")? - combined(&out.losses);
    Ok(ResidualReport::new(lambda, delta, first_order, cross))
}

pub fn verify_prop2(
    params: &Params,
    batch: &[FeatureRecord],
    lambda: f64,
    config: &BalGradConfig,
) -> Result<ResidualReport> {
    verify_prop2_signed(params, batch, lambda, config, 1.0)
}

/// `residual[i+1] / residual[i]` for reports ordered by successively halved λ.
pub fn halving_ratios(reports: &[ResidualReport]) -> Vec<f64> {
    reports
        .windows(2)
        .map(|w| w[1].residual / w[0].residual)
        .collect()
}

pub fn in_halving_band(ratio: f64) -> bool {
    (HALVING_BAND.0..=HALVING_BAND.1).contains(&ratio)
}

/// Fraction of logged steps whose pre-projection target/KL dot product was
/// negative. Steps without a KL term are skipped.
pub fn conflict_fraction(log: &TrainLog) -> Result<f64> {
    let dots: Vec<f64> = log.rows.iter().filter_map(|r| r.dot_t_kl).collect();
    if dots.is_empty() {
        return Err(invalid("conflict fraction needs at least one step with a KL term"));
    }
    Ok(dots.iter().filter(|&&d| d < 0.0).count() as f64 / dots.len() as f64)
}

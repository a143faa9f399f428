//! Loss-proportional KL reweighting, the growing KL schedule, and the
//! conflict-gated projection of the target gradient.
//!
//! The five update rules (baseline, fixed KL weights, reweighting only,
//! projection only, and both) are [`UpdateStrategy`] implementations looked
//! up by name in a [`StrategyRegistry`].

mod registry;
mod strategy;

pub use registry::{builtin_registry, StrategyRegistry, BUILTIN_MODES};
pub use strategy::{
    Baseline, FixedKl, Full, KlWeighting, ProjectOnly, ReweightOnly, Update, UpdateStrategy,
};

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{Block, GradientSet, LossBundle, Params};
use crate::numerics::{dot, norm, Vec64, ZERO_NORM};

/// Both losses below this are treated as converged.
pub const LOSS_FLOOR: f64 = 1e-12;
/// Projected norm, relative to the input, below which the result is treated
/// as exact cancellation.
pub const CANCELLATION: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalGradConfig {
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(default = "default_tau")]
    pub schedule_tau: f64,
    /// Registered strategy name, see [`BUILTIN_MODES`].
    #[serde(default = "default_mode")]
    pub mode: String,
}

fn default_gamma() -> f64 {
    0.5
}

fn default_tau() -> f64 {
    1.0
}

fn default_mode() -> String {
    "full".to_string()
}

impl Default for BalGradConfig {
    fn default() -> Self {
        Self {
            gamma: default_gamma(),
            schedule_tau: default_tau(),
            mode: default_mode(),
        }
    }
}

impl BalGradConfig {
    pub fn with_mode(mode: &str) -> Self {
        Self {
            mode: mode.to_string(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(invalid(format!("gamma = {} must be > 0", self.gamma)));
        }
        if !(self.schedule_tau.is_finite() && self.schedule_tau > 0.0) {
            return Err(invalid(format!(
                "schedule_tau = {} must be > 0",
                self.schedule_tau
            )));
        }
        builtin_registry().get(&self.mode)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepDiagnostics {
    pub w_v: f64,
    pub w_l: f64,
    pub schedule_factor: f64,
    /// Dot product of the target gradient with the combined KL gradient,
    /// before projection. `None` when the strategy has no KL term.
    pub dot_t_kl: Option<f64>,
    pub cos_t_kl: Option<f64>,
    pub conflicted: bool,
    pub kl_norm: f64,
    pub projected_norm: f64,
}

/// Loss-proportional weights: the less converged modality gets the larger
/// share of the KL gradient.
pub fn reweight(loss_v: f64, loss_l: f64) -> Result<(f64, f64)> {
    if !(loss_v >= 0.0 && loss_l >= 0.0) || !loss_v.is_finite() || !loss_l.is_finite() {
        return Err(invalid(format!(
            "losses must be finite and nonnegative, got ({loss_v}, {loss_l})"
        )));
    }
    if loss_v < LOSS_FLOOR && loss_l < LOSS_FLOOR {
        return Ok((0.5, 0.5));
    }
    let total = loss_v + loss_l;
    let w_v = loss_v / total;
    Ok((w_v, 1.0 - w_v))
}

/// `gamma · (1 + sigmoid(t / tau))`: rises from `1.5·gamma` towards `2·gamma`.
pub fn schedule_factor(t: f64, gamma: f64, schedule_tau: f64) -> f64 {
    gamma * (1.0 + 1.0 / (1.0 + (-t / schedule_tau).exp()))
}

fn check_same_shape(a: &Params, b: &Params) -> Result<()> {
    for blk in Block::ALL {
        if a.block(blk).w.shape() != b.block(blk).w.shape() {
            return Err(invalid(format!(
                "gradient shape mismatch in block {}",
                blk.name()
            )));
        }
    }
    Ok(())
}

/// `factor · (w_l·g_l_kl + w_v·g_v_kl)` restricted to the two embedding
/// layers; zero on the heads and the fused classifier.
pub fn combine_kl_gradient(
    g_v_kl: &Params,
    g_l_kl: &Params,
    w_v: f64,
    w_l: f64,
    factor: f64,
) -> Result<Params> {
    check_same_shape(g_v_kl, g_l_kl)?;
    let mut out = g_v_kl.zeros_like();
    out.embed_v.axpy(factor * w_v, &g_v_kl.embed_v);
    out.embed_l.axpy(factor * w_l, &g_l_kl.embed_l);
    Ok(out)
}

/// Removes the component of `g_t` along `g_kl` when the two conflict
/// (negative dot product). Returns the possibly projected vector and whether
/// a conflict was detected.
pub fn project_target_gradient(g_t: &[f64], g_kl: &[f64]) -> Result<(Vec64, bool)> {
    let d = dot(g_t, g_kl)?;
    let kl_norm = norm(g_kl);
    if d >= 0.0 || kl_norm < ZERO_NORM {
        return Ok((g_t.to_vec(), false));
    }
    let kl_sq = kl_norm * kl_norm;
    let mut projected: Vec64 = g_t
        .iter()
        .zip(g_kl)
        .map(|(t, k)| t - d / kl_sq * k)
        .collect();
    // Second Gram-Schmidt pass for whatever rounding left along g_kl.
    let d2 = dot(&projected, g_kl)?;
    if d2 < 0.0 {
        for (p, k) in projected.iter_mut().zip(g_kl) {
            *p -= d2 / kl_sq * k;
        }
    }
    // Antiparallel inputs cancel down to rounding noise.
    if norm(&projected) <= CANCELLATION * norm(g_t) {
        projected.iter_mut().for_each(|p| *p = 0.0);
    }
    Ok((projected, true))
}

/// [`project_target_gradient`] over parameter-shaped gradients.
pub fn project_params(g_t: &Params, g_kl: &Params) -> Result<(Params, bool)> {
    check_same_shape(g_t, g_kl)?;
    let (flat, conflicted) = project_target_gradient(&g_t.flatten(), &g_kl.flatten())?;
    let mut out = g_t.zeros_like();
    out.assign_flat(&flat)?;
    Ok((out, conflicted))
}

/// Update direction for step `t` under the strategy named by `config.mode`.
pub fn compose_update(
    grads: &GradientSet,
    losses: &LossBundle,
    config: &BalGradConfig,
    t: u64,
) -> Result<Update> {
    builtin_registry()
        .get(&config.mode)?
        .compose(grads, losses, config, t)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reweight_examples() {
        assert_eq!(reweight(1.0, 1.0).unwrap(), (0.5, 0.5));
        assert_eq!(reweight(1.0, 3.0).unwrap(), (0.25, 0.75));
        assert_eq!(reweight(0.0, 2.0).unwrap(), (0.0, 1.0));
        assert_eq!(reweight(0.0, 0.0).unwrap(), (0.5, 0.5));
        assert!(reweight(-1.0, 1.0).is_err());
        assert!(reweight(f64::NAN, 1.0).is_err());
    }

    #[test]
    fn schedule_examples() {
        assert_eq!(schedule_factor(0.0, 0.5, 1.0), 0.75);
        assert!((schedule_factor(1e6, 0.5, 1.0) - 1.0).abs() < 1e-15);
        // 0.5 * (1 + e/(1+e))
        assert!((schedule_factor(1.0, 0.5, 1.0) - 0.8655293).abs() < 1e-7);
        assert!((schedule_factor(25.0, 0.5, 25.0) - 0.8655293).abs() < 1e-7);
    }

    #[test]
    fn projection_examples() {
        assert_eq!(
            project_target_gradient(&[1.0, 0.0], &[0.0, 1.0]).unwrap(),
            (vec![1.0, 0.0], false)
        );
        assert_eq!(
            project_target_gradient(&[1.0, -1.0], &[0.0, 1.0]).unwrap(),
            (vec![1.0, 0.0], true)
        );
        assert_eq!(
            project_target_gradient(&[-2.0, 0.0], &[1.0, 0.0]).unwrap(),
            (vec![0.0, 0.0], true)
        );
        assert_eq!(
            project_target_gradient(&[-2.0, 0.0], &[0.0, 0.0]).unwrap(),
            (vec![-2.0, 0.0], false)
        );
        assert!(project_target_gradient(&[1.0], &[1.0, 0.0]).is_err());
    }

    #[test]
    fn config_validation() {
        assert!(BalGradConfig::default().validate().is_ok());
        assert!(BalGradConfig::with_mode("nope").validate().is_err());
        let c = BalGradConfig {
            gamma: 0.0,
            ..BalGradConfig::default()
        };
        assert!(c.validate().is_err());
        let c = BalGradConfig {
            schedule_tau: -1.0,
            ..BalGradConfig::default()
        };
        assert!(c.validate().is_err());
    }
}

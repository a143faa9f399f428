use crate::error::Result;
use crate::model::{GradientSet, LossBundle, Params};
use crate::numerics::norm;

use super::{
    combine_kl_gradient, project_params, reweight, schedule_factor, BalGradConfig,
    StepDiagnostics,
};

/// A per-step rule turning the model's gradients into an update direction.
///
/// The caller applies `θ ← θ − λ · direction`.
pub trait UpdateStrategy: Send + Sync {
    fn name(&self) -> &'static str;

    /// How the mutual-KL gradients are weighted; `None` when the strategy
    /// has no KL term.
    fn kl_weighting(&self) -> Option<KlWeighting>;

    fn uses_kl(&self) -> bool {
        self.kl_weighting().is_some()
    }

    fn compose(
        &self,
        grads: &GradientSet,
        losses: &LossBundle,
        config: &BalGradConfig,
        t: u64,
    ) -> Result<Update>;
}

#[derive(Debug, Clone)]
pub struct Update {
    pub direction: Params,
    pub diagnostics: StepDiagnostics,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KlWeighting {
    /// `W_v = W_l = 1/2`.
    Fixed,
    /// `W_m = L_m / (L_v + L_l)` from the per-head target losses.
    LossProportional,
}

/// Target and per-head CE gradients only.
#[derive(Debug, Default, Clone, Copy)]
pub struct Baseline;

/// Mutual KL with fixed equal weights, no projection.
#[derive(Debug, Default, Clone, Copy)]
pub struct FixedKl;

/// Loss-proportional KL weights, no projection.
#[derive(Debug, Default, Clone, Copy)]
pub struct ReweightOnly;

/// Fixed equal KL weights with conflict-gated projection.
#[derive(Debug, Default, Clone, Copy)]
pub struct ProjectOnly;

/// Loss-proportional KL weights with conflict-gated projection.
#[derive(Debug, Default, Clone, Copy)]
pub struct Full;

fn ce_sum(grads: &GradientSet) -> Params {
    let mut d = grads.ce_v.clone();
    d.axpy(1.0, &grads.ce_l);
    d
}

impl UpdateStrategy for Baseline {
    fn name(&self) -> &'static str {
        "baseline"
    }

    fn kl_weighting(&self) -> Option<KlWeighting> {
        None
    }

    fn compose(
        &self,
        grads: &GradientSet,
        losses: &LossBundle,
        config: &BalGradConfig,
        t: u64,
    ) -> Result<Update> {
        let (w_v, w_l) = reweight(losses.target_v, losses.target_l)?;
        let mut direction = ce_sum(grads);
        direction.axpy(1.0, &grads.target);
        Ok(Update {
            direction,
            diagnostics: StepDiagnostics {
                w_v,
                w_l,
                schedule_factor: schedule_factor(t as f64, config.gamma, config.schedule_tau),
                dot_t_kl: None,
                cos_t_kl: None,
                conflicted: false,
                kl_norm: 0.0,
                projected_norm: grads.target.norm_sq().sqrt(),
            },
        })
    }
}

/// Shared body of the four KL strategies.
pub(crate) fn compose_with_kl(
    grads: &GradientSet,
    losses: &LossBundle,
    config: &BalGradConfig,
    t: u64,
    weighting: KlWeighting,
    project: bool,
) -> Result<Update> {
    let (w_v, w_l) = match weighting {
        KlWeighting::Fixed => (0.5, 0.5),
        KlWeighting::LossProportional => reweight(losses.target_v, losses.target_l)?,
    };
    let factor = schedule_factor(t as f64, config.gamma, config.schedule_tau);
    let g_kl = combine_kl_gradient(&grads.kl_v, &grads.kl_l, w_v, w_l, factor)?;

    let flat_t = grads.target.flatten();
    let flat_kl = g_kl.flatten();
    let dot_t_kl = crate::numerics::dot(&flat_t, &flat_kl)?;
    let cos_t_kl = crate::numerics::cosine_similarity(&flat_t, &flat_kl)?;

    let (target, conflicted) = if project {
        project_params(&grads.target, &g_kl)?
    } else {
        (grads.target.clone(), false)
    };

    let mut direction = ce_sum(grads);
    direction.axpy(1.0, &target);
    direction.axpy(factor * w_v, &grads.kl_v);
    direction.axpy(factor * w_l, &grads.kl_l);

    Ok(Update {
        direction,
        diagnostics: StepDiagnostics {
            w_v,
            w_l,
            schedule_factor: factor,
            dot_t_kl: Some(dot_t_kl),
            cos_t_kl: Some(cos_t_kl),
            conflicted,
            kl_norm: norm(&flat_kl),
            projected_norm: target.norm_sq().sqrt(),
        },
    })
}

macro_rules! kl_strategy {
    ($ty:ty, $name:literal, $weighting:expr, $project:expr) => {
        impl UpdateStrategy for $ty {
            fn name(&self) -> &'static str {
                $name
            }

            fn kl_weighting(&self) -> Option<KlWeighting> {
                Some($weighting)
            }

            fn compose(
                &self,
                grads: &GradientSet,
                losses: &LossBundle,
                config: &BalGradConfig,
                t: u64,
            ) -> Result<Update> {
                compose_with_kl(grads, losses, config, t, $weighting, $project)
            }
        }
    };
}

kl_strategy!(FixedKl, "fixed-kl", KlWeighting::Fixed, false);
kl_strategy!(ReweightOnly, "reweight-only", KlWeighting::LossProportional, false);
kl_strategy!(ProjectOnly, "project-only", KlWeighting::Fixed, true);
kl_strategy!(Full, "full", KlWeighting::LossProportional, true);

//! Test oracles written independently of the library's forward pass: plain
//! scalar loops over the parameter structs, log-sum-exp losses, and central
//! differences.

#![allow(dead_code)]

use balgrad_core::datagen::FeatureRecord;
use balgrad_core::model::{init_params, Block, Fusion, ModelConfig, Params};
use balgrad_core::numerics::finite_difference_grad;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_EPS: f64 = 1e-6;
pub const GRAD_REL_TOL: f64 = 1e-5;
/// Denominator floor for blocks whose gradient is (structurally) zero.
pub const REL_FLOOR: f64 = 1e-3;

pub const LOSS_NAMES: [&str; 5] = ["target", "target_v", "target_l", "kl_v", "kl_l"];

fn affine(w: &balgrad_core::numerics::Mat64, b: &[f64], x: &[f64]) -> Vec<f64> {
    (0..w.rows())
        .map(|r| b[r] + (0..w.cols()).map(|c| w.get(r, c) * x[c]).sum::<f64>())
        .collect()
}

fn log_softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    z.iter().map(|v| v - lse).collect()
}

/// Fused logits with separate weight copies for the image and text pathways,
/// so the derivative w.r.t. each copy is that pathway's share of `∇W_fused`.
fn fused_logits(p: &Params, wa: &[f64], wb: &[f64], z_v: &[f64], z_l: &[f64]) -> Vec<f64> {
    let (c, d_e) = (p.fused.w.rows(), z_v.len());
    let cols = p.fused.w.cols();
    (0..c)
        .map(|r| {
            let mut s = p.fused.b[r];
            for k in 0..d_e {
                s += wa[r * d_e + k] * z_v[k] + wb[r * d_e + k] * z_l[k];
            }
            debug_assert!(cols == d_e || cols == 2 * d_e);
            s
        })
        .collect()
}

/// Image-pathway and text-pathway weight copies of the fused classifier.
pub fn fused_split_weights(p: &Params) -> (Vec<f64>, Vec<f64>) {
    let (c, d_e) = (p.fused.w.rows(), p.embed_v.w.rows());
    let concat = p.fused.w.cols() == 2 * d_e && p.fusion() == Fusion::Concat;
    let mut wa = vec![0.0; c * d_e];
    let mut wb = vec![0.0; c * d_e];
    for r in 0..c {
        for k in 0..d_e {
            wa[r * d_e + k] = p.fused.w.get(r, k);
            wb[r * d_e + k] = if concat { p.fused.w.get(r, d_e + k) } else { p.fused.w.get(r, k) };
        }
    }
    (wa, wb)
}

pub struct Probs {
    pub log_v: Vec<Vec<f64>>,
    pub log_l: Vec<Vec<f64>>,
}

pub fn probs(p: &Params, batch: &[FeatureRecord]) -> Probs {
    let mut out = Probs { log_v: vec![], log_l: vec![] };
    for r in batch {
        let z_v = affine(&p.embed_v.w, &p.embed_v.b, &r.x_v);
        let z_l = affine(&p.embed_l.w, &p.embed_l.b, &r.x_l);
        out.log_v.push(log_softmax(&affine(&p.head_v.w, &p.head_v.b, &z_v)));
        out.log_l.push(log_softmax(&affine(&p.head_l.w, &p.head_l.b, &z_l)));
    }
    out
}

fn kl(log_p: &[f64], log_q: &[f64]) -> f64 {
    log_p.iter().zip(log_q).map(|(a, b)| a.exp() * (a - b)).sum()
}

/// The five batch-mean losses. `teacher` supplies the fixed distributions for
/// the KL terms: `kl_v = KL(p_v ‖ teacher_l)`, `kl_l = KL(p_l ‖ teacher_v)`.
pub fn losses_with(
    p: &Params,
    wa: &[f64],
    wb: &[f64],
    batch: &[FeatureRecord],
    teacher: &Probs,
) -> [f64; 5] {
    let n = batch.len() as f64;
    let mut out = [0.0; 5];
    for (i, r) in batch.iter().enumerate() {
        let y = r.y as usize;
        let z_v = affine(&p.embed_v.w, &p.embed_v.b, &r.x_v);
        let z_l = affine(&p.embed_l.w, &p.embed_l.b, &r.x_l);
        let lv = log_softmax(&affine(&p.head_v.w, &p.head_v.b, &z_v));
        let ll = log_softmax(&affine(&p.head_l.w, &p.head_l.b, &z_l));
        let lt = log_softmax(&fused_logits(p, wa, wb, &z_v, &z_l));
        out[0] -= lt[y] / n;
        out[1] -= lv[y] / n;
        out[2] -= ll[y] / n;
        out[3] += kl(&lv, &teacher.log_l[i]) / n;
        out[4] += kl(&ll, &teacher.log_v[i]) / n;
    }
    out
}

pub fn losses(p: &Params, batch: &[FeatureRecord], teacher: &Probs) -> [f64; 5] {
    let (wa, wb) = fused_split_weights(p);
    losses_with(p, &wa, &wb, batch, teacher)
}

/// Same as `losses` but with both KL teachers live (no detachment).
pub fn joint_kl(p: &Params, batch: &[FeatureRecord]) -> (f64, f64) {
    let live = probs(p, batch);
    let n = batch.len() as f64;
    let mut out = (0.0, 0.0);
    for i in 0..batch.len() {
        out.0 += kl(&live.log_v[i], &live.log_l[i]) / n;
        out.1 += kl(&live.log_l[i], &live.log_v[i]) / n;
    }
    out
}

pub fn random_problem(rng: &mut ChaCha8Rng, fusion: Fusion) -> (Params, Vec<FeatureRecord>) {
    let cfg = ModelConfig {
        d_v: rng.random_range(1..=6),
        d_l: rng.random_range(1..=6),
        d_e: rng.random_range(1..=4),
        classes: rng.random_range(2..=5),
        fusion,
    };
    let mut p = init_params(&cfg, rng.random()).unwrap();
    for blk in Block::ALL {
        for v in p.block_mut(blk).values_mut() {
            *v = rng.random_range(-1.5..1.5);
        }
    }
    let n = rng.random_range(1..=8);
    let batch = (0..n)
        .map(|_| FeatureRecord {
            x_v: (0..cfg.d_v).map(|_| rng.random_range(-2.0..2.0)).collect(),
            x_l: (0..cfg.d_l).map(|_| rng.random_range(-2.0..2.0)).collect(),
            y: rng.random_range(0..cfg.classes as u32),
        })
        .collect();
    (p, batch)
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(REL_FLOOR)
}

/// Finite-difference gradient of loss `k` over the flattened parameters,
/// KL teachers frozen at `p`.
pub fn numeric_gradient(p: &Params, batch: &[FeatureRecord], k: usize) -> Vec<f64> {
    let teacher = probs(p, batch);
    let mut probe = p.clone();
    finite_difference_grad(
        |flat| {
            probe.assign_flat(flat)?;
            Ok(losses(&probe, batch, &teacher)[k])
        },
        &p.flatten(),
        FD_EPS,
    )
    .unwrap()
}

/// Flat index ranges of each block, in `Block::ALL` order.
pub fn block_ranges(p: &Params) -> Vec<(Block, std::ops::Range<usize>)> {
    let mut start = 0;
    Block::ALL
        .iter()
        .map(|&b| {
            let len = p.block(b).len();
            let r = start..start + len;
            start += len;
            (b, r)
        })
        .collect()
}

/// Worst per-block relative error of the analytic gradients against central
/// differences, over all five losses. Returns `(loss, block, error)`.
pub fn worst_gradient_error(p: &Params, batch: &[FeatureRecord]) -> (usize, Block, f64) {
    let out = balgrad_core::model::forward(p, batch).unwrap();
    let g = balgrad_core::model::backward(p, batch, &out).unwrap();
    let analytic = [&g.target, &g.ce_v, &g.ce_l, &g.kl_v, &g.kl_l];
    let mut worst = (0, Block::EmbedV, 0.0);
    for (k, a) in analytic.iter().enumerate() {
        let a = a.flatten();
        let n = numeric_gradient(p, batch, k);
        for (blk, r) in block_ranges(p) {
            let e = rel_err(&a[r.clone()], &n[r]);
            if e > worst.2 {
                worst = (k, blk, e);
            }
        }
    }
    worst
}

/// Relative errors of the two fused-weight pathway gradients.
pub fn split_errors(p: &Params, batch: &[FeatureRecord]) -> (f64, f64) {
    let out = balgrad_core::model::forward(p, batch).unwrap();
    let g = balgrad_core::model::backward(p, batch, &out).unwrap();
    let teacher = probs(p, batch);
    let (wa, wb) = fused_split_weights(p);
    let fd = |which: usize| -> Vec<f64> {
        let base = if which == 0 { wa.clone() } else { wb.clone() };
        finite_difference_grad(
            |w| {
                let (a, b) = if which == 0 { (w, &wb[..]) } else { (&wa[..], w) };
                Ok(losses_with(p, a, b, batch, &teacher)[0])
            },
            &base,
            FD_EPS,
        )
        .unwrap()
    };
    (
        rel_err(g.target_split_v.as_slice(), &fd(0)),
        rel_err(g.target_split_l.as_slice(), &fd(1)),
    )
}

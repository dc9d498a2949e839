//! Training objective with hand-derived gradients.
//!
//! Every component returns its value together with the gradient with respect
//! to the network output (region and kernel probabilities, similarity
//! vectors). The combined gradient is laid out like the `[6, H, W]` output
//! tensor so it can seed the backward pass directly.

use serde::{Deserialize, Serialize};

use crate::labelgen::SegTargets;
use crate::model::{SegOutput, SIMILARITY_DIM};

/// Smoothing added to the dice numerator and denominator.
pub const DICE_EPS: f64 = 1e-6;
/// Probability clamp for the cross-entropy baseline.
const BCE_EPS: f64 = 1e-7;

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum LossError {
    #[error("shape mismatch: expected {expected} values, found {found}")]
    ShapeMismatch { expected: usize, found: usize },
    #[error("invalid loss config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    /// Dice + aggregation + discrimination terms.
    Pan,
    /// Per-pixel cross-entropy plus dice on region and kernel only.
    CeDice,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub alpha: f64,
    pub beta: f64,
    pub delta_agg: f64,
    pub delta_dis: f64,
    pub ohem_ratio: f64,
    pub shrink_ratio: f64,
    pub loss_mode: LossMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha: 0.5,
            beta: 0.25,
            delta_agg: 0.5,
            delta_dis: 3.0,
            ohem_ratio: 3.0,
            shrink_ratio: crate::labelgen::DEFAULT_SHRINK_RATIO,
            loss_mode: LossMode::Pan,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        let bad = |m: &str| Err(LossError::Config(m.to_string()));
        if !(self.alpha >= 0.0 && self.beta >= 0.0) {
            return bad("weights must be non-negative");
        }
        if !(self.delta_agg > 0.0 && self.delta_agg < self.delta_dis) {
            return bad("margins must satisfy 0 < delta_agg < delta_dis");
        }
        if !(self.ohem_ratio >= 0.0 && self.ohem_ratio.is_finite()) {
            return bad("ohem_ratio must be a non-negative number");
        }
        if !(self.shrink_ratio > 0.0 && self.shrink_ratio <= 1.0) {
            return bad("shrink_ratio must lie in (0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    pub region: f64,
    pub kernel: f64,
    pub agg: f64,
    pub dis: f64,
    /// Fraction of pixels kept by hard-example mining.
    pub ohem_mask_coverage: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        [self.total, self.region, self.kernel, self.agg, self.dis]
            .iter()
            .all(|v| v.is_finite())
    }
}

fn check_len(expected: usize, found: usize) -> Result<(), LossError> {
    if expected == found {
        Ok(())
    } else {
        Err(LossError::ShapeMismatch { expected, found })
    }
}

/// `1 − (2Σpg + ε) / (Σp² + Σg² + ε)` over the valid pixels, with its
/// gradient with respect to `pred`.
pub fn dice_loss_grad(pred: &[f64], gt: &[bool], valid: Option<&[bool]>) -> Result<(f64, Vec<f64>), LossError> {
    check_len(pred.len(), gt.len())?;
    if let Some(v) = valid {
        check_len(pred.len(), v.len())?;
    }
    let on = |i: usize| valid.is_none_or(|v| v[i]);
    let (mut inter, mut pp, mut gg) = (0.0, 0.0, 0.0);
    for i in (0..pred.len()).filter(|&i| on(i)) {
        let g = f64::from(u8::from(gt[i]));
        inter += pred[i] * g;
        pp += pred[i] * pred[i];
        gg += g;
    }
    let num = 2.0 * inter + DICE_EPS;
    let den = pp + gg + DICE_EPS;
    let mut grad = vec![0.0; pred.len()];
    for i in (0..pred.len()).filter(|&i| on(i)) {
        let g = f64::from(u8::from(gt[i]));
        grad[i] = -(2.0 * g * den - num * 2.0 * pred[i]) / (den * den);
    }
    Ok((1.0 - num / den, grad))
}

pub fn dice_loss(pred: &[f64], gt: &[bool], valid: Option<&[bool]>) -> Result<f64, LossError> {
    dice_loss_grad(pred, gt, valid).map(|(l, _)| l)
}

/// Keeps every positive pixel and the `ratio × positives` highest-scoring
/// negatives; without positives, the top 1% (rounded up) of negatives. Ties
/// go to the lower pixel index.
pub fn ohem_select(score: &[f64], gt: &[bool], ratio: f64) -> Result<Vec<bool>, LossError> {
    check_len(score.len(), gt.len())?;
    let positives = gt.iter().filter(|&&g| g).count();
    let mut negatives: Vec<usize> = (0..gt.len()).filter(|&i| !gt[i]).collect();
    let keep = if positives == 0 {
        negatives.len().div_ceil(100)
    } else {
        ((ratio * positives as f64).floor() as usize).min(negatives.len())
    };
    negatives.sort_by(|&a, &b| score[b].total_cmp(&score[a]).then(a.cmp(&b)));
    let mut mask = gt.to_vec();
    for &i in &negatives[..keep] {
        mask[i] = true;
    }
    Ok(mask)
}

fn centroid(sim: &[f64], n: usize, pixels: &[usize]) -> [f64; SIMILARITY_DIM] {
    let mut c = [0.0; SIMILARITY_DIM];
    for &p in pixels {
        for (d, cd) in c.iter_mut().enumerate() {
            *cd += sim[d * n + p];
        }
    }
    let k = pixels.len() as f64;
    c.map(|v| v / k)
}

fn distance(a: &[f64; SIMILARITY_DIM], b: &[f64; SIMILARITY_DIM]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn pixel_vec(sim: &[f64], n: usize, p: usize) -> [f64; SIMILARITY_DIM] {
    std::array::from_fn(|d| sim[d * n + p])
}

/// Instances with a non-empty kernel, as (kernel pixels, ring pixels).
fn instance_sets(targets: &SegTargets) -> Vec<(Vec<usize>, Vec<usize>)> {
    (0..targets.num_instances())
        .map(|k| (targets.kernel_pixels(k), targets.ring_pixels(k)))
        .filter(|(kernel, _)| !kernel.is_empty())
        .collect()
}

/// Pulls each instance's ring pixels toward the centroid of its kernel in
/// similarity space. Returns the loss and its gradient with respect to the
/// channel-major similarity map.
pub fn agg_loss_grad(sim: &[f64], targets: &SegTargets, delta_agg: f64) -> Result<(f64, Vec<f64>), LossError> {
    let n = targets.height() * targets.width();
    check_len(SIMILARITY_DIM * n, sim.len())?;
    let mut grad = vec![0.0; sim.len()];
    let sets = instance_sets(targets);
    if sets.is_empty() {
        return Ok((0.0, grad));
    }
    let inv_n = 1.0 / sets.len() as f64;
    let mut total = 0.0;
    for (kernel, ring) in &sets {
        if ring.is_empty() {
            continue;
        }
        let g = centroid(sim, n, kernel);
        let inv_t = 1.0 / ring.len() as f64;
        let mut sum = 0.0;
        let mut grad_g = [0.0; SIMILARITY_DIM];
        for &p in ring {
            let f = pixel_vec(sim, n, p);
            let d = distance(&f, &g);
            let hinge = (d - delta_agg).max(0.0);
            let dd = hinge * hinge;
            sum += dd.ln_1p();
            if hinge > 0.0 {
                let coef = inv_n * inv_t * 2.0 * hinge / ((1.0 + dd) * d);
                for c in 0..SIMILARITY_DIM {
                    let gc = coef * (f[c] - g[c]);
                    grad[c * n + p] += gc;
                    grad_g[c] -= gc;
                }
            }
        }
        total += sum * inv_t;
        let share = 1.0 / kernel.len() as f64;
        for &p in kernel {
            for c in 0..SIMILARITY_DIM {
                grad[c * n + p] += grad_g[c] * share;
            }
        }
    }
    Ok((total * inv_n, grad))
}

pub fn agg_loss(sim: &[f64], targets: &SegTargets, delta_agg: f64) -> Result<f64, LossError> {
    agg_loss_grad(sim, targets, delta_agg).map(|(l, _)| l)
}

/// Pushes kernel centroids at least `delta_dis` apart, averaged over ordered
/// instance pairs.
pub fn dis_loss_grad(sim: &[f64], targets: &SegTargets, delta_dis: f64) -> Result<(f64, Vec<f64>), LossError> {
    let n = targets.height() * targets.width();
    check_len(SIMILARITY_DIM * n, sim.len())?;
    let mut grad = vec![0.0; sim.len()];
    let sets = instance_sets(targets);
    let count = sets.len();
    if count < 2 {
        return Ok((0.0, grad));
    }
    let cents: Vec<_> = sets.iter().map(|(k, _)| centroid(sim, n, k)).collect();
    let inv_pairs = 1.0 / (count * (count - 1)) as f64;
    let mut total = 0.0;
    let mut grad_c = vec![[0.0; SIMILARITY_DIM]; count];
    for i in 0..count {
        for j in 0..count {
            if i == j {
                continue;
            }
            let d = distance(&cents[i], &cents[j]);
            let hinge = (delta_dis - d).max(0.0);
            let dd = hinge * hinge;
            total += dd.ln_1p();
            if hinge > 0.0 && d > 0.0 {
                // d/dG_i of ln(1 + (δ − ‖G_i − G_j‖)²)
                let coef = -inv_pairs * 2.0 * hinge / ((1.0 + dd) * d);
                for c in 0..SIMILARITY_DIM {
                    let gc = coef * (cents[i][c] - cents[j][c]);
                    grad_c[i][c] += gc;
                    grad_c[j][c] -= gc;
                }
            }
        }
    }
    for ((kernel, _), gc) in sets.iter().zip(&grad_c) {
        let share = 1.0 / kernel.len() as f64;
        for &p in kernel {
            for c in 0..SIMILARITY_DIM {
                grad[c * n + p] += gc[c] * share;
            }
        }
    }
    Ok((total * inv_pairs, grad))
}

pub fn dis_loss(sim: &[f64], targets: &SegTargets, delta_dis: f64) -> Result<f64, LossError> {
    dis_loss_grad(sim, targets, delta_dis).map(|(l, _)| l)
}

/// Mean binary cross-entropy over all pixels with its gradient.
pub fn bce_loss_grad(pred: &[f64], gt: &[bool]) -> Result<(f64, Vec<f64>), LossError> {
    check_len(pred.len(), gt.len())?;
    let inv = 1.0 / pred.len().max(1) as f64;
    let mut total = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(&p, &g)| {
            let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            let clamped = q != p;
            if g {
                total -= q.ln();
                if clamped { 0.0 } else { -inv / q }
            } else {
                total -= (1.0 - q).ln();
                if clamped { 0.0 } else { inv / (1.0 - q) }
            }
        })
        .collect();
    Ok((total * inv, grad))
}

/// Loss value and gradient with respect to the output, flattened in the
/// network's `[6, H, W]` channel order.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGradient {
    pub report: LossReport,
    pub grad: Vec<f64>,
}

fn check_output(output: &SegOutput, targets: &SegTargets) -> Result<(), LossError> {
    let n = targets.height() * targets.width();
    check_len(n, output.num_pixels())?;
    check_len(n, output.region.len())?;
    check_len(n, output.kernel.len())?;
    check_len(SIMILARITY_DIM * n, output.similarity.len())
}

/// Combined objective and its gradient.
pub fn total_loss_grad(output: &SegOutput, targets: &SegTargets, config: &LossConfig) -> Result<LossGradient, LossError> {
    check_output(output, targets)?;
    let n = output.num_pixels();
    let region_gt = targets.region.to_bools();
    let kernel_gt = targets.kernel.to_bools();
    let mut grad = vec![0.0; (2 + SIMILARITY_DIM) * n];
    let mut report = LossReport::default();
    match config.loss_mode {
        LossMode::Pan => {
            let ohem = ohem_select(&output.region, &region_gt, config.ohem_ratio)?;
            report.ohem_mask_coverage = ohem.iter().filter(|&&v| v).count() as f64 / n.max(1) as f64;
            let (region, g_region) = dice_loss_grad(&output.region, &region_gt, Some(&ohem))?;
            let (kernel, g_kernel) = dice_loss_grad(&output.kernel, &kernel_gt, Some(&region_gt))?;
            let (agg, g_agg) = agg_loss_grad(&output.similarity, targets, config.delta_agg)?;
            let (dis, g_dis) = dis_loss_grad(&output.similarity, targets, config.delta_dis)?;
            grad[..n].copy_from_slice(&g_region);
            for (o, g) in grad[n..2 * n].iter_mut().zip(&g_kernel) {
                *o = config.alpha * g;
            }
            for ((o, a), d) in grad[2 * n..].iter_mut().zip(&g_agg).zip(&g_dis) {
                *o = config.beta * (a + d);
            }
            report.region = region;
            report.kernel = kernel;
            report.agg = agg;
            report.dis = dis;
        }
        LossMode::CeDice => {
            report.ohem_mask_coverage = 1.0;
            let (rb, g_rb) = bce_loss_grad(&output.region, &region_gt)?;
            let (rd, g_rd) = dice_loss_grad(&output.region, &region_gt, None)?;
            let (kb, g_kb) = bce_loss_grad(&output.kernel, &kernel_gt)?;
            let (kd, g_kd) = dice_loss_grad(&output.kernel, &kernel_gt, None)?;
            for i in 0..n {
                grad[i] = g_rb[i] + g_rd[i];
                grad[n + i] = config.alpha * (g_kb[i] + g_kd[i]);
            }
            report.region = rb + rd;
            report.kernel = kb + kd;
        }
    }
    report.total = report.region + config.alpha * report.kernel + config.beta * (report.agg + report.dis);
    Ok(LossGradient { report, grad })
}

pub fn total_loss(output: &SegOutput, targets: &SegTargets, config: &LossConfig) -> Result<LossReport, LossError> {
    total_loss_grad(output, targets, config).map(|g| g.report)
}

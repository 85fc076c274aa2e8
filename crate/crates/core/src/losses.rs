//! Supervision and cross-path consistency losses.
//!
//! Supervision follows the set-prediction recipe: L1 + generalized IoU
//! on both boxes, softmax cross entropy on the object category with a
//! no-object slot, and binary cross entropy on multi-hot actions.
//!
//! Consistency compares predictions of the same ground-truth instance
//! across decoding paths: sigmoid-typed outputs (box coordinates,
//! action probabilities) under mean-squared error, the softmax-typed
//! object-category distribution under Jensen–Shannon divergence. The
//! per-pair terms aggregate into L_cpc normalized by pair count and
//! ground-truth count, scaled by a ramp-up weight during training.

use crate::data::{Box2, GtTriplet};
use crate::matching::Assignment;
use crate::model::PredictionSet;
use crate::tape::Tape;
use crate::tensor::{Result, Tensor, TensorError};

/// Smallest box side used in GIoU computations.
const BOX_EPS: f64 = 1e-7;
/// Probability clamp inside logs.
const PROB_EPS: f64 = 1e-12;

/// All loss weights: consistency λ's, supervision weights and the
/// ramp-up schedule parameters.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights {
    pub lambda_h: f64,
    pub lambda_o: f64,
    pub lambda_act: f64,
    pub w_cls: f64,
    pub w_box: f64,
    pub w_giou: f64,
    pub w_bce: f64,
    /// Down-weight for the no-object class on unmatched queries.
    pub w_noobj: f64,
    pub w_max: f64,
    pub ramp_fraction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_h: 1.0,
            lambda_o: 1.0,
            lambda_act: 1.0,
            w_cls: 1.0,
            w_box: 5.0,
            w_giou: 2.0,
            w_bce: 1.0,
            w_noobj: 0.1,
            w_max: 0.5,
            ramp_fraction: 0.25,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.lambda_h,
            self.lambda_o,
            self.lambda_act,
            self.w_cls,
            self.w_box,
            self.w_giou,
            self.w_bce,
            self.w_noobj,
            self.w_max,
            self.ramp_fraction,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(TensorError::Domain {
                op: "loss_weights",
                detail: "weights must be finite and non-negative".into(),
            });
        }
        Ok(())
    }
}

/// Scalar loss components of one training step.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LossReport {
    /// Per-path supervision, keyed by path id.
    pub sup_per_path: Vec<(u8, f64)>,
    /// Per-pair consistency, keyed by (k, k').
    pub pair_losses: Vec<((u8, u8), f64)>,
    pub cpc: f64,
    pub rampup_weight: f64,
    pub total: f64,
    /// Set when some scene contributed no cross-matched pairs.
    pub cpc_empty: bool,
}

impl LossReport {
    /// The total re-derived from its parts.
    pub fn reconstructed_total(&self) -> f64 {
        let sup: f64 = self.sup_per_path.iter().map(|(_, v)| v).sum();
        sup + self.rampup_weight * self.cpc
    }
}

// ---- plain-value helpers (shared with matching and evaluation) --------

/// Mean absolute coordinate difference of two (cx, cy, w, h) boxes.
pub fn l1_value(a: &Box2, b: &Box2) -> f64 {
    let pa = a.as_array();
    let pb = b.as_array();
    pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).sum::<f64>() / 4.0
}

/// Generalized IoU of two (cx, cy, w, h) boxes: IoU minus the fraction
/// of the smallest enclosing box not covered by the union. In (-1, 1].
/// Degenerate sides are clamped rather than rejected.
pub fn giou_value(a: &Box2, b: &Box2) -> f64 {
    let clamped = |b: &Box2| Box2::new(b.cx, b.cy, b.w.max(BOX_EPS), b.h.max(BOX_EPS));
    let a = clamped(a);
    let b = clamped(b);
    let (ax1, ay1, ax2, ay2) = a.corners();
    let (bx1, by1, bx2, by2) = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    let cw = ax2.max(bx2) - ax1.min(bx1);
    let ch = ay2.max(by2) - ay1.min(by1);
    let enclosing = cw * ch;
    inter / union - (enclosing - union) / enclosing
}

/// Mean binary cross entropy between probabilities and targets.
pub fn bce_probs(probs: &[f64], targets: &[f64]) -> f64 {
    debug_assert_eq!(probs.len(), targets.len());
    let n = probs.len() as f64;
    probs
        .iter()
        .zip(targets)
        .map(|(&p, &t)| {
            let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / n
}

/// Numerically stable softmax over a slice.
pub fn softmax_values(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

pub fn sigmoid_values(logits: &[f64]) -> Vec<f64> {
    logits
        .iter()
        .map(|&z| {
            if z >= 0.0 {
                1.0 / (1.0 + (-z).exp())
            } else {
                let e = z.exp();
                e / (1.0 + e)
            }
        })
        .collect()
}

// ---- differentiable element losses -------------------------------------

/// Mean absolute error.
pub fn l1_loss(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = tape.sub(a, b)?;
    let ad = tape.abs(&d)?;
    tape.mean(&ad, None)
}

/// Mean squared error.
pub fn mse(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let d = tape.sub(a, b)?;
    let sq = tape.mul(&d, &d)?;
    tape.mean(&sq, None)
}

/// Mean binary cross entropy from logits:
/// relu(z) − z·t + log(1 + exp(−|z|)), elementwise then averaged.
pub fn bce_with_logits(tape: &mut Tape, logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let r = tape.relu(logits)?;
    let zt = tape.mul(logits, targets)?;
    let az = tape.abs(logits)?;
    let naz = tape.neg(&az)?;
    let e = tape.exp(&naz)?;
    let e1 = tape.add_scalar(&e, 1.0)?;
    let l = tape.log(&e1)?;
    let a = tape.sub(&r, &zt)?;
    let full = tape.add(&a, &l)?;
    tape.mean(&full, None)
}

/// Softmax cross entropy of a 1-D logit vector against a class index,
/// via the log-sum-exp form.
pub fn softmax_ce(tape: &mut Tape, logits: &Tensor, target: usize) -> Result<Tensor> {
    let m = tape.max_reduce(logits, None)?;
    let shifted = tape.sub(logits, &m)?;
    let e = tape.exp(&shifted)?;
    let s = tape.sum(&e, None)?;
    let lse = tape.log(&s)?;
    let at = tape.index(&shifted, target)?;
    tape.sub(&lse, &at)
}

/// Jensen–Shannon divergence of two probability vectors, natural log:
/// ½KL(p‖m) + ½KL(q‖m) with m = (p+q)/2. Symmetric, in [0, ln 2].
pub fn jsd(tape: &mut Tape, p: &Tensor, q: &Tensor) -> Result<Tensor> {
    if p.shape() != q.shape() || p.ndim() != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "jsd",
            lhs: p.shape().to_vec(),
            rhs: q.shape().to_vec(),
        });
    }
    for (name, t) in [("p", p), ("q", q)] {
        let sum: f64 = t.data().iter().sum();
        if (sum - 1.0).abs() > 1e-6 || t.data().iter().any(|&v| v < 0.0) {
            return Err(TensorError::Domain {
                op: "jsd",
                detail: format!("{name} is not a probability vector (sum {sum})"),
            });
        }
    }
    let m = {
        let s = tape.add(p, q)?;
        tape.mul_scalar(&s, 0.5)?
    };
    let eps = Tensor::filled(p.shape(), PROB_EPS);
    let log_m = {
        let mc = tape.max2(&m, &eps)?;
        tape.log(&mc)?
    };
    let kl = |t: &mut Tape, x: &Tensor| -> Result<Tensor> {
        let xc = t.max2(x, &eps)?;
        let log_x = t.log(&xc)?;
        let diff = t.sub(&log_x, &log_m)?;
        let w = t.mul(x, &diff)?;
        t.sum(&w, None)
    };
    let kl_p = kl(tape, p)?;
    let kl_q = kl(tape, q)?;
    let half_p = tape.mul_scalar(&kl_p, 0.5)?;
    let half_q = tape.mul_scalar(&kl_q, 0.5)?;
    tape.add(&half_p, &half_q)
}

/// Differentiable GIoU between two (cx, cy, w, h) box tensors of shape
/// [4]; sides clamped at 1e-7 via max so degenerate boxes never error.
pub fn giou_t(tape: &mut Tape, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let eps = Tensor::scalar(BOX_EPS);
    let corners = |t: &mut Tape, bx: &Tensor| -> Result<[Tensor; 6]> {
        let cx = t.index(bx, 0)?;
        let cy = t.index(bx, 1)?;
        let w0 = t.index(bx, 2)?;
        let h0 = t.index(bx, 3)?;
        let w = t.max2(&w0, &eps)?;
        let h = t.max2(&h0, &eps)?;
        let hw = t.mul_scalar(&w, 0.5)?;
        let hh = t.mul_scalar(&h, 0.5)?;
        let x1 = t.sub(&cx, &hw)?;
        let y1 = t.sub(&cy, &hh)?;
        let x2 = t.add(&cx, &hw)?;
        let y2 = t.add(&cy, &hh)?;
        let area = t.mul(&w, &h)?;
        Ok([x1, y1, x2, y2, area, w])
    };
    let [ax1, ay1, ax2, ay2, area_a, _] = corners(tape, a)?;
    let [bx1, by1, bx2, by2, area_b, _] = corners(tape, b)?;

    let ix2 = tape.min2(&ax2, &bx2)?;
    let ix1 = tape.max2(&ax1, &bx1)?;
    let iy2 = tape.min2(&ay2, &by2)?;
    let iy1 = tape.max2(&ay1, &by1)?;
    let iw0 = tape.sub(&ix2, &ix1)?;
    let iw = tape.relu(&iw0)?;
    let ih0 = tape.sub(&iy2, &iy1)?;
    let ih = tape.relu(&ih0)?;
    let inter = tape.mul(&iw, &ih)?;

    let areas = tape.add(&area_a, &area_b)?;
    let union = tape.sub(&areas, &inter)?;
    let iou = tape.div(&inter, &union)?;

    let cx2 = tape.max2(&ax2, &bx2)?;
    let cx1 = tape.min2(&ax1, &bx1)?;
    let cy2 = tape.max2(&ay2, &by2)?;
    let cy1 = tape.min2(&ay1, &by1)?;
    let cw = tape.sub(&cx2, &cx1)?;
    let ch = tape.sub(&cy2, &cy1)?;
    let enclosing = tape.mul(&cw, &ch)?;
    let gap = tape.sub(&enclosing, &union)?;
    let penalty = tape.div(&gap, &enclosing)?;
    tape.sub(&iou, &penalty)
}

// ---- supervision ---------------------------------------------------------

fn box_tensor(b: &Box2) -> Tensor {
    Tensor::vector(b.as_array().to_vec())
}

/// Supervision loss of one path on one scene.
///
/// Matched queries contribute box L1 + (1 − GIoU) on both boxes plus
/// object-category CE and action BCE; unmatched queries contribute
/// down-weighted no-object CE and zero-action BCE. Box terms normalize
/// by the ground-truth count, classification terms by the query count.
pub fn supervision_loss(
    tape: &mut Tape,
    preds: &PredictionSet,
    assignment: &Assignment,
    gts: &[GtTriplet],
    w: &LossWeights,
) -> Result<Tensor> {
    let n = preds.n_queries();
    let m = gts.len();
    let no_obj = preds.n_categories_with_noobj() - 1;
    if assignment.sigma.len() != n {
        return Err(TensorError::ShapeMismatch {
            op: "supervision_loss",
            lhs: vec![assignment.sigma.len()],
            rhs: vec![n],
        });
    }

    let mut box_terms: Option<Tensor> = None;
    let mut cls_terms: Option<Tensor> = None;
    let mut bce_terms: Option<Tensor> = None;
    let push = |tape: &mut Tape, acc: &mut Option<Tensor>, t: Tensor| -> Result<()> {
        *acc = Some(match acc.take() {
            Some(prev) => tape.add(&prev, &t)?,
            None => t,
        });
        Ok(())
    };

    for i in 0..n {
        let obj_row = tape.row(preds.obj_logits(), i)?;
        let act_row = tape.row(preds.act_logits(), i)?;
        match assignment.sigma[i] {
            Some(gt_idx) => {
                let gt = &gts[gt_idx];
                let bh = tape.row(preds.b_h(), i)?;
                let bo = tape.row(preds.b_o(), i)?;
                let gh = box_tensor(&gt.human_box);
                let go = box_tensor(&gt.object_box);

                let l1_h = l1_loss(tape, &bh, &gh)?;
                let l1_o = l1_loss(tape, &bo, &go)?;
                let l1 = tape.add(&l1_h, &l1_o)?;
                let l1_w = tape.mul_scalar(&l1, w.w_box)?;
                push(tape, &mut box_terms, l1_w)?;

                let gi_h = giou_t(tape, &bh, &gh)?;
                let gi_o = giou_t(tape, &bo, &go)?;
                let one = Tensor::scalar(1.0);
                let pen_h = tape.sub(&one, &gi_h)?;
                let pen_o = tape.sub(&one, &gi_o)?;
                let pen = tape.add(&pen_h, &pen_o)?;
                let pen_w = tape.mul_scalar(&pen, w.w_giou)?;
                push(tape, &mut box_terms, pen_w)?;

                let ce = softmax_ce(tape, &obj_row, gt.object_category)?;
                push(tape, &mut cls_terms, ce)?;

                let targets = Tensor::vector(gt.actions.iter().map(|&a| a as f64).collect());
                let bce = bce_with_logits(tape, &act_row, &targets)?;
                push(tape, &mut bce_terms, bce)?;
            }
            None => {
                let ce = softmax_ce(tape, &obj_row, no_obj)?;
                let ce_w = tape.mul_scalar(&ce, w.w_noobj)?;
                push(tape, &mut cls_terms, ce_w)?;

                let zeros = Tensor::zeros(&[preds.n_actions()]);
                let bce = bce_with_logits(tape, &act_row, &zeros)?;
                push(tape, &mut bce_terms, bce)?;
            }
        }
    }

    let mut total = Tensor::scalar(0.0);
    if let Some(b) = box_terms {
        let normed = tape.mul_scalar(&b, 1.0 / m as f64)?;
        total = tape.add(&total, &normed)?;
    }
    if let Some(c) = cls_terms {
        let normed = tape.mul_scalar(&c, w.w_cls / n as f64)?;
        total = tape.add(&total, &normed)?;
    }
    if let Some(b) = bce_terms {
        let normed = tape.mul_scalar(&b, w.w_bce / n as f64)?;
        total = tape.add(&total, &normed)?;
    }
    Ok(total)
}

// ---- cross-path consistency -----------------------------------------------

/// Per-ground-truth consistency terms between two paths, one scalar
/// per cross-matched instance: λ_h·MSE on human boxes, λ_o·(MSE on
/// object boxes + JSD on category distributions), λ_act·MSE on action
/// probabilities.
pub fn pair_consistency_terms(
    tape: &mut Tape,
    pairs: &[(usize, usize, usize)],
    preds_a: &PredictionSet,
    preds_b: &PredictionSet,
    w: &LossWeights,
) -> Result<Vec<(usize, Tensor)>> {
    let mut terms = Vec::with_capacity(pairs.len());
    for &(n, ia, ib) in pairs {
        let bh_a = tape.row(preds_a.b_h(), ia)?;
        let bh_b = tape.row(preds_b.b_h(), ib)?;
        let h_term = mse(tape, &bh_a, &bh_b)?;
        let h_w = tape.mul_scalar(&h_term, w.lambda_h)?;

        let bo_a = tape.row(preds_a.b_o(), ia)?;
        let bo_b = tape.row(preds_b.b_o(), ib)?;
        let o_mse = mse(tape, &bo_a, &bo_b)?;

        let logits_a = tape.row(preds_a.obj_logits(), ia)?;
        let logits_b = tape.row(preds_b.obj_logits(), ib)?;
        let p_a = tape.softmax(&logits_a, 0)?;
        let p_b = tape.softmax(&logits_b, 0)?;
        let o_jsd = jsd(tape, &p_a, &p_b)?;
        let o_sum = tape.add(&o_mse, &o_jsd)?;
        let o_w = tape.mul_scalar(&o_sum, w.lambda_o)?;

        let act_a = tape.row(preds_a.act_logits(), ia)?;
        let act_b = tape.row(preds_b.act_logits(), ib)?;
        let s_a = tape.sigmoid(&act_a)?;
        let s_b = tape.sigmoid(&act_b)?;
        let a_term = mse(tape, &s_a, &s_b)?;
        let a_w = tape.mul_scalar(&a_term, w.lambda_act)?;

        let ho = tape.add(&h_w, &o_w)?;
        let term = tape.add(&ho, &a_w)?;
        terms.push((n, term));
    }
    Ok(terms)
}

/// Mean of per-instance consistency terms for one path pair; an empty
/// set yields zero and a flag.
pub fn pair_consistency_loss(
    tape: &mut Tape,
    terms: &[(usize, Tensor)],
) -> Result<(Tensor, bool)> {
    if terms.is_empty() {
        return Ok((Tensor::scalar(0.0), true));
    }
    let mut acc = terms[0].1.clone();
    for (_, t) in &terms[1..] {
        acc = tape.add(&acc, t)?;
    }
    let mean = tape.mul_scalar(&acc, 1.0 / terms.len() as f64)?;
    Ok((mean, false))
}

/// Aggregate consistency over all path pairs for one scene:
/// (1 / (S · N_gt)) Σ_n Σ_pairs L^n, with S the pair count. Returns the
/// scalar and a flag set when no term contributed.
pub fn cpc_loss(
    tape: &mut Tape,
    per_pair_terms: &[Vec<(usize, Tensor)>],
    n_gt: usize,
) -> Result<(Tensor, bool)> {
    let s = per_pair_terms.len();
    if s == 0 || n_gt == 0 {
        return Ok((Tensor::scalar(0.0), true));
    }
    let mut acc: Option<Tensor> = None;
    let mut any = false;
    for n in 0..n_gt {
        for pair in per_pair_terms {
            for (gt, term) in pair {
                if *gt == n {
                    any = true;
                    acc = Some(match acc.take() {
                        Some(prev) => tape.add(&prev, term)?,
                        None => term.clone(),
                    });
                }
            }
        }
    }
    match acc {
        Some(sum) => {
            let scaled = tape.mul_scalar(&sum, 1.0 / (s * n_gt) as f64)?;
            Ok((scaled, !any))
        }
        None => Ok((Tensor::scalar(0.0), true)),
    }
}

/// Ramp-up weight w(t) = w_max · exp(−5·(1 − min(t, T)/T)²); monotone
/// non-decreasing, w(0) = w_max·e⁻⁵ and w(t ≥ T) = w_max.
pub fn rampup(step: u64, ramp_steps: u64, w_max: f64) -> Result<f64> {
    if ramp_steps == 0 {
        return Err(TensorError::Domain {
            op: "rampup",
            detail: "ramp_steps must be positive".into(),
        });
    }
    let t = step.min(ramp_steps) as f64 / ramp_steps as f64;
    Ok(w_max * (-5.0 * (1.0 - t) * (1.0 - t)).exp())
}

/// Final objective: Σ_k L_sup^k + w(t)·L_cpc, built on the tape.
pub fn total_loss(
    tape: &mut Tape,
    sup_losses: &[Tensor],
    cpc: &Tensor,
    rampup_weight: f64,
) -> Result<Tensor> {
    let mut acc = Tensor::scalar(0.0);
    for sup in sup_losses {
        acc = tape.add(&acc, sup)?;
    }
    let weighted = tape.mul_scalar(cpc, rampup_weight)?;
    tape.add(&acc, &weighted)
}

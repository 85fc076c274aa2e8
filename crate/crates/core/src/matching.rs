//! Bipartite matching between predictions and ground truth, and cross
//! matching of queries across decoding paths.
//!
//! Each path is matched to the same ground-truth list independently; a
//! pair of queries from two paths correspond when they were assigned
//! the same ground-truth index. Matching consumes plain values — no
//! gradients flow through the assignment.

use crate::data::{Box2, GtTriplet};
use crate::losses::{bce_probs, giou_value, l1_value};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MatchError {
    #[error("cost matrix needs at least as many queries as ground truths ({queries} < {gts})")]
    Capacity { queries: usize, gts: usize },
    #[error("cost matrix contains a non-finite entry at query {query}, gt {gt}")]
    NonFinite { query: usize, gt: usize },
}

/// Matching-cost weights, DETR convention plus an action term.
#[derive(Debug, Clone, Copy)]
pub struct MatchWeights {
    pub w_cls: f64,
    pub w_box: f64,
    pub w_giou: f64,
    pub w_act: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            w_cls: 1.0,
            w_box: 5.0,
            w_giou: 2.0,
            w_act: 1.0,
        }
    }
}

/// Queries × ground-truths cost matrix; requires N ≥ M.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    n_queries: usize,
    n_gts: usize,
    costs: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n_queries: usize, n_gts: usize, costs: Vec<f64>) -> Result<Self, MatchError> {
        if n_gts > n_queries {
            return Err(MatchError::Capacity {
                queries: n_queries,
                gts: n_gts,
            });
        }
        assert_eq!(costs.len(), n_queries * n_gts);
        for q in 0..n_queries {
            for g in 0..n_gts {
                if !costs[q * n_gts + g].is_finite() {
                    return Err(MatchError::NonFinite { query: q, gt: g });
                }
            }
        }
        Ok(Self {
            n_queries,
            n_gts,
            costs,
        })
    }

    pub fn n_queries(&self) -> usize {
        self.n_queries
    }

    pub fn n_gts(&self) -> usize {
        self.n_gts
    }

    pub fn at(&self, query: usize, gt: usize) -> f64 {
        self.costs[query * self.n_gts + gt]
    }
}

/// Plain prediction values for one query, used by matching and eval.
#[derive(Debug, Clone)]
pub struct QueryValues {
    pub b_h: Box2,
    pub b_o: Box2,
    /// Softmax probabilities over object categories plus the final
    /// no-object slot.
    pub obj_probs: Vec<f64>,
    /// Per-action sigmoid probabilities.
    pub act_probs: Vec<f64>,
}

/// Result of matching one path against the ground truth.
///
/// `sigma` maps query → ground-truth index (None for background
/// queries); `sigma_inv` maps ground-truth index → query and is total
/// and injective.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub sigma: Vec<Option<usize>>,
    pub sigma_inv: Vec<usize>,
}

impl Assignment {
    /// Sum of matrix entries along this assignment, accumulated in
    /// ground-truth index order.
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.sigma_inv
            .iter()
            .enumerate()
            .map(|(gt, &q)| cost.at(q, gt))
            .sum()
    }

    /// Query indices left unmatched (background / no-object).
    pub fn background_queries(&self) -> Vec<usize> {
        self.sigma
            .iter()
            .enumerate()
            .filter_map(|(q, m)| m.is_none().then_some(q))
            .collect()
    }
}

/// Composite matching cost between one query's outputs and one GT
/// triplet.
pub fn pair_cost(pred: &QueryValues, gt: &GtTriplet, w: &MatchWeights) -> f64 {
    let p_cat = pred.obj_probs[gt.object_category];
    let l1 = l1_value(&pred.b_h, &gt.human_box) + l1_value(&pred.b_o, &gt.object_box);
    let giou_term = (1.0 - giou_value(&pred.b_h, &gt.human_box))
        + (1.0 - giou_value(&pred.b_o, &gt.object_box));
    let act_targets: Vec<f64> = gt.actions.iter().map(|&a| a as f64).collect();
    let act = bce_probs(&pred.act_probs, &act_targets);
    w.w_cls * (1.0 - p_cat) + w.w_box * l1 + w.w_giou * giou_term + w.w_act * act
}

/// Cost matrix over all (query, gt) pairs.
pub fn build_cost_matrix(
    preds: &[QueryValues],
    gts: &[GtTriplet],
    weights: &MatchWeights,
) -> Result<CostMatrix, MatchError> {
    if gts.len() > preds.len() {
        return Err(MatchError::Capacity {
            queries: preds.len(),
            gts: gts.len(),
        });
    }
    let mut costs = Vec::with_capacity(preds.len() * gts.len());
    for pred in preds {
        for gt in gts {
            costs.push(pair_cost(pred, gt, weights));
        }
    }
    CostMatrix::new(preds.len(), gts.len(), costs)
}

/// Tolerance for recognizing equal-cost assignments during the
/// lexicographic tie-break; covers float summation-order drift, far
/// below any genuine cost difference.
const TIE_EPS: f64 = 1e-9;

/// Minimum assignment cost over injective maps GT → query, by the
/// shortest-augmenting-path Hungarian method with potentials.
/// Rows are ground truths (M), columns queries (N ≥ M).
fn hungarian_min_cost(cost: &CostMatrix, banned_query: &[bool], skip_gts: usize) -> f64 {
    let m = cost.n_gts - skip_gts;
    let n = cost.n_queries;
    if m == 0 {
        return 0.0;
    }
    // Potentials u (rows, 1-based), v (columns, 1-based); way[j] is the
    // previous column on the augmenting path; p[j] is the row matched
    // to column j. Index 0 is the virtual start column.
    let mut u = vec![0.0; m + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=m {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] || banned_query[j - 1] {
                    continue;
                }
                let cur = cost.at(j - 1, skip_gts + i0 - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else if minv[j].is_finite() {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 1..=n {
        if p[j] != 0 {
            total += cost.at(j - 1, skip_gts + p[j] - 1);
        }
    }
    total
}

/// Minimum-cost assignment of every ground truth to a distinct query.
///
/// Among cost-minimal assignments the returned one has the
/// lexicographically smallest `sigma_inv` vector: the optimum is found
/// first, then each ground truth in index order is pinned to the
/// lowest query index that still completes to the optimal total.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    let m = cost.n_gts;
    let n = cost.n_queries;
    let optimal = hungarian_min_cost(cost, &vec![false; n], 0);

    let mut banned = vec![false; n];
    let mut sigma_inv = Vec::with_capacity(m);
    let mut prefix_cost = 0.0;
    for gt in 0..m {
        let remaining_budget = optimal - prefix_cost;
        let mut chosen = None;
        for q in 0..n {
            if banned[q] {
                continue;
            }
            let mut banned_try = banned.clone();
            banned_try[q] = true;
            let completion = hungarian_min_cost(cost, &banned_try, gt + 1);
            if cost.at(q, gt) + completion <= remaining_budget + TIE_EPS {
                chosen = Some(q);
                break;
            }
        }
        let q = chosen.expect("optimal completion must exist");
        banned[q] = true;
        prefix_cost += cost.at(q, gt);
        sigma_inv.push(q);
    }

    let mut sigma = vec![None; n];
    for (gt, &q) in sigma_inv.iter().enumerate() {
        debug_assert!(sigma[q].is_none(), "query assigned twice");
        sigma[q] = Some(gt);
    }
    Assignment { sigma, sigma_inv }
}

/// Match one path's predictions against the ground truth. Queries not
/// in the assignment are background: no-object category and zero
/// actions.
pub fn match_path(
    preds: &[QueryValues],
    gts: &[GtTriplet],
    weights: &MatchWeights,
) -> Result<Assignment, MatchError> {
    if gts.is_empty() {
        return Ok(Assignment {
            sigma: vec![None; preds.len()],
            sigma_inv: vec![],
        });
    }
    let cost = build_cost_matrix(preds, gts, weights)?;
    Ok(hungarian(&cost))
}

/// Cross-match two paths through shared ground-truth indices: emits
/// `(n, i_k, i_k')` for every GT index n matched in both assignments.
/// Ground truths missing from either side are excluded.
pub fn cross_match(a: &Assignment, b: &Assignment) -> Vec<(usize, usize, usize)> {
    let m = a.sigma_inv.len().min(b.sigma_inv.len());
    (0..m)
        .map(|n| (n, a.sigma_inv[n], b.sigma_inv[n]))
        .collect()
}

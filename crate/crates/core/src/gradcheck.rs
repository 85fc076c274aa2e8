//! Central finite-difference checks for every differentiable operation.
//!
//! The numeric side only ever calls the forward pass, so it stays an
//! independent oracle for the analytic gradients produced by
//! [`crate::tape::Tape::backward`]. Used by the test suites and by the
//! `gradcheck` CLI command.

use crate::rng::SplitMix64;
use crate::tape::Tape;
use crate::tensor::{Result, Tensor, TensorError};

pub const STEP: f64 = 1e-5;

/// Worst relative error observed for one operation.
#[derive(Debug, Clone)]
pub struct OpReport {
    pub op: String,
    pub max_rel_err: f64,
    pub cases: usize,
}

/// Relative error convention: |a - n| / max(|a|, |n|, 1e-2).
///
/// The floor turns the check into an absolute tolerance of 1e-6 for
/// near-zero gradients, where central differences are dominated by
/// round-off noise (≈ |f|·1e-15 / 2h) rather than by the gradient.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

/// Checks `f` by comparing the analytic gradient of its scalar output
/// with central differences over every input entry.
///
/// `f` receives the tape plus the tracked inputs and must return a
/// scalar. Returns the maximum relative error over all entries.
pub fn check_fn(
    inputs: &[Tensor],
    f: &dyn Fn(&mut Tape, &[Tensor]) -> Result<Tensor>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let tracked: Vec<Tensor> = inputs.iter().map(|t| tape.leaf(t)).collect();
    let out = f(&mut tape, &tracked)?;
    let grads = tape.backward(&out)?;

    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let node = tracked[i].node().expect("leaf is tracked");
        let analytic = grads.get(node).cloned().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for e in 0..input.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut shifted: Vec<Tensor> = inputs.to_vec();
                let mut data = shifted[i].data().to_vec();
                data[e] += delta;
                shifted[i] = Tensor::new(input.shape().to_vec(), data)?;
                let mut t2 = Tape::new();
                let tr: Vec<Tensor> = shifted.iter().map(|t| t2.leaf(t)).collect();
                f(&mut t2, &tr)?.to_scalar()
            };
            let plus = eval(STEP)?;
            let minus = eval(-STEP)?;
            let numeric = (plus - minus) / (2.0 * STEP);
            worst = worst.max(rel_err(analytic.data()[e], numeric));
        }
    }
    Ok(worst)
}

fn random_tensor(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.next_range(lo, hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("random tensor")
}

/// Random tensor whose entries stay at least `margin` away from the
/// entries of `other`; keeps kinked ops (max2/min2/abs/relu) away from
/// their non-differentiable points.
fn random_tensor_away_from(
    rng: &mut SplitMix64,
    shape: &[usize],
    other: &Tensor,
    margin: f64,
) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|i| {
            let anchor = other.data()[i % other.len()];
            loop {
                let v = rng.next_range(-2.0, 2.0);
                if (v - anchor).abs() > margin {
                    return v;
                }
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("random tensor")
}

fn small_shape(rng: &mut SplitMix64) -> Vec<usize> {
    match rng.next_below(3) {
        0 => vec![rng.next_below(5) + 1],
        1 => vec![rng.next_below(3) + 1, rng.next_below(4) + 1],
        _ => vec![rng.next_below(2) + 1, rng.next_below(3) + 1, rng.next_below(3) + 1],
    }
}

/// Finite-difference suite over all ops, `cases` random instances each.
pub fn run_op_suite(seed: u64, cases: usize) -> Result<Vec<OpReport>> {
    let mut rng = SplitMix64::new(seed);
    let mut reports = Vec::new();

    let mut check_op = |name: &str,
                        rng: &mut SplitMix64,
                        gen: &mut dyn FnMut(&mut SplitMix64) -> Vec<Tensor>,
                        f: &dyn Fn(&mut Tape, &[Tensor]) -> Result<Tensor>|
     -> Result<()> {
        let mut worst: f64 = 0.0;
        for _ in 0..cases {
            let inputs = gen(rng);
            worst = worst.max(check_fn(&inputs, f)?);
        }
        reports.push(OpReport {
            op: name.to_string(),
            max_rel_err: worst,
            cases,
        });
        Ok(())
    };

    // Binary elementwise with occasional broadcasting.
    let mut gen_pair = |rng: &mut SplitMix64| -> Vec<Tensor> {
        let shape = small_shape(rng);
        let a = random_tensor(rng, &shape, -2.0, 2.0);
        let b = if shape.len() > 1 && rng.next_below(2) == 0 {
            random_tensor(rng, &shape[shape.len() - 1..], -2.0, 2.0)
        } else {
            random_tensor(rng, &shape, -2.0, 2.0)
        };
        vec![a, b]
    };
    check_op("add", &mut rng, &mut gen_pair, &|t, x| {
        let y = t.add(&x[0], &x[1])?;
        t.sum(&y, None)
    })?;
    check_op("sub", &mut rng, &mut gen_pair, &|t, x| {
        let y = t.sub(&x[0], &x[1])?;
        t.sum(&y, None)
    })?;
    check_op("mul", &mut rng, &mut gen_pair, &|t, x| {
        let y = t.mul(&x[0], &x[1])?;
        t.sum(&y, None)
    })?;

    let mut gen_div = |rng: &mut SplitMix64| -> Vec<Tensor> {
        let shape = small_shape(rng);
        let a = random_tensor(rng, &shape, -2.0, 2.0);
        // Denominator bounded away from zero.
        let n: usize = shape.iter().product();
        let b = Tensor::new(
            shape.clone(),
            (0..n)
                .map(|_| {
                    let sign = if rng.next_below(2) == 0 { 1.0 } else { -1.0 };
                    sign * rng.next_range(0.5, 2.0)
                })
                .collect(),
        )
        .unwrap();
        vec![a, b]
    };
    check_op("div", &mut rng, &mut gen_div, &|t, x| {
        let y = t.div(&x[0], &x[1])?;
        t.sum(&y, None)
    })?;

    let mut gen_kinked_pair = |rng: &mut SplitMix64| -> Vec<Tensor> {
        let shape = small_shape(rng);
        let a = random_tensor(rng, &shape, -2.0, 2.0);
        let b = random_tensor_away_from(rng, &shape, &a, 1e-2);
        vec![a, b]
    };
    check_op("max2", &mut rng, &mut gen_kinked_pair, &|t, x| {
        let y = t.max2(&x[0], &x[1])?;
        t.sum(&y, None)
    })?;
    check_op("min2", &mut rng, &mut gen_kinked_pair, &|t, x| {
        let y = t.min2(&x[0], &x[1])?;
        t.sum(&y, None)
    })?;

    let mut gen_one = |rng: &mut SplitMix64| -> Vec<Tensor> {
        let shape = small_shape(rng);
        vec![random_tensor(rng, &shape, -2.0, 2.0)]
    };
    let mut gen_away_zero = |rng: &mut SplitMix64| -> Vec<Tensor> {
        let shape = small_shape(rng);
        let zero = Tensor::zeros(&shape);
        vec![random_tensor_away_from(rng, &shape, &zero, 1e-2)]
    };
    let mut gen_positive = |rng: &mut SplitMix64| -> Vec<Tensor> {
        let shape = small_shape(rng);
        vec![random_tensor(rng, &shape, 0.1, 3.0)]
    };

    check_op("neg", &mut rng, &mut gen_one, &|t, x| {
        let y = t.neg(&x[0])?;
        t.sum(&y, None)
    })?;
    check_op("exp", &mut rng, &mut gen_one, &|t, x| {
        let y = t.exp(&x[0])?;
        t.sum(&y, None)
    })?;
    check_op("log", &mut rng, &mut gen_positive, &|t, x| {
        let y = t.log(&x[0])?;
        t.sum(&y, None)
    })?;
    check_op("relu", &mut rng, &mut gen_away_zero, &|t, x| {
        let y = t.relu(&x[0])?;
        t.sum(&y, None)
    })?;
    check_op("sigmoid", &mut rng, &mut gen_one, &|t, x| {
        let y = t.sigmoid(&x[0])?;
        t.sum(&y, None)
    })?;
    check_op("abs", &mut rng, &mut gen_away_zero, &|t, x| {
        let y = t.abs(&x[0])?;
        t.sum(&y, None)
    })?;

    let mut gen_mm = |rng: &mut SplitMix64| -> Vec<Tensor> {
        let m = rng.next_below(3) + 1;
        let k = rng.next_below(3) + 1;
        let n = rng.next_below(3) + 1;
        vec![
            random_tensor(rng, &[m, k], -1.5, 1.5),
            random_tensor(rng, &[k, n], -1.5, 1.5),
        ]
    };
    check_op("matmul", &mut rng, &mut gen_mm, &|t, x| {
        let y = t.matmul(&x[0], &x[1])?;
        // Weighted sum keeps the output gradient non-uniform.
        let sq = t.mul(&y, &y)?;
        t.sum(&sq, None)
    })?;

    let mut gen_mat = |rng: &mut SplitMix64| -> Vec<Tensor> {
        let r = rng.next_below(3) + 1;
        let c = rng.next_below(4) + 1;
        vec![random_tensor(rng, &[r, c], -2.0, 2.0)]
    };
    check_op("transpose", &mut rng, &mut gen_mat, &|t, x| {
        let y = t.transpose(&x[0])?;
        let sq = t.mul(&y, &y)?;
        t.sum(&sq, None)
    })?;

    let mut gen_softmax = |rng: &mut SplitMix64| -> Vec<Tensor> {
        let r = rng.next_below(3) + 1;
        let c = rng.next_below(4) + 2;
        vec![random_tensor(rng, &[r, c], -3.0, 3.0)]
    };
    check_op("softmax", &mut rng, &mut gen_softmax, &|t, x| {
        let y = t.softmax(&x[0], 1)?;
        let sq = t.mul(&y, &y)?;
        t.sum(&sq, None)
    })?;

    let mut gen_ln = |rng: &mut SplitMix64| -> Vec<Tensor> {
        let r = rng.next_below(3) + 1;
        let d = rng.next_below(4) + 2;
        vec![
            random_tensor(rng, &[r, d], -2.0, 2.0),
            random_tensor(rng, &[d], 0.5, 1.5),
            random_tensor(rng, &[d], -0.5, 0.5),
        ]
    };
    check_op("layernorm", &mut rng, &mut gen_ln, &|t, x| {
        let y = t.layernorm(&x[0], &x[1], &x[2], 1e-5)?;
        let sq = t.mul(&y, &y)?;
        t.sum(&sq, None)
    })?;

    let mut gen_mat2 = |rng: &mut SplitMix64| -> Vec<Tensor> {
        let r = rng.next_below(3) + 1;
        let c = rng.next_below(3) + 2;
        vec![random_tensor(rng, &[r, c], -2.0, 2.0)]
    };
    check_op("sum", &mut rng, &mut gen_mat2, &|t, x| {
        let y = t.sum(&x[0], Some(1))?;
        let sq = t.mul(&y, &y)?;
        t.sum(&sq, None)
    })?;
    check_op("mean", &mut rng, &mut gen_mat2, &|t, x| {
        let y = t.mean(&x[0], Some(0))?;
        let sq = t.mul(&y, &y)?;
        t.sum(&sq, None)
    })?;

    // Max reduction needs a clear per-lane winner for a stable derivative.
    let mut gen_max = |rng: &mut SplitMix64| -> Vec<Tensor> {
        let r = rng.next_below(3) + 1;
        let c = rng.next_below(3) + 2;
        loop {
            let t = random_tensor(rng, &[r, c], -2.0, 2.0);
            let mut ok = true;
            for i in 0..r {
                let mut row: Vec<f64> = t.row_slice(i).to_vec();
                row.sort_by(|a, b| b.partial_cmp(a).unwrap());
                if row.len() > 1 && (row[0] - row[1]).abs() < 1e-2 {
                    ok = false;
                }
            }
            if ok {
                return vec![t];
            }
        }
    };
    check_op("max_reduce", &mut rng, &mut gen_max, &|t, x| {
        let y = t.max_reduce(&x[0], Some(1))?;
        let sq = t.mul(&y, &y)?;
        t.sum(&sq, None)
    })?;

    let mut gen_rows = |rng: &mut SplitMix64| -> Vec<Tensor> {
        let r = rng.next_below(3) + 2;
        let c = rng.next_below(3) + 2;
        vec![random_tensor(rng, &[r, c], -2.0, 2.0)]
    };
    check_op("row", &mut rng, &mut gen_rows, &|t, x| {
        let y = t.row(&x[0], 1)?;
        let sq = t.mul(&y, &y)?;
        t.sum(&sq, None)
    })?;
    let mut gen_vec = |rng: &mut SplitMix64| -> Vec<Tensor> {
        let n = rng.next_below(4) + 2;
        vec![random_tensor(rng, &[n], -2.0, 2.0)]
    };
    check_op("index", &mut rng, &mut gen_vec, &|t, x| {
        let y = t.index(&x[0], 1)?;
        t.mul(&y, &y)
    })?;
    check_op("slice_cols", &mut rng, &mut gen_rows, &|t, x| {
        let c = x[0].shape()[1];
        let y = t.slice_cols(&x[0], 0, c - 1)?;
        let sq = t.mul(&y, &y)?;
        t.sum(&sq, None)
    })?;
    check_op("concat_cols", &mut rng, &mut gen_rows, &|t, x| {
        let c = x[0].shape()[1];
        let a = t.slice_cols(&x[0], 0, 1)?;
        let b = t.slice_cols(&x[0], 1, c)?;
        let y = t.concat_cols(&[&b, &a])?;
        let sq = t.mul(&y, &y)?;
        t.sum(&sq, None)
    })?;

    Ok(reports)
}

/// End-to-end check: the total training objective (all four paths,
/// supervision + consistency) against central differences over sampled
/// parameter entries. Matching is computed once at the center point and
/// held fixed, so the comparison stays on the smooth branch of the
/// piecewise-smooth objective.
pub fn end_to_end_check(seed: u64, entries_per_tensor: usize) -> Result<f64> {
    use crate::data::{generate_dataset, render_features};
    use crate::losses::{
        cpc_loss, pair_consistency_terms, supervision_loss, total_loss, LossWeights,
    };
    use crate::matching::{cross_match, match_path, Assignment, MatchWeights};
    use crate::model::{Binding, Model, ModelConfig, ParamStore};
    use std::collections::BTreeMap;

    let cfg = ModelConfig::tiny();
    let opaque = |op: &'static str| move |_e: crate::model::ModelError| TensorError::Domain {
        op,
        detail: "model error during gradient check".into(),
    };
    let model = Model::new(cfg, &[1, 2, 3, 4], true, seed).map_err(opaque("model"))?;
    let scene = generate_dataset(1, seed ^ 0xA5A5)
        .map_err(|e| TensorError::Domain {
            op: "data",
            detail: e.to_string(),
        })?
        .remove(0);
    let grid = render_features(&scene, cfg.grid);
    let weights = LossWeights::default();
    let match_weights = MatchWeights::default();
    let ramp_weight = 0.5;

    // Forward pass over an arbitrary parameter store; the model only
    // contributes its architecture.
    let forward = |store: &ParamStore,
                   tape: &mut Tape,
                   bind: &mut Binding|
     -> Result<BTreeMap<u8, crate::model::PredictionSet>> {
        let _ = store;
        let f = model.embed_features(tape, bind, &grid).map_err(opaque("embed"))?;
        let x = model.encode(tape, bind, &f).map_err(opaque("encode"))?;
        model.run_all_paths(tape, bind, &x).map_err(opaque("paths"))
    };

    // Fixed assignments from the unperturbed forward pass.
    let assignments: BTreeMap<u8, Assignment> = {
        let mut tape = Tape::new();
        let mut bind = Binding::new(&model.store);
        let preds = forward(&model.store, &mut tape, &mut bind)?;
        preds
            .iter()
            .map(|(&k, p)| {
                let a = match_path(&p.values(), &scene.triplets, &match_weights)
                    .expect("enough queries");
                (k, a)
            })
            .collect()
    };
    let path_ids: Vec<u8> = assignments.keys().copied().collect();
    let pairs: Vec<(u8, u8)> = path_ids
        .iter()
        .enumerate()
        .flat_map(|(i, &a)| path_ids[i + 1..].iter().map(move |&b| (a, b)))
        .collect();

    // Loss (and optionally analytic gradients) under the fixed matching.
    let run = |store: &ParamStore, want_grads: bool| -> Result<(f64, BTreeMap<String, Tensor>)> {
        let mut tape = Tape::new();
        let mut bind = Binding::new(store);
        let preds = forward(store, &mut tape, &mut bind)?;
        let mut sups = Vec::new();
        for &k in &path_ids {
            sups.push(supervision_loss(
                &mut tape,
                &preds[&k],
                &assignments[&k],
                &scene.triplets,
                &weights,
            )?);
        }
        let mut per_pair = Vec::new();
        for &(a, b) in &pairs {
            let matched = cross_match(&assignments[&a], &assignments[&b]);
            per_pair.push(pair_consistency_terms(
                &mut tape,
                &matched,
                &preds[&a],
                &preds[&b],
                &weights,
            )?);
        }
        let (cpc, _) = cpc_loss(&mut tape, &per_pair, scene.triplets.len())?;
        let total = total_loss(&mut tape, &sups, &cpc, ramp_weight)?;
        let value = total.to_scalar()?;
        let mut by_name = BTreeMap::new();
        if want_grads {
            let grads = tape.backward(&total)?;
            for name in store.names() {
                if let Some(g) = bind.node_of(name).and_then(|n| grads.get(n)) {
                    by_name.insert(name.to_string(), g.detached());
                }
            }
        }
        Ok((value, by_name))
    };

    let (_, analytic) = run(&model.store, true)?;

    let mut rng = SplitMix64::new(seed ^ 0x5EED);
    let mut worst: f64 = 0.0;
    let names: Vec<String> = model.store.names().map(str::to_string).collect();
    for name in &names {
        let param = model.store.get(name).expect("named param").clone();
        let zero = Tensor::zeros(param.shape());
        let grad = analytic.get(name).unwrap_or(&zero);
        for _ in 0..entries_per_tensor.min(param.len()) {
            let e = rng.next_below(param.len());
            let eval_at = |delta: f64| -> Result<f64> {
                let mut store = model.store.clone();
                let mut data = param.data().to_vec();
                data[e] += delta;
                store
                    .set(name, Tensor::new(param.shape().to_vec(), data)?)
                    .map_err(opaque("set"))?;
                Ok(run(&store, false)?.0)
            };
            let numeric = (eval_at(STEP)? - eval_at(-STEP)?) / (2.0 * STEP);
            worst = worst.max(rel_err(grad.data()[e], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn op_suite_passes_tolerance() {
        let reports = run_op_suite(2024, 100).unwrap();
        for r in &reports {
            assert!(
                r.max_rel_err < 1e-4,
                "op {} rel err {} exceeds 1e-4",
                r.op,
                r.max_rel_err
            );
        }
        // every op family covered
        assert!(reports.len() >= 20);
    }

    #[test]
    fn layernorm_gradient_matches_finite_differences() {
        let mut rng = SplitMix64::new(9);
        let x = Tensor::new(vec![2, 4], (0..8).map(|_| rng.next_range(-1.0, 1.0)).collect()).unwrap();
        let gamma = Tensor::new(vec![4], (0..4).map(|_| rng.next_range(0.5, 1.5)).collect()).unwrap();
        let beta = Tensor::zeros(&[4]);
        let err = check_fn(&[x, gamma, beta], &|t, v| {
            let y = t.layernorm(&v[0], &v[1], &v[2], 1e-5)?;
            let sq = t.mul(&y, &y)?;
            t.sum(&sq, None)
        })
        .unwrap();
        assert!(err < 1e-4, "layernorm fd err {err}");
    }

    #[test]
    fn composite_sigmoid_matmul_gradient() {
        // d(sum(sigmoid(W x))) / dW against central differences.
        let mut rng = SplitMix64::new(31);
        let w = Tensor::new(vec![3, 4], (0..12).map(|_| rng.next_range(-1.0, 1.0)).collect()).unwrap();
        let x = Tensor::new(vec![4, 2], (0..8).map(|_| rng.next_range(-1.0, 1.0)).collect()).unwrap();
        let err = check_fn(&[w, x], &|t, v| {
            let y = t.matmul(&v[0], &v[1])?;
            let s = t.sigmoid(&y)?;
            t.sum(&s, None)
        })
        .unwrap();
        assert!(err < 1e-4, "composite fd err {err}");
    }
}

//! Triplet mAP evaluation over path-1 inference.
//!
//! A detection is a true positive for an action class when its human
//! and object boxes both reach IoU ≥ 0.5 against an unconsumed ground
//! truth that carries the action and the predicted object category.
//! Detections rank by action probability × object-category probability;
//! per-action AP integrates the precision envelope over recall, and
//! mAP averages the actions present in the ground truth.

use crate::data::{Box2, Scene};
use crate::model::{Model, ModelError};
use serde::Serialize;

pub const IOU_THRESHOLD: f64 = 0.5;

/// One per-query detection extracted from path-1 inference.
#[derive(Debug, Clone)]
pub struct Detection {
    pub scene_idx: usize,
    pub query_idx: usize,
    pub b_h: Box2,
    pub b_o: Box2,
    /// Argmax over foreground categories.
    pub category: usize,
    /// Probability of that category (softmax including no-object).
    pub cat_prob: f64,
    /// Per-action sigmoid probabilities.
    pub act_probs: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub map: f64,
    /// AP per action slot; NaN-free — actions absent from the ground
    /// truth carry 0 and are excluded from the mean.
    pub per_action_ap: Vec<f64>,
    /// Which actions had at least one ground-truth instance.
    pub action_present: Vec<bool>,
}

/// Interpolated average precision from a ranked hit list: integrate
/// the precision envelope (running max from the right) over recall.
pub fn average_precision(ranked_hits: &[bool], n_positives: usize) -> f64 {
    if n_positives == 0 {
        return 0.0;
    }
    let mut precisions = Vec::with_capacity(ranked_hits.len());
    let mut recalls = Vec::with_capacity(ranked_hits.len());
    let mut tp = 0usize;
    for (rank, &hit) in ranked_hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        precisions.push(tp as f64 / (rank + 1) as f64);
        recalls.push(tp as f64 / n_positives as f64);
    }
    // Precision envelope.
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precisions.iter().zip(&recalls) {
        ap += (r - prev_recall) * p;
        prev_recall = *r;
    }
    ap
}

/// Run path-1 inference over every scene and flatten per-query
/// detections.
pub fn collect_detections(model: &Model, scenes: &[Scene]) -> Result<Vec<Detection>, ModelError> {
    let grid_size = model.cfg().grid;
    let n_categories = model.cfg().n_obj_categories;
    let mut out = Vec::new();
    for (scene_idx, scene) in scenes.iter().enumerate() {
        let grid = crate::data::render_features(scene, grid_size);
        let (preds, _tape) = model.infer_p1(&grid)?;
        for (query_idx, q) in preds.values().into_iter().enumerate() {
            let (category, cat_prob) = q.obj_probs[..n_categories]
                .iter()
                .enumerate()
                .fold((0usize, f64::NEG_INFINITY), |best, (c, &p)| {
                    if p > best.1 {
                        (c, p)
                    } else {
                        best
                    }
                });
            out.push(Detection {
                scene_idx,
                query_idx,
                b_h: q.b_h,
                b_o: q.b_o,
                category,
                cat_prob,
                act_probs: q.act_probs,
            });
        }
    }
    Ok(out)
}

/// Score detections against ground truth for every action class.
pub fn metrics_from_detections(
    detections: &[Detection],
    scenes: &[Scene],
    n_actions: usize,
) -> Metrics {
    let mut per_action_ap = vec![0.0; n_actions];
    let mut action_present = vec![false; n_actions];

    for action in 0..n_actions {
        let n_positives: usize = scenes
            .iter()
            .flat_map(|s| &s.triplets)
            .filter(|t| t.actions[action] == 1)
            .count();
        if n_positives == 0 {
            continue;
        }
        action_present[action] = true;

        // Rank by score, ties broken by (scene, query) for determinism.
        let mut ranked: Vec<(f64, usize)> = detections
            .iter()
            .enumerate()
            .map(|(i, d)| (d.act_probs[action] * d.cat_prob, i))
            .collect();
        ranked.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then_with(|| {
                    let (da, db) = (&detections[a.1], &detections[b.1]);
                    (da.scene_idx, da.query_idx).cmp(&(db.scene_idx, db.query_idx))
                })
        });

        let mut consumed: Vec<Vec<bool>> =
            scenes.iter().map(|s| vec![false; s.triplets.len()]).collect();
        let mut hits = Vec::with_capacity(ranked.len());
        for &(_score, det_idx) in &ranked {
            let d = &detections[det_idx];
            let scene = &scenes[d.scene_idx];
            // Best qualifying unconsumed ground truth by overlap.
            let mut best: Option<(f64, usize)> = None;
            for (gt_idx, gt) in scene.triplets.iter().enumerate() {
                if consumed[d.scene_idx][gt_idx]
                    || gt.actions[action] != 1
                    || gt.object_category != d.category
                {
                    continue;
                }
                let iou_h = d.b_h.iou(&gt.human_box);
                let iou_o = d.b_o.iou(&gt.object_box);
                if iou_h < IOU_THRESHOLD || iou_o < IOU_THRESHOLD {
                    continue;
                }
                let overlap = iou_h.min(iou_o);
                if best.map_or(true, |(b, _)| overlap > b) {
                    best = Some((overlap, gt_idx));
                }
            }
            match best {
                Some((_, gt_idx)) => {
                    consumed[d.scene_idx][gt_idx] = true;
                    hits.push(true);
                }
                None => hits.push(false),
            }
        }
        per_action_ap[action] = average_precision(&hits, n_positives);
    }

    let present: Vec<f64> = per_action_ap
        .iter()
        .zip(&action_present)
        .filter(|(_, &p)| p)
        .map(|(&ap, _)| ap)
        .collect();
    let map = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    Metrics {
        map,
        per_action_ap,
        action_present,
    }
}

/// Path-1 mAP of a model over a dataset.
pub fn evaluate_map(model: &Model, scenes: &[Scene]) -> Result<Metrics, ModelError> {
    let detections = collect_detections(model, scenes)?;
    Ok(metrics_from_detections(
        &detections,
        scenes,
        model.cfg().n_actions,
    ))
}

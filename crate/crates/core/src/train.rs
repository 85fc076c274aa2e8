//! Training loop: joint multi-path supervision plus ramp-up-weighted
//! cross-path consistency, optimized with AdamW.
//!
//! Per step: sample a batch, encode each scene once, run every active
//! path over the shared features, Hungarian-match each path to the
//! ground truth, sum per-path supervision losses, cross-match all path
//! pairs and add the consistency term, then backpropagate through one
//! tape and update.

use crate::data::{render_features, FeatureGrid, Scene};
use crate::eval::{evaluate_map, Metrics};
use crate::losses::{
    cpc_loss, pair_consistency_loss, pair_consistency_terms, rampup, supervision_loss, total_loss,
    LossReport, LossWeights,
};
use crate::matching::{cross_match, match_path, Assignment, MatchError, MatchWeights};
use crate::model::{Binding, Model, ModelConfig, ModelError, PredictionSet};
use crate::optim::{AdamW, OptimError};
use crate::rng::SplitMix64;
use crate::tape::Tape;
use crate::tensor::{Tensor, TensorError};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Match(#[from] MatchError),
    #[error("config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}: {source}; last report: {last:?}")]
    NonFiniteLoss {
        step: u64,
        source: TensorError,
        last: Option<Box<LossReport>>,
    },
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch_size: usize,
    pub lr_model: f64,
    pub lr_embed: f64,
    pub weight_decay: f64,
    pub active_paths: Vec<u8>,
    pub share_decoder: bool,
    pub cpc_enabled: bool,
    pub freeze_encoder: bool,
    pub seed: u64,
    /// Evaluate on the held-out set every this many steps; 0 disables
    /// periodic evaluation (a final evaluation still runs).
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            batch_size: 16,
            lr_model: 1e-4,
            lr_embed: 1e-5,
            weight_decay: 1e-4,
            active_paths: vec![1, 2, 3, 4],
            share_decoder: true,
            cpc_enabled: true,
            freeze_encoder: false,
            seed: 0,
            eval_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr_model <= 0.0 || self.lr_embed <= 0.0 {
            return Err(TrainError::Config("learning rates must be positive".into()));
        }
        if self.batch_size == 0 || self.steps == 0 {
            return Err(TrainError::Config("steps and batch_size must be positive".into()));
        }
        if !self.active_paths.contains(&1) {
            return Err(TrainError::Config("active paths must contain path 1".into()));
        }
        Ok(())
    }

    /// Ramp duration: a fixed fraction of the total step budget.
    pub fn ramp_steps(&self, weights: &LossWeights) -> u64 {
        ((self.steps as f64 * weights.ramp_fraction).round() as u64).max(1)
    }
}

/// One evaluation event in the metrics stream.
#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalEvent {
    pub step: u64,
    pub map: f64,
    pub per_action_ap: Vec<f64>,
}

/// Mutable training state; supports checkpoint resume via
/// [`Trainer::from_parts`].
pub struct Trainer {
    pub cfg: TrainConfig,
    pub match_weights: MatchWeights,
    pub loss_weights: LossWeights,
    pub model: Model,
    pub opt: AdamW,
    pub step: u64,
    pub data_rng: SplitMix64,
    /// FNV-style digest of the batch indices drawn so far; equal
    /// digests across runs certify identical data order.
    pub data_order_digest: u64,
}

impl Trainer {
    pub fn new(model_cfg: ModelConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let loss_weights = LossWeights::default();
        loss_weights.validate()?;
        let model = Model::new(model_cfg, &cfg.active_paths, cfg.share_decoder, cfg.seed)?;
        let opt = AdamW::new(cfg.lr_model, cfg.lr_embed, cfg.weight_decay)?;
        let data_rng = SplitMix64::new(cfg.seed.wrapping_add(0x9E3779B97F4A7C15));
        Ok(Self {
            cfg,
            match_weights: MatchWeights::default(),
            loss_weights,
            model,
            opt,
            step: 0,
            data_rng,
            data_order_digest: 0xCBF29CE484222325,
        })
    }

    /// Rebuild a trainer from checkpointed state.
    pub fn from_parts(
        cfg: TrainConfig,
        model: Model,
        opt: AdamW,
        step: u64,
        rng_state: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            match_weights: MatchWeights::default(),
            loss_weights: LossWeights::default(),
            model,
            opt,
            step,
            data_rng: SplitMix64::from_state(rng_state),
            data_order_digest: 0xCBF29CE484222325,
        })
    }

    fn draw_batch(&mut self, n_scenes: usize) -> Vec<usize> {
        let b = self.cfg.batch_size.min(n_scenes.max(1));
        (0..b)
            .map(|_| {
                let idx = self.data_rng.next_below(n_scenes);
                self.data_order_digest ^= idx as u64 + 1;
                self.data_order_digest = self.data_order_digest.wrapping_mul(0x100000001B3);
                idx
            })
            .collect()
    }

    fn frozen(&self, name: &str) -> bool {
        self.cfg.freeze_encoder && (name.starts_with("enc.") || name.starts_with("embed."))
    }

    /// Sorted unordered pairs of active paths.
    fn path_pairs(&self) -> Vec<(u8, u8)> {
        let ids = self.model.path_ids();
        let mut pairs = Vec::new();
        for i in 0..ids.len() {
            for j in i + 1..ids.len() {
                pairs.push((ids[i], ids[j]));
            }
        }
        pairs
    }

    /// One optimization step over a sampled batch. Returns the loss
    /// report; fails with the last report attached when the loss goes
    /// non-finite.
    pub fn train_step(
        &mut self,
        scenes: &[Scene],
        grids: &[FeatureGrid],
        last_report: Option<&LossReport>,
    ) -> Result<LossReport> {
        let batch = self.draw_batch(scenes.len());
        let step = self.step;
        let wrap_nonfinite = |e: TensorError, last: Option<&LossReport>| TrainError::NonFiniteLoss {
            step,
            source: e,
            last: last.map(|r| Box::new(r.clone())),
        };

        let pairs = self.path_pairs();
        let use_cpc = self.cfg.cpc_enabled && !pairs.is_empty();
        let ramp_weight = if self.cfg.cpc_enabled {
            rampup(
                self.step,
                self.cfg.ramp_steps(&self.loss_weights),
                self.loss_weights.w_max,
            )?
        } else {
            0.0
        };

        let mut tape = Tape::new();
        let grads = {
            let mut bind = Binding::new(&self.model.store);

            let path_ids = self.model.path_ids();
            let mut sup_sums: BTreeMap<u8, Tensor> = BTreeMap::new();
            let mut pair_sums: BTreeMap<(u8, u8), f64> = BTreeMap::new();
            let mut cpc_sum: Option<Tensor> = None;
            let mut cpc_empty = false;

            for &scene_idx in &batch {
                let scene = &scenes[scene_idx];
                let grid = &grids[scene_idx];
                let f = self.model.embed_features(&mut tape, &mut bind, grid)?;
                let x = self.model.encode(&mut tape, &mut bind, &f)?;
                let preds: BTreeMap<u8, PredictionSet> =
                    self.model.run_all_paths(&mut tape, &mut bind, &x)?;

                let mut assignments: BTreeMap<u8, Assignment> = BTreeMap::new();
                for (&k, pred) in &preds {
                    let values = pred.values();
                    assignments.insert(k, match_path(&values, &scene.triplets, &self.match_weights)?);
                }

                for &k in &path_ids {
                    let sup = supervision_loss(
                        &mut tape,
                        &preds[&k],
                        &assignments[&k],
                        &scene.triplets,
                        &self.loss_weights,
                    )
                    .map_err(|e| wrap_nonfinite(e, last_report))?;
                    let entry = match sup_sums.remove(&k) {
                        Some(prev) => tape.add(&prev, &sup)?,
                        None => sup,
                    };
                    sup_sums.insert(k, entry);
                }

                if use_cpc {
                    let mut per_pair_terms = Vec::with_capacity(pairs.len());
                    for &(a, b) in &pairs {
                        let matched = cross_match(&assignments[&a], &assignments[&b]);
                        let terms = pair_consistency_terms(
                            &mut tape,
                            &matched,
                            &preds[&a],
                            &preds[&b],
                            &self.loss_weights,
                        )
                        .map_err(|e| wrap_nonfinite(e, last_report))?;
                        let (pair_mean, _) = pair_consistency_loss(&mut tape, &terms)?;
                        *pair_sums.entry((a, b)).or_insert(0.0) += pair_mean.to_scalar()?;
                        per_pair_terms.push(terms);
                    }
                    let (scene_cpc, empty) =
                        cpc_loss(&mut tape, &per_pair_terms, scene.triplets.len())?;
                    cpc_empty |= empty;
                    cpc_sum = Some(match cpc_sum.take() {
                        Some(prev) => tape.add(&prev, &scene_cpc)?,
                        None => scene_cpc,
                    });
                }
            }

            let inv_b = 1.0 / batch.len() as f64;
            let mut sup_means = Vec::with_capacity(path_ids.len());
            let mut sup_report = Vec::with_capacity(path_ids.len());
            for &k in &path_ids {
                let mean = tape.mul_scalar(&sup_sums[&k], inv_b)?;
                sup_report.push((k, mean.to_scalar()?));
                sup_means.push(mean);
            }
            let cpc_mean = match cpc_sum {
                Some(sum) => tape.mul_scalar(&sum, inv_b)?,
                None => tape.leaf(&Tensor::scalar(0.0)),
            };

            let total = total_loss(&mut tape, &sup_means, &cpc_mean, ramp_weight)
                .map_err(|e| wrap_nonfinite(e, last_report))?;

            let report = LossReport {
                sup_per_path: sup_report,
                pair_losses: pairs
                    .iter()
                    .map(|&p| (p, pair_sums.get(&p).copied().unwrap_or(0.0) * inv_b))
                    .collect(),
                cpc: cpc_mean.to_scalar()?,
                rampup_weight: ramp_weight,
                total: total.to_scalar()?,
                cpc_empty,
            };

            let grads_by_node = tape.backward(&total)?;
            let mut grads: BTreeMap<String, Tensor> = BTreeMap::new();
            for name in self.model.store.names() {
                if self.frozen(name) {
                    continue;
                }
                if let Some(node) = bind.node_of(name) {
                    if let Some(g) = grads_by_node.get(node) {
                        grads.insert(name.to_string(), g.detached());
                    }
                }
            }
            (grads, report)
        };
        let (grads, report) = grads;

        self.opt.apply(&mut self.model.store, &grads)?;
        self.step += 1;
        Ok(report)
    }

    /// Train for the configured number of steps, recording the loss
    /// curve and periodic evaluations.
    pub fn run(
        &mut self,
        train_scenes: &[Scene],
        eval_scenes: Option<&[Scene]>,
    ) -> Result<(Vec<LossReport>, Vec<EvalEvent>)> {
        if train_scenes.is_empty() {
            return Err(TrainError::Config("training dataset is empty".into()));
        }
        let max_triplets = train_scenes.iter().map(|s| s.triplets.len()).max().unwrap_or(0);
        if max_triplets > self.model.cfg().n_queries {
            return Err(TrainError::Config(format!(
                "a scene holds {max_triplets} triplets but the model has {} queries",
                self.model.cfg().n_queries
            )));
        }
        let grid_size = self.model.cfg().grid;
        let grids: Vec<FeatureGrid> = train_scenes
            .iter()
            .map(|s| render_features(s, grid_size))
            .collect();

        let mut curve = Vec::with_capacity(self.cfg.steps as usize);
        let mut events = Vec::new();
        while self.step < self.cfg.steps {
            let report = self.train_step(train_scenes, &grids, curve.last())?;
            curve.push(report);
            let due = self.cfg.eval_every > 0 && self.step % self.cfg.eval_every == 0;
            if due || self.step == self.cfg.steps {
                if let Some(eval) = eval_scenes {
                    let metrics = evaluate_map(&self.model, eval)?;
                    events.push(EvalEvent {
                        step: self.step,
                        map: metrics.map,
                        per_action_ap: metrics.per_action_ap,
                    });
                }
            }
        }
        Ok((curve, events))
    }

    /// Evaluate the current parameters on a dataset.
    pub fn evaluate(&self, scenes: &[Scene]) -> Result<Metrics> {
        Ok(evaluate_map(&self.model, scenes)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    fn tiny_train_config(steps: u64, paths: &[u8], cpc: bool) -> TrainConfig {
        TrainConfig {
            steps,
            batch_size: 4,
            lr_model: 1e-3,
            lr_embed: 1e-4,
            active_paths: paths.to_vec(),
            cpc_enabled: cpc,
            seed: 11,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn single_path_step_runs_and_reports() {
        let scenes = generate_dataset(4, 3).unwrap();
        let cfg = tiny_train_config(2, &[1], false);
        let mut trainer = Trainer::new(ModelConfig::tiny(), cfg).unwrap();
        let (curve, _) = trainer.run(&scenes, None).unwrap();
        assert_eq!(curve.len(), 2);
        let r = &curve[0];
        assert_eq!(r.sup_per_path.len(), 1);
        assert!(r.pair_losses.is_empty());
        assert_eq!(r.rampup_weight, 0.0);
        assert!((r.reconstructed_total() - r.total).abs() < 1e-12);
    }

    #[test]
    fn four_path_step_logs_all_pairs_and_finite_cpc() {
        let scenes = generate_dataset(4, 3).unwrap();
        let cfg = tiny_train_config(1, &[1, 2, 3, 4], true);
        let mut trainer = Trainer::new(ModelConfig::tiny(), cfg).unwrap();
        let (curve, _) = trainer.run(&scenes, None).unwrap();
        let r = &curve[0];
        assert_eq!(r.sup_per_path.len(), 4);
        assert_eq!(r.pair_losses.len(), 6, "C(4,2) path pairs");
        assert!(r.cpc.is_finite());
        assert!(r.cpc >= 0.0);
        assert!(r.rampup_weight > 0.0, "ramp weight logged from step 0");
        assert!((r.reconstructed_total() - r.total).abs() < 1e-12);
    }

    #[test]
    fn same_seed_same_loss_curve() {
        let scenes = generate_dataset(6, 5).unwrap();
        let run = || {
            let cfg = tiny_train_config(3, &[1, 2], true);
            let mut trainer = Trainer::new(ModelConfig::tiny(), cfg).unwrap();
            let (curve, _) = trainer.run(&scenes, None).unwrap();
            curve.iter().map(|r| r.total.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn zero_ramp_weight_matches_cpc_disabled_trajectory() {
        let scenes = generate_dataset(4, 9).unwrap();
        let digest = |cpc: bool, w_max: f64| {
            let cfg = tiny_train_config(3, &[1, 2], cpc);
            let mut trainer = Trainer::new(ModelConfig::tiny(), cfg).unwrap();
            trainer.loss_weights.w_max = w_max;
            trainer.run(&scenes, None).unwrap();
            let mut out = Vec::new();
            for (name, t) in trainer.model.store.iter() {
                out.push((name.to_string(), t.data().to_vec()));
            }
            out
        };
        let with_zero_ramp = digest(true, 0.0);
        let disabled = digest(false, 0.5);
        assert_eq!(with_zero_ramp.len(), disabled.len());
        for ((na, da), (nb, db)) in with_zero_ramp.iter().zip(&disabled) {
            assert_eq!(na, nb);
            assert_eq!(da, db, "parameter {na} diverged");
        }
    }

    #[test]
    fn frozen_encoder_parameters_stay_fixed() {
        let scenes = generate_dataset(4, 7).unwrap();
        let mut cfg = tiny_train_config(3, &[1], false);
        cfg.freeze_encoder = true;
        let mut trainer = Trainer::new(ModelConfig::tiny(), cfg).unwrap();
        let before: Vec<(String, Vec<f64>)> = trainer
            .model
            .store
            .iter()
            .map(|(n, t)| (n.to_string(), t.data().to_vec()))
            .collect();
        trainer.run(&scenes, None).unwrap();
        let mut decoder_moved = false;
        for (name, data) in before {
            let after = trainer.model.store.get(&name).unwrap().data();
            if name.starts_with("enc.") || name.starts_with("embed.") {
                assert_eq!(after, &data[..], "{name} moved despite frozen encoder");
            } else if name.starts_with("dec.") && after != &data[..] {
                decoder_moved = true;
            }
        }
        assert!(decoder_moved, "decoder parameters should still train");
    }

    #[test]
    fn shared_decoder_gradient_pools_all_paths() {
        // With a shared decoder the gradient for a decoder tensor is a
        // single buffer fed by all paths; with per-path decoders the
        // per-path buffers are disjoint. Certify by comparing the
        // shared gradient against the sum of unshared gradients at
        // identical parameter values.
        let scenes = generate_dataset(2, 13).unwrap();
        let grids: Vec<FeatureGrid> = scenes.iter().map(|s| render_features(s, 4)).collect();

        let shared_cfg = tiny_train_config(1, &[1, 2], false);
        let mut shared = Trainer::new(ModelConfig::tiny(), shared_cfg).unwrap();

        let mut unshared_cfg = tiny_train_config(1, &[1, 2], false);
        unshared_cfg.share_decoder = false;
        let mut unshared = Trainer::new(ModelConfig::tiny(), unshared_cfg).unwrap();
        // Force both decoders in the unshared model to the shared values.
        let dec_names: Vec<String> = shared
            .model
            .store
            .names()
            .filter(|n| n.starts_with("dec."))
            .map(str::to_string)
            .collect();
        for name in &dec_names {
            let value = shared.model.store.get(name).unwrap().clone();
            for k in [1u8, 2] {
                let per_path = name.replacen("dec.", &format!("dec.p{k}."), 1);
                unshared.model.store.set(&per_path, value.clone()).unwrap();
            }
        }

        let grad_of = |trainer: &mut Trainer, name: &str| -> Vec<f64> {
            let mut tape = Tape::new();
            let mut bind = Binding::new(&trainer.model.store);
            let f = trainer
                .model
                .embed_features(&mut tape, &mut bind, &grids[0])
                .unwrap();
            let x = trainer.model.encode(&mut tape, &mut bind, &f).unwrap();
            let preds = trainer.model.run_all_paths(&mut tape, &mut bind, &x).unwrap();
            let mut sups = Vec::new();
            for (k, pred) in &preds {
                let values = pred.values();
                let assignment =
                    match_path(&values, &scenes[0].triplets, &trainer.match_weights).unwrap();
                sups.push(
                    supervision_loss(
                        &mut tape,
                        pred,
                        &assignment,
                        &scenes[0].triplets,
                        &trainer.loss_weights,
                    )
                    .unwrap(),
                );
                let _ = k;
            }
            let total = total_loss(&mut tape, &sups, &Tensor::scalar(0.0), 0.0).unwrap();
            let grads = tape.backward(&total).unwrap();
            bind.node_of(name)
                .and_then(|n| grads.get(n))
                .map(|g| g.data().to_vec())
                .unwrap_or_default()
        };

        let probe = "dec.0.self_attn.q.w";
        let g_shared = grad_of(&mut shared, probe);
        let g_p1 = grad_of(&mut unshared, "dec.p1.0.self_attn.q.w");
        let g_p2 = grad_of(&mut unshared, "dec.p2.0.self_attn.q.w");
        assert!(!g_shared.is_empty() && !g_p1.is_empty() && !g_p2.is_empty());
        for i in 0..g_shared.len() {
            let summed = g_p1[i] + g_p2[i];
            assert!(
                (g_shared[i] - summed).abs() < 1e-9,
                "entry {i}: shared {} vs p1+p2 {summed}",
                g_shared[i]
            );
        }
    }

    #[test]
    fn empty_dataset_is_rejected() {
        let cfg = tiny_train_config(1, &[1], false);
        let mut trainer = Trainer::new(ModelConfig::tiny(), cfg).unwrap();
        assert!(matches!(
            trainer.run(&[], None),
            Err(TrainError::Config(_))
        ));
    }
}

//! Checkpoint persistence: model configuration, named parameters,
//! optimizer moments, step counter and data-order RNG state in one
//! JSON container. Float arrays are base64-encoded little-endian f64,
//! so a save → load → save cycle is byte-identical and a resumed run
//! continues bit-for-bit.

use crate::model::{Model, ModelConfig, ModelError};
use crate::optim::{AdamW, Moments};
use crate::tensor::Tensor;
use crate::train::Trainer;
use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

pub const CHECKPOINT_SCHEMA: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("unsupported checkpoint schema {found} (expected {expected})")]
    Schema { found: u32, expected: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Serialize, Deserialize)]
struct TensorBlob {
    shape: Vec<usize>,
    data: String,
}

impl TensorBlob {
    fn encode(t: &Tensor) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        Self {
            shape: t.shape().to_vec(),
            data: BASE64.encode(bytes),
        }
    }

    fn decode_values(&self, name: &str) -> Result<Vec<f64>, CheckpointError> {
        let bytes = BASE64
            .decode(&self.data)
            .map_err(|e| CheckpointError::Malformed(format!("tensor {name}: {e}")))?;
        if bytes.len() % 8 != 0 {
            return Err(CheckpointError::Malformed(format!(
                "tensor {name}: byte length {} not a multiple of 8",
                bytes.len()
            )));
        }
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect())
    }
}

#[derive(Serialize, Deserialize)]
struct OptBlob {
    step: u64,
    m: BTreeMap<String, TensorBlob>,
    v: BTreeMap<String, TensorBlob>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    schema: u32,
    model_cfg: ModelConfig,
    active_paths: Vec<u8>,
    share_decoder: bool,
    step: u64,
    /// SplitMix64 state of the batch sampler, as a decimal string
    /// (u64 exceeds JSON number precision).
    rng_state: String,
    params: BTreeMap<String, TensorBlob>,
    opt: OptBlob,
}

/// Write the trainer's full mutable state.
pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<(), CheckpointError> {
    let moments_blob = |pick: fn(&Moments) -> &Vec<f64>| -> BTreeMap<String, TensorBlob> {
        trainer
            .opt
            .moments
            .iter()
            .map(|(name, m)| {
                let shape = trainer
                    .model
                    .store
                    .get(name)
                    .map(|t| t.shape().to_vec())
                    .unwrap_or_else(|_| vec![pick(m).len()]);
                let t = Tensor::raw(shape, pick(m).clone());
                (name.clone(), TensorBlob::encode(&t))
            })
            .collect()
    };
    let file = CheckpointFile {
        schema: CHECKPOINT_SCHEMA,
        model_cfg: *trainer.model.cfg(),
        active_paths: trainer.model.path_ids(),
        share_decoder: trainer.model.share_decoder(),
        step: trainer.step,
        rng_state: trainer.data_rng.state().to_string(),
        params: trainer
            .model
            .store
            .iter()
            .map(|(name, t)| (name.to_string(), TensorBlob::encode(t)))
            .collect(),
        opt: OptBlob {
            step: trainer.opt.step,
            m: moments_blob(|m| &m.m),
            v: moments_blob(|m| &m.v),
        },
    };
    let json =
        serde_json::to_string(&file).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}

/// Decoded checkpoint ready to resume or evaluate.
pub struct LoadedCheckpoint {
    pub model: Model,
    pub model_cfg: ModelConfig,
    pub active_paths: Vec<u8>,
    pub share_decoder: bool,
    pub step: u64,
    pub rng_state: u64,
    pub opt_step: u64,
    pub moments: BTreeMap<String, Moments>,
}

impl LoadedCheckpoint {
    /// Rebuild an AdamW with the checkpointed moments and the given
    /// hyperparameters.
    pub fn optimizer(
        &self,
        lr_model: f64,
        lr_embed: f64,
        weight_decay: f64,
    ) -> Result<AdamW, crate::optim::OptimError> {
        let mut opt = AdamW::new(lr_model, lr_embed, weight_decay)?;
        opt.step = self.opt_step;
        opt.moments = self.moments.clone();
        Ok(opt)
    }
}

/// Read a checkpoint and reconstruct the model; every tensor shape is
/// validated against the declared model configuration, and mismatches
/// name the offending tensor.
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, CheckpointError> {
    let json = std::fs::read_to_string(path)?;
    let file: CheckpointFile =
        serde_json::from_str(&json).map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    if file.schema != CHECKPOINT_SCHEMA {
        return Err(CheckpointError::Schema {
            found: file.schema,
            expected: CHECKPOINT_SCHEMA,
        });
    }
    let rng_state: u64 = file
        .rng_state
        .parse()
        .map_err(|_| CheckpointError::Malformed(format!("bad rng state {}", file.rng_state)))?;

    // Seed value is irrelevant: every parameter is overwritten below.
    let mut model = Model::new(file.model_cfg, &file.active_paths, file.share_decoder, 0)?;
    let expected: Vec<String> = model.store.names().map(str::to_string).collect();
    for name in &expected {
        let blob = file.params.get(name).ok_or_else(|| {
            CheckpointError::Malformed(format!("checkpoint is missing tensor {name}"))
        })?;
        let values = blob.decode_values(name)?;
        let tensor = Tensor::new(blob.shape.clone(), values).map_err(|_| {
            CheckpointError::Malformed(format!("tensor {name}: malformed payload"))
        })?;
        // Shape check against the declared ModelConfig, naming the tensor.
        model.store.set(name, tensor)?;
    }
    if file.params.len() != expected.len() {
        let extra: Vec<&String> = file
            .params
            .keys()
            .filter(|k| !expected.contains(k))
            .collect();
        return Err(CheckpointError::Malformed(format!(
            "checkpoint carries unknown tensors: {extra:?}"
        )));
    }

    let mut moments = BTreeMap::new();
    for (name, m_blob) in &file.opt.m {
        let v_blob = file.opt.v.get(name).ok_or_else(|| {
            CheckpointError::Malformed(format!("optimizer state for {name} lacks second moment"))
        })?;
        moments.insert(
            name.clone(),
            Moments {
                m: m_blob.decode_values(name)?,
                v: v_blob.decode_values(name)?,
            },
        );
    }

    Ok(LoadedCheckpoint {
        model,
        model_cfg: file.model_cfg,
        active_paths: file.active_paths,
        share_decoder: file.share_decoder,
        step: file.step,
        rng_state,
        opt_step: file.opt.step,
        moments,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;
    use crate::train::{TrainConfig, Trainer};

    fn trained_trainer(steps: u64) -> (Trainer, Vec<crate::data::Scene>) {
        let scenes = generate_dataset(4, 21).unwrap();
        let cfg = TrainConfig {
            steps,
            batch_size: 4,
            lr_model: 1e-3,
            lr_embed: 1e-4,
            active_paths: vec![1, 2],
            seed: 5,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(ModelConfig::tiny(), cfg).unwrap();
        trainer.run(&scenes, None).unwrap();
        (trainer, scenes)
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (trainer, _) = trained_trainer(2);
        let p1 = dir.path().join("a.json");
        let p2 = dir.path().join("b.json");
        save_checkpoint(&trainer, &p1).unwrap();
        let loaded = load_checkpoint(&p1).unwrap();
        let opt = loaded
            .optimizer(trainer.cfg.lr_model, trainer.cfg.lr_embed, trainer.cfg.weight_decay)
            .unwrap();
        let resumed = Trainer::from_parts(
            trainer.cfg.clone(),
            loaded.model,
            opt,
            loaded.step,
            loaded.rng_state,
        )
        .unwrap();
        save_checkpoint(&resumed, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn resumed_training_matches_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let scenes = generate_dataset(4, 21).unwrap();
        let make_cfg = |steps: u64| TrainConfig {
            steps,
            batch_size: 4,
            lr_model: 1e-3,
            lr_embed: 1e-4,
            active_paths: vec![1, 2],
            seed: 5,
            ..TrainConfig::default()
        };

        // Uninterrupted: 6 steps.
        let mut full = Trainer::new(ModelConfig::tiny(), make_cfg(6)).unwrap();
        let (full_curve, _) = full.run(&scenes, None).unwrap();

        // Interrupted: same 6-step config, stopped after 3 steps,
        // checkpointed, resumed for the remaining 3.
        let mut first = Trainer::new(ModelConfig::tiny(), make_cfg(6)).unwrap();
        let grids: Vec<crate::data::FeatureGrid> = scenes
            .iter()
            .map(|s| crate::data::render_features(s, first.model.cfg().grid))
            .collect();
        let mut curve_a = Vec::new();
        for _ in 0..3 {
            let report = first.train_step(&scenes, &grids, curve_a.last()).unwrap();
            curve_a.push(report);
        }
        let ckpt = dir.path().join("mid.json");
        save_checkpoint(&first, &ckpt).unwrap();

        let loaded = load_checkpoint(&ckpt).unwrap();
        let cfg = make_cfg(6);
        let opt = loaded
            .optimizer(cfg.lr_model, cfg.lr_embed, cfg.weight_decay)
            .unwrap();
        let mut second =
            Trainer::from_parts(cfg, loaded.model, opt, loaded.step, loaded.rng_state).unwrap();
        let (curve_b, _) = second.run(&scenes, None).unwrap();
        curve_a.extend(curve_b);

        assert_eq!(full_curve.len(), curve_a.len());
        for (a, b) in full_curve.iter().zip(&curve_a) {
            assert_eq!(a.total.to_bits(), b.total.to_bits(), "trajectory diverged");
        }
        // Final parameters identical bit-for-bit.
        for (name, t) in full.model.store.iter() {
            assert_eq!(second.model.store.get(name).unwrap().data(), t.data(), "{name}");
        }
    }

    #[test]
    fn wrong_config_shape_error_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let (trainer, _) = trained_trainer(1);
        let p = dir.path().join("c.json");
        save_checkpoint(&trainer, &p).unwrap();
        // Tamper: declare a wider d_model so every tensor shape disagrees.
        let mut json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        json["model_cfg"]["d_model"] = serde_json::json!(64);
        json["model_cfg"]["n_heads"] = serde_json::json!(4);
        std::fs::write(&p, serde_json::to_string(&json).unwrap()).unwrap();
        match load_checkpoint(&p) {
            Err(CheckpointError::Model(ModelError::ParamShape { name, .. })) => {
                assert!(!name.is_empty());
            }
            Err(other) => panic!("expected named shape error, got {other:?}"),
            Ok(_) => panic!("tampered checkpoint must not load"),
        }
    }

    #[test]
    fn schema_mismatch_is_versioned() {
        let dir = tempfile::tempdir().unwrap();
        let (trainer, _) = trained_trainer(1);
        let p = dir.path().join("s.json");
        save_checkpoint(&trainer, &p).unwrap();
        let mut json: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(&p).unwrap()).unwrap();
        json["schema"] = serde_json::json!(9);
        std::fs::write(&p, serde_json::to_string(&json).unwrap()).unwrap();
        assert!(matches!(
            load_checkpoint(&p),
            Err(CheckpointError::Schema { found: 9, .. })
        ));
    }
}

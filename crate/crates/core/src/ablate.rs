//! Ablation grid: decoder sharing × consistency regularization, plus a
//! decoding-path count sweep. All runs share one dataset, seed and
//! step budget so only the ablated axis moves; path-1 mAP on the
//! held-out set is the comparison metric.

use crate::data::Scene;
use crate::eval::Metrics;
use crate::model::ModelConfig;
use crate::train::{TrainConfig, TrainError, Trainer};
use std::fmt::Write as _;

#[derive(Debug, Clone)]
pub struct RunResult {
    pub name: String,
    pub paths: Vec<u8>,
    pub share_decoder: bool,
    pub cpc_enabled: bool,
    pub param_count: usize,
    pub final_train_loss: f64,
    pub p1_map: f64,
    pub per_action_ap: Vec<f64>,
    /// Digest of the drawn batch indices; identical across runs of one
    /// grid since every run replays the same data order.
    pub data_order_digest: u64,
}

#[derive(Debug, Clone)]
pub struct AblateReport {
    pub runs: Vec<RunResult>,
}

impl AblateReport {
    /// Comparison table as CSV.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(
            "name,paths,share_decoder,cpc,param_count,final_train_loss,p1_map\n",
        );
        for r in &self.runs {
            let paths: Vec<String> = r.paths.iter().map(u8::to_string).collect();
            let _ = writeln!(
                out,
                "{},{},{},{},{},{:.6},{:.6}",
                r.name,
                paths.join("+"),
                r.share_decoder,
                r.cpc_enabled,
                r.param_count,
                r.final_train_loss,
                r.p1_map,
            );
        }
        out
    }
}

/// One run variant of the grid.
#[derive(Debug, Clone)]
pub struct RunPlan {
    pub name: String,
    pub paths: Vec<u8>,
    pub share_decoder: bool,
    pub cpc_enabled: bool,
}

/// The 2×2 {decoder sharing} × {consistency} grid over all four paths,
/// followed by the path-count sweep {1}, {1,2}, {1,2,3}, {1,2,3,4}.
pub fn grid_plans() -> Vec<RunPlan> {
    let mut plans = Vec::new();
    for &(share, cpc) in &[(true, true), (true, false), (false, true), (false, false)] {
        plans.push(RunPlan {
            name: format!(
                "grid_share={}_cpc={}",
                if share { "on" } else { "off" },
                if cpc { "on" } else { "off" }
            ),
            paths: vec![1, 2, 3, 4],
            share_decoder: share,
            cpc_enabled: cpc,
        });
    }
    for n in 1..=4u8 {
        let paths: Vec<u8> = (1..=n).collect();
        plans.push(RunPlan {
            name: format!("sweep_paths={n}"),
            paths,
            share_decoder: true,
            cpc_enabled: true,
        });
    }
    plans
}

fn execute(
    plan: &RunPlan,
    base: &TrainConfig,
    model_cfg: ModelConfig,
    train: &[Scene],
    eval: &[Scene],
) -> Result<RunResult, TrainError> {
    let cfg = TrainConfig {
        active_paths: plan.paths.clone(),
        share_decoder: plan.share_decoder,
        cpc_enabled: plan.cpc_enabled,
        ..base.clone()
    };
    let mut trainer = Trainer::new(model_cfg, cfg)?;
    let param_count = trainer.model.store.n_scalars();
    let (curve, _) = trainer.run(train, None)?;
    let metrics: Metrics = trainer.evaluate(eval)?;
    Ok(RunResult {
        name: plan.name.clone(),
        paths: plan.paths.clone(),
        share_decoder: plan.share_decoder,
        cpc_enabled: plan.cpc_enabled,
        param_count,
        final_train_loss: curve.last().map(|r| r.total).unwrap_or(f64::NAN),
        p1_map: metrics.map,
        per_action_ap: metrics.per_action_ap,
        data_order_digest: trainer.data_order_digest,
    })
}

/// Run the full grid; runs fan out across worker threads (one config
/// per worker) and the report keeps plan order.
pub fn ablate(
    base: &TrainConfig,
    model_cfg: ModelConfig,
    train: &[Scene],
    eval: &[Scene],
) -> Result<AblateReport, TrainError> {
    let plans = grid_plans();
    let workers = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1)
        .min(plans.len())
        .max(1);

    let mut results: Vec<Option<Result<RunResult, TrainError>>> =
        (0..plans.len()).map(|_| None).collect();
    let next = std::sync::atomic::AtomicUsize::new(0);
    let results_mutex = std::sync::Mutex::new(&mut results);

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if i >= plans.len() {
                    break;
                }
                let out = execute(&plans[i], base, model_cfg, train, eval);
                results_mutex.lock().expect("results lock")[i] = Some(out);
            });
        }
    });

    let mut runs = Vec::with_capacity(plans.len());
    for slot in results {
        runs.push(slot.expect("every plan executed")?);
    }
    Ok(AblateReport { runs })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_dataset;

    #[test]
    fn grid_emits_four_plus_four_runs() {
        let plans = grid_plans();
        assert_eq!(plans.len(), 8);
        assert_eq!(plans.iter().filter(|p| p.name.starts_with("grid")).count(), 4);
        assert_eq!(plans.iter().filter(|p| p.name.starts_with("sweep")).count(), 4);
        // Sweep grows path prefixes in order.
        assert_eq!(plans[4].paths, vec![1]);
        assert_eq!(plans[7].paths, vec![1, 2, 3, 4]);
    }

    #[test]
    fn short_grid_shares_data_order_and_audits_params() {
        let scenes = generate_dataset(8, 3).unwrap();
        let (train, eval) = crate::data::split(
            &scenes,
            0.75,
            &mut crate::rng::SplitMix64::new(1),
        )
        .unwrap();
        let base = TrainConfig {
            steps: 2,
            batch_size: 2,
            lr_model: 1e-3,
            lr_embed: 1e-4,
            seed: 3,
            ..TrainConfig::default()
        };
        let report = ablate(&base, ModelConfig::tiny(), &train, &eval).unwrap();
        assert_eq!(report.runs.len(), 8);

        // Identical data order across all runs.
        let digest = report.runs[0].data_order_digest;
        assert!(report.runs.iter().all(|r| r.data_order_digest == digest));

        // Sharing arm has fewer decoder parameters.
        let shared = report
            .runs
            .iter()
            .find(|r| r.name == "grid_share=on_cpc=on")
            .unwrap();
        let unshared = report
            .runs
            .iter()
            .find(|r| r.name == "grid_share=off_cpc=on")
            .unwrap();
        assert!(unshared.param_count > shared.param_count);

        // More paths, more readout parameters.
        let sweep: Vec<&RunResult> = report
            .runs
            .iter()
            .filter(|r| r.name.starts_with("sweep"))
            .collect();
        for w in sweep.windows(2) {
            assert!(w[1].param_count > w[0].param_count);
        }

        // CSV carries one line per run plus header.
        let csv = report.to_csv();
        assert_eq!(csv.lines().count(), 9);
        assert!(csv.lines().nth(1).unwrap().starts_with("grid_share=on_cpc=on,1+2+3+4,true,true,"));
    }
}

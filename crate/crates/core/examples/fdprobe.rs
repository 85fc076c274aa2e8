// probe: learning curves for baseline vs cpc on the default config
use crosspath::data::{generate_dataset, split};
use crosspath::model::ModelConfig;
use crosspath::rng::SplitMix64;
use crosspath::train::{TrainConfig, Trainer};

fn main() {
    let scenes = generate_dataset(640, 42).unwrap();
    let (train, eval) = split(&scenes, 0.8, &mut SplitMix64::new(42)).unwrap();
    println!("train {} eval {}", train.len(), eval.len());

    for (name, paths, cpc) in [
        ("baseline-p1", vec![1u8], false),
        ("cpc-p1234", vec![1, 2, 3, 4], true),
    ] {
        let cfg = TrainConfig {
            steps: 2400,
            batch_size: 16,
            active_paths: paths,
            cpc_enabled: cpc,
            seed: 7,
            eval_every: 300,
            ..TrainConfig::default()
        };
        let mut trainer = Trainer::new(ModelConfig::default(), cfg).unwrap();
        let t0 = std::time::Instant::now();
        let (curve, events) = trainer.run(&train, Some(&eval)).unwrap();
        println!(
            "{name}: {:?} total, first loss {:.3} last loss {:.3}",
            t0.elapsed(),
            curve.first().unwrap().total,
            curve.last().unwrap().total
        );
        for e in &events {
            println!("  {name} step {:>5} mAP {:.4}", e.step, e.map);
        }
    }
}

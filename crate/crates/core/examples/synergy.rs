//! Trains ISFL and both baselines on the synthetic interaction task.
//!
//! cargo run --release -p isfl --example synergy -- [seed] [lr] [epochs]

use std::time::Instant;

use isfl::data::SyntheticTask;
use isfl::experiment::{train_on, DataSource, ExperimentConfig};
use isfl::isfl::FusionConfig;
use isfl::FusionMode;

fn main() -> isfl::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let lr: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(5);
    let mut base = ExperimentConfig {
        data: DataSource::Synthetic(SyntheticTask::default()),
        ..ExperimentConfig::default()
    };
    base.set_seed(seed);
    base.train.learning_rate = lr;
    base.train.epochs = epochs;
    if let DataSource::Synthetic(task) = &base.data {
        println!("bayes {:?}", task.bayes_accuracy());
    }
    let dataset = base.data.load()?;
    for mode in [FusionMode::Isfl, FusionMode::None, FusionMode::ConcatHead] {
        let mut c = base.clone();
        c.set_fusion_mode(mode);
        if mode == FusionMode::Isfl {
            c.model.fusion = Some(FusionConfig {
                insert_layer_index: 1,
                ..FusionConfig::midpoint(2)
            });
        }
        let t = Instant::now();
        let out = train_on(&c, &dataset)?;
        let report = out.test_report(&c.ece)?;
        let losses: Vec<String> = out
            .log
            .iter()
            .map(|l| format!("{:.3}/{:.3}", l.train_loss, l.eval_accuracy.unwrap_or(0.0)))
            .collect();
        println!(
            "{mode:>9} acc {:.4} ece {:.4} {:.1}s  {}",
            report.accuracy,
            report.ece,
            t.elapsed().as_secs_f64(),
            losses.join(" ")
        );
    }
    Ok(())
}

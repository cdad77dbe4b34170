//! Scratch harness for sizing the synthetic tasks. Not part of the test
//! suite; run with `cargo run --release -p slidemamba --example tune`.

use std::time::Instant;

use slidemamba::data::{generate_dataset, SyntheticSpec, TaskKind};
use slidemamba::metrics::c_index;
use slidemamba::train::{eval_metric, test_outputs, train, TrainConfig};

fn main() {
    let seeds = [11u64, 22, 33, 44, 55];

    println!("== classification: 500 bags, D=64, grid 64, snr 2.0");
    for &seed in &seeds {
        let spec = SyntheticSpec {
            grid: 64,
            dim: 64,
            task: TaskKind::Classification,
            snr: 2.0,
            planted_frac: 0.15,
            blob_radius: (5, 9),
            blobs: 2,
            seed,
            ..Default::default()
        };
        let t = Instant::now();
        let bags = generate_dataset(&spec, 500).unwrap();
        let cfg = TrainConfig { epochs: 30, seed, ..Default::default() };
        let result = train(&cfg, &bags, false).unwrap();
        let outputs = test_outputs(&cfg, &bags, &result).unwrap();
        let auc = eval_metric(&result.params, &outputs).unwrap();
        println!(
            "  seed {seed}: AUC {auc:.4} (epochs {}, best val {:.3}, {:.1?})",
            result.history.len(),
            result.best_val,
            t.elapsed()
        );
    }

    println!("== survival: 240 bags, D=32, grid 48");
    for &seed in &seeds {
        let spec = SyntheticSpec {
            grid: 48,
            dim: 32,
            task: TaskKind::Survival,
            snr: 2.0,
            blob_radius: (5, 8),
            blobs: 2,
            seed,
            ..Default::default()
        };
        let t = Instant::now();
        let bags = generate_dataset(&spec, 240).unwrap();
        let cfg = TrainConfig { epochs: 20, seed, ..Default::default() };
        let result = train(&cfg, &bags, false).unwrap();
        let outputs = test_outputs(&cfg, &bags, &result).unwrap();
        let risks: Vec<f64> = outputs.scores.iter().map(|s| s[0]).collect();
        let ci = c_index(&risks, &outputs.times, &outputs.events).unwrap();
        println!(
            "  seed {seed}: C-index {ci:.4} (epochs {}, {:.1?})",
            result.history.len(),
            t.elapsed()
        );
    }
}

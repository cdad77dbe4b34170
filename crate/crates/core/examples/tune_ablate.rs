//! Scratch harness for the ablation configs.

use std::time::Instant;

use slidemamba::ablation::{run_ablation, AblationMode};
use slidemamba::data::{SyntheticSpec, TaskKind};
use slidemamba::train::TrainConfig;

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let snr: f64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0.7);
    let spatial: f64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0.0);
    let epochs: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(18);
    let mode = match args.get(4).map(|s| s.as_str()) {
        Some("structure") => AblationMode::Structure,
        Some("both") => {
            run(snr, spatial, epochs, AblationMode::Ordering);
            run(snr, spatial, epochs, AblationMode::Structure);
            return;
        }
        _ => AblationMode::Ordering,
    };
    run(snr, spatial, epochs, mode);
}

fn run(snr: f64, spatial: f64, epochs: usize, mode: AblationMode) {
    let spec = SyntheticSpec {
        grid: 48,
        dim: 32,
        task: TaskKind::Classification,
        num_classes: 2,
        noise: 1.0,
        snr,
        planted_frac: 0.18,
        blob_radius: (6, 9),
        blobs: 2,
        censor_rate: 0.3,
        spatial_noise: spatial,
        scattered_negatives: true,
        seed: 0,
    };
    let cfg = TrainConfig { epochs, patience: epochs, ..Default::default() };
    let seeds = [11, 22, 33, 44, 55];
    let t = Instant::now();
    let report = run_ablation(mode, &spec, 300, &cfg, &seeds, false).unwrap();
    println!("== {:?} snr={snr} spatial={spatial} epochs={epochs} ({:.1?})", mode, t.elapsed());
    for row in &report.rows {
        let (auc_m, auc_s) = row.mean_std(|m| m.auc);
        let aucs: Vec<String> = row.per_seed.iter().map(|m| format!("{:.3}", m.auc)).collect();
        println!("  {:12} auc {:.4} ± {:.4}  per-seed [{}]", row.variant, auc_m, auc_s, aucs.join(", "));
    }
}

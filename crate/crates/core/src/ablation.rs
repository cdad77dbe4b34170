//! Ablation runners: ordering strategies and model structures, trained as
//! otherwise-identical replicates over a set of seeds.

use std::io::Write;

use serde::Serialize;

use crate::data::{generate_dataset, SyntheticSpec, TaskKind};
use crate::engine::Structure;
use crate::error::{Error, Result};
use crate::metrics::ClassificationMetrics;
use crate::train::{classification_report, test_outputs, train, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationMode {
    Ordering,
    Structure,
}

impl AblationMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ordering" => Ok(AblationMode::Ordering),
            "structure" => Ok(AblationMode::Structure),
            other => Err(Error::Config(format!("unknown ablation mode '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub seeds: Vec<u64>,
    /// Per-seed test metrics, aligned with `seeds`.
    pub per_seed: Vec<ClassificationMetrics>,
}

impl AblationRow {
    pub fn mean_std(&self, pick: impl Fn(&ClassificationMetrics) -> f64) -> (f64, f64) {
        let vals: Vec<f64> = self.per_seed.iter().map(&pick).collect();
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        (mean, var.sqrt())
    }

    pub fn mean_auc(&self) -> f64 {
        self.mean_std(|m| m.auc).0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub mode: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Long-form CSV: one line per (variant, seed), then mean/std lines.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "variant,seed,accuracy,auc,macro_f1")?;
        for row in &self.rows {
            for (seed, m) in row.seeds.iter().zip(&row.per_seed) {
                writeln!(w, "{},{},{:.6},{:.6},{:.6}", row.variant, seed, m.accuracy, m.auc, m.macro_f1)?;
            }
            let (acc_m, acc_s) = row.mean_std(|m| m.accuracy);
            let (auc_m, auc_s) = row.mean_std(|m| m.auc);
            let (f1_m, f1_s) = row.mean_std(|m| m.macro_f1);
            writeln!(w, "{},mean,{:.6},{:.6},{:.6}", row.variant, acc_m, auc_m, f1_m)?;
            writeln!(w, "{},std,{:.6},{:.6},{:.6}", row.variant, acc_s, auc_s, f1_s)?;
        }
        Ok(())
    }
}

/// Train one replicate and return its test-split classification metrics.
fn run_one(spec: &SyntheticSpec, n_bags: usize, cfg: &TrainConfig) -> Result<ClassificationMetrics> {
    let dspec = SyntheticSpec { seed: cfg.seed, ..spec.clone() };
    let bags = generate_dataset(&dspec, n_bags)?;
    let result = train(cfg, &bags, false)?;
    let outputs = test_outputs(cfg, &bags, &result)?;
    classification_report(&result.params, &outputs)
}

/// Run the requested ablation over `seeds`. Within one seed every variant
/// sees the identical dataset, split, and initialization; only the ablated
/// axis changes.
pub fn run_ablation(
    mode: AblationMode,
    spec: &SyntheticSpec,
    n_bags: usize,
    base: &TrainConfig,
    seeds: &[u64],
    verbose: bool,
) -> Result<AblationReport> {
    if spec.task != TaskKind::Classification {
        return Err(Error::Config("ablations run on the classification task".into()));
    }
    let variants: Vec<(String, TrainConfig)> = match mode {
        AblationMode::Ordering => ["hilbert", "zorder", "rowmajor", "random"]
            .iter()
            .map(|&name| {
                (name.to_string(), TrainConfig { ordering: name.into(), ..base.clone() })
            })
            .collect(),
        AblationMode::Structure => [
            Structure::Full,
            Structure::LocalOnly,
            Structure::GlobalOnly,
            Structure::Reversed,
        ]
        .iter()
        .map(|&s| (s.name().to_string(), TrainConfig { structure: s, ..base.clone() }))
        .collect(),
    };

    let mut rows = Vec::with_capacity(variants.len());
    for (name, variant_cfg) in variants {
        let mut per_seed = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let cfg = TrainConfig { seed, ..variant_cfg.clone() };
            let m = run_one(spec, n_bags, &cfg)?;
            if verbose {
                eprintln!("{name} seed {seed}: acc {:.3} auc {:.3} f1 {:.3}", m.accuracy, m.auc, m.macro_f1);
            }
            per_seed.push(m);
        }
        rows.push(AblationRow { variant: name, seeds: seeds.to_vec(), per_seed });
    }
    Ok(AblationReport {
        mode: match mode {
            AblationMode::Ordering => "ordering".into(),
            AblationMode::Structure => "structure".into(),
        },
        rows,
    })
}

//! Ablation harness: trains families of lifting networks under one budget
//! and tabulates their 3D errors over several seeds.
//!
//! Three suites are available. `architecture` compares a dense baseline, a
//! plain three-layer graph network and the U-Net; `pooling` swaps the
//! U-Net's resampling layers; `adjacency_init` varies how every adjacency
//! kernel starts. Each (variant, seed) run is independent and seeded, so a
//! table is bitwise reproducible regardless of `jobs`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::info;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keypoints::KeypointSubset;
use crate::layers::AdjacencyInit;
use crate::metrics::mean_error;
use crate::optim::{OptimizerKind, SgdSchedule};
use crate::params::{ParamId, ParamStore};
use crate::pipeline::{lift_all, train_lifter, LiftData, LiftObserver, LiftTrainConfig, PAPER_EPOCHS};
use crate::synth::{SampleRecord, TRAIN_NOISE_SIGMA};
use crate::unet::{GcnLifter, GraphUNet, Lifter, MlpLifter, PoolingKind, UNetConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Suite {
    Architecture,
    Pooling,
    AdjacencyInit,
}

impl Suite {
    pub const ALL: [Suite; 3] = [Suite::Architecture, Suite::Pooling, Suite::AdjacencyInit];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Architecture => "architecture",
            Suite::Pooling => "pooling",
            Suite::AdjacencyInit => "adjacency_init",
        }
    }

    /// Variants in table order.
    pub fn variants(self) -> Vec<Variant> {
        match self {
            Suite::Architecture => vec![Variant::Fc, Variant::Gcn, Variant::unet()],
            Suite::Pooling => PoolingKind::ALL
                .iter()
                .map(|&pooling| Variant::UNet {
                    pooling,
                    init: AdjacencyInit::Identity,
                })
                .collect(),
            Suite::AdjacencyInit => AdjacencyInit::ALL
                .iter()
                .map(|&init| Variant::UNet {
                    pooling: PoolingKind::Trainable,
                    init,
                })
                .collect(),
        }
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| {
                Error::Usage(format!(
                    "unknown suite {s:?} (expected architecture, pooling or adjacency_init)"
                ))
            })
    }
}

/// One network family in an ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Three dense layers on the flattened 2D coordinates.
    Fc,
    /// Three adaptive graph convolutions, no pooling.
    Gcn,
    UNet {
        pooling: PoolingKind,
        init: AdjacencyInit,
    },
}

impl Variant {
    /// The reference U-Net: trainable pooling, identity adjacency init.
    pub fn unet() -> Self {
        Variant::UNet {
            pooling: PoolingKind::Trainable,
            init: AdjacencyInit::Identity,
        }
    }

    /// Row label within `suite`.
    pub fn label(self, suite: Suite) -> &'static str {
        match (self, suite) {
            (Variant::Fc, _) => "fc",
            (Variant::Gcn, _) => "gcn",
            (Variant::UNet { pooling, .. }, Suite::Pooling) => pooling.name(),
            (Variant::UNet { init, .. }, Suite::AdjacencyInit) => init.name(),
            (Variant::UNet { .. }, Suite::Architecture) => "unet",
        }
    }
}

/// Shared training budget for every variant.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub epochs: u64,
    pub batch_size: usize,
    pub optimizer: OptimizerKind,
    pub schedule: SgdSchedule,
    pub noise_sigma: f64,
    pub seeds: Vec<u64>,
    /// Base U-Net; the variant overrides pooling and adjacency init.
    pub unet: UNetConfig,
    pub gcn_hidden: usize,
    pub fc_hidden: usize,
    /// Trailing records held out for evaluation. With 0 the error is
    /// measured on the (noise-free) training inputs.
    pub holdout: usize,
    /// Worker threads; results do not depend on it.
    pub jobs: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self::with_epochs(200)
    }
}

impl AblationConfig {
    /// Default budget with `epochs` epochs and the graph schedule
    /// compressed to that length.
    pub fn with_epochs(epochs: u64) -> Self {
        Self {
            epochs,
            batch_size: 8,
            optimizer: OptimizerKind::Adam,
            schedule: SgdSchedule::graph().compressed(PAPER_EPOCHS[1], epochs.max(1)),
            noise_sigma: TRAIN_NOISE_SIGMA,
            seeds: vec![0, 1, 2],
            unet: UNetConfig::compact(),
            gcn_hidden: 128,
            fc_hidden: 256,
            holdout: 0,
            jobs: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(Error::Usage("ablation needs at least one seed".into()));
        }
        if self.batch_size == 0 || self.gcn_hidden == 0 || self.fc_hidden == 0 {
            return Err(Error::Usage("batch size and hidden widths must be positive".into()));
        }
        if self.jobs == 0 {
            return Err(Error::Usage("jobs must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Usage("noise sigma must be non-negative".into()));
        }
        self.schedule.validate()?;
        self.unet.validate()
    }

    fn lift_config(&self, seed: u64) -> LiftTrainConfig {
        LiftTrainConfig {
            epochs: self.epochs,
            schedule: self.schedule,
            optimizer: self.optimizer,
            batch_size: self.batch_size,
            noise_sigma: self.noise_sigma,
            seed,
        }
    }
}

/// Builds the network for `variant`, initialized from `seed`.
pub fn build_variant(
    variant: Variant,
    cfg: &AblationConfig,
    seed: u64,
) -> Result<(ParamStore, Box<dyn Lifter + Send + Sync>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let net: Box<dyn Lifter + Send + Sync> = match variant {
        Variant::Fc => Box::new(MlpLifter::new(&mut store, "fc", cfg.fc_hidden, &cfg.unet, &mut rng)),
        Variant::Gcn => Box::new(GcnLifter::new(&mut store, "gcn", cfg.gcn_hidden, &cfg.unet, &mut rng)),
        Variant::UNet { pooling, init } => {
            let unet = UNetConfig {
                pooling,
                adjacency_init: init,
                ..cfg.unet.clone()
            };
            Box::new(GraphUNet::new(&mut store, "unet", &unet, &mut rng)?)
        }
    };
    Ok((store, net))
}

/// Outcome of one (variant, seed) training run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub initial_error_mm: f64,
    pub final_error_mm: f64,
    /// Training stopped on a non-finite value; the final error is that of
    /// the last good parameters.
    pub diverged: bool,
    /// No parameter changed during training.
    pub frozen: bool,
    pub steps: u64,
    /// Optimizer steps in which some pooling parameter had an all-zero
    /// gradient. Always 0 for variants without pooling parameters.
    pub pool_dead_steps: u64,
}

struct PoolMonitor {
    ids: Vec<ParamId>,
    steps: u64,
    dead: u64,
}

impl LiftObserver for PoolMonitor {
    fn on_step(&mut self, _epoch: u64, store: &ParamStore) {
        self.steps += 1;
        let live = self.ids.iter().all(|&id| {
            store
                .get(id)
                .grad()
                .is_some_and(|g| g.iter().any(|&v| v != 0.0))
        });
        if !live {
            self.dead += 1;
        }
    }
}

struct Split {
    train: LiftData,
    eval: LiftData,
}

fn split(records: &[SampleRecord], holdout: usize) -> Result<Split> {
    if holdout >= records.len() {
        return Err(Error::Data(format!(
            "holdout {holdout} leaves no training records out of {}",
            records.len()
        )));
    }
    let cut = records.len() - holdout;
    let train = LiftData::from_records(&records[..cut]);
    let eval = if holdout == 0 {
        train.clone()
    } else {
        LiftData::from_records(&records[cut..])
    };
    Ok(Split { train, eval })
}

fn evaluate(store: &ParamStore, net: &dyn Lifter, data: &LiftData) -> Result<f64> {
    let preds = lift_all(store, &net, &data.inputs)?;
    mean_error(&preds, &data.targets, KeypointSubset::All)
}

fn run_one(variant: Variant, label: &str, data: &Split, cfg: &AblationConfig, seed: u64) -> Result<RunResult> {
    let (mut store, net) = build_variant(variant, cfg, seed)?;
    let net: &dyn Lifter = &*net;
    let initial = evaluate(&store, net, &data.eval)?;
    let before = store.snapshot();
    let mut monitor = PoolMonitor {
        ids: net.pool_param_ids(),
        steps: 0,
        dead: 0,
    };
    let diverged = match train_lifter(&mut store, &net, &data.train, &cfg.lift_config(seed), &mut monitor) {
        Ok(_) => false,
        Err(Error::Diverged { .. }) => true,
        Err(e) => return Err(e),
    };
    let final_error_mm = evaluate(&store, net, &data.eval)?;
    info!("{label} seed {seed}: {initial:.2} -> {final_error_mm:.2} mm");
    Ok(RunResult {
        variant: label.to_string(),
        seed,
        initial_error_mm: initial,
        final_error_mm,
        diverged,
        frozen: store.snapshot() == before,
        steps: monitor.steps,
        pool_dead_steps: monitor.dead,
    })
}

/// Trains a single variant for one seed on `records`.
pub fn run_variant(
    suite: Suite,
    variant: Variant,
    records: &[SampleRecord],
    cfg: &AblationConfig,
    seed: u64,
) -> Result<RunResult> {
    cfg.validate()?;
    let data = split(records, cfg.holdout)?;
    run_one(variant, variant.label(suite), &data, cfg, seed)
}

/// Seed-aggregated row of an ablation table.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: String,
    pub mean_error_mm: f64,
    /// Sample standard deviation; 0 for a single seed.
    pub std_over_seeds: f64,
    pub initial_error_mm: f64,
    /// Number of seeds whose run was frozen / diverged.
    pub frozen: usize,
    pub diverged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub suite: Suite,
    pub runs: Vec<RunResult>,
    pub rows: Vec<AblationRow>,
}

pub const SUMMARY_HEADER: &str = "variant,mean_error_mm,std_over_seeds,initial_error_mm,frozen,diverged";
pub const RUNS_HEADER: &str =
    "variant,seed,initial_error_mm,final_error_mm,diverged,frozen,steps,pool_dead_steps";

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl AblationTable {
    fn from_runs(suite: Suite, runs: Vec<RunResult>) -> Self {
        let mut rows = Vec::new();
        for v in suite.variants() {
            let label = v.label(suite);
            let mine: Vec<&RunResult> = runs.iter().filter(|r| r.variant == label).collect();
            let finals: Vec<f64> = mine.iter().map(|r| r.final_error_mm).collect();
            let inits: Vec<f64> = mine.iter().map(|r| r.initial_error_mm).collect();
            let (mean, std) = mean_std(&finals);
            rows.push(AblationRow {
                variant: label.to_string(),
                mean_error_mm: mean,
                std_over_seeds: std,
                initial_error_mm: mean_std(&inits).0,
                frozen: mine.iter().filter(|r| r.frozen).count(),
                diverged: mine.iter().filter(|r| r.diverged).count(),
            });
        }
        Self { suite, runs, rows }
    }

    pub fn row(&self, variant: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    /// Final error of `variant` for `seed`.
    pub fn final_error(&self, variant: &str, seed: u64) -> Option<f64> {
        self.runs
            .iter()
            .find(|r| r.variant == variant && r.seed == seed)
            .map(|r| r.final_error_mm)
    }

    pub fn summary_csv(&self) -> String {
        let mut s = format!("{SUMMARY_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{}",
                r.variant, r.mean_error_mm, r.std_over_seeds, r.initial_error_mm, r.frozen, r.diverged
            );
        }
        s
    }

    pub fn runs_csv(&self) -> String {
        let mut s = format!("{RUNS_HEADER}\n");
        for r in &self.runs {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{}",
                r.variant,
                r.seed,
                r.initial_error_mm,
                r.final_error_mm,
                r.diverged,
                r.frozen,
                r.steps,
                r.pool_dead_steps
            );
        }
        s
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        fs::write(path, self.summary_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn write_runs(&self, path: &Path) -> Result<()> {
        fs::write(path, self.runs_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Trains every variant of `suite` for every seed in `cfg.seeds`.
pub fn run_ablation(suite: Suite, records: &[SampleRecord], cfg: &AblationConfig) -> Result<AblationTable> {
    cfg.validate()?;
    let data = split(records, cfg.holdout)?;
    let tasks: Vec<(Variant, u64)> = suite
        .variants()
        .into_iter()
        .flat_map(|v| cfg.seeds.iter().map(move |&s| (v, s)))
        .collect();
    let run = |&(v, seed): &(Variant, u64)| run_one(v, v.label(suite), &data, cfg, seed);
    let runs: Vec<Result<RunResult>> = if cfg.jobs == 1 {
        tasks.iter().map(run).collect()
    } else {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.jobs)
            .build()
            .map_err(|e| Error::Usage(format!("cannot start {} workers: {e}", cfg.jobs)))?;
        pool.install(|| tasks.par_iter().map(run).collect())
    };
    let runs = runs.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(AblationTable::from_runs(suite, runs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, GraspSpec};

    fn quick() -> AblationConfig {
        AblationConfig {
            seeds: vec![3, 4],
            unet: UNetConfig {
                feature_schedule: vec![4, 6, 8, 10],
                ..UNetConfig::compact()
            },
            gcn_hidden: 8,
            fc_hidden: 16,
            ..AblationConfig::with_epochs(3)
        }
    }

    fn data() -> Vec<SampleRecord> {
        generate_dataset(24, 5, &GraspSpec::default()).unwrap()
    }

    #[test]
    fn suite_names_round_trip() {
        for s in Suite::ALL {
            assert_eq!(s.name().parse::<Suite>().unwrap(), s);
        }
        assert!("topology".parse::<Suite>().is_err());
        assert_eq!(Suite::Architecture.variants().len(), 3);
        assert_eq!(Suite::Pooling.variants().len(), 3);
        assert_eq!(Suite::AdjacencyInit.variants().len(), 5);
    }

    #[test]
    fn one_row_per_variant_and_zeros_frozen() {
        let table = run_ablation(Suite::AdjacencyInit, &data(), &quick()).unwrap();
        assert_eq!(table.rows.len(), 5);
        assert_eq!(table.runs.len(), 10);
        let zeros = table.row("zeros").unwrap();
        assert_eq!(zeros.frozen, 2);
        assert_eq!(zeros.mean_error_mm, zeros.initial_error_mm);
        assert_eq!(table.row("identity").unwrap().frozen, 0);
        let csv = table.summary_csv();
        assert!(csv.starts_with(SUMMARY_HEADER));
        assert_eq!(csv.lines().count(), 6);
    }

    #[test]
    fn parallel_runs_match_serial() {
        let d = data();
        let serial = run_ablation(Suite::Pooling, &d, &quick()).unwrap();
        let parallel = run_ablation(Suite::Pooling, &d, &AblationConfig { jobs: 3, ..quick() }).unwrap();
        assert_eq!(serial.summary_csv(), parallel.summary_csv());
        assert_eq!(serial.runs_csv(), parallel.runs_csv());
    }

    #[test]
    fn architecture_baselines_train() {
        let table = run_ablation(Suite::Architecture, &data(), &quick()).unwrap();
        for r in &table.runs {
            assert!(!r.frozen && !r.diverged, "{r:?}");
            assert_eq!(r.steps, 3 * 3);
        }
        let fc = table.runs.iter().find(|r| r.variant == "fc").unwrap();
        assert_eq!(fc.pool_dead_steps, 0);
    }

    #[test]
    fn holdout_and_config_errors() {
        let d = data();
        let cfg = AblationConfig { holdout: 24, ..quick() };
        assert!(matches!(run_ablation(Suite::Pooling, &d, &cfg), Err(Error::Data(_))));
        let cfg = AblationConfig { seeds: vec![], ..quick() };
        assert!(matches!(run_ablation(Suite::Pooling, &d, &cfg), Err(Error::Usage(_))));
        let cfg = AblationConfig { holdout: 4, seeds: vec![1], ..quick() };
        let r = run_variant(Suite::Pooling, Variant::unet(), &d, &cfg, 1).unwrap();
        assert_eq!(r.steps, 9);
    }

    #[test]
    fn sample_std() {
        assert_eq!(mean_std(&[2.0]), (2.0, 0.0));
        let (m, s) = mean_std(&[1.0, 2.0, 3.0]);
        assert_eq!(m, 2.0);
        assert!((s - 1.0).abs() < 1e-15);
    }
}

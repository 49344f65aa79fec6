use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use log::{info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::cell::{run_cell, CellResult};
use super::config::{Ablation, ExperimentConfig};
use super::records::{aggregate, write_episode_csv, FinalRegrets, RunSummary, SummaryRow, ZetaKey};
use crate::error::{Error, Result};

pub const METADATA_SCHEMA_VERSION: &str = "meta_v1";
pub const EPISODES_FILE: &str = "episodes.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const METADATA_FILE: &str = "metadata.json";
pub const ENV_DIR: &str = "envs";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub target: f64,
    pub grid: Vec<f64>,
    /// Mean final regret at `zeta = 0`, certified + quantized, per grid value.
    pub mean_regret: Vec<f64>,
    pub chosen: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkippedCell {
    pub zeta: f64,
    pub ablation: Ablation,
    pub seed: usize,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnvMeta {
    pub zeta: f64,
    pub seed: usize,
    pub hash: String,
    pub max_phi_norm: f64,
    pub min_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellMeta {
    pub zeta: f64,
    pub ablation: Ablation,
    pub seed: usize,
    pub final_regret: f64,
    pub wall_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMetadata {
    pub schema_version: String,
    pub library_version: String,
    pub config: ExperimentConfig,
    pub gamma_scale: f64,
    pub calibration: Option<Calibration>,
    pub workers: usize,
    pub environments: Vec<EnvMeta>,
    pub cells: Vec<CellMeta>,
    pub skipped: Vec<SkippedCell>,
    pub sweep_wall_s: f64,
}

#[derive(Debug)]
pub struct SweepOutcome {
    /// Completed cells ordered by `(zeta, ablation, seed)`.
    pub cells: Vec<CellResult>,
    pub summary: RunSummary,
    pub metadata: SweepMetadata,
}

impl SweepOutcome {
    pub fn has_failures(&self) -> bool {
        !self.metadata.skipped.is_empty()
    }

    pub fn cell(&self, zeta: f64, ablation: Ablation, seed: usize) -> Option<&CellResult> {
        self.cells
            .iter()
            .find(|c| c.key.zeta == zeta && c.key.ablation == ablation && c.key.seed == seed)
    }
}

fn build_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::InvalidArgument(format!("cannot start worker pool: {e}")))
}

type CellSpec = (f64, Ablation, usize);

/// Runs `specs` on the pool; results come back in `specs` order.
fn run_cells(
    pool: &rayon::ThreadPool,
    specs: &[CellSpec],
    cfg: &ExperimentConfig,
    gamma_scale: f64,
) -> Vec<std::result::Result<CellResult, String>> {
    let sink: Mutex<Vec<(usize, std::result::Result<CellResult, String>)>> =
        Mutex::new(Vec::with_capacity(specs.len()));
    pool.install(|| {
        specs.par_iter().enumerate().for_each(|(i, &(zeta, ablation, seed))| {
            let result = run_cell(zeta, ablation, seed, cfg, gamma_scale).map_err(|e| e.to_string());
            sink.lock().expect("result sink poisoned").push((i, result));
        });
    });
    let mut results = sink.into_inner().expect("result sink poisoned");
    results.sort_by_key(|(i, _)| *i);
    results.into_iter().map(|(_, r)| r).collect()
}

/// Picks the grid value whose mean final regret at `zeta = 0` (certified,
/// quantized) is closest to `cfg.calibration_target`. Ties keep the earlier
/// grid value.
pub fn calibrate_gamma_scale(cfg: &ExperimentConfig) -> Result<Calibration> {
    let pool = build_pool(cfg.resolved_workers())?;
    calibrate_on(&pool, cfg)
}

fn calibrate_on(pool: &rayon::ThreadPool, cfg: &ExperimentConfig) -> Result<Calibration> {
    let specs: Vec<CellSpec> = (0..cfg.seeds).map(|s| (0.0, Ablation::CertQuant, s)).collect();
    let mut mean_regret = Vec::with_capacity(cfg.calibration_grid.len());
    for &g in &cfg.calibration_grid {
        let finals: Vec<f64> = run_cells(pool, &specs, cfg, g)
            .into_iter()
            .filter_map(|r| r.ok().map(|c| c.final_regret()))
            .collect();
        if finals.is_empty() {
            return Err(Error::InvalidArgument("calibration produced no completed runs".into()));
        }
        let mean = finals.iter().sum::<f64>() / finals.len() as f64;
        info!("calibration: gamma_scale={g} mean final regret {mean:.2}");
        mean_regret.push(mean);
    }
    let best = mean_regret.iter().enumerate().fold(0, |best, (i, m)| {
        if (m - cfg.calibration_target).abs() < (mean_regret[best] - cfg.calibration_target).abs() {
            i
        } else {
            best
        }
    });
    Ok(Calibration {
        target: cfg.calibration_target,
        grid: cfg.calibration_grid.clone(),
        mean_regret,
        chosen: cfg.calibration_grid[best],
    })
}

/// Runs the whole sweep in memory.
pub fn execute_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let started = Instant::now();
    let workers = cfg.resolved_workers();
    let pool = build_pool(workers)?;

    let (gamma_scale, calibration) = match cfg.gamma_scale {
        Some(g) => (g, None),
        None => {
            let cal = calibrate_on(&pool, cfg)?;
            (cal.chosen, Some(cal))
        }
    };

    let ablations = cfg.sorted_ablations();
    let specs: Vec<CellSpec> = cfg
        .zeta_grid
        .iter()
        .flat_map(|&z| {
            ablations
                .iter()
                .flat_map(move |&a| (0..cfg.seeds).map(move |s| (z, a, s)))
        })
        .collect();
    info!("running {} cells on {workers} workers", specs.len());

    let mut cells = Vec::with_capacity(specs.len());
    let mut skipped = Vec::new();
    for (&(zeta, ablation, seed), result) in specs.iter().zip(run_cells(&pool, &specs, cfg, gamma_scale)) {
        match result {
            Ok(cell) => cells.push(cell),
            Err(error) => {
                warn!("skipping cell zeta={zeta} ablation={ablation} seed={seed}: {error}");
                skipped.push(SkippedCell {
                    zeta,
                    ablation,
                    seed,
                    error,
                });
            }
        }
    }

    let mut environments: BTreeMap<(ZetaKey, usize), EnvMeta> = BTreeMap::new();
    for c in &cells {
        let meta = EnvMeta {
            zeta: c.key.zeta,
            seed: c.key.seed,
            hash: c.env_hash.clone(),
            max_phi_norm: c.max_phi_norm,
            min_gap: c.min_gap,
        };
        if let Some(prev) = environments.insert((ZetaKey(c.key.zeta), c.key.seed), meta) {
            if prev.hash != c.env_hash {
                return Err(Error::MismatchedInstance(format!(
                    "ablations at zeta={} seed={} saw different environments",
                    c.key.zeta, c.key.seed
                )));
            }
        }
    }

    let summary = summarize_cells(cfg, &cells, gamma_scale);
    let metadata = SweepMetadata {
        schema_version: METADATA_SCHEMA_VERSION.to_string(),
        library_version: env!("CARGO_PKG_VERSION").to_string(),
        config: ExperimentConfig {
            gamma_scale: Some(gamma_scale),
            workers: Some(workers),
            ..cfg.clone()
        },
        gamma_scale,
        calibration,
        workers,
        environments: environments.into_values().collect(),
        cells: cells
            .iter()
            .map(|c| CellMeta {
                zeta: c.key.zeta,
                ablation: c.key.ablation,
                seed: c.key.seed,
                final_regret: c.final_regret(),
                wall_s: c.wall_s,
            })
            .collect(),
        skipped,
        sweep_wall_s: started.elapsed().as_secs_f64(),
    };
    Ok(SweepOutcome {
        cells,
        summary,
        metadata,
    })
}

/// One summary row per `(zeta, ablation)` in the grid, including cells whose
/// every seed was skipped (`n_seeds = 0`).
fn summarize_cells(cfg: &ExperimentConfig, cells: &[CellResult], gamma_scale: f64) -> RunSummary {
    let mut finals = FinalRegrets::new();
    let mut walls: BTreeMap<(ZetaKey, Ablation), Vec<f64>> = BTreeMap::new();
    for c in cells {
        let key = (ZetaKey(c.key.zeta), c.key.ablation);
        finals.entry(key).or_default().insert(c.key.seed, c.final_regret());
        walls.entry(key).or_default().push(c.wall_s);
    }
    let computed = aggregate(&finals);
    let mut rows = Vec::new();
    for &zeta in &cfg.zeta_grid {
        for ablation in cfg.sorted_ablations() {
            let mut row = computed.row(zeta, ablation).cloned().unwrap_or(SummaryRow {
                zeta,
                ablation,
                n_seeds: 0,
                mean_final_regret: f64::NAN,
                std_final_regret: f64::NAN,
                mean_wall_s: None,
                gamma_scale: None,
            });
            if let Some(w) = walls.get(&(ZetaKey(zeta), ablation)) {
                row.mean_wall_s = Some(w.iter().sum::<f64>() / w.len() as f64);
            }
            row.gamma_scale = Some(gamma_scale);
            rows.push(row);
        }
    }
    RunSummary { rows }
}

/// Paths written by [`write_outputs`].
#[derive(Debug, Clone)]
pub struct OutputPaths {
    pub episodes: PathBuf,
    pub summary: PathBuf,
    pub metadata: PathBuf,
    pub env_dir: PathBuf,
}

impl OutputPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self {
            episodes: dir.join(EPISODES_FILE),
            summary: dir.join(SUMMARY_FILE),
            metadata: dir.join(METADATA_FILE),
            env_dir: dir.join(ENV_DIR),
        }
    }
}

pub fn env_file_name(zeta: f64, seed: usize) -> String {
    format!("env_zeta{zeta}_seed{seed}.json")
}

pub fn write_outputs(outcome: &SweepOutcome, dir: &Path) -> Result<OutputPaths> {
    let paths = OutputPaths::in_dir(dir);
    fs::create_dir_all(&paths.env_dir)?;
    write_episode_csv(
        BufWriter::new(fs::File::create(&paths.episodes)?),
        outcome.metadata.config.dims.horizon,
        &outcome.cells,
    )?;
    outcome
        .summary
        .write_csv(BufWriter::new(fs::File::create(&paths.summary)?))?;
    fs::write(&paths.metadata, serde_json::to_string_pretty(&outcome.metadata)?)?;
    let mut written = std::collections::HashSet::new();
    for c in &outcome.cells {
        let name = env_file_name(c.key.zeta, c.key.seed);
        if written.insert(name.clone()) {
            fs::write(paths.env_dir.join(name), &c.env_json)?;
        }
    }
    Ok(paths)
}

/// [`execute_sweep`] followed by [`write_outputs`] into `cfg.out_dir`.
pub fn run_sweep(cfg: &ExperimentConfig) -> Result<SweepOutcome> {
    let outcome = execute_sweep(cfg)?;
    write_outputs(&outcome, &cfg.out_dir)?;
    Ok(outcome)
}

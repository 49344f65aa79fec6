use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use cert_lsvi::env::TabularMdp;
use cert_lsvi::harness::records::ZetaKey;
use cert_lsvi::harness::sweep::{SweepMetadata, METADATA_FILE};
use cert_lsvi::harness::{run_sweep, summarize, Ablation, ExperimentConfig, RunSummary};
use cert_lsvi::oracle::solve_optimal;
use cert_lsvi::Result;

#[derive(Parser)]
#[command(name = "certlsvi", version, about = "Cert-LSVI-UCB misspecification sweeps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a sweep over zeta x seeds x ablations.
    Sweep(SweepArgs),
    /// Aggregate a per-episode CSV into a summary CSV.
    Summarize {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print optimal values and the minimal gap of an environment file.
    Solve {
        #[arg(long)]
        env: PathBuf,
    },
}

#[derive(clap::Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    /// Comma-separated misspecification levels.
    #[arg(long, value_delimiter = ',')]
    zeta: Option<Vec<f64>>,
    #[arg(long)]
    episodes: Option<usize>,
    #[arg(long)]
    seeds: Option<usize>,
    /// Keep only ablations without the certified estimator.
    #[arg(long)]
    no_cert: bool,
    /// Keep only ablations without quantization.
    #[arg(long)]
    no_quant: bool,
    #[arg(long)]
    gamma_scale: Option<f64>,
    #[arg(long)]
    delta: Option<f64>,
    #[arg(long)]
    base_seed: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

impl SweepArgs {
    fn resolve(self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::from_json(&std::fs::read_to_string(path)?)?,
            None => ExperimentConfig::default(),
        };
        if let Some(z) = self.zeta {
            cfg.zeta_grid = z;
        }
        if let Some(k) = self.episodes {
            cfg.episodes = k;
        }
        if let Some(n) = self.seeds {
            cfg.seeds = n;
        }
        if self.no_cert {
            cfg.ablations.retain(|a| !a.certification());
            if cfg.ablations.is_empty() {
                cfg.ablations = vec![Ablation::NocertQuant, Ablation::NocertNoquant];
            }
        }
        if self.no_quant {
            cfg.ablations.retain(|a| !a.quantization());
            if cfg.ablations.is_empty() {
                cfg.ablations = vec![Ablation::from_flags(!self.no_cert, false)];
            }
        }
        if self.gamma_scale.is_some() {
            cfg.gamma_scale = self.gamma_scale;
        }
        if let Some(d) = self.delta {
            cfg.delta = d;
        }
        if let Some(s) = self.base_seed {
            cfg.base_seed = s;
        }
        if self.workers.is_some() {
            cfg.workers = self.workers;
        }
        if let Some(out) = self.out {
            cfg.out_dir = out;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Fills wall time and gamma scale from a `metadata.json` next to the input.
fn attach_metadata(summary: &mut RunSummary, input: &Path) {
    let meta_path = input.with_file_name(METADATA_FILE);
    let Ok(text) = std::fs::read_to_string(&meta_path) else {
        return;
    };
    let Ok(meta) = serde_json::from_str::<SweepMetadata>(&text) else {
        log::warn!("ignoring unreadable {}", meta_path.display());
        return;
    };
    let mut walls: BTreeMap<(ZetaKey, Ablation), Vec<f64>> = BTreeMap::new();
    for c in &meta.cells {
        walls.entry((ZetaKey(c.zeta), c.ablation)).or_default().push(c.wall_s);
    }
    for row in &mut summary.rows {
        row.gamma_scale = Some(meta.gamma_scale);
        if let Some(w) = walls.get(&(ZetaKey(row.zeta), row.ablation)) {
            row.mean_wall_s = Some(w.iter().sum::<f64>() / w.len() as f64);
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Sweep(args) => {
            let cfg = args.resolve()?;
            let outcome = run_sweep(&cfg)?;
            println!(
                "gamma_scale={} cells={} skipped={} out={}",
                outcome.metadata.gamma_scale,
                outcome.cells.len(),
                outcome.metadata.skipped.len(),
                cfg.out_dir.display()
            );
            for row in &outcome.summary.rows {
                println!(
                    "zeta={:<5} {:<15} regret {:>9.2} +/- {:>8.2} (n={})",
                    row.zeta, row.ablation, row.mean_final_regret, row.std_final_regret, row.n_seeds
                );
            }
            Ok(if outcome.has_failures() {
                ExitCode::FAILURE
            } else {
                ExitCode::SUCCESS
            })
        }
        Command::Summarize { input, out } => {
            let mut summary = summarize(&input)?;
            attach_metadata(&mut summary, &input);
            summary.write_csv(std::io::BufWriter::new(std::fs::File::create(&out)?))?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Solve { env } => {
            let mdp = TabularMdp::from_json(&std::fs::read_to_string(&env)?)?;
            let sol = solve_optimal(&mdp);
            for (h, row) in sol.v_star.iter().enumerate() {
                let values: Vec<String> = row.iter().map(|v| v.to_string()).collect();
                println!("V*_{}: {}", h + 1, values.join(" "));
            }
            println!("min_gap: {}", sol.min_gap);
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(2)
        }
    }
}

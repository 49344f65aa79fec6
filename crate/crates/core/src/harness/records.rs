//! Per-episode and summary CSV files.
//!
//! Floats are written with Rust's shortest round-trip formatting, so reading
//! a file back yields bit-identical values.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::cell::CellResult;
use super::config::Ablation;
use crate::error::{Error, Result};

pub const EPISODE_SCHEMA_VERSION: &str = "episodes_v1";
pub const SUMMARY_SCHEMA_VERSION: &str = "summary_v1";

pub const SUMMARY_HEADER: [&str; 8] = [
    "schema_version",
    "zeta",
    "ablation",
    "n_seeds",
    "mean_final_regret",
    "std_final_regret",
    "mean_wall_s",
    "gamma_scale",
];

pub fn episode_header(horizon: usize) -> Vec<String> {
    let mut cols: Vec<String> = [
        "schema_version",
        "zeta",
        "ablation",
        "seed",
        "episode",
        "instant_regret",
        "cum_regret",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    cols.extend((1..=horizon).map(|h| format!("stop_phase_h{h}")));
    cols.extend((1..=horizon).map(|h| format!("certified_h{h}")));
    cols
}

/// Total order on `zeta` values for grouping.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZetaKey(pub f64);

impl Eq for ZetaKey {}

impl PartialOrd for ZetaKey {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for ZetaKey {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeRow {
    pub zeta: f64,
    pub ablation: Ablation,
    pub seed: usize,
    pub episode: usize,
    pub instant_regret: f64,
    pub cum_regret: f64,
    pub stop_phases: Vec<u32>,
    pub certified: Vec<bool>,
}

/// Writes all cells (already in output order) as one per-episode CSV.
pub fn write_episode_csv<W: Write>(out: W, horizon: usize, cells: &[CellResult]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(episode_header(horizon))?;
    let mut fields: Vec<String> = Vec::with_capacity(7 + 2 * horizon);
    for cell in cells {
        let rows = &cell.rows;
        for k in 0..rows.cum_regret.len() {
            fields.clear();
            fields.push(EPISODE_SCHEMA_VERSION.to_string());
            fields.push(cell.key.zeta.to_string());
            fields.push(cell.key.ablation.label().to_string());
            fields.push(cell.key.seed.to_string());
            fields.push((k + 1).to_string());
            fields.push(rows.instant_regret[k].to_string());
            fields.push(rows.cum_regret[k].to_string());
            let stage = k * horizon..(k + 1) * horizon;
            fields.extend(rows.stop_phases[stage.clone()].iter().map(|p| p.to_string()));
            fields.extend(rows.certified[stage].iter().map(|&c| u8::from(c).to_string()));
            w.write_record(&fields)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn parse<T: std::str::FromStr>(field: &str, what: &str, line: u64) -> Result<T> {
    field
        .parse()
        .map_err(|_| Error::Schema(format!("line {line}: cannot parse {what} from {field:?}")))
}

pub fn read_episode_csv<R: Read>(input: R) -> Result<Vec<EpisodeRow>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_string).collect();
    if header.len() < 9 || !(header.len() - 7).is_multiple_of(2) {
        return Err(Error::Schema(format!("unexpected episode header {header:?}")));
    }
    let horizon = (header.len() - 7) / 2;
    if header != episode_header(horizon) {
        return Err(Error::Schema(format!("unexpected episode header {header:?}")));
    }
    let mut rows = Vec::new();
    for result in rdr.records() {
        let rec = result.map_err(|e| Error::Schema(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() != header.len() {
            return Err(Error::Schema(format!("line {line}: expected {} fields", header.len())));
        }
        if &rec[0] != EPISODE_SCHEMA_VERSION {
            return Err(Error::Schema(format!("line {line}: schema {:?}", &rec[0])));
        }
        let stop_phases = (0..horizon)
            .map(|h| parse(&rec[7 + h], "stop phase", line))
            .collect::<Result<Vec<u32>>>()?;
        let certified = (0..horizon)
            .map(|h| match &rec[7 + horizon + h] {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::Schema(format!("line {line}: bad certified flag {other:?}"))),
            })
            .collect::<Result<Vec<bool>>>()?;
        let ablation: Ablation = rec[2]
            .parse()
            .map_err(|_| Error::Schema(format!("line {line}: unknown ablation {:?}", &rec[2])))?;
        rows.push(EpisodeRow {
            zeta: parse(&rec[1], "zeta", line)?,
            ablation,
            seed: parse(&rec[3], "seed", line)?,
            episode: parse(&rec[4], "episode", line)?,
            instant_regret: parse(&rec[5], "instant_regret", line)?,
            cum_regret: parse(&rec[6], "cum_regret", line)?,
            stop_phases,
            certified,
        });
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub zeta: f64,
    pub ablation: Ablation,
    pub n_seeds: usize,
    pub mean_final_regret: f64,
    pub std_final_regret: f64,
    pub mean_wall_s: Option<f64>,
    pub gamma_scale: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunSummary {
    pub rows: Vec<SummaryRow>,
}

impl RunSummary {
    pub fn row(&self, zeta: f64, ablation: Ablation) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.zeta == zeta && r.ablation == ablation)
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(SUMMARY_HEADER)?;
        let opt = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for r in &self.rows {
            w.write_record([
                SUMMARY_SCHEMA_VERSION.to_string(),
                r.zeta.to_string(),
                r.ablation.label().to_string(),
                r.n_seeds.to_string(),
                r.mean_final_regret.to_string(),
                r.std_final_regret.to_string(),
                opt(r.mean_wall_s),
                opt(r.gamma_scale),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut rdr = csv::Reader::from_reader(input);
        if rdr.headers()?.iter().ne(SUMMARY_HEADER) {
            return Err(Error::Schema("unexpected summary header".into()));
        }
        let mut rows = Vec::new();
        for result in rdr.records() {
            let rec = result.map_err(|e| Error::Schema(e.to_string()))?;
            let line = rec.position().map_or(0, |p| p.line());
            if &rec[0] != SUMMARY_SCHEMA_VERSION {
                return Err(Error::Schema(format!("line {line}: schema {:?}", &rec[0])));
            }
            let opt = |s: &str, what: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    parse(s, what, line).map(Some)
                }
            };
            rows.push(SummaryRow {
                zeta: parse(&rec[1], "zeta", line)?,
                ablation: rec[2].parse()?,
                n_seeds: parse(&rec[3], "n_seeds", line)?,
                mean_final_regret: parse(&rec[4], "mean", line)?,
                std_final_regret: parse(&rec[5], "std", line)?,
                mean_wall_s: opt(&rec[6], "mean_wall_s")?,
                gamma_scale: opt(&rec[7], "gamma_scale")?,
            });
        }
        Ok(Self { rows })
    }
}

/// Sample mean and sample standard deviation (`n - 1` denominator; zero for
/// a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (mean, (ss / (n - 1) as f64).sqrt())
}

/// Final cumulative regret per `(zeta, ablation)`, ordered by seed.
pub type FinalRegrets = BTreeMap<(ZetaKey, Ablation), BTreeMap<usize, f64>>;

pub fn final_regrets(rows: &[EpisodeRow]) -> FinalRegrets {
    let mut last: BTreeMap<(ZetaKey, Ablation, usize), (usize, f64)> = BTreeMap::new();
    for r in rows {
        let entry = last.entry((ZetaKey(r.zeta), r.ablation, r.seed)).or_insert((0, 0.0));
        if r.episode >= entry.0 {
            *entry = (r.episode, r.cum_regret);
        }
    }
    let mut out = FinalRegrets::new();
    for ((z, a, seed), (_, regret)) in last {
        out.entry((z, a)).or_default().insert(seed, regret);
    }
    out
}

/// Mean/std of final regret per `(zeta, ablation)`; extras are left empty.
pub fn aggregate(finals: &FinalRegrets) -> RunSummary {
    let rows = finals
        .iter()
        .map(|(&(zeta, ablation), by_seed)| {
            let values: Vec<f64> = by_seed.values().copied().collect();
            let (mean, std) = mean_std(&values);
            SummaryRow {
                zeta: zeta.0,
                ablation,
                n_seeds: values.len(),
                mean_final_regret: mean,
                std_final_regret: std,
                mean_wall_s: None,
                gamma_scale: None,
            }
        })
        .collect();
    RunSummary { rows }
}

pub fn summarize_rows(rows: &[EpisodeRow]) -> RunSummary {
    aggregate(&final_regrets(rows))
}

/// Reads a per-episode CSV and aggregates it.
pub fn summarize(path: &Path) -> Result<RunSummary> {
    let file = std::fs::File::open(path)?;
    let rows = read_episode_csv(std::io::BufReader::new(file))?;
    Ok(summarize_rows(&rows))
}

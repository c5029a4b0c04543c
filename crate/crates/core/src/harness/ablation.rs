use std::path::Path;

use serde::Serialize;

use super::artifacts::{read_csv, write_csv, ArtifactEntry, CsvMeta, Manifest};
use super::run::{run_dir, train_run};
use super::{find_variant, resolve, Config, HarnessError};

/// Outcome of one (variant, seed) cell, read back from its log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CellResult {
    pub variant: String,
    pub seed: u64,
    pub final_sr: Option<f64>,
    pub final_spl: Option<f64>,
    /// Only supervised logs record navigation error.
    pub final_ne: Option<f64>,
    pub last_step: Option<u64>,
    /// First evaluation step whose SR reaches the comparator's final mean SR.
    pub steps_to_threshold: Option<u64>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SummaryRow {
    pub variant: String,
    pub comparator: String,
    pub runs: usize,
    pub failures: usize,
    pub final_sr_mean: Option<f64>,
    pub final_sr_std: Option<f64>,
    pub final_spl_mean: Option<f64>,
    pub final_spl_std: Option<f64>,
    pub final_ne_mean: Option<f64>,
    pub final_ne_std: Option<f64>,
    pub threshold: Option<f64>,
    pub steps_to_threshold_mean: Option<f64>,
    pub steps_to_threshold_std: Option<f64>,
    /// Cells that reached the threshold.
    pub reached: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationSummary {
    pub rows: Vec<SummaryRow>,
    pub cells: Vec<CellResult>,
}

impl AblationSummary {
    pub fn row(&self, variant: &str) -> Option<&SummaryRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }

    pub fn cell(&self, variant: &str, seed: u64) -> Option<&CellResult> {
        self.cells.iter().find(|c| c.variant == variant && c.seed == seed)
    }
}

pub const SUMMARY_HEADER: [&str; 14] = [
    "variant",
    "comparator",
    "runs",
    "failures",
    "final_sr_mean",
    "final_sr_std",
    "final_spl_mean",
    "final_spl_std",
    "final_ne_mean",
    "final_ne_std",
    "threshold",
    "steps_to_threshold_mean",
    "steps_to_threshold_std",
    "reached",
];

pub const CELLS_HEADER: [&str; 8] =
    ["variant", "seed", "final_sr", "final_spl", "final_ne", "last_step", "steps_to_threshold", "error"];

/// Population mean and standard deviation; `None` for no values.
pub(crate) fn mean_std(xs: &[f64]) -> Option<(f64, f64)> {
    if xs.is_empty() {
        return None;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

fn column(header: &[String], name: &str, path: &Path) -> Result<usize, HarnessError> {
    header
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| HarnessError::Csv { path: path.display().to_string(), msg: format!("no {name} column") })
}

fn parse<T: std::str::FromStr>(s: &str, path: &Path) -> Result<T, HarnessError> {
    s.parse().map_err(|_| HarnessError::Csv { path: path.display().to_string(), msg: format!("bad number {s:?}") })
}

/// Log row as (step, sr, spl, ne).
type LogRow = (u64, f64, f64, Option<f64>);

fn read_log(path: &Path) -> Result<Vec<LogRow>, HarnessError> {
    let (_, header, rows) = read_csv(path)?;
    let (step, sr, spl) = (column(&header, "step", path)?, column(&header, "sr", path)?, column(&header, "spl", path)?);
    let ne = header.iter().position(|h| h == "ne");
    rows.iter()
        .map(|r| {
            let ne = match ne.map(|i| r[i].as_str()) {
                Some(s) if !s.is_empty() => Some(parse(s, path)?),
                _ => None,
            };
            Ok((parse(&r[step], path)?, parse(&r[sr], path)?, parse(&r[spl], path)?, ne))
        })
        .collect()
}

/// (step, SR) pairs of a run log.
pub fn read_sr_series(path: &Path) -> Result<Vec<(u64, f64)>, HarnessError> {
    Ok(read_log(path)?.into_iter().map(|(s, sr, _, _)| (s, sr)).collect())
}

/// A cell is done when its log and final checkpoint exist under the same
/// config hash and seed.
fn completed(dir: &Path, hash: &str, seed: u64) -> bool {
    dir.join("final.json").exists()
        && read_csv(&dir.join("train.csv")).is_ok_and(|(m, _, _)| m.config_hash == hash && m.seed == Some(seed))
}

fn fmt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Trains every (variant, seed) cell not already complete under `out`,
/// then summarizes the logs. A failing cell is recorded and the rest
/// continue.
pub fn run_ablation(
    base: &Config,
    variants: &[String],
    seeds: &[u64],
    out: &Path,
) -> Result<AblationSummary, HarnessError> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(HarnessError::Config("an ablation needs at least one variant and one seed".into()));
    }
    for v in variants {
        find_variant(v)?;
    }
    std::fs::create_dir_all(out)?;
    let mut errors = std::collections::BTreeMap::new();
    for v in variants {
        let (cfg, _, _) = resolve(base, Some(v))?;
        let hash = cfg.hash();
        for &seed in seeds {
            if completed(&run_dir(out, v, seed), &hash, seed) {
                log::info!("{v} seed {seed}: already complete");
                continue;
            }
            log::info!("{v} seed {seed}: training");
            if let Err(e) = train_run(base, Some(v), seed, out) {
                log::warn!("{v} seed {seed} failed: {e}");
                errors.insert((v.clone(), seed), e.to_string());
            }
        }
    }
    let summary = summarize(out, variants, seeds, &errors)?;
    let meta = CsvMeta { config_hash: base.hash(), seed: None };
    let rows: Vec<Vec<String>> = summary
        .rows
        .iter()
        .map(|r| {
            vec![
                r.variant.clone(),
                r.comparator.clone(),
                r.runs.to_string(),
                r.failures.to_string(),
                fmt(r.final_sr_mean),
                fmt(r.final_sr_std),
                fmt(r.final_spl_mean),
                fmt(r.final_spl_std),
                fmt(r.final_ne_mean),
                fmt(r.final_ne_std),
                fmt(r.threshold),
                fmt(r.steps_to_threshold_mean),
                fmt(r.steps_to_threshold_std),
                r.reached.to_string(),
            ]
        })
        .collect();
    write_csv(&out.join("summary.csv"), &meta, &SUMMARY_HEADER, &rows)?;
    let cells: Vec<Vec<String>> = summary
        .cells
        .iter()
        .map(|c| {
            vec![
                c.variant.clone(),
                c.seed.to_string(),
                fmt(c.final_sr),
                fmt(c.final_spl),
                fmt(c.final_ne),
                c.last_step.map(|s| s.to_string()).unwrap_or_default(),
                c.steps_to_threshold.map(|s| s.to_string()).unwrap_or_default(),
                c.error.clone().unwrap_or_default(),
            ]
        })
        .collect();
    write_csv(&out.join("cells.csv"), &meta, &CELLS_HEADER, &cells)?;
    let entry =
        |kind: &str| ArtifactEntry { kind: kind.into(), variant: "ablation".into(), seed: None, config_hash: base.hash() };
    Manifest::record(
        out,
        vec![("summary.csv".into(), entry("ablation-summary")), ("cells.csv".into(), entry("ablation-cells"))],
    )?;
    Ok(summary)
}

fn summarize(
    out: &Path,
    variants: &[String],
    seeds: &[u64],
    errors: &std::collections::BTreeMap<(String, u64), String>,
) -> Result<AblationSummary, HarnessError> {
    let mut cells = Vec::new();
    let mut logs = Vec::new();
    for v in variants {
        for &seed in seeds {
            let path = run_dir(out, v, seed).join("train.csv");
            let err = errors.get(&(v.clone(), seed)).cloned();
            let log = if err.is_none() { Some(read_log(&path)?) } else { None };
            let last = log.as_ref().and_then(|l| l.last().copied());
            cells.push(CellResult {
                variant: v.clone(),
                seed,
                final_sr: last.map(|r| r.1),
                final_spl: last.map(|r| r.2),
                final_ne: last.and_then(|r| r.3),
                last_step: last.map(|r| r.0),
                steps_to_threshold: None,
                error: err,
            });
            logs.push(log);
        }
    }
    let final_srs = |v: &str| -> Vec<f64> { cells.iter().filter(|c| c.variant == v).filter_map(|c| c.final_sr).collect() };
    let mut thresholds = Vec::new();
    for v in variants {
        let comparator = find_variant(v)?.comparator.filter(|c| variants.iter().any(|x| x == c)).unwrap_or(v);
        thresholds.push((comparator.to_string(), mean_std(&final_srs(comparator)).map(|m| m.0)));
    }
    for (i, (cell, log)) in cells.iter_mut().zip(&logs).enumerate() {
        let threshold = thresholds[i / seeds.len()].1;
        if let (Some(t), Some(log)) = (threshold, log) {
            cell.steps_to_threshold = log.iter().find(|r| r.1 >= t).map(|r| r.0);
        }
    }
    let rows = variants
        .iter()
        .zip(&thresholds)
        .map(|(v, (comparator, threshold))| {
            let mine: Vec<&CellResult> = cells.iter().filter(|c| &c.variant == v).collect();
            let ok: Vec<&CellResult> = mine.iter().copied().filter(|c| c.error.is_none()).collect();
            let stat = |f: &dyn Fn(&CellResult) -> Option<f64>| mean_std(&ok.iter().filter_map(|c| f(c)).collect::<Vec<_>>());
            let sr = stat(&|c| c.final_sr);
            let spl = stat(&|c| c.final_spl);
            let ne = stat(&|c| c.final_ne);
            let steps = stat(&|c| c.steps_to_threshold.map(|s| s as f64));
            SummaryRow {
                variant: v.clone(),
                comparator: comparator.clone(),
                runs: ok.len(),
                failures: mine.len() - ok.len(),
                final_sr_mean: sr.map(|m| m.0),
                final_sr_std: sr.map(|m| m.1),
                final_spl_mean: spl.map(|m| m.0),
                final_spl_std: spl.map(|m| m.1),
                final_ne_mean: ne.map(|m| m.0),
                final_ne_std: ne.map(|m| m.1),
                threshold: *threshold,
                steps_to_threshold_mean: steps.map(|m| m.0),
                steps_to_threshold_std: steps.map(|m| m.1),
                reached: ok.iter().filter(|c| c.steps_to_threshold.is_some()).count(),
            }
        })
        .collect();
    Ok(AblationSummary { rows, cells })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CurvePoint {
    pub step: u64,
    pub mean_sr: f64,
    pub std_sr: f64,
}

/// Cross-run mean and population std of SR at every evaluation step, after
/// a trailing moving average of `window` evaluations within each run. All
/// runs must share the same evaluation steps.
pub fn emit_learning_curve(logs: &[Vec<(u64, f64)>], window: usize) -> Result<Vec<CurvePoint>, HarnessError> {
    let first = logs.first().ok_or_else(|| HarnessError::Misaligned("no run logs".into()))?;
    if window == 0 {
        return Err(HarnessError::Misaligned("smoothing window must be positive".into()));
    }
    for (i, l) in logs.iter().enumerate() {
        if l.len() != first.len() || l.iter().zip(first).any(|(a, b)| a.0 != b.0) {
            return Err(HarnessError::Misaligned(format!("run {i} evaluates at different steps than run 0")));
        }
    }
    let smoothed: Vec<Vec<f64>> = logs
        .iter()
        .map(|l| {
            (0..l.len())
                .map(|j| {
                    let from = (j + 1).saturating_sub(window);
                    l[from..=j].iter().map(|p| p.1).sum::<f64>() / (j + 1 - from) as f64
                })
                .collect()
        })
        .collect();
    Ok(first
        .iter()
        .enumerate()
        .map(|(j, &(step, _))| {
            let col: Vec<f64> = smoothed.iter().map(|s| s[j]).collect();
            let (mean_sr, std_sr) = mean_std(&col).expect("at least one run");
            CurvePoint { step, mean_sr, std_sr }
        })
        .collect())
}

/// Learning curve of one variant across `seeds`, written to
/// `<out>/<variant>/curve.csv`.
pub fn write_learning_curve(
    base: &Config,
    variant: Option<&str>,
    seeds: &[u64],
    out: &Path,
) -> Result<Vec<CurvePoint>, HarnessError> {
    let (cfg, _, name) = resolve(base, variant)?;
    let logs = seeds
        .iter()
        .map(|&s| read_sr_series(&run_dir(out, &name, s).join("train.csv")))
        .collect::<Result<Vec<_>, _>>()?;
    let curve = emit_learning_curve(&logs, cfg.curve_window)?;
    let rows: Vec<Vec<String>> =
        curve.iter().map(|p| vec![p.step.to_string(), p.mean_sr.to_string(), p.std_sr.to_string()]).collect();
    let hash = cfg.hash();
    let meta = CsvMeta { config_hash: hash.clone(), seed: None };
    write_csv(&out.join(&name).join("curve.csv"), &meta, &["step", "mean_sr", "std_sr"], &rows)?;
    Manifest::record(
        out,
        vec![(format!("{name}/curve.csv"), ArtifactEntry { kind: "curve".into(), variant: name, seed: None, config_hash: hash })],
    )?;
    Ok(curve)
}

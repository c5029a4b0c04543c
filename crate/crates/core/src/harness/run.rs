use std::path::{Path, PathBuf};

use crate::il::{train_supervised, SupervisedRun};
use crate::metrics::MetricsReport;
use crate::model::{Checkpoint, CheckpointManifest, NavModel};
use crate::rl::{evaluate, heldout_tasks, train, Decode, EvalRow, NavEnv, RlError, TrainHooks, TrainingRun};
use numcore::{AdamConfig, ParamStore};

use super::artifacts::{write_csv, ArtifactEntry, CsvMeta, Manifest};
use super::dump::{dump_trajectory, DumpHeader, TrajectoryDump};
use super::{resolve, Config, HarnessError, Track};

/// Columns of a supervised run log; `step` counts epochs from 1.
pub const IL_CSV_HEADER: [&str; 9] = ["step", "episodes", "sr", "spl", "gd", "ne", "osr", "loss_bc", "loss_causal"];

/// Where one (variant, seed) run keeps its files.
pub fn run_dir(out: &Path, variant: &str, seed: u64) -> PathBuf {
    out.join(variant).join(format!("seed-{seed}"))
}

fn rel(variant: &str, seed: u64, file: &str) -> String {
    format!("{variant}/seed-{seed}/{file}")
}

#[derive(Clone, Debug)]
pub struct RunInfo {
    pub variant: String,
    pub track: Track,
    pub seed: u64,
    pub dir: PathBuf,
    pub config: Config,
}

struct EvalHooks {
    tasks: Vec<(std::sync::Arc<crate::env::GridSpec>, crate::env::TaskInstance)>,
    env_cfg: crate::env::EnvConfig,
}

impl TrainHooks for EvalHooks {
    fn evaluate(&mut self, model: &NavModel, store: &ParamStore) -> Result<MetricsReport, RlError> {
        Ok(evaluate(model, store, &self.tasks, &self.env_cfg, Decode::Greedy, None)?.0)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

fn rl_rows(run: &TrainingRun) -> Vec<Vec<String>> {
    run.rows
        .iter()
        .map(|r| {
            vec![
                r.step.to_string(),
                r.episodes.to_string(),
                r.sr.to_string(),
                r.spl.to_string(),
                r.gd.to_string(),
                r.loss_ppo.to_string(),
                r.loss_value.to_string(),
                opt(r.loss_causal),
                r.entropy.to_string(),
                r.lr.to_string(),
            ]
        })
        .collect()
}

fn il_rows(run: &SupervisedRun) -> Vec<Vec<String>> {
    run.rows
        .iter()
        .map(|r| {
            let m = r.report.csv_record();
            let mut row = vec![(r.epoch + 1).to_string()];
            row.extend(m);
            row.push(r.loss_bc.to_string());
            row.push(opt(r.loss_causal));
            row
        })
        .collect()
}

fn save_checkpoint(store: &ParamStore, path: &Path, hash: &str, seed: u64, step: u64, best_sr: f64) -> Result<(), HarnessError> {
    let manifest = CheckpointManifest { config_hash: hash.to_string(), seed, step, best_sr };
    Checkpoint::capture(store, manifest).save(path)?;
    Ok(())
}

/// Trains one (variant, seed) cell and writes its log, best and final
/// checkpoints and resolved config under [`run_dir`].
pub fn train_run(base: &Config, variant: Option<&str>, seed: u64, out: &Path) -> Result<RunInfo, HarnessError> {
    let (cfg, track, name) = resolve(base, variant)?;
    let hash = cfg.hash();
    let dir = run_dir(out, &name, seed);
    std::fs::create_dir_all(&dir)?;
    let meta = CsvMeta { config_hash: hash.clone(), seed: Some(seed) };
    let mut store = ParamStore::new();
    let model = NavModel::new(cfg.model(), seed, &mut store)?;
    // An unweighted prediction head is frozen rather than left to drift.
    if cfg.alpha == 0.0 {
        model.set_causal_trainable(&mut store, false);
    }
    let gen = cfg.generator();
    let env_cfg = cfg.env();
    match track {
        Track::Rl => {
            let ppo = cfg.ppo();
            let envs = (0..ppo.num_envs as u64)
                .map(|i| NavEnv::new(gen.clone(), env_cfg.clone(), super::stream_seed(seed, i + 1)))
                .collect::<Result<Vec<_>, _>>()?;
            let mut hooks = EvalHooks { tasks: heldout_tasks(&gen, cfg.eval_episodes)?, env_cfg };
            let run = train(&model, &mut store, envs, &ppo, super::stream_seed(seed, 0), &mut hooks)?;
            write_csv(&dir.join("train.csv"), &meta, &EvalRow::CSV_HEADER, &rl_rows(&run))?;
            save_checkpoint(&run.best_params, &dir.join("best.json"), &hash, seed, run.best_step, run.best_sr)?;
            save_checkpoint(&store, &dir.join("final.json"), &hash, seed, run.env_steps, run.best_sr)?;
        }
        Track::Il => {
            let adam = AdamConfig { beta1: cfg.adam_beta1, beta2: cfg.adam_beta2, eps: cfg.adam_eps };
            let run = train_supervised(&model, &mut store, &gen, &env_cfg, &cfg.supervised(seed), adam)?;
            write_csv(&dir.join("train.csv"), &meta, &IL_CSV_HEADER, &il_rows(&run))?;
            let best_epoch = run.rows.iter().position(|r| r.report.sr == run.best_sr).unwrap_or(0) as u64 + 1;
            save_checkpoint(&run.best_params, &dir.join("best.json"), &hash, seed, best_epoch, run.best_sr)?;
            save_checkpoint(&store, &dir.join("final.json"), &hash, seed, run.rows.len() as u64, run.best_sr)?;
        }
    }
    std::fs::write(dir.join("config.toml"), cfg.to_toml()?)?;
    let entry = |kind: &str| ArtifactEntry { kind: kind.into(), variant: name.clone(), seed: Some(seed), config_hash: hash.clone() };
    Manifest::record(
        out,
        vec![
            (rel(&name, seed, "train.csv"), entry("train-log")),
            (rel(&name, seed, "best.json"), entry("checkpoint-best")),
            (rel(&name, seed, "final.json"), entry("checkpoint-final")),
            (rel(&name, seed, "config.toml"), entry("config")),
        ],
    )?;
    Ok(RunInfo { variant: name, track, seed, dir, config: cfg })
}

/// Builds the model of a resolved config and loads a checkpoint into it,
/// refusing checkpoints written under another config.
pub fn load_run_model(cfg: &Config, seed: u64, path: &Path) -> Result<(NavModel, ParamStore), HarnessError> {
    let mut store = ParamStore::new();
    let model = NavModel::new(cfg.model(), seed, &mut store)?;
    let ck = Checkpoint::load(path)?;
    if ck.manifest.config_hash != cfg.hash() {
        return Err(HarnessError::HashMismatch {
            path: path.display().to_string(),
            found: ck.manifest.config_hash,
            expected: cfg.hash(),
        });
    }
    ck.restore(&mut store)?;
    Ok((model, store))
}

/// Scores a checkpoint (the run's best by default) on the held-out tasks
/// and writes `eval.csv` next to it.
pub fn eval_run(
    base: &Config,
    variant: Option<&str>,
    seed: u64,
    out: &Path,
    checkpoint: Option<&Path>,
) -> Result<MetricsReport, HarnessError> {
    let (cfg, _, name) = resolve(base, variant)?;
    let dir = run_dir(out, &name, seed);
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| dir.join("best.json"));
    let (model, store) = load_run_model(&cfg, seed, &path)?;
    let tasks = heldout_tasks(&cfg.generator(), cfg.eval_episodes)?;
    let (report, _) = evaluate(&model, &store, &tasks, &cfg.env(), Decode::Greedy, Some(0))?;
    std::fs::create_dir_all(&dir)?;
    let hash = cfg.hash();
    let meta = CsvMeta { config_hash: hash.clone(), seed: Some(seed) };
    write_csv(&dir.join("eval.csv"), &meta, &MetricsReport::CSV_HEADER, &[report.csv_record().to_vec()])?;
    Manifest::record(
        out,
        vec![(rel(&name, seed, "eval.csv"), ArtifactEntry { kind: "eval".into(), variant: name, seed: Some(seed), config_hash: hash })],
    )?;
    Ok(report)
}

/// Greedy episode of a checkpoint on held-out task `task_index`, written as
/// `dump-task<index>.json`.
pub fn dump_run(
    base: &Config,
    variant: Option<&str>,
    seed: u64,
    out: &Path,
    task_index: usize,
    checkpoint: Option<&Path>,
) -> Result<TrajectoryDump, HarnessError> {
    let (cfg, _, name) = resolve(base, variant)?;
    let dir = run_dir(out, &name, seed);
    let path = checkpoint.map(Path::to_path_buf).unwrap_or_else(|| dir.join("best.json"));
    let (model, store) = load_run_model(&cfg, seed, &path)?;
    let mut tasks = heldout_tasks(&cfg.generator(), task_index + 1)?;
    let (grid, task) = tasks.pop().expect("at least one task");
    let hash = cfg.hash();
    let header = DumpHeader { config_hash: hash.clone(), seed, task_index, grid: (*grid).clone(), task };
    let dump = dump_trajectory(&model, &store, header, &cfg.env())?;
    std::fs::create_dir_all(&dir)?;
    let file = format!("dump-task{task_index}.json");
    std::fs::write(dir.join(&file), dump.to_json()?)?;
    Manifest::record(
        out,
        vec![(rel(&name, seed, &file), ArtifactEntry { kind: "dump".into(), variant: name, seed: Some(seed), config_hash: hash })],
    )?;
    Ok(dump)
}

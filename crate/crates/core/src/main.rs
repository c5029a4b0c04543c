use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use catnav::harness::{
    dump_run, eval_run, load_config, run_ablation, train_run, write_learning_curve, Config, ArtifactEntry, Manifest,
};

#[derive(Parser)]
#[command(name = "catnav", about = "Train, evaluate and compare gridworld navigation agents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML config; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run seed; defaults to the config's `seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Named config delta, e.g. cat-full or recurrent+causal.
    #[arg(long)]
    variant: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Train one run.
    Train(Common),
    /// Score a checkpoint on the held-out tasks.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Checkpoint file; defaults to the run's best.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train every (variant, seed) cell and summarize.
    Ablate(Common),
    /// Record a greedy episode as JSON.
    Dump {
        #[command(flatten)]
        common: Common,
        /// Held-out task index.
        #[arg(long, default_value_t = 0)]
        task: usize,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Cross-seed learning curve of finished runs.
    Curve(Common),
}

fn setup(c: &Common) -> Result<(Config, u64)> {
    let cfg = match &c.config {
        Some(p) => load_config(p).with_context(|| format!("loading {}", p.display()))?,
        None => Config::default(),
    };
    std::fs::create_dir_all(&c.out).with_context(|| format!("creating {}", c.out.display()))?;
    let text = cfg.to_toml()?;
    std::fs::write(c.out.join("config.toml"), text)?;
    Manifest::record(
        &c.out,
        vec![(
            "config.toml".into(),
            ArtifactEntry { kind: "base-config".into(), variant: "base".into(), seed: None, config_hash: cfg.hash() },
        )],
    )?;
    let seed = c.seed.unwrap_or(cfg.seed);
    Ok((cfg, seed))
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Train(c) => {
            let (cfg, seed) = setup(&c)?;
            let info = train_run(&cfg, c.variant.as_deref(), seed, &c.out)?;
            println!("wrote {}", info.dir.display());
        }
        Command::Eval { common: c, checkpoint } => {
            let (cfg, seed) = setup(&c)?;
            let r = eval_run(&cfg, c.variant.as_deref(), seed, &c.out, checkpoint.as_deref())?;
            println!("episodes {} sr {:.4} spl {:.4} gd {:.4}", r.episodes, r.sr, r.spl, r.gd);
        }
        Command::Ablate(c) => {
            let (cfg, _) = setup(&c)?;
            let variants = match &c.variant {
                Some(v) => vec![v.clone()],
                None => cfg.variants.clone(),
            };
            let seeds = match c.seed {
                Some(s) => vec![s],
                None => cfg.seeds.clone(),
            };
            let summary = run_ablation(&cfg, &variants, &seeds, &c.out)?;
            for r in &summary.rows {
                println!(
                    "{:<18} runs {} failures {} sr {} spl {}",
                    r.variant,
                    r.runs,
                    r.failures,
                    r.final_sr_mean.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into()),
                    r.final_spl_mean.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into()),
                );
            }
        }
        Command::Dump { common: c, task, checkpoint } => {
            let (cfg, seed) = setup(&c)?;
            let d = dump_run(&cfg, c.variant.as_deref(), seed, &c.out, task, checkpoint.as_deref())?;
            println!("{} steps, success {}", d.steps.len(), d.result.success);
        }
        Command::Curve(c) => {
            let (cfg, _) = setup(&c)?;
            let seeds = match c.seed {
                Some(s) => vec![s],
                None => cfg.seeds.clone(),
            };
            let curve = write_learning_curve(&cfg, c.variant.as_deref(), &seeds, &c.out)?;
            println!("{} points", curve.len());
        }
    }
    Ok(())
}

//! Configuration, seeded runs, ablations, learning curves and trajectory
//! dumps. Every artifact carries the config hash and seed it came from.

mod ablation;
mod artifacts;
mod config;
mod dump;
mod run;

pub use ablation::{
    emit_learning_curve, read_sr_series, run_ablation, write_learning_curve, AblationSummary, CellResult, CurvePoint,
    SummaryRow,
};
pub use artifacts::{read_csv, stream_seed, ArtifactEntry, CsvMeta, CsvTable, Manifest};
pub use config::{config_diff, load_config, Config};
pub use dump::{dump_trajectory, replay_dump, DumpHeader, DumpStep, TrajectoryDump};
pub use run::{dump_run, eval_run, load_run_model, run_dir, train_run, RunInfo};

use crate::env::EnvError;
use crate::il::IlError;
use crate::metrics::MetricsError;
use crate::model::ModelError;
use crate::rl::RlError;

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("config: {0}")]
    Config(String),
    #[error("unknown variant {0:?}")]
    UnknownVariant(String),
    #[error("io: {0}")]
    Io(String),
    #[error("csv {path}: {msg}")]
    Csv { path: String, msg: String },
    #[error("json: {0}")]
    Json(String),
    #[error("learning curves: {0}")]
    Misaligned(String),
    #[error("checkpoint {path} was written by config {found}, expected {expected}")]
    HashMismatch { path: String, found: String, expected: String },
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Rl(#[from] RlError),
    #[error(transparent)]
    Il(#[from] IlError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

impl From<std::io::Error> for HarnessError {
    fn from(e: std::io::Error) -> Self {
        HarnessError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for HarnessError {
    fn from(e: serde_json::Error) -> Self {
        HarnessError::Json(e.to_string())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Track {
    /// PPO on generated tasks.
    Rl,
    /// Behavior cloning on expert demonstrations.
    Il,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DeltaValue {
    Bool(bool),
    Str(&'static str),
}

/// A named set of config overrides. Variants are pure config deltas: the
/// trainers never branch on the variant name.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Variant {
    pub name: &'static str,
    pub track: Track,
    pub deltas: &'static [(&'static str, DeltaValue)],
    /// Variant this one is measured against.
    pub comparator: Option<&'static str>,
    /// Keys allowed to differ from the comparator.
    pub differs_in: &'static [&'static str],
}

use DeltaValue::{Bool, Str};

pub const RL_VARIANTS: [Variant; 5] = [
    Variant {
        name: "baseline-rnn",
        track: Track::Rl,
        deltas: &[("backbone", Str("recurrent")), ("encoder_trainable", Bool(false)), ("causal_module", Bool(false))],
        comparator: None,
        differs_in: &[],
    },
    Variant {
        name: "baseline-rnn-ft",
        track: Track::Rl,
        deltas: &[("backbone", Str("recurrent")), ("encoder_trainable", Bool(true)), ("causal_module", Bool(false))],
        comparator: Some("baseline-rnn"),
        differs_in: &["encoder_trainable"],
    },
    Variant {
        name: "causal-rnn",
        track: Track::Rl,
        deltas: &[("backbone", Str("recurrent")), ("encoder_trainable", Bool(false)), ("causal_module", Bool(true))],
        comparator: Some("baseline-rnn"),
        differs_in: &["causal_module"],
    },
    Variant {
        name: "transformer-only",
        track: Track::Rl,
        deltas: &[("backbone", Str("transformer")), ("encoder_trainable", Bool(false)), ("causal_module", Bool(false))],
        comparator: Some("baseline-rnn"),
        differs_in: &["backbone"],
    },
    Variant {
        name: "cat-full",
        track: Track::Rl,
        deltas: &[("backbone", Str("transformer")), ("encoder_trainable", Bool(true)), ("causal_module", Bool(true))],
        comparator: Some("transformer-only"),
        differs_in: &["causal_module", "encoder_trainable"],
    },
];

pub const IL_VARIANTS: [Variant; 4] = [
    Variant {
        name: "recurrent-baseline",
        track: Track::Il,
        deltas: &[("backbone", Str("recurrent")), ("encoder_trainable", Bool(true)), ("causal_module", Bool(false))],
        comparator: None,
        differs_in: &[],
    },
    Variant {
        name: "recurrent+causal",
        track: Track::Il,
        deltas: &[("backbone", Str("recurrent")), ("encoder_trainable", Bool(true)), ("causal_module", Bool(true))],
        comparator: Some("recurrent-baseline"),
        differs_in: &["causal_module"],
    },
    Variant {
        name: "cat",
        track: Track::Il,
        deltas: &[("backbone", Str("transformer")), ("encoder_trainable", Bool(true)), ("causal_module", Bool(false))],
        comparator: None,
        differs_in: &[],
    },
    Variant {
        name: "cat+causal",
        track: Track::Il,
        deltas: &[("backbone", Str("transformer")), ("encoder_trainable", Bool(true)), ("causal_module", Bool(true))],
        comparator: Some("cat"),
        differs_in: &["causal_module"],
    },
];

pub fn find_variant(name: &str) -> Result<&'static Variant, HarnessError> {
    RL_VARIANTS
        .iter()
        .chain(IL_VARIANTS.iter())
        .find(|v| v.name == name)
        .ok_or_else(|| HarnessError::UnknownVariant(name.to_string()))
}

/// `base` with the variant's overrides applied.
pub fn apply_variant(base: &Config, variant: &Variant) -> Result<Config, HarnessError> {
    let mut t = config::as_table(base)?;
    for (k, v) in variant.deltas {
        let value = match v {
            Bool(b) => toml::Value::Boolean(*b),
            Str(s) => toml::Value::String(s.to_string()),
        };
        t.insert(k.to_string(), value);
    }
    config::from_table(t)
}

/// Resolves an optional variant name; no name means the config as given
/// and the RL track.
pub fn resolve(base: &Config, variant: Option<&str>) -> Result<(Config, Track, String), HarnessError> {
    match variant {
        None => Ok((base.clone(), Track::Rl, "base".to_string())),
        Some(name) => {
            let v = find_variant(name)?;
            Ok((apply_variant(base, v)?, v.track, v.name.to_string()))
        }
    }
}

/// Checks that every variant differs from its comparator in exactly its
/// documented keys, starting from `base`.
pub fn check_variant_diffs(base: &Config) -> Result<(), HarnessError> {
    for v in RL_VARIANTS.iter().chain(IL_VARIANTS.iter()) {
        let Some(c) = v.comparator else { continue };
        let a = apply_variant(base, v)?;
        let b = apply_variant(base, find_variant(c)?)?;
        let diff = config_diff(&a, &b)?;
        let mut expected: Vec<String> = v.differs_in.iter().map(|s| s.to_string()).collect();
        expected.sort();
        if diff != expected {
            return Err(HarnessError::Config(format!("{} differs from {c} in {diff:?}, documented {expected:?}", v.name)));
        }
    }
    Ok(())
}

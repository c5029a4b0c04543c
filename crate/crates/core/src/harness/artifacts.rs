use std::collections::BTreeMap;
use std::path::Path;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::HarnessError;

/// Independent 64-bit seed number `stream` derived from `seed`.
pub fn stream_seed(seed: u64, stream: u64) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.next_u64()
}

/// Provenance line at the top of every CSV artifact.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CsvMeta {
    pub config_hash: String,
    pub seed: Option<u64>,
}

impl CsvMeta {
    fn line(&self) -> String {
        match self.seed {
            Some(s) => format!("# config_hash={} seed={s}\n", self.config_hash),
            None => format!("# config_hash={}\n", self.config_hash),
        }
    }

    fn parse(line: &str) -> Option<CsvMeta> {
        let rest = line.strip_prefix("# ")?;
        let mut hash = None;
        let mut seed = None;
        for kv in rest.split_whitespace() {
            match kv.split_once('=')? {
                ("config_hash", h) => hash = Some(h.to_string()),
                ("seed", s) => seed = Some(s.parse().ok()?),
                _ => return None,
            }
        }
        Some(CsvMeta { config_hash: hash?, seed })
    }
}

pub(crate) fn write_csv(path: &Path, meta: &CsvMeta, header: &[&str], rows: &[Vec<String>]) -> Result<(), HarnessError> {
    let err = |e: csv::Error| HarnessError::Csv { path: path.display().to_string(), msg: e.to_string() };
    let mut buf = meta.line().into_bytes();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        w.write_record(header).map_err(err)?;
        for r in rows {
            w.write_record(r).map_err(err)?;
        }
        w.flush()?;
    }
    std::fs::write(path, buf)?;
    Ok(())
}

/// Provenance, header and records of a CSV artifact.
pub type CsvTable = (CsvMeta, Vec<String>, Vec<Vec<String>>);

/// Reads a CSV artifact.
pub fn read_csv(path: &Path) -> Result<CsvTable, HarnessError> {
    let text = std::fs::read_to_string(path).map_err(|e| HarnessError::Io(format!("reading {}: {e}", path.display())))?;
    let bad = |msg: String| HarnessError::Csv { path: path.display().to_string(), msg };
    let first = text.lines().next().unwrap_or_default();
    let meta = CsvMeta::parse(first).ok_or_else(|| bad("missing provenance line".into()))?;
    let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| bad(e.to_string()))?.iter().map(String::from).collect();
    let mut rows = Vec::new();
    for rec in r.records() {
        rows.push(rec.map_err(|e| bad(e.to_string()))?.iter().map(String::from).collect());
    }
    Ok((meta, header, rows))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactEntry {
    pub kind: String,
    pub variant: String,
    pub seed: Option<u64>,
    pub config_hash: String,
}

/// Index of every artifact under an output directory, keyed by relative
/// path.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub artifacts: BTreeMap<String, ArtifactEntry>,
}

impl Manifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load(out: &Path) -> Result<Manifest, HarnessError> {
        let p = out.join(Self::FILE);
        if !p.exists() {
            return Ok(Manifest::default());
        }
        Ok(serde_json::from_str(&std::fs::read_to_string(p)?)?)
    }

    /// Adds or replaces entries and rewrites the manifest.
    pub fn record(out: &Path, entries: Vec<(String, ArtifactEntry)>) -> Result<(), HarnessError> {
        let mut m = Manifest::load(out)?;
        m.artifacts.extend(entries);
        let mut text = serde_json::to_string_pretty(&m)?;
        text.push('\n');
        std::fs::write(out.join(Self::FILE), text)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn meta_round_trip() {
        let m = CsvMeta { config_hash: "ab12".into(), seed: Some(3) };
        assert_eq!(CsvMeta::parse(m.line().trim_end()), Some(m));
        let m = CsvMeta { config_hash: "ab12".into(), seed: None };
        assert_eq!(CsvMeta::parse(m.line().trim_end()), Some(m));
        assert_eq!(CsvMeta::parse("step,sr"), None);
    }

    #[test]
    fn streams_differ() {
        assert_ne!(stream_seed(1, 0), stream_seed(1, 1));
        assert_eq!(stream_seed(7, 3), stream_seed(7, 3));
    }
}

//! Episode scoring: success rate, SPL, goal distance, navigation error and
//! oracle success rate.

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("no episodes to score")]
    Empty,
}

/// Outcome of one evaluation episode. Distances are geodesic cell moves to
/// the task's success region.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub success: bool,
    /// Cell moves taken; rotations are free.
    pub path_length: u32,
    pub shortest_length: u32,
    pub final_distance: u32,
    pub min_distance: u32,
}

fn mean_of(results: &[EpisodeResult], f: impl Fn(&EpisodeResult) -> f64) -> Result<f64, MetricsError> {
    if results.is_empty() {
        return Err(MetricsError::Empty);
    }
    Ok(results.iter().map(f).sum::<f64>() / results.len() as f64)
}

pub fn success_rate(results: &[EpisodeResult]) -> Result<f64, MetricsError> {
    mean_of(results, |r| if r.success { 1.0 } else { 0.0 })
}

/// Mean of `success · l / max(p, l)`.
pub fn spl(results: &[EpisodeResult]) -> Result<f64, MetricsError> {
    mean_of(results, |r| {
        if !r.success {
            return 0.0;
        }
        let denom = r.path_length.max(r.shortest_length);
        if denom == 0 {
            1.0
        } else {
            r.shortest_length as f64 / denom as f64
        }
    })
}

/// Mean final geodesic distance.
pub fn goal_distance(results: &[EpisodeResult]) -> Result<f64, MetricsError> {
    mean_of(results, |r| r.final_distance as f64)
}

/// `(NE, OSR)`: mean final distance, and the fraction of episodes that came
/// within `threshold` of the goal at any point.
pub fn nav_error_osr(results: &[EpisodeResult], threshold: u32) -> Result<(f64, f64), MetricsError> {
    let ne = goal_distance(results)?;
    let osr = mean_of(results, |r| if r.min_distance <= threshold { 1.0 } else { 0.0 })?;
    Ok((ne, osr))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub episodes: usize,
    pub sr: f64,
    pub spl: f64,
    pub gd: f64,
    pub ne: Option<f64>,
    pub osr: Option<f64>,
}

impl MetricsReport {
    /// SR, SPL and GD; NE and OSR too when an OSR threshold is given.
    pub fn from_results(results: &[EpisodeResult], osr_threshold: Option<u32>) -> Result<Self, MetricsError> {
        let (ne, osr) = match osr_threshold {
            Some(t) => {
                let (ne, osr) = nav_error_osr(results, t)?;
                (Some(ne), Some(osr))
            }
            None => (None, None),
        };
        Ok(MetricsReport {
            episodes: results.len(),
            sr: success_rate(results)?,
            spl: spl(results)?,
            gd: goal_distance(results)?,
            ne,
            osr,
        })
    }

    pub const CSV_HEADER: [&'static str; 6] = ["episodes", "sr", "spl", "gd", "ne", "osr"];

    /// Fields in `CSV_HEADER` order, empty for metrics that were not
    /// computed.
    pub fn csv_record(&self) -> [String; 6] {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        [
            self.episodes.to_string(),
            self.sr.to_string(),
            self.spl.to_string(),
            self.gd.to_string(),
            opt(self.ne),
            opt(self.osr),
        ]
    }
}

//! Exact heuristic trajectory distances.
//!
//! All four measures run the full quadratic computation; they double as
//! ground truth for fine-tuning and as ranking oracles, so no pruning or
//! approximation is applied beyond the exact early-break in Hausdorff.

mod matrix;

pub use matrix::{knn_ground_truth, pairwise_matrix, DistanceMatrix};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::traj::{GpsPoint, PointMetric};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MeasureKind {
    Edr,
    Lcss,
    Hausdorff,
    #[serde(rename = "frechet")]
    DiscreteFrechet,
}

impl MeasureKind {
    pub fn name(self) -> &'static str {
        match self {
            MeasureKind::Edr => "edr",
            MeasureKind::Lcss => "lcss",
            MeasureKind::Hausdorff => "hausdorff",
            MeasureKind::DiscreteFrechet => "frechet",
        }
    }

    pub fn uses_threshold(self) -> bool {
        matches!(self, MeasureKind::Edr | MeasureKind::Lcss)
    }
}

impl std::str::FromStr for MeasureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "edr" => Ok(MeasureKind::Edr),
            "lcss" => Ok(MeasureKind::Lcss),
            "hausdorff" => Ok(MeasureKind::Hausdorff),
            "frechet" | "discrete_frechet" => Ok(MeasureKind::DiscreteFrechet),
            other => Err(Error::InvalidArgument(format!("unknown measure `{other}`"))),
        }
    }
}

/// A fully specified distance: kind, match threshold and point metric.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Measure {
    kind: MeasureKind,
    eps: f64,
    metric: PointMetric,
}

impl Measure {
    /// `eps` is the match threshold (meters, or units in planar mode); it is
    /// only consulted by EDR and LCSS and must then be positive.
    pub fn new(kind: MeasureKind, eps: f64, metric: PointMetric) -> Result<Self> {
        if kind.uses_threshold() && !(eps > 0.0 && eps.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "{} needs a positive threshold, got {eps}",
                kind.name()
            )));
        }
        Ok(Measure { kind, eps, metric })
    }

    pub fn kind(&self) -> MeasureKind {
        self.kind
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn metric(&self) -> PointMetric {
        self.metric
    }

    pub fn distance(&self, a: &[GpsPoint], b: &[GpsPoint]) -> Result<f64> {
        match self.kind {
            MeasureKind::Edr => edr(a, b, self.eps, self.metric),
            MeasureKind::Lcss => lcss_distance(a, b, self.eps, self.metric),
            MeasureKind::Hausdorff => hausdorff(a, b, self.metric),
            MeasureKind::DiscreteFrechet => discrete_frechet(a, b, self.metric),
        }
    }
}

fn nonempty(a: &[GpsPoint], b: &[GpsPoint]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        Err(Error::EmptyTrajectory)
    } else {
        Ok(())
    }
}

/// Edit distance on real sequences: substitutions are free when the two
/// points lie within `eps`, every other edit costs 1.
pub fn edr(a: &[GpsPoint], b: &[GpsPoint], eps: f64, metric: PointMetric) -> Result<f64> {
    nonempty(a, b)?;
    let m = b.len();
    let mut prev: Vec<u32> = (0..=m as u32).collect();
    let mut cur = vec![0u32; m + 1];
    for (i, pa) in a.iter().enumerate() {
        cur[0] = i as u32 + 1;
        for (j, pb) in b.iter().enumerate() {
            let sub = u32::from(metric.distance(pa, pb) > eps);
            cur[j + 1] = (prev[j] + sub).min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(f64::from(prev[m]))
}

/// Length of the longest common subsequence where points match within
/// `eps`.
pub fn lcss_length(a: &[GpsPoint], b: &[GpsPoint], eps: f64, metric: PointMetric) -> Result<usize> {
    nonempty(a, b)?;
    let m = b.len();
    let mut prev = vec![0usize; m + 1];
    let mut cur = vec![0usize; m + 1];
    for pa in a {
        for (j, pb) in b.iter().enumerate() {
            cur[j + 1] = if metric.distance(pa, pb) <= eps {
                prev[j] + 1
            } else {
                prev[j + 1].max(cur[j])
            };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

/// `1 - L / min(|a|, |b|)`, so that 0 means one trajectory is fully matched
/// inside the other.
pub fn lcss_distance(a: &[GpsPoint], b: &[GpsPoint], eps: f64, metric: PointMetric) -> Result<f64> {
    let l = lcss_length(a, b, eps, metric)?;
    Ok(1.0 - l as f64 / a.len().min(b.len()) as f64)
}

fn directed_hausdorff(a: &[GpsPoint], b: &[GpsPoint], metric: PointMetric) -> f64 {
    let mut cmax = 0.0f64;
    for pa in a {
        let mut cmin = f64::INFINITY;
        for pb in b {
            let d = metric.distance(pa, pb);
            if d < cmin {
                cmin = d;
                // This point cannot raise the running maximum any more.
                if cmin <= cmax {
                    break;
                }
            }
        }
        cmax = cmax.max(cmin);
    }
    cmax
}

pub fn hausdorff(a: &[GpsPoint], b: &[GpsPoint], metric: PointMetric) -> Result<f64> {
    nonempty(a, b)?;
    Ok(directed_hausdorff(a, b, metric).max(directed_hausdorff(b, a, metric)))
}

/// Discrete Fréchet distance via the coupling recurrence
/// `c(i,j) = max(d(a_i, b_j), min(c(i-1,j), c(i,j-1), c(i-1,j-1)))`.
pub fn discrete_frechet(a: &[GpsPoint], b: &[GpsPoint], metric: PointMetric) -> Result<f64> {
    nonempty(a, b)?;
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m];
    let mut cur = vec![0.0f64; m];
    for (i, pa) in a.iter().enumerate() {
        for (j, pb) in b.iter().enumerate() {
            let d = metric.distance(pa, pb);
            let reach = match (i, j) {
                (0, 0) => 0.0,
                (0, _) => cur[j - 1],
                (_, 0) => prev[0],
                _ => prev[j].min(cur[j - 1]).min(prev[j - 1]),
            };
            cur[j] = d.max(reach);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m - 1])
}

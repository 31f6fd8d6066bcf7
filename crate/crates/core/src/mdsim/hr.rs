use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::neighbors::minimum_image;
use crate::structure::{norm, Structure};

/// Binned distribution of interatomic distances, normalized so that
/// `Σ density · Δr = 1` when every pair lies in range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HrHistogram {
    pub r_max: f64,
    pub n_bins: usize,
    /// Å⁻¹
    pub densities: Vec<f64>,
}

impl HrHistogram {
    pub fn bin_width(&self) -> f64 {
        self.r_max / self.n_bins as f64
    }

    pub fn bin_edges(&self) -> Vec<f64> {
        (0..=self.n_bins).map(|k| k as f64 * self.bin_width()).collect()
    }

    pub fn total_mass(&self) -> f64 {
        self.densities.iter().sum::<f64>() * self.bin_width()
    }
}

pub fn compute_hr(frames: &[Structure], r_max: f64, n_bins: usize) -> Result<HrHistogram> {
    if !(r_max > 0.0) || n_bins == 0 {
        return Err(Error::Histogram(format!("invalid binning r_max={r_max}, n_bins={n_bins}")));
    }
    let n = frames.first().map(|s| s.len()).ok_or_else(|| Error::Histogram("no frames".into()))?;
    if n < 2 {
        return Err(Error::Histogram("need at least two atoms".into()));
    }
    if let Some(s) = frames.iter().find(|s| s.len() != n) {
        return Err(Error::Histogram(format!("frames differ in atom count ({} vs {n})", s.len())));
    }
    let dr = r_max / n_bins as f64;
    let mut counts = vec![0u64; n_bins];
    let mut worst: f64 = 0.0;
    for s in frames {
        for i in 0..n {
            for j in i + 1..n {
                let d = norm(minimum_image(s, i, j));
                worst = worst.max(d);
                if d <= r_max {
                    counts[((d / dr) as usize).min(n_bins - 1)] += 2;
                }
            }
        }
    }
    if worst > r_max {
        return Err(Error::Histogram(format!("pair distance {worst:.4} Å exceeds r_max {r_max} Å")));
    }
    let norm_ = (frames.len() * n * (n - 1)) as f64 * dr;
    Ok(HrHistogram { r_max, n_bins, densities: counts.iter().map(|&c| c as f64 / norm_).collect() })
}

/// `Σ |a − b| · Δr` over bins.
pub fn mae_hr(a: &HrHistogram, b: &HrHistogram) -> Result<f64> {
    if a.n_bins != b.n_bins || a.r_max != b.r_max {
        return Err(Error::Histogram(format!(
            "binning mismatch: ({}, {}) vs ({}, {})",
            a.r_max, a.n_bins, b.r_max, b.n_bins
        )));
    }
    Ok(a.densities.iter().zip(&b.densities).map(|(x, y)| (x - y).abs()).sum::<f64>() * a.bin_width())
}

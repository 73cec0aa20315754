//! Two-mirror quasimode frequencies and the checks that turn them into
//! seeds for [`crate::search::track_family`].
//!
//! The frequency formula carries an `O(1/p)` remainder with no explicit
//! coefficient. It is dropped; track boxes are at least 0.5 wide on each
//! side, which absorbs it for the indices used here.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search::TrackHit;
use crate::sheet::BoundaryCondition;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuasimodeSpec {
    /// Half the distance between the mirrors.
    pub d: f64,
    pub r1: f64,
    pub r2: f64,
    pub q: u32,
}

impl QuasimodeSpec {
    pub fn new(d: f64, r1: f64, r2: f64, q: u32) -> Result<Self> {
        let s = QuasimodeSpec { d, r1, r2, q };
        s.stability()?;
        Ok(s)
    }

    /// `(1 - 2d/r1)(1 - 2d/r2)`, which must lie strictly inside `(0, 1)`.
    pub fn stability(&self) -> Result<f64> {
        if !(self.d > 0.0 && self.d.is_finite()) {
            return Err(Error::InvalidArgument(format!("mirror separation must be positive, got {}", self.d)));
        }
        let g = (1.0 - 2.0 * self.d / self.r1) * (1.0 - 2.0 * self.d / self.r2);
        if !(g > 0.0 && g < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "unstable mirror pair: (1-2d/r1)(1-2d/r2) = {g} is not in (0, 1)"
            )));
        }
        Ok(g)
    }
}

/// Frequency `w_p`; the energy seed is `w_p²`.
pub fn buldyrev_freq(spec: &QuasimodeSpec, p: u32) -> Result<f64> {
    if p == 0 {
        return Err(Error::InvalidArgument("mode index p starts at 1".into()));
    }
    let g = spec.stability()?;
    let phase = g.sqrt().acos();
    Ok((std::f64::consts::PI * p as f64 + (spec.q as f64 + 0.5) * phase) / (2.0 * spec.d))
}

/// `true` for each seed farther than `alpha` from every threshold.
pub fn gap_condition(lambdas: &[f64], alpha: f64, bc: BoundaryCondition) -> Vec<bool> {
    let first = bc.first_mode() as f64;
    lambdas
        .iter()
        .map(|&l| {
            let c = l.max(0.0).sqrt().floor();
            let mut best = f64::INFINITY;
            for n in [c - 1.0, c, c + 1.0, c + 2.0] {
                if n >= first {
                    best = best.min((l - n * n).abs());
                }
            }
            best > alpha
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Seed {
    pub p: u32,
    pub w: f64,
    pub lambda: f64,
    pub gap_ok: bool,
}

/// Seeds for `p` in `pmin..=pmax`, with the gap check at `alpha`.
pub fn seeds(spec: &QuasimodeSpec, pmin: u32, pmax: u32, alpha: f64, bc: BoundaryCondition) -> Result<Vec<Seed>> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidArgument(format!("alpha must be positive, got {alpha}")));
    }
    let ws: Vec<(u32, f64)> = (pmin.max(1)..=pmax)
        .map(|p| buldyrev_freq(spec, p).map(|w| (p, w)))
        .collect::<Result<_>>()?;
    let lambdas: Vec<f64> = ws.iter().map(|(_, w)| w * w).collect();
    let gap = gap_condition(&lambdas, alpha, bc);
    Ok(ws
        .into_iter()
        .zip(lambdas)
        .zip(gap)
        .map(|(((p, w), lambda), gap_ok)| Seed { p, w, lambda, gap_ok })
        .collect())
}

/// Fraction of `p = 1..=pmax` whose seeds pass the gap check.
pub fn gap_pass_fraction(spec: &QuasimodeSpec, pmax: u32, alpha: f64, bc: BoundaryCondition) -> Result<f64> {
    let s = seeds(spec, 1, pmax, alpha, bc)?;
    Ok(s.iter().filter(|x| x.gap_ok).count() as f64 / s.len().max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum DecayReport {
    Fit {
        n_hits: usize,
        slope: f64,
        intercept: f64,
        /// Root-mean-square residual of the log-log fit.
        residual: f64,
        /// `|Im k_j|` strictly decreasing along the hits, in seed order.
        im_decreasing: bool,
    },
    InsufficientData {
        n_hits: usize,
    },
}

impl DecayReport {
    pub fn slope(&self) -> Option<f64> {
        match self {
            DecayReport::Fit { slope, .. } => Some(*slope),
            DecayReport::InsufficientData { .. } => None,
        }
    }
}

/// Least-squares line through `(x, y)`: slope, intercept and rms residual.
pub fn line_fit(x: &[f64], y: &[f64]) -> (f64, f64, f64) {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum();
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rms = (x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum::<f64>() / n).sqrt();
    (slope, intercept, rms)
}

/// Slope of `log|λ_j - k_j|` against `log λ_j` over the hits.
pub fn corollary1_fit(hits: &[TrackHit]) -> DecayReport {
    let mut found: Vec<(f64, f64, f64)> = hits
        .iter()
        .filter_map(|h| h.hit.as_ref().map(|r| (h.seed, (h.seed - r.point.k).norm(), r.point.k.im.abs())))
        .filter(|(s, d, _)| *s > 0.0 && *d > 0.0)
        .collect();
    if found.len() < 4 {
        return DecayReport::InsufficientData { n_hits: found.len() };
    }
    found.sort_by(|a, b| a.0.total_cmp(&b.0));
    let x: Vec<f64> = found.iter().map(|h| h.0.ln()).collect();
    let y: Vec<f64> = found.iter().map(|h| h.1.ln()).collect();
    let (slope, intercept, residual) = line_fit(&x, &y);
    DecayReport::Fit {
        n_hits: found.len(),
        slope,
        intercept,
        residual,
        im_decreasing: found.windows(2).all(|w| w[1].2 < w[0].2),
    }
}

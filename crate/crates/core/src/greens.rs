//! Free strip Green's function as a transverse mode series.
//!
//! On the strip `(0, π)` the series is
//! `Σ_n (1 / (c_n s_n)) e^{-s_n |x - x'|} t_n(y) t_n(y')`
//! with `t_n = cos(n·)` (Neumann) or `sin(n·)` (Dirichlet), `c_0 = π` for the
//! Neumann zero mode and `c_n = 1` otherwise. Each term solves
//! `(-∂x² - ∂y² - k) u = 0` off the source line, and the branch of `s_n`
//! comes from the sheet of the evaluation point.
//!
//! That series is the kernel in its literal normalization. The operator
//! inverse `(-Δ - k)^{-1}` with orthonormal transverse modes is available
//! separately as [`resolvent_kernel`].

use num_complex::Complex64;

use crate::error::Result;
use crate::sheet::{branch_sqrt, BoundaryCondition, SheetPoint};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GreensEval {
    pub value: Complex64,
    /// Bound on the omitted tail, `None` when no valid bound is available
    /// (diagonal, too few terms, or a flipped mode beyond the cutoff).
    pub tail_bound: Option<f64>,
    pub n_terms: u32,
}

fn normalization(bc: BoundaryCondition, n: u32) -> f64 {
    if bc == BoundaryCondition::Neumann && n == 0 {
        std::f64::consts::PI
    } else {
        1.0
    }
}

/// Transverse factor `t_n(y)` of the literal series.
pub fn transverse(bc: BoundaryCondition, n: u32, y: f64) -> f64 {
    match bc {
        BoundaryCondition::Dirichlet => (n as f64 * y).sin(),
        BoundaryCondition::Neumann => (n as f64 * y).cos(),
    }
}

/// Orthonormal transverse mode on `(0, π)`.
pub fn transverse_orthonormal(bc: BoundaryCondition, n: u32, y: f64) -> f64 {
    let pi = std::f64::consts::PI;
    match bc {
        BoundaryCondition::Dirichlet => (2.0 / pi).sqrt() * (n as f64 * y).sin(),
        BoundaryCondition::Neumann if n == 0 => 1.0 / pi.sqrt(),
        BoundaryCondition::Neumann => (2.0 / pi).sqrt() * (n as f64 * y).cos(),
    }
}

/// One longitudinal term `e^{-s_n |x - x'|} / (c_n s_n)`.
pub fn mode_term(p: &SheetPoint, n: u32, x: f64, xp: f64) -> Result<Complex64> {
    let s = branch_sqrt(n, p)?;
    let c = normalization(p.bc, n);
    Ok((-s * (x - xp).abs()).exp() / (s * c))
}

/// Partial sum through `n_max` with a tail bound.
///
/// For `n > n_max` and `n² > 2|k|` on the principal branch,
/// `Re s_n ≥ u_n = sqrt(n² - |k|)`, so with `d = |x - x'| > 0` the tail is at
/// most `Σ_{n > N} e^{-u_n d} / u_n ≤ e^{-u_N d} / (N d)` by comparison with
/// the integral (`u du = t dt`).
pub fn green_eval(p: &SheetPoint, x: f64, y: f64, xp: f64, yp: f64, n_max: u32) -> Result<GreensEval> {
    let first = p.bc.first_mode();
    let mut value = Complex64::new(0.0, 0.0);
    let mut n_terms = 0;
    for n in first..=n_max {
        let t = transverse(p.bc, n, y) * transverse(p.bc, n, yp);
        value += mode_term(p, n, x, xp)? * t;
        n_terms += 1;
    }
    Ok(GreensEval {
        value,
        tail_bound: tail_bound(p, (x - xp).abs(), n_max),
        n_terms,
    })
}

/// The bound described on [`green_eval`]; `None` where it does not apply.
pub fn tail_bound(p: &SheetPoint, d: f64, n_max: u32) -> Option<f64> {
    let kabs = p.k.norm();
    let nn = n_max as f64;
    if !(d > 0.0) || nn * nn <= 2.0 * kabs || n_max == 0 {
        return None;
    }
    if p.lambda.iter().any(|&n| n > n_max) {
        return None;
    }
    let u = (nn * nn - kabs).sqrt();
    Some((-u * d).exp() / (nn * d))
}

/// Resolvent kernel `(-Δ - k)^{-1}` of the free strip with orthonormal
/// transverse modes, `Σ φ_n(y) φ_n(y') e^{-s_n |x - x'|} / (2 s_n)`.
pub fn resolvent_kernel(p: &SheetPoint, x: f64, y: f64, xp: f64, yp: f64, n_max: u32) -> Result<Complex64> {
    let mut value = Complex64::new(0.0, 0.0);
    for n in p.bc.first_mode()..=n_max {
        let s = branch_sqrt(n, p)?;
        let t = transverse_orthonormal(p.bc, n, y) * transverse_orthonormal(p.bc, n, yp);
        value += (-s * (x - xp).abs()).exp() / (s * 2.0) * t;
    }
    Ok(value)
}

//! Grid realization of `h(k) = det(I + (K ρ)³)`.
//!
//! The Laplacian of the perturbed guide is discretized on a uniform grid
//! over `|x| < X_cap` with Dirichlet cap ends. The reference resolvent
//! `R(k0)` is a direct solve on that grid; the free resolvent `R0(k)` in
//! the third term of `K` is the exact strip kernel, so `h` inherits the
//! sheet structure of the surface through the lead roots alone.
//!
//! All cutoffs depend on `x` only. A cutoff that switches at `|x| = X(R)`,
//! `X(R) = sqrt(R² - π²)`, stays inside the ball `B(0, R)` on every point
//! of the strip, which is what the support conditions ask for.

use std::collections::HashMap;
use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{aperture, mode_indices, Geometry, Segment};
use crate::greens::transverse_orthonormal;
use crate::linalg::{log_det, LogComplex, LogProduct, SkylineLu, SparseRows};
use crate::search::{refine_near, Chart, ZeroFn};
use crate::sheet::{branch_sqrt, min_threshold_distance, principal_sqrt, BoundaryCondition, SheetPoint};

type C64 = Complex64;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };

pub const DEFAULT_K0: C64 = C64 { re: 0.0, im: 25.0 };
pub const DEFAULT_GRID_STEP: f64 = 0.05;
/// Smallest `M` used to place cutoffs; below it the transitions get too thin.
pub const M_FLOOR: f64 = 7.5;
/// Default `X_cap - M`.
pub const CAP_MARGIN: f64 = 9.25;
pub const TAU2_WIDTH: f64 = 0.4;
pub const MIN_IM_K0: f64 = 25.0;
pub const CAP_TOLERANCE: f64 = 1e-8;
const FEATURE_NODES: f64 = 8.0;
const TRANSITION_NODES: f64 = 4.0;

/// Quintic smoothstep, `C²` at both ends.
pub fn smoothstep(t: f64) -> f64 {
    let t = t.clamp(0.0, 1.0);
    t * t * t * (10.0 + t * (-15.0 + 6.0 * t))
}

fn chord(r: f64) -> f64 {
    (r * r - PI * PI).max(0.0).sqrt()
}

/// A profile rising from 0 at `|x| = start` to 1 at `|x| = end`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Transition {
    pub start: f64,
    pub end: f64,
}

impl Transition {
    pub fn rise(&self, x: f64) -> f64 {
        smoothstep((x.abs() - self.start) / (self.end - self.start))
    }

    pub fn width(&self) -> f64 {
        self.end - self.start
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CutoffRadii {
    /// Perturbation radius of the geometry.
    pub m: f64,
    /// Radius the cutoffs are built from, `max(m, floor)`.
    pub m_eff: f64,
    /// `χ1` falls here; `χ2 = 1 - χ1`.
    pub chi1: Transition,
    /// `τ1` falls here.
    pub tau1: Transition,
    /// `ρ` falls here.
    pub rho: Transition,
    /// `τ2` rises here.
    pub tau2: Transition,
}

impl CutoffRadii {
    pub fn new(m: f64, floor: f64) -> CutoffRadii {
        let me = m.max(floor);
        CutoffRadii {
            m,
            m_eff: me,
            chi1: Transition { start: me + 1.0, end: chord(me + 2.0) },
            tau1: Transition { start: chord(me + 2.0), end: chord(me + 3.0) },
            rho: Transition { start: me + 3.0, end: chord(me + 4.0) },
            tau2: Transition { start: me, end: me + TAU2_WIDTH },
        }
    }

    pub fn chi1(&self, x: f64) -> f64 {
        1.0 - self.chi1.rise(x)
    }

    pub fn chi2(&self, x: f64) -> f64 {
        1.0 - self.chi1(x)
    }

    pub fn tau1(&self, x: f64) -> f64 {
        1.0 - self.tau1.rise(x)
    }

    pub fn tau2(&self, x: f64) -> f64 {
        self.tau2.rise(x)
    }

    pub fn rho(&self, x: f64) -> f64 {
        1.0 - self.rho.rise(x)
    }

    pub fn narrowest(&self) -> f64 {
        [self.chi1, self.tau1, self.rho, self.tau2]
            .iter()
            .map(|t| t.width())
            .fold(f64::INFINITY, f64::min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridOptions {
    /// Requested step; the grid uses `π / N` with `N` the nearest even integer.
    pub h: f64,
    /// Half-length of the capped domain; `M_eff + CAP_MARGIN` when `None`.
    pub x_cap: Option<f64>,
    pub m_floor: f64,
    /// Enforce the node-count preconditions. Only structural tests turn
    /// this off.
    pub check_resolution: bool,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            h: DEFAULT_GRID_STEP,
            x_cap: None,
            m_floor: M_FLOOR,
            check_resolution: true,
        }
    }
}

/// Contiguous run of nodes sharing one `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Column {
    pub i: i64,
    pub start: usize,
    pub len: usize,
    pub j0: i64,
}

#[derive(Debug, Clone)]
pub struct GridModel {
    pub bc: BoundaryCondition,
    pub h: f64,
    pub x_cap: f64,
    pub radii: CutoffRadii,
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    /// Cell fraction inside the domain; 1 everywhere for Dirichlet.
    pub weight: Vec<f64>,
    /// Node touches the boundary (missing neighbor or partial cell).
    pub boundary: Vec<bool>,
    pub chi1: Vec<f64>,
    pub chi2: Vec<f64>,
    pub tau1: Vec<f64>,
    pub tau2: Vec<f64>,
    pub rho: Vec<f64>,
    /// Weighted Laplacian `L`; the discrete operator is `W⁻¹ L`.
    pub laplacian: SparseRows,
    pub columns: Vec<Column>,
}

/// Open-interior test for a stepped guide.
struct Shape {
    xs: Vec<f64>,
    pieces: Vec<Segment>,
}

impl Shape {
    fn new(g: &Geometry) -> Shape {
        Shape {
            xs: g.junctions(),
            pieces: g.finite().to_vec(),
        }
    }

    fn piece_at(&self, x: f64) -> Segment {
        let n = self.xs.len();
        if x < self.xs[0] || x > self.xs[n - 1] {
            return Segment::lead();
        }
        let i = self.xs.partition_point(|&b| b <= x).clamp(1, n - 1) - 1;
        self.pieces.get(i).copied().unwrap_or_else(Segment::lead)
    }

    fn inside(&self, x: f64, y: f64) -> bool {
        const EPS: f64 = 1e-12;
        if let Some(k) = self.xs.iter().position(|&b| (b - x).abs() < EPS) {
            let left = if k == 0 { Segment::lead() } else { self.piece_at(self.xs[k] - 1e-9) };
            let right = self.piece_at(self.xs[k] + 1e-9);
            return match aperture(&left, &right) {
                Some((lo, hi)) => y > lo + EPS && y < hi - EPS,
                None => false,
            };
        }
        let s = self.piece_at(x);
        y > s.offset + EPS && y < s.top() - EPS
    }

    /// Narrowest length scale the grid has to resolve.
    fn narrowest(&self) -> f64 {
        let mut m = PI;
        let mut prev = Segment::lead();
        let mut chain: Vec<Segment> = self.pieces.clone();
        chain.push(Segment::lead());
        for s in chain {
            if !s.is_lead() {
                m = m.min(s.length).min(s.width);
            }
            if let Some((lo, hi)) = aperture(&prev, &s) {
                m = m.min(hi - lo);
            }
            for d in [(s.offset - prev.offset).abs(), (s.top() - prev.top()).abs()] {
                if d > 1e-12 {
                    m = m.min(d);
                }
            }
            prev = s;
        }
        m
    }
}

pub fn build_grid(g: &Geometry, h: f64, x_cap: f64) -> Result<GridModel> {
    build_grid_with(
        g,
        &GridOptions {
            h,
            x_cap: Some(x_cap),
            ..GridOptions::default()
        },
    )
}

pub fn build_grid_with(g: &Geometry, opts: &GridOptions) -> Result<GridModel> {
    if !(opts.h > 0.0 && opts.h.is_finite()) {
        return Err(Error::InvalidArgument(format!("grid step must be positive, got {}", opts.h)));
    }
    g.check()?;
    let shape = Shape::new(g);
    let radii = CutoffRadii::new(g.radius, opts.m_floor);
    let mut nn = (PI / opts.h).round().max(2.0) as i64;
    if nn % 2 == 1 {
        nn += 1;
    }
    let h = PI / nn as f64;
    if opts.check_resolution {
        let feature = shape.narrowest();
        if feature / h < FEATURE_NODES - 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "grid step {h:.4} puts fewer than {FEATURE_NODES} nodes across the narrowest feature ({feature:.4})"
            )));
        }
        if radii.narrowest() / h < TRANSITION_NODES - 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "grid step {h:.4} puts fewer than {TRANSITION_NODES} nodes across a cutoff transition ({:.4})",
                radii.narrowest()
            )));
        }
    }
    let want_cap = opts.x_cap.unwrap_or(radii.m_eff + CAP_MARGIN);
    let ic = (want_cap / h).round() as i64;
    let x_cap = ic as f64 * h;
    if x_cap < g.radius + 6.0 - 1e-9 || x_cap <= radii.rho.end + h {
        return Err(Error::InvalidArgument(format!("X_cap = {x_cap} must be at least M + 6 = {}", g.radius + 6.0)));
    }
    let ymin = g.segments.iter().map(|s| s.offset).fold(0.0, f64::min);
    let ymax = g.segments.iter().map(|s| s.top()).fold(PI, f64::max);
    let jlo = (ymin / h).floor() as i64 - 1;
    let jhi = (ymax / h).ceil() as i64 + 1;
    let dirichlet = g.bc == BoundaryCondition::Dirichlet;
    let inside = |x: f64, y: f64| shape.inside(x, y);
    let quarter = |x: f64, y: f64| -> f64 {
        let q = 0.25 * h;
        [(-q, -q), (-q, q), (q, -q), (q, q)]
            .iter()
            .filter(|(a, b)| inside(x + a, y + b))
            .count() as f64
            / 4.0
    };

    let mut index: HashMap<(i64, i64), usize> = HashMap::new();
    let (mut xv, mut yv, mut wv, mut columns) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for i in (1 - ic)..ic {
        let x = i as f64 * h;
        let start = xv.len();
        let mut j0 = None;
        for j in jlo..=jhi {
            let y = j as f64 * h;
            let w = if dirichlet {
                if inside(x, y) {
                    1.0
                } else {
                    0.0
                }
            } else {
                quarter(x, y)
            };
            if w > 0.0 {
                if let Some(first) = j0 {
                    if j - first != (xv.len() - start) as i64 {
                        return Err(Error::InvalidGeometry(format!("column at x = {x} is not connected")));
                    }
                } else {
                    j0 = Some(j);
                }
                index.insert((i, j), xv.len());
                xv.push(x);
                yv.push(y);
                wv.push(w);
            }
        }
        if let Some(j0) = j0 {
            columns.push(Column { i, start, len: xv.len() - start, j0 });
        }
    }
    let n = xv.len();
    let h2 = h * h;
    let mut lap = SparseRows::new(n);
    let mut boundary = vec![false; n];
    let dirs: [(i64, i64); 4] = [(1, 0), (-1, 0), (0, 1), (0, -1)];
    for (&(i, j), &p) in &index {
        let (x, y) = (xv[p], yv[p]);
        if !dirichlet && wv[p] < 1.0 {
            boundary[p] = true;
        }
        if dirichlet {
            lap.add(p, p, C64::new(4.0 / h2, 0.0));
        }
        for (di, dj) in dirs {
            let q = index.get(&(i + di, j + dj)).copied();
            let (mx, my) = (x + 0.5 * h * di as f64, y + 0.5 * h * dj as f64);
            if dirichlet {
                match q {
                    Some(q) if inside(mx, my) => lap.add(p, q, C64::new(-1.0 / h2, 0.0)),
                    _ => boundary[p] = true,
                }
            } else {
                let (ox, oy) = (0.25 * h * dj.abs() as f64, 0.25 * h * di.abs() as f64);
                let c = [inside(mx - ox, my - oy), inside(mx + ox, my + oy)]
                    .iter()
                    .filter(|&&b| b)
                    .count() as f64
                    / 2.0;
                if c == 0.0 {
                    continue;
                }
                let cap = (i + di).abs() >= ic;
                match q {
                    Some(q) => {
                        lap.add(p, p, C64::new(c / h2, 0.0));
                        lap.add(p, q, C64::new(-c / h2, 0.0));
                    }
                    None if cap => {
                        lap.add(p, p, C64::new(c / h2, 0.0));
                        boundary[p] = true;
                    }
                    None => boundary[p] = true,
                }
            }
        }
    }
    let sample = |f: &dyn Fn(f64) -> f64| xv.iter().map(|&x| f(x)).collect::<Vec<f64>>();
    let chi1 = sample(&|x| radii.chi1(x));
    let chi2 = chi1.iter().map(|c| 1.0 - c).collect();
    Ok(GridModel {
        bc: g.bc,
        h,
        x_cap,
        radii,
        tau1: sample(&|x| radii.tau1(x)),
        tau2: sample(&|x| radii.tau2(x)),
        rho: sample(&|x| radii.rho(x)),
        chi1,
        chi2,
        x: xv,
        y: yv,
        weight: wv,
        boundary,
        laplacian: lap,
        columns,
    })
}

impl GridModel {
    pub fn n(&self) -> usize {
        self.x.len()
    }

    /// Discrete operator `W⁻¹ L` applied to `v`.
    pub fn apply_laplacian(&self, v: &[C64]) -> Vec<C64> {
        let mut u = self.laplacian.matvec(v);
        for (ui, w) in u.iter_mut().zip(&self.weight) {
            *ui /= w;
        }
        u
    }

    /// Weighted commutator `C` with `[W⁻¹L, τ] = W⁻¹ C`, `C_ij = L_ij (τ_j - τ_i)`.
    pub fn commutator(&self, tau: &[f64]) -> SparseRows {
        let mut c = SparseRows::new(self.n());
        for (i, row) in self.laplacian.rows.iter().enumerate() {
            for &(j, v) in row {
                let d = tau[j] - tau[i];
                if j != i && d != 0.0 {
                    c.add(i, j, v * d);
                }
            }
        }
        c
    }

    /// Discrete `L²` inner product `Σ h² W conj(a) b`.
    pub fn inner(&self, a: &[C64], b: &[C64]) -> C64 {
        let h2 = self.h * self.h;
        a.iter()
            .zip(b)
            .zip(&self.weight)
            .map(|((u, v), w)| u.conj() * v * (w * h2))
            .sum()
    }

    pub fn norm(&self, a: &[C64]) -> f64 {
        self.inner(a, a).re.max(0.0).sqrt()
    }

    /// Nodes with `v > 0`.
    pub fn support(&self, v: &[f64]) -> Vec<usize> {
        (0..self.n()).filter(|&i| v[i] > 0.0).collect()
    }

    /// Node nearest to `(x, y)`.
    pub fn nearest(&self, x: f64, y: f64) -> usize {
        (0..self.n())
            .min_by(|&a, &b| {
                let da = (self.x[a] - x).powi(2) + (self.y[a] - y).powi(2);
                let db = (self.x[b] - x).powi(2) + (self.y[b] - y).powi(2);
                da.partial_cmp(&db).unwrap()
            })
            .unwrap()
    }
}

/// The sheet data `K` needs: `k` and the lead roots `s_n`.
#[derive(Debug, Clone, PartialEq)]
pub enum Branch {
    Sheet(SheetPoint),
    /// `k = L² - z²` in the threshold chart.
    Threshold { l: u32, z: C64, flip_low: bool, bc: BoundaryCondition },
}

impl Branch {
    pub fn k(&self) -> C64 {
        match self {
            Branch::Sheet(p) => p.k,
            Branch::Threshold { l, z, .. } => C64::new((l * l) as f64, 0.0) - z * z,
        }
    }

    fn bc(&self) -> BoundaryCondition {
        match self {
            Branch::Sheet(p) => p.bc,
            Branch::Threshold { bc, .. } => *bc,
        }
    }

    /// Roots of the first `count` modes.
    pub fn roots(&self, count: usize) -> Result<Vec<C64>> {
        match self {
            Branch::Sheet(p) => mode_indices(p.bc, count).map(|n| branch_sqrt(n, p)).collect(),
            Branch::Threshold { l, z, flip_low, bc } => Ok(crate::sheet::threshold_roots(*bc, *l, *z, *flip_low, count).1),
        }
    }

    /// Modes that can be off the principal branch.
    fn min_modes(&self) -> usize {
        let first = self.bc().first_mode();
        match self {
            Branch::Sheet(p) => p.lambda.iter().next_back().map_or(0, |&n| (n - first + 1) as usize),
            Branch::Threshold { l, .. } => (l - first + 1) as usize,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DetEval {
    pub point: SheetPoint,
    pub h_value: C64,
    pub log_abs: f64,
    /// Largest pivot ratio among the factorizations involved.
    pub cond_estimate: f64,
    /// Rank of the free-resolvent term.
    pub rank: usize,
}

/// Reference factorization and the `k`-independent pieces of `K`.
pub struct Fredholm {
    pub grid: GridModel,
    pub k0: C64,
    s: SparseRows,
    s_lu: SkylineLu,
    log_det_s: LogComplex,
    c1: SparseRows,
    c2: SparseRows,
    /// Nodes `[Δ, τ2]` reads from.
    t_nodes: Vec<usize>,
    /// Nodes with `χ2 ρ > 0`.
    c_nodes: Vec<usize>,
    /// `|x|` splitting `t_nodes` from `c_nodes`.
    pivot: f64,
    gap_same: f64,
    gap_opposite: f64,
}

const TAIL_EXPONENT: f64 = 23.0;
const OPPOSITE_EXPONENT: f64 = 40.0;

pub fn reference_resolvent(gm: GridModel, k0: C64) -> Result<Fredholm> {
    if k0.im < MIN_IM_K0 {
        return Err(Error::InvalidArgument(format!("Im k0 must be at least {MIN_IM_K0}, got {}", k0.im)));
    }
    let n = gm.n();
    let mut s = gm.laplacian.clone();
    for i in 0..n {
        s.add(i, i, -k0 * gm.weight[i]);
    }
    let s_lu = SkylineLu::factor(&s)?;
    let log_det_s = s_lu.log_det();
    let c1 = gm.commutator(&gm.tau1);
    let c2 = gm.commutator(&gm.tau2);
    let mut t_flag = vec![false; n];
    for row in &c2.rows {
        for &(j, _) in row {
            t_flag[j] = true;
        }
    }
    let t_nodes: Vec<usize> = (0..n).filter(|&i| t_flag[i]).collect();
    let c_nodes: Vec<usize> = (0..n).filter(|&i| gm.chi2[i] * gm.rho[i] > 0.0).collect();
    let t_max = t_nodes.iter().map(|&i| gm.x[i].abs()).fold(0.0, f64::max);
    let t_min = t_nodes.iter().map(|&i| gm.x[i].abs()).fold(f64::INFINITY, f64::min);
    let c_min = c_nodes.iter().map(|&i| gm.x[i].abs()).fold(f64::INFINITY, f64::min);
    if !(t_max < c_min) {
        return Err(Error::InvalidArgument("cutoff transitions overlap on this grid".into()));
    }
    Ok(Fredholm {
        k0,
        s,
        s_lu,
        log_det_s,
        c1,
        c2,
        t_nodes,
        c_nodes,
        pivot: 0.5 * (t_max + c_min),
        gap_same: c_min - t_max,
        gap_opposite: t_min + c_min,
        grid: gm,
    })
}

/// Free-resolvent term `R0(k) χ2 ρ` seen from `[Δ, τ2]`, as `U Vᵀ`.
struct LowRank {
    /// `|T| × r`
    u: DMatrix<C64>,
    /// `|C| × r`
    v: DMatrix<C64>,
}

/// Woodbury data for `I + z K ρ` at one `k`.
struct Factored {
    lu: SkylineLu,
    /// `E⁻¹ Y`, column by column.
    x: Vec<Vec<C64>>,
    /// `Vᵀ P E⁻¹ Y`
    m: DMatrix<C64>,
}

impl Fredholm {
    /// `exp(-Re sqrt(-k0) (X_cap - M - 4))`, the size of the cap reflection.
    pub fn cap_error(&self) -> f64 {
        let rate = principal_sqrt(-self.k0).re;
        (-rate * (self.grid.x_cap - self.grid.radii.m_eff - 4.0)).exp()
    }

    pub fn rank_nodes(&self) -> (usize, usize) {
        (self.t_nodes.len(), self.c_nodes.len())
    }

    /// `R(k0) f = S⁻¹ W f`.
    pub fn apply_reference(&self, f: &[C64]) -> Vec<C64> {
        let mut b: Vec<C64> = f.iter().zip(&self.grid.weight).map(|(v, w)| v * w).collect();
        self.s_lu.solve_in_place(&mut b);
        b
    }

    /// `‖(Δ_h - k0) u - f‖ / ‖f‖`.
    pub fn reference_residual(&self, f: &[C64], u: &[C64]) -> f64 {
        let au = self.grid.apply_laplacian(u);
        let r: Vec<C64> = au.iter().zip(u).zip(f).map(|((a, ui), fi)| a - self.k0 * ui - fi).collect();
        self.grid.norm(&r) / self.grid.norm(f)
    }

    fn mode_count(&self, br: &Branch) -> usize {
        let k = br.k();
        let bc = self.grid.bc;
        let mut m = br.min_modes();
        for n in mode_indices(bc, 10_000).skip(m) {
            let s = principal_sqrt(C64::new((n * n) as f64, 0.0) - k);
            m += 1;
            if s.re * self.gap_same > TAIL_EXPONENT {
                break;
            }
        }
        m
    }

    fn low_rank(&self, br: &Branch) -> Result<LowRank> {
        let g = &self.grid;
        let count = self.mode_count(br);
        let roots = br.roots(count)?;
        let flipped = br.min_modes();
        let h2 = g.h * g.h;
        let c0 = self.pivot;
        let mut cols: Vec<(Vec<C64>, Vec<C64>)> = Vec::new();
        for (idx, (n, &s)) in mode_indices(g.bc, count).zip(&roots).enumerate() {
            if s.norm() == 0.0 {
                return Err(Error::BranchPoint { n, k: br.k().re, threshold: (n * n) as f64 });
            }
            let opposite = idx < flipped || s.re * self.gap_opposite < OPPOSITE_EXPONENT;
            for sc in [-1.0, 1.0] {
                let v: Vec<C64> = self
                    .c_nodes
                    .iter()
                    .map(|&c| {
                        if g.x[c].signum() != sc {
                            return ZERO;
                        }
                        let f = transverse_orthonormal(g.bc, n, g.y[c]) * g.chi2[c] * g.rho[c] * h2 * g.weight[c];
                        (-s * (g.x[c].abs() - c0)).exp() / (2.0 * s) * f
                    })
                    .collect();
                for st in [-1.0, 1.0] {
                    let same = st == sc;
                    if !same && !opposite {
                        continue;
                    }
                    let u: Vec<C64> = self
                        .t_nodes
                        .iter()
                        .map(|&t| {
                            if g.x[t].signum() != st {
                                return ZERO;
                            }
                            let phi = transverse_orthonormal(g.bc, n, g.y[t]);
                            let e = if same { s * (g.x[t].abs() - c0) } else { -s * (g.x[t].abs() + c0) };
                            e.exp() * phi
                        })
                        .collect();
                    cols.push((u, v.clone()));
                }
            }
        }
        let r = cols.len();
        let u = DMatrix::from_fn(self.t_nodes.len(), r, |i, m| cols[m].0[i]);
        let v = DMatrix::from_fn(self.c_nodes.len(), r, |i, m| cols[m].1[i]);
        Ok(LowRank { u, v })
    }

    /// `Y = W χ1 [Δ, τ2] U = χ1 C2 U`, one full-length column per rank.
    fn y_columns(&self, lr: &LowRank) -> Vec<Vec<C64>> {
        let g = &self.grid;
        let mut pos = vec![usize::MAX; g.n()];
        for (a, &t) in self.t_nodes.iter().enumerate() {
            pos[t] = a;
        }
        (0..lr.u.ncols())
            .map(|m| {
                let mut y = vec![ZERO; g.n()];
                for (i, row) in self.c2.rows.iter().enumerate() {
                    if g.chi1[i] == 0.0 || row.is_empty() {
                        continue;
                    }
                    let mut acc = ZERO;
                    for &(j, c) in row {
                        if pos[j] != usize::MAX {
                            acc += c * lr.u[(pos[j], m)];
                        }
                    }
                    y[i] = acc * g.chi1[i];
                }
                y
            })
            .collect()
    }

    /// `(P x)` on `c_nodes`, `P = (k0 - k) τ1 + W⁻¹ C1`.
    fn p_on_c(&self, k: C64, x: &[C64]) -> Vec<C64> {
        let g = &self.grid;
        self.c_nodes
            .iter()
            .map(|&c| {
                let mut acc: C64 = self.c1.rows[c].iter().map(|&(j, v)| v * x[j]).sum();
                acc /= g.weight[c];
                acc + (self.k0 - k) * g.tau1[c] * x[c]
            })
            .collect()
    }

    /// `E_z = S + z (k0 - k) W χ1 + z χ1 C1`.
    fn e_matrix(&self, k: C64, z: C64) -> SparseRows {
        let g = &self.grid;
        let mut e = self.s.clone();
        for i in 0..g.n() {
            if g.chi1[i] == 0.0 {
                continue;
            }
            e.add(i, i, z * (self.k0 - k) * g.weight[i] * g.chi1[i]);
            for &(j, v) in &self.c1.rows[i] {
                e.add(i, j, z * g.chi1[i] * v);
            }
        }
        e
    }

    fn factor(&self, k: C64, z: C64, lr: &LowRank, ys: &[Vec<C64>]) -> Result<Factored> {
        let lu = SkylineLu::factor(&self.e_matrix(k, z))?;
        let x: Vec<Vec<C64>> = ys.par_iter().map(|y| lu.solve(y)).collect();
        let r = ys.len();
        let pcols: Vec<Vec<C64>> = x.par_iter().map(|xm| self.p_on_c(k, xm)).collect();
        let m = DMatrix::from_fn(r, r, |a, b| {
            pcols[b].iter().enumerate().map(|(i, p)| lr.v[(i, a)] * p).sum()
        });
        Ok(Factored { lu, x, m })
    }

    /// `h = det(I + (K ρ)³)` on the given branch.
    pub fn h_branch(&self, br: &Branch) -> Result<(LogComplex, f64, usize)> {
        let k = br.k();
        let lr = self.low_rank(br)?;
        let ys = self.y_columns(&lr);
        let omega = C64::from_polar(1.0, 2.0 * PI / 3.0);
        let zs = [ONE, omega, omega * omega];
        let parts: Vec<Result<(LogComplex, f64)>> = zs
            .par_iter()
            .map(|&z| {
                let f = self.factor(k, z, &lr, &ys)?;
                let r = f.m.nrows();
                let small = DMatrix::identity(r, r) - f.m * (z * z);
                let d = f.lu.log_det().div(&self.log_det_s).mul(&log_det(&small));
                Ok((d, f.lu.pivot_ratio()))
            })
            .collect();
        let mut acc = LogProduct::default();
        let mut cond = 0.0f64;
        for p in parts {
            let (d, c) = p?;
            acc.push_log(&d);
            cond = cond.max(c);
        }
        Ok((acc.finish(), cond, lr.u.ncols()))
    }

    pub fn h_det(&self, p: &SheetPoint) -> Result<DetEval> {
        check_threshold_distance(p)?;
        let (d, cond, rank) = self.h_branch(&Branch::Sheet(p.clone()))?;
        Ok(DetEval {
            point: p.clone(),
            h_value: d.to_complex(),
            log_abs: d.ln_abs,
            cond_estimate: cond,
            rank,
        })
    }
}

/// Threshold exclusion shared by the sheet-labelled entry points.
fn check_threshold_distance(p: &SheetPoint) -> Result<()> {
    let d = min_threshold_distance(p.k, p.bc);
    if d < crate::search::DELTA_EXCL {
        let n = p.k.re.max(0.0).sqrt().round() as u32;
        return Err(Error::BranchPoint { n, k: p.k.re, threshold: (n * n) as f64 });
    }
    Ok(())
}

pub fn h_det(fr: &Fredholm, p: &SheetPoint) -> Result<DetEval> {
    fr.h_det(p)
}

/// `K ρ` as an explicit matrix on the nodes of `supp ρ`.
#[derive(Debug, Clone)]
pub struct KMatrix {
    pub nodes: Vec<usize>,
    pub matrix: DMatrix<C64>,
}

impl KMatrix {
    /// `det(I + (K ρ)³)` by dense LU.
    pub fn h(&self) -> LogComplex {
        let n = self.nodes.len();
        let k3 = &self.matrix * &self.matrix * &self.matrix;
        log_det(&(DMatrix::identity(n, n) + k3))
    }
}

/// Modes in the direct kernel sum of [`k_matrix`].
pub const DENSE_KERNEL_MODES: u32 = 80;

/// Dense `K ρ`, with `R0` summed term by term from the strip kernel. Meant
/// for small grids and as a check on [`h_det`].
pub fn k_matrix(fr: &Fredholm, p: &SheetPoint) -> Result<KMatrix> {
    check_threshold_distance(p)?;
    let g = &fr.grid;
    let n = g.n();
    let k = p.k;
    let nodes = g.support(&g.rho);
    let mut row_of = vec![usize::MAX; n];
    for (a, &i) in nodes.iter().enumerate() {
        row_of[i] = a;
    }
    let h2 = g.h * g.h;
    let mut t_flag = vec![false; n];
    for &t in &fr.t_nodes {
        t_flag[t] = true;
    }
    let cols: Vec<Result<Vec<C64>>> = nodes
        .par_iter()
        .map(|&j| {
            let mut out = vec![ZERO; n];
            if g.chi1[j] > 0.0 {
                let mut e = vec![ZERO; n];
                e[j] = C64::new(g.chi1[j], 0.0);
                let u = fr.apply_reference(&e);
                let cu = fr.c1.matvec(&u);
                for i in 0..n {
                    out[i] += (fr.k0 - k) * g.tau1[i] * u[i] + cu[i] / g.weight[i];
                }
            }
            if g.chi2[j] > 0.0 {
                let mut r0 = vec![ZERO; n];
                for t in 0..n {
                    if t_flag[t] {
                        let kern = crate::greens::resolvent_kernel(p, g.x[t], g.y[t], g.x[j], g.y[j], DENSE_KERNEL_MODES + g.bc.first_mode())?;
                        r0[t] = kern * (h2 * g.weight[j] * g.chi2[j]);
                    }
                }
                let qr = fr.c2.matvec(&r0);
                for i in 0..n {
                    out[i] += qr[i] / g.weight[i];
                }
            }
            for v in out.iter_mut() {
                *v *= g.rho[j];
            }
            Ok(out)
        })
        .collect();
    let mut m = DMatrix::zeros(nodes.len(), nodes.len());
    for (b, col) in cols.into_iter().enumerate() {
        let col = col?;
        for (i, v) in col.into_iter().enumerate() {
            if v != ZERO {
                if row_of[i] == usize::MAX {
                    return Err(Error::InvalidArgument(format!("K has a row outside supp ρ at node {i}")));
                }
                m[(row_of[i], b)] = v;
            }
        }
    }
    Ok(KMatrix { nodes, matrix: m })
}

/// `ρ R(k) ρ` through `ρ R_a(k) ρ (I + K ρ)⁻¹` at one point.
pub struct Composition<'a> {
    fr: &'a Fredholm,
    k: C64,
    /// Roots of every grid mode, for the full free resolvent.
    grid_roots: Vec<C64>,
    lu: SkylineLu,
    v: DMatrix<C64>,
    /// `(I + K1 ρ)⁻¹ [Δ, τ2] U`, one column per rank.
    z: Vec<Vec<C64>>,
    small: nalgebra::LU<C64, nalgebra::Dyn, nalgebra::Dyn>,
    pub cond_estimate: f64,
}

/// Pivot ratio beyond which `I + K ρ` counts as singular.
pub const SINGULAR_PIVOT_RATIO: f64 = 1e12;

impl Fredholm {
    fn strip_modes(&self) -> usize {
        let per_column = (PI / self.grid.h).round() as usize;
        match self.grid.bc {
            BoundaryCondition::Dirichlet => per_column - 1,
            BoundaryCondition::Neumann => per_column,
        }
    }

    /// Full `P x`.
    fn p_full(&self, k: C64, x: &[C64]) -> Vec<C64> {
        let g = &self.grid;
        let cx = self.c1.matvec(x);
        (0..g.n()).map(|i| (self.k0 - k) * g.tau1[i] * x[i] + cx[i] / g.weight[i]).collect()
    }

    /// `K ρ x`, matrix-free.
    pub fn apply_k(&self, br: &Branch, x: &[C64]) -> Result<Vec<C64>> {
        let k = br.k();
        let g = &self.grid;
        let lr = self.low_rank(br)?;
        let mut w: Vec<C64> = (0..g.n()).map(|i| x[i] * g.weight[i] * g.chi1[i]).collect();
        self.s_lu.solve_in_place(&mut w);
        let mut out = self.p_full(k, &w);
        let c: DVector<C64> = DVector::from_fn(lr.v.ncols(), |m, _| {
            self.c_nodes.iter().enumerate().map(|(a, &p)| lr.v[(a, m)] * x[p]).sum::<C64>()
        });
        let mut ut = vec![ZERO; g.n()];
        for (a, &t) in self.t_nodes.iter().enumerate() {
            ut[t] = (0..lr.u.ncols()).map(|m| lr.u[(a, m)] * c[m]).sum::<C64>();
        }
        let qu = self.c2.matvec(&ut);
        for i in 0..g.n() {
            out[i] += qu[i] / g.weight[i];
        }
        Ok(out)
    }

    pub fn compose(&self, br: &Branch) -> Result<Composition<'_>> {
        let k = br.k();
        let g = &self.grid;
        let lr = self.low_rank(br)?;
        let ys = self.y_columns(&lr);
        let f = self.factor(k, ONE, &lr, &ys)?;
        let z: Vec<Vec<C64>> = f
            .x
            .par_iter()
            .enumerate()
            .map(|(m, xm)| {
                let mut ut = vec![ZERO; g.n()];
                for (a, &t) in self.t_nodes.iter().enumerate() {
                    ut[t] = lr.u[(a, m)];
                }
                let qu = self.c2.matvec(&ut);
                let px = self.p_full(k, xm);
                (0..g.n()).map(|i| qu[i] / g.weight[i] - px[i]).collect()
            })
            .collect();
        let r = f.m.nrows();
        let small = DMatrix::identity(r, r) - &f.m;
        let cond = f.lu.pivot_ratio().max(crate::linalg::pivot_ratio(&small));
        if !(cond < SINGULAR_PIVOT_RATIO) {
            return Err(Error::Singular(format!("I + Kρ is numerically singular at k = {k} (pivot ratio {cond:e})")));
        }
        Ok(Composition {
            fr: self,
            k,
            grid_roots: br.roots(self.strip_modes().max(br.min_modes()))?,
            lu: f.lu,
            v: lr.v,
            z,
            small: small.lu(),
            cond_estimate: cond,
        })
    }

    /// Strip kernel `R0(k) f` on every column with `|x| ≥ M_eff`, for `f`
    /// supported there. Each mode is a 1D convolution done by two sweeps.
    fn free_resolvent(&self, roots: &[C64], f: &[C64]) -> Vec<C64> {
        let g = &self.grid;
        let cols: Vec<&Column> = g
            .columns
            .iter()
            .filter(|c| (c.i as f64 * g.h).abs() >= g.radii.m_eff - 1e-9)
            .collect();
        let mut out = vec![ZERO; g.n()];
        let modes: Vec<u32> = mode_indices(g.bc, roots.len()).collect();
        for (&n, &s) in modes.iter().zip(roots) {
            let b: Vec<C64> = cols
                .iter()
                .map(|c| {
                    (c.start..c.start + c.len)
                        .map(|p| f[p] * (g.h * g.h * g.weight[p] * transverse_orthonormal(g.bc, n, g.y[p])))
                        .sum()
                })
                .collect();
            if b.iter().all(|v| *v == ZERO) {
                continue;
            }
            let m = cols.len();
            let xs: Vec<f64> = cols.iter().map(|c| c.i as f64 * g.h).collect();
            let mut fw = vec![ZERO; m];
            let mut bw = vec![ZERO; m];
            for a in 0..m {
                fw[a] = b[a] + if a > 0 { fw[a - 1] * (-s * (xs[a] - xs[a - 1])).exp() } else { ZERO };
            }
            for a in (0..m).rev() {
                bw[a] = b[a] + if a + 1 < m { bw[a + 1] * (-s * (xs[a + 1] - xs[a])).exp() } else { ZERO };
            }
            for (a, c) in cols.iter().enumerate() {
                let conv = (fw[a] + bw[a] - b[a]) / (2.0 * s);
                for p in c.start..c.start + c.len {
                    out[p] += conv * transverse_orthonormal(g.bc, n, g.y[p]);
                }
            }
        }
        out
    }
}

impl Composition<'_> {
    /// `(I + K ρ)⁻¹ g`
    pub fn solve(&self, gv: &[C64]) -> Vec<C64> {
        let fr = self.fr;
        let g = &fr.grid;
        let mut w: Vec<C64> = (0..g.n()).map(|i| gv[i] * g.weight[i] * g.chi1[i]).collect();
        self.lu.solve_in_place(&mut w);
        let pw = fr.p_full(self.k, &w);
        let b: Vec<C64> = (0..g.n()).map(|i| gv[i] - pw[i]).collect();
        let c = DVector::from_fn(self.v.ncols(), |m, _| {
            fr.c_nodes.iter().enumerate().map(|(a, &p)| self.v[(a, m)] * b[p]).sum()
        });
        let d = self.small.solve(&c).unwrap_or(c);
        let mut x = b;
        for (m, zm) in self.z.iter().enumerate() {
            let dm = d[m];
            if dm != ZERO {
                for (xi, zi) in x.iter_mut().zip(zm) {
                    *xi -= zi * dm;
                }
            }
        }
        x
    }

    /// `ρ R_a(k) ρ x`
    pub fn apply_approx(&self, x: &[C64]) -> Vec<C64> {
        let fr = self.fr;
        let g = &fr.grid;
        let w: Vec<C64> = (0..g.n()).map(|i| x[i] * g.rho[i]).collect();
        let near: Vec<C64> = (0..g.n()).map(|i| w[i] * g.chi1[i]).collect();
        let far: Vec<C64> = (0..g.n()).map(|i| w[i] * g.chi2[i]).collect();
        let a = fr.apply_reference(&near);
        let b = fr.free_resolvent(&self.grid_roots, &far);
        (0..g.n()).map(|i| g.rho[i] * (g.tau1[i] * a[i] + g.tau2[i] * b[i])).collect()
    }

    /// `ρ R(k) ρ g`
    pub fn apply(&self, gv: &[C64]) -> Vec<C64> {
        self.apply_approx(&self.solve(gv))
    }

    /// `‖ρ R(k) ρ‖` by power iteration on `T* T`, with `T* = conj ∘ T ∘ conj`
    /// (the kernel is symmetric).
    pub fn norm(&self, iters: usize) -> f64 {
        let g = &self.fr.grid;
        let mut v: Vec<C64> = (0..g.n())
            .map(|i| C64::new(g.rho[i] * (1.0 + 0.3 * (0.7 * g.x[i] + 1.3 * g.y[i]).sin()), 0.0))
            .collect();
        let mut sigma = 0.0;
        for _ in 0..iters {
            let nv = g.norm(&v);
            if nv == 0.0 {
                return 0.0;
            }
            v.iter_mut().for_each(|a| *a /= nv);
            let tv = self.apply(&v);
            let conj: Vec<C64> = tv.iter().map(|a| a.conj()).collect();
            let w: Vec<C64> = self.apply(&conj).iter().map(|a| a.conj()).collect();
            let next = g.norm(&w).sqrt();
            v = w;
            if (next - sigma).abs() <= 1e-7 * next {
                return next;
            }
            sigma = next;
        }
        sigma
    }
}

/// Least-squares coefficients of `Σ_{m=-2}^{max_power} c_m z^m` through
/// vector samples, lowest power first.
pub fn laurent_fit(zs: &[C64], values: &[Vec<C64>], max_power: i32) -> Result<Vec<Vec<C64>>> {
    let terms = (max_power + 3).max(0) as usize;
    if terms < 3 || zs.len() < terms || zs.len() != values.len() {
        return Err(Error::InvalidArgument(format!(
            "need at least {terms} samples for powers -2..={max_power}, got {}",
            zs.len()
        )));
    }
    let scale = zs.iter().map(|z| z.norm()).fold(0.0, f64::max);
    let v = DMatrix::from_fn(zs.len(), terms, |j, m| (zs[j] / scale).powi(m as i32 - 2));
    let pinv = v
        .pseudo_inverse(1e-13)
        .map_err(|e| Error::Singular(e.to_string()))?;
    let dim = values[0].len();
    let mut out = vec![vec![ZERO; dim]; terms];
    for (m, c) in out.iter_mut().enumerate() {
        let f = scale.powi(2 - m as i32);
        for (j, vals) in values.iter().enumerate() {
            let w = pinv[(m, j)] * f;
            for (ci, vi) in c.iter_mut().zip(vals) {
                *ci += w * vi;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct LaurentReport {
    pub l: u32,
    pub radius: f64,
    pub samples: usize,
    /// Sample indices where `I + K ρ` was singular.
    pub dropped: Vec<usize>,
    /// Largest `‖A g‖ / ‖g‖` over the probes.
    pub a_norm: f64,
    pub b_norm: f64,
    pub c_norm: f64,
    /// Largest relative misfit of the fit at the samples.
    pub fit_residual: f64,
}

pub const LAURENT_SAMPLES: usize = 32;
/// Highest regular power in the fit. The regular part carries
/// `e^{-z|x - x'|}` over the whole cutoff support, so a single constant
/// term is not enough.
pub const LAURENT_MAX_POWER: i32 = 13;
pub const DEFAULT_LAURENT_RADIUS: f64 = 0.1;

/// Smooth probes inside `supp ρ`: bumps at the origin, off-center in the
/// perturbation, and out in the strip.
pub fn laurent_probes(gm: &GridModel) -> Vec<Vec<C64>> {
    let centers = [(0.0, 0.5 * PI), (1.3, 1.1), (-(gm.radii.m_eff + 2.0), 2.0)];
    centers
        .iter()
        .map(|&(cx, cy)| {
            (0..gm.n())
                .map(|i| {
                    let d2 = (gm.x[i] - cx).powi(2) + (gm.y[i] - cy).powi(2);
                    C64::new((-d2).exp() * gm.rho[i], 0.0)
                })
                .collect()
        })
        .collect()
}

/// Samples `ρ R(k) ρ` on `k = L² - z²`, `|z| = radius`, and fits
/// `A/z² + B/z + C + …`.
pub fn threshold_laurent(fr: &Fredholm, l: u32, radius: f64) -> Result<LaurentReport> {
    if !(radius > 0.0 && radius < 0.5) {
        return Err(Error::InvalidArgument(format!("radius must lie in (0, 0.5), got {radius}")));
    }
    fr.grid.bc.check_mode(l)?;
    let g = &fr.grid;
    let probes = laurent_probes(g);
    let zs: Vec<C64> = (0..LAURENT_SAMPLES)
        .map(|j| C64::from_polar(radius, (2.0 * PI * j as f64 + 0.5) / LAURENT_SAMPLES as f64))
        .collect();
    let samples: Vec<Result<Vec<Vec<C64>>>> = zs
        .iter()
        .map(|&z| {
            let br = Branch::Threshold { l, z, flip_low: false, bc: g.bc };
            let comp = fr.compose(&br)?;
            Ok(probes.iter().map(|p| comp.apply(p)).collect())
        })
        .collect();
    let mut kept_z = Vec::new();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (j, s) in samples.into_iter().enumerate() {
        match s {
            Ok(v) => {
                kept_z.push(zs[j]);
                kept.push(v.concat());
            }
            Err(Error::Singular(_)) => dropped.push(j),
            Err(e) => return Err(e),
        }
    }
    let coef = laurent_fit(&kept_z, &kept, LAURENT_MAX_POWER)?;
    let n = g.n();
    let part_norm = |c: &[C64]| -> f64 {
        probes
            .iter()
            .enumerate()
            .map(|(q, p)| g.norm(&c[q * n..(q + 1) * n]) / g.norm(p))
            .fold(0.0, f64::max)
    };
    let mut fit_residual = 0.0f64;
    for (z, v) in kept_z.iter().zip(&kept) {
        let model: Vec<C64> = (0..v.len())
            .map(|i| (0..coef.len()).map(|m| coef[m][i] * z.powi(m as i32 - 2)).sum())
            .collect();
        let err: Vec<C64> = model.iter().zip(v).map(|(a, b)| a - b).collect();
        let den = v.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt();
        fit_residual = fit_residual.max(err.iter().map(|a| a.norm_sqr()).sum::<f64>().sqrt() / den);
    }
    Ok(LaurentReport {
        l,
        radius,
        samples: kept_z.len(),
        dropped,
        a_norm: part_norm(&coef[0]),
        b_norm: part_norm(&coef[1]),
        c_norm: part_norm(&coef[2]),
        fit_residual,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct NormEval {
    pub k: C64,
    pub norm: f64,
    pub cond_estimate: f64,
    /// `I + K ρ` is close to singular; the value is not trusted.
    pub flagged: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct NormScan {
    pub points: Vec<NormEval>,
    /// Slope of `ln ‖ρRρ‖` against `ln k` over the unflagged points.
    pub exponent: Option<f64>,
}

pub const NORM_ITERATIONS: usize = 60;
/// Pivot ratio above which a norm value is flagged.
pub const FLAG_PIVOT_RATIO: f64 = 1e8;

pub fn resolvent_norm(fr: &Fredholm, p: &SheetPoint) -> Result<NormEval> {
    check_threshold_distance(p)?;
    match fr.compose(&Branch::Sheet(p.clone())) {
        Ok(comp) => Ok(NormEval {
            k: p.k,
            norm: comp.norm(NORM_ITERATIONS),
            cond_estimate: comp.cond_estimate,
            flagged: comp.cond_estimate > FLAG_PIVOT_RATIO,
        }),
        Err(Error::Singular(_)) => Ok(NormEval {
            k: p.k,
            norm: f64::INFINITY,
            cond_estimate: f64::INFINITY,
            flagged: true,
        }),
        Err(e) => Err(e),
    }
}

/// `‖ρ R(k) ρ‖` on the physical sheet at real `k`.
pub fn resolvent_norm_scan(fr: &Fredholm, ks: &[f64]) -> Result<NormScan> {
    let points = ks
        .iter()
        .map(|&k| resolvent_norm(fr, &SheetPoint::physical(C64::new(k, 0.0), fr.grid.bc)))
        .collect::<Result<Vec<_>>>()?;
    let good: Vec<&NormEval> = points.iter().filter(|p| !p.flagged && p.k.re > 0.0).collect();
    let exponent = (good.len() >= 2).then(|| {
        let x: Vec<f64> = good.iter().map(|p| p.k.re.ln()).collect();
        let y: Vec<f64> = good.iter().map(|p| p.norm.ln()).collect();
        crate::quasimode::line_fit(&x, &y).0
    });
    Ok(NormScan { points, exponent })
}

/// Growth exponent `a` of a fit `ln|h(k)| ≲ C |k|^a`: the log-log slope of
/// the running maximum of `|ln|h||`, with `|k|` ascending.
pub fn growth_exponent(ks: &[f64], log_abs: &[f64]) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = ks.iter().zip(log_abs).map(|(&k, &v)| (k.abs(), v.abs())).collect();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let mut run = 0.0f64;
    let (mut x, mut y) = (Vec::new(), Vec::new());
    for (k, v) in pts {
        run = run.max(v);
        if k > 0.0 && run > 0.0 && run.is_finite() {
            x.push(k.ln());
            y.push(run.ln());
        }
    }
    (x.len() >= 3).then(|| crate::quasimode::line_fit(&x, &y).0)
}

/// `h` along a chart, for the zero search.
pub struct FredholmFn<'a> {
    pub fr: &'a Fredholm,
    pub chart: Chart,
}

impl ZeroFn for FredholmFn<'_> {
    fn eval(&self, k: C64) -> Result<LogComplex> {
        Ok(self.fr.h_branch(&Branch::Sheet(self.chart.point(k)))?.0)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FredholmZero {
    pub point: SheetPoint,
    pub residual: f64,
    pub iterations: u32,
}

/// Zero of `h` near `start`, within `radius`, on `chart`.
pub fn h_zero_near(fr: &Fredholm, chart: &Chart, start: C64, radius: f64, tol: f64) -> Result<Option<FredholmZero>> {
    let f = FredholmFn { fr, chart: chart.clone() };
    Ok(refine_near(&f, start, radius, tol)?.map(|(k, iterations, residual)| FredholmZero {
        point: chart.point(k),
        residual,
        iterations,
    }))
}

#[derive(Debug, Clone, Serialize)]
pub struct SvSeries {
    pub values: Vec<f64>,
    /// Fitted range `[fit_lo, fit_hi]` in 1-based singular value index.
    pub fit_lo: usize,
    pub fit_hi: usize,
    pub slope: f64,
    /// Area of the support the Weyl counts use.
    pub area: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SvDecay {
    /// `τ1 R(k0) χ1 ρ`
    pub resolvent: SvSeries,
    /// `[Δ, τ1] R(k0) χ1 ρ`
    pub commutator: SvSeries,
    pub h: f64,
    pub k0: C64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SvOptions {
    pub power_iters: usize,
    pub seed: u64,
    /// Extra sketch columns beyond twice the fitted range.
    pub oversample: usize,
}

impl Default for SvOptions {
    fn default() -> Self {
        SvOptions {
            power_iters: 1,
            seed: 0x5eed,
            oversample: 16,
        }
    }
}

/// The two `K1` constituents as maps between `L²` coordinates
/// `W^{1/2} h u` on their supports.
struct Constituent<'a> {
    fr: &'a Fredholm,
    commutator: bool,
    domain: Vec<usize>,
    range: Vec<usize>,
}

impl Constituent<'_> {
    fn apply(&self, x: &[C64]) -> Vec<C64> {
        let g = &self.fr.grid;
        let mut v = vec![ZERO; g.n()];
        for (a, &d) in self.domain.iter().enumerate() {
            v[d] = x[a] * g.weight[d].sqrt() * g.chi1[d];
        }
        self.fr.s_lu.solve_in_place(&mut v);
        if self.commutator {
            let cv = self.fr.c1.matvec(&v);
            self.range.iter().map(|&r| cv[r] / g.weight[r].sqrt()).collect()
        } else {
            self.range.iter().map(|&r| v[r] * g.weight[r].sqrt() * g.tau1[r]).collect()
        }
    }

    fn adjoint(&self, y: &[C64]) -> Vec<C64> {
        let g = &self.fr.grid;
        let mut v = vec![ZERO; g.n()];
        for (a, &r) in self.range.iter().enumerate() {
            v[r] = if self.commutator {
                y[a] / g.weight[r].sqrt()
            } else {
                y[a] * g.weight[r].sqrt() * g.tau1[r]
            };
        }
        if self.commutator {
            // C1 is antisymmetric
            v = self.fr.c1.matvec(&v).into_iter().map(|a| -a).collect();
        }
        let mut u: Vec<C64> = v.iter().map(|a| a.conj()).collect();
        self.fr.s_lu.solve_in_place(&mut u);
        self.domain.iter().map(|&d| u[d].conj() * g.weight[d].sqrt() * g.chi1[d]).collect()
    }
}

fn to_faer(cols: &[Vec<C64>]) -> faer::Mat<C64> {
    let rows = cols.first().map_or(0, |c| c.len());
    faer::Mat::from_fn(rows, cols.len(), |i, j| cols[j][i])
}

fn columns_of(m: &faer::Mat<C64>) -> Vec<Vec<C64>> {
    (0..m.ncols()).map(|j| (0..m.nrows()).map(|i| m[(i, j)]).collect()).collect()
}

fn thin_q(m: &faer::Mat<C64>) -> Vec<Vec<C64>> {
    columns_of(&m.qr().compute_thin_Q())
}

/// Singular values of `op` by a randomized range finder with `ell` columns.
fn randomized_singular_values(op: &Constituent<'_>, ell: usize, opts: &SvOptions) -> Result<Vec<f64>> {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    let omega: Vec<Vec<C64>> = (0..ell)
        .map(|_| {
            (0..op.domain.len())
                .map(|_| C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                .collect()
        })
        .collect();
    let forward = |cols: &[Vec<C64>]| -> Vec<Vec<C64>> { cols.par_iter().map(|c| op.apply(c)).collect() };
    let backward = |cols: &[Vec<C64>]| -> Vec<Vec<C64>> { cols.par_iter().map(|c| op.adjoint(c)).collect() };
    let mut y = forward(&omega);
    for _ in 0..opts.power_iters {
        let q = thin_q(&to_faer(&y));
        let z = thin_q(&to_faer(&backward(&q)));
        y = forward(&z);
    }
    let q = thin_q(&to_faer(&y));
    let bt = to_faer(&backward(&q));
    let r = bt.qr().thin_R().to_owned();
    let mut s = r
        .singular_values()
        .map_err(|e| Error::Singular(format!("singular value decomposition failed: {e:?}")))?;
    s.sort_by(|a, b| b.partial_cmp(a).unwrap());
    Ok(s)
}

/// Log-log slopes of the singular values of the two `K1` constituents.
///
/// The fit starts where the Weyl count of the support reaches `2 |k0|`
/// (below that the values sit on the `1/|λ - k0|` plateau) and stops where
/// it reaches `1/h²`, beyond which the grid no longer resolves the modes.
pub fn sv_decay(fr: &Fredholm, opts: &SvOptions) -> Result<SvDecay> {
    let g = &fr.grid;
    let h2 = g.h * g.h;
    let domain = g.support(&g.chi1);
    let tau1_support = g.support(&g.tau1);
    let c1_rows: Vec<usize> = (0..g.n()).filter(|&i| !fr.c1.rows[i].is_empty()).collect();
    let weyl = |area: f64, lambda: f64| area * lambda / (4.0 * PI);
    let mut series = Vec::new();
    for (commutator, range) in [(false, tau1_support), (true, c1_rows)] {
        let area_nodes = if commutator { &range } else { &domain };
        let area: f64 = area_nodes.iter().map(|&i| h2 * g.weight[i]).sum();
        let lo = weyl(area, 2.0 * fr.k0.norm()).ceil().max(4.0) as usize;
        let hi = weyl(area, 1.0 / h2).floor() as usize;
        let ell = (2 * hi + opts.oversample).min(domain.len()).min(range.len());
        let hi = hi.min(ell / 2);
        if hi < lo + 4 {
            return Err(Error::InvalidArgument(format!(
                "grid step {} leaves no asymptotic range for the singular value fit ({lo}..{hi})",
                g.h
            )));
        }
        let op = Constituent {
            fr,
            commutator,
            domain: domain.clone(),
            range,
        };
        let values = randomized_singular_values(&op, ell, opts)?;
        let x: Vec<f64> = (lo..=hi).map(|j| (j as f64).ln()).collect();
        let y: Vec<f64> = (lo..=hi).map(|j| values[j - 1].ln()).collect();
        let slope = crate::quasimode::line_fit(&x, &y).0;
        series.push(SvSeries {
            values,
            fit_lo: lo,
            fit_hi: hi,
            slope,
            area,
        });
    }
    let commutator = series.pop().unwrap();
    let resolvent = series.pop().unwrap();
    Ok(SvDecay {
        resolvent,
        commutator,
        h: g.h,
        k0: fr.k0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures::standard_cavity;

    const D: BoundaryCondition = BoundaryCondition::Dirichlet;
    const N: BoundaryCondition = BoundaryCondition::Neumann;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    fn coarse(g: &Geometry) -> GridModel {
        let opts = GridOptions {
            h: PI / 12.0,
            m_floor: 4.5,
            check_resolution: false,
            ..GridOptions::default()
        };
        build_grid_with(g, &opts).unwrap()
    }

    #[test]
    fn partition_of_unity_and_supports() {
        let gm = build_grid(&standard_cavity(), 0.1, 16.75).unwrap();
        let r = gm.radii;
        for i in 0..gm.n() {
            assert!((gm.chi1[i] + gm.chi2[i] - 1.0).abs() <= 1e-15);
            let (x, y) = (gm.x[i], gm.y[i]);
            let d = (x * x + y * y).sqrt();
            if d <= r.m_eff + 1.0 {
                assert_eq!(gm.chi1[i], 1.0);
            }
            if gm.chi1[i] > 0.0 {
                assert!(d < r.m_eff + 2.0 && gm.tau1[i] == 1.0);
            }
            if gm.tau1[i] > 0.0 {
                assert!(d < r.m_eff + 3.0);
            }
            if d <= r.m_eff + 3.0 {
                assert_eq!(gm.rho[i], 1.0);
            }
            if gm.rho[i] > 0.0 {
                assert!(d < r.m_eff + 4.0);
            }
            if gm.chi2[i] > 0.0 {
                assert_eq!(gm.tau2[i], 1.0);
            }
            if d <= r.m {
                assert_eq!(gm.tau2[i], 0.0);
            }
        }
    }

    #[test]
    fn commutator_vanishes_where_cutoff_is_flat() {
        let gm = build_grid(&standard_cavity(), 0.1, 16.75).unwrap();
        for tau in [&gm.tau1, &gm.tau2] {
            let cm = gm.commutator(tau);
            for (i, row) in cm.rows.iter().enumerate() {
                let flat = gm.laplacian.rows[i].iter().all(|&(j, _)| tau[j] == tau[i]);
                if flat {
                    assert!(row.is_empty());
                }
            }
            // dense check of Δτ - τΔ on a few vectors
            let v: Vec<C64> = (0..gm.n()).map(|i| c((0.37 * i as f64).sin(), (0.11 * i as f64).cos())).collect();
            let tv: Vec<C64> = v.iter().zip(tau.iter()).map(|(a, t)| a * t).collect();
            let lhs: Vec<C64> = gm
                .apply_laplacian(&tv)
                .iter()
                .zip(gm.apply_laplacian(&v).iter().zip(tau.iter()))
                .map(|(a, (b, t))| a - b * t)
                .collect();
            let rhs = cm.matvec(&v);
            for i in 0..gm.n() {
                assert!((lhs[i] - rhs[i] / gm.weight[i]).norm() < 1e-9 * (1.0 + lhs[i].norm()));
            }
        }
    }

    #[test]
    fn neumann_rows_sum_to_zero() {
        let g = Geometry::from_pieces(&[Segment::new(PI, 2.0 * PI, -0.5 * PI)], N);
        let gm = build_grid(&g, 0.1, 16.75).unwrap();
        let cap = gm.x_cap - 1.5 * gm.h;
        let mut boundary_rows = 0;
        for i in 0..gm.n() {
            if gm.x[i].abs() > cap {
                continue;
            }
            let s: C64 = gm.laplacian.rows[i].iter().map(|&(_, v)| v).sum();
            assert!(s.norm() < 1e-9, "row {i} sums to {s}");
            if gm.boundary[i] {
                boundary_rows += 1;
            }
        }
        assert!(boundary_rows > 100);
    }

    #[test]
    fn laplacian_is_symmetric() {
        for bc in [D, N] {
            let g = Geometry::from_pieces(&[Segment::new(PI, 2.0 * PI, -0.5 * PI)], bc);
            let gm = build_grid(&g, 0.1, 16.75).unwrap();
            for (i, row) in gm.laplacian.rows.iter().enumerate() {
                for &(j, v) in row {
                    assert_eq!(gm.laplacian.get(j, i), v);
                }
            }
        }
    }

    #[test]
    fn resolution_precondition() {
        let g = standard_cavity();
        assert!(build_grid(&g, 0.3, 16.75).is_err());
        assert!(build_grid(&g, 0.1, 10.0).is_err());
        let iris = crate::fixtures::weak_coupling_cavity();
        assert!(build_grid(&iris, 0.05, 17.0).is_err());
    }

    #[test]
    fn grid_matches_interior_test() {
        let gm = coarse(&standard_cavity());
        // open cavity columns at x = -5h..5h have 6 extra nodes above and
        // below; the junction columns only see the aperture
        let strip_cols = gm.columns.iter().filter(|c| c.len == 11).count();
        let cavity_cols = gm.columns.iter().filter(|c| c.len == 23).count();
        assert_eq!(cavity_cols, 11);
        assert_eq!(strip_cols + cavity_cols, gm.columns.len());
    }

    #[test]
    fn structured_h_matches_dense() {
        let cases = [
            (standard_cavity(), vec![SheetPoint::physical(c(2.3, 0.4), D), SheetPoint::new(c(3.1, -0.2), [1], D).unwrap()]),
            (Geometry::free_strip(D), vec![SheetPoint::physical(c(5.5, 0.0), D)]),
            (Geometry::free_strip(N), vec![SheetPoint::new(c(0.6, -0.3), [0], N).unwrap()]),
        ];
        for (g, points) in cases {
            let fr = reference_resolvent(coarse(&g), DEFAULT_K0).unwrap();
            for p in points {
                let km = k_matrix(&fr, &p).unwrap();
                let dense = km.h();
                let fast = fr.h_det(&p).unwrap();
                let (a, b) = (dense.to_complex(), fast.h_value);
                assert!((a - b).norm() < 1e-8 * a.norm().max(1.0), "{:?} {a} {b}", p.k);
            }
        }
    }

    fn cavity_reference() -> Fredholm {
        reference_resolvent(build_grid(&standard_cavity(), 0.1, 16.75).unwrap(), DEFAULT_K0).unwrap()
    }

    fn pseudo_random(n: usize) -> Vec<C64> {
        (0..n).map(|i| c(((i * 7919) % 613) as f64 / 613.0 - 0.5, ((i * 104729) % 331) as f64 / 331.0 - 0.5)).collect()
    }

    #[test]
    fn reference_solve_residual_and_reciprocity() {
        let fr = cavity_reference();
        let g = &fr.grid;
        let f = pseudo_random(g.n());
        let u = fr.apply_reference(&f);
        assert!(fr.reference_residual(&f, &u) < 1e-10);
        assert!(fr.cap_error() < CAP_TOLERANCE);

        let (a, b) = (g.nearest(-2.0, 2.5), g.nearest(5.0, 0.7));
        let source = |i: usize| {
            let mut v = vec![ZERO; g.n()];
            v[i] = ONE / g.weight[i];
            fr.apply_reference(&v)
        };
        let (ua, ub) = (source(a), source(b));
        assert!((ua[b] - ub[a]).norm() < 1e-12 * ua[b].norm());
    }

    #[test]
    fn point_source_decays_at_the_grid_mode_rate() {
        let fr = cavity_reference();
        let g = &fr.grid;
        let mut f = vec![ZERO; g.n()];
        let src = g.nearest(4.0, 0.5 * PI);
        f[src] = ONE / (g.h * g.h * g.weight[src]);
        let u = fr.apply_reference(&f);
        let x0 = g.x[src];
        let (xs, ls): (Vec<f64>, Vec<f64>) = (0..g.n())
            .filter(|&i| (g.y[i] - 0.5 * PI).abs() < 1e-9 && g.x[i] - x0 > 2.0 && g.x[i] - x0 < 6.0)
            .map(|i| (g.x[i] - x0, u[i].norm().ln()))
            .unzip();
        let (slope, _, _) = crate::quasimode::line_fit(&xs, &ls);
        assert!(-slope >= principal_sqrt(-fr.k0).re, "{slope}");

        // Five-point mode sum in the strip part of the guide.
        let h = g.h;
        let modes = (PI / h).round() as usize - 1;
        let exact = |x: f64, y: f64| -> C64 {
            (1..=modes)
                .map(|n| {
                    let nf = n as f64;
                    let lambda = 4.0 / (h * h) * (0.5 * nf * h).sin().powi(2);
                    let cosh = ONE + 0.5 * h * h * (lambda - fr.k0);
                    let sigma_h = (cosh + (cosh * cosh - ONE).sqrt()).ln();
                    let amp = h / (2.0 * sigma_h.sinh()) * (-sigma_h * ((x - x0) / h).round().abs()).exp();
                    amp * (2.0 / PI) * (nf * y).sin() * (nf * 0.5 * PI).sin()
                })
                .sum()
        };
        for i in (0..g.n()).filter(|&i| g.x[i] - x0 > 0.5 && g.x[i] - x0 < 5.0) {
            let e = exact(g.x[i], g.y[i]);
            assert!((u[i] - e).norm() < 1e-6 * e.norm().max(1e-3 * u[src].norm()), "{} {} {} {}", g.x[i], g.y[i], u[i], e);
        }
    }

    #[test]
    fn k_rho_is_supported_in_rho() {
        let fr = cavity_reference();
        let g = &fr.grid;
        let br = Branch::Sheet(SheetPoint::new(c(3.1, -0.2), [1], D).unwrap());
        let x: Vec<C64> = pseudo_random(g.n()).iter().zip(&g.rho).map(|(v, r)| v * r).collect();
        let kx = fr.apply_k(&br, &x).unwrap();
        for i in 0..g.n() {
            if g.rho[i] < 1.0 {
                assert!(kx[i].norm() < 1e-14 * fr.grid.norm(&kx), "{} {}", g.x[i], kx[i]);
            }
        }
        let km = k_matrix(&reference_resolvent(coarse(&standard_cavity()), DEFAULT_K0).unwrap(), &SheetPoint::physical(c(2.0, 0.5), D)).unwrap();
        assert!(km.matrix.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn k_rho_is_a_contraction_at_k0() {
        let fr = reference_resolvent(coarse(&standard_cavity()), DEFAULT_K0).unwrap();
        let km = k_matrix(&fr, &SheetPoint::physical(DEFAULT_K0, D)).unwrap();
        let sw: Vec<f64> = km.nodes.iter().map(|&i| fr.grid.weight[i].sqrt()).collect();
        let n = sw.len();
        let weighted = DMatrix::from_fn(n, n, |a, b| km.matrix[(a, b)] * sw[a] / sw[b]);
        let norm = crate::linalg::spectral_norm(&weighted, 200);
        assert!(norm < 1.0, "{norm}");
    }

    #[test]
    fn laurent_fit_recovers_a_double_pole() {
        let a0 = [c(0.3, -1.2), c(2.0, 0.5)];
        let c0 = [c(-4.0, 1.0), c(0.25, 0.0)];
        let zs: Vec<C64> = (0..LAURENT_SAMPLES)
            .map(|j| C64::from_polar(DEFAULT_LAURENT_RADIUS, (2.0 * PI * j as f64 + 0.5) / LAURENT_SAMPLES as f64))
            .collect();
        let values: Vec<Vec<C64>> = zs.iter().map(|z| (0..2).map(|i| a0[i] / (z * z) + c0[i]).collect()).collect();
        let coef = laurent_fit(&zs, &values, LAURENT_MAX_POWER).unwrap();
        for i in 0..2 {
            assert!((coef[0][i] - a0[i]).norm() < 1e-10);
            assert!(coef[1][i].norm() < 1e-10);
            assert!((coef[2][i] - c0[i]).norm() < 1e-10);
        }
    }
}

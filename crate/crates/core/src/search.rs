//! Locating zeros of the normalized determinant on the branched surface.
//!
//! Boxes are rectangles in the `k` plane together with a [`Chart`], which
//! says which sheet label each point of the box uses. The argument
//! principle gives zero counts, a quadtree isolates zeros, and Newton on the
//! logarithmic derivative polishes them.
//!
//! Near a threshold `L²` the determinant has a square-root branch point, so
//! boxes keep a distance `δ_excl` from thresholds on the real axis and the
//! neighborhood is handled in the local coordinate `z` with `k = L² - z²`.

use std::collections::BTreeSet;

use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Geometry;
use crate::linalg::LogComplex;
use crate::scattering::MatchingModel;
use crate::sheet::{
    dist_to_physical, in_count_region, lambda_label, n_below, pattern_lambda, threshold_roots, BoundaryCondition,
    SheetPattern, SheetPoint,
};

type C64 = Complex64;

/// Default threshold exclusion radius.
pub const DELTA_EXCL: f64 = 0.05;
/// Leaves stop splitting below this side length.
pub const MIN_SIDE: f64 = 1e-4;
/// Zeros closer than this on the same sheet are merged.
pub const DEDUP_DIST: f64 = 1e-7;
const MAX_DEPTH: usize = 24;
/// Split fractions, deliberately off-center so that split lines avoid the
/// symmetric zero patterns of mirror-symmetric geometries.
const SPLITS: [(f64, f64); 3] = [(0.5137, 0.4871), (0.4613, 0.5389), (0.5521, 0.4419)];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rect {
    pub re0: f64,
    pub re1: f64,
    pub im0: f64,
    pub im1: f64,
}

impl Rect {
    pub fn new(re0: f64, re1: f64, im0: f64, im1: f64) -> Self {
        Rect { re0, re1, im0, im1 }
    }

    pub fn centered(c: C64, half: f64) -> Self {
        Rect::new(c.re - half, c.re + half, c.im - half, c.im + half)
    }

    pub fn center(&self) -> C64 {
        C64::new(0.5 * (self.re0 + self.re1), 0.5 * (self.im0 + self.im1))
    }

    pub fn side(&self) -> f64 {
        (self.re1 - self.re0).max(self.im1 - self.im0)
    }

    pub fn contains(&self, k: C64) -> bool {
        k.re >= self.re0 && k.re <= self.re1 && k.im >= self.im0 && k.im <= self.im1
    }

    pub fn is_valid(&self) -> bool {
        self.re1 > self.re0 && self.im1 > self.im0 && [self.re0, self.re1, self.im0, self.im1].iter().all(|x| x.is_finite())
    }

    fn expanded(&self, f: f64) -> Rect {
        let (hr, hi) = (0.5 * f * (self.re1 - self.re0), 0.5 * f * (self.im1 - self.im0));
        let c = self.center();
        Rect::new(c.re - hr, c.re + hr, c.im - hi, c.im + hi)
    }

    /// Four children split at the given fractions.
    fn split(&self, fx: f64, fy: f64) -> [Rect; 4] {
        let xm = self.re0 + fx * (self.re1 - self.re0);
        let ym = self.im0 + fy * (self.im1 - self.im0);
        [
            Rect::new(self.re0, xm, self.im0, ym),
            Rect::new(xm, self.re1, self.im0, ym),
            Rect::new(self.re0, xm, ym, self.im1),
            Rect::new(xm, self.re1, ym, self.im1),
        ]
    }

    /// Distance from the closed rectangle to a point.
    pub fn distance_to(&self, k: C64) -> f64 {
        let dx = (self.re0 - k.re).max(0.0).max(k.re - self.re1);
        let dy = (self.im0 - k.im).max(0.0).max(k.im - self.im1);
        (dx * dx + dy * dy).sqrt()
    }
}

impl std::str::FromStr for Rect {
    type Err = Error;
    fn from_str(s: &str) -> Result<Rect> {
        let v: Vec<f64> = s
            .split(',')
            .map(|p| p.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| Error::Parse(format!("box must be re0,re1,im0,im1: {s:?}")))?;
        if v.len() != 4 {
            return Err(Error::Parse(format!("box must be re0,re1,im0,im1: {s:?}")));
        }
        let r = Rect::new(v[0], v[1], v[2], v[3]);
        if !r.is_valid() {
            return Err(Error::Parse(format!("empty box {s:?}")));
        }
        Ok(r)
    }
}

/// Assignment of sheet labels to the points of a box.
///
/// `lower` is used where `Im k < 0` and `upper` where `Im k ≥ 0`. For a box
/// that straddles the real axis inside one threshold interval, the chart is
/// analytic when `upper = lower Δ {n : n² < Re k}`: crossing the axis there
/// crosses exactly those cuts.
#[derive(Debug, Clone, PartialEq)]
pub struct Chart {
    pub bc: BoundaryCondition,
    pub lower: BTreeSet<u32>,
    pub upper: BTreeSet<u32>,
}

impl Chart {
    /// The same label on both half-planes; for boxes off the real axis.
    pub fn fixed(lambda: BTreeSet<u32>, bc: BoundaryCondition) -> Self {
        Chart {
            bc,
            lower: lambda.clone(),
            upper: lambda,
        }
    }

    /// Label `lower` below the axis, continued across `(n², (n+1)²)` at `x`.
    pub fn continued(lower: BTreeSet<u32>, x: f64, bc: BoundaryCondition) -> Self {
        let mut upper = lower.clone();
        if let Some(nk) = n_below(bc, x) {
            for n in bc.first_mode()..=nk {
                if !upper.remove(&n) {
                    upper.insert(n);
                }
            }
        }
        Chart { bc, lower, upper }
    }

    /// The chart a box uses when its label refers to the part below the
    /// axis: continued if the box reaches `Im ≥ 0` from below, the label
    /// itself if the box lies entirely on one side.
    pub fn for_box(lambda: BTreeSet<u32>, b: &Rect, bc: BoundaryCondition) -> Self {
        if b.im0 < 0.0 && b.im1 >= 0.0 {
            Chart::continued(lambda, b.center().re, bc)
        } else {
            Chart::fixed(lambda, bc)
        }
    }

    pub fn label_at(&self, k: C64) -> &BTreeSet<u32> {
        if k.im < 0.0 {
            &self.lower
        } else {
            &self.upper
        }
    }

    pub fn point(&self, k: C64) -> SheetPoint {
        SheetPoint {
            k,
            lambda: self.label_at(k).clone(),
            bc: self.bc,
        }
    }
}

/// Checks that a box can be used with a chart.
pub fn check_box(b: &Rect, chart: &Chart, delta: f64) -> Result<()> {
    if !b.is_valid() {
        return Err(Error::InvalidArgument(format!("empty box {b:?}")));
    }
    let straddles = b.im0 <= 0.0 && b.im1 >= 0.0;
    let first = chart.bc.first_mode();
    let top = b.re1.max(0.0).sqrt().ceil() as u32 + 1;
    for n in first..=top {
        let t = (n * n) as f64;
        if b.distance_to(C64::new(t, 0.0)) < delta {
            return Err(Error::InvalidArgument(format!(
                "box {b:?} comes within {delta} of threshold {t}"
            )));
        }
        if straddles && t > b.re0 && t < b.re1 {
            return Err(Error::InvalidArgument(format!(
                "box {b:?} crosses the real axis on both sides of threshold {t}"
            )));
        }
    }
    if straddles {
        let want = Chart::continued(chart.lower.clone(), b.center().re, chart.bc);
        if want.upper != chart.upper {
            return Err(Error::InvalidArgument("chart is not continuous across the real axis in this box".into()));
        }
    }
    Ok(())
}

/// Sampled function used by the search.
pub trait ZeroFn: Sync {
    fn eval(&self, k: C64) -> Result<LogComplex>;
}

impl<F: Fn(C64) -> Result<LogComplex> + Sync> ZeroFn for F {
    fn eval(&self, k: C64) -> Result<LogComplex> {
        self(k)
    }
}

/// Wraps an ordinary complex function.
pub fn plain<F: Fn(C64) -> C64 + Sync>(f: F) -> impl ZeroFn {
    move |k: C64| Ok(LogComplex::from_complex(f(k)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Winding {
    pub winding: i32,
    /// Mean of `ln|f|` over the boundary samples.
    pub ln_scale: f64,
    pub evaluations: usize,
}

fn arg_step(a: &LogComplex, b: &LogComplex) -> f64 {
    (b.phase * a.phase.conj()).arg()
}

/// Accumulated argument change along a segment, bisecting until every
/// step is below `π/3`.
fn edge_arg(f: &dyn ZeroFn, a: C64, b: C64, m: usize) -> Result<(f64, f64, usize)> {
    let pts: Vec<C64> = (0..=m).map(|j| a + (b - a) * (j as f64 / m as f64)).collect();
    let vals: Vec<LogComplex> = pts.iter().map(|&k| f.eval(k)).collect::<Result<_>>()?;
    let mut total = 0.0;
    let mut ln_sum = 0.0;
    let mut evals = vals.len();
    for v in &vals {
        if !v.is_finite() {
            return Err(Error::BoundaryZero { min_abs: v.abs() });
        }
        ln_sum += v.ln_abs;
    }
    let len = (b - a).norm();
    for j in 0..m {
        let mut stack = vec![(pts[j], vals[j], pts[j + 1], vals[j + 1], 0usize)];
        while let Some((p0, v0, p1, v1, depth)) = stack.pop() {
            let d = arg_step(&v0, &v1);
            if d.abs() < std::f64::consts::FRAC_PI_3 {
                total += d;
                continue;
            }
            if depth > 40 || (p1 - p0).norm() < 1e-13 * len.max(1e-300) {
                return Err(Error::BoundaryZero {
                    min_abs: v0.abs().min(v1.abs()),
                });
            }
            let pm = 0.5 * (p0 + p1);
            let vm = f.eval(pm)?;
            evals += 1;
            if !vm.is_finite() {
                return Err(Error::BoundaryZero { min_abs: vm.abs() });
            }
            // process the first half first
            stack.push((pm, vm, p1, v1, depth + 1));
            stack.push((p0, v0, pm, vm, depth + 1));
        }
    }
    Ok((total, ln_sum, evals))
}

/// Winding number of `f` around the boundary of `b`.
pub fn winding_number(f: &dyn ZeroFn, b: &Rect, quad_points: usize) -> Result<Winding> {
    let m = (quad_points / 4).max(4);
    let c = [
        C64::new(b.re0, b.im0),
        C64::new(b.re1, b.im0),
        C64::new(b.re1, b.im1),
        C64::new(b.re0, b.im1),
    ];
    let parts: Vec<(f64, f64, usize)> = (0..4)
        .into_par_iter()
        .map(|i| edge_arg(f, c[i], c[(i + 1) % 4], m))
        .collect::<Result<_>>()?;
    let total: f64 = parts.iter().map(|p| p.0).sum();
    let ln_sum: f64 = parts.iter().map(|p| p.1).sum();
    let evals: usize = parts.iter().map(|p| p.2).sum();
    let w = total / std::f64::consts::TAU;
    let r = w.round();
    if (w - r).abs() > 0.1 {
        return Err(Error::NonIntegerWinding { value: w });
    }
    Ok(Winding {
        winding: r as i32,
        ln_scale: ln_sum / (4 * (m + 1)) as f64,
        evaluations: evals,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resonance {
    pub point: SheetPoint,
    pub multiplicity: u32,
    /// `|D|` at the point relative to its typical size on the isolating box.
    pub residual: f64,
    pub newton_steps: u32,
    pub n_lead: usize,
    /// Winding of a small final box agreed with the multiplicity.
    pub verified: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub rect: Rect,
    pub winding: i32,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FindResult {
    pub resonances: Vec<Resonance>,
    pub unresolved: Vec<Cluster>,
}

#[derive(Debug, Clone, Copy)]
pub struct SearchOptions {
    pub quad_points: usize,
    pub tol: f64,
    pub min_side: f64,
    pub delta_excl: f64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions {
            quad_points: 32,
            tol: 1e-8,
            min_side: MIN_SIDE,
            delta_excl: DELTA_EXCL,
        }
    }
}

/// A zero in a chart's coordinate before mapping to the surface.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RawZero {
    pub at: C64,
    pub multiplicity: u32,
    pub residual: f64,
    pub steps: u32,
    pub verified: bool,
}

/// Newton on the log-derivative, `k ← k - m / (ln f)'`.
fn newton(f: &dyn ZeroFn, start: C64, m: u32, bound: &Rect, ln_scale: f64, tol: f64) -> Option<(C64, u32, f64)> {
    let mut k = start;
    let scale = 1.0f64.max(k.norm());
    let h = 1e-6 * scale;
    let mut best: Option<(C64, u32, f64)> = None;
    let mut prev = f64::INFINITY;
    for step in 1..=60u32 {
        let f0 = f.eval(k).ok()?;
        let res = (f0.ln_abs - ln_scale).exp();
        if best.is_none_or(|b| res < b.2) {
            best = Some((k, step - 1, res));
        }
        if f0.is_zero() {
            break;
        }
        // f'/f from ratios to f(k), which stays accurate as k approaches the zero
        let rp = f.eval(k + h).ok()?.div(&f0).to_complex();
        let rm = f.eval(k - h).ok()?.div(&f0).to_complex();
        let dlog = (rp - rm) / (2.0 * h);
        if !(dlog.re.is_finite() && dlog.im.is_finite()) || dlog.norm() == 0.0 {
            break;
        }
        let delta = m as f64 / dlog;
        let d = delta.norm();
        if d < 1e-14 * scale || (step > 3 && d > 0.5 * prev && d < 1e-9 * scale) {
            break;
        }
        prev = d;
        k -= delta;
        if !bound.contains(k) {
            return None;
        }
    }
    best.filter(|b| b.2 < tol)
}

/// Isolates and refines the zeros of `f` in `b`; plain coordinates only.
pub fn find_zeros(f: &dyn ZeroFn, b: &Rect, opts: &SearchOptions) -> (Vec<RawZero>, Vec<Cluster>) {
    let root = match winding_number(f, b, opts.quad_points) {
        Ok(w) => w,
        Err(e) => {
            return (
                vec![],
                vec![Cluster {
                    rect: *b,
                    winding: -1,
                    reason: e.to_string(),
                }],
            )
        }
    };
    let mut level: Vec<(Rect, Winding, usize)> = vec![(*b, root, 0)];
    let mut leaves: Vec<(Rect, Winding)> = Vec::new();
    let mut clusters = Vec::new();
    while !level.is_empty() {
        let next: Vec<Vec<(Rect, Winding, usize)>> = level
            .par_iter()
            .map(|(r, w, depth)| {
                if w.winding <= 0 {
                    return vec![];
                }
                if w.winding == 1 || r.side() < opts.min_side || *depth >= MAX_DEPTH {
                    return vec![(*r, *w, usize::MAX)];
                }
                for (fx, fy) in SPLITS {
                    let kids = r.split(fx, fy);
                    let ws: Result<Vec<Winding>> =
                        kids.par_iter().map(|k| winding_number(f, k, opts.quad_points)).collect();
                    if let Ok(ws) = ws {
                        let sum: i32 = ws.iter().map(|x| x.winding).sum();
                        if sum == w.winding {
                            return kids
                                .iter()
                                .zip(ws)
                                .filter(|(_, x)| x.winding > 0)
                                .map(|(k, x)| (*k, x, depth + 1))
                                .collect();
                        }
                    }
                }
                // no clean split: treat as a leaf cluster
                vec![(*r, *w, usize::MAX)]
            })
            .collect();
        level = Vec::new();
        for group in next {
            for item in group {
                if item.2 == usize::MAX {
                    leaves.push((item.0, item.1));
                } else {
                    level.push(item);
                }
            }
        }
    }
    let refined: Vec<std::result::Result<RawZero, Cluster>> =
        leaves.par_iter().map(|(r, w)| refine_leaf(f, r, w, opts)).collect();
    let mut zeros = Vec::new();
    for r in refined {
        match r {
            Ok(z) => zeros.push(z),
            Err(c) => clusters.push(c),
        }
    }
    (zeros, clusters)
}

fn refine_leaf(f: &dyn ZeroFn, r: &Rect, w: &Winding, opts: &SearchOptions) -> std::result::Result<RawZero, Cluster> {
    let m = w.winding as u32;
    // a zero outside the leaf belongs to some other leaf
    let bound = r.expanded(1.0 + 1e-9);
    let mut rect = *r;
    let mut ln_scale = w.ln_scale;
    let mut found = newton(f, rect.center(), m, &bound, ln_scale, opts.tol);
    // fallback: shrink by winding
    let mut shrink = 0;
    while found.is_none() && shrink < 40 {
        shrink += 1;
        let mut next = None;
        for (fx, fy) in SPLITS {
            let kids = rect.split(fx, fy);
            let mut ok = true;
            for k in kids {
                match winding_number(f, &k, opts.quad_points) {
                    Ok(x) if x.winding as u32 == m => {
                        next = Some((k, x));
                        break;
                    }
                    Ok(x) if x.winding != 0 => {
                        // the cluster splits; refine the first part only
                        next = Some((k, x));
                        break;
                    }
                    Ok(_) => {}
                    Err(_) => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok && next.is_some() {
                break;
            }
            next = None;
        }
        let Some((k, x)) = next else { break };
        rect = k;
        ln_scale = x.ln_scale;
        let mm = x.winding as u32;
        found = newton(f, rect.center(), mm, &rect.expanded(1.0 + 1e-9), ln_scale, opts.tol)
            .map(|(a, b, c)| (a, b + shrink as u32, c));
        if rect.side() < 1e-12 * 1f64.max(rect.center().norm()) {
            break;
        }
    }
    let Some((k, steps, residual)) = found else {
        return Err(Cluster {
            rect: *r,
            winding: w.winding,
            reason: "refinement did not converge".into(),
        });
    };
    // final confirmation on a small box
    let hv = 1e-5 * 1f64.max(k.norm()).min(r.side());
    let verified = match winding_number(f, &Rect::centered(k, hv), 16) {
        Ok(x) => x.winding as u32 == m,
        Err(_) => false,
    };
    Ok(RawZero {
        at: k,
        multiplicity: m,
        residual,
        steps,
        verified,
    })
}

/// Muller iteration from `start`, for functions too costly for the
/// three-point Newton step. The residual is `|f|` relative to its geometric
/// mean over four points at distance `radius`; `None` if the iteration leaves
/// the disk of that radius or misses `tol`.
pub fn refine_near(f: &dyn ZeroFn, start: C64, radius: f64, tol: f64) -> Result<Option<(C64, u32, f64)>> {
    let ring: Vec<LogComplex> = (0..4)
        .map(|j| f.eval(start + C64::from_polar(radius, 0.3 + j as f64 * std::f64::consts::FRAC_PI_2)))
        .collect::<Result<_>>()?;
    let ln_scale = ring.iter().map(|v| v.ln_abs).sum::<f64>() / 4.0;
    let scale = LogComplex { ln_abs: ln_scale, phase: C64::new(1.0, 0.0) };
    let val = |k: C64| -> Result<C64> { Ok(f.eval(k)?.div(&scale).to_complex()) };
    let step = 0.05 * radius;
    let mut x = [start - step, start + C64::new(0.0, step), start];
    let mut y = [val(x[0])?, val(x[1])?, val(x[2])?];
    let mut best = (x[2], y[2].norm());
    for it in 1..=40u32 {
        let h1 = x[1] - x[0];
        let h2 = x[2] - x[1];
        let d1 = (y[1] - y[0]) / h1;
        let d2 = (y[2] - y[1]) / h2;
        let a = (d2 - d1) / (h2 + h1);
        let b = a * h2 + d2;
        let disc = (b * b - 4.0 * a * y[2]).sqrt();
        let den = if (b + disc).norm() > (b - disc).norm() { b + disc } else { b - disc };
        let dx = if den.norm() == 0.0 { C64::new(step, 0.0) } else { -2.0 * y[2] / den };
        let xn = x[2] + dx;
        if !(xn.re.is_finite() && xn.im.is_finite()) || (xn - start).norm() > radius {
            return Ok(None);
        }
        let yn = val(xn)?;
        if yn.norm() < best.1 {
            best = (xn, yn.norm());
        }
        x = [x[1], x[2], xn];
        y = [y[1], y[2], yn];
        if dx.norm() < 1e-12 * xn.norm().max(1.0) || yn.norm() == 0.0 {
            return Ok((best.1 < tol).then_some((best.0, it, best.1)));
        }
    }
    Ok((best.1 < tol).then_some((best.0, 40, best.1)))
}

fn sort_and_dedup(mut v: Vec<Resonance>) -> Vec<Resonance> {
    v.sort_by(|a, b| {
        a.point
            .k
            .re
            .total_cmp(&b.point.k.re)
            .then(a.point.k.im.total_cmp(&b.point.k.im))
            .then(a.point.lambda.cmp(&b.point.lambda))
    });
    let mut out: Vec<Resonance> = Vec::new();
    for r in v {
        let dup = out
            .iter()
            .any(|o| o.point.lambda == r.point.lambda && (o.point.k - r.point.k).norm() < DEDUP_DIST);
        if !dup {
            out.push(r);
        }
    }
    out
}

/// Normalized determinant on a chart, for one truncation.
pub struct ChartFn<'a> {
    pub model: &'a MatchingModel,
    pub chart: &'a Chart,
}

impl ZeroFn for ChartFn<'_> {
    fn eval(&self, k: C64) -> Result<LogComplex> {
        self.model.det_normalized(&self.chart.point(k))
    }
}

/// Zeros of the normalized determinant in `b`, using the chart that
/// [`Chart::for_box`] assigns to `lambda`.
pub fn find_in_box(g: &Geometry, lambda: &BTreeSet<u32>, b: &Rect, n_lead: usize, tol: f64) -> Result<FindResult> {
    let opts = SearchOptions {
        tol,
        ..SearchOptions::default()
    };
    let chart = Chart::for_box(lambda.clone(), b, g.bc);
    let model = MatchingModel::new(g, n_lead)?;
    find_in_box_with(&model, &chart, b, &opts)
}

pub fn find_in_box_with(model: &MatchingModel, chart: &Chart, b: &Rect, opts: &SearchOptions) -> Result<FindResult> {
    for &n in chart.lower.iter().chain(chart.upper.iter()) {
        chart.bc.check_mode(n)?;
    }
    check_box(b, chart, opts.delta_excl)?;
    if model.bc != chart.bc {
        return Err(Error::InvalidArgument("chart and geometry disagree on the boundary condition".into()));
    }
    let f = ChartFn { model, chart };
    let (zeros, unresolved) = find_zeros(&f, b, opts);
    let res: Vec<Resonance> = zeros
        .into_iter()
        .filter(|z| b.contains(z.at))
        .map(|z| Resonance {
            point: chart.point(z.at),
            multiplicity: z.multiplicity,
            residual: z.residual,
            newton_steps: z.steps,
            n_lead: model.n_lead,
            verified: z.verified,
        })
        .collect();
    Ok(FindResult {
        resonances: sort_and_dedup(res),
        unresolved,
    })
}

/// [`threshold_roots`] for the lead truncation of `model`.
pub fn threshold_chart(model: &MatchingModel, l: u32, z: C64, flip_low: bool) -> (C64, Vec<C64>, BTreeSet<u32>) {
    threshold_roots(model.bc, l, z, flip_low, model.n_lead)
}

struct ThresholdFn<'a> {
    model: &'a MatchingModel,
    l: u32,
    flip_low: bool,
}

impl ZeroFn for ThresholdFn<'_> {
    fn eval(&self, z: C64) -> Result<LogComplex> {
        let (k, s, _) = threshold_chart(self.model, self.l, z, self.flip_low);
        // -2z cancels the free-strip zero at z = 0
        Ok(self.model.det_normalized_with(k, &s).mul_complex(-2.0 * z))
    }
}

/// Zeros within `|k - L²| < radius`, found in the `z` coordinate.
pub fn threshold_search(g: &Geometry, l: u32, radius: f64, n_lead: usize, tol: f64) -> Result<FindResult> {
    let model = MatchingModel::new(g, n_lead)?;
    let opts = SearchOptions {
        tol,
        ..SearchOptions::default()
    };
    threshold_search_with(&model, l, radius, &opts)
}

pub fn threshold_search_with(model: &MatchingModel, l: u32, radius: f64, opts: &SearchOptions) -> Result<FindResult> {
    model.bc.check_mode(l)?;
    if !(radius > 0.0 && radius < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold radius must be in (0, 1), got {radius}")));
    }
    if l as usize >= model.n_lead + model.bc.first_mode() as usize {
        return Err(Error::InvalidArgument("threshold index beyond the lead truncation".into()));
    }
    // off-center so that z = 0 never lies on an edge
    let a = radius.sqrt() * 1.01;
    let zb = Rect::new(-a, a * 1.0137, -a * 0.9871, a);
    let z_opts = SearchOptions {
        min_side: opts.min_side * 1e-2,
        ..*opts
    };
    let bc = model.bc;
    let variants: &[bool] = if l > bc.first_mode() { &[false, true] } else { &[false] };
    let mut res = Vec::new();
    let mut unresolved = Vec::new();
    for &flip_low in variants {
        let f = ThresholdFn { model, l, flip_low };
        let (zeros, u) = find_zeros(&f, &zb, &z_opts);
        unresolved.extend(u);
        // at z = 0 the factor -2z contributes one order of its own; what
        // remains is the order of the determinant itself
        let zeros = zeros.into_iter().filter_map(|mut z| {
            if z.at.norm() < 1e-6 * a {
                z.multiplicity -= 1;
                z.at = C64::new(0.0, 0.0);
            }
            (z.multiplicity > 0).then_some(z)
        });
        res.extend(zeros.filter(|z| z.at.norm_sqr() < radius).map(|z| {
            let (k, _, lambda) = threshold_chart(model, l, z.at, flip_low);
            Resonance {
                point: SheetPoint { k, lambda, bc },
                multiplicity: z.multiplicity,
                residual: z.residual,
                newton_steps: z.steps,
                n_lead: model.n_lead,
                verified: z.verified,
            }
        }));
    }
    Ok(FindResult {
        resonances: sort_and_dedup(res),
        unresolved,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SheetCount {
    pub lambda: String,
    pub count: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountReport {
    pub r: f64,
    pub count: u32,
    pub region: String,
    pub per_sheet: Vec<SheetCount>,
    pub resonances: Vec<Resonance>,
    pub unresolved: Vec<Cluster>,
}

/// One box of the counting sweep.
#[derive(Debug, Clone)]
pub struct SweepBox {
    pub rect: Rect,
    pub chart: Chart,
}

/// Height of the counting region at radius `r`.
pub fn count_height(r: f64) -> f64 {
    1.0 + 0.5 * r.max(0.0).sqrt()
}

/// Boxes covering the counting region of radius `r` on the admissible sheets,
/// away from thresholds (those are covered by threshold searches).
fn is_threshold(bc: BoundaryCondition, x: f64) -> bool {
    let n = x.max(0.0).sqrt().round();
    n >= bc.first_mode() as f64 && n * n == x
}

pub fn sweep_boxes(bc: BoundaryCondition, r: f64, delta: f64) -> Vec<SweepBox> {
    let h = count_height(r);
    let margin = 1.5 * delta;
    let tiny = 1e-9;
    let first = bc.first_mode();
    let f2 = (first * first) as f64;
    let mut out = Vec::new();
    // physical sheet: only real eigenvalues, below the lowest threshold
    if f2 - margin > -0.5 {
        out.push(SweepBox {
            rect: Rect::new(-0.5, f2 - margin, -delta, delta * 1.0137),
            chart: Chart::fixed(BTreeSet::new(), bc),
        });
    }
    // real-part ranges per sheet where the gate can admit a point
    let w = 0.5 * (1.0 + r.sqrt());
    let mut sheets: std::collections::BTreeMap<Vec<u32>, (f64, f64)> = Default::default();
    let mut n = first;
    while ((n * n) as f64) < r {
        let lam: Vec<u32> = pattern_lambda(SheetPattern::Prefix { last: n }, bc).into_iter().collect();
        sheets.insert(lam, ((n * n) as f64, ((n + 1) * (n + 1)) as f64));
        n += 1;
    }
    let mut m = first;
    while ((m * m) as f64) - w < r {
        let t = (m * m) as f64;
        let e = sheets.entry(vec![m]).or_insert((t - w, t + w));
        *e = (e.0.min(t - w), e.1.max(t + w));
        m += 1;
    }
    for (lam, (a, b)) in sheets {
        let lam: BTreeSet<u32> = lam.into_iter().collect();
        let (a, b) = (a.max(-0.5), b.min(r));
        if b - a < 1e-6 {
            continue;
        }
        for (im0, im1) in [(-h, -delta), (delta, h)] {
            out.push(SweepBox {
                rect: Rect::new(a, b, im0, im1),
                chart: Chart::fixed(lam.clone(), bc),
            });
        }
        // near-axis strips, one per threshold interval
        let mut cuts = vec![a];
        let mut j = first;
        while ((j * j) as f64) < b {
            let t = (j * j) as f64;
            if t > a {
                cuts.push(t);
            }
            j += 1;
        }
        cuts.push(b);
        for win in cuts.windows(2) {
            let lo = if is_threshold(bc, win[0]) { win[0] + margin } else { win[0] };
            let hi = if is_threshold(bc, win[1]) { win[1] - margin } else { win[1] };
            if hi - lo < 1e-6 {
                continue;
            }
            let mid = 0.5 * (lo + hi);
            let is_prefix = n_below(bc, mid)
                .is_some_and(|nk| pattern_lambda(SheetPattern::Prefix { last: nk }, bc) == lam);
            if is_prefix {
                let rect = Rect::new(lo, hi, -delta, delta * 1.0137);
                out.push(SweepBox {
                    rect,
                    chart: Chart::continued(lam.clone(), mid, bc),
                });
            } else {
                out.push(SweepBox {
                    rect: Rect::new(lo, hi, -delta, -tiny),
                    chart: Chart::fixed(lam.clone(), bc),
                });
            }
            out.push(SweepBox {
                rect: Rect::new(lo, hi, tiny, delta),
                chart: Chart::fixed(lam.clone(), bc),
            });
        }
    }
    out
}

/// Whether a found zero belongs to the counting region and the gated surface.
pub fn counts_toward(p: &SheetPoint, r: f64) -> bool {
    in_count_region(p.k, r) && dist_to_physical(p).is_some_and(|d| d < 1.0 + p.k.norm().sqrt())
}

/// Resonances in the counting region of radius `r`, with multiplicity.
pub fn counting_function(g: &Geometry, r: f64, n_lead: usize) -> Result<CountReport> {
    let model = MatchingModel::new(g, n_lead)?;
    counting_function_with(&model, r, &SearchOptions::default())
}

pub fn counting_function_with(model: &MatchingModel, r: f64, opts: &SearchOptions) -> Result<CountReport> {
    let bc = model.bc;
    let f = bc.first_mode();
    if !(r > (f * f) as f64) {
        return Err(Error::InvalidArgument(format!("r must exceed the lowest threshold, got {r}")));
    }
    let boxes = sweep_boxes(bc, r, opts.delta_excl);
    let results: Vec<Result<FindResult>> = boxes
        .par_iter()
        .map(|b| find_in_box_with(model, &b.chart, &b.rect, opts))
        .collect();
    let mut all = Vec::new();
    let mut unresolved = Vec::new();
    for r in results {
        let r = r?;
        all.extend(r.resonances);
        unresolved.extend(r.unresolved);
    }
    // threshold neighborhoods
    let thr_radius = (2.5 * opts.delta_excl).min(0.5);
    let mut l = f;
    while ((l * l) as f64) < r && (l as usize) < model.n_lead {
        let t = threshold_search_with(model, l, thr_radius, opts)?;
        // keep only what the boxes could not see
        for z in t.resonances {
            let seen = all
                .iter()
                .any(|o: &Resonance| o.point.lambda == z.point.lambda && (o.point.k - z.point.k).norm() < 1e-6);
            if !seen {
                all.push(z);
            }
        }
        unresolved.extend(t.unresolved);
        l += 1;
    }
    let all = sort_and_dedup(all);
    Ok(tally(all, unresolved, r))
}

/// Builds the report for radius `r` from a list of found zeros.
pub fn tally(all: Vec<Resonance>, unresolved: Vec<Cluster>, r: f64) -> CountReport {
    let kept: Vec<Resonance> = all.into_iter().filter(|z| counts_toward(&z.point, r)).collect();
    let mut per: std::collections::BTreeMap<Vec<u32>, u32> = Default::default();
    let mut count = 0;
    for z in &kept {
        *per.entry(z.point.lambda.iter().copied().collect()).or_default() += z.multiplicity;
        count += z.multiplicity;
    }
    CountReport {
        r,
        count,
        region: format!("|Im k| < 1 + sqrt|k|/2, |k| < {r}"),
        per_sheet: per
            .into_iter()
            .map(|(k, v)| SheetCount {
                lambda: lambda_label(&k.into_iter().collect()),
                count: v,
            })
            .collect(),
        resonances: kept,
        unresolved,
    }
}

/// `N(r)` at each radius, from one sweep at the largest one.
pub fn counting_curve_with(model: &MatchingModel, radii: &[f64], opts: &SearchOptions) -> Result<Vec<(f64, u32)>> {
    let Some(rmax) = radii.iter().copied().reduce(f64::max) else {
        return Ok(vec![]);
    };
    let full = counting_function_with(model, rmax, opts)?;
    Ok(radii
        .iter()
        .map(|&r| (r, tally(full.resonances.clone(), vec![], r).count))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackHit {
    pub seed: f64,
    pub hit: Option<Resonance>,
    /// `|λ - k|` for the nearest zero, `None` on a miss.
    pub distance: Option<f64>,
}

/// Boxes covering `[seed - hw, seed + hw] × [-hw, 0]` on the prefix sheet of
/// each threshold interval: a strip straddling the axis through the
/// continued chart, trimmed `1.5δ` short of thresholds, and a box below it.
/// Above the axis the continued chart is the physical sheet, where only real
/// zeros occur, so the upper half is not searched beyond the strip.
pub fn seed_boxes(bc: BoundaryCondition, seed: f64, hw: f64, delta: f64) -> Vec<SweepBox> {
    let (re0, re1) = (seed - hw, seed + hw);
    let margin = 1.5 * delta;
    let mut cuts: Vec<f64> = vec![re0];
    let mut n = bc.first_mode();
    while ((n * n) as f64) < re1 {
        let t = (n * n) as f64;
        if t > re0 {
            cuts.push(t);
        }
        n += 1;
    }
    cuts.push(re1);
    let mut out = Vec::new();
    for w in cuts.windows(2) {
        let mid = 0.5 * (w[0] + w[1]);
        let lower = match n_below(bc, mid) {
            Some(nk) => pattern_lambda(SheetPattern::Prefix { last: nk }, bc),
            None => BTreeSet::new(),
        };
        if hw > delta && w[1] - w[0] > 1e-9 {
            out.push(SweepBox {
                rect: Rect::new(w[0], w[1], -hw, -delta),
                chart: Chart::fixed(lower.clone(), bc),
            });
        }
        let a = if is_threshold(bc, w[0]) { w[0] + margin } else { w[0] };
        let b = if is_threshold(bc, w[1]) { w[1] - margin } else { w[1] };
        if b - a > 1e-9 {
            let rect = Rect::new(a, b, -delta.min(hw), delta.min(hw) * 1.0137);
            out.push(SweepBox {
                rect,
                chart: Chart::continued(lower, 0.5 * (a + b), bc),
            });
        }
    }
    out
}

/// For each seed, the nearest zero in a box of half-width `max(0.5, 1/λ)`.
pub fn track_family(g: &Geometry, seeds: &[f64], n_lead: usize, tol: f64) -> Result<Vec<TrackHit>> {
    let model = MatchingModel::new(g, n_lead)?;
    let opts = SearchOptions {
        tol,
        ..SearchOptions::default()
    };
    track_family_with(&model, seeds, &opts)
}

pub fn track_family_with(model: &MatchingModel, seeds: &[f64], opts: &SearchOptions) -> Result<Vec<TrackHit>> {
    seeds
        .par_iter()
        .map(|&seed| {
            let hw = 0.5f64.max(1.0 / seed.abs().max(1e-300));
            let mut found: Vec<Resonance> = Vec::new();
            for b in seed_boxes(model.bc, seed, hw, opts.delta_excl) {
                found.extend(find_in_box_with(model, &b.chart, &b.rect, opts)?.resonances);
            }
            let best = found
                .into_iter()
                .map(|r| ((r.point.k - seed).norm(), r))
                .min_by(|a, b| a.0.total_cmp(&b.0));
            Ok(match best {
                Some((d, r)) => TrackHit {
                    seed,
                    hit: Some(r),
                    distance: Some(d),
                },
                None => TrackHit {
                    seed,
                    hit: None,
                    distance: None,
                },
            })
        })
        .collect()
}

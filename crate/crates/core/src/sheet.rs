//! Points on the branched surface over the spectral plane.
//!
//! A point is the projection `k` together with the set `Λ` of transverse
//! modes whose square root `sqrt(n² - k)` is taken on the non-principal
//! branch. The principal branch has `Re s ≥ 0`; on the cut itself
//! (`k` real, `k > n²`) the value is the limit from `Im k > 0`, namely
//! `s = -i sqrt(k - n²)`. Every module uses this one convention.

use std::collections::BTreeSet;
use std::fmt;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryCondition {
    Dirichlet,
    Neumann,
}

impl BoundaryCondition {
    /// Smallest admissible transverse index.
    pub fn first_mode(self) -> u32 {
        match self {
            BoundaryCondition::Dirichlet => 1,
            BoundaryCondition::Neumann => 0,
        }
    }

    pub fn is_valid_mode(self, n: u32) -> bool {
        n >= self.first_mode()
    }

    pub fn check_mode(self, n: u32) -> Result<()> {
        if self.is_valid_mode(n) {
            Ok(())
        } else {
            Err(Error::InvalidMode {
                n,
                bc: self.name(),
            })
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BoundaryCondition::Dirichlet => "dirichlet",
            BoundaryCondition::Neumann => "neumann",
        }
    }
}

impl fmt::Display for BoundaryCondition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for BoundaryCondition {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "dirichlet" | "d" => Ok(BoundaryCondition::Dirichlet),
            "neumann" | "n" => Ok(BoundaryCondition::Neumann),
            other => Err(Error::Parse(format!("unknown boundary condition {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Threshold {
    pub n: u32,
    pub value: f64,
}

/// All thresholds `n²` with `n² ≤ kmax`, ascending.
pub fn thresholds(bc: BoundaryCondition, kmax: f64) -> Vec<Threshold> {
    let mut out = Vec::new();
    if !(kmax >= 0.0) {
        return out;
    }
    let mut n = bc.first_mode();
    loop {
        let v = (n as f64) * (n as f64);
        if v > kmax {
            break;
        }
        out.push(Threshold { n, value: v });
        n += 1;
    }
    out
}

/// The three admissible shapes of `Λ` used by searches and region gating.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SheetPattern {
    Physical,
    /// All modes from the first admissible one through `last`.
    Prefix { last: u32 },
    /// Just the one mode `n`.
    Single { n: u32 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SheetPoint {
    pub k: Complex64,
    pub lambda: BTreeSet<u32>,
    pub bc: BoundaryCondition,
}

impl SheetPoint {
    pub fn physical(k: Complex64, bc: BoundaryCondition) -> Self {
        SheetPoint {
            k,
            lambda: BTreeSet::new(),
            bc,
        }
    }

    pub fn new(k: Complex64, lambda: impl IntoIterator<Item = u32>, bc: BoundaryCondition) -> Result<Self> {
        let lambda: BTreeSet<u32> = lambda.into_iter().collect();
        for &n in &lambda {
            bc.check_mode(n)?;
        }
        Ok(SheetPoint { k, lambda, bc })
    }

    pub fn with_k(&self, k: Complex64) -> Self {
        SheetPoint {
            k,
            lambda: self.lambda.clone(),
            bc: self.bc,
        }
    }

    pub fn is_physical(&self) -> bool {
        self.lambda.is_empty()
    }

    /// Classifies `Λ` against the admissible patterns; `None` for any other set.
    pub fn pattern(&self) -> Option<SheetPattern> {
        pattern_of(&self.lambda, self.bc)
    }

    pub fn flipped(&self, n: u32) -> bool {
        self.lambda.contains(&n)
    }
}

pub fn pattern_of(lambda: &BTreeSet<u32>, bc: BoundaryCondition) -> Option<SheetPattern> {
    if lambda.is_empty() {
        return Some(SheetPattern::Physical);
    }
    let first = bc.first_mode();
    let lo = *lambda.iter().next().unwrap();
    let hi = *lambda.iter().next_back().unwrap();
    let contiguous = (hi - lo + 1) as usize == lambda.len();
    if contiguous && lo == first {
        return Some(SheetPattern::Prefix { last: hi });
    }
    if lambda.len() == 1 {
        return Some(SheetPattern::Single { n: lo });
    }
    None
}

/// The set of modes toggled by that pattern.
pub fn pattern_lambda(p: SheetPattern, bc: BoundaryCondition) -> BTreeSet<u32> {
    match p {
        SheetPattern::Physical => BTreeSet::new(),
        SheetPattern::Prefix { last } => (bc.first_mode()..=last).collect(),
        SheetPattern::Single { n } => std::iter::once(n).collect(),
    }
}

/// Principal root of `w` with the cut convention described in the module docs.
pub fn principal_sqrt(w: Complex64) -> Complex64 {
    if w.im == 0.0 && w.re < 0.0 {
        Complex64::new(0.0, -(-w.re).sqrt())
    } else {
        w.sqrt()
    }
}

/// `s_n` with `s_n² = n² - k`, on the branch fixed by `Λ`.
pub fn branch_sqrt(n: u32, p: &SheetPoint) -> Result<Complex64> {
    p.bc.check_mode(n)?;
    let t = (n as f64) * (n as f64);
    if p.k.re == t && p.k.im == 0.0 {
        return Err(Error::BranchPoint { n, k: p.k.re, threshold: t });
    }
    let w = Complex64::new(t - p.k.re, -p.k.im);
    let s = principal_sqrt(w);
    Ok(if p.lambda.contains(&n) { -s } else { s })
}

fn is_threshold(bc: BoundaryCondition, x: f64) -> bool {
    if x < 0.0 {
        return false;
    }
    let n = x.sqrt().round();
    n * n == x && (n as u32) >= bc.first_mode()
}

/// Sheet reached by crossing the real axis at `x`: every cut `[n², ∞)` that
/// contains `x` is crossed, so those modes toggle. The projection is
/// reflected to the other half-plane.
pub fn cross_real_axis(p: &SheetPoint, x: f64) -> Result<SheetPoint> {
    if is_threshold(p.bc, x) {
        return Err(Error::InvalidArgument(format!("crossing point {x} is a threshold")));
    }
    let mut lambda = p.lambda.clone();
    let mut n = p.bc.first_mode();
    while ((n as f64) * (n as f64)) < x {
        if !lambda.remove(&n) {
            lambda.insert(n);
        }
        n += 1;
    }
    Ok(SheetPoint {
        k: p.k.conj(),
        lambda,
        bc: p.bc,
    })
}

/// Sheet reached by a small loop around the branch point `n²` alone.
pub fn encircle_threshold(p: &SheetPoint, n: u32) -> Result<SheetPoint> {
    p.bc.check_mode(n)?;
    let mut lambda = p.lambda.clone();
    if !lambda.remove(&n) {
        lambda.insert(n);
    }
    Ok(SheetPoint {
        k: p.k,
        lambda,
        bc: p.bc,
    })
}

/// Greatest admissible `n` with `n² < x`, if any.
pub fn n_below(bc: BoundaryCondition, x: f64) -> Option<u32> {
    let first = bc.first_mode();
    if x <= (first * first) as f64 {
        return None;
    }
    let mut n = x.sqrt().floor() as u32;
    while (n as f64) * (n as f64) >= x {
        n -= 1;
    }
    while ((n + 1) as f64) * ((n + 1) as f64) < x {
        n += 1;
    }
    Some(n.max(first))
}

/// Lead roots in the threshold coordinate `k = L² - z²` for `count` modes
/// starting at the first admissible one, with the sheet label they imply.
///
/// `s_L = z`; for `n < L`, `s_n = -i sqrt(k - n²)`, analytic across
/// `k = L²`, or its negative when `flip_low`; for `n > L`, the principal
/// root. The two variants cover the four local sheets that meet at `L²`.
pub fn threshold_roots(
    bc: BoundaryCondition,
    l: u32,
    z: Complex64,
    flip_low: bool,
    count: usize,
) -> (Complex64, Vec<Complex64>, BTreeSet<u32>) {
    let t = (l * l) as f64;
    let k = Complex64::new(t, 0.0) - z * z;
    let sigma = if flip_low { 1.0 } else { -1.0 };
    let mut lambda = BTreeSet::new();
    let s = (0..count as u32)
        .map(|i| {
            let n = bc.first_mode() + i;
            let nn = (n * n) as f64;
            let p = principal_sqrt(Complex64::new(nn, 0.0) - k);
            let v = if n == l {
                z
            } else if n < l {
                Complex64::new(0.0, sigma) * (k - nn).sqrt()
            } else {
                return p;
            };
            if (v + p).norm() < (v - p).norm() {
                lambda.insert(n);
            }
            v
        })
        .collect();
    (k, s, lambda)
}

/// Approximate distance from `p` to the physical plane; `None` outside the
/// admissible patterns.
///
/// A prefix set counts as the prefix sheet only when it ends at `n_k`, the
/// last mode open at `Re k`; a one-element set that is not that prefix is a
/// single-toggle sheet, whose path has to round the branch point.
pub fn dist_to_physical(p: &SheetPoint) -> Option<f64> {
    if p.lambda.is_empty() {
        return Some(0.0);
    }
    if let Some(SheetPattern::Prefix { last }) = p.pattern() {
        if n_below(p.bc, p.k.re) == Some(last) {
            return Some(p.k.im.abs());
        }
    }
    if p.lambda.len() == 1 {
        let n = *p.lambda.iter().next().unwrap();
        let t = (n as f64) * (n as f64);
        return Some(p.k.im.abs() + 2.0 * (p.k.re - t).abs());
    }
    None
}

/// Membership in the gated region: close to the physical plane relative to
/// `1 + sqrt|k|` and farther than `alpha` from every threshold.
pub fn in_region(p: &SheetPoint, alpha: f64) -> bool {
    let Some(d) = dist_to_physical(p) else {
        return false;
    };
    let r = p.k.norm();
    if !(d < 1.0 + r.sqrt()) {
        return false;
    }
    min_threshold_distance(p.k, p.bc) > alpha
}

/// `min_n |k - n²|` over admissible modes.
pub fn min_threshold_distance(k: Complex64, bc: BoundaryCondition) -> f64 {
    let first = bc.first_mode() as f64;
    let c = k.re.max(0.0).sqrt().floor().max(first);
    let mut best = f64::INFINITY;
    for n in [c - 1.0, c, c + 1.0] {
        if n >= first {
            best = best.min((k - n * n).norm());
        }
    }
    best
}

/// Region used by the counting function: `|Im k| < 1 + sqrt|k| / 2`, `|k| < r`.
pub fn in_count_region(k: Complex64, r: f64) -> bool {
    let a = k.norm();
    a < r && k.im.abs() < 1.0 + 0.5 * a.sqrt()
}

// ---- serialization: {re, im, lambda, bc}

#[derive(Serialize, Deserialize)]
struct SheetPointRepr {
    re: f64,
    im: f64,
    lambda: Vec<u32>,
    bc: BoundaryCondition,
}

impl Serialize for SheetPoint {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        SheetPointRepr {
            re: self.k.re,
            im: self.k.im,
            lambda: self.lambda.iter().copied().collect(),
            bc: self.bc,
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for SheetPoint {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = SheetPointRepr::deserialize(d)?;
        SheetPoint::new(Complex64::new(r.re, r.im), r.lambda, r.bc).map_err(serde::de::Error::custom)
    }
}

/// `Λ` as a compact label, e.g. `{}` or `{1,2}`.
pub fn lambda_label(lambda: &BTreeSet<u32>) -> String {
    let parts: Vec<String> = lambda.iter().map(|n| n.to_string()).collect();
    format!("{{{}}}", parts.join(","))
}

/// Parses `{}`, `{1,2}`, `1,2`, `1`, `prefix:3`, `physical`, `0..3`.
pub fn parse_lambda(s: &str, bc: BoundaryCondition) -> Result<BTreeSet<u32>> {
    let t = s.trim();
    if t.is_empty() || t == "{}" || t.eq_ignore_ascii_case("physical") {
        return Ok(BTreeSet::new());
    }
    if let Some(rest) = t.strip_prefix("prefix:") {
        let last: u32 = rest.trim().parse().map_err(|_| Error::Parse(format!("bad sheet {s:?}")))?;
        bc.check_mode(last)?;
        return Ok(pattern_lambda(SheetPattern::Prefix { last }, bc));
    }
    let inner = t.trim_start_matches('{').trim_end_matches('}');
    if let Some((a, b)) = inner.split_once("..") {
        let a: u32 = a.trim().parse().map_err(|_| Error::Parse(format!("bad sheet {s:?}")))?;
        let b: u32 = b.trim().parse().map_err(|_| Error::Parse(format!("bad sheet {s:?}")))?;
        let set: BTreeSet<u32> = (a..=b).collect();
        for &n in &set {
            bc.check_mode(n)?;
        }
        return Ok(set);
    }
    let mut set = BTreeSet::new();
    for part in inner.split([',', ';', ' ']).filter(|p| !p.is_empty()) {
        let n: u32 = part.trim().parse().map_err(|_| Error::Parse(format!("bad sheet {s:?}")))?;
        bc.check_mode(n)?;
        set.insert(n);
    }
    Ok(set)
}

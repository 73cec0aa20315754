//! Strips of width π with a compact perturbation made of rectangular pieces.
//!
//! A geometry is an ordered list of segments: a half-infinite lead, any
//! number of finite rectangles, another lead. The finite part is laid out
//! consecutively along `x` and centered at `x = 0`. Each segment spans
//! `offset < y < offset + width`.

use std::f64::consts::PI;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sheet::BoundaryCondition;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Segment {
    /// `f64::INFINITY` marks a lead.
    pub length: f64,
    pub width: f64,
    pub offset: f64,
}

impl Segment {
    pub fn lead() -> Self {
        Segment {
            length: f64::INFINITY,
            width: PI,
            offset: 0.0,
        }
    }

    pub fn new(length: f64, width: f64, offset: f64) -> Self {
        Segment { length, width, offset }
    }

    pub fn is_lead(&self) -> bool {
        self.length.is_infinite()
    }

    pub fn top(&self) -> f64 {
        self.offset + self.width
    }

    /// Whether this piece coincides with the unperturbed strip cross-section.
    pub fn is_strip(&self) -> bool {
        (self.width - PI).abs() < 1e-14 && self.offset.abs() < 1e-14
    }

    /// Transverse wavenumber of mode `n`.
    pub fn q(&self, n: u32) -> f64 {
        n as f64 * PI / self.width
    }

    pub fn mirrored(&self) -> Segment {
        *self
    }
}

/// Common transverse interval of two segments, if nonempty.
pub fn aperture(a: &Segment, b: &Segment) -> Option<(f64, f64)> {
    let lo = a.offset.max(b.offset);
    let hi = a.top().min(b.top());
    if hi > lo {
        Some((lo, hi))
    } else {
        None
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub segment: Option<usize>,
    pub message: String,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.segment {
            Some(i) => write!(f, "segment {i}: {}", self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    pub segments: Vec<Segment>,
    pub bc: BoundaryCondition,
    /// Radius `M` of a ball about the origin containing the perturbation.
    pub radius: f64,
}

impl Geometry {
    /// Builds a geometry and derives its perturbation radius.
    pub fn new(segments: Vec<Segment>, bc: BoundaryCondition) -> Self {
        let mut g = Geometry {
            segments,
            bc,
            radius: 0.0,
        };
        g.radius = g.perturbation_radius();
        g
    }

    pub fn free_strip(bc: BoundaryCondition) -> Self {
        Geometry::new(vec![Segment::lead(), Segment::lead()], bc)
    }

    /// Lead, finite pieces, lead.
    pub fn from_pieces(pieces: &[Segment], bc: BoundaryCondition) -> Self {
        let mut segs = vec![Segment::lead()];
        segs.extend_from_slice(pieces);
        segs.push(Segment::lead());
        Geometry::new(segs, bc)
    }

    pub fn finite(&self) -> &[Segment] {
        let n = self.segments.len();
        if n < 2 {
            &[]
        } else {
            &self.segments[1..n - 1]
        }
    }

    pub fn total_length(&self) -> f64 {
        self.finite().iter().map(|s| s.length).sum()
    }

    /// `x` coordinates of the junction planes, left to right.
    pub fn junctions(&self) -> Vec<f64> {
        let mut x = -0.5 * self.total_length();
        let mut out = vec![x];
        for s in self.finite() {
            x += s.length;
            out.push(x);
        }
        out
    }

    /// Largest distance from the origin to a corner of a piece that differs
    /// from the strip.
    pub fn perturbation_radius(&self) -> f64 {
        let xs = self.junctions();
        let mut m: f64 = 0.0;
        for (i, s) in self.finite().iter().enumerate() {
            if s.is_strip() {
                continue;
            }
            for x in [xs[i], xs[i + 1]] {
                for y in [s.offset, s.top(), 0.0, PI] {
                    m = m.max((x * x + y * y).sqrt());
                }
            }
        }
        m
    }

    pub fn mirrored(&self) -> Geometry {
        let segs: Vec<Segment> = self.segments.iter().rev().map(|s| s.mirrored()).collect();
        Geometry {
            segments: segs,
            bc: self.bc,
            radius: self.radius,
        }
    }

    pub fn is_free(&self) -> bool {
        self.finite().iter().all(|s| s.is_strip())
    }

    /// Fails with the collected violations if any.
    pub fn check(&self) -> Result<()> {
        let v = validate(self);
        if v.is_empty() {
            Ok(())
        } else {
            let msg: Vec<String> = v.iter().map(|x| x.to_string()).collect();
            Err(Error::InvalidGeometry(msg.join("; ")))
        }
    }

    pub fn from_json(text: &str) -> Result<Geometry> {
        let repr: GeometryRepr = serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        Ok(repr.into_geometry())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&GeometryRepr::from_geometry(self)).expect("geometry serializes")
    }

    pub fn to_value(&self) -> serde_json::Value {
        serde_json::to_value(GeometryRepr::from_geometry(self)).expect("geometry serializes")
    }
}

/// Lists every violated invariant; empty means valid.
pub fn validate(g: &Geometry) -> Vec<Violation> {
    let mut out = Vec::new();
    let n = g.segments.len();
    if n < 2 {
        out.push(Violation {
            segment: None,
            message: "a geometry needs two leads".into(),
        });
        return out;
    }
    for (i, s) in g.segments.iter().enumerate() {
        let end = i == 0 || i == n - 1;
        if end {
            if !s.is_lead() {
                out.push(Violation {
                    segment: Some(i),
                    message: "first and last segments must be leads (length inf)".into(),
                });
            }
            if (s.width - PI).abs() > 1e-12 {
                out.push(Violation {
                    segment: Some(i),
                    message: "lead width must be π".into(),
                });
            }
            if s.offset.abs() > 1e-12 {
                out.push(Violation {
                    segment: Some(i),
                    message: "lead offset must be 0".into(),
                });
            }
        } else {
            if s.is_lead() {
                out.push(Violation {
                    segment: Some(i),
                    message: "leads may only appear first and last".into(),
                });
            } else if !(s.length > 0.0) || !s.length.is_finite() {
                out.push(Violation {
                    segment: Some(i),
                    message: "length must be positive".into(),
                });
            }
            if !(s.width > 0.0) || !s.width.is_finite() {
                out.push(Violation {
                    segment: Some(i),
                    message: "width must be positive".into(),
                });
            }
            if !s.offset.is_finite() {
                out.push(Violation {
                    segment: Some(i),
                    message: "offset must be finite".into(),
                });
            }
        }
    }
    for i in 0..n - 1 {
        if aperture(&g.segments[i], &g.segments[i + 1]).is_none() {
            out.push(Violation {
                segment: Some(i + 1),
                message: format!("no common aperture with segment {i}"),
            });
        }
    }
    let need = g.perturbation_radius();
    if g.radius + 1e-12 < need {
        out.push(Violation {
            segment: None,
            message: format!("radius {} does not contain the perturbation (needs {need})", g.radius),
        });
    }
    out
}

/// Mode indices used for a truncation of `count` modes.
pub fn mode_indices(bc: BoundaryCondition, count: usize) -> impl Iterator<Item = u32> {
    let f = bc.first_mode();
    (0..count as u32).map(move |i| i + f)
}

/// Orthonormal transverse mode `n` of a segment at height `y`.
pub fn segment_mode(s: &Segment, bc: BoundaryCondition, n: u32, y: f64) -> f64 {
    let t = s.q(n) * (y - s.offset);
    match bc {
        BoundaryCondition::Dirichlet => (2.0 / s.width).sqrt() * t.sin(),
        BoundaryCondition::Neumann if n == 0 => 1.0 / s.width.sqrt(),
        BoundaryCondition::Neumann => (2.0 / s.width).sqrt() * t.cos(),
    }
}

fn amplitude(s: &Segment, bc: BoundaryCondition, n: u32) -> f64 {
    if bc == BoundaryCondition::Neumann && n == 0 {
        1.0 / s.width.sqrt()
    } else {
        (2.0 / s.width).sqrt()
    }
}

fn sinc(t: f64) -> f64 {
    if t.abs() < 1e-4 {
        let t2 = t * t;
        1.0 - t2 / 6.0 + t2 * t2 / 120.0
    } else {
        t.sin() / t
    }
}

/// `∫_a^b cos(α y + c) dy` in a form that stays accurate as `α → 0`.
fn int_cos(alpha: f64, c: f64, a: f64, b: f64) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    (b - a) * (alpha * mid + c).cos() * sinc(alpha * half)
}

/// `C[m][n] = ∫_aperture φ^L_m φ^R_n dy` over orthonormal modes; rows index
/// the left segment's modes, columns the right's.
pub fn overlap_matrix(left: &Segment, right: &Segment, n_left: usize, n_right: usize, bc: BoundaryCondition) -> DMatrix<f64> {
    let Some((a, b)) = aperture(left, right) else {
        return DMatrix::zeros(n_left, n_right);
    };
    // φ(y) = A cos(q (y - off) - δ), δ = π/2 for sines
    let delta = match bc {
        BoundaryCondition::Dirichlet => 0.5 * PI,
        BoundaryCondition::Neumann => 0.0,
    };
    let lm: Vec<u32> = mode_indices(bc, n_left).collect();
    let rm: Vec<u32> = mode_indices(bc, n_right).collect();
    DMatrix::from_fn(n_left, n_right, |i, j| {
        let (m, n) = (lm[i], rm[j]);
        let (q1, q2) = (left.q(m), right.q(n));
        let c1 = -q1 * left.offset - delta;
        let c2 = -q2 * right.offset - delta;
        let amp = amplitude(left, bc, m) * amplitude(right, bc, n);
        0.5 * amp * (int_cos(q1 - q2, c1 - c2, a, b) + int_cos(q1 + q2, c1 + c2, a, b))
    })
}

/// Sag of a circular arc of radius `r` at distance `x` from its vertex.
fn sag(r: f64, x: f64) -> f64 {
    r - (r * r - x * x).max(0.0).sqrt()
}

/// Half-length of the two-arc cavity: where the gap has shrunk from `2d` to `d`.
pub fn arc_half_length(d: f64, r1: f64, r2: f64) -> f64 {
    let f = |x: f64| sag(r1, x) + sag(r2, x) - d;
    let (mut lo, mut hi) = (0.0, r1.min(r2));
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 0.0 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Exact arc profile: lower and upper wall heights at `x`.
pub fn arc_walls(d: f64, r1: f64, r2: f64, x: f64) -> (f64, f64) {
    let c = 0.5 * PI;
    (c - d + sag(r2, x), c + d - sag(r1, x))
}

/// Staircase approximation of a two-mirror cavity.
///
/// The mirrors are circular arcs of radii `r1` (upper) and `r2` (lower)
/// facing each other across the strip's midline, `2d` apart on the axis
/// `x = 0`. The cavity runs along `x` until the gap has closed to `d`;
/// there it opens into the leads. Each step samples the gap at its
/// midpoint.
pub fn staircase_from_arcs(d: f64, r1: f64, r2: f64, steps: usize) -> Result<Geometry> {
    if !(d > 0.0) {
        return Err(Error::InvalidArgument("mirror half-separation must be positive".into()));
    }
    if !(r1 > 2.0 * d && r2 > 2.0 * d) {
        return Err(Error::InvalidArgument(format!(
            "stability requires r1, r2 > 2d (got d={d}, r1={r1}, r2={r2})"
        )));
    }
    if !(d < 0.5 * PI) {
        return Err(Error::InvalidArgument("mirrors must fit inside the strip (d < π/2)".into()));
    }
    if steps == 0 {
        return Err(Error::InvalidArgument("steps must be at least 1".into()));
    }
    let a = arc_half_length(d, r1, r2);
    let dx = 2.0 * a / steps as f64;
    let pieces: Vec<Segment> = (0..steps)
        .map(|i| {
            let x = -a + (i as f64 + 0.5) * dx;
            let (lo, hi) = arc_walls(d, r1, r2, x);
            Segment::new(dx, hi - lo, lo)
        })
        .collect();
    Ok(Geometry::from_pieces(&pieces, BoundaryCondition::Dirichlet))
}

// ---- JSON

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum LengthRepr {
    Num(f64),
    Text(String),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SegmentRepr {
    length: LengthRepr,
    width: f64,
    #[serde(default)]
    offset: f64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct GeometryRepr {
    bc: BoundaryCondition,
    segments: Vec<SegmentRepr>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    radius: Option<f64>,
}

impl GeometryRepr {
    fn from_geometry(g: &Geometry) -> Self {
        GeometryRepr {
            bc: g.bc,
            segments: g
                .segments
                .iter()
                .map(|s| SegmentRepr {
                    length: if s.is_lead() {
                        LengthRepr::Text("inf".into())
                    } else {
                        LengthRepr::Num(s.length)
                    },
                    width: s.width,
                    offset: s.offset,
                })
                .collect(),
            radius: Some(g.radius),
        }
    }

    fn into_geometry(self) -> Geometry {
        let segments: Vec<Segment> = self
            .segments
            .into_iter()
            .map(|s| {
                let length = match s.length {
                    LengthRepr::Num(x) => x,
                    LengthRepr::Text(t) if t.trim().eq_ignore_ascii_case("inf") => f64::INFINITY,
                    // anything else is left invalid so validation reports it
                    LengthRepr::Text(_) => f64::NAN,
                };
                Segment::new(length, s.width, s.offset)
            })
            .collect();
        let mut g = Geometry::new(segments, self.bc);
        if let Some(r) = self.radius {
            g.radius = r;
        }
        g
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const D: BoundaryCondition = BoundaryCondition::Dirichlet;
    const N: BoundaryCondition = BoundaryCondition::Neumann;

    fn quad(f: impl Fn(f64) -> f64, a: f64, b: f64) -> f64 {
        // composite Simpson
        let n = 4000;
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn free_strip_is_valid() {
        assert!(validate(&Geometry::free_strip(D)).is_empty());
    }

    #[test]
    fn wide_lead_is_rejected() {
        let g = Geometry::new(vec![Segment::new(f64::INFINITY, 2.0 * PI, 0.0), Segment::lead()], D);
        let v = validate(&g);
        assert!(v.iter().any(|x| x.message == "lead width must be π" && x.segment == Some(0)));
    }

    #[test]
    fn disjoint_apertures_are_rejected() {
        let g = Geometry::from_pieces(&[Segment::new(1.0, 1.0, 0.0), Segment::new(1.0, 1.0, 2.0)], D);
        let v = validate(&g);
        assert!(v.iter().any(|x| x.segment == Some(2) && x.message.contains("aperture")));
    }

    #[test]
    fn overlap_identity_on_equal_segments() {
        for bc in [D, N] {
            let s = Segment::new(1.0, 1.7, 0.3);
            let c = overlap_matrix(&s, &s, 6, 6, bc);
            assert!((c - DMatrix::identity(6, 6)).norm() < 1e-13);
        }
    }

    #[test]
    fn overlap_closed_form_against_quadrature() {
        let l = Segment::lead();
        let r = Segment::new(1.0, 0.5 * PI, 0.0);
        let c = overlap_matrix(&l, &r, 1, 1, D);
        let want = quad(|y| (2.0 / PI).sqrt() * y.sin() * (4.0 / PI).sqrt() * (2.0 * y).sin(), 0.0, 0.5 * PI);
        assert!((c[(0, 0)] - want).abs() < 1e-10);
        // a generic shifted pair, both conditions
        let a = Segment::new(1.0, 2.3, -0.4);
        let b = Segment::new(1.0, 1.1, 0.2);
        for bc in [D, N] {
            let c = overlap_matrix(&a, &b, 5, 4, bc);
            for i in 0..5 {
                for j in 0..4 {
                    let (m, n) = (i as u32 + bc.first_mode(), j as u32 + bc.first_mode());
                    let q = quad(|y| segment_mode(&a, bc, m, y) * segment_mode(&b, bc, n, y), 0.2, 1.3);
                    assert!((c[(i, j)] - q).abs() < 1e-10, "{bc} {i} {j}");
                }
            }
        }
    }

    #[test]
    fn overlap_transpose_symmetry() {
        let a = Segment::new(1.0, 2.3, -0.4);
        let b = Segment::new(1.0, 1.1, 0.2);
        let c1 = overlap_matrix(&a, &b, 5, 7, N);
        let c2 = overlap_matrix(&b, &a, 7, 5, N);
        assert!((c1 - c2.transpose()).norm() < 1e-14);
    }

    #[test]
    fn parseval_deficiency_decreases() {
        // narrow modes expanded in the wide basis: C^T C -> I
        let wide = Segment::lead();
        let narrow = Segment::new(1.0, 1.3, 0.7);
        let mut last = f64::INFINITY;
        for nr in [5usize, 10, 20, 40, 80] {
            let c = overlap_matrix(&wide, &narrow, nr, 3, D);
            let defect = (c.transpose() * &c - DMatrix::identity(3, 3)).norm();
            assert!(defect < last);
            last = defect;
        }
        assert!(last < 1e-2);
    }

    #[test]
    fn staircase_single_step_is_full_gap() {
        let g = staircase_from_arcs(1.0, 4.0, 4.0, 1).unwrap();
        assert_eq!(g.finite().len(), 1);
        assert!((g.finite()[0].width - 2.0).abs() < 1e-14);
        assert!(validate(&g).is_empty());
    }

    #[test]
    fn staircase_converges_to_arcs() {
        let (d, r1, r2) = (1.0, 4.0, 6.0);
        let a = arc_half_length(d, r1, r2);
        let mut last = f64::INFINITY;
        for steps in [4usize, 16, 64, 256] {
            let g = staircase_from_arcs(d, r1, r2, steps).unwrap();
            let xs = g.junctions();
            let mut err: f64 = 0.0;
            for (i, s) in g.finite().iter().enumerate() {
                for t in [0.0, 0.5, 1.0] {
                    let x = (xs[i] + t * (xs[i + 1] - xs[i])).clamp(-a, a);
                    let (lo, hi) = arc_walls(d, r1, r2, x);
                    err = err.max((s.offset - lo).abs()).max((s.top() - hi).abs());
                }
            }
            assert!(err < last);
            last = err;
        }
        assert!(last < 1e-2);
    }

    #[test]
    fn staircase_symmetric_when_radii_equal() {
        let g = staircase_from_arcs(1.0, 4.0, 4.0, 8).unwrap();
        let m = g.mirrored();
        for (a, b) in g.segments.iter().zip(&m.segments) {
            assert!((a.width - b.width).abs() < 1e-14 && (a.offset - b.offset).abs() < 1e-14);
        }
    }

    #[test]
    fn staircase_rejects_unstable() {
        assert!(staircase_from_arcs(1.0, 2.0, 4.0, 4).is_err());
        assert!(staircase_from_arcs(1.0, 4.0, 4.0, 0).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let text = r#"{"bc":"dirichlet","segments":[{"length":"inf","width":3.141592653589793,"offset":0},
            {"length":3.141592653589793,"width":6.283185307179586,"offset":-1.5707963267948966},
            {"length":"inf","width":3.141592653589793,"offset":0}]}"#;
        let g = Geometry::from_json(text).unwrap();
        assert!(validate(&g).is_empty());
        assert!(g.radius > 4.9 && g.radius < 5.0);
        let h = Geometry::from_json(&g.to_json()).unwrap();
        assert_eq!(g, h);
        assert!(Geometry::from_json(r#"{"bc":"x","segments":[]}"#).is_err());
    }

    proptest! {
        #[test]
        fn staircases_always_validate(d in 0.2f64..1.5, f1 in 1.05f64..10.0, f2 in 1.05f64..10.0, steps in 1usize..40) {
            let g = staircase_from_arcs(d, 2.0 * d * f1, 2.0 * d * f2, steps).unwrap();
            prop_assert!(validate(&g).is_empty());
        }
    }
}

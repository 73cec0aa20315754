//! Mode matching on a chain of rectangles between two leads.
//!
//! The field in each piece is expanded in that piece's orthonormal
//! transverse modes. At every junction the narrower cross-section nests in
//! the wider one (a zero-length aperture piece is inserted when neither
//! does), and the junction carries the value coefficients of one side and
//! the derivative coefficients of the other:
//!
//! * Dirichlet: unknowns `[u_N, u'_W]`, with `u_W = C u_N`, `u'_N = Cᵀ u'_W`;
//! * Neumann: unknowns `[u_W, u'_N]`, with `u_N = Cᵀ u_W`, `u'_W = C u'_N`,
//!
//! where `C` is the overlap matrix from the narrow to the wide basis. Each
//! finite piece contributes two rows per mode linking its end values, and
//! each lead contributes one row per mode stating that the field is
//! `a_in e^{s|ξ|} + a_out e^{-s|ξ|}` in the local lead coordinate.
//!
//! The raw determinant of that system is entire in `k` through the piece
//! rows and analytic on each sheet through the lead rows. To keep it finite
//! over long evanescent pieces, rows with `Re κ L > 2` are rewritten in a
//! divided form and the determinant is restored in log space, then scaled by
//! the constant `Π e^{-q L}`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::geometry::{overlap_matrix, Geometry, Segment};
use crate::linalg::{log_det, LogComplex, LogProduct};
use crate::sheet::{branch_sqrt, BoundaryCondition, SheetPoint};

type C64 = Complex64;

const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
const ONE: C64 = C64 { re: 1.0, im: 0.0 };

/// `(cosh κL, sinh(κL)/κ)` from `κ² L²`, without choosing a branch of `κ`.
pub fn cosh_sinhc(kappa2: C64, length: f64) -> (C64, C64) {
    let x = kappa2 * length * length;
    if x.norm() < 1.0 {
        // even power series
        let (mut c, mut s) = (ONE, ONE);
        let mut term_c = ONE;
        let mut term_s = ONE;
        for j in 1..30 {
            let jf = j as f64;
            term_c = term_c * x / ((2.0 * jf - 1.0) * (2.0 * jf));
            term_s = term_s * x / ((2.0 * jf) * (2.0 * jf + 1.0));
            c += term_c;
            s += term_s;
            if term_c.norm() < 1e-17 * c.norm() && term_s.norm() < 1e-17 * s.norm() {
                break;
            }
        }
        (c, s * length)
    } else {
        let kappa = kappa2.sqrt();
        let z = kappa * length;
        (z.cosh(), z.sinh() / kappa)
    }
}

/// Propagator of `(value, x-derivative)` for one transverse mode over a
/// piece of the given length: `[[cos βL, sin(βL)/β], [-β sin βL, cos βL]]`
/// with `β² = k - (nπ/width)²`.
pub fn segment_transfer(p: &SheetPoint, width: f64, length: f64, n: u32) -> [[C64; 2]; 2] {
    let q = n as f64 * PI / width;
    let kappa2 = C64::new(q * q, 0.0) - p.k;
    let (c, s) = cosh_sinhc(kappa2, length);
    [[c, s], [kappa2 * s, c]]
}

/// `ln(-sinh(κL)/κ)` for `Re κ L` large, with `Re κ ≥ 0`.
fn ln_neg_sinhc(kappa: C64, length: f64) -> C64 {
    let z = kappa * length;
    // sinh z = e^z (1 - e^{-2z}) / 2
    let v = z + (ONE - (-2.0 * z).exp()).ln() - C64::new(2f64.ln(), 0.0) - kappa.ln();
    v + C64::new(0.0, PI)
}

/// Exponent of the constant-free canonical factor for one piece mode.
///
/// `κ L = q L - k L / (2q) + O(q^{-3})`, so scaling each mode by
/// `e^{-qL + kL/(2q)}` keeps the product over modes convergent as the
/// truncation grows while staying entire and zero-free in `k`.
fn canonical_exponent(q: f64, k: C64, length: f64) -> C64 {
    if q > 0.0 {
        C64::new(-q * length, 0.0) + k * (length / (2.0 * q))
    } else {
        ZERO
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Left,
    Right,
}

/// Cached geometry data for a fixed truncation.
#[derive(Debug, Clone)]
pub struct MatchingModel {
    pub bc: BoundaryCondition,
    pub n_lead: usize,
    /// Leads first and last, with zero-length aperture pieces inserted.
    pub pieces: Vec<Segment>,
    pub n_modes: Vec<usize>,
    junctions: Vec<Junction>,
    /// Column offset of each junction's unknowns.
    col: Vec<usize>,
    dim: usize,
    /// Free-strip ratio at the reference point, see [`REFERENCE_K`].
    reference: LogComplex,
}

/// Regular point of every geometry (below the spectrum of a nonnegative
/// operator) at which the normalized determinant is pinned to 1.
///
/// Each added transverse mode multiplies the truncated ratio by a junction
/// factor that is nearly independent of `k`; dividing by the value at a
/// fixed reference point cancels it so the determinant has a limit as the
/// truncation grows.
pub const REFERENCE_K: f64 = -1.0;

#[derive(Debug, Clone)]
struct Junction {
    /// Whether the left piece is the narrow side.
    left_narrow: bool,
    n_narrow: usize,
    n_wide: usize,
    /// Overlap, wide rows by narrow columns.
    c: DMatrix<f64>,
}

/// A linear map from a junction's unknowns to one side's coefficients,
/// stored densely as `(value map, derivative map)`.
struct SideMaps {
    value: DMatrix<f64>,
    deriv: DMatrix<f64>,
}

fn nested(inner: &Segment, outer: &Segment) -> bool {
    inner.offset >= outer.offset - 1e-12 && inner.top() <= outer.top() + 1e-12
}

/// Truncation rule for a piece of the given width.
pub fn modes_for_width(n_lead: usize, width: f64) -> usize {
    ((n_lead as f64 * width / PI) - 1e-9).ceil().max(1.0) as usize
}

impl MatchingModel {
    pub fn new(g: &Geometry, n_lead: usize) -> Result<MatchingModel> {
        if n_lead == 0 {
            return Err(Error::InvalidArgument("n_lead must be at least 1".into()));
        }
        g.check()?;
        let mut pieces: Vec<Segment> = vec![g.segments[0]];
        for s in &g.segments[1..] {
            let prev = *pieces.last().unwrap();
            if !nested(&prev, s) && !nested(s, &prev) {
                let lo = prev.offset.max(s.offset);
                let hi = prev.top().min(s.top());
                pieces.push(Segment::new(0.0, hi - lo, lo));
            }
            pieces.push(*s);
        }
        let last = pieces.len() - 1;
        let n_modes: Vec<usize> = pieces
            .iter()
            .enumerate()
            .map(|(i, s)| if i == 0 || i == last { n_lead } else { modes_for_width(n_lead, s.width) })
            .collect();
        let mut junctions = Vec::new();
        let mut col = Vec::new();
        let mut dim = 0;
        for j in 0..last {
            let (a, b) = (&pieces[j], &pieces[j + 1]);
            let left_narrow = nested(a, b);
            let (narrow, wide, nn, nw) = if left_narrow {
                (a, b, n_modes[j], n_modes[j + 1])
            } else {
                (b, a, n_modes[j + 1], n_modes[j])
            };
            let c = overlap_matrix(wide, narrow, nw, nn, g.bc);
            col.push(dim);
            dim += nn + nw;
            junctions.push(Junction {
                left_narrow,
                n_narrow: nn,
                n_wide: nw,
                c,
            });
        }
        let mut model = MatchingModel {
            bc: g.bc,
            n_lead,
            pieces,
            n_modes,
            junctions,
            col,
            dim,
            reference: LogComplex::ONE,
        };
        let r = SheetPoint::physical(C64::new(REFERENCE_K, 0.0), g.bc);
        let s = model.lead_roots(&r)?;
        model.reference = model.free_ratio(r.k, &s);
        Ok(model)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Coefficient maps at junction `j` for the piece on `side`.
    fn side_maps(&self, j: usize, side: Side) -> SideMaps {
        let jn = &self.junctions[j];
        let (nn, nw) = (jn.n_narrow, jn.n_wide);
        let narrow = (side == Side::Left) == jn.left_narrow;
        let m = nn + nw;
        let eye = |r: usize, c0: usize| {
            let mut a = DMatrix::zeros(r, m);
            for i in 0..r {
                a[(i, c0 + i)] = 1.0;
            }
            a
        };
        let block = |b: &DMatrix<f64>, c0: usize| {
            let mut a = DMatrix::zeros(b.nrows(), m);
            a.view_mut((0, c0), (b.nrows(), b.ncols())).copy_from(b);
            a
        };
        match (self.bc, narrow) {
            // unknowns [u_N, u'_W]
            (BoundaryCondition::Dirichlet, true) => SideMaps {
                value: eye(nn, 0),
                deriv: block(&jn.c.transpose(), nn),
            },
            (BoundaryCondition::Dirichlet, false) => SideMaps {
                value: block(&jn.c, 0),
                deriv: eye(nw, nn),
            },
            // unknowns [u_W, u'_N]
            (BoundaryCondition::Neumann, false) => SideMaps {
                value: eye(nw, 0),
                deriv: block(&jn.c, nw),
            },
            (BoundaryCondition::Neumann, true) => SideMaps {
                value: block(&jn.c.transpose(), 0),
                deriv: eye(nn, nw),
            },
        }
    }

    /// Lead square roots on the sheet of `p`.
    pub fn lead_roots(&self, p: &SheetPoint) -> Result<Vec<C64>> {
        let f = self.bc.first_mode();
        (0..self.n_lead as u32).map(|i| branch_sqrt(f + i, p)).collect()
    }

    /// Builds the system at projection `k` with the given lead roots.
    /// Returns the matrix and the log of the factor that turns its
    /// determinant into the canonical one.
    pub fn build(&self, k: C64, lead_s: &[C64]) -> (DMatrix<C64>, LogComplex) {
        assert_eq!(lead_s.len(), self.n_lead);
        let n = self.dim;
        let mut a = DMatrix::<C64>::zeros(n, n);
        let mut factor = LogProduct::default();
        let mut row = 0;
        let nj = self.junctions.len();

        // left lead: u' - s u = -2 s a_in
        {
            let m = self.side_maps(0, Side::Left);
            let c0 = self.col[0];
            let w = m.value.ncols();
            for i in 0..self.n_lead {
                for c in 0..w {
                    a[(row, c0 + c)] = C64::new(m.deriv[(i, c)], 0.0) - lead_s[i] * m.value[(i, c)];
                }
                row += 1;
            }
        }
        // finite pieces
        for pi in 1..self.pieces.len() - 1 {
            let piece = &self.pieces[pi];
            let l = self.side_maps(pi - 1, Side::Right);
            let r = self.side_maps(pi, Side::Left);
            let (cl, cr) = (self.col[pi - 1], self.col[pi]);
            let (wl, wr) = (l.value.ncols(), r.value.ncols());
            for i in 0..self.n_modes[pi] {
                let nidx = self.bc.first_mode() + i as u32;
                let q = piece.q(nidx);
                let kappa2 = C64::new(q * q, 0.0) - k;
                let kappa = {
                    let s = kappa2.sqrt();
                    if s.re < 0.0 {
                        -s
                    } else {
                        s
                    }
                };
                factor.push_log(&LogComplex::exp_of(canonical_exponent(q, k, piece.length)));
                if kappa.re * piece.length > 2.0 {
                    // divided rows, det_low = det_high * (-S)
                    // c/S = κ coth z, 1/S = 2κ e^{-z} / (1 - e^{-2z}), z = κL
                    let e = (-kappa * piece.length).exp();
                    let e2 = e * e;
                    let cs = kappa * (ONE + e2) / (ONE - e2);
                    let is = 2.0 * kappa * e / (ONE - e2);
                    for col in 0..wl {
                        a[(row, cl + col)] += cs * l.value[(i, col)] + l.deriv[(i, col)];
                        a[(row + 1, cl + col)] += is * l.value[(i, col)];
                    }
                    for col in 0..wr {
                        a[(row, cr + col)] += -is * r.value[(i, col)];
                        a[(row + 1, cr + col)] += C64::new(r.deriv[(i, col)], 0.0) - cs * r.value[(i, col)];
                    }
                    factor.push_log(&LogComplex::exp_of(ln_neg_sinhc(kappa, piece.length)));
                } else {
                    let (c, s) = cosh_sinhc(kappa2, piece.length);
                    for col in 0..wl {
                        a[(row, cl + col)] += -c * l.value[(i, col)] - s * l.deriv[(i, col)];
                        a[(row + 1, cl + col)] += -kappa2 * s * l.value[(i, col)] - c * l.deriv[(i, col)];
                    }
                    for col in 0..wr {
                        a[(row, cr + col)] += r.value[(i, col)];
                        a[(row + 1, cr + col)] += r.deriv[(i, col)];
                    }
                }
                row += 2;
            }
        }
        // right lead: u' + s u = 2 s a_in
        {
            let m = self.side_maps(nj - 1, Side::Right);
            let c0 = self.col[nj - 1];
            let w = m.value.ncols();
            for i in 0..self.n_lead {
                for c in 0..w {
                    a[(row, c0 + c)] = C64::new(m.deriv[(i, c)], 0.0) + lead_s[i] * m.value[(i, c)];
                }
                row += 1;
            }
        }
        debug_assert_eq!(row, n);
        (a, factor.finish())
    }

    /// Canonical matching determinant for given lead roots, in log space.
    pub fn log_det_with(&self, k: C64, lead_s: &[C64]) -> LogComplex {
        let (a, f) = self.build(k, lead_s);
        log_det(&a).mul(&f)
    }

    /// Total length of the finite part.
    pub fn finite_length(&self) -> f64 {
        self.pieces[1..self.pieces.len() - 1].iter().map(|s| s.length).sum()
    }

    /// Canonical determinant of the free strip cut into pieces of total
    /// length `length`, with the same lead roots.
    ///
    /// With no pieces the system is `[[-diag s, I], [diag s, I]]` with
    /// determinant `Π(-2 s_n)`; a strip piece of length `L` multiplies mode
    /// `n` by `e^{s_n L}` before the canonical factor.
    pub fn free_log_det(&self, k: C64, lead_s: &[C64], length: f64) -> LogComplex {
        let mut acc = LogProduct::default();
        let first = self.bc.first_mode();
        for (i, s) in lead_s.iter().enumerate() {
            acc.push(-2.0 * s);
            let q = (first + i as u32) as f64;
            acc.push_log(&LogComplex::exp_of(s * length + canonical_exponent(q, k, length)));
        }
        acc.finish()
    }

    fn free_ratio(&self, k: C64, lead_s: &[C64]) -> LogComplex {
        let free = self.free_log_det(k, lead_s, self.finite_length());
        self.log_det_with(k, lead_s).div(&free)
    }

    /// Normalized determinant for given lead roots: the ratio to the free
    /// strip, relative to the same ratio at the reference point.
    pub fn det_normalized_with(&self, k: C64, lead_s: &[C64]) -> LogComplex {
        self.free_ratio(k, lead_s).div(&self.reference)
    }

    pub fn det_normalized(&self, p: &SheetPoint) -> Result<LogComplex> {
        let s = self.lead_roots(p)?;
        Ok(self.det_normalized_with(p.k, &s))
    }
}

#[derive(Debug, Clone)]
pub struct ScatteringSystem {
    pub point: SheetPoint,
    pub n_modes: Vec<usize>,
    pub matrix: DMatrix<C64>,
    /// Canonical determinant in log space.
    pub log_det: LogComplex,
    pub det: C64,
    pub log_abs_det: f64,
}

pub fn assemble(g: &Geometry, p: &SheetPoint, n_lead: usize) -> Result<ScatteringSystem> {
    check_bc(g, p)?;
    let model = MatchingModel::new(g, n_lead)?;
    let s = model.lead_roots(p)?;
    let (matrix, f) = model.build(p.k, &s);
    let ld = log_det(&matrix).mul(&f);
    Ok(ScatteringSystem {
        point: p.clone(),
        n_modes: model.n_modes.clone(),
        matrix,
        log_det: ld,
        det: ld.to_complex(),
        log_abs_det: ld.ln_abs,
    })
}

fn check_bc(g: &Geometry, p: &SheetPoint) -> Result<()> {
    if g.bc != p.bc {
        return Err(Error::InvalidArgument(format!(
            "point carries {} but geometry is {}",
            p.bc, g.bc
        )));
    }
    Ok(())
}

/// Matching determinant divided by the free strip one at the same point.
pub fn det_normalized(g: &Geometry, p: &SheetPoint, n_lead: usize) -> Result<C64> {
    Ok(det_normalized_log(g, p, n_lead)?.to_complex())
}

pub fn det_normalized_log(g: &Geometry, p: &SheetPoint, n_lead: usize) -> Result<LogComplex> {
    check_bc(g, p)?;
    MatchingModel::new(g, n_lead)?.det_normalized(p)
}

#[derive(Debug, Clone)]
pub struct SMatrix {
    pub point: SheetPoint,
    /// Open channels per lead.
    pub n_open: usize,
    /// Channel labels: left lead modes then right lead modes.
    pub channels: Vec<(Side, u32)>,
    pub s: DMatrix<C64>,
}

impl SMatrix {
    pub fn unitarity_defect(&self) -> f64 {
        let n = self.s.nrows();
        (&self.s * self.s.adjoint() - DMatrix::<C64>::identity(n, n)).norm()
    }

    pub fn reciprocity_defect(&self) -> f64 {
        (&self.s - self.s.transpose()).norm()
    }
}

/// Flux-normalized scattering matrix at real `k` on the physical sheet.
pub fn smatrix(g: &Geometry, k: f64, n_lead: usize) -> Result<SMatrix> {
    let p = SheetPoint::physical(C64::new(k, 0.0), g.bc);
    let model = MatchingModel::new(g, n_lead)?;
    let s = model.lead_roots(&p)?;
    let open: Vec<usize> = (0..n_lead)
        .filter(|&i| {
            let n = (g.bc.first_mode() + i as u32) as f64;
            n * n < k
        })
        .collect();
    if open.is_empty() {
        return Err(Error::InvalidArgument(format!("no open channels at k = {k}")));
    }
    if open.len() == n_lead {
        return Err(Error::InvalidArgument("n_lead must exceed the number of open channels".into()));
    }
    let (a, _) = model.build(p.k, &s);
    let lu = a.lu();
    let no = open.len();
    let nj = model.junctions.len();
    let lmap = model.side_maps(0, Side::Left);
    let rmap = model.side_maps(nj - 1, Side::Right);
    let (c_l, c_r) = (model.col[0], model.col[nj - 1]);
    // s = -iβ on the open channels
    let beta: Vec<f64> = open.iter().map(|&i| (C64::new(0.0, 1.0) * s[i]).re).collect();
    let mut smat = DMatrix::<C64>::zeros(2 * no, 2 * no);
    let value_at = |x: &DVector<C64>, maps: &SideMaps, c0: usize, i: usize| -> C64 {
        let mut v = ZERO;
        for c in 0..maps.value.ncols() {
            v += x[c0 + c] * maps.value[(i, c)];
        }
        v
    };
    for (col, &(side, m)) in [Side::Left, Side::Right]
        .iter()
        .flat_map(|&sd| open.iter().map(move |&m| (sd, m)))
        .collect::<Vec<_>>()
        .iter()
        .enumerate()
    {
        let mut rhs = DVector::<C64>::zeros(model.dim);
        match side {
            Side::Left => rhs[m] = -2.0 * s[m],
            Side::Right => rhs[model.dim - n_lead + m] = 2.0 * s[m],
        }
        let x = lu
            .solve(&rhs)
            .ok_or_else(|| Error::Singular(format!("matching system singular at k = {k}")))?;
        let bm = beta[open.iter().position(|&o| o == m).unwrap()];
        for (oi, &n) in open.iter().enumerate() {
            let bn = beta[oi];
            let w = (bn / bm).sqrt();
            let mut ul = value_at(&x, &lmap, c_l, n);
            let ur = value_at(&x, &rmap, c_r, n);
            if side == Side::Left && n == m {
                ul -= ONE;
            }
            let mut ur_out = ur;
            if side == Side::Right && n == m {
                ur_out -= ONE;
            }
            smat[(oi, col)] = ul * w;
            smat[(no + oi, col)] = ur_out * w;
        }
    }
    let first = g.bc.first_mode();
    let channels = [Side::Left, Side::Right]
        .iter()
        .flat_map(|&sd| open.iter().map(move |&m| (sd, first + m as u32)))
        .collect();
    Ok(SMatrix {
        point: p,
        n_open: no,
        channels,
        s: smat,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fixtures;

    const D: BoundaryCondition = BoundaryCondition::Dirichlet;
    const N: BoundaryCondition = BoundaryCondition::Neumann;

    fn c(re: f64, im: f64) -> C64 {
        C64::new(re, im)
    }

    #[test]
    fn transfer_identity_and_wronskian() {
        let p = SheetPoint::physical(c(3.0, 0.4), D);
        let t = segment_transfer(&p, 2.0, 0.0, 1);
        assert_eq!(t, [[ONE, ZERO], [ZERO, ONE]]);
        for l in [0.1, 1.0, 3.0, 10.0] {
            for n in [1, 3, 8] {
                let t = segment_transfer(&p, 2.0, l, n);
                let det = t[0][0] * t[1][1] - t[0][1] * t[1][0];
                assert!((det - ONE).norm() < 1e-9 * t[0][0].norm_sqr().max(1.0), "{l} {n}");
            }
        }
    }

    #[test]
    fn transfer_matches_hyperbolic_forms() {
        // β² < 0 real: κ = sqrt(q² - k) real
        let p = SheetPoint::physical(c(0.5, 0.0), D);
        for l in [0.05, 0.3, 2.0] {
            let t = segment_transfer(&p, 1.0, l, 2);
            let q = 2.0 * PI;
            let kap = (q * q - 0.5f64).sqrt();
            assert!((t[0][0].re - (kap * l).cosh()).abs() < 1e-12 * (kap * l).cosh());
            assert!((t[0][1].re - (kap * l).sinh() / kap).abs() < 1e-12 * (kap * l).cosh());
            assert!((t[1][0].re - kap * (kap * l).sinh()).abs() < 1e-12 * kap * (kap * l).cosh());
        }
    }

    #[test]
    fn free_strip_normalizes_to_one() {
        for bc in [D, N] {
            let g = Geometry::free_strip(bc);
            for k in [c(2.5, 0.3), c(-1.0, 0.0), c(7.0, -2.0)] {
                let p = SheetPoint::new(k, [1], bc).unwrap();
                let d = det_normalized(&g, &p, 12).unwrap();
                assert!((d - ONE).norm() < 1e-12, "{bc} {k}: {d}");
            }
        }
    }

    #[test]
    fn strip_pieces_normalize_to_one() {
        // a chain of strip-shaped pieces is still the free strip
        let g = Geometry::from_pieces(&[Segment::new(1.3, PI, 0.0), Segment::new(4.0, PI, 0.0)], D);
        let p = SheetPoint::new(c(5.0, -0.2), [1, 2], D).unwrap();
        let d = det_normalized(&g, &p, 10).unwrap();
        assert!((d - ONE).norm() < 1e-9, "{d}");
    }

    #[test]
    fn conjugation_symmetry() {
        let g = fixtures::standard_cavity();
        let p = SheetPoint::new(c(2.2, 0.37), [1], D).unwrap();
        let q = SheetPoint::new(p.k.conj(), [1], D).unwrap();
        let a = det_normalized(&g, &p, 10).unwrap();
        let b = det_normalized(&g, &q, 10).unwrap();
        assert!((a.conj() - b).norm() < 1e-9 * a.norm());
    }

    #[test]
    fn mirror_symmetry_up_to_sign() {
        let g = Geometry::from_pieces(&[Segment::new(0.7, 2.0, 0.3), Segment::new(1.1, 4.0, -0.2)], N);
        let m = g.mirrored();
        let p = SheetPoint::new(c(3.3, -0.2), [0, 1], N).unwrap();
        let a = det_normalized(&g, &p, 8).unwrap();
        let b = det_normalized(&m, &p, 8).unwrap();
        assert!((a - b).norm().min((a + b).norm()) < 1e-9 * a.norm(), "{a} {b}");
    }

    #[test]
    fn free_strip_smatrix_is_identity_transmission() {
        let g = Geometry::free_strip(D);
        let s = smatrix(&g, 2.5, 6).unwrap();
        assert_eq!(s.n_open, 1);
        // transmission with unit amplitude, no reflection
        let want = DMatrix::from_row_slice(2, 2, &[ZERO, ONE, ONE, ZERO]);
        assert!((&s.s - want).norm() < 1e-12);
    }

    #[test]
    fn cavity_smatrix_is_unitary_and_symmetric() {
        let g = fixtures::standard_cavity();
        for k in [1.5, 2.5, 3.5, 6.0] {
            let s = smatrix(&g, k, 20).unwrap();
            assert!(s.unitarity_defect() < 1e-8, "k={k} {}", s.unitarity_defect());
            assert!(s.reciprocity_defect() < 1e-10, "k={k} {}", s.reciprocity_defect());
        }
        let g = Geometry::from_pieces(&[Segment::new(0.7, 2.0, 0.3), Segment::new(1.1, 4.0, -0.2)], N);
        let s = smatrix(&g, 3.2, 16).unwrap();
        assert_eq!(s.n_open, 2);
        assert!(s.unitarity_defect() < 1e-8);
        assert!(s.reciprocity_defect() < 1e-10);
    }

    #[test]
    fn below_threshold_has_no_channels() {
        let g = fixtures::standard_cavity();
        assert!(smatrix(&g, 0.5, 10).is_err());
    }

    #[test]
    fn threshold_point_is_rejected() {
        let g = fixtures::standard_cavity();
        let p = SheetPoint::physical(c(4.0, 0.0), D);
        assert!(matches!(det_normalized(&g, &p, 8), Err(Error::BranchPoint { .. })));
    }

    #[test]
    fn long_evanescent_piece_stays_finite() {
        let g = Geometry::from_pieces(&[Segment::new(40.0, 1.0, 1.0)], D);
        let p = SheetPoint::physical(c(2.0, 0.1), D);
        let d = det_normalized_log(&g, &p, 10).unwrap();
        assert!(d.is_finite(), "{d:?}");
    }

    #[test]
    fn dense_system_matches_canonical_low_form() {
        // with only short pieces every row is in transfer form; the
        // canonical value is then det(A) e^{-Σ qL}
        let g = Geometry::from_pieces(&[Segment::new(0.05, 2.0, 0.5)], D);
        let p = SheetPoint::physical(c(2.0, 0.3), D);
        let sys = assemble(&g, &p, 4).unwrap();
        let raw = sys.matrix.determinant();
        let shift: C64 = (1..=sys.n_modes[1] as u32)
            .map(|n| {
                let q = n as f64 * PI / 2.0;
                C64::new(-q * 0.05, 0.0) + p.k * (0.05 / (2.0 * q))
            })
            .sum();
        assert!((raw * shift.exp() - sys.det).norm() < 1e-10 * raw.norm());
    }
}

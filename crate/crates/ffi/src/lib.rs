//! C ABI for the `guidewave` core.
//!
//! Objects cross the boundary as opaque handles that the caller frees with
//! the matching `*_free` function. Every entry point returns a
//! [`GwStatus`]; on failure a message is available from
//! [`gw_last_error_message`] on the same thread. Panics never unwind into
//! the caller.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use guidewave::scattering::{self, MatchingModel};
use guidewave::search::{find_in_box_with, Chart, Rect, SearchOptions};
use guidewave::{Complex64, Error, Geometry, SheetPoint};

/// Result codes of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GwStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Parse = 3,
    InvalidGeometry = 4,
    BranchPoint = 5,
    Numerical = 6,
    OutOfRange = 7,
    Panic = 8,
}

/// A validated waveguide geometry.
pub struct GwGeometry {
    inner: Geometry,
}

/// A scattering matrix at one real `k`.
pub struct GwSMatrix {
    inner: scattering::SMatrix,
}

/// Resonances found in a box.
pub struct GwResonanceList {
    inner: Vec<guidewave::search::Resonance>,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> GwStatus {
    match e {
        Error::BranchPoint { .. } => GwStatus::BranchPoint,
        Error::InvalidArgument(_) | Error::InvalidMode { .. } => GwStatus::InvalidArgument,
        Error::Parse(_) | Error::Schema(_) => GwStatus::Parse,
        Error::InvalidGeometry(_) => GwStatus::InvalidGeometry,
        _ => GwStatus::Numerical,
    }
}

/// Runs `f`, recording errors and turning panics into [`GwStatus::Panic`].
fn guard(f: impl FnOnce() -> Result<(), GwStatus>) -> GwStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GwStatus::Ok,
        Ok(Err(s)) => s,
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(&format!("internal panic: {msg}"));
            GwStatus::Panic
        }
    }
}

fn fail(e: Error) -> GwStatus {
    set_error(&e.to_string());
    status_of(&e)
}

fn null(what: &str) -> GwStatus {
    set_error(&format!("null pointer: {what}"));
    GwStatus::NullPointer
}

unsafe fn borrow<'a, T>(p: *const T, what: &str) -> Result<&'a T, GwStatus> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn out<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, GwStatus> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, GwStatus> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| {
        set_error(&format!("{what} is not UTF-8"));
        GwStatus::Parse
    })
}

unsafe fn sheet(lambda: *const u32, n_lambda: usize) -> Result<Vec<u32>, GwStatus> {
    if n_lambda == 0 {
        return Ok(Vec::new());
    }
    if lambda.is_null() {
        return Err(null("lambda"));
    }
    Ok(std::slice::from_raw_parts(lambda, n_lambda).to_vec())
}

/// Message of the last failed call on this thread. Valid until the next
/// call on the same thread; never null.
#[no_mangle]
pub extern "C" fn gw_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gw_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Parses and validates a geometry from its JSON description.
///
/// # Safety
/// `json` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gw_geometry_from_json(json: *const c_char, out_geometry: *mut *mut GwGeometry) -> GwStatus {
    guard(|| {
        let slot = out(out_geometry, "out_geometry")?;
        *slot = std::ptr::null_mut();
        let g = Geometry::from_json(text(json, "json")?).map_err(fail)?;
        g.check().map_err(fail)?;
        *slot = Box::into_raw(Box::new(GwGeometry { inner: g }));
        Ok(())
    })
}

/// One of the built-in geometries: `free-strip`, `free-strip-neumann`,
/// `cavity`, `weak-coupling`, `staircase`.
///
/// # Safety
/// `name` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gw_geometry_fixture(name: *const c_char, out_geometry: *mut *mut GwGeometry) -> GwStatus {
    guard(|| {
        let slot = out(out_geometry, "out_geometry")?;
        *slot = std::ptr::null_mut();
        let name = text(name, "name")?;
        let g = guidewave::fixtures::by_name(name).ok_or_else(|| fail(Error::InvalidArgument(format!("unknown fixture {name:?}"))))?;
        *slot = Box::into_raw(Box::new(GwGeometry { inner: g }));
        Ok(())
    })
}

/// Radius `M` of the smallest centered ball containing the perturbation.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn gw_geometry_perturbation_radius(g: *const GwGeometry, out_radius: *mut f64) -> GwStatus {
    guard(|| {
        *out(out_radius, "out_radius")? = borrow(g, "geometry")?.inner.perturbation_radius();
        Ok(())
    })
}

/// # Safety
/// `g` must come from a `gw_geometry_*` constructor, or be null.
#[no_mangle]
pub unsafe extern "C" fn gw_geometry_free(g: *mut GwGeometry) {
    if !g.is_null() {
        drop(Box::from_raw(g));
    }
}

/// Normalized matching determinant at `k` on the sheet whose flipped modes
/// are `lambda[0..n_lambda]`.
///
/// # Safety
/// Pointers must be valid; `lambda` may be null when `n_lambda` is 0.
#[no_mangle]
pub unsafe extern "C" fn gw_det_normalized(
    g: *const GwGeometry,
    k_re: f64,
    k_im: f64,
    lambda: *const u32,
    n_lambda: usize,
    n_lead: usize,
    out_re: *mut f64,
    out_im: *mut f64,
) -> GwStatus {
    guard(|| {
        let g = &borrow(g, "geometry")?.inner;
        let (re, im) = (out(out_re, "out_re")?, out(out_im, "out_im")?);
        let p = SheetPoint::new(Complex64::new(k_re, k_im), sheet(lambda, n_lambda)?, g.bc).map_err(fail)?;
        let d = scattering::det_normalized(g, &p, n_lead).map_err(fail)?;
        (*re, *im) = (d.re, d.im);
        Ok(())
    })
}

/// S-matrix at real `k` with `n_lead` lead modes.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn gw_smatrix(g: *const GwGeometry, k: f64, n_lead: usize, out_smatrix: *mut *mut GwSMatrix) -> GwStatus {
    guard(|| {
        let slot = out(out_smatrix, "out_smatrix")?;
        *slot = std::ptr::null_mut();
        let s = scattering::smatrix(&borrow(g, "geometry")?.inner, k, n_lead).map_err(fail)?;
        *slot = Box::into_raw(Box::new(GwSMatrix { inner: s }));
        Ok(())
    })
}

/// Number of rows (twice the open channels).
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn gw_smatrix_dim(s: *const GwSMatrix, out_dim: *mut usize) -> GwStatus {
    guard(|| {
        *out(out_dim, "out_dim")? = borrow(s, "smatrix")?.inner.s.nrows();
        Ok(())
    })
}

/// Entry `(i, j)`, zero-based.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn gw_smatrix_entry(s: *const GwSMatrix, i: usize, j: usize, out_re: *mut f64, out_im: *mut f64) -> GwStatus {
    guard(|| {
        let m = &borrow(s, "smatrix")?.inner.s;
        let (re, im) = (out(out_re, "out_re")?, out(out_im, "out_im")?);
        if i >= m.nrows() || j >= m.ncols() {
            set_error(&format!("entry ({i}, {j}) outside {0}x{0}", m.nrows()));
            return Err(GwStatus::OutOfRange);
        }
        (*re, *im) = (m[(i, j)].re, m[(i, j)].im);
        Ok(())
    })
}

/// `‖S S* - I‖`.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn gw_smatrix_unitarity_defect(s: *const GwSMatrix, out_defect: *mut f64) -> GwStatus {
    guard(|| {
        *out(out_defect, "out_defect")? = borrow(s, "smatrix")?.inner.unitarity_defect();
        Ok(())
    })
}

/// # Safety
/// `s` must come from [`gw_smatrix`], or be null.
#[no_mangle]
pub unsafe extern "C" fn gw_smatrix_free(s: *mut GwSMatrix) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Resonances in the box `[re0, re1] x [im0, im1]` on one sheet.
///
/// # Safety
/// Pointers must be valid; `lambda` may be null when `n_lambda` is 0.
#[no_mangle]
pub unsafe extern "C" fn gw_find_resonances(
    g: *const GwGeometry,
    lambda: *const u32,
    n_lambda: usize,
    re0: f64,
    re1: f64,
    im0: f64,
    im1: f64,
    n_lead: usize,
    tol: f64,
    out_list: *mut *mut GwResonanceList,
) -> GwStatus {
    guard(|| {
        let slot = out(out_list, "out_list")?;
        *slot = std::ptr::null_mut();
        let g = &borrow(g, "geometry")?.inner;
        let b = Rect::new(re0, re1, im0, im1);
        if !b.is_valid() || !(tol > 0.0) {
            return Err(fail(Error::InvalidArgument("box needs re0 < re1, im0 < im1 and tol > 0".into())));
        }
        let model = MatchingModel::new(g, n_lead).map_err(fail)?;
        let chart = Chart::for_box(sheet(lambda, n_lambda)?.into_iter().collect(), &b, g.bc);
        let opts = SearchOptions { tol, ..SearchOptions::default() };
        let found = find_in_box_with(&model, &chart, &b, &opts).map_err(fail)?;
        *slot = Box::into_raw(Box::new(GwResonanceList { inner: found.resonances }));
        Ok(())
    })
}

/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn gw_resonance_list_len(list: *const GwResonanceList, out_len: *mut usize) -> GwStatus {
    guard(|| {
        *out(out_len, "out_len")? = borrow(list, "list")?.inner.len();
        Ok(())
    })
}

/// Resonance `i`: projection `k` and multiplicity.
///
/// # Safety
/// Pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn gw_resonance_list_get(
    list: *const GwResonanceList,
    i: usize,
    out_re: *mut f64,
    out_im: *mut f64,
    out_multiplicity: *mut u32,
) -> GwStatus {
    guard(|| {
        let v = &borrow(list, "list")?.inner;
        let (re, im, m) = (out(out_re, "out_re")?, out(out_im, "out_im")?, out(out_multiplicity, "out_multiplicity")?);
        let r = v.get(i).ok_or_else(|| {
            set_error(&format!("index {i} outside a list of {}", v.len()));
            GwStatus::OutOfRange
        })?;
        (*re, *im, *m) = (r.point.k.re, r.point.k.im, r.multiplicity);
        Ok(())
    })
}

/// # Safety
/// `list` must come from [`gw_find_resonances`], or be null.
#[no_mangle]
pub unsafe extern "C" fn gw_resonance_list_free(list: *mut GwResonanceList) {
    if !list.is_null() {
        drop(Box::from_raw(list));
    }
}

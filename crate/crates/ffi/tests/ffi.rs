use std::ffi::{CStr, CString};
use std::ptr;

use guidewave_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(gw_last_error_message()) }.to_string_lossy().into_owned()
}

fn fixture(name: &str) -> *mut GwGeometry {
    let name = CString::new(name).unwrap();
    let mut g = ptr::null_mut();
    assert_eq!(unsafe { gw_geometry_fixture(name.as_ptr(), &mut g) }, GwStatus::Ok);
    assert!(!g.is_null());
    g
}

#[test]
fn smatrix_of_the_cavity_is_unitary() {
    let g = fixture("cavity");
    let mut s = ptr::null_mut();
    unsafe {
        assert_eq!(gw_smatrix(g, 2.5, 30, &mut s), GwStatus::Ok);
        let (mut dim, mut defect) = (0usize, 1.0f64);
        assert_eq!(gw_smatrix_dim(s, &mut dim), GwStatus::Ok);
        assert_eq!(dim, 2);
        assert_eq!(gw_smatrix_unitarity_defect(s, &mut defect), GwStatus::Ok);
        assert!(defect < 1e-8);
        let (mut re, mut im) = (0.0, 0.0);
        assert_eq!(gw_smatrix_entry(s, 0, 1, &mut re, &mut im), GwStatus::Ok);
        assert!(re.hypot(im) <= 1.0 + 1e-12);
        assert_eq!(gw_smatrix_entry(s, 2, 0, &mut re, &mut im), GwStatus::OutOfRange);
        gw_smatrix_free(s);
        gw_geometry_free(g);
    }
}

#[test]
fn resonance_list_round_trip() {
    let g = fixture("cavity");
    let lambda = [1u32];
    let mut list = ptr::null_mut();
    unsafe {
        assert_eq!(gw_find_resonances(g, lambda.as_ptr(), 1, 2.8, 3.4, -0.4, -0.05, 30, 1e-8, &mut list), GwStatus::Ok);
        let mut n = 0usize;
        assert_eq!(gw_resonance_list_len(list, &mut n), GwStatus::Ok);
        assert_eq!(n, 1);
        let (mut re, mut im, mut m) = (0.0, 0.0, 0u32);
        assert_eq!(gw_resonance_list_get(list, 0, &mut re, &mut im, &mut m), GwStatus::Ok);
        assert!((re - 3.1086).abs() < 1e-3 && (im + 0.1714).abs() < 1e-3, "{re} {im}");
        assert_eq!(m, 1);
        assert_eq!(gw_resonance_list_get(list, 1, &mut re, &mut im, &mut m), GwStatus::OutOfRange);

        let (mut dre, mut dim) = (1.0, 1.0);
        assert_eq!(gw_det_normalized(g, re, im, lambda.as_ptr(), 1, 30, &mut dre, &mut dim), GwStatus::Ok);
        assert!(dre.hypot(dim) < 1e-6);
        gw_resonance_list_free(list);
        gw_geometry_free(g);
    }
}

#[test]
fn errors_are_reported_not_raised() {
    unsafe {
        let mut g = ptr::null_mut();
        let bad = CString::new("{\"bc\": \"dirichlet\"").unwrap();
        assert_eq!(gw_geometry_from_json(bad.as_ptr(), &mut g), GwStatus::Parse);
        assert!(g.is_null());
        assert!(!last_error().is_empty());

        let json = CString::new(std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/../../geometries/free_strip.json")).unwrap()).unwrap();
        assert_eq!(gw_geometry_from_json(json.as_ptr(), &mut g), GwStatus::Ok);
        let mut m = -1.0;
        assert_eq!(gw_geometry_perturbation_radius(g, &mut m), GwStatus::Ok);
        let (mut re, mut im) = (0.0, 0.0);
        assert_eq!(gw_det_normalized(g, 1.0, 0.0, ptr::null(), 0, 10, &mut re, &mut im), GwStatus::BranchPoint);
        assert!(last_error().contains("branch point"));
        assert_eq!(gw_det_normalized(ptr::null(), 1.0, 0.0, ptr::null(), 0, 10, &mut re, &mut im), GwStatus::NullPointer);
        assert_eq!(gw_det_normalized(g, 2.0, 0.0, ptr::null(), 3, 10, &mut re, &mut im), GwStatus::NullPointer);
        gw_geometry_free(g);
        gw_geometry_free(ptr::null_mut());
    }
    let v = unsafe { CStr::from_ptr(gw_version()) }.to_str().unwrap().to_string();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_entry_point() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/guidewave.h")).unwrap();
    for name in [
        "gw_geometry_from_json",
        "gw_geometry_fixture",
        "gw_geometry_free",
        "gw_smatrix",
        "gw_smatrix_free",
        "gw_find_resonances",
        "gw_resonance_list_get",
        "gw_resonance_list_free",
        "gw_last_error_message",
        "GW_STATUS_PANIC",
    ] {
        assert!(header.contains(name), "{name}");
    }
    // The header must stand alone as C.
    if let Ok(out) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-Wall", "-Werror", "-x", "c", concat!(env!("CARGO_MANIFEST_DIR"), "/include/guidewave.h")])
        .output()
    {
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
}

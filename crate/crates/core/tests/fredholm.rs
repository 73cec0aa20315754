use guidewave::fixtures::standard_cavity;
use guidewave::fredholm::{
    build_grid_with, growth_exponent, laurent_probes, reference_resolvent, resolvent_norm, sv_decay, threshold_laurent,
    CutoffRadii, Fredholm, GridOptions, SvOptions, DEFAULT_K0, M_FLOOR,
};
use guidewave::linalg::spectral_norm;
use guidewave::sheet::branch_sqrt;
use guidewave::{BoundaryCondition, Complex64, Geometry, SheetPoint};
use nalgebra::DMatrix;

const D: BoundaryCondition = BoundaryCondition::Dirichlet;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn coarse(g: &Geometry) -> Fredholm {
    let opts = GridOptions { h: 0.1, ..GridOptions::default() };
    reference_resolvent(build_grid_with(g, &opts).unwrap(), DEFAULT_K0).unwrap()
}

/// `‖ρ R0(k) ρ‖` on the continuum strip: the modes decouple, and each one
/// is a 1D integral operator with kernel `ρ e^{-s|x-x'|} ρ / (2s)`.
fn free_norm_oracle(k: f64) -> f64 {
    let radii = CutoffRadii::new(0.0, M_FLOOR);
    let (a, dx) = (radii.rho.end, 0.01);
    let xs: Vec<f64> = (0..=(2.0 * a / dx) as usize).map(|i| -a + i as f64 * dx).collect();
    let rho: Vec<f64> = xs.iter().map(|&x| radii.rho(x)).collect();
    let p = SheetPoint::physical(c(k, 0.0), D);
    (1..=(k.sqrt() as u32 + 3))
        .map(|n| {
            let s = branch_sqrt(n, &p).unwrap();
            let m = DMatrix::from_fn(xs.len(), xs.len(), |i, j| {
                rho[i] * rho[j] * dx * (-s * (xs[i] - xs[j]).abs()).exp() / (2.0 * s)
            });
            spectral_norm(&m, 300)
        })
        .fold(0.0, f64::max)
}

#[test]
fn free_strip_h_is_one() {
    let fr = coarse(&Geometry::free_strip(D));
    for k in [c(2.5, 0.0), c(3.0, 1.0), c(-3.0, 0.0)] {
        let h = fr.h_det(&SheetPoint::physical(k, D)).unwrap().h_value;
        assert!((h - 1.0).norm() < 1e-6, "h({k}) = {h}");
    }
}

#[test]
fn resolvent_norm_obeys_the_spectral_bound() {
    for g in [Geometry::free_strip(D), standard_cavity()] {
        let fr = coarse(&g);
        for k in [c(3.0, 1.0), c(8.5, 1.0)] {
            let n = resolvent_norm(&fr, &SheetPoint::physical(k, D)).unwrap();
            assert!(!n.flagged);
            assert!(n.norm <= 1.0, "{k}: {}", n.norm);
        }
    }
}

#[test]
fn free_strip_norm_matches_mode_sum() {
    let fr = coarse(&Geometry::free_strip(D));
    for k in [2.5, 6.5] {
        let got = resolvent_norm(&fr, &SheetPoint::physical(c(k, 0.0), D)).unwrap().norm;
        let want = free_norm_oracle(k);
        assert!((got - want).abs() < 0.03 * want, "k = {k}: {got} vs {want}");
    }
}

#[test]
fn free_strip_has_no_threshold_eigenvalue() {
    let fr = coarse(&Geometry::free_strip(D));
    let rep = threshold_laurent(&fr, 1, 0.1).unwrap();
    assert!(rep.dropped.is_empty());
    assert!(rep.b_norm > 0.1);
    assert!(rep.a_norm < 1e-6, "{rep:?}");
}

#[test]
fn cavity_laurent_near_second_threshold() {
    let fr = coarse(&standard_cavity());
    assert_eq!(laurent_probes(&fr.grid).len(), 3);
    let rep = threshold_laurent(&fr, 2, 0.1).unwrap();
    println!("{rep:?}");
    assert!(rep.a_norm.is_finite() && rep.b_norm.is_finite());
    assert!(rep.a_norm < rep.b_norm, "{rep:?}");
}

#[test]
fn singular_values_are_nonincreasing() {
    let fr = coarse(&standard_cavity());
    let sv = sv_decay(&fr, &SvOptions::default()).unwrap();
    for series in [&sv.resolvent, &sv.commutator] {
        assert!(series.fit_lo < series.fit_hi && series.fit_hi <= series.values.len());
        assert!(series.values.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-10)));
        assert!(series.values.iter().all(|v| v.is_finite() && *v >= 0.0));
    }
}

#[test]
fn growth_exponent_of_a_power_law() {
    let ks: Vec<f64> = (0..40).map(|i| 2.0 + 0.45 * i as f64).collect();
    let la: Vec<f64> = ks.iter().map(|k| 0.7 * k.powf(1.5)).collect();
    let e = growth_exponent(&ks, &la).unwrap();
    assert!((e - 1.5).abs() < 1e-9, "{e}");
}

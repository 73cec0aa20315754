//! Acceptance suite. Each test prints one `[PASS]`/`[FAIL]` line straight to
//! stderr, so the lines show up even when libtest captures output, and then
//! asserts the outcome.

use std::collections::BTreeSet;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use guidewave::fixtures::{buldyrev_staircase, closed_box_eigenvalues, standard_cavity, weak_coupling_cavity};
use guidewave::fredholm::{
    build_grid_with, growth_exponent, h_zero_near, reference_resolvent, sv_decay, Fredholm, GridOptions, SvOptions,
    DEFAULT_GRID_STEP, DEFAULT_K0,
};
use guidewave::greens::green_eval;
use guidewave::quasimode::{corollary1_fit, seeds, line_fit, DecayReport, QuasimodeSpec};
use guidewave::scattering::{smatrix, MatchingModel};
use guidewave::search::{counting_curve_with, find_in_box_with, track_family_with, Chart, Rect, Resonance, SearchOptions};
use guidewave::sheet::{branch_sqrt, cross_real_axis, encircle_threshold, min_threshold_distance};
use guidewave::{BoundaryCondition, Complex64, SheetPoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const D: BoundaryCondition = BoundaryCondition::Dirichlet;
const N: BoundaryCondition = BoundaryCondition::Neumann;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn set(v: &[u32]) -> BTreeSet<u32> {
    v.iter().copied().collect()
}

/// Prints the verdict line and fails the test on `FAIL`.
fn verdict(id: u32, name: &str, pass: bool, detail: String, t0: Instant, limit_s: f64) {
    let secs = t0.elapsed().as_secs_f64();
    let ok = pass && secs < limit_s;
    let line = format!(
        "criterion {id:>2} [{}] {name}: {detail}; runtime {secs:.1} s (limit {limit_s} s)\n",
        if ok { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(ok, "{}", line.trim_end());
}

fn resonances(model: &MatchingModel, lambda: &[u32], b: Rect) -> Vec<Resonance> {
    let chart = Chart::for_box(set(lambda), &b, model.bc);
    let found = find_in_box_with(model, &chart, &b, &SearchOptions::default()).unwrap();
    assert!(found.unresolved.is_empty(), "{:?}", found.unresolved);
    found.resonances
}

/// The `h = 0.05`, `k0 = 25i` realization of the test cavity, shared by the
/// criteria that need it.
fn cavity_fredholm() -> &'static Fredholm {
    static FR: OnceLock<Fredholm> = OnceLock::new();
    FR.get_or_init(|| {
        let opts = GridOptions { h: DEFAULT_GRID_STEP, ..GridOptions::default() };
        reference_resolvent(build_grid_with(&standard_cavity(), &opts).unwrap(), DEFAULT_K0).unwrap()
    })
}

/// Principal root of `w` from polar form, with the cut `w < 0` taken as
/// the limit from `Im k > 0`, i.e. from `Im w < 0`.
fn polar_root(w: Complex64) -> Complex64 {
    let theta = if w.im == 0.0 && w.re < 0.0 { -std::f64::consts::PI } else { w.im.atan2(w.re) };
    Complex64::from_polar(w.norm().sqrt(), 0.5 * theta)
}

#[test]
fn criterion_01_sheet_algebra() {
    let t0 = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut worst, mut sign_ok, mut mono_ok) = (0.0f64, true, true);
    for i in 0..200 {
        let bc = if i % 2 == 0 { D } else { N };
        let first = bc.first_mode();
        let n = rng.gen_range(first..20);
        // Every fourth sample sits on a cut.
        let im = if i % 4 == 1 { 0.0 } else { rng.gen_range(-5.0..5.0) };
        let k = c(rng.gen_range(-10.0..50.0), im);
        if min_threshold_distance(k, bc) < 1e-6 {
            continue;
        }
        let lambda: BTreeSet<u32> = (first..12).filter(|_| rng.gen_bool(0.3)).collect();
        let p = SheetPoint::new(k, lambda.iter().copied(), bc).unwrap();
        let s = branch_sqrt(n, &p).unwrap();
        let w = c((n * n) as f64, 0.0) - k;
        worst = worst.max((s * s - w).norm() / w.norm().max(1.0));
        let phys = polar_root(w);
        let want = if lambda.contains(&n) { -phys } else { phys };
        sign_ok &= (s - want).norm() <= 1e-12 * w.norm().sqrt().max(1.0);

        let m = rng.gen_range(first..12);
        let m2 = rng.gen_range(first..12);
        let twice = encircle_threshold(&encircle_threshold(&p, m).unwrap(), m).unwrap();
        let ab = encircle_threshold(&encircle_threshold(&p, m).unwrap(), m2).unwrap();
        let ba = encircle_threshold(&encircle_threshold(&p, m2).unwrap(), m).unwrap();
        let x = rng.gen_range(0.0..50.0f64) + 0.5;
        let back = cross_real_axis(&cross_real_axis(&p, x).unwrap(), x).unwrap();
        mono_ok &= twice == p && ab == ba && back == p;
    }
    let pass = worst < 1e-12 && sign_ok && mono_ok;
    verdict(1, "sheet algebra", pass, format!("max |s²-(n²-k)| rel {worst:.1e} (< 1e-12), branch signs {sign_ok}, involutions {mono_ok}"), t0, 1.0);
}

#[test]
fn criterion_02_green_pde_residual() {
    let t0 = Instant::now();
    let h = 1e-3;
    let n_max = 80;
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst, mut checked) = (f64::NEG_INFINITY, 0);
    for i in 0..50 {
        let bc = if i % 2 == 0 { D } else { N };
        let lambda = if (i / 2) % 2 == 0 { set(&[]) } else { set(&[1]) };
        let k = loop {
            let k = c(rng.gen_range(0.5..8.0), rng.gen_range(-1.0..1.0));
            if min_threshold_distance(k, bc) > 0.1 {
                break k;
            }
        };
        let p = SheetPoint::new(k, lambda, bc).unwrap();
        let (xp, yp) = (rng.gen_range(-1.0..1.0), rng.gen_range(0.1..3.0));
        let dx = rng.gen_range(0.4..2.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let (x, y) = (xp + dx, rng.gen_range(0.1..3.0));
        let g = |x: f64, y: f64| green_eval(&p, x, y, xp, yp, n_max).unwrap();
        let centre = g(x, y);
        let pts = [g(x + h, y), g(x - h, y), g(x, y + h), g(x, y - h)];
        let lap = (pts.iter().map(|e| e.value).sum::<Complex64>() - 4.0 * centre.value) / (h * h);
        let residual = (lap + k * centre.value).norm();
        let tail = pts.iter().chain([&centre]).map(|e| e.tail_bound.unwrap_or(f64::INFINITY)).fold(0.0, f64::max);
        worst = worst.max(residual / (10.0 * tail + 100.0 * h * h));
        checked += 1;
    }
    verdict(2, "Green's function PDE residual", worst < 1.0, format!("{checked} points, max residual / (10 tail + 100 h²) = {worst:.2e} (< 1)"), t0, 10.0);
}

#[test]
fn criterion_03_smatrix_unitarity() {
    let t0 = Instant::now();
    let g = standard_cavity();
    let (mut u, mut r) = (0.0f64, 0.0f64);
    for k in [1.5, 2.5, 3.5] {
        let s = smatrix(&g, k, 30).unwrap();
        u = u.max(s.unitarity_defect());
        r = r.max(s.reciprocity_defect());
    }
    verdict(3, "S-matrix unitarity", u < 1e-8 && r < 1e-10, format!("‖SS*-I‖ = {u:.1e} (< 1e-8), ‖S-Sᵀ‖ = {r:.1e} (< 1e-10)"), t0, 5.0);
}

#[test]
fn criterion_04_truncation_stability() {
    let t0 = Instant::now();
    let g = standard_cavity();
    let b = Rect::new(1.2, 3.9, -0.8, -0.01);
    let at = |n_lead| resonances(&MatchingModel::new(&g, n_lead).unwrap(), &[1], b);
    let (r30, r35) = (at(30), at(35));
    let mut worst = 0.0f64;
    for z in &r30 {
        let near = r35.iter().map(|w| (w.point.k - z.point.k).norm()).fold(f64::INFINITY, f64::min);
        worst = worst.max(near / z.point.k.norm());
    }
    let pass = !r30.is_empty() && r30.len() == r35.len() && worst < 1e-6;
    verdict(4, "truncation stability", pass, format!("{} zeros on {{1}}, max relative move 30→35 = {worst:.2e} (< 1e-6)", r30.len()), t0, 60.0);
}

#[test]
fn criterion_05_weak_coupling() {
    let t0 = Instant::now();
    let model = MatchingModel::new(&weak_coupling_cavity(), 30).unwrap();
    let target = closed_box_eigenvalues(4.0)[0];
    let found = resonances(&model, &[1], Rect::new(target - 0.1, target + 0.1, -0.02, 0.02));
    let best = found.iter().min_by(|a, b| (a.point.k - target).norm().total_cmp(&(b.point.k - target).norm()));
    let (dist, im) = best.map_or((f64::INFINITY, f64::INFINITY), |r| ((r.point.k - target).norm(), r.point.k.im.abs()));
    verdict(5, "weak-coupling oracle", dist < 5e-2 && im < 1e-3, format!("box eigenvalue {target:.6}, nearest resonance at distance {dist:.2e} (< 5e-2), |Im k| = {im:.1e} (< 1e-3)"), t0, 120.0);
}

#[test]
fn criterion_06_cross_oracle() {
    let t0 = Instant::now();
    let g = standard_cavity();
    let model = MatchingModel::new(&g, 30).unwrap();
    let mut zeros: Vec<(SheetPoint, Chart)> = Vec::new();
    for z in resonances(&model, &[], Rect::new(0.1, 0.95, -0.05, 0.05)) {
        zeros.push((z.point, Chart::fixed(set(&[]), D)));
    }
    for z in resonances(&model, &[1], Rect::new(1.1, 3.9, -0.5, 0.05)) {
        let x = z.point.k.re;
        zeros.push((z.point, Chart::continued(set(&[1]), x, D)));
    }
    zeros.sort_by(|a, b| a.0.k.re.total_cmp(&b.0.k.re));
    zeros.truncate(3);
    let fr = cavity_fredholm();
    let mut worst = 0.0f64;
    let mut found = 0;
    for (p, chart) in &zeros {
        if let Some(z) = h_zero_near(fr, chart, p.k, 0.1, 1e-4).unwrap() {
            found += 1;
            worst = worst.max((z.point.k - p.k).norm());
        }
    }
    let pass = zeros.len() == 3 && found == 3 && worst < 1e-2;
    let list: Vec<String> = zeros.iter().map(|(p, _)| format!("{:.4}{:+.4}i", p.k.re, p.k.im)).collect();
    verdict(6, "cross-oracle h_det vs det_normalized", pass, format!("zeros [{}], {found}/3 matched, max |Δk| = {worst:.2e} (< 1e-2)", list.join(", ")), t0, 600.0);
}

#[test]
fn criterion_07_singular_value_decay() {
    let t0 = Instant::now();
    let opts = GridOptions { h: 0.1, ..GridOptions::default() };
    let fr = reference_resolvent(build_grid_with(&standard_cavity(), &opts).unwrap(), DEFAULT_K0).unwrap();
    let sv = sv_decay(&fr, &SvOptions::default()).unwrap();
    let (a, b) = (sv.resolvent.slope, sv.commutator.slope);
    let pass = (a + 1.0).abs() < 0.25 && (b + 0.5).abs() < 0.15;
    verdict(7, "singular-value decay", pass, format!("slope τ1R(k0)χ1ρ = {a:.3} (-1 ± 0.25), slope [Δ,τ1]R(k0)χ1ρ = {b:.3} (-0.5 ± 0.15)"), t0, 120.0);
}

#[test]
fn criterion_08_growth_and_counting() {
    let t0 = Instant::now();
    let fr = cavity_fredholm();
    let ks: Vec<f64> = (0..36).map(|i| 2.25 + 0.5 * i as f64).filter(|&k| min_threshold_distance(c(k, 0.0), D) > 0.2).collect();
    let logs: Vec<f64> = ks.iter().map(|&k| fr.h_det(&SheetPoint::physical(c(k, 0.0), D)).unwrap().log_abs).collect();
    let growth = growth_exponent(&ks, &logs).unwrap_or(f64::NAN);

    let model = MatchingModel::new(&standard_cavity(), 30).unwrap();
    let radii: Vec<f64> = (2..=10).map(|i| 2.5 * i as f64).collect();
    let curve = counting_curve_with(&model, &radii, &SearchOptions::default()).unwrap();
    let (x, y): (Vec<f64>, Vec<f64>) = curve.iter().filter(|(_, n)| *n > 0).map(|(r, n)| (r.ln(), (*n as f64).ln())).unzip();
    let (slope, _, _) = line_fit(&x, &y);
    let pass = growth <= 1.8 && slope <= 3.5;
    let counts: Vec<String> = curve.iter().map(|(r, n)| format!("{r}:{n}")).collect();
    verdict(8, "growth and counting", pass, format!("log|h| exponent {growth:.3} (≤ 1.8) over {} k in [2,20]; N(r) slope {slope:.3} (≤ 3.5), N = [{}]", ks.len(), counts.join(" ")), t0, 1800.0);
}

#[test]
fn criterion_09_staircase_family() {
    let t0 = Instant::now();
    let spec = QuasimodeSpec::new(1.0, 4.0, 4.0, 0).unwrap();
    let seeds: Vec<f64> = seeds(&spec, 2, 8, 0.5, D).unwrap().iter().map(|s| s.lambda).collect();
    let model = MatchingModel::new(&buldyrev_staircase(), 20).unwrap();
    let hits = track_family_with(&model, &seeds, &SearchOptions::default()).unwrap();
    let n_hits = hits.iter().filter(|h| h.hit.is_some()).count();
    let (pass, detail) = match corollary1_fit(&hits) {
        DecayReport::Fit { slope, im_decreasing, .. } => (
            n_hits >= 5 && im_decreasing && slope < 0.0,
            format!("{n_hits} hits (≥ 5), |Im k| strictly decreasing {im_decreasing}, fit slope {slope:.3} (< 0)"),
        ),
        DecayReport::InsufficientData { n_hits } => (false, format!("{n_hits} hits (≥ 5), too few to fit")),
    };
    verdict(9, "staircase family trend", pass, detail, t0, 1800.0);
}

fn run_cli(dir: &Path, threads: &str, args: &[&str]) -> Vec<u8> {
    let out = Command::new(env!("CARGO_BIN_EXE_guidewave"))
        .current_dir(dir)
        .env("GUIDEWAVE_THREADS", threads)
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let path = String::from_utf8(out.stdout).unwrap();
    std::fs::read(dir.join(path.trim())).unwrap()
}

#[test]
fn criterion_10_determinism() {
    let t0 = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let runs: [&[&str]; 3] = [
        &["resonances", "--geometry", "cavity", "--sheet", "1", "--box", "2.8,3.4,-0.4,-0.05"],
        &["count", "--geometry", "cavity", "--r", "6"],
        &["fredholm", "det-scan", "--geometry", "cavity", "--h", "0.1", "--k", "2.5,0.3;3.1,-0.2", "--sheet", "1"],
    ];
    let mut same = 0;
    for (i, args) in runs.iter().enumerate() {
        let outputs: Vec<Vec<u8>> = ["1", "4"]
            .iter()
            .map(|t| {
                let out = format!("t{t}/run{i}");
                let mut a: Vec<&str> = args.to_vec();
                a.extend(["--out", &out]);
                run_cli(dir.path(), t, &a)
            })
            .collect();
        if !outputs[0].is_empty() && outputs[0] == outputs[1] {
            same += 1;
        }
    }
    verdict(10, "determinism", same == runs.len(), format!("{same}/{} runs byte-identical with GUIDEWAVE_THREADS 1 and 4", runs.len()), t0, 300.0);
}

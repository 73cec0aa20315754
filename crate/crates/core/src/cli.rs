//! Execution of a [`RunConfig`]: compute, then write the data file and its
//! metadata sidecar.

use std::collections::BTreeSet;
use std::time::Instant;

use num_complex::Complex64;
use serde_json::json;

use crate::error::Error;
use crate::fredholm::{
    build_grid_with, growth_exponent, reference_resolvent, resolvent_norm_scan, sv_decay, threshold_laurent, Fredholm,
    GridOptions, SvOptions,
};
use crate::geometry::validate;
use crate::greens::green_eval;
use crate::io::{num, opt_num, output_paths, GridParams, Metadata, RunConfig, Table, Task, SCHEMA_VERSION, SOFTWARE, VERSION};
use crate::quasimode::{corollary1_fit, seeds, QuasimodeSpec};
use crate::scattering::{smatrix, MatchingModel};
use crate::search::{counting_function_with, find_in_box_with, track_family_with, Chart, Rect, SearchOptions};
use crate::sheet::{lambda_label, parse_lambda, BoundaryCondition, SheetPoint};
use crate::Geometry;

/// Exit status for configuration and input errors.
pub const EXIT_SCHEMA: i32 = 2;
/// Exit status for numerical failures.
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug)]
pub struct CliError {
    pub code: i32,
    pub error: Error,
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.error)
    }
}

impl std::error::Error for CliError {}

impl From<Error> for CliError {
    fn from(error: Error) -> Self {
        let code = match error {
            Error::Schema(_) | Error::Parse(_) | Error::InvalidGeometry(_) | Error::InvalidMode { .. } => EXIT_SCHEMA,
            _ => EXIT_NUMERICAL,
        };
        CliError { code, error }
    }
}

fn schema(msg: impl Into<String>) -> CliError {
    CliError { code: EXIT_SCHEMA, error: Error::Schema(msg.into()) }
}

/// What a finished run wrote.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub data_path: std::path::PathBuf,
    pub meta_path: std::path::PathBuf,
    pub info: serde_json::Value,
    /// Set by `geometry-validate` when the geometry has violations.
    pub violations: usize,
}

struct Output {
    data: String,
    info: serde_json::Value,
    violations: usize,
}

/// Runs one configuration. On a numerical failure an error report is
/// written next to where the data file would have gone.
pub fn run(cfg: &RunConfig) -> Result<RunOutcome, CliError> {
    crate::io::check_version(cfg.schema_version)?;
    let t0 = Instant::now();
    let name = cfg.data_name();
    if name.contains(['/', '\\']) {
        return Err(schema(format!("output_name {name:?} must be a bare file name")));
    }
    std::fs::create_dir_all(&cfg.output_dir)
        .map_err(|e| schema(format!("cannot create {}: {e}", cfg.output_dir.display())))?;
    let (data_path, meta_path) = output_paths(&cfg.output_dir, &name);
    let out = match execute(&cfg.task) {
        Ok(o) => o,
        Err(e) => {
            if e.code == EXIT_NUMERICAL {
                let report = json!({
                    "schema_version": SCHEMA_VERSION,
                    "software": SOFTWARE,
                    "version": VERSION,
                    "command": cfg.task.command(),
                    "error": e.error.to_string(),
                    "config": cfg,
                });
                let path = cfg.output_dir.join(format!("{name}.error.json"));
                let _ = std::fs::write(path, serde_json::to_string_pretty(&report).expect("report serializes") + "\n");
            }
            return Err(e);
        }
    };
    let write = |p: &std::path::Path, s: &str| {
        std::fs::write(p, s).map_err(|e| CliError { code: EXIT_NUMERICAL, error: Error::Parse(format!("cannot write {}: {e}", p.display())) })
    };
    write(&data_path, &out.data)?;
    let meta = Metadata {
        schema_version: SCHEMA_VERSION,
        software: SOFTWARE.into(),
        version: VERSION.into(),
        command: cfg.task.command().into(),
        data_file: name,
        config: cfg.clone(),
        wall_time_s: t0.elapsed().as_secs_f64(),
        info: out.info.clone(),
    };
    write(&meta_path, &(serde_json::to_string_pretty(&meta).expect("metadata serializes") + "\n"))?;
    Ok(RunOutcome { data_path, meta_path, info: out.info, violations: out.violations })
}

fn json_data(v: serde_json::Value) -> String {
    serde_json::to_string_pretty(&v).expect("data serializes") + "\n"
}

fn lambda_of(sheet: &str, bc: BoundaryCondition) -> Result<BTreeSet<u32>, CliError> {
    parse_lambda(sheet, bc).map_err(|e| schema(e.to_string()))
}

fn rect_of(r: &[f64; 4]) -> Result<Rect, CliError> {
    let b = Rect::new(r[0], r[1], r[2], r[3]);
    if !b.is_valid() {
        return Err(schema(format!("box {r:?} needs re0 < re1 and im0 < im1")));
    }
    Ok(b)
}

fn search_options(tol: f64) -> Result<SearchOptions, CliError> {
    if !(tol > 0.0 && tol < 1.0) {
        return Err(schema(format!("tol must lie in (0, 1), got {tol}")));
    }
    Ok(SearchOptions { tol, ..SearchOptions::default() })
}

fn fredholm_of(g: &Geometry, grid: &GridParams) -> Result<(Fredholm, serde_json::Value), CliError> {
    let opts = GridOptions { h: grid.h, x_cap: grid.x_cap, ..GridOptions::default() };
    let fr = reference_resolvent(build_grid_with(g, &opts)?, grid.k0)?;
    let info = json!({
        "grid_h": fr.grid.h,
        "x_cap": fr.grid.x_cap,
        "k0": [fr.k0.re, fr.k0.im],
        "cap_error": fr.cap_error(),
        "nodes": fr.grid.n(),
        "cutoff_radii": fr.grid.radii,
    });
    Ok((fr, info))
}

fn merge(mut a: serde_json::Value, b: serde_json::Value) -> serde_json::Value {
    if let (Some(a), serde_json::Value::Object(b)) = (a.as_object_mut(), b) {
        a.extend(b);
    }
    a
}

fn execute(task: &Task) -> Result<Output, CliError> {
    let simple = |data: String, info: serde_json::Value| Ok(Output { data, info, violations: 0 });
    match task {
        Task::GeometryValidate { geometry } => {
            let g = geometry.load()?;
            let v = validate(&g);
            let data = json_data(json!({
                "schema_version": SCHEMA_VERSION,
                "valid": v.is_empty(),
                "perturbation_radius": if v.is_empty() { Some(g.perturbation_radius()) } else { None },
                "violations": v,
            }));
            Ok(Output { data, info: json!({ "violations": v.len() }), violations: v.len() })
        }
        Task::Green { bc, k, sheet, source, xs, ys, n_max } => {
            let p = SheetPoint::new(*k, lambda_of(sheet, *bc)?, *bc).map_err(|e| schema(e.to_string()))?;
            let counts = |v: f64| -> Result<usize, CliError> {
                if v >= 1.0 && v.fract() == 0.0 {
                    Ok(v as usize)
                } else {
                    Err(schema(format!("sample count must be a positive integer, got {v}")))
                }
            };
            let mut t = Table::new(&["x", "y", "xp", "yp", "re", "im", "tail_bound"]);
            for x in crate::io::linspace(xs[0], xs[1], counts(xs[2])?) {
                for y in crate::io::linspace(ys[0], ys[1], counts(ys[2])?) {
                    let e = green_eval(&p, x, y, source[0], source[1], *n_max)?;
                    t.push(vec![num(x), num(y), num(source[0]), num(source[1]), num(e.value.re), num(e.value.im), opt_num(e.tail_bound)]);
                }
            }
            simple(t.to_csv(), json!({ "point": p }))
        }
        Task::Smatrix { geometry, ks, n_lead } => {
            let g = geometry.load()?;
            let mut t = Table::new(&["k", "n_open", "unitarity_defect", "reciprocity_defect", "abs_s11", "arg_s11"]);
            for &k in ks {
                let s = smatrix(&g, k, *n_lead)?;
                let s11 = s.s[(0, 0)];
                t.push(vec![
                    num(k),
                    s.n_open.to_string(),
                    num(s.unitarity_defect()),
                    num(s.reciprocity_defect()),
                    num(s11.norm()),
                    num(s11.arg()),
                ]);
            }
            simple(t.to_csv(), json!({ "n_lead": n_lead }))
        }
        Task::Det { geometry, sheet, rect, samples, n_lead } => {
            let g = geometry.load()?;
            let lambda = lambda_of(sheet, g.bc)?;
            let b = rect_of(rect)?;
            let model = MatchingModel::new(&g, *n_lead)?;
            let mut t = Table::new(&["re_k", "im_k", "lambda", "re_d", "im_d", "log_abs_d"]);
            for im in crate::io::linspace(b.im0, b.im1, samples[1]) {
                for re in crate::io::linspace(b.re0, b.re1, samples[0]) {
                    let p = SheetPoint::new(Complex64::new(re, im), lambda.iter().copied(), g.bc)?;
                    let mut row = vec![num(re), num(im), lambda_label(&lambda)];
                    match model.det_normalized(&p) {
                        Ok(d) => {
                            let z = d.to_complex();
                            row.extend([num(z.re), num(z.im), num(d.ln_abs)]);
                        }
                        // A sample on a branch point has no value.
                        Err(Error::BranchPoint { .. }) => row.extend([String::new(), String::new(), String::new()]),
                        Err(e) => return Err(e.into()),
                    }
                    t.push(row);
                }
            }
            simple(t.to_csv(), json!({ "n_lead": n_lead }))
        }
        Task::Resonances { geometry, sheet, rect, n_lead, tol } => {
            let g = geometry.load()?;
            let lambda = lambda_of(sheet, g.bc)?;
            let b = rect_of(rect)?;
            let opts = search_options(*tol)?;
            let model = MatchingModel::new(&g, *n_lead)?;
            let chart = Chart::for_box(lambda, &b, g.bc);
            let found = find_in_box_with(&model, &chart, &b, &opts)?;
            let mut t = Table::new(&["re_k", "im_k", "lambda", "multiplicity", "residual", "n_lead"]);
            for r in &found.resonances {
                t.push(vec![
                    num(r.point.k.re),
                    num(r.point.k.im),
                    lambda_label(&r.point.lambda),
                    r.multiplicity.to_string(),
                    num(r.residual),
                    r.n_lead.to_string(),
                ]);
            }
            simple(t.to_csv(), json!({ "found": found.resonances.len(), "unresolved": found.unresolved }))
        }
        Task::Count { geometry, r, n_lead, tol } => {
            let g = geometry.load()?;
            if !(*r > 0.0) {
                return Err(schema(format!("r must be positive, got {r}")));
            }
            let model = MatchingModel::new(&g, *n_lead)?;
            let report = counting_function_with(&model, *r, &search_options(*tol)?)?;
            let info = json!({ "count": report.count, "unresolved": report.unresolved.len() });
            simple(json_data(json!({ "schema_version": SCHEMA_VERSION, "report": report })), info)
        }
        Task::Track { geometry, seeds, n_lead, tol } => {
            let g = geometry.load()?;
            let model = MatchingModel::new(&g, *n_lead)?;
            let hits = track_family_with(&model, seeds, &search_options(*tol)?)?;
            let mut t = Table::new(&["seed", "hit", "re_k", "im_k", "lambda", "multiplicity", "distance"]);
            for h in &hits {
                let mut row = vec![num(h.seed), h.hit.is_some().to_string()];
                match &h.hit {
                    Some(r) => row.extend([
                        num(r.point.k.re),
                        num(r.point.k.im),
                        lambda_label(&r.point.lambda),
                        r.multiplicity.to_string(),
                    ]),
                    None => row.extend([String::new(), String::new(), String::new(), String::new()]),
                }
                row.push(opt_num(h.distance));
                t.push(row);
            }
            simple(t.to_csv(), json!({ "corollary1_fit": corollary1_fit(&hits) }))
        }
        Task::Quasimode { d, r1, r2, q, pmin, pmax, alpha, bc } => {
            let spec = QuasimodeSpec::new(*d, *r1, *r2, *q).map_err(|e| schema(e.to_string()))?;
            let list = seeds(&spec, *pmin, *pmax, *alpha, *bc)?;
            let mut t = Table::new(&["p", "w", "lambda", "gap_ok"]);
            for s in &list {
                t.push(vec![s.p.to_string(), num(s.w), num(s.lambda), s.gap_ok.to_string()]);
            }
            simple(t.to_csv(), json!({ "stability": spec.stability().ok() }))
        }
        Task::FredholmDetScan { geometry, sheet, ks, grid } => {
            let g = geometry.load()?;
            let lambda = lambda_of(sheet, g.bc)?;
            let points = ks
                .iter()
                .map(|&k| SheetPoint::new(k, lambda.iter().copied(), g.bc))
                .collect::<crate::Result<Vec<_>>>()?;
            let (fr, info) = fredholm_of(&g, grid)?;
            let mut t = Table::new(&["re_k", "im_k", "lambda", "re_h", "im_h", "log_abs_h", "cond_estimate", "rank"]);
            let mut logs = Vec::new();
            for p in &points {
                let d = fr.h_det(p)?;
                logs.push(d.log_abs);
                t.push(vec![
                    num(p.k.re),
                    num(p.k.im),
                    lambda_label(&p.lambda),
                    num(d.h_value.re),
                    num(d.h_value.im),
                    num(d.log_abs),
                    num(d.cond_estimate),
                    d.rank.to_string(),
                ]);
            }
            let real: Vec<f64> = ks.iter().filter(|k| k.im == 0.0).map(|k| k.re).collect();
            let growth = if real.len() == ks.len() && lambda.is_empty() { growth_exponent(&real, &logs) } else { None };
            simple(t.to_csv(), merge(info, json!({ "growth_exponent": growth })))
        }
        Task::FredholmSvDecay { geometry, grid, power_iters, seed } => {
            let g = geometry.load()?;
            let (fr, info) = fredholm_of(&g, grid)?;
            let opts = SvOptions { power_iters: *power_iters, seed: *seed, ..SvOptions::default() };
            let sv = sv_decay(&fr, &opts)?;
            let mut t = Table::new(&["series", "index", "value"]);
            for (name, s) in [("resolvent", &sv.resolvent), ("commutator", &sv.commutator)] {
                for (j, v) in s.values.iter().enumerate() {
                    t.push(vec![name.into(), (j + 1).to_string(), num(*v)]);
                }
            }
            let fit = |s: &crate::fredholm::SvSeries| json!({ "slope": s.slope, "fit_lo": s.fit_lo, "fit_hi": s.fit_hi, "area": s.area });
            simple(t.to_csv(), merge(info, json!({ "resolvent": fit(&sv.resolvent), "commutator": fit(&sv.commutator) })))
        }
        Task::FredholmLaurent { geometry, l, radius, grid } => {
            let g = geometry.load()?;
            if !(*radius > 0.0 && *radius < 0.5) {
                return Err(schema(format!("radius must lie in (0, 0.5), got {radius}")));
            }
            let (fr, info) = fredholm_of(&g, grid)?;
            let rep = threshold_laurent(&fr, *l, *radius)?;
            let mut t = Table::new(&["l", "radius", "samples", "dropped", "a_norm", "b_norm", "c_norm", "fit_residual"]);
            let dropped: Vec<String> = rep.dropped.iter().map(|d| d.to_string()).collect();
            t.push(vec![
                rep.l.to_string(),
                num(rep.radius),
                rep.samples.to_string(),
                dropped.join(" "),
                num(rep.a_norm),
                num(rep.b_norm),
                num(rep.c_norm),
                num(rep.fit_residual),
            ]);
            simple(t.to_csv(), info)
        }
        Task::FredholmNormScan { geometry, ks, grid } => {
            let g = geometry.load()?;
            let (fr, info) = fredholm_of(&g, grid)?;
            let scan = resolvent_norm_scan(&fr, ks)?;
            let mut t = Table::new(&["re_k", "im_k", "norm", "cond_estimate", "flagged"]);
            for p in &scan.points {
                t.push(vec![num(p.k.re), num(p.k.im), num(p.norm), num(p.cond_estimate), p.flagged.to_string()]);
            }
            simple(t.to_csv(), merge(info, json!({ "growth_exponent": scan.exponent })))
        }
    }
}

/// Reads `GUIDEWAVE_THREADS` and sizes the global pool. Results do not
/// depend on the value; only wall time does.
pub fn init_threads() -> Result<Option<usize>, CliError> {
    let Ok(v) = std::env::var("GUIDEWAVE_THREADS") else {
        return Ok(None);
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| schema(format!("GUIDEWAVE_THREADS must be a positive integer, got {v:?}")))?;
    // A pool that already exists (tests, embedding) is left alone.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(Some(n))
}

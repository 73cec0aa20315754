//! File formats and run configuration.
//!
//! Every data file is a CSV whose first line is `#schema_version=N`,
//! followed by a header row. Run metadata (software version, the echoed
//! configuration, wall time) goes to a JSON sidecar so that the data file
//! itself depends on nothing but the configuration.

use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;
pub const SOFTWARE: &str = "guidewave";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

const VERSION_PREFIX: &str = "#schema_version=";

/// A CSV table held as text cells.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Table {
    pub columns: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl Table {
    pub fn new(columns: &[&str]) -> Table {
        Table { columns: columns.iter().map(|c| c.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<String>) {
        debug_assert_eq!(row.len(), self.columns.len());
        self.rows.push(row);
    }

    pub fn column(&self, name: &str) -> Option<usize> {
        self.columns.iter().position(|c| c == name)
    }

    /// Cells of one column parsed as reals.
    pub fn reals(&self, name: &str) -> Result<Vec<f64>> {
        let i = self.column(name).ok_or_else(|| Error::Schema(format!("missing column {name:?}")))?;
        self.rows
            .iter()
            .map(|r| r[i].parse::<f64>().map_err(|_| Error::Schema(format!("column {name:?}: bad number {:?}", r[i]))))
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::CRLF).from_writer(Vec::new());
        w.write_record(&self.columns).expect("in-memory write");
        for r in &self.rows {
            w.write_record(r).expect("in-memory write");
        }
        let body = String::from_utf8(w.into_inner().expect("in-memory flush")).expect("cells are UTF-8");
        format!("{VERSION_PREFIX}{SCHEMA_VERSION}\r\n{body}")
    }

    /// Parses text written by [`Table::to_csv`]. A missing or unknown
    /// schema version is an error.
    pub fn from_csv(text: &str) -> Result<Table> {
        let (first, rest) = text.split_once('\n').unwrap_or((text, ""));
        let v = first
            .trim_end_matches('\r')
            .strip_prefix(VERSION_PREFIX)
            .ok_or_else(|| Error::Schema("missing #schema_version line".into()))?;
        check_version(v.trim().parse().map_err(|_| Error::Schema(format!("bad schema version {v:?}")))?)?;
        let mut r = csv::ReaderBuilder::new().from_reader(rest.as_bytes());
        let columns = r.headers().map_err(|e| Error::Schema(e.to_string()))?.iter().map(String::from).collect();
        let rows = r
            .records()
            .map(|rec| rec.map(|rec| rec.iter().map(String::from).collect()).map_err(|e| Error::Schema(e.to_string())))
            .collect::<Result<_>>()?;
        Ok(Table { columns, rows })
    }
}

pub fn check_version(v: u32) -> Result<()> {
    if v == SCHEMA_VERSION {
        Ok(())
    } else {
        Err(Error::Schema(format!("unsupported schema_version {v} (this build reads {SCHEMA_VERSION})")))
    }
}

/// Shortest round-trip decimal form, so output is stable across runs.
pub fn num(x: f64) -> String {
    format!("{x:?}")
}

pub fn opt_num(x: Option<f64>) -> String {
    x.map(num).unwrap_or_default()
}

/// Parses `a,b,...` into exactly `n` reals.
pub fn parse_reals(s: &str, n: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|_| Error::Schema(format!("bad number {p:?} in {s:?}"))))
        .collect::<Result<_>>()?;
    if v.len() != n {
        return Err(Error::Schema(format!("expected {n} comma-separated values, got {s:?}")));
    }
    Ok(v)
}

/// `re` or `re,im`.
pub fn parse_complex(s: &str) -> Result<Complex64> {
    match s.split(',').count() {
        1 => Ok(Complex64::new(parse_reals(s, 1)?[0], 0.0)),
        _ => {
            let v = parse_reals(s, 2)?;
            Ok(Complex64::new(v[0], v[1]))
        }
    }
}

/// `lo,hi,n`: `n` equispaced points including both ends.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Sidecar metadata written next to each data file.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    pub schema_version: u32,
    pub software: String,
    pub version: String,
    pub command: String,
    pub data_file: String,
    pub config: RunConfig,
    pub wall_time_s: f64,
    /// Command-specific summary values.
    #[serde(default)]
    pub info: serde_json::Value,
}

/// Where the files of a run go.
pub fn output_paths(dir: &Path, name: &str) -> (PathBuf, PathBuf) {
    (dir.join(name), dir.join(format!("{name}.meta.json")))
}

/// A full, replayable description of one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub output_dir: PathBuf,
    /// Data file name inside `output_dir`; a per-command default when absent.
    #[serde(default)]
    pub output_name: Option<String>,
    pub task: Task,
}

impl RunConfig {
    pub fn new(task: Task, output_dir: impl Into<PathBuf>) -> RunConfig {
        RunConfig { schema_version: SCHEMA_VERSION, output_dir: output_dir.into(), output_name: None, task }
    }

    pub fn from_json(text: &str) -> Result<RunConfig> {
        let v: serde_json::Value = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        let version = v
            .get("schema_version")
            .and_then(|x| x.as_u64())
            .ok_or_else(|| Error::Schema("config needs an integer schema_version".into()))?;
        check_version(version as u32)?;
        serde_json::from_value(v).map_err(|e| Error::Schema(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn data_name(&self) -> String {
        self.output_name.clone().unwrap_or_else(|| self.task.default_name().to_string())
    }
}

/// Geometry input: a JSON file or one of the built-in fixtures
/// (`free-strip`, `free-strip-neumann`, `cavity`, `weak-coupling`, `staircase`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum GeometrySource {
    File(PathBuf),
    Fixture(String),
}

impl GeometrySource {
    /// Bare names of fixtures are taken as fixtures, anything else as a path.
    pub fn parse(s: &str) -> GeometrySource {
        if crate::fixtures::by_name(s).is_some() {
            GeometrySource::Fixture(s.to_string())
        } else {
            GeometrySource::File(PathBuf::from(s))
        }
    }

    pub fn load(&self) -> Result<crate::Geometry> {
        match self {
            GeometrySource::Fixture(n) => {
                crate::fixtures::by_name(n).ok_or_else(|| Error::Schema(format!("unknown fixture {n:?}")))
            }
            GeometrySource::File(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Error::Schema(format!("cannot read {}: {e}", p.display())))?;
                crate::Geometry::from_json(&text).map_err(|e| Error::Schema(e.to_string()))
            }
        }
    }
}

/// Grid and reference point of a Fredholm run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridParams {
    pub h: f64,
    pub k0: Complex64,
    #[serde(default)]
    pub x_cap: Option<f64>,
}

impl Default for GridParams {
    fn default() -> Self {
        GridParams { h: crate::fredholm::DEFAULT_GRID_STEP, k0: crate::fredholm::DEFAULT_K0, x_cap: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Task {
    GeometryValidate {
        geometry: GeometrySource,
    },
    Green {
        bc: crate::BoundaryCondition,
        k: Complex64,
        sheet: String,
        /// Source point `(x', y')`.
        source: [f64; 2],
        /// `x0, x1, nx`
        xs: [f64; 3],
        /// `y0, y1, ny`
        ys: [f64; 3],
        n_max: u32,
    },
    Smatrix {
        geometry: GeometrySource,
        ks: Vec<f64>,
        n_lead: usize,
    },
    Det {
        geometry: GeometrySource,
        sheet: String,
        /// `re0, re1, im0, im1`
        rect: [f64; 4],
        /// Grid points along re and im.
        samples: [usize; 2],
        n_lead: usize,
    },
    Resonances {
        geometry: GeometrySource,
        sheet: String,
        rect: [f64; 4],
        n_lead: usize,
        tol: f64,
    },
    Count {
        geometry: GeometrySource,
        r: f64,
        n_lead: usize,
        tol: f64,
    },
    Track {
        geometry: GeometrySource,
        seeds: Vec<f64>,
        n_lead: usize,
        tol: f64,
    },
    Quasimode {
        d: f64,
        r1: f64,
        r2: f64,
        q: u32,
        pmin: u32,
        pmax: u32,
        alpha: f64,
        bc: crate::BoundaryCondition,
    },
    FredholmDetScan {
        geometry: GeometrySource,
        sheet: String,
        ks: Vec<Complex64>,
        grid: GridParams,
    },
    FredholmSvDecay {
        geometry: GeometrySource,
        grid: GridParams,
        power_iters: usize,
        seed: u64,
    },
    FredholmLaurent {
        geometry: GeometrySource,
        l: u32,
        radius: f64,
        grid: GridParams,
    },
    FredholmNormScan {
        geometry: GeometrySource,
        ks: Vec<f64>,
        grid: GridParams,
    },
}

impl Task {
    pub fn command(&self) -> &'static str {
        match self {
            Task::GeometryValidate { .. } => "geometry-validate",
            Task::Green { .. } => "green",
            Task::Smatrix { .. } => "smatrix",
            Task::Det { .. } => "det",
            Task::Resonances { .. } => "resonances",
            Task::Count { .. } => "count",
            Task::Track { .. } => "track",
            Task::Quasimode { .. } => "quasimode",
            Task::FredholmDetScan { .. } => "fredholm-det-scan",
            Task::FredholmSvDecay { .. } => "fredholm-sv-decay",
            Task::FredholmLaurent { .. } => "fredholm-laurent",
            Task::FredholmNormScan { .. } => "fredholm-norm-scan",
        }
    }

    fn default_name(&self) -> &'static str {
        match self {
            Task::GeometryValidate { .. } => "violations.json",
            Task::Green { .. } => "green.csv",
            Task::Smatrix { .. } => "smatrix.csv",
            Task::Det { .. } => "det.csv",
            Task::Resonances { .. } => "resonances.csv",
            Task::Count { .. } => "count.json",
            Task::Track { .. } => "track.csv",
            Task::Quasimode { .. } => "seeds.csv",
            Task::FredholmDetScan { .. } => "fredholm_det.csv",
            Task::FredholmSvDecay { .. } => "fredholm_sv.csv",
            Task::FredholmLaurent { .. } => "fredholm_laurent.csv",
            Task::FredholmNormScan { .. } => "fredholm_norm.csv",
        }
    }
}

/// Seed frequencies from a CSV with a `lambda` column, as written by the
/// `quasimode` command.
pub fn read_seeds(text: &str) -> Result<Vec<f64>> {
    Table::from_csv(text)?.reals("lambda")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_with_quoting() {
        let mut t = Table::new(&["a", "b"]);
        t.push(vec!["1.5".into(), "{1,2}".into()]);
        t.push(vec!["say \"hi\"".into(), "".into()]);
        let text = t.to_csv();
        assert!(text.starts_with("#schema_version=1\r\na,b\r\n"));
        assert!(text.contains("\"{1,2}\""));
        assert_eq!(Table::from_csv(&text).unwrap(), t);
    }

    #[test]
    fn unknown_versions_are_rejected() {
        assert!(matches!(Table::from_csv("#schema_version=2\na\n1\n"), Err(Error::Schema(_))));
        assert!(matches!(Table::from_csv("a\n1\n"), Err(Error::Schema(_))));
        let cfg = RunConfig::new(Task::Count { geometry: GeometrySource::parse("cavity"), r: 5.0, n_lead: 20, tol: 1e-8 }, "out");
        let text = cfg.to_json().replace("\"schema_version\": 1", "\"schema_version\": 7");
        assert!(matches!(RunConfig::from_json(&text), Err(Error::Schema(_))));
    }

    #[test]
    fn config_round_trip() {
        let cfg = RunConfig::new(
            Task::FredholmDetScan {
                geometry: GeometrySource::parse("cavity"),
                sheet: "1".into(),
                ks: vec![Complex64::new(3.1, -0.2)],
                grid: GridParams::default(),
            },
            "runs/a",
        );
        assert_eq!(RunConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        assert!(RunConfig::from_json(&cfg.to_json().replace("\"task\"", "\"tsak\"")).is_err());
    }

    #[test]
    fn numbers_round_trip() {
        for x in [0.1, -3.0, 1e-300, 2.0f64.sqrt()] {
            assert_eq!(num(x).parse::<f64>().unwrap(), x);
        }
        assert_eq!(parse_complex("1.5,-2").unwrap(), Complex64::new(1.5, -2.0));
        assert!(parse_reals("1,2", 3).is_err());
        assert_eq!(linspace(0.0, 1.0, 3), vec![0.0, 0.5, 1.0]);
    }
}

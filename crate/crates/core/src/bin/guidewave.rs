use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use guidewave::cli::{init_threads, run, CliError, EXIT_SCHEMA};
use guidewave::io::{linspace, parse_complex, parse_reals, read_seeds, GeometrySource, GridParams, RunConfig, Task};
use guidewave::{BoundaryCondition, Complex64, Error};

#[derive(Parser)]
#[command(name = "guidewave", version, about = "Resonances of perturbed planar waveguides")]
struct Cli {
    /// Output directory, or a data file path (anything with an extension).
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Check or emit geometry files.
    Geometry {
        #[command(subcommand)]
        action: GeometryAction,
    },
    /// Free strip Green's function on a grid of field points.
    Green {
        /// `re` or `re,im`
        #[arg(long, allow_hyphen_values = true)]
        k: String,
        #[arg(long, default_value = "physical")]
        sheet: String,
        #[arg(long, default_value = "dirichlet", value_parser = parse_bc)]
        bc: BoundaryCondition,
        /// `xp,yp`
        #[arg(long, allow_hyphen_values = true)]
        source: String,
        /// `x0,x1,nx`
        #[arg(long, allow_hyphen_values = true)]
        xs: String,
        /// `y0,y1,ny`
        #[arg(long, allow_hyphen_values = true)]
        ys: String,
        #[arg(long, default_value_t = 200)]
        nmax: u32,
    },
    /// S-matrix diagnostics at real k.
    Smatrix {
        #[command(flatten)]
        geometry: GeometryArg,
        #[command(flatten)]
        ks: RealKs,
        #[arg(long, default_value_t = 30)]
        nlead: usize,
    },
    /// Normalized matching determinant on a grid over a box.
    Det {
        #[command(flatten)]
        geometry: GeometryArg,
        #[arg(long, default_value = "physical")]
        sheet: String,
        /// `re0,re1,im0,im1`
        #[arg(long = "box", allow_hyphen_values = true)]
        rect: String,
        /// `n_re,n_im`
        #[arg(long, default_value = "11,11")]
        samples: String,
        #[arg(long, default_value_t = 30)]
        nlead: usize,
    },
    /// Resonances in a box on one sheet.
    Resonances {
        #[command(flatten)]
        geometry: GeometryArg,
        #[arg(long, default_value = "physical")]
        sheet: String,
        /// `re0,re1,im0,im1`
        #[arg(long = "box", allow_hyphen_values = true)]
        rect: String,
        #[arg(long, default_value_t = 30)]
        nlead: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Resonance count `N(r)` with a per-sheet breakdown.
    Count {
        #[command(flatten)]
        geometry: GeometryArg,
        #[arg(long)]
        r: f64,
        #[arg(long, default_value_t = 30)]
        nlead: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Follow a family of resonances from quasimode seeds.
    Track {
        #[command(flatten)]
        geometry: GeometryArg,
        /// Seed CSV as written by `quasimode`.
        #[arg(long)]
        seeds: PathBuf,
        #[arg(long, default_value_t = 30)]
        nlead: usize,
        #[arg(long, default_value_t = 1e-8)]
        tol: f64,
    },
    /// Two-mirror quasimode frequencies.
    Quasimode {
        #[arg(long)]
        d: f64,
        #[arg(long)]
        r1: f64,
        #[arg(long)]
        r2: f64,
        #[arg(long, default_value_t = 0)]
        q: u32,
        #[arg(long, default_value_t = 1)]
        pmin: u32,
        #[arg(long)]
        pmax: u32,
        #[arg(long, default_value_t = 0.5)]
        alpha: f64,
        #[arg(long, default_value = "dirichlet", value_parser = parse_bc)]
        bc: BoundaryCondition,
    },
    /// Grid determinant `h(k)` and its diagnostics.
    Fredholm {
        #[command(subcommand)]
        action: FredholmAction,
    },
    /// Execute a JSON run configuration.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Subcommand)]
enum GeometryAction {
    /// Print constraint violations; exit status 1 if there are any.
    Validate {
        #[command(flatten)]
        geometry: GeometryArg,
    },
    /// Print a built-in geometry as JSON.
    Fixture { name: String },
}

#[derive(Subcommand)]
enum FredholmAction {
    DetScan {
        #[command(flatten)]
        geometry: GeometryArg,
        #[arg(long, default_value = "physical")]
        sheet: String,
        /// Semicolon-separated points `re,im;re,im`.
        #[arg(long, allow_hyphen_values = true, conflicts_with = "k_range")]
        k: Option<String>,
        /// `lo,hi,n` along the real axis, shifted by `--im`.
        #[arg(long, allow_hyphen_values = true)]
        k_range: Option<String>,
        #[arg(long, default_value_t = 0.0, allow_hyphen_values = true)]
        im: f64,
        #[command(flatten)]
        grid: GridArgs,
    },
    SvDecay {
        #[command(flatten)]
        geometry: GeometryArg,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, default_value_t = 1)]
        power_iters: usize,
        #[arg(long, default_value_t = 0x5eed)]
        seed: u64,
    },
    Laurent {
        #[command(flatten)]
        geometry: GeometryArg,
        #[arg(long)]
        l: u32,
        #[arg(long, default_value_t = guidewave::fredholm::DEFAULT_LAURENT_RADIUS)]
        radius: f64,
        #[command(flatten)]
        grid: GridArgs,
    },
    NormScan {
        #[command(flatten)]
        geometry: GeometryArg,
        #[command(flatten)]
        ks: RealKs,
        #[command(flatten)]
        grid: GridArgs,
    },
}

#[derive(Args)]
struct GeometryArg {
    /// JSON file, or a fixture name: free-strip, free-strip-neumann,
    /// cavity, weak-coupling, staircase.
    #[arg(long)]
    geometry: String,
}

#[derive(Args)]
struct RealKs {
    /// Comma-separated real k values.
    #[arg(long, allow_hyphen_values = true, conflicts_with = "k_range")]
    k: Option<String>,
    /// `lo,hi,n`
    #[arg(long, allow_hyphen_values = true)]
    k_range: Option<String>,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long, default_value_t = guidewave::fredholm::DEFAULT_GRID_STEP)]
    h: f64,
    /// `re,im`
    #[arg(long, default_value = "0,25", allow_hyphen_values = true)]
    k0: String,
    #[arg(long)]
    x_cap: Option<f64>,
}

fn parse_bc(s: &str) -> Result<BoundaryCondition, String> {
    match s.to_ascii_lowercase().as_str() {
        "dirichlet" | "d" => Ok(BoundaryCondition::Dirichlet),
        "neumann" | "n" => Ok(BoundaryCondition::Neumann),
        _ => Err(format!("unknown boundary condition {s:?}")),
    }
}

fn schema(e: Error) -> CliError {
    CliError { code: EXIT_SCHEMA, error: e }
}

fn array<const N: usize>(s: &str) -> Result<[f64; N], CliError> {
    let v = parse_reals(s, N).map_err(schema)?;
    Ok(v.try_into().expect("length checked"))
}

fn real_ks(ks: &RealKs) -> Result<Vec<f64>, CliError> {
    match (&ks.k, &ks.k_range) {
        (Some(list), None) => list
            .split(',')
            .map(|p| parse_reals(p, 1).map(|v| v[0]))
            .collect::<Result<_, _>>()
            .map_err(schema),
        (None, Some(r)) => {
            let [lo, hi, n] = array::<3>(r)?;
            Ok(linspace(lo, hi, n as usize))
        }
        _ => Err(schema(Error::Schema("give one of --k or --k-range".into()))),
    }
}

fn grid(g: &GridArgs) -> Result<GridParams, CliError> {
    Ok(GridParams { h: g.h, k0: parse_complex(&g.k0).map_err(schema)?, x_cap: g.x_cap })
}

fn source(g: &GeometryArg) -> GeometrySource {
    GeometrySource::parse(&g.geometry)
}

/// Splits `--out` into directory and optional file name.
fn out_location(out: &Path) -> (PathBuf, Option<String>) {
    if out.extension().is_some() {
        let dir = out.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        (dir.to_path_buf(), out.file_name().map(|n| n.to_string_lossy().into_owned()))
    } else {
        (out.to_path_buf(), None)
    }
}

fn task(command: Command) -> Result<Option<Task>, CliError> {
    Ok(Some(match command {
        Command::Geometry { action } => match action {
            GeometryAction::Validate { geometry } => Task::GeometryValidate { geometry: source(&geometry) },
            GeometryAction::Fixture { name } => {
                let g = guidewave::fixtures::by_name(&name)
                    .ok_or_else(|| schema(Error::Schema(format!("unknown fixture {name:?}"))))?;
                println!("{}", g.to_json());
                return Ok(None);
            }
        },
        Command::Green { k, sheet, bc, source, xs, ys, nmax } => Task::Green {
            bc,
            k: parse_complex(&k).map_err(schema)?,
            sheet,
            source: array::<2>(&source)?,
            xs: array::<3>(&xs)?,
            ys: array::<3>(&ys)?,
            n_max: nmax,
        },
        Command::Smatrix { geometry, ks, nlead } => {
            Task::Smatrix { geometry: source(&geometry), ks: real_ks(&ks)?, n_lead: nlead }
        }
        Command::Det { geometry, sheet, rect, samples, nlead } => {
            let [a, b] = array::<2>(&samples)?;
            Task::Det { geometry: source(&geometry), sheet, rect: array::<4>(&rect)?, samples: [a as usize, b as usize], n_lead: nlead }
        }
        Command::Resonances { geometry, sheet, rect, nlead, tol } => {
            Task::Resonances { geometry: source(&geometry), sheet, rect: array::<4>(&rect)?, n_lead: nlead, tol }
        }
        Command::Count { geometry, r, nlead, tol } => Task::Count { geometry: source(&geometry), r, n_lead: nlead, tol },
        Command::Track { geometry, seeds, nlead, tol } => {
            let text = std::fs::read_to_string(&seeds)
                .map_err(|e| schema(Error::Schema(format!("cannot read {}: {e}", seeds.display()))))?;
            Task::Track { geometry: source(&geometry), seeds: read_seeds(&text).map_err(schema)?, n_lead: nlead, tol }
        }
        Command::Quasimode { d, r1, r2, q, pmin, pmax, alpha, bc } => Task::Quasimode { d, r1, r2, q, pmin, pmax, alpha, bc },
        Command::Fredholm { action } => match action {
            FredholmAction::DetScan { geometry, sheet, k, k_range, im, grid: g } => {
                let ks: Vec<Complex64> = match (k, k_range) {
                    (Some(list), None) => list.split(';').map(parse_complex).collect::<Result<_, _>>().map_err(schema)?,
                    (None, Some(r)) => {
                        let [lo, hi, n] = array::<3>(&r)?;
                        linspace(lo, hi, n as usize).into_iter().map(|x| Complex64::new(x, im)).collect()
                    }
                    _ => return Err(schema(Error::Schema("give one of --k or --k-range".into()))),
                };
                Task::FredholmDetScan { geometry: source(&geometry), sheet, ks, grid: grid(&g)? }
            }
            FredholmAction::SvDecay { geometry, grid: g, power_iters, seed } => {
                Task::FredholmSvDecay { geometry: source(&geometry), grid: grid(&g)?, power_iters, seed }
            }
            FredholmAction::Laurent { geometry, l, radius, grid: g } => {
                Task::FredholmLaurent { geometry: source(&geometry), l, radius, grid: grid(&g)? }
            }
            FredholmAction::NormScan { geometry, ks, grid: g } => {
                Task::FredholmNormScan { geometry: source(&geometry), ks: real_ks(&ks)?, grid: grid(&g)? }
            }
        },
        Command::Run { .. } => unreachable!("handled by the caller"),
    }))
}

fn main_inner(cli: Cli) -> Result<u8, CliError> {
    init_threads()?;
    let cfg = match cli.command {
        Command::Run { config } => {
            let text = std::fs::read_to_string(&config)
                .map_err(|e| schema(Error::Schema(format!("cannot read {}: {e}", config.display()))))?;
            RunConfig::from_json(&text).map_err(schema)?
        }
        command => {
            let Some(task) = task(command)? else {
                return Ok(0);
            };
            let (dir, name) = out_location(&cli.out);
            RunConfig { output_name: name, ..RunConfig::new(task, dir) }
        }
    };
    let validating = matches!(cfg.task, Task::GeometryValidate { .. });
    let outcome = run(&cfg)?;
    if validating {
        print!("{}", std::fs::read_to_string(&outcome.data_path).unwrap_or_default());
        return Ok(if outcome.violations > 0 { 1 } else { 0 });
    }
    println!("{}", outcome.data_path.display());
    Ok(0)
}

fn main() -> ExitCode {
    match main_inner(Cli::parse()) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code as u8)
        }
    }
}

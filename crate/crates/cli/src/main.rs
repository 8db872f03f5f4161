//! `akpz`: one experiment per invocation.
//!
//! Exit status: 0 success, 1 numerical failure (diagnostic JSON on stderr
//! and in `<out>/error.json`), 2 usage error.

mod config;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use akpz_core::acceptance::run_suite;
use akpz_core::evolution::Solver;
use akpz_core::grid::{fmt_f64, GridGeometry, HeightField};
use akpz_core::shapes::{
    build_shape, el_residual, minimize_surface_tension, ElOptions, MinimizeOptions, ShapeRecipe, BURGERS_EXTENT,
};
use akpz_core::speed::{liquid_grid, SpeedKind, DEFAULT_TAU};
use akpz_core::surface_tension::{sigma, sigma_zmap};
use akpz_core::{
    akpz_map, run_preservation_experiment, DimerModel, PreservationConfig, SigmaOptions, SigmaRoute, Slope,
    SpeedFunction,
};
use clap::{Parser, Subcommand};
use serde_json::json;

use config::{
    load, parse_extent, parse_floats, parse_grid, positive, AcceptArgs, AkpzMapArgs, ElPreserveArgs,
    HarmonicityArgs, Layered, MakeShapeArgs, SurfaceTensionArgs, UsageError,
};

#[derive(Parser, Debug)]
#[command(name = "akpz", version, about = "Growth-speed, surface-tension and Burgers-shape experiments")]
struct Cli {
    /// JSON file with defaults for the subcommand; explicit flags win
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Classify liquid slopes by the sign of det D^2 v
    AkpzMap(AkpzMapArgs),
    /// Laplacian of f at z(rho) over the liquid region
    Harmonicity(HarmonicityArgs),
    /// sigma and its Hessian over the liquid region
    SurfaceTension(SurfaceTensionArgs),
    /// Build an equilibrium height profile
    MakeShape(MakeShapeArgs),
    /// Evolve an equilibrium shape and track its residuals
    ElPreserve(ElPreserveArgs),
    /// Run the acceptance suite
    Accept(AcceptArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::AkpzMap(_) => "akpz-map",
            Command::Harmonicity(_) => "harmonicity",
            Command::SurfaceTension(_) => "surface-tension",
            Command::MakeShape(_) => "make-shape",
            Command::ElPreserve(_) => "el-preserve",
            Command::Accept(_) => "accept",
        }
    }
}

enum Failure {
    Usage(UsageError),
    Numerical(akpz_core::Error),
    /// Already reported; just exit 1.
    Reported,
}

impl From<UsageError> for Failure {
    fn from(e: UsageError) -> Self {
        Failure::Usage(e)
    }
}

impl From<akpz_core::Error> for Failure {
    fn from(e: akpz_core::Error) -> Self {
        Failure::Numerical(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Numerical(e.into())
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let experiment = cli.command.name();
    let mut out_dir = None;
    let result = configure_threads().and_then(|_| run(cli, &mut out_dir));
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Numerical(e)) => {
            let kind = format!("{e:?}");
            let kind = kind.split(|c: char| !c.is_alphanumeric()).next().unwrap_or("Error");
            let diag = json!({ "status": "error", "experiment": experiment, "kind": kind, "message": e.to_string() });
            let text = serde_json::to_string_pretty(&diag).expect("diagnostic serializes");
            eprintln!("{text}");
            if let Some(dir) = out_dir {
                let _ = std::fs::create_dir_all(&dir).and_then(|_| std::fs::write(dir.join("error.json"), &text));
            }
            ExitCode::from(1)
        }
        Err(Failure::Reported) => ExitCode::from(1),
    }
}

fn configure_threads() -> Outcome {
    let Ok(raw) = std::env::var("AKPZ_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| UsageError::new("AKPZ_THREADS", format!("`{raw}` is not a positive integer")))?;
    // Only fails if a pool already exists, which cannot happen this early.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn layered<T: Layered>(mut flags: T, config: &Option<PathBuf>, experiment: &str) -> Result<T, UsageError> {
    if let Some(path) = config {
        flags.layer_under(load(path, experiment)?);
    }
    Ok(flags)
}

fn run(cli: Cli, out_dir: &mut Option<PathBuf>) -> Outcome {
    let name = cli.command.name();
    match cli.command {
        Command::AkpzMap(a) => {
            let a = layered(a, &cli.config, name)?;
            *out_dir = a.out.clone();
            cmd_akpz_map(a)
        }
        Command::Harmonicity(a) => {
            let a = layered(a, &cli.config, name)?;
            *out_dir = a.out.clone();
            cmd_harmonicity(a)
        }
        Command::SurfaceTension(a) => {
            let a = layered(a, &cli.config, name)?;
            *out_dir = a.out.clone();
            cmd_surface_tension(a)
        }
        Command::MakeShape(a) => {
            let a = layered(a, &cli.config, name)?;
            *out_dir = a.out.clone();
            cmd_make_shape(a)
        }
        Command::ElPreserve(a) => {
            let a = layered(a, &cli.config, name)?;
            *out_dir = a.out.clone();
            cmd_el_preserve(a)
        }
        Command::Accept(a) => {
            let a = layered(a, &cli.config, name)?;
            *out_dir = a.out.clone();
            cmd_accept(a)
        }
    }
}

fn model_arg(name: Option<&str>) -> Result<DimerModel, UsageError> {
    let name = name.unwrap_or("honeycomb");
    DimerModel::by_name(name).map_err(|e| UsageError::new("model", e))
}

fn speed_arg(name: Option<&str>, model: &DimerModel) -> Result<SpeedFunction, UsageError> {
    SpeedFunction::from_preset(name.unwrap_or("im-z"), model).map_err(|e| UsageError::new("speed", e))
}

fn margin_arg(m: Option<f64>, default: f64) -> Result<f64, UsageError> {
    let m = m.unwrap_or(default);
    if (0.0..0.5).contains(&m) {
        Ok(m)
    } else {
        Err(UsageError::new("margin", format!("{m} is not in [0, 0.5)")))
    }
}

fn resolution_arg(r: Option<usize>, default: usize) -> Result<usize, UsageError> {
    match r.unwrap_or(default) {
        0 => Err(UsageError::new("resolution", "must be at least 1")),
        r => Ok(r),
    }
}

fn row(cells: &[f64]) -> String {
    cells.iter().map(|&c| fmt_f64(c)).collect::<Vec<_>>().join(",")
}

/// Writes `body` to `<out>/<file>` or stdout.
fn emit(out: &Option<PathBuf>, file: &str, body: &str) -> Outcome {
    match out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join(file), body)?;
        }
        None => std::io::stdout().lock().write_all(body.as_bytes())?,
    }
    Ok(())
}

fn write_json(dir: &Path, file: &str, value: &impl serde::Serialize) -> Outcome {
    std::fs::create_dir_all(dir)?;
    let text = serde_json::to_string_pretty(value).map_err(akpz_core::Error::from)?;
    std::fs::write(dir.join(file), text)?;
    Ok(())
}

fn cmd_akpz_map(a: AkpzMapArgs) -> Outcome {
    let model = model_arg(a.model.as_deref())?;
    let v = speed_arg(a.speed.as_deref(), &model)?;
    let resolution = resolution_arg(a.resolution, 50)?;
    let margin = margin_arg(a.margin, akpz_core::DEFAULT_MARGIN)?;
    let tau = positive("tolerance", a.tolerance.unwrap_or(DEFAULT_TAU))?;

    let map = akpz_map(&v, resolution, margin, tau)?;
    let mut body = String::from("rho1,rho2,v,h11,h12,h22,det,label\n");
    let mut counts = [0usize; 3];
    for c in &map {
        let h = c.hessian;
        body += &format!("{},{}\n", row(&[c.rho.rho1, c.rho.rho2, c.speed, h[0][0], h[0][1], h[1][1], c.det]), c.label);
        counts[c.label as usize] += 1;
    }
    emit(&a.out, "akpz_map.csv", &body)?;
    eprintln!(
        "akpz-map: {} slopes, AKPZ {}, ISOTROPIC {}, DEGENERATE {}",
        map.len(),
        counts[0],
        counts[1],
        counts[2]
    );
    Ok(())
}

fn cmd_harmonicity(a: HarmonicityArgs) -> Outcome {
    let model = model_arg(a.model.as_deref())?;
    let v = speed_arg(a.speed.as_deref(), &model)?;
    if !matches!(v.kind(), SpeedKind::ZComposed { .. }) {
        return Err(UsageError::new("speed", format!("`{}` is not a function of z", v.name())).into());
    }
    let resolution = resolution_arg(a.resolution, 20)?;
    let margin = margin_arg(a.margin, 0.05)?;

    let mut body = String::from("rho1,rho2,z_re,z_im,laplacian\n");
    let mut worst = 0.0f64;
    let slopes = liquid_grid(&model, resolution, margin);
    for &rho in &slopes {
        let z = model.z_from_slope(rho)?;
        let lap = v.laplacian_f_extrapolated(z)?;
        worst = worst.max(lap.abs());
        body += &format!("{}\n", row(&[rho.rho1, rho.rho2, z.re, z.im, lap]));
    }
    emit(&a.out, "harmonicity.csv", &body)?;
    eprintln!("harmonicity: {} slopes, max |Laplacian f| = {worst:.3e}", slopes.len());
    Ok(())
}

fn cmd_surface_tension(a: SurfaceTensionArgs) -> Outcome {
    let model = model_arg(a.model.as_deref())?;
    let margin = margin_arg(a.margin, akpz_core::DEFAULT_MARGIN)?;
    let route = match a.route.as_deref().unwrap_or("zmap") {
        "zmap" => SigmaRoute::ZMap,
        "legendre" => SigmaRoute::Legendre { step: 1e-3 },
        other => return Err(UsageError::new("route", format!("unknown route `{other}`")).into()),
    };
    let slopes = match &a.rho {
        Some(s) => {
            let [r1, r2] = parse_floats::<2>("rho", s)?;
            let rho = Slope::new(r1, r2);
            if !model.is_liquid(rho, 0.0) {
                return Err(UsageError::new("rho", format!("({r1}, {r2}) is not a liquid slope")).into());
            }
            vec![rho]
        }
        None => liquid_grid(&model, resolution_arg(a.resolution, 20)?, margin),
    };

    let mut body = String::from("rho1,rho2,sigma,s11,s12,s22,eig1,eig2\n");
    for &rho in &slopes {
        let value = match route {
            SigmaRoute::ZMap => sigma_zmap(&model, rho)?,
            SigmaRoute::Legendre { .. } => sigma(&model, rho, &SigmaOptions { margin: 0.0, ..Default::default() })?.value,
        };
        let m = route.hessian(&model, rho)?;
        let s = m.sigma;
        body += &format!(
            "{}\n",
            row(&[rho.rho1, rho.rho2, value, s[0][0], s[0][1], s[1][1], m.eigenvalues[0], m.eigenvalues[1]])
        );
    }
    emit(&a.out, "surface_tension.csv", &body)
}

fn geometry_arg(grid: &Option<String>, extent: &Option<String>, default_n: usize) -> Result<GridGeometry, UsageError> {
    let [n1, n2] = match grid {
        Some(g) => parse_grid("grid", g)?,
        None => [default_n, default_n],
    };
    let [lo, hi] = match extent {
        Some(e) => parse_extent("extent", e)?,
        None => [BURGERS_EXTENT.0, BURGERS_EXTENT.1],
    };
    GridGeometry::from_extent(n1, n2, lo, hi).map_err(|e| UsageError::new("grid", e))
}

fn cmd_make_shape(a: MakeShapeArgs) -> Outcome {
    let model = model_arg(a.model.as_deref())?;
    let c = a.c.clone().unwrap_or_else(|| "const-i".into());
    let recipe = ShapeRecipe::parse(&format!("burgers:{c}")).map_err(|e| UsageError::new("C", e))?;
    let variational = match a.method.as_deref().unwrap_or("burgers") {
        "burgers" => false,
        "variational" => true,
        other => return Err(UsageError::new("method", format!("unknown method `{other}`")).into()),
    };
    let geometry = geometry_arg(&a.grid, &a.extent, 33)?;

    let shape = build_shape(&model, &recipe, geometry)?;
    let mut summary = json!({ "model": model.name(), "method": if variational { "variational" } else { "burgers" }, "C": c });
    let (height, z): (HeightField, _) = if variational {
        let m = minimize_surface_tension(&model, &shape.height, &MinimizeOptions::default())?;
        let diff = m
            .field
            .values
            .iter()
            .zip(&shape.height.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        summary["newton_iterations"] = json!(m.newton_iterations);
        summary["gradient_norm"] = json!(m.gradient_norm);
        summary["max_diff_from_burgers"] = json!(diff);
        (m.field, None)
    } else {
        (shape.height, shape.z)
    };
    let el = el_residual(&height, &model, &ElOptions::default())?;
    summary["max_EL"] = json!(el.max_el());

    match &a.out {
        Some(dir) => {
            height.save(dir, "height", "h", model.name(), None)?;
            if let Some(z) = &z {
                z.save(dir, "z", "z", model.name(), Some(model.branch_offset()))?;
            }
            write_json(dir, "summary.json", &summary)?;
        }
        None => {
            let mut buf = Vec::new();
            height.write_csv(&mut buf, "h")?;
            std::io::stdout().lock().write_all(&buf)?;
        }
    }
    eprintln!("make-shape: max |EL| = {:.3e}", el.max_el());
    Ok(())
}

fn cmd_el_preserve(a: ElPreserveArgs) -> Outcome {
    let model = model_arg(a.model.as_deref())?;
    let speed = a.speed.clone().unwrap_or_else(|| "im-z".into());
    speed_arg(Some(&speed), &model)?;
    let shape = ShapeRecipe::parse(a.shape.as_deref().unwrap_or("burgers:const-i")).map_err(|e| UsageError::new("shape", e))?;
    let grid = match &a.grid {
        Some(g) => parse_grid("grid", g)?,
        None => [65, 65],
    };
    let extent = match &a.extent {
        Some(e) => parse_extent("extent", e)?,
        None => [BURGERS_EXTENT.0, BURGERS_EXTENT.1],
    };
    let solver: Solver = a.solver.as_deref().unwrap_or("char").parse().map_err(|e| UsageError::new("solver", e))?;
    let t_final = match a.t_final {
        Some(t) if !(t >= 0.0 && t.is_finite()) => return Err(UsageError::new("T", format!("{t} is not a time")).into()),
        t => t,
    };
    let nu = a.nu.map(|x| positive("nu", x)).transpose()?;
    let dt = a.dt.map(|x| positive("dt", x)).transpose()?;
    let outputs = match a.outputs.unwrap_or(4) {
        0 => return Err(UsageError::new("outputs", "must be at least 1").into()),
        n => n,
    };
    let probe = a.probe.as_deref().map(|p| parse_floats::<2>("probe", p)).transpose()?;
    let cfg = PreservationConfig {
        model: model.name().to_string(),
        speed,
        shape,
        grid,
        extent,
        t_final,
        outputs,
        solver,
        nu,
        dt,
        probe,
    };

    let run = run_preservation_experiment(&cfg)?;
    let mut csv = Vec::new();
    run.trace.write_csv(&mut csv)?;
    match &a.out {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            std::fs::write(dir.join("trace.csv"), &csv)?;
            write_json(dir, "trace.json", &run.trace)?;
            run.initial.save(dir, "h_initial", "h", model.name(), None)?;
            run.final_height.save(dir, "h_final", "h", model.name(), None)?;
        }
        None => std::io::stdout().lock().write_all(&csv)?,
    }
    let t = &run.trace;
    eprintln!(
        "el-preserve: T = {:.4e} (T_max {:.4e}), max EL {:.3e}, max Delta {:.3e}, max R {:.3e}",
        t.t_final,
        t.t_max,
        t.max_el(),
        t.max_delta(),
        t.max_r()
    );
    if let Some(d) = t.solver_difference {
        eprintln!("el-preserve: max |h_char - h_viscous| = {d:.3e}");
    }
    Ok(())
}

fn cmd_accept(a: AcceptArgs) -> Outcome {
    if let Some(ids) = &a.only {
        if let Some(bad) = ids.iter().find(|&&id| !(1..=9).contains(&id)) {
            return Err(UsageError::new("only", format!("no criterion {bad}")).into());
        }
    }
    let results = run_suite(a.only.as_deref());
    for r in &results {
        println!("{}", r.line());
    }
    let failed: Vec<u8> = results.iter().filter(|r| !r.passed).map(|r| r.id).collect();
    println!("acceptance: {} passed, {} failed", results.len() - failed.len(), failed.len());
    if let Some(dir) = &a.out {
        write_json(dir, "acceptance.json", &results)?;
    }
    if failed.is_empty() {
        Ok(())
    } else {
        let diag = json!({ "status": "error", "experiment": "accept", "kind": "AcceptanceFailure", "failed": failed });
        eprintln!("{}", serde_json::to_string_pretty(&diag).expect("diagnostic serializes"));
        Err(Failure::Reported)
    }
}

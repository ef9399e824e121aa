//! `nclt`: batch front end for the nclt-core library.

use clap::{Parser, Subcommand, ValueEnum};
use nclt_core::capacity::{
    disk_cover, hcap_exact, hcap_mc, lln_bounds_check, transfinite_diameter, HullSpec, McParams, SampledHull,
};
use nclt_core::convolutions::{convolve, ConvKind};
use nclt_core::hemigroups::{ch_measure, ch_transform_eval, CHHandle, GeneratingFamily};
use nclt_core::loewner::{chain_analysis, DrivingSpec, LoewnerChain};
use nclt_core::measures::Measure;
use nclt_core::poly::Poly;
use nclt_core::transforms::{
    cauchy_eval, pick_eval, stieltjes_invert_with, voiculescu_eval, PickFunction, PickKind, StieltjesOptions,
    StolzCone,
};
use nclt_core::{Error, C64};
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

#[derive(Parser)]
#[command(name = "nclt", version, about = "Convolutions, hemigroups, Loewner chains and capacities")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, ValueEnum)]
enum KindArg {
    Classical,
    Free,
    Boolean,
    Monotone,
}

impl From<KindArg> for ConvKind {
    fn from(k: KindArg) -> Self {
        match k {
            KindArg::Classical => ConvKind::Classical,
            KindArg::Free => ConvKind::Free,
            KindArg::Boolean => ConvKind::Boolean,
            KindArg::Monotone => ConvKind::Monotone,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TransformKind {
    /// G(z)
    Cauchy,
    /// F(z) = 1/G(z)
    Reciprocal,
    /// z - F(z)
    Energy,
    /// F^{-1}(z) - z
    Voiculescu,
}

#[derive(Clone, Copy, ValueEnum)]
enum LoewnerAction {
    Flow,
    Analyze,
    Residual,
    Extend,
}

#[derive(Clone, Copy, ValueEnum)]
enum CapacityAction {
    Exact,
    Mc,
    Tfd,
    Lln,
}

#[derive(Subcommand)]
enum Cmd {
    /// Convolution of two probability measures.
    Convolve {
        #[arg(long)]
        kind: KindArg,
        a: PathBuf,
        b: PathBuf,
        #[arg(long, default_value_t = 2048)]
        n_grid: usize,
    },
    /// Transform values of a measure at points `re,im`.
    Transform {
        #[arg(long)]
        kind: TransformKind,
        measure: PathBuf,
        #[arg(long = "z", required = true, allow_hyphen_values = true)]
        z: Vec<String>,
    },
    /// Measure (or transform values) of a hemigroup at (s, t).
    Hemigroup {
        #[arg(long)]
        kind: KindArg,
        #[arg(long)]
        family: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        s: f64,
        #[arg(long)]
        t: f64,
        /// `lo,hi`
        #[arg(long, allow_hyphen_values = true)]
        window: Option<String>,
        #[arg(long, default_value_t = 2048)]
        n_grid: usize,
        /// Evaluate F (or the characteristic function at real `re,0`) instead of the measure.
        #[arg(long = "z", allow_hyphen_values = true)]
        z: Vec<String>,
    },
    /// Reverse Loewner flow and derived quantities for a driving spec.
    Loewner {
        action: LoewnerAction,
        spec: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        s: f64,
        #[arg(long)]
        t: f64,
        #[arg(long = "z", allow_hyphen_values = true)]
        z: Vec<String>,
        #[arg(long, allow_hyphen_values = true)]
        window: Option<String>,
        #[arg(long, default_value_t = 2048)]
        n_grid: usize,
        /// With `flow` and one point: print the solution path as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Capacity functionals.
    Capacity {
        action: CapacityAction,
        #[arg(long)]
        hull: Option<PathBuf>,
        #[arg(long)]
        points: Option<PathBuf>,
        #[arg(long, default_value_t = 30)]
        n: usize,
        #[arg(long, default_value_t = 1e-3)]
        step: f64,
        #[arg(long, default_value_t = 200_000)]
        n_walks: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        strip_height: Option<f64>,
        #[arg(long, default_value_t = 0.005)]
        raster_dx: f64,
        #[arg(long)]
        hcap: Option<f64>,
        /// Write the disk-cover raster as PGM.
        #[arg(long)]
        pgm: Option<PathBuf>,
        /// With `tfd`: print the (n, d_n) table as CSV.
        #[arg(long)]
        csv: bool,
    },
    /// Measure from a Cauchy transform given as a measure or a rational function.
    Invert {
        #[arg(long)]
        g: PathBuf,
        #[arg(long, allow_hyphen_values = true)]
        window: String,
        #[arg(long, default_value_t = 2048)]
        n_grid: usize,
    },
}

/// Failure of a command: input problems exit with 2, numerical ones with 3.
enum Fail {
    Usage(String),
    Lib(Error),
}

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail::Lib(e)
    }
}

type Out = Result<Output, Fail>;

enum Output {
    Json(Value),
    Text(String),
}

fn usage(msg: impl Into<String>) -> Fail {
    Fail::Usage(msg.into())
}

fn read_json<T: DeserializeOwned>(p: &Path) -> Result<T, Fail> {
    let s = std::fs::read_to_string(p).map_err(|e| usage(format!("{}: {e}", p.display())))?;
    serde_json::from_str(&s).map_err(|e| usage(format!("{}: {e}", p.display())))
}

fn parse_pair(s: &str) -> Result<(f64, f64), Fail> {
    let (a, b) = s.split_once(',').ok_or_else(|| usage(format!("expected `a,b`, got `{s}`")))?;
    let a: f64 = a.trim().parse().map_err(|_| usage(format!("bad number `{a}`")))?;
    let b: f64 = b.trim().parse().map_err(|_| usage(format!("bad number `{b}`")))?;
    Ok((a, b))
}

fn parse_points(zs: &[String]) -> Result<Vec<C64>, Fail> {
    zs.iter().map(|s| parse_pair(s).map(|(a, b)| C64::new(a, b))).collect()
}

fn parse_window(w: &Option<String>) -> Result<Option<(f64, f64)>, Fail> {
    w.as_deref().map(parse_pair).transpose()
}

fn c(z: C64) -> Value {
    json!([z.re, z.im])
}

fn measure_json(m: &Measure) -> Value {
    let mut v = serde_json::to_value(m).expect("measure serializes");
    if let Value::Object(o) = &mut v {
        o.insert("mass".into(), json!(m.mass()));
        o.insert("mean".into(), json!(m.mean()));
        o.insert("variance".into(), json!(m.variance()));
    }
    v
}

fn read_measure(p: &Path) -> Result<Measure, Fail> {
    let m: Measure = read_json(p)?;
    m.validate()?;
    Ok(m)
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case")]
enum HullDesc {
    HalfDisk { radius: f64 },
    VerticalSlit { foot: f64, length: f64 },
    /// Hull mapped out by the reciprocal Cauchy transform of a measure.
    MappedByMeasure { measure: Measure },
    Sampled { points: Vec<[f64; 2]>, spacing: f64 },
}

fn read_hull(p: &Option<PathBuf>) -> Result<HullSpec, Fail> {
    let p = p.as_ref().ok_or_else(|| usage("--hull is required"))?;
    Ok(match read_json::<HullDesc>(p)? {
        HullDesc::HalfDisk { radius } => HullSpec::HalfDisk { radius },
        HullDesc::VerticalSlit { foot, length } => HullSpec::VerticalSlit { foot, length },
        HullDesc::MappedByMeasure { measure } => {
            measure.validate()?;
            HullSpec::MappedBy(PickFunction::from_measure(measure))
        }
        HullDesc::Sampled { points, spacing } => HullSpec::Sampled(SampledHull {
            points: points.iter().map(|p| C64::new(p[0], p[1])).collect(),
            spacing,
            inside: None,
        }),
    })
}

#[derive(Deserialize)]
#[serde(rename_all = "snake_case")]
struct GSpec {
    measure: Option<Measure>,
    rational: Option<RationalSpec>,
}

#[derive(Deserialize)]
struct RationalSpec {
    num: Vec<f64>,
    den: Vec<f64>,
}

fn run(cmd: Cmd) -> Out {
    match cmd {
        Cmd::Convolve { kind, a, b, n_grid } => {
            let (a, b) = (read_measure(&a)?, read_measure(&b)?);
            let m = convolve(kind.into(), &a, &b, &StieltjesOptions::with_grid(n_grid))?;
            Ok(Output::Json(json!({ "kind": ConvKind::from(kind).name(), "measure": measure_json(&m) })))
        }
        Cmd::Transform { kind, measure, z } => {
            let m = read_measure(&measure)?;
            let zs = parse_points(&z)?;
            let f = PickFunction::from_measure(m.clone());
            let cone = StolzCone::auto(m.variance());
            let mut values = Vec::with_capacity(zs.len());
            for z in zs {
                let v = match kind {
                    TransformKind::Cauchy => cauchy_eval(&m, z)?,
                    TransformKind::Reciprocal => pick_eval(&f, PickKind::FOf, z)?,
                    TransformKind::Energy => z - pick_eval(&f, PickKind::FOf, z)?,
                    TransformKind::Voiculescu => voiculescu_eval(&m, z, &cone)?,
                };
                values.push(json!({ "z": c(z), "value": c(v) }));
            }
            let name = match kind {
                TransformKind::Cauchy => "cauchy",
                TransformKind::Reciprocal => "reciprocal",
                TransformKind::Energy => "energy",
                TransformKind::Voiculescu => "voiculescu",
            };
            Ok(Output::Json(json!({ "kind": name, "measure": m, "values": values })))
        }
        Cmd::Hemigroup { kind, family, s, t, window, n_grid, z } => {
            let fam: GeneratingFamily = read_json(&family)?;
            if !(0.0 <= s && s <= t) {
                return Err(usage(format!("need 0 <= s <= t, got s = {s}, t = {t}")));
            }
            let h = CHHandle::new(fam, kind.into())?;
            let kind_name = ConvKind::from(kind).name();
            if !z.is_empty() {
                let mut values = Vec::new();
                for z in parse_points(&z)? {
                    values.push(json!({ "arg": c(z), "value": c(ch_transform_eval(&h, s, t, z)?) }));
                }
                return Ok(Output::Json(json!({ "kind": kind_name, "s": s, "t": t, "values": values })));
            }
            let m = ch_measure(&h, s, t, parse_window(&window)?, n_grid)?;
            Ok(Output::Json(json!({ "kind": kind_name, "s": s, "t": t, "measure": measure_json(&m) })))
        }
        Cmd::Loewner { action, spec, s, t, z, window, n_grid, csv } => {
            let spec: DrivingSpec = read_json(&spec)?;
            let chain = Arc::new(LoewnerChain::new(spec)?);
            let zs = parse_points(&z)?;
            let needs_z = !matches!(action, LoewnerAction::Analyze);
            if needs_z && zs.is_empty() {
                return Err(usage("this action needs at least one --z"));
            }
            match action {
                LoewnerAction::Flow if csv => {
                    if zs.len() != 1 {
                        return Err(usage("--csv takes exactly one --z"));
                    }
                    Ok(Output::Text(chain.trace_csv(s, t, zs[0])?))
                }
                LoewnerAction::Flow | LoewnerAction::Extend => {
                    let mut values = Vec::new();
                    for z in zs {
                        let v = match action {
                            LoewnerAction::Flow => chain.reverse_flow(s, t, z)?,
                            _ => chain.picard_extend(s, t, z)?,
                        };
                        values.push(json!({ "z": c(z), "value": c(v) }));
                    }
                    Ok(Output::Json(json!({ "s": s, "t": t, "values": values })))
                }
                LoewnerAction::Residual => {
                    let mut values = Vec::new();
                    for z in zs {
                        values.push(json!({ "z": c(z), "residual": chain.lie_residual(s, t, z)? }));
                    }
                    Ok(Output::Json(json!({ "s": s, "t": t, "values": values })))
                }
                LoewnerAction::Analyze => {
                    let (m, r, mu) = chain_analysis(&chain, t, parse_window(&window)?, n_grid)?;
                    Ok(Output::Json(json!({ "t": t, "m": m, "r": r, "measure": measure_json(&mu) })))
                }
            }
        }
        Cmd::Capacity { action, hull, points, n, step, n_walks, seed, strip_height, raster_dx, hcap, pgm, csv } => {
            match action {
                CapacityAction::Exact => Ok(Output::Json(json!({ "hcap": hcap_exact(&read_hull(&hull)?)? }))),
                CapacityAction::Mc => {
                    let seed = seed.ok_or_else(|| usage("--seed is required for Monte Carlo"))?;
                    let h = read_hull(&hull)?;
                    let p = McParams { strip_height, ..McParams::new(step, n_walks, seed) };
                    let e = hcap_mc(&h, &p)?;
                    Ok(Output::Json(json!({
                        "estimate": e.estimate, "stderr": e.stderr, "n_walks": n_walks, "step": step, "seed": seed
                    })))
                }
                CapacityAction::Tfd => {
                    let p = points.ok_or_else(|| usage("--points is required"))?;
                    let pts: Vec<[f64; 2]> = read_json(&p)?;
                    let pts: Vec<C64> = pts.iter().map(|p| C64::new(p[0], p[1])).collect();
                    let r = transfinite_diameter(&pts, n)?;
                    if csv {
                        return Ok(Output::Text(r.csv()));
                    }
                    let seq: Vec<Value> = r.sequence.iter().map(|(k, d)| json!([k, d])).collect();
                    Ok(Output::Json(json!({ "n": n, "d_n": r.d_n, "d_inf": r.d_inf, "sequence": seq })))
                }
                CapacityAction::Lln => {
                    let h = read_hull(&hull)?;
                    let (area, lower_ok, upper_ok) = lln_bounds_check(&h, raster_dx, hcap)?;
                    if let Some(path) = pgm {
                        let img = disk_cover(&h, raster_dx)?.to_pgm();
                        std::fs::write(&path, img).map_err(|e| usage(format!("{}: {e}", path.display())))?;
                    }
                    Ok(Output::Json(json!({ "area": area, "lower_ok": lower_ok, "upper_ok": upper_ok })))
                }
            }
        }
        Cmd::Invert { g, window, n_grid } => {
            let spec: GSpec = read_json(&g)?;
            let window = parse_pair(&window)?;
            let opts = StieltjesOptions::with_grid(n_grid);
            let m = match (spec.measure, spec.rational) {
                (Some(m), None) => {
                    m.validate()?;
                    let g = move |z: C64| cauchy_eval(&m, z);
                    stieltjes_invert_with(&g, window, &opts)?
                }
                (None, Some(r)) => {
                    let (num, den) = (Poly::new(r.num), Poly::new(r.den));
                    let g = move |z: C64| Ok(num.eval_c(z) / den.eval_c(z));
                    stieltjes_invert_with(&g, window, &opts)?
                }
                _ => return Err(usage("g spec needs exactly one of `measure` or `rational`")),
            };
            Ok(Output::Json(json!({ "measure": measure_json(&m) })))
        }
    }
}

/// JSON with every float printed to 17 significant digits and non-finite values as null.
fn render(v: &Value, out: &mut String) {
    match v {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => {
            if n.is_f64() {
                let x = n.as_f64().unwrap();
                if x.is_finite() {
                    out.push_str(&format!("{x:.16e}"));
                } else {
                    out.push_str("null");
                }
            } else {
                out.push_str(&n.to_string());
            }
        }
        Value::String(s) => out.push_str(&serde_json::to_string(s).unwrap()),
        Value::Array(a) => {
            out.push('[');
            for (i, x) in a.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                render(x, out);
            }
            out.push(']');
        }
        Value::Object(o) => {
            out.push('{');
            for (i, (k, x)) in o.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                out.push_str(&serde_json::to_string(k).unwrap());
                out.push(':');
                render(x, out);
            }
            out.push('}');
        }
    }
}

fn error_line(code: &str, msg: &str) -> String {
    let mut s = String::new();
    render(&json!({ "error": code, "message": msg.lines().next().unwrap_or("") }), &mut s);
    s
}

fn is_usage(e: &Error) -> bool {
    matches!(
        e,
        Error::InvalidArgument(_)
            | Error::InvalidSpec(_)
            | Error::InvalidFamily(_)
            | Error::InvalidMeasure(_)
            | Error::NotProbability(_)
            | Error::TooFewPoints { .. }
            | Error::OutOfHalfPlane(_)
    )
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) {
                print!("{e}");
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().find(|l| !l.trim().is_empty()).unwrap_or("usage error");
            eprintln!("{}", error_line("Usage", first.trim_start_matches("error: ")));
            return ExitCode::from(2);
        }
    };
    if let Some(n) = std::env::var("NCLT_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        if n > 0 {
            let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
        }
    }
    match run(cli.cmd) {
        Ok(Output::Json(v)) => {
            let mut s = String::new();
            render(&v, &mut s);
            println!("{s}");
            ExitCode::SUCCESS
        }
        Ok(Output::Text(t)) => {
            print!("{t}");
            ExitCode::SUCCESS
        }
        Err(Fail::Usage(m)) => {
            eprintln!("{}", error_line("Usage", &m));
            ExitCode::from(2)
        }
        Err(Fail::Lib(e)) => {
            eprintln!("{}", error_line(e.code(), &e.to_string()));
            ExitCode::from(if is_usage(&e) { 2 } else { 3 })
        }
    }
}

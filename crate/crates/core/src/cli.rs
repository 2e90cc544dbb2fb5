//! Subcommand implementations behind the `jumphjb` binary, plus the run
//! configuration and model file formats.
//!
//! Exit codes: 0 ok, 2 validation, 3 classification, 4 depth, 5 residual,
//! 6 fit failure.

use std::fmt::Write as _;
use std::io::Write;
use std::path::Path;

use crate::charpoly::{derive_coeffs, q_roots, CharPoly, ModelParams, OdeCoeffs};
use crate::error::{Error, Result};
use crate::kv::{self, Section, Writer};
use crate::logpower::{LogPowerSum, LogPowerTerm};
use crate::particular::log_spaced;
use crate::simulate::{convergence_sweep, sweep_csv, SimConfig};
use crate::valuefn::{
    build_backward, build_knot_matched, fit_boundary, segment_index, BoundaryFit, Convention,
    FitOptions, Payoff, PiecewiseValue, Segment, DEFAULT_DEPTH, MAX_REPORTED_KNOTS,
};

pub const EXIT_DEPTH: i32 = 4;
pub const EXIT_RESIDUAL: i32 = 5;

/// Residual threshold used by `check`.
pub const CHECK_TOL: f64 = 1e-9;
/// Sample points per segment used by `check`.
pub const CHECK_POINTS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct SolveSettings {
    pub depth: usize,
    pub x_star: Option<f64>,
    /// Both constants given together with `x_star` skip the fit.
    pub delta1: Option<f64>,
    pub delta2: Option<f64>,
    pub fit: FitOptions,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSettings {
    pub x0: f64,
    pub n_paths: usize,
    pub dt: Option<f64>,
    pub dts: Vec<f64>,
    pub t_max: Option<f64>,
    pub seed: u64,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub params: ModelParams,
    pub payoff: LogPowerSum,
    pub solve: SolveSettings,
    pub simulate: Option<SimulateSettings>,
    pub output: Option<String>,
}

fn single<'a>(sections: &'a [Section], name: &str) -> Result<Option<&'a Section>> {
    let mut it = sections.iter().filter(|s| s.name == name);
    let first = it.next();
    if let Some(dup) = it.next() {
        return Err(Error::Parse {
            line: dup.line,
            msg: format!("section [{name}] given more than once"),
        });
    }
    Ok(first)
}

fn required<'a>(sections: &'a [Section], name: &str) -> Result<&'a Section> {
    single(sections, name)?.ok_or_else(|| Error::Config(format!("missing section [{name}]")))
}

fn parse_params(s: &Section) -> Result<ModelParams> {
    s.only(&["mu", "sigma", "lambda", "kappa", "r"])?;
    ModelParams::new(
        s.parse_req("mu")?,
        s.parse_req("sigma")?,
        s.parse_req("lambda")?,
        s.parse_req("kappa")?,
        s.parse_req("r")?,
    )
}

fn parse_terms<'a>(entries: impl Iterator<Item = &'a kv::Entry>) -> Result<LogPowerSum> {
    let mut terms = Vec::new();
    for e in entries {
        let parts: Vec<&str> = e.value.split(',').map(str::trim).collect();
        let bad = || Error::Parse {
            line: e.line,
            msg: format!("expected `coeff, exponent, log_power`, got `{}`", e.value),
        };
        let [c, x, n] = parts.as_slice() else {
            return Err(bad());
        };
        terms.push(LogPowerTerm::new(
            c.parse().map_err(|_| bad())?,
            x.parse().map_err(|_| bad())?,
            n.parse().map_err(|_| bad())?,
        ));
    }
    Ok(LogPowerSum::canonicalize(terms))
}

fn parse_payoff(s: &Section) -> Result<LogPowerSum> {
    s.only(&["term", "rho", "theta", "investment"])?;
    let has_terms = s.all("term").next().is_some();
    let rho: Option<f64> = s.parse_opt("rho")?;
    match (has_terms, rho) {
        (true, None) if s.get("theta")?.is_none() && s.get("investment")?.is_none() => {
            parse_terms(s.all("term"))
        }
        (false, Some(rho)) => Ok(LogPowerSum::iso_elastic(
            rho,
            s.parse_req("theta")?,
            s.parse_req("investment")?,
        )),
        _ => Err(Error::Config(
            "[payoff] needs either `term` lines or rho/theta/investment, not both".into(),
        )),
    }
}

fn parse_solve(s: Option<&Section>) -> Result<SolveSettings> {
    let mut out = SolveSettings {
        depth: DEFAULT_DEPTH,
        x_star: None,
        delta1: None,
        delta2: None,
        fit: FitOptions::default(),
    };
    let Some(s) = s else { return Ok(out) };
    s.only(&[
        "depth",
        "x_star",
        "delta1",
        "delta2",
        "convention",
        "delta2_zero",
        "smooth_pasting",
    ])?;
    if let Some(d) = s.parse_opt("depth")? {
        out.depth = d;
    }
    out.x_star = s.parse_opt("x_star")?;
    out.delta1 = s.parse_opt("delta1")?;
    out.delta2 = s.parse_opt("delta2")?;
    if let Some(c) = s.get("convention")? {
        out.fit.convention = c.value.parse()?;
    }
    if let Some(v) = s.parse_opt("delta2_zero")? {
        out.fit.delta2_zero = v;
    }
    if let Some(v) = s.parse_opt("smooth_pasting")? {
        out.fit.smooth_pasting = v;
    }
    out.fit.x_star = out.x_star;
    Ok(out)
}

fn parse_simulate(s: &Section) -> Result<SimulateSettings> {
    s.only(&["x0", "n_paths", "dt", "dts", "t_max", "seed", "threads"])?;
    Ok(SimulateSettings {
        x0: s.parse_req("x0")?,
        n_paths: s.parse_req("n_paths")?,
        dt: s.parse_opt("dt")?,
        dts: match s.get("dts")? {
            Some(e) => e.parse_list()?,
            None => Vec::new(),
        },
        t_max: s.parse_opt("t_max")?,
        seed: s.parse_opt("seed")?.unwrap_or(0),
        threads: s.parse_opt("threads")?,
    })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let sections = kv::parse(text)?;
        if let Some(s) = sections.iter().find(|s| {
            !["model", "payoff", "solve", "simulate", "output"].contains(&s.name.as_str())
        }) {
            return Err(Error::Parse {
                line: s.line,
                msg: format!("unknown section [{}]", s.name),
            });
        }
        let output = match single(&sections, "output")? {
            Some(s) => {
                s.only(&["path"])?;
                s.parse_opt("path")?
            }
            None => None,
        };
        Ok(RunConfig {
            params: parse_params(required(&sections, "model")?)?,
            payoff: parse_payoff(required(&sections, "payoff")?)?,
            solve: parse_solve(single(&sections, "solve")?)?,
            simulate: single(&sections, "simulate")?
                .map(parse_simulate)
                .transpose()?,
            output,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read(path)?)
    }
}

/// A solved value function together with the model it belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub params: ModelParams,
    pub value: PiecewiseValue,
}

impl Model {
    pub fn to_text(&self) -> String {
        let (p, v) = (&self.params, &self.value);
        let mut w = Writer::default();
        w.comment("jumphjb model: V = g on [x_star, inf), segment i below knot i-1");
        w.section("model")
            .float("mu", p.mu)
            .float("sigma", p.sigma)
            .float("lambda", p.lambda)
            .float("kappa", p.kappa)
            .float("r", p.r);
        w.section("value")
            .float("x_star", v.x_star)
            .float("kappa", p.kappa)
            .float("beta1", v.beta1)
            .float("beta2", v.beta2)
            .float("delta1", v.delta1())
            .float("delta2", v.delta2())
            .raw("depth", v.depth())
            .raw("convention", v.convention);
        w.section("payoff");
        for t in v.payoff.terms() {
            w.raw("term", t);
        }
        for (i, seg) in v.segments.iter().enumerate() {
            w.section("segment")
                .raw("index", i + 1)
                .float("delta1", seg.delta1)
                .float("delta2", seg.delta2);
            for t in seg.sum.terms() {
                w.raw("term", t);
            }
        }
        w.finish()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let sections = kv::parse(text)?;
        let params = parse_params(required(&sections, "model")?)?;
        let head = required(&sections, "value")?;
        head.only(&[
            "x_star",
            "kappa",
            "beta1",
            "beta2",
            "delta1",
            "delta2",
            "depth",
            "convention",
        ])?;
        let payoff_section = required(&sections, "payoff")?;
        payoff_section.only(&["term"])?;
        let payoff = parse_terms(payoff_section.all("term"))?;

        let mut segments = Vec::new();
        for s in sections.iter().filter(|s| s.name == "segment") {
            s.only(&["index", "delta1", "delta2", "term"])?;
            let index: usize = s.parse_req("index")?;
            if index != segments.len() + 1 {
                return Err(Error::Parse {
                    line: s.line,
                    msg: format!("segment index {index}, expected {}", segments.len() + 1),
                });
            }
            segments.push(Segment {
                delta1: s.parse_req("delta1")?,
                delta2: s.parse_req("delta2")?,
                sum: parse_terms(s.all("term"))?,
            });
        }
        if segments.is_empty() {
            return Err(Error::EmptyModel);
        }
        let depth: usize = head.parse_req("depth")?;
        if depth != segments.len() {
            return Err(Error::Parse {
                line: head.line,
                msg: format!("depth {depth} but {} segments", segments.len()),
            });
        }
        let kappa: f64 = head.parse_req("kappa")?;
        if kappa != params.kappa {
            return Err(Error::Parse {
                line: head.line,
                msg: format!(
                    "[value] kappa {kappa:?} differs from [model] kappa {:?}",
                    params.kappa
                ),
            });
        }
        let x_star: f64 = head.parse_req("x_star")?;
        if !(x_star > 0.0 && x_star.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "x_star",
                value: x_star,
                reason: "must be finite and > 0",
            });
        }
        let value = PiecewiseValue {
            x_star,
            jump_factor: 1.0 + kappa,
            beta1: head.parse_req("beta1")?,
            beta2: head.parse_req("beta2")?,
            convention: head.parse_req::<String>("convention")?.parse()?,
            payoff,
            segments,
        };
        for (key, want) in [("delta1", value.delta1()), ("delta2", value.delta2())] {
            let got: f64 = head.parse_req(key)?;
            if got.to_bits() != want.to_bits() {
                return Err(Error::Parse {
                    line: head.line,
                    msg: format!("[value] {key} {got:?} differs from segment 1's {want:?}"),
                });
            }
        }
        Ok(Model { params, value })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&read(path)?)
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

fn io(e: std::io::Error) -> Error {
    Error::Io(e.to_string())
}

struct Problem {
    poly: CharPoly,
    coeffs: OdeCoeffs,
    payoff: Payoff,
}

fn problem(params: &ModelParams, payoff: &LogPowerSum) -> Result<Problem> {
    let coeffs = derive_coeffs(params)?;
    let poly = q_roots(&coeffs)?;
    let payoff = Payoff::new(payoff.clone(), &poly)?;
    Ok(Problem {
        poly,
        coeffs,
        payoff,
    })
}

/// Builds the value function a configuration describes, fitting the boundary
/// unless both the threshold and the constants are given.
pub fn solve(cfg: &RunConfig) -> Result<(Model, Option<BoundaryFit>)> {
    let p = problem(&cfg.params, &cfg.payoff)?;
    let s = &cfg.solve;
    let kappa = cfg.params.kappa;
    let (value, fit) = match (s.x_star, s.delta1, s.delta2) {
        (Some(x_star), Some(d1), d2) => {
            let d2 = d2.unwrap_or(0.0);
            let v = match s.fit.convention {
                Convention::Shared => build_backward(
                    &p.poly, &p.coeffs, &p.payoff, kappa, s.depth, d1, d2, x_star,
                )?,
                Convention::KnotMatched => build_knot_matched(
                    &p.poly, &p.coeffs, &p.payoff, kappa, s.depth, x_star, d1, d2,
                )?,
            };
            (v, None)
        }
        (_, None, Some(_)) => {
            return Err(Error::Config("delta2 given without delta1".into()));
        }
        (None, Some(_), _) => {
            return Err(Error::Config("delta1 given without x_star".into()));
        }
        _ => {
            let fit = fit_boundary(&p.poly, &p.coeffs, &p.payoff, kappa, s.depth, &s.fit)?;
            (fit.value.clone(), Some(fit))
        }
    };
    Ok((
        Model {
            params: cfg.params,
            value,
        },
        fit,
    ))
}

fn fit_report(fit: &BoundaryFit, opts: &FitOptions) -> String {
    let mut r = String::new();
    let _ = writeln!(
        r,
        "convention = {}  delta2_zero = {}  smooth_pasting = {}",
        opts.convention, opts.delta2_zero, opts.smooth_pasting
    );
    let _ = writeln!(r, "x_star = {:?}", fit.x_star);
    let _ = writeln!(r, "delta1 = {:?}", fit.delta1);
    let _ = writeln!(r, "delta2 = {:?}", fit.delta2);
    let _ = writeln!(r, "value_matching_residual = {:e}", fit.value_matching);
    let _ = writeln!(r, "smooth_pasting_residual = {:e}", fit.smooth_pasting);
    if let (Some(res), Some(gamma)) = (fit.far_field, fit.far_field_exponent) {
        let _ = writeln!(r, "far_field_exponent = {gamma:?}");
        let _ = writeln!(r, "far_field_residual = {res:e}");
    }
    r.push_str(&knot_gap_table(&fit.knot_gaps));
    r
}

fn knot_gap_table(gaps: &[crate::valuefn::KnotGap]) -> String {
    let mut r = String::from("knot,x,value,value_gap,slope_gap\n");
    for g in gaps {
        let _ = writeln!(
            r,
            "{},{:?},{:?},{:e},{:e}",
            g.index, g.x, g.value, g.value_gap, g.slope_gap
        );
    }
    r
}

fn output_path<'a>(flag: Option<&'a Path>, cfg: &'a RunConfig) -> Option<&'a Path> {
    flag.or(cfg.output.as_deref().map(Path::new))
}

/// `solve`: writes the model file (to `out`, the configured path, or stdout).
pub fn cmd_solve(cfg: &RunConfig, out: Option<&Path>, stdout: &mut dyn Write) -> Result<i32> {
    let (model, fit) = solve(cfg)?;
    let text = model.to_text();
    match output_path(out, cfg) {
        Some(path) => {
            write_file(path, &text)?;
            if let Some(fit) = fit {
                stdout
                    .write_all(fit_report(&fit, &cfg.solve.fit).as_bytes())
                    .map_err(io)?;
            }
            writeln!(
                stdout,
                "wrote {} segments to {}",
                model.value.depth(),
                path.display()
            )
            .map_err(io)?;
        }
        None => stdout.write_all(text.as_bytes()).map_err(io)?,
    }
    Ok(0)
}

/// `fit-boundary`: prints the fit report and writes the model file.
pub fn cmd_fit_boundary(
    cfg: &RunConfig,
    out: Option<&Path>,
    stdout: &mut dyn Write,
) -> Result<i32> {
    let p = problem(&cfg.params, &cfg.payoff)?;
    let s = &cfg.solve;
    let fit = fit_boundary(
        &p.poly,
        &p.coeffs,
        &p.payoff,
        cfg.params.kappa,
        s.depth,
        &s.fit,
    )?;
    stdout
        .write_all(fit_report(&fit, &s.fit).as_bytes())
        .map_err(io)?;
    if let Some(path) = output_path(out, cfg) {
        let model = Model {
            params: cfg.params,
            value: fit.value,
        };
        write_file(path, &model.to_text())?;
        writeln!(stdout, "wrote model to {}", path.display()).map_err(io)?;
    }
    Ok(0)
}

/// Points for `eval`: an explicit list or a log-spaced `lo:hi:n` grid.
pub fn parse_points(points: Option<&str>, grid: Option<&str>) -> Result<Vec<f64>> {
    match (points, grid) {
        (Some(p), None) => p
            .split(',')
            .map(|v| {
                v.trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("bad point `{}`", v.trim())))
            })
            .collect(),
        (None, Some(g)) => {
            let parts: Vec<&str> = g.split(':').collect();
            let bad = || Error::Config(format!("grid must be `lo:hi:n`, got `{g}`"));
            let [lo, hi, n] = parts.as_slice() else {
                return Err(bad());
            };
            let (lo, hi, n): (f64, f64, usize) = (
                lo.parse().map_err(|_| bad())?,
                hi.parse().map_err(|_| bad())?,
                n.parse().map_err(|_| bad())?,
            );
            if !(lo > 0.0 && hi >= lo && n >= 1) {
                return Err(bad());
            }
            Ok(log_spaced(lo, hi, n))
        }
        _ => Err(Error::Config(
            "give exactly one of --points and --grid".into(),
        )),
    }
}

/// `eval`: CSV `x,value,segment,region`. Points below the deepest segment
/// are listed with region `depth_exceeded` and an empty value; the exit code
/// is then 4.
pub fn cmd_eval(model: &Model, xs: &[f64], stdout: &mut dyn Write) -> Result<i32> {
    let v = &model.value;
    let mut out = String::from("x,value,segment,region\n");
    let mut exceeded = false;
    for &x in xs {
        if !(x > 0.0) {
            return Err(Error::Domain {
                what: "x",
                value: x,
            });
        }
        if x >= v.x_star {
            let _ = writeln!(out, "{x:?},{:?},0,stopping", v.payoff.evaluate(x)?);
            continue;
        }
        let i = segment_index(x, v.x_star, v.jump_factor)?;
        match v.evaluate(x) {
            Ok(val) => {
                let _ = writeln!(out, "{x:?},{val:?},{i},continuation");
            }
            Err(Error::DepthExceeded { .. }) => {
                exceeded = true;
                let _ = writeln!(out, "{x:?},,{i},depth_exceeded");
            }
            Err(e) => return Err(e),
        }
    }
    stdout.write_all(out.as_bytes()).map_err(io)?;
    Ok(if exceeded { EXIT_DEPTH } else { 0 })
}

/// Diagnostics of a model file.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckReport {
    /// `|Q(β)| / max(1, β², |aβ|, |b|)` for the stored roots.
    pub root_residuals: [f64; 2],
    pub segment_residuals: Vec<f64>,
    pub coefficient_residuals: Vec<f64>,
    pub knot_gaps: Vec<crate::valuefn::KnotGap>,
}

impl CheckReport {
    pub fn passed(&self) -> bool {
        self.root_residuals
            .iter()
            .chain(&self.segment_residuals)
            .chain(&self.coefficient_residuals)
            .all(|r| *r < CHECK_TOL)
    }
}

pub fn check(model: &Model) -> Result<CheckReport> {
    let coeffs = derive_coeffs(&model.params)?;
    let v = &model.value;
    let poly = CharPoly {
        a: coeffs.a,
        b: coeffs.b,
        beta1: v.beta1,
        beta2: v.beta2,
    };
    let root = |beta: f64| {
        let scale = 1f64
            .max(beta * beta)
            .max((coeffs.a * beta).abs())
            .max(coeffs.b.abs());
        poly.eval(beta).abs() / scale
    };
    Ok(CheckReport {
        root_residuals: [root(v.beta1), root(v.beta2)],
        segment_residuals: v.segment_residuals(&poly, &coeffs, CHECK_POINTS)?,
        coefficient_residuals: v.segment_coefficient_residuals(&poly, &coeffs)?,
        knot_gaps: v.knot_gaps(MAX_REPORTED_KNOTS)?,
    })
}

/// `check`: exit 0 iff every residual is below the tolerance; knot gaps are
/// informational.
pub fn cmd_check(model: &Model, stdout: &mut dyn Write) -> Result<i32> {
    let report = check(model)?;
    let mut r = String::new();
    let _ = writeln!(
        r,
        "root_residuals = {:e}, {:e}",
        report.root_residuals[0], report.root_residuals[1]
    );
    r.push_str("segment,max_residual,coefficient_residual\n");
    for (i, (res, coef)) in report
        .segment_residuals
        .iter()
        .zip(&report.coefficient_residuals)
        .enumerate()
    {
        let _ = writeln!(r, "{},{res:e},{coef:e}", i + 1);
    }
    r.push_str(&knot_gap_table(&report.knot_gaps));
    let passed = report.passed();
    let _ = writeln!(
        r,
        "{} (tolerance {CHECK_TOL:e})",
        if passed { "ok" } else { "FAILED" }
    );
    stdout.write_all(r.as_bytes()).map_err(io)?;
    Ok(if passed { 0 } else { EXIT_RESIDUAL })
}

/// Simulation settings with command-line overrides applied.
pub fn sim_config(model: &Model, s: &SimulateSettings) -> Result<(SimConfig, Vec<f64>)> {
    let v = &model.value;
    let coeffs = derive_coeffs(&model.params)?;
    let poly = q_roots(&coeffs)?;
    let mut cfg = SimConfig {
        params: model.params,
        payoff: Payoff::new(v.payoff.clone(), &poly)?,
        x_star: v.x_star,
        x0: s.x0,
        n_paths: s.n_paths,
        dt: 0.0,
        t_max: s.t_max.unwrap_or(10.0 / model.params.r),
        seed: s.seed,
    };
    let dts = match (s.dt, s.dts.is_empty()) {
        (Some(dt), true) => vec![dt],
        (None, false) => s.dts.clone(),
        (None, true) => vec![cfg.max_dt()],
        (Some(_), false) => {
            return Err(Error::Config(
                "give either `dt` or `dts` in [simulate], not both".into(),
            ))
        }
    };
    cfg.dt = *dts.last().unwrap_or(&cfg.max_dt());
    Ok((cfg, dts))
}

/// z-score of an estimate against the analytic value; 0 when they agree
/// exactly.
pub fn z_score(estimate: f64, std_error: f64, analytic: f64) -> f64 {
    let diff = estimate - analytic;
    if diff == 0.0 {
        0.0
    } else {
        diff / std_error
    }
}

/// `simulate`: CSV of Monte Carlo estimates (one row per dt) to `out` or
/// stdout, and a summary line comparing the finest row with `V(x0)`.
pub fn cmd_simulate(
    cfg: &RunConfig,
    model: &Model,
    out: Option<&Path>,
    threads: Option<usize>,
    stdout: &mut dyn Write,
) -> Result<i32> {
    if cfg.params != model.params || cfg.payoff != model.value.payoff {
        return Err(Error::Config(
            "[model] or [payoff] in the configuration differs from the model file".into(),
        ));
    }
    let settings = cfg
        .simulate
        .as_ref()
        .ok_or_else(|| Error::Config("missing section [simulate]".into()))?;
    let analytic = model.value.evaluate(settings.x0)?;
    let (sim, dts) = sim_config(model, settings)?;
    let rows = convergence_sweep(&sim, &dts, threads.or(settings.threads))?;
    let csv = sweep_csv(&rows);
    match output_path(out, cfg) {
        Some(path) => write_file(path, &csv)?,
        None => stdout.write_all(csv.as_bytes()).map_err(io)?,
    }
    let last = &rows[rows.len() - 1].result;
    let z = z_score(last.estimate, last.std_error, analytic);
    writeln!(
        stdout,
        "x0 = {:?}  estimate = {:?}  std_error = {:?}  analytic = {:?}  z = {:.3}",
        settings.x0, last.estimate, last.std_error, analytic, z
    )
    .map_err(io)?;
    Ok(0)
}

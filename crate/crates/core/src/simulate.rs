//! Monte Carlo estimate of `E[e^{−rτ} g(X_τ) 1{τ<∞}]` under the threshold
//! policy `τ = inf{t : X(t) ≥ x*}`.
//!
//! `ln X` is a Brownian motion with drift `μ − σ²/2 − λκ`, plus `ln(1+κ)` at
//! each Poisson jump. Jump times are exact. Between grid points the
//! continuous part is a Brownian bridge, so a hit between grid points is
//! detected with the exact bridge crossing probability rather than missed.
//! Paths still running at the horizon contribute zero.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, StandardNormal};
use rayon::prelude::*;

use crate::charpoly::ModelParams;
use crate::error::{Error, Result};
use crate::valuefn::Payoff;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub params: ModelParams,
    pub payoff: Payoff,
    pub x_star: f64,
    pub x0: f64,
    pub n_paths: usize,
    pub dt: f64,
    pub t_max: f64,
    pub seed: u64,
}

impl SimConfig {
    /// Longest admissible step, `min(0.01/λ, 0.01/σ²)`.
    pub fn max_dt(&self) -> f64 {
        (0.01 / self.params.lambda).min(0.01 / (self.params.sigma * self.params.sigma))
    }

    /// Shortest admissible horizon, `10/r`.
    pub fn min_t_max(&self) -> f64 {
        10.0 / self.params.r
    }

    pub fn validate(&self) -> Result<()> {
        self.params.validate()?;
        let positive = |name, value: f64| {
            if value > 0.0 && value.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidParameter {
                    name,
                    value,
                    reason: "must be finite and > 0",
                })
            }
        };
        positive("x_star", self.x_star)?;
        positive("x0", self.x0)?;
        positive("t_max", self.t_max)?;
        self.check_dt(self.dt)?;
        if self.n_paths == 0 {
            return Err(Error::InvalidParameter {
                name: "n_paths",
                value: 0.0,
                reason: "must be at least 1",
            });
        }
        if self.t_max < self.min_t_max() {
            return Err(Error::InvalidParameter {
                name: "t_max",
                value: self.t_max,
                reason: "must be at least 10/r",
            });
        }
        Ok(())
    }

    fn check_dt(&self, dt: f64) -> Result<()> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter {
                name: "dt",
                value: dt,
                reason: "must be finite and > 0",
            });
        }
        if dt > self.max_dt() {
            return Err(Error::InvalidParameter {
                name: "dt",
                value: dt,
                reason: "must not exceed min(0.01/lambda, 0.01/sigma^2)",
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimResult {
    pub estimate: f64,
    pub std_error: f64,
    pub n_paths: usize,
    pub n_stopped: usize,
    pub n_censored: usize,
    /// Mean of `τ` over stopped paths; NaN when none stopped.
    pub mean_stop_time: f64,
    /// Share of stops caused by a jump over `x*`; 0 when none stopped.
    pub fraction_jump_crossings: f64,
}

#[derive(Debug, Clone, Copy)]
struct Outcome {
    discounted: f64,
    stop: Option<(f64, bool)>,
}

/// Grid of `coarse` fine steps of length `fine` each; the Brownian motion is
/// generated on the fine grid so that grids sharing `fine` share paths.
#[derive(Debug, Clone, Copy)]
struct Grid {
    fine: f64,
    coarse: usize,
    steps: usize,
}

impl Grid {
    fn new(fine: f64, coarse: usize, t_max: f64) -> Self {
        let dt = fine * coarse as f64;
        let steps = ((t_max / dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
        Grid {
            fine,
            coarse,
            steps,
        }
    }
}

const STREAMS: u64 = 4;
const JUMPS: u64 = 0;
const NORMALS: u64 = 1;
const BRIDGE: u64 = 2;
const UNIFORMS: u64 = 3;

fn stream(seed: u64, path: usize, which: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(path as u64 * STREAMS + which);
    rng
}

struct PathSim<'a> {
    cfg: &'a SimConfig,
    drift: f64,
    sigma: f64,
    ln_jump: f64,
    ln_star: f64,
    g_star: f64,
    jump_time: Exp<f64>,
}

impl<'a> PathSim<'a> {
    fn new(cfg: &'a SimConfig) -> Result<Self> {
        let p = &cfg.params;
        Ok(PathSim {
            cfg,
            drift: p.mu - 0.5 * p.sigma * p.sigma - p.lambda * p.kappa,
            sigma: p.sigma,
            ln_jump: p.kappa.ln_1p(),
            ln_star: cfg.x_star.ln(),
            g_star: cfg.payoff.evaluate(cfg.x_star)?,
            jump_time: Exp::new(p.lambda).map_err(|_| Error::InvalidParameter {
                name: "lambda",
                value: p.lambda,
                reason: "must be > 0",
            })?,
        })
    }

    fn stopped(&self, t: f64, x: f64, by_jump: bool) -> Result<Outcome> {
        let g = if by_jump {
            self.cfg.payoff.evaluate(x)?
        } else {
            self.g_star
        };
        Ok(Outcome {
            discounted: (-self.cfg.params.r * t).exp() * g,
            stop: Some((t, by_jump)),
        })
    }

    /// Bridge of the continuous part from `(t0, y0)` to `(t1, y1)`, both below
    /// the barrier: did it touch `ln x*` in between?
    fn bridge_hit(&self, y0: f64, y1: f64, span: f64, uniforms: &mut ChaCha8Rng) -> bool {
        let (a, b) = (self.ln_star - y0, self.ln_star - y1);
        let p = (-2.0 * a * b / (self.sigma * self.sigma * span)).exp();
        uniforms.random::<f64>() < p
    }

    fn run(&self, path: usize, grid: Grid) -> Result<Outcome> {
        let seed = self.cfg.seed;
        let (mut jumps, mut normals) = (stream(seed, path, JUMPS), stream(seed, path, NORMALS));
        let (mut bridge, mut uniforms) = (stream(seed, path, BRIDGE), stream(seed, path, UNIFORMS));
        let sqrt_fine = grid.fine.sqrt();
        let dt = grid.fine * grid.coarse as f64;

        let mut y = self.cfg.x0.ln();
        let mut next_jump = self.jump_time.sample(&mut jumps);
        for step in 0..grid.steps {
            let t0 = step as f64 * dt;
            let t1 = t0 + dt;
            let mut dw = 0.0;
            for _ in 0..grid.coarse {
                let z: f64 = StandardNormal.sample(&mut normals);
                dw += sqrt_fine * z;
            }
            let y_end_free = y + self.drift * dt + self.sigma * dw;

            // walk through the jumps inside the step, bridging between them
            let (mut s, mut ys) = (t0, y);
            let mut jump_offset = 0.0;
            while next_jump < t1 {
                let tj = next_jump;
                let (h_left, h_total) = (tj - s, t1 - s);
                let target = y_end_free + jump_offset;
                let mean = ys + (target - ys) * h_left / h_total;
                let var = self.sigma * self.sigma * h_left * (t1 - tj) / h_total;
                let z: f64 = StandardNormal.sample(&mut bridge);
                let yj = mean + var.sqrt() * z;
                if yj >= self.ln_star {
                    return self.stopped(tj, yj.exp(), false);
                }
                if self.bridge_hit(ys, yj, h_left, &mut uniforms) {
                    return self.stopped(tj, self.cfg.x_star, false);
                }
                let yj = yj + self.ln_jump;
                jump_offset += self.ln_jump;
                if yj >= self.ln_star {
                    return self.stopped(tj, yj.exp(), true);
                }
                s = tj;
                ys = yj;
                next_jump = tj + self.jump_time.sample(&mut jumps);
            }
            let y1 = y_end_free + jump_offset;
            if y1 >= self.ln_star || self.bridge_hit(ys, y1, t1 - s, &mut uniforms) {
                return self.stopped(t1, self.cfg.x_star, false);
            }
            y = y1;
        }
        Ok(Outcome {
            discounted: 0.0,
            stop: None,
        })
    }
}

fn aggregate(outcomes: &[Outcome]) -> SimResult {
    let n = outcomes.len();
    let (mut mean, mut m2) = (0.0, 0.0);
    let (mut stopped, mut jumps, mut time_sum) = (0usize, 0usize, 0.0);
    for (k, o) in outcomes.iter().enumerate() {
        let delta = o.discounted - mean;
        mean += delta / (k + 1) as f64;
        m2 += delta * (o.discounted - mean);
        if let Some((t, by_jump)) = o.stop {
            stopped += 1;
            time_sum += t;
            jumps += usize::from(by_jump);
        }
    }
    let std_error = if n > 1 {
        (m2 / (n - 1) as f64).sqrt() / (n as f64).sqrt()
    } else {
        0.0
    };
    SimResult {
        estimate: mean,
        std_error,
        n_paths: n,
        n_stopped: stopped,
        n_censored: n - stopped,
        mean_stop_time: if stopped > 0 {
            time_sum / stopped as f64
        } else {
            f64::NAN
        },
        fraction_jump_crossings: if stopped > 0 {
            jumps as f64 / stopped as f64
        } else {
            0.0
        },
    }
}

fn immediate(cfg: &SimConfig) -> Result<SimResult> {
    Ok(SimResult {
        estimate: cfg.payoff.evaluate(cfg.x0)?,
        std_error: 0.0,
        n_paths: cfg.n_paths,
        n_stopped: cfg.n_paths,
        n_censored: 0,
        mean_stop_time: 0.0,
        fraction_jump_crossings: 0.0,
    })
}

fn run_grid(cfg: &SimConfig, grid: Grid, threads: Option<usize>) -> Result<SimResult> {
    if cfg.x0 >= cfg.x_star {
        return immediate(cfg);
    }
    let sim = PathSim::new(cfg)?;
    let work = || -> Result<Vec<Outcome>> {
        (0..cfg.n_paths)
            .into_par_iter()
            .map(|p| sim.run(p, grid))
            .collect()
    };
    let outcomes = match threads {
        None => work()?,
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?
            .install(work)?,
    };
    Ok(aggregate(&outcomes))
}

/// Runs `cfg.n_paths` paths on the global thread pool.
pub fn simulate_paths(cfg: &SimConfig) -> Result<SimResult> {
    simulate_paths_with_threads(cfg, None)
}

/// As [`simulate_paths`] on a dedicated pool of `threads` workers. The result
/// does not depend on the number of workers.
pub fn simulate_paths_with_threads(cfg: &SimConfig, threads: Option<usize>) -> Result<SimResult> {
    cfg.validate()?;
    run_grid(cfg, Grid::new(cfg.dt, 1, cfg.t_max), threads)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub dt: f64,
    pub result: SimResult,
}

/// Estimates at each step size in `dts` (strictly decreasing, each an integer
/// multiple of the last). All rows share one seed and one fine Brownian path
/// per path index, so differences between rows reflect discretization rather
/// than sampling noise. `cfg.dt` is ignored.
pub fn convergence_sweep(
    cfg: &SimConfig,
    dts: &[f64],
    threads: Option<usize>,
) -> Result<Vec<SweepRow>> {
    let Some(&fine) = dts.last() else {
        return Err(Error::Config(
            "convergence sweep needs at least one dt".into(),
        ));
    };
    for w in dts.windows(2) {
        if !(w[0] > w[1]) {
            return Err(Error::Config(format!(
                "dts must be strictly decreasing, got {:?} before {:?}",
                w[0], w[1]
            )));
        }
    }
    dts.iter()
        .map(|&dt| {
            cfg.check_dt(dt)?;
            let ratio = dt / fine;
            let coarse = ratio.round();
            if (ratio - coarse).abs() > 1e-9 * ratio {
                return Err(Error::Config(format!(
                    "dt {dt:?} is not an integer multiple of the finest dt {fine:?}"
                )));
            }
            let cfg = SimConfig { dt, ..cfg.clone() };
            cfg.validate()?;
            let result = run_grid(&cfg, Grid::new(fine, coarse as usize, cfg.t_max), threads)?;
            Ok(SweepRow { dt, result })
        })
        .collect()
}

pub const CSV_HEADER: &str = "dt,n_paths,estimate,std_error,n_censored,fraction_jump_crossings";

/// One CSV row per sweep entry, floats in shortest round-trip form.
pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for row in rows {
        let r = &row.result;
        out.push_str(&format!(
            "{:?},{},{:?},{:?},{},{:?}\n",
            row.dt, r.n_paths, r.estimate, r.std_error, r.n_censored, r.fraction_jump_crossings
        ));
    }
    out
}

//! Backward, segment-by-segment construction of the value function.
//!
//! Segment `i` covers `[x*/(1+κ)^i, x*/(1+κ)^(i−1))`. There a jump lands in
//! segment `i−1` (segment 0 being the stopping region, where `V = g`), so
//! `V_i` solves the Euler–Cauchy equation forced by `c·V_{i−1}(x(1+κ))`:
//!
//! ```text
//! V_i = d1_i x^β1 + d2_i x^β2 + particular(c · V_{i−1}(· (1+κ)))
//! ```
//!
//! Two conventions for the homogeneous constants are supported:
//!
//! * [`Convention::Shared`]: one pair `(δ1, δ2)` for every segment. This is
//!   the textbook closed form, but it leaves `V` discontinuous at the
//!   interior knots `x*/(1+κ)^i`.
//! * [`Convention::KnotMatched`]: each segment gets its own pair, chosen so
//!   that `V` and `V'` are continuous across every interior knot. The top
//!   pair is pinned by value matching at `x*` plus a far-field condition
//!   `x V' = γ V` at the bottom of the deepest segment, `γ > 0` being the
//!   root of `Q(γ) = c(1+κ)^γ`. This is the value of the threshold policy and
//!   is what [`fit_boundary`] uses by default.

use std::fmt;
use std::str::FromStr;

use crate::charpoly::{CharPoly, OdeCoeffs};
use crate::error::{Error, Result};
use crate::logpower::LogPowerSum;
use crate::particular::{coefficient_residual, log_spaced, particular_sum, residual};
use crate::rootfind::brent;

/// Default number of segments below the threshold.
pub const DEFAULT_DEPTH: usize = 25;

/// Term counts grow linearly with depth and coefficients factorially; beyond
/// this the deep segments are numerically meaningless.
pub const MAX_DEPTH: usize = 100;

/// Number of interior knots reported by [`BoundaryFit::knot_gaps`].
pub const MAX_REPORTED_KNOTS: usize = 10;

/// The running (exercise) payoff `g`.
#[derive(Debug, Clone, PartialEq)]
pub struct Payoff {
    g: LogPowerSum,
}

impl Payoff {
    /// Wraps `g`, checking that every exponent can be classified against `Q`.
    pub fn new(g: LogPowerSum, poly: &CharPoly) -> Result<Self> {
        if g.is_empty() {
            return Err(Error::Config("payoff has no terms".into()));
        }
        for t in g.terms() {
            poly.classify(t.exponent)?;
        }
        Ok(Payoff { g })
    }

    pub fn sum(&self) -> &LogPowerSum {
        &self.g
    }

    pub fn evaluate(&self, x: f64) -> Result<f64> {
        self.g.evaluate(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Convention {
    #[default]
    Shared,
    KnotMatched,
}

impl fmt::Display for Convention {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Convention::Shared => "shared",
            Convention::KnotMatched => "knot-matched",
        })
    }
}

impl FromStr for Convention {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "shared" => Ok(Convention::Shared),
            "knot-matched" => Ok(Convention::KnotMatched),
            other => Err(Error::Config(format!(
                "unknown convention `{other}` (expected `shared` or `knot-matched`)"
            ))),
        }
    }
}

/// One piece `V_i` of the value function.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub delta1: f64,
    pub delta2: f64,
    /// The whole of `V_i`, homogeneous part included.
    pub sum: LogPowerSum,
}

/// The value function: `g` on `[x*, ∞)` and `segments[i−1]` on segment `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct PiecewiseValue {
    pub x_star: f64,
    pub jump_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub convention: Convention,
    pub payoff: LogPowerSum,
    pub segments: Vec<Segment>,
}

impl PiecewiseValue {
    pub fn depth(&self) -> usize {
        self.segments.len()
    }

    pub fn delta1(&self) -> f64 {
        self.segments.first().map_or(0.0, |s| s.delta1)
    }

    pub fn delta2(&self) -> f64 {
        self.segments.first().map_or(0.0, |s| s.delta2)
    }

    /// `x* / (1+κ)^i`; knot 0 is the threshold itself.
    pub fn knot(&self, i: usize) -> f64 {
        knot(self.x_star, self.jump_factor, i)
    }

    /// `[lo, hi)` covered by segment `i` (1-based).
    pub fn interval(&self, i: usize) -> (f64, f64) {
        (self.knot(i), self.knot(i - 1))
    }

    pub fn evaluate(&self, x: f64) -> Result<f64> {
        evaluate_value(self, x)
    }

    /// The right-hand side `c · V_{i−1}(x(1+κ))` that segment `i` solves.
    pub fn forcing(&self, i: usize, c: f64) -> Result<LogPowerSum> {
        let upper = if i == 1 {
            &self.payoff
        } else {
            &self.segments[i - 2].sum
        };
        upper.shift_scale_argument(self.jump_factor, c)
    }

    /// Largest relative ODE residual of each segment against its own forcing,
    /// sampled at `points` log-spaced points inside the segment.
    pub fn segment_residuals(
        &self,
        poly: &CharPoly,
        coeffs: &OdeCoeffs,
        points: usize,
    ) -> Result<Vec<f64>> {
        (1..=self.depth())
            .map(|i| {
                let (lo, hi) = self.interval(i);
                let pts = log_spaced(lo, hi, points);
                residual(
                    poly,
                    &self.segments[i - 1].sum,
                    &self.forcing(i, coeffs.c)?,
                    &pts,
                )
            })
            .collect()
    }

    /// Largest coefficient-level defect of each segment against its own
    /// forcing; see [`coefficient_residual`].
    pub fn segment_coefficient_residuals(
        &self,
        poly: &CharPoly,
        coeffs: &OdeCoeffs,
    ) -> Result<Vec<f64>> {
        (1..=self.depth())
            .map(|i| {
                Ok(coefficient_residual(
                    poly,
                    &self.segments[i - 1].sum,
                    &self.forcing(i, coeffs.c)?,
                ))
            })
            .collect()
    }

    /// Value and slope jumps `V_{i+1} − V_i` at the first `count` interior
    /// knots.
    pub fn knot_gaps(&self, count: usize) -> Result<Vec<KnotGap>> {
        let n = count.min(self.depth().saturating_sub(1));
        (1..=n)
            .map(|i| {
                let x = self.knot(i);
                let (upper, lower) = (&self.segments[i - 1].sum, &self.segments[i].sum);
                Ok(KnotGap {
                    index: i,
                    x,
                    value_gap: lower.evaluate(x)? - upper.evaluate(x)?,
                    slope_gap: lower.differentiate().evaluate(x)?
                        - upper.differentiate().evaluate(x)?,
                    value: upper.evaluate(x)?,
                })
            })
            .collect()
    }
}

/// Discontinuity of the value function at an interior knot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KnotGap {
    pub index: usize,
    pub x: f64,
    pub value_gap: f64,
    pub slope_gap: f64,
    /// `V_i` at the knot, for scale.
    pub value: f64,
}

fn knot(x_star: f64, jump_factor: f64, i: usize) -> f64 {
    x_star / jump_factor.powi(i as i32)
}

/// Which segment contains `x`; knots belong to the segment above them.
pub fn segment_index(x: f64, x_star: f64, jump_factor: f64) -> Result<usize> {
    if !(jump_factor > 1.0) {
        return Err(Error::Domain {
            what: "jump factor minus one",
            value: jump_factor - 1.0,
        });
    }
    if !(x > 0.0) {
        return Err(Error::Domain {
            what: "x",
            value: x,
        });
    }
    if x >= x_star {
        return Err(Error::OutOfContinuation { x, x_star });
    }
    let guess = ((x_star / x).ln() / jump_factor.ln()).ceil().max(1.0);
    if !guess.is_finite() || guess > i32::MAX as f64 {
        return Err(Error::Domain {
            what: "x",
            value: x,
        });
    }
    let mut i = guess as usize;
    // the logarithm can land on the wrong side of a knot
    while x < knot(x_star, jump_factor, i) {
        i += 1;
    }
    while i > 1 && x >= knot(x_star, jump_factor, i - 1) {
        i -= 1;
    }
    Ok(i)
}

pub fn evaluate_value(v: &PiecewiseValue, x: f64) -> Result<f64> {
    if !(x > 0.0) {
        return Err(Error::Domain {
            what: "x",
            value: x,
        });
    }
    if x >= v.x_star {
        return v.payoff.evaluate(x);
    }
    let i = segment_index(x, v.x_star, v.jump_factor)?;
    match v.segments.get(i - 1) {
        Some(seg) => seg.sum.evaluate(x),
        None => Err(Error::DepthExceeded {
            x,
            depth: v.depth(),
            lowest: v.knot(v.depth()),
        }),
    }
}

fn check_depth(depth: usize) -> Result<()> {
    if depth == 0 {
        return Err(Error::Config("depth must be at least 1".into()));
    }
    if depth > MAX_DEPTH {
        return Err(Error::DepthOverflow {
            depth,
            max: MAX_DEPTH,
        });
    }
    Ok(())
}

fn check_kappa(kappa: f64) -> Result<()> {
    if !(kappa > 0.0) || !kappa.is_finite() {
        return Err(Error::InvalidParameter {
            name: "kappa",
            value: kappa,
            reason: "must be > 0",
        });
    }
    Ok(())
}

/// Coefficients grow roughly like `(c(1+κ)^β1 / Q'(β1))^i` with depth and
/// can overflow for steep roots and large jumps.
fn check_finite(sum: &LogPowerSum) -> Result<()> {
    if sum.terms().iter().all(|t| t.coeff.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("building a segment (reduce depth)"))
    }
}

fn homogeneous(poly: &CharPoly, d1: f64, d2: f64) -> LogPowerSum {
    &LogPowerSum::single(d1, poly.beta1, 0) + &LogPowerSum::single(d2, poly.beta2, 0)
}

/// Backward construction with one shared pair `(δ1, δ2)` in every segment.
#[allow(clippy::too_many_arguments)]
pub fn build_backward(
    poly: &CharPoly,
    coeffs: &OdeCoeffs,
    g: &Payoff,
    kappa: f64,
    depth: usize,
    delta1: f64,
    delta2: f64,
    x_star: f64,
) -> Result<PiecewiseValue> {
    check_depth(depth)?;
    check_kappa(kappa)?;
    let f = 1.0 + kappa;
    let hom = homogeneous(poly, delta1, delta2);
    let mut segments: Vec<Segment> = Vec::with_capacity(depth);
    for _ in 0..depth {
        let upper = segments.last().map_or(g.sum(), |s| &s.sum);
        let forcing = upper.shift_scale_argument(f, coeffs.c)?;
        let sum = &hom + &particular_sum(poly, &forcing)?;
        check_finite(&sum)?;
        segments.push(Segment {
            delta1,
            delta2,
            sum,
        });
    }
    Ok(PiecewiseValue {
        x_star,
        jump_factor: f,
        beta1: poly.beta1,
        beta2: poly.beta2,
        convention: Convention::Shared,
        payoff: g.sum().clone(),
        segments,
    })
}

/// Backward construction where every segment below the first gets the
/// homogeneous constants that make `V` continuously differentiable at the
/// knot above it. `(delta1, delta2)` are the constants of segment 1.
#[allow(clippy::too_many_arguments)]
pub fn build_knot_matched(
    poly: &CharPoly,
    coeffs: &OdeCoeffs,
    g: &Payoff,
    kappa: f64,
    depth: usize,
    x_star: f64,
    delta1: f64,
    delta2: f64,
) -> Result<PiecewiseValue> {
    check_depth(depth)?;
    check_kappa(kappa)?;
    if !(x_star > 0.0) {
        return Err(Error::Domain {
            what: "x_star",
            value: x_star,
        });
    }
    if poly.beta1 == poly.beta2 {
        return Err(Error::SingularElimination(
            "knot matching needs two distinct roots".into(),
        ));
    }
    let f = 1.0 + kappa;
    let mut segments: Vec<Segment> = Vec::with_capacity(depth);
    for i in 1..=depth {
        let upper = segments.last().map_or(g.sum(), |s| &s.sum);
        let part = particular_sum(poly, &upper.shift_scale_argument(f, coeffs.c)?)?;
        let (d1, d2) = if i == 1 {
            (delta1, delta2)
        } else {
            let k = knot(x_star, f, i - 1);
            let r0 = upper.evaluate(k)? - part.evaluate(k)?;
            let r1 = k * (upper.differentiate().evaluate(k)? - part.differentiate().evaluate(k)?);
            // u = d1 k^β1, v = d2 k^β2 solve u + v = r0, β1 u + β2 v = r1
            let span = poly.beta1 - poly.beta2;
            let u = (r1 - poly.beta2 * r0) / span;
            let v = (poly.beta1 * r0 - r1) / span;
            (u / k.powf(poly.beta1), v / k.powf(poly.beta2))
        };
        if !(d1.is_finite() && d2.is_finite()) {
            return Err(Error::NonFinite("matching constants at an interior knot"));
        }
        let sum = &homogeneous(poly, d1, d2) + &part;
        check_finite(&sum)?;
        segments.push(Segment {
            delta1: d1,
            delta2: d2,
            sum,
        });
    }
    Ok(PiecewiseValue {
        x_star,
        jump_factor: f,
        beta1: poly.beta1,
        beta2: poly.beta2,
        convention: Convention::KnotMatched,
        payoff: g.sum().clone(),
        segments,
    })
}

/// Positive root `γ` of `Q(γ) − c(1+κ)^γ`: the exponent of the power-law
/// solution `x^γ` of the full differential–difference equation, which
/// governs `V` far below the threshold.
pub fn far_field_exponent(poly: &CharPoly, coeffs: &OdeCoeffs, kappa: f64) -> Result<f64> {
    check_kappa(kappa)?;
    let ln_f = (1.0 + kappa).ln();
    let h = |s: f64| Ok(poly.eval(s) - coeffs.c * (s * ln_f).exp());
    // h(0) = b − c < 0 and h(β1) = −c(1+κ)^β1 > 0 for valid parameters
    brent(h, 0.0, poly.beta1, 1e-15, 200)
}

/// How `(δ1, δ2, x*)` are pinned down.
#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub convention: Convention,
    /// Shared convention only: force `δ2 = 0`.
    pub delta2_zero: bool,
    pub smooth_pasting: bool,
    /// Fixed threshold; when absent it is solved for.
    pub x_star: Option<f64>,
    /// Log-spaced scan used to bracket the threshold.
    pub search_lo: f64,
    pub search_hi: f64,
    pub search_points: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            convention: Convention::Shared,
            delta2_zero: true,
            smooth_pasting: true,
            x_star: None,
            search_lo: 1e-6,
            search_hi: 1e6,
            search_points: 241,
        }
    }
}

/// Result of [`fit_boundary`].
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryFit {
    pub x_star: f64,
    pub delta1: f64,
    pub delta2: f64,
    /// `|V_1(x*) − g(x*)| / max(1, |g(x*)|)`.
    pub value_matching: f64,
    /// `|V_1'(x*) − g'(x*)| / max(1, |g'(x*)|)`; reported whether or not it was
    /// imposed.
    pub smooth_pasting: f64,
    /// Knot-matched only: `|x V' − γ V|` at the bottom of the deepest segment,
    /// relative to the summed magnitudes of the terms of `V` and `x V'` there.
    pub far_field: Option<f64>,
    pub far_field_exponent: Option<f64>,
    pub knot_gaps: Vec<KnotGap>,
    pub value: PiecewiseValue,
}

struct Problem<'a> {
    poly: &'a CharPoly,
    coeffs: &'a OdeCoeffs,
    g: &'a Payoff,
    kappa: f64,
    depth: usize,
    /// Particular part of segment 1; independent of x* and of the constants.
    top_particular: LogPowerSum,
    gamma: f64,
}

impl Problem<'_> {
    fn payoff_at(&self, x: f64) -> Result<(f64, f64)> {
        let g = self.g.sum();
        Ok((g.evaluate(x)?, g.differentiate().evaluate(x)?))
    }

    fn far_field_defect(&self, v: &PiecewiseValue) -> Result<(f64, f64)> {
        let x = v.knot(v.depth());
        let last = &v.segments[v.depth() - 1].sum;
        let d = last.differentiate();
        let val = last.evaluate(x)?;
        let slope = x * d.evaluate(x)?;
        // deep segments carry large cancelling terms; rounding scales with them
        let scale = last.magnitude(x)?.max(x * d.magnitude(x)?).max(1.0);
        Ok((slope - self.gamma * val, scale))
    }

    /// Knot-matched constants for a fixed threshold from value matching and
    /// the far-field condition.
    fn knot_matched_constants(&self, x_star: f64) -> Result<(f64, f64)> {
        let build = |d1, d2| {
            build_knot_matched(
                self.poly,
                self.coeffs,
                self.g,
                self.kappa,
                self.depth,
                x_star,
                d1,
                d2,
            )
        };
        let r0 = self.far_field_defect(&build(0.0, 0.0)?)?.0;
        let r1 = self.far_field_defect(&build(1.0, 0.0)?)?.0 - r0;
        let r2 = self.far_field_defect(&build(0.0, 1.0)?)?.0 - r0;
        let (gx, _) = self.payoff_at(x_star)?;
        let rhs_vm = gx - self.top_particular.evaluate(x_star)?;
        let (m11, m12) = (x_star.powf(self.poly.beta1), x_star.powf(self.poly.beta2));
        solve2(m11, m12, r1, r2, rhs_vm, -r0)
    }

    /// `V_1'(x*) − g'(x*)` relative to `max(1, |g'(x*)|)`.
    fn pasting_defect(&self, x_star: f64, d1: f64, d2: f64) -> Result<f64> {
        let (b1, b2) = (self.poly.beta1, self.poly.beta2);
        let v1 = d1 * b1 * x_star.powf(b1 - 1.0)
            + d2 * b2 * x_star.powf(b2 - 1.0)
            + self.top_particular.differentiate().evaluate(x_star)?;
        let (_, dg) = self.payoff_at(x_star)?;
        Ok((v1 - dg) / 1f64.max(dg.abs()))
    }

    fn constants(&self, opts: &FitOptions, x_star: f64) -> Result<(f64, f64)> {
        let (b1, b2) = (self.poly.beta1, self.poly.beta2);
        let (gx, dg) = self.payoff_at(x_star)?;
        let p = self.top_particular.evaluate(x_star)?;
        match opts.convention {
            Convention::KnotMatched => self.knot_matched_constants(x_star),
            Convention::Shared if opts.delta2_zero => Ok(((gx - p) / x_star.powf(b1), 0.0)),
            Convention::Shared => {
                let dp = self.top_particular.differentiate().evaluate(x_star)?;
                solve2(
                    x_star.powf(b1),
                    x_star.powf(b2),
                    b1 * x_star.powf(b1 - 1.0),
                    b2 * x_star.powf(b2 - 1.0),
                    gx - p,
                    dg - dp,
                )
            }
        }
    }

    fn build(&self, opts: &FitOptions, x_star: f64, d1: f64, d2: f64) -> Result<PiecewiseValue> {
        match opts.convention {
            Convention::KnotMatched => build_knot_matched(
                self.poly,
                self.coeffs,
                self.g,
                self.kappa,
                self.depth,
                x_star,
                d1,
                d2,
            ),
            Convention::Shared => build_backward(
                self.poly,
                self.coeffs,
                self.g,
                self.kappa,
                self.depth,
                d1,
                d2,
                x_star,
            ),
        }
    }
}

fn solve2(m11: f64, m12: f64, m21: f64, m22: f64, r1: f64, r2: f64) -> Result<(f64, f64)> {
    let det = m11 * m22 - m12 * m21;
    let norm = (m11.abs() + m12.abs()) * (m21.abs() + m22.abs());
    if !(det.abs() > 1e-14 * norm) {
        return Err(Error::SingularElimination(format!(
            "2x2 determinant {det:e} against scale {norm:e}"
        )));
    }
    Ok(((r1 * m22 - r2 * m12) / det, (m11 * r2 - m21 * r1) / det))
}

/// Solves the boundary conditions for the homogeneous constants and, unless
/// fixed, the threshold.
///
/// Unknowns are the two constants (one with `delta2_zero` under the shared
/// convention) plus `x*` when not given. Equations are value matching at
/// `x*`, smooth pasting when enabled, and the far-field condition under the
/// knot-matched convention. The counts must agree.
pub fn fit_boundary(
    poly: &CharPoly,
    coeffs: &OdeCoeffs,
    g: &Payoff,
    kappa: f64,
    depth: usize,
    options: &FitOptions,
) -> Result<BoundaryFit> {
    check_depth(depth)?;
    check_kappa(kappa)?;
    let f = 1.0 + kappa;
    let top_particular = particular_sum(poly, &g.sum().shift_scale_argument(f, coeffs.c)?)?;
    let gamma = match options.convention {
        Convention::KnotMatched => far_field_exponent(poly, coeffs, kappa)?,
        Convention::Shared => f64::NAN,
    };
    let problem = Problem {
        poly,
        coeffs,
        g,
        kappa,
        depth,
        top_particular,
        gamma,
    };

    let unknowns = match options.convention {
        Convention::Shared if options.delta2_zero => 1,
        _ => 2,
    } + usize::from(options.x_star.is_none());
    let equations = 1
        + usize::from(options.smooth_pasting)
        + usize::from(options.convention == Convention::KnotMatched);
    if unknowns != equations {
        return Err(Error::Config(format!(
            "{unknowns} unknowns but {equations} boundary equations \
             (convention {}, delta2_zero {}, smooth_pasting {}, x_star {})",
            options.convention,
            options.delta2_zero,
            options.smooth_pasting,
            if options.x_star.is_some() {
                "given"
            } else {
                "free"
            },
        )));
    }

    let x_star = match options.x_star {
        Some(x) if x > 0.0 => x,
        Some(x) => {
            return Err(Error::Domain {
                what: "x_star",
                value: x,
            })
        }
        None => solve_threshold(&problem, options)?,
    };
    let (d1, d2) = problem.constants(options, x_star)?;
    let value = problem.build(options, x_star, d1, d2)?;

    let (gx, _) = problem.payoff_at(x_star)?;
    let v1 = value.segments[0].sum.evaluate(x_star)?;
    let value_matching = (v1 - gx).abs() / 1f64.max(gx.abs());
    let smooth_pasting = problem.pasting_defect(x_star, d1, d2)?.abs();
    let (far_field, far_field_exponent) = match options.convention {
        Convention::KnotMatched => {
            let (defect, scale) = problem.far_field_defect(&value)?;
            (Some(defect.abs() / scale), Some(gamma))
        }
        Convention::Shared => (None, None),
    };
    let knot_gaps = value.knot_gaps(MAX_REPORTED_KNOTS)?;
    Ok(BoundaryFit {
        x_star,
        delta1: d1,
        delta2: d2,
        value_matching,
        smooth_pasting,
        far_field,
        far_field_exponent,
        knot_gaps,
        value,
    })
}

/// Scans for a sign change of the smooth-pasting defect where exercise pays
/// (`g(x*) > 0`), then polishes it with Brent's method.
fn solve_threshold(problem: &Problem<'_>, opts: &FitOptions) -> Result<f64> {
    let defect = |x: f64| -> Result<f64> {
        let (d1, d2) = problem.constants(opts, x)?;
        problem.pasting_defect(x, d1, d2)
    };
    let mut trace = Vec::new();
    let mut prev: Option<(f64, f64)> = None;
    let grid = log_spaced(opts.search_lo, opts.search_hi, opts.search_points.max(2));
    let mut any_positive = false;
    for &x in &grid {
        let admissible = matches!(problem.payoff_at(x), Ok((gx, _)) if gx > 0.0);
        let value = if admissible { defect(x).ok() } else { None };
        any_positive |= admissible;
        let Some(fx) = value.filter(|v| v.is_finite()) else {
            prev = None;
            continue;
        };
        if let Some((xp, fp)) = prev {
            if fp.signum() != fx.signum() {
                let root = brent(&defect, xp, x, 1e-15 * x, 200);
                match root {
                    Ok(r) if defect(r).is_ok_and(|d| d.abs() < 1e-10) => return Ok(r),
                    Ok(r) => trace.push(format!(
                        "[{xp:e}, {x:e}]: converged to {r:e} but defect does not vanish (pole)"
                    )),
                    Err(e) => trace.push(format!("[{xp:e}, {x:e}]: {e}")),
                }
            }
        }
        prev = Some((x, fx));
    }
    if !any_positive {
        trace.push(format!(
            "payoff is nonpositive on the whole search range [{:e}, {:e}]",
            opts.search_lo, opts.search_hi
        ));
    } else if trace.is_empty() {
        trace.push(format!(
            "smooth-pasting defect keeps one sign on [{:e}, {:e}] where g > 0",
            opts.search_lo, opts.search_hi
        ));
    }
    Err(Error::NoRootFound {
        trace: trace.join("; "),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::charpoly::{derive_coeffs, q_roots, ModelParams};
    use proptest::prelude::*;

    struct Setup {
        poly: CharPoly,
        coeffs: OdeCoeffs,
        g: Payoff,
        kappa: f64,
    }

    fn reference() -> Setup {
        let p = ModelParams::new(0.05, 0.2, 0.5, 0.3, 0.1).unwrap();
        let coeffs = derive_coeffs(&p).unwrap();
        let poly = q_roots(&coeffs).unwrap();
        let g = Payoff::new(LogPowerSum::iso_elastic(1.0, 0.8, 1.0), &poly).unwrap();
        Setup {
            poly,
            coeffs,
            g,
            kappa: p.kappa,
        }
    }

    fn rel(a: f64, b: f64) -> f64 {
        (a - b).abs() / b.abs().max(1e-300)
    }

    #[test]
    fn segment_index_examples() {
        assert_eq!(segment_index(0.3, 1.0, 2.0).unwrap(), 2);
        assert_eq!(segment_index(0.5, 1.0, 2.0).unwrap(), 1);
        assert_eq!(segment_index(0.25, 1.0, 2.0).unwrap(), 2);
        assert_eq!(segment_index(1.0 - 1e-15, 1.0, 2.0).unwrap(), 1);
        assert!(matches!(
            segment_index(1.0, 1.0, 2.0),
            Err(Error::OutOfContinuation { .. })
        ));
        assert!(matches!(
            segment_index(0.0, 1.0, 2.0),
            Err(Error::Domain { .. })
        ));
        assert!(matches!(
            segment_index(0.5, 1.0, 1.0),
            Err(Error::Domain { .. })
        ));
    }

    #[test]
    fn knots_belong_to_the_shallower_segment() {
        let (xs, f) = (2.196, 1.3);
        for i in 1..40 {
            assert_eq!(segment_index(knot(xs, f, i), xs, f).unwrap(), i);
        }
    }

    #[test]
    fn segment_one_matches_definition() {
        let s = reference();
        let v = build_backward(&s.poly, &s.coeffs, &s.g, s.kappa, 3, 0.7, -0.2, 2.0).unwrap();
        let f = particular_sum(
            &s.poly,
            &s.g.sum()
                .shift_scale_argument(1.0 + s.kappa, s.coeffs.c)
                .unwrap(),
        )
        .unwrap();
        let want = &homogeneous(&s.poly, 0.7, -0.2) + &f;
        assert_eq!(v.segments[0].sum, want);
    }

    #[test]
    fn every_segment_solves_its_equation() {
        let s = reference();
        let v = build_backward(&s.poly, &s.coeffs, &s.g, s.kappa, 25, 1e-5, 0.3, 2.2).unwrap();
        for (i, r) in v
            .segment_residuals(&s.poly, &s.coeffs, 50)
            .unwrap()
            .iter()
            .enumerate()
        {
            assert!(*r < 1e-9, "segment {}: {r:e}", i + 1);
        }
        let v = build_knot_matched(&s.poly, &s.coeffs, &s.g, s.kappa, 25, 2.2, 1e-5, 0.3).unwrap();
        for (i, r) in v
            .segment_residuals(&s.poly, &s.coeffs, 50)
            .unwrap()
            .iter()
            .enumerate()
        {
            assert!(*r < 1e-9, "segment {}: {r:e}", i + 1);
        }
    }

    #[test]
    fn shape_law_holds_to_depth_25() {
        let s = reference();
        let v = build_backward(&s.poly, &s.coeffs, &s.g, s.kappa, 25, 1e-5, 0.3, 2.2).unwrap();
        for (k, seg) in v.segments.iter().enumerate() {
            let i = (k + 1) as u32;
            assert_eq!(seg.sum.max_log_power(s.poly.beta1), Some(i - 1));
            assert_eq!(seg.sum.max_log_power(s.poly.beta2), Some(i - 1));
            // g-dependent exponents never pick up logarithms
            assert_eq!(seg.sum.max_log_power(0.8), Some(0));
            assert_eq!(seg.sum.max_log_power(0.0), Some(0));
            assert_eq!(seg.sum.len(), 2 * i as usize + 2);
        }
        let v = build_backward(&s.poly, &s.coeffs, &s.g, s.kappa, 5, 1e-5, 0.0, 2.2).unwrap();
        assert_eq!(v.segments[4].sum.max_log_power(s.poly.beta2), None);
    }

    #[test]
    fn golden_segment_coefficients() {
        let s = reference();
        let (b1, b2) = (s.poly.beta1, s.poly.beta2);
        let (c, b, f) = (s.coeffs.c, s.coeffs.b, 1.0 + s.kappa);
        let (rho, theta, inv) = (1.0, 0.8, 1.0);
        let (d1, d2) = (1.1e-5, -0.4);
        let v = build_backward(&s.poly, &s.coeffs, &s.g, s.kappa, 3, d1, d2, 2.2).unwrap();
        let seg = |i: usize| &v.segments[i - 1].sum;
        let q_theta = s.poly.eval(theta);
        let xi = c * f.powf(theta) / q_theta;
        let k = |beta: f64| c * f.powf(beta);
        let dq = |beta: f64| s.poly.slope(beta);
        let checks = [
            (seg(1).coeff(theta, 0), c * rho * f.powf(theta) / q_theta),
            (seg(1).coeff(0.0, 0), -c * inv / b),
            (seg(2).coeff(b1, 1), d1 * k(b1) / dq(b1)),
            (seg(2).coeff(b2, 1), d2 * k(b2) / dq(b2)),
            (seg(2).coeff(theta, 0), rho * xi * xi),
            (seg(2).coeff(0.0, 0), -(c / b).powi(2) * inv),
            (
                seg(3).coeff(b1, 1),
                d1 * k(b1) / dq(b1) * (1.0 + k(b1) / dq(b1) * (f.ln() - 1.0 / dq(b1))),
            ),
            (
                seg(3).coeff(b2, 1),
                d2 * k(b2) / dq(b2) * (1.0 + k(b2) / dq(b2) * (f.ln() - 1.0 / dq(b2))),
            ),
            (seg(3).coeff(b1, 2), d1 / 2.0 * (k(b1) / dq(b1)).powi(2)),
            (seg(3).coeff(b2, 2), d2 / 2.0 * (k(b2) / dq(b2)).powi(2)),
            (seg(3).coeff(theta, 0), rho * xi.powi(3)),
            (seg(3).coeff(0.0, 0), -(c / b).powi(3) * inv),
        ];
        for (n, (got, want)) in checks.iter().enumerate() {
            assert!(rel(*got, *want) < 1e-10, "check {n}: {got:e} vs {want:e}");
        }
        for i in 1..=3 {
            assert_eq!(seg(i).coeff(b1, 0), d1);
            assert_eq!(seg(i).coeff(b2, 0), d2);
        }
    }

    #[test]
    fn evaluation_by_region() {
        let s = reference();
        let v = build_backward(&s.poly, &s.coeffs, &s.g, s.kappa, 4, 1e-5, 0.0, 2.2).unwrap();
        assert_eq!(v.evaluate(3.0).unwrap(), 3f64.powf(0.8) - 1.0);
        assert_eq!(v.evaluate(2.2).unwrap(), 2.2f64.powf(0.8) - 1.0);
        let x = 2.2 / 1.3 / 1.1;
        assert_eq!(
            v.evaluate(x).unwrap(),
            v.segments[1].sum.evaluate(x).unwrap()
        );
        let lowest = v.knot(4);
        assert!(v.evaluate(lowest).is_ok());
        assert!(matches!(
            v.evaluate(lowest * (1.0 - 1e-12)),
            Err(Error::DepthExceeded { depth: 4, .. })
        ));
    }

    #[test]
    fn coefficient_overflow_is_reported() {
        let p = ModelParams::new(0.0294, 0.1054, 0.3972, 0.8883, 0.1221).unwrap();
        let coeffs = derive_coeffs(&p).unwrap();
        let poly = q_roots(&coeffs).unwrap();
        let g = Payoff::new(LogPowerSum::iso_elastic(1.0, 0.8, 1.0), &poly).unwrap();
        assert!(build_backward(&poly, &coeffs, &g, p.kappa, 10, 1e-3, 0.2, 2.0).is_ok());
        assert!(matches!(
            build_backward(&poly, &coeffs, &g, p.kappa, 25, 1e-3, 0.2, 2.0),
            Err(Error::NonFinite(_))
        ));
    }

    #[test]
    fn depth_guards() {
        let s = reference();
        assert!(matches!(
            build_backward(
                &s.poly,
                &s.coeffs,
                &s.g,
                s.kappa,
                MAX_DEPTH + 1,
                0.0,
                0.0,
                1.0
            ),
            Err(Error::DepthOverflow { .. })
        ));
        assert!(build_backward(&s.poly, &s.coeffs, &s.g, s.kappa, 0, 0.0, 0.0, 1.0).is_err());
    }

    #[test]
    fn knot_matched_is_continuously_differentiable() {
        let s = reference();
        let v =
            build_knot_matched(&s.poly, &s.coeffs, &s.g, s.kappa, 12, 2.2, -8e-6, 0.35).unwrap();
        for gap in v.knot_gaps(20).unwrap() {
            let scale = gap.value.abs().max(1e-3);
            assert!(gap.value_gap.abs() < 1e-10 * scale, "{gap:?}");
            assert!(gap.slope_gap.abs() < 1e-9 * scale / gap.x, "{gap:?}");
        }
    }

    #[test]
    fn far_field_exponent_solves_the_full_equation() {
        let s = reference();
        let gamma = far_field_exponent(&s.poly, &s.coeffs, s.kappa).unwrap();
        assert!(gamma > 0.0 && gamma < s.poly.beta1);
        let defect = s.poly.eval(gamma) - s.coeffs.c * (1.0 + s.kappa).powf(gamma);
        assert!(defect.abs() < 1e-12, "{defect:e}");
        assert!((gamma - 1.4538).abs() < 1e-3);
    }

    #[test]
    fn shared_fit_satisfies_its_equations() {
        let s = reference();
        let fit = fit_boundary(
            &s.poly,
            &s.coeffs,
            &s.g,
            s.kappa,
            25,
            &FitOptions::default(),
        )
        .unwrap();
        assert_eq!(fit.delta2, 0.0);
        assert!(fit.value_matching < 1e-10);
        assert!(fit.smooth_pasting < 1e-10);
        assert!(fit.far_field.is_none());
        assert!((fit.x_star - 2.1963).abs() < 1e-3, "{}", fit.x_star);
        assert_eq!(fit.knot_gaps.len(), 10);
        assert!(fit.knot_gaps.iter().any(|g| g.value_gap.abs() > 1e-3));
    }

    #[test]
    fn knot_matched_fit_satisfies_its_equations() {
        let s = reference();
        let opts = FitOptions {
            convention: Convention::KnotMatched,
            ..FitOptions::default()
        };
        let fit = fit_boundary(&s.poly, &s.coeffs, &s.g, s.kappa, 25, &opts).unwrap();
        assert!(fit.value_matching < 1e-10);
        assert!(fit.smooth_pasting < 1e-10);
        assert!(
            fit.far_field.unwrap() < 1e-10,
            "{:?} {:?}",
            fit.far_field,
            fit
        );
        for gap in &fit.knot_gaps {
            assert!(
                gap.value_gap.abs() < 1e-10 * gap.value.abs().max(1e-3),
                "{gap:?}"
            );
        }
        assert!(fit.x_star > 1.0 && fit.x_star < 5.0);
    }

    #[test]
    fn fixed_threshold_value_matching_is_linear() {
        let s = reference();
        let opts = FitOptions {
            smooth_pasting: false,
            x_star: Some(2.0),
            ..FitOptions::default()
        };
        let fit = fit_boundary(&s.poly, &s.coeffs, &s.g, s.kappa, 5, &opts).unwrap();
        assert_eq!(fit.x_star, 2.0);
        let top = particular_sum(
            &s.poly,
            &s.g.sum()
                .shift_scale_argument(1.0 + s.kappa, s.coeffs.c)
                .unwrap(),
        )
        .unwrap();
        let want = (2f64.powf(0.8) - 1.0 - top.evaluate(2.0).unwrap()) / 2f64.powf(s.poly.beta1);
        assert_eq!(fit.delta1, want);
        assert!(fit.value_matching < 1e-14);
    }

    #[test]
    fn mismatched_equation_count_is_rejected() {
        let s = reference();
        let opts = FitOptions {
            delta2_zero: false,
            ..FitOptions::default()
        };
        assert!(matches!(
            fit_boundary(&s.poly, &s.coeffs, &s.g, s.kappa, 5, &opts),
            Err(Error::Config(_))
        ));
        let opts = FitOptions {
            delta2_zero: false,
            x_star: Some(2.0),
            ..FitOptions::default()
        };
        let fit = fit_boundary(&s.poly, &s.coeffs, &s.g, s.kappa, 5, &opts).unwrap();
        assert!(fit.value_matching < 1e-12 && fit.smooth_pasting < 1e-12);
    }

    #[test]
    fn unprofitable_payoff_has_no_threshold() {
        let s = reference();
        let g = Payoff::new(LogPowerSum::iso_elastic(-1.0, 0.8, 1.0), &s.poly).unwrap();
        let err =
            fit_boundary(&s.poly, &s.coeffs, &g, s.kappa, 5, &FitOptions::default()).unwrap_err();
        match err {
            Error::NoRootFound { trace } => assert!(trace.contains("nonpositive"), "{trace}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn payoff_on_a_root_is_rejected() {
        let s = reference();
        let g = LogPowerSum::single(1.0, s.poly.beta1, 0);
        assert!(Payoff::new(g, &s.poly).is_ok());
        let g = LogPowerSum::single(1.0, s.poly.beta1 * (1.0 + 1e-8), 0);
        assert!(matches!(
            Payoff::new(g, &s.poly),
            Err(Error::AmbiguousMultiplicity { .. })
        ));
    }

    proptest! {
        #[test]
        fn segment_index_round_trip(i in 1usize..30, t in 0.0f64..1.0, kappa in 0.05f64..2.0, xs in 0.1f64..10.0) {
            let f = 1.0 + kappa;
            let (lo, hi) = (knot(xs, f, i), knot(xs, f, i - 1));
            let x = (lo + t * (hi - lo)).min(hi * (1.0 - 1e-15)).max(lo);
            prop_assert_eq!(segment_index(x, xs, f).unwrap(), i);
        }

        #[test]
        fn homogeneous_constants_enter_linearly(d1 in -1.0f64..1.0, d2 in -1.0f64..1.0) {
            let s = reference();
            let build = |a, b| build_backward(&s.poly, &s.coeffs, &s.g, s.kappa, 6, a, b, 2.0).unwrap();
            let (base, e1, e2, v) = (build(0.0, 0.0), build(1.0, 0.0), build(0.0, 1.0), build(d1, d2));
            for i in 0..6 {
                for t in v.segments[i].sum.terms() {
                    let (e, n) = (t.exponent, t.log_power);
                    let b0 = base.segments[i].sum.coeff(e, n);
                    let want = b0
                        + d1 * (e1.segments[i].sum.coeff(e, n) - b0)
                        + d2 * (e2.segments[i].sum.coeff(e, n) - b0);
                    let scale = b0.abs().max(e1.segments[i].sum.coeff(e, n).abs())
                        .max(e2.segments[i].sum.coeff(e, n).abs()).max(1e-300);
                    prop_assert!((t.coeff - want).abs() <= 1e-12 * scale, "{} vs {}", t.coeff, want);
                }
            }
        }
    }
}

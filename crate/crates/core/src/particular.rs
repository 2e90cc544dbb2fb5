//! Particular solutions of the Euler–Cauchy equation
//! `x²y'' + a x y' + b y = A x^α (ln x)^n`.
//!
//! Two routes are provided and kept independent of each other: a recursive
//! one that solves the triangular coefficient system from the top down, and
//! a closed form for every coefficient. Sums of forcing terms are handled by
//! superposition.

use crate::charpoly::CharPoly;
use crate::error::{Error, Result};
use crate::logpower::{LogPowerSum, LogPowerTerm};

/// Above this log power the closed form for non-roots is not used by
/// [`particular`]: `n!/i!` and the powers of `Q(α)` lose precision long before
/// they overflow.
pub const CLOSED_FORM_MAX_N: u32 = 12;

/// A particular solution together with the coefficients `c_0..=c_n` that
/// define it.
///
/// * multiplicity 0: `y = x^α Σ c_i (ln x)^i`
/// * multiplicity 1: `y = x^α Σ c_i (ln x)^(i+1)`
/// * multiplicity 2: `y = c_n x^α (ln x)^(n+2)`; the other entries are zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ParticularSolution {
    pub solution: LogPowerSum,
    pub multiplicity: u8,
    pub coefficients: Vec<f64>,
}

impl ParticularSolution {
    fn assemble(term: &LogPowerTerm, multiplicity: u8, coefficients: Vec<f64>) -> Self {
        let n = term.log_power;
        let solution = match multiplicity {
            0 => coefficients
                .iter()
                .enumerate()
                .map(|(i, &c)| LogPowerTerm::new(c, term.exponent, i as u32))
                .collect(),
            1 => coefficients
                .iter()
                .enumerate()
                .map(|(i, &c)| LogPowerTerm::new(c, term.exponent, i as u32 + 1))
                .collect(),
            _ => LogPowerSum::single(coefficients[n as usize], term.exponent, n + 2),
        };
        ParticularSolution {
            solution,
            multiplicity,
            coefficients,
        }
    }
}

fn double_root_coefficients(term: &LogPowerTerm) -> Vec<f64> {
    let n = term.log_power as usize;
    let mut c = vec![0.0; n + 1];
    c[n] = term.coeff / ((n + 1) as f64 * (n + 2) as f64);
    c
}

/// Top-down recursion on the coefficient system.
pub fn particular_recursive(poly: &CharPoly, term: &LogPowerTerm) -> Result<ParticularSolution> {
    let m = poly.classify(term.exponent)?;
    let n = term.log_power as usize;
    let big_a = term.coeff;
    let q = poly.eval(term.exponent);
    let dq = poly.slope(term.exponent);
    let coefficients = match m {
        0 => {
            let mut c = vec![0.0; n + 1];
            c[n] = big_a / q;
            if n >= 1 {
                c[n - 1] = -(n as f64) * big_a * dq / (q * q);
            }
            for i in (0..n.saturating_sub(1)).rev() {
                c[i] = -((i + 1) as f64) / q * (dq * c[i + 1] + (i + 2) as f64 * c[i + 2]);
            }
            c
        }
        1 => {
            let mut c = vec![0.0; n + 1];
            c[n] = big_a / ((n + 1) as f64 * dq);
            for i in (0..n).rev() {
                c[i] = -((i + 2) as f64) / dq * c[i + 1];
            }
            c
        }
        _ => double_root_coefficients(term),
    };
    Ok(ParticularSolution::assemble(term, m, coefficients))
}

/// Binomial coefficient as a float, exact for the small arguments used here.
fn binomial(k: u32, r: u32) -> f64 {
    (0..r).fold(1.0, |acc, j| acc * (k - j) as f64 / (j + 1) as f64)
}

/// `hi! / lo!` for `lo <= hi`.
fn falling_factorial_ratio(hi: u32, lo: u32) -> f64 {
    (lo + 1..=hi).fold(1.0, |acc, k| acc * k as f64)
}

fn alternating(k: u32) -> f64 {
    if k.is_multiple_of(2) {
        1.0
    } else {
        -1.0
    }
}

/// Every coefficient written out explicitly.
pub fn particular_closed(poly: &CharPoly, term: &LogPowerTerm) -> Result<ParticularSolution> {
    let m = poly.classify(term.exponent)?;
    let n = term.log_power;
    let big_a = term.coeff;
    let q = poly.eval(term.exponent);
    let dq = poly.slope(term.exponent);
    let coefficients = match m {
        0 => (0..=n)
            .map(|i| {
                let d = n - i;
                let inner: f64 = (0..=d / 2)
                    .map(|j| {
                        alternating(j)
                            * binomial(d - j, j)
                            * dq.powi((d - 2 * j) as i32)
                            * q.powi(j as i32)
                    })
                    .sum();
                alternating(d) * falling_factorial_ratio(n, i) * big_a / q.powi(d as i32 + 1)
                    * inner
            })
            .collect(),
        1 => (0..=n)
            .map(|i| {
                let d = n - i;
                alternating(d) * falling_factorial_ratio(n, i) / (i + 1) as f64 * big_a
                    / dq.powi(d as i32 + 1)
            })
            .collect(),
        _ => double_root_coefficients(term),
    };
    Ok(ParticularSolution::assemble(term, m, coefficients))
}

/// The `n = 0` shortcut `φ x^α (ln x)^r` with `φ = A / Q^(r)(α)` and `r` the
/// multiplicity of `α`.
pub fn particular_n0(poly: &CharPoly, coeff: f64, alpha: f64) -> Result<ParticularSolution> {
    let r = poly.classify(alpha)?;
    let phi = coeff / poly.derivative(alpha, r as u32)?;
    Ok(ParticularSolution {
        solution: LogPowerSum::single(phi, alpha, r as u32),
        multiplicity: r,
        coefficients: vec![phi],
    })
}

/// Particular solution for one forcing term, choosing the numerically
/// preferable route.
pub fn particular(poly: &CharPoly, term: &LogPowerTerm) -> Result<ParticularSolution> {
    if term.log_power > CLOSED_FORM_MAX_N {
        particular_recursive(poly, term)
    } else {
        particular_closed(poly, term)
    }
}

/// Superposition over the terms of `rhs`.
pub fn particular_sum(poly: &CharPoly, rhs: &LogPowerSum) -> Result<LogPowerSum> {
    let mut out = Vec::new();
    for (index, term) in rhs.terms().iter().enumerate() {
        let sol = particular(poly, term).map_err(|e| Error::Term {
            index,
            coeff: term.coeff,
            exponent: term.exponent,
            log_power: term.log_power,
            source: Box::new(e),
        })?;
        out.extend_from_slice(sol.solution.terms());
    }
    Ok(LogPowerSum::canonicalize(out))
}

/// Largest defect of `x²y'' + a x y' + b y = rhs` over `points`.
///
/// The operator maps each exponent group `x^α (ln x)^k` to itself, so the
/// defect is measured per exponent, relative to the summed absolute values
/// of that group's terms in `x²y''`, `a x y'`, `b y` and `rhs`. Deep
/// segments evaluate small values from large cancelling terms; a single
/// relative defect would measure that cancellation and could hide an error
/// in a small group.
pub fn residual(
    poly: &CharPoly,
    candidate: &LogPowerSum,
    rhs: &LogPowerSum,
    points: &[f64],
) -> Result<f64> {
    let mut exponents: Vec<f64> = candidate
        .terms()
        .iter()
        .chain(rhs.terms())
        .map(|t| t.exponent)
        .collect();
    exponents.sort_by(f64::total_cmp);
    exponents.dedup_by(|a, b| a.to_bits() == b.to_bits());
    let group = |s: &LogPowerSum, e: f64| -> LogPowerSum {
        s.terms()
            .iter()
            .filter(|t| t.exponent.to_bits() == e.to_bits())
            .copied()
            .collect()
    };
    let mut worst = 0.0f64;
    for e in exponents {
        let y = group(candidate, e);
        let f = group(rhs, e);
        let d1 = y.differentiate();
        let d2 = d1.differentiate();
        for &x in points {
            let lhs =
                x * x * d2.evaluate(x)? + poly.a * x * d1.evaluate(x)? + poly.b * y.evaluate(x)?;
            let defect = (lhs - f.evaluate(x)?).abs();
            let scale = x * x * d2.magnitude(x)?
                + (poly.a * x).abs() * d1.magnitude(x)?
                + poly.b.abs() * y.magnitude(x)?
                + f.magnitude(x)?;
            let r = if defect == 0.0 { 0.0 } else { defect / scale };
            if r.is_nan() {
                return Err(Error::NonFinite("evaluating a residual"));
            }
            worst = worst.max(r);
        }
    }
    Ok(worst)
}

/// Coefficient-level defect of `x²y'' + a x y' + b y = rhs`.
///
/// Applies the operator symbolically,
/// `x^α (ln x)^k ↦ x^α [Q(α)(ln x)^k + k Q'(α)(ln x)^(k−1) + k(k−1)(ln x)^(k−2)]`,
/// and returns the largest `|lhs_j − rhs_j|` over all `(α, j)`, each relative
/// to the rounding scale of that coefficient: the contributions with `Q` and
/// `Q'` replaced by the sums of the absolute values of their summands.
pub fn coefficient_residual(poly: &CharPoly, candidate: &LogPowerSum, rhs: &LogPowerSum) -> f64 {
    // (exponent, log power) -> (signed sum, rounding scale)
    let mut acc: Vec<(f64, u32, f64, f64)> = Vec::new();
    let mut add = |e: f64, j: u32, v: f64, scale: f64| match acc
        .iter_mut()
        .find(|(x, k, _, _)| x.to_bits() == e.to_bits() && *k == j)
    {
        Some(slot) => {
            slot.2 += v;
            slot.3 += scale;
        }
        None => acc.push((e, j, v, scale)),
    };
    let (a, b) = (poly.a, poly.b);
    for t in candidate.terms() {
        let (e, k, c) = (t.exponent, t.log_power, t.coeff);
        let q_scale = e * e + e.abs() + (a * e).abs() + b.abs();
        add(e, k, poly.eval(e) * c, q_scale * c.abs());
        if k >= 1 {
            let dq_scale = 2.0 * e.abs() + 1.0 + a.abs();
            add(
                e,
                k - 1,
                k as f64 * poly.slope(e) * c,
                k as f64 * dq_scale * c.abs(),
            );
        }
        if k >= 2 {
            let v = (k * (k - 1)) as f64 * c;
            add(e, k - 2, v, v.abs());
        }
    }
    for t in rhs.terms() {
        add(t.exponent, t.log_power, -t.coeff, t.coeff.abs());
    }
    acc.iter()
        .map(|&(_, _, v, m)| if v == 0.0 { 0.0 } else { v.abs() / m })
        .fold(0.0, f64::max)
}

/// `n` log-spaced points covering `[lo, hi]`.
pub fn log_spaced(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..n)
        .map(|k| (a + (b - a) * k as f64 / (n - 1) as f64).exp())
        .collect()
}

//! Finite sums `Σ A_k x^{α_k} (ln x)^{n_k}`.
//!
//! Every payoff, forcing term and particular solution handled by the crate
//! lives in this class. A [`LogPowerSum`] is always kept canonical: terms are
//! sorted by `(exponent, log_power)`, no key appears twice and no coefficient
//! is exactly zero. Exponents are merged only when their bits are identical;
//! exponents produced from the same root computation compare equal, and
//! nearby-but-different exponents must stay separate for the multiplicity
//! case analysis to work.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Neg, Sub};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogPowerTerm {
    pub coeff: f64,
    pub exponent: f64,
    pub log_power: u32,
}

impl LogPowerTerm {
    pub fn new(coeff: f64, exponent: f64, log_power: u32) -> Self {
        // -0.0 and 0.0 must share a key
        let exponent = if exponent == 0.0 { 0.0 } else { exponent };
        LogPowerTerm {
            coeff,
            exponent,
            log_power,
        }
    }

    pub fn evaluate(&self, x: f64) -> f64 {
        self.eval_with_log(x, x.ln())
    }

    fn eval_with_log(&self, x: f64, ln_x: f64) -> f64 {
        let power = if self.exponent == 0.0 {
            1.0
        } else {
            x.powf(self.exponent)
        };
        self.coeff * power * ln_x.powi(self.log_power as i32)
    }

    fn key_cmp(&self, other: &Self) -> Ordering {
        self.exponent
            .total_cmp(&other.exponent)
            .then(self.log_power.cmp(&other.log_power))
    }

    fn same_key(&self, other: &Self) -> bool {
        self.exponent.to_bits() == other.exponent.to_bits() && self.log_power == other.log_power
    }
}

impl fmt::Display for LogPowerTerm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{:?}, {:?}, {}",
            self.coeff, self.exponent, self.log_power
        )
    }
}

/// A canonical sum of [`LogPowerTerm`]s. The empty sum is the zero function.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LogPowerSum {
    terms: Vec<LogPowerTerm>,
}

impl LogPowerSum {
    pub fn zero() -> Self {
        LogPowerSum { terms: Vec::new() }
    }

    /// Merges equal keys, drops exact zeros and sorts.
    pub fn canonicalize(terms: impl IntoIterator<Item = LogPowerTerm>) -> Self {
        let mut raw: Vec<LogPowerTerm> = terms
            .into_iter()
            .map(|t| LogPowerTerm::new(t.coeff, t.exponent, t.log_power))
            .collect();
        raw.sort_by(|a, b| a.key_cmp(b));
        let mut out: Vec<LogPowerTerm> = Vec::with_capacity(raw.len());
        for t in raw {
            match out.last_mut() {
                Some(last) if last.same_key(&t) => last.coeff += t.coeff,
                _ => out.push(t),
            }
        }
        out.retain(|t| t.coeff != 0.0);
        LogPowerSum { terms: out }
    }

    pub fn single(coeff: f64, exponent: f64, log_power: u32) -> Self {
        Self::canonicalize([LogPowerTerm::new(coeff, exponent, log_power)])
    }

    /// The iso-elastic payoff `rho x^theta − investment`.
    pub fn iso_elastic(rho: f64, theta: f64, investment: f64) -> Self {
        Self::canonicalize([
            LogPowerTerm::new(rho, theta, 0),
            LogPowerTerm::new(-investment, 0.0, 0),
        ])
    }

    pub fn terms(&self) -> &[LogPowerTerm] {
        &self.terms
    }

    pub fn len(&self) -> usize {
        self.terms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.terms.is_empty()
    }

    /// Coefficient stored under `(exponent, log_power)`, zero if absent.
    pub fn coeff(&self, exponent: f64, log_power: u32) -> f64 {
        let probe = LogPowerTerm::new(0.0, exponent, log_power);
        self.terms
            .iter()
            .find(|t| t.same_key(&probe))
            .map_or(0.0, |t| t.coeff)
    }

    /// Highest log power attached to `exponent`, if the exponent occurs.
    pub fn max_log_power(&self, exponent: f64) -> Option<u32> {
        let bits = LogPowerTerm::new(0.0, exponent, 0).exponent.to_bits();
        self.terms
            .iter()
            .filter(|t| t.exponent.to_bits() == bits)
            .map(|t| t.log_power)
            .max()
    }

    pub fn evaluate(&self, x: f64) -> Result<f64> {
        if !(x > 0.0) {
            return Err(Error::Domain {
                what: "x",
                value: x,
            });
        }
        let ln_x = x.ln();
        Ok(self.terms.iter().map(|t| t.eval_with_log(x, ln_x)).sum())
    }

    /// Sum of the absolute values of the terms at `x`; the natural scale for
    /// judging rounding error in [`LogPowerSum::evaluate`].
    pub fn magnitude(&self, x: f64) -> Result<f64> {
        if !(x > 0.0) {
            return Err(Error::Domain {
                what: "x",
                value: x,
            });
        }
        let ln_x = x.ln();
        Ok(self
            .terms
            .iter()
            .map(|t| t.eval_with_log(x, ln_x).abs())
            .sum())
    }

    pub fn differentiate(&self) -> Self {
        let mut out = Vec::with_capacity(2 * self.terms.len());
        for t in &self.terms {
            let e = t.exponent - 1.0;
            if t.exponent != 0.0 {
                out.push(LogPowerTerm::new(t.coeff * t.exponent, e, t.log_power));
            }
            if t.log_power > 0 {
                out.push(LogPowerTerm::new(
                    t.coeff * t.log_power as f64,
                    e,
                    t.log_power - 1,
                ));
            }
        }
        Self::canonicalize(out)
    }

    /// The sum representing `x ↦ premultiplier · self(factor · x)`.
    ///
    /// Uses `(factor·x)^α = factor^α x^α` and the binomial expansion of
    /// `(ln factor + ln x)^n`.
    pub fn shift_scale_argument(&self, factor: f64, premultiplier: f64) -> Result<Self> {
        if !(factor > 0.0) {
            return Err(Error::Domain {
                what: "factor",
                value: factor,
            });
        }
        let ln_f = factor.ln();
        let mut out = Vec::new();
        for t in &self.terms {
            let scaled = premultiplier * t.coeff * factor.powf(t.exponent);
            let n = t.log_power;
            let mut binom = 1.0;
            for m in (0..=n).rev() {
                // term for (ln x)^m carries C(n, m) (ln f)^(n−m)
                let k = n - m;
                out.push(LogPowerTerm::new(
                    scaled * binom * ln_f.powi(k as i32),
                    t.exponent,
                    m,
                ));
                binom = binom * m as f64 / (k + 1) as f64;
            }
        }
        Ok(Self::canonicalize(out))
    }

    pub fn scale(&self, k: f64) -> Self {
        Self::canonicalize(self.terms.iter().map(|t| LogPowerTerm {
            coeff: t.coeff * k,
            ..*t
        }))
    }

    pub fn is_canonical(&self) -> bool {
        self.terms.iter().all(|t| t.coeff != 0.0)
            && self
                .terms
                .windows(2)
                .all(|w| w[0].key_cmp(&w[1]) == Ordering::Less)
    }
}

impl Add for &LogPowerSum {
    type Output = LogPowerSum;

    fn add(self, rhs: &LogPowerSum) -> LogPowerSum {
        LogPowerSum::canonicalize(self.terms.iter().chain(rhs.terms.iter()).copied())
    }
}

impl Sub for &LogPowerSum {
    type Output = LogPowerSum;

    fn sub(self, rhs: &LogPowerSum) -> LogPowerSum {
        self + &(-rhs)
    }
}

impl Neg for &LogPowerSum {
    type Output = LogPowerSum;

    fn neg(self) -> LogPowerSum {
        self.scale(-1.0)
    }
}

impl FromIterator<LogPowerTerm> for LogPowerSum {
    fn from_iter<I: IntoIterator<Item = LogPowerTerm>>(iter: I) -> Self {
        LogPowerSum::canonicalize(iter)
    }
}

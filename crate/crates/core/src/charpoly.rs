//! Model parameters, the Euler–Cauchy coefficients they induce, and the
//! characteristic polynomial `Q(β) = β(β−1) + aβ + b`.

use crate::error::{Error, Result};

/// Relative tolerance for deciding that an exponent is a root of `Q`.
pub const ROOT_TOL: f64 = 1e-9;

/// Exponents whose `|Q|` (or `|Q'|`) falls between `ROOT_TOL` and
/// `ROOT_TOL * AMBIGUITY_FACTOR` (times the scale) are rejected as
/// ill-conditioned instead of being classified.
pub const AMBIGUITY_FACTOR: f64 = 1e3;

/// Economic and stochastic inputs of the jump-diffusion
/// `dX/X(t-) = mu dt + sigma dW + kappa dN`, discounted at rate `r`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub mu: f64,
    pub sigma: f64,
    pub lambda: f64,
    pub kappa: f64,
    pub r: f64,
}

impl ModelParams {
    pub fn new(mu: f64, sigma: f64, lambda: f64, kappa: f64, r: f64) -> Result<Self> {
        let p = ModelParams {
            mu,
            sigma,
            lambda,
            kappa,
            r,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let checks: [(&'static str, f64, bool, &'static str); 5] = [
            ("mu", self.mu, self.mu.is_finite(), "must be finite"),
            (
                "sigma",
                self.sigma,
                self.sigma > 0.0 && self.sigma.is_finite(),
                "must be > 0",
            ),
            (
                "lambda",
                self.lambda,
                self.lambda > 0.0 && self.lambda.is_finite(),
                "must be > 0",
            ),
            (
                "kappa",
                self.kappa,
                self.kappa > 0.0 && self.kappa.is_finite(),
                "must be > 0",
            ),
            (
                "r",
                self.r,
                self.r > 0.0 && self.r.is_finite(),
                "must be > 0",
            ),
        ];
        for (name, value, ok, reason) in checks {
            if !ok {
                return Err(Error::InvalidParameter {
                    name,
                    value,
                    reason,
                });
            }
        }
        if self.r <= self.mu {
            return Err(Error::InvalidParameter {
                name: "r",
                value: self.r,
                reason: "must exceed mu",
            });
        }
        Ok(())
    }

    /// Multiplicative jump factor `1 + kappa`.
    pub fn jump_factor(&self) -> f64 {
        1.0 + self.kappa
    }
}

/// Coefficients of `x²V'' + a x V' + b V − c V(x(1+κ)) = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OdeCoeffs {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

pub fn derive_coeffs(params: &ModelParams) -> Result<OdeCoeffs> {
    params.validate()?;
    let s2 = params.sigma * params.sigma;
    Ok(OdeCoeffs {
        a: 2.0 * (params.mu - params.lambda * params.kappa) / s2,
        b: -2.0 * (params.r + params.lambda) / s2,
        c: -2.0 * params.lambda / s2,
    })
}

/// The quadratic `Q(β) = β(β−1) + aβ + b` together with its real roots,
/// `beta1 >= beta2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CharPoly {
    pub a: f64,
    pub b: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl CharPoly {
    /// Roots of `β² + (a−1)β + b`. The larger-magnitude root is computed
    /// first and the other follows from the product `β1·β2 = b`.
    ///
    /// `b >= 0` is accepted as long as the roots are real; that regime never
    /// arises from valid [`ModelParams`] and exists for exercising the
    /// double-root branches.
    pub fn new(a: f64, b: f64) -> Result<Self> {
        let s = 1.0 - a;
        let disc = s * s - 4.0 * b;
        if disc < 0.0 || !disc.is_finite() {
            return Err(Error::ComplexRoots { discriminant: disc });
        }
        let sq = disc.sqrt();
        let big = 0.5 * (s + s.signum() * sq);
        let (r1, r2) = if big == 0.0 {
            (0.0, 0.0)
        } else {
            (big, b / big)
        };
        let (beta1, beta2) = if r1 >= r2 { (r1, r2) } else { (r2, r1) };
        Ok(CharPoly { a, b, beta1, beta2 })
    }

    pub fn eval(&self, beta: f64) -> f64 {
        beta * (beta - 1.0) + self.a * beta + self.b
    }

    pub fn derivative(&self, beta: f64, order: u32) -> Result<f64> {
        match order {
            0 => Ok(self.eval(beta)),
            1 => Ok(2.0 * beta - 1.0 + self.a),
            2 => Ok(2.0),
            k => Err(Error::UnsupportedOrder(k)),
        }
    }

    /// `Q'(β)`; infallible shorthand for `derivative(β, 1)`.
    pub fn slope(&self, beta: f64) -> f64 {
        2.0 * beta - 1.0 + self.a
    }

    /// Multiplicity (0, 1 or 2) of `alpha` as a root of `Q`, judged with a
    /// relative tolerance on the scale `max(1, alpha²)`.
    pub fn multiplicity(&self, alpha: f64, tol: f64) -> u8 {
        let scale = alpha.abs().powi(2).max(1.0);
        if self.eval(alpha).abs() > tol * scale {
            0
        } else if self.slope(alpha).abs() <= tol * scale {
            2
        } else {
            1
        }
    }

    /// Like [`CharPoly::multiplicity`] with [`ROOT_TOL`], but refuses
    /// exponents that sit just outside the root tolerance.
    pub fn classify(&self, alpha: f64) -> Result<u8> {
        let scale = alpha.abs().powi(2).max(1.0);
        let q = self.eval(alpha).abs();
        let dq = self.slope(alpha).abs();
        let band = |v: f64| v > ROOT_TOL * scale && v <= ROOT_TOL * AMBIGUITY_FACTOR * scale;
        let m = self.multiplicity(alpha, ROOT_TOL);
        let ambiguous = match m {
            0 => band(q),
            1 => band(dq),
            _ => false,
        };
        if ambiguous || !alpha.is_finite() {
            return Err(Error::AmbiguousMultiplicity { alpha, q, dq });
        }
        Ok(m)
    }
}

/// `q_roots`: roots of the characteristic polynomial for the given coefficients.
pub fn q_roots(coeffs: &OdeCoeffs) -> Result<CharPoly> {
    CharPoly::new(coeffs.a, coeffs.b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn poly(a: f64, b: f64) -> CharPoly {
        CharPoly::new(a, b).unwrap()
    }

    #[test]
    fn coefficients_unit_volatility() {
        let p = ModelParams::new(0.0, 2f64.sqrt(), 1.0, 1.0, 1.0).unwrap();
        let c = derive_coeffs(&p).unwrap();
        // a = 2(0 − 1·1)/2
        assert!((c.a + 1.0).abs() < 1e-14);
        assert!((c.b + 2.0).abs() < 1e-14);
        assert!((c.c + 1.0).abs() < 1e-14);
    }

    #[test]
    fn coefficients_reference_set() {
        let p = ModelParams::new(0.05, 0.2, 0.5, 0.3, 0.1).unwrap();
        let c = derive_coeffs(&p).unwrap();
        assert!((c.a + 5.0).abs() < 1e-12);
        assert!((c.b + 30.0).abs() < 1e-12);
        assert!((c.c + 25.0).abs() < 1e-12);
    }

    #[test]
    fn invalid_parameters_name_the_field() {
        let err = ModelParams::new(0.0, 0.0, 1.0, 1.0, 1.0).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter { name: "sigma", .. }));
        let err = ModelParams::new(0.2, 0.3, 1.0, 1.0, 0.1).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter { name: "r", .. }));
        let err = ModelParams::new(0.0, 0.3, 1.0, -0.5, 0.1).unwrap_err();
        assert!(matches!(err, Error::InvalidParameter { name: "kappa", .. }));
        let err = ModelParams::new(0.0, 0.3, 0.0, 0.5, 0.1).unwrap_err();
        assert!(matches!(
            err,
            Error::InvalidParameter { name: "lambda", .. }
        ));
    }

    #[test]
    fn q_values() {
        assert_eq!(poly(0.0, -2.0).eval(2.0), 0.0);
        assert_eq!(poly(0.0, -2.0).eval(0.0), -2.0);
        assert_eq!(poly(-1.0, 1.0).eval(1.0), 0.0);
    }

    #[test]
    fn q_derivatives() {
        let p = poly(0.0, -2.0);
        assert_eq!(p.derivative(2.0, 1).unwrap(), 3.0);
        assert_eq!(poly(-1.0, 1.0).derivative(1.0, 1).unwrap(), 0.0);
        assert_eq!(p.derivative(17.0, 2).unwrap(), 2.0);
        assert_eq!(p.derivative(2.0, 3), Err(Error::UnsupportedOrder(3)));
    }

    #[test]
    fn roots_of_simple_polys() {
        let p = poly(0.0, -2.0);
        assert_eq!((p.beta1, p.beta2), (2.0, -1.0));
        let p = poly(-1.0, 1.0);
        assert_eq!((p.beta1, p.beta2), (1.0, 1.0));
        assert!(matches!(
            CharPoly::new(0.0, 1.0),
            Err(Error::ComplexRoots { .. })
        ));
    }

    #[test]
    fn roots_reference_set() {
        // β² − 6β − 30: roots 3 ± √39
        let p = poly(-5.0, -30.0);
        assert!((p.beta1 - (3.0 + 39f64.sqrt())).abs() < 1e-13);
        assert!((p.beta2 - (3.0 - 39f64.sqrt())).abs() < 1e-13);
        assert!(p.eval(p.beta1).abs() < 1e-12);
        assert!(p.eval(p.beta2).abs() < 1e-12);
        assert!((p.beta1 + p.beta2 - 6.0).abs() < 1e-13);
        assert!((p.beta1 * p.beta2 + 30.0).abs() < 1e-12);
    }

    #[test]
    fn multiplicities() {
        assert_eq!(poly(0.0, -2.0).multiplicity(2.0, ROOT_TOL), 1);
        assert_eq!(poly(0.0, -2.0).multiplicity(3.0, ROOT_TOL), 0);
        assert_eq!(poly(-1.0, 1.0).multiplicity(1.0, ROOT_TOL), 2);
    }

    #[test]
    fn near_roots_are_refused() {
        let p = poly(0.0, -2.0);
        assert_eq!(p.classify(2.0).unwrap(), 1);
        assert!(matches!(
            p.classify(2.0 + 1e-7),
            Err(Error::AmbiguousMultiplicity { .. })
        ));
        assert_eq!(p.classify(2.0 + 1e-3).unwrap(), 0);
    }

    fn arb_params() -> impl Strategy<Value = ModelParams> {
        (
            -0.5f64..0.5,
            0.01f64..2.0,
            0.001f64..5.0,
            0.001f64..3.0,
            0.001f64..1.0,
        )
            .prop_filter_map("r > mu", |(mu, sigma, lambda, kappa, dr)| {
                ModelParams::new(mu, sigma, lambda, kappa, mu.max(0.0) + dr).ok()
            })
    }

    proptest! {
        #[test]
        fn roots_straddle_zero(p in arb_params()) {
            let c = derive_coeffs(&p).unwrap();
            prop_assert!(c.b < 0.0 && c.c < 0.0);
            let q = q_roots(&c).unwrap();
            prop_assert!(q.beta1 > 0.0 && q.beta2 < 0.0);
            for beta in [q.beta1, q.beta2] {
                // magnitude of the largest term entering the evaluation
                let scale = [1.0, beta * beta, (c.a * beta).abs(), c.b.abs()]
                    .into_iter()
                    .fold(0.0, f64::max);
                prop_assert!(q.eval(beta).abs() <= 4.0 * f64::EPSILON * scale,
                    "Q({}) = {}", beta, q.eval(beta));
            }
            let sum = 1.0 - c.a;
            prop_assert!((q.beta1 + q.beta2 - sum).abs() <= 1e-12 * sum.abs().max(q.beta1));
            prop_assert!((q.beta1 * q.beta2 - c.b).abs() <= 1e-12 * c.b.abs());
        }

        #[test]
        fn slope_matches_finite_difference(a in -10.0f64..10.0, b in -10.0f64..0.0, beta in -5.0f64..5.0) {
            let q = CharPoly::new(a, b).unwrap();
            let h = 1e-6;
            let fd = (q.eval(beta + h) - q.eval(beta - h)) / (2.0 * h);
            prop_assert!((fd - q.derivative(beta, 1).unwrap()).abs() < 1e-6);
        }

        #[test]
        fn multiplicity_ignores_root_labels(a in -10.0f64..10.0, b in -10.0f64..0.0, alpha in -5.0f64..5.0) {
            let q = CharPoly::new(a, b).unwrap();
            let swapped = CharPoly { beta1: q.beta2, beta2: q.beta1, ..q };
            for x in [alpha, q.beta1, q.beta2] {
                prop_assert_eq!(q.multiplicity(x, ROOT_TOL), swapped.multiplicity(x, ROOT_TOL));
            }
        }
    }
}

//! Market model and contract terms.
//!
//! The sub-account follows a jump-diffusion whose log-jump sizes are either
//! normal (Merton) or asymmetric double-exponential (Kou); the short rate is a
//! Vasicek process correlated with the diffusive part of the sub-account.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, GmwbError, Result};

/// Distribution of the log jump multiplier `ln Y`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum JumpSpec {
    None,
    Merton { nu: f64, varsigma: f64 },
    Kou { p_up: f64, eta_up: f64, eta_down: f64 },
}

impl JumpSpec {
    /// Merton parameters used throughout the validation experiments.
    pub fn merton_reference() -> Self {
        JumpSpec::Merton {
            nu: -0.9,
            varsigma: 0.45,
        }
    }

    /// Kou parameters used throughout the validation experiments.
    pub fn kou_reference() -> Self {
        JumpSpec::Kou {
            p_up: 0.3445,
            eta_up: 3.0465,
            eta_down: 3.0775,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            JumpSpec::None => Ok(()),
            JumpSpec::Merton { nu, varsigma } => {
                if !nu.is_finite() {
                    return Err(invalid("nu", "must be finite"));
                }
                if !(varsigma > 0.0 && varsigma.is_finite()) {
                    return Err(invalid("varsigma", format!("must be > 0, got {varsigma}")));
                }
                Ok(())
            }
            JumpSpec::Kou {
                p_up,
                eta_up,
                eta_down,
            } => {
                if !(0.0..=1.0).contains(&p_up) {
                    return Err(invalid("p_up", format!("must lie in [0, 1], got {p_up}")));
                }
                if !(eta_up > 1.0 && eta_up.is_finite()) {
                    return Err(invalid(
                        "eta_up",
                        format!("must be > 1 for a finite mean jump, got {eta_up}"),
                    ));
                }
                if !(eta_down > 0.0 && eta_down.is_finite()) {
                    return Err(invalid("eta_down", format!("must be > 0, got {eta_down}")));
                }
                Ok(())
            }
        }
    }
}

/// Density of the log jump size at `y`.
pub fn jump_density(spec: &JumpSpec, y: f64) -> f64 {
    match *spec {
        JumpSpec::None => 0.0,
        JumpSpec::Merton { nu, varsigma } => {
            let u = (y - nu) / varsigma;
            (-0.5 * u * u).exp() / (varsigma * (2.0 * PI).sqrt())
        }
        JumpSpec::Kou {
            p_up,
            eta_up,
            eta_down,
        } => {
            if y >= 0.0 {
                p_up * eta_up * (-eta_up * y).exp()
            } else {
                (1.0 - p_up) * eta_down * (eta_down * y).exp()
            }
        }
    }
}

/// Fourier transform `∫ b(y) exp(-2πiηy) dy` of the log-jump density.
///
/// With no jumps this returns 1, which keeps the generator formula uniform.
pub fn jump_char(spec: &JumpSpec, eta: f64) -> Complex64 {
    let omega = 2.0 * PI * eta;
    match *spec {
        JumpSpec::None => Complex64::new(1.0, 0.0),
        JumpSpec::Merton { nu, varsigma } => {
            let re = -0.5 * omega * omega * varsigma * varsigma;
            Complex64::new(re, -omega * nu).exp()
        }
        JumpSpec::Kou {
            p_up,
            eta_up,
            eta_down,
        } => {
            let up = Complex64::new(p_up * eta_up, 0.0) / Complex64::new(eta_up, omega);
            let down = Complex64::new((1.0 - p_up) * eta_down, 0.0) / Complex64::new(eta_down, -omega);
            up + down
        }
    }
}

/// Expected relative jump `E[Y - 1]`.
pub fn jump_kappa(spec: &JumpSpec) -> Result<f64> {
    match *spec {
        JumpSpec::None => Ok(0.0),
        JumpSpec::Merton { nu, varsigma } => Ok((nu + 0.5 * varsigma * varsigma).exp() - 1.0),
        JumpSpec::Kou {
            p_up,
            eta_up,
            eta_down,
        } => {
            if eta_up <= 1.0 {
                return Err(invalid(
                    "eta_up",
                    format!("jump multiplier has infinite mean for eta_up = {eta_up} <= 1"),
                ));
            }
            Ok(p_up * eta_up / (eta_up - 1.0) + (1.0 - p_up) * eta_down / (eta_down + 1.0) - 1.0)
        }
    }
}

/// Diffusion, jump and short-rate parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelParams {
    pub sigma_z: f64,
    pub lambda: f64,
    pub jump: JumpSpec,
    pub rho: f64,
    /// Mean-reversion speed of the short rate.
    pub delta: f64,
    /// Long-run mean of the short rate.
    pub theta: f64,
    pub sigma_r: f64,
    /// Proportional insurance fee.
    pub beta: f64,
    /// Short rate at contract inception.
    pub r0: f64,
}

/// Merton validation setup with positive correlation and a 2% fee.
impl Default for ModelParams {
    fn default() -> Self {
        Self::merton_reference(0.2, 0.02)
    }
}

impl ModelParams {
    /// Merton jumps with the reference Vasicek curve.
    pub fn merton_reference(rho: f64, beta: f64) -> Self {
        Self {
            sigma_z: 0.3,
            lambda: 0.1,
            jump: JumpSpec::merton_reference(),
            rho,
            delta: 0.0349,
            theta: 0.05,
            sigma_r: 0.02,
            beta,
            r0: 0.05,
        }
    }

    /// Kou jumps with the reference Vasicek curve.
    pub fn kou_reference(rho: f64, beta: f64) -> Self {
        Self {
            jump: JumpSpec::kou_reference(),
            ..Self::merton_reference(rho, beta)
        }
    }

    pub fn with_beta(mut self, beta: f64) -> Self {
        self.beta = beta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [
            ("sigma_z", self.sigma_z),
            ("lambda", self.lambda),
            ("rho", self.rho),
            ("delta", self.delta),
            ("theta", self.theta),
            ("sigma_r", self.sigma_r),
            ("beta", self.beta),
            ("r0", self.r0),
        ];
        for (name, v) in finite {
            if !v.is_finite() {
                return Err(invalid(name, "must be finite"));
            }
        }
        if self.sigma_z <= 0.0 {
            return Err(invalid("sigma_z", format!("must be > 0, got {}", self.sigma_z)));
        }
        if self.sigma_r < 0.0 {
            return Err(invalid("sigma_r", format!("must be >= 0, got {}", self.sigma_r)));
        }
        if self.delta <= 0.0 {
            return Err(invalid("delta", format!("must be > 0, got {}", self.delta)));
        }
        if self.rho.abs() >= 1.0 {
            return Err(invalid("rho", format!("|rho| must be < 1, got {}", self.rho)));
        }
        if self.lambda < 0.0 {
            return Err(invalid("lambda", format!("must be >= 0, got {}", self.lambda)));
        }
        if self.beta < 0.0 {
            return Err(invalid("beta", format!("must be >= 0, got {}", self.beta)));
        }
        self.jump.validate()?;
        Ok(())
    }

    /// Jump compensator `κ`, zero when the intensity is zero.
    pub fn kappa(&self) -> Result<f64> {
        if self.lambda == 0.0 {
            return Ok(0.0);
        }
        jump_kappa(&self.jump)
    }
}

/// Contract terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Contract {
    pub maturity: f64,
    /// Maximum penalty-free withdrawal rate, in currency per year.
    pub withdraw_rate: f64,
    /// Proportional penalty on withdrawals above the contractual rate.
    pub penalty: f64,
    /// Fixed cost per finite withdrawal.
    pub fixed_cost: f64,
    pub premium: f64,
}

impl Contract {
    /// Reference terms: premium 100 withdrawable over the life of the contract.
    pub fn reference(maturity: f64) -> Self {
        Self {
            maturity,
            withdraw_rate: 100.0 / maturity,
            penalty: 0.1,
            fixed_cost: 1e-8,
            premium: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.maturity > 0.0 && self.maturity.is_finite()) {
            return Err(invalid("maturity", format!("must be > 0, got {}", self.maturity)));
        }
        if !(self.withdraw_rate > 0.0 && self.withdraw_rate.is_finite()) {
            return Err(invalid(
                "withdraw_rate",
                format!("must be > 0, got {}", self.withdraw_rate),
            ));
        }
        if !(self.penalty > 0.0 && self.penalty < 1.0) {
            return Err(invalid(
                "penalty",
                format!("must lie in (0, 1), got {}", self.penalty),
            ));
        }
        if !(self.fixed_cost > 0.0 && self.fixed_cost.is_finite()) {
            return Err(invalid(
                "fixed_cost",
                format!("must be > 0, got {}", self.fixed_cost),
            ));
        }
        if !(self.premium > 0.0 && self.premium.is_finite()) {
            return Err(invalid("premium", format!("must be > 0, got {}", self.premium)));
        }
        Ok(())
    }
}

/// Closed-form Vasicek zero-coupon bond price for time to maturity `tau`.
pub fn bond_price(params: &ModelParams, r: f64, tau: f64) -> f64 {
    if tau <= 0.0 {
        return 1.0;
    }
    let d = params.delta;
    let s2 = params.sigma_r * params.sigma_r;
    let b = -(-d * tau).exp_m1() / d;
    let log_p = (params.theta - s2 / (2.0 * d * d)) * (b - tau) - s2 * b * b / (4.0 * d) - r * b;
    log_p.exp()
}

/// Constant rate giving the same bond price as the Vasicek curve at `r0`.
pub fn comparable_rate(params: &ModelParams, maturity: f64) -> Result<f64> {
    if !(maturity > 0.0) {
        return Err(invalid("maturity", format!("must be > 0, got {maturity}")));
    }
    Ok(-bond_price(params, params.r0, maturity).ln() / maturity)
}

/// Constant volatility matching the total variance of a Merton jump-diffusion.
pub fn effective_vol(sigma_z: f64, lambda: f64, jump: &JumpSpec) -> Result<f64> {
    match *jump {
        JumpSpec::Merton { nu, varsigma } => {
            Ok((sigma_z * sigma_z + lambda * (nu * nu + varsigma * varsigma)).sqrt())
        }
        _ => Err(GmwbError::InvalidParameter {
            name: "jump",
            reason: "effective volatility is defined for Merton jumps only".into(),
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{integrate, integrate_complex};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn table_merton() -> JumpSpec {
        JumpSpec::merton_reference()
    }
    fn table_kou() -> JumpSpec {
        JumpSpec::kou_reference()
    }

    fn density_mass(spec: &JumpSpec) -> f64 {
        integrate(|y| jump_density(spec, y), -20.0, 0.0, 1e-13)
            + integrate(|y| jump_density(spec, y), 0.0, 20.0, 1e-13)
    }

    fn char_by_quadrature(spec: &JumpSpec, eta: f64) -> Complex64 {
        let f = |y: f64| {
            let ph = -2.0 * PI * eta * y;
            Complex64::new(ph.cos(), ph.sin()) * jump_density(spec, y)
        };
        integrate_complex(f, -40.0, 0.0, 1e-13) + integrate_complex(f, 0.0, 40.0, 1e-13)
    }

    fn kappa_by_quadrature(spec: &JumpSpec) -> f64 {
        let f = |y: f64| y.exp_m1() * jump_density(spec, y);
        integrate(f, -40.0, 0.0, 1e-13) + integrate(f, 0.0, 40.0, 1e-13)
    }

    #[test]
    fn density_examples() {
        let std = JumpSpec::Merton {
            nu: 0.0,
            varsigma: 1.0,
        };
        assert_relative_eq!(jump_density(&std, 0.0), 0.398_942_280_401_432_7, epsilon = 1e-15);
        assert_relative_eq!(jump_density(&table_kou(), 0.0), 0.3445 * 3.0465, epsilon = 1e-15);
        assert!((density_mass(&table_merton()) - 1.0).abs() < 1e-10);
        assert!((density_mass(&table_kou()) - 1.0).abs() < 1e-10);
    }

    #[test]
    fn char_matches_quadrature() {
        for (spec, eta) in [(table_merton(), 0.5), (table_kou(), 1.0), (table_kou(), -0.3)] {
            let closed = jump_char(&spec, eta);
            let quad = char_by_quadrature(&spec, eta);
            assert!(
                (closed - quad).norm() < 1e-8,
                "{spec:?} {eta}: {closed} vs {quad}"
            );
        }
        for spec in [JumpSpec::None, table_merton(), table_kou()] {
            assert_eq!(jump_char(&spec, 0.0), Complex64::new(1.0, 0.0));
        }
    }

    #[test]
    fn kappa_examples() {
        assert!((jump_kappa(&table_merton()).unwrap() + 0.5501).abs() < 5e-5);
        assert_eq!(jump_kappa(&JumpSpec::None).unwrap(), 0.0);
        let k = jump_kappa(&table_kou()).unwrap();
        assert!((k - kappa_by_quadrature(&table_kou())).abs() < 1e-8);
        let bad = JumpSpec::Kou {
            p_up: 0.5,
            eta_up: 0.9,
            eta_down: 2.0,
        };
        assert!(jump_kappa(&bad).is_err());
        assert!(bad.validate().is_err());
    }

    #[test]
    fn bond_examples() {
        let p = ModelParams::merton_reference(0.2, 0.02);
        assert_eq!(bond_price(&p, 0.3, 0.0), 1.0);
        let pb = bond_price(&p, 0.05, 10.0);
        assert!((pb / (-0.0448f64 * 10.0).exp() - 1.0).abs() < 1e-3);
        let flat = ModelParams {
            sigma_r: 0.0,
            theta: 0.04,
            ..p
        };
        assert_relative_eq!(
            bond_price(&flat, 0.04, 7.0),
            (-0.28f64).exp(),
            max_relative = 1e-14
        );
    }

    #[test]
    fn comparable_rate_examples() {
        let p = ModelParams::merton_reference(0.2, 0.02);
        assert!((comparable_rate(&p, 5.0).unwrap() - 0.0485).abs() < 5e-4);
        assert!((comparable_rate(&p, 10.0).unwrap() - 0.0448).abs() < 5e-4);
        let flat = ModelParams {
            sigma_r: 0.0,
            theta: 0.03,
            r0: 0.03,
            ..p
        };
        assert_relative_eq!(comparable_rate(&flat, 3.0).unwrap(), 0.03, max_relative = 1e-12);
        assert!(comparable_rate(&p, 0.0).is_err());
    }

    #[test]
    fn effective_vol_examples() {
        assert!((effective_vol(0.3, 0.1, &table_merton()).unwrap() - 0.4373).abs() < 5e-5);
        assert_relative_eq!(effective_vol(0.3, 0.0, &table_merton()).unwrap(), 0.3);
        let unit = JumpSpec::Merton {
            nu: 1.0,
            varsigma: 0.0,
        };
        assert_relative_eq!(effective_vol(0.0, 1.0, &unit).unwrap(), 1.0);
        assert!(effective_vol(0.3, 0.1, &table_kou()).is_err());
    }

    #[test]
    fn param_validation() {
        let p = ModelParams::merton_reference(0.2, 0.02);
        assert!(p.validate().is_ok());
        assert!(ModelParams { rho: 1.0, ..p }.validate().is_err());
        assert!(ModelParams { sigma_z: 0.0, ..p }.validate().is_err());
        assert!(ModelParams { delta: 0.0, ..p }.validate().is_err());
        assert!(ModelParams { beta: -0.1, ..p }.validate().is_err());
        let c = Contract::reference(10.0);
        assert_eq!(c.withdraw_rate, 10.0);
        assert!(c.validate().is_ok());
        assert!(Contract { fixed_cost: 0.0, ..c }.validate().is_err());
        assert!(Contract { penalty: 1.0, ..c }.validate().is_err());
    }

    #[test]
    fn bond_recombines_against_vasicek_mc() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        // p(r, t1 + t2) = E[exp(-∫_0^{t1} R) p(R_{t1}, t2)], integral by fine trapezoid.
        let p = ModelParams::merton_reference(0.0, 0.0);
        let (t1, t2) = (2.0, 3.0);
        let steps = 100;
        let dt = t1 / steps as f64;
        let e = (-p.delta * dt).exp();
        let sd = p.sigma_r * ((1.0 - e * e) / (2.0 * p.delta)).sqrt();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let mut r = p.r0;
            let mut integral = 0.0;
            for _ in 0..steps {
                let g: f64 = StandardNormal.sample(&mut rng);
                let next = p.theta + (r - p.theta) * e + sd * g;
                integral += 0.5 * (r + next) * dt;
                r = next;
            }
            let x = (-integral).exp() * bond_price(&p, r, t2);
            s += x;
            s2 += x * x;
        }
        let mean = s / n as f64;
        let se = ((s2 / n as f64 - mean * mean) / n as f64).sqrt();
        let exact = bond_price(&p, p.r0, t1 + t2);
        assert!(
            (mean - exact).abs() < 3.0 * se + 1e-5,
            "{mean} vs {exact} (se {se})"
        );
    }

    proptest! {
        #[test]
        fn char_modulus_bounded(eta in -50.0f64..50.0, nu in -2.0f64..2.0, vs in 0.01f64..2.0,
                                pu in 0.0f64..1.0, e1 in 1.01f64..20.0, e2 in 0.01f64..20.0) {
            let m = JumpSpec::Merton { nu, varsigma: vs };
            let k = JumpSpec::Kou { p_up: pu, eta_up: e1, eta_down: e2 };
            prop_assert!(jump_char(&m, eta).norm() <= 1.0 + 1e-15);
            prop_assert!(jump_char(&k, eta).norm() <= 1.0 + 1e-15);
        }

        #[test]
        fn kappa_matches_quadrature(nu in -1.5f64..1.0, vs in 0.05f64..1.0,
                                    pu in 0.0f64..1.0, e1 in 2.0f64..15.0, e2 in 0.5f64..15.0) {
            let m = JumpSpec::Merton { nu, varsigma: vs };
            let k = JumpSpec::Kou { p_up: pu, eta_up: e1, eta_down: e2 };
            prop_assert!((jump_kappa(&m).unwrap() - kappa_by_quadrature(&m)).abs() < 1e-8);
            prop_assert!((jump_kappa(&k).unwrap() - kappa_by_quadrature(&k)).abs() < 1e-8);
        }
    }
}

//! Monte Carlo replay of stored withdrawal strategies.
//!
//! Paths of the sub-account, guarantee account and short rate are simulated
//! forward while the holder follows the strategy computed by the PDE solver.
//! The result is an independent estimate of the contract value.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal, Poisson, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{ControlField, Solution};
use crate::error::{invalid, GmwbError, Result};
use crate::grid::Grid;
use crate::interp::Bracket;
use crate::model::{Contract, JumpSpec, ModelParams};
use crate::timestep::cashflow_f;

/// Generator used for every path; recorded in run output.
pub const RNG_NAME: &str = "chacha8, one stream per antithetic pair";

/// Two-sided 95% normal quantile.
const Z95: f64 = 1.959_963_984_540_054;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct McConfig {
    /// Total number of simulated paths, counting both members of a pair.
    pub n_paths: usize,
    /// Simulation substeps per PDE timestep.
    pub substeps: usize,
    pub seed: u64,
    pub antithetic: bool,
}

impl Default for McConfig {
    fn default() -> Self {
        Self {
            n_paths: 100_000,
            substeps: 20,
            seed: 20_240_601,
            antithetic: true,
        }
    }
}

impl McConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_paths < 100 {
            return Err(invalid(
                "n_paths",
                format!("must be >= 100, got {}", self.n_paths),
            ));
        }
        if self.substeps == 0 {
            return Err(invalid("substeps", "must be >= 1"));
        }
        Ok(())
    }

    /// Independent samples: pairs when antithetic, otherwise paths.
    fn samples(&self) -> usize {
        if self.antithetic {
            self.n_paths / 2
        } else {
            self.n_paths
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct McResult {
    pub mean: f64,
    pub std_error: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// Independent samples behind the estimate.
    pub samples: usize,
}

impl McResult {
    fn from_samples(values: &[f64]) -> Self {
        // Welford keeps identical samples exact, so degenerate runs report SE 0.
        let (mut mean, mut m2) = (0.0, 0.0);
        for (i, &x) in values.iter().enumerate() {
            let d = x - mean;
            mean += d / (i + 1) as f64;
            m2 += d * (x - mean);
        }
        let n = values.len();
        let var = if n > 1 { m2 / (n - 1) as f64 } else { 0.0 };
        let std_error = (var / n as f64).sqrt();
        Self {
            mean,
            std_error,
            ci_low: mean - Z95 * std_error,
            ci_high: mean + Z95 * std_error,
            samples: n,
        }
    }

    pub fn contains(&self, x: f64) -> bool {
        self.ci_low <= x && x <= self.ci_high
    }
}

/// Exact Vasicek transition over `dt` driven by the standard normal `draw`.
pub fn vasicek_step(r: f64, dt: f64, params: &ModelParams, draw: f64) -> f64 {
    let decay = (-params.delta * dt).exp();
    let sd = params.sigma_r * (-(-2.0 * params.delta * dt).exp_m1() / (2.0 * params.delta)).sqrt();
    params.theta + (r - params.theta) * decay + sd * draw
}

/// Random inputs of one sub-account substep.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SubAccountDraws {
    /// Normal driving the sub-account independently of the rate.
    pub own: f64,
    /// Normal driving the short rate over the same substep.
    pub rate: f64,
    /// Sum of log jump multipliers over the substep.
    pub log_jumps: f64,
}

/// One log-Euler step of the sub-account at average rate `r` with a
/// continuous withdrawal of `withdrawal` (already `rate * dt`, zero once the
/// sub-account or the guarantee is exhausted). Floored at zero.
pub fn sub_account_step(
    z: f64,
    r: f64,
    dt: f64,
    params: &ModelParams,
    kappa: f64,
    draws: SubAccountDraws,
    withdrawal: f64,
) -> f64 {
    if z <= 0.0 {
        return 0.0;
    }
    let s = params.sigma_z;
    let shock = params.rho * draws.rate + (1.0 - params.rho * params.rho).sqrt() * draws.own;
    let drift = (r - params.beta - params.lambda * kappa - 0.5 * s * s) * dt;
    let grown = z * (drift + s * dt.sqrt() * shock + draws.log_jumps).exp();
    (grown - withdrawal).max(0.0)
}

/// Decision of the holder at a withdrawal date.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Withdrawal {
    /// Continuous withdrawal of `γ` spread over the following interval.
    Rate(f64),
    /// Immediate withdrawal of `γ`, penalised above the contractual amount.
    Finite(f64),
}

/// Strategy followed along simulated paths.
pub trait WithdrawalPolicy: Sync {
    /// Decision at step `m`, calendar time `T - τ_m`, in state `(z, r, a)`.
    fn decide(&self, m: usize, z: f64, r: f64, a: f64) -> Result<Withdrawal>;
}

/// Strategy read from controls stored by a solve.
///
/// The eight lattice corners around a state may disagree on the branch. The
/// branch carrying more interpolation weight wins, ties going to the
/// continuous rate, and its amount is the weighted mean over the corners of
/// that branch.
pub struct StoredPolicy<'a> {
    grid: &'a Grid,
    controls: &'a ControlField,
}

impl<'a> StoredPolicy<'a> {
    pub fn new(grid: &'a Grid, controls: &'a ControlField) -> Self {
        Self { grid, controls }
    }
}

impl WithdrawalPolicy for StoredPolicy<'_> {
    fn decide(&self, m: usize, z: f64, r: f64, a: f64) -> Result<Withdrawal> {
        let (g, c) = (self.grid, self.controls);
        let layer = c.layer(m)?;
        let w = if z > 0.0 { z.ln() } else { f64::NEG_INFINITY };
        let bw = Bracket::uniform(w, g.w_lo, g.dw, c.nw);
        let br = Bracket::uniform(r, g.r_nodes[c.r_offset], g.dr, c.nr);
        let ba = Bracket::search(a, &g.a_nodes);
        let (mut w_fin, mut s_fin, mut w_loc, mut s_loc) = (0.0, 0.0, 0.0, 0.0);
        for (dj, fa) in [(0, 1.0 - ba.frac), (1, ba.frac)] {
            for (dn, fw) in [(0, 1.0 - bw.frac), (1, bw.frac)] {
                for (dk, fr) in [(0, 1.0 - br.frac), (1, br.frac)] {
                    let wt = fa * fw * fr;
                    if wt == 0.0 {
                        continue;
                    }
                    let idx = ((ba.lo + dj) * c.nw + bw.lo + dn) * c.nr + br.lo + dk;
                    let v = layer[idx] as f64;
                    if v < 0.0 {
                        w_fin += wt;
                        s_fin -= wt * v;
                    } else {
                        w_loc += wt;
                        s_loc += wt * v;
                    }
                }
            }
        }
        Ok(if w_fin > w_loc {
            Withdrawal::Finite(s_fin / w_fin)
        } else {
            Withdrawal::Rate(if w_loc > 0.0 { s_loc / w_loc } else { 0.0 })
        })
    }
}

/// Time grid and contract of a replay.
#[derive(Debug, Clone, Copy)]
pub struct Schedule {
    pub steps: usize,
    pub dtau: f64,
}

/// Replay the controls stored in `sol`. Every step must have been stored.
pub fn replay(sol: &Solution, cfg: &McConfig) -> Result<McResult> {
    let controls = sol.controls.as_ref().ok_or(GmwbError::ControlsNotStored(0))?;
    for m in 0..sol.grid.n_tau {
        controls.layer(m)?;
    }
    let policy = StoredPolicy::new(&sol.grid, controls);
    let schedule = Schedule {
        steps: sol.grid.n_tau,
        dtau: sol.grid.dtau,
    };
    simulate(&policy, &sol.params, &sol.contract, schedule, cfg)
}

/// Value of following `policy` from the contract's initial state.
pub fn simulate<P: WithdrawalPolicy>(
    policy: &P,
    params: &ModelParams,
    contract: &Contract,
    schedule: Schedule,
    cfg: &McConfig,
) -> Result<McResult> {
    cfg.validate()?;
    contract.validate()?;
    if schedule.steps == 0 || !(schedule.dtau > 0.0) {
        return Err(invalid("schedule", "needs at least one step of positive length"));
    }
    let jumps = JumpSampler::new(params, schedule.dtau / cfg.substeps as f64)?;
    let sim = PathSimulator {
        policy,
        params,
        contract,
        schedule,
        substeps: cfg.substeps,
        kappa: params.kappa()?,
        jumps,
    };
    let values: Vec<f64> = (0..cfg.samples())
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            if cfg.antithetic {
                sim.pair(&mut rng).map(|(x, y)| 0.5 * (x + y))
            } else {
                sim.pair_single(&mut rng)
            }
        })
        .collect::<Result<_>>()?;
    Ok(McResult::from_samples(&values))
}

/// Sum of log jump multipliers over one substep.
enum JumpSampler {
    None,
    Merton {
        count: Poisson<f64>,
        size: Normal<f64>,
    },
    Kou {
        count: Poisson<f64>,
        p_up: f64,
        up: Exp<f64>,
        down: Exp<f64>,
    },
}

impl JumpSampler {
    fn new(params: &ModelParams, dt: f64) -> Result<Self> {
        if params.lambda == 0.0 {
            return Ok(Self::None);
        }
        let count = Poisson::new(params.lambda * dt).map_err(|e| invalid("lambda", e.to_string()))?;
        Ok(match params.jump {
            JumpSpec::None => Self::None,
            JumpSpec::Merton { nu, varsigma } => Self::Merton {
                count,
                size: Normal::new(nu, varsigma).map_err(|e| invalid("varsigma", e.to_string()))?,
            },
            JumpSpec::Kou {
                p_up,
                eta_up,
                eta_down,
            } => Self::Kou {
                count,
                p_up,
                up: Exp::new(eta_up).map_err(|e| invalid("eta_up", e.to_string()))?,
                down: Exp::new(eta_down).map_err(|e| invalid("eta_down", e.to_string()))?,
            },
        })
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match self {
            Self::None => 0.0,
            Self::Merton { count, size } => (0..count.sample(rng) as usize).map(|_| size.sample(rng)).sum(),
            Self::Kou {
                count,
                p_up,
                up,
                down,
            } => (0..count.sample(rng) as usize)
                .map(|_| {
                    let u: f64 = rand::Rng::gen(rng);
                    if u < *p_up {
                        up.sample(rng)
                    } else {
                        -down.sample(rng)
                    }
                })
                .sum(),
        }
    }
}

struct PathSimulator<'a, P> {
    policy: &'a P,
    params: &'a ModelParams,
    contract: &'a Contract,
    schedule: Schedule,
    substeps: usize,
    kappa: f64,
    jumps: JumpSampler,
}

#[derive(Debug, Clone, Copy)]
struct PathState {
    z: f64,
    a: f64,
    r: f64,
    /// Discount factor `exp(-∫ r dt)` to the current time.
    disc: f64,
    /// Present value of cash received so far.
    cash: f64,
    /// Continuous withdrawal per unit time over the current interval.
    rate: f64,
}

impl<P: WithdrawalPolicy> PathSimulator<'_, P> {
    fn start(&self) -> PathState {
        PathState {
            z: self.contract.premium,
            a: self.contract.premium,
            r: self.params.r0,
            disc: 1.0,
            cash: 0.0,
            rate: 0.0,
        }
    }

    /// Antithetic pair sharing jumps, with both Wiener drivers mirrored.
    fn pair(&self, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
        let mut x = self.start();
        let mut y = self.start();
        let (steps, dtau) = (self.schedule.steps, self.schedule.dtau);
        let dt = dtau / self.substeps as f64;
        for mp in 1..=steps {
            for _ in 0..self.substeps {
                let own: f64 = StandardNormal.sample(rng);
                let rate: f64 = StandardNormal.sample(rng);
                let log_jumps = self.jumps.sample(rng);
                self.advance(&mut x, dt, SubAccountDraws { own, rate, log_jumps });
                self.advance(
                    &mut y,
                    dt,
                    SubAccountDraws {
                        own: -own,
                        rate: -rate,
                        log_jumps,
                    },
                );
            }
            self.intervene(&mut x, steps - mp, mp == steps)?;
            self.intervene(&mut y, steps - mp, mp == steps)?;
        }
        Ok((self.terminal(&x), self.terminal(&y)))
    }

    fn pair_single(&self, rng: &mut ChaCha8Rng) -> Result<f64> {
        let mut x = self.start();
        let (steps, dtau) = (self.schedule.steps, self.schedule.dtau);
        let dt = dtau / self.substeps as f64;
        for mp in 1..=steps {
            for _ in 0..self.substeps {
                let own: f64 = StandardNormal.sample(rng);
                let rate: f64 = StandardNormal.sample(rng);
                let log_jumps = self.jumps.sample(rng);
                self.advance(&mut x, dt, SubAccountDraws { own, rate, log_jumps });
            }
            self.intervene(&mut x, steps - mp, mp == steps)?;
        }
        Ok(self.terminal(&x))
    }

    fn advance(&self, s: &mut PathState, dt: f64, draws: SubAccountDraws) {
        let r_next = vasicek_step(s.r, dt, self.params, draws.rate);
        let r_avg = 0.5 * (s.r + r_next);
        let paid = if s.a > 0.0 { (s.rate * dt).min(s.a) } else { 0.0 };
        let from_z = if s.z > 0.0 { paid } else { 0.0 };
        s.z = sub_account_step(s.z, r_avg, dt, self.params, self.kappa, draws, from_z);
        s.a -= paid;
        s.disc *= (-r_avg * dt).exp();
        s.cash += s.disc * paid;
        s.r = r_next;
    }

    /// Withdrawal decision at step `m`. A continuous rate chosen at the last
    /// date has no interval left and is paid at once.
    fn intervene(&self, s: &mut PathState, m: usize, last: bool) -> Result<()> {
        let dtau = self.schedule.dtau;
        let free = self.contract.withdraw_rate * dtau;
        s.rate = 0.0;
        match self.policy.decide(m, s.z, s.r, s.a)? {
            Withdrawal::Rate(g) => {
                let g = g.clamp(0.0, free.min(s.a));
                if last {
                    self.lump(s, g);
                } else {
                    s.rate = g / dtau;
                }
            }
            Withdrawal::Finite(g) => {
                let g = g.clamp(0.0, s.a);
                self.lump(s, g);
            }
        }
        Ok(())
    }

    fn lump(&self, s: &mut PathState, g: f64) {
        if g <= 0.0 {
            return;
        }
        s.cash += s.disc * cashflow_f(g, self.contract, self.schedule.dtau);
        s.a -= g;
        s.z = (s.z - g).max(0.0);
    }

    fn terminal(&self, s: &PathState) -> f64 {
        let c = self.contract;
        s.cash + s.disc * s.z.max((1.0 - c.penalty) * s.a - c.fixed_cost)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct MaxRate(f64);
    impl WithdrawalPolicy for MaxRate {
        fn decide(&self, _: usize, _: f64, _: f64, _: f64) -> Result<Withdrawal> {
            Ok(Withdrawal::Rate(self.0))
        }
    }

    struct Never;
    impl WithdrawalPolicy for Never {
        fn decide(&self, _: usize, _: f64, _: f64, _: f64) -> Result<Withdrawal> {
            Ok(Withdrawal::Rate(0.0))
        }
    }

    fn quiet(r: f64) -> ModelParams {
        ModelParams {
            sigma_z: 0.0,
            lambda: 0.0,
            sigma_r: 0.0,
            theta: r,
            r0: r,
            beta: 0.0,
            ..ModelParams::merton_reference(0.0, 0.0)
        }
    }

    #[test]
    fn vasicek_examples() {
        let p = ModelParams {
            sigma_r: 0.0,
            ..ModelParams::merton_reference(0.2, 0.02)
        };
        let r = vasicek_step(0.1, 0.5, &p, 1.7);
        assert!((r - (p.theta + (0.1 - p.theta) * (-p.delta * 0.5).exp())).abs() < 1e-15);
        let p = ModelParams::merton_reference(0.2, 0.02);
        assert_eq!(vasicek_step(p.theta, 0.3, &p, 0.0), p.theta);
    }

    #[test]
    fn vasicek_moments() {
        let p = ModelParams {
            delta: 0.8,
            sigma_r: 0.05,
            ..ModelParams::merton_reference(0.2, 0.02)
        };
        let (r0, dt, n) = (0.01, 0.7, 1_000_000);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let xs: Vec<f64> = (0..n)
            .map(|_| vasicek_step(r0, dt, &p, StandardNormal.sample(&mut rng)))
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        // Exact transition moments from the integrated SDE.
        let m = p.theta + (r0 - p.theta) * (-p.delta * dt).exp();
        let v = p.sigma_r.powi(2) * (1.0 - (-2.0 * p.delta * dt).exp()) / (2.0 * p.delta);
        let se_mean = (v / n as f64).sqrt();
        let se_var = v * (2.0 / (n - 1) as f64).sqrt();
        assert!((mean - m).abs() < 4.0 * se_mean, "{mean} vs {m}");
        assert!((var - v).abs() < 4.0 * se_var, "{var} vs {v}");
    }

    #[test]
    fn deterministic_drift_and_crash() {
        let p = quiet(0.04).with_beta(0.01);
        let z = sub_account_step(100.0, 0.04, 0.5, &p, 0.0, SubAccountDraws::default(), 0.0);
        assert!((z - 100.0 * (0.03f64 * 0.5).exp()).abs() < 1e-12);
        let crash = SubAccountDraws {
            log_jumps: -60.0,
            ..Default::default()
        };
        let z = sub_account_step(100.0, 0.04, 0.01, &p, 0.0, crash, 0.2);
        assert_eq!(z, 0.0);
        assert_eq!(
            sub_account_step(0.0, 0.04, 0.01, &p, 0.0, SubAccountDraws::default(), 0.0),
            0.0
        );
    }

    #[test]
    fn discounted_balance_is_a_martingale() {
        let p = ModelParams {
            lambda: 0.0,
            beta: 0.0,
            ..ModelParams::merton_reference(0.2, 0.0)
        };
        let (z0, dt, steps) = (100.0, 0.05, 100);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let path = |sign: f64, draws: &[(f64, f64)]| {
            let (mut z, mut r, mut disc) = (z0, p.r0, 1.0);
            for &(own, rate) in draws {
                let r_next = vasicek_step(r, dt, &p, sign * rate);
                let r_avg = 0.5 * (r + r_next);
                let d = SubAccountDraws {
                    own: sign * own,
                    rate: sign * rate,
                    log_jumps: 0.0,
                };
                z = sub_account_step(z, r_avg, dt, &p, 0.0, d, 0.0);
                disc *= (-r_avg * dt).exp();
                r = r_next;
            }
            disc * z
        };
        let pairs: Vec<f64> = (0..50_000)
            .map(|_| {
                let draws: Vec<(f64, f64)> = (0..steps)
                    .map(|_| (StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)))
                    .collect();
                0.5 * (path(1.0, &draws) + path(-1.0, &draws))
            })
            .collect();
        let res = McResult::from_samples(&pairs);
        assert!(
            (res.mean - z0).abs() < 3.0 * res.std_error,
            "{} +- {}",
            res.mean,
            res.std_error
        );
    }

    #[test]
    fn deterministic_annuity() {
        let r = 0.05;
        let p = quiet(r);
        let c = Contract::reference(5.0);
        let sched = Schedule {
            steps: 20,
            dtau: 0.25,
        };
        let cfg = McConfig {
            n_paths: 200,
            substeps: 7,
            ..Default::default()
        };
        let res = simulate(&MaxRate(c.withdraw_rate * sched.dtau), &p, &c, sched, &cfg).unwrap();
        // Withdrawals come out of a sub-account growing at r, so the present
        // value of cash plus the terminal balance is the premium.
        assert_eq!(res.std_error, 0.0);
        assert!((res.mean - c.premium).abs() < 1e-9, "{}", res.mean);

        // With a zero rate every cash flow is undiscounted: the whole
        // guarantee is paid out and the sub-account ends empty.
        let p = quiet(0.0).with_beta(0.2);
        let res = simulate(&MaxRate(c.withdraw_rate * sched.dtau), &p, &c, sched, &cfg).unwrap();
        assert!((res.mean - c.premium).abs() < 1e-9, "{}", res.mean);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let p = ModelParams::kou_reference(-0.2, 0.02);
        let c = Contract::reference(5.0);
        let cfg = McConfig {
            n_paths: 400,
            substeps: 3,
            seed: 11,
            antithetic: true,
        };
        let pol = MaxRate(1.0);
        let s = Schedule { steps: 10, dtau: 0.5 };
        let a = simulate(&pol, &p, &c, s, &cfg).unwrap();
        let b = simulate(&pol, &p, &c, s, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a.ci_low <= a.mean && a.mean <= a.ci_high);
        let other = simulate(&pol, &p, &c, s, &McConfig { seed: 12, ..cfg }).unwrap();
        assert_ne!(a.mean, other.mean);
    }

    #[test]
    fn antithetic_reduces_variance() {
        let p = ModelParams::merton_reference(0.2, 0.02);
        let c = Contract::reference(5.0);
        let s = Schedule {
            steps: 20,
            dtau: 0.25,
        };
        let base = McConfig {
            n_paths: 20_000,
            substeps: 2,
            seed: 3,
            antithetic: true,
        };
        let anti = simulate(&Never, &p, &c, s, &base).unwrap();
        let plain = simulate(
            &Never,
            &p,
            &c,
            s,
            &McConfig {
                antithetic: false,
                ..base
            },
        )
        .unwrap();
        assert!(
            anti.std_error <= plain.std_error,
            "{} vs {}",
            anti.std_error,
            plain.std_error
        );
    }

    #[test]
    fn rejects_bad_config() {
        let p = ModelParams::merton_reference(0.2, 0.02);
        let c = Contract::reference(5.0);
        let s = Schedule { steps: 4, dtau: 0.25 };
        for cfg in [
            McConfig {
                n_paths: 50,
                ..Default::default()
            },
            McConfig {
                substeps: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(
                simulate(&Never, &p, &c, s, &cfg),
                Err(GmwbError::InvalidParameter { .. })
            ));
        }
    }
}

//! Green's function weights for one timestep of the jump-diffusion operator
//! left over after the semi-Lagrangian shift.
//!
//! The Green's function is known in closed form only in Fourier space. Its
//! projection onto the piecewise-linear basis is recovered from a truncated
//! Fourier series whose length is doubled until the weights are
//! non-negative up to a tolerance and stop changing.

use std::f64::consts::PI;

use num_complex::Complex64;
use serde::Serialize;

use crate::error::{invalid, GmwbError, Result};
use crate::fft2::Fft2;
use crate::grid::Grid;
use crate::model::{jump_char, ModelParams};

/// Smallest rate volatility used inside the Fourier exponent. A rate
/// volatility of exactly zero bypasses it: the weights then use the exact
/// constant-rate limit, which is the identity along `r`.
pub const SIGMA_R_FLOOR: f64 = 1e-4;

/// Exponents below this underflow to zero in `exp`.
const EXP_FLOOR: f64 = -745.0;

/// Fourier-domain weights ready for repeated convolution.
#[derive(Debug, Clone)]
pub struct KernelWeights {
    pub nw: usize,
    pub nr: usize,
    /// Fourier-domain multipliers, in unshifted DFT order.
    pub fourier: Vec<Complex64>,
    /// Projected physical weights, in unshifted DFT order.
    pub physical: Vec<f64>,
    pub alpha: usize,
    /// Negative mass `ΔwΔr Σ |min(g, 0)|`.
    pub monotonicity_defect: f64,
    /// `ΔwΔr Σ |g(α) - g(α/2)|` at acceptance.
    pub accuracy_residual: f64,
    /// `|ΔwΔr Σ g - 1|`.
    pub weight_sum_error: f64,
    /// Largest discarded imaginary part of the physical weights.
    pub imag_residue: f64,
    pub dtau: f64,
}

/// Diagnostics of the selection loop, one entry per tried multiple.
#[derive(Debug, Clone, Serialize)]
pub struct AlphaTrial {
    pub alpha: usize,
    pub negative_mass: f64,
    pub difference: f64,
}

/// Fourier symbol of the diffusion-plus-jump operator.
pub fn psi(params: &ModelParams, kappa: f64, eta: f64, xi: f64) -> Complex64 {
    let omega = 2.0 * PI * eta;
    let zeta = 2.0 * PI * xi;
    let sz = params.sigma_z;
    let sr = params.sigma_r.max(SIGMA_R_FLOOR);
    let diffusion =
        -0.5 * sz * sz * omega * omega - params.rho * sz * sr * omega * zeta - 0.5 * sr * sr * zeta * zeta;
    let lam = params.lambda;
    let jumps = if lam > 0.0 {
        Complex64::new(-lam, -lam * kappa * omega) + lam * jump_char(&params.jump, eta).conj()
    } else {
        Complex64::new(0.0, 0.0)
    };
    Complex64::new(diffusion, 0.0) + jumps
}

#[inline]
fn sinc2(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let s = x.sin() / x;
        s * s
    }
}

/// Linear-basis projection factor `tg(s, z)` for frequency indices `(s, z)`.
pub fn projection_factor(grid: &Grid, s: i64, z: i64) -> f64 {
    sinc2(PI * s as f64 / grid.nw_total as f64) * sinc2(PI * z as f64 / grid.nr_total as f64)
}

/// Fourier coefficients of the truncated series folded onto the lattice:
/// entry `(s mod N†, z mod K†)` sums all retained frequencies in that class.
fn folded_series(grid: &Grid, params: &ModelParams, alpha: usize) -> Result<Vec<Complex64>> {
    let (nw, nr) = (grid.nw_total, grid.nr_total);
    let span_w = alpha
        .checked_mul(nw)
        .ok_or_else(|| GmwbError::SizeOverflow(format!("alpha {alpha} x {nw}")))?;
    let span_r = alpha
        .checked_mul(nr)
        .ok_or_else(|| GmwbError::SizeOverflow(format!("alpha {alpha} x {nr}")))?;
    if span_w > (1usize << 40) || span_r > (1usize << 40) {
        return Err(GmwbError::SizeOverflow(format!(
            "series length {span_w} x {span_r}"
        )));
    }
    let kappa = params.kappa()?;
    let dtau = grid.dtau;
    let period_w = grid.w_hi - grid.w_lo;
    let period_r = grid.r_hi - grid.r_lo;
    let sz = params.sigma_z;
    let constant_rate = params.sigma_r == 0.0;
    let sr = if constant_rate {
        0.0
    } else {
        params.sigma_r.max(SIGMA_R_FLOOR)
    };
    let shrink = 1.0 - params.rho.abs();
    let cross = -dtau * params.rho * sz * sr;

    let (lo_w, lo_r) = (-(span_w as i64) / 2, -(span_r as i64) / 2);

    // Per-frequency factors along r: folded index, angular frequency, sinc², exponent.
    let r_terms: Vec<(usize, f64, f64, f64)> = if constant_rate {
        // The kernel is a point mass in r, which no truncation resolves. Its
        // aliases are summed in closed form instead: sum_k sinc²(π(x + k)) = 1.
        (0..nr).map(|zi| (zi, 0.0, 1.0, 0.0)).collect()
    } else {
        (0..span_r as i64)
            .map(|i| {
                let z = lo_r + i;
                let zeta = 2.0 * PI * z as f64 / period_r;
                let tg = sinc2(PI * z as f64 / nr as f64);
                let quad = -0.5 * dtau * sr * sr * zeta * zeta;
                (z.rem_euclid(nr as i64) as usize, zeta, tg, quad)
            })
            .collect()
    };

    let mut folded = vec![Complex64::default(); nw * nr];
    for i in 0..span_w as i64 {
        let s = lo_w + i;
        let tg_w = sinc2(PI * s as f64 / nw as f64);
        if tg_w == 0.0 {
            continue;
        }
        let eta = s as f64 / period_w;
        let omega = 2.0 * PI * eta;
        // Real part of the exponent is at most this bound for any z.
        let bound_w = -0.5 * dtau * shrink * sz * sz * omega * omega;
        if bound_w < EXP_FLOOR {
            continue;
        }
        let psi_w = psi(
            &ModelParams {
                sigma_r: 0.0,
                rho: 0.0,
                ..*params
            },
            kappa,
            eta,
            0.0,
        ) * dtau;
        let phase = Complex64::new(psi_w.im.cos(), psi_w.im.sin()) * tg_w;
        let row = s.rem_euclid(nw as i64) as usize * nr;
        for &(zi, zeta, tg_r, quad_r) in &r_terms {
            if tg_r == 0.0 {
                continue;
            }
            let expo = psi_w.re + quad_r + cross * omega * zeta;
            if expo < EXP_FLOOR {
                continue;
            }
            folded[row + zi] += phase * (tg_r * expo.exp());
        }
    }
    Ok(folded)
}

/// Projected physical weights for truncation multiple `alpha`, with the
/// largest imaginary part that was discarded.
pub fn weights_physical(grid: &Grid, params: &ModelParams, alpha: usize) -> Result<(Vec<f64>, f64)> {
    if alpha == 0 || !alpha.is_power_of_two() {
        return Err(invalid("alpha", format!("must be a power of two, got {alpha}")));
    }
    let mut buf = folded_series(grid, params, alpha)?;
    let mut fft = Fft2::new(grid.nw_total, grid.nr_total);
    fft.inverse(&mut buf)?;
    let scale = 1.0 / ((grid.w_hi - grid.w_lo) * (grid.r_hi - grid.r_lo));
    let mut imag: f64 = 0.0;
    let g = buf
        .iter()
        .map(|c| {
            imag = imag.max((c.im * scale).abs());
            c.re * scale
        })
        .collect();
    Ok((g, imag))
}

/// Negative mass of the weights.
pub fn monotonicity_defect(grid: &Grid, g: &[f64]) -> f64 {
    grid.dw * grid.dr * g.iter().map(|v| (-v).max(0.0)).sum::<f64>()
}

/// `|ΔwΔr Σ g - 1|`; by periodicity the same for every output node.
pub fn weight_sum_error(grid: &Grid, g: &[f64]) -> f64 {
    (grid.dw * grid.dr * g.iter().sum::<f64>() - 1.0).abs()
}

fn l1_difference(grid: &Grid, a: &[f64], b: &[f64]) -> f64 {
    grid.dw * grid.dr * a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Selection settings for the truncation multiple.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, serde::Deserialize)]
pub struct KernelTolerances {
    /// Allowed negative mass, scaled by `Δτ/T`.
    pub eps: f64,
    /// Allowed change between successive multiples.
    pub eps1: f64,
    pub alpha_cap: usize,
}

impl Default for KernelTolerances {
    fn default() -> Self {
        Self {
            eps: 1e-6,
            eps1: 1e-6,
            alpha_cap: 64,
        }
    }
}

/// Double the truncation multiple until both tolerances are met, then
/// return the Fourier-domain weights.
pub fn select_weights(grid: &Grid, params: &ModelParams, tol: &KernelTolerances) -> Result<KernelWeights> {
    select_weights_traced(grid, params, tol).map(|(w, _)| w)
}

/// As [`select_weights`], also returning every trial.
pub fn select_weights_traced(
    grid: &Grid,
    params: &ModelParams,
    tol: &KernelTolerances,
) -> Result<(KernelWeights, Vec<AlphaTrial>)> {
    params.validate()?;
    if !(tol.eps > 0.0 && tol.eps1 > 0.0) {
        return Err(invalid("eps", "tolerances must be > 0"));
    }
    if tol.alpha_cap < 2 {
        return Err(invalid("alpha_cap", "must be >= 2"));
    }
    let neg_tol = tol.eps * grid.dtau / grid.maturity;
    let (mut prev, _) = weights_physical(grid, params, 1)?;
    let mut trials = Vec::new();
    let mut alpha = 2;
    loop {
        let (g, imag) = weights_physical(grid, params, alpha)?;
        let negative_mass = monotonicity_defect(grid, &g);
        let difference = l1_difference(grid, &g, &prev);
        trials.push(AlphaTrial {
            alpha,
            negative_mass,
            difference,
        });
        log::debug!("alpha {alpha}: negative mass {negative_mass:.3e}, difference {difference:.3e}");
        if negative_mass < neg_tol && difference < tol.eps1 {
            let gmax = g.iter().fold(0.0f64, |m, v| m.max(v.abs()));
            if imag > 1e-10 * gmax.max(1.0) {
                return Err(GmwbError::KernelNotConverged {
                    alpha,
                    negative_mass,
                    difference,
                });
            }
            let weights = finish(grid, g, alpha, negative_mass, difference, imag)?;
            return Ok((weights, trials));
        }
        if alpha * 2 > tol.alpha_cap {
            return Err(GmwbError::KernelNotConverged {
                alpha,
                negative_mass,
                difference,
            });
        }
        prev = g;
        alpha *= 2;
    }
}

fn finish(
    grid: &Grid,
    g: Vec<f64>,
    alpha: usize,
    defect: f64,
    residual: f64,
    imag: f64,
) -> Result<KernelWeights> {
    let scale = grid.dw * grid.dr;
    let mut fourier: Vec<Complex64> = g.iter().map(|&v| Complex64::new(v * scale, 0.0)).collect();
    Fft2::new(grid.nw_total, grid.nr_total).forward(&mut fourier)?;
    Ok(KernelWeights {
        nw: grid.nw_total,
        nr: grid.nr_total,
        fourier,
        weight_sum_error: weight_sum_error(grid, &g),
        physical: g,
        alpha,
        monotonicity_defect: defect,
        accuracy_residual: residual,
        imag_residue: imag,
        dtau: grid.dtau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, GridConfig};
    use crate::model::{Contract, JumpSpec};
    use crate::testutil::integrate_panels;
    use proptest::prelude::*;

    fn level_grid(level: usize) -> Grid {
        let c = Contract::reference(5.0);
        build_grid(&GridConfig::level(level, &c).unwrap(), &c).unwrap()
    }

    #[test]
    fn psi_examples() {
        let p = ModelParams::merton_reference(0.2, 0.02);
        let k = p.kappa().unwrap();
        assert!(psi(&p, k, 0.0, 0.0).norm() < 1e-15);
        let diff = ModelParams {
            lambda: 0.0,
            rho: 0.0,
            ..p
        };
        let (eta, xi) = (0.7, -1.3);
        let expect = -0.5 * 0.09 * (2.0 * PI * eta).powi(2) - 0.5 * 0.0004 * (2.0 * PI * xi).powi(2);
        assert!((psi(&diff, 0.0, eta, xi) - expect).norm() < 1e-12);
    }

    #[test]
    fn psi_term_by_term() {
        use crate::model::jump_density;
        use crate::testutil::integrate_complex;
        let p = ModelParams::merton_reference(-0.2, 0.02);
        let kappa = crate::model::jump_kappa(&p.jump).unwrap();
        // Conjugate characteristic function by direct quadrature.
        let conj_b = integrate_complex(
            |y| {
                let ph = 2.0 * PI * y;
                Complex64::new(ph.cos(), ph.sin()) * jump_density(&p.jump, y)
            },
            -30.0,
            30.0,
            1e-14,
        );
        let (w, z) = (2.0 * PI, 2.0 * PI);
        let expect = Complex64::new(
            -0.5 * 0.09 * w * w - (-0.2) * 0.3 * 0.02 * w * z - 0.5 * 0.0004 * z * z - 0.1,
            -0.1 * kappa * w,
        ) + 0.1 * conj_b;
        assert!((psi(&p, kappa, 1.0, 1.0) - expect).norm() < 1e-10);
    }

    #[test]
    fn projection_factor_at_zero() {
        let g = level_grid(0);
        assert_eq!(projection_factor(&g, 0, 0), 1.0);
        assert!(projection_factor(&g, g.nw_total as i64, 0) < 1e-30);
    }

    #[test]
    fn defect_examples() {
        let g = level_grid(0);
        let mut w = vec![1.0; 10];
        assert_eq!(monotonicity_defect(&g, &w), 0.0);
        w[3] = -2.5;
        assert!((monotonicity_defect(&g, &w) - g.dw * g.dr * 2.5).abs() < 1e-18);
    }

    #[test]
    fn selected_kernels_level0() {
        let g = level_grid(0);
        let tol = KernelTolerances::default();
        for p in [
            ModelParams::merton_reference(0.2, 0.02),
            ModelParams::kou_reference(-0.2, 0.02),
        ] {
            let k = select_weights(&g, &p, &tol).unwrap();
            assert!(k.weight_sum_error < 1e-8, "{}", k.weight_sum_error);
            assert!(k.monotonicity_defect < 1e-6 * g.dtau / g.maturity);
            assert!(k.accuracy_residual < 1e-6);
            assert!(k.alpha <= 64);
            let pos: f64 = k.physical.iter().map(|v| v.max(0.0)).sum::<f64>() * g.dw * g.dr;
            assert!(pos + k.monotonicity_defect <= 1.0 + 2e-6 * g.dtau / g.maturity + 1e-12);
            // Fourier weights equal ΔwΔr·DFT(g): the zero frequency is the mass.
            assert!((k.fourier[0].re - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn constant_rate_kernel_is_identity_in_r() {
        let g = level_grid(0);
        let p = ModelParams {
            sigma_r: 0.0,
            ..ModelParams::merton_reference(0.2, 0.02)
        };
        let k = select_weights(&g, &p, &KernelTolerances::default()).unwrap();
        assert!(k.weight_sum_error < 1e-8);
        let nr = g.nr_total;
        let peak = k.physical.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let off = (0..g.nw_total)
            .flat_map(|n| (1..nr).map(move |q| n * nr + q))
            .fold(0.0f64, |m, i| m.max(k.physical[i].abs()));
        assert!(off < 1e-12 * peak, "off-row weight {off:e}");
        // Along w it is the kernel of the same model with the rate frozen.
        let frozen = ModelParams { sigma_r: 1e-12, ..p };
        let (row, _) = weights_physical(&g, &frozen, k.alpha).unwrap();
        let (mut col, mut ref_col) = (0.0, 0.0);
        for n in 0..g.nw_total {
            col += k.physical[n * nr] * g.dr;
            ref_col += (0..nr).map(|q| row[n * nr + q]).sum::<f64>() * g.dr;
        }
        assert!((col - ref_col).abs() < 1e-8 * ref_col.abs(), "{col} vs {ref_col}");
    }

    #[test]
    fn selection_is_deterministic_and_monotone_in_tolerance() {
        let g = level_grid(0);
        let p = ModelParams {
            lambda: 0.0,
            jump: JumpSpec::None,
            ..ModelParams::merton_reference(0.2, 0.0)
        };
        let tol = KernelTolerances::default();
        let a = select_weights(&g, &p, &tol).unwrap();
        let b = select_weights(&g, &p, &tol).unwrap();
        assert_eq!(a.alpha, b.alpha);
        assert_eq!(a.physical, b.physical);
        let tighter = KernelTolerances {
            eps1: tol.eps1 / 2.0,
            ..tol
        };
        assert!(select_weights(&g, &p, &tighter).unwrap().alpha >= a.alpha);
    }

    #[test]
    fn cap_exceeded_reports_both_residuals() {
        let g = level_grid(0);
        let p = ModelParams::merton_reference(0.2, 0.02);
        let tol = KernelTolerances {
            eps: 1e-30,
            eps1: 1e-30,
            alpha_cap: 4,
        };
        match select_weights(&g, &p, &tol) {
            Err(GmwbError::KernelNotConverged { alpha, .. }) => assert_eq!(alpha, 4),
            other => panic!("{other:?}"),
        }
    }

    /// Projection of the exact Gaussian transition density onto the hat basis.
    #[test]
    fn gaussian_kernel_matches_projection_quadrature() {
        let g = level_grid(0);
        let p = ModelParams {
            lambda: 0.0,
            jump: JumpSpec::None,
            ..ModelParams::merton_reference(0.2, 0.0)
        };
        let (w, _) = weights_physical(&g, &p, 16).unwrap();
        let t = g.dtau;
        let (sw, sr, rho) = (p.sigma_z * t.sqrt(), p.sigma_r * t.sqrt(), p.rho);
        let det = 1.0 - rho * rho;
        let density = |x: f64, y: f64| {
            let (u, v) = (x / sw, y / sr);
            (-(u * u - 2.0 * rho * u * v + v * v) / (2.0 * det)).exp() / (2.0 * PI * sw * sr * det.sqrt())
        };
        let hat = |x: f64| (1.0 - x.abs()).max(0.0);
        let mut worst: f64 = 0.0;
        for pi in -12i64..=12 {
            for qi in -3i64..=3 {
                let (wc, rc) = (pi as f64 * g.dw, qi as f64 * g.dr);
                let inner = |x: f64| {
                    let f = |y: f64| density(x, y) * hat((y - rc) / g.dr);
                    integrate_panels(f, rc - g.dr, rc, 1e-13, 2)
                        + integrate_panels(f, rc, rc + g.dr, 1e-13, 2)
                };
                let outer = |x: f64| inner(x) * hat((x - wc) / g.dw);
                let proj = (integrate_panels(outer, wc - g.dw, wc, 1e-12, 2)
                    + integrate_panels(outer, wc, wc + g.dw, 1e-12, 2))
                    / (g.dw * g.dr);
                let idx = pi.rem_euclid(g.nw_total as i64) as usize * g.nr_total
                    + qi.rem_euclid(g.nr_total as i64) as usize;
                worst = worst.max((proj - w[idx]).abs());
            }
        }
        assert!(worst < 1e-6, "max diff {worst}");
    }

    proptest! {
        #[test]
        fn psi_real_part_bound(eta in -200.0f64..200.0, xi in -2000.0f64..2000.0, rho in -0.99f64..0.99) {
            let p = ModelParams { rho, ..ModelParams::kou_reference(0.0, 0.02) };
            let k = p.kappa().unwrap();
            let re = psi(&p, k, eta, xi).re;
            let (o, z) = (2.0 * PI * eta, 2.0 * PI * xi);
            let bound = -(1.0 - rho.abs()) * (0.09 * o * o + 0.0004 * z * z) / 2.0;
            prop_assert!(re <= bound + 1e-9 * bound.abs().max(1.0));
        }
    }
}

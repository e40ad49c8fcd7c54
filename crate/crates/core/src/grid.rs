//! Padded computational lattice and sub-domain classification.
//!
//! The log-balance axis `w` and the rate axis `r` are uniform and padded on
//! both sides so that circular convolution does not wrap values into the
//! region of interest. The guarantee axis `a` spans `[0, premium]`.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, GmwbError, Result};
use crate::model::Contract;

/// Number of refinement levels with preset sizes.
pub const LEVELS: usize = 5;

const LEVEL_A_COUNTS: [usize; LEVELS] = [26, 51, 101, 201, 401];

/// Placement of the guarantee-axis nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ASpacing {
    Uniform,
    /// Cell widths grow by `ratio` from `a = 0` upwards.
    Geometric {
        ratio: f64,
    },
}

/// User-facing lattice description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridConfig {
    /// Interior intervals in `w`.
    pub n_w: usize,
    /// Interior intervals in `r`.
    pub n_r: usize,
    /// Intervals of the guarantee axis.
    pub n_a: usize,
    /// Timesteps.
    pub n_tau: usize,
    pub w_min: f64,
    pub w_max: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub a_spacing: ASpacing,
    /// Ratio of padded to interior extent along `w` and `r` (2 by default).
    pub padding: usize,
}

impl GridConfig {
    /// Preset refinement level `0..LEVELS` for the given contract.
    pub fn level(level: usize, contract: &Contract) -> Result<Self> {
        if level >= LEVELS {
            return Err(invalid("level", format!("must be below {LEVELS}, got {level}")));
        }
        let steps_per_year = 4.0;
        let base_steps = (steps_per_year * contract.maturity).ceil().max(1.0) as usize;
        let centre = contract.premium.ln();
        Ok(Self {
            n_w: 1 << (9 + level),
            n_r: 1 << (5 + level),
            n_a: LEVEL_A_COUNTS[level],
            n_tau: base_steps << level,
            w_min: centre - 10.0,
            w_max: centre + 10.0,
            r_min: -0.2,
            r_max: 0.3,
            a_spacing: ASpacing::Uniform,
            padding: 2,
        })
    }
}

/// Localisation sub-domain of a lattice node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SubdomainTag {
    /// Interior, including the `a = 0` plane.
    Interior,
    /// `w` at or below `w_min`, rate inside the interior.
    LeftPad,
    /// `w` at or above `w_max`, rate inside the interior.
    RightPad,
    /// Rate at or outside `[r_min, r_max]`.
    Corner,
}

/// Immutable padded lattice.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub n_w: usize,
    pub n_r: usize,
    pub n_a: usize,
    pub n_tau: usize,
    /// Padded node counts.
    pub nw_total: usize,
    pub nr_total: usize,
    pub w_min: f64,
    pub w_max: f64,
    pub r_min: f64,
    pub r_max: f64,
    /// Padded bounds; the lattice is periodic with period `w_hi - w_lo`.
    pub w_lo: f64,
    pub w_hi: f64,
    pub r_lo: f64,
    pub r_hi: f64,
    pub w_center: f64,
    pub r_center: f64,
    pub dw: f64,
    pub dr: f64,
    pub dtau: f64,
    pub maturity: f64,
    /// Log of the cap applied to the sub-account in boundary data.
    pub w_cap: f64,
    pub w_nodes: Vec<f64>,
    pub r_nodes: Vec<f64>,
    pub a_nodes: Vec<f64>,
    /// Storage index of the `w_min` column and of the `r_min` row.
    pub w_min_index: usize,
    pub r_min_index: usize,
    /// Conditions that hold only approximately; reported, not enforced.
    pub warnings: Vec<String>,
}

fn is_pow2(n: usize) -> bool {
    n >= 2 && n.is_power_of_two()
}

/// Build the padded lattice and check the grid conditions.
pub fn build_grid(cfg: &GridConfig, contract: &Contract) -> Result<Grid> {
    contract.validate()?;
    if !is_pow2(cfg.n_w) {
        return Err(invalid(
            "n_w",
            format!("must be a power of two >= 2, got {}", cfg.n_w),
        ));
    }
    if !is_pow2(cfg.n_r) {
        return Err(invalid(
            "n_r",
            format!("must be a power of two >= 2, got {}", cfg.n_r),
        ));
    }
    if cfg.n_a < 1 {
        return Err(invalid("n_a", "must be >= 1"));
    }
    if cfg.n_tau < 1 {
        return Err(invalid("n_tau", "must be >= 1"));
    }
    if !(cfg.padding >= 2 && cfg.padding.is_power_of_two()) {
        return Err(invalid(
            "padding",
            format!("must be a power of two >= 2, got {}", cfg.padding),
        ));
    }
    let w0 = contract.premium.ln();
    if !(cfg.w_min < w0 && w0 < cfg.w_max) {
        return Err(invalid(
            "w_min/w_max",
            format!(
                "need w_min < ln(premium) = {w0:.6} < w_max, got [{}, {}]",
                cfg.w_min, cfg.w_max
            ),
        ));
    }
    if !(cfg.r_min < 0.0 && 0.0 < cfg.r_max) {
        return Err(invalid(
            "r_min/r_max",
            format!("need r_min < 0 < r_max, got [{}, {}]", cfg.r_min, cfg.r_max),
        ));
    }

    let dtau = contract.maturity / cfg.n_tau as f64;
    if 1.0 + dtau * cfg.r_min <= 0.0 {
        return Err(GmwbError::GridCondition(format!(
            "1 + dtau*r_min > 0 fails: 1 + {dtau}*({}) = {}",
            cfg.r_min,
            1.0 + dtau * cfg.r_min
        )));
    }

    let nw_total = cfg
        .n_w
        .checked_mul(cfg.padding)
        .ok_or_else(|| GmwbError::SizeOverflow("padded w count".into()))?;
    let nr_total = cfg
        .n_r
        .checked_mul(cfg.padding)
        .ok_or_else(|| GmwbError::SizeOverflow("padded r count".into()))?;

    let pw = cfg.w_max - cfg.w_min;
    let pr = cfg.r_max - cfg.r_min;
    let dw = pw / cfg.n_w as f64;
    let dr = pr / cfg.n_r as f64;
    let w_center = 0.5 * (cfg.w_min + cfg.w_max);
    let r_center = 0.5 * (cfg.r_min + cfg.r_max);
    let w_lo = w_center - 0.5 * cfg.padding as f64 * pw;
    let w_hi = w_center + 0.5 * cfg.padding as f64 * pw;
    let r_lo = r_center - 0.5 * cfg.padding as f64 * pr;
    let r_hi = r_center + 0.5 * cfg.padding as f64 * pr;
    let w_nodes = (0..nw_total).map(|i| w_lo + i as f64 * dw).collect();
    let r_nodes = (0..nr_total).map(|i| r_lo + i as f64 * dr).collect();
    let a_nodes = a_partition(cfg.n_a, contract.premium, cfg.a_spacing)?;

    let mut warnings = Vec::new();
    let gap = cfg.w_min.exp() - w_lo.exp();
    if gap < contract.withdraw_rate * dtau {
        warnings.push(format!(
            "exp(w_min) - exp(w_lo) = {gap:.4e} is below withdraw_rate*dtau = {:.4e}",
            contract.withdraw_rate * dtau
        ));
    }

    Ok(Grid {
        n_w: cfg.n_w,
        n_r: cfg.n_r,
        n_a: cfg.n_a,
        n_tau: cfg.n_tau,
        nw_total,
        nr_total,
        w_min: cfg.w_min,
        w_max: cfg.w_max,
        r_min: cfg.r_min,
        r_max: cfg.r_max,
        w_lo,
        w_hi,
        r_lo,
        r_hi,
        w_center,
        r_center,
        dw,
        dr,
        dtau,
        maturity: contract.maturity,
        w_cap: cfg.w_max + 0.5 * pw,
        w_nodes,
        r_nodes,
        a_nodes,
        w_min_index: (nw_total - cfg.n_w) / 2,
        r_min_index: (nr_total - cfg.n_r) / 2,
        warnings,
    })
}

fn a_partition(n_a: usize, a_max: f64, spacing: ASpacing) -> Result<Vec<f64>> {
    let mut nodes = Vec::with_capacity(n_a + 1);
    match spacing {
        ASpacing::Uniform => {
            for j in 0..=n_a {
                nodes.push(a_max * j as f64 / n_a as f64);
            }
        }
        ASpacing::Geometric { ratio } => {
            if !(ratio > 0.0 && ratio.is_finite()) {
                return Err(invalid("a_spacing.ratio", format!("must be > 0, got {ratio}")));
            }
            let weights: Vec<f64> = (0..n_a).map(|j| ratio.powi(j as i32)).collect();
            let total: f64 = weights.iter().sum();
            let mut acc = 0.0;
            nodes.push(0.0);
            for w in &weights[..n_a - 1] {
                acc += w;
                nodes.push(a_max * acc / total);
            }
            nodes.push(a_max);
        }
    }
    Ok(nodes)
}

impl Grid {
    /// Number of guarantee nodes.
    pub fn na_nodes(&self) -> usize {
        self.n_a + 1
    }

    /// Size of one `a`-slice of a field.
    pub fn slice_len(&self) -> usize {
        self.nw_total * self.nr_total
    }

    /// Storage indices of the interior `w` columns, `w_min < w < w_max`.
    pub fn w_interior(&self) -> std::ops::Range<usize> {
        self.w_min_index + 1..self.w_min_index + self.n_w
    }

    /// Storage indices of the left padding, `w <= w_min`.
    pub fn w_left(&self) -> std::ops::Range<usize> {
        0..self.w_min_index + 1
    }

    /// Storage indices of the right padding, `w >= w_max`.
    pub fn w_right(&self) -> std::ops::Range<usize> {
        self.w_min_index + self.n_w..self.nw_total
    }

    /// Storage indices of interior rate rows, `r_min < r < r_max`.
    pub fn r_interior(&self) -> std::ops::Range<usize> {
        self.r_min_index + 1..self.r_min_index + self.n_r
    }

    pub fn is_corner_row(&self, k: usize) -> bool {
        k <= self.r_min_index || k >= self.r_min_index + self.n_r
    }

    /// Sub-domain of the node at storage indices `(n, k)`.
    pub fn classify_index(&self, n: usize, k: usize) -> Result<SubdomainTag> {
        if n >= self.nw_total || k >= self.nr_total {
            return Err(GmwbError::IndexOutOfRange(format!(
                "({n}, {k}) outside {}x{}",
                self.nw_total, self.nr_total
            )));
        }
        Ok(if self.is_corner_row(k) {
            SubdomainTag::Corner
        } else if n <= self.w_min_index {
            SubdomainTag::LeftPad
        } else if n >= self.w_min_index + self.n_w {
            SubdomainTag::RightPad
        } else {
            SubdomainTag::Interior
        })
    }

    /// Sub-domain using indices centred on the lattice midpoint, so that
    /// `n` runs over `-N†/2 .. N†/2 - 1` and `k` over `-K†/2 .. K†/2 - 1`.
    pub fn classify(&self, n: i64, k: i64) -> Result<SubdomainTag> {
        let hn = (self.nw_total / 2) as i64;
        let hk = (self.nr_total / 2) as i64;
        if n < -hn || n >= hn || k < -hk || k >= hk {
            return Err(GmwbError::IndexOutOfRange(format!(
                "centred index ({n}, {k}) outside [-{hn}, {hn}) x [-{hk}, {hk})"
            )));
        }
        self.classify_index((n + hn) as usize, (k + hk) as usize)
    }

    pub fn da_max(&self) -> f64 {
        self.a_nodes.windows(2).map(|p| p[1] - p[0]).fold(0.0, f64::max)
    }

    pub fn da_min(&self) -> f64 {
        self.a_nodes
            .windows(2)
            .map(|p| p[1] - p[0])
            .fold(f64::INFINITY, f64::min)
    }

    pub fn tau(&self, m: usize) -> f64 {
        m as f64 * self.dtau
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn level(l: usize, t: f64) -> (Grid, Contract) {
        let c = Contract::reference(t);
        (build_grid(&GridConfig::level(l, &c).unwrap(), &c).unwrap(), c)
    }

    #[test]
    fn level_zero_sizes() {
        let (g, _) = level(0, 5.0);
        assert_eq!((g.n_w, g.n_r, g.n_a, g.n_tau), (512, 32, 26, 20));
        assert_eq!((g.nw_total, g.nr_total), (1024, 64));
        assert!((g.dw - 20.0 / 512.0).abs() < 1e-15);
        assert!((g.w_center - 100f64.ln()).abs() < 1e-14);
        assert!((g.w_hi - g.w_lo - 2.0 * (g.w_max - g.w_min)).abs() < 1e-12);
        assert!((g.r_hi - g.r_lo - 2.0 * (g.r_max - g.r_min)).abs() < 1e-12);
        assert!((g.dw * g.nw_total as f64 - (g.w_hi - g.w_lo)).abs() < 1e-12);
        assert!((g.w_nodes[g.w_min_index] - g.w_min).abs() < 1e-12);
        assert!((g.r_nodes[g.r_min_index + g.n_r] - g.r_max).abs() < 1e-12);
        assert_eq!(g.a_nodes[0], 0.0);
        assert_eq!(*g.a_nodes.last().unwrap(), 100.0);
        let (g10, _) = level(0, 10.0);
        assert_eq!(g10.n_tau, 40);
    }

    #[test]
    fn min_w_gap_is_reported_not_fatal() {
        let (g, _) = level(0, 5.0);
        assert_eq!(g.warnings.len(), 1);
    }

    #[test]
    fn rate_condition_enforced() {
        let c = Contract::reference(5.0);
        let mut cfg = GridConfig::level(0, &c).unwrap();
        cfg.n_tau = 20;
        assert!(build_grid(&cfg, &c).is_ok());
        cfg.r_min = -4.0;
        cfg.n_tau = 5;
        match build_grid(&cfg, &c) {
            Err(GmwbError::GridCondition(msg)) => assert!(msg.contains("1 + dtau*r_min")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn invalid_configs() {
        let c = Contract::reference(5.0);
        let base = GridConfig::level(0, &c).unwrap();
        for cfg in [
            GridConfig {
                n_w: 500,
                ..base.clone()
            },
            GridConfig {
                n_r: 0,
                ..base.clone()
            },
            GridConfig {
                w_max: 1.0,
                ..base.clone()
            },
            GridConfig {
                r_min: 0.01,
                ..base.clone()
            },
            GridConfig {
                padding: 3,
                ..base.clone()
            },
        ] {
            assert!(build_grid(&cfg, &c).is_err());
        }
        assert!(GridConfig::level(5, &c).is_err());
    }

    #[test]
    fn classification_examples() {
        let (g, _) = level(0, 5.0);
        let hn = (g.nw_total / 2) as i64;
        let hk = (g.nr_total / 2) as i64;
        assert_eq!(g.classify(-hn, 0).unwrap(), SubdomainTag::LeftPad);
        assert_eq!(g.classify(0, 0).unwrap(), SubdomainTag::Interior);
        assert_eq!(g.classify(17, -hk).unwrap(), SubdomainTag::Corner);
        assert!(g.classify(hn, 0).is_err());
        assert!(g.classify_index(0, g.nr_total).is_err());
    }

    #[test]
    fn classification_counts() {
        for l in 0..2 {
            let (g, _) = level(l, 5.0);
            let mut counts = std::collections::HashMap::new();
            for n in 0..g.nw_total {
                for k in 0..g.nr_total {
                    *counts.entry(g.classify_index(n, k).unwrap()).or_insert(0usize) += 1;
                }
            }
            let total: usize = counts.values().sum();
            assert_eq!(total, g.nw_total * g.nr_total);
            assert_eq!(counts[&SubdomainTag::Interior], (g.n_w - 1) * (g.n_r - 1));
            assert_eq!(counts[&SubdomainTag::LeftPad], (g.n_w / 2 + 1) * (g.n_r - 1));
            assert_eq!(counts[&SubdomainTag::RightPad], (g.n_w / 2) * (g.n_r - 1));
            assert_eq!(g.w_interior().len(), g.n_w - 1);
            assert_eq!(
                g.w_left().len() + g.w_interior().len() + g.w_right().len(),
                g.nw_total
            );
        }
    }

    #[test]
    fn refinement_halves_steps() {
        for l in 0..LEVELS - 1 {
            let (g0, _) = level(l, 5.0);
            let (g1, _) = level(l + 1, 5.0);
            assert!((g0.dw / g1.dw - 2.0).abs() < 1e-12);
            assert!((g0.dr / g1.dr - 2.0).abs() < 1e-12);
            assert!((g0.dtau / g1.dtau - 2.0).abs() < 1e-12);
            let ratio = g0.da_max() / g1.da_max();
            assert!((1.9..2.1).contains(&ratio), "{ratio}");
        }
    }

    #[test]
    fn geometric_a_partition() {
        let c = Contract::reference(5.0);
        let cfg = GridConfig {
            a_spacing: ASpacing::Geometric { ratio: 1.05 },
            ..GridConfig::level(0, &c).unwrap()
        };
        let g = build_grid(&cfg, &c).unwrap();
        assert_eq!(g.a_nodes.len(), 27);
        assert!(g.a_nodes.windows(2).all(|p| p[1] > p[0]));
        assert!(g.da_min() < g.da_max());
        assert_eq!(*g.a_nodes.last().unwrap(), 100.0);
    }
}

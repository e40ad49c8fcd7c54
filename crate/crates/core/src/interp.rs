//! Lattice fields and monotone multilinear interpolation.

use crate::error::{GmwbError, Result};
use crate::grid::Grid;

/// Real values on the full padded lattice at one time level.
///
/// Storage order is `[a][w][r]` with the rate index fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueField {
    pub nw: usize,
    pub nr: usize,
    pub na: usize,
    /// Timestep index the values belong to.
    pub step: usize,
    pub data: Vec<f64>,
}

impl ValueField {
    pub fn zeros(grid: &Grid) -> Self {
        Self::filled(grid, 0.0)
    }

    pub fn filled(grid: &Grid, v: f64) -> Self {
        let (nw, nr, na) = (grid.nw_total, grid.nr_total, grid.na_nodes());
        Self {
            nw,
            nr,
            na,
            step: 0,
            data: vec![v; nw * nr * na],
        }
    }

    /// Field sampled from `f(w, r, a)` at every node.
    pub fn from_fn(grid: &Grid, mut f: impl FnMut(f64, f64, f64) -> f64) -> Self {
        let mut out = Self::zeros(grid);
        for (j, &a) in grid.a_nodes.iter().enumerate() {
            for (n, &w) in grid.w_nodes.iter().enumerate() {
                for (k, &r) in grid.r_nodes.iter().enumerate() {
                    let i = out.index(n, k, j);
                    out.data[i] = f(w, r, a);
                }
            }
        }
        out
    }

    #[inline]
    pub fn index(&self, n: usize, k: usize, j: usize) -> usize {
        (j * self.nw + n) * self.nr + k
    }

    #[inline]
    pub fn get(&self, n: usize, k: usize, j: usize) -> f64 {
        self.data[self.index(n, k, j)]
    }

    pub fn slice_len(&self) -> usize {
        self.nw * self.nr
    }

    pub fn slice(&self, j: usize) -> &[f64] {
        let len = self.slice_len();
        &self.data[j * len..(j + 1) * len]
    }

    pub fn slice_mut(&mut self, j: usize) -> &mut [f64] {
        let len = self.slice_len();
        &mut self.data[j * len..(j + 1) * len]
    }

    pub fn norm_inf(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn check_dims(&self, grid: &Grid) -> Result<()> {
        if self.nw != grid.nw_total
            || self.nr != grid.nr_total
            || self.na != grid.na_nodes()
            || self.data.len() != self.nw * self.nr * self.na
        {
            return Err(GmwbError::DimensionMismatch(format!(
                "field {}x{}x{} vs grid {}x{}x{}",
                self.nw,
                self.nr,
                self.na,
                grid.nw_total,
                grid.nr_total,
                grid.na_nodes()
            )));
        }
        Ok(())
    }
}

/// Lower cell index and weight of the upper node.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bracket {
    pub lo: usize,
    pub frac: f64,
}

impl Bracket {
    /// Position on a uniform axis of `count` nodes, clamped to the end nodes.
    #[inline]
    pub fn uniform(x: f64, origin: f64, step: f64, count: usize) -> Self {
        let t = (x - origin) / step;
        let last = (count - 1) as f64;
        if !(t > 0.0) {
            return Self { lo: 0, frac: 0.0 };
        }
        if t >= last {
            return Self {
                lo: count - 2,
                frac: 1.0,
            };
        }
        let lo = t.floor() as usize;
        Self {
            lo,
            frac: t - lo as f64,
        }
    }

    /// Position on an increasing, possibly non-uniform axis.
    #[inline]
    pub fn search(x: f64, nodes: &[f64]) -> Self {
        let last = nodes.len() - 1;
        if !(x > nodes[0]) {
            return Self { lo: 0, frac: 0.0 };
        }
        if x >= nodes[last] {
            return Self {
                lo: last - 1,
                frac: 1.0,
            };
        }
        let hi = nodes.partition_point(|&v| v <= x);
        let lo = hi - 1;
        Self {
            lo,
            frac: (x - nodes[lo]) / (nodes[hi] - nodes[lo]),
        }
    }
}

/// Bracket of `w` on the padded log-balance axis.
#[inline]
pub fn locate_w(grid: &Grid, w: f64) -> Bracket {
    Bracket::uniform(w, grid.w_lo, grid.dw, grid.nw_total)
}

/// Bracket of `r` on the padded rate axis.
#[inline]
pub fn locate_r(grid: &Grid, r: f64) -> Bracket {
    Bracket::uniform(r, grid.r_lo, grid.dr, grid.nr_total)
}

/// Bracket of `a` on the guarantee axis.
#[inline]
pub fn locate_a(grid: &Grid, a: f64) -> Bracket {
    Bracket::search(a, &grid.a_nodes)
}

/// Trilinear interpolation of `field` at `(w, r, a)`, clamped to the lattice.
pub fn interp3(field: &ValueField, grid: &Grid, w: f64, r: f64, a: f64) -> Result<f64> {
    if !(w.is_finite() && r.is_finite() && a.is_finite()) {
        return Err(GmwbError::NonFiniteCoordinate("interp3"));
    }
    field.check_dims(grid)?;
    let bw = locate_w(grid, w);
    let br = locate_r(grid, r);
    let ba = locate_a(grid, a);
    Ok(trilinear(&field.data, field.nw, field.nr, bw, br, ba))
}

/// Trilinear combination on raw `[a][w][r]` storage.
#[inline]
pub fn trilinear<T: Copy + Into<f64>>(
    data: &[T],
    nw: usize,
    nr: usize,
    bw: Bracket,
    br: Bracket,
    ba: Bracket,
) -> f64 {
    let at = |j: usize, n: usize, k: usize| -> f64 { data[(j * nw + n) * nr + k].into() };
    let plane = |j: usize| {
        let v00 = at(j, bw.lo, br.lo);
        let v01 = at(j, bw.lo, br.lo + 1);
        let v10 = at(j, bw.lo + 1, br.lo);
        let v11 = at(j, bw.lo + 1, br.lo + 1);
        let lo = v00 + br.frac * (v01 - v00);
        let hi = v10 + br.frac * (v11 - v10);
        (1.0 - bw.frac) * lo + bw.frac * hi
    };
    let p0 = plane(ba.lo);
    if ba.frac == 0.0 {
        return p0;
    }
    let p1 = plane(ba.lo + 1);
    (1.0 - ba.frac) * p0 + ba.frac * p1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{build_grid, ASpacing, GridConfig};
    use crate::model::Contract;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn small_grid(spacing: ASpacing) -> Grid {
        let c = Contract::reference(5.0);
        let cfg = GridConfig {
            n_w: 16,
            n_r: 8,
            n_a: 6,
            a_spacing: spacing,
            ..GridConfig::level(0, &c).unwrap()
        };
        build_grid(&cfg, &c).unwrap()
    }

    #[test]
    fn exact_on_nodes() {
        let g = small_grid(ASpacing::Geometric { ratio: 1.3 });
        let f = ValueField::from_fn(&g, |w, r, a| (w * 0.3).sin() + r * r + a.sqrt());
        for &(n, k, j) in &[(0, 0, 0), (5, 3, 2), (31, 15, 6), (17, 9, 4)] {
            let v = interp3(&f, &g, g.w_nodes[n], g.r_nodes[k], g.a_nodes[j]).unwrap();
            assert_eq!(v, f.get(n, k, j));
        }
    }

    #[test]
    fn constant_and_linear_reproduction() {
        let g = small_grid(ASpacing::Geometric { ratio: 1.2 });
        let c = ValueField::filled(&g, 7.25);
        let lin = ValueField::from_fn(&g, |w, r, a| 2.0 * w - 3.0 * r + a);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let w = rng.gen_range(g.w_lo..g.w_nodes[g.nw_total - 1]);
            let r = rng.gen_range(g.r_lo..g.r_nodes[g.nr_total - 1]);
            let a = rng.gen_range(0.0..100.0);
            assert!((interp3(&c, &g, w, r, a).unwrap() - 7.25).abs() < 1e-13);
            let v = interp3(&lin, &g, w, r, a).unwrap();
            assert!((v - (2.0 * w - 3.0 * r + a)).abs() < 1e-12);
        }
    }

    #[test]
    fn clamps_outside_and_rejects_nan() {
        let g = small_grid(ASpacing::Uniform);
        let lin = ValueField::from_fn(&g, |w, _, _| w);
        let v = interp3(&lin, &g, g.w_lo - 5.0, 0.0, 50.0).unwrap();
        assert!((v - g.w_lo).abs() < 1e-12);
        let v = interp3(&lin, &g, g.w_hi + 5.0, 0.0, 150.0).unwrap();
        assert!((v - g.w_nodes[g.nw_total - 1]).abs() < 1e-12);
        assert!(matches!(
            interp3(&lin, &g, f64::NAN, 0.0, 0.0),
            Err(GmwbError::NonFiniteCoordinate(_))
        ));
    }

    #[test]
    fn second_order_on_smooth_fields() {
        let f = |w: f64, r: f64, a: f64| (0.7 * w).sin() * (3.0 * r).exp() + (a / 30.0).cos();
        let mut errs = Vec::new();
        for scale in [2usize, 4, 8] {
            let c = Contract::reference(5.0);
            let cfg = GridConfig {
                n_w: 32 * scale,
                n_r: 8 * scale,
                n_a: 8 * scale,
                ..GridConfig::level(0, &c).unwrap()
            };
            let g = build_grid(&cfg, &c).unwrap();
            let field = ValueField::from_fn(&g, f);
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
            let mut err: f64 = 0.0;
            for _ in 0..400 {
                let w = rng.gen_range(g.w_min..g.w_max);
                let r = rng.gen_range(g.r_min..g.r_max);
                let a = rng.gen_range(0.0..100.0);
                err = err.max((interp3(&field, &g, w, r, a).unwrap() - f(w, r, a)).abs());
            }
            errs.push(err);
        }
        for p in errs.windows(2) {
            let order = (p[0] / p[1]).log2();
            assert!(order >= 1.9, "order {order} from {errs:?}");
        }
    }

    proptest! {
        #[test]
        fn shift_equivariant_and_monotone(seed in 0u64..1000, xi in -50.0f64..50.0,
                                          w in 0.0f64..1.0, r in 0.0f64..1.0, a in 0.0f64..1.0) {
            let g = small_grid(ASpacing::Geometric { ratio: 1.1 });
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut lo = ValueField::zeros(&g);
            lo.data.iter_mut().for_each(|v| *v = rng.gen_range(-10.0..10.0));
            let mut hi = lo.clone();
            hi.data.iter_mut().for_each(|v| *v += rng.gen_range(0.0..1.0));
            let mut shifted = lo.clone();
            shifted.data.iter_mut().for_each(|v| *v += xi);
            let (w, r, a) = (g.w_lo + w * (g.w_hi - g.w_lo), g.r_lo + r * (g.r_hi - g.r_lo), a * 100.0);
            let base = interp3(&lo, &g, w, r, a).unwrap();
            prop_assert!((interp3(&shifted, &g, w, r, a).unwrap() - base - xi).abs() < 1e-11);
            prop_assert!(interp3(&hi, &g, w, r, a).unwrap() >= base);
        }
    }
}

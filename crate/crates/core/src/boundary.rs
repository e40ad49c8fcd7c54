//! Initial condition and the updates on the padding sub-domains: Dirichlet
//! values on the right padding and the corner rows, and a fully implicit
//! finite difference step in `r` on the left padding.

use crate::error::{GmwbError, Result};
use crate::grid::Grid;
use crate::interp::ValueField;
use crate::model::{bond_price, Contract, ModelParams};
use crate::timestep::{intervene_block, BranchBlock, CandidateSet, GatheredRows};

/// Terminal payoff `max(e^w, (1 - μ) a - c)`, capped at `e^{w_cap}`.
#[inline]
pub fn payoff(w: f64, a: f64, contract: &Contract, w_cap: f64) -> f64 {
    w.exp()
        .max((1.0 - contract.penalty) * a - contract.fixed_cost)
        .min(w_cap.exp())
}

pub fn initial_condition(grid: &Grid, contract: &Contract) -> ValueField {
    ValueField::from_fn(grid, |w, _, a| payoff(w, a, contract, grid.w_cap))
}

/// Closed-form boundary data at one time level.
#[derive(Debug, Clone)]
pub struct BoundaryLevel {
    pub tau: f64,
    /// `e^{-β τ}` for the right padding.
    pub fee_discount: f64,
    /// Bond price at the clamped rate of every rate row.
    pub bond: Vec<f64>,
}

impl BoundaryLevel {
    pub fn new(grid: &Grid, params: &ModelParams, tau: f64) -> Self {
        let bond = grid
            .r_nodes
            .iter()
            .map(|&r| bond_price(params, r.clamp(grid.r_min, grid.r_max), tau))
            .collect();
        Self {
            tau,
            fee_discount: (-params.beta * tau).exp(),
            bond,
        }
    }

    /// Right-padding value at log-balance `w`.
    #[inline]
    pub fn right(&self, grid: &Grid, w: f64) -> f64 {
        self.fee_discount * w.min(grid.w_cap).exp()
    }

    /// Stopped-process value on a corner row.
    #[inline]
    pub fn corner(&self, grid: &Grid, contract: &Contract, w: f64, k: usize, a: f64) -> f64 {
        self.bond[k] * payoff(w, a, contract, grid.w_cap)
    }
}

/// Fill the right padding of one slice, interior rate rows only.
pub fn wmax_slice(slice: &mut [f64], grid: &Grid, level: &BoundaryLevel) {
    let nr = grid.nr_total;
    for n in grid.w_right() {
        let v = level.right(grid, grid.w_nodes[n]);
        slice[n * nr + grid.r_interior().start..n * nr + grid.r_interior().end].fill(v);
    }
}

/// Fill the corner rows of the slice with guarantee `a`.
pub fn corner_slice(slice: &mut [f64], grid: &Grid, contract: &Contract, level: &BoundaryLevel, a: f64) {
    let nr = grid.nr_total;
    let corners: Vec<usize> = (0..nr).filter(|&k| grid.is_corner_row(k)).collect();
    for n in 0..grid.nw_total {
        let base = payoff(grid.w_nodes[n], a, contract, grid.w_cap);
        for &k in &corners {
            slice[n * nr + k] = level.bond[k] * base;
        }
    }
}

pub fn apply_wmax(field: &mut ValueField, grid: &Grid, params: &ModelParams, tau: f64) -> Result<()> {
    field.check_dims(grid)?;
    let level = BoundaryLevel::new(grid, params, tau);
    for j in 0..grid.na_nodes() {
        wmax_slice(field.slice_mut(j), grid, &level);
    }
    Ok(())
}

pub fn apply_corner(
    field: &mut ValueField,
    grid: &Grid,
    params: &ModelParams,
    contract: &Contract,
    tau: f64,
) -> Result<()> {
    field.check_dims(grid)?;
    let level = BoundaryLevel::new(grid, params, tau);
    for (j, &a) in grid.a_nodes.iter().enumerate() {
        corner_slice(field.slice_mut(j), grid, contract, &level, a);
    }
    Ok(())
}

/// Off-diagonal weights `(α, β)` of `v_{k-1}` and `v_{k+1}` in the rate
/// operator, central where both are nonnegative and upwinded otherwise.
pub fn positive_coeffs(params: &ModelParams, r: f64, dr: f64) -> (f64, f64) {
    let diffusion = params.sigma_r * params.sigma_r / (2.0 * dr * dr);
    let drift = params.delta * (params.theta - r);
    let (alpha, beta) = (diffusion - drift / (2.0 * dr), diffusion + drift / (2.0 * dr));
    if alpha >= 0.0 && beta >= 0.0 {
        (alpha, beta)
    } else if drift > 0.0 {
        (diffusion, diffusion + drift / dr)
    } else {
        (diffusion - drift / dr, diffusion)
    }
}

/// Tridiagonal system `sub[i] x[i-1] + diag[i] x[i] + sup[i] x[i+1] = rhs[i]`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TridiagonalSystem {
    pub sub: Vec<f64>,
    pub diag: Vec<f64>,
    pub sup: Vec<f64>,
    pub rhs: Vec<f64>,
}

impl TridiagonalSystem {
    pub fn len(&self) -> usize {
        self.diag.len()
    }

    pub fn is_empty(&self) -> bool {
        self.diag.is_empty()
    }

    /// Thomas algorithm. `scratch` is resized as needed.
    pub fn solve_into(&self, x: &mut [f64], scratch: &mut Vec<f64>) -> Result<()> {
        let n = self.len();
        if self.sub.len() != n || self.sup.len() != n || self.rhs.len() != n || x.len() != n {
            return Err(GmwbError::DimensionMismatch(
                "tridiagonal bands differ in length".into(),
            ));
        }
        scratch.resize(n, 0.0);
        let mut pivot = self.diag[0];
        for i in 0..n {
            if i > 0 {
                pivot = self.diag[i] - self.sub[i] * scratch[i - 1];
            }
            if !(pivot.abs() > 1e-300) || !pivot.is_finite() {
                return Err(GmwbError::SingularSystem("zero pivot in tridiagonal solve"));
            }
            scratch[i] = self.sup[i] / pivot;
            let prev = if i > 0 { x[i - 1] } else { 0.0 };
            x[i] = (self.rhs[i] - if i > 0 { self.sub[i] * prev } else { 0.0 }) / pivot;
        }
        for i in (0..n.saturating_sub(1)).rev() {
            x[i] -= scratch[i] * x[i + 1];
        }
        Ok(())
    }

    pub fn solve(&self) -> Result<Vec<f64>> {
        let mut x = vec![0.0; self.len()];
        self.solve_into(&mut x, &mut Vec::new())?;
        Ok(x)
    }
}

/// Implicit rate operator on the interior rate rows for one step.
#[derive(Debug, Clone)]
pub struct RateOperator {
    sub: Vec<f64>,
    diag: Vec<f64>,
    sup: Vec<f64>,
}

impl RateOperator {
    pub fn new(grid: &Grid, params: &ModelParams) -> Result<Self> {
        let dt = grid.dtau;
        let mut op = Self {
            sub: Vec::new(),
            diag: Vec::new(),
            sup: Vec::new(),
        };
        for k in grid.r_interior() {
            let r = grid.r_nodes[k];
            let (alpha, beta) = positive_coeffs(params, r, grid.dr);
            let d = 1.0 + dt * (alpha + beta + r);
            if !(d > 0.0) {
                return Err(GmwbError::SingularSystem("nonpositive diagonal in rate operator"));
            }
            op.sub.push(-dt * alpha);
            op.diag.push(d);
            op.sup.push(-dt * beta);
        }
        Ok(op)
    }

    /// System for the known values `rhs` with Dirichlet values `below` and
    /// `above` just outside the interior rate rows.
    pub fn system(&self, rhs: &[f64], below: f64, above: f64) -> TridiagonalSystem {
        let mut rhs = rhs.to_vec();
        let last = rhs.len() - 1;
        rhs[0] -= self.sub[0] * below;
        rhs[last] -= self.sup[last] * above;
        let mut sub = self.sub.clone();
        let mut sup = self.sup.clone();
        sub[0] = 0.0;
        sup[last] = 0.0;
        TridiagonalSystem {
            sub,
            diag: self.diag.clone(),
            sup,
            rhs,
        }
    }
}

/// Inputs of the left-padding update for one step.
pub struct LeftPadContext<'a> {
    pub grid: &'a Grid,
    pub contract: &'a Contract,
    pub operator: &'a RateOperator,
    /// Boundary data at the new time level.
    pub level: &'a BoundaryLevel,
}

/// Scratch buffers for the left-padding update.
#[derive(Debug, Default)]
pub struct LeftPadWorkspace {
    merged: Vec<f64>,
    gamma: Vec<f64>,
    x: Vec<f64>,
    scratch: Vec<f64>,
}

/// Left-padding rows of slice `j` at the new time level: the withdrawal
/// maxima of `block` (computed with the sub-account unchanged), then one
/// implicit step in `r` closed with the corner values of the new level.
/// `out` must already hold those corner values. `controls` receives the
/// signed withdrawal as in the interior.
pub fn step_wmin_slice(
    j: usize,
    has_finite: bool,
    block: &BranchBlock,
    ctx: &LeftPadContext,
    ws: &mut LeftPadWorkspace,
    out: &mut [f64],
    mut controls: Option<&mut [f64]>,
) -> Result<()> {
    let nr = ctx.grid.nr_total;
    let cols = block.cols.clone();
    ws.x.resize(cols.len(), 0.0);
    for n in block.rows.clone() {
        let src = block.row(j, n);
        ws.merged.clear();
        ws.merged.extend_from_slice(&block.local[src.clone()]);
        ws.gamma.clear();
        ws.gamma.extend_from_slice(&block.gamma_local[src.clone()]);
        if has_finite {
            // Ties stay with the continuous-rate branch.
            for (t, i) in src.enumerate() {
                if block.finite[i] > ws.merged[t] {
                    ws.merged[t] = block.finite[i];
                    ws.gamma[t] = -block.gamma_finite[i];
                }
            }
        }
        let below = out[n * nr + cols.start - 1];
        let above = out[n * nr + cols.end];
        let sys = ctx.operator.system(&ws.merged, below, above);
        sys.solve_into(&mut ws.x, &mut ws.scratch)?;
        let row = n * nr + cols.start..n * nr + cols.end;
        out[row.clone()].copy_from_slice(&ws.x);
        if let Some(ctrl) = controls.as_deref_mut() {
            ctrl[row].copy_from_slice(&ws.gamma);
        }
    }
    Ok(())
}

/// Left-padding update for a whole field; `next` must hold the corner
/// values of the new time level.
pub fn step_wmin(
    v_m: &ValueField,
    next: &mut ValueField,
    grid: &Grid,
    params: &ModelParams,
    contract: &Contract,
    candidates: &[CandidateSet],
    tau_next: f64,
) -> Result<()> {
    v_m.check_dims(grid)?;
    next.check_dims(grid)?;
    let operator = RateOperator::new(grid, params)?;
    let level = BoundaryLevel::new(grid, params, tau_next);
    let ctx = LeftPadContext {
        grid,
        contract,
        operator: &operator,
        level: &level,
    };
    let mut block = BranchBlock::default();
    intervene_block(
        &GatheredRows::gather(v_m, grid.r_interior()),
        grid,
        contract,
        candidates,
        0..grid.na_nodes(),
        grid.w_left(),
        false,
        &mut block,
    );
    let mut ws = LeftPadWorkspace::default();
    for (j, set) in candidates.iter().enumerate() {
        step_wmin_slice(
            j,
            !set.finite.is_empty(),
            &block,
            &ctx,
            &mut ws,
            next.slice_mut(j),
            None,
        )?;
    }
    Ok(())
}

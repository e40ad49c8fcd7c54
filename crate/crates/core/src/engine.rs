//! Backward time loop, price extraction, stored withdrawal strategies and the
//! fair-fee root finder.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::boundary::{
    corner_slice, initial_condition, step_wmin_slice, wmax_slice, BoundaryLevel, LeftPadContext,
    LeftPadWorkspace, RateOperator,
};
use crate::error::{invalid, GmwbError, Result};
use crate::grid::Grid;
use crate::interp::{interp3, locate_r, ValueField};
use crate::kernel::{select_weights, KernelTolerances, KernelWeights};
use crate::model::{Contract, ModelParams};
use crate::timestep::{
    advance_interior_slice, candidate_sets, intervene_block, BranchBlock, CandidateSet, ControlPolicy,
    Convolver, Departures, GatheredRows, SliceWorkspace, StepContext,
};

/// Guarantee slices optimised together; bounds the block buffers while
/// letting neighbouring guarantees share cached rows.
const SLICE_CHUNK: usize = 24;

/// Which timesteps keep their withdrawal strategy.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControlStorage {
    #[default]
    None,
    All,
    /// Step indices `m`, where step `m` acts at calendar time `T - τ_m`.
    Steps(Vec<usize>),
}

impl ControlStorage {
    fn wants(&self, m: usize) -> bool {
        match self {
            Self::None => false,
            Self::All => true,
            Self::Steps(s) => s.contains(&m),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    pub tolerances: KernelTolerances,
    pub policy: ControlPolicy,
    pub controls: ControlStorage,
}

/// Which withdrawal branch a stored control belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Branch {
    None,
    ContinuousRate,
    FiniteAmount,
}

impl Branch {
    /// Decode a signed stored control into branch and amount.
    pub fn decode(signed: f64) -> (Self, f64) {
        if signed > 0.0 {
            (Self::ContinuousRate, signed)
        } else if signed < 0.0 {
            (Self::FiniteAmount, -signed)
        } else {
            (Self::None, 0.0)
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Self::None => "none",
            Self::ContinuousRate => "continuous-rate",
            Self::FiniteAmount => "finite-amount",
        }
    }
}

/// Optimal withdrawals of selected steps on the nodes left of the right
/// padding and on interior rate rows. Values are signed: positive for the
/// continuous-rate branch, negative for a finite withdrawal.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ControlField {
    /// Stored log-balance columns `0..nw`.
    pub nw: usize,
    /// Interior rate rows starting at storage row `r_offset`.
    pub nr: usize,
    pub r_offset: usize,
    pub na: usize,
    pub steps: BTreeMap<usize, Vec<f32>>,
}

impl ControlField {
    pub fn new(grid: &Grid) -> Self {
        Self {
            nw: grid.w_min_index + grid.n_w,
            nr: grid.r_interior().len(),
            r_offset: grid.r_interior().start,
            na: grid.na_nodes(),
            steps: BTreeMap::new(),
        }
    }

    fn layer_len(&self) -> usize {
        self.nw * self.nr * self.na
    }

    #[inline]
    fn index(&self, n: usize, k: usize, j: usize) -> usize {
        (j * self.nw + n) * self.nr + (k - self.r_offset)
    }

    pub fn layer(&self, m: usize) -> Result<&[f32]> {
        self.steps
            .get(&m)
            .map(|v| v.as_slice())
            .ok_or(GmwbError::ControlsNotStored(m))
    }

    /// Signed control at storage node `(n, k, j)` of step `m`.
    pub fn signed(&self, m: usize, n: usize, k: usize, j: usize) -> Result<f64> {
        if n >= self.nw || k < self.r_offset || k >= self.r_offset + self.nr || j >= self.na {
            return Err(GmwbError::IndexOutOfRange(format!(
                "control node ({n}, {k}, {j})"
            )));
        }
        Ok(self.layer(m)?[self.index(n, k, j)] as f64)
    }

    pub fn get(&self, m: usize, n: usize, k: usize, j: usize) -> Result<(Branch, f64)> {
        self.signed(m, n, k, j).map(Branch::decode)
    }

    fn store_slice(&mut self, m: usize, j: usize, slice: &[f64], slice_nr: usize) {
        let len = self.layer_len();
        let (nw, nr, off) = (self.nw, self.nr, self.r_offset);
        let layer = self.steps.entry(m).or_insert_with(|| vec![0.0; len]);
        for n in 0..nw {
            let dst = (j * nw + n) * nr;
            for i in 0..nr {
                layer[dst + i] = slice[n * slice_nr + off + i] as f32;
            }
        }
    }
}

/// Per-step stability record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepDiagnostic {
    pub step: usize,
    /// Largest ratio `|v| / bound` over all nodes; at most one.
    pub bound_ratio: f64,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Diagnostics {
    pub steps: Vec<StepDiagnostic>,
    pub kernel_seconds: f64,
    pub solve_seconds: f64,
    pub warnings: Vec<String>,
}

impl Diagnostics {
    pub fn max_bound_ratio(&self) -> f64 {
        self.steps.iter().fold(0.0, |m, s| m.max(s.bound_ratio))
    }
}

/// Result of a full backward solve.
#[derive(Debug, Clone)]
pub struct Solution {
    pub grid: Grid,
    pub params: ModelParams,
    pub contract: Contract,
    pub final_field: ValueField,
    pub controls: Option<ControlField>,
    pub kernel: Arc<KernelWeights>,
    pub diagnostics: Diagnostics,
}

impl Solution {
    /// Value at balance `z`, rate `r` and guarantee `a` at the valuation date.
    pub fn price_at(&self, z: f64, r: f64, a: f64) -> Result<f64> {
        if !(z > 0.0) {
            return Err(invalid("z", "balance must be > 0"));
        }
        interp3(&self.final_field, &self.grid, z.ln(), r, a)
    }

    /// Value at the contract's own initial state.
    pub fn price(&self) -> Result<f64> {
        let z0 = self.contract.premium;
        self.price_at(z0, self.params.r0, z0)
    }
}

/// Precomputed data shared by every step of a solve.
pub struct StepPlan<'a> {
    pub grid: &'a Grid,
    pub params: &'a ModelParams,
    pub contract: &'a Contract,
    candidates: Vec<CandidateSet>,
    departures: Departures,
    operator: RateOperator,
    convolver: Convolver,
    slice_ws: SliceWorkspace,
    left_ws: LeftPadWorkspace,
    interior_block: BranchBlock,
    left_block: BranchBlock,
    gathered: GatheredRows,
    gammas: Vec<f64>,
}

impl<'a> StepPlan<'a> {
    pub fn new(
        grid: &'a Grid,
        params: &'a ModelParams,
        contract: &'a Contract,
        kernel: &KernelWeights,
        policy: &ControlPolicy,
    ) -> Result<Self> {
        policy.validate()?;
        if kernel.nw != grid.nw_total || kernel.nr != grid.nr_total {
            return Err(GmwbError::DimensionMismatch(format!(
                "kernel {}x{} for a {}x{} lattice",
                kernel.nw, kernel.nr, grid.nw_total, grid.nr_total
            )));
        }
        if (kernel.dtau - grid.dtau).abs() > 1e-14 * grid.dtau.max(1.0) {
            return Err(GmwbError::DimensionMismatch(
                "kernel built for another timestep".into(),
            ));
        }
        Ok(Self {
            grid,
            params,
            contract,
            candidates: candidate_sets(grid, contract, policy),
            departures: Departures::new(grid, params)?,
            operator: RateOperator::new(grid, params)?,
            convolver: Convolver::new(kernel),
            slice_ws: SliceWorkspace::new(grid),
            left_ws: LeftPadWorkspace::default(),
            interior_block: BranchBlock::default(),
            left_block: BranchBlock::default(),
            gathered: GatheredRows::default(),
            gammas: vec![0.0; grid.slice_len()],
        })
    }

    /// Advance `v_m` at `τ_m` to `out` at `τ_{m+1}`, optionally recording
    /// the withdrawal strategy into `controls` under key `m`.
    pub fn step(
        &mut self,
        v_m: &ValueField,
        m: usize,
        out: &mut ValueField,
        mut controls: Option<&mut ControlField>,
    ) -> Result<()> {
        let grid = self.grid;
        v_m.check_dims(grid)?;
        out.check_dims(grid)?;
        let level = BoundaryLevel::new(grid, self.params, grid.tau(m + 1));
        let ctx = StepContext {
            grid,
            params: self.params,
            contract: self.contract,
            candidates: &self.candidates,
            departures: &self.departures,
        };
        let left = LeftPadContext {
            grid,
            contract: self.contract,
            operator: &self.operator,
            level: &level,
        };
        self.gathered.refill(v_m, grid.r_interior());
        let na = grid.na_nodes();
        for start in (0..na).step_by(SLICE_CHUNK) {
            let chunk = start..(start + SLICE_CHUNK).min(na);
            let (contract, sets) = (self.contract, &self.candidates);
            for (block, rows, shift) in [
                (&mut self.interior_block, grid.w_interior(), true),
                (&mut self.left_block, grid.w_left(), false),
            ] {
                intervene_block(
                    &self.gathered,
                    grid,
                    contract,
                    sets,
                    chunk.clone(),
                    rows,
                    shift,
                    block,
                );
            }
            for j in chunk {
                let slice = out.slice_mut(j);
                let record = controls.is_some();
                advance_interior_slice(
                    v_m,
                    j,
                    &ctx,
                    &self.interior_block,
                    &mut self.convolver,
                    &mut self.slice_ws,
                    slice,
                    record.then_some(self.gammas.as_mut_slice()),
                )?;
                wmax_slice(slice, grid, &level);
                corner_slice(slice, grid, self.contract, &level, grid.a_nodes[j]);
                step_wmin_slice(
                    j,
                    !self.candidates[j].finite.is_empty(),
                    &self.left_block,
                    &left,
                    &mut self.left_ws,
                    slice,
                    record.then_some(self.gammas.as_mut_slice()),
                )?;
                if let Some(c) = controls.as_deref_mut() {
                    c.store_slice(m, j, &self.gammas, grid.nr_total);
                }
            }
        }
        out.step = m + 1;
        Ok(())
    }
}

/// Largest `|v| / bound` of the discrete stability bound after `steps` steps.
pub fn stability_ratio(field: &ValueField, grid: &Grid, v0_norm: f64, eps: f64, steps: usize) -> f64 {
    let s = steps as f64;
    let c = grid.r_min.abs() / (1.0 + grid.dtau * grid.r_min);
    let growth = (2.0 * s * eps * grid.dtau / grid.maturity + c * s * grid.dtau).exp();
    (0..field.na)
        .map(|j| {
            let bound = growth * (v0_norm + grid.a_nodes[j]);
            field.slice(j).iter().fold(0.0f64, |m, v| m.max(v.abs())) / bound
        })
        .fold(0.0, f64::max)
}

/// Full solve including kernel selection.
pub fn solve(grid: &Grid, params: &ModelParams, contract: &Contract, cfg: &SolverConfig) -> Result<Solution> {
    let start = Instant::now();
    let kernel = Arc::new(select_weights(grid, params, &cfg.tolerances)?);
    let kernel_seconds = start.elapsed().as_secs_f64();
    let mut sol = solve_with_kernel(grid, params, contract, kernel, cfg)?;
    sol.diagnostics.kernel_seconds = kernel_seconds;
    Ok(sol)
}

/// Full solve reusing previously selected weights, which do not depend on
/// the fee.
pub fn solve_with_kernel(
    grid: &Grid,
    params: &ModelParams,
    contract: &Contract,
    kernel: Arc<KernelWeights>,
    cfg: &SolverConfig,
) -> Result<Solution> {
    params.validate()?;
    contract.validate()?;
    let start = Instant::now();
    let mut plan = StepPlan::new(grid, params, contract, &kernel, &cfg.policy)?;
    let mut current = initial_condition(grid, contract);
    let mut next = ValueField::zeros(grid);
    let v0_norm = current.norm_inf();
    let mut controls = (cfg.controls != ControlStorage::None).then(|| ControlField::new(grid));
    let mut diagnostics = Diagnostics {
        warnings: grid.warnings.clone(),
        ..Default::default()
    };
    for m in 0..grid.n_tau {
        let record = if cfg.controls.wants(m) {
            controls.as_mut()
        } else {
            None
        };
        plan.step(&current, m, &mut next, record)?;
        std::mem::swap(&mut current, &mut next);
        let ratio = stability_ratio(&current, grid, v0_norm, cfg.tolerances.eps, m + 1);
        if !(ratio <= 1.0) {
            let (mut value, mut bound) = (f64::NAN, f64::NAN);
            let s = (m + 1) as f64;
            let c = grid.r_min.abs() / (1.0 + grid.dtau * grid.r_min);
            let growth = (2.0 * s * cfg.tolerances.eps * grid.dtau / grid.maturity + c * s * grid.dtau).exp();
            for j in 0..current.na {
                let top = current.slice(j).iter().fold(0.0f64, |a, v| a.max(v.abs()));
                let b = growth * (v0_norm + grid.a_nodes[j]);
                if !(top <= b) {
                    (value, bound) = (top, b);
                    break;
                }
            }
            return Err(GmwbError::StabilityViolation {
                step: m + 1,
                value,
                bound,
            });
        }
        diagnostics.steps.push(StepDiagnostic {
            step: m + 1,
            bound_ratio: ratio,
        });
        log::debug!("step {}/{}: bound ratio {ratio:.3e}", m + 1, grid.n_tau);
    }
    diagnostics.solve_seconds = start.elapsed().as_secs_f64();
    Ok(Solution {
        grid: grid.clone(),
        params: *params,
        contract: *contract,
        final_field: current,
        controls,
        kernel,
        diagnostics,
    })
}

/// Settings of the fair-fee iteration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeeSearch {
    pub lo: f64,
    pub hi: f64,
    /// Relative tolerance on `price - z0`.
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FeeSearch {
    fn default() -> Self {
        Self {
            lo: 0.0,
            hi: 0.2,
            tol: 1e-6,
            max_iter: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FeeResult {
    pub fee: f64,
    pub price: f64,
    /// Full solves after the two bracket evaluations.
    pub iterations: usize,
    /// `(β, price)` of every solve in order.
    pub history: Vec<(f64, f64)>,
}

/// Fee making the contract value equal to the premium, by a bracketed
/// secant iteration with the Illinois modification.
pub fn fair_fee(
    grid: &Grid,
    params: &ModelParams,
    contract: &Contract,
    cfg: &SolverConfig,
    search: &FeeSearch,
) -> Result<FeeResult> {
    if !(search.tol > 0.0) || !(search.hi > search.lo) {
        return Err(invalid("fee search", "need tol > 0 and hi > lo"));
    }
    let kernel = Arc::new(select_weights(grid, params, &cfg.tolerances)?);
    let z0 = contract.premium;
    let cfg = SolverConfig {
        controls: ControlStorage::None,
        ..cfg.clone()
    };
    let mut history = Vec::new();
    let mut eval = |beta: f64| -> Result<f64> {
        let p = params.with_beta(beta);
        let price = solve_with_kernel(grid, &p, contract, kernel.clone(), &cfg)?.price()?;
        log::info!("fee {beta:.6}: price {price:.6}");
        history.push((beta, price));
        Ok(price - z0)
    };
    let (mut a, mut b) = (search.lo, search.hi);
    let (mut fa, mut fb) = (eval(a)?, eval(b)?);
    if fa == 0.0 || fb == 0.0 {
        let fee = if fa == 0.0 { a } else { b };
        return Ok(FeeResult {
            fee,
            price: z0,
            iterations: 0,
            history,
        });
    }
    if fa.signum() == fb.signum() {
        return Err(GmwbError::NoSignChange {
            lo: a,
            hi: b,
            f_lo: fa,
            f_hi: fb,
        });
    }
    let mut side = 0i8;
    for it in 1..=search.max_iter {
        let c = (a * fb - b * fa) / (fb - fa);
        let fc = eval(c)?;
        if fc.abs() < search.tol * z0 {
            return Ok(FeeResult {
                fee: c,
                price: fc + z0,
                iterations: it,
                history,
            });
        }
        if fc.signum() == fb.signum() {
            b = c;
            fb = fc;
            if side == -1 {
                fa *= 0.5;
            }
            side = -1;
        } else {
            a = c;
            fa = fc;
            if side == 1 {
                fb *= 0.5;
            }
            side = 1;
        }
    }
    Err(GmwbError::NotConverged {
        iterations: search.max_iter,
        residual: fa.abs().min(fb.abs()),
    })
}

/// One point of a control map.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ControlPoint {
    pub z: f64,
    pub a: f64,
    pub gamma: f64,
    pub branch: Branch,
}

/// Step index acting at calendar time `t`.
pub fn step_at_time(grid: &Grid, t: f64) -> Result<usize> {
    if !(0.0..=grid.maturity).contains(&t) {
        return Err(invalid("t", format!("must lie in [0, {}]", grid.maturity)));
    }
    let m = (grid.n_tau as f64 * (1.0 - t / grid.maturity)).round() as usize;
    Ok(m.min(grid.n_tau - 1))
}

/// Strategy at calendar time `t` on the interior rate row nearest `r_spot`,
/// over all stored balances and guarantees.
pub fn control_map(sol: &Solution, t: f64, r_spot: f64) -> Result<Vec<ControlPoint>> {
    let grid = &sol.grid;
    let controls = sol.controls.as_ref().ok_or(GmwbError::ControlsNotStored(0))?;
    let m = step_at_time(grid, t)?;
    controls.layer(m)?;
    let b = locate_r(grid, r_spot);
    let k = (if b.frac > 0.5 { b.lo + 1 } else { b.lo })
        .clamp(grid.r_interior().start, grid.r_interior().end - 1);
    let mut out = Vec::with_capacity(controls.nw * controls.na);
    for (j, &a) in grid.a_nodes.iter().enumerate() {
        for n in 0..controls.nw {
            let (branch, gamma) = controls.get(m, n, k, j)?;
            out.push(ControlPoint {
                z: grid.w_nodes[n].exp(),
                a,
                gamma,
                branch,
            });
        }
    }
    Ok(out)
}

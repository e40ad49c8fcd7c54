//! One backward timestep on the interior nodes: withdrawal optimisation,
//! semi-Lagrangian shift with discounting, Green's function convolution and
//! the maximum over the two withdrawal branches.

use std::ops::Range;

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, GmwbError, Result};
use crate::fft2::Fft2;
use crate::grid::Grid;
use crate::interp::{locate_a, locate_r, locate_w, Bracket, ValueField};
use crate::kernel::KernelWeights;
use crate::model::{Contract, ModelParams};

/// How the withdrawal suprema are discretised.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlPolicy {
    /// Intervals of the uniform candidate set on `[0, min(a, C_r Δτ)]`.
    pub local_candidates: usize,
    /// Extra candidates inside every guarantee cell for finite withdrawals.
    /// Off by default: the node offsets and kink points already pin the
    /// price to four decimals, at a third of the cost.
    pub refinements: usize,
}

impl Default for ControlPolicy {
    fn default() -> Self {
        Self {
            local_candidates: 8,
            refinements: 0,
        }
    }
}

impl ControlPolicy {
    pub fn validate(&self) -> Result<()> {
        if self.local_candidates == 0 {
            return Err(invalid("local_candidates", "must be >= 1"));
        }
        Ok(())
    }
}

/// Net cash received for withdrawing `gamma` over one timestep.
pub fn cashflow_f(gamma: f64, contract: &Contract, dtau: f64) -> f64 {
    let free = contract.withdraw_rate * dtau;
    if gamma <= free {
        gamma
    } else {
        gamma * (1.0 - contract.penalty) + contract.penalty * free - contract.fixed_cost
    }
}

/// One withdrawal candidate at a fixed guarantee level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub gamma: f64,
    pub cash: f64,
    /// Bracket of the post-withdrawal guarantee.
    pub a: Bracket,
}

/// Fixed candidates of one branch and its admissible interval.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct BranchCandidates {
    /// Increasing withdrawals shared by every node of the slice.
    pub fixed: Vec<Candidate>,
    pub lo: f64,
    pub hi: f64,
    /// Whether `lo` itself is excluded.
    pub lo_open: bool,
}

impl BranchCandidates {
    pub fn is_empty(&self) -> bool {
        self.fixed.is_empty()
    }

    fn admits(&self, gamma: f64) -> bool {
        gamma <= self.hi && (gamma > self.lo || (!self.lo_open && gamma == self.lo))
    }
}

/// Candidates of both branches at one guarantee node.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateSet {
    pub guarantee: f64,
    /// `γ ∈ [0, min(a, C_r Δτ)]`, starting at 0.
    pub local: BranchCandidates,
    /// `γ ∈ (C_r Δτ, a]`; empty when `a <= C_r Δτ`.
    pub finite: BranchCandidates,
}

fn a_bracket(grid: &Grid, post: f64) -> Bracket {
    let mut b = locate_a(grid, post.max(0.0));
    // Node hits read a single slice, so `lo` may be the last node.
    if b.frac < 1e-13 {
        b.frac = 0.0;
    } else if b.frac > 1.0 - 1e-13 {
        b = Bracket {
            lo: b.lo + 1,
            frac: 0.0,
        };
    }
    b
}

/// Candidate sets for every guarantee node.
pub fn candidate_sets(grid: &Grid, contract: &Contract, policy: &ControlPolicy) -> Vec<CandidateSet> {
    let free = contract.withdraw_rate * grid.dtau;
    let a = &grid.a_nodes;
    let make = |j: usize, gamma: f64| Candidate {
        gamma,
        cash: cashflow_f(gamma, contract, grid.dtau),
        a: a_bracket(grid, a[j] - gamma),
    };
    (0..a.len())
        .map(|j| {
            let cap = a[j].min(free);
            let local = if cap > 0.0 {
                (0..=policy.local_candidates)
                    .map(|i| make(j, cap * i as f64 / policy.local_candidates as f64))
                    .collect()
            } else {
                vec![make(j, 0.0)]
            };
            let mut gammas = Vec::new();
            let mut fixed = Vec::new();
            if a[j] > free {
                // Limit of the open lower end of the finite branch.
                fixed.push(Candidate {
                    gamma: free,
                    cash: free - contract.fixed_cost,
                    a: a_bracket(grid, a[j] - free),
                });
                for q in 0..j {
                    let g = a[j] - a[q];
                    if g > free {
                        gammas.push(g);
                    }
                    for i in 1..=policy.refinements {
                        let post = a[q] + (a[q + 1] - a[q]) * i as f64 / (policy.refinements + 1) as f64;
                        let g = a[j] - post;
                        if g > free {
                            gammas.push(g);
                        }
                    }
                }
                gammas.sort_by(|x, y| x.partial_cmp(y).unwrap());
                gammas.dedup();
            }
            CandidateSet {
                guarantee: a[j],
                local: BranchCandidates {
                    fixed: local,
                    lo: 0.0,
                    hi: cap,
                    lo_open: false,
                },
                finite: BranchCandidates {
                    fixed: {
                        fixed.extend(gammas.into_iter().map(|g| make(j, g)));
                        fixed
                    },
                    lo: free,
                    hi: a[j],
                    lo_open: true,
                },
            }
        })
        .collect()
}

// Branch-free updates of the running maximum so the loops vectorise. A
// candidate replaces the incumbent only when strictly better, so ties keep
// the earlier (smaller) withdrawal.
#[inline(always)]
fn relax1(best: &mut [f64], arg: &mut [f64], x: &[f64], cash: f64, gamma: f64) {
    let len = best.len();
    let (arg, x) = (&mut arg[..len], &x[..len]);
    for i in 0..len {
        let v = x[i] + cash;
        let better = v > best[i];
        best[i] = if better { v } else { best[i] };
        arg[i] = if better { gamma } else { arg[i] };
    }
}

#[inline(always)]
fn relax2(best: &mut [f64], arg: &mut [f64], x0: &[f64], x1: &[f64], t: f64, cash: f64, gamma: f64) {
    let len = best.len();
    let (arg, x0, x1) = (&mut arg[..len], &x0[..len], &x1[..len]);
    for i in 0..len {
        let v = x0[i] + t * (x1[i] - x0[i]) + cash;
        let better = v > best[i];
        best[i] = if better { v } else { best[i] };
        arg[i] = if better { gamma } else { arg[i] };
    }
}

#[inline(always)]
#[allow(clippy::too_many_arguments)]
fn relax4(best: &mut [f64], arg: &mut [f64], x: [&[f64]; 4], c: [f64; 4], cash: f64, gamma: f64) {
    let len = best.len();
    let arg = &mut arg[..len];
    let (x00, x01, x10, x11) = (&x[0][..len], &x[1][..len], &x[2][..len], &x[3][..len]);
    for i in 0..len {
        let v = c[0] * x00[i] + c[1] * x01[i] + c[2] * x10[i] + c[3] * x11[i] + cash;
        let better = v > best[i];
        best[i] = if better { v } else { best[i] };
        arg[i] = if better { gamma } else { arg[i] };
    }
}

/// Copy of a field restricted to a band of rate rows, reordered `[n][j][k]`
/// so that every guarantee slice of one log-balance row is contiguous. The
/// withdrawal search reads rows of many slices at once; in the field's own
/// layout those lie a power-of-two stride apart and thrash the cache.
#[derive(Debug, Clone, Default)]
pub struct GatheredRows {
    data: Vec<f64>,
    na: usize,
    cols: Range<usize>,
}

impl GatheredRows {
    pub fn gather(v_m: &ValueField, cols: Range<usize>) -> Self {
        let mut g = Self::default();
        g.refill(v_m, cols);
        g
    }

    /// Refill from `v_m`, reusing the allocation.
    pub fn refill(&mut self, v_m: &ValueField, cols: Range<usize>) {
        let width = cols.len();
        self.data.resize(v_m.nw * v_m.na * width, 0.0);
        for n in 0..v_m.nw {
            for j in 0..v_m.na {
                let src = (j * v_m.nw + n) * v_m.nr;
                let dst = (n * v_m.na + j) * width;
                self.data[dst..dst + width].copy_from_slice(&v_m.data[src + cols.start..src + cols.end]);
            }
        }
        self.na = v_m.na;
        self.cols = cols;
    }

    pub fn cols(&self) -> Range<usize> {
        self.cols.clone()
    }

    #[inline(always)]
    fn row(&self, j: usize, n: usize) -> &[f64] {
        let width = self.cols.len();
        let s = (n * self.na + j) * width;
        &self.data[s..s + width]
    }
}

/// Fold one candidate whose post-withdrawal log-balance has bracket
/// `(l, fw)` into the running maximum of a row.
#[inline(always)]
fn relax_candidate(src: &GatheredRows, l: usize, fw: f64, c: &Candidate, best: &mut [f64], arg: &mut [f64]) {
    let row = |jj: usize, nn: usize| src.row(jj, nn);
    let (q, fa) = (c.a.lo, c.a.frac);
    match (fw == 0.0, fa == 0.0) {
        (true, true) => relax1(best, arg, row(q, l), c.cash, c.gamma),
        (false, true) => relax2(best, arg, row(q, l), row(q, l + 1), fw, c.cash, c.gamma),
        (true, false) => relax2(best, arg, row(q, l), row(q + 1, l), fa, c.cash, c.gamma),
        (false, false) => relax4(
            best,
            arg,
            [row(q, l), row(q, l + 1), row(q + 1, l), row(q + 1, l + 1)],
            [(1.0 - fa) * (1.0 - fw), (1.0 - fa) * fw, fa * (1.0 - fw), fa * fw],
            c.cash,
            c.gamma,
        ),
    }
}

/// Running maxima over the withdrawals that empty the sub-account. Those
/// all land on the lowest log-balance node whatever the row, so the maximum
/// over candidates `i..` is shared by every row. Ties go to the smaller
/// withdrawal.
struct Tail {
    best: Vec<f64>,
    arg: Vec<f64>,
}

fn tail_maxima(src: &GatheredRows, branch: &BranchCandidates) -> Tail {
    let (len, width) = (branch.fixed.len(), src.cols.len());
    let mut best = vec![f64::NEG_INFINITY; len * width];
    let mut arg = vec![0.0; len * width];
    let mut cb = vec![f64::NEG_INFINITY; width];
    let mut cg = vec![0.0; width];
    for i in (0..len).rev() {
        cb.fill(f64::NEG_INFINITY);
        relax_candidate(src, 0, 0.0, &branch.fixed[i], &mut cb, &mut cg);
        let (head, rest) = best.split_at_mut((i + 1) * width);
        let (ahead, arest) = arg.split_at_mut((i + 1) * width);
        let (b, g) = (&mut head[i * width..], &mut ahead[i * width..]);
        for t in 0..width {
            let later = i + 1 < len && rest[t] > cb[t];
            b[t] = if later { rest[t] } else { cb[t] };
            g[t] = if later { arest[t] } else { cg[t] };
        }
    }
    Tail { best, arg }
}

/// Maximise `interp(v_m)(w̃, r_k, a - γ) + f(γ)` over the candidates of
/// `branch` at row `n`, writing the gathered rate rows into `best` and `arg`.
/// Besides the fixed candidates the row also tries the withdrawal that
/// exhausts its sub-account, where the objective has a kink.
///
/// With `tail` absent the post-withdrawal log-balance is left unchanged,
/// as on the left padding where the sub-account is worthless.
#[allow(clippy::too_many_arguments)]
fn intervene_row(
    src: &GatheredRows,
    grid: &Grid,
    contract: &Contract,
    set: &CandidateSet,
    branch: &BranchCandidates,
    tail: Option<&Tail>,
    n: usize,
    best: &mut [f64],
    arg: &mut [f64],
) {
    let width = src.cols.len();
    let fixed = &branch.fixed;
    best.fill(f64::NEG_INFINITY);
    let Some(tail) = tail else {
        for c in fixed {
            relax_candidate(src, n, 0.0, c, best, arg);
        }
        return;
    };
    let e_lo = grid.w_lo.exp();
    let e_w = grid.w_nodes[n].exp();
    let exhaust = e_w - e_lo;
    let cut = fixed.partition_point(|c| c.gamma < exhaust);
    for c in &fixed[..cut] {
        let (l, fw) = if c.gamma == 0.0 {
            (n, 0.0)
        } else {
            let mut bw = locate_w(grid, (e_w - c.gamma).max(e_lo).ln());
            if bw.frac < 1e-13 {
                bw.frac = 0.0;
            }
            (bw.lo, bw.frac)
        };
        relax_candidate(src, l, fw, c, best, arg);
    }
    if cut < fixed.len() {
        let tb = &tail.best[cut * width..(cut + 1) * width];
        let tg = &tail.arg[cut * width..(cut + 1) * width];
        for t in 0..width {
            let better = tb[t] > best[t];
            best[t] = if better { tb[t] } else { best[t] };
            arg[t] = if better { tg[t] } else { arg[t] };
        }
    }
    if exhaust > 0.0 && branch.admits(exhaust) {
        let c = Candidate {
            gamma: exhaust,
            cash: cashflow_f(exhaust, contract, grid.dtau),
            a: a_bracket(grid, set.guarantee - exhaust),
        };
        relax_candidate(src, 0, 0.0, &c, best, arg);
    }
}

/// Branch maxima and maximisers for a range of guarantee slices over a
/// block of rows and rate rows, stored `[j][n][k]` within the block.
#[derive(Debug, Clone, Default)]
pub struct BranchBlock {
    pub slices: Range<usize>,
    pub rows: Range<usize>,
    pub cols: Range<usize>,
    pub local: Vec<f64>,
    pub finite: Vec<f64>,
    pub gamma_local: Vec<f64>,
    pub gamma_finite: Vec<f64>,
}

impl BranchBlock {
    /// Storage range of row `n` of slice `j`.
    #[inline]
    pub fn row(&self, j: usize, n: usize) -> Range<usize> {
        let width = self.cols.len();
        let start = ((j - self.slices.start) * self.rows.len() + (n - self.rows.start)) * width;
        start..start + width
    }

    fn reset(&mut self, slices: Range<usize>, rows: Range<usize>, cols: Range<usize>) {
        let len = slices.len() * rows.len() * cols.len();
        for b in [
            &mut self.local,
            &mut self.finite,
            &mut self.gamma_local,
            &mut self.gamma_finite,
        ] {
            b.resize(len, 0.0);
        }
        self.slices = slices;
        self.rows = rows;
        self.cols = cols;
    }
}

/// Withdrawal optimisation for guarantee slices `slices` on `rows` and the
/// rate rows held by `src`.
///
/// Rows are the outer loop so the rows read by neighbouring guarantees stay
/// in cache. With `shift_w` false the log-balance is left unchanged by a
/// withdrawal.
#[allow(clippy::too_many_arguments)]
pub fn intervene_block(
    src: &GatheredRows,
    grid: &Grid,
    contract: &Contract,
    sets: &[CandidateSet],
    slices: Range<usize>,
    rows: Range<usize>,
    shift_w: bool,
    block: &mut BranchBlock,
) {
    block.reset(slices.clone(), rows.clone(), src.cols());
    let tails: Vec<(Option<Tail>, Option<Tail>)> = slices
        .clone()
        .map(|j| {
            let set = &sets[j];
            if shift_w {
                (
                    Some(tail_maxima(src, &set.local)),
                    (!set.finite.is_empty()).then(|| tail_maxima(src, &set.finite)),
                )
            } else {
                (None, None)
            }
        })
        .collect();
    for n in rows {
        for (j, (tl, tf)) in slices.clone().zip(&tails) {
            let set = &sets[j];
            let r = block.row(j, n);
            intervene_row(
                src,
                grid,
                contract,
                set,
                &set.local,
                tl.as_ref(),
                n,
                &mut block.local[r.clone()],
                &mut block.gamma_local[r.clone()],
            );
            if !set.finite.is_empty() {
                intervene_row(
                    src,
                    grid,
                    contract,
                    set,
                    &set.finite,
                    tf.as_ref(),
                    n,
                    &mut block.finite[r.clone()],
                    &mut block.gamma_finite[r],
                );
            }
        }
    }
}

/// Departure-point geometry of the semi-Lagrangian shift for interior rows.
#[derive(Debug, Clone)]
pub struct Departures {
    /// Per interior rate row: whole and fractional shift along `w` in cells.
    w_shift: Vec<(isize, f64)>,
    r_bracket: Vec<Bracket>,
    discount: Vec<f64>,
    cols: Range<usize>,
}

impl Departures {
    pub fn new(grid: &Grid, params: &ModelParams) -> Result<Self> {
        let dt = grid.dtau;
        let growth = dt.exp_m1();
        let decay = (-params.delta * dt).exp();
        let cols = grid.r_interior();
        let mut w_shift = Vec::with_capacity(cols.len());
        let mut r_bracket = Vec::with_capacity(cols.len());
        let mut discount = Vec::with_capacity(cols.len());
        for k in cols.clone() {
            let r = grid.r_nodes[k];
            let dw = (r - 0.5 * params.sigma_z * params.sigma_z - params.beta) * growth;
            let r_dep = params.theta + (r - params.theta) * decay;
            if !(dw.is_finite() && r_dep.is_finite()) {
                return Err(GmwbError::NonFiniteCoordinate("semi-Lagrangian departure point"));
            }
            let t = dw / grid.dw;
            let whole = t.floor();
            w_shift.push((whole as isize, t - whole));
            r_bracket.push(locate_r(grid, r_dep));
            discount.push(1.0 / (1.0 + dt * r));
        }
        Ok(Self {
            w_shift,
            r_bracket,
            discount,
            cols,
        })
    }

    /// Discounted interpolant of `branch` at the departure point of `(n, k)`.
    #[inline]
    fn value(&self, branch: &[f64], nw: usize, nr: usize, n: usize, ki: usize) -> f64 {
        let (whole, frac) = self.w_shift[ki];
        let lo = n as isize + whole;
        let (l, fw) = if lo < 0 {
            (0, 0.0)
        } else if lo as usize >= nw - 1 {
            (nw - 2, 1.0)
        } else {
            (lo as usize, frac)
        };
        let br = self.r_bracket[ki];
        let p = l * nr + br.lo;
        let (a0, a1) = (branch[p], branch[p + 1]);
        let (b0, b1) = (branch[p + nr], branch[p + nr + 1]);
        let lo_v = a0 + br.frac * (a1 - a0);
        let hi_v = b0 + br.frac * (b1 - b0);
        ((1.0 - fw) * lo_v + fw * hi_v) * self.discount[ki]
    }
}

/// Semi-Lagrangian shift of one slice. Interior nodes receive the discounted
/// interpolant at their departure points; padding nodes copy `boundary`.
pub fn sl_shift_slice(branch: &[f64], boundary: &[f64], grid: &Grid, dep: &Departures, out: &mut [f64]) {
    out.copy_from_slice(boundary);
    sl_shift_with(branch, grid, dep, |i, v| out[i] = v);
}

/// Shifted interior values handed to `put(index, value)`; padding untouched.
#[inline(always)]
fn sl_shift_with(branch: &[f64], grid: &Grid, dep: &Departures, mut put: impl FnMut(usize, f64)) {
    let nr = grid.nr_total;
    for n in grid.w_interior() {
        for (ki, k) in dep.cols.clone().enumerate() {
            put(n * nr + k, dep.value(branch, grid.nw_total, nr, n, ki));
        }
    }
}

/// Circular convolution with the Green's function weights.
pub struct Convolver {
    fft: Fft2,
    /// Fourier weights in `[r][w]` order, divided by the lattice size.
    multiplier_t: Vec<Complex64>,
}

impl Convolver {
    pub fn new(kernel: &KernelWeights) -> Self {
        let (nw, nr) = (kernel.nw, kernel.nr);
        let scale = 1.0 / (nw * nr) as f64;
        let mut multiplier_t = vec![Complex64::default(); nw * nr];
        for n in 0..nw {
            for k in 0..nr {
                multiplier_t[k * nw + n] = kernel.fourier[n * nr + k] * scale;
            }
        }
        Self {
            fft: Fft2::new(nw, nr),
            multiplier_t,
        }
    }

    /// Convolve a packed slice in place. Since the weights are real, the
    /// real and imaginary parts are convolved independently.
    pub fn apply(&mut self, data: &mut [Complex64]) -> Result<()> {
        self.fft.convolve(data, &self.multiplier_t)
    }
}

/// Convolve one real slice with the weights.
pub fn convolve(slice: &[f64], conv: &mut Convolver) -> Result<Vec<f64>> {
    let mut buf: Vec<Complex64> = slice.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    conv.apply(&mut buf)?;
    let scale = slice.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1.0);
    let imag = buf.iter().fold(0.0f64, |m, c| m.max(c.im.abs()));
    if imag > 1e-10 * scale {
        return Err(GmwbError::DimensionMismatch(format!(
            "imaginary residue {imag:.3e} after real convolution"
        )));
    }
    Ok(buf.into_iter().map(|c| c.re).collect())
}

/// Scratch buffers for advancing one guarantee slice.
pub struct SliceWorkspace {
    local: Vec<f64>,
    packed: Vec<Complex64>,
}

impl SliceWorkspace {
    pub fn new(grid: &Grid) -> Self {
        let len = grid.slice_len();
        Self {
            local: vec![0.0; len],
            packed: vec![Complex64::default(); len],
        }
    }
}

/// Immutable inputs shared by every slice of a step.
pub struct StepContext<'a> {
    pub grid: &'a Grid,
    pub params: &'a ModelParams,
    pub contract: &'a Contract,
    pub candidates: &'a [CandidateSet],
    pub departures: &'a Departures,
}

/// Advance the interior of slice `j` from `v_m` into `out` (slice-shaped),
/// given the withdrawal maxima of `block` on the interior nodes.
///
/// `controls`, when given, receives the chosen withdrawal per interior node
/// in slice layout: positive for the continuous-rate branch, negative for a
/// finite withdrawal, zero for none.
#[allow(clippy::too_many_arguments)]
pub fn advance_interior_slice(
    v_m: &ValueField,
    j: usize,
    ctx: &StepContext,
    block: &BranchBlock,
    conv: &mut Convolver,
    ws: &mut SliceWorkspace,
    out: &mut [f64],
    mut controls: Option<&mut [f64]>,
) -> Result<()> {
    let grid = ctx.grid;
    let nr = grid.nr_total;
    let boundary = v_m.slice(j);
    let has_finite = !ctx.candidates[j].finite.is_empty();
    let (rows, cols) = (block.rows.clone(), block.cols.clone());

    // Padding nodes carry the old boundary values into the shift.
    ws.local.copy_from_slice(boundary);
    for n in rows.clone() {
        ws.local[n * nr + cols.start..n * nr + cols.end].copy_from_slice(&block.local[block.row(j, n)]);
    }
    let packed = &mut ws.packed;
    for (p, &v) in packed.iter_mut().zip(boundary) {
        *p = Complex64::new(v, if has_finite { v } else { 0.0 });
    }
    sl_shift_with(&ws.local, grid, ctx.departures, |i, v| packed[i].re = v);
    if has_finite {
        for n in rows.clone() {
            ws.local[n * nr + cols.start..n * nr + cols.end].copy_from_slice(&block.finite[block.row(j, n)]);
        }
        sl_shift_with(&ws.local, grid, ctx.departures, |i, v| packed[i].im = v);
    }
    conv.apply(&mut ws.packed)?;

    for n in rows {
        let br = block.row(j, n);
        for (t, k) in cols.clone().enumerate() {
            let i = n * nr + k;
            let c = ws.packed[i];
            let (value, gamma) = if has_finite && c.im > c.re {
                (c.im, -block.gamma_finite[br.start + t])
            } else {
                (c.re, block.gamma_local[br.start + t])
            };
            out[i] = value;
            if let Some(ctrl) = controls.as_deref_mut() {
                ctrl[i] = gamma;
            }
        }
    }
    Ok(())
}

/// Intermediate values of both branches after the withdrawal step.
#[derive(Debug, Clone)]
pub struct BranchFields {
    pub local: ValueField,
    /// Meaningful only on slices where `finite_present[j]` is set.
    pub finite: ValueField,
    pub finite_present: Vec<bool>,
    pub gamma_local: ValueField,
    pub gamma_finite: ValueField,
}

/// Withdrawal optimisation on every interior node; padding nodes keep `v_m`.
pub fn intervene_interior(
    v_m: &ValueField,
    grid: &Grid,
    contract: &Contract,
    policy: &ControlPolicy,
) -> Result<BranchFields> {
    v_m.check_dims(grid)?;
    policy.validate()?;
    let sets = candidate_sets(grid, contract, policy);
    let mut block = BranchBlock::default();
    intervene_block(
        &GatheredRows::gather(v_m, grid.r_interior()),
        grid,
        contract,
        &sets,
        0..grid.na_nodes(),
        grid.w_interior(),
        true,
        &mut block,
    );
    let mut fields = BranchFields {
        local: v_m.clone(),
        finite: v_m.clone(),
        finite_present: sets.iter().map(|s| !s.finite.is_empty()).collect(),
        gamma_local: ValueField::zeros(grid),
        gamma_finite: ValueField::zeros(grid),
    };
    let cols = grid.r_interior();
    for j in 0..grid.na_nodes() {
        for n in grid.w_interior() {
            let src = block.row(j, n);
            let dst = v_m.index(n, cols.start, j)..v_m.index(n, cols.end, j);
            fields.local.data[dst.clone()].copy_from_slice(&block.local[src.clone()]);
            fields.gamma_local.data[dst.clone()].copy_from_slice(&block.gamma_local[src.clone()]);
            if fields.finite_present[j] {
                fields.finite.data[dst.clone()].copy_from_slice(&block.finite[src.clone()]);
                fields.gamma_finite.data[dst].copy_from_slice(&block.gamma_finite[src]);
            }
        }
    }
    Ok(fields)
}

/// Semi-Lagrangian shift of a whole field.
pub fn sl_shift(
    branch: &ValueField,
    boundary: &ValueField,
    grid: &Grid,
    params: &ModelParams,
) -> Result<ValueField> {
    branch.check_dims(grid)?;
    boundary.check_dims(grid)?;
    let dep = Departures::new(grid, params)?;
    let mut out = ValueField::zeros(grid);
    for j in 0..grid.na_nodes() {
        sl_shift_slice(branch.slice(j), boundary.slice(j), grid, &dep, out.slice_mut(j));
    }
    Ok(out)
}

/// Pointwise maximum of the two branches on the interior. Ties go to the
/// continuous-rate branch. Returns the values and the signed control.
pub fn combine_max(
    local: &ValueField,
    finite: Option<&ValueField>,
    gamma_local: &ValueField,
    gamma_finite: &ValueField,
) -> Result<(ValueField, ValueField)> {
    let mut value = local.clone();
    let mut gamma = gamma_local.clone();
    if let Some(f) = finite {
        if f.data.len() != local.data.len() {
            return Err(GmwbError::DimensionMismatch(
                "branch fields differ in size".into(),
            ));
        }
        for i in 0..value.data.len() {
            if f.data[i] > value.data[i] {
                value.data[i] = f.data[i];
                gamma.data[i] = -gamma_finite.data[i];
            }
        }
    }
    Ok((value, gamma))
}

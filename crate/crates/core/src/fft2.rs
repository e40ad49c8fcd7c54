//! Two-dimensional complex FFT on row-major `[w][r]` slices.

use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{GmwbError, Result};

/// Planned forward and inverse transforms for one slice shape.
pub struct Fft2 {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    transposed: Vec<Complex64>,
    scratch: Vec<Complex64>,
}

impl Fft2 {
    /// Plan for `rows x cols` slices where `cols` is the contiguous axis.
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        let row_fwd = planner.plan_fft_forward(cols);
        let row_inv = planner.plan_fft_inverse(cols);
        let col_fwd = planner.plan_fft_forward(rows);
        let col_inv = planner.plan_fft_inverse(rows);
        let scratch_len = [&row_fwd, &row_inv, &col_fwd, &col_inv]
            .iter()
            .map(|p| p.get_inplace_scratch_len())
            .max()
            .unwrap_or(0);
        Self {
            rows,
            cols,
            row_fwd,
            row_inv,
            col_fwd,
            col_inv,
            transposed: vec![Complex64::default(); rows * cols],
            scratch: vec![Complex64::default(); scratch_len],
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    /// Unnormalised forward transform, `exp(-2πi…)`.
    pub fn forward(&mut self, data: &mut [Complex64]) -> Result<()> {
        self.run(data, true)
    }

    /// Unnormalised inverse transform, `exp(+2πi…)`.
    pub fn inverse(&mut self, data: &mut [Complex64]) -> Result<()> {
        self.run(data, false)
    }

    /// Circular convolution: forward transform, multiply by `multiplier`
    /// (given in transposed `[r][w]` order), inverse transform. Unnormalised.
    pub fn convolve(&mut self, data: &mut [Complex64], multiplier_t: &[Complex64]) -> Result<()> {
        let n = self.rows * self.cols;
        if data.len() != n || multiplier_t.len() != n {
            return Err(GmwbError::DimensionMismatch(format!(
                "convolution of {} values with {} multipliers on a {}x{} lattice",
                data.len(),
                multiplier_t.len(),
                self.rows,
                self.cols
            )));
        }
        self.row_fwd.process_with_scratch(data, &mut self.scratch);
        transpose(data, &mut self.transposed, self.rows, self.cols);
        self.col_fwd
            .process_with_scratch(&mut self.transposed, &mut self.scratch);
        for (v, m) in self.transposed.iter_mut().zip(multiplier_t) {
            *v *= m;
        }
        self.col_inv
            .process_with_scratch(&mut self.transposed, &mut self.scratch);
        transpose(&self.transposed, data, self.cols, self.rows);
        self.row_inv.process_with_scratch(data, &mut self.scratch);
        Ok(())
    }

    fn run(&mut self, data: &mut [Complex64], forward: bool) -> Result<()> {
        if data.len() != self.rows * self.cols {
            return Err(GmwbError::DimensionMismatch(format!(
                "slice of {} values for a {}x{} transform",
                data.len(),
                self.rows,
                self.cols
            )));
        }
        let (row, col) = if forward {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };
        row.process_with_scratch(data, &mut self.scratch);
        transpose(data, &mut self.transposed, self.rows, self.cols);
        col.process_with_scratch(&mut self.transposed, &mut self.scratch);
        transpose(&self.transposed, data, self.cols, self.rows);
        Ok(())
    }
}

pub(crate) fn transpose(src: &[Complex64], dst: &mut [Complex64], rows: usize, cols: usize) {
    const B: usize = 16;
    for r0 in (0..rows).step_by(B) {
        for c0 in (0..cols).step_by(B) {
            for r in r0..(r0 + B).min(rows) {
                for c in c0..(c0 + B).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

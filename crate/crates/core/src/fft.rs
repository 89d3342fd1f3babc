//! Two-dimensional FFTs over row-major `ndarray` buffers.

use std::sync::Arc;

use ndarray::Array2;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Planned forward/inverse transforms for one `rows x cols` shape.
///
/// The forward transform is unnormalized; the inverse divides by `rows * cols`
/// so that `inverse(forward(x)) == x`.
pub struct Fft2 {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    pub fn new(rows: usize, cols: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            rows,
            cols,
            row_fwd: planner.plan_fft_forward(cols),
            row_inv: planner.plan_fft_inverse(cols),
            col_fwd: planner.plan_fft_forward(rows),
            col_inv: planner.plan_fft_inverse(rows),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn forward(&self, data: &mut Array2<Complex64>) {
        self.run(data, true);
    }

    pub fn inverse(&self, data: &mut Array2<Complex64>) {
        self.run(data, false);
        let scale = 1.0 / (self.rows * self.cols) as f64;
        data.mapv_inplace(|v| v * scale);
    }

    fn run(&self, data: &mut Array2<Complex64>, forward: bool) {
        assert_eq!(data.dim(), (self.rows, self.cols), "FFT shape mismatch");
        let (row_plan, col_plan) = if forward {
            (&self.row_fwd, &self.col_fwd)
        } else {
            (&self.row_inv, &self.col_inv)
        };
        let buf = data
            .as_slice_mut()
            .expect("FFT buffers must be contiguous row-major");
        // Rows are contiguous, so one batched call covers all of them.
        row_plan.process(buf);

        let mut column = vec![Complex64::default(); self.rows];
        for c in 0..self.cols {
            for (r, v) in column.iter_mut().enumerate() {
                *v = buf[r * self.cols + c];
            }
            col_plan.process(&mut column);
            for (r, v) in column.iter().enumerate() {
                buf[r * self.cols + c] = *v;
            }
        }
    }
}

/// Signed FFT frequency index for bin `k` of an `n`-point transform.
pub fn signed_index(k: usize, n: usize) -> f64 {
    if k < n.div_ceil(2) {
        k as f64
    } else {
        k as f64 - n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_identity() {
        let plan = Fft2::new(6, 10);
        let orig = Array2::from_shape_fn((6, 10), |(r, c)| {
            Complex64::new((r * 3 + c) as f64 * 0.1, (r as f64 - c as f64) * 0.05)
        });
        let mut x = orig.clone();
        plan.forward(&mut x);
        plan.inverse(&mut x);
        for (a, b) in x.iter().zip(orig.iter()) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn dc_bin_is_sum() {
        let plan = Fft2::new(4, 4);
        let mut x = Array2::from_elem((4, 4), Complex64::new(1.0, 0.0));
        plan.forward(&mut x);
        assert!((x[[0, 0]] - Complex64::new(16.0, 0.0)).norm() < 1e-12);
        assert!(x.iter().skip(1).all(|v| v.norm() < 1e-12));
    }

    #[test]
    fn signed_indices() {
        let idx: Vec<f64> = (0..5).map(|k| signed_index(k, 5)).collect();
        assert_eq!(idx, vec![0.0, 1.0, 2.0, -2.0, -1.0]);
        let idx: Vec<f64> = (0..4).map(|k| signed_index(k, 4)).collect();
        assert_eq!(idx, vec![0.0, 1.0, -2.0, -1.0]);
    }
}

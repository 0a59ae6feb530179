//! Orthonormal per-frame 2D DFT.
//!
//! Both directions are scaled by `1/sqrt(nx * ny)`, so the transform is
//! unitary and its adjoint equals its inverse.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub struct Fourier2d {
    nx: usize,
    ny: usize,
    scale: f64,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fourier2d {
    /// Returns a shared plan for `nx x ny` frames.
    pub fn plan(nx: usize, ny: usize) -> Arc<Fourier2d> {
        static CACHE: OnceLock<Mutex<HashMap<(usize, usize), Arc<Fourier2d>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        let mut guard = cache.lock().unwrap_or_else(|e| e.into_inner());
        guard
            .entry((nx, ny))
            .or_insert_with(|| Arc::new(Fourier2d::new(nx, ny)))
            .clone()
    }

    fn new(nx: usize, ny: usize) -> Self {
        let mut planner = FftPlanner::new();
        Fourier2d {
            nx,
            ny,
            scale: 1.0 / ((nx * ny) as f64).sqrt(),
            row_fwd: planner.plan_fft_forward(nx),
            row_inv: planner.plan_fft_inverse(nx),
            col_fwd: planner.plan_fft_forward(ny),
            col_inv: planner.plan_fft_inverse(ny),
        }
    }

    /// In-place forward transform of every frame in `data`.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.apply(data, &self.row_fwd, &self.col_fwd);
    }

    /// In-place inverse (= adjoint) transform of every frame in `data`.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.apply(data, &self.row_inv, &self.col_inv);
    }

    fn apply(&self, data: &mut [Complex64], rows: &Arc<dyn Fft<f64>>, cols: &Arc<dyn Fft<f64>>) {
        let (nx, ny) = (self.nx, self.ny);
        let frame = nx * ny;
        assert_eq!(data.len() % frame, 0, "buffer is not a whole number of frames");
        let mut scratch = vec![
            Complex64::default();
            rows.get_inplace_scratch_len().max(cols.get_inplace_scratch_len())
        ];
        let mut transposed = vec![Complex64::default(); frame];
        for f in data.chunks_exact_mut(frame) {
            rows.process_with_scratch(f, &mut scratch);
            for y in 0..ny {
                for x in 0..nx {
                    transposed[y + ny * x] = f[x + nx * y];
                }
            }
            cols.process_with_scratch(&mut transposed, &mut scratch);
            for x in 0..nx {
                for y in 0..ny {
                    f[x + nx * y] = transposed[y + ny * x] * self.scale;
                }
            }
        }
    }
}

/// Signed frequency of DFT bin `i` out of `n` (`0, 1, .., -2, -1`).
pub fn signed_frequency(i: usize, n: usize) -> i64 {
    let i = i as i64;
    let n = n as i64;
    if i < (n + 1) / 2 {
        i
    } else {
        i - n
    }
}

/// DFT bin holding signed frequency `f`.
pub fn bin_of_frequency(f: i64, n: usize) -> usize {
    f.rem_euclid(n as i64) as usize
}

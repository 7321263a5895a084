//! Centered 2-D DFT on square grids.
//!
//! Index `i` on an axis of length `n` stands for the signed coordinate
//! `i - n/2`, in both image and k-space. The forward transform is
//! unnormalized; the inverse carries the `1/n²` factor.

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayViewMut2, Axis};
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

#[derive(Clone)]
pub struct Fft2 {
    n: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    /// `e^{-j2π ky·y/n}` indexed `[ky, y]`, centered coordinates.
    dft_y: Arc<Array2<Complex64>>,
}

impl std::fmt::Debug for Fft2 {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Fft2").field("n", &self.n).finish()
    }
}

impl Fft2 {
    pub fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        let dft_y = Array2::from_shape_fn((n, n), |(ky, y)| {
            let ph = -2.0 * std::f64::consts::PI * (coord(ky, n) * coord(y, n)) as f64 / n as f64;
            Complex64::from_polar(1.0, ph)
        });
        Fft2 {
            n,
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
            dft_y: Arc::new(dft_y),
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn forward(&self, x: &Array2<Complex64>) -> Array2<Complex64> {
        let mut y = x.clone();
        self.forward_inplace(&mut y);
        y
    }

    pub fn inverse(&self, x: &Array2<Complex64>) -> Array2<Complex64> {
        let mut y = x.clone();
        self.inverse_inplace(&mut y);
        y
    }

    pub fn forward_inplace(&self, x: &mut Array2<Complex64>) {
        self.transform(x.view_mut(), false);
    }

    pub fn inverse_inplace(&self, x: &mut Array2<Complex64>) {
        self.transform(x.view_mut(), true);
        let scale = 1.0 / (self.n * self.n) as f64;
        x.mapv_inplace(|v| v * scale);
    }

    /// Row `ky` of the forward transform, without computing the others.
    pub fn forward_line(&self, x: &Array2<Complex64>, ky: usize) -> Array1<Complex64> {
        let w = self.dft_y.row(ky);
        let mut line = Array1::zeros(self.n);
        for (y, row) in x.outer_iter().enumerate() {
            line.scaled_add(w[y], &row);
        }
        self.transform_1d(line.as_slice_mut().unwrap(), false);
        line
    }

    /// Adds `weight · Fᴴ(v placed on row ky)` into `out`.
    ///
    /// `Fᴴ` is the adjoint of the unnormalized forward transform, i.e.
    /// `n²` times the inverse.
    pub fn adjoint_line_accumulate(
        &self,
        v: &Array1<Complex64>,
        ky: usize,
        weight: Complex64,
        out: &mut Array2<Complex64>,
    ) {
        let mut line = v.to_owned();
        self.transform_1d(line.as_slice_mut().unwrap(), true);
        let w = self.dft_y.row(ky);
        for (y, mut row) in out.outer_iter_mut().enumerate() {
            row.scaled_add(w[y].conj() * weight, &line);
        }
    }

    /// Row `ky` of the forward transform of `x ∘ weight`.
    pub fn weighted_forward_line(&self, x: &Array2<Complex64>, weight: &Array2<Complex64>, ky: usize) -> Array1<Complex64> {
        let n = self.n;
        let w = self.dft_y.row(ky);
        let mut line = vec![Complex64::new(0.0, 0.0); n];
        for y in 0..n {
            let (xr, wr) = (x.row(y), weight.row(y));
            let wy = w[y];
            for ((l, a), b) in line.iter_mut().zip(xr.iter()).zip(wr.iter()) {
                *l += wy * a * b;
            }
        }
        self.transform_1d(&mut line, false);
        Array1::from_vec(line)
    }

    /// Adds `conj_weight ∘ Fᴴ(rows)` into `out`, where `rows` are spectra placed on their `ky`.
    pub fn weighted_adjoint_lines(&self, rows: &[(usize, Array1<Complex64>)], conj_weight: &Array2<Complex64>, out: &mut Array2<Complex64>) {
        let n = self.n;
        let spatial: Vec<(usize, Vec<Complex64>)> = rows
            .iter()
            .map(|(ky, v)| {
                let mut line = v.to_vec();
                self.transform_1d(&mut line, true);
                (*ky, line)
            })
            .collect();
        let mut acc = vec![Complex64::new(0.0, 0.0); n];
        for y in 0..n {
            acc.iter_mut().for_each(|a| *a = Complex64::new(0.0, 0.0));
            for (ky, line) in &spatial {
                let c = self.dft_y[[*ky, y]].conj();
                for (a, l) in acc.iter_mut().zip(line) {
                    *a += c * l;
                }
            }
            let (mut orow, wrow) = (out.row_mut(y), conj_weight.row(y));
            for ((o, a), w) in orow.iter_mut().zip(&acc).zip(wrow.iter()) {
                *o += w * a;
            }
        }
    }

    fn transform_1d(&self, data: &mut [Complex64], inverse: bool) {
        let n = self.n;
        let h = n / 2;
        let plan = if inverse { &self.inv } else { &self.fwd };
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for i in 0..n {
            buf[(i + n - h) % n] = data[i];
        }
        plan.process(&mut buf);
        for j in 0..n {
            data[(j + h) % n] = buf[j];
        }
    }

    fn transform(&self, mut x: ArrayViewMut2<Complex64>, inverse: bool) {
        assert_eq!(x.dim(), (self.n, self.n), "Fft2 grid mismatch");
        let plan = if inverse { &self.inv } else { &self.fwd };
        let n = self.n;
        let h = n / 2;
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        let mut scratch = vec![Complex64::new(0.0, 0.0); plan.get_inplace_scratch_len()];
        for axis in [Axis(1), Axis(0)] {
            for mut lane in x.lanes_mut(axis) {
                // centered index i holds coordinate i - h, which lives at (i - h) mod n
                for i in 0..n {
                    buf[(i + n - h) % n] = lane[i];
                }
                plan.process_with_scratch(&mut buf, &mut scratch);
                for j in 0..n {
                    lane[(j + h) % n] = buf[j];
                }
            }
        }
    }
}

/// Signed coordinate of centered index `i` on an axis of length `n`.
#[inline]
pub fn coord(i: usize, n: usize) -> isize {
    i as isize - (n / 2) as isize
}

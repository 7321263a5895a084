//! Multi-fold Toeplitz lifting of k-t volumes.
//!
//! Row `(n, ky, kx)` of the lifting holds the samples
//! `ρ̂[n − τδ, ky − cy, kx − cx]` for every `(τ, cy, cx)` in the filter
//! support `Λ`, so the product with a filter `d̂` is the 3-D convolution
//! `Σ ρ̂[K − κ, n − τδ]·d̂[κ, τ]`. Columns are ordered with `cx` fastest,
//! then `cy`, then `τ`. Only rows whose whole neighborhood is measured are
//! ever used.

use nalgebra::DMatrix;
use ndarray::{Array2, Array3, Axis};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::model::{KTVolume, SamplingMask};

/// Rectangular `f_x × f_y × 2` support with temporal taps at frames `n` and `n − δ`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterSpec {
    pub fx: usize,
    pub fy: usize,
    pub delta: usize,
}

impl FilterSpec {
    pub fn new(fx: usize, fy: usize, delta: usize) -> Result<Self> {
        if fx == 0 || fy == 0 || delta == 0 {
            return Err(Error::Params(format!("filter {fx}x{fy} with delta {delta}: all must be positive")));
        }
        Ok(FilterSpec { fx, fy, delta })
    }

    /// `|Λ| = f_x·f_y·2`
    pub fn len(&self) -> usize {
        self.fx * self.fy * 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Spatial offsets along one axis: `−⌊f/2⌋ .. −⌊f/2⌋ + f`.
    pub fn offsets(f: usize) -> std::ops::Range<isize> {
        let lo = -((f / 2) as isize);
        lo..lo + f as isize
    }

    pub fn column(&self, tau: usize, iy: usize, ix: usize) -> usize {
        ix + self.fx * (iy + self.fy * tau)
    }

    /// `(τ, cy, cx)` of column `c`.
    pub fn coords(&self, c: usize) -> (usize, isize, isize) {
        let ix = c % self.fx;
        let iy = (c / self.fx) % self.fy;
        let tau = c / (self.fx * self.fy);
        let lx = -((self.fx / 2) as isize);
        let ly = -((self.fy / 2) as isize);
        (tau, ly + iy as isize, lx + ix as isize)
    }

    /// `√(kx² + ky²)` per column, the weights of the smoothness penalty.
    pub fn frequency_radius(&self) -> Vec<f64> {
        (0..self.len())
            .map(|c| {
                let (_, cy, cx) = self.coords(c);
                ((cx * cx + cy * cy) as f64).sqrt()
            })
            .collect()
    }

    /// Places one temporal tap block on an `N × N` centered k-space grid.
    pub fn kernel(&self, d: &[Complex64], tau: usize, n: usize) -> Array2<Complex64> {
        let mut k = Array2::zeros((n, n));
        let h = (n / 2) as isize;
        for c in 0..self.fx * self.fy {
            let col = c + tau * self.fx * self.fy;
            let (_, cy, cx) = self.coords(col);
            k[[(cy + h) as usize, (cx + h) as usize]] = d[col];
        }
        k
    }

    /// Zero-padded inverse DFT of each temporal tap block: the filter's
    /// spatial-domain taps `(μ⁽¹⁾, μ⁽²⁾)`.
    pub fn to_image(&self, d: &[Complex64], fft: &Fft2) -> [Array2<Complex64>; 2] {
        let n = fft.n();
        [fft.inverse(&self.kernel(d, 0, n)), fft.inverse(&self.kernel(d, 1, n))]
    }

    fn check_fits(&self, n: usize) -> Result<()> {
        if self.fx > n || self.fy > n {
            return Err(Error::Params(format!("filter {}x{} exceeds the {n}x{n} grid", self.fx, self.fy)));
        }
        Ok(())
    }
}

/// Convolution output locations `(n, ky, kx)` whose full neighborhood is
/// measured, frame slowest and `kx` fastest.
pub fn valid_rows(mask: &SamplingMask, spec: &FilterSpec) -> Result<Vec<[usize; 3]>> {
    let n = mask.n();
    spec.check_fits(n)?;
    let m = mask.measured();
    let mut rows = Vec::new();
    let ys: Vec<isize> = FilterSpec::offsets(spec.fy).collect();
    let xs: Vec<isize> = FilterSpec::offsets(spec.fx).collect();
    let x_lo = *xs.last().unwrap();
    let x_hi = n as isize - 1 + xs[0];
    let y_lo = *ys.last().unwrap();
    let y_hi = n as isize - 1 + ys[0];
    for frame in spec.delta..mask.frames() {
        for ky in y_lo.max(0)..=y_hi {
            for kx in x_lo.max(0)..=x_hi {
                let ok = (0..2).all(|tau| {
                    let f = frame - tau * spec.delta;
                    ys.iter().all(|cy| xs.iter().all(|cx| m[[f, (ky - cy) as usize, (kx - cx) as usize]]))
                });
                if ok {
                    rows.push([frame, ky as usize, kx as usize]);
                }
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::NoValidRows(format!(
            "no {}x{}x2 neighborhood with delta {} is fully measured; shrink f_y or coarsen the calibration segments",
            spec.fx, spec.fy, spec.delta
        )));
    }
    Ok(rows)
}

/// The fully sampled rows of the lifting as an explicit patch operator.
#[derive(Clone, Debug)]
pub struct ToeplitzLift {
    pub spec: FilterSpec,
    pub rows: Vec<[usize; 3]>,
    shape: (usize, usize, usize),
    /// Flat volume index of entry `(row, column)`, row-major.
    index: Vec<usize>,
}

impl ToeplitzLift {
    pub fn new(mask: &SamplingMask, spec: &FilterSpec) -> Result<Self> {
        let rows = valid_rows(mask, spec)?;
        let shape = mask.measured().dim();
        let (_, ny, nx) = shape;
        let l = spec.len();
        let mut index = Vec::with_capacity(rows.len() * l);
        for &[f, ky, kx] in &rows {
            for c in 0..l {
                let (tau, cy, cx) = spec.coords(c);
                let src_f = f - tau * spec.delta;
                let y = (ky as isize - cy) as usize;
                let x = (kx as isize - cx) as usize;
                index.push((src_f * ny + y) * nx + x);
            }
        }
        Ok(ToeplitzLift { spec: *spec, rows, shape, index })
    }

    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.shape
    }

    /// `T_s(x)`: rows of the lifting of `x` at the valid locations.
    pub fn gather(&self, x: &Array3<Complex64>) -> DMatrix<Complex64> {
        assert_eq!(x.dim(), self.shape, "volume shape");
        let flat = x.as_standard_layout();
        let flat = flat.as_slice().expect("standard layout");
        let l = self.spec.len();
        DMatrix::from_fn(self.rows.len(), l, |r, c| flat[self.index[r * l + c]])
    }

    /// Adjoint of [`gather`](Self::gather): accumulates patch entries back onto the volume.
    pub fn scatter(&self, p: &DMatrix<Complex64>) -> Array3<Complex64> {
        let l = self.spec.len();
        assert_eq!((p.nrows(), p.ncols()), (self.rows.len(), l), "patch matrix shape");
        let mut out = vec![Complex64::new(0.0, 0.0); self.shape.0 * self.shape.1 * self.shape.2];
        for r in 0..self.rows.len() {
            for c in 0..l {
                out[self.index[r * l + c]] += p[(r, c)];
            }
        }
        Array3::from_shape_vec(self.shape, out).expect("shape")
    }
}

/// `T_s` of one or more coil volumes, stacked vertically.
pub fn build_ts(vols: &[KTVolume], spec: &FilterSpec) -> Result<DMatrix<Complex64>> {
    let first = vols.first().ok_or_else(|| Error::Params("no volumes".into()))?;
    for v in vols {
        if v.mask.measured() != first.mask.measured() {
            return Err(Error::Shape("coil volumes have different sampling masks".into()));
        }
    }
    let lift = ToeplitzLift::new(&first.mask, spec)?;
    let blocks: Vec<DMatrix<Complex64>> = vols.iter().map(|v| lift.gather(&v.data)).collect();
    let rows = lift.n_rows();
    let mut ts = DMatrix::zeros(rows * vols.len(), spec.len());
    for (i, b) in blocks.iter().enumerate() {
        ts.rows_mut(i * rows, rows).copy_from(b);
    }
    Ok(ts)
}

/// `R = T_sᴴ T_s`
pub fn gram(ts: &DMatrix<Complex64>) -> DMatrix<Complex64> {
    let r = ts.adjoint() * ts;
    // exact Hermitian symmetry regardless of summation order
    (&r + r.adjoint()) * Complex64::new(0.5, 0.0)
}

/// FFT form of the lifting for a single filter: `x ↦ (x ⊛ d̂)` on the valid rows.
#[derive(Clone, Debug)]
pub struct ConvLift {
    spec: FilterSpec,
    fft: Fft2,
    frames: usize,
    /// `valid[n][ky, kx]`
    valid: Array3<bool>,
}

impl ConvLift {
    pub fn new(mask: &SamplingMask, spec: &FilterSpec) -> Result<Self> {
        let rows = valid_rows(mask, spec)?;
        let mut valid = Array3::from_elem(mask.measured().dim(), false);
        for [f, y, x] in rows {
            valid[[f, y, x]] = true;
        }
        Ok(ConvLift { spec: *spec, fft: Fft2::new(mask.n()), frames: mask.frames(), valid })
    }

    fn kernels(&self, d: &[Complex64]) -> Result<[Array2<Complex64>; 2]> {
        if d.len() != self.spec.len() {
            return Err(Error::Shape(format!("filter has {} taps, support needs {}", d.len(), self.spec.len())));
        }
        let n = self.fft.n();
        Ok([self.fft.forward(&self.spec.kernel(d, 0, n)), self.fft.forward(&self.spec.kernel(d, 1, n))])
    }

    fn check(&self, x: &Array3<Complex64>) -> Result<()> {
        if x.dim() != self.valid.dim() {
            return Err(Error::Shape(format!("volume {:?} vs lifting {:?}", x.dim(), self.valid.dim())));
        }
        Ok(())
    }

    /// Convolution outputs at every valid row, zero elsewhere.
    pub fn apply(&self, x: &Array3<Complex64>, d: &[Complex64]) -> Result<Array3<Complex64>> {
        self.check(x)?;
        let [k0, k1] = self.kernels(d)?;
        let spectra: Vec<Array2<Complex64>> =
            (0..self.frames).into_par_iter().map(|f| self.fft.forward(&x.index_axis(Axis(0), f).to_owned())).collect();
        let n = self.fft.n();
        let out: Vec<Array2<Complex64>> = (0..self.frames)
            .into_par_iter()
            .map(|f| {
                if f < self.spec.delta {
                    return Array2::zeros((n, n));
                }
                let mut prod = &spectra[f] * &k0 + &spectra[f - self.spec.delta] * &k1;
                self.fft.inverse_inplace(&mut prod);
                ndarray::Zip::from(&mut prod).and(self.valid.index_axis(Axis(0), f)).for_each(|v, &ok| {
                    if !ok {
                        *v = Complex64::new(0.0, 0.0);
                    }
                });
                prod
            })
            .collect();
        Ok(stack(&out))
    }

    /// Adjoint of [`apply`](Self::apply) in the volume.
    pub fn adjoint(&self, res: &Array3<Complex64>, d: &[Complex64]) -> Result<Array3<Complex64>> {
        self.check(res)?;
        let [k0, k1] = self.kernels(d)?;
        let (c0, c1) = (k0.mapv(|v| v.conj()), k1.mapv(|v| v.conj()));
        let n = self.fft.n();
        let spectra: Vec<Array2<Complex64>> = (0..self.frames)
            .into_par_iter()
            .map(|f| {
                let mut r = res.index_axis(Axis(0), f).to_owned();
                ndarray::Zip::from(&mut r).and(self.valid.index_axis(Axis(0), f)).for_each(|v, &ok| {
                    if !ok {
                        *v = Complex64::new(0.0, 0.0);
                    }
                });
                self.fft.forward(&r)
            })
            .collect();
        let delta = self.spec.delta;
        let out: Vec<Array2<Complex64>> = (0..self.frames)
            .into_par_iter()
            .map(|f| {
                let mut acc = Array2::zeros((n, n));
                if f >= delta {
                    acc += &(&spectra[f] * &c0);
                }
                if f + delta < self.frames {
                    acc += &(&spectra[f + delta] * &c1);
                }
                self.fft.inverse_inplace(&mut acc);
                acc
            })
            .collect();
        Ok(stack(&out))
    }
}

fn stack(frames: &[Array2<Complex64>]) -> Array3<Complex64> {
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal frame shapes")
}

/// Convolution of the volume with `d̂` on its valid rows.
pub fn lift_apply(vol: &KTVolume, spec: &FilterSpec, d: &[Complex64]) -> Result<Array3<Complex64>> {
    ConvLift::new(&vol.mask, spec)?.apply(&vol.data, d)
}

/// Adjoint of [`lift_apply`] in the k-t samples.
pub fn lift_adjoint(res: &Array3<Complex64>, mask: &SamplingMask, spec: &FilterSpec, d: &[Complex64]) -> Result<Array3<Complex64>> {
    ConvLift::new(mask, spec)?.adjoint(res, d)
}

//! Annihilating-filter estimation from the fully sampled lifting rows.
//!
//! Two routes lead from `T_s` to filters: a single smoothness-regularized
//! minimum eigenvector, or Schatten-p denoising of the volume by IRLS
//! followed by per-pixel extraction of the two-tap filter from the weighted
//! null space.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, Array3, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::linalg::{conjugate_gradient, hermitian_eigen, HermitianEigen};
use crate::model::KTVolume;
use crate::recon::principal_root;
use crate::toeplitz::{gram, FilterSpec, ToeplitzLift};

/// Relative eigenvalue floor used wherever small eigenvalues are inverted.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// `D = V·Q` with `Q_ii = (λ_i + floor)^{−q/2}`, eigenvalues ascending.
#[derive(Clone, Debug)]
pub struct NullspaceBasis {
    pub eigen: HermitianEigen,
    pub weights: Vec<f64>,
    pub q: f64,
}

impl NullspaceBasis {
    /// `V·Q`, columns in ascending eigenvalue order (descending weight).
    pub fn matrix(&self) -> DMatrix<Complex64> {
        self.columns(self.weights.len())
    }

    /// The first `l` weighted columns.
    pub fn columns(&self, l: usize) -> DMatrix<Complex64> {
        let l = l.min(self.weights.len());
        let mut d = self.eigen.vectors.columns(0, l).into_owned();
        for (i, mut col) in d.column_iter_mut().enumerate() {
            col *= Complex64::new(self.weights[i], 0.0);
        }
        d
    }
}

pub fn weighted_nullspace(r: &DMatrix<Complex64>, q: f64) -> Result<NullspaceBasis> {
    if !(q > 0.0 && q <= 0.5) {
        return Err(Error::Params(format!("null-space exponent q = {q} must lie in (0, 0.5]")));
    }
    let eigen = hermitian_eigen(r)?;
    let lmax = eigen.values.last().copied().unwrap_or(0.0).max(0.0);
    let floor = if lmax > 0.0 { EIGEN_FLOOR * lmax } else { EIGEN_FLOOR };
    let weights = eigen.values.iter().map(|&l| (l.max(0.0) + floor).powf(-q / 2.0)).collect();
    Ok(NullspaceBasis { eigen, weights, q })
}

/// Minimum eigenvector of `G = R + μ₀·mean(diag R)·CᴴC`.
#[derive(Clone, Debug)]
pub struct SmoothFilter {
    pub taps: Vec<Complex64>,
    pub eigenvalue: f64,
    /// `‖G d̂ − λ d̂‖`
    pub eigen_residual: f64,
}

/// Smoothness-regularized filter from the Gram matrix of `T_s`.
///
/// `mu0` is relative to the mean diagonal of `R`, so the chosen filter does
/// not depend on the data scale. `CᴴC` is diagonal with `kx² + ky²`.
pub fn estimate_filter_smooth_gram(r: &DMatrix<Complex64>, spec: &FilterSpec, mu0: f64) -> Result<SmoothFilter> {
    if !(mu0 >= 0.0 && mu0.is_finite()) {
        return Err(Error::Params(format!("smoothness weight {mu0} must be finite and non-negative")));
    }
    if r.nrows() != spec.len() {
        return Err(Error::Shape(format!("Gram is {}x{}, support has {} taps", r.nrows(), r.ncols(), spec.len())));
    }
    let scale = (0..r.nrows()).map(|i| r[(i, i)].re).sum::<f64>() / r.nrows() as f64;
    let mut g = r.clone();
    for (i, w) in spec.frequency_radius().iter().enumerate() {
        g[(i, i)] += Complex64::new(mu0 * scale * w * w, 0.0);
    }
    let e = hermitian_eigen(&g)?;
    let taps = e.vector(0);
    let v = DVector::from_vec(taps.clone());
    let eigen_residual = (&g * &v - &v * Complex64::new(e.values[0], 0.0)).norm();
    Ok(SmoothFilter { taps, eigenvalue: e.values[0], eigen_residual })
}

pub fn estimate_filter_smooth(ts: &DMatrix<Complex64>, spec: &FilterSpec, mu0: f64) -> Result<SmoothFilter> {
    if ts.nrows() == 0 {
        return Err(Error::NoValidRows("empty lifting".into()));
    }
    estimate_filter_smooth_gram(&gram(ts), spec, mu0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IrlsConfig {
    /// Relative regularization weight; the effective weight is
    /// `γ₀·λ_max(R₀)^{1−p/2}` with `R₀` the Gram of the input.
    pub gamma0: f64,
    /// Schatten exponent.
    pub p: f64,
    /// `ε₀ = eps0·λ_max(R₀)`.
    pub eps0: f64,
    /// Factor applied to `ε` after each outer iteration.
    pub eps_ratio: f64,
    pub outer_iters: usize,
    pub cg_iters: usize,
    pub cg_tol: f64,
}

impl Default for IrlsConfig {
    fn default() -> Self {
        IrlsConfig { gamma0: 1e-4, p: 0.5, eps0: 1e-2, eps_ratio: 0.2, outer_iters: 10, cg_iters: 30, cg_tol: 1e-10 }
    }
}

impl IrlsConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p > 0.0 && self.p <= 1.0) {
            return Err(Error::Params(format!("Schatten exponent p = {} must lie in (0, 1]", self.p)));
        }
        if !(self.gamma0 >= 0.0 && self.gamma0.is_finite()) {
            return Err(Error::Params(format!("gamma0 = {} must be finite and non-negative", self.gamma0)));
        }
        if !(self.eps0 > 0.0 && self.eps_ratio > 0.0 && self.eps_ratio <= 1.0) {
            return Err(Error::Params("epsilon schedule must start positive with ratio in (0, 1]".into()));
        }
        if self.outer_iters == 0 || self.cg_iters == 0 {
            return Err(Error::Params("iteration counts must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct IrlsResult {
    pub volumes: Vec<KTVolume>,
    /// Surrogate `J_ε(x)` at the start of each outer iteration and after the last.
    pub objective: Vec<f64>,
    /// Surrogate with the iteration's `ε` before and after each inner solve.
    pub inner_objective: Vec<(f64, f64)>,
    pub cg_iterations: Vec<usize>,
    /// `ε` of the last weight update.
    pub eps: f64,
    /// Effective regularization weight.
    pub gamma: f64,
    /// Gram of the denoised lifting.
    pub gram: DMatrix<Complex64>,
}

fn joint_gram(lift: &ToeplitzLift, xs: &[Array3<Complex64>]) -> DMatrix<Complex64> {
    let l = lift.spec.len();
    let mut r = DMatrix::zeros(l, l);
    for x in xs {
        r += gram(&lift.gather(x));
    }
    r
}

/// `J_ε(x) = Σ_c ‖S x_c − b_c‖² + γ·(2/p)·Σ_i (λ_i + ε)^{p/2}`
fn surrogate(lift: &ToeplitzLift, xs: &[Array3<Complex64>], bs: &[&KTVolume], gamma: f64, p: f64, eps: f64) -> Result<f64> {
    let mut data = 0.0;
    for (x, b) in xs.iter().zip(bs) {
        Zip::from(x).and(&b.data).and(b.mask.measured()).for_each(|x, b, &m| {
            if m {
                data += (x - b).norm_sqr();
            }
        });
    }
    if gamma == 0.0 {
        return Ok(data);
    }
    let e = hermitian_eigen(&joint_gram(lift, xs))?;
    let reg: f64 = e.values.iter().map(|&l| (l.max(0.0) + eps).powf(p / 2.0)).sum();
    Ok(data + gamma * (2.0 / p) * reg)
}

/// `(R + εI)^{p/2−1}`
fn irls_weight(r: &DMatrix<Complex64>, p: f64, eps: f64) -> Result<DMatrix<Complex64>> {
    let e = hermitian_eigen(r)?;
    let scaled = DMatrix::from_fn(r.nrows(), r.ncols(), |i, j| {
        e.vectors[(i, j)] * (e.values[j].max(0.0) + eps).powf(p / 2.0 - 1.0)
    });
    Ok(scaled * e.vectors.adjoint())
}

/// Columns of `√W = V·(Λ + εI)^{(p/2−1)/2}`.
pub fn sqrt_weight_columns(r: &DMatrix<Complex64>, p: f64, eps: f64) -> Result<DMatrix<Complex64>> {
    let e = hermitian_eigen(r)?;
    Ok(DMatrix::from_fn(r.nrows(), r.ncols(), |i, j| {
        e.vectors[(i, j)] * (e.values[j].max(0.0) + eps).powf((p / 2.0 - 1.0) / 2.0)
    }))
}

/// Schatten-p denoising of the measured samples on the fully sampled rows.
///
/// Each outer iteration freezes `W = (R + εI)^{p/2−1}` from the current
/// Gram and minimizes `‖Sx − b‖² + γ‖T_s(x)√W‖²` by warm-started CG, then
/// shrinks `ε`. Coils share the weight and are solved independently.
pub fn irls_denoise(vols: &[KTVolume], spec: &FilterSpec, cfg: &IrlsConfig) -> Result<IrlsResult> {
    cfg.validate()?;
    let first = vols.first().ok_or_else(|| Error::Params("no volumes".into()))?;
    let lift = ToeplitzLift::new(&first.mask, spec)?;
    let bs: Vec<&KTVolume> = vols.iter().collect();
    let mut xs: Vec<Array3<Complex64>> = vols.iter().map(|v| v.data.clone()).collect();

    let r0 = joint_gram(&lift, &xs);
    let lmax = hermitian_eigen(&r0)?.values.last().copied().unwrap_or(0.0).max(0.0);
    let gamma = cfg.gamma0 * lmax.powf(1.0 - cfg.p / 2.0);
    let mut eps = cfg.eps0 * lmax.max(f64::MIN_POSITIVE);

    let mut objective = Vec::with_capacity(cfg.outer_iters + 1);
    let mut inner_objective = Vec::with_capacity(cfg.outer_iters);
    let mut cg_iterations = Vec::with_capacity(cfg.outer_iters);
    let mut last_eps = eps;
    for _ in 0..cfg.outer_iters {
        let j0 = surrogate(&lift, &xs, &bs, gamma, cfg.p, eps)?;
        objective.push(j0);
        if gamma == 0.0 {
            inner_objective.push((j0, j0));
            cg_iterations.push(0);
            last_eps = eps;
            eps *= cfg.eps_ratio;
            continue;
        }
        let w = irls_weight(&joint_gram(&lift, &xs), cfg.p, eps)? * Complex64::new(gamma, 0.0);
        let mut iters = 0;
        for (x, b) in xs.iter_mut().zip(&bs) {
            let mask = b.mask.measured();
            let apply = |z: &Array3<Complex64>| {
                let mut out = lift.scatter(&(lift.gather(z) * &w));
                Zip::from(&mut out).and(z).and(mask).for_each(|o, &z, &m| {
                    if m {
                        *o += z;
                    }
                });
                out
            };
            let (sol, report) = conjugate_gradient(apply, &b.data, x.clone(), cfg.cg_tol, cfg.cg_iters)?;
            *x = sol;
            iters += report.iterations;
        }
        cg_iterations.push(iters);
        inner_objective.push((j0, surrogate(&lift, &xs, &bs, gamma, cfg.p, eps)?));
        last_eps = eps;
        eps *= cfg.eps_ratio;
    }
    objective.push(surrogate(&lift, &xs, &bs, gamma, cfg.p, eps)?);

    let gram = joint_gram(&lift, &xs);
    let volumes = xs
        .into_iter()
        .zip(vols)
        .map(|(x, v)| KTVolume::new(x, v.mask.clone()))
        .collect::<Result<Vec<_>>>()?;
    Ok(IrlsResult { volumes, objective, inner_objective, cg_iterations, eps: last_eps, gamma, gram })
}

/// Spatial-domain filters of `L` null-space columns: `D_s(r)` is the
/// `2 × L` matrix of the two temporal taps of every column at pixel `r`.
#[derive(Clone, Debug)]
pub struct PixelFilterMatrix {
    /// `taps[i] = (μ_i⁽¹⁾, μ_i⁽²⁾)`, each `N × N`.
    pub taps: Vec<[Array2<Complex64>; 2]>,
}

impl PixelFilterMatrix {
    pub fn len(&self) -> usize {
        self.taps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.taps.is_empty()
    }

    pub fn at(&self, y: usize, x: usize) -> DMatrix<Complex64> {
        DMatrix::from_fn(2, self.taps.len(), |t, i| self.taps[i][t][[y, x]])
    }

    /// Per-pixel `D_s D_sᴴ` as `(a, c, d)` with `[[a, c], [c̄, d]]`.
    fn pixel_gram(&self, y: usize, x: usize) -> (f64, Complex64, f64) {
        let mut a = 0.0;
        let mut d = 0.0;
        let mut c = Complex64::new(0.0, 0.0);
        for [m0, m1] in &self.taps {
            let (u, v) = (m0[[y, x]], m1[[y, x]]);
            a += u.norm_sqr();
            d += v.norm_sqr();
            c += u * v.conj();
        }
        (a, c, d)
    }
}

/// Zero-padded inverse DFT of each column (length `|Λ|`) of `cols`.
pub fn extract_pixel_filters(cols: &DMatrix<Complex64>, spec: &FilterSpec, n: usize) -> Result<PixelFilterMatrix> {
    if cols.nrows() != spec.len() {
        return Err(Error::Shape(format!("columns have {} taps, support needs {}", cols.nrows(), spec.len())));
    }
    let fft = Fft2::new(n);
    let taps = cols
        .column_iter()
        .map(|c| {
            let d: Vec<Complex64> = c.iter().copied().collect();
            spec.to_image(&d, &fft)
        })
        .collect();
    Ok(PixelFilterMatrix { taps })
}

/// Per-pixel decay ratio from the dominant direction of `D_s(r)`.
#[derive(Clone, Debug)]
pub struct PixelBeta {
    pub beta: Array2<Complex64>,
    /// Pixels whose `D_s(r)` passed the rank-1 test.
    pub foreground: Array2<bool>,
    /// `σ₂/σ₁` per pixel.
    pub ratio: Array2<f64>,
}

/// Rank test `σ₂/σ₁ < τ`; rank-1 pixels take `β = (−u₁/u₀)^{1/k}` from the
/// dominant left singular vector, the rest get `background`.
pub fn beta_from_pixel_filters(ds: &PixelFilterMatrix, tau: f64, k_root: usize, background: Complex64) -> Result<PixelBeta> {
    if ds.is_empty() {
        return Err(Error::Params("no pixel filters".into()));
    }
    if k_root == 0 {
        return Err(Error::Params("root order must be positive".into()));
    }
    let (ny, nx) = ds.taps[0][0].dim();
    let mut beta = Array2::from_elem((ny, nx), background);
    let mut foreground = Array2::from_elem((ny, nx), false);
    let mut ratio = Array2::from_elem((ny, nx), 1.0);
    for y in 0..ny {
        for x in 0..nx {
            let (a, c, d) = ds.pixel_gram(y, x);
            let mean = 0.5 * (a + d);
            let disc = (0.25 * (a - d) * (a - d) + c.norm_sqr()).sqrt();
            let (hi, lo) = (mean + disc, (mean - disc).max(0.0));
            if !(hi > 0.0) {
                continue;
            }
            let r = (lo / hi).sqrt();
            ratio[[y, x]] = r;
            // eigenvector of the larger eigenvalue, from the better-conditioned row
            let v1 = (c, Complex64::new(hi - a, 0.0));
            let v2 = (Complex64::new(hi - d, 0.0), c.conj());
            let n1 = v1.0.norm_sqr() + v1.1.norm_sqr();
            let n2 = v2.0.norm_sqr() + v2.1.norm_sqr();
            let (u0, u1) = if n1 == 0.0 && n2 == 0.0 {
                // scalar multiple of the identity: no preferred direction
                continue;
            } else if n1 >= n2 {
                v1
            } else {
                v2
            };
            let norm = (u0.norm_sqr() + u1.norm_sqr()).sqrt();
            if r < tau && u0.norm() > 1e-8 * norm {
                beta[[y, x]] = principal_root(-u1 / u0, k_root);
                foreground[[y, x]] = true;
            }
        }
    }
    Ok(PixelBeta { beta, foreground, ratio })
}

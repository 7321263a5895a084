//! Dense Hermitian eigendecomposition and Krylov solvers for the
//! matrix-free operators used throughout the crate.

use nalgebra::{DMatrix, SymmetricEigen};
use ndarray::{Array, Dimension, Zip};
use num_complex::Complex64;

use crate::error::{Error, Result};

/// Eigenpairs of a Hermitian matrix, eigenvalues ascending.
///
/// Each eigenvector has unit norm and its largest-magnitude entry is real
/// and positive, which pins the otherwise arbitrary global phase.
#[derive(Clone, Debug)]
pub struct HermitianEigen {
    pub values: Vec<f64>,
    pub vectors: DMatrix<Complex64>,
}

impl HermitianEigen {
    pub fn vector(&self, i: usize) -> Vec<Complex64> {
        self.vectors.column(i).iter().copied().collect()
    }
}

/// Relative Frobenius asymmetry `‖M − Mᴴ‖ / ‖M‖`.
pub fn hermitian_defect(m: &DMatrix<Complex64>) -> f64 {
    let norm = m.norm();
    if norm == 0.0 {
        return 0.0;
    }
    (m - m.adjoint()).norm() / norm
}

pub fn hermitian_eigen(m: &DMatrix<Complex64>) -> Result<HermitianEigen> {
    if m.nrows() != m.ncols() {
        return Err(Error::Shape(format!("{}x{} matrix is not square", m.nrows(), m.ncols())));
    }
    let defect = hermitian_defect(m);
    if defect > 1e-10 {
        return Err(Error::NotHermitian(defect));
    }
    if m.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
        return Err(Error::Eigen("non-finite matrix entry".into()));
    }
    let sym = (m + m.adjoint()) * Complex64::new(0.5, 0.0);
    let eig = SymmetricEigen::try_new(sym, 1e-15, 10_000)
        .ok_or_else(|| Error::Eigen("symmetric QR iteration did not converge".into()))?;

    let n = m.nrows();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        let mut col: Vec<Complex64> = eig.eigenvectors.column(src).iter().copied().collect();
        normalize_phase(&mut col);
        vectors.set_column(dst, &nalgebra::DVector::from_vec(col));
    }
    Ok(HermitianEigen { values, vectors })
}

/// Scale to unit norm and rotate so the largest-magnitude entry is real positive.
pub fn normalize_phase(v: &mut [Complex64]) {
    let norm = v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
    if norm == 0.0 {
        return;
    }
    let mut best = 0;
    for (i, z) in v.iter().enumerate() {
        if z.norm() > v[best].norm() * (1.0 + 1e-12) {
            best = i;
        }
    }
    let rot = v[best].conj() / (v[best].norm() * norm);
    for z in v.iter_mut() {
        *z *= rot;
    }
}

pub fn inner<D: Dimension>(a: &Array<Complex64, D>, b: &Array<Complex64, D>) -> Complex64 {
    Zip::from(a).and(b).fold(Complex64::new(0.0, 0.0), |acc, x, y| acc + x.conj() * y)
}

pub fn norm<D: Dimension>(a: &Array<Complex64, D>) -> f64 {
    a.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    /// `‖b − A x‖` at every iterate, starting with the initial guess.
    pub residual_norms: Vec<f64>,
    pub converged: bool,
}

impl SolveReport {
    pub fn final_residual(&self) -> f64 {
        self.residual_norms.last().copied().unwrap_or(0.0)
    }
}

/// Conjugate gradients for a Hermitian positive (semi)definite operator.
///
/// Stops when `‖b − A x‖ ≤ tol · ‖b‖`. The quadratic `xᴴAx − 2 Re bᴴx`
/// decreases monotonically along the iterates.
pub fn conjugate_gradient<D, F>(
    mut apply: F,
    b: &Array<Complex64, D>,
    x0: Array<Complex64, D>,
    tol: f64,
    max_iter: usize,
) -> Result<(Array<Complex64, D>, SolveReport)>
where
    D: Dimension,
    F: FnMut(&Array<Complex64, D>) -> Array<Complex64, D>,
{
    let mut x = x0;
    let b_norm = norm(b);
    let mut r = b - &apply(&x);
    let mut rr = inner(&r, &r).re;
    let mut report = SolveReport { residual_norms: vec![rr.sqrt()], ..Default::default() };
    if rr.sqrt() <= tol * b_norm || rr == 0.0 {
        report.converged = true;
        return Ok((x, report));
    }
    let mut p = r.clone();
    for it in 1..=max_iter {
        let ap = apply(&p);
        let pap = inner(&p, &ap).re;
        if !pap.is_finite() || pap <= 0.0 {
            return Err(Error::Iteration(format!(
                "CG breakdown at iteration {it}: pᴴAp = {pap:.3e}, residual {:.3e}",
                rr.sqrt()
            )));
        }
        let alpha = Complex64::new(rr / pap, 0.0);
        x.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &ap);
        let rr_new = inner(&r, &r).re;
        report.iterations = it;
        report.residual_norms.push(rr_new.sqrt());
        if !rr_new.is_finite() {
            return Err(Error::Iteration(format!("CG diverged at iteration {it}")));
        }
        if rr_new.sqrt() <= tol * b_norm {
            report.converged = true;
            break;
        }
        let beta = Complex64::new(rr_new / rr, 0.0);
        p = &r + &(p * beta);
        rr = rr_new;
    }
    Ok((x, report))
}

/// Conjugate residuals for a Hermitian positive definite operator.
///
/// Minimizes `‖b − A x‖` over the growing Krylov space, so the recorded
/// residual norms are non-increasing.
pub fn conjugate_residual<D, F>(
    mut apply: F,
    b: &Array<Complex64, D>,
    x0: Array<Complex64, D>,
    tol: f64,
    max_iter: usize,
) -> Result<(Array<Complex64, D>, SolveReport)>
where
    D: Dimension,
    F: FnMut(&Array<Complex64, D>) -> Array<Complex64, D>,
{
    let mut x = x0;
    let b_norm = norm(b);
    let mut r = b - &apply(&x);
    let r_norm = norm(&r);
    let mut report = SolveReport { residual_norms: vec![r_norm], ..Default::default() };
    if r_norm <= tol * b_norm || r_norm == 0.0 {
        report.converged = true;
        return Ok((x, report));
    }
    let mut ar = apply(&r);
    let mut rar = inner(&r, &ar).re;
    let mut p = r.clone();
    let mut ap = ar.clone();
    for it in 1..=max_iter {
        let apap = inner(&ap, &ap).re;
        if !apap.is_finite() || apap <= 0.0 || !rar.is_finite() || rar <= 0.0 {
            return Err(Error::Iteration(format!(
                "CR breakdown at iteration {it}: rᴴAr = {rar:.3e}, ‖Ap‖² = {apap:.3e}"
            )));
        }
        let alpha = Complex64::new(rar / apap, 0.0);
        x.scaled_add(alpha, &p);
        r.scaled_add(-alpha, &ap);
        let r_norm = norm(&r);
        report.iterations = it;
        report.residual_norms.push(r_norm);
        if !r_norm.is_finite() {
            return Err(Error::Iteration(format!("CR diverged at iteration {it}")));
        }
        if r_norm <= tol * b_norm {
            report.converged = true;
            break;
        }
        ar = apply(&r);
        let rar_new = inner(&r, &ar).re;
        let beta = Complex64::new(rar_new / rar, 0.0);
        p = &r + &(p * beta);
        ap = &ar + &(ap * beta);
        rar = rar_new;
    }
    Ok((x, report))
}

//! Reference reconstructions: uncorrected IFFT, the direct ratio method and
//! the alternating-minimization field-map method, plus foreground metrics.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array2, Array3, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::linalg::SolveReport;
use crate::model::{assemble_volume, AcqParams, ExpOperator, GammaMap, KTVolume};
use crate::phantom::Phantom;
use crate::recon::{combine_coils, solve_alpha, solve_alpha_coils, BetaMap, Method, ReconResult, SolveConfig};

/// Plain centered inverse 2-D DFT.
pub fn ifft_recon(kspace: &Array2<Complex64>) -> Array2<Complex64> {
    Fft2::new(kspace.nrows()).inverse(kspace)
}

fn check_coils(coils: &[[Array2<Complex64>; 2]], n: usize) -> Result<()> {
    if coils.is_empty() {
        return Err(Error::Params("no coil data".into()));
    }
    for (c, [e1, e2]) in coils.iter().enumerate() {
        if e1.dim() != (n, n) || e2.dim() != (n, n) {
            return Err(Error::Shape(format!("coil {c}: echoes {:?} and {:?}, expected {n}x{n}", e1.dim(), e2.dim())));
        }
    }
    Ok(())
}

/// First-echo IFFT image, coils combined by root-sum-of-squares.
pub fn uncorrected(coils: &[[Array2<Complex64>; 2]], params: &AcqParams) -> Result<ReconResult> {
    let start = Instant::now();
    params.validate()?;
    check_coils(coils, params.n)?;
    let fft = Fft2::new(params.n);
    let alpha = combine_coils(coils.iter().map(|[e1, _]| fft.inverse(e1)).collect())?;
    let beta = BetaMap::uniform(params.n, Complex64::new(1.0, 0.0), params.dt);
    let mut timings = BTreeMap::new();
    timings.insert("total".into(), start.elapsed().as_secs_f64());
    Ok(ReconResult::assemble(Method::Uncorrected, alpha, beta, Vec::new(), timings, BTreeMap::new()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DirectConfig {
    /// Gaussian smoothing width in pixels; 0 disables smoothing.
    pub sigma: f64,
    /// Pixels with `|I₁|` below `guard·max|I₁|` get their maps from neighbours.
    pub guard: f64,
    pub solve: SolveConfig,
}

impl Default for DirectConfig {
    fn default() -> Self {
        DirectConfig { sigma: 2.0, guard: 1e-3, solve: SolveConfig::default() }
    }
}

/// Gaussian smoothing over the pixels where `weight` is set, normalized by the
/// smoothed weight so that constant maps pass unchanged.
pub fn masked_gaussian(map: &Array2<f64>, weight: &Array2<bool>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return Zip::from(map).and(weight).map_collect(|&v, &w| if w { v } else { 0.0 });
    }
    let r = (3.0 * sigma).ceil() as isize;
    let taps: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let blur = |img: &Array2<f64>| -> Array2<f64> {
        let (ny, nx) = img.dim();
        let mut tmp = Array2::zeros((ny, nx));
        for y in 0..ny {
            for x in 0..nx {
                let mut acc = 0.0;
                for (t, w) in taps.iter().enumerate() {
                    let xx = x as isize + t as isize - r;
                    if xx >= 0 && (xx as usize) < nx {
                        acc += w * img[[y, xx as usize]];
                    }
                }
                tmp[[y, x]] = acc;
            }
        }
        let mut out = Array2::zeros((ny, nx));
        for y in 0..ny {
            for x in 0..nx {
                let mut acc = 0.0;
                for (t, w) in taps.iter().enumerate() {
                    let yy = y as isize + t as isize - r;
                    if yy >= 0 && (yy as usize) < ny {
                        acc += w * tmp[[yy as usize, x]];
                    }
                }
                out[[y, x]] = acc;
            }
        }
        out
    };
    let m = weight.mapv(|w| if w { 1.0 } else { 0.0 });
    let num = blur(&(map * &m));
    let den = blur(&m);
    let floor = 1e-12 * den.iter().cloned().fold(0.0, f64::max);
    Zip::from(&num).and(&den).map_collect(|&a, &b| if b > floor { a / b } else { 0.0 })
}

/// Maps from the ratio of the two uncorrected images, then the fixed-`β` solve.
///
/// With several coils the ratio is the least-squares fit `Σ conj(I₁)I₂ / Σ|I₁|²`.
/// `|ratio|` gives R2* and its phase gives ω: `γ̂ = −ln(ratio)/(m·dt)`.
pub fn direct_method(coils: &[[Array2<Complex64>; 2]], params: &AcqParams, cfg: &DirectConfig) -> Result<ReconResult> {
    let start = Instant::now();
    params.validate()?;
    check_coils(coils, params.n)?;
    if params.m_delay == 0 {
        return Err(Error::Params("echo shift m_delay must be positive for the ratio method".into()));
    }
    let n = params.n;
    let fft = Fft2::new(n);
    let mut num = Array2::<Complex64>::zeros((n, n));
    let mut den = Array2::<f64>::zeros((n, n));
    for [e1, e2] in coils {
        let (i1, i2) = (fft.inverse(e1), fft.inverse(e2));
        Zip::from(&mut num).and(&mut den).and(&i1).and(&i2).for_each(|u, d, a, b| {
            *u += a.conj() * b;
            *d += a.norm_sqr();
        });
    }
    let peak = den.iter().cloned().fold(0.0, f64::max);
    if peak == 0.0 {
        return Err(Error::Params("first echo is identically zero".into()));
    }
    let keep = den.mapv(|d| d > cfg.guard * cfg.guard * peak);
    let span = params.m_delay as f64 * params.dt;
    let mut r2 = Array2::zeros((n, n));
    let mut om = Array2::zeros((n, n));
    Zip::from(&mut r2).and(&mut om).and(&num).and(&den).and(&keep).for_each(|r, o, &u, &d, &k| {
        if k {
            let g = -(u / d).ln() / span;
            *r = g.re;
            *o = g.im;
        }
    });
    let maps = GammaMap { r2star: masked_gaussian(&r2, &keep, cfg.sigma), omega: masked_gaussian(&om, &keep, cfg.sigma) };
    let mut beta = BetaMap::from_gamma(&maps, params.dt);
    beta.estimated = keep;
    beta.clamp_growth();
    let mut timings = BTreeMap::new();
    timings.insert("estimate".into(), start.elapsed().as_secs_f64());

    let t = Instant::now();
    let rec_params = params.with_segment(1)?;
    let vols: Vec<KTVolume> = coils.iter().map(|[e1, e2]| assemble_volume(e1, e2, &rec_params)).collect::<Result<_>>()?;
    let (alpha, solves) = solve_alpha_coils(&vols, &beta, &rec_params, &cfg.solve)?;
    timings.insert("solve".into(), t.elapsed().as_secs_f64());
    timings.insert("total".into(), start.elapsed().as_secs_f64());
    Ok(ReconResult::assemble(Method::Direct, alpha, beta, solves, timings, BTreeMap::new()))
}

/// Weights and schedule of the alternating-minimization baseline.
///
/// Objective: `Σ_c ‖A(ρ₀,c·e^{−γt}) − b_c‖² + s·(λ₁‖Dω‖² + λ₂‖D R2*‖²) + λ₃·S·Σ_c‖ρ₀,c‖²`,
/// with `s = Σ_c‖b_c‖²`, `S` the number of measured samples per coil, ω in rad/s
/// and `D` forward differences along both axes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct IterativeConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub outer_iters: usize,
    pub omega_iters: usize,
    pub r2star_iters: usize,
    /// First trial step scales the gradient so its largest entry moves this far.
    pub initial_move: f64,
    /// Armijo sufficient-decrease constant.
    pub armijo: f64,
    pub backtrack: f64,
    pub max_backtracks: usize,
    /// Relative objective increase tolerated before an outer iteration counts as rising.
    pub slack: f64,
    pub solve: SolveConfig,
}

impl Default for IterativeConfig {
    fn default() -> Self {
        IterativeConfig {
            lambda1: 1e-9,
            lambda2: 1e-9,
            lambda3: 1e-6,
            outer_iters: 1500,
            omega_iters: 100,
            r2star_iters: 200,
            initial_move: 10.0,
            armijo: 1e-4,
            backtrack: 0.5,
            max_backtracks: 40,
            slack: 1e-10,
            solve: SolveConfig::default(),
        }
    }
}

impl IterativeConfig {
    pub fn validate(&self) -> Result<()> {
        let w = [self.lambda1, self.lambda2, self.lambda3, self.initial_move, self.armijo, self.slack];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Params("iterative weights and step controls must be finite and non-negative".into()));
        }
        if self.outer_iters == 0 || self.omega_iters == 0 || self.r2star_iters == 0 {
            return Err(Error::Params("iteration counts must be at least 1".into()));
        }
        if !(self.backtrack > 0.0 && self.backtrack < 1.0) || self.initial_move == 0.0 {
            return Err(Error::Params("backtracking factor must lie in (0, 1) and the initial move be positive".into()));
        }
        Ok(())
    }
}

/// `Σ (Dv)²` over forward differences along both axes.
pub fn fd_energy(v: &Array2<f64>) -> f64 {
    let (ny, nx) = v.dim();
    let mut e = 0.0;
    for y in 0..ny {
        for x in 0..nx {
            if x + 1 < nx {
                e += (v[[y, x + 1]] - v[[y, x]]).powi(2);
            }
            if y + 1 < ny {
                e += (v[[y + 1, x]] - v[[y, x]]).powi(2);
            }
        }
    }
    e
}

/// `DᵀD v`.
pub fn fd_normal(v: &Array2<f64>) -> Array2<f64> {
    let (ny, nx) = v.dim();
    let mut out = Array2::zeros((ny, nx));
    for y in 0..ny {
        for x in 0..nx {
            if x + 1 < nx {
                let d = v[[y, x + 1]] - v[[y, x]];
                out[[y, x + 1]] += d;
                out[[y, x]] -= d;
            }
            if y + 1 < ny {
                let d = v[[y + 1, x]] - v[[y, x]];
                out[[y + 1, x]] += d;
                out[[y, x]] -= d;
            }
        }
    }
    out
}

/// Objective of the alternating-minimization baseline on the line-by-line tier.
pub struct IterativeProblem<'a> {
    vols: &'a [KTVolume],
    params: AcqParams,
    lambda1: f64,
    lambda2: f64,
    lambda3: f64,
}

/// Value and map gradients of the objective at one point.
pub struct Evaluation {
    pub value: f64,
    pub grad_omega: Array2<f64>,
    pub grad_r2star: Array2<f64>,
}

impl<'a> IterativeProblem<'a> {
    /// `vols` must be assembled on the tier of `params`.
    pub fn new(vols: &'a [KTVolume], params: &AcqParams, cfg: &IterativeConfig) -> Result<Self> {
        if vols.is_empty() {
            return Err(Error::Params("no coil data".into()));
        }
        let scale: f64 = vols.iter().map(|v| v.data.iter().map(|x| x.norm_sqr()).sum::<f64>()).sum();
        let samples = vols[0].mask.count() as f64;
        Ok(IterativeProblem {
            vols,
            params: params.clone(),
            lambda1: cfg.lambda1 * scale,
            lambda2: cfg.lambda2 * scale,
            lambda3: cfg.lambda3 * samples,
        })
    }

    fn operator(&self, maps: &GammaMap) -> Result<ExpOperator> {
        ExpOperator::new(&maps.decay(self.params.dt), &self.params, &self.vols[0].mask)
    }

    fn regularizer(&self, maps: &GammaMap, rho0: &[Array2<Complex64>]) -> f64 {
        self.lambda1 * fd_energy(&maps.omega)
            + self.lambda2 * fd_energy(&maps.r2star)
            + self.lambda3 * rho0.iter().map(|a| a.iter().map(|v| v.norm_sqr()).sum::<f64>()).sum::<f64>()
    }

    fn residuals(&self, op: &ExpOperator, rho0: &[Array2<Complex64>]) -> Vec<Array3<Complex64>> {
        rho0.iter().zip(self.vols).map(|(a, v)| op.apply(a) - &v.data).collect()
    }

    pub fn value(&self, rho0: &[Array2<Complex64>], maps: &GammaMap) -> Result<f64> {
        let op = self.operator(maps)?;
        let data: f64 = self.residuals(&op, rho0).iter().map(|r| r.iter().map(|v| v.norm_sqr()).sum::<f64>()).sum();
        Ok(data + self.regularizer(maps, rho0))
    }

    /// Value and gradients with respect to ω (rad/s) and R2* (s⁻¹).
    ///
    /// With `z = Σ_f t_f·conj(β^{e_f})·Aᴴ_f r_f` and `w = ρ₀·conj(z)`, the data
    /// term contributes `2·Im w` to the ω gradient and `−2·Re w` to the R2* one.
    pub fn evaluate(&self, rho0: &[Array2<Complex64>], maps: &GammaMap) -> Result<Evaluation> {
        let op = self.operator(maps)?;
        let times: Vec<f64> = (0..op.frames()).map(|f| op.exponent(f) as f64 * self.params.dt).collect();
        let n = self.params.n;
        let mut value = self.regularizer(maps, rho0);
        let mut grad_omega = fd_normal(&maps.omega) * (2.0 * self.lambda1);
        let mut grad_r2star = fd_normal(&maps.r2star) * (2.0 * self.lambda2);
        for (a, r) in rho0.iter().zip(self.residuals(&op, rho0)) {
            value += r.iter().map(|v| v.norm_sqr()).sum::<f64>();
            let z = op.adjoint_weighted(&r, &times);
            debug_assert_eq!(z.dim(), (n, n));
            Zip::from(&mut grad_omega).and(&mut grad_r2star).and(a).and(&z).for_each(|go, gr, &a, &z| {
                let w = a * z.conj();
                *go += 2.0 * w.im;
                *gr -= 2.0 * w.re;
            });
        }
        Ok(Evaluation { value, grad_omega, grad_r2star })
    }
}

#[derive(Clone, Copy)]
enum MapKind {
    Omega,
    R2star,
}

fn with_map(maps: &GammaMap, kind: MapKind, v: Array2<f64>) -> GammaMap {
    match kind {
        MapKind::Omega => GammaMap { r2star: maps.r2star.clone(), omega: v },
        MapKind::R2star => GammaMap { r2star: v, omega: maps.omega.clone() },
    }
}

/// Gradient descent with Armijo backtracking on one map; every accepted step
/// strictly decreases the objective. Returns the new maps, value and step.
fn descend(
    problem: &IterativeProblem,
    rho0: &[Array2<Complex64>],
    mut maps: GammaMap,
    kind: MapKind,
    iters: usize,
    mut step: Option<f64>,
    cfg: &IterativeConfig,
) -> Result<(GammaMap, f64, Option<f64>)> {
    let mut ev = problem.evaluate(rho0, &maps)?;
    for _ in 0..iters {
        let (g, cur) = match kind {
            MapKind::Omega => (&ev.grad_omega, &maps.omega),
            MapKind::R2star => (&ev.grad_r2star, &maps.r2star),
        };
        let gmax = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let g2: f64 = g.iter().map(|v| v * v).sum();
        if gmax == 0.0 || !gmax.is_finite() {
            break;
        }
        let mut s = step.map(|s| s / cfg.backtrack).unwrap_or(cfg.initial_move / gmax);
        let mut accepted = None;
        for _ in 0..=cfg.max_backtracks {
            let trial = with_map(&maps, kind, cur - &(g * s));
            let v = problem.value(rho0, &trial)?;
            if v.is_finite() && v <= ev.value - cfg.armijo * s * g2 {
                accepted = Some(trial);
                break;
            }
            s *= cfg.backtrack;
        }
        match accepted {
            Some(m) => {
                maps = m;
                step = Some(s);
                ev = problem.evaluate(rho0, &maps)?;
            }
            None => break,
        }
    }
    Ok((maps, ev.value, step))
}

/// Alternating minimization over ω, R2* and the per-coil images.
///
/// Maps start at zero and images at the `γ = 0` least-squares solution. Each
/// outer iteration runs gradient descent on ω, then on R2*, then re-solves the
/// images for the current maps (kept only if the objective does not rise).
pub fn iterative_method(coils: &[[Array2<Complex64>; 2]], params: &AcqParams, cfg: &IterativeConfig) -> Result<ReconResult> {
    let start = Instant::now();
    cfg.validate()?;
    params.validate()?;
    check_coils(coils, params.n)?;
    let n = params.n;
    let rec_params = params.with_segment(1)?;
    let vols: Vec<KTVolume> = coils.iter().map(|[e1, e2]| assemble_volume(e1, e2, &rec_params)).collect::<Result<_>>()?;
    let problem = IterativeProblem::new(&vols, &rec_params, cfg)?;
    let samples = vols[0].mask.count() as f64;
    let solve_cfg = SolveConfig { eps: cfg.lambda3, ..cfg.solve.clone() };
    debug_assert!(samples > 0.0);

    let mut maps = GammaMap::zeros(n);
    let mut solves: Vec<SolveReport> = Vec::new();
    let solve_images = |maps: &GammaMap, solves: &mut Vec<SolveReport>| -> Result<Vec<Array2<Complex64>>> {
        let beta = BetaMap::from_gamma(maps, params.dt);
        vols.iter()
            .map(|v| {
                let (a, r) = solve_alpha(v, &beta, &rec_params, &solve_cfg)?;
                solves.push(r);
                Ok(a)
            })
            .collect()
    };
    let mut rho0 = solve_images(&maps, &mut solves)?;
    let mut value = problem.value(&rho0, &maps)?;
    let mut trace = vec![value];
    let (mut step_w, mut step_r) = (None, None);
    let mut rising = 0;
    for _ in 0..cfg.outer_iters {
        let before = value;
        let (m, _, s) = descend(&problem, &rho0, maps, MapKind::Omega, cfg.omega_iters, step_w, cfg)?;
        step_w = s;
        let (m, v, s) = descend(&problem, &rho0, m, MapKind::R2star, cfg.r2star_iters, step_r, cfg)?;
        step_r = s;
        maps = m;
        value = v;
        let candidate = solve_images(&maps, &mut solves)?;
        let cv = problem.value(&candidate, &maps)?;
        if cv <= value {
            rho0 = candidate;
            value = cv;
        }
        trace.push(value);
        if !value.is_finite() {
            return Err(Error::Iteration("iterative objective is not finite".into()));
        }
        rising = if value > before * (1.0 + cfg.slack) { rising + 1 } else { 0 };
        if rising >= 3 {
            return Err(Error::Iteration(format!("objective rose for 3 consecutive outer iterations (now {value:e})")));
        }
    }
    let alpha = combine_coils(rho0)?;
    let beta = BetaMap::from_gamma(&maps, params.dt);
    let mut timings = BTreeMap::new();
    timings.insert("total".into(), start.elapsed().as_secs_f64());
    let mut diagnostics = BTreeMap::new();
    diagnostics.insert("objective".into(), trace);
    let mut result = ReconResult::assemble(Method::Iterative, alpha, beta, solves, timings, diagnostics);
    result.maps = maps;
    Ok(result)
}

/// Foreground accuracy of a reconstruction against the simulation truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub method: String,
    /// `‖|α| − |ρ₀|‖ / ‖ρ₀‖` over the foreground.
    pub nrmse: f64,
    pub omega_rmse_hz: f64,
    pub r2star_rmse: f64,
    pub cg_iterations: usize,
    pub timings: BTreeMap<String, f64>,
}

pub fn nrmse(image: &Array2<Complex64>, truth: &Array2<Complex64>, foreground: &Array2<bool>) -> f64 {
    let (mut e, mut r) = (0.0, 0.0);
    Zip::from(image).and(truth).and(foreground).for_each(|a, t, &f| {
        if f {
            e += (a.norm() - t.norm()).powi(2);
            r += t.norm_sqr();
        }
    });
    if r == 0.0 {
        0.0
    } else {
        (e / r).sqrt()
    }
}

pub fn rmse(map: &Array2<f64>, truth: &Array2<f64>, foreground: &Array2<bool>) -> f64 {
    let (mut e, mut c) = (0.0, 0usize);
    Zip::from(map).and(truth).and(foreground).for_each(|a, t, &f| {
        if f {
            e += (a - t).powi(2);
            c += 1;
        }
    });
    if c == 0 {
        0.0
    } else {
        (e / c as f64).sqrt()
    }
}

/// Accuracy of an image and maps against the truth, without run statistics.
pub fn metrics(method: &str, alpha: &Array2<Complex64>, maps: &GammaMap, truth: &Phantom) -> Result<Metrics> {
    if alpha.dim() != truth.rho0.dim() || maps.omega.dim() != truth.rho0.dim() {
        return Err(Error::Shape(format!("result {:?} vs truth {:?}", alpha.dim(), truth.rho0.dim())));
    }
    let fg = &truth.foreground;
    Ok(Metrics {
        method: method.to_string(),
        nrmse: nrmse(alpha, &truth.rho0, fg),
        omega_rmse_hz: rmse(&maps.field_hz(), &truth.gamma.field_hz(), fg),
        r2star_rmse: rmse(&maps.r2star, &truth.gamma.r2star, fg),
        cg_iterations: 0,
        timings: BTreeMap::new(),
    })
}

pub fn evaluate(result: &ReconResult, truth: &Phantom) -> Result<Metrics> {
    let mut m = metrics(result.method.name(), &result.alpha, &result.maps, truth)?;
    m.cg_iterations = result.cg_iterations();
    m.timings = result.timings.clone();
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{make_phantom, simulate_dual_echo, PhantomSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn c(re: f64, im: f64) -> Complex64 {
        Complex64::new(re, im)
    }

    fn rand_c(rng: &mut ChaCha8Rng) -> Complex64 {
        c(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
    }

    /// Centered DFT by direct summation.
    fn dense_idft(k: &Array2<Complex64>) -> Array2<Complex64> {
        let n = k.nrows();
        let h = (n / 2) as f64;
        let mut out = Array2::zeros((n, n));
        for y in 0..n {
            for x in 0..n {
                let mut acc = c(0.0, 0.0);
                for ky in 0..n {
                    for kx in 0..n {
                        let ph = 2.0 * std::f64::consts::PI * ((ky as f64 - h) * (y as f64 - h) + (kx as f64 - h) * (x as f64 - h)) / n as f64;
                        acc += k[[ky, kx]] * Complex64::from_polar(1.0, ph);
                    }
                }
                out[[y, x]] = acc / (n * n) as f64;
            }
        }
        out
    }

    #[test]
    fn ifft_recon_inverts_forward_and_matches_dense() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Array2::from_shape_fn((8, 8), |_| rand_c(&mut rng));
        let k = Fft2::new(8).forward(&x);
        let back = ifft_recon(&k);
        assert!(Zip::from(&back).and(&x).all(|a, b| (a - b).norm() < 1e-13));
        let dense = dense_idft(&k);
        assert!(Zip::from(&back).and(&dense).all(|a, b| (a - b).norm() < 1e-12));
        let y = Array2::from_shape_fn((8, 8), |_| rand_c(&mut rng));
        let lin = ifft_recon(&(&k * c(2.0, -1.0) + &y));
        let sep = ifft_recon(&k) * c(2.0, -1.0) + ifft_recon(&y);
        assert!(Zip::from(&lin).and(&sep).all(|a, b| (a - b).norm() < 1e-12));
    }

    #[test]
    fn fd_normal_is_gradient_of_energy() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v = Array2::from_shape_fn((5, 7), |_| rng.random::<f64>());
        let g = fd_normal(&v) * 2.0;
        let h = 1e-6;
        for (idx, &gv) in g.indexed_iter() {
            let (mut p, mut m) = (v.clone(), v.clone());
            p[idx] += h;
            m[idx] -= h;
            let fd = (fd_energy(&p) - fd_energy(&m)) / (2.0 * h);
            assert!((fd - gv).abs() < 1e-6, "{idx:?}");
        }
    }

    #[test]
    fn smoothing_keeps_constants_and_fills_holes() {
        let map = Array2::from_elem((12, 12), 3.5);
        let mut w = Array2::from_elem((12, 12), true);
        w[[5, 5]] = false;
        let s = masked_gaussian(&map, &w, 2.0);
        assert!(s.iter().all(|v| (v - 3.5).abs() < 1e-13));
    }

    fn constant_gamma_data(n: usize, gamma: Complex64, m: usize) -> (Vec<[Array2<Complex64>; 2]>, AcqParams, Phantom) {
        let spec = PhantomSpec { n, ..PhantomSpec::default() };
        let mut ph = make_phantom(&spec).unwrap();
        ph.gamma = GammaMap {
            r2star: Array2::from_elem((n, n), gamma.re),
            omega: Array2::from_elem((n, n), gamma.im),
        };
        let params = AcqParams::new(n, 1, m, 0.636e-3).unwrap();
        let (e1, e2) = simulate_dual_echo(&ph.rho0, &ph.gamma, &params).unwrap();
        (vec![[e1, e2]], params, ph)
    }

    #[test]
    fn direct_method_constant_gamma_is_exact() {
        let gamma = c(20.0, 2.0 * std::f64::consts::PI * 35.0);
        let (coils, params, ph) = constant_gamma_data(32, gamma, 4);
        let r = direct_method(&coils, &params, &DirectConfig::default()).unwrap();
        let fg = &ph.foreground;
        assert!(rmse(&r.maps.r2star, &ph.gamma.r2star, fg) <= 1e-9);
        assert!(rmse(&r.maps.omega, &ph.gamma.omega, fg) <= 1e-9);
        // the constant decay is then exactly representable
        assert!(nrmse(&r.alpha, &ph.rho0, fg) < 1e-4, "{}", nrmse(&r.alpha, &ph.rho0, fg));
    }

    #[test]
    fn direct_method_zero_gamma_gives_zero_maps() {
        let (coils, params, _) = constant_gamma_data(16, c(0.0, 0.0), 2);
        let r = direct_method(&coils, &params, &DirectConfig::default()).unwrap();
        assert!(r.maps.r2star.iter().all(|v| v.abs() < 1e-9));
        assert!(r.maps.omega.iter().all(|v| v.abs() < 1e-9));
    }

    fn small_problem(seed: u64) -> (Vec<KTVolume>, AcqParams, Vec<Array2<Complex64>>, GammaMap) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 8;
        let params = AcqParams::new(n, 1, 2, 1e-3).unwrap();
        let truth = GammaMap {
            r2star: Array2::from_shape_fn((n, n), |_| 20.0 + 10.0 * rng.random::<f64>()),
            omega: Array2::from_shape_fn((n, n), |_| 300.0 * (rng.random::<f64>() - 0.5)),
        };
        let rho = Array2::from_shape_fn((n, n), |_| rand_c(&mut rng));
        let (e1, e2) = simulate_dual_echo(&rho, &truth, &params).unwrap();
        let vols = vec![assemble_volume(&e1, &e2, &params).unwrap()];
        let at = GammaMap {
            r2star: Array2::from_shape_fn((n, n), |_| 30.0 * rng.random::<f64>()),
            omega: Array2::from_shape_fn((n, n), |_| 200.0 * (rng.random::<f64>() - 0.5)),
        };
        let rho0 = vec![Array2::from_shape_fn((n, n), |_| rand_c(&mut rng))];
        (vols, params, rho0, at)
    }

    #[test]
    fn gradients_match_central_differences() {
        for seed in 0..3 {
            let (vols, params, rho0, maps) = small_problem(seed);
            let cfg = IterativeConfig { lambda1: 1e-6, lambda2: 1e-5, lambda3: 1e-3, ..IterativeConfig::default() };
            let p = IterativeProblem::new(&vols, &params, &cfg).unwrap();
            let ev = p.evaluate(&rho0, &maps).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            for kind in [MapKind::Omega, MapKind::R2star] {
                let dir = Array2::from_shape_fn((8, 8), |_| rng.random::<f64>() - 0.5);
                let (g, base) = match kind {
                    MapKind::Omega => (&ev.grad_omega, &maps.omega),
                    MapKind::R2star => (&ev.grad_r2star, &maps.r2star),
                };
                let analytic: f64 = (g * &dir).sum();
                let h = 1e-3;
                let plus = p.value(&rho0, &with_map(&maps, kind, base + &(&dir * h))).unwrap();
                let minus = p.value(&rho0, &with_map(&maps, kind, base - &(&dir * h))).unwrap();
                let fd = (plus - minus) / (2.0 * h);
                assert!((fd - analytic).abs() <= 1e-5 * analytic.abs(), "seed {seed}: fd {fd} analytic {analytic}");
            }
        }
    }

    #[test]
    fn iterative_zero_gamma_stays_stationary() {
        let (coils, params, ph) = constant_gamma_data(16, c(0.0, 0.0), 2);
        let cfg = IterativeConfig { outer_iters: 2, omega_iters: 3, r2star_iters: 3, ..IterativeConfig::default() };
        let r = iterative_method(&coils, &params, &cfg).unwrap();
        let wmax = r.maps.omega.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let rmax = r.maps.r2star.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        // the ridge and the solve tolerance leave a tiny residual gradient
        assert!(wmax < 1e-2 && rmax < 1e-2, "{wmax} {rmax}");
        let ifft = ifft_recon(&coils[0][0]);
        let e = nrmse(&r.alpha, &ifft, &ph.foreground);
        assert!(e < 1e-5, "{e}");
    }

    #[test]
    fn iterative_objective_does_not_increase() {
        let spec = PhantomSpec { n: 16, ..PhantomSpec::default() };
        let ph = make_phantom(&spec).unwrap();
        let params = AcqParams::new(16, 1, 2, 0.636e-3).unwrap();
        let (e1, e2) = simulate_dual_echo(&ph.rho0, &ph.gamma, &params).unwrap();
        let cfg = IterativeConfig { outer_iters: 3, omega_iters: 5, r2star_iters: 5, ..IterativeConfig::default() };
        let r = iterative_method(&[[e1, e2]], &params, &cfg).unwrap();
        let trace = &r.diagnostics["objective"];
        assert!(trace.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)), "{trace:?}");
        assert!(trace.last().unwrap() < &trace[0]);
    }

    #[test]
    fn metrics_closed_forms() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let truth = Array2::from_shape_fn((6, 6), |_| c(1.0 + rng.random::<f64>(), 0.0));
        let fg = Array2::from_elem((6, 6), true);
        assert_eq!(nrmse(&truth, &truth, &fg), 0.0);
        assert!((nrmse(&Array2::zeros((6, 6)), &truth, &fg) - 1.0).abs() < 1e-15);
        let delta = Array2::from_shape_fn((6, 6), |_| 0.1 * rng.random::<f64>());
        let pert = &truth + &delta.mapv(|d| c(d, 0.0));
        let want = (delta.iter().map(|d| d * d).sum::<f64>() / truth.iter().map(|t| t.norm_sqr()).sum::<f64>()).sqrt();
        assert!((nrmse(&pert, &truth, &fg) - want).abs() < 1e-14);
    }
}

//! From annihilating filters to decay maps and the distortion-free image.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Fft2;
use crate::linalg::{conjugate_residual, SolveReport};
use crate::model::{assemble_volume, AcqParams, ExpOperator, GammaMap, KTVolume};
use crate::nullspace::{
    beta_from_pixel_filters, estimate_filter_smooth, extract_pixel_filters, irls_denoise, sqrt_weight_columns,
    IrlsConfig,
};
use crate::toeplitz::{build_ts, FilterSpec};

/// Principal `k`-th root: phase in `(−π/k, π/k]`.
pub fn principal_root(z: Complex64, k: usize) -> Complex64 {
    if k == 1 {
        return z;
    }
    let mut arg = z.arg();
    if arg <= -std::f64::consts::PI {
        arg = std::f64::consts::PI;
    }
    Complex64::from_polar(z.norm().powf(1.0 / k as f64), arg / k as f64)
}

/// Per-pixel decay ratio over one line time `dt`: `β = e^{−γ·dt}`.
#[derive(Clone, Debug)]
pub struct BetaMap {
    pub beta: Array2<Complex64>,
    /// Seconds spanned by one power of `β`.
    pub dt: f64,
    /// Pixels where `β` was estimated rather than set to the background value.
    pub estimated: Array2<bool>,
    pub background: Complex64,
}

impl BetaMap {
    pub fn uniform(n: usize, value: Complex64, dt: f64) -> Self {
        BetaMap { beta: Array2::from_elem((n, n), value), dt, estimated: Array2::from_elem((n, n), true), background: value }
    }

    pub fn from_gamma(gamma: &GammaMap, dt: f64) -> Self {
        let beta = gamma.decay(dt);
        let n = beta.nrows();
        BetaMap { beta, dt, estimated: Array2::from_elem((n, n), true), background: Complex64::new(0.5, 0.0) }
    }

    /// Rescales magnitudes above one onto the unit circle.
    pub fn clamp_growth(&mut self) {
        self.beta.mapv_inplace(|b| if b.norm() > 1.0 { b / b.norm() } else { b });
    }
}

/// Decay ratio from a two-tap filter whose taps are `k_root` line times apart.
///
/// `μ⁽¹⁾, μ⁽²⁾` are the zero-padded inverse DFTs of the tap blocks and
/// `β = (−μ⁽²⁾/μ⁽¹⁾)^{1/k_root}`. Pixels where `|μ⁽¹⁾|` falls below
/// `1e−8·max|μ⁽¹⁾|` take `background`.
pub fn filter_to_beta(
    d: &[Complex64],
    spec: &FilterSpec,
    n: usize,
    k_root: usize,
    dt: f64,
    background: Complex64,
) -> Result<BetaMap> {
    if d.len() != spec.len() {
        return Err(Error::Shape(format!("filter has {} taps, support needs {}", d.len(), spec.len())));
    }
    if k_root == 0 {
        return Err(Error::Params("root order must be positive".into()));
    }
    let [m0, m1] = spec.to_image(d, &Fft2::new(n));
    let peak = m0.iter().fold(0.0f64, |a, v| a.max(v.norm()));
    let guard = 1e-8 * peak;
    let mut estimated = Array2::from_elem((n, n), false);
    let mut beta = Array2::from_elem((n, n), background);
    Zip::from(&mut beta).and(&mut estimated).and(&m0).and(&m1).for_each(|b, e, &u, &v| {
        if u.norm() > guard && peak > 0.0 {
            *b = principal_root(-v / u, k_root);
            *e = true;
        }
    });
    Ok(BetaMap { beta, dt, estimated, background })
}

/// `γ = −ln(β)/dt`; pixels with `β = 0` are reported invalid and get zero maps.
pub fn beta_to_maps(beta: &BetaMap) -> (GammaMap, Array2<bool>) {
    let n = beta.beta.nrows();
    let mut maps = GammaMap::zeros(n);
    let mut valid = Array2::from_elem(beta.beta.dim(), true);
    for ((y, x), b) in beta.beta.indexed_iter() {
        if b.norm() == 0.0 || !b.re.is_finite() || !b.im.is_finite() {
            valid[[y, x]] = false;
            continue;
        }
        let g = -b.ln() / beta.dt;
        maps.r2star[[y, x]] = g.re;
        maps.omega[[y, x]] = g.im;
    }
    (maps, valid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolveConfig {
    /// Ridge weight relative to the number of measured samples.
    pub eps: f64,
    pub max_iter: usize,
    /// Relative normal-equation residual target.
    pub tol: f64,
}

impl Default for SolveConfig {
    fn default() -> Self {
        SolveConfig { eps: 1e-6, max_iter: 400, tol: 1e-6 }
    }
}

/// Least-squares image for fixed `β`:
/// `argmin_α ‖A_β α − b‖² + ε‖α‖²` on the normal equations, by conjugate residuals.
pub fn solve_alpha(vol: &KTVolume, beta: &BetaMap, params: &AcqParams, cfg: &SolveConfig) -> Result<(Array2<Complex64>, SolveReport)> {
    if !(cfg.eps >= 0.0 && cfg.eps.is_finite()) {
        return Err(Error::Params(format!("ridge weight {} must be finite and non-negative", cfg.eps)));
    }
    let op = ExpOperator::new(&beta.beta, params, &vol.mask)?;
    let eps = Complex64::new(cfg.eps * op.sample_count() as f64, 0.0);
    let rhs = op.adjoint(&vol.data);
    let n = params.n;
    conjugate_residual(|a| op.normal(a) + a * eps, &rhs, Array2::zeros((n, n)), cfg.tol, cfg.max_iter)
}

/// Per-coil solves combined by root-sum-of-squares (a single coil keeps its phase).
pub fn solve_alpha_coils(
    vols: &[KTVolume],
    beta: &BetaMap,
    params: &AcqParams,
    cfg: &SolveConfig,
) -> Result<(Array2<Complex64>, Vec<SolveReport>)> {
    let mut images = Vec::with_capacity(vols.len());
    let mut reports = Vec::with_capacity(vols.len());
    for v in vols {
        let (a, r) = solve_alpha(v, beta, params, cfg)?;
        images.push(a);
        reports.push(r);
    }
    Ok((combine_coils(images)?, reports))
}

pub fn combine_coils(mut images: Vec<Array2<Complex64>>) -> Result<Array2<Complex64>> {
    match images.len() {
        0 => Err(Error::Params("no coil images".into())),
        1 => Ok(images.pop().unwrap()),
        _ => {
            let mut acc = Array2::<f64>::zeros(images[0].dim());
            for im in &images {
                Zip::from(&mut acc).and(im).for_each(|a, v| *a += v.norm_sqr());
            }
            Ok(acc.mapv(|v| Complex64::new(v.sqrt(), 0.0)))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Uncorrected,
    Smoothness,
    Lowrank,
    Direct,
    Iterative,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Uncorrected => "uncorrected",
            Method::Smoothness => "smoothness",
            Method::Lowrank => "lowrank",
            Method::Direct => "direct",
            Method::Iterative => "iterative",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uncorrected" | "ifft" => Ok(Method::Uncorrected),
            "smoothness" => Ok(Method::Smoothness),
            "lowrank" => Ok(Method::Lowrank),
            "direct" => Ok(Method::Direct),
            "iterative" => Ok(Method::Iterative),
            _ => Err(Error::Params(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ReconResult {
    pub method: Method,
    /// Distortion-free image (decay extrapolated to `t = 0`).
    pub alpha: Array2<Complex64>,
    /// First image of the series, `α·β`.
    pub rho1: Array2<Complex64>,
    pub beta: BetaMap,
    pub maps: GammaMap,
    pub solves: Vec<SolveReport>,
    /// Wall-clock seconds per stage, including `"total"`.
    pub timings: BTreeMap<String, f64>,
    /// Method-specific scalar traces.
    pub diagnostics: BTreeMap<String, Vec<f64>>,
}

impl ReconResult {
    pub fn cg_iterations(&self) -> usize {
        self.solves.iter().map(|s| s.iterations).sum()
    }

    pub fn final_residual(&self) -> f64 {
        self.solves.iter().map(|s| s.final_residual()).fold(0.0, f64::max)
    }

    pub(crate) fn assemble(
        method: Method,
        alpha: Array2<Complex64>,
        beta: BetaMap,
        solves: Vec<SolveReport>,
        timings: BTreeMap<String, f64>,
        diagnostics: BTreeMap<String, Vec<f64>>,
    ) -> Self {
        let rho1 = &alpha * &beta.beta;
        let (maps, _) = beta_to_maps(&beta);
        ReconResult { method, alpha, rho1, beta, maps, solves, timings, diagnostics }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorrectConfig {
    pub fx: usize,
    /// Defaults to `min(fx, m_delay)`, the tallest support with fully sampled rows.
    pub fy: Option<usize>,
    /// Relative smoothness weight.
    pub mu0: f64,
    pub irls: IrlsConfig,
    /// Number of smallest-eigenvalue √W columns used per pixel; all when unset.
    pub columns: Option<usize>,
    /// Rank-test threshold on `σ₂/σ₁`.
    pub tau: f64,
    /// `β` of pixels that fail the rank test.
    pub background: f64,
    pub solve: SolveConfig,
}

impl Default for CorrectConfig {
    fn default() -> Self {
        CorrectConfig {
            fx: 5,
            fy: None,
            mu0: 1e-6,
            irls: IrlsConfig::default(),
            columns: None,
            tau: 0.2,
            background: 0.5,
            solve: SolveConfig::default(),
        }
    }
}

impl CorrectConfig {
    pub fn filter(&self, k_cal: usize) -> Result<FilterSpec> {
        FilterSpec::new(self.fx, self.fy.unwrap_or(self.fx.min(k_cal)), 1)
    }
}

fn check_echoes(coils: &[[Array2<Complex64>; 2]], n: usize) -> Result<()> {
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

fn volumes(coils: &[[Array2<Complex64>; 2]], params: &AcqParams) -> Result<Vec<KTVolume>> {
    coils.iter().map(|[e1, e2]| assemble_volume(e1, e2, params)).collect()
}

/// Two-step correction of dual-echo data.
///
/// Calibration uses segments of `m_delay` lines, where consecutive frames
/// share one fully measured segment, and a filter with `δ = 1`; its taps are
/// `m_delay` line times apart, hence the `m_delay`-th root. The image is then
/// recovered on the line-by-line tier (`N + m_delay` frames).
pub fn correct(coils: &[[Array2<Complex64>; 2]], params: &AcqParams, method: Method, cfg: &CorrectConfig) -> Result<ReconResult> {
    let start = Instant::now();
    params.validate()?;
    check_echoes(coils, params.n)?;
    if params.m_delay == 0 {
        return Err(Error::Params("echo shift m_delay must be positive to calibrate".into()));
    }
    let n = params.n;
    let k_cal = params.m_delay;
    let cal_params = params.with_segment(k_cal)?;
    let spec = cfg.filter(k_cal)?;
    let background = Complex64::new(cfg.background, 0.0);
    let mut timings = BTreeMap::new();
    let mut diagnostics = BTreeMap::new();

    let t = Instant::now();
    let cal = volumes(coils, &cal_params)?;
    let mut beta = match method {
        Method::Smoothness => {
            let ts = build_ts(&cal, &spec)?;
            let f = estimate_filter_smooth(&ts, &spec, cfg.mu0)?;
            diagnostics.insert("filter_eigenvalue".into(), vec![f.eigenvalue]);
            diagnostics.insert("calibration_rows".into(), vec![ts.nrows() as f64]);
            filter_to_beta(&f.taps, &spec, n, k_cal, params.dt, background)?
        }
        Method::Lowrank => {
            let den = irls_denoise(&cal, &spec, &cfg.irls)?;
            diagnostics.insert("irls_objective".into(), den.objective.clone());
            diagnostics.insert("irls_cg_iterations".into(), den.cg_iterations.iter().map(|&i| i as f64).collect());
            let sw = sqrt_weight_columns(&den.gram, cfg.irls.p, den.eps)?;
            let l = cfg.columns.unwrap_or(spec.len()).clamp(1, spec.len());
            let ds = extract_pixel_filters(&sw.columns(0, l).into_owned(), &spec, n)?;
            let pb = beta_from_pixel_filters(&ds, cfg.tau, k_cal, background)?;
            diagnostics.insert(
                "rank1_fraction".into(),
                vec![pb.foreground.iter().filter(|&&f| f).count() as f64 / (n * n) as f64],
            );
            BetaMap { beta: pb.beta, dt: params.dt, estimated: pb.foreground, background }
        }
        other => return Err(Error::Params(format!("correct() handles smoothness and lowrank, not {}", other.name()))),
    };
    beta.clamp_growth();
    timings.insert("estimate".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let rec_params = params.with_segment(1)?;
    let rec = volumes(coils, &rec_params)?;
    let (alpha, solves) = solve_alpha_coils(&rec, &beta, &rec_params, &cfg.solve)?;
    timings.insert("solve".into(), t.elapsed().as_secs_f64());
    timings.insert("total".into(), start.elapsed().as_secs_f64());
    Ok(ReconResult::assemble(method, alpha, beta, solves, timings, diagnostics))
}

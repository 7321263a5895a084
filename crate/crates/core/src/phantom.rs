//! Procedural phantoms and dual-echo EPI simulation with known ground truth.
//!
//! All geometry is in normalized coordinates: pixel coordinate divided by
//! `N/2`, so `[-1, 1)` spans the field of view and a spec describes the same
//! object at every grid size.

use ndarray::{Array2, Zip};
use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::{coord, Fft2};
use crate::model::{AcqParams, GammaMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ellipse {
    /// `[x, y]`
    pub center: [f64; 2],
    /// Semi-axes `[a, b]`, `a` along x before rotation.
    pub axes: [f64; 2],
    /// Counter-clockwise rotation in radians.
    #[serde(default)]
    pub rotation: f64,
    /// Complex amplitude `[re, im]`, added where the ellipse covers a pixel.
    pub amplitude: [f64; 2],
}

impl Ellipse {
    fn contains(&self, x: f64, y: f64) -> bool {
        let (s, c) = self.rotation.sin_cos();
        let (dx, dy) = (x - self.center[0], y - self.center[1]);
        let xx = dx * c + dy * s;
        let yy = -dx * s + dy * c;
        (xx / self.axes[0]).powi(2) + (yy / self.axes[1]).powi(2) <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian {
    pub center: [f64; 2],
    pub sigma: f64,
    pub weight: f64,
}

/// `coef · xᵖ · yᵠ`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PolyTerm {
    pub coef: f64,
    pub px: u32,
    pub py: u32,
}

/// Smooth real map: offset plus polynomial and Gaussian terms, optionally
/// mean-centered on the foreground, then scaled so its largest foreground
/// magnitude equals `peak`. Zero outside the foreground.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SmoothMap {
    #[serde(default)]
    pub offset: f64,
    #[serde(default)]
    pub polynomial: Vec<PolyTerm>,
    #[serde(default)]
    pub gaussians: Vec<Gaussian>,
    #[serde(default)]
    pub center_mean: bool,
    pub peak: f64,
}

impl SmoothMap {
    pub fn zero() -> Self {
        SmoothMap { offset: 0.0, polynomial: vec![], gaussians: vec![], center_mean: false, peak: 0.0 }
    }

    /// Spatially constant map of the given value on the foreground.
    pub fn constant(value: f64) -> Self {
        SmoothMap { offset: 1.0, polynomial: vec![], gaussians: vec![], center_mean: false, peak: value }
    }

    fn raw(&self, x: f64, y: f64) -> f64 {
        let mut v = self.offset;
        for t in &self.polynomial {
            v += t.coef * x.powi(t.px as i32) * y.powi(t.py as i32);
        }
        for g in &self.gaussians {
            let r2 = (x - g.center[0]).powi(2) + (y - g.center[1]).powi(2);
            v += g.weight * (-r2 / (2.0 * g.sigma * g.sigma)).exp();
        }
        v
    }

    pub fn render(&self, n: usize, foreground: &Array2<bool>) -> Array2<f64> {
        let h = (n / 2) as f64;
        let mut map = Array2::from_shape_fn((n, n), |(iy, ix)| self.raw(coord(ix, n) as f64 / h, coord(iy, n) as f64 / h));
        let count = foreground.iter().filter(|&&f| f).count();
        if self.center_mean && count > 0 {
            let mean = Zip::from(&map).and(foreground).fold(0.0, |acc, &v, &f| if f { acc + v } else { acc }) / count as f64;
            map.mapv_inplace(|v| v - mean);
        }
        let max = Zip::from(&map).and(foreground).fold(0.0f64, |acc, &v, &f| if f { acc.max(v.abs()) } else { acc });
        let scale = if max > 0.0 { self.peak / max } else { 0.0 };
        Zip::from(&mut map).and(foreground).for_each(|v, &f| *v = if f { *v * scale } else { 0.0 });
        map
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub n: usize,
    pub ellipses: Vec<Ellipse>,
    /// Off-resonance in Hz.
    pub field_map: SmoothMap,
    /// Relaxation rate in s⁻¹.
    pub r2star: SmoothMap,
    /// Noise standard deviation per real component of each k-space sample.
    #[serde(default)]
    pub noise_sigma: f64,
    /// When set, overrides `noise_sigma` with the value giving this SNR
    /// relative to the mean sample energy of both echoes.
    #[serde(default)]
    pub snr_db: Option<f64>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub coils: usize,
}

fn one() -> usize {
    1
}

impl Default for PhantomSpec {
    /// Head-like phantom at 64×64 with a ±60 Hz shim-residual field map and
    /// 0–30 s⁻¹ relaxation, noiseless.
    fn default() -> Self {
        let e = |cx: f64, cy: f64, a: f64, b: f64, rot: f64, v: f64| Ellipse {
            center: [cx / 32.0, cy / 32.0],
            axes: [a / 32.0, b / 32.0],
            rotation: rot,
            amplitude: [v, 0.0],
        };
        let g = |cx: f64, cy: f64, sigma: f64, weight: f64| Gaussian {
            center: [cx / 32.0, cy / 32.0],
            sigma: sigma / 32.0,
            weight,
        };
        let p = |coef: f64, px: u32, py: u32| PolyTerm { coef, px, py };
        PhantomSpec {
            n: 64,
            ellipses: vec![
                e(0.0, 0.0, 22.0, 27.0, 0.0, 1.0),
                e(0.0, -1.0, 20.0, 25.0, 0.0, -0.6),
                e(-7.0, 2.0, 4.0, 9.0, 0.3, 0.3),
                e(7.0, 2.0, 5.0, 10.0, -0.3, 0.3),
                e(0.0, -12.0, 3.0, 3.0, 0.0, 0.4),
                e(0.0, 12.0, 6.0, 4.0, 0.0, 0.2),
            ],
            field_map: SmoothMap {
                offset: 0.0,
                polynomial: vec![p(0.7, 1, 0), p(0.3, 2, 0), p(0.3, 0, 2), p(-0.2, 1, 1)],
                gaussians: vec![],
                center_mean: true,
                peak: 60.0,
            },
            r2star: SmoothMap {
                offset: 0.5,
                polynomial: vec![],
                gaussians: vec![g(5.0, 5.0, 20.0, 0.5), g(-10.0, -8.0, 20.0, 0.4)],
                center_mean: false,
                peak: 30.0,
            },
            noise_sigma: 0.0,
            snr_db: None,
            seed: 0,
            coils: 1,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.n % 2 != 0 {
            return Err(Error::Params(format!("phantom grid {} must be even and at least 2", self.n)));
        }
        if self.coils == 0 {
            return Err(Error::Params("coil count must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Params(format!("noise sigma {} must be finite and non-negative", self.noise_sigma)));
        }
        if let Some(s) = self.snr_db {
            if !s.is_finite() {
                return Err(Error::Params("snr_db must be finite".into()));
            }
        }
        for e in &self.ellipses {
            if !(e.axes[0] > 0.0 && e.axes[1] > 0.0) {
                return Err(Error::Params(format!("ellipse axes {:?} must be positive", e.axes)));
            }
        }
        for g in self.field_map.gaussians.iter().chain(&self.r2star.gaussians) {
            if !(g.sigma > 0.0) {
                return Err(Error::Params(format!("gaussian width {} must be positive", g.sigma)));
            }
        }
        if self.r2star.peak < 0.0 {
            return Err(Error::Params("R2* peak must be non-negative".into()));
        }
        Ok(())
    }
}

/// Ground truth of a simulated phantom.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub rho0: Array2<Complex64>,
    pub gamma: GammaMap,
    pub foreground: Array2<bool>,
}

pub fn make_phantom(spec: &PhantomSpec) -> Result<Phantom> {
    spec.validate()?;
    let n = spec.n;
    let h = (n / 2) as f64;
    let mut rho0 = Array2::zeros((n, n));
    let mut foreground = Array2::from_elem((n, n), false);
    for ((iy, ix), v) in rho0.indexed_iter_mut() {
        let (x, y) = (coord(ix, n) as f64 / h, coord(iy, n) as f64 / h);
        for e in &spec.ellipses {
            if e.contains(x, y) {
                *v += Complex64::new(e.amplitude[0], e.amplitude[1]);
                foreground[[iy, ix]] = true;
            }
        }
    }
    let field_hz = spec.field_map.render(n, &foreground);
    let r2star = spec.r2star.render(n, &foreground);
    let omega = field_hz.mapv(|f| 2.0 * std::f64::consts::PI * f);
    Ok(Phantom { rho0, gamma: GammaMap { r2star, omega }, foreground })
}

/// Line-by-line EPI readout of both echoes: line `l` of echo `e` carries
/// `F(ρ₀·e^{−γt})` at its acquisition time `t`.
pub fn simulate_dual_echo(
    rho0: &Array2<Complex64>,
    gamma: &GammaMap,
    params: &AcqParams,
) -> Result<(Array2<Complex64>, Array2<Complex64>)> {
    params.validate()?;
    let n = params.n;
    if rho0.dim() != (n, n) || gamma.r2star.dim() != (n, n) || gamma.omega.dim() != (n, n) {
        return Err(Error::Shape(format!("object {:?} on a {n}x{n} acquisition", rho0.dim())));
    }
    let fft = Fft2::new(n);
    let g = gamma.gamma();
    let mut echoes = [Array2::zeros((n, n)), Array2::zeros((n, n))];
    for (echo, out) in echoes.iter_mut().enumerate() {
        for line in 0..n {
            let t = params.line_time(echo, line);
            let img = Zip::from(rho0).and(&g).map_collect(|&r, &gm| r * (-gm * t).exp());
            out.row_mut(line).assign(&fft.forward_line(&img, line));
        }
    }
    let [k1, k2] = echoes;
    Ok((k1, k2))
}

/// Adds i.i.d. complex Gaussian noise, `sigma` per real component.
pub fn add_noise(kspace: &Array2<Complex64>, sigma: f64, seed: u64) -> Result<Array2<Complex64>> {
    add_noise_stream(kspace, sigma, seed, 0)
}

/// As [`add_noise`], drawing from an independent stream of the same seed.
pub fn add_noise_stream(kspace: &Array2<Complex64>, sigma: f64, seed: u64, stream: u64) -> Result<Array2<Complex64>> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::Params(format!("noise sigma {sigma} must be finite and non-negative")));
    }
    if sigma == 0.0 {
        return Ok(kspace.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    let normal = Normal::new(0.0, sigma).expect("valid sigma");
    Ok(kspace.mapv(|v| v + Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng))))
}

/// Per-component noise level giving `snr_db` against the mean sample energy.
pub fn sigma_for_snr(echoes: &[&Array2<Complex64>], snr_db: f64) -> f64 {
    let (sum, count) = echoes
        .iter()
        .fold((0.0, 0usize), |(s, c), e| (s + e.iter().map(|v| v.norm_sqr()).sum::<f64>(), c + e.len()));
    if count == 0 {
        return 0.0;
    }
    (sum / count as f64 / 10f64.powf(snr_db / 10.0) / 2.0).sqrt()
}

/// Magnitude of the plain inverse DFT, i.e. the uncorrected EPI image.
pub fn distorted_ifft_preview(kspace: &Array2<Complex64>) -> Array2<f64> {
    Fft2::new(kspace.nrows()).inverse(kspace).mapv(|v| v.norm())
}

/// Noisy multi-coil dual-echo data together with its ground truth.
#[derive(Clone, Debug)]
pub struct SimulatedData {
    pub phantom: Phantom,
    /// `[echo1, echo2]` per coil.
    pub coils: Vec<[Array2<Complex64>; 2]>,
    pub noise_sigma: f64,
}

/// Builds the phantom, simulates both echoes and adds per-coil noise.
///
/// Coil `c`, echo `e` draws from stream `2c + e` of the spec seed, so the
/// seed only ever changes the noise.
pub fn simulate(spec: &PhantomSpec, params: &AcqParams) -> Result<SimulatedData> {
    if spec.n != params.n {
        return Err(Error::Params(format!("phantom grid {} vs acquisition grid {}", spec.n, params.n)));
    }
    let phantom = make_phantom(spec)?;
    let (k1, k2) = simulate_dual_echo(&phantom.rho0, &phantom.gamma, params)?;
    let sigma = match spec.snr_db {
        Some(snr) => sigma_for_snr(&[&k1, &k2], snr),
        None => spec.noise_sigma,
    };
    let mut coils = Vec::with_capacity(spec.coils);
    for c in 0..spec.coils as u64 {
        coils.push([
            add_noise_stream(&k1, sigma, spec.seed, 2 * c)?,
            add_noise_stream(&k2, sigma, spec.seed, 2 * c + 1)?,
        ]);
    }
    Ok(SimulatedData { phantom, coils, noise_sigma: sigma })
}

//! Acquisition geometry and the time-segmented forward model.
//!
//! Line `l` (k-space row `l`, acquired in ascending row order) of the first
//! echo is read at `(l + 1)·dt`; the second echo reads the same line
//! `m_delay·dt` later. Splitting the readout into segments of `k_seg` lines
//! and freezing the decay at `t_n = n·k_seg·dt` turns each echo into a set of
//! masked Fourier measurements of the image series `ρ_n = ρ₀·e^{−γ t_n}`.
//! Both echoes combine into one k-t volume of `M` frames.

use ndarray::{Array1, Array2, Array3, Axis};
use num_complex::Complex64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fft::Fft2;

/// How many frames the combined volume holds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrameConvention {
    /// `M = N/k + m/k`: every line of both echoes lands in some frame.
    #[default]
    Combined,
    /// `M = N/k`: trailing second-echo segments past the last first-echo
    /// segment are dropped.
    SegmentsOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcqParams {
    /// Grid size (pixels and k-space samples per dimension).
    pub n: usize,
    /// Lines per time segment.
    pub k_seg: usize,
    /// Echo shift of the second readout, in line times.
    pub m_delay: usize,
    /// Line acquisition time in seconds.
    pub dt: f64,
    #[serde(default)]
    pub convention: FrameConvention,
}

impl AcqParams {
    pub fn new(n: usize, k_seg: usize, m_delay: usize, dt: f64) -> Result<Self> {
        let p = AcqParams { n, k_seg, m_delay, dt, convention: FrameConvention::Combined };
        p.validate()?;
        Ok(p)
    }

    pub fn with_convention(mut self, convention: FrameConvention) -> Self {
        self.convention = convention;
        self
    }

    /// Same geometry, different segment length.
    pub fn with_segment(&self, k_seg: usize) -> Result<Self> {
        let p = AcqParams { k_seg, ..*self };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n == 0 || self.k_seg == 0 {
            return Err(Error::Params(format!("grid {} and segment length {} must be positive", self.n, self.k_seg)));
        }
        if self.n % self.k_seg != 0 {
            return Err(Error::Params(format!("N = {} is not divisible by k_seg = {}", self.n, self.k_seg)));
        }
        if self.m_delay % self.k_seg != 0 {
            return Err(Error::Params(format!(
                "m_delay = {} is not divisible by k_seg = {}",
                self.m_delay, self.k_seg
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::Params(format!("line time dt = {} must be positive", self.dt)));
        }
        Ok(())
    }

    pub fn segments(&self) -> usize {
        self.n / self.k_seg
    }

    /// Frame offset between the two echoes.
    pub fn echo_shift(&self) -> usize {
        self.m_delay / self.k_seg
    }

    pub fn frames(&self) -> usize {
        match self.convention {
            FrameConvention::Combined => self.segments() + self.echo_shift(),
            FrameConvention::SegmentsOnly => self.segments(),
        }
    }

    /// Segment duration `T = k_seg·dt`.
    pub fn segment_time(&self) -> f64 {
        self.k_seg as f64 * self.dt
    }

    /// Frozen decay time of 1-based frame `n`.
    pub fn frame_time(&self, n: usize) -> f64 {
        n as f64 * self.segment_time()
    }

    /// Acquisition time of `line` in echo 0 or 1.
    pub fn line_time(&self, echo: usize, line: usize) -> f64 {
        (line + 1 + echo * self.m_delay) as f64 * self.dt
    }
}

/// Per-frame sampling pattern of the combined volume.
///
/// Whole k-space rows are measured; `echo_frame[e][l]` is the 0-based frame
/// holding line `l` of echo `e` (`None` when the convention drops it).
#[derive(Clone, Debug, PartialEq)]
pub struct SamplingMask {
    n: usize,
    echo_frame: [Vec<Option<usize>>; 2],
    measured: Array3<bool>,
}

impl SamplingMask {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn frames(&self) -> usize {
        self.measured.len_of(Axis(0))
    }

    pub fn measured(&self) -> &Array3<bool> {
        &self.measured
    }

    #[inline]
    pub fn is_measured(&self, frame: usize, ky: usize, kx: usize) -> bool {
        self.measured[[frame, ky, kx]]
    }

    pub fn echo_frame(&self, echo: usize, line: usize) -> Option<usize> {
        self.echo_frame[echo][line]
    }

    /// Measured rows of a frame, ascending.
    pub fn frame_lines(&self, frame: usize) -> Vec<usize> {
        (0..self.n).filter(|&ky| self.measured[[frame, ky, 0]]).collect()
    }

    pub fn count(&self) -> usize {
        self.measured.iter().filter(|&&m| m).count()
    }

    /// Mask with every entry measured, for operator tests.
    pub fn full(n: usize, frames: usize) -> Self {
        SamplingMask {
            n,
            echo_frame: [vec![None; n], vec![None; n]],
            measured: Array3::from_elem((frames, n, n), true),
        }
    }

    pub fn from_array(measured: Array3<bool>) -> Result<Self> {
        let (_, ny, nx) = measured.dim();
        if ny != nx {
            return Err(Error::Shape(format!("mask frames are {ny}x{nx}, expected square")));
        }
        Ok(SamplingMask { n: nx, echo_frame: [vec![None; nx], vec![None; nx]], measured })
    }
}

/// Assigns every acquired line of both echoes to its time segment.
pub fn build_masks(params: &AcqParams) -> Result<SamplingMask> {
    params.validate()?;
    let n = params.n;
    let frames = params.frames();
    let mut measured = Array3::from_elem((frames, n, n), false);
    let mut echo_frame = [vec![None; n], vec![None; n]];
    for (echo, table) in echo_frame.iter_mut().enumerate() {
        for (line, slot) in table.iter_mut().enumerate() {
            // 1-based segment of the line's read time, in units of dt
            let t = line + 1 + echo * params.m_delay;
            let segment = t.div_ceil(params.k_seg);
            if segment > frames {
                continue;
            }
            let frame = segment - 1;
            *slot = Some(frame);
            measured.index_axis_mut(Axis(0), frame).row_mut(line).fill(true);
        }
    }
    Ok(SamplingMask { n, echo_frame, measured })
}

/// Complex k-t samples on the `M × N × N` grid; zero where unmeasured.
#[derive(Clone, Debug)]
pub struct KTVolume {
    pub data: Array3<Complex64>,
    pub mask: SamplingMask,
}

impl KTVolume {
    pub fn new(data: Array3<Complex64>, mask: SamplingMask) -> Result<Self> {
        if data.dim() != mask.measured().dim() {
            return Err(Error::Shape(format!("volume {:?} vs mask {:?}", data.dim(), mask.measured().dim())));
        }
        let mut data = data;
        for (v, &m) in data.iter_mut().zip(mask.measured()) {
            if !m {
                *v = Complex64::new(0.0, 0.0);
            } else if !(v.re.is_finite() && v.im.is_finite()) {
                return Err(Error::Format("non-finite measured sample".into()));
            }
        }
        Ok(KTVolume { data, mask })
    }

    pub fn frames(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn n(&self) -> usize {
        self.mask.n()
    }
}

/// Places the rows of both echoes into the combined volume.
///
/// With `m_delay = 0` both echoes share every location and the stored
/// sample is their mean.
pub fn assemble_volume(echo1: &Array2<Complex64>, echo2: &Array2<Complex64>, params: &AcqParams) -> Result<KTVolume> {
    let n = params.n;
    for (i, e) in [echo1, echo2].iter().enumerate() {
        if e.dim() != (n, n) {
            return Err(Error::Shape(format!("echo {} is {:?}, expected {n}x{n}", i + 1, e.dim())));
        }
    }
    let mask = build_masks(params)?;
    let mut data = Array3::zeros((params.frames(), n, n));
    let mut hits = Array2::<u8>::zeros((params.frames(), n));
    for (echo, src) in [echo1, echo2].iter().enumerate() {
        for line in 0..n {
            if let Some(frame) = mask.echo_frame(echo, line) {
                let mut dst = data.index_axis_mut(Axis(0), frame);
                let mut row = dst.row_mut(line);
                row += &src.row(line);
                hits[[frame, line]] += 1;
            }
        }
    }
    for ((frame, line), &h) in hits.indexed_iter() {
        if h > 1 {
            let inv = 1.0 / h as f64;
            data.index_axis_mut(Axis(0), frame).row_mut(line).mapv_inplace(|v| v * inv);
        }
    }
    KTVolume::new(data, mask)
}

/// Image series `ρ_n`, frames `n = 1..M` stored at index `n − 1`.
#[derive(Clone, Debug)]
pub struct ImageSeries {
    pub frames: Array3<Complex64>,
}

/// Single-exponential parameterization `ρ_n = α·βⁿ`.
#[derive(Clone, Debug)]
pub struct ExpParamImage {
    pub alpha: Array2<Complex64>,
    /// Per-line-time ratio `e^{−γ·dt}`.
    pub beta: Array2<Complex64>,
}

/// `γ = R2* + jω`.
#[derive(Clone, Debug)]
pub struct GammaMap {
    /// s⁻¹
    pub r2star: Array2<f64>,
    /// rad/s
    pub omega: Array2<f64>,
}

impl GammaMap {
    pub fn zeros(n: usize) -> Self {
        GammaMap { r2star: Array2::zeros((n, n)), omega: Array2::zeros((n, n)) }
    }

    pub fn gamma(&self) -> Array2<Complex64> {
        ndarray::Zip::from(&self.r2star).and(&self.omega).map_collect(|&r, &w| Complex64::new(r, w))
    }

    /// `e^{−γ t}` per pixel.
    pub fn decay(&self, t: f64) -> Array2<Complex64> {
        self.gamma().mapv(|g| (-g * t).exp())
    }

    pub fn field_hz(&self) -> Array2<f64> {
        self.omega.mapv(|w| w / (2.0 * std::f64::consts::PI))
    }
}

fn check_frames(frames: usize, n: usize, mask: &SamplingMask) -> Result<()> {
    if frames != mask.frames() || n != mask.n() {
        return Err(Error::Shape(format!(
            "{frames} frames of {n}x{n} vs mask with {} frames of {}x{}",
            mask.frames(),
            mask.n(),
            mask.n()
        )));
    }
    Ok(())
}

/// Frames with few measured lines use line transforms instead of a full FFT.
fn masked_transform(fft: &Fft2, img: &Array2<Complex64>, lines: &[usize]) -> Array2<Complex64> {
    let n = fft.n();
    if lines.len() * 4 <= n {
        let mut out = Array2::zeros((n, n));
        for &ky in lines {
            out.row_mut(ky).assign(&fft.forward_line(img, ky));
        }
        out
    } else {
        let full = fft.forward(img);
        let mut out = Array2::zeros((n, n));
        for &ky in lines {
            out.row_mut(ky).assign(&full.row(ky));
        }
        out
    }
}

/// Adds `weight · Fᴴ Sᵀ b` into `out`.
fn masked_adjoint_accumulate(
    fft: &Fft2,
    b: &Array2<Complex64>,
    lines: &[usize],
    weight: &Array2<Complex64>,
    out: &mut Array2<Complex64>,
) {
    let n = fft.n();
    if lines.len() * 4 <= n {
        let mut img = Array2::zeros((n, n));
        for &ky in lines {
            fft.adjoint_line_accumulate(&b.row(ky).to_owned(), ky, Complex64::new(1.0, 0.0), &mut img);
        }
        ndarray::Zip::from(out).and(&img).and(weight).for_each(|o, &i, &w| *o += w * i);
    } else {
        let mut z = Array2::zeros((n, n));
        for &ky in lines {
            z.row_mut(ky).assign(&b.row(ky));
        }
        fft.inverse_inplace(&mut z);
        let s = (n * n) as f64;
        ndarray::Zip::from(out).and(&z).and(weight).for_each(|o, &i, &w| *o += w * i * s);
    }
}

/// `b_n = S_n ∘ F(ρ_n)` for every frame; unmeasured entries are zero.
pub fn forward(series: &ImageSeries, mask: &SamplingMask) -> Result<Array3<Complex64>> {
    let (frames, ny, nx) = series.frames.dim();
    if ny != nx {
        return Err(Error::Shape(format!("frames are {ny}x{nx}")));
    }
    check_frames(frames, nx, mask)?;
    let fft = Fft2::new(nx);
    let out: Vec<Array2<Complex64>> = (0..frames)
        .into_par_iter()
        .map(|f| masked_transform(&fft, &series.frames.index_axis(Axis(0), f).to_owned(), &mask.frame_lines(f)))
        .collect();
    Ok(stack(&out))
}

/// Adjoint of [`forward`].
pub fn adjoint(b: &Array3<Complex64>, mask: &SamplingMask) -> Result<ImageSeries> {
    let (frames, ny, nx) = b.dim();
    if ny != nx {
        return Err(Error::Shape(format!("frames are {ny}x{nx}")));
    }
    check_frames(frames, nx, mask)?;
    let fft = Fft2::new(nx);
    let ones = Array2::from_elem((nx, nx), Complex64::new(1.0, 0.0));
    let out: Vec<Array2<Complex64>> = (0..frames)
        .into_par_iter()
        .map(|f| {
            let mut img = Array2::zeros((nx, nx));
            masked_adjoint_accumulate(&fft, &b.index_axis(Axis(0), f).to_owned(), &mask.frame_lines(f), &ones, &mut img);
            img
        })
        .collect();
    Ok(ImageSeries { frames: stack(&out) })
}

fn stack(frames: &[Array2<Complex64>]) -> Array3<Complex64> {
    let views: Vec<_> = frames.iter().map(|f| f.view()).collect();
    ndarray::stack(Axis(0), &views).expect("equal frame shapes")
}

/// The operator `α ↦ S F(α·β^{n·k_seg})` for a fixed `β`, with cached powers.
///
/// `β` is the per-line-time ratio; frame `n` of a tier with segments of
/// `k_seg` lines decays by `β^{n·k_seg}`.
#[derive(Clone, Debug)]
pub struct ExpOperator {
    fft: Fft2,
    lines: Vec<Vec<usize>>,
    powers: Vec<Array2<Complex64>>,
    conj_powers: Vec<Array2<Complex64>>,
    k_seg: usize,
    n: usize,
}

impl ExpOperator {
    pub fn new(beta: &Array2<Complex64>, params: &AcqParams, mask: &SamplingMask) -> Result<Self> {
        let n = mask.n();
        if beta.dim() != (n, n) || params.n != n || params.frames() != mask.frames() {
            return Err(Error::Shape(format!(
                "beta {:?}, params N={} M={}, mask N={} M={}",
                beta.dim(),
                params.n,
                params.frames(),
                n,
                mask.frames()
            )));
        }
        if beta.iter().any(|b| !(b.re.is_finite() && b.im.is_finite())) {
            return Err(Error::Params("beta map has non-finite entries".into()));
        }
        let step = beta.mapv(|b| b.powu(params.k_seg as u32));
        let mut powers = Vec::with_capacity(mask.frames());
        let mut cur = step.clone();
        for _ in 0..mask.frames() {
            powers.push(cur.clone());
            cur = &cur * &step;
        }
        let conj_powers = powers.iter().map(|p| p.mapv(|v| v.conj())).collect();
        let lines = (0..mask.frames()).map(|f| mask.frame_lines(f)).collect();
        Ok(ExpOperator { fft: Fft2::new(n), lines, powers, conj_powers, k_seg: params.k_seg, n })
    }

    pub fn frames(&self) -> usize {
        self.powers.len()
    }

    /// Power of `β` applied to frame `f`.
    pub fn exponent(&self, f: usize) -> usize {
        self.k_seg * (f + 1)
    }

    fn sparse(&self, f: usize) -> bool {
        self.lines[f].len() * 4 <= self.n
    }

    /// Measured rows of frame `f` for image `alpha`.
    fn frame_rows(&self, alpha: &Array2<Complex64>, f: usize) -> Vec<(usize, Array1<Complex64>)> {
        if self.sparse(f) {
            self.lines[f].iter().map(|&ky| (ky, self.fft.weighted_forward_line(alpha, &self.powers[f], ky))).collect()
        } else {
            let full = self.fft.forward(&(alpha * &self.powers[f]));
            self.lines[f].iter().map(|&ky| (ky, full.row(ky).to_owned())).collect()
        }
    }

    fn frame_adjoint(&self, rows: &[(usize, Array1<Complex64>)], f: usize, out: &mut Array2<Complex64>) {
        if self.sparse(f) {
            self.fft.weighted_adjoint_lines(rows, &self.conj_powers[f], out);
        } else {
            let mut z = Array2::zeros((self.n, self.n));
            for (ky, v) in rows {
                z.row_mut(*ky).assign(v);
            }
            self.fft.inverse_inplace(&mut z);
            let s = (self.n * self.n) as f64;
            ndarray::Zip::from(out).and(&z).and(&self.conj_powers[f]).for_each(|o, &i, &w| *o += w * i * s);
        }
    }

    pub fn apply(&self, alpha: &Array2<Complex64>) -> Array3<Complex64> {
        let mut out = Array3::zeros((self.frames(), self.n, self.n));
        let rows: Vec<_> = (0..self.frames()).into_par_iter().map(|f| self.frame_rows(alpha, f)).collect();
        for (f, rs) in rows.into_iter().enumerate() {
            for (ky, v) in rs {
                out.index_axis_mut(Axis(0), f).row_mut(ky).assign(&v);
            }
        }
        out
    }

    pub fn adjoint(&self, b: &Array3<Complex64>) -> Array2<Complex64> {
        self.adjoint_weighted(b, &vec![1.0; self.frames()])
    }

    /// `Σ_f w_f·Aᴴ_f b_f`: the adjoint with a real weight per frame.
    pub fn adjoint_weighted(&self, b: &Array3<Complex64>, weights: &[f64]) -> Array2<Complex64> {
        assert_eq!(weights.len(), self.frames(), "one weight per frame");
        let parts: Vec<Array2<Complex64>> = (0..self.frames())
            .into_par_iter()
            .map(|f| {
                let w = weights[f];
                let rows: Vec<_> =
                    self.lines[f].iter().map(|&ky| (ky, b.index_axis(Axis(0), f).row(ky).mapv(|v| v * w))).collect();
                let mut img = Array2::zeros((self.n, self.n));
                self.frame_adjoint(&rows, f, &mut img);
                img
            })
            .collect();
        sum_ordered(parts, self.n)
    }

    /// `Aᴴ A α` without materializing the sample volume.
    pub fn normal(&self, alpha: &Array2<Complex64>) -> Array2<Complex64> {
        let parts: Vec<Array2<Complex64>> = (0..self.frames())
            .into_par_iter()
            .map(|f| {
                let rows = self.frame_rows(alpha, f);
                let mut img = Array2::zeros((self.n, self.n));
                self.frame_adjoint(&rows, f, &mut img);
                img
            })
            .collect();
        sum_ordered(parts, self.n)
    }

    /// Number of measured samples; equals every diagonal entry of `AᴴA` when `β ≡ 1`.
    pub fn sample_count(&self) -> usize {
        self.lines.iter().map(|l| l.len() * self.n).sum()
    }
}

/// Sum in frame order so results do not depend on thread scheduling.
fn sum_ordered(parts: Vec<Array2<Complex64>>, n: usize) -> Array2<Complex64> {
    let mut acc = Array2::zeros((n, n));
    for p in parts {
        acc += &p;
    }
    acc
}

/// Samples of the series `ρ_n = α·β^{n·k_seg}`.
pub fn forward_exp(x: &ExpParamImage, params: &AcqParams, mask: &SamplingMask) -> Result<Array3<Complex64>> {
    if x.alpha.dim() != x.beta.dim() {
        return Err(Error::Shape(format!("alpha {:?} vs beta {:?}", x.alpha.dim(), x.beta.dim())));
    }
    Ok(ExpOperator::new(&x.beta, params, mask)?.apply(&x.alpha))
}

/// Adjoint in `α` of [`forward_exp`] at fixed `β`.
pub fn adjoint_exp(
    b: &Array3<Complex64>,
    beta: &Array2<Complex64>,
    params: &AcqParams,
    mask: &SamplingMask,
) -> Result<Array2<Complex64>> {
    if b.dim() != mask.measured().dim() {
        return Err(Error::Shape(format!("samples {:?} vs mask {:?}", b.dim(), mask.measured().dim())));
    }
    Ok(ExpOperator::new(beta, params, mask)?.adjoint(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fft::coord;
    use crate::linalg::inner;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rand_c(rng: &mut ChaCha8Rng) -> Complex64 {
        Complex64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)
    }

    /// Brute-force frame count: distinct segment indices over all line times.
    fn enumerate_frames(n: usize, k: usize, m: usize) -> usize {
        let mut segs: Vec<usize> = (0..n).flat_map(|l| [l + 1, l + 1 + m]).map(|t| t.div_ceil(k)).collect();
        segs.sort();
        segs.dedup();
        segs.len()
    }

    #[test]
    fn frame_count_matches_enumeration() {
        // N=64, k=m=4 enumerates to 17 frames, not 16
        assert_eq!(enumerate_frames(64, 4, 4), 17);
        let p = AcqParams::new(64, 4, 4, 1e-3).unwrap();
        assert_eq!(p.frames(), 17);
        assert_eq!(build_masks(&p).unwrap().frames(), 17);
        assert_eq!(p.with_convention(FrameConvention::SegmentsOnly).frames(), 16);

        assert_eq!(enumerate_frames(64, 1, 4), 68);
        let p = AcqParams::new(64, 1, 4, 0.636e-3).unwrap();
        assert_eq!(p.frames(), 68);
        for (n, k, m) in [(16, 2, 4), (32, 8, 8), (12, 3, 6)] {
            assert_eq!(AcqParams::new(n, k, m, 1.0).unwrap().frames(), enumerate_frames(n, k, m));
        }
    }

    #[test]
    fn zero_delay_single_frame_fully_sampled() {
        let p = AcqParams::new(4, 4, 0, 1e-3).unwrap();
        let mask = build_masks(&p).unwrap();
        assert_eq!(mask.frames(), 1);
        assert!(mask.measured().iter().all(|&m| m));
        for l in 0..4 {
            assert_eq!(mask.echo_frame(0, l), mask.echo_frame(1, l));
        }
    }

    #[test]
    fn invalid_divisibility_is_rejected() {
        assert!(matches!(AcqParams::new(64, 5, 5, 1e-3), Err(Error::Params(_))));
        assert!(matches!(AcqParams::new(64, 4, 6, 1e-3), Err(Error::Params(_))));
        assert!(matches!(AcqParams::new(64, 4, 4, 0.0), Err(Error::Params(_))));
    }

    #[test]
    fn mask_accounting() {
        for (n, k, m) in [(64, 4, 4), (64, 1, 4), (32, 2, 6), (16, 4, 8)] {
            let p = AcqParams::new(n, k, m, 1e-3).unwrap();
            let mask = build_masks(&p).unwrap();
            // every line once per echo, 2N lines total
            assert_eq!(mask.count(), 2 * n * n, "({n},{k},{m})");
            for echo in 0..2 {
                let mut seen = vec![0usize; n];
                for l in 0..n {
                    let f = mask.echo_frame(echo, l).unwrap();
                    assert!(mask.is_measured(f, l, 0));
                    seen[l] += 1;
                }
                assert!(seen.iter().all(|&c| c == 1));
            }
            // first and last frame hold one block, interior frames two (when m > 0)
            let blocks = |f: usize| mask.frame_lines(f).len() / k;
            assert_eq!(blocks(0), 1);
            assert_eq!(blocks(p.frames() - 1), 1);
            if m >= k {
                for f in 1..p.frames() - 1 {
                    let expect = if f < p.echo_shift() || f >= p.segments() { 1 } else { 2 };
                    assert_eq!(blocks(f), expect, "frame {f}");
                }
            }
            // frame n holds segment n of echo 1 and segment n − m/k of echo 2
            for l in 0..n {
                assert_eq!(mask.echo_frame(0, l), Some(l / k));
                assert_eq!(mask.echo_frame(1, l), Some(l / k + m / k));
            }
        }
    }

    fn random_series(rng: &mut ChaCha8Rng, m: usize, n: usize) -> ImageSeries {
        ImageSeries { frames: Array3::from_shape_fn((m, n, n), |_| rand_c(rng)) }
    }

    #[test]
    fn forward_of_delta_has_unit_magnitude_samples() {
        let p = AcqParams::new(8, 2, 2, 1e-3).unwrap();
        let mask = build_masks(&p).unwrap();
        let mut s = ImageSeries { frames: Array3::zeros((p.frames(), 8, 8)) };
        for f in 0..p.frames() {
            s.frames[[f, 2, 5]] = Complex64::new(1.0, 0.0);
        }
        let b = forward(&s, &mask).unwrap();
        for (v, &m) in b.iter().zip(mask.measured()) {
            if m {
                assert!((v.norm() - 1.0).abs() < 1e-12);
            } else {
                assert_eq!(*v, Complex64::new(0.0, 0.0));
            }
        }
        let zero = ImageSeries { frames: Array3::zeros((p.frames(), 8, 8)) };
        assert!(forward(&zero, &mask).unwrap().iter().all(|v| v.norm() == 0.0));
    }

    /// Dense summation of the segment-frozen signal equation.
    fn dense_forward(rho0: &Array2<Complex64>, gamma: &Array2<Complex64>, p: &AcqParams, mask: &SamplingMask) -> Array3<Complex64> {
        let n = p.n;
        let mut out = Array3::zeros((p.frames(), n, n));
        for f in 0..p.frames() {
            let t = p.frame_time(f + 1);
            for ky in mask.frame_lines(f) {
                for kx in 0..n {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for y in 0..n {
                        for x in 0..n {
                            let ph = -2.0 * PI * (coord(kx, n) * coord(x, n) + coord(ky, n) * coord(y, n)) as f64 / n as f64;
                            acc += rho0[[y, x]] * (-gamma[[y, x]] * t).exp() * Complex64::from_polar(1.0, ph);
                        }
                    }
                    out[[f, ky, kx]] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_dense_summation() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = AcqParams::new(8, 2, 2, 1e-3).unwrap();
        let mask = build_masks(&p).unwrap();
        let rho0 = Array2::from_shape_fn((8, 8), |_| rand_c(&mut rng));
        let gamma = Array2::from_shape_fn((8, 8), |_| Complex64::new(20.0 * rng.random::<f64>(), 300.0 * (rng.random::<f64>() - 0.5)));
        let series = ImageSeries {
            frames: Array3::from_shape_fn((p.frames(), 8, 8), |(f, y, x)| {
                rho0[[y, x]] * (-gamma[[y, x]] * p.frame_time(f + 1)).exp()
            }),
        };
        let got = forward(&series, &mask).unwrap();
        let want = dense_forward(&rho0, &gamma, &p, &mask);
        let err = (&got - &want).iter().map(|v| v.norm()).fold(0.0, f64::max);
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn adjoint_identity_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (n, k, m) in [(8, 2, 2), (16, 1, 4), (16, 4, 4)] {
            let p = AcqParams::new(n, k, m, 1e-3).unwrap();
            let mask = build_masks(&p).unwrap();
            for _ in 0..3 {
                let x = random_series(&mut rng, p.frames(), n);
                let y = Array3::from_shape_fn((p.frames(), n, n), |_| rand_c(&mut rng));
                let lhs = inner(&forward(&x, &mask).unwrap(), &y);
                let rhs = inner(&x.frames, &adjoint(&y, &mask).unwrap().frames);
                assert!((lhs - rhs).norm() / lhs.norm() <= 1e-10);
            }
        }
    }

    #[test]
    fn adjoint_of_forward_delta_counts_samples() {
        let p = AcqParams::new(8, 2, 2, 1e-3).unwrap();
        let mask = build_masks(&p).unwrap();
        let mut s = ImageSeries { frames: Array3::zeros((p.frames(), 8, 8)) };
        for f in 0..p.frames() {
            s.frames[[f, 3, 1]] = Complex64::new(1.0, 0.0);
        }
        let back = adjoint(&forward(&s, &mask).unwrap(), &mask).unwrap();
        for f in 0..p.frames() {
            let count = (mask.frame_lines(f).len() * 8) as f64;
            assert!((back.frames[[f, 3, 1]] - Complex64::new(count, 0.0)).norm() < 1e-10);
        }
        let zero = adjoint(&Array3::zeros((p.frames(), 8, 8)), &mask).unwrap();
        assert!(zero.frames.iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn forward_exp_special_cases() {
        let p = AcqParams::new(8, 1, 2, 1e-3).unwrap();
        let mask = build_masks(&p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let alpha = Array2::from_shape_fn((8, 8), |_| rand_c(&mut rng));
        let fa = Fft2::new(8).forward(&alpha);

        // β ≡ 1: plain DFT of α on every measured location
        let ones = Array2::from_elem((8, 8), Complex64::new(1.0, 0.0));
        let b = forward_exp(&ExpParamImage { alpha: alpha.clone(), beta: ones }, &p, &mask).unwrap();
        for ((f, ky, kx), v) in b.indexed_iter() {
            if mask.is_measured(f, ky, kx) {
                assert!((v - fa[[ky, kx]]).norm() < 1e-10);
            }
        }

        // real β = 0.9 with a δ image: samples scale as 0.9ⁿ
        let mut delta = Array2::zeros((8, 8));
        delta[[4, 4]] = Complex64::new(1.0, 0.0);
        let beta = Array2::from_elem((8, 8), Complex64::new(0.9, 0.0));
        let b = forward_exp(&ExpParamImage { alpha: delta, beta }, &p, &mask).unwrap();
        for ((f, ky, kx), v) in b.indexed_iter() {
            if mask.is_measured(f, ky, kx) {
                assert!((v.norm() - 0.9f64.powi(f as i32 + 1)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn forward_exp_matches_series_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let p = AcqParams::new(16, 2, 4, 1e-3).unwrap();
        let mask = build_masks(&p).unwrap();
        let alpha = Array2::from_shape_fn((16, 16), |_| rand_c(&mut rng));
        let beta = Array2::from_shape_fn((16, 16), |(y, x)| {
            Complex64::from_polar(0.97 - 0.01 * (y as f64 / 16.0), 0.2 * (x as f64 / 16.0 * PI).sin())
        });
        let series = ImageSeries {
            frames: Array3::from_shape_fn((p.frames(), 16, 16), |(f, y, x)| {
                alpha[[y, x]] * beta[[y, x]].powu(((f + 1) * p.k_seg) as u32)
            }),
        };
        let want = forward(&series, &mask).unwrap();
        let got = forward_exp(&ExpParamImage { alpha, beta }, &p, &mask).unwrap();
        assert!(crate::linalg::norm(&(&got - &want)) / crate::linalg::norm(&want) < 1e-12);
    }

    #[test]
    fn adjoint_exp_identity_and_special_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let p = AcqParams::new(16, 1, 4, 1e-3).unwrap();
        let mask = build_masks(&p).unwrap();
        for _ in 0..3 {
            let beta = Array2::from_shape_fn((16, 16), |_| Complex64::from_polar(0.9 + 0.1 * rng.random::<f64>(), rng.random::<f64>() - 0.5));
            let a = Array2::from_shape_fn((16, 16), |_| rand_c(&mut rng));
            let y = Array3::from_shape_fn((p.frames(), 16, 16), |_| rand_c(&mut rng));
            let op = ExpOperator::new(&beta, &p, &mask).unwrap();
            let lhs = inner(&op.apply(&a), &y);
            let rhs = inner(&a, &adjoint_exp(&y, &beta, &p, &mask).unwrap());
            assert!((lhs - rhs).norm() / lhs.norm() <= 1e-10);
            let nn = op.normal(&a);
            let via = op.adjoint(&op.apply(&a));
            assert!(crate::linalg::norm(&(&nn - &via)) / crate::linalg::norm(&via) < 1e-12);
        }
        let ones = Array2::from_elem((16, 16), Complex64::new(1.0, 0.0));
        let zero = adjoint_exp(&Array3::zeros((p.frames(), 16, 16)), &ones, &p, &mask).unwrap();
        assert!(zero.iter().all(|v| v.norm() == 0.0));

        // β ≡ 1: sum over frames of the masked adjoint transforms
        let y = Array3::from_shape_fn((p.frames(), 16, 16), |_| rand_c(&mut rng));
        let got = adjoint_exp(&y, &ones, &p, &mask).unwrap();
        let per_frame = adjoint(&y, &mask).unwrap();
        let want = per_frame.frames.sum_axis(Axis(0));
        assert!(crate::linalg::norm(&(&got - &want)) / crate::linalg::norm(&want) < 1e-12);
    }

    #[test]
    fn weighted_adjoint_matches_scaled_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let p = AcqParams::new(16, 1, 2, 1e-3).unwrap();
        let mask = build_masks(&p).unwrap();
        let beta = Array2::from_shape_fn((16, 16), |_| Complex64::from_polar(0.95, rng.random::<f64>() - 0.5));
        let op = ExpOperator::new(&beta, &p, &mask).unwrap();
        let w: Vec<f64> = (0..op.frames()).map(|f| op.exponent(f) as f64 * 0.5).collect();
        let mut y = Array3::from_shape_fn((p.frames(), 16, 16), |_| rand_c(&mut rng));
        let got = op.adjoint_weighted(&y, &w);
        for (f, mut fr) in y.axis_iter_mut(Axis(0)).enumerate() {
            fr.mapv_inplace(|v| v * w[f]);
        }
        let want = op.adjoint(&y);
        assert!(crate::linalg::norm(&(&got - &want)) / crate::linalg::norm(&want) < 1e-13);
        assert_eq!(op.exponent(0), 1);
    }
}

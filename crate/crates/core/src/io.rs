//! On-disk formats: JSON sidecar headers, raw little-endian complex blocks
//! and 16-bit magnitude exports.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::GammaMap;
use crate::phantom::Phantom;

pub const SCHEMA_VERSION: u32 = 1;
pub const HEADER_FILE: &str = "header.json";
pub const RESULT_FILE: &str = "result.json";
const LOCK_FILE: &str = ".epi-b0.lock";

/// A raw data file and its SHA-256.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockRef {
    pub file: String,
    pub sha256: String,
}

/// Simulation ground truth stored next to a dataset.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TruthRefs {
    /// Complex image at `t = 0`.
    pub rho0: BlockRef,
    /// Complex `R2* + jω` (s⁻¹, rad/s).
    pub gamma: BlockRef,
    /// One byte per pixel, 1 inside the object.
    pub foreground: BlockRef,
}

/// Sidecar of a dual-echo k-space dataset.
///
/// Each echo file holds one `N×N` block per coil, row-major with `k_x`
/// fastest, as interleaved little-endian `f32` real/imaginary pairs. K-space
/// is in centered order (DC at `N/2`) and row `l` is the `l`-th line acquired.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub schema_version: u32,
    pub n: usize,
    /// Line time in seconds.
    pub dt: f64,
    /// Second-echo delay in line times.
    pub m_delay: usize,
    pub coils: usize,
    pub endianness: String,
    /// Readout start of each echo relative to the first, in seconds.
    pub echo_offsets: [f64; 2],
    pub echoes: [BlockRef; 2],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<TruthRefs>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default)]
    pub noise_sigma: f64,
}

impl DatasetHeader {
    pub fn check(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::Format(format!(
                "schema version {} is not supported (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        check_endianness(&self.endianness)?;
        if self.n == 0 || self.coils == 0 {
            return Err(Error::Format(format!("empty dataset: N={} coils={}", self.n, self.coils)));
        }
        Ok(())
    }
}

fn check_endianness(tag: &str) -> Result<()> {
    match tag {
        "little" => Ok(()),
        "big" => Err(Error::Format("data is tagged big-endian; only little-endian files are supported".into())),
        other => Err(Error::Format(format!("unknown endianness tag {other:?}"))),
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Interleaved little-endian `f32` pairs of every block in order.
pub fn encode_complex(blocks: &[&Array2<Complex64>]) -> Vec<u8> {
    let mut out = Vec::with_capacity(blocks.iter().map(|b| b.len() * 8).sum());
    for b in blocks {
        for v in b.iter() {
            out.extend_from_slice(&(v.re as f32).to_le_bytes());
            out.extend_from_slice(&(v.im as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_complex(bytes: &[u8], n: usize, blocks: usize) -> Result<Vec<Array2<Complex64>>> {
    let want = blocks * n * n * 8;
    if bytes.len() != want {
        return Err(Error::Format(format!("expected {want} bytes for {blocks} blocks of {n}x{n}, found {}", bytes.len())));
    }
    let vals: Vec<f32> = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(vals
        .chunks_exact(2 * n * n)
        .map(|blk| {
            let data = blk.chunks_exact(2).map(|p| Complex64::new(p[0] as f64, p[1] as f64)).collect();
            Array2::from_shape_vec((n, n), data).expect("block length checked")
        })
        .collect())
}

fn write_block(dir: &Path, name: &str, bytes: &[u8]) -> Result<BlockRef> {
    std::fs::write(dir.join(name), bytes)?;
    Ok(BlockRef { file: name.to_string(), sha256: sha256_hex(bytes) })
}

fn read_block(dir: &Path, r: &BlockRef) -> Result<Vec<u8>> {
    let path = dir.join(&r.file);
    let bytes = std::fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Usage(format!("missing data file {}", path.display())),
        _ => Error::Io(e),
    })?;
    let got = sha256_hex(&bytes);
    if got != r.sha256 {
        return Err(Error::Format(format!("checksum mismatch for {}: header {} file {got}", path.display(), r.sha256)));
    }
    Ok(bytes)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::Usage(format!("missing {}", path.display())),
        _ => Error::Io(e),
    })?;
    Ok(serde_json::from_str(&text)?)
}

/// A dual-echo dataset in memory.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub header: DatasetHeader,
    /// `[echo1, echo2]` per coil.
    pub coils: Vec<[Array2<Complex64>; 2]>,
}

/// Writes the echo files and sidecar; fills in the checksums.
pub fn write_kspace(dir: &Path, header: &DatasetHeader, coils: &[[Array2<Complex64>; 2]]) -> Result<DatasetHeader> {
    let n = header.n;
    if coils.len() != header.coils || coils.iter().any(|[a, b]| a.dim() != (n, n) || b.dim() != (n, n)) {
        return Err(Error::Shape(format!("{} coils of {n}x{n} expected", header.coils)));
    }
    let mut h = header.clone();
    for e in 0..2 {
        let blocks: Vec<&Array2<Complex64>> = coils.iter().map(|c| &c[e]).collect();
        h.echoes[e] = write_block(dir, &h.echoes[e].file, &encode_complex(&blocks))?;
    }
    write_json(&dir.join(HEADER_FILE), &h)?;
    Ok(h)
}

pub fn read_header(dir: &Path) -> Result<DatasetHeader> {
    let h: DatasetHeader = read_json(&dir.join(HEADER_FILE))?;
    h.check()?;
    Ok(h)
}

pub fn read_kspace(dir: &Path) -> Result<Dataset> {
    let header = read_header(dir)?;
    let mut echoes = Vec::with_capacity(2);
    for r in &header.echoes {
        echoes.push(decode_complex(&read_block(dir, r)?, header.n, header.coils)?);
    }
    let e2 = echoes.pop().expect("two echoes");
    let e1 = echoes.pop().expect("two echoes");
    let coils = e1.into_iter().zip(e2).map(|(a, b)| [a, b]).collect();
    Ok(Dataset { header, coils })
}

pub fn write_truth(dir: &Path, truth: &Phantom) -> Result<TruthRefs> {
    let g = truth.gamma.gamma();
    let fg: Vec<u8> = truth.foreground.iter().map(|&f| f as u8).collect();
    Ok(TruthRefs {
        rho0: write_block(dir, "truth_rho0.bin", &encode_complex(&[&truth.rho0]))?,
        gamma: write_block(dir, "truth_gamma.bin", &encode_complex(&[&g]))?,
        foreground: write_block(dir, "truth_foreground.bin", &fg)?,
    })
}

pub fn read_truth(dir: &Path) -> Result<Phantom> {
    let h = read_header(dir)?;
    let t = h.truth.as_ref().ok_or_else(|| Error::Usage(format!("{} has no ground-truth references", dir.display())))?;
    let n = h.n;
    let rho0 = decode_complex(&read_block(dir, &t.rho0)?, n, 1)?.pop().expect("one block");
    let g = decode_complex(&read_block(dir, &t.gamma)?, n, 1)?.pop().expect("one block");
    let fg = read_block(dir, &t.foreground)?;
    if fg.len() != n * n {
        return Err(Error::Format(format!("foreground mask has {} bytes, expected {}", fg.len(), n * n)));
    }
    let foreground = Array2::from_shape_vec((n, n), fg.into_iter().map(|b| b != 0).collect()).expect("length checked");
    Ok(Phantom { rho0, gamma: GammaMap { r2star: g.mapv(|v| v.re), omega: g.mapv(|v| v.im) }, foreground })
}

/// A 16-bit image export and the value window mapped onto `0..=65535`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExportRef {
    pub quantity: String,
    pub png: String,
    pub pgm: String,
    pub window: [f64; 2],
}

/// Min-max window over finite values; a flat image maps to zero.
pub fn quantize(img: &Array2<f64>) -> (Vec<u16>, [f64; 2]) {
    let finite = img.iter().cloned().filter(|v| v.is_finite());
    let (lo, hi) = finite.fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo.is_finite() { (lo, hi) } else { (0.0, 0.0) };
    let span = hi - lo;
    let px = img
        .iter()
        .map(|&v| if span > 0.0 && v.is_finite() { (((v - lo) / span).clamp(0.0, 1.0) * 65535.0).round() as u16 } else { 0 })
        .collect();
    (px, [lo, hi])
}

pub fn write_png16(path: &Path, width: usize, height: usize, px: &[u16], window: [f64; 2]) -> Result<()> {
    let w = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(w, width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    enc.add_text_chunk("window_min".into(), format!("{:e}", window[0])).map_err(png_err)?;
    enc.add_text_chunk("window_max".into(), format!("{:e}", window[1])).map_err(png_err)?;
    let mut writer = enc.write_header().map_err(png_err)?;
    let bytes: Vec<u8> = px.iter().flat_map(|v| v.to_be_bytes()).collect();
    writer.write_image_data(&bytes).map_err(png_err)?;
    writer.finish().map_err(png_err)?;
    Ok(())
}

fn png_err(e: png::EncodingError) -> Error {
    Error::Format(format!("png: {e}"))
}

/// Binary PGM (P5) with `maxval` 65535; the window is kept in a comment line.
pub fn write_pgm16(path: &Path, width: usize, height: usize, px: &[u16], window: [f64; 2]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "P5\n# window {:e} {:e}\n{width} {height}\n65535\n", window[0], window[1])?;
    for v in px {
        w.write_all(&v.to_be_bytes())?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `<stem>.png` and `<stem>.pgm` for a real image.
pub fn export_image(dir: &Path, stem: &str, quantity: &str, img: &Array2<f64>) -> Result<ExportRef> {
    let (px, window) = quantize(img);
    let (h, w) = img.dim();
    let png = format!("{stem}.png");
    let pgm = format!("{stem}.pgm");
    write_png16(&dir.join(&png), w, h, &px, window)?;
    write_pgm16(&dir.join(&pgm), w, h, &px, window)?;
    Ok(ExportRef { quantity: quantity.to_string(), png, pgm, window })
}

/// Sidecar of a reconstruction output directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultHeader {
    pub schema_version: u32,
    pub method: String,
    pub n: usize,
    pub dt: f64,
    /// Checksums of the input echoes.
    pub inputs: [BlockRef; 2],
    /// Complex distortion-free image.
    pub alpha: BlockRef,
    /// Complex `R2* + jω` (s⁻¹, rad/s).
    pub gamma: BlockRef,
    pub cg_iterations: usize,
    pub final_residual: f64,
    pub exports: Vec<ExportRef>,
    pub diagnostics: BTreeMap<String, Vec<f64>>,
    /// Settings used, as given to the method.
    pub config: serde_json::Value,
    pub timings: BTreeMap<String, f64>,
}

/// Reconstruction read back from disk.
#[derive(Clone, Debug)]
pub struct StoredResult {
    pub header: ResultHeader,
    pub alpha: Array2<Complex64>,
    pub maps: GammaMap,
}

pub fn write_result_arrays(dir: &Path, alpha: &Array2<Complex64>, maps: &GammaMap) -> Result<(BlockRef, BlockRef)> {
    Ok((
        write_block(dir, "alpha.bin", &encode_complex(&[alpha]))?,
        write_block(dir, "gamma.bin", &encode_complex(&[&maps.gamma()]))?,
    ))
}

pub fn write_result_header(dir: &Path, header: &ResultHeader) -> Result<()> {
    write_json(&dir.join(RESULT_FILE), header)
}

pub fn read_result(dir: &Path) -> Result<StoredResult> {
    let header: ResultHeader = read_json(&dir.join(RESULT_FILE))?;
    if header.schema_version != SCHEMA_VERSION {
        return Err(Error::Format(format!("result schema version {} is not supported", header.schema_version)));
    }
    let alpha = decode_complex(&read_block(dir, &header.alpha)?, header.n, 1)?.pop().expect("one block");
    let g = decode_complex(&read_block(dir, &header.gamma)?, header.n, 1)?.pop().expect("one block");
    let maps = GammaMap { r2star: g.mapv(|v| v.re), omega: g.mapv(|v| v.im) };
    Ok(StoredResult { header, alpha, maps })
}

pub fn write_json_file<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    write_json(path, value)
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(DirLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Usage(format!(
                "{} is locked by another run; remove {} if no run is active",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(Error::Io(e)),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

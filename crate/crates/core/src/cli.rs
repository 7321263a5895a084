//! The `simulate`, `correct` and `evaluate` commands and their configuration.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::baselines::{direct_method, iterative_method, metrics, uncorrected, DirectConfig, IterativeConfig, Metrics};
use crate::error::{Error, Result};
use crate::io::{
    export_image, read_kspace, read_result, read_truth, write_json_file, write_kspace, write_result_arrays,
    write_result_header, write_truth, BlockRef, DatasetHeader, DirLock, ResultHeader, SCHEMA_VERSION,
};
use crate::model::AcqParams;
use crate::phantom::{simulate, PhantomSpec};
use crate::recon::{correct, CorrectConfig, Method, ReconResult};

pub const THREADS_ENV: &str = "EPI_B0_THREADS";
pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_TABLE: &str = "metrics.txt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Acquisition {
    /// Second-echo delay in line times.
    pub m_delay: usize,
    /// Line time in seconds.
    pub dt: f64,
}

impl Default for Acquisition {
    fn default() -> Self {
        Acquisition { m_delay: 4, dt: 0.636e-3 }
    }
}

/// Every tunable of the three commands; missing sections take defaults.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub acquisition: Acquisition,
    pub phantom: PhantomSpec,
    pub correct: CorrectConfig,
    pub direct: DirectConfig,
    pub iterative: IterativeConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Usage(format!("cannot read config {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Usage(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}

/// Writes a simulated dual-echo dataset and its ground truth into `out`.
pub fn cmd_simulate(cfg: &RunConfig, out: &Path, seed: Option<u64>) -> Result<DatasetHeader> {
    let _lock = DirLock::acquire(out)?;
    let mut spec = cfg.phantom.clone();
    if let Some(s) = seed {
        spec.seed = s;
    }
    let a = &cfg.acquisition;
    let params = AcqParams::new(spec.n, 1, a.m_delay, a.dt)?;
    let sim = simulate(&spec, &params)?;
    let block = |f: &str| BlockRef { file: f.into(), sha256: String::new() };
    let header = DatasetHeader {
        schema_version: SCHEMA_VERSION,
        n: spec.n,
        dt: a.dt,
        m_delay: a.m_delay,
        coils: sim.coils.len(),
        endianness: "little".into(),
        echo_offsets: [0.0, a.m_delay as f64 * a.dt],
        echoes: [block("echo1.bin"), block("echo2.bin")],
        truth: Some(write_truth(out, &sim.phantom)?),
        seed: Some(spec.seed),
        noise_sigma: sim.noise_sigma,
    };
    write_kspace(out, &header, &sim.coils)
}

/// Runs one method on in-memory data.
pub fn run_method(coils: &[[Array2<Complex64>; 2]], params: &AcqParams, method: Method, cfg: &RunConfig) -> Result<ReconResult> {
    match method {
        Method::Uncorrected => uncorrected(coils, params),
        Method::Smoothness | Method::Lowrank => correct(coils, params, method, &cfg.correct),
        Method::Direct => direct_method(coils, params, &cfg.direct),
        Method::Iterative => iterative_method(coils, params, &cfg.iterative),
    }
}

fn method_config(method: Method, cfg: &RunConfig) -> serde_json::Value {
    match method {
        Method::Uncorrected => serde_json::Value::Null,
        Method::Smoothness | Method::Lowrank => serde_json::to_value(&cfg.correct).expect("serializable"),
        Method::Direct => serde_json::to_value(&cfg.direct).expect("serializable"),
        Method::Iterative => serde_json::to_value(&cfg.iterative).expect("serializable"),
    }
}

/// Corrects the dataset in `input` and writes images, maps and exports into `out`.
pub fn cmd_correct(input: &Path, method: Method, cfg: &RunConfig, out: &Path) -> Result<ResultHeader> {
    let ds = read_kspace(input)?;
    let _lock = DirLock::acquire(out)?;
    let h = &ds.header;
    let params = AcqParams::new(h.n, 1, h.m_delay, h.dt)?;
    let r = run_method(&ds.coils, &params, method, cfg)?;
    let (alpha, gamma) = write_result_arrays(out, &r.alpha, &r.maps)?;
    let exports = vec![
        export_image(out, "alpha_magnitude", "|alpha|", &r.alpha.mapv(|v| v.norm()))?,
        export_image(out, "field_hz", "field map (Hz)", &r.maps.field_hz())?,
        export_image(out, "r2star", "R2* (1/s)", &r.maps.r2star)?,
    ];
    let header = ResultHeader {
        schema_version: SCHEMA_VERSION,
        method: method.name().to_string(),
        n: h.n,
        dt: h.dt,
        inputs: h.echoes.clone(),
        alpha,
        gamma,
        cg_iterations: r.cg_iterations(),
        final_residual: r.final_residual(),
        exports,
        diagnostics: r.diagnostics.clone(),
        config: method_config(method, cfg),
        timings: r.timings.clone(),
    };
    write_result_header(out, &header)?;
    Ok(header)
}

/// Metrics of several results against one ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    /// Checksums of the echoes the results were computed from.
    pub inputs: [BlockRef; 2],
    /// One row per method, in method order.
    pub rows: Vec<Metrics>,
}

impl MetricsReport {
    /// Text table ordered by total runtime.
    pub fn table(&self) -> String {
        let total = |m: &Metrics| m.timings.get("total").copied().unwrap_or(0.0);
        let mut rows: Vec<&Metrics> = self.rows.iter().collect();
        rows.sort_by(|a, b| total(a).total_cmp(&total(b)));
        let mut s = String::new();
        writeln!(s, "{:<12} {:>12} {:>10} {:>14} {:>12} {:>9}", "method", "runtime_s", "nrmse", "omega_rmse_hz", "r2star_rmse", "cg_iters")
            .unwrap();
        for m in rows {
            writeln!(
                s,
                "{:<12} {:>12.4} {:>10.5} {:>14.4} {:>12.4} {:>9}",
                m.method,
                total(m),
                m.nrmse,
                m.omega_rmse_hz,
                m.r2star_rmse,
                m.cg_iterations
            )
            .unwrap();
        }
        s
    }

    /// The report with every timing removed, for reproducibility checks.
    pub fn without_timings(&self) -> Self {
        let mut r = self.clone();
        for m in &mut r.rows {
            m.timings.clear();
        }
        r
    }
}

/// Scores result directories against the truth stored with the dataset in `truth_dir`.
pub fn cmd_evaluate(results: &[PathBuf], truth_dir: &Path, out: &Path) -> Result<MetricsReport> {
    if results.is_empty() {
        return Err(Error::Usage("no result directories given".into()));
    }
    let truth = read_truth(truth_dir)?;
    let inputs = crate::io::read_header(truth_dir)?.echoes;
    let mut rows = Vec::with_capacity(results.len());
    for dir in results {
        let r = read_result(dir)?;
        if r.header.inputs != inputs {
            return Err(Error::Usage(format!("{} was computed from a different dataset", dir.display())));
        }
        let method: Method = r.header.method.parse()?;
        let mut m = metrics(method.name(), &r.alpha, &r.maps, &truth)?;
        m.cg_iterations = r.header.cg_iterations;
        m.timings = r.header.timings.clone();
        rows.push((method, m));
    }
    rows.sort_by_key(|(method, _)| *method);
    let report = MetricsReport { schema_version: SCHEMA_VERSION, inputs, rows: rows.into_iter().map(|(_, m)| m).collect() };
    let _lock = DirLock::acquire(out)?;
    write_json_file(&out.join(METRICS_JSON), &report)?;
    std::fs::write(out.join(METRICS_TABLE), report.table())?;
    Ok(report)
}

/// Sizes the global thread pool from `EPI_B0_THREADS` when set.
pub fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = v.trim().parse().map_err(|_| Error::Usage(format!("{THREADS_ENV}={v:?} is not a thread count")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Usage(format!("thread pool: {e}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_and_fills_defaults() {
        let cfg = RunConfig::default();
        assert_eq!(RunConfig::parse(&cfg.to_toml()).unwrap(), cfg);
        let partial = RunConfig::parse("[acquisition]\nm_delay = 8\n[correct]\nfx = 7\n").unwrap();
        assert_eq!(partial.acquisition.m_delay, 8);
        assert_eq!(partial.acquisition.dt, 0.636e-3);
        assert_eq!(partial.correct.fx, 7);
        assert_eq!(partial.iterative, IterativeConfig::default());
        assert!(matches!(RunConfig::parse("[correct]\nfx = \"wide\""), Err(Error::Usage(_))));
    }

    #[test]
    fn table_is_sorted_by_runtime() {
        let row = |m: &str, t: f64| Metrics {
            method: m.into(),
            nrmse: 0.0,
            omega_rmse_hz: 0.0,
            r2star_rmse: 0.0,
            cg_iterations: 0,
            timings: [("total".to_string(), t)].into_iter().collect(),
        };
        let b = BlockRef { file: String::new(), sha256: String::new() };
        let r = MetricsReport { schema_version: 1, inputs: [b.clone(), b], rows: vec![row("slow", 9.0), row("fast", 0.1)] };
        let t = r.table();
        assert!(t.find("fast").unwrap() < t.find("slow").unwrap());
        assert!(r.without_timings().rows.iter().all(|m| m.timings.is_empty()));
    }
}

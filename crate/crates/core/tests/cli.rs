//! End-to-end runs of the `epi-b0` binary.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ndarray::{Array2, Zip};

use epi_b0::cli::{RunConfig, METRICS_JSON, METRICS_TABLE};
use epi_b0::io::{read_header, read_result, read_truth, HEADER_FILE};
use epi_b0::phantom::SmoothMap;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_epi-b0"));
    c.env_remove("EPI_B0_THREADS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Writes `cfg` into `dir` and returns the file path.
fn write_config(dir: &Path, cfg: &RunConfig) -> PathBuf {
    let path = dir.join("params.toml");
    std::fs::write(&path, cfg.to_toml()).unwrap();
    path
}

fn small_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.phantom.n = 32;
    cfg
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

fn file(dir: &Path, name: &str) -> Vec<u8> {
    std::fs::read(dir.join(name)).unwrap()
}

fn foreground_rmse(a: &Array2<f64>, b: &Array2<f64>, fg: &Array2<bool>) -> f64 {
    let (mut e, mut n) = (0.0, 0usize);
    Zip::from(a).and(b).and(fg).for_each(|x, y, &f| {
        if f {
            e += (x - y).powi(2);
            n += 1;
        }
    });
    (e / n as f64).sqrt()
}

#[test]
fn usage_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg = write_config(tmp.path(), &small_config());
    ok(&["simulate", "--config", s(&cfg), "--out", s(&data)]);

    assert_eq!(code(&["frobnicate"]), 2);
    assert_eq!(code(&["correct", "--input", s(&data), "--method", "fastest", "--out", s(&tmp.path().join("r"))]), 2);
    assert_eq!(code(&["simulate", "--config", s(&tmp.path().join("absent.toml")), "--out", s(&data)]), 2);

    let broken = tmp.path().join("broken.toml");
    std::fs::write(&broken, "[correct]\nfx = \"wide\"\n").unwrap();
    assert_eq!(code(&["correct", "--input", s(&data), "--method", "smoothness", "--config", s(&broken), "--out", s(&tmp.path().join("r"))]), 2);

    // an occupied output directory is refused
    let locked = tmp.path().join("locked");
    std::fs::create_dir(&locked).unwrap();
    std::fs::write(locked.join(".epi-b0.lock"), "1\n").unwrap();
    assert_eq!(code(&["correct", "--input", s(&data), "--method", "uncorrected", "--out", s(&locked)]), 2);

    std::fs::remove_file(data.join("echo2.bin")).unwrap();
    let out = run(&["correct", "--input", s(&data), "--method", "smoothness", "--out", s(&tmp.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("echo2.bin"));
}

#[test]
fn corrupted_data_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let cfg = write_config(tmp.path(), &small_config());
    ok(&["simulate", "--config", s(&cfg), "--out", s(&data)]);
    let echo = data.join("echo1.bin");
    let mut bytes = std::fs::read(&echo).unwrap();
    bytes[0] ^= 1;
    std::fs::write(&echo, &bytes).unwrap();
    let r = tmp.path().join("r");
    assert_eq!(code(&["correct", "--input", s(&data), "--method", "uncorrected", "--out", s(&r)]), 3);
    bytes.truncate(bytes.len() - 8);
    std::fs::write(&echo, &bytes).unwrap();
    assert_eq!(code(&["correct", "--input", s(&data), "--method", "uncorrected", "--out", s(&r)]), 3);
}

#[test]
fn simulation_is_deterministic_and_seed_only_moves_noise() {
    let tmp = tempfile::tempdir().unwrap();
    let clean = write_config(tmp.path(), &small_config());
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    ok(&["simulate", "--config", s(&clean), "--out", s(&a)]);
    ok(&["simulate", "--config", s(&clean), "--out", s(&b)]);
    assert_eq!(files(&a), files(&b));

    let (n1, n2) = (tmp.path().join("n1"), tmp.path().join("n2"));
    ok(&["simulate", "--config", s(&clean), "--out", s(&n1), "--seed", "1", "--snr-db", "30"]);
    ok(&["simulate", "--config", s(&clean), "--out", s(&n2), "--seed", "2", "--snr-db", "30"]);
    for truth in ["truth_rho0.bin", "truth_gamma.bin", "truth_foreground.bin"] {
        assert_eq!(file(&n1, truth), file(&n2, truth), "{truth}");
        assert_eq!(file(&n1, truth), file(&a, truth), "{truth}");
    }
    for echo in ["echo1.bin", "echo2.bin"] {
        assert_ne!(file(&n1, echo), file(&n2, echo), "{echo}");
    }
    let (h1, h2) = (read_header(&n1).unwrap(), read_header(&n2).unwrap());
    assert_eq!((h1.seed, h2.seed), (Some(1), Some(2)));
    assert_eq!(h1.noise_sigma, h2.noise_sigma);
    assert!(h1.noise_sigma > 0.0);
    assert!(n1.join(HEADER_FILE).is_file());
}

#[test]
fn constant_free_decay_reduces_every_method_to_the_ifft() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = small_config();
    cfg.phantom.field_map = SmoothMap::zero();
    cfg.phantom.r2star = SmoothMap::zero();
    let params = write_config(tmp.path(), &cfg);
    let data = tmp.path().join("data");
    ok(&["simulate", "--config", s(&params), "--out", s(&data)]);
    let reference = tmp.path().join("uncorrected");
    ok(&["correct", "--input", s(&data), "--method", "uncorrected", "--config", s(&params), "--out", s(&reference)]);
    let ifft = read_result(&reference).unwrap().alpha.mapv(|v| v.norm());
    let scale = ifft.iter().fold(0.0f64, |a, &v| a.max(v));
    for method in ["smoothness", "lowrank", "direct"] {
        let out = tmp.path().join(method);
        ok(&["correct", "--input", s(&data), "--method", method, "--config", s(&params), "--out", s(&out)]);
        let r = read_result(&out).unwrap();
        let worst = Zip::from(&r.alpha).and(&ifft).fold(0.0f64, |a, x, y| a.max((x.norm() - y).abs()));
        assert!(worst <= 1e-3 * scale, "{method}: max deviation {worst:.3e} of peak {scale:.3e}");
        let field = r.maps.field_hz().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(field <= 0.5, "{method}: field map reaches {field} Hz");
    }
}

#[test]
fn proposed_paths_agree_on_the_field_map() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    ok(&["simulate", "--out", s(&data)]);
    let truth = read_truth(&data).unwrap();
    let field = |method: &str| {
        let out = tmp.path().join(method);
        ok(&["correct", "--input", s(&data), "--method", method, "--out", s(&out)]);
        read_result(&out).unwrap().maps.field_hz()
    };
    let (smooth, lowrank) = (field("smoothness"), field("lowrank"));
    let gap = foreground_rmse(&smooth, &lowrank, &truth.foreground);
    assert!(gap <= 2.0, "field maps differ by {gap:.3} Hz RMSE");
}

#[test]
fn evaluation_report_matches_schema_and_repeats() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), &small_config());
    let data = tmp.path().join("data");
    ok(&["simulate", "--config", s(&cfg), "--out", s(&data)]);
    let mut dirs = Vec::new();
    for method in ["uncorrected", "smoothness", "direct"] {
        let out = tmp.path().join(method);
        ok(&["correct", "--input", s(&data), "--method", method, "--config", s(&cfg), "--out", s(&out)]);
        dirs.push(out);
    }
    let report = |name: &str| {
        let out = tmp.path().join(name);
        let mut args = vec!["evaluate", "--truth", s(&data), "--out", s(&out)];
        args.extend(dirs.iter().map(|d| s(d)));
        ok(&args);
        assert!(out.join(METRICS_TABLE).is_file());
        serde_json::from_slice::<serde_json::Value>(&file(&out, METRICS_JSON)).unwrap()
    };
    let first = report("m1");
    let schema_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schema/metrics.schema.json");
    let schema: serde_json::Value = serde_json::from_slice(&std::fs::read(schema_path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(&first).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{errors:?}");

    let methods: Vec<&str> = first["rows"].as_array().unwrap().iter().map(|r| r["method"].as_str().unwrap()).collect();
    assert_eq!(methods, ["uncorrected", "smoothness", "direct"]);

    // everything but wall-clock times is reproducible
    let strip = |mut v: serde_json::Value| {
        for row in v["rows"].as_array_mut().unwrap() {
            row["timings"] = serde_json::Value::Null;
        }
        v
    };
    assert_eq!(strip(first), strip(report("m2")));
}

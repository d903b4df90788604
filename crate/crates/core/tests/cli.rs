use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use l2c::synth::{seeded_rng, synth_corpus, unit_codebook, SynthKind};
use l2c::tensor_io::{read_matrix, write_matrix};
use l2c::{
    apply_calibration, lcdm_pipeline, otsu_report_grid, CalibrationParams, DType, Matrix, OtsuWeighting, ProbGrid,
};
use rand::Rng;
use serde_json::Value;
use tempfile::TempDir;

fn l2c(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_l2c")).args(args).current_dir(dir).output().expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = l2c(dir, args);
    assert_eq!(out.status.code(), Some(0), "l2c {args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn json(path: impl AsRef<Path>) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn put(dir: &Path, name: &str, m: &Matrix) -> PathBuf {
    let p = dir.join(name);
    write_matrix(&p, m, DType::F64).unwrap();
    p
}

fn one_hot_logits(n: usize, k: usize, peak: f64) -> Matrix {
    let mut m = Matrix::zeros(n, k);
    for i in 0..n {
        m.row_mut(i)[(3 * i + 1) % k] = peak;
    }
    m
}

fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = seeded_rng(seed);
    Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

#[test]
fn analyze_one_hot_corpus() {
    let dir = TempDir::new().unwrap();
    put(dir.path(), "hot.l2ct", &one_hot_logits(10, 50, 1000.0));
    let report: Value = serde_json::from_str(&ok(dir.path(), &["analyze", "hot.l2ct"])).unwrap();
    let probs = &report["probability_statistics"];
    assert_eq!(probs["top1_probability"], 1.0);
    assert_eq!(probs["normalized_entropy"], 0.0);
    assert_eq!(report["tokens"], 10);
}

#[test]
fn analyze_matches_library_report() {
    let dir = TempDir::new().unwrap();
    let logits = synth_corpus(SynthKind::Sharp, 64, 2048, 9).unwrap();
    put(dir.path(), "sharp.l2ct", logits.as_matrix());
    ok(
        dir.path(),
        &["analyze", "sharp.l2ct", "--report", "out/report.json", "--profile", "out/profile.csv", "--top-n", "5"],
    );
    let probs = apply_calibration(&logits, &CalibrationParams::IDENTITY).unwrap();
    let expected = otsu_report_grid(&probs, OtsuWeighting::Count).unwrap();
    let written = std::fs::read_to_string(dir.path().join("out/report.json")).unwrap();
    assert_eq!(written.trim_end(), expected.to_json());
    let rank = expected.otsu_statistics.threshold_rank;
    assert!(rank <= 4.0, "mean threshold rank {rank}");
    let profile = std::fs::read_to_string(dir.path().join("out/profile.csv")).unwrap();
    assert_eq!(profile.lines().count(), 6);
}

#[test]
fn missing_and_malformed_inputs_exit_2() {
    let dir = TempDir::new().unwrap();
    let out = l2c(dir.path(), &["analyze", "nope.l2ct"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());

    std::fs::write(dir.path().join("junk.l2ct"), b"not a tensor file").unwrap();
    assert_eq!(l2c(dir.path(), &["analyze", "junk.l2ct"]).status.code(), Some(2));
    assert_eq!(l2c(dir.path(), &["analyze"]).status.code(), Some(2));
    assert_eq!(l2c(dir.path(), &["frobnicate"]).status.code(), Some(2));
    assert_eq!(l2c(dir.path(), &["synth", "--kind", "flat", "--n", "0", "--k", "4", "x.l2ct"]).status.code(), Some(2));
    assert_eq!(l2c(dir.path(), &["synth", "--kind", "flat", "--n", "3", "--k", "1", "x.l2ct"]).status.code(), Some(2));
}

#[test]
fn thread_variable_is_validated() {
    let dir = TempDir::new().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_l2c"))
        .args(["synth", "--kind", "flat", "--n", "2", "--k", "4", "x.l2ct"])
        .current_dir(dir.path())
        .env("L2C_THREADS", "0")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn calibrate_defaults_echo_weights() {
    let dir = TempDir::new().unwrap();
    let corpus = synth_corpus(SynthKind::Cosine, 64, 256, 4).unwrap();
    let truth = CalibrationParams::new(25.0, 0.0, 1.0, 0.0).unwrap();
    let target = l2c::corpus_stats(&[apply_calibration(&corpus, &truth).unwrap()]).unwrap();
    put(dir.path(), "cos.l2ct", corpus.as_matrix());
    std::fs::write(dir.path().join("target.json"), serde_json::to_string(&target).unwrap()).unwrap();
    let stdout = ok(dir.path(), &["calibrate", "cos.l2ct", "--target", "target.json", "--out", "params.json"]);
    assert!(stdout.starts_with("loss "), "{stdout}");

    let doc = json(dir.path().join("params.json"));
    let weights: Vec<f64> = serde_json::from_value(doc["diagnostics"]["objective_weights"].clone()).unwrap();
    assert_eq!(weights, [1.0, 0.25, 0.25, 0.35]);
    assert_eq!(doc["diagnostics"]["bracketed"], true);

    let params: CalibrationParams = serde_json::from_value(doc.clone()).unwrap();
    let achieved = l2c::corpus_stats(&[apply_calibration(&corpus, &params).unwrap()]).unwrap();
    assert!((achieved.mean_entropy - target.mean_entropy).abs() <= 0.02);

    // the written document is accepted back as a params file
    ok(dir.path(), &["analyze", "cos.l2ct", "--params", "params.json", "--report", "r.json"]);
}

#[test]
fn calibrate_uniform_corpus_is_flagged() {
    let dir = TempDir::new().unwrap();
    put(dir.path(), "uniform.l2ct", &Matrix::zeros(8, 32));
    std::fs::write(
        dir.path().join("target.json"),
        r#"{"mean_entropy": 0.5, "mean_conf": 0.5, "p95_conf": 0.8, "p95_entropy": 0.7}"#,
    )
    .unwrap();
    let out = l2c(dir.path(), &["calibrate", "uniform.l2ct", "--target", "target.json", "--out", "p.json"]);
    assert_eq!(out.status.code(), Some(3));
    assert_eq!(json(dir.path().join("p.json"))["diagnostics"]["bracketed"], false);
}

#[test]
fn calibrate_without_target_is_input_error() {
    let dir = TempDir::new().unwrap();
    put(dir.path(), "c.l2ct", &random_matrix(4, 8, 1));
    assert_eq!(l2c(dir.path(), &["calibrate", "c.l2ct", "--out", "p.json"]).status.code(), Some(2));
    std::fs::write(dir.path().join("cfg.json"), r#"{"search": {"bogus": 1}}"#).unwrap();
    let out = l2c(
        dir.path(),
        &["calibrate", "c.l2ct", "--target-corpus", "c.l2ct", "--config", "cfg.json", "--out", "p.json"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn map_outputs() {
    let dir = TempDir::new().unwrap();
    let (n, k, d) = (12, 20, 5);
    let book = unit_codebook(&mut seeded_rng(8), k, d).unwrap();
    put(dir.path(), "book.l2ct", book.as_matrix());

    // sharp limit selects codebook rows
    let hot = one_hot_logits(n, k, 1.0);
    put(dir.path(), "hot.l2ct", &hot);
    std::fs::write(dir.path().join("sharp.json"), r#"{"scale": 500, "bias": 0, "temperature": 1, "smoothing": 0}"#)
        .unwrap();
    ok(
        dir.path(),
        &[
            "map",
            "hot.l2ct",
            "--codebook",
            "book.l2ct",
            "--params",
            "sharp.json",
            "--codes-out",
            "v.l2ct",
            "--uncertainty-out",
            "u.l2ct",
        ],
    );
    let v = read_matrix(dir.path().join("v.l2ct")).unwrap();
    for i in 0..n {
        let code = book.vector((3 * i + 1) % k);
        let dist: f64 = v.row(i).iter().zip(code).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        assert!(dist < 1e-3, "row {i}: {dist}");
    }
    assert_eq!(read_matrix(dir.path().join("u.l2ct")).unwrap().cols(), 4);

    // full smoothing gives the centroid
    let logits = random_matrix(n, k, 9);
    put(dir.path(), "rand.l2ct", &logits);
    std::fs::write(dir.path().join("eps1.json"), r#"{"scale": 3, "bias": 0, "temperature": 1, "smoothing": 1}"#)
        .unwrap();
    ok(
        dir.path(),
        &[
            "map",
            "rand.l2ct",
            "--codebook",
            "book.l2ct",
            "--params",
            "eps1.json",
            "--codes-out",
            "c.l2ct",
            "--uncertainty-out",
            "cu.l2ct",
        ],
    );
    let v = read_matrix(dir.path().join("c.l2ct")).unwrap();
    let centroid: Vec<f64> = (0..d).map(|j| (0..k).map(|r| book.vector(r)[j]).sum::<f64>() / k as f64).collect();
    for i in 0..n {
        for j in 0..d {
            assert!((v.get(i, j) - centroid[j]).abs() < 1e-14);
        }
    }

    // identity params agree bitwise with the library
    ok(
        dir.path(),
        &["map", "rand.l2ct", "--codebook", "book.l2ct", "--codes-out", "lv.l2ct", "--uncertainty-out", "lu.l2ct"],
    );
    let grid = l2c::LogitGrid::new(logits).unwrap();
    let lib = lcdm_pipeline(&grid, &book, &CalibrationParams::IDENTITY).unwrap();
    assert_eq!(read_matrix(dir.path().join("lv.l2ct")).unwrap(), lib.codes);
    assert_eq!(read_matrix(dir.path().join("lu.l2ct")).unwrap(), lib.uncertainty);

    // vocabulary mismatch
    put(dir.path(), "small.l2ct", &random_matrix(3, k + 1, 2));
    let out = l2c(
        dir.path(),
        &["map", "small.l2ct", "--codebook", "book.l2ct", "--codes-out", "x.l2ct", "--uncertainty-out", "y.l2ct"],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn synth_regimes_and_determinism() {
    let dir = TempDir::new().unwrap();
    ok(dir.path(), &["synth", "--kind", "flat", "--n", "16", "--k", "16384", "--seed", "3", "a.l2ct"]);
    ok(dir.path(), &["synth", "--kind", "flat", "--n", "16", "--k", "16384", "--seed", "3", "b.l2ct"]);
    let a = std::fs::read(dir.path().join("a.l2ct")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.l2ct")).unwrap());

    let logits = l2c::LogitGrid::new(read_matrix(dir.path().join("a.l2ct")).unwrap()).unwrap();
    let probs: ProbGrid = apply_calibration(&logits, &CalibrationParams::IDENTITY).unwrap();
    let mean: f64 = probs.rows().map(l2c::normalized_entropy).sum::<f64>() / probs.tokens() as f64;
    assert!(mean > 0.99, "{mean}");

    ok(dir.path(), &["synth", "--kind", "cosine", "--n", "16", "--k", "64", "--dtype", "f32", "c.l2ct"]);
    let c = read_matrix(dir.path().join("c.l2ct")).unwrap();
    assert!(c.as_slice().iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn toy_train_and_decode() {
    let dir = TempDir::new().unwrap();
    let summary: Value = serde_json::from_str(&ok(
        dir.path(),
        &["toy-train", "--params-out", "theta.l2ct", "--trace", "trace.csv", "--dump-dataset", "data"],
    ))
    .unwrap();
    assert_eq!(summary["steps"], 2000);

    let trace = std::fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("step,loss"));
    let losses: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(losses.len(), 2000);
    let head: f64 = losses[..100].iter().sum();
    let tail: f64 = losses[1900..].iter().sum();
    assert!(tail <= 0.5 * head, "{head} -> {tail}");

    let mut mse = Vec::new();
    for steps in ["5", "30"] {
        let out = format!("z{steps}.l2ct");
        let report: Value = serde_json::from_str(&ok(
            dir.path(),
            &["toy-decode", "--params", "theta.l2ct", "--steps", steps, "--out", &out],
        ))
        .unwrap();
        let z = l2c::read_tensor(dir.path().join(&out)).unwrap();
        assert_eq!(z.shape(), &[16, 8, 8, 2]);
        let (m, zero) = (report["mse"].as_f64().unwrap(), report["zero_conditioning_mse"].as_f64().unwrap());
        assert!(m < zero, "{m} vs {zero}");
        mse.push(m);
    }

    // external dataset files give the same samples as the built-in split
    ok(
        dir.path(),
        &[
            "toy-decode",
            "--params",
            "theta.l2ct",
            "--steps",
            "5",
            "--latents",
            "data/test_latents.l2ct",
            "--codes",
            "data/test_codes.l2ct",
            "--uncertainty",
            "data/test_uncertainty.l2ct",
            "--out",
            "ext.l2ct",
        ],
    );
    assert_eq!(std::fs::read(dir.path().join("ext.l2ct")).unwrap(), std::fs::read(dir.path().join("z5.l2ct")).unwrap());
}

#[test]
fn oracle_decode_recovers_latents() {
    let dir = TempDir::new().unwrap();
    let t = l2c::Tensor::new(vec![3, 4, 6, 2], random_matrix(3, 48, 5).as_slice().to_vec()).unwrap();
    l2c::write_tensor(dir.path().join("z.l2ct"), &t, DType::F64).unwrap();
    let report: Value = serde_json::from_str(&ok(
        dir.path(),
        &["toy-decode", "--oracle", "--latents", "z.l2ct", "--steps", "1", "--out", "rec.l2ct"],
    ))
    .unwrap();
    assert!(report["mse"].as_f64().unwrap() < 1e-24);
    let rec = l2c::read_tensor(dir.path().join("rec.l2ct")).unwrap();
    assert_eq!(rec.shape(), t.shape());
    assert!(rec.data().iter().zip(t.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    assert_eq!(l2c(dir.path(), &["toy-decode", "--out", "x.l2ct"]).status.code(), Some(2));
}

#[test]
fn diverging_training_exits_1() {
    let dir = TempDir::new().unwrap();
    std::fs::write(
        dir.path().join("cfg.json"),
        r#"{"train": {"steps": 20, "step_size": 1e300, "activation": "identity"}, "data": {"train_scenes": 4, "test_scenes": 1}}"#,
    )
    .unwrap();
    let out = l2c(dir.path(), &["toy-train", "--config", "cfg.json", "--params-out", "p.l2ct"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

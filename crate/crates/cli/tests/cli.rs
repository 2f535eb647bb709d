use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ssmq_core::io::read_tensor;
use ssmq_core::quant::{CalibrationManifest, KindCalibration};
use ssmq_core::MetricsRecord;

const SMALL: &str = r#"
seed = 5

[model]
rows = 4
cols = 4
patch = 2
embed_dim = 8

[gen]
iterations = 2
batch = 2
neighborhood = 3
positives = "auto"
temperature = 0.2
similarity = "cosine"
optimizer = "normalized"
step_size = 1.0
"#;

struct Sandbox {
    dir: tempfile::TempDir,
}

impl Sandbox {
    fn new() -> Self {
        let s = Self {
            dir: tempfile::tempdir().unwrap(),
        };
        fs::write(s.path("run.toml"), SMALL).unwrap();
        s
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn ssmq(&self, args: &[&str]) -> Output {
        self.ssmq_env(args, None)
    }

    fn ssmq_env(&self, args: &[&str], seed: Option<&str>) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_ssmq"));
        cmd.current_dir(self.dir.path())
            .args(args)
            .env_remove("OURO_SEED");
        if let Some(s) = seed {
            cmd.env("OURO_SEED", s);
        }
        cmd.output().unwrap()
    }

    fn ok(&self, args: &[&str]) -> String {
        let out = self.ssmq(args);
        assert!(
            out.status.success(),
            "{args:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
        String::from_utf8(out.stdout).unwrap()
    }

    fn gen(&self, out: &str) {
        self.ok(&["gen", "--config", "run.toml", "--out", out]);
    }

    fn calib(&self, batch: &str, out: &str, extra: &[&str]) {
        let mut args = vec![
            "calib", "--config", "run.toml", "--batch", batch, "--out", out,
        ];
        args.extend_from_slice(extra);
        self.ok(&args);
    }
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn records(stdout: &str) -> Vec<MetricsRecord> {
    MetricsRecord::parse_all(stdout).unwrap()
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((
                    p.strip_prefix(dir).unwrap().display().to_string(),
                    fs::read(&p).unwrap(),
                ));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn missing_seed_is_a_validation_error() {
    let sb = Sandbox::new();
    fs::write(sb.path("noseed.toml"), "[gen]\niterations = 1\n").unwrap();
    let out = sb.ssmq(&["gen", "--config", "noseed.toml", "--out", "g"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("seed"), "{}", stderr(&out));
}

#[test]
fn unknown_keys_and_bad_overrides_are_rejected() {
    let sb = Sandbox::new();
    fs::write(sb.path("typo.toml"), "seed = 1\n[gen]\niteratons = 1\n").unwrap();
    let out = sb.ssmq(&["gen", "--config", "typo.toml", "--out", "g"]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("iteratons"));
    let out = sb.ssmq(&[
        "gen",
        "--config",
        "run.toml",
        "--set",
        "gen.neighborhood=4",
        "--out",
        "g",
    ]);
    assert_eq!(code(&out), 2);
    let out = sb.ssmq(&[
        "gen", "--config", "run.toml", "--set", "nonsense", "--out", "g",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn missing_input_is_an_io_error() {
    let sb = Sandbox::new();
    let out = sb.ssmq(&[
        "calib", "--config", "run.toml", "--batch", "nowhere", "--out", "c",
    ]);
    assert_eq!(code(&out), 4);
}

#[test]
fn zero_threads_is_rejected() {
    let sb = Sandbox::new();
    let out = sb.ssmq(&[
        "--threads",
        "0",
        "gen",
        "--config",
        "run.toml",
        "--out",
        "g",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn reruns_are_byte_identical() {
    let sb = Sandbox::new();
    for run in ["a", "b"] {
        sb.gen(&format!("{run}/gen"));
        sb.calib(&format!("{run}/gen"), &format!("{run}/cal"), &[]);
        sb.ok(&[
            "quant-eval",
            "--config",
            "run.toml",
            "--calib",
            &format!("{run}/cal"),
            "--batch",
            &format!("{run}/gen"),
            "--out",
            &format!("{run}/eval"),
        ]);
    }
    let (a, b) = (files(&sb.path("a")), files(&sb.path("b")));
    assert!(a.len() > 20);
    assert_eq!(a, b);
    for name in [
        "gen/manifest.toml",
        "gen/config.toml",
        "gen/metrics.txt",
        "cal/calibration.toml",
        "eval/logits.bin",
    ] {
        assert!(a.iter().any(|(n, _)| n == name), "{name} missing");
    }
    let gen_metrics = fs::read_to_string(sb.path("a/gen/metrics.txt")).unwrap();
    let gen = &records(&gen_metrics)[0];
    assert_eq!(gen.stage, "gen");
    assert_eq!(gen.get("iterations"), Some("2"));
}

#[test]
fn corrupt_tensor_names_the_file() {
    let sb = Sandbox::new();
    sb.gen("g");
    let path = sb.path("g/images.bin");
    let mut bytes = fs::read(&path).unwrap();
    bytes[0] ^= 0xff;
    fs::write(&path, bytes).unwrap();
    let out = sb.ssmq(&[
        "calib", "--config", "run.toml", "--batch", "g", "--out", "c",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("images.bin"), "{}", stderr(&out));
}

#[test]
fn bit_widths_must_match_the_calibration() {
    let sb = Sandbox::new();
    sb.gen("g");
    sb.calib("g", "c", &[]);
    let out = sb.ssmq(&[
        "quant-eval",
        "--config",
        "run.toml",
        "--set",
        "quant.b_a_inlier=8",
        "--calib",
        "c",
        "--batch",
        "g",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("calibration"));

    let bypass = sb.ok(&[
        "quant-eval",
        "--config",
        "run.toml",
        "--set",
        "quant.bypass=true",
        "--calib",
        "c",
        "--batch",
        "g",
    ]);
    let recs = records(&bypass);
    let agreement = recs.iter().find(|r| r.stage == "agreement").unwrap();
    assert_eq!(agreement.get_f64("agreement"), Some(1.0));
    for r in recs.iter().filter(|r| r.stage == "quant-eval") {
        assert_eq!(r.get_f64("mse"), Some(0.0));
    }
}

#[test]
fn thresholds_recompute_from_dumped_statistics() {
    let sb = Sandbox::new();
    sb.gen("g");
    sb.calib("g", "c", &[]);
    let manifest =
        CalibrationManifest::parse(&fs::read_to_string(sb.path("c/calibration.toml")).unwrap())
            .unwrap();
    assert!(!manifest.entries.is_empty());
    for e in &manifest.entries {
        let stats = read_tensor(&sb.path("c").join(&e.stats_file)).unwrap();
        let scales = read_tensor(&sb.path("c").join(&e.scales_file)).unwrap();
        let again = KindCalibration::from_stats(
            stats,
            manifest.quant.outlier_quantile,
            manifest.quant.b_a_inlier,
        )
        .unwrap();
        assert_eq!(again.theta, e.theta);
        assert_eq!(again.inlier_scales, scales.data());
    }
}

#[test]
fn attention_dump_is_causal_and_reconstructs() {
    let sb = Sandbox::new();
    let stdout = sb.ok(&[
        "attn-dump",
        "--config",
        "run.toml",
        "--out",
        "a",
        "--layer",
        "1",
    ]);
    let recs = records(&stdout);
    assert_eq!(recs.len(), 2);
    for (d, r) in recs.iter().enumerate() {
        assert!(r.get_f64("recon_max_abs").unwrap() <= 1e-10);
        let load =
            |name: &str| read_tensor(&sb.path("a").join(format!("d{d}.{name}.bin"))).unwrap();
        let (alpha, alpha_p, u, o_p) = (
            load("alpha_tilde"),
            load("alpha_p_tilde"),
            load("u"),
            load("o_p"),
        );
        let (e, m) = (alpha.shape()[0], alpha.shape()[1]);
        assert_eq!((m, e), (16, 8));
        assert_eq!(load("delta_mean").shape(), [m]);
        for ch in 0..e {
            for i in 0..m {
                for j in i + 1..m {
                    assert_eq!(
                        alpha.data()[(ch * m + i) * m + j],
                        0.0,
                        "future token {j} visible from {i}"
                    );
                }
                let recon: f64 = (0..m)
                    .map(|j| alpha_p.data()[(ch * m + i) * m + j] * u.data()[j * e + ch])
                    .sum();
                assert!((recon - o_p.data()[i * e + ch]).abs() <= 1e-10);
            }
        }
    }
}

#[test]
fn gemm_bench_reports_one_line_per_path() {
    let sb = Sandbox::new();
    let stdout = sb.ok(&[
        "gemm-bench",
        "--config",
        "run.toml",
        "--sizes",
        "16",
        "--trials",
        "1",
    ]);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[0].starts_with("16,hybrid,"));
    assert!(lines[1].starts_with("16,f64,"));
}

#[test]
fn environment_seed_is_recorded() {
    let sb = Sandbox::new();
    let out = sb.ssmq_env(&["gen", "--config", "run.toml", "--out", "g"], Some("9"));
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest: toml::Table = fs::read_to_string(sb.path("g/manifest.toml"))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(manifest["seed"].as_integer(), Some(9));
    assert_eq!(manifest["seed_source"].as_str(), Some("env"));
    assert_eq!(manifest["config"]["seed"].as_integer(), Some(9));

    sb.gen("h");
    let manifest: toml::Table = fs::read_to_string(sb.path("h/manifest.toml"))
        .unwrap()
        .parse()
        .unwrap();
    assert_eq!(manifest["seed_source"].as_str(), Some("config"));
    assert_ne!(
        fs::read(sb.path("g/images.bin")).unwrap(),
        fs::read(sb.path("h/images.bin")).unwrap()
    );

    let bad = sb.ssmq_env(&["gen", "--config", "run.toml", "--out", "x"], Some("abc"));
    assert_eq!(code(&bad), 2);
}

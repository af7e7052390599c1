//! End-to-end checks of the command-line surface: a full
//! corpus-build -> train -> eval -> infer pipeline on a micro setup, plus
//! the structured exit codes.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

const MICRO_CONFIG: &str = r#"
version = 1

[corpus]
n_per_task = 3
scene_count = 8
height = 16
width = 16
tasks = ["gaussian_noise", "hist_eq"]

[model]
channels = [4, 8, 16, 32]
blocks = [1, 1, 1, 1]
heads = [1, 2, 2, 4]
window = 2
ffn_expansion = 1.5
n_pcab = 1
prompt_channels = [4, 8, 16]

[train]
steps = 3
batch_size = 2
patch_size = 8
log_every = 1

[eval]
n_prompts = 2
n_mismatch_inputs = 2
"#;

fn promptpix(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptpix"))
        .args(args)
        .env_remove("PROMPTPIX_OUT_ROOT")
        .output()
        .expect("binary must run")
}

fn run_ok(args: &[&str]) -> String {
    let out = promptpix(args);
    assert!(
        out.status.success(),
        "command {args:?} failed\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn expect_code(args: &[&str], code: i32, needle: &str) {
    let out = promptpix(args);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert_eq!(
        out.status.code(),
        Some(code),
        "command {args:?}\nstderr: {stderr}"
    );
    assert!(
        stderr.contains(needle),
        "stderr for {args:?} should mention `{needle}`, got: {stderr}"
    );
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_owned()
}

#[test]
fn pipeline_runs_end_to_end_and_is_idempotent() {
    let t = tempdir().unwrap();
    let cfg = t.path().join("micro.toml");
    fs::write(&cfg, MICRO_CONFIG).unwrap();
    let corpus = t.path().join("corpus");
    let train = t.path().join("train");
    let evald = t.path().join("eval");

    // corpus-build prints the manifest path and rebuilds byte-identically.
    let stdout = run_ok(&["corpus-build", "--config", &s(&cfg), "--out", &s(&corpus)]);
    let manifest = Path::new(stdout.trim());
    assert!(manifest.exists(), "missing {stdout}");
    let first = fs::read(manifest).unwrap();
    run_ok(&["corpus-build", "--config", &s(&cfg), "--out", &s(&corpus)]);
    assert_eq!(fs::read(manifest).unwrap(), first, "rebuild must be byte-identical");
    assert!(corpus.join("run-config.toml").exists());

    // --seed overrides the corpus seed recorded in the manifest.
    let seeded = t.path().join("corpus-seeded");
    run_ok(&[
        "corpus-build",
        "--config",
        &s(&cfg),
        "--seed",
        "99",
        "--out",
        &s(&seeded),
    ]);
    let header_line = fs::read_to_string(seeded.join("manifest.jsonl")).unwrap();
    let header: serde_json::Value =
        serde_json::from_str(header_line.lines().next().unwrap()).unwrap();
    assert_eq!(header["global_seed"], 99);

    // train prints the final checkpoint and writes its log and config.
    let stdout = run_ok(&[
        "train",
        "--config",
        &s(&cfg),
        "--corpus",
        &s(&corpus),
        "--out",
        &s(&train),
    ]);
    let ckpt = stdout.trim().to_owned();
    assert!(Path::new(&ckpt).exists(), "missing {ckpt}");
    assert!(train.join("train-log.jsonl").exists());
    assert!(train.join("run-config.toml").exists());

    // Every protocol writes a JSON report plus a CSV table.
    for proto in ["tasks", "sensitivity", "mismatch", "cross-domain"] {
        let stdout = run_ok(&[
            "eval",
            "--config",
            &s(&cfg),
            "--checkpoint",
            &ckpt,
            "--corpus",
            &s(&corpus),
            "--protocol",
            proto,
            "--out",
            &s(&evald),
        ]);
        let json_path = stdout.trim().to_owned();
        assert!(Path::new(&json_path).exists(), "missing {json_path}");
        assert!(Path::new(&json_path.replace(".json", ".csv")).exists());
    }

    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(evald.join("report-sensitivity.json")).unwrap())
            .unwrap();
    assert_eq!(report["meta"]["protocol"], "sensitivity");
    assert_eq!(report["meta"]["psnr_cap_db"], 100.0);
    // 2 tasks x 2 prompt draws, and each task summary carries a spread.
    assert_eq!(report["rows"].as_array().unwrap().len(), 4);
    for summary in report["summary"].as_array().unwrap() {
        assert_eq!(summary["n_prompt_draws"], 2);
        assert!(summary["std"].is_number(), "got: {summary}");
    }

    let report: serde_json::Value = serde_json::from_str(
        &fs::read_to_string(evald.join("report-cross_domain.json")).unwrap(),
    )
    .unwrap();
    // One row per case: 2 tasks x 3 samples.
    assert_eq!(report["rows"].as_array().unwrap().len(), 6);
    let acc = report["scalars"]["steering_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc), "got: {acc}");
    assert!(report["scalars"]["random_label_floor"].as_f64().unwrap() > 0.0);

    // infer writes output.png and reports PSNR against the reference.
    let images = corpus.join("images").join("gaussian_noise");
    let stdout = run_ok(&[
        "infer",
        "--checkpoint",
        &ckpt,
        "--input",
        &s(&images.join("00000.input.png")),
        "--prompt-src",
        &s(&images.join("00000.prompt_src.png")),
        "--prompt-tgt",
        &s(&images.join("00000.prompt_tgt.png")),
        "--reference",
        &s(&images.join("00000.target.png")),
        "--out",
        &s(&t.path().join("infer")),
    ]);
    assert!(stdout.contains("dB"), "got: {stdout}");
    assert!(t.path().join("infer").join("output.png").exists());

    // cost prints both accounting rows.
    let stdout = run_ok(&["cost", "--profile", "paper"]);
    assert!(stdout.contains("main network"), "got: {stdout}");
    assert!(stdout.contains("prompt+fusion"), "got: {stdout}");
}

#[test]
fn failures_map_to_structured_exit_codes() {
    let t = tempdir().unwrap();
    let cfg = t.path().join("micro.toml");
    fs::write(&cfg, MICRO_CONFIG).unwrap();
    let corpus = t.path().join("corpus");
    run_ok(&["corpus-build", "--config", &s(&cfg), "--out", &s(&corpus)]);

    // Configuration problems: no config source, unknown keys, bad profile.
    expect_code(&["corpus-build"], 2, "no configuration");
    let bad = t.path().join("bad.toml");
    fs::write(&bad, "version = 1\nbogus = 3\n").unwrap();
    expect_code(
        &["corpus-build", "--config", &s(&bad), "--out", &s(&t.path().join("x"))],
        2,
        "bogus",
    );
    expect_code(&["cost", "--profile", "huge"], 2, "huge");

    // I/O problems: missing checkpoint file.
    expect_code(
        &[
            "eval",
            "--config",
            &s(&cfg),
            "--checkpoint",
            &s(&t.path().join("missing.ckpt")),
            "--corpus",
            &s(&corpus),
            "--out",
            &s(&t.path().join("e")),
        ],
        3,
        "missing.ckpt",
    );

    // Contamination: evaluating on the training corpus itself.
    let train = t.path().join("train");
    let ckpt = run_ok(&[
        "train",
        "--config",
        &s(&cfg),
        "--corpus",
        &s(&corpus),
        "--out",
        &s(&train),
    ])
    .trim()
    .to_owned();
    expect_code(
        &[
            "eval",
            "--config",
            &s(&cfg),
            "--checkpoint",
            &ckpt,
            "--corpus",
            &s(&corpus),
            "--train-corpus",
            &s(&corpus),
            "--out",
            &s(&t.path().join("e2")),
        ],
        2,
        "contaminated",
    );

    // The output-root environment variable steers default locations.
    let envroot = t.path().join("envroot");
    let out = Command::new(env!("CARGO_BIN_EXE_promptpix"))
        .args(["corpus-build", "--config", &s(&cfg)])
        .env("PROMPTPIX_OUT_ROOT", &envroot)
        .output()
        .expect("binary must run");
    assert!(out.status.success());
    assert!(envroot.join("corpus").join("manifest.jsonl").exists());
}

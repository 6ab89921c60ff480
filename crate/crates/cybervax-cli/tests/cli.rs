//! End-to-end command tests at toy scale: every subcommand runs
//! in-process through `cybervax_cli::run`, exactly as the binary would.

use std::path::{Path, PathBuf};
use std::sync::OnceLock;

use cybervax_core::data::{generate_synthetic_faces, save_png};
use cybervax_core::models::{ImmuneConfig, UNetConfig, ValidatorConfig};
use cybervax_core::training::TrainLog;

fn run(args: &[&str]) -> i32 {
    let mut argv = vec!["cybervax"];
    argv.extend_from_slice(args);
    cybervax_cli::run(argv)
}

fn write_toy_config(path: &Path) {
    let model = ImmuneConfig::toy();
    let baseline = UNetConfig::toy();
    let doc = serde_json::json!({
        "resolution": 16,
        "model": model,
        "validator": ValidatorConfig::mlp(16),
        "baseline": baseline,
        "faceswap": {
            "resolution": 16,
            "base_width": 8,
            "steps": 4,
            "batch_size": 2,
            "min_frames": 2,
            "identity_a": "A",
            "identity_b": "B"
        },
        "train": {"steps": 6, "batch_size": 2, "checkpoint_every": 3},
        "eval": {"samples": 3, "sweep_points": 2, "sweep_samples": 2, "embedding_dim": 16}
    });
    std::fs::write(path, serde_json::to_vec_pretty(&doc).unwrap()).unwrap();
}

/// One trained toy system + validator + a few input images, built once
/// and shared by every test in this binary.
struct Fixture {
    _dir: tempfile::TempDir,
    config: PathBuf,
    immune: PathBuf,
    validator: PathBuf,
    inputs: PathBuf,
}

static FIXTURE: OnceLock<Fixture> = OnceLock::new();

fn fixture() -> &'static Fixture {
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let config = dir.path().join("toy.json");
        write_toy_config(&config);

        let train_out = dir.path().join("train");
        let code = run(&[
            "train",
            "--config",
            config.to_str().unwrap(),
            "--synthetic",
            "12",
            "--out",
            train_out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "fixture training failed");
        let immune = train_out.join("immune.ckpt");

        let val_out = dir.path().join("validator");
        let code = run(&[
            "train-validator",
            "--config",
            config.to_str().unwrap(),
            "--checkpoint",
            immune.to_str().unwrap(),
            "--synthetic",
            "12",
            "--out",
            val_out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0, "fixture validator training failed");
        let validator = val_out.join("validator.ckpt");

        let inputs = dir.path().join("inputs");
        std::fs::create_dir_all(&inputs).unwrap();
        let faces = generate_synthetic_faces(3, 16, 99).unwrap();
        for i in 0..faces.len() {
            let img = faces.image(i).unwrap();
            save_png(&img, &inputs.join(format!("face-{i}.png"))).unwrap();
        }

        Fixture { _dir: dir, config, immune, validator, inputs }
    })
}

#[test]
fn train_writes_checkpoints_log_and_effective_config() {
    let fx = fixture();
    let train_out = fx.immune.parent().unwrap();
    assert!(fx.immune.is_file());
    assert!(train_out.join("trainlog.json").is_file());
    assert!(train_out.join("trainlog.csv").is_file());
    assert!(train_out.join("effective-config.json").is_file());
    // Cadence checkpoints at steps 3 and 6.
    assert!(train_out.join("step-000003.ckpt").is_file());
    assert!(train_out.join("step-000006.ckpt").is_file());

    let log = TrainLog::load(&train_out.join("trainlog.json")).unwrap();
    assert_eq!(log.entries.len(), 6);
    assert_eq!(log.entries.last().unwrap().step, 6);

    let text = std::fs::read_to_string(train_out.join("effective-config.json")).unwrap();
    let cfg: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert_eq!(cfg["resolution"], 16);
    assert_eq!(cfg["train"]["steps"], 6);
}

#[test]
fn train_runs_are_deterministic() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let mut logs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let code = run(&[
            "train",
            "--config",
            fx.config.to_str().unwrap(),
            "--synthetic",
            "10",
            "--steps",
            "4",
            "--seed",
            "5",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, 0);
        logs.push(TrainLog::load(&out.join("trainlog.json")).unwrap());
    }
    assert!(logs[0].canonical_eq(&logs[1]), "identical seeds must give identical logs");
}

#[test]
fn resume_continues_the_step_counter() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let first = dir.path().join("first");
    assert_eq!(
        run(&[
            "train",
            "--config",
            fx.config.to_str().unwrap(),
            "--synthetic",
            "10",
            "--steps",
            "3",
            "--out",
            first.to_str().unwrap(),
        ]),
        0
    );

    let second = dir.path().join("second");
    assert_eq!(
        run(&[
            "train",
            "--config",
            fx.config.to_str().unwrap(),
            "--synthetic",
            "10",
            "--steps",
            "6",
            "--resume",
            first.join("immune.ckpt").to_str().unwrap(),
            "--out",
            second.to_str().unwrap(),
        ]),
        0
    );
    let log = TrainLog::load(&second.join("trainlog.json")).unwrap();
    let steps: Vec<u64> = log.entries.iter().map(|e| e.step).collect();
    assert_eq!(steps, vec![4, 5, 6], "resume must continue monotonically");
}

#[test]
fn invalid_loss_weight_is_a_config_error_without_partial_output() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.json");
    std::fs::write(
        &config,
        r#"{"resolution": 16, "train": {"weights": {"imp": -1.0, "rev": 1.0, "val": 1.0}}}"#,
    )
    .unwrap();
    let out = dir.path().join("out");
    let code = run(&[
        "train",
        "--config",
        config.to_str().unwrap(),
        "--synthetic",
        "8",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
    assert!(!out.join("immune.ckpt").exists(), "no partial checkpoint on config error");
}

#[test]
fn missing_checkpoint_exits_4_and_missing_input_exits_3() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        run(&[
            "vaccinate",
            "--checkpoint",
            dir.path().join("nope.ckpt").to_str().unwrap(),
            "--input",
            fx.inputs.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]),
        4
    );
    assert_eq!(
        run(&[
            "vaccinate",
            "--checkpoint",
            fx.immune.to_str().unwrap(),
            "--input",
            dir.path().join("no-images").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]),
        3
    );
}

#[test]
fn vaccinate_neutralise_validate_round_trip() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();

    // Directory in → order-preserving directory out.
    let vacc = dir.path().join("vacc");
    assert_eq!(
        run(&[
            "vaccinate",
            "--checkpoint",
            fx.immune.to_str().unwrap(),
            "--input",
            fx.inputs.to_str().unwrap(),
            "--out",
            vacc.to_str().unwrap(),
        ]),
        0
    );
    for i in 0..3 {
        assert!(vacc.join(format!("face-{i}.png")).is_file());
        assert!(vacc.join(format!("face-{i}.json")).is_file());
    }
    let report = std::fs::read_to_string(vacc.join("report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 4, "header plus one row per input");
    assert!(lines[1].contains("face-0"));
    assert!(lines[3].contains("face-2"));

    // Single image in → single image out plus sidecar.
    let single = dir.path().join("single");
    assert_eq!(
        run(&[
            "vaccinate",
            "--checkpoint",
            fx.immune.to_str().unwrap(),
            "--input",
            fx.inputs.join("face-1.png").to_str().unwrap(),
            "--out",
            single.to_str().unwrap(),
        ]),
        0
    );
    assert!(single.join("face-1.png").is_file());
    assert!(single.join("face-1.json").is_file());
    assert_eq!(
        std::fs::read_dir(&single)
            .unwrap()
            .filter(|e| {
                e.as_ref().unwrap().path().extension().and_then(|x| x.to_str()) == Some("png")
            })
            .count(),
        1
    );

    // Neutralise the vaccinated set with verdicts attached.
    let neut = dir.path().join("neut");
    assert_eq!(
        run(&[
            "neutralise",
            "--checkpoint",
            fx.immune.to_str().unwrap(),
            "--validator",
            fx.validator.to_str().unwrap(),
            "--input",
            vacc.to_str().unwrap(),
            "--out",
            neut.to_str().unwrap(),
        ]),
        0
    );
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(neut.join("face-0.json")).unwrap()).unwrap();
    assert_eq!(sidecar["command"], "neutralise");
    assert!(sidecar["verdict"]["probability"].is_number());

    // Validate the neutralised outputs.
    let verdicts = dir.path().join("verdicts");
    assert_eq!(
        run(&[
            "validate",
            "--validator",
            fx.validator.to_str().unwrap(),
            "--input",
            neut.to_str().unwrap(),
            "--out",
            verdicts.to_str().unwrap(),
        ]),
        0
    );
    let csv = std::fs::read_to_string(verdicts.join("verdicts.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4, "header plus three neutralised frames");
}

#[test]
fn corrupt_input_fails_that_file_only_and_exits_5() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let inputs = dir.path().join("inputs");
    std::fs::create_dir_all(&inputs).unwrap();
    for i in 0..2 {
        std::fs::copy(
            fx.inputs.join(format!("face-{i}.png")),
            inputs.join(format!("face-{i}.png")),
        )
        .unwrap();
    }
    std::fs::write(inputs.join("broken.png"), b"this is not a png").unwrap();

    let out = dir.path().join("out");
    let code = run(&[
        "vaccinate",
        "--checkpoint",
        fx.immune.to_str().unwrap(),
        "--input",
        inputs.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 5, "partial batch failure");
    // The healthy files still got processed…
    assert!(out.join("face-0.png").is_file());
    assert!(out.join("face-1.png").is_file());
    // …and the broken one is recorded with an error.
    assert!(!out.join("broken.png").exists());
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("broken.json")).unwrap()).unwrap();
    assert!(sidecar["error"].is_string());
    let report = std::fs::read_to_string(out.join("report.csv")).unwrap();
    assert_eq!(report.lines().count(), 4, "every input appears in the report");
}

#[test]
fn attack_writes_one_triptych_per_input() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let vacc = dir.path().join("vacc");
    assert_eq!(
        run(&[
            "vaccinate",
            "--checkpoint",
            fx.immune.to_str().unwrap(),
            "--input",
            fx.inputs.to_str().unwrap(),
            "--out",
            vacc.to_str().unwrap(),
        ]),
        0
    );

    let atk = dir.path().join("atk");
    assert_eq!(
        run(&[
            "attack",
            "--checkpoint",
            fx.immune.to_str().unwrap(),
            "--validator",
            fx.validator.to_str().unwrap(),
            "--input",
            vacc.to_str().unwrap(),
            "--out",
            atk.to_str().unwrap(),
        ]),
        0
    );
    let triptychs = std::fs::read_dir(&atk)
        .unwrap()
        .filter(|e| {
            e.as_ref()
                .unwrap()
                .file_name()
                .to_str()
                .map(|n| n.starts_with("triptych-") && n.ends_with(".png"))
                .unwrap_or(false)
        })
        .count();
    assert_eq!(triptychs, 3, "triptych count equals input count");

    // A triptych is three panels side by side with two separators.
    let strip = cybervax_core::data::load_image(&atk.join("triptych-face-0.png"), None).unwrap();
    assert_eq!(strip.height(), 16);
    assert_eq!(strip.width(), 16 * 3 + 2 * 2);
}

#[test]
fn faceswap_training_and_attack_mode() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();

    let swap_out = dir.path().join("swap");
    assert_eq!(
        run(&[
            "train-faceswap",
            "--config",
            fx.config.to_str().unwrap(),
            "--synthetic",
            "4",
            "--out",
            swap_out.to_str().unwrap(),
        ]),
        0
    );
    let ckpt = swap_out.join("faceswap.ckpt");
    assert!(ckpt.is_file());
    assert!(swap_out.join("faceswap-losses.json").is_file());

    // Missing the swap checkpoint while asking for the swap mode is a
    // usage error, not a crash.
    let atk = dir.path().join("atk");
    assert_eq!(
        run(&[
            "attack",
            "--checkpoint",
            fx.immune.to_str().unwrap(),
            "--mode",
            "faceswap",
            "--input",
            fx.inputs.to_str().unwrap(),
            "--out",
            atk.to_str().unwrap(),
        ]),
        2
    );

    assert_eq!(
        run(&[
            "attack",
            "--checkpoint",
            fx.immune.to_str().unwrap(),
            "--mode",
            "faceswap",
            "--faceswap",
            ckpt.to_str().unwrap(),
            "--input",
            fx.inputs.to_str().unwrap(),
            "--out",
            atk.to_str().unwrap(),
        ]),
        0
    );
    assert!(atk.join("triptych-face-0.png").is_file());
    let sidecar: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(atk.join("face-0.json")).unwrap()).unwrap();
    assert_eq!(sidecar["command"], "attack-faceswap");
}

#[test]
fn train_baseline_writes_checkpoint() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("baseline");
    assert_eq!(
        run(&[
            "train-baseline",
            "--config",
            fx.config.to_str().unwrap(),
            "--synthetic",
            "10",
            "--steps",
            "3",
            "--out",
            out.to_str().unwrap(),
        ]),
        0
    );
    assert!(out.join("baseline.ckpt").is_file());
    assert!(out.join("trainlog-baseline.json").is_file());
}

#[test]
fn evaluate_emits_reports_plots_and_is_byte_deterministic() {
    let fx = fixture();
    let dir = tempfile::tempdir().unwrap();

    let mut outs = Vec::new();
    for name in ["e1", "e2"] {
        let out = dir.path().join(name);
        assert_eq!(
            run(&[
                "evaluate",
                "--config",
                fx.config.to_str().unwrap(),
                "--checkpoint",
                fx.immune.to_str().unwrap(),
                "--validator",
                fx.validator.to_str().unwrap(),
                "--synthetic",
                "30",
                "--out",
                out.to_str().unwrap(),
            ]),
            0
        );
        outs.push(out);
    }
    let out = &outs[0];

    // 3 held-out samples × 6 conditions × 2 arms, one row each.
    let matrix = std::fs::read_to_string(out.join("matrix.csv")).unwrap();
    assert_eq!(matrix.lines().count(), 1 + 3 * 6 * 2);
    for cond in ["none", "blur", "brightness", "contrast", "hue", "hybrid"] {
        assert!(matrix.contains(cond), "missing condition {cond}");
    }

    assert!(out.join("summary.csv").is_file());
    assert!(out.join("classification.json").is_file());
    assert!(out.join("validator-eval.json").is_file());
    assert!(out.join("ssim-distribution.png").is_file());
    assert!(out.join("psnr-distribution.png").is_file());
    assert!(out.join("validator-bars.png").is_file());
    for kind in ["blur", "brightness", "contrast", "hue"] {
        assert!(out.join(format!("sweep-{kind}.png")).is_file(), "missing sweep for {kind}");
    }

    // Reruns with the same config, seed and checkpoints are
    // byte-identical, plots included.
    for file in [
        "matrix.csv",
        "summary.csv",
        "sweeps.csv",
        "classification.json",
        "effective-config.json",
        "ssim-distribution.png",
        "sweep-blur.png",
    ] {
        let a = std::fs::read(outs[0].join(file)).unwrap();
        let b = std::fs::read(outs[1].join(file)).unwrap();
        assert_eq!(a, b, "{file} differs between reruns");
    }
}

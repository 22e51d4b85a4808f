//! End-to-end exercise of the binary: one small synthetic corpus driven
//! through every subcommand, checking artifacts land where documented.

use std::path::Path;
use std::process::Command;

fn clef(dir: &Path, args: &[&str]) -> (bool, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_clef"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap();
    let text = format!(
        "{}{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    (out.status.success(), text)
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let (success, text) = clef(dir, args);
    assert!(success, "clef {args:?} failed:\n{text}");
    text
}

#[test]
fn full_cli_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    ok(
        dir,
        &["synth", "--output", "data", "--clips", "48", "--systems", "6", "--seconds", "1"],
    );
    std::fs::write(
        dir.join("cfg.json"),
        r#"{
            "manifest": "data/manifest.csv",
            "encoder": "toy",
            "mode": "a1",
            "target_seconds": 1.0,
            "folds": {"n_folds": 3, "val_fraction": 0.15, "seed": 17},
            "sweep": {"modes": ["a1", "a2"], "sizes": [16, null], "fold": 0}
        }"#,
    )
    .unwrap();

    ok(dir, &["extract", "--config", "cfg.json"]);
    ok(dir, &["train", "--config", "cfg.json"]);
    ok(dir, &["evaluate", "--config", "cfg.json"]);
    ok(dir, &["train", "--config", "cfg.json", "--mode", "a2"]);
    ok(dir, &["evaluate", "--config", "cfg.json", "--mode", "a2"]);
    ok(dir, &["ablate", "--config", "cfg.json"]);
    ok(dir, &["degrade", "--config", "cfg.json"]);
    ok(dir, &["sweep", "--config", "cfg.json"]);
    let report = ok(dir, &["report", "--config", "cfg.json"]);
    assert!(report.contains("a1, a2"), "{report}");

    // Artifact layout under runs/<hash>/.
    let runs = dir.join("runs");
    let hash_dir = std::fs::read_dir(&runs)
        .unwrap()
        .next()
        .unwrap()
        .unwrap()
        .path();
    for rel in [
        "folds/fold_0.json",
        "a1/fold0/checkpoint.clef",
        "a1/fold0/train_log.json",
        "a1/report.json",
        "a1/utterance.csv",
        "a1/system.csv",
        "a1/predictions.csv",
        "a1/concordance.json",
        "a2/report.json",
        "ablation.json",
        "ablation.csv",
        "sweep.json",
        "summary.json",
    ] {
        assert!(hash_dir.join(rel).is_file(), "missing {rel}");
    }
    assert!(hash_dir.join("a1/degraded/noise/severe").is_dir());

    // Rerun without --force skips completed work and stays green.
    ok(dir, &["train", "--config", "cfg.json"]);
    ok(dir, &["evaluate", "--config", "cfg.json"]);

    // score: succeeds on good audio, nonzero on a bad path, keeps going.
    let ckpt = hash_dir.join("a1/fold0/checkpoint.clef");
    let text = ok(
        dir,
        &[
            "score",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--seconds",
            "1",
            "data/audio/clip_0000.wav",
        ],
    );
    assert!(text.contains("mi="), "{text}");
    let (success, text) = clef(
        dir,
        &[
            "score",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--seconds",
            "1",
            "data/audio/clip_0000.wav",
            "data/audio/no_such_clip.wav",
        ],
    );
    assert!(!success, "missing file must fail the batch");
    assert!(text.contains("mi="), "good file still scored:\n{text}");

    // Unknown mode is rejected up front.
    let (success, text) = clef(dir, &["train", "--config", "cfg.json", "--mode", "a9"]);
    assert!(!success && text.contains("a9"), "{text}");
}

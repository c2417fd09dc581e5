//! End-to-end runs of the `avss` binary on a synthetic fixture dataset.

use std::path::Path;
use std::process::{Command, Output};

use avss::dsp::{read_wav, wav_info, write_wav, WavEncoding, Waveform, SAMPLE_RATE};

fn avss(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_avss")).args(args).env("AVSS_THREADS", "1").output().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn fixtures(dir: &Path) -> std::path::PathBuf {
    let data = dir.join("data");
    let o = avss(&["dataset", "fixtures", "--out", s(&data), "--seed", "2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    data.join("manifest.jsonl")
}

#[test]
fn usage_errors_exit_two_with_one_line() {
    for args in [
        vec!["train", "--manifest", "m", "--out", "o", "--blocks", "5"],
        vec!["train", "--manifest", "m", "--out", "o", "--visual", "frames"],
        vec!["mix", "--manifest", "m", "--out", "o", "--remix-pct", "1.5"],
        vec!["evaluate", "--model", "m", "--manifest", "m", "--setup", "two", "--report", "r", "--alphas", "1,-1"],
        vec!["bogus"],
    ] {
        let o = avss(&args);
        assert_eq!(o.status.code(), Some(2), "{args:?}: {}", stderr(&o));
    }
    let o = avss(&["train", "--manifest", "m", "--out", "o", "--visual", "rgb"]);
    assert!(stderr(&o).contains("video-frame visual networks are not supported"));
}

#[test]
fn missing_inputs_fail_with_kind_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let o = avss(&["dataset", "validate", "--manifest", s(&dir.path().join("absent.jsonl"))]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.starts_with("error: "), "{err}");
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn fixtures_validate_and_mix() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixtures(dir.path());
    let o = avss(&["dataset", "validate", "--manifest", s(&manifest)]);
    assert!(o.status.success(), "{}", stderr(&o));

    let out = dir.path().join("mix");
    let o = avss(&["mix", "--manifest", s(&manifest), "--remix-pct", "1", "--out", s(&out), "--count", "3", "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let specs = std::fs::read_to_string(out.join("mixtures.jsonl")).unwrap();
    assert_eq!(specs.lines().count(), 3);
    for i in 0..3 {
        let mix = read_wav(&out.join(format!("mix_{i:04}.wav"))).unwrap();
        let target = read_wav(&out.join(format!("target_{i:04}.wav"))).unwrap();
        assert_eq!(mix.sample_rate, SAMPLE_RATE);
        assert_eq!(mix.len(), target.len());
        assert!(out.join(format!("target_{i:04}.almk")).is_file());
    }
    assert!(out.join(avss::cli::RESOLVED_CONFIG).is_file());
}

#[test]
fn train_separate_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = fixtures(dir.path());
    let run = dir.path().join("run");
    let config = dir.path().join("train.toml");
    std::fs::write(&config, "blocks = 4\nbase_channels = 2\nbatch_size = 2\nlearning_rate = 0.01\n").unwrap();
    let o = avss(&[
        "train", "--manifest", s(&manifest), "--out", s(&run), "--config", s(&config),
        "--max-steps", "4", "--lr", "0.001", "--visual", "none",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let resolved: serde_json::Value =
        serde_json::from_slice(&std::fs::read(run.join(avss::cli::RESOLVED_CONFIG)).unwrap()).unwrap();
    assert_eq!(resolved["train"]["learning_rate"], 0.001);
    assert_eq!(resolved["train"]["batch_size"], 2);
    let ckpt = run.join("best.ckpt");
    assert!(ckpt.is_file());

    // Off-rate input of arbitrary length comes back at its own rate and length.
    let input = dir.path().join("in.wav");
    let samples: Vec<f64> = (0..30000).map(|i| 0.3 * (i as f64 * 0.05).sin()).collect();
    write_wav(&input, &Waveform::new(samples, 22050).unwrap(), WavEncoding::Pcm16).unwrap();
    let sep = dir.path().join("sep.wav");
    let o = avss(&["separate", "--model", s(&ckpt), "--audio", s(&input), "--out", s(&sep)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (frames, rate) = wav_info(&sep).unwrap();
    assert_eq!((frames, rate), (30000, 22050));

    let report = dir.path().join("report.csv");
    let o = avss(&[
        "evaluate", "--model", s(&ckpt), "--manifest", s(&manifest), "--setup", "one",
        "--alphas", "1", "--split", "test-seen-heard", "--report", s(&report),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(&report).unwrap();
    assert!(csv.lines().count() >= 2, "{csv}");
}

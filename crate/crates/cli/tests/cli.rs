use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

const TINY: &str = r#"{
  "data": {"videos": 3, "frames": 3, "size": 8},
  "model": {"hidden": 6, "head_dim": 4, "ae_hidden": 4},
  "training": {"autoencoder": {"steps": 5}, "denoiser": {"steps": 5, "eval_samples": 4}, "deflicker": {"steps": 3}},
  "temporal": {"hidden": 4},
  "sampler": {"steps": 10}
}"#;

fn sav(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sav"))
        .current_dir(dir)
        .env("SAV_THREADS", "1")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok_json(dir: &Path, args: &[&str]) -> Value {
    let out = sav(dir, args);
    assert!(
        out.status.success(),
        "{args:?}: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).expect("JSON summary")
}

fn trained(dir: &Path) {
    std::fs::write(dir.join("tiny.json"), TINY).unwrap();
    for cmd in ["gen-data", "train-ae", "train", "train-deflicker"] {
        let v = ok_json(dir, &["--config", "tiny.json", cmd]);
        assert_eq!(v["command"], cmd);
    }
}

#[test]
fn demo_pipeline_produces_the_metric_triad() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    let base = ["--config", "tiny.json", "stylize", "--input", "data/content_000.savt", "--style", "stripes"];
    let a = ok_json(dir, &[&base[..], &["--out", "a.savt"]].concat());
    let b = ok_json(dir, &[&base[..], &["--out", "b.savt"]].concat());
    assert_eq!(a["crc32"], b["crc32"]);
    assert_eq!(std::fs::read(dir.join("a.savt")).unwrap(), std::fs::read(dir.join("b.savt")).unwrap());

    let eval = ok_json(
        dir,
        &["--config", "tiny.json", "eval", "--input", "data/content_000.savt", "--output", "a.savt", "--style", "stripes"],
    );
    for key in ["temporal_consistency", "prompt_consistency", "frame_accuracy"] {
        let v = eval["metrics"][key].as_f64().unwrap();
        assert!((-1.0..=1.0).contains(&v), "{key} = {v}");
    }
    let csv = sav(
        dir,
        &["--config", "tiny.json", "eval", "--input", "data/content_000.savt", "--output", "a.savt", "--format", "csv"],
    );
    let text = String::from_utf8(csv.stdout).unwrap();
    assert_eq!(text.lines().next(), Some("temporal_consistency,prompt_consistency,frame_accuracy"));
    assert_eq!(text.lines().count(), 2);
}

#[test]
fn dumps_and_previews_are_written() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    let v = ok_json(
        dir,
        &[
            "--config", "tiny.json", "stylize", "--input", "data/content_001.savt", "--out", "o.savt",
            "--dump-latents", "lat", "--dump-masks", "masks", "--pgm", "pgm", "--no-deflicker",
        ],
    );
    assert_eq!(v["deflicker"], false);
    let steps = v["start_step"].as_u64().unwrap() as usize;
    let masks = sav_core::io::load_tensor(&dir.join("masks/frame_000.savt")).unwrap();
    assert_eq!(masks.shape(), &[steps, 1, 4, 4]);
    let lat = sav_core::io::load_tensor(&dir.join("lat/frame_002.savt")).unwrap();
    assert_eq!(lat.shape()[0], steps + 1);
    assert_eq!(std::fs::read_dir(dir.join("pgm")).unwrap().count(), 3);

    let d = ok_json(
        dir,
        &["--config", "tiny.json", "deflicker", "--input", "o.savt", "--out", "d.savt", "--reference", "data/content_001.savt"],
    );
    assert!(d["flicker_after"].as_f64().is_some());
}

#[test]
fn inspect_schedule_prints_one_row_per_step() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sav(tmp.path(), &["inspect-schedule", "--steps", "30"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 30);
    assert!(rows[0].starts_with("1,"));
    assert!(rows[29].starts_with("30,"));
}

#[test]
fn exit_codes_follow_the_error_class() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    std::fs::write(dir.join("bad.json"), r#"{"sampler": {"bogus": 1}}"#).unwrap();
    assert_eq!(sav(dir, &["--config", "bad.json", "inspect-schedule"]).status.code(), Some(3));
    assert_eq!(sav(dir, &["--config", "missing.json", "inspect-schedule"]).status.code(), Some(3));
    assert_eq!(sav(dir, &["inspect-schedule", "--beta-end", "2.0"]).status.code(), Some(3));
    assert_eq!(sav(dir, &["stylize", "--unknown-flag"]).status.code(), Some(3));

    let missing = sav(dir, &["stylize", "--input", "nope.savt", "--out", "x.savt"]);
    assert_eq!(missing.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.savt"));

    std::fs::write(dir.join("garbage.savt"), b"not a container").unwrap();
    assert_eq!(sav(dir, &["stylize", "--input", "garbage.savt", "--out", "x.savt"]).status.code(), Some(1));

    let help = sav(dir, &["--help"]);
    assert_eq!(help.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&help.stdout).contains("\"noising_strength\": 0.8"));
}

#[test]
fn non_finite_weights_are_malformed_input() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    trained(dir);
    let path = dir.join("models/denoiser.savt");
    let mut bytes = std::fs::read(&path).unwrap();
    // First payload float of the first container: rank-4 header is 4 + 2 + 2 + 16 bytes.
    bytes[24..28].copy_from_slice(&f32::NAN.to_le_bytes());
    std::fs::write(&path, bytes).unwrap();
    let out = sav(dir, &["--config", "tiny.json", "stylize", "--input", "data/content_000.savt", "--out", "x.savt"]);
    assert_eq!(out.status.code(), Some(1), "{}", String::from_utf8_lossy(&out.stderr));
}

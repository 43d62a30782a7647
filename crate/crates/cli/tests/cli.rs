use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use skydmd::cli_io::load_sequence;
use skydmd::synth::{generate, SynthScenario};

fn skydmd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_skydmd"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn scenario_file(dir: &Path, steps: usize, clear: bool) -> PathBuf {
    let mut s = if clear {
        SynthScenario::clear_sky()
    } else {
        SynthScenario::decaying_cloud()
    };
    s.steps = steps;
    let path = dir.join("scenario.json");
    fs::write(&path, serde_json::to_string_pretty(&s).unwrap()).unwrap();
    path
}

fn sorted_files(dir: &Path) -> Vec<PathBuf> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    files.sort();
    files
}

#[test]
fn version_prints_package_version() {
    let out = skydmd(&["version"]);
    assert!(out.status.success());
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "skydmd 0.1.0");
}

#[test]
fn synth_output_is_byte_identical_across_runs() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = scenario_file(dir.path(), 6, false);
    let mut listings = Vec::new();
    for run in ["a", "b"] {
        let out_dir = dir.path().join(run);
        let out = skydmd(&[
            "synth",
            "--scenario",
            scenario.to_str().unwrap(),
            "--seed",
            "4",
            "--out",
            out_dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        listings.push(
            sorted_files(&out_dir)
                .into_iter()
                .map(|p| (p.file_name().unwrap().to_owned(), fs::read(&p).unwrap()))
                .collect::<Vec<_>>(),
        );
    }
    assert_eq!(listings[0].len(), 7);
    assert_eq!(listings[0], listings[1]);
}

#[test]
fn synth_frames_load_back_within_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = scenario_file(dir.path(), 5, false);
    let out_dir = dir.path().join("frames");
    let out = skydmd(&[
        "synth",
        "--scenario",
        scenario.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success());
    let s: SynthScenario = serde_json::from_str(&fs::read_to_string(&scenario).unwrap()).unwrap();
    let (expected, _) = generate(&s, 0).unwrap();
    let loaded = load_sequence(&out_dir, s.dt).unwrap();
    assert_eq!(loaded.len(), expected.len());
    for (a, b) in loaded.frames().iter().zip(expected.frames()) {
        assert!((a - b).amax() <= 1.0 / 65535.0);
    }
}

#[test]
fn clear_sky_forecast_reports_full_sun() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = scenario_file(dir.path(), 20, true);
    let config = dir.path().join("run.json");
    fs::write(
        &config,
        format!(
            r#"{{"input": "{}", "output_dir": "out", "emit_frames": true}}"#,
            scenario.file_name().unwrap().to_str().unwrap()
        ),
    )
    .unwrap();
    let out = skydmd(&["forecast", "--config", config.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out_dir = dir.path().join("out");
    let mut reader = csv::Reader::from_path(out_dir.join("forecast.csv")).unwrap();
    let headers = reader.headers().unwrap().clone();
    let idx = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let mut rows = 0;
    for record in reader.records() {
        let record = record.unwrap();
        for col in ["actual_k", "dmd_k", "frozen_k"] {
            let k: f64 = record[idx(col)].parse().unwrap();
            assert!((k - 1.0).abs() < 1e-6, "{col} = {k}");
        }
        rows += 1;
    }
    assert!(rows > 0);
    assert_eq!(sorted_files(&out_dir.join("frames")).len(), rows);
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out_dir.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["frames"], 20);
}

#[test]
fn invalid_config_exits_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.json");
    fs::write(&config, r#"{"input": "x.json", "order": 0}"#).unwrap();
    let out = skydmd(&["forecast", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = skydmd(&["forecast", "--config", dir.path().join("missing.json").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));

    let out = skydmd(&["no-such-command"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn unreadable_input_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let frames = dir.path().join("frames");
    fs::create_dir(&frames).unwrap();
    fs::write(frames.join("frame_00000.pgm"), b"not an image").unwrap();
    let config = dir.path().join("run.json");
    fs::write(&config, r#"{"input": "frames", "dt": 2.0}"#).unwrap();
    let out = skydmd(&["forecast", "--config", config.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
}

//! Frame loading, run configuration and report files.

use std::fs;
use std::path::{Path, PathBuf};

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecast::{run_pipeline, Method, PipelineConfig, PipelineOutput};
use crate::motion::WindEstimate;
use crate::sequence::{Frame, FrameSequence};
use crate::synth::{generate, GroundTruth, SynthScenario};

const FRAME_EXTENSIONS: [&str; 3] = ["pgm", "pnm", "png"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Frame directory or synthetic scenario file (`.json`).
    pub input: PathBuf,
    /// Frame interval for frame directories; scenarios carry their own.
    pub dt: Option<f64>,
    /// Seed used when `input` is a scenario.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub emit_frames: bool,
    #[serde(flatten)]
    pub pipeline: PipelineConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: PathBuf::new(),
            dt: None,
            seed: 0,
            output_dir: PathBuf::from("out"),
            emit_frames: false,
            pipeline: PipelineConfig::default(),
        }
    }
}

impl RunConfig {
    /// Reads a JSON config; relative paths are taken relative to the file.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or_else(|| Path::new("."));
        if cfg.input.is_relative() {
            cfg.input = base.join(&cfg.input);
        }
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.as_os_str().is_empty() {
            return Err(Error::Config("missing input path".into()));
        }
        if let Some(dt) = self.dt {
            if !(dt > 0.0 && dt.is_finite()) {
                return Err(Error::Config(format!("dt must be positive, got {dt}")));
            }
        }
        self.pipeline.validate()
    }

    fn input_is_scenario(&self) -> bool {
        self.input.is_file()
            && self
                .input
                .extension()
                .is_some_and(|e| e.eq_ignore_ascii_case("json"))
    }

    /// Loads the frames named by `input`, rendering them when it is a scenario.
    pub fn load_input(&self) -> Result<FrameSequence> {
        if self.input_is_scenario() {
            let scenario = load_scenario(&self.input)?;
            if let Some(dt) = self.dt {
                if dt != scenario.dt {
                    return Err(Error::Config(format!(
                        "config dt {dt} disagrees with scenario dt {}",
                        scenario.dt
                    )));
                }
            }
            Ok(generate(&scenario, self.seed)?.0)
        } else {
            let dt = self
                .dt
                .ok_or_else(|| Error::Config("dt is required for frame directories".into()))?;
            load_sequence(&self.input, dt)
        }
    }
}

pub fn load_scenario(path: &Path) -> Result<SynthScenario> {
    let text = fs::read_to_string(path)?;
    let scenario: SynthScenario = serde_json::from_str(&text)
        .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    scenario.validate()?;
    Ok(scenario)
}

/// Reads every PGM/PNG file of `dir` in lexicographic name order, scaling
/// pixels by the maximum of their bit depth.
pub fn load_sequence(dir: &Path, dt: f64) -> Result<FrameSequence> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| {
        p.is_file()
            && p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| FRAME_EXTENSIONS.iter().any(|x| x.eq_ignore_ascii_case(e)))
    });
    paths.sort_by(|a, b| a.file_name().cmp(&b.file_name()));
    if paths.is_empty() {
        return Err(Error::EmptySequence);
    }
    let frames = paths
        .iter()
        .map(|p| read_frame(p))
        .collect::<Result<Vec<_>>>()?;
    FrameSequence::new(frames, dt)
}

fn read_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|source| Error::Image {
        path: path.display().to_string(),
        source,
    })?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    match img {
        DynamicImage::ImageLuma8(buf) => Ok(Frame::from_fn(h, w, |r, c| {
            buf.get_pixel(c as u32, r as u32)[0] as f64 / u8::MAX as f64
        })),
        DynamicImage::ImageLuma16(buf) => Ok(Frame::from_fn(h, w, |r, c| {
            buf.get_pixel(c as u32, r as u32)[0] as f64 / u16::MAX as f64
        })),
        other => Err(Error::InvalidInput(format!(
            "{}: expected a grayscale image, found {:?}",
            path.display(),
            other.color()
        ))),
    }
}

fn quantize16(frame: &Frame) -> ImageBuffer<Luma<u16>, Vec<u16>> {
    ImageBuffer::from_fn(frame.ncols() as u32, frame.nrows() as u32, |c, r| {
        let v = frame[(r as usize, c as usize)].clamp(0.0, 1.0);
        Luma([(v * u16::MAX as f64).round() as u16])
    })
}

/// Writes a frame as a 16-bit grayscale image; the format follows the extension.
pub fn write_frame16(frame: &Frame, path: &Path) -> Result<()> {
    let format = ImageFormat::from_path(path).map_err(|source| Error::Image {
        path: path.display().to_string(),
        source,
    })?;
    quantize16(frame)
        .save_with_format(path, format)
        .map_err(|source| Error::Image {
            path: path.display().to_string(),
            source,
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PerMethod<T> {
    pub dmd: T,
    pub frozen_advection: T,
}

impl<T> PerMethod<T> {
    fn from_fn(mut f: impl FnMut(Method) -> T) -> Self {
        Self {
            dmd: f(Method::Dmd),
            frozen_advection: f(Method::FrozenAdvection),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub step: usize,
    pub time_s: f64,
    pub actual_k: f64,
    pub dmd_k: f64,
    pub frozen_k: f64,
    pub horizon_s: f64,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub frames: usize,
    pub dt_s: f64,
    pub first_dissolution_step: PerMethod<Option<usize>>,
    pub first_dissolution_time_s: PerMethod<Option<f64>>,
    pub mean_abs_k_error: PerMethod<Option<f64>>,
    pub max_horizon_s: f64,
    pub wind: WindEstimate,
    pub disk_center: (f64, f64),
    pub disk_radius: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastReport {
    pub rows: Vec<ReportRow>,
    pub summary: ReportSummary,
}

impl ForecastReport {
    pub fn from_pipeline(out: &PipelineOutput) -> Self {
        let rows = out
            .steps
            .iter()
            .map(|s| {
                let mut warnings = s.dmd.warnings.clone();
                for w in &s.frozen.warnings {
                    if !warnings.contains(w) {
                        warnings.push(w.clone());
                    }
                }
                ReportRow {
                    step: s.issue_step,
                    time_s: s.time_s,
                    actual_k: s.actual_k,
                    dmd_k: s.dmd.k_value,
                    frozen_k: s.frozen.k_value,
                    horizon_s: s.dmd.horizon_s,
                    warnings,
                }
            })
            .collect();
        let series = &out.series;
        let first = PerMethod::from_fn(|m| series.first_dissolution_step(m));
        let summary = ReportSummary {
            frames: series.times.len(),
            dt_s: out.dt,
            first_dissolution_time_s: PerMethod {
                dmd: first.dmd.map(|s| series.times[s - 1]),
                frozen_advection: first.frozen_advection.map(|s| series.times[s - 1]),
            },
            first_dissolution_step: first,
            mean_abs_k_error: PerMethod::from_fn(|m| series.mean_absolute_error(m)),
            max_horizon_s: out.max_horizon_s,
            wind: out.wind,
            disk_center: out.disk.center(),
            disk_radius: out.disk.radius(),
        };
        Self { rows, summary }
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "step",
            "time_s",
            "actual_k",
            "dmd_k",
            "frozen_k",
            "horizon_s",
            "warnings",
        ])?;
        for r in &self.rows {
            w.write_record([
                r.step.to_string(),
                format!("{:.3}", r.time_s),
                format!("{:.6}", r.actual_k),
                format!("{:.6}", r.dmd_k),
                format!("{:.6}", r.frozen_k),
                format!("{:.3}", r.horizon_s),
                r.warnings.join(";"),
            ])?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn write_summary(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(&self.summary)?;
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }
}

/// Runs the pipeline for `config` and writes `forecast.csv`, `summary.json`
/// and, when requested, one composite forecast PNG per issue step.
pub fn run_forecast_command(config: &RunConfig) -> Result<ForecastReport> {
    config.validate()?;
    let seq = config.load_input()?;
    let out = run_pipeline(&seq, &config.pipeline)?;
    let report = ForecastReport::from_pipeline(&out);

    fs::create_dir_all(&config.output_dir)?;
    report.write_csv(&config.output_dir.join("forecast.csv"))?;
    report.write_summary(&config.output_dir.join("summary.json"))?;
    if config.emit_frames {
        let dir = config.output_dir.join("frames");
        fs::create_dir_all(&dir)?;
        for step in &out.steps {
            write_frame16(
                &step.composite,
                &dir.join(format!("forecast_{:05}.png", step.issue_step)),
            )?;
        }
    }
    Ok(report)
}

/// Renders a scenario as 16-bit PGM frames plus `truth.json` in `out_dir`.
pub fn run_synth_command(scenario_path: &Path, seed: u64, out_dir: &Path) -> Result<GroundTruth> {
    let scenario = load_scenario(scenario_path)?;
    let (seq, truth) = generate(&scenario, seed)?;
    write_synth_output(&seq, &truth, out_dir)?;
    Ok(truth)
}

pub fn write_synth_output(seq: &FrameSequence, truth: &GroundTruth, out_dir: &Path) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    for (k, frame) in seq.frames().iter().enumerate() {
        write_frame16(frame, &out_dir.join(format!("frame_{:05}.pgm", k + 1)))?;
    }
    let mut text = serde_json::to_string_pretty(truth)?;
    text.push('\n');
    fs::write(out_dir.join("truth.json"), text)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_pgm8(path: &Path, w: usize, h: usize, value: u8) {
        let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
        bytes.extend(std::iter::repeat_n(value, w * h));
        fs::write(path, bytes).unwrap();
    }

    #[test]
    fn loads_8bit_pgm_directory() {
        let dir = tempfile::tempdir().unwrap();
        for i in 0..3 {
            write_pgm8(&dir.path().join(format!("f{i}.pgm")), 4, 4, 255);
        }
        let seq = load_sequence(dir.path(), 1.0).unwrap();
        assert_eq!(seq.len(), 3);
        assert!(seq.frames().iter().all(|f| f.iter().all(|&v| v == 1.0)));
    }

    #[test]
    fn lexicographic_order() {
        let dir = tempfile::tempdir().unwrap();
        write_pgm8(&dir.path().join("b.pgm"), 2, 2, 0);
        write_pgm8(&dir.path().join("a.pgm"), 2, 2, 255);
        write_pgm8(&dir.path().join("c.pgm"), 2, 2, 51);
        fs::write(dir.path().join("notes.txt"), "ignored").unwrap();
        let seq = load_sequence(dir.path(), 1.0).unwrap();
        let firsts: Vec<f64> = seq.frames().iter().map(|f| f[(0, 0)]).collect();
        assert_eq!(firsts, vec![1.0, 0.0, 0.2]);
    }

    #[test]
    fn empty_directory_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_sequence(dir.path(), 1.0), Err(Error::EmptySequence)));
    }

    #[test]
    fn mixed_sizes_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        write_pgm8(&dir.path().join("a.pgm"), 2, 2, 0);
        write_pgm8(&dir.path().join("b.pgm"), 3, 2, 0);
        assert!(matches!(
            load_sequence(dir.path(), 1.0),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn unreadable_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a.pgm"), b"not an image").unwrap();
        let err = load_sequence(dir.path(), 1.0).unwrap_err();
        assert!(matches!(err, Error::Image { .. }));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn sixteen_bit_png_scaling() {
        let dir = tempfile::tempdir().unwrap();
        let img: ImageBuffer<Luma<u16>, Vec<u16>> = ImageBuffer::from_pixel(3, 2, Luma([32768]));
        img.save(dir.path().join("a.png")).unwrap();
        let seq = load_sequence(dir.path(), 1.0).unwrap();
        assert_eq!(seq.shape(), (2, 3));
        assert!((seq.frame(0)[(1, 2)] - 32768.0 / 65535.0).abs() < 1e-15);
        assert!((seq.frame(0)[(0, 0)] - 0.50001).abs() < 1e-5);
    }

    #[test]
    fn frame16_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let f = Frame::from_fn(5, 7, |r, c| ((r * 7 + c) as f64 / 34.0).sqrt());
        write_frame16(&f, &dir.path().join("x.pgm")).unwrap();
        let back = load_sequence(dir.path(), 1.0).unwrap();
        let diff = (back.frame(0) - &f).amax();
        assert!(diff <= 0.5 / 65535.0 + 1e-15, "{diff}");
    }

    #[test]
    fn config_defaults_and_relative_paths() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"input": "frames", "dt": 2.0}"#).unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.input, dir.path().join("frames"));
        assert_eq!(cfg.output_dir, dir.path().join("out"));
        assert_eq!(cfg.pipeline.order, 3);
        assert_eq!(cfg.pipeline.window_len, 8);
        assert_eq!(cfg.pipeline.augment_levels, 1);
    }

    #[test]
    fn invalid_config_maps_to_exit_code_one() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"input": "x", "order": 3, "window_len": 4}"#).unwrap();
        let err = RunConfig::from_file(&path).unwrap_err();
        assert_eq!(err.exit_code(), 1);
        fs::write(&path, "{ not json").unwrap();
        assert_eq!(RunConfig::from_file(&path).unwrap_err().exit_code(), 1);
    }

    #[test]
    fn frame_directory_needs_dt() {
        let cfg = RunConfig {
            input: PathBuf::from("/nonexistent"),
            ..Default::default()
        };
        assert!(matches!(cfg.load_input(), Err(Error::Config(_))));
    }
}

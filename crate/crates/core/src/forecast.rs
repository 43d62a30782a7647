//! Clear-sky-index forecasting on a wind-frame sky sequence.
//!
//! For every issue step a window of the last `M_m` upwind frames is
//! decomposed; the first POD mode marks the insets that hold advecting
//! clouds. Each inset gets its own augmented low-order DMD, fitted on the
//! inset content tracked along the wind. The model is evaluated at the time the
//! cloud reaches the sun, the future inset is advected onto the disk, and `K`
//! is read off the composite. The frozen-cloud baseline advects the last
//! observed inset unchanged.

use std::ops::Range;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::decomposition::{
    admissible_order, build_snapshot_matrix, compute_dmd, compute_pod, evaluate_dmd,
    snapshot_matrix_from_frames, DmdModel,
};
use crate::error::{Error, Result};
use crate::motion::{
    crop_upwind_with_margin, estimate_uniform_wind_excluding, rotate_to_wind_frame, sample_bilinear,
    UpwindCrop, WindEstimate, DEFAULT_CROP_MARGIN, DEFAULT_HS_ALPHA, DEFAULT_HS_ITERATIONS,
};
use crate::preprocessing::{
    locate_solar_disk_from_pod, remove_first_mode_disk_with_pod, remove_glare_with,
    GlareBaseline, SolarDiskMask, DEFAULT_DISK_QUANTILE, DEFAULT_GLARE_RADIUS,
};
use crate::regions::connected_components;
use crate::sequence::{Frame, FrameSequence};

pub const DEFAULT_ORDER: usize = 3;
pub const DEFAULT_WINDOW: usize = 8;
pub const DEFAULT_AUGMENT_LEVELS: usize = 1;
pub const DEFAULT_INSET_ENERGY: f64 = 0.99;
/// Singular values of an inset below this fraction of the largest are not modeled.
pub const DEFAULT_RANK_REL_TOL: f64 = 1e-3;
/// Margin added around each inset bounding box, pixels.
pub const INSET_MARGIN: usize = 2;
/// First-mode cloudiness below this is treated as clear sky when choosing insets.
pub const INSET_CLOUD_FLOOR: f64 = 0.02;
/// Components smaller than this many pixels do not become insets.
pub const MIN_INSET_PIXELS: usize = 4;
/// `Re(omega) t_s` above this flags the forecast as an unstable extrapolation.
pub const UNSTABLE_GROWTH: f64 = 3.0;
pub const EXTRAPOLATION_WARNING: &str = "model extrapolation warning";
pub const NO_WIND_WARNING: &str = "no wind observable";
/// Pixels beyond the disk radius left out of wind estimation.
pub const SUN_EXCLUSION_PX: f64 = 3.0;
/// Forecast `K` at or above this counts as "clear" for dissolution detection.
pub const DISSOLUTION_K: f64 = 0.95;
/// Share of subsequent forecasts that must stay clear after a detection.
pub const DISSOLUTION_SUSTAIN: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dmd,
    FrozenAdvection,
}

/// Rectangular region of the upwind frame holding one cloud's excursion over
/// a window of frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Inset {
    pub rows: Range<usize>,
    pub cols: Range<usize>,
    /// Zero-based index of the first window frame.
    pub window_start: usize,
    /// `M_m`.
    pub window_len: usize,
}

impl Inset {
    pub fn height(&self) -> usize {
        self.rows.len()
    }

    pub fn width(&self) -> usize {
        self.cols.len()
    }

    pub fn overlaps(&self, other: &Inset) -> bool {
        self.rows.start < other.rows.end
            && other.rows.start < self.rows.end
            && self.cols.start < other.cols.end
            && other.cols.start < self.cols.end
    }

    /// Zero-based index of the last window frame.
    pub fn last_frame(&self) -> usize {
        self.window_start + self.window_len - 1
    }

    pub fn at_window(mut self, start: usize) -> Self {
        self.window_start = start;
        self
    }

    fn patch(&self, frame: &Frame) -> Frame {
        frame
            .view((self.rows.start, self.cols.start), (self.height(), self.width()))
            .into_owned()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForecastRecord {
    /// One-based index of the frame the forecast is issued at.
    pub issue_step: usize,
    pub horizon_s: f64,
    /// `t_s` measured from the issue frame.
    pub arrival_time_s: f64,
    pub k_value: f64,
    pub method: Method,
    #[serde(default)]
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CsiSeries {
    pub times: Vec<f64>,
    pub actual: Vec<f64>,
    pub forecasts: Vec<ForecastRecord>,
}

impl CsiSeries {
    pub fn records(&self, method: Method) -> impl Iterator<Item = &ForecastRecord> {
        self.forecasts.iter().filter(move |r| r.method == method)
    }

    /// Actual `K` at absolute time `t`, nearest sample; `None` past the end.
    pub fn actual_at(&self, t: f64) -> Option<f64> {
        let dt = if self.times.len() > 1 {
            self.times[1] - self.times[0]
        } else {
            return self.actual.first().copied().filter(|_| t == self.times[0]);
        };
        let idx = ((t - self.times[0]) / dt).round();
        if idx < 0.0 || idx as usize >= self.actual.len() {
            None
        } else {
            Some(self.actual[idx as usize])
        }
    }

    /// Mean `|K_forecast - K_actual(issue + horizon)|` over forecasts whose
    /// target time is inside the series.
    pub fn mean_absolute_error(&self, method: Method) -> Option<f64> {
        let errs: Vec<f64> = self
            .records(method)
            .filter_map(|r| {
                let t = self.times[r.issue_step - 1] + r.horizon_s;
                self.actual_at(t).map(|a| (r.k_value - a).abs())
            })
            .collect();
        if errs.is_empty() {
            None
        } else {
            Some(errs.iter().sum::<f64>() / errs.len() as f64)
        }
    }

    /// First issue step of sustained dissolution detection for `method`.
    pub fn first_dissolution_step(&self, method: Method) -> Option<usize> {
        let rows: Vec<(usize, f64)> = self
            .records(method)
            .map(|r| (r.issue_step, r.k_value))
            .collect();
        first_sustained_step(&rows, DISSOLUTION_K, DISSOLUTION_SUSTAIN)
    }
}

/// First step `s` whose value reaches `threshold` and after which (inclusive)
/// at least `fraction` of values do.
pub fn first_sustained_step(rows: &[(usize, f64)], threshold: f64, fraction: f64) -> Option<usize> {
    let n = rows.len();
    // Suffix counts of values at or above threshold.
    let mut suffix = vec![0usize; n + 1];
    for i in (0..n).rev() {
        suffix[i] = suffix[i + 1] + usize::from(rows[i].1 >= threshold);
    }
    (0..n)
        .find(|&i| rows[i].1 >= threshold && suffix[i] as f64 >= fraction * (n - i) as f64)
        .map(|i| rows[i].0)
}

/// Longest horizon for which upwind content can reach the sun: `w dt / speed`.
pub fn max_horizon(frame_width_px: usize, dt: f64, wind: &WindEstimate) -> Result<f64> {
    if !(wind.speed > 0.0) {
        return Err(Error::ZeroWind);
    }
    Ok(frame_width_px as f64 * dt / wind.speed)
}

/// `K = 1 - mean cloudiness over the disk`, clamped to `[0, 1]`.
pub fn csi_of_frame(frame: &Frame, disk: &SolarDiskMask) -> Result<f64> {
    if frame.shape() != disk.shape() {
        return Err(Error::ShapeMismatch(format!(
            "frame {:?} vs disk mask {:?}",
            frame.shape(),
            disk.shape()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for (v, &inside) in frame.iter().zip(disk.mask().iter()) {
        if inside {
            sum += v;
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::InvalidInput("empty solar disk mask".into()));
    }
    Ok((1.0 - sum / count as f64).clamp(0.0, 1.0))
}

/// Bounding boxes of the first-POD-mode regions holding `energy_quantile` of
/// its energy.
///
/// Returned insets carry `window_start = 0` and `window_len = window.len()`.
pub fn select_insets(window: &FrameSequence, energy_quantile: f64) -> Result<Vec<Inset>> {
    if window.len() < 2 {
        return Err(Error::InvalidInput("inset selection needs at least 2 frames".into()));
    }
    if !(energy_quantile > 0.0 && energy_quantile <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "energy quantile {energy_quantile} outside (0, 1]"
        )));
    }
    let pod = compute_pod(&build_snapshot_matrix(window)?)?;
    if !(pod.singular_values[0] > 0.0) {
        return Ok(Vec::new());
    }
    let image = pod.mean_weighted_mode_image(0).map(f64::abs);
    let (h, w) = image.shape();

    let total: f64 = image.iter().map(|v| v * v).sum();
    let mut ranked: Vec<f64> = image.iter().copied().filter(|&v| v >= INSET_CLOUD_FLOOR).collect();
    if ranked.is_empty() {
        return Ok(Vec::new());
    }
    ranked.sort_by(|a, b| b.total_cmp(a));
    let mut acc = 0.0;
    let mut threshold = *ranked.last().expect("non-empty");
    for &v in &ranked {
        acc += v * v;
        if acc >= energy_quantile * total {
            threshold = v;
            break;
        }
    }
    let mask = image.map(|v| v >= threshold && v >= INSET_CLOUD_FLOOR);

    let mut boxes: Vec<(Range<usize>, Range<usize>)> = connected_components(&mask)
        .into_iter()
        .filter(|c| c.len() >= MIN_INSET_PIXELS)
        .map(|c| {
            let r0 = c.iter().map(|p| p.0).min().expect("non-empty");
            let r1 = c.iter().map(|p| p.0).max().expect("non-empty");
            let c0 = c.iter().map(|p| p.1).min().expect("non-empty");
            let c1 = c.iter().map(|p| p.1).max().expect("non-empty");
            (
                r0.saturating_sub(INSET_MARGIN)..(r1 + INSET_MARGIN + 1).min(h),
                c0.saturating_sub(INSET_MARGIN)..(c1 + INSET_MARGIN + 1).min(w),
            )
        })
        .collect();

    // Merge overlapping boxes until the set is pairwise disjoint.
    let overlap = |a: &(Range<usize>, Range<usize>), b: &(Range<usize>, Range<usize>)| {
        a.0.start < b.0.end && b.0.start < a.0.end && a.1.start < b.1.end && b.1.start < a.1.end
    };
    loop {
        let mut merged = false;
        'outer: for i in 0..boxes.len() {
            for j in i + 1..boxes.len() {
                if overlap(&boxes[i], &boxes[j]) {
                    let b = boxes.remove(j);
                    let a = &mut boxes[i];
                    a.0 = a.0.start.min(b.0.start)..a.0.end.max(b.0.end);
                    a.1 = a.1.start.min(b.1.start)..a.1.end.max(b.1.end);
                    merged = true;
                    break 'outer;
                }
            }
        }
        if !merged {
            break;
        }
    }
    boxes.sort_by_key(|b| (b.1.start, b.0.start));
    Ok(boxes
        .into_iter()
        .map(|(rows, cols)| Inset {
            rows,
            cols,
            window_start: 0,
            window_len: window.len(),
        })
        .collect())
}

/// Wind-frame geometry shared by all forecasts of one run.
#[derive(Debug, Clone)]
pub struct WindScene {
    /// Upwind crop of the wind-frame sequence (glare removed).
    pub upwind: UpwindCrop,
    /// Solar disk in full wind-frame coordinates.
    pub disk: SolarDiskMask,
    /// Wind in the wind frame (angle pi).
    pub wind: WindEstimate,
}

impl WindScene {
    pub fn dt(&self) -> f64 {
        self.upwind.seq.dt()
    }

    pub fn full_shape(&self) -> (usize, usize) {
        self.disk.shape()
    }

    pub fn max_horizon(&self) -> Result<f64> {
        max_horizon(self.upwind.width(), self.dt(), &self.wind)
    }

    /// Pixels the wind moves content per second.
    fn px_per_second(&self) -> f64 {
        self.wind.speed / self.dt()
    }
}

/// DMD order, augmentation and rank policy for per-inset models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelSettings {
    pub order: usize,
    pub augment_levels: usize,
    pub rank_rel_tol: f64,
}

impl Default for ModelSettings {
    fn default() -> Self {
        Self {
            order: DEFAULT_ORDER,
            augment_levels: DEFAULT_AUGMENT_LEVELS,
            rank_rel_tol: DEFAULT_RANK_REL_TOL,
        }
    }
}

/// One inset prepared for forecasting: the wind-tracked DMD model, the last
/// observed content and the arrival time at the sun.
#[derive(Debug, Clone)]
pub struct InsetModel {
    pub inset: Inset,
    /// Inset content at the issue frame.
    pub last_patch: Frame,
    /// `None` when the tracked inset carries no modelable signal.
    pub model: Option<DmdModel>,
    /// Seconds from the issue frame until the inset reaches the disk center.
    pub arrival_s: f64,
    /// Full wind-frame column of the inset's left edge at the issue frame.
    left_col: f64,
    window_span_s: f64,
}

impl InsetModel {
    /// Fits the per-inset model. Errors when the wind is zero or the arrival
    /// time lies beyond the maximum horizon.
    pub fn fit(scene: &WindScene, inset: &Inset, settings: &ModelSettings) -> Result<Self> {
        let seq = &scene.upwind.seq;
        if inset.last_frame() >= seq.len() || inset.window_len < 2 {
            return Err(Error::InvalidInput("inset window outside the sequence".into()));
        }
        let (h, w) = seq.shape();
        if inset.rows.end > h || inset.cols.end > w || inset.rows.is_empty() || inset.cols.is_empty()
        {
            return Err(Error::InvalidInput("inset bounds outside the frame".into()));
        }
        if !(scene.wind.speed > 0.0) {
            return Err(Error::ZeroWind);
        }
        let last = inset.last_frame();
        let last_patch = inset.patch(seq.frame(last));
        let left_col = scene.upwind.to_full_col(inset.cols.start) as f64;
        let arrival_s = arrival_time(scene, inset, &last_patch, left_col)?;

        // Track the inset along the wind so the window shows evolution only:
        // content at the issue frame sat `speed * (last - j)` px further right in frame j.
        let speed = scene.wind.speed;
        let tracked: Vec<Frame> = (inset.window_start..=last)
            .map(|j| {
                let frame = seq.frame(j);
                let shift = speed * (last - j) as f64;
                Frame::from_fn(inset.height(), inset.width(), |r, c| {
                    sample_bilinear(
                        frame,
                        (inset.rows.start + r) as f64,
                        (inset.cols.start + c) as f64 + shift,
                    )
                })
            })
            .collect();
        let x = snapshot_matrix_from_frames(&tracked, seq.dt())?;
        let model = if x.data().amax() <= 0.0 {
            None
        } else {
            let r = admissible_order(&x, settings.order, settings.augment_levels, settings.rank_rel_tol)?;
            if r == 0 {
                None
            } else {
                Some(compute_dmd(&x, r, settings.augment_levels)?.with_image_valued(true))
            }
        };
        Ok(Self {
            inset: inset.clone(),
            last_patch,
            model,
            arrival_s,
            left_col,
            window_span_s: (inset.window_len - 1) as f64 * seq.dt(),
        })
    }

    /// Future inset content `horizon_s` after the issue frame (not yet advected).
    pub fn future(&self, method: Method, horizon_s: f64) -> Result<(Frame, Vec<String>)> {
        let (h, w) = self.last_patch.shape();
        match method {
            Method::FrozenAdvection => Ok((self.last_patch.clone(), Vec::new())),
            Method::Dmd => {
                let Some(model) = &self.model else {
                    return Ok((Frame::zeros(h, w), Vec::new()));
                };
                let mut warnings = Vec::new();
                if model.max_growth_exponent(horizon_s) > UNSTABLE_GROWTH {
                    warnings.push(EXTRAPOLATION_WARNING.to_string());
                }
                let state = evaluate_dmd(model, self.window_span_s + horizon_s)?;
                Ok((Frame::from_column_slice(h, w, state.as_slice()), warnings))
            }
        }
    }

    /// Adds the advected future content to a full wind-frame canvas.
    fn paint(
        &self,
        canvas: &mut Frame,
        scene: &WindScene,
        method: Method,
        horizon_s: f64,
    ) -> Result<Vec<String>> {
        let (future, warnings) = self.future(method, horizon_s)?;
        let left = self.left_col - scene.px_per_second() * horizon_s;
        paste_shifted(canvas, &future, self.inset.rows.start, left);
        Ok(warnings)
    }

    /// Scores this inset alone at its own arrival time.
    pub fn record(&self, scene: &WindScene, method: Method) -> Result<ForecastRecord> {
        let mut canvas = Frame::zeros(scene.full_shape().0, scene.full_shape().1);
        let warnings = self.paint(&mut canvas, scene, method, self.arrival_s)?;
        canvas.apply(|v| *v = v.clamp(0.0, 1.0));
        Ok(ForecastRecord {
            issue_step: self.inset.last_frame() + 1,
            horizon_s: self.arrival_s,
            arrival_time_s: self.arrival_s,
            k_value: csi_of_frame(&canvas, &scene.disk)?,
            method,
            warnings,
        })
    }
}

/// Seconds until the inset's cloud mass centroid reaches the disk center.
fn arrival_time(scene: &WindScene, inset: &Inset, patch: &Frame, left_col: f64) -> Result<f64> {
    let mass: f64 = patch.iter().sum();
    let centroid = if mass > 1e-12 {
        (0..patch.ncols())
            .map(|c| c as f64 * patch.column(c).sum())
            .sum::<f64>()
            / mass
    } else {
        (inset.width() as f64 - 1.0) / 2.0
    };
    let distance = (left_col + centroid - scene.disk.center().1).max(0.0);
    let t_s = distance / scene.px_per_second();
    let max_s = scene.max_horizon()?;
    if t_s > max_s {
        return Err(Error::BeyondHorizon {
            arrival_s: t_s,
            max_s,
        });
    }
    Ok(t_s)
}

/// Adds `patch` at rows from `row0` and a fractional left column, splitting
/// each value between the two nearest columns.
fn paste_shifted(canvas: &mut Frame, patch: &Frame, row0: usize, left: f64) {
    let (h, w) = canvas.shape();
    let base = left.floor();
    let frac = left - base;
    for c in 0..patch.ncols() {
        let x0 = base + c as f64;
        for r in 0..patch.nrows() {
            let row = row0 + r;
            if row >= h {
                continue;
            }
            let v = patch[(r, c)];
            if x0 >= 0.0 && x0 < w as f64 {
                canvas[(row, x0 as usize)] += (1.0 - frac) * v;
            }
            let x1 = x0 + 1.0;
            if frac != 0.0 && x1 >= 0.0 && x1 < w as f64 {
                canvas[(row, x1 as usize)] += frac * v;
            }
        }
    }
}

/// DMD forecast of one inset, scored at its arrival time.
pub fn dmd_inset_forecast(
    scene: &WindScene,
    inset: &Inset,
    settings: &ModelSettings,
) -> Result<ForecastRecord> {
    InsetModel::fit(scene, inset, settings)?.record(scene, Method::Dmd)
}

/// Frozen-cloud forecast of one inset: the last observed content advected unchanged.
pub fn frozen_advection_forecast(scene: &WindScene, inset: &Inset) -> Result<ForecastRecord> {
    let seq = &scene.upwind.seq;
    if inset.last_frame() >= seq.len() {
        return Err(Error::InvalidInput("inset window outside the sequence".into()));
    }
    if !(scene.wind.speed > 0.0) {
        return Err(Error::ZeroWind);
    }
    let last_patch = inset.patch(seq.frame(inset.last_frame()));
    let left_col = scene.upwind.to_full_col(inset.cols.start) as f64;
    let arrival_s = arrival_time(scene, inset, &last_patch, left_col)?;
    let m = InsetModel {
        inset: inset.clone(),
        last_patch,
        model: None,
        arrival_s,
        left_col,
        window_span_s: (inset.window_len - 1) as f64 * seq.dt(),
    };
    m.record(scene, Method::FrozenAdvection)
}

/// Composite of all inset futures at `horizon_s`, clamped to `[0, 1]`.
pub fn composite_forecast(
    scene: &WindScene,
    models: &[InsetModel],
    method: Method,
    horizon_s: f64,
) -> Result<(Frame, Vec<String>)> {
    let (h, w) = scene.full_shape();
    let mut canvas = Frame::zeros(h, w);
    let mut warnings = Vec::new();
    for m in models {
        for wmsg in m.paint(&mut canvas, scene, method, horizon_s)? {
            if !warnings.contains(&wmsg) {
                warnings.push(wmsg);
            }
        }
    }
    canvas.apply(|v| *v = v.clamp(0.0, 1.0));
    Ok((canvas, warnings))
}

/// Parameters of the full forecasting pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub order: usize,
    pub window_len: usize,
    pub augment_levels: usize,
    pub hs_alpha: f64,
    pub hs_iterations: usize,
    pub disk_quantile: f64,
    pub inset_energy_quantile: f64,
    pub glare_radius: usize,
    pub glare_baseline: GlareBaseline,
    pub rank_rel_tol: f64,
    pub crop_margin: usize,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            order: DEFAULT_ORDER,
            window_len: DEFAULT_WINDOW,
            augment_levels: DEFAULT_AUGMENT_LEVELS,
            hs_alpha: DEFAULT_HS_ALPHA,
            hs_iterations: DEFAULT_HS_ITERATIONS,
            disk_quantile: DEFAULT_DISK_QUANTILE,
            inset_energy_quantile: DEFAULT_INSET_ENERGY,
            glare_radius: DEFAULT_GLARE_RADIUS,
            glare_baseline: GlareBaseline::Sequence,
            rank_rel_tol: DEFAULT_RANK_REL_TOL,
            crop_margin: DEFAULT_CROP_MARGIN,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.order == 0 {
            return bad("DMD order must be at least 1".into());
        }
        if self.window_len <= self.order + 1 {
            return bad(format!(
                "window length {} must exceed order + 1 = {}",
                self.window_len,
                self.order + 1
            ));
        }
        if self.window_len < self.order + self.augment_levels + 1 {
            return bad(format!(
                "window length {} leaves fewer than {} snapshot pairs after {} augmentation levels",
                self.window_len, self.order, self.augment_levels
            ));
        }
        if !(self.hs_alpha > 0.0 && self.hs_alpha.is_finite()) {
            return bad("Horn-Schunck alpha must be positive".into());
        }
        if self.hs_iterations == 0 {
            return bad("Horn-Schunck iterations must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&self.disk_quantile) {
            return bad("disk quantile must lie in [0, 1]".into());
        }
        if !(self.inset_energy_quantile > 0.0 && self.inset_energy_quantile <= 1.0) {
            return bad("inset energy quantile must lie in (0, 1]".into());
        }
        if !(self.rank_rel_tol >= 0.0 && self.rank_rel_tol < 1.0) {
            return bad("rank tolerance must lie in [0, 1)".into());
        }
        Ok(())
    }

    fn model_settings(&self) -> ModelSettings {
        ModelSettings {
            order: self.order,
            augment_levels: self.augment_levels,
            rank_rel_tol: self.rank_rel_tol,
        }
    }
}

/// Forecasts issued at one step.
#[derive(Debug, Clone)]
pub struct StepForecast {
    /// One-based issue step.
    pub issue_step: usize,
    pub time_s: f64,
    pub actual_k: f64,
    pub dmd: ForecastRecord,
    pub frozen: ForecastRecord,
    pub insets: Vec<Inset>,
    /// Per-inset `(dmd, frozen)` records, scored alone.
    pub per_inset: Vec<(ForecastRecord, ForecastRecord)>,
    /// DMD composite future frame in wind-frame coordinates.
    pub composite: Frame,
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub series: CsiSeries,
    pub steps: Vec<StepForecast>,
    /// Wind in the original camera frame.
    pub wind: WindEstimate,
    /// Disk in the original camera frame.
    pub disk: SolarDiskMask,
    /// `None` when no wind was observable.
    pub scene: Option<WindScene>,
    pub dt: f64,
    pub max_horizon_s: f64,
}

/// Full run: disk removal, wind, rotation and crop, glare removal, then a DMD
/// and a frozen forecast at every step with a complete window.
pub fn run_pipeline(seq: &FrameSequence, config: &PipelineConfig) -> Result<PipelineOutput> {
    config.validate()?;
    if seq.len() < config.window_len {
        return Err(Error::InvalidInput(format!(
            "sequence of {} frames is shorter than the window of {}",
            seq.len(),
            config.window_len
        )));
    }
    let pod = compute_pod(&build_snapshot_matrix(seq)?)?;
    let disk = locate_solar_disk_from_pod(&pod, config.disk_quantile)?;
    let cleaned = remove_first_mode_disk_with_pod(seq, &disk, &pod)?;
    drop(pod);

    // Sun pixels and a rim around them are left out of the wind estimate.
    let sun_zone = SolarDiskMask::new(
        disk.center(),
        disk.radius() + SUN_EXCLUSION_PX,
        disk.shape(),
    )?;
    let wind = match estimate_uniform_wind_excluding(
        &without_static_background(&cleaned)?,
        config.hs_alpha,
        config.hs_iterations,
        Some(sun_zone.mask()),
    ) {
        Ok(w) if w.speed > 0.0 => w,
        Ok(_) | Err(Error::NoWind) => return persistence_output(&cleaned, disk, config),
        Err(e) => return Err(e),
    };
    let (rotated, wind_disk, wind_frame) = rotate_to_wind_frame(&cleaned, &wind, &disk)?;
    let crop = crop_upwind_with_margin(&rotated, &wind_disk, config.crop_margin)?;
    let upwind = UpwindCrop {
        seq: remove_glare_with(&crop.seq, config.glare_radius, config.glare_baseline)?,
        col_offset: crop.col_offset,
    };
    let scene = WindScene {
        upwind,
        disk: wind_disk,
        wind: wind_frame,
    };
    let max_horizon_s = scene.max_horizon()?;
    log::info!(
        "wind {:.3} px/step at {:.3} rad; disk at ({:.1}, {:.1}) r={:.1}; t_max {:.1} s",
        wind.speed,
        wind.angle,
        disk.center().0,
        disk.center().1,
        disk.radius(),
        max_horizon_s
    );

    let actual: Vec<f64> = rotated
        .frames()
        .iter()
        .map(|f| csi_of_frame(f, &scene.disk))
        .collect::<Result<_>>()?;
    let times: Vec<f64> = (0..seq.len()).map(|k| k as f64 * seq.dt()).collect();

    let settings = config.model_settings();
    let steps: Vec<StepForecast> = (config.window_len - 1..seq.len())
        .into_par_iter()
        .map(|last| forecast_step(&scene, last, config, &settings, actual[last]))
        .collect::<Result<_>>()?;

    let forecasts = steps
        .iter()
        .flat_map(|s| [s.dmd.clone(), s.frozen.clone()])
        .collect();
    Ok(PipelineOutput {
        series: CsiSeries {
            times,
            actual,
            forecasts,
        },
        steps,
        wind,
        disk,
        scene: Some(scene),
        dt: seq.dt(),
        max_horizon_s,
    })
}

/// Persistence of the current `K` for both methods, used when no wind is
/// observable.
fn persistence_output(
    cleaned: &FrameSequence,
    disk: SolarDiskMask,
    config: &PipelineConfig,
) -> Result<PipelineOutput> {
    log::warn!("{NO_WIND_WARNING}; forecasting persistence");
    let actual: Vec<f64> = cleaned
        .frames()
        .iter()
        .map(|f| csi_of_frame(f, &disk))
        .collect::<Result<_>>()?;
    let record = |last: usize, method| ForecastRecord {
        issue_step: last + 1,
        horizon_s: 0.0,
        arrival_time_s: 0.0,
        k_value: actual[last],
        method,
        warnings: vec![NO_WIND_WARNING.to_string()],
    };
    let steps: Vec<StepForecast> = (config.window_len - 1..cleaned.len())
        .map(|last| StepForecast {
            issue_step: last + 1,
            time_s: last as f64 * cleaned.dt(),
            actual_k: actual[last],
            dmd: record(last, Method::Dmd),
            frozen: record(last, Method::FrozenAdvection),
            insets: Vec::new(),
            per_inset: Vec::new(),
            composite: cleaned.frame(last).clone(),
        })
        .collect();
    let forecasts = steps
        .iter()
        .flat_map(|s| [s.dmd.clone(), s.frozen.clone()])
        .collect();
    Ok(PipelineOutput {
        series: CsiSeries {
            times: (0..cleaned.len()).map(|k| k as f64 * cleaned.dt()).collect(),
            actual,
            forecasts,
        },
        steps,
        wind: WindEstimate {
            speed: 0.0,
            angle: 0.0,
        },
        disk,
        scene: None,
        dt: cleaned.dt(),
        max_horizon_s: 0.0,
    })
}

/// Subtracts the per-pixel minimum over time.
fn without_static_background(seq: &FrameSequence) -> Result<FrameSequence> {
    let mut floor = seq.frame(0).clone();
    for f in &seq.frames()[1..] {
        floor.zip_apply(f, |a, b| *a = a.min(b));
    }
    seq.map_frames(|f| f - &floor)
}

fn forecast_step(
    scene: &WindScene,
    last: usize,
    config: &PipelineConfig,
    settings: &ModelSettings,
    actual_k: f64,
) -> Result<StepForecast> {
    let start = last + 1 - config.window_len;
    let window = scene.upwind.seq.window(start, config.window_len)?;
    let insets: Vec<Inset> = select_insets(&window, config.inset_energy_quantile)?
        .into_iter()
        .map(|i| i.at_window(start))
        .collect();

    let mut models = Vec::new();
    let mut per_inset = Vec::new();
    for inset in &insets {
        let fitted = InsetModel::fit(scene, inset, settings).and_then(|m| {
            let d = m.record(scene, Method::Dmd)?;
            let f = m.record(scene, Method::FrozenAdvection)?;
            Ok((m, d, f))
        });
        match fitted {
            Ok((m, d, f)) => {
                models.push(m);
                per_inset.push((d, f));
            }
            Err(e) => log::debug!("step {}: skipping inset {:?}: {e}", last + 1, inset),
        }
    }

    let time_s = last as f64 * scene.dt();
    let (h, w) = scene.full_shape();
    let mut composite = Frame::zeros(h, w);
    let mut records = Vec::with_capacity(2);
    for (idx, method) in [Method::Dmd, Method::FrozenAdvection].into_iter().enumerate() {
        // The composite is scored when the inset with the lowest solo K arrives.
        let governing = per_inset
            .iter()
            .map(|p| if idx == 0 { &p.0 } else { &p.1 })
            .min_by(|a, b| {
                a.k_value
                    .total_cmp(&b.k_value)
                    .then(a.arrival_time_s.total_cmp(&b.arrival_time_s))
            });
        let horizon = governing.map_or(0.0, |r| r.arrival_time_s);
        let (canvas, warnings) = composite_forecast(scene, &models, method, horizon)?;
        let k_value = csi_of_frame(&canvas, &scene.disk)?;
        if method == Method::Dmd {
            composite = canvas;
        }
        records.push(ForecastRecord {
            issue_step: last + 1,
            horizon_s: horizon,
            arrival_time_s: horizon,
            k_value,
            method,
            warnings,
        });
    }
    let frozen = records.pop().expect("two records");
    let dmd = records.pop().expect("two records");
    Ok(StepForecast {
        issue_step: last + 1,
        time_s,
        actual_k,
        dmd,
        frozen,
        insets,
        per_inset,
        composite,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::motion::UpwindCrop;

    fn blob_frame(h: usize, w: usize, centers: &[(f64, f64)], sigma: f64, amp: f64) -> Frame {
        Frame::from_fn(h, w, |r, c| {
            centers
                .iter()
                .map(|&(r0, c0)| {
                    let d2 = (r as f64 - r0).powi(2) + (c as f64 - c0).powi(2);
                    amp * (-d2 / (2.0 * sigma * sigma)).exp()
                })
                .sum::<f64>()
                .min(1.0)
        })
    }

    #[test]
    fn horizon_formula() {
        let w = WindEstimate { speed: 1.0, angle: std::f64::consts::PI };
        assert_eq!(max_horizon(100, 2.0, &w).unwrap(), 200.0);
        let w = WindEstimate { speed: 0.4, angle: 0.0 };
        assert!((max_horizon(83, 2.0, &w).unwrap() - 415.0).abs() < 1e-12);
        let w = WindEstimate { speed: 0.0, angle: 0.0 };
        assert!(matches!(max_horizon(83, 2.0, &w), Err(Error::ZeroWind)));
    }

    #[test]
    fn csi_examples() {
        let disk = SolarDiskMask::new((4.0, 4.0), 2.0, (9, 9)).unwrap();
        assert_eq!(csi_of_frame(&Frame::zeros(9, 9), &disk).unwrap(), 1.0);
        assert_eq!(csi_of_frame(&Frame::from_element(9, 9, 1.0), &disk).unwrap(), 0.0);
        // Left half of the frame cloudy; the disk is symmetric about column 4
        // so split the center column evenly.
        let half = Frame::from_fn(9, 9, |_, c| match c {
            0..=3 => 1.0,
            4 => 0.5,
            _ => 0.0,
        });
        assert!((csi_of_frame(&half, &disk).unwrap() - 0.5).abs() < 1e-15);
        assert!(csi_of_frame(&Frame::zeros(5, 5), &disk).is_err());
    }

    #[test]
    fn clear_window_has_no_insets() {
        let seq = FrameSequence::new(vec![Frame::zeros(20, 30); 8], 2.0).unwrap();
        assert!(select_insets(&seq, 0.99).unwrap().is_empty());
    }

    #[test]
    fn advecting_blob_gives_one_covering_inset() {
        let frames: Vec<Frame> = (0..8)
            .map(|k| blob_frame(40, 80, &[(20.0, 60.0 - 10.0 * k as f64 / 7.0)], 3.0, 0.7))
            .collect();
        let seq = FrameSequence::new(frames, 2.0).unwrap();
        let insets = select_insets(&seq, 0.99).unwrap();
        assert_eq!(insets.len(), 1);
        let i = &insets[0];
        assert!(i.cols.start <= 50 && i.cols.end > 60, "{:?}", i.cols);
        assert!(i.cols.start >= 50 - 10 && i.cols.end <= 61 + 10);
        assert!(i.rows.contains(&20));
    }

    #[test]
    fn separated_blobs_get_separate_insets() {
        let frames: Vec<Frame> = (0..8)
            .map(|k| {
                let dc = k as f64 * 0.5;
                blob_frame(60, 80, &[(12.0, 50.0 - dc), (45.0, 30.0 - dc)], 3.0, 0.6)
            })
            .collect();
        let seq = FrameSequence::new(frames, 2.0).unwrap();
        let insets = select_insets(&seq, 0.99).unwrap();
        assert_eq!(insets.len(), 2);
        assert!(!insets[0].overlaps(&insets[1]));
    }

    #[test]
    fn sustained_detection() {
        let rows: Vec<(usize, f64)> = [0.5, 0.96, 0.5, 0.97, 0.98, 0.5, 0.99, 0.99, 0.99, 0.99, 0.99, 0.99, 0.99, 0.99]
            .iter()
            .enumerate()
            .map(|(i, &k)| (i + 1, k))
            .collect();
        assert_eq!(first_sustained_step(&rows, 0.95, 0.9), Some(4));
        assert_eq!(first_sustained_step(&rows[..1], 0.95, 0.9), None);
    }

    fn scene_with(frames: Vec<Frame>, speed: f64, disk_col: f64, offset: usize) -> WindScene {
        let (h, w) = frames[0].shape();
        let seq = FrameSequence::from_clamped(frames, 2.0).unwrap();
        WindScene {
            upwind: UpwindCrop { seq, col_offset: offset },
            disk: SolarDiskMask::new((h as f64 / 2.0, disk_col), 4.0, (h, w + offset)).unwrap(),
            wind: WindEstimate { speed, angle: std::f64::consts::PI },
        }
    }

    #[test]
    fn frozen_and_dmd_agree_on_pure_translation() {
        let speed = 1.0;
        let frames: Vec<Frame> = (0..8)
            .map(|k| blob_frame(30, 60, &[(15.0, 40.0 - speed * k as f64)], 4.0, 0.8))
            .collect();
        let scene = scene_with(frames, speed, 5.0, 12);
        let insets = select_insets(&scene.upwind.seq, 0.99).unwrap();
        assert_eq!(insets.len(), 1);
        let d = dmd_inset_forecast(&scene, &insets[0], &ModelSettings::default()).unwrap();
        let f = frozen_advection_forecast(&scene, &insets[0]).unwrap();
        assert!((d.k_value - f.k_value).abs() < 0.02, "{} vs {}", d.k_value, f.k_value);
        assert!(f.k_value < 0.6);
        assert_eq!(d.issue_step, 8);
        assert!((d.arrival_time_s - (12.0 + 33.0 - 5.0) / speed * 2.0).abs() < 1.0);
    }

    #[test]
    fn decaying_cloud_vanishes_in_dmd_forecast() {
        let frames: Vec<Frame> = (0..8)
            .map(|k| {
                let amp = 0.8 * (-0.1 * k as f64).exp();
                blob_frame(30, 60, &[(15.0, 40.0 - k as f64)], 4.0, amp)
            })
            .collect();
        let scene = scene_with(frames, 1.0, 5.0, 12);
        let insets = select_insets(&scene.upwind.seq, 0.99).unwrap();
        let d = dmd_inset_forecast(&scene, &insets[0], &ModelSettings::default()).unwrap();
        let f = frozen_advection_forecast(&scene, &insets[0]).unwrap();
        assert!(d.k_value >= 0.95, "dmd K {}", d.k_value);
        assert!(f.k_value <= 0.8, "frozen K {}", f.k_value);
    }

    #[test]
    fn clear_inset_forecasts_full_sun() {
        let frames = vec![Frame::zeros(30, 60); 8];
        let scene = scene_with(frames, 1.0, 5.0, 12);
        let inset = Inset { rows: 5..20, cols: 10..30, window_start: 0, window_len: 8 };
        let f = frozen_advection_forecast(&scene, &inset).unwrap();
        assert_eq!(f.k_value, 1.0);
        let d = dmd_inset_forecast(&scene, &inset, &ModelSettings::default()).unwrap();
        assert_eq!(d.k_value, 1.0);
    }

    #[test]
    fn opaque_disk_sized_cloud_blocks_the_sun() {
        // A flat opaque square larger than the disk, moving straight at it.
        let frames: Vec<Frame> = (0..8)
            .map(|k| {
                let c0 = 30.0 - k as f64;
                Frame::from_fn(30, 60, |r, c| {
                    let (r, c) = (r as f64, c as f64);
                    if (r - 15.0).abs() <= 5.0 && (c - c0).abs() <= 5.0 { 1.0 } else { 0.0 }
                })
            })
            .collect();
        let scene = scene_with(frames, 1.0, 5.0, 12);
        let insets = select_insets(&scene.upwind.seq, 0.99).unwrap();
        let f = frozen_advection_forecast(&scene, &insets[0]).unwrap();
        assert!(f.k_value < 0.05, "K {}", f.k_value);
    }

    #[test]
    fn zero_horizon_reproduces_current_frame() {
        // Disk placed inside the inset region so a zero horizon is meaningful.
        let frames: Vec<Frame> = (0..8)
            .map(|k| blob_frame(30, 60, &[(15.0, 40.0 - 0.5 * k as f64)], 5.0, 0.7))
            .collect();
        let last = frames[7].clone();
        let seq = FrameSequence::new(frames, 2.0).unwrap();
        let scene = WindScene {
            upwind: UpwindCrop { seq, col_offset: 0 },
            disk: SolarDiskMask::new((15.0, 36.5), 4.0, (30, 60)).unwrap(),
            wind: WindEstimate { speed: 0.5, angle: std::f64::consts::PI },
        };
        let insets = select_insets(&scene.upwind.seq, 0.99).unwrap();
        let m = InsetModel::fit(&scene, &insets[0], &ModelSettings::default()).unwrap();
        let (canvas, _) = composite_forecast(&scene, &[m], Method::Dmd, 0.0).unwrap();
        let k0 = csi_of_frame(&canvas, &scene.disk).unwrap();
        let k_now = csi_of_frame(&last, &scene.disk).unwrap();
        assert!((k0 - k_now).abs() < 0.02, "{k0} vs {k_now}");
    }

    #[test]
    fn config_validation() {
        assert!(PipelineConfig::default().validate().is_ok());
        let c = PipelineConfig { window_len: 4, ..Default::default() };
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let c = PipelineConfig { order: 0, ..Default::default() };
        assert!(c.validate().is_err());
    }
}

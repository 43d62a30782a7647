//! Sequence conditioning: solar-disk location and removal through the first
//! POD mode, and column-wise glare removal.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::decomposition::{build_snapshot_matrix, compute_pod, PodResult};
use crate::error::{Error, Result};
use crate::regions::{connected_components, quantile};
use crate::sequence::{Frame, FrameSequence};

pub const DEFAULT_DISK_QUANTILE: f64 = 0.995;
pub const DEFAULT_GLARE_RADIUS: usize = 5;

/// Circular pixel region of the sun.
#[derive(Debug, Clone, PartialEq)]
pub struct SolarDiskMask {
    center: (f64, f64),
    radius: f64,
    mask: DMatrix<bool>,
}

impl SolarDiskMask {
    /// Disk of `radius` pixels (clamped to at least 1) around `(row, col)`
    /// inside a `shape = (height, width)` frame.
    pub fn new(center: (f64, f64), radius: f64, shape: (usize, usize)) -> Result<Self> {
        let (h, w) = shape;
        let (cr, cc) = center;
        if !(cr.is_finite() && cc.is_finite() && radius.is_finite()) {
            return Err(Error::NonFinite("disk geometry"));
        }
        if cr < 0.0 || cc < 0.0 || cr > (h as f64 - 1.0) || cc > (w as f64 - 1.0) {
            return Err(Error::InvalidInput(format!(
                "disk center ({cr:.2}, {cc:.2}) outside {h}x{w} frame"
            )));
        }
        let radius = radius.max(1.0);
        let r2 = radius * radius;
        let mask = DMatrix::from_fn(h, w, |r, c| {
            let dr = r as f64 - cr;
            let dc = c as f64 - cc;
            dr * dr + dc * dc <= r2
        });
        Ok(Self {
            center,
            radius,
            mask,
        })
    }

    /// `(row, col)`.
    pub fn center(&self) -> (f64, f64) {
        self.center
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn mask(&self) -> &DMatrix<bool> {
        &self.mask
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask.shape()
    }

    pub fn pixel_count(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }

    pub fn contains(&self, row: usize, col: usize) -> bool {
        self.mask[(row, col)]
    }

    /// Same disk placed in a frame of a different shape (e.g. after rotation).
    pub fn with_center(&self, center: (f64, f64), shape: (usize, usize)) -> Result<Self> {
        Self::new(center, self.radius, shape)
    }
}

/// Per-column glare baseline of an upwind-cropped sequence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GlareProfile {
    pub values: Vec<f64>,
}

/// How the column minimum is taken.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GlareBaseline {
    /// One profile from the minimum over all frames and rows.
    #[default]
    Sequence,
    /// A separate profile per frame.
    PerFrame,
}

/// Locates the sun by thresholding the temporally constant first POD mode.
pub fn locate_solar_disk(seq: &FrameSequence, threshold_quantile: f64) -> Result<SolarDiskMask> {
    if seq.len() < 2 {
        return Err(Error::InvalidInput("disk location needs at least 2 frames".into()));
    }
    let pod = compute_pod(&build_snapshot_matrix(seq)?)?;
    locate_solar_disk_from_pod(&pod, threshold_quantile)
}

/// [`locate_solar_disk`] on a precomputed POD of the sequence.
///
/// The first mode image is `sigma_1 u_1 mean(v_1)`. Its `threshold_quantile`
/// level sets the disk plateau; pixels above the midpoint between that level
/// and the median (background) are kept, and the 8-connected blob holding the
/// brightest pixel is summarized by its centroid and equal-area radius.
pub fn locate_solar_disk_from_pod(pod: &PodResult, threshold_quantile: f64) -> Result<SolarDiskMask> {
    if !(0.0..=1.0).contains(&threshold_quantile) {
        return Err(Error::InvalidInput(format!(
            "threshold quantile {threshold_quantile} outside [0, 1]"
        )));
    }
    let sigma = pod.singular_values[0];
    if !(sigma > 0.0) {
        return Err(Error::NoDisk);
    }
    let v = pod.temporal_modes.column(0);
    let normalized_mean = v.mean() * (v.len() as f64).sqrt();
    if normalized_mean.abs() < 1e-6 {
        return Err(Error::NoConstantComponent);
    }
    let image = pod.mean_weighted_mode_image(0);
    let values = image.as_slice();
    let level = quantile(values, threshold_quantile);
    let median = quantile(values, 0.5);
    let span = level - median;
    if !(span > 1e-12 * level.abs().max(1e-300)) {
        return Err(Error::NoDisk);
    }
    let threshold = median + 0.5 * span;
    let above = image.map(|p| p > threshold);
    let brightest = image.iamax_full();
    let blob = connected_components(&above)
        .into_iter()
        .find(|c| c.contains(&brightest))
        .ok_or(Error::NoDisk)?;
    let count = blob.len() as f64;
    let (sr, sc) = blob
        .iter()
        .fold((0.0, 0.0), |(a, b), &(r, c)| (a + r as f64, b + c as f64));
    let radius = (count / std::f64::consts::PI).sqrt();
    SolarDiskMask::new((sr / count, sc / count), radius, image.shape())
}

/// Removes the in-disk part of the first POD mode from every frame.
///
/// Equivalent to subtracting the whole rank-one first mode and adding back
/// its portion outside the disk.
pub fn remove_first_mode_disk(seq: &FrameSequence, disk: &SolarDiskMask) -> Result<FrameSequence> {
    let pod = compute_pod(&build_snapshot_matrix(seq)?)?;
    remove_first_mode_disk_with_pod(seq, disk, &pod)
}

/// [`remove_first_mode_disk`] on a precomputed POD of `seq`.
pub fn remove_first_mode_disk_with_pod(
    seq: &FrameSequence,
    disk: &SolarDiskMask,
    pod: &PodResult,
) -> Result<FrameSequence> {
    if disk.shape() != seq.shape() {
        return Err(Error::ShapeMismatch(format!(
            "disk mask {:?} vs frames {:?}",
            disk.shape(),
            seq.shape()
        )));
    }
    if pod.frame_shape() != seq.shape() || pod.temporal_modes.nrows() != seq.len() {
        return Err(Error::ShapeMismatch("POD does not belong to this sequence".into()));
    }
    let (h, w) = seq.shape();
    let sigma = pod.singular_values[0];
    let u = pod.spatial_modes.column(0);
    let v = pod.temporal_modes.column(0);
    let in_disk = Frame::from_fn(h, w, |r, c| {
        if disk.contains(r, c) {
            sigma * u[c * h + r]
        } else {
            0.0
        }
    });
    let frames = seq
        .frames()
        .iter()
        .enumerate()
        .map(|(k, f)| f - &in_disk * v[k])
        .collect();
    FrameSequence::from_clamped(frames, seq.dt())
}

/// Per-column minimum over all frames and rows, smoothed by a centered moving
/// average of `smoothing_radius` columns.
pub fn glare_profile(seq: &FrameSequence, smoothing_radius: usize) -> Result<GlareProfile> {
    let w = seq.width();
    check_radius(smoothing_radius, w)?;
    let mut mins = vec![f64::INFINITY; w];
    for f in seq.frames() {
        for (j, m) in mins.iter_mut().enumerate() {
            *m = f.column(j).min().min(*m);
        }
    }
    Ok(GlareProfile {
        values: smooth_centered(&mins, smoothing_radius),
    })
}

fn frame_glare_profile(frame: &Frame, smoothing_radius: usize) -> GlareProfile {
    let mins: Vec<f64> = (0..frame.ncols()).map(|j| frame.column(j).min()).collect();
    GlareProfile {
        values: smooth_centered(&mins, smoothing_radius),
    }
}

fn check_radius(radius: usize, w: usize) -> Result<()> {
    if radius >= w {
        return Err(Error::InvalidInput(format!(
            "glare smoothing radius {radius} must be smaller than the frame width {w}"
        )));
    }
    Ok(())
}

/// Centered moving average whose window shrinks symmetrically near the
/// ends, so linear profiles pass through unchanged.
fn smooth_centered(values: &[f64], radius: usize) -> Vec<f64> {
    let n = values.len();
    (0..n)
        .map(|j| {
            let r = radius.min(j).min(n - 1 - j);
            let window = &values[j - r..=j + r];
            window.iter().sum::<f64>() / window.len() as f64
        })
        .collect()
}

/// Subtracts the sequence glare profile from every column of every frame.
pub fn remove_glare(seq: &FrameSequence, smoothing_radius: usize) -> Result<FrameSequence> {
    remove_glare_with(seq, smoothing_radius, GlareBaseline::Sequence)
}

pub fn remove_glare_with(
    seq: &FrameSequence,
    smoothing_radius: usize,
    baseline: GlareBaseline,
) -> Result<FrameSequence> {
    check_radius(smoothing_radius, seq.width())?;
    let shared = match baseline {
        GlareBaseline::Sequence => Some(glare_profile(seq, smoothing_radius)?),
        GlareBaseline::PerFrame => None,
    };
    seq.map_frames(|f| {
        let g = match &shared {
            Some(g) => g.clone(),
            None => frame_glare_profile(f, smoothing_radius),
        };
        let mut out = f.clone();
        for (j, gj) in g.values.iter().enumerate() {
            out.column_mut(j).add_scalar_mut(-gj);
        }
        out
    })
}

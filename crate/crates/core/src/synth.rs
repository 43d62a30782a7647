//! Synthetic sky sequences with closed-form ground truth.
//!
//! Clouds are isotropic Gaussian blobs translating at constant velocity with a
//! scalar amplitude law. Frames add a flat background, a linear glare ramp
//! falling off with column index, an optional bright static solar disk, and
//! optional uniform noise, then clamp to `[0, 1]`.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::decomposition::SnapshotMatrix;
use crate::error::{Error, Result};
use crate::motion::WindEstimate;
use crate::preprocessing::SolarDiskMask;
use crate::sequence::{Frame, FrameSequence};

/// Rendered blobs are cut off beyond this many standard deviations.
pub const BLOB_TRUNCATION_SIGMAS: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub row: f64,
    pub col: f64,
}

/// Pixels per time step; `u` along columns, `v` along rows (downward).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Velocity {
    pub u: f64,
    pub v: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "law", rename_all = "snake_case")]
pub enum AmplitudeLaw {
    Constant,
    /// `a0 exp(-rate t)`, `rate` in 1/s.
    Exponential { rate: f64 },
    /// `a0 sin(pi t / period)` for `0 <= t <= period`, zero afterwards.
    SinLobe { period: f64 },
}

impl AmplitudeLaw {
    fn factor(&self, t: f64) -> f64 {
        match *self {
            AmplitudeLaw::Constant => 1.0,
            AmplitudeLaw::Exponential { rate } => (-rate * t).exp(),
            AmplitudeLaw::SinLobe { period } => {
                if (0.0..=period).contains(&t) {
                    (std::f64::consts::PI * t / period).sin()
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlobSpec {
    pub center: Point,
    pub sigma: f64,
    pub amplitude: f64,
    pub velocity: Velocity,
    #[serde(default = "default_law")]
    pub law: AmplitudeLaw,
}

fn default_law() -> AmplitudeLaw {
    AmplitudeLaw::Constant
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiskSpec {
    pub center: Point,
    pub radius: f64,
    pub brightness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthScenario {
    pub height: usize,
    pub width: usize,
    pub dt: f64,
    pub steps: usize,
    #[serde(default)]
    pub disk: Option<DiskSpec>,
    #[serde(default)]
    pub blobs: Vec<BlobSpec>,
    #[serde(default)]
    pub background: f64,
    /// Glare added at column `c` is `glare_ramp * (1 - c / width)`.
    #[serde(default)]
    pub glare_ramp: f64,
    /// Half-width of the uniform additive noise.
    #[serde(default)]
    pub noise: f64,
}

/// Blob position and amplitude at one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlobState {
    pub row: f64,
    pub col: f64,
    pub amplitude: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub scenario: SynthScenario,
    pub seed: u64,
    /// Mean blob velocity; zero speed when there are no blobs.
    pub wind: WindEstimate,
    /// True clear-sky index at each step.
    pub k: Vec<f64>,
    /// `blobs[step][blob]`.
    pub blobs: Vec<Vec<BlobState>>,
}

impl GroundTruth {
    /// True `K` at absolute time `t` seconds.
    pub fn true_k_at(&self, t: f64) -> f64 {
        self.scenario.true_k_at(t)
    }

    /// True `K` for a forecast issued at one-based `issue_step` for `horizon_s` ahead.
    pub fn true_k(&self, issue_step: usize, horizon_s: f64) -> f64 {
        self.true_k_at((issue_step - 1) as f64 * self.scenario.dt + horizon_s)
    }
}

impl SynthScenario {
    /// Clear sky: background, glare and sun only.
    pub fn clear_sky() -> Self {
        Self {
            blobs: Vec::new(),
            ..Self::decaying_cloud()
        }
    }

    /// A cloud entering on the right and drifting toward the sun while it
    /// decays, gone well before it gets there: 210 frames of 120x160 at 2 s.
    pub fn decaying_cloud() -> Self {
        Self {
            height: 120,
            width: 160,
            dt: 2.0,
            steps: 210,
            disk: Some(DiskSpec {
                center: Point { row: 60.0, col: 25.0 },
                radius: 8.0,
                brightness: 0.5,
            }),
            blobs: vec![BlobSpec {
                center: Point { row: 60.0, col: 118.0 },
                sigma: 10.0,
                amplitude: 0.8,
                velocity: Velocity { u: -0.6, v: 0.0 },
                law: AmplitudeLaw::Exponential { rate: 0.0111 },
            }],
            background: 0.1,
            glare_ramp: 0.1,
            noise: 0.0,
        }
    }

    /// Same geometry as [`decaying_cloud`](Self::decaying_cloud) with a cloud that
    /// only translates.
    pub fn pure_translation() -> Self {
        let mut s = Self::decaying_cloud();
        s.blobs[0].law = AmplitudeLaw::Constant;
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidInput(format!("scenario: {msg}")));
        if self.height == 0 || self.width == 0 || self.steps == 0 {
            return bad("height, width and steps must be positive".into());
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return bad(format!("dt must be positive, got {}", self.dt));
        }
        let inside = |p: &Point| {
            p.row >= 0.0
                && p.col >= 0.0
                && p.row <= self.height as f64 - 1.0
                && p.col <= self.width as f64 - 1.0
        };
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if let Some(d) = &self.disk {
            if !inside(&d.center) {
                return bad("disk center outside frame".into());
            }
            if !(d.radius >= 1.0 && d.radius.is_finite()) {
                return bad("disk radius must be at least 1".into());
            }
            if !unit(d.brightness) {
                return bad("disk brightness outside [0, 1]".into());
            }
        }
        for (i, b) in self.blobs.iter().enumerate() {
            if !inside(&b.center) {
                return bad(format!("blob {i} center outside frame"));
            }
            if !(b.sigma > 0.0 && b.sigma.is_finite()) {
                return bad(format!("blob {i} sigma must be positive"));
            }
            if !unit(b.amplitude) {
                return bad(format!("blob {i} amplitude outside [0, 1]"));
            }
            if !(b.velocity.u.is_finite() && b.velocity.v.is_finite()) {
                return bad(format!("blob {i} velocity not finite"));
            }
            match b.law {
                AmplitudeLaw::Exponential { rate } if !rate.is_finite() => {
                    return bad(format!("blob {i} rate not finite"))
                }
                AmplitudeLaw::SinLobe { period } if !(period > 0.0) => {
                    return bad(format!("blob {i} period must be positive"))
                }
                _ => {}
            }
        }
        for (name, v) in [
            ("background", self.background),
            ("glare_ramp", self.glare_ramp),
            ("noise", self.noise),
        ] {
            if !unit(v) {
                return bad(format!("{name} outside [0, 1]"));
            }
        }
        let peak = self.background
            + self.glare_ramp
            + self.blobs.iter().map(|b| b.amplitude).sum::<f64>();
        if peak > 1.0 + 1e-12 {
            return bad(format!("background, glare and blob amplitudes sum to {peak} > 1"));
        }
        Ok(())
    }

    fn blob_state(&self, b: &BlobSpec, t: f64) -> BlobState {
        let steps = t / self.dt;
        BlobState {
            row: b.center.row + b.velocity.v * steps,
            col: b.center.col + b.velocity.u * steps,
            amplitude: b.amplitude * b.law.factor(t),
        }
    }

    /// Cloudiness of all blobs at `(row, col)`, time `t`; `truncate` cuts each
    /// Gaussian at [`BLOB_TRUNCATION_SIGMAS`].
    fn cloud_at(&self, row: f64, col: f64, t: f64, truncate: bool) -> f64 {
        let mut acc = 0.0;
        for b in &self.blobs {
            let s = self.blob_state(b, t);
            let d2 = (row - s.row).powi(2) + (col - s.col).powi(2);
            let cut = BLOB_TRUNCATION_SIGMAS * b.sigma;
            if truncate && d2 > cut * cut {
                continue;
            }
            acc += s.amplitude * (-d2 / (2.0 * b.sigma * b.sigma)).exp();
        }
        acc.min(1.0)
    }

    /// Noiseless cloud-only layer at time `t`, as rendered into the frames.
    pub fn cloud_layer(&self, t: f64) -> Frame {
        Frame::from_fn(self.height, self.width, |r, c| {
            self.cloud_at(r as f64, c as f64, t, true)
        })
    }

    pub fn disk_mask(&self) -> Option<SolarDiskMask> {
        self.disk.as_ref().map(|d| {
            SolarDiskMask::new((d.center.row, d.center.col), d.radius, (self.height, self.width))
                .expect("validated disk")
        })
    }

    /// `1 - mean cloudiness over the disk` from the untruncated blob model.
    pub fn true_k_at(&self, t: f64) -> f64 {
        let Some(disk) = self.disk_mask() else {
            return 1.0;
        };
        let mut sum = 0.0;
        let mut count = 0usize;
        for c in 0..self.width {
            for r in 0..self.height {
                if disk.contains(r, c) {
                    sum += self.cloud_at(r as f64, c as f64, t, false);
                    count += 1;
                }
            }
        }
        (1.0 - sum / count as f64).clamp(0.0, 1.0)
    }

    /// Mean blob velocity as a wind estimate.
    pub fn true_wind(&self) -> WindEstimate {
        if self.blobs.is_empty() {
            return WindEstimate { speed: 0.0, angle: 0.0 };
        }
        let n = self.blobs.len() as f64;
        let u = self.blobs.iter().map(|b| b.velocity.u).sum::<f64>() / n;
        let v = self.blobs.iter().map(|b| b.velocity.v).sum::<f64>() / n;
        WindEstimate::from_velocity(u, v)
    }

    fn render_frame(&self, k: usize, rng: &mut ChaCha8Rng) -> Frame {
        let t = k as f64 * self.dt;
        let disk = self.disk_mask();
        let brightness = self.disk.as_ref().map_or(0.0, |d| d.brightness);
        let w = self.width as f64;
        let mut f = Frame::from_fn(self.height, self.width, |r, c| {
            let mut v = self.background + self.glare_ramp * (1.0 - c as f64 / w);
            if disk.as_ref().is_some_and(|d| d.contains(r, c)) {
                v += brightness;
            }
            v + self.cloud_at(r as f64, c as f64, t, true)
        });
        if self.noise > 0.0 {
            // Column-major draw order keeps the stream layout-independent.
            for v in f.iter_mut() {
                *v += rng.random_range(-self.noise..=self.noise);
            }
        }
        f.apply(|v| *v = v.clamp(0.0, 1.0));
        f
    }
}

/// Renders the scenario. Identical scenario and seed give bit-identical frames.
pub fn generate(scenario: &SynthScenario, seed: u64) -> Result<(FrameSequence, GroundTruth)> {
    scenario.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let frames: Vec<Frame> = (0..scenario.steps)
        .map(|k| scenario.render_frame(k, &mut rng))
        .collect();
    let seq = FrameSequence::new(frames, scenario.dt)?;
    let k = (0..scenario.steps)
        .map(|s| scenario.true_k_at(s as f64 * scenario.dt))
        .collect();
    let blobs = (0..scenario.steps)
        .map(|s| {
            let t = s as f64 * scenario.dt;
            scenario.blobs.iter().map(|b| scenario.blob_state(b, t)).collect()
        })
        .collect();
    let truth = GroundTruth {
        scenario: scenario.clone(),
        seed,
        wind: scenario.true_wind(),
        k,
        blobs,
    };
    Ok((seq, truth))
}

/// Real part of `sum_i c_i exp(omega_i k dt) p_i` for `k = 0..m`.
///
/// Conjugate pairs of patterns, exponents and coefficients give real
/// oscillatory data.
pub fn generate_linear_modes(
    patterns: &[DVector<Complex64>],
    exponents: &[Complex64],
    coefficients: &[Complex64],
    m: usize,
    dt: f64,
) -> Result<SnapshotMatrix> {
    let count = patterns.len();
    if count == 0 || exponents.len() != count || coefficients.len() != count {
        return Err(Error::InvalidInput(
            "patterns, exponents and coefficients must be non-empty and of equal length".into(),
        ));
    }
    let n = patterns[0].len();
    if n == 0 || patterns.iter().any(|p| p.len() != n) {
        return Err(Error::ShapeMismatch("patterns must share one length".into()));
    }
    if m < 2 * count + 2 {
        return Err(Error::InvalidInput(format!(
            "{m} samples are too few for {count} modes (need {})",
            2 * count + 2
        )));
    }
    let basis = DMatrix::from_fn(n, count, |i, j| patterns[j][i]);
    let s = basis.singular_values();
    let top = s.iter().cloned().fold(0.0_f64, f64::max);
    if s.iter().filter(|&&v| v > 1e-10 * top).count() < count {
        return Err(Error::InvalidInput("patterns are linearly dependent".into()));
    }
    let data = DMatrix::from_fn(n, m, |i, k| {
        let t = k as f64 * dt;
        (0..count)
            .map(|j| coefficients[j] * (exponents[j] * t).exp() * patterns[j][i])
            .sum::<Complex64>()
            .re
    });
    SnapshotMatrix::from_matrix(data, dt)
}

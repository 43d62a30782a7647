//! Cloud motion: Horn-Schunck optical flow, the uniform wind estimate, and the
//! geometric normalization that puts the sequence into the wind frame
//! (advection right to left, sun on the left).

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocessing::SolarDiskMask;
use crate::sequence::{Frame, FrameSequence};

/// Smoothness weight for intensities in `[0, 1]`; smooth cloud edges have
/// gradients of a few hundredths per pixel, so the weight must sit below that.
pub const DEFAULT_HS_ALPHA: f64 = 0.02;
pub const DEFAULT_HS_ITERATIONS: usize = 100;
pub const DEFAULT_CROP_MARGIN: usize = 2;

/// Jacobi iterations stop early once no velocity component changes by more than this.
const HS_CONVERGENCE: f64 = 1e-4;

/// Minimum total gradient weight for a wind estimate.
const MIN_WIND_WEIGHT: f64 = 1e-9;

/// Dense per-pixel velocity in pixels per time step.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    /// Horizontal (column) velocity.
    pub u: Frame,
    /// Vertical (row) velocity, positive downward.
    pub v: Frame,
}

/// Uniform advection velocity.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindEstimate {
    /// Pixels per time step.
    pub speed: f64,
    /// Direction of motion in image coordinates, `atan2(v, u)`, in `(-pi, pi]`.
    pub angle: f64,
}

impl WindEstimate {
    /// From a `(u, v)` velocity in pixels per step (columns, rows).
    pub fn from_velocity(u: f64, v: f64) -> Self {
        let mut angle = v.atan2(u);
        if angle <= -PI {
            angle = PI;
        }
        Self {
            speed: u.hypot(v),
            angle,
        }
    }

    /// `(u, v)` in pixels per step.
    pub fn velocity(&self) -> (f64, f64) {
        (self.speed * self.angle.cos(), self.speed * self.angle.sin())
    }
}

/// Clamped-index pixel access over a column-major buffer.
#[inline]
fn px(data: &[f64], h: usize, w: usize, r: isize, c: isize) -> f64 {
    let r = r.clamp(0, h as isize - 1) as usize;
    let c = c.clamp(0, w as isize - 1) as usize;
    data[c * h + r]
}

/// Brightness derivatives `(E_x, E_y, E_t)` from the 2x2x2 cube stencil.
fn derivatives(a: &Frame, b: &Frame) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (h, w) = a.shape();
    let (ea, eb) = (a.as_slice(), b.as_slice());
    let n = h * w;
    let (mut ex, mut ey, mut et) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
    for c in 0..w as isize {
        for r in 0..h as isize {
            let g = |e: &[f64], dr: isize, dc: isize| px(e, h, w, r + dr, c + dc);
            let i = c as usize * h + r as usize;
            ex[i] = 0.25
                * (g(ea, 0, 1) - g(ea, 0, 0) + g(ea, 1, 1) - g(ea, 1, 0) + g(eb, 0, 1)
                    - g(eb, 0, 0)
                    + g(eb, 1, 1)
                    - g(eb, 1, 0));
            ey[i] = 0.25
                * (g(ea, 1, 0) - g(ea, 0, 0) + g(ea, 1, 1) - g(ea, 0, 1) + g(eb, 1, 0)
                    - g(eb, 0, 0)
                    + g(eb, 1, 1)
                    - g(eb, 0, 1));
            et[i] = 0.25
                * (g(eb, 0, 0) - g(ea, 0, 0) + g(eb, 1, 0) - g(ea, 1, 0) + g(eb, 0, 1)
                    - g(ea, 0, 1)
                    + g(eb, 1, 1)
                    - g(ea, 1, 1));
        }
    }
    (ex, ey, et)
}

/// Weighted 3x3 neighborhood average (edge neighbors 1/6, corners 1/12).
fn neighborhood_mean(field: &[f64], h: usize, w: usize, out: &mut [f64]) {
    for c in 0..w as isize {
        for r in 0..h as isize {
            let g = |dr: isize, dc: isize| px(field, h, w, r + dr, c + dc);
            out[c as usize * h + r as usize] = (g(-1, 0) + g(1, 0) + g(0, -1) + g(0, 1)) / 6.0
                + (g(-1, -1) + g(-1, 1) + g(1, -1) + g(1, 1)) / 12.0;
        }
    }
}

/// Classical Horn-Schunck flow from frame `a` to frame `b`.
pub fn horn_schunck_flow(a: &Frame, b: &Frame, alpha: f64, iterations: usize) -> Result<FlowField> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    let (h, w) = a.shape();
    if h * w < 2 {
        return Err(Error::InvalidInput("optical flow needs more than one pixel".into()));
    }
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(Error::InvalidInput(format!("alpha must be positive, got {alpha}")));
    }
    if iterations == 0 {
        return Err(Error::InvalidInput("at least one iteration is required".into()));
    }
    let (ex, ey, et) = derivatives(a, b);
    let flow = iterate_flow(&ex, &ey, &et, h, w, alpha, iterations);
    Ok(flow)
}

fn iterate_flow(
    ex: &[f64],
    ey: &[f64],
    et: &[f64],
    h: usize,
    w: usize,
    alpha: f64,
    iterations: usize,
) -> FlowField {
    let n = h * w;
    let a2 = alpha * alpha;
    let denom: Vec<f64> = (0..n).map(|i| a2 + ex[i] * ex[i] + ey[i] * ey[i]).collect();
    let (mut u, mut v) = (vec![0.0; n], vec![0.0; n]);
    let (mut ub, mut vb) = (vec![0.0; n], vec![0.0; n]);
    for _ in 0..iterations {
        neighborhood_mean(&u, h, w, &mut ub);
        neighborhood_mean(&v, h, w, &mut vb);
        let mut max_change = 0.0_f64;
        for i in 0..n {
            let t = (ex[i] * ub[i] + ey[i] * vb[i] + et[i]) / denom[i];
            let nu = ub[i] - ex[i] * t;
            let nv = vb[i] - ey[i] * t;
            max_change = max_change.max((nu - u[i]).abs()).max((nv - v[i]).abs());
            u[i] = nu;
            v[i] = nv;
        }
        if max_change < HS_CONVERGENCE {
            break;
        }
    }
    FlowField {
        u: Frame::from_vec(h, w, u),
        v: Frame::from_vec(h, w, v),
    }
}

/// Gradient-weighted mean of the flow over all consecutive frame pairs.
///
/// Each pixel's flow enters through its gradient outer product
/// `g g^T`: the result solves `(sum G) v = sum G f`.
pub fn estimate_uniform_wind(
    seq: &FrameSequence,
    alpha: f64,
    iterations: usize,
) -> Result<WindEstimate> {
    estimate_uniform_wind_excluding(seq, alpha, iterations, None)
}

/// [`estimate_uniform_wind`] ignoring pixels where `exclude` is true.
pub fn estimate_uniform_wind_excluding(
    seq: &FrameSequence,
    alpha: f64,
    iterations: usize,
    exclude: Option<&DMatrix<bool>>,
) -> Result<WindEstimate> {
    if let Some(m) = exclude {
        if m.shape() != seq.shape() {
            return Err(Error::ShapeMismatch(format!(
                "exclusion mask {:?} vs frames {:?}",
                m.shape(),
                seq.shape()
            )));
        }
    }
    if seq.len() < 2 {
        return Err(Error::InvalidInput("wind estimation needs at least 2 frames".into()));
    }
    let frames = seq.frames();
    let sums: Vec<Result<[f64; 5]>> = (0..frames.len() - 1)
        .into_par_iter()
        .map(|k| {
            let (a, b) = (&frames[k], &frames[k + 1]);
            let flow = horn_schunck_flow(a, b, alpha, iterations)?;
            let (ex, ey, _) = derivatives(a, b);
            let (u, v) = (flow.u.as_slice(), flow.v.as_slice());
            let mut acc = [0.0; 5];
            for i in 0..ex.len() {
                if exclude.is_some_and(|m| m.as_slice()[i]) {
                    continue;
                }
                let (gxx, gxy, gyy) = (ex[i] * ex[i], ex[i] * ey[i], ey[i] * ey[i]);
                acc[0] += gxx;
                acc[1] += gxy;
                acc[2] += gyy;
                acc[3] += gxx * u[i] + gxy * v[i];
                acc[4] += gxy * u[i] + gyy * v[i];
            }
            Ok(acc)
        })
        .collect();
    // Ordered reduction keeps the result independent of thread scheduling.
    let mut total = [0.0; 5];
    for s in sums {
        for (t, x) in total.iter_mut().zip(s?) {
            *t += x;
        }
    }
    let [gxx, gxy, gyy, bu, bv] = total;
    let det = gxx * gyy - gxy * gxy;
    let trace = gxx + gyy;
    if trace < MIN_WIND_WEIGHT || det <= 1e-12 * trace * trace {
        return Err(Error::NoWind);
    }
    let u = (gyy * bu - gxy * bv) / det;
    let v = (gxx * bv - gxy * bu) / det;
    Ok(WindEstimate::from_velocity(u, v))
}

/// Bilinear sample with zero fill outside the frame.
pub(crate) fn sample_bilinear(frame: &Frame, r: f64, c: f64) -> f64 {
    let (h, w) = frame.shape();
    let r0 = r.floor();
    let c0 = c.floor();
    let fr = r - r0;
    let fc = c - c0;
    let get = |rr: f64, cc: f64| -> f64 {
        if rr < 0.0 || cc < 0.0 || rr >= h as f64 || cc >= w as f64 {
            0.0
        } else {
            frame[(rr as usize, cc as usize)]
        }
    };
    let mut acc = (1.0 - fr) * (1.0 - fc) * get(r0, c0);
    if fc != 0.0 {
        acc += (1.0 - fr) * fc * get(r0, c0 + 1.0);
    }
    if fr != 0.0 {
        acc += fr * (1.0 - fc) * get(r0 + 1.0, c0);
        if fc != 0.0 {
            acc += fr * fc * get(r0 + 1.0, c0 + 1.0);
        }
    }
    acc
}

/// Rotation taking the wind direction to pi (leftward motion), about the frame center.
#[derive(Debug, Clone, Copy)]
struct WindRotation {
    cos: f64,
    sin: f64,
    center: (f64, f64),
}

impl WindRotation {
    fn new(wind: &WindEstimate, shape: (usize, usize)) -> Self {
        let theta = PI - wind.angle;
        Self {
            cos: theta.cos(),
            sin: theta.sin(),
            center: ((shape.0 as f64 - 1.0) / 2.0, (shape.1 as f64 - 1.0) / 2.0),
        }
    }

    /// Input `(row, col)` to output `(row, col)`.
    fn forward(&self, p: (f64, f64)) -> (f64, f64) {
        let (y, x) = (p.0 - self.center.0, p.1 - self.center.1);
        let xo = self.cos * x - self.sin * y;
        let yo = self.sin * x + self.cos * y;
        (yo + self.center.0, xo + self.center.1)
    }

    /// Output `(row, col)` to the input location it samples.
    fn inverse(&self, p: (f64, f64)) -> (f64, f64) {
        let (y, x) = (p.0 - self.center.0, p.1 - self.center.1);
        let xs = self.cos * x + self.sin * y;
        let ys = -self.sin * x + self.cos * y;
        (ys + self.center.0, xs + self.center.1)
    }

    fn apply(&self, frame: &Frame) -> Frame {
        let (h, w) = frame.shape();
        Frame::from_fn(h, w, |r, c| {
            let (sr, sc) = self.inverse((r as f64, c as f64));
            sample_bilinear(frame, sr, sc)
        })
    }
}

/// Rotates frames (and the disk center) so the wind blows right to left.
pub fn rotate_to_wind_frame(
    seq: &FrameSequence,
    wind: &WindEstimate,
    disk: &SolarDiskMask,
) -> Result<(FrameSequence, SolarDiskMask, WindEstimate)> {
    if disk.shape() != seq.shape() {
        return Err(Error::ShapeMismatch("disk mask does not match frames".into()));
    }
    if !(wind.speed >= 0.0 && wind.angle.is_finite()) {
        return Err(Error::InvalidInput("invalid wind estimate".into()));
    }
    let rot = WindRotation::new(wind, seq.shape());
    let frames: Vec<Frame> = seq.frames().par_iter().map(|f| rot.apply(f)).collect();
    let rotated = FrameSequence::from_clamped(frames, seq.dt())?;
    let center = rot.forward(disk.center());
    let disk = disk.with_center(center, seq.shape()).map_err(|_| {
        Error::InvalidInput("solar disk rotates out of the frame".into())
    })?;
    Ok((
        rotated,
        disk,
        WindEstimate {
            speed: wind.speed,
            angle: PI,
        },
    ))
}

/// Wind-frame sequence restricted to the columns upwind of the sun.
#[derive(Debug, Clone)]
pub struct UpwindCrop {
    pub seq: FrameSequence,
    /// Column of the full wind-frame image where cropped column 0 sits.
    pub col_offset: usize,
}

impl UpwindCrop {
    /// Cropped width `w`.
    pub fn width(&self) -> usize {
        self.seq.width()
    }

    /// Full-frame column of cropped column `c`.
    pub fn to_full_col(&self, c: usize) -> usize {
        c + self.col_offset
    }
}

pub fn crop_upwind(seq: &FrameSequence, disk: &SolarDiskMask) -> Result<UpwindCrop> {
    crop_upwind_with_margin(seq, disk, DEFAULT_CROP_MARGIN)
}

/// Keeps columns from `ceil(disk col + radius) + margin` to the right edge.
pub fn crop_upwind_with_margin(
    seq: &FrameSequence,
    disk: &SolarDiskMask,
    margin: usize,
) -> Result<UpwindCrop> {
    if disk.shape() != seq.shape() {
        return Err(Error::ShapeMismatch("disk mask does not match frames".into()));
    }
    let start = (disk.center().1 + disk.radius()).ceil().max(0.0) as usize + margin;
    let w = seq.width();
    if start >= w {
        return Err(Error::EmptyUpwind);
    }
    let frames = seq
        .frames()
        .iter()
        .map(|f| f.columns(start, w - start).into_owned())
        .collect();
    Ok(UpwindCrop {
        seq: FrameSequence::new(frames, seq.dt())?,
        col_offset: start,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blob(h: usize, w: usize, r0: f64, c0: f64, sigma: f64) -> Frame {
        Frame::from_fn(h, w, |r, c| {
            let d2 = (r as f64 - r0).powi(2) + (c as f64 - c0).powi(2);
            0.8 * (-d2 / (2.0 * sigma * sigma)).exp()
        })
    }

    #[test]
    fn no_motion_gives_zero_flow() {
        let a = blob(20, 20, 10.0, 10.0, 3.0);
        let f = horn_schunck_flow(&a, &a, 1.0, 50).unwrap();
        assert!(f.u.amax() < 1e-10 && f.v.amax() < 1e-10);
    }

    #[test]
    fn uniform_frames_give_zero_flow() {
        let a = Frame::from_element(10, 10, 0.4);
        let b = Frame::from_element(10, 10, 0.4);
        let f = horn_schunck_flow(&a, &b, 1.0, 10).unwrap();
        assert_eq!(f.u.amax(), 0.0);
    }

    #[test]
    fn one_pixel_shift_right() {
        let a = blob(40, 40, 20.0, 18.0, 5.0);
        let b = blob(40, 40, 20.0, 19.0, 5.0);
        let f = horn_schunck_flow(&a, &b, 0.05, 2000).unwrap();
        // Mean over the textured region.
        let (mut su, mut sv, mut n) = (0.0, 0.0, 0.0);
        for r in 0..40 {
            for c in 0..40 {
                if a[(r, c)] > 0.2 {
                    su += f.u[(r, c)];
                    sv += f.v[(r, c)];
                    n += 1.0;
                }
            }
        }
        let (mu, mv) = (su / n, sv / n);
        assert!((mu - 1.0).abs() < 0.1, "mean u {mu}");
        assert!(mv.abs() < 0.1, "mean v {mv}");
    }

    #[test]
    fn flow_input_validation() {
        let a = Frame::zeros(1, 1);
        assert!(horn_schunck_flow(&a, &a, 1.0, 1).is_err());
        let b = Frame::zeros(3, 3);
        assert!(horn_schunck_flow(&b, &b, 0.0, 1).is_err());
        assert!(horn_schunck_flow(&b, &b, 1.0, 0).is_err());
        assert!(horn_schunck_flow(&b, &Frame::zeros(3, 4), 1.0, 1).is_err());
    }

    #[test]
    fn static_sequence_has_no_wind() {
        let seq = FrameSequence::new(vec![Frame::zeros(8, 8); 3], 1.0).unwrap();
        assert!(matches!(estimate_uniform_wind(&seq, 1.0, 10), Err(Error::NoWind)));
    }

    #[test]
    fn wind_angle_convention() {
        let w = WindEstimate::from_velocity(-0.5, -0.0);
        assert_eq!(w.angle, PI);
        assert!((w.speed - 0.5).abs() < 1e-15);
        let (u, v) = WindEstimate::from_velocity(0.0, 1.0).velocity();
        assert!(u.abs() < 1e-15 && (v - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rotation_by_pi_is_identity() {
        let f = blob(15, 21, 4.0, 13.0, 2.0);
        let seq = FrameSequence::new(vec![f.clone(), f], 1.0).unwrap();
        let disk = SolarDiskMask::new((7.0, 3.0), 2.0, seq.shape()).unwrap();
        let wind = WindEstimate { speed: 1.0, angle: PI };
        let (out, d2, w2) = rotate_to_wind_frame(&seq, &wind, &disk).unwrap();
        for (a, b) in seq.frames().iter().zip(out.frames()) {
            assert!((a - b).amax() < 1e-12);
        }
        assert_eq!(d2.center(), disk.center());
        assert_eq!(w2.angle, PI);
    }

    #[test]
    fn downward_wind_rotates_quarter_turn() {
        let (h, w) = (31, 31);
        let f = blob(h, w, 8.0, 20.0, 1.5);
        let seq = FrameSequence::new(vec![f], 1.0).unwrap();
        let disk = SolarDiskMask::new((15.0, 15.0), 2.0, (h, w)).unwrap();
        let wind = WindEstimate { speed: 1.0, angle: PI / 2.0 };
        let (out, d2, _) = rotate_to_wind_frame(&seq, &wind, &disk).unwrap();
        // theta = pi/2: offset (x, y) = (5, -7) maps to (x', y') = (7, 5).
        let expected = (15.0 + 5.0, 15.0 + 7.0);
        let g = out.frame(0);
        let (mut best, mut at) = (f64::MIN, (0, 0));
        for r in 0..h {
            for c in 0..w {
                if g[(r, c)] > best {
                    best = g[(r, c)];
                    at = (r, c);
                }
            }
        }
        assert!((at.0 as f64 - expected.0).abs() <= 0.5 && (at.1 as f64 - expected.1).abs() <= 0.5);
        let (cr, cc) = d2.center();
        assert!((cr - 15.0).abs() < 1e-9 && (cc - 15.0).abs() < 1e-9);
    }

    #[test]
    fn rotated_velocity_points_left() {
        let wind = WindEstimate::from_velocity(0.3, -0.4);
        let rot = WindRotation::new(&wind, (11, 11));
        let (u, v) = wind.velocity();
        let p = rot.forward((5.0 + v, 5.0 + u));
        assert!((p.0 - 5.0).abs() < 1e-12);
        assert!((p.1 - (5.0 - 0.5)).abs() < 1e-12);
    }

    #[test]
    fn crop_arithmetic() {
        let seq = FrameSequence::new(vec![Frame::zeros(20, 100); 2], 1.0).unwrap();
        let disk = SolarDiskMask::new((10.0, 10.0), 5.0, (20, 100)).unwrap();
        let crop = crop_upwind(&seq, &disk).unwrap();
        assert_eq!(crop.width(), 83);
        assert_eq!(crop.col_offset, 17);
        assert_eq!(crop.width() + crop.col_offset, 100);
        let edge = SolarDiskMask::new((10.0, 98.0), 5.0, (20, 100)).unwrap();
        assert!(matches!(crop_upwind(&seq, &edge), Err(Error::EmptyUpwind)));
    }
}

//! Snapshot matrices, proper orthogonal decomposition and dynamic mode
//! decomposition.
//!
//! A [`SnapshotMatrix`] holds one flattened frame per column. [`compute_pod`]
//! is its economy SVD. [`compute_dmd`] fits a reduced linear time-step
//! operator to consecutive column pairs and exposes the result as complex
//! exponentials that can be evaluated at any future time.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::linalg::{complex_pinv_solve, real_eigen, thin_svd, to_complex};
use crate::sequence::{Frame, FrameSequence};

/// Relative singular-value floor below which `Sigma_r` is considered singular.
pub const TRUNCATION_GUARD: f64 = 1e-12;

/// Relative tolerance used when applying the pseudoinverse of the mode matrix.
const PINV_RTOL: f64 = 1e-12;

/// Space x time data matrix, one flattened frame per column.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotMatrix {
    data: DMatrix<f64>,
    dt: f64,
    height: usize,
    width: usize,
    levels: usize,
}

impl SnapshotMatrix {
    /// Wraps `data` whose rows are the column-stacked pixels of `height x width` frames.
    pub fn new(data: DMatrix<f64>, dt: f64, height: usize, width: usize) -> Result<Self> {
        if height * width != data.nrows() {
            return Err(Error::ShapeMismatch(format!(
                "{} rows cannot hold {height}x{width} frames",
                data.nrows()
            )));
        }
        Self::with_levels(data, dt, height, width, 0)
    }

    /// Non-image data: each row is one state element.
    pub fn from_matrix(data: DMatrix<f64>, dt: f64) -> Result<Self> {
        let n = data.nrows();
        Self::new(data, dt, n, 1)
    }

    fn with_levels(
        data: DMatrix<f64>,
        dt: f64,
        height: usize,
        width: usize,
        levels: usize,
    ) -> Result<Self> {
        if data.nrows() == 0 || data.ncols() == 0 {
            return Err(Error::InvalidInput("snapshot matrix must be non-empty".into()));
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("snapshot matrix"));
        }
        Ok(Self {
            data,
            dt,
            height,
            width,
            levels,
        })
    }

    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    /// State dimension `N` (including stacked copies when augmented).
    pub fn nrows(&self) -> usize {
        self.data.nrows()
    }

    /// Number of time samples `M`.
    pub fn ncols(&self) -> usize {
        self.data.ncols()
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    /// Number of shift-stacking levels applied to the source frames.
    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Rows belonging to the un-shifted (physical) block.
    pub fn physical_rows(&self) -> usize {
        self.height * self.width
    }

    /// Sample time of column `k` (zero-based).
    pub fn time_of(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    /// Column `k` folded back into a `height x width` frame.
    pub fn frame(&self, k: usize) -> Frame {
        let col = self.data.column(k);
        Frame::from_column_slice(self.height, self.width, &col.as_slice()[..self.physical_rows()])
    }

    pub fn into_data(self) -> DMatrix<f64> {
        self.data
    }
}

/// Stacks each frame's pixel columns end-to-end into one column per frame.
pub fn build_snapshot_matrix(seq: &FrameSequence) -> Result<SnapshotMatrix> {
    snapshot_matrix_from_frames(seq.frames(), seq.dt())
}

/// Same as [`build_snapshot_matrix`] for a bare slice of frames.
pub fn snapshot_matrix_from_frames(frames: &[Frame], dt: f64) -> Result<SnapshotMatrix> {
    let first = frames.first().ok_or(Error::EmptySequence)?;
    let (h, w) = first.shape();
    let n = h * w;
    let mut data = DMatrix::<f64>::zeros(n, frames.len());
    for (k, f) in frames.iter().enumerate() {
        if f.shape() != (h, w) {
            return Err(Error::ShapeMismatch(format!(
                "frame {k} is {:?}, expected {:?}",
                f.shape(),
                (h, w)
            )));
        }
        // Column-major storage is already the column-stacked flattening.
        data.column_mut(k).copy_from_slice(f.as_slice());
    }
    SnapshotMatrix::new(data, dt, h, w)
}

/// Economy SVD of a snapshot matrix.
#[derive(Debug, Clone)]
pub struct PodResult {
    /// `N x p`, orthonormal columns.
    pub spatial_modes: DMatrix<f64>,
    /// Length `p`, nonincreasing.
    pub singular_values: DVector<f64>,
    /// `M x p`, orthonormal columns.
    pub temporal_modes: DMatrix<f64>,
    height: usize,
    width: usize,
}

impl PodResult {
    pub fn rank_capacity(&self) -> usize {
        self.singular_values.len()
    }

    /// Sum of the first `k` rank-one terms `sigma_i u_i v_i^T`.
    pub fn reconstruct(&self, k: usize) -> DMatrix<f64> {
        let k = k.min(self.rank_capacity());
        let u = self.spatial_modes.columns(0, k);
        let v = self.temporal_modes.columns(0, k);
        let s = DMatrix::from_diagonal(&self.singular_values.rows(0, k).into_owned());
        u * s * v.transpose()
    }

    /// The rank-one term of mode `k` (zero-based).
    pub fn mode_term(&self, k: usize) -> DMatrix<f64> {
        self.spatial_modes.column(k) * self.temporal_modes.column(k).transpose()
            * self.singular_values[k]
    }

    /// Spatial mode `k` unfolded to a frame, weighted by its singular value
    /// and the mean of its temporal mode. The product is invariant to the
    /// SVD sign ambiguity.
    pub fn mean_weighted_mode_image(&self, k: usize) -> Frame {
        let v = self.temporal_modes.column(k);
        let mean = v.mean();
        let u = self.spatial_modes.column(k) * (self.singular_values[k] * mean);
        let n = self.height * self.width;
        Frame::from_column_slice(self.height, self.width, &u.as_slice()[..n])
    }

    pub fn frame_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

pub fn compute_pod(x: &SnapshotMatrix) -> Result<PodResult> {
    let svd = thin_svd(x.data())?;
    Ok(PodResult {
        spatial_modes: svd.u,
        singular_values: svd.s,
        temporal_modes: svd.v,
        height: x.height,
        width: x.width,
    })
}

/// Shift-stacks `levels` time-delayed copies under each snapshot.
///
/// Output column `k` is `(x_k; x_{k+1}; ...; x_{k+levels})`, so the result has
/// `(levels + 1) N` rows and `M - levels` columns.
pub fn augment_snapshots(x: &SnapshotMatrix, levels: usize) -> Result<SnapshotMatrix> {
    if levels == 0 {
        return Ok(x.clone());
    }
    let m = x.ncols();
    if m <= levels + 1 {
        return Err(Error::InvalidInput(format!(
            "{m} columns are too few for {levels} augmentation levels"
        )));
    }
    let n = x.nrows();
    let cols = m - levels;
    let mut data = DMatrix::<f64>::zeros(n * (levels + 1), cols);
    for k in 0..cols {
        for l in 0..=levels {
            data.view_mut((l * n, k), (n, 1))
                .copy_from(&x.data.column(k + l));
        }
    }
    SnapshotMatrix::with_levels(data, x.dt, x.height, x.width, x.levels + levels)
}

/// Fitted DMD: `x(t) = Phi exp(Omega t) b`.
#[derive(Debug, Clone)]
pub struct DmdModel {
    /// Physical-block modes `Phi`, `N x r`.
    pub modes: DMatrix<Complex64>,
    /// Discrete-time eigenvalues `lambda_i`.
    pub eigenvalues: DVector<Complex64>,
    /// Continuous-time exponents `omega_i = log(lambda_i) / dt`.
    pub exponents: DVector<Complex64>,
    /// Amplitudes `b = Phi^+ x_0`.
    pub amplitudes: DVector<Complex64>,
    pub dt: f64,
    /// Whether the source snapshots were shift-stacked.
    pub augmented: bool,
    height: usize,
    width: usize,
    image_valued: bool,
}

impl DmdModel {
    pub fn order(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn state_dim(&self) -> usize {
        self.modes.nrows()
    }

    pub fn frame_shape(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    /// Mark the model as producing image data, so evaluations are clamped to `[0, 1]`.
    pub fn with_image_valued(mut self, image_valued: bool) -> Self {
        self.image_valued = image_valued;
        self
    }

    pub fn is_image_valued(&self) -> bool {
        self.image_valued
    }

    /// Largest `Re(omega_i) * t` among the modes.
    pub fn max_growth_exponent(&self, t: f64) -> f64 {
        self.exponents
            .iter()
            .zip(self.eigenvalues.iter())
            .filter(|(_, l)| l.norm() > 0.0)
            .map(|(w, _)| w.re * t)
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

/// `log` on the principal branch, `Im in (-pi, pi]`.
pub fn principal_log(z: Complex64) -> Complex64 {
    if z.norm() == 0.0 {
        return Complex64::new(f64::NEG_INFINITY, 0.0);
    }
    let mut l = z.ln();
    if l.im <= -std::f64::consts::PI {
        l.im = std::f64::consts::PI;
    }
    l
}

/// Number of singular values of `X_1` (after augmentation) above
/// `rel_tol * sigma_1`, capped at `requested` and at the shape limit.
pub fn admissible_order(
    x: &SnapshotMatrix,
    requested: usize,
    augment_levels: usize,
    rel_tol: f64,
) -> Result<usize> {
    let aug = augment_snapshots(x, augment_levels)?;
    if aug.ncols() < 2 {
        return Err(Error::InvalidInput("DMD needs at least two snapshots".into()));
    }
    let x1 = aug.data.columns(0, aug.ncols() - 1).into_owned();
    let svd = thin_svd(&x1)?;
    let limit = aug.nrows().min(aug.ncols() - 1);
    Ok(crate::linalg::numerical_rank(&svd.s, rel_tol.max(TRUNCATION_GUARD))
        .min(requested)
        .min(limit))
}

/// Order-`r` DMD of `x`, optionally shift-stacked `augment_levels` deep first.
pub fn compute_dmd(x: &SnapshotMatrix, r: usize, augment_levels: usize) -> Result<DmdModel> {
    if r == 0 {
        return Err(Error::InvalidInput("DMD order must be at least 1".into()));
    }
    let aug = augment_snapshots(x, augment_levels)?;
    let cols = aug.ncols();
    if cols < 2 {
        return Err(Error::InvalidInput("DMD needs at least two snapshots".into()));
    }
    let available = aug.nrows().min(cols - 1);
    if r > available {
        return Err(Error::RankTooLarge {
            requested: r,
            available,
        });
    }

    let x1 = aug.data.columns(0, cols - 1).into_owned();
    let x2 = aug.data.columns(1, cols - 1).into_owned();
    let svd = thin_svd(&x1)?;
    let top = svd.s[0];
    let guard = top * TRUNCATION_GUARD;
    for k in 0..r {
        if !(svd.s[k] > guard) || svd.s[k] == 0.0 {
            return Err(Error::IllConditioned {
                index: k + 1,
                value: svd.s[k],
                guard,
            });
        }
    }

    let u_r = svd.u.columns(0, r);
    let v_r = svd.v.columns(0, r);
    let s_inv = DMatrix::from_diagonal(&svd.s.rows(0, r).map(|s| 1.0 / s));
    // X2 V_r Sigma_r^-1 is reused for both the reduced operator and the modes.
    let x2_v_sinv = &x2 * v_r * s_inv;
    let a_tilde = u_r.transpose() * &x2_v_sinv;

    let (eigenvalues, w) = real_eigen(&a_tilde);
    let phi_full = to_complex(&x2_v_sinv) * w;

    let x0 = aug.data.column(0).map(|v| Complex64::new(v, 0.0));
    let amplitudes = complex_pinv_solve(&phi_full, &x0, PINV_RTOL);

    let exponents = eigenvalues.map(|l| principal_log(l) / x.dt);
    let n = x.physical_rows() * (x.levels + 1);
    let modes = phi_full.rows(0, n).into_owned();

    Ok(DmdModel {
        modes,
        eigenvalues,
        exponents,
        amplitudes,
        dt: x.dt,
        augmented: aug.levels > x.levels,
        height: x.height,
        width: x.width,
        image_valued: false,
    })
}

/// Relative one-step prediction residual `||X_2 - U_r A_r U_r^T X_1|| / ||X_2||`
/// on the physical rows, for the projected operator of an order-`r` fit.
pub fn one_step_residual(x: &SnapshotMatrix, r: usize, augment_levels: usize) -> Result<f64> {
    let aug = augment_snapshots(x, augment_levels)?;
    let cols = aug.ncols();
    if cols < 2 {
        return Err(Error::InvalidInput("need at least two snapshots".into()));
    }
    let available = aug.nrows().min(cols - 1);
    if r == 0 || r > available {
        return Err(Error::RankTooLarge {
            requested: r,
            available,
        });
    }
    let x1 = aug.data.columns(0, cols - 1).into_owned();
    let x2 = aug.data.columns(1, cols - 1).into_owned();
    let svd = thin_svd(&x1)?;
    let u_r = svd.u.columns(0, r).into_owned();
    let v_r = svd.v.columns(0, r);
    let s_inv = DMatrix::from_diagonal(&svd.s.rows(0, r).map(|s| 1.0 / s));
    let a_tilde = u_r.transpose() * &x2 * v_r * s_inv;
    let predicted = &u_r * a_tilde * (u_r.transpose() * &x1);
    let n = x.nrows();
    let diff = x2.rows(0, n) - predicted.rows(0, n);
    Ok(diff.norm() / x2.rows(0, n).norm().max(f64::MIN_POSITIVE))
}

/// Complex state `Phi diag(exp(omega_i t)) b` before the real readout.
fn evaluate_complex(model: &DmdModel, t: f64) -> Result<DVector<Complex64>> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(Error::InvalidInput(format!("evaluation time must be >= 0, got {t}")));
    }
    let mut coeffs = DVector::<Complex64>::zeros(model.order());
    for i in 0..model.order() {
        let growth = if model.eigenvalues[i].norm() == 0.0 {
            if t == 0.0 {
                Complex64::new(1.0, 0.0)
            } else {
                Complex64::new(0.0, 0.0)
            }
        } else {
            let z = model.exponents[i] * t;
            if !z.re.is_finite() || !z.im.is_finite() || z.re > 700.0 {
                return Err(Error::EvaluationOverflow { t });
            }
            z.exp()
        };
        coeffs[i] = growth * model.amplitudes[i];
    }
    let x = &model.modes * coeffs;
    if x.iter().any(|c| !c.re.is_finite()) {
        return Err(Error::EvaluationOverflow { t });
    }
    Ok(x)
}

/// Real part of the model state at time `t` (seconds since the first snapshot).
pub fn evaluate_dmd(model: &DmdModel, t: f64) -> Result<DVector<f64>> {
    let x = evaluate_complex(model, t)?;
    let residue = x.iter().map(|c| c.im.abs()).fold(0.0, f64::max);
    if residue > 1e-8 {
        log::debug!("DMD evaluation at t={t} has imaginary residue {residue:e}");
    }
    let mut out = x.map(|c| c.re);
    if model.image_valued {
        out.apply(|v| *v = v.clamp(0.0, 1.0));
    }
    Ok(out)
}

/// Largest imaginary component of the evaluation at `t`.
pub fn imaginary_residue(model: &DmdModel, t: f64) -> Result<f64> {
    let x = evaluate_complex(model, t)?;
    Ok(x.iter().map(|c| c.im.abs()).fold(0.0, f64::max))
}

/// Model evaluated at `t = k dt` for `k = 0..steps`.
pub fn reconstruct_series(model: &DmdModel, steps: usize) -> Result<SnapshotMatrix> {
    if steps == 0 {
        return Err(Error::InvalidInput("steps must be at least 1".into()));
    }
    let n = model.state_dim();
    let mut data = DMatrix::<f64>::zeros(n, steps);
    for k in 0..steps {
        let col = evaluate_dmd(model, k as f64 * model.dt)?;
        data.set_column(k, &col);
    }
    let (h, w) = if model.height * model.width == n {
        (model.height, model.width)
    } else {
        (n, 1)
    };
    SnapshotMatrix::new(data, model.dt, h, w)
}

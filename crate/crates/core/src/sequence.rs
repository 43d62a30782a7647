//! Time-ordered grayscale frames.
//!
//! Pixel values are cloudiness in `[0, 1]`: 1 is bright/cloudy, 0 is dark/clear.
//! Frames are stored as `H x W` column-major matrices, so a frame's backing
//! slice is already its column-stacked flattening.

use nalgebra::DMatrix;

use crate::error::{Error, Result};

pub type Frame = DMatrix<f64>;

#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence {
    frames: Vec<Frame>,
    dt: f64,
}

impl FrameSequence {
    /// Validates shape agreement, `dt > 0` and finite pixel values in `[0, 1]`.
    pub fn new(frames: Vec<Frame>, dt: f64) -> Result<Self> {
        let first = frames.first().ok_or(Error::EmptySequence)?;
        let shape = first.shape();
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidInput(format!("dt must be positive, got {dt}")));
        }
        if shape.0 == 0 || shape.1 == 0 {
            return Err(Error::InvalidInput("frames must be non-empty".into()));
        }
        for (k, f) in frames.iter().enumerate() {
            if f.shape() != shape {
                return Err(Error::ShapeMismatch(format!(
                    "frame {k} is {:?}, expected {:?}",
                    f.shape(),
                    shape
                )));
            }
            if f.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite("frame"));
            }
            if f.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(Error::InvalidInput(format!(
                    "frame {k} has pixel values outside [0, 1]"
                )));
            }
        }
        Ok(Self { frames, dt })
    }

    /// Builds a sequence from unclamped data, clamping every pixel into `[0, 1]`.
    pub fn from_clamped(mut frames: Vec<Frame>, dt: f64) -> Result<Self> {
        for f in &mut frames {
            f.apply(|v| *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) });
        }
        Self::new(frames, dt)
    }

    pub fn frames(&self) -> &[Frame] {
        &self.frames
    }

    pub fn frame(&self, k: usize) -> &Frame {
        &self.frames[k]
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn height(&self) -> usize {
        self.frames[0].nrows()
    }

    pub fn width(&self) -> usize {
        self.frames[0].ncols()
    }

    /// `(height, width)`.
    pub fn shape(&self) -> (usize, usize) {
        self.frames[0].shape()
    }

    /// Frames `start..start + len`, sharing `dt`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.len() {
            return Err(Error::InvalidInput(format!(
                "window {start}..{} outside sequence of length {}",
                start + len,
                self.len()
            )));
        }
        Ok(Self {
            frames: self.frames[start..start + len].to_vec(),
            dt: self.dt,
        })
    }

    /// Applies `f` to every frame and clamps the result into `[0, 1]`.
    pub fn map_frames<F>(&self, f: F) -> Result<Self>
    where
        F: Fn(&Frame) -> Frame,
    {
        Self::from_clamped(self.frames.iter().map(f).collect(), self.dt)
    }

    pub fn into_frames(self) -> Vec<Frame> {
        self.frames
    }
}

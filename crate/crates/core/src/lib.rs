//! Reduced-order modeling of sky-image sequences.
//!
//! The crate provides proper orthogonal decomposition (POD) and dynamic mode
//! decomposition (DMD) with shift-stack augmentation, and uses them to
//! forecast the clear-sky index `K` of the solar disk from a grayscale
//! sky-camera sequence. A frozen-cloud optical-flow forecast is computed
//! alongside as a baseline.
//!
//! Module map:
//!
//! - [`decomposition`]: snapshot matrices, POD, DMD.
//! - [`preprocessing`]: solar-disk location and removal, column glare removal.
//! - [`motion`]: Horn-Schunck flow, uniform wind, wind-frame rotation and cropping.
//! - [`forecast`]: inset selection, per-inset DMD and frozen forecasts, the full pipeline.
//! - [`synth`]: synthetic scenarios with closed-form ground truth.
//! - [`cli_io`]: image loading, run configuration, reports and commands.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli_io;
pub mod decomposition;
pub mod error;
pub mod forecast;
mod linalg;
mod regions;
pub mod motion;
pub mod preprocessing;
pub mod sequence;
pub mod synth;

pub use decomposition::{
    augment_snapshots, build_snapshot_matrix, compute_dmd, compute_pod, evaluate_dmd,
    reconstruct_series, DmdModel, PodResult, SnapshotMatrix,
};
pub use error::{Error, Result};
pub use forecast::{CsiSeries, ForecastRecord, Inset, Method};
pub use motion::{FlowField, WindEstimate};
pub use preprocessing::{GlareProfile, SolarDiskMask};
pub use sequence::{Frame, FrameSequence};

//! Sparse-view SPECT toolkit.
//!
//! A per-scan coordinate network ("field") is fitted to the measured
//! projection views of a SPECT acquisition and evaluated at the angles that
//! were skipped. The crate also carries everything needed to check whether
//! that helps: a digital hot-sphere phantom, a rotation-based system model
//! with attenuation and depth-dependent blur, a multi-window acquisition
//! simulator, a linear-interpolation baseline, OSEM with triple-energy-window
//! scatter estimates, and the usual quantitative metrics.
//!
//! Pipeline order mirrors the module order below:
//! [`phantom`] → [`simulate`] → [`field`] / [`interp`] → [`recon`] → [`metrics`],
//! orchestrated by [`pipeline`] and persisted through [`container`].

pub mod container;
pub mod error;
pub mod field;
pub mod geometry;
pub mod interp;
pub mod metrics;
pub mod phantom;
pub mod pipeline;
pub mod projector;
pub mod recon;
pub mod simulate;

mod par;

pub use error::{Error, Result};
pub use geometry::{CoordinateSample, Orbit, ScanGeometry, ViewSplit};
pub use phantom::{ImageVolume, PhantomSpec, VoiMask, VoiRole};
pub use projector::SystemModel;
pub use simulate::{ProjectionKind, ProjectionStack, ScatterParams};

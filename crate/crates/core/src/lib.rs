//! Gaussian-covering segmentation of 3D volumes.
//!
//! Two model families segment the same volume:
//!
//! * the **marginal** family fits a 1D Gaussian mixture to the voxel
//!   intensity distribution by EM, picks the component count by BIC, and
//!   labels each voxel by maximum posterior ([`mixture`]);
//! * the **wavelet** family decomposes the volume with the undecimated
//!   B3-spline starlet transform ([`starlet`]) and runs k-means on the
//!   per-voxel vector of scale coefficients ([`kmeans`]).
//!
//! BIC only ranks models inside one family. Across families the two
//! segmentations are compared by the closed-form Renyi quadratic entropy of
//! their Gaussian coverings ([`entropy`], [`pipeline`]).

pub mod entropy;
pub mod error;
pub mod fits;
pub mod kmeans;
pub mod mixture;
pub mod pipeline;
pub(crate) mod par;
pub mod starlet;
pub mod synth;
pub mod volume;

pub use error::{Error, Result};
pub use volume::{ClusterSummary, Dims, LabelVolume, ValueKind, Volume};

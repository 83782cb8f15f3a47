//! Localization of an unknown number of axis-aligned anomalous patches in
//! d-dimensional lattice data with spatially dependent noise.
//!
//! The crate is organised bottom-up:
//!
//! - [`lattice`]: dense grids, half-open rectangles, prefix sums and the
//!   mean-contrast statistic every estimator maximizes.
//! - [`simulate`]: noise-field generators (iid, SAR, linear, m-dependent,
//!   max-stable) and mean-shift patch injection.
//! - [`single`]: the exhaustive least-squares patch estimator and the
//!   two-stage subsampled refinement built on top of it.
//! - [`calibrate`]: baseline mean, long-run variance, the block threshold and
//!   variograms.
//! - [`splade`]: the multi-patch pipeline (block screening, connected
//!   components, envelopes, per-region refinement).
//! - [`metrics`]: ARI, Jaccard distance and the two-sided Jaccard-Hausdorff
//!   distance between patch collections.
//! - [`io`]: the binary grid format, JSON patch documents, CSV and frame
//!   ingestion.
//! - [`bench`]: the replicate loop behind the `bench` command.
//!
//! Rectangles follow the half-open convention everywhere: a [`Rect`] with
//! corners `lo` and `hi` contains the 0-based cells `i` with
//! `lo[k] <= i[k] < hi[k]`, which is the same cell set as the 1-based
//! `{x : lo < x <= hi}`.

pub mod bench;
pub mod calibrate;
pub mod error;
pub mod io;
pub mod lattice;
pub mod metrics;
pub mod simulate;
pub mod single;
pub mod splade;

pub use error::{Error, Result};
pub use lattice::{Grid, PatchSet, Patch, PrefixSum, Rect};
pub use single::{SearchBounds, Stage1Params};
pub use splade::{Detection, SpladeConfig};

//! Causal concept localization over voxel response matrices.
//!
//! Given a target concept, the engine scores every voxel by how strongly it
//! responds to positive images and by how much of that response survives
//! two kinds of controls: semantically related negative images and
//! counterfactual edits of the positives with the concept removed. Voxels
//! whose response is specific to the concept form a candidate region, which
//! is then validated on held-out and measured data, tested against baseline
//! concepts, and classified into a final verdict together with follow-up
//! stimulus proposals.
//!
//! The crate is organized by pipeline stage:
//!
//! - [`stimulus`]: stimulus manifests and per-concept generation plans
//! - [`matrix`]: response matrices, embedding indices, normalization and the
//!   binary container format
//! - [`scoring`]: voxel and region scores, combined ranking scores
//! - [`region`]: candidate region construction
//! - [`retrieval`]: embedding retrieval, verification and coverage accounting
//! - [`stats`]: empirical significance testing
//! - [`verdict`]: evidence assessment, verdict quadrants and follow-up plans
//! - [`clients`]: model client wire contract, HTTP adapter, stubs and a
//!   loopback server
//! - [`simulator`]: synthetic ground-truth worlds
//! - [`pipeline`]: end-to-end orchestration and report export
//!
//! Runnable walkthroughs for each capability live in the crate's
//! `examples/` directory.

pub mod clients;
pub mod error;
pub mod matrix;
pub mod pipeline;
pub mod pool;
pub mod region;
pub mod retrieval;
pub mod rng;
pub mod scoring;
pub mod simulator;
pub mod stats;
pub mod stimulus;
pub mod verdict;

#[doc(hidden)]
pub mod cli;

pub use error::{Error, Result};
pub use matrix::{EmbeddingIndex, NormalizationStats, Provenance, ResponseMatrix};
pub use region::{Region, RegionMode};
pub use scoring::{Component, VoxelScoreTable};
pub use stimulus::{GenerationPlan, Role, Source, Split, StimulusImage, StimulusManifest};

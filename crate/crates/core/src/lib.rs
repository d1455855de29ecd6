//! Desk-scale segmentation engine for neural-Gaussian scenes.
//!
//! The pipeline has three training stages:
//!
//! 1. [`contrastive`]: instance and hierarchical feature fields distilled from
//!    per-view binary masks ([`masks`]) through the rasterizer ([`raster`]).
//! 2. [`supergaussian`]: anchors clustered into Super-Gaussians by a learned
//!    association network, then grouped into instances and parts.
//! 3. [`language`]: per-Super-Gaussian language features distilled from
//!    per-instance-mask embeddings, queried by text or by click.
//!
//! [`evaluation`] scores semantic maps and object selections, and
//! [`pipeline`] wires the stages to the on-disk dataset layout.

pub mod adam;
pub mod codec;
pub mod contrastive;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod formats;
pub mod language;
pub mod masks;
pub mod mlp;
pub mod pipeline;
pub mod raster;
pub mod scene;
pub mod session;
pub mod supergaussian;
pub mod synthetic;

pub use error::{Error, Result};

//! Label-aware Gaussian splatting.
//!
//! Gaussians carry an integer object label next to their appearance. The
//! crate renders such scenes with a tiled rasterizer, lifts per-view 2D
//! label maps onto the Gaussians, reasons about inter-object occlusion from
//! depth, trains the scene with an image loss plus a per-object label loss,
//! and extracts single objects for novel-view rendering.

// negated float comparisons are NaN guards: `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod io;
pub mod lifting;
pub mod occlusion;
pub mod pipeline;
pub mod render;
pub mod scene;
pub mod trainer;
pub mod views;

pub use error::{Error, Result};
pub use render::{render, render_with, RenderOptions, RenderOutput, RenderSettings};
pub use scene::{Camera, DepthMap, Gaussian3D, GaussianScene, Image, Label, LabelMap, Mask, ViewRecord, UNLABELED};

//! Building blocks for referring-expression segmentation datasets over
//! aerial label rasters.
//!
//! - [`raster`]: label maps, binary masks, connected components, dilation,
//!   tiling and resampling.
//! - [`taxonomy`]: class vocabulary and category/attribute/relation rules.
//! - [`exprgen`]: template expressions (enumerate, render, parse).
//! - [`maskgen`]: ground-truth masks for an expression over a label map.
//! - [`dataset`]: triplet manifests, scene-disjoint splits, verdicts.
//! - [`metrics`]: IoU, oIoU, mIoU and Pr@θ evaluation.
//! - [`synth`]: procedural label maps for demos and tests.

pub mod dataset;
pub mod exprgen;
pub mod maskgen;
pub mod metrics;
pub mod raster;
pub mod synth;
pub mod taxonomy;

//! Cloud detection in ground-based sky images with a region-level
//! conditional random field, plus thresholding baselines, evaluation and a
//! synthetic image generator.
//!
//! The usual flow: [`pipeline::Segmentation::compute`] turns an image into
//! mean-shift regions and a site graph, [`training::train_pipeline`] fits
//! [`crfmodel::CrfParams`], and [`inference::icm_with`] labels the sites.

pub mod baselines;
pub mod cli;
pub mod crfmodel;
pub mod error;
pub mod evaluation;
pub mod imaging;
pub mod inference;
pub mod manifest;
pub mod mask;
pub mod pipeline;
pub mod raster;
pub mod regions;
pub mod synthgen;
pub mod training;

pub use crfmodel::{CrfParams, LabelConfig};
pub use error::{Error, Result};
pub use imaging::{FeatureImage, PixelImage};
pub use mask::{Label, Mask, MaskValue};
pub use pipeline::{detect, SegmentConfig, Segmentation};
pub use regions::{MeanShiftParams, RegionMap, SiteGraph};

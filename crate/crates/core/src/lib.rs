//! Compression toolkit for LiDAR point-cloud sequences.
//!
//! Point clouds are spherically projected onto range images and coded in
//! units of `k + 2` frames: the unit endpoints are coded independently
//! (intra), the middle frames are predicted from the decoded endpoints and
//! only the prediction residual plus a binary validity mask is transmitted.
//! Residuals can be coded by a handcrafted quantize-and-entropy-code path or
//! by a learned transform coder with a hyperprior entropy model.
//!
//! The crate is organized along the pipeline:
//!
//! * [`pointcloud`] — scan I/O and synthetic scene generation
//! * [`projection`] — range-image projection and mask extraction
//! * [`scheduler`] — grouping frames into coding units
//! * [`intra`] — intra-frame codec (clustered region means + residuals)
//! * [`predictor`] — inter-frame prediction (averaging and U-Net variants)
//! * [`entropy`] — range coder and its probability models
//! * [`residual`] — residual-frame codecs (handcrafted and learned)
//! * [`nn`] — the small differentiable compute graph behind the networks
//! * [`bitstream`] — the container file format
//! * [`metrics`] — rate/distortion measurement

pub mod bitstream;
pub mod entropy;
mod error;
pub mod intra;
pub mod metrics;
pub mod nn;
pub mod pointcloud;
pub mod predictor;
pub mod projection;
pub mod residual;
pub mod scheduler;

pub use error::{Error, Result};
pub use pointcloud::{PointCloud, SceneParams};
pub use projection::{Mask, RangeImage, SensorConfig};

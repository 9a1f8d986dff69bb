//! Joint grasp-affordance and occupancy learning from single-view depth.
//!
//! The pipeline runs procedural scenes through a depth renderer and TSDF
//! fusion into a tri-plane implicit network whose decoders predict grasp
//! quality, orientation and width at any point, plus scene occupancy.

pub mod autodiff;
pub mod bench;
pub mod detect;
pub mod error;
pub mod geom;
pub mod net;
pub mod oracle;
pub mod par;
pub mod recon;
pub mod rng;
pub mod scene;
pub mod sensor;
pub mod train;
pub mod tsdf;

pub use error::{Error, Result};

//! Continuous piecewise-affine (CPA) velocity fields and the diffeomorphisms
//! they generate, fitted to keypoints and composed into dense motion.
//!
//! Pipeline: [`tessellation`] → [`basis`] → [`field`] → [`integrate`] →
//! [`fit`] → [`dense_motion`], with [`tps`] as a thin-plate-spline baseline.

pub mod basis;
pub mod dense_motion;
pub mod error;
pub mod expm;
pub mod field;
pub mod fit;
pub mod flow;
pub mod integrate;
pub mod io;
pub mod synthetic;
pub mod tessellation;
pub mod tps;

pub use error::{CpabError, Result};

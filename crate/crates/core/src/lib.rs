pub mod autodiff;
pub mod error;

pub use error::{Error, Result};
pub mod rf;
pub mod labels;
pub mod scene;
pub mod params;
pub mod net;
pub mod losses;
pub mod divergence;
pub mod synth;
pub mod detect;
pub mod harness;

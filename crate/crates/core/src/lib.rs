pub mod dataset;
pub mod distbank;
pub mod episodic;
pub mod error;
pub mod federation;
pub mod mask;
pub mod metrics;
pub mod objectives;
pub mod segnet;
pub mod spectral;
pub mod synthdata;
pub mod tape;

pub use error::{Error, Result};

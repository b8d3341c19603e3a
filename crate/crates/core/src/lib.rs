pub mod augment;
pub mod error;
pub mod evalkit;
pub mod experiment;
pub mod imgeom;
pub mod nn;
pub mod segnet;
pub mod selector;
pub mod styletx;
pub mod synthdata;
pub mod trainer;

pub use error::{Error, Result};

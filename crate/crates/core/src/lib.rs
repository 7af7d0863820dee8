pub mod circuit;
pub mod coupling;
pub mod device_dd;
pub mod emfem;
pub mod error;
pub mod mesh;
pub mod pml;
pub mod portx;
pub mod reference;
pub mod solver;

pub use error::{Error, Result};

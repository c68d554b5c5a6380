pub mod design;
pub mod diagnostics;
pub mod emulator;
pub mod error;
pub mod kernel;
pub mod linalg;
pub mod matvar;
pub mod meanfn;
pub mod modelsel;
mod optim;
pub mod rdvs;
pub mod rng;
pub mod schema;
pub mod sensitivity;
pub mod simbench;

pub use error::{Error, Result};

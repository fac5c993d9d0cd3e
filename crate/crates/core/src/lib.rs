//! Pseudospectral workbench for semiclassical Schrodinger systems and a
//! Nash-Moser-Hormander solver built on top of it.

pub mod error;
pub mod par;
pub mod spectral;
pub mod system;
pub mod normal_form;
pub mod evolution;
pub mod nash_moser;
pub mod decomposition;
pub mod estimates;
pub mod experiments;

pub use error::{Error, Result};

//! Heat kernels, pullback metrics and isometric-immersion checks on model
//! spaces: circles, round spheres, Euclidean and half-spaces, products,
//! Euclidean cones and rescalings.

pub mod constructions;
pub mod error;
pub mod experiments;
pub mod heat_kernel;
pub mod model_spaces;
pub mod pullback;
pub mod quadrature;
pub mod specfun;

pub use error::{Error, Result};
pub use heat_kernel::{Certified, KernelValue, TruncationCertificate};
pub use model_spaces::{ModelSpace, Point, SpectralLevel};

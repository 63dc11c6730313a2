//! Independent component analysis by continuum GMM on empirical
//! characteristic functions.

pub mod cgmm;
pub mod ecf;
pub mod error;
pub mod estimator;
pub mod inference;
pub mod normality;
pub mod optim;
pub mod param;
pub mod quadrature;
pub mod rng;
pub mod simlab;
pub mod svar;

pub use error::{Error, Result};

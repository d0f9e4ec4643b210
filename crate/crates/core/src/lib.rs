//! Numerical laboratory for quantitative almost-periodic parabolic
//! homogenization.
//!
//! Coefficient fields live in [`apfield`], grids and the implicit step in
//! [`mesh`]. [`corrector`] and [`fluxcor`] build the regularized correctors,
//! [`smoothing`] the parabolic mollifier, and [`ivpsolve`], [`twoscale`] and
//! [`regprobe`] run the oscillatory problems and measure them.

pub mod apfield;
pub mod corrector;
pub mod domain;
pub mod error;
pub mod fluxcor;
pub mod ivpsolve;
pub mod linalg;
pub mod mesh;
pub mod regprobe;
pub mod smoothing;
pub mod twoscale;

pub use error::{Error, Result};

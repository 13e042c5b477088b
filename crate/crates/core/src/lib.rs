//! Ray-based differentiable renderer that treats 3D Gaussian primitives as
//! stochastic solids: continuous transmittance along rays, median depth with
//! closed-form gradients, training losses, and multi-view consistency
//! metrics.

pub mod depth;
pub mod eval;
pub mod geom;
pub mod grad;
pub mod img;
pub mod io;
pub mod losses;
pub mod optimize;
pub mod synth;
pub mod transmittance;

pub mod approx;
pub mod control;
pub mod env;
pub mod geom;
pub mod gradcheck;
pub mod harness;
pub mod mechanism;
pub mod physics;
pub mod rl;

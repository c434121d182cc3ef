pub mod augment;
pub mod dataset;
pub mod eval;
pub mod geometry;
pub mod imaging;
pub mod patchbank;
pub mod plane;
pub mod synth;

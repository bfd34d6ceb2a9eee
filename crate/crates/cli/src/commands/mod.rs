pub mod eval;
pub mod render;
pub mod stabilize;
pub mod synth;
pub mod train;

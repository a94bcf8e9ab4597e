pub mod eval;
pub mod info;
pub mod render;
pub mod segment;
pub mod synth_gen;

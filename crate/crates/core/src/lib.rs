pub mod audio;
pub mod checkpoint;
pub mod eval;
pub mod flow;
pub mod manifest;
pub mod model;
pub mod params;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod train;

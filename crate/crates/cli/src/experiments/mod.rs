pub mod continual;
pub mod synth2d;
pub mod fewshot;
pub mod gradcheck;

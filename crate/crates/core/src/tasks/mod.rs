//! Task distributions: 2-D loss surfaces and sine regression, plus seeded streams.

pub mod rng;
mod sine;
mod surface;

pub use rng::{split_rng, stream_id, RngState, StreamRng};
pub use sine::{
    sample_fewshot_sine_task, subinterval, subinterval_of, ContinualSineTask, FewshotEpisode, FewshotSineTask,
    SubtaskBatch, SUBTASKS,
};
pub use surface::{init_surface_point, sample_surface_task, Surface2DTask};

//! Region-normalized 6-DoF grasp detection toolkit.
//!
//! The pipeline cuts depth-adaptive patches from an RGBD frame, expresses
//! each one in a normalized grasp space centred on the patch, predicts a
//! rotation heatmap per patch and maps the decoded grasps back into the
//! camera frame. Around it sit a synthetic table-top simulator, a
//! friction-cone evaluator, a closed-loop grasping controller, dataset
//! generation and the training loss stack.

pub mod closed_loop;
pub mod codec;
pub mod dataset;
pub mod error;
pub mod evaluator;
pub mod geometry;
pub mod invariance;
pub mod io;
pub mod loss;
pub mod ngs;
pub mod patch;
pub mod pipeline;
pub mod predictor;
pub mod scene;

pub use error::{NgsError, Result};

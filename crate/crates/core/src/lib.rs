//! Hierarchical rectified Gaussian models.
//!
//! Latent features are nonnegative variables in a quadratic energy whose
//! weight matrix is block-sparse across layers and convolutional within
//! each block. MAP inference is a nonnegative QP; layerwise coordinate
//! ascent on it is a rectified CNN (one bottom-up pass) that becomes a
//! recurrent CNN with top-down feedback when more passes are unrolled.

mod binio;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod infer;
pub mod model;
pub mod pgm;
pub mod tensor;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use config::RunConfig;
pub use data::{
    generate_dataset, generate_sample, load_dataset, make_target, write_dataset, Dataset,
    DatasetSpec, Sample,
};
pub use error::{Error, Result};
pub use eval::{eval_pck, eval_visibility_pr, evaluate, EvalReport};
pub use infer::{
    coord_update_scalar, dense_coordinate_descent, layer_update, nms_group_update,
    projected_gradient, qp_converge, qp_k, qp_k_with, DenseSolution, Feedback, InferenceTrace,
    UnrollOptions,
};
pub use model::{
    check_copositive_grid, dense_expand, score, Copositivity, DenseQp, GroupShape, LayerConfig,
    RgNetwork, Score, SquareMatrix,
};
pub use tensor::{
    convolve_transposed, correlate, interlace_zeros, rectify, subsample, Dims, FilterBank, Tensor,
};
pub use train::{
    backward, finite_diff_check, sgd_step, train, Architecture, HeadBank, Model, TrainConfig,
};

//! Layers generalised over [`SimilarityKind`](crate::similarity::SimilarityKind)
//! with hand-written backward passes.

mod layers;
mod loss;
mod model;
mod simconv;

pub use layers::{flatten, maxpool2x2, maxpool2x2_backward, relu, relu_backward, BatchNorm};
pub use loss::softmax_cross_entropy;
pub use model::{Layer, Model, ModelSpec, Normalization, ParamGrad, ParamRef};
pub use simconv::{SimConv2d, SimDense};

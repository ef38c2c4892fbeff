//! Dense matrices, explicit-backward layers, losses, Adam and LR schedules.

mod gradcheck;
mod layers;
mod loss;
mod matrix;
mod optim;
mod schedule;

pub use gradcheck::{finite_diff_check, GradCheckConfig, GradCheckReport};
pub use layers::{linear, tanh, tanh_backward, HasParams, Linear, Mlp, MlpCache, Parameter};
pub use loss::{
    batch_hard_triplet, cosine_grad_wrt_first, cosine_similarity, cross_entropy, l2_normalize_backward,
    l2_normalize_rows, softmax, softmax_backward, symmetric_contrastive, NORM_EPS,
};
pub use matrix::{dot, norm, Matrix};
pub use optim::Adam;
pub use schedule::{Schedule, ScheduleKind};

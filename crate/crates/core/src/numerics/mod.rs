//! Dense arrays, reverse-mode gradients, and plain SGD.

mod array;
mod optim;
mod params;
mod tape;

pub use array::DenseArray;
pub use optim::{cosine_warmup_lr, finite_diff_grad, max_relative_error, sgd_step};
pub use params::{GradSet, ParamSet, PARAMS_FORMAT_VERSION};
pub use tape::{affine_forward, logistic, Tape, Var, PROB_EPS};

pub(crate) use params::{read_named_array, read_u32, read_u64, write_named_array};
pub(crate) use tape::bce_term;

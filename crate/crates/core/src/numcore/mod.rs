//! Dense numerics and reverse-mode differentiation for the model.

mod array;
mod gradcheck;
mod params;
mod tape;

pub use array::{cosine, dot, entropy, euclidean, matmul, norm, softmax_slice, Array};
pub use gradcheck::{analytic_gradient, check_gradients, GRAD_FLOOR, GradCheck};
pub use params::{GradientMap, Parameter, ParameterStore, Partition};
pub use tape::{sharpen_values, Activation, Bindings, Gradients, Tape, Var, KL_EPS};

//! Differentiable tensor substrate shared by every model in the crate.

mod gaussian;
mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gaussian::{gaussian_kl, reparameterize};
pub use gradcheck::{grad_check, op_grad_errors, OP_GRAD_CHECK_EPS};
pub use graph::{row_softmax, AttnSpec, Grads, Graph, Var};
pub use params::ParamStore;
pub use tensor::{Real, Tensor};

#[allow(unused_imports)]
pub(crate) use graph::{log_sum_exp, softplus};

/// Names of the differentiable operations the substrate provides.
pub fn op_set() -> &'static [&'static str] {
    &[
        "matmul",
        "add",
        "add_row",
        "mul",
        "scale",
        "offset",
        "scalar_mul",
        "tanh",
        "softplus",
        "layer_norm",
        "embedding",
        "attention",
        "softmax",
        "log_softmax",
        "cross_entropy",
        "sum",
        "mean",
        "gather_rows",
        "concat_rows",
        "reshape",
        "gaussian_kl",
    ]
}

#[cfg(test)]
mod tests;

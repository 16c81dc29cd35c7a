//! Reverse-mode automatic differentiation over small dense `f64` matrices, the recurrent
//! building blocks used by the monitor, and an AdamW optimizer.

mod gradcheck;
mod layers;
mod optim;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use layers::{
    balance_loss, balance_loss_tape, bce_prefix_loss, fsm_update, fsm_update_tape, gru_cell, gru_cell_tape,
    gumbel_softmax, gumbel_softmax_rows, sample_gumbel, GruVars, GruWeights, GumbelMode,
};
pub use optim::{adamw_step, AdamWConfig, OptimizerState};
pub use tape::{Grads, Tape, Var, BCE_EPS, NORM_EPS};
pub use tensor::{CsrMatrix, Tensor};

#[allow(unused_imports)]
pub(crate) use tape::{gelu, sigmoid, softmax_in_place, softplus};

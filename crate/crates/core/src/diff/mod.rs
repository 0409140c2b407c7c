//! Differentiable numerical kernel: parameter storage, a reverse-mode tape,
//! layers, the optimizer and finite-difference checking.

pub mod gradcheck;
pub mod layers;
pub mod optim;
pub mod params;
pub mod tape;

pub use gradcheck::{grad_check, DEFAULT_STEP};
pub use layers::{
    lstm_step, mlp_forward, softmax, squashed_gaussian, squashed_gaussian_sample, Linear, LstmCell, LstmState, Mlp,
    SquashedSample, LOG_STD_MAX, LOG_STD_MIN,
};
pub use optim::Adam;
pub use params::{Matrix, ParamGrads, ParamGroup, ParamId, ParamStore, ParamTensor};
pub use tape::{Tape, Var};

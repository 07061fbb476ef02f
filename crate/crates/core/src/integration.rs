//! Linear bridge from the visual representation into the decoder's hidden
//! space: `F = Z_v · W_pᵀ + b_p`.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, Binder};
use crate::params::{Init, ParamKind, ParamSpec};

pub const WEIGHT: &str = "projector.weight";
pub const BIAS: &str = "projector.bias";

/// `W_p: [hidden × d']` with entries N(0, 1/d'), `b_p: [hidden]` zero.
pub fn param_specs(d_visual: usize, hidden: usize) -> Vec<ParamSpec> {
    vec![
        nn::linear_spec(WEIGHT.into(), hidden, d_visual),
        ParamSpec::new(BIAS, &[hidden], ParamKind::Bias, Init::Zeros),
    ]
}

pub fn project(tape: &mut Tape, b: &mut Binder, z_v: Var) -> Result<Var> {
    let w_shape = b.store().tensor(WEIGHT)?.shape().to_vec();
    let width = tape.value(z_v).cols();
    if tape.shape(z_v).len() != 2 || width != w_shape[1] {
        return Err(Error::Shape(format!(
            "projection expects width {} but visual features are {:?}",
            w_shape[1],
            tape.shape(z_v)
        )));
    }
    let f = b.linear(tape, z_v, WEIGHT)?;
    let bias = b.param(tape, BIAS)?;
    tape.add_row(f, bias)
}

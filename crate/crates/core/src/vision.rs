//! Two-stage vision encoder.
//!
//! Patches are embedded and run through `local_layers` plain transformer
//! blocks. The residual stream after each tap layer is copied out. The final
//! local output then passes through `global_layers` blocks whose attention and
//! feed-forward updates are each scaled by `tanh(gate)`. The visual
//! representation is the global output concatenated with every tap along the
//! feature axis, giving width `d · (1 + taps)`.

use crate::autodiff::{Tape, Var};
use crate::config::VisionConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Binder};
use crate::params::{Init, ParamKind, ParamSpec};
use crate::tensor::Tensor;

pub const PATCH_WEIGHT: &str = "vision.patch_embed.weight";
pub const PATCH_BIAS: &str = "vision.patch_embed.bias";
pub const POS_EMBED: &str = "vision.pos_embed";

pub fn local_prefix(i: usize) -> String {
    format!("vision.local.{i}")
}

pub fn global_prefix(i: usize) -> String {
    format!("vision.global.{i}")
}

pub fn param_specs(cfg: &VisionConfig) -> Vec<ParamSpec> {
    let d = cfg.embed_dim;
    let mut specs = vec![
        nn::linear_spec(PATCH_WEIGHT.into(), d, cfg.patch_dim()),
        ParamSpec::new(PATCH_BIAS, &[d], ParamKind::Bias, Init::Zeros),
        ParamSpec::new(
            POS_EMBED,
            &[cfg.num_patches(), d],
            ParamKind::Positional,
            Init::Normal(0.1),
        ),
    ];
    for i in 0..cfg.local_layers {
        specs.extend(nn::block_specs(&local_prefix(i), d, cfg.ffn_mult, false, 0.0));
    }
    for i in 0..cfg.global_layers {
        specs.extend(nn::block_specs(&global_prefix(i), d, cfg.ffn_mult, true, cfg.gate_init));
    }
    specs
}

/// Splits an `[H×W×C]` image into `[N × P²C]` patch rows. Row `i` holds the
/// patch at grid cell `(i / (W/P), i % (W/P))`, flattened row-major with
/// channels innermost.
pub fn patchify(image: &Tensor, cfg: &VisionConfig) -> Result<Tensor> {
    let [h, w, c] = image.shape() else {
        return Err(Error::Shape(format!("image must be [H×W×C], got {:?}", image.shape())));
    };
    let (h, w, c) = (*h, *w, *c);
    let p = cfg.patch_size;
    if h != w || h != cfg.image_size || c != cfg.channels || p == 0 || h % p != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w}x{c} does not match configured {0}x{0}x{1} with patch {p}",
            cfg.image_size, cfg.channels
        )));
    }
    let g = w / p;
    let src = image.data();
    let mut out = Vec::with_capacity(h * w * c);
    for gy in 0..h / p {
        for gx in 0..g {
            for y in 0..p {
                let start = ((gy * p + y) * w + gx * p) * c;
                out.extend_from_slice(&src[start..start + p * c]);
            }
        }
    }
    Tensor::new(out, &[(h / p) * g, p * p * c])
}

/// Tape handles of one encoding.
#[derive(Debug, Clone)]
pub struct VisionOutput {
    pub z_v: Var,
    pub taps: Vec<Var>,
    pub z_g: Var,
}

pub fn local_encode(tape: &mut Tape, b: &mut Binder, patches: Var, cfg: &VisionConfig) -> Result<(Var, Vec<Var>)> {
    let x = b.linear(tape, patches, PATCH_WEIGHT)?;
    let bias = b.param(tape, PATCH_BIAS)?;
    let x = tape.add_row(x, bias)?;
    let pos = b.param(tape, POS_EMBED)?;
    let mut x = tape.add(x, pos)?;
    let mut taps = Vec::with_capacity(cfg.tap_layers.len());
    for i in 0..cfg.local_layers {
        x = nn::block(tape, b, x, &local_prefix(i), cfg.heads, false, false)?;
        if cfg.tap_layers.contains(&(i + 1)) {
            taps.push(x);
        }
    }
    Ok((x, taps))
}

/// Gated blocks over the local output. Taps do not enter this stage; they
/// join at the final concatenation.
pub fn global_encode(tape: &mut Tape, b: &mut Binder, z_l: Var, cfg: &VisionConfig) -> Result<Var> {
    let mut x = z_l;
    for i in 0..cfg.global_layers {
        x = nn::block(tape, b, x, &global_prefix(i), cfg.heads, false, true)?;
    }
    Ok(x)
}

pub fn encode(tape: &mut Tape, b: &mut Binder, image: &Tensor, cfg: &VisionConfig) -> Result<VisionOutput> {
    let patches = tape.constant(patchify(image, cfg)?);
    let (z_l, taps) = local_encode(tape, b, patches, cfg)?;
    let z_g = global_encode(tape, b, z_l, cfg)?;
    let z_v = if taps.is_empty() {
        z_g
    } else {
        let mut parts = vec![z_g];
        parts.extend(&taps);
        tape.concat(&parts)?
    };
    Ok(VisionOutput { z_v, taps, z_g })
}

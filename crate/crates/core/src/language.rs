//! Causal decoder with interleaved, gated cross-attention to visual features.

use crate::autodiff::{Tape, Var};
use crate::config::LmConfig;
use crate::error::{Error, Result};
use crate::nn::{self, Binder};
use crate::params::{Init, ParamKind, ParamSpec};

pub const EMBED_TOKENS: &str = "lm.embed_tokens.weight";
pub const EMBED_POSITIONS: &str = "lm.embed_positions.weight";
pub const FINAL_NORM: &str = "lm.final_norm";
pub const LM_HEAD: &str = "lm.lm_head.weight";

/// Prefix of decoder block `i` (0-based).
pub fn layer_prefix(i: usize) -> String {
    format!("lm.layers.{i}")
}

pub fn param_specs(cfg: &LmConfig) -> Vec<ParamSpec> {
    let h = cfg.hidden_dim;
    let mut specs = vec![
        ParamSpec::new(
            EMBED_TOKENS,
            &[cfg.vocab_size, h],
            ParamKind::Embedding,
            Init::Normal(1.0),
        ),
        ParamSpec::new(
            EMBED_POSITIONS,
            &[cfg.max_seq, h],
            ParamKind::Positional,
            Init::Normal(0.1),
        ),
    ];
    let cross = cfg.cross_attn_layer_indices();
    for i in 0..cfg.layers {
        let p = layer_prefix(i);
        specs.extend(nn::block_specs(&p, h, cfg.ffn_mult, false, 0.0));
        if cross.contains(&(i + 1)) {
            specs.push(ParamSpec::new(
                format!("{p}.cross_norm"),
                &[h],
                ParamKind::Norm,
                Init::Ones,
            ));
            specs.push(ParamSpec::new(
                format!("{p}.cross_kv_norm"),
                &[h],
                ParamKind::Norm,
                Init::Ones,
            ));
            specs.extend(nn::attention_specs(&format!("{p}.cross_attn"), h, h));
            specs.push(ParamSpec::new(
                format!("{p}.cross_gate"),
                &[1],
                ParamKind::Gate,
                Init::Constant(cfg.gate_init),
            ));
        }
    }
    specs.push(ParamSpec::new(FINAL_NORM, &[h], ParamKind::Norm, Init::Ones));
    specs.push(ParamSpec::new(
        LM_HEAD,
        &[cfg.vocab_size, h],
        ParamKind::LmHead,
        Init::Normal(1.0),
    ));
    specs
}

/// Logits `[L × vocab]` for `ids`. `visual` must already be projected to
/// `hidden_dim`; without it the cross-attention sub-blocks are skipped.
pub fn forward(tape: &mut Tape, b: &mut Binder, ids: &[usize], visual: Option<Var>, cfg: &LmConfig) -> Result<Var> {
    if ids.len() > cfg.max_seq {
        return Err(Error::Length {
            len: ids.len(),
            max: cfg.max_seq,
        });
    }
    if let Some(v) = visual {
        let shape = tape.shape(v);
        if shape.len() != 2 || shape[1] != cfg.hidden_dim {
            return Err(Error::Shape(format!(
                "visual features {shape:?} must have width hidden_dim = {}",
                cfg.hidden_dim
            )));
        }
    }
    let table = b.param(tape, EMBED_TOKENS)?;
    let x = tape.embedding(table, ids)?;
    let pos_table = b.param(tape, EMBED_POSITIONS)?;
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = tape.embedding(pos_table, &positions)?;
    let mut x = tape.add(x, pos)?;

    let cross = cfg.cross_attn_layer_indices();
    for i in 0..cfg.layers {
        let p = layer_prefix(i);
        let g = b.param(tape, &format!("{p}.attn_norm"))?;
        let n = tape.rms_norm(x, g)?;
        let a = nn::attention(tape, b, n, n, &format!("{p}.attn"), cfg.heads, true)?;
        x = tape.add(x, a)?;

        if let (Some(v), true) = (visual, cross.contains(&(i + 1))) {
            let g = b.param(tape, &format!("{p}.cross_norm"))?;
            let n = tape.rms_norm(x, g)?;
            let gkv = b.param(tape, &format!("{p}.cross_kv_norm"))?;
            let kv = tape.rms_norm(v, gkv)?;
            let c = nn::attention(tape, b, n, kv, &format!("{p}.cross_attn"), cfg.heads, false)?;
            x = nn::residual(tape, b, x, c, Some(&format!("{p}.cross_gate")))?;
        }

        let g = b.param(tape, &format!("{p}.ffn_norm"))?;
        let n = tape.rms_norm(x, g)?;
        let f = nn::ffn(tape, b, n, &format!("{p}.ffn"))?;
        x = tape.add(x, f)?;
    }
    let g = b.param(tape, FINAL_NORM)?;
    let x = tape.rms_norm(x, g)?;
    let head = b.param(tape, LM_HEAD)?;
    tape.matmul_nt(x, head)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

//! Transformer building blocks shared by the vision encoder and the decoder.

use std::collections::HashMap;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::lora::LoraState;
use crate::params::{name_hash, Init, ParamKind, ParamSpec, ParamStore};

/// Binds named parameters to tape leaves for one forward pass and routes
/// linear layers through their adapters.
pub struct Binder<'m> {
    store: &'m ParamStore,
    lora: Option<&'m LoraState>,
    bound: HashMap<String, Var>,
    dropout_seed: Option<u64>,
    calls: u64,
}

impl<'m> Binder<'m> {
    pub fn new(store: &'m ParamStore, lora: Option<&'m LoraState>) -> Self {
        Binder {
            store,
            lora,
            bound: HashMap::new(),
            dropout_seed: None,
            calls: 0,
        }
    }

    /// Enables adapter dropout, seeded per call site.
    pub fn with_dropout_seed(mut self, seed: Option<u64>) -> Self {
        self.dropout_seed = seed;
        self
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    /// The parameter as the forward pass sees it. An unmerged adapter host
    /// read directly (embedding tables, the output head) yields
    /// `W + scaling · B · A`; linear layers go through [`Binder::linear`].
    pub fn param(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        let w = self.raw(tape, name)?;
        let Some(lora) = self.lora.filter(|l| !l.merged && l.hosts.contains_key(name)) else {
            return Ok(w);
        };
        let a = self.raw(tape, &crate::lora::a_name(name))?;
        let b = self.raw(tape, &crate::lora::b_name(name))?;
        let ba = tape.matmul(b, a)?;
        let delta = tape.scale(ba, lora.config.scaling());
        tape.add(w, delta)
    }

    fn raw(&mut self, tape: &mut Tape, name: &str) -> Result<Var> {
        if let Some(&v) = self.bound.get(name) {
            return Ok(v);
        }
        let t = self.store.tensor(name)?.clone();
        let v = tape.leaf(t);
        self.bound.insert(name.to_string(), v);
        Ok(v)
    }

    /// Routes `name` through an existing tape variable instead of the store.
    pub fn bind(&mut self, name: &str, v: Var) {
        self.bound.insert(name.to_string(), v);
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// `x · Wᵀ`, plus `scaling · B · A · dropout(x)` when `weight` hosts an
    /// unmerged adapter.
    pub fn linear(&mut self, tape: &mut Tape, x: Var, weight: &str) -> Result<Var> {
        let w = self.raw(tape, weight)?;
        let y = tape.matmul_nt(x, w)?;
        let Some(lora) = self.lora else {
            return Ok(y);
        };
        if lora.merged || !lora.hosts.contains_key(weight) {
            return Ok(y);
        }
        let a = self.raw(tape, &crate::lora::a_name(weight))?;
        let b = self.raw(tape, &crate::lora::b_name(weight))?;
        let p = lora.config.dropout;
        let xin = match self.dropout_seed {
            Some(seed) if p > 0.0 => {
                self.calls += 1;
                let keep = 1.0 - p;
                let site = seed ^ name_hash(weight) ^ self.calls.wrapping_mul(0x9e37_79b9_7f4a_7c15);
                let d = tape.dropout(x, keep, site)?;
                tape.scale(d, 1.0 / keep)
            }
            _ => x,
        };
        let h = tape.matmul_nt(xin, a)?;
        let u = tape.matmul_nt(h, b)?;
        let u = tape.scale(u, lora.config.scaling());
        tape.add(y, u)
    }
}

/// Parameters of one pre-norm transformer block under `prefix`.
pub fn block_specs(prefix: &str, d: usize, ffn_mult: usize, gated: bool, gate_init: f64) -> Vec<ParamSpec> {
    let mut specs = vec![ParamSpec::new(
        format!("{prefix}.attn_norm"),
        &[d],
        ParamKind::Norm,
        Init::Ones,
    )];
    specs.extend(attention_specs(&format!("{prefix}.attn"), d, d));
    specs.push(ParamSpec::new(
        format!("{prefix}.ffn_norm"),
        &[d],
        ParamKind::Norm,
        Init::Ones,
    ));
    specs.extend(ffn_specs(&format!("{prefix}.ffn"), d, ffn_mult));
    if gated {
        specs.push(ParamSpec::new(
            format!("{prefix}.attn_gate"),
            &[1],
            ParamKind::Gate,
            Init::Constant(gate_init),
        ));
        specs.push(ParamSpec::new(
            format!("{prefix}.ffn_gate"),
            &[1],
            ParamKind::Gate,
            Init::Constant(gate_init),
        ));
    }
    specs
}

pub fn linear_spec(name: String, d_out: usize, d_in: usize) -> ParamSpec {
    let std = 1.0 / (d_in as f64).sqrt();
    ParamSpec::new(name, &[d_out, d_in], ParamKind::Linear, Init::Normal(std))
}

/// Q/K/V/O projections; keys and values read `d_kv`-wide inputs.
pub fn attention_specs(prefix: &str, d: usize, d_kv: usize) -> Vec<ParamSpec> {
    vec![
        linear_spec(format!("{prefix}.q.weight"), d, d),
        linear_spec(format!("{prefix}.k.weight"), d, d_kv),
        linear_spec(format!("{prefix}.v.weight"), d, d_kv),
        linear_spec(format!("{prefix}.o.weight"), d, d),
    ]
}

pub fn ffn_specs(prefix: &str, d: usize, mult: usize) -> Vec<ParamSpec> {
    vec![
        linear_spec(format!("{prefix}.up.weight"), d * mult, d),
        linear_spec(format!("{prefix}.down.weight"), d, d * mult),
    ]
}

/// Multi-head scaled dot-product attention. Queries come from `xq`, keys and
/// values from `xkv`.
pub fn attention(
    tape: &mut Tape,
    b: &mut Binder,
    xq: Var,
    xkv: Var,
    prefix: &str,
    heads: usize,
    causal: bool,
) -> Result<Var> {
    let q = b.linear(tape, xq, &format!("{prefix}.q.weight"))?;
    let k = b.linear(tape, xkv, &format!("{prefix}.k.weight"))?;
    let v = b.linear(tape, xkv, &format!("{prefix}.v.weight"))?;
    let d = tape.value(q).cols();
    if d % heads != 0 {
        return Err(Error::Shape(format!("width {d} not divisible by {heads} heads")));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice(q, h * dh, dh)?,
                tape.slice(k, h * dh, dh)?,
                tape.slice(v, h * dh, dh)?,
            )
        };
        let s = tape.matmul_nt(qh, kh)?;
        let s = tape.scale(s, scale);
        let p = tape.softmax_rows(s, causal)?;
        outs.push(tape.matmul(p, vh)?);
    }
    let cat = if heads == 1 { outs[0] } else { tape.concat(&outs)? };
    b.linear(tape, cat, &format!("{prefix}.o.weight"))
}

pub fn ffn(tape: &mut Tape, b: &mut Binder, x: Var, prefix: &str) -> Result<Var> {
    let h = b.linear(tape, x, &format!("{prefix}.up.weight"))?;
    let h = tape.silu(h);
    b.linear(tape, h, &format!("{prefix}.down.weight"))
}

/// `x + tanh(g) · y` when a gate is named, else `x + y`.
pub fn residual(tape: &mut Tape, b: &mut Binder, x: Var, y: Var, gate: Option<&str>) -> Result<Var> {
    let y = match gate {
        Some(name) => {
            let g = b.param(tape, name)?;
            let tg = tape.tanh(g);
            tape.mul_scalar(y, tg)?
        }
        None => y,
    };
    tape.add(x, y)
}

/// Pre-norm block: self-attention then feed-forward, each residual and
/// optionally gated.
pub fn block(
    tape: &mut Tape,
    b: &mut Binder,
    x: Var,
    prefix: &str,
    heads: usize,
    causal: bool,
    gated: bool,
) -> Result<Var> {
    let gate = |s: &str| format!("{prefix}.{s}_gate");
    let g = b.param(tape, &format!("{prefix}.attn_norm"))?;
    let n = tape.rms_norm(x, g)?;
    let a = attention(tape, b, n, n, &format!("{prefix}.attn"), heads, causal)?;
    let attn_gate = gate("attn");
    let x = residual(tape, b, x, a, gated.then_some(attn_gate.as_str()))?;
    let g = b.param(tape, &format!("{prefix}.ffn_norm"))?;
    let n = tape.rms_norm(x, g)?;
    let f = ffn(tape, b, n, &format!("{prefix}.ffn"))?;
    let ffn_gate = gate("ffn");
    residual(tape, b, x, f, gated.then_some(ffn_gate.as_str()))
}

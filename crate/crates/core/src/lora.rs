//! Low-rank adaptation.
//!
//! A targeted weight `W: [d_out × d_in]` gains factors `A: [r × d_in]` and
//! `B: [d_out × r]`. The adapted layer computes
//! `y = x·Wᵀ + (α/r) · (dropout(x)·Aᵀ)·Bᵀ`, equivalently `W' = W + (α/r)·B·A`.
//! `B` starts at zero, so attaching never changes the model's outputs.

use std::collections::BTreeMap;

use crate::config::{LoraConfig, TargetRule};
use crate::error::{Error, Result};
use crate::params::{name_hash, ParamKind, ParamSpec, ParamStore};
use crate::tensor::Tensor;

pub fn a_name(host: &str) -> String {
    format!("{host}.lora_a")
}

pub fn b_name(host: &str) -> String {
    format!("{host}.lora_b")
}

/// Host shape `(d_out, d_in)` of one adapted weight.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HostDims {
    pub d_out: usize,
    pub d_in: usize,
}

/// Adapter bookkeeping for one model. Factor tensors live in the model's
/// parameter store under [`a_name`] / [`b_name`].
#[derive(Debug, Clone)]
pub struct LoraState {
    pub config: LoraConfig,
    pub hosts: BTreeMap<String, HostDims>,
    pub merged: bool,
}

/// One adapter detached from its store.
#[derive(Debug, Clone)]
pub struct LoraAdapter {
    pub host_name: String,
    pub a: Tensor,
    pub b: Tensor,
    pub scaling: f64,
}

impl LoraAdapter {
    /// `scaling · B · A`
    pub fn delta(&self) -> Result<Tensor> {
        let (d_out, r) = (self.b.shape()[0], self.b.shape()[1]);
        let (r2, d_in) = (self.a.shape()[0], self.a.shape()[1]);
        if r != r2 {
            return Err(Error::Dimension {
                op: "lora_delta",
                lhs: self.b.shape().to_vec(),
                rhs: self.a.shape().to_vec(),
            });
        }
        let (a, b) = (self.a.data(), self.b.data());
        let mut out = vec![0.0; d_out * d_in];
        for i in 0..d_out {
            for k in 0..r {
                let bv = b[i * r + k] * self.scaling;
                if bv == 0.0 {
                    continue;
                }
                for (o, av) in out[i * d_in..(i + 1) * d_in]
                    .iter_mut()
                    .zip(&a[k * d_in..(k + 1) * d_in])
                {
                    *o += bv * av;
                }
            }
        }
        Tensor::new(out, &[d_out, d_in])
    }
}

/// `W + scaling·B·A`
pub fn merge_weight(adapter: &LoraAdapter, host: &Tensor) -> Result<Tensor> {
    combine(adapter, host, 1.0)
}

/// `W' − scaling·B·A`
pub fn unmerge_weight(adapter: &LoraAdapter, merged: &Tensor) -> Result<Tensor> {
    combine(adapter, merged, -1.0)
}

fn combine(adapter: &LoraAdapter, host: &Tensor, sign: f64) -> Result<Tensor> {
    let delta = adapter.delta()?;
    if delta.shape() != host.shape() {
        return Err(Error::Dimension {
            op: "lora_merge",
            lhs: host.shape().to_vec(),
            rhs: delta.shape().to_vec(),
        });
    }
    let data = host
        .data()
        .iter()
        .zip(delta.data())
        .map(|(w, d)| w + sign * d)
        .collect();
    Ok(Tensor::new(data, host.shape())?.with_requires_grad(host.requires_grad()))
}

fn excluded(name: &str, exclusions: &[String]) -> bool {
    name.split('.').any(|part| exclusions.iter().any(|e| e == part))
}

fn targeted(name: &str, shape: &[usize], kind: ParamKind, rule: &TargetRule) -> bool {
    if shape.len() != 2 || matches!(kind, ParamKind::LoraA | ParamKind::LoraB) {
        return false;
    }
    match rule {
        TargetRule::Linear => kind == ParamKind::Linear,
        TargetRule::All2d => true,
        TargetRule::NameContains(parts) => parts.iter().any(|p| name.contains(p.as_str())),
    }
}

/// Hosts selected by `cfg` among `(name, shape, kind)` triples, exclusions
/// applied. Works on shapes alone so full-scale configurations can be
/// accounted without allocating them.
pub fn select_hosts<'a>(
    params: impl IntoIterator<Item = (&'a str, &'a [usize], ParamKind)>,
    cfg: &LoraConfig,
) -> Result<BTreeMap<String, HostDims>> {
    let exclusions = cfg.effective_exclusions();
    let mut matched = 0;
    let mut hosts = BTreeMap::new();
    for (name, shape, kind) in params {
        if !targeted(name, shape, kind, &cfg.target) {
            continue;
        }
        matched += 1;
        if excluded(name, &exclusions) {
            continue;
        }
        hosts.insert(
            name.to_string(),
            HostDims {
                d_out: shape[0],
                d_in: shape[1],
            },
        );
    }
    if matched == 0 {
        return Err(Error::Config(format!(
            "lora target rule {:?} matches no parameters",
            cfg.target
        )));
    }
    Ok(hosts)
}

pub fn select_hosts_from_specs(specs: &[ParamSpec], cfg: &LoraConfig) -> Result<BTreeMap<String, HostDims>> {
    select_hosts(specs.iter().map(|s| (s.name.as_str(), s.shape.as_slice(), s.kind)), cfg)
}

/// `Σ r·(d_in + d_out)` over hosts.
pub fn adapter_param_count(hosts: &BTreeMap<String, HostDims>, rank: usize) -> usize {
    hosts.values().map(|h| rank * (h.d_in + h.d_out)).sum()
}

impl LoraState {
    /// Freezes every parameter in `store`, then adds trainable factor pairs
    /// for each selected host. `A ~ N(0, 1/r²)`, `B = 0`.
    pub fn attach(store: &mut ParamStore, cfg: &LoraConfig, seed: u64) -> Result<LoraState> {
        cfg.validate()?;
        if store
            .iter()
            .any(|(_, p)| matches!(p.kind, ParamKind::LoraA | ParamKind::LoraB))
        {
            return Err(Error::State("store already carries adapters".into()));
        }
        let hosts = {
            let triples: Vec<(&str, &[usize], ParamKind)> =
                store.iter().map(|(n, p)| (n, p.tensor.shape(), p.kind)).collect();
            select_hosts(triples, cfg)?
        };
        store.set_all_trainable(false);
        let r = cfg.rank;
        for (host, dims) in &hosts {
            let a = Tensor::randn(&[r, dims.d_in], 1.0 / r as f64, seed ^ name_hash(&a_name(host)))
                .with_requires_grad(true);
            let b = Tensor::zeros(&[dims.d_out, r]).with_requires_grad(true);
            store.insert(&a_name(host), a, ParamKind::LoraA)?;
            store.insert(&b_name(host), b, ParamKind::LoraB)?;
        }
        if cfg.train_gates {
            for (_, p) in store.iter_mut() {
                if p.kind == ParamKind::Gate {
                    p.tensor.set_requires_grad(true);
                }
            }
        }
        Ok(LoraState {
            config: cfg.clone(),
            hosts,
            merged: false,
        })
    }

    pub fn adapter(&self, store: &ParamStore, host: &str) -> Result<LoraAdapter> {
        if !self.hosts.contains_key(host) {
            return Err(Error::Config(format!("{host:?} carries no adapter")));
        }
        Ok(LoraAdapter {
            host_name: host.to_string(),
            a: store.tensor(&a_name(host))?.clone(),
            b: store.tensor(&b_name(host))?.clone(),
            scaling: self.config.scaling(),
        })
    }

    /// Folds every adapter into its host weight.
    pub fn merge(&mut self, store: &mut ParamStore) -> Result<()> {
        if self.merged {
            return Err(Error::State("adapters are already merged".into()));
        }
        for host in self.hosts.keys() {
            let adapter = self.adapter(store, host)?;
            let merged = merge_weight(&adapter, store.tensor(host)?)?;
            *store.tensor_mut(host)? = merged;
        }
        self.merged = true;
        Ok(())
    }

    pub fn unmerge(&mut self, store: &mut ParamStore) -> Result<()> {
        if !self.merged {
            return Err(Error::State("adapters are not merged".into()));
        }
        for host in self.hosts.keys() {
            let adapter = self.adapter(store, host)?;
            let restored = unmerge_weight(&adapter, store.tensor(host)?)?;
            *store.tensor_mut(host)? = restored;
        }
        self.merged = false;
        Ok(())
    }

    pub fn adapter_param_count(&self) -> usize {
        adapter_param_count(&self.hosts, self.config.rank)
    }
}

/// Parameters trained in adapter mode: every factor entry, plus the scalar
/// gates when the configuration unfreezes them.
pub fn trainable_param_count(store: &ParamStore, state: &LoraState) -> usize {
    let gates: usize = if state.config.train_gates {
        store
            .iter()
            .filter(|(_, p)| p.kind == ParamKind::Gate)
            .map(|(_, p)| p.tensor.len())
            .sum()
    } else {
        0
    };
    state.adapter_param_count() + gates
}

//! Fine-tuning: answer-masked cross-entropy, cosine schedule, gradient
//! accumulation, and per-mode parameter selection.

use std::collections::{BTreeSet, HashMap};
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{OptimizerConfig, RunConfig, TrainConfig, TuningMode};
use crate::data::dataset::mix;
use crate::data::LoadedSample;
use crate::error::{Error, Result};
use crate::model::{component_of, MultimodalModel};
use crate::params::ParamKind;
use crate::tensor::Tensor;
use crate::tokenizer::TokenSequence;

/// `min + ½(base − min)(1 + cos(π·step/total))`
pub fn cosine_lr(step: usize, total_steps: usize, base_lr: f64, min_lr: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Contract("total_steps must be ≥ 1".into()));
    }
    if step > total_steps {
        return Err(Error::Contract(format!("step {step} beyond total {total_steps}")));
    }
    let frac = step as f64 / total_steps as f64;
    Ok(min_lr + 0.5 * (base_lr - min_lr) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

/// Learning rate of optimizer step `i` out of `steps`: the first step uses
/// `base_lr`, the last `min_lr`.
pub fn scheduled_lr(i: usize, steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if steps <= 1 {
        return Ok(cfg.base_lr);
    }
    cosine_lr(i, steps - 1, cfg.base_lr, cfg.min_lr)
}

fn is_adapter(kind: ParamKind) -> bool {
    matches!(kind, ParamKind::LoraA | ParamKind::LoraB)
}

/// Parameter names updated under `mode`.
pub fn select_trainable(model: &MultimodalModel, mode: TuningMode) -> Result<BTreeSet<String>> {
    let params = &model.params;
    let set = match mode {
        TuningMode::Frozen => BTreeSet::new(),
        TuningMode::Full => params.names().map(str::to_string).collect(),
        TuningMode::Partial => params
            .iter()
            .filter(|(n, p)| !is_adapter(p.kind) && (n.starts_with("projector.") || n.contains(".cross_")))
            .map(|(n, _)| n.to_string())
            .collect(),
        TuningMode::Lora => {
            let state = model
                .lora
                .as_ref()
                .ok_or_else(|| Error::Config("lora mode needs a model with adapters attached".into()))?;
            params
                .iter()
                .filter(|(_, p)| is_adapter(p.kind) || (state.config.train_gates && p.kind == ParamKind::Gate))
                .map(|(n, _)| n.to_string())
                .collect()
        }
    };
    Ok(set)
}

/// Module groups whose behaviour `names` changes: an adapter counts toward
/// its host's group.
pub fn trained_groups(names: &BTreeSet<String>) -> BTreeSet<&'static str> {
    names
        .iter()
        .map(|n| {
            let host = n
                .strip_suffix(".lora_a")
                .or_else(|| n.strip_suffix(".lora_b"))
                .unwrap_or(n);
            component_of(host)
        })
        .collect()
}

/// Turns gradients on exactly for `names`.
pub fn apply_trainable(model: &mut MultimodalModel, names: &BTreeSet<String>) {
    for (name, p) in model.params.iter_mut() {
        p.tensor.set_requires_grad(names.contains(name));
    }
}

/// Fresh model for `cfg` prepared for `mode`: adapters attached in lora mode
/// and gradients enabled on the selected set.
pub fn prepare_model(cfg: &RunConfig, mode: TuningMode) -> Result<MultimodalModel> {
    let mut model = MultimodalModel::new(&cfg.model)?;
    if mode == TuningMode::Lora {
        model.attach_lora(&cfg.lora)?;
    }
    let names = select_trainable(&model, mode)?;
    apply_trainable(&mut model, &names);
    Ok(model)
}

/// One sample ready for the model.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub image: Tensor,
    pub seq: TokenSequence,
}

impl TrainItem {
    pub fn from_loaded(s: &LoadedSample, channels: usize) -> Self {
        TrainItem {
            image: s.image.to_tensor(channels),
            seq: TokenSequence::instruction(&s.record.question, &s.record.answer),
        }
    }
}

/// Optimizer state across steps.
#[derive(Debug, Clone)]
pub enum Optimizer {
    Sgd,
    Adam {
        beta1: f64,
        beta2: f64,
        eps: f64,
        t: u64,
        m: HashMap<String, Vec<f64>>,
        v: HashMap<String, Vec<f64>>,
    },
}

impl Optimizer {
    pub fn new(cfg: &OptimizerConfig) -> Self {
        match *cfg {
            OptimizerConfig::Sgd => Optimizer::Sgd,
            OptimizerConfig::Adam { beta1, beta2, eps } => Optimizer::Adam {
                beta1,
                beta2,
                eps,
                t: 0,
                m: HashMap::new(),
                v: HashMap::new(),
            },
        }
    }

    /// Updates every parameter holding a gradient using `grad / samples`,
    /// then clears gradients.
    pub fn step(&mut self, model: &mut MultimodalModel, lr: f64, samples: usize) {
        let inv = 1.0 / samples as f64;
        if let Optimizer::Adam { t, .. } = self {
            *t += 1;
        }
        for (name, p) in model.params.iter_mut() {
            let Some(grad) = p.tensor.grad().map(|g| g.iter().map(|x| x * inv).collect::<Vec<f64>>()) else {
                continue;
            };
            match self {
                Optimizer::Sgd => {
                    for (w, g) in p.tensor.data_mut().iter_mut().zip(&grad) {
                        *w -= lr * g;
                    }
                }
                Optimizer::Adam {
                    beta1,
                    beta2,
                    eps,
                    t,
                    m,
                    v,
                } => {
                    let m = m.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
                    let v = v.entry(name.to_string()).or_insert_with(|| vec![0.0; grad.len()]);
                    let c1 = 1.0 - beta1.powi(*t as i32);
                    let c2 = 1.0 - beta2.powi(*t as i32);
                    let data = p.tensor.data_mut();
                    for i in 0..grad.len() {
                        m[i] = *beta1 * m[i] + (1.0 - *beta1) * grad[i];
                        v[i] = *beta2 * v[i] + (1.0 - *beta2) * grad[i] * grad[i];
                        data[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + *eps);
                    }
                }
            }
            p.tensor.zero_grad();
        }
    }
}

/// Dropout seed of the sample at `position` of epoch `epoch`'s order.
pub fn dropout_seed(seed: u64, epoch: usize, position: usize) -> u64 {
    mix(mix(seed ^ 0x64726f70) ^ ((epoch as u64) << 32) ^ position as u64)
}

/// Forward and backward over `batch`, summing gradients into the model.
/// `seeds` gives each sample's dropout seed (`None` disables dropout).
/// Returns the summed per-sample losses.
pub fn accumulate(model: &mut MultimodalModel, batch: &[&TrainItem], seeds: &[Option<u64>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut total = 0.0;
    for (item, &seed) in batch.iter().zip(seeds) {
        total += model.accumulate_sample_grad(Some(&item.image), &item.seq, seed)?;
    }
    Ok(total)
}

/// One optimizer update from one batch: mean of per-sample losses, each the
/// mean cross-entropy over that sample's answer tokens.
pub fn train_step(
    model: &mut MultimodalModel,
    batch: &[&TrainItem],
    seeds: &[Option<u64>],
    opt: &mut Optimizer,
    lr: f64,
) -> Result<f64> {
    model.params.zero_grads();
    let total = accumulate(model, batch, seeds)?;
    opt.step(model, lr, batch.len());
    Ok(total / batch.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainRecord {
    pub steps: Vec<StepRecord>,
}

impl TrainRecord {
    pub fn losses(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

/// Optimizer steps in one epoch over `n` samples.
pub fn steps_per_epoch(n: usize, cfg: &TrainConfig) -> usize {
    n.div_ceil(cfg.batch_size * cfg.grad_accum)
}

/// Seeded permutation of `0..n` for `epoch`.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ 0x7368_7566) ^ epoch as u64);
    order.shuffle(&mut rng);
    order
}

/// Runs `cfg.epochs` over `items`. Each optimizer step consumes up to
/// `batch_size · grad_accum` samples; gradients are summed over them and
/// divided by their count. One JSON line per step goes to `log`.
pub fn fit(
    model: &mut MultimodalModel,
    items: &[TrainItem],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainRecord> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(Error::Contract("no training samples".into()));
    }
    let dropout = model.lora.as_ref().is_some_and(|l| l.config.dropout > 0.0);
    let per_epoch = steps_per_epoch(items.len(), cfg);
    let total = per_epoch * cfg.epochs;
    let mut opt = Optimizer::new(&cfg.optimizer);
    let mut record = TrainRecord::default();
    let chunk = cfg.batch_size * cfg.grad_accum;
    model.params.zero_grads();
    for epoch in 0..cfg.epochs {
        let order = epoch_order(items.len(), cfg.seed, epoch);
        for (k, positions) in order.chunks(chunk).enumerate() {
            let step = epoch * per_epoch + k;
            let lr = scheduled_lr(step, total, cfg)?;
            let mut loss = 0.0;
            for (m, micro) in positions.chunks(cfg.batch_size).enumerate() {
                let batch: Vec<&TrainItem> = micro.iter().map(|&i| &items[i]).collect();
                let seeds: Vec<Option<u64>> = (0..micro.len())
                    .map(|j| dropout.then(|| dropout_seed(cfg.seed, epoch, k * chunk + m * cfg.batch_size + j)))
                    .collect();
                loss += accumulate(model, &batch, &seeds)?;
            }
            opt.step(model, lr, positions.len());
            let rec = StepRecord {
                step,
                epoch,
                lr,
                loss: loss / positions.len() as f64,
            };
            if let Some(w) = log.as_mut() {
                let line = serde_json::to_string(&rec).expect("serializable");
                writeln!(w, "{line}").map_err(|e| Error::io("<train log>", e))?;
            }
            record.steps.push(rec);
        }
    }
    Ok(record)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 10, 2e-4, 0.0).unwrap(), 2e-4);
        assert!((cosine_lr(10, 10, 2e-4, 1e-5).unwrap() - 1e-5).abs() < 1e-15);
        assert!((cosine_lr(5, 10, 2e-4, 0.0).unwrap() - 1e-4).abs() < 1e-15);
        assert!(matches!(cosine_lr(11, 10, 2e-4, 0.0), Err(Error::Contract(_))));
    }

    #[test]
    fn epoch_orders_are_seeded_permutations() {
        let a = epoch_order(50, 3, 0);
        assert_eq!(a, epoch_order(50, 3, 0));
        assert_ne!(a, epoch_order(50, 3, 1));
        let mut s = a.clone();
        s.sort();
        assert_eq!(s, (0..50).collect::<Vec<_>>());
    }

    #[test]
    fn partial_touches_fewer_groups_than_lora() {
        let cfg = RunConfig::desk();
        let lora = prepare_model(&cfg, TuningMode::Lora).unwrap();
        let partial = prepare_model(&cfg, TuningMode::Partial).unwrap();
        let g_lora = trained_groups(&select_trainable(&lora, TuningMode::Lora).unwrap());
        let g_partial = trained_groups(&select_trainable(&partial, TuningMode::Partial).unwrap());
        assert_eq!(g_partial.into_iter().collect::<Vec<_>>(), ["lm.cross", "projector"]);
        assert!(g_lora.len() > 2, "{g_lora:?}");
    }

    #[test]
    fn steps_count() {
        let cfg = RunConfig::desk().train;
        assert_eq!(steps_per_epoch(512, &cfg), 128);
        assert_eq!(steps_per_epoch(10, &cfg), 3);
    }
}

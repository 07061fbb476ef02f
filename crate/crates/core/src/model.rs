//! The assembled vision-language model: encoder, projection and decoder over
//! one parameter store, with optional adapters.

use crate::autodiff::{OpKind, Tape, Var};
use crate::config::{LoraConfig, ModelConfig};
use crate::error::{Error, Result};
use crate::gradcheck::GradChecker;
use crate::integration;
use crate::language;
use crate::lora::LoraState;
use crate::nn::Binder;
use crate::params::{ParamKind, ParamSpec, ParamStore};
use crate::tensor::Tensor;
use crate::tokenizer::{self, TokenSequence, EOS};
use crate::vision;

/// Every parameter of the model, in construction order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<ParamSpec> {
    let (d_visual, hidden) = cfg.projection_dims();
    let mut specs = vision::param_specs(&cfg.vision);
    specs.extend(integration::param_specs(d_visual, hidden));
    specs.extend(language::param_specs(&cfg.lm));
    specs
}

/// Coarse grouping of parameter names used for reporting.
pub fn component_of(name: &str) -> &'static str {
    if name.ends_with(".lora_a") || name.ends_with(".lora_b") {
        "lora"
    } else if name.starts_with("vision.local") || name.starts_with("vision.patch") || name == vision::POS_EMBED {
        "vision.local"
    } else if name.starts_with("vision.global") {
        "vision.global"
    } else if name.starts_with("projector") {
        "projector"
    } else if name.contains(".cross_") {
        "lm.cross"
    } else {
        "lm"
    }
}

#[derive(Debug, Clone)]
pub struct MultimodalModel {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub lora: Option<LoraState>,
}

impl MultimodalModel {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = ParamStore::from_specs(&param_specs(config), config.seed)?;
        Ok(MultimodalModel {
            config: config.clone(),
            params,
            lora: None,
        })
    }

    /// Freezes the base and adds adapters. Adapter factors are seeded from
    /// the model seed.
    pub fn attach_lora(&mut self, cfg: &LoraConfig) -> Result<()> {
        if self.lora.is_some() {
            return Err(Error::State("model already carries adapters".into()));
        }
        let state = LoraState::attach(&mut self.params, cfg, self.config.seed ^ 0x10a)?;
        self.lora = Some(state);
        Ok(())
    }

    pub fn merge_lora(&mut self) -> Result<()> {
        let state = self
            .lora
            .as_mut()
            .ok_or_else(|| Error::State("model carries no adapters".into()))?;
        state.merge(&mut self.params)
    }

    pub fn unmerge_lora(&mut self) -> Result<()> {
        let state = self
            .lora
            .as_mut()
            .ok_or_else(|| Error::State("model carries no adapters".into()))?;
        state.unmerge(&mut self.params)
    }

    pub fn binder(&self, dropout_seed: Option<u64>) -> Binder<'_> {
        Binder::new(&self.params, self.lora.as_ref()).with_dropout_seed(dropout_seed)
    }

    /// Encoded and projected image features `F: [N × hidden]`.
    pub fn visual(&self, tape: &mut Tape, b: &mut Binder, image: &Tensor) -> Result<Var> {
        let out = vision::encode(tape, b, image, &self.config.vision)?;
        integration::project(tape, b, out.z_v)
    }

    /// Logits `[L × vocab]`.
    pub fn logits(&self, tape: &mut Tape, b: &mut Binder, image: Option<&Tensor>, ids: &[usize]) -> Result<Var> {
        let visual = match image {
            Some(img) => Some(self.visual(tape, b, img)?),
            None => None,
        };
        language::forward(tape, b, ids, visual, &self.config.lm)
    }

    /// Mean next-token cross-entropy over the answer positions of `seq`;
    /// text-only without an image.
    pub fn loss(&self, tape: &mut Tape, b: &mut Binder, image: Option<&Tensor>, seq: &TokenSequence) -> Result<Var> {
        let targets = seq.answer_targets();
        if targets.iter().all(Option::is_none) {
            return Err(Error::Contract("sequence has no answer tokens".into()));
        }
        let logits = self.logits(tape, b, image, &seq.ids)?;
        tape.cross_entropy(logits, &targets)
    }

    /// Projected features as a plain tensor, for reuse across decoding steps.
    pub fn visual_features(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = self.binder(None);
        let v = self.visual(&mut tape, &mut b, image)?;
        Ok(tape.value(v).clone().with_requires_grad(false))
    }

    /// Logits for `ids` given precomputed features.
    pub fn logits_with_features(&self, features: Option<&Tensor>, ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut b = self.binder(None);
        let visual = features.map(|f| tape.constant(f.clone()));
        let out = language::forward(&mut tape, &mut b, ids, visual, &self.config.lm)?;
        Ok(tape.value(out).clone())
    }

    /// Greedy decoding from `prompt` until EOS, `max_new` tokens, or the
    /// sequence limit.
    pub fn generate_ids(&self, features: Option<&Tensor>, prompt: &[usize], max_new: usize) -> Result<Vec<usize>> {
        if prompt.is_empty() {
            return Err(Error::Contract("prompt must not be empty".into()));
        }
        let max = self.config.lm.max_seq;
        if prompt.len() > max {
            return Err(Error::Length { len: prompt.len(), max });
        }
        let mut ids = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_new && ids.len() < max {
            let logits = self.logits_with_features(features, &ids)?;
            let next = language::argmax(logits.row(ids.len() - 1));
            if next == EOS {
                break;
            }
            ids.push(next);
            out.push(next);
        }
        Ok(out)
    }

    pub fn generate(&self, image: &Tensor, question: &str, max_new: usize) -> Result<String> {
        let features = self.visual_features(image)?;
        let prompt = TokenSequence::prompt(question);
        let ids = self.generate_ids(Some(&features), &prompt.ids, max_new)?;
        lossy_text(&ids)
    }

    /// Σ log p(continuation | prefix), one decoder pass.
    pub fn continuation_logprob(
        &self,
        features: Option<&Tensor>,
        prefix: &[usize],
        continuation: &[usize],
    ) -> Result<f64> {
        let mut ids = prefix.to_vec();
        ids.extend_from_slice(continuation);
        let logits = self.logits_with_features(features, &ids)?;
        let mut total = 0.0;
        for (k, &tok) in continuation.iter().enumerate() {
            let row = logits.row(prefix.len() + k - 1);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += row[tok] - lse;
        }
        Ok(total)
    }

    /// Runs one sample forward and backward, adding every trainable
    /// parameter's gradient into the store. Returns the sample loss.
    pub fn accumulate_sample_grad(
        &mut self,
        image: Option<&Tensor>,
        seq: &TokenSequence,
        dropout_seed: Option<u64>,
    ) -> Result<f64> {
        let mut tape = Tape::new();
        let (loss, grads) = {
            let mut b = self.binder(dropout_seed);
            let loss = self.loss(&mut tape, &mut b, image, seq)?;
            tape.backward(loss)?;
            let grads: Vec<(String, Vec<f64>)> = b
                .bound()
                .filter_map(|(name, v)| tape.grad(v).map(|g| (name.to_string(), g.to_vec())))
                .collect();
            (tape.value(loss).item(), grads)
        };
        for (name, g) in grads {
            self.params.tensor_mut(&name)?.accumulate_grad(&g);
        }
        Ok(loss)
    }
}

/// Detokenizes generated ids, dropping anything outside the byte range and
/// replacing invalid UTF-8.
fn lossy_text(ids: &[usize]) -> Result<String> {
    let bytes: Vec<u8> = ids
        .iter()
        .filter(|&&id| (tokenizer::NUM_SPECIALS..tokenizer::VOCAB_SIZE).contains(&id))
        .map(|&id| (id - tokenizer::NUM_SPECIALS) as u8)
        .collect();
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}

/// Result of checking one parameter tensor.
#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub component: &'static str,
    pub coords: usize,
    pub max_rel_error: f64,
}

/// Finite-difference check of the sample loss with respect to a spread of
/// coordinates from every parameter tensor. Adapter dropout is off. At most
/// `per_tensor` coordinates are probed per tensor.
pub fn grad_check_model(
    model: &MultimodalModel,
    image: &Tensor,
    seq: &TokenSequence,
    per_tensor: usize,
    h: f64,
    fault: Option<OpKind>,
) -> Result<Vec<ParamCheck>> {
    let checker = GradChecker::new(h).with_fault(fault);
    let mut out = Vec::new();
    for (name, param) in model.params.iter() {
        let x = &param.tensor;
        let n = x.len();
        let take = per_tensor.min(n).max(1);
        let coords: Vec<usize> = (0..take)
            .map(|k| (k * n) / take + (k * 7919) % (n / take).max(1))
            .collect();
        let f = |tape: &mut Tape, v: Var| -> Result<Var> {
            let mut b = model.binder(None);
            b.bind(name, v);
            model.loss(tape, &mut b, Some(image), seq)
        };
        let err = checker.check_coords(f, x, &coords)?;
        out.push(ParamCheck {
            name: name.to_string(),
            component: component_of(name),
            coords: coords.len(),
            max_rel_error: err,
        });
    }
    Ok(out)
}

/// Gates set away from zero so every path carries gradient.
pub fn open_gates(model: &mut MultimodalModel, value: f64) {
    for (_, p) in model.params.iter_mut() {
        if p.kind == ParamKind::Gate {
            p.tensor.data_mut().iter_mut().for_each(|g| *g = value);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::RunConfig;

    fn tiny() -> ModelConfig {
        let mut cfg = RunConfig::desk().model;
        cfg.vision.image_size = 32;
        cfg.vision.patch_size = 8;
        cfg.vision.embed_dim = 8;
        cfg.vision.heads = 2;
        cfg.vision.local_layers = 2;
        cfg.vision.global_layers = 1;
        cfg.vision.tap_layers = vec![1];
        cfg.lm.hidden_dim = 8;
        cfg.lm.heads = 2;
        cfg.lm.layers = 2;
        cfg.lm.max_seq = 32;
        cfg
    }

    fn image(cfg: &ModelConfig, seed: u64) -> Tensor {
        let s = cfg.vision.image_size;
        let t = Tensor::randn(&[s, s, 1], 0.3, seed);
        let data = t.data().iter().map(|v| (v + 0.5).clamp(0.0, 1.0)).collect();
        Tensor::new(data, &[s, s, 1]).unwrap()
    }

    #[test]
    fn spec_names_are_unique() {
        let specs = param_specs(&RunConfig::desk().model);
        let mut names: Vec<_> = specs.iter().map(|s| s.name.clone()).collect();
        names.sort();
        names.dedup();
        assert_eq!(names.len(), specs.len());
    }

    #[test]
    fn zero_gates_ignore_image() {
        let cfg = tiny();
        let m = MultimodalModel::new(&cfg).unwrap();
        let ids = TokenSequence::prompt("hi").ids;
        let a = m
            .logits_with_features(Some(&m.visual_features(&image(&cfg, 1)).unwrap()), &ids)
            .unwrap();
        let b = m
            .logits_with_features(Some(&m.visual_features(&image(&cfg, 2)).unwrap()), &ids)
            .unwrap();
        let c = m.logits_with_features(None, &ids).unwrap();
        assert!(a.bit_eq(&b) && a.bit_eq(&c));
    }

    #[test]
    fn max_new_zero_is_empty() {
        let cfg = tiny();
        let m = MultimodalModel::new(&cfg).unwrap();
        assert_eq!(m.generate(&image(&cfg, 1), "q", 0).unwrap(), "");
    }

    #[test]
    fn forced_eos_gives_empty_text() {
        let cfg = tiny();
        let mut m = MultimodalModel::new(&cfg).unwrap();
        // Constant embeddings, dead blocks, and a head that reads only EOS.
        for (name, p) in m.params.iter_mut() {
            let fill = if name == language::EMBED_TOKENS {
                Some(1.0)
            } else if name.starts_with("lm.")
                && (name.ends_with(".o.weight") || name.ends_with(".down.weight") || name == language::EMBED_POSITIONS)
            {
                Some(0.0)
            } else {
                None
            };
            if let Some(v) = fill {
                p.tensor.data_mut().iter_mut().for_each(|x| *x = v);
            }
        }
        let h = cfg.lm.hidden_dim;
        let head = m.params.tensor_mut(language::LM_HEAD).unwrap();
        head.data_mut().iter_mut().for_each(|v| *v = 0.0);
        head.data_mut()[EOS * h..(EOS + 1) * h]
            .iter_mut()
            .for_each(|v| *v = 1.0);
        assert_eq!(m.generate(&image(&cfg, 1), "anything", 10).unwrap(), "");
    }

    #[test]
    fn overlong_prompt_is_length_error() {
        let cfg = tiny();
        let m = MultimodalModel::new(&cfg).unwrap();
        let ids = vec![5; cfg.lm.max_seq + 1];
        assert!(matches!(m.generate_ids(None, &ids, 1), Err(Error::Length { .. })));
    }

    #[test]
    fn model_gradients_match_finite_differences() {
        let cfg = tiny();
        let mut m = MultimodalModel::new(&cfg).unwrap();
        open_gates(&mut m, 0.4);
        m.params.set_all_trainable(true);
        let seq = TokenSequence::instruction("ok?", "yes");
        let checks = grad_check_model(&m, &image(&cfg, 3), &seq, 3, 1e-5, None).unwrap();
        let worst = checks.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
        assert!(worst < 1e-4, "worst {worst}");
    }
}

//! Architecture, adaptation, training, data and judging configuration.
//!
//! A [`RunConfig`] is one JSON document. Its `preset` field selects a base
//! ([`Preset::Desk`] or [`Preset::PaperShape`]); every other key overrides the
//! preset value at the same path.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisionConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub local_layers: usize,
    pub global_layers: usize,
    /// 1-based local layer numbers whose output is copied out.
    pub tap_layers: Vec<usize>,
    pub heads: usize,
    pub ffn_mult: usize,
    pub gate_init: f64,
}

impl VisionConfig {
    pub fn grid(&self) -> usize {
        self.image_size / self.patch_size
    }

    /// Number of patches N.
    pub fn num_patches(&self) -> usize {
        self.grid() * self.grid()
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    /// Width d' of the concatenated visual representation.
    pub fn output_dim(&self) -> usize {
        self.embed_dim * (1 + self.tap_layers.len())
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("vision: {m}")));
        if self.patch_size == 0 || self.image_size == 0 || self.image_size % self.patch_size != 0 {
            return bad(format!(
                "image_size {} not divisible by patch_size {}",
                self.image_size, self.patch_size
            ));
        }
        if !matches!(self.channels, 1 | 3) {
            return bad(format!("channels must be 1 or 3, got {}", self.channels));
        }
        if self.embed_dim == 0 || self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.local_layers == 0 || self.ffn_mult == 0 {
            return bad("local_layers and ffn_mult must be positive".into());
        }
        if self.tap_layers.iter().any(|&t| t == 0 || t > self.local_layers) {
            return bad(format!(
                "tap layers {:?} outside 1..={}",
                self.tap_layers, self.local_layers
            ));
        }
        if self.tap_layers.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("tap layers {:?} not strictly ascending", self.tap_layers));
        }
        if !self.gate_init.is_finite() {
            return bad("gate_init must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    /// 1-based index of the first block carrying cross-attention.
    pub cross_start: usize,
    pub cross_interval: usize,
    pub max_seq: usize,
    pub ffn_mult: usize,
    pub gate_init: f64,
}

impl LmConfig {
    /// 1-based block indices that carry a cross-attention sub-block.
    pub fn cross_attn_layer_indices(&self) -> Vec<usize> {
        if self.cross_interval == 0 {
            return Vec::new();
        }
        (self.cross_start..=self.layers)
            .step_by(self.cross_interval)
            .filter(|&i| i >= 1)
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("language model: {m}")));
        if self.hidden_dim == 0 || self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return bad(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.cross_start < 1 || self.cross_interval < 1 {
            return bad("cross_start and cross_interval must be ≥ 1".into());
        }
        if self.vocab_size < crate::tokenizer::VOCAB_SIZE {
            return bad(format!(
                "vocab_size {} smaller than the byte vocabulary {}",
                self.vocab_size,
                crate::tokenizer::VOCAB_SIZE
            ));
        }
        if self.layers == 0 || self.max_seq < 2 || self.ffn_mult == 0 {
            return bad("layers, ffn_mult must be positive and max_seq ≥ 2".into());
        }
        if !self.gate_init.is_finite() {
            return bad("gate_init must be finite".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub vision: VisionConfig,
    pub lm: LmConfig,
    /// Seed of the base-weight initialization.
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.vision.validate()?;
        self.lm.validate()
    }

    /// (input, output) widths of the vision-to-language projection.
    pub fn projection_dims(&self) -> (usize, usize) {
        (self.vision.output_dim(), self.lm.hidden_dim)
    }
}

/// Which parameters receive adapters before exclusions are applied.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TargetRule {
    /// Every 2-D weight of attention, feed-forward and projection sub-blocks.
    Linear,
    /// Every 2-D parameter, embeddings and output head included.
    All2d,
    /// Parameters whose name contains any of the given substrings.
    NameContains(Vec<String>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
    pub target: TargetRule,
    /// Name components that never receive an adapter.
    pub exclusions: Vec<String>,
    /// Forces `lm_head` and `embed_tokens` into the exclusions.
    pub paper_mode: bool,
    /// Also unfreeze the scalar tanh gates.
    pub train_gates: bool,
}

impl LoraConfig {
    pub const PAPER_EXCLUSIONS: [&'static str; 2] = ["lm_head", "embed_tokens"];

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn effective_exclusions(&self) -> Vec<String> {
        let mut ex = self.exclusions.clone();
        if self.paper_mode {
            for name in Self::PAPER_EXCLUSIONS {
                if !ex.iter().any(|e| e == name) {
                    ex.push(name.to_string());
                }
            }
        }
        ex
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank < 1 {
            return Err(Error::Config("lora: rank must be ≥ 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("lora: dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.alpha.is_finite() {
            return Err(Error::Config("lora: alpha must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TuningMode {
    Lora,
    Partial,
    Frozen,
    Full,
}

impl std::str::FromStr for TuningMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(TuningMode::Lora),
            "partial" => Ok(TuningMode::Partial),
            "frozen" => Ok(TuningMode::Frozen),
            "full" => Ok(TuningMode::Full),
            other => Err(Error::Config(format!("unknown tuning mode {other:?}"))),
        }
    }
}

impl TuningMode {
    pub fn as_str(self) -> &'static str {
        match self {
            TuningMode::Lora => "lora",
            TuningMode::Partial => "partial",
            TuningMode::Frozen => "frozen",
            TuningMode::Full => "full",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum OptimizerConfig {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub min_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub grad_accum: usize,
    pub mode: TuningMode,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    pub checkpoint_path: Option<String>,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0) {
            return Err(Error::Config("train: base_lr must be > 0".into()));
        }
        if !(self.min_lr >= 0.0 && self.min_lr <= self.base_lr) {
            return Err(Error::Config("train: min_lr must lie in [0, base_lr]".into()));
        }
        if self.epochs < 1 {
            return Err(Error::Config("train: epochs must be ≥ 1".into()));
        }
        if self.batch_size < 1 || self.grad_accum < 1 {
            return Err(Error::Config("train: batch_size and grad_accum must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// One augmentation transform with its parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Transform {
    Crease { count: usize, darkness: f64 },
    GaussianNoise { sigma: f64 },
    SaltPepper { fraction: f64 },
    Rotate { degrees: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_test: usize,
    pub leads: usize,
    pub sample_rate: f64,
    pub duration_s: f64,
    pub layout_rows: usize,
    pub layout_cols: usize,
    pub multi_label_rate: f64,
    /// Augmentations applied to every rendered image, in order.
    pub augment: Vec<Transform>,
    /// Parameters of each augmentation are jittered per sample when set.
    pub randomize_augment: bool,
}

impl DataConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train < 1 || self.n_test < 1 {
            return Err(Error::Config("data: counts must be ≥ 1".into()));
        }
        if self.leads < 1 || self.layout_rows * self.layout_cols < self.leads {
            return Err(Error::Config(format!(
                "data: layout {}x{} cannot hold {} leads",
                self.layout_rows, self.layout_cols, self.leads
            )));
        }
        if !(0.0..=1.0).contains(&self.multi_label_rate) {
            return Err(Error::Config("data: multi_label_rate outside [0, 1]".into()));
        }
        if !(self.sample_rate > 0.0 && self.duration_s > 0.0) {
            return Err(Error::Config("data: sample_rate and duration must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JudgeKind {
    Builtin,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeConfig {
    pub kind: JudgeKind,
    /// Endpoint of a remote judge; falls back to `ECGLAB_JUDGE_URL`.
    pub url: Option<String>,
    pub timeout_s: f64,
}

/// Source of the per-class scores used for AUC.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreSource {
    /// 1.0 / 0.0 from the labels found in the generated text.
    Text,
    /// Posterior mass of each class over all templated answers.
    AnswerPosterior,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub max_new_tokens: usize,
    pub scores: ScoreSource,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Desk,
    PaperShape,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub model: ModelConfig,
    pub lora: LoraConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub judge: JudgeConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn desk() -> Self {
        RunConfig {
            preset: Preset::Desk,
            model: ModelConfig {
                vision: VisionConfig {
                    image_size: 128,
                    patch_size: 16,
                    channels: 1,
                    embed_dim: 32,
                    local_layers: 4,
                    global_layers: 2,
                    tap_layers: vec![1, 3],
                    heads: 4,
                    ffn_mult: 4,
                    gate_init: 0.0,
                },
                lm: LmConfig {
                    vocab_size: crate::tokenizer::VOCAB_SIZE,
                    layers: 4,
                    hidden_dim: 32,
                    heads: 4,
                    cross_start: 1,
                    cross_interval: 2,
                    max_seq: 128,
                    ffn_mult: 4,
                    gate_init: 0.0,
                },
                seed: 7,
            },
            lora: LoraConfig {
                rank: 64,
                alpha: 128.0,
                dropout: 0.05,
                target: TargetRule::Linear,
                exclusions: Vec::new(),
                paper_mode: true,
                train_gates: true,
            },
            train: TrainConfig {
                base_lr: 2e-4,
                min_lr: 0.0,
                epochs: 3,
                batch_size: 4,
                grad_accum: 1,
                mode: TuningMode::Lora,
                optimizer: OptimizerConfig::Adam {
                    beta1: 0.9,
                    beta2: 0.999,
                    eps: 1e-8,
                },
                seed: 17,
                checkpoint_path: None,
            },
            data: DataConfig {
                n_train: 512,
                n_test: 128,
                leads: 4,
                sample_rate: 250.0,
                duration_s: 2.5,
                layout_rows: 4,
                layout_cols: 1,
                multi_label_rate: 0.2,
                augment: vec![
                    Transform::Rotate { degrees: 2.0 },
                    Transform::Crease {
                        count: 1,
                        darkness: 0.25,
                    },
                    Transform::GaussianNoise { sigma: 4.0 },
                    Transform::SaltPepper { fraction: 0.002 },
                ],
                randomize_augment: true,
            },
            judge: JudgeConfig {
                kind: JudgeKind::Builtin,
                url: None,
                timeout_s: 30.0,
            },
            eval: EvalConfig {
                max_new_tokens: 48,
                scores: ScoreSource::Text,
            },
        }
    }

    /// Every architectural and fine-tuning constant at full published scale.
    /// Only for shape and index validation; never instantiated.
    pub fn paper_shape() -> Self {
        let mut cfg = RunConfig::desk();
        cfg.preset = Preset::PaperShape;
        cfg.model.vision = VisionConfig {
            image_size: 448,
            patch_size: 14,
            channels: 3,
            embed_dim: 1280,
            local_layers: 32,
            global_layers: 8,
            tap_layers: vec![3, 7, 15, 23, 30],
            heads: 16,
            ffn_mult: 4,
            gate_init: 0.0,
        };
        cfg.model.lm = LmConfig {
            vocab_size: crate::tokenizer::VOCAB_SIZE,
            layers: 40,
            hidden_dim: 4096,
            heads: 32,
            cross_start: 3,
            cross_interval: 5,
            max_seq: 2048,
            ffn_mult: 4,
            gate_init: 0.0,
        };
        cfg
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => RunConfig::desk(),
            Preset::PaperShape => RunConfig::paper_shape(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.lora.validate()?;
        self.train.validate()?;
        self.data.validate()?;
        if self.data.layout_rows == 0 || self.model.vision.image_size < self.data.layout_rows {
            return Err(Error::Config("data layout taller than the image".into()));
        }
        if self.judge.timeout_s <= 0.0 {
            return Err(Error::Config("judge timeout must be positive".into()));
        }
        Ok(())
    }

    /// Parses a JSON document over its preset, then applies `key=value`
    /// overrides with dotted paths. Values parse as JSON, falling back to a
    /// plain string.
    pub fn from_json_str(text: &str, overrides: &[String]) -> Result<Self> {
        let user: Value = serde_json::from_str(text)
            .map_err(|e| Error::Config(format!("invalid JSON at line {} column {}: {e}", e.line(), e.column())))?;
        let preset = match user.get("preset") {
            None => Preset::Desk,
            Some(p) => serde_json::from_value(p.clone()).map_err(|e| Error::Config(format!("preset: {e}")))?,
        };
        let mut merged = serde_json::to_value(RunConfig::preset(preset)).expect("serializable");
        merge(&mut merged, &user);
        for ov in overrides {
            apply_override(&mut merged, ov)?;
        }
        let cfg: RunConfig = serde_json::from_value(merged).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("serializable")
    }

    /// Stable short hash of the configuration.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let canon = serde_json::to_string(self).expect("serializable");
        let digest = Sha256::digest(canon.as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (b, o) => *b = o.clone(),
    }
}

fn apply_override(root: &mut Value, spec: &str) -> Result<()> {
    let (path, raw) = spec
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {spec:?} is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = root;
    let keys: Vec<&str> = path.split('.').collect();
    for (i, key) in keys.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("override path {path:?} is not an object")))?;
        if i + 1 == keys.len() {
            if !obj.contains_key(*key) {
                return Err(Error::Config(format!("unknown config key {path:?}")));
            }
            obj.insert(key.to_string(), value);
            return Ok(());
        }
        cur = obj
            .get_mut(*key)
            .ok_or_else(|| Error::Config(format!("unknown config key {path:?}")))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        RunConfig::desk().validate().unwrap();
        RunConfig::paper_shape().validate().unwrap();
    }

    #[test]
    fn cross_schedule_examples() {
        let mut lm = RunConfig::paper_shape().model.lm;
        assert_eq!(lm.cross_attn_layer_indices(), vec![3, 8, 13, 18, 23, 28, 33, 38]);
        lm.layers = 10;
        assert_eq!(lm.cross_attn_layer_indices(), vec![3, 8]);
        lm.layers = 2;
        assert!(lm.cross_attn_layer_indices().is_empty());
    }

    #[test]
    fn vision_dimension_law() {
        let v = RunConfig::paper_shape().model.vision;
        assert_eq!(v.num_patches(), 1024);
        assert_eq!(v.output_dim(), 7680);
        let d = RunConfig::desk().model.vision;
        assert_eq!(d.output_dim(), 96);
    }

    #[test]
    fn invalid_taps_rejected() {
        let mut v = RunConfig::desk().model.vision;
        v.tap_layers = vec![3, 1];
        assert!(v.validate().is_err());
        v.tap_layers = vec![0];
        assert!(v.validate().is_err());
        v.tap_layers = vec![5];
        assert!(v.validate().is_err());
        v.tap_layers = vec![];
        v.image_size = 130;
        assert!(v.validate().is_err());
    }

    #[test]
    fn json_overrides_apply_over_preset() {
        let cfg = RunConfig::from_json_str(
            r#"{"preset": "desk", "train": {"epochs": 1}}"#,
            &["lora.rank=8".into(), "train.mode=partial".into()],
        )
        .unwrap();
        assert_eq!(cfg.train.epochs, 1);
        assert_eq!(cfg.lora.rank, 8);
        assert_eq!(cfg.train.mode, TuningMode::Partial);
        assert_eq!(cfg.train.batch_size, 4);
    }

    #[test]
    fn bad_json_reports_position() {
        let err = RunConfig::from_json_str("{\n  \"preset\": desk\n}", &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("line 2"), "{msg}");
    }

    #[test]
    fn zero_epochs_rejected() {
        assert!(RunConfig::from_json_str(r#"{"train": {"epochs": 0}}"#, &[]).is_err());
        assert!(RunConfig::from_json_str("{}", &["nope.x=1".into()]).is_err());
    }

    #[test]
    fn paper_exclusions_forced() {
        let mut l = RunConfig::desk().lora;
        l.exclusions.clear();
        l.paper_mode = true;
        let ex = l.effective_exclusions();
        assert!(ex.contains(&"lm_head".to_string()));
        assert!(ex.contains(&"embed_tokens".to_string()));
        l.paper_mode = false;
        assert!(l.effective_exclusions().is_empty());
    }
}

#![allow(dead_code)]

use ecglab::data::dataset::{generate_sample, Split};
use ecglab::train::TrainItem;
use ecglab::RunConfig;

/// Desk preset shrunk so a forward pass takes well under a millisecond.
pub fn tiny_config() -> RunConfig {
    let mut cfg = RunConfig::desk();
    cfg.model.vision.image_size = 32;
    cfg.model.vision.patch_size = 8;
    cfg.model.vision.embed_dim = 8;
    cfg.model.vision.heads = 2;
    cfg.model.lm.hidden_dim = 8;
    cfg.model.lm.heads = 2;
    cfg.lora.rank = 4;
    cfg.lora.alpha = 8.0;
    cfg.data.n_train = 18;
    cfg.data.n_test = 12;
    cfg.eval.max_new_tokens = 8;
    cfg
}

/// In-memory training items from the synthetic generator.
pub fn items(cfg: &RunConfig, n: usize, seed: u64) -> Vec<TrainItem> {
    (0..n)
        .map(|i| {
            let s = generate_sample(&cfg.data, cfg.model.vision.image_size, Split::Train, i, seed).unwrap();
            TrainItem {
                image: s.image.to_tensor(cfg.model.vision.channels),
                seq: ecglab::tokenizer::TokenSequence::instruction(&s.record.question, &s.record.answer),
            }
        })
        .collect()
}

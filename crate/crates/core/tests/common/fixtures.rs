//! Small models and datasets shared by the integration tests.

#![allow(dead_code)]

use relattn::data::{generate_synthetic, SyntheticConfig, SyntheticSplits, Vocabularies};
use relattn::encoder::{EncoderConfig, PositionMode};
use relattn::model::{Model, ModelConfig};
use relattn::posattn::{BinConfig, PosAttnConfig};
use relattn::tensor::RngState;

pub fn small_splits(train: usize, seed: u64) -> SyntheticSplits {
    let cfg = SyntheticConfig { train, dev: 40, test: 40, ..Default::default() };
    generate_synthetic(&cfg, &mut RngState::new(seed)).unwrap()
}

pub fn small_config(mode: PositionMode, use_posattn: bool) -> ModelConfig {
    ModelConfig {
        word_dim: 8,
        ner_dim: 2,
        pos_dim: 2,
        encoder: EncoderConfig { position_mode: mode, num_heads: 2, ff_hidden: 6, max_len: 20, ..Default::default() },
        use_posattn,
        posattn: PosAttnConfig { pos_dim: 3, attn_dim: 5, bins: BinConfig::for_length(20) },
        ..Default::default()
    }
}

pub fn small_model(splits: &SyntheticSplits, config: ModelConfig, seed: u64) -> Model {
    let vocabs = Vocabularies::from_splits(&splits.train, &[&splits.dev, &splits.test], 1);
    Model::new(config, vocabs, &mut RngState::new(seed)).unwrap()
}

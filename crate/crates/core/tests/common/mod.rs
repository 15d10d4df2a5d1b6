//! Shared fixtures for integration tests.

#![allow(dead_code)]

use propedit::model::{ModelConfig, Tokenizer, TransformerModel};
use propedit::train::{build_corpus, tokenizer_for, train, Corpus, TrainConfig, TrainReport};
use propedit::world::{emit_dataset, generate_world, DatasetManifest, EmitOptions, FactWorld, Style};

pub fn init_logging() {
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .is_test(true)
        .try_init();
}

/// A world, its corpus and a model trained on it.
pub struct Trained {
    pub world: FactWorld,
    pub tok: Tokenizer,
    pub corpus: Corpus,
    pub model: TransformerModel,
    pub report: TrainReport,
}

impl Trained {
    pub fn new(world: FactWorld, model_cfg: impl FnOnce(usize) -> ModelConfig, train_cfg: &TrainConfig) -> Self {
        let tok = tokenizer_for(&world);
        let corpus = build_corpus(&world, &tok, train_cfg.seed).expect("corpus");
        let mut model = TransformerModel::new(model_cfg(tok.vocab_size()), train_cfg.seed).expect("model");
        let report = train(&mut model, &corpus, tok.answer_ids(), train_cfg).expect("training");
        Self { world, tok, corpus, model, report }
    }

    pub fn calibration(&self) -> Vec<Vec<u32>> {
        self.corpus.train.iter().map(|e| e.ids.clone()).collect()
    }

    /// `n` held-out prompts for revert checks.
    pub fn probe(&self, n: usize) -> Vec<Vec<u32>> {
        self.corpus.held_out.iter().take(n).map(|e| e.ids.clone()).collect()
    }

    pub fn manifest(&self, style: Style, n: usize, seed: u64) -> DatasetManifest {
        emit_dataset(&self.world, style, n, seed, EmitOptions::default()).expect("dataset")
    }
}

/// A small two-layer model on a small world; trains in seconds.
pub fn small_trained() -> Trained {
    let world = generate_world(3, 20, 3).expect("world");
    let cfg = TrainConfig { epochs: 2, batch_size: 16, lr: 1e-3, ..Default::default() };
    Trained::new(
        world,
        |v| ModelConfig { n_layers: 4, d_model: 32, n_heads: 2, d_hidden: 64, vocab_size: v, max_seq_len: 32 },
        &cfg,
    )
}

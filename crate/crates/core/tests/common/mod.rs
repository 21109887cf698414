#![allow(dead_code)]

use gradmask_core::corpus::{Corpus, CorpusConfig, Split};
use gradmask_core::encoder::EncoderConfig;
use gradmask_core::gass::GassConfig;
use gradmask_core::model::ModelConfig;
use gradmask_core::objectives::DecoderConfig;
use gradmask_core::train::{Dataset, TrainConfig};

pub fn small_corpus(train: usize, test: usize, seed: u64) -> Corpus {
    Corpus::generate(&CorpusConfig {
        train,
        test,
        seed,
        ..CorpusConfig::default()
    })
    .unwrap()
}

pub fn datasets(corpus: &Corpus) -> (Dataset, Dataset) {
    (
        Dataset::from_corpus(corpus, Split::Train).unwrap(),
        Dataset::from_corpus(corpus, Split::Test).unwrap(),
    )
}

/// A narrow two-layer model over the corpus vocabulary.
pub fn small_config(corpus: &Corpus, seed: u64) -> TrainConfig {
    let vocab = corpus.manifest.vocab_size;
    let encoder = EncoderConfig {
        depth: 2,
        width: 16,
        heads: 2,
        mlp_ratio: 2,
        ..EncoderConfig::default()
    };
    let decoder = DecoderConfig {
        mlp_ratio: 2,
        ..DecoderConfig::default()
    };
    let model = ModelConfig { encoder, decoder }.with_vocab_size(vocab);
    TrainConfig {
        gass: GassConfig::for_depth(2),
        model,
        epochs: 3,
        warmup_epochs: 1,
        batch_size: 8,
        lr: 1e-3,
        seed,
        ..TrainConfig::default()
    }
}

#![allow(dead_code)]

use std::time::{Duration, Instant};

use birel::contrastive::{AnchorRole, ContrastiveConfig, ContrastiveGroup, GroupIndex};
use birel::corpus::{parse_dataset, Corpus};
use birel::decode::{DecodeConfig, Directions};
use birel::encoder::{EncoderConfig, TokenVocab};
use birel::metrics::MatchStandard;
use birel::model::{Model, ModelSwitches};
use birel::nn::ParamStore;
use birel::synthetic::{generate, to_json_lines};
use birel::tokenize::TokenizerKind;
use birel::train::{train_loop, TrainConfig, TrainSetup, TrainSummary};
use candle_core::{Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// Aligned synthetic corpus.
pub fn toy_corpus(n: usize, seed: u64) -> Corpus {
    let ds = parse_dataset(&to_json_lines(&generate(n, seed)), MatchStandard::Exact, false).unwrap();
    Corpus::align(&ds, &ds.vocab, &TokenizerKind::Basic, 100).unwrap().0
}

pub fn random_vec(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.random_range(-1.0..1.0)).collect()
}

pub fn random_group(rng: &mut ChaCha8Rng, d: usize, np: usize, nn: usize) -> ContrastiveGroup {
    ContrastiveGroup {
        anchor: random_vec(rng, d),
        positives: (0..np).map(|_| random_vec(rng, d)).collect(),
        negatives: (0..nn).map(|_| random_vec(rng, d)).collect(),
    }
}

/// Lays groups out as disjoint rows of one embedding matrix.
pub fn flatten(groups: &[ContrastiveGroup]) -> (Tensor, Vec<GroupIndex>) {
    let mut rows: Vec<f64> = Vec::new();
    let mut index = Vec::new();
    let mut next = 0;
    let d = groups[0].anchor.len();
    for g in groups {
        let mut take = |v: &Vec<f64>| {
            rows.extend(v);
            next += 1;
            next - 1
        };
        let anchor = take(&g.anchor);
        let positives = g.positives.iter().map(&mut take).collect();
        let negatives = g.negatives.iter().map(&mut take).collect();
        index.push(GroupIndex {
            role: AnchorRole::Subject,
            anchor,
            positives,
            negatives,
        });
    }
    let m = rows.len() / d;
    (Tensor::from_vec(rows, (m, d), &Device::Cpu).unwrap(), index)
}

pub fn tiny_encoder() -> EncoderConfig {
    EncoderConfig {
        hidden: 16,
        layers: 1,
        heads: 2,
        ffn: 32,
        max_len: 40,
    }
}

pub struct OverfitRun {
    pub summary: TrainSummary,
    pub elapsed: Duration,
}

/// Trains the small model used for overfit checks on `corpus`, scoring on the same sentences.
pub fn overfit(corpus: &Corpus, directions: Directions, contrastive: bool, target: f64) -> OverfitRun {
    let tokens = TokenVocab::from_examples(&corpus.examples);
    let mut store = ParamStore::new(7, Device::Cpu);
    let switches = ModelSwitches {
        directions,
        ..Default::default()
    };
    let encoder = EncoderConfig {
        hidden: 64,
        layers: 2,
        heads: 4,
        ffn: 256,
        max_len: 100,
    };
    let model = Model::new(&mut store, encoder, tokens.len(), corpus.vocab.len(), switches).unwrap();
    let config = TrainConfig {
        batch_size: 4,
        peak_lr: 1e-3,
        max_epochs: 300,
        patience: 300,
        target_f1: Some(target),
        ..Default::default()
    };
    let c = ContrastiveConfig {
        enabled: contrastive,
        ..Default::default()
    };
    let setup = TrainSetup {
        model: &model,
        store: &store,
        tokens: &tokens,
        train: &corpus.examples,
        valid: &corpus.examples,
        config: &config,
        contrastive: &c,
        decode: &DecodeConfig::default(),
        standard: MatchStandard::Exact,
        dump_path: None,
    };
    let start = Instant::now();
    let summary = train_loop(&setup, &mut |_| Ok(())).unwrap();
    OverfitRun {
        summary,
        elapsed: start.elapsed(),
    }
}

//! Deterministic toy corpus generation: copy tasks with optional target-side
//! token noise, used by training-dependent tests.

#![allow(dead_code)]

use fideval::nmt::{SentencePair, Vocab};
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub struct ToyCorpus {
    pub src_lines: Vec<Vec<String>>,
    pub tgt_lines: Vec<Vec<String>>,
    pub vocab: Vocab,
    pub pairs: Vec<SentencePair>,
}

/// `vocab_types` word types (beyond the reserved four), lengths in
/// `1..=max_real_len`, target = source with each token independently
/// replaced by a random type with probability `noise`.
pub fn copy_corpus(
    n_pairs: usize,
    vocab_types: usize,
    max_real_len: usize,
    noise: f64,
    seed: u64,
) -> ToyCorpus {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let types: Vec<String> = (0..vocab_types).map(|i| format!("w{i:02}")).collect();
    let mut src_lines = Vec::with_capacity(n_pairs);
    let mut tgt_lines = Vec::with_capacity(n_pairs);
    for _ in 0..n_pairs {
        let len = rng.random_range(1..=max_real_len);
        let src: Vec<String> = (0..len)
            .map(|_| types[rng.random_range(0..types.len())].clone())
            .collect();
        let tgt: Vec<String> = src
            .iter()
            .map(|tok| {
                if noise > 0.0 && rng.random_bool(noise) {
                    types[rng.random_range(0..types.len())].clone()
                } else {
                    tok.clone()
                }
            })
            .collect();
        src_lines.push(src);
        tgt_lines.push(tgt);
    }
    let mut all = src_lines.clone();
    all.extend(tgt_lines.clone());
    let vocab = Vocab::build(&all, 1).unwrap();
    let pairs: Vec<SentencePair> = src_lines
        .iter()
        .zip(&tgt_lines)
        .map(|(s, t)| SentencePair::encode(s, t, &vocab, &vocab))
        .collect();
    ToyCorpus {
        src_lines,
        tgt_lines,
        vocab,
        pairs,
    }
}

pub struct TrainedCopy {
    pub corpus: ToyCorpus,
    pub model: fideval::nmt::NmtModel,
}

/// Pure-copy transformer trained once per test binary; small dims keep this
/// in the low seconds.
pub fn trained_copy_transformer() -> &'static TrainedCopy {
    use fideval::nmt::{train_nmt, ModelConfig, ModelKind, TrainConfig};
    use std::sync::OnceLock;
    static FIXTURE: OnceLock<TrainedCopy> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let corpus = copy_corpus(600, 12, 6, 0.0, 2024);
        let cfg = TrainConfig {
            epochs: 6,
            batch_size: 16,
            lr: 2e-3,
            valid_fraction: 0.1,
            seed: 2024,
        };
        let model_cfg = ModelConfig {
            kind: ModelKind::Transformer,
            emb_dim: 32,
            hidden_dim: 64,
            max_len: 16,
        };
        let (model, _) = train_nmt(&corpus.pairs, model_cfg, &cfg, &corpus.vocab, &corpus.vocab)
            .expect("copy-task training");
        TrainedCopy { corpus, model }
    })
}

pub fn write_corpus_files(
    dir: &std::path::Path,
    stem: &str,
    corpus: &ToyCorpus,
) -> (std::path::PathBuf, std::path::PathBuf) {
    let join = |lines: &[Vec<String>]| {
        lines
            .iter()
            .map(|l| l.join(" "))
            .collect::<Vec<_>>()
            .join("\n")
            + "\n"
    };
    let src = dir.join(format!("{stem}.src"));
    let tgt = dir.join(format!("{stem}.tgt"));
    std::fs::write(&src, join(&corpus.src_lines)).unwrap();
    std::fs::write(&tgt, join(&corpus.tgt_lines)).unwrap();
    (src, tgt)
}

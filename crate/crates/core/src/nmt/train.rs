use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nmt::corpus::SentencePair;
use crate::nmt::model::{argmax, ModelConfig, NmtModel};
use crate::nmt::vocab::Vocab;
use crate::tensor::{Adam, AdamConfig, ParamStore, Tensor};

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub valid_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 16,
            lr: 1e-3,
            valid_fraction: 0.1,
            seed: 42,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LogRow {
    pub epoch: usize,
    pub train_nll: Option<f64>,
    pub valid_nll: f64,
}

#[derive(Debug, Clone, Default)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("epoch,train_nll,valid_nll\n");
        for row in &self.rows {
            let train = row
                .train_nll
                .map(|v| format!("{v:.6}"))
                .unwrap_or_default();
            out.push_str(&format!("{},{},{:.6}\n", row.epoch, train, row.valid_nll));
        }
        std::fs::write(path, out)?;
        Ok(())
    }
}

/// Deterministic split of pair indices into (train, valid).
pub fn split_indices(n: usize, valid_fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5911_7000_u64);
    idx.shuffle(&mut rng);
    let n_valid = ((n as f64 * valid_fraction).round() as usize).min(n.saturating_sub(1));
    let valid = idx[..n_valid].to_vec();
    let train = idx[n_valid..].to_vec();
    (train, valid)
}

/// Mean per-token teacher-forcing NLL over a set of pairs.
pub fn eval_nll(model: &NmtModel, pairs: &[&SentencePair]) -> Result<f64> {
    let mut nll_sum = 0.0f64;
    let mut tokens = 0usize;
    for pair in pairs {
        let sweep = model.sweep(pair)?;
        nll_sum += sweep.graph.value(sweep.mean_nll).item() as f64 * sweep.tokens as f64;
        tokens += sweep.tokens;
    }
    Ok(nll_sum / tokens.max(1) as f64)
}

/// Fraction of timesteps where the model argmax equals the gold token.
pub fn token_accuracy(model: &NmtModel, pairs: &[&SentencePair]) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for pair in pairs {
        let sweep = model.sweep(pair)?;
        for (t, &dist) in sweep.dists.iter().enumerate() {
            if argmax(sweep.graph.value(dist).data()) == pair.y[t] {
                hits += 1;
            }
            total += 1;
        }
    }
    Ok(hits as f64 / total.max(1) as f64)
}

/// Train a fresh model by likelihood maximization with mini-batch Adam and
/// return the checkpoint with the best validation NLL (the initialization
/// counts as epoch 0, so zero epochs returns the initial parameters).
pub fn train_nmt(
    pairs: &[SentencePair],
    model_cfg: ModelConfig,
    cfg: &TrainConfig,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
) -> Result<(NmtModel, TrainLog)> {
    if pairs.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut model = NmtModel::init(model_cfg, src_vocab, tgt_vocab, cfg.seed)?;
    let (train_idx, valid_idx) = split_indices(pairs.len(), cfg.valid_fraction, cfg.seed);
    let valid: Vec<&SentencePair> = if valid_idx.is_empty() {
        pairs.iter().collect()
    } else {
        valid_idx.iter().map(|&i| &pairs[i]).collect()
    };

    let mut log = TrainLog::default();
    let mut best_params: ParamStore = model.params.clone();
    let mut best_valid = eval_nll(&model, &valid)?;
    log.rows.push(LogRow {
        epoch: 0,
        train_nll: None,
        valid_nll: best_valid,
    });

    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut order = train_idx;
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x0badc0de_u64);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_nll = 0.0f64;
        let mut epoch_tokens = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: BTreeMap<String, Tensor> = BTreeMap::new();
            let mut batch_tokens = 0usize;
            for &i in batch {
                let pair = &pairs[i];
                let sweep = model.sweep(pair)?;
                let mean = sweep.graph.value(sweep.mean_nll).item();
                if !mean.is_finite() {
                    return Err(Error::Diverged { epoch });
                }
                epoch_nll += mean as f64 * sweep.tokens as f64;
                epoch_tokens += sweep.tokens;
                batch_tokens += sweep.tokens;
                let grads = sweep.graph.backward(sweep.mean_nll)?;
                let weight = sweep.tokens as f32;
                for (name, g) in grads.into_param_grads() {
                    match acc.get_mut(&name) {
                        Some(t) => {
                            for (a, b) in t.data_mut().iter_mut().zip(g.data()) {
                                *a += weight * b;
                            }
                        }
                        None => {
                            let mut t = g;
                            t.data_mut().iter_mut().for_each(|v| *v *= weight);
                            acc.insert(name, t);
                        }
                    }
                }
            }
            let inv = 1.0 / batch_tokens.max(1) as f32;
            for t in acc.values_mut() {
                t.data_mut().iter_mut().for_each(|v| *v *= inv);
            }
            opt.step(&mut model.params, &acc);
        }
        let train_nll = epoch_nll / epoch_tokens.max(1) as f64;
        if !train_nll.is_finite() {
            return Err(Error::Diverged { epoch });
        }
        let valid_nll = eval_nll(&model, &valid)?;
        log.rows.push(LogRow {
            epoch,
            train_nll: Some(train_nll),
            valid_nll,
        });
        if valid_nll < best_valid {
            best_valid = valid_nll;
            best_params = model.params.clone();
            log.best_epoch = epoch;
        }
        log::info!("nmt epoch {epoch}: train nll {train_nll:.4}, valid nll {valid_nll:.4}");
    }

    model.params = best_params;
    Ok((model, log))
}

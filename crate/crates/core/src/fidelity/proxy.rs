//! Proxy models that predict the NMT label from the rule words alone:
//! a bag-of-words feedforward net (FN), a bidirectional LSTM (RN), and a
//! self-attention encoder (SA), the latter two attention-pooled by a
//! learned query over position- and side-aware slot representations.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nmt::Vocab;
use crate::rules::RuleInstance;
use crate::tensor::{sinusoidal_table, Graph, NodeId, ParamStore, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProxyKind {
    Fn,
    Rn,
    Sa,
}

impl ProxyKind {
    pub const ALL: [ProxyKind; 3] = [ProxyKind::Fn, ProxyKind::Rn, ProxyKind::Sa];

    pub fn as_str(&self) -> &'static str {
        match self {
            ProxyKind::Fn => "fn",
            ProxyKind::Rn => "rn",
            ProxyKind::Sa => "sa",
        }
    }

    pub fn parse(s: &str) -> Result<ProxyKind> {
        match s {
            "fn" => Ok(ProxyKind::Fn),
            "rn" => Ok(ProxyKind::Rn),
            "sa" => Ok(ProxyKind::Sa),
            other => Err(Error::Config(format!("unknown proxy kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ProxyConfig {
    pub emb_dim: usize,
    pub hidden_dim: usize,
    /// width of the three fully connected layers in the FN proxy
    pub fn_hidden: usize,
    pub max_len: usize,
}

impl Default for ProxyConfig {
    fn default() -> Self {
        ProxyConfig {
            emb_dim: 64,
            hidden_dim: 128,
            fn_hidden: 256,
            max_len: 64,
        }
    }
}

/// Fixed input layout: k source slots then k target slots, PAD-filled.
pub struct ProxyModel {
    pub kind: ProxyKind,
    pub k: usize,
    pub cfg: ProxyConfig,
    pub params: ParamStore,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pe: Tensor,
}

struct SlotInput {
    ids_src: Vec<u32>,
    ids_tgt: Vec<u32>,
    positions: Vec<u32>,
    mask: Vec<f32>,
    filled: usize,
}

impl ProxyModel {
    pub fn init(
        kind: ProxyKind,
        k: usize,
        cfg: ProxyConfig,
        src_vocab: &Vocab,
        tgt_vocab: &Vocab,
        seed: u64,
    ) -> Result<ProxyModel> {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
        if kind == ProxyKind::Rn && cfg.hidden_dim % 2 != 0 {
            return Err(Error::Config(
                "rn proxy hidden_dim must be even (bidirectional)".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (vs, vt) = (src_vocab.size(), tgt_vocab.size());
        let d = cfg.emb_dim;
        let emb_scale = (3.0 / d as f32).sqrt();
        let xavier = |a: usize, b: usize| (6.0 / (a + b) as f32).sqrt();
        p.insert_uniform("src_emb", vec![vs, d], emb_scale, &mut rng)?;
        p.insert_uniform("tgt_emb", vec![vt, d], emb_scale, &mut rng)?;
        match kind {
            ProxyKind::Fn => {
                let h = cfg.fn_hidden;
                p.insert_uniform("fc1.w", vec![d, h], xavier(d, h), &mut rng)?;
                p.insert_zeros("fc1.b", vec![1, h])?;
                p.insert_uniform("fc2.w", vec![h, h], xavier(h, h), &mut rng)?;
                p.insert_zeros("fc2.b", vec![1, h])?;
                p.insert_uniform("fc3.w", vec![h, vt], xavier(h, vt), &mut rng)?;
                p.insert_zeros("fc3.b", vec![1, vt])?;
            }
            ProxyKind::Rn => {
                let h2 = cfg.hidden_dim / 2;
                let lstm_scale = 1.0 / (h2 as f32).sqrt();
                for dir in ["fwd", "bwd"] {
                    p.insert_uniform(
                        &format!("enc.{dir}.wx"),
                        vec![d, 4 * h2],
                        lstm_scale,
                        &mut rng,
                    )?;
                    p.insert_uniform(
                        &format!("enc.{dir}.wh"),
                        vec![h2, 4 * h2],
                        lstm_scale,
                        &mut rng,
                    )?;
                    let mut b = vec![0.0f32; 4 * h2];
                    b[h2..2 * h2].iter_mut().for_each(|v| *v = 1.0);
                    p.insert(&format!("enc.{dir}.b"), Tensor::row(b))?;
                }
                p.insert_uniform("side_emb", vec![2, d], emb_scale, &mut rng)?;
                p.insert_uniform("s0", vec![1, cfg.hidden_dim], 0.1, &mut rng)?;
                p.insert_uniform(
                    "out.w",
                    vec![cfg.hidden_dim, vt],
                    xavier(cfg.hidden_dim, vt),
                    &mut rng,
                )?;
                p.insert_zeros("out.b", vec![1, vt])?;
            }
            ProxyKind::Sa => {
                let f = cfg.hidden_dim;
                for w in ["wq", "wk", "wv"] {
                    p.insert_uniform(&format!("attn.{w}"), vec![d, d], xavier(d, d), &mut rng)?;
                }
                for ln in ["ln1", "ln2"] {
                    p.insert(&format!("{ln}.g"), Tensor::row(vec![1.0; d]))?;
                    p.insert_zeros(&format!("{ln}.b"), vec![1, d])?;
                }
                p.insert_uniform("ffn.w1", vec![d, f], xavier(d, f), &mut rng)?;
                p.insert_zeros("ffn.b1", vec![1, f])?;
                p.insert_uniform("ffn.w2", vec![f, d], xavier(f, d), &mut rng)?;
                p.insert_zeros("ffn.b2", vec![1, d])?;
                p.insert_uniform("side_emb", vec![2, d], emb_scale, &mut rng)?;
                p.insert_uniform("s0", vec![1, d], 0.1, &mut rng)?;
                p.insert_uniform("out.w", vec![d, vt], xavier(d, vt), &mut rng)?;
                p.insert_zeros("out.b", vec![1, vt])?;
            }
        }
        Ok(ProxyModel {
            kind,
            k,
            cfg,
            params: p,
            src_vocab_size: vs,
            tgt_vocab_size: vt,
            pe: sinusoidal_table(cfg.max_len + 1, d),
        })
    }

    fn slots(&self, rule: &RuleInstance) -> Result<SlotInput> {
        let k = self.k;
        if rule.source_words.len() > k || rule.target_words.len() > k {
            return Err(Error::MetaMismatch(format!(
                "rule has {}+{} words but proxy k = {k}",
                rule.source_words.len(),
                rule.target_words.len()
            )));
        }
        if rule.label as usize >= self.tgt_vocab_size {
            return Err(Error::TokenOutOfRange {
                id: rule.label,
                vocab: self.tgt_vocab_size,
            });
        }
        let mut ids_src = vec![crate::nmt::vocab::PAD; k];
        let mut ids_tgt = vec![crate::nmt::vocab::PAD; k];
        let mut positions = vec![0u32; 2 * k];
        let mut mask = vec![0.0f32; 2 * k];
        for (i, w) in rule.source_words.iter().enumerate() {
            if w.token as usize >= self.src_vocab_size {
                return Err(Error::TokenOutOfRange {
                    id: w.token,
                    vocab: self.src_vocab_size,
                });
            }
            if w.pos > self.cfg.max_len {
                return Err(Error::InvalidArgument(format!(
                    "source position {} exceeds max_len {}",
                    w.pos, self.cfg.max_len
                )));
            }
            ids_src[i] = w.token;
            positions[i] = w.pos as u32;
            mask[i] = 1.0;
        }
        for (j, w) in rule.target_words.iter().enumerate() {
            if w.token as usize >= self.tgt_vocab_size {
                return Err(Error::TokenOutOfRange {
                    id: w.token,
                    vocab: self.tgt_vocab_size,
                });
            }
            if w.pos > self.cfg.max_len {
                return Err(Error::InvalidArgument(format!(
                    "target position {} exceeds max_len {}",
                    w.pos, self.cfg.max_len
                )));
            }
            ids_tgt[j] = w.token;
            positions[k + j] = w.pos as u32;
            mask[k + j] = 1.0;
        }
        let filled = mask.iter().filter(|&&m| m > 0.0).count();
        Ok(SlotInput {
            ids_src,
            ids_tgt,
            positions,
            mask,
            filled,
        })
    }

    /// Build the forward graph; returns (graph, dist node).
    pub fn forward(&self, rule: &RuleInstance) -> Result<(Graph<'_>, NodeId)> {
        let slots = self.slots(rule)?;
        let mut g = Graph::new(&self.params);
        let src_tbl = g.param("src_emb")?;
        let e_src = g.embedding(src_tbl, &slots.ids_src)?;
        let tgt_tbl = g.param("tgt_emb")?;
        let e_tgt = g.embedding(tgt_tbl, &slots.ids_tgt)?;
        let emb = g.concat(0, &[e_src, e_tgt])?; // [2k, d]

        let dist = match self.kind {
            ProxyKind::Fn => {
                // position-free bag of words over the filled slots
                let inv = 1.0 / slots.filled.max(1) as f32;
                let wrow: Vec<f32> = slots.mask.iter().map(|&m| m * inv).collect();
                let wnode = g.constant(Tensor::row(wrow));
                let bag = g.matmul(wnode, emb)?;
                let h1 = g.linear(bag, "fc1.w", "fc1.b")?;
                let h1 = g.relu(h1)?;
                let h2 = g.linear(h1, "fc2.w", "fc2.b")?;
                let h2 = g.relu(h2)?;
                let logits = g.linear(h2, "fc3.w", "fc3.b")?;
                g.softmax(1, logits)?
            }
            ProxyKind::Rn | ProxyKind::Sa => {
                let repr = self.slot_reprs(&mut g, emb, &slots)?;
                let mask_col = g.constant(Tensor::col(slots.mask.clone()));
                let h = match self.kind {
                    ProxyKind::Rn => self.bilstm(&mut g, repr)?,
                    _ => self.sa_encoder(&mut g, repr, mask_col)?,
                };
                let s0 = g.param("s0")?;
                let (pooled, _alpha) = g.attention(s0, h, h, Some(mask_col))?;
                let logits = g.linear(pooled, "out.w", "out.b")?;
                g.softmax(1, logits)?
            }
        };
        Ok((g, dist))
    }

    /// Token embedding + original-position encoding + side embedding,
    /// zeroed on PAD slots.
    fn slot_reprs(&self, g: &mut Graph, emb: NodeId, slots: &SlotInput) -> Result<NodeId> {
        let d = self.cfg.emb_dim;
        let scaled = g.scale(emb, (d as f32).sqrt())?;
        let pe_tbl = g.constant(self.pe.clone());
        let pe = g.embedding(pe_tbl, &slots.positions)?;
        let with_pos = g.add(scaled, pe)?;
        let side_tbl = g.param("side_emb")?;
        let side_ids: Vec<u32> = (0..2 * self.k)
            .map(|i| u32::from(i >= self.k))
            .collect();
        let side = g.embedding(side_tbl, &side_ids)?;
        let with_side = g.add(with_pos, side)?;
        let mask_col = g.constant(Tensor::col(slots.mask.clone()));
        g.masked_fill(with_side, mask_col, 0.0)
    }

    fn bilstm(&self, g: &mut Graph, repr: NodeId) -> Result<NodeId> {
        let n = 2 * self.k;
        let h2 = self.cfg.hidden_dim / 2;
        let mut fwd_rows = Vec::with_capacity(n);
        let mut state = g.constant(Tensor::zeros(vec![2, h2]));
        let wx = g.param("enc.fwd.wx")?;
        let wh = g.param("enc.fwd.wh")?;
        let b = g.param("enc.fwd.b")?;
        for i in 0..n {
            let xi = g.pick_row(repr, i)?;
            state = g.lstm_cell(state, xi, wx, wh, b)?;
            fwd_rows.push(g.pick_row(state, 0)?);
        }
        let mut bwd_rows = vec![0; n];
        let mut state = g.constant(Tensor::zeros(vec![2, h2]));
        let wx = g.param("enc.bwd.wx")?;
        let wh = g.param("enc.bwd.wh")?;
        let b = g.param("enc.bwd.b")?;
        for i in (0..n).rev() {
            let xi = g.pick_row(repr, i)?;
            state = g.lstm_cell(state, xi, wx, wh, b)?;
            bwd_rows[i] = g.pick_row(state, 0)?;
        }
        let rows: Vec<NodeId> = (0..n)
            .map(|i| g.concat(1, &[fwd_rows[i], bwd_rows[i]]))
            .collect::<Result<_>>()?;
        g.concat(0, &rows)
    }

    fn sa_encoder(&self, g: &mut Graph, repr: NodeId, mask_col: NodeId) -> Result<NodeId> {
        let n = 2 * self.k;
        let wq = g.param("attn.wq")?;
        let wk = g.param("attn.wk")?;
        let wv = g.param("attn.wv")?;
        let q_all = g.matmul(repr, wq)?;
        let k_all = g.matmul(repr, wk)?;
        let v_all = g.matmul(repr, wv)?;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let qi = g.pick_row(q_all, i)?;
            let (pooled, _) = g.attention(qi, k_all, v_all, Some(mask_col))?;
            rows.push(pooled);
        }
        let att = g.concat(0, &rows)?;
        let res = g.add(repr, att)?;
        let g1 = g.param("ln1.g")?;
        let b1 = g.param("ln1.b")?;
        let u = g.layer_norm(res, g1, b1)?;
        let f1 = g.linear(u, "ffn.w1", "ffn.b1")?;
        let f1 = g.relu(f1)?;
        let f2 = g.linear(f1, "ffn.w2", "ffn.b2")?;
        let res2 = g.add(u, f2)?;
        let g2 = g.param("ln2.g")?;
        let b2 = g.param("ln2.b")?;
        g.layer_norm(res2, g2, b2)
    }

    /// Probability vector over the target vocab for one rule.
    pub fn predict(&self, rule: &RuleInstance) -> Result<Vec<f32>> {
        let (g, dist) = self.forward(rule)?;
        Ok(g.value(dist).data().to_vec())
    }
}

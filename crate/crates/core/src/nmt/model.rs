use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nmt::corpus::{Context, SentencePair};
use crate::nmt::vocab::{Vocab, BOS};
use crate::tensor::{
    read_checkpoint, sinusoidal_table, write_checkpoint, Graph, NodeId, ParamStore, Tensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    RnnSearch,
    Transformer,
}

impl ModelKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ModelKind::RnnSearch => "rnn-search",
            ModelKind::Transformer => "transformer",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rnn-search" => Ok(ModelKind::RnnSearch),
            "transformer" => Ok(ModelKind::Transformer),
            other => Err(Error::Config(format!("unknown model kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub max_len: usize,
}

impl ModelConfig {
    pub fn new(kind: ModelKind) -> Self {
        ModelConfig {
            kind,
            emb_dim: 64,
            hidden_dim: 128,
            max_len: 64,
        }
    }
}

/// Which context word embeddings to keep. Positions are 1-based; absent
/// vectors keep everything. The decoder's BOS slot is bookkeeping, not a
/// context word, and is never masked.
#[derive(Debug, Clone, Default)]
pub struct OcclusionMask {
    pub keep_src: Option<Vec<bool>>,
    pub keep_tgt: Option<Vec<bool>>,
}

impl OcclusionMask {
    pub fn none() -> Self {
        Self::default()
    }

    /// Drop exactly one context word occurrence.
    pub fn drop_one(side: Side, pos: usize, src_len: usize, tgt_len: usize) -> Self {
        let mut m = OcclusionMask::default();
        match side {
            Side::Source => {
                let mut keep = vec![true; src_len];
                keep[pos - 1] = false;
                m.keep_src = Some(keep);
            }
            Side::TargetPrefix => {
                let mut keep = vec![true; tgt_len];
                keep[pos - 1] = false;
                m.keep_tgt = Some(keep);
            }
        }
        m
    }
}

/// Context word side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Side {
    Source,
    TargetPrefix,
}

/// A built forward graph for one decision point, with handles to the nodes
/// the explainers need.
pub struct Forward<'m> {
    pub graph: Graph<'m>,
    /// `[1, V_tgt]` probability row
    pub dist: NodeId,
    /// source embedding lookup `[|x|, d]`, pre-scale/position
    pub src_emb: NodeId,
    /// decoder input embedding lookup `[t, d]`; row 0 is BOS, row j is y_j
    pub tgt_emb: NodeId,
    /// `[|x|, 1]` attention over source positions at timestep t
    pub source_attn: NodeId,
    /// `[t-1, 1]` decoder self-attention (transformer only, t >= 2)
    pub self_attn: Option<NodeId>,
}

impl<'m> Forward<'m> {
    pub fn dist_vec(&self) -> &[f32] {
        self.graph.value(self.dist).data()
    }

    pub fn source_attn_vec(&self) -> Vec<f32> {
        self.graph.value(self.source_attn).data().to_vec()
    }

    pub fn self_attn_vec(&self) -> Option<Vec<f32>> {
        self.self_attn
            .map(|id| self.graph.value(id).data().to_vec())
    }

    pub fn prob(&self, y: u32) -> f32 {
        self.dist_vec()[y as usize]
    }

    pub fn argmax(&self) -> u32 {
        argmax(self.dist_vec())
    }

    /// Append a node selecting `P(y)` from the distribution (for backward).
    pub fn prob_node(&mut self, y: u32) -> Result<NodeId> {
        let v = self.graph.value(self.dist).numel();
        let mut sel = vec![0.0f32; v];
        sel[y as usize] = 1.0;
        let seln = self.graph.constant(Tensor::col(sel));
        self.graph.matmul(self.dist, seln)
    }
}

/// Smallest index wins ties, so decode is deterministic.
pub fn argmax(v: &[f32]) -> u32 {
    let mut best = 0usize;
    for (i, &p) in v.iter().enumerate() {
        if p > v[best] {
            best = i;
        }
    }
    best as u32
}

/// Distilled single-decision output.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub dist: Vec<f32>,
    pub source_attn: Vec<f32>,
    /// transformer: Some, empty at t=1; rnn-search: None
    pub target_attn: Option<Vec<f32>>,
}

/// Full-sentence teacher-forcing pass: one graph, one dist node per
/// timestep, and the mean per-token NLL node for training.
pub struct Sweep<'m> {
    pub graph: Graph<'m>,
    pub dists: Vec<NodeId>,
    pub mean_nll: NodeId,
    pub tokens: usize,
}

#[derive(Serialize, Deserialize)]
struct ModelHeader {
    kind: ModelKind,
    emb_dim: usize,
    hidden_dim: usize,
    max_len: usize,
    src_vocab_size: usize,
    tgt_vocab_size: usize,
    src_vocab_hash: u64,
    tgt_vocab_hash: u64,
}

const MODEL_MAGIC: &[u8; 8] = b"FVNMT\0\0\0";
const MODEL_VERSION: u32 = 1;

/// A desk-scale NMT model: 1-layer bidirectional-LSTM encoder + attention
/// LSTM decoder, or a 1-layer single-head transformer with residual
/// connections and layer norm.
pub struct NmtModel {
    pub cfg: ModelConfig,
    pub params: ParamStore,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub src_vocab_hash: u64,
    pub tgt_vocab_hash: u64,
    pe: Tensor,
}

impl NmtModel {
    pub fn init(cfg: ModelConfig, src_vocab: &Vocab, tgt_vocab: &Vocab, seed: u64) -> Result<Self> {
        if cfg.kind == ModelKind::RnnSearch && cfg.hidden_dim % 2 != 0 {
            return Err(Error::Config(
                "rnn-search hidden_dim must be even (bidirectional encoder)".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = ParamStore::new();
        let (vs, vt) = (src_vocab.size(), tgt_vocab.size());
        let d = cfg.emb_dim;
        let emb_scale = (3.0 / d as f32).sqrt();
        p.insert_uniform("src_emb", vec![vs, d], emb_scale, &mut rng)?;
        p.insert_uniform("tgt_emb", vec![vt, d], emb_scale, &mut rng)?;

        let xavier = |a: usize, b: usize| (6.0 / (a + b) as f32).sqrt();
        match cfg.kind {
            ModelKind::RnnSearch => {
                let dh = cfg.hidden_dim;
                let h2 = dh / 2;
                for dir in ["fwd", "bwd"] {
                    lstm_params(&mut p, &format!("enc.{dir}"), d, h2, &mut rng)?;
                }
                p.insert_uniform("attn.wq", vec![dh, dh], xavier(dh, dh), &mut rng)?;
                p.insert_uniform("attn.wk", vec![dh, dh], xavier(dh, dh), &mut rng)?;
                p.insert_uniform("attn.v", vec![1, dh], xavier(dh, 1), &mut rng)?;
                lstm_params(&mut p, "dec", d + dh, dh, &mut rng)?;
                p.insert_zeros("dec.h0", vec![1, dh])?;
                p.insert_zeros("dec.c0", vec![1, dh])?;
                p.insert_uniform("out.w", vec![dh, vt], xavier(dh, vt), &mut rng)?;
                p.insert_zeros("out.b", vec![1, vt])?;
            }
            ModelKind::Transformer => {
                let f = cfg.hidden_dim;
                for block in ["enc.attn", "dec.self", "dec.cross"] {
                    for w in ["wq", "wk", "wv"] {
                        p.insert_uniform(
                            &format!("{block}.{w}"),
                            vec![d, d],
                            xavier(d, d),
                            &mut rng,
                        )?;
                    }
                }
                for ln in ["enc.ln1", "enc.ln2", "dec.ln1", "dec.ln2", "dec.ln3"] {
                    p.insert(&format!("{ln}.g"), Tensor::row(vec![1.0; d]))?;
                    p.insert_zeros(&format!("{ln}.b"), vec![1, d])?;
                }
                for ffn in ["enc.ffn", "dec.ffn"] {
                    p.insert_uniform(&format!("{ffn}.w1"), vec![d, f], xavier(d, f), &mut rng)?;
                    p.insert_zeros(&format!("{ffn}.b1"), vec![1, f])?;
                    p.insert_uniform(&format!("{ffn}.w2"), vec![f, d], xavier(f, d), &mut rng)?;
                    p.insert_zeros(&format!("{ffn}.b2"), vec![1, d])?;
                }
                p.insert_uniform("out.w", vec![d, vt], xavier(d, vt), &mut rng)?;
                p.insert_zeros("out.b", vec![1, vt])?;
            }
        }
        Ok(NmtModel {
            pe: sinusoidal_table(cfg.max_len + 1, d),
            cfg,
            params: p,
            src_vocab_size: vs,
            tgt_vocab_size: vt,
            src_vocab_hash: src_vocab.content_hash(),
            tgt_vocab_hash: tgt_vocab.content_hash(),
        })
    }

    fn validate_ids(&self, ctx: &Context) -> Result<()> {
        for &id in ctx.source() {
            if id as usize >= self.src_vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: self.src_vocab_size,
                });
            }
        }
        for &id in ctx.target_prefix() {
            if id as usize >= self.tgt_vocab_size {
                return Err(Error::TokenOutOfRange {
                    id,
                    vocab: self.tgt_vocab_size,
                });
            }
        }
        if ctx.source().len() > self.cfg.max_len || ctx.t > self.cfg.max_len {
            return Err(Error::SentenceTooLong {
                line: 0,
                max_len: self.cfg.max_len,
            });
        }
        Ok(())
    }

    pub fn forward(&self, ctx: &Context) -> Result<Forward<'_>> {
        self.forward_masked(ctx, &OcclusionMask::none())
    }

    /// Build the decision-point graph with selected context embeddings
    /// zeroed (the prediction-difference removal semantics: the embedding
    /// row is zeroed before any scaling or position information is added).
    pub fn forward_masked(&self, ctx: &Context, mask: &OcclusionMask) -> Result<Forward<'_>> {
        self.validate_ids(ctx)?;
        match self.cfg.kind {
            ModelKind::RnnSearch => self.forward_rnn(ctx, mask),
            ModelKind::Transformer => self.forward_transformer(ctx, mask),
        }
    }

    /// Public single-decision API.
    pub fn forward_output(&self, ctx: &Context) -> Result<ForwardOutput> {
        let fwd = self.forward(ctx)?;
        Ok(ForwardOutput {
            dist: fwd.dist_vec().to_vec(),
            source_attn: fwd.source_attn_vec(),
            target_attn: match self.cfg.kind {
                ModelKind::Transformer => Some(fwd.self_attn_vec().unwrap_or_default()),
                ModelKind::RnnSearch => None,
            },
        })
    }

    // ── shared pieces ───────────────────────────────────────────────

    fn masked_embedding(
        &self,
        g: &mut Graph,
        table: &str,
        ids: &[u32],
        keep: Option<&[bool]>,
        skip_first: bool,
    ) -> Result<NodeId> {
        let tbl = g.param(table)?;
        let emb = g.embedding(tbl, ids)?;
        let Some(keep) = keep else {
            return Ok(emb);
        };
        let mut col: Vec<f32> = Vec::with_capacity(ids.len());
        if skip_first {
            col.push(1.0);
        }
        col.extend(keep.iter().map(|&k| if k { 1.0 } else { 0.0 }));
        debug_assert_eq!(col.len(), ids.len());
        let mask = g.constant(Tensor::col(col));
        g.masked_fill(emb, mask, 0.0)
    }

    /// Encoder input for the transformer: scaled embeddings plus positions.
    fn add_positions(
        &self,
        g: &mut Graph,
        emb: NodeId,
        positions: &[u32],
    ) -> Result<NodeId> {
        let scaled = g.scale(emb, (self.cfg.emb_dim as f32).sqrt())?;
        let pe_tbl = g.constant(self.pe.clone());
        let pe = g.embedding(pe_tbl, positions)?;
        g.add(scaled, pe)
    }

    fn ffn_block(&self, g: &mut Graph, x: NodeId, prefix: &str) -> Result<NodeId> {
        let h = g.linear(x, &format!("{prefix}.w1"), &format!("{prefix}.b1"))?;
        let h = g.relu(h)?;
        g.linear(h, &format!("{prefix}.w2"), &format!("{prefix}.b2"))
    }

    fn ln(&self, g: &mut Graph, x: NodeId, name: &str) -> Result<NodeId> {
        let gain = g.param(&format!("{name}.g"))?;
        let bias = g.param(&format!("{name}.b"))?;
        g.layer_norm(x, gain, bias)
    }

    /// 1-layer single-head transformer encoder over already-positioned
    /// input rows; returns `[n, d]` hidden vectors.
    fn transformer_encoder(&self, g: &mut Graph, inp: NodeId, n: usize) -> Result<NodeId> {
        let wq = g.param("enc.attn.wq")?;
        let wk = g.param("enc.attn.wk")?;
        let wv = g.param("enc.attn.wv")?;
        let q_all = g.matmul(inp, wq)?;
        let k_all = g.matmul(inp, wk)?;
        let v_all = g.matmul(inp, wv)?;
        let mut rows = Vec::with_capacity(n);
        for i in 0..n {
            let qi = g.pick_row(q_all, i)?;
            let (pooled, _) = g.attention(qi, k_all, v_all, None)?;
            rows.push(pooled);
        }
        let att = g.concat(0, &rows)?;
        let res = g.add(inp, att)?;
        let u = self.ln(g, res, "enc.ln1")?;
        let f = self.ffn_block(g, u, "enc.ffn")?;
        let res2 = g.add(u, f)?;
        self.ln(g, res2, "enc.ln2")
    }

    fn forward_transformer(&self, ctx: &Context, mask: &OcclusionMask) -> Result<Forward<'_>> {
        let mut g = Graph::new(&self.params);
        let x = ctx.source();
        let n = x.len();
        let t = ctx.t;

        let src_emb = self.masked_embedding(
            &mut g,
            "src_emb",
            x,
            mask.keep_src.as_deref(),
            false,
        )?;
        let src_pos: Vec<u32> = (1..=n as u32).collect();
        let src_in = self.add_positions(&mut g, src_emb, &src_pos)?;
        let enc = self.transformer_encoder(&mut g, src_in, n)?;

        // decoder input rows: BOS at position 0, then the prefix tokens
        let mut dec_ids = vec![BOS];
        dec_ids.extend_from_slice(ctx.target_prefix());
        let tgt_emb = self.masked_embedding(
            &mut g,
            "tgt_emb",
            &dec_ids,
            mask.keep_tgt.as_deref(),
            true,
        )?;
        let dec_pos: Vec<u32> = (0..t as u32).collect();
        let dec_in = self.add_positions(&mut g, tgt_emb, &dec_pos)?;

        let (dist, source_attn, self_attn) =
            self.transformer_decoder_step(&mut g, enc, dec_in, t)?;
        Ok(Forward {
            graph: g,
            dist,
            src_emb,
            tgt_emb,
            source_attn,
            self_attn,
        })
    }

    /// One decoding position: query is the input state at position t-1,
    /// self-attention runs over the prefix states (y_1..y_{t-1}), then
    /// cross-attention over the encoder outputs.
    fn transformer_decoder_step(
        &self,
        g: &mut Graph,
        enc: NodeId,
        dec_in: NodeId,
        t: usize,
    ) -> Result<(NodeId, NodeId, Option<NodeId>)> {
        let d = self.cfg.emb_dim;
        let q_state = g.pick_row(dec_in, t - 1)?;

        let (attended, self_attn) = if t >= 2 {
            // rows 1..t-1 of dec_in are the prefix states
            let mut sel = vec![0.0f32; (t - 1) * t];
            for j in 0..t - 1 {
                sel[j * t + (j + 1)] = 1.0;
            }
            let seln = g.constant(Tensor::matrix(t - 1, t, sel)?);
            let prefix_states = g.matmul(seln, dec_in)?;
            let wq = g.param("dec.self.wq")?;
            let wk = g.param("dec.self.wk")?;
            let wv = g.param("dec.self.wv")?;
            let qs = g.matmul(q_state, wq)?;
            let ks = g.matmul(prefix_states, wk)?;
            let vs = g.matmul(prefix_states, wv)?;
            let (pooled, alpha) = g.attention(qs, ks, vs, None)?;
            (pooled, Some(alpha))
        } else {
            (g.constant(Tensor::zeros(vec![1, d])), None)
        };
        let res = g.add(q_state, attended)?;
        let u = self.ln(g, res, "dec.ln1")?; // s_{t+1/2}

        let wq = g.param("dec.cross.wq")?;
        let wk = g.param("dec.cross.wk")?;
        let wv = g.param("dec.cross.wv")?;
        let qc = g.matmul(u, wq)?;
        let kc = g.matmul(enc, wk)?;
        let vc = g.matmul(enc, wv)?;
        let (cross, source_attn) = g.attention(qc, kc, vc, None)?;
        let res2 = g.add(u, cross)?;
        let v = self.ln(g, res2, "dec.ln2")?;
        let f = self.ffn_block(g, v, "dec.ffn")?;
        let res3 = g.add(v, f)?;
        let s_t = self.ln(g, res3, "dec.ln3")?;

        let logits = g.linear(s_t, "out.w", "out.b")?;
        let dist = g.softmax(1, logits)?;
        Ok((dist, source_attn, self_attn))
    }

    /// Bidirectional LSTM over the source; returns `[n, hidden]` rows.
    fn rnn_encoder(&self, g: &mut Graph, src_emb: NodeId, n: usize) -> Result<NodeId> {
        let h2 = self.cfg.hidden_dim / 2;
        let mut fwd_rows = Vec::with_capacity(n);
        let mut state = g.constant(Tensor::zeros(vec![2, h2]));
        let wx = g.param("enc.fwd.wx")?;
        let wh = g.param("enc.fwd.wh")?;
        let b = g.param("enc.fwd.b")?;
        for i in 0..n {
            let xi = g.pick_row(src_emb, i)?;
            state = g.lstm_cell(state, xi, wx, wh, b)?;
            fwd_rows.push(g.pick_row(state, 0)?);
        }
        let mut bwd_rows = vec![0; n];
        let mut state = g.constant(Tensor::zeros(vec![2, h2]));
        let wx = g.param("enc.bwd.wx")?;
        let wh = g.param("enc.bwd.wh")?;
        let b = g.param("enc.bwd.b")?;
        for i in (0..n).rev() {
            let xi = g.pick_row(src_emb, i)?;
            state = g.lstm_cell(state, xi, wx, wh, b)?;
            bwd_rows[i] = g.pick_row(state, 0)?;
        }
        let rows: Vec<NodeId> = (0..n)
            .map(|i| g.concat(1, &[fwd_rows[i], bwd_rows[i]]))
            .collect::<Result<_>>()?;
        g.concat(0, &rows)
    }

    /// Additive attention scores of a `[1, hidden]` query over `[n, hidden]`
    /// encoder rows; returns (context `[1, hidden]`, weights `[n, 1]`).
    fn rnn_attention(
        &self,
        g: &mut Graph,
        query: NodeId,
        enc: NodeId,
        keys: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let dh = self.cfg.hidden_dim;
        let wq = g.param("attn.wq")?;
        let qp = g.matmul(query, wq)?; // [1, dh]
        let summed = g.add(keys, qp)?; // row-broadcast
        let act = g.tanh(summed)?;
        let v = g.param("attn.v")?;
        let prod = g.mul(act, v)?;
        let avg = g.mean_axis(1, prod)?; // [n,1]
        let scores = g.scale(avg, dh as f32)?;
        let alpha = g.softmax(0, scores)?;
        let weighted = g.mul(enc, alpha)?;
        let pooled = g.mean_axis(0, weighted)?;
        let n = g.value(enc).dims2().0;
        let ctx_vec = g.scale(pooled, n as f32)?;
        Ok((ctx_vec, alpha))
    }

    fn forward_rnn(&self, ctx: &Context, mask: &OcclusionMask) -> Result<Forward<'_>> {
        let mut g = Graph::new(&self.params);
        let x = ctx.source();
        let n = x.len();
        let t = ctx.t;

        let src_emb =
            self.masked_embedding(&mut g, "src_emb", x, mask.keep_src.as_deref(), false)?;
        let enc = self.rnn_encoder(&mut g, src_emb, n)?;
        let wk = g.param("attn.wk")?;
        let keys = g.matmul(enc, wk)?;

        let mut dec_ids = vec![BOS];
        dec_ids.extend_from_slice(ctx.target_prefix());
        let tgt_emb = self.masked_embedding(
            &mut g,
            "tgt_emb",
            &dec_ids,
            mask.keep_tgt.as_deref(),
            true,
        )?;

        let h0 = g.param("dec.h0")?;
        let c0 = g.param("dec.c0")?;
        let mut state = g.concat(0, &[h0, c0])?;
        let wx = g.param("dec.wx")?;
        let wh = g.param("dec.wh")?;
        let b = g.param("dec.b")?;

        let mut last_attn = 0;
        for s in 1..=t {
            let query = g.pick_row(state, 0)?; // s_{s-1}
            let (ctx_vec, alpha) = self.rnn_attention(&mut g, query, enc, keys)?;
            last_attn = alpha;
            let emb_s = g.pick_row(tgt_emb, s - 1)?;
            let inp = g.concat(1, &[emb_s, ctx_vec])?;
            state = g.lstm_cell(state, inp, wx, wh, b)?;
        }
        let s_t = g.pick_row(state, 0)?;
        let logits = g.linear(s_t, "out.w", "out.b")?;
        let dist = g.softmax(1, logits)?;
        Ok(Forward {
            graph: g,
            dist,
            src_emb,
            tgt_emb,
            source_attn: last_attn,
            self_attn: None,
        })
    }

    /// Teacher-forcing pass over every timestep of a pair, sharing the
    /// encoder. Used by training, validation, and accuracy counting.
    pub fn sweep(&self, pair: &SentencePair) -> Result<Sweep<'_>> {
        let ctx_last = Context::new(pair, pair.target_len(), crate::nmt::PrefixSource::Gold)?;
        self.validate_ids(&ctx_last)?;
        let mut g = Graph::new(&self.params);
        let x = &pair.x;
        let n = x.len();
        let steps = pair.target_len();

        let mut dec_ids = vec![BOS];
        dec_ids.extend_from_slice(&pair.y[..steps - 1]);

        let mut dists = Vec::with_capacity(steps);
        match self.cfg.kind {
            ModelKind::Transformer => {
                let tbl = g.param("src_emb")?;
                let src_emb = g.embedding(tbl, x)?;
                let src_pos: Vec<u32> = (1..=n as u32).collect();
                let src_in = self.add_positions(&mut g, src_emb, &src_pos)?;
                let enc = self.transformer_encoder(&mut g, src_in, n)?;

                let tbl = g.param("tgt_emb")?;
                let tgt_emb = g.embedding(tbl, &dec_ids)?;
                let dec_pos: Vec<u32> = (0..steps as u32).collect();
                let dec_all = self.add_positions(&mut g, tgt_emb, &dec_pos)?;

                for t in 1..=steps {
                    // restrict to the first t input rows
                    let dec_in = if t == steps {
                        dec_all
                    } else {
                        let mut sel = vec![0.0f32; t * steps];
                        for j in 0..t {
                            sel[j * steps + j] = 1.0;
                        }
                        let seln = g.constant(Tensor::matrix(t, steps, sel)?);
                        g.matmul(seln, dec_all)?
                    };
                    let (dist, _, _) = self.transformer_decoder_step(&mut g, enc, dec_in, t)?;
                    dists.push(dist);
                }
            }
            ModelKind::RnnSearch => {
                let tbl = g.param("src_emb")?;
                let src_emb = g.embedding(tbl, x)?;
                let enc = self.rnn_encoder(&mut g, src_emb, n)?;
                let wk = g.param("attn.wk")?;
                let keys = g.matmul(enc, wk)?;
                let tbl = g.param("tgt_emb")?;
                let tgt_emb = g.embedding(tbl, &dec_ids)?;

                let h0 = g.param("dec.h0")?;
                let c0 = g.param("dec.c0")?;
                let mut state = g.concat(0, &[h0, c0])?;
                let wx = g.param("dec.wx")?;
                let wh = g.param("dec.wh")?;
                let b = g.param("dec.b")?;
                for s in 1..=steps {
                    let query = g.pick_row(state, 0)?;
                    let (ctx_vec, _alpha) = self.rnn_attention(&mut g, query, enc, keys)?;
                    let emb_s = g.pick_row(tgt_emb, s - 1)?;
                    let inp = g.concat(1, &[emb_s, ctx_vec])?;
                    state = g.lstm_cell(state, inp, wx, wh, b)?;
                    let s_t = g.pick_row(state, 0)?;
                    let logits = g.linear(s_t, "out.w", "out.b")?;
                    dists.push(g.softmax(1, logits)?);
                }
            }
        }

        let vt = self.tgt_vocab_size;
        let mut nll_nodes = Vec::with_capacity(steps);
        for (t, &dist) in dists.iter().enumerate() {
            let mut sel = vec![0.0f32; vt];
            sel[pair.y[t] as usize] = 1.0;
            let seln = g.constant(Tensor::col(sel));
            let picked = g.matmul(dist, seln)?;
            let lp = g.log(picked)?;
            nll_nodes.push(g.scale(lp, -1.0)?);
        }
        let all = g.concat(1, &nll_nodes)?;
        let mean_nll = g.mean(all)?;
        Ok(Sweep {
            graph: g,
            dists,
            mean_nll,
            tokens: steps,
        })
    }

    // ── persistence ─────────────────────────────────────────────────

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MODEL_MAGIC)?;
        w.write_all(&MODEL_VERSION.to_le_bytes())?;
        let header = ModelHeader {
            kind: self.cfg.kind,
            emb_dim: self.cfg.emb_dim,
            hidden_dim: self.cfg.hidden_dim,
            max_len: self.cfg.max_len,
            src_vocab_size: self.src_vocab_size,
            tgt_vocab_size: self.tgt_vocab_size,
            src_vocab_hash: self.src_vocab_hash,
            tgt_vocab_hash: self.tgt_vocab_hash,
        };
        let hjson = serde_json::to_vec(&header)?;
        w.write_all(&(hjson.len() as u32).to_le_bytes())?;
        w.write_all(&hjson)?;
        write_checkpoint(&mut w, &self.params)?;
        Ok(())
    }

    pub fn load(path: &Path, src_vocab: &Vocab, tgt_vocab: &Vocab) -> Result<NmtModel> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::BadCheckpoint("file too short".into()))?;
        if &magic != MODEL_MAGIC {
            return Err(Error::BadCheckpoint("not a model checkpoint".into()));
        }
        let mut buf4 = [0u8; 4];
        r.read_exact(&mut buf4)
            .map_err(|_| Error::BadCheckpoint("missing version".into()))?;
        if u32::from_le_bytes(buf4) != MODEL_VERSION {
            return Err(Error::BadCheckpoint("unsupported model version".into()));
        }
        r.read_exact(&mut buf4)
            .map_err(|_| Error::BadCheckpoint("missing header".into()))?;
        let hlen = u32::from_le_bytes(buf4) as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)
            .map_err(|_| Error::BadCheckpoint("truncated header".into()))?;
        let header: ModelHeader = serde_json::from_slice(&hbuf)?;
        if header.src_vocab_hash != src_vocab.content_hash()
            || header.tgt_vocab_hash != tgt_vocab.content_hash()
        {
            return Err(Error::BadCheckpoint(
                "vocab content hash does not match checkpoint".into(),
            ));
        }
        let params = read_checkpoint(&mut r)?;
        let cfg = ModelConfig {
            kind: header.kind,
            emb_dim: header.emb_dim,
            hidden_dim: header.hidden_dim,
            max_len: header.max_len,
        };
        Ok(NmtModel {
            pe: sinusoidal_table(cfg.max_len + 1, cfg.emb_dim),
            cfg,
            params,
            src_vocab_size: header.src_vocab_size,
            tgt_vocab_size: header.tgt_vocab_size,
            src_vocab_hash: header.src_vocab_hash,
            tgt_vocab_hash: header.tgt_vocab_hash,
        })
    }
}

fn lstm_params<R: Rng>(
    p: &mut ParamStore,
    prefix: &str,
    input_dim: usize,
    hidden: usize,
    rng: &mut R,
) -> Result<()> {
    let scale = 1.0 / (hidden as f32).sqrt();
    p.insert_uniform(&format!("{prefix}.wx"), vec![input_dim, 4 * hidden], scale, rng)?;
    p.insert_uniform(&format!("{prefix}.wh"), vec![hidden, 4 * hidden], scale, rng)?;
    // forget-gate bias starts at 1 so early training can carry state
    let mut b = vec![0.0f32; 4 * hidden];
    b[hidden..2 * hidden].iter_mut().for_each(|v| *v = 1.0);
    p.insert(&format!("{prefix}.b"), Tensor::row(b))?;
    Ok(())
}

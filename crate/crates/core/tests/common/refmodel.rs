//! Independent forward reimplementation of both NMT architectures against
//! the checkpoint parameters, generic over float width. It mirrors the
//! engine's operation order (including the mean-then-scale attention dots
//! and f64 reduction accumulators) so the f32 instantiation tracks the
//! engine to float precision, while the f64 instantiation provides the
//! smooth function that finite-difference oracles need.

#![allow(dead_code)]

use fideval::nmt::vocab::BOS;
use fideval::nmt::{ModelKind, NmtModel, Side};
use fideval::tensor::Tensor;
use num_traits::Float;

use super::reference as rf;
use rf::Mat;

/// Additive tweak of one embedding-lookup output coordinate, used for
/// finite differences of P(y | c_t) w.r.t. a single context-word slot.
#[derive(Debug, Clone, Copy)]
pub struct EmbNudge {
    pub side: Side,
    /// 1-based context position
    pub pos: usize,
    pub coord: usize,
    pub delta: f64,
}

#[derive(Debug, Clone, Default)]
pub struct RefMask {
    pub drop_src: Vec<usize>,
    pub drop_tgt: Vec<usize>,
}

impl RefMask {
    pub fn drop(side: Side, pos: usize) -> Self {
        let mut m = RefMask::default();
        match side {
            Side::Source => m.drop_src.push(pos),
            Side::TargetPrefix => m.drop_tgt.push(pos),
        }
        m
    }
}

pub struct RefOutput<T> {
    pub dist: Vec<T>,
    pub source_attn: Vec<T>,
    pub target_attn: Vec<T>,
}

fn param<T: Float + std::ops::AddAssign>(model: &NmtModel, name: &str) -> Mat<T> {
    let t: &Tensor = model.params.get(name).expect("param");
    let (r, c) = t.dims2();
    Mat::from_f32(r, c, t.data())
}

fn scale_mat<T: Float + std::ops::AddAssign>(m: &Mat<T>, s: f32) -> Mat<T> {
    let sv = T::from(s).unwrap();
    rf::map(m, |v| v * sv)
}

fn rows<T: Float + std::ops::AddAssign>(m: &Mat<T>, lo: usize, hi: usize) -> Mat<T> {
    Mat {
        rows: hi - lo,
        cols: m.cols,
        data: m.data[lo * m.cols..hi * m.cols].to_vec(),
    }
}

fn row<T: Float + std::ops::AddAssign>(m: &Mat<T>, i: usize) -> Mat<T> {
    rows(m, i, i + 1)
}

/// Mirror of the engine's pooled scaled-dot attention.
fn attention<T: Float + std::ops::AddAssign>(
    query: &Mat<T>,
    keys: &Mat<T>,
    values: &Mat<T>,
) -> (Mat<T>, Mat<T>) {
    let d = keys.cols;
    let n = keys.rows;
    let prod = rf::mul(keys, query);
    let row_avg = rf::mean_axis(1, &prod);
    let scores = scale_mat(&row_avg, d as f32 / (d as f32).sqrt());
    let alpha = rf::softmax(0, &scores);
    let weighted = rf::mul(values, &alpha);
    let col_avg = rf::mean_axis(0, &weighted);
    (scale_mat(&col_avg, n as f32), alpha)
}

fn layer_norm_block<T: Float + std::ops::AddAssign>(
    model: &NmtModel,
    x: &Mat<T>,
    name: &str,
) -> Mat<T> {
    let g: Mat<T> = param(model, &format!("{name}.g"));
    let b: Mat<T> = param(model, &format!("{name}.b"));
    rf::layer_norm(x, &g, &b, 1e-5f32 as f64)
}

fn ffn_block<T: Float + std::ops::AddAssign>(
    model: &NmtModel,
    x: &Mat<T>,
    prefix: &str,
) -> Mat<T> {
    let w1: Mat<T> = param(model, &format!("{prefix}.w1"));
    let b1: Mat<T> = param(model, &format!("{prefix}.b1"));
    let w2: Mat<T> = param(model, &format!("{prefix}.w2"));
    let b2: Mat<T> = param(model, &format!("{prefix}.b2"));
    let h = rf::relu_m(&rf::add(&rf::matmul(x, &w1), &b1));
    rf::add(&rf::matmul(&h, &w2), &b2)
}

fn embed<T: Float + std::ops::AddAssign>(
    model: &NmtModel,
    table: &str,
    ids: &[u32],
    drop_positions: &[usize],
    bos_row: bool,
    nudge: Option<(usize, usize, f64)>, // (row, coord, delta)
) -> Mat<T> {
    let tbl: Mat<T> = param(model, table);
    let mut out = rf::embedding(&tbl, ids);
    if let Some((r, c, delta)) = nudge {
        out.data[r * out.cols + c] = out.data[r * out.cols + c] + T::from(delta).unwrap();
    }
    for &pos in drop_positions {
        let r = if bos_row { pos } else { pos - 1 };
        for j in 0..out.cols {
            out.data[r * out.cols + j] = T::zero();
        }
    }
    out
}

fn add_positions<T: Float + std::ops::AddAssign>(
    model: &NmtModel,
    emb: &Mat<T>,
    positions: &[u32],
) -> Mat<T> {
    let d = model.cfg.emb_dim;
    let scaled = scale_mat(emb, (d as f32).sqrt());
    let pe = fideval::tensor::sinusoidal_table(model.cfg.max_len + 1, d);
    let mut pe_rows = Mat::zeros(positions.len(), d);
    for (i, &p) in positions.iter().enumerate() {
        for j in 0..d {
            pe_rows.data[i * d + j] = T::from(pe.data()[p as usize * d + j]).unwrap();
        }
    }
    rf::add(&scaled, &pe_rows)
}

/// Full reference forward of one decision point.
pub fn forward<T: Float + std::ops::AddAssign>(
    model: &NmtModel,
    x: &[u32],
    prefix: &[u32],
    mask: &RefMask,
    nudge: Option<EmbNudge>,
) -> RefOutput<T> {
    match model.cfg.kind {
        ModelKind::Transformer => forward_transformer(model, x, prefix, mask, nudge),
        ModelKind::RnnSearch => forward_rnn(model, x, prefix, mask, nudge),
    }
}

pub fn prob_of<T: Float + std::ops::AddAssign>(
    model: &NmtModel,
    x: &[u32],
    prefix: &[u32],
    mask: &RefMask,
    nudge: Option<EmbNudge>,
    y: u32,
) -> T {
    forward::<T>(model, x, prefix, mask, nudge).dist[y as usize]
}

fn split_nudge(nudge: Option<EmbNudge>, side: Side, bos_row: bool) -> Option<(usize, usize, f64)> {
    nudge.and_then(|n| {
        if n.side == side {
            let row = if bos_row { n.pos } else { n.pos - 1 };
            Some((row, n.coord, n.delta))
        } else {
            None
        }
    })
}

fn forward_transformer<T: Float + std::ops::AddAssign>(
    model: &NmtModel,
    x: &[u32],
    prefix: &[u32],
    mask: &RefMask,
    nudge: Option<EmbNudge>,
) -> RefOutput<T> {
    let n = x.len();
    let t = prefix.len() + 1;
    let d = model.cfg.emb_dim;

    let src_emb = embed(
        model,
        "src_emb",
        x,
        &mask.drop_src,
        false,
        split_nudge(nudge, Side::Source, false),
    );
    let src_pos: Vec<u32> = (1..=n as u32).collect();
    let src_in = add_positions(model, &src_emb, &src_pos);

    // encoder block
    let wq: Mat<T> = param(model, "enc.attn.wq");
    let wk: Mat<T> = param(model, "enc.attn.wk");
    let wv: Mat<T> = param(model, "enc.attn.wv");
    let q_all = rf::matmul(&src_in, &wq);
    let k_all = rf::matmul(&src_in, &wk);
    let v_all = rf::matmul(&src_in, &wv);
    let mut att_rows: Vec<Mat<T>> = Vec::with_capacity(n);
    for i in 0..n {
        let (pooled, _) = attention(&row(&q_all, i), &k_all, &v_all);
        att_rows.push(pooled);
    }
    let att_refs: Vec<&Mat<T>> = att_rows.iter().collect();
    let att = rf::concat(0, &att_refs);
    let u = layer_norm_block(model, &rf::add(&src_in, &att), "enc.ln1");
    let f = ffn_block(model, &u, "enc.ffn");
    let enc = layer_norm_block(model, &rf::add(&u, &f), "enc.ln2");

    // decoder input states
    let mut dec_ids = vec![BOS];
    dec_ids.extend_from_slice(prefix);
    let tgt_emb = embed(
        model,
        "tgt_emb",
        &dec_ids,
        &mask.drop_tgt,
        true,
        split_nudge(nudge, Side::TargetPrefix, true),
    );
    let dec_pos: Vec<u32> = (0..t as u32).collect();
    let dec_in = add_positions(model, &tgt_emb, &dec_pos);

    let q_state = row(&dec_in, t - 1);
    let (attended, target_attn) = if t >= 2 {
        let prefix_states = rows(&dec_in, 1, t);
        let wq: Mat<T> = param(model, "dec.self.wq");
        let wk: Mat<T> = param(model, "dec.self.wk");
        let wv: Mat<T> = param(model, "dec.self.wv");
        let qs = rf::matmul(&q_state, &wq);
        let ks = rf::matmul(&prefix_states, &wk);
        let vs = rf::matmul(&prefix_states, &wv);
        let (pooled, alpha) = attention(&qs, &ks, &vs);
        (pooled, alpha.data)
    } else {
        (Mat::zeros(1, d), Vec::new())
    };
    let u = layer_norm_block(model, &rf::add(&q_state, &attended), "dec.ln1");

    let wq: Mat<T> = param(model, "dec.cross.wq");
    let wk: Mat<T> = param(model, "dec.cross.wk");
    let wv: Mat<T> = param(model, "dec.cross.wv");
    let qc = rf::matmul(&u, &wq);
    let kc = rf::matmul(&enc, &wk);
    let vc = rf::matmul(&enc, &wv);
    let (cross, source_attn) = attention(&qc, &kc, &vc);
    let v = layer_norm_block(model, &rf::add(&u, &cross), "dec.ln2");
    let f = ffn_block(model, &v, "dec.ffn");
    let s_t = layer_norm_block(model, &rf::add(&v, &f), "dec.ln3");

    let w_out: Mat<T> = param(model, "out.w");
    let b_out: Mat<T> = param(model, "out.b");
    let logits = rf::add(&rf::matmul(&s_t, &w_out), &b_out);
    let dist = rf::softmax(1, &logits);
    RefOutput {
        dist: dist.data,
        source_attn: source_attn.data,
        target_attn,
    }
}

fn forward_rnn<T: Float + std::ops::AddAssign>(
    model: &NmtModel,
    x: &[u32],
    prefix: &[u32],
    mask: &RefMask,
    nudge: Option<EmbNudge>,
) -> RefOutput<T> {
    let n = x.len();
    let t = prefix.len() + 1;
    let h2 = model.cfg.hidden_dim / 2;
    let dh = model.cfg.hidden_dim;

    let src_emb = embed(
        model,
        "src_emb",
        x,
        &mask.drop_src,
        false,
        split_nudge(nudge, Side::Source, false),
    );

    let run_dir = |prefix_name: &str, order: Vec<usize>| -> Vec<Mat<T>> {
        let wx: Mat<T> = param(model, &format!("{prefix_name}.wx"));
        let wh: Mat<T> = param(model, &format!("{prefix_name}.wh"));
        let b: Mat<T> = param(model, &format!("{prefix_name}.b"));
        let mut state = Mat::zeros(2, h2);
        let mut out: Vec<Option<Mat<T>>> = vec![None; n];
        for i in order {
            let xi = row(&src_emb, i);
            state = rf::lstm_cell(&state, &xi, &wx, &wh, &b);
            out[i] = Some(row(&state, 0));
        }
        out.into_iter().map(|m| m.unwrap()).collect()
    };
    let fwd = run_dir("enc.fwd", (0..n).collect());
    let bwd = run_dir("enc.bwd", (0..n).rev().collect());
    let enc_rows: Vec<Mat<T>> = (0..n)
        .map(|i| rf::concat(1, &[&fwd[i], &bwd[i]]))
        .collect();
    let enc_refs: Vec<&Mat<T>> = enc_rows.iter().collect();
    let enc = rf::concat(0, &enc_refs);

    let attn_wk: Mat<T> = param(model, "attn.wk");
    let keys = rf::matmul(&enc, &attn_wk);
    let attn_wq: Mat<T> = param(model, "attn.wq");
    let attn_v: Mat<T> = param(model, "attn.v");

    let mut dec_ids = vec![BOS];
    dec_ids.extend_from_slice(prefix);
    let tgt_emb = embed(
        model,
        "tgt_emb",
        &dec_ids,
        &mask.drop_tgt,
        true,
        split_nudge(nudge, Side::TargetPrefix, true),
    );

    let h0: Mat<T> = param(model, "dec.h0");
    let c0: Mat<T> = param(model, "dec.c0");
    let mut state = rf::concat(0, &[&h0, &c0]);
    let wx: Mat<T> = param(model, "dec.wx");
    let wh: Mat<T> = param(model, "dec.wh");
    let b: Mat<T> = param(model, "dec.b");

    let mut last_alpha = Mat::zeros(n, 1);
    for s in 1..=t {
        let query = row(&state, 0);
        let qp = rf::matmul(&query, &attn_wq);
        let summed = rf::add(&keys, &qp);
        let act = rf::tanh_m(&summed);
        let prod = rf::mul(&act, &attn_v);
        let avg = rf::mean_axis(1, &prod);
        let scores = scale_mat(&avg, dh as f32);
        let alpha = rf::softmax(0, &scores);
        let weighted = rf::mul(&enc, &alpha);
        let pooled = rf::mean_axis(0, &weighted);
        let ctx_vec = scale_mat(&pooled, n as f32);
        last_alpha = alpha;
        let emb_s = row(&tgt_emb, s - 1);
        let inp = rf::concat(1, &[&emb_s, &ctx_vec]);
        state = rf::lstm_cell(&state, &inp, &wx, &wh, &b);
    }
    let s_t = row(&state, 0);
    let w_out: Mat<T> = param(model, "out.w");
    let b_out: Mat<T> = param(model, "out.b");
    let logits = rf::add(&rf::matmul(&s_t, &w_out), &b_out);
    let dist = rf::softmax(1, &logits);
    RefOutput {
        dist: dist.data,
        source_attn: last_alpha.data,
        target_attn: Vec::new(),
    }
}

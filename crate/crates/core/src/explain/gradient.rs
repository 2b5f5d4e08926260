//! Gradient-based relevance: one backward pass of P(y | c_t) — the
//! probability itself, not its log — per decision point, read out per
//! embedding-lookup site.

use crate::error::{Error, Result};
use crate::explain::{Method, RelevanceVector};
use crate::nmt::{Context, NmtModel, SentencePair, PrefixSource};

/// dP/d(embedding) for every context word occurrence; row j of `target` is
/// the gradient at prefix position j+1 (the decoder's BOS input is
/// bookkeeping, not a context word).
#[derive(Debug, Clone)]
pub struct EmbeddingGradient {
    pub source: Vec<Vec<f32>>,
    pub target: Vec<Vec<f32>>,
}

/// The embedding values at the same sites, for the weighted-gradient dot.
#[derive(Debug, Clone)]
pub struct ContextEmbeddings {
    pub source: Vec<Vec<f32>>,
    pub target: Vec<Vec<f32>>,
}

fn split_rows(data: &[f32], rows: usize, cols: usize, skip_first: bool) -> Vec<Vec<f32>> {
    let start = usize::from(skip_first);
    (start..rows)
        .map(|r| data[r * cols..(r + 1) * cols].to_vec())
        .collect()
}

/// Backward of P(y) through an already-built forward graph.
pub fn gradient_from_forward(
    fwd: &mut crate::nmt::Forward<'_>,
    ctx: &Context,
    y: u32,
    emb_dim: usize,
) -> Result<EmbeddingGradient> {
    let prob = fwd.prob_node(y)?;
    let grads = fwd.graph.backward(prob)?;
    let src = grads
        .node_grad(fwd.src_emb)
        .expect("source embedding gradient");
    let tgt = grads
        .node_grad(fwd.tgt_emb)
        .expect("target embedding gradient");
    let g = EmbeddingGradient {
        source: split_rows(src.data(), ctx.source().len(), emb_dim, false),
        target: split_rows(tgt.data(), ctx.t, emb_dim, true),
    };
    let finite = g
        .source
        .iter()
        .chain(&g.target)
        .all(|row| row.iter().all(|v| v.is_finite()));
    if !finite {
        return Err(Error::NonFiniteGradient {
            at: format!("timestep {} (y = {y})", ctx.t),
        });
    }
    Ok(g)
}

pub fn embeddings_from_forward(
    fwd: &crate::nmt::Forward<'_>,
    ctx: &Context,
    emb_dim: usize,
) -> ContextEmbeddings {
    ContextEmbeddings {
        source: split_rows(
            fwd.graph.value(fwd.src_emb).data(),
            ctx.source().len(),
            emb_dim,
            false,
        ),
        target: split_rows(fwd.graph.value(fwd.tgt_emb).data(), ctx.t, emb_dim, true),
    }
}

pub fn relevance_gradient(model: &NmtModel, ctx: &Context, y: u32) -> Result<EmbeddingGradient> {
    if y as usize >= model.tgt_vocab_size {
        return Err(Error::TokenOutOfRange {
            id: y,
            vocab: model.tgt_vocab_size,
        });
    }
    let mut fwd = model.forward(ctx)?;
    gradient_from_forward(&mut fwd, ctx, y, model.cfg.emb_dim)
}

pub fn context_embeddings(model: &NmtModel, ctx: &Context) -> Result<ContextEmbeddings> {
    let fwd = model.forward(ctx)?;
    Ok(embeddings_from_forward(&fwd, ctx, model.cfg.emb_dim))
}

/// Gradient norm: the l1 norm of g, per occurrence.
pub fn relevance_ngrad(g: &EmbeddingGradient) -> RelevanceVector {
    let l1 = |row: &Vec<f32>| -> f32 {
        let mut acc = 0.0f32;
        for &v in row {
            acc += v.abs();
        }
        acc
    };
    RelevanceVector {
        method: Method::Ngrad,
        y: 0,
        source: g.source.iter().map(l1).collect(),
        target: Some(g.target.iter().map(l1).collect()),
    }
}

/// Weighted gradient: g(w, y)^T . emb(w), per occurrence. May be negative.
pub fn relevance_wgrad(
    g: &EmbeddingGradient,
    emb: &ContextEmbeddings,
) -> Result<RelevanceVector> {
    if g.source.len() != emb.source.len()
        || g.target.len() != emb.target.len()
        || g.source
            .first()
            .zip(emb.source.first())
            .is_some_and(|(a, b)| a.len() != b.len())
    {
        return Err(Error::ShapeMismatch {
            op: "wgrad",
            details: format!(
                "gradient sites {}+{} vs embedding sites {}+{}",
                g.source.len(),
                g.target.len(),
                emb.source.len(),
                emb.target.len()
            ),
        });
    }
    let dot = |(gr, er): (&Vec<f32>, &Vec<f32>)| -> f32 {
        let mut acc = 0.0f32;
        for (a, b) in gr.iter().zip(er) {
            acc += a * b;
        }
        acc
    };
    Ok(RelevanceVector {
        method: Method::Wgrad,
        y: 0,
        source: g.source.iter().zip(&emb.source).map(dot).collect(),
        target: Some(g.target.iter().zip(&emb.target).map(dot).collect()),
    })
}

/// Per-timestep gradients over a whole sentence. Each timestep costs one
/// backward pass, and `backward_passes` records exactly how many ran.
#[derive(Debug)]
pub struct SentenceGradients {
    pub per_t: Vec<EmbeddingGradient>,
    pub backward_passes: usize,
}

pub fn sentence_gradients(
    model: &NmtModel,
    pair: &SentencePair,
    labels: &[u32],
) -> Result<SentenceGradients> {
    let mut per_t = Vec::with_capacity(pair.target_len());
    let mut backward_passes = 0usize;
    for t in 1..=pair.target_len() {
        let ctx = Context::new(pair, t, PrefixSource::Gold)?;
        per_t.push(relevance_gradient(model, &ctx, labels[t - 1])?);
        backward_passes += 1;
    }
    Ok(SentenceGradients {
        per_t,
        backward_passes,
    })
}

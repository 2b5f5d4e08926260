//! The four word-relevance score functions: attention weights, gradient
//! norm, weighted gradient, and prediction difference. Each scores every
//! context word occurrence of one decision point.

mod gradient;
mod pd;

pub use gradient::{
    context_embeddings, embeddings_from_forward, gradient_from_forward, relevance_gradient,
    relevance_ngrad, relevance_wgrad, sentence_gradients, ContextEmbeddings, EmbeddingGradient,
    SentenceGradients,
};
pub use pd::relevance_pd;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nmt::{Context, ModelKind, NmtModel, Side};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Attn,
    Pd,
    Ngrad,
    Wgrad,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Attn, Method::Pd, Method::Ngrad, Method::Wgrad];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Attn => "attn",
            Method::Pd => "pd",
            Method::Ngrad => "ngrad",
            Method::Wgrad => "wgrad",
        }
    }

    pub fn parse(s: &str) -> Result<Method> {
        match s {
            "attn" => Ok(Method::Attn),
            "pd" => Ok(Method::Pd),
            "ngrad" => Ok(Method::Ngrad),
            "wgrad" => Ok(Method::Wgrad),
            other => Err(Error::Config(format!("unknown method `{other}`"))),
        }
    }
}

/// Per-occurrence relevance scores for one decision point: source positions
/// 1..=|x| and target-prefix positions 1..=t-1. A `None` target side means
/// the method cannot score it at all (rnn-search attention), as opposed to
/// `Some(empty)` at t = 1.
#[derive(Debug, Clone)]
pub struct RelevanceVector {
    pub method: Method,
    /// the label the scores were computed for
    pub y: u32,
    pub source: Vec<f32>,
    pub target: Option<Vec<f32>>,
}

impl RelevanceVector {
    pub fn side_scores(&self, side: Side) -> Result<&[f32]> {
        match side {
            Side::Source => Ok(&self.source),
            Side::TargetPrefix => self.target.as_deref().ok_or(Error::UnsupportedSide {
                method: self.method.as_str(),
                side: "target-prefix",
                model: "rnn-search",
            }),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.source.iter().all(|v| v.is_finite())
            && self
                .target
                .as_ref()
                .map(|t| t.iter().all(|v| v.is_finite()))
                .unwrap_or(true)
    }
}

/// Attention read-out at timestep t. Scores do not depend on the predicted
/// label: rnn-search exposes the source attention only, the transformer
/// exposes cross-attention (source) and decoder self-attention (prefix).
pub fn relevance_attention(model: &NmtModel, ctx: &Context) -> Result<RelevanceVector> {
    let fwd = model.forward(ctx)?;
    let source = fwd.source_attn_vec();
    let target = match model.cfg.kind {
        ModelKind::Transformer => Some(fwd.self_attn_vec().unwrap_or_default()),
        ModelKind::RnnSearch => None,
    };
    Ok(RelevanceVector {
        method: Method::Attn,
        y: fwd.argmax(),
        source,
        target,
    })
}

/// Dispatch on method; `y` is the label relevance is scored for (ignored by
/// attention).
pub fn relevance(model: &NmtModel, ctx: &Context, y: u32, method: Method) -> Result<RelevanceVector> {
    match method {
        Method::Attn => relevance_attention(model, ctx),
        Method::Pd => relevance_pd(model, ctx, y),
        Method::Ngrad => {
            let g = relevance_gradient(model, ctx, y)?;
            Ok(relevance_ngrad(&g))
        }
        Method::Wgrad => {
            let g = relevance_gradient(model, ctx, y)?;
            let emb = context_embeddings(model, ctx)?;
            relevance_wgrad(&g, &emb)
        }
    }
}

/// All requested methods for one decision point, sharing the forward pass
/// and the single backward pass that the gradient methods both read.
pub fn relevance_bundle(
    model: &NmtModel,
    ctx: &Context,
    y: u32,
    methods: &[Method],
) -> Result<Vec<RelevanceVector>> {
    let needs_grad = methods.contains(&Method::Ngrad) || methods.contains(&Method::Wgrad);
    let grad = if needs_grad {
        Some(relevance_gradient(model, ctx, y)?)
    } else {
        None
    };
    let emb = if methods.contains(&Method::Wgrad) {
        Some(context_embeddings(model, ctx)?)
    } else {
        None
    };
    methods
        .iter()
        .map(|&m| match m {
            Method::Attn => relevance_attention(model, ctx),
            Method::Pd => relevance_pd(model, ctx, y),
            Method::Ngrad => Ok(relevance_ngrad(grad.as_ref().unwrap())),
            Method::Wgrad => relevance_wgrad(grad.as_ref().unwrap(), emb.as_ref().unwrap()),
        })
        .collect()
}

/// Line format of the optional relevance debug dump.
#[derive(Debug, Serialize, Deserialize)]
pub struct RelevanceRecord {
    pub sid: usize,
    pub t: usize,
    pub y: String,
    pub method: Method,
    pub scores: Vec<(Side, usize, f32)>,
}

impl RelevanceRecord {
    pub fn from_vector(sid: usize, t: usize, y_token: &str, rv: &RelevanceVector) -> Self {
        let mut scores = Vec::new();
        for (i, &s) in rv.source.iter().enumerate() {
            scores.push((Side::Source, i + 1, s));
        }
        if let Some(tgt) = &rv.target {
            for (j, &s) in tgt.iter().enumerate() {
                scores.push((Side::TargetPrefix, j + 1, s));
            }
        }
        RelevanceRecord {
            sid,
            t,
            y: y_token.to_string(),
            method: rv.method,
            scores,
        }
    }
}

//! Generalized rule datasets: the top-k relevant words on each side of a
//! decision point, paired with the model's predicted label, built over a
//! corpus under a chosen scenario.

mod density;
mod io;

pub use density::{density_histogram, DensityHistogram, BIN_EDGES};
pub use io::{read_rules, write_rules};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::{
    embeddings_from_forward, gradient_from_forward, relevance_ngrad, relevance_pd,
    relevance_wgrad, Method, RelevanceVector,
};
use crate::nmt::{
    argmax, greedy_decode, Context, ModelKind, NmtModel, PrefixSource, SentencePair, Side,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    TeacherForcing,
    RealDecode,
    Golden,
}

impl Scenario {
    pub fn as_str(&self) -> &'static str {
        match self {
            Scenario::TeacherForcing => "teacher-forcing",
            Scenario::RealDecode => "real-decode",
            Scenario::Golden => "golden",
        }
    }

    pub fn parse(s: &str) -> Result<Scenario> {
        match s {
            "teacher-forcing" => Ok(Scenario::TeacherForcing),
            "real-decode" => Ok(Scenario::RealDecode),
            "golden" => Ok(Scenario::Golden),
            other => Err(Error::Config(format!("unknown scenario `{other}`"))),
        }
    }
}

/// A context word occurrence: token id plus its original 1-based position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuleWord {
    pub token: u32,
    pub pos: usize,
}

/// One generalized rule: up to k words per side plus the label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleInstance {
    pub source_words: Vec<RuleWord>,
    pub target_words: Vec<RuleWord>,
    pub label: u32,
    /// (sentence id, timestep)
    pub provenance: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RuleMeta {
    pub method: Method,
    pub model_id: String,
    pub k: usize,
    pub scenario: Scenario,
    pub corpus_id: String,
}

#[derive(Debug, Clone)]
pub struct RuleDataset {
    pub rules: Vec<RuleInstance>,
    pub meta: RuleMeta,
}

impl RuleDataset {
    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

pub fn model_id(model: &NmtModel) -> String {
    format!("{}-{:08x}", model.cfg.kind.as_str(), model.tgt_vocab_hash)
}

/// Indices of the k largest scores, ties broken by smaller position, result
/// ordered by original position.
pub fn topk_positions(scores: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.cmp(&b))
    });
    let mut top: Vec<usize> = idx.into_iter().take(k).collect();
    top.sort_unstable();
    top
}

/// The k largest-scoring words of one side, as (token, position) pairs in
/// position order. Requesting a side the method cannot score is an error.
pub fn topk_words(
    rv: &RelevanceVector,
    side: Side,
    k: usize,
    ctx: &Context,
) -> Result<Vec<RuleWord>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    let scores = rv.side_scores(side)?;
    let tokens: &[u32] = match side {
        Side::Source => ctx.source(),
        Side::TargetPrefix => ctx.target_prefix(),
    };
    debug_assert_eq!(scores.len(), tokens.len());
    Ok(topk_positions(scores, k)
        .into_iter()
        .map(|i| RuleWord {
            token: tokens[i],
            pos: i + 1,
        })
        .collect())
}

/// Relevance vectors for one decision point with the shared work factored
/// out: one base forward supplies the label, attention weights, embeddings,
/// and (after one backward) the per-site gradients.
struct DecisionScores {
    label: u32,
    vectors: Vec<(Method, RelevanceVector)>,
}

fn score_decision(
    model: &NmtModel,
    ctx: &Context,
    methods: &[Method],
) -> Result<DecisionScores> {
    let mut fwd = model.forward(ctx)?;
    let label = fwd.argmax();
    let needs_grad = methods.contains(&Method::Ngrad) || methods.contains(&Method::Wgrad);
    let emb = if methods.contains(&Method::Wgrad) {
        Some(embeddings_from_forward(&fwd, ctx, model.cfg.emb_dim))
    } else {
        None
    };
    let attn = if methods.contains(&Method::Attn) {
        let source = fwd.source_attn_vec();
        let target = match model.cfg.kind {
            ModelKind::Transformer => Some(fwd.self_attn_vec().unwrap_or_default()),
            ModelKind::RnnSearch => None,
        };
        Some(RelevanceVector {
            method: Method::Attn,
            y: label,
            source,
            target,
        })
    } else {
        None
    };
    let grad = if needs_grad {
        Some(gradient_from_forward(&mut fwd, ctx, label, model.cfg.emb_dim)?)
    } else {
        None
    };
    drop(fwd);

    let mut vectors = Vec::with_capacity(methods.len());
    for &m in methods {
        let rv = match m {
            Method::Attn => attn.clone().expect("attention computed"),
            Method::Pd => relevance_pd(model, ctx, label)?,
            Method::Ngrad => relevance_ngrad(grad.as_ref().expect("gradient computed")),
            Method::Wgrad => relevance_wgrad(
                grad.as_ref().expect("gradient computed"),
                emb.as_ref().expect("embeddings computed"),
            )?,
        };
        vectors.push((m, rv));
    }
    Ok(DecisionScores { label, vectors })
}

/// Extract one rule: the label is the model's argmax prediction (never the
/// gold token), and relevance is scored for that label.
pub fn extract_rule(
    model: &NmtModel,
    method: Method,
    ctx: &Context,
    k: usize,
    sid: usize,
) -> Result<RuleInstance> {
    let scores = score_decision(model, ctx, &[method])?;
    let (_, rv) = &scores.vectors[0];
    rule_from_vector(rv, ctx, k, scores.label, sid)
}

fn rule_from_vector(
    rv: &RelevanceVector,
    ctx: &Context,
    k: usize,
    label: u32,
    sid: usize,
) -> Result<RuleInstance> {
    Ok(RuleInstance {
        source_words: topk_words(rv, Side::Source, k, ctx)?,
        target_words: topk_words(rv, Side::TargetPrefix, k, ctx)?,
        label,
        provenance: (sid, ctx.t),
    })
}

fn check_combination(model: &NmtModel, method: Method) -> Result<()> {
    if model.cfg.kind == ModelKind::RnnSearch && method == Method::Attn {
        return Err(Error::UnsupportedSide {
            method: "attn",
            side: "target-prefix",
            model: "rnn-search",
        });
    }
    Ok(())
}

/// Rule datasets for every (method, k) cell in one corpus pass. Relevance is
/// computed once per decision point and re-cut for each k; sentences run in
/// parallel and output order is canonical (sid, t).
pub fn build_rule_datasets(
    model: &NmtModel,
    methods: &[Method],
    corpus: &[SentencePair],
    scenario: Scenario,
    ks: &[usize],
    corpus_id: &str,
) -> Result<Vec<((Method, usize), RuleDataset)>> {
    if corpus.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    for &m in methods {
        check_combination(model, m)?;
    }
    for &k in ks {
        if k == 0 {
            return Err(Error::InvalidArgument("k must be >= 1".into()));
        }
    }

    let per_sentence: Vec<Result<Vec<((Method, usize), RuleInstance)>>> = corpus
        .par_iter()
        .enumerate()
        .map(|(sid, gold_pair)| {
            let mut out = Vec::new();
            let decoded;
            let (pair, prefix_source): (&SentencePair, PrefixSource) = match scenario {
                Scenario::RealDecode => {
                    let d = greedy_decode(model, &gold_pair.x, model.cfg.max_len)?;
                    decoded = SentencePair {
                        x: gold_pair.x.clone(),
                        y: d.y,
                    };
                    (&decoded, PrefixSource::ModelDecode)
                }
                _ => (gold_pair, PrefixSource::Gold),
            };
            for t in 1..=pair.target_len() {
                let ctx = Context::new(pair, t, prefix_source)?;
                let scores = score_decision(model, &ctx, methods)?;
                let label = match scenario {
                    Scenario::Golden => ctx.gold_label(),
                    _ => scores.label,
                };
                for (m, rv) in &scores.vectors {
                    for &k in ks {
                        out.push(((*m, k), rule_from_vector(rv, &ctx, k, label, sid)?));
                    }
                }
            }
            Ok(out)
        })
        .collect();

    let mid = model_id(model);
    let mut datasets: Vec<((Method, usize), RuleDataset)> = methods
        .iter()
        .flat_map(|&m| ks.iter().map(move |&k| (m, k)))
        .map(|(m, k)| {
            (
                (m, k),
                RuleDataset {
                    rules: Vec::new(),
                    meta: RuleMeta {
                        method: m,
                        model_id: mid.clone(),
                        k,
                        scenario,
                        corpus_id: corpus_id.to_string(),
                    },
                },
            )
        })
        .collect();
    for sentence in per_sentence {
        for (cell, rule) in sentence? {
            datasets
                .iter_mut()
                .find(|(c, _)| *c == cell)
                .expect("cell exists")
                .1
                .rules
                .push(rule);
        }
    }
    Ok(datasets)
}

/// Single-cell convenience wrapper.
pub fn build_rule_dataset(
    model: &NmtModel,
    method: Method,
    corpus: &[SentencePair],
    scenario: Scenario,
    k: usize,
    corpus_id: &str,
) -> Result<RuleDataset> {
    let mut v = build_rule_datasets(model, &[method], corpus, scenario, &[k], corpus_id)?;
    Ok(v.remove(0).1)
}

/// f(c_t) for a gold-prefix context: the argmax of the model distribution.
pub fn predicted_label(model: &NmtModel, ctx: &Context) -> Result<u32> {
    let fwd = model.forward(ctx)?;
    Ok(argmax(fwd.dist_vec()))
}

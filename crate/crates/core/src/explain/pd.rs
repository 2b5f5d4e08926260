//! Prediction difference: the probability drop after removing one context
//! word occurrence, where removal zeroes that occurrence's embedding.

use crate::error::{Error, Result};
use crate::explain::{Method, RelevanceVector};
use crate::nmt::{Context, NmtModel, OcclusionMask, Side};

/// One full forward per context word occurrence plus one for the base
/// probability; each removal affects exactly one occurrence (by position).
pub fn relevance_pd(model: &NmtModel, ctx: &Context, y: u32) -> Result<RelevanceVector> {
    if y as usize >= model.tgt_vocab_size {
        return Err(Error::TokenOutOfRange {
            id: y,
            vocab: model.tgt_vocab_size,
        });
    }
    let base = model.forward(ctx)?.prob(y);
    let n = ctx.source().len();
    let prefix_len = ctx.t - 1;

    let mut source = Vec::with_capacity(n);
    for pos in 1..=n {
        let mask = OcclusionMask::drop_one(Side::Source, pos, n, prefix_len);
        let p = model.forward_masked(ctx, &mask)?.prob(y);
        source.push(base - p);
    }
    let mut target = Vec::with_capacity(prefix_len);
    for pos in 1..=prefix_len {
        let mask = OcclusionMask::drop_one(Side::TargetPrefix, pos, n, prefix_len);
        let p = model.forward_masked(ctx, &mask)?.prob(y);
        target.push(base - p);
    }
    Ok(RelevanceVector {
        method: Method::Pd,
        y,
        source,
        target: Some(target),
    })
}

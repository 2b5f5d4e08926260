use crate::error::Result;
use crate::nmt::corpus::{Context, PrefixSource, SentencePair};
use crate::nmt::model::NmtModel;
use crate::nmt::vocab::EOS;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecodeOutput {
    /// Generated target sequence; ends with EOS unless truncated.
    pub y: Vec<u32>,
    pub truncated: bool,
}

/// Deterministic greedy decode: append the argmax token until EOS or
/// `max_len` tokens have been produced.
pub fn greedy_decode(model: &NmtModel, x: &[u32], max_len: usize) -> Result<DecodeOutput> {
    let mut y: Vec<u32> = Vec::new();
    loop {
        // placeholder slot for y_t; the forward pass only reads y_<t
        let mut probe = y.clone();
        probe.push(EOS);
        let pair = SentencePair {
            x: x.to_vec(),
            y: probe,
        };
        let t = pair.target_len();
        let ctx = Context::new(&pair, t, PrefixSource::ModelDecode)?;
        let fwd = model.forward(&ctx)?;
        let tok = fwd.argmax();
        y.push(tok);
        if tok == EOS {
            return Ok(DecodeOutput {
                y,
                truncated: false,
            });
        }
        if y.len() >= max_len {
            return Ok(DecodeOutput { y, truncated: true });
        }
    }
}

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nmt::vocab::{Vocab, EOS, PAD};

/// One aligned sentence pair as token ids. `x` is EOS-terminated (the EOS
/// slot is an attendable position); `y` is the predicted sequence, also
/// EOS-terminated — the BOS prefix is supplied by the decoder, so timestep
/// `t` (1-based) predicts `y[t-1]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SentencePair {
    pub x: Vec<u32>,
    pub y: Vec<u32>,
}

impl SentencePair {
    pub fn encode(
        src_tokens: &[String],
        tgt_tokens: &[String],
        src_vocab: &Vocab,
        tgt_vocab: &Vocab,
    ) -> SentencePair {
        let mut x: Vec<u32> = src_tokens.iter().map(|t| src_vocab.lookup(t)).collect();
        x.push(EOS);
        let mut y: Vec<u32> = tgt_tokens.iter().map(|t| tgt_vocab.lookup(t)).collect();
        y.push(EOS);
        SentencePair { x, y }
    }

    pub fn source_len(&self) -> usize {
        self.x.len()
    }

    /// Number of prediction timesteps (includes the final EOS).
    pub fn target_len(&self) -> usize {
        self.y.len()
    }

    pub fn validate(&self, max_len: usize, line: usize) -> Result<()> {
        if self.x.is_empty() || self.y.is_empty() {
            return Err(Error::CorpusMisaligned(format!("empty sentence at line {line}")));
        }
        if self.x.len() > max_len || self.y.len() > max_len {
            return Err(Error::SentenceTooLong { line, max_len });
        }
        if self.x.contains(&PAD) || self.y.contains(&PAD) {
            return Err(Error::CorpusMisaligned(format!(
                "PAD id inside sentence at line {line}"
            )));
        }
        Ok(())
    }
}

/// Where the target prefix of a decision point comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefixSource {
    Gold,
    ModelDecode,
}

/// One decision point `c_t`: a sentence pair plus the 1-based timestep.
#[derive(Debug, Clone, Copy)]
pub struct Context<'a> {
    pub pair: &'a SentencePair,
    pub t: usize,
    pub prefix_source: PrefixSource,
}

impl<'a> Context<'a> {
    pub fn new(pair: &'a SentencePair, t: usize, prefix_source: PrefixSource) -> Result<Self> {
        if t < 1 || t > pair.target_len() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside 1..={}",
                pair.target_len()
            )));
        }
        Ok(Context {
            pair,
            t,
            prefix_source,
        })
    }

    /// `y_<t`: the first t-1 target tokens (empty at t = 1).
    pub fn target_prefix(&self) -> &[u32] {
        &self.pair.y[..self.t - 1]
    }

    pub fn source(&self) -> &[u32] {
        &self.pair.x
    }

    /// The gold token this context would predict under teacher forcing.
    pub fn gold_label(&self) -> u32 {
        self.pair.y[self.t - 1]
    }
}

pub fn read_token_lines(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path)?;
    let mut lines = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let toks: Vec<String> = line.split_whitespace().map(|t| t.to_string()).collect();
        if toks.is_empty() {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: "blank line".into(),
            });
        }
        lines.push(toks);
    }
    if lines.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    Ok(lines)
}

/// Load an aligned pair of one-sentence-per-line token files.
pub fn load_parallel(
    src_path: &Path,
    tgt_path: &Path,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<SentencePair>> {
    let src = read_token_lines(src_path)?;
    let tgt = read_token_lines(tgt_path)?;
    if src.len() != tgt.len() {
        return Err(Error::CorpusMisaligned(format!(
            "{} has {} lines, {} has {}",
            src_path.display(),
            src.len(),
            tgt_path.display(),
            tgt.len()
        )));
    }
    let mut pairs = Vec::with_capacity(src.len());
    for (i, (s, t)) in src.iter().zip(&tgt).enumerate() {
        let pair = SentencePair::encode(s, t, src_vocab, tgt_vocab);
        pair.validate(max_len, i + 1)?;
        pairs.push(pair);
    }
    Ok(pairs)
}

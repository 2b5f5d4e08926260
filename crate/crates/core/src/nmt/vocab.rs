use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
pub const EOS: u32 = 3;

pub const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<bos>", "<eos>"];

/// Bidirectional token/id map with the four reserved ids. Unknown tokens
/// look up to UNK.
#[derive(Debug, Clone)]
pub struct Vocab {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocab {
    /// Tokens with frequency >= `min_freq` get ids in descending-frequency
    /// order, ties broken lexicographically; everything else maps to UNK.
    pub fn build<S: AsRef<str>>(lines: &[Vec<S>], min_freq: usize) -> Result<Vocab> {
        if lines.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut freq: HashMap<&str, usize> = HashMap::new();
        for line in lines {
            for tok in line {
                let tok = tok.as_ref();
                if RESERVED.contains(&tok) {
                    continue;
                }
                *freq.entry(tok).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = freq
            .into_iter()
            .filter(|&(_, c)| c >= min_freq)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));

        let mut id_to_token: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        id_to_token.extend(kept.iter().map(|(t, _)| t.to_string()));
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }

    pub fn lookup(&self, token: &str) -> u32 {
        self.token_to_id.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: u32) -> &str {
        &self.id_to_token[id as usize]
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn contains_id(&self, id: u32) -> bool {
        (id as usize) < self.id_to_token.len()
    }

    /// FNV-1a over the token list in id order; ties a checkpoint to the
    /// vocab it was trained with.
    pub fn content_hash(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for tok in &self.id_to_token {
            for b in tok.as_bytes() {
                h ^= *b as u64;
                h = h.wrapping_mul(0x100000001b3);
            }
            h ^= 0x0a;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    /// One token per line, id order (reserved tokens first).
    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.id_to_token.join("\n") + "\n")?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = fs::read_to_string(path)?;
        let id_to_token: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if id_to_token.len() < RESERVED.len()
            || RESERVED
                .iter()
                .zip(&id_to_token)
                .any(|(r, t)| r != t)
        {
            return Err(Error::Parse {
                path: path.display().to_string(),
                line: 1,
                msg: "vocab file must start with the reserved tokens".into(),
            });
        }
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Ok(Vocab {
            token_to_id,
            id_to_token,
        })
    }
}

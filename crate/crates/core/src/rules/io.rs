//! Rule dataset files: UTF-8, one JSON record per line, fixed field order
//! {sid, t, scenario, method, k, src, tgt, label}, rows sorted by (sid, t).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::explain::Method;
use crate::nmt::Vocab;
use crate::rules::{RuleDataset, RuleInstance, RuleMeta, RuleWord, Scenario};

#[derive(Serialize, Deserialize)]
struct RuleRecord {
    sid: usize,
    t: usize,
    scenario: Scenario,
    method: Method,
    k: usize,
    src: Vec<(String, usize)>,
    tgt: Vec<(String, usize)>,
    label: String,
}

pub fn write_rules(
    ds: &RuleDataset,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    path: &Path,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for rule in &ds.rules {
        let rec = RuleRecord {
            sid: rule.provenance.0,
            t: rule.provenance.1,
            scenario: ds.meta.scenario,
            method: ds.meta.method,
            k: ds.meta.k,
            src: rule
                .source_words
                .iter()
                .map(|w| (src_vocab.token(w.token).to_string(), w.pos))
                .collect(),
            tgt: rule
                .target_words
                .iter()
                .map(|w| (tgt_vocab.token(w.token).to_string(), w.pos))
                .collect(),
            label: tgt_vocab.token(rule.label).to_string(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_rules(
    path: &Path,
    src_vocab: &Vocab,
    tgt_vocab: &Vocab,
    model_id: &str,
    corpus_id: &str,
) -> Result<RuleDataset> {
    let reader = BufReader::new(File::open(path)?);
    let mut rules = Vec::new();
    let mut meta: Option<RuleMeta> = None;
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: RuleRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        match &meta {
            None => {
                meta = Some(RuleMeta {
                    method: rec.method,
                    model_id: model_id.to_string(),
                    k: rec.k,
                    scenario: rec.scenario,
                    corpus_id: corpus_id.to_string(),
                });
            }
            Some(m) => {
                if m.method != rec.method || m.k != rec.k || m.scenario != rec.scenario {
                    return Err(Error::Parse {
                        path: path.display().to_string(),
                        line: i + 1,
                        msg: "mixed method/k/scenario in one rule file".into(),
                    });
                }
            }
        }
        rules.push(RuleInstance {
            source_words: rec
                .src
                .iter()
                .map(|(tok, pos)| RuleWord {
                    token: src_vocab.lookup(tok),
                    pos: *pos,
                })
                .collect(),
            target_words: rec
                .tgt
                .iter()
                .map(|(tok, pos)| RuleWord {
                    token: tgt_vocab.lookup(tok),
                    pos: *pos,
                })
                .collect(),
            label: tgt_vocab.lookup(&rec.label),
            provenance: (rec.sid, rec.t),
        });
    }
    let meta = meta.ok_or(Error::EmptyDataset)?;
    Ok(RuleDataset { rules, meta })
}

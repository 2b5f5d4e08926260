use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::rules::RuleDataset;

/// Bin upper edges by rule frequency: (0,1], (1,10], (10,100], (100,1000],
/// (1000, inf).
pub const BIN_EDGES: [usize; 4] = [1, 10, 100, 1000];

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct DensityHistogram {
    /// number of unique rules
    pub total: usize,
    /// counts per frequency bin B1..B5; bins partition the unique rules
    pub bins: [usize; 5],
}

impl DensityHistogram {
    pub fn bin_of(freq: usize) -> usize {
        match freq {
            0..=1 => 0,
            2..=10 => 1,
            11..=100 => 2,
            101..=1000 => 3,
            _ => 4,
        }
    }
}

/// Rule identity ignores positions: (source token multiset, target token
/// multiset, label). Frequencies are counted over the dataset and each
/// unique rule lands in one frequency bin.
pub fn density_histogram(ds: &RuleDataset) -> Result<DensityHistogram> {
    if ds.rules.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut counts: HashMap<(Vec<u32>, Vec<u32>, u32), usize> = HashMap::new();
    for rule in &ds.rules {
        let mut src: Vec<u32> = rule.source_words.iter().map(|w| w.token).collect();
        let mut tgt: Vec<u32> = rule.target_words.iter().map(|w| w.token).collect();
        src.sort_unstable();
        tgt.sort_unstable();
        *counts.entry((src, tgt, rule.label)).or_insert(0) += 1;
    }
    let mut bins = [0usize; 5];
    for &freq in counts.values() {
        bins[DensityHistogram::bin_of(freq)] += 1;
    }
    Ok(DensityHistogram {
        total: counts.len(),
        bins,
    })
}

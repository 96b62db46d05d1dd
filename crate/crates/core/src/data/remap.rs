//! Vocabulary merging and label remapping for mixed-dataset training.

use std::sync::Arc;

use crate::domain::{ClassVocabulary, SemanticLabelMap};
use crate::error::{validation, Result};

/// Index substitution `local → merged`; 0 always maps to 0. Entries may be
/// undefined (as in the inverse of a non-surjective remap).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Remap {
    table: Vec<Option<u16>>,
}

impl Remap {
    pub fn identity(n: usize) -> Self {
        Self {
            table: (0..=n as u16).map(Some).collect(),
        }
    }

    /// `pairs` lists `(from, to)` for nonzero classes.
    pub fn from_pairs(pairs: &[(u16, u16)]) -> Result<Self> {
        let max = pairs.iter().map(|p| p.0).max().unwrap_or(0) as usize;
        let mut table = vec![None; max + 1];
        table[0] = Some(0);
        for &(from, to) in pairs {
            if from == 0 || to == 0 {
                return Err(validation("remap pairs must not involve the no-change index"));
            }
            if table[from as usize].is_some_and(|t| t != to) {
                return Err(validation(format!("index {from} mapped twice")));
            }
            table[from as usize] = Some(to);
        }
        Ok(Self { table })
    }

    pub fn get(&self, from: u16) -> Option<u16> {
        self.table.get(from as usize).copied().flatten()
    }

    /// Defined `(from, to)` pairs in ascending `from`, excluding 0.
    pub fn pairs(&self) -> Vec<(u16, u16)> {
        self.table
            .iter()
            .enumerate()
            .skip(1)
            .filter_map(|(i, t)| t.map(|t| (i as u16, t)))
            .collect()
    }

    pub fn is_injective(&self) -> bool {
        let mut seen: Vec<u16> = self.pairs().iter().map(|p| p.1).collect();
        seen.sort_unstable();
        seen.windows(2).all(|w| w[0] != w[1])
    }

    /// `merged → local`; fails if two local indices share a target.
    pub fn inverse(&self) -> Result<Self> {
        if !self.is_injective() {
            return Err(validation("remap is not injective"));
        }
        let swapped: Vec<(u16, u16)> = self.pairs().iter().map(|&(a, b)| (b, a)).collect();
        Self::from_pairs(&swapped)
    }
}

/// First-seen-order union of the vocabularies, with one `local → merged`
/// remap per input.
pub fn merge_vocabularies(vocabs: &[&ClassVocabulary]) -> Result<(ClassVocabulary, Vec<Remap>)> {
    if vocabs.is_empty() {
        return Err(validation("no vocabularies to merge"));
    }
    let mut merged = ClassVocabulary::default();
    let mut remaps = Vec::with_capacity(vocabs.len());
    for (k, v) in vocabs.iter().enumerate() {
        if v.is_empty() {
            return Err(validation(format!("vocabulary {k} is empty")));
        }
        let pairs: Vec<(u16, u16)> = v
            .iter()
            .map(|(i, name)| (i as u16, merged.push_unique(name) as u16))
            .collect();
        remaps.push(Remap::from_pairs(&pairs)?);
    }
    Ok((merged, remaps))
}

pub fn apply_remap(map: &SemanticLabelMap, remap: &Remap, vocab: Arc<ClassVocabulary>) -> Result<SemanticLabelMap> {
    let labels = map
        .labels()
        .iter()
        .map(|&l| remap.get(l).ok_or_else(|| validation(format!("label {l} has no remap entry"))))
        .collect::<Result<Vec<u16>>>()?;
    SemanticLabelMap::new(map.height(), map.width(), labels, vocab)
}

/// Pixel count per class index `0..=|vocab|`.
pub fn class_histogram<'a>(maps: impl IntoIterator<Item = &'a SemanticLabelMap>, num_classes: usize) -> Vec<u64> {
    let mut hist = vec![0u64; num_classes + 1];
    for m in maps {
        for &l in m.labels() {
            hist[l as usize] += 1;
        }
    }
    hist
}

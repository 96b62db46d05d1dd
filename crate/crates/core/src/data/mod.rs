//! Bitemporal dataset ingestion, vocabulary merging for mixed-dataset
//! training, and the synthetic-pair manifest.
//!
//! Layouts:
//!
//! * `scd_pairs`: `im1/`, `im2/`, `label1/`, `label2/` with one `<id>.png`
//!   each; labels are 8-bit index maps, or RGB maps decoded through a
//!   palette.
//! * `bcd_pairs`: `A/`, `B/`, `label/`; labels are `{0, 255}` masks.
//! * `synthetic_manifest`: a JSON-lines manifest of generated pairs.

mod imageio;
mod remap;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use imageio::{read_label_png, read_mask_png, read_rgb_png, write_label_png, write_mask_png, write_rgb_png};
pub use remap::{apply_remap, class_histogram, merge_vocabularies, Remap};

use crate::domain::{BinaryChangeMap, ClassVocabulary, RasterPair, SemanticLabelMap};
use crate::error::{io_err, validation, RcdError, Result};
use crate::rcdgen::SyntheticRecord;

pub const MANIFEST_FILE: &str = "manifest.jsonl";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayoutKind {
    ScdPairs,
    BcdPairs,
    SyntheticManifest,
}

impl std::str::FromStr for LayoutKind {
    type Err = RcdError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "scd_pairs" => Ok(Self::ScdPairs),
            "bcd_pairs" => Ok(Self::BcdPairs),
            "synthetic_manifest" => Ok(Self::SyntheticManifest),
            other => Err(RcdError::Config(format!("unknown layout `{other}`"))),
        }
    }
}

/// How label PNGs encode class indices.
#[derive(Debug, Clone, PartialEq, Default)]
pub enum LabelEncoding {
    /// Pixel value is the class index.
    #[default]
    Index,
    /// RGB colour → class index; unknown colours are ingestion errors.
    Palette(Vec<([u8; 3], u16)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    /// Source tag carried by every sample.
    pub name: String,
    pub root: PathBuf,
    pub layout: LayoutKind,
    pub vocab: Arc<ClassVocabulary>,
    pub labels: LabelEncoding,
    /// Split name → ids.
    pub splits: BTreeMap<String, Vec<String>>,
}

impl DatasetSpec {
    pub fn new(name: impl Into<String>, root: impl Into<PathBuf>, layout: LayoutKind, vocab: Arc<ClassVocabulary>) -> Self {
        Self {
            name: name.into(),
            root: root.into(),
            layout,
            vocab,
            labels: LabelEncoding::Index,
            splits: BTreeMap::new(),
        }
    }

    pub fn with_split(mut self, split: impl Into<String>, ids: Vec<String>) -> Self {
        self.splits.insert(split.into(), ids);
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab.is_empty() {
            return Err(validation(format!("dataset `{}` has an empty vocabulary", self.name)));
        }
        if self.layout == LayoutKind::BcdPairs && self.vocab.len() != 1 {
            return Err(validation(format!(
                "binary dataset `{}` needs exactly one class, got {}",
                self.name,
                self.vocab.len()
            )));
        }
        if !self.root.is_dir() {
            return Err(validation(format!("dataset root {} is not a directory", self.root.display())));
        }
        Ok(())
    }

    fn ids(&self, split: &str) -> Result<&[String]> {
        self.splits
            .get(split)
            .map(Vec::as_slice)
            .ok_or_else(|| RcdError::Config(format!("dataset `{}` has no `{split}` split", self.name)))
    }
}

/// One split file: one id per line; blank lines and `#` comments skipped.
pub fn read_split_file(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect())
}

/// A validated training or evaluation sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub pair: RasterPair,
    /// Post-change semantic map (binary datasets carry their single class).
    pub label: SemanticLabelMap,
    /// Pre-change semantic map of SCD layouts; loaded but not used for
    /// training.
    pub pre_label: Option<SemanticLabelMap>,
    pub source: String,
    pub layout: LayoutKind,
}

impl Sample {
    pub fn id(&self) -> &str {
        &self.pair.id
    }

    pub fn binary(&self) -> BinaryChangeMap {
        self.label.to_binary()
    }

    /// Relabels through `remap` into `vocab`.
    pub fn remapped(&self, remap: &Remap, vocab: &Arc<ClassVocabulary>) -> Result<Self> {
        Ok(Self {
            label: apply_remap(&self.label, remap, vocab.clone())?,
            pre_label: self.pre_label.as_ref().map(|m| apply_remap(m, remap, vocab.clone())).transpose()?,
            ..self.clone()
        })
    }
}

fn ingest_err(id: &str, path: &Path, e: RcdError) -> RcdError {
    match e {
        RcdError::Ingestion { .. } => e,
        other => RcdError::Ingestion {
            id: id.to_string(),
            path: path.to_path_buf(),
            reason: other.to_string(),
        },
    }
}

/// Lazily loads a split; each item is one sample or a per-sample ingestion
/// error. With a seed, ids are shuffled deterministically.
pub struct DatasetStream<'a> {
    spec: &'a DatasetSpec,
    ids: Vec<String>,
    pos: usize,
    manifest: Option<BTreeMap<String, SyntheticRecord>>,
}

pub fn load_dataset<'a>(spec: &'a DatasetSpec, split: &str, seed: Option<u64>) -> Result<DatasetStream<'a>> {
    spec.validate()?;
    let mut ids = spec.ids(split)?.to_vec();
    let manifest = if spec.layout == LayoutKind::SyntheticManifest {
        let records = read_manifest(&spec.root.join(MANIFEST_FILE))?;
        Some(records.into_iter().map(|r| (r.id.clone(), r)).collect())
    } else {
        None
    };
    if let Some(seed) = seed {
        ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    Ok(DatasetStream { spec, ids, pos: 0, manifest })
}

/// Loads a whole split, stopping at the first ingestion error.
pub fn load_all(spec: &DatasetSpec, split: &str, seed: Option<u64>) -> Result<Vec<Sample>> {
    load_dataset(spec, split, seed)?.collect()
}

impl Iterator for DatasetStream<'_> {
    type Item = Result<Sample>;

    fn next(&mut self) -> Option<Self::Item> {
        let id = self.ids.get(self.pos)?.clone();
        self.pos += 1;
        Some(self.load(&id))
    }

    fn size_hint(&self) -> (usize, Option<usize>) {
        let n = self.ids.len() - self.pos;
        (n, Some(n))
    }
}

impl DatasetStream<'_> {
    fn load(&self, id: &str) -> Result<Sample> {
        let spec = self.spec;
        let file = |dir: &str| spec.root.join(dir).join(format!("{id}.png"));
        let rgb = |p: PathBuf| read_rgb_png(&p).map_err(|e| ingest_err(id, &p, e));
        let pair_of = |a: PathBuf, b: PathBuf| -> Result<RasterPair> {
            let (pre, post) = (rgb(a.clone())?, rgb(b)?);
            RasterPair::new(id, pre, post).map_err(|e| ingest_err(id, &a, e))
        };
        let semantic = |p: PathBuf| {
            read_label_png(&p, &spec.labels, spec.vocab.clone()).map_err(|e| ingest_err(id, &p, e))
        };
        let check = |label: &SemanticLabelMap, pair: &RasterPair, p: &Path| {
            if (label.height(), label.width()) != (pair.height(), pair.width()) {
                return Err(RcdError::Ingestion {
                    id: id.to_string(),
                    path: p.to_path_buf(),
                    reason: format!(
                        "label is {}×{} but images are {}×{}",
                        label.height(),
                        label.width(),
                        pair.height(),
                        pair.width()
                    ),
                });
            }
            Ok(())
        };
        let (pair, label, pre_label) = match spec.layout {
            LayoutKind::ScdPairs => {
                let pair = pair_of(file("im1"), file("im2"))?;
                let (l1, l2) = (file("label1"), file("label2"));
                let pre_label = semantic(l1.clone())?;
                let label = semantic(l2.clone())?;
                check(&pre_label, &pair, &l1)?;
                check(&label, &pair, &l2)?;
                (pair, label, Some(pre_label))
            }
            LayoutKind::BcdPairs => {
                let pair = pair_of(file("A"), file("B"))?;
                let lp = file("label");
                let mask = read_mask_png(&lp).map_err(|e| ingest_err(id, &lp, e))?;
                let label = mask.to_semantic(1, spec.vocab.clone()).map_err(|e| ingest_err(id, &lp, e))?;
                check(&label, &pair, &lp)?;
                (pair, label, None)
            }
            LayoutKind::SyntheticManifest => {
                let manifest = spec.root.join(MANIFEST_FILE);
                let rec = self
                    .manifest
                    .as_ref()
                    .and_then(|m| m.get(id))
                    .ok_or_else(|| RcdError::Ingestion {
                        id: id.to_string(),
                        path: manifest.clone(),
                        reason: "id not in manifest".into(),
                    })?;
                let pair = pair_of(spec.root.join(&rec.pre_image), spec.root.join(&rec.post_image))?;
                let mp = spec.root.join(&rec.change_map);
                let class = spec.vocab.index_of(&rec.prompt).ok_or_else(|| RcdError::Ingestion {
                    id: id.to_string(),
                    path: manifest.clone(),
                    reason: format!("prompt `{}` is not in the vocabulary", rec.prompt),
                })?;
                let mask = read_mask_png(&mp).map_err(|e| ingest_err(id, &mp, e))?;
                let label = mask.to_semantic(class, spec.vocab.clone()).map_err(|e| ingest_err(id, &mp, e))?;
                check(&label, &pair, &mp)?;
                (pair, label, None)
            }
        };
        Ok(Sample {
            pair,
            label,
            pre_label,
            source: spec.name.clone(),
            layout: spec.layout,
        })
    }
}

pub fn write_manifest(path: &Path, records: &[SyntheticRecord]) -> Result<()> {
    let mut text = String::new();
    for r in records {
        text.push_str(&r.to_line());
        text.push('\n');
    }
    fs::write(path, text).map_err(io_err(path))
}

pub fn read_manifest(path: &Path) -> Result<Vec<SyntheticRecord>> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| {
            SyntheticRecord::from_line(l).map_err(|e| RcdError::Ingestion {
                id: format!("line {}", i + 1),
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}

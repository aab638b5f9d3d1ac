//! On-disk dataset of precomputed meme embeddings.
//!
//! A dataset directory holds:
//!
//! - `manifest.toml`: format version, embedding dimension, responses per
//!   prompt, encoder tag and per-split record counts.
//! - `train.fmb`, `validation.fmb`, `test.fmb`: little-endian payloads, one
//!   per split (see [`format`]).
//! - `raw_texts.jsonl` (optional): audit block of the generated texts, one
//!   JSON object per line keyed by record id.

mod format;
mod synthetic;

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use format::{read_dataset, write_dataset, FORMAT_VERSION, MANIFEST_FILE, RAW_TEXTS_FILE};
pub use synthetic::{generate_synthetic, ClassCounts, SyntheticSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Validation, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "validation" | "val" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub embedding_dim: usize,
    pub responses_per_prompt: usize,
    #[serde(default)]
    pub encoder_tag: String,
    pub split_counts: BTreeMap<String, usize>,
}

impl DatasetManifest {
    /// Manifest for `records`, with split counts taken from the records.
    pub fn for_records(
        embedding_dim: usize,
        responses_per_prompt: usize,
        encoder_tag: impl Into<String>,
        records: &[MemeRecord],
    ) -> Self {
        let mut split_counts: BTreeMap<String, usize> = Split::ALL.iter().map(|s| (s.as_str().to_owned(), 0)).collect();
        for r in records {
            *split_counts.entry(r.split.as_str().to_owned()).or_default() += 1;
        }
        DatasetManifest {
            format_version: FORMAT_VERSION,
            embedding_dim,
            responses_per_prompt,
            encoder_tag: encoder_tag.into(),
            split_counts,
        }
    }

    pub fn count(&self, split: Split) -> usize {
        self.split_counts.get(split.as_str()).copied().unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 {
            return Err(Error::Manifest("embedding_dim must be >= 1".into()));
        }
        if self.responses_per_prompt == 0 {
            return Err(Error::Manifest("responses_per_prompt must be >= 1".into()));
        }
        for name in self.split_counts.keys() {
            name.parse::<Split>()
                .map_err(|_| Error::Manifest(format!("unknown split {name:?} in split_counts")))?;
        }
        Ok(())
    }
}

/// Generated texts kept for auditing; never read by training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawTexts {
    pub embedded_text: String,
    pub descriptions: Vec<String>,
    pub emotions: Vec<String>,
}

/// One meme: label, LMM hardness judgment and its embedding blocks, stored
/// unpooled at 32-bit precision as produced by the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct MemeRecord {
    pub id: String,
    pub split: Split,
    /// 1 = hateful.
    pub label: u8,
    pub lmm_prediction: u8,
    /// LMM prediction disagrees with the label. Only meaningful for training
    /// records; always false elsewhere.
    pub hard: bool,
    pub image: Vec<f32>,
    pub text: Vec<f32>,
    pub descriptions: Vec<Vec<f32>>,
    pub emotions: Vec<Vec<f32>>,
    pub raw_texts: Option<RawTexts>,
}

impl MemeRecord {
    /// Checks every record invariant against the manifest dimensions.
    pub fn validate(&self, embedding_dim: usize, responses_per_prompt: usize) -> Result<()> {
        for (field, value) in [("label", self.label), ("lmm_prediction", self.lmm_prediction)] {
            if value > 1 {
                return Err(Error::InvalidLabel {
                    id: self.id.clone(),
                    field,
                    value,
                });
            }
        }
        let expected_hard = self.split == Split::Train && self.lmm_prediction != self.label;
        if self.hard != expected_hard {
            return Err(Error::HardFlagMismatch {
                id: self.id.clone(),
                hard: self.hard,
                label: self.label,
                lmm_prediction: self.lmm_prediction,
            });
        }
        for (name, list) in [("description", &self.descriptions), ("emotion", &self.emotions)] {
            if list.len() != responses_per_prompt {
                return Err(Error::DimensionMismatch {
                    id: self.id.clone(),
                    block: format!("{name} count"),
                    expected: responses_per_prompt,
                    found: list.len(),
                });
            }
        }
        for (block, values) in self.blocks() {
            if values.len() != embedding_dim {
                return Err(Error::DimensionMismatch {
                    id: self.id.clone(),
                    block,
                    expected: embedding_dim,
                    found: values.len(),
                });
            }
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    id: self.id.clone(),
                    block,
                });
            }
        }
        Ok(())
    }

    /// All vectors in payload order, with their block names.
    pub fn blocks(&self) -> impl Iterator<Item = (String, &[f32])> {
        let head = [
            ("image".to_owned(), &self.image[..]),
            ("text".to_owned(), &self.text[..]),
        ];
        let desc = self
            .descriptions
            .iter()
            .enumerate()
            .map(|(k, v)| (format!("description[{k}]"), &v[..]));
        let emo = self
            .emotions
            .iter()
            .enumerate()
            .map(|(k, v)| (format!("emotion[{k}]"), &v[..]));
        head.into_iter().chain(desc).chain(emo)
    }
}

/// A loaded, validated dataset. Records are immutable after loading.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub records: Vec<MemeRecord>,
}

impl Dataset {
    pub fn new(manifest: DatasetManifest, records: Vec<MemeRecord>) -> Result<Self> {
        validate_all(&manifest, &records)?;
        Ok(Dataset { manifest, records })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &MemeRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    pub fn embedding_dim(&self) -> usize {
        self.manifest.embedding_dim
    }
}

pub(crate) fn validate_all(manifest: &DatasetManifest, records: &[MemeRecord]) -> Result<()> {
    manifest.validate()?;
    let mut seen = HashSet::with_capacity(records.len());
    let mut counts: BTreeMap<Split, usize> = BTreeMap::new();
    for r in records {
        r.validate(manifest.embedding_dim, manifest.responses_per_prompt)?;
        if !seen.insert(r.id.as_str()) {
            return Err(Error::DuplicateId(r.id.clone()));
        }
        *counts.entry(r.split).or_default() += 1;
    }
    for split in Split::ALL {
        let actual = counts.get(&split).copied().unwrap_or(0);
        if manifest.count(split) != actual {
            return Err(Error::CountMismatch {
                split: split.to_string(),
                manifest: manifest.count(split),
                payload: actual,
            });
        }
    }
    Ok(())
}

/// Split sizes, hard counts and class balance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DatasetSummary {
    pub embedding_dim: usize,
    pub responses_per_prompt: usize,
    pub encoder_tag: String,
    pub splits: Vec<SplitSummary>,
    pub train_hard: usize,
    pub train_hard_fraction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SplitSummary {
    pub split: Split,
    pub records: usize,
    pub hateful: usize,
    pub not_hateful: usize,
}

impl Dataset {
    pub fn summary(&self) -> DatasetSummary {
        let splits = Split::ALL
            .iter()
            .map(|&split| {
                let (mut records, mut hateful) = (0, 0);
                for r in self.split(split) {
                    records += 1;
                    hateful += usize::from(r.label == 1);
                }
                SplitSummary {
                    split,
                    records,
                    hateful,
                    not_hateful: records - hateful,
                }
            })
            .collect::<Vec<_>>();
        let train = splits[0].records;
        let train_hard = self.split(Split::Train).filter(|r| r.hard).count();
        DatasetSummary {
            embedding_dim: self.manifest.embedding_dim,
            responses_per_prompt: self.manifest.responses_per_prompt,
            encoder_tag: self.manifest.encoder_tag.clone(),
            splits,
            train_hard,
            train_hard_fraction: if train == 0 {
                0.0
            } else {
                train_hard as f64 / train as f64
            },
        }
    }
}

impl fmt::Display for DatasetSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "embedding_dim (D1): {}", self.embedding_dim)?;
        writeln!(f, "responses_per_prompt (K): {}", self.responses_per_prompt)?;
        if !self.encoder_tag.is_empty() {
            writeln!(f, "encoder: {}", self.encoder_tag)?;
        }
        for s in &self.splits {
            writeln!(
                f,
                "{:<10} {:>6} records  hateful {:>6}  not hateful {:>6}",
                s.split.as_str(),
                s.records,
                s.hateful,
                s.not_hateful
            )?;
        }
        let train = self.splits.first().map_or(0, |s| s.records);
        write!(
            f,
            "hard (train): {} of {} ({:.2}%)",
            self.train_hard,
            train,
            100.0 * self.train_hard_fraction
        )
    }
}

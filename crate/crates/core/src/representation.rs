//! Meme representation: average pooling of the K generated-text embeddings
//! and concatenation of the enabled blocks in the fixed order
//! `[image, text, descriptions, emotions]`.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::MemeRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub use_image: bool,
    pub use_text: bool,
    pub use_descriptions: bool,
    pub use_emotions: bool,
    /// Scale each enabled block to unit Euclidean norm before concatenating.
    #[serde(default)]
    pub l2_normalize_blocks: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig::ALL
    }
}

impl FusionConfig {
    pub const ALL: FusionConfig = FusionConfig {
        use_image: true,
        use_text: true,
        use_descriptions: true,
        use_emotions: true,
        l2_normalize_blocks: false,
    };

    /// Image and embedded text only.
    pub const BASELINE: FusionConfig = FusionConfig {
        use_descriptions: false,
        use_emotions: false,
        ..FusionConfig::ALL
    };

    pub fn enabled_blocks(&self) -> usize {
        [self.use_image, self.use_text, self.use_descriptions, self.use_emotions]
            .iter()
            .filter(|&&b| b)
            .count()
    }

    pub fn feature_dim(&self, embedding_dim: usize) -> usize {
        embedding_dim * self.enabled_blocks()
    }

    pub fn validate(&self) -> Result<()> {
        if self.enabled_blocks() == 0 {
            return Err(Error::Config("at least one embedding block must be enabled".into()));
        }
        Ok(())
    }

    /// Short tag such as `i+t+d+m`.
    pub fn tag(&self) -> String {
        let parts: Vec<&str> = [
            (self.use_image, "i"),
            (self.use_text, "t"),
            (self.use_descriptions, "d"),
            (self.use_emotions, "m"),
        ]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, s)| *s)
        .collect();
        let mut tag = parts.join("+");
        if self.l2_normalize_blocks {
            tag.push_str("/l2");
        }
        tag
    }
}

/// The head's input for one meme.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedSample {
    pub id: String,
    pub features: Vec<f64>,
    pub label: u8,
    pub hard: bool,
}

/// Component-wise mean of equally sized vectors.
pub fn pool_average<V: AsRef<[f32]>>(vectors: &[V]) -> Result<Vec<f64>> {
    let first = vectors.first().ok_or(Error::EmptyPool)?.as_ref();
    let dim = first.len();
    let mut acc = vec![0.0f64; dim];
    for (index, v) in vectors.iter().enumerate() {
        let v = v.as_ref();
        if v.len() != dim {
            return Err(Error::Ragged {
                index,
                expected: dim,
                found: v.len(),
            });
        }
        for (a, &x) in acc.iter_mut().zip(v) {
            *a += f64::from(x);
        }
    }
    let k = vectors.len() as f64;
    acc.iter_mut().for_each(|a| *a /= k);
    Ok(acc)
}

fn push_block(out: &mut Vec<f64>, block: impl IntoIterator<Item = f64>, normalize: bool) {
    let start = out.len();
    out.extend(block);
    if normalize {
        let norm = out[start..].iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            out[start..].iter_mut().for_each(|x| *x /= norm);
        }
    }
}

pub fn fuse(record: &MemeRecord, config: &FusionConfig) -> Result<FusedSample> {
    config.validate()?;
    let norm = config.l2_normalize_blocks;
    let mut features = Vec::with_capacity(config.feature_dim(record.image.len()));
    if config.use_image {
        push_block(&mut features, record.image.iter().map(|&x| f64::from(x)), norm);
    }
    if config.use_text {
        push_block(&mut features, record.text.iter().map(|&x| f64::from(x)), norm);
    }
    if config.use_descriptions {
        push_block(&mut features, pool_average(&record.descriptions)?, norm);
    }
    if config.use_emotions {
        push_block(&mut features, pool_average(&record.emotions)?, norm);
    }
    Ok(FusedSample {
        id: record.id.clone(),
        features,
        label: record.label,
        hard: record.hard,
    })
}

/// Fused features, labels and hard flags of a record set, as a
/// `records x P` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedSet {
    pub features: Array2<f64>,
    pub labels: Vec<u8>,
    pub hard: Vec<bool>,
    pub ids: Vec<String>,
}

impl FusedSet {
    pub fn from_records<'a>(
        records: impl IntoIterator<Item = &'a MemeRecord>,
        config: &FusionConfig,
        embedding_dim: usize,
    ) -> Result<Self> {
        let p = config.feature_dim(embedding_dim);
        let mut flat = Vec::new();
        let (mut labels, mut hard, mut ids) = (Vec::new(), Vec::new(), Vec::new());
        for r in records {
            let s = fuse(r, config)?;
            if s.features.len() != p {
                return Err(Error::Shape(format!(
                    "record {}: fused length {} but expected {p}",
                    s.id,
                    s.features.len()
                )));
            }
            flat.extend_from_slice(&s.features);
            labels.push(s.label);
            hard.push(s.hard);
            ids.push(s.id);
        }
        let features = Array2::from_shape_vec((labels.len(), p), flat).map_err(|e| Error::Shape(e.to_string()))?;
        Ok(FusedSet {
            features,
            labels,
            hard,
            ids,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

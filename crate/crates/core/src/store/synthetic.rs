//! Planted-hard synthetic datasets for model-free testing.
//!
//! Generation is fully determined by [`SyntheticSpec`]. Random numbers come
//! from ChaCha8 (`rand_chacha`), seeded with `seed`:
//!
//! - stream 0 draws one unit direction per block (image, text, descriptions,
//!   emotions), shuffles the label order of each split, and picks the hard
//!   training records (the first `floor(hard_fraction * n_train)` of a
//!   shuffled index list);
//! - record `i` (its position in the output) draws from stream `i + 1`.
//!
//! Each block of a record has its own scalar latent
//! `z = s * separation / 2 + noise * xi`, with `s = -1` for label 0 and `+1`
//! for label 1. Hard training records have every latent moved by
//! `hard_shift` toward the opposite class. A block vector is
//! `z * u_block + noise * eps`; the K description (emotion) responses share
//! the description (emotion) latent and each get their own `eps`. Class means
//! within a block are therefore `separation` apart.
//!
//! Per record, the stream yields, block by block: `xi`, then the `eps` of
//! each vector.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetManifest, MemeRecord, Split};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ClassCounts {
    pub not_hateful: usize,
    pub hateful: usize,
}

impl ClassCounts {
    pub fn balanced(total: usize) -> Self {
        ClassCounts {
            not_hateful: total - total / 2,
            hateful: total / 2,
        }
    }

    pub fn total(&self) -> usize {
        self.not_hateful + self.hateful
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub embedding_dim: usize,
    pub responses_per_prompt: usize,
    pub train: ClassCounts,
    pub validation: ClassCounts,
    pub test: ClassCounts,
    pub separation: f64,
    pub noise: f64,
    pub hard_fraction: f64,
    pub hard_shift: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    /// The planted-hard benchmark: 2000/400/400 records, D=16, K=10.
    fn default() -> Self {
        SyntheticSpec {
            embedding_dim: 16,
            responses_per_prompt: 10,
            train: ClassCounts::balanced(2000),
            validation: ClassCounts::balanced(400),
            test: ClassCounts::balanced(400),
            separation: 2.0,
            noise: 1.0,
            hard_fraction: 0.3,
            hard_shift: 2.5,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.embedding_dim == 0 || self.responses_per_prompt == 0 {
            return Err(Error::Config(
                "embedding_dim and responses_per_prompt must be >= 1".into(),
            ));
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return Err(Error::Config(format!(
                "hard_fraction {} outside [0, 1]",
                self.hard_fraction
            )));
        }
        if !(self.noise > 0.0 && self.noise.is_finite()) {
            return Err(Error::Config(format!("noise scale must be > 0, got {}", self.noise)));
        }
        if !self.separation.is_finite() || !self.hard_shift.is_finite() {
            return Err(Error::Config("separation and hard_shift must be finite".into()));
        }
        Ok(())
    }

    fn counts(&self, split: Split) -> ClassCounts {
        match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }

    /// Number of hard training records the generator plants.
    pub fn hard_count(&self) -> usize {
        (self.hard_fraction * self.train.total() as f64).floor() as usize
    }
}

fn unit_direction(rng: &mut ChaCha8Rng, d: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

fn block(rng: &mut ChaCha8Rng, z: f64, dir: &[f64], noise: f64) -> Vec<f32> {
    dir.iter()
        .map(|&u| {
            let eps: f64 = rng.sample(StandardNormal);
            (z * u + noise * eps) as f32
        })
        .collect()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let d = spec.embedding_dim;
    let k = spec.responses_per_prompt;

    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let dirs: Vec<Vec<f64>> = (0..4).map(|_| unit_direction(&mut master, d)).collect();

    let mut labels_by_split = Vec::new();
    for split in Split::ALL {
        let c = spec.counts(split);
        let mut labels: Vec<u8> = std::iter::repeat_n(0, c.not_hateful)
            .chain(std::iter::repeat_n(1, c.hateful))
            .collect();
        labels.shuffle(&mut master);
        labels_by_split.push((split, labels));
    }

    let n_train = spec.train.total();
    let mut order: Vec<usize> = (0..n_train).collect();
    order.shuffle(&mut master);
    let mut hard = vec![false; n_train];
    for &i in &order[..spec.hard_count()] {
        hard[i] = true;
    }

    let mut records = Vec::with_capacity(n_train + spec.validation.total() + spec.test.total());
    for (split, labels) in labels_by_split {
        for (j, label) in labels.into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(records.len() as u64 + 1);
            let is_hard = split == Split::Train && hard[j];
            let sign = if label == 1 { 1.0 } else { -1.0 };
            let shift = if is_hard { sign * spec.hard_shift } else { 0.0 };
            let latent = |rng: &mut ChaCha8Rng| {
                let xi: f64 = rng.sample(StandardNormal);
                sign * spec.separation / 2.0 + spec.noise * xi - shift
            };
            let z = latent(&mut rng);
            let image = block(&mut rng, z, &dirs[0], spec.noise);
            let z = latent(&mut rng);
            let text = block(&mut rng, z, &dirs[1], spec.noise);
            let z = latent(&mut rng);
            let descriptions = (0..k).map(|_| block(&mut rng, z, &dirs[2], spec.noise)).collect();
            let z = latent(&mut rng);
            let emotions = (0..k).map(|_| block(&mut rng, z, &dirs[3], spec.noise)).collect();
            records.push(MemeRecord {
                id: format!("syn-{}-{j:05}", split.as_str()),
                split,
                label,
                lmm_prediction: if is_hard { 1 - label } else { label },
                hard: is_hard,
                image,
                text,
                descriptions,
                emotions,
                raw_texts: None,
            });
        }
    }
    let manifest = DatasetManifest::for_records(d, k, format!("synthetic(seed={})", spec.seed), &records);
    Dataset::new(manifest, records)
}

//! Training loop, model selection, evaluation and multi-seed aggregation.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::head::{self, HeadParameters};
use crate::mining::{self, LossBreakdown, MiningConfig};
use crate::optim::{Optimizer, OptimizerKind};
use crate::representation::{FusedSet, FusionConfig};
use crate::store::{Dataset, Split};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelSelection {
    /// Parameters of the epoch with the highest validation accuracy
    /// (earliest on ties).
    #[default]
    BestValidation,
    FinalEpoch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub mining: MiningConfig,
    pub fusion: FusionConfig,
    pub seeds: Vec<u64>,
    pub optimizer: OptimizerKind,
    pub model_selection: ModelSelection,
    /// Keep every batch's loss breakdown in the epoch logs.
    #[serde(default)]
    pub log_batches: bool,
}

impl Default for TrainConfig {
    /// 500 epochs, learning rate 0.001, batch 64, n = 1, alpha = 0.05,
    /// all four blocks, five seeds.
    fn default() -> Self {
        TrainConfig {
            epochs: 500,
            learning_rate: 0.001,
            batch_size: 64,
            mining: MiningConfig::default(),
            fusion: FusionConfig::ALL,
            seeds: vec![1, 2, 3, 4, 5],
            optimizer: OptimizerKind::Adam,
            model_selection: ModelSelection::BestValidation,
            log_batches: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("batch_size must be ≥ 2".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        self.mining.validate()?;
        self.fusion.validate()
    }

    /// Alpha actually applied: n = 0 disables the auxiliary loss.
    pub fn effective_alpha(&self) -> f64 {
        if self.mining.n == 0 {
            0.0
        } else {
            self.mining.alpha
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Batch means of each loss term.
    pub l_ce: f64,
    pub l1: f64,
    pub l2: f64,
    pub l_hm: f64,
    pub l_total: f64,
    pub train_accuracy: f64,
    pub validation_accuracy: Option<f64>,
    pub n_hard: usize,
    pub n_skipped: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub batches: Vec<LossBreakdown>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub test_accuracy: f64,
    pub validation_accuracy: Option<f64>,
    pub selected_epoch: usize,
    pub skipped_terms: usize,
    pub epochs: Vec<EpochLog>,
}

impl SeedMetrics {
    pub fn final_train_accuracy(&self) -> f64 {
        self.epochs.last().map_or(0.0, |e| e.train_accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub per_seed: Vec<SeedMetrics>,
    pub mean_accuracy: f64,
    pub std_accuracy: f64,
}

/// Mean and sample standard deviation (0 for a single value).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

impl RunMetrics {
    pub fn from_seeds(per_seed: Vec<SeedMetrics>) -> Self {
        let acc: Vec<f64> = per_seed.iter().map(|s| s.test_accuracy).collect();
        let (mean_accuracy, std_accuracy) = mean_std(&acc);
        RunMetrics {
            per_seed,
            mean_accuracy,
            std_accuracy,
        }
    }
}

/// Fused train/validation/test matrices for one fusion setting.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: FusedSet,
    pub validation: FusedSet,
    pub test: FusedSet,
}

impl PreparedData {
    pub fn new(dataset: &Dataset, fusion: &FusionConfig) -> Result<Self> {
        let d = dataset.embedding_dim();
        Ok(PreparedData {
            train: FusedSet::from_records(dataset.split(Split::Train), fusion, d)?,
            validation: FusedSet::from_records(dataset.split(Split::Validation), fusion, d)?,
            test: FusedSet::from_records(dataset.split(Split::Test), fusion, d)?,
        })
    }
}

/// Fraction of rows whose argmax logit equals the label.
pub fn evaluate(params: &HeadParameters, set: &FusedSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::EmptySplit("evaluation".into()));
    }
    let trace = head::forward(params, set.features.view())?;
    let correct = head::predict(trace.logits.view())
        .iter()
        .zip(&set.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / set.len() as f64)
}

pub fn evaluate_split(params: &HeadParameters, dataset: &Dataset, split: Split, fusion: &FusionConfig) -> Result<f64> {
    let set = FusedSet::from_records(dataset.split(split), fusion, dataset.embedding_dim())?;
    if set.is_empty() {
        return Err(Error::EmptySplit(split.to_string()));
    }
    evaluate(params, &set)
}

/// Output of one batch update.
pub struct StepOutcome {
    pub breakdown: LossBreakdown,
    pub correct: usize,
}

/// Forward, composite loss, backward and optimizer step on one batch.
pub fn train_step(
    params: &mut HeadParameters,
    optimizer: &mut Optimizer,
    features: &Array2<f64>,
    labels: &[u8],
    hard: &[bool],
    config: &TrainConfig,
) -> Result<StepOutcome> {
    let trace = head::forward(params, features.view())?;
    let (l_ce, grad_logits) = head::cross_entropy(trace.logits.view(), labels);
    let correct = head::predict(trace.logits.view())
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();

    let alpha = config.effective_alpha();
    let mut breakdown = LossBreakdown {
        l_ce,
        l_total: l_ce,
        ..LossBreakdown::default()
    };
    let mut injected = None;
    if config.mining.n > 0 && labels.len() >= 2 && hard.iter().any(|&h| h) {
        let assignment = mining::find_neighbors(trace.penultimate.view(), labels, hard, config.mining.n);
        let loss = mining::mining_loss(
            trace.penultimate.view(),
            &assignment,
            &MiningConfig { alpha, ..config.mining },
        );
        breakdown.l1 = loss.l1;
        breakdown.l2 = loss.l2;
        breakdown.l_hm = loss.l_hm;
        breakdown.n_hard = loss.n_hard;
        breakdown.n_skipped = loss.n_skipped;
        breakdown.l_total = mining::total_loss(l_ce, loss.l_hm, alpha);
        if alpha > 0.0 {
            injected = Some(loss.grad_penultimate);
        }
    }

    let grads = head::backward(params, &trace, grad_logits.view(), injected.as_ref().map(|g| g.view()))?;
    optimizer.step(params, &grads, config.learning_rate);
    Ok(StepOutcome { breakdown, correct })
}

/// Seeded per-epoch permutations of `0..len`.
pub struct EpochShuffler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
}

impl EpochShuffler {
    pub fn new(len: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(1);
        EpochShuffler {
            rng,
            order: (0..len).collect(),
        }
    }

    pub fn next_epoch(&mut self) -> &[usize] {
        self.order.shuffle(&mut self.rng);
        &self.order
    }
}

pub fn train_prepared(data: &PreparedData, config: &TrainConfig, seed: u64) -> Result<(HeadParameters, SeedMetrics)> {
    train_prepared_observed(data, config, seed, |_, _| {})
}

/// [`train_prepared`], calling `observe(epoch, params)` after every epoch.
pub fn train_prepared_observed(
    data: &PreparedData,
    config: &TrainConfig,
    seed: u64,
    mut observe: impl FnMut(usize, &HeadParameters),
) -> Result<(HeadParameters, SeedMetrics)> {
    config.validate()?;
    let train = &data.train;
    if train.is_empty() {
        return Err(Error::EmptySplit("train".into()));
    }
    if config.model_selection == ModelSelection::BestValidation && data.validation.is_empty() {
        return Err(Error::EmptySplit(
            "validation (required by best_validation model selection)".into(),
        ));
    }
    if data.test.is_empty() {
        return Err(Error::EmptySplit("test".into()));
    }

    let mut params = HeadParameters::init(train.features.ncols(), seed);
    let mut optimizer = Optimizer::new(config.optimizer, &params);
    let mut shuffler = EpochShuffler::new(train.len(), seed);
    let mut best: Option<(f64, usize, HeadParameters)> = None;
    let mut epochs = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        let order = shuffler.next_epoch().to_vec();
        let mut sums = LossBreakdown::default();
        let mut batches = Vec::new();
        let mut correct = 0;
        let mut n_batches = 0;
        for idx in order.chunks(config.batch_size) {
            let features = train.features.select(Axis(0), idx);
            let labels: Vec<u8> = idx.iter().map(|&i| train.labels[i]).collect();
            let hard: Vec<bool> = idx.iter().map(|&i| train.hard[i]).collect();
            let out = train_step(&mut params, &mut optimizer, &features, &labels, &hard, config)?;
            let b = out.breakdown;
            sums.l_ce += b.l_ce;
            sums.l1 += b.l1;
            sums.l2 += b.l2;
            sums.l_hm += b.l_hm;
            sums.l_total += b.l_total;
            sums.n_hard += b.n_hard;
            sums.n_skipped += b.n_skipped;
            correct += out.correct;
            n_batches += 1;
            if config.log_batches {
                batches.push(b);
            }
        }
        observe(epoch, &params);
        if !params.is_finite() {
            return Err(Error::Config(format!(
                "training diverged at epoch {epoch} (non-finite parameters)"
            )));
        }
        let validation_accuracy = if data.validation.is_empty() {
            None
        } else {
            Some(evaluate(&params, &data.validation)?)
        };
        if let Some(acc) = validation_accuracy {
            if best.as_ref().is_none_or(|(b, _, _)| acc > *b) {
                best = Some((acc, epoch, params.clone()));
            }
        }
        let nb = n_batches as f64;
        epochs.push(EpochLog {
            epoch,
            l_ce: sums.l_ce / nb,
            l1: sums.l1 / nb,
            l2: sums.l2 / nb,
            l_hm: sums.l_hm / nb,
            l_total: sums.l_total / nb,
            train_accuracy: correct as f64 / train.len() as f64,
            validation_accuracy,
            n_hard: sums.n_hard,
            n_skipped: sums.n_skipped,
            batches,
        });
    }

    let (selected, selected_epoch, validation_accuracy) = match (config.model_selection, best) {
        (ModelSelection::BestValidation, Some((acc, epoch, p))) => (p, epoch, Some(acc)),
        _ => {
            let last = epochs.last().and_then(|e| e.validation_accuracy);
            (params, config.epochs, last)
        }
    };
    let test_accuracy = evaluate(&selected, &data.test)?;
    let skipped_terms = epochs.iter().map(|e| e.n_skipped).sum();
    Ok((
        selected,
        SeedMetrics {
            seed,
            test_accuracy,
            validation_accuracy,
            selected_epoch,
            skipped_terms,
            epochs,
        },
    ))
}

pub fn train_run(dataset: &Dataset, config: &TrainConfig, seed: u64) -> Result<(HeadParameters, SeedMetrics)> {
    config.validate()?;
    let data = PreparedData::new(dataset, &config.fusion)?;
    train_prepared(&data, config, seed)
}

/// One run per seed; returns the aggregated metrics and each seed's
/// selected parameters.
pub fn train_multi_with_params(dataset: &Dataset, config: &TrainConfig) -> Result<(RunMetrics, Vec<HeadParameters>)> {
    config.validate()?;
    if config.seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let data = PreparedData::new(dataset, &config.fusion)?;
    let mut per_seed = Vec::with_capacity(config.seeds.len());
    let mut params = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let (p, m) = train_prepared(&data, config, seed)?;
        params.push(p);
        per_seed.push(m);
    }
    Ok((RunMetrics::from_seeds(per_seed), params))
}

pub fn train_multi(dataset: &Dataset, config: &TrainConfig) -> Result<RunMetrics> {
    train_multi_with_params(dataset, config).map(|(m, _)| m)
}

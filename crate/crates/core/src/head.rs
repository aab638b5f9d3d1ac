//! Three-layer classification head (P -> 512 -> 256 -> 2) with hand-derived
//! forward and backward passes.
//!
//! Layers 1 and 2 are followed by a rectifier; layer 3 emits raw logits.
//! The post-activation output of layer 2 is the penultimate embedding used
//! by the hard-mining loss, and [`backward`] accepts an extra gradient
//! injected there.

use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis, Zip};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const HIDDEN_DIM: usize = 512;
pub const PENULTIMATE_DIM: usize = 256;
pub const NUM_CLASSES: usize = 2;

const CHECKPOINT_MAGIC: &[u8; 4] = b"FMH1";

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParameters {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array2<f64>,
    pub b2: Array1<f64>,
    pub w3: Array2<f64>,
    pub b3: Array1<f64>,
}

/// Gradients with the same layout as [`HeadParameters`].
pub type HeadGradients = HeadParameters;

fn glorot(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Array2<f64> {
    let bound = glorot_bound(fan_in, fan_out);
    let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
    Array2::from_shape_simple_fn((fan_in, fan_out), || dist.sample(rng))
}

/// Half-width of the uniform initialization range of a `fan_in x fan_out` layer.
pub fn glorot_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl HeadParameters {
    /// Uniform fan-based initialization, zero biases. Deterministic per seed.
    pub fn init(input_dim: usize, seed: u64) -> Self {
        assert!(input_dim >= 1, "input_dim must be >= 1");
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w1 = glorot(&mut rng, input_dim, HIDDEN_DIM);
        let w2 = glorot(&mut rng, HIDDEN_DIM, PENULTIMATE_DIM);
        let w3 = glorot(&mut rng, PENULTIMATE_DIM, NUM_CLASSES);
        HeadParameters {
            w1,
            b1: Array1::zeros(HIDDEN_DIM),
            w2,
            b2: Array1::zeros(PENULTIMATE_DIM),
            w3,
            b3: Array1::zeros(NUM_CLASSES),
        }
    }

    pub fn zeros(input_dim: usize) -> Self {
        HeadParameters {
            w1: Array2::zeros((input_dim, HIDDEN_DIM)),
            b1: Array1::zeros(HIDDEN_DIM),
            w2: Array2::zeros((HIDDEN_DIM, PENULTIMATE_DIM)),
            b2: Array1::zeros(PENULTIMATE_DIM),
            w3: Array2::zeros((PENULTIMATE_DIM, NUM_CLASSES)),
            b3: Array1::zeros(NUM_CLASSES),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w1.nrows()
    }

    pub fn zeros_like(&self) -> Self {
        HeadParameters::zeros(self.input_dim())
    }

    pub fn tensor_names() -> [&'static str; 6] {
        ["w1", "b1", "w2", "b2", "w3", "b3"]
    }

    pub fn tensors(&self) -> [&[f64]; 6] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
            self.w3.as_slice().expect("standard layout"),
            self.b3.as_slice().expect("standard layout"),
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut [f64]; 6] {
        [
            self.w1.as_slice_mut().expect("standard layout"),
            self.b1.as_slice_mut().expect("standard layout"),
            self.w2.as_slice_mut().expect("standard layout"),
            self.b2.as_slice_mut().expect("standard layout"),
            self.w3.as_slice_mut().expect("standard layout"),
            self.b3.as_slice_mut().expect("standard layout"),
        ]
    }

    pub fn num_parameters(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }

    fn check_shapes(&self) -> Result<()> {
        let p = self.input_dim();
        let ok = self.w1.dim() == (p, HIDDEN_DIM)
            && self.b1.len() == HIDDEN_DIM
            && self.w2.dim() == (HIDDEN_DIM, PENULTIMATE_DIM)
            && self.b2.len() == PENULTIMATE_DIM
            && self.w3.dim() == (PENULTIMATE_DIM, NUM_CLASSES)
            && self.b3.len() == NUM_CLASSES;
        if ok {
            Ok(())
        } else {
            Err(Error::Shape(
                "head parameter shapes do not match the 512/256/2 layout".into(),
            ))
        }
    }

    pub fn write_checkpoint(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::with_capacity(20 + 8 * self.num_parameters());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for dim in [self.input_dim(), HIDDEN_DIM, PENULTIMATE_DIM, NUM_CLASSES] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for t in self.tensors() {
            for v in t {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        if bytes.len() < 20 || &bytes[..4] != CHECKPOINT_MAGIC {
            return Err(Error::Checkpoint(format!("{}: bad magic or header", path.display())));
        }
        let dim = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize;
        let (p, h1, h2, c) = (dim(0), dim(1), dim(2), dim(3));
        if p == 0 || (h1, h2, c) != (HIDDEN_DIM, PENULTIMATE_DIM, NUM_CLASSES) {
            return Err(Error::Checkpoint(format!("unsupported layout {p}/{h1}/{h2}/{c}")));
        }
        let mut params = HeadParameters::zeros(p);
        let expected = 20 + 8 * params.num_parameters();
        if bytes.len() != expected {
            return Err(Error::Checkpoint(format!(
                "{}: expected {expected} bytes, found {}",
                path.display(),
                bytes.len()
            )));
        }
        let mut values = bytes[20..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()));
        for t in params.tensors_mut() {
            for v in t.iter_mut() {
                *v = values.next().unwrap();
            }
        }
        if !params.is_finite() {
            return Err(Error::Checkpoint("non-finite parameter".into()));
        }
        Ok(params)
    }
}

/// Intermediate values of one forward pass over a batch.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub input: Array2<f64>,
    pub pre1: Array2<f64>,
    pub hidden: Array2<f64>,
    pub pre2: Array2<f64>,
    /// Post-activation output of layer 2, `batch x 256`.
    pub penultimate: Array2<f64>,
    /// `batch x 2`, no softmax applied.
    pub logits: Array2<f64>,
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

pub fn forward(params: &HeadParameters, batch: ArrayView2<'_, f64>) -> Result<ForwardTrace> {
    params.check_shapes()?;
    if batch.ncols() != params.input_dim() {
        return Err(Error::Shape(format!(
            "batch has {} features, head expects {}",
            batch.ncols(),
            params.input_dim()
        )));
    }
    let input = batch.to_owned();
    let pre1 = input.dot(&params.w1) + &params.b1;
    let hidden = relu(&pre1);
    let pre2 = hidden.dot(&params.w2) + &params.b2;
    let penultimate = relu(&pre2);
    let logits = penultimate.dot(&params.w3) + &params.b3;
    Ok(ForwardTrace {
        input,
        pre1,
        hidden,
        pre2,
        penultimate,
        logits,
    })
}

/// Row-wise softmax with max subtraction.
pub fn softmax(logits: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row.mapv_inplace(|v| v / sum);
    }
    out
}

/// Argmax per row; ties go to class 0.
pub fn predict(logits: ArrayView2<'_, f64>) -> Vec<u8> {
    logits.rows().into_iter().map(|row| u8::from(row[1] > row[0])).collect()
}

/// Mean negative log-likelihood over the batch and its gradient w.r.t. the
/// logits (`(softmax - onehot) / batch`).
pub fn cross_entropy(logits: ArrayView2<'_, f64>, labels: &[u8]) -> (f64, Array2<f64>) {
    assert_eq!(logits.nrows(), labels.len(), "one label per logits row");
    let n = labels.len().max(1) as f64;
    let mut grad = Array2::zeros(logits.raw_dim());
    let mut loss = 0.0;
    for ((row, mut g), &label) in logits.rows().into_iter().zip(grad.rows_mut()).zip(labels) {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum_exp: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum_exp.ln();
        let y = usize::from(label);
        loss += log_z - row[y];
        for (c, gv) in g.iter_mut().enumerate() {
            let p = (row[c] - log_z).exp();
            *gv = (p - if c == y { 1.0 } else { 0.0 }) / n;
        }
    }
    (loss / n, grad)
}

/// Parameter gradients of a loss whose gradient w.r.t. the logits is
/// `grad_logits`, plus (optionally) one whose gradient w.r.t. the
/// penultimate activations is `grad_penultimate`.
pub fn backward(
    params: &HeadParameters,
    trace: &ForwardTrace,
    grad_logits: ArrayView2<'_, f64>,
    grad_penultimate: Option<ArrayView2<'_, f64>>,
) -> Result<HeadGradients> {
    let batch = trace.input.nrows();
    if grad_logits.dim() != (batch, NUM_CLASSES) {
        return Err(Error::Shape(format!("grad_logits has shape {:?}", grad_logits.dim())));
    }
    if let Some(g) = grad_penultimate {
        if g.dim() != (batch, PENULTIMATE_DIM) {
            return Err(Error::Shape(format!("grad_penultimate has shape {:?}", g.dim())));
        }
    }

    let gw3 = trace.penultimate.t().dot(&grad_logits);
    let gb3 = grad_logits.sum_axis(Axis(0));

    let mut g_pen = grad_logits.dot(&params.w3.t());
    if let Some(extra) = grad_penultimate {
        g_pen += &extra;
    }
    Zip::from(&mut g_pen).and(&trace.pre2).for_each(|g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    let gw2 = trace.hidden.t().dot(&g_pen);
    let gb2 = g_pen.sum_axis(Axis(0));

    let mut g_hidden = g_pen.dot(&params.w2.t());
    Zip::from(&mut g_hidden).and(&trace.pre1).for_each(|g, &z| {
        if z <= 0.0 {
            *g = 0.0;
        }
    });
    let gw1 = trace.input.t().dot(&g_hidden);
    let gb1 = g_hidden.sum_axis(Axis(0));

    Ok(HeadParameters {
        w1: gw1,
        b1: gb1,
        w2: gw2,
        b2: gb2,
        w3: gw3,
        b3: gb3,
    })
}

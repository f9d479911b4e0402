//! Softmax regression / one-hidden-layer tanh MLP with hand-written backprop and SGD.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Dataset;
use crate::par::Exec;
use crate::params::{LayerShape, Manifest, ParamError, ParamVector};
use crate::rng::{derive_key, draw, unit_f64, CounterRng};

/// Upper bound on parameter count accepted by [`init_params`].
pub const DEFAULT_PARAM_CAP: usize = 10_000_000;

/// Samples per partial-gradient chunk. Fixed so that parallel and sequential
/// reductions visit the same partial sums in the same order.
const CHUNK: usize = 16;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("invalid model spec: {0}")]
    InvalidSpec(String),
    #[error("model has {count} parameters, above the cap of {cap}")]
    TooLarge { count: usize, cap: usize },
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("non-finite input at sample {sample}")]
    NonFiniteInput { sample: usize },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty dataset")]
    EmptyDataset,
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("non-finite loss in epoch {epoch}, batch {batch}")]
    NonFiniteLoss { epoch: u64, batch: usize },
    #[error(transparent)]
    Params(#[from] ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct ModelSpec {
    pub input_dim: usize,
    /// 0 selects plain softmax regression.
    pub hidden_dim: usize,
    pub output_dim: usize,
    pub seed: u64,
}

impl ModelSpec {
    pub fn new(input_dim: usize, hidden_dim: usize, output_dim: usize, seed: u64) -> Self {
        Self {
            input_dim,
            hidden_dim,
            output_dim,
            seed,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.input_dim == 0 {
            return Err(ModelError::InvalidSpec("inputDim must be positive".into()));
        }
        if self.output_dim < 2 {
            return Err(ModelError::InvalidSpec("outputDim must be at least 2".into()));
        }
        Ok(())
    }

    /// Parameter count, or `None` on arithmetic overflow.
    pub fn param_count(&self) -> Option<usize> {
        let (i, h, o) = (self.input_dim, self.hidden_dim, self.output_dim);
        if h == 0 {
            i.checked_mul(o)?.checked_add(o)
        } else {
            i.checked_mul(h)?
                .checked_add(h)?
                .checked_add(h.checked_mul(o)?)?
                .checked_add(o)
        }
    }

    pub fn manifest(&self) -> Manifest {
        let (i, h, o) = (self.input_dim, self.hidden_dim, self.output_dim);
        if h == 0 {
            vec![
                LayerShape::new("output.weight", vec![i, o]),
                LayerShape::new("output.bias", vec![o]),
            ]
        } else {
            vec![
                LayerShape::new("hidden.weight", vec![i, h]),
                LayerShape::new("hidden.bias", vec![h]),
                LayerShape::new("output.weight", vec![h, o]),
                LayerShape::new("output.bias", vec![o]),
            ]
        }
    }
}

pub fn init_params(spec: &ModelSpec) -> Result<ParamVector, ModelError> {
    init_params_capped(spec, DEFAULT_PARAM_CAP)
}

/// Glorot-uniform weights, zero biases. Each weight layer draws from its own
/// counter stream keyed on `(seed, layer index)`.
pub fn init_params_capped(spec: &ModelSpec, cap: usize) -> Result<ParamVector, ModelError> {
    spec.validate()?;
    let count = spec.param_count().unwrap_or(usize::MAX);
    if count > cap {
        return Err(ModelError::TooLarge { count, cap });
    }
    let manifest = spec.manifest();
    let mut values = Vec::with_capacity(count);
    for (layer_idx, layer) in manifest.iter().enumerate() {
        if layer.dims.len() == 2 {
            let (fan_in, fan_out) = (layer.dims[0], layer.dims[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let key = derive_key(spec.seed, layer_idx as u64);
            values.extend((0..layer.len() as u64).map(|c| (2.0 * unit_f64(draw(key, c)) - 1.0) * limit));
        } else {
            values.extend(std::iter::repeat_n(0.0, layer.len()));
        }
    }
    Ok(ParamVector::new(manifest, values)?)
}

/// A minibatch as borrowed rows plus labels.
#[derive(Debug, Clone)]
pub struct Batch<'a> {
    rows: Vec<&'a [f64]>,
    labels: Vec<usize>,
}

impl<'a> Batch<'a> {
    pub fn new(rows: Vec<&'a [f64]>, labels: Vec<usize>) -> Self {
        assert_eq!(rows.len(), labels.len());
        Self { rows, labels }
    }

    pub fn from_dataset(data: &'a Dataset, indices: &[usize]) -> Self {
        Self {
            rows: indices.iter().map(|&i| data.row(i)).collect(),
            labels: indices.iter().map(|&i| data.label(i)).collect(),
        }
    }

    pub fn whole(data: &'a Dataset) -> Self {
        Self {
            rows: (0..data.len()).map(|i| data.row(i)).collect(),
            labels: data.labels().to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Borrowed view of the layers inside a [`ParamVector`].
#[derive(Debug, Clone, Copy)]
struct Net<'p> {
    input: usize,
    hidden: usize,
    output: usize,
    hidden_w: &'p [f64],
    hidden_b: &'p [f64],
    out_w: &'p [f64],
    out_b: &'p [f64],
}

impl<'p> Net<'p> {
    fn view(params: &'p ParamVector) -> Result<Self, ModelError> {
        let m = params.manifest();
        let bad = || ModelError::DimensionMismatch("unrecognised parameter manifest".into());
        let out_w_shape = m.iter().find(|l| l.name == "output.weight").ok_or_else(bad)?;
        let (fan_in, output) = match out_w_shape.dims[..] {
            [a, b] => (a, b),
            _ => return Err(bad()),
        };
        let (input, hidden) = match m.iter().find(|l| l.name == "hidden.weight") {
            Some(l) => match l.dims[..] {
                [a, b] if b == fan_in => (a, b),
                _ => return Err(bad()),
            },
            None => (fan_in, 0),
        };
        let spec = ModelSpec::new(input, hidden, output, 0);
        if spec.manifest() != m {
            return Err(bad());
        }
        let empty: &[f64] = &[];
        Ok(Net {
            input,
            hidden,
            output,
            hidden_w: params.layer("hidden.weight").unwrap_or(empty),
            hidden_b: params.layer("hidden.bias").unwrap_or(empty),
            out_w: params.layer("output.weight").unwrap(),
            out_b: params.layer("output.bias").unwrap(),
        })
    }

    fn check_batch(&self, batch: &Batch<'_>) -> Result<(), ModelError> {
        for (s, (row, &label)) in batch.rows.iter().zip(&batch.labels).enumerate() {
            if row.len() != self.input {
                return Err(ModelError::DimensionMismatch(format!(
                    "sample {s} has {} features, model expects {}",
                    row.len(),
                    self.input
                )));
            }
            if label >= self.output {
                return Err(ModelError::LabelOutOfRange {
                    label,
                    classes: self.output,
                });
            }
            if row.iter().any(|v| !v.is_finite()) {
                return Err(ModelError::NonFiniteInput { sample: s });
            }
        }
        Ok(())
    }

    /// Writes hidden activations (if any) and softmax probabilities for one row.
    fn forward_row(&self, x: &[f64], hidden: &mut [f64], probs: &mut [f64]) {
        probs.copy_from_slice(self.out_b);
        if self.hidden == 0 {
            for (i, &xi) in x.iter().enumerate() {
                if xi != 0.0 {
                    let w = &self.out_w[i * self.output..(i + 1) * self.output];
                    for (z, wk) in probs.iter_mut().zip(w) {
                        *z += xi * wk;
                    }
                }
            }
        } else {
            hidden.copy_from_slice(self.hidden_b);
            for (i, &xi) in x.iter().enumerate() {
                if xi != 0.0 {
                    let w = &self.hidden_w[i * self.hidden..(i + 1) * self.hidden];
                    for (a, wj) in hidden.iter_mut().zip(w) {
                        *a += xi * wj;
                    }
                }
            }
            for h in hidden.iter_mut() {
                *h = h.tanh();
            }
            for (j, &hj) in hidden.iter().enumerate() {
                let w = &self.out_w[j * self.output..(j + 1) * self.output];
                for (z, wk) in probs.iter_mut().zip(w) {
                    *z += hj * wk;
                }
            }
        }
        softmax_in_place(probs);
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    /// Mean negative log-likelihood.
    pub loss: f64,
    /// Row-major `batch x classes` probabilities.
    pub probs: Vec<f64>,
    pub classes: usize,
    pub correct: usize,
}

impl ForwardOutput {
    pub fn accuracy(&self) -> f64 {
        let n = self.probs.len() / self.classes.max(1);
        if n == 0 {
            0.0
        } else {
            self.correct as f64 / n as f64
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.probs[i * self.classes..(i + 1) * self.classes]
    }
}

pub fn forward_loss(params: &ParamVector, batch: &Batch<'_>) -> Result<ForwardOutput, ModelError> {
    forward_loss_with(Exec::default(), params, batch)
}

pub fn forward_loss_with(
    exec: Exec,
    params: &ParamVector,
    batch: &Batch<'_>,
) -> Result<ForwardOutput, ModelError> {
    let net = Net::view(params)?;
    net.check_batch(batch)?;
    let n = batch.len();
    if n == 0 {
        return Err(ModelError::EmptyDataset);
    }
    let k = net.output;
    let mut probs = vec![0.0; n * k];
    exec.for_each_chunk_mut(&mut probs, CHUNK * k, |c, out| {
        let mut hidden = vec![0.0; net.hidden];
        for (r, p) in out.chunks_mut(k).enumerate() {
            net.forward_row(batch.rows[c * CHUNK + r], &mut hidden, p);
        }
    });
    let mut nll = 0.0;
    let mut correct = 0;
    for (p, &y) in probs.chunks(k).zip(&batch.labels) {
        nll -= p[y].ln();
        correct += usize::from(argmax(p) == y);
    }
    Ok(ForwardOutput {
        loss: nll / n as f64,
        probs,
        classes: k,
        correct,
    })
}

/// Mean loss, accuracy count and gradient of the mean loss for one batch.
#[derive(Debug, Clone)]
pub struct GradientOutput {
    pub loss: f64,
    pub correct: usize,
    pub gradient: ParamVector,
}

struct ChunkGrad {
    nll: f64,
    correct: usize,
    grad: Vec<f64>,
}

pub fn backward(params: &ParamVector, batch: &Batch<'_>) -> Result<ParamVector, ModelError> {
    Ok(loss_and_gradient_with(Exec::default(), params, batch)?.gradient)
}

pub fn loss_and_gradient(params: &ParamVector, batch: &Batch<'_>) -> Result<GradientOutput, ModelError> {
    loss_and_gradient_with(Exec::default(), params, batch)
}

pub fn loss_and_gradient_with(
    exec: Exec,
    params: &ParamVector,
    batch: &Batch<'_>,
) -> Result<GradientOutput, ModelError> {
    let net = Net::view(params)?;
    net.check_batch(batch)?;
    let n = batch.len();
    if n == 0 {
        return Err(ModelError::EmptyDataset);
    }
    let n_chunks = n.div_ceil(CHUNK);
    let partials = exec.map_indexed(n_chunks, |c| {
        let lo = c * CHUNK;
        let hi = (lo + CHUNK).min(n);
        chunk_gradient(&net, params.len(), &batch.rows[lo..hi], &batch.labels[lo..hi])
    });
    let mut grad = vec![0.0; params.len()];
    let mut nll = 0.0;
    let mut correct = 0;
    for part in &partials {
        nll += part.nll;
        correct += part.correct;
        for (g, p) in grad.iter_mut().zip(&part.grad) {
            *g += p;
        }
    }
    let inv = 1.0 / n as f64;
    for g in grad.iter_mut() {
        *g *= inv;
    }
    Ok(GradientOutput {
        loss: nll * inv,
        correct,
        gradient: ParamVector::new(params.manifest().to_vec(), grad)?,
    })
}

fn chunk_gradient(net: &Net<'_>, len: usize, rows: &[&[f64]], labels: &[usize]) -> ChunkGrad {
    let (i_dim, h_dim, o_dim) = (net.input, net.hidden, net.output);
    let mut grad = vec![0.0; len];
    // Gradient layout mirrors the manifest order.
    let (g_hw, rest) = grad.split_at_mut(i_dim * h_dim);
    let (g_hb, rest) = rest.split_at_mut(h_dim);
    let (g_ow, g_ob) = rest.split_at_mut((if h_dim == 0 { i_dim } else { h_dim }) * o_dim);
    let mut hidden = vec![0.0; h_dim];
    let mut probs = vec![0.0; o_dim];
    let mut dh = vec![0.0; h_dim];
    let mut nll = 0.0;
    let mut correct = 0;
    for (x, &y) in rows.iter().zip(labels) {
        net.forward_row(x, &mut hidden, &mut probs);
        nll -= probs[y].ln();
        correct += usize::from(argmax(&probs) == y);
        // dL/dz = p - onehot(y)
        probs[y] -= 1.0;
        let dz = &probs;
        for (b, d) in g_ob.iter_mut().zip(dz) {
            *b += d;
        }
        let (acts, act_dim): (&[f64], usize) = if h_dim == 0 { (x, i_dim) } else { (&hidden, h_dim) };
        for j in 0..act_dim {
            let a = acts[j];
            if a != 0.0 {
                for (g, d) in g_ow[j * o_dim..(j + 1) * o_dim].iter_mut().zip(dz) {
                    *g += a * d;
                }
            }
        }
        if h_dim > 0 {
            for j in 0..h_dim {
                let w = &net.out_w[j * o_dim..(j + 1) * o_dim];
                let back: f64 = w.iter().zip(dz).map(|(w, d)| w * d).sum();
                dh[j] = back * (1.0 - hidden[j] * hidden[j]);
            }
            for (b, d) in g_hb.iter_mut().zip(&dh) {
                *b += d;
            }
            for (i, &xi) in x.iter().enumerate() {
                if xi != 0.0 {
                    for (g, d) in g_hw[i * h_dim..(i + 1) * h_dim].iter_mut().zip(&dh) {
                        *g += xi * d;
                    }
                }
            }
        }
    }
    ChunkGrad { nll, correct, grad }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs_per_round: u64,
    pub learning_rate: f64,
    pub shuffle_seed: u64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.batch_size == 0 {
            return Err(ModelError::InvalidConfig("batchSize must be positive".into()));
        }
        if self.epochs_per_round == 0 {
            return Err(ModelError::InvalidConfig("epochsPerRound must be positive".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(ModelError::InvalidConfig(
                "learningRate must be finite and non-negative".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "camelCase")]
pub struct EpochMetrics {
    /// Global epoch index (counted across rounds).
    pub epoch: u64,
    /// Sample-weighted mean of the minibatch losses seen during the epoch.
    pub loss: f64,
    /// Fraction of samples classified correctly before their batch's update.
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamVector,
    pub epochs: Vec<EpochMetrics>,
}

/// Runs `cfg.epochs_per_round` epochs starting at global epoch 0.
pub fn train_local(
    params: &ParamVector,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, ModelError> {
    train_epochs(params, data, cfg, 0, cfg.epochs_per_round)
}

/// Minibatch SGD over global epochs `first_epoch .. first_epoch + epochs`.
///
/// Epoch `e` visits samples in the order of a Fisher-Yates permutation keyed on
/// `(shuffle_seed, e)`, so splitting a run into rounds does not change it. The
/// final partial batch is kept.
pub fn train_epochs(
    params: &ParamVector,
    data: &Dataset,
    cfg: &TrainConfig,
    first_epoch: u64,
    epochs: u64,
) -> Result<TrainOutcome, ModelError> {
    train_epochs_with(Exec::default(), params, data, cfg, first_epoch, epochs)
}

pub fn train_epochs_with(
    exec: Exec,
    params: &ParamVector,
    data: &Dataset,
    cfg: &TrainConfig,
    first_epoch: u64,
    epochs: u64,
) -> Result<TrainOutcome, ModelError> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let mut current = params.clone();
    let mut metrics = Vec::with_capacity(epochs as usize);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in first_epoch..first_epoch + epochs {
        order.iter_mut().enumerate().for_each(|(i, o)| *o = i);
        CounterRng::new(derive_key(cfg.shuffle_seed, epoch)).shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut correct = 0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = Batch::from_dataset(data, idx);
            let out = loss_and_gradient_with(exec, &current, &batch)?;
            if !out.loss.is_finite() {
                return Err(ModelError::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += out.loss * idx.len() as f64;
            correct += out.correct;
            let lr = cfg.learning_rate;
            for (p, g) in current.values_mut().iter_mut().zip(out.gradient.values()) {
                *p -= lr * g;
            }
        }
        current.ensure_finite()?;
        metrics.push(EpochMetrics {
            epoch,
            loss: loss_sum / data.len() as f64,
            accuracy: correct as f64 / data.len() as f64,
        });
    }
    Ok(TrainOutcome {
        params: current,
        epochs: metrics,
    })
}

/// Deterministic loss/accuracy of `params` on a whole dataset.
pub fn evaluate(params: &ParamVector, data: &Dataset) -> Result<(f64, f64), ModelError> {
    if data.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    let out = forward_loss(params, &Batch::whole(data))?;
    Ok((out.loss, out.accuracy()))
}

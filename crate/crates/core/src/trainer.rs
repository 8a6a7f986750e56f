//! AdaDelta, the training loop and evaluation metrics.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::parse_value;
use crate::ctc::{ctc_loss, ctc_loss_on, greedy_decode, Alphabet};
use crate::data::Dataset;
use crate::derive_seed;
use crate::encoder::{logits_on, ForwardMode, Model, ModelConfig};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::{Scalar, Tensor};

pub const RHO: f64 = 0.95;
pub const EPSILON: f64 = 1e-6;

/// Decayed averages of squared gradients and squared updates, one pair of
/// tensors per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaDeltaState<T> {
    pub rho: f64,
    pub eps: f64,
    pub sq_grad: BTreeMap<String, Tensor<T>>,
    pub sq_update: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> AdaDeltaState<T> {
    pub fn new(params: &BTreeMap<String, Tensor<T>>) -> Self {
        let zeros = || params.iter().map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec()))).collect();
        Self { rho: RHO, eps: EPSILON, sq_grad: zeros(), sq_update: zeros() }
    }
}

/// One AdaDelta update in place. Every gradient is checked for finiteness
/// before any parameter moves.
pub fn adadelta_step<T: Scalar>(
    params: &mut BTreeMap<String, Tensor<T>>,
    grads: &BTreeMap<String, Tensor<T>>,
    state: &mut AdaDeltaState<T>,
) -> Result<()> {
    for (name, p) in params.iter() {
        let g = grads.get(name).ok_or_else(|| Error::MissingParameter(format!("gradient of {name}")))?;
        if g.shape() != p.shape() {
            return Err(Error::ParameterShape {
                name: name.clone(),
                expected: p.shape().to_vec(),
                found: g.shape().to_vec(),
            });
        }
        if !g.is_finite() {
            return Err(Error::NonFiniteGradient { name: name.clone() });
        }
    }
    let rho = T::from_f64(state.rho);
    let one_minus = T::from_f64(1.0 - state.rho);
    let eps = T::from_f64(state.eps);
    for (name, p) in params.iter_mut() {
        let g = grads[name].data();
        let eg = state.sq_grad.get_mut(name).ok_or_else(|| Error::MissingParameter(format!("opt state {name}")))?;
        let edx =
            state.sq_update.get_mut(name).ok_or_else(|| Error::MissingParameter(format!("opt state {name}")))?;
        for (((w, &g), eg), edx) in
            p.data_mut().iter_mut().zip(g).zip(eg.data_mut().iter_mut()).zip(edx.data_mut().iter_mut())
        {
            *eg = rho * *eg + one_minus * g * g;
            let dx = -((*edx + eps).sqrt() / (*eg + eps).sqrt()) * g;
            *edx = rho * *edx + one_minus * dx * dx;
            *w += dx;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: usize,
    /// Iterations between log records (and validation passes).
    pub val_interval: usize,
    pub seed: u64,
    /// AdaDelta's epsilon; the decay rate is fixed at [`RHO`].
    pub adadelta_eps: f64,
    /// Architecture, including the attention toggles and TCN dropout.
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 32,
            iterations: 5000,
            val_interval: 250,
            seed: 1,
            adadelta_eps: EPSILON,
            model: ModelConfig::default(),
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &["batch_size", "iterations", "val_interval", "seed", "adadelta_eps"];

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.val_interval == 0 {
            return Err(Error::InvalidArgument("batch_size and val_interval must be at least 1".into()));
        }
        if !(self.adadelta_eps > 0.0 && self.adadelta_eps.is_finite()) {
            return Err(Error::InvalidArgument(format!("adadelta_eps {} must be positive", self.adadelta_eps)));
        }
        self.model.validate()
    }

    pub fn to_pairs(&self) -> Result<Vec<(String, String)>> {
        let values = [
            self.batch_size.to_string(),
            self.iterations.to_string(),
            self.val_interval.to_string(),
            self.seed.to_string(),
            self.adadelta_eps.to_string(),
        ];
        let mut out: Vec<(String, String)> = TRAIN_KEYS.iter().map(|k| k.to_string()).zip(values).collect();
        out.extend(self.model.to_pairs()?);
        Ok(out)
    }

    /// Applies one setting, model keys included. `Ok(false)` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "iterations" => self.iterations = parse_value(key, value)?,
            "val_interval" => self.val_interval = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "adadelta_eps" => self.adadelta_eps = parse_value(key, value)?,
            _ => return self.model.set(key, value),
        }
        Ok(true)
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub iteration: usize,
    /// Mean training-batch loss since the previous record. At iteration 0 it
    /// is the eval-mode loss of the first batch.
    pub train_loss: f64,
    pub val_accuracy: f64,
}

impl LogRecord {
    /// Tab-separated `iter loss val_acc`.
    pub fn to_line(&self) -> String {
        format!("{}\t{:.6}\t{:.6}", self.iteration, self.train_loss, self.val_accuracy)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub log: Vec<LogRecord>,
    pub model: Model<f32>,
    pub optimizer: AdaDeltaState<f32>,
    /// Model with the highest validation accuracy and the iteration it was
    /// recorded at; earliest wins ties.
    pub best: (usize, f64, Model<f32>),
}

/// Endless shuffled pass over `0..n`, reshuffled every epoch.
struct BatchSampler {
    n: usize,
    seed: u64,
    epoch: u64,
    order: Vec<usize>,
    pos: usize,
}

impl BatchSampler {
    fn new(n: usize, seed: u64) -> Self {
        Self { n, seed, epoch: 0, order: Vec::new(), pos: 0 }
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(size);
        while out.len() < size {
            if self.pos == self.order.len() {
                self.order = (0..self.n).collect();
                self.order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(self.seed, self.epoch)));
                self.epoch += 1;
                self.pos = 0;
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

fn loss_and_grads(
    model: &Model<f32>,
    images: Tensor<f32>,
    labels: &[crate::ctc::LabelSeq],
    mode: ForwardMode,
) -> Result<(f64, BTreeMap<String, Tensor<f32>>)> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let x = g.constant(images);
    let logits = logits_on(&mut g, &vars, &model.config, x, mode)?;
    let loss = ctc_loss_on(&mut g, logits, labels)?;
    let value = g.value(loss).data()[0].as_f64();
    let mut grads = g.backward(loss)?;
    let named = vars
        .vars
        .iter()
        .map(|(k, &v)| (k.clone(), grads.take(v).unwrap_or_else(|| Tensor::zeros(g.shape(v).to_vec()))))
        .collect();
    Ok((value, named))
}

/// Trains a freshly initialised model. `on_record` sees every log record as
/// it is produced. Deterministic for a fixed config.
pub fn train(
    config: &TrainConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    mut on_record: impl FnMut(&LogRecord),
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::InvalidArgument("training and validation sets must be nonempty".into()));
    }
    let alphabet = Alphabet::digits();
    let mut model = Model::<f32>::init(config.model.clone(), derive_seed(config.seed, 1))?;
    let mut optimizer = AdaDeltaState::new(&model.params);
    optimizer.eps = config.adadelta_eps;
    let mut sampler = BatchSampler::new(train_set.len(), derive_seed(config.seed, 2));
    let dropout_root = derive_seed(config.seed, 3);

    let first = sampler.clone_peek(config.batch_size);
    let (images, labels) = train_set.batch::<f32>(&first, &alphabet)?;
    let initial_loss = eval_loss(&model, &images, &labels)?;
    let record = LogRecord { iteration: 0, train_loss: initial_loss, val_accuracy: evaluate(&model, val_set)?.accuracy };
    on_record(&record);
    let mut log = vec![record];
    let mut best = (0, record.val_accuracy, model.clone());

    let mut loss_sum = 0.0;
    let mut loss_count = 0usize;
    for iteration in 1..=config.iterations {
        let idx = sampler.next_batch(config.batch_size);
        let (images, labels) = train_set.batch::<f32>(&idx, &alphabet)?;
        let mode = ForwardMode::train(derive_seed(dropout_root, iteration as u64));
        let (loss, grads) = match loss_and_grads(&model, images, &labels, mode) {
            Err(Error::NonFinite { .. }) => return Err(Error::NonFiniteLoss { iteration }),
            other => other?,
        };
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        adadelta_step(&mut model.params, &grads, &mut optimizer)?;
        loss_sum += loss;
        loss_count += 1;
        if iteration % config.val_interval == 0 {
            let val_accuracy = evaluate(&model, val_set)?.accuracy;
            let record = LogRecord { iteration, train_loss: loss_sum / loss_count as f64, val_accuracy };
            on_record(&record);
            log.push(record);
            if val_accuracy > best.1 {
                best = (iteration, val_accuracy, model.clone());
            }
            loss_sum = 0.0;
            loss_count = 0;
        }
    }
    Ok(TrainOutcome { log, model, optimizer, best })
}

impl BatchSampler {
    /// The first batch [`Self::next_batch`] would return, without consuming it.
    fn clone_peek(&self, size: usize) -> Vec<usize> {
        let mut probe = Self { order: self.order.clone(), ..*self };
        probe.next_batch(size)
    }
}

fn eval_loss(model: &Model<f32>, images: &Tensor<f32>, labels: &[crate::ctc::LabelSeq]) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g);
    let x = g.constant(images.clone());
    let logits = logits_on(&mut g, &vars, &model.config, x, ForwardMode::EVAL)?;
    Ok(ctc_loss(g.value(logits), labels)?.0)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Metrics {
    /// Fraction of exact string matches.
    pub accuracy: f64,
    /// Mean of `edit_distance(pred, truth) / len(truth)`.
    pub normalized_edit_distance: f64,
    /// Mean per-sample CTC loss.
    pub loss: f64,
}

/// Levenshtein distance over characters.
pub fn edit_distance(a: &str, b: &str) -> usize {
    let b: Vec<char> = b.chars().collect();
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, ca) in a.chars().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, &cb) in b.iter().enumerate() {
            let next = (diag + usize::from(ca != cb)).min(row[j] + 1).min(row[j + 1] + 1);
            diag = row[j + 1];
            row[j + 1] = next;
        }
    }
    row[b.len()]
}

/// `(accuracy, mean normalized edit distance)` of predictions against truths.
/// An empty truth counts a distance of 0 if the prediction is empty too, 1
/// otherwise.
pub fn sequence_scores(predictions: &[String], truths: &[String]) -> Result<(f64, f64)> {
    if predictions.len() != truths.len() || truths.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} truths",
            predictions.len(),
            truths.len()
        )));
    }
    let mut correct = 0usize;
    let mut ned = 0.0;
    for (p, t) in predictions.iter().zip(truths) {
        correct += usize::from(p == t);
        let len = t.chars().count();
        ned += if len == 0 { f64::from(u8::from(!p.is_empty())) } else { edit_distance(p, t) as f64 / len as f64 };
    }
    let n = truths.len() as f64;
    Ok((correct as f64 / n, ned / n))
}

pub const EVAL_BATCH: usize = 50;

/// Greedy-decoded strings and total CTC loss over a dataset, in eval mode.
pub fn predict<T: Scalar>(model: &Model<T>, dataset: &Dataset) -> Result<(Vec<String>, f64)> {
    let alphabet = Alphabet::digits();
    let mut predictions = Vec::with_capacity(dataset.len());
    let mut total_loss = 0.0;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (images, labels) = dataset.batch::<T>(chunk, &alphabet)?;
        let mut g = Graph::new();
        let vars = model.bind(&mut g);
        let x = g.constant(images);
        let logits = logits_on(&mut g, &vars, &model.config, x, ForwardMode::EVAL)?;
        total_loss += ctc_loss(g.value(logits), &labels)?.0 * chunk.len() as f64;
        predictions.extend(greedy_decode(g.value(logits), &alphabet));
    }
    Ok((predictions, total_loss))
}

pub fn evaluate<T: Scalar>(model: &Model<T>, dataset: &Dataset) -> Result<Metrics> {
    let (predictions, total_loss) = predict(model, dataset)?;
    let truths: Vec<String> = dataset.samples.iter().map(|s| s.text.clone()).collect();
    let (accuracy, normalized_edit_distance) = sequence_scores(&predictions, &truths)?;
    Ok(Metrics { accuracy, normalized_edit_distance, loss: total_loss / dataset.len() as f64 })
}

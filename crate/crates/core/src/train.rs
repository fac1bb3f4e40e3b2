//! ADAGRAD training loop, step schedules, augmentation and TOP-1 error.

use std::io::Write;
use std::time::Instant;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::arch::Network;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::ops::Mode;
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_initial: f64,
    /// `(epoch, lr)` step points: from `epoch` onwards the rate is `lr`.
    pub schedule: Vec<(usize, f64)>,
    pub augment_flip: bool,
    pub seed: u64,
    pub adagrad_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 90,
            batch_size: 128,
            lr_initial: 0.1,
            schedule: vec![(45, 0.01)],
            augment_flip: true,
            seed: 0,
            adagrad_eps: 1e-10,
        }
    }
}

impl TrainConfig {
    /// 0.1, dropping to 0.01 from epoch 45.
    pub fn cifar(epochs: usize) -> Self {
        TrainConfig {
            epochs,
            ..Self::default()
        }
    }

    /// 0.1, divided by 10 every 20 epochs, no augmentation.
    pub fn step_decay(epochs: usize) -> Self {
        let schedule = (1..)
            .map(|i| i * 20)
            .take_while(|&e| e < epochs)
            .enumerate()
            .map(|(i, e)| (e, 0.1 / 10f64.powi(i as i32 + 1)))
            .collect();
        TrainConfig {
            epochs,
            schedule,
            augment_flip: false,
            ..Self::default()
        }
    }

    /// Constant rate, no augmentation.
    pub fn constant(epochs: usize, batch_size: usize, lr: f64, seed: u64) -> Self {
        TrainConfig {
            epochs,
            batch_size,
            lr_initial: lr,
            schedule: Vec::new(),
            augment_flip: false,
            seed,
            adagrad_eps: 1e-10,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::pre("batch size must be >= 1"));
        }
        if !(self.lr_initial >= 0.0) {
            return Err(Error::pre("initial learning rate must be >= 0"));
        }
        if self.schedule.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::pre("schedule epochs must be strictly increasing"));
        }
        if self.schedule.iter().any(|&(_, lr)| !(lr > 0.0)) {
            return Err(Error::pre("schedule learning rates must be positive"));
        }
        Ok(())
    }
}

/// Learning rate in effect at `epoch` (0-based).
pub fn lr_at(config: &TrainConfig, epoch: usize) -> Result<f64> {
    if epoch >= config.epochs {
        return Err(Error::pre(format!(
            "epoch {epoch} out of range for {} epochs",
            config.epochs
        )));
    }
    Ok(config
        .schedule
        .iter()
        .rev()
        .find(|&&(e, _)| e <= epoch)
        .map_or(config.lr_initial, |&(_, lr)| lr))
}

/// Per-parameter running sums of squared gradients.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdagradState {
    pub accum: IndexMap<String, Vec<f64>>,
    pub eps: f64,
}

impl AdagradState {
    pub fn new(eps: f64) -> Self {
        AdagradState {
            accum: IndexMap::new(),
            eps,
        }
    }
}

/// `accum += g²; p -= lr·g / (sqrt(accum) + eps)`, then clears gradients.
pub fn adagrad_step(params: &mut ParamStore, state: &mut AdagradState, lr: f64) -> Result<()> {
    if let Some((name, _)) = params.iter().find(|(_, p)| p.tensor.grad().is_none()) {
        return Err(Error::pre(format!("parameter `{name}` has no gradient")));
    }
    for (name, p) in params.iter_mut() {
        let grad = p.tensor.take_grad().expect("checked above");
        let acc = state
            .accum
            .entry(name.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        let data = p.tensor.data_mut();
        for ((w, g), a) in data.iter_mut().zip(&grad).zip(acc.iter_mut()) {
            *a += g * g;
            *w -= lr * g / (a.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Mirrors image `i` left-right wherever `mask[i]` is set.
pub fn flip_images(batch: &Tensor, mask: &[bool]) -> Result<Tensor> {
    let s = batch.shape();
    if s.len() != 4 || s[0] != mask.len() {
        return Err(Error::pre(format!(
            "flip mask of {} entries for batch {s:?}",
            mask.len()
        )));
    }
    let w = s[3];
    let per = s[1] * s[2] * s[3];
    let mut out = batch.data().to_vec();
    for (i, &flip) in mask.iter().enumerate() {
        if flip {
            for row in out[i * per..(i + 1) * per].chunks_mut(w) {
                row.reverse();
            }
        }
    }
    Tensor::from_vec(s, out)
}

/// Flips each image independently with probability 0.5.
pub fn augment_flip<R: Rng>(batch: &Tensor, rng: &mut R) -> Result<Tensor> {
    let n = batch.shape().first().copied().unwrap_or(0);
    let mask: Vec<bool> = (0..n).map(|_| rng.random_bool(0.5)).collect();
    flip_images(batch, &mask)
}

/// `(x - mean_c) / std_c` per channel of an NCHW batch.
pub fn normalize(batch: &Tensor, means: &[f64; 3], stds: &[f64; 3]) -> Result<Tensor> {
    if let Some(s) = stds.iter().find(|&&s| !(s > 0.0)) {
        return Err(Error::pre(format!("channel std must be positive, got {s}")));
    }
    let s = batch.shape();
    if s.len() != 4 || s[1] != 3 {
        return Err(Error::pre(format!("normalize expects [N,3,H,W], got {s:?}")));
    }
    let plane = s[2] * s[3];
    let mut out = batch.data().to_vec();
    for (j, chunk) in out.chunks_mut(plane).enumerate() {
        let c = j % 3;
        for v in chunk {
            *v = (*v - means[c]) / stds[c];
        }
    }
    Tensor::from_vec(s, out)
}

pub fn normalize_dataset(data: &Dataset, means: &[f64; 3], stds: &[f64; 3]) -> Result<Dataset> {
    Dataset::new(
        normalize(&data.images, means, stds)?,
        data.labels.clone(),
        data.class_count,
        &data.name,
    )
}

/// Index of the largest logit per row; ties and NaN resolve to the first.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// `100 · (1 - accuracy)` of row-wise argmax predictions.
pub fn top1_error(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() || logits.shape()[0] != labels.len() {
        return Err(Error::pre("top1_error needs one non-empty row per label"));
    }
    let correct = argmax_rows(logits)
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(100.0 * (1.0 - correct as f64 / labels.len() as f64))
}

const EVAL_BATCH: usize = 256;

/// TOP-1 error (%) of `net` on `data`, batch norm in eval mode.
pub fn evaluate(net: &mut Network, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    let mut correct = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_BATCH) {
        let (x, y) = data.batch(chunk)?;
        let logits = net.forward(&x, Mode::Eval)?;
        correct += argmax_rows(&logits)
            .iter()
            .zip(&y)
            .filter(|(p, y)| p == y)
            .count();
    }
    Ok(100.0 * (1.0 - correct as f64 / data.len() as f64))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_top1_err: f64,
    pub test_top1_err: Option<f64>,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunMetrics {
    pub records: Vec<EpochRecord>,
}

pub const CSV_HEADER: &str = "epoch,lr,train_loss,train_top1,test_top1,seconds";

impl EpochRecord {
    pub fn csv_row(&self) -> String {
        let test = self
            .test_top1_err
            .map_or_else(|| "nan".to_string(), |v| format!("{v:.6}"));
        format!(
            "{},{},{:.10},{:.6},{},{:.3}",
            self.epoch, self.lr, self.train_loss, self.train_top1_err, test, self.wall_seconds
        )
    }
}

impl RunMetrics {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "{CSV_HEADER}")?;
        for r in &self.records {
            writeln!(out, "{}", r.csv_row())?;
        }
        Ok(())
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

fn epoch_rng(seed: u64, epoch: usize, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng.set_word_pos(epoch as u128 * (1 << 40));
    rng
}

pub fn train(net: &mut Network, data: &Dataset, test: Option<&Dataset>, config: &TrainConfig) -> Result<RunMetrics> {
    train_with(net, data, test, config, |_| Ok(()))
}

/// Trains for `config.epochs`, calling `on_epoch` after each epoch.
///
/// Sample order is reshuffled every epoch from the run seed. A trailing
/// batch holding a single sample is skipped, since batch statistics need
/// two samples.
pub fn train_with<F>(
    net: &mut Network,
    data: &Dataset,
    test: Option<&Dataset>,
    config: &TrainConfig,
    mut on_epoch: F,
) -> Result<RunMetrics>
where
    F: FnMut(&EpochRecord) -> Result<()>,
{
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let mut state = AdagradState::new(config.adagrad_eps);
    let mut metrics = RunMetrics::default();
    for epoch in 0..config.epochs {
        let start = Instant::now();
        let lr = lr_at(config, epoch)?;
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut epoch_rng(config.seed, epoch, 0));
        let mut flip_rng = epoch_rng(config.seed, epoch, 1);

        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            if chunk.len() < 2 && data.len() >= 2 {
                continue;
            }
            let (mut x, y) = data.batch(chunk)?;
            if config.augment_flip {
                x = augment_flip(&x, &mut flip_rng)?;
            }
            let (loss, _) = net.loss_and_grad(x, &y, Mode::Train)?;
            adagrad_step(net.params_mut(), &mut state, lr)?;
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
        }
        let train_top1_err = evaluate(net, data)?;
        let test_top1_err = test.map(|t| evaluate(net, t)).transpose()?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            train_top1_err,
            test_top1_err,
            wall_seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record)?;
        metrics.records.push(record);
    }
    Ok(metrics)
}

//! Stochastic gradient descent with momentum, weight decay and a staged
//! learning-rate schedule.

mod checkpoint;

use std::fmt;
use std::io::Write;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use sha2::{Digest, Sha256};

use crate::data::{epoch_batches, Dataset, Normalizer};
use crate::error::{Error, Result};
use crate::model::{collect_grads, ForwardOptions, Model, ParamKind, ParamStore};
use crate::tensor::{Real, Tape, Tensor};

pub use checkpoint::{Checkpoint, Record, RngState, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "32" | "f32" => Ok(Precision::F32),
            "64" | "f64" => Ok(Precision::F64),
            _ => Err(Error::config(format!("precision must be 32 or 64, got {s:?}"))),
        }
    }
}

impl fmt::Display for Precision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Precision::F32 => "32",
            Precision::F64 => "64",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainPlan {
    pub total_epochs: usize,
    pub base_lr: f64,
    /// Fractions of `total_epochs` at which the rate is divided.
    pub lr_drop_fractions: Vec<f64>,
    /// The rate is divided (not multiplied) by this at each drop, so
    /// `0.1 / 10` lands exactly on `0.01`.
    pub lr_drop_divisor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub precision: Precision,
    pub augment: bool,
}

impl Default for TrainPlan {
    fn default() -> Self {
        Self::cifar()
    }
}

impl TrainPlan {
    /// 300 epochs, drops at 60% and 80%.
    pub fn cifar() -> Self {
        Self {
            total_epochs: 300,
            base_lr: 0.1,
            lr_drop_fractions: vec![0.6, 0.8],
            lr_drop_divisor: 10.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            batch_size: 128,
            seed: 0,
            precision: Precision::F32,
            augment: true,
        }
    }

    /// 20 epochs, drops at 50% and 75%, no augmentation.
    pub fn svhn() -> Self {
        Self {
            total_epochs: 20,
            lr_drop_fractions: vec![0.5, 0.75],
            augment: false,
            ..Self::cifar()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.batch_size < 2 {
            return Err(Error::config(format!(
                "batch size {} too small: batch norm needs at least 2 samples",
                self.batch_size
            )));
        }
        let mut prev = 0.0;
        for &f in &self.lr_drop_fractions {
            if !(f > prev && f < 1.0) {
                return Err(Error::config(format!(
                    "lr drop fractions must be strictly increasing in (0, 1), got {:?}",
                    self.lr_drop_fractions
                )));
            }
            prev = f;
        }
        if !(self.base_lr >= 0.0 && self.lr_drop_divisor > 0.0) {
            return Err(Error::config("learning rate and drop divisor must be positive"));
        }
        Ok(())
    }

    /// Learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self
            .lr_drop_fractions
            .iter()
            .filter(|&&f| epoch >= (f * self.total_epochs as f64).floor() as usize)
            .count();
        let mut lr = self.base_lr;
        for _ in 0..drops {
            lr /= self.lr_drop_divisor;
        }
        lr
    }

    pub fn to_text(&self) -> String {
        let fractions: Vec<String> = self.lr_drop_fractions.iter().map(|f| f.to_string()).collect();
        format!(
            "epochs={}\nlr={}\nlr_drops={}\nlr_divisor={}\nmomentum={}\nweight_decay={}\nbatch={}\nseed={}\nprecision={}\naugment={}\n",
            self.total_epochs,
            self.base_lr,
            fractions.join(","),
            self.lr_drop_divisor,
            self.momentum,
            self.weight_decay,
            self.batch_size,
            self.seed,
            self.precision,
            self.augment
        )
    }

    pub fn digest(&self) -> [u8; 32] {
        Sha256::digest(self.to_text().as_bytes()).into()
    }
}

pub fn lr_at(epoch: usize, plan: &TrainPlan) -> f64 {
    plan.lr_at(epoch)
}

/// He initialization: conv and linear weights ~ N(0, sqrt(2 / fan_in)),
/// batch-norm gamma 1, everything else 0. Parameters are drawn in
/// registration order.
pub fn he_init<T: Real>(params: &mut ParamStore<T>, rng: &mut ChaCha8Rng) {
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let spec = params.spec(id).clone();
        let values = params.get_mut(id).data_mut();
        match spec.kind {
            ParamKind::ConvWeight | ParamKind::LinearWeight => {
                let fan_in: usize = match spec.kind {
                    ParamKind::ConvWeight => spec.shape[1..].iter().product(),
                    _ => spec.shape[0],
                };
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                for v in values.iter_mut() {
                    *v = T::from_f64_lossy(normal.sample(rng));
                }
            }
            ParamKind::BnGamma => values.fill(T::one()),
            ParamKind::BnBeta | ParamKind::LinearBias => values.fill(T::zero()),
        }
    }
}

/// One momentum step on a flat buffer: `v = mu v + g + wd p; p -= lr v`.
pub fn sgd_update<T: Real>(param: &mut [T], grad: &[T], velocity: &mut [T], lr: T, momentum: T, weight_decay: T) {
    assert!(
        param.len() == grad.len() && param.len() == velocity.len(),
        "sgd buffers misaligned"
    );
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = momentum * *v + g + weight_decay * *p;
        *p = *p - lr * *v;
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SgdConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// Applies [`sgd_update`] to every parameter; weight decay only reaches
/// conv and linear weights.
pub fn sgd_step<T: Real>(
    params: &mut ParamStore<T>,
    grads: &[Tensor<T>],
    velocity: &mut [Tensor<T>],
    cfg: SgdConfig,
) -> Result<()> {
    if grads.len() != params.len() || velocity.len() != params.len() {
        return Err(Error::usage(format!(
            "{} parameters but {} gradients and {} velocity buffers",
            params.len(),
            grads.len(),
            velocity.len()
        )));
    }
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let i = id.index();
        let decay = if params.spec(id).kind.decays() {
            cfg.weight_decay
        } else {
            0.0
        };
        let p = params.get_mut(id);
        if p.shape() != grads[i].shape() || p.shape() != velocity[i].shape() {
            return Err(Error::usage(format!(
                "shape mismatch at parameter {i}: {:?} vs grad {:?}",
                p.shape(),
                grads[i].shape()
            )));
        }
        sgd_update(
            p.data_mut(),
            grads[i].data(),
            velocity[i].data_mut(),
            T::from_f64_lossy(cfg.lr),
            T::from_f64_lossy(cfg.momentum),
            T::from_f64_lossy(decay),
        );
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_error: f64,
    pub test_error: Option<f64>,
}

pub fn write_log_csv<W: Write>(rows: &[EpochLog], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["epoch", "lr", "train_loss", "train_error", "test_error"])?;
    for r in rows {
        w.write_record([
            r.epoch.to_string(),
            r.lr.to_string(),
            r.train_loss.to_string(),
            r.train_error.to_string(),
            r.test_error.map(|e| e.to_string()).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub error: f64,
}

pub(crate) fn argmax<T: Real>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn count_errors<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> usize {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) != y)
        .count()
}

/// Eval-mode mean cross-entropy and error rate.
pub fn evaluate<T: Real>(
    model: &mut Model<T>,
    dataset: &Dataset,
    normalizer: &Normalizer,
    batch_size: usize,
) -> Result<Evaluation> {
    if dataset.is_empty() {
        return Err(Error::data("cannot evaluate on an empty dataset"));
    }
    let mut loss = 0.0;
    let mut errors = 0;
    let indices: Vec<usize> = (0..dataset.len()).collect();
    for chunk in indices.chunks(batch_size.max(1)) {
        let (x, y) = dataset.batch::<T, ChaCha8Rng>(chunk, normalizer, None);
        let mut tape = Tape::new();
        let pass = model.forward(&mut tape, x, ForwardOptions::eval(), &mut crate::model::NoRng)?;
        let l = tape.softmax_cross_entropy(pass.logits, &y)?;
        let lv = tape.value(l).data()[0].to_f64_lossy();
        if !lv.is_finite() {
            return Err(non_finite(&tape, "evaluation"));
        }
        loss += lv * chunk.len() as f64;
        errors += count_errors(tape.value(pass.logits), &y);
    }
    Ok(Evaluation {
        loss: loss / dataset.len() as f64,
        error: errors as f64 / dataset.len() as f64,
    })
}

fn non_finite<T: Real>(tape: &Tape<T>, when: &str) -> Error {
    let at = tape.first_non_finite().unwrap_or_else(|| "loss".into());
    Error::Numeric(format!("non-finite value during {when}, first produced by {at}"))
}

/// Training state that outlives a single epoch: schedule position, RNG
/// stream, momentum buffers and the input normalizer.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub plan: TrainPlan,
    pub normalizer: Normalizer,
    pub epoch: usize,
    pub rng: ChaCha8Rng,
    pub velocity: Vec<Tensor<T>>,
}

impl<T: Real> Trainer<T> {
    /// Seeds the run and He-initializes the model from the plan seed.
    pub fn new(plan: TrainPlan, model: &mut Model<T>, normalizer: Normalizer) -> Result<Self> {
        plan.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        he_init(&mut model.params, &mut rng);
        Ok(Self::resume(plan, model, normalizer, 0, rng))
    }

    /// Picks up an existing run without touching the parameters.
    pub fn resume(plan: TrainPlan, model: &Model<T>, normalizer: Normalizer, epoch: usize, rng: ChaCha8Rng) -> Self {
        let velocity = model.params.specs().iter().map(|s| Tensor::zeros(&s.shape)).collect();
        Self {
            plan,
            normalizer,
            epoch,
            rng,
            velocity,
        }
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.plan.total_epochs
    }

    /// One pass over the shuffled training set. Returns mean loss and error
    /// rate of the training-mode predictions.
    pub fn train_epoch(&mut self, model: &mut Model<T>, train: &Dataset) -> Result<(f64, f64)> {
        let lr = self.plan.lr_at(self.epoch);
        let batches = epoch_batches(train.len(), self.plan.batch_size, &mut self.rng);
        let mut loss_sum = 0.0;
        let mut errors = 0;
        for idx in &batches {
            let aug = self.plan.augment.then_some(&mut self.rng);
            let (x, y) = train.batch::<T, _>(idx, &self.normalizer, aug);
            let mut tape = Tape::new();
            let pass = model.forward(&mut tape, x, ForwardOptions::train(), &mut self.rng)?;
            let loss = tape.softmax_cross_entropy(pass.logits, &y)?;
            let lv = tape.value(loss).data()[0].to_f64_lossy();
            if !lv.is_finite() {
                return Err(non_finite(&tape, &format!("training epoch {}", self.epoch)));
            }
            loss_sum += lv * idx.len() as f64;
            errors += count_errors(tape.value(pass.logits), &y);
            tape.backward(loss)?;
            let grads = collect_grads(&model.params, &tape, &pass.bindings);
            sgd_step(
                &mut model.params,
                &grads,
                &mut self.velocity,
                SgdConfig {
                    lr,
                    momentum: self.plan.momentum,
                    weight_decay: self.plan.weight_decay,
                },
            )?;
        }
        self.epoch += 1;
        let n = train.len() as f64;
        Ok((loss_sum / n, errors as f64 / n))
    }

    /// Trains to the end of the plan, evaluating on `test` after each epoch
    /// when given. `on_epoch` may return `false` to stop early.
    pub fn run(
        &mut self,
        model: &mut Model<T>,
        train: &Dataset,
        test: Option<&Dataset>,
        mut on_epoch: impl FnMut(&EpochLog, &mut Model<T>) -> Result<bool>,
    ) -> Result<Vec<EpochLog>> {
        let mut log = Vec::new();
        while !self.finished() {
            let lr = self.plan.lr_at(self.epoch);
            let epoch = self.epoch;
            let (train_loss, train_error) = self.train_epoch(model, train)?;
            let test_error = match test {
                Some(t) => Some(evaluate(model, t, &self.normalizer, self.plan.batch_size)?.error),
                None => None,
            };
            let row = EpochLog {
                epoch,
                lr,
                train_loss,
                train_error,
                test_error,
            };
            log.push(row);
            if !on_epoch(&row, model)? {
                break;
            }
        }
        Ok(log)
    }
}

/// Initializes and trains `model` for the whole plan.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &Dataset,
    test_set: Option<&Dataset>,
    normalizer: Normalizer,
    plan: &TrainPlan,
) -> Result<Vec<EpochLog>> {
    let mut trainer = Trainer::new(plan.clone(), model, normalizer)?;
    trainer.run(model, train_set, test_set, |_, _| Ok(true))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_boundaries() {
        let p = TrainPlan::cifar();
        assert_eq!(p.lr_at(0), 0.1);
        assert_eq!(p.lr_at(179), 0.1);
        assert_eq!(p.lr_at(180), 0.01);
        assert_eq!(p.lr_at(240), 0.001);
        let s = TrainPlan::svhn();
        assert_eq!(s.lr_at(9), 0.1);
        assert_eq!(s.lr_at(10), 0.01);
        assert_eq!(s.lr_at(15), 0.001);
    }

    #[test]
    fn plan_validation() {
        let mut p = TrainPlan::cifar();
        p.batch_size = 1;
        assert!(p.validate().is_err());
        let mut p = TrainPlan::cifar();
        p.lr_drop_fractions = vec![0.8, 0.6];
        assert!(p.validate().is_err());
        assert!(TrainPlan::cifar().validate().is_ok());
    }

    #[test]
    fn momentum_closed_form() {
        let mut p = [1.0f64];
        let mut v = [1.0f64];
        sgd_update(&mut p, &[0.0], &mut v, 0.1, 0.9, 0.0);
        assert!((p[0] - 0.91).abs() < 1e-15);
        assert!((v[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn precision_parse() {
        assert_eq!("64".parse::<Precision>().unwrap(), Precision::F64);
        assert!("16".parse::<Precision>().is_err());
    }
}

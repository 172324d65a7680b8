use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{elbo_loss, evaluate, temperature_at, TrainConfig, TrainError};
use crate::corpus::Problem;
use crate::diff::{Adam, AdamConfig, ParamStore, Tape, TensorError};
use crate::knowledge::{KnowledgeError, KnowledgePrior};
use crate::rng::{stream, Stream};
use crate::solver::{Model, SolverError};

pub const METRICS_HEADER: &str = "epoch,loss,nll,kl,tau,val_acc";

/// One row of the metrics log. Loss, NLL and KL are per training problem.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub nll: f64,
    pub kl: f64,
    pub tau: f64,
    pub val_acc: f64,
}

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.epoch, self.loss, self.nll, self.kl, self.tau, self.val_acc
        )
    }
}

/// Training state between epochs; everything needed to resume lives here.
pub struct Trainer {
    pub config: TrainConfig,
    pub model: Model,
    pub store: ParamStore,
    pub prior: KnowledgePrior,
    pub(super) adam: Adam,
    pub(super) train: Vec<Problem>,
    pub(super) validation: Vec<Problem>,
    pub(super) shuffle: ChaCha8Rng,
    pub(super) gumbel: ChaCha8Rng,
    pub(super) dropout: ChaCha8Rng,
    /// Completed epochs.
    pub epoch: usize,
    pub best_val: f64,
    pub best_epoch: usize,
    pub best_store: ParamStore,
    pub since_best: usize,
    pub stopped: bool,
    pub metrics: Vec<EpochMetrics>,
}

/// Attaches the epoch and batch to a non-finite failure.
fn locate(err: impl Into<TrainError>, epoch: usize, batch: usize) -> TrainError {
    let non_finite = |e: &TensorError| match e {
        TensorError::NonFinite { op } => Some(*op),
        _ => None,
    };
    let err = err.into();
    let op = match &err {
        TrainError::Tensor(e) => non_finite(e),
        TrainError::Solver(SolverError::Tensor(e)) => non_finite(e),
        TrainError::Solver(SolverError::Knowledge(KnowledgeError::Tensor(e))) => non_finite(e),
        TrainError::Knowledge(KnowledgeError::Tensor(e)) => non_finite(e),
        _ => None,
    };
    match op {
        Some(op) => TrainError::NonFinite { op, epoch, batch },
        None => err,
    }
}

impl Trainer {
    pub fn new(
        config: TrainConfig,
        model: Model,
        store: ParamStore,
        prior: KnowledgePrior,
        train: Vec<Problem>,
        validation: Vec<Problem>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        if train.is_empty() {
            return Err(TrainError::NoData);
        }
        let seed = config.train.seed;
        let adam = Adam::new(
            AdamConfig {
                lr: config.train.lr,
                ..AdamConfig::default()
            },
            &store,
        );
        Ok(Self {
            adam,
            train,
            validation,
            shuffle: stream(seed, Stream::Shuffle),
            gumbel: stream(seed, Stream::Gumbel),
            dropout: stream(seed, Stream::Dropout),
            epoch: 0,
            best_val: -1.0,
            best_epoch: 0,
            best_store: store.clone(),
            since_best: 0,
            stopped: false,
            metrics: Vec::new(),
            config,
            model,
            store,
            prior,
        })
    }

    pub fn is_finished(&self) -> bool {
        self.stopped || self.epoch >= self.config.train.epochs
    }

    pub fn tau(&self, epoch: usize) -> f64 {
        let k = &self.config.knowledge;
        temperature_at(epoch, self.config.train.epochs.saturating_sub(1), k.tau_start, k.tau_end)
    }

    pub fn run_epoch(&mut self) -> Result<&EpochMetrics, TrainError> {
        let epoch = self.epoch;
        let tau = self.tau(epoch);
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.shuffle);
        let (mut nll, mut kl) = (0.0, 0.0);
        for (bi, chunk) in order.chunks(self.config.train.batch_size).enumerate() {
            let refs: Vec<&Problem> = chunk.iter().map(|&i| &self.train[i]).collect();
            let batch = self.model.batch(&refs, true)?;
            let mut tape = Tape::training();
            let terms = elbo_loss(
                &mut tape,
                &self.model,
                &self.store,
                &batch,
                &self.prior,
                &self.config.knowledge,
                tau,
                &mut self.gumbel,
                Some(&mut self.dropout),
            )
            .map_err(|e| locate(e, epoch + 1, bi))?;
            let mut grads = tape.backward(terms.loss, &self.store).map_err(|e| locate(e, epoch + 1, bi))?;
            if self.config.train.clip_norm > 0.0 {
                grads.clip_global_norm(self.config.train.clip_norm);
            }
            self.adam.update(&mut self.store, &grads)?;
            nll += terms.nll;
            kl += terms.kl;
        }
        let n = self.train.len() as f64;
        let (nll, kl) = (nll / n, kl / n);
        let val_acc = if self.validation.is_empty() {
            0.0
        } else {
            evaluate(&self.model, &self.store, &self.validation)?.0
        };
        self.epoch += 1;
        // Without validation data the latest parameters count as best.
        if val_acc > self.best_val || self.validation.is_empty() {
            self.best_val = val_acc;
            self.best_epoch = self.epoch;
            self.best_store = self.store.clone();
            self.since_best = 0;
        } else {
            self.since_best += 1;
            if self.since_best >= self.config.train.patience {
                self.stopped = true;
            }
        }
        self.metrics.push(EpochMetrics {
            epoch: self.epoch,
            loss: nll + self.config.knowledge.lambda_kl * kl,
            nll,
            kl,
            tau,
            val_acc,
        });
        Ok(self.metrics.last().expect("just pushed"))
    }

    /// Runs until the epoch budget or early stopping.
    pub fn run(&mut self) -> Result<(), TrainError> {
        while !self.is_finished() {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn metrics_csv(&self) -> String {
        let mut out = String::from(METRICS_HEADER);
        out.push('\n');
        for m in &self.metrics {
            out.push_str(&m.csv_row());
            out.push('\n');
        }
        out
    }

    pub fn train_problems(&self) -> &[Problem] {
        &self.train
    }
}

//! Adam with minibatches, seeded shuffling and early stopping on the
//! validation loss.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Row;
use crate::error::{Error, Result};
use crate::models::{LossTerms, NaiveStressModel, PhiMlModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a new best validation loss before stopping.
    pub patience: usize,
    pub seed: u64,
    pub shuffle: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            batch_size: 64,
            max_epochs: 5000,
            patience: 200,
            seed: 0,
            shuffle: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("learning_rate", self.learning_rate),
            ("epsilon", self.epsilon),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(format!("{name} must be positive")));
            }
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::invalid(format!("{name} must lie in [0, 1)")));
            }
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::invalid("batch_size, max_epochs and patience must be positive"));
        }
        if self.patience > self.max_epochs {
            return Err(Error::invalid("patience cannot exceed max_epochs"));
        }
        Ok(())
    }
}

/// First and second moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    /// Number of completed steps.
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam update. Nothing is modified when the gradient
/// contains a non-finite entry.
pub fn adam_step(params: &mut [f64], grads: &[f64], state: &mut AdamState, config: &TrainConfig) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::invalid("parameter, gradient and moment lengths differ"));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::PoisonedGradient {
            term: format!("parameter gradient entry {i}"),
        });
    }
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - config.beta1.powi(t);
    let c2 = 1.0 - config.beta2.powi(t);
    for (((p, &g), m), v) in params.iter_mut().zip(grads).zip(&mut state.m).zip(&mut state.v) {
        *m = config.beta1 * *m + (1.0 - config.beta1) * g;
        *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
        let m_hat = *m / c1;
        let v_hat = *v / c2;
        *p -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
    }
    Ok(())
}

/// A model whose loss over a batch of rows can be minimized.
pub trait Trainable {
    fn n_params(&self) -> usize;
    fn params_flat(&self) -> Vec<f64>;
    fn set_params_flat(&mut self, flat: &[f64]);
    fn loss(&self, rows: &[Row]) -> Result<LossTerms>;
    fn loss_and_gradient(&self, rows: &[Row], grad: &mut [f64]) -> Result<LossTerms>;
}

impl Trainable for NaiveStressModel {
    fn n_params(&self) -> usize {
        self.net.params.n_params()
    }

    fn params_flat(&self) -> Vec<f64> {
        self.net.params.to_flat()
    }

    fn set_params_flat(&mut self, flat: &[f64]) {
        self.net.params.read_flat(flat);
    }

    fn loss(&self, rows: &[Row]) -> Result<LossTerms> {
        NaiveStressModel::loss(self, rows)
    }

    fn loss_and_gradient(&self, rows: &[Row], grad: &mut [f64]) -> Result<LossTerms> {
        NaiveStressModel::loss_and_gradient(self, rows, grad)
    }
}

impl Trainable for PhiMlModel {
    fn n_params(&self) -> usize {
        PhiMlModel::n_params(self)
    }

    fn params_flat(&self) -> Vec<f64> {
        let mut out = self.net_a.params.to_flat();
        self.net_b.params.write_flat(&mut out);
        out
    }

    fn set_params_flat(&mut self, flat: &[f64]) {
        let used = self.net_a.params.read_flat(flat);
        self.net_b.params.read_flat(&flat[used..]);
    }

    fn loss(&self, rows: &[Row]) -> Result<LossTerms> {
        PhiMlModel::loss(self, rows)
    }

    fn loss_and_gradient(&self, rows: &[Row], grad: &mut [f64]) -> Result<LossTerms> {
        PhiMlModel::loss_and_gradient(self, rows, grad)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Row-weighted mean of the minibatch losses seen during the epoch.
    pub train: LossTerms,
    /// Validation loss after the epoch's updates.
    pub val: LossTerms,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub config: TrainConfig,
    pub epochs: Vec<EpochRecord>,
    /// Epoch (1-based) whose parameters were kept.
    pub best_epoch: usize,
    pub best_val: f64,
    pub stopped_early: bool,
    /// Not serialized, so reports of identical runs are byte-identical.
    #[serde(skip)]
    pub wall_time_s: f64,
}

impl TrainReport {
    pub const CSV_HEADER: [&'static str; 13] = [
        "epoch",
        "train_total",
        "train_sigma",
        "train_psi",
        "train_eps_p",
        "train_d",
        "train_dissipation",
        "val_total",
        "val_sigma",
        "val_psi",
        "val_eps_p",
        "val_d",
        "val_dissipation",
    ];

    /// Loss curves, one line per epoch.
    pub fn curves_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::CSV_HEADER)?;
        for r in &self.epochs {
            let terms = |t: &LossTerms| [t.total, t.sigma, t.psi, t.eps_p, t.d, t.dissipation];
            let mut rec = vec![r.epoch.to_string()];
            rec.extend(terms(&r.train).iter().chain(&terms(&r.val)).map(|v| format!("{v:.10e}")));
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }
}

/// Minimizes the model loss on `train` with Adam, monitoring the loss on
/// `val` after every epoch. On return the model holds the parameters of the
/// best validation epoch.
pub fn train<M: Trainable>(model: &mut M, train: &[Row], val: &[Row], config: &TrainConfig) -> Result<TrainReport> {
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("training needs non-empty train and validation splits"));
    }
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let batch_size = config.batch_size.min(train.len());

    let mut params = model.params_flat();
    let mut grad = vec![0.0; params.len()];
    let mut adam = AdamState::new(params.len());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut batch: Vec<Row> = Vec::with_capacity(batch_size);

    let mut report = TrainReport {
        seed: config.seed,
        config: config.clone(),
        epochs: Vec::new(),
        best_epoch: 0,
        best_val: f64::INFINITY,
        stopped_early: false,
        wall_time_s: 0.0,
    };
    let mut best_params = params.clone();

    for epoch in 1..=config.max_epochs {
        if config.shuffle {
            order.shuffle(&mut rng);
        }
        let mut batch_terms = Vec::with_capacity(order.len().div_ceil(batch_size));
        for chunk in order.chunks(batch_size) {
            batch.clear();
            batch.extend(chunk.iter().map(|&i| train[i]));
            let terms = model.loss_and_gradient(&batch, &mut grad)?;
            adam_step(&mut params, &grad, &mut adam, config)?;
            model.set_params_flat(&params);
            batch_terms.push((terms, batch.len()));
        }
        let train_terms = LossTerms::weighted_mean(&batch_terms);
        let val_terms = match model.loss(val) {
            Ok(t) => t,
            Err(Error::PoisonedGradient { .. }) => LossTerms {
                total: f64::NAN,
                ..Default::default()
            },
            Err(e) => return Err(e),
        };
        report.epochs.push(EpochRecord {
            epoch,
            train: train_terms,
            val: val_terms,
        });
        if !val_terms.total.is_finite() {
            model.set_params_flat(&best_params);
            report.wall_time_s = started.elapsed().as_secs_f64();
            return Err(Error::Divergence {
                epoch,
                report: Box::new(report),
            });
        }
        if val_terms.total < report.best_val {
            report.best_val = val_terms.total;
            report.best_epoch = epoch;
            best_params.copy_from_slice(&params);
        } else if epoch - report.best_epoch >= config.patience {
            report.stopped_early = epoch < config.max_epochs;
            break;
        }
    }

    model.set_params_flat(&best_params);
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok(report)
}

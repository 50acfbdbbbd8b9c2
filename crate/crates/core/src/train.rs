//! Training loop, loss logging, and divergence detection.

use std::io::Write;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{sample_batch, Corpus, CorpusError};
use crate::model::{ModelConfig, ModelError, TransformerModel};
use crate::optim::{adam_step, AdamState};
use crate::tape::Tape;
use crate::tensor::{Precision, Real, TensorError};

/// Optimization hyperparameters for one run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    pub eval_every: u64,
    pub eval_batches: usize,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 16,
            lr: 6e-4,
            beta1: 0.9,
            beta2: 0.95,
            eps: 1e-8,
            seed: 0,
            eval_every: 200,
            eval_batches: 4,
            precision: Precision::Narrow,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.beta1 > 0.0 && self.beta1 < 1.0 && self.beta2 > 0.0 && self.beta2 < 1.0) {
            return Err(TrainError::InvalidConfig("betas must lie in (0, 1)"));
        }
        if !(self.lr > 0.0) {
            return Err(TrainError::InvalidConfig("lr must be positive"));
        }
        if self.batch == 0 || self.eval_batches == 0 || self.eval_every == 0 {
            return Err(TrainError::InvalidConfig(
                "batch, eval_batches, and eval_every must be at least 1",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Split::Train => f.write_str("train"),
            Split::Val => f.write_str("val"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossRecord {
    pub step: u64,
    pub split: Split,
    pub loss: f64,
}

/// A run was aborted because the loss or the parameters stopped being
/// finite.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DivergenceEvent {
    pub step: u64,
    pub detail: String,
}

/// Time series of train/validation losses for one (strategy, seed) run.
#[derive(Debug, Clone, Serialize)]
pub struct LossLog {
    pub strategy: String,
    pub seed: u64,
    pub records: Vec<LossRecord>,
    pub divergence: Option<DivergenceEvent>,
}

impl LossLog {
    fn new(strategy: String, seed: u64) -> Self {
        Self {
            strategy,
            seed,
            records: Vec::new(),
            divergence: None,
        }
    }

    fn push(&mut self, step: u64, split: Split, loss: f64) {
        debug_assert!(
            self.records
                .iter()
                .rev()
                .find(|r| r.split == split)
                .map_or(true, |r| r.step < step || step == 0),
            "steps must increase per split"
        );
        self.records.push(LossRecord { step, split, loss });
    }

    pub fn diverged(&self) -> bool {
        self.divergence.is_some()
    }

    pub fn last_loss(&self, split: Split) -> Option<f64> {
        self.records
            .iter()
            .rev()
            .find(|r| r.split == split)
            .map(|r| r.loss)
    }

    pub fn first_loss(&self, split: Split) -> Option<f64> {
        self.records.iter().find(|r| r.split == split).map(|r| r.loss)
    }

    pub fn losses(&self, split: Split) -> impl Iterator<Item = (u64, f64)> + '_ {
        self.records
            .iter()
            .filter(move |r| r.split == split)
            .map(|r| (r.step, r.loss))
    }

    /// One `step,split,strategy,seed,loss` line per record, loss at six
    /// decimal places, preceded by a matching header line.
    pub fn write_csv(&self, w: &mut impl Write) -> std::io::Result<()> {
        writeln!(w, "step,split,strategy,seed,loss")?;
        for r in &self.records {
            writeln!(
                w,
                "{},{},{},{},{:.6}",
                r.step, r.split, self.strategy, self.seed, r.loss
            )?;
        }
        Ok(())
    }
}

/// Distinct deterministic RNG streams derived from the run seed.
fn derive_seed(seed: u64, stream: u64, step: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ step;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const BATCH_STREAM: u64 = 1;
const EVAL_STREAM: u64 = 2;

/// Runs training at the precision named in the config.
pub fn train(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    corpus: &Corpus,
) -> Result<LossLog, TrainError> {
    match train_config.precision {
        Precision::Wide => train_typed::<f64>(model_config, train_config, corpus),
        Precision::Narrow => train_typed::<f32>(model_config, train_config, corpus),
    }
}

fn train_typed<T: Real>(
    model_config: &ModelConfig,
    train_config: &TrainConfig,
    corpus: &Corpus,
) -> Result<LossLog, TrainError> {
    train_config.validate()?;
    let mut model = TransformerModel::<T>::new(model_config.clone(), train_config.seed)?;
    let mut adam = AdamState::new(&model.store);
    let mut log = LossLog::new(
        model_config.strategy.name().to_string(),
        train_config.seed,
    );
    let seq = model_config.seq_len;
    let batch = train_config.batch;
    let mut batch_rng =
        ChaCha8Rng::seed_from_u64(derive_seed(train_config.seed, BATCH_STREAM, 0));
    let (lr, b1, b2, eps) = (
        T::from_f64(train_config.lr),
        T::from_f64(train_config.beta1),
        T::from_f64(train_config.beta2),
        T::from_f64(train_config.eps),
    );

    let val_loss = evaluate(&model, corpus, train_config, 0)?;
    log.push(0, Split::Val, val_loss);

    for step in 1..=train_config.steps {
        let (inputs, targets) = sample_batch(&corpus.train, seq, batch, &mut batch_rng)?;
        let tape = Tape::new();
        let logits = model.forward(&tape, &inputs, batch, seq)?;
        let loss = logits.cross_entropy(&targets)?;
        let loss_value = loss.value().scalar_value().as_f64();
        log.push(step, Split::Train, loss_value);
        if !loss_value.is_finite() {
            log.divergence = Some(DivergenceEvent {
                step,
                detail: format!("non-finite training loss {loss_value}"),
            });
            return Ok(log);
        }

        model.store.zero_grad();
        tape.backward(&loss, &mut model.store)?;
        adam_step(&mut model.store, &mut adam, lr, b1, b2, eps);
        if !model.store.values_finite() {
            log.divergence = Some(DivergenceEvent {
                step,
                detail: "non-finite parameter after optimizer update".to_string(),
            });
            return Ok(log);
        }

        if step % train_config.eval_every == 0 || step == train_config.steps {
            let val_loss = evaluate(&model, corpus, train_config, step)?;
            log.push(step, Split::Val, val_loss);
            if !val_loss.is_finite() {
                log.divergence = Some(DivergenceEvent {
                    step,
                    detail: format!("non-finite validation loss {val_loss}"),
                });
                return Ok(log);
            }
        }
    }
    Ok(log)
}

/// Mean loss over `eval_batches` seeded validation batches; forward only.
fn evaluate<T: Real>(
    model: &TransformerModel<T>,
    corpus: &Corpus,
    train_config: &TrainConfig,
    step: u64,
) -> Result<f64, TrainError> {
    let seq = model.config().seq_len;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(train_config.seed, EVAL_STREAM, step));
    let mut total = 0.0;
    for _ in 0..train_config.eval_batches {
        let (inputs, targets) = sample_batch(&corpus.val, seq, train_config.batch, &mut rng)?;
        let tape = Tape::new();
        let logits = model.forward(&tape, &inputs, train_config.batch, seq)?;
        total += logits
            .cross_entropy(&targets)?
            .value()
            .scalar_value()
            .as_f64();
    }
    Ok(total / train_config.eval_batches as f64)
}

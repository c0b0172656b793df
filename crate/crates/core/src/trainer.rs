//! Deterministic training loop for the addition task.

use std::time::Instant;

use crate::autodiff::Tape;
use crate::config::ExperimentConfig;
use crate::error::{LabError, Result};
use crate::model::{init_params, TransformerModel};
use crate::optim::{adamw_step, clip_global_norm, lr_at, OptimizerState};
use crate::rng::{LabRng, RngState};
use crate::task::{evaluate_exact_match, AdditionSample, DatasetSplit, PROMPT_LEN, SEQUENCE_LEN};
use crate::tensor::Tensor;

/// RNG stream reserved for batch sampling.
const BATCH_STREAM: u64 = 2;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub iter: usize,
    pub loss: f64,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRecord {
    pub iter: usize,
    pub accuracy: f64,
    pub n_samples: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub label: String,
    pub steps: Vec<StepRecord>,
    pub evals: Vec<EvalRecord>,
    /// Exact-match accuracy on the full test split at the end of the run.
    pub final_accuracy: f64,
    pub best_accuracy: f64,
    /// Set when the run stopped early (non-finite loss or gradient).
    pub failure: Option<String>,
    pub wall_seconds: f64,
}

impl TrainReport {
    pub fn failed(&self) -> bool {
        self.failure.is_some()
    }

    pub fn loss_trace(&self) -> Vec<f64> {
        self.steps.iter().map(|s| s.loss).collect()
    }
}

pub trait TrainObserver {
    fn on_step(&mut self, _record: &StepRecord) {}
    fn on_eval(&mut self, _record: &EvalRecord) {}
    /// Called after every optimisation step with the updated state, e.g. to
    /// write periodic checkpoints.
    fn after_step(&mut self, _trainer: &Trainer) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

/// Prints a line every `every` steps and at each evaluation.
pub struct ProgressPrinter {
    pub every: usize,
    pub prefix: String,
}

impl TrainObserver for ProgressPrinter {
    fn on_step(&mut self, r: &StepRecord) {
        if self.every > 0 && r.iter % self.every == 0 {
            eprintln!(
                "{}iter {:>6}  loss {:.5}  |g| {:.3}  lr {:.2e}",
                self.prefix, r.iter, r.loss, r.grad_norm, r.lr
            );
        }
    }

    fn on_eval(&mut self, r: &EvalRecord) {
        eprintln!(
            "{}iter {:>6}  exact-match {:.2}% on {} samples",
            self.prefix,
            r.iter,
            100.0 * r.accuracy,
            r.n_samples
        );
    }
}

/// Everything that evolves during training; exactly what a checkpoint holds.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub config: ExperimentConfig,
    pub model: TransformerModel,
    pub optimizer: OptimizerState,
    /// Number of completed optimisation steps.
    pub iter: usize,
    rng: LabRng,
}

impl Trainer {
    pub fn new(config: ExperimentConfig, model_seed: u64) -> Result<Self> {
        config.validate()?;
        let model = init_params(&config.model, model_seed)?;
        Ok(Self::with_model(config, model))
    }

    pub fn with_model(config: ExperimentConfig, model: TransformerModel) -> Self {
        let optimizer = OptimizerState::new(&model.params());
        let rng = LabRng::derived(config.train.seed, BATCH_STREAM);
        Trainer {
            config,
            model,
            optimizer,
            iter: 0,
            rng,
        }
    }

    pub(crate) fn from_parts(
        config: ExperimentConfig,
        model: TransformerModel,
        optimizer: OptimizerState,
        iter: usize,
        rng: RngState,
    ) -> Self {
        Trainer {
            config,
            model,
            optimizer,
            iter,
            rng: LabRng::from_state(rng),
        }
    }

    pub fn rng_state(&self) -> RngState {
        self.rng.state(self.config.train.seed)
    }

    /// One optimisation step on a freshly sampled batch.
    pub fn step(&mut self, train: &[AdditionSample]) -> Result<StepRecord> {
        if train.is_empty() {
            return Err(LabError::Contract("training set is empty".into()));
        }
        let cfg = &self.config.train;
        let batch: Vec<&AdditionSample> = (0..cfg.batch_size)
            .map(|_| &train[self.rng.below(train.len())])
            .collect();
        let (ids, targets, mask) = lm_batch(&batch, cfg.answer_only_loss);
        let seq = SEQUENCE_LEN - 1;

        let mut tape = Tape::new();
        let diverged = |iter| LabError::Diverged {
            iter,
            loss: f64::NAN,
        };
        let pass = match self.model.forward(&mut tape, &ids, batch.len(), seq, true) {
            Err(LabError::DegenerateRow { .. }) => return Err(diverged(self.iter)),
            other => other?,
        };
        let loss = match tape.cross_entropy(pass.logits, &targets, &mask) {
            Err(LabError::DegenerateRow { .. }) => return Err(diverged(self.iter)),
            other => other?,
        };
        let loss_value = tape.value(loss).data()[0];
        if !loss_value.is_finite() {
            return Err(LabError::Diverged {
                iter: self.iter,
                loss: loss_value,
            });
        }
        tape.backward(loss)?;
        let mut grads: Vec<Tensor> = pass
            .params
            .iter()
            .map(|&v| {
                tape.grad(v)
                    .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape()))
            })
            .collect();
        drop(tape);
        let grad_norm = clip_global_norm(&mut grads, cfg.grad_clip);
        let lr = lr_at(self.iter, cfg);
        let names = self.model.param_names();
        let cfg = self.config.train.clone();
        adamw_step(
            &mut self.model.params_mut(),
            &grads,
            &names,
            &mut self.optimizer,
            &cfg,
            lr,
        )?;
        let record = StepRecord {
            iter: self.iter,
            loss: loss_value,
            grad_norm,
            lr,
        };
        self.iter += 1;
        Ok(record)
    }

    /// Exact-match accuracy; a numerically broken model scores 0.
    pub fn evaluate(&self, samples: &[AdditionSample]) -> Result<f64> {
        match evaluate_exact_match(&mut &self.model, samples) {
            Err(LabError::DegenerateRow { .. }) => Ok(0.0),
            other => other,
        }
    }

    /// Trains until `max_iters`, evaluating on a test subset every
    /// `eval_interval` steps and on the full test split at the end.
    /// Divergence ends the run early and is reported, not raised.
    pub fn run(
        &mut self,
        split: &DatasetSplit,
        observer: &mut dyn TrainObserver,
    ) -> Result<TrainReport> {
        let start = Instant::now();
        let max_iters = self.config.train.max_iters;
        let interval = self.config.train.eval_interval;
        let subset_len = self.config.train.eval_samples.min(split.test.len());
        let mut steps = Vec::new();
        let mut evals = Vec::new();
        let mut failure = None;

        let eval = |trainer: &Trainer,
                    full: bool,
                    evals: &mut Vec<EvalRecord>,
                    observer: &mut dyn TrainObserver|
         -> Result<()> {
            let samples = if full {
                &split.test[..]
            } else {
                &split.test[..subset_len]
            };
            if samples.is_empty() {
                return Ok(());
            }
            let record = EvalRecord {
                iter: trainer.iter,
                accuracy: trainer.evaluate(samples)?,
                n_samples: samples.len(),
            };
            observer.on_eval(&record);
            evals.push(record);
            Ok(())
        };

        if self.iter == 0 && max_iters > 0 {
            eval(self, false, &mut evals, observer)?;
        }
        while self.iter < max_iters {
            match self.step(&split.train) {
                Ok(record) => {
                    observer.on_step(&record);
                    steps.push(record);
                }
                Err(e @ (LabError::Diverged { .. } | LabError::NonFiniteGradient { .. })) => {
                    failure = Some(e.to_string());
                    break;
                }
                Err(e) => return Err(e),
            }
            observer.after_step(self)?;
            if self.iter % interval == 0 && self.iter < max_iters {
                eval(self, false, &mut evals, observer)?;
            }
        }
        eval(self, true, &mut evals, observer)?;
        let final_accuracy = evals.last().map_or(0.0, |e| e.accuracy);
        let best_accuracy = evals.iter().map(|e| e.accuracy).fold(0.0, f64::max);
        Ok(TrainReport {
            label: self.config.model.label(),
            steps,
            evals,
            final_accuracy,
            best_accuracy,
            failure,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }
}

/// Builds next-token inputs, targets, and the loss mask for a batch.
pub fn lm_batch(
    batch: &[&AdditionSample],
    answer_only: bool,
) -> (Vec<usize>, Vec<usize>, Vec<bool>) {
    let seq = SEQUENCE_LEN - 1;
    let mut ids = Vec::with_capacity(batch.len() * seq);
    let mut targets = Vec::with_capacity(batch.len() * seq);
    let mut mask = Vec::with_capacity(batch.len() * seq);
    for s in batch {
        let full = s.sequence();
        ids.extend_from_slice(&full[..seq]);
        targets.extend_from_slice(&full[1..]);
        // input position p predicts full[p + 1]; answers start at 1 + PROMPT_LEN
        mask.extend((0..seq).map(|p| !answer_only || p >= PROMPT_LEN));
    }
    (ids, targets, mask)
}

/// Trains a freshly initialised model. Convenience wrapper over [`Trainer`].
pub fn train(
    config: &ExperimentConfig,
    model_seed: u64,
    split: &DatasetSplit,
    observer: &mut dyn TrainObserver,
) -> Result<(Trainer, TrainReport)> {
    let mut trainer = Trainer::new(config.clone(), model_seed)?;
    let report = trainer.run(split, observer)?;
    Ok((trainer, report))
}

#[cfg(test)]
mod tests;

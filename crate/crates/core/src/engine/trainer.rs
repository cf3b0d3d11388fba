use rand::seq::SliceRandom;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use std::sync::Arc;

use super::aggregate::aggregate;
use super::config::ExperimentConfig;
use super::optim::OptimizerState;
use super::schedule::{flop_matched_steps, lr_at};
use crate::data::Dataset;
use crate::diagnostics::{mean_present, restricted_alignment, AlignmentSample};
use crate::error::{Error, Result};
use crate::masking::{MaskAssignment, Strategy};
use crate::model::{argmax_rows, Batch, GlobalModel, ModelTopology};

pub const METRICS_CSV_HEADER: &str = "step,epoch,lr,train_loss_mean,eval_acc,active_params_mean,alignment_block_or_neuron_mean";

const STREAM_MASKS: u64 = 1;
const STREAM_INIT: u64 = 2;
const STREAM_WORKER0: u64 = 1 << 16;
const EVAL_CHUNK: usize = 250;

/// Independent ChaCha stream `stream` of the run seed.
pub fn seed_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Topology and validated mask assignment of a run, as [`Trainer::new`] builds them.
pub fn assignment_for(config: &ExperimentConfig) -> Result<(ModelTopology, MaskAssignment)> {
    let topology = config.model.topology()?;
    let mask_seed = seed_stream(config.seed, STREAM_MASKS).next_u64();
    let assignment = MaskAssignment::assign(&topology, config.strategy, config.workers, config.overlap, mask_seed)?;
    assignment.validate(&topology)?;
    Ok((topology, assignment))
}

/// Per-worker batch sampler: every worker walks its own reshuffled pass over
/// the whole training split.
#[derive(Clone, Debug)]
pub struct WorkerSampler {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl WorkerSampler {
    pub fn new(run_seed: u64, worker: usize, train_len: usize) -> Self {
        Self {
            rng: seed_stream(run_seed, STREAM_WORKER0 + worker as u64),
            order: (0..train_len).collect(),
            pos: train_len,
        }
    }

    pub fn next_indices(&mut self, batch: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.pos == self.order.len() {
                self.order.shuffle(&mut self.rng);
                self.pos = 0;
            }
            let take = (batch - out.len()).min(self.order.len() - self.pos);
            out.extend_from_slice(&self.order[self.pos..self.pos + take]);
            self.pos += take;
        }
        out
    }
}

/// Step budget of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Plan {
    /// Steps per pass over the training split at the global batch size.
    pub steps_per_epoch: usize,
    pub total_steps: usize,
    pub eval_every: usize,
}

impl Plan {
    pub fn new(config: &ExperimentConfig, train_len: usize) -> Result<Self> {
        let global_batch = config.workers * config.batch_per_worker;
        let steps_per_epoch = train_len.div_ceil(global_batch).max(1);
        let total_steps = match config.steps {
            Some(s) => s,
            None => {
                let base = config.epochs_full * steps_per_epoch;
                if config.flop_match {
                    flop_matched_steps(base, config.workers, config.overlap)?
                } else {
                    base
                }
            }
        };
        Ok(Self {
            steps_per_epoch,
            total_steps,
            eval_every: config.eval_every.unwrap_or(steps_per_epoch),
        })
    }
}

/// One metrics CSV row. Step 0 is the evaluation before training; row `k`
/// describes update `k`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRecord {
    pub step: usize,
    pub epoch: f64,
    pub lr: Option<f64>,
    pub train_loss_mean: Option<f64>,
    pub eval_acc: Option<f64>,
    pub active_params_mean: f64,
    pub alignment_mean: Option<f64>,
}

fn opt(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

impl MetricsRecord {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.step,
            self.epoch,
            opt(self.lr),
            opt(self.train_loss_mean),
            opt(self.eval_acc),
            self.active_params_mean,
            opt(self.alignment_mean)
        )
    }
}

/// Receives rows as a run progresses.
pub trait RunObserver {
    fn record(&mut self, record: &MetricsRecord) -> Result<()>;

    fn alignment(&mut self, _samples: &[AlignmentSample]) -> Result<()> {
        Ok(())
    }
}

/// Collects everything in memory.
#[derive(Default)]
pub struct CollectObserver {
    pub records: Vec<MetricsRecord>,
    pub alignment: Vec<AlignmentSample>,
}

impl RunObserver for CollectObserver {
    fn record(&mut self, record: &MetricsRecord) -> Result<()> {
        self.records.push(record.clone());
        Ok(())
    }

    fn alignment(&mut self, samples: &[AlignmentSample]) -> Result<()> {
        self.alignment.extend_from_slice(samples);
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunSummary {
    pub seed: u64,
    pub workers: usize,
    pub overlap: usize,
    pub strategy: Strategy,
    pub params: usize,
    pub active_params_mean: f64,
    pub total_steps: usize,
    pub epochs: f64,
    pub final_eval_acc: f64,
    pub final_train_loss: Option<f64>,
    pub alignment_mean: Option<f64>,
}

/// Result of one worker's forward/backward.
pub struct WorkerResult {
    pub loss: f64,
    pub gradient: Vec<f64>,
    /// Unmasked gradient on the same batch, when alignment is due.
    pub unmasked: Option<Vec<f64>>,
}

/// Everything produced by one protocol step.
pub struct StepOutcome {
    pub record: MetricsRecord,
    pub alignment: Vec<AlignmentSample>,
}

pub struct Trainer {
    pub config: ExperimentConfig,
    pub dataset: Arc<Dataset>,
    pub model: GlobalModel,
    pub assignment: MaskAssignment,
    pub optimizer: OptimizerState,
    pub plan: Plan,
    samplers: Vec<WorkerSampler>,
    step: usize,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl Trainer {
    pub fn new(config: ExperimentConfig, dataset: Arc<Dataset>) -> Result<Self> {
        config.validate()?;
        if dataset.sample_shape != config.model.input_shape() || dataset.classes != config.model.classes() {
            return Err(Error::config(format!(
                "dataset samples {:?} with {} classes do not fit model input {:?} with {} classes",
                dataset.sample_shape,
                dataset.classes,
                config.model.input_shape(),
                config.model.classes()
            )));
        }
        if dataset.train.is_empty() || dataset.test.is_empty() {
            return Err(Error::Data("dataset has an empty split".into()));
        }
        let (topology, assignment) = assignment_for(&config)?;
        for layer in &config.alignment.layers {
            if config.alignment.every > 0 && topology.layer_index(layer).is_none() {
                return Err(Error::config(format!("alignment.layers names unknown layer {layer}")));
            }
        }
        let init_seed = seed_stream(config.seed, STREAM_INIT).next_u64();
        let model = GlobalModel::build_for(&config.model, &assignment, init_seed)?;
        let optimizer = OptimizerState::new(config.optimizer.clone(), model.num_params());
        let plan = Plan::new(&config, dataset.train.len())?;
        let samplers = (0..config.workers)
            .map(|i| WorkerSampler::new(config.seed, i, dataset.train.len()))
            .collect();
        #[cfg(feature = "parallel")]
        let pool = if config.threads > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(config.threads)
                    .build()
                    .map_err(|e| Error::Config(format!("cannot start {} threads: {e}", config.threads)))?,
            )
        } else {
            None
        };
        Ok(Self {
            config,
            dataset,
            model,
            assignment,
            optimizer,
            plan,
            samplers,
            step: 0,
            #[cfg(feature = "parallel")]
            pool,
        })
    }

    /// Updates applied so far.
    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn active_params_mean(&self) -> f64 {
        let masks = self.assignment.masks();
        masks.iter().map(|m| m.active_params()).sum::<usize>() as f64 / masks.len() as f64
    }

    fn epoch_at(&self, step: usize) -> f64 {
        (step * self.config.workers * self.config.batch_per_worker) as f64 / self.dataset.train.len() as f64
    }

    /// Runs `f(i)` for every worker, on the pool when one is configured.
    /// Results come back in worker order either way.
    fn fan_out<T: Send>(&self, n: usize, f: impl Fn(usize) -> T + Sync + Send) -> Vec<T> {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| (0..n).into_par_iter().map(&f).collect());
        }
        (0..n).map(f).collect()
    }

    /// Draws the next batch of every worker.
    pub fn draw_batches(&mut self) -> Result<Vec<Batch>> {
        let b = self.config.batch_per_worker;
        let indices: Vec<Vec<usize>> = self.samplers.iter_mut().map(|s| s.next_indices(b)).collect();
        indices.iter().map(|idx| self.dataset.train_batch(idx)).collect()
    }

    /// Masked loss and gradient of every worker against the current θ.
    pub fn worker_results(&self, batches: &[Batch], with_unmasked: bool) -> Result<Vec<WorkerResult>> {
        let model = &self.model;
        let masks = self.assignment.masks();
        let full = crate::masking::WorkerMask::full(&model.topology);
        self.fan_out(batches.len(), |i| -> Result<WorkerResult> {
            let (loss, gradient) = model.loss_and_gradient(&masks[i], &batches[i])?;
            let unmasked = match (with_unmasked, masks[i].is_full()) {
                (false, _) => None,
                (true, true) => Some(gradient.clone()),
                (true, false) => Some(model.loss_and_gradient(&full, &batches[i])?.1),
            };
            Ok(WorkerResult { loss, gradient, unmasked })
        })
        .into_iter()
        .collect()
    }

    fn alignment_due(&self, step_index: usize) -> bool {
        let every = self.config.alignment.every;
        every > 0 && !self.config.alignment.layers.is_empty() && step_index.is_multiple_of(every)
    }

    /// One synchronous step: sample, masked forward/backward on every worker,
    /// masked averaging, one global optimizer update.
    pub fn step(&mut self) -> Result<StepOutcome> {
        let t = self.step;
        let step_no = t + 1;
        let batches = self.draw_batches()?;
        let align = self.alignment_due(t);
        let results = self.worker_results(&batches, align)?;
        for (i, r) in results.iter().enumerate() {
            if !r.loss.is_finite() {
                return Err(Error::Numerical {
                    step: step_no,
                    message: format!("worker {i} loss is {}", r.loss),
                });
            }
        }
        let mut alignment = Vec::new();
        if align {
            let ratio = self.config.overlap as f64 / self.config.workers as f64;
            for (i, r) in results.iter().enumerate() {
                let unmasked = r.unmasked.as_ref().expect("requested above");
                for layer in &self.config.alignment.layers {
                    let a = restricted_alignment(&self.model.topology, layer, self.assignment.worker(i), &r.gradient, unmasked)?;
                    alignment.push(AlignmentSample {
                        step: step_no,
                        worker: i,
                        layer: a.layer,
                        strategy: self.config.strategy,
                        overlap: ratio,
                        cosine: a.cosine,
                        reason: a.reason,
                    });
                }
            }
        }
        let loss_mean = results.iter().map(|r| r.loss).sum::<f64>() / results.len() as f64;
        let grads: Vec<Vec<f64>> = results.into_iter().map(|r| r.gradient).collect();
        let g = aggregate(&grads, self.assignment.masks())?;
        let lr = lr_at(&self.config.schedule, t, self.plan.total_steps);
        self.optimizer.update(&mut self.model.theta, &g.values, lr, step_no)?;
        self.step = step_no;
        Ok(StepOutcome {
            record: MetricsRecord {
                step: step_no,
                epoch: self.epoch_at(step_no),
                lr: Some(lr),
                train_loss_mean: Some(loss_mean),
                eval_acc: None,
                active_params_mean: self.active_params_mean(),
                alignment_mean: if align { mean_present(&alignment) } else { None },
            },
            alignment,
        })
    }

    /// Test accuracy of the full, unmasked model.
    pub fn evaluate(&self) -> Result<f64> {
        let test = &self.dataset.test;
        let chunks: Vec<Vec<usize>> = (0..test.len())
            .collect::<Vec<_>>()
            .chunks(EVAL_CHUNK)
            .map(<[usize]>::to_vec)
            .collect();
        let correct = self
            .fan_out(chunks.len(), |c| -> Result<usize> {
                let batch = self.dataset.test_batch(&chunks[c])?;
                let pred = argmax_rows(&self.model.predict(&batch.inputs)?);
                Ok(pred.iter().zip(&batch.labels).filter(|(p, l)| p == l).count())
            })
            .into_iter()
            .sum::<Result<usize>>()?;
        Ok(correct as f64 / test.len() as f64)
    }

    /// Runs the remaining steps, evaluating once per `eval_every` steps and
    /// after the last one.
    pub fn run(&mut self, observer: &mut dyn RunObserver) -> Result<RunSummary> {
        let mut last_acc = if self.step == 0 {
            let acc = self.evaluate()?;
            observer.record(&MetricsRecord {
                step: 0,
                epoch: 0.0,
                lr: None,
                train_loss_mean: None,
                eval_acc: Some(acc),
                active_params_mean: self.active_params_mean(),
                alignment_mean: None,
            })?;
            acc
        } else {
            self.evaluate()?
        };
        let mut last_loss = None;
        let mut alignment_sum = (0.0, 0usize);
        while self.step < self.plan.total_steps {
            let mut out = self.step()?;
            if self.step.is_multiple_of(self.plan.eval_every) || self.step == self.plan.total_steps {
                last_acc = self.evaluate()?;
                out.record.eval_acc = Some(last_acc);
            }
            last_loss = out.record.train_loss_mean;
            for c in out.alignment.iter().filter_map(|s| s.cosine) {
                alignment_sum.0 += c;
                alignment_sum.1 += 1;
            }
            if !out.alignment.is_empty() {
                observer.alignment(&out.alignment)?;
            }
            observer.record(&out.record)?;
        }
        Ok(RunSummary {
            seed: self.config.seed,
            workers: self.config.workers,
            overlap: self.config.overlap,
            strategy: self.config.strategy,
            params: self.model.num_params(),
            active_params_mean: self.active_params_mean(),
            total_steps: self.plan.total_steps,
            epochs: self.epoch_at(self.plan.total_steps),
            final_eval_acc: last_acc,
            final_train_loss: last_loss,
            alignment_mean: (alignment_sum.1 > 0).then(|| alignment_sum.0 / alignment_sum.1 as f64),
        })
    }
}

//! The training loop.
//!
//! All randomness comes from one ChaCha8 generator seeded with `cfg.seed`:
//! model initialization, then per epoch the shuffle, then per step one seed
//! from which the error-rounding and gradient-rounding streams are derived.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::checkpoint::Checkpoint;
use super::config::{OutputPaths, PrecisionConfig, TrainConfig};
use super::data::{ingest_dataset, DataSplit, Dataset};
use super::metrics::{write_file, EpochRecord, MetricsLog};
use super::model::{Model, PassPrecision};
use crate::autodiff::{Sgd, Tape, Tensor};
use crate::cost::{step_cost, CostLedger, StepBits};
use crate::error::{Error, Result};
use crate::prt::{resolve_bounds, run_prt, AccuracySource, PrtResult};
use crate::quant::{
    quantize_max_scale, quantize_stochastic_slice, QuantizerKind, Rounding, PASS_THROUGH_BITS,
};
use crate::schedule::{gradient_schedule, PrecisionSchedule};

/// Samples per evaluation batch.
pub const EVAL_BATCH: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochPlan {
    pub epoch: usize,
    pub fw_bits: u32,
    pub bw_bits: u32,
    pub lr: f64,
}

/// Forward bits at epoch `t` (fraction `progress` through it), with the
/// pre-CPT clamp to `b_min`.
pub fn fw_bits_at(cfg: &TrainConfig, sched: &PrecisionSchedule, t: usize, progress: f64) -> Result<u32> {
    if t < cfg.precision.cpt_start_epoch {
        Ok(sched.b_min)
    } else {
        sched.bits_at_position(t, progress)
    }
}

pub fn bw_bits_at(cfg: &TrainConfig, sched: &PrecisionSchedule, t: usize) -> Result<u32> {
    let p = &cfg.precision;
    if !p.gradient_cpt {
        return Ok(p.bw_bits);
    }
    if t < p.cpt_start_epoch {
        return Ok(p.bw_min_bits);
    }
    gradient_schedule(sched, p.bw_min_bits, p.bw_bits)?.bits_at(t)
}

/// The epoch-level plan: bits at the start of each epoch and its learning rate.
pub fn plan(cfg: &TrainConfig) -> Result<Vec<EpochPlan>> {
    cfg.validate()?;
    let sched = cfg.fw_schedule()?;
    (0..cfg.epochs)
        .map(|t| {
            Ok(EpochPlan {
                epoch: t,
                fw_bits: fw_bits_at(cfg, &sched, t, 0.0)?,
                bw_bits: bw_bits_at(cfg, &sched, t)?,
                lr: cfg.lr.lr_at(t)?,
            })
        })
        .collect()
}

/// Ledger obtained by enumerating every step of the schedule, without training.
pub fn analytic_ledger(cfg: &TrainConfig, macs_per_sample: u64, num_params: u64, train_len: usize) -> Result<CostLedger> {
    let sched = cfg.fw_schedule()?;
    let steps = train_len.div_ceil(cfg.batch_size);
    let mut ledger = CostLedger::new();
    for t in 0..cfg.epochs {
        let bw = bw_bits_at(cfg, &sched, t)?;
        for s in 0..steps {
            let fw = fw_bits_at(cfg, &sched, t, s as f64 / steps as f64)?;
            let batch = cfg.batch_size.min(train_len - s * cfg.batch_size);
            ledger.record(step_cost(macs_per_sample * batch as u64, num_params, StepBits::fw_bw(fw, bw))?);
        }
    }
    Ok(ledger)
}

/// Analytic ledger for a config; loads the dataset only for its shape and size.
pub fn analytic_cost(cfg: &TrainConfig) -> Result<CostLedger> {
    cfg.validate()?;
    let data = ingest_dataset(&cfg.data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = Model::build(&cfg.model, &data.train.sample_shape, data.train.num_classes, &mut rng)?;
    analytic_ledger(cfg, model.macs(1), model.num_params() as u64, data.train.len())
}

pub fn pass_precision(cfg: &TrainConfig, fw: u32, bw: u32) -> PassPrecision {
    PassPrecision {
        weight_bits: fw,
        activation_bits: fw,
        error_bits: bw,
        weight_kind: cfg.quant.weight,
        activation_kind: cfg.quant.activation,
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn forward_chunks<F>(model: &Model, data: &Dataset, precision: &PassPrecision, mut visit: F) -> Result<()>
where
    F: FnMut(&Tensor, &[usize]) -> Result<()>,
{
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty dataset".into()));
    }
    // No backward pass here, so errors are never quantized.
    let precision = &PassPrecision {
        error_bits: PASS_THROUGH_BITS,
        ..*precision
    };
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut tape = Tape::new();
    for chunk in idx.chunks(EVAL_BATCH) {
        tape.reset();
        let (x, labels) = data.batch(chunk);
        let xv = tape.constant(x)?;
        let (logits, _) = model.forward(&mut tape, xv, precision)?;
        visit(tape.value(logits), &labels)?;
    }
    Ok(())
}

/// Top-1 accuracy in percent with weights and activations at `fw_bits`.
pub fn evaluate(model: &Model, data: &Dataset, fw_bits: u32) -> Result<f64> {
    let p = PassPrecision::forward_only(
        fw_bits,
        fw_bits,
        QuantizerKind::MaxScaleSymmetric,
        QuantizerKind::MaxScaleUnsigned,
    );
    evaluate_with(model, data, &p)
}

pub fn evaluate_with(model: &Model, data: &Dataset, precision: &PassPrecision) -> Result<f64> {
    let mut correct = 0usize;
    forward_chunks(model, data, precision, |logits, labels| {
        let k = logits.shape()[1];
        correct += logits
            .data()
            .chunks(k)
            .zip(labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        Ok(())
    })?;
    Ok(100.0 * correct as f64 / data.len() as f64)
}

/// Mean cross-entropy over `data`.
pub fn evaluate_loss(model: &Model, data: &Dataset, precision: &PassPrecision) -> Result<f64> {
    let mut total = 0.0;
    forward_chunks(model, data, precision, |logits, labels| {
        let mut tape = Tape::new();
        let l = tape.constant(logits.clone())?;
        let loss = tape.softmax_cross_entropy(l, labels)?;
        total += tape.value(loss).data()[0] * labels.len() as f64;
        Ok(())
    })?;
    Ok(total / data.len() as f64)
}

struct StepOutcome {
    loss: f64,
    correct: usize,
    batch: usize,
}

pub struct Trainer {
    cfg: TrainConfig,
    data: Arc<DataSplit>,
    model: Model,
    sgd: Sgd,
    rng: ChaCha8Rng,
    ledger: CostLedger,
    log: MetricsLog,
    epoch: usize,
    sched: PrecisionSchedule,
    out_dir: Option<PathBuf>,
    last_good: Option<Checkpoint>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let data = ingest_dataset(&cfg.data)?;
        Self::with_data(cfg, Arc::new(data))
    }

    pub fn with_data(cfg: TrainConfig, data: Arc<DataSplit>) -> Result<Self> {
        cfg.validate()?;
        if data.train.sample_shape != data.test.sample_shape
            || data.train.num_classes != data.test.num_classes
        {
            return Err(Error::Data("train and test splits disagree on shape or classes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let model = Model::build(&cfg.model, &data.train.sample_shape, data.train.num_classes, &mut rng)?;
        let sgd = Sgd::new(cfg.optimizer)?;
        let sched = cfg.fw_schedule()?;
        let mut t = Self {
            cfg,
            data,
            model,
            sgd,
            rng,
            ledger: CostLedger::new(),
            log: MetricsLog::new(),
            epoch: 0,
            sched,
            out_dir: None,
            last_good: None,
        };
        t.last_good = Some(t.checkpoint());
        Ok(t)
    }

    /// Restores from a checkpoint written under the same config. The metrics
    /// log starts empty and only receives the epochs run after the restore.
    pub fn resume(cfg: TrainConfig, data: Arc<DataSplit>, ckpt: &Checkpoint) -> Result<Self> {
        if ckpt.config_hash != cfg.hash() {
            return Err(Error::Checkpoint("checkpoint was written under a different config".into()));
        }
        if ckpt.epoch as usize > cfg.epochs {
            return Err(Error::Checkpoint(format!(
                "checkpoint epoch {} beyond the run's {} epochs",
                ckpt.epoch, cfg.epochs
            )));
        }
        let mut t = Self::with_data(cfg, data)?;
        t.model.set_params(ckpt.params.clone())?;
        t.sgd.set_velocity(ckpt.velocity.clone().unwrap_or_default());
        t.rng = ckpt.restore_rng();
        t.ledger = ckpt.ledger;
        t.epoch = ckpt.epoch as usize;
        t.last_good = Some(ckpt.clone());
        Ok(t)
    }

    /// Periodic and divergence checkpoints go under `dir`.
    pub fn with_output_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.out_dir = Some(dir.into());
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn data(&self) -> &Arc<DataSplit> {
        &self.data
    }

    pub fn log(&self) -> &MetricsLog {
        &self.log
    }

    pub fn ledger(&self) -> &CostLedger {
        &self.ledger
    }

    /// Epochs completed so far.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn is_finished(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn into_parts(self) -> (Model, MetricsLog, CostLedger) {
        (self.model, self.log, self.ledger)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let (rng_seed, rng_stream, rng_word_pos) = Checkpoint::capture_rng(&self.rng);
        Checkpoint {
            config_hash: self.cfg.hash(),
            epoch: self.epoch as u64,
            rng_seed,
            rng_stream,
            rng_word_pos,
            ledger: self.ledger,
            params: self.model.params().to_vec(),
            velocity: if self.sgd.velocity().is_empty() {
                None
            } else {
                Some(self.sgd.velocity().to_vec())
            },
        }
    }

    /// Replaces the forward bounds for the remaining epochs.
    pub fn set_fw_bounds(&mut self, b_min: u32, b_max: u32) -> Result<()> {
        self.update_precision(|p| {
            p.b_min = b_min;
            p.b_max = b_max;
        })
    }

    /// Edits the precision settings for the remaining epochs.
    pub fn update_precision(&mut self, edit: impl FnOnce(&mut PrecisionConfig)) -> Result<()> {
        let mut cfg = self.cfg.clone();
        edit(&mut cfg.precision);
        cfg.validate()?;
        self.sched = cfg.fw_schedule()?;
        self.cfg = cfg;
        Ok(())
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.is_finished() {
            self.run_epoch()?;
        }
        Ok(())
    }

    /// Runs until `epoch` epochs are complete.
    pub fn run_until(&mut self, epoch: usize) -> Result<()> {
        while self.epoch < epoch.min(self.cfg.epochs) {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let t = self.epoch;
        let cfg = self.cfg.clone();
        let sched = self.sched;
        let fw_at = move |progress: f64| fw_bits_at(&cfg, &sched, t, progress);
        self.train_epoch(fw_at).map(|(rec, _)| rec)
    }

    /// Trains the next `epochs` epochs at a fixed forward bitwidth and returns
    /// the per-iteration training accuracies.
    pub fn probe(&mut self, bits: u32, epochs: usize) -> Result<Vec<f64>> {
        let mut acc = Vec::new();
        for _ in 0..epochs {
            let (_, a) = self.train_epoch(|_| Ok(bits))?;
            acc.extend(a);
        }
        Ok(acc)
    }

    fn train_epoch<F>(&mut self, fw_at: F) -> Result<(EpochRecord, Vec<f64>)>
    where
        F: Fn(f64) -> Result<u32>,
    {
        let t = self.epoch;
        if t >= self.cfg.epochs {
            return Err(Error::EpochOutOfRange {
                epoch: t,
                total: self.cfg.epochs,
            });
        }
        let lr = self.cfg.lr.lr_at(t)?;
        let bw = bw_bits_at(&self.cfg, &self.sched, t)?;
        let fw0 = fw_at(0.0)?;
        let mut order: Vec<usize> = (0..self.data.train.len()).collect();
        order.shuffle(&mut self.rng);
        let steps = order.len().div_ceil(self.cfg.batch_size);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        let mut iter_acc = Vec::with_capacity(steps);
        for (s, idx) in order.chunks(self.cfg.batch_size).enumerate() {
            let fw = fw_at(s as f64 / steps as f64)?;
            let out = match self.step(idx, fw, bw, lr) {
                Ok(o) => o,
                Err(Error::NonFinite(what)) => return Err(self.diverged(t, what)),
                Err(e) => return Err(e),
            };
            loss_sum += out.loss * out.batch as f64;
            correct += out.correct;
            seen += out.batch;
            iter_acc.push(100.0 * out.correct as f64 / out.batch as f64);
        }
        let test_accuracy = evaluate_with(
            &self.model,
            &self.data.test,
            &PassPrecision::forward_only(
                self.cfg.eval_bits(),
                self.cfg.eval_bits(),
                self.cfg.quant.weight,
                self.cfg.quant.activation,
            ),
        )?;
        let rec = EpochRecord {
            epoch: t,
            fw_bits: fw0,
            bw_bits: bw,
            lr,
            train_loss: loss_sum / seen as f64,
            train_accuracy: 100.0 * correct as f64 / seen as f64,
            test_accuracy,
            cumulative_bitops: self.ledger.total(),
            cumulative_forward_bitops: self.ledger.forward_bitops,
        };
        self.log.push(rec.clone())?;
        self.epoch += 1;
        let ckpt = self.checkpoint();
        if let (Some(dir), Some(every)) = (&self.out_dir, self.cfg.checkpoint_every) {
            if every > 0 && self.epoch.is_multiple_of(every) {
                let paths = TrainConfig::output_paths(dir);
                ckpt.save(&paths.checkpoint_dir.join(format!("epoch_{:04}.ckpt", self.epoch)))?;
            }
        }
        self.last_good = Some(ckpt);
        Ok((rec, iter_acc))
    }

    fn diverged(&self, epoch: usize, detail: String) -> Error {
        let checkpoint = match (&self.out_dir, &self.last_good) {
            (Some(dir), Some(ckpt)) => {
                let path = TrainConfig::output_paths(dir).checkpoint_dir.join("last_good.ckpt");
                match ckpt.save(&path) {
                    Ok(()) => Some(path),
                    Err(_) => None,
                }
            }
            _ => None,
        };
        Error::Diverged {
            epoch,
            detail: format!("non-finite {detail}"),
            checkpoint,
        }
    }

    fn step(&mut self, idx: &[usize], fw: u32, bw: u32, lr: f64) -> Result<StepOutcome> {
        let (x, labels) = self.data.train.batch(idx);
        let step_seed: u64 = self.rng.gen();
        let mut tape = Tape::with_rng(ChaCha8Rng::seed_from_u64(step_seed));
        let xv = tape.constant(x)?;
        let precision = pass_precision(&self.cfg, fw, bw);
        let (logits, param_vars) = self.model.forward(&mut tape, xv, &precision)?;
        let k = self.model.num_classes();
        let correct = tape
            .value(logits)
            .data()
            .chunks(k)
            .zip(&labels)
            .filter(|(row, &l)| argmax(row) == l)
            .count();
        let loss_var = tape.softmax_cross_entropy(logits, &labels)?;
        let loss = tape.value(loss_var).data()[0];
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss".into()));
        }
        tape.backward(loss_var)?;
        let mut grad_rng = ChaCha8Rng::seed_from_u64(step_seed);
        grad_rng.set_stream(1);
        let mut grads = Vec::with_capacity(param_vars.len());
        for (v, p) in param_vars.iter().zip(self.model.params()) {
            let g = tape.grad(*v).map_or_else(|| vec![0.0; p.len()], <[f64]>::to_vec);
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NonFinite("parameter gradient".into()));
            }
            let g = if bw >= PASS_THROUGH_BITS {
                g
            } else {
                match self.cfg.quant.gradient_rounding {
                    Rounding::Stochastic => quantize_stochastic_slice(&g, bw, &mut grad_rng)?,
                    Rounding::NearestEven => {
                        quantize_max_scale(&Tensor::new(p.shape().to_vec(), g)?, bw, true)?.into_data()
                    }
                }
            };
            grads.push(g);
        }
        self.sgd.step(self.model.params_mut(), &grads, lr)?;
        if self.model.params().iter().any(|p| p.data().iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("parameter after update".into()));
        }
        let batch = idx.len();
        self.ledger.record(step_cost(
            self.model.macs(batch),
            self.model.num_params() as u64,
            StepBits::fw_bw(fw, bw),
        )?);
        Ok(StepOutcome {
            loss,
            correct,
            batch,
        })
    }
}

struct ProbeSource<'a>(&'a mut Trainer);

impl AccuracySource for ProbeSource<'_> {
    fn probe(&mut self, bits: u32, epochs: usize) -> Result<Vec<f64>> {
        self.0.probe(bits, epochs)
    }
}

/// Runs the range test inside the first cycle of `trainer`'s run.
pub fn run_prt_on(trainer: &mut Trainer) -> Result<PrtResult> {
    let prt = trainer.cfg.prt;
    let first_cycle = trainer.sched.cycle_length();
    run_prt(&prt, &mut ProbeSource(trainer), first_cycle)
}

/// Range test, then training continues in the same run with the lower bound
/// from the test and `b_max` from the config.
pub fn prt_then_train(trainer: &mut Trainer) -> Result<PrtResult> {
    let result = run_prt_on(trainer)?;
    let (lo, hi) = resolve_bounds(&result, trainer.cfg.precision.b_max)?;
    trainer.set_fw_bounds(lo, hi)?;
    trainer.run()?;
    Ok(result)
}

/// Runs `cfg` to completion.
pub fn train(cfg: &TrainConfig) -> Result<(Model, MetricsLog, CostLedger)> {
    let mut t = Trainer::new(cfg.clone())?;
    t.run()?;
    Ok(t.into_parts())
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostSummary {
    pub accounting: String,
    pub ledger: CostLedger,
    pub total_bitops: u64,
    pub giga_bitops: f64,
}

/// Writes metrics, costs and the resolved config under `dir`.
/// Per-epoch BitOPs recovered from the cumulative columns of the log. A log
/// that starts mid-run (after a resume) leaves its first deltas empty.
pub fn cost_trace_csv(log: &MetricsLog) -> String {
    let mut out = String::from("epoch,fw_bits,bw_bits,epoch_bitops,epoch_forward_bitops,cumulative_bitops\n");
    let mut prev = None;
    for r in log.records() {
        let base = match (prev, r.epoch) {
            (Some(p), _) => Some(p),
            (None, 0) => Some((0, 0)),
            (None, _) => None,
        };
        let (total, fwd) = base.map_or((String::new(), String::new()), |(t, f): (u64, u64)| {
            ((r.cumulative_bitops - t).to_string(), (r.cumulative_forward_bitops - f).to_string())
        });
        out.push_str(&format!(
            "{},{},{},{total},{fwd},{}\n",
            r.epoch, r.fw_bits, r.bw_bits, r.cumulative_bitops
        ));
        prev = Some((r.cumulative_bitops, r.cumulative_forward_bitops));
    }
    out
}

pub fn write_run_outputs(dir: &Path, cfg: &TrainConfig, log: &MetricsLog, ledger: &CostLedger) -> Result<OutputPaths> {
    let paths = TrainConfig::output_paths(dir);
    log.write_jsonl(&paths.metrics_jsonl)?;
    log.write_csv(&paths.metrics_csv)?;
    let summary = CostSummary {
        accounting: crate::cost::ACCOUNTING_VERSION.to_string(),
        ledger: *ledger,
        total_bitops: ledger.total(),
        giga_bitops: ledger.giga_bitops(),
    };
    write_file(&paths.cost_json, serde_json::to_string_pretty(&summary)?.as_bytes())?;
    write_file(&paths.cost_csv, cost_trace_csv(log).as_bytes())?;
    write_file(&paths.resolved_config, cfg.to_toml().as_bytes())?;
    Ok(paths)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::data::DatasetSpec;
    use crate::harness::model::ModelSpec;
    use crate::schedule::{LrSchedule, Pattern};

    fn blobs_cfg(epochs: usize) -> TrainConfig {
        let mut cfg = TrainConfig {
            epochs,
            batch_size: 16,
            model: ModelSpec::Linear,
            data: DatasetSpec::GaussianBlobs {
                classes: 2,
                dim: 4,
                train_size: 200,
                test_size: 100,
                spread: 0.3,
                seed: 3,
            },
            lr: LrSchedule::constant(0.05, epochs).unwrap(),
            ..TrainConfig::default()
        };
        cfg.precision.num_cycles = 1;
        cfg
    }

    #[test]
    fn plan_follows_schedule_and_clamp() {
        let mut cfg = TrainConfig::default();
        cfg.precision.cpt_start_epoch = 7;
        let p = plan(&cfg).unwrap();
        let sched = cfg.fw_schedule().unwrap();
        for e in &p {
            let want = if e.epoch < 7 { 3 } else { sched.bits_at(e.epoch).unwrap() };
            assert_eq!(e.fw_bits, want);
            assert_eq!(e.bw_bits, 8);
        }
        assert_eq!(p[0].lr, 0.05);
        assert_eq!(p[35].lr, 0.0005);
    }

    #[test]
    fn ledger_matches_analytic_and_metrics() {
        let cfg = blobs_cfg(3);
        let mut t = Trainer::new(cfg.clone()).unwrap();
        t.run().unwrap();
        let (m, log, ledger) = t.into_parts();
        let analytic = analytic_ledger(&cfg, m.macs(1), m.num_params() as u64, 200).unwrap();
        assert_eq!(ledger, analytic);
        assert_eq!(log.last().unwrap().cumulative_bitops, ledger.total());
        assert_eq!(ledger.steps, 3 * 13);
    }

    #[test]
    fn cost_trace_sums_to_ledger() {
        let cfg = blobs_cfg(3);
        let (_, log, ledger) = train(&cfg).unwrap();
        let csv = cost_trace_csv(&log);
        let sum: u64 = csv.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse::<u64>().unwrap()).sum();
        assert_eq!(sum, ledger.total());
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn learns_separable_blobs_and_is_deterministic() {
        let mut cfg = blobs_cfg(5);
        cfg.precision.pattern = Pattern::Static;
        cfg.precision.b_max = 32;
        cfg.precision.bw_bits = 32;
        let (_, a, _) = train(&cfg).unwrap();
        let (_, b, _) = train(&cfg).unwrap();
        assert_eq!(a.to_jsonl(), b.to_jsonl());
        assert!(a.last().unwrap().train_accuracy > 95.0, "{:?}", a.last());
    }

    #[test]
    fn resume_matches_uninterrupted() {
        let cfg = blobs_cfg(4);
        let (_, full, full_ledger) = train(&cfg).unwrap();
        let mut first = Trainer::new(cfg.clone()).unwrap();
        first.run_until(2).unwrap();
        let bytes = first.checkpoint().to_bytes();
        let ckpt = Checkpoint::from_bytes(&bytes).unwrap();
        let mut second = Trainer::resume(cfg.clone(), first.data().clone(), &ckpt).unwrap();
        second.run().unwrap();
        assert_eq!(second.log().records(), &full.records()[2..]);
        assert_eq!(*second.ledger(), full_ledger);

        let mut other = cfg;
        other.seed = 1;
        assert!(Trainer::resume(other, first.data().clone(), &ckpt).is_err());
    }

    #[test]
    fn divergence_reports_and_dumps_checkpoint() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = blobs_cfg(3);
        cfg.lr = LrSchedule::constant(1e200, 3).unwrap();
        cfg.optimizer.momentum = 0.0;
        let mut t = Trainer::new(cfg).unwrap().with_output_dir(dir.path());
        match t.run() {
            Err(Error::Diverged { checkpoint, .. }) => {
                let path = checkpoint.expect("checkpoint written");
                Checkpoint::load(&path).unwrap();
            }
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn evaluate_rejects_empty_and_is_repeatable() {
        let cfg = blobs_cfg(1);
        let t = Trainer::new(cfg).unwrap();
        let data = &t.data().test;
        let a = evaluate(t.model(), data, 8).unwrap();
        assert_eq!(a, evaluate(t.model(), data, 8).unwrap());
        let empty = data.subset(&[]);
        assert!(matches!(evaluate(t.model(), &empty, 8), Err(Error::Data(_))));
    }

    #[test]
    fn probe_logs_fixed_bits() {
        let cfg = blobs_cfg(3);
        let mut t = Trainer::new(cfg).unwrap();
        let acc = t.probe(5, 2).unwrap();
        assert_eq!(acc.len(), 2 * 13);
        assert!(t.log().records().iter().all(|r| r.fw_bits == 5));
        assert_eq!(t.epoch(), 2);
    }
}

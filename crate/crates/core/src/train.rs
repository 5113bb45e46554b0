//! Training loop, evaluation and ablation runs.
//!
//! Each sample gets its own tape. Because both loss terms are batch means,
//! the batch gradient is the per-sample gradients summed in batch order and
//! divided by the batch size, so results do not depend on the worker count.

use std::fmt::Write as _;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::autodiff::Tape;
use crate::checkpoint::Checkpoint;
use crate::config::{RoutingMode, RunConfig};
use crate::data::{hflip, Dataset, DatasetRecord};
use crate::error::{MorError, Result};
use crate::model::{forward_sample, routing_loss, task_loss, total_loss, argmax, param_count, MorVit};
use crate::optim::{scheduled_lr, OptimizerState};
use crate::profile::{bench_throughput, count_flops};
use crate::rng::Rng;
use crate::routing::{Hooks, RoutingTrace};
use crate::tensor::{Real, Tensor};

/// Offset between the initialization seed and the data-order seed.
const DATA_SEED_SALT: u64 = 0x9e37_79b9_7f4a_7c15;

pub const METRICS_HEADER: &str = "epoch\ttrain_loss\ttrain_acc\tmean_exit_depth\tflops_per_image";

#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: u64,
    /// Mean total loss over the epoch's batches.
    pub train_loss: f64,
    /// Accuracy on the unaugmented training set after the epoch.
    pub train_acc: f64,
    pub mean_exit_depth: f64,
    pub flops_per_image: f64,
}

impl EpochMetrics {
    pub fn log_line(&self) -> String {
        format!(
            "{}\t{:.6}\t{:.4}\t{:.4}\t{:.0}",
            self.epoch, self.train_loss, self.train_acc, self.mean_exit_depth, self.flops_per_image
        )
    }
}

/// Model, optimizer and data-order RNG: everything needed to resume.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub config: RunConfig,
    pub model: MorVit<f64>,
    pub optimizer: OptimizerState,
    pub rng: Rng,
    /// Completed epochs.
    pub epoch: u64,
    pub threads: usize,
}

struct SampleGrad {
    loss: f64,
    grads: Vec<Vec<f64>>,
}

impl Trainer {
    pub fn new(config: RunConfig) -> Result<Self> {
        config.validate()?;
        let model = MorVit::new(config.model.clone())?;
        Ok(Self {
            optimizer: OptimizerState::from_train_config(&config.train),
            rng: Rng::seed_from(config.model.seed ^ DATA_SEED_SALT),
            model,
            config,
            epoch: 0,
            threads: 1,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        ck.config.validate()?;
        Ok(Self {
            config: ck.config.clone(),
            model: ck.model()?,
            optimizer: ck
                .optimizer
                .clone()
                .unwrap_or_else(|| OptimizerState::from_train_config(&ck.config.train)),
            rng: Rng::from_state(&ck.rng),
            epoch: ck.epoch,
            threads: 1,
        })
    }

    pub fn with_threads(mut self, threads: usize) -> Self {
        self.threads = threads.max(1);
        self
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.config, &self.model, self.epoch, Some(&self.optimizer), self.rng.state())
    }

    fn sample_grad(&self, image: &Tensor, label: usize) -> Result<SampleGrad> {
        let cfg = &self.model.config;
        let mut tape = Tape::new();
        let bound = self.model.params.bind(&mut tape, true);
        let out = forward_sample(&mut tape, &bound, cfg, image, &Hooks::default())?;
        let task = task_loss(&mut tape, &[out.logits], &[label])?;
        let signals: Vec<&[crate::autodiff::Var]> = vec![&out.recursion.gate_signals];
        let routing = routing_loss(&mut tape, &signals, 1.0 - cfg.beta)?;
        let total = total_loss(&mut tape, task, routing, cfg.lambda)?;
        tape.check_finite(total, "loss")?;
        tape.backward(total)?;
        let mut grads = Vec::new();
        let mut bad = false;
        bound.visit(|_, &v| {
            let g = tape.grad(v).map_or_else(|| vec![0.0; tape.value(v).len()], <[f64]>::to_vec);
            bad |= g.iter().any(|x| !x.is_finite());
            grads.push(g);
        });
        if bad {
            return Err(MorError::NonFinite("gradient".into()));
        }
        Ok(SampleGrad {
            loss: tape.value(total).item(),
            grads,
        })
    }

    /// One optimizer step on `batch`; returns the batch loss. `total_steps`
    /// sets the horizon of the learning-rate schedule.
    pub fn train_step(&mut self, batch: &[DatasetRecord], total_steps: u64) -> Result<f64> {
        if batch.is_empty() {
            return Err(MorError::Invalid("empty batch".into()));
        }
        let results: Vec<Result<SampleGrad>> = if self.threads > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.threads)
                .build()
                .map_err(|e| MorError::Invalid(format!("thread pool: {e}")))?;
            pool.install(|| batch.par_iter().map(|r| self.sample_grad(&r.image, r.label)).collect())
        } else {
            batch.iter().map(|r| self.sample_grad(&r.image, r.label)).collect()
        };
        let inv = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        let mut sum: Option<Vec<Vec<f64>>> = None;
        for r in results {
            let s = r?;
            loss += s.loss;
            match &mut sum {
                None => sum = Some(s.grads),
                Some(acc) => {
                    for (a, g) in acc.iter_mut().zip(&s.grads) {
                        for (x, y) in a.iter_mut().zip(g) {
                            *x += y;
                        }
                    }
                }
            }
        }
        let mut grads = sum.expect("non-empty batch");
        grads.iter_mut().flatten().for_each(|g| *g *= inv);

        let t = &self.config.train;
        let lr = scheduled_lr(t.lr, t.lr_schedule, self.optimizer.step, total_steps);
        let g: Vec<&[f64]> = grads.iter().map(Vec::as_slice).collect();
        self.optimizer.step_with_lr(&mut self.model.params.leaves_mut(), &g, lr)?;
        Ok(loss * inv)
    }

    /// Shuffles, augments and trains one epoch, then evaluates on the
    /// unaugmented training set.
    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochMetrics> {
        if data.is_empty() {
            return Err(MorError::Invalid("empty training set".into()));
        }
        data.check_geometry(&self.model.config)?;
        let t = self.config.train.clone();
        let per_epoch = data.len().div_ceil(t.batch_size) as u64;
        let total_steps = t.epochs as u64 * per_epoch;

        let mut order: Vec<usize> = (0..data.len()).collect();
        self.rng.shuffle(&mut order);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(t.batch_size) {
            let batch: Vec<DatasetRecord> = chunk
                .iter()
                .map(|&i| {
                    let r = &data.records[i];
                    let image = if self.rng.bernoulli(t.flip_prob) { hflip(&r.image) } else { r.image.clone() };
                    DatasetRecord { image, label: r.label }
                })
                .collect();
            loss_sum += self.train_step(&batch, total_steps)?;
            batches += 1;
        }
        self.epoch += 1;

        let eval = evaluate(&self.model, data, self.threads)?;
        Ok(EpochMetrics {
            epoch: self.epoch,
            train_loss: loss_sum / batches as f64,
            train_acc: eval.accuracy,
            mean_exit_depth: eval.mean_exit_depth,
            flops_per_image: eval.flops_per_image,
        })
    }

    /// Trains until `config.train.epochs` epochs are complete, saving the
    /// checkpoint to `ckpt` and appending a line to the metrics log `log`
    /// after every epoch. A fresh run (epoch 0) starts a new log.
    pub fn fit(&mut self, data: &Dataset, ckpt: &Path, log: &Path) -> Result<Vec<EpochMetrics>> {
        if self.epoch == 0 || !log.exists() {
            std::fs::write(log, format!("{METRICS_HEADER}\n")).map_err(|e| MorError::io(log, e))?;
        }
        let mut all = Vec::new();
        while self.epoch < self.config.train.epochs as u64 {
            let m = self.run_epoch(data)?;
            let mut f = std::fs::OpenOptions::new()
                .append(true)
                .open(log)
                .map_err(|e| MorError::io(log, e))?;
            writeln!(f, "{}", m.log_line()).map_err(|e| MorError::io(log, e))?;
            self.checkpoint().save(ckpt)?;
            all.push(m);
        }
        Ok(all)
    }
}

/// Metrics log written next to a checkpoint.
pub fn metrics_log_path(ckpt: &Path) -> std::path::PathBuf {
    let mut name = ckpt.file_name().unwrap_or_default().to_os_string();
    name.push(".metrics.tsv");
    ckpt.with_file_name(name)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub accuracy: f64,
    /// Mean exit depth over all patch tokens.
    pub mean_exit_depth: f64,
    /// `None` for classes absent from the data.
    pub per_class_accuracy: Vec<Option<f64>>,
    pub predictions: Vec<usize>,
    pub flops_per_image: f64,
    pub traces: Vec<RoutingTrace>,
}

pub fn evaluate<T: Real>(model: &MorVit<T>, data: &Dataset, threads: usize) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(MorError::Invalid("empty evaluation set".into()));
    }
    data.check_geometry(&model.config)?;
    let images: Vec<Tensor<T>> = data.records.iter().map(|r| r.image.cast()).collect();
    let preds = model.predict_parallel(&images, threads)?;
    let classes = model.config.num_classes;
    let mut hits = vec![0usize; classes];
    let mut seen = vec![0usize; classes];
    let mut depth_sum = 0.0;
    let mut flops = 0.0;
    let mut predictions = Vec::with_capacity(preds.len());
    let mut traces = Vec::with_capacity(preds.len());
    for (p, r) in preds.into_iter().zip(&data.records) {
        let c = argmax(&p.logits);
        seen[r.label] += 1;
        hits[r.label] += usize::from(c == r.label);
        depth_sum += p.trace.mean_depth();
        flops += count_flops(&model.config, &p.trace)?.total as f64;
        predictions.push(c);
        traces.push(p.trace);
    }
    let n = data.len() as f64;
    Ok(EvalReport {
        accuracy: hits.iter().sum::<usize>() as f64 / n,
        mean_exit_depth: depth_sum / n,
        per_class_accuracy: hits
            .iter()
            .zip(&seen)
            .map(|(&h, &s)| (s > 0).then(|| h as f64 / s as f64))
            .collect(),
        predictions,
        flops_per_image: flops / n,
        traces,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub variant: &'static str,
    pub dynamic_recursion: bool,
    pub shared: bool,
    pub top1: f64,
    pub params: u64,
    pub images_per_sec: f64,
}

/// `(name, routing mode override, share_params)`; `None` keeps the base mode.
pub const ABLATION_VARIANTS: [(&str, Option<RoutingMode>, bool); 4] = [
    ("full", None, true),
    ("static-depth", Some(RoutingMode::Static), true),
    ("unshared", None, false),
    ("plain", Some(RoutingMode::Static), false),
];

/// Trains each variant from the same seed and reports held-out accuracy,
/// parameter count and inference throughput.
pub fn run_ablation(base: &RunConfig, train: &Dataset, test: &Dataset, threads: usize) -> Result<Vec<AblationRow>> {
    let dynamic_base = if base.model.routing_mode == RoutingMode::Static {
        RoutingMode::ExpertChoice
    } else {
        base.model.routing_mode
    };
    let mut rows = Vec::new();
    for (name, mode, shared) in ABLATION_VARIANTS {
        let mut cfg = base.clone();
        cfg.model.routing_mode = mode.unwrap_or(dynamic_base);
        cfg.model.share_params = shared;
        let mut trainer = Trainer::new(cfg.clone())?.with_threads(threads);
        while trainer.epoch < cfg.train.epochs as u64 {
            trainer.run_epoch(train)?;
        }
        let eval = evaluate(&trainer.model, test, threads)?;
        let batch: Vec<Tensor> = test.records.iter().take(64).map(|r| r.image.clone()).collect();
        let tp = bench_throughput(&trainer.model, &batch, 3, threads)?;
        rows.push(AblationRow {
            variant: name,
            dynamic_recursion: cfg.model.routing_mode != RoutingMode::Static,
            shared,
            top1: eval.accuracy,
            params: param_count(&cfg.model),
            images_per_sec: tp.images_per_sec,
        });
    }
    Ok(rows)
}

pub fn format_ablation(rows: &[AblationRow]) -> String {
    let mut s = String::from("variant\tdynamic_recursion\tshared\ttop1\tparams\timages_per_sec\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{}\t{}\t{}\t{:.4}\t{}\t{:.1}",
            r.variant, r.dynamic_recursion, r.shared, r.top1, r.params, r.images_per_sec
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::preset;
    use crate::data::synth_mixed_difficulty;

    fn small() -> (RunConfig, Dataset) {
        let mut cfg = preset("tiny-desk").unwrap();
        cfg.train.batch_size = 4;
        cfg.train.epochs = 2;
        cfg.train.lr = 1e-2;
        let data = synth_mixed_difficulty(12, 4, &cfg.model, 0.5).unwrap();
        (cfg, data)
    }

    #[test]
    fn threads_do_not_change_results() {
        let (cfg, data) = small();
        let mut a = Trainer::new(cfg.clone()).unwrap();
        let mut b = Trainer::new(cfg).unwrap().with_threads(3);
        let ma = a.run_epoch(&data).unwrap();
        let mb = b.run_epoch(&data).unwrap();
        assert_eq!(ma, mb);
        assert_eq!(a.model.params, b.model.params);
    }

    #[test]
    fn resume_is_bit_identical() {
        let (cfg, data) = small();
        let mut straight = Trainer::new(cfg.clone()).unwrap();
        straight.run_epoch(&data).unwrap();
        let ck = Checkpoint::decode(&straight.checkpoint().encode(), Path::new("mem")).unwrap();
        straight.run_epoch(&data).unwrap();

        let mut resumed = Trainer::from_checkpoint(&ck).unwrap();
        resumed.run_epoch(&data).unwrap();
        assert_eq!(resumed.model.params, straight.model.params);
        assert_eq!(resumed.optimizer, straight.optimizer);
        assert_eq!(resumed.rng.state(), straight.rng.state());
    }

    #[test]
    fn loss_decreases_on_a_fixed_batch() {
        let (cfg, data) = small();
        let mut t = Trainer::new(cfg).unwrap();
        let batch = data.records[..4].to_vec();
        let first = t.train_step(&batch, 100).unwrap();
        let mut last = first;
        for _ in 0..30 {
            last = t.train_step(&batch, 100).unwrap();
        }
        assert!(last < first, "{first} -> {last}");
    }

    #[test]
    fn evaluate_rejects_wrong_geometry() {
        let (cfg, _) = small();
        let model = MorVit::<f64>::new(cfg.model).unwrap();
        let other = preset("desk").unwrap().model;
        let data = synth_mixed_difficulty(2, 0, &other, 0.25).unwrap();
        assert!(evaluate(&model, &data, 1).is_err());
    }

    #[test]
    fn fit_writes_log_and_checkpoint() {
        let (cfg, data) = small();
        let dir = tempfile::tempdir().unwrap();
        let ckpt = dir.path().join("run.ckpt");
        let log_path = metrics_log_path(&ckpt);
        assert_eq!(log_path, dir.path().join("run.ckpt.metrics.tsv"));
        let mut t = Trainer::new(cfg).unwrap();
        let metrics = t.fit(&data, &ckpt, &log_path).unwrap();
        assert_eq!(metrics.len(), 2);
        let log = std::fs::read_to_string(&log_path).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines[0], METRICS_HEADER);
        assert_eq!(lines.len(), 3);
        assert!(lines[1..].iter().all(|l| l.split('\t').count() == 5));
        let ck = Checkpoint::load(&ckpt).unwrap();
        assert_eq!(ck.epoch, 2);
    }
}

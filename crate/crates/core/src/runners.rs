//! Training and evaluation lifecycle: epoch-based (`runner_base`) and
//! iteration-based (`runner_iters`) loops, checkpoints and resume.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{build_dataset, Batch, DatasetSplit, DatasetSplits, UrlFetcher};
use crate::error::{Error, Result};
use crate::models::{load_checkpoint, model_for_run, save_checkpoint, CheckpointBundle, Model};
use crate::optim::{AdamW, AdamWConfig, LrFn, LrScheduler, SchedulerSpec};
use crate::registry::{Namespace, Registry};
use crate::tasks::{setup_task, write_eval_outputs, EvalResult, Task};

pub const CHECKPOINT_LATEST: &str = "checkpoint_latest.ckpt";
pub const CHECKPOINT_BEST: &str = "checkpoint_best.ckpt";
pub const LOG_FILE: &str = "log.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunnerKind {
    /// One pass over the train split per epoch.
    Base,
    /// Fixed-length inner epochs over an endlessly cycling loader.
    Iters,
}

/// Registry handle in the `runner` namespace.
pub struct RunnerEntry {
    pub kind: RunnerKind,
}

pub(crate) fn register_builtins(r: &mut Registry) -> Result<()> {
    r.register(Namespace::Runner, "runner_base", RunnerEntry { kind: RunnerKind::Base })?;
    r.register(Namespace::Runner, "runner_iters", RunnerEntry { kind: RunnerKind::Iters })?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunnerState {
    /// Next (inner) epoch to run.
    pub cur_epoch: usize,
    /// Optimizer steps taken so far.
    pub cur_iters: usize,
    pub best_agg: f64,
    pub best_epoch: i64,
    pub output_dir: PathBuf,
}

impl RunnerState {
    pub fn new(output_dir: PathBuf) -> Self {
        Self {
            cur_epoch: 0,
            cur_iters: 0,
            best_agg: f64::NEG_INFINITY,
            best_epoch: -1,
            output_dir,
        }
    }

    /// Records a validation score; true when it strictly beats the best so far.
    pub fn observe(&mut self, epoch: usize, agg: f64) -> bool {
        if agg > self.best_agg {
            self.best_agg = agg;
            self.best_epoch = epoch as i64;
            true
        } else {
            false
        }
    }
}

/// What to do after an epoch, as decided by an [`EpochHook`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    /// Stop without the final test evaluation, as if the process were interrupted.
    Stop,
}

/// Called after each (inner) epoch has been checkpointed.
pub type EpochHook = Box<dyn FnMut(usize, &Model) -> Result<Control>>;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunSummary {
    pub best_epoch: i64,
    pub best_agg: Option<f64>,
    /// Last validation result per split.
    pub val: BTreeMap<String, EvalResult>,
    /// Final test result per split; empty when interrupted.
    pub test: BTreeMap<String, EvalResult>,
    pub interrupted: bool,
}

impl RunSummary {
    /// `agg_metrics` reported for the run: mean over test splits, else the best validation score.
    pub fn agg_metrics(&self) -> Option<f64> {
        if self.test.is_empty() {
            self.best_agg
        } else {
            Some(self.test.values().map(|r| r.agg_metrics).sum::<f64>() / self.test.len() as f64)
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Aux {
    runner: RunnerState,
    kind: RunnerKind,
    optimizer_steps: u64,
    scheduler: Option<SchedulerSpec>,
    /// Shuffling and augmentation streams are derived from this seed and the epoch.
    rng_seed: u64,
}

pub struct Runner {
    cfg: RunConfig,
    task: Task,
    model: Model,
    datasets: BTreeMap<String, DatasetSplits>,
    kind: RunnerKind,
    state: RunnerState,
    optimizer: Option<AdamW>,
    scheduler: Option<(SchedulerSpec, LrFn)>,
    lr_fn: Option<LrFn>,
    hook: Option<EpochHook>,
    seed: u64,
}

/// Builds every dataset named in the config.
pub fn build_datasets(registry: &Registry, cfg: &RunConfig) -> Result<BTreeMap<String, DatasetSplits>> {
    cfg.dataset_names()
        .into_iter()
        .map(|name| {
            let splits = build_dataset(registry, &name, &cfg.dataset(&name), &UrlFetcher)?;
            Ok((name, splits))
        })
        .collect()
}

impl Runner {
    /// Task, model and datasets built from the config through the registry.
    pub fn from_config(registry: &Registry, cfg: RunConfig) -> Result<Self> {
        let task = setup_task(registry, &cfg)?;
        let model = model_for_run(registry, cfg.tree())?;
        let datasets = build_datasets(registry, &cfg)?;
        let kind = match cfg.run().get_str("runner") {
            Some(name) => registry.get::<RunnerEntry>(Namespace::Runner, name)?.kind,
            None if cfg.max_iters().is_some() => RunnerKind::Iters,
            None => RunnerKind::Base,
        };
        let lr_sched = cfg.run().get_str("lr_sched").unwrap_or("linear_warmup_cosine_lr").to_string();
        let lr_fn = registry.get::<LrScheduler>(Namespace::LrScheduler, &lr_sched)?.lr_at;
        let mut runner = Self::new(cfg, task, model, datasets, kind)?;
        runner.lr_fn = Some(lr_fn);
        Ok(runner)
    }

    pub fn new(
        cfg: RunConfig,
        task: Task,
        model: Model,
        datasets: BTreeMap<String, DatasetSplits>,
        kind: RunnerKind,
    ) -> Result<Self> {
        let run = cfg.run();
        let output_dir = PathBuf::from(run.get_str("output_dir").unwrap_or("output/run"));
        let seed = run.get_i64("seed").unwrap_or(0) as u64;
        match kind {
            RunnerKind::Base if cfg.max_epoch().is_none() => {
                return Err(Error::Validation(vec!["run.max_epoch: required by runner_base".into()]))
            }
            RunnerKind::Iters if cfg.max_iters().is_none() => {
                return Err(Error::Validation(vec!["run.max_iters: required by runner_iters".into()]))
            }
            _ => {}
        }
        Ok(Self {
            cfg,
            task,
            model,
            datasets,
            kind,
            state: RunnerState::new(output_dir),
            optimizer: None,
            scheduler: None,
            lr_fn: None,
            hook: None,
            seed,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn task(&self) -> &Task {
        &self.task
    }

    pub fn state(&self) -> &RunnerState {
        &self.state
    }

    pub fn output_dir(&self) -> &Path {
        &self.state.output_dir
    }

    pub fn datasets(&self) -> &BTreeMap<String, DatasetSplits> {
        &self.datasets
    }

    pub fn set_epoch_hook(&mut self, hook: EpochHook) {
        self.hook = Some(hook);
    }

    /// True once the optimizer has been created (on the first training step or resume).
    pub fn optimizer_built(&self) -> bool {
        self.optimizer.is_some()
    }

    fn splits_named(&self, key: &str) -> Vec<(String, &DatasetSplit)> {
        let names = self.cfg.run().get_str_list(key).unwrap_or_default();
        let many = self.datasets.len() > 1;
        let mut out = Vec::new();
        for (ds, splits) in &self.datasets {
            for n in &names {
                if let Some(s) = splits.get(n) {
                    let label = if many { format!("{ds}_{n}") } else { n.clone() };
                    out.push((label, s));
                }
            }
        }
        out
    }

    fn train_items(&self) -> Vec<(String, usize)> {
        self.splits_named("train_splits")
            .into_iter()
            .flat_map(|(label, s)| (0..s.len()).map(move |i| (label.clone(), i)))
            .collect()
    }

    fn batch_size(&self) -> usize {
        self.cfg.run().get_usize_or("batch_size_train", 16).max(1)
    }

    fn steps_per_epoch(&self) -> usize {
        match self.kind {
            RunnerKind::Base => self.train_items().len().div_ceil(self.batch_size()),
            RunnerKind::Iters => self.cfg.run().get_usize_or("iters_per_inner_epoch", 1).max(1),
        }
    }

    fn num_epochs(&self) -> usize {
        match self.kind {
            RunnerKind::Base => self.cfg.max_epoch().unwrap_or(0),
            RunnerKind::Iters => self.cfg.max_iters().unwrap_or(0).div_ceil(self.steps_per_epoch()),
        }
    }

    fn total_steps(&self) -> usize {
        match self.kind {
            RunnerKind::Base => self.num_epochs() * self.steps_per_epoch(),
            RunnerKind::Iters => self.cfg.max_iters().unwrap_or(0),
        }
    }

    fn ensure_optimizer(&mut self) -> Result<()> {
        if self.optimizer.is_none() {
            let run = self.cfg.run();
            let cfg = AdamWConfig {
                lr: run.get_f64_or("init_lr", 1e-4),
                weight_decay: run.get_f64_or("weight_decay", 0.05),
                beta1: run.get_f64_or("beta1", 0.9),
                beta2: run.get_f64_or("beta2", 0.999),
                eps: run.get_f64_or("eps", 1e-8),
            };
            self.optimizer = Some(AdamW::new(self.model.params(), cfg)?);
        }
        Ok(())
    }

    fn ensure_scheduler(&mut self) -> Result<()> {
        if self.scheduler.is_none() {
            let run = self.cfg.run();
            let spec = SchedulerSpec::from_run(&run, self.total_steps())?;
            let lr_fn = match self.lr_fn {
                Some(f) => f,
                None => crate::optim::scheduler_by_name(run.get_str("lr_sched").unwrap_or("linear_warmup_cosine_lr"))?,
            };
            self.scheduler = Some((spec, lr_fn));
        }
        Ok(())
    }

    /// Dataset order for a given (inner) epoch: Base shuffles per epoch, Iters
    /// shuffles per pass of the cycling loader.
    fn order_for_cycle(&self, cycle: usize, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(cycle as u64)));
        order
    }

    /// Item indices (into `train_items`) for a global step. Base walks one
    /// shuffled order per epoch (the last batch may be short). Iters reads a
    /// stream of shuffled passes, so every batch is full and a batch may
    /// straddle two passes.
    pub fn batch_indices(&self, global_step: usize) -> Vec<usize> {
        let n = self.train_items().len();
        if n == 0 {
            return Vec::new();
        }
        let bs = self.batch_size();
        match self.kind {
            RunnerKind::Base => {
                let spe = self.steps_per_epoch().max(1);
                let (epoch, pos) = (global_step / spe, global_step % spe);
                let order = self.order_for_cycle(epoch, n);
                order[(pos * bs).min(n)..((pos + 1) * bs).min(n)].to_vec()
            }
            RunnerKind::Iters => {
                let start = global_step * bs;
                let mut out = Vec::with_capacity(bs.min(n));
                let mut cached: Option<(usize, Vec<usize>)> = None;
                for p in start..start + bs.min(n) {
                    let cycle = p / n;
                    if cached.as_ref().map(|(c, _)| *c) != Some(cycle) {
                        cached = Some((cycle, self.order_for_cycle(cycle, n)));
                    }
                    out.push(cached.as_ref().expect("set above").1[p % n]);
                }
                out
            }
        }
    }

    fn load_batch(&self, global_step: usize) -> Result<Batch> {
        let items = self.train_items();
        let splits: BTreeMap<String, &DatasetSplit> = self.splits_named("train_splits").into_iter().collect();
        let samples = self
            .batch_indices(global_step)
            .into_iter()
            .map(|k| {
                let (label, i) = &items[k];
                let mut rng = ChaCha8Rng::seed_from_u64(
                    self.seed
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        .wrapping_add((global_step as u64) << 20)
                        .wrapping_add(k as u64),
                );
                splits[label].get_item_with_rng(*i, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        Batch::collate(samples)
    }

    fn log(&self, record: serde_json::Value) -> Result<()> {
        fs::create_dir_all(self.output_dir())?;
        let mut f = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(self.output_dir().join(LOG_FILE))?;
        writeln!(f, "{}", serde_json::to_string(&record)?)?;
        Ok(())
    }

    fn log_key(&self) -> &'static str {
        match self.kind {
            RunnerKind::Base => "epoch",
            RunnerKind::Iters => "iters",
        }
    }

    fn log_pos(&self, epoch: usize) -> usize {
        match self.kind {
            RunnerKind::Base => epoch,
            RunnerKind::Iters => self.state.cur_iters,
        }
    }

    fn bundle(&self) -> Result<CheckpointBundle> {
        let mut b = self.model.to_bundle(&self.cfg.tree().to_yaml())?;
        if let Some(opt) = &self.optimizer {
            b.optimizer = opt.export_state()?;
        }
        b.aux = serde_json::to_value(Aux {
            runner: self.state.clone(),
            kind: self.kind,
            optimizer_steps: self.optimizer.as_ref().map_or(0, AdamW::step_count),
            scheduler: self.scheduler.as_ref().map(|(s, _)| *s),
            rng_seed: self.seed,
        })?;
        Ok(b)
    }

    /// Restores weights, optimizer moments, scheduler and runner state.
    pub fn resume(&mut self, checkpoint: &Path) -> Result<()> {
        let bundle = load_checkpoint(checkpoint)?;
        self.model.apply_checkpoint(&bundle)?;
        let aux: Aux =
            serde_json::from_value(bundle.aux.clone()).map_err(|e| Error::CorruptCheckpoint(format!("runner state: {e}")))?;
        if aux.kind != self.kind {
            return Err(Error::CorruptCheckpoint(format!(
                "checkpoint was written by a {:?} runner, this is {:?}",
                aux.kind, self.kind
            )));
        }
        self.ensure_optimizer()?;
        if !bundle.optimizer.is_empty() {
            self.optimizer
                .as_mut()
                .expect("just built")
                .import_state(&bundle.optimizer, aux.optimizer_steps)?;
        }
        let output_dir = self.state.output_dir.clone();
        self.state = RunnerState { output_dir, ..aux.runner };
        self.seed = aux.rng_seed;
        Ok(())
    }

    fn evaluate_splits(&self, key: &str, epoch: usize, lr: Option<f64>) -> Result<BTreeMap<String, EvalResult>> {
        let mut out = BTreeMap::new();
        for (label, split) in self.splits_named(key) {
            let res = self.task.evaluate(&self.model, split)?;
            write_eval_outputs(self.output_dir(), &label, epoch, &res)?;
            let mut rec = serde_json::json!({
                "split": label,
                "metrics": res.metrics,
                "agg_metrics": res.agg_metrics,
                "lr": lr,
            });
            rec[self.log_key()] = self.log_pos(epoch).into();
            self.log(rec)?;
            out.insert(label, res);
        }
        Ok(out)
    }

    /// Evaluates the test splits (falling back to validation splits) with the current weights.
    pub fn evaluate_only(&mut self) -> Result<RunSummary> {
        let mut test = self.evaluate_splits("test_splits", 0, None)?;
        if test.is_empty() {
            test = self.evaluate_splits("valid_splits", 0, None)?;
        }
        Ok(RunSummary {
            best_epoch: -1,
            best_agg: None,
            val: BTreeMap::new(),
            test,
            interrupted: false,
        })
    }

    /// Runs the remaining (inner) epochs, then evaluates test splits with the best weights.
    pub fn train(&mut self) -> Result<RunSummary> {
        let evaluate_only = self.cfg.run().get_bool("evaluate").unwrap_or(false);
        if evaluate_only {
            return self.evaluate_only();
        }
        if self.train_items().is_empty() && self.num_epochs() > 0 {
            return Err(Error::Precondition("no training records in run.train_splits".into()));
        }
        let spe = self.steps_per_epoch();
        let total = self.total_steps();
        let mut val = BTreeMap::new();
        while self.state.cur_epoch < self.num_epochs() {
            let epoch = self.state.cur_epoch;
            let mut sums: BTreeMap<String, f64> = BTreeMap::new();
            let mut steps = 0usize;
            let mut lr = 0.0;
            for i in 0..spe {
                let global = epoch * spe + i;
                if global >= total {
                    break;
                }
                let batch = self.load_batch(global)?;
                let losses = self.task.train_step(&self.model, &batch)?;
                let value = losses.total_f64()?;
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss(global));
                }
                self.ensure_optimizer()?;
                self.ensure_scheduler()?;
                let (spec, lr_at) = self.scheduler.as_ref().expect("built above");
                lr = lr_at(spec, epoch, spe, i)?;
                let grads = losses.total.backward()?;
                let clip = self.cfg.run().get_f64_or("grad_clip", 0.0);
                let opt = self.optimizer.as_mut().expect("built above");
                opt.set_lr(lr);
                opt.step(&grads, clip)?;
                self.model.post_step()?;
                self.state.cur_iters = global + 1;
                *sums.entry("total".into()).or_default() += value;
                for (k, v) in losses.components {
                    *sums.entry(k).or_default() += v;
                }
                steps += 1;
            }
            let mut rec = serde_json::json!({
                "split": "train",
                "metrics": sums.iter().map(|(k, v)| (k.clone(), v / steps.max(1) as f64)).collect::<BTreeMap<_, _>>(),
                "lr": lr,
            });
            rec[self.log_key()] = self.log_pos(epoch).into();
            self.log(rec)?;

            val = self.evaluate_splits("valid_splits", epoch, Some(lr))?;
            self.state.cur_epoch = epoch + 1;
            let improved = if val.is_empty() {
                false
            } else {
                let agg = val.values().map(|r| r.agg_metrics).sum::<f64>() / val.len() as f64;
                self.state.observe(epoch, agg)
            };
            let bundle = self.bundle()?;
            save_checkpoint(&self.output_dir().join(CHECKPOINT_LATEST), &bundle)?;
            if improved {
                save_checkpoint(&self.output_dir().join(CHECKPOINT_BEST), &bundle)?;
            }
            if let Some(hook) = self.hook.as_mut() {
                if hook(epoch, &self.model)? == Control::Stop {
                    return Ok(self.summary(val, BTreeMap::new(), true));
                }
            }
        }

        let best = self.output_dir().join(CHECKPOINT_BEST);
        if self.state.best_epoch >= 0 && best.exists() {
            self.model.apply_checkpoint(&load_checkpoint(&best)?)?;
        } else if self.num_epochs() > 0 {
            log::warn!("no validation split improved; evaluating test splits with the latest weights");
        }
        let test_epoch = self.state.best_epoch.max(0) as usize;
        let test = self.evaluate_splits("test_splits", test_epoch, None)?;
        Ok(self.summary(val, test, false))
    }

    fn summary(&self, val: BTreeMap<String, EvalResult>, test: BTreeMap<String, EvalResult>, interrupted: bool) -> RunSummary {
        RunSummary {
            best_epoch: self.state.best_epoch,
            best_agg: (self.state.best_epoch >= 0).then_some(self.state.best_agg),
            val,
            test,
            interrupted,
        }
    }
}

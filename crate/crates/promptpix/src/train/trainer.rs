//! Batch assembly, the L1 training step, and the resumable training loop.
//!
//! Every random draw is keyed by `derive(cfg.seed, "step", step)`, so a
//! batch is a pure function of the config, the corpus, and the step index;
//! resuming from a checkpoint replays exactly the trajectory an
//! uninterrupted run would have produced.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array4, ArrayD, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adamw::AdamW;
use super::checkpoint::Checkpoint;
use crate::corpus::{Corpus, PromptBundle};
use crate::model::params::{Leaves, ParamId, ParamStore};
use crate::model::{BackboneConfig, Model};
use crate::ops::TaskKind;
use crate::seed::{derive, rng};
use crate::tensor::ops as t;
use crate::tensor::{Ctx, Grads, Scalar, Tape, Var};
use crate::{Error, Result};

/// Learning-rate schedule over the configured step budget.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Half-cosine from `lr` down to `lr * min_factor` at the final step.
    Cosine { min_factor: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub steps: u64,
    pub batch_size: usize,
    pub patch_size: usize,
    pub lr: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub schedule: LrSchedule,
    /// Per-task sampling probabilities aligned with the corpus task list;
    /// `None` means uniform. Must sum to 1.
    pub task_weights: Option<Vec<f64>>,
    /// Emit a progress-log line every this many steps (0 disables).
    pub log_every: u64,
    /// Save a checkpoint every this many steps (0 saves only the final one).
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            steps: 1000,
            batch_size: 8,
            patch_size: 64,
            lr: 1e-4,
            betas: (0.9, 0.99),
            weight_decay: 1e-4,
            schedule: LrSchedule::Constant,
            task_weights: None,
            log_every: 10,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps must be at least 1"));
        }
        if self.batch_size == 0 || self.patch_size == 0 {
            return Err(Error::config("batch_size and patch_size must be at least 1"));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        for (name, b) in [("beta1", self.betas.0), ("beta2", self.betas.1)] {
            if !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must be in [0, 1), got {b}")));
            }
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay must be non-negative"));
        }
        if let LrSchedule::Cosine { min_factor } = self.schedule {
            if !(0.0..=1.0).contains(&min_factor) {
                return Err(Error::config("cosine min_factor must be in [0, 1]"));
            }
        }
        if let Some(w) = &self.task_weights {
            if w.iter().any(|&x| !x.is_finite() || x < 0.0) {
                return Err(Error::config("task weights must be non-negative"));
            }
            let sum: f64 = w.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::config(format!("task weights must sum to 1, got {sum}")));
            }
        }
        Ok(())
    }
}

/// A corpus held fully in memory for batch sampling: bundle images plus a
/// per-task index. Sampling never touches the filesystem.
pub struct LoadedCorpus {
    pub tasks: Vec<TaskKind>,
    /// Bundle indices per task, aligned with `tasks`.
    pub by_task: Vec<Vec<usize>>,
    pub bundles: Vec<PromptBundle>,
    pub height: usize,
    pub width: usize,
}

impl LoadedCorpus {
    pub fn load(corpus: &Corpus) -> Result<LoadedCorpus> {
        let tasks: Vec<TaskKind> = corpus.manifest.header.tasks.iter().map(|s| s.kind).collect();
        let mut bundles = Vec::with_capacity(corpus.len());
        for i in 0..corpus.len() {
            bundles.push(corpus.load_bundle(i)?);
        }
        let by_task: Vec<Vec<usize>> = tasks.iter().map(|&k| corpus.by_task(k)).collect();
        for (k, idx) in tasks.iter().zip(&by_task) {
            if idx.is_empty() {
                return Err(Error::validation(format!("task {k} has no samples in the corpus")));
            }
        }
        let pool = &corpus.manifest.header.pool;
        Ok(LoadedCorpus { tasks, by_task, bundles, height: pool.height, width: pool.width })
    }
}

/// One assembled batch as NCHW tensors. `input`/`target` share crop
/// offsets, as do `prompt_src`/`prompt_tgt` (with an independent draw).
pub struct Batch {
    pub input: ArrayD<f32>,
    pub target: ArrayD<f32>,
    pub prompt_src: ArrayD<f32>,
    pub prompt_tgt: ArrayD<f32>,
    pub tasks: Vec<TaskKind>,
}

/// Index of the first cumulative weight exceeding a uniform draw.
pub fn pick_task(r: &mut ChaCha8Rng, cdf: &[f64]) -> usize {
    let u: f64 = r.gen();
    cdf.iter().position(|&c| u < c).unwrap_or(cdf.len() - 1)
}

fn cdf_of(weights: &[f64]) -> Vec<f64> {
    let mut acc = 0.0;
    let mut cdf: Vec<f64> = weights
        .iter()
        .map(|w| {
            acc += w;
            acc
        })
        .collect();
    if let Some(last) = cdf.last_mut() {
        *last = 1.0;
    }
    cdf
}

fn copy_crop(dst: &mut Array4<f32>, b: usize, src: &ndarray::Array3<f32>, oy: usize, ox: usize) {
    let p = dst.shape()[2];
    for y in 0..p {
        for x in 0..p {
            for c in 0..3 {
                dst[[b, c, y, x]] = src[[oy + y, ox + x, c]];
            }
        }
    }
}

/// Draws one batch: tasks per `weights`, a uniform sample within the task,
/// then aligned random crops. Deterministic given `step_seed`.
pub fn sample_batch(
    data: &LoadedCorpus,
    weights: &[f64],
    batch_size: usize,
    patch: usize,
    step_seed: u64,
) -> Result<Batch> {
    if patch > data.height || patch > data.width {
        return Err(Error::validation(format!(
            "patch size {patch} exceeds corpus images ({}x{})",
            data.height, data.width
        )));
    }
    if weights.len() != data.tasks.len() {
        return Err(Error::config(format!(
            "{} task weights for {} corpus tasks",
            weights.len(),
            data.tasks.len()
        )));
    }
    let cdf = cdf_of(weights);
    let mut r = rng(derive(step_seed, "batch", 0));
    let shape = (batch_size, 3, patch, patch);
    let mut input = Array4::zeros(shape);
    let mut target = Array4::zeros(shape);
    let mut prompt_src = Array4::zeros(shape);
    let mut prompt_tgt = Array4::zeros(shape);
    let mut tasks = Vec::with_capacity(batch_size);
    for b in 0..batch_size {
        let ti = pick_task(&mut r, &cdf);
        let members = &data.by_task[ti];
        let bundle = &data.bundles[members[r.gen_range(0..members.len())]];
        let oy = r.gen_range(0..=data.height - patch);
        let ox = r.gen_range(0..=data.width - patch);
        let py = r.gen_range(0..=data.height - patch);
        let px = r.gen_range(0..=data.width - patch);
        copy_crop(&mut input, b, bundle.input.data(), oy, ox);
        copy_crop(&mut target, b, bundle.target.data(), oy, ox);
        copy_crop(&mut prompt_src, b, bundle.prompt_src.data(), py, px);
        copy_crop(&mut prompt_tgt, b, bundle.prompt_tgt.data(), py, px);
        tasks.push(bundle.task);
    }
    Ok(Batch {
        input: input.into_dyn(),
        target: target.into_dyn(),
        prompt_src: prompt_src.into_dyn(),
        prompt_tgt: prompt_tgt.into_dyn(),
        tasks,
    })
}

/// Mean absolute error between prediction and target.
pub fn l1_loss<S: Scalar>(cx: &Ctx<S>, pred: &Var<S>, target: &Var<S>) -> Var<S> {
    t::mean_all(cx, &t::abs(cx, &t::sub(cx, pred, target)))
}

pub struct StepStats {
    pub loss: f64,
    /// Mean absolute error per task id present in the batch.
    pub per_task: BTreeMap<String, f64>,
}

fn scalar_of(v: &Var<f32>) -> f64 {
    v.value().iter().next().copied().unwrap_or(f32::NAN) as f64
}

/// Forward pass over a batch; returns the scalar loss and the elementwise
/// absolute residuals (for per-task reporting).
fn batch_loss(
    model: &Model<f32>,
    cx: &Ctx<f32>,
    lv: &Leaves<f32>,
    batch: &Batch,
) -> Result<(Var<f32>, Var<f32>)> {
    let input = cx.constant(batch.input.clone());
    let target = cx.constant(batch.target.clone());
    let latents = if model.cfg.n_pcab > 0 {
        let ps = cx.constant(batch.prompt_src.clone());
        let pt = cx.constant(batch.prompt_tgt.clone());
        Some(model.encode_prompt(cx, lv, &ps, &pt)?)
    } else {
        None
    };
    let pred = model.forward(cx, lv, &input, latents.as_ref())?;
    let diff = t::abs(cx, &t::sub(cx, &pred, &target));
    let loss = t::mean_all(cx, &diff);
    Ok((loss, diff))
}

fn per_task_means(diff: &ArrayD<f32>, tasks: &[TaskKind]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<TaskKind, (f64, usize)> = BTreeMap::new();
    for (b, &task) in tasks.iter().enumerate() {
        let view = diff.index_axis(Axis(0), b);
        let mean: f64 = view.iter().map(|&v| v as f64).sum::<f64>() / view.len() as f64;
        let e = acc.entry(task).or_insert((0.0, 0));
        e.0 += mean;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k.id().to_string(), s / n as f64)).collect()
}

fn collect_param_grads(
    store: &ParamStore<f32>,
    lv: &Leaves<f32>,
    mut grads: Grads<f32>,
) -> Vec<Option<ArrayD<f32>>> {
    (0..store.len())
        .map(|i| lv.var(ParamId(i)).node().and_then(|n| grads.take_node(n)))
        .collect()
}

/// One optimizer update on one batch. Fails with a numerical error before
/// touching any parameter if the loss is not finite.
pub fn train_step(
    model: &mut Model<f32>,
    opt: &mut AdamW,
    batch: &Batch,
    lr: f64,
) -> Result<StepStats> {
    let tape = Tape::new();
    let cx = Ctx::with_tape(&tape);
    let lv = model.store.leaves(&cx);
    let (loss, diff) = batch_loss(model, &cx, &lv, batch)?;
    let lval = scalar_of(&loss);
    if !lval.is_finite() {
        let bad = diff.value().iter().filter(|v| !v.is_finite()).count();
        return Err(Error::numerical(format!(
            "training loss is {lval}; {bad} of {} residual entries are non-finite \
             (inspect the learning rate and parameter health)",
            diff.value().len()
        )));
    }
    let per_task = per_task_means(diff.value(), &batch.tasks);
    let grads = tape.backward(&loss);
    let gvec = collect_param_grads(&model.store, &lv, grads);
    drop(lv);
    opt.apply(&mut model.store, &gvec, lr);
    Ok(StepStats { loss: lval, per_task })
}

#[derive(Serialize)]
struct LogLine<'a> {
    step: u64,
    loss: f64,
    lr: f64,
    per_task: &'a BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    val_loss: Option<f64>,
}

/// A training run in progress: model, optimizer state, and the step cursor.
pub struct Trainer {
    pub model: Model<f32>,
    pub opt: AdamW,
    pub cfg: TrainConfig,
    /// Steps completed so far; also the index of the next step to run.
    pub next_step: u64,
    data: LoadedCorpus,
    weights: Vec<f64>,
}

fn resolve_weights(cfg: &TrainConfig, tasks: &[TaskKind]) -> Result<Vec<f64>> {
    match &cfg.task_weights {
        None => Ok(vec![1.0 / tasks.len() as f64; tasks.len()]),
        Some(w) => {
            if w.len() != tasks.len() {
                return Err(Error::config(format!(
                    "{} task weights for {} corpus tasks",
                    w.len(),
                    tasks.len()
                )));
            }
            Ok(w.clone())
        }
    }
}

impl Trainer {
    pub fn new(backbone: &BackboneConfig, cfg: TrainConfig, corpus: &Corpus) -> Result<Trainer> {
        cfg.validate()?;
        let data = LoadedCorpus::load(corpus)?;
        let weights = resolve_weights(&cfg, &data.tasks)?;
        if cfg.patch_size > data.height || cfg.patch_size > data.width {
            return Err(Error::config(format!(
                "patch size {} exceeds corpus images ({}x{})",
                cfg.patch_size, data.height, data.width
            )));
        }
        let model = Model::build(backbone, derive(cfg.seed, "init", 0))?;
        let opt = AdamW::new(&model.store, cfg.betas, cfg.weight_decay);
        Ok(Trainer { model, opt, cfg, next_step: 0, data, weights })
    }

    /// Restores a run from a checkpoint; batches for the remaining steps are
    /// re-derived from `(seed, step)`, so the continuation is exact.
    pub fn resume(path: &Path, corpus: &Corpus) -> Result<Trainer> {
        let ck = Checkpoint::load(path)?;
        ck.train.validate()?;
        let model = ck.restore_model()?;
        // Moments are stored in checkpoint order; rebuild them in the (same,
        // but independently derived) store registration order by name.
        let mut by_name: std::collections::HashMap<&str, usize> = std::collections::HashMap::new();
        for (i, (name, _)) in ck.params.iter().enumerate() {
            by_name.insert(name.as_str(), i);
        }
        let mut m = Vec::with_capacity(ck.params.len());
        let mut v = Vec::with_capacity(ck.params.len());
        for (_, name, _) in model.store.iter() {
            let &i = by_name
                .get(name)
                .ok_or_else(|| Error::checkpoint(format!("missing parameter {name}")))?;
            m.push(ck.opt_m[i].clone());
            v.push(ck.opt_v[i].clone());
        }
        let opt = AdamW::from_state(ck.train.betas, ck.train.weight_decay, ck.opt_t, m, v);
        let data = LoadedCorpus::load(corpus)?;
        let weights = resolve_weights(&ck.train, &data.tasks)?;
        Ok(Trainer { model, opt, cfg: ck.train, next_step: ck.step, data, weights })
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        match self.cfg.schedule {
            LrSchedule::Constant => self.cfg.lr,
            LrSchedule::Cosine { min_factor } => {
                let t_ = step as f64 / self.cfg.steps.max(1) as f64;
                self.cfg.lr
                    * (min_factor
                        + (1.0 - min_factor) * 0.5 * (1.0 + (std::f64::consts::PI * t_).cos()))
            }
        }
    }

    pub fn step_once(&mut self) -> Result<StepStats> {
        let step = self.next_step;
        let seed = derive(self.cfg.seed, "step", step);
        let batch =
            sample_batch(&self.data, &self.weights, self.cfg.batch_size, self.cfg.patch_size, seed)?;
        let lr = self.lr_at(step);
        let stats = train_step(&mut self.model, &mut self.opt, &batch, lr)
            .map_err(|e| match e {
                Error::Numerical(m) => Error::Numerical(format!("step {step}: {m}")),
                other => other,
            })?;
        self.next_step += 1;
        Ok(stats)
    }

    /// No-grad loss on a fixed probe batch drawn with a reserved seed label,
    /// logged alongside checkpoints as a cheap progress signal.
    pub fn validation_loss(&self) -> Result<f64> {
        let seed = derive(self.cfg.seed, "val", 0);
        let batch =
            sample_batch(&self.data, &self.weights, self.cfg.batch_size, self.cfg.patch_size, seed)?;
        let cx = Ctx::no_grad();
        let lv = self.model.store.leaves(&cx);
        let (loss, _) = batch_loss(&self.model, &cx, &lv, &batch)?;
        Ok(scalar_of(&loss))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let (m, v) = self.opt.moments();
        Checkpoint {
            backbone: self.model.cfg.clone(),
            train: self.cfg.clone(),
            step: self.next_step,
            opt_t: self.opt.t,
            params: self
                .model
                .store
                .iter()
                .map(|(_, name, val)| (name.to_string(), val.clone()))
                .collect(),
            opt_m: m.to_vec(),
            opt_v: v.to_vec(),
        }
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    /// Runs (or continues) the loop to `cfg.steps`, appending JSONL progress
    /// lines and saving periodic checkpoints plus a final one, whose path is
    /// returned.
    pub fn run(&mut self, out_dir: &Path) -> Result<PathBuf> {
        fs::create_dir_all(out_dir)
            .map_err(Error::io(format!("creating {}", out_dir.display())))?;
        let log_path = out_dir.join("train-log.jsonl");
        let mut log = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(Error::io(format!("opening {}", log_path.display())))?;
        while self.next_step < self.cfg.steps {
            let step = self.next_step;
            let stats = self.step_once()?;
            let done = self.next_step == self.cfg.steps;
            let ckpt_due =
                self.cfg.checkpoint_every > 0 && self.next_step % self.cfg.checkpoint_every == 0;
            let log_due = self.cfg.log_every > 0 && step % self.cfg.log_every == 0;
            if log_due || ckpt_due || done {
                let val_loss =
                    if ckpt_due || done { Some(self.validation_loss()?) } else { None };
                let line =
                    LogLine { step, loss: stats.loss, lr: self.lr_at(step), per_task: &stats.per_task, val_loss };
                serde_json::to_writer(&mut log, &line)
                    .map_err(|e| Error::io("writing train log")(std::io::Error::other(e)))?;
                writeln!(log).map_err(Error::io("writing train log"))?;
                log.flush().map_err(Error::io("flushing train log"))?;
            }
            if ckpt_due && !done {
                let p = out_dir.join(format!("checkpoint-{:06}.ckpt", self.next_step));
                self.save_checkpoint(&p)?;
            }
        }
        let final_path = out_dir.join("checkpoint-final.ckpt");
        self.save_checkpoint(&final_path)?;
        Ok(final_path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{build_corpus, ScenePool};
    use crate::model::prompt::Fusion;
    use crate::ops::TaskSpec;
    use ndarray::{Array3, IxDyn};
    use tempfile::tempdir;

    fn tiny_backbone() -> BackboneConfig {
        BackboneConfig {
            channels: [4, 8, 16, 32],
            blocks: [1, 1, 1, 1],
            heads: [1, 2, 2, 4],
            window: 2,
            overlap: 0.5,
            ffn_expansion: 1.5,
            n_pcab: 1,
            refinement_blocks: 0,
            prompt_channels: [4, 8, 16],
            fusion: Fusion::Pca,
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            seed: 11,
            steps: 4,
            batch_size: 2,
            patch_size: 8,
            lr: 1e-3,
            log_every: 1,
            checkpoint_every: 0,
            ..TrainConfig::default()
        }
    }

    fn tiny_corpus(dir: &Path) -> Corpus {
        let pool = ScenePool::from_range(31, 0..4, 16, 16);
        let specs = [TaskSpec::new(TaskKind::GaussianNoise), TaskSpec::new(TaskKind::HistEq)];
        build_corpus(&specs, &pool, 2, 5, dir).unwrap();
        Corpus::open(dir).unwrap()
    }

    #[test]
    fn uniform_task_frequencies_land_within_four_sigma() {
        // 10^4 draws over 4 tasks: sd of a count is sqrt(n p (1-p)) ~ 43.3,
        // so each count must fall within 2500 +/- 173.2.
        let cdf = cdf_of(&[0.25; 4]);
        let mut r = rng(derive(123, "freq", 0));
        let mut counts = [0u32; 4];
        for _ in 0..10_000 {
            counts[pick_task(&mut r, &cdf)] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let dev = (c as f64 - 2500.0).abs();
            assert!(dev <= 173.2, "task {i} count {c} deviates {dev} > 4 sigma");
        }
        assert_eq!(counts.iter().sum::<u32>(), 10_000);
    }

    #[test]
    fn degenerate_weights_pick_only_the_weighted_task() {
        let cdf = cdf_of(&[1.0, 0.0]);
        let mut r = rng(7);
        for _ in 0..100 {
            assert_eq!(pick_task(&mut r, &cdf), 0);
        }
    }

    /// Synthetic corpus where every pixel value encodes its own coordinates
    /// and role, making crop alignment directly checkable.
    fn coded_corpus() -> LoadedCorpus {
        let (h, w) = (12, 10);
        let coded = |role: f32| {
            crate::img::Image::new(Array3::from_shape_fn((h, w, 3), |(y, x, c)| {
                role * 10_000.0 + (y * w + x) as f32 * 3.0 + c as f32
            }))
        };
        let spec = TaskSpec::new(TaskKind::GaussianNoise);
        let bundle = PromptBundle {
            task: TaskKind::GaussianNoise,
            seed: 0,
            input_scene: 0,
            prompt_scene: 1,
            params: spec.sample(0),
            input: coded(0.0),
            target: coded(1.0),
            prompt_src: coded(2.0),
            prompt_tgt: coded(3.0),
        };
        LoadedCorpus {
            tasks: vec![TaskKind::GaussianNoise],
            by_task: vec![vec![0]],
            bundles: vec![bundle],
            height: h,
            width: w,
        }
    }

    #[test]
    fn crops_are_aligned_within_each_pair() {
        let data = coded_corpus();
        let batch = sample_batch(&data, &[1.0], 6, 5, 99).unwrap();
        for b in 0..6 {
            for y in 0..5 {
                for x in 0..5 {
                    for c in 0..3 {
                        let i = batch.input[[b, c, y, x]];
                        let t_ = batch.target[[b, c, y, x]];
                        let ps = batch.prompt_src[[b, c, y, x]];
                        let pt = batch.prompt_tgt[[b, c, y, x]];
                        // Same offset within a pair: values differ only by
                        // the role code.
                        assert_eq!(t_ - i, 10_000.0, "input/target offsets diverge");
                        assert_eq!(pt - ps, 10_000.0, "prompt pair offsets diverge");
                    }
                }
            }
            // The batch item is a contiguous crop: pixel codes advance by 3
            // along x and by 3*W along y.
            let base = batch.input[[b, 0, 0, 0]];
            assert_eq!(batch.input[[b, 0, 0, 1]], base + 3.0);
            assert_eq!(batch.input[[b, 0, 1, 0]], base + 3.0 * data.width as f32);
        }
    }

    #[test]
    fn same_step_seed_reproduces_the_batch() {
        let dir = tempdir().unwrap();
        let corpus = tiny_corpus(dir.path());
        let data = LoadedCorpus::load(&corpus).unwrap();
        let w = [0.5, 0.5];
        let a = sample_batch(&data, &w, 3, 8, 42).unwrap();
        let b = sample_batch(&data, &w, 3, 8, 42).unwrap();
        assert_eq!(a.input, b.input);
        assert_eq!(a.target, b.target);
        assert_eq!(a.prompt_src, b.prompt_src);
        assert_eq!(a.prompt_tgt, b.prompt_tgt);
        assert_eq!(a.tasks, b.tasks);
        let c = sample_batch(&data, &w, 3, 8, 43).unwrap();
        assert!(c.input != a.input || c.tasks != a.tasks, "different seed, different batch");
    }

    #[test]
    fn oversized_patch_is_rejected() {
        let dir = tempdir().unwrap();
        let corpus = tiny_corpus(dir.path());
        let data = LoadedCorpus::load(&corpus).unwrap();
        assert!(sample_batch(&data, &[0.5, 0.5], 1, 17, 0).is_err());
    }

    #[test]
    fn l1_loss_matches_hand_values() {
        let cx = Ctx::<f32>::no_grad();
        let a = cx.constant(ArrayD::from_elem(IxDyn(&[2, 3]), 0.4f32));
        let same = l1_loss(&cx, &a, &a);
        assert_eq!(scalar_of(&same), 0.0, "identical tensors have zero loss");
        let b = cx.constant(ArrayD::from_elem(IxDyn(&[2, 3]), 0.5f32));
        let off = l1_loss(&cx, &a, &b);
        assert!((scalar_of(&off) - 0.1).abs() < 1e-6, "constant 0.1 offset means loss 0.1");
    }

    #[test]
    fn config_validation_rejects_bad_fields() {
        let mut c = TrainConfig::default();
        c.lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.betas = (0.9, 1.0);
        assert!(c.validate().is_err());
        let mut c = TrainConfig::default();
        c.task_weights = Some(vec![0.5, 0.4]);
        assert!(c.validate().is_err(), "weights must sum to 1");
        let mut c = TrainConfig::default();
        c.task_weights = Some(vec![-0.5, 1.5]);
        assert!(c.validate().is_err(), "weights must be non-negative");
        c.task_weights = Some(vec![0.25; 4]);
        c.validate().unwrap();
    }

    #[test]
    fn weight_length_must_match_corpus_tasks() {
        let dir = tempdir().unwrap();
        let corpus = tiny_corpus(dir.path());
        let mut cfg = tiny_cfg();
        cfg.task_weights = Some(vec![1.0]);
        let err = Trainer::new(&tiny_backbone(), cfg, &corpus).err().expect("must fail");
        assert!(err.to_string().contains("task weights"), "got: {err}");
    }

    #[test]
    fn schedules_follow_their_closed_forms() {
        let dir = tempdir().unwrap();
        let corpus = tiny_corpus(dir.path());
        let mut cfg = tiny_cfg();
        cfg.steps = 100;
        let tr = Trainer::new(&tiny_backbone(), cfg.clone(), &corpus).unwrap();
        assert_eq!(tr.lr_at(0), 1e-3);
        assert_eq!(tr.lr_at(99), 1e-3);

        cfg.schedule = LrSchedule::Cosine { min_factor: 0.1 };
        let tr = Trainer::new(&tiny_backbone(), cfg, &corpus).unwrap();
        assert!((tr.lr_at(0) - 1e-3).abs() < 1e-12);
        assert!((tr.lr_at(100) - 1e-4).abs() < 1e-12, "end of schedule hits lr * min_factor");
        assert!((tr.lr_at(50) - 1e-3 * 0.55).abs() < 1e-12, "midpoint is the average");
        let lrs: Vec<f64> = (0..=100).map(|s| tr.lr_at(s)).collect();
        assert!(lrs.windows(2).all(|p| p[1] <= p[0]), "cosine decays monotonically");
    }

    #[test]
    fn fifty_steps_on_a_fixed_batch_reduce_the_loss() {
        let dir = tempdir().unwrap();
        let corpus = tiny_corpus(dir.path());
        let data = LoadedCorpus::load(&corpus).unwrap();
        let batch = sample_batch(&data, &[0.5, 0.5], 2, 8, 7).unwrap();
        let mut model: Model<f32> = Model::build(&tiny_backbone(), 1).unwrap();
        let mut opt = AdamW::new(&model.store, (0.9, 0.99), 1e-4);
        let mut losses = Vec::new();
        for _ in 0..50 {
            let stats = train_step(&mut model, &mut opt, &batch, 1e-3).unwrap();
            assert!(stats.loss.is_finite() && stats.loss >= 0.0);
            losses.push(stats.loss);
        }
        let (first, last) = (losses[0], *losses.last().unwrap());
        assert!(
            last < first,
            "loss must descend on a fixed batch: first {first}, last {last}"
        );
    }

    #[test]
    fn per_task_losses_cover_exactly_the_batch_tasks() {
        let dir = tempdir().unwrap();
        let corpus = tiny_corpus(dir.path());
        let mut tr = Trainer::new(&tiny_backbone(), tiny_cfg(), &corpus).unwrap();
        let stats = tr.step_once().unwrap();
        assert!(!stats.per_task.is_empty());
        for (k, v) in &stats.per_task {
            assert!(k == "gaussian_noise" || k == "hist_eq", "unexpected task {k}");
            assert!(v.is_finite() && *v >= 0.0);
        }
        // The overall loss is a pixel-weighted mean; with equal-sized items
        // it must lie within the per-task range (up to f32 summation error:
        // the total is accumulated in f32, the per-task means in f64).
        let lo = stats.per_task.values().cloned().fold(f64::INFINITY, f64::min);
        let hi = stats.per_task.values().cloned().fold(0.0, f64::max);
        assert!(stats.loss >= lo - 1e-4 && stats.loss <= hi + 1e-4);
    }

    #[test]
    fn non_finite_loss_aborts_with_a_numerical_error() {
        let dir = tempdir().unwrap();
        let corpus = tiny_corpus(dir.path());
        let mut tr = Trainer::new(&tiny_backbone(), tiny_cfg(), &corpus).unwrap();
        let id = tr.model.store.id_of("stem.w").unwrap();
        let poisoned = tr.model.store.value(id).mapv(|_| f32::INFINITY);
        tr.model.store.set(id, poisoned);
        let err = tr.step_once().err().expect("step must fail");
        assert!(matches!(err, Error::Numerical(_)), "got: {err:?}");
        assert!(err.to_string().contains("step 0"), "diagnostics name the step: {err}");
    }

    #[test]
    fn conditioning_path_receives_gradient_within_two_steps() {
        // At init the cross-attention output projection is all zeros, so on
        // the first step it is the only prompt-side parameter with a
        // nonzero gradient; once it moves, gradient reaches the query/key/
        // value projections and the prompt encoder on the next step. First
        // moments track raw gradients (decay bypasses them), so they are
        // the clean observable. Patch 16 keeps the bottleneck at 2x2: with
        // a single prompt token the softmax is constant and the query
        // gradient would be structurally zero.
        let dir = tempdir().unwrap();
        let corpus = tiny_corpus(dir.path());
        let mut cfg = tiny_cfg();
        cfg.patch_size = 16;
        let mut tr = Trainer::new(&tiny_backbone(), cfg, &corpus).unwrap();
        let store = &tr.model.store;
        let proj = store.id_of("latent.block0.pca.proj.w").unwrap().0;
        let q = store.id_of("latent.block0.pca.q.w").unwrap().0;
        let stem = store.id_of("prompt_encoder.stem.w").unwrap().0;
        assert!(store.value(ParamId(proj)).iter().all(|&v| v == 0.0));

        tr.step_once().unwrap();
        let m = tr.opt.moments().0;
        assert!(m[proj].iter().any(|&v| v != 0.0), "fusion projection gradient is live");
        assert!(m[q].iter().all(|&v| v == 0.0), "zero-init projection gates the query grad");
        assert!(m[stem].iter().all(|&v| v == 0.0), "zero-init projection gates the encoder grad");
        assert!(
            tr.model.store.value(ParamId(proj)).iter().any(|&v| v != 0.0),
            "the projection moved off zero on step one"
        );

        tr.step_once().unwrap();
        let m = tr.opt.moments().0;
        assert!(m[q].iter().any(|&v| v != 0.0), "query projection learns once fusion is open");
        assert!(m[stem].iter().any(|&v| v != 0.0), "prompt encoder learns once fusion is open");
    }

    #[test]
    fn fresh_runs_are_bitwise_deterministic() {
        let dir = tempdir().unwrap();
        let corpus = tiny_corpus(dir.path());
        let mut a = Trainer::new(&tiny_backbone(), tiny_cfg(), &corpus).unwrap();
        let mut b = Trainer::new(&tiny_backbone(), tiny_cfg(), &corpus).unwrap();
        for _ in 0..3 {
            let la = a.step_once().unwrap().loss;
            let lb = b.step_once().unwrap().loss;
            assert_eq!(la.to_bits(), lb.to_bits(), "identical config implies identical trace");
        }
    }

    #[test]
    fn resume_matches_the_uninterrupted_trajectory_for_ten_steps() {
        let dir = tempdir().unwrap();
        let corpus = tiny_corpus(dir.path());
        let mut cfg = tiny_cfg();
        cfg.steps = 13;
        let mut full = Trainer::new(&tiny_backbone(), cfg.clone(), &corpus).unwrap();
        for _ in 0..3 {
            full.step_once().unwrap();
        }
        let ck_path = dir.path().join("mid.ckpt");
        full.save_checkpoint(&ck_path).unwrap();
        let mut resumed = Trainer::resume(&ck_path, &corpus).unwrap();
        assert_eq!(resumed.next_step, 3);
        for step in 0..10 {
            let lf = full.step_once().unwrap().loss;
            let lr_ = resumed.step_once().unwrap().loss;
            assert_eq!(lf.to_bits(), lr_.to_bits(), "trajectories diverge at resumed step {step}");
        }
        for (ida, name, va) in full.model.store.iter() {
            assert_eq!(va, resumed.model.store.value(ida), "parameter {name} diverged");
        }
    }

    #[test]
    fn run_writes_log_lines_and_monotone_checkpoints() {
        let dir = tempdir().unwrap();
        let cdir = dir.path().join("corpus");
        fs::create_dir_all(&cdir).unwrap();
        let corpus = tiny_corpus(&cdir);
        let out = dir.path().join("run");
        let mut cfg = tiny_cfg();
        cfg.steps = 5;
        cfg.checkpoint_every = 2;
        let mut tr = Trainer::new(&tiny_backbone(), cfg, &corpus).unwrap();
        let final_path = tr.run(&out).unwrap();
        assert!(final_path.ends_with("checkpoint-final.ckpt"));

        let log = fs::read_to_string(out.join("train-log.jsonl")).unwrap();
        let lines: Vec<&str> = log.lines().collect();
        assert_eq!(lines.len(), 5, "log_every=1 logs each step");
        let mut prev = -1i64;
        for line in &lines {
            let v: serde_json::Value = serde_json::from_str(line).unwrap();
            let step = v["step"].as_i64().unwrap();
            assert!(step > prev, "steps strictly increase in the log");
            prev = step;
            assert!(v["loss"].as_f64().unwrap().is_finite());
            assert!(v["lr"].as_f64().unwrap() > 0.0);
            assert!(v["per_task"].is_object());
        }
        let last: serde_json::Value = serde_json::from_str(lines.last().unwrap()).unwrap();
        assert!(last["val_loss"].as_f64().unwrap().is_finite(), "final line carries validation");

        // Saved sequence: step counters strictly increase across files.
        let mut saved: Vec<PathBuf> = fs::read_dir(&out)
            .unwrap()
            .map(|e| e.unwrap().path())
            .filter(|p| p.extension().is_some_and(|e| e == "ckpt"))
            .collect();
        saved.sort();
        assert_eq!(saved.len(), 3, "checkpoints at steps 2 and 4 plus the final one");
        let steps: Vec<u64> = saved.iter().map(|p| Checkpoint::load(p).unwrap().step).collect();
        assert!(steps.windows(2).all(|w| w[0] < w[1]), "saved steps {steps:?} must increase");
        assert_eq!(*steps.last().unwrap(), 5);

        // Re-running a finished trainer only rewrites the final checkpoint.
        let again = tr.run(&out).unwrap();
        assert_eq!(again, final_path);
    }
}

//! Behavioral evaluation protocols.
//!
//! Four protocols probe a trained model from the outside, all driven by a
//! corpus directory and a [`Infer`] implementation:
//!
//! * [`evaluate_task`] scores one task's slice under a single fixed prompt
//!   pair (the per-task quality table).
//! * [`prompt_sensitivity`] repeats that score across several prompt draws
//!   and reports the spread. A model whose output ignores the prompt pair
//!   has a spread of exactly zero.
//! * [`mismatch_suite`] applies restoration prompts to clean scenes, where
//!   the right response is to change nothing, and reports how well the
//!   output preserves the input.
//! * [`cross_domain_suite`] checks that the prompt pair, not the input
//!   alone, selects the task: each output must sit closest to the prompted
//!   task's target among all tasks' targets for the same scene.
//!
//! Every protocol is a pure function of (model, corpus, seed), so repeated
//! runs reproduce bit-identical numbers. Protocols that measure held-out
//! quality accept the training corpus' scene ids and refuse to run when any
//! scene appears on both sides.

use std::collections::BTreeSet;

use rand::Rng;

use crate::corpus::{realize_pair, Corpus};
use crate::eval::{l1_images, mae_images, psnr_images};
use crate::img::Image;
use crate::model::Model;
use crate::ops::{Category, Direction, TaskKind};
use crate::scene::SceneId;
use crate::seed::{derive, rng};
use crate::tensor::Scalar;
use crate::{Error, Result};

/// Anything that turns an input image plus an optional prompt pair into an
/// output image. Implemented by the network and by trivial baselines so the
/// protocol arithmetic can be pinned against closed-form oracles.
pub trait Infer {
    fn infer(&self, input: &Image, prompt: Option<(&Image, &Image)>) -> Result<Image>;
}

impl<S: Scalar> Infer for Model<S> {
    fn infer(&self, input: &Image, prompt: Option<(&Image, &Image)>) -> Result<Image> {
        Model::infer(self, input, prompt)
    }
}

/// Baseline that returns the input unchanged. Its protocol scores have
/// closed forms: preservation is exactly the PSNR cap, per-task quality is
/// the mean input-to-target score, and prompt spread is exactly zero.
pub struct CopyModel;

impl Infer for CopyModel {
    fn infer(&self, input: &Image, _prompt: Option<(&Image, &Image)>) -> Result<Image> {
        Ok(input.clone())
    }
}

/// Scalar metric a protocol reports.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    /// Peak signal-to-noise ratio in dB against peak 1.0; higher is better.
    Psnr,
    /// Mean absolute error in 8-bit units; lower is better.
    Mae,
}

impl Metric {
    /// Conventional choice per task family: edge maps are scored by MAE
    /// (near-binary images saturate PSNR), everything else by PSNR.
    pub fn for_task(task: TaskKind) -> Metric {
        match task.category() {
            Category::Edge => Metric::Mae,
            _ => Metric::Psnr,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Metric::Psnr => "psnr_db",
            Metric::Mae => "mae",
        }
    }

    pub fn apply(self, a: &Image, b: &Image) -> Result<f64> {
        match self {
            Metric::Psnr => psnr_images(a, b),
            Metric::Mae => mae_images(a, b),
        }
    }
}

/// Population mean and standard deviation. Bitwise-identical samples return
/// an exact zero spread rather than a rounding residue, so "the spread is
/// zero" is a statement about the model, not about float summation order.
pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    assert!(!xs.is_empty(), "mean_std needs at least one value");
    if xs.iter().all(|&x| x == xs[0]) {
        return (xs[0], 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Errors when any scene referenced by the evaluation corpus (as input or
/// prompt) also appears in the training scene set: a shared scene would
/// leak training content into a held-out measurement.
pub fn check_disjoint(eval_corpus: &Corpus, train_scenes: &BTreeSet<SceneId>) -> Result<()> {
    let shared: Vec<SceneId> = eval_corpus
        .scene_ids()
        .intersection(train_scenes)
        .copied()
        .collect();
    if shared.is_empty() {
        return Ok(());
    }
    let head: Vec<String> = shared.iter().take(5).map(|s| s.to_string()).collect();
    Err(Error::Contamination(format!(
        "{} scene(s) appear in both the training and evaluation corpora (first: {})",
        shared.len(),
        head.join(", ")
    )))
}

/// Mean score of one task's slice under a single fixed prompt pair.
#[derive(Clone, Debug)]
pub struct TaskScore {
    pub task: TaskKind,
    pub metric: Metric,
    pub value: f64,
    pub n_samples: usize,
}

/// Scores every sample of `task` in the corpus with the same prompt pair
/// and returns the mean. When `train_scenes` is given, the corpus must be
/// scene-disjoint from it.
pub fn evaluate_task(
    model: &dyn Infer,
    corpus: &Corpus,
    task: TaskKind,
    prompt: (&Image, &Image),
    metric: Metric,
    train_scenes: Option<&BTreeSet<SceneId>>,
) -> Result<TaskScore> {
    if let Some(train) = train_scenes {
        check_disjoint(corpus, train)?;
    }
    let slice = corpus.by_task(task);
    if slice.is_empty() {
        return Err(Error::validation(format!(
            "evaluation corpus has no `{}` samples",
            task.id()
        )));
    }
    let mut total = 0.0;
    for &i in &slice {
        let bundle = corpus.load_bundle(i)?;
        let out = model.infer(&bundle.input, Some(prompt))?;
        total += metric.apply(&out, &bundle.target)?;
    }
    Ok(TaskScore {
        task,
        metric,
        value: total / slice.len() as f64,
        n_samples: slice.len(),
    })
}

/// Spread of one task's score across prompt draws.
#[derive(Clone, Debug)]
pub struct Sensitivity {
    pub task: TaskKind,
    pub metric: Metric,
    /// Slice-mean score under each drawn prompt pair.
    pub per_prompt: Vec<f64>,
    pub mean: f64,
    /// Population standard deviation over the prompt draws. Exactly zero
    /// when every draw produced bit-identical scores.
    pub std: f64,
}

/// Scores the full task slice once per drawn prompt pair and reports the
/// spread. Prompt pairs are drawn without replacement from the task's own
/// bundles, so each draw is a legitimate demonstration of the task.
pub fn prompt_sensitivity(
    model: &dyn Infer,
    corpus: &Corpus,
    task: TaskKind,
    n_prompts: usize,
    prompt_seed: u64,
    metric: Metric,
    train_scenes: Option<&BTreeSet<SceneId>>,
) -> Result<Sensitivity> {
    if n_prompts < 2 {
        return Err(Error::validation(format!(
            "prompt sensitivity needs at least 2 prompt draws, got {n_prompts}"
        )));
    }
    if let Some(train) = train_scenes {
        check_disjoint(corpus, train)?;
    }
    let slice = corpus.by_task(task);
    if slice.len() < n_prompts {
        return Err(Error::validation(format!(
            "cannot draw {n_prompts} distinct prompts from {} `{}` samples",
            slice.len(),
            task.id()
        )));
    }
    let mut r = rng(derive(prompt_seed, "prompt-draw", 0));
    let picks = rand::seq::index::sample(&mut r, slice.len(), n_prompts);
    let mut per_prompt = Vec::with_capacity(n_prompts);
    for pi in picks.iter() {
        let b = corpus.load_bundle(slice[pi])?;
        let score = evaluate_task(
            model,
            corpus,
            task,
            (&b.prompt_src, &b.prompt_tgt),
            metric,
            None,
        )?;
        per_prompt.push(score.value);
    }
    let (mean, std) = mean_std(&per_prompt);
    Ok(Sensitivity {
        task,
        metric,
        per_prompt,
        mean,
        std,
    })
}

/// One row of the mismatch suite: a restoration prompt applied to inputs
/// that do not exhibit the degradation.
#[derive(Clone, Debug)]
pub struct MismatchRow {
    pub prompt_task: TaskKind,
    /// Mean PSNR between output and input. A model that correctly treats
    /// the mismatched prompt as "nothing to fix" preserves the input; the
    /// copy baseline scores exactly the PSNR cap.
    pub preservation_db: f64,
    pub n_inputs: usize,
}

/// Applies each restoration task's prompt to clean scene renders and scores
/// how well outputs preserve their inputs. A clean image has nothing to
/// restore, so the ideal response is the identity.
pub fn mismatch_suite(
    model: &dyn Infer,
    corpus: &Corpus,
    n_inputs: usize,
    suite_seed: u64,
) -> Result<Vec<MismatchRow>> {
    let pool = &corpus.manifest.header.pool;
    if n_inputs == 0 || n_inputs > pool.len() {
        return Err(Error::validation(format!(
            "mismatch suite needs between 1 and {} clean inputs, got {n_inputs}",
            pool.len()
        )));
    }
    let tasks: Vec<TaskKind> = corpus
        .manifest
        .header
        .tasks
        .iter()
        .map(|s| s.kind)
        .filter(|k| k.direction() == Direction::DegradeInput)
        .collect();
    if tasks.is_empty() {
        return Err(Error::validation(
            "mismatch suite needs at least one restoration task in the corpus",
        ));
    }
    let mut r = rng(derive(suite_seed, "mismatch", 0));
    let inputs: Vec<Image> = rand::seq::index::sample(&mut r, pool.len(), n_inputs)
        .iter()
        .map(|i| pool.render(i))
        .collect();
    let mut rows = Vec::with_capacity(tasks.len());
    for task in tasks {
        let slice = corpus.by_task(task);
        if slice.is_empty() {
            return Err(Error::validation(format!(
                "evaluation corpus has no `{}` samples",
                task.id()
            )));
        }
        let b = corpus.load_bundle(slice[r.gen_range(0..slice.len())])?;
        let mut total = 0.0;
        for input in &inputs {
            let out = model.infer(input, Some((&b.prompt_src, &b.prompt_tgt)))?;
            total += psnr_images(&out, input)?;
        }
        rows.push(MismatchRow {
            prompt_task: task,
            preservation_db: total / inputs.len() as f64,
            n_inputs: inputs.len(),
        });
    }
    Ok(rows)
}

/// One steering case: a corpus sample's output scored against every task's
/// target for the same scene.
#[derive(Clone, Debug)]
pub struct SteeringCase {
    pub task: TaskKind,
    /// Corpus sample index the case was built from.
    pub sample: usize,
    /// Mean absolute distance from the output to each candidate task's
    /// target, in corpus task order.
    pub distances: Vec<f64>,
    /// Whether the prompted task's target is (weakly) the closest. Exact
    /// ties count as hits: restoration tasks share the clean scene as their
    /// target, so a perfect restoration ties all of them.
    pub hit: bool,
}

/// Outcome of the steering suite.
#[derive(Clone, Debug)]
pub struct Steering {
    /// Candidate tasks, in corpus header order.
    pub tasks: Vec<TaskKind>,
    pub cases: Vec<SteeringCase>,
    /// Fraction of cases whose output sits closest to the prompted task's
    /// target.
    pub accuracy: f64,
    /// Expected accuracy if the prompted-task label were drawn uniformly at
    /// random per case: the chance floor a prompt-blind model is held to.
    /// Close to 1/k, inflated slightly by exact target ties.
    pub random_label_floor: f64,
}

/// Checks that the prompt pair steers the output toward its own task. For
/// every corpus sample, the model's output is compared by mean absolute
/// distance against each task's target realized on the same scene; the case
/// is a hit when the prompted task's target is the closest.
pub fn cross_domain_suite(
    model: &dyn Infer,
    corpus: &Corpus,
    suite_seed: u64,
    train_scenes: Option<&BTreeSet<SceneId>>,
) -> Result<Steering> {
    if let Some(train) = train_scenes {
        check_disjoint(corpus, train)?;
    }
    let specs = &corpus.manifest.header.tasks;
    if specs.len() < 2 {
        return Err(Error::validation(
            "steering needs at least 2 tasks in the corpus",
        ));
    }
    let tasks: Vec<TaskKind> = specs.iter().map(|s| s.kind).collect();
    let k = tasks.len() as u64;
    let pool = &corpus.manifest.header.pool;
    let mut cases = Vec::new();
    let mut case_no: u64 = 0;
    for (t_idx, &task) in tasks.iter().enumerate() {
        for i in corpus.by_task(task) {
            let b = corpus.load_bundle(i)?;
            let scene = pool.render_id(b.input_scene);
            let out = model.infer(&b.input, Some((&b.prompt_src, &b.prompt_tgt)))?;
            // The prompted task's target comes from the bundle itself (its
            // stochastic draw is the one the prompt demonstrates); the
            // alternatives are fresh parameter draws applied to the same
            // scene, one per competing task.
            let mut distances = Vec::with_capacity(tasks.len());
            for (u_idx, spec) in specs.iter().enumerate() {
                let target = if u_idx == t_idx {
                    b.target.clone()
                } else {
                    let slot = case_no * k + u_idx as u64;
                    let params = spec.sample(derive(suite_seed, "alt-params", slot));
                    realize_pair(&params, &scene, derive(suite_seed, "alt-noise", slot))?.1
                };
                distances.push(l1_images(&out, &target)?);
            }
            let own = distances[t_idx];
            let hit = distances.iter().all(|&d| own <= d);
            cases.push(SteeringCase {
                task,
                sample: i,
                distances,
                hit,
            });
            case_no += 1;
        }
    }
    if cases.is_empty() {
        return Err(Error::validation("steering found no samples to score"));
    }
    let accuracy = cases.iter().filter(|c| c.hit).count() as f64 / cases.len() as f64;
    let random_label_floor = cases
        .iter()
        .map(|c| {
            let min = c.distances.iter().cloned().fold(f64::INFINITY, f64::min);
            let weakly_closest = c.distances.iter().filter(|&&d| d == min).count();
            weakly_closest as f64 / c.distances.len() as f64
        })
        .sum::<f64>()
        / cases.len() as f64;
    Ok(Steering {
        tasks,
        cases,
        accuracy,
        random_label_floor,
    })
}

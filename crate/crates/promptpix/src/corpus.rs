//! Prompt-bundle corpus: deterministic bundle construction, the on-disk
//! image layout, and the line-delimited manifest that regenerates it.
//!
//! Every sample is pinned by a seed derived from `(global seed, task id,
//! per-task index)`, so a single sample can be regenerated in isolation and
//! must match the full build bit for bit. The manifest records the sampled
//! parameters and scene ids per sample, so regeneration never re-draws them.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader};
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::img::Image;
use crate::ops::{apply, Direction, TaskKind, TaskParams, TaskSpec};
use crate::scene::{self, SceneId};
use crate::seed::{derive, rng};
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.jsonl";

/// Procedural base-scene inventory: scene `ids[i]` rendered at
/// `height`x`width` from the pool seed. Serialized into the manifest header
/// so a corpus regenerates without any external image files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenePool {
    pub seed: u64,
    pub ids: Vec<SceneId>,
    pub height: usize,
    pub width: usize,
}

impl ScenePool {
    pub fn new(seed: u64, ids: Vec<SceneId>, height: usize, width: usize) -> ScenePool {
        ScenePool { seed, ids, height, width }
    }

    pub fn from_range(seed: u64, ids: Range<SceneId>, height: usize, width: usize) -> ScenePool {
        ScenePool::new(seed, ids.collect(), height, width)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn render(&self, idx: usize) -> Image {
        self.render_id(self.ids[idx])
    }

    pub fn render_id(&self, id: SceneId) -> Image {
        scene::render(self.seed, id, self.height, self.width)
    }
}

/// One training/evaluation sample: the task pair plus the visual prompt
/// pair that tells the model which task to perform. Prompt and input pairs
/// share the sampled parameters but come from distinct scenes and use
/// independent realization seeds.
#[derive(Clone, Debug)]
pub struct PromptBundle {
    pub task: TaskKind,
    pub seed: u64,
    pub input_scene: SceneId,
    pub prompt_scene: SceneId,
    pub params: TaskParams,
    pub input: Image,
    pub target: Image,
    pub prompt_src: Image,
    pub prompt_tgt: Image,
}

/// Applies the operator to one scene and orients the result into a
/// (source, target) pair according to the task's direction.
pub fn realize_pair(params: &TaskParams, scene_img: &Image, seed_: u64) -> Result<(Image, Image)> {
    let out = apply(params, scene_img, Some(seed_))?;
    Ok(match params.kind().direction() {
        Direction::DegradeInput => (out, scene_img.clone()),
        Direction::SynthesizeTarget => (scene_img.clone(), out),
    })
}

pub fn make_prompt_bundle(spec: &TaskSpec, pool: &ScenePool, seed_: u64) -> Result<PromptBundle> {
    if pool.len() < 2 {
        return Err(Error::InsufficientPool { need: 2, have: pool.len() });
    }
    let mut r = rng(derive(seed_, "scenes", 0));
    let input_idx = r.gen_range(0..pool.len());
    let mut prompt_idx = r.gen_range(0..pool.len() - 1);
    if prompt_idx >= input_idx {
        prompt_idx += 1;
    }
    let params = spec.sample(derive(seed_, "params", 0));
    let (input, target) = realize_pair(&params, &pool.render(input_idx), derive(seed_, "realize", 0))?;
    let (prompt_src, prompt_tgt) =
        realize_pair(&params, &pool.render(prompt_idx), derive(seed_, "realize", 1))?;
    Ok(PromptBundle {
        task: spec.kind,
        seed: seed_,
        input_scene: pool.ids[input_idx],
        prompt_scene: pool.ids[prompt_idx],
        params,
        input,
        target,
        prompt_src,
        prompt_tgt,
    })
}

/// First line of the manifest: everything needed to rebuild the corpus.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub version: u32,
    pub global_seed: u64,
    pub n_per_task: usize,
    pub pool: ScenePool,
    pub tasks: Vec<TaskSpec>,
}

/// One manifest line per sample. The task id lives in the `params` tag;
/// `seed` is `derive(global_seed, task id, index)`, recorded so a sample
/// regenerates without rerunning the build loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub seed: u64,
    pub input_scene: SceneId,
    pub prompt_scene: SceneId,
    pub params: TaskParams,
}

impl SampleRecord {
    pub fn task(&self) -> TaskKind {
        self.params.kind()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusManifest {
    pub header: ManifestHeader,
    pub samples: Vec<SampleRecord>,
}

impl CorpusManifest {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let ctx = || format!("writing manifest {}", path.display());
        let mut out = Vec::new();
        serde_json::to_writer(&mut out, &self.header).map_err(|e| Error::config(e.to_string()))?;
        out.push(b'\n');
        for s in &self.samples {
            serde_json::to_writer(&mut out, s).map_err(|e| Error::config(e.to_string()))?;
            out.push(b'\n');
        }
        let tmp = path.with_extension("jsonl.tmp");
        fs::write(&tmp, &out).map_err(Error::io(ctx()))?;
        fs::rename(&tmp, path).map_err(Error::io(ctx()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<CorpusManifest> {
        let file = fs::File::open(path)
            .map_err(Error::io(format!("opening manifest {}", path.display())))?;
        let mut lines = BufReader::new(file).lines();
        let head_line = lines
            .next()
            .ok_or_else(|| Error::config("empty manifest"))?
            .map_err(Error::io("reading manifest"))?;
        let header: ManifestHeader = serde_json::from_str(&head_line)
            .map_err(|e| Error::config(format!("bad manifest header: {e}")))?;
        if header.version != MANIFEST_VERSION {
            return Err(Error::config(format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                header.version
            )));
        }
        let mut samples = Vec::new();
        for line in lines {
            let line = line.map_err(Error::io("reading manifest"))?;
            if line.trim().is_empty() {
                continue;
            }
            samples.push(
                serde_json::from_str(&line)
                    .map_err(|e| Error::config(format!("bad manifest record: {e}")))?,
            );
        }
        Ok(CorpusManifest { header, samples })
    }
}

pub const BUNDLE_ROLES: [&str; 4] = ["input", "target", "prompt_src", "prompt_tgt"];

/// Path of one bundle image under the corpus directory.
pub fn image_path(dir: &Path, task: TaskKind, index: usize, role: &str) -> PathBuf {
    dir.join("images").join(task.id()).join(format!("{index:05}.{role}.png"))
}

fn write_bundle(dir: &Path, bundle: &PromptBundle, index: usize) -> Result<()> {
    let task_dir = dir.join("images").join(bundle.task.id());
    fs::create_dir_all(&task_dir)
        .map_err(Error::io(format!("creating {}", task_dir.display())))?;
    for (role, img) in BUNDLE_ROLES.iter().zip([
        &bundle.input,
        &bundle.target,
        &bundle.prompt_src,
        &bundle.prompt_tgt,
    ]) {
        img.save_png(&image_path(dir, bundle.task, index, role))?;
    }
    Ok(())
}

/// Builds the corpus on disk: one bundle per (task, index) with seed
/// `derive(global_seed, task id, index)`, plus the manifest.
pub fn build_corpus(
    specs: &[TaskSpec],
    pool: &ScenePool,
    n_per_task: usize,
    global_seed: u64,
    dir: &Path,
) -> Result<CorpusManifest> {
    if n_per_task == 0 {
        return Err(Error::validation("n_per_task must be at least 1"));
    }
    if specs.is_empty() {
        return Err(Error::validation("at least one task spec is required"));
    }
    let mut seen = BTreeSet::new();
    for spec in specs {
        if !seen.insert(spec.kind) {
            return Err(Error::validation(format!("duplicate task {} in corpus", spec.kind)));
        }
    }
    let mut samples = Vec::with_capacity(specs.len() * n_per_task);
    for spec in specs {
        for index in 0..n_per_task {
            let sample_seed = derive(global_seed, spec.kind.id(), index as u64);
            let bundle = make_prompt_bundle(spec, pool, sample_seed)?;
            write_bundle(dir, &bundle, index)?;
            samples.push(SampleRecord {
                index,
                seed: sample_seed,
                input_scene: bundle.input_scene,
                prompt_scene: bundle.prompt_scene,
                params: bundle.params,
            });
        }
    }
    let manifest = CorpusManifest {
        header: ManifestHeader {
            version: MANIFEST_VERSION,
            global_seed,
            n_per_task,
            pool: pool.clone(),
            tasks: specs.to_vec(),
        },
        samples,
    };
    manifest.save(&dir.join(MANIFEST_FILE))?;
    Ok(manifest)
}

/// Rebuilds one sample from its manifest record alone: scenes come from the
/// recorded ids, parameters from the record, realization seeds from the
/// recorded sample seed. Must match the full build bit for bit.
pub fn regenerate_sample(pool: &ScenePool, record: &SampleRecord) -> Result<PromptBundle> {
    let (input, target) = realize_pair(
        &record.params,
        &pool.render_id(record.input_scene),
        derive(record.seed, "realize", 0),
    )?;
    let (prompt_src, prompt_tgt) = realize_pair(
        &record.params,
        &pool.render_id(record.prompt_scene),
        derive(record.seed, "realize", 1),
    )?;
    Ok(PromptBundle {
        task: record.task(),
        seed: record.seed,
        input_scene: record.input_scene,
        prompt_scene: record.prompt_scene,
        params: record.params.clone(),
        input,
        target,
        prompt_src,
        prompt_tgt,
    })
}

/// A corpus directory opened for reading: manifest plus lazy image access.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub dir: PathBuf,
    pub manifest: CorpusManifest,
}

impl Corpus {
    pub fn open(dir: &Path) -> Result<Corpus> {
        let manifest = CorpusManifest::load(&dir.join(MANIFEST_FILE))?;
        Ok(Corpus { dir: dir.to_path_buf(), manifest })
    }

    pub fn len(&self) -> usize {
        self.manifest.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.is_empty()
    }

    /// Loads the four images of sample `i` from disk.
    pub fn load_bundle(&self, i: usize) -> Result<PromptBundle> {
        let record = &self.manifest.samples[i];
        let task = record.task();
        let mut imgs = Vec::with_capacity(4);
        for role in BUNDLE_ROLES {
            imgs.push(Image::load_png(&image_path(&self.dir, task, record.index, role))?);
        }
        let prompt_tgt = imgs.pop().unwrap();
        let prompt_src = imgs.pop().unwrap();
        let target = imgs.pop().unwrap();
        let input = imgs.pop().unwrap();
        Ok(PromptBundle {
            task,
            seed: record.seed,
            input_scene: record.input_scene,
            prompt_scene: record.prompt_scene,
            params: record.params.clone(),
            input,
            target,
            prompt_src,
            prompt_tgt,
        })
    }

    /// Rebuilds sample `i` from the manifest instead of reading files.
    pub fn regenerate(&self, i: usize) -> Result<PromptBundle> {
        regenerate_sample(&self.manifest.header.pool, &self.manifest.samples[i])
    }

    /// Sample indices belonging to one task.
    pub fn by_task(&self, task: TaskKind) -> Vec<usize> {
        self.manifest
            .samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.task() == task)
            .map(|(i, _)| i)
            .collect()
    }

    /// All scene ids used by any sample (inputs and prompts). Evaluation
    /// uses this to prove train/eval scene disjointness.
    pub fn scene_ids(&self) -> BTreeSet<SceneId> {
        self.manifest
            .samples
            .iter()
            .flat_map(|s| [s.input_scene, s.prompt_scene])
            .collect()
    }
}

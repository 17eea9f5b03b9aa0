//! Batch commands behind the `placetext` binary: `gen`, `train`, `align`,
//! `eval` and `ablate`.
//!
//! A run is described by [`Settings`] (a TOML file plus flag overrides)
//! and the command's paths. Every artifact records the hash of the
//! resolved settings, and all artifacts of a command are written only
//! after the whole command has succeeded.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ablation::{ablate, ablation_tsv, Axis, Base, Splits as AblationSplits};
use crate::ccca::{align, CccaConfig, CccaVariant, SearchMode};
use crate::dataset::{generate, load_jsonl, split, write_jsonl, Dataset, GenConfig, Part, SplitRatios};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::pipeline::{default_threads, evaluate, group_from_vectors, EvalOptions};
use crate::provenance::{config_hash, digest_u64, hex};
use crate::retrieval::{AlignMode, RecallOptions};
use crate::trainer::{decode_checkpoint, encode_checkpoint, train_with, TrainConfig};

/// Evaluation settings shared by `eval` and `ablate`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSettings {
    pub align_mode: AlignMode,
    pub ks: Vec<usize>,
    pub eps_m: Vec<f64>,
    /// Keep only the first `n` views of every location.
    pub views: Option<usize>,
    /// Keep only this leading fraction of every description.
    pub truncate: Option<f64>,
    pub ccca_variant: CccaVariant,
    pub ccca_search: SearchMode,
    pub per_candidate: bool,
    /// Present query views in a seeded random order.
    pub shuffle: bool,
    /// Partition that is evaluated.
    pub split: Part,
}

impl Default for EvalSettings {
    fn default() -> Self {
        let r = RecallOptions::default();
        Self {
            align_mode: r.align_mode,
            ks: r.ks,
            eps_m: r.eps_m,
            views: None,
            truncate: None,
            ccca_variant: CccaVariant::Full,
            ccca_search: SearchMode::Full,
            per_candidate: false,
            shuffle: true,
            split: Part::Test,
        }
    }
}

impl EvalSettings {
    pub fn options(&self, seed: u64) -> EvalOptions {
        EvalOptions {
            recall: RecallOptions {
                align_mode: self.align_mode,
                ks: self.ks.clone(),
                eps_m: self.eps_m.clone(),
                ccca: CccaConfig {
                    variant: self.ccca_variant,
                    mode: self.ccca_search,
                    ..CccaConfig::default()
                },
                per_candidate: self.per_candidate,
            },
            views: self.views,
            truncate: self.truncate,
            shuffle: self.shuffle,
            shuffle_seed: seed,
            threads: default_threads(),
        }
    }
}

/// Everything that determines a command's output besides its paths.
///
/// `seed` drives generation, splitting, initialization, batch order and
/// query shuffling; it replaces the `seed` fields of the nested sections.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Settings {
    pub seed: u64,
    pub gen: GenConfig,
    pub split: SplitRatios,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub eval: EvalSettings,
}

impl Settings {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::config(format!("run configuration: {e}")))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    /// Copies the top-level seed into every section.
    pub fn resolved(mut self) -> Self {
        self.gen.seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.gen.validate()?;
        self.split.validate()?;
        self.model.validate()?;
        self.train.validate()?;
        if self.eval.ks.is_empty() || self.eval.ks.contains(&0) {
            return Err(Error::config("k list must be non-empty and positive"));
        }
        if self.eval.eps_m.is_empty() || self.eval.eps_m.iter().any(|e| !(*e >= 0.0)) {
            return Err(Error::config("distance thresholds must be non-empty and non-negative"));
        }
        Ok(())
    }

    /// Hash of the resolved settings, embedded in every artifact.
    pub fn hash(&self) -> Result<String> {
        config_hash(&self.clone().resolved())
    }
}

/// Flag values that override the configuration file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub align_mode: Option<AlignMode>,
    pub views: Option<usize>,
    pub truncate: Option<f64>,
    pub ks: Option<Vec<usize>>,
    pub eps_m: Option<Vec<f64>>,
    pub per_candidate: bool,
}

impl Overrides {
    pub fn apply(&self, mut s: Settings) -> Settings {
        if let Some(seed) = self.seed {
            s.seed = seed;
        }
        if let Some(m) = self.align_mode {
            s.eval.align_mode = m;
        }
        if self.views.is_some() {
            s.eval.views = self.views;
        }
        if self.truncate.is_some() {
            s.eval.truncate = self.truncate;
        }
        if let Some(ks) = &self.ks {
            s.eval.ks = ks.clone();
        }
        if let Some(eps) = &self.eps_m {
            s.eval.eps_m = eps.clone();
        }
        if self.per_candidate {
            s.eval.per_candidate = true;
        }
        s.resolved()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Command {
    /// Write a synthetic dataset with split labels.
    Gen,
    /// Train on a dataset's training split.
    Train { data: PathBuf },
    /// Align an image group to a text group, both JSON arrays of vectors.
    Align { text: PathBuf, image: PathBuf },
    /// Evaluate a checkpoint on one split.
    Eval { data: PathBuf, checkpoint: PathBuf },
    /// Sweep one axis. Evaluation-only axes use `checkpoint` when given
    /// and otherwise train the base model first.
    Ablate {
        axis: Axis,
        data: PathBuf,
        checkpoint: Option<PathBuf>,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Self::Gen => "gen",
            Self::Train { .. } => "train",
            Self::Align { .. } => "align",
            Self::Eval { .. } => "eval",
            Self::Ablate { .. } => "ablate",
        }
    }

    fn inputs(&self) -> Vec<&Path> {
        match self {
            Self::Gen => vec![],
            Self::Train { data } => vec![data],
            Self::Align { text, image } => vec![text, image],
            Self::Eval { data, checkpoint } => vec![data, checkpoint],
            Self::Ablate {
                data, checkpoint, ..
            } => std::iter::once(data.as_path())
                .chain(checkpoint.as_deref())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub command: Command,
    pub settings: Settings,
    /// Directory receiving the artifacts.
    pub out: PathBuf,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.settings.validate()?;
        for p in self.command.inputs() {
            if !p.exists() {
                return Err(Error::config(format!("input {} does not exist", p.display())));
            }
        }
        Ok(())
    }
}

/// Files written and a human-readable summary.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Outcome {
    pub files: Vec<PathBuf>,
    pub summary: String,
}

/// Artifact names inside the output directory.
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const MODEL_FILE: &str = "model.ckpt";
pub const LAST_FILE: &str = "last.ckpt";
pub const HISTORY_FILE: &str = "history.json";
pub const RECALL_FILE: &str = "recall.tsv";

pub fn ablation_file(axis: Axis) -> String {
    format!("ablate-{axis}.tsv")
}

/// Executes one command. `progress` receives human-readable status lines.
pub fn run(config: &RunConfig, progress: &mut dyn FnMut(&str)) -> Result<Outcome> {
    config.validate()?;
    let s = &config.settings;
    let hash = s.hash()?;
    let mut artifacts: Vec<(String, Vec<u8>)> = Vec::new();
    let summary = match &config.command {
        Command::Gen => {
            let mut ds = split(generate(&s.gen)?, s.split, s.seed)?;
            ds.extra.insert("run_config_hash".into(), hash.clone().into());
            let mut bytes = Vec::new();
            write_jsonl(&ds, &mut bytes)?;
            artifacts.push((DATASET_FILE.into(), bytes));
            format!("generated {} locations", ds.len())
        }
        Command::Train { data } => {
            let ds = load_split(data, s)?;
            let model = model_for(&ds, &s.model)?;
            let (tr, va) = (ds.part(Part::Train)?, ds.part(Part::Val)?);
            let outcome = train_with(&tr, &va, &model, &s.train, &mut |r, _, _| {
                let val = r.val_recall.map_or("-".into(), |v| format!("{v:.3}"));
                progress(&format!(
                    "epoch {:>3}  loss {:.4}  val r@1@5m {val}{}",
                    r.epoch + 1,
                    r.mean_loss,
                    if r.is_best { "  *" } else { "" }
                ));
                Ok(())
            })?;
            let mut history = outcome.history.clone();
            history.config_hash = hash.clone();
            let provenance = format!("run_config_hash {hash}");
            artifacts.push((MODEL_FILE.into(), encode_checkpoint(&outcome.best, None, &provenance)?));
            artifacts.push((
                LAST_FILE.into(),
                encode_checkpoint(&outcome.last, Some(&outcome.optimizer), &provenance)?,
            ));
            let mut json = serde_json::to_vec_pretty(&history)?;
            json.push(b'\n');
            artifacts.push((HISTORY_FILE.into(), json));
            format!(
                "trained {} steps in {:.1} s, best epoch {}",
                history.steps,
                outcome.history.wall_clock_s,
                history.best_epoch + 1
            )
        }
        Command::Align { text, image } => {
            let m = group_from_vectors(&read_vectors(text)?)?;
            let q = group_from_vectors(&read_vectors(image)?)?;
            let opts = s.eval.options(s.seed).recall.ccca;
            let a = align(&m, &q, &opts)?;
            let perm: Vec<String> = a.permutation.iter().map(usize::to_string).collect();
            format!("permutation\t{}\nscore\t{:.12}", perm.join(","), a.score)
        }
        Command::Eval { data, checkpoint } => {
            let ds = load_split(data, s)?;
            let (params, ckpt_digest) = read_model(checkpoint)?;
            let table = evaluate(&ds.part(s.eval.split)?, &params, &s.eval.options(s.seed))?;
            let meta = eval_meta(s, &hash, Some(&ckpt_digest));
            artifacts.push((RECALL_FILE.into(), table.to_tsv(&meta).to_string().into_bytes()));
            table.to_text()
        }
        Command::Ablate {
            axis,
            data,
            checkpoint,
        } => {
            let ds = load_split(data, s)?;
            let model = model_for(&ds, &s.model)?;
            let (tr, va, te) = (ds.part(Part::Train)?, ds.part(Part::Val)?, ds.part(s.eval.split)?);
            let loaded = match checkpoint {
                Some(p) if !axis.retrains() => Some(read_model(p)?),
                _ => None,
            };
            let (trained, digest) = match &loaded {
                Some((p, d)) => (Some(p), Some(d.as_str())),
                None => (None, None),
            };
            let options = s.eval.options(s.seed);
            let mut base = Base {
                model: &model,
                train: &s.train,
                eval: &options,
                trained,
            };
            if let Some(p) = trained {
                // A supplied checkpoint defines the base model.
                base.model = &p.config;
            }
            progress(&format!("ablating {axis}"));
            let rows = ablate(
                *axis,
                AblationSplits {
                    train: &tr,
                    val: &va,
                    test: &te,
                },
                base,
            )?;
            let meta = eval_meta(s, &hash, digest);
            let tsv = ablation_tsv(*axis, &rows, &meta)?;
            let mut text = String::new();
            for r in &rows {
                text.push_str(&format!("{:<12} r@1@5m {:.3}\n", r.setting, r.table.recall[0][0]));
            }
            artifacts.push((ablation_file(*axis), tsv.to_string().into_bytes()));
            text.trim_end().to_string()
        }
    };
    let files = commit(&config.out, artifacts)?;
    Ok(Outcome { files, summary })
}

fn eval_meta<'a>(s: &Settings, hash: &str, checkpoint: Option<&str>) -> Vec<(&'a str, String)> {
    let mut meta = vec![("config_hash", hash.to_string())];
    if let Some(d) = checkpoint {
        meta.push(("checkpoint_digest", d.to_string()));
    }
    meta.push(("align_mode", s.eval.align_mode.label().to_string()));
    meta.push(("views", s.eval.views.map_or("all".into(), |v| v.to_string())));
    meta.push(("truncate", s.eval.truncate.map_or("1".into(), |f| f.to_string())));
    meta.push(("seed", s.seed.to_string()));
    meta
}

/// Loads a dataset and applies seeded splits when the file has none.
fn load_split(path: &Path, s: &Settings) -> Result<Dataset> {
    let ds = load_jsonl(path)?;
    if ds.splits.is_some() {
        Ok(ds)
    } else {
        split(ds, s.split, s.seed)
    }
}

/// The configured model with token widths taken from the data.
fn model_for(ds: &Dataset, model: &ModelConfig) -> Result<ModelConfig> {
    match (ds.text_dim(), ds.image_dim()) {
        (Some(t), Some(i)) => Ok(model.clone().with_token_dims(t, i)),
        _ => Err(Error::domain("dataset is empty")),
    }
}

fn read_model(path: &Path) -> Result<(ModelParams, String)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let digest = hex(digest_u64(&bytes));
    Ok((decode_checkpoint(&bytes)?.params, digest))
}

fn read_vectors(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Record {
        path: path.to_path_buf(),
        line: e.line(),
        message: format!("expected a JSON array of vectors: {e}"),
    })
}

/// Writes every artifact to a temporary name, then renames them all, so a
/// failure leaves no partial report behind.
fn commit(dir: &Path, artifacts: Vec<(String, Vec<u8>)>) -> Result<Vec<PathBuf>> {
    if artifacts.is_empty() {
        return Ok(Vec::new());
    }
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut staged = Vec::with_capacity(artifacts.len());
    for (name, bytes) in &artifacts {
        let tmp = dir.join(format!(".{name}.partial"));
        if let Err(e) = fs::write(&tmp, bytes) {
            for (t, _) in &staged {
                let _ = fs::remove_file(t);
            }
            let _ = fs::remove_file(&tmp);
            return Err(Error::io(tmp, e));
        }
        staged.push((tmp, dir.join(name)));
    }
    let mut files = Vec::with_capacity(staged.len());
    for (tmp, dest) in staged {
        fs::rename(&tmp, &dest).map_err(|e| Error::io(&dest, e))?;
        files.push(dest);
    }
    Ok(files)
}

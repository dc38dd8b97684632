//! Run configuration: one flat key/value file covering the task, the
//! training setup, the solver, and the artifact paths.
//!
//! Every key has a built-in default, a config-file line, and a long-form
//! command-line flag, applied in that order; whichever layer touched a key
//! last wins. Environment variables are deliberately never read. After
//! resolution a run writes the complete key set back out as
//! `config.resolved` next to its other outputs, and that file parses back
//! into an identical configuration, so any run can be reproduced from its
//! artifacts alone.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::pipeline::TrainConfig;
use crate::taskgen::{split_sizes, Dataset, SyntheticScene, TaskConfig, DEFAULT_DATASET_SCENES, DEFAULT_SPLIT};

/// Name of the fully-resolved config file written next to run outputs.
pub const RESOLVED_NAME: &str = "config.resolved";

/// Which dataset split a command reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalSplit {
    Train,
    Val,
    Test,
}

impl EvalSplit {
    pub fn of<'a>(&self, ds: &'a Dataset) -> &'a [SyntheticScene] {
        match self {
            EvalSplit::Train => &ds.train,
            EvalSplit::Val => &ds.val,
            EvalSplit::Test => &ds.test,
        }
    }
}

impl fmt::Display for EvalSplit {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalSplit::Train => "train",
            EvalSplit::Val => "val",
            EvalSplit::Test => "test",
        })
    }
}

impl FromStr for EvalSplit {
    type Err = Error;

    fn from_str(s: &str) -> Result<EvalSplit> {
        match s {
            "train" => Ok(EvalSplit::Train),
            "val" => Ok(EvalSplit::Val),
            "test" => Ok(EvalSplit::Test),
            other => Err(Error::parse(
                "eval_split",
                format!("expected train, val, or test, got {other:?}"),
            )),
        }
    }
}

/// The complete, flattened settings of one run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub task: TaskConfig,
    pub train: TrainConfig,
    /// Scenes to generate (`gen` only).
    pub n_scenes: usize,
    /// Train/val/test ratios (`gen` only).
    pub split: [f64; 3],
    /// Directory holding (or receiving) the dataset files.
    pub dataset: PathBuf,
    /// Checkpoint directory to evaluate or resume from.
    pub checkpoint: Option<PathBuf>,
    /// Directory receiving this run's outputs.
    pub out: PathBuf,
    /// Which split evaluation-style commands read.
    pub eval_split: EvalSplit,
    /// Worker cap. Accepted for forward compatibility; the current
    /// implementation always computes on a single worker, which is also
    /// what the bit-reproducibility guarantees are stated for.
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> RunConfig {
        RunConfig {
            task: TaskConfig::default(),
            train: TrainConfig::default(),
            n_scenes: DEFAULT_DATASET_SCENES,
            split: DEFAULT_SPLIT,
            dataset: PathBuf::from("dataset"),
            checkpoint: None,
            out: PathBuf::from("out"),
            eval_split: EvalSplit::Val,
            threads: 1,
        }
    }
}

fn parse_num<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    value
        .trim()
        .parse()
        .map_err(|e| Error::parse("config", format!("{key}: {e}")))
}

fn parse_list<T: FromStr>(key: &str, value: &str) -> Result<Vec<T>>
where
    T::Err: fmt::Display,
{
    let trimmed = value.trim();
    if trimmed.is_empty() {
        return Ok(Vec::new());
    }
    trimmed.split(',').map(|p| parse_num(key, p)).collect()
}

fn fmt_list<T: fmt::Display>(items: &[T]) -> String {
    items
        .iter()
        .map(T::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl RunConfig {
    /// Assign one key. This is the single write path shared by config files
    /// and command-line overrides, so both spell keys and values the same
    /// way.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "n_obj_labels" => self.task.n_obj_labels = parse_num(key, v)?,
            "n_pred_labels" => self.task.n_pred_labels = parse_num(key, v)?,
            "feat_dim" => self.task.feat_dim = parse_num(key, v)?,
            "objects_min" => self.task.objects_min = parse_num(key, v)?,
            "objects_max" => self.task.objects_max = parse_num(key, v)?,
            "cluster_spread" => self.task.cluster_spread = parse_num(key, v)?,
            "coupling_strength" => self.task.coupling_strength = parse_num(key, v)?,
            "context_fraction" => self.task.context_fraction = parse_num(key, v)?,
            "background_prior" => self.task.background_prior = parse_num(key, v)?,
            "task_seed" => self.task.seed = parse_num(key, v)?,

            "n_scenes" => self.n_scenes = parse_num(key, v)?,
            "split" => {
                let parts: Vec<f64> = parse_list(key, v)?;
                self.split = parts.try_into().map_err(|_| {
                    Error::parse("config", "split needs exactly three comma-separated ratios")
                })?;
            }
            "dataset" => self.dataset = PathBuf::from(v),
            "checkpoint" => {
                self.checkpoint = if v == "none" || v.is_empty() {
                    None
                } else {
                    Some(PathBuf::from(v))
                };
            }
            "out" => self.out = PathBuf::from(v),
            "eval_split" => self.eval_split = v.parse()?,
            "threads" => self.threads = parse_num(key, v)?,

            "epochs" => self.train.epochs = parse_num(key, v)?,
            "batch_size" => self.train.batch_size = parse_num(key, v)?,
            "lr" => self.train.lr = parse_num(key, v)?,
            "beta1" => self.train.beta1 = parse_num(key, v)?,
            "beta2" => self.train.beta2 = parse_num(key, v)?,
            "eps" => self.train.eps = parse_num(key, v)?,
            "grad_path" => self.train.grad_path = v.parse()?,
            "preproc" => self.train.preproc = v.parse()?,
            "train_seed" => self.train.seed = parse_num(key, v)?,

            "obj_state" => self.train.dims.obj_state = parse_num(key, v)?,
            "pair_state" => self.train.dims.pair_state = parse_num(key, v)?,
            "embed_dim" => self.train.dims.embed_dim = parse_num(key, v)?,
            "pred_hidden" => self.train.dims.pred_hidden = parse_num(key, v)?,
            "preproc_width" => self.train.dims.preproc_width = parse_num(key, v)?,
            "ode_hidden" => self.train.dims.ode_hidden = parse_list(key, v)?,

            "atol" => self.train.solver.atol = parse_num(key, v)?,
            "rtol" => self.train.solver.rtol = parse_num(key, v)?,
            "h_init" => {
                self.train.solver.h_init = if v == "auto" {
                    None
                } else {
                    Some(parse_num(key, v)?)
                };
            }
            "h_min" => self.train.solver.h_min = parse_num(key, v)?,
            "h_max" => self.train.solver.h_max = parse_num(key, v)?,
            "max_steps" => self.train.solver.max_steps = parse_num(key, v)?,
            "safety" => self.train.solver.safety = parse_num(key, v)?,
            "t_end" => self.train.solver.t_end = parse_num(key, v)?,

            other => {
                return Err(Error::parse(
                    "config",
                    format!("unknown key {other:?}"),
                ))
            }
        }
        Ok(())
    }

    /// Merge a config file into this configuration. Lines are
    /// `key = value`; blank lines and `#` comments are skipped.
    pub fn merge_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::parse(
                    "config",
                    format!("{}:{}: expected key = value", path.display(), lineno + 1),
                )
            })?;
            self.apply_kv(key.trim(), value)
                .map_err(|e| match e {
                    Error::Parse { detail, .. } => Error::parse(
                        "config",
                        format!("{}:{}: {detail}", path.display(), lineno + 1),
                    ),
                    other => other,
                })?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.train.validate()?;
        // Covers ratio sanity even for commands that never generate.
        split_sizes(self.n_scenes, self.split)?;
        if self.threads < 1 {
            return Err(Error::config("threads must be at least 1"));
        }
        Ok(())
    }

    /// The complete key set in a fixed order, as config-file text. Parsing
    /// this text back yields an identical configuration.
    pub fn resolved_text(&self) -> String {
        let d = &self.train.dims;
        let s = &self.train.solver;
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("n_obj_labels", self.task.n_obj_labels.to_string());
        kv("n_pred_labels", self.task.n_pred_labels.to_string());
        kv("feat_dim", self.task.feat_dim.to_string());
        kv("objects_min", self.task.objects_min.to_string());
        kv("objects_max", self.task.objects_max.to_string());
        kv("cluster_spread", format!("{:?}", self.task.cluster_spread));
        kv("coupling_strength", format!("{:?}", self.task.coupling_strength));
        kv("context_fraction", format!("{:?}", self.task.context_fraction));
        kv("background_prior", format!("{:?}", self.task.background_prior));
        kv("task_seed", self.task.seed.to_string());
        kv("n_scenes", self.n_scenes.to_string());
        kv(
            "split",
            format!("{:?},{:?},{:?}", self.split[0], self.split[1], self.split[2]),
        );
        kv("dataset", self.dataset.display().to_string());
        kv(
            "checkpoint",
            match &self.checkpoint {
                Some(p) => p.display().to_string(),
                None => "none".to_owned(),
            },
        );
        kv("out", self.out.display().to_string());
        kv("eval_split", self.eval_split.to_string());
        kv("threads", self.threads.to_string());
        kv("epochs", self.train.epochs.to_string());
        kv("batch_size", self.train.batch_size.to_string());
        kv("lr", format!("{:?}", self.train.lr));
        kv("beta1", format!("{:?}", self.train.beta1));
        kv("beta2", format!("{:?}", self.train.beta2));
        kv("eps", format!("{:?}", self.train.eps));
        kv("grad_path", self.train.grad_path.to_string());
        kv("preproc", self.train.preproc.to_string());
        kv("train_seed", self.train.seed.to_string());
        kv("obj_state", d.obj_state.to_string());
        kv("pair_state", d.pair_state.to_string());
        kv("embed_dim", d.embed_dim.to_string());
        kv("pred_hidden", d.pred_hidden.to_string());
        kv("preproc_width", d.preproc_width.to_string());
        kv("ode_hidden", fmt_list(&d.ode_hidden));
        kv("atol", format!("{:?}", s.atol));
        kv("rtol", format!("{:?}", s.rtol));
        kv(
            "h_init",
            match s.h_init {
                Some(h) => format!("{h:?}"),
                None => "auto".to_owned(),
            },
        );
        kv("h_min", format!("{:?}", s.h_min));
        kv("h_max", format!("{:?}", s.h_max));
        kv("max_steps", s.max_steps.to_string());
        kv("safety", format!("{:?}", s.safety));
        kv("t_end", format!("{:?}", s.t_end));
        out
    }

    /// Write `config.resolved` into `dir` (created if missing).
    pub fn write_resolved(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(RESOLVED_NAME);
        std::fs::write(&path, self.resolved_text()).map_err(|e| Error::io(&path, e))
    }
}

/// Preproc and GradMode round-trip through these strings; keep key parsing
/// in one place so file and flag spellings can never drift apart.
impl FromStr for RunConfig {
    type Err = Error;

    fn from_str(text: &str) -> Result<RunConfig> {
        let mut rc = RunConfig::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::parse("config", format!("line {}: expected key = value", lineno + 1)))?;
            rc.apply_kv(key.trim(), value)?;
        }
        Ok(rc)
    }
}

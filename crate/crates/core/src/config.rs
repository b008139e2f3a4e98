//! Run configuration: a line-oriented `key = value` file with `[model]`,
//! `[loss]`, `[train]`, `[data]` and `[graph]` sections. Unknown sections
//! or keys are errors; [`RunConfig::to_text`] writes every key so a saved
//! file reproduces the run exactly.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::graph::GraphConfig;
use crate::losses::{ContrastOn, Denominator, LossConfig, TauMode};
use crate::model::ModelConfig;
use crate::synthdata::SynthSpec;
use crate::train::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Holdout,
    KFold,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DataConfig {
    /// Dataset container to read; `None` means generate from `synth`.
    pub dataset: Option<PathBuf>,
    pub output: PathBuf,
    pub split: SplitKind,
    pub folds: usize,
    pub ratios: [u32; 3],
    pub split_seed: u64,
    pub synth: SynthSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            output: PathBuf::from("runs/default"),
            split: SplitKind::Holdout,
            folds: 5,
            ratios: [70, 10, 20],
            split_seed: 0,
            synth: SynthSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub graph: GraphConfig,
}

fn list<T: ToString>(v: &[T]) -> String {
    v.iter().map(T::to_string).collect::<Vec<_>>().join(", ")
}

impl RunConfig {
    /// Settings sized for a single CPU core: small network, short schedule.
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::small(),
            train: TrainConfig::desk(),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.data.synth.validate()?;
        if self.data.ratios.iter().sum::<u32>() != 100 {
            return Err(Error::Config {
                line: 0,
                message: format!("split ratios {:?} must sum to 100", self.data.ratios),
            });
        }
        if self.data.folds < 2 {
            return Err(Error::Config {
                line: 0,
                message: "folds must be >= 2".into(),
            });
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let m = &self.model;
        let l = &self.loss;
        let t = &self.train;
        let d = &self.data;
        let s = &d.synth;
        let g = &self.graph;
        let mut o = String::new();
        let _ = writeln!(o, "[model]");
        let _ = writeln!(o, "n_channels = {}", m.n_channels);
        let _ = writeln!(o, "n_samples = {}", m.n_samples);
        let _ = writeln!(o, "segment_size = {}", m.segment_size);
        let _ = writeln!(o, "d_model = {}", m.d_model);
        let _ = writeln!(o, "latent_dim = {}", m.latent_dim);
        let _ = writeln!(o, "n_gcn_layers = {}", m.n_gcn_layers);
        let _ = writeln!(o, "n_transformer_layers = {}", m.n_transformer_layers);
        let _ = writeln!(o, "n_heads = {}", m.n_heads);
        let _ = writeln!(o, "adapter_heads = {}", m.adapter_heads);
        let _ = writeln!(o, "no_gcnn = {}", m.no_gcnn);
        let _ = writeln!(o, "no_split = {}", m.no_split);
        let _ = writeln!(o, "ae_mode = {}", m.ae_mode);
        let _ = writeln!(o, "\n[loss]");
        let _ = writeln!(o, "tau_init = {:?}", l.tau_init);
        let _ = writeln!(o, "tau_min = {:?}", l.tau_min);
        let _ = writeln!(o, "tau_max = {:?}", l.tau_max);
        let _ = writeln!(o, "kl_weight = {:?}", l.kl_weight);
        let _ = writeln!(o, "lambda_subject = {:?}", l.lambda_subject);
        let _ = writeln!(o, "lambda_task = {:?}", l.lambda_task);
        let _ = writeln!(o, "rec_weight = {:?}", l.rec_weight);
        let den = match l.denominator {
            Denominator::IncludePositive => "include_positive",
            Denominator::LiteralEq1 => "literal",
        };
        let _ = writeln!(o, "denominator = {den}");
        let mode = match l.tau_mode {
            TauMode::LogitScale => "logit_scale",
            TauMode::Divide => "divide",
        };
        let _ = writeln!(o, "tau_mode = {mode}");
        let on = match l.contrast_on {
            ContrastOn::Sample => "sample",
            ContrastOn::Mean => "mean",
        };
        let _ = writeln!(o, "contrast_on = {on}");
        let _ = writeln!(o, "\n[train]");
        let _ = writeln!(o, "learning_rate = {:?}", t.learning_rate);
        let _ = writeln!(o, "epochs = {}", t.epochs);
        let _ = writeln!(o, "batch_size = {}", t.batch_size);
        let _ = writeln!(o, "steps_per_epoch = {}", t.steps_per_epoch);
        let _ = writeln!(o, "beta1 = {:?}", t.beta1);
        let _ = writeln!(o, "beta2 = {:?}", t.beta2);
        let _ = writeln!(o, "adam_eps = {:?}", t.adam_eps);
        let _ = writeln!(o, "seeds = {}", list(&t.seeds));
        let _ = writeln!(o, "eval_every = {}", t.eval_every);
        let _ = writeln!(o, "finetune_epochs = {}", t.finetune_epochs);
        let _ = writeln!(o, "finetune_fraction = {:?}", t.finetune_fraction);
        let _ = writeln!(o, "finetune_lr = {:?}", t.finetune_lr);
        let _ = writeln!(o, "probe_rounds = {}", t.probe.rounds);
        let _ = writeln!(o, "probe_depth = {}", t.probe.max_depth);
        let _ = writeln!(o, "probe_shrinkage = {:?}", t.probe.shrinkage);
        let _ = writeln!(o, "probe_min_child = {}", t.probe.min_child);
        let _ = writeln!(o, "probe_lambda = {:?}", t.probe.lambda);
        let _ = writeln!(o, "\n[data]");
        if let Some(p) = &d.dataset {
            let _ = writeln!(o, "dataset = {}", p.display());
        }
        let _ = writeln!(o, "output = {}", d.output.display());
        let split = match d.split {
            SplitKind::Holdout => "holdout",
            SplitKind::KFold => "kfold",
        };
        let _ = writeln!(o, "split = {split}");
        let _ = writeln!(o, "folds = {}", d.folds);
        let _ = writeln!(o, "ratios = {}", list(&d.ratios));
        let _ = writeln!(o, "split_seed = {}", d.split_seed);
        let _ = writeln!(o, "n_subjects = {}", s.n_subjects);
        let _ = writeln!(o, "n_tasks = {}", s.n_tasks);
        let _ = writeln!(o, "epochs_per_cell = {}", s.epochs_per_cell);
        let _ = writeln!(o, "snr = {:?}", s.snr);
        let _ = writeln!(o, "synth_seed = {}", s.seed);
        let _ = writeln!(o, "sample_rate = {:?}", s.sample_rate);
        let _ = writeln!(o, "synth_channels = {}", s.n_channels);
        let _ = writeln!(o, "task_snr_scale = {}", list(&s.task_snr_scale));
        let _ = writeln!(o, "\n[graph]");
        let _ = writeln!(o, "sigma = {:?}", g.sigma);
        let _ = writeln!(o, "threshold = {:?}", g.threshold);
        if let Some(p) = &g.adjacency_file {
            let _ = writeln!(o, "adjacency_file = {}", p.display());
        }
        o
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut c = RunConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Apply the keys of a config file on top of the current values.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        let mut section: Option<String> = None;
        for (n, raw) in text.lines().enumerate() {
            let line_no = n + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                let name = name.trim();
                if !["model", "loss", "train", "data", "graph"].contains(&name) {
                    return Err(Error::Config {
                        line: line_no,
                        message: format!("unknown section [{name}]"),
                    });
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config {
                    line: line_no,
                    message: format!("expected `key = value`, got {line:?}"),
                });
            };
            let Some(sec) = &section else {
                return Err(Error::Config {
                    line: line_no,
                    message: "key appears before any [section]".into(),
                });
            };
            self.set(sec, key.trim(), value.trim())
                .map_err(|message| Error::Config { line: line_no, message })?;
        }
        Ok(())
    }

    /// Set one `section.key` from its textual value.
    pub fn set(&mut self, section: &str, key: &str, v: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<T, String> {
            v.parse().map_err(|_| format!("{key}: cannot parse {v:?}"))
        }
        fn flag(key: &str, v: &str) -> std::result::Result<bool, String> {
            match v {
                "true" => Ok(true),
                "false" => Ok(false),
                _ => Err(format!("{key}: expected true or false, got {v:?}")),
            }
        }
        fn items<T: std::str::FromStr>(key: &str, v: &str) -> std::result::Result<Vec<T>, String> {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(|s| num(key, s))
                .collect()
        }
        let m = &mut self.model;
        let l = &mut self.loss;
        let t = &mut self.train;
        let d = &mut self.data;
        let g = &mut self.graph;
        match (section, key) {
            ("model", "n_channels") => m.n_channels = num(key, v)?,
            ("model", "n_samples") => m.n_samples = num(key, v)?,
            ("model", "segment_size") => m.segment_size = num(key, v)?,
            ("model", "d_model") => m.d_model = num(key, v)?,
            ("model", "latent_dim") => m.latent_dim = num(key, v)?,
            ("model", "n_gcn_layers") => m.n_gcn_layers = num(key, v)?,
            ("model", "n_transformer_layers") => m.n_transformer_layers = num(key, v)?,
            ("model", "n_heads") => m.n_heads = num(key, v)?,
            ("model", "adapter_heads") => m.adapter_heads = num(key, v)?,
            ("model", "no_gcnn") => m.no_gcnn = flag(key, v)?,
            ("model", "no_split") => m.no_split = flag(key, v)?,
            ("model", "ae_mode") => m.ae_mode = flag(key, v)?,
            ("loss", "tau_init") => l.tau_init = num(key, v)?,
            ("loss", "tau_min") => l.tau_min = num(key, v)?,
            ("loss", "tau_max") => l.tau_max = num(key, v)?,
            ("loss", "kl_weight") => l.kl_weight = num(key, v)?,
            ("loss", "lambda_subject") => l.lambda_subject = num(key, v)?,
            ("loss", "lambda_task") => l.lambda_task = num(key, v)?,
            ("loss", "rec_weight") => l.rec_weight = num(key, v)?,
            ("loss", "denominator") => {
                l.denominator = match v {
                    "include_positive" => Denominator::IncludePositive,
                    "literal" => Denominator::LiteralEq1,
                    _ => return Err(format!("denominator: expected include_positive or literal, got {v:?}")),
                }
            }
            ("loss", "tau_mode") => {
                l.tau_mode = match v {
                    "logit_scale" => TauMode::LogitScale,
                    "divide" => TauMode::Divide,
                    _ => return Err(format!("tau_mode: expected logit_scale or divide, got {v:?}")),
                }
            }
            ("loss", "contrast_on") => {
                l.contrast_on = match v {
                    "sample" => ContrastOn::Sample,
                    "mean" => ContrastOn::Mean,
                    _ => return Err(format!("contrast_on: expected sample or mean, got {v:?}")),
                }
            }
            ("train", "learning_rate") => t.learning_rate = num(key, v)?,
            ("train", "epochs") => t.epochs = num(key, v)?,
            ("train", "batch_size") => t.batch_size = num(key, v)?,
            ("train", "steps_per_epoch") => t.steps_per_epoch = num(key, v)?,
            ("train", "beta1") => t.beta1 = num(key, v)?,
            ("train", "beta2") => t.beta2 = num(key, v)?,
            ("train", "adam_eps") => t.adam_eps = num(key, v)?,
            ("train", "seeds") => t.seeds = items(key, v)?,
            ("train", "eval_every") => t.eval_every = num(key, v)?,
            ("train", "finetune_epochs") => t.finetune_epochs = num(key, v)?,
            ("train", "finetune_fraction") => t.finetune_fraction = num(key, v)?,
            ("train", "finetune_lr") => t.finetune_lr = num(key, v)?,
            ("train", "probe_rounds") => t.probe.rounds = num(key, v)?,
            ("train", "probe_depth") => t.probe.max_depth = num(key, v)?,
            ("train", "probe_shrinkage") => t.probe.shrinkage = num(key, v)?,
            ("train", "probe_min_child") => t.probe.min_child = num(key, v)?,
            ("train", "probe_lambda") => t.probe.lambda = num(key, v)?,
            ("data", "dataset") => d.dataset = Some(PathBuf::from(v)),
            ("data", "output") => d.output = PathBuf::from(v),
            ("data", "split") => {
                d.split = match v {
                    "holdout" => SplitKind::Holdout,
                    "kfold" => SplitKind::KFold,
                    _ => return Err(format!("split: expected holdout or kfold, got {v:?}")),
                }
            }
            ("data", "folds") => d.folds = num(key, v)?,
            ("data", "ratios") => {
                let r: Vec<u32> = items(key, v)?;
                d.ratios = r
                    .try_into()
                    .map_err(|_| "ratios: expected three values".to_string())?;
            }
            ("data", "split_seed") => d.split_seed = num(key, v)?,
            ("data", "n_subjects") => d.synth.n_subjects = num(key, v)?,
            ("data", "n_tasks") => d.synth.n_tasks = num(key, v)?,
            ("data", "epochs_per_cell") => d.synth.epochs_per_cell = num(key, v)?,
            ("data", "snr") => d.synth.snr = num(key, v)?,
            ("data", "synth_seed") => d.synth.seed = num(key, v)?,
            ("data", "sample_rate") => d.synth.sample_rate = num(key, v)?,
            ("data", "synth_channels") => d.synth.n_channels = num(key, v)?,
            ("data", "task_snr_scale") => d.synth.task_snr_scale = items(key, v)?,
            ("graph", "sigma") => g.sigma = num(key, v)?,
            ("graph", "threshold") => g.threshold = num(key, v)?,
            ("graph", "adjacency_file") => g.adjacency_file = Some(PathBuf::from(v)),
            _ => return Err(format!("unknown key `{key}` in [{section}]")),
        }
        Ok(())
    }

    /// Apply a `section.key=value` override.
    pub fn set_override(&mut self, spec: &str) -> Result<()> {
        let bad = |m: String| Error::Config { line: 0, message: m };
        let (path, value) = spec
            .split_once('=')
            .ok_or_else(|| bad(format!("override {spec:?} is not section.key=value")))?;
        let (section, key) = path
            .trim()
            .split_once('.')
            .ok_or_else(|| bad(format!("override {spec:?} is not section.key=value")))?;
        self.set(section, key, value.trim()).map_err(bad)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Stable hash of the resolved configuration text.
    pub fn fingerprint(&self) -> u64 {
        crate::rng::derive_seed(0, &self.to_text())
    }
}

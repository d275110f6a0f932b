//! Flat `key = value` run configuration with `[section]` headers.
//!
//! Keys before the first header belong to the top level (`seed`). Every
//! problem in a file is collected and reported together.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::attack::{AttackConfig, Budget, GradientCombine};
use crate::binio::checksum64;
use crate::captioner::ModelConfig;
use crate::error::{Error, Result};
use crate::eval::{ReportFormat, SuccessCriterion, SweepConfig};
use crate::synthdata::{CorpusConfig, Lexicon, IMAGE_SIZE};
use crate::trainer::TrainConfig;

/// Model geometry minus the vocabulary size, which the corpus decides.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelSection {
    pub patch_size: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    pub max_caption_len: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        let m = ModelConfig::with_vocab(0);
        ModelSection {
            patch_size: m.patch_size,
            d_model: m.d_model,
            n_heads: m.n_heads,
            n_encoder_layers: m.n_encoder_layers,
            n_decoder_layers: m.n_decoder_layers,
            max_caption_len: m.max_caption_len,
        }
    }
}

impl ModelSection {
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        ModelConfig {
            image_size: IMAGE_SIZE,
            patch_size: self.patch_size,
            channels: 3,
            d_model: self.d_model,
            n_heads: self.n_heads,
            n_encoder_layers: self.n_encoder_layers,
            n_decoder_layers: self.n_decoder_layers,
            max_caption_len: self.max_caption_len,
            vocab_size,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttackSection {
    pub sweep: SweepConfig,
    /// Budgets of `sweep` and the default of `attack`/`eval`.
    pub budgets: Vec<Budget>,
    pub targets: Vec<String>,
}

impl Default for AttackSection {
    fn default() -> Self {
        AttackSection {
            sweep: SweepConfig::default(),
            budgets: vec![
                Budget::Patches(1),
                Budget::Patches(2),
                Budget::Patches(4),
                Budget::Patches(7),
            ],
            targets: Lexicon::default().targets,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSection {
    pub criterion: SuccessCriterion,
    pub format: ReportFormat,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            criterion: SuccessCriterion::Containment,
            format: ReportFormat::Csv,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineConfig {
    /// Master seed; every component seed is derived from it.
    pub seed: u64,
    pub model: ModelSection,
    pub data: CorpusConfig,
    /// `seed` inside is ignored; the pipeline derives it.
    pub train: TrainConfig,
    pub attack: AttackSection,
    pub eval: EvalSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            seed: 7,
            model: ModelSection::default(),
            data: CorpusConfig::default(),
            train: TrainConfig::default(),
            attack: AttackSection::default(),
            eval: EvalSection::default(),
        }
    }
}

fn list(s: &str) -> Vec<String> {
    s.split(',')
        .map(|t| t.trim().to_string())
        .filter(|t| !t.is_empty())
        .collect()
}

fn combine_name(c: GradientCombine) -> &'static str {
    match c {
        GradientCombine::Additive => "additive",
        GradientCombine::Convex => "convex",
    }
}

fn format_name(f: ReportFormat) -> &'static str {
    match f {
        ReportFormat::Text => "text",
        ReportFormat::Csv => "csv",
    }
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Parses over the defaults; absent keys keep their default values.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = PipelineConfig::default();
        let mut problems = Vec::new();
        let mut section = String::new();
        let mut seen = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let lineno = lineno + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                section = name.trim().to_string();
                if !["model", "data", "train", "attack", "eval"].contains(&section.as_str()) {
                    problems.push(format!("line {lineno}: unknown section [{section}]"));
                }
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                problems.push(format!("line {lineno}: expected key = value, got {line:?}"));
                continue;
            };
            let (key, value) = (key.trim(), value.trim());
            let full = if section.is_empty() {
                key.to_string()
            } else {
                format!("{section}.{key}")
            };
            if let Some(prev) = seen.insert(full.clone(), lineno) {
                problems.push(format!("line {lineno}: {full} already set on line {prev}"));
            }
            if let Err(msg) = cfg.set(&full, value) {
                problems.push(format!("line {lineno}: {msg}"));
            }
        }
        problems.extend(cfg.check());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems))
        }
    }

    fn set(&mut self, key: &str, value: &str) -> std::result::Result<(), String> {
        fn num<T: std::str::FromStr>(key: &str, value: &str) -> std::result::Result<T, String> {
            value.parse().map_err(|_| format!("{key}: cannot parse {value:?}"))
        }
        let p = &mut self.attack.sweep.patch;
        let s = &mut self.attack.sweep.sparse;
        match key {
            "seed" => self.seed = num(key, value)?,
            "model.patch_size" => self.model.patch_size = num(key, value)?,
            "model.d_model" => self.model.d_model = num(key, value)?,
            "model.n_heads" => self.model.n_heads = num(key, value)?,
            "model.n_encoder_layers" => self.model.n_encoder_layers = num(key, value)?,
            "model.n_decoder_layers" => self.model.n_decoder_layers = num(key, value)?,
            "model.max_caption_len" => self.model.max_caption_len = num(key, value)?,
            "data.train_copies" => self.data.train_copies = num(key, value)?,
            "data.targets" => self.data.lexicon.targets = list(value),
            "data.blocked" => self.data.lexicon.blocked = list(value),
            "data.evading" => self.data.lexicon.evading = list(value),
            "train.epochs" => self.train.epochs = num(key, value)?,
            "train.batch_size" => self.train.batch_size = num(key, value)?,
            "train.lr" => self.train.lr = num(key, value)?,
            "train.lr_step" => self.train.lr_step = num(key, value)?,
            "train.lr_gamma" => self.train.lr_gamma = num(key, value)?,
            "train.label_smoothing" => self.train.label_smoothing = num(key, value)?,
            "attack.budgets" => {
                self.attack.budgets = list(value)
                    .iter()
                    .map(|b| Budget::parse(b).map_err(|e| e.to_string()))
                    .collect::<std::result::Result<_, _>>()?
            }
            "attack.targets" => self.attack.targets = list(value),
            "attack.alpha" => p.alpha = num(key, value)?,
            "attack.batch" => p.batch = num(key, value)?,
            "attack.iterations" => p.iterations = num(key, value)?,
            "attack.sparse_alpha" => s.alpha = num(key, value)?,
            "attack.sparse_batch" => s.batch = num(key, value)?,
            "attack.sparse_iterations" => s.iterations = num(key, value)?,
            "attack.project_every" => s.project_every = num(key, value)?,
            "eval.format" => {
                self.eval.format =
                    ReportFormat::parse(value).ok_or_else(|| format!("{key}: expected text or csv, got {value:?}"))?
            }
            _ => {
                let shared: fn(&mut AttackConfig, &str, &str) -> std::result::Result<(), String> = |c, key, value| {
                    match key {
                        "attack.selection_layer" => c.selection_layer = num(key, value)?,
                        "attack.atten_loss_layers" => c.atten_loss_layers = num(key, value)?,
                        "attack.lr" => c.lr = num(key, value)?,
                        "attack.lr_step" => c.lr_step = num(key, value)?,
                        "attack.lr_gamma" => c.lr_gamma = num(key, value)?,
                        "attack.clamp_min" => c.clamp.0 = num(key, value)?,
                        "attack.clamp_max" => c.clamp.1 = num(key, value)?,
                        "attack.init_scale" => c.init_scale = num(key, value)?,
                        "attack.eval_every" => c.eval_every = num(key, value)?,
                        "attack.patience" => c.patience = num(key, value)?,
                        "attack.combine" => {
                            c.combine = match value {
                                "additive" => GradientCombine::Additive,
                                "convex" => GradientCombine::Convex,
                                _ => return Err(format!("{key}: expected additive or convex, got {value:?}")),
                            }
                        }
                        "eval.criterion" => {
                            c.criterion = SuccessCriterion::parse(value)
                                .ok_or_else(|| format!("{key}: expected containment or exact, got {value:?}"))?
                        }
                        _ => return Err(format!("unknown key {key}")),
                    }
                    Ok(())
                };
                shared(p, key, value)?;
                shared(s, key, value)?;
                if key == "eval.criterion" {
                    self.eval.criterion = p.criterion;
                }
            }
        }
        Ok(())
    }

    /// Cross-field constraints.
    fn check(&self) -> Vec<String> {
        let mut problems = Vec::new();
        let probe = self.model.model_config(8);
        if let Err(Error::Config(p)) = probe.validate() {
            problems.extend(p.into_iter().map(|m| format!("model: {m}")));
        }
        let t = &self.train;
        if t.epochs == 0 || t.batch_size == 0 {
            problems.push("train: epochs and batch_size must be positive".into());
        }
        if let Err(e) = crate::numeric::LrSchedule::new(t.lr, t.lr_step, t.lr_gamma) {
            problems.push(format!("train: {e}"));
        }
        if !(0.0..1.0).contains(&t.label_smoothing) {
            problems.push(format!("train: label_smoothing {} outside [0, 1)", t.label_smoothing));
        }
        if self.data.train_copies == 0 {
            problems.push("data: train_copies must be positive".into());
        }
        if self.attack.budgets.is_empty() {
            problems.push("attack: budgets must not be empty".into());
        }
        if self.attack.targets.is_empty() {
            problems.push("attack: targets must not be empty".into());
        }
        if probe.validate().is_ok() {
            for b in &self.attack.budgets {
                if let Err(Error::Config(p)) = self.attack.sweep.for_budget(*b).validate(&probe) {
                    problems.extend(p.into_iter().map(|m| format!("attack ({}): {m}", b.label())));
                }
            }
        }
        problems
    }

    /// Every resolved value except the master seed and the attack grid, in a
    /// fixed order. Artifacts and report rows carry their own term and budget.
    pub fn canonical(&self) -> String {
        let mut out = String::new();
        let m = &self.model;
        let _ = writeln!(
            out,
            "[model]\npatch_size={}\nd_model={}\nn_heads={}\nn_encoder_layers={}\nn_decoder_layers={}\nmax_caption_len={}",
            m.patch_size, m.d_model, m.n_heads, m.n_encoder_layers, m.n_decoder_layers, m.max_caption_len
        );
        let d = &self.data;
        let _ = writeln!(
            out,
            "[data]\ntrain_copies={}\ntargets={}\nblocked={}\nevading={}",
            d.train_copies,
            d.lexicon.targets.join(","),
            d.lexicon.blocked.join(","),
            d.lexicon.evading.join(",")
        );
        let t = &self.train;
        let _ = writeln!(
            out,
            "[train]\nepochs={}\nbatch_size={}\nlr={:?}\nlr_step={}\nlr_gamma={:?}\nlabel_smoothing={:?}",
            t.epochs, t.batch_size, t.lr, t.lr_step, t.lr_gamma, t.label_smoothing
        );
        let a = &self.attack;
        let _ = write!(out, "[attack.patch]\n{}", a.sweep.patch.canonical());
        let _ = write!(out, "[attack.sparse]\n{}", a.sweep.sparse.canonical());
        let _ = writeln!(
            out,
            "[eval]\ncriterion={}\nformat={}",
            self.eval.criterion.as_str(),
            format_name(self.eval.format)
        );
        out
    }

    /// Hash of [`canonical`](Self::canonical); the seed is tracked separately.
    pub fn config_hash(&self) -> u64 {
        checksum64(self.canonical().as_bytes())
    }

    /// A config file that parses back to `self`.
    pub fn to_file_string(&self) -> String {
        let p = &self.attack.sweep.patch;
        let s = &self.attack.sweep.sparse;
        let m = &self.model;
        let t = &self.train;
        let labels: Vec<String> = self.attack.budgets.iter().map(Budget::label).collect();
        format!(
            "seed = {}\n\n[model]\npatch_size = {}\nd_model = {}\nn_heads = {}\nn_encoder_layers = {}\n\
             n_decoder_layers = {}\nmax_caption_len = {}\n\n[data]\ntrain_copies = {}\ntargets = {}\n\
             blocked = {}\nevading = {}\n\n[train]\nepochs = {}\nbatch_size = {}\nlr = {:?}\nlr_step = {}\n\
             lr_gamma = {:?}\nlabel_smoothing = {:?}\n\n[attack]\nbudgets = {}\ntargets = {}\nalpha = {:?}\nbatch = {}\niterations = {}\n\
             sparse_alpha = {:?}\nsparse_batch = {}\nsparse_iterations = {}\nproject_every = {}\n\
             selection_layer = {}\natten_loss_layers = {}\nlr = {:?}\nlr_step = {}\nlr_gamma = {:?}\n\
             clamp_min = {:?}\nclamp_max = {:?}\ninit_scale = {:?}\neval_every = {}\npatience = {}\n\
             combine = {}\n\n[eval]\ncriterion = {}\nformat = {}\n",
            self.seed,
            m.patch_size,
            m.d_model,
            m.n_heads,
            m.n_encoder_layers,
            m.n_decoder_layers,
            m.max_caption_len,
            self.data.train_copies,
            self.data.lexicon.targets.join(", "),
            self.data.lexicon.blocked.join(", "),
            self.data.lexicon.evading.join(", "),
            t.epochs,
            t.batch_size,
            t.lr,
            t.lr_step,
            t.lr_gamma,
            t.label_smoothing,
            labels.join(", "),
            self.attack.targets.join(", "),
            p.alpha,
            p.batch,
            p.iterations,
            s.alpha,
            s.batch,
            s.iterations,
            s.project_every,
            p.selection_layer,
            p.atten_loss_layers,
            p.lr,
            p.lr_step,
            p.lr_gamma,
            p.clamp.0,
            p.clamp.1,
            p.init_scale,
            p.eval_every,
            p.patience,
            combine_name(p.combine),
            self.eval.criterion.as_str(),
            format_name(self.eval.format),
        )
    }
}

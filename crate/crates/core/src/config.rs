//! Line-oriented `key = value` run configuration.
//!
//! Precedence, lowest first: built-in toy defaults, the config file, `MICSE_SEED`,
//! `--set key=value` overrides. Unknown keys are errors. Relative paths in a file
//! resolve against the file's directory.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::losses::{MiForm, SliceSpec};
use crate::trainer::TrainConfig;

pub const SEED_ENV: &str = "MICSE_SEED";

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub train: TrainConfig,
    pub corpus: Option<PathBuf>,
    /// STS files; ρ is averaged over them without weighting.
    pub eval_sets: Vec<PathBuf>,
    pub output_dir: PathBuf,
    pub min_freq: usize,
    slice_explicit: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig::toy(),
            corpus: None,
            eval_sets: Vec::new(),
            output_dir: PathBuf::from("out"),
            min_freq: 1,
            slice_explicit: false,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "on" | "yes" | "1" => Ok(true),
        "false" | "off" | "no" | "0" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected on/off, got {v:?}"))),
    }
}

fn resolve_path(base: Option<&Path>, v: &str) -> PathBuf {
    let p = PathBuf::from(v);
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p,
    }
}

impl RunConfig {
    /// Apply one assignment. `base` is the directory relative paths resolve against.
    pub fn set(&mut self, key: &str, value: &str, base: Option<&Path>) -> Result<()> {
        let v = value.trim();
        let t = &mut self.train;
        match key.trim() {
            "layers" => t.encoder.layers = parse_num(key, v)?,
            "heads" => t.encoder.heads = parse_num(key, v)?,
            "width" => t.encoder.width = parse_num(key, v)?,
            "ffn_width" => t.encoder.ffn_width = parse_num(key, v)?,
            "max_len" => t.encoder.max_len = parse_num(key, v)?,
            "embed_dim" => t.encoder.embed_dim = parse_num(key, v)?,
            "dropout" => t.encoder.dropout = parse_num(key, v)?,
            "tau" => t.tau = parse_num(key, v)?,
            "lambda" => t.lambda = parse_num(key, v)?,
            "ami" => t.ami = parse_bool(key, v)?,
            "moco" => t.moco = parse_bool(key, v)?,
            "momentum" => t.momentum = parse_num(key, v)?,
            "queue_capacity" => t.queue_capacity = parse_num(key, v)?,
            "momentum_dropout" => t.momentum_dropout = parse_num(key, v)?,
            "slice_layers" => {
                let (a, b) = v
                    .split_once('-')
                    .ok_or_else(|| Error::Config(format!("slice_layers: expected FIRST-LAST, got {v:?}")))?;
                t.slice.first_layer = parse_num(key, a.trim())?;
                t.slice.last_layer = parse_num(key, b.trim())?;
                self.slice_explicit = true;
            }
            "head_group" => t.slice.head_group = parse_num(key, v)?,
            "samples_per_tile" => t.samples_per_tile = parse_num(key, v)?,
            "negatives" => {
                t.variant.cross_view = match v {
                    "same-view" => false,
                    "cross-view" => true,
                    _ => return Err(Error::Config(format!("negatives: expected same-view or cross-view, got {v:?}"))),
                }
            }
            "positive_in_denominator" => t.variant.positive_in_denominator = parse_bool(key, v)?,
            "positive_only" => t.variant.positive_only = parse_bool(key, v)?,
            "mi_form" => {
                t.mi_form = match v {
                    "log" => MiForm::Log,
                    "linear" => MiForm::Linear,
                    _ => return Err(Error::Config(format!("mi_form: expected log or linear, got {v:?}"))),
                }
            }
            "batch_size" => t.batch_size = parse_num(key, v)?,
            "lr" => t.lr = parse_num(key, v)?,
            "warmup" => t.warmup = parse_num(key, v)?,
            "clip_norm" => t.clip_norm = parse_num(key, v)?,
            "steps" => t.steps = parse_num(key, v)?,
            "seed" => t.seed = parse_num(key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse_num(key, v)?,
            "corpus" => self.corpus = Some(resolve_path(base, v)),
            "eval_set" => {
                self.eval_sets =
                    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| resolve_path(base, s)).collect()
            }
            "output_dir" => self.output_dir = resolve_path(base, v),
            "min_freq" => self.min_freq = parse_num(key, v)?,
            other => return Err(Error::Config(format!("unknown key {other:?}"))),
        }
        Ok(())
    }

    /// Apply a whole file's text. `origin` names the file in errors.
    pub fn apply_text(&mut self, text: &str, origin: &Path) -> Result<()> {
        let base = origin.parent();
        for (i, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let at = |msg: String| Error::Config(format!("{}:{}: {msg}", origin.display(), i + 1));
            let (k, v) = line.split_once('=').ok_or_else(|| at(format!("expected key = value, got {line:?}")))?;
            self.set(k, v, base).map_err(|e| match e {
                Error::Config(m) => at(m),
                other => other,
            })?;
        }
        Ok(())
    }

    /// `key=value` from the command line.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (k, v) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects key=value, got {assignment:?}")))?;
        self.set(k, v, None)
    }

    /// Defaults, then `file`, then `env_seed`, then `overrides`, then validation.
    pub fn resolve(file: Option<&Path>, env_seed: Option<&str>, overrides: &[String]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
            cfg.apply_text(&text, path)?;
        }
        if let Some(seed) = env_seed {
            cfg.set("seed", seed, None).map_err(|e| Error::Config(format!("{SEED_ENV}: {e}")))?;
        }
        for o in overrides {
            cfg.apply_override(o)?;
        }
        cfg.finish()?;
        Ok(cfg)
    }

    /// Fill derived fields and validate.
    pub fn finish(&mut self) -> Result<()> {
        if !self.slice_explicit {
            let g = self.train.slice.head_group;
            self.train.slice = SliceSpec { head_group: g, ..SliceSpec::upper_half(self.train.encoder.layers) };
        }
        if self.min_freq == 0 {
            return Err(Error::Config("min_freq must be at least 1".into()));
        }
        self.train.validate()
    }

    /// Every path the requested command reads must exist.
    pub fn check_inputs(&self, need_corpus: bool, need_eval: bool) -> Result<()> {
        if need_corpus {
            match &self.corpus {
                None => return Err(Error::Config("corpus path not set".into())),
                Some(p) if !p.is_file() => return Err(Error::Config(format!("corpus not found: {}", p.display()))),
                _ => {}
            }
        }
        if need_eval {
            if self.eval_sets.is_empty() {
                return Err(Error::Config("eval_set not set".into()));
            }
            if let Some(p) = self.eval_sets.iter().find(|p| !p.is_file()) {
                return Err(Error::Config(format!("eval set not found: {}", p.display())));
            }
        }
        Ok(())
    }

    /// Resolved configuration as `key = value` lines, parseable by [`RunConfig::apply_text`].
    pub fn echo_lines(&self) -> Vec<String> {
        let t = &self.train;
        let e = &t.encoder;
        let mut v = vec![
            format!("layers = {}", e.layers),
            format!("heads = {}", e.heads),
            format!("width = {}", e.width),
            format!("ffn_width = {}", e.ffn_width),
            format!("max_len = {}", e.max_len),
            format!("embed_dim = {}", e.embed_dim),
            format!("dropout = {}", e.dropout),
            format!("tau = {}", t.tau),
            format!("lambda = {}", t.lambda),
            format!("ami = {}", if t.ami { "on" } else { "off" }),
            format!("moco = {}", if t.moco { "on" } else { "off" }),
            format!("momentum = {}", t.momentum),
            format!("queue_capacity = {}", t.queue_capacity),
            format!("momentum_dropout = {}", t.momentum_dropout),
            format!("slice_layers = {}-{}", t.slice.first_layer, t.slice.last_layer),
            format!("head_group = {}", t.slice.head_group),
            format!("samples_per_tile = {}", t.samples_per_tile),
            format!("negatives = {}", if t.variant.cross_view { "cross-view" } else { "same-view" }),
            format!("positive_in_denominator = {}", t.variant.positive_in_denominator),
            format!("positive_only = {}", t.variant.positive_only),
            format!("mi_form = {}", match t.mi_form {
                MiForm::Log => "log",
                MiForm::Linear => "linear",
            }),
            format!("batch_size = {}", t.batch_size),
            format!("lr = {}", t.lr),
            format!("warmup = {}", t.warmup),
            format!("clip_norm = {}", t.clip_norm),
            format!("steps = {}", t.steps),
            format!("seed = {}", t.seed),
            format!("checkpoint_every = {}", t.checkpoint_every),
        ];
        if let Some(c) = &self.corpus {
            v.push(format!("corpus = {}", c.display()));
        }
        if !self.eval_sets.is_empty() {
            let joined: Vec<String> = self.eval_sets.iter().map(|p| p.display().to_string()).collect();
            v.push(format!("eval_set = {}", joined.join(",")));
        }
        v.push(format!("output_dir = {}", self.output_dir.display()));
        v.push(format!("min_freq = {}", self.min_freq));
        v
    }

    pub fn echo(&self) -> String {
        let mut s = String::new();
        for l in self.echo_lines() {
            let _ = writeln!(s, "{l}");
        }
        s
    }
}

//! Flat `key = value` run configuration covering every tunable.

use std::fmt::Display;
use std::str::FromStr;

use crate::abstraction::{AbstractionConfig, MergeMode};
use crate::error::{Error, Result};
use crate::frontend::PosMode;
use crate::linking::{AssignMode, LinkConfig, TubeletMerge};
use crate::matching::LossConfig;
use crate::model::ModelConfig;
use crate::synth::{ActionSet, SynthScenario};
use crate::train::TrainConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            _ => Err(Error::Config(format!("unknown mode {s:?}, expected f32 or f64"))),
        }
    }
}

impl std::fmt::Display for Precision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Precision::F32 => "f32",
            Precision::F64 => "f64",
        })
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub seed: u64,
    pub mode: Precision,
    pub out: String,
    /// Empty means generate the data from the synthetic scenario.
    pub data_dir: String,
    pub checkpoint: String,
    pub train_clips: usize,
    pub eval_clips: usize,
    /// First clip index of the held-out set.
    pub eval_offset: u64,
    pub max_instances: usize,
    pub action_set: ActionSet,
    pub model: ModelConfig,
    pub clip_length: usize,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub iou_threshold: f64,
    pub score_threshold: f64,
    pub bench_sizes: Vec<usize>,
    pub bench_channels: usize,
    pub bench_frames: usize,
    pub bench_reps: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            mode: Precision::F32,
            out: "runs/default".into(),
            data_dir: String::new(),
            checkpoint: String::new(),
            train_clips: 200,
            eval_clips: 100,
            eval_offset: 100_000,
            max_instances: 2,
            action_set: ActionSet::All,
            model: ModelConfig::default(),
            clip_length: 8,
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            iou_threshold: 0.5,
            score_threshold: 0.5,
            bench_sizes: vec![8, 12, 16, 24],
            bench_channels: 32,
            bench_frames: 4,
            bench_reps: 3,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("bad value {v:?} for {key}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("bad boolean {v:?} for {key}"))),
    }
}

fn parse_list<T: FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    if v.trim().is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|p| parse(key, p.trim())).collect()
}

fn list<T: Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    /// Every key with its current value, in file order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let m = &self.model;
        let (l, t) = (&self.loss, &self.train);
        vec![
            ("seed", self.seed.to_string()),
            ("mode", self.mode.to_string()),
            ("out", self.out.clone()),
            ("data_dir", self.data_dir.clone()),
            ("checkpoint", self.checkpoint.clone()),
            ("train_clips", self.train_clips.to_string()),
            ("eval_clips", self.eval_clips.to_string()),
            ("eval_offset", self.eval_offset.to_string()),
            ("frames", m.frames.to_string()),
            ("height", m.height.to_string()),
            ("width", m.width.to_string()),
            ("max_instances", self.max_instances.to_string()),
            ("action_set", self.action_set.to_string()),
            ("depths", list(&m.abstraction.depths)),
            ("window", m.abstraction.window.to_string()),
            ("merge_mode", m.abstraction.merge.to_string()),
            ("pos_mode", m.abstraction.pos.to_string()),
            ("assign", m.link.assign.to_string()),
            ("tau", m.link.tau.to_string()),
            ("tubelet_merge", m.link.merge.to_string()),
            ("gumbel_noise", m.gumbel_noise.to_string()),
            ("noise_per_logit", m.link.noise_per_logit.to_string()),
            ("clip_length", self.clip_length.to_string()),
            ("n_q", m.n_q.to_string()),
            ("decoder_layers", m.decoder_layers.to_string()),
            ("query_std", m.query_std.to_string()),
            ("alpha_box", l.alpha[0].to_string()),
            ("alpha_obj", l.alpha[1].to_string()),
            ("alpha_act", l.alpha[2].to_string()),
            ("beta_l1", l.beta[0].to_string()),
            ("beta_giou", l.beta[1].to_string()),
            ("eta_box", l.eta[0].to_string()),
            ("eta_obj", l.eta[1].to_string()),
            ("eta_act", l.eta[2].to_string()),
            ("cost_eps", l.eps.to_string()),
            ("focal_gamma", l.focal_gamma.to_string()),
            ("focal_alpha", l.focal_alpha.to_string()),
            ("no_pair_weight", l.no_pair_weight.to_string()),
            ("epochs", t.epochs.to_string()),
            ("batch_size", t.batch_size.to_string()),
            ("lr", t.lr.to_string()),
            ("lr_backbone", t.lr_backbone.to_string()),
            ("warmup_epochs", t.warmup_epochs.to_string()),
            ("decay_epochs", list(&t.decay_epochs)),
            ("decay_factor", t.decay_factor.to_string()),
            ("weight_decay", t.weight_decay.to_string()),
            ("adam_beta1", t.beta1.to_string()),
            ("adam_beta2", t.beta2.to_string()),
            ("adam_eps", t.adam_eps.to_string()),
            ("clip_norm", t.clip_norm.to_string()),
            ("augment_shift", t.augment_shift.map_or("off".into(), |v| v.to_string())),
            ("threads", t.threads.to_string()),
            ("frozen", t.frozen.join(",")),
            ("iou_threshold", self.iou_threshold.to_string()),
            ("score_threshold", self.score_threshold.to_string()),
            ("bench_sizes", list(&self.bench_sizes)),
            ("bench_channels", self.bench_channels.to_string()),
            ("bench_frames", self.bench_frames.to_string()),
            ("bench_reps", self.bench_reps.to_string()),
        ]
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let m = &mut self.model;
        let (l, t) = (&mut self.loss, &mut self.train);
        match key {
            "seed" => self.seed = parse(key, v)?,
            "mode" => self.mode = v.parse()?,
            "out" => self.out = v.into(),
            "data_dir" => self.data_dir = v.into(),
            "checkpoint" => self.checkpoint = v.into(),
            "train_clips" => self.train_clips = parse(key, v)?,
            "eval_clips" => self.eval_clips = parse(key, v)?,
            "eval_offset" => self.eval_offset = parse(key, v)?,
            "frames" => m.frames = parse(key, v)?,
            "height" => m.height = parse(key, v)?,
            "width" => m.width = parse(key, v)?,
            "max_instances" => self.max_instances = parse(key, v)?,
            "action_set" => self.action_set = v.parse()?,
            "depths" => m.abstraction.depths = parse_list(key, v)?,
            "window" => m.abstraction.window = parse(key, v)?,
            "merge_mode" => m.abstraction.merge = v.parse::<MergeMode>().map_err(|e| Error::Config(e.to_string()))?,
            "pos_mode" => m.abstraction.pos = v.parse::<PosMode>().map_err(|e| Error::Config(e.to_string()))?,
            "assign" => m.link.assign = v.parse::<AssignMode>().map_err(|e| Error::Config(e.to_string()))?,
            "tau" => m.link.tau = parse(key, v)?,
            "tubelet_merge" => m.link.merge = v.parse::<TubeletMerge>().map_err(|e| Error::Config(e.to_string()))?,
            "gumbel_noise" => m.gumbel_noise = parse_bool(key, v)?,
            "noise_per_logit" => m.link.noise_per_logit = parse_bool(key, v)?,
            "clip_length" => self.clip_length = parse(key, v)?,
            "n_q" => m.n_q = parse(key, v)?,
            "decoder_layers" => m.decoder_layers = parse(key, v)?,
            "query_std" => m.query_std = parse(key, v)?,
            "alpha_box" => l.alpha[0] = parse(key, v)?,
            "alpha_obj" => l.alpha[1] = parse(key, v)?,
            "alpha_act" => l.alpha[2] = parse(key, v)?,
            "beta_l1" => l.beta[0] = parse(key, v)?,
            "beta_giou" => l.beta[1] = parse(key, v)?,
            "eta_box" => l.eta[0] = parse(key, v)?,
            "eta_obj" => l.eta[1] = parse(key, v)?,
            "eta_act" => l.eta[2] = parse(key, v)?,
            "cost_eps" => l.eps = parse(key, v)?,
            "focal_gamma" => l.focal_gamma = parse(key, v)?,
            "focal_alpha" => l.focal_alpha = parse(key, v)?,
            "no_pair_weight" => l.no_pair_weight = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "batch_size" => t.batch_size = parse(key, v)?,
            "lr" => t.lr = parse(key, v)?,
            "lr_backbone" => t.lr_backbone = parse(key, v)?,
            "warmup_epochs" => t.warmup_epochs = parse(key, v)?,
            "decay_epochs" => t.decay_epochs = parse_list(key, v)?,
            "decay_factor" => t.decay_factor = parse(key, v)?,
            "weight_decay" => t.weight_decay = parse(key, v)?,
            "adam_beta1" => t.beta1 = parse(key, v)?,
            "adam_beta2" => t.beta2 = parse(key, v)?,
            "adam_eps" => t.adam_eps = parse(key, v)?,
            "clip_norm" => t.clip_norm = parse(key, v)?,
            "augment_shift" => t.augment_shift = if v == "off" { None } else { Some(parse(key, v)?) },
            "threads" => t.threads = parse(key, v)?,
            "frozen" => t.frozen = v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(String::from).collect(),
            "iou_threshold" => self.iou_threshold = parse(key, v)?,
            "score_threshold" => self.score_threshold = parse(key, v)?,
            "bench_sizes" => self.bench_sizes = parse_list(key, v)?,
            "bench_channels" => self.bench_channels = parse(key, v)?,
            "bench_frames" => self.bench_frames = parse(key, v)?,
            "bench_reps" => self.bench_reps = parse(key, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// Applies a `key = value` file on top of the current values. Blank
    /// lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Config(format!("line {}: expected key = value, got {line:?}", n + 1)))?;
            self.set(k.trim(), v).map_err(|e| Error::Config(format!("line {}: {e}", n + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Applies one `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv.split_once('=').ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v)
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.model.validate().map_err(cfg)?;
        self.train.validate().map_err(cfg)?;
        self.scenario().validate().map_err(cfg)?;
        let l = &self.loss;
        if l.alpha.iter().chain(&l.beta).chain(&l.eta).any(|&w| !(w >= 0.0)) || !(l.eps > 0.0) {
            return Err(Error::Config("loss weights must be non-negative and cost_eps positive".into()));
        }
        if self.max_instances > self.model.n_q {
            return Err(Error::Config(format!("max_instances {} exceeds n_q {}", self.max_instances, self.model.n_q)));
        }
        if self.clip_length < 2 {
            return Err(Error::Config("clip_length must be at least 2".into()));
        }
        if !(0.0..=1.0).contains(&self.iou_threshold) {
            return Err(Error::Config("iou_threshold must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn scenario(&self) -> SynthScenario {
        SynthScenario {
            seed: self.seed,
            t: self.model.frames,
            h: self.model.height,
            w: self.model.width,
            max_instances: self.max_instances,
            actions: self.action_set,
        }
    }

    pub fn link(&self) -> &LinkConfig {
        &self.model.link
    }

    pub fn abstraction(&self) -> &AbstractionConfig {
        &self.model.abstraction
    }
}

//! Run configuration: line-oriented `key = value` with `#` comments.

use std::fs;
use std::path::Path;
use std::str::FromStr;

use versreid_core::loss::{DistillKind, LossConfig};
use versreid_core::model::ModelConfig;
use versreid_core::mpda::AugConfig;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    /// `num_classes` is overwritten from the manifest at run start.
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub aug: AugConfig,
    pub lr: f32,
    pub momentum: f32,
    pub weight_decay: f32,
    pub warmup_epochs: usize,
    pub epochs: usize,
    pub distill_epochs: usize,
    pub pretrain_epochs: usize,
    pub pretrain_lr: f32,
    pub pretrain_batch: usize,
    pub tau: f64,
    pub ema: f32,
    pub p: usize,
    pub k: usize,
    pub seed: u64,
    /// Save an intermediate checkpoint every this many epochs (0 = never).
    pub checkpoint_every: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::default(),
            loss: LossConfig::default(),
            aug: AugConfig::default(),
            lr: 0.03,
            momentum: 0.9,
            weight_decay: 1e-4,
            warmup_epochs: 5,
            epochs: 30,
            distill_epochs: 30,
            pretrain_epochs: 5,
            pretrain_lr: 0.03,
            pretrain_batch: 32,
            tau: 0.2,
            ema: 0.99,
            p: 8,
            k: 4,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

fn parse_value<T: FromStr>(v: &str) -> std::result::Result<T, String>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| format!("invalid value `{v}`: {e}"))
}

fn parse_range(v: &str) -> std::result::Result<(f32, f32), String> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| format!("expected `lo, hi`, got `{v}`"))?;
    Ok((parse_value(a.trim())?, parse_value(b.trim())?))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "on" | "1" => Ok(true),
        "false" | "off" | "0" => Ok(false),
        _ => Err(format!("invalid boolean `{v}`")),
    }
}

impl RunConfig {
    /// Keys accepted in a config file.
    pub const KEYS: &'static [&'static str] = &[
        "img_height",
        "img_width",
        "patch_size",
        "patch_stride",
        "embed_dim",
        "depth",
        "num_heads",
        "mlp_ratio",
        "num_scenes",
        "prompts_per_scene",
        "num_versatile",
        "margin",
        "alpha",
        "distill",
        "kl_temperature",
        "normalize_features",
        "brightness",
        "contrast",
        "blur_sigma",
        "occlusion_area",
        "hue_shift",
        "geometric",
        "crop_area",
        "flip_prob",
        "lr",
        "momentum",
        "weight_decay",
        "warmup_epochs",
        "epochs",
        "distill_epochs",
        "pretrain_epochs",
        "pretrain_lr",
        "pretrain_batch",
        "tau",
        "ema",
        "p",
        "k",
        "seed",
        "checkpoint_every",
    ];

    fn set(&mut self, key: &str, v: &str) -> std::result::Result<(), String> {
        match key {
            "img_height" => self.model.img_height = parse_value(v)?,
            "img_width" => self.model.img_width = parse_value(v)?,
            "patch_size" => self.model.patch_size = parse_value(v)?,
            "patch_stride" => self.model.patch_stride = parse_value(v)?,
            "embed_dim" => self.model.embed_dim = parse_value(v)?,
            "depth" => self.model.depth = parse_value(v)?,
            "num_heads" => self.model.num_heads = parse_value(v)?,
            "mlp_ratio" => self.model.mlp_ratio = parse_value(v)?,
            "num_scenes" => self.model.num_scenes = parse_value(v)?,
            "prompts_per_scene" => self.model.prompts_per_scene = parse_value(v)?,
            "num_versatile" => self.model.num_versatile = parse_value(v)?,
            "margin" => self.loss.margin = parse_value(v)?,
            "alpha" => self.loss.alpha = parse_value(v)?,
            "distill" => self.loss.distill = parse_value::<DistillKind>(v)?,
            "kl_temperature" => self.loss.kl_temperature = parse_value(v)?,
            "normalize_features" => self.loss.normalize_features = parse_bool(v)?,
            "brightness" => self.aug.brightness = parse_range(v)?,
            "contrast" => self.aug.contrast = parse_range(v)?,
            "blur_sigma" => self.aug.blur_sigma = parse_range(v)?,
            "occlusion_area" => self.aug.occlusion_area = parse_range(v)?,
            "hue_shift" => self.aug.hue_shift = parse_range(v)?,
            "geometric" => self.aug.geometric = parse_bool(v)?,
            "crop_area" => self.aug.crop_area = parse_range(v)?,
            "flip_prob" => self.aug.flip_prob = parse_value(v)?,
            "lr" => self.lr = parse_value(v)?,
            "momentum" => self.momentum = parse_value(v)?,
            "weight_decay" => self.weight_decay = parse_value(v)?,
            "warmup_epochs" => self.warmup_epochs = parse_value(v)?,
            "epochs" => self.epochs = parse_value(v)?,
            "distill_epochs" => self.distill_epochs = parse_value(v)?,
            "pretrain_epochs" => self.pretrain_epochs = parse_value(v)?,
            "pretrain_lr" => self.pretrain_lr = parse_value(v)?,
            "pretrain_batch" => self.pretrain_batch = parse_value(v)?,
            "tau" => self.tau = parse_value(v)?,
            "ema" => self.ema = parse_value(v)?,
            "p" => self.p = parse_value(v)?,
            "k" => self.k = parse_value(v)?,
            "seed" => self.seed = parse_value(v)?,
            "checkpoint_every" => self.checkpoint_every = parse_value(v)?,
            _ => return Err(format!("unknown key `{key}`")),
        }
        Ok(())
    }

    /// Parses config text. Missing keys keep their defaults.
    pub fn parse(text: &str, path: &Path) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split_once('#').map_or(raw, |(a, _)| a).trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Line {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected `key = value`, got `{line}`")))?;
            cfg.set(k.trim(), v.trim()).map_err(err)?;
        }
        cfg.validate().map_err(|e| match e {
            Error::Core(c) => Error::Data(format!("{}: {c}", path.display())),
            other => other,
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Config from an optional file path.
    pub fn load_or_default(path: Option<&Path>) -> Result<RunConfig> {
        path.map_or_else(|| Ok(RunConfig::default()), Self::load)
    }

    pub fn validate(&self) -> Result<()> {
        let model = ModelConfig {
            num_classes: self.model.num_classes.max(1),
            ..self.model.clone()
        };
        model.validate()?;
        self.loss.validate()?;
        self.aug.validate()?;
        let bad = |m: &str| Err(Error::Data(format!("config: {m}")));
        if self.epochs == 0 || self.distill_epochs == 0 {
            return bad("epochs must be >= 1");
        }
        if self.p < 2 || self.k < 2 {
            return bad("p and k must be >= 2");
        }
        if self.pretrain_batch < 2 {
            return bad("pretrain_batch must be >= 2");
        }
        if !(self.lr > 0.0) || !(self.pretrain_lr > 0.0) {
            return bad("learning rates must be > 0");
        }
        if !(0.0..=1.0).contains(&self.ema) {
            return bad("ema must lie in [0, 1]");
        }
        if !(self.tau > 0.0) {
            return bad("tau must be > 0");
        }
        Ok(())
    }

    /// Renders every key, so `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let r = |(a, b): (f32, f32)| format!("{a}, {b}");
        let m = &self.model;
        let l = &self.loss;
        let a = &self.aug;
        let pairs: Vec<(&str, String)> = vec![
            ("img_height", m.img_height.to_string()),
            ("img_width", m.img_width.to_string()),
            ("patch_size", m.patch_size.to_string()),
            ("patch_stride", m.patch_stride.to_string()),
            ("embed_dim", m.embed_dim.to_string()),
            ("depth", m.depth.to_string()),
            ("num_heads", m.num_heads.to_string()),
            ("mlp_ratio", m.mlp_ratio.to_string()),
            ("num_scenes", m.num_scenes.to_string()),
            ("prompts_per_scene", m.prompts_per_scene.to_string()),
            ("num_versatile", m.num_versatile.to_string()),
            ("margin", l.margin.to_string()),
            ("alpha", l.alpha.to_string()),
            ("distill", l.distill.as_str().to_string()),
            ("kl_temperature", l.kl_temperature.to_string()),
            ("normalize_features", l.normalize_features.to_string()),
            ("brightness", r(a.brightness)),
            ("contrast", r(a.contrast)),
            ("blur_sigma", r(a.blur_sigma)),
            ("occlusion_area", r(a.occlusion_area)),
            ("hue_shift", r(a.hue_shift)),
            ("geometric", a.geometric.to_string()),
            ("crop_area", r(a.crop_area)),
            ("flip_prob", a.flip_prob.to_string()),
            ("lr", self.lr.to_string()),
            ("momentum", self.momentum.to_string()),
            ("weight_decay", self.weight_decay.to_string()),
            ("warmup_epochs", self.warmup_epochs.to_string()),
            ("epochs", self.epochs.to_string()),
            ("distill_epochs", self.distill_epochs.to_string()),
            ("pretrain_epochs", self.pretrain_epochs.to_string()),
            ("pretrain_lr", self.pretrain_lr.to_string()),
            ("pretrain_batch", self.pretrain_batch.to_string()),
            ("tau", self.tau.to_string()),
            ("ema", self.ema.to_string()),
            ("p", self.p.to_string()),
            ("k", self.k.to_string()),
            ("seed", self.seed.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
        ];
        pairs.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }
}

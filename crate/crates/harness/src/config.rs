//! Run configuration as flat `section.key = value` text.
//!
//! Lines are trimmed; blank lines and lines starting with `#` are ignored.
//! `run.preset` (if present) selects the base preset before any other key is
//! applied, whatever its position. Every other key overrides one field, and
//! an unknown key is an error.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cat_core::body::TemplateConfig;
use cat_core::loss::LossWeights;
use cat_core::model::{DecoderConfig, EncoderConfig, ModelConfig};
use cat_core::tensor::AdamConfig;

use crate::error::{HarnessError, Result};

/// Environment variable overriding `run.seed`.
pub const SEED_ENV: &str = "CAT_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Paper,
}

impl FromStr for Preset {
    type Err = HarnessError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            "paper" => Ok(Self::Paper),
            _ => Err(HarnessError::Config(format!("unknown preset {s:?} (expected toy or paper)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
}

/// Synthetic dataset description.
#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
    /// Std of additive Gaussian pixel noise on rendered images.
    pub pixel_noise: f64,
    /// Std (pixels) of Gaussian noise on stored 2D keypoint targets.
    pub kpt2d_noise: f64,
}

/// Training-time augmentation. Scale and rotation are realized as camera
/// moves before rendering, so labels stay exact.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentConfig {
    pub enabled: bool,
    /// Apparent size factor drawn from `1 ± scale`.
    pub scale: f64,
    /// In-plane rotation drawn from `± rotation_deg`.
    pub rotation_deg: f64,
    pub flip_prob: f64,
    /// Per-channel gain `1 ± jitter` and offset `± jitter / 2`.
    pub jitter: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch: usize,
    /// Optimizer steps; when zero, `epochs` passes over the training set.
    pub steps: u64,
    pub epochs: u64,
    pub log_every: u64,
    /// Checkpoint cadence in steps; zero writes only the final checkpoint.
    pub ckpt_every: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Root-joint matching radius for detection F1, meters.
    pub match_radius: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub seed: u64,
    pub precision: Precision,
    pub out_dir: PathBuf,
    pub template: TemplateConfig,
    pub template_seed: u64,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
}

impl RunConfig {
    /// Desk-scale preset: 64x48 images, C = 64, two encoder blocks, one
    /// decoder block, batch 8 over 8 samples for 2000 steps.
    pub fn toy() -> Self {
        Self {
            preset: Preset::Toy,
            seed: 0,
            precision: Precision::F64,
            out_dir: PathBuf::from("runs/toy"),
            template: TemplateConfig::default(),
            template_seed: 0,
            model: ModelConfig::toy(),
            loss: LossWeights::default(),
            train: TrainConfig {
                adam: AdamConfig {
                    lr: 1e-3,
                    ..AdamConfig::default()
                },
                batch: 8,
                steps: 2000,
                epochs: 0,
                log_every: 100,
                ckpt_every: 0,
            },
            data: DataConfig {
                n_train: 8,
                n_eval: 64,
                seed: 1,
                pixel_noise: 0.02,
                kpt2d_noise: 0.0,
            },
            augment: AugmentConfig {
                enabled: false,
                scale: 0.25,
                rotation_deg: 30.0,
                flip_prob: 0.5,
                jitter: 0.2,
            },
            eval: EvalConfig { match_radius: 0.25 },
        }
    }

    /// Full-size architecture with the published optimizer settings. Not
    /// meant to be trained on a desk.
    pub fn paper() -> Self {
        let toy = Self::toy();
        Self {
            preset: Preset::Paper,
            out_dir: PathBuf::from("runs/paper"),
            model: ModelConfig::paper(),
            train: TrainConfig {
                adam: AdamConfig::default(),
                batch: 192,
                steps: 0,
                epochs: 14,
                ..toy.train
            },
            data: DataConfig {
                n_train: 192 * 64,
                n_eval: 512,
                ..toy.data
            },
            augment: AugmentConfig {
                enabled: true,
                ..toy.augment
            },
            ..toy
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Toy => Self::toy(),
            Preset::Paper => Self::paper(),
        }
    }

    /// Parses config text on top of the selected preset.
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected `key = value`, got {line:?}", n + 1)))?;
            entries.push((n + 1, k.trim().to_string(), v.trim().to_string()));
        }
        let mut cfg = match entries.iter().find(|(_, k, _)| k == "run.preset") {
            Some((_, _, v)) => Self::preset(v.parse()?),
            None => Self::toy(),
        };
        for (n, k, v) in &entries {
            cfg.set(k, v).map_err(|e| HarnessError::Config(format!("line {n}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| HarnessError::io(path, e))?;
        Self::parse(&text)
    }

    /// Applies `CAT_SEED` if set.
    pub fn with_env_seed(mut self) -> Result<Self> {
        if let Ok(s) = std::env::var(SEED_ENV) {
            self.seed = s
                .trim()
                .parse()
                .map_err(|_| HarnessError::Config(format!("{SEED_ENV}={s:?} is not an unsigned integer")))?;
        }
        Ok(self)
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let e = &mut self.model.encoder;
        let d = &mut self.model.decoder;
        let t = &mut self.train;
        match key {
            "run.preset" => self.preset = value.parse()?,
            "run.seed" => self.seed = num(key, value)?,
            "run.precision" => {
                self.precision = match value {
                    "f64" => Precision::F64,
                    _ => return Err(HarnessError::Config(format!("{key}: only f64 is supported, got {value:?}"))),
                }
            }
            "run.out_dir" => self.out_dir = PathBuf::from(value),
            "template.seed" => self.template_seed = num(key, value)?,
            "template.body_vertices" => self.template.body_vertices = num(key, value)?,
            "template.hand_vertices" => self.template.hand_vertices = num(key, value)?,
            "template.face_vertices" => self.template.face_vertices = num(key, value)?,
            "template.ring_size" => self.template.ring_size = num(key, value)?,
            "template.hand_scale" => self.template.hand_scale = num(key, value)?,
            "encoder.height" => e.height = num(key, value)?,
            "encoder.width" => e.width = num(key, value)?,
            "encoder.patch" => e.patch = num(key, value)?,
            "encoder.channels" => e.channels = num(key, value)?,
            "encoder.body_tokens" => e.body_tokens = num(key, value)?,
            "encoder.depth" => e.depth = num(key, value)?,
            "encoder.heads" => e.heads = num(key, value)?,
            "decoder.enabled" => d.enabled = flag(key, value)?,
            "decoder.keypoint_guided" => d.keypoint_guided = flag(key, value)?,
            "decoder.scales" => d.scales = list(key, value)?,
            "decoder.crop_h" => d.crop_h = num(key, value)?,
            "decoder.crop_w" => d.crop_w = num(key, value)?,
            "decoder.channels" => d.channels = num(key, value)?,
            "decoder.k_hand" => d.k_hand = num(key, value)?,
            "decoder.k_face" => d.k_face = num(key, value)?,
            "decoder.blocks" => d.blocks = num(key, value)?,
            "decoder.points" => d.points = num(key, value)?,
            "decoder.heads" => d.heads = num(key, value)?,
            "loss.smplx" => self.loss.smplx = num(key, value)?,
            "loss.kpt3d" => self.loss.kpt3d = num(key, value)?,
            "loss.kpt2d" => self.loss.kpt2d = num(key, value)?,
            "loss.bbox" => self.loss.bbox = num(key, value)?,
            "train.lr" => t.adam.lr = num(key, value)?,
            "train.beta1" => t.adam.beta1 = num(key, value)?,
            "train.beta2" => t.adam.beta2 = num(key, value)?,
            "train.eps" => t.adam.eps = num(key, value)?,
            "train.batch" => t.batch = num(key, value)?,
            "train.steps" => t.steps = num(key, value)?,
            "train.epochs" => t.epochs = num(key, value)?,
            "train.log_every" => t.log_every = num(key, value)?,
            "train.ckpt_every" => t.ckpt_every = num(key, value)?,
            "data.n_train" => self.data.n_train = num(key, value)?,
            "data.n_eval" => self.data.n_eval = num(key, value)?,
            "data.seed" => self.data.seed = num(key, value)?,
            "data.pixel_noise" => self.data.pixel_noise = num(key, value)?,
            "data.kpt2d_noise" => self.data.kpt2d_noise = num(key, value)?,
            "augment.enabled" => self.augment.enabled = flag(key, value)?,
            "augment.scale" => self.augment.scale = num(key, value)?,
            "augment.rotation_deg" => self.augment.rotation_deg = num(key, value)?,
            "augment.flip_prob" => self.augment.flip_prob = num(key, value)?,
            "augment.jitter" => self.augment.jitter = num(key, value)?,
            "eval.match_radius" => self.eval.match_radius = num(key, value)?,
            _ => return Err(HarnessError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let bad = |m: String| Err(HarnessError::Config(m));
        let a = &self.train.adam;
        if !(a.lr > 0.0) || !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) || !(a.eps > 0.0) {
            return bad(format!("invalid optimizer settings {a:?}"));
        }
        if self.train.batch == 0 {
            return bad("train.batch must be positive".into());
        }
        if self.train.steps == 0 && self.train.epochs == 0 {
            return bad("one of train.steps or train.epochs must be positive".into());
        }
        if self.data.n_train == 0 {
            return bad("data.n_train must be positive".into());
        }
        if self.data.pixel_noise < 0.0 || self.data.kpt2d_noise < 0.0 {
            return bad("noise levels must be non-negative".into());
        }
        let g = &self.augment;
        if !(0.0..1.0).contains(&g.scale) || g.rotation_deg < 0.0 || !(0.0..=1.0).contains(&g.flip_prob) || !(0.0..1.0).contains(&g.jitter) {
            return bad(format!("invalid augmentation settings {g:?}"));
        }
        if !(self.eval.match_radius > 0.0) {
            return bad("eval.match_radius must be positive".into());
        }
        for (k, w) in [("smplx", self.loss.smplx), ("kpt3d", self.loss.kpt3d), ("kpt2d", self.loss.kpt2d), ("bbox", self.loss.bbox)] {
            if !(w >= 0.0) {
                return bad(format!("loss.{k} must be non-negative"));
            }
        }
        Ok(())
    }

    /// Total optimizer steps.
    pub fn total_steps(&self) -> u64 {
        if self.train.steps > 0 {
            self.train.steps
        } else {
            self.train.epochs * self.data.n_train.div_ceil(self.train.batch) as u64
        }
    }

    /// Every key with its current value, parseable by [`RunConfig::parse`].
    pub fn to_text(&self) -> String {
        let EncoderConfig { height, width, patch, channels, body_tokens, depth, heads } = &self.model.encoder;
        let d: &DecoderConfig = &self.model.decoder;
        let preset = match self.preset {
            Preset::Toy => "toy",
            Preset::Paper => "paper",
        };
        let scales: Vec<String> = d.scales.iter().map(|s| s.to_string()).collect();
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("write to string");
        kv("run.preset", preset.into());
        kv("run.seed", self.seed.to_string());
        kv("run.precision", "f64".into());
        kv("run.out_dir", self.out_dir.display().to_string());
        kv("template.seed", self.template_seed.to_string());
        kv("template.body_vertices", self.template.body_vertices.to_string());
        kv("template.hand_vertices", self.template.hand_vertices.to_string());
        kv("template.face_vertices", self.template.face_vertices.to_string());
        kv("template.ring_size", self.template.ring_size.to_string());
        kv("template.hand_scale", fl(self.template.hand_scale));
        kv("encoder.height", height.to_string());
        kv("encoder.width", width.to_string());
        kv("encoder.patch", patch.to_string());
        kv("encoder.channels", channels.to_string());
        kv("encoder.body_tokens", body_tokens.to_string());
        kv("encoder.depth", depth.to_string());
        kv("encoder.heads", heads.to_string());
        kv("decoder.enabled", d.enabled.to_string());
        kv("decoder.keypoint_guided", d.keypoint_guided.to_string());
        kv("decoder.scales", scales.join(","));
        kv("decoder.crop_h", d.crop_h.to_string());
        kv("decoder.crop_w", d.crop_w.to_string());
        kv("decoder.channels", d.channels.to_string());
        kv("decoder.k_hand", d.k_hand.to_string());
        kv("decoder.k_face", d.k_face.to_string());
        kv("decoder.blocks", d.blocks.to_string());
        kv("decoder.points", d.points.to_string());
        kv("decoder.heads", d.heads.to_string());
        kv("loss.smplx", fl(self.loss.smplx));
        kv("loss.kpt3d", fl(self.loss.kpt3d));
        kv("loss.kpt2d", fl(self.loss.kpt2d));
        kv("loss.bbox", fl(self.loss.bbox));
        kv("train.lr", fl(self.train.adam.lr));
        kv("train.beta1", fl(self.train.adam.beta1));
        kv("train.beta2", fl(self.train.adam.beta2));
        kv("train.eps", fl(self.train.adam.eps));
        kv("train.batch", self.train.batch.to_string());
        kv("train.steps", self.train.steps.to_string());
        kv("train.epochs", self.train.epochs.to_string());
        kv("train.log_every", self.train.log_every.to_string());
        kv("train.ckpt_every", self.train.ckpt_every.to_string());
        kv("data.n_train", self.data.n_train.to_string());
        kv("data.n_eval", self.data.n_eval.to_string());
        kv("data.seed", self.data.seed.to_string());
        kv("data.pixel_noise", fl(self.data.pixel_noise));
        kv("data.kpt2d_noise", fl(self.data.kpt2d_noise));
        kv("augment.enabled", self.augment.enabled.to_string());
        kv("augment.scale", fl(self.augment.scale));
        kv("augment.rotation_deg", fl(self.augment.rotation_deg));
        kv("augment.flip_prob", fl(self.augment.flip_prob));
        kv("augment.jitter", fl(self.augment.jitter));
        kv("eval.match_radius", fl(self.eval.match_radius));
        s
    }
}

/// Shortest text that parses back to the same `f64`.
fn fl(x: f64) -> String {
    format!("{x:?}")
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| HarnessError::Config(format!("{key}: cannot parse {v:?} as {}", std::any::type_name::<T>())))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(HarnessError::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',').map(|x| num(key, x.trim())).collect()
}

//! Run configuration and its line-oriented text format.
//!
//! ```text
//! [train]
//! lr = 0.01
//! iterations = 300
//!
//! [model]
//! use_rru = true
//! ```
//!
//! Blank lines and `#` comments are ignored. Every key belongs to exactly
//! one section; unknown sections and keys are errors. Keys left out keep
//! their defaults. [`Config::to_text`] writes every key, and parsing its
//! output gives back an equal configuration.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, Pooling};
use crate::objectives::LossTerms;
use crate::rru::RruVariant;
use crate::synthdata::{Corruption, SynthConfig};

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub iterations: u64,
    /// Identities per batch.
    pub n: usize,
    /// Sequences per identity.
    pub k: usize,
    pub margin: f64,
    pub terms: LossTerms,
    pub seed: u64,
    /// Global gradient-norm bound; off when `None`.
    pub grad_clip: Option<f64>,
    /// Run a held-out evaluation every this many iterations (0: never).
    pub eval_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 0.01,
            weight_decay: 5e-4,
            momentum: 0.9,
            iterations: 300,
            n: 4,
            k: 2,
            margin: 0.4,
            terms: LossTerms::default(),
            seed: 0,
            grad_clip: None,
            eval_every: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub identities: usize,
    pub cameras: usize,
    pub frames: usize,
    pub corruption: Corruption,
    pub camera_shift: f64,
    pub motion: usize,
    pub seed: u64,
    /// Frame-directory dataset root; synthetic data when `None`.
    pub root: Option<PathBuf>,
    pub split: Option<PathBuf>,
    /// Sequences with fewer frames are dropped when loading (0: keep all).
    pub min_length: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            identities: s.num_identities,
            cameras: s.num_cameras,
            frames: s.frames,
            corruption: s.corruption,
            camera_shift: s.camera_shift,
            motion: s.motion,
            seed: s.seed,
            root: None,
            split: None,
            min_length: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub trials: usize,
    /// Ranks printed in the summary (0: all).
    pub max_rank: usize,
    pub strict: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            trials: 10,
            max_rank: 0,
            strict: true,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Config {
    pub train: TrainConfig,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl Config {
    /// The synthetic-data view of this configuration.
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            num_identities: self.data.identities,
            num_cameras: self.data.cameras,
            frames: self.data.frames,
            height: self.model.backbone.image_height,
            width: self.model.backbone.image_width,
            corruption: self.data.corruption.clone(),
            camera_shift: self.data.camera_shift,
            motion: self.data.motion,
            seed: self.data.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.train;
        if !(t.lr >= 0.0 && t.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be finite and >= 0, got {}", t.lr)));
        }
        if t.weight_decay < 0.0 || !(0.0..1.0).contains(&t.momentum) {
            return Err(Error::Config("weight_decay must be >= 0 and momentum in [0, 1)".into()));
        }
        if let Some(c) = t.grad_clip {
            if c.is_nan() || c <= 0.0 {
                return Err(Error::Config(format!("grad_clip must be positive, got {c}")));
            }
        }
        crate::objectives::TripletConfig {
            margin: t.margin,
            n: t.n,
            k: t.k,
        }
        .validate()?;
        self.model.validate()?;
        if self.data.root.is_none() {
            self.synth().validate()?;
            if t.n > self.data.identities {
                return Err(Error::Config(format!(
                    "batch needs {} identities, data has {}",
                    t.n, self.data.identities
                )));
            }
            if self.model.backbone.num_identities != self.data.identities {
                return Err(Error::Config(format!(
                    "model.num_identities = {} but data.identities = {}",
                    self.model.backbone.num_identities, self.data.identities
                )));
            }
        }
        if self.eval.trials == 0 {
            return Err(Error::Config("eval.trials must be positive".into()));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut section: Option<String> = None;
        let mut identities_set = false;
        let mut model_ids_set = false;
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Config(format!("line {}: {msg}", n + 1));
            if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
                if !["train", "model", "data", "eval"].contains(&name) {
                    return Err(err(format!("unknown section [{name}]")));
                }
                section = Some(name.to_string());
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(err(format!("expected `key = value`, got `{line}`")));
            };
            let (key, value) = (key.trim(), value.trim());
            let Some(sec) = section.as_deref() else {
                return Err(err(format!("`{key}` appears before any section")));
            };
            identities_set |= sec == "data" && key == "identities";
            model_ids_set |= sec == "model" && key == "num_identities";
            cfg.set(sec, key, value).map_err(|e| err(e.to_string()))?;
        }
        // Synthetic data decides the class count unless it was given.
        if identities_set && !model_ids_set {
            cfg.model.backbone.num_identities = cfg.data.identities;
        }
        Ok(cfg)
    }

    /// Sets `section.key` from its text form.
    pub fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        let unknown = || Error::Config(format!("unknown key `{key}` in [{section}]"));
        match section {
            "train" => {
                let t = &mut self.train;
                match key {
                    "lr" => t.lr = parse(key, value)?,
                    "weight_decay" => t.weight_decay = parse(key, value)?,
                    "momentum" => t.momentum = parse(key, value)?,
                    "iterations" => t.iterations = parse(key, value)?,
                    "n" => t.n = parse(key, value)?,
                    "k" => t.k = parse(key, value)?,
                    "margin" => t.margin = parse(key, value)?,
                    "use_lc" => t.terms.classification = parse(key, value)?,
                    "use_lv" => t.terms.video = parse(key, value)?,
                    "use_lp" => t.terms.part = parse(key, value)?,
                    "seed" => t.seed = parse(key, value)?,
                    "grad_clip" => t.grad_clip = parse_opt(key, value)?,
                    "eval_every" => t.eval_every = parse(key, value)?,
                    _ => return Err(unknown()),
                }
            }
            "model" => {
                let m = &mut self.model;
                match key {
                    "use_rru" => m.use_rru = parse(key, value)?,
                    "rru_variant" => m.rru_variant = value.parse::<RruVariant>()?,
                    "use_stim" => {
                        m.pooling = if parse(key, value)? { Pooling::Stim } else { Pooling::Average };
                    }
                    "baseline_pool" => {
                        m.pooling = if parse(key, value)? { Pooling::Average } else { Pooling::Stim };
                    }
                    "widths" => {
                        let w: Vec<usize> = value
                            .split(',')
                            .map(|v| parse(key, v.trim()))
                            .collect::<Result<_>>()?;
                        m.backbone.widths = w
                            .try_into()
                            .map_err(|_| Error::Config("widths takes three comma-separated values".into()))?;
                    }
                    "channels" => m.backbone.widths[2] = parse(key, value)?,
                    "image_height" => m.backbone.image_height = parse(key, value)?,
                    "image_width" => m.backbone.image_width = parse(key, value)?,
                    "num_identities" => m.backbone.num_identities = parse(key, value)?,
                    "transition_channels" => m.transition_channels = parse(key, value)?,
                    "spatial_hidden" => m.spatial_hidden = parse(key, value)?,
                    "descriptor_dim" => m.descriptor_dim = parse(key, value)?,
                    "classifier_hidden" => m.classifier_hidden = parse(key, value)?,
                    "dropout" => m.dropout = parse(key, value)?,
                    _ => return Err(unknown()),
                }
            }
            "data" => {
                let d = &mut self.data;
                match key {
                    "identities" => d.identities = parse(key, value)?,
                    "cameras" => d.cameras = parse(key, value)?,
                    "frames" => d.frames = parse(key, value)?,
                    "occlusion_prob" => d.corruption.occlusion_prob = parse(key, value)?,
                    "occlusion_min" => d.corruption.occlusion_size.0 = parse(key, value)?,
                    "occlusion_max" => d.corruption.occlusion_size.1 = parse(key, value)?,
                    "blur_kernel" => d.corruption.blur_kernel = parse(key, value)?,
                    "brightness_jitter" => d.corruption.brightness_jitter = parse(key, value)?,
                    "camera_shift" => d.camera_shift = parse(key, value)?,
                    "motion" => d.motion = parse(key, value)?,
                    "seed" => d.seed = parse(key, value)?,
                    "root" => d.root = (!value.is_empty()).then(|| PathBuf::from(value)),
                    "split" => d.split = (!value.is_empty()).then(|| PathBuf::from(value)),
                    "min_length" => d.min_length = parse(key, value)?,
                    _ => return Err(unknown()),
                }
            }
            "eval" => {
                let e = &mut self.eval;
                match key {
                    "trials" => e.trials = parse(key, value)?,
                    "max_rank" => e.max_rank = parse(key, value)?,
                    "strict" => e.strict = parse(key, value)?,
                    _ => return Err(unknown()),
                }
            }
            _ => return Err(Error::Config(format!("unknown section [{section}]"))),
        }
        Ok(())
    }

    /// Applies `key=value` overrides; a key may be qualified as
    /// `section.key`, otherwise it must be unique across sections.
    pub fn apply_overrides(&mut self, overrides: &str) -> Result<()> {
        for item in overrides.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            let Some((key, value)) = item.split_once('=') else {
                return Err(Error::Config(format!("override `{item}` is not key=value")));
            };
            let (key, value) = (key.trim(), value.trim());
            if matches!(key, "identities" | "data.identities") {
                self.set("data", "identities", value)?;
                self.model.backbone.num_identities = self.data.identities;
                continue;
            }
            if let Some((section, key)) = key.split_once('.') {
                self.set(section, key, value)?;
                continue;
            }
            let mut hits = 0;
            let mut last_err = None;
            for section in ["train", "model", "data", "eval"] {
                let mut probe = self.clone();
                match probe.set(section, key, value) {
                    Ok(()) => {
                        *self = probe;
                        hits += 1;
                    }
                    Err(e) if e.to_string().contains("unknown key") => {}
                    Err(e) => last_err = Some(e),
                }
            }
            match (hits, last_err) {
                (1, _) => {}
                (0, Some(e)) => return Err(e),
                (0, None) => return Err(Error::Config(format!("unknown key `{key}`"))),
                _ => return Err(Error::Config(format!("`{key}` is ambiguous; qualify it as section.{key}"))),
            }
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let (t, m, d, e) = (&self.train, &self.model, &self.data, &self.eval);
        let mut s = String::new();
        let w = &m.backbone.widths;
        let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        let _ = write!(
            s,
            "[train]\nlr = {}\nweight_decay = {}\nmomentum = {}\niterations = {}\nn = {}\nk = {}\nmargin = {}\n\
             use_lc = {}\nuse_lv = {}\nuse_lp = {}\nseed = {}\ngrad_clip = {}\neval_every = {}\n\n",
            t.lr,
            t.weight_decay,
            t.momentum,
            t.iterations,
            t.n,
            t.k,
            t.margin,
            t.terms.classification,
            t.terms.video,
            t.terms.part,
            t.seed,
            t.grad_clip.map(|c| c.to_string()).unwrap_or_else(|| "none".into()),
            t.eval_every,
        );
        let _ = write!(
            s,
            "[model]\nuse_rru = {}\nrru_variant = {}\nuse_stim = {}\nwidths = {}, {}, {}\nimage_height = {}\n\
             image_width = {}\nnum_identities = {}\ntransition_channels = {}\nspatial_hidden = {}\n\
             descriptor_dim = {}\nclassifier_hidden = {}\ndropout = {}\n\n",
            m.use_rru,
            m.rru_variant,
            m.pooling == Pooling::Stim,
            w[0],
            w[1],
            w[2],
            m.backbone.image_height,
            m.backbone.image_width,
            m.backbone.num_identities,
            m.transition_channels,
            m.spatial_hidden,
            m.descriptor_dim,
            m.classifier_hidden,
            m.dropout,
        );
        let c = &d.corruption;
        let _ = write!(
            s,
            "[data]\nidentities = {}\ncameras = {}\nframes = {}\nocclusion_prob = {}\nocclusion_min = {}\n\
             occlusion_max = {}\nblur_kernel = {}\nbrightness_jitter = {}\ncamera_shift = {}\nmotion = {}\n\
             seed = {}\nroot = {}\nsplit = {}\nmin_length = {}\n\n",
            d.identities,
            d.cameras,
            d.frames,
            c.occlusion_prob,
            c.occlusion_size.0,
            c.occlusion_size.1,
            c.blur_kernel,
            c.brightness_jitter,
            d.camera_shift,
            d.motion,
            d.seed,
            path(&d.root),
            path(&d.split),
            d.min_length,
        );
        let _ = write!(
            s,
            "[eval]\ntrials = {}\nmax_rank = {}\nstrict = {}\n",
            e.trials, e.max_rank, e.strict
        );
        s
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value `{value}` for `{key}`")))
}

fn parse_opt<T: FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "none" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

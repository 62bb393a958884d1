//! Flat `key = value` run configuration.
//!
//! One static table per section is the single source of truth for key names,
//! help text, parsing and rendering; the CLI derives its flags from the same
//! tables, and checkpoints embed the model section in this format.

use std::path::Path;
use std::str::FromStr;

use thiserror::Error;

use crate::anchors::Ratio;
use crate::data::{Condition, SceneSpec};
use crate::eval::EvalConfig;
use crate::model::{ConcatMode, FusionMode, InitScheme, ModelConfig};
use crate::train::TrainConfig;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("unknown preset {0:?} (expected desk or paper)")]
    UnknownPreset(String),
    #[error("{key}: cannot parse {value:?}: {reason}")]
    Value { key: String, value: String, reason: String },
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A value that round-trips through the text format.
pub trait ConfigValue: Sized {
    fn render(&self) -> String;
    fn parse(text: &str) -> Result<Self, String>;
}

macro_rules! scalar_value {
    ($($t:ty),+) => {$(
        impl ConfigValue for $t {
            fn render(&self) -> String {
                self.to_string()
            }

            fn parse(text: &str) -> Result<Self, String> {
                text.parse().map_err(|e: <$t as FromStr>::Err| e.to_string())
            }
        }
    )+};
}

scalar_value!(u32, u64, usize, f64, bool, FusionMode, ConcatMode, InitScheme, Condition);

fn split_list(text: &str) -> impl Iterator<Item = &str> {
    text.split(',').map(str::trim).filter(|s| !s.is_empty())
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn render(&self) -> String {
        self.iter().map(ConfigValue::render).collect::<Vec<_>>().join(",")
    }

    fn parse(text: &str) -> Result<Self, String> {
        split_list(text).map(T::parse).collect()
    }
}

/// Inclusive ranges are written `min..max`.
impl<T: ConfigValue + PartialOrd + Copy> ConfigValue for (T, T) {
    fn render(&self) -> String {
        format!("{}..{}", self.0.render(), self.1.render())
    }

    fn parse(text: &str) -> Result<Self, String> {
        let (a, b) = text.split_once("..").ok_or("expected min..max")?;
        let (a, b) = (T::parse(a.trim())?, T::parse(b.trim())?);
        if a > b {
            return Err("range minimum exceeds maximum".into());
        }
        Ok((a, b))
    }
}

impl ConfigValue for Ratio {
    fn render(&self) -> String {
        format!("{}:{}", self.w, self.h)
    }

    fn parse(text: &str) -> Result<Self, String> {
        let (w, h) = text.split_once(':').ok_or("expected w:h")?;
        Ok(Ratio::new(f64::parse(w.trim())?, f64::parse(h.trim())?))
    }
}

/// One configuration key bound to a field of section type `C`.
pub struct Key<C: 'static> {
    pub name: &'static str,
    pub help: &'static str,
    pub get: fn(&C) -> String,
    pub set: fn(&mut C, &str) -> Result<(), String>,
}

macro_rules! keys {
    ($c:ty { $($field:ident : $help:literal),+ $(,)? }) => {
        &[$(Key::<$c> {
            name: stringify!($field),
            help: $help,
            get: |c| ConfigValue::render(&c.$field),
            set: |c, v| {
                c.$field = ConfigValue::parse(v)?;
                Ok(())
            },
        }),+]
    };
}

pub static MODEL_KEYS: &[Key<ModelConfig>] = keys!(ModelConfig {
    image_w: "input image width in pixels",
    image_h: "input image height in pixels",
    backbone_widths: "output channels of the five backbone blocks",
    fusion_layers: "backbone blocks fused into the hyper feature map",
    align_block: "block whose resolution the fused maps align to",
    feature_w: "hyper feature map width (0 = align block's native size)",
    feature_h: "hyper feature map height (0 = align block's native size)",
    pn_conv_filters: "conv6_1 filters (PN)",
    ftn_conv_filters: "conv6_2 filters (FTN)",
    head_kernel: "kernel size of conv6_1 and conv6_2",
    head_relu: "apply ReLU after conv6_1 and conv6_2",
    pn_fc_dim: "PN fc width",
    ftn_fc_dim: "FTN fc width",
    roi_size: "ROI pooling output side",
    grid_w: "anchor grid columns",
    grid_h: "anchor grid rows",
    anchor_scales: "anchor side lengths in pixels",
    anchor_ratios: "anchor aspect ratios as w:h",
    pn_score_threshold: "PN inference score threshold",
    pn_nms_threshold: "PN NMS IoU threshold",
    pn_keep: "proposals kept after PN NMS",
    ftn_nms_threshold: "final NMS IoU threshold",
    final_score_threshold: "final detection score threshold",
    fusion_mode: "last-layer-only | multi-layer",
    concat_mode: "ftn-only | pn-plus-ftn",
    bn_eps: "batch-norm epsilon",
    bn_momentum: "batch-norm running-average momentum",
    init_std: "std of Gaussian weight initialization",
    dcn_init: "backbone initialization: gaussian | he",
});

pub static TRAIN_KEYS: &[Key<TrainConfig>] = keys!(TrainConfig {
    lr_initial: "learning rate before the drop",
    lr_drop_iteration: "iteration at which the learning rate drops",
    lr_after_drop: "learning rate after the drop",
    total_iterations: "training iterations (one image each)",
    minibatch: "samples per stage per iteration",
    pn_pos_fraction: "maximum positive share of the PN minibatch",
    ftn_pos_fraction: "maximum positive share of the FTN minibatch",
    alpha: "weight of the PN stage loss",
    lambda: "weight of the localization loss",
    hard_mine_fraction: "share of FTN samples kept by hard mining",
    momentum: "SGD momentum",
    weight_decay: "L2 weight decay",
    grad_clip: "global gradient-norm clip (0 = off)",
    seed: "training seed (initialization, sampling, image order)",
    checkpoint_every: "write a periodic checkpoint every N iterations (0 = off)",
});

pub static SCENE_KEYS: &[Key<SceneSpec>] = keys!(SceneSpec {
    vehicle_count: "vehicles per scene, min..max",
    vehicle_size: "vehicle length in pixels, min..max",
    vehicle_aspect: "vehicle width/height ratio, min..max",
    occlusion_probability: "chance a vehicle is placed overlapping another",
    ignore_count: "ignore regions per scene, min..max",
    conditions: "weather conditions sampled per scene",
    data_seed: "dataset generation seed",
});

pub static EVAL_KEYS: &[Key<EvalConfig>] = keys!(EvalConfig {
    iou_threshold: "IoU needed for a true positive",
    eval_score_threshold: "score threshold when detecting for evaluation",
    train_fraction: "share of the dataset used for training",
    split_seed: "seed of the train/validation split",
    warmup_runs: "untimed detect calls before benchmarking",
});

/// Everything a command can be configured with.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub scene: SceneSpec,
    pub eval: EvalConfig,
}

/// Section name, key name and help text of one schema entry.
#[derive(Clone, Copy, Debug)]
pub struct KeyInfo {
    pub section: &'static str,
    pub name: &'static str,
    pub help: &'static str,
}

fn info<C>(section: &'static str, keys: &'static [Key<C>]) -> impl Iterator<Item = KeyInfo> {
    keys.iter().map(move |k| KeyInfo { section, name: k.name, help: k.help })
}

/// Every key, in documentation order.
pub fn schema() -> Vec<KeyInfo> {
    info("model", MODEL_KEYS)
        .chain(info("train", TRAIN_KEYS))
        .chain(info("scene", SCENE_KEYS))
        .chain(info("eval", EVAL_KEYS))
        .collect()
}

fn find<C>(keys: &'static [Key<C>], name: &str) -> Option<&'static Key<C>> {
    keys.iter().find(|k| k.name == name)
}

fn assign<C>(key: &Key<C>, target: &mut C, value: &str) -> Result<(), ConfigError> {
    (key.set)(target, value).map_err(|reason| ConfigError::Value {
        key: key.name.to_string(),
        value: value.to_string(),
        reason,
    })
}

/// Splits `key = value` lines, skipping blanks and `#` comments.
pub fn parse_lines(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

/// Renders a section as `key = value` lines.
pub fn render_section<C>(keys: &'static [Key<C>], value: &C) -> String {
    keys.iter().map(|k| format!("{} = {}\n", k.name, (k.get)(value))).collect()
}

/// Applies recognized lines to `target`; returns the unrecognized ones.
pub fn apply_section<C>(keys: &'static [Key<C>], target: &mut C, pairs: &[(String, String)]) -> Result<Vec<(String, String)>, ConfigError> {
    let mut rest = Vec::new();
    for (k, v) in pairs {
        match find(keys, k) {
            Some(key) => assign(key, target, v)?,
            None => rest.push((k.clone(), v.clone())),
        }
    }
    Ok(rest)
}

impl RunConfig {
    pub fn desk() -> Self {
        Self {
            model: ModelConfig::desk(),
            train: TrainConfig::desk(),
            scene: SceneSpec::desk(),
            eval: EvalConfig::default(),
        }
    }

    pub fn paper() -> Self {
        Self {
            model: ModelConfig::paper(),
            train: TrainConfig::paper(),
            scene: SceneSpec::paper(),
            eval: EvalConfig::default(),
        }
    }

    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper" => Ok(Self::paper()),
            other => Err(ConfigError::UnknownPreset(other.to_string())),
        }
    }

    /// Sets one key; unknown keys are rejected.
    pub fn set(&mut self, name: &str, value: &str) -> Result<(), ConfigError> {
        if let Some(k) = find(MODEL_KEYS, name) {
            assign(k, &mut self.model, value)?;
            // The scene has no size keys of its own; keep it in step.
            self.scene.image_w = self.model.image_w;
            self.scene.image_h = self.model.image_h;
            Ok(())
        } else if let Some(k) = find(TRAIN_KEYS, name) {
            assign(k, &mut self.train, value)
        } else if let Some(k) = find(SCENE_KEYS, name) {
            assign(k, &mut self.scene, value)
        } else if let Some(k) = find(EVAL_KEYS, name) {
            assign(k, &mut self.eval, value)
        } else {
            Err(ConfigError::UnknownKey(name.to_string()))
        }
    }

    /// The scene spec with image dimensions taken from the model section.
    pub fn scene_spec(&self) -> SceneSpec {
        SceneSpec {
            image_w: self.model.image_w,
            image_h: self.model.image_h,
            ..self.scene.clone()
        }
    }

    pub fn get(&self, name: &str) -> Option<String> {
        find(MODEL_KEYS, name)
            .map(|k| (k.get)(&self.model))
            .or_else(|| find(TRAIN_KEYS, name).map(|k| (k.get)(&self.train)))
            .or_else(|| find(SCENE_KEYS, name).map(|k| (k.get)(&self.scene)))
            .or_else(|| find(EVAL_KEYS, name).map(|k| (k.get)(&self.eval)))
    }

    /// Applies config text on top of `self`. A `preset = name` line resets
    /// every key to that preset before later lines apply.
    pub fn apply_text(&mut self, text: &str) -> Result<(), ConfigError> {
        for (k, v) in parse_lines(text)? {
            if k == "preset" {
                *self = Self::preset(&v)?;
            } else {
                self.set(&k, &v)?;
            }
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = Self::desk();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_text(&text)
    }

    /// Every key, one per line, grouped by section.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (title, body) in [
            ("model", render_section(MODEL_KEYS, &self.model)),
            ("train", render_section(TRAIN_KEYS, &self.train)),
            ("scene", render_section(SCENE_KEYS, &self.scene)),
            ("eval", render_section(EVAL_KEYS, &self.eval)),
        ] {
            out.push_str(&format!("# {title}\n{body}"));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip_is_exact() {
        for cfg in [RunConfig::desk(), RunConfig::paper()] {
            let back = RunConfig::from_text(&cfg.to_text()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn preset_line_then_overrides() {
        let cfg = RunConfig::from_text("preset = paper\n# comment\npn_keep = 7 # trailing\n").unwrap();
        assert_eq!(cfg.model.pn_keep, 7);
        assert_eq!(cfg.model.grid_w, 64);
    }

    #[test]
    fn unknown_key_rejected() {
        assert!(matches!(RunConfig::from_text("bogus = 1"), Err(ConfigError::UnknownKey(k)) if k == "bogus"));
    }

    #[test]
    fn type_checked_at_parse() {
        let err = RunConfig::from_text("pn_keep = many").unwrap_err();
        assert!(matches!(err, ConfigError::Value { ref key, .. } if key == "pn_keep"), "{err}");
        assert!(RunConfig::from_text("fusion_mode = sideways").is_err());
        assert!(RunConfig::from_text("vehicle_count = 9..3").is_err());
    }

    #[test]
    fn syntax_error_names_line() {
        assert!(matches!(RunConfig::from_text("a = 1\nnot a pair"), Err(ConfigError::Syntax { line: 2, .. })));
    }

    #[test]
    fn ratios_and_lists() {
        let mut cfg = RunConfig::desk();
        cfg.set("anchor_ratios", "1:1, 3:1").unwrap();
        assert_eq!(cfg.model.anchor_ratios, vec![Ratio::new(1.0, 1.0), Ratio::new(3.0, 1.0)]);
        assert_eq!(cfg.get("anchor_ratios").unwrap(), "1:1,3:1");
        cfg.set("fusion_layers", "2,4").unwrap();
        assert_eq!(cfg.model.fusion_layers, vec![2, 4]);
    }

    #[test]
    fn schema_names_are_unique() {
        let names: Vec<_> = schema().iter().map(|k| k.name).collect();
        let mut sorted = names.clone();
        sorted.sort();
        sorted.dedup();
        assert_eq!(sorted.len(), names.len());
    }
}

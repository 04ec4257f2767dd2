//! Run configuration: one JSON document, ablation presets, and dotted
//! `key=value` overrides.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::data::{FocalStack, LfScene, STACK_SIZE};
use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::ia::{Fusion, IaConfig};
use crate::losses::LossConfig;
use crate::mixld::AugmentConfig;
use crate::model::ModelConfig;
use crate::tensor::AdamW;

/// Default image side for every mode except `gradcheck`.
pub const DEFAULT_IMAGE_SIZE: usize = 256;
/// Default image side for `gradcheck`.
pub const GRADCHECK_IMAGE_SIZE: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    GenData,
    Augment,
    Train,
    Eval,
    Gradcheck,
    Predict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenDataConfig {
    pub num_scenes: usize,
    pub num_shapes: usize,
    /// Distinct focal slices rendered per scene before normalisation to 12.
    pub num_slices: usize,
}

impl Default for GenDataConfig {
    fn default() -> Self {
        GenDataConfig {
            num_scenes: 20,
            num_shapes: 3,
            num_slices: STACK_SIZE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradCheckConfig {
    pub eps: f64,
    pub tol: f64,
    pub floor: f64,
    /// Entries sampled per parameter tensor; `null` checks every entry.
    pub max_entries: Option<usize>,
    /// Distinct focal slices of the probe scene, duplicated up to 12.
    pub distinct_slices: usize,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            eps: 1e-4,
            tol: 1e-4,
            floor: 1e-5,
            max_entries: Some(4),
            distinct_slices: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset_root: PathBuf,
    pub output_dir: PathBuf,
    /// Checkpoint read by `eval` and `predict`; defaults to
    /// `<output_dir>/model.lft`.
    pub checkpoint: Option<PathBuf>,
    /// Side length scenes are resized to; `null` picks the mode default.
    pub image_size: Option<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Seeds parameter init, epoch shuffling and synthetic data.
    pub seed: u64,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: usize,
    /// Percentage of scenes held out of training by name hash.
    pub holdout_percent: u32,
    /// Distinct focal slices kept before renormalising to 12.
    pub stack_slices: usize,
    pub use_focal_stack: bool,
    pub augment: AugmentConfig,
    pub encoder: EncoderConfig,
    pub ia: IaConfig,
    pub loss: LossConfig,
    pub gen_data: GenDataConfig,
    pub gradcheck: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset_root: PathBuf::from("data"),
            output_dir: PathBuf::from("out"),
            checkpoint: None,
            image_size: None,
            epochs: 300,
            batch_size: 6,
            lr: 5e-5,
            weight_decay: 1e-4,
            seed: 0,
            checkpoint_every: 0,
            holdout_percent: 20,
            stack_slices: STACK_SIZE,
            use_focal_stack: true,
            augment: AugmentConfig::default(),
            encoder: EncoderConfig::default(),
            ia: IaConfig::default(),
            loss: LossConfig::default(),
            gen_data: GenDataConfig::default(),
            gradcheck: GradCheckConfig::default(),
        }
    }
}

/// Named ablation configurations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// MixLD disabled; geometric augmentation kept.
    WoMixld,
    /// Plain feature addition instead of attention.
    WoIa,
    /// All-focus image only.
    WoLf,
    /// Keep `k` distinct focal slices.
    Stack(usize),
    /// Query/key reduction rate.
    Reduction(usize),
}

pub const PRESET_NAMES: [&str; 11] = [
    "wo-mixld", "wo-ia", "wo-lf", "stack-2", "stack-3", "stack-5", "stack-12", "rr-1", "rr-4", "rr-8", "rr-16",
];

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let num = |rest: &str, allowed: &[usize]| -> Option<usize> {
            rest.parse().ok().filter(|k| allowed.contains(k))
        };
        let preset = match s {
            "wo-mixld" => Some(Preset::WoMixld),
            "wo-ia" => Some(Preset::WoIa),
            "wo-lf" => Some(Preset::WoLf),
            _ => {
                if let Some(rest) = s.strip_prefix("stack-") {
                    num(rest, &[2, 3, 5, 12]).map(Preset::Stack)
                } else if let Some(rest) = s.strip_prefix("rr-") {
                    num(rest, &[1, 4, 8, 16]).map(Preset::Reduction)
                } else {
                    None
                }
            }
        };
        preset.ok_or_else(|| Error::Config(format!("unknown preset `{s}`; expected one of {PRESET_NAMES:?}")))
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Preset::WoMixld => f.write_str("wo-mixld"),
            Preset::WoIa => f.write_str("wo-ia"),
            Preset::WoLf => f.write_str("wo-lf"),
            Preset::Stack(k) => write!(f, "stack-{k}"),
            Preset::Reduction(r) => write!(f, "rr-{r}"),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn apply_preset(&mut self, preset: Preset) {
        match preset {
            Preset::WoMixld => {
                self.augment.p_fs2af = 0.0;
                self.augment.p_af2fs = 0.0;
            }
            Preset::WoIa => self.ia.fusion = Fusion::Add,
            Preset::WoLf => self.use_focal_stack = false,
            Preset::Stack(k) => self.stack_slices = k,
            Preset::Reduction(r) => self.ia.reduction_rate = r,
        }
    }

    /// Applies `a.b.c=value`. The value is parsed as JSON and otherwise
    /// taken as a string. Unknown keys are rejected.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
        let value = serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
        let mut doc = serde_json::to_value(&*self)?;
        let mut slot = &mut doc;
        for part in key.split('.') {
            slot = slot
                .as_object_mut()
                .and_then(|m| m.get_mut(part))
                .ok_or_else(|| Error::Config(format!("unknown config key `{key}`")))?;
        }
        *slot = value;
        *self = serde_json::from_value(doc).map_err(|e| Error::Config(format!("override `{assignment}`: {e}")))?;
        Ok(())
    }

    pub fn image_size(&self, mode: Mode) -> usize {
        self.image_size.unwrap_or(match mode {
            Mode::Gradcheck => GRADCHECK_IMAGE_SIZE,
            _ => DEFAULT_IMAGE_SIZE,
        })
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.checkpoint
            .clone()
            .unwrap_or_else(|| self.output_dir.join("model.lft"))
    }

    /// Model configuration with the encoder input size taken from the mode.
    pub fn model_config(&self, mode: Mode) -> ModelConfig {
        let mut encoder = self.encoder.clone();
        encoder.input_size = self.image_size(mode);
        ModelConfig {
            encoder,
            ia: self.ia.clone(),
            use_focal_stack: self.use_focal_stack,
        }
    }

    pub fn optimizer(&self) -> AdamW {
        AdamW {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamW::default()
        }
    }

    pub fn validate(&self, mode: Mode) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be ≥ 0, got {}", self.weight_decay)));
        }
        if self.holdout_percent > 100 {
            return Err(Error::Config(format!("holdout_percent must be ≤ 100, got {}", self.holdout_percent)));
        }
        if !(1..=STACK_SIZE).contains(&self.stack_slices) {
            return Err(Error::Config(format!(
                "stack_slices must be in 1..={STACK_SIZE}, got {}",
                self.stack_slices
            )));
        }
        if self.gradcheck.distinct_slices == 0 {
            return Err(Error::Config("gradcheck.distinct_slices must be ≥ 1".into()));
        }
        self.augment.validate()?;
        self.loss.validate()?;
        self.model_config(mode).validate()
    }
}

/// Indices `floor(i·12/k)` of the slices kept when reducing a 12-slice
/// stack to `k`.
pub fn stack_indices(k: usize) -> Vec<usize> {
    (0..k).map(|i| i * STACK_SIZE / k).collect()
}

/// Keeps `k` evenly spaced slices and renormalises back to 12.
pub fn select_slices(scene: &LfScene, k: usize) -> Result<LfScene> {
    if k == 0 || k > scene.fs.len() {
        return Err(Error::Config(format!(
            "cannot keep {k} of {} focal slices",
            scene.fs.len()
        )));
    }
    if k == scene.fs.len() {
        return Ok(scene.clone());
    }
    let picked = stack_indices(k)
        .into_iter()
        .map(|i| scene.fs.slices()[i * scene.fs.len() / STACK_SIZE].clone())
        .collect();
    let fs = crate::data::normalize_stack(&FocalStack::new(picked)?)?;
    Ok(LfScene {
        fs,
        ..scene.clone()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = RunConfig::default();
        assert_eq!((c.lr, c.weight_decay, c.batch_size, c.epochs), (5e-5, 1e-4, 6, 300));
        assert_eq!(c.image_size(Mode::Train), 256);
        assert_eq!(c.image_size(Mode::Gradcheck), 64);
    }

    #[test]
    fn round_trip_json() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_json(&c.to_json()).unwrap(), c);
    }

    #[test]
    fn empty_document_is_default() {
        assert_eq!(RunConfig::from_json("{}").unwrap(), RunConfig::default());
    }

    #[test]
    fn unknown_file_key_rejected() {
        assert!(matches!(RunConfig::from_json(r#"{"lrr": 1}"#), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::from_json(r#"{"augment": {"gamma": 1}}"#),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn overrides() {
        let mut c = RunConfig::default();
        c.apply_override("lr=0.001").unwrap();
        c.apply_override("ia.fusion=ADD").unwrap();
        c.apply_override("augment.geometric.rotate=false").unwrap();
        c.apply_override("image_size=64").unwrap();
        c.apply_override("encoder.stage_channels=[8,8,16,16]").unwrap();
        assert_eq!(c.lr, 0.001);
        assert_eq!(c.ia.fusion, Fusion::Add);
        assert!(!c.augment.geometric.rotate);
        assert_eq!(c.image_size, Some(64));
        assert_eq!(c.encoder.stage_channels, [8, 8, 16, 16]);
    }

    #[test]
    fn bad_overrides() {
        let mut c = RunConfig::default();
        for bad in ["nokey=1", "ia.nope=1", "lr", "ia.fusion=XYZ", "epochs=-1"] {
            assert!(matches!(c.apply_override(bad), Err(Error::Config(_))), "{bad}");
        }
        assert_eq!(c, RunConfig::default());
    }

    #[test]
    fn presets_parse_and_apply() {
        for name in PRESET_NAMES {
            let p: Preset = name.parse().unwrap();
            assert_eq!(p.to_string(), name);
            let mut c = RunConfig::default();
            c.apply_preset(p);
            c.validate(Mode::Train).unwrap();
        }
        assert!("stack-4".parse::<Preset>().is_err());
        assert!("rr-2".parse::<Preset>().is_err());
        let mut c = RunConfig::default();
        c.apply_preset(Preset::WoMixld);
        assert_eq!((c.augment.p_fs2af, c.augment.p_af2fs), (0.0, 0.0));
    }

    #[test]
    fn deformable_is_a_config_error() {
        let mut c = RunConfig::default();
        c.apply_override("ia.fusion=DA").unwrap();
        assert!(matches!(c.validate(Mode::Train), Err(Error::Config(_))));
    }

    #[test]
    fn stack_index_rule() {
        assert_eq!(stack_indices(2), vec![0, 6]);
        assert_eq!(stack_indices(3), vec![0, 4, 8]);
        assert_eq!(stack_indices(5), vec![0, 2, 4, 7, 9]);
        assert_eq!(stack_indices(12), (0..12).collect::<Vec<_>>());
    }
}

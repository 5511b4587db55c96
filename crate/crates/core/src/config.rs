//! Experiment configuration: every hyperparameter of a run, with defaults and
//! validation.
//!
//! Config files are flat JSON objects. Keys not present take their defaults,
//! except `num_classes`, which has none. `--set key=value` style overrides are
//! applied on the raw object before validation, so they win over the file.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed config: {0}")]
    Parse(String),
    #[error("invalid config: {reason}")]
    Invalid { field: &'static str, reason: String },
}

impl ConfigError {
    fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        ConfigError::Invalid { field, reason: reason.into() }
    }
}

/// Encoder stage whose activations feed the contrastive losses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TapLayer {
    /// The raw input image.
    Input,
    /// After the 7x7 stem convolution block.
    Stem,
    /// After the first stride-2 block.
    Down1,
    /// After the second stride-2 block.
    Down2,
    /// After residual block `n` (1-based).
    Res(usize),
}

impl TapLayer {
    /// Depth in the encoder; later stages have larger ordinals.
    pub fn ordinal(self) -> usize {
        match self {
            TapLayer::Input => 0,
            TapLayer::Stem => 1,
            TapLayer::Down1 => 2,
            TapLayer::Down2 => 3,
            TapLayer::Res(n) => 3 + n,
        }
    }

    /// Spatial downsampling factor relative to the input.
    pub fn stride(self) -> usize {
        match self {
            TapLayer::Input | TapLayer::Stem => 1,
            TapLayer::Down1 => 2,
            TapLayer::Down2 | TapLayer::Res(_) => 4,
        }
    }
}

impl fmt::Display for TapLayer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TapLayer::Input => f.write_str("input"),
            TapLayer::Stem => f.write_str("stem"),
            TapLayer::Down1 => f.write_str("down1"),
            TapLayer::Down2 => f.write_str("down2"),
            TapLayer::Res(n) => write!(f, "res{n}"),
        }
    }
}

impl FromStr for TapLayer {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "input" => Ok(TapLayer::Input),
            "stem" => Ok(TapLayer::Stem),
            "down1" => Ok(TapLayer::Down1),
            "down2" => Ok(TapLayer::Down2),
            _ => s
                .strip_prefix("res")
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n >= 1)
                .map(TapLayer::Res)
                .ok_or_else(|| format!("unknown tap layer `{s}`")),
        }
    }
}

impl Serialize for TapLayer {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TapLayer {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub image_size: usize,
    /// InfoNCE temperature.
    pub tau: f64,
    /// Damping factor for above-threshold negatives in the modified score.
    pub alpha: f64,
    /// Cosine threshold above which a negative is damped.
    pub theta: f64,
    /// PatchNCE features sampled per tap layer.
    pub num_features_per_layer: usize,
    /// SegNCE queries sampled per tap layer.
    pub segnce_features_per_layer: usize,
    pub tap_layers: Vec<TapLayer>,
    /// Segmentation classes in domain A (labels `0..num_classes`).
    pub num_classes: usize,
    pub patch_size: usize,
    pub patches_per_image: usize,
    /// Allowed per-patch rotations in degrees. Right angles are applied
    /// losslessly; anything else is resampled bilinearly with reflection.
    pub rotation_set: Vec<f64>,
    pub w_patchnce_a: f64,
    pub w_patchnce_idb: f64,
    pub w_segnce: f64,
    pub w_gan: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub include_self_in_segnce_denominator: bool,
    pub seed: u64,
    pub checkpoint_every: u64,
    /// Discriminator updates per generator update.
    pub d_steps_per_g_step: usize,
    /// Linearly decay the learning rate to zero over the second half of training.
    pub lr_decay: bool,
    pub gen_channels: usize,
    pub gen_res_blocks: usize,
    pub head_hidden: usize,
    pub head_dim: usize,
    pub disc_channels: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            image_size: 256,
            tau: 0.07,
            alpha: 0.5,
            theta: 0.9,
            num_features_per_layer: 256,
            segnce_features_per_layer: 256,
            tap_layers: vec![
                TapLayer::Input,
                TapLayer::Down1,
                TapLayer::Down2,
                TapLayer::Res(3),
                TapLayer::Res(7),
            ],
            num_classes: 0,
            patch_size: 64,
            patches_per_image: 8,
            rotation_set: vec![0.0, 90.0, 180.0, 270.0],
            w_patchnce_a: 1.0,
            w_patchnce_idb: 1.0,
            w_segnce: 1.0,
            w_gan: 1.0,
            lr: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            batch_size: 1,
            total_steps: 200_000,
            include_self_in_segnce_denominator: true,
            seed: 0,
            checkpoint_every: 1000,
            d_steps_per_g_step: 1,
            lr_decay: false,
            gen_channels: 64,
            gen_res_blocks: 9,
            head_hidden: 320,
            head_dim: 256,
            disc_channels: 576,
        }
    }
}

/// Parse a `key=value` override. The value is read as JSON when possible and
/// as a bare string otherwise, so `tap_layers=["input","down1"]`,
/// `alpha=0.3` and `lr_decay=true` all work.
pub fn parse_override(spec: &str) -> Result<(String, Value), ConfigError> {
    let (key, raw) = spec
        .split_once('=')
        .ok_or_else(|| ConfigError::Parse(format!("override `{spec}` is not key=value")))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::Parse(format!("override `{spec}` has an empty key")));
    }
    let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok((key.to_string(), value))
}

impl ExperimentConfig {
    /// Read a config file and apply `overrides` (later ones win).
    pub fn load(path: &Path, overrides: &[(String, Value)]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_str_with(&text, overrides)
    }

    pub fn from_str_with(text: &str, overrides: &[(String, Value)]) -> Result<Self, ConfigError> {
        let mut map = if text.trim().is_empty() {
            Map::new()
        } else {
            match serde_json::from_str::<Value>(text).map_err(|e| ConfigError::Parse(e.to_string()))? {
                Value::Object(m) => m,
                other => {
                    return Err(ConfigError::Parse(format!("expected a JSON object, found {other}")))
                }
            }
        };
        for (k, v) in overrides {
            map.insert(k.clone(), v.clone());
        }
        Self::from_map(map)
    }

    pub fn from_map(map: Map<String, Value>) -> Result<Self, ConfigError> {
        if !map.contains_key("num_classes") {
            return Err(ConfigError::invalid("num_classes", "num_classes required"));
        }
        let cfg: ExperimentConfig =
            serde_json::from_value(Value::Object(map)).map_err(|e| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        std::fs::write(path, self.to_json() + "\n")
            .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        use ConfigError as E;
        let check = |ok: bool, field: &'static str, reason: &str| {
            if ok {
                Ok(())
            } else {
                Err(E::invalid(field, reason))
            }
        };
        check(self.num_classes >= 1, "num_classes", "num_classes must be at least 1")?;
        check(self.num_classes <= 256, "num_classes", "num_classes must be at most 256 (8-bit label maps)")?;
        check(self.image_size >= 16, "image_size", "image_size must be at least 16")?;
        check(self.image_size.is_multiple_of(4), "image_size", "image_size must be divisible by 4")?;
        check(self.tau > 0.0 && self.tau.is_finite(), "tau", "tau must be > 0")?;
        check((0.0..1.0).contains(&self.alpha), "alpha", "alpha must be in [0,1)")?;
        check(self.theta > -1.0 && self.theta <= 1.0, "theta", "theta must be in (-1,1]")?;
        check(
            self.num_features_per_layer >= 2,
            "num_features_per_layer",
            "num_features_per_layer must be at least 2",
        )?;
        check(
            self.segnce_features_per_layer >= 1,
            "segnce_features_per_layer",
            "segnce_features_per_layer must be at least 1",
        )?;
        check(self.patch_size >= 8, "patch_size", "patch_size must be at least 8")?;
        check(self.patch_size <= self.image_size, "patch_size", "patch_size must not exceed image_size")?;
        check(self.patches_per_image >= 1, "patches_per_image", "patches_per_image must be positive")?;
        check(!self.rotation_set.is_empty(), "rotation_set", "rotation_set must not be empty")?;
        check(
            self.rotation_set.iter().all(|r| r.is_finite()),
            "rotation_set",
            "rotation_set entries must be finite",
        )?;
        for (field, w) in [
            ("w_patchnce_a", self.w_patchnce_a),
            ("w_patchnce_idb", self.w_patchnce_idb),
            ("w_segnce", self.w_segnce),
            ("w_gan", self.w_gan),
        ] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(E::invalid(field, format!("{field} must be a finite value >= 0")));
            }
        }
        check(self.lr > 0.0 && self.lr.is_finite(), "lr", "lr must be > 0")?;
        check((0.0..1.0).contains(&self.beta1), "beta1", "beta1 must be in [0,1)")?;
        check((0.0..1.0).contains(&self.beta2), "beta2", "beta2 must be in [0,1)")?;
        check(self.batch_size >= 1, "batch_size", "batch_size must be positive")?;
        check(self.total_steps >= 1, "total_steps", "total_steps must be positive")?;
        check(self.checkpoint_every >= 1, "checkpoint_every", "checkpoint_every must be positive")?;
        check(self.d_steps_per_g_step >= 1, "d_steps_per_g_step", "d_steps_per_g_step must be positive")?;
        check(self.gen_channels >= 1, "gen_channels", "gen_channels must be positive")?;
        check(self.head_hidden >= 1, "head_hidden", "head_hidden must be positive")?;
        check(self.head_dim >= 1, "head_dim", "head_dim must be positive")?;
        check(self.disc_channels >= 1, "disc_channels", "disc_channels must be positive")?;
        check(!self.tap_layers.is_empty(), "tap_layers", "tap_layers must not be empty")?;
        for (i, tap) in self.tap_layers.iter().enumerate() {
            if let TapLayer::Res(n) = tap {
                if *n > self.gen_res_blocks {
                    return Err(E::invalid(
                        "tap_layers",
                        format!("tap layer {tap} does not resolve to an encoder stage ({} residual blocks)", self.gen_res_blocks),
                    ));
                }
            }
            if self.tap_layers[..i].contains(tap) {
                return Err(E::invalid("tap_layers", format!("tap layer {tap} listed twice")));
            }
            let side = self.image_size / tap.stride();
            if self.num_features_per_layer > side * side {
                return Err(E::invalid(
                    "num_features_per_layer",
                    format!("num_features_per_layer exceeds the {side}x{side} feature map at {tap}"),
                ));
            }
            if self.segnce_features_per_layer > side * side {
                return Err(E::invalid(
                    "segnce_features_per_layer",
                    format!("segnce_features_per_layer exceeds the {side}x{side} feature map at {tap}"),
                ));
            }
        }
        Ok(())
    }

    /// True when every rotation is a multiple of 90 degrees.
    pub fn right_angle_rotations(&self) -> bool {
        self.rotation_set.iter().all(|r| (r / 90.0).fract() == 0.0)
    }

    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            patchnce_a: self.w_patchnce_a,
            patchnce_idb: self.w_patchnce_idb,
            segnce: self.w_segnce,
            gan: self.w_gan,
        }
    }
}

/// Weights of the four generator objective terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub patchnce_a: f64,
    pub patchnce_idb: f64,
    pub segnce: f64,
    pub gan: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { patchnce_a: 1.0, patchnce_idb: 1.0, segnce: 1.0, gan: 1.0 }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn load(text: &str) -> Result<ExperimentConfig, ConfigError> {
        ExperimentConfig::from_str_with(text, &[])
    }

    #[test]
    fn only_num_classes_takes_defaults() {
        let cfg = load(r#"{"num_classes": 4}"#).unwrap();
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.theta, 0.9);
        assert_eq!(cfg.num_classes, 4);
        assert_eq!(cfg.tau, 0.07);
        assert_eq!(cfg.tap_layers.len(), 5);
        assert_eq!(cfg.rotation_set, vec![0.0, 90.0, 180.0, 270.0]);
    }

    #[test]
    fn alpha_of_one_is_rejected() {
        let err = load(r#"{"num_classes": 4, "alpha": 1.0}"#).unwrap_err();
        assert!(err.to_string().contains("alpha must be in [0,1)"), "{err}");
        assert!(matches!(err, ConfigError::Invalid { field: "alpha", .. }));
    }

    #[test]
    fn empty_file_requires_num_classes() {
        let err = load("").unwrap_err();
        assert!(err.to_string().contains("num_classes required"), "{err}");
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = ExperimentConfig::load(Path::new("/nonexistent/cfg.json"), &[]).unwrap_err();
        assert!(matches!(err, ConfigError::Io { .. }));
    }

    #[test]
    fn invariants_are_named() {
        let cases = [
            (r#"{"num_classes": 2, "tau": 0}"#, "tau"),
            (r#"{"num_classes": 2, "theta": -1}"#, "theta"),
            (r#"{"num_classes": 2, "patch_size": 512}"#, "patch_size"),
            (r#"{"num_classes": 2, "num_features_per_layer": 1}"#, "num_features_per_layer"),
            (r#"{"num_classes": 2, "tap_layers": ["input", "res12"]}"#, "tap_layers"),
            (r#"{"num_classes": 2, "w_segnce": -1}"#, "w_segnce"),
        ];
        for (text, field) in cases {
            match load(text) {
                Err(ConfigError::Invalid { field: f, .. }) => assert_eq!(f, field, "{text}"),
                other => panic!("{text}: expected invalid {field}, got {other:?}"),
            }
        }
    }

    #[test]
    fn unknown_keys_and_tap_names_are_errors() {
        assert!(matches!(load(r#"{"num_classes": 2, "alhpa": 0.1}"#), Err(ConfigError::Parse(_))));
        assert!(matches!(
            load(r#"{"num_classes": 2, "tap_layers": ["decoder"]}"#),
            Err(ConfigError::Parse(_))
        ));
    }

    #[test]
    fn overrides_win_over_file() {
        let ov = vec![parse_override("w_segnce=0").unwrap(), parse_override("tap_layers=[\"input\"]").unwrap()];
        let cfg = ExperimentConfig::from_str_with(r#"{"num_classes": 3, "w_segnce": 2.0}"#, &ov).unwrap();
        assert_eq!(cfg.w_segnce, 0.0);
        assert_eq!(cfg.tap_layers, vec![TapLayer::Input]);
        assert!(parse_override("novalue").is_err());
    }

    #[test]
    fn tap_layer_names_round_trip() {
        for t in [TapLayer::Input, TapLayer::Stem, TapLayer::Down1, TapLayer::Down2, TapLayer::Res(7)] {
            assert_eq!(t.to_string().parse::<TapLayer>().unwrap(), t);
        }
        assert!("res0".parse::<TapLayer>().is_err());
    }

    proptest! {
        #[test]
        fn save_load_round_trip(
            alpha in 0.0f64..0.999,
            theta in -0.99f64..1.0,
            tau in 0.001f64..2.0,
            classes in 1usize..20,
            seed in any::<u64>(),
            self_term in any::<bool>(),
        ) {
            let text = serde_json::json!({
                "num_classes": classes, "alpha": alpha, "theta": theta, "tau": tau,
                "seed": seed, "include_self_in_segnce_denominator": self_term,
            }).to_string();
            let first = load(&text).unwrap();
            let second = load(&first.to_json()).unwrap();
            prop_assert_eq!(first, second);
        }
    }
}

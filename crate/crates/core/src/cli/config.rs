//! Flat `key = value` run configuration and manifests.
//!
//! The format is line-oriented and diffable: one dotted key per line, `#`
//! comments, no sections. Unknown keys are hard errors so a typo can never
//! silently fall back to a default. Defaults carry the published
//! hyperparameters (k = 13, alpha = 0.25, gamma = 2.0,
//! lambda = 1.0/5.0/2.0/0.25).

use crate::decoder::{DflParams, LossWeights};
use crate::depthnet::DepthConfig;
use crate::geom::PerceptionRange;
use crate::model::{ModelConfig, PeVariant};
use crate::synthscene::SceneConfig;
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: expected 'key = value', got '{text}'")]
    Malformed { line: usize, text: String },
    #[error("line {line}: unknown key '{key}'")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: duplicate key '{key}'")]
    DuplicateKey { line: usize, key: String },
    #[error("key '{key}': cannot parse '{value}': {reason}")]
    BadValue {
        key: String,
        value: String,
        reason: String,
    },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Every tunable of a run. Field order here is the canonical serialization
/// order.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data_scenes: usize,
    pub data_views: usize,
    pub data_channels: usize,
    pub data_height: usize,
    pub data_width: usize,
    pub data_boxes_min: usize,
    pub data_boxes_max: usize,
    pub data_classes: usize,
    pub data_noise: f64,
    pub data_ego_step: f64,
    pub data_dt: f64,
    pub data_radius_min: f64,
    pub data_radius_max: f64,
    pub range_min: [f64; 3],
    pub range_max: [f64; 3],
    pub depth_min: f64,
    pub depth_max: f64,
    pub depth_bins: usize,
    pub model_dim: usize,
    pub model_layers: usize,
    pub model_queries: usize,
    pub model_k_offsets: usize,
    pub model_head_hidden: usize,
    pub model_pe_variant: PeVariant,
    pub model_pe_axis_dim: usize,
    pub model_ray_candidates: usize,
    pub loss_alpha: f64,
    pub loss_gamma: f64,
    pub loss_lambda1: f64,
    pub loss_lambda2: f64,
    pub loss_lambda3: f64,
    pub loss_lambda4: f64,
    pub optim_lr: f64,
    pub optim_beta1: f64,
    pub optim_beta2: f64,
    pub optim_eps: f64,
    pub optim_weight_decay: f64,
    pub train_epochs: usize,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    pub eval_ap_threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            data_scenes: 250,
            data_views: 4,
            data_channels: 12,
            data_height: 16,
            data_width: 16,
            data_boxes_min: 2,
            data_boxes_max: 6,
            data_classes: 3,
            data_noise: 0.25,
            data_ego_step: 1.5,
            data_dt: 0.5,
            data_radius_min: 6.0,
            data_radius_max: 48.0,
            range_min: [-50.0, -50.0, -5.0],
            range_max: [50.0, 50.0, 3.0],
            depth_min: 0.5,
            depth_max: 72.0,
            depth_bins: 16,
            model_dim: 64,
            model_layers: 3,
            model_queries: 32,
            model_k_offsets: 13,
            model_head_hidden: 64,
            model_pe_variant: PeVariant::Object,
            model_pe_axis_dim: 8,
            model_ray_candidates: 8,
            loss_alpha: 0.25,
            loss_gamma: 2.0,
            loss_lambda1: 1.0,
            loss_lambda2: 5.0,
            loss_lambda3: 2.0,
            loss_lambda4: 0.25,
            optim_lr: 3e-3,
            optim_beta1: 0.9,
            optim_beta2: 0.999,
            optim_eps: 1e-8,
            optim_weight_decay: 0.0,
            train_epochs: 4,
            train_scenes: 200,
            eval_scenes: 50,
            eval_ap_threshold: 2.0,
        }
    }
}

macro_rules! config_keys {
    ($($key:literal => $field:ident : $kind:tt),+ $(,)?) => {
        impl RunConfig {
            pub fn serialize(&self) -> String {
                let mut out = String::new();
                $(
                    out.push_str(&format!("{} = {}\n", $key, write_value!(self, $field, $kind)));
                )+
                out
            }

            fn apply(&mut self, key: &str, value: &str) -> Result<bool, ConfigError> {
                match key {
                    $(
                        $key => {
                            read_value!(self, $field, $kind, key, value);
                            Ok(true)
                        }
                    )+
                    _ => Ok(false),
                }
            }
        }
    };
}

macro_rules! write_value {
    ($self:ident, $field:ident, u64) => {
        $self.$field.to_string()
    };
    ($self:ident, $field:ident, usize) => {
        $self.$field.to_string()
    };
    ($self:ident, $field:ident, f64) => {
        format_f64($self.$field)
    };
    ($self:ident, $field:ident, variant) => {
        $self.$field.name().to_string()
    };
    ($self:ident, $field:ident, (f64, $idx:expr)) => {
        format_f64($self.$field[$idx])
    };
}

macro_rules! read_value {
    ($self:ident, $field:ident, u64, $key:ident, $value:ident) => {
        $self.$field = parse_num::<u64>($key, $value)?
    };
    ($self:ident, $field:ident, usize, $key:ident, $value:ident) => {
        $self.$field = parse_num::<usize>($key, $value)?
    };
    ($self:ident, $field:ident, f64, $key:ident, $value:ident) => {
        $self.$field = parse_num::<f64>($key, $value)?
    };
    ($self:ident, $field:ident, variant, $key:ident, $value:ident) => {
        $self.$field = PeVariant::parse($value).ok_or_else(|| ConfigError::BadValue {
            key: $key.to_string(),
            value: $value.to_string(),
            reason: "expected ray | point | object".to_string(),
        })?
    };
    ($self:ident, $field:ident, (f64, $idx:expr), $key:ident, $value:ident) => {
        $self.$field[$idx] = parse_num::<f64>($key, $value)?
    };
}

config_keys! {
    "seed" => seed: u64,
    "data.scenes" => data_scenes: usize,
    "data.views" => data_views: usize,
    "data.channels" => data_channels: usize,
    "data.height" => data_height: usize,
    "data.width" => data_width: usize,
    "data.boxes_min" => data_boxes_min: usize,
    "data.boxes_max" => data_boxes_max: usize,
    "data.classes" => data_classes: usize,
    "data.noise" => data_noise: f64,
    "data.ego_step" => data_ego_step: f64,
    "data.dt" => data_dt: f64,
    "data.radius_min" => data_radius_min: f64,
    "data.radius_max" => data_radius_max: f64,
    "range.x_min" => range_min: (f64, 0),
    "range.y_min" => range_min: (f64, 1),
    "range.z_min" => range_min: (f64, 2),
    "range.x_max" => range_max: (f64, 0),
    "range.y_max" => range_max: (f64, 1),
    "range.z_max" => range_max: (f64, 2),
    "depth.min" => depth_min: f64,
    "depth.max" => depth_max: f64,
    "depth.bins" => depth_bins: usize,
    "model.dim" => model_dim: usize,
    "model.layers" => model_layers: usize,
    "model.queries" => model_queries: usize,
    "model.k_offsets" => model_k_offsets: usize,
    "model.head_hidden" => model_head_hidden: usize,
    "model.pe_variant" => model_pe_variant: variant,
    "model.pe_axis_dim" => model_pe_axis_dim: usize,
    "model.ray_candidates" => model_ray_candidates: usize,
    "loss.alpha" => loss_alpha: f64,
    "loss.gamma" => loss_gamma: f64,
    "loss.lambda1" => loss_lambda1: f64,
    "loss.lambda2" => loss_lambda2: f64,
    "loss.lambda3" => loss_lambda3: f64,
    "loss.lambda4" => loss_lambda4: f64,
    "optim.lr" => optim_lr: f64,
    "optim.beta1" => optim_beta1: f64,
    "optim.beta2" => optim_beta2: f64,
    "optim.eps" => optim_eps: f64,
    "optim.weight_decay" => optim_weight_decay: f64,
    "train.epochs" => train_epochs: usize,
    "train.scenes" => train_scenes: usize,
    "eval.scenes" => eval_scenes: usize,
    "eval.ap_threshold" => eval_ap_threshold: f64,
}

/// f64 formatting that round-trips exactly through parse.
fn format_f64(v: f64) -> String {
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().unwrap().to_bits(), v.to_bits());
    s
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| ConfigError::BadValue {
        key: key.to_string(),
        value: value.to_string(),
        reason: e.to_string(),
    })
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig, ConfigError> {
        let mut cfg = RunConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = raw.split('#').next().unwrap_or("").trim();
            if stripped.is_empty() {
                continue;
            }
            let Some((key, value)) = stripped.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line,
                    text: raw.to_string(),
                });
            };
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::DuplicateKey {
                    line,
                    key: key.to_string(),
                });
            }
            if !cfg.apply(key, value)? {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig, ConfigError> {
        RunConfig::parse(&std::fs::read_to_string(path)?)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.model_queries < self.data_boxes_max {
            return Err(ConfigError::Invalid(format!(
                "model.queries ({}) must cover data.boxes_max ({})",
                self.model_queries, self.data_boxes_max
            )));
        }
        if self.train_scenes + self.eval_scenes > self.data_scenes {
            return Err(ConfigError::Invalid(format!(
                "train.scenes + eval.scenes ({} + {}) exceed data.scenes ({})",
                self.train_scenes, self.eval_scenes, self.data_scenes
            )));
        }
        if self.model_pe_axis_dim == 0 || self.model_pe_axis_dim % 2 != 0 {
            return Err(ConfigError::Invalid(format!(
                "model.pe_axis_dim must be even and positive, got {}",
                self.model_pe_axis_dim
            )));
        }
        if self.model_ray_candidates == 0 {
            return Err(ConfigError::Invalid(
                "model.ray_candidates must be at least 1".to_string(),
            ));
        }
        self.perception_range()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.depth_config()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        DflParams::new(self.loss_alpha, self.loss_gamma)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        for (name, v) in [
            ("loss.lambda1", self.loss_lambda1),
            ("loss.lambda2", self.loss_lambda2),
            ("loss.lambda3", self.loss_lambda3),
            ("loss.lambda4", self.loss_lambda4),
        ] {
            if !(v >= 0.0) {
                return Err(ConfigError::Invalid(format!("{name} must be >= 0, got {v}")));
            }
        }
        Ok(())
    }

    pub fn perception_range(&self) -> Result<PerceptionRange, crate::geom::GeomError> {
        PerceptionRange::new(self.range_min, self.range_max)
    }

    pub fn depth_config(&self) -> Result<DepthConfig, crate::depthnet::DepthNetError> {
        DepthConfig::new(self.depth_min, self.depth_max, self.depth_bins)
    }

    pub fn scene_config(&self) -> SceneConfig {
        SceneConfig {
            n_views: self.data_views,
            channels: self.data_channels,
            height: self.data_height,
            width: self.data_width,
            boxes_min: self.data_boxes_min,
            boxes_max: self.data_boxes_max,
            classes: self.data_classes,
            noise: self.data_noise,
            ego_step: self.data_ego_step,
            dt: self.data_dt,
            radius_min: self.data_radius_min,
            radius_max: self.data_radius_max,
            d_max: self.depth_max,
            range: self.perception_range().expect("validated"),
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            channels: self.data_channels,
            height: self.data_height,
            width: self.data_width,
            n_views: self.data_views,
            classes: self.data_classes,
            dim: self.model_dim,
            layers: self.model_layers,
            queries: self.model_queries,
            k_offsets: self.model_k_offsets,
            head_hidden: self.model_head_hidden,
            pe_variant: self.model_pe_variant,
            pe_axis_dim: self.model_pe_axis_dim,
            ray_candidates: self.model_ray_candidates,
            depth: self.depth_config().expect("validated"),
            range: self.perception_range().expect("validated"),
            dfl: DflParams {
                alpha: self.loss_alpha,
                gamma: self.loss_gamma,
            },
            weights: LossWeights {
                pde: self.loss_lambda1,
                ode: self.loss_lambda2,
                dfl: self.loss_lambda3,
                reg: self.loss_lambda4,
            },
        }
    }

    pub fn adam_config(&self) -> crate::autodiff::AdamConfig {
        crate::autodiff::AdamConfig {
            lr: self.optim_lr,
            beta1: self.optim_beta1,
            beta2: self.optim_beta2,
            eps: self.optim_eps,
            weight_decay: self.optim_weight_decay,
        }
    }
}

/// Run record written next to every checkpoint: the full config snapshot,
/// the dataset content hash, wall-clock, final metrics, and the checkpoint
/// path. Written atomically (temp file + rename).
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub config: RunConfig,
    pub dataset_hash: String,
    pub wall_seconds: f64,
    pub checkpoint_path: String,
    pub metrics: BTreeMap<String, Option<f64>>,
}

impl RunManifest {
    pub fn serialize(&self) -> String {
        let mut out = String::from("manifest.version = 1\n");
        for line in self.config.serialize().lines() {
            out.push_str("config.");
            out.push_str(line);
            out.push('\n');
        }
        out.push_str(&format!("dataset.sha256 = {}\n", self.dataset_hash));
        out.push_str(&format!("run.wall_seconds = {}\n", format_f64(self.wall_seconds)));
        out.push_str(&format!("run.checkpoint = {}\n", self.checkpoint_path));
        for (k, v) in &self.metrics {
            let value = v
                .map(format_f64)
                .unwrap_or_else(|| "undefined".to_string());
            out.push_str(&format!("metrics.{k} = {value}\n"));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<(), std::io::Error> {
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, self.serialize())?;
        std::fs::rename(&tmp, path)
    }

    pub fn parse(text: &str) -> Result<RunManifest, ConfigError> {
        let mut config_lines = String::new();
        let mut dataset_hash = String::new();
        let mut wall_seconds = 0.0;
        let mut checkpoint_path = String::new();
        let mut metrics = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let stripped = raw.trim();
            if stripped.is_empty() {
                continue;
            }
            let Some((key, value)) = stripped.split_once('=') else {
                return Err(ConfigError::Malformed {
                    line,
                    text: raw.to_string(),
                });
            };
            let key = key.trim();
            let value = value.trim();
            if let Some(ck) = key.strip_prefix("config.") {
                config_lines.push_str(&format!("{ck} = {value}\n"));
            } else if key == "dataset.sha256" {
                dataset_hash = value.to_string();
            } else if key == "run.wall_seconds" {
                wall_seconds = parse_num::<f64>(key, value)?;
            } else if key == "run.checkpoint" {
                checkpoint_path = value.to_string();
            } else if let Some(mk) = key.strip_prefix("metrics.") {
                let v = if value == "undefined" {
                    None
                } else {
                    Some(parse_num::<f64>(key, value)?)
                };
                metrics.insert(mk.to_string(), v);
            } else if key == "manifest.version" {
                if value != "1" {
                    return Err(ConfigError::Invalid(format!(
                        "unsupported manifest version {value}"
                    )));
                }
            } else {
                return Err(ConfigError::UnknownKey {
                    line,
                    key: key.to_string(),
                });
            }
        }
        Ok(RunManifest {
            config: RunConfig::parse(&config_lines)?,
            dataset_hash,
            wall_seconds,
            checkpoint_path,
            metrics,
        })
    }

    pub fn load(path: &Path) -> Result<RunManifest, ConfigError> {
        RunManifest::parse(&std::fs::read_to_string(path)?)
    }
}

/// The config embedded in a manifest, for exact replay.
pub fn manifest_to_config(manifest: &RunManifest) -> RunConfig {
    manifest.config.clone()
}

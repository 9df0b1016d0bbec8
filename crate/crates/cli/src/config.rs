//! Run configuration: one strict JSON document covering the scene, the
//! encoder, the network, training, and evaluation. Unknown keys are
//! rejected so hyper-parameter typos cannot pass silently.

use std::path::Path;

use serde::{Deserialize, Serialize};
use spikefpn_core::detection::AnchorSet;
use spikefpn_core::encoding::EncoderConfig;
use spikefpn_core::network::NetworkSpec;
use spikefpn_core::synth::SceneConfig;
use spikefpn_core::training::TrainConfig;

use crate::error::{CliError, Result};

pub const CONFIG_VERSION: u32 = 1;

/// Decode/score settings used by eval, infer and validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub score_threshold: f64,
    pub nms_iou: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions { score_threshold: 0.3, nms_iou: 0.5 }
    }
}

/// How anchors are obtained.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum AnchorConfig {
    /// Fixed synthetic-scene set: {(8,8),(16,12),(24,24)} x {1,2,4}.
    Default,
    /// K-means over the training boxes (k anchors per scale).
    Kmeans,
    /// Explicit anchors per scale.
    Fixed { per_scale: Vec<Vec<(f64, f64)>> },
}

impl Default for AnchorConfig {
    fn default() -> Self {
        AnchorConfig::Default
    }
}

impl AnchorConfig {
    /// Resolve to a concrete anchor set; `boxes` feeds the k-means mode.
    pub fn resolve(&self, boxes: &[(f64, f64)], k: usize, seed: u64) -> Result<AnchorSet> {
        match self {
            AnchorConfig::Default => Ok(AnchorSet::default_synthetic()),
            AnchorConfig::Kmeans => {
                Ok(spikefpn_core::detection::kmeans_anchors(boxes, 3, k, seed)?)
            }
            AnchorConfig::Fixed { per_scale } => Ok(AnchorSet { per_scale: per_scale.clone() }),
        }
    }
}

/// The whole run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub version: u32,
    pub seed: u64,
    pub scene: SceneConfig,
    pub encoder: EncoderConfig,
    pub network: NetworkSpec,
    pub train: TrainConfig,
    pub eval: EvalOptions,
    pub anchors: AnchorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            version: CONFIG_VERSION,
            seed: 1,
            scene: SceneConfig::default(),
            encoder: EncoderConfig::default(),
            network: NetworkSpec::desk(),
            train: TrainConfig::default(),
            eval: EvalOptions::default(),
            anchors: AnchorConfig::Default,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(CliError::io(path))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        if cfg.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "config version {} unsupported (expected {CONFIG_VERSION})",
                cfg.version
            )));
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.encoder.validate()?;
        // The network consumes what the encoder produces.
        if self.network.time_steps != self.encoder.stacks
            || self.network.frames_per_stack != self.encoder.frames_per_stack
        {
            return Err(CliError::Config(format!(
                "network expects S={} C={} but the encoder produces S={} C={}",
                self.network.time_steps,
                self.network.frames_per_stack,
                self.encoder.stacks,
                self.encoder.frames_per_stack
            )));
        }
        if (self.scene.width as usize, self.scene.height as usize)
            != (self.network.input_hw.1, self.network.input_hw.0)
        {
            return Err(CliError::Config(format!(
                "scene geometry {}x{} does not match the network input {}x{}",
                self.scene.width,
                self.scene.height,
                self.network.input_hw.1,
                self.network.input_hw.0
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }
}

//! Model and training configuration.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::io::SequenceSpec;

/// Which temporal context streams the coder consumes. `Base` keeps only the
/// warped local context from the nearest reference; `Nlc` adds the non-local
/// stream for that reference; `Mnlc` mines all four streams from both
/// references.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextVariant {
    Base,
    Nlc,
    Mnlc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Multi-scale feature channels, full scale ladder is {48, 64, 96}.
    pub feat_channels: [usize; 3],
    /// Latent channels at the coarsest scale.
    pub latent_channels: usize,
    /// Attention embedding width d.
    pub embed_dim: usize,
    pub num_heads: usize,
    /// Offset-diversity group count G.
    pub offset_groups: usize,
    /// Negative slope of every activation in the network.
    pub leaky_slope: f64,
    /// Lower clamp for predicted entropy-model scales.
    pub sigma_min: f64,
    /// Side-information cost model for carried motion, bits per pixel.
    pub motion_bits_per_pixel: f64,
    pub variant: ContextVariant,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            feat_channels: [8, 12, 16],
            latent_channels: 16,
            embed_dim: 8,
            num_heads: 4,
            offset_groups: 4,
            leaky_slope: 0.01,
            sigma_min: 0.04,
            motion_bits_per_pixel: 0.0,
            variant: ContextVariant::Mnlc,
        }
    }
}

impl ModelConfig {
    /// Full-scale ladder from the reference network.
    pub fn full_scale() -> Self {
        ModelConfig {
            feat_channels: [48, 64, 96],
            latent_channels: 96,
            embed_dim: 48,
            ..ModelConfig::default()
        }
    }

    /// Encoder mid-feature channels per scale; scale 0 is the frame itself.
    pub fn enc_mid_channels(&self) -> [usize; 3] {
        [3, self.feat_channels[1], self.feat_channels[2]]
    }

    /// Decoder mid-feature channels per scale.
    pub fn dec_mid_channels(&self) -> [usize; 3] {
        self.feat_channels
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % self.num_heads != 0 {
            return Err(Error::config(format!(
                "embed_dim {} must be a positive multiple of num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.offset_groups == 0 {
            return Err(Error::config("offset_groups must be positive"));
        }
        if self.sigma_min <= 0.0 {
            return Err(Error::config("sigma_min must be positive"));
        }
        if self.feat_channels.iter().any(|&c| c == 0) || self.latent_channels == 0 {
            return Err(Error::config("channel counts must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    Cascaded,
    Pcfs,
    PcfsShifted,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowSource {
    /// Ground-truth flow from the generator.
    Exact,
    /// Zero motion; the mining modules must compensate.
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistortionKind {
    Mse,
    /// Exposed for completeness; the shipped presets optimize MSE.
    MsSsim,
}

/// Rate-distortion tradeoff ladder used by the MSE-optimized presets.
pub const MSE_LAMBDAS: [f64; 4] = [85.0, 170.0, 380.0, 840.0];
/// Ladder for MS-SSIM-optimized training.
pub const MSSSIM_LAMBDAS: [f64; 4] = [7.68, 15.36, 30.72, 61.44];

/// Fine-tuning schedule presets: (frames, groups).
pub const FINETUNE_SCHEDULE: [(usize, usize); 4] = [(6, 1), (20, 1), (38, 2), (55, 3)];

/// Group count for a fine-tuning length, following the shipped schedule.
pub fn preset_groups_for_frames(frames: usize) -> usize {
    FINETUNE_SCHEDULE
        .iter()
        .rev()
        .find(|(f, _)| frames >= *f)
        .map(|&(_, g)| g)
        .unwrap_or(1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    /// Inter frames per optimization sample (T).
    pub frames: usize,
    /// Number of groups the T frames are split into (equal sizes).
    pub groups: usize,
    pub lr: f64,
    pub seed: u64,
    pub steps: usize,
    pub strategy: Strategy,
    pub sequence: SequenceSpec,
    pub flow_source: FlowSource,
    pub distortion: DistortionKind,
    /// Intra stub quality exponent (step 2^q).
    pub intra_q: u8,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda: 170.0,
            frames: 3,
            groups: 1,
            lr: 1e-3,
            seed: 7,
            steps: 300,
            strategy: Strategy::Cascaded,
            sequence: SequenceSpec::default(),
            flow_source: FlowSource::Exact,
            distortion: DistortionKind::Mse,
            intra_q: 3,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.lambda <= 0.0 {
            return Err(Error::config("lambda must be positive"));
        }
        if self.lr <= 0.0 {
            return Err(Error::config("learning rate must be positive"));
        }
        if self.frames == 0 {
            return Err(Error::config("frames must be positive"));
        }
        if self.groups == 0 || self.groups > self.frames {
            return Err(Error::config(format!(
                "groups {} must be in 1..={}",
                self.groups, self.frames
            )));
        }
        self.sequence.validate()?;
        Ok(())
    }

    /// Equal-size group boundaries `t_0 = 0 < ... < t_G = frames`.
    pub fn group_boundaries(&self) -> Vec<usize> {
        equal_boundaries(self.frames, self.groups)
    }
}

/// Splits `frames` into `groups` contiguous spans as evenly as possible;
/// returns the G+1 boundaries starting at 0.
pub fn equal_boundaries(frames: usize, groups: usize) -> Vec<usize> {
    let mut bounds = Vec::with_capacity(groups + 1);
    bounds.push(0);
    for j in 1..=groups {
        bounds.push(frames * j / groups);
    }
    bounds
}

/// Validates explicit boundaries: strictly increasing, starting at zero,
/// ending at `frames`.
pub fn validate_boundaries(bounds: &[usize], frames: usize) -> Result<()> {
    if bounds.len() < 2 || bounds[0] != 0 || *bounds.last().unwrap() != frames {
        return Err(Error::config(format!(
            "boundaries {:?} must start at 0 and end at {}",
            bounds, frames
        )));
    }
    for pair in bounds.windows(2) {
        if pair[1] <= pair[0] {
            return Err(Error::config(format!(
                "boundaries {:?} must be strictly increasing",
                bounds
            )));
        }
    }
    Ok(())
}

/// Stable hex digest of a serializable config, recorded in manifests and
/// checkpoints for reproducibility.
pub fn config_hash<T: Serialize>(cfg: &T) -> String {
    let json = serde_json::to_string(cfg).expect("config serializes");
    let mut hasher = Sha256::new();
    hasher.update(json.as_bytes());
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundaries_partition_range() {
        assert_eq!(equal_boundaries(55, 3), vec![0, 18, 36, 55]);
        assert_eq!(equal_boundaries(6, 1), vec![0, 6]);
        validate_boundaries(&[0, 18, 36, 55], 55).unwrap();
        assert!(validate_boundaries(&[0, 0, 55], 55).is_err());
        assert!(validate_boundaries(&[1, 55], 55).is_err());
    }

    #[test]
    fn schedule_presets() {
        assert_eq!(preset_groups_for_frames(6), 1);
        assert_eq!(preset_groups_for_frames(20), 1);
        assert_eq!(preset_groups_for_frames(38), 2);
        assert_eq!(preset_groups_for_frames(55), 3);
    }

    #[test]
    fn hash_is_stable_and_sensitive() {
        let a = TrainConfig::default();
        let mut b = TrainConfig::default();
        assert_eq!(config_hash(&a), config_hash(&b));
        b.lambda = 85.0;
        assert_ne!(config_hash(&a), config_hash(&b));
    }

    #[test]
    fn invalid_config_rejected() {
        let mut cfg = TrainConfig::default();
        cfg.model.embed_dim = 9;
        cfg.model.num_heads = 4;
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}

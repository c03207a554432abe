//! Pipeline configuration, JSON round-trip and per-stage seed derivation.

use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::clustering::KMeansConfig;
use crate::error::{Error, Result};
use crate::query::LossTerms;
use crate::reloc::{DeformableConfig, OffsetVariant};

pub const SEED_ENV: &str = "MONOCLUE_SEED";

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl FromStr for Precision {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(Error::Config(format!("unknown precision {other:?}"))),
        }
    }
}

/// How local clusters relate to pyramid levels.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterFusion {
    /// One clustering per level.
    #[default]
    PerLevel,
    /// One clustering over the masked pixels of all levels, shared by every level.
    Concatenate,
}

impl FromStr for ClusterFusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_level" | "per-level" => Ok(ClusterFusion::PerLevel),
            "concatenate" => Ok(ClusterFusion::Concatenate),
            other => Err(Error::Config(format!("unknown cluster fusion {other:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneSpec {
    pub n_objects: usize,
    pub noise_sigma: f64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            n_objects: 3,
            noise_sigma: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub strides: Vec<usize>,
    pub channels: usize,
    pub n_l: usize,
    pub n_g: usize,
    pub n_b: usize,
    pub n_q: usize,
    pub heads: usize,
    pub sample_points: usize,
    pub kmeans: KMeansConfig,
    pub cluster_fusion: ClusterFusion,
    pub offset_variant: OffsetVariant,
    pub softmax_temperature: f64,
    pub lambda: f64,
    pub confidence_threshold: f64,
    pub precision: Precision,
    pub depth_bins: usize,
    pub max_depth: f64,
    /// Master seed; every stage draws from `derive_seed(seed, stage)`.
    pub seed: u64,
    pub scene: SceneSpec,
    /// Externally supplied `l_2d`, `l_3d`, `l_depth`; `l_region` is computed.
    pub external_loss: LossTerms,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            image_height: 128,
            image_width: 384,
            strides: vec![8, 16, 32, 64],
            channels: 32,
            n_l: 10,
            n_g: 3,
            n_b: 3,
            n_q: 50,
            heads: 8,
            sample_points: 4,
            kmeans: KMeansConfig::default(),
            cluster_fusion: ClusterFusion::PerLevel,
            offset_variant: OffsetVariant::Supplementary,
            softmax_temperature: 1.0,
            lambda: 1.0,
            confidence_threshold: 0.2,
            precision: Precision::F32,
            depth_bins: 80,
            max_depth: 60.0,
            seed: 0,
            scene: SceneSpec::default(),
            external_loss: LossTerms::default(),
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// Replaces `seed` with `MONOCLUE_SEED` when that variable is set.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.seed = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{SEED_ENV}={v:?} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn deformable(&self) -> DeformableConfig {
        DeformableConfig {
            heads: self.heads,
            sample_points: self.sample_points,
        }
    }

    /// Per-level `(h, w)` extents.
    pub fn level_extents(&self) -> Vec<(usize, usize)> {
        self.strides
            .iter()
            .map(|&s| (self.image_height / s, self.image_width / s))
            .collect()
    }

    pub fn compact_rows(&self) -> usize {
        self.n_l + self.n_g + self.n_b
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.strides.is_empty() || self.strides.len() > crate::query::REGION_TERMS {
            return fail(format!("need 1..=5 strides, got {}", self.strides.len()));
        }
        if self.strides.windows(2).any(|w| w[1] <= w[0]) || self.strides[0] == 0 {
            return fail("strides must be positive and strictly increasing".into());
        }
        for &s in &self.strides {
            if !self.image_height.is_multiple_of(s) || !self.image_width.is_multiple_of(s) || self.image_height < s || self.image_width < s {
                return fail(format!(
                    "image {}x{} is not a positive multiple of stride {s}",
                    self.image_height, self.image_width
                ));
            }
        }
        if self.channels == 0 || self.n_l == 0 || self.n_b == 0 || self.n_q == 0 {
            return fail("channels, n_l, n_b and n_q must be ≥ 1".into());
        }
        self.deformable().validate(self.channels)?;
        self.kmeans.validate()?;
        if !(self.softmax_temperature > 0.0 && self.softmax_temperature.is_finite()) {
            return fail("softmax_temperature must be > 0".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail("lambda must be ≥ 0".into());
        }
        if !(0.0..=1.0).contains(&self.confidence_threshold) {
            return fail("confidence_threshold must lie in [0, 1]".into());
        }
        if self.depth_bins == 0 || !(self.max_depth > 0.0 && self.max_depth.is_finite()) {
            return fail("depth_bins must be ≥ 1 and max_depth > 0".into());
        }
        if !(self.scene.noise_sigma >= 0.0 && self.scene.noise_sigma.is_finite()) {
            return fail("scene.noise_sigma must be ≥ 0".into());
        }
        Ok(())
    }
}

/// SplitMix64 output function.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed for a named stage: FNV-1a of the label, xored into the master
/// seed, then one SplitMix64 round.
pub fn derive_seed(master: u64, stage: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in stage.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix64(master ^ h)
}

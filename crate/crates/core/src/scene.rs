//! Seeded synthetic feature pyramids with planted rectangular objects.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::clustering::{FeaturePyramid, PyramidLevel, SegmentationMask};
use crate::config::{PipelineConfig, SceneSpec};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// A planted object. Position and extent are in image pixels and are
/// multiples of the coarsest stride, so every level sees whole pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedObject {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
    pub prototype: Vec<f64>,
    /// Yaw in radians; carried as metadata only.
    pub orientation: f64,
}

impl PlantedObject {
    /// Whether pixel `(i, j)` of a level with the given stride lies in the footprint.
    pub fn covers(&self, i: usize, j: usize, stride: usize) -> bool {
        let (y, x) = (i * stride, j * stride);
        y >= self.top && y < self.top + self.height && x >= self.left && x < self.left + self.width
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene<T> {
    pub pyramid: FeaturePyramid<T>,
    pub masks: Vec<SegmentationMask>,
    pub objects: Vec<PlantedObject>,
    pub seed: u64,
}

/// Objects get `N(0, 1)` prototypes and pixels `prototype + U(−σ, σ)`;
/// background pixels are independent `N(0, 1)`. Later objects paint over
/// earlier ones where footprints overlap.
pub fn generate_scene<T: Real>(config: &PipelineConfig, spec: &SceneSpec, seed: u64) -> Result<SyntheticScene<T>> {
    if !(spec.noise_sigma >= 0.0 && spec.noise_sigma.is_finite()) {
        return Err(Error::Config("noise_sigma must be ≥ 0".into()));
    }
    let (ih, iw) = (config.image_height, config.image_width);
    let coarse = *config.strides.last().ok_or(Error::EmptyInput)?;
    if coarse == 0 || coarse > ih || coarse > iw {
        return Err(Error::ExtentsTooSmall(format!(
            "a {coarse}-pixel object footprint does not fit a {ih}x{iw} image"
        )));
    }
    let c = config.channels;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let (gh, gw) = (ih / coarse, iw / coarse);

    let objects: Vec<PlantedObject> = (0..spec.n_objects)
        .map(|_| {
            let bh = rng.random_range(1..=(gh / 2).max(1));
            let bw = rng.random_range(1..=(gw / 2).max(1));
            let top = rng.random_range(0..=gh - bh);
            let left = rng.random_range(0..=gw - bw);
            PlantedObject {
                top: top * coarse,
                left: left * coarse,
                height: bh * coarse,
                width: bw * coarse,
                prototype: (0..c).map(|_| normal.sample(&mut rng)).collect(),
                orientation: rng.random_range(-std::f64::consts::PI..std::f64::consts::PI),
            }
        })
        .collect();

    let mut levels = Vec::with_capacity(config.strides.len());
    let mut masks = Vec::with_capacity(config.strides.len());
    for &stride in &config.strides {
        let (h, w) = (ih / stride, iw / stride);
        let plane = h * w;
        let mut data: Vec<T> = (0..c * plane).map(|_| T::lit(normal.sample(&mut rng))).collect();
        let mut bits = vec![false; plane];
        for obj in &objects {
            for i in 0..h {
                for j in 0..w {
                    if !obj.covers(i, j, stride) {
                        continue;
                    }
                    bits[i * w + j] = true;
                    for (ch, &p) in obj.prototype.iter().enumerate() {
                        let noise = if spec.noise_sigma > 0.0 {
                            rng.random_range(-spec.noise_sigma..=spec.noise_sigma)
                        } else {
                            0.0
                        };
                        data[ch * plane + i * w + j] = T::lit(p + noise);
                    }
                }
            }
        }
        levels.push(PyramidLevel {
            stride,
            features: Tensor::new(vec![c, h, w], data)?,
        });
        masks.push(SegmentationMask::new(h, w, bits)?);
    }
    Ok(SyntheticScene {
        pyramid: FeaturePyramid::new(ih, iw, levels)?,
        masks,
        objects,
        seed,
    })
}

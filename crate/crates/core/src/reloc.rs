//! Similarity-based re-localization.
//!
//! Per level: a max-over-clusters cosine map `S`, its softmax `S̃`, the
//! soft-argmax center `c` over the pixel-center lattice, initial reference
//! offsets, and one multi-scale deformable attention pass over features
//! fused with `S`.

use std::f64::consts::PI;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::ClusterSet;
use crate::error::{Error, Result};
use crate::tensor::{
    dot, pixel_center, softmax_backward, softmax_unchecked, LinearGrad, LinearMap, Real, Stencil, Tensor,
};

#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMap<T> {
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    /// `S`, row-major, each entry in `[−1, 1]`.
    pub scores: Vec<T>,
    /// Index of the cluster row attaining the max at each pixel.
    pub argmax: Vec<usize>,
    /// `S̃ = softmax(S / temperature)` over all pixels.
    pub normalized: Vec<T>,
}

/// Per-pixel max cosine similarity against the valid cluster rows, ties to
/// the lowest row index.
pub fn similarity_map<T: Real>(
    features: &Tensor<T>,
    clusters: &ClusterSet<T>,
    stride: usize,
    temperature: T,
) -> Result<SimilarityMap<T>> {
    if features.rank() != 3 {
        return Err(Error::ShapeMismatch {
            expected: vec![clusters.channels(), 0, 0],
            actual: features.dims().to_vec(),
        });
    }
    if clusters.channels() != features.channels() {
        return Err(Error::ChannelMismatch {
            expected: clusters.channels(),
            actual: features.channels(),
        });
    }
    if !(temperature > T::zero()) {
        return Err(Error::Config("softmax temperature must be > 0".into()));
    }
    let rows: Vec<(usize, &[T], T)> = clusters
        .valid_rows()
        .map(|(k, r)| (k, r, dot(r, r).sqrt()))
        .collect();
    if rows.is_empty() {
        return Err(Error::NoValidClusters);
    }
    let (h, w) = (features.height(), features.width());
    let pixels = features.pixels_as_rows();
    let eps = T::lit(crate::tensor::EPSILON_NORM);
    let mut scores = Vec::with_capacity(h * w);
    let mut argmax = Vec::with_capacity(h * w);
    for f in pixels.row_iter() {
        let nf = dot(f, f).sqrt();
        let mut best = (rows[0].0, T::neg_infinity());
        for &(k, r, nr) in &rows {
            let s = if nf < eps || nr < eps {
                T::zero()
            } else {
                (dot(r, f) / (nr * nf)).max(-T::one()).min(T::one())
            };
            if s > best.1 {
                best = (k, s);
            }
        }
        scores.push(best.1);
        argmax.push(best.0);
    }
    let mut normalized: Vec<T> = scores.iter().map(|&s| s / temperature).collect();
    softmax_unchecked(&mut normalized);
    Ok(SimilarityMap {
        stride,
        height: h,
        width: w,
        scores,
        argmax,
        normalized,
    })
}

impl<T: Real> SimilarityMap<T> {
    /// Binary PGM (P5), `[−1, 1]` mapped linearly onto `[0, 255]` with
    /// half-up rounding.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.scores.iter().map(|&s| pgm_level(s.as_f64())));
        out
    }

    /// Row-major index of the largest score (first on ties).
    pub fn peak(&self) -> usize {
        self.scores
            .iter()
            .enumerate()
            .fold((0, T::neg_infinity()), |acc, (i, &s)| if s > acc.1 { (i, s) } else { acc })
            .0
    }
}

pub fn pgm_level(s: f64) -> u8 {
    let v = ((s.clamp(-1.0, 1.0) + 1.0) * 0.5 * 255.0 + 0.5).floor();
    v.clamp(0.0, 255.0) as u8
}

/// `2 × h × w` lattice of normalized pixel centers (`x` plane, then `y`).
pub fn reference_lattice<T: Real>(h: usize, w: usize) -> Tensor<T> {
    let mut data = vec![T::zero(); 2 * h * w];
    for i in 0..h {
        for j in 0..w {
            let [x, y] = pixel_center::<T>(i, j, h, w);
            data[i * w + j] = x;
            data[h * w + i * w + j] = y;
        }
    }
    Tensor::from_raw(vec![2, h, w], data)
}

/// `c = Σ S̃(i,j) · r(i,j)`.
pub fn soft_argmax_center<T: Real>(sim: &SimilarityMap<T>, grid: &Tensor<T>) -> Result<[T; 2]> {
    let plane = sim.height * sim.width;
    if grid.dims() != [2, sim.height, sim.width] {
        return Err(Error::ShapeMismatch {
            expected: vec![2, sim.height, sim.width],
            actual: grid.dims().to_vec(),
        });
    }
    let (xs, ys) = grid.data().split_at(plane);
    Ok([dot(&sim.normalized, xs), dot(&sim.normalized, ys)])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OffsetVariant {
    /// `Δ = c − r`
    Main,
    /// `Δ = c − r · S̃`
    #[default]
    Supplementary,
}

impl FromStr for OffsetVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "main" => Ok(OffsetVariant::Main),
            "supplementary" | "supp" => Ok(OffsetVariant::Supplementary),
            other => Err(Error::VariantUnknown(other.to_string())),
        }
    }
}

impl std::fmt::Display for OffsetVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OffsetVariant::Main => "main",
            OffsetVariant::Supplementary => "supplementary",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceGrid<T> {
    /// Pixel-center lattice `r`, `2 × h × w`.
    pub base: Tensor<T>,
    pub center: [T; 2],
    /// `Δ`, `2 × h × w`.
    pub offsets: Tensor<T>,
    /// `r̃ = clamp(r + Δ, 0, 1)`, `2 × h × w`.
    pub refined: Tensor<T>,
}

impl<T: Real> ReferenceGrid<T> {
    /// Refined point of pixel `p` (row-major index).
    pub fn refined_point(&self, p: usize) -> [T; 2] {
        let plane = self.refined.len() / 2;
        [self.refined.data()[p], self.refined.data()[plane + p]]
    }
}

pub fn init_offsets<T: Real>(
    sim: &SimilarityMap<T>,
    grid: &Tensor<T>,
    center: [T; 2],
    variant: OffsetVariant,
) -> Result<ReferenceGrid<T>> {
    let plane = sim.height * sim.width;
    if grid.dims() != [2, sim.height, sim.width] {
        return Err(Error::ShapeMismatch {
            expected: vec![2, sim.height, sim.width],
            actual: grid.dims().to_vec(),
        });
    }
    let r = grid.data();
    let mut offsets = vec![T::zero(); 2 * plane];
    let mut refined = vec![T::zero(); 2 * plane];
    for axis in 0..2 {
        for p in 0..plane {
            let rv = r[axis * plane + p];
            // r + (c − r) is c algebraically but not always in floating point
            let (d, moved) = match variant {
                OffsetVariant::Main => (center[axis] - rv, center[axis]),
                OffsetVariant::Supplementary => {
                    let d = center[axis] - rv * sim.normalized[p];
                    (d, rv + d)
                }
            };
            offsets[axis * plane + p] = d;
            refined[axis * plane + p] = moved.max(T::zero()).min(T::one());
        }
    }
    let dims = vec![2, sim.height, sim.width];
    Ok(ReferenceGrid {
        base: grid.clone(),
        center,
        offsets: Tensor::from_raw(dims.clone(), offsets),
        refined: Tensor::from_raw(dims, refined),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeformableConfig {
    pub heads: usize,
    pub sample_points: usize,
}

impl Default for DeformableConfig {
    fn default() -> Self {
        Self {
            heads: 8,
            sample_points: 4,
        }
    }
}

impl DeformableConfig {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.heads == 0 || self.sample_points == 0 {
            return Err(Error::Config("heads and sample_points must be ≥ 1".into()));
        }
        if !channels.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "channel count {channels} is not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Learnable maps of the fuse-and-refine pass.
///
/// Offsets are laid out `[head][level][point][x|y]`, attention logits
/// `[head][level][point]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformableWeights<T> {
    /// `[F; S]` (C+1) → C.
    pub fuse: LinearMap<T>,
    pub value: LinearMap<T>,
    /// C → heads·levels·points·2, in units of level pixels.
    pub offsets: LinearMap<T>,
    /// C → heads·levels·points.
    pub attn: LinearMap<T>,
    pub output: LinearMap<T>,
}

impl<T: Real> DeformableWeights<T> {
    /// Seeded initialization: uniform `±1/√fan_in` for the fuse, value and
    /// output maps; offset weights zero with biases placing each head's
    /// points on a ray at angle `2πh/heads`, point `p` at radius `p + 1`;
    /// attention logits zero.
    pub fn seeded(channels: usize, levels: usize, config: DeformableConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = channels;
        let (nh, np) = (config.heads, config.sample_points);
        let fuse = LinearMap::uniform(c, c + 1, 1.0 / ((c + 1) as f64).sqrt(), true, &mut rng);
        let value = LinearMap::uniform(c, c, 1.0 / (c as f64).sqrt(), true, &mut rng);
        let output = LinearMap::uniform(c, c, 1.0 / (c as f64).sqrt(), true, &mut rng);
        let mut offsets = LinearMap::zeros(nh * levels * np * 2, c, true);
        let bias = offsets.bias_mut().expect("bias");
        for h in 0..nh {
            let theta = 2.0 * PI * h as f64 / nh as f64;
            let (dx, dy) = (theta.cos(), theta.sin());
            let scale = dx.abs().max(dy.abs());
            for l in 0..levels {
                for p in 0..np {
                    let base = ((h * levels + l) * np + p) * 2;
                    bias[base] = T::lit(dx / scale * (p + 1) as f64);
                    bias[base + 1] = T::lit(dy / scale * (p + 1) as f64);
                }
            }
        }
        let attn = LinearMap::zeros(nh * levels * np, c, true);
        Self {
            fuse,
            value,
            offsets,
            attn,
            output,
        }
    }

    pub fn cast<U: Real>(&self) -> DeformableWeights<U> {
        DeformableWeights {
            fuse: self.fuse.cast(),
            value: self.value.cast(),
            offsets: self.offsets.cast(),
            attn: self.attn.cast(),
            output: self.output.cast(),
        }
    }

    fn maps(&self) -> [&LinearMap<T>; 5] {
        [&self.fuse, &self.value, &self.offsets, &self.attn, &self.output]
    }

    pub fn params(&self) -> Vec<T> {
        self.maps().iter().flat_map(|m| m.params()).collect()
    }

    pub fn set_params(&mut self, p: &[T]) {
        let mut at = 0;
        for m in [
            &mut self.fuse,
            &mut self.value,
            &mut self.offsets,
            &mut self.attn,
            &mut self.output,
        ] {
            let n = m.param_count();
            m.set_params(&p[at..at + n]);
            at += n;
        }
    }

    fn check(&self, channels: usize, levels: usize, config: DeformableConfig) -> Result<()> {
        let c = channels;
        let lp = config.heads * levels * config.sample_points;
        let want = [(c, c + 1), (c, c), (2 * lp, c), (lp, c), (c, c)];
        for (m, (o, i)) in self.maps().iter().zip(want) {
            if m.out_dim() != o || m.in_dim() != i {
                return Err(Error::ShapeMismatch {
                    expected: vec![o, i],
                    actual: vec![m.out_dim(), m.in_dim()],
                });
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct DeformableGrads<T> {
    pub features: Vec<Tensor<T>>,
    /// Gradient with respect to each level's similarity channel.
    pub similarity: Vec<Vec<T>>,
    pub fuse: LinearGrad<T>,
    pub value: LinearGrad<T>,
    pub offsets: LinearGrad<T>,
    pub attn: LinearGrad<T>,
    pub output: LinearGrad<T>,
}

impl<T: Real> DeformableGrads<T> {
    /// Parameter gradients laid out like [`DeformableWeights::params`].
    pub fn params(&self) -> Vec<T> {
        [&self.fuse, &self.value, &self.offsets, &self.attn, &self.output]
            .iter()
            .flat_map(|g| g.flatten())
            .collect()
    }
}

/// One level's inputs to [`fuse_and_refine`].
#[derive(Clone, Copy, Debug)]
pub struct LevelInput<'a, T> {
    pub features: &'a Tensor<T>,
    /// `S`, row-major `h × w`.
    pub similarity: &'a [T],
    /// `r̃`, `2 × h × w`; treated as a constant.
    pub refined: &'a Tensor<T>,
}

struct Prepared<T> {
    /// Per level, `(h·w) × (C+1)` rows of `[F; S]`.
    inputs: Vec<Tensor<T>>,
    /// Per level, `(h·w) × C` fused rows.
    fused: Vec<Tensor<T>>,
    /// Per level, value maps `C × h × w`.
    values: Vec<Tensor<T>>,
    extents: Vec<(usize, usize)>,
}

fn prepare<T: Real>(levels: &[LevelInput<'_, T>], config: DeformableConfig, weights: &DeformableWeights<T>) -> Result<Prepared<T>> {
    let first = levels.first().ok_or(Error::LevelMismatch {
        expected: 1,
        actual: 0,
    })?;
    let c = first.features.channels();
    config.validate(c)?;
    weights.check(c, levels.len(), config)?;
    let mut p = Prepared {
        inputs: vec![],
        fused: vec![],
        values: vec![],
        extents: vec![],
    };
    for lvl in levels {
        let (h, w) = (lvl.features.height(), lvl.features.width());
        if lvl.features.channels() != c {
            return Err(Error::ChannelMismatch {
                expected: c,
                actual: lvl.features.channels(),
            });
        }
        if lvl.similarity.len() != h * w || lvl.refined.dims() != [2, h, w] {
            return Err(Error::ShapeMismatch {
                expected: vec![2, h, w],
                actual: lvl.refined.dims().to_vec(),
            });
        }
        let pix = lvl.features.pixels_as_rows();
        let mut data = Vec::with_capacity(h * w * (c + 1));
        for (row, &s) in pix.row_iter().zip(lvl.similarity) {
            data.extend_from_slice(row);
            data.push(s);
        }
        let input = Tensor::from_raw(vec![h * w, c + 1], data);
        let fused = weights.fuse.apply_rows(&input)?;
        let value = Tensor::rows_as_map(&weights.value.apply_rows(&fused)?, h, w)?;
        p.inputs.push(input);
        p.fused.push(fused);
        p.values.push(value);
        p.extents.push((h, w));
    }
    Ok(p)
}

struct QueryState<T> {
    attn: Vec<T>,
    raw_offsets: Vec<T>,
    gathered: Vec<T>,
}

fn sample_location<T: Real>(refp: [T; 2], raw: &[T], h: usize, w: usize) -> [T; 2] {
    [
        refp[0] + raw[0] / T::lit(w as f64),
        refp[1] + raw[1] / T::lit(h as f64),
    ]
}

fn query_forward<T: Real>(
    prep: &Prepared<T>,
    weights: &DeformableWeights<T>,
    config: DeformableConfig,
    fq: &[T],
    refp: [T; 2],
) -> QueryState<T> {
    let (nh, np, nl) = (config.heads, config.sample_points, prep.values.len());
    let c = fq.len();
    let dh = c / nh;
    let raw_offsets = weights.offsets.apply(fq);
    let mut attn = weights.attn.apply(fq);
    for h in 0..nh {
        softmax_unchecked(&mut attn[h * nl * np..(h + 1) * nl * np]);
    }
    let mut gathered = vec![T::zero(); c];
    for h in 0..nh {
        for (l, &(lh, lw)) in prep.extents.iter().enumerate() {
            let planes = prep.values[l].data();
            for p in 0..np {
                let s = (h * nl + l) * np + p;
                let st = Stencil::new(sample_location(refp, &raw_offsets[2 * s..2 * s + 2], lh, lw), lh, lw);
                let a = attn[s];
                for ch in h * dh..(h + 1) * dh {
                    let plane = &planes[ch * lh * lw..(ch + 1) * lh * lw];
                    gathered[ch] = gathered[ch] + a * st.sample_plane(plane);
                }
            }
        }
    }
    QueryState {
        attn,
        raw_offsets,
        gathered,
    }
}

/// Concatenates `S` onto each level's features, projects back to `C`, and
/// runs one multi-scale deformable attention pass where every pixel queries
/// `sample_points` locations per head per level around its refined
/// reference point. Output extents equal input extents.
pub fn fuse_and_refine<T: Real>(
    levels: &[LevelInput<'_, T>],
    config: DeformableConfig,
    weights: &DeformableWeights<T>,
) -> Result<Vec<Tensor<T>>> {
    let prep = prepare(levels, config, weights)?;
    let mut outs = Vec::with_capacity(levels.len());
    for (lq, lvl) in levels.iter().enumerate() {
        let (h, w) = prep.extents[lq];
        let mut rows = Vec::with_capacity(h * w * weights.output.out_dim());
        for q in 0..h * w {
            let refp = [lvl.refined.data()[q], lvl.refined.data()[h * w + q]];
            let st = query_forward(&prep, weights, config, prep.fused[lq].row(q), refp);
            rows.extend(weights.output.apply(&st.gathered));
        }
        let rows = Tensor::from_raw(vec![h * w, weights.output.out_dim()], rows);
        let out = Tensor::rows_as_map(&rows, h, w)?;
        if !out.is_finite() {
            return Err(Error::NonFiniteInput);
        }
        outs.push(out);
    }
    Ok(outs)
}

/// Attention weights of every query pixel, `[level][pixel][head·levels·points]`.
pub fn fuse_and_refine_attention<T: Real>(
    levels: &[LevelInput<'_, T>],
    config: DeformableConfig,
    weights: &DeformableWeights<T>,
) -> Result<Vec<Vec<Vec<T>>>> {
    let prep = prepare(levels, config, weights)?;
    Ok(levels
        .iter()
        .enumerate()
        .map(|(lq, lvl)| {
            let (h, w) = prep.extents[lq];
            (0..h * w)
                .map(|q| {
                    let refp = [lvl.refined.data()[q], lvl.refined.data()[h * w + q]];
                    query_forward(&prep, weights, config, prep.fused[lq].row(q), refp).attn
                })
                .collect()
        })
        .collect())
}

/// Smallest distance, in pixels, from any sampling location to a kink of
/// bilinear interpolation (a pixel-center line or a clamp border). Finite
/// difference checks are only meaningful when this exceeds the step.
pub fn sampling_kink_margin<T: Real>(
    levels: &[LevelInput<'_, T>],
    config: DeformableConfig,
    weights: &DeformableWeights<T>,
) -> Result<f64> {
    let prep = prepare(levels, config, weights)?;
    let (nh, np, nl) = (config.heads, config.sample_points, levels.len());
    let mut margin = f64::INFINITY;
    for (lq, lvl) in levels.iter().enumerate() {
        let (h, w) = prep.extents[lq];
        for q in 0..h * w {
            let fq = prep.fused[lq].row(q);
            let refp = [lvl.refined.data()[q], lvl.refined.data()[h * w + q]];
            let raw = weights.offsets.apply(fq);
            for s in 0..nh * nl * np {
                let (lh, lw) = prep.extents[(s / np) % nl];
                let loc = sample_location(refp, &raw[2 * s..2 * s + 2], lh, lw);
                for (c, n) in [(loc[0], lw), (loc[1], lh)] {
                    if n > 1 {
                        let p = c.as_f64() * n as f64 - 0.5;
                        margin = margin.min((p - p.round()).abs());
                    }
                }
            }
        }
    }
    Ok(margin)
}

/// Gradients of `Σ_l ⟨d_out[l], fuse_and_refine(levels)[l]⟩`. Reference
/// points receive no gradient.
pub fn fuse_and_refine_backward<T: Real>(
    levels: &[LevelInput<'_, T>],
    config: DeformableConfig,
    weights: &DeformableWeights<T>,
    d_out: &[Tensor<T>],
) -> Result<DeformableGrads<T>> {
    let prep = prepare(levels, config, weights)?;
    if d_out.len() != levels.len() {
        return Err(Error::LevelMismatch {
            expected: levels.len(),
            actual: d_out.len(),
        });
    }
    let (nh, np, nl) = (config.heads, config.sample_points, levels.len());
    let c = weights.output.out_dim();
    let dh = c / nh;

    let mut g_out = weights.output.zero_grad();
    let mut g_off = weights.offsets.zero_grad();
    let mut g_attn = weights.attn.zero_grad();
    let mut d_fused: Vec<Tensor<T>> = prep.fused.iter().map(|f| Tensor::zeros(f.dims())).collect();
    let mut d_values: Vec<Tensor<T>> = prep.values.iter().map(|v| Tensor::zeros(v.dims())).collect();

    for (lq, lvl) in levels.iter().enumerate() {
        let (h, w) = prep.extents[lq];
        let dy_rows = d_out[lq].pixels_as_rows();
        for q in 0..h * w {
            let fq = prep.fused[lq].row(q);
            let refp = [lvl.refined.data()[q], lvl.refined.data()[h * w + q]];
            let st = query_forward(&prep, weights, config, fq, refp);
            let d_gathered = weights.output.backward_vec(&st.gathered, dy_rows.row(q), &mut g_out);

            let mut d_attn = vec![T::zero(); st.attn.len()];
            let mut d_raw = vec![T::zero(); st.raw_offsets.len()];
            for hd in 0..nh {
                for (l, &(lh, lw)) in prep.extents.iter().enumerate() {
                    let planes = prep.values[l].data();
                    let dplanes = d_values[l].data_mut();
                    for p in 0..np {
                        let s = (hd * nl + l) * np + p;
                        let stn = Stencil::new(
                            sample_location(refp, &st.raw_offsets[2 * s..2 * s + 2], lh, lw),
                            lh,
                            lw,
                        );
                        let a = st.attn[s];
                        let mut dloc = [T::zero(); 2];
                        for ch in hd * dh..(hd + 1) * dh {
                            let range = ch * lh * lw..(ch + 1) * lh * lw;
                            let g = d_gathered[ch];
                            d_attn[s] = d_attn[s] + g * stn.sample_plane(&planes[range.clone()]);
                            stn.scatter_plane(&mut dplanes[range.clone()], a * g);
                            let pg = stn.plane_point_grad(&planes[range]);
                            dloc[0] = dloc[0] + a * g * pg[0];
                            dloc[1] = dloc[1] + a * g * pg[1];
                        }
                        d_raw[2 * s] = dloc[0] / T::lit(lw as f64);
                        d_raw[2 * s + 1] = dloc[1] / T::lit(lh as f64);
                    }
                }
            }
            let mut d_logits = vec![T::zero(); d_attn.len()];
            for hd in 0..nh {
                let r = hd * nl * np..(hd + 1) * nl * np;
                d_logits[r.clone()].copy_from_slice(&softmax_backward(&st.attn[r.clone()], &d_attn[r]));
            }
            let d1 = weights.offsets.backward_vec(fq, &d_raw, &mut g_off);
            let d2 = weights.attn.backward_vec(fq, &d_logits, &mut g_attn);
            for ((d, a), b) in d_fused[lq].row_mut(q).iter_mut().zip(d1).zip(d2) {
                *d = *d + a + b;
            }
        }
    }

    let mut g_value = weights.value.zero_grad();
    let mut g_fuse = weights.fuse.zero_grad();
    let mut features = Vec::with_capacity(nl);
    let mut similarity = Vec::with_capacity(nl);
    for l in 0..nl {
        let (h, w) = prep.extents[l];
        let dv_rows = d_values[l].pixels_as_rows();
        let (dx, gv) = weights.value.backward_rows(&prep.fused[l], &dv_rows);
        g_value.accumulate(&gv);
        d_fused[l].add_assign(&dx);
        let (d_in, gf) = weights.fuse.backward_rows(&prep.inputs[l], &d_fused[l]);
        g_fuse.accumulate(&gf);
        let mut df = Vec::with_capacity(h * w * c);
        let mut ds = Vec::with_capacity(h * w);
        for row in d_in.row_iter() {
            df.extend_from_slice(&row[..c]);
            ds.push(row[c]);
        }
        features.push(Tensor::rows_as_map(&Tensor::from_raw(vec![h * w, c], df), h, w)?);
        similarity.push(ds);
    }
    Ok(DeformableGrads {
        features,
        similarity,
        fuse: g_fuse,
        value: g_value,
        offsets: g_off,
        attn: g_attn,
        output: g_out,
    })
}

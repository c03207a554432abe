//! Mask-restricted K-means over feature maps and masked average pooling of
//! the resulting clusters.
//!
//! Lloyd iterations run in `f64` regardless of the feature precision; the
//! reported rows are pooled from the original features so each valid row is
//! exactly the masked mean of its pixels.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Assignment value of a pixel outside the clustered region.
pub const UNASSIGNED: i32 = -1;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KMeansConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub seed: u64,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        Self {
            max_iters: 50,
            tol: 1e-9,
            seed: 0,
        }
    }
}

impl KMeansConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::Config("kmeans max_iters must be ≥ 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::Config("kmeans tol must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Binary per-level mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMask {
    height: usize,
    width: usize,
    bits: Vec<bool>,
}

impl SegmentationMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != height * width {
            return Err(Error::LengthMismatch {
                left: height * width,
                right: bits.len(),
            });
        }
        Ok(Self {
            height,
            width,
            bits,
        })
    }

    pub fn filled(height: usize, width: usize, value: bool) -> Self {
        Self {
            height,
            width,
            bits: vec![value; height * width],
        }
    }

    /// Reads an `h × w` (or `1 × h × w`) tensor whose entries are exactly 0 or 1.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Result<Self> {
        let (h, w) = match t.dims() {
            [h, w] | [1, h, w] => (*h, *w),
            d => {
                return Err(Error::ShapeMismatch {
                    expected: vec![0, 0],
                    actual: d.to_vec(),
                })
            }
        };
        let bits = t
            .data()
            .iter()
            .map(|&v| {
                if v == T::one() {
                    Ok(true)
                } else if v == T::zero() {
                    Ok(false)
                } else {
                    Err(Error::Format(format!("mask entry {v} is not 0 or 1")))
                }
            })
            .collect::<Result<_>>()?;
        Self::new(h, w, bits)
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_raw(
            vec![self.height, self.width],
            self.bits
                .iter()
                .map(|&b| if b { T::one() } else { T::zero() })
                .collect(),
        )
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.width + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        self.bits[i * self.width + j] = v;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn complement(&self) -> Self {
        Self {
            height: self.height,
            width: self.width,
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }
}

/// Per-level feature maps sharing one channel count.
#[derive(Clone, Debug, PartialEq)]
pub struct FeaturePyramid<T> {
    image_height: usize,
    image_width: usize,
    levels: Vec<PyramidLevel<T>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PyramidLevel<T> {
    pub stride: usize,
    pub features: Tensor<T>,
}

impl<T: Real> FeaturePyramid<T> {
    pub fn new(image_height: usize, image_width: usize, levels: Vec<PyramidLevel<T>>) -> Result<Self> {
        let first = levels.first().ok_or(Error::EmptyInput)?;
        let channels = first.features.channels();
        let mut prev = 0;
        for lvl in &levels {
            if lvl.stride <= prev {
                return Err(Error::Config("pyramid strides must be strictly increasing".into()));
            }
            prev = lvl.stride;
            let want = [channels, image_height / lvl.stride, image_width / lvl.stride];
            if lvl.features.dims() != want {
                return Err(Error::ShapeMismatch {
                    expected: want.to_vec(),
                    actual: lvl.features.dims().to_vec(),
                });
            }
        }
        Ok(Self {
            image_height,
            image_width,
            levels,
        })
    }

    pub fn levels(&self) -> &[PyramidLevel<T>] {
        &self.levels
    }

    pub fn channels(&self) -> usize {
        self.levels[0].features.channels()
    }

    pub fn image_extents(&self) -> (usize, usize) {
        (self.image_height, self.image_width)
    }
}

/// Cluster rows (`N × C`) with their pixel assignment.
///
/// `assignment` covers every pixel of every clustered grid, row-major and
/// concatenated in `extents` order, holding a row index or [`UNASSIGNED`].
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterSet<T> {
    pub rows: Tensor<T>,
    pub validity: Vec<bool>,
    pub assignment: Vec<i32>,
    pub extents: Vec<[usize; 2]>,
    pub inertia: f64,
    pub inertia_history: Vec<f64>,
}

impl<T: Real> ClusterSet<T> {
    pub fn k(&self) -> usize {
        self.rows.rows()
    }

    pub fn channels(&self) -> usize {
        self.rows.cols()
    }

    pub fn valid_count(&self) -> usize {
        self.validity.iter().filter(|&&v| v).count()
    }

    /// `(row index, row)` for every valid row, in index order.
    pub fn valid_rows(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.validity
            .iter()
            .enumerate()
            .filter(|(_, &v)| v)
            .map(|(i, _)| (i, self.rows.row(i)))
    }

    pub fn cast<U: Real>(&self) -> ClusterSet<U> {
        ClusterSet {
            rows: self.rows.cast(),
            validity: self.validity.clone(),
            assignment: self.assignment.clone(),
            extents: self.extents.clone(),
            inertia: self.inertia,
            inertia_history: self.inertia_history.clone(),
        }
    }

    /// Binary mask of the pixels assigned to row `k` on a single-grid set.
    pub fn cluster_mask(&self, k: usize) -> SegmentationMask {
        let [h, w] = self.extents[0];
        SegmentationMask {
            height: h,
            width: w,
            bits: self.assignment[..h * w]
                .iter()
                .map(|&a| a == k as i32)
                .collect(),
        }
    }

    pub fn to_json(&self, level: usize) -> ClusterSetJson {
        ClusterSetJson {
            level,
            k: self.k(),
            validity: self.validity.clone(),
            centroids: self
                .rows
                .row_iter()
                .map(|r| r.iter().map(|x| x.as_f64()).collect())
                .collect(),
            inertia: self.inertia,
            assignment_rle: rle_encode(&self.assignment),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterSetJson {
    pub level: usize,
    pub k: usize,
    pub validity: Vec<bool>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
    /// `[value, run length]` pairs over the row-major assignment.
    pub assignment_rle: Vec<[i64; 2]>,
}

pub fn rle_encode(values: &[i32]) -> Vec<[i64; 2]> {
    let mut runs: Vec<[i64; 2]> = Vec::new();
    for &v in values {
        match runs.last_mut() {
            Some(last) if last[0] == v as i64 => last[1] += 1,
            _ => runs.push([v as i64, 1]),
        }
    }
    runs
}

pub fn rle_decode(runs: &[[i64; 2]]) -> Vec<i32> {
    runs.iter()
        .flat_map(|&[v, n]| std::iter::repeat_n(v as i32, n.max(0) as usize))
        .collect()
}

/// Masked average pooling: `Σ M·F / Σ M` per channel.
pub fn masked_average_pool<T: Real>(features: &Tensor<T>, cluster_mask: &SegmentationMask) -> Result<Vec<T>> {
    check_grid(features, cluster_mask)?;
    let count = cluster_mask.count();
    if count == 0 {
        return Err(Error::EmptyCluster);
    }
    let plane = cluster_mask.height * cluster_mask.width;
    let n = T::lit(count as f64);
    Ok(features
        .data()
        .chunks_exact(plane)
        .map(|ch| {
            ch.iter()
                .zip(&cluster_mask.bits)
                .filter(|(_, &m)| m)
                .map(|(&v, _)| v)
                .sum::<T>()
                / n
        })
        .collect())
}

/// Gradient of `⟨upstream, masked_average_pool(F, M)⟩` with respect to `F`:
/// `upstream[c] · M / |M|` on each channel plane.
pub fn masked_average_pool_backward<T: Real>(cluster_mask: &SegmentationMask, upstream: &[T]) -> Result<Tensor<T>> {
    let count = cluster_mask.count();
    if count == 0 {
        return Err(Error::EmptyCluster);
    }
    let (h, w) = (cluster_mask.height, cluster_mask.width);
    let inv = T::one() / T::lit(count as f64);
    let mut data = Vec::with_capacity(upstream.len() * h * w);
    for &g in upstream {
        data.extend(
            cluster_mask
                .bits
                .iter()
                .map(|&m| if m { g * inv } else { T::zero() }),
        );
    }
    Ok(Tensor::from_raw(vec![upstream.len(), h, w], data))
}

fn check_grid<T: Real>(features: &Tensor<T>, mask: &SegmentationMask) -> Result<()> {
    if features.rank() != 3 || features.height() != mask.height || features.width() != mask.width {
        return Err(Error::ShapeMismatch {
            expected: vec![features.dims().first().copied().unwrap_or(0), mask.height, mask.width],
            actual: features.dims().to_vec(),
        });
    }
    Ok(())
}

/// Result of a plain Lloyd run over `f64` points.
#[derive(Clone, Debug, PartialEq)]
pub struct LloydRun {
    /// `k × dim`, row-major. Rows of empty clusters keep their last value.
    pub centroids: Vec<f64>,
    pub labels: Vec<usize>,
    pub counts: Vec<usize>,
    /// Inertia after every assignment step, ending with the inertia of the
    /// final assignment against its own means.
    pub inertia_history: Vec<f64>,
}

impl LloydRun {
    pub fn inertia(&self) -> f64 {
        *self.inertia_history.last().expect("at least one step")
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per point (ties to the lowest index); returns the
/// inertia and fills `labels` and `dists`.
fn assign(points: &[f64], dim: usize, centroids: &[f64], labels: &mut [usize], dists: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for (p, point) in points.chunks_exact(dim).enumerate() {
        let (best, d) = centroids
            .chunks_exact(dim)
            .map(|c| sq_dist(point, c))
            .enumerate()
            .fold((0, f64::INFINITY), |acc, (i, d)| if d < acc.1 { (i, d) } else { acc });
        labels[p] = best;
        dists[p] = d;
        total += d;
    }
    total
}

fn means(points: &[f64], dim: usize, labels: &[usize], k: usize) -> (Vec<f64>, Vec<usize>) {
    let mut sums = vec![0.0; k * dim];
    let mut counts = vec![0usize; k];
    for (point, &l) in points.chunks_exact(dim).zip(labels) {
        counts[l] += 1;
        for (s, &x) in sums[l * dim..(l + 1) * dim].iter_mut().zip(point) {
            *s += x;
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 {
            for s in &mut sums[c * dim..(c + 1) * dim] {
                *s /= n as f64;
            }
        }
    }
    (sums, counts)
}

/// Lloyd iterations from the given initial centroids.
///
/// Stops when the assignment no longer changes, when the inertia improves
/// by less than `tol`, or after `max_iters` assignment steps. A cluster left
/// empty by an assignment step is reseeded onto the point farthest from its
/// current centroid.
pub fn lloyd(points: &[f64], dim: usize, init: &[f64], max_iters: usize, tol: f64) -> LloydRun {
    let m = points.len() / dim;
    let k = init.len() / dim;
    let mut centroids = init.to_vec();
    let mut labels = vec![usize::MAX; m];
    let mut prev_labels = labels.clone();
    let mut dists = vec![0.0; m];
    let mut history = Vec::new();

    for iter in 0..max_iters.max(1) {
        let inertia = assign(points, dim, &centroids, &mut labels, &mut dists);
        history.push(inertia);
        if iter > 0 && (labels == prev_labels || history[iter - 1] - inertia < tol) {
            break;
        }
        if iter + 1 == max_iters {
            break;
        }
        prev_labels.copy_from_slice(&labels);

        let (mut next, counts) = means(points, dim, &labels, k);
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            // Reseed onto the farthest point; zero its distance so a second
            // empty cluster picks a different one.
            let far = dists
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc })
                .0;
            next[c * dim..(c + 1) * dim].copy_from_slice(&points[far * dim..(far + 1) * dim]);
            dists[far] = 0.0;
        }
        centroids = next;
    }

    let (final_means, counts) = means(points, dim, &labels, k);
    for c in 0..k {
        if counts[c] > 0 {
            centroids[c * dim..(c + 1) * dim].copy_from_slice(&final_means[c * dim..(c + 1) * dim]);
        }
    }
    let final_inertia = points
        .chunks_exact(dim)
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l * dim..(l + 1) * dim]))
        .sum();
    history.push(final_inertia);
    LloydRun {
        centroids,
        labels,
        counts,
        inertia_history: history,
    }
}

/// k-means++ seeding; returns the chosen point indices. When every
/// remaining point coincides with a chosen centroid, the lowest-index
/// unchosen point is taken.
pub fn kmeans_plus_plus(points: &[f64], dim: usize, k: usize, rng: &mut impl Rng) -> Vec<usize> {
    let m = points.len() / dim;
    let mut chosen = Vec::with_capacity(k);
    if m == 0 || k == 0 {
        return chosen;
    }
    chosen.push(rng.random_range(0..m));
    let mut d2: Vec<f64> = points
        .chunks_exact(dim)
        .map(|p| sq_dist(p, &points[chosen[0] * dim..(chosen[0] + 1) * dim]))
        .collect();
    while chosen.len() < k.min(m) {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(rng),
            Err(_) => (0..m).find(|i| !chosen.contains(i)).expect("fewer chosen than points"),
        };
        chosen.push(next);
        let c = &points[next * dim..(next + 1) * dim];
        for (d, p) in d2.iter_mut().zip(points.chunks_exact(dim)) {
            *d = d.min(sq_dist(p, c));
        }
    }
    chosen
}

/// K-means restricted to mask-1 pixels of a single level.
pub fn kmeans_masked<T: Real>(
    features: &Tensor<T>,
    mask: &SegmentationMask,
    k: usize,
    config: &KMeansConfig,
) -> Result<ClusterSet<T>> {
    kmeans_masked_levels(&[(features, mask)], k, config)
}

/// K-means over the background (`1 − mask`) of a single level.
pub fn cluster_background<T: Real>(
    features: &Tensor<T>,
    mask: &SegmentationMask,
    k: usize,
    config: &KMeansConfig,
) -> Result<ClusterSet<T>> {
    kmeans_masked(features, &mask.complement(), k, config)
}

/// K-means over the union of masked pixels from several grids sharing one
/// channel count. Assignments are concatenated in input order.
pub fn kmeans_masked_levels<T: Real>(
    grids: &[(&Tensor<T>, &SegmentationMask)],
    k: usize,
    config: &KMeansConfig,
) -> Result<ClusterSet<T>> {
    if k == 0 {
        return Err(Error::Config("k must be ≥ 1".into()));
    }
    config.validate()?;
    let (first, _) = grids.first().ok_or(Error::EmptyInput)?;
    let dim = first.channels();
    let mut points = Vec::new();
    let mut extents = Vec::with_capacity(grids.len());
    for (features, mask) in grids {
        check_grid(features, mask)?;
        if features.channels() != dim {
            return Err(Error::ChannelMismatch {
                expected: dim,
                actual: features.channels(),
            });
        }
        if !features.is_finite() {
            return Err(Error::NonFiniteFeatures);
        }
        extents.push([mask.height, mask.width]);
        let plane = mask.height * mask.width;
        let data = features.data();
        for p in (0..plane).filter(|&p| mask.bits[p]) {
            points.extend((0..dim).map(|c| data[c * plane + p].as_f64()));
        }
    }
    let m = points.len() / dim;
    if m == 0 {
        return Err(Error::EmptyMask);
    }

    let k_eff = k.min(m);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let seeds = kmeans_plus_plus(&points, dim, k_eff, &mut rng);
    let init: Vec<f64> = seeds
        .iter()
        .flat_map(|&i| points[i * dim..(i + 1) * dim].iter().copied())
        .collect();
    let run = lloyd(&points, dim, &init, config.max_iters, config.tol);

    // Pool rows from the original features so valid rows are exact masked
    // means at the feature precision.
    let mut sums = vec![T::zero(); k * dim];
    let mut assignment = Vec::new();
    let mut label_iter = run.labels.iter();
    for (features, mask) in grids {
        let plane = mask.height * mask.width;
        let data = features.data();
        for p in 0..plane {
            if mask.bits[p] {
                let l = *label_iter.next().expect("one label per point");
                assignment.push(l as i32);
                for c in 0..dim {
                    sums[l * dim + c] = sums[l * dim + c] + data[c * plane + p];
                }
            } else {
                assignment.push(UNASSIGNED);
            }
        }
    }
    let mut validity = vec![false; k];
    for c in 0..k_eff {
        let n = run.counts[c];
        if n > 0 {
            validity[c] = true;
            let inv = T::lit(n as f64);
            for s in &mut sums[c * dim..(c + 1) * dim] {
                *s = *s / inv;
            }
        }
    }
    // Empty clusters never become valid rows; their sums are already zero.
    Ok(ClusterSet {
        rows: Tensor::from_raw(vec![k, dim], sums),
        validity,
        assignment,
        extents,
        inertia: run.inertia(),
        inertia_history: run.inertia_history,
    })
}

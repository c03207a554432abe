//! Generalized scene memory: `N_g` vectors updated by residual
//! cross-attention over batch-flattened local cluster rows, and a nearest-code
//! codebook used as the comparison baseline.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionCache, AttentionGrads, CrossAttention};
use crate::clustering::ClusterSet;
use crate::error::{Error, Result};
use crate::tensor::{LinearMap, Real, Tensor};

/// Valid cluster rows from a batch of images, stacked in
/// `(image, cluster)` order.
#[derive(Clone, Debug, PartialEq)]
pub struct FlattenedClusters<T> {
    pub rows: Tensor<T>,
    /// `(image index, cluster index)` of each row.
    pub origin: Vec<(usize, usize)>,
}

impl<T: Real> FlattenedClusters<T> {
    pub fn len(&self) -> usize {
        self.rows.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.origin.is_empty()
    }
}

pub fn flatten_batch<T: Real>(sets: &[ClusterSet<T>]) -> Result<FlattenedClusters<T>> {
    let c = sets.first().ok_or(Error::AllRowsInvalid)?.channels();
    let mut data = Vec::new();
    let mut origin = Vec::new();
    for (b, set) in sets.iter().enumerate() {
        if set.channels() != c {
            return Err(Error::ChannelMismatch {
                expected: c,
                actual: set.channels(),
            });
        }
        for (k, row) in set.valid_rows() {
            data.extend_from_slice(row);
            origin.push((b, k));
        }
    }
    if origin.is_empty() {
        return Err(Error::AllRowsInvalid);
    }
    Ok(FlattenedClusters {
        rows: Tensor::from_raw(vec![origin.len(), c], data),
        origin,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneMemory<T> {
    memory: Tensor<T>,
    attention: CrossAttention<T>,
    update_count: u64,
    frozen: bool,
}

/// JSON form of a [`SceneMemory`]. Scalars are widened to `f64` so `f32`
/// values round-trip exactly.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemorySnapshot {
    pub n_g: usize,
    pub c: usize,
    pub update_count: u64,
    pub frozen: bool,
    pub g_c: Vec<Vec<f64>>,
    pub w_q: Vec<Vec<f64>>,
    pub w_k: Vec<Vec<f64>>,
    pub w_v: Vec<Vec<f64>>,
}

fn to_rows<T: Real>(t: &Tensor<T>) -> Vec<Vec<f64>> {
    t.row_iter()
        .map(|r| r.iter().map(|x| x.as_f64()).collect())
        .collect()
}

fn from_rows<T: Real>(rows: &[Vec<f64>], want: [usize; 2], what: &str) -> Result<Tensor<T>> {
    let t = Tensor::<f64>::from_rows(rows).map_err(|_| Error::Config(format!("{what}: ragged or empty")))?;
    if t.dims() != want {
        return Err(Error::ShapeMismatch {
            expected: want.to_vec(),
            actual: t.dims().to_vec(),
        });
    }
    Ok(t.cast())
}

impl<T: Real> SceneMemory<T> {
    /// Fresh memory with `w_q = I`, `w_k`/`w_v` uniform in `[−1/√C, 1/√C]`
    /// and memory rows uniform in `[−1/N_g, 1/N_g]`, all drawn from `seed`.
    pub fn new(n_g: usize, c: usize, seed: u64) -> Result<Self> {
        if n_g == 0 || c == 0 {
            return Err(Error::Config("scene memory needs n_g ≥ 1 and C ≥ 1".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let bound = 1.0 / (c as f64).sqrt();
        let w_k = LinearMap::uniform(c, c, bound, false, &mut rng);
        let w_v = LinearMap::uniform(c, c, bound, false, &mut rng);
        let g = LinearMap::<T>::uniform(n_g, c, 1.0 / n_g as f64, false, &mut rng);
        Ok(Self {
            memory: g.weight().clone(),
            attention: CrossAttention::new(LinearMap::identity(c), w_k, w_v)?,
            update_count: 0,
            frozen: false,
        })
    }

    pub fn from_parts(memory: Tensor<T>, attention: CrossAttention<T>) -> Result<Self> {
        let c = memory.cols();
        if attention.w_q.in_dim() != c || attention.w_k.in_dim() != c || attention.dim() != c {
            return Err(Error::ChannelMismatch {
                expected: c,
                actual: attention.dim(),
            });
        }
        Ok(Self {
            memory,
            attention,
            update_count: 0,
            frozen: false,
        })
    }

    pub fn memory(&self) -> &Tensor<T> {
        &self.memory
    }

    pub fn attention(&self) -> &CrossAttention<T> {
        &self.attention
    }

    pub fn attention_mut(&mut self) -> &mut CrossAttention<T> {
        &mut self.attention
    }

    pub fn n_g(&self) -> usize {
        self.memory.rows()
    }

    pub fn channels(&self) -> usize {
        self.memory.cols()
    }

    pub fn update_count(&self) -> u64 {
        self.update_count
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        self.frozen = false;
    }

    /// Replaces the memory rows directly (used by external training loops).
    pub fn set_memory(&mut self, memory: Tensor<T>) -> Result<()> {
        if self.frozen {
            return Err(Error::FrozenMemory);
        }
        if memory.dims() != self.memory.dims() {
            return Err(Error::ShapeMismatch {
                expected: self.memory.dims().to_vec(),
                actual: memory.dims().to_vec(),
            });
        }
        self.memory = memory;
        Ok(())
    }

    /// The attention output for `keys_values` without mutating the memory.
    pub fn attend(&self, keys_values: &FlattenedClusters<T>) -> Result<(Tensor<T>, AttentionCache<T>)> {
        if keys_values.is_empty() {
            return Err(Error::EmptyKeys);
        }
        if keys_values.rows.cols() != self.channels() {
            return Err(Error::ChannelMismatch {
                expected: self.channels(),
                actual: keys_values.rows.cols(),
            });
        }
        self.attention.forward(&self.memory, &keys_values.rows)
    }

    /// One memory update: all rows are replaced jointly by the attention
    /// output. Returns the forward cache for gradient computation.
    pub fn update(&mut self, keys_values: &FlattenedClusters<T>) -> Result<AttentionCache<T>> {
        if self.frozen {
            return Err(Error::FrozenMemory);
        }
        let (out, cache) = self.attend(keys_values)?;
        self.memory = out;
        self.update_count += 1;
        Ok(cache)
    }

    /// Gradients of `⟨d_out, attend(keys_values)⟩` with respect to the
    /// memory rows, the key/value rows and all three projections, given the
    /// memory the forward pass saw.
    pub fn backward(
        &self,
        memory_before: &Tensor<T>,
        keys_values: &FlattenedClusters<T>,
        cache: &AttentionCache<T>,
        d_out: &Tensor<T>,
    ) -> AttentionGrads<T> {
        self.attention
            .backward(memory_before, &keys_values.rows, cache, d_out)
    }

    pub fn snapshot(&self) -> MemorySnapshot {
        MemorySnapshot {
            n_g: self.n_g(),
            c: self.channels(),
            update_count: self.update_count,
            frozen: self.frozen,
            g_c: to_rows(&self.memory),
            w_q: to_rows(self.attention.w_q.weight()),
            w_k: to_rows(self.attention.w_k.weight()),
            w_v: to_rows(self.attention.w_v.weight()),
        }
    }

    pub fn from_snapshot(s: &MemorySnapshot) -> Result<Self> {
        let c = s.c;
        let memory = from_rows(&s.g_c, [s.n_g, c], "g_c")?;
        let proj = |rows: &[Vec<f64>], what| -> Result<LinearMap<T>> {
            LinearMap::new(from_rows(rows, [c, c], what)?, None)
        };
        let attention = CrossAttention::new(proj(&s.w_q, "w_q")?, proj(&s.w_k, "w_k")?, proj(&s.w_v, "w_v")?)?;
        Ok(Self {
            memory,
            attention,
            update_count: s.update_count,
            frozen: s.frozen,
        })
    }
}

/// Nearest-code memory with per-code usage counts.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook<T> {
    pub codes: Tensor<T>,
    pub usage: Vec<u64>,
}

impl<T: Real> Codebook<T> {
    pub fn new(codes: Tensor<T>) -> Self {
        let n = codes.rows();
        Self {
            codes,
            usage: vec![0; n],
        }
    }

    /// Codes uniform in `[−1/N, 1/N]`.
    pub fn seeded(n: usize, c: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::new(
            LinearMap::<T>::uniform(n, c, 1.0 / n as f64, false, &mut rng)
                .weight()
                .clone(),
        )
    }

    /// Index of the nearest code (ties to the lowest index).
    pub fn nearest(&self, x: &[T]) -> usize {
        self.codes
            .row_iter()
            .map(|c| c.iter().zip(x).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>())
            .enumerate()
            .fold((0, T::infinity()), |acc, (i, d)| if d < acc.1 { (i, d) } else { acc })
            .0
    }

    /// Number of codes never selected so far.
    pub fn dead_slots(&self) -> usize {
        self.usage.iter().filter(|&&u| u == 0).count()
    }
}

/// Moves, row by row, the nearest code toward each key by
/// `learning_rate · (key − code)`. Returns this update's usage histogram and
/// adds it to the codebook's running usage.
pub fn codebook_update<T: Real>(
    codebook: &mut Codebook<T>,
    keys_values: &FlattenedClusters<T>,
    learning_rate: T,
) -> Result<Vec<u64>> {
    if !(learning_rate > T::zero() && learning_rate <= T::one()) {
        return Err(Error::Config("codebook learning rate must be in (0, 1]".into()));
    }
    if keys_values.is_empty() {
        return Err(Error::EmptyKeys);
    }
    if keys_values.rows.cols() != codebook.codes.cols() {
        return Err(Error::ChannelMismatch {
            expected: codebook.codes.cols(),
            actual: keys_values.rows.cols(),
        });
    }
    let mut hist = vec![0u64; codebook.codes.rows()];
    for key in keys_values.rows.row_iter() {
        let n = codebook.nearest(key);
        hist[n] += 1;
        for (c, &k) in codebook.codes.row_mut(n).iter_mut().zip(key) {
            *c = *c + learning_rate * (k - *c);
        }
    }
    for (u, h) in codebook.usage.iter_mut().zip(&hist) {
        *u += h;
    }
    Ok(hist)
}

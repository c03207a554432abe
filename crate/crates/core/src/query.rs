//! Object-query initialization from the compact `[L_c; G_c; B_c]` set, one
//! decoding step over refined visual and depth features, the confidence
//! filter, and loss composition.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionCache, AttentionGrads, CrossAttention};
use crate::clustering::{ClusterSet, SegmentationMask};
use crate::error::{Error, Result};
use crate::tensor::{LinearGrad, LinearMap, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RowSource {
    Local,
    Memory,
    Background,
}

/// Stacked valid rows: local block, then memory block, then background block.
#[derive(Clone, Debug, PartialEq)]
pub struct CompactFeatureSet<T> {
    pub rows: Tensor<T>,
    pub sources: Vec<RowSource>,
    /// Row index within the originating block.
    pub block_index: Vec<usize>,
}

impl<T: Real> CompactFeatureSet<T> {
    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn count(&self, source: RowSource) -> usize {
        self.sources.iter().filter(|&&s| s == source).count()
    }
}

pub fn build_compact_set<T: Real>(
    local: &ClusterSet<T>,
    memory: &Tensor<T>,
    background: &ClusterSet<T>,
) -> Result<CompactFeatureSet<T>> {
    let c = local.channels();
    for actual in [memory.cols(), background.channels()] {
        if actual != c {
            return Err(Error::ChannelMismatch { expected: c, actual });
        }
    }
    let mut data = Vec::new();
    let mut sources = Vec::new();
    let mut block_index = Vec::new();
    let mut push = |src, idx, row: &[T]| {
        data.extend_from_slice(row);
        sources.push(src);
        block_index.push(idx);
    };
    for (k, row) in local.valid_rows() {
        push(RowSource::Local, k, row);
    }
    for (k, row) in memory.row_iter().enumerate() {
        push(RowSource::Memory, k, row);
    }
    for (k, row) in background.valid_rows() {
        push(RowSource::Background, k, row);
    }
    if sources.is_empty() {
        return Err(Error::EmptySet);
    }
    Ok(CompactFeatureSet {
        rows: Tensor::from_raw(vec![sources.len(), c], data),
        sources,
        block_index,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct QueryBank<T> {
    /// `N_q × C`.
    pub queries: Tensor<T>,
    /// One value in `[0, 1]` per query; 0.5 before any decoding step.
    pub confidences: Vec<T>,
    /// `N_q × |compact|`, row-stochastic.
    pub init_attention: Tensor<T>,
}

impl<T: Real> QueryBank<T> {
    pub fn n_q(&self) -> usize {
        self.queries.rows()
    }

    pub fn to_json(&self, threshold: f64) -> QueryBankJson {
        QueryBankJson {
            n_q: self.n_q(),
            c: self.queries.cols(),
            confidences: self.confidences.iter().map(|x| x.as_f64()).collect(),
            retained: confidence_filter(&self.confidences, T::lit(threshold)),
            init_attention: self
                .init_attention
                .row_iter()
                .map(|r| r.iter().map(|x| x.as_f64()).collect())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryBankJson {
    pub n_q: usize,
    pub c: usize,
    pub confidences: Vec<f64>,
    pub retained: Vec<usize>,
    pub init_attention: Vec<Vec<f64>>,
}

/// Learnable state of the query path.
#[derive(Clone, Debug, PartialEq)]
pub struct QueryWeights<T> {
    /// `N_q × C` seed embeddings.
    pub embeddings: Tensor<T>,
    pub init: CrossAttention<T>,
    pub visual: CrossAttention<T>,
    pub depth: CrossAttention<T>,
    /// `C → 1` confidence head.
    pub confidence: LinearMap<T>,
}

fn seeded_attention<T: Real>(c: usize, rng: &mut ChaCha8Rng) -> CrossAttention<T> {
    let bound = 1.0 / (c as f64).sqrt();
    CrossAttention {
        w_q: LinearMap::identity(c),
        w_k: LinearMap::uniform(c, c, bound, false, rng),
        w_v: LinearMap::uniform(c, c, bound, false, rng),
    }
}

impl<T: Real> QueryWeights<T> {
    /// Embeddings standard normal; attention layers `w_q = I`, `w_k`, `w_v`
    /// uniform in `±1/√C`; confidence head uniform in `±1/√C` with zero bias.
    pub fn seeded(n_q: usize, c: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let emb = (0..n_q * c).map(|_| T::lit(normal.sample(&mut rng))).collect();
        let init = seeded_attention(c, &mut rng);
        let visual = seeded_attention(c, &mut rng);
        let depth = seeded_attention(c, &mut rng);
        let confidence = LinearMap::uniform(1, c, 1.0 / (c as f64).sqrt(), true, &mut rng);
        Self {
            embeddings: Tensor::from_raw(vec![n_q, c], emb),
            init,
            visual,
            depth,
            confidence,
        }
    }

    pub fn cast<U: Real>(&self) -> QueryWeights<U> {
        QueryWeights {
            embeddings: self.embeddings.cast(),
            init: self.init.cast(),
            visual: self.visual.cast(),
            depth: self.depth.cast(),
            confidence: self.confidence.cast(),
        }
    }
}

/// One residual cross-attention layer with the embeddings as queries and the
/// compact rows as keys/values.
pub fn init_queries<T: Real>(
    embeddings: &Tensor<T>,
    compact: &CompactFeatureSet<T>,
    layer: &CrossAttention<T>,
) -> Result<(QueryBank<T>, AttentionCache<T>)> {
    if compact.is_empty() {
        return Err(Error::EmptySet);
    }
    let (queries, cache) = layer.forward(embeddings, &compact.rows)?;
    let n = queries.rows();
    Ok((
        QueryBank {
            queries,
            confidences: vec![T::lit(0.5); n],
            init_attention: cache.attn.clone(),
        },
        cache,
    ))
}

/// Gradients of `⟨d_queries, init_queries(..).queries⟩`.
pub fn init_queries_backward<T: Real>(
    embeddings: &Tensor<T>,
    compact: &CompactFeatureSet<T>,
    layer: &CrossAttention<T>,
    cache: &AttentionCache<T>,
    d_queries: &Tensor<T>,
) -> AttentionGrads<T> {
    layer.backward(embeddings, &compact.rows, cache, d_queries)
}

/// Uniform depth-bin edges: `bins + 1` values from 0 to `max_depth`.
pub fn depth_bin_edges(bins: usize, max_depth: f64) -> Vec<f64> {
    // the last edge is pinned: max·n/n can miss max by an ulp
    (0..=bins)
        .map(|i| if i == bins { max_depth } else { max_depth * i as f64 / bins as f64 })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct DepthFeatures<T> {
    /// Per level `C × h × w`.
    pub levels: Vec<Tensor<T>>,
    pub bin_edges: Vec<f64>,
}

impl<T: Real> DepthFeatures<T> {
    /// Seeded `N(0, 1)` placeholder maps at the given per-level extents.
    pub fn synthetic(extents: &[(usize, usize)], c: usize, bins: usize, max_depth: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let levels = extents
            .iter()
            .map(|&(h, w)| {
                let data = (0..c * h * w).map(|_| T::lit(normal.sample(&mut rng))).collect();
                Tensor::from_raw(vec![c, h, w], data)
            })
            .collect();
        Self {
            levels,
            bin_edges: depth_bin_edges(bins, max_depth),
        }
    }

    pub fn bins(&self) -> usize {
        self.bin_edges.len().saturating_sub(1)
    }

    /// Bin containing `depth`, the last bin closed on the right.
    pub fn bin_of(&self, depth: f64) -> Option<usize> {
        let n = self.bins();
        if n == 0 || !(depth >= self.bin_edges[0] && depth <= self.bin_edges[n]) {
            return None;
        }
        Some(self.bin_edges[1..].partition_point(|&e| e <= depth).min(n - 1))
    }
}

fn flatten_levels<T: Real>(levels: &[Tensor<T>]) -> Result<Tensor<T>> {
    let c = levels.first().ok_or(Error::EmptyInput)?.channels();
    let mut data = Vec::new();
    let mut n = 0;
    for l in levels {
        if l.rank() != 3 || l.channels() != c {
            return Err(Error::ChannelMismatch {
                expected: c,
                actual: l.dims().first().copied().unwrap_or(0),
            });
        }
        let rows = l.pixels_as_rows();
        n += rows.rows();
        data.extend_from_slice(rows.data());
    }
    Ok(Tensor::from_raw(vec![n, c], data))
}

fn unflatten_levels<T: Real>(rows: &Tensor<T>, like: &[Tensor<T>]) -> Result<Vec<Tensor<T>>> {
    let c = rows.cols();
    let mut at = 0;
    like.iter()
        .map(|l| {
            let (h, w) = (l.height(), l.width());
            let part = Tensor::from_raw(vec![h * w, c], rows.data()[at * c..(at + h * w) * c].to_vec());
            at += h * w;
            Tensor::rows_as_map(&part, h, w)
        })
        .collect()
}

fn logistic<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[derive(Clone, Debug)]
pub struct DecodeCache<T> {
    visual_rows: Tensor<T>,
    depth_rows: Tensor<T>,
    mid: Tensor<T>,
    visual: AttentionCache<T>,
    depth: AttentionCache<T>,
}

#[derive(Clone, Debug)]
pub struct DecodeGrads<T> {
    pub queries: Tensor<T>,
    pub visual: Vec<Tensor<T>>,
    pub depth: Vec<Tensor<T>>,
    pub visual_attn: AttentionGrads<T>,
    pub depth_attn: AttentionGrads<T>,
    pub confidence: LinearGrad<T>,
}

/// Cross-attention over flattened refined visual features, then over
/// flattened depth features, then a logistic confidence head.
pub fn decode_step<T: Real>(
    bank: &QueryBank<T>,
    refined: &[Tensor<T>],
    depth: &DepthFeatures<T>,
    weights: &QueryWeights<T>,
) -> Result<(QueryBank<T>, DecodeCache<T>)> {
    if refined.is_empty() || refined.len() != depth.levels.len() {
        return Err(Error::LevelMismatch {
            expected: refined.len(),
            actual: depth.levels.len(),
        });
    }
    let visual_rows = flatten_levels(refined)?;
    let depth_rows = flatten_levels(&depth.levels)?;
    let (mid, vc) = weights.visual.forward(&bank.queries, &visual_rows)?;
    let (out, dc) = weights.depth.forward(&mid, &depth_rows)?;
    let logits = weights.confidence.apply_rows(&out)?;
    let confidences = logits.data().iter().map(|&x| logistic(x)).collect();
    Ok((
        QueryBank {
            queries: out,
            confidences,
            init_attention: bank.init_attention.clone(),
        },
        DecodeCache {
            visual_rows,
            depth_rows,
            mid,
            visual: vc,
            depth: dc,
        },
    ))
}

/// Gradients of `⟨d_queries, out.queries⟩ + ⟨d_conf, out.confidences⟩`.
#[allow(clippy::too_many_arguments)]
pub fn decode_step_backward<T: Real>(
    bank: &QueryBank<T>,
    refined: &[Tensor<T>],
    depth: &DepthFeatures<T>,
    weights: &QueryWeights<T>,
    cache: &DecodeCache<T>,
    out: &QueryBank<T>,
    d_queries: &Tensor<T>,
    d_conf: &[T],
) -> Result<DecodeGrads<T>> {
    let d_logit: Vec<T> = out
        .confidences
        .iter()
        .zip(d_conf)
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    let d_logit = Tensor::from_raw(vec![d_logit.len(), 1], d_logit);
    let (mut d_out, confidence) = weights.confidence.backward_rows(&out.queries, &d_logit);
    d_out.add_assign(d_queries);
    let depth_attn = weights
        .depth
        .backward(&cache.mid, &cache.depth_rows, &cache.depth, &d_out);
    let visual_attn = weights.visual.backward(
        &bank.queries,
        &cache.visual_rows,
        &cache.visual,
        &depth_attn.queries,
    );
    Ok(DecodeGrads {
        queries: visual_attn.queries.clone(),
        visual: unflatten_levels(&visual_attn.keys_values, refined)?,
        depth: unflatten_levels(&depth_attn.keys_values, &depth.levels)?,
        visual_attn,
        depth_attn,
        confidence,
    })
}

/// Indices with confidence `≥ threshold`, in order.
pub fn confidence_filter<T: Real>(confidences: &[T], threshold: T) -> Vec<usize> {
    confidences
        .iter()
        .enumerate()
        .filter(|(_, &c)| c >= threshold)
        .map(|(i, _)| i)
        .collect()
}

pub const REGION_TERMS: usize = 5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossTerms {
    pub l_2d: f64,
    pub l_3d: f64,
    pub l_depth: f64,
    pub l_region: [f64; REGION_TERMS],
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_2d: f64,
    pub l_3d: f64,
    pub l_depth: f64,
    pub l_region: [f64; REGION_TERMS],
    pub lambda: f64,
    pub total: f64,
}

/// `total = l_2d + l_3d + λ·l_depth + λ·Σ l_region[i]`.
pub fn compose_loss(terms: &LossTerms, lambda: f64) -> Result<LossBreakdown> {
    let named = [("l_2d", terms.l_2d), ("l_3d", terms.l_3d), ("l_depth", terms.l_depth)];
    for (name, v) in named {
        if !v.is_finite() {
            return Err(Error::NonFiniteTerm(name));
        }
    }
    if terms.l_region.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteTerm("l_region"));
    }
    if !lambda.is_finite() {
        return Err(Error::NonFiniteTerm("lambda"));
    }
    if lambda < 0.0 {
        return Err(Error::Config(format!("lambda must be ≥ 0, got {lambda}")));
    }
    let region: f64 = terms.l_region.iter().sum();
    let total = terms.l_2d + terms.l_3d + lambda * terms.l_depth + lambda * region;
    Ok(LossBreakdown {
        l_2d: terms.l_2d,
        l_3d: terms.l_3d,
        l_depth: terms.l_depth,
        l_region: terms.l_region,
        lambda,
        total,
    })
}

/// Per-level region loss between a predicted foreground probability map and
/// a target mask.
pub trait RegionLoss {
    fn level_loss(&self, predicted: &[f64], target: &SegmentationMask) -> Result<f64>;
}

/// Mean binary cross-entropy with probabilities clamped to `[eps, 1 − eps]`.
#[derive(Clone, Copy, Debug)]
pub struct BinaryCrossEntropy {
    pub eps: f64,
}

impl Default for BinaryCrossEntropy {
    fn default() -> Self {
        Self { eps: 1e-7 }
    }
}

impl RegionLoss for BinaryCrossEntropy {
    fn level_loss(&self, predicted: &[f64], target: &SegmentationMask) -> Result<f64> {
        if predicted.len() != target.bits().len() {
            return Err(Error::LengthMismatch {
                left: predicted.len(),
                right: target.bits().len(),
            });
        }
        if predicted.is_empty() {
            return Err(Error::EmptyInput);
        }
        let sum: f64 = predicted
            .iter()
            .zip(target.bits())
            .map(|(&p, &t)| {
                let p = p.clamp(self.eps, 1.0 - self.eps);
                if t {
                    -p.ln()
                } else {
                    -(1.0 - p).ln()
                }
            })
            .sum();
        Ok(sum / predicted.len() as f64)
    }
}

/// Region terms for up to five levels; missing levels contribute 0.
pub fn region_terms(
    provider: &dyn RegionLoss,
    levels: &[(Vec<f64>, &SegmentationMask)],
) -> Result<[f64; REGION_TERMS]> {
    if levels.len() > REGION_TERMS {
        return Err(Error::LevelMismatch {
            expected: REGION_TERMS,
            actual: levels.len(),
        });
    }
    let mut out = [0.0; REGION_TERMS];
    for (o, (pred, mask)) in out.iter_mut().zip(levels) {
        *o = provider.level_loss(pred, mask)?;
    }
    Ok(out)
}

/// Foreground probability read off a similarity map: `(S + 1) / 2`.
pub fn similarity_to_probability<T: Real>(scores: &[T]) -> Vec<f64> {
    scores
        .iter()
        .map(|s| ((s.as_f64() + 1.0) * 0.5).clamp(0.0, 1.0))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::Rng;

    fn set(rows: &[&[f64]], valid: &[bool]) -> ClusterSet<f64> {
        ClusterSet {
            rows: Tensor::from_rows(rows).unwrap(),
            validity: valid.to_vec(),
            assignment: vec![],
            extents: vec![],
            inertia: 0.0,
            inertia_history: vec![],
        }
    }

    fn random(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
        let n = dims.iter().product();
        Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn compact_set_order_and_filtering() {
        let local = set(&[&[1.0, 0.0], &[2.0, 0.0], &[3.0, 0.0]], &[true, false, true]);
        let mem = Tensor::from_rows(&[[0.0, 1.0]]).unwrap();
        let bg = set(&[&[0.0, 5.0]], &[true]);
        let cs = build_compact_set(&local, &mem, &bg).unwrap();
        assert_eq!(
            cs.sources,
            vec![RowSource::Local, RowSource::Local, RowSource::Memory, RowSource::Background]
        );
        assert_eq!(cs.block_index, vec![0, 2, 0, 0]);
        assert_eq!(cs.rows.data(), &[1.0, 0.0, 3.0, 0.0, 0.0, 1.0, 0.0, 5.0]);
    }

    #[test]
    fn compact_set_defaults_and_errors() {
        let rows: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64; 4]).collect();
        let local = ClusterSet {
            rows: Tensor::from_rows(&rows).unwrap(),
            validity: vec![true; 10],
            assignment: vec![],
            extents: vec![],
            inertia: 0.0,
            inertia_history: vec![],
        };
        let mem = Tensor::<f64>::zeros(&[3, 4]);
        let bg = ClusterSet {
            rows: Tensor::zeros(&[3, 4]),
            validity: vec![true; 3],
            ..local.clone()
        };
        assert_eq!(build_compact_set(&local, &mem, &bg).unwrap().len(), 16);
        let mut partial = local.clone();
        for v in &mut partial.validity[..4] {
            *v = false;
        }
        assert_eq!(build_compact_set(&partial, &mem, &bg).unwrap().len(), 12);

        let none = ClusterSet {
            validity: vec![false; 10],
            ..local.clone()
        };
        let no_bg = ClusterSet {
            validity: vec![false; 3],
            ..bg.clone()
        };
        assert!(matches!(
            build_compact_set(&none, &Tensor::zeros(&[0, 4]), &no_bg),
            Err(Error::EmptySet)
        ));
        assert!(matches!(
            build_compact_set(&local, &Tensor::zeros(&[3, 5]), &bg),
            Err(Error::ChannelMismatch { .. })
        ));
    }

    fn compact(rows: Tensor<f64>) -> CompactFeatureSet<f64> {
        let n = rows.rows();
        CompactFeatureSet {
            rows,
            sources: vec![RowSource::Local; n],
            block_index: (0..n).collect(),
        }
    }

    #[test]
    fn init_single_row_and_zero_value() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let w = QueryWeights::<f64>::seeded(5, 3, 1);
        let (bank, _) = init_queries(&w.embeddings, &compact(random(&mut rng, &[1, 3])), &w.init).unwrap();
        assert!(bank.init_attention.data().iter().all(|&a| a == 1.0));

        let mut layer = w.init.clone();
        layer.w_v = LinearMap::zeros(3, 3, false);
        layer.w_q = LinearMap::uniform(3, 3, 1.0, false, &mut rng);
        let (bank, _) = init_queries(&w.embeddings, &compact(random(&mut rng, &[4, 3])), &layer).unwrap();
        let want = layer.w_q.apply_rows(&w.embeddings).unwrap();
        assert_eq!(bank.queries, want);
        assert_eq!(w.embeddings.rows(), 5);
    }

    #[test]
    fn init_permutation_equivariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w = QueryWeights::<f64>::seeded(4, 3, 7);
        let rows = random(&mut rng, &[5, 3]);
        let perm = [3, 0, 4, 1, 2];
        let permuted = Tensor::from_rows(&perm.iter().map(|&i| rows.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
        let (a, _) = init_queries(&w.embeddings, &compact(rows), &w.init).unwrap();
        let (b, _) = init_queries(&w.embeddings, &compact(permuted), &w.init).unwrap();
        assert!(a.queries.max_abs_diff(&b.queries) < 1e-12);
        for q in 0..4 {
            for (j, &i) in perm.iter().enumerate() {
                assert!((a.init_attention.row(q)[i] - b.init_attention.row(q)[j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn init_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = QueryWeights::<f64>::seeded(3, 4, 5);
        let cs = compact(random(&mut rng, &[6, 4]));
        let u = random(&mut rng, &[3, 4]);
        let (_, cache) = init_queries(&w.embeddings, &cs, &w.init).unwrap();
        let g = init_queries_backward(&w.embeddings, &cs, &w.init, &cache, &u);
        let e = grad_check(
            |x| {
                let emb = Tensor::matrix(3, 4, x.to_vec()).unwrap();
                init_queries(&emb, &cs, &w.init).unwrap().0.queries.inner(&u)
            },
            w.embeddings.data(),
            g.queries.data(),
        )
        .unwrap();
        assert!(e <= 1e-4, "{e}");
        let e = grad_check(
            |x| {
                let c2 = compact(Tensor::matrix(6, 4, x.to_vec()).unwrap());
                init_queries(&w.embeddings, &c2, &w.init).unwrap().0.queries.inner(&u)
            },
            cs.rows.data(),
            g.keys_values.data(),
        )
        .unwrap();
        assert!(e <= 1e-4, "{e}");
    }

    fn decode_fixture(rng: &mut ChaCha8Rng) -> (QueryBank<f64>, Vec<Tensor<f64>>, DepthFeatures<f64>, QueryWeights<f64>) {
        let mut w = QueryWeights::<f64>::seeded(3, 4, 17);
        w.confidence.bias_mut().unwrap()[0] = 0.2;
        let bank = QueryBank {
            queries: random(rng, &[3, 4]),
            confidences: vec![0.5; 3],
            init_attention: Tensor::filled(&[3, 1], 1.0),
        };
        let refined = vec![random(rng, &[4, 2, 2]), random(rng, &[4, 1, 1])];
        let depth = DepthFeatures {
            levels: vec![random(rng, &[4, 2, 2]), random(rng, &[4, 1, 1])],
            bin_edges: depth_bin_edges(80, 60.0),
        };
        (bank, refined, depth, w)
    }

    #[test]
    fn decode_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let (bank, refined, depth, w) = decode_fixture(&mut rng);
        let u = random(&mut rng, &[3, 4]);
        let uc = vec![0.7, -0.3, 1.1];
        let obj = |bank: &QueryBank<f64>, refined: &[Tensor<f64>], depth: &DepthFeatures<f64>, w: &QueryWeights<f64>| {
            let (out, _) = decode_step(bank, refined, depth, w).unwrap();
            out.queries.inner(&u) + out.confidences.iter().zip(&uc).map(|(a, b)| a * b).sum::<f64>()
        };
        let (out, cache) = decode_step(&bank, &refined, &depth, &w).unwrap();
        let g = decode_step_backward(&bank, &refined, &depth, &w, &cache, &out, &u, &uc).unwrap();

        let e = grad_check(
            |x| {
                let mut b = bank.clone();
                b.queries = Tensor::matrix(3, 4, x.to_vec()).unwrap();
                obj(&b, &refined, &depth, &w)
            },
            bank.queries.data(),
            g.queries.data(),
        )
        .unwrap();
        assert!(e <= 1e-4, "queries {e}");
        for l in 0..2 {
            let e = grad_check(
                |x| {
                    let mut r = refined.clone();
                    r[l] = Tensor::new(refined[l].dims().to_vec(), x.to_vec()).unwrap();
                    obj(&bank, &r, &depth, &w)
                },
                refined[l].data(),
                g.visual[l].data(),
            )
            .unwrap();
            assert!(e <= 1e-4, "visual {l} {e}");
            let e = grad_check(
                |x| {
                    let mut d = depth.clone();
                    d.levels[l] = Tensor::new(depth.levels[l].dims().to_vec(), x.to_vec()).unwrap();
                    obj(&bank, &refined, &d, &w)
                },
                depth.levels[l].data(),
                g.depth[l].data(),
            )
            .unwrap();
            assert!(e <= 1e-4, "depth {l} {e}");
        }
        let mut p = w.visual.params();
        p.extend(w.depth.params());
        p.extend(w.confidence.params());
        let mut gp = g.visual_attn.params();
        gp.extend(g.depth_attn.params());
        gp.extend(g.confidence.flatten());
        let (nv, nd) = (w.visual.params().len(), w.depth.params().len());
        let e = grad_check(
            |x| {
                let mut ww = w.clone();
                ww.visual.set_params(&x[..nv]);
                ww.depth.set_params(&x[nv..nv + nd]);
                ww.confidence.set_params(&x[nv + nd..]);
                obj(&bank, &refined, &depth, &ww)
            },
            &p,
            &gp,
        )
        .unwrap();
        assert!(e <= 1e-4, "params {e}");
    }

    #[test]
    fn decode_zero_value_paths_and_zero_head() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (bank, refined, depth, mut w) = decode_fixture(&mut rng);
        w.visual.w_v = LinearMap::zeros(4, 4, false);
        w.depth.w_v = LinearMap::zeros(4, 4, false);
        let (out, _) = decode_step(&bank, &refined, &depth, &w).unwrap();
        // w_q is the identity in both layers
        assert_eq!(out.queries, bank.queries);
        for (q, &c) in out.queries.row_iter().zip(&out.confidences) {
            assert!((c - logistic(w.confidence.apply(q)[0])).abs() < 1e-15);
        }
        w.confidence = LinearMap::zeros(1, 4, true);
        let (out, _) = decode_step(&bank, &refined, &depth, &w).unwrap();
        assert!(out.confidences.iter().all(|&c| c == 0.5));
    }

    #[test]
    fn decode_scalar_hand_computation() {
        // C = 1, two 1-pixel levels, identity projections.
        let id = || CrossAttention {
            w_q: LinearMap::<f64>::identity(1),
            w_k: LinearMap::identity(1),
            w_v: LinearMap::identity(1),
        };
        let w = QueryWeights {
            embeddings: Tensor::zeros(&[1, 1]),
            init: id(),
            visual: id(),
            depth: id(),
            confidence: LinearMap::new(Tensor::matrix(1, 1, vec![2.0]).unwrap(), Some(vec![-1.0])).unwrap(),
        };
        let bank = QueryBank {
            queries: Tensor::matrix(1, 1, vec![0.5]).unwrap(),
            confidences: vec![0.5],
            init_attention: Tensor::filled(&[1, 1], 1.0),
        };
        let refined = vec![Tensor::filled(&[1, 1, 1], 1.0), Tensor::filled(&[1, 1, 1], 2.0)];
        let depth = DepthFeatures {
            levels: vec![Tensor::filled(&[1, 1, 1], -1.0), Tensor::filled(&[1, 1, 1], 0.0)],
            bin_edges: depth_bin_edges(80, 60.0),
        };
        let (out, _) = decode_step(&bank, &refined, &depth, &w).unwrap();
        // stage 1: logits 0.5·1, 0.5·2
        let (e1, e2) = (0.5f64.exp(), 1.0f64.exp());
        let q1 = (e1 * 1.0 + e2 * 2.0) / (e1 + e2) + 0.5;
        // stage 2: logits −q1, 0
        let (f1, f2) = ((-q1).exp(), 1.0);
        let q2 = (f1 * -1.0 + f2 * 0.0) / (f1 + f2) + q1;
        let conf = 1.0 / (1.0 + (-(2.0 * q2 - 1.0)).exp());
        assert!((out.queries.data()[0] - q2).abs() < 1e-12);
        assert!((out.confidences[0] - conf).abs() < 1e-12);
    }

    #[test]
    fn decode_level_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (bank, refined, mut depth, w) = decode_fixture(&mut rng);
        depth.levels.pop();
        assert!(matches!(
            decode_step(&bank, &refined, &depth, &w),
            Err(Error::LevelMismatch { .. })
        ));
    }

    #[test]
    fn filter_examples() {
        assert_eq!(confidence_filter(&[0.1, 0.2, 0.9], 0.2), vec![1, 2]);
        assert!(confidence_filter(&[0.1, 0.15], 0.2).is_empty());
        assert_eq!(confidence_filter(&[0.0, 0.3], 0.0), vec![0, 1]);
    }

    #[test]
    fn depth_bins() {
        let e = depth_bin_edges(80, 60.0);
        assert_eq!(e.len(), 81);
        assert_eq!(e[0], 0.0);
        assert_eq!(e[80], 60.0);
        assert!(e.windows(2).all(|w| w[1] > w[0]));
        let d = DepthFeatures::<f32>::synthetic(&[(2, 2)], 3, 80, 60.0, 0);
        assert_eq!(d.bin_of(0.0), Some(0));
        assert_eq!(d.bin_of(0.75), Some(1));
        assert_eq!(d.bin_of(60.0), Some(79));
        assert_eq!(d.bin_of(60.1), None);
    }

    #[test]
    fn loss_examples() {
        assert_eq!(compose_loss(&LossTerms::default(), 1.0).unwrap().total, 0.0);
        let t = LossTerms {
            l_2d: 1.0,
            l_3d: 2.0,
            l_depth: 3.0,
            l_region: [1.0; 5],
        };
        assert_eq!(compose_loss(&t, 0.5).unwrap().total, 7.0);
        assert_eq!(compose_loss(&t, 0.0).unwrap().total, 3.0);
        let bad = LossTerms {
            l_depth: f64::NAN,
            ..t
        };
        assert!(matches!(compose_loss(&bad, 1.0), Err(Error::NonFiniteTerm("l_depth"))));
    }

    #[test]
    fn bce_region_terms() {
        let mask = SegmentationMask::new(1, 2, vec![true, false]).unwrap();
        let terms = region_terms(&BinaryCrossEntropy::default(), &[(vec![0.8, 0.4], &mask)]).unwrap();
        let want = -(0.8f64.ln() + 0.6f64.ln()) / 2.0;
        assert!((terms[0] - want).abs() < 1e-12);
        assert_eq!(&terms[1..], &[0.0; 4]);
        assert_eq!(similarity_to_probability(&[-1.0, 0.0, 1.0]), vec![0.0, 0.5, 1.0]);
    }
}

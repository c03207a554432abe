//! Runtime self-checks behind the `suite` subcommand: brute-force oracles,
//! finite-difference gradient checks and the memory ablation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ablation::{run_ablation, AblationConfig, AblationReport};
use crate::clustering::{lloyd, masked_average_pool, masked_average_pool_backward, ClusterSet, SegmentationMask};
use crate::error::Result;
use crate::memory::{FlattenedClusters, SceneMemory};
use crate::query::{
    decode_step, decode_step_backward, init_queries, init_queries_backward, CompactFeatureSet, DepthFeatures,
    QueryBank, QueryWeights, RowSource,
};
use crate::reloc::{
    fuse_and_refine, fuse_and_refine_backward, sampling_kink_margin, similarity_map, DeformableConfig, DeformableWeights, LevelInput,
};
use crate::tensor::{cosine, cosine_backward, grad_check, softmax, softmax_backward, LinearMap, Tensor};

pub const GRADIENT_TOLERANCE: f64 = 1e-4;
pub const KMEANS_TOLERANCE: f64 = 1e-6;
pub const SIMILARITY_TOLERANCE: f64 = 1e-5;
pub const POOLING_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteKind {
    Oracles,
    Gradients,
    Ablation,
}

impl std::str::FromStr for SuiteKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "oracles" => Ok(SuiteKind::Oracles),
            "gradients" => Ok(SuiteKind::Gradients),
            "ablation" => Ok(SuiteKind::Ablation),
            other => Err(crate::Error::Config(format!("unknown suite {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleCase {
    pub seed: u64,
    pub kmeans_gap: f64,
    pub similarity_error: f64,
    pub pooling_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    pub cases: Vec<OracleCase>,
    pub passed: usize,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientTarget {
    pub target: String,
    pub max_relative_error: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub report: AblationReport,
    pub passed: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuiteReport {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub oracles: Option<OracleReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub gradients: Option<Vec<GradientTarget>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ablation: Option<AblationSummary>,
    pub passed: bool,
}

/// Minimum inertia over every assignment of `m` points to at most `k` labels.
pub fn exhaustive_min_inertia(points: &[f64], dim: usize, k: usize) -> f64 {
    let m = points.len() / dim;
    let mut labels = vec![0usize; m];
    let mut best = f64::INFINITY;
    loop {
        let mut inertia = 0.0;
        for c in 0..k {
            let members: Vec<&[f64]> = points
                .chunks_exact(dim)
                .zip(&labels)
                .filter(|(_, &l)| l == c)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            for d in 0..dim {
                let mean = members.iter().map(|p| p[d]).sum::<f64>() / members.len() as f64;
                inertia += members.iter().map(|p| (p[d] - mean).powi(2)).sum::<f64>();
            }
        }
        best = best.min(inertia);
        // odometer increment over k^m labelings
        let mut i = 0;
        while i < m {
            labels[i] += 1;
            if labels[i] < k {
                break;
            }
            labels[i] = 0;
            i += 1;
        }
        if i == m {
            return best;
        }
    }
}

/// Best Lloyd inertia over every `k`-subset of the points as initial centroids.
pub fn best_subset_lloyd(points: &[f64], dim: usize, k: usize) -> f64 {
    let m = points.len() / dim;
    let k = k.min(m);
    let mut best = f64::INFINITY;
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        let init: Vec<f64> = idx.iter().flat_map(|&i| points[i * dim..(i + 1) * dim].to_vec()).collect();
        best = best.min(lloyd(points, dim, &init, 100, 0.0).inertia());
        // next combination in lexicographic order
        let mut i = k;
        loop {
            if i == 0 {
                return best;
            }
            i -= 1;
            if idx[i] < m - k + i {
                idx[i] += 1;
                for j in i + 1..k {
                    idx[j] = idx[j - 1] + 1;
                }
                break;
            }
        }
    }
}

fn kmeans_gap(rng: &mut ChaCha8Rng) -> f64 {
    let m = rng.random_range(1..=8);
    let dim = rng.random_range(1..=4);
    let k = rng.random_range(1..=3);
    let points: Vec<f64> = (0..m * dim).map(|_| rng.random_range(-1.0..1.0)).collect();
    (best_subset_lloyd(&points, dim, k) - exhaustive_min_inertia(&points, dim, k)).abs()
}

fn similarity_error(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (h, w) = (rng.random_range(1..=32), rng.random_range(1..=32));
    let c = rng.random_range(1..=16);
    let k = rng.random_range(1..=10);
    let f: Tensor<f64> = Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())?;
    let rows: Vec<Vec<f64>> = (0..k).map(|_| (0..c).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let set = ClusterSet {
        rows: Tensor::from_rows(&rows)?,
        validity: vec![true; k],
        assignment: vec![],
        extents: vec![],
        inertia: 0.0,
        inertia_history: vec![],
    };
    let s = similarity_map(&f, &set, 8, 1.0)?;
    let mut worst: f64 = 0.0;
    for i in 0..h {
        for j in 0..w {
            let px = f.pixel(i, j);
            let brute = rows
                .iter()
                .map(|r| {
                    let (mut d, mut na, mut nb) = (0.0, 0.0, 0.0);
                    for (a, b) in r.iter().zip(&px) {
                        d += a * b;
                        na += a * a;
                        nb += b * b;
                    }
                    d / (na.sqrt() * nb.sqrt())
                })
                .fold(f64::NEG_INFINITY, f64::max);
            let got = s.scores[i * w + j];
            if !(-1.0..=1.0).contains(&got) {
                return Ok(f64::INFINITY);
            }
            worst = worst.max((got - brute).abs());
        }
    }
    Ok(worst)
}

fn pooling_error(rng: &mut ChaCha8Rng) -> Result<f64> {
    let (h, w, c) = (rng.random_range(1..=12), rng.random_range(1..=12), rng.random_range(1..=8));
    let f: Tensor<f64> = Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.random_range(-5.0..5.0)).collect())?;
    let mut bits: Vec<bool> = (0..h * w).map(|_| rng.random_bool(0.4)).collect();
    bits[rng.random_range(0..h * w)] = true;
    let mask = SegmentationMask::new(h, w, bits.clone())?;
    let pooled = masked_average_pool(&f, &mask)?;
    let mut worst: f64 = 0.0;
    for (ch, got) in pooled.iter().enumerate() {
        let (mut num, mut den) = (0.0, 0.0);
        for p in 0..h * w {
            let m = if bits[p] { 1.0 } else { 0.0 };
            num += m * f.data()[ch * h * w + p];
            den += m;
        }
        worst = worst.max((got - num / den).abs());
    }
    Ok(worst)
}

pub fn run_oracles(seeds: std::ops::Range<u64>) -> Result<OracleReport> {
    let mut cases = Vec::new();
    for seed in seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let kmeans_gap = kmeans_gap(&mut rng);
        let similarity_error = similarity_error(&mut rng)?;
        let pooling_error = pooling_error(&mut rng)?;
        cases.push(OracleCase {
            seed,
            passed: kmeans_gap <= KMEANS_TOLERANCE
                && similarity_error <= SIMILARITY_TOLERANCE
                && pooling_error <= POOLING_TOLERANCE,
            kmeans_gap,
            similarity_error,
            pooling_error,
        });
    }
    Ok(OracleReport {
        passed: cases.iter().filter(|c| c.passed).count(),
        total: cases.len(),
        cases,
    })
}

fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
}

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    Tensor::new(dims.to_vec(), rand_vec(rng, dims.iter().product())).expect("dims match data")
}

fn target(name: &str, err: f64) -> GradientTarget {
    GradientTarget {
        target: name.to_string(),
        max_relative_error: err,
        passed: err <= GRADIENT_TOLERANCE,
    }
}

/// Finite-difference checks of every hand-written backward pass, in `f64`.
pub fn run_gradients(seed: u64) -> Result<Vec<GradientTarget>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();

    // masked pooling
    let f = rand_tensor(&mut rng, &[3, 4, 5]);
    let mask = SegmentationMask::new(4, 5, (0..20).map(|i| i % 3 != 0).collect())?;
    let u = rand_vec(&mut rng, 3);
    let g = masked_average_pool_backward(&mask, &u)?;
    let e = grad_check(
        |x| {
            let t = Tensor::new(vec![3, 4, 5], x.to_vec()).expect("dims");
            masked_average_pool(&t, &mask).expect("nonempty").iter().zip(&u).map(|(a, b)| a * b).sum()
        },
        f.data(),
        g.data(),
    )?;
    out.push(target("masked_average_pool", e));

    // cosine
    let (a, b) = (rand_vec(&mut rng, 6), rand_vec(&mut rng, 6));
    let (da, _) = cosine_backward(&a, &b, 1.0);
    let e = grad_check(|x| cosine(x, &b).expect("lengths"), &a, &da)?;
    out.push(target("cosine", e));

    // softmax
    let z = rand_vec(&mut rng, 7);
    let v = rand_vec(&mut rng, 7);
    let y = softmax(&z)?;
    let dz = softmax_backward(&y, &v);
    let e = grad_check(
        |x| softmax(x).expect("finite").iter().zip(&v).map(|(a, b)| a * b).sum(),
        &z,
        &dz,
    )?;
    out.push(target("softmax", e));

    // memory update
    let mem = SceneMemory::<f64>::new(3, 4, rng.random())?;
    let keys = FlattenedClusters {
        rows: rand_tensor(&mut rng, &[5, 4]),
        origin: (0..5).map(|i| (0, i)).collect(),
    };
    let u = rand_tensor(&mut rng, &[3, 4]);
    let (_, cache) = mem.attend(&keys)?;
    let g = mem.backward(mem.memory(), &keys, &cache, &u);
    let attn = mem.attention().clone();
    let e1 = grad_check(
        |x| {
            let m = Tensor::matrix(3, 4, x.to_vec()).expect("dims");
            attn.forward(&m, &keys.rows).expect("fwd").0.inner(&u)
        },
        mem.memory().data(),
        g.queries.data(),
    )?;
    let e2 = grad_check(
        |x| {
            let k = Tensor::matrix(5, 4, x.to_vec()).expect("dims");
            attn.forward(mem.memory(), &k).expect("fwd").0.inner(&u)
        },
        keys.rows.data(),
        g.keys_values.data(),
    )?;
    let e3 = grad_check(
        |p| {
            let mut a = attn.clone();
            a.set_params(p);
            a.forward(mem.memory(), &keys.rows).expect("fwd").0.inner(&u)
        },
        &attn.params(),
        &g.params(),
    )?;
    out.push(target("memory_update", e1.max(e2).max(e3)));

    // fuse and refine
    out.push(target("fuse_and_refine", fuse_and_refine_gradient(&mut rng)?));

    // init queries
    let w = QueryWeights::<f64>::seeded(3, 4, rng.random());
    let compact = CompactFeatureSet {
        rows: rand_tensor(&mut rng, &[5, 4]),
        sources: vec![RowSource::Local; 5],
        block_index: (0..5).collect(),
    };
    let u = rand_tensor(&mut rng, &[3, 4]);
    let (_, cache) = init_queries(&w.embeddings, &compact, &w.init)?;
    let g = init_queries_backward(&w.embeddings, &compact, &w.init, &cache, &u);
    let e1 = grad_check(
        |x| {
            let emb = Tensor::matrix(3, 4, x.to_vec()).expect("dims");
            init_queries(&emb, &compact, &w.init).expect("fwd").0.queries.inner(&u)
        },
        w.embeddings.data(),
        g.queries.data(),
    )?;
    let e2 = grad_check(
        |x| {
            let c = CompactFeatureSet {
                rows: Tensor::matrix(5, 4, x.to_vec()).expect("dims"),
                ..compact.clone()
            };
            init_queries(&w.embeddings, &c, &w.init).expect("fwd").0.queries.inner(&u)
        },
        compact.rows.data(),
        g.keys_values.data(),
    )?;
    let e3 = grad_check(
        |p| {
            let mut l = w.init.clone();
            l.set_params(p);
            init_queries(&w.embeddings, &compact, &l).expect("fwd").0.queries.inner(&u)
        },
        &w.init.params(),
        &g.params(),
    )?;
    out.push(target("init_queries", e1.max(e2).max(e3)));

    out.push(target("decode_step", decode_gradient(&mut rng)?));
    Ok(out)
}

/// Bilinear-kink clearance, in pixels, required of gradient-check instances.
pub const KINK_MARGIN: f64 = 0.02;

fn fuse_and_refine_gradient(rng: &mut ChaCha8Rng) -> Result<f64> {
    let cfg = DeformableConfig {
        heads: 2,
        sample_points: 2,
    };
    let c = 4;
    let (f1, f2, s1, s2, r1, r2, w) = loop {
        let f1 = rand_tensor(rng, &[c, 3, 3]);
        let f2 = rand_tensor(rng, &[c, 2, 2]);
        let s1 = rand_vec(rng, 9);
        let s2 = rand_vec(rng, 4);
        let r1 = Tensor::new(vec![2, 3, 3], (0..18).map(|_| rng.random_range(0.1..0.9)).collect())?;
        let r2 = Tensor::new(vec![2, 2, 2], (0..8).map(|_| rng.random_range(0.1..0.9)).collect())?;
        let mut w = DeformableWeights::<f64>::seeded(c, 2, cfg, rng.random());
        w.offsets = LinearMap::uniform(16, c, 0.4, true, rng);
        w.attn = LinearMap::uniform(8, c, 0.8, true, rng);
        let inputs = [
            LevelInput {
                features: &f1,
                similarity: &s1,
                refined: &r1,
            },
            LevelInput {
                features: &f2,
                similarity: &s2,
                refined: &r2,
            },
        ];
        if sampling_kink_margin(&inputs, cfg, &w)? >= KINK_MARGIN {
            break (f1, f2, s1, s2, r1, r2, w);
        }
    };
    let u1 = rand_tensor(rng, &[c, 3, 3]);
    let u2 = rand_tensor(rng, &[c, 2, 2]);
    let levels = |f1: &Tensor<f64>, f2: &Tensor<f64>, s1: &[f64]| -> Vec<(Tensor<f64>, Tensor<f64>, Vec<f64>)> {
        vec![(f1.clone(), r1.clone(), s1.to_vec()), (f2.clone(), r2.clone(), s2.clone())]
    };
    let objective = |f1: &Tensor<f64>, f2: &Tensor<f64>, s1: &[f64], w: &DeformableWeights<f64>| {
        let lv = levels(f1, f2, s1);
        let inputs: Vec<LevelInput<'_, f64>> = lv
            .iter()
            .map(|(f, r, s)| LevelInput {
                features: f,
                similarity: s,
                refined: r,
            })
            .collect();
        let out = fuse_and_refine(&inputs, cfg, w).expect("fwd");
        out[0].inner(&u1) + out[1].inner(&u2)
    };
    let lv = levels(&f1, &f2, &s1);
    let inputs: Vec<LevelInput<'_, f64>> = lv
        .iter()
        .map(|(f, r, s)| LevelInput {
            features: f,
            similarity: s,
            refined: r,
        })
        .collect();
    let g = fuse_and_refine_backward(&inputs, cfg, &w, &[u1.clone(), u2.clone()])?;
    let e1 = grad_check(
        |x| objective(&Tensor::new(vec![c, 3, 3], x.to_vec()).expect("dims"), &f2, &s1, &w),
        f1.data(),
        g.features[0].data(),
    )?;
    let e2 = grad_check(
        |x| objective(&f1, &Tensor::new(vec![c, 2, 2], x.to_vec()).expect("dims"), &s1, &w),
        f2.data(),
        g.features[1].data(),
    )?;
    let e3 = grad_check(|x| objective(&f1, &f2, x, &w), &s1, &g.similarity[0])?;
    let e4 = grad_check(
        |p| {
            let mut ww = w.clone();
            ww.set_params(p);
            objective(&f1, &f2, &s1, &ww)
        },
        &w.params(),
        &g.params(),
    )?;
    Ok(e1.max(e2).max(e3).max(e4))
}

fn decode_gradient(rng: &mut ChaCha8Rng) -> Result<f64> {
    let w = QueryWeights::<f64>::seeded(3, 4, rng.random());
    let bank = QueryBank {
        queries: rand_tensor(rng, &[3, 4]),
        confidences: vec![0.5; 3],
        init_attention: Tensor::filled(&[3, 1], 1.0),
    };
    let refined = vec![rand_tensor(rng, &[4, 2, 2]), rand_tensor(rng, &[4, 1, 2])];
    let depth = DepthFeatures {
        levels: vec![rand_tensor(rng, &[4, 2, 2]), rand_tensor(rng, &[4, 1, 2])],
        bin_edges: crate::query::depth_bin_edges(80, 60.0),
    };
    let u = rand_tensor(rng, &[3, 4]);
    let uc = rand_vec(rng, 3);
    let obj = |bank: &QueryBank<f64>, refined: &[Tensor<f64>], depth: &DepthFeatures<f64>, w: &QueryWeights<f64>| {
        let (o, _) = decode_step(bank, refined, depth, w).expect("fwd");
        o.queries.inner(&u) + o.confidences.iter().zip(&uc).map(|(a, b)| a * b).sum::<f64>()
    };
    let (out, cache) = decode_step(&bank, &refined, &depth, &w)?;
    let g = decode_step_backward(&bank, &refined, &depth, &w, &cache, &out, &u, &uc)?;
    let mut worst = grad_check(
        |x| {
            let b = QueryBank {
                queries: Tensor::matrix(3, 4, x.to_vec()).expect("dims"),
                ..bank.clone()
            };
            obj(&b, &refined, &depth, &w)
        },
        bank.queries.data(),
        g.queries.data(),
    )?;
    for l in 0..refined.len() {
        let e = grad_check(
            |x| {
                let mut r = refined.clone();
                r[l] = Tensor::new(refined[l].dims().to_vec(), x.to_vec()).expect("dims");
                obj(&bank, &r, &depth, &w)
            },
            refined[l].data(),
            g.visual[l].data(),
        )?;
        worst = worst.max(e);
        let e = grad_check(
            |x| {
                let mut d = depth.clone();
                d.levels[l] = Tensor::new(depth.levels[l].dims().to_vec(), x.to_vec()).expect("dims");
                obj(&bank, &refined, &d, &w)
            },
            depth.levels[l].data(),
            g.depth[l].data(),
        )?;
        worst = worst.max(e);
    }
    let layers = |w: &QueryWeights<f64>| -> Vec<f64> {
        let mut p = w.visual.params();
        p.extend(w.depth.params());
        p.extend(w.confidence.params());
        p
    };
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
        &layers(&w),
        &gp,
    )?;
    Ok(worst.max(e))
}

/// Criteria: attention beats the codebook on at least `seeds − 1` seeds and
/// the single-tight-cluster codebook shows a dead slot.
pub fn run_ablation_suite(seeds: &[u64]) -> Result<AblationSummary> {
    let report = run_ablation(&AblationConfig::default(), seeds)?;
    let needed = seeds.len().saturating_sub(1);
    Ok(AblationSummary {
        passed: report.attention_wins >= needed && report.tight_cluster_dead_slots >= 1,
        report,
    })
}

pub fn run_suites(kinds: &[SuiteKind], oracle_seeds: std::ops::Range<u64>) -> Result<SuiteReport> {
    let mut r = SuiteReport::default();
    let mut ok = true;
    for kind in kinds {
        match kind {
            SuiteKind::Oracles => {
                let o = run_oracles(oracle_seeds.clone())?;
                ok &= o.passed == o.total;
                r.oracles = Some(o);
            }
            SuiteKind::Gradients => {
                let g = run_gradients(0)?;
                ok &= g.iter().all(|t| t.passed);
                r.gradients = Some(g);
            }
            SuiteKind::Ablation => {
                let a = run_ablation_suite(&[0, 1, 2, 3, 4])?;
                ok &= a.passed;
                r.ablation = Some(a);
            }
        }
    }
    r.passed = ok;
    Ok(r)
}

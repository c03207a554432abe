//! Acceptance criteria, one test each. Every test prints a single
//! `criterion N ... PASS|FAIL` line to stderr before asserting, so
//! `cargo test --test acceptance -- --nocapture` (or a plain run) shows
//! the verdicts.

use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use monoclue_core::ablation::{run_ablation, AblationConfig};
use monoclue_core::attention::CrossAttention;
use monoclue_core::clustering::{kmeans_masked, lloyd, masked_average_pool, ClusterSet, KMeansConfig, SegmentationMask};
use monoclue_core::config::PipelineConfig;
use monoclue_core::memory::{flatten_batch, FlattenedClusters, SceneMemory};
use monoclue_core::query::{
    compose_loss, depth_bin_edges, init_queries, CompactFeatureSet, LossTerms, QueryWeights, RowSource,
};
use monoclue_core::reloc::{init_offsets, OffsetVariant, reference_lattice, similarity_map, soft_argmax_center, SimilarityMap};
use monoclue_core::suite::run_gradients;
use monoclue_core::tensor::{grad_check, softmax, LinearMap, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

fn verdict(n: usize, name: &str, ok: bool, detail: String) {
    let line = format!("criterion {n:>2} {name}: {} ({detail})\n", if ok { "PASS" } else { "FAIL" });
    std::io::stderr().write_all(line.as_bytes()).unwrap();
    assert!(ok, "criterion {n} failed: {detail}");
}

fn rand_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor<f64> {
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
}

fn rand_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, p: f64) -> SegmentationMask {
    let mut bits: Vec<bool> = (0..h * w).map(|_| rng.random_bool(p)).collect();
    if !bits.iter().any(|&b| b) {
        bits[rng.random_range(0..h * w)] = true;
    }
    SegmentationMask::new(h, w, bits).unwrap()
}

fn masked_points(f: &Tensor<f64>, mask: &SegmentationMask) -> Vec<Vec<f64>> {
    let (c, h, w) = (f.channels(), f.height(), f.width());
    (0..h * w)
        .filter(|&p| mask.bits()[p])
        .map(|p| (0..c).map(|ch| f.data()[ch * h * w + p]).collect())
        .collect()
}

fn sse(points: &[Vec<f64>], members: &[usize]) -> f64 {
    if members.is_empty() {
        return 0.0;
    }
    let dim = points[0].len();
    let mean: Vec<f64> = (0..dim)
        .map(|d| members.iter().map(|&i| points[i][d]).sum::<f64>() / members.len() as f64)
        .collect();
    members
        .iter()
        .map(|&i| points[i].iter().zip(&mean).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum()
}

/// Minimum within-cluster sum of squares over every labelling of the points
/// into at most `k` groups.
fn partition_minimum(points: &[Vec<f64>], k: usize) -> f64 {
    let m = points.len();
    let mut labels = vec![0usize; m];
    let mut best = f64::INFINITY;
    loop {
        let total: f64 = (0..k)
            .map(|g| sse(points, &(0..m).filter(|&i| labels[i] == g).collect::<Vec<_>>()))
            .sum();
        best = best.min(total);
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

fn subsets(n: usize, k: usize) -> Vec<Vec<usize>> {
    if k == 0 {
        return vec![vec![]];
    }
    if n < k {
        return vec![];
    }
    let mut out = subsets(n - 1, k);
    for mut s in subsets(n - 1, k - 1) {
        s.push(n - 1);
        out.push(s);
    }
    out
}

#[test]
fn c01_kmeans_matches_exhaustive_partition() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (c, k) = (rng.random_range(1..=4), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(1..=4), rng.random_range(1..=2));
        let f = rand_tensor(&mut rng, &[c, h, w]);
        let mut mask = rand_mask(&mut rng, h, w, 0.7);
        let on: Vec<usize> = (0..h * w).filter(|&p| mask.bits()[p]).collect();
        if on.len() > 8 {
            let keep = &on[..8];
            mask = SegmentationMask::new(h, w, (0..h * w).map(|p| keep.contains(&p)).collect()).unwrap();
        }
        let pts = masked_points(&f, &mask);
        let flat: Vec<f64> = pts.concat();
        let kk = k.min(pts.len());
        let best_lloyd = subsets(pts.len(), kk)
            .iter()
            .map(|s| {
                let init: Vec<f64> = s.iter().flat_map(|&i| pts[i].clone()).collect();
                lloyd(&flat, c, &init, 100, 0.0).inertia()
            })
            .fold(f64::INFINITY, f64::min);
        worst = worst.max((best_lloyd - partition_minimum(&pts, k)).abs());
    }
    let elapsed = start.elapsed();
    verdict(
        1,
        "k-means oracle equivalence",
        worst <= 1e-6 && elapsed < Duration::from_secs(5),
        format!("200 instances, max gap {worst:.2e}, {:.2} s", elapsed.as_secs_f64()),
    );
}

#[test]
fn c02_lloyd_inertia_never_increases() {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut violations = 0;
    let mut sequences = 0;
    for i in 0..1000u64 {
        let (c, h, w) = (rng.random_range(1..=8), rng.random_range(1..=10), rng.random_range(1..=10));
        let f = rand_tensor(&mut rng, &[c, h, w]);
        let p = rng.random_range(0.1..1.0);
        let mask = rand_mask(&mut rng, h, w, p);
        let k = rng.random_range(1..=10);
        let cfg = KMeansConfig { seed: i, ..KMeansConfig::default() };
        let set = kmeans_masked(&f, &mask, k, &cfg).unwrap();
        sequences += 1;
        violations += set.inertia_history.windows(2).filter(|p| p[1] > p[0] + 1e-9).count();
    }
    let elapsed = start.elapsed();
    verdict(
        2,
        "Lloyd monotonicity",
        violations == 0 && elapsed < Duration::from_secs(10),
        format!("{sequences} sequences, {violations} increases, {:.2} s", elapsed.as_secs_f64()),
    );
}

#[test]
fn c03_masked_pooling_matches_brute_force() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..500 {
        let (c, h, w) = (rng.random_range(1..=16), rng.random_range(1..=12), rng.random_range(1..=12));
        let f = rand_tensor(&mut rng, &[c, h, w]);
        let p = rng.random_range(0.05..1.0);
        let mask = rand_mask(&mut rng, h, w, p);
        let pooled = masked_average_pool(&f, &mask).unwrap();
        for ch in 0..c {
            let (mut num, mut den) = (0.0, 0.0);
            for p in 0..h * w {
                let m = if mask.bits()[p] { 1.0 } else { 0.0 };
                num += m * f.data()[ch * h * w + p];
                den += m;
            }
            worst = worst.max((pooled[ch] - num / den).abs());
        }
    }
    verdict(3, "masked pooling fidelity", worst <= 1e-6, format!("500 instances, max error {worst:.2e}"));
}

#[test]
fn c04_similarity_map_matches_double_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst = 0.0f64;
    let mut in_range = true;
    for _ in 0..100 {
        let (c, h, w, n) = (
            rng.random_range(1..=16),
            rng.random_range(1..=32),
            rng.random_range(1..=32),
            rng.random_range(1..=10),
        );
        let f = rand_tensor(&mut rng, &[c, h, w]);
        let rows = rand_tensor(&mut rng, &[n, c]);
        let mut validity: Vec<bool> = (0..n).map(|_| rng.random_bool(0.8)).collect();
        validity[0] = true;
        let clusters = ClusterSet {
            rows: rows.clone(),
            validity: validity.clone(),
            assignment: vec![0; h * w],
            extents: vec![[h, w]],
            inertia: 0.0,
            inertia_history: vec![0.0],
        };
        let sim = similarity_map(&f, &clusters, 8, 1.0).unwrap();
        for i in 0..h {
            for j in 0..w {
                let p = i * w + j;
                let fv: Vec<f64> = (0..c).map(|ch| f.data()[ch * h * w + p]).collect();
                let mut best = f64::NEG_INFINITY;
                for r in (0..n).filter(|&r| validity[r]) {
                    let rv = rows.row(r);
                    let dot: f64 = fv.iter().zip(rv).map(|(a, b)| a * b).sum();
                    let nf = fv.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let nr = rv.iter().map(|x| x * x).sum::<f64>().sqrt();
                    best = best.max(dot / (nf * nr));
                }
                worst = worst.max((sim.scores[p] - best).abs());
                in_range &= (-1.0..=1.0).contains(&sim.scores[p]);
            }
        }
    }
    verdict(
        4,
        "similarity-map oracle",
        worst <= 1e-5 && in_range,
        format!("100 instances, max error {worst:.2e}, all in [-1, 1]: {in_range}"),
    );
}

fn map_from_logits(h: usize, w: usize, logits: Vec<f64>) -> SimilarityMap<f64> {
    SimilarityMap {
        stride: 8,
        height: h,
        width: w,
        normalized: softmax(&logits).unwrap(),
        argmax: vec![0; h * w],
        scores: logits,
    }
}

#[test]
fn c05_soft_argmax_finds_planted_peak() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut misses = 0;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..=24), rng.random_range(1..=24));
        let mut logits: Vec<f64> = (0..h * w).map(|_| rng.random_range(-5.0..5.0)).collect();
        let peak = rng.random_range(0..h * w);
        let top = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        logits[peak] = top + 20.0 + rng.random_range(0.0..5.0);
        let c = soft_argmax_center(&map_from_logits(h, w, logits), &reference_lattice(h, w)).unwrap();
        let (px, py) = (((peak % w) as f64 + 0.5) / w as f64, ((peak / w) as f64 + 0.5) / h as f64);
        if (c[0] - px).abs() > 0.5 / w as f64 || (c[1] - py).abs() > 0.5 / h as f64 {
            misses += 1;
        }
    }
    let mut uniform_err = 0.0f64;
    for (h, w) in [(1, 1), (4, 7), (16, 48), (9, 9)] {
        let c = soft_argmax_center(&map_from_logits(h, w, vec![0.3; h * w]), &reference_lattice(h, w)).unwrap();
        uniform_err = uniform_err.max((c[0] - 0.5).abs()).max((c[1] - 0.5).abs());
    }
    verdict(
        5,
        "soft-argmax localization",
        misses == 0 && uniform_err <= 1e-6,
        format!("100 planted peaks, {misses} misses; uniform error {uniform_err:.2e}"),
    );
}

#[test]
fn c06_offset_variant_contracts() {
    // main: every refined point is the centre itself
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut main_exact = true;
    for _ in 0..100 {
        let (h, w) = (rng.random_range(1..=12), rng.random_range(1..=12));
        let logits: Vec<f64> = (0..h * w).map(|_| rng.random_range(-3.0..3.0)).collect();
        let sim = map_from_logits(h, w, logits);
        let grid = reference_lattice(h, w);
        let c = soft_argmax_center(&sim, &grid).unwrap();
        let rg = init_offsets(&sim, &grid, c, OffsetVariant::Main).unwrap();
        for p in 0..h * w {
            main_exact &= rg.refined.data()[p] == c[0] && rg.refined.data()[h * w + p] == c[1];
        }
    }

    // supplementary, worked by hand:
    // 1x2 grid, r = (0.25, 0.5), (0.75, 0.5), S~ = (0.7, 0.3)
    //   c = 0.7·r0 + 0.3·r1 = (0.4, 0.5)
    //   Δ = c − r·S~ = (0.225, 0.15), (0.175, 0.35)
    //   r~ = r + Δ = (0.475, 0.65), (0.925, 0.85)
    // 2x2 grid, r = (.25,.25) (.75,.25) (.25,.75) (.75,.75), S~ = (.4,.3,.2,.1)
    //   c = (0.45, 0.4)
    //   Δ = (.35,.3) (.225,.325) (.4,.25) (.375,.325)
    //   r~ = (.6,.55) (.975,.575) (.65,1.0) (1.125→1,1.075→1)
    struct Case {
        h: usize,
        w: usize,
        weights: Vec<f64>,
        center: [f64; 2],
        delta: Vec<[f64; 2]>,
        refined: Vec<[f64; 2]>,
    }
    let cases = [
        Case {
            h: 1,
            w: 2,
            weights: vec![0.7, 0.3],
            center: [0.4, 0.5],
            delta: vec![[0.225, 0.15], [0.175, 0.35]],
            refined: vec![[0.475, 0.65], [0.925, 0.85]],
        },
        Case {
            h: 2,
            w: 2,
            weights: vec![0.4, 0.3, 0.2, 0.1],
            center: [0.45, 0.4],
            delta: vec![[0.35, 0.3], [0.225, 0.325], [0.4, 0.25], [0.375, 0.325]],
            refined: vec![[0.6, 0.55], [0.975, 0.575], [0.65, 1.0], [1.0, 1.0]],
        },
    ];
    let mut worst = 0.0f64;
    for case in &cases {
        let (h, w) = (case.h, case.w);
        let logits: Vec<f64> = case.weights.iter().map(|p| p.ln()).collect();
        let sim = map_from_logits(h, w, logits);
        let grid = reference_lattice(h, w);
        let c = soft_argmax_center(&sim, &grid).unwrap();
        worst = worst.max((c[0] - case.center[0]).abs()).max((c[1] - case.center[1]).abs());
        let rg = init_offsets(&sim, &grid, c, OffsetVariant::Supplementary).unwrap();
        for p in 0..h * w {
            for axis in 0..2 {
                worst = worst
                    .max((rg.offsets.data()[axis * h * w + p] - case.delta[p][axis]).abs())
                    .max((rg.refined.data()[axis * h * w + p] - case.refined[p][axis]).abs());
            }
        }
    }
    verdict(
        6,
        "offset-variant contracts",
        main_exact && worst <= 1e-6,
        format!("main exact on 100 maps: {main_exact}; supplementary hand-oracle error {worst:.2e}"),
    );
}

#[test]
fn c07_gradient_suite() {
    // the finite-difference harness itself, on f(x) = Σ sin(x_i)·x_{i+1}
    let x = [0.3f64, -1.2, 0.8, 2.0];
    let f = |v: &[f64]| v.windows(2).map(|p| p[0].sin() * p[1]).sum::<f64>();
    let mut g = vec![0.0; 4];
    for i in 0..3 {
        g[i] += x[i].cos() * x[i + 1];
        g[i + 1] += x[i].sin();
    }
    let harness = grad_check(f, &x, &g).unwrap();
    let mut wrong = g.clone();
    wrong[2] += 0.01;
    let catches = grad_check(f, &x, &wrong).unwrap() > 1e-4;

    let mut worst = (String::new(), 0.0f64);
    let mut targets = 0;
    for seed in 0..4 {
        for t in run_gradients(seed).unwrap() {
            targets += 1;
            if t.max_relative_error >= worst.1 {
                worst = (t.target, t.max_relative_error);
            }
        }
    }
    verdict(
        7,
        "gradient suite",
        harness <= 1e-6 && catches && worst.1 <= 1e-4 && targets == 28,
        format!("{targets} checks over 4 seeds, worst {:.2e} ({}); harness self-check {harness:.1e}", worst.1, worst.0),
    );
}

fn attention(c: usize, rng: &mut ChaCha8Rng) -> CrossAttention<f64> {
    CrossAttention::new(
        LinearMap::uniform(c, c, 0.6, false, rng),
        LinearMap::uniform(c, c, 0.6, false, rng),
        LinearMap::uniform(c, c, 0.6, false, rng),
    )
    .unwrap()
}

fn permutation(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        p.swap(i, rng.random_range(0..=i));
    }
    p
}

fn permute_rows(t: &Tensor<f64>, perm: &[usize]) -> Tensor<f64> {
    let rows: Vec<&[f64]> = perm.iter().map(|&i| t.row(i)).collect();
    Tensor::from_rows(&rows).unwrap()
}

#[test]
fn c08_attention_is_set_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut memory_gap, mut query_gap, mut batch_gap) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let c = rng.random_range(2..=12);

        let n = rng.random_range(2..=20);
        let mem = SceneMemory::<f64>::from_parts(rand_tensor(&mut rng, &[3, c]), attention(c, &mut rng)).unwrap();
        let kv = rand_tensor(&mut rng, &[n, c]);
        let perm = permutation(&mut rng, n);
        let mut a = mem.clone();
        let mut b = mem.clone();
        a.update(&FlattenedClusters { origin: vec![(0, 0); n], rows: kv.clone() }).unwrap();
        b.update(&FlattenedClusters { origin: vec![(0, 0); n], rows: permute_rows(&kv, &perm) }).unwrap();
        memory_gap = memory_gap.max(a.memory().max_abs_diff(b.memory()));

        let rows = rand_tensor(&mut rng, &[n, c]);
        let compact = |rows: Tensor<f64>| CompactFeatureSet {
            rows,
            sources: vec![RowSource::Local; n],
            block_index: (0..n).collect(),
        };
        let weights = QueryWeights::<f64>::seeded(6, c, rng.random());
        let (qa, _) = init_queries(&weights.embeddings, &compact(rows.clone()), &weights.init).unwrap();
        let (qb, _) = init_queries(&weights.embeddings, &compact(permute_rows(&rows, &perm)), &weights.init).unwrap();
        query_gap = query_gap.max(qa.queries.max_abs_diff(&qb.queries));

        // the same clustered images, flattened in a different batch order
        let sets: Vec<ClusterSet<f64>> = (0..rng.random_range(2..=4))
            .map(|_| {
                let f = rand_tensor(&mut rng, &[c, 4, 5]);
                let m = rand_mask(&mut rng, 4, 5, 0.6);
                kmeans_masked(&f, &m, 3, &KMeansConfig::default()).unwrap()
            })
            .collect();
        let order = permutation(&mut rng, sets.len());
        let reordered: Vec<ClusterSet<f64>> = order.iter().map(|&i| sets[i].clone()).collect();
        let mut a = mem.clone();
        let mut b = mem.clone();
        a.update(&flatten_batch(&sets).unwrap()).unwrap();
        b.update(&flatten_batch(&reordered).unwrap()).unwrap();
        batch_gap = batch_gap.max(a.memory().max_abs_diff(b.memory()));
    }
    verdict(
        8,
        "attention set-invariance",
        memory_gap < 1e-5 && query_gap < 1e-5 && batch_gap < 1e-5,
        format!("memory {memory_gap:.1e}, queries {query_gap:.1e}, batch order {batch_gap:.1e}"),
    );
}

#[test]
fn c09_memory_ablation_direction() {
    let start = Instant::now();
    let cfg = AblationConfig::default();
    assert_eq!((cfg.prototypes, cfg.updates), (3, 500));
    let report = run_ablation(&cfg, &[0, 1, 2, 3, 4]).unwrap();
    let elapsed = start.elapsed();
    verdict(
        9,
        "memory ablation",
        report.attention_wins >= 4 && report.tight_cluster_dead_slots >= 1 && elapsed < Duration::from_secs(30),
        format!(
            "attention wins {}/5, dead slots {}, {:.2} s",
            report.attention_wins,
            report.tight_cluster_dead_slots,
            elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn c10_default_configuration_snapshot() {
    let cfg = PipelineConfig::default();
    let snapshot = json!({
        "image_height": 128, "image_width": 384, "strides": [8, 16, 32, 64], "channels": 32,
        "n_l": 10, "n_g": 3, "n_b": 3, "n_q": 50, "heads": 8, "sample_points": 4,
        "kmeans": {"max_iters": 50, "tol": 1e-9, "seed": 0},
        "cluster_fusion": "per_level", "offset_variant": "supplementary",
        "softmax_temperature": 1.0, "lambda": 1.0, "confidence_threshold": 0.2,
        "precision": "f32", "depth_bins": 80, "max_depth": 60.0, "seed": 0,
        "scene": {"n_objects": 3, "noise_sigma": 0.1},
        "external_loss": {"l_2d": 0.0, "l_3d": 0.0, "l_depth": 0.0, "l_region": [0.0, 0.0, 0.0, 0.0, 0.0]},
    });
    let actual: serde_json::Value = serde_json::from_str(&cfg.to_json()).unwrap();
    let edges = depth_bin_edges(cfg.depth_bins, cfg.max_depth);
    let ok = actual == snapshot
        && cfg.compact_rows() == 16
        && cfg.confidence_threshold == 0.2
        && edges.len() == 81
        && edges[0] == 0.0
        && edges[80] == 60.0;
    verdict(
        10,
        "configuration fidelity",
        ok,
        format!(
            "N_l={} N_b={} compact={} N_q={} heads={} points={} bins={} over [0,{}] threshold={}",
            cfg.n_l,
            cfg.n_b,
            cfg.compact_rows(),
            cfg.n_q,
            cfg.heads,
            cfg.sample_points,
            cfg.depth_bins,
            cfg.max_depth,
            cfg.confidence_threshold
        ),
    );
}

#[test]
fn c11_cli_runs_are_bit_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &Path| {
        let out = Command::new(env!("CARGO_BIN_EXE_monoclue"))
            .args(["run", "--seed", "7", "--out"])
            .arg(dir)
            .env_remove("MONOCLUE_SEED")
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&a);
    run(&b);
    let mut names: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .filter(|n| n == "report.json" || n == "memory.json" || n.ends_with(".pgm"))
        .collect();
    names.sort();
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| std::fs::read(a.join(n)).unwrap() != std::fs::read(b.join(n)).unwrap())
        .collect();
    verdict(
        11,
        "end-to-end determinism",
        differing.is_empty() && names.len() == 6,
        format!("{} files compared, differing: {differing:?}", names.len()),
    );
}

#[test]
fn c12_loss_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    let mut annihilated = true;
    for i in 0..100 {
        let terms = LossTerms {
            l_2d: rng.random_range(0.0..10.0),
            l_3d: rng.random_range(0.0..10.0),
            l_depth: rng.random_range(0.0..10.0),
            l_region: std::array::from_fn(|_| rng.random_range(0.0..5.0)),
        };
        let lambda = if i % 10 == 0 { 0.0 } else { rng.random_range(0.0..4.0) };
        let expected = terms.l_2d + terms.l_3d + lambda * terms.l_depth + lambda * terms.l_region.iter().sum::<f64>();
        let got = compose_loss(&terms, lambda).unwrap().total;
        worst = worst.max((got - expected).abs());
        if lambda == 0.0 {
            annihilated &= (got - (terms.l_2d + terms.l_3d)).abs() <= 1e-9;
        }
    }
    verdict(
        12,
        "loss composition",
        worst <= 1e-9 && annihilated,
        format!("100 combinations, max error {worst:.2e}, lambda=0 drops depth and region: {annihilated}"),
    );
}

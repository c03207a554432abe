//! Cross-attention memory against a nearest-code codebook on synthetic
//! prototype mixtures.
//!
//! Both memories see the same stream of key batches. The codebook moves the
//! nearest code toward each key. The cross-attention memory treats its rows
//! and projections as parameters, and each batch takes one Adam step on a
//! soft-min reconstruction loss of the batch against the updated memory,
//! which assigns gradient to every row. Both are scored by the mean
//! squared distance from held-out keys to their nearest memory row.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::derive_seed;
use crate::error::{Error, Result};
use crate::memory::{codebook_update, Codebook, FlattenedClusters, SceneMemory};
use crate::tensor::{dot, softmax_unchecked, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub prototypes: usize,
    pub channels: usize,
    pub n_g: usize,
    pub updates: usize,
    pub batch: usize,
    /// Per-entry standard deviation of key noise around a prototype.
    pub noise: f64,
    /// Scale of the mean shared by all prototypes.
    pub shared_mean: f64,
    /// Scale of each prototype's deviation from the shared mean.
    pub spread: f64,
    /// Soft-min temperature, annealed geometrically from `temperature_start`
    /// to `temperature_end` over the updates.
    pub temperature_start: f64,
    pub temperature_end: f64,
    pub attention_lr: f64,
    pub codebook_lr: f64,
    pub eval_keys: usize,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            prototypes: 3,
            channels: 8,
            n_g: 3,
            updates: 500,
            batch: 16,
            noise: 0.1,
            shared_mean: 1.0,
            spread: 1.0,
            temperature_start: 10.0,
            temperature_end: 0.1,
            attention_lr: 0.02,
            codebook_lr: 0.1,
            eval_keys: 300,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub attention_error: f64,
    pub codebook_error: f64,
    pub codebook_dead_slots: usize,
    pub codebook_usage: Vec<u64>,
}

impl SeedResult {
    pub fn attention_wins(&self) -> bool {
        self.attention_error < self.codebook_error
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub config: AblationConfig,
    pub seeds: Vec<SeedResult>,
    pub attention_wins: usize,
    /// Dead codebook slots after training on a single tight cluster.
    pub tight_cluster_dead_slots: usize,
}

struct Mixture {
    prototypes: Vec<Vec<f64>>,
    noise: Normal<f64>,
}

impl Mixture {
    fn new(cfg: &AblationConfig, rng: &mut ChaCha8Rng) -> Self {
        let unit = Normal::new(0.0, 1.0).expect("unit normal");
        let mean: Vec<f64> = (0..cfg.channels).map(|_| cfg.shared_mean * unit.sample(rng)).collect();
        let prototypes = (0..cfg.prototypes)
            .map(|_| mean.iter().map(|m| m + cfg.spread * unit.sample(rng)).collect())
            .collect();
        Self {
            prototypes,
            noise: Normal::new(0.0, cfg.noise.max(0.0)).expect("finite noise"),
        }
    }

    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let c = self.prototypes[0].len();
        let mut data = Vec::with_capacity(n * c);
        for _ in 0..n {
            let p = &self.prototypes[rng.random_range(0..self.prototypes.len())];
            data.extend(p.iter().map(|x| x + self.noise.sample(rng)));
        }
        Tensor::matrix(n, c, data).expect("consistent shape")
    }
}

fn keys(rows: Tensor<f64>) -> FlattenedClusters<f64> {
    let n = rows.rows();
    FlattenedClusters {
        rows,
        origin: (0..n).map(|i| (0, i)).collect(),
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Mean over `keys` of the squared distance to the nearest row of `memory`.
pub fn reconstruction_error(memory: &Tensor<f64>, keys: &Tensor<f64>) -> f64 {
    let total: f64 = keys
        .row_iter()
        .map(|k| memory.row_iter().map(|m| sq_dist(k, m)).fold(f64::INFINITY, f64::min))
        .sum();
    total / keys.rows().max(1) as f64
}

/// Soft-min reconstruction loss
/// `mean_i Σ_j p_ij d_ij` with `d_ij = ‖x_i − g_j‖²`, `p_i = softmax(−d_i / τ)`,
/// and its gradient with respect to the memory rows.
pub fn softmin_loss(memory: &Tensor<f64>, keys: &Tensor<f64>, temperature: f64) -> (f64, Tensor<f64>) {
    let (n, m) = (keys.rows(), memory.rows());
    let mut grad = Tensor::zeros(memory.dims());
    let mut loss = 0.0;
    for x in keys.row_iter() {
        let d: Vec<f64> = memory.row_iter().map(|g| sq_dist(x, g)).collect();
        let mut p: Vec<f64> = d.iter().map(|&v| -v / temperature).collect();
        softmax_unchecked(&mut p);
        let li = dot(&p, &d);
        loss += li;
        for j in 0..m {
            let dl_dd = p[j] * (1.0 - (d[j] - li) / temperature) / n as f64;
            for (gv, (&g, &xv)) in grad.row_mut(j).iter_mut().zip(memory.row(j).iter().zip(x)) {
                *gv += dl_dd * 2.0 * (g - xv);
            }
        }
    }
    (loss / n as f64, grad)
}

struct Adam {
    lr: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    const B1: f64 = 0.9;
    const B2: f64 = 0.999;
    const EPS: f64 = 1e-8;

    fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        self.t += 1;
        let c1 = 1.0 - Self::B1.powi(self.t);
        let c2 = 1.0 - Self::B2.powi(self.t);
        for i in 0..params.len() {
            self.m[i] = Self::B1 * self.m[i] + (1.0 - Self::B1) * grad[i];
            self.v[i] = Self::B2 * self.v[i] + (1.0 - Self::B2) * grad[i] * grad[i];
            params[i] -= self.lr * (self.m[i] / c1) / ((self.v[i] / c2).sqrt() + Self::EPS);
        }
    }
}

/// Trains both memories on one seed's key stream.
pub fn run_seed(cfg: &AblationConfig, seed: u64) -> Result<SeedResult> {
    if !(cfg.temperature_start > 0.0 && cfg.temperature_end > 0.0) {
        return Err(Error::Config("ablation temperatures must be > 0".into()));
    }
    if cfg.prototypes == 0 || cfg.channels == 0 || cfg.n_g == 0 || cfg.batch == 0 || cfg.eval_keys == 0 {
        return Err(Error::Config("ablation sizes must be ≥ 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "ablation.data"));
    let mixture = Mixture::new(cfg, &mut rng);

    let mut codebook = Codebook::<f64>::seeded(cfg.n_g, cfg.channels, derive_seed(seed, "ablation.codebook"));
    let mut mem = SceneMemory::<f64>::new(cfg.n_g, cfg.channels, derive_seed(seed, "ablation.memory"))?;
    let n_mem = mem.memory().len();
    let mut params: Vec<f64> = mem.memory().data().to_vec();
    params.extend(mem.attention().params());
    let mut adam = Adam::new(params.len(), cfg.attention_lr);

    let ratio = (cfg.temperature_end / cfg.temperature_start).powf(1.0 / cfg.updates.saturating_sub(1).max(1) as f64);
    let mut temperature = cfg.temperature_start;
    for _ in 0..cfg.updates {
        let batch = keys(mixture.sample(cfg.batch, &mut rng));
        codebook_update(&mut codebook, &batch, cfg.codebook_lr)?;

        let before = mem.memory().clone();
        let (out, cache) = mem.attend(&batch)?;
        let (_, d_out) = softmin_loss(&out, &batch.rows, temperature);
        temperature *= ratio;
        let g = mem.backward(&before, &batch, &cache, &d_out);
        let mut grad = g.queries.data().to_vec();
        grad.extend(g.params());
        adam.step(&mut params, &grad);
        mem.set_memory(Tensor::new(before.dims().to_vec(), params[..n_mem].to_vec())?)?;
        mem.attention_mut().set_params(&params[n_mem..]);
    }

    let context = keys(mixture.sample(cfg.batch, &mut rng));
    let held_out = mixture.sample(cfg.eval_keys, &mut rng);
    let (read, _) = mem.attend(&context)?;
    Ok(SeedResult {
        seed,
        attention_error: reconstruction_error(&read, &held_out),
        codebook_error: reconstruction_error(&codebook.codes, &held_out),
        codebook_dead_slots: codebook.dead_slots(),
        codebook_usage: codebook.usage.clone(),
    })
}

/// Codebook dead slots after `cfg.updates` batches drawn from one prototype
/// with a hundredth of the usual noise.
pub fn tight_cluster_dead_slots(cfg: &AblationConfig, seed: u64) -> Result<usize> {
    let tight = AblationConfig {
        prototypes: 1,
        noise: cfg.noise * 0.01,
        ..*cfg
    };
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "ablation.tight"));
    let mixture = Mixture::new(&tight, &mut rng);
    let mut codebook = Codebook::<f64>::seeded(cfg.n_g, cfg.channels, derive_seed(seed, "ablation.codebook"));
    for _ in 0..cfg.updates {
        codebook_update(&mut codebook, &keys(mixture.sample(cfg.batch, &mut rng)), cfg.codebook_lr)?;
    }
    Ok(codebook.dead_slots())
}

pub fn run_ablation(cfg: &AblationConfig, seeds: &[u64]) -> Result<AblationReport> {
    let results = seeds.iter().map(|&s| run_seed(cfg, s)).collect::<Result<Vec<_>>>()?;
    Ok(AblationReport {
        config: *cfg,
        attention_wins: results.iter().filter(|r| r.attention_wins()).count(),
        seeds: results,
        tight_cluster_dead_slots: tight_cluster_dead_slots(cfg, seeds.first().copied().unwrap_or(0))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;

    #[test]
    fn softmin_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mem = Tensor::matrix(3, 2, (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let keys = Tensor::matrix(4, 2, (0..8).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let (_, g) = softmin_loss(&mem, &keys, 0.7);
        let e = grad_check(
            |x| softmin_loss(&Tensor::matrix(3, 2, x.to_vec()).unwrap(), &keys, 0.7).0,
            mem.data(),
            g.data(),
        )
        .unwrap();
        assert!(e <= 1e-6, "{e}");
    }

    #[test]
    fn reconstruction_error_hand_example() {
        let mem = Tensor::from_rows(&[[0.0, 0.0], [2.0, 0.0]]).unwrap();
        let keys = Tensor::from_rows(&[[0.0, 1.0], [3.0, 0.0]]).unwrap();
        assert_eq!(reconstruction_error(&mem, &keys), 1.0);
    }
}

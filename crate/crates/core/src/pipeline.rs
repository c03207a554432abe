//! End-to-end orchestration: clustering, memory, re-localization, query
//! initialization, decoding, filtering and loss, plus artifact export.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::clustering::{
    cluster_background, kmeans_masked, kmeans_masked_levels, ClusterSet, FeaturePyramid, KMeansConfig,
    PyramidLevel, SegmentationMask,
};
use crate::config::{derive_seed, ClusterFusion, PipelineConfig, Precision};
use crate::error::{Error, Result, StageExt};
use crate::fsutil::{write_atomic, write_json};
use crate::memory::{flatten_batch, MemorySnapshot, SceneMemory};
use crate::query::{
    build_compact_set, compose_loss, confidence_filter, decode_step, init_queries, region_terms,
    similarity_to_probability, BinaryCrossEntropy, CompactFeatureSet, DepthFeatures, LossBreakdown, QueryBank,
    QueryWeights, RowSource,
};
use crate::reloc::{
    fuse_and_refine, init_offsets, reference_lattice, similarity_map, soft_argmax_center, DeformableWeights,
    LevelInput, OffsetVariant, ReferenceGrid, SimilarityMap,
};
use crate::scene::{generate_scene, SyntheticScene};
use crate::tensor::{encode_tensor, read_tensor, write_tensor, Real, Tensor};

pub const SCHEMA_VERSION: u32 = 1;

/// Validated per-level inputs.
#[derive(Clone, Debug)]
pub struct PipelineInputs<T> {
    pub pyramid: FeaturePyramid<T>,
    pub masks: Vec<SegmentationMask>,
    /// Synthesized from the seed when absent.
    pub depth: Option<Vec<Tensor<T>>>,
}

impl<T: Real> From<SyntheticScene<T>> for PipelineInputs<T> {
    fn from(s: SyntheticScene<T>) -> Self {
        Self {
            pyramid: s.pyramid,
            masks: s.masks,
            depth: None,
        }
    }
}

pub fn features_file(level: usize) -> String {
    format!("features_L{level}.mct1")
}

pub fn mask_file(level: usize) -> String {
    format!("mask_L{level}.mct1")
}

pub fn depth_file(level: usize) -> String {
    format!("depth_L{level}.mct1")
}

impl<T: Real> PipelineInputs<T> {
    /// Reads `features_L{n}.mct1`, `mask_L{n}.mct1` and, when present,
    /// `depth_L{n}.mct1` for every configured level.
    pub fn load(dir: &Path, config: &PipelineConfig) -> Result<Self> {
        let mut levels = Vec::new();
        let mut masks = Vec::new();
        let mut depth = Vec::new();
        for (n, &stride) in config.strides.iter().enumerate() {
            let features = read_tensor(dir.join(features_file(n)))?.into_real::<T>();
            levels.push(PyramidLevel { stride, features });
            let mask = read_tensor(dir.join(mask_file(n)))?.into_real::<f64>();
            masks.push(SegmentationMask::from_tensor(&mask)?);
            let dp = dir.join(depth_file(n));
            if dp.exists() {
                depth.push(read_tensor(dp)?.into_real::<T>());
            }
        }
        let depth = match depth.len() {
            0 => None,
            n if n == levels.len() => Some(depth),
            n => {
                return Err(Error::LevelMismatch {
                    expected: levels.len(),
                    actual: n,
                })
            }
        };
        Ok(Self {
            pyramid: FeaturePyramid::new(config.image_height, config.image_width, levels)?,
            masks,
            depth,
        })
    }

    /// Writes the layout read by [`PipelineInputs::load`].
    pub fn save(&self, dir: &Path) -> Result<Vec<String>> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut names = Vec::new();
        for (n, (lvl, mask)) in self.pyramid.levels().iter().zip(&self.masks).enumerate() {
            write_tensor(dir.join(features_file(n)), &lvl.features)?;
            write_tensor(dir.join(mask_file(n)), &mask.to_tensor::<T>())?;
            names.push(features_file(n));
            names.push(mask_file(n));
        }
        if let Some(depth) = &self.depth {
            for (n, d) in depth.iter().enumerate() {
                write_tensor(dir.join(depth_file(n)), d)?;
                names.push(depth_file(n));
            }
        }
        Ok(names)
    }

    fn validate(&self, config: &PipelineConfig) -> Result<()> {
        if self.pyramid.image_extents() != (config.image_height, config.image_width) {
            return Err(Error::Config(format!(
                "inputs are {:?}, config expects {}x{}",
                self.pyramid.image_extents(),
                config.image_height,
                config.image_width
            )));
        }
        let strides: Vec<usize> = self.pyramid.levels().iter().map(|l| l.stride).collect();
        if strides != config.strides {
            return Err(Error::Config(format!(
                "input strides {strides:?} differ from configured {:?}",
                config.strides
            )));
        }
        if self.pyramid.channels() != config.channels {
            return Err(Error::ChannelMismatch {
                expected: config.channels,
                actual: self.pyramid.channels(),
            });
        }
        if self.masks.len() != strides.len() {
            return Err(Error::LevelMismatch {
                expected: strides.len(),
                actual: self.masks.len(),
            });
        }
        for (lvl, m) in self.pyramid.levels().iter().zip(&self.masks) {
            if [m.height(), m.width()] != [lvl.features.height(), lvl.features.width()] {
                return Err(Error::ShapeMismatch {
                    expected: lvl.features.dims()[1..].to_vec(),
                    actual: vec![m.height(), m.width()],
                });
            }
        }
        if let Some(d) = &self.depth {
            if d.len() != strides.len() {
                return Err(Error::LevelMismatch {
                    expected: strides.len(),
                    actual: d.len(),
                });
            }
            for (dl, lvl) in d.iter().zip(self.pyramid.levels()) {
                if dl.dims() != lvl.features.dims() {
                    return Err(Error::ShapeMismatch {
                        expected: lvl.features.dims().to_vec(),
                        actual: dl.dims().to_vec(),
                    });
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelReport {
    pub level: usize,
    pub stride: usize,
    pub height: usize,
    pub width: usize,
    pub mask_pixels: usize,
    pub local_valid: usize,
    pub local_inertia: f64,
    pub background_valid: usize,
    pub background_inertia: f64,
    pub similarity_min: f64,
    pub similarity_max: f64,
    /// `[row, col]` of the first maximum of `S`.
    pub similarity_peak: [usize; 2],
    pub center: [f64; 2],
    pub refined_mean_abs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub n_g: usize,
    pub keys: usize,
    pub update_count: u64,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompactReport {
    pub rows: usize,
    pub local: usize,
    pub memory: usize,
    pub background: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryReport {
    pub n_q: usize,
    pub threshold: f64,
    pub retained: Vec<usize>,
    pub mean_confidence: f64,
}

/// Everything a run produces except wall-clock, which lives in
/// [`StageTiming`] so the report itself is reproducible bit for bit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub seed: u64,
    pub precision: Precision,
    pub offset_variant: OffsetVariant,
    pub cluster_fusion: ClusterFusion,
    pub config: PipelineConfig,
    pub levels: Vec<LevelReport>,
    pub memory: MemoryReport,
    pub compact: CompactReport,
    pub queries: QueryReport,
    pub loss: LossBreakdown,
    pub artifacts: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingReport {
    pub schema_version: u32,
    pub stages: Vec<StageTiming>,
    pub total_seconds: f64,
}

#[derive(Clone, Debug)]
pub struct PipelineOutput<T> {
    pub report: RunReport,
    pub timings: Vec<StageTiming>,
    pub local: Vec<ClusterSet<T>>,
    pub background: Vec<ClusterSet<T>>,
    pub similarity: Vec<SimilarityMap<T>>,
    pub grids: Vec<ReferenceGrid<T>>,
    pub refined: Vec<Tensor<T>>,
    pub memory: SceneMemory<T>,
    pub compact: CompactFeatureSet<T>,
    pub bank: QueryBank<T>,
}

struct Clock(Vec<StageTiming>);

impl Clock {
    fn time<R>(&mut self, stage: &str, f: impl FnOnce() -> Result<R>) -> Result<R> {
        let t = Instant::now();
        let r = f().stage(stage)?;
        self.0.push(StageTiming {
            stage: stage.to_string(),
            seconds: t.elapsed().as_secs_f64(),
        });
        Ok(r)
    }
}

/// Splits a set clustered over several grids into one view per grid that
/// shares the rows and carries that grid's slice of the assignment.
fn split_by_grid<T: Real>(set: &ClusterSet<T>) -> Vec<ClusterSet<T>> {
    let mut at = 0;
    set.extents
        .iter()
        .map(|&[h, w]| {
            let view = ClusterSet {
                assignment: set.assignment[at..at + h * w].to_vec(),
                extents: vec![[h, w]],
                ..set.clone()
            };
            at += h * w;
            view
        })
        .collect()
}

fn artifact_names(levels: usize) -> Vec<String> {
    let mut v = vec![
        "report.json".to_string(),
        "timings.json".into(),
        "memory.json".into(),
        "queries.json".into(),
        "queries.mct1".into(),
        "loss.json".into(),
    ];
    for n in 0..levels {
        v.push(format!("sim_L{n}.pgm"));
        v.push(format!("clusters_L{n}.json"));
        v.push(format!("background_L{n}.json"));
        v.push(format!("refgrid_L{n}.mct1"));
        v.push(format!("offsets_L{n}.mct1"));
    }
    v
}

pub fn run_pipeline<T: Real>(config: &PipelineConfig, inputs: &PipelineInputs<T>) -> Result<PipelineOutput<T>> {
    config.validate().stage("config")?;
    inputs.validate(config).stage("inputs")?;
    let seed = config.seed;
    let kcfg = KMeansConfig {
        seed: derive_seed(seed, "kmeans") ^ config.kmeans.seed,
        ..config.kmeans
    };
    let levels = inputs.pyramid.levels();
    let nl = levels.len();
    let mut clock = Clock(Vec::new());

    let local: Vec<ClusterSet<T>> = clock.time("kmeans_masked", || match config.cluster_fusion {
        ClusterFusion::PerLevel => levels
            .iter()
            .zip(&inputs.masks)
            .map(|(l, m)| kmeans_masked(&l.features, m, config.n_l, &kcfg))
            .collect(),
        ClusterFusion::Concatenate => {
            let grids: Vec<_> = levels.iter().zip(&inputs.masks).map(|(l, m)| (&l.features, m)).collect();
            Ok(split_by_grid(&kmeans_masked_levels(&grids, config.n_l, &kcfg)?))
        }
    })?;
    let bcfg = KMeansConfig {
        seed: derive_seed(seed, "background") ^ config.kmeans.seed,
        ..config.kmeans
    };
    let background: Vec<ClusterSet<T>> = clock.time("cluster_background", || {
        levels
            .iter()
            .zip(&inputs.masks)
            .map(|(l, m)| cluster_background(&l.features, m, config.n_b, &bcfg))
            .collect()
    })?;

    let (memory, keys) = clock.time("memory_update", || {
        let keys = flatten_batch(std::slice::from_ref(&local[0]))?;
        let mut mem = SceneMemory::new(config.n_g, config.channels, derive_seed(seed, "memory"))?;
        mem.update(&keys)?;
        mem.freeze();
        Ok((mem, keys.len()))
    })?;

    let temperature = T::lit(config.softmax_temperature);
    let similarity: Vec<SimilarityMap<T>> = clock.time("similarity_map", || {
        levels
            .iter()
            .zip(&local)
            .map(|(l, cs)| similarity_map(&l.features, cs, l.stride, temperature))
            .collect()
    })?;
    let lattices: Vec<Tensor<T>> = similarity.iter().map(|s| reference_lattice(s.height, s.width)).collect();
    let centers: Vec<[T; 2]> = clock.time("soft_argmax_center", || {
        similarity
            .iter()
            .zip(&lattices)
            .map(|(s, g)| soft_argmax_center(s, g))
            .collect()
    })?;
    let grids: Vec<ReferenceGrid<T>> = clock.time("init_offsets", || {
        similarity
            .iter()
            .zip(&lattices)
            .zip(&centers)
            .map(|((s, g), &c)| init_offsets(s, g, c, config.offset_variant))
            .collect()
    })?;

    let deform = config.deformable();
    let refined: Vec<Tensor<T>> = clock.time("fuse_and_refine", || {
        let weights = DeformableWeights::seeded(config.channels, nl, deform, derive_seed(seed, "deformable"));
        let inputs: Vec<LevelInput<'_, T>> = levels
            .iter()
            .zip(&similarity)
            .zip(&grids)
            .map(|((l, s), g)| LevelInput {
                features: &l.features,
                similarity: &s.scores,
                refined: &g.refined,
            })
            .collect();
        fuse_and_refine(&inputs, deform, &weights)
    })?;

    let compact = clock.time("build_compact_set", || {
        build_compact_set(&local[0], memory.memory(), &background[0])
    })?;
    let qweights = QueryWeights::<T>::seeded(config.n_q, config.channels, derive_seed(seed, "queries"));
    let init_bank = clock.time("init_queries", || {
        Ok(init_queries(&qweights.embeddings, &compact, &qweights.init)?.0)
    })?;
    let depth = match &inputs.depth {
        Some(d) => DepthFeatures {
            levels: d.clone(),
            bin_edges: crate::query::depth_bin_edges(config.depth_bins, config.max_depth),
        },
        None => DepthFeatures::synthetic(
            &config.level_extents(),
            config.channels,
            config.depth_bins,
            config.max_depth,
            derive_seed(seed, "depth"),
        ),
    };
    let bank = clock.time("decode_step", || Ok(decode_step(&init_bank, &refined, &depth, &qweights)?.0))?;
    let threshold = config.confidence_threshold;
    let retained = clock.time("confidence_filter", || Ok(confidence_filter(&bank.confidences, T::lit(threshold))))?;
    let loss = clock.time("compose_loss", || {
        let preds: Vec<(Vec<f64>, &SegmentationMask)> = similarity
            .iter()
            .zip(&inputs.masks)
            .map(|(s, m)| (similarity_to_probability(&s.scores), m))
            .collect();
        let mut terms = config.external_loss;
        terms.l_region = region_terms(&BinaryCrossEntropy::default(), &preds)?;
        compose_loss(&terms, config.lambda)
    })?;

    let level_reports = levels
        .iter()
        .enumerate()
        .map(|(n, l)| {
            let s = &similarity[n];
            let peak = s.peak();
            let scores = s.scores.iter().map(|x| x.as_f64());
            let r = &refined[n];
            LevelReport {
                level: n,
                stride: l.stride,
                height: s.height,
                width: s.width,
                mask_pixels: inputs.masks[n].count(),
                local_valid: local[n].valid_count(),
                local_inertia: local[n].inertia,
                background_valid: background[n].valid_count(),
                background_inertia: background[n].inertia,
                similarity_min: scores.clone().fold(f64::INFINITY, f64::min),
                similarity_max: scores.fold(f64::NEG_INFINITY, f64::max),
                similarity_peak: [peak / s.width, peak % s.width],
                center: [centers[n][0].as_f64(), centers[n][1].as_f64()],
                refined_mean_abs: r.data().iter().map(|x| x.as_f64().abs()).sum::<f64>() / r.len() as f64,
            }
        })
        .collect();
    let n_conf = bank.confidences.len().max(1) as f64;
    let report = RunReport {
        schema_version: SCHEMA_VERSION,
        seed,
        precision: config.precision,
        offset_variant: config.offset_variant,
        cluster_fusion: config.cluster_fusion,
        config: config.clone(),
        levels: level_reports,
        memory: MemoryReport {
            n_g: memory.n_g(),
            keys,
            update_count: memory.update_count(),
            frozen: memory.is_frozen(),
        },
        compact: CompactReport {
            rows: compact.len(),
            local: compact.count(RowSource::Local),
            memory: compact.count(RowSource::Memory),
            background: compact.count(RowSource::Background),
        },
        queries: QueryReport {
            n_q: bank.n_q(),
            threshold,
            retained,
            mean_confidence: bank.confidences.iter().map(|c| c.as_f64()).sum::<f64>() / n_conf,
        },
        loss,
        artifacts: artifact_names(nl),
    };
    Ok(PipelineOutput {
        report,
        timings: clock.0,
        local,
        background,
        similarity,
        grids,
        refined,
        memory,
        compact,
        bank,
    })
}

impl<T: Real> PipelineOutput<T> {
    pub fn memory_snapshot(&self) -> MemorySnapshot {
        self.memory.snapshot()
    }

    /// Serializes every artifact in memory first, then writes each file
    /// atomically under `out`.
    pub fn write(&self, out: &Path) -> Result<Vec<PathBuf>> {
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        files.push(("report.json".into(), json(&self.report)?));
        let total = self.timings.iter().map(|t| t.seconds).sum();
        files.push((
            "timings.json".into(),
            json(&TimingReport {
                schema_version: SCHEMA_VERSION,
                stages: self.timings.clone(),
                total_seconds: total,
            })?,
        ));
        files.push(("memory.json".into(), json(&self.memory.snapshot())?));
        let threshold = self.report.queries.threshold;
        files.push(("queries.json".into(), json(&self.bank.to_json(threshold))?));
        files.push(("queries.mct1".into(), encode_tensor(&self.bank.queries)?));
        files.push(("loss.json".into(), json(&self.report.loss)?));
        for n in 0..self.similarity.len() {
            files.push((format!("sim_L{n}.pgm"), self.similarity[n].to_pgm()));
            files.push((format!("clusters_L{n}.json"), json(&self.local[n].to_json(n))?));
            files.push((format!("background_L{n}.json"), json(&self.background[n].to_json(n))?));
            files.push((format!("refgrid_L{n}.mct1"), encode_tensor(&self.grids[n].refined)?));
            files.push((format!("offsets_L{n}.mct1"), encode_tensor(&self.grids[n].offsets)?));
        }
        std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let mut paths = Vec::with_capacity(files.len());
        for (name, bytes) in files {
            let p = out.join(name);
            write_atomic(&p, &bytes)?;
            paths.push(p);
        }
        Ok(paths)
    }
}

fn json<S: Serialize>(v: &S) -> Result<Vec<u8>> {
    let mut b = serde_json::to_vec_pretty(v)?;
    b.push(b'\n');
    Ok(b)
}

/// The scene described by `config.scene`, drawn from the `scene` sub-seed.
pub fn synthetic_scene<T: Real>(config: &PipelineConfig) -> Result<SyntheticScene<T>> {
    generate_scene(config, &config.scene, derive_seed(config.seed, "scene"))
}

/// Inputs from `dir`, or the configured synthetic scene when `dir` is `None`.
pub fn load_inputs<T: Real>(config: &PipelineConfig, dir: Option<&Path>) -> Result<PipelineInputs<T>> {
    match dir {
        Some(dir) => PipelineInputs::load(dir, config).stage("inputs"),
        None => Ok(synthetic_scene(config).stage("scene")?.into()),
    }
}

/// Runs at the configured precision on `input` (or the configured synthetic
/// scene) and writes every artifact under `out`.
pub fn run_to_dir(config: &PipelineConfig, input: Option<&Path>, out: &Path) -> Result<RunReport> {
    fn go<T: Real>(config: &PipelineConfig, input: Option<&Path>, out: &Path) -> Result<RunReport> {
        let output = run_pipeline(config, &load_inputs::<T>(config, input)?)?;
        output.write(out).stage("write")?;
        Ok(output.report)
    }
    match config.precision {
        Precision::F32 => go::<f32>(config, input, out),
        Precision::F64 => go::<f64>(config, input, out),
    }
}

/// Writes the default configuration as JSON.
pub fn write_config(path: &Path, config: &PipelineConfig) -> Result<()> {
    write_json(path, config)
}

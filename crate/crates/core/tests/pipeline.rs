use std::path::Path;

use monoclue_core::config::{PipelineConfig, Precision, SceneSpec};
use monoclue_core::pipeline::{run_pipeline, run_to_dir, synthetic_scene, PipelineInputs, RunReport};
use monoclue_core::query::RowSource;
use monoclue_core::tensor::Tensor;
use monoclue_core::Error;

fn small() -> PipelineConfig {
    PipelineConfig {
        image_height: 64,
        image_width: 128,
        strides: vec![8, 16, 32],
        channels: 16,
        n_q: 12,
        heads: 4,
        sample_points: 2,
        ..PipelineConfig::default()
    }
}

fn brute_force_s(features: &Tensor<f64>, rows: &[Vec<f64>]) -> Vec<f64> {
    let (c, h, w) = (features.channels(), features.height(), features.width());
    let mut s = vec![f64::NEG_INFINITY; h * w];
    for i in 0..h {
        for j in 0..w {
            let f: Vec<f64> = (0..c).map(|ch| features.data()[ch * h * w + i * w + j]).collect();
            let nf = f.iter().map(|x| x * x).sum::<f64>().sqrt();
            for r in rows {
                let nr = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                let d: f64 = f.iter().zip(r).map(|(a, b)| a * b).sum();
                s[i * w + j] = s[i * w + j].max(d / (nf * nr).max(1e-12));
            }
        }
    }
    s
}

#[test]
fn similarity_peaks_inside_single_planted_object() {
    for seed in 0..8 {
        let cfg = PipelineConfig {
            seed,
            n_l: 3,
            scene: SceneSpec {
                n_objects: 1,
                noise_sigma: 0.05,
            },
            ..small()
        };
        let scene = synthetic_scene::<f64>(&cfg).unwrap();
        let obj = scene.objects[0].clone();
        let inputs: PipelineInputs<f64> = scene.into();
        let out = run_pipeline(&cfg, &inputs).unwrap();
        for (n, lvl) in inputs.pyramid.levels().iter().enumerate() {
            let rows: Vec<Vec<f64>> = out.local[n].valid_rows().map(|(_, r)| r.to_vec()).collect();
            let oracle = brute_force_s(&lvl.features, &rows);
            let sim = &out.similarity[n];
            for (a, b) in sim.scores.iter().zip(&oracle) {
                assert!((a - b).abs() <= 1e-5, "seed {seed} level {n}: {a} vs {b}");
            }
            let best = oracle.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w = sim.width;
            for (p, &s) in oracle.iter().enumerate() {
                if s == best {
                    assert!(obj.covers(p / w, p % w, lvl.stride), "seed {seed} level {n}: max at {p} outside object");
                }
            }
            let [pi, pj] = out.report.levels[n].similarity_peak;
            assert!(obj.covers(pi, pj, lvl.stride));
        }
    }
}

#[test]
fn default_config_builds_sixteen_rows_for_fifty_queries() {
    let cfg = PipelineConfig::default();
    let out = run_pipeline(&cfg, &synthetic_scene::<f32>(&cfg).unwrap().into()).unwrap();
    assert_eq!(out.compact.len(), 16);
    assert_eq!(out.compact.count(RowSource::Local), 10);
    assert_eq!(out.compact.count(RowSource::Memory), 3);
    assert_eq!(out.compact.count(RowSource::Background), 3);
    assert_eq!(out.bank.queries.dims(), &[50, 32]);
    assert_eq!(out.bank.init_attention.dims(), &[50, 16]);
    assert_eq!(out.report.compact.rows, 16);
    assert_eq!(out.report.queries.n_q, 50);
}

#[test]
fn precisions_agree_closely() {
    let cfg = small();
    let a = run_pipeline(&cfg, &synthetic_scene::<f64>(&cfg).unwrap().into()).unwrap();
    let b = run_pipeline(&cfg, &synthetic_scene::<f32>(&cfg).unwrap().into()).unwrap();
    for (x, y) in a.report.levels.iter().zip(&b.report.levels) {
        assert_eq!(x.mask_pixels, y.mask_pixels);
        assert!((x.similarity_max - y.similarity_max).abs() < 1e-3);
    }
}

fn listing(dir: &Path) -> Vec<String> {
    let mut v: Vec<String> = std::fs::read_dir(dir)
        .map(|rd| rd.map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect())
        .unwrap_or_default();
    v.sort();
    v
}

#[test]
fn failing_stage_is_labelled_and_writes_nothing() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small();
    let input = tmp.path().join("in");
    let mut inputs: PipelineInputs<f32> = synthetic_scene(&cfg).unwrap().into();
    inputs.masks.pop();
    inputs.save(&input).unwrap();

    let out = tmp.path().join("out");
    let err = run_to_dir(&cfg, Some(&input), &out).unwrap_err();
    assert_eq!(err.stage_label(), Some("inputs"), "{err}");
    assert!(listing(&out).is_empty());

    // channel mismatch between config and files surfaces at validation
    let wider = PipelineConfig { channels: 8, ..cfg.clone() };
    let full: PipelineInputs<f32> = synthetic_scene(&cfg).unwrap().into();
    full.save(&input).unwrap();
    let err = run_to_dir(&wider, Some(&input), &out).unwrap_err();
    assert_eq!(err.stage_label(), Some("inputs"), "{err}");
    assert!(listing(&out).is_empty());
}

#[test]
fn empty_mask_level_fails_in_clustering_stage() {
    let cfg = small();
    let mut inputs: PipelineInputs<f64> = synthetic_scene(&cfg).unwrap().into();
    for m in &mut inputs.masks {
        *m = monoclue_core::clustering::SegmentationMask::filled(m.height(), m.width(), false);
    }
    let err = run_pipeline(&cfg, &inputs).unwrap_err();
    assert_eq!(err.stage_label(), Some("kmeans_masked"), "{err}");
    match err {
        Error::Stage { source, .. } => assert!(matches!(*source, Error::EmptyMask), "{source}"),
        other => panic!("unlabelled error {other}"),
    }
}

#[test]
fn written_artifacts_leave_no_temp_files_and_reload() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        precision: Precision::F64,
        ..small()
    };
    let report = run_to_dir(&cfg, None, tmp.path()).unwrap();
    let names = listing(tmp.path());
    assert!(names.iter().all(|n| !n.contains(".tmp")), "{names:?}");
    for a in &report.artifacts {
        assert!(names.contains(a), "missing {a}");
    }
    for required in ["report.json", "memory.json", "queries.json", "sim_L0.pgm", "clusters_L0.json"] {
        assert!(names.iter().any(|n| n == required));
    }
    let text = std::fs::read_to_string(tmp.path().join("report.json")).unwrap();
    let back: RunReport = serde_json::from_str(&text).unwrap();
    assert_eq!(back, report);
}

#[test]
fn saved_inputs_reproduce_synthetic_run() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small();
    let inputs: PipelineInputs<f32> = synthetic_scene(&cfg).unwrap().into();
    inputs.save(tmp.path()).unwrap();
    let a = run_to_dir(&cfg, None, &tmp.path().join("a")).unwrap();
    let b = run_to_dir(&cfg, Some(tmp.path()), &tmp.path().join("b")).unwrap();
    assert_eq!(a, b);
}

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use monoclue_core::config::{ClusterFusion, PipelineConfig, Precision};
use monoclue_core::fsutil::write_json;
use monoclue_core::pipeline::{run_to_dir, synthetic_scene, PipelineInputs};
use monoclue_core::reloc::OffsetVariant;
use monoclue_core::scene::PlantedObject;
use monoclue_core::suite::{run_suites, SuiteKind};
use monoclue_core::tensor::{read_header, Real};
use monoclue_core::Result;

#[derive(Parser)]
#[command(name = "monoclue", version, about = "Cluster-primed monocular 3D detection mechanisms on synthetic or loaded feature pyramids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a scene and write MCT1 feature and mask files.
    Generate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the full pipeline and write report, maps and snapshots.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Directory written by `generate` (or laid out the same way).
        /// Without it the configured synthetic scene is used.
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run oracle, gradient and ablation suites; exits nonzero on any failure.
    Suite {
        /// Comma-separated subset of oracles,gradients,ablation.
        #[arg(long, value_delimiter = ',', default_value = "oracles,gradients,ablation")]
        suites: Vec<SuiteKind>,
        /// Number of oracle seeds, starting at 0.
        #[arg(long, default_value_t = 100)]
        oracle_seeds: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print MCT1 headers.
    Inspect {
        #[arg(required = true)]
        files: Vec<PathBuf>,
    },
}

/// `--config` file, then `MONOCLUE_SEED`, then the flags below.
#[derive(Args)]
struct ConfigArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    precision: Option<Precision>,
    #[arg(long)]
    channels: Option<usize>,
    #[arg(long)]
    n_l: Option<usize>,
    #[arg(long)]
    n_g: Option<usize>,
    #[arg(long)]
    n_b: Option<usize>,
    #[arg(long)]
    n_q: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    sample_points: Option<usize>,
    #[arg(long)]
    offset_variant: Option<OffsetVariant>,
    #[arg(long)]
    cluster_fusion: Option<ClusterFusion>,
    #[arg(long)]
    temperature: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    n_objects: Option<usize>,
    #[arg(long)]
    noise_sigma: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut c = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        c.apply_env()?;
        macro_rules! set {
            ($($flag:ident => $($field:ident).+),* $(,)?) => {
                $(if let Some(v) = self.$flag { c.$($field).+ = v; })*
            };
        }
        set!(
            seed => seed,
            precision => precision,
            channels => channels,
            n_l => n_l,
            n_g => n_g,
            n_b => n_b,
            n_q => n_q,
            heads => heads,
            sample_points => sample_points,
            offset_variant => offset_variant,
            cluster_fusion => cluster_fusion,
            temperature => softmax_temperature,
            lambda => lambda,
            threshold => confidence_threshold,
            n_objects => scene.n_objects,
            noise_sigma => scene.noise_sigma,
        );
        c.validate()?;
        Ok(c)
    }
}

#[derive(Serialize)]
struct SceneFile<'a> {
    seed: u64,
    objects: &'a [PlantedObject],
}

fn generate(config: &PipelineConfig, out: &Path) -> Result<Vec<String>> {
    fn go<T: Real>(config: &PipelineConfig, out: &Path) -> Result<Vec<String>> {
        let scene = synthetic_scene::<T>(config)?;
        let meta = SceneFile {
            seed: scene.seed,
            objects: &scene.objects,
        };
        let mut names = PipelineInputs::from(scene.clone()).save(out)?;
        write_json(&out.join("scene.json"), &meta)?;
        write_json(&out.join("config.json"), config)?;
        names.extend(["scene.json".into(), "config.json".into()]);
        Ok(names)
    }
    match config.precision {
        Precision::F32 => go::<f32>(config, out),
        Precision::F64 => go::<f64>(config, out),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cmd: Command) -> Result<bool> {
    match cmd {
        Command::Generate { cfg, out } => {
            let config = cfg.resolve()?;
            for name in generate(&config, &out)? {
                println!("{}", out.join(name).display());
            }
            Ok(true)
        }
        Command::Run { cfg, input, out } => {
            let config = cfg.resolve()?;
            let report = run_to_dir(&config, input.as_deref(), &out)?;
            for lvl in &report.levels {
                println!(
                    "L{} stride {:>2}  {}x{}  clusters {}  S max {:.4} at {:?}",
                    lvl.level, lvl.stride, lvl.height, lvl.width, lvl.local_valid, lvl.similarity_max, lvl.similarity_peak
                );
            }
            println!(
                "queries {} retained {}  loss {:.6}",
                report.queries.n_q,
                report.queries.retained.len(),
                report.loss.total
            );
            println!("{}", out.join("report.json").display());
            Ok(true)
        }
        Command::Suite {
            suites,
            oracle_seeds,
            out,
        } => {
            let report = run_suites(&suites, 0..oracle_seeds)?;
            std::fs::create_dir_all(&out).map_err(|e| monoclue_core::Error::Io {
                path: out.clone(),
                source: e,
            })?;
            write_json(&out.join("suite.json"), &report)?;
            if let Some(o) = &report.oracles {
                println!("oracles    {}/{}", o.passed, o.total);
            }
            if let Some(g) = &report.gradients {
                for t in g {
                    let mark = if t.passed { "ok" } else { "FAIL" };
                    println!("gradient   {:<22} {:.3e} {mark}", t.target, t.max_relative_error);
                }
            }
            if let Some(a) = &report.ablation {
                println!(
                    "ablation   attention wins {}/{}  dead slots {}  {}",
                    a.report.attention_wins,
                    a.report.seeds.len(),
                    a.report.tight_cluster_dead_slots,
                    if a.passed { "ok" } else { "FAIL" }
                );
            }
            println!("{}", if report.passed { "PASS" } else { "FAIL" });
            Ok(report.passed)
        }
        Command::Inspect { files } => {
            for f in files {
                let h = read_header(&f)?;
                println!(
                    "{}: dtype {:?}, rank {}, dims {:?}, {} elements",
                    f.display(),
                    h.dtype,
                    h.dims.len(),
                    h.dims,
                    h.element_count()
                );
            }
            Ok(true)
        }
    }
}

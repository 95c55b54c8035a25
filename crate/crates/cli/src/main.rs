use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sparsedet3d::pipeline::io::{load_scene_dir, read_detections, write_detections, write_scene, CloudFormat};
use sparsedet3d::pipeline::{
    eval_map, run_toy_train, synth_scenes, Checkpoint, Precision, RunConfig, SceneRecord, StepReport, SynthSpec,
};
use sparsedet3d::Real;
use sparsedet3d_oracles::{criteria, run_bench, run_oracles, suites, to_tsv, BenchConfig, Outcome};

const THREADS_VAR: &str = "SPARSEDET3D_THREADS";

#[derive(Parser)]
#[command(name = "sparsedet3d", version, about = "Sparse 3D detection toolkit")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (`key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Scene directory.
    #[arg(long, global = true)]
    scenes: Option<PathBuf>,
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    precision: Option<PrecisionArg>,
}

#[derive(Clone, Copy, ValueEnum)]
enum PrecisionArg {
    F32,
    F64,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Text,
    Binary,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic scenes and their ground truth to --out.
    Synth {
        #[arg(long, default_value_t = 10)]
        count: usize,
        #[arg(long, value_enum, default_value_t = FormatArg::Binary)]
        format: FormatArg,
    },
    /// Train on --scenes and save the result to --checkpoint.
    Train {
        /// Overrides the configured step count.
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Detect objects in --scenes with --checkpoint; writes JSON lines to --out.
    Infer,
    /// Score detections against the ground truth in --scenes.
    Eval {
        #[arg(long)]
        detections: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0.25,0.5")]
        iou: Vec<f64>,
    },
    /// Run every oracle suite and acceptance criterion.
    Oracles {
        /// Skip the end-to-end training criterion.
        #[arg(long)]
        skip_training: bool,
    },
    /// Sparse convolution throughput; TSV to --out or stdout.
    Bench {
        #[arg(long, default_value_t = 16)]
        grid: usize,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Analytic gradients against finite differences.
    Gradcheck,
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var(THREADS_VAR) {
        let n: usize = v.trim().parse().with_context(|| format!("{THREADS_VAR}={v} is not a count"))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut c = match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading config {}", p.display()))?,
        None => RunConfig::default(),
    };
    if let Some(s) = common.seed {
        c.seed = s;
    }
    if let Some(p) = common.precision {
        c.precision = match p {
            PrecisionArg::F32 => Precision::F32,
            PrecisionArg::F64 => Precision::F64,
        };
    }
    c.validate()?;
    Ok(c)
}

fn need<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    p.as_deref().with_context(|| format!("--{flag} is required"))
}

fn scenes(common: &Common) -> Result<Vec<SceneRecord>> {
    let dir = need(&common.scenes, "scenes")?;
    let s = load_scene_dir(dir).with_context(|| format!("loading scenes from {}", dir.display()))?;
    if s.is_empty() {
        bail!("no scenes found in {}", dir.display());
    }
    Ok(s)
}

fn output(common: &Common) -> Result<Box<dyn Write>> {
    Ok(match &common.out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(BufWriter::new(std::io::stdout())),
    })
}

fn log_step(r: &StepReport) {
    let t = &r.loss.terms;
    eprintln!(
        "step {:4} epoch {:3} tau {:.2} total {:.4} sem {:.4} vote {:.4} cntr {:.4} box {:.4} cls {:.4} rebox {:.4} |g| {:.3}",
        r.step, r.epoch, r.tau, r.loss.total, t.sem, t.vote, t.cntr, t.bbox, t.cls, t.rebox, r.grad_norm
    );
}

fn train<T: Real>(data: &[SceneRecord], config: &RunConfig) -> Result<Checkpoint> {
    let (det, _) = run_toy_train::<T>(data, config, log_step)?;
    Ok(det.checkpoint())
}

fn report(outcomes: &[Outcome]) -> ExitCode {
    for o in outcomes {
        println!("{}", o.line());
    }
    let failed = outcomes.iter().filter(|o| !o.passed).count();
    println!("{} passed, {failed} failed", outcomes.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let common = &cli.common;
    match cli.command {
        Command::Synth { count, format } => {
            let dir = need(&common.out, "out")?;
            let seed = common.seed.unwrap_or(0);
            let fmt = match format {
                FormatArg::Text => CloudFormat::Text,
                FormatArg::Binary => CloudFormat::Binary,
            };
            for s in synth_scenes(count, seed, &SynthSpec::default())? {
                write_scene(dir, &s, fmt)?;
            }
            eprintln!("wrote {count} scenes to {}", dir.display());
        }
        Command::Train { steps } => {
            let mut config = load_config(common)?;
            if let Some(n) = steps {
                config.steps = n;
            }
            let path = need(&common.checkpoint, "checkpoint")?;
            let data = scenes(common)?;
            let t0 = Instant::now();
            let ck = match config.precision {
                Precision::F32 => train::<f32>(&data, &config)?,
                Precision::F64 => train::<f64>(&data, &config)?,
            };
            ck.save(path)?;
            eprintln!("trained {} steps in {:.1}s; saved {}", config.steps, t0.elapsed().as_secs_f64(), path.display());
        }
        Command::Infer => {
            let ck = Checkpoint::load(need(&common.checkpoint, "checkpoint")?)?;
            let mut config = ck.config.clone();
            if let Some(p) = common.precision {
                config.precision = match p {
                    PrecisionArg::F32 => Precision::F32,
                    PrecisionArg::F64 => Precision::F64,
                };
            }
            let data = scenes(common)?;
            let ck = Checkpoint { config, ..ck };
            let mut dets = Vec::new();
            for s in &data {
                let d = sparsedet3d::pipeline::run_inference(s, &ck)?;
                eprintln!("{}: {} detections", s.scene_id, d.len());
                dets.extend(d);
            }
            let mut w = output(common)?;
            write_detections(&dets, &mut w)?;
            w.flush()?;
        }
        Command::Eval { detections, iou } => {
            let config = load_config(common)?;
            let data = scenes(common)?;
            let dets = read_detections(BufReader::new(File::open(&detections)?))?;
            let gts: Vec<_> = data.iter().map(|s| (s.scene_id.clone(), s.gt.clone())).collect();
            let mut w = output(common)?;
            for thr in iou {
                let r = eval_map(&dets, &gts, config.n_class, thr)?;
                writeln!(w, "iou {thr}: mAP {:.4} recall {:.4}", r.map, r.recall)?;
                for c in &r.classes {
                    let ap = c.ap.map_or("-".into(), |v| format!("{v:.4}"));
                    writeln!(w, "  class {}: {} gt, {} predictions, AP {ap}", c.class_id, c.n_gt, c.n_pred)?;
                }
            }
            w.flush()?;
        }
        Command::Oracles { skip_training } => return Ok(report(&run_oracles(!skip_training))),
        Command::Bench { grid, reps } => {
            let cfg = BenchConfig { grid, reps, seed: common.seed.unwrap_or(0), ..BenchConfig::default() };
            let rows = run_bench(&cfg)?;
            let mut w = output(common)?;
            w.write_all(to_tsv(&rows).as_bytes())?;
            w.flush()?;
        }
        Command::Gradcheck => {
            return Ok(report(&[criteria::criterion_2(), suites::compositional_losses()]));
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = init_threads() {
        eprintln!("error: {e:#}");
        return ExitCode::FAILURE;
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

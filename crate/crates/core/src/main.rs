//! Command-line entry points for the pretrain → finetune → evaluate pipeline.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use lafs::checkpoint::Checkpoint;
use lafs::config::{KvConfig, MetricsWriter};
use lafs::data::{generate_synthetic, load_dataset, read_manifest, read_pairs, write_pairs, LabeledImages};
use lafs::error::{Error, Result};
use lafs::eval::{build_few_shot, Shots};
use lafs::finetune::{FaceModel, FinetuneMode};
use lafs::gradcheck::{check_all, TOLERANCE};
use lafs::localizer::Localizer;
use lafs::pipeline::{bootstrap, eval_pairs, evaluate, finetune, load_model, model_checkpoint, pretrain, BenchConfig, Method};
use lafs::pretrain::TeacherViews;
use lafs::vit::Vit;

#[derive(Parser, Debug)]
#[command(name = "lafs", version, about = "Landmark-based self-supervised face representation learning")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Flat key=value configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Extra key=value overrides, applied after the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Seed; defaults to $LAFS_SEED, then 0.
    #[arg(long, global = true, env = "LAFS_SEED", default_value_t = 0)]
    seed: u64,
    /// Metrics CSV, appended to.
    #[arg(long, global = true, default_value = "metrics.csv")]
    metrics: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render bootstrap, train and test splits plus held-out pairs.
    GenData {
        #[arg(long)]
        out: PathBuf,
    },
    /// Supervised Part fViT training; keeps the localizer.
    Bootstrap {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Self-supervised pretraining on unlabelled images.
    Pretrain(PretrainArgs),
    /// Few-shot finetuning with a margin loss.
    Finetune(FinetuneArgs),
    /// 1:1 verification on a pair list.
    Eval {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        /// False accept rates for TAR@FAR.
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.01, 0.1])]
        far: Vec<f64>,
        /// JSON report path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 5)]
        instances: usize,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Lafs,
    Dino,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ViewsArg {
    Landmark,
    Grid,
    Mixed,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    A,
    B,
    C,
    Grid,
}

#[derive(Args, Debug)]
struct PretrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint holding the bootstrapped localizer.
    #[arg(long)]
    localizer: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "lafs")]
    method: MethodArg,
    /// Defaults to landmark views for lafs and grid views for dino.
    #[arg(long, value_enum)]
    teacher_views: Option<ViewsArg>,
    #[arg(long)]
    alpha: Option<f32>,
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    shuffle: Option<bool>,
}

#[derive(Args, Debug)]
struct FinetuneArgs {
    #[arg(long)]
    data: PathBuf,
    /// Pretrained (or bootstrap) checkpoint; omit to start from scratch.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Localizer checkpoint, when `init` holds none.
    #[arg(long)]
    localizer: Option<PathBuf>,
    /// Reference localizer for mode c; defaults to the initial localizer.
    #[arg(long)]
    reference: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value = "a")]
    mode: ModeArg,
    #[arg(long)]
    beta: Option<f32>,
    /// Images per identity; 0 keeps all.
    #[arg(long)]
    shots: Option<usize>,
    /// Fraction of identities kept.
    #[arg(long)]
    fraction: Option<f64>,
    #[arg(long)]
    epochs: Option<usize>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Checkpoint(c) => c.code() as u8,
        Error::Config(_) | Error::Parameter(_) => 3,
        Error::Io { .. } | Error::Format { .. } => 4,
        _ => 1,
    }
}

fn bench_config(g: &Global) -> Result<BenchConfig> {
    let mut kv = match &g.config {
        Some(p) => KvConfig::load(p)?,
        None => KvConfig::default(),
    };
    for s in &g.set {
        let (k, v) = s.split_once('=').ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {s:?}")))?;
        kv.set(k.trim(), v.trim());
    }
    let mut b = BenchConfig::default();
    b.apply(&kv)?;
    Ok(b)
}

/// Accepts a manifest file or a split directory containing `manifest.tsv`.
fn dataset(path: &Path) -> Result<LabeledImages> {
    let manifest = if path.is_dir() { path.join("manifest.tsv") } else { path.to_path_buf() };
    load_dataset(&read_manifest(&manifest)?)
}

fn meta(stage: &str, bench: &BenchConfig, seed: u64, step: u64) -> Vec<(&'static str, String)> {
    vec![
        ("format", "lafs-checkpoint v1".into()),
        ("stage", stage.into()),
        ("seed", seed.to_string()),
        ("step", step.to_string()),
        ("config_hash", format!("{:016x}", config_hash(bench))),
        ("crate_version", env!("CARGO_PKG_VERSION").into()),
    ]
}

fn config_hash(bench: &BenchConfig) -> u64 {
    let mut kv = KvConfig::default();
    kv.set("debug", format!("{bench:?}"));
    kv.hash()
}

fn load_localizer(path: &Path, bench: &BenchConfig) -> Result<Localizer> {
    let ck = Checkpoint::load(path)?;
    let mut l = Localizer::new(bench.localizer_config(), 0)?;
    ck.load_params("localizer.", &mut l)?;
    Ok(l)
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let mut bench = bench_config(g)?;
    let seed = g.seed;
    let mut metrics = MetricsWriter::to_file(&g.metrics);
    match cli.command {
        Command::GenData { out } => {
            let splits = [("bootstrap", bench.bootstrap_spec()), ("train", bench.train_spec()), ("test", bench.test_spec())];
            for (name, spec) in splits {
                let m = generate_synthetic(&spec, &out.join(name))?;
                println!("{name}: {} images over {} identities", m.entries.len(), spec.n_identities);
            }
            let test = dataset(&out.join("test/manifest.tsv"))?;
            let pairs = eval_pairs(&test, bench.eval_pairs / 2, seed)?;
            write_pairs(&out.join("test/pairs.tsv"), &test.names, &pairs)?;
            println!("test: {} pairs", pairs.len());
        }
        Command::Bootstrap { data, out } => {
            let d = dataset(&data)?;
            let (loc, vit) = bootstrap(&d, &bench, seed, &mut metrics)?;
            let steps = (bench.bootstrap_epochs * d.len().div_ceil(bench.finetune_batch)) as u64;
            model_checkpoint(Some(&loc), &vit, None, &meta("bootstrap", &bench, seed, steps)).save(&out)?;
            println!("bootstrap: localizer saved to {}", out.display());
        }
        Command::Pretrain(a) => {
            if let Some(v) = a.alpha {
                bench.alpha = v;
            }
            if let Some(v) = a.subset {
                bench.subset = v;
            }
            if let Some(v) = a.steps {
                bench.pretrain_steps = v;
            }
            let method = match a.method {
                MethodArg::Lafs => Method::Lafs,
                MethodArg::Dino => Method::Dino,
            };
            if let Some(v) = a.shuffle {
                bench.shuffle = v;
            } else if method == Method::Dino {
                bench.shuffle = false;
            }
            let views = match (a.teacher_views, method) {
                (Some(ViewsArg::Landmark), _) | (None, Method::Lafs) => TeacherViews::Landmark,
                (Some(ViewsArg::Grid), _) | (None, Method::Dino) => TeacherViews::Grid,
                (Some(ViewsArg::Mixed), _) => TeacherViews::Mixed,
            };
            let cfg = bench.pretrain_config(method, views);
            let d = dataset(&a.data)?;
            let loc = load_localizer(&a.localizer, &bench)?;
            let vit = Vit::new(bench.vit_config(), seed)?;
            let ts = pretrain(&d.images, loc, vit, cfg, seed, &mut metrics)?;
            let m = meta("pretrain", &bench, seed, ts.step);
            model_checkpoint(Some(&ts.localizer), &ts.teacher.vit, None, &m).save(&a.out)?;
            println!("pretrain: {} steps, teacher saved to {}", ts.step, a.out.display());
        }
        Command::Finetune(a) => {
            if let Some(v) = a.beta {
                bench.beta = v;
            }
            if let Some(v) = a.shots {
                bench.shots = v;
            }
            if let Some(v) = a.fraction {
                bench.fraction = v;
            }
            if let Some(v) = a.epochs {
                bench.finetune_epochs = v;
            }
            let mode = match a.mode {
                ModeArg::A => FinetuneMode::FixedLandmark,
                ModeArg::B => FinetuneMode::TrainableLandmark,
                ModeArg::C => FinetuneMode::SoftLabel,
                ModeArg::Grid => FinetuneMode::LandmarkToGrid,
            };
            let (mut loc, vit) = match &a.init {
                Some(p) => {
                    let (l, v, _) = load_model(&Checkpoint::load(p)?, &bench)?;
                    (l, v)
                }
                None => (None, Vit::new(bench.vit_config(), seed)?),
            };
            if let Some(p) = &a.localizer {
                loc = Some(load_localizer(p, &bench)?);
            }
            let reference = match (&a.reference, mode) {
                (Some(p), _) => Some(load_localizer(p, &bench)?),
                (None, FinetuneMode::SoftLabel) => loc.clone(),
                _ => None,
            };
            let d = dataset(&a.data)?;
            let shots = if bench.shots == 0 { Shots::All } else { Shots::Count(bench.shots) };
            let few = build_few_shot(&d.labels, bench.fraction, shots, seed)?;
            let labelled = d.subset(&few.indices, Some(&few.labels));
            let model = finetune(loc, vit, &labelled, bench.finetune_config(mode), reference, seed, &mut metrics)?;
            let m = meta("finetune", &bench, seed, 0);
            model_checkpoint(model.localizer.as_ref(), &model.vit, Some(&model.head), &m).save(&a.out)?;
            println!("finetune: {} images of {} identities, model saved to {}", labelled.len(), few.selected.len(), a.out.display());
        }
        Command::Eval { data, model, pairs, far, report } => {
            let d = dataset(&data)?;
            let (localizer, vit, head) = load_model(&Checkpoint::load(&model)?, &bench)?;
            let head = match head {
                Some(h) => h,
                None => lafs::finetune::CosFaceHead::new(1, bench.dim, bench.cosface_scale, bench.cosface_margin, 0)?,
            };
            let model = FaceModel { localizer, vit, head };
            let pairs = read_pairs(&pairs, &d.names)?;
            let r = evaluate(&model, &d, &pairs, bench.folds, &far, seed, &mut metrics)?;
            println!("accuracy {:.4} ± {:.4} over {} folds, {} pairs", r.kfold.mean, r.kfold.std, r.folds, r.pairs);
            for t in &r.tar_at_far {
                println!("TAR@FAR={} {:.4}", t.far, t.tar);
            }
            if let Some(p) = report {
                let json = serde_json::to_string_pretty(&r).map_err(|e| Error::Contract(e.to_string()))?;
                std::fs::write(&p, json).map_err(|e| Error::io(&p, e))?;
            }
        }
        Command::Gradcheck { instances } => {
            let checks = check_all(instances, seed)?;
            let mut failed = 0;
            for op in lafs::gradcheck::OPS {
                let worst = checks.iter().filter(|c| c.op == *op).map(|c| c.max_rel_err).fold(0.0f32, f32::max);
                let ok = worst < TOLERANCE;
                failed += usize::from(!ok);
                println!("{:<20} max rel err {worst:.2e} {}", op, if ok { "ok" } else { "FAIL" });
            }
            if failed > 0 {
                return Err(Error::Contract(format!("{failed} operations exceed relative error {TOLERANCE}")));
            }
        }
    }
    metrics.flush()
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

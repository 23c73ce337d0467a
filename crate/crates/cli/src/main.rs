use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use vlm_core::eval::{evaluate, load_pairs, EvalKind};
use vlm_core::gradsuite::{run_suite, TOLERANCE};
use vlm_core::model::{Media, ModelConfig, Vlm};
use vlm_core::tqa::client::{MockClient, ModelClient};
use vlm_core::tqa::pipeline::{run_pipeline, PipelineConfig};
use vlm_core::trainer::{load_dataset, run_stage, write_loss_trace, StageConfig};
use vlm_core::video::load_bundle;
use vlm_core::vision::ImageGrid;

#[derive(Parser)]
#[command(name = "vlm", version, about = "Train, run and evaluate a small vision-language model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one training stage and write a checkpoint plus `<out>.loss.csv`.
    Train(TrainArgs),
    /// Greedy decoding from a checkpoint.
    Infer(InferArgs),
    /// Finite-difference gradient checks; exits 0 iff every error < 1e-4.
    Gradcheck {
        /// Check a single module.
        #[arg(long)]
        module: Option<String>,
    },
    /// Generate temporal-grounding QA pairs from video manifests.
    TqaGenerate(TqaArgs),
    /// Score predictions against gold answers.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gold: PathBuf,
        /// choice | exact
        #[arg(long)]
        kind: String,
    },
}

#[derive(Args)]
struct TrainArgs {
    /// Stage config JSON file, or a preset name (image-stage1, image-stage2,
    /// video-stage1, video-stage2).
    #[arg(long)]
    config: String,
    /// JSON Lines dataset.
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from this checkpoint instead of a fresh toy model.
    #[arg(long)]
    init: Option<PathBuf>,
    /// Fresh model without visual-expert weights.
    #[arg(long, conflicts_with = "init")]
    shared: bool,
    /// Seed for a fresh model.
    #[arg(long, default_value_t = 0)]
    model_seed: u64,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("media").args(["image", "video"]).required(true))]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// CGIMG image file.
    #[arg(long)]
    image: Option<PathBuf>,
    /// Video manifest.
    #[arg(long)]
    video: Option<PathBuf>,
    #[arg(long)]
    prompt: String,
    #[arg(long, default_value_t = 64)]
    max_tokens: usize,
}

#[derive(Args)]
struct TqaArgs {
    #[arg(long)]
    manifests: PathBuf,
    /// mock:FILE or http:URL
    #[arg(long)]
    client: String,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 4)]
    max_concurrency: usize,
}

fn stage_config(spec: &str) -> anyhow::Result<StageConfig> {
    let path = Path::new(spec);
    if path.is_file() {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {spec}"))?;
        return Ok(StageConfig::from_json(&text)?);
    }
    Ok(StageConfig::preset(spec)?)
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let stage = stage_config(&args.config)?;
    let mut model = match &args.init {
        Some(p) => Vlm::load(p)?,
        None => Vlm::new(ModelConfig::toy(!args.shared), args.model_seed)?,
    };
    let data = load_dataset(&args.data, model.cfg.video.n_frames)?;
    let report = run_stage(&mut model, &data, &stage)?;
    model.save(&args.out)?;
    let mut trace = args.out.clone().into_os_string();
    trace.push(".loss.csv");
    write_loss_trace(Path::new(&trace), &report.losses)?;
    if let Some((step, loss)) = report.losses.last() {
        println!("step {step} loss {loss:.6}");
    }
    Ok(())
}

fn infer(args: InferArgs) -> anyhow::Result<()> {
    let model = Vlm::load(&args.ckpt)?;
    let media = match (&args.image, &args.video) {
        (Some(p), _) => Media::Image(ImageGrid::load(p)?),
        (_, Some(p)) => Media::Video(load_bundle(p, model.cfg.video.n_frames)?),
        _ => unreachable!("clap requires one media argument"),
    };
    println!("{}", model.generate(&args.prompt, &media, args.max_tokens)?);
    Ok(())
}

fn gradcheck(module: Option<&str>) -> anyhow::Result<bool> {
    let mut ok = true;
    for (name, err) in run_suite(module)? {
        let pass = err < TOLERANCE;
        ok &= pass;
        println!("{name:<18} {err:.3e} {}", if pass { "ok" } else { "FAIL" });
    }
    Ok(ok)
}

fn client(spec: &str) -> anyhow::Result<Box<dyn ModelClient>> {
    match spec.split_once(':') {
        Some(("mock", file)) => Ok(Box::new(MockClient::load(Path::new(file))?)),
        Some(("http", _)) => http_client(spec.trim_start_matches("http:")),
        _ => bail!(vlm_core::Error::InvalidConfig(format!(
            "--client must be mock:FILE or http:URL, got {spec:?}"
        ))),
    }
}

fn http_client(url: &str) -> anyhow::Result<Box<dyn ModelClient>> {
    Ok(Box::new(vlm_core::tqa::client::HttpClient::from_env(url)?))
}

fn tqa_generate(args: TqaArgs) -> anyhow::Result<()> {
    let c = client(&args.client)?;
    let cfg = PipelineConfig {
        max_concurrency: args.max_concurrency,
        ..PipelineConfig::default()
    };
    let summary = run_pipeline(&args.manifests, c.as_ref(), c.as_ref(), &args.out, &cfg)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    match cli.command {
        Command::Train(a) => train(a)?,
        Command::Infer(a) => infer(a)?,
        Command::Gradcheck { module } => return gradcheck(module.as_deref()),
        Command::TqaGenerate(a) => tqa_generate(a)?,
        Command::Eval { pred, gold, kind } => {
            let kind: EvalKind = kind.parse()?;
            let m = evaluate(&load_pairs(&pred, &gold, kind)?)?;
            println!("accuracy {:.3}", m.accuracy);
        }
    }
    Ok(true)
}

/// 2 for I/O and client failures, 1 for everything else.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<vlm_core::Error>() {
            return if e.is_io() { 2 } else { 1 };
        }
        if cause.is::<std::io::Error>() {
            return 2;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! Argument parsing and the subcommand implementations.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;
use sketchloop_core::dataset::{self, describe, load_manifest, synth_captioned, synth_fixture, synth_fixture_sized, write_dataset};
use sketchloop_core::lora::{DEFAULT_ALPHA, DEFAULT_RANK};
use sketchloop_core::metrics::{reports_to_records, MetricValues};
use sketchloop_core::pipeline::{build_tokenizer, pretrain_base, PretrainConfig};
use sketchloop_core::refine::{DEFAULT_GUIDANCE, DEFAULT_ITERATIONS, DEFAULT_STRENGTH};
use sketchloop_core::trainer::{self, retrieval_accuracy, run_ablation, TOP_K};
use sketchloop_core::{
    clip_score, EncoderConfig, EncoderModel, Error as CoreError, GrayImage, LoraConfig, LoraTargets, ModelKind,
    RefinementConfig, SketchPair, TrainConfig, TrainMode,
};

use crate::checkpoint::Checkpoint;
use crate::error::CliError;
use crate::models::{default_encoder, LoadedEngine, DEFAULT_BACKEND_SEED};
use crate::server::{self, AppState, ADDR_ENV, DEFAULT_ADDR, DEFAULT_MAX_SESSIONS};

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "sketchloop", version, about = "Train sketch encoders, refine sketches and serve refinement sessions")]
pub struct Cli {
    /// Output style on stdout.
    #[arg(long, value_enum, global = true, default_value_t = Format::Text)]
    pub format: Format,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    /// Aligned, human-oriented text.
    Text,
    /// Tab-separated records for scripts.
    Records,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate or validate datasets.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Fine-tune an encoder and write a checkpoint plus its training log.
    Train(TrainArgs),
    /// Train self, cross and both adapter placements and compare them.
    Ablate(AblateArgs),
    /// Run an iterative refinement session from the command line.
    Refine(RefineArgs),
    /// Score a checkpoint or a pair of images.
    #[command(subcommand)]
    Eval(EvalCommand),
    /// Serve the HTTP session API.
    Serve(ServeArgs),
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Write a synthetic dataset (PGM images plus manifest.jsonl).
    Synth(SynthArgs),
    /// Load a manifest and report every malformed record.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Number of description clusters.
    #[arg(long, default_value_t = 4, conflicts_with = "captioned")]
    pub clusters: usize,
    /// Pairs generated per cluster.
    #[arg(long, default_value_t = 8, conflicts_with = "captioned")]
    pub per: usize,
    /// Generate N generic captioned drawings instead of the clustered fixture.
    #[arg(long, value_name = "N")]
    pub captioned: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Side length images are resized to.
    #[arg(long, default_value_t = dataset::FIXTURE_SIZE)]
    pub size: usize,
}

/// `clusters=C,per=P[,val=V]`: a clustered synthetic fixture for training and
/// a `V`-item fixture drawn from the next seed for validation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixtureSpec {
    pub clusters: usize,
    pub per: usize,
    pub val: usize,
}

pub const DEFAULT_FIXTURE_VAL: usize = 59;

impl FromStr for FixtureSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (mut clusters, mut per, mut val) = (None, None, DEFAULT_FIXTURE_VAL);
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got {part:?}"))?;
            let n: usize = value
                .trim()
                .parse()
                .map_err(|_| format!("{key} needs a non-negative integer, got {value:?}"))?;
            match key.trim() {
                "clusters" => clusters = Some(n),
                "per" => per = Some(n),
                "val" => val = n,
                other => return Err(format!("unknown fixture key {other:?} (clusters, per, val)")),
            }
        }
        let clusters = clusters.ok_or("fixture needs clusters=N")?;
        let per = per.ok_or("fixture needs per=N")?;
        if clusters < 2 {
            return Err("fixture needs at least 2 clusters".into());
        }
        if clusters * per < 2 || val == 0 {
            return Err("fixture needs at least 2 training pairs and 1 validation pair".into());
        }
        Ok(Self { clusters, per, val })
    }
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct DataArgs {
    /// JSONL manifest; split into training and validation by the seed.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Synthetic fixture, e.g. clusters=4,per=8 or clusters=4,per=8,val=59.
    #[arg(long)]
    pub fixture: Option<FixtureSpec>,
}

impl DataArgs {
    fn describe(&self) -> String {
        match (&self.manifest, &self.fixture) {
            (Some(m), _) => format!("manifest {}", m.display()),
            (_, Some(f)) => format!("fixture clusters={},per={},val={}", f.clusters, f.per, f.val),
            _ => unreachable!("clap requires one source"),
        }
    }

    /// Training and validation pairs at `size × size`.
    fn load(&self, size: usize, seed: u64) -> CliResult<(Vec<SketchPair>, Vec<SketchPair>)> {
        match (&self.manifest, self.fixture) {
            (Some(path), _) => {
                let pairs = load_manifest(path, size)?;
                Ok(dataset::split(&pairs, dataset::DEFAULT_SPLIT_RATIO, seed)?)
            }
            (_, Some(f)) => {
                let resize = |pairs: Vec<SketchPair>| -> Vec<SketchPair> {
                    pairs
                        .into_iter()
                        .map(|p| SketchPair {
                            image: p.image.resize_nearest(size, size),
                            ..p
                        })
                        .collect()
                };
                let train = synth_fixture(f.clusters, f.per, seed)?;
                let val = synth_fixture_sized(f.clusters, f.val, seed.wrapping_add(1))?;
                Ok((resize(train), resize(val)))
            }
            _ => unreachable!("clap requires one source"),
        }
    }

    /// Every pair the source describes, for evaluation.
    fn load_eval(&self, size: usize, seed: u64) -> CliResult<Vec<SketchPair>> {
        match &self.manifest {
            Some(path) => Ok(load_manifest(path, size)?),
            None => Ok(self.load(size, seed)?.1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Lora,
    Full,
}

impl From<ModeArg> for TrainMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Lora => TrainMode::Lora,
            ModeArg::Full => TrainMode::Full,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainingArgs {
    #[arg(long, default_value_t = 20)]
    pub epochs: usize,
    #[arg(long, default_value_t = DEFAULT_RANK)]
    pub rank: usize,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f32,
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    pub lr: f32,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Start from this checkpoint's base weights instead of pretraining one.
    #[arg(long, value_name = "CKPT", conflicts_with = "pretrain_epochs")]
    pub base: Option<PathBuf>,
    /// Epochs of full training on generic captioned drawings for the base.
    #[arg(long, default_value_t = PretrainConfig::default().epochs)]
    pub pretrain_epochs: usize,
}

impl TrainingArgs {
    fn train_config(&self, targets: LoraTargets, mode: TrainMode) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            learning_rate: self.lr,
            seed: self.seed,
            lora: LoraConfig {
                targets,
                rank: self.rank,
                alpha: self.alpha,
                ..LoraConfig::default()
            },
            mode,
            ..TrainConfig::default()
        }
    }

    fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            seed: self.seed,
            ..PretrainConfig::default()
        }
    }

    /// Base encoder plus training and validation pairs sized for it.
    fn prepare(&self, data: &DataArgs) -> CliResult<(EncoderModel, Vec<SketchPair>, Vec<SketchPair>)> {
        match &self.base {
            Some(path) => {
                let mut base = Checkpoint::load(path)?.model.without_adapters();
                base.params_mut().freeze_all();
                let size = base.config().image_size;
                let (train, val) = data.load(size, self.seed)?;
                Ok((base, train, val))
            }
            None => {
                let config = EncoderConfig::default();
                let (train, val) = data.load(config.image_size, self.seed)?;
                let pre = self.pretrain_config();
                let texts = train.iter().chain(&val).map(|p| p.description.as_str());
                let tokenizer = build_tokenizer(&pre, texts);
                tracing::info!(epochs = pre.epochs, "pretraining base encoder");
                let (base, _) = pretrain_base(config, tokenizer, &pre).map_err(CliError::from_training)?;
                Ok((base, train, val))
            }
        }
    }

    fn metadata(&self, data: &DataArgs) -> serde_json::Value {
        json!({
            "data": data.describe(),
            "epochs": self.epochs,
            "learning_rate": self.lr,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "base": match &self.base {
                Some(p) => json!(p.display().to_string()),
                None => json!({ "pretrain_epochs": self.pretrain_epochs }),
            },
        })
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    /// Which attention layers receive adapters: self, cross or both.
    #[arg(long, default_value = "both")]
    pub lora_targets: LoraTargets,
    #[arg(long, value_enum, default_value_t = ModeArg::Lora)]
    pub mode: ModeArg,
    #[arg(long, default_value = "model.skch")]
    pub out: PathBuf,
    /// Training log path; defaults to the checkpoint path with `.log`.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub training: TrainingArgs,
    #[arg(long, default_value = "ablation")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct ModelChoice {
    /// Generator only, no encoder conditioning.
    #[arg(long)]
    pub model1: bool,
    /// Conditioning from the frozen base encoder (needs --checkpoint).
    #[arg(long)]
    pub model2: bool,
    /// Conditioning from the adapted encoder (needs --checkpoint).
    #[arg(long)]
    pub model3: bool,
}

impl ModelChoice {
    fn kind(&self) -> ModelKind {
        if self.model2 {
            ModelKind::Model2
        } else if self.model3 {
            ModelKind::Model3
        } else {
            ModelKind::Model1
        }
    }
}

#[derive(Debug, Args)]
pub struct RefineArgs {
    /// Input sketch (PGM or PNG).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, required_unless_present = "demographic", conflicts_with_all = ["demographic", "attributes"])]
    pub description: Option<String>,
    /// Fills the default description template together with --attributes.
    #[arg(long, requires = "attributes")]
    pub demographic: Option<String>,
    #[arg(long, requires = "demographic")]
    pub attributes: Option<String>,
    /// Ground-truth image scored alongside the previous iteration.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelChoice,
    #[arg(long, default_value_t = DEFAULT_ITERATIONS)]
    pub iterations: usize,
    #[arg(long, default_value_t = DEFAULT_STRENGTH)]
    pub strength: f32,
    #[arg(long, default_value_t = DEFAULT_GUIDANCE)]
    pub guidance: f32,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Feedback for successive iterations, in order; pass "" to skip one.
    #[arg(long)]
    pub feedback: Vec<String>,
    /// Seed of the toy generator's fixed matrices.
    #[arg(long, default_value_t = DEFAULT_BACKEND_SEED)]
    pub backend_seed: u64,
    #[arg(long, default_value = "refine_out")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Retrieval accuracy at k = 1, 5, 10, 25.
    Retrieval(RetrievalArgs),
    /// SSIM, PSNR, CLIP score and perceptual distance between two images.
    Images(ImagesArgs),
}

#[derive(Debug, Args)]
pub struct RetrievalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A manifest is scored whole; a fixture is scored on its validation side.
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct ImagesArgs {
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub reference: PathBuf,
    /// Evaluator encoder; an untrained default is used otherwise.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Prompt for the CLIP score; without it the score is NaN.
    #[arg(long)]
    pub prompt: Option<String>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, env = ADDR_ENV, default_value = DEFAULT_ADDR)]
    pub addr: String,
    /// Trained encoders; without one only model1 sessions are accepted.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_MAX_SESSIONS)]
    pub max_sessions: usize,
    #[arg(long, default_value_t = DEFAULT_BACKEND_SEED)]
    pub backend_seed: u64,
}

pub fn run(cli: Cli) -> CliResult<()> {
    let format = cli.format;
    match cli.command {
        Command::Dataset(DatasetCommand::Synth(a)) => dataset_synth(&a, format),
        Command::Dataset(DatasetCommand::Check(a)) => dataset_check(&a, format),
        Command::Train(a) => train(&a, format),
        Command::Ablate(a) => ablate(&a, format),
        Command::Refine(a) => refine(&a, format),
        Command::Eval(EvalCommand::Retrieval(a)) => eval_retrieval(&a, format),
        Command::Eval(EvalCommand::Images(a)) => eval_images(&a, format),
        Command::Serve(a) => serve(&a),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| CliError::io(path, e))
}

fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn dataset_synth(a: &SynthArgs, format: Format) -> CliResult<()> {
    let pairs = match a.captioned {
        Some(n) => synth_captioned(n, a.seed),
        None => synth_fixture(a.clusters, a.per, a.seed)?,
    };
    let manifest = write_dataset(&a.out, &pairs)?;
    match format {
        Format::Text => println!("wrote {} pairs; manifest {}", pairs.len(), manifest.display()),
        Format::Records => println!("{}\t{}", pairs.len(), manifest.display()),
    }
    Ok(())
}

fn dataset_check(a: &CheckArgs, format: Format) -> CliResult<()> {
    let pairs = load_manifest(&a.manifest, a.size)?;
    match format {
        Format::Text => println!("{}: {} valid pairs", a.manifest.display(), pairs.len()),
        Format::Records => {
            for p in &pairs {
                println!("{}\t{}", p.id, p.description);
            }
        }
    }
    Ok(())
}

fn log_table(log: &trainer::TrainLog) -> String {
    let mut out = String::from("epoch      loss  acc@1  acc@5 acc@10 acc@25\n");
    for e in &log.epochs {
        let _ = writeln!(
            out,
            "{:>5} {:>9.4} {:>6.3} {:>6.3} {:>6.3} {:>6.3}",
            e.epoch, e.loss, e.acc[0], e.acc[1], e.acc[2], e.acc[3]
        );
    }
    out
}

fn train(a: &TrainArgs, format: Format) -> CliResult<()> {
    let mode = TrainMode::from(a.mode);
    let cfg = a.training.train_config(a.lora_targets, mode);
    cfg.validate()?;
    let (base, train_set, val_set) = a.training.prepare(&a.data)?;
    tracing::info!(train = train_set.len(), val = val_set.len(), "fine-tuning");
    let outcome = trainer::train_with_validation(base, &train_set, &val_set, &cfg).map_err(CliError::from_training)?;

    let mut metadata = a.training.metadata(&a.data);
    metadata["mode"] = json!(mode);
    metadata["best_epoch"] = json!(outcome.best_epoch);
    let checkpoint = Checkpoint {
        model: outcome.model,
        lora: (mode == TrainMode::Lora).then(|| cfg.lora.clone()),
        metadata,
    };
    checkpoint.save(&a.out)?;
    let log_path = a.log.clone().unwrap_or_else(|| a.out.with_extension("log"));
    write_file(&log_path, outcome.log.to_records())?;

    match format {
        Format::Text => {
            print!("{}", log_table(&outcome.log));
            println!(
                "best epoch {}; checkpoint {}; log {}",
                outcome.best_epoch,
                a.out.display(),
                log_path.display()
            );
        }
        Format::Records => print!("{}", outcome.log.to_records()),
    }
    Ok(())
}

fn ablate(a: &AblateArgs, format: Format) -> CliResult<()> {
    let cfg = a.training.train_config(LoraTargets::Both, TrainMode::Lora);
    cfg.validate()?;
    let (base, train_set, val_set) = a.training.prepare(&a.data)?;
    let report = run_ablation(&base, &train_set, &val_set, &cfg).map_err(CliError::from_training)?;
    create_dir(&a.out_dir)?;
    for (targets, log) in &report.logs {
        write_file(&a.out_dir.join(format!("{targets}.log")), log.to_records())?;
    }
    write_file(&a.out_dir.join("ablation.tsv"), report.to_table())?;
    match format {
        Format::Text => print!("{report}"),
        Format::Records => print!("{}", report.to_table()),
    }
    Ok(())
}

fn refine(a: &RefineArgs, format: Format) -> CliResult<()> {
    let kind = a.model.kind();
    if kind != ModelKind::Model1 && a.checkpoint.is_none() {
        return Err(CoreError::Config(format!("{kind} needs trained encoders; pass --checkpoint")).into());
    }
    let description = match (&a.description, &a.demographic, &a.attributes) {
        (Some(d), _, _) => d.clone(),
        (None, Some(demo), Some(attrs)) => describe(demo, attrs),
        _ => return Err(CliError::Usage("pass --description or both --demographic and --attributes".into())),
    };
    let input = GrayImage::load(&a.input)?;
    let reference = a.reference.as_deref().map(GrayImage::load).transpose()?;
    let loaded = LoadedEngine::load(a.checkpoint.as_deref(), a.backend_seed)?;
    let config = RefinementConfig {
        strength: a.strength,
        guidance_scale: a.guidance,
        iterations: a.iterations,
        model_kind: kind,
        seed: a.seed,
    };
    let feedback: Vec<Option<String>> = a.feedback.iter().map(|f| Some(f.clone())).collect();
    let session = loaded
        .engine
        .run_session(&description, &input, reference.as_ref(), config, &feedback)?;

    create_dir(&a.out_dir)?;
    for n in 0..=session.iterations() {
        let image = session.image(n).expect("index within the session");
        image.save_pgm(&a.out_dir.join(format!("iteration_{n:02}.pgm")))?;
    }
    let records = reports_to_records(&session.reports());
    write_file(&a.out_dir.join("report.tsv"), &records)?;

    match format {
        Format::Text => {
            println!("iter     ssim     psnr  clip_score  perceptual  prompt");
            for r in &session.records {
                let m = &r.metrics.previous;
                println!(
                    "{:>4} {:>8.4} {:>8.2} {:>11.4} {:>11.5}  {}",
                    r.index, m.ssim, m.psnr, m.clip_score, m.perceptual_distance, r.prompt
                );
            }
            println!("images and report.tsv written to {}", a.out_dir.display());
        }
        Format::Records => print!("{records}"),
    }
    Ok(())
}

fn eval_retrieval(a: &RetrievalArgs, format: Format) -> CliResult<()> {
    let model = Checkpoint::load(&a.checkpoint)?.model;
    let pairs = a.data.load_eval(model.config().image_size, a.seed)?;
    let acc = retrieval_accuracy(&model, &pairs)?;
    for (k, v) in TOP_K.iter().zip(acc) {
        match format {
            Format::Text => println!("acc@{k:<2} {v:.4}"),
            Format::Records => println!("{k}\t{v}"),
        }
    }
    Ok(())
}

fn eval_images(a: &ImagesArgs, format: Format) -> CliResult<()> {
    let evaluator = match &a.checkpoint {
        Some(p) => Checkpoint::load(p)?.model.without_adapters(),
        None => default_encoder(0)?,
    };
    let size = evaluator.config().image_size;
    let output = GrayImage::load(&a.output)?.resize_nearest(size, size);
    let reference = GrayImage::load(&a.reference)?.resize_nearest(size, size);
    let clip = match &a.prompt {
        Some(p) => f64::from(clip_score(&evaluator.encode_prompt(p)?, &evaluator.encode_image(&output)?)),
        None => f64::NAN,
    };
    let m = MetricValues::compute(&output, &reference, clip, &evaluator)?;
    match format {
        Format::Text => {
            println!("ssim                {:.6}", m.ssim);
            println!("psnr                {:.4}", m.psnr);
            println!("clip_score          {:.6}", m.clip_score);
            println!("perceptual_distance {:.6}", m.perceptual_distance);
        }
        Format::Records => {
            println!("ssim\tpsnr\tclip_score\tperceptual_distance");
            println!("{}\t{}\t{}\t{}", m.ssim, m.psnr, m.clip_score, m.perceptual_distance);
        }
    }
    Ok(())
}

fn serve(a: &ServeArgs) -> CliResult<()> {
    let _ = tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .try_init();
    let loaded = LoadedEngine::load(a.checkpoint.as_deref(), a.backend_seed)?;
    let state = AppState::new(loaded, a.max_sessions);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| CliError::Server(format!("cannot start runtime: {e}")))?;
    runtime.block_on(async {
        let listener = tokio::net::TcpListener::bind(&a.addr)
            .await
            .map_err(|e| CliError::Server(format!("cannot bind {}: {e}", a.addr)))?;
        let local = listener.local_addr().map_err(|e| CliError::Server(e.to_string()))?;
        tracing::info!(addr = %local, "listening");
        eprintln!("listening on http://{local}");
        server::serve(listener, state).await.map_err(|e| CliError::Server(e.to_string()))
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn command_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn fixture_spec_parses() {
        let f: FixtureSpec = "clusters=4,per=8".parse().unwrap();
        assert_eq!(f, FixtureSpec { clusters: 4, per: 8, val: DEFAULT_FIXTURE_VAL });
        let f: FixtureSpec = "per=2, clusters=3, val=5".parse().unwrap();
        assert_eq!(f, FixtureSpec { clusters: 3, per: 2, val: 5 });
        for bad in ["clusters=4", "clusters=1,per=8", "clusters=4,per=x", "clusters=4,per=8,depth=2", "4,8"] {
            assert!(bad.parse::<FixtureSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn refine_requires_one_model_flag() {
        let base = ["sketchloop", "refine", "--input", "x.pgm", "--description", "a man"];
        assert!(Cli::try_parse_from(base).is_err());
        let mut two = base.to_vec();
        two.extend(["--model1", "--model3"]);
        assert!(Cli::try_parse_from(two).is_err());
        let mut one = base.to_vec();
        one.push("--model1");
        let cli = Cli::try_parse_from(one).unwrap();
        match cli.command {
            Command::Refine(r) => {
                assert_eq!(r.model.kind(), ModelKind::Model1);
                assert_eq!(r.strength, DEFAULT_STRENGTH);
                assert_eq!(r.guidance, DEFAULT_GUIDANCE);
                assert_eq!(r.iterations, 5);
            }
            other => panic!("parsed {other:?}"),
        }
    }

    #[test]
    fn train_needs_exactly_one_data_source() {
        assert!(Cli::try_parse_from(["sketchloop", "train"]).is_err());
        assert!(Cli::try_parse_from(["sketchloop", "train", "--manifest", "m", "--fixture", "clusters=2,per=2"]).is_err());
        let cli = Cli::try_parse_from(["sketchloop", "--format", "records", "train", "--fixture", "clusters=2,per=2"]).unwrap();
        assert_eq!(cli.format, Format::Records);
    }
}

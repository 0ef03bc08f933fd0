//! `etgan`: data synthesis, training, transfer, conversion, evaluation,
//! ablation sweeps and gradient self-checks. stdout carries only
//! machine-readable JSON; diagnostics go to stderr.

mod config;

use clap::{Parser, Subcommand, ValueEnum};
use config::RunConfig;
use etgan::eval::{fad, mcd, Embedder, EvaluationRecord};
use etgan::features::{
    read_features, synth_dataset, write_features, DatasetManifest, FeatureMatrix,
};
use etgan::losses::{run_loss_suite, AblationFlags, AdversarialMode};
use etgan::training::{
    convert_features, load_state, train_loop, transfer_init, Direction, TrainState,
    TrainingConfig, TransferPlan,
};
use etgan::{autodiff, Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "etgan", about = "Cross-domain emotion transfer over MCEP features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AblationName {
    CycleOnly,
    CycleLi,
    CycleSv,
    CycleLiSv,
    Clip,
    Full,
}

impl AblationName {
    const ROWS: [AblationName; 6] = [
        AblationName::CycleOnly,
        AblationName::CycleLi,
        AblationName::CycleSv,
        AblationName::CycleLiSv,
        AblationName::Clip,
        AblationName::Full,
    ];

    fn label(&self) -> &'static str {
        match self {
            AblationName::CycleOnly => "cycle_only",
            AblationName::CycleLi => "cycle_li",
            AblationName::CycleSv => "cycle_sv",
            AblationName::CycleLiSv => "cycle_li_sv",
            AblationName::Clip => "clip",
            AblationName::Full => "full",
        }
    }

    fn apply(&self, training: &mut TrainingConfig) {
        let (mode, use_li, use_sv) = match self {
            AblationName::CycleOnly => (AdversarialMode::Gan, false, false),
            AblationName::CycleLi => (AdversarialMode::Gan, true, false),
            AblationName::CycleSv => (AdversarialMode::Gan, false, true),
            AblationName::CycleLiSv => (AdversarialMode::Gan, true, true),
            AblationName::Clip => (AdversarialMode::WganClip { clip: 0.01 }, true, true),
            AblationName::Full => (AdversarialMode::WganGp, true, true),
        };
        training.adversarial = mode;
        training.ablation = AblationFlags { use_cycle: true, use_li, use_sv };
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum EmbedderName {
    Identity,
    Classifier,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum MetricName {
    Fad,
    Mcd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DirectionArg {
    X2y,
    Y2x,
}

impl From<DirectionArg> for Direction {
    fn from(d: DirectionArg) -> Direction {
        match d {
            DirectionArg::X2y => Direction::X2y,
            DirectionArg::Y2x => Direction::Y2x,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-domain corpus.
    SynthData {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train from scratch (or resume from a checkpoint).
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<u64>,
        #[arg(long)]
        ablation: Option<AblationName>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune from a source checkpoint, migrating all layers except the
    /// classifier head.
    Transfer {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        source_checkpoint: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<u64>,
    },
    /// Convert one ETGF recording with a trained generator.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        direction: DirectionArg,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Compute FAD or MCD between a real and a generated set.
    Evaluate {
        #[arg(long)]
        real: PathBuf,
        #[arg(long)]
        generated: PathBuf,
        #[arg(long, value_enum, default_value_t = MetricName::Fad)]
        metric: MetricName,
        #[arg(long, value_enum, default_value_t = EmbedderName::Identity)]
        embedder: EmbedderName,
        /// Checkpoint providing the classifier for `--embedder classifier`.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Finite-difference validation of every op and composed loss.
    GradCheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        rounds: usize,
    },
    /// Run the six ablation configurations under a shared seed and budget.
    Ablate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        iterations: Option<u64>,
    },
}

fn load_run_config(path: &Option<PathBuf>) -> Result<RunConfig> {
    match path {
        Some(p) => RunConfig::load(p),
        None => Ok(RunConfig::default()),
    }
}

fn load_manifest_set(manifest: &DatasetManifest) -> Result<Vec<FeatureMatrix>> {
    (0..manifest.entries.len()).map(|i| manifest.load_entry(i)).collect()
}

/// A set of recordings: either a dataset manifest or a directory of .etgf
/// files (sorted by name).
fn load_set(path: &Path) -> Result<Vec<FeatureMatrix>> {
    if path.is_dir() {
        let mut files: Vec<PathBuf> = std::fs::read_dir(path)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "etgf"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::validation(format!(
                "{}: no .etgf files found",
                path.display()
            )));
        }
        files.iter().map(|p| read_features(p)).collect()
    } else {
        load_manifest_set(&DatasetManifest::load(path)?)
    }
}

/// FAD between the converted domain-X set and the real domain-Y set, with
/// the identity embedder (the toy acceptance metric).
fn toy_fad(
    state: &TrainState,
    training: &TrainingConfig,
    manifest_x: &DatasetManifest,
    manifest_y: &DatasetManifest,
) -> Result<f64> {
    let real_y = load_manifest_set(manifest_y)?;
    let converted: Vec<FeatureMatrix> = load_manifest_set(manifest_x)?
        .iter()
        .map(|fm| convert_features(state, training, Direction::X2y, fm))
        .collect::<Result<_>>()?;
    fad(&real_y, &converted, &Embedder::IdentityFlatten)
}

fn run_training(
    run: &RunConfig,
    training: &TrainingConfig,
    out_dir: &Path,
    resume: Option<TrainState>,
) -> Result<TrainState> {
    let manifest_x = DatasetManifest::load(&run.manifest_x)?;
    let manifest_y = DatasetManifest::load(&run.manifest_y)?;
    let mut resolved = run.clone();
    resolved.training = training.clone();
    resolved.out_dir = out_dir.to_path_buf();
    resolved.save(&out_dir.join("config_resolved.json"))?;
    let (state, reports) = train_loop(&manifest_x, &manifest_y, training, out_dir, resume)?;
    let last = reports.last();
    println!(
        "{}",
        json!({
            "checkpoint": out_dir.join("checkpoint_final.etgc"),
            "metrics": out_dir.join("metrics.jsonl"),
            "iterations": state.iteration,
            "final": last,
        })
    );
    Ok(state)
}

fn cmd_synth_data(config: &Option<PathBuf>, out: &Path, seed: Option<u64>) -> Result<()> {
    let run = load_run_config(config)?;
    let seed = seed.unwrap_or(run.training.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    synth_dataset(&run.synth, &mut rng, out)?;
    println!(
        "{}",
        json!({
            "manifest_a": out.join("manifest_a.json"),
            "manifest_b": out.join("manifest_b.json"),
            "samples_per_domain": run.synth.samples_per_domain,
            "seed": seed,
        })
    );
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_train(
    config: &Option<PathBuf>,
    seed: Option<u64>,
    out: &Option<PathBuf>,
    iterations: Option<u64>,
    ablation: Option<AblationName>,
    resume: &Option<PathBuf>,
) -> Result<()> {
    let run = load_run_config(config)?;
    let mut training = run.training.clone();
    if let Some(s) = seed {
        training.seed = s;
    }
    if let Some(n) = iterations {
        training.iterations = n;
    }
    if let Some(a) = ablation {
        a.apply(&mut training);
    }
    let out_dir = out.clone().unwrap_or_else(|| run.out_dir.clone());
    let resume_state = match resume {
        Some(path) => {
            let (stored, state) = load_state(path)?;
            // the stored topology wins; the CLI budget/seed still apply
            training.generator = stored.generator;
            training.critic = stored.critic;
            training.classifier = stored.classifier;
            Some(state)
        }
        None => None,
    };
    run_training(&run, &training, &out_dir, resume_state)?;
    Ok(())
}

fn cmd_transfer(
    config: &Option<PathBuf>,
    source_checkpoint: &Path,
    seed: Option<u64>,
    out: &Option<PathBuf>,
    iterations: Option<u64>,
) -> Result<()> {
    let run = load_run_config(config)?;
    let plan = TransferPlan {
        source_checkpoint: source_checkpoint.to_path_buf(),
        target_speakers: run.synth.speakers,
        fine_tune_iterations: iterations.unwrap_or(run.training.iterations),
        seed: seed.unwrap_or(run.training.seed),
    };
    let (training, state) = transfer_init(&plan)?;
    let out_dir = out.clone().unwrap_or_else(|| run.out_dir.clone());
    run_training(&run, &training, &out_dir, Some(state))?;
    Ok(())
}

fn cmd_generate(
    checkpoint: &Path,
    direction: Direction,
    input: &Path,
    output: &Path,
) -> Result<()> {
    let (training, state) = load_state(checkpoint)?;
    let fm = read_features(input)?;
    let converted = convert_features(&state, &training, direction, &fm)?;
    if let Some(parent) = output.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_features(&converted, output)?;
    println!(
        "{}",
        json!({ "output": output, "frames": converted.frames, "dims": 24 })
    );
    Ok(())
}

fn cmd_evaluate(
    real: &Path,
    generated: &Path,
    metric: MetricName,
    embedder_name: EmbedderName,
    checkpoint: &Option<PathBuf>,
) -> Result<()> {
    let real_set = load_set(real)?;
    let generated_set = load_set(generated)?;
    let record = match metric {
        MetricName::Fad => {
            let embedder = match embedder_name {
                EmbedderName::Identity => Embedder::IdentityFlatten,
                EmbedderName::Classifier => {
                    let path = checkpoint.as_ref().ok_or_else(|| {
                        Error::validation(
                            "--embedder classifier needs --checkpoint".to_string(),
                        )
                    })?;
                    let (training, state) = load_state(path)?;
                    Embedder::ClassifierBottleneck {
                        model: state.models.classifier,
                        config: training.classifier,
                    }
                }
            };
            EvaluationRecord {
                metric: "fad".to_string(),
                value: fad(&real_set, &generated_set, &embedder)?,
                embedder: embedder.name().to_string(),
                n_real: real_set.len(),
                n_generated: generated_set.len(),
            }
        }
        MetricName::Mcd => {
            if real_set.len() != generated_set.len() {
                return Err(Error::contract(format!(
                    "mcd pairs sets by index and needs equal sizes, got {} vs {}",
                    real_set.len(),
                    generated_set.len()
                )));
            }
            let total: f64 = real_set
                .iter()
                .zip(&generated_set)
                .map(|(a, b)| mcd(a, b))
                .sum::<Result<f64>>()?;
            EvaluationRecord {
                metric: "mcd".to_string(),
                value: total / real_set.len() as f64,
                embedder: "none".to_string(),
                n_real: real_set.len(),
                n_generated: generated_set.len(),
            }
        }
    };
    println!("{}", serde_json::to_string(&record)?);
    Ok(())
}

fn cmd_grad_check(seed: u64, rounds: usize) -> Result<()> {
    let mut rows = autodiff::run_op_suite(seed, rounds)?;
    rows.extend(run_loss_suite(seed, rounds)?);
    let mut all_passed = true;
    for row in &rows {
        all_passed &= row.passed();
        println!(
            "{}",
            json!({
                "op": row.name,
                "max_rel_err": row.max_rel_err,
                "tolerance": row.tolerance,
                "passed": row.passed(),
            })
        );
    }
    if !all_passed {
        return Err(Error::numeric(
            "gradient check failed; see per-op results above".to_string(),
        ));
    }
    Ok(())
}

fn cmd_ablate(
    config: &Option<PathBuf>,
    seed: Option<u64>,
    out: &Option<PathBuf>,
    iterations: Option<u64>,
) -> Result<()> {
    let run = load_run_config(config)?;
    let out_root = out.clone().unwrap_or_else(|| run.out_dir.clone());
    let manifest_x = DatasetManifest::load(&run.manifest_x)?;
    let manifest_y = DatasetManifest::load(&run.manifest_y)?;
    let mut summary = Vec::new();
    for row in AblationName::ROWS {
        let mut training = run.training.clone();
        if let Some(s) = seed {
            training.seed = s;
        }
        if let Some(n) = iterations {
            training.iterations = n;
        }
        row.apply(&mut training);
        let row_dir = out_root.join(row.label());
        eprintln!("ablate: running {}", row.label());
        let (state, _) = train_loop(&manifest_x, &manifest_y, &training, &row_dir, None)?;
        let value = toy_fad(&state, &training, &manifest_x, &manifest_y)?;
        summary.push(json!({ "ablation": row.label(), "fad": value }));
    }
    println!("{}", serde_json::Value::Array(summary));
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::SynthData { config, out, seed } => cmd_synth_data(&config, &out, seed),
        Command::Train { config, seed, out, iterations, ablation, resume } => {
            cmd_train(&config, seed, &out, iterations, ablation, &resume)
        }
        Command::Transfer { config, source_checkpoint, seed, out, iterations } => {
            cmd_transfer(&config, &source_checkpoint, seed, &out, iterations)
        }
        Command::Generate { checkpoint, direction, input, output } => {
            cmd_generate(&checkpoint, direction.into(), &input, &output)
        }
        Command::Evaluate { real, generated, metric, embedder, checkpoint } => {
            cmd_evaluate(&real, &generated, metric, embedder, &checkpoint)
        }
        Command::GradCheck { seed, rounds } => cmd_grad_check(seed, rounds),
        Command::Ablate { config, seed, out, iterations } => {
            cmd_ablate(&config, seed, &out, iterations)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Numeric(_) => 4,
                _ => 3,
            };
            ExitCode::from(code)
        }
    }
}

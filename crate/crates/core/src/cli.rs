//! The `gpt-stain` command line.
//!
//! Failures print a single line `error[<code>]: <message>` on stderr and
//! exit with 2 (usage), 3 (data) or 4 (non-finite values or a failed
//! gradient check).

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data_io::{load_image, write_pgm, write_synthetic_dataset, Manifest, Split, SynthOptions};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalOptions};
use crate::gradcheck;
use crate::inference::{predict_image, Prediction};
use crate::network::{NetworkConfig, Reduction};
use crate::tensor::{write_gptt, RawTensor};
use crate::training::{train, Precision, RunOptions, TrainConfig};

#[derive(Debug, Parser)]
#[command(
    name = "gpt-stain",
    version,
    about = "Global pixel transformers for virtual staining"
)]
pub struct Cli {
    /// Worker threads for the numeric kernels; 1 keeps every run
    /// bit-reproducible.
    #[arg(long, global = true, default_value_t = 1)]
    pub threads: usize,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic dataset and its manifest.
    Synth(SynthArgs),
    /// Train a network on a manifest.
    Train(TrainArgs),
    /// Predict whole images with a trained checkpoint.
    Predict(PredictArgs),
    /// Score predictions against manifest targets.
    Eval(EvalArgs),
    /// Finite-difference check of every differentiable op and a tiny network.
    Gradcheck(GradcheckArgs),
    /// Print a checkpoint's config and stage shapes.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Number of samples to generate.
    #[arg(long, default_value_t = 4)]
    pub samples: usize,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    /// Seed of the scene generator.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Tasks to render, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,1")]
    pub tasks: Vec<usize>,
    /// Number of task slots; defaults to one past the largest rendered task.
    #[arg(long)]
    pub task_count: Option<usize>,
    /// Put every n-th sample in the test split (0: all training).
    #[arg(long, default_value_t = 0)]
    pub test_every: usize,
    /// Leave one task unlabeled per sample to exercise masking.
    #[arg(long)]
    pub partial_labels: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest (JSON).
    #[arg(long)]
    pub manifest: PathBuf,
    /// JSON file with optional `network` and `train` objects.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Network preset used when the config file has no `network` entry.
    #[arg(long, default_value = "tiny")]
    pub preset: String,
    /// Directory for loss.csv and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Overrides the training seed (initialization and sampling).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the number of optimizer steps.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Overrides the Adam learning rate.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Overrides the batch size.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Checkpoint interval in steps (0: final checkpoint only).
    #[arg(long)]
    pub checkpoint_every: Option<u64>,
    /// Overrides the floating-point precision (32 or 64 bit).
    #[arg(long)]
    pub precision: Option<Precision>,
    /// Continue from this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Print every step's loss on stderr.
    #[arg(long)]
    pub verbose: bool,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    /// Trained model (.gptc).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// A single `.pgm` or `.gptt` image; outputs go directly under --out.
    #[arg(long, conflicts_with = "manifest", required_unless_present = "manifest")]
    pub image: Option<PathBuf>,
    /// Predict every sample of a manifest split into `<out>/<id>/`.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Manifest split to predict.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Output directory for PGM renderings and distributions.gptt.
    #[arg(long)]
    pub out: PathBuf,
    /// Window stride in pixels [default: half the patch, 64 for the
    /// default network].
    #[arg(long)]
    pub step: Option<usize>,
    /// Rendering to write; both when omitted.
    #[arg(long, value_enum)]
    pub render: Option<Reduction>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Dataset manifest holding the targets.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Directory written by `predict --manifest`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Where report.json, table.txt and the confusion CSVs go.
    #[arg(long)]
    pub out: PathBuf,
    /// Manifest split to score.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    /// Pixels drawn per repetition.
    #[arg(long, default_value_t = 10_000)]
    pub sample_size: usize,
    /// Independent pixel samples for the Pearson mean and std.
    #[arg(long, default_value_t = 30)]
    pub repetitions: usize,
    /// Master seed of the pixel sampling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Rendering whose pixels are scored.
    #[arg(long, value_enum, default_value_t = Reduction::Expectation)]
    pub render: Reduction,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum Scale {
    /// The gradient-check network (patch 16, four intensity classes).
    Tiny,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Network size for the end-to-end rows.
    #[arg(long, value_enum, default_value_t = Scale::Tiny)]
    pub scale: Scale,
    /// Seed for inputs and initialization.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// Checkpoint to describe (.gptc).
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Also list every stored tensor.
    #[arg(long)]
    pub params: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitArg {
    Train,
    Test,
    All,
}

impl SplitArg {
    fn split(self) -> Option<Split> {
        match self {
            SplitArg::Train => Some(Split::Train),
            SplitArg::Test => Some(Split::Test),
            SplitArg::All => None,
        }
    }
}

/// Contents of a `--config` file.
#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub network: Option<NetworkConfig>,
    pub train: Option<TrainConfig>,
}

/// Parses the process arguments, runs the command and returns the exit code.
pub fn main() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error[{}]: {msg}", e.exit_code());
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(Error::InvalidArgument("--threads must be at least 1".into()));
    }
    // A second call in the same process keeps the first pool.
    let _ = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build_global();
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train_cmd(a),
        Command::Predict(a) => predict(a),
        Command::Eval(a) => eval(a),
        Command::Gradcheck(a) => gradcheck_cmd(a),
        Command::Inspect(a) => inspect(a),
    }
}

fn synth(a: SynthArgs) -> Result<()> {
    let task_count = a
        .task_count
        .unwrap_or_else(|| a.tasks.iter().max().map_or(1, |t| t + 1));
    if let Some(t) = a.tasks.iter().find(|&&t| t >= task_count) {
        return Err(Error::InvalidArgument(format!(
            "task {t} outside 0..{task_count}"
        )));
    }
    let manifest = write_synthetic_dataset(
        &a.out,
        &SynthOptions {
            samples: a.samples,
            size: a.size,
            seed: a.seed,
            task_count,
            tasks: a.tasks,
            test_every: a.test_every,
            partial_labels: a.partial_labels,
        },
    )?;
    println!(
        "wrote {} samples ({} tasks) to {}",
        manifest.samples.len(),
        manifest.task_count,
        a.out.join("manifest.json").display()
    );
    Ok(())
}

fn read_config(path: &Path) -> Result<ConfigFile> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::InvalidArgument(format!("{}: {e}", path.display())))
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let file = a
        .config
        .as_deref()
        .map(read_config)
        .transpose()?
        .unwrap_or_default();
    let network = match file.network {
        Some(n) => n,
        None => {
            let mut n = NetworkConfig::preset(&a.preset)?;
            n.task_count = manifest.task_count;
            let first = manifest
                .samples
                .first()
                .ok_or_else(|| Error::Data("manifest has no samples".into()))?;
            n.input_channels = load_image(manifest.resolve(&first.input))?.shape().c;
            n
        }
    };
    if network.task_count != manifest.task_count {
        return Err(Error::InvalidConfig(format!(
            "network predicts {} tasks, manifest has {}",
            network.task_count, manifest.task_count
        )));
    }
    let mut config = file.train.unwrap_or_else(|| {
        if a.preset == "tiny" {
            TrainConfig::tiny()
        } else {
            TrainConfig::default()
        }
    });
    if let Some(s) = a.seed {
        config.seed = s;
    }
    if let Some(s) = a.steps {
        config.max_steps = s;
    }
    if let Some(lr) = a.lr {
        config.learning_rate = lr;
    }
    if let Some(b) = a.batch_size {
        config.batch_size = b;
    }
    if let Some(c) = a.checkpoint_every {
        config.checkpoint_every = c;
    }
    if let Some(p) = a.precision {
        config.precision = p;
    }
    network.validate()?;
    config.validate()?;
    let summary = train(
        &manifest,
        &network,
        &config,
        &RunOptions {
            out: a.out.clone(),
            resume: a.resume,
            verbose: a.verbose,
        },
    )?;
    let losses: Vec<f64> = summary.losses.iter().map(|r| r.loss).collect();
    let k = losses.len().clamp(1, 10);
    let head = losses.iter().take(k).sum::<f64>() / k as f64;
    let tail = losses.iter().rev().take(k).sum::<f64>() / k as f64;
    println!(
        "{} steps; mean loss first {k}: {head:.5}, last {k}: {tail:.5}; model: {}",
        losses.len(),
        summary.final_checkpoint.display()
    );
    Ok(())
}

fn write_prediction(pred: &Prediction<f32>, dir: &Path, render: Option<Reduction>) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let renders = match render {
        Some(r) => vec![r],
        None => vec![Reduction::Argmax, Reduction::Expectation],
    };
    for task in 0..pred.task_count {
        for &r in &renders {
            let img = pred.render(task, r)?;
            write_pgm(dir.join(format!("task{task}_{}.pgm", r.name())), &img)?;
        }
    }
    let s = pred.distributions.shape();
    let raw = RawTensor::new(
        vec![s.h, s.w, pred.task_count, pred.value_classes],
        pred.distributions.data().to_vec(),
    )?;
    write_gptt(dir.join("distributions.gptt"), &raw)
}

fn predict(a: PredictArgs) -> Result<()> {
    let net = Checkpoint::load(&a.checkpoint)?.network::<f32>()?;
    let jobs: Vec<(PathBuf, PathBuf)> = match (&a.image, &a.manifest) {
        (Some(image), _) => vec![(image.clone(), a.out.clone())],
        (None, Some(m)) => {
            let manifest = Manifest::load(m)?;
            let jobs: Vec<_> = manifest
                .split(a.split.split())
                .map(|s| (manifest.resolve(&s.input), a.out.join(&s.id)))
                .collect();
            if jobs.is_empty() {
                return Err(Error::Data("no samples in the selected split".into()));
            }
            jobs
        }
        (None, None) => unreachable!("clap requires --image or --manifest"),
    };
    for (image, dir) in jobs {
        let img = load_image(&image)?;
        let pred = predict_image(&net, &img, a.step.unwrap_or(net.config.patch / 2))?;
        write_prediction(&pred, &dir, a.render)?;
        println!(
            "{}: {} windows -> {}",
            image.display(),
            pred.windows,
            dir.display()
        );
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let manifest = Manifest::load(&a.manifest)?;
    let opts = EvalOptions {
        sample_size: a.sample_size,
        repetitions: a.repetitions,
        seed: a.seed,
        render: a.render,
    };
    let report = evaluate(&manifest, &a.pred, a.split.split(), &opts)?;
    report.write(&a.out)?;
    print!("{}", report.table());
    Ok(())
}

fn gradcheck_cmd(a: GradcheckArgs) -> Result<()> {
    let config = match a.scale {
        Scale::Tiny => NetworkConfig::gradcheck(),
    };
    let rows = gradcheck::run(&config, a.seed)?;
    print!("{}", gradcheck::table(&rows));
    let failed = rows.iter().filter(|r| !r.passed()).count();
    if failed > 0 {
        return Err(Error::CheckFailed(format!(
            "gradient check: {failed} of {} rows above tolerance",
            rows.len()
        )));
    }
    Ok(())
}

fn inspect(a: InspectArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let net = ck.network::<f32>()?;
    println!("{}", serde_json::to_string_pretty(&ck.config)?);
    if let Some(t) = &ck.train {
        println!("{}", serde_json::to_string_pretty(t)?);
    }
    println!("step {}", ck.step);
    println!("{:<10} {:>8} {:>9}", "stage", "spatial", "channels");
    for s in ck.config.ledger() {
        println!("{:<10} {:>8} {:>9}", s.stage, s.spatial, s.channels);
    }
    println!("trainable parameters {}", ck.config.parameter_count());
    if a.params {
        for (name, t, kind) in net.params.iter() {
            println!("{name:<36} {:?} {}", kind, t.shape());
        }
    }
    Ok(())
}

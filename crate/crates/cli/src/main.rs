use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use care::checkpoint::Checkpoint;
use care::commands::{self, TrainOptions};
use care::corpus::load_schema;
use care::{Failure, Result};
use care_core::metrics::MatchMode;
use care_core::CareConfig;
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "care", version, about = "Joint entity and relation extraction with co-attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model and keep the best dev checkpoint.
    Train(TrainArgs),
    /// Score a checkpoint on an annotated corpus.
    Eval(InferArgs),
    /// Write decoded predictions for a corpus.
    Predict(PredictArgs),
    /// Run the component ablations and the depth sweep.
    Ablate(TrainArgs),
    /// Write the synthetic toy corpus and its schema.
    Synth {
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, default_value_t = 20)]
        n: usize,
        #[arg(long, default_value_t = care_core::synthetic::DEFAULT_SEED)]
        seed: u64,
    },
}

/// Every model hyperparameter as an optional override.
#[derive(Args, Default)]
struct ConfigArgs {
    /// key=value file; flags given here take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_task: Option<usize>,
    #[arg(long)]
    d_share: Option<usize>,
    #[arg(long)]
    d_dist: Option<usize>,
    #[arg(long)]
    distance_clamp_k: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    kernel_size: Option<usize>,
    #[arg(long)]
    use_distance: Option<bool>,
    #[arg(long)]
    use_shared_in_classifier: Option<bool>,
    #[arg(long)]
    use_coattention: Option<bool>,
    /// `toy` or `archive:<path>`.
    #[arg(long)]
    encoder_provider: Option<String>,
    #[arg(long)]
    max_len: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    threshold: Option<f64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<CareConfig> {
        let mut cfg = CareConfig::default();
        if let Some(path) = &self.config {
            let text = fs::read_to_string(path).map_err(|e| Failure::io(path, e))?;
            cfg = CareConfig::from_kv(cfg, &text).map_err(|e| Failure::Usage(format!("{}: {e}", path.display())))?;
        }
        let flags: [(&str, Option<String>); 17] = [
            ("d_model", self.d_model.map(|v| v.to_string())),
            ("d_task", self.d_task.map(|v| v.to_string())),
            ("d_share", self.d_share.map(|v| v.to_string())),
            ("d_dist", self.d_dist.map(|v| v.to_string())),
            ("distance_clamp_k", self.distance_clamp_k.map(|v| v.to_string())),
            ("n_layers", self.n_layers.map(|v| v.to_string())),
            ("kernel_size", self.kernel_size.map(|v| v.to_string())),
            ("use_distance", self.use_distance.map(|v| v.to_string())),
            ("use_shared_in_classifier", self.use_shared_in_classifier.map(|v| v.to_string())),
            ("use_coattention", self.use_coattention.map(|v| v.to_string())),
            ("encoder_provider", self.encoder_provider.clone()),
            ("max_len", self.max_len.map(|v| v.to_string())),
            ("lr", self.lr.map(|v| format!("{v:?}"))),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("epochs", self.epochs.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("threshold", self.threshold.map(|v| format!("{v:?}"))),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    train: PathBuf,
    #[arg(long)]
    dev: PathBuf,
    #[arg(long)]
    schema: PathBuf,
    #[arg(long)]
    out_dir: PathBuf,
    /// Matching mode for dev scores.
    #[arg(long, default_value = "strict")]
    mode: MatchMode,
    /// Archive for the dev corpus when the encoder provider is an archive.
    #[arg(long)]
    dev_archive: Option<PathBuf>,
    /// Also score the training set each epoch.
    #[arg(long)]
    eval_train: bool,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[arg(long, short)]
    quiet: bool,
    #[command(flatten)]
    config: ConfigArgs,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    /// Reject the run unless this schema equals the checkpoint's.
    #[arg(long)]
    schema: Option<PathBuf>,
    /// Archive for `corpus` when the checkpoint uses archived embeddings.
    #[arg(long)]
    archive: Option<PathBuf>,
    #[arg(long, default_value = "strict")]
    mode: MatchMode,
    /// Write the scores as JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PredictArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    schema: Option<PathBuf>,
    #[arg(long)]
    archive: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Attach cell probabilities to every mention and triplet.
    #[arg(long)]
    scores: bool,
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Failure::io(path, e))
}

fn run_train(a: &TrainArgs, ablate: bool) -> Result<()> {
    let config = a.config.resolve()?;
    let schema = load_schema(&a.schema)?;
    let train = commands::load_items(&schema, &a.train, &config, None)?;
    let dev = commands::load_items(&schema, &a.dev, &config, a.dev_archive.as_deref())?;
    if ablate {
        let rows = commands::ablate(&config, &schema, &train, &dev, a.mode, &a.out_dir, !a.quiet)?;
        println!("{:<10} {:<14} {:>10} {:>8} {:>8}", "group", "setting", "params", "ner_f1", "re_f1");
        for r in rows {
            println!("{:<10} {:<14} {:>10} {:>8.4} {:>8.4}", r.group, r.setting, r.parameters, r.ner_f1, r.re_f1);
        }
        return Ok(());
    }
    let resume = a.resume.as_deref().map(Checkpoint::load).transpose()?;
    let report = commands::train(TrainOptions {
        config,
        schema,
        train: &train,
        dev: &dev,
        mode: a.mode,
        out_dir: a.out_dir.clone(),
        eval_train: a.eval_train,
        resume,
        verbose: !a.quiet,
    })?;
    println!("parameters   {}", report.parameters);
    println!(
        "best epoch   {} (dev ner f1 {:.4}, re f1 {:.4})",
        report.best_epoch, report.best_dev.0.f1, report.best_dev.1.f1
    );
    println!("checkpoint   {}", report.best_path.display());
    println!("metric log   {}", report.metrics_path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => run_train(&a, false),
        Command::Ablate(a) => run_train(&a, true),
        Command::Eval(a) => {
            let (ck, items) = commands::load_for_inference(&a.checkpoint, &a.corpus, a.schema.as_deref(), a.archive.as_deref())?;
            let report = commands::eval(&ck, &items, a.mode)?;
            println!("{:<5} {:>9} {:>9} {:>9}", a.mode.to_string(), "precision", "recall", "f1");
            for (task, p) in [("ner", &report.ner), ("re", &report.re)] {
                println!("{task:<5} {:>9.4} {:>9.4} {:>9.4}", p.precision, p.recall, p.f1);
            }
            if let Some(out) = &a.out {
                write(out, &(serde_json::to_string_pretty(&report).expect("report serializes") + "\n"))?;
            }
            Ok(())
        }
        Command::Predict(a) => {
            let (ck, items) = commands::load_for_inference(&a.checkpoint, &a.corpus, a.schema.as_deref(), a.archive.as_deref())?;
            write(&a.out, &commands::predict(&ck, &items, a.scores)?)?;
            println!("wrote {} records to {}", items.len(), a.out.display());
            Ok(())
        }
        Command::Synth { out_dir, n, seed } => {
            let (corpus, schema) = commands::synth(&out_dir, n, seed)?;
            println!("{}\n{}", corpus.display(), schema.display());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

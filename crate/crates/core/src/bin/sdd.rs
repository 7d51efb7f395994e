//! `sdd`: generate synthetic rides, train and evaluate detectors, and run the
//! detection stream.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use sdd_core::eval::{Orientation, DEFAULT_PERCENTILE};
use sdd_core::losses::LossKind;
use sdd_core::models::{FusionConfig, Variant};
use sdd_core::pipeline::dataset::{read_recordings, write_dataset, Extractor, WindowSample};
use sdd_core::pipeline::experiment::{
    checkpoint_loss, evaluate_model, holdout_split, load_model, save_model, score, train_model, EvalSettings, TrainOptions,
};
use sdd_core::pipeline::report::{history_csv, loss_screen, loss_screen_csv, read_reports, summary_markdown};
use sdd_core::pipeline::stream::{open_sink, run_stream, Decision, Detector};
use sdd_core::synthgen::{gen_dataset, DatasetSpec};
use sdd_core::{Error, Result};

#[derive(Parser)]
#[command(name = "sdd", version, about = "Multi-modal small-damage detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset of event containers.
    Generate(GenerateArgs),
    /// Train an autoencoder on one damage type.
    Train(TrainArgs),
    /// Score a dataset and write the evaluation report.
    Eval(EvalArgs),
    /// Compare the four reconstruction losses on one model.
    LossScreen(LossScreenArgs),
    /// Tabulate evaluation reports as markdown.
    Report(ReportArgs),
    /// Run the detection stream over a dataset.
    Run(RunArgs),
}

#[derive(Args)]
struct GenerateArgs {
    /// Dataset spec (JSON); flags override its fields.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_damage: Option<usize>,
    #[arg(long)]
    n_background: Option<usize>,
}

/// Model and optimizer settings shared by `train` and `loss-screen`.
#[derive(Args)]
struct ModelArgs {
    /// Training options (JSON); flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<Variant>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Encoder stage widths, e.g. `256,128`.
    #[arg(long, value_delimiter = ',')]
    filters: Option<Vec<usize>>,
    #[arg(long)]
    latent: Option<usize>,
    /// Damage category to learn.
    #[arg(long)]
    category: Option<String>,
    #[arg(long)]
    no_augment: bool,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    loss: Option<LossKind>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Training curve CSV; `<out>.history.csv` by default.
    #[arg(long)]
    history: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    report: PathBuf,
    #[arg(long)]
    roc_csv: Option<PathBuf>,
    /// Scoring loss; the training loss by default.
    #[arg(long)]
    loss: Option<LossKind>,
    /// Background set for the thresholds; the evaluated set by default.
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PERCENTILE)]
    threshold_percentile: f64,
    /// Leave timing fields out so reports compare byte for byte.
    #[arg(long)]
    no_timing: bool,
}

#[derive(Args)]
struct LossScreenArgs {
    #[command(flatten)]
    model: ModelArgs,
    #[arg(long)]
    data: PathBuf,
    /// Test set; by default half the damage windows of `--data` plus its
    /// backgrounds.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// `file:PATH` or `http://URL`.
    #[arg(long)]
    sink: String,
    /// Labeled set for the modality choice and threshold; `--data` by default.
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_PERCENTILE)]
    threshold_percentile: f64,
    #[arg(long)]
    loss: Option<LossKind>,
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(Error::at(path))?;
    serde_json::from_slice(&bytes).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(Error::at(path))
}

fn samples(dir: &Path) -> Result<Vec<WindowSample>> {
    let recs = read_recordings(dir)?;
    let s = Extractor::default().all_samples(&recs)?;
    log::info!("{}: {} recordings, {} windows", dir.display(), recs.len(), s.len());
    Ok(s)
}

impl ModelArgs {
    fn options(&self) -> Result<TrainOptions> {
        let mut o: TrainOptions = match &self.config {
            Some(p) => read_json(p)?,
            None => TrainOptions::default(),
        };
        if let Some(v) = self.model {
            o.model.variant = v;
        }
        if let Some(f) = &self.filters {
            o.model.stage_filters = <[usize; 2]>::try_from(f.as_slice())
                .map_err(|_| Error::Config(format!("--filters takes two widths, got {}", f.len())))?;
        }
        if let Some(l) = self.latent {
            o.model.latent_channels = l;
        }
        if let Some(e) = self.epochs {
            o.train.epochs = e;
        }
        if let Some(lr) = self.lr {
            o.train.learning_rate = lr;
        }
        if let Some(b) = self.batch {
            o.train.batch_size = b;
        }
        if let Some(s) = self.seed {
            o.train.seed = s;
        }
        if let Some(c) = &self.category {
            o.train_category = c.clone();
        }
        if self.no_augment {
            o.augment = false;
        }
        o.model.validate()?;
        o.train.validate()?;
        Ok(o)
    }
}

fn generate(a: GenerateArgs) -> Result<()> {
    let mut spec: DatasetSpec = match &a.spec {
        Some(p) => read_json(p)?,
        None => DatasetSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.n_damage {
        spec.n_damage = n;
    }
    if let Some(n) = a.n_background {
        spec.n_background = Some(n);
        spec.imbalance = None;
    }
    spec.validate()?;
    let data = gen_dataset(&spec)?;
    write_dataset(&data, &a.out)?;
    log::info!("wrote {} recordings to {}", data.recordings.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let mut opts = a.model.options()?;
    if let Some(l) = a.loss {
        opts.train.loss = l.id().to_string();
    }
    opts.loss()?;
    let (model, history) = train_model(&samples(&a.data)?, &opts)?;
    save_model(&a.out, &model, Some(&opts))?;
    let hist = a.history.unwrap_or_else(|| a.out.with_extension("history.csv"));
    write(&hist, &history_csv(&history))?;
    log::info!("saved {} ({} params) to {}", model.id(), model.param_count(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let (model, meta) = load_model(&a.ckpt)?;
    let loss = match a.loss {
        Some(l) => l,
        None => checkpoint_loss(&meta)?,
    };
    let calib = match &a.calibration {
        Some(dir) => Some(score(&model, &samples(dir)?, loss)?.0),
        None => None,
    };
    let settings = EvalSettings {
        loss,
        orientation: Orientation::default(),
        percentile: a.threshold_percentile,
        calibration: calib.as_ref(),
    };
    let report = evaluate_model(&model, &samples(&a.data)?, &settings)?;
    write(&a.report, &report.to_canonical_json(!a.no_timing)?)?;
    if let Some(p) = &a.roc_csv {
        write(p, &report.roc_csv())?;
    }
    println!(
        "{}: auc_acc {} auc_aud {} auc_best {:.4}",
        report.model_id,
        report.auc_acc.map_or("-".into(), |v| format!("{v:.4}")),
        report.auc_aud.map_or("-".into(), |v| format!("{v:.4}")),
        report.auc_best
    );
    Ok(())
}

fn screen(a: LossScreenArgs) -> Result<()> {
    let mut opts = a.model.options()?;
    if a.model.model.is_none() && a.model.config.is_none() {
        opts.model = FusionConfig { variant: Variant::MonoAud, ..opts.model };
    }
    let pool = samples(&a.data)?;
    let (train, test) = match &a.test {
        Some(dir) => (pool, samples(dir)?),
        None => holdout_split(&pool, 0.5, opts.train.seed)?,
    };
    let rows = loss_screen(&train, &test, &opts, &EvalSettings::default())?;
    write(&a.out, &loss_screen_csv(&rows))?;
    for r in &rows {
        println!("{}: auc {:.4}", r.loss.id(), r.auc);
    }
    Ok(())
}

fn report(a: ReportArgs) -> Result<()> {
    write(&a.out, &summary_markdown(&read_reports(&a.inputs)?))
}

fn run(a: RunArgs) -> Result<()> {
    let (model, meta) = load_model(&a.ckpt)?;
    let loss = match a.loss {
        Some(l) => l,
        None => checkpoint_loss(&meta)?,
    };
    let calib = samples(a.calibration.as_deref().unwrap_or(&a.data))?;
    let detector = Detector::calibrate(model, loss, &calib, a.threshold_percentile, Orientation::default())?;
    let mut sink = open_sink(&a.sink)?;
    let recs = read_recordings(&a.data)?;
    let records = run_stream(recs.into_iter().map(Ok), &detector, sink.as_mut())?;
    let damage = records.iter().filter(|r| r.decision == Decision::Damage).count();
    let failed = records.iter().filter(|r| r.delivery_failed).count();
    println!(
        "{} windows, {damage} damage decisions ({} modality, threshold {:.6}), {failed} undelivered",
        records.len(),
        detector.modality,
        detector.threshold
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Generate(a) => generate(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::LossScreen(a) => screen(a),
        Command::Report(a) => report(a),
        Command::Run(a) => run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e {
                Error::Config(_) | Error::InvalidArgument(_) => 1,
                _ => 2,
            })
        }
    }
}

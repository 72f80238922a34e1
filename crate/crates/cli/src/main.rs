use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{CommandFactory, Parser, Subcommand, ValueEnum};

use forgeloc::error::{Error, Result};
use forgeloc::imageio;
use forgeloc::metrics::{AucMode, LogBase, MetricOptions};
use forgeloc::selfcheck;
use forgeloc::synth::dataset::{dataset_build, load_manifest, DatasetSpec, SPLITS};
use forgeloc::synth::distort::Distortion;
use forgeloc::synth::Sample;
use forgeloc::tensor::Tensor;
use forgeloc::train::ablate::{self, Axis};
use forgeloc::train::eval::{evaluate, robustness, sweep_csv};
use forgeloc::train::{Checkpoint, TrainConfig, Trainer};

mod selftest;

#[derive(Parser)]
#[command(name = "forgeloc", version, about = "Train and run a forgery localization network")]
struct Cli {
    /// Run on a single thread for bit-exact reproduction.
    #[arg(long, global = true)]
    deterministic: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic forgery dataset.
    Synth(SynthArgs),
    /// Train a model.
    Train(TrainArgs),
    /// Predict a forgery heatmap for one image.
    Infer(InferArgs),
    /// Score a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Score a checkpoint under blur, JPEG and noise distortions.
    Robustness(RobustnessArgs),
    /// Train every variant of one ablation axis over several seeds.
    Ablate(AblateArgs),
    /// Finite-difference gradient checks.
    Gradcheck(GradcheckArgs),
    /// Quick end-to-end sanity checks.
    Selftest,
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Dataset spec (TOML); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    train: Option<usize>,
    #[arg(long)]
    val: Option<usize>,
    #[arg(long)]
    test: Option<usize>,
    /// Square image side.
    #[arg(long)]
    size: Option<usize>,
}

#[derive(clap::Args, Clone)]
struct ConfigArgs {
    /// Training config (TOML); flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base profile when no config file is given.
    #[arg(long, default_value = "toy")]
    profile: String,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
}

impl ConfigArgs {
    fn resolve(&self, deterministic: bool) -> Result<TrainConfig> {
        let mut cfg = match &self.config {
            Some(p) => TrainConfig::load(p)?,
            None => TrainConfig::profile(&self.profile)?,
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(e) = self.epochs {
            cfg.max_epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.lr = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.batch_size = b;
        }
        cfg.deterministic |= deterministic;
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(clap::Args)]
struct TrainArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Run directory for logs and checkpoints.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    config: ConfigArgs,
    /// Continue from a checkpoint; its config wins over config flags.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Stop once this many epochs are done (the run can be resumed).
    #[arg(long)]
    stop_after: Option<usize>,
}

#[derive(clap::Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    image: PathBuf,
    /// Heatmap output, PNG or PGM by extension.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum AucModeArg {
    PerImage,
    Pooled,
}

#[derive(clap::Args)]
struct DataArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Dataset directory written by `synth`.
    #[arg(long, required_unless_present = "manifest")]
    data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Explicit manifest; overrides --data/--split.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long, value_enum)]
    auc_mode: Option<AucModeArg>,
    /// Report the false-positive score in base 10.
    #[arg(long)]
    log10: bool,
}

impl DataArgs {
    fn manifest_path(&self) -> Result<PathBuf> {
        if let Some(m) = &self.manifest {
            return Ok(m.clone());
        }
        if !SPLITS.contains(&self.split.as_str()) {
            return Err(Error::InvalidArgument(format!("unknown split {:?}", self.split)));
        }
        let data = self.data.as_ref().expect("clap enforces --data or --manifest");
        Ok(data.join(&self.split).join("manifest.jsonl"))
    }

    fn options(&self, base: &MetricOptions) -> MetricOptions {
        let mut o = base.clone();
        if let Some(t) = self.threshold {
            o.threshold = t;
        }
        match self.auc_mode {
            Some(AucModeArg::PerImage) => o.auc_mode = AucMode::PerImage,
            Some(AucModeArg::Pooled) => o.auc_mode = AucMode::Pooled,
            None => {}
        }
        if self.log10 {
            o.log_base = LogBase::Ten;
        }
        o
    }
}

#[derive(clap::Args)]
struct EvalArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Also write the JSON report here.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(clap::Args)]
struct RobustnessArgs {
    #[command(flatten)]
    data: DataArgs,
    /// CSV output.
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct AblateArgs {
    #[arg(long, value_parser = parse_axis)]
    axis: Axis,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[command(flatten)]
    config: ConfigArgs,
    /// Directory for the per-run CSV and summary table.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_axis(s: &str) -> std::result::Result<Axis, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

#[derive(clap::Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Sampled parameter entries per full-network trial.
    #[arg(long, default_value_t = 20)]
    coords: usize,
    /// Also write the suite reports as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    if cli.deterministic {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(1).build_global() {
            log::warn!("could not pin the thread pool: {e}");
        }
    }
    if let Err(missing) = check_inputs(&cli.command) {
        eprintln!("error: {} does not exist\n", missing.display());
        let _ = Cli::command().print_help();
        return ExitCode::from(2);
    }
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Input paths that must exist before a command starts.
fn check_inputs(cmd: &Command) -> std::result::Result<(), PathBuf> {
    let mut paths: Vec<PathBuf> = Vec::new();
    let mut data = |d: &DataArgs| {
        paths.push(d.checkpoint.clone());
        if let Ok(m) = d.manifest_path() {
            paths.push(m);
        }
    };
    match cmd {
        Command::Train(a) => {
            paths.push(a.data.clone());
            paths.extend(a.config.config.clone());
            paths.extend(a.resume.clone());
        }
        Command::Synth(a) => paths.extend(a.config.clone()),
        Command::Infer(a) => paths.extend([a.checkpoint.clone(), a.image.clone()]),
        Command::Eval(a) => data(&a.data),
        Command::Robustness(a) => data(&a.data),
        Command::Ablate(a) => {
            paths.push(a.data.clone());
            paths.extend(a.config.config.clone());
        }
        Command::Gradcheck(_) | Command::Selftest => {}
    }
    match paths.into_iter().find(|p| !p.exists()) {
        Some(p) => Err(p),
        None => Ok(()),
    }
}

fn run(cli: Cli) -> Result<ExitCode> {
    let det = cli.deterministic;
    match cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a, det),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Robustness(a) => sweep(a),
        Command::Ablate(a) => ablation(a, det),
        Command::Gradcheck(a) => gradcheck(a),
        Command::Selftest => selftest::run(),
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn synth(a: SynthArgs) -> Result<ExitCode> {
    let mut spec = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            toml::from_str(&text).map_err(|e| Error::Config(e.to_string()))?
        }
        None => DatasetSpec::default(),
    };
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    if let Some(n) = a.train {
        spec.train = n;
    }
    if let Some(n) = a.val {
        spec.val = n;
    }
    if let Some(n) = a.test {
        spec.test = n;
    }
    if let Some(s) = a.size {
        spec.height = s;
        spec.width = s;
    }
    let manifests = dataset_build(&spec, &a.out)?;
    for m in manifests {
        println!("{}", m.display());
    }
    Ok(ExitCode::SUCCESS)
}

fn split(data: &Path, name: &str) -> Result<Vec<Sample>> {
    load_manifest(&data.join(name).join("manifest.jsonl"))
}

fn train(a: TrainArgs, det: bool) -> Result<ExitCode> {
    let mut trainer = match &a.resume {
        Some(p) => {
            let t = Trainer::from_checkpoint(Checkpoint::load(p)?)?;
            log::info!("resuming at epoch {}", t.state.epochs_done);
            t
        }
        None => Trainer::new(a.config.resolve(det)?)?,
    };
    let train_set = split(&a.data, "train")?;
    let val_set = split(&a.data, "val")?;
    fs::create_dir_all(&a.out).map_err(|e| Error::Io {
        path: a.out.clone(),
        source: e,
    })?;
    write(&a.out.join("config.toml"), &trainer.config.to_toml()?)?;
    trainer.fit(&train_set, &val_set, Some(&a.out), a.stop_after)?;
    let s = &trainer.state;
    println!(
        "epochs {} best epoch {:?} best val pixel AUC {:?}{}",
        s.epochs_done,
        s.best_epoch,
        s.best_auc,
        if s.stopped_early { " (early stop)" } else { "" }
    );
    Ok(ExitCode::SUCCESS)
}

/// Network and weights stored in a checkpoint.
fn load_model(path: &Path) -> Result<Trainer> {
    Trainer::from_checkpoint(Checkpoint::load(path)?)
}

fn infer(a: InferArgs) -> Result<ExitCode> {
    let t = load_model(&a.checkpoint)?;
    let image = imageio::read_rgb(&a.image)?;
    let (_, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    t.net.encoder.config.check_input(h, w)?;
    let batch = Tensor::stack(&[image])?;
    let (map, probs) = t.net.predict(&t.store, batch)?;
    let map = map.reshape(&[h, w])?;
    imageio::write_gray(&a.out, &map)?;
    println!("{:.6}", probs[0]);
    Ok(ExitCode::SUCCESS)
}

fn load_eval(d: &DataArgs) -> Result<(Trainer, Vec<Sample>, MetricOptions)> {
    let t = load_model(&d.checkpoint)?;
    let samples = load_manifest(&d.manifest_path()?)?;
    let (h, w) = (samples[0].height(), samples[0].width());
    if samples.iter().any(|s| s.height() != h || s.width() != w) {
        return Err(Error::InvalidArgument("manifest mixes image sizes".into()));
    }
    t.net.encoder.config.check_input(h, w)?;
    let opts = d.options(&t.config.metrics);
    Ok((t, samples, opts))
}

fn eval(a: EvalArgs) -> Result<ExitCode> {
    let (t, samples, opts) = load_eval(&a.data)?;
    let report = evaluate(&t.net, &t.store, &samples, &opts, t.config.eval_batch_size)?;
    let json = serde_json::to_string_pretty(&report)?;
    println!("{json}");
    if let Some(p) = &a.json {
        write(p, &(json + "\n"))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn sweep(a: RobustnessArgs) -> Result<ExitCode> {
    let (t, samples, opts) = load_eval(&a.data)?;
    let rows = robustness(
        &t.net,
        &t.store,
        &samples,
        &Distortion::default_grid(),
        &opts,
        t.config.eval_batch_size,
    )?;
    let csv = sweep_csv(&rows);
    write(&a.out, &csv)?;
    print!("{csv}");
    Ok(ExitCode::SUCCESS)
}

fn ablation(a: AblateArgs, det: bool) -> Result<ExitCode> {
    let base = a.config.resolve(det)?;
    let train_set = split(&a.data, "train")?;
    let val_set = split(&a.data, "val")?;
    let test_set = split(&a.data, "test")?;
    let rows = ablate::ablate(a.axis, &base, &a.seeds, &train_set, &val_set, &test_set)?;
    let table = ablate::table(&ablate::summarize(&rows));
    print!("{table}");
    if let Some(dir) = &a.out {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.clone(),
            source: e,
        })?;
        write(&dir.join(format!("{}.csv", a.axis.name())), &ablate::rows_csv(&rows))?;
        write(&dir.join(format!("{}.txt", a.axis.name())), &table)?;
    }
    Ok(ExitCode::SUCCESS)
}

fn gradcheck(a: GradcheckArgs) -> Result<ExitCode> {
    let reports = selfcheck::all_suites(a.trials, a.coords)?;
    let mut ok = true;
    for r in &reports {
        ok &= r.passed;
        println!(
            "{:<5} {:<28} trials {:>4} checked {:>6} max rel err {:.3e} (tol {:.0e})",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.trials,
            r.checked,
            r.max_rel_err,
            r.tolerance
        );
    }
    if let Some(p) = &a.json {
        write(p, &(serde_json::to_string_pretty(&reports)? + "\n"))?;
    }
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}

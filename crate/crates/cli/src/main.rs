use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use wassercast_core::data::{self, Dataset, SuiteManifest};
use wassercast_core::experiment::{
    compare, evaluate, forecasts_csv, paths_jsonl, pretrain_base, report_from_evaluations,
    save_trained, train_on_datasets, write_compare_outputs, CompareOptions, ExperimentConfig,
};
use wassercast_core::seqmodel::{write_loss_curve, Checkpoint};
use wassercast_core::{Error, LossKind};

#[derive(Parser)]
#[command(name = "wassercast", version, about = "Tokenized forecasting with cross-entropy or Wasserstein training")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the datasets of a suite manifest as JSONL files.
    Generate {
        /// Suite manifest (TOML, one [[dataset]] table per dataset).
        #[arg(long, default_value = "suite/suite.toml")]
        suite: PathBuf,
        /// Output directory, created if missing.
        #[arg(long, default_value = "data")]
        out: PathBuf,
    },
    /// Train one model on one or more datasets.
    Train {
        /// Dataset file; may be repeated to train on the union of the series.
        #[arg(long, required = true)]
        dataset: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = LossArg::Ce)]
        loss: LossArg,
        /// Fine-tune from this checkpoint instead of a fresh model.
        #[arg(long, conflicts_with = "from_scratch")]
        base: Option<PathBuf>,
        /// Train from a fresh initialization (the default for `train`).
        #[arg(long)]
        from_scratch: bool,
        /// Directory for checkpoint.json and loss_curve.csv.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
    /// Forecast the held-out horizon of a dataset and score it.
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        dataset: PathBuf,
        /// Directory for metrics.csv and forecasts.csv.
        #[arg(long)]
        out: PathBuf,
        /// Also write every sample path to paths.jsonl.
        #[arg(long)]
        dump_paths: bool,
        #[command(flatten)]
        settings: Settings,
    },
    /// Train and evaluate every loss on every dataset and write delta tables.
    Compare {
        /// Dataset files; may be repeated. Ignored when --suite is given.
        #[arg(long)]
        dataset: Vec<PathBuf>,
        /// Generate the datasets from a suite manifest instead.
        #[arg(long)]
        suite: Option<PathBuf>,
        /// Comma-separated losses; defaults to the config's list.
        #[arg(long, value_enum, value_delimiter = ',')]
        losses: Vec<LossArg>,
        /// Fine-tune every loss from this checkpoint.
        #[arg(long, conflicts_with = "from_scratch")]
        base: Option<PathBuf>,
        /// Ignore the config's [pretrain] section and train every model
        /// from a fresh initialization.
        #[arg(long)]
        from_scratch: bool,
        /// Run up to this many losses in parallel.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
        /// Results directory, created if missing.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        settings: Settings,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum LossArg {
    Ce,
    W1,
    W2,
}

impl LossArg {
    fn name(self) -> &'static str {
        match self {
            LossArg::Ce => "ce",
            LossArg::W1 => "w1",
            LossArg::W2 => "w2",
        }
    }
}

/// Overrides applied on top of the config file.
#[derive(Args)]
struct Settings {
    /// Experiment config (TOML). Flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training steps (fine-tuning steps when starting from a base).
    #[arg(long)]
    steps: Option<usize>,
    /// Initial learning rate, decayed linearly to 0.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Seeds model init, training and sampling.
    #[arg(long)]
    seed: Option<u64>,
    /// Sample paths per forecast.
    #[arg(long)]
    n_paths: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// Number of value tokens.
    #[arg(long)]
    grid_d: Option<usize>,
    /// Lowest centroid, in mean-scaled units.
    #[arg(long, allow_hyphen_values = true)]
    grid_min: Option<f64>,
    /// Highest centroid, in mean-scaled units.
    #[arg(long, allow_hyphen_values = true)]
    grid_max: Option<f64>,
    #[arg(long)]
    context_length: Option<usize>,
    #[arg(long)]
    embed_dim: Option<usize>,
    #[arg(long)]
    num_layers: Option<usize>,
    #[arg(long)]
    num_heads: Option<usize>,
    /// Steps of base-model pretraining when the config has a [pretrain] section.
    #[arg(long)]
    pretrain_steps: Option<usize>,
    /// Use the root-taken Wasserstein distance rather than its p-th power.
    #[arg(long)]
    raw_wasserstein: bool,
}

impl Settings {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut c = match &self.config {
            Some(path) => ExperimentConfig::load(path)?,
            None => ExperimentConfig::default(),
        };
        set(&mut c.train.steps, self.steps);
        set(&mut c.train.lr, self.lr);
        set(&mut c.train.batch_size, self.batch_size);
        set(&mut c.sampling.n_paths, self.n_paths);
        set(&mut c.sampling.temperature, self.temperature);
        set(&mut c.grid.d, self.grid_d);
        set(&mut c.grid.y_min, self.grid_min);
        set(&mut c.grid.y_max, self.grid_max);
        set(&mut c.model.context_length, self.context_length);
        set(&mut c.model.embed_dim, self.embed_dim);
        set(&mut c.model.num_layers, self.num_layers);
        set(&mut c.model.num_heads, self.num_heads);
        if let Some(seed) = self.seed {
            c.model.seed = seed;
            c.train.seed = seed;
            c.sampling.seed = seed;
        }
        if let Some(pre) = c.pretrain.as_mut() {
            set(&mut pre.steps, self.pretrain_steps);
        }
        c.raw_wasserstein |= self.raw_wasserstein;
        Ok(c)
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).with_context(|| format!("cannot create {}", path.display()))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).with_context(|| format!("cannot write {}", path.display()))
}

fn load_base(path: Option<&Path>) -> Result<Option<Checkpoint>> {
    path.map(|p| Checkpoint::load(p).with_context(|| format!("cannot load base checkpoint {}", p.display())))
        .transpose()
}

fn cmd_generate(suite: &Path, out: &Path) -> Result<()> {
    let manifest = SuiteManifest::load(suite)?;
    let datasets = manifest.generate_all()?;
    create_dir(out)?;
    for ds in &datasets {
        data::save(ds, &out.join(format!("{}.jsonl", ds.name)))?;
    }
    write_file(&out.join("manifest.toml"), &manifest.to_toml()?)?;
    println!("wrote {} datasets to {}", datasets.len(), out.display());
    Ok(())
}

fn cmd_train(datasets: &[PathBuf], loss: LossArg, base: Option<&Path>, out: &Path, config: ExperimentConfig) -> Result<()> {
    let kind = LossKind::from_name(loss.name(), config.raw_wasserstein)?;
    let ds = datasets.iter().map(|p| data::load(p)).collect::<wassercast_core::Result<Vec<_>>>()?;
    let base = load_base(base)?;
    let mut config = config;
    if let Some(b) = &base {
        config.grid = b.grid;
    }
    config.validate()?;
    let base_model = base.as_ref().map(Checkpoint::to_model).transpose()?;
    let trained = train_on_datasets(&ds, &config, kind, base_model.as_ref())?;
    create_dir(out)?;
    save_trained(&trained, config.grid, &config.train_config(kind), &out.join("checkpoint.json"))?;
    write_loss_curve(&out.join("loss_curve.csv"), &trained.history)?;
    let last = trained.history.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "trained {} on {} for {} steps, final loss {last:.6}; wrote {}",
        kind.label(),
        ds.iter().map(|d| d.name.as_str()).collect::<Vec<_>>().join("+"),
        trained.history.len(),
        out.display()
    );
    Ok(())
}

fn cmd_evaluate(checkpoint: &Path, dataset: &Path, out: &Path, dump_paths: bool, config: ExperimentConfig) -> Result<()> {
    let ckpt = Checkpoint::load(checkpoint).with_context(|| format!("cannot load checkpoint {}", checkpoint.display()))?;
    let model = ckpt.to_model()?;
    let grid = ckpt.grid.build()?;
    let ds = data::load(dataset)?;
    let eval = evaluate(&model, &grid, &ds, &config.sampling)?;
    let report = report_from_evaluations(std::slice::from_ref(&eval))?;
    create_dir(out)?;
    write_file(&out.join("metrics.csv"), &report.to_csv())?;
    write_file(&out.join("forecasts.csv"), &forecasts_csv(&eval))?;
    if dump_paths {
        write_file(&out.join("paths.jsonl"), &paths_jsonl(&eval)?)?;
    }
    let s = &report.per_dataset[&ds.name];
    println!(
        "{}: MASE {:.4} (relative {:.4}), WQL {:.4} (relative {:.4}), {} series scored, {} excluded",
        ds.name, s.mase, s.rel_mase, s.wql, s.rel_wql, eval.included, eval.excluded
    );
    Ok(())
}

fn load_datasets(paths: &[PathBuf], suite: Option<&Path>) -> Result<Vec<Dataset>> {
    if let Some(suite) = suite {
        return Ok(SuiteManifest::load(suite)?.generate_all()?);
    }
    if paths.is_empty() {
        bail!(Error::Config("compare needs --suite or at least one --dataset".into()));
    }
    Ok(paths.iter().map(|p| data::load(p)).collect::<wassercast_core::Result<_>>()?)
}

struct CompareArgs<'a> {
    datasets: &'a [PathBuf],
    suite: Option<&'a Path>,
    losses: &'a [LossArg],
    base: Option<&'a Path>,
    from_scratch: bool,
    jobs: usize,
    out: &'a Path,
}

fn cmd_compare(args: CompareArgs<'_>, mut config: ExperimentConfig) -> Result<()> {
    if !args.losses.is_empty() {
        config.losses = args.losses.iter().map(|l| l.name().to_string()).collect();
    }
    let datasets = load_datasets(args.datasets, args.suite)?;
    if args.from_scratch {
        config.pretrain = None;
    }
    config.validate()?;
    let base = match (load_base(args.base)?, &config.pretrain) {
        (Some(ckpt), _) => {
            config.grid = ckpt.grid;
            config.pretrain = None;
            Some(ckpt.to_model()?)
        }
        (None, Some(pre)) => {
            let corpus = SuiteManifest::load(&pre.suite)?.generate_all()?;
            let trained = pretrain_base(&corpus, &config)?;
            let dir = args.out.join("base");
            create_dir(&dir)?;
            let tc = wassercast_core::TrainConfig {
                steps: pre.steps,
                lr_initial: pre.lr,
                batch_size: pre.batch_size,
                loss: LossKind::CrossEntropy,
                seed: pre.seed,
            };
            save_trained(&trained, config.grid, &tc, &dir.join("checkpoint.json"))?;
            write_loss_curve(&dir.join("loss_curve.csv"), &trained.history)?;
            Some(trained.model)
        }
        (None, None) => None,
    };
    let options = CompareOptions { jobs: args.jobs, base };
    let outcome = compare(&datasets, &config, &options)?;
    write_compare_outputs(&outcome, args.out)?;
    write_file(&args.out.join("config.toml"), &config.to_toml()?)?;
    for run in &outcome.runs {
        for (eval, trained) in run.evaluations.iter().zip(&run.trained) {
            let dir = args.out.join(run.loss.label());
            save_trained(trained, config.grid, &config.train_config(run.loss), &dir.join(format!("{}_checkpoint.json", eval.dataset)))?;
        }
    }
    let summary = std::fs::read_to_string(args.out.join("summary.txt")).unwrap_or_default();
    print!("{summary}");
    println!("wrote results to {}", args.out.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate { suite, out } => cmd_generate(&suite, &out),
        Command::Train {
            dataset,
            loss,
            base,
            from_scratch: _,
            out,
            settings,
        } => cmd_train(&dataset, loss, base.as_deref(), &out, settings.resolve()?),
        Command::Evaluate {
            checkpoint,
            dataset,
            out,
            dump_paths,
            settings,
        } => cmd_evaluate(&checkpoint, &dataset, &out, dump_paths, settings.resolve()?),
        Command::Compare {
            dataset,
            suite,
            losses,
            base,
            from_scratch,
            jobs,
            out,
            settings,
        } => cmd_compare(
            CompareArgs {
                datasets: &dataset,
                suite: suite.as_deref(),
                losses: &losses,
                base: base.as_deref(),
                from_scratch,
                jobs,
                out: &out,
            },
            settings.resolve()?,
        ),
    }
}

/// Machine-readable category of an error, taken from the first library
/// error in its chain.
fn category(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<Error>() {
            return e.category();
        }
        if cause.is::<std::io::Error>() {
            return "io";
        }
    }
    "internal"
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error[{}]: {err:#}", category(&err));
            ExitCode::from(match category(&err) {
                "config" => 2,
                "parse" | "io" => 3,
                "numeric" => 4,
                _ => 1,
            })
        }
    }
}


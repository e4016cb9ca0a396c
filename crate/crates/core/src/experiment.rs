//! End-to-end experiment plumbing: training on a dataset, evaluating a model
//! against the seasonal-naive baseline, and the CE vs Wasserstein comparison
//! across a suite of datasets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{split, Dataset};
use crate::error::{Error, Result};
use crate::forecast::{default_levels, forecast_series, SamplingConfig};
use crate::loss::LossKind;
use crate::metrics::{
    delta_table, mase, relative_and_aggregate, seasonal_naive, DeltaTable, Metric, MetricReport,
    RawScores, WqlAccumulator,
};
use crate::quantizer::{encode_values, Grid, GridSpec};
use crate::seqmodel::{train, write_loss_curve, Checkpoint, Model, ModelConfig, TrainConfig, TrainedModel};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchitectureConfig {
    pub context_length: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub seed: u64,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        ArchitectureConfig {
            context_length: m.context_length,
            embed_dim: m.embed_dim,
            num_layers: m.num_layers,
            num_heads: m.num_heads,
            seed: m.seed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSettings {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        TrainSettings {
            steps: t.steps,
            lr: t.lr_initial,
            batch_size: t.batch_size,
            seed: t.seed,
        }
    }
}

/// Cross-entropy pretraining of the shared base model that every loss is
/// then fine-tuned from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSettings {
    /// Suite manifest of the pretraining corpus. A relative path is taken
    /// relative to the config file.
    pub suite: PathBuf,
    #[serde(default = "default_pretrain_steps")]
    pub steps: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_pretrain_steps() -> usize {
    3000
}

fn default_lr() -> f64 {
    TrainConfig::default().lr_initial
}

fn default_batch_size() -> usize {
    TrainConfig::default().batch_size
}

/// All knobs of a train/evaluate/compare run. Serialized as TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub losses: Vec<String>,
    pub raw_wasserstein: bool,
    pub grid: GridSpec,
    pub model: ArchitectureConfig,
    pub train: TrainSettings,
    pub sampling: SamplingConfig,
    /// When set, `compare` fine-tunes from a base pretrained on this corpus
    /// instead of training each model from scratch.
    pub pretrain: Option<PretrainSettings>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            losses: vec!["ce".into(), "w1".into(), "w2".into()],
            raw_wasserstein: false,
            grid: GridSpec {
                d: 64,
                ..GridSpec::default()
            },
            model: ArchitectureConfig::default(),
            train: TrainSettings::default(),
            sampling: SamplingConfig::default(),
            pretrain: None,
        }
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: "<config>".into(),
            line: e
                .span()
                .map(|s| text[..s.start].lines().count().max(1))
                .unwrap_or(0),
            message: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config = Self::parse(&text).map_err(|e| match e {
            Error::Parse { line, message, .. } => Error::Parse {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        })?;
        if let (Some(pre), Some(dir)) = (config.pretrain.as_mut(), path.parent()) {
            if pre.suite.is_relative() {
                pre.suite = dir.join(&pre.suite);
            }
        }
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialize config: {e}")))
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            vocab_size: self.grid.d + 2,
            context_length: self.model.context_length,
            embed_dim: self.model.embed_dim,
            num_layers: self.model.num_layers,
            num_heads: self.model.num_heads,
            seed: self.model.seed,
        }
    }

    pub fn loss_kinds(&self) -> Result<Vec<LossKind>> {
        self.losses
            .iter()
            .map(|name| LossKind::from_name(name, self.raw_wasserstein))
            .collect()
    }

    pub fn train_config(&self, loss: LossKind) -> TrainConfig {
        TrainConfig {
            steps: self.train.steps,
            lr_initial: self.train.lr,
            batch_size: self.train.batch_size,
            loss,
            seed: self.train.seed,
        }
    }

    fn pretrain_config(&self, pre: &PretrainSettings) -> TrainConfig {
        TrainConfig {
            steps: pre.steps,
            lr_initial: pre.lr,
            batch_size: pre.batch_size,
            loss: LossKind::CrossEntropy,
            seed: pre.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.grid.build()?;
        self.model_config().validate()?;
        for kind in self.loss_kinds()? {
            self.train_config(kind).validate()?;
        }
        if let Some(pre) = &self.pretrain {
            self.pretrain_config(pre).validate()?;
        }
        if self.sampling.n_paths == 0 {
            return Err(Error::Config("n_paths must be >= 1".into()));
        }
        Ok(())
    }
}

/// Token sequences of the training slices, each scaled by its own
/// training-slice scale.
pub fn training_sequences(datasets: &[Dataset], grid: &Grid) -> Result<Vec<Vec<usize>>> {
    datasets
        .iter()
        .flat_map(|ds| &ds.series)
        .map(|ts| {
            let (train, _) = split(ts)?;
            Ok(encode_values(train, grid, train)?.tokens)
        })
        .collect()
}

/// Trains a model on `dataset`, either from a fresh initialization or by
/// fine-tuning `base`.
pub fn train_on_dataset(
    dataset: &Dataset,
    config: &ExperimentConfig,
    loss: LossKind,
    base: Option<&Model>,
) -> Result<TrainedModel> {
    train_on_datasets(std::slice::from_ref(dataset), config, loss, base)
}

/// Like [`train_on_dataset`], with windows drawn from the series of all
/// `datasets`.
pub fn train_on_datasets(
    datasets: &[Dataset],
    config: &ExperimentConfig,
    loss: LossKind,
    base: Option<&Model>,
) -> Result<TrainedModel> {
    let grid = config.grid.build()?;
    let sequences = training_sequences(datasets, &grid)?;
    let model = match base {
        Some(m) => {
            if m.vocab_size() != grid.vocab_size() {
                return Err(Error::Config(format!(
                    "base model vocabulary {} does not match the grid ({})",
                    m.vocab_size(),
                    grid.vocab_size()
                )));
            }
            m.clone()
        }
        None => Model::new(config.model_config())?,
    };
    train(model, &sequences, &config.train_config(loss), grid.r(), grid.d())
}

/// Trains the shared base model with cross-entropy on the training slices
/// of `corpus`, using the `[pretrain]` settings of `config`.
pub fn pretrain_base(corpus: &[Dataset], config: &ExperimentConfig) -> Result<TrainedModel> {
    let pre = config
        .pretrain
        .as_ref()
        .ok_or_else(|| Error::Config("no [pretrain] section in the config".into()))?;
    let grid = config.grid.build()?;
    let sequences = training_sequences(corpus, &grid)?;
    let model = Model::new(config.model_config())?;
    train(model, &sequences, &config.pretrain_config(pre), grid.r(), grid.d())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeriesForecast {
    pub id: String,
    pub median: Vec<f64>,
    pub quantiles: Vec<Vec<f64>>,
    pub paths: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetEvaluation {
    pub dataset: String,
    pub scores: RawScores,
    pub included: usize,
    /// Series skipped because their MASE scaling was degenerate.
    pub excluded: usize,
    pub levels: Vec<f64>,
    pub forecasts: Vec<SeriesForecast>,
}

/// Sampling seed of series `index`, shared by every model so that all
/// models see the same random streams.
fn series_sampling_seed(seed: u64, index: usize) -> u64 {
    seed.wrapping_add((index as u64).wrapping_mul(0x0001_0000_0001))
}

/// Forecasts the held-out tail of every series and scores the median
/// (MASE) and quantiles (WQL) of the model and of the seasonal-naive
/// baseline.
pub fn evaluate(model: &Model, grid: &Grid, dataset: &Dataset, sampling: &SamplingConfig) -> Result<DatasetEvaluation> {
    let levels = default_levels();
    let mut mase_sum = 0.0;
    let mut baseline_mase_sum = 0.0;
    let mut wql_acc = WqlAccumulator::default();
    let mut baseline_wql_acc = WqlAccumulator::default();
    let mut included = 0;
    let mut excluded = 0;
    let mut forecasts = Vec::with_capacity(dataset.series.len());

    for (index, ts) in dataset.series.iter().enumerate() {
        let (train, test) = split(ts)?;
        let baseline = seasonal_naive(train, ts.season_length, ts.horizon)?;
        let baseline_mase = match mase(test, &baseline, train, ts.season_length) {
            Ok(v) => v,
            Err(Error::DegenerateScaling | Error::TooShort { .. }) => {
                excluded += 1;
                continue;
            }
            Err(e) => return Err(e),
        };
        let series_sampling = SamplingConfig {
            seed: series_sampling_seed(sampling.seed, index),
            ..*sampling
        };
        let bundle = forecast_series(model, grid, train, ts.horizon, &series_sampling, &levels)?;
        mase_sum += mase(test, &bundle.median, train, ts.season_length)?;
        baseline_mase_sum += baseline_mase;
        wql_acc.add(test, &bundle.quantiles, &levels)?;
        baseline_wql_acc.add(test, &vec![baseline.clone(); levels.len()], &levels)?;
        included += 1;
        forecasts.push(SeriesForecast {
            id: ts.id.clone(),
            median: bundle.median,
            quantiles: bundle.quantiles,
            paths: bundle.decoded_paths,
        });
    }
    if included == 0 {
        return Err(Error::Config(format!(
            "dataset '{}': every series has a degenerate MASE scaling",
            dataset.name
        )));
    }
    let n = included as f64;
    Ok(DatasetEvaluation {
        dataset: dataset.name.clone(),
        scores: RawScores {
            mase: mase_sum / n,
            wql: wql_acc.finish()?,
            mase_baseline: baseline_mase_sum / n,
            wql_baseline: baseline_wql_acc.finish()?,
        },
        included,
        excluded,
        levels,
        forecasts,
    })
}

pub fn report_from_evaluations(evals: &[DatasetEvaluation]) -> Result<MetricReport> {
    let scores: BTreeMap<String, RawScores> = evals
        .iter()
        .map(|e| (e.dataset.clone(), e.scores))
        .collect();
    relative_and_aggregate(&scores)
}

/// Per-step median and quantiles as CSV: `id,step,median,q0.1,...`.
pub fn forecasts_csv(eval: &DatasetEvaluation) -> String {
    let mut out = String::from("id,step,median");
    for q in &eval.levels {
        let _ = write!(out, ",q{q}");
    }
    out.push('\n');
    for f in &eval.forecasts {
        for (t, m) in f.median.iter().enumerate() {
            let _ = write!(out, "{},{},{}", f.id, t, m);
            for row in &f.quantiles {
                let _ = write!(out, ",{}", row[t]);
            }
            out.push('\n');
        }
    }
    out
}

/// One JSON object per series holding every decoded sample path.
pub fn paths_jsonl(eval: &DatasetEvaluation) -> Result<String> {
    let mut out = String::new();
    for f in &eval.forecasts {
        let line = serde_json::json!({ "id": f.id, "paths": f.paths });
        out.push_str(&line.to_string());
        out.push('\n');
    }
    Ok(out)
}

/// Whether the reference loss kept the better (lower or equal) WQL.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WqlDirection {
    pub dataset: String,
    pub reference_wql: f64,
    pub candidate_wql: f64,
    pub reference_not_worse: bool,
}

#[derive(Debug, Clone)]
pub struct LossRun {
    pub loss: LossKind,
    pub report: MetricReport,
    pub evaluations: Vec<DatasetEvaluation>,
    pub trained: Vec<TrainedModel>,
}

#[derive(Debug, Clone)]
pub struct CompareOutcome {
    pub runs: Vec<LossRun>,
    /// Cross-entropy against each Wasserstein run, MASE then WQL.
    pub tables: Vec<DeltaTable>,
    pub wql_direction: Vec<WqlDirection>,
}

impl CompareOutcome {
    pub fn run(&self, label: &str) -> Option<&LossRun> {
        self.runs.iter().find(|r| r.loss.label() == label)
    }

    pub fn table(&self, metric: Metric, candidate: &str) -> Option<&DeltaTable> {
        self.tables
            .iter()
            .find(|t| t.metric == metric && t.candidate_label == candidate)
    }
}

#[derive(Debug, Clone, Default)]
pub struct CompareOptions {
    /// Worker threads for the per-loss jobs; 0 or 1 runs them in order.
    pub jobs: usize,
    /// Fine-tune every loss from this model instead of a fresh init.
    pub base: Option<Model>,
}

fn run_loss(
    datasets: &[Dataset],
    config: &ExperimentConfig,
    loss: LossKind,
    base: Option<&Model>,
) -> Result<LossRun> {
    let grid = config.grid.build()?;
    let mut evaluations = Vec::with_capacity(datasets.len());
    let mut trained = Vec::with_capacity(datasets.len());
    for ds in datasets {
        let t = train_on_dataset(ds, config, loss, base)?;
        evaluations.push(evaluate(&t.model, &grid, ds, &config.sampling)?);
        trained.push(t);
    }
    Ok(LossRun {
        loss,
        report: report_from_evaluations(&evaluations)?,
        evaluations,
        trained,
    })
}

/// Trains and evaluates one model per (loss, dataset) pair and compares
/// every Wasserstein run against cross-entropy.
pub fn compare(datasets: &[Dataset], config: &ExperimentConfig, options: &CompareOptions) -> Result<CompareOutcome> {
    config.validate()?;
    if datasets.is_empty() {
        return Err(Error::Config("no datasets to compare on".into()));
    }
    let kinds = config.loss_kinds()?;
    let base = options.base.as_ref();
    let runs: Vec<LossRun> = if options.jobs > 1 {
        let mut slots: Vec<Option<Result<LossRun>>> = (0..kinds.len()).map(|_| None).collect();
        for chunk in kinds.iter().enumerate().collect::<Vec<_>>().chunks(options.jobs) {
            std::thread::scope(|scope| {
                let handles: Vec<_> = chunk
                    .iter()
                    .map(|&(i, &kind)| (i, scope.spawn(move || run_loss(datasets, config, kind, base))))
                    .collect();
                for (i, h) in handles {
                    slots[i] = Some(h.join().expect("loss job panicked"));
                }
            });
        }
        slots.into_iter().map(|s| s.expect("every job ran")).collect::<Result<_>>()?
    } else {
        kinds
            .iter()
            .map(|&kind| run_loss(datasets, config, kind, base))
            .collect::<Result<_>>()?
    };

    let mut tables = Vec::new();
    let mut wql_direction = Vec::new();
    if let Some(reference) = runs.iter().find(|r| r.loss == LossKind::CrossEntropy) {
        for cand in runs.iter().filter(|r| r.loss != LossKind::CrossEntropy) {
            for metric in [Metric::Mase, Metric::Wql] {
                tables.push(delta_table(
                    metric,
                    "ce",
                    &reference.report,
                    &cand.loss.label(),
                    &cand.report,
                )?);
            }
        }
        if let Some(w1) = runs.iter().find(|r| r.loss.label() == "w1") {
            for (id, ce) in &reference.report.per_dataset {
                let cand = &w1.report.per_dataset[id];
                wql_direction.push(WqlDirection {
                    dataset: id.clone(),
                    reference_wql: ce.wql,
                    candidate_wql: cand.wql,
                    reference_not_worse: ce.wql <= cand.wql,
                });
            }
        }
    }
    Ok(CompareOutcome {
        runs,
        tables,
        wql_direction,
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn mkdir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Bar chart of aggregate relative scores per loss, as a standalone SVG.
pub fn chart_svg(outcome: &CompareOutcome) -> String {
    let width = 520.0;
    let height = 260.0;
    let panel = width / 2.0;
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width}\" height=\"{height}\" font-family=\"sans-serif\" font-size=\"12\">\n"
    );
    for (p, (title, pick)) in [
        ("Relative MASE", (|r: &MetricReport| r.agg_rel_mase) as fn(&MetricReport) -> f64),
        ("Relative WQL", |r: &MetricReport| r.agg_rel_wql),
    ]
    .into_iter()
    .enumerate()
    {
        let x0 = p as f64 * panel;
        let max = outcome
            .runs
            .iter()
            .map(|r| pick(&r.report))
            .fold(1.0_f64, f64::max);
        let _ = writeln!(svg, "<text x=\"{}\" y=\"20\" text-anchor=\"middle\">{title}</text>", x0 + panel / 2.0);
        let bar = (panel - 40.0) / outcome.runs.len().max(1) as f64;
        for (i, run) in outcome.runs.iter().enumerate() {
            let v = pick(&run.report);
            let h = 180.0 * v / max;
            let x = x0 + 20.0 + i as f64 * bar;
            let y = 220.0 - h;
            let _ = writeln!(
                svg,
                "<rect x=\"{x:.1}\" y=\"{y:.1}\" width=\"{:.1}\" height=\"{h:.1}\" fill=\"#4c72b0\"/>",
                bar * 0.8
            );
            let _ = writeln!(
                svg,
                "<text x=\"{:.1}\" y=\"238\" text-anchor=\"middle\">{}</text><text x=\"{:.1}\" y=\"{:.1}\" text-anchor=\"middle\">{v:.3}</text>",
                x + bar * 0.4,
                run.loss.label().to_uppercase(),
                x + bar * 0.4,
                y - 4.0
            );
        }
        let baseline = 220.0 - 180.0 / max;
        let _ = writeln!(
            svg,
            "<line x1=\"{}\" x2=\"{}\" y1=\"{baseline:.1}\" y2=\"{baseline:.1}\" stroke=\"#c44e52\" stroke-dasharray=\"4 3\"/>",
            x0 + 15.0,
            x0 + panel - 15.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes per-loss metric CSVs and loss curves, delta tables, the chart
/// data and the WQL direction flags under `out`.
pub fn write_compare_outputs(outcome: &CompareOutcome, out: &Path) -> Result<()> {
    mkdir(out)?;
    for run in &outcome.runs {
        let dir = out.join(run.loss.label());
        mkdir(&dir)?;
        write(&dir.join("metrics.csv"), &run.report.to_csv())?;
        for (eval, trained) in run.evaluations.iter().zip(&run.trained) {
            write_loss_curve(&dir.join(format!("{}_loss_curve.csv", eval.dataset)), &trained.history)?;
        }
    }

    let mut summary = String::new();
    for table in &outcome.tables {
        let stem = format!(
            "{}_{}_vs_{}",
            table.metric.name().to_lowercase(),
            table.reference_label,
            table.candidate_label
        );
        write(&out.join(format!("{stem}.csv")), &table.to_csv())?;
        write(&out.join(format!("{stem}.txt")), &table.to_text())?;
        let _ = writeln!(summary, "{}\n", table.to_text());
    }

    let mut chart = String::from("loss,agg_rel_mase,agg_rel_wql\n");
    for run in &outcome.runs {
        let _ = writeln!(chart, "{},{},{}", run.loss.label(), run.report.agg_rel_mase, run.report.agg_rel_wql);
        let _ = writeln!(
            summary,
            "aggregate {:<4} relative MASE {:.4}  relative WQL {:.4}",
            run.loss.label().to_uppercase(),
            run.report.agg_rel_mase,
            run.report.agg_rel_wql
        );
    }
    write(&out.join("chart.csv"), &chart)?;
    write(&out.join("chart.svg"), &chart_svg(outcome))?;

    if !outcome.wql_direction.is_empty() {
        let mut csv = String::from("dataset,wql_ce,wql_w1,ce_not_worse\n");
        summary.push_str("\nWQL direction (CE <= W1):\n");
        for d in &outcome.wql_direction {
            let _ = writeln!(csv, "{},{},{},{}", d.dataset, d.reference_wql, d.candidate_wql, d.reference_not_worse);
            let _ = writeln!(summary, "  {:<16} {}", d.dataset, if d.reference_not_worse { "yes" } else { "no" });
        }
        write(&out.join("wql_direction.csv"), &csv)?;
    }
    write(&out.join("summary.txt"), &summary)?;
    Ok(())
}

/// Saves a trained model together with the grid it was trained on.
pub fn save_trained(trained: &TrainedModel, grid: GridSpec, tc: &TrainConfig, path: &Path) -> Result<()> {
    Checkpoint::new(&trained.model, grid, Some(*tc), Some(trained.rng_state.clone())).save(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GeneratorKind, GeneratorParams, GeneratorSpec};

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            grid: GridSpec { d: 32, y_min: -5.0, y_max: 5.0 },
            model: ArchitectureConfig {
                context_length: 12,
                embed_dim: 8,
                num_layers: 1,
                num_heads: 2,
                seed: 1,
            },
            train: TrainSettings { steps: 5, lr: 1e-3, batch_size: 2, seed: 2 },
            sampling: SamplingConfig { n_paths: 4, seed: 3, temperature: 1.0 },
            ..ExperimentConfig::default()
        }
    }

    fn tiny_dataset(kind: GeneratorKind) -> Dataset {
        generate(&GeneratorSpec {
            name: kind.name().into(),
            kind,
            n_series: 3,
            length: 40,
            seed: 5,
            horizon: 4,
            season_length: 4,
            params: GeneratorParams { period: 4, noise: 0.1, ..Default::default() },
        })
        .unwrap()
    }

    #[test]
    fn config_round_trips_through_toml() {
        let config = tiny_config();
        let text = config.to_toml().unwrap();
        assert_eq!(ExperimentConfig::parse(&text).unwrap(), config);
        assert!(ExperimentConfig::parse("losses = [\"ce\"]\nbogus = 1\n").is_err());
        let partial = ExperimentConfig::parse("[train]\nsteps = 7\n").unwrap();
        assert_eq!(partial.train.steps, 7);
        assert_eq!(partial.train.lr, 1e-3);
    }

    #[test]
    fn pretrain_section_resolves_suite_next_to_config() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.toml");
        std::fs::write(&path, "[pretrain]\nsuite = \"pre.toml\"\nsteps = 9\n").unwrap();
        let config = ExperimentConfig::load(&path).unwrap();
        let pre = config.pretrain.as_ref().unwrap();
        assert_eq!(pre.suite, dir.path().join("pre.toml"));
        assert_eq!((pre.steps, pre.batch_size), (9, 8));
        assert_eq!(ExperimentConfig::parse(&config.to_toml().unwrap()).unwrap(), config);
        assert!(ExperimentConfig::parse("[pretrain]\nsuite = \"a\"\nbogus = 1\n").is_err());
    }

    #[test]
    fn fine_tuning_starts_from_the_pretrained_base() {
        let config = ExperimentConfig {
            pretrain: Some(PretrainSettings {
                suite: PathBuf::new(),
                steps: 4,
                lr: 1e-3,
                batch_size: 2,
                seed: 9,
            }),
            ..tiny_config()
        };
        let corpus = vec![tiny_dataset(GeneratorKind::Ar1), tiny_dataset(GeneratorKind::Constant)];
        let base = pretrain_base(&corpus, &config).unwrap();
        assert_eq!(base.history.len(), 4);
        assert_ne!(base.model, Model::new(config.model_config()).unwrap());
        let ds = tiny_dataset(GeneratorKind::Sinusoid);
        let tuned = train_on_dataset(&ds, &config, LossKind::W1, Some(&base.model)).unwrap();
        let scratch = train_on_dataset(&ds, &config, LossKind::W1, None).unwrap();
        assert_ne!(tuned.model, scratch.model);
    }

    #[test]
    fn unknown_loss_in_config_rejected() {
        let config = ExperimentConfig { losses: vec!["mae".into()], ..tiny_config() };
        assert!(config.validate().is_err());
    }

    #[test]
    fn evaluation_excludes_degenerate_series() {
        let config = tiny_config();
        let grid = config.grid.build().unwrap();
        let model = Model::new(config.model_config()).unwrap();
        let mut ds = tiny_dataset(GeneratorKind::Sinusoid);
        ds.series[1].values = vec![2.0; 40];
        let eval = evaluate(&model, &grid, &ds, &config.sampling).unwrap();
        assert_eq!((eval.included, eval.excluded), (2, 1));
        assert!(eval.scores.mase > 0.0 && eval.scores.wql > 0.0);
        let csv = forecasts_csv(&eval);
        assert_eq!(csv.lines().count(), 1 + 2 * 4);
        assert!(csv.starts_with("id,step,median,q0.1,q0.2"));
    }

    #[test]
    fn compare_is_deterministic_across_job_counts() {
        let datasets = vec![tiny_dataset(GeneratorKind::Sinusoid), tiny_dataset(GeneratorKind::Ar1)];
        let config = tiny_config();
        let a = compare(&datasets, &config, &CompareOptions::default()).unwrap();
        let b = compare(&datasets, &config, &CompareOptions { jobs: 3, base: None }).unwrap();
        for (ra, rb) in a.runs.iter().zip(&b.runs) {
            assert_eq!(ra.report, rb.report);
        }
        assert_eq!(a.tables.len(), 4);
        assert_eq!(a.wql_direction.len(), 2);

        let dir = tempfile::tempdir().unwrap();
        write_compare_outputs(&a, dir.path()).unwrap();
        for f in ["ce/metrics.csv", "w1/metrics.csv", "w2/sinusoid_loss_curve.csv", "mase_ce_vs_w1.txt", "chart.csv", "chart.svg", "wql_direction.csv", "summary.txt"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
    }
}

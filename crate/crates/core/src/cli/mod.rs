//! Command-line front end. Every subcommand takes its defaults from an
//! optional TOML config, lets flags override them, writes its artifacts plus
//! a `manifest.json` under `--out`, and exits with 0 on success, 2 on schema
//! or usage errors and 1 on runtime failures.

pub mod config;
pub mod experiment;
pub mod output;

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::data::{generate, load_jsonl, BiasConfig, BiasExtractor};
use crate::error::{Error, Result};
use crate::eval::{accuracy, write_reports_csv, BaseView, EvalReport, LabelMap};
use crate::hardset::{build_hard_split, BiasModelConfig};
use crate::losses::LossKind;
use crate::models::load_checkpoint;
use crate::trainer::{point_name, sweep, SweepRow};

use self::config::ExperimentConfig;
use self::experiment::{
    format_table, input_paths, load_splits, run_experiment, select_evals, write_curve_csv, write_experiment,
    write_sweep_csv, CurvePoint,
};
use self::output::Outputs;

/// Environment variable holding the number of worker threads.
pub const WORKERS_ENV: &str = "DEBIAS_WORKERS";

#[derive(Debug, Parser)]
#[command(name = "debias", version, about = "Train and evaluate bias-robust classifiers on biased data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic biased dataset as JSONL splits.
    Gen(GenArgs),
    /// Split an evaluation set into hard and easy parts with a bias-only classifier.
    Hardset(HardsetArgs),
    /// Train one model with the configured loss.
    Train(ConfigArgs),
    /// Evaluate a saved model on JSONL splits.
    Eval(EvalArgs),
    /// Train one model per hyperparameter grid point.
    Sweep(SweepArgs),
    /// Combine report JSON files into one table with differences to the first.
    Report(ReportArgs),
    /// Run the full experiment described by a config file.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Start from `data.synthetic` of this config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, default_value = "data")]
    pub out: PathBuf,
    /// Probability that the bias feature equals the label.
    #[arg(long)]
    pub p: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub scale: Option<f64>,
    #[arg(long)]
    pub labels: Option<usize>,
    #[arg(long)]
    pub signal_dim: Option<usize>,
    #[arg(long)]
    pub channels: Option<usize>,
    #[arg(long)]
    pub train_size: Option<usize>,
    #[arg(long)]
    pub dev_size: Option<usize>,
    #[arg(long)]
    pub test_size: Option<usize>,
    #[arg(long)]
    pub ood_size: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ExtractorArg {
    HypothesisOnly,
    Overlap,
}

#[derive(Debug, Args)]
pub struct HardsetArgs {
    /// Takes `[bias]` (extractor and bias-model training) from this config.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train: PathBuf,
    #[arg(long)]
    pub target: PathBuf,
    #[arg(long, value_enum)]
    pub extractor: Option<ExtractorArg>,
    /// Bias channel read by the hypothesis-only extractor.
    #[arg(long)]
    pub channel: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "hardset")]
    pub out: PathBuf,
}

/// Flags that override keys of an experiment config.
#[derive(Debug, Clone, Default, Args)]
pub struct Overrides {
    /// Seed for both data generation and training.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub loss: Option<LossKind>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

/// Single-value loss hyperparameter overrides.
#[derive(Debug, Clone, Default, Args)]
pub struct LossOverrides {
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub beta: Option<f64>,
}

impl Overrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(s) = self.seed {
            cfg.set_seed(s);
        }
        if let Some(o) = &self.out {
            cfg.out = Some(o.clone());
        }
        if let Some(k) = self.loss {
            cfg.loss.kind = k;
        }
        if let Some(e) = self.epochs {
            cfg.train.epochs = e;
        }
        if let Some(lr) = self.lr {
            cfg.train.lr = lr;
        }
        if let Some(b) = self.batch_size {
            cfg.train.batch_size = b;
        }
    }
}

impl LossOverrides {
    fn apply(&self, cfg: &mut ExperimentConfig) {
        if let Some(g) = self.gamma {
            cfg.loss.gamma = g;
        }
        if let Some(a) = self.alpha {
            cfg.loss.alpha = a;
        }
        if let Some(b) = self.beta {
            cfg.loss.beta = b;
        }
    }
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(flatten)]
    pub loss: LossOverrides,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum LabelMapArg {
    Identity,
    /// Collapse neutral and contradiction into not_entailment.
    NotEntailment,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Checkpoint written by `train` or `run`.
    #[arg(long)]
    pub model: PathBuf,
    /// JSONL split to evaluate on; repeatable.
    #[arg(long, required = true)]
    pub data: Vec<PathBuf>,
    /// Model name used in the reports.
    #[arg(long, default_value = "model")]
    pub name: String,
    #[arg(long, value_enum)]
    pub label_map: Option<LabelMapArg>,
    #[arg(long, default_value = "eval")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub overrides: Overrides,
    /// Comma-separated focusing parameters, e.g. `0.5,1,2`.
    #[arg(long = "gamma", value_delimiter = ',')]
    pub gamma_grid: Vec<f64>,
    #[arg(long = "alpha", value_delimiter = ',')]
    pub alpha_grid: Vec<f64>,
    #[arg(long = "beta", value_delimiter = ',')]
    pub beta_grid: Vec<f64>,
    #[arg(long)]
    pub replicates: Option<usize>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report JSON files; the first one's model is the baseline.
    #[arg(required = true)]
    pub files: Vec<PathBuf>,
    /// Also write the comparison as CSV to this path.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    pub decimals: usize,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment config (alternatively `--config`).
    pub config_file: Option<PathBuf>,
    #[arg(long, conflicts_with = "config_file")]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub overrides: Overrides,
    #[command(flatten)]
    pub loss: LossOverrides,
    #[arg(long)]
    pub replicates: Option<usize>,
}

/// Exit status for an error: 2 for schema problems, 1 otherwise.
pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Schema { .. } => 2,
        _ => 1,
    }
}

/// Parses `args`, runs the subcommand and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    if let Err(e) = configure_workers() {
        eprintln!("error: {e}");
        return exit_code(&e);
    }
    match dispatch(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn configure_workers() -> Result<()> {
    let Ok(raw) = std::env::var(WORKERS_ENV) else { return Ok(()) };
    let n: usize = raw.trim().parse().map_err(|_| Error::Schema {
        key: WORKERS_ENV.into(),
        message: format!("expected a positive integer, got `{raw}`"),
    })?;
    // A second call (e.g. from tests in one process) finds the pool already built.
    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    Ok(())
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => cmd_gen(a),
        Command::Hardset(a) => cmd_hardset(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Report(a) => cmd_report(a),
        Command::Run(a) => cmd_run(a),
    }
}

fn load_config(path: &Path, overrides: &Overrides, loss: Option<&LossOverrides>) -> Result<ExperimentConfig> {
    let mut cfg = ExperimentConfig::load(path)?;
    overrides.apply(&mut cfg);
    if let Some(l) = loss {
        l.apply(&mut cfg);
    }
    cfg.validate()?;
    Ok(cfg)
}

fn config_json(cfg: &ExperimentConfig) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(cfg)?)
}

/// Generator settings used when no config is given.
pub fn default_bias_config() -> BiasConfig {
    BiasConfig {
        num_labels: 3,
        signal_dim: 20,
        bias_dim: None,
        bias_strength: 0.9,
        num_bias_channels: 1,
        signal_noise: 0.1,
        signal_scale: 0.4,
        train_size: 3000,
        dev_size: 1000,
        test_size: 3000,
        ood_size: 3000,
        seed: 0,
    }
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut inputs = Vec::new();
    let mut bc = match &a.config {
        Some(path) => {
            inputs.push(path.clone());
            ExperimentConfig::load(path)?.data.synthetic.ok_or_else(|| Error::Schema {
                key: "data.synthetic".into(),
                message: "`gen` needs a synthetic data section".into(),
            })?
        }
        None => default_bias_config(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(if let Some(v) = a.$flag { bc.$field = v; })*};
    }
    set!(seed => seed, p => bias_strength, noise => signal_noise, scale => signal_scale, labels => num_labels,
         signal_dim => signal_dim, channels => num_bias_channels, train_size => train_size,
         dev_size => dev_size, test_size => test_size, ood_size => ood_size);
    bc.validate().map_err(|e| Error::Schema { key: "data.synthetic".into(), message: e.to_string() })?;
    let g = generate(&bc)?;
    let mut out = Outputs::create(&a.out, &inputs)?;
    for ds in g.all() {
        out.write_jsonl(format!("{}.jsonl", ds.name), ds)?;
    }
    let seeds = BTreeMap::from([("data".to_string(), bc.seed)]);
    out.finish("gen", serde_json::to_value(&bc)?, seeds)?;
    println!("wrote {} splits to {}", g.all().len(), a.out.display());
    Ok(())
}

fn cmd_hardset(a: HardsetArgs) -> Result<()> {
    let mut inputs = vec![a.train.clone(), a.target.clone()];
    let (mut extractor, mut model) = match &a.config {
        Some(path) => {
            inputs.push(path.clone());
            let cfg = ExperimentConfig::load(path)?;
            (cfg.bias.extractor, cfg.bias.model)
        }
        None => (BiasExtractor::HypothesisOnly { channel: 0 }, BiasModelConfig::default()),
    };
    match (a.extractor, a.channel) {
        (Some(ExtractorArg::Overlap), _) => extractor = BiasExtractor::OverlapHeuristics,
        (Some(ExtractorArg::HypothesisOnly), c) => extractor = BiasExtractor::HypothesisOnly { channel: c.unwrap_or(0) },
        (None, Some(c)) => extractor = BiasExtractor::HypothesisOnly { channel: c },
        (None, None) => {}
    }
    if let Some(e) = a.epochs {
        model.epochs = e;
    }
    if let Some(lr) = a.lr {
        model.lr = lr;
    }
    let train = load_jsonl(&a.train)?;
    let target = load_jsonl(&a.target)?;
    let split = build_hard_split(&train, &target, extractor, &model, a.seed)?;
    let mut out = Outputs::create(&a.out, &inputs)?;
    let stem = target.name.clone();
    out.write_jsonl(format!("{stem}.hard.jsonl"), &split.hard)?;
    out.write_jsonl(format!("{stem}.easy.jsonl"), &split.easy)?;
    out.write_json(format!("{stem}.hardset.json"), &split.summary())?;
    out.write_json("bias_model.json", &split.bias_model)?;
    let config = serde_json::json!({ "extractor": extractor, "bias_model": model });
    out.finish("hardset", config, BTreeMap::from([("bias_model".to_string(), a.seed)]))?;
    let s = split.summary();
    println!(
        "{}: {} hard, {} easy (bias-only accuracy {:.4})",
        s.target, s.hard, s.easy, s.bias_model_accuracy
    );
    Ok(())
}

fn finish_experiment(cfg: &ExperimentConfig, command: &str, config_path: &Path) -> Result<()> {
    let exp = run_experiment(cfg)?;
    let mut inputs = input_paths(cfg);
    inputs.push(config_path.to_path_buf());
    let mut out = Outputs::create(&cfg.out_dir(), &inputs)?;
    let seeds = write_experiment(&exp, cfg, &mut out)?;
    out.finish(command, config_json(cfg)?, seeds)?;
    print!("{}", format_table(&exp.summary, &exp.baseline, 2)?);
    println!("artifacts in {}", cfg.out_dir().display());
    Ok(())
}

fn cmd_train(a: ConfigArgs) -> Result<()> {
    let mut cfg = load_config(&a.config, &a.overrides, Some(&a.loss))?;
    cfg.run.losses.clear();
    cfg.run.replicates = 1;
    cfg.sweep = None;
    finish_experiment(&cfg, "train", &a.config)
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let path = a.config_file.or(a.config).ok_or_else(|| Error::Schema {
        key: "config".into(),
        message: "`run` needs a config file".into(),
    })?;
    let mut cfg = load_config(&path, &a.overrides, Some(&a.loss))?;
    if let Some(r) = a.replicates {
        cfg.run.replicates = r;
        cfg.validate()?;
    }
    finish_experiment(&cfg, "run", &path)
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let model = load_checkpoint(&a.model)?;
    let mut inputs = vec![a.model.clone()];
    let mut reports = Vec::new();
    for path in &a.data {
        inputs.push(path.clone());
        let ds = load_jsonl(path)?;
        let map = match a.label_map {
            None => None,
            Some(LabelMapArg::Identity) => Some(LabelMap::identity(&ds.label_names)),
            Some(LabelMapArg::NotEntailment) => Some(LabelMap::not_entailment()),
        };
        reports.push(accuracy(&BaseView(&model), &ds, map.as_ref(), &a.name)?);
    }
    let mut out = Outputs::create(&a.out, &inputs)?;
    out.write_json("reports.json", &reports)?;
    out.write_with("report.csv", |b| write_reports_csv(b, &reports, None))?;
    let config = serde_json::json!({ "name": a.name, "label_map": a.label_map.map(|m| format!("{m:?}")) });
    out.finish("eval", config, BTreeMap::new())?;
    print!("{}", format_table(&reports, &a.name, 2)?);
    Ok(())
}

/// Mean in-domain/OOD accuracy per grid point (rows are point-major).
fn curve_from_rows(rows: &[SweepRow], replicates: usize, indomain: &str, ood: &str) -> Vec<CurvePoint> {
    rows.chunks(replicates.max(1))
        .map(|group| {
            let avg = |split: &str| {
                let v: Option<Vec<f64>> = group.iter().map(|r| r.report(split).map(|x| x.accuracy)).collect();
                v.map(|v| v.iter().sum::<f64>() / v.len() as f64)
            };
            let loss = &group[0].loss;
            CurvePoint {
                gamma: loss.gamma,
                alpha: loss.alpha,
                beta: loss.beta,
                indomain: avg(indomain),
                ood: avg(ood),
            }
        })
        .collect()
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let cfg = load_config(&a.config, &a.overrides, None)?;
    let mut grid = cfg.sweep.clone().unwrap_or_default();
    if !a.gamma_grid.is_empty() {
        grid.gamma = a.gamma_grid.clone();
    }
    if !a.alpha_grid.is_empty() {
        grid.alpha = a.alpha_grid.clone();
    }
    if !a.beta_grid.is_empty() {
        grid.beta = a.beta_grid.clone();
    }
    if let Some(r) = a.replicates {
        grid.replicates = r;
    }
    if grid.replicates == 0 {
        return Err(Error::Schema { key: "sweep.replicates".into(), message: "must be positive".into() });
    }
    let splits = load_splits(&cfg, 0)?;
    let evals = select_evals(&cfg, &splits)?;
    let t = &splits.train;
    let shape = cfg.model_shape(t.num_labels(), t.signal_dim, &t.bias_dims);
    let base = cfg.train_config(cfg.loss.clone());
    let rows = sweep(&grid, &base, &shape, t, &evals, cfg.eval.label_map.as_ref())?;

    let mut inputs = input_paths(&cfg);
    inputs.push(a.config.clone());
    let mut out = Outputs::create(&cfg.out_dir(), &inputs)?;
    let mut seeds = BTreeMap::new();
    for (i, row) in rows.iter().enumerate() {
        let job = format!("jobs/{i:03}-{}-r{}", row.loss.kind, row.replicate);
        out.write_json(format!("{job}/reports.json"), &row.reports)?;
        out.write_json(format!("{job}/loss.json"), &row.loss)?;
        seeds.insert(format!("job{i:03}"), row.seed);
    }
    out.write_with("sweep.csv", |b| write_sweep_csv(b, &rows))?;
    let curve = curve_from_rows(&rows, grid.replicates, &cfg.eval.indomain, &cfg.eval.ood);
    if !grid.gamma.is_empty() {
        out.write_with("plots/gamma_curve.csv", |b| write_curve_csv(b, &curve))?;
    }
    let mut echo = cfg.clone();
    echo.sweep = Some(grid);
    out.finish("sweep", config_json(&echo)?, seeds)?;
    for (i, row) in rows.iter().enumerate() {
        let accs: Vec<String> = row.reports.iter().map(|r| format!("{}={:.4}", r.split, r.accuracy)).collect();
        println!("{i:>3}  {}  r{}  {}", point_name(&row.loss), row.replicate, accs.join("  "));
    }
    Ok(())
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ReportFile {
    Many(Vec<EvalReport>),
    One(EvalReport),
}

pub fn read_reports(path: &Path) -> Result<Vec<EvalReport>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parsed: ReportFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.line(),
        message: "expected an evaluation report or a list of them".into(),
    })?;
    Ok(match parsed {
        ReportFile::Many(v) => v,
        ReportFile::One(r) => vec![r],
    })
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let mut reports = Vec::new();
    for f in &a.files {
        reports.extend(read_reports(f)?);
    }
    let baseline = read_reports(&a.files[0])?
        .first()
        .map(|r| r.model.clone())
        .ok_or_else(|| Error::Config(format!("{} holds no reports", a.files[0].display())))?;
    print!("{}", format_table(&reports, &baseline, a.decimals)?);
    if let Some(path) = &a.out {
        if let Ok(target) = path.canonicalize() {
            if a.files.iter().any(|f| f.canonicalize().is_ok_and(|c| c == target)) {
                return Err(Error::Config("refusing to overwrite an input report".into()));
            }
        }
        let mut buf = Vec::new();
        write_reports_csv(&mut buf, &reports, Some(&baseline))?;
        fs::write(path, buf).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

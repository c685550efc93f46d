//! The end-to-end pipeline behind `run` and `train`: load or generate data,
//! fit the bias-only model, train every configured loss, evaluate, sweep.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::PathBuf;

use rayon::prelude::*;
use serde::Serialize;

use super::config::ExperimentConfig;
use super::output::Outputs;
use crate::data::{generate, load_jsonl, Dataset};
use crate::error::{Error, Result};
use crate::eval::{
    accuracy, compare_reports, elementwise_loss_vector, format_points, pearson, write_reports_csv, BaseView,
    EvalReport, LabelAccuracy,
};
use crate::hardset::{partition, train_bias_only, BiasOnlyModel, HardSplit};
use crate::losses::LossSpec;
use crate::models::TwoBranchModel;
use crate::trainer::{fit, replicate_seed, sweep, Monitor, SweepGrid, SweepRow, TrainConfig, TrainTrace};

/// Training set plus every named evaluation split.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Dataset,
    pub evals: Vec<Dataset>,
}

impl Splits {
    pub fn get(&self, name: &str) -> Option<&Dataset> {
        self.evals.iter().find(|d| d.name == name)
    }
}

/// Data for replicate `r`: synthetic data is regenerated from a derived
/// seed, file data is the same for every replicate.
pub fn load_splits(cfg: &ExperimentConfig, replicate: usize) -> Result<Splits> {
    if let Some(s) = &cfg.data.synthetic {
        let mut s = s.clone();
        s.seed = replicate_seed(s.seed, replicate);
        let g = generate(&s)?;
        let mut evals = vec![g.dev, g.test_indomain, g.test_ood];
        evals.extend(g.test_ood_channels);
        return Ok(Splits { train: g.train, evals });
    }
    let train_path = cfg
        .data
        .train
        .as_ref()
        .ok_or_else(|| Error::Config("no training data configured".into()))?;
    let train = load_jsonl(train_path)?;
    let mut evals = Vec::new();
    let named = cfg.data.dev.iter().map(|p| ("dev".to_string(), p)).chain(cfg.data.test.iter().map(|(k, p)| (k.clone(), p)));
    for (name, path) in named {
        let mut ds = load_jsonl(path)?;
        if ds.label_names != train.label_names {
            return Err(Error::Config(format!("split `{name}` uses a different label space from train")));
        }
        ds.name = name;
        evals.push(ds);
    }
    Ok(Splits { train, evals })
}

/// The evaluation splits named in `eval.splits`, or all of them.
pub fn select_evals<'a>(cfg: &ExperimentConfig, splits: &'a Splits) -> Result<Vec<&'a Dataset>> {
    match &cfg.eval.splits {
        None => Ok(splits.evals.iter().collect()),
        Some(names) => names
            .iter()
            .map(|n| splits.get(n).ok_or_else(|| Error::Config(format!("no split named `{n}`"))))
            .collect(),
    }
}

/// Files a configuration reads.
pub fn input_paths(cfg: &ExperimentConfig) -> Vec<PathBuf> {
    let d = &cfg.data;
    d.train.iter().chain(d.dev.iter()).chain(d.test.values()).cloned().collect()
}

#[derive(Debug, Clone)]
pub struct ModelRun {
    pub name: String,
    pub loss: LossSpec,
    pub model: TwoBranchModel,
    pub trace: TrainTrace,
    pub reports: Vec<EvalReport>,
}

impl ModelRun {
    pub fn report(&self, split: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.split == split)
    }
}

#[derive(Debug, Clone)]
pub struct ReplicateRun {
    pub replicate: usize,
    pub data_seed: Option<u64>,
    pub train_seed: u64,
    pub splits: Splits,
    pub bias_model: Option<BiasOnlyModel>,
    pub hard: Option<HardSplit>,
    pub models: Vec<ModelRun>,
    pub sweep: Vec<SweepRow>,
}

impl ReplicateRun {
    pub fn model(&self, name: &str) -> Option<&ModelRun> {
        self.models.iter().find(|m| m.name == name)
    }
}

#[derive(Debug, Clone)]
pub struct Experiment {
    pub replicates: Vec<ReplicateRun>,
    /// Per (model, split) mean over replicates.
    pub summary: Vec<EvalReport>,
    pub baseline: String,
}

fn evaluate(
    source: &BaseView<'_>,
    evals: &[&Dataset],
    cfg: &ExperimentConfig,
    name: &str,
    bias_model: Option<&BiasOnlyModel>,
) -> Result<Vec<EvalReport>> {
    evals
        .iter()
        .map(|ds| {
            let mut report = accuracy(source, ds, cfg.eval.label_map.as_ref(), name)?;
            if let (Some(bias), true) = (bias_model, ds.name == cfg.eval.correlation) {
                let a = elementwise_loss_vector(source, ds)?;
                let b = elementwise_loss_vector(bias, ds)?;
                report.pearson_vs_bias = match pearson(&a, &b) {
                    Ok(r) => Some(r),
                    Err(Error::UndefinedCorrelation(_)) => None,
                    Err(e) => return Err(e),
                };
            }
            Ok(report)
        })
        .collect()
}

pub fn run_replicate(cfg: &ExperimentConfig, replicate: usize) -> Result<ReplicateRun> {
    let splits = load_splits(cfg, replicate)?;
    let train_seed = replicate_seed(cfg.train.seed, replicate);
    let data_seed = cfg.data.synthetic.as_ref().map(|s| replicate_seed(s.seed, replicate));

    let wanted = select_evals(cfg, &splits)?;

    let needs_bias_model = cfg.eval.hardset.is_some() || splits.get(&cfg.eval.correlation).is_some();
    let bias_model = if needs_bias_model {
        match train_bias_only(&splits.train, cfg.bias.extractor, &cfg.bias.model, train_seed) {
            Ok(m) => Some(m),
            Err(e) if cfg.eval.hardset.is_some() => return Err(e),
            Err(_) => None,
        }
    } else {
        None
    };
    let hard = match (&cfg.eval.hardset, &bias_model) {
        (Some(target), Some(bias)) => {
            let ds = splits
                .get(target)
                .ok_or_else(|| Error::Config(format!("hard-set target `{target}` is not a split")))?;
            Some(partition(ds, bias.clone())?)
        }
        _ => None,
    };
    let mut evals = wanted;
    if let Some(h) = &hard {
        evals.extend([&h.hard, &h.easy].into_iter().filter(|d| !d.is_empty()));
    }

    let train_set = &splits.train;
    let shape = cfg.model_shape(train_set.num_labels(), train_set.signal_dim, &train_set.bias_dims);
    let monitor = Monitor {
        dev: splits.get("dev"),
        ood: splits.get(&cfg.eval.ood),
    };
    let models = cfg
        .run_losses()
        .into_par_iter()
        .map(|loss| {
            let tc = TrainConfig {
                seed: train_seed,
                ..cfg.train_config(loss.clone())
            };
            let (model, trace) = fit(&shape, train_set, &tc, monitor)?;
            let name = loss.kind.to_string();
            let reports = evaluate(&BaseView(&model), &evals, cfg, &name, bias_model.as_ref())?;
            Ok(ModelRun { name, loss, model, trace, reports })
        })
        .collect::<Result<Vec<_>>>()?;

    let sweep_rows = match &cfg.sweep {
        Some(grid) => {
            let per_replicate = SweepGrid { replicates: 1, ..grid.clone() };
            let base = TrainConfig {
                seed: train_seed,
                ..cfg.train_config(cfg.loss.clone())
            };
            sweep(&per_replicate, &base, &shape, train_set, &evals, cfg.eval.label_map.as_ref())?
        }
        None => Vec::new(),
    };

    Ok(ReplicateRun {
        replicate,
        data_seed,
        train_seed,
        splits,
        bias_model,
        hard,
        models,
        sweep: sweep_rows,
    })
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<Experiment> {
    let replicates = (0..cfg.run.replicates)
        .map(|r| run_replicate(cfg, r))
        .collect::<Result<Vec<_>>>()?;
    let first = &replicates[0];
    let mut summary = Vec::new();
    for m in &first.models {
        for rep in &m.reports {
            let group: Vec<&EvalReport> = replicates
                .iter()
                .filter_map(|r| r.model(&m.name).and_then(|mm| mm.report(&rep.split)))
                .collect();
            summary.push(mean_report(&group)?);
        }
    }
    let baseline = first.models[0].name.clone();
    Ok(Experiment {
        replicates,
        summary,
        baseline,
    })
}

fn mean(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty()).map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

/// Average of reports on the same split by the same model. Hard splits can
/// differ in size between replicates, so `n` is the mean rounded down.
pub fn mean_report(group: &[&EvalReport]) -> Result<EvalReport> {
    let first = group.first().ok_or_else(|| Error::Config("no reports to average".into()))?;
    for r in group {
        if r.split != first.split || r.model != first.model || r.per_label.len() != first.per_label.len() {
            return Err(Error::SplitMismatch(format!("cannot average `{}`/`{}` with `{}`/`{}`", r.split, r.model, first.split, first.model)));
        }
    }
    let per_label = (0..first.per_label.len())
        .map(|i| LabelAccuracy {
            label: first.per_label[i].label.clone(),
            n: group.iter().map(|r| r.per_label[i].n).sum::<usize>() / group.len(),
            accuracy: mean(group.iter().map(|r| r.per_label[i].accuracy)),
        })
        .collect();
    let same_data = group.iter().all(|r| r.fingerprint == first.fingerprint);
    Ok(EvalReport {
        split: first.split.clone(),
        model: first.model.clone(),
        n: group.iter().map(|r| r.n).sum::<usize>() / group.len(),
        accuracy: group.iter().map(|r| r.accuracy).sum::<f64>() / group.len() as f64,
        per_label,
        pearson_vs_bias: mean(group.iter().map(|r| r.pearson_vs_bias)),
        fingerprint: if same_data { first.fingerprint.clone() } else { format!("mean-of-{}", group.len()) },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurvePoint {
    pub gamma: f64,
    pub alpha: f64,
    pub beta: f64,
    pub indomain: Option<f64>,
    pub ood: Option<f64>,
}

/// Sweep points with in-domain and OOD accuracy averaged over replicates.
pub fn sweep_curve(exp: &Experiment, cfg: &ExperimentConfig) -> Vec<CurvePoint> {
    let Some(first) = exp.replicates.first() else { return Vec::new() };
    (0..first.sweep.len())
        .map(|i| {
            let avg = |split: &str| {
                mean(exp.replicates.iter().map(|r| r.sweep.get(i).and_then(|row| row.report(split)).map(|x| x.accuracy)))
            };
            let loss = &first.sweep[i].loss;
            CurvePoint {
                gamma: loss.gamma,
                alpha: loss.alpha,
                beta: loss.beta,
                indomain: avg(&cfg.eval.indomain),
                ood: avg(&cfg.eval.ood),
            }
        })
        .collect()
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn write_curve_csv<W: Write>(out: W, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["gamma", "alpha", "beta", "indomain_acc", "ood_acc"])?;
    for p in curve {
        w.write_record([p.gamma.to_string(), p.alpha.to_string(), p.beta.to_string(), cell(p.indomain), cell(p.ood)])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// One row per sweep job with accuracy on every evaluated split.
pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let splits: Vec<String> = rows.first().map(|r| r.reports.iter().map(|x| x.split.clone()).collect()).unwrap_or_default();
    let mut header: Vec<String> = ["job", "kind", "gamma", "alpha", "beta", "replicate", "seed"].map(String::from).to_vec();
    header.extend(splits.iter().map(|s| format!("acc_{s}")));
    w.write_record(&header)?;
    for (i, row) in rows.iter().enumerate() {
        let mut rec = vec![
            i.to_string(),
            row.loss.kind.to_string(),
            row.loss.gamma.to_string(),
            row.loss.alpha.to_string(),
            row.loss.beta.to_string(),
            row.replicate.to_string(),
            row.seed.to_string(),
        ];
        rec.extend(splits.iter().map(|s| cell(row.report(s).map(|r| r.accuracy))));
        w.write_record(&rec)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Per-model correlation with the bias-only model, one row per replicate
/// and a final `mean` row per model.
pub fn write_pearson_csv<W: Write>(out: W, exp: &Experiment, split: &str) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "replicate", "split", "pearson"])?;
    let names: Vec<&str> = exp.replicates[0].models.iter().map(|m| m.name.as_str()).collect();
    for name in &names {
        let mut vals = Vec::new();
        for r in &exp.replicates {
            let v = r.model(name).and_then(|m| m.report(split)).and_then(|x| x.pearson_vs_bias);
            vals.push(v);
            w.write_record([name.to_string(), r.replicate.to_string(), split.to_string(), cell(v)])?;
        }
        w.write_record([name.to_string(), "mean".into(), split.to_string(), cell(mean(vals.into_iter()))])?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

/// Models as rows, splits as columns, accuracy in points with the signed
/// difference to `baseline` in parentheses.
pub fn format_table(reports: &[EvalReport], baseline: &str, decimals: usize) -> Result<String> {
    let mut models: Vec<&str> = Vec::new();
    let mut splits: Vec<&str> = Vec::new();
    for r in reports {
        if !models.contains(&r.model.as_str()) {
            models.push(&r.model);
        }
        if !splits.contains(&r.split.as_str()) {
            splits.push(&r.split);
        }
    }
    let find = |m: &str, s: &str| reports.iter().find(|r| r.model == m && r.split == s);
    let mut rows = vec![std::iter::once("model".to_string()).chain(splits.iter().map(|s| s.to_string())).collect::<Vec<_>>()];
    for m in &models {
        let mut row = vec![m.to_string()];
        for s in &splits {
            let text = match find(m, s) {
                None => "-".to_string(),
                Some(r) => {
                    let acc = format!("{:.decimals$}", r.accuracy * 100.0);
                    match find(baseline, s) {
                        Some(b) if *m != baseline => {
                            let d = compare_reports(r, b)?;
                            format!("{acc} ({})", format_points(d.accuracy, decimals))
                        }
                        _ => acc,
                    }
                }
            };
            row.push(text);
        }
        rows.push(row);
    }
    let widths: Vec<usize> = (0..rows[0].len()).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for row in &rows {
        let line: Vec<String> = row.iter().zip(&widths).map(|(t, w)| format!("{t:<w$}")).collect();
        out.push_str(line.join("  ").trim_end());
        out.push('\n');
    }
    Ok(out)
}

/// Writes every artifact of an experiment below `out` and returns the seeds
/// for the manifest.
pub fn write_experiment(exp: &Experiment, cfg: &ExperimentConfig, out: &mut Outputs) -> Result<BTreeMap<String, u64>> {
    let mut seeds = BTreeMap::new();
    out.write_bytes("config.toml", cfg.to_toml()?.as_bytes())?;
    for rep in &exp.replicates {
        let dir = PathBuf::from(format!("r{}", rep.replicate));
        seeds.insert(format!("r{}.train", rep.replicate), rep.train_seed);
        if let Some(s) = rep.data_seed {
            seeds.insert(format!("r{}.data", rep.replicate), s);
            out.write_jsonl(dir.join("data/train.jsonl"), &rep.splits.train)?;
            for ds in &rep.splits.evals {
                out.write_jsonl(dir.join(format!("data/{}.jsonl", ds.name)), ds)?;
            }
        }
        if let Some(bias) = &rep.bias_model {
            out.write_json(dir.join("bias_model.json"), bias)?;
        }
        if let Some(h) = &rep.hard {
            let target = h.summary().target;
            out.write_jsonl(dir.join(format!("hardset/{target}.hard.jsonl")), &h.hard)?;
            out.write_jsonl(dir.join(format!("hardset/{target}.easy.jsonl")), &h.easy)?;
            out.write_json(dir.join(format!("hardset/{target}.hardset.json")), &h.summary())?;
        }
        let mut all = Vec::new();
        for m in &rep.models {
            let md = dir.join(&m.name);
            out.write_checkpoint(md.join("model.json"), &m.model)?;
            out.write_with(md.join("trace.csv"), |b| m.trace.write_csv(b))?;
            out.write_json(md.join("reports.json"), &m.reports)?;
            all.extend(m.reports.iter().cloned());
        }
        out.write_with(dir.join("report.csv"), |b| write_reports_csv(b, &all, Some(&exp.baseline)))?;
        if !rep.sweep.is_empty() {
            out.write_with(dir.join("sweep.csv"), |b| write_sweep_csv(b, &rep.sweep))?;
        }
    }
    out.write_json("reports.json", &exp.summary)?;
    out.write_with("report.csv", |b| write_reports_csv(b, &exp.summary, Some(&exp.baseline)))?;
    out.write_with("plots/pearson.csv", |b| write_pearson_csv(b, exp, &cfg.eval.correlation))?;
    let curve = sweep_curve(exp, cfg);
    if !curve.is_empty() {
        out.write_with("plots/gamma_curve.csv", |b| write_curve_csv(b, &curve))?;
    }
    Ok(seeds)
}

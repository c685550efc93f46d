//! Accuracy with label mapping, per-example loss vectors, Pearson
//! correlation and report comparison.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Example};
use crate::error::{Error, Result};
use crate::losses::ce_loss;
use crate::math::argmax;
use crate::models::TwoBranchModel;

/// Something that scores an example with label logits.
pub trait LogitSource: Sync {
    fn logits(&self, ex: &Example) -> Result<Vec<f64>>;
}

/// The base model of a two-branch model; bias branches are never consulted.
pub struct BaseView<'a>(pub &'a TwoBranchModel);

impl LogitSource for BaseView<'_> {
    fn logits(&self, ex: &Example) -> Result<Vec<f64>> {
        self.0.base_logits(ex)
    }
}

/// Bias branch `j` of a two-branch model.
pub struct BranchView<'a> {
    pub model: &'a TwoBranchModel,
    pub branch: usize,
}

impl LogitSource for BranchView<'_> {
    fn logits(&self, ex: &Example) -> Result<Vec<f64>> {
        let pass = self.model.forward(ex)?;
        pass.bias_logits
            .into_iter()
            .nth(self.branch)
            .ok_or_else(|| Error::Config(format!("no bias branch {}", self.branch)))
    }
}

/// Base-model prediction; the bias branches are dropped at inference.
pub fn predict(model: &TwoBranchModel, ex: &Example) -> Result<usize> {
    argmax(&model.base_logits(ex)?)
}

/// Surjective map from a model's label space onto a target label space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelMap {
    /// `mapping[source] = target`
    pub mapping: Vec<usize>,
    pub target_names: Vec<String>,
}

impl LabelMap {
    pub fn new(mapping: Vec<usize>, target_names: Vec<String>) -> Result<Self> {
        if target_names.len() > mapping.len() {
            return Err(Error::Config("label map target space larger than source".into()));
        }
        let mut hit = vec![false; target_names.len()];
        for &t in &mapping {
            *hit.get_mut(t).ok_or_else(|| {
                Error::Config(format!("label map target {t} has no name"))
            })? = true;
        }
        if hit.iter().any(|h| !h) {
            return Err(Error::Config("label map is not surjective".into()));
        }
        Ok(LabelMap {
            mapping,
            target_names,
        })
    }

    pub fn identity(names: &[String]) -> Self {
        LabelMap {
            mapping: (0..names.len()).collect(),
            target_names: names.to_vec(),
        }
    }

    /// entailment/neutral/contradiction → entailment/not-entailment.
    pub fn not_entailment() -> Self {
        LabelMap {
            mapping: vec![0, 1, 1],
            target_names: vec!["entailment".into(), "not_entailment".into()],
        }
    }

    pub fn map(&self, label: usize) -> Result<usize> {
        self.mapping.get(label).copied().ok_or_else(|| {
            Error::Config(format!("label {label} is not covered by the label map"))
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelAccuracy {
    pub label: String,
    pub n: usize,
    /// `None` when the split holds no example of this label.
    pub accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    /// Which model produced the report, e.g. the loss kind.
    pub model: String,
    pub n: usize,
    pub accuracy: f64,
    pub per_label: Vec<LabelAccuracy>,
    #[serde(default)]
    pub pearson_vs_bias: Option<f64>,
    /// Hash of the example ids, used to reject comparisons across splits.
    pub fingerprint: String,
}

pub fn fingerprint(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    for ex in &ds.examples {
        h.update(ex.id.as_bytes());
        h.update(b"\n");
    }
    hex::encode(&h.finalize()[..8])
}

/// Accuracy of `source` on `data`; with a map, prediction and gold label are
/// both mapped before comparison and per-label numbers live in target space.
pub fn accuracy(source: &dyn LogitSource, data: &Dataset, map: Option<&LabelMap>, model_name: &str) -> Result<EvalReport> {
    if data.is_empty() {
        return Err(Error::Config(format!("cannot evaluate on empty split `{}`", data.name)));
    }
    let preds: Vec<usize> = data
        .examples
        .par_iter()
        .map(|ex| argmax(&source.logits(ex)?))
        .collect::<Result<_>>()?;
    let names = match map {
        Some(m) => m.target_names.clone(),
        None => data.label_names.clone(),
    };
    let mut totals = vec![0usize; names.len()];
    let mut hits = vec![0usize; names.len()];
    for (ex, &p) in data.examples.iter().zip(&preds) {
        let (pred, gold) = match map {
            Some(m) => (m.map(p)?, m.map(ex.y)?),
            None => (p, ex.y),
        };
        let slot = totals
            .get_mut(gold)
            .ok_or_else(|| Error::Label { label: gold, num_labels: names.len() })?;
        *slot += 1;
        if pred == gold {
            hits[gold] += 1;
        }
    }
    let correct: usize = hits.iter().sum();
    let per_label = names
        .into_iter()
        .zip(totals.iter().zip(&hits))
        .map(|(label, (&n, &h))| LabelAccuracy {
            label,
            n,
            accuracy: (n > 0).then(|| h as f64 / n as f64),
        })
        .collect();
    Ok(EvalReport {
        split: data.name.clone(),
        model: model_name.to_string(),
        n: data.len(),
        accuracy: correct as f64 / data.len() as f64,
        per_label,
        pearson_vs_bias: None,
        fingerprint: fingerprint(data),
    })
}

/// Per-example cross-entropy `−log σ(logits)_y`, in dataset order.
pub fn elementwise_loss_vector(source: &dyn LogitSource, data: &Dataset) -> Result<Vec<f64>> {
    data.examples
        .par_iter()
        .map(|ex| Ok(ce_loss(&source.logits(ex)?, ex.y, None)?.value))
        .collect()
}

/// Pearson correlation, two-pass (means first, then centred sums).
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(format!("pearson: lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::UndefinedCorrelation("need at least two points".into()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return Err(Error::UndefinedCorrelation("zero variance".into()));
    }
    Ok((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportDelta {
    pub split: String,
    pub model: String,
    pub baseline: String,
    pub accuracy: f64,
    pub per_label: Vec<(String, Option<f64>)>,
    pub pearson_vs_bias: Option<f64>,
}

/// `candidate − baseline`, metric by metric.
pub fn compare_reports(candidate: &EvalReport, baseline: &EvalReport) -> Result<ReportDelta> {
    if candidate.split != baseline.split || candidate.fingerprint != baseline.fingerprint {
        return Err(Error::SplitMismatch(format!(
            "`{}` ({}) vs `{}` ({})",
            candidate.split, candidate.fingerprint, baseline.split, baseline.fingerprint
        )));
    }
    let labels_match = candidate.per_label.len() == baseline.per_label.len()
        && candidate
            .per_label
            .iter()
            .zip(&baseline.per_label)
            .all(|(a, b)| a.label == b.label);
    if !labels_match {
        return Err(Error::SplitMismatch("reports use different label spaces".into()));
    }
    let per_label = candidate
        .per_label
        .iter()
        .zip(&baseline.per_label)
        .map(|(c, b)| (c.label.clone(), c.accuracy.zip(b.accuracy).map(|(x, y)| x - y)))
        .collect();
    Ok(ReportDelta {
        split: candidate.split.clone(),
        model: candidate.model.clone(),
        baseline: baseline.model.clone(),
        accuracy: candidate.accuracy - baseline.accuracy,
        per_label,
        pearson_vs_bias: candidate.pearson_vs_bias.zip(baseline.pearson_vs_bias).map(|(x, y)| x - y),
    })
}

/// Accuracy difference in percentage points with an explicit sign.
pub fn format_points(delta: f64, decimals: usize) -> String {
    let pts = delta * 100.0;
    // avoid printing "-0.00"
    let pts = if pts.abs() < 0.5 * 10f64.powi(-(decimals as i32)) { 0.0 } else { pts };
    format!("{pts:+.decimals$}")
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV columns: `split, model, n, acc, acc_<label>…, pearson, delta_acc,
/// delta_acc_<label>…, delta_pearson`. Deltas are against `baseline` (the
/// report with the same split and that model name) and left blank for the
/// baseline rows themselves.
pub fn write_reports_csv<W: Write>(out: W, reports: &[EvalReport], baseline: Option<&str>) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let labels: Vec<String> = reports
        .first()
        .map(|r| r.per_label.iter().map(|l| l.label.clone()).collect())
        .unwrap_or_default();
    let mut header = vec!["split".to_string(), "model".into(), "n".into(), "acc".into()];
    header.extend(labels.iter().map(|l| format!("acc_{l}")));
    header.push("pearson".into());
    header.push("delta_acc".into());
    header.extend(labels.iter().map(|l| format!("delta_acc_{l}")));
    header.push("delta_pearson".into());
    w.write_record(&header)?;
    for r in reports {
        if r.per_label.len() != labels.len() {
            return Err(Error::SplitMismatch(format!(
                "report `{}`/`{}` has a different label space",
                r.split, r.model
            )));
        }
        let mut row = vec![r.split.clone(), r.model.clone(), r.n.to_string(), r.accuracy.to_string()];
        row.extend(r.per_label.iter().map(|l| opt(l.accuracy)));
        row.push(opt(r.pearson_vs_bias));
        let base = baseline.and_then(|name| {
            (r.model != name)
                .then(|| reports.iter().find(|b| b.model == name && b.split == r.split))
                .flatten()
        });
        match base {
            Some(b) => {
                let d = compare_reports(r, b)?;
                row.push(d.accuracy.to_string());
                row.extend(d.per_label.iter().map(|(_, v)| opt(*v)));
                row.push(opt(d.pearson_vs_bias));
            }
            None => row.extend(std::iter::repeat_n(String::new(), labels.len() + 2)),
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io("<csv>", e))?;
    Ok(())
}

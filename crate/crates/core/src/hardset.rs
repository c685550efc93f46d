//! Stand-alone bias-only classifier and the hard/easy split it induces.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{extract_bias_features, save_jsonl, BiasExtractor, Dataset, Example};
use crate::error::{Error, Result};
use crate::eval::{accuracy, LogitSource};
use crate::losses::ce_loss;
use crate::math::{argmax, SeededRng};
use crate::models::{Classifier, Optimizer, OptimizerKind, Parameterized};

/// Training setup for a bias-only classifier (linear when `hidden` is empty).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasModelConfig {
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub class_weights: Option<Vec<f64>>,
}

fn default_epochs() -> usize {
    10
}
fn default_batch() -> usize {
    32
}
fn default_lr() -> f64 {
    0.5
}

impl Default for BiasModelConfig {
    fn default() -> Self {
        BiasModelConfig {
            epochs: default_epochs(),
            batch_size: default_batch(),
            lr: default_lr(),
            optimizer: OptimizerKind::Sgd,
            hidden: Vec::new(),
            class_weights: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasOnlyModel {
    pub classifier: Classifier,
    pub extractor: BiasExtractor,
}

impl LogitSource for BiasOnlyModel {
    fn logits(&self, ex: &Example) -> Result<Vec<f64>> {
        self.classifier.forward(&extract_bias_features(ex, self.extractor)?)
    }
}

/// Fit a bias-only classifier with cross-entropy on the extracted features.
pub fn train_bias_only(
    train: &Dataset,
    extractor: BiasExtractor,
    cfg: &BiasModelConfig,
    seed: u64,
) -> Result<BiasOnlyModel> {
    if train.is_empty() {
        return Err(Error::Config("cannot fit a bias-only model on an empty set".into()));
    }
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("bias model needs positive epochs, batch_size and lr".into()));
    }
    let features = train
        .examples
        .iter()
        .map(|ex| extract_bias_features(ex, extractor))
        .collect::<Result<Vec<_>>>()?;
    let dim = features[0].len();
    if features.iter().any(|f| f.len() != dim) {
        return Err(Error::dim("bias features have inconsistent widths"));
    }
    let root = SeededRng::new(seed);
    let mut classifier = Classifier::init(dim, &cfg.hidden, train.num_labels(), &mut root.derive(1));
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut shuffle = root.derive(2);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let weights = cfg.class_weights.as_deref();
    for _ in 0..cfg.epochs {
        shuffle.shuffle(&mut order);
        for chunk in order.chunks(cfg.batch_size) {
            let mut grads = classifier.zero_grads();
            for &i in chunk {
                let x = &features[i];
                let out = ce_loss(&classifier.forward(x)?, train.examples[i].y, weights)?;
                grads.add_scaled(&classifier.backward(x, &out.d_base_logits)?, 1.0 / chunk.len() as f64);
            }
            classifier.apply_gradients(&grads, &mut opt)?;
        }
    }
    Ok(BiasOnlyModel { classifier, extractor })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HardSplitSummary {
    pub target: String,
    pub n: usize,
    pub hard: usize,
    pub easy: usize,
    pub bias_model_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HardSplit {
    /// Target examples the bias-only model gets wrong.
    pub hard: Dataset,
    /// Target examples the bias-only model gets right.
    pub easy: Dataset,
    pub bias_model_accuracy: f64,
    pub bias_model: BiasOnlyModel,
}

impl HardSplit {
    pub fn summary(&self) -> HardSplitSummary {
        HardSplitSummary {
            target: self.hard.name.trim_end_matches("_hard").to_string(),
            n: self.hard.len() + self.easy.len(),
            hard: self.hard.len(),
            easy: self.easy.len(),
            bias_model_accuracy: self.bias_model_accuracy,
        }
    }
}

/// Fit a bias-only model on `train`, then partition `target` by whether it
/// classifies each example correctly.
pub fn build_hard_split(
    train: &Dataset,
    target: &Dataset,
    extractor: BiasExtractor,
    cfg: &BiasModelConfig,
    seed: u64,
) -> Result<HardSplit> {
    if train.label_names != target.label_names {
        return Err(Error::Config(format!(
            "label spaces differ: {:?} vs {:?}",
            train.label_names, target.label_names
        )));
    }
    let bias_model = train_bias_only(train, extractor, cfg, seed)?;
    partition(target, bias_model)
}

/// Partition `target` with an already trained bias-only model.
pub fn partition(target: &Dataset, bias_model: BiasOnlyModel) -> Result<HardSplit> {
    let mut hard = target.empty_like(format!("{}_hard", target.name));
    let mut easy = target.empty_like(format!("{}_easy", target.name));
    for ex in &target.examples {
        if argmax(&bias_model.logits(ex)?)? == ex.y {
            easy.examples.push(ex.clone());
        } else {
            hard.examples.push(ex.clone());
        }
    }
    let bias_model_accuracy = if target.is_empty() {
        0.0
    } else {
        accuracy(&bias_model, target, None, "bias_only")?.accuracy
    };
    Ok(HardSplit {
        hard,
        easy,
        bias_model_accuracy,
        bias_model,
    })
}

/// Writes `<prefix>.hard.jsonl`, `<prefix>.easy.jsonl` and `<prefix>.hardset.json`.
pub fn write_hard_split(split: &HardSplit, prefix: &Path) -> Result<Vec<PathBuf>> {
    let with = |suffix: &str| {
        let mut s = prefix.as_os_str().to_owned();
        s.push(suffix);
        PathBuf::from(s)
    };
    let (hard, easy, sidecar) = (with(".hard.jsonl"), with(".easy.jsonl"), with(".hardset.json"));
    save_jsonl(&split.hard, &hard)?;
    save_jsonl(&split.easy, &easy)?;
    let body = serde_json::to_string_pretty(&split.summary())?;
    fs::write(&sidecar, body + "\n").map_err(|e| Error::io(&sidecar, e))?;
    Ok(vec![hard, easy, sidecar])
}

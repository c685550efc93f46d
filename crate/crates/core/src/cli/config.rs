//! Declarative experiment configuration (TOML) and its validation.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{BiasConfig, BiasExtractor};
use crate::error::{Error, Result};
use crate::eval::LabelMap;
use crate::hardset::BiasModelConfig;
use crate::losses::{LossKind, LossSpec};
use crate::models::{BaseInput, ModelShape, OptimizerKind};
use crate::trainer::{SweepGrid, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_name")]
    pub name: String,
    /// Output directory; `runs/<name>` when absent.
    #[serde(default)]
    pub out: Option<PathBuf>,
    pub data: DataSection,
    #[serde(default)]
    pub model: ModelSection,
    #[serde(default)]
    pub bias: BiasSection,
    pub loss: LossSpec,
    pub train: TrainSection,
    #[serde(default)]
    pub eval: EvalSection,
    #[serde(default)]
    pub sweep: Option<SweepGrid>,
    #[serde(default)]
    pub run: RunSection,
}

fn default_name() -> String {
    "experiment".into()
}

/// Either a synthetic generator or JSONL files on disk.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSection {
    #[serde(default)]
    pub synthetic: Option<BiasConfig>,
    #[serde(default)]
    pub train: Option<PathBuf>,
    #[serde(default)]
    pub dev: Option<PathBuf>,
    /// Extra evaluation splits, keyed by the name used in reports.
    #[serde(default)]
    pub test: BTreeMap<String, PathBuf>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default)]
    pub base_input: BaseInput,
    #[serde(default)]
    pub encoder_widths: Vec<usize>,
    #[serde(default)]
    pub base_hidden: Vec<usize>,
    #[serde(default)]
    pub branch_hidden: Vec<usize>,
    #[serde(default)]
    pub branches_read_encoder: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasSection {
    /// One bias branch per listed channel; every channel when absent.
    #[serde(default)]
    pub channels: Option<Vec<usize>>,
    /// Features of the stand-alone bias-only classifier (hard sets, correlations).
    #[serde(default = "default_extractor")]
    pub extractor: BiasExtractor,
    #[serde(default)]
    pub model: BiasModelConfig,
}

fn default_extractor() -> BiasExtractor {
    BiasExtractor::HypothesisOnly { channel: 0 }
}

impl Default for BiasSection {
    fn default() -> Self {
        BiasSection {
            channels: None,
            extractor: default_extractor(),
            model: BiasModelConfig::default(),
        }
    }
}

/// Training options shared by every loss in the experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    #[serde(default)]
    pub eval_every: usize,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalSection {
    /// Splits to report on; every available split when absent.
    #[serde(default)]
    pub splits: Option<Vec<String>>,
    #[serde(default)]
    pub label_map: Option<LabelMap>,
    /// Split whose hard/easy partition is built and evaluated.
    #[serde(default)]
    pub hardset: Option<String>,
    #[serde(default = "default_indomain")]
    pub indomain: String,
    #[serde(default = "default_ood")]
    pub ood: String,
    /// Split on which loss correlations with the bias-only model are measured.
    #[serde(default = "default_dev")]
    pub correlation: String,
}

fn default_indomain() -> String {
    "test_indomain".into()
}
fn default_ood() -> String {
    "test_ood".into()
}
fn default_dev() -> String {
    "dev".into()
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            splits: None,
            label_map: None,
            hardset: None,
            indomain: default_indomain(),
            ood: default_ood(),
            correlation: default_dev(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunSection {
    /// Loss kinds trained side by side; the first is the baseline of the
    /// delta table. Empty means just `loss.kind`.
    #[serde(default)]
    pub losses: Vec<LossKind>,
    /// Independent data+training repeats; repeat 0 uses the configured seeds.
    #[serde(default = "default_replicates")]
    pub replicates: usize,
}

fn default_replicates() -> usize {
    1
}

impl Default for RunSection {
    fn default() -> Self {
        RunSection {
            losses: Vec::new(),
            replicates: default_replicates(),
        }
    }
}

fn schema(key: &str, message: impl Into<String>) -> Error {
    Error::Schema {
        key: key.to_string(),
        message: message.into(),
    }
}

fn at(key: &str) -> impl Fn(Error) -> Error + '_ {
    move |e| match e {
        Error::Config(m) => schema(key, m),
        other => other,
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| schema("<root>", e.to_string()))?;
        let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let message = e.inner().to_string();
            schema(&key_from(&path, &message), message)
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    /// Semantic checks that the serde schema cannot express. Failures are
    /// reported as schema errors naming the offending key.
    pub fn validate(&self) -> Result<()> {
        match (&self.data.synthetic, &self.data.train) {
            (Some(s), None) => {
                if self.data.dev.is_some() || !self.data.test.is_empty() {
                    return Err(schema("data", "file paths cannot be combined with `synthetic`"));
                }
                s.validate().map_err(at("data.synthetic"))?;
            }
            (None, Some(_)) => {}
            _ => return Err(schema("data", "set exactly one of `synthetic` or `train`")),
        }
        self.loss.validate().map_err(at("loss"))?;
        self.train_config(self.loss.clone()).validate().map_err(at("train"))?;
        if let Some(grid) = &self.sweep {
            if grid.replicates == 0 {
                return Err(schema("sweep.replicates", "must be positive"));
            }
        }
        if let Some(m) = &self.eval.label_map {
            LabelMap::new(m.mapping.clone(), m.target_names.clone()).map_err(at("eval.label_map"))?;
        }
        for (i, kind) in self.run.losses.iter().enumerate() {
            if self.run.losses[..i].contains(kind) {
                return Err(schema("run.losses", format!("`{kind}` listed twice")));
            }
        }
        if self.run.replicates == 0 {
            return Err(schema("run.replicates", "must be positive"));
        }
        if let Some(s) = &self.data.synthetic {
            let k = s.num_bias_channels;
            if let Some(chs) = &self.bias.channels {
                if let Some(c) = chs.iter().find(|&&c| c >= k) {
                    return Err(schema("bias.channels", format!("channel {c} but the data has {k}")));
                }
            }
            if let BiasExtractor::HypothesisOnly { channel } = self.bias.extractor {
                if channel >= k {
                    return Err(schema("bias.extractor.channel", format!("channel {channel} but the data has {k}")));
                }
            }
            let branches = self.bias.channels.as_ref().map_or(k, Vec::len);
            self.loss.kind.check_branches(branches).map_err(at("loss.kind"))?;
            for kind in &self.run.losses {
                kind.check_branches(branches).map_err(at("run.losses"))?;
            }
        }
        Ok(())
    }

    pub fn out_dir(&self) -> PathBuf {
        self.out.clone().unwrap_or_else(|| Path::new("runs").join(&self.name))
    }

    pub fn train_config(&self, loss: LossSpec) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            loss,
            epochs: t.epochs,
            batch_size: t.batch_size,
            lr: t.lr,
            optimizer: t.optimizer,
            seed: t.seed,
            shuffle: t.shuffle,
            eval_every: t.eval_every,
        }
    }

    /// Losses trained by `run`, hyperparameters taken from `[loss]`.
    pub fn run_losses(&self) -> Vec<LossSpec> {
        if self.run.losses.is_empty() {
            return vec![self.loss.clone()];
        }
        self.run
            .losses
            .iter()
            .map(|&kind| LossSpec {
                kind,
                ..self.loss.clone()
            })
            .collect()
    }

    pub fn model_shape(&self, num_labels: usize, signal_dim: usize, bias_dims: &[usize]) -> ModelShape {
        let m = &self.model;
        ModelShape {
            num_labels,
            signal_dim,
            bias_dims: bias_dims.to_vec(),
            base_input: m.base_input,
            encoder_widths: m.encoder_widths.clone(),
            base_hidden: m.base_hidden.clone(),
            branch_hidden: m.branch_hidden.clone(),
            branch_channels: self.bias.channels.clone(),
            branches_read_encoder: m.branches_read_encoder,
        }
    }

    /// Sets the data and training seeds together.
    pub fn set_seed(&mut self, seed: u64) {
        self.train.seed = seed;
        if let Some(s) = &mut self.data.synthetic {
            s.seed = seed;
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot serialise config: {e}")))
    }
}

/// serde reports a missing field at its parent; append the field name so the
/// message points at the key the user has to add.
fn key_from(path: &str, message: &str) -> String {
    let parent = if path == "." { "" } else { path };
    let marker = "missing field `";
    let missing = message
        .find(marker)
        .and_then(|i| message[i + marker.len()..].split('`').next());
    match missing {
        Some(field) if parent.is_empty() => field.to_string(),
        Some(field) => format!("{parent}.{field}"),
        None if parent.is_empty() => "<root>".into(),
        None => parent.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
[data.synthetic]
num_labels = 3
signal_dim = 6
bias_strength = 0.9
signal_noise = 0.5
train_size = 30
dev_size = 30
test_size = 30
ood_size = 30
seed = 1

[loss]
kind = "poe"

[train]
epochs = 1
batch_size = 8
lr = 0.1
"#;

    fn key_of(text: &str) -> String {
        match ExperimentConfig::from_toml_str(text) {
            Err(Error::Schema { key, .. }) => key,
            other => panic!("expected a schema error, got {other:?}"),
        }
    }

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        assert_eq!(cfg.loss.gamma, 2.0);
        assert_eq!(cfg.run.replicates, 1);
        assert_eq!(cfg.run_losses().len(), 1);
        assert_eq!(cfg.out_dir(), Path::new("runs/experiment"));
        assert_eq!(cfg.eval.ood, "test_ood");
    }

    #[test]
    fn missing_loss_kind_names_the_key() {
        assert_eq!(key_of(&MINIMAL.replace("kind = \"poe\"", "")), "loss.kind");
    }

    #[test]
    fn bad_values_name_their_keys() {
        assert_eq!(key_of(&MINIMAL.replace("\"poe\"", "\"mystery\"")), "loss.kind");
        assert_eq!(key_of(&MINIMAL.replace("lr = 0.1", "lr = \"fast\"")), "train.lr");
        assert_eq!(key_of(&MINIMAL.replace("lr = 0.1", "lr = 0.1\nlearning = 2")), "train.learning");
        assert_eq!(key_of(&MINIMAL.replace("bias_strength = 0.9", "bias_strength = 0.1")), "data.synthetic");
        assert_eq!(key_of(&MINIMAL.replace("[loss]", "[loss]\ngamma = -1.0")), "loss");
        assert_eq!(key_of(&format!("{MINIMAL}\n[bias]\nchannels = [3]\n")), "bias.channels");
        assert_eq!(key_of(&format!("{MINIMAL}\n[run]\nlosses = [\"ce\", \"joint_poe\"]\nreplicates = 0\n")), "run.replicates");
        assert_eq!(key_of("[[["), "<root>");
    }

    #[test]
    fn joint_kinds_need_matching_channels() {
        let two = MINIMAL.replace("seed = 1", "seed = 1\nnum_bias_channels = 2");
        assert_eq!(key_of(&two), "loss.kind");
        let ok = two.replace("\"poe\"", "\"joint_poe\"");
        assert!(ExperimentConfig::from_toml_str(&ok).is_ok());
        let single = format!("{two}\n[bias]\nchannels = [1]\n");
        assert!(ExperimentConfig::from_toml_str(&single).is_ok());
    }

    #[test]
    fn toml_round_trip() {
        let mut cfg = ExperimentConfig::from_toml_str(MINIMAL).unwrap();
        cfg.sweep = Some(SweepGrid {
            gamma: vec![0.5, 1.0],
            ..SweepGrid::default()
        });
        cfg.set_seed(9);
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.data.synthetic.unwrap().seed, 9);
    }
}

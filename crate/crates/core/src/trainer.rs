//! Two-branch training loop, single-run fitting helper and the
//! hyperparameter sweep.

use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{accuracy, BaseView, EvalReport, LabelMap};
use crate::losses::{bias_ce_loss, combined_loss, LossSpec};
use crate::math::{derive_seed, SeededRng};
use crate::models::{ModelShape, Optimizer, OptimizerKind, Parameterized, TwoBranchGrads, TwoBranchModel};

const SHUFFLE_STREAM: u64 = 0x5348;
const INIT_STREAM: u64 = 0x494e;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub loss: LossSpec,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    #[serde(default)]
    pub optimizer: OptimizerKind,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub shuffle: bool,
    /// Evaluate the monitor splits every this many epochs (0 = never).
    #[serde(default)]
    pub eval_every: usize,
}

fn default_true() -> bool {
    true
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub combined_loss: f64,
    /// Bias-only cross-entropy averaged over branches (0 without branches).
    pub bias_loss: f64,
    pub dev_acc: Option<f64>,
    pub ood_acc: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainTrace {
    pub epochs: Vec<EpochRecord>,
}

impl TrainTrace {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["epoch", "combined_loss", "bias_loss", "dev_acc", "ood_acc"])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for r in &self.epochs {
            w.write_record([
                r.epoch.to_string(),
                r.combined_loss.to_string(),
                r.bias_loss.to_string(),
                opt(r.dev_acc),
                opt(r.ood_acc),
            ])?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))?;
        Ok(())
    }
}

/// Splits evaluated during training for the trace.
#[derive(Debug, Default, Clone, Copy)]
pub struct Monitor<'a> {
    pub dev: Option<&'a Dataset>,
    pub ood: Option<&'a Dataset>,
}

fn check_compat(model: &TwoBranchModel, data: &Dataset, cfg: &TrainConfig) -> Result<()> {
    model.validate()?;
    cfg.validate()?;
    cfg.loss.kind.check_branches(model.num_branches())?;
    if data.num_labels() != model.num_labels() {
        return Err(Error::dim(format!(
            "data has {} labels, model has {}",
            data.num_labels(),
            model.num_labels()
        )));
    }
    if let Some(w) = &cfg.loss.bias_class_weights {
        if w.len() != model.num_labels() {
            return Err(Error::Config("bias_class_weights length differs from label count".into()));
        }
    }
    for b in &model.branches {
        if b.channel >= data.bias_dims.len() {
            return Err(Error::dim(format!("data has no bias channel {}", b.channel)));
        }
    }
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    Ok(())
}

/// Train the base model with the combined loss and each bias branch with its
/// own β-weighted cross-entropy, one optimizer per parameter group.
pub fn train(
    mut model: TwoBranchModel,
    data: &Dataset,
    cfg: &TrainConfig,
    monitor: Monitor<'_>,
) -> Result<(TwoBranchModel, TrainTrace)> {
    check_compat(&model, data, cfg)?;
    let spec = &cfg.loss;
    let weights = spec.bias_class_weights.as_deref();
    let mut base_opt = Optimizer::new(cfg.optimizer, cfg.lr);
    let mut branch_opts: Vec<Optimizer> = (0..model.num_branches())
        .map(|_| Optimizer::new(cfg.optimizer, cfg.lr))
        .collect();
    let mut rng = SeededRng::new(cfg.seed).derive(SHUFFLE_STREAM);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut trace = TrainTrace::default();
    let k = model.num_branches();

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            rng.shuffle(&mut order);
        }
        let (mut combined_sum, mut bias_sum) = (0.0, 0.0);
        for (batch_idx, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let snapshot = &model;
            let per_example: Vec<(f64, f64, TwoBranchGrads)> = chunk
                .par_iter()
                .map(|&i| {
                    let ex = &data.examples[i];
                    let pass = snapshot.forward(ex)?;
                    let out = combined_loss(spec, &pass.base_logits, &pass.bias_logits, ex.y)?;
                    let bias = bias_ce_loss(&pass.bias_logits, ex.y, weights)?;
                    let grads = snapshot.backward(&pass, &out.d_base_logits, &bias.d_bias_logits)?;
                    Ok((out.value, bias.value, grads))
                })
                .collect::<Result<_>>()
                .map_err(|e| match e {
                    Error::NonFinite(message) => Error::Diverged {
                        epoch,
                        batch: batch_idx,
                        message,
                    },
                    other => other,
                })?;

            let m = chunk.len() as f64;
            let mut grads = model.zero_grads();
            let (mut c_batch, mut b_batch) = (0.0, 0.0);
            for (c, b, g) in &per_example {
                c_batch += c;
                b_batch += b;
                grads.add_scaled(g, 1.0 / m, spec.beta / m);
            }
            if !c_batch.is_finite() || !b_batch.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    message: format!("combined loss {c_batch}, bias loss {b_batch}"),
                });
            }
            combined_sum += c_batch;
            bias_sum += b_batch;

            base_opt.step(&mut model.base_params_mut(), &grads.base_group())?;
            for ((branch, g), opt) in model.branches.iter_mut().zip(&grads.branches).zip(&mut branch_opts) {
                branch.classifier.apply_gradients(g, opt)?;
            }
            if model.base_params().iter().any(|p| p.iter().any(|v| !v.is_finite())) {
                return Err(Error::Diverged {
                    epoch,
                    batch: batch_idx,
                    message: "base parameters became non-finite".into(),
                });
            }
        }

        let n = data.len() as f64;
        let evaluate = cfg.eval_every > 0 && ((epoch + 1) % cfg.eval_every == 0 || epoch + 1 == cfg.epochs);
        let acc = |ds: Option<&Dataset>| -> Result<Option<f64>> {
            match ds {
                Some(ds) if evaluate => Ok(Some(accuracy(&BaseView(&model), ds, None, "")?.accuracy)),
                _ => Ok(None),
            }
        };
        trace.epochs.push(EpochRecord {
            epoch: epoch + 1,
            combined_loss: combined_sum / n,
            bias_loss: if k == 0 { 0.0 } else { bias_sum / (n * k as f64) },
            dev_acc: acc(monitor.dev)?,
            ood_acc: acc(monitor.ood)?,
        });
    }
    Ok((model, trace))
}

/// Initialise a model from `shape` with the run seed, then train it.
pub fn fit(shape: &ModelShape, data: &Dataset, cfg: &TrainConfig, monitor: Monitor<'_>) -> Result<(TwoBranchModel, TrainTrace)> {
    let mut rng = SeededRng::new(cfg.seed).derive(INIT_STREAM);
    let model = TwoBranchModel::init(shape, &mut rng)?;
    train(model, data, cfg, monitor)
}

/// Hyperparameter grid; an empty list keeps the base configuration's value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepGrid {
    #[serde(default)]
    pub gamma: Vec<f64>,
    #[serde(default)]
    pub alpha: Vec<f64>,
    #[serde(default)]
    pub beta: Vec<f64>,
    /// Independent repeats per point; repeat 0 uses the base seed.
    #[serde(default = "default_replicates")]
    pub replicates: usize,
}

fn default_replicates() -> usize {
    1
}

impl Default for SweepGrid {
    fn default() -> Self {
        SweepGrid {
            gamma: Vec::new(),
            alpha: Vec::new(),
            beta: Vec::new(),
            replicates: default_replicates(),
        }
    }
}

impl SweepGrid {
    pub fn points(&self, base: &LossSpec) -> Vec<LossSpec> {
        let or_base = |v: &Vec<f64>, b: f64| if v.is_empty() { vec![b] } else { v.clone() };
        let mut out = Vec::new();
        for &g in &or_base(&self.gamma, base.gamma) {
            for &a in &or_base(&self.alpha, base.alpha) {
                for &b in &or_base(&self.beta, base.beta) {
                    out.push(base.clone().with_gamma(g).with_alpha(a).with_beta(b));
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub loss: LossSpec,
    pub replicate: usize,
    pub seed: u64,
    pub reports: Vec<EvalReport>,
}

impl SweepRow {
    pub fn report(&self, split: &str) -> Option<&EvalReport> {
        self.reports.iter().find(|r| r.split == split)
    }
}

pub fn replicate_seed(base: u64, replicate: usize) -> u64 {
    if replicate == 0 {
        base
    } else {
        derive_seed(base, replicate as u64)
    }
}

/// Train and evaluate one model per grid point and replicate. Rows come back
/// in grid order regardless of how the jobs were scheduled.
pub fn sweep(
    grid: &SweepGrid,
    base: &TrainConfig,
    shape: &ModelShape,
    train_set: &Dataset,
    eval_sets: &[&Dataset],
    map: Option<&LabelMap>,
) -> Result<Vec<SweepRow>> {
    let points = grid.points(&base.loss);
    if points.is_empty() || grid.replicates == 0 {
        return Err(Error::Config("empty sweep grid".into()));
    }
    let jobs: Vec<(LossSpec, usize)> = points
        .into_iter()
        .flat_map(|p| (0..grid.replicates).map(move |r| (p.clone(), r)))
        .collect();
    jobs.into_par_iter()
        .map(|(loss, replicate)| {
            let seed = replicate_seed(base.seed, replicate);
            let cfg = TrainConfig {
                loss: loss.clone(),
                seed,
                ..base.clone()
            };
            let (model, _) = fit(shape, train_set, &cfg, Monitor::default())?;
            let name = point_name(&loss);
            let reports = eval_sets
                .iter()
                .map(|ds| accuracy(&BaseView(&model), ds, map, &name))
                .collect::<Result<Vec<_>>>()?;
            Ok(SweepRow {
                loss,
                replicate,
                seed,
                reports,
            })
        })
        .collect()
}

pub fn point_name(loss: &LossSpec) -> String {
    format!("{}[g={},a={},b={}]", loss.kind, loss.gamma, loss.alpha, loss.beta)
}

/// Index of the row with the best accuracy on `split` (first on ties).
pub fn select_best(rows: &[SweepRow], split: &str) -> Result<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, row) in rows.iter().enumerate() {
        let acc = row
            .report(split)
            .ok_or_else(|| Error::Config(format!("sweep rows carry no `{split}` report")))?
            .accuracy;
        if best.is_none_or(|(_, b)| acc > b) {
            best = Some((i, acc));
        }
    }
    best.map(|(i, _)| i)
        .ok_or_else(|| Error::Config("no sweep rows to select from".into()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, BiasConfig, Example, SplitTag};
    use crate::eval::predict;
    use crate::losses::LossKind;
    use crate::models::BaseInput;

    fn separable() -> Dataset {
        let mut ds = Dataset::new("toy", SplitTag::Train, vec!["a".into(), "b".into()], 2, vec![]).unwrap();
        let mut rng = SeededRng::new(4);
        for i in 0..60 {
            let y = i % 2;
            let sign = if y == 0 { 1.0 } else { -1.0 };
            ds.push(Example {
                id: format!("t{i}"),
                x: vec![sign * rng.uniform(0.2, 1.0), rng.uniform(-1.0, 1.0)],
                x_bias: vec![],
                y,
                premise: None,
                hypothesis: None,
            })
            .unwrap();
        }
        ds
    }

    fn cfg(kind: LossKind) -> TrainConfig {
        TrainConfig {
            loss: LossSpec::new(kind),
            epochs: 50,
            batch_size: 8,
            lr: 0.5,
            optimizer: OptimizerKind::Sgd,
            seed: 1,
            shuffle: true,
            eval_every: 10,
        }
    }

    #[test]
    fn ce_without_branches_fits_separable_data() {
        let ds = separable();
        let shape = ModelShape {
            num_labels: 2,
            signal_dim: 2,
            bias_dims: vec![],
            base_input: BaseInput::Signal,
            encoder_widths: vec![],
            base_hidden: vec![],
            branch_hidden: vec![],
            branch_channels: None,
            branches_read_encoder: false,
        };
        let (model, trace) = fit(&shape, &ds, &cfg(LossKind::Ce), Monitor { dev: Some(&ds), ood: None }).unwrap();
        assert_eq!(trace.epochs.len(), 50);
        assert_eq!(trace.epochs.last().unwrap().dev_acc, Some(1.0));
        assert_eq!(trace.epochs[0].dev_acc, None);
        let acc = accuracy(&BaseView(&model), &ds, None, "ce").unwrap();
        assert_eq!(acc.accuracy, 1.0);
    }

    fn biased() -> crate::data::GeneratedData {
        generate(&BiasConfig {
            num_labels: 3,
            signal_dim: 5,
            bias_dim: None,
            bias_strength: 0.9,
            num_bias_channels: 1,
            signal_noise: 1.0,
            signal_scale: 1.0,
            train_size: 300,
            dev_size: 60,
            test_size: 60,
            ood_size: 90,
            seed: 3,
        })
        .unwrap()
    }

    fn biased_shape() -> ModelShape {
        ModelShape {
            num_labels: 3,
            signal_dim: 5,
            bias_dims: vec![3],
            base_input: BaseInput::SignalAndBias,
            encoder_widths: vec![],
            base_hidden: vec![],
            branch_hidden: vec![],
            branch_channels: None,
            branches_read_encoder: false,
        }
    }

    #[test]
    fn same_seed_gives_identical_parameters() {
        let data = biased();
        let mut c = cfg(LossKind::Poe);
        c.epochs = 5;
        let (a, ta) = fit(&biased_shape(), &data.train, &c, Monitor::default()).unwrap();
        let (b, tb) = fit(&biased_shape(), &data.train, &c, Monitor::default()).unwrap();
        let bits = |m: &TwoBranchModel| -> Vec<u64> { m.base_params().into_iter().chain(m.branch_params()).flatten().map(|x| x.to_bits()).collect() };
        assert_eq!(bits(&a), bits(&b));
        assert_eq!(ta, tb);
    }

    #[test]
    fn predictions_ignore_bias_branches() {
        let data = biased();
        let mut c = cfg(LossKind::Dfl);
        c.epochs = 3;
        let (model, _) = fit(&biased_shape(), &data.train, &c, Monitor::default()).unwrap();
        let before: Vec<usize> = data.dev.examples.iter().map(|e| predict(&model, e).unwrap()).collect();
        let mut mutated = model.clone();
        for p in mutated.branches[0].classifier.params_mut() {
            p.iter_mut().for_each(|w| *w = 123.0 - *w * 7.0);
        }
        let after: Vec<usize> = data.dev.examples.iter().map(|e| predict(&mutated, e).unwrap()).collect();
        assert_eq!(before, after);
    }

    #[test]
    fn untrained_zero_model_predicts_first_label() {
        let mut model = TwoBranchModel::init(&biased_shape(), &mut SeededRng::new(0)).unwrap();
        for p in model.base_params_mut() {
            p.iter_mut().for_each(|w| *w = 0.0);
        }
        let data = biased();
        assert!(data.dev.examples.iter().all(|e| predict(&model, e).unwrap() == 0));
    }

    #[test]
    fn branch_count_mismatch_is_rejected() {
        let data = biased();
        let mut shape = biased_shape();
        shape.branch_channels = Some(vec![]);
        assert!(fit(&shape, &data.train, &cfg(LossKind::Poe), Monitor::default()).is_err());
        let mut bad = cfg(LossKind::Ce);
        bad.lr = 0.0;
        assert!(fit(&biased_shape(), &data.train, &bad, Monitor::default()).is_err());
    }

    #[test]
    fn divergence_names_the_batch() {
        let data = biased();
        let mut c = cfg(LossKind::Ce);
        c.lr = f64::MAX / 4.0;
        c.epochs = 3;
        match fit(&biased_shape(), &data.train, &c, Monitor::default()) {
            Err(Error::Diverged { epoch, batch, .. }) => assert!(epoch < 3 && batch < 38),
            other => panic!("expected divergence, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn sweep_rows_and_equivalences() {
        let data = biased();
        let mut base = cfg(LossKind::Dfl);
        base.epochs = 4;
        let grid = SweepGrid { gamma: vec![0.0, 2.0], ..SweepGrid::default() };
        let rows = sweep(&grid, &base, &biased_shape(), &data.train, &[&data.dev], None).unwrap();
        assert_eq!(rows.len(), 2);
        let ce_cfg = TrainConfig { loss: LossSpec::new(LossKind::Ce), ..base.clone() };
        let (ce_model, _) = fit(&biased_shape(), &data.train, &ce_cfg, Monitor::default()).unwrap();
        let ce = accuracy(&BaseView(&ce_model), &data.dev, None, "ce").unwrap();
        assert!((rows[0].reports[0].accuracy - ce.accuracy).abs() <= 1e-12);

        let single = SweepGrid { gamma: vec![2.0], ..SweepGrid::default() };
        let rows1 = sweep(&single, &base, &biased_shape(), &data.train, &[&data.dev], None).unwrap();
        let (m, _) = fit(&biased_shape(), &data.train, &base, Monitor::default()).unwrap();
        assert_eq!(rows1[0].reports[0].accuracy, accuracy(&BaseView(&m), &data.dev, None, "x").unwrap().accuracy);
        assert_eq!(select_best(&rows, "dev").unwrap() < 2, true);
        assert!(select_best(&rows, "nope").is_err());
        let empty = SweepGrid { replicates: 0, ..SweepGrid::default() };
        assert!(sweep(&empty, &base, &biased_shape(), &data.train, &[&data.dev], None).is_err());
    }

    #[test]
    fn trace_csv_has_one_row_per_epoch() {
        let data = biased();
        let mut c = cfg(LossKind::Rubi);
        c.epochs = 3;
        c.eval_every = 2;
        let (_, trace) = fit(&biased_shape(), &data.train, &c, Monitor { dev: Some(&data.dev), ood: Some(&data.test_ood) }).unwrap();
        let mut buf = Vec::new();
        trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 4);
        assert!(text.starts_with("epoch,combined_loss,bias_loss,dev_acc,ood_acc"));
        assert!(trace.epochs[0].ood_acc.is_none() && trace.epochs[1].ood_acc.is_some());
    }
}

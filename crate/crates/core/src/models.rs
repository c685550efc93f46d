//! Linear and tanh-MLP classifiers with layer-by-layer analytic gradients,
//! the two-branch (base + bias-only) container, optimizers and checkpoints.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Example;
use crate::error::{Error, Result};
use crate::math::{ensure_finite, Matrix, SeededRng};

/// Fully connected layer `W x + b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn new(weight: Matrix, bias: Vec<f64>) -> Result<Self> {
        if weight.rows() != bias.len() {
            return Err(Error::dim(format!(
                "dense layer: {} output rows but {} biases",
                weight.rows(),
                bias.len()
            )));
        }
        ensure_finite(&bias, "bias")?;
        Ok(Dense { weight, bias })
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Dense {
            weight: Matrix::zeros(out_dim, in_dim),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn init(out_dim: usize, in_dim: usize, rng: &mut SeededRng) -> Self {
        let weight = Matrix::fan_in_uniform(out_dim, in_dim, rng);
        let bound = 1.0 / (in_dim as f64).sqrt();
        let bias = (0..out_dim).map(|_| rng.uniform(-bound, bound)).collect();
        Dense { weight, bias }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = self.weight.matvec(x)?;
        for (o, b) in out.iter_mut().zip(&self.bias) {
            *o += b;
        }
        Ok(out)
    }

    /// Returns (dW, db, dx) for upstream gradient `g` on the layer output.
    fn backward(&self, x: &[f64], g: &[f64]) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
        let (rows, cols) = (self.out_dim(), self.in_dim());
        if g.len() != rows || x.len() != cols {
            return Err(Error::dim(format!(
                "dense backward: layer {rows}x{cols}, input {}, upstream {}",
                x.len(),
                g.len()
            )));
        }
        let mut dw = vec![0.0; rows * cols];
        for (r, &gr) in g.iter().enumerate() {
            for (d, &xi) in dw[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *d = gr * xi;
            }
        }
        let dx = self.weight.matvec_transposed(g)?;
        Ok((dw, g.to_vec(), dx))
    }

    fn params(&self) -> [&[f64]; 2] {
        [self.weight.values(), &self.bias]
    }

    fn params_mut(&mut self) -> [&mut [f64]; 2] {
        [self.weight.values_mut(), &mut self.bias]
    }
}

/// Gradients laid out in the same tensor order as a parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub tensors: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &[&[f64]]) -> Self {
        Gradients {
            tensors: params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &Gradients, scale: f64) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += scale * y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.tensors.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn is_zero(&self) -> bool {
        self.tensors.iter().flatten().all(|&x| x == 0.0)
    }

    pub fn norm(&self) -> f64 {
        self.tensors.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn flat(&self) -> Vec<f64> {
        self.tensors.concat()
    }
}

/// Anything with an ordered list of parameter tensors.
pub trait Parameterized {
    fn params(&self) -> Vec<&[f64]>;
    fn params_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn zero_grads(&self) -> Gradients {
        Gradients::zeros_like(&self.params())
    }

    /// One optimizer step: `w ← w − lr·g` for SGD, the Adam update otherwise.
    fn apply_gradients(&mut self, grads: &Gradients, opt: &mut Optimizer) -> Result<()> {
        let mut params = self.params_mut();
        opt.step(&mut params, grads)
    }
}

/// Single affine map from features to label logits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    pub layer: Dense,
}

/// Tanh hidden layers followed by an affine output layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpClassifier {
    pub hidden: Vec<Dense>,
    pub output: Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Classifier {
    Linear(LinearClassifier),
    Mlp(MlpClassifier),
}

/// Activations kept from a forward pass; index 0 is the input.
#[derive(Debug, Clone)]
struct Trace {
    inputs: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

fn check_chain(layers: &[&Dense]) -> Result<()> {
    for pair in layers.windows(2) {
        if pair[0].out_dim() != pair[1].in_dim() {
            return Err(Error::dim(format!(
                "layer output {} does not feed next layer input {}",
                pair[0].out_dim(),
                pair[1].in_dim()
            )));
        }
    }
    Ok(())
}

impl Classifier {
    pub fn linear_zeros(num_labels: usize, in_dim: usize) -> Self {
        Classifier::Linear(LinearClassifier {
            layer: Dense::zeros(num_labels, in_dim),
        })
    }

    /// Hidden widths empty ⇒ linear classifier.
    pub fn init(in_dim: usize, hidden: &[usize], num_labels: usize, rng: &mut SeededRng) -> Self {
        if hidden.is_empty() {
            return Classifier::Linear(LinearClassifier {
                layer: Dense::init(num_labels, in_dim, rng),
            });
        }
        let mut layers = Vec::with_capacity(hidden.len());
        let mut prev = in_dim;
        for &w in hidden {
            layers.push(Dense::init(w, prev, rng));
            prev = w;
        }
        Classifier::Mlp(MlpClassifier {
            hidden: layers,
            output: Dense::init(num_labels, prev, rng),
        })
    }

    pub fn mlp(hidden: Vec<Dense>, output: Dense) -> Result<Self> {
        let mut chain: Vec<&Dense> = hidden.iter().collect();
        chain.push(&output);
        check_chain(&chain)?;
        Ok(Classifier::Mlp(MlpClassifier { hidden, output }))
    }

    fn layers(&self) -> Vec<&Dense> {
        match self {
            Classifier::Linear(l) => vec![&l.layer],
            Classifier::Mlp(m) => m.hidden.iter().chain(std::iter::once(&m.output)).collect(),
        }
    }

    fn layers_mut(&mut self) -> Vec<&mut Dense> {
        match self {
            Classifier::Linear(l) => vec![&mut l.layer],
            Classifier::Mlp(m) => m
                .hidden
                .iter_mut()
                .chain(std::iter::once(&mut m.output))
                .collect(),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers()[0].in_dim()
    }

    pub fn num_labels(&self) -> usize {
        self.layers().last().map_or(0, |l| l.out_dim())
    }

    pub fn validate(&self) -> Result<()> {
        let layers = self.layers();
        check_chain(&layers)?;
        for l in layers {
            if l.bias.len() != l.out_dim() {
                return Err(Error::dim("bias length differs from layer output"));
            }
            ensure_finite(l.weight.values(), "weight")?;
            ensure_finite(&l.bias, "bias")?;
        }
        Ok(())
    }

    fn trace(&self, x: &[f64]) -> Result<Trace> {
        let layers = self.layers();
        let (last, hidden) = layers.split_last().expect("classifier has an output layer");
        let mut inputs = vec![x.to_vec()];
        for layer in hidden {
            let z = layer.forward(inputs.last().unwrap())?;
            inputs.push(z.into_iter().map(f64::tanh).collect());
        }
        let logits = last.forward(inputs.last().unwrap())?;
        Ok(Trace { inputs, logits })
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.logits)
    }

    /// Parameter gradients for upstream `dL/dlogits`.
    pub fn backward(&self, x: &[f64], d_logits: &[f64]) -> Result<Gradients> {
        Ok(self.backward_with_input(x, d_logits)?.0)
    }

    /// Parameter gradients plus `dL/dx`.
    pub fn backward_with_input(&self, x: &[f64], d_logits: &[f64]) -> Result<(Gradients, Vec<f64>)> {
        let trace = self.trace(x)?;
        let layers = self.layers();
        let mut per_layer = vec![(Vec::new(), Vec::new()); layers.len()];
        let mut upstream = d_logits.to_vec();
        for i in (0..layers.len()).rev() {
            let (dw, db, dx) = layers[i].backward(&trace.inputs[i], &upstream)?;
            per_layer[i] = (dw, db);
            upstream = if i > 0 {
                // input i is tanh(z); dtanh = 1 - tanh²
                dx.iter()
                    .zip(&trace.inputs[i])
                    .map(|(g, a)| g * (1.0 - a * a))
                    .collect()
            } else {
                dx
            };
        }
        let tensors = per_layer.into_iter().flat_map(|(w, b)| [w, b]).collect();
        Ok((Gradients { tensors }, upstream))
    }
}

impl Parameterized for Classifier {
    fn params(&self) -> Vec<&[f64]> {
        self.layers().into_iter().flat_map(Dense::params).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers_mut().into_iter().flat_map(Dense::params_mut).collect()
    }
}

/// Stack of tanh layers shared by the base model; bias branches may read
/// its output but never send gradients into it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Encoder {
    pub layers: Vec<Dense>,
}

impl Encoder {
    pub fn init(in_dim: usize, widths: &[usize], rng: &mut SeededRng) -> Self {
        let mut layers = Vec::with_capacity(widths.len());
        let mut prev = in_dim;
        for &w in widths {
            layers.push(Dense::init(w, prev, rng));
            prev = w;
        }
        Encoder { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::in_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::out_dim)
    }

    fn trace(&self, x: &[f64]) -> Result<Vec<Vec<f64>>> {
        let mut acts = vec![x.to_vec()];
        for layer in &self.layers {
            let z = layer.forward(acts.last().unwrap())?;
            acts.push(z.into_iter().map(f64::tanh).collect());
        }
        Ok(acts)
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.trace(x)?.pop().unwrap())
    }

    fn backward_from_trace(&self, acts: &[Vec<f64>], d_out: &[f64]) -> Result<Gradients> {
        let mut per_layer = vec![(Vec::new(), Vec::new()); self.layers.len()];
        let mut upstream = d_out.to_vec();
        for i in (0..self.layers.len()).rev() {
            let through_tanh: Vec<f64> = upstream
                .iter()
                .zip(&acts[i + 1])
                .map(|(g, a)| g * (1.0 - a * a))
                .collect();
            let (dw, db, dx) = self.layers[i].backward(&acts[i], &through_tanh)?;
            per_layer[i] = (dw, db);
            upstream = dx;
        }
        Ok(Gradients {
            tensors: per_layer.into_iter().flat_map(|(w, b)| [w, b]).collect(),
        })
    }
}

impl Parameterized for Encoder {
    fn params(&self) -> Vec<&[f64]> {
        self.layers.iter().flat_map(Dense::params).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers.iter_mut().flat_map(Dense::params_mut).collect()
    }
}

/// What the base model sees of an example.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseInput {
    /// Signal features only.
    Signal,
    /// Signal features followed by every bias channel, i.e. the full input.
    #[default]
    SignalAndBias,
}

impl BaseInput {
    pub fn assemble(self, example: &Example) -> Vec<f64> {
        match self {
            BaseInput::Signal => example.x.clone(),
            BaseInput::SignalAndBias => {
                let mut v = example.x.clone();
                for b in &example.x_bias {
                    v.extend_from_slice(b);
                }
                v
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasBranch {
    pub classifier: Classifier,
    /// Index into `Example::x_bias`.
    pub channel: usize,
    /// Append the (detached) shared-encoder output to the bias features.
    #[serde(default)]
    pub reads_encoder: bool,
}

/// Base model plus K bias-only branches with disjoint parameter groups.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoBranchModel {
    pub base_input: BaseInput,
    pub encoder: Option<Encoder>,
    pub base: Classifier,
    pub branches: Vec<BiasBranch>,
}

/// Everything a backward pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    base_in: Vec<f64>,
    encoder_acts: Option<Vec<Vec<f64>>>,
    head_in: Vec<f64>,
    branch_in: Vec<Vec<f64>>,
    pub base_logits: Vec<f64>,
    pub bias_logits: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TwoBranchGrads {
    pub encoder: Option<Gradients>,
    pub base: Gradients,
    pub branches: Vec<Gradients>,
}

impl TwoBranchGrads {
    /// True when every base-group tensor (encoder included) is exactly zero.
    pub fn base_group_is_zero(&self) -> bool {
        self.base.is_zero() && self.encoder.as_ref().is_none_or(Gradients::is_zero)
    }

    pub fn bias_group_is_zero(&self) -> bool {
        self.branches.iter().all(Gradients::is_zero)
    }
}

/// Shape description used to build a [`TwoBranchModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    pub num_labels: usize,
    pub signal_dim: usize,
    pub bias_dims: Vec<usize>,
    #[serde(default)]
    pub base_input: BaseInput,
    #[serde(default)]
    pub encoder_widths: Vec<usize>,
    #[serde(default)]
    pub base_hidden: Vec<usize>,
    #[serde(default)]
    pub branch_hidden: Vec<usize>,
    /// Channel index per bias branch; defaults to one branch per channel.
    #[serde(default)]
    pub branch_channels: Option<Vec<usize>>,
    #[serde(default)]
    pub branches_read_encoder: bool,
}

impl TwoBranchModel {
    pub fn init(shape: &ModelShape, rng: &mut SeededRng) -> Result<Self> {
        if shape.num_labels < 2 {
            return Err(Error::Config("need at least two labels".into()));
        }
        let base_in = match shape.base_input {
            BaseInput::Signal => shape.signal_dim,
            BaseInput::SignalAndBias => shape.signal_dim + shape.bias_dims.iter().sum::<usize>(),
        };
        if base_in == 0 {
            return Err(Error::Config("base model has zero input features".into()));
        }
        let encoder = if shape.encoder_widths.is_empty() {
            None
        } else {
            Some(Encoder::init(base_in, &shape.encoder_widths, rng))
        };
        let head_in = encoder.as_ref().map_or(base_in, Encoder::output_dim);
        let base = Classifier::init(head_in, &shape.base_hidden, shape.num_labels, rng);
        let channels = shape
            .branch_channels
            .clone()
            .unwrap_or_else(|| (0..shape.bias_dims.len()).collect());
        let mut branches = Vec::with_capacity(channels.len());
        for channel in channels {
            let dim = *shape.bias_dims.get(channel).ok_or_else(|| {
                Error::Config(format!("bias branch reads missing channel {channel}"))
            })?;
            let reads_encoder = shape.branches_read_encoder && encoder.is_some();
            let extra = if reads_encoder { head_in } else { 0 };
            branches.push(BiasBranch {
                classifier: Classifier::init(dim + extra, &shape.branch_hidden, shape.num_labels, rng),
                channel,
                reads_encoder,
            });
        }
        Ok(TwoBranchModel {
            base_input: shape.base_input,
            encoder,
            base,
            branches,
        })
    }

    pub fn num_labels(&self) -> usize {
        self.base.num_labels()
    }

    pub fn num_branches(&self) -> usize {
        self.branches.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.base.validate()?;
        let head_in = match &self.encoder {
            Some(enc) => {
                let chain: Vec<&Dense> = enc.layers.iter().collect();
                check_chain(&chain)?;
                enc.output_dim()
            }
            None => self.base.input_dim(),
        };
        if head_in != self.base.input_dim() {
            return Err(Error::dim("encoder output does not match base head input"));
        }
        for (j, b) in self.branches.iter().enumerate() {
            b.classifier.validate()?;
            if b.classifier.num_labels() != self.num_labels() {
                return Err(Error::dim(format!("bias branch {j} has a different label space")));
            }
            if b.reads_encoder && self.encoder.is_none() {
                return Err(Error::Config(format!("bias branch {j} reads a missing encoder")));
            }
        }
        Ok(())
    }

    pub fn forward(&self, example: &Example) -> Result<ForwardPass> {
        let base_in = self.base_input.assemble(example);
        let (encoder_acts, head_in) = match &self.encoder {
            Some(enc) => {
                let acts = enc.trace(&base_in)?;
                let h = acts.last().unwrap().clone();
                (Some(acts), h)
            }
            None => (None, base_in.clone()),
        };
        let base_logits = self.base.forward(&head_in)?;
        let mut branch_in = Vec::with_capacity(self.branches.len());
        let mut bias_logits = Vec::with_capacity(self.branches.len());
        for b in &self.branches {
            let mut input = example
                .x_bias
                .get(b.channel)
                .ok_or_else(|| {
                    Error::dim(format!("example {} has no bias channel {}", example.id, b.channel))
                })?
                .clone();
            if b.reads_encoder {
                input.extend_from_slice(&head_in);
            }
            bias_logits.push(b.classifier.forward(&input)?);
            branch_in.push(input);
        }
        Ok(ForwardPass {
            base_in,
            encoder_acts,
            head_in,
            branch_in,
            base_logits,
            bias_logits,
        })
    }

    pub fn base_logits(&self, example: &Example) -> Result<Vec<f64>> {
        let base_in = self.base_input.assemble(example);
        match &self.encoder {
            Some(enc) => self.base.forward(&enc.forward(&base_in)?),
            None => self.base.forward(&base_in),
        }
    }

    /// Route `d_base` into the base group and each `d_bias[j]` into branch j.
    ///
    /// Gradient reaching an encoder output through a bias branch is dropped,
    /// so the shared encoder only ever sees the base-model gradient.
    pub fn backward(
        &self,
        pass: &ForwardPass,
        d_base: &[f64],
        d_bias: &[Vec<f64>],
    ) -> Result<TwoBranchGrads> {
        if d_bias.len() != self.branches.len() {
            return Err(Error::dim(format!(
                "{} bias gradients for {} branches",
                d_bias.len(),
                self.branches.len()
            )));
        }
        let (base, d_head_in) = self.base.backward_with_input(&pass.head_in, d_base)?;
        let encoder = match (&self.encoder, &pass.encoder_acts) {
            (Some(enc), Some(acts)) => Some(enc.backward_from_trace(acts, &d_head_in)?),
            _ => None,
        };
        let branches = self
            .branches
            .iter()
            .zip(&pass.branch_in)
            .zip(d_bias)
            .map(|((b, input), g)| b.classifier.backward(input, g))
            .collect::<Result<Vec<_>>>()?;
        debug_assert_eq!(pass.base_in.len(), self.base_input_dim());
        Ok(TwoBranchGrads {
            encoder,
            base,
            branches,
        })
    }

    fn base_input_dim(&self) -> usize {
        self.encoder
            .as_ref()
            .map_or(self.base.input_dim(), Encoder::input_dim)
    }

    pub fn zero_grads(&self) -> TwoBranchGrads {
        TwoBranchGrads {
            encoder: self.encoder.as_ref().map(Parameterized::zero_grads),
            base: self.base.zero_grads(),
            branches: self.branches.iter().map(|b| b.classifier.zero_grads()).collect(),
        }
    }

    /// Base-group parameters (encoder first, then head).
    pub fn base_params_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        if let Some(enc) = self.encoder.as_mut() {
            out.extend(enc.params_mut());
        }
        out.extend(self.base.params_mut());
        out
    }

    pub fn base_params(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        if let Some(enc) = self.encoder.as_ref() {
            out.extend(enc.params());
        }
        out.extend(self.base.params());
        out
    }

    pub fn branch_params(&self) -> Vec<&[f64]> {
        self.branches.iter().flat_map(|b| b.classifier.params()).collect()
    }
}

impl TwoBranchGrads {
    /// Base-group gradients flattened in [`TwoBranchModel::base_params_mut`] order.
    pub fn base_group(&self) -> Gradients {
        let mut tensors = Vec::new();
        if let Some(enc) = &self.encoder {
            tensors.extend(enc.tensors.iter().cloned());
        }
        tensors.extend(self.base.tensors.iter().cloned());
        Gradients { tensors }
    }

    pub fn add_scaled(&mut self, other: &TwoBranchGrads, base_scale: f64, bias_scale: f64) {
        if let (Some(a), Some(b)) = (self.encoder.as_mut(), other.encoder.as_ref()) {
            a.add_scaled(b, base_scale);
        }
        self.base.add_scaled(&other.base, base_scale);
        for (a, b) in self.branches.iter_mut().zip(&other.branches) {
            a.add_scaled(b, bias_scale);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam {
        #[serde(default = "default_beta1")]
        beta1: f64,
        #[serde(default = "default_beta2")]
        beta2: f64,
        #[serde(default = "default_eps")]
        eps: f64,
    },
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl OptimizerKind {
    pub fn adam() -> Self {
        OptimizerKind::Adam {
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Sgd
    }
}

/// Optimizer plus its running state for one parameter group.
#[derive(Debug, Clone)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Optimizer {
            kind,
            lr,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn sgd(lr: f64) -> Self {
        Optimizer::new(OptimizerKind::Sgd, lr)
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &Gradients) -> Result<()> {
        if params.len() != grads.tensors.len()
            || params.iter().zip(&grads.tensors).any(|(p, g)| p.len() != g.len())
        {
            return Err(Error::dim("gradient shapes do not match parameters"));
        }
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.iter_mut().zip(&grads.tensors) {
                    for (w, d) in p.iter_mut().zip(g) {
                        *w -= self.lr * d;
                    }
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                if self.first.is_empty() {
                    self.first = grads.tensors.iter().map(|g| vec![0.0; g.len()]).collect();
                    self.second = self.first.clone();
                }
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (i, (p, g)) in params.iter_mut().zip(&grads.tensors).enumerate() {
                    let (m, v) = (&mut self.first[i], &mut self.second[i]);
                    for k in 0..g.len() {
                        m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                        v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                        let m_hat = m[k] / c1;
                        let v_hat = v[k] / c2;
                        p[k] -= self.lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint<T> {
    version: u32,
    model: T,
}

/// JSON checkpoint; doubles are written in shortest round-trip form so a
/// save/load cycle is bit-exact.
pub fn save_checkpoint(model: &TwoBranchModel, path: &Path) -> Result<()> {
    let body = serde_json::to_string(&Checkpoint {
        version: CHECKPOINT_VERSION,
        model,
    })?;
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<TwoBranchModel> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ck: Checkpoint<TwoBranchModel> = serde_json::from_str(&text)?;
    if ck.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "checkpoint version {} (expected {CHECKPOINT_VERSION})",
            ck.version
        )));
    }
    ck.model.validate()?;
    Ok(ck.model)
}

//! Examples, datasets, the synthetic biased-data generator, bias feature
//! extractors, and the JSONL container format.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{argmax, ensure_finite, one_hot, SeededRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    pub id: String,
    pub x: Vec<f64>,
    pub x_bias: Vec<Vec<f64>>,
    pub y: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub premise: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitTag {
    Train,
    Dev,
    TestIndomain,
    TestOod,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Dev => "dev",
            SplitTag::TestIndomain => "test_indomain",
            SplitTag::TestOod => "test_ood",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub split: SplitTag,
    pub label_names: Vec<String>,
    pub signal_dim: usize,
    pub bias_dims: Vec<usize>,
    pub examples: Vec<Example>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        split: SplitTag,
        label_names: Vec<String>,
        signal_dim: usize,
        bias_dims: Vec<usize>,
    ) -> Result<Self> {
        if label_names.is_empty() {
            return Err(Error::Config("dataset needs at least one label name".into()));
        }
        Ok(Dataset {
            name: name.into(),
            split,
            label_names,
            signal_dim,
            bias_dims,
            examples: Vec::new(),
        })
    }

    pub fn num_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    /// Checks an example against the declared label space and dimensions.
    pub fn check(&self, ex: &Example) -> Result<()> {
        let bad = |message: String| Error::Record {
            id: ex.id.clone(),
            message,
        };
        if ex.y >= self.num_labels() {
            return Err(bad(format!("label {} outside {} labels", ex.y, self.num_labels())));
        }
        if ex.x.len() != self.signal_dim {
            return Err(bad(format!("x has {} features, expected {}", ex.x.len(), self.signal_dim)));
        }
        if ex.x_bias.len() != self.bias_dims.len() {
            return Err(bad(format!(
                "{} bias channels, expected {}",
                ex.x_bias.len(),
                self.bias_dims.len()
            )));
        }
        for (j, (b, &d)) in ex.x_bias.iter().zip(&self.bias_dims).enumerate() {
            if b.len() != d {
                return Err(bad(format!("bias channel {j} has {} features, expected {d}", b.len())));
            }
        }
        ensure_finite(&ex.x, "x").map_err(|e| bad(e.to_string()))?;
        for b in &ex.x_bias {
            ensure_finite(b, "x_bias").map_err(|e| bad(e.to_string()))?;
        }
        Ok(())
    }

    pub fn push(&mut self, ex: Example) -> Result<()> {
        self.check(&ex)?;
        self.examples.push(ex);
        Ok(())
    }

    /// Same header, no examples.
    pub fn empty_like(&self, name: impl Into<String>) -> Dataset {
        Dataset {
            name: name.into(),
            split: self.split,
            label_names: self.label_names.clone(),
            signal_dim: self.signal_dim,
            bias_dims: self.bias_dims.clone(),
            examples: Vec::new(),
        }
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_labels()];
        for ex in &self.examples {
            counts[ex.y] += 1;
        }
        counts
    }
}

/// Parameters of the synthetic biased benchmark.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BiasConfig {
    pub num_labels: usize,
    pub signal_dim: usize,
    /// Width of each bias channel; the first `num_labels` entries hold the
    /// (possibly corrupted) one-hot label, the rest are Gaussian distractors.
    #[serde(default)]
    pub bias_dim: Option<usize>,
    /// Probability that a bias channel encodes the true label in train/dev/test_indomain.
    pub bias_strength: f64,
    #[serde(default = "default_channels")]
    pub num_bias_channels: usize,
    pub signal_noise: f64,
    /// Distance of each class mean from the origin.
    #[serde(default = "default_signal_scale")]
    pub signal_scale: f64,
    pub train_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub ood_size: usize,
    pub seed: u64,
}

fn default_channels() -> usize {
    1
}

fn default_signal_scale() -> f64 {
    1.0
}

impl BiasConfig {
    pub fn bias_width(&self) -> usize {
        self.bias_dim.unwrap_or(self.num_labels)
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_labels < 2 {
            return err("num_labels must be at least 2");
        }
        if self.signal_dim < self.num_labels {
            return err("signal_dim must be at least num_labels");
        }
        if self.bias_width() < self.num_labels {
            return err("bias_dim must be at least num_labels");
        }
        let chance = 1.0 / self.num_labels as f64;
        if !(self.bias_strength >= chance - 1e-12 && self.bias_strength <= 1.0) {
            return Err(Error::Config(format!(
                "bias_strength {} outside [1/{}, 1]",
                self.bias_strength, self.num_labels
            )));
        }
        if !(self.signal_noise >= 0.0 && self.signal_noise.is_finite()) {
            return err("signal_noise must be finite and non-negative");
        }
        if !(self.signal_scale > 0.0 && self.signal_scale.is_finite()) {
            return err("signal_scale must be positive");
        }
        if [self.train_size, self.dev_size, self.test_size, self.ood_size].contains(&0) {
            return err("split sizes must be positive");
        }
        Ok(())
    }

    pub fn label_names(&self) -> Vec<String> {
        if self.num_labels == 3 {
            ["entailment", "neutral", "contradiction"].map(String::from).to_vec()
        } else {
            (0..self.num_labels).map(|i| format!("label{i}")).collect()
        }
    }
}

/// All generated splits. `test_ood` balances every bias channel jointly;
/// `test_ood_channels[j]` (present when K > 1) balances channel j only.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub train: Dataset,
    pub dev: Dataset,
    pub test_indomain: Dataset,
    pub test_ood: Dataset,
    pub test_ood_channels: Vec<Dataset>,
}

impl GeneratedData {
    pub fn all(&self) -> Vec<&Dataset> {
        let mut v = vec![&self.train, &self.dev, &self.test_indomain, &self.test_ood];
        v.extend(self.test_ood_channels.iter());
        v
    }
}

struct Generator<'a> {
    cfg: &'a BiasConfig,
    means: Vec<Vec<f64>>,
}

impl<'a> Generator<'a> {
    fn new(cfg: &'a BiasConfig) -> Self {
        // Regular simplex: centred one-hot vectors in the first |Y| signal dims,
        // scaled so every mean sits at distance `signal_scale` from the origin.
        let k = cfg.num_labels as f64;
        let norm = ((k - 1.0) / k).sqrt();
        let means = (0..cfg.num_labels)
            .map(|c| {
                let mut m = vec![0.0; cfg.signal_dim];
                for (i, v) in m.iter_mut().take(cfg.num_labels).enumerate() {
                    let centred = if i == c { 1.0 - 1.0 / k } else { -1.0 / k };
                    *v = cfg.signal_scale * centred / norm;
                }
                m
            })
            .collect();
        Generator { cfg, means }
    }

    fn signal(&self, y: usize, rng: &mut SeededRng) -> Vec<f64> {
        self.means[y]
            .iter()
            .map(|m| m + self.cfg.signal_noise * rng.standard_normal())
            .collect()
    }

    fn biased_value(&self, y: usize, rng: &mut SeededRng) -> usize {
        let k = self.cfg.num_labels;
        if rng.bernoulli(self.cfg.bias_strength) {
            y
        } else {
            // uniform over the other labels
            let other = rng.below(k - 1);
            if other >= y {
                other + 1
            } else {
                other
            }
        }
    }

    fn channel(&self, value: usize, rng: &mut SeededRng) -> Vec<f64> {
        let mut v = one_hot(value, self.cfg.num_labels);
        for _ in self.cfg.num_labels..self.cfg.bias_width() {
            v.push(self.cfg.signal_noise * rng.standard_normal());
        }
        v
    }

    fn dataset(&self, name: &str, split: SplitTag) -> Dataset {
        Dataset {
            name: name.to_string(),
            split,
            label_names: self.cfg.label_names(),
            signal_dim: self.cfg.signal_dim,
            bias_dims: vec![self.cfg.bias_width(); self.cfg.num_bias_channels],
            examples: Vec::new(),
        }
    }

    fn in_domain(&self, name: &str, split: SplitTag, n: usize, rng: &mut SeededRng) -> Dataset {
        let mut ds = self.dataset(name, split);
        for i in 0..n {
            let y = rng.below(self.cfg.num_labels);
            let x = self.signal(y, rng);
            let x_bias = (0..self.cfg.num_bias_channels)
                .map(|_| {
                    let v = self.biased_value(y, rng);
                    self.channel(v, rng)
                })
                .collect();
            ds.examples.push(Example {
                id: format!("{name}-{i}"),
                x,
                x_bias,
                y,
                premise: None,
                hypothesis: None,
            });
        }
        ds
    }

    /// Every (bias values on `balanced`, label) cell gets the same count;
    /// `n` is rounded up to a multiple of the cell count.
    fn balanced(&self, name: &str, balanced: &[usize], n: usize, rng: &mut SeededRng) -> Dataset {
        let k = self.cfg.num_labels;
        let cells = k.pow(balanced.len() as u32 + 1);
        let per_cell = n.div_ceil(cells);
        let mut ds = self.dataset(name, SplitTag::TestOod);
        let mut i = 0;
        for cell in 0..cells {
            let y = cell % k;
            let mut rest = cell / k;
            let mut fixed = HashMap::new();
            for &ch in balanced {
                fixed.insert(ch, rest % k);
                rest /= k;
            }
            for _ in 0..per_cell {
                let x = self.signal(y, rng);
                let x_bias = (0..self.cfg.num_bias_channels)
                    .map(|ch| {
                        let v = match fixed.get(&ch) {
                            Some(&v) => v,
                            None => self.biased_value(y, rng),
                        };
                        self.channel(v, rng)
                    })
                    .collect();
                ds.examples.push(Example {
                    id: format!("{name}-{i}"),
                    x,
                    x_bias,
                    y,
                    premise: None,
                    hypothesis: None,
                });
                i += 1;
            }
        }
        rng.shuffle(&mut ds.examples);
        ds
    }
}

/// Generate train/dev/test_indomain/test_ood splits from one seed.
pub fn generate(cfg: &BiasConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let gen = Generator::new(cfg);
    let root = SeededRng::new(cfg.seed);
    let train = gen.in_domain("train", SplitTag::Train, cfg.train_size, &mut root.derive(1));
    let dev = gen.in_domain("dev", SplitTag::Dev, cfg.dev_size, &mut root.derive(2));
    let test_indomain = gen.in_domain(
        "test_indomain",
        SplitTag::TestIndomain,
        cfg.test_size,
        &mut root.derive(3),
    );
    let all: Vec<usize> = (0..cfg.num_bias_channels).collect();
    let test_ood = gen.balanced("test_ood", &all, cfg.ood_size, &mut root.derive(4));
    let test_ood_channels = if cfg.num_bias_channels > 1 {
        (0..cfg.num_bias_channels)
            .map(|j| {
                gen.balanced(
                    &format!("test_ood_b{j}"),
                    &[j],
                    cfg.ood_size,
                    &mut root.derive(10 + j as u64),
                )
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(GeneratedData {
        train,
        dev,
        test_indomain,
        test_ood,
        test_ood_channels,
    })
}

/// Value a one-hot-style bias channel encodes (argmax over the label slots).
pub fn bias_value(ex: &Example, channel: usize, num_labels: usize) -> Result<usize> {
    let slot = ex
        .x_bias
        .get(channel)
        .ok_or_else(|| Error::MissingPayload(format!("{} has no bias channel {channel}", ex.id)))?;
    if slot.len() < num_labels {
        return Err(Error::dim(format!("bias channel {channel} narrower than label space")));
    }
    argmax(&slot[..num_labels])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BiasExtractor {
    /// The stored bias slot for the given channel.
    HypothesisOnly { channel: usize },
    /// Word-overlap heuristics computed from premise/hypothesis tokens.
    OverlapHeuristics,
}

/// Bias feature vector for one example.
pub fn extract_bias_features(ex: &Example, extractor: BiasExtractor) -> Result<Vec<f64>> {
    match extractor {
        BiasExtractor::HypothesisOnly { channel } => ex
            .x_bias
            .get(channel)
            .cloned()
            .ok_or_else(|| Error::MissingPayload(format!("{} has no bias channel {channel}", ex.id))),
        BiasExtractor::OverlapHeuristics => {
            let (Some(p), Some(h)) = (&ex.premise, &ex.hypothesis) else {
                return Err(Error::MissingPayload(format!(
                    "{} carries no premise/hypothesis tokens",
                    ex.id
                )));
            };
            Ok(overlap_features(p, h).to_vec())
        }
    }
}

/// `[all hypothesis words in premise, contiguous subsequence, ordered
/// subsequence, shared tokens / premise length]`.
pub fn overlap_features<S: AsRef<str>>(premise: &[S], hypothesis: &[S]) -> [f64; 4] {
    let p: Vec<&str> = premise.iter().map(AsRef::as_ref).collect();
    let h: Vec<&str> = hypothesis.iter().map(AsRef::as_ref).collect();
    let p_set: HashSet<&str> = p.iter().copied().collect();
    let all_in = h.iter().all(|w| p_set.contains(w));
    let contiguous = h.is_empty() || p.windows(h.len()).any(|w| w == h.as_slice());
    let mut it = p.iter();
    let subsequence = h.iter().all(|w| it.any(|q| q == w));
    let ratio = if p.is_empty() {
        0.0
    } else {
        let mut remaining: HashMap<&str, usize> = HashMap::new();
        for w in &p {
            *remaining.entry(w).or_default() += 1;
        }
        let mut shared = 0usize;
        for w in &h {
            if let Some(c) = remaining.get_mut(w) {
                if *c > 0 {
                    *c -= 1;
                    shared += 1;
                }
            }
        }
        shared as f64 / p.len() as f64
    };
    let b = |v: bool| if v { 1.0 } else { 0.0 };
    [b(all_in), b(contiguous), b(subsequence), ratio]
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    name: String,
    split: SplitTag,
    num_labels: usize,
    label_names: Vec<String>,
    signal_dim: usize,
    bias_dims: Vec<usize>,
}

/// First line: header object; then one example per line.
pub fn save_jsonl(ds: &Dataset, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let header = Header {
        name: ds.name.clone(),
        split: ds.split,
        num_labels: ds.num_labels(),
        label_names: ds.label_names.clone(),
        signal_dim: ds.signal_dim,
        bias_dims: ds.bias_dims.clone(),
    };
    let io = |e| Error::io(path, e);
    serde_json::to_writer(&mut w, &header)?;
    w.write_all(b"\n").map_err(io)?;
    for ex in &ds.examples {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

pub fn load_jsonl(path: &Path) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut lines = BufReader::new(file).lines();
    let first = match lines.next() {
        Some(l) => l.map_err(|e| Error::io(path, e))?,
        None => return Err(parse_err(1, "missing header line".into())),
    };
    let header: Header =
        serde_json::from_str(&first).map_err(|e| parse_err(1, format!("bad header: {e}")))?;
    if header.num_labels != header.label_names.len() {
        return Err(parse_err(1, "num_labels disagrees with label_names".into()));
    }
    let mut ds = Dataset::new(
        header.name,
        header.split,
        header.label_names,
        header.signal_dim,
        header.bias_dims,
    )
    .map_err(|e| parse_err(1, e.to_string()))?;
    for (idx, line) in lines.enumerate() {
        let lineno = idx + 2;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line).map_err(|e| parse_err(lineno, e.to_string()))?;
        ds.push(ex)?;
    }
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(p: f64, n: usize) -> BiasConfig {
        BiasConfig {
            num_labels: 3,
            signal_dim: 6,
            bias_dim: None,
            bias_strength: p,
            num_bias_channels: 1,
            signal_noise: 0.5,
            signal_scale: 1.0,
            train_size: n,
            dev_size: 30,
            test_size: 30,
            ood_size: 90,
            seed: 17,
        }
    }

    /// Plug-in mutual information between bias value and label, in nats.
    fn mutual_information(ds: &Dataset) -> f64 {
        let k = ds.num_labels();
        let mut joint = vec![vec![0.0; k]; k];
        for ex in &ds.examples {
            joint[bias_value(ex, 0, k).unwrap()][ex.y] += 1.0;
        }
        let n = ds.len() as f64;
        let pb: Vec<f64> = joint.iter().map(|r| r.iter().sum::<f64>() / n).collect();
        let py: Vec<f64> = (0..k).map(|y| joint.iter().map(|r| r[y]).sum::<f64>() / n).collect();
        let mut mi = 0.0;
        for b in 0..k {
            for y in 0..k {
                let pj = joint[b][y] / n;
                if pj > 0.0 {
                    mi += pj * (pj / (pb[b] * py[y])).ln();
                }
            }
        }
        mi
    }

    fn agreement(ds: &Dataset) -> f64 {
        let k = ds.num_labels();
        ds.examples
            .iter()
            .filter(|ex| bias_value(ex, 0, k).unwrap() == ex.y)
            .count() as f64
            / ds.len() as f64
    }

    #[test]
    fn chance_bias_carries_no_information() {
        let data = generate(&cfg(1.0 / 3.0, 10_000)).unwrap();
        assert!(mutual_information(&data.train) < 0.01);
    }

    #[test]
    fn agreement_rate_tracks_strength() {
        let data = generate(&cfg(0.9, 10_000)).unwrap();
        let a = agreement(&data.train);
        // binomial sd at n=1e4 is 0.003
        assert!((0.88..=0.92).contains(&a), "agreement {a}");
        assert!((a - 0.9).abs() < 0.02);
    }

    #[test]
    fn ood_split_is_exactly_balanced() {
        let data = generate(&cfg(0.9, 100)).unwrap();
        let k = 3;
        let mut cells = vec![0usize; k * k];
        for ex in &data.test_ood.examples {
            cells[bias_value(ex, 0, k).unwrap() * k + ex.y] += 1;
        }
        assert!(cells.iter().all(|&c| c == data.test_ood.len() / 9));
        assert_eq!(data.test_ood.len(), 90);
    }

    #[test]
    fn ood_rounds_up_to_full_cells() {
        let mut c = cfg(0.9, 100);
        c.ood_size = 100;
        assert_eq!(generate(&c).unwrap().test_ood.len(), 108);
    }

    #[test]
    fn per_channel_ood_sets_balance_their_channel() {
        let mut c = cfg(0.9, 100);
        c.num_bias_channels = 2;
        let data = generate(&c).unwrap();
        assert_eq!(data.test_ood_channels.len(), 2);
        assert_eq!(data.test_ood.len() % 27, 0);
        for (j, ds) in data.test_ood_channels.iter().enumerate() {
            let mut cells = vec![0usize; 9];
            for ex in &ds.examples {
                cells[bias_value(ex, j, 3).unwrap() * 3 + ex.y] += 1;
            }
            assert!(cells.iter().all(|&n| n == ds.len() / 9));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        assert!(generate(&cfg(0.2, 100)).is_err());
        assert!(generate(&cfg(1.1, 100)).is_err());
        assert!(generate(&cfg(0.9, 0)).is_err());
    }

    #[test]
    fn generation_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a.jsonl");
        let b = dir.path().join("b.jsonl");
        save_jsonl(&generate(&cfg(0.9, 200)).unwrap().train, &a).unwrap();
        save_jsonl(&generate(&cfg(0.9, 200)).unwrap().train, &b).unwrap();
        assert_eq!(std::fs::read(a).unwrap(), std::fs::read(b).unwrap());
    }

    #[test]
    fn overlap_examples() {
        let s = |t: &str| t.split_whitespace().map(String::from).collect::<Vec<_>>();
        assert_eq!(overlap_features(&s("a b c"), &s("a b c")), [1.0, 1.0, 1.0, 1.0]);
        assert_eq!(overlap_features(&s("a b c"), &s("d e")), [0.0, 0.0, 0.0, 0.0]);
        let f = overlap_features(&s("kids work at computers"), &s("kids work"));
        assert_eq!(f, [1.0, 1.0, 1.0, 0.5]);
        let f = overlap_features(&s("the doctor saw the lawyer"), &s("the lawyer saw the doctor"));
        assert_eq!(f[0], 1.0);
        assert_eq!(f[1], 0.0);
        assert_eq!(f[3], 1.0);
    }

    #[test]
    fn extractor_requires_payload() {
        let ex = Example {
            id: "q".into(),
            x: vec![],
            x_bias: vec![],
            y: 0,
            premise: None,
            hypothesis: None,
        };
        assert!(matches!(
            extract_bias_features(&ex, BiasExtractor::OverlapHeuristics),
            Err(Error::MissingPayload(_))
        ));
        assert!(extract_bias_features(&ex, BiasExtractor::HypothesisOnly { channel: 0 }).is_err());
    }

    #[test]
    fn jsonl_round_trip_and_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut ds = generate(&cfg(0.9, 50)).unwrap().dev;
        ds.examples[0].premise = Some(vec!["a".into(), "b".into()]);
        ds.examples[0].hypothesis = Some(vec!["a".into()]);
        save_jsonl(&ds, &path).unwrap();
        assert_eq!(load_jsonl(&path).unwrap(), ds);

        let empty = ds.empty_like("dev");
        save_jsonl(&empty, &path).unwrap();
        let back = load_jsonl(&path).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.label_names, ds.label_names);
    }

    #[test]
    fn truncated_line_is_reported_by_number() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let ds = generate(&cfg(0.9, 50)).unwrap().dev;
        save_jsonl(&ds, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let cut = lines[6].len() / 2;
        lines[6].truncate(cut);
        std::fs::write(&path, lines.join("\n")).unwrap();
        match load_jsonl(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 7),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn dimension_mismatch_names_record() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let mut ds = generate(&cfg(0.9, 50)).unwrap().dev;
        ds.examples[3].x.push(0.0);
        save_jsonl(&ds, &path).unwrap();
        match load_jsonl(&path) {
            Err(Error::Record { id, .. }) => assert_eq!(id, ds.examples[3].id),
            other => panic!("expected record error, got {other:?}"),
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]

            #[test]
            fn joint_ood_cells_are_equal_and_generation_repeats(
                k in 2usize..5,
                channels in 1usize..3,
                p_frac in 0.0f64..=1.0,
                ood in 1usize..120,
                seed in any::<u64>(),
            ) {
                let chance = 1.0 / k as f64;
                let c = BiasConfig {
                    num_labels: k,
                    signal_dim: k + 1,
                    bias_strength: chance + p_frac * (1.0 - chance),
                    num_bias_channels: channels,
                    ood_size: ood,
                    train_size: 20,
                    seed,
                    ..cfg(0.9, 20)
                };
                let data = generate(&c).unwrap();
                let ds = &data.test_ood;
                let cells = k.pow(channels as u32 + 1);
                prop_assert!(ds.len() >= ood && ds.len() % cells == 0);
                let mut counts = vec![0usize; cells];
                for ex in &ds.examples {
                    let mut idx = ex.y;
                    for j in 0..channels {
                        idx = idx * k + bias_value(ex, j, k).unwrap();
                    }
                    counts[idx] += 1;
                }
                prop_assert!(counts.iter().all(|&n| n == ds.len() / cells));
                prop_assert_eq!(generate(&c).unwrap(), data);
            }
        }
    }
}

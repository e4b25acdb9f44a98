use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Head, Policy, PolicyError, Vocabulary};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum Architecture {
    /// Log-linear softmax. Each reason context (start-of-sequence or previous
    /// reason token) owns a row of logit biases plus a feature weight matrix;
    /// the score head owns one such row.
    Tabular,
    /// A tanh trunk over the item features feeding a reason head (plus a
    /// previous-token bias table) and a score head.
    Mlp { hidden: Vec<usize> },
}

/// Flat parameter vector together with the descriptor that gives it shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub arch: Architecture,
    pub vocab: Vocabulary,
    pub feature_dim: usize,
    pub values: Vec<f64>,
}

/// Offsets of a dense layer `out x in` (row-major) followed by `out` biases.
#[derive(Debug, Clone, Copy)]
struct Dense {
    offset: usize,
    inputs: usize,
    outputs: usize,
}

impl Dense {
    fn len(&self) -> usize {
        self.outputs * (self.inputs + 1)
    }

    fn bias(&self) -> usize {
        self.offset + self.outputs * self.inputs
    }

    fn forward(&self, p: &[f64], x: &[f64], out: &mut [f64]) {
        let b = self.bias();
        for (j, o) in out.iter_mut().enumerate() {
            let row = &p[self.offset + j * self.inputs..self.offset + (j + 1) * self.inputs];
            *o = p[b + j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        }
    }

    /// Accumulates parameter gradients; returns `d/dx` when `want_input`.
    fn backward(&self, p: &[f64], x: &[f64], dout: &[f64], grad: &mut [f64], want_input: bool) -> Vec<f64> {
        let b = self.bias();
        let mut dx = if want_input { vec![0.0; self.inputs] } else { Vec::new() };
        for (j, &g) in dout.iter().enumerate() {
            if g == 0.0 {
                continue;
            }
            grad[b + j] += g;
            let base = self.offset + j * self.inputs;
            for (k, &v) in x.iter().enumerate() {
                grad[base + k] += g * v;
                if want_input {
                    dx[k] += g * p[base + k];
                }
            }
        }
        dx
    }
}

/// Parameter layout for either architecture.
struct Layout {
    trunk: Vec<Dense>,
    /// Tabular: one dense row per reason context. MLP: a single shared head.
    reason: Vec<Dense>,
    /// MLP only: `(R + 1) x R` previous-token bias table.
    prev_table: Option<usize>,
    score: Dense,
    total: usize,
}

impl Layout {
    fn new(arch: &Architecture, vocab: &Vocabulary, d: usize) -> Result<Self, PolicyError> {
        let r = vocab.reason_tokens;
        let s = vocab.score_tokens();
        let mut offset = 0;
        let mut take = |inputs: usize, outputs: usize| {
            let layer = Dense { offset, inputs, outputs };
            offset += layer.len();
            layer
        };
        match arch {
            Architecture::Tabular => {
                let reason: Vec<Dense> = (0..=r).map(|_| take(d, r)).collect();
                let score = take(d, s);
                Ok(Self {
                    trunk: Vec::new(),
                    reason,
                    prev_table: None,
                    score,
                    total: offset,
                })
            }
            Architecture::Mlp { hidden } => {
                if hidden.is_empty() || hidden.contains(&0) {
                    return Err(PolicyError::Invalid(
                        "mlp needs at least one non-empty hidden layer".into(),
                    ));
                }
                let mut trunk = Vec::new();
                let mut prev = d;
                for &h in hidden {
                    trunk.push(take(prev, h));
                    prev = h;
                }
                let reason = vec![take(prev, r)];
                let score = take(prev, s);
                let prev_table = offset;
                offset += (r + 1) * r;
                Ok(Self {
                    trunk,
                    reason,
                    prev_table: Some(prev_table),
                    score,
                    total: offset,
                })
            }
        }
    }

    fn context_row(prev: Option<u32>) -> usize {
        prev.map_or(0, |t| t as usize + 1)
    }
}

impl PolicyParams {
    pub fn from_parts(
        arch: Architecture,
        vocab: Vocabulary,
        feature_dim: usize,
        values: Vec<f64>,
    ) -> Result<Self, PolicyError> {
        vocab.validate().map_err(PolicyError::Invalid)?;
        let layout = Layout::new(&arch, &vocab, feature_dim)?;
        if layout.total != values.len() {
            return Err(PolicyError::ArchitectureMismatch {
                expected: layout.total,
                got: values.len(),
            });
        }
        Ok(Self {
            arch,
            vocab,
            feature_dim,
            values,
        })
    }

    pub fn param_count(arch: &Architecture, vocab: &Vocabulary, feature_dim: usize) -> Result<usize, PolicyError> {
        Layout::new(arch, vocab, feature_dim).map(|l| l.total)
    }

    /// Tabular policy with all logits zero, i.e. uniform at every step.
    pub fn tabular_zeros(vocab: Vocabulary, feature_dim: usize) -> Self {
        let n = Self::param_count(&Architecture::Tabular, &vocab, feature_dim).expect("tabular layout");
        Self {
            arch: Architecture::Tabular,
            vocab,
            feature_dim,
            values: vec![0.0; n],
        }
    }

    pub fn tabular_random<R: Rng + ?Sized>(vocab: Vocabulary, feature_dim: usize, scale: f64, rng: &mut R) -> Self {
        let mut p = Self::tabular_zeros(vocab, feature_dim);
        for v in &mut p.values {
            let z: f64 = StandardNormal.sample(rng);
            *v = scale * z;
        }
        p
    }

    /// Glorot-scaled trunk, small output heads.
    pub fn mlp_random<R: Rng + ?Sized>(
        vocab: Vocabulary,
        feature_dim: usize,
        hidden: &[usize],
        rng: &mut R,
    ) -> Result<Self, PolicyError> {
        let arch = Architecture::Mlp { hidden: hidden.to_vec() };
        let layout = Layout::new(&arch, &vocab, feature_dim)?;
        let mut values = vec![0.0; layout.total];
        let mut fill = |layer: &Dense, std: f64| {
            for v in &mut values[layer.offset..layer.bias()] {
                let z: f64 = StandardNormal.sample(rng);
                *v = std * z;
            }
        };
        for layer in &layout.trunk {
            fill(layer, (2.0 / (layer.inputs + layer.outputs) as f64).sqrt());
        }
        fill(&layout.reason[0], 0.1);
        fill(&layout.score, 0.1);
        Self::from_parts(arch, vocab, feature_dim, values)
    }

    fn layout(&self) -> Layout {
        Layout::new(&self.arch, &self.vocab, self.feature_dim).expect("validated at construction")
    }

    /// Offset of the score-head bias block.
    pub fn score_bias_offset(&self) -> usize {
        self.layout().score.bias()
    }

    /// Offset and length of the score-head parameters (weights then biases).
    pub fn score_head_range(&self) -> std::ops::Range<usize> {
        let s = self.layout().score;
        s.offset..s.offset + s.len()
    }

    fn trunk_forward(&self, layout: &Layout, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        for layer in &layout.trunk {
            let mut z = vec![0.0; layer.outputs];
            layer.forward(&self.values, acts.last().expect("input"), &mut z);
            for v in &mut z {
                *v = v.tanh();
            }
            acts.push(z);
        }
        acts
    }
}

impl Policy for PolicyParams {
    fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    fn params(&self) -> &[f64] {
        &self.values
    }

    fn params_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    fn logits(&self, features: &[f64], head: Head) -> Vec<f64> {
        let layout = self.layout();
        let acts = self.trunk_forward(&layout, features);
        let h = acts.last().expect("trunk output");
        match head {
            Head::Score => {
                let mut out = vec![0.0; layout.score.outputs];
                layout.score.forward(&self.values, h, &mut out);
                out
            }
            Head::Reason { prev } => {
                let row = Layout::context_row(prev);
                let r = self.vocab.reason_tokens;
                let dense = match self.arch {
                    Architecture::Tabular => layout.reason[row],
                    Architecture::Mlp { .. } => layout.reason[0],
                };
                let mut out = vec![0.0; r];
                dense.forward(&self.values, h, &mut out);
                if let Some(table) = layout.prev_table {
                    for (j, o) in out.iter_mut().enumerate() {
                        *o += self.values[table + row * r + j];
                    }
                }
                out
            }
        }
    }

    fn accumulate_grad(&self, features: &[f64], head: Head, dlogits: &[f64], grad: &mut [f64]) {
        let layout = self.layout();
        let acts = self.trunk_forward(&layout, features);
        let h = acts.last().expect("trunk output");
        let want_input = !layout.trunk.is_empty();
        let mut dh = match head {
            Head::Score => layout.score.backward(&self.values, h, dlogits, grad, want_input),
            Head::Reason { prev } => {
                let row = Layout::context_row(prev);
                let r = self.vocab.reason_tokens;
                if let Some(table) = layout.prev_table {
                    for (j, &g) in dlogits.iter().enumerate() {
                        grad[table + row * r + j] += g;
                    }
                }
                let dense = match self.arch {
                    Architecture::Tabular => layout.reason[row],
                    Architecture::Mlp { .. } => layout.reason[0],
                };
                dense.backward(&self.values, h, dlogits, grad, want_input)
            }
        };
        for (l, layer) in layout.trunk.iter().enumerate().rev() {
            // acts[l + 1] = tanh(z_l)
            let a = &acts[l + 1];
            let dz: Vec<f64> = dh.iter().zip(a).map(|(g, t)| g * (1.0 - t * t)).collect();
            dh = layer.backward(&self.values, &acts[l], &dz, grad, l > 0);
        }
    }
}

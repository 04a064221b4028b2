//! Feature concatenation, label fusion, the dense classification head and
//! the training loss.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::affect::WordVectors;
use crate::embedding::words;
use crate::tensor::{Graph, ParamId, ParamStore, Result, Tensor, TensorError, Var};

/// Ordered stance labels with their frozen, mean-pooled embeddings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelSet {
    names: Vec<String>,
}

impl LabelSet {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() < 2 {
            return Err(TensorError::Invalid(format!(
                "need at least 2 labels, got {}",
                names.len()
            )));
        }
        for (i, n) in names.iter().enumerate() {
            if n.trim().is_empty() {
                return Err(TensorError::Invalid("empty label name".into()));
            }
            if names[..i].contains(n) {
                return Err(TensorError::Invalid(format!("duplicate label {n:?}")));
            }
        }
        Ok(Self { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, index: usize) -> &str {
        &self.names[index]
    }

    /// `[L, d]` rows: the mean word vector of each label name's words.
    pub fn embeddings(&self, vectors: &dyn WordVectors) -> std::result::Result<Tensor, String> {
        let d = vectors.d_model();
        let mut data = Vec::with_capacity(self.len() * d);
        for name in &self.names {
            let ws = words(name);
            if ws.is_empty() {
                return Err(format!("label {name:?} has no words"));
            }
            let mut row = vec![0.0; d];
            for w in &ws {
                let v = vectors
                    .word_vector(w)
                    .ok_or_else(|| format!("no word vector for label word {w:?}"))?;
                if v.len() != d {
                    return Err(format!("label word {w:?} has width {}, expected {d}", v.len()));
                }
                row.iter_mut().zip(&v).for_each(|(r, x)| *r += x);
            }
            let n = ws.len() as f64;
            data.extend(row.into_iter().map(|r| r / n));
        }
        Tensor::new(vec![self.len(), d], data).map_err(|e| e.to_string())
    }
}

fn find(params: &ParamStore, name: &str) -> Result<ParamId> {
    params
        .id(name)
        .ok_or_else(|| TensorError::Invalid(format!("missing parameter {name}")))
}

/// Weight `[fan_in, fan_out]` uniform in `±1/√fan_in` and a zero bias.
fn dense(
    params: &mut ParamStore,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    init: &mut dyn FnMut() -> f64,
) -> Result<(ParamId, ParamId)> {
    let bound = 1.0 / (fan_in as f64).sqrt();
    let w = params.insert(
        format!("{prefix}.w"),
        Tensor::from_fn(&[fan_in, fan_out], || init() * bound),
    )?;
    let b = params.insert(format!("{prefix}.b"), Tensor::zeros(&[fan_out]))?;
    Ok((w, b))
}

fn dense_from(params: &ParamStore, prefix: &str) -> Result<(ParamId, ParamId)> {
    Ok((find(params, &format!("{prefix}.w"))?, find(params, &format!("{prefix}.b"))?))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub w: Var,
    pub b: Var,
}

/// Projection `4d → d` and the label-shared transforms `d → d/2 → d/4`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionParams {
    pub proj: (ParamId, ParamId),
    pub first: (ParamId, ParamId),
    pub second: (ParamId, ParamId),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FusionVars {
    pub proj: Dense,
    pub first: Dense,
    pub second: Dense,
}

fn bind_dense<'p>(g: &mut Graph<'p>, params: &'p ParamStore, (w, b): (ParamId, ParamId)) -> Dense {
    Dense {
        w: g.param(params, w),
        b: g.param(params, b),
    }
}

impl FusionParams {
    pub fn register(params: &mut ParamStore, d: usize, init: &mut dyn FnMut() -> f64) -> Result<Self> {
        check_width(d)?;
        Ok(Self {
            proj: dense(params, "fusion.proj", 4 * d, d, init)?,
            first: dense(params, "fusion.first", d, d / 2, init)?,
            second: dense(params, "fusion.second", d / 2, d / 4, init)?,
        })
    }

    pub fn from_store(params: &ParamStore) -> Result<Self> {
        Ok(Self {
            proj: dense_from(params, "fusion.proj")?,
            first: dense_from(params, "fusion.first")?,
            second: dense_from(params, "fusion.second")?,
        })
    }

    pub fn bind<'p>(&self, g: &mut Graph<'p>, params: &'p ParamStore) -> FusionVars {
        FusionVars {
            proj: bind_dense(g, params, self.proj),
            first: bind_dense(g, params, self.first),
            second: bind_dense(g, params, self.second),
        }
    }
}

fn check_width(d: usize) -> Result<()> {
    if d < 4 || !d.is_multiple_of(4) {
        return Err(TensorError::Invalid(format!("d_model {d} must be a positive multiple of 4")));
    }
    Ok(())
}

/// Two tanh hidden layers (`d`, `d/2`) with dropout, then `L` logits.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierParams {
    pub hidden1: (ParamId, ParamId),
    pub hidden2: (ParamId, ParamId),
    pub output: (ParamId, ParamId),
    pub dropout: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassifierVars {
    pub hidden1: Dense,
    pub hidden2: Dense,
    pub output: Dense,
    pub dropout: f64,
}

impl ClassifierParams {
    pub fn register(
        params: &mut ParamStore,
        input: usize,
        d: usize,
        labels: usize,
        dropout: f64,
        init: &mut dyn FnMut() -> f64,
    ) -> Result<Self> {
        check_width(d)?;
        Ok(Self {
            hidden1: dense(params, "cls.hidden1", input, d, init)?,
            hidden2: dense(params, "cls.hidden2", d, d / 2, init)?,
            output: dense(params, "cls.output", d / 2, labels, init)?,
            dropout,
        })
    }

    pub fn from_store(params: &ParamStore, dropout: f64) -> Result<Self> {
        Ok(Self {
            hidden1: dense_from(params, "cls.hidden1")?,
            hidden2: dense_from(params, "cls.hidden2")?,
            output: dense_from(params, "cls.output")?,
            dropout,
        })
    }

    pub fn bind<'p>(&self, g: &mut Graph<'p>, params: &'p ParamStore) -> ClassifierVars {
        ClassifierVars {
            hidden1: bind_dense(g, params, self.hidden1),
            hidden2: bind_dense(g, params, self.hidden2),
            output: bind_dense(g, params, self.output),
            dropout: self.dropout,
        }
    }
}

/// `[v_s, v_r, Δ_E, Δ_cls]` along the last axis.
pub fn concat_features(g: &mut Graph<'_>, parts: [Var; 4]) -> Result<Var> {
    let first = g.shape(parts[0]).to_vec();
    for &p in &parts[1..] {
        if g.shape(p) != first.as_slice() {
            return Err(TensorError::Shape {
                op: "concat_features",
                lhs: first,
                rhs: g.shape(p).to_vec(),
            });
        }
    }
    let axis = first.len().checked_sub(1).ok_or(TensorError::Axis { axis: 0, rank: 0 })?;
    g.concat(&parts, axis)
}

/// Appends, for each label in order, `second(first(|proj(f) - label|))` to
/// `features` (`[C, 4d]`). `label_embeddings` is `[L, d]`.
pub fn label_fusion(g: &mut Graph<'_>, features: Var, label_embeddings: Var, p: &FusionVars) -> Result<Var> {
    let [labels, d] = *g.shape(label_embeddings) else {
        return Err(TensorError::Invalid("label embeddings must be [L, d]".into()));
    };
    let z = g.linear(features, p.proj.w, p.proj.b)?;
    if g.shape(z).last() != Some(&d) {
        return Err(TensorError::Shape {
            op: "label_fusion",
            lhs: g.shape(z).to_vec(),
            rhs: vec![labels, d],
        });
    }
    let mut blocks = vec![features];
    for l in 0..labels {
        let row = g.slice(label_embeddings, 0, l, 1)?;
        let row = g.reshape(row, &[d])?;
        let neg = g.scale(row, -1.0)?;
        let diff = g.add_bias(z, neg)?;
        let diff = g.abs(diff)?;
        let h = g.linear(diff, p.first.w, p.first.b)?;
        let h = g.linear(h, p.second.w, p.second.b)?;
        blocks.push(h);
    }
    let axis = g.shape(features).len() - 1;
    g.concat(&blocks, axis)
}

/// Class probabilities `[C, L]` and the logits they came from.
pub fn classify<R: Rng>(
    g: &mut Graph<'_>,
    features: Var,
    p: &ClassifierVars,
    training: bool,
    rng: &mut R,
) -> Result<(Var, Var)> {
    let mut h = features;
    for layer in [p.hidden1, p.hidden2] {
        h = g.linear(h, layer.w, layer.b)?;
        h = g.tanh(h)?;
        h = g.dropout(h, p.dropout, training, rng)?;
    }
    let logits = g.linear(h, p.output.w, p.output.b)?;
    let axis = g.shape(logits).len() - 1;
    let probs = g.softmax(logits, axis, None)?;
    Ok((probs, logits))
}

/// Probability floor applied before the logarithm.
pub const PROB_FLOOR: f64 = 1e-12;

/// Mean over the batch of `-w[y] · ln max(p[y], 1e-12)`.
pub fn loss(g: &mut Graph<'_>, probs: Var, targets: &[usize], class_weights: Option<&[f64]>) -> Result<Var> {
    let [c, l] = *g.shape(probs) else {
        return Err(TensorError::Invalid("probabilities must be [C, L]".into()));
    };
    if targets.len() != c {
        return Err(TensorError::Shape {
            op: "loss",
            lhs: vec![c, l],
            rhs: vec![targets.len()],
        });
    }
    if let Some(w) = class_weights {
        if w.len() != l {
            return Err(TensorError::Shape {
                op: "loss_weights",
                lhs: vec![l],
                rhs: vec![w.len()],
            });
        }
    }
    let mut select = Tensor::zeros(&[c, l]);
    for (i, &t) in targets.iter().enumerate() {
        if t >= l {
            return Err(TensorError::Invalid(format!("label index {t} out of range for {l} labels")));
        }
        let w = class_weights.map_or(1.0, |w| w[t]);
        select.data_mut()[i * l + t] = -w / c as f64;
    }
    let logp = g.log_clamped(probs, PROB_FLOOR)?;
    let picked = g.mul_const(logp, select)?;
    g.sum(picked)
}

/// Inverse-frequency weights `n / (L · count)`, with 0 for absent classes.
pub fn inverse_frequency_weights(targets: &[usize], labels: usize) -> Vec<f64> {
    let mut counts = vec![0usize; labels];
    for &t in targets {
        counts[t] += 1;
    }
    let n = targets.len() as f64;
    counts
        .iter()
        .map(|&k| if k == 0 { 0.0 } else { n / (labels as f64 * k as f64) })
        .collect()
}

/// Index of the largest value, first on ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

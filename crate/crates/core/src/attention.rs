//! Dual cross-attention between a source and a reply sequence, followed by
//! hierarchical (context-vector) attention pooling.
//!
//! All sequences are `[C, U, d]` batches with a `[C * U]` validity mask.
//! Padded positions never receive attention weight.

use std::fmt;
use std::str::FromStr;

use crate::tensor::{Graph, ParamId, ParamStore, Result, Tensor, TensorError, Var};

/// Which matrix the two branches exchange in a cross-attention stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossMode {
    /// Each branch attends with its own queries over the other's keys and
    /// reads its own values.
    Key,
    /// Each branch attends with its own queries and keys and reads the other
    /// branch's values.
    Value,
}

impl FromStr for CrossMode {
    type Err = TensorError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "key" => Ok(Self::Key),
            "value" => Ok(Self::Value),
            other => Err(TensorError::Invalid(format!("invalid cross-attention mode {other:?}"))),
        }
    }
}

impl fmt::Display for CrossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Key => "key",
            Self::Value => "value",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Source,
    Reply,
}

impl Branch {
    pub fn tag(self) -> &'static str {
        match self {
            Self::Source => "src",
            Self::Reply => "rep",
        }
    }
}

/// Query/key/value projections (`d × d`) of one branch in one stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Projection {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
}

impl Projection {
    fn register(
        params: &mut ParamStore,
        branch: Branch,
        stage: &str,
        d: usize,
        init: &mut dyn FnMut() -> f64,
    ) -> Result<Self> {
        let bound = 1.0 / (d as f64).sqrt();
        let mut mat = |w: &str| -> Result<ParamId> {
            params.insert(
                format!("attn.{}.{w}.{stage}", branch.tag()),
                Tensor::from_fn(&[d, d], || init() * bound),
            )
        };
        Ok(Self {
            wq: mat("wq")?,
            wk: mat("wk")?,
            wv: mat("wv")?,
        })
    }
}

/// Stage names in application order.
pub const STAGES: [&str; 4] = ["cross1", "self1", "cross2", "self2"];

/// Parameters of the four attention stages, each with distinct source and
/// reply projections.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DualAttention {
    pub num_heads: usize,
    pub d_model: usize,
    /// Indexed `[stage][branch]`, branch 0 = source, 1 = reply.
    pub stages: [[Projection; 2]; 4],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DualAttentionVars {
    pub num_heads: usize,
    pub stages: [[ProjectionVars; 2]; 4],
}

impl DualAttention {
    pub fn register(
        params: &mut ParamStore,
        d_model: usize,
        num_heads: usize,
        init: &mut dyn FnMut() -> f64,
    ) -> Result<Self> {
        check_heads(d_model, num_heads)?;
        let mut stages = Vec::with_capacity(4);
        for stage in STAGES {
            let src = Projection::register(params, Branch::Source, stage, d_model, init)?;
            let rep = Projection::register(params, Branch::Reply, stage, d_model, init)?;
            stages.push([src, rep]);
        }
        Ok(Self {
            num_heads,
            d_model,
            stages: stages.try_into().expect("four stages"),
        })
    }

    pub fn from_store(params: &ParamStore, d_model: usize, num_heads: usize) -> Result<Self> {
        check_heads(d_model, num_heads)?;
        let find = |name: String| {
            params
                .id(&name)
                .ok_or_else(|| TensorError::Invalid(format!("missing parameter {name}")))
        };
        let mut stages = Vec::with_capacity(4);
        for stage in STAGES {
            let mut pair = Vec::with_capacity(2);
            for branch in [Branch::Source, Branch::Reply] {
                let t = branch.tag();
                pair.push(Projection {
                    wq: find(format!("attn.{t}.wq.{stage}"))?,
                    wk: find(format!("attn.{t}.wk.{stage}"))?,
                    wv: find(format!("attn.{t}.wv.{stage}"))?,
                });
            }
            stages.push([pair[0], pair[1]]);
        }
        Ok(Self {
            num_heads,
            d_model,
            stages: stages.try_into().expect("four stages"),
        })
    }

    pub fn bind<'p>(&self, g: &mut Graph<'p>, params: &'p ParamStore) -> DualAttentionVars {
        let mut bind = |p: &Projection| ProjectionVars {
            wq: g.param(params, p.wq),
            wk: g.param(params, p.wk),
            wv: g.param(params, p.wv),
        };
        let stages = self.stages.map(|[s, r]| [bind(&s), bind(&r)]);
        DualAttentionVars {
            num_heads: self.num_heads,
            stages,
        }
    }
}

fn check_heads(d_model: usize, num_heads: usize) -> Result<()> {
    if num_heads == 0 || !d_model.is_multiple_of(num_heads) {
        return Err(TensorError::Invalid(format!(
            "num_heads {num_heads} must divide d_model {d_model}"
        )));
    }
    Ok(())
}

fn batch_dims(g: &Graph<'_>, x: Var) -> Result<(usize, usize, usize)> {
    match *g.shape(x) {
        [c, u, d] => Ok((c, u, d)),
        ref other => Err(TensorError::Invalid(format!(
            "attention input must be [C, U, d], got {other:?}"
        ))),
    }
}

fn check_mask(mask: &[bool], c: usize, u: usize) -> Result<()> {
    if mask.len() != c * u {
        return Err(TensorError::Shape {
            op: "attention_mask",
            lhs: vec![c, u],
            rhs: vec![mask.len()],
        });
    }
    Ok(())
}

/// `[C, U, d]` to `[C, h, U, d/h]`.
fn split_heads(g: &mut Graph<'_>, x: Var, heads: usize) -> Result<Var> {
    let (c, u, d) = batch_dims(g, x)?;
    let r = g.reshape(x, &[c, u, heads, d / heads])?;
    g.permute(r, &[0, 2, 1, 3])
}

/// `[C, h, U, d/h]` back to `[C, U, d]`, heads concatenated in order.
fn merge_heads(g: &mut Graph<'_>, x: Var) -> Result<Var> {
    let [c, h, u, dk] = *g.shape(x) else {
        return Err(TensorError::Invalid("merge_heads expects rank 4".into()));
    };
    let p = g.permute(x, &[0, 2, 1, 3])?;
    g.reshape(p, &[c, u, h * dk])
}

/// Output of one multi-head attention call.
#[derive(Debug, Clone, Copy)]
pub struct Attended {
    /// `[C, U, d]`
    pub output: Var,
    /// `[C, h, U, U]`, rows over key positions.
    pub weights: Var,
}

/// Multi-head scaled dot-product attention of projected `q` over `k`, reading
/// `v`. `key_mask` (`[C * U]`) marks which key/value positions may be used.
pub fn multi_head(
    g: &mut Graph<'_>,
    q: Var,
    k: Var,
    v: Var,
    key_mask: &[bool],
    heads: usize,
) -> Result<Attended> {
    let (c, u, d) = batch_dims(g, q)?;
    for other in [k, v] {
        if g.shape(other) != [c, u, d] {
            return Err(TensorError::Shape {
                op: "attention",
                lhs: vec![c, u, d],
                rhs: g.shape(other).to_vec(),
            });
        }
    }
    check_heads(d, heads)?;
    check_mask(key_mask, c, u)?;
    let dk = d / heads;
    let qh = split_heads(g, q, heads)?;
    let kh = split_heads(g, k, heads)?;
    let vh = split_heads(g, v, heads)?;
    let kt = g.transpose(kh)?;
    let scores = g.matmul(qh, kt)?;
    let scores = g.scale(scores, 1.0 / (dk as f64).sqrt())?;
    let mut full_mask = Vec::with_capacity(c * heads * u * u);
    for ci in 0..c {
        let row = &key_mask[ci * u..(ci + 1) * u];
        for _ in 0..heads * u {
            full_mask.extend_from_slice(row);
        }
    }
    let weights = g.softmax(scores, 3, Some(&full_mask))?;
    let heads_out = g.matmul(weights, vh)?;
    let output = merge_heads(g, heads_out)?;
    Ok(Attended { output, weights })
}

fn project(g: &mut Graph<'_>, x: Var, p: &ProjectionVars) -> Result<(Var, Var, Var)> {
    Ok((g.matmul(x, p.wq)?, g.matmul(x, p.wk)?, g.matmul(x, p.wv)?))
}

/// Positions usable by both branches.
pub fn joint_mask(mask_s: &[bool], mask_r: &[bool]) -> Vec<bool> {
    mask_s.iter().zip(mask_r).map(|(a, b)| *a && *b).collect()
}

/// One cross-attention stage. Returns the source and reply outputs.
#[allow(clippy::too_many_arguments)]
pub fn cross_attention(
    g: &mut Graph<'_>,
    xs: Var,
    xr: Var,
    mode: CrossMode,
    src: &ProjectionVars,
    rep: &ProjectionVars,
    heads: usize,
    mask_s: &[bool],
    mask_r: &[bool],
) -> Result<(Attended, Attended)> {
    if g.shape(xs) != g.shape(xr) {
        return Err(TensorError::Shape {
            op: "cross_attention",
            lhs: g.shape(xs).to_vec(),
            rhs: g.shape(xr).to_vec(),
        });
    }
    let (c, u, _) = batch_dims(g, xs)?;
    check_mask(mask_s, c, u)?;
    check_mask(mask_r, c, u)?;
    let mask = joint_mask(mask_s, mask_r);
    let (qs, ks, vs) = project(g, xs, src)?;
    let (qr, kr, vr) = project(g, xr, rep)?;
    let (ms, mr) = match mode {
        CrossMode::Key => (
            multi_head(g, qs, kr, vs, &mask, heads)?,
            multi_head(g, qr, ks, vr, &mask, heads)?,
        ),
        CrossMode::Value => (
            multi_head(g, qs, ks, vr, &mask, heads)?,
            multi_head(g, qr, kr, vs, &mask, heads)?,
        ),
    };
    Ok((ms, mr))
}

pub fn self_attention(
    g: &mut Graph<'_>,
    x: Var,
    p: &ProjectionVars,
    heads: usize,
    mask: &[bool],
) -> Result<Attended> {
    let (q, k, v) = project(g, x, p)?;
    multi_head(g, q, k, v, mask, heads)
}

/// Key-mode cross attention, self attention, value-mode cross attention,
/// self attention. Returns the final source and reply sequences.
pub fn dual_pipeline(
    g: &mut Graph<'_>,
    hs: Var,
    hr: Var,
    vars: &DualAttentionVars,
    mask_s: &[bool],
    mask_r: &[bool],
) -> Result<(Var, Var)> {
    let h = vars.num_heads;
    let [c1, s1, c2, s2] = &vars.stages;
    let (cs1, cr1) = cross_attention(g, hs, hr, CrossMode::Key, &c1[0], &c1[1], h, mask_s, mask_r)?;
    let ss1 = self_attention(g, cs1.output, &s1[0], h, mask_s)?;
    let sr1 = self_attention(g, cr1.output, &s1[1], h, mask_r)?;
    let (cs2, cr2) = cross_attention(
        g,
        ss1.output,
        sr1.output,
        CrossMode::Value,
        &c2[0],
        &c2[1],
        h,
        mask_s,
        mask_r,
    )?;
    let ss2 = self_attention(g, cs2.output, &s2[0], h, mask_s)?;
    let sr2 = self_attention(g, cr2.output, &s2[1], h, mask_r)?;
    Ok((ss2.output, sr2.output))
}

/// Per-branch parameters of hierarchical attention pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HanParams {
    pub w: ParamId,
    pub b: ParamId,
    pub context: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HanVars {
    pub w: Var,
    pub b: Var,
    pub context: Var,
}

impl HanParams {
    pub fn register(
        params: &mut ParamStore,
        branch: Branch,
        d: usize,
        init: &mut dyn FnMut() -> f64,
    ) -> Result<Self> {
        let t = branch.tag();
        let bound = 1.0 / (d as f64).sqrt();
        let w = params.insert(format!("han.{t}.w"), Tensor::from_fn(&[d, d], || init() * bound))?;
        let b = params.insert(format!("han.{t}.b"), Tensor::zeros(&[d]))?;
        let context = params.insert(
            format!("han.{t}.context"),
            Tensor::from_fn(&[d, 1], || init() * bound),
        )?;
        Ok(Self { w, b, context })
    }

    pub fn from_store(params: &ParamStore, branch: Branch) -> Result<Self> {
        let t = branch.tag();
        let find = |n: &str| {
            let name = format!("han.{t}.{n}");
            params
                .id(&name)
                .ok_or_else(|| TensorError::Invalid(format!("missing parameter {name}")))
        };
        Ok(Self {
            w: find("w")?,
            b: find("b")?,
            context: find("context")?,
        })
    }

    pub fn bind<'p>(&self, g: &mut Graph<'p>, params: &'p ParamStore) -> HanVars {
        HanVars {
            w: g.param(params, self.w),
            b: g.param(params, self.b),
            context: g.param(params, self.context),
        }
    }
}

/// Pools `[C, U, d]` into `[C, d]`: `a = tanh(S W + b)`, weights are the
/// masked softmax of `a · context` over positions, output is the weighted
/// sum of rows of `S`. Returns `(pooled, weights [C, U])`; a fully masked
/// sequence pools to zeros.
pub fn hierarchical_attention(
    g: &mut Graph<'_>,
    s: Var,
    p: &HanVars,
    mask: &[bool],
) -> Result<(Var, Var)> {
    let (c, u, d) = batch_dims(g, s)?;
    check_mask(mask, c, u)?;
    let hidden = g.linear(s, p.w, p.b)?;
    let hidden = g.tanh(hidden)?;
    let scores = g.matmul(hidden, p.context)?;
    let scores = g.reshape(scores, &[c, u])?;
    let weights = g.softmax(scores, 1, Some(mask))?;
    let w3 = g.reshape(weights, &[c, 1, u])?;
    let pooled = g.matmul(w3, s)?;
    let pooled = g.reshape(pooled, &[c, d])?;
    Ok((pooled, weights))
}

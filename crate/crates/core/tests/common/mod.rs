//! Independent loop oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stance_core::affect::{Emotion, EmotionLexicon};
use stance_core::data::Example;
use stance_core::tensor::{Graph, Tensor, Var};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(r: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, || r.gen_range(-1.0..1.0))
}

/// Random prefix masks with at least one valid position per row.
pub fn random_mask(r: &mut ChaCha8Rng, c: usize, u: usize) -> Vec<bool> {
    let mut m = Vec::with_capacity(c * u);
    for _ in 0..c {
        let valid = r.gen_range(1..=u);
        m.extend((0..u).map(|i| i < valid));
    }
    m
}

/// `x [rows, n] · w [n, m]` with plain loops.
pub fn matmul(x: &[f64], rows: usize, n: usize, w: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * m];
    for i in 0..rows {
        for j in 0..m {
            let mut acc = 0.0;
            for k in 0..n {
                acc += x[i * n + k] * w[k * m + j];
            }
            out[i * m + j] = acc;
        }
    }
    out
}

/// Multi-head attention, one query position and head at a time.
#[allow(clippy::too_many_arguments)]
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    key_mask: &[bool],
    c: usize,
    u: usize,
    d: usize,
    heads: usize,
) -> Vec<f64> {
    let dk = d / heads;
    let mut out = vec![0.0; c * u * d];
    for ci in 0..c {
        let at = |t: &[f64], pos: usize, h: usize, e: usize| t[(ci * u + pos) * d + h * dk + e];
        for h in 0..heads {
            for i in 0..u {
                let valid: Vec<usize> = (0..u).filter(|&j| key_mask[ci * u + j]).collect();
                if valid.is_empty() {
                    continue;
                }
                let scores: Vec<f64> = valid
                    .iter()
                    .map(|&j| (0..dk).map(|e| at(q, i, h, e) * at(k, j, h, e)).sum::<f64>() / (dk as f64).sqrt())
                    .collect();
                let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                for e in 0..dk {
                    let mut acc = 0.0;
                    for (w, &j) in exps.iter().zip(&valid) {
                        acc += w / z * at(v, j, h, e);
                    }
                    out[(ci * u + i) * d + h * dk + e] = acc;
                }
            }
        }
    }
    out
}

pub struct Proj<'a> {
    pub wq: &'a [f64],
    pub wk: &'a [f64],
    pub wv: &'a [f64],
}

fn project(x: &[f64], rows: usize, d: usize, p: &Proj) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    (matmul(x, rows, d, p.wq, d), matmul(x, rows, d, p.wk, d), matmul(x, rows, d, p.wv, d))
}

/// Cross attention; `value_mode` swaps values instead of keys.
#[allow(clippy::too_many_arguments)]
pub fn cross(
    xs: &[f64],
    xr: &[f64],
    value_mode: bool,
    ps: &Proj,
    pr: &Proj,
    mask_s: &[bool],
    mask_r: &[bool],
    c: usize,
    u: usize,
    d: usize,
    heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let joint: Vec<bool> = mask_s.iter().zip(mask_r).map(|(a, b)| *a && *b).collect();
    let (qs, ks, vs) = project(xs, c * u, d, ps);
    let (qr, kr, vr) = project(xr, c * u, d, pr);
    if value_mode {
        (
            attention(&qs, &ks, &vr, &joint, c, u, d, heads),
            attention(&qr, &kr, &vs, &joint, c, u, d, heads),
        )
    } else {
        (
            attention(&qs, &kr, &vs, &joint, c, u, d, heads),
            attention(&qr, &ks, &vr, &joint, c, u, d, heads),
        )
    }
}

pub fn self_attn(x: &[f64], p: &Proj, mask: &[bool], c: usize, u: usize, d: usize, heads: usize) -> Vec<f64> {
    let (q, k, v) = project(x, c * u, d, p);
    attention(&q, &k, &v, mask, c, u, d, heads)
}

/// `a = tanh(S W + b)`, `w = softmax(a · ctx)` over valid positions,
/// `v = Σ w_i S_i`. Returns `(v [C, d], w [C, U])`.
#[allow(clippy::too_many_arguments)]
pub fn han(
    s: &[f64],
    w: &[f64],
    b: &[f64],
    ctx: &[f64],
    mask: &[bool],
    c: usize,
    u: usize,
    d: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut pooled = vec![0.0; c * d];
    let mut weights = vec![0.0; c * u];
    for ci in 0..c {
        let mut scores = Vec::new();
        for i in 0..u {
            if !mask[ci * u + i] {
                continue;
            }
            let mut score = 0.0;
            for j in 0..d {
                let mut acc = b[j];
                for k in 0..d {
                    acc += s[(ci * u + i) * d + k] * w[k * d + j];
                }
                score += acc.tanh() * ctx[j];
            }
            scores.push((i, score));
        }
        if scores.is_empty() {
            continue;
        }
        let max = scores.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = scores.iter().map(|s| (s.1 - max).exp()).sum();
        for &(i, sc) in &scores {
            let wi = (sc - max).exp() / z;
            weights[ci * u + i] = wi;
            for j in 0..d {
                pooled[ci * d + j] += wi * s[(ci * u + i) * d + j];
            }
        }
    }
    (pooled, weights)
}

/// Label fusion, one label at a time, with the same accumulation order as
/// a row-major matrix product.
pub struct FusionWeights<'a> {
    pub proj_w: &'a [f64],
    pub proj_b: &'a [f64],
    pub w1: &'a [f64],
    pub b1: &'a [f64],
    pub w2: &'a [f64],
    pub b2: &'a [f64],
}

fn dense_row(x: &[f64], w: &[f64], b: &[f64], out_w: usize) -> Vec<f64> {
    (0..out_w)
        .map(|j| {
            let mut acc = 0.0;
            for (k, xv) in x.iter().enumerate() {
                acc += xv * w[k * out_w + j];
            }
            acc + b[j]
        })
        .collect()
}

pub fn label_fusion(f_cnct: &[f64], labels: &[f64], n_labels: usize, d: usize, p: &FusionWeights) -> Vec<f64> {
    let z = dense_row(f_cnct, p.proj_w, p.proj_b, d);
    let mut out = f_cnct.to_vec();
    for l in 0..n_labels {
        let delta: Vec<f64> = (0..d).map(|j| (z[j] - labels[l * d + j]).abs()).collect();
        let h1 = dense_row(&delta, p.w1, p.b1, d / 2);
        let h2 = dense_row(&h1, p.w2, p.b2, d / 4);
        out.extend(h2);
    }
    out
}

/// Accuracy and macro P/R/F1 straight from the label vectors.
pub fn metrics(preds: &[usize], truths: &[usize], labels: usize) -> (f64, f64, f64, f64) {
    let n = preds.len();
    let correct = preds.iter().zip(truths).filter(|(p, t)| p == t).count();
    let acc = if n == 0 { 0.0 } else { correct as f64 / n as f64 };
    let (mut ps, mut rs, mut fs) = (0.0, 0.0, 0.0);
    for l in 0..labels {
        let tp = preds.iter().zip(truths).filter(|&(&p, &t)| p == l && t == l).count() as f64;
        let fp = preds.iter().zip(truths).filter(|&(&p, &t)| p == l && t != l).count() as f64;
        let fnn = preds.iter().zip(truths).filter(|&(&p, &t)| p != l && t == l).count() as f64;
        let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
        let r = if tp + fnn > 0.0 { tp / (tp + fnn) } else { 0.0 };
        let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
        ps += p;
        rs += r;
        fs += f;
    }
    let l = labels as f64;
    (acc, ps / l, rs / l, fs / l)
}

/// Friedman statistic through mean ranks and counted (not sorted) ranks.
pub fn friedman_statistic(scores: &[Vec<f64>]) -> f64 {
    let n = scores.len() as f64;
    let k = scores[0].len();
    let mut mean_rank = vec![0.0; k];
    for row in scores {
        for (j, &x) in row.iter().enumerate() {
            let below = row.iter().filter(|&&y| y < x).count() as f64;
            let equal = row.iter().filter(|&&y| y == x).count() as f64;
            mean_rank[j] += (below + (equal + 1.0) / 2.0) / n;
        }
    }
    let kf = k as f64;
    let centre = (kf + 1.0) / 2.0;
    12.0 * n / (kf * (kf + 1.0)) * mean_rank.iter().map(|r| (r - centre).powi(2)).sum::<f64>()
}

/// Central-difference check of `loss(inputs)` against reverse mode over
/// every coordinate. Returns the largest relative error.
pub fn grad_check(inputs: &[Tensor], loss: impl Fn(&mut Graph<'_>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone(), true).unwrap()).collect();
    let out = loss(&mut g, &vars);
    let grads = g.backward(out).unwrap();
    let eval = |ts: &[Tensor]| {
        let mut g = Graph::new();
        let vars: Vec<Var> = ts.iter().map(|t| g.leaf(t.clone(), true).unwrap()).collect();
        let o = loss(&mut g, &vars);
        g.value(o).item()
    };
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = grads.get(*v).expect("input gradient").data().to_vec();
        for (j, &a) in analytic.iter().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
            worst = worst.max(relative_error(a, numeric));
        }
    }
    worst
}

pub const FD_STEP: f64 = 1e-4;
/// Gradients smaller than this are compared absolutely.
pub const GRAD_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(GRAD_FLOOR)
}

pub const STANCES: [&str; 4] = ["support", "deny", "query", "comment"];

pub fn lexicon() -> EmotionLexicon {
    use Emotion::*;
    EmotionLexicon::from_pairs([
        ("true", &[Trust, Positive][..]),
        ("confirmed", &[Trust][..]),
        ("fake", &[Anger, Negative, Disgust][..]),
        ("hoax", &[Negative, Fear][..]),
        ("why", &[Surprise, Anticipation][..]),
        ("happy", &[Joy, Positive][..]),
        ("storm", &[Fear, Sadness][..]),
    ])
}

/// `n` labeled pairs whose replies carry one class cue word among fillers.
pub fn synthetic_examples(n: usize, seed: u64) -> Vec<Example> {
    let cues: [&[&str]; 4] = [
        &["true", "confirmed", "agree"],
        &["fake", "hoax", "false"],
        &["why", "really", "source"],
        &["weather", "lol", "today"],
    ];
    let fillers = ["the", "this", "is", "about", "people", "said", "city", "news", "happy", "storm", "now", "we"];
    let topics = ["storm hits the city", "bridge closed", "happy event downtown", "minister resigns"];
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let label = i % 4;
            let mut words: Vec<&str> = (0..4).map(|_| fillers[r.gen_range(0..fillers.len())]).collect();
            let cue = cues[label][r.gen_range(0..cues[label].len())];
            words.insert(r.gen_range(0..=words.len()), cue);
            Example {
                id: format!("ex{i}"),
                source_text: topics[r.gen_range(0..topics.len())].to_string(),
                reply_text: words.join(" "),
                label: STANCES[label].to_string(),
                split: None,
            }
        })
        .collect()
}

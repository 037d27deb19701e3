//! Diagnostics over attention maps and hidden states: head similarity,
//! token correlation, localness, utilization ratio and cross-layer similarity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::Tensor;

fn metric_err(msg: impl Into<String>) -> Error {
    Error::Metric(msg.into())
}

fn map_dims(a: &Tensor) -> Result<(usize, usize)> {
    match a.shape() {
        &[m, t, t2] if t == t2 => Ok((m, t)),
        s => Err(metric_err(format!("attention stack must be [M, T, T], got {s:?}"))),
    }
}

fn check_prob(a: &Tensor) -> Result<()> {
    let t = a.last_dim();
    for row in a.data().chunks(t) {
        if row.iter().any(|&v| v < 0.0) {
            return Err(metric_err("attention maps must be probabilities (negative entry)"));
        }
        if (row.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
            return Err(metric_err("attention rows must sum to one"));
        }
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean pairwise cosine similarity between heads' attention rows, self pairs
/// excluded. Each sample contributes `((1/T) sum_{j,k,t} cos - M) / (M(M-1))`;
/// the result is the mean over samples. Identical heads score 1.
pub fn head_similarity(samples: &[Tensor]) -> Result<f64> {
    if samples.is_empty() {
        return Err(metric_err("head similarity over an empty dataset"));
    }
    let mut total = 0.0;
    for a in samples {
        let (m, t) = map_dims(a)?;
        if m < 2 {
            return Err(metric_err("head similarity needs at least two heads"));
        }
        check_prob(a)?;
        let row = |h: usize, q: usize| &a.data()[(h * t + q) * t..(h * t + q + 1) * t];
        let mut s = 0.0;
        for q in 0..t {
            let norms: Vec<f64> = (0..m).map(|h| norm(row(h, q))).collect();
            if norms.iter().any(|&n| n == 0.0) {
                return Err(metric_err("zero-norm attention row"));
            }
            for j in 0..m {
                for k in 0..m {
                    s += dot(row(j, q), row(k, q)).abs() / (norms[j] * norms[k]);
                }
            }
        }
        total += (s / t as f64 - m as f64) / (m * (m - 1)) as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Pearson correlation of two equally long vectors (population moments).
/// `None` when either vector is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

/// Mean off-diagonal Pearson correlation between token vectors (rows of
/// each `[T, d]` sample), averaged over samples. Samples containing a
/// constant token vector are skipped with a warning.
pub fn token_correlation(samples: &[Tensor]) -> Result<f64> {
    let mut total = 0.0;
    let mut used = 0usize;
    'samples: for (i, x) in samples.iter().enumerate() {
        let &[t, d] = x.shape() else {
            return Err(metric_err(format!("token features must be [T, d], got {:?}", x.shape())));
        };
        if t < 2 {
            return Err(metric_err("token correlation needs T >= 2"));
        }
        let row = |j: usize| &x.data()[j * d..(j + 1) * d];
        let mut s = 0.0;
        for j in 0..t {
            for k in 0..t {
                match pearson(row(j), row(k)) {
                    Some(r) => s += r,
                    None => {
                        log::warn!("token correlation: sample {i} has a constant token vector; skipped");
                        continue 'samples;
                    }
                }
            }
        }
        total += (s - t as f64) / (t * (t - 1)) as f64;
        used += 1;
    }
    if used == 0 {
        return Err(metric_err("token correlation: no sample with non-constant token vectors"));
    }
    Ok(total / used as f64)
}

/// Inclusive 0-based key window `[lo, hi]` of width `w` around query `t`,
/// clipped to `[0, len)`.
pub fn local_window(t: usize, w: usize, len: usize) -> (usize, usize) {
    let left = w / 2; // ceil((w - 1) / 2)
    let right = (w - 1) / 2;
    (t.saturating_sub(left), (t + right).min(len - 1))
}

/// Mean attention mass inside a width-`w` window around each query,
/// averaged over heads and queries.
pub fn localness(a: &Tensor, w: usize) -> Result<f64> {
    if w < 1 {
        return Err(Error::Config("localness window must be at least 1".into()));
    }
    let (m, t) = map_dims(a)?;
    check_prob(a)?;
    let mut total = 0.0;
    for h in 0..m {
        for q in 0..t {
            let (lo, hi) = local_window(q, w, t);
            let row = &a.data()[(h * t + q) * t..(h * t + q + 1) * t];
            total += row[lo..=hi].iter().sum::<f64>();
        }
    }
    Ok(total / (m * t) as f64)
}

/// Window width used by reports: `floor(0.1 T) + 1`.
pub fn default_window(t: usize) -> usize {
    t / 10 + 1
}

/// For each layer, mean over tokens of the cosine between that layer's token
/// vector and the first layer's.
pub fn cross_layer_similarity(features: &[Tensor]) -> Result<Vec<f64>> {
    let first = features.first().ok_or_else(|| metric_err("cross-layer similarity needs at least one layer"))?;
    let &[t, d] = first.shape() else {
        return Err(metric_err("features must be [T, d]"));
    };
    features
        .iter()
        .map(|x| {
            if x.shape() != first.shape() {
                return Err(metric_err("layer features differ in shape"));
            }
            let mut s = 0.0;
            for i in 0..t {
                let (a, b) = (&x.data()[i * d..(i + 1) * d], &first.data()[i * d..(i + 1) * d]);
                let (na, nb) = (norm(a), norm(b));
                if na == 0.0 || nb == 0.0 {
                    return Err(metric_err("zero-norm token vector"));
                }
                s += dot(a, b) / (na * nb);
            }
            Ok(s / t as f64)
        })
        .collect()
}

/// Population standard deviation over all elements.
pub fn population_std(x: &Tensor) -> f64 {
    let n = x.numel() as f64;
    let mean = x.sum() / n;
    (x.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Utilization ratio `std(f) / std(f + residual)`.
pub fn ur(f_out: &Tensor, combined: &Tensor) -> Result<f64> {
    if f_out.shape() != combined.shape() {
        return Err(metric_err("utilization ratio needs equally shaped tensors"));
    }
    let denom = population_std(combined);
    if denom == 0.0 {
        return Err(metric_err("utilization ratio undefined: std(f + res) is zero"));
    }
    Ok(population_std(f_out) / denom)
}

/// Per-layer diagnostics. Undefined metrics are `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerMetrics {
    pub layer: usize,
    pub head_similarity: Option<f64>,
    pub token_correlation: Option<f64>,
    pub localness: Option<f64>,
    pub localness_window: usize,
    pub ur_attn: Option<f64>,
    pub ur_ffn: Option<f64>,
    pub cross_layer_similarity: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunMetadata {
    pub config_hash: String,
    pub seed: u64,
    pub dataset: String,
    pub samples: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub metadata: RunMetadata,
    pub layers: Vec<LayerMetrics>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// `layer,metric,value` rows; undefined metrics are omitted.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("layer,metric,value\n");
        for l in &self.layers {
            let fields = [
                ("head_similarity", l.head_similarity),
                ("token_correlation", l.token_correlation),
                ("localness", l.localness),
                ("ur_attn", l.ur_attn),
                ("ur_ffn", l.ur_ffn),
                ("cross_layer_similarity", l.cross_layer_similarity),
            ];
            for (name, v) in fields {
                if let Some(v) = v {
                    out.push_str(&format!("{},{name},{v}\n", l.layer));
                }
            }
        }
        out
    }
}

//! Soft and hard quantization, the residual cascade and the distortion terms
//! built from it.
//!
//! Soft quantization replaces the nearest-codeword lookup with a softmax over
//! negative scaled distances, `Q(x) = Σ_k softmax(-γ d(x, c_k)) c_k`, which
//! converges to the hard assignment as `γ → ∞` and is differentiable in both
//! `x` and the codewords.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};

use crate::code::{AssignmentIndex, Codebook};
use crate::error::{Error, Result};
use crate::linalg::{dot, norm, sq_dist};

/// Norms below this are treated as zero by the cosine distance.
pub const MIN_NORM: f64 = 1e-12;

static DEGENERATE_NORMS: AtomicU64 = AtomicU64::new(0);

/// Number of cosine evaluations so far that hit a near-zero norm.
pub fn degenerate_norm_count() -> u64 {
    DEGENERATE_NORMS.load(Ordering::Relaxed)
}

pub(crate) fn flag_degenerate() {
    DEGENERATE_NORMS.fetch_add(1, Ordering::Relaxed);
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    /// Squared Euclidean distance.
    Euclidean,
    /// Negative cosine similarity, in `[-1, 1]`.
    Cosine,
}

/// `-<x, c> / (|x| |c|)`; zero when either norm is degenerate.
pub fn cosine_distance(x: &[f64], c: &[f64]) -> f64 {
    let (nx, nc) = (norm(x), norm(c));
    if nx < MIN_NORM || nc < MIN_NORM {
        flag_degenerate();
        return 0.0;
    }
    -dot(x, c) / (nx * nc)
}

#[inline]
pub fn distance(metric: Metric, x: &[f64], c: &[f64]) -> f64 {
    match metric {
        Metric::Euclidean => sq_dist(x, c),
        Metric::Cosine => cosine_distance(x, c),
    }
}

/// In-place numerically stable softmax of `-gamma * d`.
pub(crate) fn softmax_neg_scaled(d: &mut [f64], gamma: f64) {
    let mut max = f64::NEG_INFINITY;
    for v in d.iter_mut() {
        *v *= -gamma;
        max = max.max(*v);
    }
    let mut sum = 0.0;
    for v in d.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in d.iter_mut() {
        *v /= sum;
    }
}

/// Softmax weights over the codewords of `cb` for input `x`.
pub fn soft_assign(x: &[f64], cb: &Codebook, gamma: f64, metric: Metric) -> Vec<f64> {
    debug_assert!(gamma >= 0.0);
    let mut w: Vec<f64> = cb.words().map(|c| distance(metric, x, c)).collect();
    softmax_neg_scaled(&mut w, gamma);
    w
}

/// Convex combination `Σ_k a_k c_k` with weights `a = soft_assign(..)`.
pub fn soft_quantize(x: &[f64], cb: &Codebook, gamma: f64, metric: Metric) -> Vec<f64> {
    soft_quantize_weighted(x, cb, gamma, metric).0
}

/// Soft quantized value together with its assignment weights.
pub fn soft_quantize_weighted(x: &[f64], cb: &Codebook, gamma: f64, metric: Metric) -> (Vec<f64>, Vec<f64>) {
    let a = soft_assign(x, cb, gamma, metric);
    let mut q = vec![0.0; cb.dim()];
    for (w, c) in a.iter().zip(cb.words()) {
        crate::linalg::axpy(&mut q, *w, c);
    }
    (q, a)
}

/// Index of the closest codeword; ties go to the lowest index.
pub fn hard_assign(x: &[f64], cb: &Codebook, metric: Metric) -> AssignmentIndex {
    let mut best = 0usize;
    let mut best_d = f64::INFINITY;
    for (k, c) in cb.words().enumerate() {
        let d = distance(metric, x, c);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    AssignmentIndex(best as u32)
}

pub fn hard_quantize<'a>(x: &[f64], cb: &'a Codebook, metric: Metric) -> &'a [f64] {
    cb.word(hard_assign(x, cb, metric).get())
}

/// How residuals propagate between layers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CascadeMode {
    /// Soft residuals drive the soft track and hard residuals drive a
    /// parallel hard track.
    Training,
    /// Hard residuals only; soft values are evaluated on the hard inputs.
    Encoding,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CascadeConfig {
    /// Softmax sharpness.
    pub gamma: f64,
    pub soft_metric: Metric,
    pub hard_metric: Metric,
}

impl Default for CascadeConfig {
    fn default() -> Self {
        CascadeConfig {
            gamma: 20.0,
            soft_metric: Metric::Cosine,
            hard_metric: Metric::Euclidean,
        }
    }
}

/// Per-layer values of one pass through the cascade.
#[derive(Debug, Clone, PartialEq)]
pub struct CascadeState {
    /// Inputs of the soft track, `x^1 = x`, `x^l = x^{l-1} - q^{l-1}`.
    pub soft_inputs: Vec<Vec<f64>>,
    /// Inputs of the hard track, `x^l = x^{l-1} - q_H^{l-1}`.
    pub hard_inputs: Vec<Vec<f64>>,
    pub soft: Vec<Vec<f64>>,
    pub hard: Vec<Vec<f64>>,
    pub indices: Vec<AssignmentIndex>,
    pub weights: Vec<Vec<f64>>,
}

impl CascadeState {
    pub fn layers(&self) -> usize {
        self.indices.len()
    }

    /// Residual left after the soft track's last layer.
    pub fn soft_residual(&self, x: &[f64]) -> Vec<f64> {
        let mut r = x.to_vec();
        for q in &self.soft {
            for (ri, qi) in r.iter_mut().zip(q) {
                *ri -= qi;
            }
        }
        r
    }
}

pub fn forward_cascade(
    x: &[f64],
    codebooks: &[Codebook],
    cfg: &CascadeConfig,
    mode: CascadeMode,
) -> Result<CascadeState> {
    for cb in codebooks {
        Error::check_dim(cb.dim(), x.len())?;
    }
    let layers = codebooks.len();
    let mut st = CascadeState {
        soft_inputs: Vec::with_capacity(layers),
        hard_inputs: Vec::with_capacity(layers),
        soft: Vec::with_capacity(layers),
        hard: Vec::with_capacity(layers),
        indices: Vec::with_capacity(layers),
        weights: Vec::with_capacity(layers),
    };
    let mut soft_in = x.to_vec();
    let mut hard_in = x.to_vec();
    for cb in codebooks {
        let idx = hard_assign(&hard_in, cb, cfg.hard_metric);
        let qh = cb.word(idx.get()).to_vec();
        let src = match mode {
            CascadeMode::Training => &soft_in,
            CascadeMode::Encoding => &hard_in,
        };
        let (q, a) = soft_quantize_weighted(src, cb, cfg.gamma, cfg.soft_metric);

        let next_hard: Vec<f64> = hard_in.iter().zip(&qh).map(|(v, c)| v - c).collect();
        let next_soft: Vec<f64> = match mode {
            CascadeMode::Training => soft_in.iter().zip(&q).map(|(v, c)| v - c).collect(),
            CascadeMode::Encoding => next_hard.clone(),
        };
        st.soft_inputs.push(std::mem::replace(&mut soft_in, next_soft));
        st.hard_inputs.push(std::mem::replace(&mut hard_in, next_hard));
        st.soft.push(q);
        st.hard.push(qh);
        st.indices.push(idx);
        st.weights.push(a);
    }
    Ok(st)
}

/// Layer weights and the mixing coefficients of the distortion terms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistortionWeights {
    pub layer_weights: Vec<f64>,
    /// Weight of the hard-assignment losses.
    pub mu: f64,
    /// Weight of the soft/hard match losses.
    pub nu: f64,
}

impl DistortionWeights {
    pub fn uniform(layers: usize, mu: f64, nu: f64) -> Self {
        DistortionWeights {
            layer_weights: vec![1.0; layers],
            mu,
            nu,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DistortionBreakdown {
    /// `|x - Σ_{i<=l} q^i|²`
    pub soft: Vec<f64>,
    /// `|x - Σ_{i<=l} q_H^i|²`
    pub hard: Vec<f64>,
    /// `|q^l - q_H^l|²`
    pub matching: Vec<f64>,
    pub total: f64,
}

pub fn distortion(x: &[f64], st: &CascadeState, wts: &DistortionWeights) -> DistortionBreakdown {
    let layers = st.layers();
    assert_eq!(wts.layer_weights.len(), layers, "one weight per layer");
    let mut soft_acc = x.to_vec();
    let mut hard_acc = x.to_vec();
    let mut out = DistortionBreakdown {
        soft: Vec::with_capacity(layers),
        hard: Vec::with_capacity(layers),
        matching: Vec::with_capacity(layers),
        total: 0.0,
    };
    for l in 0..layers {
        for ((s, h), (q, qh)) in soft_acc
            .iter_mut()
            .zip(hard_acc.iter_mut())
            .zip(st.soft[l].iter().zip(&st.hard[l]))
        {
            *s -= q;
            *h -= qh;
        }
        out.soft.push(crate::linalg::norm_sq(&soft_acc));
        out.hard.push(crate::linalg::norm_sq(&hard_acc));
        out.matching.push(sq_dist(&st.soft[l], &st.hard[l]));
    }
    let weighted = |v: &[f64]| -> f64 { v.iter().zip(&wts.layer_weights).map(|(a, w)| a * w).sum() };
    out.total = weighted(&out.soft) + wts.mu * weighted(&out.hard) + wts.nu * weighted(&out.matching);
    out
}

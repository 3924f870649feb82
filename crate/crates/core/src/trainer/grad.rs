//! Analytic gradients of the mean total loss and a central-difference oracle.
//!
//! Hard-assignment indices are fixed by the forward pass. The hard losses and
//! the hard side of the match loss therefore reach only the selected
//! codewords, never the argmin.

use crate::error::Result;
use crate::linalg::{add_outer, axpy, dot, mat_vec, norm, sub};
use crate::model::ProgressiveModel;
use crate::quantizer::{self, CascadeMode, Metric, MIN_NORM};
use crate::supervised::{self, ClassifierTap, LabelAnnotation, LabelMode};

/// One training example.
#[derive(Debug, Clone, Copy)]
pub struct Sample<'a> {
    pub x: &'a [f64],
    pub labels: Option<&'a LabelAnnotation>,
}

/// Mean losses of a batch.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BatchLoss {
    pub total: f64,
    pub margin: f64,
    pub classification: f64,
    pub distortion: f64,
}

/// Gradient buffers shaped like the model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub codebooks: Vec<Vec<f64>>,
    pub w_embed: Vec<f64>,
    pub w_cls: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &ProgressiveModel) -> Self {
        let (w_embed, w_cls, bias) = match &model.head {
            Some(h) => (
                vec![0.0; h.w_embed.len()],
                vec![0.0; h.w_cls.len()],
                vec![0.0; h.bias.len()],
            ),
            None => Default::default(),
        };
        Gradients {
            codebooks: model.codebooks.iter().map(|c| vec![0.0; c.as_flat().len()]).collect(),
            w_embed,
            w_cls,
            bias,
        }
    }

    /// Buffers in canonical parameter order, matching [`param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![&self.w_embed, &self.w_cls, &self.bias];
        v.extend(self.codebooks.iter().map(Vec::as_slice));
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![&mut self.w_embed, &mut self.w_cls, &mut self.bias];
        v.extend(self.codebooks.iter_mut().map(Vec::as_mut_slice));
        v
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| crate::linalg::all_finite(s))
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .iter()
            .flat_map(|s| s.iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    fn scale(&mut self, s: f64) {
        for sl in self.slices_mut() {
            sl.iter_mut().for_each(|v| *v *= s);
        }
    }
}

/// Mutable parameter slices in canonical order: projection, classifier,
/// bias, then each codebook. Headless models yield empty head slices.
pub fn param_slices_mut(model: &mut ProgressiveModel) -> Vec<&mut [f64]> {
    let mut v: Vec<&mut [f64]> = match &mut model.head {
        Some(h) => vec![&mut h.w_embed, &mut h.w_cls, &mut h.bias],
        None => vec![&mut [], &mut [], &mut []],
    };
    v.extend(model.codebooks.iter_mut().map(|c| c.as_flat_mut()));
    v
}

/// Mean total loss of `batch`, evaluated through the forward path only.
pub fn batch_loss(model: &ProgressiveModel, batch: &[Sample<'_>]) -> Result<BatchLoss> {
    let mut acc = BatchLoss::default();
    for s in batch {
        let b = supervised::total_loss(s.x, s.labels, model)?;
        acc.total += b.total;
        acc.margin += b.margin;
        acc.classification += b.classification;
        acc.distortion += b.distortion.total;
    }
    let n = batch.len().max(1) as f64;
    Ok(BatchLoss {
        total: acc.total / n,
        margin: acc.margin / n,
        classification: acc.classification / n,
        distortion: acc.distortion / n,
    })
}

/// `∂d(x, c)/∂x` and `∂d(x, c)/∂c`, accumulated with weight `g`.
fn metric_backward(metric: Metric, x: &[f64], c: &[f64], g: f64, gx: &mut [f64], gc: &mut [f64]) {
    if g == 0.0 {
        return;
    }
    match metric {
        Metric::Euclidean => {
            for i in 0..x.len() {
                let d = 2.0 * (x[i] - c[i]) * g;
                gx[i] += d;
                gc[i] -= d;
            }
        }
        Metric::Cosine => {
            let (nx, nc) = (norm(x), norm(c));
            if nx < MIN_NORM || nc < MIN_NORM {
                return;
            }
            let cos = dot(x, c) / (nx * nc);
            for i in 0..x.len() {
                let (xu, cu) = (x[i] / nx, c[i] / nc);
                gx[i] -= g * (cu - cos * xu) / nx;
                gc[i] -= g * (xu - cos * cu) / nc;
            }
        }
    }
}

/// Gradient of `cos(v, z_c)` with respect to `v`, given unit `z_c`.
fn cos_grad(v: &[f64], nv: f64, cos: f64, z_unit: &[f64], scale: f64, out: &mut [f64]) {
    for i in 0..v.len() {
        out[i] += scale * (z_unit[i] - cos * v[i] / nv) / nv;
    }
}

/// Mean loss of `batch` and its exact gradient for every parameter.
pub fn analytic_gradients(model: &ProgressiveModel, batch: &[Sample<'_>]) -> Result<(BatchLoss, Gradients)> {
    let mut grads = Gradients::zeros_like(model);
    let mut loss = BatchLoss::default();
    for s in batch {
        accumulate_sample(model, s, &mut grads, &mut loss)?;
    }
    let n = batch.len().max(1) as f64;
    grads.scale(1.0 / n);
    loss.total /= n;
    loss.margin /= n;
    loss.classification /= n;
    loss.distortion /= n;
    Ok((loss, grads))
}

fn accumulate_sample(
    model: &ProgressiveModel,
    s: &Sample<'_>,
    grads: &mut Gradients,
    loss: &mut BatchLoss,
) -> Result<()> {
    let hyper = &model.hyper;
    let v = model.embed(s.x)?;
    let e = v.len();
    let mut g_v = vec![0.0; e];
    let mut sample_total = 0.0;

    if let (Some(head), Some(labels)) = (&model.head, s.labels) {
        if let Some(sem) = &model.sem {
            let nv = norm(&v);
            if nv >= MIN_NORM {
                let cos: Vec<f64> = (0..sem.classes())
                    .map(|c| dot(&v, sem.unit_embedding(c)) / nv)
                    .collect();
                let mut margin = 0.0;
                for &i in labels.positives() {
                    let i = i as usize;
                    for j in (0..sem.classes()).filter(|&j| !labels.contains(j)) {
                        let arg = sem.delta(i, j) - cos[i] + cos[j];
                        if arg > 0.0 {
                            margin += arg;
                            cos_grad(&v, nv, cos[i], sem.unit_embedding(i), -1.0, &mut g_v);
                            cos_grad(&v, nv, cos[j], sem.unit_embedding(j), 1.0, &mut g_v);
                        }
                    }
                }
                loss.margin += margin;
                sample_total += margin;
            } else {
                quantizer::flag_degenerate();
            }
        }

        let input: &[f64] = match head.tap {
            ClassifierTap::Semantic => &v,
            ClassifierTap::Features => s.x,
        };
        let logits = supervised::logits(input, head)?;
        let ce = supervised::classification_loss_from_logits(&logits, labels, hyper.label_mode)?;
        let g_s: Vec<f64> = match hyper.label_mode {
            LabelMode::Single => {
                let lse = supervised::log_sum_exp(&logits);
                let target = labels.positives()[0] as usize;
                logits
                    .iter()
                    .enumerate()
                    .map(|(c, &z)| (z - lse).exp() - if c == target { 1.0 } else { 0.0 })
                    .collect()
            }
            LabelMode::Multi => {
                let y = labels.multi_hot(head.classes);
                logits
                    .iter()
                    .zip(&y)
                    .map(|(&z, &yc)| 1.0 / (1.0 + (-z).exp()) - yc)
                    .collect()
            }
        };
        let lam = hyper.lambda;
        add_outer(&mut grads.w_cls, head.classes, lam, input, &g_s);
        axpy(&mut grads.bias, lam, &g_s);
        if head.tap == ClassifierTap::Semantic {
            let back = mat_vec(&head.w_cls, head.tap_dim(), head.classes, &g_s);
            axpy(&mut g_v, lam, &back);
        }
        loss.classification += ce;
        sample_total += lam * ce;
    }

    let tau = hyper.tau;
    let st = quantizer::forward_cascade(&v, &model.codebooks, &model.cascade_config(), CascadeMode::Training)?;
    let wts = model.distortion_weights();
    let dist = quantizer::distortion(&v, &st, &wts);
    loss.distortion += dist.total;
    sample_total += tau * dist.total;
    loss.total += sample_total;

    if tau != 0.0 {
        let layers = st.layers();
        let cfg = model.cascade_config();
        // running residuals r_l = v - S_l and h_l = v - H_l
        let mut soft_res = Vec::with_capacity(layers);
        let mut hard_res = Vec::with_capacity(layers);
        let (mut r, mut h) = (v.clone(), v.clone());
        for l in 0..layers {
            r = sub(&r, &st.soft[l]);
            h = sub(&h, &st.hard[l]);
            soft_res.push(r.clone());
            hard_res.push(h.clone());
        }
        // suffix sums Σ_{l'>=l} w_l' r_l'
        let mut soft_suffix = vec![vec![0.0; e]; layers + 1];
        let mut hard_suffix = vec![vec![0.0; e]; layers + 1];
        for l in (0..layers).rev() {
            let w = wts.layer_weights[l];
            soft_suffix[l] = soft_suffix[l + 1].clone();
            axpy(&mut soft_suffix[l], w, &soft_res[l]);
            hard_suffix[l] = hard_suffix[l + 1].clone();
            axpy(&mut hard_suffix[l], w, &hard_res[l]);
        }
        axpy(&mut g_v, 2.0 * tau, &soft_suffix[0]);
        axpy(&mut g_v, 2.0 * tau * wts.mu, &hard_suffix[0]);

        let mut g_next = vec![0.0; e];
        for l in (0..layers).rev() {
            let cb = &model.codebooks[l];
            let gcb = &mut grads.codebooks[l];
            let w = wts.layer_weights[l];
            let mismatch = sub(&st.soft[l], &st.hard[l]);

            // hard side: selected codeword only
            let sel = st.indices[l].get();
            let gsel = &mut gcb[sel * e..(sel + 1) * e];
            axpy(gsel, -2.0 * tau * wts.mu, &hard_suffix[l]);
            axpy(gsel, -2.0 * tau * wts.nu * w, &mismatch);

            // dL/dq^l, including the path through x^{l+1} = x^l - q^l
            let mut g_q = vec![0.0; e];
            axpy(&mut g_q, -2.0 * tau, &soft_suffix[l]);
            axpy(&mut g_q, 2.0 * tau * wts.nu * w, &mismatch);
            axpy(&mut g_q, -1.0, &g_next);

            let x_l = &st.soft_inputs[l];
            let a = &st.weights[l];
            let mut g_x = g_next.clone();
            let proj: Vec<f64> = cb.words().map(|c| dot(&g_q, c)).collect();
            let mean_proj: f64 = a.iter().zip(&proj).map(|(ak, pk)| ak * pk).sum();
            for k in 0..cb.len() {
                let gk = &mut gcb[k * e..(k + 1) * e];
                axpy(gk, a[k], &g_q);
                let g_dist = -cfg.gamma * a[k] * (proj[k] - mean_proj);
                metric_backward(cfg.soft_metric, x_l, cb.word(k), g_dist, &mut g_x, gk);
            }
            g_next = g_x;
        }
        axpy(&mut g_v, 1.0, &g_next);
    }

    if let Some(head) = &model.head {
        add_outer(&mut grads.w_embed, head.embed_dim, 1.0, s.x, &g_v);
    }
    Ok(())
}

/// Central differences `(f(p + ε) - f(p - ε)) / 2ε` for every parameter.
pub fn finite_diff_gradients<F>(loss: F, model: &ProgressiveModel, epsilon: f64) -> Result<Gradients>
where
    F: Fn(&ProgressiveModel) -> Result<f64>,
{
    assert!(
        (1e-7..=1e-3).contains(&epsilon),
        "epsilon {epsilon} outside [1e-7, 1e-3]"
    );
    let mut grads = Gradients::zeros_like(model);
    let mut work = model.clone();
    let counts: Vec<usize> = grads.slices().iter().map(|s| s.len()).collect();
    for (slot, &n) in counts.iter().enumerate() {
        for i in 0..n {
            let orig = param_slices_mut(&mut work)[slot][i];
            param_slices_mut(&mut work)[slot][i] = orig + epsilon;
            let up = loss(&work)?;
            param_slices_mut(&mut work)[slot][i] = orig - epsilon;
            let down = loss(&work)?;
            param_slices_mut(&mut work)[slot][i] = orig;
            grads.slices_mut()[slot][i] = (up - down) / (2.0 * epsilon);
        }
    }
    Ok(grads)
}

/// Largest elementwise relative error between two gradient sets, with
/// `|a - b| / max(|a|, |b|, floor)`.
pub fn max_relative_error(a: &Gradients, b: &Gradients, floor: f64) -> f64 {
    a.slices()
        .iter()
        .zip(b.slices())
        .flat_map(|(x, y)| x.iter().zip(y.iter()))
        .map(|(&p, &q)| (p - q).abs() / p.abs().max(q.abs()).max(floor))
        .fold(0.0, f64::max)
}

//! Label-driven shaping of the quantizer input: a linear projection into a
//! label-embedding space trained with an adaptive-margin hinge loss, and a
//! linear classification head trained with softmax or sigmoid cross-entropy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{dot, mat_t_vec, norm};
use crate::model::ProgressiveModel;
use crate::quantizer::{self, CascadeMode, DistortionBreakdown, MIN_NORM};

/// Label embeddings `z_c` and the pairwise margins `δ_ij = 1 - cos(z_i, z_j)`.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticLabelSet {
    classes: usize,
    dim: usize,
    z: Vec<f64>,
    /// Unit-normalized copy of `z`.
    z_unit: Vec<f64>,
    delta: Vec<f64>,
}

impl SemanticLabelSet {
    pub fn new(classes: usize, dim: usize, z: Vec<f64>) -> Result<Self> {
        if classes == 0 || dim == 0 {
            return Err(Error::Empty("label embedding set".into()));
        }
        if z.len() != classes * dim {
            return Err(Error::Length(format!(
                "{} embedding values for {classes} classes of dimension {dim}",
                z.len()
            )));
        }
        let mut z_unit = z.clone();
        for (c, row) in z_unit.chunks_exact_mut(dim).enumerate() {
            let n = norm(row);
            if !n.is_finite() || n < MIN_NORM {
                return Err(Error::Range(format!("label embedding {c} has degenerate norm")));
            }
            row.iter_mut().for_each(|v| *v /= n);
        }
        let mut delta = vec![0.0; classes * classes];
        for i in 0..classes {
            for j in i + 1..classes {
                let cos = dot(&z_unit[i * dim..(i + 1) * dim], &z_unit[j * dim..(j + 1) * dim]);
                let d = (1.0 - cos).clamp(0.0, 2.0);
                delta[i * classes + j] = d;
                delta[j * classes + i] = d;
            }
        }
        Ok(SemanticLabelSet {
            classes,
            dim,
            z,
            z_unit,
            delta,
        })
    }

    /// Deterministic stand-in embeddings: orthonormal basis vectors when
    /// `classes <= dim`, otherwise random unit vectors.
    pub fn synthetic(classes: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut z = vec![0.0; classes * dim];
        if classes <= dim {
            for c in 0..classes {
                z[c * dim + c] = 1.0;
            }
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for v in z.iter_mut() {
                *v = StandardNormal.sample(&mut rng);
            }
        }
        Self::new(classes, dim, z)
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn embedding(&self, c: usize) -> &[f64] {
        &self.z[c * self.dim..(c + 1) * self.dim]
    }

    pub(crate) fn unit_embedding(&self, c: usize) -> &[f64] {
        &self.z_unit[c * self.dim..(c + 1) * self.dim]
    }

    pub fn raw(&self) -> &[f64] {
        &self.z
    }

    pub fn delta(&self, i: usize, j: usize) -> f64 {
        self.delta[i * self.classes + j]
    }
}

/// Positive class ids of one data point.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LabelAnnotation {
    positives: Vec<u16>,
}

impl LabelAnnotation {
    pub fn new(mut positives: Vec<u16>) -> Result<Self> {
        if positives.is_empty() {
            return Err(Error::Empty("label set has no positive classes".into()));
        }
        positives.sort_unstable();
        positives.dedup();
        Ok(LabelAnnotation { positives })
    }

    pub fn single(class: u16) -> Self {
        LabelAnnotation { positives: vec![class] }
    }

    pub fn positives(&self) -> &[u16] {
        &self.positives
    }

    pub fn contains(&self, c: usize) -> bool {
        self.positives.binary_search(&(c as u16)).is_ok()
    }

    pub fn multi_hot(&self, classes: usize) -> Vec<f64> {
        let mut y = vec![0.0; classes];
        for &c in &self.positives {
            y[c as usize] = 1.0;
        }
        y
    }

    pub fn intersects(&self, other: &LabelAnnotation) -> bool {
        let (mut i, mut j) = (0, 0);
        while i < self.positives.len() && j < other.positives.len() {
            match self.positives[i].cmp(&other.positives[j]) {
                std::cmp::Ordering::Equal => return true,
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
            }
        }
        false
    }

    pub fn max_class(&self) -> usize {
        *self.positives.last().unwrap() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelMode {
    /// Softmax cross-entropy against one class.
    Single,
    /// Per-class sigmoid cross-entropy.
    Multi,
}

/// Which vector the classification head reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClassifierTap {
    /// The projected semantic vector `v`.
    Semantic,
    /// The raw input features.
    Features,
}

/// Linear projection `v = W_embedᵀ x` plus a linear classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHead {
    pub input_dim: usize,
    pub embed_dim: usize,
    pub classes: usize,
    pub tap: ClassifierTap,
    /// `input_dim × embed_dim`
    pub w_embed: Vec<f64>,
    /// `tap_dim × classes`
    pub w_cls: Vec<f64>,
    pub bias: Vec<f64>,
}

impl ProjectionHead {
    pub fn zeros(input_dim: usize, embed_dim: usize, classes: usize, tap: ClassifierTap) -> Self {
        let tap_dim = match tap {
            ClassifierTap::Semantic => embed_dim,
            ClassifierTap::Features => input_dim,
        };
        ProjectionHead {
            input_dim,
            embed_dim,
            classes,
            tap,
            w_embed: vec![0.0; input_dim * embed_dim],
            w_cls: vec![0.0; tap_dim * classes],
            bias: vec![0.0; classes],
        }
    }

    /// Gaussian init scaled by `1/sqrt(fan_in)`, with an identity-like
    /// projection when `input_dim == embed_dim`.
    pub fn init(input_dim: usize, embed_dim: usize, classes: usize, tap: ClassifierTap, rng: &mut ChaCha8Rng) -> Self {
        let mut head = Self::zeros(input_dim, embed_dim, classes, tap);
        let s = 1.0 / (input_dim as f64).sqrt();
        for w in head.w_embed.iter_mut() {
            let g: f64 = StandardNormal.sample(rng);
            *w = g * s * if input_dim == embed_dim { 0.1 } else { 1.0 };
        }
        if input_dim == embed_dim {
            for i in 0..input_dim {
                head.w_embed[i * embed_dim + i] += 1.0;
            }
        }
        let s = 1.0 / (head.tap_dim() as f64).sqrt();
        for w in head.w_cls.iter_mut() {
            let g: f64 = StandardNormal.sample(rng);
            *w = g * s * 0.1;
        }
        head
    }

    pub fn tap_dim(&self) -> usize {
        match self.tap {
            ClassifierTap::Semantic => self.embed_dim,
            ClassifierTap::Features => self.input_dim,
        }
    }

    pub fn is_finite(&self) -> bool {
        crate::linalg::all_finite(&self.w_embed)
            && crate::linalg::all_finite(&self.w_cls)
            && crate::linalg::all_finite(&self.bias)
    }
}

/// `v = W_embedᵀ x`
pub fn project(x: &[f64], head: &ProjectionHead) -> Result<Vec<f64>> {
    Error::check_dim(head.input_dim, x.len())?;
    Ok(mat_t_vec(&head.w_embed, head.input_dim, head.embed_dim, x))
}

/// Class logits from the classifier input (`v` or `x`, per the head's tap).
pub fn logits(input: &[f64], head: &ProjectionHead) -> Result<Vec<f64>> {
    Error::check_dim(head.tap_dim(), input.len())?;
    let mut s = mat_t_vec(&head.w_cls, head.tap_dim(), head.classes, input);
    for (si, b) in s.iter_mut().zip(&head.bias) {
        *si += b;
    }
    Ok(s)
}

pub(crate) fn log_sum_exp(s: &[f64]) -> f64 {
    let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + s.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// `max(s, 0) - s y + ln(1 + e^{-|s|})`, equal to `-s y + ln(1 + e^s)`.
#[inline]
pub(crate) fn sigmoid_xent(s: f64, y: f64) -> f64 {
    s.max(0.0) - s * y + (-s.abs()).exp().ln_1p()
}

/// Cross-entropy of precomputed logits against the labels.
pub fn classification_loss_from_logits(s: &[f64], target: &LabelAnnotation, mode: LabelMode) -> Result<f64> {
    if target.max_class() >= s.len() {
        return Err(Error::Range(format!(
            "class {} outside {} classes",
            target.max_class(),
            s.len()
        )));
    }
    match mode {
        LabelMode::Single => {
            if target.positives().len() != 1 {
                return Err(Error::Config("single-label loss given a multi-label annotation".into()));
            }
            Ok(log_sum_exp(s) - s[target.positives()[0] as usize])
        }
        LabelMode::Multi => {
            let y = target.multi_hot(s.len());
            Ok(s.iter().zip(&y).map(|(&si, &yi)| sigmoid_xent(si, yi)).sum())
        }
    }
}

/// Classification loss for a classifier input `input`.
pub fn classification_loss(
    input: &[f64],
    target: &LabelAnnotation,
    head: &ProjectionHead,
    mode: LabelMode,
) -> Result<f64> {
    classification_loss_from_logits(&logits(input, head)?, target, mode)
}

/// `Σ_{i∈Y} Σ_{j∉Y} max(0, δ_ij - cos(v, z_i) + cos(v, z_j))`; zero (and
/// flagged) for a degenerate `v`.
pub fn adaptive_margin_loss(v: &[f64], labels: &LabelAnnotation, sem: &SemanticLabelSet) -> f64 {
    let nv = norm(v);
    if nv < MIN_NORM {
        quantizer::flag_degenerate();
        return 0.0;
    }
    let cos: Vec<f64> = (0..sem.classes()).map(|c| dot(v, sem.unit_embedding(c)) / nv).collect();
    let mut loss = 0.0;
    for &i in labels.positives() {
        let i = i as usize;
        for j in (0..sem.classes()).filter(|&j| !labels.contains(j)) {
            loss += (sem.delta(i, j) - cos[i] + cos[j]).max(0.0);
        }
    }
    loss
}

/// Per-sample loss and its parts.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// Adaptive margin loss.
    pub margin: f64,
    /// Classification loss.
    pub classification: f64,
    pub distortion: DistortionBreakdown,
    /// `margin + λ classification + τ distortion.total`
    pub total: f64,
}

/// Total loss of one labeled sample. Headless models contribute only the
/// distortion term.
pub fn total_loss(x: &[f64], labels: Option<&LabelAnnotation>, model: &ProgressiveModel) -> Result<LossBreakdown> {
    let hyper = &model.hyper;
    let v = model.embed(x)?;
    let (mut margin, mut classification) = (0.0, 0.0);
    if let (Some(head), Some(labels)) = (&model.head, labels) {
        if let Some(sem) = &model.sem {
            margin = adaptive_margin_loss(&v, labels, sem);
        }
        let input = match head.tap {
            ClassifierTap::Semantic => &v[..],
            ClassifierTap::Features => x,
        };
        classification = classification_loss(input, labels, head, hyper.label_mode)?;
    }
    let st = quantizer::forward_cascade(&v, &model.codebooks, &model.cascade_config(), CascadeMode::Training)?;
    let distortion = quantizer::distortion(&v, &st, &model.distortion_weights());
    let total = margin + hyper.lambda * classification + hyper.tau * distortion.total;
    Ok(LossBreakdown {
        margin,
        classification,
        distortion,
        total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn delta_matrix_properties() {
        let sem = SemanticLabelSet::synthetic(7, 3, 11).unwrap();
        for i in 0..7 {
            assert_eq!(sem.delta(i, i), 0.0);
            for j in 0..7 {
                assert_eq!(sem.delta(i, j), sem.delta(j, i));
                assert!((0.0..=2.0).contains(&sem.delta(i, j)));
            }
        }
        let ortho = SemanticLabelSet::synthetic(3, 5, 0).unwrap();
        assert_eq!(ortho.delta(0, 2), 1.0);
    }

    #[test]
    fn projection_examples() {
        let mut head = ProjectionHead::zeros(3, 3, 2, ClassifierTap::Semantic);
        let x = [0.5, -1.5, 2.0];
        assert_eq!(project(&x, &head).unwrap(), vec![0.0; 3]);
        for i in 0..3 {
            head.w_embed[i * 3 + i] = 1.0;
        }
        assert_eq!(project(&x, &head).unwrap(), x.to_vec());
        assert!(matches!(project(&[1.0], &head), Err(Error::Shape { .. })));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (d, e) = (5, 4);
        let mut head = ProjectionHead::zeros(d, e, 2, ClassifierTap::Semantic);
        head.w_embed.iter_mut().for_each(|w| *w = rng.random_range(-1.0..1.0));
        let x: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let v = project(&x, &head).unwrap();
        for j in 0..e {
            let mut acc = 0.0;
            for i in 0..d {
                acc += head.w_embed[i * e + j] * x[i];
            }
            assert!((v[j] - acc).abs() < 1e-14);
        }
    }

    #[test]
    fn classification_examples() {
        let s = vec![0.7; 10];
        let l = classification_loss_from_logits(&s, &LabelAnnotation::single(3), LabelMode::Single).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-12);
        let z = vec![0.0; 6];
        let y = LabelAnnotation::new(vec![1, 4]).unwrap();
        let l = classification_loss_from_logits(&z, &y, LabelMode::Multi).unwrap();
        assert!((l - 6.0 * 2f64.ln()).abs() < 1e-12);
        assert!(LabelAnnotation::new(vec![]).is_err());
        assert!(classification_loss_from_logits(&z, &y, LabelMode::Single).is_err());
    }

    #[test]
    fn classification_matches_direct_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let s: Vec<f64> = (0..5).map(|_| rng.random_range(-4.0..4.0)).collect();
            let c = rng.random_range(0..5u16);
            let direct = -(s[c as usize].exp() / s.iter().map(|v| v.exp()).sum::<f64>()).ln();
            let l = classification_loss_from_logits(&s, &LabelAnnotation::single(c), LabelMode::Single).unwrap();
            assert!((l - direct).abs() < 1e-12);
            let y = LabelAnnotation::new(vec![c, (c + 2) % 5]).unwrap();
            let yh = y.multi_hot(5);
            let direct: f64 = s
                .iter()
                .zip(&yh)
                .map(|(&si, &yi)| -si * yi + (1.0 + si.exp()).ln())
                .sum();
            let l = classification_loss_from_logits(&s, &y, LabelMode::Multi).unwrap();
            assert!((l - direct).abs() < 1e-12);
        }
        // large logits stay finite
        let l = classification_loss_from_logits(
            &[800.0, -800.0],
            &LabelAnnotation::new(vec![1]).unwrap(),
            LabelMode::Multi,
        )
        .unwrap();
        assert!((l - 1600.0).abs() < 1e-9);
    }

    #[test]
    fn margin_examples() {
        let sem = SemanticLabelSet::synthetic(4, 4, 0).unwrap();
        let v = sem.embedding(2).to_vec();
        assert_eq!(adaptive_margin_loss(&v, &LabelAnnotation::single(2), &sem), 0.0);
        let all = LabelAnnotation::new(vec![0, 1, 2, 3]).unwrap();
        assert_eq!(adaptive_margin_loss(&[0.3, 0.1, -0.2, 0.9], &all, &sem), 0.0);
        assert_eq!(adaptive_margin_loss(&[0.0; 4], &LabelAnnotation::single(0), &sem), 0.0);
    }

    #[test]
    fn margin_matches_double_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (c, e) = (5, 6);
        let z: Vec<f64> = (0..c * e).map(|_| rng.random_range(-1.0..1.0)).collect();
        let sem = SemanticLabelSet::new(c, e, z.clone()).unwrap();
        let cosf = |a: &[f64], b: &[f64]| dot(a, b) / (norm(a) * norm(b));
        for _ in 0..50 {
            let v: Vec<f64> = (0..e).map(|_| rng.random_range(-1.0..1.0)).collect();
            let p1 = rng.random_range(0..5u16);
            let labels = LabelAnnotation::new(vec![p1, (p1 + 1) % 5]).unwrap();
            let mut expect = 0.0;
            for i in 0..c {
                for j in 0..c {
                    if labels.contains(i) && !labels.contains(j) {
                        let zi = &z[i * e..(i + 1) * e];
                        let zj = &z[j * e..(j + 1) * e];
                        let delta = 1.0 - cosf(zi, zj);
                        expect += f64::max(0.0, delta - cosf(&v, zi) + cosf(&v, zj));
                    }
                }
            }
            let got = adaptive_margin_loss(&v, &labels, &sem);
            assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
            assert!(got >= 0.0);
            let scaled: Vec<f64> = v.iter().map(|x| x * 37.5).collect();
            let l2 = adaptive_margin_loss(&scaled, &labels, &sem);
            assert!((l2 - got).abs() <= 1e-9 * got.max(1e-300));
        }
    }
}

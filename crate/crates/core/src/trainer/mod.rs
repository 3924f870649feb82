//! Mini-batch training of the codebook stack and projection head.

mod baselines;
mod grad;
mod optim;

pub use baselines::{
    kmeans_lloyd, kmeans_lloyd_detailed, kmeans_lloyd_from, seed_centroids, train_pq_baseline, train_residual_baseline,
    KMeansResult, ProductQuantizer,
};
pub use grad::{
    analytic_gradients, batch_loss, finite_diff_gradients, max_relative_error, param_slices_mut, BatchLoss, Gradients,
    Sample,
};
pub use optim::{Optimizer, OptimizerKind};

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{ProgressiveModel, TrainingHistory};
use crate::quantizer::{self, CascadeMode, Metric};
use crate::supervised::{ClassifierTap, LabelAnnotation, LabelMode, ProjectionHead, SemanticLabelSet};

/// Training and architecture settings. Field names double as the JSON
/// config keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Hyperparameters {
    /// Weight of the classification loss.
    pub lambda: f64,
    /// Weight of the distortion loss.
    pub tau: f64,
    /// Weight of the hard-assignment losses inside the distortion.
    pub mu: f64,
    /// Weight of the soft/hard match losses inside the distortion.
    pub nu: f64,
    /// Learning rate.
    pub eta: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Softmax sharpness of the soft assignment.
    pub gamma: f64,
    /// Number of codebooks L.
    pub layers: usize,
    /// Codewords per codebook K, a power of two.
    pub codebook_size: usize,
    /// Dimension E of the projected space; ignored by headless models.
    pub embed_dim: usize,
    pub seed: u64,
    pub optimizer: OptimizerKind,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub soft_metric: Metric,
    pub hard_metric: Metric,
    /// Per-layer loss weights; uniform ones when absent.
    pub layer_weights: Option<Vec<f64>>,
    /// Train a projection head when labels are available.
    pub supervised: bool,
    pub label_mode: LabelMode,
    pub classifier_tap: ClassifierTap,
    /// Lloyd iterations per layer for the codebook initialization.
    pub init_iters: usize,
    /// Fraction of the training rows held out for loss tracking.
    pub holdout_fraction: f64,
}

impl Default for Hyperparameters {
    fn default() -> Self {
        Hyperparameters {
            lambda: 0.1,
            tau: 1.0,
            mu: 1.0,
            nu: 0.1,
            eta: 1e-3,
            epochs: 64,
            batch_size: 16,
            gamma: 20.0,
            layers: 4,
            codebook_size: 256,
            embed_dim: 300,
            seed: 0,
            optimizer: OptimizerKind::Adam,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            soft_metric: Metric::Cosine,
            hard_metric: Metric::Euclidean,
            layer_weights: None,
            supervised: true,
            label_mode: LabelMode::Single,
            classifier_tap: ClassifierTap::Semantic,
            init_iters: 25,
            holdout_fraction: 0.1,
        }
    }
}

impl Hyperparameters {
    pub fn layer_weights(&self, layers: usize) -> Vec<f64> {
        match &self.layer_weights {
            Some(w) => w.clone(),
            None => vec![1.0; layers],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("lambda", self.lambda),
            ("tau", self.tau),
            ("mu", self.mu),
            ("nu", self.nu),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite nonnegative number"));
            }
        }
        if !(self.eta > 0.0 && self.gamma > 0.0 && self.epsilon > 0.0) {
            return bad("eta, gamma and epsilon must be positive".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("beta1 and beta2 must lie in [0, 1)".into());
        }
        if self.batch_size == 0 || self.layers == 0 {
            return bad("batch_size and layers must be at least 1".into());
        }
        if self.codebook_size < 2 || !self.codebook_size.is_power_of_two() {
            return bad(format!(
                "codebook_size {} is not a power of two >= 2",
                self.codebook_size
            ));
        }
        if let Some(w) = &self.layer_weights {
            if w.len() != self.layers || w.iter().any(|v| v.is_nan() || *v < 0.0) {
                return bad("layer_weights needs one nonnegative weight per layer".into());
            }
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return bad("holdout_fraction must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Feature rows with optional per-row labels and label embeddings.
#[derive(Debug, Clone, Copy)]
pub struct TrainingSet<'a> {
    pub features: &'a Matrix,
    pub labels: Option<&'a [LabelAnnotation]>,
    pub label_embeddings: Option<&'a SemanticLabelSet>,
}

impl<'a> TrainingSet<'a> {
    pub fn unlabeled(features: &'a Matrix) -> Self {
        TrainingSet {
            features,
            labels: None,
            label_embeddings: None,
        }
    }

    fn sample(&self, i: usize) -> Sample<'a> {
        Sample {
            x: self.features.row(i),
            labels: self.labels.map(|l| &l[i]),
        }
    }
}

/// Builds the untrained model: head (when supervised) and residual K-means
/// codebooks fitted on the projected training rows.
pub fn initialize(data: &TrainingSet<'_>, hyper: &Hyperparameters) -> Result<ProgressiveModel> {
    hyper.validate()?;
    let features = data.features;
    if features.rows() == 0 || features.cols() == 0 {
        return Err(Error::Empty("training set has no rows".into()));
    }
    if let Some(l) = data.labels {
        if l.len() != features.rows() {
            return Err(Error::Length(format!(
                "{} labels for {} rows",
                l.len(),
                features.rows()
            )));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed);
    let d = features.cols();
    let (head, sem) = match data.labels {
        Some(labels) if hyper.supervised => {
            let max_class = labels.iter().map(LabelAnnotation::max_class).max().unwrap_or(0);
            let sem = match data.label_embeddings {
                Some(s) => {
                    if s.classes() <= max_class {
                        return Err(Error::Config(format!(
                            "label embeddings cover {} classes, labels use class {max_class}",
                            s.classes()
                        )));
                    }
                    s.clone()
                }
                None => SemanticLabelSet::synthetic(max_class + 1, hyper.embed_dim, hyper.seed)?,
            };
            let e = sem.dim();
            let head = ProjectionHead::init(d, e, sem.classes(), hyper.classifier_tap, &mut rng);
            (Some(head), Some(sem))
        }
        _ => (None, None),
    };
    let embedded = match &head {
        Some(h) => features.map_rows(h.embed_dim, |x| crate::supervised::project(x, h))?,
        None => features.clone(),
    };
    if embedded.rows() < hyper.codebook_size {
        warn!(
            "{} training rows for {} codewords per layer",
            embedded.rows(),
            hyper.codebook_size
        );
    }
    let codebooks = train_residual_baseline(
        &embedded, hyper.layers, hyper.codebook_size, hyper.init_iters, hyper.seed,
    )?;
    let mut hyper = hyper.clone();
    hyper.embed_dim = embedded.cols();
    Ok(ProgressiveModel {
        input_dim: d,
        codebooks,
        head,
        sem,
        hyper,
        history: TrainingHistory::default(),
    })
}

/// Mean full-length hard-assignment distortion of `rows` in the quantizer
/// input space.
pub fn mean_hard_distortion(model: &ProgressiveModel, features: &Matrix, rows: &[usize]) -> Result<f64> {
    Ok(mean_hard_distortion_per_layer(model, features, rows)?
        .last()
        .copied()
        .unwrap_or(0.0))
}

/// Mean `|v - Σ_{i<=l} q_H^i|²` for every prefix length `l`.
pub fn mean_hard_distortion_per_layer(model: &ProgressiveModel, features: &Matrix, rows: &[usize]) -> Result<Vec<f64>> {
    let cfg = model.cascade_config();
    let mut acc = vec![0.0; model.layers()];
    for &i in rows {
        let v = model.embed(features.row(i))?;
        let st = quantizer::forward_cascade(&v, &model.codebooks, &cfg, CascadeMode::Encoding)?;
        let mut r = v;
        for (l, q) in st.hard.iter().enumerate() {
            r.iter_mut().zip(q).for_each(|(a, b)| *a -= b);
            acc[l] += crate::linalg::norm_sq(&r);
        }
    }
    let n = rows.len().max(1) as f64;
    Ok(acc.into_iter().map(|a| a / n).collect())
}

/// Trains a model on `data`. Deterministic for a fixed seed.
pub fn train(data: &TrainingSet<'_>, hyper: &Hyperparameters) -> Result<ProgressiveModel> {
    let mut model = initialize(data, hyper)?;
    let hyper = model.hyper.clone();
    let n = data.features.rows();
    let mut rng = ChaCha8Rng::seed_from_u64(hyper.seed ^ 0x005e_ed0f_5a17);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let holdout_len = if n >= 10 {
        ((n as f64) * hyper.holdout_fraction).ceil() as usize
    } else {
        0
    };
    let (train_rows, holdout_rows) = order.split_at(n - holdout_len);
    let mut train_rows = train_rows.to_vec();
    let holdout_rows = holdout_rows.to_vec();

    let holdout_loss = |m: &ProgressiveModel| -> Result<f64> {
        if holdout_rows.is_empty() {
            return Ok(f64::NAN);
        }
        let batch: Vec<Sample<'_>> = holdout_rows.iter().map(|&i| data.sample(i)).collect();
        Ok(batch_loss(m, &batch)?.total)
    };
    model.history.holdout_total.push(holdout_loss(&model)?);
    model
        .history
        .hard_distortion
        .push(mean_hard_distortion(&model, data.features, &train_rows)?);

    let mut opt = Optimizer::new(hyper.optimizer, hyper.eta, hyper.beta1, hyper.beta2, hyper.epsilon);
    for epoch in 0..hyper.epochs {
        train_rows.shuffle(&mut rng);
        let mut sums = BatchLoss::default();
        let mut batches = 0usize;
        for (step, chunk) in train_rows.chunks(hyper.batch_size).enumerate() {
            let batch: Vec<Sample<'_>> = chunk.iter().map(|&i| data.sample(i)).collect();
            let (loss, grads) = analytic_gradients(&model, &batch)?;
            if !loss.total.is_finite() || !grads.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    msg: format!("loss {} with finite gradients: {}", loss.total, grads.is_finite()),
                });
            }
            opt.update(param_slices_mut(&mut model), grads.slices());
            if !model.is_finite() {
                return Err(Error::Divergence {
                    epoch,
                    step,
                    msg: "parameters became non-finite".into(),
                });
            }
            sums.total += loss.total;
            sums.margin += loss.margin;
            sums.classification += loss.classification;
            sums.distortion += loss.distortion;
            batches += 1;
        }
        let b = batches.max(1) as f64;
        let h = &mut model.history;
        h.total.push(sums.total / b);
        h.margin.push(sums.margin / b);
        h.classification.push(sums.classification / b);
        h.distortion.push(sums.distortion / b);
        let hold = holdout_loss(&model)?;
        let hard = mean_hard_distortion(&model, data.features, &train_rows)?;
        model.history.holdout_total.push(hold);
        model.history.hard_distortion.push(hard);
        info!(
            "epoch {}/{}: loss {:.5} holdout {:.5} hard distortion {:.5}",
            epoch + 1,
            hyper.epochs,
            sums.total / b,
            hold,
            hard
        );
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn blobs(seed: u64) -> (Matrix, Vec<LabelAnnotation>) {
        let ds = crate::io::make_synthetic(&crate::io::SyntheticSpec {
            clusters: 4,
            points_per_cluster: 30,
            dim: 6,
            noise: 0.2,
            seed,
        })
        .unwrap();
        (ds.features, ds.labels.unwrap())
    }

    fn small_hyper() -> Hyperparameters {
        Hyperparameters {
            layers: 2,
            codebook_size: 4,
            embed_dim: 6,
            epochs: 3,
            batch_size: 8,
            eta: 1e-2,
            ..Hyperparameters::default()
        }
    }

    #[test]
    fn zero_epochs_returns_initialized_model() {
        let (x, y) = blobs(1);
        let data = TrainingSet {
            features: &x,
            labels: Some(&y),
            label_embeddings: None,
        };
        let hyper = Hyperparameters {
            epochs: 0,
            ..small_hyper()
        };
        let trained = train(&data, &hyper).unwrap();
        let init = initialize(&data, &hyper).unwrap();
        assert_eq!(trained.codebooks, init.codebooks);
        assert_eq!(trained.head, init.head);
        assert!(trained.history.total.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let (x, y) = blobs(2);
        let data = TrainingSet {
            features: &x,
            labels: Some(&y),
            label_embeddings: None,
        };
        let a = train(&data, &small_hyper()).unwrap();
        let b = train(&data, &small_hyper()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.history.total.len(), 3);
    }

    #[test]
    fn rejects_bad_config() {
        let (x, _) = blobs(3);
        let data = TrainingSet::unlabeled(&x);
        for h in [
            Hyperparameters {
                codebook_size: 6,
                ..small_hyper()
            },
            Hyperparameters {
                batch_size: 0,
                ..small_hyper()
            },
            Hyperparameters {
                gamma: 0.0,
                ..small_hyper()
            },
            Hyperparameters {
                layer_weights: Some(vec![1.0]),
                ..small_hyper()
            },
        ] {
            assert!(matches!(train(&data, &h), Err(Error::Config(_))));
        }
        let empty = Matrix::zeros(0, 4);
        assert!(train(&TrainingSet::unlabeled(&empty), &small_hyper()).is_err());
    }

    #[test]
    fn divergence_is_reported() {
        let (x, y) = blobs(4);
        let data = TrainingSet {
            features: &x,
            labels: Some(&y),
            label_embeddings: None,
        };
        let hyper = Hyperparameters {
            optimizer: OptimizerKind::Sgd,
            eta: 1e300,
            ..small_hyper()
        };
        assert!(matches!(train(&data, &hyper), Err(Error::Divergence { .. })));
    }

    #[test]
    fn headless_when_unlabeled() {
        let (x, _) = blobs(5);
        let m = train(&TrainingSet::unlabeled(&x), &small_hyper()).unwrap();
        assert!(m.head.is_none());
        assert_eq!(m.qblock_dim(), 6);
    }
}

//! Reusable checks and benchmarks: the finite-difference gradient suite and
//! the Gaussian-mixture retrieval benchmark.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::code::Codebook;
use crate::error::Result;
use crate::index::{encode_database, EncodedDatabase};
use crate::io::{make_synthetic, DatasetBundle, SyntheticSpec};
use crate::linalg::{sq_dist, Matrix};
use crate::metrics::{mean_average_precision, recall_at, LabelRelevance};
use crate::model::{ProgressiveModel, TrainingHistory};
use crate::quantizer::Metric;
use crate::search::{search_batch, RetrievalResult};
use crate::supervised::{ClassifierTap, LabelAnnotation, LabelMode, ProjectionHead, SemanticLabelSet};
use crate::trainer::{
    analytic_gradients, batch_loss, finite_diff_gradients, max_relative_error, mean_hard_distortion_per_layer, train,
    train_pq_baseline, train_residual_baseline, Hyperparameters, Sample, TrainingSet,
};

/// Step used by the gradient check.
pub const GRADCHECK_EPSILON: f64 = 1e-5;
/// Denominator floor of the relative error, so entries that are zero up to
/// rounding are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-4;

/// A tiny random model with a labelled batch.
#[derive(Debug, Clone)]
pub struct GradcheckCase {
    pub model: ProgressiveModel,
    pub xs: Vec<Vec<f64>>,
    pub labels: Vec<LabelAnnotation>,
}

impl GradcheckCase {
    pub fn batch(&self) -> Vec<Sample<'_>> {
        let supervised = self.model.head.is_some();
        self.xs
            .iter()
            .zip(&self.labels)
            .map(|(x, l)| Sample {
                x,
                labels: supervised.then_some(l),
            })
            .collect()
    }
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let g: f64 = StandardNormal.sample(rng);
            g * scale
        })
        .collect()
}

/// Draws an instance with `D, E ≤ 8`, `K ≤ 4`, `L ≤ 2` and `γ ≤ 50`, mixing
/// metrics, label modes, classifier taps and headless models.
pub fn gradcheck_case(seed: u64) -> Result<GradcheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = rng.random_range(2..=8);
    let e = rng.random_range(2..=8);
    let k = [2, 4][rng.random_range(0..2)];
    let layers = rng.random_range(1..=2);
    let gamma = [1.0, 5.0, 20.0, 50.0][rng.random_range(0..4)];
    let metric = |r: &mut ChaCha8Rng| [Metric::Euclidean, Metric::Cosine][r.random_range(0..2)];
    let soft_metric = metric(&mut rng);
    let hard_metric = metric(&mut rng);
    let supervised = rng.random_range(0..4) != 0;
    let classes = rng.random_range(2..=4);
    let label_mode = [LabelMode::Single, LabelMode::Multi][rng.random_range(0..2)];
    let tap = [ClassifierTap::Semantic, ClassifierTap::Features][rng.random_range(0..2)];
    let qdim = if supervised { e } else { d };

    let codebooks = (0..layers)
        .map(|l| Codebook::new(l, qdim, normal_vec(&mut rng, k * qdim, 1.0 / (l + 1) as f64)))
        .collect::<Result<Vec<_>>>()?;
    let (head, sem) = if supervised {
        let mut head = ProjectionHead::zeros(d, e, classes, tap);
        head.w_embed = normal_vec(&mut rng, d * e, 0.7);
        head.w_cls = normal_vec(&mut rng, head.w_cls.len(), 0.5);
        head.bias = normal_vec(&mut rng, classes, 0.1);
        let sem = SemanticLabelSet::new(classes, e, normal_vec(&mut rng, classes * e, 1.0))?;
        (Some(head), Some(sem))
    } else {
        (None, None)
    };
    let hyper = Hyperparameters {
        gamma,
        soft_metric,
        hard_metric,
        layers,
        codebook_size: k,
        embed_dim: qdim,
        supervised,
        label_mode,
        classifier_tap: tap,
        lambda: rng.random_range(0.05..1.0),
        mu: rng.random_range(0.0..1.5),
        nu: rng.random_range(0.0..0.5),
        layer_weights: Some((0..layers).map(|_| rng.random_range(0.5..1.5)).collect()),
        ..Hyperparameters::default()
    };
    let model = ProgressiveModel {
        input_dim: d,
        codebooks,
        head,
        sem,
        hyper,
        history: TrainingHistory::default(),
    };
    let n = rng.random_range(1..=3);
    let xs = (0..n).map(|_| normal_vec(&mut rng, d, 1.0)).collect();
    let labels = (0..n)
        .map(|_| {
            let first = rng.random_range(0..classes) as u16;
            match label_mode {
                LabelMode::Single => LabelAnnotation::single(first),
                LabelMode::Multi => {
                    let mut p = vec![first];
                    p.extend((0..classes as u16).filter(|_| rng.random_range(0..3) == 0));
                    LabelAnnotation::new(p).expect("nonempty")
                }
            }
        })
        .collect();
    Ok(GradcheckCase { model, xs, labels })
}

/// Worst relative error between analytic and central-difference gradients
/// for one case.
pub fn gradcheck_error(case: &GradcheckCase) -> Result<f64> {
    let batch = case.batch();
    let (_, analytic) = analytic_gradients(&case.model, &batch)?;
    let numeric = finite_diff_gradients(|m| Ok(batch_loss(m, &batch)?.total), &case.model, GRADCHECK_EPSILON)?;
    Ok(max_relative_error(&analytic, &numeric, GRADCHECK_FLOOR))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    /// `(seed, max relative error)` per case.
    pub cases: Vec<(u64, f64)>,
    pub max_error: f64,
    pub seconds: f64,
}

/// Runs [`gradcheck_error`] on `count` consecutive seeds from `seed`.
pub fn gradcheck_suite(seed: u64, count: usize) -> Result<GradcheckReport> {
    let start = Instant::now();
    let mut cases = Vec::with_capacity(count);
    for s in seed..seed + count as u64 {
        cases.push((s, gradcheck_error(&gradcheck_case(s)?)?));
    }
    let max_error = cases.iter().map(|c| c.1).fold(0.0, f64::max);
    Ok(GradcheckReport {
        cases,
        max_error,
        seconds: start.elapsed().as_secs_f64(),
    })
}

/// Exact Euclidean `k` nearest database rows (by position in `database`)
/// for each query row, ties by ascending position.
pub fn exact_knn(database: &Matrix, queries: &Matrix, k: usize) -> Vec<Vec<usize>> {
    (0..queries.rows())
        .into_par_iter()
        .map(|q| {
            let qv = queries.row(q);
            let mut d: Vec<(f64, usize)> = database.iter_rows().map(|r| sq_dist(qv, r)).zip(0..).collect();
            let k = k.min(d.len());
            if k > 0 && k < d.len() {
                d.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                d.truncate(k);
            }
            d.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            d.into_iter().map(|p| p.1).collect()
        })
        .collect()
}

/// The desk-scale mixture benchmark: 10 clusters of 200 points in 16
/// dimensions, quantized with 4 layers of 16 codewords.
#[derive(Debug, Clone)]
pub struct MixtureBenchmark {
    pub data: SyntheticSpec,
    pub hyper: Hyperparameters,
    pub recall_k: usize,
}

impl MixtureBenchmark {
    pub fn new(seed: u64) -> Self {
        MixtureBenchmark {
            data: SyntheticSpec {
                clusters: 10,
                points_per_cluster: 200,
                dim: 16,
                noise: 0.1,
                seed,
            },
            hyper: Hyperparameters {
                layers: 4,
                codebook_size: 16,
                embed_dim: 16,
                epochs: 64,
                batch_size: 16,
                eta: 1e-3,
                seed,
                ..Hyperparameters::default()
            },
            recall_k: 10,
        }
    }
}

/// What one benchmark run measured, indexed by prefix length minus one.
#[derive(Debug, Clone)]
pub struct MixtureOutcome {
    pub model: ProgressiveModel,
    /// Mean `|v - Σ_{i≤l} q_H^i|²` over the training rows.
    pub hard_distortion: Vec<f64>,
    /// Recall@k against exact search in the quantizer input space.
    pub recall: Vec<f64>,
    /// mAP over the full database with class agreement as relevance.
    pub map: Vec<f64>,
}

/// Embeds the rows through the model's projection (identity when headless).
pub fn embed_rows(model: &ProgressiveModel, rows: &Matrix) -> Result<Matrix> {
    rows.map_rows(model.qblock_dim(), |x| model.embed(x))
}

/// Retrieval quality of an already-encoded database at every prefix length.
pub fn evaluate_prefixes(
    model: &ProgressiveModel,
    ds: &DatasetBundle,
    db: &EncodedDatabase,
    recall_k: usize,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let split = &ds.split;
    let queries = ds.features.select(&split.query);
    let database = ds.features.select(&split.database);
    let truth = exact_knn(&embed_rows(model, &database)?, &embed_rows(model, &queries)?, recall_k);
    let q_labels = ds.labels_of(&split.query).unwrap_or_default();
    let d_labels = ds.labels_of(&split.database).unwrap_or_default();
    let rel = LabelRelevance::new(&q_labels, &d_labels);
    let n = database.rows();
    let mut recall = Vec::new();
    let mut map = Vec::new();
    for l in 1..=model.layers() {
        let results: Vec<RetrievalResult> = search_batch(&queries, db, model, n, l)?;
        recall.push(recall_at(&results, &truth, recall_k));
        if !q_labels.is_empty() {
            map.push(mean_average_precision(&results, &rel, n)?);
        }
    }
    Ok((recall, map))
}

/// Trains on the train split, encodes the database split once and scores
/// every prefix length.
pub fn run_mixture(bench: &MixtureBenchmark) -> Result<MixtureOutcome> {
    let ds = make_synthetic(&bench.data)?;
    let train_x = ds.features.select(&ds.split.train);
    let train_labels = ds.labels_of(&ds.split.train);
    let set = TrainingSet {
        features: &train_x,
        labels: train_labels.as_deref(),
        label_embeddings: ds.label_embeddings.as_ref(),
    };
    let model = train(&set, &bench.hyper)?;
    let all: Vec<usize> = (0..train_x.rows()).collect();
    let hard_distortion = mean_hard_distortion_per_layer(&model, &train_x, &all)?;
    let db = encode_database(&ds.features.select(&ds.split.database), &model, None)?;
    let (recall, map) = evaluate_prefixes(&model, &ds, &db, bench.recall_k)?;
    Ok(MixtureOutcome {
        model,
        hard_distortion,
        recall,
        map,
    })
}

/// Median of a nonempty sample.
pub fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n % 2 == 1 {
        s[n / 2]
    } else {
        0.5 * (s[n / 2 - 1] + s[n / 2])
    }
}

/// One line of the method comparison printed by the bench command.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub method: &'static str,
    pub code_bits: u32,
    pub distortion: f64,
    pub queries_per_sec: f64,
}

fn timed_search(queries: &Matrix, db: &EncodedDatabase, model: &ProgressiveModel, k: usize) -> Result<f64> {
    let start = Instant::now();
    search_batch(queries, db, model, k, model.layers())?;
    Ok(queries.rows() as f64 / start.elapsed().as_secs_f64().max(1e-9))
}

/// Compares the trained model with residual and product quantization at the
/// same code length on raw features. The trained model is headless here so
/// all three distortions live in the same space.
pub fn bench_compare(ds: &DatasetBundle, hyper: &Hyperparameters, k: usize) -> Result<Vec<BenchRow>> {
    let hyper = Hyperparameters {
        supervised: false,
        ..hyper.clone()
    };
    let train_x = ds.features.select(&ds.split.train);
    let database = ds.features.select(&ds.split.database);
    let queries = ds.features.select(&ds.split.query);
    let bits = hyper.layers as u32 * hyper.codebook_size.trailing_zeros();
    let mut rows = Vec::new();

    let dpq = train(&TrainingSet::unlabeled(&train_x), &hyper)?;
    let db = encode_database(&database, &dpq, None)?;
    rows.push(BenchRow {
        method: "progressive",
        code_bits: bits,
        distortion: crate::index::mean_reconstruction_error(&database, &db, &dpq, dpq.layers())?,
        queries_per_sec: timed_search(&queries, &db, &dpq, k)?,
    });

    let rq = ProgressiveModel::from_codebooks(train_residual_baseline(
        &train_x, hyper.layers, hyper.codebook_size, hyper.init_iters, hyper.seed,
    )?)?;
    let db = encode_database(&database, &rq, None)?;
    rows.push(BenchRow {
        method: "residual",
        code_bits: bits,
        distortion: crate::index::mean_reconstruction_error(&database, &db, &rq, rq.layers())?,
        queries_per_sec: timed_search(&queries, &db, &rq, k)?,
    });

    if ds.features.cols().is_multiple_of(hyper.layers) {
        let pq = train_pq_baseline(
            &train_x, hyper.layers, hyper.codebook_size, hyper.init_iters, hyper.seed,
        )?;
        let codes: Vec<Vec<usize>> = database
            .iter_rows()
            .map(|x| Ok(pq.encode(x)?.into_iter().map(|a| a.get()).collect()))
            .collect::<Result<_>>()?;
        let kk = hyper.codebook_size;
        let start = Instant::now();
        for q in queries.iter_rows() {
            let t = pq.adc_table(q);
            let mut best: Vec<(f64, usize)> = codes
                .iter()
                .enumerate()
                .map(|(i, c)| (c.iter().enumerate().map(|(m, &j)| t[m * kk + j]).sum(), i))
                .collect();
            let kq = k.min(best.len());
            best.select_nth_unstable_by(kq.saturating_sub(1), |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        }
        let qps = queries.rows() as f64 / start.elapsed().as_secs_f64().max(1e-9);
        rows.push(BenchRow {
            method: "product",
            code_bits: bits,
            distortion: pq.mean_distortion(&database)?,
            queries_per_sec: qps,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cases_respect_size_limits() {
        for s in 0..30 {
            let c = gradcheck_case(s).unwrap();
            assert!(c.model.input_dim <= 8 && c.model.qblock_dim() <= 8);
            assert!(c.model.codebook_size() <= 4 && c.model.layers() <= 2);
            assert!(c.model.hyper.gamma <= 50.0);
        }
    }

    #[test]
    fn knn_matches_sorting() {
        let db = Matrix::from_rows(&[vec![0.0], vec![3.0], vec![1.0], vec![-1.0]]);
        let q = Matrix::from_rows(&[vec![0.1]]);
        assert_eq!(exact_knn(&db, &q, 3), vec![vec![0, 2, 3]]);
        assert_eq!(exact_knn(&db, &q, 9), vec![vec![0, 2, 3, 1]]);
    }

    #[test]
    fn median_of_odd_and_even() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
    }
}

//! Classical quantizers: Lloyd K-means, stacked residual K-means and
//! product quantization. The residual stack also seeds progressive training.

use log::warn;
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::code::{AssignmentIndex, Codebook};
use crate::error::{Error, Result};
use crate::linalg::{sq_dist, Matrix};
use crate::quantizer::{hard_assign, Metric};

#[derive(Debug, Clone)]
pub struct KMeansResult {
    /// `K × D` centroids.
    pub centroids: Matrix,
    /// Final assignment of every input row.
    pub assignments: Vec<usize>,
    /// Mean squared distance to the nearest centroid, for the initial seeds
    /// and after every iteration.
    pub history: Vec<f64>,
}

impl KMeansResult {
    pub fn codebook(&self, layer: usize) -> Result<Codebook> {
        Codebook::new(layer, self.centroids.cols(), self.centroids.as_slice().to_vec())
    }

    pub fn final_distortion(&self) -> f64 {
        *self.history.last().unwrap()
    }
}

/// Nearest centroid by squared distance, lowest index on ties.
fn nearest(x: &[f64], centroids: &Matrix) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (k, c) in centroids.iter_rows().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

fn assign_all(data: &Matrix, centroids: &Matrix, out: &mut [usize], dists: &mut [f64]) -> f64 {
    let mut total = 0.0;
    for (i, x) in data.iter_rows().enumerate() {
        let (k, d) = nearest(x, centroids);
        out[i] = k;
        dists[i] = d;
        total += d;
    }
    total / data.rows().max(1) as f64
}

/// Picks `k` seed rows; duplicates are unavoidable when `data` has fewer
/// than `k` rows.
pub fn seed_centroids(data: &Matrix, k: usize, seed: u64) -> Matrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = data.rows();
    let ids: Vec<usize> = if n >= k {
        index::sample(&mut rng, n, k).into_vec()
    } else {
        warn!("k-means asked for {k} centroids from {n} points; seeds will repeat");
        let mut ids: Vec<usize> = (0..n).collect();
        ids.extend((n..k).map(|_| rng.random_range(0..n)));
        ids
    };
    data.select(&ids)
}

pub fn kmeans_lloyd(data: &Matrix, k: usize, iters: usize, seed: u64) -> Result<Codebook> {
    kmeans_lloyd_detailed(data, k, iters, seed)?.codebook(0)
}

pub fn kmeans_lloyd_detailed(data: &Matrix, k: usize, iters: usize, seed: u64) -> Result<KMeansResult> {
    if data.rows() == 0 || k == 0 {
        return Err(Error::Empty("k-means needs data and k >= 1".into()));
    }
    kmeans_lloyd_from(data, seed_centroids(data, k, seed), iters)
}

/// Lloyd iterations from the given initial centroids.
pub fn kmeans_lloyd_from(data: &Matrix, init: Matrix, iters: usize) -> Result<KMeansResult> {
    if data.rows() == 0 {
        return Err(Error::Empty("k-means on empty data".into()));
    }
    Error::check_dim(data.cols(), init.cols())?;
    let (n, d, k) = (data.rows(), data.cols(), init.rows());
    let mut centroids = init;
    let mut assignments = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut history = vec![assign_all(data, &centroids, &mut assignments, &mut dists)];

    for _ in 0..iters {
        let mut sums = Matrix::zeros(k, d);
        let mut counts = vec![0usize; k];
        for (i, x) in data.iter_rows().enumerate() {
            let c = assignments[i];
            counts[c] += 1;
            crate::linalg::axpy(sums.row_mut(c), 1.0, x);
        }
        let mut taken = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                    *dst = s * inv;
                }
                continue;
            }
            // empty: reseed from the farthest point of the largest cluster
            let largest = (0..k).max_by_key(|&j| (counts[j], std::cmp::Reverse(j))).unwrap();
            let far = (0..n)
                .filter(|&i| assignments[i] == largest && !taken[i])
                .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
            if let Some(p) = far {
                taken[p] = true;
                counts[largest] -= 1;
                counts[c] = 1;
                centroids.row_mut(c).copy_from_slice(data.row(p));
                assignments[p] = c;
                dists[p] = 0.0;
            }
        }
        history.push(assign_all(data, &centroids, &mut assignments, &mut dists));
    }
    Ok(KMeansResult {
        centroids,
        assignments,
        history,
    })
}

/// Stacked residual K-means: layer `l` clusters what layers `< l` left over.
pub fn train_residual_baseline(
    data: &Matrix,
    layers: usize,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<Vec<Codebook>> {
    let mut residual = data.clone();
    let mut codebooks = Vec::with_capacity(layers);
    for l in 0..layers {
        let km = kmeans_lloyd_detailed(&residual, k, iters, seed.wrapping_add(l as u64))?;
        let cb = km.codebook(l)?;
        for i in 0..residual.rows() {
            let idx = hard_assign(residual.row(i), &cb, Metric::Euclidean).get();
            for (r, c) in residual.row_mut(i).iter_mut().zip(cb.word(idx)) {
                *r -= c;
            }
        }
        codebooks.push(cb);
    }
    Ok(codebooks)
}

/// Independent codebooks over contiguous subspaces.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductQuantizer {
    pub dim: usize,
    pub sub_dim: usize,
    pub codebooks: Vec<Codebook>,
}

impl ProductQuantizer {
    pub fn subspaces(&self) -> usize {
        self.codebooks.len()
    }

    pub fn encode(&self, x: &[f64]) -> Result<Vec<AssignmentIndex>> {
        Error::check_dim(self.dim, x.len())?;
        Ok(self
            .codebooks
            .iter()
            .zip(x.chunks_exact(self.sub_dim))
            .map(|(cb, part)| hard_assign(part, cb, Metric::Euclidean))
            .collect())
    }

    pub fn reconstruct(&self, codes: &[AssignmentIndex]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim);
        for (cb, c) in self.codebooks.iter().zip(codes) {
            out.extend_from_slice(cb.word(c.get()));
        }
        out
    }

    pub fn quantize(&self, x: &[f64]) -> Result<Vec<f64>> {
        Ok(self.reconstruct(&self.encode(x)?))
    }

    /// Mean squared reconstruction error over the rows of `data`.
    pub fn mean_distortion(&self, data: &Matrix) -> Result<f64> {
        let mut total = 0.0;
        for x in data.iter_rows() {
            total += sq_dist(x, &self.quantize(x)?);
        }
        Ok(total / data.rows().max(1) as f64)
    }

    /// Per-subspace squared distances from `q` to every sub-codeword,
    /// `M × K` row-major.
    pub fn adc_table(&self, q: &[f64]) -> Vec<f64> {
        let mut t = Vec::with_capacity(self.subspaces() * self.codebooks[0].len());
        for (cb, part) in self.codebooks.iter().zip(q.chunks_exact(self.sub_dim)) {
            t.extend(cb.words().map(|c| sq_dist(part, c)));
        }
        t
    }
}

pub fn train_pq_baseline(
    data: &Matrix,
    subspaces: usize,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<ProductQuantizer> {
    let d = data.cols();
    if subspaces == 0 || !d.is_multiple_of(subspaces) {
        return Err(Error::Config(format!(
            "dimension {d} is not divisible into {subspaces} subspaces"
        )));
    }
    let sub_dim = d / subspaces;
    let mut codebooks = Vec::with_capacity(subspaces);
    for m in 0..subspaces {
        let slice = data.map_rows(sub_dim, |r| Ok(r[m * sub_dim..(m + 1) * sub_dim].to_vec()))?;
        let km = kmeans_lloyd_detailed(&slice, k, iters, seed.wrapping_add(m as u64))?;
        codebooks.push(km.codebook(m)?);
    }
    Ok(ProductQuantizer {
        dim: d,
        sub_dim,
        codebooks,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::new(n, d, (0..n * d).map(|_| StandardNormal.sample(&mut rng)).collect())
    }

    #[test]
    fn exact_fit_on_k_distinct_points() {
        let data = Matrix::from_rows(&[vec![0.0, 1.0], vec![5.0, 5.0], vec![-3.0, 2.0], vec![9.0, -1.0]]);
        let km = kmeans_lloyd_detailed(&data, 4, 10, 3).unwrap();
        assert_eq!(km.final_distortion(), 0.0);
        let mut got: Vec<Vec<f64>> = km.centroids.iter_rows().map(<[f64]>::to_vec).collect();
        let mut want: Vec<Vec<f64>> = data.iter_rows().map(<[f64]>::to_vec).collect();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
    }

    #[test]
    fn zero_iterations_return_seeds() {
        let data = gaussian(50, 3, 1);
        let km = kmeans_lloyd_detailed(&data, 8, 0, 42).unwrap();
        assert_eq!(km.centroids, seed_centroids(&data, 8, 42));
        assert_eq!(km.history.len(), 1);
    }

    #[test]
    fn one_hand_stepped_iteration() {
        // 1-D points, seeds 0 and 10
        let data = Matrix::new(6, 1, vec![0.0, 1.0, 2.0, 7.0, 9.0, 11.0]);
        let init = Matrix::new(2, 1, vec![0.0, 10.0]);
        let km = kmeans_lloyd_from(&data, init, 1).unwrap();
        // assign {0,1,2} -> 0 and {7,9,11} -> 10; means 1 and 9
        assert_eq!(km.centroids.as_slice(), &[1.0, 9.0]);
        // initial: (0+1+4+9+1+1)/6; after: (1+0+1+4+0+4)/6
        assert!((km.history[0] - 16.0 / 6.0).abs() < 1e-15);
        assert!((km.history[1] - 10.0 / 6.0).abs() < 1e-15);
        assert_eq!(km.assignments, vec![0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn distortion_never_increases() {
        for seed in 0..5 {
            let data = gaussian(300, 4, seed);
            let km = kmeans_lloyd_detailed(&data, 16, 30, seed).unwrap();
            for w in km.history.windows(2) {
                assert!(w[1] <= w[0] + 1e-12, "{:?}", km.history);
            }
        }
    }

    #[test]
    fn empty_cluster_is_reseeded() {
        // the seed at 100 attracts no points
        let data = Matrix::new(4, 1, vec![0.0, 1.0, 10.0, 20.0]);
        let init = Matrix::new(3, 1, vec![0.0, 100.0, 15.0]);
        let km = kmeans_lloyd_from(&data, init, 3).unwrap();
        assert_eq!(km.centroids.as_slice(), &[0.0, 1.0, 15.0]);
        assert!(km.history.windows(2).all(|w| w[1] <= w[0]));
        assert!((km.final_distortion() - 50.0 / 4.0).abs() < 1e-12);
    }

    #[test]
    fn too_few_points_still_runs() {
        let data = Matrix::new(2, 1, vec![1.0, 2.0]);
        let km = kmeans_lloyd_detailed(&data, 4, 5, 0).unwrap();
        assert_eq!(km.centroids.rows(), 4);
        assert_eq!(km.final_distortion(), 0.0);
    }

    #[test]
    fn residual_single_layer_is_kmeans() {
        let data = gaussian(200, 3, 7);
        let stack = train_residual_baseline(&data, 1, 8, 10, 9).unwrap();
        assert_eq!(stack[0], kmeans_lloyd(&data, 8, 10, 9).unwrap());
    }

    #[test]
    fn residual_norms_shrink_with_depth() {
        let data = gaussian(500, 6, 11);
        let stack = train_residual_baseline(&data, 4, 16, 20, 1).unwrap();
        let mut prev = f64::INFINITY;
        for l in 1..=4 {
            let mut total = 0.0;
            for x in data.iter_rows() {
                let mut r = x.to_vec();
                for cb in &stack[..l] {
                    let k = hard_assign(&r, cb, Metric::Euclidean).get();
                    r.iter_mut().zip(cb.word(k)).for_each(|(a, b)| *a -= b);
                }
                total += r.iter().map(|v| v * v).sum::<f64>().sqrt();
            }
            let mean = total / 500.0;
            assert!(mean <= prev, "layer {l}: {mean} > {prev}");
            prev = mean;
        }
    }

    #[test]
    fn residual_recovers_two_layer_construction() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let c1: Vec<Vec<f64>> = (0..2).map(|i| vec![100.0 * i as f64 - 50.0, 0.0]).collect();
        let c2: Vec<Vec<f64>> = (0..2)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let mut rows = Vec::new();
        for a in &c1 {
            for b in &c2 {
                for _ in 0..5 {
                    rows.push(vec![a[0] + b[0], a[1] + b[1]]);
                }
            }
        }
        let data = Matrix::from_rows(&rows);
        let stack = train_residual_baseline(&data, 2, 2, 20, 0).unwrap();
        let model = crate::model::ProgressiveModel::from_codebooks(stack).unwrap();
        let mut total = 0.0;
        for x in data.iter_rows() {
            let st = crate::quantizer::forward_cascade(
                x,
                &model.codebooks,
                &model.cascade_config(),
                crate::quantizer::CascadeMode::Encoding,
            )
            .unwrap();
            let rec: Vec<f64> = (0..2).map(|i| st.hard.iter().map(|q| q[i]).sum()).collect();
            total += sq_dist(x, &rec);
        }
        assert!(total / 20.0 < 1e-20, "{total}");
    }

    #[test]
    fn pq_examples() {
        let data = gaussian(400, 8, 3);
        let one = train_pq_baseline(&data, 1, 4, 10, 5).unwrap();
        assert_eq!(one.codebooks[0], kmeans_lloyd(&data, 4, 10, 5).unwrap());

        let per_dim = train_pq_baseline(&data, 8, 1, 5, 5).unwrap();
        let mut variance = 0.0;
        for j in 0..8 {
            let mean = data.iter_rows().map(|r| r[j]).sum::<f64>() / 400.0;
            assert!((per_dim.codebooks[j].word(0)[0] - mean).abs() < 1e-12);
            variance += data.iter_rows().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / 400.0;
        }
        assert!((per_dim.mean_distortion(&data).unwrap() - variance).abs() < 1e-10);

        assert!(matches!(train_pq_baseline(&data, 3, 4, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn pq_reconstruction_is_concatenation() {
        let data = gaussian(300, 16, 4);
        let pq = train_pq_baseline(&data, 4, 16, 10, 1).unwrap();
        for x in data.iter_rows().take(50) {
            let mut concat = Vec::new();
            for m in 0..4 {
                let part = &x[m * 4..(m + 1) * 4];
                let cb = &pq.codebooks[m];
                concat.extend_from_slice(cb.word(hard_assign(part, cb, Metric::Euclidean).get()));
            }
            assert_eq!(pq.quantize(x).unwrap(), concat);
        }
    }
}

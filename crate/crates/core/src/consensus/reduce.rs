//! Dimensionality reduction: `n × D` embeddings to `n × k`.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ReducerKind {
    #[default]
    Pca,
    Umap,
}

pub fn reduce(points: &[Vec<f64>], k: usize, kind: ReducerKind, seed: u64) -> Vec<Vec<f64>> {
    match kind {
        ReducerKind::Pca => pca(points, k),
        ReducerKind::Umap => umap(points, k, &UmapParams { seed, ..UmapParams::default() }),
    }
}

/// Principal-component scores. Uses the Gram matrix when there are fewer
/// points than input dimensions. Each component's sign is fixed so that its
/// largest-magnitude score is positive; missing components are zero.
pub fn pca(points: &[Vec<f64>], k: usize) -> Vec<Vec<f64>> {
    let n = points.len();
    if n == 0 {
        return Vec::new();
    }
    let d = points[0].len();
    let mut x = DMatrix::from_fn(n, d, |i, j| points[i][j]);
    for j in 0..d {
        let mean = x.column(j).mean();
        x.column_mut(j).add_scalar_mut(-mean);
    }
    let mut scores = DMatrix::<f64>::zeros(n, k);
    if n <= d {
        let gram = &x * x.transpose();
        let eig = SymmetricEigen::new(gram);
        let order = descending(eig.eigenvalues.as_slice());
        for (c, &idx) in order.iter().take(k).enumerate() {
            let s = eig.eigenvalues[idx].max(0.0).sqrt();
            for i in 0..n {
                scores[(i, c)] = eig.eigenvectors[(i, idx)] * s;
            }
        }
    } else {
        let cov = x.transpose() * &x;
        let eig = SymmetricEigen::new(cov);
        let order = descending(eig.eigenvalues.as_slice());
        for (c, &idx) in order.iter().take(k).enumerate() {
            let v = eig.eigenvectors.column(idx);
            let proj = &x * v;
            scores.column_mut(c).copy_from(&proj);
        }
    }
    for c in 0..k {
        let col = scores.column(c);
        let pivot = (0..n).fold(0, |best, i| if col[i].abs() > col[best].abs() + 1e-12 { i } else { best });
        if col[pivot] < 0.0 {
            scores.column_mut(c).neg_mut();
        }
    }
    (0..n).map(|i| scores.row(i).iter().copied().collect()).collect()
}

fn descending(vals: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..vals.len()).collect();
    idx.sort_by(|&a, &b| vals[b].total_cmp(&vals[a]).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone)]
pub struct UmapParams {
    pub n_neighbors: usize,
    pub n_epochs: usize,
    pub negative_samples: usize,
    pub learning_rate: f64,
    /// Curve parameters for min_dist 0.1, spread 1.0.
    pub a: f64,
    pub b: f64,
    pub seed: u64,
}

impl Default for UmapParams {
    fn default() -> Self {
        UmapParams { n_neighbors: 15, n_epochs: 200, negative_samples: 5, learning_rate: 1.0, a: 1.577, b: 0.895, seed: 0 }
    }
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Fuzzy simplicial set over the kNN graph, symmetrized with the
/// probabilistic t-conorm. Returns weighted edges `(i, j, w)` with `i < j`.
fn fuzzy_graph(points: &[Vec<f64>], k: usize) -> Vec<(usize, usize, f64)> {
    let n = points.len();
    let mut w = vec![vec![0.0; n]; n];
    let target = (k as f64).log2();
    for i in 0..n {
        let mut nb: Vec<(f64, usize)> = (0..n).filter(|&j| j != i).map(|j| (dist(&points[i], &points[j]), j)).collect();
        nb.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        nb.truncate(k);
        let rho = nb.iter().map(|x| x.0).find(|&d| d > 0.0).unwrap_or(0.0);
        let (mut lo, mut hi, mut sigma) = (0.0, f64::INFINITY, 1.0);
        for _ in 0..64 {
            let s: f64 = nb.iter().map(|&(d, _)| (-((d - rho).max(0.0)) / sigma).exp()).sum();
            if (s - target).abs() < 1e-5 {
                break;
            }
            if s > target {
                hi = sigma;
                sigma = (lo + hi) / 2.0;
            } else {
                lo = sigma;
                sigma = if hi.is_infinite() { sigma * 2.0 } else { (lo + hi) / 2.0 };
            }
        }
        for &(d, j) in &nb {
            w[i][j] = (-((d - rho).max(0.0)) / sigma.max(1e-3)).exp();
        }
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let (a, b) = (w[i][j], w[j][i]);
            let s = a + b - a * b;
            if s > 0.0 {
                edges.push((i, j, s));
            }
        }
    }
    edges
}

/// Small-scale UMAP: kNN fuzzy graph, PCA initialisation scaled to ±10, and
/// seeded SGD with negative sampling.
pub fn umap(points: &[Vec<f64>], k: usize, p: &UmapParams) -> Vec<Vec<f64>> {
    let n = points.len();
    if n < 3 {
        return pca(points, k);
    }
    let edges = fuzzy_graph(points, p.n_neighbors.min(n - 1));
    let mut y = pca(points, k);
    let max = y.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
    if max > 0.0 {
        y.iter_mut().flatten().for_each(|v| *v *= 10.0 / max);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);
    for v in y.iter_mut().flatten() {
        *v += rng.gen_range(-1e-4..1e-4);
    }
    let wmax = edges.iter().fold(0.0f64, |m, e| m.max(e.2));
    let clip = |g: f64| g.clamp(-4.0, 4.0);
    for epoch in 0..p.n_epochs {
        let alpha = p.learning_rate * (1.0 - epoch as f64 / p.n_epochs as f64);
        for &(i, j, w) in &edges {
            if rng.gen::<f64>() > w / wmax {
                continue;
            }
            let d2: f64 = (0..k).map(|c| (y[i][c] - y[j][c]).powi(2)).sum();
            if d2 > 0.0 {
                let coef = -2.0 * p.a * p.b * d2.powf(p.b - 1.0) / (1.0 + p.a * d2.powf(p.b));
                for c in 0..k {
                    let g = clip(coef * (y[i][c] - y[j][c]));
                    y[i][c] += g * alpha;
                    y[j][c] -= g * alpha;
                }
            }
            for _ in 0..p.negative_samples {
                let m = rng.gen_range(0..n);
                if m == i {
                    continue;
                }
                let d2: f64 = (0..k).map(|c| (y[i][c] - y[m][c]).powi(2)).sum();
                let coef = if d2 > 0.0 { 2.0 * p.b / ((0.001 + d2) * (1.0 + p.a * d2.powf(p.b))) } else { 0.0 };
                for c in 0..k {
                    let g = if coef > 0.0 { clip(coef * (y[i][c] - y[m][c])) } else { 4.0 };
                    y[i][c] += g * alpha;
                }
            }
        }
    }
    y
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pca_recovers_a_line() {
        let pts: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64, 2.0 * i as f64, 0.0]).collect();
        let y = pca(&pts, 2);
        assert_eq!(y.len(), 6);
        // first component spans the line with spacing sqrt(5); second is ~0
        for w in y.windows(2) {
            assert!(((w[1][0] - w[0][0]).abs() - 5f64.sqrt()).abs() < 1e-9);
        }
        assert!(y.iter().all(|r| r[1].abs() < 1e-9));
        // ends tie in magnitude; the first one wins the sign
        assert!(y[0][0] > 0.0);
    }

    #[test]
    fn pca_preserves_distances_when_k_covers_rank() {
        let pts = vec![vec![1.0, 0.0, 0.0, 2.0], vec![0.0, 1.0, 0.0, 1.0], vec![0.0, 0.0, 3.0, 0.0]];
        let y = pca(&pts, 3);
        for i in 0..3 {
            for j in 0..3 {
                assert!((dist(&pts[i], &pts[j]) - dist(&y[i], &y[j])).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn umap_is_seeded_and_separates_blobs() {
        let mut pts = Vec::new();
        for i in 0..10 {
            pts.push(vec![0.0 + 0.01 * i as f64, 0.0, 1.0]);
            pts.push(vec![5.0, 5.0 + 0.01 * i as f64, 1.0]);
        }
        let p = UmapParams { seed: 7, n_neighbors: 5, ..UmapParams::default() };
        let a = umap(&pts, 2, &p);
        assert_eq!(a, umap(&pts, 2, &p));
        let within = dist(&a[0], &a[2]);
        let across = dist(&a[0], &a[1]);
        assert!(across > within, "{within} vs {across}");
    }
}

//! K-Means against exhaustive partitioning, silhouette against a direct
//! O(n²) computation and against reference values.

use protognn::metrics::silhouette;
use protognn::numerics::sq_dist;
use protognn::prototypes::kmeans;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Minimum within-cluster sum of squares over all assignments to `k` labels.
fn exhaustive_optimum(points: &[Vec<f64>], k: usize) -> f64 {
    let n = points.len();
    let dim = points[0].len();
    let mut best = f64::INFINITY;
    for code in 0..k.pow(n as u32) {
        let labels: Vec<usize> = (0..n).map(|i| code / k.pow(i as u32) % k).collect();
        let mut cost = 0.0;
        for c in 0..k {
            let members: Vec<&Vec<f64>> = points.iter().zip(&labels).filter(|(_, &l)| l == c).map(|(p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            let mean: Vec<f64> = (0..dim)
                .map(|j| members.iter().map(|p| p[j]).sum::<f64>() / members.len() as f64)
                .collect();
            cost += members.iter().map(|p| sq_dist(p, &mean)).sum::<f64>();
        }
        best = best.min(cost);
    }
    best
}

#[cfg_attr(not(acceptance), test)]
fn kmeans_reaches_exhaustive_optimum() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let n = rng.random_range(1..=8);
        let k = rng.random_range(1..=2);
        let dim = rng.random_range(1..=3);
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect())
            .collect();
        let got = kmeans(&points, k, 100, 10, &mut rng).unwrap().objective;
        let want = exhaustive_optimum(&points, k);
        assert!((got - want).abs() <= 1e-9 * (1.0 + want), "n={n} k={k}: {got} vs {want}");
    }
}

fn naive_silhouette(points: &[Vec<f64>], labels: &[usize]) -> f64 {
    let n = points.len();
    let dist: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| sq_dist(&points[i], &points[j]).sqrt()).collect())
        .collect();
    let mut clusters: Vec<usize> = labels.to_vec();
    clusters.sort_unstable();
    clusters.dedup();
    let mut total = 0.0;
    for i in 0..n {
        let own: Vec<usize> = (0..n).filter(|&j| j != i && labels[j] == labels[i]).collect();
        if own.is_empty() {
            continue;
        }
        let a = own.iter().map(|&j| dist[i][j]).sum::<f64>() / own.len() as f64;
        let b = clusters
            .iter()
            .filter(|&&c| c != labels[i])
            .map(|&c| {
                let other: Vec<usize> = (0..n).filter(|&j| labels[j] == c).collect();
                other.iter().map(|&j| dist[i][j]).sum::<f64>() / other.len() as f64
            })
            .fold(f64::INFINITY, f64::min);
        if a.max(b) > 0.0 {
            total += (b - a) / a.max(b);
        }
    }
    total / n as f64
}

#[cfg_attr(not(acceptance), test)]
fn silhouette_matches_naive_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for _ in 0..50 {
        let n = rng.random_range(2..=200);
        let k = rng.random_range(2..=6);
        let dim = rng.random_range(1..=4);
        let points: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect())
            .collect();
        let mut labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        labels[0] = 0;
        labels[n - 1] = 1;
        let got = silhouette(&points, &labels).unwrap();
        let want = naive_silhouette(&points, &labels);
        assert!((got - want).abs() < 1e-10, "n={n}: {got} vs {want}");
        assert!((-1.0..=1.0).contains(&got));
    }
}

#[cfg_attr(not(acceptance), test)]
fn silhouette_reference_values() {
    // Values from scikit-learn's silhouette_score on the same inputs.
    let pts: Vec<Vec<f64>> = [[0., 0.], [0., 1.], [1., 0.], [5., 5.], [5., 6.], [6., 5.], [9., 0.], [2., 2.]]
        .iter()
        .map(|p| p.to_vec())
        .collect();
    let s = silhouette(&pts, &[0, 0, 0, 1, 1, 1, 2, 0]).unwrap();
    assert!((s - 0.6592415655729311).abs() < 1e-12, "{s}");
    let pts: Vec<Vec<f64>> = [0.5, 1.5, 2.0, 7.0, 8.5, 3.0].iter().map(|&x| vec![x]).collect();
    let s = silhouette(&pts, &[0, 0, 1, 1, 2, 2]).unwrap();
    assert!((s + 0.12373737373737377).abs() < 1e-12, "{s}");
}

/// Every check in this file, for the acceptance runner.
#[allow(dead_code)]
pub fn suite() -> Vec<(&'static str, fn())> {
    vec![
        ("kmeans_reaches_exhaustive_optimum", kmeans_reaches_exhaustive_optimum),
        ("silhouette_matches_naive_reference", silhouette_matches_naive_reference),
        ("silhouette_reference_values", silhouette_reference_values),
    ]
}

//! K-means over the patch tokens of one image.
//!
//! Lloyd iterations from k-means++ seeds. Distances and centroids are kept in
//! `f64` regardless of the feature precision.

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::feature_store::FeatureMap;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansParams {
    pub k: usize,
    pub seed: u64,
    pub max_iter: usize,
    pub tol: f64,
}

impl KMeansParams {
    pub fn new(k: usize, seed: u64) -> Self {
        Self {
            k,
            seed,
            max_iter: 300,
            tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterResult {
    pub assignments: Vec<usize>,
    /// `k x dim`, row-major.
    pub centroids: Vec<f64>,
    pub dim: usize,
    pub inertia: f64,
    pub iterations_run: usize,
    /// Inertia after every assignment step, first entry from the seeds.
    pub inertia_history: Vec<f64>,
}

impl ClusterResult {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim.max(1)
    }

    pub fn centroid(&self, j: usize) -> &[f64] {
        &self.centroids[j * self.dim..(j + 1) * self.dim]
    }
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Nearest centroid per point (ties to the lowest index) and total inertia.
fn assign(points: &[f64], dim: usize, centroids: &[f64], labels: &mut [usize], dists: &mut [f64]) -> f64 {
    let mut inertia = 0.0;
    for (i, p) in points.chunks(dim).enumerate() {
        let (mut best, mut best_d) = (0, f64::INFINITY);
        for (j, c) in centroids.chunks(dim).enumerate() {
            let d = sq_dist(p, c);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        labels[i] = best;
        dists[i] = best_d;
        inertia += best_d;
    }
    inertia
}

/// Sets every centroid to the mean of its members. An empty cluster takes the
/// point farthest from its own centroid (among clusters with more than one
/// member), which keeps all `k` clusters occupied.
fn update(points: &[f64], dim: usize, k: usize, labels: &mut [usize], dists: &mut [f64], centroids: &mut [f64]) {
    let mut counts = vec![0usize; k];
    for &l in labels.iter() {
        counts[l] += 1;
    }
    for j in 0..k {
        if counts[j] > 0 {
            continue;
        }
        let donor = (0..labels.len())
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)));
        if let Some(i) = donor {
            counts[labels[i]] -= 1;
            labels[i] = j;
            dists[i] = 0.0;
            counts[j] = 1;
        }
    }
    centroids.iter_mut().for_each(|v| *v = 0.0);
    for (i, p) in points.chunks(dim).enumerate() {
        let c = &mut centroids[labels[i] * dim..(labels[i] + 1) * dim];
        for (cv, pv) in c.iter_mut().zip(p) {
            *cv += pv;
        }
    }
    for (j, c) in centroids.chunks_mut(dim).enumerate() {
        if counts[j] > 0 {
            let n = counts[j] as f64;
            c.iter_mut().for_each(|v| *v /= n);
        }
    }
}

fn plus_plus_seeds(points: &[f64], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / dim;
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(&points[first * dim..(first + 1) * dim]);
    let mut d2: Vec<f64> = points.chunks(dim).map(|p| sq_dist(p, &centroids[..dim])).collect();
    for _ in 1..k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // every point coincides with a chosen centre
            Err(_) => rng.gen_range(0..n),
        };
        let c = points[next * dim..(next + 1) * dim].to_vec();
        for (d, p) in d2.iter_mut().zip(points.chunks(dim)) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Clusters `n` points of width `dim` stored row-major in `points`.
///
/// Stops at an assignment fixpoint, when the relative inertia change drops
/// below `tol`, or after `max_iter` Lloyd steps. Returned centroids are the
/// means of their assigned points.
pub fn kmeans(points: &[f64], dim: usize, params: &KMeansParams) -> Result<ClusterResult> {
    if dim == 0 || !points.len().is_multiple_of(dim) {
        return Err(Error::invalid("points must be a non-empty N x dim array"));
    }
    let n = points.len() / dim;
    let k = params.k;
    if k < 1 || k > n {
        return Err(Error::invalid(format!("k must be in [1, {n}], got {k}")));
    }
    if points.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("points must be finite"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut centroids = plus_plus_seeds(points, dim, k, &mut rng);
    let mut labels = vec![0usize; n];
    let mut dists = vec![0.0; n];
    let mut inertia = assign(points, dim, &centroids, &mut labels, &mut dists);
    let mut history = vec![inertia];
    let mut iterations_run = 0;

    while iterations_run < params.max_iter {
        iterations_run += 1;
        update(points, dim, k, &mut labels, &mut dists, &mut centroids);
        let previous_labels = labels.clone();
        let next = assign(points, dim, &centroids, &mut labels, &mut dists);
        history.push(next);
        let fixpoint = labels == previous_labels;
        let small_change = inertia == 0.0 || (inertia - next).abs() <= params.tol * inertia;
        inertia = next;
        if fixpoint || small_change {
            break;
        }
    }
    // final centroids are the means of the final assignment
    update(points, dim, k, &mut labels, &mut dists, &mut centroids);
    let final_inertia: f64 = points
        .chunks(dim)
        .zip(&labels)
        .map(|(p, &l)| sq_dist(p, &centroids[l * dim..(l + 1) * dim]))
        .sum();
    history.push(final_inertia);

    Ok(ClusterResult {
        assignments: labels,
        centroids,
        dim,
        inertia: final_inertia,
        iterations_run,
        inertia_history: history,
    })
}

/// Clusters the tokens of a feature map; assignments follow the grid in raster order.
pub fn cluster_map(features: &FeatureMap, params: &KMeansParams, l2_normalize: bool) -> Result<ClusterResult> {
    let dim = features.dim();
    let mut points: Vec<f64> = features.tensor().data().iter().map(|&v| v as f64).collect();
    if l2_normalize {
        for p in points.chunks_mut(dim) {
            let norm = p.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                p.iter_mut().for_each(|v| *v /= norm);
            }
        }
    }
    kmeans(&points, dim, params)
}

/// Nearest-neighbour upsampling of grid assignments to `image_h x image_w` pixels.
pub fn render_assignments(
    assignments: &[usize],
    grid_h: usize,
    grid_w: usize,
    image_h: usize,
    image_w: usize,
) -> Vec<u8> {
    let mut out = Vec::with_capacity(image_h * image_w);
    for y in 0..image_h {
        let gy = (y * grid_h / image_h).min(grid_h - 1);
        for x in 0..image_w {
            let gx = (x * grid_w / image_w).min(grid_w - 1);
            out.push(assignments[gy * grid_w + gx] as u8);
        }
    }
    out
}

/// Evenly spread hues for up to 256 cluster indices.
pub fn palette(k: usize) -> Vec<[u8; 3]> {
    (0..k.max(1))
        .map(|j| {
            let hue = (j as f64 * 0.618_033_988_75).fract() * 6.0;
            let x = 1.0 - ((hue % 2.0) - 1.0).abs();
            let (r, g, b) = match hue as usize {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            let to8 = |v: f64| (40.0 + 215.0 * v).round() as u8;
            [to8(r), to8(g), to8(b)]
        })
        .collect()
}

//! Lloyd's k-means with k-means++ seeding, used for the IVF coarse quantizer
//! and the product-quantizer sub-codebooks.
//!
//! Assignment runs through a blocked `sgemm` using
//! `|x - c|^2 = |x|^2 + |c|^2 - 2 x.c`.

use rand::Rng;

use crate::embedding::l2_sq;
use crate::error::{Error, Result};
use crate::seed;

const BLOCK_ROWS: usize = 1024;

#[derive(Clone, Debug, PartialEq)]
pub struct KMeans {
    pub dim: usize,
    /// `k x dim`, row-major.
    pub centroids: Vec<f32>,
    /// Cluster index per input point after the final update.
    pub assignments: Vec<usize>,
    /// Total squared distance after each assignment step (`iters + 1` values).
    pub distortion: Vec<f64>,
}

impl KMeans {
    pub fn k(&self) -> usize {
        self.centroids.len() / self.dim
    }

    pub fn centroid(&self, i: usize) -> &[f32] {
        &self.centroids[i * self.dim..(i + 1) * self.dim]
    }
}

/// Row-major `a (m x d)` times `b (n x d)` transposed into `out (m x n)`.
pub(crate) fn gemm_abt(a: &[f32], b: &[f32], d: usize, out: &mut [f32]) {
    let m = a.len() / d;
    let n = b.len() / d;
    debug_assert_eq!(out.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: the slices hold m*d, n*d and m*n elements and the strides
    // describe exactly those row-major layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            d,
            n,
            1.0,
            a.as_ptr(),
            d as isize,
            1,
            b.as_ptr(),
            1,
            d as isize,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sq_norms(data: &[f32], d: usize) -> Vec<f32> {
    data.chunks_exact(d).map(|x| x.iter().map(|v| v * v).sum()).collect()
}

/// Nearest centroid (squared L2) per point; ties go to the lower index.
pub(crate) fn assign_l2(points: &[f32], centroids: &[f32], d: usize) -> Vec<(usize, f32)> {
    let k = centroids.len() / d;
    let c_norms = sq_norms(centroids, d);
    let mut out = Vec::with_capacity(points.len() / d);
    let mut dots = vec![0.0f32; BLOCK_ROWS * k];
    for block in points.chunks(BLOCK_ROWS * d) {
        let rows = block.len() / d;
        let dots = &mut dots[..rows * k];
        gemm_abt(block, centroids, d, dots);
        for (x, row) in block.chunks_exact(d).zip(dots.chunks_exact(k)) {
            let xn: f32 = x.iter().map(|v| v * v).sum();
            let mut best = (0, f32::INFINITY);
            for (j, (&dp, &cn)) in row.iter().zip(&c_norms).enumerate() {
                let dist = (xn + cn - 2.0 * dp).max(0.0);
                if dist < best.1 {
                    best = (j, dist);
                }
            }
            out.push(best);
        }
    }
    out
}

/// Largest inner product per point; ties go to the lower index.
pub(crate) fn assign_ip(points: &[f32], centroids: &[f32], d: usize) -> Vec<usize> {
    let k = centroids.len() / d;
    let mut out = Vec::with_capacity(points.len() / d);
    let mut dots = vec![0.0f32; BLOCK_ROWS * k];
    for block in points.chunks(BLOCK_ROWS * d) {
        let rows = block.len() / d;
        let dots = &mut dots[..rows * k];
        gemm_abt(block, centroids, d, dots);
        for row in dots.chunks_exact(k) {
            let mut best = (0, f32::NEG_INFINITY);
            for (j, &s) in row.iter().enumerate() {
                if s > best.1 {
                    best = (j, s);
                }
            }
            out.push(best.0);
        }
    }
    out
}

fn plus_plus_init(points: &[f32], d: usize, k: usize, rng: &mut impl Rng) -> Vec<f32> {
    let n = points.len() / d;
    let row = |i: usize| &points[i * d..(i + 1) * d];
    let mut centroids = Vec::with_capacity(k * d);
    let first = rng.random_range(0..n);
    centroids.extend_from_slice(row(first));
    let mut min_d2: Vec<f64> = (0..n).map(|i| f64::from(l2_sq(row(i), row(first)))).collect();
    let mut chosen = vec![false; n];
    chosen[first] = true;

    for _ in 1..k {
        let total: f64 = min_d2.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut pick = None;
            for (i, &w) in min_d2.iter().enumerate() {
                acc += w;
                if w > 0.0 && acc >= target {
                    pick = Some(i);
                    break;
                }
            }
            // Rounding can leave the target just past the accumulated sum.
            pick.unwrap_or_else(|| min_d2.iter().rposition(|&w| w > 0.0).unwrap())
        } else {
            // Every point coincides with a chosen center; fall back to unchosen rows.
            (0..n).find(|&i| !chosen[i]).unwrap_or(0)
        };
        chosen[pick] = true;
        let c = row(pick).to_vec();
        for (i, m) in min_d2.iter_mut().enumerate() {
            let d2 = f64::from(l2_sq(row(i), &c));
            if d2 < *m {
                *m = d2;
            }
        }
        centroids.extend_from_slice(&c);
    }
    centroids
}

/// Clusters `points` (`n x dim`, row-major) into `k` centroids with a fixed
/// number of Lloyd iterations. Empty clusters are reseeded to the point
/// farthest from its centroid. Deterministic for a given seed.
pub fn kmeans(points: &[f32], dim: usize, k: usize, iters: usize, seed: u64) -> Result<KMeans> {
    if dim == 0 || points.len() % dim != 0 {
        return Err(Error::invalid("points must form an n x dim matrix"));
    }
    let n = points.len() / dim;
    if k == 0 || k > n {
        return Err(Error::invalid(format!(
            "k-means needs 1 <= k <= n, got k = {k}, n = {n}"
        )));
    }
    if iters == 0 {
        return Err(Error::invalid("k-means needs at least one iteration"));
    }
    let mut rng = seed::rng(seed);
    let mut centroids = plus_plus_init(points, dim, k, &mut rng);
    let mut distortion = Vec::with_capacity(iters + 1);

    for _ in 0..iters {
        let assigned = assign_l2(points, &centroids, dim);
        distortion.push(assigned.iter().map(|a| f64::from(a.1)).sum());

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (x, &(c, _)) in points.chunks_exact(dim).zip(&assigned) {
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                *s += f64::from(v);
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = 1.0 / counts[c] as f64;
                for (dst, &s) in centroids[c * dim..(c + 1) * dim]
                    .iter_mut()
                    .zip(&sums[c * dim..(c + 1) * dim])
                {
                    *dst = (s * inv) as f32;
                }
            }
        }

        let empty: Vec<usize> = (0..k).filter(|&c| counts[c] == 0).collect();
        if !empty.is_empty() {
            let mut far: Vec<usize> = (0..n).collect();
            far.sort_by(|&a, &b| assigned[b].1.total_cmp(&assigned[a].1).then(a.cmp(&b)));
            for (c, &p) in empty.iter().zip(&far) {
                centroids[c * dim..(c + 1) * dim]
                    .copy_from_slice(&points[p * dim..(p + 1) * dim]);
            }
        }
    }

    let assigned = assign_l2(points, &centroids, dim);
    distortion.push(assigned.iter().map(|a| f64::from(a.1)).sum());
    Ok(KMeans {
        dim,
        centroids,
        assignments: assigned.into_iter().map(|a| a.0).collect(),
        distortion,
    })
}

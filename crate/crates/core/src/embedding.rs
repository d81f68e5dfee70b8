//! Numeric primitives shared by every stage: vectors, patch-feature grids,
//! scalar maps, normalized boxes and points, plus the pooling, sampling,
//! smoothing and normalization kernels that operate on them.
//!
//! Grid coordinates are normalized to `[0, 1]` with cell-center alignment:
//! cell `(r, c)` of an `H x W` grid has its center at `((c + 0.5) / W, (r + 0.5) / H)`.
//! Storage is `f32`; reductions accumulate in `f64`.

use std::ops::Deref;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero.
pub const EPS_NORM: f64 = 1e-12;

/// Default layer-norm epsilon.
pub const LN_EPS: f32 = 1e-5;

/// A dense `f32` embedding. Always non-empty and finite.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f32>", into = "Vec<f32>")]
pub struct Vector(Vec<f32>);

impl Vector {
    pub fn new(data: Vec<f32>) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::invalid("vector must have positive dimension"));
        }
        check_finite(&data, "vector")?;
        Ok(Vector(data))
    }

    pub fn zeros(dim: usize) -> Self {
        assert!(dim > 0, "vector must have positive dimension");
        Vector(vec![0.0; dim])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f32> {
        self.0
    }

    /// L2 norm with `f64` accumulation.
    pub fn norm(&self) -> f64 {
        norm_f64(&self.0)
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&x| x == 0.0)
    }
}

impl Deref for Vector {
    type Target = [f32];

    fn deref(&self) -> &[f32] {
        &self.0
    }
}

impl TryFrom<Vec<f32>> for Vector {
    type Error = Error;

    fn try_from(data: Vec<f32>) -> Result<Self> {
        Vector::new(data)
    }
}

impl From<Vector> for Vec<f32> {
    fn from(v: Vector) -> Vec<f32> {
        v.0
    }
}

fn check_finite(data: &[f32], what: &str) -> Result<()> {
    match data.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::invalid(format!(
            "{what} has non-finite entry at index {i}"
        ))),
        None => Ok(()),
    }
}

fn norm_f64(data: &[f32]) -> f64 {
    data.iter()
        .map(|&x| f64::from(x) * f64::from(x))
        .sum::<f64>()
        .sqrt()
}

/// `H x W` grid of `D`-dimensional patch features, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureGrid {
    height: usize,
    width: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FeatureGrid {
    pub fn new(height: usize, width: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 || dim == 0 {
            return Err(Error::invalid(format!(
                "feature grid dimensions must be positive, got {height}x{width}x{dim}"
            )));
        }
        if data.len() != height * width * dim {
            return Err(Error::invalid(format!(
                "feature grid {height}x{width}x{dim} needs {} values, got {}",
                height * width * dim,
                data.len()
            )));
        }
        check_finite(&data, "feature grid")?;
        Ok(FeatureGrid {
            height,
            width,
            dim,
            data,
        })
    }

    /// Every cell holds a copy of `feature`.
    pub fn constant(height: usize, width: usize, feature: &[f32]) -> Result<Self> {
        let data = feature
            .iter()
            .copied()
            .cycle()
            .take(height * width * feature.len())
            .collect();
        FeatureGrid::new(height, width, feature.len(), data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let start = (row * self.width + col) * self.dim;
        &self.data[start..start + self.dim]
    }

    pub fn cells(&self) -> impl Iterator<Item = &[f32]> {
        self.data.chunks_exact(self.dim)
    }
}

/// `H x W` grid of scalars, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ScalarMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::invalid(format!(
                "scalar map dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != height * width {
            return Err(Error::invalid(format!(
                "scalar map {height}x{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        check_finite(&data, "scalar map")?;
        Ok(ScalarMap {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Result<Self> {
        ScalarMap::new(height, width, vec![value; height * width])
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.data[row * self.width + col]
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&x| f64::from(x)).sum()
    }
}

/// Axis-aligned box in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f32; 4]", into = "[f32; 4]")]
pub struct Box2D {
    pub x0: f32,
    pub y0: f32,
    pub x1: f32,
    pub y1: f32,
}

impl Box2D {
    pub fn new(x0: f32, y0: f32, x1: f32, y1: f32) -> Result<Self> {
        let ok = [x0, y0, x1, y1].iter().all(|v| v.is_finite())
            && 0.0 <= x0
            && x0 < x1
            && x1 <= 1.0
            && 0.0 <= y0
            && y0 < y1
            && y1 <= 1.0;
        if !ok {
            return Err(Error::invalid(format!(
                "box ({x0}, {y0}, {x1}, {y1}) is not a valid normalized box"
            )));
        }
        Ok(Box2D { x0, y0, x1, y1 })
    }

    pub fn full() -> Self {
        Box2D {
            x0: 0.0,
            y0: 0.0,
            x1: 1.0,
            y1: 1.0,
        }
    }

    pub fn area(&self) -> f64 {
        (f64::from(self.x1) - f64::from(self.x0)) * (f64::from(self.y1) - f64::from(self.y0))
    }

    pub fn center(&self) -> Point2D {
        Point2D {
            x: ((f64::from(self.x0) + f64::from(self.x1)) / 2.0) as f32,
            y: ((f64::from(self.y0) + f64::from(self.y1)) / 2.0) as f32,
        }
    }

    pub fn iou(&self, other: &Box2D) -> f64 {
        let ix0 = f64::from(self.x0.max(other.x0));
        let iy0 = f64::from(self.y0.max(other.y0));
        let ix1 = f64::from(self.x1.min(other.x1));
        let iy1 = f64::from(self.y1.min(other.y1));
        let inter = (ix1 - ix0).max(0.0) * (iy1 - iy0).max(0.0);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }
}

impl TryFrom<[f32; 4]> for Box2D {
    type Error = Error;

    fn try_from(b: [f32; 4]) -> Result<Self> {
        Box2D::new(b[0], b[1], b[2], b[3])
    }
}

impl From<Box2D> for [f32; 4] {
    fn from(b: Box2D) -> [f32; 4] {
        [b.x0, b.y0, b.x1, b.y1]
    }
}

/// Point in normalized image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point2D {
    pub x: f32,
    pub y: f32,
}

impl Point2D {
    pub fn new(x: f32, y: f32) -> Result<Self> {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(Error::invalid(format!(
                "point ({x}, {y}) lies outside the unit square"
            )));
        }
        Ok(Point2D { x, y })
    }

    /// Center of cell `(row, col)` in an `height x width` grid.
    pub fn cell_center(row: usize, col: usize, height: usize, width: usize) -> Self {
        Point2D {
            x: ((col as f64 + 0.5) / width as f64) as f32,
            y: ((row as f64 + 0.5) / height as f64) as f32,
        }
    }

    pub fn distance(&self, other: &Point2D) -> f64 {
        let dx = f64::from(self.x) - f64::from(other.x);
        let dy = f64::from(self.y) - f64::from(other.y);
        (dx * dx + dy * dy).sqrt()
    }

    /// Row and column of the grid cell containing this point.
    pub fn containing_cell(&self, height: usize, width: usize) -> (usize, usize) {
        let col = ((f64::from(self.x) * width as f64).floor() as usize).min(width - 1);
        let row = ((f64::from(self.y) * height as f64).floor() as usize).min(height - 1);
        (row, col)
    }
}

/// Inner product of two equal-length slices.
///
/// Eight independent `f32` lanes keep the loop vectorizable; every exact
/// score in the crate goes through this one kernel so that ranking code paths
/// agree bit-for-bit.
#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for (ca, cb) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for i in 0..8 {
            acc[i] += ca[i] * cb[i];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Squared Euclidean distance.
#[inline]
pub fn l2_sq(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f32; 8];
    let chunks = a.len() / 8;
    for (ca, cb) in a.chunks_exact(8).zip(b.chunks_exact(8)) {
        for i in 0..8 {
            let d = ca[i] - cb[i];
            acc[i] += d * d;
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        let d = a[i] - b[i];
        tail += d * d;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// Scales `v` to unit L2 norm; vectors with norm at most [`EPS_NORM`] map to zero.
pub fn l2_normalize(v: &[f32]) -> Result<Vector> {
    if v.is_empty() {
        return Err(Error::invalid("cannot normalize an empty vector"));
    }
    check_finite(v, "vector")?;
    let norm = norm_f64(v);
    if norm <= EPS_NORM {
        return Ok(Vector::zeros(v.len()));
    }
    Ok(Vector(
        v.iter().map(|&x| (f64::from(x) / norm) as f32).collect(),
    ))
}

pub fn inner(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(dot(a, b))
}

/// `sum_m weights[m] * vectors[m]`, unnormalized.
pub fn weighted_combine(vectors: &[&[f32]], weights: &[f32]) -> Result<Vector> {
    if vectors.is_empty() {
        return Err(Error::invalid("weighted_combine needs at least one vector"));
    }
    if vectors.len() != weights.len() {
        return Err(Error::invalid(format!(
            "{} vectors but {} weights",
            vectors.len(),
            weights.len()
        )));
    }
    let dim = vectors[0].len();
    if let Some(v) = vectors.iter().find(|v| v.len() != dim) {
        return Err(Error::invalid(format!(
            "dimension mismatch: {} vs {dim}",
            v.len()
        )));
    }
    let mut acc = vec![0.0f64; dim];
    for (v, &w) in vectors.iter().zip(weights) {
        for (a, &x) in acc.iter_mut().zip(v.iter()) {
            *a += f64::from(w) * f64::from(x);
        }
    }
    Vector::new(acc.into_iter().map(|x| x as f32).collect())
}

/// Unweighted mean of the cells whose centers fall inside `region`.
///
/// Falls back to the single cell containing the box center when no cell
/// center is covered.
pub fn mean_pool_region(grid: &FeatureGrid, region: &Box2D) -> Vector {
    let (h, w, d) = (grid.height, grid.width, grid.dim);
    let inside = |lo: f32, hi: f32, i: usize, n: usize| {
        let c = (i as f64 + 0.5) / n as f64;
        f64::from(lo) <= c && c <= f64::from(hi)
    };
    let rows: Vec<usize> = (0..h).filter(|&r| inside(region.y0, region.y1, r, h)).collect();
    let cols: Vec<usize> = (0..w).filter(|&c| inside(region.x0, region.x1, c, w)).collect();

    if rows.is_empty() || cols.is_empty() {
        let (r, c) = region.center().containing_cell(h, w);
        return Vector(grid.cell(r, c).to_vec());
    }

    let mut acc = vec![0.0f64; d];
    for &r in &rows {
        for &c in &cols {
            for (a, &x) in acc.iter_mut().zip(grid.cell(r, c)) {
                *a += f64::from(x);
            }
        }
    }
    let n = (rows.len() * cols.len()) as f64;
    Vector(acc.into_iter().map(|x| (x / n) as f32).collect())
}

/// Offsets closer than this (in cell units) to an integer snap onto the cell
/// center. It absorbs `f32` rounding in normalized coordinates.
const CELL_SNAP: f64 = 1e-5;

fn axis_weights(coord: f32, n: usize) -> (usize, usize, f64) {
    let mut f = (f64::from(coord) * n as f64 - 0.5).clamp(0.0, (n - 1) as f64);
    let nearest = f.round();
    if (f - nearest).abs() <= CELL_SNAP {
        f = nearest;
    }
    let i0 = f.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, f - i0 as f64)
}

/// Bilinear interpolation between the four surrounding cell centers, clamped
/// to the cell-center range at the borders.
pub fn bilinear_sample(grid: &FeatureGrid, p: &Point2D) -> Vector {
    let (c0, c1, tx) = axis_weights(p.x, grid.width);
    let (r0, r1, ty) = axis_weights(p.y, grid.height);
    let taps = [
        (r0, c0, (1.0 - ty) * (1.0 - tx)),
        (r0, c1, (1.0 - ty) * tx),
        (r1, c0, ty * (1.0 - tx)),
        (r1, c1, ty * tx),
    ];
    let mut acc = vec![0.0f64; grid.dim];
    for (r, c, wgt) in taps {
        if wgt == 0.0 {
            continue;
        }
        for (a, &x) in acc.iter_mut().zip(grid.cell(r, c)) {
            *a += wgt * f64::from(x);
        }
    }
    Vector(acc.into_iter().map(|x| x as f32).collect())
}

/// Bilinear resampling of a scalar map onto a `target_h x target_w` grid under
/// the cell-center convention. Matching shapes return the input unchanged.
pub fn resample_bilinear(map: &ScalarMap, target_h: usize, target_w: usize) -> Result<ScalarMap> {
    if target_h == 0 || target_w == 0 {
        return Err(Error::invalid("resample target must be at least 1x1"));
    }
    if target_h == map.height && target_w == map.width {
        return Ok(map.clone());
    }
    let mut out = Vec::with_capacity(target_h * target_w);
    for r in 0..target_h {
        let y = ((r as f64 + 0.5) / target_h as f64) as f32;
        let (r0, r1, ty) = axis_weights(y, map.height);
        for c in 0..target_w {
            let x = ((c as f64 + 0.5) / target_w as f64) as f32;
            let (c0, c1, tx) = axis_weights(x, map.width);
            let v = (1.0 - ty) * ((1.0 - tx) * f64::from(map.get(r0, c0)) + tx * f64::from(map.get(r0, c1)))
                + ty * ((1.0 - tx) * f64::from(map.get(r1, c0)) + tx * f64::from(map.get(r1, c1)));
            out.push(v as f32);
        }
    }
    ScalarMap::new(target_h, target_w, out)
}

/// Normalized 1-D Gaussian kernel with radius `ceil(3 * sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|x| *x /= total);
    k
}

/// Half-sample symmetric reflection (`d c b a | a b c d | d c b a`), repeated
/// as needed for offsets beyond one period.
pub(crate) fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let t = i.rem_euclid(period);
    (if t < n { t } else { period - 1 - t }) as usize
}

/// Separable Gaussian blur with reflect padding. `sigma == 0` is the identity.
pub fn gaussian_smooth(map: &ScalarMap, sigma: f64) -> Result<ScalarMap> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::invalid(format!(
            "smoothing sigma must be a finite non-negative number, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(map.clone());
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let (h, w) = (map.height, map.width);

    let mut horizontal = vec![0.0f64; h * w];
    for r in 0..h {
        let row = &map.data[r * w..(r + 1) * w];
        for c in 0..w {
            horizontal[r * w + c] = kernel
                .iter()
                .enumerate()
                .map(|(k, &kw)| kw * f64::from(row[reflect_index(c as isize + k as isize - radius, w)]))
                .sum();
        }
    }
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            let v: f64 = kernel
                .iter()
                .enumerate()
                .map(|(k, &kw)| {
                    kw * horizontal[reflect_index(r as isize + k as isize - radius, h) * w + c]
                })
                .sum();
            out.push(v as f32);
        }
    }
    ScalarMap::new(h, w, out)
}

/// Affine rescale to `[0, 1]`. A flat map (range at most [`EPS_NORM`]) maps to all zeros.
pub fn minmax_rescale(map: &ScalarMap) -> ScalarMap {
    let (lo, hi) = map
        .data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| {
            (lo.min(f64::from(x)), hi.max(f64::from(x)))
        });
    let range = hi - lo;
    let data = if range <= EPS_NORM {
        vec![0.0; map.data.len()]
    } else {
        map.data
            .iter()
            .map(|&x| ((f64::from(x) - lo) / range).clamp(0.0, 1.0) as f32)
            .collect()
    };
    ScalarMap {
        height: map.height,
        width: map.width,
        data,
    }
}

/// Layer normalization over the feature dimension with population variance.
pub fn layer_norm(v: &[f32], gain: &[f32], bias: &[f32], eps: f32) -> Result<Vector> {
    if v.len() != gain.len() || v.len() != bias.len() {
        return Err(Error::invalid(format!(
            "layer_norm dimension mismatch: input {}, gain {}, bias {}",
            v.len(),
            gain.len(),
            bias.len()
        )));
    }
    if v.is_empty() {
        return Err(Error::invalid("layer_norm of an empty vector"));
    }
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("layer_norm eps must be positive, got {eps}")));
    }
    let n = v.len() as f64;
    let mean = v.iter().map(|&x| f64::from(x)).sum::<f64>() / n;
    let var = v
        .iter()
        .map(|&x| (f64::from(x) - mean).powi(2))
        .sum::<f64>()
        / n;
    let inv = 1.0 / (var + f64::from(eps)).sqrt();
    Vector::new(
        v.iter()
            .zip(gain.iter().zip(bias))
            .map(|(&x, (&g, &b))| ((f64::from(x) - mean) * inv * f64::from(g) + f64::from(b)) as f32)
            .collect(),
    )
}

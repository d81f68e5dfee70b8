//! Construction-time record filters: small-box removal, duplicate merging and
//! the Laplacian-variance blur cut.

use std::collections::HashMap;

use crate::embedding::{Box2D, ScalarMap};
use crate::error::{Error, Result};

/// One grounded phrase-region pair before embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundingRecord {
    pub image_id: String,
    pub bbox: Box2D,
    pub phrase: String,
    pub scene: String,
    pub gray_crop: Option<ScalarMap>,
    pub blur_score: Option<f32>,
}

impl GroundingRecord {
    pub fn new(
        image_id: impl Into<String>,
        bbox: Box2D,
        phrase: impl Into<String>,
        scene: impl Into<String>,
    ) -> Self {
        GroundingRecord {
            image_id: image_id.into(),
            bbox,
            phrase: phrase.into(),
            scene: scene.into(),
            gray_crop: None,
            blur_score: None,
        }
    }

    pub fn with_blur_score(mut self, score: f32) -> Self {
        self.blur_score = Some(score);
        self
    }

    /// Sharpness score: the explicit score when present, otherwise the
    /// Laplacian variance of the crop.
    pub fn sharpness(&self) -> Option<Result<f64>> {
        match (&self.blur_score, &self.gray_crop) {
            (Some(s), _) => Some(Ok(f64::from(*s))),
            (None, Some(crop)) => Some(laplacian_variance(crop)),
            (None, None) => None,
        }
    }
}

/// Keeps records whose normalized box area is at least `min_area`.
pub fn filter_small_boxes(records: Vec<GroundingRecord>, min_area: f64) -> Vec<GroundingRecord> {
    records
        .into_iter()
        .filter(|r| r.bbox.area() >= min_area)
        .collect()
}

/// Population variance of the 4-neighbour Laplacian over the valid interior.
pub fn laplacian_variance(gray: &ScalarMap) -> Result<f64> {
    let (h, w) = (gray.height(), gray.width());
    if h < 3 || w < 3 {
        return Err(Error::invalid(format!(
            "laplacian needs at least a 3x3 crop, got {h}x{w}"
        )));
    }
    let px = |r: usize, c: usize| f64::from(gray.get(r, c));
    let responses: Vec<f64> = (1..h - 1)
        .flat_map(|r| {
            (1..w - 1).map(move |c| {
                px(r - 1, c) + px(r + 1, c) + px(r, c - 1) + px(r, c + 1) - 4.0 * px(r, c)
            })
        })
        .collect();
    let n = responses.len() as f64;
    let mean = responses.iter().sum::<f64>() / n;
    Ok(responses.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n)
}

/// Drops the `floor(drop_fraction * n)` lowest-scoring items. Equal scores drop
/// the lower index first; survivors keep their input order.
pub fn blur_filter<T>(items: Vec<T>, scores: &[f64], drop_fraction: f64) -> Result<Vec<T>> {
    if items.len() != scores.len() {
        return Err(Error::invalid(format!(
            "{} records but {} blur scores",
            items.len(),
            scores.len()
        )));
    }
    if !(0.0..1.0).contains(&drop_fraction) {
        return Err(Error::invalid(format!(
            "drop fraction must lie in [0, 1), got {drop_fraction}"
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::invalid(format!("blur score {i} is not finite")));
    }
    // Tolerance keeps products like 0.29 * 100 from flooring to 28.
    let drop = (drop_fraction * items.len() as f64 + 1e-9).floor() as usize;
    if drop == 0 {
        return Ok(items);
    }
    let mut order: Vec<usize> = (0..items.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    let mut dropped = vec![false; items.len()];
    for &i in &order[..drop] {
        dropped[i] = true;
    }
    Ok(items
        .into_iter()
        .zip(dropped)
        .filter_map(|(item, d)| (!d).then_some(item))
        .collect())
}

/// Greedy duplicate merge: a record is dropped when an earlier retained record
/// on the same image with the same phrase overlaps it with IoU at least
/// `iou_threshold`.
pub fn merge_duplicates(
    records: Vec<GroundingRecord>,
    iou_threshold: f64,
) -> Result<Vec<GroundingRecord>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::invalid(format!(
            "IoU threshold must lie in (0, 1], got {iou_threshold}"
        )));
    }
    let mut kept_boxes: HashMap<(String, String), Vec<Box2D>> = HashMap::new();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let group = kept_boxes
            .entry((r.image_id.clone(), r.phrase.clone()))
            .or_default();
        if group.iter().any(|b| b.iou(&r.bbox) >= iou_threshold) {
            continue;
        }
        group.push(r.bbox);
        out.push(r);
    }
    Ok(out)
}

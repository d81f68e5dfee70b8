//! Dense heatmap priors and sparse anchors derived from a category prototype.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{write_atomic, Reader, Writer};
use crate::embedding::{
    dot, gaussian_smooth, l2_normalize, minmax_rescale, Box2D, FeatureGrid, Point2D, ScalarMap,
};
use crate::error::{Error, Result};
use crate::retrieval::Prototype;

pub const HEATMAP_MAGIC: &[u8; 4] = b"PHMP";
pub const HEATMAP_VERSION: u32 = 1;

/// Per-category heatmap with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct DensePrior {
    pub category: String,
    pub heatmap: ScalarMap,
    pub sigma: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Anchor {
    pub point: Point2D,
    pub response: f32,
}

/// Anchors sorted by response, descending.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    pub category: String,
    pub anchors: Vec<Anchor>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Peak selection settings. The suppression radius is in grid cells.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorParams {
    pub threshold: f32,
    pub radius_cells: f64,
    pub max_anchors: usize,
}

impl Default for AnchorParams {
    fn default() -> Self {
        AnchorParams {
            threshold: 0.5,
            radius_cells: 3.0,
            max_anchors: 10,
        }
    }
}

impl AnchorParams {
    /// Radius in normalized units for an `height x width` map, using the longer side.
    pub fn radius_normalized(&self, height: usize, width: usize) -> f64 {
        self.radius_cells / height.max(width) as f64
    }
}

/// Cosine compatibility of each cell with the prototype, smoothed and
/// min-max rescaled. A zero prototype gives an all-zero map.
pub fn dense_prior(grid: &FeatureGrid, proto: &Prototype, sigma: f64) -> Result<DensePrior> {
    if grid.dim() != proto.vector.dim() {
        return Err(Error::invalid(format!(
            "grid dimension {} does not match prototype dimension {}",
            grid.dim(),
            proto.vector.dim()
        )));
    }
    let (h, w) = (grid.height(), grid.width());
    let heatmap = if proto.vector.is_zero() {
        gaussian_smooth(&ScalarMap::filled(h, w, 0.0)?, sigma)?
    } else {
        let raw = grid
            .cells()
            .map(|cell| Ok(dot(&l2_normalize(cell)?, &proto.vector)))
            .collect::<Result<Vec<f32>>>()?;
        gaussian_smooth(&ScalarMap::new(h, w, raw)?, sigma)?
    };
    Ok(DensePrior {
        category: proto.category.clone(),
        heatmap: minmax_rescale(&heatmap),
        sigma,
    })
}

/// Cells at least as large as each in-bounds 8-neighbour and at least `threshold`.
pub fn peak_cells(map: &ScalarMap, threshold: f32) -> Vec<(usize, usize, f32)> {
    let (h, w) = (map.height(), map.width());
    let mut peaks = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = map.get(r, c);
            if v < threshold {
                continue;
            }
            let mut is_peak = true;
            'nb: for dr in -1isize..=1 {
                for dc in -1isize..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as isize + dr, c as isize + dc);
                    if nr < 0 || nc < 0 || nr >= h as isize || nc >= w as isize {
                        continue;
                    }
                    if map.get(nr as usize, nc as usize) > v {
                        is_peak = false;
                        break 'nb;
                    }
                }
            }
            if is_peak {
                peaks.push((r, c, v));
            }
        }
    }
    peaks
}

/// Greedy distance-suppressed peak selection. `radius` is in normalized units.
pub fn extract_anchors(
    prior: &DensePrior,
    threshold: f32,
    radius: f64,
    max_anchors: usize,
) -> Result<AnchorSet> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::invalid(format!(
            "anchor threshold must lie in [0, 1], got {threshold}"
        )));
    }
    if !(radius > 0.0) {
        return Err(Error::invalid(format!(
            "suppression radius must be positive, got {radius}"
        )));
    }
    let map = &prior.heatmap;
    let mut peaks = peak_cells(map, threshold);
    peaks.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));

    let mut anchors: Vec<Anchor> = Vec::new();
    for (r, c, v) in peaks {
        if anchors.len() >= max_anchors {
            break;
        }
        let p = Point2D::cell_center(r, c, map.height(), map.width());
        if anchors.iter().all(|a| a.point.distance(&p) >= radius) {
            anchors.push(Anchor {
                point: p,
                response: v,
            });
        }
    }
    Ok(AnchorSet {
        category: prior.category.clone(),
        anchors,
    })
}

/// Anchors at box centers with unit response, in input order.
pub fn anchors_from_gt(boxes: &[Box2D], category: &str) -> AnchorSet {
    AnchorSet {
        category: category.to_string(),
        anchors: boxes
            .iter()
            .map(|b| Anchor {
                point: b.center(),
                response: 1.0,
            })
            .collect(),
    }
}

/// Heatmap raster: `"PHMP" | u32 version | u32 height | u32 width | h*w f32`, little-endian.
pub fn encode_heatmap(map: &ScalarMap) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(HEATMAP_MAGIC);
    w.u32(HEATMAP_VERSION);
    w.u32(map.height() as u32);
    w.u32(map.width() as u32);
    w.f32s(map.data());
    w.into_bytes()
}

pub fn decode_heatmap(bytes: &[u8]) -> Result<ScalarMap> {
    let mut r = Reader::new(bytes);
    r.magic(HEATMAP_MAGIC)?;
    r.version(HEATMAP_VERSION)?;
    let at = r.offset();
    let h = r.u32("height")? as usize;
    let w = r.u32("width")? as usize;
    let n = r.count((h as u64) * (w as u64), 4, "heatmap cells")?;
    let data = r.f32s(n, "heatmap")?;
    r.finish()?;
    ScalarMap::new(h, w, data).map_err(|e| Error::format(at, e.to_string()))
}

pub fn save_heatmap(map: &ScalarMap, path: &Path) -> Result<()> {
    write_atomic(path, &encode_heatmap(map))
}

pub fn load_heatmap(path: &Path) -> Result<ScalarMap> {
    decode_heatmap(&std::fs::read(path)?)
}

/// One line of the anchor NDJSON output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorLine {
    pub x: f32,
    pub y: f32,
    pub response: f32,
    pub category: String,
}

pub fn write_anchors(mut w: impl Write, set: &AnchorSet) -> Result<()> {
    for a in &set.anchors {
        let line = AnchorLine {
            x: a.point.x,
            y: a.point.y,
            response: a.response,
            category: set.category.clone(),
        };
        serde_json::to_writer(&mut w, &line).map_err(|e| Error::invalid(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Reads anchor lines, grouping them by category in first-seen order.
pub fn read_anchors(text: &str) -> Result<Vec<AnchorSet>> {
    let mut sets: Vec<AnchorSet> = Vec::new();
    let mut offset = 0u64;
    for line in text.split_inclusive('\n') {
        let start = offset;
        offset += line.len() as u64;
        if line.trim().is_empty() {
            continue;
        }
        let a: AnchorLine =
            serde_json::from_str(line).map_err(|e| Error::format(start, e.to_string()))?;
        let anchor = Anchor {
            point: Point2D::new(a.x, a.y).map_err(|e| Error::format(start, e.to_string()))?,
            response: a.response,
        };
        match sets.iter_mut().find(|s| s.category == a.category) {
            Some(s) => s.anchors.push(anchor),
            None => sets.push(AnchorSet {
                category: a.category,
                anchors: vec![anchor],
            }),
        }
    }
    Ok(sets)
}

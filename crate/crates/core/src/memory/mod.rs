//! Scene-aware visual memory.
//!
//! Each entry pairs a retrieval key built from phrase, scene and image
//! embeddings with a visual value pooled from the image's patch features
//! inside the grounded box. Construction filters records in a fixed order:
//! exclusion list, small boxes, duplicate merge, then the blur cut.

mod filter;
mod format;
mod provider;
mod records;

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::embedding::{l2_normalize, mean_pool_region, weighted_combine, Box2D, Vector};
use crate::error::{Error, Result};

pub use filter::{
    blur_filter, filter_small_boxes, laplacian_variance, merge_duplicates, GroundingRecord,
};
pub use format::{
    decode_bank, encode_bank, entry_stride, load_bank, save_bank, BANK_MAGIC, BANK_VERSION,
    ENTRY_META_BYTES,
};
pub use provider::{
    decode_grids, decode_table, encode_grids, encode_table, read_grids, read_table, write_grids,
    write_table, EmbeddingProvider, HashEmbedder,
};
pub use records::{encode_pgm, parse_records, read_pgm, read_records, write_records, RecordLine};

/// Mixing weights for phrase, scene and global image embeddings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KeyWeights {
    pub w_p: f32,
    pub w_s: f32,
    pub w_g: f32,
}

impl Default for KeyWeights {
    fn default() -> Self {
        KeyWeights {
            w_p: 1.0,
            w_s: 0.3,
            w_g: 0.01,
        }
    }
}

/// `Norm(w_p * phrase + w_s * scene + w_g * image)`.
pub fn build_key(phrase: &[f32], scene: &[f32], image: &[f32], w: &KeyWeights) -> Result<Vector> {
    let combined = weighted_combine(&[phrase, scene, image], &[w.w_p, w.w_s, w.w_g])?;
    l2_normalize(&combined)
}

/// `Norm(Pool(F(I), box))`.
pub fn build_value(provider: &EmbeddingProvider, image_id: &str, bbox: &Box2D) -> Result<Vector> {
    let grid = provider.features(image_id)?;
    l2_normalize(&mean_pool_region(grid, bbox))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EntryMeta {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: Box2D,
    pub blur_score: Option<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MemoryEntry {
    pub key: Vector,
    pub value: Vector,
    pub category: String,
    pub meta: EntryMeta,
}

/// Filter settings and per-stage removal counts for one build.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BuildManifest {
    pub input_count: u64,
    pub removed_excluded: u64,
    pub removed_small: u64,
    pub removed_duplicates: u64,
    pub removed_blur: u64,
    pub output_count: u64,
    pub min_area: f64,
    pub iou_threshold: f64,
    pub drop_fraction: f64,
}

impl BuildManifest {
    /// `input == output + all removals`.
    pub fn balances(&self) -> bool {
        self.input_count
            == self.output_count
                + self.removed_excluded
                + self.removed_small
                + self.removed_duplicates
                + self.removed_blur
    }
}

/// Immutable collection of memory entries. Entry ids are list positions.
#[derive(Clone, Debug, PartialEq)]
pub struct MemoryBank {
    pub d_key: usize,
    pub d_val: usize,
    pub weights: KeyWeights,
    pub manifest: BuildManifest,
    entries: Vec<MemoryEntry>,
}

impl MemoryBank {
    pub fn new(
        d_key: usize,
        d_val: usize,
        weights: KeyWeights,
        manifest: BuildManifest,
        entries: Vec<MemoryEntry>,
    ) -> Result<Self> {
        if d_key == 0 || d_val == 0 {
            return Err(Error::invalid("bank dimensions must be positive"));
        }
        for (i, e) in entries.iter().enumerate() {
            if e.key.dim() != d_key || e.value.dim() != d_val {
                return Err(Error::invalid(format!(
                    "entry {i} has dimensions ({}, {}), bank expects ({d_key}, {d_val})",
                    e.key.dim(),
                    e.value.dim()
                )));
            }
        }
        Ok(MemoryBank {
            d_key,
            d_val,
            weights,
            manifest,
            entries,
        })
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn entry(&self, id: usize) -> Option<&MemoryEntry> {
        self.entries.get(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Number of entries grounded in `image_id`.
    pub fn count_image(&self, image_id: &str) -> usize {
        self.entries
            .iter()
            .filter(|e| e.meta.image_id == image_id)
            .count()
    }

    /// Entries excluding those from `image_id`, with their original ids.
    pub fn view_excluding<'a>(&'a self, image_id: &'a str) -> BankView<'a> {
        BankView {
            bank: self,
            excluded: Some(image_id),
        }
    }
}

/// Read-only view of a bank with one image's entries hidden.
#[derive(Clone, Copy)]
pub struct BankView<'a> {
    bank: &'a MemoryBank,
    excluded: Option<&'a str>,
}

impl<'a> BankView<'a> {
    pub fn iter(&self) -> impl Iterator<Item = (usize, &'a MemoryEntry)> + 'a {
        let excluded = self.excluded;
        self.bank
            .entries
            .iter()
            .enumerate()
            .filter(move |(_, e)| Some(e.meta.image_id.as_str()) != excluded)
    }

    pub fn len(&self) -> usize {
        self.iter().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Settings for [`build_bank`].
#[derive(Clone, Debug, PartialEq)]
pub struct BuildConfig {
    pub weights: KeyWeights,
    pub min_area: f64,
    pub iou_threshold: f64,
    pub drop_fraction: f64,
    /// Images removed before any other filter (e.g. evaluation-split overlap).
    pub exclude_images: BTreeSet<String>,
}

impl Default for BuildConfig {
    fn default() -> Self {
        BuildConfig {
            weights: KeyWeights::default(),
            min_area: 1e-4,
            iou_threshold: 0.9,
            drop_fraction: 0.10,
            exclude_images: BTreeSet::new(),
        }
    }
}

fn record_error(index: usize, r: &GroundingRecord, source: Error) -> Error {
    Error::Record {
        index,
        image_id: r.image_id.clone(),
        phrase: r.phrase.clone(),
        source: Box::new(source),
    }
}

/// Filters `records` and embeds every survivor into a memory entry.
pub fn build_bank(
    records: Vec<GroundingRecord>,
    provider: &EmbeddingProvider,
    config: &BuildConfig,
) -> Result<MemoryBank> {
    if config.min_area < 0.0 || !config.min_area.is_finite() {
        return Err(Error::invalid(format!(
            "min_area must be non-negative, got {}",
            config.min_area
        )));
    }
    let mut manifest = BuildManifest {
        input_count: records.len() as u64,
        min_area: config.min_area,
        iou_threshold: config.iou_threshold,
        drop_fraction: config.drop_fraction,
        ..Default::default()
    };

    let before = records.len();
    let records: Vec<GroundingRecord> = records
        .into_iter()
        .filter(|r| !config.exclude_images.contains(&r.image_id))
        .collect();
    manifest.removed_excluded = (before - records.len()) as u64;

    let before = records.len();
    let records = filter_small_boxes(records, config.min_area);
    manifest.removed_small = (before - records.len()) as u64;

    let before = records.len();
    let records = merge_duplicates(records, config.iou_threshold)?;
    manifest.removed_duplicates = (before - records.len()) as u64;

    let mut scored = Vec::with_capacity(records.len());
    let mut scores = Vec::with_capacity(records.len());
    for (i, r) in records.into_iter().enumerate() {
        let score = match r.sharpness() {
            Some(s) => Some(s.map_err(|e| record_error(i, &r, e))?),
            None if config.drop_fraction > 0.0 => {
                return Err(record_error(
                    i,
                    &r,
                    Error::invalid("blur filtering needs a blur_score or gray_crop"),
                ))
            }
            None => None,
        };
        scores.push(score.unwrap_or(0.0));
        scored.push((r, score));
    }
    let before = scored.len();
    let scored = blur_filter(scored, &scores, config.drop_fraction)?;
    manifest.removed_blur = (before - scored.len()) as u64;

    let d_key = provider
        .key_dim()
        .ok_or_else(|| Error::invalid("provider has no key embeddings"))?;
    let d_val = provider
        .val_dim()
        .ok_or_else(|| Error::invalid("provider has no feature grids"))?;

    let mut entries = Vec::with_capacity(scored.len());
    for (i, (r, score)) in scored.into_iter().enumerate() {
        let entry = (|| -> Result<MemoryEntry> {
            let key = build_key(
                &provider.text(&r.phrase)?,
                &provider.text(&r.scene)?,
                &provider.image(&r.image_id)?,
                &config.weights,
            )?;
            let value = build_value(provider, &r.image_id, &r.bbox)?;
            Ok(MemoryEntry {
                key,
                value,
                category: r.phrase.clone(),
                meta: EntryMeta {
                    image_id: r.image_id.clone(),
                    bbox: r.bbox,
                    blur_score: score.map(|s| s as f32),
                },
            })
        })()
        .map_err(|e| record_error(i, &r, e))?;
        entries.push(entry);
    }
    manifest.output_count = entries.len() as u64;
    MemoryBank::new(d_key, d_val, config.weights, manifest, entries)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::FeatureGrid;

    fn provider() -> EmbeddingProvider {
        let mut p = EmbeddingProvider::with_fallback(HashEmbedder::new(16, 3));
        let feature: Vec<f32> = (0..8).map(|i| i as f32 - 3.5).collect();
        p.insert_features("img", FeatureGrid::constant(4, 4, &feature).unwrap())
            .unwrap();
        p
    }

    #[test]
    fn key_single_term_reduction() {
        let phrase = [3.0f32, 4.0, 0.0];
        let k = build_key(
            &phrase,
            &[1.0, 1.0, 1.0],
            &[0.0, 0.0, 5.0],
            &KeyWeights {
                w_p: 1.0,
                w_s: 0.0,
                w_g: 0.0,
            },
        )
        .unwrap();
        assert_eq!(k, l2_normalize(&phrase).unwrap());
    }

    #[test]
    fn key_orthonormal_basis() {
        let w = KeyWeights::default();
        assert_eq!((w.w_p, w.w_s, w.w_g), (1.0, 0.3, 0.01));
        let k = build_key(&[1.0, 0.0, 0.0], &[0.0, 1.0, 0.0], &[0.0, 0.0, 1.0], &w).unwrap();
        let norm = (1.0f64 + 0.09 + 0.0001).sqrt();
        for (got, raw) in k.iter().zip([1.0f64, 0.3, 0.01]) {
            assert!((f64::from(*got) - raw / norm).abs() < 1e-7);
        }
        assert!(build_key(&[1.0], &[1.0, 0.0], &[1.0], &w).is_err());
    }

    #[test]
    fn value_of_constant_grid() {
        let p = provider();
        let v = build_value(&p, "img", &Box2D::new(0.1, 0.2, 0.3, 0.9).unwrap()).unwrap();
        let feature: Vec<f32> = (0..8).map(|i| i as f32 - 3.5).collect();
        assert_eq!(v, l2_normalize(&feature).unwrap());
        assert!(matches!(
            build_value(&p, "nope", &Box2D::full()),
            Err(Error::MissingEmbedding { .. })
        ));
    }

    #[test]
    fn empty_and_single_builds() {
        let p = provider();
        let bank = build_bank(vec![], &p, &BuildConfig::default()).unwrap();
        assert!(bank.is_empty());
        assert_eq!(bank.manifest.input_count, 0);
        assert!(bank.manifest.balances());

        let r = GroundingRecord::new("img", Box2D::new(0.0, 0.0, 0.5, 0.5).unwrap(), "cat", "kitchen")
            .with_blur_score(1.0);
        let bank = build_bank(vec![r.clone()], &p, &BuildConfig::default()).unwrap();
        assert_eq!(bank.len(), 1);
        let e = &bank.entries()[0];
        let key = build_key(
            &p.text("cat").unwrap(),
            &p.text("kitchen").unwrap(),
            &p.image("img").unwrap(),
            &KeyWeights::default(),
        )
        .unwrap();
        assert_eq!(e.key, key);
        assert_eq!(e.value, build_value(&p, "img", &r.bbox).unwrap());
        assert_eq!(e.category, "cat");
        assert_eq!(e.meta.blur_score, Some(1.0));
    }

    #[test]
    fn missing_embedding_names_record() {
        let p = provider();
        let r = GroundingRecord::new("other", Box2D::full(), "cat", "").with_blur_score(1.0);
        match build_bank(vec![r], &p, &BuildConfig::default()) {
            Err(Error::Record { index, image_id, source, .. }) => {
                assert_eq!(index, 0);
                assert_eq!(image_id, "other");
                assert!(matches!(*source, Error::MissingEmbedding { kind: "feature", .. }));
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn blur_needs_scores_unless_disabled() {
        let p = provider();
        let r = GroundingRecord::new("img", Box2D::full(), "cat", "");
        assert!(build_bank(vec![r.clone()], &p, &BuildConfig::default()).is_err());
        let cfg = BuildConfig {
            drop_fraction: 0.0,
            ..Default::default()
        };
        let bank = build_bank(vec![r], &p, &cfg).unwrap();
        assert_eq!(bank.entries()[0].meta.blur_score, None);
    }

    #[test]
    fn exclusion_and_view() {
        let p = provider();
        let mut p2 = p.clone();
        p2.insert_features("img2", p.features("img").unwrap().clone()).unwrap();
        let rs = vec![
            GroundingRecord::new("img", Box2D::full(), "cat", "").with_blur_score(1.0),
            GroundingRecord::new("img2", Box2D::full(), "cat", "").with_blur_score(1.0),
            GroundingRecord::new("img2", Box2D::new(0.0, 0.0, 0.5, 0.5).unwrap(), "dog", "")
                .with_blur_score(1.0),
        ];
        let cfg = BuildConfig {
            drop_fraction: 0.0,
            ..Default::default()
        };
        let bank = build_bank(rs.clone(), &p2, &cfg).unwrap();
        let view = bank.view_excluding("img2");
        assert_eq!(view.len(), 1);
        assert!(view.iter().all(|(_, e)| e.meta.image_id != "img2"));
        assert_eq!(bank.count_image("img2"), 2);

        let cfg = BuildConfig {
            drop_fraction: 0.0,
            exclude_images: ["img".to_string()].into(),
            ..Default::default()
        };
        let bank = build_bank(rs, &p2, &cfg).unwrap();
        assert_eq!(bank.manifest.removed_excluded, 1);
        assert_eq!(bank.len(), 2);
        assert!(bank.manifest.balances());
    }
}

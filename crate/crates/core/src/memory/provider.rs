//! Embedding lookups for text, whole images and patch-feature grids.
//!
//! Vectors come either from precomputed tables (`PMEM` / `PGRD` files) or from
//! a seeded hashing embedder that maps any string to a deterministic unit
//! vector, which lets the full pipeline run without an ML runtime.

use std::collections::HashMap;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};

use crate::codec::{write_atomic, Reader, Writer};
use crate::embedding::{l2_normalize, FeatureGrid, Vector};
use crate::error::{Error, Result};
use crate::seed;

pub const TABLE_MAGIC: &[u8; 4] = b"PMEM";
pub const GRID_MAGIC: &[u8; 4] = b"PGRD";
pub const TABLE_VERSION: u32 = 1;
pub const GRID_VERSION: u32 = 1;

/// Maps strings to seeded unit vectors.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct HashEmbedder {
    pub dim: usize,
    pub seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        HashEmbedder { dim, seed }
    }

    /// Unit vector for `name` within namespace `kind` (e.g. `"text"`, `"image"`).
    pub fn embed(&self, kind: &str, name: &str) -> Vector {
        let mut rng = seed::stage_rng(self.seed, &format!("{kind}\u{1f}{name}"));
        let raw: Vec<f32> = (0..self.dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        l2_normalize(&raw).expect("gaussian samples are finite")
    }
}

/// Text, image and patch-feature embeddings keyed by string.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingProvider {
    text: HashMap<String, Vector>,
    image: HashMap<String, Vector>,
    features: HashMap<String, FeatureGrid>,
    fallback: Option<HashEmbedder>,
    key_dim: Option<usize>,
    val_dim: Option<usize>,
}

impl EmbeddingProvider {
    pub fn new() -> Self {
        EmbeddingProvider::default()
    }

    /// Provider whose text and image lookups fall back to `embedder` when a
    /// name is absent from the tables.
    pub fn with_fallback(embedder: HashEmbedder) -> Self {
        EmbeddingProvider {
            fallback: Some(embedder),
            key_dim: Some(embedder.dim),
            ..Default::default()
        }
    }

    fn check_key_dim(&mut self, dim: usize) -> Result<()> {
        match self.key_dim {
            Some(d) if d != dim => Err(Error::invalid(format!(
                "key embedding dimension {dim} does not match provider dimension {d}"
            ))),
            _ => {
                self.key_dim = Some(dim);
                Ok(())
            }
        }
    }

    pub fn insert_text(&mut self, name: impl Into<String>, v: Vector) -> Result<()> {
        self.check_key_dim(v.dim())?;
        self.text.insert(name.into(), v);
        Ok(())
    }

    pub fn insert_image(&mut self, name: impl Into<String>, v: Vector) -> Result<()> {
        self.check_key_dim(v.dim())?;
        self.image.insert(name.into(), v);
        Ok(())
    }

    pub fn insert_features(&mut self, name: impl Into<String>, grid: FeatureGrid) -> Result<()> {
        match self.val_dim {
            Some(d) if d != grid.dim() => {
                return Err(Error::invalid(format!(
                    "feature grid dimension {} does not match provider dimension {d}",
                    grid.dim()
                )))
            }
            _ => self.val_dim = Some(grid.dim()),
        }
        self.features.insert(name.into(), grid);
        Ok(())
    }

    pub fn key_dim(&self) -> Option<usize> {
        self.key_dim
    }

    pub fn val_dim(&self) -> Option<usize> {
        self.val_dim
    }

    fn lookup(
        &self,
        table: &HashMap<String, Vector>,
        kind: &'static str,
        name: &str,
    ) -> Result<Vector> {
        if let Some(v) = table.get(name) {
            return Ok(v.clone());
        }
        match &self.fallback {
            Some(h) => Ok(h.embed(kind, name)),
            None => Err(Error::MissingEmbedding {
                kind,
                name: name.to_string(),
            }),
        }
    }

    /// Text embedding. The empty string embeds to the zero vector so that a
    /// missing scene descriptor drops out of the key.
    pub fn text(&self, name: &str) -> Result<Vector> {
        if name.is_empty() {
            let dim = self.key_dim.ok_or_else(|| Error::MissingEmbedding {
                kind: "text",
                name: String::new(),
            })?;
            return Ok(Vector::zeros(dim));
        }
        self.lookup(&self.text, "text", name)
    }

    pub fn image(&self, image_id: &str) -> Result<Vector> {
        self.lookup(&self.image, "image", image_id)
    }

    pub fn features(&self, image_id: &str) -> Result<&FeatureGrid> {
        self.features
            .get(image_id)
            .ok_or_else(|| Error::MissingEmbedding {
                kind: "feature",
                name: image_id.to_string(),
            })
    }

    pub fn text_table(&self) -> &HashMap<String, Vector> {
        &self.text
    }

    pub fn image_table(&self) -> &HashMap<String, Vector> {
        &self.image
    }

    pub fn feature_table(&self) -> &HashMap<String, FeatureGrid> {
        &self.features
    }

    /// Loads the three table files; any of them may be omitted.
    pub fn from_files(
        text: Option<&Path>,
        image: Option<&Path>,
        features: Option<&Path>,
        fallback: Option<HashEmbedder>,
    ) -> Result<Self> {
        let mut p = match fallback {
            Some(h) => EmbeddingProvider::with_fallback(h),
            None => EmbeddingProvider::new(),
        };
        if let Some(path) = text {
            for (name, v) in read_table(path)? {
                p.insert_text(name, v)?;
            }
        }
        if let Some(path) = image {
            for (name, v) in read_table(path)? {
                p.insert_image(name, v)?;
            }
        }
        if let Some(path) = features {
            for (name, g) in read_grids(path)? {
                p.insert_features(name, g)?;
            }
        }
        Ok(p)
    }
}

/// Encodes a vector table: magic `PMEM`, u32 version, u32 dim, u64 count, then
/// `count` records of (u32 name length, UTF-8 name, `dim` f32). Little-endian.
pub fn encode_table(dim: usize, rows: &[(&str, &Vector)]) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(TABLE_MAGIC);
    w.u32(TABLE_VERSION);
    w.u32(dim as u32);
    w.u64(rows.len() as u64);
    for (name, v) in rows {
        if v.dim() != dim {
            return Err(Error::invalid(format!(
                "table row {name:?} has dimension {}, expected {dim}",
                v.dim()
            )));
        }
        w.str(name);
        w.f32s(v);
    }
    Ok(w.into_bytes())
}

pub fn decode_table(bytes: &[u8]) -> Result<Vec<(String, Vector)>> {
    let mut r = Reader::new(bytes);
    r.magic(TABLE_MAGIC)?;
    r.version(TABLE_VERSION)?;
    let at = r.offset();
    let dim = r.u32("dim")? as usize;
    if dim == 0 {
        return Err(Error::format(at, "table dimension must be positive"));
    }
    let n = r.u64("count")?;
    let n = r.count(n, 4 + dim * 4, "table rows")?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.str("name")?;
        let at = r.offset();
        let data = r.f32s(dim, "vector")?;
        let v = Vector::new(data).map_err(|e| Error::format(at, e.to_string()))?;
        out.push((name, v));
    }
    r.finish()?;
    Ok(out)
}

pub fn read_table(path: &Path) -> Result<Vec<(String, Vector)>> {
    decode_table(&std::fs::read(path)?)
}

/// Writes a table with rows sorted by name so output is independent of map order.
pub fn write_table(path: &Path, table: &HashMap<String, Vector>) -> Result<()> {
    let mut rows: Vec<(&str, &Vector)> = table.iter().map(|(k, v)| (k.as_str(), v)).collect();
    rows.sort_by(|a, b| a.0.cmp(b.0));
    let dim = rows.first().map(|r| r.1.dim()).unwrap_or(1);
    write_atomic(path, &encode_table(dim, &rows)?)
}

/// Encodes feature grids: magic `PGRD`, u32 version, u32 dim, u64 count, then
/// `count` records of (u32 name length, UTF-8 name, u32 height, u32 width,
/// `height * width * dim` f32 row-major). Little-endian.
pub fn encode_grids(dim: usize, grids: &[(&str, &FeatureGrid)]) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(GRID_MAGIC);
    w.u32(GRID_VERSION);
    w.u32(dim as u32);
    w.u64(grids.len() as u64);
    for (name, g) in grids {
        if g.dim() != dim {
            return Err(Error::invalid(format!(
                "grid {name:?} has dimension {}, expected {dim}",
                g.dim()
            )));
        }
        w.str(name);
        w.u32(g.height() as u32);
        w.u32(g.width() as u32);
        w.f32s(g.data());
    }
    Ok(w.into_bytes())
}

pub fn decode_grids(bytes: &[u8]) -> Result<Vec<(String, FeatureGrid)>> {
    let mut r = Reader::new(bytes);
    r.magic(GRID_MAGIC)?;
    r.version(GRID_VERSION)?;
    let at = r.offset();
    let dim = r.u32("dim")? as usize;
    if dim == 0 {
        return Err(Error::format(at, "grid dimension must be positive"));
    }
    let n = r.u64("count")?;
    let n = r.count(n, 12, "grids")?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let name = r.str("name")?;
        let at = r.offset();
        let h = r.u32("height")? as usize;
        let w = r.u32("width")? as usize;
        let len = h
            .checked_mul(w)
            .and_then(|x| x.checked_mul(dim))
            .ok_or_else(|| Error::format(at, "grid size overflow"))?;
        let data = r.f32s(len, "grid data")?;
        let g = FeatureGrid::new(h, w, dim, data).map_err(|e| Error::format(at, e.to_string()))?;
        out.push((name, g));
    }
    r.finish()?;
    Ok(out)
}

pub fn read_grids(path: &Path) -> Result<Vec<(String, FeatureGrid)>> {
    decode_grids(&std::fs::read(path)?)
}

/// Writes grids in the given order.
pub fn write_grids(path: &Path, grids: &[(&str, &FeatureGrid)]) -> Result<()> {
    let dim = grids.first().map(|g| g.1.dim()).unwrap_or(1);
    write_atomic(path, &encode_grids(dim, grids)?)
}

//! Bank file layout (all little-endian):
//!
//! ```text
//! "PBNK" | u32 version | u32 d_key | u32 d_val | u64 entry_count
//! f32 w_p | f32 w_s | f32 w_g
//! manifest: u64 input, excluded, small, duplicates, blur, output
//!           f64 min_area, iou_threshold, drop_fraction
//! u32 n_categories | n x (u32 len, utf-8)
//! u32 n_images     | n x (u32 len, utf-8)
//! entry_count x fixed-stride entry:
//!     d_key x f32 key | d_val x f32 value
//!     u32 category index | u32 image index | 4 x f32 box | f32 blur score | u32 flags
//! ```
//!
//! Flag bit 0 marks a present blur score. String tables are in first-use order.

use std::collections::HashMap;
use std::path::Path;

use crate::codec::{write_atomic, Reader, Writer};
use crate::embedding::{Box2D, Vector};
use crate::error::{Error, Result};
use crate::memory::{BuildManifest, EntryMeta, KeyWeights, MemoryBank, MemoryEntry};

pub const BANK_MAGIC: &[u8; 4] = b"PBNK";
pub const BANK_VERSION: u32 = 1;
/// Bytes of per-entry metadata after the key and value floats.
pub const ENTRY_META_BYTES: usize = 32;

const FLAG_HAS_BLUR: u32 = 1;

/// On-disk bytes per entry.
pub fn entry_stride(d_key: usize, d_val: usize) -> usize {
    4 * (d_key + d_val) + ENTRY_META_BYTES
}

struct Interner<'a> {
    index: HashMap<&'a str, u32>,
    names: Vec<&'a str>,
}

impl<'a> Interner<'a> {
    fn new() -> Self {
        Interner {
            index: HashMap::new(),
            names: Vec::new(),
        }
    }

    fn intern(&mut self, s: &'a str) -> u32 {
        if let Some(&i) = self.index.get(s) {
            return i;
        }
        let i = self.names.len() as u32;
        self.index.insert(s, i);
        self.names.push(s);
        i
    }
}

pub fn encode_bank(bank: &MemoryBank) -> Vec<u8> {
    let mut categories = Interner::new();
    let mut images = Interner::new();
    let refs: Vec<(u32, u32)> = bank
        .entries()
        .iter()
        .map(|e| (categories.intern(&e.category), images.intern(&e.meta.image_id)))
        .collect();

    let mut w = Writer::new();
    w.bytes(BANK_MAGIC);
    w.u32(BANK_VERSION);
    w.u32(bank.d_key as u32);
    w.u32(bank.d_val as u32);
    w.u64(bank.len() as u64);
    w.f32(bank.weights.w_p);
    w.f32(bank.weights.w_s);
    w.f32(bank.weights.w_g);
    let m = &bank.manifest;
    for c in [
        m.input_count,
        m.removed_excluded,
        m.removed_small,
        m.removed_duplicates,
        m.removed_blur,
        m.output_count,
    ] {
        w.u64(c);
    }
    w.f64(m.min_area);
    w.f64(m.iou_threshold);
    w.f64(m.drop_fraction);
    for table in [&categories.names, &images.names] {
        w.u32(table.len() as u32);
        for s in table.iter() {
            w.str(s);
        }
    }
    for (e, (ci, ii)) in bank.entries().iter().zip(refs) {
        w.f32s(&e.key);
        w.f32s(&e.value);
        w.u32(ci);
        w.u32(ii);
        w.f32s(&<[f32; 4]>::from(e.meta.bbox));
        w.f32(e.meta.blur_score.unwrap_or(0.0));
        w.u32(if e.meta.blur_score.is_some() { FLAG_HAS_BLUR } else { 0 });
    }
    w.into_bytes()
}

fn read_strings(r: &mut Reader, what: &str) -> Result<Vec<String>> {
    let n = r.u32(what)? as u64;
    let n = r.count(n, 4, what)?;
    (0..n).map(|_| r.str(what)).collect()
}

pub fn decode_bank(bytes: &[u8]) -> Result<MemoryBank> {
    let mut r = Reader::new(bytes);
    r.magic(BANK_MAGIC)?;
    r.version(BANK_VERSION)?;
    let at = r.offset();
    let d_key = r.u32("d_key")? as usize;
    let d_val = r.u32("d_val")? as usize;
    if d_key == 0 || d_val == 0 {
        return Err(Error::format(at, "bank dimensions must be positive"));
    }
    let count = r.u64("entry count")?;
    let weights = KeyWeights {
        w_p: r.f32("w_p")?,
        w_s: r.f32("w_s")?,
        w_g: r.f32("w_g")?,
    };
    let manifest = BuildManifest {
        input_count: r.u64("manifest")?,
        removed_excluded: r.u64("manifest")?,
        removed_small: r.u64("manifest")?,
        removed_duplicates: r.u64("manifest")?,
        removed_blur: r.u64("manifest")?,
        output_count: r.u64("manifest")?,
        min_area: r.f64("manifest")?,
        iou_threshold: r.f64("manifest")?,
        drop_fraction: r.f64("manifest")?,
    };
    let categories = read_strings(&mut r, "category table")?;
    let images = read_strings(&mut r, "image table")?;
    let count = r.count(count, entry_stride(d_key, d_val), "entries")?;

    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let at = r.offset();
        let key = Vector::new(r.f32s(d_key, "key")?).map_err(|e| Error::format(at, e.to_string()))?;
        let at = r.offset();
        let value =
            Vector::new(r.f32s(d_val, "value")?).map_err(|e| Error::format(at, e.to_string()))?;
        let at = r.offset();
        let ci = r.u32("category index")? as usize;
        let ii = r.u32("image index")? as usize;
        let category = categories
            .get(ci)
            .ok_or_else(|| Error::format(at, format!("category index {ci} out of range")))?;
        let image_id = images
            .get(ii)
            .ok_or_else(|| Error::format(at, format!("image index {ii} out of range")))?;
        let at = r.offset();
        let b = r.f32s(4, "box")?;
        let bbox = Box2D::new(b[0], b[1], b[2], b[3]).map_err(|e| Error::format(at, e.to_string()))?;
        let score = r.f32("blur score")?;
        let flags = r.u32("flags")?;
        entries.push(MemoryEntry {
            key,
            value,
            category: category.clone(),
            meta: EntryMeta {
                image_id: image_id.clone(),
                bbox,
                blur_score: (flags & FLAG_HAS_BLUR != 0).then_some(score),
            },
        });
    }
    r.finish()?;
    MemoryBank::new(d_key, d_val, weights, manifest, entries)
        .map_err(|e| Error::format(0, e.to_string()))
}

pub fn save_bank(bank: &MemoryBank, path: &Path) -> Result<()> {
    write_atomic(path, &encode_bank(bank))
}

pub fn load_bank(path: &Path) -> Result<MemoryBank> {
    decode_bank(&std::fs::read(path)?)
}

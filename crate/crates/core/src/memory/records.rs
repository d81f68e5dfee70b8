//! Line-delimited JSON grounding records and the grayscale crops they reference.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::embedding::{Box2D, ScalarMap};
use crate::error::{Error, Result};
use crate::memory::GroundingRecord;

/// On-disk shape of one record line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordLine {
    pub image_id: String,
    #[serde(rename = "box")]
    pub bbox: Box2D,
    pub phrase: String,
    #[serde(default)]
    pub scene: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub blur_score: Option<f32>,
    /// Path to an 8-bit binary PGM crop, relative to the records file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gray_crop: Option<PathBuf>,
}

/// Parses records from NDJSON text. Crop paths resolve against `base_dir`.
pub fn parse_records(reader: impl BufRead, base_dir: &Path) -> Result<Vec<GroundingRecord>> {
    let mut out = Vec::new();
    let mut offset = 0u64;
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let line_start = offset;
        offset += line.len() as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RecordLine = serde_json::from_str(&line).map_err(|e| {
            Error::format(line_start, format!("record line {}: {e}", lineno + 1))
        })?;
        let gray_crop = match &raw.gray_crop {
            Some(p) => Some(read_pgm(&base_dir.join(p))?),
            None => None,
        };
        out.push(GroundingRecord {
            image_id: raw.image_id,
            bbox: raw.bbox,
            phrase: raw.phrase,
            scene: raw.scene,
            gray_crop,
            blur_score: raw.blur_score,
        });
    }
    Ok(out)
}

pub fn read_records(path: &Path) -> Result<Vec<GroundingRecord>> {
    let file = std::fs::File::open(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_records(std::io::BufReader::new(file), base)
}

pub fn write_records(mut w: impl Write, records: &[RecordLine]) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::invalid(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Decodes an 8-bit grayscale PGM into a map with values in `[0, 1]`.
pub fn read_pgm(path: &Path) -> Result<ScalarMap> {
    let img = image::open(path)
        .map_err(|e| Error::format(0, format!("{}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|b| f32::from(b) / 255.0).collect();
    ScalarMap::new(h as usize, w as usize, data)
}

/// Encodes a `[0, 1]` map as binary PGM (P5), clamping and rounding to 8 bits.
pub fn encode_pgm(map: &ScalarMap) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", map.width(), map.height()).into_bytes();
    out.extend(
        map.data()
            .iter()
            .map(|&x| (x.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

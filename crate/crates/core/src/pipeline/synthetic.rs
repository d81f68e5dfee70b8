//! Seeded synthetic scenarios with planted regions, and clustered banks for
//! index benchmarks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::embedding::{Box2D, FeatureGrid, Point2D, Vector};
use crate::error::{Error, Result};
use crate::memory::{
    build_key, BuildManifest, EmbeddingProvider, EntryMeta, GroundingRecord, HashEmbedder,
    KeyWeights, MemoryBank, MemoryEntry, RecordLine,
};
use crate::seed;

/// Square block of `extent x extent` cells centered on (`row`, `col`).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlantedRegion {
    pub category: String,
    pub row: usize,
    pub col: usize,
    pub extent: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioSpec {
    pub height: usize,
    pub width: usize,
    pub d_key: usize,
    pub d_val: usize,
    /// Every category with memory entries; planted categories must be listed.
    pub categories: Vec<String>,
    pub planted: Vec<PlantedRegion>,
    /// Per-component Gaussian noise on every feature cell.
    pub noise: f32,
    pub entries_per_category: usize,
    pub distractors: usize,
    /// Side of the square feature grid behind each memory image.
    pub memory_grid: usize,
    pub memory_scenes: usize,
    pub query_scene: String,
    pub seed: u64,
}

impl Default for ScenarioSpec {
    fn default() -> Self {
        ScenarioSpec {
            height: 32,
            width: 32,
            d_key: 32,
            d_val: 64,
            categories: ["cat", "dog", "cup", "car", "tree"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
            planted: vec![PlantedRegion {
                category: "cat".into(),
                row: 16,
                col: 16,
                extent: 3,
            }],
            noise: 0.0,
            entries_per_category: 12,
            distractors: 20,
            memory_grid: 8,
            memory_scenes: 4,
            query_scene: "scene-0".into(),
            seed: 0,
        }
    }
}

impl ScenarioSpec {
    /// `count` planted 3x3 regions at seeded centers, at least `min_sep`
    /// cells apart, with categories taken cyclically from `categories`.
    pub fn with_random_regions(mut self, count: usize, min_sep: f64) -> Result<Self> {
        let mut rng = seed::stage_rng(self.seed, "planted-centers");
        let mut planted: Vec<PlantedRegion> = Vec::with_capacity(count);
        let (lo, hi_r, hi_c) = (2, self.height.saturating_sub(3), self.width.saturating_sub(3));
        if hi_r < lo || hi_c < lo || self.categories.is_empty() {
            return Err(Error::invalid("grid too small for planted regions"));
        }
        for i in 0..count {
            let mut placed = false;
            for _ in 0..10_000 {
                let (r, c) = (rng.random_range(lo..=hi_r), rng.random_range(lo..=hi_c));
                let far = planted.iter().all(|p| {
                    let (dr, dc) = (p.row as f64 - r as f64, p.col as f64 - c as f64);
                    (dr * dr + dc * dc).sqrt() >= min_sep
                });
                if far {
                    planted.push(PlantedRegion {
                        category: self.categories[i % self.categories.len()].clone(),
                        row: r,
                        col: c,
                        extent: 3,
                    });
                    placed = true;
                    break;
                }
            }
            if !placed {
                return Err(Error::invalid(format!("could not place {count} separated regions")));
            }
        }
        self.planted = planted;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.d_key == 0 || self.memory_grid < 4 {
            return Err(Error::invalid("scenario sizes must be positive (memory_grid >= 4)"));
        }
        if self.d_val < self.categories.len() + 1 {
            return Err(Error::invalid(format!(
                "d_val {} cannot hold {} orthogonal categories plus background",
                self.d_val,
                self.categories.len()
            )));
        }
        if !(self.noise >= 0.0) || !self.noise.is_finite() {
            return Err(Error::invalid("noise must be non-negative"));
        }
        if self.memory_scenes == 0 {
            return Err(Error::invalid("memory_scenes must be positive"));
        }
        for p in &self.planted {
            if !self.categories.contains(&p.category) {
                return Err(Error::invalid(format!("planted category {:?} not listed", p.category)));
            }
            let half = p.extent / 2;
            if p.extent % 2 == 0
                || p.row < half
                || p.col < half
                || p.row + half >= self.height
                || p.col + half >= self.width
            {
                return Err(Error::invalid(format!(
                    "planted region at ({}, {}) extent {} leaves the grid",
                    p.row, p.col, p.extent
                )));
            }
        }
        Ok(())
    }
}

/// Scenario description written next to the generated files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMeta {
    pub query_image: String,
    pub scene: String,
    pub categories: Vec<String>,
    pub planted: Vec<PlantedRegion>,
    /// (category, [x, y]) of each planted center in normalized coordinates.
    pub gt_centers: Vec<(String, [f32; 2])>,
    pub spec: ScenarioSpec,
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub records: Vec<GroundingRecord>,
    pub provider: EmbeddingProvider,
    pub input: FeatureGrid,
    pub meta: ScenarioMeta,
}

impl SyntheticData {
    pub fn record_lines(&self) -> Vec<RecordLine> {
        self.records
            .iter()
            .map(|r| RecordLine {
                image_id: r.image_id.clone(),
                bbox: r.bbox,
                phrase: r.phrase.clone(),
                scene: r.scene.clone(),
                blur_score: r.blur_score,
                gray_crop: None,
            })
            .collect()
    }

    pub fn gt_points(&self, category: &str) -> Vec<Point2D> {
        self.meta
            .gt_centers
            .iter()
            .filter(|(c, _)| c == category)
            .map(|(_, p)| Point2D { x: p[0], y: p[1] })
            .collect()
    }
}

/// `count` orthonormal vectors of dimension `dim` by Gram-Schmidt on Gaussian draws.
pub fn orthonormal_set(dim: usize, count: usize, rng: &mut ChaCha8Rng) -> Result<Vec<Vec<f32>>> {
    if count > dim {
        return Err(Error::invalid(format!("cannot fit {count} orthonormal vectors in {dim} dims")));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(count);
    while basis.len() < count {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut *rng)).collect();
        // Two passes keep the result orthogonal to working precision.
        for _ in 0..2 {
            for b in &basis {
                let p: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= p * y);
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            basis.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    Ok(basis
        .into_iter()
        .map(|v| v.into_iter().map(|x| x as f32).collect())
        .collect())
}

fn noisy(base: &[f32], noise: f32, rng: &mut ChaCha8Rng) -> Vec<f32> {
    if noise == 0.0 {
        return base.to_vec();
    }
    base.iter()
        .map(|&b| {
            let z: f32 = StandardNormal.sample(&mut *rng);
            b + noise * z
        })
        .collect()
}

/// Memory image: background everywhere except a 4x4 block of `fill` cells
/// offset by (`dr`, `dc`) from the center. Returns the grid and its box.
fn memory_image(
    side: usize,
    background: &[f32],
    fill: &[f32],
    noise: f32,
    dr: isize,
    dc: isize,
    rng: &mut ChaCha8Rng,
) -> Result<(FeatureGrid, Box2D)> {
    let r0 = (side as isize / 2 - 2 + dr).clamp(0, side as isize - 4) as usize;
    let c0 = (side as isize / 2 - 2 + dc).clamp(0, side as isize - 4) as usize;
    let mut data = Vec::with_capacity(side * side * fill.len());
    for r in 0..side {
        for c in 0..side {
            let inside = (r0..r0 + 4).contains(&r) && (c0..c0 + 4).contains(&c);
            data.extend(noisy(if inside { fill } else { background }, noise, rng));
        }
    }
    let s = side as f32;
    let bbox = Box2D::new(c0 as f32 / s, r0 as f32 / s, (c0 + 4) as f32 / s, (r0 + 4) as f32 / s)?;
    Ok((FeatureGrid::new(side, side, fill.len(), data)?, bbox))
}

/// Generates records, embedding tables and a query grid. Planted cells carry
/// their category's feature direction; memory entries of a category pool to
/// the same direction; distractors use independent random directions.
pub fn gen_synthetic(spec: &ScenarioSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut basis_rng = seed::stage_rng(spec.seed, "basis");
    let basis = orthonormal_set(spec.d_val, spec.categories.len() + 1, &mut basis_rng)?;
    let background = basis.last().unwrap().clone();

    let text = HashEmbedder::new(spec.d_key, seed::derive_seed(spec.seed, "text"));
    let image = HashEmbedder::new(spec.d_key, seed::derive_seed(spec.seed, "image"));
    let mut provider = EmbeddingProvider::new();
    let scenes: Vec<String> = (0..spec.memory_scenes).map(|i| format!("scene-{i}")).collect();
    for name in spec.categories.iter().chain(&scenes) {
        provider.insert_text(name.clone(), text.embed("text", name))?;
    }
    if !spec.query_scene.is_empty() {
        provider.insert_text(spec.query_scene.clone(), text.embed("text", &spec.query_scene))?;
    }

    let mut rng = seed::stage_rng(spec.seed, "memory");
    let mut records = Vec::new();
    for (ci, cat) in spec.categories.iter().enumerate() {
        for j in 0..spec.entries_per_category {
            let id = format!("mem-{cat}-{j}");
            let (dr, dc) = (rng.random_range(-1i32..=1) as isize, rng.random_range(-1i32..=1) as isize);
            let (grid, bbox) =
                memory_image(spec.memory_grid, &background, &basis[ci], spec.noise, dr, dc, &mut rng)?;
            provider.insert_features(id.clone(), grid)?;
            provider.insert_image(id.clone(), image.embed("image", &id))?;
            let blur = rng.random_range(0.5f32..1.5);
            records.push(
                GroundingRecord::new(id, bbox, cat.clone(), scenes[j % scenes.len()].clone())
                    .with_blur_score(blur),
            );
        }
    }
    for k in 0..spec.distractors {
        let id = format!("distractor-{k}");
        let phrase = format!("other-{k}");
        let dir: Vec<f32> = (0..spec.d_val).map(|_| StandardNormal.sample(&mut rng)).collect();
        let dir = crate::embedding::l2_normalize(&dir)?;
        let (grid, bbox) =
            memory_image(spec.memory_grid, &background, &dir, spec.noise, 0, 0, &mut rng)?;
        provider.insert_features(id.clone(), grid)?;
        provider.insert_image(id.clone(), image.embed("image", &id))?;
        provider.insert_text(phrase.clone(), text.embed("text", &phrase))?;
        let blur = rng.random_range(0.5f32..1.5);
        records.push(
            GroundingRecord::new(id, bbox, phrase, scenes[k % scenes.len()].clone())
                .with_blur_score(blur),
        );
    }

    let mut qrng = seed::stage_rng(spec.seed, "query");
    let (h, w) = (spec.height, spec.width);
    let mut owner: Vec<Option<usize>> = vec![None; h * w];
    for p in &spec.planted {
        let ci = spec.categories.iter().position(|c| *c == p.category).unwrap();
        let half = p.extent / 2;
        for r in p.row - half..=p.row + half {
            for c in p.col - half..=p.col + half {
                owner[r * w + c] = Some(ci);
            }
        }
    }
    let mut data = Vec::with_capacity(h * w * spec.d_val);
    for o in &owner {
        let base = o.map_or(&background, |ci| &basis[ci]);
        data.extend(noisy(base, spec.noise, &mut qrng));
    }
    let input = FeatureGrid::new(h, w, spec.d_val, data)?;
    let query_image = "query".to_string();
    provider.insert_features(query_image.clone(), input.clone())?;
    provider.insert_image(query_image.clone(), image.embed("image", &query_image))?;

    let gt_centers = spec
        .planted
        .iter()
        .map(|p| {
            let c = Point2D::cell_center(p.row, p.col, h, w);
            (p.category.clone(), [c.x, c.y])
        })
        .collect();
    Ok(SyntheticData {
        records,
        provider,
        input,
        meta: ScenarioMeta {
            query_image,
            scene: spec.query_scene.clone(),
            categories: spec.categories.clone(),
            planted: spec.planted.clone(),
            gt_centers,
            spec: spec.clone(),
        },
    })
}

/// Bank of `n` entries whose keys mix one of `n_phrases` phrase embeddings,
/// one of `n_scenes` scene embeddings and a per-entry image embedding, the
/// way real memory keys are built. Values are random unit vectors.
pub fn clustered_bank(
    n: usize,
    d_key: usize,
    d_val: usize,
    n_phrases: usize,
    n_scenes: usize,
    seed: u64,
) -> Result<MemoryBank> {
    if n_phrases == 0 || n_scenes == 0 {
        return Err(Error::invalid("need at least one phrase and one scene"));
    }
    let w = KeyWeights::default();
    let text = HashEmbedder::new(d_key, seed::derive_seed(seed, "text"));
    let image = HashEmbedder::new(d_key, seed::derive_seed(seed, "image"));
    let phrases: Vec<Vector> = (0..n_phrases).map(|i| text.embed("phrase", &i.to_string())).collect();
    let scenes: Vec<Vector> = (0..n_scenes).map(|i| text.embed("scene", &i.to_string())).collect();
    let mut rng = seed::stage_rng(seed, "clustered-bank");
    let mut entries = Vec::with_capacity(n);
    for i in 0..n {
        let p = rng.random_range(0..n_phrases);
        let s = rng.random_range(0..n_scenes);
        let id = format!("img{i}");
        let key = build_key(&phrases[p], &scenes[s], &image.embed("image", &id), &w)?;
        let raw: Vec<f32> = (0..d_val).map(|_| StandardNormal.sample(&mut rng)).collect();
        entries.push(MemoryEntry {
            key,
            value: crate::embedding::l2_normalize(&raw)?,
            category: format!("phrase-{p}"),
            meta: EntryMeta {
                image_id: id,
                bbox: Box2D::full(),
                blur_score: None,
            },
        });
    }
    let manifest = BuildManifest {
        input_count: n as u64,
        output_count: n as u64,
        ..Default::default()
    };
    MemoryBank::new(d_key, d_val, w, manifest, entries)
}

//! Memory-guided prompt refinement across feature scales, a stand-in
//! inner-product scoring head, and label-constrained logit masking.

use std::collections::{HashMap, HashSet};
use std::path::Path;

use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::codec::{write_atomic, Reader, Writer};
use crate::embedding::{
    bilinear_sample, dot, layer_norm, resample_bilinear, FeatureGrid, Point2D, ScalarMap, Vector,
    LN_EPS,
};
use crate::error::{Error, Result};
use crate::priors::{AnchorSet, DensePrior};
use crate::seed;

pub const PARAMS_MAGIC: &[u8; 4] = b"PPRM";
pub const PARAMS_VERSION: u32 = 1;
pub const PROMPTS_MAGIC: &[u8; 4] = b"PPMT";
pub const PROMPTS_VERSION: u32 = 1;
pub const DEFAULT_WINDOW: usize = 5;

const FLAG_PER_SCALE: u32 = 1;

/// One set of fusion parameters. `w_s` and `w_d` are `dim x dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct RefinementParams {
    pub e: Vec<f32>,
    pub w_s: Vec<f32>,
    pub w_d: Vec<f32>,
    pub ln_gain: Vec<f32>,
    pub ln_bias: Vec<f32>,
    pub ln_eps: f32,
    pub window: usize,
}

impl RefinementParams {
    pub fn dim(&self) -> usize {
        self.e.len()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.e.len();
        if d == 0 {
            return Err(Error::invalid("prompt prior must be non-empty"));
        }
        if self.w_s.len() != d * d || self.w_d.len() != d * d {
            return Err(Error::invalid(format!(
                "projections must be {d}x{d}, got {} and {} values",
                self.w_s.len(),
                self.w_d.len()
            )));
        }
        if self.ln_gain.len() != d || self.ln_bias.len() != d {
            return Err(Error::invalid("layer-norm gain/bias must match the prompt dimension"));
        }
        if !(self.ln_eps > 0.0) {
            return Err(Error::invalid(format!("ln_eps must be positive, got {}", self.ln_eps)));
        }
        if self.window % 2 == 0 {
            return Err(Error::invalid(format!("window must be odd, got {}", self.window)));
        }
        let all = [&self.e, &self.w_s, &self.w_d, &self.ln_gain, &self.ln_bias];
        if all.iter().any(|v| v.iter().any(|x| !x.is_finite())) {
            return Err(Error::invalid("refinement parameters must be finite"));
        }
        Ok(())
    }

    /// Zero projections with a seeded prompt prior; refinement then reduces
    /// to `layer_norm(e)`.
    pub fn zero_init(dim: usize, window: usize, seed: u64) -> Self {
        let mut rng = seed::stage_rng(seed, "prompt-prior");
        RefinementParams {
            e: (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect(),
            w_s: vec![0.0; dim * dim],
            w_d: vec![0.0; dim * dim],
            ln_gain: vec![1.0; dim],
            ln_bias: vec![0.0; dim],
            ln_eps: LN_EPS,
            window,
        }
    }

    /// Gaussian projections with variance `1 / dim` and a seeded prompt prior.
    pub fn seeded(dim: usize, window: usize, seed: u64) -> Self {
        let mut p = RefinementParams::zero_init(dim, window, seed);
        let normal = Normal::new(0.0f32, 1.0 / (dim as f32).sqrt()).unwrap();
        let mut rng = seed::stage_rng(seed, "projections");
        p.w_s.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        p.w_d.iter_mut().for_each(|x| *x = normal.sample(&mut rng));
        p
    }
}

/// Parameter sets shared across scales or one per scale.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamBundle {
    pub per_scale: bool,
    pub sets: Vec<RefinementParams>,
}

impl ParamBundle {
    pub fn shared(params: RefinementParams) -> Self {
        ParamBundle {
            per_scale: false,
            sets: vec![params],
        }
    }

    pub fn dim(&self) -> usize {
        self.sets.first().map_or(0, RefinementParams::dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sets.is_empty() {
            return Err(Error::invalid("parameter bundle holds no sets"));
        }
        if !self.per_scale && self.sets.len() != 1 {
            return Err(Error::invalid("shared parameters must hold exactly one set"));
        }
        let d = self.dim();
        for s in &self.sets {
            s.validate()?;
            if s.dim() != d {
                return Err(Error::invalid("parameter sets disagree on dimension"));
            }
        }
        Ok(())
    }

    pub fn for_scale(&self, scale: usize) -> Result<&RefinementParams> {
        let idx = if self.per_scale { scale } else { 0 };
        self.sets.get(idx).ok_or_else(|| {
            Error::invalid(format!(
                "no parameter set for scale {scale} ({} sets)",
                self.sets.len()
            ))
        })
    }
}

/// Feature at the anchor by bilinear sampling.
pub fn sparse_feature(grid: &FeatureGrid, anchor: &Point2D) -> Vector {
    bilinear_sample(grid, anchor)
}

/// Heatmap-weighted sum of features over the `window x window` cells around
/// the cell containing `anchor`, clipped at the borders. With `normalized`
/// the sum is divided by the total window weight (when positive).
pub fn dense_feature(
    grid: &FeatureGrid,
    heatmap: &ScalarMap,
    anchor: &Point2D,
    window: usize,
    normalized: bool,
) -> Result<Vector> {
    if heatmap.height() != grid.height() || heatmap.width() != grid.width() {
        return Err(Error::invalid(format!(
            "heatmap {}x{} does not match grid {}x{}",
            heatmap.height(),
            heatmap.width(),
            grid.height(),
            grid.width()
        )));
    }
    if window % 2 == 0 {
        return Err(Error::invalid(format!("window must be odd, got {window}")));
    }
    let (r, c) = anchor.containing_cell(grid.height(), grid.width());
    let half = window / 2;
    let rows = r.saturating_sub(half)..(r + half + 1).min(grid.height());
    let cols = c.saturating_sub(half)..(c + half + 1).min(grid.width());
    let mut acc = vec![0.0f64; grid.dim()];
    let mut mass = 0.0f64;
    for y in rows {
        for x in cols.clone() {
            let h = f64::from(heatmap.get(y, x));
            if h == 0.0 {
                continue;
            }
            mass += h;
            for (a, &m) in acc.iter_mut().zip(grid.cell(y, x)) {
                *a += h * f64::from(m);
            }
        }
    }
    if normalized && mass > 0.0 {
        acc.iter_mut().for_each(|a| *a /= mass);
    }
    Vector::new(acc.into_iter().map(|a| a as f32).collect())
}

/// Bilinear heatmap resampling onto a feature scale.
pub fn resample_heatmap(map: &ScalarMap, target_h: usize, target_w: usize) -> Result<ScalarMap> {
    resample_bilinear(map, target_h, target_w)
}

fn matvec_into(acc: &mut [f64], w: &[f32], v: &[f32]) {
    let d = v.len();
    for (a, row) in acc.iter_mut().zip(w.chunks_exact(d)) {
        *a += row
            .iter()
            .zip(v)
            .map(|(&x, &y)| f64::from(x) * f64::from(y))
            .sum::<f64>();
    }
}

/// `e + W_s f_s + W_d f_d`, before layer normalization.
pub fn fused_pre_norm(params: &RefinementParams, f_s: &[f32], f_d: &[f32]) -> Result<Vec<f32>> {
    let d = params.dim();
    if f_s.len() != d || f_d.len() != d {
        return Err(Error::invalid(format!(
            "feature dimensions ({}, {}) do not match prompt dimension {d}",
            f_s.len(),
            f_d.len()
        )));
    }
    if params.w_s.len() != d * d || params.w_d.len() != d * d {
        return Err(Error::invalid(format!("projections must be {d}x{d}")));
    }
    let mut acc: Vec<f64> = params.e.iter().map(|&x| f64::from(x)).collect();
    matvec_into(&mut acc, &params.w_s, f_s);
    matvec_into(&mut acc, &params.w_d, f_d);
    Ok(acc.into_iter().map(|x| x as f32).collect())
}

pub fn refine_prompt(params: &RefinementParams, f_s: &[f32], f_d: &[f32]) -> Result<Vector> {
    let pre = fused_pre_norm(params, f_s, f_d)?;
    layer_norm(&pre, &params.ln_gain, &params.ln_bias, params.ln_eps)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MemoryGuidedPrompt {
    pub embedding: Vector,
    pub source_category: String,
    pub anchor: Point2D,
    pub scale_index: usize,
}

/// Refined prompts for every (scale, anchor), ordered by scale then anchor rank.
pub fn refine_all(
    scales: &[FeatureGrid],
    prior: &DensePrior,
    anchors: &AnchorSet,
    params: &ParamBundle,
    category: &str,
    normalized_dense: bool,
) -> Result<Vec<MemoryGuidedPrompt>> {
    if category.is_empty() {
        return Err(Error::invalid("prompt category must be non-empty"));
    }
    let mut out = Vec::with_capacity(scales.len() * anchors.len());
    if anchors.is_empty() {
        return Ok(out);
    }
    for (s, grid) in scales.iter().enumerate() {
        let p = params.for_scale(s)?;
        if grid.dim() != p.dim() {
            return Err(Error::invalid(format!(
                "scale {s} has feature dimension {}, prompts use {}",
                grid.dim(),
                p.dim()
            )));
        }
        let heat = resample_heatmap(&prior.heatmap, grid.height(), grid.width())?;
        for a in &anchors.anchors {
            let f_s = sparse_feature(grid, &a.point);
            let f_d = dense_feature(grid, &heat, &a.point, p.window, normalized_dense)?;
            out.push(MemoryGuidedPrompt {
                embedding: refine_prompt(p, &f_s, &f_d)?,
                source_category: category.to_string(),
                anchor: a.point,
                scale_index: s,
            });
        }
    }
    Ok(out)
}

/// Logits with labelled rows (prompts) and columns (categories).
#[derive(Clone, Debug, PartialEq)]
pub struct LogitsMatrix {
    rows: Vec<String>,
    cols: Vec<String>,
    values: Vec<f32>,
}

impl LogitsMatrix {
    pub fn new(rows: Vec<String>, cols: Vec<String>, values: Vec<f32>) -> Result<Self> {
        if values.len() != rows.len() * cols.len() {
            return Err(Error::invalid(format!(
                "{} logits for a {}x{} matrix",
                values.len(),
                rows.len(),
                cols.len()
            )));
        }
        for (labels, what) in [(&rows, "row"), (&cols, "column")] {
            let mut seen = HashSet::new();
            if let Some(dup) = labels.iter().find(|l| !seen.insert(l.as_str())) {
                return Err(Error::invalid(format!("duplicate {what} label {dup:?}")));
            }
        }
        if values.iter().any(|v| v.is_nan()) {
            return Err(Error::invalid("logits must not be NaN"));
        }
        Ok(LogitsMatrix { rows, cols, values })
    }

    pub fn rows(&self) -> &[String] {
        &self.rows
    }

    pub fn cols(&self) -> &[String] {
        &self.cols
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let n = self.cols.len();
        &self.values[i * n..(i + 1) * n]
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.cols.len() + col]
    }

    /// Column of the largest logit in `row`; ties go to the lower column.
    /// `None` when the row has no finite entry.
    pub fn argmax(&self, row: usize) -> Option<usize> {
        let mut best: Option<(usize, f32)> = None;
        for (j, &v) in self.row(row).iter().enumerate() {
            if v.is_finite() && best.map_or(true, |(_, b)| v > b) {
                best = Some((j, v));
            }
        }
        best.map(|b| b.0)
    }
}

/// Row label used for a prompt in score matrices.
pub fn prompt_label(p: &MemoryGuidedPrompt, rank: usize) -> String {
    format!("{}@s{}#{}", p.source_category, p.scale_index, rank)
}

/// Stand-in classification head: inner products of prompts with category
/// embeddings, columns in `categories` order.
pub fn score_prompts(
    prompts: &[MemoryGuidedPrompt],
    categories: &[String],
    category_embs: &HashMap<String, Vector>,
) -> Result<LogitsMatrix> {
    let cols = categories
        .iter()
        .map(|c| {
            category_embs
                .get(c)
                .ok_or_else(|| Error::MissingEmbedding {
                    kind: "category",
                    name: c.clone(),
                })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut values = Vec::with_capacity(prompts.len() * cols.len());
    for p in prompts {
        for v in &cols {
            if v.dim() != p.embedding.dim() {
                return Err(Error::invalid(format!(
                    "category embedding dimension {} does not match prompt dimension {}",
                    v.dim(),
                    p.embedding.dim()
                )));
            }
            values.push(dot(&p.embedding, v));
        }
    }
    // Prompts from the same (category, scale) differ by anchor rank.
    let mut rank: HashMap<(String, usize), usize> = HashMap::new();
    let rows = prompts
        .iter()
        .map(|p| {
            let r = rank.entry((p.source_category.clone(), p.scale_index)).or_default();
            let label = prompt_label(p, *r);
            *r += 1;
            label
        })
        .collect();
    LogitsMatrix::new(rows, categories.to_vec(), values)
}

/// Which category a prompt row may vote for.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptSource {
    Category(String),
    /// The detector's original prompts, left unmasked.
    Unconstrained,
}

/// Sets every off-source logit of constrained rows to negative infinity.
pub fn constrain_logits(logits: &LogitsMatrix, sources: &[PromptSource]) -> Result<LogitsMatrix> {
    if sources.len() != logits.rows.len() {
        return Err(Error::invalid(format!(
            "{} sources for {} prompt rows",
            sources.len(),
            logits.rows.len()
        )));
    }
    let mut out = logits.clone();
    let n = logits.cols.len();
    for (i, src) in sources.iter().enumerate() {
        let PromptSource::Category(c) = src else {
            continue;
        };
        let keep = logits
            .cols
            .iter()
            .position(|col| col == c)
            .ok_or_else(|| Error::invalid(format!("source category {c:?} is not a candidate")))?;
        for (j, v) in out.values[i * n..(i + 1) * n].iter_mut().enumerate() {
            if j != keep {
                *v = f32::NEG_INFINITY;
            }
        }
    }
    Ok(out)
}

/// Parameter file: `"PPRM" | u32 version | u32 dim | u32 flags | u32 sets`,
/// then per set `f32 ln_eps | e | W_s | W_d | gain | bias` (f32, little-endian).
/// Bit 0 of `flags` marks per-scale sets. The window is not stored.
pub fn encode_params(bundle: &ParamBundle) -> Result<Vec<u8>> {
    bundle.validate()?;
    let mut w = Writer::new();
    w.bytes(PARAMS_MAGIC);
    w.u32(PARAMS_VERSION);
    w.u32(bundle.dim() as u32);
    w.u32(if bundle.per_scale { FLAG_PER_SCALE } else { 0 });
    w.u32(bundle.sets.len() as u32);
    for s in &bundle.sets {
        w.f32(s.ln_eps);
        w.f32s(&s.e);
        w.f32s(&s.w_s);
        w.f32s(&s.w_d);
        w.f32s(&s.ln_gain);
        w.f32s(&s.ln_bias);
    }
    Ok(w.into_bytes())
}

pub fn decode_params(bytes: &[u8], window: usize) -> Result<ParamBundle> {
    let mut r = Reader::new(bytes);
    r.magic(PARAMS_MAGIC)?;
    r.version(PARAMS_VERSION)?;
    let at = r.offset();
    let d = r.u32("dimension")? as usize;
    if d == 0 {
        return Err(Error::format(at, "prompt dimension must be positive"));
    }
    let flags_at = r.offset();
    let flags = r.u32("flags")?;
    if flags & !FLAG_PER_SCALE != 0 {
        return Err(Error::format(flags_at, format!("unknown flags {flags:#x}")));
    }
    // A set must fit in what is left, so the dimension cannot exceed that bound either.
    let set_bytes = d
        .checked_mul(d)
        .and_then(|dd| dd.checked_mul(2))
        .and_then(|x| x.checked_add(3 * d))
        .and_then(|x| x.checked_mul(4))
        .and_then(|x| x.checked_add(4))
        .filter(|&b| b <= r.remaining())
        .ok_or_else(|| Error::format(at, format!("prompt dimension {d} does not fit the file")))?;
    let n = r.u32("set count")?;
    let n = r.count(u64::from(n), set_bytes, "parameter sets")?;
    let mut sets = Vec::with_capacity(n);
    for _ in 0..n {
        let ln_eps = r.f32("ln_eps")?;
        sets.push(RefinementParams {
            ln_eps,
            e: r.f32s(d, "prompt prior")?,
            w_s: r.f32s(d * d, "sparse projection")?,
            w_d: r.f32s(d * d, "dense projection")?,
            ln_gain: r.f32s(d, "ln gain")?,
            ln_bias: r.f32s(d, "ln bias")?,
            window,
        });
    }
    r.finish()?;
    let bundle = ParamBundle {
        per_scale: flags & FLAG_PER_SCALE != 0,
        sets,
    };
    bundle.validate().map_err(|e| Error::format(at, e.to_string()))?;
    Ok(bundle)
}

pub fn save_params(bundle: &ParamBundle, path: &Path) -> Result<()> {
    write_atomic(path, &encode_params(bundle)?)
}

pub fn load_params(path: &Path, window: usize) -> Result<ParamBundle> {
    decode_params(&std::fs::read(path)?, window)
}

/// Sidecar metadata for one emitted prompt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PromptMeta {
    pub category: String,
    pub anchor: [f32; 2],
    pub scale: usize,
}

/// Prompt vectors: `"PPMT" | u32 version | u32 dim | u64 count | count*dim f32`.
pub fn encode_prompts(prompts: &[MemoryGuidedPrompt], dim: usize) -> Result<Vec<u8>> {
    let mut w = Writer::new();
    w.bytes(PROMPTS_MAGIC);
    w.u32(PROMPTS_VERSION);
    w.u32(dim as u32);
    w.u64(prompts.len() as u64);
    for p in prompts {
        if p.embedding.dim() != dim {
            return Err(Error::invalid("prompt dimensions disagree"));
        }
        w.f32s(&p.embedding);
    }
    Ok(w.into_bytes())
}

pub fn decode_prompt_vectors(bytes: &[u8]) -> Result<(usize, Vec<Vector>)> {
    let mut r = Reader::new(bytes);
    r.magic(PROMPTS_MAGIC)?;
    r.version(PROMPTS_VERSION)?;
    let at = r.offset();
    let d = r.u32("dimension")? as usize;
    if d == 0 {
        return Err(Error::format(at, "prompt dimension must be positive"));
    }
    let n = r.u64("count")?;
    let n = r.count(n, 4 * d, "prompts")?;
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let at = r.offset();
        let v = r.f32s(d, "prompt")?;
        out.push(Vector::new(v).map_err(|e| Error::format(at, e.to_string()))?);
    }
    r.finish()?;
    Ok((d, out))
}

pub fn prompt_meta(prompts: &[MemoryGuidedPrompt]) -> Vec<PromptMeta> {
    prompts
        .iter()
        .map(|p| PromptMeta {
            category: p.source_category.clone(),
            anchor: [p.anchor.x, p.anchor.y],
            scale: p.scale_index,
        })
        .collect()
}

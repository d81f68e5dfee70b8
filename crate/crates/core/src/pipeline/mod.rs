//! End-to-end orchestration: query → retrieval → prototype → dense prior →
//! anchors → refined prompts → masked logits, per category.

mod bench;
mod config;
mod synthetic;

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

pub use bench::{bench, bench_queries, mean_recall, BenchReport, BenchSettings};
pub use config::{
    IndexSection, MemorySection, ParamInit, PipelineConfig, PriorsSection, RefineSection,
    RetrievalSection, SeedSection,
};
pub use synthetic::{
    clustered_bank, gen_synthetic, orthonormal_set, PlantedRegion, ScenarioMeta, ScenarioSpec,
    SyntheticData,
};

use crate::embedding::{FeatureGrid, Vector};
use crate::error::{Error, Result};
use crate::memory::{EmbeddingProvider, HashEmbedder, MemoryBank};
use crate::priors::{dense_prior, extract_anchors, AnchorSet, DensePrior};
use crate::refine::{
    constrain_logits, refine_all, score_prompts, LogitsMatrix, MemoryGuidedPrompt, ParamBundle,
    PromptSource, RefinementParams,
};
use crate::retrieval::{aggregate_prototype, build_query, retrieve, Prototype, RetrievalIndex};

/// Loaded, read-only inputs shared by every request.
#[derive(Clone, Copy)]
pub struct PipelineContext<'a> {
    pub config: &'a PipelineConfig,
    pub bank: &'a MemoryBank,
    pub index: &'a RetrievalIndex,
    pub provider: &'a EmbeddingProvider,
    pub params: &'a ParamBundle,
    /// Stand-in classification head: one embedding per candidate category.
    pub head: &'a HashMap<String, Vector>,
}

/// One image and its candidate categories. Whether the list was supplied or
/// generated upstream makes no difference here.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageRequest {
    pub image_id: String,
    #[serde(default)]
    pub scene: String,
    pub categories: Vec<String>,
    /// Skip memory entries grounded in this same image.
    #[serde(default)]
    pub exclude_self: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CategoryOutput {
    pub category: String,
    pub prototype: Prototype,
    pub prior: DensePrior,
    pub anchors: AnchorSet,
    pub prompts: Vec<MemoryGuidedPrompt>,
    /// Label-constrained logits of `prompts` over the request's categories.
    pub logits: LogitsMatrix,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PipelineOutput {
    pub image_id: String,
    pub scene: String,
    pub categories: Vec<CategoryOutput>,
}

impl PipelineOutput {
    pub fn prompts(&self) -> impl Iterator<Item = &MemoryGuidedPrompt> {
        self.categories.iter().flat_map(|c| c.prompts.iter())
    }
}

fn stage<T>(name: &'static str, category: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| Error::Stage {
        stage: name,
        category: category.to_string(),
        source: Box::new(e),
    })
}

/// Average-pools `grid` by `factor` cells per side; partial border blocks
/// average over the cells they contain. Factor 1 is the identity.
pub fn pool_grid(grid: &FeatureGrid, factor: usize) -> Result<FeatureGrid> {
    if factor == 0 {
        return Err(Error::invalid("pooling factor must be positive"));
    }
    if factor == 1 {
        return Ok(grid.clone());
    }
    let (h, w, d) = (grid.height(), grid.width(), grid.dim());
    let (oh, ow) = (h.div_ceil(factor), w.div_ceil(factor));
    let mut data = Vec::with_capacity(oh * ow * d);
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = vec![0.0f64; d];
            let mut n = 0usize;
            for y in r * factor..((r + 1) * factor).min(h) {
                for x in c * factor..((c + 1) * factor).min(w) {
                    n += 1;
                    for (a, &v) in acc.iter_mut().zip(grid.cell(y, x)) {
                        *a += f64::from(v);
                    }
                }
            }
            data.extend(acc.into_iter().map(|a| (a / n as f64) as f32));
        }
    }
    FeatureGrid::new(oh, ow, d, data)
}

/// Deterministic stand-in head embeddings for `categories`.
pub fn category_head(categories: &[String], dim: usize, seed: u64) -> HashMap<String, Vector> {
    let h = HashEmbedder::new(dim, seed);
    categories
        .iter()
        .map(|c| (c.clone(), h.embed("head", c)))
        .collect()
}

/// Parameters from the configured initialization when no file is given.
pub fn default_params(config: &PipelineConfig, dim: usize) -> ParamBundle {
    let seed = config.stage_seed("refine-params");
    let p = match config.refine.init {
        ParamInit::Zero => RefinementParams::zero_init(dim, config.refine.window, seed),
        ParamInit::Seeded => RefinementParams::seeded(dim, config.refine.window, seed),
    };
    ParamBundle::shared(p)
}

pub fn run_pipeline(ctx: &PipelineContext<'_>, req: &ImageRequest) -> Result<PipelineOutput> {
    let cfg = ctx.config;
    cfg.validate()?;
    let mut seen = HashSet::new();
    if let Some(dup) = req.categories.iter().find(|c| !seen.insert(c.as_str())) {
        return Err(Error::invalid(format!("duplicate category {dup:?}")));
    }
    let mut out = PipelineOutput {
        image_id: req.image_id.clone(),
        scene: req.scene.clone(),
        categories: Vec::with_capacity(req.categories.len()),
    };
    if req.categories.is_empty() {
        return Ok(out);
    }

    let grid = ctx.provider.features(&req.image_id)?;
    let scales = cfg
        .refine
        .scales
        .iter()
        .map(|&f| pool_grid(grid, f))
        .collect::<Result<Vec<_>>>()?;
    let weights = cfg.key_weights();
    let anchor_params = cfg.anchor_params();
    let radius = anchor_params.radius_normalized(grid.height(), grid.width());
    let exclude = req.exclude_self.then_some(req.image_id.as_str());

    for category in &req.categories {
        let c = category.as_str();
        let query = stage(
            "query",
            c,
            build_query(ctx.provider, c, &req.scene, &req.image_id, &weights),
        )?;
        let hits = stage(
            "retrieve",
            c,
            retrieve(ctx.bank, ctx.index, &query, cfg.retrieval.k, exclude),
        )?;
        let prototype = stage(
            "aggregate",
            c,
            aggregate_prototype(ctx.bank, &hits, &query, cfg.retrieval.tau),
        )?;
        let prior = stage("dense_prior", c, dense_prior(grid, &prototype, cfg.priors.sigma))?;
        let anchors = if prototype.is_empty() {
            AnchorSet {
                category: category.clone(),
                anchors: Vec::new(),
            }
        } else {
            stage(
                "anchors",
                c,
                extract_anchors(&prior, anchor_params.threshold, radius, anchor_params.max_anchors),
            )?
        };
        let prompts = stage(
            "refine",
            c,
            refine_all(&scales, &prior, &anchors, ctx.params, c, cfg.refine.normalized_dense),
        )?;
        let logits = stage("score", c, score_prompts(&prompts, &req.categories, ctx.head))?;
        let sources = vec![PromptSource::Category(category.clone()); prompts.len()];
        let logits = stage("constrain", c, constrain_logits(&logits, &sources))?;
        out.categories.push(CategoryOutput {
            category: category.clone(),
            prototype,
            prior,
            anchors,
            prompts,
            logits,
        });
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub entry_id: usize,
    pub category: String,
    pub image_id: String,
    pub score: f32,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchorReport {
    pub x: f32,
    pub y: f32,
    pub response: f32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryReport {
    pub category: String,
    pub retrieval: Vec<TraceEntry>,
    pub anchors: Vec<AnchorReport>,
    pub prompt_count: usize,
    /// Winning category per prompt after masking.
    pub argmax: Vec<Option<String>>,
}

/// JSON report for one image, including the configuration that produced it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PipelineReport {
    pub image_id: String,
    pub scene: String,
    pub config: PipelineConfig,
    pub categories: Vec<CategoryReport>,
}

impl PipelineReport {
    pub fn new(config: &PipelineConfig, bank: &MemoryBank, out: &PipelineOutput) -> Self {
        let categories = out
            .categories
            .iter()
            .map(|c| CategoryReport {
                category: c.category.clone(),
                retrieval: c
                    .prototype
                    .neighbors
                    .iter()
                    .map(|n| {
                        let e = bank.entry(n.entry_id);
                        TraceEntry {
                            entry_id: n.entry_id,
                            category: e.map(|e| e.category.clone()).unwrap_or_default(),
                            image_id: e.map(|e| e.meta.image_id.clone()).unwrap_or_default(),
                            score: n.key_score,
                            alpha: n.weight,
                        }
                    })
                    .collect(),
                anchors: c
                    .anchors
                    .anchors
                    .iter()
                    .map(|a| AnchorReport {
                        x: a.point.x,
                        y: a.point.y,
                        response: a.response,
                    })
                    .collect(),
                prompt_count: c.prompts.len(),
                argmax: (0..c.logits.rows().len())
                    .map(|i| c.logits.argmax(i).map(|j| c.logits.cols()[j].clone()))
                    .collect(),
            })
            .collect();
        PipelineReport {
            image_id: out.image_id.clone(),
            scene: out.scene.clone(),
            config: config.clone(),
            categories,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report always serializes")
    }
}

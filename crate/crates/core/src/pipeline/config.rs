//! Pipeline configuration: TOML with one table per stage, every field optional.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ann::IvfPqParams;
use crate::error::{Error, Result};
use crate::memory::{BuildConfig, KeyWeights};
use crate::priors::AnchorParams;
use crate::refine::DEFAULT_WINDOW;
use crate::retrieval::{DEFAULT_RECALL_SIZE, DEFAULT_TAU, DEFAULT_TOP_K};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MemorySection {
    pub w_p: f32,
    pub w_s: f32,
    pub w_g: f32,
    pub min_area: f64,
    pub iou_threshold: f64,
    pub drop_fraction: f64,
}

impl Default for MemorySection {
    fn default() -> Self {
        let w = KeyWeights::default();
        let b = BuildConfig::default();
        MemorySection {
            w_p: w.w_p,
            w_s: w.w_s,
            w_g: w.w_g,
            min_area: b.min_area,
            iou_threshold: b.iou_threshold,
            drop_fraction: b.drop_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    pub k: usize,
    pub tau: f64,
    pub recall_size: usize,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        RetrievalSection {
            k: DEFAULT_TOP_K,
            tau: DEFAULT_TAU,
            recall_size: DEFAULT_RECALL_SIZE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IndexSection {
    pub nlist: usize,
    pub m: usize,
    pub nbits: usize,
    pub nprobe: usize,
    pub kmeans_iters: usize,
}

impl Default for IndexSection {
    fn default() -> Self {
        let p = IvfPqParams::default();
        IndexSection {
            nlist: p.nlist,
            m: p.m,
            nbits: p.nbits,
            nprobe: 16,
            kmeans_iters: p.kmeans_iters,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorsSection {
    pub sigma: f64,
    pub threshold: f32,
    /// Suppression radius in cells of the longer grid side.
    pub radius_cells: f64,
    pub max_anchors: usize,
}

impl Default for PriorsSection {
    fn default() -> Self {
        let a = AnchorParams::default();
        PriorsSection {
            sigma: 1.0,
            threshold: a.threshold,
            radius_cells: a.radius_cells,
            max_anchors: a.max_anchors,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamInit {
    /// Zero projections; prompts reduce to `layer_norm(e)`.
    Zero,
    Seeded,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineSection {
    pub window: usize,
    pub normalized_dense: bool,
    /// Average-pooling factors applied to the input grid, one per scale.
    pub scales: Vec<usize>,
    /// Initialization used when no parameter file is supplied.
    pub init: ParamInit,
}

impl Default for RefineSection {
    fn default() -> Self {
        RefineSection {
            window: DEFAULT_WINDOW,
            normalized_dense: false,
            scales: vec![1],
            init: ParamInit::Seeded,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SeedSection {
    pub root: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub memory: MemorySection,
    pub retrieval: RetrievalSection,
    pub index: IndexSection,
    pub priors: PriorsSection,
    pub refine: RefineSection,
    pub seed: SeedSection,
}

fn check(ok: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if ok {
        Ok(())
    } else {
        Err(Error::invalid(msg()))
    }
}

impl PipelineConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| Error::invalid(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config always serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.memory;
        for (name, v) in [("w_p", m.w_p), ("w_s", m.w_s), ("w_g", m.w_g)] {
            check(v.is_finite(), || format!("memory.{name} must be finite"))?;
        }
        check(m.min_area >= 0.0 && m.min_area.is_finite(), || {
            "memory.min_area must be non-negative".into()
        })?;
        check((0.0..=1.0).contains(&m.iou_threshold), || {
            "memory.iou_threshold must lie in [0, 1]".into()
        })?;
        check((0.0..1.0).contains(&m.drop_fraction), || {
            "memory.drop_fraction must lie in [0, 1)".into()
        })?;

        let r = &self.retrieval;
        check(r.k >= 1, || "retrieval.k must be at least 1".into())?;
        check(r.tau > 0.0 && r.tau.is_finite(), || "retrieval.tau must be positive".into())?;
        check(r.recall_size >= 1, || "retrieval.recall_size must be at least 1".into())?;

        let i = &self.index;
        check(i.nlist >= 1 && i.m >= 1, || "index.nlist and index.m must be positive".into())?;
        check((1..=8).contains(&i.nbits), || "index.nbits must lie in 1..=8".into())?;
        check(i.nprobe >= 1, || "index.nprobe must be at least 1".into())?;
        check(i.kmeans_iters >= 1, || "index.kmeans_iters must be at least 1".into())?;

        let p = &self.priors;
        check(p.sigma >= 0.0 && p.sigma.is_finite(), || "priors.sigma must be non-negative".into())?;
        check((0.0..=1.0).contains(&p.threshold), || "priors.threshold must lie in [0, 1]".into())?;
        check(p.radius_cells > 0.0 && p.radius_cells.is_finite(), || {
            "priors.radius_cells must be positive".into()
        })?;

        let f = &self.refine;
        check(f.window % 2 == 1, || format!("refine.window must be odd, got {}", f.window))?;
        check(!f.scales.is_empty() && f.scales.iter().all(|&s| s >= 1), || {
            "refine.scales must be a non-empty list of positive factors".into()
        })?;
        Ok(())
    }

    pub fn key_weights(&self) -> KeyWeights {
        KeyWeights {
            w_p: self.memory.w_p,
            w_s: self.memory.w_s,
            w_g: self.memory.w_g,
        }
    }

    pub fn build_config(&self, exclude_images: BTreeSet<String>) -> BuildConfig {
        BuildConfig {
            weights: self.key_weights(),
            min_area: self.memory.min_area,
            iou_threshold: self.memory.iou_threshold,
            drop_fraction: self.memory.drop_fraction,
            exclude_images,
        }
    }

    pub fn ivf_params(&self) -> IvfPqParams {
        IvfPqParams {
            nlist: self.index.nlist,
            m: self.index.m,
            nbits: self.index.nbits,
            kmeans_iters: self.index.kmeans_iters,
            seed: self.stage_seed("index"),
        }
    }

    pub fn anchor_params(&self) -> AnchorParams {
        AnchorParams {
            threshold: self.priors.threshold,
            radius_cells: self.priors.radius_cells,
            max_anchors: self.priors.max_anchors,
        }
    }

    /// Seed for one named stage, derived from the root seed.
    pub fn stage_seed(&self, stage: &str) -> u64 {
        seed::derive_seed(self.seed.root, stage)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(c.retrieval.k, 12);
        assert_eq!(c.retrieval.tau, 0.07);
        assert_eq!(c.retrieval.recall_size, 200);
        assert_eq!((c.memory.w_p, c.memory.w_s, c.memory.w_g), (1.0, 0.3, 0.01));
        assert_eq!(c.memory.drop_fraction, 0.10);
        assert_eq!(c.refine.window, 5);
    }

    #[test]
    fn toml_round_trip_and_partial_files() {
        let c = PipelineConfig::default();
        assert_eq!(PipelineConfig::from_toml(&c.to_toml()).unwrap(), c);

        let partial = "[retrieval]\nk = 5\n\n[refine]\ninit = \"zero\"\nscales = [1, 2]\n";
        let p = PipelineConfig::from_toml(partial).unwrap();
        assert_eq!(p.retrieval.k, 5);
        assert_eq!(p.retrieval.tau, 0.07);
        assert_eq!(p.refine.init, ParamInit::Zero);
        assert_eq!(p.refine.scales, vec![1, 2]);
    }

    #[test]
    fn rejects_bad_values() {
        for bad in [
            "[retrieval]\nk = 0\n",
            "[retrieval]\ntau = 0.0\n",
            "[refine]\nwindow = 4\n",
            "[index]\nnbits = 9\n",
            "[memory]\ndrop_fraction = 1.0\n",
            "[bogus]\nx = 1\n",
            "[retrieval]\nkk = 1\n",
        ] {
            assert!(PipelineConfig::from_toml(bad).is_err(), "{bad}");
        }
    }
}

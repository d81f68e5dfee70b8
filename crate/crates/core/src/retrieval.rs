//! Category-conditioned retrieval and temperature-softmax prototype aggregation.

use serde::{Deserialize, Serialize};

use crate::ann::{rescore, FlatIndex, IvfPqIndex, SearchHit};
use crate::embedding::{dot, l2_normalize, Vector};
use crate::error::{Error, Result};
use crate::memory::{build_key, EmbeddingProvider, KeyWeights, MemoryBank};

/// Default number of retrieved entries per category.
pub const DEFAULT_TOP_K: usize = 12;
/// Default softmax temperature for prototype aggregation.
pub const DEFAULT_TAU: f64 = 0.07;
/// Default ANN candidate pool before exact rescoring.
pub const DEFAULT_RECALL_SIZE: usize = 200;

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalQuery {
    pub category: String,
    pub vector: Vector,
    pub scene: String,
    pub image_id: String,
}

/// Builds the query through the same arithmetic as memory keys.
pub fn build_query(
    provider: &EmbeddingProvider,
    category: &str,
    scene: &str,
    image_id: &str,
    w: &KeyWeights,
) -> Result<RetrievalQuery> {
    let vector = build_key(
        &provider.text(category)?,
        &provider.text(scene)?,
        &provider.image(image_id)?,
        w,
    )?;
    Ok(RetrievalQuery {
        category: category.to_string(),
        vector,
        scene: scene.to_string(),
        image_id: image_id.to_string(),
    })
}

/// Search structure used by [`retrieve`].
#[derive(Clone, Debug)]
pub enum RetrievalIndex {
    Flat(FlatIndex),
    IvfPq {
        index: IvfPqIndex,
        nprobe: usize,
        recall_size: usize,
    },
}

impl RetrievalIndex {
    pub fn flat(bank: &MemoryBank) -> Self {
        RetrievalIndex::Flat(FlatIndex::from_bank(bank))
    }
}

/// Top-`k` entries for `query`, optionally skipping entries grounded in
/// `exclude_image`. The IVF-PQ route rescores its candidate pool exactly and
/// refills excluded slots from that pool.
pub fn retrieve(
    bank: &MemoryBank,
    index: &RetrievalIndex,
    query: &RetrievalQuery,
    k: usize,
    exclude_image: Option<&str>,
) -> Result<Vec<SearchHit>> {
    if k == 0 {
        return Err(Error::invalid("k must be at least 1"));
    }
    if bank.is_empty() {
        return Ok(Vec::new());
    }
    let q = &query.vector;
    let ranked = match index {
        RetrievalIndex::Flat(flat) => {
            let extra = exclude_image.map_or(0, |img| bank.count_image(img));
            flat.search(q, k + extra)?
        }
        RetrievalIndex::IvfPq {
            index,
            nprobe,
            recall_size,
        } => {
            let candidates = index.search(q, *nprobe, (*recall_size).max(k))?;
            rescore(bank, &candidates, q, candidates.len())?
        }
    };
    let mut out = Vec::with_capacity(k);
    for hit in ranked {
        let entry = bank
            .entry(hit.entry_id)
            .ok_or_else(|| Error::invalid(format!("entry id {} out of range", hit.entry_id)))?;
        if exclude_image == Some(entry.meta.image_id.as_str()) {
            continue;
        }
        out.push(hit);
        if out.len() == k {
            break;
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Neighbor {
    pub entry_id: usize,
    pub key_score: f32,
    pub weight: f64,
}

/// Aggregated visual prototype for one category. A zero vector with no
/// neighbors means nothing was retrieved.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prototype {
    pub category: String,
    pub vector: Vector,
    pub neighbors: Vec<Neighbor>,
    pub tau: f64,
}

impl Prototype {
    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty() || self.vector.is_zero()
    }
}

/// `softmax(scores / tau)` with max subtraction.
pub fn softmax_weights(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if scores.is_empty() {
        return Ok(Vec::new());
    }
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Softmax-weighted, normalized mean of the retrieved values. Weights use the
/// exact query-key inner products.
pub fn aggregate_prototype(
    bank: &MemoryBank,
    hits: &[SearchHit],
    query: &RetrievalQuery,
    tau: f64,
) -> Result<Prototype> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    if hits.is_empty() {
        return Ok(Prototype {
            category: query.category.clone(),
            vector: Vector::zeros(bank.d_val),
            neighbors: Vec::new(),
            tau,
        });
    }
    let entries = hits
        .iter()
        .map(|h| {
            bank.entry(h.entry_id)
                .ok_or_else(|| Error::invalid(format!("entry id {} out of range", h.entry_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    if query.vector.dim() != bank.d_key {
        return Err(Error::invalid(format!(
            "query dimension {} does not match key dimension {}",
            query.vector.dim(),
            bank.d_key
        )));
    }
    let scores: Vec<f32> = entries.iter().map(|e| dot(&query.vector, &e.key)).collect();
    let weights = softmax_weights(
        &scores.iter().map(|&s| f64::from(s)).collect::<Vec<_>>(),
        tau,
    )?;

    let mut acc = vec![0.0f64; bank.d_val];
    for (e, &a) in entries.iter().zip(&weights) {
        for (s, &v) in acc.iter_mut().zip(e.value.iter()) {
            *s += a * f64::from(v);
        }
    }
    let mixed: Vec<f32> = acc.into_iter().map(|x| x as f32).collect();
    Ok(Prototype {
        category: query.category.clone(),
        vector: l2_normalize(&mixed)?,
        neighbors: hits
            .iter()
            .zip(scores)
            .zip(weights)
            .map(|((h, s), w)| Neighbor {
                entry_id: h.entry_id,
                key_score: s,
                weight: w,
            })
            .collect(),
        tau,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::train_ivfpq;
    use crate::embedding::{Box2D, FeatureGrid};
    use crate::memory::{build_bank, BuildConfig, GroundingRecord, HashEmbedder};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn setup(n_images: usize) -> (EmbeddingProvider, MemoryBank) {
        let mut p = EmbeddingProvider::with_fallback(HashEmbedder::new(16, 11));
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut records = Vec::new();
        for i in 0..n_images {
            let id = format!("img{i}");
            let data: Vec<f32> = (0..4 * 4 * 8).map(|_| rng.random_range(-1.0..1.0)).collect();
            p.insert_features(id.clone(), FeatureGrid::new(4, 4, 8, data).unwrap())
                .unwrap();
            for (j, phrase) in ["cat", "dog", "cup"].iter().enumerate() {
                let x = 0.1 * j as f32;
                records.push(
                    GroundingRecord::new(
                        id.clone(),
                        Box2D::new(x, 0.1, x + 0.5, 0.7).unwrap(),
                        *phrase,
                        ["kitchen", "park"][i % 2],
                    )
                    .with_blur_score(1.0),
                );
            }
        }
        let cfg = BuildConfig {
            drop_fraction: 0.0,
            ..Default::default()
        };
        let bank = build_bank(records, &p, &cfg).unwrap();
        (p, bank)
    }

    #[test]
    fn default_constants() {
        assert_eq!(DEFAULT_TOP_K, 12);
        assert_eq!(DEFAULT_TAU, 0.07);
        assert_eq!(DEFAULT_RECALL_SIZE, 200);
    }

    #[test]
    fn query_matches_stored_key() {
        let (p, bank) = setup(4);
        let w = KeyWeights::default();
        let e = &bank.entries()[4];
        let scene = ["kitchen", "park"][1];
        let q = build_query(&p, &e.category, scene, &e.meta.image_id, &w).unwrap();
        assert_eq!(q.vector, e.key);

        let phrase_only = KeyWeights { w_p: 1.0, w_s: 0.0, w_g: 0.0 };
        let q = build_query(&p, "cat", "park", "img0", &phrase_only).unwrap();
        assert_eq!(q.vector, l2_normalize(&p.text("cat").unwrap()).unwrap());

        let hits = retrieve(&bank, &RetrievalIndex::flat(&bank), &build_query(&p, "dog", "park", "img1", &w).unwrap(), 1, None).unwrap();
        assert_eq!(hits[0].entry_id, 4);
        assert!((hits[0].score - 1.0).abs() < 1e-5);
    }

    #[test]
    fn single_entry_bank() {
        let (p, bank) = setup(1);
        let one = MemoryBank::new(
            bank.d_key,
            bank.d_val,
            bank.weights,
            bank.manifest.clone(),
            bank.entries()[..1].to_vec(),
        )
        .unwrap();
        let q = build_query(&p, "zebra", "", "img0", &KeyWeights::default()).unwrap();
        let hits = retrieve(&one, &RetrievalIndex::flat(&one), &q, 12, None).unwrap();
        assert_eq!(hits.len(), 1);
        assert_eq!(hits[0].entry_id, 0);
    }

    #[test]
    fn exclusion_matches_filtered_oracle() {
        let (p, bank) = setup(6);
        let w = KeyWeights::default();
        let q = build_query(&p, "cat", "kitchen", "img2", &w).unwrap();
        let full = retrieve(&bank, &RetrievalIndex::flat(&bank), &q, 5, None).unwrap();
        assert_eq!(bank.entries()[full[0].entry_id].meta.image_id, "img2");

        let got = retrieve(&bank, &RetrievalIndex::flat(&bank), &q, 5, Some("img2")).unwrap();
        let mut oracle: Vec<(f32, usize)> = bank
            .entries()
            .iter()
            .enumerate()
            .filter(|(_, e)| e.meta.image_id != "img2")
            .map(|(i, e)| (dot(&q.vector, &e.key), i))
            .collect();
        oracle.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let expect: Vec<usize> = oracle[..5].iter().map(|x| x.1).collect();
        assert_eq!(got.iter().map(|h| h.entry_id).collect::<Vec<_>>(), expect);

        let keys: Vec<f32> = bank.entries().iter().flat_map(|e| e.key.iter().copied()).collect();
        let mut idx = train_ivfpq(&keys, 16, crate::ann::IvfPqParams { nlist: 2, m: 4, nbits: 2, kmeans_iters: 5, seed: 1 }).unwrap();
        idx.add(&(0..bank.len()).collect::<Vec<_>>(), &keys).unwrap();
        let ivf = RetrievalIndex::IvfPq { index: idx, nprobe: 2, recall_size: 200 };
        assert_eq!(retrieve(&bank, &ivf, &q, 5, Some("img2")).unwrap(), got);
    }

    #[test]
    fn empty_bank_retrieves_nothing() {
        let (p, bank) = setup(1);
        let empty = MemoryBank::new(bank.d_key, bank.d_val, bank.weights, Default::default(), vec![]).unwrap();
        let q = build_query(&p, "cat", "", "img0", &KeyWeights::default()).unwrap();
        assert!(retrieve(&empty, &RetrievalIndex::flat(&empty), &q, 12, None).unwrap().is_empty());
        let proto = aggregate_prototype(&empty, &[], &q, DEFAULT_TAU).unwrap();
        assert!(proto.is_empty() && proto.vector.is_zero());
        assert!(aggregate_prototype(&empty, &[], &q, 0.0).is_err());
    }

    #[test]
    fn aggregation_examples() {
        let (p, bank) = setup(3);
        let q = build_query(&p, "cat", "kitchen", "img0", &KeyWeights::default()).unwrap();
        let single = aggregate_prototype(&bank, &[SearchHit { entry_id: 3, score: 0.0 }], &q, DEFAULT_TAU).unwrap();
        assert_eq!(single.neighbors[0].weight, 1.0);
        assert_eq!(single.vector, bank.entries()[3].value);

        let w = softmax_weights(&[0.4, 0.4], DEFAULT_TAU).unwrap();
        assert_eq!(w, vec![0.5, 0.5]);

        // Extended-precision oracle for scores (0.9, 0.5) at tau 0.07.
        let w = softmax_weights(&[0.9, 0.5], 0.07).unwrap();
        let e = (-0.4f64 / 0.07).exp();
        assert!((w[0] - 1.0 / (1.0 + e)).abs() < 1e-12);
        assert!((w[1] - e / (1.0 + e)).abs() < 1e-12);
    }
}

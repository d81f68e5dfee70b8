//! Inner-product search over memory keys: an exact flat scan and an IVF-PQ
//! index with two-stage recall-then-rescore.

mod flat;
mod ivfpq;
mod kmeans;

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::embedding::dot;
use crate::error::{Error, Result};
use crate::memory::MemoryBank;

pub use flat::FlatIndex;
pub use ivfpq::{
    decode_index, encode_index, load_index, save_index, train_ivfpq, IvfPqIndex, IvfPqParams,
    INDEX_MAGIC, INDEX_VERSION,
};
pub use kmeans::{kmeans, KMeans};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub entry_id: usize,
    pub score: f32,
}

/// Ranking order: score descending, then entry id ascending.
pub fn hit_order(a: &SearchHit, b: &SearchHit) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.entry_id.cmp(&b.entry_id))
}

/// Sorts `hits` by [`hit_order`] and keeps the first `k`.
pub fn top_k(mut hits: Vec<SearchHit>, k: usize) -> Vec<SearchHit> {
    if k == 0 {
        return Vec::new();
    }
    if hits.len() > k {
        hits.select_nth_unstable_by(k - 1, hit_order);
        hits.truncate(k);
    }
    hits.sort_unstable_by(hit_order);
    hits
}

/// Source of full-precision keys by entry id.
pub trait KeyStore {
    fn key_dim(&self) -> usize;
    fn key(&self, id: usize) -> Option<&[f32]>;
}

impl KeyStore for MemoryBank {
    fn key_dim(&self) -> usize {
        self.d_key
    }

    fn key(&self, id: usize) -> Option<&[f32]> {
        self.entry(id).map(|e| e.key.as_slice())
    }
}

/// Re-ranks `candidates` by exact inner product against full-precision keys
/// and returns the exact top `k` of the candidate set.
pub fn rescore<S: KeyStore + ?Sized>(
    store: &S,
    candidates: &[SearchHit],
    query: &[f32],
    k: usize,
) -> Result<Vec<SearchHit>> {
    if query.len() != store.key_dim() {
        return Err(Error::invalid(format!(
            "query dimension {} does not match key dimension {}",
            query.len(),
            store.key_dim()
        )));
    }
    let exact = candidates
        .iter()
        .map(|c| {
            store
                .key(c.entry_id)
                .map(|key| SearchHit {
                    entry_id: c.entry_id,
                    score: dot(query, key),
                })
                .ok_or_else(|| Error::invalid(format!("entry id {} out of range", c.entry_id)))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(top_k(exact, k))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_k_orders_and_breaks_ties_by_id() {
        let hits = vec![
            SearchHit { entry_id: 3, score: 0.5 },
            SearchHit { entry_id: 1, score: 0.9 },
            SearchHit { entry_id: 0, score: 0.5 },
            SearchHit { entry_id: 2, score: 0.1 },
        ];
        let ids: Vec<usize> = top_k(hits.clone(), 3).iter().map(|h| h.entry_id).collect();
        assert_eq!(ids, vec![1, 0, 3]);
        assert_eq!(top_k(hits.clone(), 10).len(), 4);
        assert!(top_k(hits, 0).is_empty());
    }

    #[test]
    fn rescore_rejects_bad_ids() {
        let mut flat = FlatIndex::new(2);
        flat.add(0, &[1.0, 0.0]).unwrap();
        let bad = [SearchHit { entry_id: 5, score: 0.0 }];
        assert!(rescore(&flat, &bad, &[1.0, 0.0], 1).is_err());
        assert!(rescore(&flat, &[], &[1.0], 1).is_err());
    }
}

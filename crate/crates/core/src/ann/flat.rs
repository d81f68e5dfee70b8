use crate::ann::{top_k, KeyStore, SearchHit};
use crate::embedding::dot;
use crate::error::{Error, Result};
use crate::memory::MemoryBank;

/// Full-precision key matrix searched by exhaustive scan.
#[derive(Clone, Debug, PartialEq)]
pub struct FlatIndex {
    dim: usize,
    keys: Vec<f32>,
    ids: Vec<usize>,
    slot_of: Vec<Option<usize>>,
}

impl FlatIndex {
    pub fn new(dim: usize) -> Self {
        FlatIndex {
            dim,
            keys: Vec::new(),
            ids: Vec::new(),
            slot_of: Vec::new(),
        }
    }

    pub fn from_bank(bank: &MemoryBank) -> Self {
        let mut idx = FlatIndex::new(bank.d_key);
        idx.keys.reserve(bank.len() * bank.d_key);
        for (i, e) in bank.entries().iter().enumerate() {
            idx.add(i, &e.key).expect("bank keys share one dimension");
        }
        idx
    }

    pub fn add(&mut self, id: usize, key: &[f32]) -> Result<()> {
        if key.len() != self.dim {
            return Err(Error::invalid(format!(
                "key dimension {} does not match index dimension {}",
                key.len(),
                self.dim
            )));
        }
        if id >= self.slot_of.len() {
            self.slot_of.resize(id + 1, None);
        }
        if self.slot_of[id].is_some() {
            return Err(Error::invalid(format!("duplicate entry id {id}")));
        }
        self.slot_of[id] = Some(self.ids.len());
        self.ids.push(id);
        self.keys.extend_from_slice(key);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn keys(&self) -> &[f32] {
        &self.keys
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Exact top `min(k, N)` hits by inner product.
    pub fn search(&self, query: &[f32], k: usize) -> Result<Vec<SearchHit>> {
        if query.len() != self.dim {
            return Err(Error::invalid(format!(
                "query dimension {} does not match index dimension {}",
                query.len(),
                self.dim
            )));
        }
        if k == 0 {
            return Err(Error::invalid("k must be at least 1"));
        }
        let hits = self
            .keys
            .chunks_exact(self.dim)
            .zip(&self.ids)
            .map(|(key, &id)| SearchHit {
                entry_id: id,
                score: dot(query, key),
            })
            .collect();
        Ok(top_k(hits, k))
    }
}

impl KeyStore for FlatIndex {
    fn key_dim(&self) -> usize {
        self.dim
    }

    fn key(&self, id: usize) -> Option<&[f32]> {
        let slot = (*self.slot_of.get(id)?)?;
        Some(&self.keys[slot * self.dim..(slot + 1) * self.dim])
    }
}

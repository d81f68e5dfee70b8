//! Throughput and recall of the IVF-PQ route against exact search.

use std::time::Instant;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::ann::{FlatIndex, IvfPqIndex, SearchHit};
use crate::embedding::{l2_normalize, Vector};
use crate::error::{Error, Result};
use crate::memory::{entry_stride, MemoryBank};
use crate::retrieval::{retrieve, RetrievalIndex, RetrievalQuery};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchSettings {
    pub query_count: usize,
    pub k: usize,
    pub nprobe: usize,
    pub recall_size: usize,
    /// Norm of the Gaussian perturbation added to sampled keys.
    pub query_noise: f32,
    pub repetitions: usize,
    pub seed: u64,
}

impl Default for BenchSettings {
    fn default() -> Self {
        BenchSettings {
            query_count: 1000,
            k: 12,
            nprobe: 16,
            recall_size: 200,
            query_noise: 0.1,
            repetitions: 3,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub entries: usize,
    pub query_count: usize,
    pub k: usize,
    pub nprobe: usize,
    pub recall_size: usize,
    pub repetitions: usize,
    /// Median over repetitions of queries per second through the IVF-PQ route.
    pub queries_per_second: f64,
    pub flat_queries_per_second: f64,
    pub recall_at_k: f64,
    /// Bytes per entry in the bank file.
    pub per_entry_bytes: usize,
    /// Bytes per entry in the index inverted lists (id + codes).
    pub index_bytes_per_entry: usize,
}

/// Perturbed, renormalized keys of randomly chosen entries.
pub fn bench_queries(bank: &MemoryBank, count: usize, noise: f32, seed: u64) -> Result<Vec<Vector>> {
    let mut rng = seed::stage_rng(seed, "bench-queries");
    let d = bank.d_key;
    let scale = noise / (d as f32).sqrt();
    (0..count)
        .map(|_| {
            let e = &bank.entries()[rng.random_range(0..bank.len())];
            let q: Vec<f32> = e
                .key
                .iter()
                .map(|&x| {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    x + scale * z
                })
                .collect();
            l2_normalize(&q)
        })
        .collect()
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

fn timed<T>(reps: usize, mut f: impl FnMut() -> Result<T>) -> Result<(T, Vec<f64>)> {
    let mut times = Vec::with_capacity(reps);
    let mut last = None;
    for _ in 0..reps {
        let t = Instant::now();
        last = Some(f()?);
        times.push(t.elapsed().as_secs_f64());
    }
    Ok((last.unwrap(), times))
}

/// Fraction of the exact top-`k` ids recovered, averaged over queries.
pub fn mean_recall(exact: &[Vec<SearchHit>], approx: &[Vec<SearchHit>]) -> f64 {
    let total: f64 = exact
        .iter()
        .zip(approx)
        .map(|(e, a)| {
            if e.is_empty() {
                return 1.0;
            }
            let found = e
                .iter()
                .filter(|h| a.iter().any(|x| x.entry_id == h.entry_id))
                .count();
            found as f64 / e.len() as f64
        })
        .sum();
    total / exact.len().max(1) as f64
}

pub fn bench(bank: &MemoryBank, index: &IvfPqIndex, s: &BenchSettings) -> Result<BenchReport> {
    if bank.is_empty() || s.query_count == 0 || s.repetitions == 0 || s.k == 0 {
        return Err(Error::invalid(
            "bench needs a non-empty bank and positive query count, k and repetitions",
        ));
    }
    if index.len() != bank.len() {
        return Err(Error::invalid(format!(
            "index holds {} entries, bank {}",
            index.len(),
            bank.len()
        )));
    }
    let queries: Vec<RetrievalQuery> = bench_queries(bank, s.query_count, s.query_noise, s.seed)?
        .into_iter()
        .map(|v| RetrievalQuery {
            category: String::new(),
            vector: v,
            scene: String::new(),
            image_id: String::new(),
        })
        .collect();

    let flat = RetrievalIndex::Flat(FlatIndex::from_bank(bank));
    let ivf = RetrievalIndex::IvfPq {
        index: index.clone(),
        nprobe: s.nprobe,
        recall_size: s.recall_size,
    };
    let run = |idx: &RetrievalIndex| -> Result<Vec<Vec<SearchHit>>> {
        queries.iter().map(|q| retrieve(bank, idx, q, s.k, None)).collect()
    };
    let (exact, flat_times) = timed(s.repetitions, || run(&flat))?;
    let (approx, ivf_times) = timed(s.repetitions, || run(&ivf))?;
    let n = s.query_count as f64;
    Ok(BenchReport {
        entries: bank.len(),
        query_count: s.query_count,
        k: s.k,
        nprobe: s.nprobe,
        recall_size: s.recall_size,
        repetitions: s.repetitions,
        queries_per_second: n / median(ivf_times).max(1e-12),
        flat_queries_per_second: n / median(flat_times).max(1e-12),
        recall_at_k: mean_recall(&exact, &approx),
        per_entry_bytes: entry_stride(bank.d_key, bank.d_val),
        index_bytes_per_entry: index.bytes_per_entry(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ann::{train_ivfpq, IvfPqParams};
    use crate::pipeline::clustered_bank;

    #[test]
    fn exhaustive_probe_has_full_recall() {
        let bank = clustered_bank(600, 16, 4, 30, 5, 2).unwrap();
        let keys: Vec<f32> = bank.entries().iter().flat_map(|e| e.key.iter().copied()).collect();
        let params = IvfPqParams { nlist: 8, m: 4, nbits: 4, kmeans_iters: 10, seed: 1 };
        let mut idx = train_ivfpq(&keys, 16, params).unwrap();
        idx.add(&(0..bank.len()).collect::<Vec<_>>(), &keys).unwrap();
        let s = BenchSettings {
            query_count: 50,
            nprobe: 8,
            recall_size: 600,
            ..Default::default()
        };
        let r = bench(&bank, &idx, &s).unwrap();
        assert_eq!(r.recall_at_k, 1.0);
        assert!(r.queries_per_second.is_finite() && r.queries_per_second > 0.0);
        assert_eq!(r.per_entry_bytes, 4 * (16 + 4) + 32);
        assert_eq!(r.index_bytes_per_entry, 8 + 4);
    }
}

//! Inverted-file index with product-quantized residuals, scored by inner
//! product.
//!
//! Keys are assigned to the coarse centroid with the largest inner product;
//! the residual `key - centroid` is split into `m` sub-vectors, each encoded
//! by its nearest codeword (squared L2) in a per-subspace codebook. Search
//! probes the `nprobe` centroids with the largest inner product and scores
//! candidates by asymmetric distance computation:
//! `q.c + sum_s q_s.codebook_s[code_s]` via per-query lookup tables.
//!
//! File layout (little-endian):
//!
//! ```text
//! "PIVF" | u32 version | u32 dim | u32 nlist | u32 m | u32 nbits | u32 kmeans_iters
//! u64 seed | u8 trained
//! if trained: nlist x dim f32 centroids | m x 2^nbits x (dim/m) f32 codebooks
//! nlist x (u64 len | len x (u64 id | m x u8 code))
//! ```

use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ann::kmeans::{assign_ip, assign_l2, kmeans};
use crate::ann::{top_k, SearchHit};
use crate::codec::{write_atomic, Reader, Writer};
use crate::embedding::dot;
use crate::error::{Error, Result};
use crate::seed;

pub const INDEX_MAGIC: &[u8; 4] = b"PIVF";
pub const INDEX_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IvfPqParams {
    pub nlist: usize,
    pub m: usize,
    pub nbits: usize,
    pub kmeans_iters: usize,
    pub seed: u64,
}

impl Default for IvfPqParams {
    fn default() -> Self {
        IvfPqParams {
            nlist: 256,
            m: 16,
            nbits: 8,
            kmeans_iters: 25,
            seed: 0,
        }
    }
}

impl IvfPqParams {
    pub fn ksub(&self) -> usize {
        1 << self.nbits
    }

    fn validate(&self, dim: usize) -> Result<()> {
        if dim == 0 || self.nlist == 0 || self.m == 0 || self.kmeans_iters == 0 {
            return Err(Error::invalid(
                "dim, nlist, m and kmeans_iters must all be positive",
            ));
        }
        if dim % self.m != 0 {
            return Err(Error::invalid(format!(
                "key dimension {dim} is not divisible by m = {}",
                self.m
            )));
        }
        if !(1..=8).contains(&self.nbits) {
            return Err(Error::invalid(format!(
                "nbits must lie in 1..=8, got {}",
                self.nbits
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
struct InvertedList {
    ids: Vec<usize>,
    /// `ids.len() x m` codes.
    codes: Vec<u8>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct IvfPqIndex {
    dim: usize,
    params: IvfPqParams,
    trained: bool,
    centroids: Vec<f32>,
    codebooks: Vec<f32>,
    lists: Vec<InvertedList>,
    ids: HashSet<usize>,
}

/// Trains an index on `keys` (`n x dim`, row-major). The index starts empty.
pub fn train_ivfpq(keys: &[f32], dim: usize, params: IvfPqParams) -> Result<IvfPqIndex> {
    let mut idx = IvfPqIndex::new(dim, params)?;
    idx.train(keys)?;
    Ok(idx)
}

impl IvfPqIndex {
    /// An untrained, empty index.
    pub fn new(dim: usize, params: IvfPqParams) -> Result<Self> {
        params.validate(dim)?;
        Ok(IvfPqIndex {
            dim,
            params,
            trained: false,
            centroids: Vec::new(),
            codebooks: Vec::new(),
            lists: vec![InvertedList::default(); params.nlist],
            ids: HashSet::new(),
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &IvfPqParams {
        &self.params
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn list_lengths(&self) -> Vec<usize> {
        self.lists.iter().map(|l| l.ids.len()).collect()
    }

    fn dsub(&self) -> usize {
        self.dim / self.params.m
    }

    pub fn centroid(&self, list: usize) -> &[f32] {
        &self.centroids[list * self.dim..(list + 1) * self.dim]
    }

    fn codeword(&self, sub: usize, code: usize) -> &[f32] {
        let dsub = self.dsub();
        let start = (sub * self.params.ksub() + code) * dsub;
        &self.codebooks[start..start + dsub]
    }

    fn check_matrix(&self, keys: &[f32]) -> Result<usize> {
        if keys.len() % self.dim != 0 {
            return Err(Error::invalid(format!(
                "key matrix length {} is not a multiple of dimension {}",
                keys.len(),
                self.dim
            )));
        }
        Ok(keys.len() / self.dim)
    }

    fn residuals(&self, keys: &[f32], lists: &[usize]) -> Vec<f32> {
        let mut out = keys.to_vec();
        for (r, &l) in out.chunks_exact_mut(self.dim).zip(lists) {
            for (x, &c) in r.iter_mut().zip(self.centroid(l)) {
                *x -= c;
            }
        }
        out
    }

    fn subspace(&self, residuals: &[f32], sub: usize) -> Vec<f32> {
        let dsub = self.dsub();
        residuals
            .chunks_exact(self.dim)
            .flat_map(|r| r[sub * dsub..(sub + 1) * dsub].iter().copied())
            .collect()
    }

    /// Trains coarse centroids on `keys`, then one codebook per subspace on the residuals.
    pub fn train(&mut self, keys: &[f32]) -> Result<()> {
        let n = self.check_matrix(keys)?;
        let p = self.params;
        let needed = p.nlist.max(p.ksub());
        if n < needed {
            return Err(Error::invalid(format!(
                "training needs at least {needed} keys, got {n}"
            )));
        }
        let coarse = kmeans(keys, self.dim, p.nlist, p.kmeans_iters, seed::derive_seed(p.seed, "ivf-coarse"))?;
        self.centroids = coarse.centroids;
        let lists = assign_ip(keys, &self.centroids, self.dim);
        let residuals = self.residuals(keys, &lists);

        let dsub = self.dsub();
        let mut codebooks = Vec::with_capacity(p.m * p.ksub() * dsub);
        for sub in 0..p.m {
            let points = self.subspace(&residuals, sub);
            let km = kmeans(
                &points,
                dsub,
                p.ksub(),
                p.kmeans_iters,
                seed::derive_seed(p.seed, &format!("pq-{sub}")),
            )?;
            codebooks.extend_from_slice(&km.centroids);
        }
        self.codebooks = codebooks;
        self.trained = true;
        for l in &mut self.lists {
            *l = InvertedList::default();
        }
        self.ids.clear();
        Ok(())
    }

    fn require_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::State("index is not trained".into()))
        }
    }

    /// Coarse list and PQ code for each key.
    fn encode(&self, keys: &[f32]) -> (Vec<usize>, Vec<u8>) {
        let n = keys.len() / self.dim;
        let lists = assign_ip(keys, &self.centroids, self.dim);
        let residuals = self.residuals(keys, &lists);
        let (m, ksub, dsub) = (self.params.m, self.params.ksub(), self.dsub());
        let mut codes = vec![0u8; n * m];
        for sub in 0..m {
            let points = self.subspace(&residuals, sub);
            let book = &self.codebooks[sub * ksub * dsub..(sub + 1) * ksub * dsub];
            for (i, (c, _)) in assign_l2(&points, book, dsub).into_iter().enumerate() {
                codes[i * m + sub] = c as u8;
            }
        }
        (lists, codes)
    }

    /// Reconstructs `centroid + decoded residual` for a stored entry.
    pub fn reconstruct(&self, id: usize) -> Option<Vec<f32>> {
        let m = self.params.m;
        self.lists.iter().enumerate().find_map(|(l, list)| {
            let pos = list.ids.iter().position(|&x| x == id)?;
            let code = &list.codes[pos * m..(pos + 1) * m];
            let mut out = self.centroid(l).to_vec();
            let dsub = self.dsub();
            for (sub, &c) in code.iter().enumerate() {
                for (o, &w) in out[sub * dsub..(sub + 1) * dsub]
                    .iter_mut()
                    .zip(self.codeword(sub, c as usize))
                {
                    *o += w;
                }
            }
            Some(out)
        })
    }

    /// Encodes and stores `keys` under `ids`.
    pub fn add(&mut self, ids: &[usize], keys: &[f32]) -> Result<()> {
        self.require_trained()?;
        let n = self.check_matrix(keys)?;
        if n != ids.len() {
            return Err(Error::invalid(format!("{} ids for {n} keys", ids.len())));
        }
        let mut seen = HashSet::with_capacity(ids.len());
        for &id in ids {
            if self.ids.contains(&id) || !seen.insert(id) {
                return Err(Error::invalid(format!("duplicate entry id {id}")));
            }
        }
        let (lists, codes) = self.encode(keys);
        let m = self.params.m;
        for (i, (&id, &l)) in ids.iter().zip(&lists).enumerate() {
            let list = &mut self.lists[l];
            list.ids.push(id);
            list.codes.extend_from_slice(&codes[i * m..(i + 1) * m]);
            self.ids.insert(id);
        }
        Ok(())
    }

    /// Approximate top `recall_size` hits from the `nprobe` closest lists.
    pub fn search(&self, query: &[f32], nprobe: usize, recall_size: usize) -> Result<Vec<SearchHit>> {
        self.require_trained()?;
        if query.len() != self.dim {
            return Err(Error::invalid(format!(
                "query dimension {} does not match index dimension {}",
                query.len(),
                self.dim
            )));
        }
        if nprobe == 0 || nprobe > self.params.nlist {
            return Err(Error::invalid(format!(
                "nprobe must lie in 1..={}, got {nprobe}",
                self.params.nlist
            )));
        }
        if recall_size == 0 {
            return Err(Error::invalid("recall_size must be at least 1"));
        }

        let coarse: Vec<SearchHit> = (0..self.params.nlist)
            .map(|l| SearchHit {
                entry_id: l,
                score: dot(query, self.centroid(l)),
            })
            .collect();
        let probes = top_k(coarse, nprobe);

        let (m, ksub, dsub) = (self.params.m, self.params.ksub(), self.dsub());
        let mut lut = vec![0.0f32; m * ksub];
        for sub in 0..m {
            let q = &query[sub * dsub..(sub + 1) * dsub];
            for c in 0..ksub {
                lut[sub * ksub + c] = dot(q, self.codeword(sub, c));
            }
        }

        let mut hits = Vec::new();
        for probe in probes {
            let list = &self.lists[probe.entry_id];
            for (&id, code) in list.ids.iter().zip(list.codes.chunks_exact(m)) {
                let mut score = probe.score;
                for (sub, &c) in code.iter().enumerate() {
                    score += lut[sub * ksub + c as usize];
                }
                hits.push(SearchHit { entry_id: id, score });
            }
        }
        Ok(top_k(hits, recall_size))
    }

    /// Serialized size in bytes of one stored entry (id plus code).
    pub fn bytes_per_entry(&self) -> usize {
        8 + self.params.m
    }
}

pub fn encode_index(idx: &IvfPqIndex) -> Vec<u8> {
    let p = &idx.params;
    let mut w = Writer::new();
    w.bytes(INDEX_MAGIC);
    w.u32(INDEX_VERSION);
    for v in [idx.dim, p.nlist, p.m, p.nbits, p.kmeans_iters] {
        w.u32(v as u32);
    }
    w.u64(p.seed);
    w.u8(idx.trained as u8);
    if idx.trained {
        w.f32s(&idx.centroids);
        w.f32s(&idx.codebooks);
    }
    for list in &idx.lists {
        w.u64(list.ids.len() as u64);
        for (&id, code) in list.ids.iter().zip(list.codes.chunks_exact(p.m)) {
            w.u64(id as u64);
            w.bytes(code);
        }
    }
    w.into_bytes()
}

pub fn decode_index(bytes: &[u8]) -> Result<IvfPqIndex> {
    let mut r = Reader::new(bytes);
    r.magic(INDEX_MAGIC)?;
    r.version(INDEX_VERSION)?;
    let at = r.offset();
    let dim = r.u32("dim")? as usize;
    let params = IvfPqParams {
        nlist: r.u32("nlist")? as usize,
        m: r.u32("m")? as usize,
        nbits: r.u32("nbits")? as usize,
        kmeans_iters: r.u32("kmeans_iters")? as usize,
        seed: r.u64("seed")?,
    };
    // Every list stores at least its length, which bounds nlist before anything is allocated.
    r.count(params.nlist as u64, 8, "inverted lists")?;
    let mut idx = IvfPqIndex::new(dim, params).map_err(|e| Error::format(at, e.to_string()))?;
    let at = r.offset();
    idx.trained = match r.u8("trained flag")? {
        0 => false,
        1 => true,
        v => return Err(Error::format(at, format!("bad trained flag {v}"))),
    };
    if idx.trained {
        let nc = (params.nlist as u64)
            .checked_mul(dim as u64)
            .ok_or_else(|| Error::format(at, "centroid table too large"))?;
        let nc = r.count(nc, 4, "centroid values")?;
        idx.centroids = r.f32s(nc, "centroids")?;
        let nb = r.count((params.ksub() * dim) as u64, 4, "codebook values")?;
        idx.codebooks = r.f32s(nb, "codebooks")?;
    }
    for l in 0..params.nlist {
        let at = r.offset();
        let len = r.u64("list length")?;
        let len = r.count(len, 8 + params.m, "list entries")?;
        if len > 0 && !idx.trained {
            return Err(Error::format(at, "untrained index has stored entries"));
        }
        let list = &mut idx.lists[l];
        list.ids.reserve(len);
        list.codes.reserve(len * params.m);
        for _ in 0..len {
            let at = r.offset();
            let id = usize::try_from(r.u64("entry id")?)
                .map_err(|_| Error::format(at, "entry id too large"))?;
            if !idx.ids.insert(id) {
                return Err(Error::format(at, format!("duplicate entry id {id}")));
            }
            let at = r.offset();
            let code = r.take(params.m, "code")?;
            if let Some(&c) = code.iter().find(|&&c| usize::from(c) >= params.ksub()) {
                return Err(Error::format(at, format!("code value {c} exceeds codebook size")));
            }
            list.ids.push(id);
            list.codes.extend_from_slice(code);
        }
    }
    r.finish()?;
    Ok(idx)
}

pub fn save_index(idx: &IvfPqIndex, path: &Path) -> Result<()> {
    write_atomic(path, &encode_index(idx))
}

pub fn load_index(path: &Path) -> Result<IvfPqIndex> {
    decode_index(&std::fs::read(path)?)
}

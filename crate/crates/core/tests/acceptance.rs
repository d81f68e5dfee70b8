//! Acceptance suite. Runs every criterion in sequence (no test harness, so
//! timing criteria are not disturbed by parallel tests), prints one PASS/FAIL
//! line per criterion and exits non-zero if any fails.

use std::collections::BTreeSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use memprior_core::ann::{
    decode_index, encode_index, rescore, train_ivfpq, FlatIndex, IvfPqIndex, IvfPqParams, SearchHit,
};
use memprior_core::embedding::{
    bilinear_sample, gaussian_smooth, l2_normalize, layer_norm, FeatureGrid, Point2D, ScalarMap,
    Vector,
};
use memprior_core::memory::{
    build_bank, decode_bank, encode_bank, entry_stride, laplacian_variance, BuildConfig,
    EntryMeta, GroundingRecord, MemoryBank, MemoryEntry, ENTRY_META_BYTES,
};
use memprior_core::pipeline::{
    bench_queries, category_head, clustered_bank, default_params, gen_synthetic, run_pipeline,
    ImageRequest, ParamInit, PipelineConfig, PipelineContext, PipelineReport, ScenarioSpec,
    SyntheticData,
};
use memprior_core::priors::{extract_anchors, Anchor, DensePrior};
use memprior_core::refine::{
    constrain_logits, decode_params, encode_params, LogitsMatrix, ParamBundle, PromptSource,
    RefinementParams,
};
use memprior_core::retrieval::{
    aggregate_prototype, retrieve, softmax_weights, RetrievalIndex, RetrievalQuery,
};
use memprior_core::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| (x / n) as f32).collect()
}

fn keys_of(bank: &MemoryBank) -> Vec<f32> {
    bank.entries().iter().flat_map(|e| e.key.iter().copied()).collect()
}

fn indexed(keys: &[f32], dim: usize, params: IvfPqParams) -> IvfPqIndex {
    let mut idx = train_ivfpq(keys, dim, params).unwrap();
    idx.add(&(0..keys.len() / dim).collect::<Vec<_>>(), keys).unwrap();
    idx
}

fn query(v: Vector) -> RetrievalQuery {
    RetrievalQuery {
        category: "q".into(),
        vector: v,
        scene: String::new(),
        image_id: String::new(),
    }
}

fn bank_from(keys: Vec<Vec<f32>>, values: Vec<Vec<f32>>) -> MemoryBank {
    let (dk, dv) = (keys[0].len(), values[0].len());
    let entries = keys
        .into_iter()
        .zip(values)
        .enumerate()
        .map(|(i, (k, v))| MemoryEntry {
            key: Vector::new(k).unwrap(),
            value: Vector::new(v).unwrap(),
            category: format!("c{}", i % 7),
            meta: EntryMeta {
                image_id: format!("img{i}"),
                bbox: memprior_core::embedding::Box2D::full(),
                blur_score: None,
            },
        })
        .collect();
    MemoryBank::new(dk, dv, Default::default(), Default::default(), entries).unwrap()
}

/// Exhaustive-probe IVF-PQ plus exact rescoring reproduces exact search.
fn oracle_equivalence() -> Outcome {
    let start = Instant::now();
    let (n, d, queries) = (10_000, 128, 100);
    let params = IvfPqParams { nlist: 32, m: 16, nbits: 6, kmeans_iters: 10, seed: 0 };
    let mut checked = 0;
    for b in 0..10u64 {
        let mut r = rng(1000 + b);
        let keys: Vec<f32> = (0..n).flat_map(|_| unit(&mut r, d)).collect();
        let mut flat = FlatIndex::new(d);
        for (i, k) in keys.chunks_exact(d).enumerate() {
            flat.add(i, k).unwrap();
        }
        let idx = indexed(&keys, d, IvfPqParams { seed: b, ..params });
        for _ in 0..queries {
            let q = unit(&mut r, d);
            let pool = idx.search(&q, params.nlist, n).unwrap();
            for k in [1, 12, 50] {
                let approx = rescore(&flat, &pool, &q, k).unwrap();
                let exact = flat.search(&q, k).unwrap();
                ensure!(approx == exact, "bank {b}, k {k}: rescored hits differ from exact search");
                checked += 1;
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    ensure!(secs < 60.0, "took {secs:.1} s (limit 60 s)");
    Ok(format!("{checked} (bank, query, k) cases identical in {secs:.1} s"))
}

/// Recall@12 of the default IVF-PQ setting and its monotonicity in nprobe.
fn approximate_recall() -> Outcome {
    let start = Instant::now();
    let bank = clustered_bank(50_000, 256, 8, 1000, 50, 7).map_err(|e| e.to_string())?;
    let keys = keys_of(&bank);
    let idx = indexed(&keys, 256, IvfPqParams { nlist: 256, m: 16, nbits: 8, kmeans_iters: 25, seed: 7 });
    let train_secs = start.elapsed().as_secs_f64();
    let flat = FlatIndex::from_bank(&bank);
    let queries = bench_queries(&bank, 1000, 0.1, 11).unwrap();
    let exact: Vec<Vec<SearchHit>> = queries.iter().map(|q| flat.search(q, 12).unwrap()).collect();
    let mut recalls = Vec::new();
    for nprobe in [1, 4, 16, 64, 256] {
        let mut total = 0.0;
        for (q, ex) in queries.iter().zip(&exact) {
            let got = rescore(&flat, &idx.search(q, nprobe, 200).unwrap(), q, 12).unwrap();
            let found = ex.iter().filter(|h| got.iter().any(|g| g.entry_id == h.entry_id)).count();
            total += found as f64 / ex.len() as f64;
        }
        recalls.push((nprobe, total / queries.len() as f64));
    }
    let at16 = recalls[2].1;
    let line = recalls.iter().map(|(p, r)| format!("{p}:{r:.4}")).collect::<Vec<_>>().join(" ");
    ensure!(at16 >= 0.95, "recall@12 at nprobe 16 is {at16:.4} < 0.95 ({line})");
    ensure!(
        recalls.windows(2).all(|w| w[1].1 >= w[0].1),
        "recall not monotone in nprobe ({line})"
    );
    Ok(format!("recall@12 by nprobe {line}; training {train_secs:.1} s"))
}

fn scenario_run(
    data: &SyntheticData,
    bank: &MemoryBank,
    cfg: &PipelineConfig,
    categories: &[String],
) -> memprior_core::pipeline::PipelineOutput {
    let index = RetrievalIndex::flat(bank);
    let params = default_params(cfg, bank.d_val);
    let head = category_head(categories, bank.d_val, cfg.stage_seed("head"));
    let ctx = PipelineContext {
        config: cfg,
        bank,
        index: &index,
        provider: &data.provider,
        params: &params,
        head: &head,
    };
    let req = ImageRequest {
        image_id: data.meta.query_image.clone(),
        scene: data.meta.scene.clone(),
        categories: categories.to_vec(),
        exclude_self: false,
    };
    run_pipeline(&ctx, &req).unwrap()
}

/// Defaults as emitted in the pipeline's JSON report.
fn default_constants() -> Outcome {
    let data = gen_synthetic(&ScenarioSpec::default()).unwrap();
    let cfg = PipelineConfig::default();
    let bank = build_bank(data.records.clone(), &data.provider, &cfg.build_config(BTreeSet::new())).unwrap();
    let out = scenario_run(&data, &bank, &cfg, &data.meta.categories);
    let json = PipelineReport::new(&cfg, &bank, &out).to_json();
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    let c = &v["config"];
    let checks = [
        ("retrieval.k", c["retrieval"]["k"].as_f64(), 12.0),
        ("retrieval.tau", c["retrieval"]["tau"].as_f64(), 0.07),
        ("memory.w_p", c["memory"]["w_p"].as_f64(), 1.0),
        ("memory.w_s", c["memory"]["w_s"].as_f64(), 0.3),
        ("memory.w_g", c["memory"]["w_g"].as_f64(), 0.01),
        ("retrieval.recall_size", c["retrieval"]["recall_size"].as_f64(), 200.0),
        ("memory.drop_fraction", c["memory"]["drop_fraction"].as_f64(), 0.10),
    ];
    for (name, got, want) in checks {
        ensure!(got == Some(want), "{name} = {got:?}, expected {want}");
    }
    // The weights are stored as f32; check they are the nearest f32 to the decimal values.
    ensure!(
        c["memory"]["w_s"].as_f64().unwrap() as f32 == 0.3 && c["memory"]["w_g"].as_f64().unwrap() as f32 == 0.01,
        "key weights not the nearest f32 to 0.3 / 0.01"
    );
    Ok("K=12, tau=0.07, w=(1.0, 0.3, 0.01), recall_size=200, drop_fraction=0.10 read back from the report".into())
}

/// Softmax weights and prototype aggregation over seeded cases.
fn softmax_suite() -> Outcome {
    let mut r = rng(4);
    for case in 0..200 {
        let n = r.random_range(2..30);
        let tau = r.random_range(0.01..1.0);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(-1.0..1.0)).collect();
        let a = softmax_weights(&scores, tau).unwrap();
        let sum: f64 = a.iter().sum();
        ensure!((sum - 1.0).abs() <= 1e-5 && a.iter().all(|&x| x >= 0.0), "case {case}: not on the simplex (sum {sum})");
        for i in 0..n {
            for j in 0..n {
                if scores[i] > scores[j] {
                    ensure!(a[i] >= a[j], "case {case}: order not preserved");
                }
            }
        }
        let shift = r.random_range(-5.0..5.0);
        let shifted: Vec<f64> = scores.iter().map(|s| s + shift).collect();
        let b = softmax_weights(&shifted, tau).unwrap();
        ensure!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() <= 1e-6), "case {case}: not shift invariant");

        // Bank-level checks: tau -> 0 selects the top-1 value, one hit is the identity.
        let (dk, dv, m) = (16, 8, 40);
        let keys: Vec<Vec<f32>> = (0..m).map(|_| unit(&mut r, dk)).collect();
        let values: Vec<Vec<f32>> = (0..m).map(|_| unit(&mut r, dv)).collect();
        let bank = bank_from(keys, values);
        let flat = RetrievalIndex::flat(&bank);
        let (q, hits) = loop {
            let q = query(Vector::new(unit(&mut r, dk)).unwrap());
            let hits = retrieve(&bank, &flat, &q, 12, None).unwrap();
            if hits[0].score - hits[1].score >= 0.01 {
                break (q, hits);
            }
        };
        let p = aggregate_prototype(&bank, &hits, &q, 1e-4).unwrap();
        let top = &bank.entries()[hits[0].entry_id].value;
        let cos = f64::from(memprior_core::embedding::dot(&p.vector, top)).clamp(-1.0, 1.0);
        ensure!(cos.acos() <= 1e-3, "case {case}: tau->0 prototype {:.2e} rad from top-1 value", cos.acos());
        let single = aggregate_prototype(&bank, &hits[..1], &q, 0.07).unwrap();
        ensure!(single.neighbors[0].weight == 1.0, "case {case}: single-hit weight not 1");
        let want = l2_normalize(top).unwrap();
        ensure!(
            single.vector.iter().zip(want.iter()).all(|(a, b)| (a - b).abs() <= 1e-6),
            "case {case}: single-hit prototype differs from its value"
        );
    }
    Ok("200 cases: simplex, order, shift invariance, tau->0 top-1, single-hit identity".into())
}

fn trial_recovers(noise: f32, planted: usize, seed: u64) -> bool {
    let spec = ScenarioSpec { noise, seed, ..Default::default() }
        .with_random_regions(planted, 6.0)
        .unwrap();
    let data = gen_synthetic(&spec).unwrap();
    let cfg = PipelineConfig::default();
    let bank = build_bank(data.records.clone(), &data.provider, &cfg.build_config(BTreeSet::new())).unwrap();
    let cats: Vec<String> = spec.planted.iter().map(|p| p.category.clone()).collect::<BTreeSet<_>>().into_iter().collect();
    let out = scenario_run(&data, &bank, &cfg, &cats);
    let cell = 1.0 / spec.height.max(spec.width) as f64;
    spec.planted.iter().all(|p| {
        let center = Point2D::cell_center(p.row, p.col, spec.height, spec.width);
        out.categories
            .iter()
            .find(|c| c.category == p.category)
            .is_some_and(|c| c.anchors.anchors.iter().any(|a| a.point.distance(&center) <= 1.5 * cell))
    })
}

/// Anchors land on planted regions in synthetic scenes.
fn prior_recovery() -> Outcome {
    let mut rates = Vec::new();
    for (noise, need) in [(0.0f32, 1.0), (0.05, 0.95)] {
        let ok = (0..100u64).filter(|&t| trial_recovers(noise, 1 + (t % 5) as usize, 500 + t)).count();
        let rate = ok as f64 / 100.0;
        ensure!(rate >= need, "noise {noise}: {ok}/100 trials recovered every center (need {need})");
        rates.push(format!("noise {noise}: {ok}/100"));
    }
    Ok(rates.join(", "))
}

/// Independent peak enumeration and greedy suppression.
fn oracle_anchors(map: &ScalarMap, threshold: f32, radius: f64, max: usize) -> Vec<Anchor> {
    let (h, w) = (map.height(), map.width());
    let mut peaks = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let v = map.get(r, c);
            let mut peak = v >= threshold;
            for (nr, nc) in [
                (r.wrapping_sub(1), c.wrapping_sub(1)), (r.wrapping_sub(1), c), (r.wrapping_sub(1), c + 1),
                (r, c.wrapping_sub(1)), (r, c + 1),
                (r + 1, c.wrapping_sub(1)), (r + 1, c), (r + 1, c + 1),
            ] {
                if nr < h && nc < w && map.get(nr, nc) > v {
                    peak = false;
                }
            }
            if peak {
                peaks.push((v, r, c));
            }
        }
    }
    peaks.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then((a.1, a.2).cmp(&(b.1, b.2))));
    let center = |r: usize, c: usize| {
        (((c as f64 + 0.5) / w as f64) as f32, ((r as f64 + 0.5) / h as f64) as f32)
    };
    let mut kept: Vec<Anchor> = Vec::new();
    for (v, r, c) in peaks {
        if kept.len() == max {
            break;
        }
        let (x, y) = center(r, c);
        let clear = kept.iter().all(|a| {
            let (dx, dy) = (f64::from(a.point.x) - f64::from(x), f64::from(a.point.y) - f64::from(y));
            (dx * dx + dy * dy).sqrt() >= radius
        });
        if clear {
            kept.push(Anchor { point: Point2D { x, y }, response: v });
        }
    }
    kept
}

fn peak_oracle() -> Outcome {
    let mut r = rng(6);
    let mut total = 0;
    for case in 0..500 {
        let (h, w) = (r.random_range(1..25), r.random_range(1..25));
        let levels = r.random_range(0..6u32);
        let mut data: Vec<f32> = (0..h * w).map(|_| r.random::<f32>()).collect();
        if levels > 0 {
            // Coarse quantization creates plateaus and exact ties.
            data.iter_mut().for_each(|x| *x = (*x * levels as f32).round() / levels as f32);
        }
        let mut map = ScalarMap::new(h, w, data).unwrap();
        if r.random_bool(0.5) {
            map = gaussian_smooth(&map, r.random_range(0.5..2.0)).unwrap();
        }
        let threshold = r.random_range(0.0f32..1.0);
        let radius = r.random_range(0.5..5.0) / h.max(w) as f64;
        let max = r.random_range(1..15);
        let prior = DensePrior { category: "c".into(), heatmap: map.clone(), sigma: 0.0 };
        let got = extract_anchors(&prior, threshold, radius, max).unwrap().anchors;
        let want = oracle_anchors(&map, threshold, radius, max);
        ensure!(got == want, "case {case} ({h}x{w}): {} anchors vs oracle {}", got.len(), want.len());
        total += got.len();
    }
    Ok(format!("500 heatmaps match the exhaustive oracle ({total} anchors)"))
}

/// Zero projections make prompts independent of the memory.
fn baseline_reduction() -> Outcome {
    let spec = ScenarioSpec { noise: 0.05, seed: 21, ..Default::default() }
        .with_random_regions(3, 6.0)
        .unwrap();
    let data = gen_synthetic(&spec).unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.refine.init = ParamInit::Zero;
    cfg.refine.scales = vec![1, 2];
    let build = cfg.build_config(BTreeSet::new());

    let a = build_bank(data.records.clone(), &data.provider, &build).unwrap();
    let alt = gen_synthetic(&ScenarioSpec { entries_per_category: 4, distractors: 60, ..spec.clone() }).unwrap();
    let b = build_bank(alt.records.clone(), &alt.provider, &build).unwrap();
    let mut r = rng(8);
    let shuffled: Vec<MemoryEntry> = a
        .entries()
        .iter()
        .map(|e| MemoryEntry { value: Vector::new(unit(&mut r, a.d_val)).unwrap(), ..e.clone() })
        .collect();
    let c = MemoryBank::new(a.d_key, a.d_val, a.weights, a.manifest.clone(), shuffled).unwrap();

    let p = default_params(&cfg, a.d_val);
    let e = &p.sets[0];
    let base = layer_norm(&e.e, &e.ln_gain, &e.ln_bias, e.ln_eps).unwrap();
    let mut counts = Vec::new();
    for (name, bank) in [("planted", &a), ("resized", &b), ("random-values", &c)] {
        let out = scenario_run(&data, bank, &cfg, &data.meta.categories);
        let prompts: Vec<_> = out.prompts().collect();
        ensure!(!prompts.is_empty(), "bank {name}: no prompts produced");
        for pr in &prompts {
            let same = pr.embedding.iter().zip(base.iter()).all(|(x, y)| x.to_bits() == y.to_bits());
            ensure!(same, "bank {name}: prompt differs from layer_norm(e)");
        }
        counts.push(format!("{name}: {}", prompts.len()));
    }
    Ok(format!("all prompts bit-identical to layer_norm(e) ({})", counts.join(", ")))
}

fn mask_correctness() -> Outcome {
    let mut r = rng(9);
    let mut constrained = 0;
    for case in 0..200 {
        let (rows, cols) = (r.random_range(1..20), r.random_range(1..10));
        let values: Vec<f32> = (0..rows * cols).map(|_| StandardNormal.sample(&mut r)).collect();
        let m = LogitsMatrix::new(
            (0..rows).map(|i| format!("p{i}")).collect(),
            (0..cols).map(|j| format!("c{j}")).collect(),
            values,
        )
        .unwrap();
        let sources: Vec<PromptSource> = (0..rows)
            .map(|_| {
                if r.random_bool(0.25) {
                    PromptSource::Unconstrained
                } else {
                    PromptSource::Category(format!("c{}", r.random_range(0..cols)))
                }
            })
            .collect();
        let out = constrain_logits(&m, &sources).unwrap();
        for (i, s) in sources.iter().enumerate() {
            match s {
                PromptSource::Unconstrained => {
                    let same = out.row(i).iter().zip(m.row(i)).all(|(a, b)| a.to_bits() == b.to_bits());
                    ensure!(same, "case {case}: unconstrained row {i} changed");
                }
                PromptSource::Category(c) => {
                    constrained += 1;
                    let src: usize = c[1..].parse().unwrap();
                    let finite: Vec<usize> = (0..cols).filter(|&j| out.get(i, j).is_finite()).collect();
                    ensure!(finite == vec![src], "case {case}: row {i} finite columns {finite:?}, source {src}");
                    ensure!(out.get(i, src) == m.get(i, src), "case {case}: source logit changed");
                    ensure!(
                        (0..cols).all(|j| j == src || out.get(i, j) == f32::NEG_INFINITY),
                        "case {case}: off-source entry not -inf"
                    );
                    ensure!(out.argmax(i) == Some(src), "case {case}: argmax is not the source");
                }
            }
        }
    }
    Ok(format!("200 matrices, {constrained} constrained rows masked to their source"))
}

fn numeric_micro_oracles() -> Outcome {
    let mut r = rng(10);
    // Layer norm moments.
    for case in 0..200 {
        let d = r.random_range(2..256);
        let scale = r.random_range(0.5f32..10.0);
        let offset = r.random_range(-5.0f32..5.0);
        let v: Vec<f32> = (0..d)
            .map(|_| {
                let z: f32 = StandardNormal.sample(&mut r);
                offset + scale * z
            })
            .collect();
        let out = layer_norm(&v, &vec![1.0; d], &vec![0.0; d], 1e-5).unwrap();
        let mean = out.iter().map(|&x| f64::from(x)).sum::<f64>() / d as f64;
        let var = out.iter().map(|&x| (f64::from(x) - mean).powi(2)).sum::<f64>() / d as f64;
        ensure!(mean.abs() <= 1e-6, "layer_norm case {case}: mean {mean:e}");
        ensure!((var - 1.0).abs() <= 1e-3, "layer_norm case {case}: variance {var}");
    }
    // Gaussian impulse: mass everywhere, symmetry away from the borders.
    for case in 0..200 {
        let sigma = r.random_range(0.3..3.0);
        let rad = (3.0f64 * sigma).ceil() as usize;
        let (h, w) = (r.random_range(1..40), r.random_range(1..40));
        let (ir, ic) = (r.random_range(0..h), r.random_range(0..w));
        let mut data = vec![0.0; h * w];
        data[ir * w + ic] = 1.0;
        let out = gaussian_smooth(&ScalarMap::new(h, w, data).unwrap(), sigma).unwrap();
        ensure!((out.sum() - 1.0).abs() <= 1e-5, "impulse case {case}: mass {}", out.sum());

        let (sh, sw) = (2 * rad + 1 + r.random_range(0..10), 2 * rad + 1 + r.random_range(0..10));
        let (cr, cc) = (r.random_range(rad..sh - rad), r.random_range(rad..sw - rad));
        let mut data = vec![0.0; sh * sw];
        data[cr * sw + cc] = 1.0;
        let out = gaussian_smooth(&ScalarMap::new(sh, sw, data).unwrap(), sigma).unwrap();
        for dr in -(rad as isize)..=rad as isize {
            for dc in -(rad as isize)..=rad as isize {
                let at = |a: isize, b: isize| out.get((cr as isize + a) as usize, (cc as isize + b) as usize);
                let base = at(dr, dc);
                for other in [at(-dr, -dc), at(-dr, dc), at(dc, dr)] {
                    ensure!((base - other).abs() <= 1e-5, "impulse case {case}: asymmetric at ({dr}, {dc})");
                }
            }
        }
    }
    // Bilinear sampling at cell centers returns the cell exactly.
    for case in 0..200 {
        let (h, w, d) = (r.random_range(1..20), r.random_range(1..20), r.random_range(1..9));
        let g = FeatureGrid::new(h, w, d, (0..h * w * d).map(|_| r.random_range(-10.0..10.0)).collect()).unwrap();
        let (row, col) = (r.random_range(0..h), r.random_range(0..w));
        let s = bilinear_sample(&g, &Point2D::cell_center(row, col, h, w));
        ensure!(s.as_slice() == g.cell(row, col), "bilinear case {case}: not exact at ({row}, {col})");
    }
    // Laplacian variance against an explicit 3x3 convolution.
    for case in 0..200 {
        let (h, w) = (r.random_range(3..30), r.random_range(3..30));
        let data: Vec<f32> = (0..h * w).map(|_| r.random()).collect();
        let px = |y: usize, x: usize| f64::from(data[y * w + x]);
        let kernel = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
        let mut resp = Vec::new();
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut s = 0.0;
                for (ky, row) in kernel.iter().enumerate() {
                    for (kx, k) in row.iter().enumerate() {
                        s += k * px(y + ky - 1, x + kx - 1);
                    }
                }
                resp.push(s);
            }
        }
        let mean = resp.iter().sum::<f64>() / resp.len() as f64;
        let want = resp.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / resp.len() as f64;
        let got = laplacian_variance(&ScalarMap::new(h, w, data.clone()).unwrap()).unwrap();
        ensure!((got - want).abs() <= 1e-6, "laplacian case {case}: {got} vs {want}");
    }
    Ok("200 cases each: layer_norm moments, impulse mass/symmetry, bilinear exactness, Laplacian variance".into())
}

fn expect_format_error<T>(what: &str, res: std::thread::Result<memprior_core::Result<T>>) -> Result<(), String> {
    match res {
        Err(_) => Err(format!("{what}: decoder panicked")),
        Ok(Ok(_)) => Err(format!("{what}: corrupt input accepted")),
        Ok(Err(Error::Format { .. })) => Ok(()),
        Ok(Err(e)) => Err(format!("{what}: expected a format error, got {e}")),
    }
}

/// Decoding never panics; any failure is a format error.
fn fuzz_header<T>(name: &str, bytes: &[u8], decode: impl Fn(&[u8]) -> memprior_core::Result<T>) -> Result<(), String> {
    for cut in 0..bytes.len().min(200) {
        expect_format_error(&format!("{name} truncated to {cut}"), catch_unwind(AssertUnwindSafe(|| decode(&bytes[..cut]))))?;
    }
    for pos in 0..8 {
        let mut bad = bytes.to_vec();
        bad[pos] ^= 0xFF;
        expect_format_error(&format!("{name} byte {pos} flipped"), catch_unwind(AssertUnwindSafe(|| decode(&bad))))?;
    }
    for pos in 8..bytes.len().min(128) {
        let mut bad = bytes.to_vec();
        bad[pos] ^= 0xFF;
        match catch_unwind(AssertUnwindSafe(|| decode(&bad))) {
            Err(_) => return Err(format!("{name}: decoder panicked with byte {pos} flipped")),
            Ok(Err(Error::Format { .. })) | Ok(Ok(_)) => {}
            Ok(Err(e)) => return Err(format!("{name} byte {pos} flipped: non-format error {e}")),
        }
    }
    let mut long = bytes.to_vec();
    long.push(0);
    expect_format_error(&format!("{name} with trailing byte"), catch_unwind(AssertUnwindSafe(|| decode(&long))))
}

fn persistence() -> Outcome {
    let data = gen_synthetic(&ScenarioSpec::default()).unwrap();
    let cfg = PipelineConfig::default();
    let bank = build_bank(data.records.clone(), &data.provider, &cfg.build_config(BTreeSet::new())).unwrap();
    let bytes = encode_bank(&bank);
    let back = decode_bank(&bytes).map_err(|e| e.to_string())?;
    ensure!(back == bank, "bank differs after decode");
    ensure!(encode_bank(&back) == bytes, "bank bytes differ after round trip");

    let stride = entry_stride(bank.d_key, bank.d_val);
    ensure!(stride == 4 * (bank.d_key + bank.d_val) + ENTRY_META_BYTES, "stride {stride}");
    // A copy of an existing entry adds no new strings, so it costs exactly one stride.
    let without = bank.clone();
    let mut entries = bank.entries().to_vec();
    entries.push(entries[0].clone());
    let with = MemoryBank::new(bank.d_key, bank.d_val, bank.weights, bank.manifest.clone(), entries).unwrap();
    let diff = encode_bank(&with).len() - encode_bank(&without).len();
    ensure!(diff == stride, "one entry adds {diff} bytes, stride is {stride}");

    let keys = keys_of(&bank);
    let idx = indexed(&keys, bank.d_key, IvfPqParams { nlist: 4, m: 4, nbits: 4, kmeans_iters: 5, seed: 3 });
    let ib = encode_index(&idx);
    let iback = decode_index(&ib).map_err(|e| e.to_string())?;
    ensure!(encode_index(&iback) == ib, "index bytes differ after round trip");
    let q = &bank.entries()[0].key;
    ensure!(iback.search(q, 4, 50).unwrap() == idx.search(q, 4, 50).unwrap(), "index search differs after reload");

    let params = ParamBundle {
        per_scale: true,
        sets: vec![RefinementParams::seeded(bank.d_val, 5, 1), RefinementParams::seeded(bank.d_val, 5, 2)],
    };
    let pb = encode_params(&params).unwrap();
    let pback = decode_params(&pb, 5).map_err(|e| e.to_string())?;
    ensure!(pback == params && encode_params(&pback).unwrap() == pb, "params differ after round trip");

    fuzz_header("bank", &bytes, decode_bank)?;
    fuzz_header("index", &ib, decode_index)?;
    fuzz_header("params", &pb, |b| decode_params(b, 5))?;
    Ok(format!("bank/index/params round-trip bit-exactly; stride {stride} B; corrupted headers rejected"))
}

fn thousand_records(seed: u64) -> (Vec<GroundingRecord>, memprior_core::memory::EmbeddingProvider) {
    let spec = ScenarioSpec { entries_per_category: 180, distractors: 90, noise: 0.05, seed, ..Default::default() };
    let data = gen_synthetic(&spec).unwrap();
    let mut recs = data.records;
    // Exact duplicates and tiny boxes exercise the other filters.
    let dups: Vec<GroundingRecord> = recs.iter().step_by(150).take(6).cloned().collect();
    recs.extend(dups);
    for i in 0..4 {
        let mut tiny = recs[i].clone();
        tiny.bbox = memprior_core::embedding::Box2D::new(0.5, 0.5, 0.505, 0.505).unwrap();
        recs.push(tiny);
    }
    assert_eq!(recs.len(), 1000);
    (recs, data.provider)
}

fn build_reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let cfg = PipelineConfig::default();
    let exclude: BTreeSet<String> = ["distractor-0".to_string()].into();
    let mut files = Vec::new();
    let mut manifest = None;
    for run in 0..2 {
        let (recs, provider) = thousand_records(77);
        let bank = build_bank(recs, &provider, &BuildConfig { ..cfg.build_config(exclude.clone()) }).unwrap();
        let path = dir.path().join(format!("run{run}.pbnk"));
        memprior_core::memory::save_bank(&bank, &path).unwrap();
        files.push(std::fs::read(&path).unwrap());
        manifest = Some(bank.manifest.clone());
    }
    let m = manifest.unwrap();
    ensure!(files[0] == files[1], "bank files differ between runs");
    ensure!(m.balances(), "manifest does not balance: {m:?}");
    ensure!(m.input_count == 1000, "input count {}", m.input_count);
    let after_dedup = m.input_count - m.removed_excluded - m.removed_small - m.removed_duplicates;
    ensure!(m.removed_blur == after_dedup / 10, "blur removed {} of {after_dedup}", m.removed_blur);
    ensure!(
        m.removed_excluded > 0 && m.removed_small > 0 && m.removed_duplicates > 0 && m.removed_blur > 0,
        "every filter should fire: {m:?}"
    );
    Ok(format!(
        "identical {} B files; {} = {} + {} excluded + {} small + {} duplicate + {} blur",
        files[0].len(), m.input_count, m.output_count, m.removed_excluded, m.removed_small, m.removed_duplicates, m.removed_blur
    ))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("oracle equivalence (index)", oracle_equivalence),
        ("approximate recall", approximate_recall),
        ("default constants", default_constants),
        ("softmax / prototype suite", softmax_suite),
        ("prior recovery", prior_recovery),
        ("peak-extraction oracle", peak_oracle),
        ("baseline reduction", baseline_reduction),
        ("mask correctness", mask_correctness),
        ("numeric micro-oracles", numeric_micro_oracles),
        ("persistence", persistence),
        ("build reproducibility", build_reproducibility),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filter.is_empty() && !filter.iter().any(|p| name.contains(p.as_str())) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS [{:>2}] {name}: {detail} ({secs:.1} s)", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL [{:>2}] {name}: {why} ({secs:.1} s)", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}

use std::collections::{BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde::Serialize;

use memprior_core::ann::{load_index, save_index, train_ivfpq};
use memprior_core::embedding::Vector;
use memprior_core::memory::{
    build_bank, encode_grids, encode_table, load_bank, read_grids, read_records, read_table,
    save_bank, write_records, EmbeddingProvider, MemoryBank,
};
use memprior_core::pipeline::{
    bench, category_head, default_params, gen_synthetic, run_pipeline, BenchSettings, ImageRequest,
    ParamInit, PipelineConfig, PipelineContext, PipelineReport, ScenarioSpec, TraceEntry,
};
use memprior_core::priors::{
    dense_prior, encode_heatmap, extract_anchors, load_heatmap, read_anchors, write_anchors,
    DensePrior,
};
use memprior_core::memory::encode_pgm;
use memprior_core::refine::{
    encode_params, encode_prompts, load_params, prompt_meta, refine_all, MemoryGuidedPrompt,
    ParamBundle, RefinementParams,
};
use memprior_core::retrieval::{aggregate_prototype, build_query, retrieve, RetrievalIndex};
use memprior_core::write_atomic;

use crate::args::{Cli, Command, ConfigArgs, InitArg, ProviderArgs, QueryArgs, SearchArgs};
use crate::UsageError;

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// File config (if any) with every given flag applied on top.
pub fn effective_config(a: &ConfigArgs) -> Result<PipelineConfig> {
    let mut c = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .with_context(|| format!("reading config {}", p.display()))?;
            toml_config(&text).map_err(|e| usage(format!("{}: {e}", p.display())))?
        }
        None => PipelineConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $($field:ident).+),* $(,)?) => {
            $(if let Some(v) = a.$flag.clone() { c.$($field).+ = v; })*
        };
    }
    set!(
        seed => seed.root,
        w_p => memory.w_p, w_s => memory.w_s, w_g => memory.w_g,
        min_area => memory.min_area, iou_threshold => memory.iou_threshold,
        drop_fraction => memory.drop_fraction,
        k => retrieval.k, tau => retrieval.tau, recall_size => retrieval.recall_size,
        nlist => index.nlist, m => index.m, nbits => index.nbits, nprobe => index.nprobe,
        kmeans_iters => index.kmeans_iters,
        sigma => priors.sigma, threshold => priors.threshold,
        radius_cells => priors.radius_cells, max_anchors => priors.max_anchors,
        window => refine.window, scales => refine.scales,
    );
    if a.normalized_dense {
        c.refine.normalized_dense = true;
    }
    if let Some(init) = a.init {
        c.refine.init = match init {
            InitArg::Zero => ParamInit::Zero,
            InitArg::Seeded => ParamInit::Seeded,
        };
    }
    c.validate().map_err(|e| usage(e.to_string()))?;
    Ok(c)
}

fn toml_config(text: &str) -> Result<PipelineConfig> {
    Ok(PipelineConfig::from_toml(text)?)
}

fn load_provider(p: &ProviderArgs) -> Result<EmbeddingProvider> {
    EmbeddingProvider::from_files(Some(&p.text), Some(&p.image), Some(&p.features), None)
        .context("loading embedding tables")
}

fn load_search(s: &SearchArgs, cfg: &PipelineConfig) -> Result<(MemoryBank, RetrievalIndex)> {
    let bank = load_bank(&s.bank).with_context(|| format!("loading bank {}", s.bank.display()))?;
    let index = match &s.index {
        Some(p) => RetrievalIndex::IvfPq {
            index: load_index(p).with_context(|| format!("loading index {}", p.display()))?,
            nprobe: cfg.index.nprobe,
            recall_size: cfg.retrieval.recall_size,
        },
        None => RetrievalIndex::flat(&bank),
    };
    Ok((bank, index))
}

fn categories(q: &QueryArgs) -> Result<Vec<String>> {
    let mut out = q.categories.clone();
    if let Some(p) = &q.categories_file {
        let text = std::fs::read_to_string(p)
            .with_context(|| format!("reading categories {}", p.display()))?;
        out.extend(text.lines().map(str::trim).filter(|l| !l.is_empty()).map(String::from));
    }
    if out.is_empty() {
        return Err(usage("no categories given (use --category or --categories-file)"));
    }
    Ok(out)
}

fn emit(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => write_atomic(p, text.as_bytes()).with_context(|| format!("writing {}", p.display())),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn sidecar(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn write_prompts(path: &Path, prompts: &[MemoryGuidedPrompt], dim: usize) -> Result<()> {
    write_atomic(path, &encode_prompts(prompts, dim)?)?;
    let meta = serde_json::to_string_pretty(&prompt_meta(prompts))?;
    write_atomic(&sidecar(path), meta.as_bytes())?;
    Ok(())
}

fn file_stem(category: &str) -> String {
    category
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn load_param_bundle(path: Option<&Path>, cfg: &PipelineConfig, dim: usize) -> Result<ParamBundle> {
    match path {
        Some(p) => {
            let b = load_params(p, cfg.refine.window)
                .with_context(|| format!("loading parameters {}", p.display()))?;
            if b.dim() != dim {
                anyhow::bail!(
                    "parameter dimension {} does not match feature dimension {dim}",
                    b.dim()
                );
            }
            Ok(b)
        }
        None => Ok(default_params(cfg, dim)),
    }
}

#[derive(Serialize)]
struct RetrievalOut {
    category: String,
    hits: Vec<TraceEntry>,
}

pub fn run(cli: Cli) -> Result<()> {
    let cfg = effective_config(&cli.config)?;
    match cli.command {
        Command::BuildMemory {
            records,
            provider,
            exclude_image,
            out,
        } => {
            let provider = load_provider(&provider)?;
            let recs = read_records(&records)
                .with_context(|| format!("reading records {}", records.display()))?;
            let excluded: BTreeSet<String> = exclude_image.into_iter().collect();
            let bank = build_bank(recs, &provider, &cfg.build_config(excluded))?;
            save_bank(&bank, &out).with_context(|| format!("writing {}", out.display()))?;
            println!("{}", serde_json::to_string_pretty(&bank.manifest)?);
        }
        Command::BuildIndex { bank, out } => {
            let bank = load_bank(&bank).with_context(|| format!("loading bank {}", bank.display()))?;
            let keys: Vec<f32> = bank.entries().iter().flat_map(|e| e.key.iter().copied()).collect();
            let mut index = train_ivfpq(&keys, bank.d_key, cfg.ivf_params())?;
            index.add(&(0..bank.len()).collect::<Vec<_>>(), &keys)?;
            save_index(&index, &out).with_context(|| format!("writing {}", out.display()))?;
        }
        Command::Retrieve {
            search,
            provider,
            query,
            out,
        } => {
            let cats = categories(&query)?;
            let provider = load_provider(&provider)?;
            let (bank, index) = load_search(&search, &cfg)?;
            let exclude = query.exclude_self.then_some(query.image_id.as_str());
            let mut results = Vec::new();
            for c in cats {
                let q = build_query(&provider, &c, &query.scene, &query.image_id, &cfg.key_weights())?;
                let hits = retrieve(&bank, &index, &q, cfg.retrieval.k, exclude)?;
                let proto = aggregate_prototype(&bank, &hits, &q, cfg.retrieval.tau)?;
                let hits = proto
                    .neighbors
                    .iter()
                    .map(|n| {
                        let e = &bank.entries()[n.entry_id];
                        TraceEntry {
                            entry_id: n.entry_id,
                            category: e.category.clone(),
                            image_id: e.meta.image_id.clone(),
                            score: n.key_score,
                            alpha: n.weight,
                        }
                    })
                    .collect();
                results.push(RetrievalOut { category: c, hits });
            }
            emit(out.as_deref(), &serde_json::to_string_pretty(&results)?)?;
        }
        Command::Priors {
            search,
            provider,
            query,
            out_dir,
        } => {
            let cats = categories(&query)?;
            let provider = load_provider(&provider)?;
            let (bank, index) = load_search(&search, &cfg)?;
            let grid = provider.features(&query.image_id)?;
            let exclude = query.exclude_self.then_some(query.image_id.as_str());
            let ap = cfg.anchor_params();
            let radius = ap.radius_normalized(grid.height(), grid.width());
            std::fs::create_dir_all(&out_dir)?;
            let mut anchor_text = Vec::new();
            for c in &cats {
                let q = build_query(&provider, c, &query.scene, &query.image_id, &cfg.key_weights())?;
                let hits = retrieve(&bank, &index, &q, cfg.retrieval.k, exclude)?;
                let proto = aggregate_prototype(&bank, &hits, &q, cfg.retrieval.tau)?;
                let prior = dense_prior(grid, &proto, cfg.priors.sigma)?;
                let stem = file_stem(c);
                write_atomic(&out_dir.join(format!("{stem}.phmp")), &encode_heatmap(&prior.heatmap))?;
                write_atomic(&out_dir.join(format!("{stem}.pgm")), &encode_pgm(&prior.heatmap))?;
                if !proto.is_empty() {
                    let anchors = extract_anchors(&prior, ap.threshold, radius, ap.max_anchors)?;
                    write_anchors(&mut anchor_text, &anchors)?;
                }
            }
            write_atomic(&out_dir.join("anchors.ndjson"), &anchor_text)?;
        }
        Command::Refine {
            features,
            image_id,
            heatmap,
            anchors,
            category,
            params,
            out,
        } => {
            let grids = read_grids(&features)
                .with_context(|| format!("reading features {}", features.display()))?;
            let grid = grids
                .into_iter()
                .find(|(n, _)| *n == image_id)
                .map(|(_, g)| g)
                .ok_or_else(|| anyhow::anyhow!("no feature grid for image {image_id:?}"))?;
            let map = load_heatmap(&heatmap)
                .with_context(|| format!("reading heatmap {}", heatmap.display()))?;
            let text = std::fs::read_to_string(&anchors)
                .with_context(|| format!("reading anchors {}", anchors.display()))?;
            let sets = read_anchors(&text)?;
            let set = match &category {
                Some(c) => sets
                    .into_iter()
                    .find(|s| s.category == *c)
                    .unwrap_or(memprior_core::priors::AnchorSet {
                        category: c.clone(),
                        anchors: vec![],
                    }),
                None if sets.len() == 1 => sets.into_iter().next().unwrap(),
                None if sets.is_empty() => {
                    return Err(usage("anchor file is empty; pass --category to name the output"))
                }
                None => return Err(usage("anchor file holds several categories; pass --category")),
            };
            let prior = DensePrior {
                category: set.category.clone(),
                heatmap: map,
                sigma: cfg.priors.sigma,
            };
            let scales = cfg
                .refine
                .scales
                .iter()
                .map(|&f| memprior_core::pipeline::pool_grid(&grid, f))
                .collect::<memprior_core::Result<Vec<_>>>()?;
            let bundle = load_param_bundle(params.as_deref(), &cfg, grid.dim())?;
            let prompts = refine_all(
                &scales,
                &prior,
                &set,
                &bundle,
                &set.category,
                cfg.refine.normalized_dense,
            )?;
            write_prompts(&out, &prompts, grid.dim())?;
        }
        Command::Pipeline {
            search,
            provider,
            query,
            params,
            head,
            out,
            prompts_out,
        } => {
            let cats = categories(&query)?;
            let provider = load_provider(&provider)?;
            let (bank, index) = load_search(&search, &cfg)?;
            let dim = bank.d_val;
            let bundle = load_param_bundle(params.as_deref(), &cfg, dim)?;
            let head: HashMap<String, Vector> = match &head {
                Some(p) => read_table(p)
                    .with_context(|| format!("reading head {}", p.display()))?
                    .into_iter()
                    .collect(),
                None => category_head(&cats, dim, cfg.stage_seed("head")),
            };
            let ctx = PipelineContext {
                config: &cfg,
                bank: &bank,
                index: &index,
                provider: &provider,
                params: &bundle,
                head: &head,
            };
            let req = ImageRequest {
                image_id: query.image_id.clone(),
                scene: query.scene.clone(),
                categories: cats,
                exclude_self: query.exclude_self,
            };
            let output = run_pipeline(&ctx, &req)?;
            if let Some(p) = &prompts_out {
                let prompts: Vec<MemoryGuidedPrompt> = output.prompts().cloned().collect();
                write_prompts(p, &prompts, dim)?;
            }
            emit(out.as_deref(), &PipelineReport::new(&cfg, &bank, &output).to_json())?;
        }
        Command::GenSynthetic {
            out_dir,
            spec,
            planted,
            noise,
            scenario_seed,
        } => {
            let mut s: ScenarioSpec = match &spec {
                Some(p) => {
                    let text = std::fs::read_to_string(p)
                        .with_context(|| format!("reading spec {}", p.display()))?;
                    serde_json::from_str(&text)
                        .map_err(|e| usage(format!("{}: {e}", p.display())))?
                }
                None => ScenarioSpec::default(),
            };
            if let Some(n) = noise {
                s.noise = n;
            }
            if let Some(seed) = scenario_seed {
                s.seed = seed;
            }
            if let Some(n) = planted {
                s = s.with_random_regions(n, 6.0).map_err(|e| usage(e.to_string()))?;
            }
            s.validate().map_err(|e| usage(e.to_string()))?;
            let data = gen_synthetic(&s)?;
            write_scenario(&out_dir, &data)?;
        }
        Command::Bench {
            bank,
            index,
            queries,
            repetitions,
            query_noise,
            out,
        } => {
            let bank = load_bank(&bank).with_context(|| format!("loading bank {}", bank.display()))?;
            let index = load_index(&index).with_context(|| format!("loading index {}", index.display()))?;
            let settings = BenchSettings {
                query_count: queries,
                k: cfg.retrieval.k,
                nprobe: cfg.index.nprobe,
                recall_size: cfg.retrieval.recall_size,
                query_noise,
                repetitions,
                seed: cfg.stage_seed("bench"),
            };
            let report = bench(&bank, &index, &settings)?;
            emit(out.as_deref(), &serde_json::to_string_pretty(&report)?)?;
        }
        Command::InitParams { dim, per_scale, out } => {
            if dim == 0 {
                return Err(usage("--dim must be positive"));
            }
            let base = cfg.stage_seed("refine-params");
            let make = |seed: u64| match cfg.refine.init {
                ParamInit::Zero => RefinementParams::zero_init(dim, cfg.refine.window, seed),
                ParamInit::Seeded => RefinementParams::seeded(dim, cfg.refine.window, seed),
            };
            let bundle = match per_scale {
                Some(0) => return Err(usage("--per-scale must be positive")),
                Some(n) => ParamBundle {
                    per_scale: true,
                    sets: (0..n as u64).map(|i| make(base.wrapping_add(i))).collect(),
                },
                None => ParamBundle::shared(make(base)),
            };
            write_atomic(&out, &encode_params(&bundle)?)?;
        }
        Command::Config => print!("{}", cfg.to_toml()),
    }
    Ok(())
}

fn write_scenario(dir: &Path, data: &memprior_core::pipeline::SyntheticData) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let p = &data.provider;
    let sorted = |t: &HashMap<String, Vector>| {
        let mut rows: Vec<(String, Vector)> = t.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        rows.sort_by(|a, b| a.0.cmp(&b.0));
        rows
    };
    let key_dim = p.key_dim().unwrap_or(0);
    for (name, table) in [("text.pmem", p.text_table()), ("image.pmem", p.image_table())] {
        let rows = sorted(table);
        let refs: Vec<(&str, &Vector)> = rows.iter().map(|(k, v)| (k.as_str(), v)).collect();
        write_atomic(&dir.join(name), &encode_table(key_dim, &refs)?)?;
    }
    let mut grids: Vec<(&str, _)> = p.feature_table().iter().map(|(k, g)| (k.as_str(), g)).collect();
    grids.sort_by(|a, b| a.0.cmp(b.0));
    write_atomic(
        &dir.join("features.pgrd"),
        &encode_grids(p.val_dim().unwrap_or(0), &grids)?,
    )?;
    let mut records = Vec::new();
    write_records(&mut records, &data.record_lines())?;
    write_atomic(&dir.join("records.ndjson"), &records)?;
    write_atomic(
        &dir.join("scenario.json"),
        serde_json::to_string_pretty(&data.meta)?.as_bytes(),
    )?;
    Ok(())
}

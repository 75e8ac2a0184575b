//! The pipeline stages behind each subcommand. Every stage reads its inputs
//! from the run directory and writes its artifacts there atomically.

use std::collections::hash_map::DefaultHasher;
use std::fmt::Write as _;
use std::hash::{Hash, Hasher};
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use micro_core::ann::{ann_encode_items, ann_retrieve_or_fallback, AnnIndex};
use micro_core::embed::{train_embeddings, EmbedConfig, EmbeddingTable};
use micro_core::eval::{aggregate, build_queries, MetricsReport, QueryMetrics, QuerySet};
use micro_core::graph::{load_edge_list, ChunkSlice, EngagementGraph, GraphStats, SplitSpec};
use micro_core::init::{build_init, mle_mixture, InitArtifact};
use micro_core::io::{load_versioned, save_versioned, write_atomic};
use micro_core::kmeans::{cluster_items, ClusterAssignment};
use micro_core::retrieval::{
    build_index, popularity_retrieve, retrieve_micro, retrieve_mle, CandidateList, PopularityIndex, Query,
    RetrievalConfig, SeenItems,
};
use micro_core::sampler::{fit_chunk_with_base, ChunkModel, SamplerConfig, UserCountMode};
use micro_core::synth::{generate, PhiLayout};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{Method, RunConfig};

const FORMAT_VERSION: u32 = 1;

/// File locations inside a run directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn graph(&self) -> PathBuf {
        self.root.join("graph.bin")
    }

    pub fn graph_stats(&self) -> PathBuf {
        self.root.join("graph_stats.txt")
    }

    pub fn embeddings(&self) -> PathBuf {
        self.root.join("embeddings.bin")
    }

    pub fn embed_loss(&self) -> PathBuf {
        self.root.join("embed_loss.tsv")
    }

    pub fn clusters(&self) -> PathBuf {
        self.root.join("clusters.bin")
    }

    pub fn clusters_text(&self) -> PathBuf {
        self.root.join("clusters.tsv")
    }

    pub fn init(&self) -> PathBuf {
        self.root.join("init.bin")
    }

    pub fn chunk_model(&self, chunk: u32) -> PathBuf {
        self.root.join("chunks").join(format!("model_{chunk}.bin"))
    }

    pub fn chunk_diagnostics(&self, chunk: u32) -> PathBuf {
        self.root.join("chunks").join(format!("diagnostics_{chunk}.tsv"))
    }

    pub fn metrics(&self, method: Method, m: usize) -> PathBuf {
        self.root.join("metrics").join(format!("{method}_M{m}.tsv"))
    }

    pub fn candidates(&self, method: Method, m: usize, chunk: u32) -> PathBuf {
        self.root
            .join("candidates")
            .join(format!("{method}_M{m}_chunk{chunk}.tsv"))
    }

    pub fn report_dir(&self) -> PathBuf {
        self.root.join("report")
    }
}

fn missing(path: &Path, what: &str, subcommand: &str) -> anyhow::Error {
    anyhow::anyhow!(
        "{what} not found at {}; run `micro {subcommand}` first (or pass --build-missing to backtest)",
        path.display()
    )
}

pub fn load_graph(layout: &Layout) -> Result<EngagementGraph> {
    let path = layout.graph();
    if !path.exists() {
        return Err(missing(&path, "ingested graph", "ingest"));
    }
    Ok(load_versioned(&path, "graph", FORMAT_VERSION)?)
}

pub fn load_embeddings(layout: &Layout) -> Result<EmbeddingTable> {
    let path = layout.embeddings();
    if !path.exists() {
        return Err(missing(&path, "embeddings", "embed"));
    }
    Ok(load_versioned(&path, "embeddings", FORMAT_VERSION)?)
}

pub fn load_clusters(layout: &Layout) -> Result<ClusterAssignment> {
    let path = layout.clusters();
    if !path.exists() {
        return Err(missing(&path, "interest clusters", "cluster"));
    }
    Ok(load_versioned(&path, "clusters", FORMAT_VERSION)?)
}

pub fn load_init(layout: &Layout) -> Result<InitArtifact> {
    let path = layout.init();
    if !path.exists() {
        return Err(missing(&path, "init artifact", "init"));
    }
    Ok(InitArtifact::load(&path)?)
}

/// Train graph and held-out chunk slices under the configured split.
pub fn split(cfg: &RunConfig, graph: &EngagementGraph) -> Result<(EngagementGraph, Vec<ChunkSlice>)> {
    let factor = cfg.split.regroup_factor;
    let total = graph.num_chunks().div_ceil(factor);
    let spec = SplitSpec::last_n(total, cfg.split.test_chunks, factor)?;
    Ok(graph.split(&spec)?)
}

pub fn ingest(cfg: &RunConfig) -> Result<GraphStats> {
    let layout = Layout::new(&cfg.output_dir);
    let path = &cfg.dataset.path;
    if !path.exists() {
        bail!("dataset {} does not exist", path.display());
    }
    let mut graph = load_edge_list(path, cfg.dataset.delimiter()?)?;
    log::info!("progress stage=ingest edges={} file={}", graph.edge_count(), path.display());
    if let Some(filter) = cfg.dataset.degree_filter() {
        graph = graph.filter_degrees(&filter)?;
        log::info!("progress stage=ingest filtered_edges={}", graph.edge_count());
    }
    if cfg.dataset.subsample_users < 1.0 {
        graph = graph.subsample_users(cfg.dataset.subsample_users, cfg.seed)?;
        log::info!("progress stage=ingest subsampled_edges={}", graph.edge_count());
    }
    // fail early on a split that cannot work
    split(cfg, &graph)?;
    let stats = graph.stats();
    save_versioned(layout.graph(), "graph", FORMAT_VERSION, &graph)?;
    write_atomic(layout.graph_stats(), format!("{stats}\n").as_bytes())?;
    Ok(stats)
}

pub fn embed(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(&cfg.output_dir);
    let graph = load_graph(&layout)?;
    let (train, _) = split(cfg, &graph)?;
    let ecfg = EmbedConfig {
        dim: cfg.embed.dim,
        epochs: cfg.embed.epochs,
        negatives: cfg.embed.negatives,
        learning_rate: cfg.embed.learning_rate as f32,
        score: cfg.embed.score,
        seed: cfg.seed,
    };
    let (table, history) = train_embeddings(&train, &ecfg)?;
    let mut loss = String::from("epoch\tloss\n");
    for (e, l) in history.iter().enumerate() {
        let _ = writeln!(loss, "{}\t{l}", e + 1);
    }
    save_versioned(layout.embeddings(), "embeddings", FORMAT_VERSION, &table)?;
    write_atomic(layout.embed_loss(), loss.as_bytes())?;
    Ok(())
}

/// Reads `item interest` lines keyed by raw item id.
fn read_labels(path: &Path, graph: &EngagementGraph, k: u32) -> Result<ClusterAssignment> {
    let file = std::fs::File::open(path).with_context(|| format!("opening labels {}", path.display()))?;
    let mut labels: Vec<Option<u32>> = vec![None; graph.num_items() as usize];
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let mut fields = line.split(|c: char| c == '\t' || c == ',' || c.is_whitespace()).filter(|s| !s.is_empty());
        let (Some(a), Some(b)) = (fields.next(), fields.next()) else {
            bail!("{}:{}: expected `item interest`", path.display(), n + 1);
        };
        let (Ok(raw), Ok(interest)) = (a.parse::<u64>(), b.parse::<u32>()) else {
            if n == 0 {
                continue; // header
            }
            bail!("{}:{}: expected `item interest`", path.display(), n + 1);
        };
        if interest >= k {
            bail!("{}:{}: interest {interest} >= K={k}", path.display(), n + 1);
        }
        if let Some(dense) = graph.item_ids().dense(raw) {
            labels[dense as usize] = Some(interest);
        }
    }
    let missing = labels.iter().filter(|l| l.is_none()).count();
    if missing > 0 {
        bail!("{} has no interest for {missing} items of the graph", path.display());
    }
    Ok(ClusterAssignment::from_labels(
        labels.into_iter().map(|l| l.expect("checked")).collect(),
        k,
    )?)
}

pub fn cluster(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(&cfg.output_dir);
    let graph = load_graph(&layout)?;
    let k = cfg.cluster.interests;
    let assignment = match &cfg.cluster.labels {
        Some(path) => read_labels(path, &graph, k)?,
        None => {
            let emb = load_embeddings(&layout)?;
            cluster_items(&emb, k, cfg.cluster.iters, cfg.seed)?
        }
    };
    let mut text = String::new();
    for (dense, &interest) in assignment.item_to_interest().iter().enumerate() {
        let _ = writeln!(text, "{}\t{interest}", graph.item_ids().raw(dense as u32));
    }
    save_versioned(layout.clusters(), "clusters", FORMAT_VERSION, &assignment)?;
    write_atomic(layout.clusters_text(), text.as_bytes())?;
    log::info!("progress stage=cluster interests={k} items={}", assignment.num_items());
    Ok(())
}

pub fn init(cfg: &RunConfig) -> Result<()> {
    let layout = Layout::new(&cfg.output_dir);
    let graph = load_graph(&layout)?;
    let clusters = load_clusters(&layout)?;
    let (train, _) = split(cfg, &graph)?;
    let init = build_init(&train, &clusters, cfg.model.alpha, cfg.model.beta)?;
    init.save(layout.init())?;
    log::info!(
        "progress stage=init users={} interests={} train_edges={}",
        init.num_users(),
        init.num_interests(),
        train.edge_count()
    );
    Ok(())
}

#[derive(Debug, Clone, Copy, Default)]
pub struct BacktestOptions {
    /// Run missing prerequisite stages instead of failing.
    pub build_missing: bool,
}

/// A fitted chunk plus the fingerprint of everything it was fitted from.
#[derive(Serialize, Deserialize)]
struct PersistedChunk {
    key: u64,
    model: ChunkModel,
}

fn fingerprint(parts: &[&dyn std::fmt::Debug]) -> u64 {
    let mut h = DefaultHasher::new();
    for p in parts {
        format!("{p:?}").hash(&mut h);
    }
    h.finish()
}

fn file_fingerprint(path: &Path) -> Result<u64> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let mut h = DefaultHasher::new();
    bytes.hash(&mut h);
    Ok(h.finish())
}

fn sampler_config(cfg: &RunConfig) -> SamplerConfig {
    SamplerConfig {
        max_sweeps: cfg.sampler.max_sweeps,
        convergence_tol: cfg.sampler.convergence_tol,
        seed: cfg.seed,
        user_count_mode: cfg.sampler.user_count_mode,
        ..Default::default()
    }
}

fn retrieval_config(cfg: &RunConfig, m: usize) -> RetrievalConfig {
    RetrievalConfig {
        m,
        truncation: cfg.retrieval.truncation,
        exclude_seen: cfg.retrieval.exclude_seen,
        cold_user_policy: cfg.retrieval.cold_user_policy,
        ann: cfg.retrieval.ann,
    }
}

fn ensure_prerequisites(cfg: &RunConfig, layout: &Layout, methods: &[Method]) -> Result<()> {
    if !layout.graph().exists() {
        ingest(cfg)?;
    }
    let needs_emb = methods.contains(&Method::Ann) || cfg.cluster.labels.is_none();
    if needs_emb && !layout.embeddings().exists() {
        embed(cfg)?;
    }
    if !layout.clusters().exists() {
        cluster(cfg)?;
    }
    if !layout.init().exists() {
        init(cfg)?;
    }
    Ok(())
}

/// Loads the persisted model of `slice` when its fingerprint matches, and
/// fits and persists it otherwise.
fn chunk_model(
    layout: &Layout,
    slice: &ChunkSlice,
    init: &InitArtifact,
    base: Arc<micro_core::init::UserInterestTable>,
    scfg: &SamplerConfig,
    key: u64,
) -> Result<ChunkModel> {
    let path = layout.chunk_model(slice.chunk());
    if path.exists() {
        match load_versioned::<PersistedChunk>(&path, "chunk-model", FORMAT_VERSION) {
            Ok(p) if p.key == key => {
                log::info!("progress stage=fit chunk={} resumed=true", slice.chunk());
                return Ok(p.model);
            }
            Ok(_) => log::warn!("{} was fitted under other settings; refitting", path.display()),
            Err(e) => log::warn!("ignoring unreadable {}: {e}", path.display()),
        }
    }
    let model = fit_chunk_with_base(slice, init, base, scfg);
    log::info!(
        "progress stage=fit chunk={} engagements={} sweeps={} converged={} log_joint={}",
        slice.chunk(),
        model.len(),
        model.sweeps(),
        model.converged(),
        model.log_joint()
    );
    save_versioned(
        &path,
        "chunk-model",
        FORMAT_VERSION,
        &PersistedChunk {
            key,
            model: model.clone(),
        },
    )?;
    write_atomic(layout.chunk_diagnostics(slice.chunk()), model.diagnostics_text().as_bytes())?;
    Ok(model)
}

/// Fits chunk `t` and retrieves for the users of chunk `t + 1`, for every
/// consecutive pair of held-out chunks. Returns one report per method and
/// cutoff, in method-then-cutoff order.
pub fn backtest(cfg: &RunConfig, opts: BacktestOptions) -> Result<Vec<MetricsReport>> {
    let layout = Layout::new(&cfg.output_dir);
    let methods = cfg.methods();
    if opts.build_missing {
        ensure_prerequisites(cfg, &layout, &methods)?;
    }
    let graph = load_graph(&layout)?;
    let init = load_init(&layout)?;
    let emb = if methods.contains(&Method::Ann) {
        Some(load_embeddings(&layout)?)
    } else {
        None
    };
    let (train, test) = split(cfg, &graph)?;
    if init.num_users() != graph.num_users() || init.num_items() != graph.num_items() {
        bail!("init artifact does not match the ingested graph; rerun `micro init`");
    }
    let mix = methods.contains(&Method::Mle).then(|| mle_mixture(&init));
    let scfg = sampler_config(cfg);
    scfg.validate()?;
    let init_key = file_fingerprint(&layout.init())?;

    let m_list = cfg.m_list();
    let mut seen = SeenItems::from_graph(&train);
    let mut per_query: Vec<Vec<Vec<QueryMetrics>>> = vec![vec![Vec::new(); m_list.len()]; methods.len()];
    let mut all_queries = QuerySet::default();
    let mut previous: Option<ChunkModel> = None;
    let mut previous_key = 0u64;
    let needs_model = methods.contains(&Method::Micro);

    for (j, slice) in test.iter().enumerate() {
        let model = if needs_model {
            let base = match (scfg.user_count_mode, &previous) {
                (UserCountMode::Accumulate, Some(prev)) => prev.accumulated_user_counts(),
                _ => Arc::clone(init.user_interest_table()),
            };
            // accumulated counts depend on every earlier chunk
            let chain = if scfg.user_count_mode == UserCountMode::Accumulate { previous_key } else { 0 };
            let key = fingerprint(&[&scfg, &init_key, &slice.chunk(), &slice.len(), &chain]);
            previous_key = key;
            Some(chunk_model(&layout, slice, &init, base, &scfg, key)?)
        } else {
            None
        };
        seen.add_slice(slice);
        let Some(target) = test.get(j + 1) else {
            break;
        };
        let queries = build_queries(std::slice::from_ref(target));
        let popularity = PopularityIndex::from_slice(slice);
        let pool: Vec<u32> = slice.item_counts().iter().map(|&(i, _)| i).collect();
        let ann_index = match &emb {
            Some(e) => Some(AnnIndex::build(ann_encode_items(slice, e), &cfg.retrieval.ann, cfg.seed)?),
            None => None,
        };
        for (mi, &m) in m_list.iter().enumerate() {
            let rcfg = retrieval_config(cfg, m);
            let micro_index = model.as_ref().map(|md| build_index(md, &rcfg));
            for (k, &method) in methods.iter().enumerate() {
                let lists: Vec<CandidateList> = queries
                    .queries
                    .par_iter()
                    .map(|q| {
                        let query = Query::new(q.user, q.chunk).with_seen(seen.get(q.user));
                        match method {
                            Method::Micro => retrieve_micro(
                                &query,
                                model.as_ref().expect("fitted"),
                                micro_index.as_ref().expect("built"),
                                &init,
                                &rcfg,
                            ),
                            Method::Mle => {
                                retrieve_mle(&query, mix.as_ref().expect("built"), Some(&pool), &popularity, &rcfg)
                            }
                            Method::Ann => ann_retrieve_or_fallback(
                                &query,
                                ann_index.as_ref().expect("built"),
                                emb.as_ref().expect("loaded"),
                                &popularity,
                                &rcfg,
                            ),
                            Method::Popularity => popularity_retrieve(&query, &popularity, &rcfg),
                        }
                    })
                    .collect();
                if cfg.retrieval.write_candidates {
                    let mut text = String::new();
                    for l in &lists {
                        l.write_text(method.name(), &mut text);
                    }
                    write_atomic(layout.candidates(method, m, target.chunk()), text.as_bytes())?;
                }
                let scored: Vec<QueryMetrics> = lists
                    .par_iter()
                    .zip(&queries.queries)
                    .map(|(l, q)| QueryMetrics::score(l, &q.truth, m))
                    .collect();
                log::info!(
                    "progress stage=retrieve chunk={} method={method} m={m} queries={}",
                    target.chunk(),
                    scored.len()
                );
                per_query[k][mi].extend(scored);
            }
        }
        all_queries.queries.extend(queries.queries);
        previous = model;
    }

    if all_queries.is_empty() {
        log::warn!("no evaluated chunk: backtesting needs at least two held-out chunks");
    }
    let mut reports = Vec::new();
    for (k, &method) in methods.iter().enumerate() {
        for (mi, &m) in m_list.iter().enumerate() {
            let report = aggregate(&per_query[k][mi], &all_queries, method.name(), m)?;
            write_atomic(layout.metrics(method, m), report.to_text().as_bytes())?;
            reports.push(report);
        }
    }
    Ok(reports)
}

/// Writes a generated graph and its truth into `dir`, plus a run config
/// pointing at them. Returns the path of that config.
pub fn synth(cfg: &RunConfig, dir: &Path) -> Result<PathBuf> {
    let (graph, truth) = generate(&cfg.synth)?;
    let mut edges = String::from("user\titem\tchunk\n");
    for e in graph.edges() {
        let _ = writeln!(edges, "{}\t{}\t{}", e.user, e.item, e.chunk);
    }
    write_atomic(dir.join("edges.tsv"), edges.as_bytes())?;
    write_atomic(dir.join("theta.tsv"), truth.theta_text().as_bytes())?;
    write_atomic(dir.join("phi.tsv"), truth.phi_text().as_bytes())?;
    write_atomic(dir.join("z.tsv"), truth.z_text().as_bytes())?;

    let mut run = cfg.clone();
    run.dataset = Default::default();
    run.dataset.path = PathBuf::from("edges.tsv");
    run.output_dir = PathBuf::from("run");
    run.split.test_chunks = cfg.synth.chunks;
    run.split.regroup_factor = 1;
    run.cluster.interests = cfg.synth.interests;
    run.cluster.labels = None;
    if cfg.synth.phi_layout != PhiLayout::Full {
        let planted = cfg.synth.planted_clusters()?;
        write_atomic(dir.join("clusters.tsv"), planted.to_text('\t').as_bytes())?;
        run.cluster.labels = Some(PathBuf::from("clusters.tsv"));
    }
    let config_path = dir.join("run.toml");
    write_atomic(&config_path, run.to_toml().as_bytes())?;
    log::info!(
        "progress stage=synth edges={} users={} items={} chunks={}",
        graph.edge_count(),
        graph.num_users(),
        graph.num_items(),
        graph.num_chunks()
    );
    Ok(config_path)
}

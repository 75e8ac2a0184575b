//! Run configuration: one TOML file, every value overridable with
//! `--set section.key=value`.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{bail, Context, Result};
use micro_core::ann::AnnConfig;
use micro_core::embed::ScoreFunction;
use micro_core::graph::{DegreeFilter, Delimiter};
use micro_core::init::{DEFAULT_ALPHA, DEFAULT_BETA};
use micro_core::retrieval::ColdUserPolicy;
use micro_core::sampler::UserCountMode;
use micro_core::synth::SynthSpec;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Micro,
    Mle,
    Ann,
    Popularity,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Micro, Method::Mle, Method::Ann, Method::Popularity];

    pub fn name(self) -> &'static str {
        match self {
            Method::Micro => "micro",
            Method::Mle => "mle",
            Method::Ann => "ann",
            Method::Popularity => "popularity",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .with_context(|| format!("unknown method {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    /// Edge list with `user item ordinal` records.
    pub path: PathBuf,
    pub delimiter: String,
    pub min_user_degree: u32,
    pub max_user_degree: Option<u32>,
    pub min_item_degree: u32,
    pub max_item_degree: Option<u32>,
    /// Fraction of users kept, with all their engagements.
    pub subsample_users: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            path: PathBuf::from("edges.tsv"),
            delimiter: "tab".into(),
            min_user_degree: 0,
            max_user_degree: None,
            min_item_degree: 0,
            max_item_degree: None,
            subsample_users: 1.0,
        }
    }
}

impl DatasetConfig {
    pub fn delimiter(&self) -> Result<Delimiter> {
        Ok(self.delimiter.parse()?)
    }

    pub fn degree_filter(&self) -> Option<DegreeFilter> {
        let f = DegreeFilter {
            min_user: self.min_user_degree,
            max_user: self.max_user_degree.unwrap_or(u32::MAX),
            min_item: self.min_item_degree,
            max_item: self.max_item_degree.unwrap_or(u32::MAX),
        };
        (f != DegreeFilter::default()).then_some(f)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    /// Held-out chunks at the end of the (regrouped) timeline.
    pub test_chunks: u32,
    /// Consecutive raw ordinals merged into one chunk.
    pub regroup_factor: u32,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            test_chunks: 3,
            regroup_factor: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbedSection {
    pub dim: usize,
    pub epochs: usize,
    pub negatives: usize,
    pub learning_rate: f64,
    pub score: ScoreFunction,
}

impl Default for EmbedSection {
    fn default() -> Self {
        let d = micro_core::embed::EmbedConfig::default();
        Self {
            dim: d.dim,
            epochs: d.epochs,
            negatives: d.negatives,
            learning_rate: 0.05,
            score: d.score,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    /// Number of interests `K`.
    pub interests: u32,
    pub iters: usize,
    /// Optional `item<TAB>interest` file (raw item ids) used instead of
    /// clustering the embeddings.
    pub labels: Option<PathBuf>,
}

impl Default for ClusterSection {
    fn default() -> Self {
        Self {
            interests: 100,
            iters: 25,
            labels: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            alpha: DEFAULT_ALPHA,
            beta: DEFAULT_BETA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerSection {
    pub max_sweeps: usize,
    pub convergence_tol: f64,
    pub user_count_mode: UserCountMode,
}

impl Default for SamplerSection {
    fn default() -> Self {
        let d = micro_core::sampler::SamplerConfig::default();
        Self {
            max_sweeps: d.max_sweeps,
            convergence_tol: d.convergence_tol,
            user_count_mode: d.user_count_mode,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RetrievalSection {
    /// Cutoffs evaluated; each gets its own report.
    pub m: Vec<usize>,
    /// Items kept per interest list; defaults to `5 * M`.
    pub truncation: Option<usize>,
    pub exclude_seen: bool,
    pub cold_user_policy: ColdUserPolicy,
    pub ann: AnnConfig,
    /// Also dump every candidate list.
    pub write_candidates: bool,
}

impl Default for RetrievalSection {
    fn default() -> Self {
        Self {
            m: vec![50, 100],
            truncation: None,
            exclude_seen: true,
            cold_user_policy: ColdUserPolicy::PopularityFallback,
            ann: AnnConfig::Exact,
            write_candidates: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub methods: Vec<Method>,
    pub dataset: DatasetConfig,
    pub split: SplitConfig,
    pub embed: EmbedSection,
    pub cluster: ClusterSection,
    pub model: ModelSection,
    pub sampler: SamplerSection,
    pub retrieval: RetrievalSection,
    pub synth: SynthSpec,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("run"),
            methods: Method::ALL.to_vec(),
            dataset: DatasetConfig::default(),
            split: SplitConfig::default(),
            embed: EmbedSection::default(),
            cluster: ClusterSection::default(),
            model: ModelSection::default(),
            sampler: SamplerSection::default(),
            retrieval: RetrievalSection::default(),
            synth: SynthSpec::default(),
        }
    }
}

impl RunConfig {
    /// Reads `path` (if any), applies `key=value` overrides and validates.
    /// Relative paths in the file resolve against the file's directory.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                text.parse::<toml::Table>()
                    .with_context(|| format!("parsing config {}", p.display()))?
            }
            None => toml::Table::new(),
        };
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        let mut cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .context("invalid configuration")?;
        if let Some(base) = path.and_then(Path::parent) {
            cfg.resolve_relative(base);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.output_dir);
        fix(&mut self.dataset.path);
        if let Some(l) = self.cluster.labels.as_mut() {
            fix(l);
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.retrieval.m.is_empty() || self.retrieval.m.contains(&0) {
            bail!("retrieval.m must be a nonempty list of positive cutoffs");
        }
        if self.methods.is_empty() {
            bail!("methods must name at least one of micro, mle, ann, popularity");
        }
        if self.split.regroup_factor == 0 {
            bail!("split.regroup_factor must be >= 1");
        }
        if self.cluster.interests == 0 {
            bail!("cluster.interests must be >= 1");
        }
        self.dataset.delimiter()?;
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    /// Methods in canonical order, deduplicated.
    pub fn methods(&self) -> Vec<Method> {
        let mut m = self.methods.clone();
        m.sort();
        m.dedup();
        m
    }

    pub fn m_list(&self) -> Vec<usize> {
        let mut m = self.retrieval.m.clone();
        m.sort_unstable();
        m.dedup();
        m
    }
}

/// Sets a dotted key. The value is read as a TOML value when it parses as
/// one and as a bare string otherwise.
pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .with_context(|| format!("override {assignment:?} is not key=value"))?;
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        bail!("bad override key {key:?}");
    }
    let mut cur = table;
    for p in &parts[..parts.len() - 1] {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = match entry {
            toml::Value::Table(t) => t,
            _ => bail!("override {key:?}: {p} is not a section"),
        };
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

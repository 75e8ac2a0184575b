//! Top-M candidate retrieval from fitted chunk models, the static counting
//! mixture and global popularity.

use std::cmp::Ordering;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::ann::AnnConfig;
use crate::graph::{ChunkSlice, EngagementGraph};
use crate::init::{InitArtifact, MleMixture};
use crate::sampler::ChunkModel;

/// What to return for users with no train engagements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ColdUserPolicy {
    #[default]
    PopularityFallback,
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalConfig {
    /// Candidates per query.
    pub m: usize,
    /// Items kept per interest in the scored index; `None` means `5 * m`.
    pub truncation: Option<usize>,
    pub exclude_seen: bool,
    pub cold_user_policy: ColdUserPolicy,
    pub ann: AnnConfig,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            m: 100,
            truncation: None,
            exclude_seen: true,
            cold_user_policy: ColdUserPolicy::PopularityFallback,
            ann: AnnConfig::default(),
        }
    }
}

impl RetrievalConfig {
    pub fn with_m(m: usize) -> Self {
        Self {
            m,
            ..Default::default()
        }
    }

    pub fn truncation(&self) -> usize {
        self.truncation.unwrap_or(5 * self.m).max(self.m)
    }
}

/// One retrieval request: `user` asking for candidates for `chunk`, with the
/// items it engaged before that chunk (sorted) for exclusion.
#[derive(Debug, Clone, Copy)]
pub struct Query<'a> {
    pub user: u32,
    pub chunk: u32,
    pub seen: &'a [u32],
}

impl<'a> Query<'a> {
    pub fn new(user: u32, chunk: u32) -> Self {
        Self {
            user,
            chunk,
            seen: &[],
        }
    }

    pub fn with_seen(mut self, seen: &'a [u32]) -> Self {
        self.seen = seen;
        self
    }
}

/// Ranked `(item, score)` pairs, descending score, ties by ascending item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateList {
    pub user: u32,
    pub chunk: u32,
    pub items: Vec<(u32, f64)>,
}

impl CandidateList {
    pub fn empty(user: u32, chunk: u32) -> Self {
        Self {
            user,
            chunk,
            items: Vec::new(),
        }
    }

    pub fn item_ids(&self) -> impl Iterator<Item = u32> + '_ {
        self.items.iter().map(|&(i, _)| i)
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// `user chunk rank item score method` lines, rank starting at 1.
    pub fn write_text(&self, method: &str, out: &mut String) {
        for (rank, (item, score)) in self.items.iter().enumerate() {
            let _ = writeln!(out, "{}\t{}\t{}\t{item}\t{score}\t{method}", self.user, self.chunk, rank + 1);
        }
    }
}

/// Descending score, then ascending item id.
pub fn rank_order(a: &(u32, f64), b: &(u32, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Drops excluded items and keeps the best `m` in rank order.
pub fn top_m(mut scored: Vec<(u32, f64)>, m: usize, exclude: &[u32]) -> Vec<(u32, f64)> {
    if !exclude.is_empty() {
        scored.retain(|(i, _)| exclude.binary_search(i).is_err());
    }
    if scored.len() > m && m > 0 {
        scored.select_nth_unstable_by(m - 1, rank_order);
        scored.truncate(m);
    }
    scored.truncate(m);
    scored.sort_unstable_by(rank_order);
    scored
}

fn exclusions<'a>(q: &Query<'a>, cfg: &RetrievalConfig) -> &'a [u32] {
    if cfg.exclude_seen {
        q.seen
    } else {
        &[]
    }
}

/// Items of one chunk ranked by engagement count, ties by ascending id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PopularityIndex {
    ranked: Vec<(u32, u32)>,
}

impl PopularityIndex {
    pub fn from_counts(mut counts: Vec<(u32, u32)>) -> Self {
        counts.retain(|&(_, c)| c > 0);
        counts.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        Self { ranked: counts }
    }

    pub fn from_slice(slice: &ChunkSlice) -> Self {
        Self::from_counts(slice.item_counts())
    }

    pub fn from_model(m: &ChunkModel) -> Self {
        Self::from_counts(
            m.item_pool()
                .iter()
                .map(|&i| (i, m.item_interests(i).total() as u32))
                .collect(),
        )
    }

    pub fn ranked(&self) -> &[(u32, u32)] {
        &self.ranked
    }

    /// The top `m` items not in `exclude`.
    pub fn top(&self, m: usize, exclude: &[u32]) -> Vec<(u32, f64)> {
        self.ranked
            .iter()
            .filter(|(i, _)| exclude.binary_search(i).is_err())
            .take(m)
            .map(|&(i, c)| (i, c as f64))
            .collect()
    }
}

/// The same popular list for everyone, minus each user's seen items.
pub fn popularity_retrieve(q: &Query, pop: &PopularityIndex, cfg: &RetrievalConfig) -> CandidateList {
    CandidateList {
        user: q.user,
        chunk: q.chunk,
        items: pop.top(cfg.m, exclusions(q, cfg)),
    }
}

/// Candidates for a user with no train engagements.
pub fn cold_user_candidates(q: &Query, pop: &PopularityIndex, cfg: &RetrievalConfig) -> CandidateList {
    match cfg.cold_user_policy {
        ColdUserPolicy::PopularityFallback => popularity_retrieve(q, pop, cfg),
        ColdUserPolicy::Empty => CandidateList::empty(q.user, q.chunk),
    }
}

/// Per-interest lists of the chunk's items by smoothed
/// `phi_{k,t}(i) = (beta + N_ikt) / (I beta + N_kt)`, truncated to `L`.
///
/// Items engaged in the chunk with no count in an interest share that
/// interest's floor value; they fill the list in ascending id order after the
/// counted items. Interests with no engagements have empty lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredInterestIndex {
    chunk: u32,
    truncation: usize,
    lists: Vec<Vec<(u32, f64)>>,
    popularity: PopularityIndex,
}

pub fn build_index(m: &ChunkModel, cfg: &RetrievalConfig) -> ScoredInterestIndex {
    use rayon::prelude::*;

    let k = m.num_interests() as usize;
    let l = cfg.truncation();
    let mut counted: Vec<Vec<(u32, u32)>> = vec![Vec::new(); k];
    for &item in m.item_pool() {
        for (interest, c) in m.item_interests(item).iter() {
            counted[interest as usize].push((item, c));
        }
    }
    let pool = m.item_pool();
    let lists = counted
        .into_par_iter()
        .enumerate()
        .map(|(interest, mut items)| {
            let total = m.interest_total(interest as u32);
            if total == 0 {
                return Vec::new();
            }
            let denom = m.num_items() as f64 * m.beta() + total as f64;
            items.sort_unstable_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            items.truncate(l);
            let mut list: Vec<(u32, f64)> = items
                .iter()
                .map(|&(i, c)| (i, (m.beta() + c as f64) / denom))
                .collect();
            if list.len() < l {
                let floor = m.beta() / denom;
                let mut present: Vec<u32> = items.iter().map(|&(i, _)| i).collect();
                present.sort_unstable();
                for &i in pool {
                    if list.len() >= l {
                        break;
                    }
                    if present.binary_search(&i).is_err() {
                        list.push((i, floor));
                    }
                }
            }
            list
        })
        .collect();
    ScoredInterestIndex {
        chunk: m.chunk(),
        truncation: l,
        lists,
        popularity: PopularityIndex::from_model(m),
    }
}

impl ScoredInterestIndex {
    pub fn chunk(&self) -> u32 {
        self.chunk
    }

    pub fn truncation(&self) -> usize {
        self.truncation
    }

    pub fn list(&self, k: u32) -> &[(u32, f64)] {
        self.lists.get(k as usize).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn popularity(&self) -> &PopularityIndex {
        &self.popularity
    }
}

/// Normalized `theta_u` over the user's support under the chunk model.
pub fn theta_hat(u: u32, m: &ChunkModel, init: &InitArtifact) -> Vec<(u32, f64)> {
    let masses = m.theta_masses(u, init);
    let total: f64 = masses.iter().map(|&(_, w)| w).sum();
    masses.into_iter().map(|(k, w)| (k, w / total)).collect()
}

/// Ranks the chunk's items by `p_t(i|u) = sum_k theta_u(k) phi_{k,t}(i)`,
/// scoring only items that appear in the truncated lists of the user's
/// support. Each scored item gets its exact mixture value.
pub fn retrieve_micro(
    q: &Query,
    m: &ChunkModel,
    idx: &ScoredInterestIndex,
    init: &InitArtifact,
    cfg: &RetrievalConfig,
) -> CandidateList {
    if init.is_cold(q.user) {
        return cold_user_candidates(q, idx.popularity(), cfg);
    }
    let theta = theta_hat(q.user, m, init);
    let mut entries: Vec<(u32, u32, f64)> = theta
        .iter()
        .enumerate()
        .flat_map(|(slot, &(k, _))| idx.list(k).iter().map(move |&(i, phi)| (i, slot as u32, phi)))
        .collect();
    let scored: Vec<(u32, f64)> = if entries.is_empty() {
        // every support interest is empty this chunk: all items tie
        m.item_pool()
            .iter()
            .map(|&i| (i, theta.iter().map(|&(k, t)| t * m.phi(k, i)).sum::<f64>()))
            .collect()
    } else {
        entries.sort_unstable_by_key(|&(i, slot, _)| (i, slot));
        let mut scored = Vec::new();
        let mut start = 0;
        while start < entries.len() {
            let item = entries[start].0;
            let mut end = start;
            while end < entries.len() && entries[end].0 == item {
                end += 1;
            }
            let group = &entries[start..end];
            let mut g = 0;
            let mut score = 0.0;
            // terms are added in support order whether the value comes from
            // a list or a direct lookup
            for (slot, &(k, t)) in theta.iter().enumerate() {
                let phi = if g < group.len() && group[g].1 == slot as u32 {
                    g += 1;
                    group[g - 1].2
                } else {
                    m.phi(k, item)
                };
                score += t * phi;
            }
            scored.push((item, score));
            start = end;
        }
        scored
    };
    CandidateList {
        user: q.user,
        chunk: q.chunk,
        items: top_m(scored, cfg.m, exclusions(q, cfg)),
    }
}

/// Static mixture ranking `sum_k p(k|u) p(i|k)`, optionally restricted to a
/// sorted candidate pool.
pub fn retrieve_mle(
    q: &Query,
    mix: &MleMixture,
    pool: Option<&[u32]>,
    popularity: &PopularityIndex,
    cfg: &RetrievalConfig,
) -> CandidateList {
    let interests = mix.interests(q.user);
    if interests.is_empty() {
        return cold_user_candidates(q, popularity, cfg);
    }
    let mut terms: Vec<(u32, f64)> = Vec::new();
    for &(k, pk) in interests {
        for &(i, pi) in mix.items(k) {
            if pool.is_none_or(|p| p.binary_search(&i).is_ok()) {
                terms.push((i, pk * pi));
            }
        }
    }
    // stable sort keeps interest order within an item, so sums are taken in
    // ascending k
    terms.sort_by_key(|&(i, _)| i);
    let mut scored: Vec<(u32, f64)> = Vec::new();
    for (i, v) in terms {
        match scored.last_mut() {
            Some((last, s)) if *last == i => *s += v,
            _ => scored.push((i, v)),
        }
    }
    CandidateList {
        user: q.user,
        chunk: q.chunk,
        items: top_m(scored, cfg.m, exclusions(q, cfg)),
    }
}

/// Per-user sorted item sets, grown chunk by chunk.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SeenItems {
    rows: Vec<Vec<u32>>,
}

impl SeenItems {
    pub fn from_graph(g: &EngagementGraph) -> Self {
        let mut rows = vec![Vec::new(); g.num_users() as usize];
        for e in g.edges() {
            rows[e.user as usize].push(e.item);
        }
        for row in &mut rows {
            row.sort_unstable();
            row.dedup();
        }
        Self { rows }
    }

    pub fn add_slice(&mut self, slice: &ChunkSlice) {
        for (u, rows) in slice.by_user() {
            if self.rows.len() <= u as usize {
                self.rows.resize(u as usize + 1, Vec::new());
            }
            let row = &mut self.rows[u as usize];
            row.extend(rows.iter().map(|&(_, i)| i));
            row.sort_unstable();
            row.dedup();
        }
    }

    pub fn get(&self, u: u32) -> &[u32] {
        self.rows.get(u as usize).map(Vec::as_slice).unwrap_or(&[])
    }
}

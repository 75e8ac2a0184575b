//! Embedding baseline: chunk items encoded as the mean vector of the users
//! who engaged them, retrieved by cosine similarity to the user vector.

use serde::{Deserialize, Serialize};

use crate::embed::{dot, EmbeddingTable};
use crate::error::Result;
use crate::graph::ChunkSlice;
use crate::kmeans::cluster_items;
use crate::retrieval::{cold_user_candidates, top_m, CandidateList, PopularityIndex, Query, RetrievalConfig};

/// Search strategy over the encoded items.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum AnnConfig {
    #[default]
    Exact,
    /// Inverted file over spherical k-means cells; `probes` cells are scanned.
    Ivf { lists: u32, probes: u32 },
}

/// Mean user vectors for the items of one chunk, unit-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct ItemVectors {
    dim: usize,
    items: Vec<u32>,
    /// Unit vectors; rows of degenerate items are all zero.
    unit: Vec<f32>,
    raw: Vec<f32>,
    degenerate: Vec<bool>,
}

impl ItemVectors {
    pub fn items(&self) -> &[u32] {
        &self.items
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// The mean vector of `items()[slot]`.
    pub fn vector(&self, slot: usize) -> &[f32] {
        &self.raw[slot * self.dim..(slot + 1) * self.dim]
    }

    fn unit(&self, slot: usize) -> &[f32] {
        &self.unit[slot * self.dim..(slot + 1) * self.dim]
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Each chunk item's vector is the arithmetic mean of the vectors of its
/// engaging users, counted once per engagement.
pub fn ann_encode_items(slice: &ChunkSlice, emb: &EmbeddingTable) -> ItemVectors {
    let d = emb.dim();
    let counts = slice.item_counts();
    let items: Vec<u32> = counts.iter().map(|&(i, _)| i).collect();
    let mut sums = vec![0.0f64; items.len() * d];
    for &(u, i) in slice.engagements() {
        let slot = items.binary_search(&i).expect("item from slice");
        for (s, &x) in sums[slot * d..(slot + 1) * d].iter_mut().zip(emb.user(u)) {
            *s += x as f64;
        }
    }
    let mut raw = vec![0.0f32; sums.len()];
    let mut unit = vec![0.0f32; sums.len()];
    let mut degenerate = vec![false; items.len()];
    for (slot, &(_, c)) in counts.iter().enumerate() {
        let row = &sums[slot * d..(slot + 1) * d];
        let mean: Vec<f64> = row.iter().map(|s| s / c as f64).collect();
        let norm = mean.iter().map(|x| x * x).sum::<f64>().sqrt();
        for k in 0..d {
            raw[slot * d + k] = mean[k] as f32;
        }
        if norm > 1e-12 {
            for k in 0..d {
                unit[slot * d + k] = (mean[k] / norm) as f32;
            }
        } else {
            degenerate[slot] = true;
        }
    }
    ItemVectors {
        dim: d,
        items,
        unit,
        raw,
        degenerate,
    }
}

/// Item vectors plus an optional inverted file.
#[derive(Debug, Clone)]
pub struct AnnIndex {
    vectors: ItemVectors,
    ivf: Option<Ivf>,
}

#[derive(Debug, Clone)]
struct Ivf {
    centroids: Vec<f64>,
    cells: Vec<Vec<usize>>,
    probes: usize,
}

impl AnnIndex {
    pub fn build(vectors: ItemVectors, cfg: &AnnConfig, seed: u64) -> Result<Self> {
        let ivf = match *cfg {
            AnnConfig::Exact => None,
            AnnConfig::Ivf { lists, probes } => {
                let live: Vec<usize> = (0..vectors.len()).filter(|&s| !vectors.degenerate[s]).collect();
                let lists = (lists as usize).min(live.len());
                if lists <= 1 {
                    None
                } else {
                    let d = vectors.dim;
                    let flat: Vec<f32> = live.iter().flat_map(|&s| vectors.unit(s).to_vec()).collect();
                    let table = EmbeddingTable::new(d, Vec::new(), flat)?;
                    let clusters = cluster_items(&table, lists as u32, 25, seed)?;
                    let mut cells = vec![Vec::new(); lists];
                    for (j, &s) in live.iter().enumerate() {
                        cells[clusters.item_to_interest()[j] as usize].push(s);
                    }
                    let centroids = (0..lists as u32).flat_map(|c| clusters.centroid(c).to_vec()).collect();
                    Some(Ivf {
                        centroids,
                        cells,
                        probes: (probes as usize).clamp(1, lists),
                    })
                }
            }
        };
        Ok(Self { vectors, ivf })
    }

    pub fn exact(vectors: ItemVectors) -> Self {
        Self { vectors, ivf: None }
    }

    pub fn vectors(&self) -> &ItemVectors {
        &self.vectors
    }

    fn scan_slots(&self, query: &[f32]) -> Vec<usize> {
        match &self.ivf {
            None => (0..self.vectors.len()).collect(),
            Some(ivf) => {
                let d = self.vectors.dim;
                let mut order: Vec<(usize, f64)> = (0..ivf.cells.len())
                    .map(|c| {
                        let centroid = &ivf.centroids[c * d..(c + 1) * d];
                        (c, centroid.iter().zip(query).map(|(a, &b)| a * b as f64).sum())
                    })
                    .collect();
                order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
                let mut slots: Vec<usize> = order[..ivf.probes]
                    .iter()
                    .flat_map(|&(c, _)| ivf.cells[c].iter().copied())
                    .collect();
                // degenerate items are never in a cell; they rank last anyway
                slots.extend((0..self.vectors.len()).filter(|&s| self.vectors.degenerate[s]));
                slots
            }
        }
    }
}

/// Top-M chunk items by cosine to the user's vector. Degenerate (zero) item
/// vectors score negative infinity. A zero user vector gets an empty list.
pub fn ann_retrieve(q: &Query, index: &AnnIndex, emb: &EmbeddingTable, cfg: &RetrievalConfig) -> CandidateList {
    let user = emb.user(q.user);
    let norm = dot(user, user).sqrt();
    if !(norm > 0.0) {
        log::warn!("user {} has a zero embedding; no ANN candidates", q.user);
        return CandidateList::empty(q.user, q.chunk);
    }
    let query: Vec<f32> = user.iter().map(|x| x / norm).collect();
    let v = &index.vectors;
    let scored = index
        .scan_slots(&query)
        .into_iter()
        .map(|s| {
            let score = if v.degenerate[s] {
                f64::NEG_INFINITY
            } else {
                dot(&query, v.unit(s)) as f64
            };
            (v.items[s], score)
        })
        .collect();
    let exclude = if cfg.exclude_seen { q.seen } else { &[] };
    CandidateList {
        user: q.user,
        chunk: q.chunk,
        items: top_m(scored, cfg.m, exclude),
    }
}

/// [`ann_retrieve`] with the cold-user policy applied to users whose vector
/// is zero.
pub fn ann_retrieve_or_fallback(
    q: &Query,
    index: &AnnIndex,
    emb: &EmbeddingTable,
    popularity: &PopularityIndex,
    cfg: &RetrievalConfig,
) -> CandidateList {
    if emb.user(q.user).iter().all(|&x| x == 0.0) {
        return cold_user_candidates(q, popularity, cfg);
    }
    ann_retrieve(q, index, emb, cfg)
}

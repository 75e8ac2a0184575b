//! Shared fixtures and independent oracles for the integration tests.

#![allow(dead_code)]

use std::sync::Arc;

use micro_core::embed::EmbeddingTable;
use micro_core::graph::{ChunkSlice, Edge, EngagementGraph};
use micro_core::init::{build_init, InitArtifact};
use micro_core::kmeans::ClusterAssignment;
use micro_core::retrieval::{rank_order, CandidateList};
use micro_core::sampler::{gibbs_weight, ChunkModel};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

/// A tiny sampler problem: train counts shaping the per-user priors plus one
/// chunk of engagements.
pub struct TinyInstance {
    pub init: InitArtifact,
    pub slice: ChunkSlice,
    pub users: u32,
    pub items: u32,
    pub interests: u32,
}

/// `train[u]` lists `(interest, count)`; item `i` belongs to interest
/// `i % interests`, so `items >= interests`.
pub fn tiny_instance(
    users: u32,
    items: u32,
    interests: u32,
    train: &[Vec<(u32, u32)>],
    chunk: Vec<(u32, u32)>,
    alpha: f64,
    beta: f64,
) -> TinyInstance {
    assert!(items >= interests);
    let mut edges = Vec::new();
    for (u, row) in train.iter().enumerate() {
        for &(k, n) in row {
            for _ in 0..n {
                edges.push(Edge { user: u as u32, item: k, chunk: 0 });
            }
        }
    }
    let graph = EngagementGraph::from_dense_edges(edges, users, items, 1).unwrap();
    let labels = (0..items).map(|i| i % interests).collect();
    let cluster = ClusterAssignment::from_labels(labels, interests).unwrap();
    let init = build_init(&graph, &cluster, alpha, beta).unwrap();
    TinyInstance {
        init,
        slice: ChunkSlice::new(1, chunk),
        users,
        items,
        interests,
    }
}

/// Random instance within U <= 3, K <= 3, I <= 4, at most 6 engagements.
pub fn random_tiny(rng: &mut impl Rng) -> TinyInstance {
    let users = rng.random_range(1..=3u32);
    let interests = rng.random_range(1..=3u32);
    let items = rng.random_range(interests..=4u32);
    let train: Vec<Vec<(u32, u32)>> = (0..users)
        .map(|_| {
            if rng.random_bool(0.2) {
                return Vec::new(); // cold user
            }
            let mut row: Vec<(u32, u32)> = Vec::new();
            for k in 0..interests {
                if rng.random_bool(0.6) {
                    row.push((k, rng.random_range(1..=3)));
                }
            }
            if row.is_empty() {
                row.push((rng.random_range(0..interests), 1));
            }
            row
        })
        .collect();
    let n = rng.random_range(1..=6usize);
    let chunk = (0..n)
        .map(|_| (rng.random_range(0..users), rng.random_range(0..items)))
        .collect();
    let alpha = [0.1, 0.5, 1.0][rng.random_range(0..3usize)];
    let beta = [0.01, 0.1, 0.7][rng.random_range(0..3usize)];
    tiny_instance(users, items, interests, &train, chunk, alpha, beta)
}

/// Exact log collapsed joint `log P(z, items | train counts)` of a chunk,
/// evaluated from scratch with dense count arrays. `engagements` and `z`
/// are aligned. Returns `-inf` for assignments outside a user's prior
/// support.
pub fn oracle_log_joint(inst: &TinyInstance, engagements: &[(u32, u32)], z: &[u32]) -> f64 {
    let (nu, ni, nk) = (inst.users as usize, inst.items as usize, inst.interests as usize);
    let alpha = inst.init.alpha();
    let beta = inst.init.beta();
    let mut user_k = vec![vec![0u32; nk]; nu];
    let mut item_k = vec![vec![0u32; nk]; ni];
    let mut tot_k = vec![0u32; nk];
    for (&(u, i), &k) in engagements.iter().zip(z) {
        user_k[u as usize][k as usize] += 1;
        item_k[i as usize][k as usize] += 1;
        tot_k[k as usize] += 1;
    }
    let lg = libm::lgamma;
    let mut total = 0.0;
    for u in 0..nu {
        let n_u: u32 = user_k[u].iter().sum();
        if n_u == 0 {
            continue;
        }
        let train = inst.init.user_interest(u as u32);
        let cold = train.is_empty();
        let mut a_sum = 0.0;
        for k in 0..nk {
            let base = train.get(k as u32) as f64;
            let prior = if cold || base > 0.0 { alpha } else { 0.0 };
            let a = prior + base;
            let n = user_k[u][k] as f64;
            if a == 0.0 {
                if n > 0.0 {
                    return f64::NEG_INFINITY;
                }
                continue;
            }
            a_sum += a;
            total += lg(a + n) - lg(a);
        }
        total -= lg(a_sum + n_u as f64) - lg(a_sum);
    }
    let i_beta = ni as f64 * beta;
    for k in 0..nk {
        for i in 0..ni {
            total += lg(beta + item_k[i][k] as f64) - lg(beta);
        }
        total -= lg(i_beta + tot_k[k] as f64) - lg(i_beta);
    }
    total
}

/// Every assignment vector in `[0, K)^n`, lexicographic.
pub fn all_assignments(n: usize, k: u32) -> Vec<Vec<u32>> {
    let mut out = vec![Vec::new()];
    for _ in 0..n {
        out = out
            .into_iter()
            .flat_map(|prefix| {
                (0..k).map(move |c| {
                    let mut v = prefix.clone();
                    v.push(c);
                    v
                })
            })
            .collect();
    }
    out
}

/// Normalizes log weights into probabilities.
pub fn softmax(logs: &[f64]) -> Vec<f64> {
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = logs.iter().map(|&l| if l == f64::NEG_INFINITY { 0.0 } else { (l - max).exp() }).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Pearson chi-square statistic of observed counts against expected
/// probabilities.
pub fn chi_square(observed: &[u64], expected_p: &[f64]) -> f64 {
    let n: u64 = observed.iter().sum();
    observed
        .iter()
        .zip(expected_p)
        .filter(|(_, &p)| p > 0.0)
        .map(|(&o, &p)| {
            let e = p * n as f64;
            (o as f64 - e).powi(2) / e
        })
        .sum()
}

pub fn model_at(inst: &TinyInstance, z: &[u32]) -> Option<ChunkModel> {
    ChunkModel::from_assignments(&inst.slice, &inst.init, Arc::clone(inst.init.user_interest_table()), z).ok()
}

pub fn engagements(m: &ChunkModel) -> Vec<(u32, u32)> {
    (0..m.len()).map(|j| m.engagement(j)).collect()
}

/// Normalized conditional over every interest for engagement `j` from the
/// sampler's weights.
pub fn conditional(inst: &TinyInstance, m: &mut ChunkModel, j: usize) -> Vec<f64> {
    let old = m.unassign(j);
    let (u, i) = m.engagement(j);
    let w: Vec<f64> = (0..inst.interests).map(|k| gibbs_weight(u, i, k, m, &inst.init)).collect();
    m.assign(j, old).unwrap();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Posterior marginals of every engagement by exhaustive enumeration.
pub fn enumerated_marginals(inst: &TinyInstance, eng: &[(u32, u32)]) -> Vec<Vec<f64>> {
    let states = all_assignments(eng.len(), inst.interests);
    let logs: Vec<f64> = states.iter().map(|z| oracle_log_joint(inst, eng, z)).collect();
    let p = softmax(&logs);
    let mut marg = vec![vec![0.0; inst.interests as usize]; eng.len()];
    for (z, pz) in states.iter().zip(p) {
        for (j, &k) in z.iter().enumerate() {
            marg[j][k as usize] += pz;
        }
    }
    marg
}

pub fn posterior_marginal_fixture() -> TinyInstance {
    // a cold user and two users with overlapping supports sharing items
    tiny_instance(
        3,
        4,
        3,
        &[vec![(0, 1), (1, 2)], vec![(1, 1), (2, 1)], vec![]],
        vec![(0, 0), (0, 1), (1, 1), (1, 2), (2, 3), (2, 0)],
        0.5,
        0.3,
    )
}

pub fn random_instance(rng: &mut ChaCha8Rng) -> TinyInstance {
    let users = rng.random_range(2..=8u32);
    let interests = rng.random_range(1..=5u32);
    let items = rng.random_range(interests.max(3)..=30u32);
    let train: Vec<Vec<(u32, u32)>> = (0..users)
        .map(|_| {
            if rng.random_bool(0.15) {
                return Vec::new();
            }
            let mut row = Vec::new();
            for k in 0..interests {
                if rng.random_bool(0.5) {
                    row.push((k, rng.random_range(1..=6)));
                }
            }
            if row.is_empty() {
                row.push((rng.random_range(0..interests), 2));
            }
            row
        })
        .collect();
    let n = rng.random_range(1..=60usize);
    let chunk = (0..n)
        .map(|_| (rng.random_range(0..users), rng.random_range(0..items)))
        .collect();
    let alpha = [0.1, 0.5, 2.0][rng.random_range(0..3usize)];
    let beta = [0.01, 0.1, 1.0][rng.random_range(0..3usize)];
    tiny_instance(users, items, interests, &train, chunk, alpha, beta)
}

/// Dense mixture over every pool item, ranked, computed from the raw counts.
pub fn dense_ranking(inst: &TinyInstance, m: &ChunkModel, u: u32, seen: &[u32], top: usize) -> Vec<(u32, f64)> {
    let alpha = inst.init.alpha();
    let beta = inst.init.beta();
    let support: Vec<u32> = if inst.init.is_cold(u) {
        (0..inst.interests).collect()
    } else {
        inst.init.support(u).to_vec()
    };
    let masses: Vec<f64> = support
        .iter()
        .map(|&k| alpha + m.user_interest_count(u, k) as f64)
        .collect();
    let total: f64 = masses.iter().sum();
    let theta: Vec<f64> = masses.iter().map(|w| w / total).collect();
    let i_beta = inst.items as f64 * beta;
    let mut scored: Vec<(u32, f64)> = m
        .item_pool()
        .iter()
        .filter(|i| !seen.contains(i))
        .map(|&i| {
            let s = support
                .iter()
                .zip(&theta)
                .map(|(&k, &t)| {
                    t * ((beta + m.item_interest_count(i, k) as f64) / (i_beta + m.interest_total(k) as f64))
                })
                .sum();
            (i, s)
        })
        .collect();
    scored.sort_by(rank_order);
    scored.truncate(top);
    scored
}

pub fn list(items: &[u32]) -> CandidateList {
    CandidateList {
        user: 0,
        chunk: 1,
        items: items.iter().enumerate().map(|(r, &i)| (i, -(r as f64))).collect(),
    }
}

/// Straight from the definitions with linear scans.
pub fn brute(cands: &[u32], truth: &[u32], m: usize) -> (f64, f64, f64) {
    let top = &cands[..m.min(cands.len())];
    let rel: Vec<bool> = top.iter().map(|i| truth.contains(i)).collect();
    let hits = rel.iter().filter(|&&r| r).count();
    let recall = if truth.is_empty() { 0.0 } else { hits as f64 / truth.len() as f64 };
    let mut mrr = 0.0;
    for (r, &hit) in rel.iter().enumerate() {
        if hit {
            mrr = 1.0 / (r as f64 + 1.0);
            break;
        }
    }
    let mut dcg = 0.0;
    for (r, &hit) in rel.iter().enumerate() {
        if hit {
            dcg += 1.0 / (r as f64 + 2.0).log2();
        }
    }
    let mut idcg = 0.0;
    for r in 0..truth.len().min(m) {
        idcg += 1.0 / (r as f64 + 2.0).log2();
    }
    let ndcg = if idcg > 0.0 { dcg / idcg } else { 0.0 };
    (recall, mrr, ndcg)
}

pub fn random_case(rng: &mut ChaCha8Rng) -> (Vec<u32>, Vec<u32>, usize) {
    let universe = rng.random_range(1..60u32);
    let mut all: Vec<u32> = (0..universe).collect();
    all.shuffle(rng);
    let n_c = rng.random_range(0..=all.len());
    let cands = all[..n_c].to_vec();
    all.shuffle(rng);
    let n_t = rng.random_range(0..=all.len().min(15));
    let mut truth = all[..n_t].to_vec();
    truth.sort_unstable();
    (cands, truth, rng.random_range(1..=70))
}

pub fn purity(table: &[[usize; 5]; 5]) -> f64 {
    let total: usize = table.iter().flatten().sum();
    table.iter().map(|row| *row.iter().max().unwrap()).sum::<usize>() as f64 / total as f64
}

/// Five tight bumps around random centres in 12 dimensions, 100 items each.
/// Returns the table and the planted label of every item.
pub fn five_bumps() -> (EmbeddingTable, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let d = 12;
    let centers: Vec<Vec<f32>> = (0..5)
        .map(|_| (0..d).map(|_| StandardNormal.sample(&mut rng)).collect())
        .collect();
    let noise = Normal::new(0.0f32, 0.25).unwrap();
    let mut items = Vec::new();
    let mut labels = Vec::new();
    for i in 0..500 {
        let c = i % 5;
        labels.push(c);
        items.extend(centers[c].iter().map(|&x| x + noise.sample(&mut rng)));
    }
    (EmbeddingTable::new(d, Vec::new(), items).unwrap(), labels)
}

/// Purity of a clustering against planted labels.
pub fn bump_purity(found: &ClusterAssignment, labels: &[usize]) -> f64 {
    let mut table = [[0usize; 5]; 5];
    for (i, &l) in labels.iter().enumerate() {
        table[found.item_to_interest()[i] as usize][l] += 1;
    }
    purity(&table)
}

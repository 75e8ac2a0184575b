//! Forward sampling of the generative process with known parameters, and
//! recovery scoring of fitted chunk models against the planted truth.
//!
//! Chunk 0 of a generated graph plays the role of the train period; chunks
//! `1..=T` are the test period.

use std::fmt::Write as _;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Gamma, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Edge, EngagementGraph};
use crate::init::InitArtifact;
use crate::kmeans::ClusterAssignment;
use crate::retrieval::theta_hat;
use crate::sampler::ChunkModel;

/// How many engagements each user makes per chunk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", content = "value")]
pub enum EngagementCount {
    Fixed(u32),
    /// Poisson with the given mean, at least one.
    Poisson(f64),
}

/// Which items each interest's distribution can put mass on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PhiLayout {
    /// Interest `k` owns a fixed disjoint block of items in every chunk.
    #[default]
    Blocks,
    /// Every chunk gets fresh disjoint blocks, so no item outlives its chunk.
    FreshBlocks,
    /// Every interest spans all items.
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub users: u32,
    pub items: u32,
    pub interests: u32,
    /// Test chunks; chunk 0 (train) is generated in addition.
    pub chunks: u32,
    pub engagements_per_user: EngagementCount,
    /// Engagements per user in the train chunk; defaults to the test count.
    pub train_engagements_per_user: Option<EngagementCount>,
    /// Interests in each user's support.
    pub theta_support: u32,
    /// Symmetric Dirichlet concentration of theta over its support.
    pub theta_concentration: f64,
    /// Symmetric Dirichlet concentration of each fresh phi draw.
    pub beta_gen: f64,
    pub phi_layout: PhiLayout,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            users: 200,
            items: 500,
            interests: 5,
            chunks: 3,
            engagements_per_user: EngagementCount::Fixed(20),
            train_engagements_per_user: None,
            theta_support: 2,
            theta_concentration: 1.0,
            beta_gen: 0.5,
            phi_layout: PhiLayout::Blocks,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let blocks = match self.phi_layout {
            PhiLayout::Blocks => self.interests,
            PhiLayout::FreshBlocks => self.interests * (self.chunks + 1),
            PhiLayout::Full => 1,
        };
        if self.users == 0 || self.interests == 0 || self.items < blocks {
            return Err(Error::InvalidArgument(format!(
                "need users, interests >= 1 and at least {blocks} items"
            )));
        }
        if self.theta_support == 0 || self.theta_support > self.interests {
            return Err(Error::InvalidArgument(format!(
                "theta_support {} not in [1, {}]",
                self.theta_support, self.interests
            )));
        }
        if !(self.theta_concentration > 0.0 && self.beta_gen > 0.0) {
            return Err(Error::InvalidArgument("concentrations must be positive".into()));
        }
        Ok(())
    }

    /// Items interest `k` may emit in chunk `t`.
    fn block(&self, t: u32, k: u32) -> std::ops::Range<u32> {
        let span = |n_blocks: u32, b: u32| {
            let size = self.items / n_blocks;
            b * size..(b + 1) * size
        };
        match self.phi_layout {
            PhiLayout::Blocks => span(self.interests, k),
            PhiLayout::FreshBlocks => span(self.interests * (self.chunks + 1), t * self.interests + k),
            PhiLayout::Full => 0..self.items,
        }
    }

    /// The item-to-interest map of the train chunk's blocks, usable as a
    /// planted cluster assignment. Items outside every block map to 0.
    pub fn planted_clusters(&self) -> Result<ClusterAssignment> {
        if self.phi_layout == PhiLayout::Full {
            return Err(Error::InvalidArgument("full layout has no planted blocks".into()));
        }
        let mut labels = vec![0u32; self.items as usize];
        for k in 0..self.interests {
            for i in self.block(0, k) {
                labels[i as usize] = k;
            }
        }
        ClusterAssignment::from_labels(labels, self.interests)
    }
}

/// Every latent quantity behind a generated graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthTruth {
    pub num_interests: u32,
    /// `theta[u]` as `(k, p)` over the user's support, ascending k.
    pub theta: Vec<Vec<(u32, f64)>>,
    /// `phi[t][k]` as `(item, p)` with positive mass.
    pub phi: Vec<Vec<Vec<(u32, f64)>>>,
    /// `z[t]` in the engagement order of the chunk's slice.
    pub z: Vec<Vec<u32>>,
}

fn dirichlet(rng: &mut impl Rng, concentration: f64, n: usize) -> Vec<f64> {
    let gamma = Gamma::new(concentration, 1.0).expect("positive concentration");
    let mut draw: Vec<f64> = (0..n).map(|_| gamma.sample(rng)).collect();
    let total: f64 = draw.iter().sum();
    if total > 0.0 && total.is_finite() {
        draw.iter_mut().for_each(|x| *x /= total);
    } else {
        // every gamma draw underflowed: put all mass on one coordinate
        draw.iter_mut().for_each(|x| *x = 0.0);
        draw[rng.random_range(0..n)] = 1.0;
    }
    draw
}

fn draw_count(rng: &mut impl Rng, count: EngagementCount) -> u32 {
    match count {
        EngagementCount::Fixed(n) => n,
        EngagementCount::Poisson(mean) => {
            let p = Poisson::new(mean.max(1e-9)).expect("positive mean");
            (p.sample(rng) as u32).max(1)
        }
    }
}

/// Samples `theta_u`, then per chunk fresh `phi_{k,t}` and every
/// engagement's interest and item.
pub fn generate(spec: &SynthSpec) -> Result<(EngagementGraph, SynthTruth)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let k = spec.interests;
    let theta: Vec<Vec<(u32, f64)>> = (0..spec.users)
        .map(|_| {
            let mut support: Vec<u32> = sample(&mut rng, k as usize, spec.theta_support as usize)
                .into_iter()
                .map(|x| x as u32)
                .collect();
            support.sort_unstable();
            let p = dirichlet(&mut rng, spec.theta_concentration, support.len());
            support.into_iter().zip(p).collect()
        })
        .collect();
    let theta_pick: Vec<WeightedIndex<f64>> = theta
        .iter()
        .map(|row| {
            WeightedIndex::new(row.iter().map(|&(_, p)| p))
                .map_err(|e| Error::InvalidArgument(format!("theta draw: {e}")))
        })
        .collect::<Result<_>>()?;

    let mut edges = Vec::new();
    let mut phi = Vec::new();
    let mut z = Vec::new();
    for t in 0..=spec.chunks {
        let phi_t: Vec<Vec<(u32, f64)>> = (0..k)
            .map(|kk| {
                let block = spec.block(t, kk);
                let p = dirichlet(&mut rng, spec.beta_gen, block.len());
                block.zip(p).filter(|&(_, p)| p > 0.0).collect()
            })
            .collect();
        let phi_pick: Vec<WeightedIndex<f64>> = phi_t
            .iter()
            .map(|row| {
                WeightedIndex::new(row.iter().map(|&(_, p)| p))
                    .map_err(|e| Error::InvalidArgument(format!("phi draw: {e}")))
            })
            .collect::<Result<_>>()?;
        let count = if t == 0 {
            spec.train_engagements_per_user.unwrap_or(spec.engagements_per_user)
        } else {
            spec.engagements_per_user
        };
        let mut z_t = Vec::new();
        for u in 0..spec.users {
            for _ in 0..draw_count(&mut rng, count) {
                let interest = theta[u as usize][theta_pick[u as usize].sample(&mut rng)].0;
                let item = phi_t[interest as usize][phi_pick[interest as usize].sample(&mut rng)].0;
                edges.push(Edge { user: u, item, chunk: t });
                z_t.push(interest);
            }
        }
        phi.push(phi_t);
        z.push(z_t);
    }
    let graph = EngagementGraph::from_dense_edges(edges, spec.users, spec.items, spec.chunks + 1)?;
    Ok((
        graph,
        SynthTruth {
            num_interests: k,
            theta,
            phi,
            z,
        },
    ))
}

impl SynthTruth {
    /// `user<TAB>interest<TAB>p` lines.
    pub fn theta_text(&self) -> String {
        let mut out = String::new();
        for (u, row) in self.theta.iter().enumerate() {
            for &(k, p) in row {
                let _ = writeln!(out, "{u}\t{k}\t{p}");
            }
        }
        out
    }

    /// `chunk<TAB>interest<TAB>item<TAB>p` lines.
    pub fn phi_text(&self) -> String {
        let mut out = String::new();
        for (t, per_k) in self.phi.iter().enumerate() {
            for (k, row) in per_k.iter().enumerate() {
                for &(i, p) in row {
                    let _ = writeln!(out, "{t}\t{k}\t{i}\t{p}");
                }
            }
        }
        out
    }

    /// `chunk<TAB>interest` lines in slice engagement order.
    pub fn z_text(&self) -> String {
        let mut out = String::new();
        for (t, zs) in self.z.iter().enumerate() {
            for k in zs {
                let _ = writeln!(out, "{t}\t{k}");
            }
        }
        out
    }
}

/// How fitted labels are matched to planted ones.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum LabelMatching {
    /// Labels are compared as-is (the sampler was anchored by the truth).
    #[default]
    Identity,
    /// Labels are relabelled by the assignment maximizing agreement.
    Permutation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ChunkRecovery {
    pub chunk: u32,
    /// Fraction of engagements whose fitted interest equals the truth.
    pub z_accuracy: f64,
    /// Mean over the chunk's users of TV(theta_hat, theta).
    pub mean_theta_tv: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryReport {
    pub chunks: Vec<ChunkRecovery>,
    /// Per user TV distance under the last chunk's model.
    pub user_theta_tv: Vec<f64>,
}

impl RecoveryReport {
    pub fn min_z_accuracy(&self) -> f64 {
        self.chunks.iter().map(|c| c.z_accuracy).fold(f64::INFINITY, f64::min)
    }

    pub fn mean_theta_tv(&self) -> f64 {
        self.chunks.iter().map(|c| c.mean_theta_tv).sum::<f64>() / self.chunks.len().max(1) as f64
    }
}

/// Scores fitted models against the truth. `fitted[j]` must be the model of
/// chunk `fitted[j].chunk()` of the generated graph.
pub fn score_recovery(
    truth: &SynthTruth,
    fitted: &[ChunkModel],
    init: &InitArtifact,
    matching: LabelMatching,
) -> Result<RecoveryReport> {
    let k = truth.num_interests as usize;
    if init.num_interests() != truth.num_interests {
        return Err(Error::Inconsistent(format!(
            "init has {} interests, truth {}",
            init.num_interests(),
            truth.num_interests
        )));
    }
    let mut chunks = Vec::new();
    let mut user_theta_tv = Vec::new();
    for m in fitted {
        let t = m.chunk() as usize;
        let zt = truth
            .z
            .get(t)
            .ok_or_else(|| Error::Inconsistent(format!("no truth for chunk {t}")))?;
        if zt.len() != m.len() {
            return Err(Error::Inconsistent(format!(
                "chunk {t}: {} true assignments, {} fitted",
                zt.len(),
                m.len()
            )));
        }
        let relabel: Vec<u32> = match matching {
            LabelMatching::Identity => (0..k as u32).collect(),
            LabelMatching::Permutation => {
                let mut confusion = vec![vec![0i64; k]; k];
                for (&fit, &tr) in m.z().iter().zip(zt) {
                    confusion[fit as usize][tr as usize] += 1;
                }
                max_weight_matching(&confusion)
            }
        };
        let hits = m
            .z()
            .iter()
            .zip(zt)
            .filter(|(&fit, &tr)| relabel[fit as usize] == tr)
            .count();
        let mut tvs = Vec::new();
        user_theta_tv = vec![f64::NAN; truth.theta.len()];
        for u in m.users() {
            let mut est = vec![0.0; k];
            for (kk, p) in theta_hat(u, m, init) {
                est[relabel[kk as usize] as usize] += p;
            }
            let mut tru = vec![0.0; k];
            for &(kk, p) in &truth.theta[u as usize] {
                tru[kk as usize] = p;
            }
            let tv = 0.5 * est.iter().zip(&tru).map(|(a, b)| (a - b).abs()).sum::<f64>();
            user_theta_tv[u as usize] = tv;
            tvs.push(tv);
        }
        chunks.push(ChunkRecovery {
            chunk: m.chunk(),
            z_accuracy: if zt.is_empty() { 1.0 } else { hits as f64 / zt.len() as f64 },
            mean_theta_tv: tvs.iter().sum::<f64>() / tvs.len().max(1) as f64,
        });
    }
    Ok(RecoveryReport { chunks, user_theta_tv })
}

/// Maximum-weight perfect matching on a square matrix (Hungarian method on
/// negated weights). Returns `row -> column`.
pub fn max_weight_matching(weights: &[Vec<i64>]) -> Vec<u32> {
    let n = weights.len();
    let max = weights.iter().flatten().copied().max().unwrap_or(0);
    // cost[i][j] = max - w[i][j] >= 0, 1-based potentials
    let cost = |i: usize, j: usize| max - weights[i - 1][j - 1];
    let mut u = vec![0i64; n + 1];
    let mut v = vec![0i64; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![i64::MAX; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = i64::MAX;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0, j) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0u32; n];
    for j in 1..=n {
        if p[j] > 0 {
            assignment[p[j] - 1] = (j - 1) as u32;
        }
    }
    assignment
}

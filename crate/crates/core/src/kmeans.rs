//! Spherical k-means over item embeddings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::embed::EmbeddingTable;
use crate::error::{Error, Result};

/// Hard assignment of every item to one interest plus unit-norm centroids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    num_interests: u32,
    dim: usize,
    item_to_interest: Vec<u32>,
    centroids: Vec<f64>,
    /// Cosine objective after each iteration.
    objective_trace: Vec<f64>,
}

impl ClusterAssignment {
    /// An assignment with no geometry attached, e.g. a planted block map.
    pub fn from_labels(item_to_interest: Vec<u32>, num_interests: u32) -> Result<Self> {
        if let Some(&bad) = item_to_interest.iter().find(|&&k| k >= num_interests) {
            return Err(Error::InvalidArgument(format!(
                "interest {bad} outside [0, {num_interests})"
            )));
        }
        Ok(Self {
            num_interests,
            dim: 0,
            item_to_interest,
            centroids: Vec::new(),
            objective_trace: Vec::new(),
        })
    }

    pub fn num_interests(&self) -> u32 {
        self.num_interests
    }

    pub fn num_items(&self) -> usize {
        self.item_to_interest.len()
    }

    pub fn interest_of(&self, item: u32) -> Option<u32> {
        self.item_to_interest.get(item as usize).copied()
    }

    pub fn item_to_interest(&self) -> &[u32] {
        &self.item_to_interest
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn centroid(&self, k: u32) -> &[f64] {
        let s = k as usize * self.dim;
        &self.centroids[s..s + self.dim]
    }

    pub fn objective_trace(&self) -> &[f64] {
        &self.objective_trace
    }

    /// `item<delim>interest` lines, one per item.
    pub fn to_text(&self, delimiter: char) -> String {
        let mut out = String::with_capacity(self.item_to_interest.len() * 8);
        for (i, k) in self.item_to_interest.iter().enumerate() {
            out.push_str(&format!("{i}{delimiter}{k}\n"));
        }
        out
    }
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 && norm.is_finite() {
        v.iter_mut().for_each(|x| *x /= norm);
        true
    } else {
        false
    }
}

fn cos(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Clusters item vectors into `k` interests by cosine similarity.
///
/// Seeding is k-means++ on cosine distance. An interest left empty after an
/// assignment step takes the item with the lowest cosine to its own centroid.
/// Zero item vectors go to interest 0 and do not move any centroid.
pub fn cluster_items(emb: &EmbeddingTable, k: u32, iters: usize, seed: u64) -> Result<ClusterAssignment> {
    let n = emb.num_items();
    let d = emb.dim();
    let kk = k as usize;
    if k == 0 || kk > n {
        return Err(Error::InvalidArgument(format!("k = {k} must be in [1, {n}]")));
    }
    let mut points = vec![0.0f64; n * d];
    let mut nonzero = vec![false; n];
    for i in 0..n {
        let row = &mut points[i * d..(i + 1) * d];
        for (x, &y) in row.iter_mut().zip(emb.item(i as u32)) {
            *x = y as f64;
        }
        nonzero[i] = normalize(row);
    }
    let active: Vec<usize> = (0..n).filter(|&i| nonzero[i]).collect();
    if active.is_empty() {
        return Err(Error::InvalidArgument("all item vectors are zero".into()));
    }
    if active.len() < n {
        log::warn!(
            "{} zero item vectors assigned to interest 0 by tie-break",
            n - active.len()
        );
    }
    let point = |i: usize| &points[i * d..(i + 1) * d];

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = vec![0.0f64; kk * d];
    let seeds = seed_plus_plus(&active, kk, &point, &mut rng);
    for (c, &i) in seeds.iter().enumerate() {
        centroids[c * d..(c + 1) * d].copy_from_slice(point(i));
    }

    let mut assign = vec![0u32; n];
    let mut trace = Vec::new();
    for iter in 0..iters.max(1) {
        let next: Vec<(u32, f64)> = (0..n)
            .into_par_iter()
            .map(|i| {
                if !nonzero[i] {
                    return (0, 0.0);
                }
                let p = point(i);
                let mut best = (0u32, f64::NEG_INFINITY);
                for c in 0..kk {
                    let s = cos(p, &centroids[c * d..(c + 1) * d]);
                    if s > best.1 {
                        best = (c as u32, s);
                    }
                }
                best
            })
            .collect();
        let mut changed = 0usize;
        let mut sims = vec![0.0f64; n];
        for (i, &(c, s)) in next.iter().enumerate() {
            if assign[i] != c || iter == 0 {
                changed += 1;
            }
            assign[i] = c;
            sims[i] = s;
        }

        let mut sizes = vec![0usize; kk];
        for &i in &active {
            sizes[assign[i] as usize] += 1;
        }
        for c in 0..kk {
            if sizes[c] > 0 {
                continue;
            }
            let donor = active
                .iter()
                .copied()
                .filter(|&i| sizes[assign[i] as usize] > 1)
                .min_by(|&a, &b| sims[a].total_cmp(&sims[b]).then(a.cmp(&b)));
            if let Some(i) = donor {
                sizes[assign[i] as usize] -= 1;
                sizes[c] = 1;
                assign[i] = c as u32;
                sims[i] = 1.0;
                centroids[c * d..(c + 1) * d].copy_from_slice(point(i));
                changed += 1;
            }
        }

        let mut sums = vec![0.0f64; kk * d];
        for &i in &active {
            let c = assign[i] as usize;
            for (s, x) in sums[c * d..(c + 1) * d].iter_mut().zip(point(i)) {
                *s += x;
            }
        }
        for c in 0..kk {
            let row = &mut sums[c * d..(c + 1) * d];
            // a cluster whose members cancel out keeps its old direction
            if normalize(row) {
                centroids[c * d..(c + 1) * d].copy_from_slice(row);
            }
        }
        let objective: f64 = active
            .iter()
            .map(|&i| cos(point(i), &centroids[assign[i] as usize * d..(assign[i] as usize + 1) * d]))
            .sum();
        log::debug!("progress stage=cluster iter={} objective={objective:.6} changed={changed}", iter + 1);
        trace.push(objective);
        if changed == 0 {
            break;
        }
    }

    Ok(ClusterAssignment {
        num_interests: k,
        dim: d,
        item_to_interest: assign,
        centroids,
        objective_trace: trace,
    })
}

fn seed_plus_plus<'a>(
    active: &[usize],
    k: usize,
    point: &impl Fn(usize) -> &'a [f64],
    rng: &mut ChaCha8Rng,
) -> Vec<usize> {
    // greedy variant: several draws per step, keep the one that lowers the
    // potential most
    let trials = 2 + (k as f64).ln().floor() as usize;
    let mut chosen = vec![active[rng.random_range(0..active.len())]];
    let mut dist: Vec<f64> = active
        .iter()
        .map(|&i| (1.0 - cos(point(i), point(chosen[0]))).max(0.0))
        .collect();
    let mut candidate_dist = vec![0.0f64; active.len()];
    let mut best_dist = vec![0.0f64; active.len()];
    while chosen.len() < k {
        let total: f64 = dist.iter().sum();
        if !(total > 0.0) {
            // fewer distinct directions than clusters
            let next = active[rng.random_range(0..active.len())];
            chosen.push(next);
            continue;
        }
        let mut best: Option<(usize, f64)> = None;
        for _ in 0..trials {
            let mut r = rng.random::<f64>() * total;
            let mut pick = active.len() - 1;
            for (j, &w) in dist.iter().enumerate() {
                if r < w {
                    pick = j;
                    break;
                }
                r -= w;
            }
            let c = point(active[pick]);
            let mut potential = 0.0;
            for (j, &i) in active.iter().enumerate() {
                candidate_dist[j] = dist[j].min((1.0 - cos(point(i), c)).max(0.0));
                potential += candidate_dist[j];
            }
            if best.is_none_or(|(_, p)| potential < p) {
                best = Some((pick, potential));
                std::mem::swap(&mut best_dist, &mut candidate_dist);
            }
        }
        let (pick, _) = best.expect("at least one trial");
        chosen.push(active[pick]);
        std::mem::swap(&mut dist, &mut best_dist);
    }
    chosen
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table(items: &[[f32; 2]]) -> EmbeddingTable {
        let flat: Vec<f32> = items.iter().flatten().copied().collect();
        EmbeddingTable::new(2, vec![0.0, 0.0], flat).unwrap()
    }

    #[test]
    fn single_cluster_centroid_is_mean_direction() {
        let emb = table(&[[1.0, 0.0], [0.0, 2.0], [3.0, 3.0]]);
        let c = cluster_items(&emb, 1, 10, 1).unwrap();
        assert!(c.item_to_interest().iter().all(|&k| k == 0));
        let s = 0.5f64.sqrt();
        let mean = [1.0 + s, 1.0 + s];
        let norm = (mean[0] * mean[0] + mean[1] * mean[1]).sqrt();
        for (a, b) in c.centroid(0).iter().zip(mean) {
            assert!((a - b / norm).abs() < 1e-12);
        }
    }

    #[test]
    fn antipodal_groups_separate() {
        let emb = table(&[[1.0, 0.0], [2.0, 0.0], [-1.0, 0.0], [-3.0, 0.0]]);
        let c = cluster_items(&emb, 2, 10, 3).unwrap();
        let a = c.item_to_interest();
        assert_eq!(a[0], a[1]);
        assert_eq!(a[2], a[3]);
        assert_ne!(a[0], a[2]);
        assert!((c.objective_trace().last().unwrap() - 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_vector_goes_to_interest_zero() {
        let emb = table(&[[1.0, 0.0], [0.0, 0.0], [0.0, 1.0]]);
        let c = cluster_items(&emb, 2, 10, 0).unwrap();
        assert_eq!(c.interest_of(1), Some(0));
    }

    #[test]
    fn rejects_bad_k() {
        let emb = table(&[[1.0, 0.0]]);
        assert!(matches!(cluster_items(&emb, 2, 5, 0), Err(Error::InvalidArgument(_))));
        assert!(matches!(cluster_items(&emb, 0, 5, 0), Err(Error::InvalidArgument(_))));
        let zero = table(&[[0.0, 0.0], [0.0, 0.0]]);
        assert!(cluster_items(&zero, 1, 5, 0).is_err());
    }

    #[test]
    fn empty_cluster_is_repaired() {
        // three identical points and one distinct: k=3 forces a steal
        let emb = table(&[[1.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]);
        let c = cluster_items(&emb, 3, 10, 0).unwrap();
        let mut used: Vec<u32> = c.item_to_interest().to_vec();
        used.sort_unstable();
        used.dedup();
        assert_eq!(used.len(), 3);
        for k in 0..3 {
            let n: f64 = c.centroid(k).iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-9);
        }
    }
}

//! Shallow user/item co-embeddings trained with negative sampling.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::EngagementGraph;

/// How a (user, item) pair is scored during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreFunction {
    /// `<u, i>`
    #[default]
    Dot,
    /// `-||u + r - i||^2` with a single learned relation vector `r`.
    Translation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbedConfig {
    pub dim: usize,
    pub epochs: usize,
    pub negatives: usize,
    pub learning_rate: f32,
    pub score: ScoreFunction,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            dim: 128,
            epochs: 20,
            negatives: 10,
            learning_rate: 0.05,
            score: ScoreFunction::Dot,
            seed: 0,
        }
    }
}

/// Row-major user and item vectors sharing one dimension.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingTable {
    dim: usize,
    users: Vec<f32>,
    items: Vec<f32>,
}

impl EmbeddingTable {
    pub fn new(dim: usize, users: Vec<f32>, items: Vec<f32>) -> Result<Self> {
        if dim == 0 || users.len() % dim != 0 || items.len() % dim != 0 {
            return Err(Error::InvalidArgument(format!(
                "embedding buffers ({}, {}) not divisible by dim {dim}",
                users.len(),
                items.len()
            )));
        }
        if users.iter().chain(&items).any(|x| !x.is_finite()) {
            return Err(Error::InvalidArgument("non-finite embedding entry".into()));
        }
        Ok(Self { dim, users, items })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn num_users(&self) -> usize {
        self.users.len() / self.dim
    }

    pub fn num_items(&self) -> usize {
        self.items.len() / self.dim
    }

    pub fn user(&self, u: u32) -> &[f32] {
        let s = u as usize * self.dim;
        &self.users[s..s + self.dim]
    }

    pub fn item(&self, i: u32) -> &[f32] {
        let s = i as usize * self.dim;
        &self.items[s..s + self.dim]
    }

    pub fn dot(&self, u: u32, i: u32) -> f32 {
        dot(self.user(u), self.item(i))
    }
}

pub(crate) fn dot(a: &[f32], b: &[f32]) -> f32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Per-epoch mean loss, one entry per epoch.
pub type LossHistory = Vec<f64>;

/// Trains embeddings on every engagement of `train` with a logistic loss
/// against `negatives` uniformly drawn train items per positive.
///
/// Users and items with no train engagement end with zero vectors; they carry
/// no signal and downstream consumers treat them as degenerate.
pub fn train_embeddings(
    train: &EngagementGraph,
    cfg: &EmbedConfig,
) -> Result<(EmbeddingTable, LossHistory)> {
    if cfg.dim == 0 || cfg.epochs == 0 {
        return Err(Error::InvalidArgument("dim and epochs must be >= 1".into()));
    }
    if train.edge_count() == 0 {
        return Err(Error::EmptyInput("train graph has no edges".into()));
    }
    let d = cfg.dim;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scale = 0.5 / (d as f32).sqrt();
    let mut init = |n: usize| -> Vec<f32> {
        (0..n * d).map(|_| (rng.random::<f32>() * 2.0 - 1.0) * scale).collect()
    };
    let mut users = init(train.num_users() as usize);
    let mut items = init(train.num_items() as usize);
    let mut relation = vec![0.0f32; d];

    let item_degree = train.item_degrees();
    let user_degree = train.user_degrees();
    let negative_pool: Vec<u32> = (0..train.num_items())
        .filter(|&i| item_degree[i as usize] > 0)
        .collect();

    let mut order: Vec<(u32, u32)> = train.edges().iter().map(|e| (e.user, e.item)).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut grad_u = vec![0.0f32; d];
    let mut grad_i = vec![0.0f32; d];
    let mut diff = vec![0.0f32; d];

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0f64;
        for &(u, pos) in &order {
            grad_u.iter_mut().for_each(|g| *g = 0.0);
            let us = u as usize * d;
            for n in 0..=cfg.negatives {
                let (item, label) = if n == 0 {
                    (pos, 1.0f32)
                } else {
                    (negative_pool[rng.random_range(0..negative_pool.len())], 0.0)
                };
                let is = item as usize * d;
                let (uv, iv) = (&users[us..us + d], &items[is..is + d]);
                let score = match cfg.score {
                    ScoreFunction::Dot => dot(uv, iv),
                    ScoreFunction::Translation => {
                        for k in 0..d {
                            diff[k] = uv[k] + relation[k] - iv[k];
                        }
                        -dot(&diff, &diff)
                    }
                };
                let p = sigmoid(score);
                loss_sum -= if label > 0.5 {
                    (p.max(1e-7) as f64).ln()
                } else {
                    ((1.0 - p).max(1e-7) as f64).ln()
                };
                // d(loss)/d(score), scaled by the step size
                let g = cfg.learning_rate * (p - label);
                match cfg.score {
                    ScoreFunction::Dot => {
                        for k in 0..d {
                            grad_u[k] += g * iv[k];
                            grad_i[k] = g * uv[k];
                        }
                    }
                    ScoreFunction::Translation => {
                        for k in 0..d {
                            grad_u[k] -= 2.0 * g * diff[k];
                            grad_i[k] = 2.0 * g * diff[k];
                            relation[k] += 2.0 * g * diff[k];
                        }
                    }
                }
                for k in 0..d {
                    items[is + k] -= grad_i[k];
                }
            }
            for k in 0..d {
                users[us + k] -= grad_u[k];
            }
        }
        let mean = loss_sum / order.len() as f64;
        log::info!("progress stage=embed epoch={} loss={mean:.6}", epoch + 1);
        history.push(mean);
    }

    for (u, &deg) in user_degree.iter().enumerate() {
        if deg == 0 {
            users[u * d..(u + 1) * d].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    for (i, &deg) in item_degree.iter().enumerate() {
        if deg == 0 {
            items[i * d..(i + 1) * d].iter_mut().for_each(|x| *x = 0.0);
        }
    }
    Ok((EmbeddingTable::new(d, users, items)?, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Edge;

    #[test]
    fn single_edge_one_epoch() {
        let g = EngagementGraph::from_dense_edges(
            vec![Edge {
                user: 0,
                item: 0,
                chunk: 0,
            }],
            1,
            1,
            1,
        )
        .unwrap();
        let cfg = EmbedConfig {
            dim: 4,
            epochs: 1,
            ..Default::default()
        };
        let (emb, history) = train_embeddings(&g, &cfg).unwrap();
        assert_eq!(history.len(), 1);
        assert!(emb.user(0).iter().chain(emb.item(0)).all(|x| x.is_finite()));
    }

    #[test]
    fn rejects_zero_dim_or_epochs() {
        let g = EngagementGraph::from_dense_edges(
            vec![Edge {
                user: 0,
                item: 0,
                chunk: 0,
            }],
            1,
            1,
            1,
        )
        .unwrap();
        for cfg in [
            EmbedConfig {
                dim: 0,
                ..Default::default()
            },
            EmbedConfig {
                epochs: 0,
                ..Default::default()
            },
        ] {
            assert!(matches!(train_embeddings(&g, &cfg), Err(Error::InvalidArgument(_))));
        }
        // the published configuration is a valid input
        let cfg = EmbedConfig {
            dim: 128,
            epochs: 20,
            ..Default::default()
        };
        assert!(train_embeddings(&g, &cfg).is_ok());
    }

    #[test]
    fn untouched_rows_are_zero() {
        let g = EngagementGraph::from_dense_edges(
            vec![Edge {
                user: 0,
                item: 1,
                chunk: 0,
            }],
            2,
            2,
            1,
        )
        .unwrap();
        let cfg = EmbedConfig {
            dim: 3,
            epochs: 2,
            ..Default::default()
        };
        let (emb, _) = train_embeddings(&g, &cfg).unwrap();
        assert!(emb.user(1).iter().all(|&x| x == 0.0));
        assert!(emb.item(0).iter().all(|&x| x == 0.0));
        assert!(emb.item(1).iter().any(|&x| x != 0.0));
    }
}

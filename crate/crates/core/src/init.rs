//! The t=0 initialization artifact and the static counting mixture built
//! from it.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::counts::SparseCounts;
use crate::error::{Error, Result};
use crate::graph::EngagementGraph;
use crate::io;
use crate::kmeans::ClusterAssignment;

pub const DEFAULT_ALPHA: f64 = 0.1;
pub const DEFAULT_BETA: f64 = 0.01;

const ARTIFACT_KIND: &str = "micro-init";
const ARTIFACT_VERSION: u32 = 1;

/// Per-user interest counts, one row per dense user id.
pub type UserInterestTable = Vec<SparseCounts>;

/// Counters derived from labelling every train engagement with its item's
/// interest, plus the sparse per-user prior supports.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InitArtifact {
    cluster: ClusterAssignment,
    num_users: u32,
    num_items: u32,
    user_totals: Vec<u32>,
    user_interest: Arc<UserInterestTable>,
    interest_totals: Vec<u64>,
    item_interest: Vec<SparseCounts>,
    alpha_support: Vec<Vec<u32>>,
    alpha: f64,
    beta: f64,
}

/// Labels each train engagement with its item's interest and counts.
pub fn build_init(
    train: &EngagementGraph,
    cluster: &ClusterAssignment,
    alpha: f64,
    beta: f64,
) -> Result<InitArtifact> {
    if !(alpha > 0.0 && beta > 0.0 && alpha.is_finite() && beta.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "alpha ({alpha}) and beta ({beta}) must be positive"
        )));
    }
    let k = cluster.num_interests();
    let (nu, ni) = (train.num_users() as usize, train.num_items() as usize);
    let mut user_totals = vec![0u32; nu];
    let mut user_interest = vec![SparseCounts::new(); nu];
    let mut interest_totals = vec![0u64; k as usize];
    let mut item_interest = vec![SparseCounts::new(); ni];
    for e in train.edges() {
        let interest = cluster.interest_of(e.item).ok_or_else(|| {
            Error::Inconsistent(format!(
                "train item {} has no interest (cluster map covers {} items)",
                e.item,
                cluster.num_items()
            ))
        })?;
        user_totals[e.user as usize] += 1;
        user_interest[e.user as usize].increment(interest);
        interest_totals[interest as usize] += 1;
        item_interest[e.item as usize].increment(interest);
    }
    let alpha_support = user_interest.iter().map(|row| row.keys().collect()).collect();
    let cold = user_totals.iter().filter(|&&n| n == 0).count();
    if cold > 0 {
        log::info!("{cold} of {nu} users have no train engagements (cold)");
    }
    Ok(InitArtifact {
        cluster: cluster.clone(),
        num_users: nu as u32,
        num_items: ni as u32,
        user_totals,
        user_interest: Arc::new(user_interest),
        interest_totals,
        item_interest,
        alpha_support,
        alpha,
        beta,
    })
}

impl InitArtifact {
    pub fn cluster(&self) -> &ClusterAssignment {
        &self.cluster
    }

    pub fn num_users(&self) -> u32 {
        self.num_users
    }

    pub fn num_items(&self) -> u32 {
        self.num_items
    }

    pub fn num_interests(&self) -> u32 {
        self.cluster.num_interests()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// `N_{u,0}`
    pub fn user_total(&self, u: u32) -> u32 {
        self.user_totals.get(u as usize).copied().unwrap_or(0)
    }

    /// `N_{u,k,0}`
    pub fn user_interest(&self, u: u32) -> &SparseCounts {
        static EMPTY: SparseCounts = SparseCounts::EMPTY;
        self.user_interest.get(u as usize).unwrap_or(&EMPTY)
    }

    pub fn user_interest_table(&self) -> &Arc<UserInterestTable> {
        &self.user_interest
    }

    /// `N_{k,0}`
    pub fn interest_totals(&self) -> &[u64] {
        &self.interest_totals
    }

    /// `N_{i,k,0}`
    pub fn item_interest(&self, i: u32) -> &SparseCounts {
        static EMPTY: SparseCounts = SparseCounts::EMPTY;
        self.item_interest.get(i as usize).unwrap_or(&EMPTY)
    }

    /// Interests with a positive train count for `u`, ascending. Empty for
    /// cold users and for users outside the train id space.
    pub fn support(&self, u: u32) -> &[u32] {
        self.alpha_support.get(u as usize).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn is_cold(&self, u: u32) -> bool {
        self.support(u).is_empty()
    }

    /// Prior mass `alpha_u(k)`: `alpha` on the support, zero elsewhere, and
    /// `alpha` on every interest for cold users.
    pub fn prior(&self, u: u32, k: u32) -> f64 {
        let support = self.support(u);
        if support.is_empty() || support.binary_search(&k).is_ok() {
            self.alpha
        } else {
            0.0
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        io::save_versioned(path, ARTIFACT_KIND, ARTIFACT_VERSION, self)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        io::load_versioned(path, ARTIFACT_KIND, ARTIFACT_VERSION)
    }
}

/// Counting estimates of `p(k|u)` and `p(i|k)` from the train labelling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MleMixture {
    interest_given_user: Vec<Vec<(u32, f64)>>,
    item_given_interest: Vec<Vec<(u32, f64)>>,
}

pub fn mle_mixture(init: &InitArtifact) -> MleMixture {
    let interest_given_user = (0..init.num_users())
        .map(|u| {
            let total = init.user_total(u) as f64;
            init.user_interest(u)
                .iter()
                .map(|(k, c)| (k, c as f64 / total))
                .collect()
        })
        .collect();
    let mut item_given_interest: Vec<Vec<(u32, f64)>> = vec![Vec::new(); init.num_interests() as usize];
    for i in 0..init.num_items() {
        for (k, c) in init.item_interest(i).iter() {
            let total = init.interest_totals()[k as usize] as f64;
            item_given_interest[k as usize].push((i, c as f64 / total));
        }
    }
    MleMixture {
        interest_given_user,
        item_given_interest,
    }
}

impl MleMixture {
    /// `p(k|u)` as sorted `(k, p)` pairs; empty for users with no counts.
    pub fn interests(&self, u: u32) -> &[(u32, f64)] {
        self.interest_given_user.get(u as usize).map(Vec::as_slice).unwrap_or(&[])
    }

    /// `p(i|k)` as `(item, p)` pairs sorted by item.
    pub fn items(&self, k: u32) -> &[(u32, f64)] {
        self.item_given_interest.get(k as usize).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn num_interests(&self) -> u32 {
        self.item_given_interest.len() as u32
    }

    /// `p(i|u) = sum_k p(k|u) p(i|k)`
    pub fn item_given_user(&self, u: u32, i: u32) -> f64 {
        self.interests(u)
            .iter()
            .map(|&(k, pk)| {
                let items = self.items(k);
                match items.binary_search_by_key(&i, |&(it, _)| it) {
                    Ok(pos) => pk * items[pos].1,
                    Err(_) => 0.0,
                }
            })
            .sum()
    }
}

//! Per-chunk collapsed Gibbs inference over the latent interest of every
//! engagement.
//!
//! A [`ChunkModel`] holds the assignments `z_t` of one chunk together with the
//! count tables they induce: user-interest counts on top of a base table
//! (train counts, optionally plus earlier chunks), item-interest counts and
//! interest totals for the chunk alone. The item side starts empty every
//! chunk.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::counts::SparseCounts;
use crate::error::{Error, Result};
use crate::graph::ChunkSlice;
use crate::init::{InitArtifact, UserInterestTable};

/// Where each chunk's user-interest counters start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UserCountMode {
    /// Every chunk starts from the train counts.
    #[default]
    ResetToTrain,
    /// Chunk `t` starts from the train counts plus the final assignments of
    /// every earlier chunk.
    Accumulate,
}

/// Distribution of the initial assignments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitDistribution {
    /// Uniform over the user's support, or over all interests for cold users.
    #[default]
    UniformOverSupport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub max_sweeps: usize,
    /// Stop once `|delta log_joint| / |log_joint|` between consecutive
    /// sweeps falls below this.
    pub convergence_tol: f64,
    pub seed: u64,
    pub user_count_mode: UserCountMode,
    pub init_distribution: InitDistribution,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            max_sweeps: 20,
            convergence_tol: 1e-4,
            seed: 0,
            user_count_mode: UserCountMode::ResetToTrain,
            init_distribution: InitDistribution::UniformOverSupport,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_sweeps == 0 || !(self.convergence_tol >= 0.0) {
            return Err(Error::InvalidArgument(
                "max_sweeps must be >= 1 and convergence_tol >= 0".into(),
            ));
        }
        Ok(())
    }

    /// The random stream for `chunk`, independent of other chunks.
    pub fn rng_for_chunk(&self, chunk: u32) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(chunk as u64 + 1);
        rng
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ChunkUser {
    user: u32,
    cold: bool,
    /// Interests this user may be assigned, ascending.
    candidates: Vec<u32>,
    /// `alpha_u(k) + base count` per candidate.
    prior: Vec<f64>,
    /// This chunk's assignments per candidate.
    counts: Vec<u32>,
}

impl ChunkUser {
    fn slot(&self, k: u32) -> Option<usize> {
        if self.cold {
            Some(k as usize)
        } else {
            self.candidates.binary_search(&k).ok()
        }
    }
}

/// One convergence diagnostic row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepDiagnostic {
    pub sweep: usize,
    pub log_joint: f64,
    pub changed: usize,
}

/// Sampler state for one chunk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChunkModel {
    chunk: u32,
    num_items: u32,
    num_interests: u32,
    alpha: f64,
    beta: f64,
    base: Arc<UserInterestTable>,
    users: Vec<ChunkUser>,
    /// `(user slot, item slot)` in scan order.
    engagements: Vec<(u32, u32)>,
    z: Vec<u32>,
    /// Items engaged in this chunk, ascending.
    pool: Vec<u32>,
    item_interest: Vec<SparseCounts>,
    interest_totals: Vec<u64>,
    sweeps: usize,
    converged: bool,
    log_joint: f64,
    underflow_events: usize,
    diagnostics: Vec<SweepDiagnostic>,
}

/// Unnormalized conditional weight of assigning interest `k` to an
/// engagement of `u` on item `i`, given the current tables with that
/// engagement already removed:
///
/// `(alpha_u(k) + N_uk) * (beta + N_ikt) / (I * beta + N_kt)`
pub fn gibbs_weight(u: u32, i: u32, k: u32, m: &ChunkModel, init: &InitArtifact) -> f64 {
    let beta = init.beta();
    (init.prior(u, k) + m.user_interest_count(u, k) as f64) * (beta + m.item_interest_count(i, k) as f64)
        / (init.num_items() as f64 * beta + m.interest_total(k) as f64)
}

/// Builds the initial state with base counts taken from the train table.
pub fn init_chunk(slice: &ChunkSlice, init: &InitArtifact, cfg: &SamplerConfig) -> ChunkModel {
    let mut rng = cfg.rng_for_chunk(slice.chunk());
    ChunkModel::initialize(slice, init, Arc::clone(init.user_interest_table()), &mut rng)
}

/// Runs [`init_chunk`] and sweeps until the relative change of the log joint
/// drops below `cfg.convergence_tol` or `cfg.max_sweeps` is reached. The
/// final sample is the point estimate.
pub fn fit_chunk(slice: &ChunkSlice, init: &InitArtifact, cfg: &SamplerConfig) -> ChunkModel {
    fit_chunk_with_base(slice, init, Arc::clone(init.user_interest_table()), cfg)
}

/// [`fit_chunk`] with an explicit user-interest base table, used when counts
/// accumulate across chunks.
pub fn fit_chunk_with_base(
    slice: &ChunkSlice,
    init: &InitArtifact,
    base: Arc<UserInterestTable>,
    cfg: &SamplerConfig,
) -> ChunkModel {
    let mut rng = cfg.rng_for_chunk(slice.chunk());
    let mut m = ChunkModel::initialize(slice, init, base, &mut rng);
    let mut prev = m.compute_log_joint();
    m.log_joint = prev;
    m.diagnostics.push(SweepDiagnostic {
        sweep: 0,
        log_joint: prev,
        changed: 0,
    });
    for _ in 0..cfg.max_sweeps.max(1) {
        let changed = m.sweep(&mut rng);
        let lj = m.compute_log_joint();
        m.log_joint = lj;
        m.diagnostics.push(SweepDiagnostic {
            sweep: m.sweeps,
            log_joint: lj,
            changed,
        });
        log::debug!(
            "progress stage=sweep chunk={} sweep={} log_joint={lj:.6} changed={changed}",
            m.chunk,
            m.sweeps
        );
        let delta = (lj - prev).abs();
        if delta == 0.0 || (lj != 0.0 && delta / lj.abs() < cfg.convergence_tol) {
            m.converged = true;
            break;
        }
        prev = lj;
    }
    if !m.converged {
        log::warn!(
            "chunk {} did not converge within {} sweeps",
            m.chunk,
            cfg.max_sweeps
        );
    }
    if m.underflow_events > 0 {
        log::warn!(
            "chunk {}: {} weight underflows resampled uniformly",
            m.chunk,
            m.underflow_events
        );
    }
    m
}

impl ChunkModel {
    fn empty(slice: &ChunkSlice, init: &InitArtifact, base: Arc<UserInterestTable>) -> Self {
        let k = init.num_interests();
        let pool: Vec<u32> = slice.item_counts().iter().map(|&(i, _)| i).collect();
        let mut users = Vec::with_capacity(slice.num_users());
        let mut engagements = Vec::with_capacity(slice.len());
        for (slot, (u, rows)) in slice.by_user().enumerate() {
            let support = init.support(u);
            let cold = support.is_empty();
            let candidates: Vec<u32> = if cold { (0..k).collect() } else { support.to_vec() };
            let base_row = base.get(u as usize);
            let prior = candidates
                .iter()
                .map(|&c| init.alpha() + base_row.map_or(0, |r| r.get(c)) as f64)
                .collect();
            users.push(ChunkUser {
                user: u,
                cold,
                counts: vec![0; candidates.len()],
                candidates,
                prior,
            });
            for &(_, item) in rows {
                let item_slot = pool.binary_search(&item).expect("pool built from slice");
                engagements.push((slot as u32, item_slot as u32));
            }
        }
        Self {
            chunk: slice.chunk(),
            num_items: init.num_items(),
            num_interests: k,
            alpha: init.alpha(),
            beta: init.beta(),
            base,
            users,
            z: Vec::with_capacity(engagements.len()),
            engagements,
            item_interest: vec![SparseCounts::new(); pool.len()],
            pool,
            interest_totals: vec![0; k as usize],
            sweeps: 0,
            converged: false,
            log_joint: 0.0,
            underflow_events: 0,
            diagnostics: Vec::new(),
        }
    }

    fn initialize(
        slice: &ChunkSlice,
        init: &InitArtifact,
        base: Arc<UserInterestTable>,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let mut m = Self::empty(slice, init, base);
        for j in 0..m.engagements.len() {
            let user = &m.users[m.engagements[j].0 as usize];
            let k = user.candidates[rng.random_range(0..user.candidates.len())];
            m.z.push(k);
            m.add(j, k);
        }
        m.log_joint = m.compute_log_joint();
        m
    }

    /// Rebuilds a model from a stored assignment vector.
    pub fn from_assignments(
        slice: &ChunkSlice,
        init: &InitArtifact,
        base: Arc<UserInterestTable>,
        z: &[u32],
    ) -> Result<Self> {
        let mut m = Self::empty(slice, init, base);
        if z.len() != m.engagements.len() {
            return Err(Error::Inconsistent(format!(
                "{} assignments for {} engagements",
                z.len(),
                m.engagements.len()
            )));
        }
        for (j, &k) in z.iter().enumerate() {
            let user = &m.users[m.engagements[j].0 as usize];
            if user.slot(k).is_none() || k >= m.num_interests {
                return Err(Error::Inconsistent(format!(
                    "interest {k} not allowed for user {}",
                    user.user
                )));
            }
            m.z.push(k);
            m.add(j, k);
        }
        m.log_joint = m.compute_log_joint();
        Ok(m)
    }

    fn add(&mut self, j: usize, k: u32) {
        let (us, is) = self.engagements[j];
        let user = &mut self.users[us as usize];
        let slot = user.slot(k).expect("assignment within candidates");
        user.counts[slot] += 1;
        self.item_interest[is as usize].increment(k);
        self.interest_totals[k as usize] += 1;
    }

    fn remove(&mut self, j: usize, k: u32) {
        let (us, is) = self.engagements[j];
        let user = &mut self.users[us as usize];
        let slot = user.slot(k).expect("assignment within candidates");
        user.counts[slot] -= 1;
        self.item_interest[is as usize].decrement(k);
        self.interest_totals[k as usize] -= 1;
    }

    /// Removes engagement `j` from every table and returns its interest.
    /// The engagement must be reassigned with [`ChunkModel::assign`] before
    /// any other mutation.
    pub fn unassign(&mut self, j: usize) -> u32 {
        let k = self.z[j];
        self.remove(j, k);
        k
    }

    /// Assigns interest `k` to an engagement previously removed with
    /// [`ChunkModel::unassign`].
    pub fn assign(&mut self, j: usize, k: u32) -> Result<()> {
        let user = &self.users[self.engagements[j].0 as usize];
        if k >= self.num_interests || user.slot(k).is_none() {
            return Err(Error::InvalidArgument(format!(
                "interest {k} outside the candidates of user {}",
                user.user
            )));
        }
        self.z[j] = k;
        self.add(j, k);
        Ok(())
    }

    /// Resamples every engagement once in scan order and returns how many
    /// assignments changed.
    pub fn sweep(&mut self, rng: &mut impl Rng) -> usize {
        let i_beta = self.num_items as f64 * self.beta;
        let mut weights: Vec<f64> = Vec::new();
        let mut changed = 0;
        for j in 0..self.engagements.len() {
            let old = self.z[j];
            self.remove(j, old);
            let (us, is) = self.engagements[j];
            let user = &self.users[us as usize];
            let item_row = &self.item_interest[is as usize];
            weights.clear();
            let mut total = 0.0;
            for (c, &k) in user.candidates.iter().enumerate() {
                let w = (user.prior[c] + user.counts[c] as f64) * (self.beta + item_row.get(k) as f64)
                    / (i_beta + self.interest_totals[k as usize] as f64);
                total += w;
                weights.push(total);
            }
            let pick = if total > 0.0 && total.is_finite() {
                let r = rng.random::<f64>() * total;
                weights.partition_point(|&cum| cum <= r).min(weights.len() - 1)
            } else {
                self.underflow_events += 1;
                rng.random_range(0..weights.len())
            };
            let k = user.candidates[pick];
            if k != old {
                changed += 1;
            }
            self.z[j] = k;
            self.add(j, k);
        }
        self.sweeps += 1;
        changed
    }

    /// Log of the collapsed joint of this chunk's assignments and items given
    /// the base counts. Zero for an empty chunk.
    pub fn log_joint(&self) -> f64 {
        self.log_joint
    }

    /// Recomputes [`ChunkModel::log_joint`] from the tables.
    pub fn compute_log_joint(&self) -> f64 {
        let mut total = 0.0;
        for user in &self.users {
            let mut prior_sum = 0.0;
            let mut n = 0u64;
            for (&p, &c) in user.prior.iter().zip(&user.counts) {
                prior_sum += p;
                n += c as u64;
                if c > 0 {
                    total += ln_gamma(p + c as f64) - ln_gamma(p);
                }
            }
            total -= ln_gamma(prior_sum + n as f64) - ln_gamma(prior_sum);
        }
        let ln_gamma_beta = ln_gamma(self.beta);
        for row in &self.item_interest {
            for (_, c) in row.iter() {
                total += ln_gamma(self.beta + c as f64) - ln_gamma_beta;
            }
        }
        let i_beta = self.num_items as f64 * self.beta;
        let ln_gamma_i_beta = ln_gamma(i_beta);
        for &n in &self.interest_totals {
            if n > 0 {
                total -= ln_gamma(i_beta + n as f64) - ln_gamma_i_beta;
            }
        }
        total
    }

    pub fn chunk(&self) -> u32 {
        self.chunk
    }

    pub fn num_items(&self) -> u32 {
        self.num_items
    }

    pub fn num_interests(&self) -> u32 {
        self.num_interests
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn len(&self) -> usize {
        self.engagements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.engagements.is_empty()
    }

    pub fn z(&self) -> &[u32] {
        &self.z
    }

    /// `(user, item)` of engagement `j` in scan order.
    pub fn engagement(&self, j: usize) -> (u32, u32) {
        let (us, is) = self.engagements[j];
        (self.users[us as usize].user, self.pool[is as usize])
    }

    pub fn sweeps(&self) -> usize {
        self.sweeps
    }

    pub fn converged(&self) -> bool {
        self.converged
    }

    pub fn underflow_events(&self) -> usize {
        self.underflow_events
    }

    pub fn diagnostics(&self) -> &[SweepDiagnostic] {
        &self.diagnostics
    }

    /// Items with at least one engagement in the chunk, ascending.
    pub fn item_pool(&self) -> &[u32] {
        &self.pool
    }

    /// Users with at least one engagement in the chunk, ascending.
    pub fn users(&self) -> impl Iterator<Item = u32> + '_ {
        self.users.iter().map(|u| u.user)
    }

    fn user_entry(&self, u: u32) -> Option<&ChunkUser> {
        self.users
            .binary_search_by_key(&u, |e| e.user)
            .ok()
            .map(|pos| &self.users[pos])
    }

    /// `N_uk`: base count plus this chunk's assignments.
    pub fn user_interest_count(&self, u: u32, k: u32) -> u32 {
        let base = self.base.get(u as usize).map_or(0, |r| r.get(k));
        let chunk = self
            .user_entry(u)
            .and_then(|e| e.slot(k).map(|s| e.counts[s]))
            .unwrap_or(0);
        base + chunk
    }

    /// This chunk's assignments of `u` as `(interest, count)`, ascending.
    pub fn user_chunk_counts(&self, u: u32) -> Vec<(u32, u32)> {
        self.user_entry(u)
            .map(|e| {
                e.candidates
                    .iter()
                    .zip(&e.counts)
                    .filter(|(_, &c)| c > 0)
                    .map(|(&k, &c)| (k, c))
                    .collect()
            })
            .unwrap_or_default()
    }

    /// `N_ikt` row of `item`; empty for items outside the pool.
    pub fn item_interests(&self, item: u32) -> &SparseCounts {
        static EMPTY: SparseCounts = SparseCounts::EMPTY;
        match self.pool.binary_search(&item) {
            Ok(pos) => &self.item_interest[pos],
            Err(_) => &EMPTY,
        }
    }

    pub fn item_interest_count(&self, item: u32, k: u32) -> u32 {
        self.item_interests(item).get(k)
    }

    /// `N_kt`
    pub fn interest_total(&self, k: u32) -> u64 {
        self.interest_totals.get(k as usize).copied().unwrap_or(0)
    }

    pub fn interest_totals(&self) -> &[u64] {
        &self.interest_totals
    }

    /// Smoothed `phi_{k,t}(i) = (beta + N_ikt) / (I beta + N_kt)`.
    pub fn phi(&self, k: u32, item: u32) -> f64 {
        (self.beta + self.item_interest_count(item, k) as f64)
            / (self.num_items as f64 * self.beta + self.interest_total(k) as f64)
    }

    /// Unnormalized posterior masses `alpha_u(k) + N_uk` over the interests
    /// `u` may take: its support, or every interest for cold users.
    pub fn theta_masses(&self, u: u32, init: &InitArtifact) -> Vec<(u32, f64)> {
        let support = init.support(u);
        let candidates: Vec<u32> = if support.is_empty() {
            (0..self.num_interests).collect()
        } else {
            support.to_vec()
        };
        candidates
            .into_iter()
            .map(|k| (k, self.alpha + self.user_interest_count(u, k) as f64))
            .collect()
    }

    /// Base table plus this chunk's assignments, the next chunk's base when
    /// counts accumulate.
    pub fn accumulated_user_counts(&self) -> Arc<UserInterestTable> {
        let mut table: UserInterestTable = (*self.base).clone();
        for e in &self.users {
            if table.len() <= e.user as usize {
                table.resize(e.user as usize + 1, SparseCounts::new());
            }
            for (&k, &c) in e.candidates.iter().zip(&e.counts) {
                table[e.user as usize].add(k, c);
            }
        }
        Arc::new(table)
    }

    /// Sparse-triple text dump: header, assignments, then the user, item and
    /// interest count tables.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "# micro chunk model");
        let _ = writeln!(out, "version\t1");
        let _ = writeln!(out, "chunk\t{}", self.chunk);
        let _ = writeln!(out, "interests\t{}", self.num_interests);
        let _ = writeln!(out, "items\t{}", self.num_items);
        let _ = writeln!(out, "sweeps\t{}", self.sweeps);
        let _ = writeln!(out, "converged\t{}", self.converged);
        let _ = writeln!(out, "underflow\t{}", self.underflow_events);
        let _ = writeln!(out, "log_joint\t{}", self.log_joint);
        let _ = writeln!(out, "[assignments]");
        for (j, &k) in self.z.iter().enumerate() {
            let (u, i) = self.engagement(j);
            let _ = writeln!(out, "{u}\t{i}\t{k}");
        }
        let _ = writeln!(out, "[user_interest]");
        for e in &self.users {
            for (&k, &c) in e.candidates.iter().zip(&e.counts) {
                if c > 0 {
                    let total = self.user_interest_count(e.user, k);
                    let _ = writeln!(out, "{}\t{k}\t{total}", e.user);
                }
            }
        }
        let _ = writeln!(out, "[item_interest]");
        for (item, row) in self.pool.iter().zip(&self.item_interest) {
            for (k, c) in row.iter() {
                let _ = writeln!(out, "{item}\t{k}\t{c}");
            }
        }
        let _ = writeln!(out, "[interest]");
        for (k, &n) in self.interest_totals.iter().enumerate() {
            if n > 0 {
                let _ = writeln!(out, "{k}\t{n}");
            }
        }
        out
    }

    /// Parses a [`ChunkModel::to_text`] dump against the slice and base it
    /// was fitted on. The dump must reproduce exactly.
    pub fn from_text(
        text: &str,
        slice: &ChunkSlice,
        init: &InitArtifact,
        base: Arc<UserInterestTable>,
    ) -> Result<Self> {
        let bad = |line: usize, msg: &str| Error::Parse {
            line,
            message: msg.to_string(),
        };
        let mut header = std::collections::HashMap::new();
        let mut z = Vec::new();
        let mut expected = Vec::new();
        let mut section = "";
        for (n, line) in text.lines().enumerate() {
            let n = n + 1;
            if line.starts_with('#') || line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                section = line;
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            match section {
                "" => {
                    if fields.len() != 2 {
                        return Err(bad(n, "header lines are key<TAB>value"));
                    }
                    header.insert(fields[0].to_string(), fields[1].to_string());
                }
                "[assignments]" => {
                    let parsed: Vec<u32> = fields
                        .iter()
                        .map(|f| f.parse::<u32>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| bad(n, &e.to_string()))?;
                    if parsed.len() != 3 {
                        return Err(bad(n, "assignment lines are user<TAB>item<TAB>interest"));
                    }
                    expected.push((parsed[0], parsed[1]));
                    z.push(parsed[2]);
                }
                _ => {}
            }
        }
        let get = |key: &str| {
            header
                .get(key)
                .ok_or_else(|| Error::Parse {
                    line: 0,
                    message: format!("missing header key {key}"),
                })
        };
        if get("version")? != "1" {
            return Err(bad(0, "unsupported chunk model version"));
        }
        let mut m = Self::from_assignments(slice, init, base, &z)?;
        for (j, &pair) in expected.iter().enumerate() {
            if m.engagement(j) != pair {
                return Err(Error::Inconsistent(format!(
                    "engagement {j} is {:?} in the slice but {pair:?} in the dump",
                    m.engagement(j)
                )));
            }
        }
        let parse_num = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| bad(0, &format!("bad value for {key}")))
        };
        m.sweeps = parse_num("sweeps")?;
        m.underflow_events = parse_num("underflow")?;
        m.converged = get("converged")? == "true";
        m.log_joint = get("log_joint")?
            .parse()
            .map_err(|_| bad(0, "bad log_joint"))?;
        if m.to_text() != text {
            return Err(Error::Inconsistent(
                "chunk model dump does not match its own tables".into(),
            ));
        }
        Ok(m)
    }

    /// Per-sweep diagnostics as `sweep<TAB>log_joint<TAB>changed` lines.
    pub fn diagnostics_text(&self) -> String {
        let mut out = String::from("sweep\tlog_joint\tchanged\n");
        for d in &self.diagnostics {
            let _ = writeln!(out, "{}\t{}\t{}", d.sweep, d.log_joint, d.changed);
        }
        out
    }
}

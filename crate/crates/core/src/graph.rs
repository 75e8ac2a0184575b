//! Temporal bipartite engagement graphs: ingestion, re-chunking, splitting
//! and per-chunk slices.

use std::collections::HashMap;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Bidirectional map between raw ids found in the input and dense indices.
/// Dense indices are assigned in order of first appearance.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(from = "Vec<u64>", into = "Vec<u64>")]
pub struct IdMap {
    raw: Vec<u64>,
    index: HashMap<u64, u32>,
}

impl IdMap {
    pub fn intern(&mut self, raw: u64) -> u32 {
        if let Some(&dense) = self.index.get(&raw) {
            return dense;
        }
        let dense = self.raw.len() as u32;
        self.raw.push(raw);
        self.index.insert(raw, dense);
        dense
    }

    pub fn dense(&self, raw: u64) -> Option<u32> {
        self.index.get(&raw).copied()
    }

    pub fn raw(&self, dense: u32) -> u64 {
        self.raw[dense as usize]
    }

    pub fn len(&self) -> usize {
        self.raw.len()
    }

    pub fn is_empty(&self) -> bool {
        self.raw.is_empty()
    }
}

impl From<Vec<u64>> for IdMap {
    fn from(raw: Vec<u64>) -> Self {
        let index = raw.iter().enumerate().map(|(d, &r)| (r, d as u32)).collect();
        Self { raw, index }
    }
}

impl From<IdMap> for Vec<u64> {
    fn from(map: IdMap) -> Self {
        map.raw
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Edge {
    pub user: u32,
    pub item: u32,
    pub chunk: u32,
}

/// Field separator of an edge-list file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Delimiter {
    Char(char),
    /// Any run of ASCII whitespace.
    Whitespace,
}

impl Default for Delimiter {
    fn default() -> Self {
        Delimiter::Char('\t')
    }
}

impl FromStr for Delimiter {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tab" | "\\t" | "\t" => Ok(Delimiter::Char('\t')),
            "comma" | "," => Ok(Delimiter::Char(',')),
            "space" | " " => Ok(Delimiter::Char(' ')),
            "whitespace" | "ws" => Ok(Delimiter::Whitespace),
            other => {
                let mut chars = other.chars();
                match (chars.next(), chars.next()) {
                    (Some(c), None) => Ok(Delimiter::Char(c)),
                    _ => Err(Error::InvalidArgument(format!("unknown delimiter {other:?}"))),
                }
            }
        }
    }
}

impl fmt::Display for Delimiter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Delimiter::Char('\t') => write!(f, "tab"),
            Delimiter::Char(',') => write!(f, "comma"),
            Delimiter::Char(' ') => write!(f, "space"),
            Delimiter::Char(c) => write!(f, "{c}"),
            Delimiter::Whitespace => write!(f, "whitespace"),
        }
    }
}

/// A time-chunked bipartite multiset of (user, item, chunk) engagements.
///
/// Immutable after construction. Chunks are contiguous ordinals starting at
/// zero; duplicate triples are kept as distinct engagements.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EngagementGraph {
    edges: Vec<Edge>,
    num_users: u32,
    num_items: u32,
    num_chunks: u32,
    users: Arc<IdMap>,
    items: Arc<IdMap>,
}

impl EngagementGraph {
    /// Builds a graph from raw triples. User and item ids are densely
    /// re-indexed; ordinals are compacted to `0..T` preserving order.
    pub fn from_raw_edges(raw: &[(u64, u64, i64)]) -> Result<Self> {
        if raw.is_empty() {
            return Err(Error::EmptyInput("no edges".into()));
        }
        let mut ordinals: Vec<i64> = raw.iter().map(|e| e.2).collect();
        ordinals.sort_unstable();
        ordinals.dedup();

        let mut users = IdMap::default();
        let mut items = IdMap::default();
        let edges = raw
            .iter()
            .map(|&(u, i, t)| Edge {
                user: users.intern(u),
                item: items.intern(i),
                chunk: ordinals.binary_search(&t).expect("ordinal collected above") as u32,
            })
            .collect();
        Ok(Self {
            edges,
            num_users: users.len() as u32,
            num_items: items.len() as u32,
            num_chunks: ordinals.len() as u32,
            users: Arc::new(users),
            items: Arc::new(items),
        })
    }

    /// Builds a graph over an existing dense id space. Chunks are taken as
    /// given and must be below `num_chunks`.
    pub fn from_dense_edges(
        edges: Vec<Edge>,
        num_users: u32,
        num_items: u32,
        num_chunks: u32,
    ) -> Result<Self> {
        let users = IdMap::from((0..num_users as u64).collect::<Vec<_>>());
        let items = IdMap::from((0..num_items as u64).collect::<Vec<_>>());
        Self::with_id_maps(edges, num_chunks, Arc::new(users), Arc::new(items))
    }

    fn with_id_maps(
        edges: Vec<Edge>,
        num_chunks: u32,
        users: Arc<IdMap>,
        items: Arc<IdMap>,
    ) -> Result<Self> {
        let (num_users, num_items) = (users.len() as u32, items.len() as u32);
        if let Some(bad) = edges
            .iter()
            .find(|e| e.user >= num_users || e.item >= num_items || e.chunk >= num_chunks)
        {
            return Err(Error::InvalidArgument(format!(
                "edge {bad:?} outside id space ({num_users} users, {num_items} items, {num_chunks} chunks)"
            )));
        }
        Ok(Self {
            edges,
            num_users,
            num_items,
            num_chunks,
            users,
            items,
        })
    }

    pub fn edges(&self) -> &[Edge] {
        &self.edges
    }

    pub fn num_users(&self) -> u32 {
        self.num_users
    }

    pub fn num_items(&self) -> u32 {
        self.num_items
    }

    pub fn num_chunks(&self) -> u32 {
        self.num_chunks
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn user_ids(&self) -> &IdMap {
        &self.users
    }

    pub fn item_ids(&self) -> &IdMap {
        &self.items
    }

    pub fn user_degrees(&self) -> Vec<u32> {
        let mut deg = vec![0u32; self.num_users as usize];
        for e in &self.edges {
            deg[e.user as usize] += 1;
        }
        deg
    }

    pub fn item_degrees(&self) -> Vec<u32> {
        let mut deg = vec![0u32; self.num_items as usize];
        for e in &self.edges {
            deg[e.item as usize] += 1;
        }
        deg
    }

    pub fn stats(&self) -> GraphStats {
        let (min_user_degree, max_user_degree) = min_max(&self.user_degrees());
        let (min_item_degree, max_item_degree) = min_max(&self.item_degrees());
        GraphStats {
            users: self.num_users,
            items: self.num_items,
            chunks: self.num_chunks,
            edges: self.edges.len(),
            min_user_degree,
            max_user_degree,
            min_item_degree,
            max_item_degree,
        }
    }

    /// Maps every chunk to `chunk / factor`.
    pub fn regroup_chunks(&self, factor: u32) -> Result<Self> {
        if factor == 0 {
            return Err(Error::InvalidArgument("regroup factor must be >= 1".into()));
        }
        let edges = self
            .edges
            .iter()
            .map(|e| Edge {
                chunk: e.chunk / factor,
                ..*e
            })
            .collect();
        Ok(Self {
            edges,
            num_chunks: self.num_chunks.div_ceil(factor),
            ..self.clone_meta()
        })
    }

    /// Regroups by `spec.regroup_factor`, then partitions into a train graph
    /// (every chunk below `t_split`, relabelled as chunk 0) and one slice per
    /// held-out chunk in order.
    pub fn split(&self, spec: &SplitSpec) -> Result<(EngagementGraph, Vec<ChunkSlice>)> {
        let grouped = self.regroup_chunks(spec.regroup_factor)?;
        let total = grouped.num_chunks;
        if spec.t_split < 1 || spec.t_split > total {
            return Err(Error::InvalidSplit(format!(
                "t_split {} outside [1, {total}]",
                spec.t_split
            )));
        }
        let mut train_edges = Vec::new();
        let mut test_edges: Vec<Vec<(u32, u32)>> = vec![Vec::new(); (total - spec.t_split) as usize];
        for e in &grouped.edges {
            if e.chunk < spec.t_split {
                train_edges.push(Edge { chunk: 0, ..*e });
            } else {
                test_edges[(e.chunk - spec.t_split) as usize].push((e.user, e.item));
            }
        }
        let train = Self {
            edges: train_edges,
            num_chunks: 1,
            ..grouped.clone_meta()
        };
        let test = test_edges
            .into_iter()
            .enumerate()
            .map(|(j, pairs)| ChunkSlice::new(spec.t_split + j as u32, pairs))
            .collect();
        Ok((train, test))
    }

    /// All engagements of `chunk` as a slice.
    pub fn slice(&self, chunk: u32) -> ChunkSlice {
        let pairs = self
            .edges
            .iter()
            .filter(|e| e.chunk == chunk)
            .map(|e| (e.user, e.item))
            .collect();
        ChunkSlice::new(chunk, pairs)
    }

    pub fn chunk_slices(&self) -> Vec<ChunkSlice> {
        let mut pairs: Vec<Vec<(u32, u32)>> = vec![Vec::new(); self.num_chunks as usize];
        for e in &self.edges {
            pairs[e.chunk as usize].push((e.user, e.item));
        }
        pairs
            .into_iter()
            .enumerate()
            .map(|(t, p)| ChunkSlice::new(t as u32, p))
            .collect()
    }

    /// Drops engagements whose user or item degree falls outside the given
    /// bounds (computed once on the input) and re-indexes what remains.
    pub fn filter_degrees(&self, filter: &DegreeFilter) -> Result<Self> {
        let ud = self.user_degrees();
        let id = self.item_degrees();
        let keep = |e: &Edge| {
            let (u, i) = (ud[e.user as usize], id[e.item as usize]);
            u >= filter.min_user && u <= filter.max_user && i >= filter.min_item && i <= filter.max_item
        };
        self.rebuild(self.edges.iter().filter(|e| keep(e)))
    }

    /// Keeps every engagement of a random `fraction` of users and re-indexes.
    pub fn subsample_users(&self, fraction: f64, seed: u64) -> Result<Self> {
        if !(fraction > 0.0 && fraction <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "subsample fraction {fraction} not in (0, 1]"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let keep: Vec<bool> = (0..self.num_users).map(|_| rng.random::<f64>() < fraction).collect();
        self.rebuild(self.edges.iter().filter(|e| keep[e.user as usize]))
    }

    fn rebuild<'a>(&self, edges: impl Iterator<Item = &'a Edge>) -> Result<Self> {
        let raw: Vec<(u64, u64, i64)> = edges
            .map(|e| (self.users.raw(e.user), self.items.raw(e.item), e.chunk as i64))
            .collect();
        Self::from_raw_edges(&raw)
    }

    fn clone_meta(&self) -> Self {
        Self {
            edges: Vec::new(),
            num_users: self.num_users,
            num_items: self.num_items,
            num_chunks: self.num_chunks,
            users: Arc::clone(&self.users),
            items: Arc::clone(&self.items),
        }
    }
}

fn min_max(values: &[u32]) -> (u32, u32) {
    let min = values.iter().copied().min().unwrap_or(0);
    let max = values.iter().copied().max().unwrap_or(0);
    (min, max)
}

/// Inclusive degree bounds for [`EngagementGraph::filter_degrees`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DegreeFilter {
    pub min_user: u32,
    pub max_user: u32,
    pub min_item: u32,
    pub max_item: u32,
}

impl Default for DegreeFilter {
    fn default() -> Self {
        Self {
            min_user: 0,
            max_user: u32::MAX,
            min_item: 0,
            max_item: u32::MAX,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphStats {
    pub users: u32,
    pub items: u32,
    pub chunks: u32,
    pub edges: usize,
    pub min_user_degree: u32,
    pub max_user_degree: u32,
    pub min_item_degree: u32,
    pub max_item_degree: u32,
}

impl fmt::Display for GraphStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "users={}", self.users)?;
        writeln!(f, "items={}", self.items)?;
        writeln!(f, "chunks={}", self.chunks)?;
        writeln!(f, "edges={}", self.edges)?;
        writeln!(f, "min_user_degree={}", self.min_user_degree)?;
        writeln!(f, "max_user_degree={}", self.max_user_degree)?;
        writeln!(f, "min_item_degree={}", self.min_item_degree)?;
        write!(f, "max_item_degree={}", self.max_item_degree)
    }
}

/// Train/test partition of the chunk axis, applied after regrouping raw
/// ordinals by `regroup_factor`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitSpec {
    pub t_split: u32,
    pub regroup_factor: u32,
}

impl SplitSpec {
    pub fn new(t_split: u32) -> Self {
        Self {
            t_split,
            regroup_factor: 1,
        }
    }

    /// Holds out the last `n_test` chunks of a graph with `total_chunks`
    /// chunks (after regrouping).
    pub fn last_n(total_chunks: u32, n_test: u32, regroup_factor: u32) -> Result<Self> {
        if n_test >= total_chunks {
            return Err(Error::InvalidSplit(format!(
                "cannot hold out {n_test} of {total_chunks} chunks"
            )));
        }
        Ok(Self {
            t_split: total_chunks - n_test,
            regroup_factor,
        })
    }

    pub fn train_chunks(&self) -> std::ops::Range<u32> {
        0..self.t_split
    }

    pub fn test_chunks(&self, total_chunks: u32) -> std::ops::Range<u32> {
        self.t_split..total_chunks
    }
}

/// The engagements `e_t` of one chunk, grouped by user.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChunkSlice {
    chunk: u32,
    engagements: Vec<(u32, u32)>,
    /// `(user, start, end)` ranges into `engagements`, sorted by user.
    user_offsets: Vec<(u32, usize, usize)>,
}

impl ChunkSlice {
    /// Groups `(user, item)` pairs by user. The sort is stable so the input
    /// order of one user's engagements is kept.
    pub fn new(chunk: u32, mut engagements: Vec<(u32, u32)>) -> Self {
        engagements.sort_by_key(|&(u, _)| u);
        let mut user_offsets = Vec::new();
        let mut start = 0;
        for j in 1..=engagements.len() {
            if j == engagements.len() || engagements[j].0 != engagements[start].0 {
                user_offsets.push((engagements[start].0, start, j));
                start = j;
            }
        }
        Self {
            chunk,
            engagements,
            user_offsets,
        }
    }

    pub fn chunk(&self) -> u32 {
        self.chunk
    }

    pub fn engagements(&self) -> &[(u32, u32)] {
        &self.engagements
    }

    pub fn len(&self) -> usize {
        self.engagements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.engagements.is_empty()
    }

    /// Users with at least one engagement, ascending.
    pub fn users(&self) -> impl Iterator<Item = u32> + '_ {
        self.user_offsets.iter().map(|&(u, _, _)| u)
    }

    pub fn num_users(&self) -> usize {
        self.user_offsets.len()
    }

    /// Iterates `(user, engagements of that user)`.
    pub fn by_user(&self) -> impl Iterator<Item = (u32, &[(u32, u32)])> + '_ {
        self.user_offsets
            .iter()
            .map(move |&(u, s, e)| (u, &self.engagements[s..e]))
    }

    pub fn user_engagements(&self, user: u32) -> &[(u32, u32)] {
        match self.user_offsets.binary_search_by_key(&user, |&(u, _, _)| u) {
            Ok(pos) => {
                let (_, s, e) = self.user_offsets[pos];
                &self.engagements[s..e]
            }
            Err(_) => &[],
        }
    }

    /// Engagement count per distinct item, sorted by item id.
    pub fn item_counts(&self) -> Vec<(u32, u32)> {
        let mut items: Vec<u32> = self.engagements.iter().map(|&(_, i)| i).collect();
        items.sort_unstable();
        let mut counts: Vec<(u32, u32)> = Vec::new();
        for i in items {
            match counts.last_mut() {
                Some((last, c)) if *last == i => *c += 1,
                _ => counts.push((i, 1)),
            }
        }
        counts
    }
}

/// Reads an edge list from a file. See [`read_edge_list`].
pub fn load_edge_list(path: impl AsRef<Path>, delimiter: Delimiter) -> Result<EngagementGraph> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_edge_list(BufReader::new(file), delimiter)
}

/// Parses `user<delim>item<delim>chunk` records. Blank lines and lines
/// starting with `#` are ignored; a first record with a non-numeric field is
/// treated as a header.
pub fn read_edge_list(reader: impl BufRead, delimiter: Delimiter) -> Result<EngagementGraph> {
    let mut raw = Vec::new();
    let mut seen_record = false;
    for (lineno, line) in reader.lines().enumerate() {
        let lineno = lineno + 1;
        let line = line.map_err(|e| Error::Parse {
            line: lineno,
            message: e.to_string(),
        })?;
        let line = line.trim_end_matches(['\r', '\n']);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = match delimiter {
            Delimiter::Char(c) => line.split(c).map(str::trim).collect(),
            Delimiter::Whitespace => line.split_ascii_whitespace().collect(),
        };
        let first = !seen_record;
        seen_record = true;
        match parse_record(&fields) {
            Ok(rec) => raw.push(rec),
            Err(_) if first && fields.iter().any(|f| f.parse::<f64>().is_err()) => {
                log::debug!("skipping header line {lineno}: {line}");
            }
            Err(message) => return Err(Error::Parse { line: lineno, message }),
        }
    }
    if raw.is_empty() {
        return Err(Error::EmptyInput("edge list contains no records".into()));
    }
    EngagementGraph::from_raw_edges(&raw)
}

fn parse_record(fields: &[&str]) -> std::result::Result<(u64, u64, i64), String> {
    if fields.len() != 3 {
        return Err(format!("expected 3 fields, found {}", fields.len()));
    }
    let user = fields[0]
        .parse::<u64>()
        .map_err(|e| format!("bad user id {:?}: {e}", fields[0]))?;
    let item = fields[1]
        .parse::<u64>()
        .map_err(|e| format!("bad item id {:?}: {e}", fields[1]))?;
    let chunk = fields[2]
        .parse::<i64>()
        .map_err(|e| format!("bad chunk ordinal {:?}: {e}", fields[2]))?;
    Ok((user, item, chunk))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<EngagementGraph> {
        read_edge_list(text.as_bytes(), Delimiter::default())
    }

    #[test]
    fn compacts_ordinals() {
        let g = parse("1\t10\t5\n2\t10\t5\n1\t11\t9\n").unwrap();
        assert_eq!((g.num_users(), g.num_items(), g.num_chunks()), (2, 2, 2));
        let chunks: Vec<u32> = g.edges().iter().map(|e| e.chunk).collect();
        assert_eq!(chunks, vec![0, 0, 1]);
    }

    #[test]
    fn single_edge() {
        let g = parse("7\t3\t0").unwrap();
        assert_eq!((g.num_users(), g.num_items(), g.num_chunks()), (1, 1, 1));
        let slices = g.chunk_slices();
        assert_eq!(slices.len(), 1);
        assert_eq!(slices[0].len(), 1);
    }

    #[test]
    fn header_skipped_and_errors_carry_line_numbers() {
        let g = parse("user\titem\tchunk\n1\t2\t3\n").unwrap();
        assert_eq!(g.edge_count(), 1);

        match parse("1\t2\t3\n1\tx\t3\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        match parse("1\t2\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(matches!(parse(""), Err(Error::EmptyInput(_))));
        assert!(matches!(parse("a\tb\tc\n"), Err(Error::EmptyInput(_))));
    }

    #[test]
    fn whitespace_and_comma_delimiters() {
        let g = read_edge_list("1  2 0\n3 2   1\n".as_bytes(), Delimiter::Whitespace).unwrap();
        assert_eq!(g.edge_count(), 2);
        let g = read_edge_list("1,2,0\n".as_bytes(), "comma".parse().unwrap()).unwrap();
        assert_eq!(g.edge_count(), 1);
    }

    #[test]
    fn duplicates_kept() {
        let g = parse("1\t2\t0\n1\t2\t0\n").unwrap();
        assert_eq!(g.edge_count(), 2);
        assert_eq!(g.slice(0).len(), 2);
    }

    fn chain(chunks: u32) -> EngagementGraph {
        let edges = (0..chunks)
            .map(|t| Edge {
                user: 0,
                item: 0,
                chunk: t,
            })
            .collect();
        EngagementGraph::from_dense_edges(edges, 1, 1, chunks).unwrap()
    }

    #[test]
    fn regroup_examples() {
        let g = chain(10).regroup_chunks(5).unwrap();
        assert_eq!(g.num_chunks(), 2);
        let mut chunks: Vec<u32> = g.edges().iter().map(|e| e.chunk).collect();
        chunks.dedup();
        assert_eq!(chunks, vec![0, 1]);

        let g10 = chain(10);
        let same = g10.regroup_chunks(1).unwrap();
        assert_eq!(same.edges(), g10.edges());

        let g = chain(175).regroup_chunks(7).unwrap();
        assert_eq!(g.num_chunks(), 25);
        assert_eq!(g.edges().iter().map(|e| e.chunk).max(), Some(24));

        assert!(matches!(chain(3).regroup_chunks(0), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn split_examples() {
        let g = chain(4);
        let (train, test) = g.split(&SplitSpec::new(3)).unwrap();
        assert_eq!(train.edge_count(), 3);
        assert!(train.edges().iter().all(|e| e.chunk == 0));
        assert_eq!(test.len(), 1);
        assert_eq!(test[0].chunk(), 3);

        let (train, test) = g.split(&SplitSpec::new(4)).unwrap();
        assert_eq!(train.edge_count(), 4);
        assert!(test.is_empty());

        assert!(matches!(g.split(&SplitSpec::new(0)), Err(Error::InvalidSplit(_))));
        assert!(matches!(g.split(&SplitSpec::new(5)), Err(Error::InvalidSplit(_))));
    }

    #[test]
    fn slice_groups_by_user() {
        let s = ChunkSlice::new(0, vec![(2, 1), (0, 5), (2, 3), (0, 5)]);
        assert_eq!(s.users().collect::<Vec<_>>(), vec![0, 2]);
        assert_eq!(s.user_engagements(2), &[(2, 1), (2, 3)]);
        assert_eq!(s.user_engagements(1), &[]);
        assert_eq!(s.item_counts(), vec![(1, 1), (3, 1), (5, 2)]);
    }

    #[test]
    fn degree_filter_reindexes() {
        let g = parse("1\t10\t0\n1\t11\t0\n2\t10\t1\n").unwrap();
        let f = g
            .filter_degrees(&DegreeFilter {
                min_item: 2,
                ..Default::default()
            })
            .unwrap();
        assert_eq!(f.edge_count(), 2);
        assert_eq!(f.num_items(), 1);
        assert_eq!(f.item_ids().raw(0), 10);
    }
}

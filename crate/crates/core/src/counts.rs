//! Sparse count rows keyed by a small integer (interest id or item id).

use serde::{Deserialize, Serialize};

/// A sorted `(key, count)` row. Zero counts are never stored.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseCounts {
    entries: Vec<(u32, u32)>,
}

impl SparseCounts {
    pub const EMPTY: SparseCounts = SparseCounts { entries: Vec::new() };

    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, key: u32) -> u32 {
        match self.entries.binary_search_by_key(&key, |&(k, _)| k) {
            Ok(pos) => self.entries[pos].1,
            Err(_) => 0,
        }
    }

    pub fn add(&mut self, key: u32, amount: u32) {
        if amount == 0 {
            return;
        }
        match self.entries.binary_search_by_key(&key, |&(k, _)| k) {
            Ok(pos) => self.entries[pos].1 += amount,
            Err(pos) => self.entries.insert(pos, (key, amount)),
        }
    }

    pub fn increment(&mut self, key: u32) {
        self.add(key, 1);
    }

    /// Removes one count from `key`; panics if the count is already zero,
    /// which would mean the tables have drifted from the assignments.
    pub fn decrement(&mut self, key: u32) {
        let pos = self
            .entries
            .binary_search_by_key(&key, |&(k, _)| k)
            .expect("decrement of absent key");
        if self.entries[pos].1 == 1 {
            self.entries.remove(pos);
        } else {
            self.entries[pos].1 -= 1;
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (u32, u32)> + '_ {
        self.entries.iter().copied()
    }

    pub fn keys(&self) -> impl Iterator<Item = u32> + '_ {
        self.entries.iter().map(|&(k, _)| k)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn total(&self) -> u64 {
        self.entries.iter().map(|&(_, c)| c as u64).sum()
    }

    pub fn merge(&mut self, other: &SparseCounts) {
        for (k, c) in other.iter() {
            self.add(k, c);
        }
    }
}

impl FromIterator<u32> for SparseCounts {
    fn from_iter<T: IntoIterator<Item = u32>>(iter: T) -> Self {
        let mut keys: Vec<u32> = iter.into_iter().collect();
        keys.sort_unstable();
        let mut entries: Vec<(u32, u32)> = Vec::new();
        for k in keys {
            match entries.last_mut() {
                Some((last, c)) if *last == k => *c += 1,
                _ => entries.push((k, 1)),
            }
        }
        Self { entries }
    }
}

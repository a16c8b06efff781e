//! Interaction data pipeline: parsing, k-core filtering, index
//! assignment, and the per-user train/valid/test split.
//!
//! The pipeline is deterministic end to end. Records are collapsed to
//! unique (user, item) pairs, filtered to the k-core of the bipartite
//! graph, sorted by timestamp then key, and only then given integer
//! indices by order of first appearance — so the same input file
//! always produces the same index maps regardless of its line order.

use crate::error::{Error, Result};
use crate::rng;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::{HashMap, HashSet};
use std::io::{BufWriter, Write};
use std::path::Path;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct InteractionRecord {
    pub user_key: String,
    pub item_key: String,
    pub timestamp: Option<i64>,
}

/// Indexed interaction data: key maps plus the deduplicated edge list
/// in canonical (timestamp-then-key sorted) order.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    pub user_keys: Vec<String>,
    pub item_keys: Vec<String>,
    pub edges: Vec<(u32, u32)>,
}

/// The dataset plus its per-user split into train/valid/test edges.
#[derive(Clone, Debug)]
pub struct SplitDataset {
    pub dataset: InteractionDataset,
    pub train: Vec<(u32, u32)>,
    pub valid: Vec<(u32, u32)>,
    pub test: Vec<(u32, u32)>,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct DatasetStats {
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub sparsity: f64,
}

impl InteractionDataset {
    pub fn num_users(&self) -> usize {
        self.user_keys.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_keys.len()
    }

    /// Fraction of the user-item matrix that carries no interaction.
    pub fn sparsity(&self) -> f64 {
        let cells = self.num_users() as f64 * self.num_items() as f64;
        if cells == 0.0 {
            return 0.0;
        }
        1.0 - self.edges.len() as f64 / cells
    }

    pub fn stats(&self) -> DatasetStats {
        DatasetStats {
            users: self.num_users(),
            items: self.num_items(),
            interactions: self.edges.len(),
            sparsity: self.sparsity(),
        }
    }

    /// Stable content hash over counts and the canonical edge list,
    /// recorded in checkpoints so a reload can detect dataset swaps.
    pub fn fingerprint(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |x: u64| {
            for b in x.to_le_bytes() {
                h ^= u64::from(b);
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        feed(self.num_users() as u64);
        feed(self.num_items() as u64);
        for &(u, i) in &self.edges {
            feed(u64::from(u));
            feed(u64::from(i));
        }
        format!("{:016x}", h)
    }
}

impl SplitDataset {
    pub fn num_users(&self) -> usize {
        self.dataset.num_users()
    }

    pub fn num_items(&self) -> usize {
        self.dataset.num_items()
    }
}

/// Groups item indices by user.
pub fn items_by_user(edges: &[(u32, u32)], num_users: usize) -> Vec<Vec<u32>> {
    let mut by_user = vec![Vec::new(); num_users];
    for &(u, i) in edges {
        by_user[u as usize].push(i);
    }
    by_user
}

/// Parses an interaction file: one record per line as
/// `user<delim>item[<delim>timestamp]`, `#` comment lines and blank
/// lines skipped. Duplicate (user, item) pairs are collapsed into the
/// first occurrence, keeping the earliest timestamp seen.
pub fn load_interactions(path: &Path, delimiter: char) -> Result<Vec<InteractionRecord>> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut records: Vec<InteractionRecord> = Vec::new();
    let mut seen: HashMap<(String, String), usize> = HashMap::new();
    for (lineno, raw) in content.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let mut cols = line.split(delimiter);
        let user = cols.next().unwrap_or("");
        let item = cols.next().unwrap_or("");
        if user.is_empty() || item.is_empty() {
            return Err(Error::Parse {
                path: path.into(),
                line: lineno + 1,
                reason: "expected at least user and item columns".into(),
            });
        }
        let timestamp = match cols.next().filter(|s| !s.is_empty()) {
            None => None,
            Some(ts) => Some(ts.parse::<i64>().map_err(|_| Error::Parse {
                path: path.into(),
                line: lineno + 1,
                reason: format!("bad timestamp {:?}", ts),
            })?),
        };
        let key = (user.to_string(), item.to_string());
        match seen.get(&key) {
            Some(&at) => {
                let prev = &mut records[at];
                prev.timestamp = match (prev.timestamp, timestamp) {
                    (Some(a), Some(b)) => Some(a.min(b)),
                    (a, b) => a.or(b),
                };
            }
            None => {
                seen.insert(key.clone(), records.len());
                records.push(InteractionRecord {
                    user_key: key.0,
                    item_key: key.1,
                    timestamp,
                });
            }
        }
    }
    if records.is_empty() {
        return Err(Error::EmptyInput { path: path.into() });
    }
    Ok(records)
}

/// Restricts records to the k-core of the user-item graph: the unique
/// maximal subgraph in which every surviving user and item has degree
/// at least `k`. Deficient nodes are deleted in simultaneous rounds
/// until a fixed point; the result may be empty. Records are assumed
/// deduplicated, so a node's degree is its record count.
pub fn kcore_filter(records: &[InteractionRecord], k: u32) -> Result<Vec<InteractionRecord>> {
    if k == 0 {
        return Err(Error::InvalidKCore { k });
    }
    let mut alive: Vec<&InteractionRecord> = records.iter().collect();
    loop {
        let mut user_deg: HashMap<&str, u32> = HashMap::new();
        let mut item_deg: HashMap<&str, u32> = HashMap::new();
        for r in &alive {
            *user_deg.entry(r.user_key.as_str()).or_insert(0) += 1;
            *item_deg.entry(r.item_key.as_str()).or_insert(0) += 1;
        }
        let bad_users: HashSet<&str> = user_deg
            .iter()
            .filter(|&(_, &d)| d < k)
            .map(|(&u, _)| u)
            .collect();
        let bad_items: HashSet<&str> = item_deg
            .iter()
            .filter(|&(_, &d)| d < k)
            .map(|(&i, _)| i)
            .collect();
        if bad_users.is_empty() && bad_items.is_empty() {
            break;
        }
        alive.retain(|r| {
            !bad_users.contains(r.user_key.as_str()) && !bad_items.contains(r.item_key.as_str())
        });
    }
    Ok(alive.into_iter().cloned().collect())
}

fn sorted_refs(records: &[InteractionRecord]) -> Vec<&InteractionRecord> {
    let mut order: Vec<&InteractionRecord> = records.iter().collect();
    order.sort_by(|a, b| {
        (a.timestamp.unwrap_or(i64::MIN), &a.user_key, &a.item_key)
            .cmp(&(b.timestamp.unwrap_or(i64::MIN), &b.user_key, &b.item_key))
    });
    order
}

/// Assigns integer indices by first appearance in the timestamp-then-
/// key sorted record list and returns the indexed dataset.
pub fn build_dataset(records: &[InteractionRecord]) -> Result<InteractionDataset> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let order = sorted_refs(records);
    let mut user_ids: HashMap<&str, u32> = HashMap::new();
    let mut item_ids: HashMap<&str, u32> = HashMap::new();
    let mut user_keys = Vec::new();
    let mut item_keys = Vec::new();
    let mut edges = Vec::with_capacity(order.len());
    for r in order {
        let u = *user_ids.entry(&r.user_key).or_insert_with(|| {
            user_keys.push(r.user_key.clone());
            (user_keys.len() - 1) as u32
        });
        let i = *item_ids.entry(&r.item_key).or_insert_with(|| {
            item_keys.push(r.item_key.clone());
            (item_keys.len() - 1) as u32
        });
        edges.push((u, i));
    }
    Ok(InteractionDataset { user_keys, item_keys, edges })
}

/// Like [`build_dataset`] but with externally fixed index maps (the
/// ones written at preparation time), so feature-matrix rows keep
/// their meaning. Every key must be present in its map.
pub fn build_dataset_with_maps(
    records: &[InteractionRecord],
    user_keys: Vec<String>,
    item_keys: Vec<String>,
) -> Result<InteractionDataset> {
    if records.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let user_ids: HashMap<&str, u32> = user_keys
        .iter()
        .enumerate()
        .map(|(i, k)| (k.as_str(), i as u32))
        .collect();
    let item_ids: HashMap<&str, u32> = item_keys
        .iter()
        .enumerate()
        .map(|(i, k)| (k.as_str(), i as u32))
        .collect();
    let mut edges = Vec::with_capacity(records.len());
    for r in sorted_refs(records) {
        let u = *user_ids.get(r.user_key.as_str()).ok_or_else(|| Error::UnknownKey {
            kind: "user",
            key: r.user_key.clone(),
        })?;
        let i = *item_ids.get(r.item_key.as_str()).ok_or_else(|| Error::UnknownKey {
            kind: "item",
            key: r.item_key.clone(),
        })?;
        edges.push((u, i));
    }
    Ok(InteractionDataset { user_keys, item_keys, edges })
}

/// Per-user split: with n interactions, `max(1, floor(0.1 n))` go to
/// test and the same number to validation; the rest train. Membership
/// comes from a per-user shuffle seeded by (seed, user index), so the
/// split is reproducible and independent of users' relative order.
/// Users with fewer than 3 interactions cannot receive one edge per
/// part and are rejected.
pub fn split_per_user(dataset: InteractionDataset, seed: u64) -> Result<SplitDataset> {
    let num_users = dataset.num_users();
    let by_user = items_by_user(&dataset.edges, num_users);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for (u, items) in by_user.iter().enumerate() {
        let n = items.len();
        if n < 3 {
            return Err(Error::TooFewInteractions {
                user_key: dataset.user_keys[u].clone(),
                count: n,
            });
        }
        let n_test = (n / 10).max(1);
        let n_valid = n_test;
        let n_train = n - n_valid - n_test;
        let mut shuffled = items.clone();
        shuffled.shuffle(&mut rng::stream(seed, "split", &[u as u64]));
        for (pos, &i) in shuffled.iter().enumerate() {
            let edge = (u as u32, i);
            if pos < n_train {
                train.push(edge);
            } else if pos < n_train + n_valid {
                valid.push(edge);
            } else {
                test.push(edge);
            }
        }
    }
    Ok(SplitDataset { dataset, train, valid, test })
}

/// Writes records back out in canonical order, tab-separated.
pub fn write_interactions(path: &Path, records: &[InteractionRecord]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for r in sorted_refs(records) {
        match r.timestamp {
            Some(ts) => writeln!(w, "{}\t{}\t{}", r.user_key, r.item_key, ts),
            None => writeln!(w, "{}\t{}", r.user_key, r.item_key),
        }
        .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Writes an index map as `index<TAB>key` lines.
pub fn write_index_map(path: &Path, keys: &[String]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for (i, k) in keys.iter().enumerate() {
        writeln!(w, "{}\t{}", i, k).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads an index map, requiring a contiguous 0..n index column.
pub fn read_index_map(path: &Path) -> Result<Vec<String>> {
    let content = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut keys = Vec::new();
    for (lineno, raw) in content.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let (idx, key) = line.split_once('\t').ok_or(Error::BadIndexMap {
            path: path.into(),
            line: lineno + 1,
        })?;
        let idx: usize = idx.parse().map_err(|_| Error::BadIndexMap {
            path: path.into(),
            line: lineno + 1,
        })?;
        if idx != keys.len() {
            return Err(Error::BadIndexMap { path: path.into(), line: lineno + 1 });
        }
        keys.push(key.to_string());
    }
    Ok(keys)
}

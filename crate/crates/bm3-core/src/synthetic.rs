//! Synthetic interaction data for tests and benchmarks: planted-block
//! bipartite graphs with recoverable structure, uniform random
//! graphs with a minimum degree guarantee, and random feature tables.

use crate::data::InteractionRecord;
use crate::error::{Error, Result};
use crate::fmat::{FeatureMatrix, Modality};
use crate::mat::Mat;
use crate::rng;
use rand::seq::SliceRandom;
use rand::Rng;

fn user_key(u: usize) -> String {
    format!("u{:05}", u)
}

fn item_key(i: usize) -> String {
    format!("i{:05}", i)
}

/// Users and items are split round-robin into `blocks` groups; each
/// user interacts with `per_user` distinct items drawn from its own
/// block. A recommender that recovers the blocks ranks a user's
/// unseen block items on top.
pub fn planted_block(
    num_users: usize,
    num_items: usize,
    blocks: usize,
    per_user: usize,
    seed: u64,
) -> Result<Vec<InteractionRecord>> {
    if blocks == 0 || num_items < blocks {
        return Err(Error::InvalidParameter {
            name: "blocks",
            reason: format!("{} blocks over {} items", blocks, num_items),
        });
    }
    let block_items: Vec<Vec<u32>> = (0..blocks)
        .map(|b| ((b as u32)..num_items as u32).step_by(blocks).collect())
        .collect();
    let mut records = Vec::with_capacity(num_users * per_user);
    for u in 0..num_users {
        let pool = &block_items[u % blocks];
        let take = per_user.min(pool.len());
        let mut picks = pool.clone();
        picks.shuffle(&mut rng::stream(seed, "planted", &[u as u64]));
        picks.truncate(take);
        picks.sort_unstable();
        for (t, i) in picks.into_iter().enumerate() {
            records.push(InteractionRecord {
                user_key: user_key(u),
                item_key: item_key(i as usize),
                timestamp: Some(t as i64),
            });
        }
    }
    Ok(records)
}

/// Uniform random bipartite graph with exactly `num_edges` distinct
/// interactions. Every user receives at least `min_per_user` edges
/// first; the remainder is sampled uniformly without replacement.
pub fn random_bipartite(
    num_users: usize,
    num_items: usize,
    num_edges: usize,
    min_per_user: usize,
    seed: u64,
) -> Result<Vec<InteractionRecord>> {
    if min_per_user > num_items {
        return Err(Error::InvalidParameter {
            name: "min_per_user",
            reason: format!("{} exceeds the {} available items", min_per_user, num_items),
        });
    }
    if num_edges < num_users * min_per_user || num_edges > num_users * num_items {
        return Err(Error::InvalidParameter {
            name: "num_edges",
            reason: format!(
                "{} edges infeasible for {} users x {} items with at least {} each",
                num_edges, num_users, num_items, min_per_user
            ),
        });
    }
    let mut present = vec![false; num_users * num_items];
    let mut edges: Vec<(u32, u32)> = Vec::with_capacity(num_edges);
    for u in 0..num_users {
        let mut items: Vec<u32> = (0..num_items as u32).collect();
        items.shuffle(&mut rng::stream(seed, "degree-floor", &[u as u64]));
        for &i in items.iter().take(min_per_user) {
            present[u * num_items + i as usize] = true;
            edges.push((u as u32, i));
        }
    }
    let mut r = rng::stream(seed, "extra-edges", &[]);
    while edges.len() < num_edges {
        let u = r.random_range(0..num_users);
        let i = r.random_range(0..num_items);
        if !present[u * num_items + i] {
            present[u * num_items + i] = true;
            edges.push((u as u32, i as u32));
        }
    }
    edges.sort_unstable();
    Ok(edges
        .into_iter()
        .enumerate()
        .map(|(t, (u, i))| InteractionRecord {
            user_key: user_key(u as usize),
            item_key: item_key(i as usize),
            timestamp: Some(t as i64),
        })
        .collect())
}

/// Uniform random item features in `[-1, 1]`.
pub fn random_features(
    num_items: usize,
    dim: usize,
    modality: Modality,
    seed: u64,
) -> FeatureMatrix {
    let mut r = rng::stream(seed, &format!("features/{}", modality.tag()), &[]);
    let mut values = Mat::zeros(num_items, dim);
    for v in values.data_mut() {
        *v = r.random_range(-1.0..=1.0);
    }
    FeatureMatrix { modality, values }
}

/// Item features that encode block membership: a strong one-hot block
/// signature plus uniform noise, matching the layout produced by
/// [`planted_block`] (item `i` belongs to block `i % blocks`).
pub fn block_features(
    num_items: usize,
    blocks: usize,
    dim: usize,
    noise: f64,
    modality: Modality,
    seed: u64,
) -> Result<FeatureMatrix> {
    if blocks == 0 || dim < blocks {
        return Err(Error::InvalidParameter {
            name: "dim",
            reason: format!("{} feature dims cannot encode {} blocks", dim, blocks),
        });
    }
    let mut r = rng::stream(seed, &format!("block-features/{}", modality.tag()), &[]);
    let mut values = Mat::zeros(num_items, dim);
    for i in 0..num_items {
        let row = values.row_mut(i);
        for v in row.iter_mut() {
            *v = noise * r.random_range(-1.0..=1.0);
        }
        row[i % blocks] += 1.0;
    }
    Ok(FeatureMatrix { modality, values })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::build_dataset;
    use std::collections::HashSet;

    #[test]
    fn planted_block_stays_in_block() {
        let records = planted_block(8, 10, 2, 4, 3).unwrap();
        assert_eq!(records.len(), 8 * 4);
        for rec in &records {
            let u: usize = rec.user_key[1..].parse().unwrap();
            let i: usize = rec.item_key[1..].parse().unwrap();
            assert_eq!(u % 2, i % 2, "user {} item {} cross blocks", u, i);
        }
        // Distinct items per user.
        for u in 0..8 {
            let key = user_key(u);
            let items: HashSet<&str> = records
                .iter()
                .filter(|r| r.user_key == key)
                .map(|r| r.item_key.as_str())
                .collect();
            assert_eq!(items.len(), 4);
        }
        // Deterministic.
        assert_eq!(records, planted_block(8, 10, 2, 4, 3).unwrap());
    }

    #[test]
    fn planted_block_builds_a_clean_dataset() {
        let records = planted_block(20, 10, 2, 5, 1).unwrap();
        let split = crate::data::split_per_user(build_dataset(&records).unwrap(), 7).unwrap();
        assert_eq!(split.dataset.num_users(), 20);
        assert_eq!(split.dataset.num_items(), 10);
        assert_eq!(split.train.len() + split.valid.len() + split.test.len(), 100);
    }

    #[test]
    fn random_bipartite_respects_counts_and_floor() {
        let records = random_bipartite(30, 15, 150, 3, 11).unwrap();
        assert_eq!(records.len(), 150);
        let pairs: HashSet<(String, String)> = records
            .iter()
            .map(|r| (r.user_key.clone(), r.item_key.clone()))
            .collect();
        assert_eq!(pairs.len(), 150, "edges must be distinct");
        for u in 0..30 {
            let key = user_key(u);
            let deg = records.iter().filter(|r| r.user_key == key).count();
            assert!(deg >= 3, "user {} has degree {}", u, deg);
        }
        assert_eq!(records, random_bipartite(30, 15, 150, 3, 11).unwrap());
        assert!(random_bipartite(30, 15, 10, 3, 11).is_err(), "too few edges for the floor");
        assert!(random_bipartite(2, 3, 7, 0, 11).is_err(), "more edges than pairs");
    }

    #[test]
    fn feature_tables_have_expected_shape_and_range() {
        let f = random_features(12, 6, Modality::Visual, 9);
        assert_eq!(f.values.shape(), (12, 6));
        assert!(f.values.iter().all(|v| (-1.0..=1.0).contains(v)));

        let b = block_features(12, 3, 6, 0.1, Modality::Textual, 9).unwrap();
        assert_eq!(b.values.shape(), (12, 6));
        for i in 0..12 {
            let row = b.values.row(i);
            // The block coordinate dominates everything else.
            let block = i % 3;
            for (j, &v) in row.iter().enumerate() {
                if j == block {
                    assert!(v > 0.8);
                } else {
                    assert!(v.abs() <= 0.1 + 1e-12);
                }
            }
        }
        assert!(block_features(12, 7, 6, 0.1, Modality::Textual, 9).is_err());
    }
}

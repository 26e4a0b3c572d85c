//! Deterministic stand-in for MovieLens-100K: power-law user activity and item
//! popularity, ratings on the half-star grid `0.5..=5.0`.

use std::collections::HashSet;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::matrix::{RawRating, RawRatings};

const RANK_OFFSET: f64 = 20.0;
const EXPONENT: f64 = 0.7;
const MIN_DEGREE: usize = 5;

fn power_law_weights(n: usize) -> Vec<f64> {
    (0..n).map(|r| (r as f64 + RANK_OFFSET).powf(-EXPONENT)).collect()
}

/// Generates about `target` ratings over `users × items`. Every user and every
/// item receives at least one rating. Ids start at 1 as in MovieLens.
pub fn power_law_ratings(users: usize, items: usize, target: usize, seed: u64) -> Result<RawRatings> {
    if users == 0 || items == 0 {
        return Err(Error::invalid_argument("synthetic dimensions must be positive"));
    }
    if target < users.max(items) || target > users * items / 2 {
        return Err(Error::invalid_argument(format!(
            "target {target} must lie in [{}, {}]",
            users.max(items),
            users * items / 2
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let user_w = power_law_weights(users);
    let item_w = power_law_weights(items);
    let user_total: f64 = user_w.iter().sum();
    let item_pick = WeightedIndex::new(&item_w).map_err(|e| Error::invalid_argument(e.to_string()))?;

    let user_bias: Vec<f64> = (0..users).map(|_| rng.random_range(-0.8..0.8)).collect();
    let item_bias: Vec<f64> = (0..items).map(|_| rng.random_range(-1.0..1.0)).collect();
    let rate = |rng: &mut ChaCha8Rng, u: usize, i: usize| -> f64 {
        let raw = 3.5 + user_bias[u] + item_bias[i] + rng.random_range(-1.0..1.0);
        ((raw * 2.0).round() / 2.0).clamp(0.5, 5.0)
    };

    let mut seen: HashSet<(usize, usize)> = HashSet::with_capacity(target);
    let mut item_hit = vec![false; items];
    let mut records = Vec::with_capacity(target + items);
    let mut timestamp = 874_724_710_i64;
    let cap = (items / 2).max(1);

    for (u, w) in user_w.iter().enumerate() {
        let degree = ((target as f64 * w / user_total).round() as usize).clamp(MIN_DEGREE.min(cap), cap);
        let mut placed = 0;
        while placed < degree {
            let i = item_pick.sample(&mut rng);
            if !seen.insert((u, i)) {
                continue;
            }
            item_hit[i] = true;
            timestamp += rng.random_range(1..600);
            records.push(RawRating {
                user_id: u as u64 + 1,
                item_id: i as u64 + 1,
                rating: rate(&mut rng, u, i),
                timestamp,
            });
            placed += 1;
        }
    }
    for (i, _) in item_hit.iter().enumerate().filter(|(_, hit)| !**hit) {
        let u = loop {
            let u = rng.random_range(0..users);
            if seen.insert((u, i)) {
                break u;
            }
        };
        timestamp += rng.random_range(1..600);
        records.push(RawRating {
            user_id: u as u64 + 1,
            item_id: i as u64 + 1,
            rating: rate(&mut rng, u, i),
            timestamp,
        });
    }
    records.sort_by_key(|r| (r.user_id, r.item_id));
    RawRatings::new(records)
}

/// The desk dataset used when MovieLens-100K is not at hand.
pub fn desk_ratings(seed: u64) -> RawRatings {
    power_law_ratings(1000, 1700, 80_000, seed).expect("fixed parameters are valid")
}

//! Synthetic interaction logs with learnable sequential structure, a
//! category trade-off and two user groups of unequal difficulty.
//!
//! Items are split evenly across categories and chained inside each one.
//! A user mostly walks the chain of a favourite category, so an accurate
//! model concentrates on few categories while a diverse list has to spread
//! out. Group "B" users follow their chains less reliably and favour the
//! rarer categories, which leaves a measurable NDCG gap between the groups.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{kcore_filter, leave_one_out_split, sample_candidates, Interaction, InteractionDataset};
use crate::error::Result;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureConfig {
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability of staying on the chain of the current favourite category.
    pub chain_prob: f64,
    pub chain_prob_b: f64,
    /// Probability of a uniformly random item.
    pub noise: f64,
    /// Share of users in group "A".
    pub share_a: f64,
    /// Probability that an item carries a second category.
    pub second_category: f64,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        Self {
            users: 600,
            items: 400,
            categories: 8,
            min_len: 12,
            max_len: 30,
            chain_prob: 0.75,
            chain_prob_b: 0.45,
            noise: 0.1,
            share_a: 0.6,
            second_category: 0.2,
            seed: 17,
        }
    }
}

impl FixtureConfig {
    pub fn small(seed: u64) -> Self {
        Self {
            users: 120,
            items: 150,
            categories: 6,
            min_len: 8,
            max_len: 16,
            seed,
            ..Self::default()
        }
    }
}

pub fn synthetic_interactions(cfg: &FixtureConfig) -> Vec<Interaction> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let m = cfg.categories.max(1);
    let primary: Vec<usize> = (0..cfg.items).map(|i| i % m).collect();
    let categories: Vec<Vec<u16>> = (0..cfg.items)
        .map(|i| {
            let mut c = vec![primary[i] as u16];
            if rng.gen_bool(cfg.second_category) {
                let other = (primary[i] + 1 + rng.gen_range(0..m.saturating_sub(1).max(1))) % m;
                if other != primary[i] {
                    c.push(other as u16);
                }
            }
            c
        })
        .collect();
    // chain order inside each category, shuffled once
    let mut chains: Vec<Vec<usize>> = (0..m).map(|c| (c..cfg.items).step_by(m).collect()).collect();
    for ch in &mut chains {
        ch.shuffle(&mut rng);
    }
    let mut next_in_chain = vec![0usize; cfg.items];
    for ch in &chains {
        for (k, &i) in ch.iter().enumerate() {
            next_in_chain[i] = ch[(k + 1) % ch.len()];
        }
    }

    let mut rows = Vec::new();
    for u in 0..cfg.users {
        let group_a = rng.gen_bool(cfg.share_a);
        let chain_prob = if group_a { cfg.chain_prob } else { cfg.chain_prob_b };
        // group B leans towards the upper half of the category range
        let fav: Vec<usize> = (0..2)
            .map(|_| {
                if group_a {
                    rng.gen_range(0..m)
                } else {
                    m / 2 + rng.gen_range(0..m - m / 2)
                }
            })
            .collect();
        let len = rng.gen_range(cfg.min_len..=cfg.max_len);
        let mut t: i64 = 1_000_000 + rng.gen_range(0..100_000);
        let mut cur = chains[fav[0]][rng.gen_range(0..chains[fav[0]].len())];
        let mut seen = std::collections::HashSet::new();
        let mut k = 0;
        while k < len {
            if k > 0 {
                let r: f64 = rng.gen();
                cur = if r < cfg.noise {
                    rng.gen_range(0..cfg.items)
                } else if r < cfg.noise + chain_prob {
                    next_in_chain[cur]
                } else {
                    let c = fav[rng.gen_range(0..fav.len())];
                    chains[c][rng.gen_range(0..chains[c].len())]
                };
            }
            if !seen.insert(cur) {
                // repeats would make targets trivially guessable; jump instead
                cur = rng.gen_range(0..cfg.items);
                if !seen.insert(cur) {
                    continue;
                }
            }
            t += rng.gen_range(60..86_400);
            rows.push(Interaction {
                user_id: format!("u{u}"),
                item_id: format!("i{cur}"),
                timestamp: t,
                categories: categories[cur].clone(),
                group: Some(if group_a { "A" } else { "B" }.to_string()),
            });
            k += 1;
        }
    }
    rows
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PrepareConfig {
    pub kcore: usize,
    pub max_history: usize,
    pub n_neg_train: usize,
    pub n_neg_eval: usize,
    pub seed: u64,
}

impl Default for PrepareConfig {
    fn default() -> Self {
        Self {
            kcore: 5,
            max_history: 20,
            n_neg_train: 9,
            n_neg_eval: 99,
            seed: 0,
        }
    }
}

/// k-core filter, leave-one-out split and candidate sampling in one step.
pub fn prepare(ds: &InteractionDataset, cfg: &PrepareConfig) -> Result<InteractionDataset> {
    let ds = kcore_filter(ds, cfg.kcore)?;
    let ds = leave_one_out_split(&ds, cfg.max_history)?;
    sample_candidates(&ds, cfg.n_neg_train, cfg.n_neg_eval, cfg.seed)
}

/// A ready-to-train synthetic dataset.
pub fn synthetic_dataset(fx: &FixtureConfig, prep: &PrepareConfig) -> Result<InteractionDataset> {
    let ds = InteractionDataset::from_interactions(synthetic_interactions(fx), fx.categories)?;
    prepare(&ds, prep)
}

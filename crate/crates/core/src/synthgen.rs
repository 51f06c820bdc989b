//! Synthetic corpora with planted major and minor user clusters.
//!
//! Every cluster owns a block of items plus (optionally) a pool shared by all
//! clusters, and walks a sparse Markov chain over that block. Users are drawn
//! from the mixture weights; each step is replaced by a uniform random item
//! with probability `noise`. Labels are returned separately and never enter
//! the corpus.

use std::fmt::Write as _;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::Interaction;
use crate::error::{Error, Result};

/// One cluster's Markov chain over a subset of the global items.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterChain {
    /// Global item index of each local state.
    pub items: Vec<usize>,
    /// Row-stochastic transitions between local states.
    pub transitions: Vec<Vec<f64>>,
}

impl ClusterChain {
    fn validate(&self, n_items: usize, c: usize) -> Result<()> {
        let n = self.items.len();
        if n == 0 {
            return Err(Error::Spec(format!("cluster {c} has no items")));
        }
        if let Some(&bad) = self.items.iter().find(|&&i| i >= n_items) {
            return Err(Error::Spec(format!("cluster {c} uses item {bad} of {n_items}")));
        }
        if self.transitions.len() != n {
            return Err(Error::Spec(format!(
                "cluster {c} has {n} states but {} transition rows",
                self.transitions.len()
            )));
        }
        for (r, row) in self.transitions.iter().enumerate() {
            let sum: f64 = row.iter().sum();
            if row.len() != n || row.iter().any(|&p| !(p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Spec(format!(
                    "cluster {c} row {r} is not a probability vector over {n} states"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlantedSpec {
    pub weights: Vec<f64>,
    pub items: usize,
    /// Items every cluster may visit (with its own transitions).
    pub shared_items: usize,
    pub users: usize,
    pub min_len: usize,
    pub max_len: usize,
    pub noise: f64,
    /// Successors per state in generated chains.
    pub branching: usize,
    pub seed: u64,
    /// Explicit chains; generated from `seed` when absent.
    pub chains: Option<Vec<ClusterChain>>,
}

impl Default for PlantedSpec {
    /// Two major clusters at 40% and two minor ones at 10%, 400 users,
    /// 200 items, lengths 5..=15, noise 0.05.
    fn default() -> Self {
        PlantedSpec {
            weights: vec![0.4, 0.4, 0.1, 0.1],
            items: 200,
            shared_items: 0,
            users: 400,
            min_len: 5,
            max_len: 15,
            noise: 0.05,
            branching: 2,
            seed: 0,
            chains: None,
        }
    }
}

impl PlantedSpec {
    pub fn clusters(&self) -> usize {
        self.weights.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Spec(m));
        if self.weights.is_empty() {
            return bad("at least one cluster is required".into());
        }
        if self.weights.iter().any(|&w| !(w >= 0.0)) || (self.weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return bad(format!("mixture weights {:?} must be nonnegative and sum to 1", self.weights));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return bad(format!("length range {}..={} is empty", self.min_len, self.max_len));
        }
        if !(0.0..=1.0).contains(&self.noise) {
            return bad(format!("noise {} outside [0, 1]", self.noise));
        }
        if self.items == 0 || self.users == 0 {
            return bad("items and users must be positive".into());
        }
        match &self.chains {
            Some(chains) => {
                if chains.len() != self.clusters() {
                    return bad(format!("{} chains for {} clusters", chains.len(), self.clusters()));
                }
                for (c, ch) in chains.iter().enumerate() {
                    ch.validate(self.items, c)?;
                }
            }
            None => {
                if self.shared_items >= self.items {
                    return bad("shared pool leaves no cluster-specific items".into());
                }
                let own = (self.items - self.shared_items) / self.clusters();
                if own == 0 {
                    return bad(format!("{} items cannot cover {} clusters", self.items, self.clusters()));
                }
                if self.branching == 0 || self.branching > own + self.shared_items {
                    return bad(format!("branching {} invalid for {} states", self.branching, own + self.shared_items));
                }
            }
        }
        Ok(())
    }

    /// The chains used for generation (explicit or derived from the seed).
    pub fn chains(&self) -> Result<Vec<ClusterChain>> {
        self.validate()?;
        if let Some(c) = &self.chains {
            return Ok(c.clone());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_c4a1);
        let m = self.clusters();
        let own = (self.items - self.shared_items) / m;
        let shared: Vec<usize> = (m * own..m * own + self.shared_items).collect();
        Ok((0..m)
            .map(|c| {
                let mut items: Vec<usize> = (c * own..(c + 1) * own).collect();
                items.extend(&shared);
                let n = items.len();
                let transitions = (0..n)
                    .map(|_| {
                        let mut row = vec![0.0; n];
                        let succ = index::sample(&mut rng, n, self.branching);
                        let w: Vec<f64> = (0..self.branching).map(|_| rng.gen_range(0.5..1.5)).collect();
                        let total: f64 = w.iter().sum();
                        for (s, wi) in succ.into_iter().zip(w) {
                            row[s] = wi / total;
                        }
                        row
                    })
                    .collect();
                ClusterChain { items, transitions }
            })
            .collect())
    }
}

/// Interactions plus ground-truth labels, kept apart.
#[derive(Clone, Debug, PartialEq)]
pub struct Generated {
    pub interactions: Vec<Interaction>,
    /// `(user id, cluster)` per generated user, in generation order.
    pub labels: Vec<(String, usize)>,
}

impl Generated {
    pub fn interactions_csv(&self) -> String {
        let mut s = String::from("user,item,timestamp\n");
        for i in &self.interactions {
            let _ = writeln!(s, "{},{},{}", i.user, i.item, i.timestamp);
        }
        s
    }

    pub fn labels_csv(&self) -> String {
        let mut s = String::from("user,cluster\n");
        for (u, c) in &self.labels {
            let _ = writeln!(s, "{u},{c}");
        }
        s
    }

    pub fn label_of(&self, user: &str) -> Option<usize> {
        self.labels.iter().find(|(u, _)| u == user).map(|(_, c)| *c)
    }
}

pub fn user_id(u: usize) -> String {
    format!("u{u}")
}

pub fn item_id(i: usize) -> String {
    format!("i{i}")
}

fn draw<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let x: f64 = rng.gen();
    let mut acc = 0.0;
    for (i, p) in probs.iter().enumerate() {
        acc += p;
        if x < acc {
            return i;
        }
    }
    // rounding slack: last state with mass
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Generates the corpus. User `u` has timestamps `u * 1000 + t`.
pub fn generate(spec: &PlantedSpec) -> Result<Generated> {
    let chains = spec.chains()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut interactions = Vec::new();
    let mut labels = Vec::with_capacity(spec.users);
    for u in 0..spec.users {
        let c = draw(&mut rng, &spec.weights);
        let chain = &chains[c];
        let len = rng.gen_range(spec.min_len..=spec.max_len);
        let mut state = rng.gen_range(0..chain.items.len());
        let uid = user_id(u);
        for t in 0..len {
            if t > 0 {
                state = draw(&mut rng, &chain.transitions[state]);
            }
            let item = if spec.noise > 0.0 && rng.gen_bool(spec.noise) {
                rng.gen_range(0..spec.items)
            } else {
                chain.items[state]
            };
            interactions.push(Interaction::new(uid.clone(), item_id(item), (u * 1000 + t) as u64));
        }
        labels.push((uid, c));
    }
    Ok(Generated { interactions, labels })
}

fn choose2(n: u64) -> f64 {
    (n * n.saturating_sub(1)) as f64 / 2.0
}

/// Adjusted Rand index between two labelings; 1 for identical partitions up
/// to relabeling, about 0 for independent ones.
pub fn cluster_agreement(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("labelings of length {} and {}", a.len(), b.len())));
    }
    if a.is_empty() {
        return Err(Error::Contract("empty labelings".into()));
    }
    let ka = a.iter().max().map_or(0, |m| m + 1);
    let kb = b.iter().max().map_or(0, |m| m + 1);
    let mut table = vec![vec![0u64; kb]; ka];
    for (&x, &y) in a.iter().zip(b) {
        table[x][y] += 1;
    }
    let index: f64 = table.iter().flatten().map(|&n| choose2(n)).sum();
    let rows: f64 = table.iter().map(|r| choose2(r.iter().sum())).sum();
    let cols: f64 = (0..kb).map(|j| choose2(table.iter().map(|r| r[j]).sum())).sum();
    let total = choose2(a.len() as u64);
    let expected = rows * cols / total;
    let max = (rows + cols) / 2.0;
    if (max - expected).abs() < f64::EPSILON {
        // both partitions trivial (all singletons or one block)
        return Ok(if index == expected { 1.0 } else { 0.0 });
    }
    Ok((index - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{BTreeMap, BTreeSet};

    fn by_user(g: &Generated) -> BTreeMap<String, Vec<String>> {
        let mut m: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for i in &g.interactions {
            m.entry(i.user.clone()).or_default().push(i.item.clone());
        }
        m
    }

    #[test]
    fn cycle_chain_without_noise_gives_cycles() {
        let cycle = ClusterChain {
            items: vec![0, 1, 2],
            transitions: vec![vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0]],
        };
        let spec = PlantedSpec {
            weights: vec![1.0],
            items: 3,
            users: 20,
            noise: 0.0,
            chains: Some(vec![cycle]),
            ..Default::default()
        };
        for seq in by_user(&generate(&spec).unwrap()).values() {
            for w in seq.windows(2) {
                let a: usize = w[0][1..].parse().unwrap();
                let b: usize = w[1][1..].parse().unwrap();
                assert_eq!(b, (a + 1) % 3);
            }
        }
    }

    #[test]
    fn disjoint_clusters_never_share_items() {
        let spec = PlantedSpec {
            weights: vec![0.5, 0.5],
            noise: 0.0,
            users: 200,
            ..Default::default()
        };
        let g = generate(&spec).unwrap();
        let seqs = by_user(&g);
        let mut items: [BTreeSet<String>; 2] = Default::default();
        for (u, c) in &g.labels {
            items[*c].extend(seqs[u].iter().cloned());
        }
        assert!(items[0].is_disjoint(&items[1]));
    }

    #[test]
    fn cluster_sizes_follow_mixture() {
        let spec = PlantedSpec {
            weights: vec![0.8, 0.2],
            users: 1000,
            ..Default::default()
        };
        let g = generate(&spec).unwrap();
        let majors = g.labels.iter().filter(|(_, c)| *c == 0).count() as f64;
        // binomial 99% interval: 800 ± 2.576 * sqrt(1000 * 0.8 * 0.2)
        let half = 2.576 * (1000.0f64 * 0.16).sqrt();
        assert!((majors - 800.0).abs() <= half, "{majors}");
    }

    #[test]
    fn generation_is_deterministic_and_lengths_bounded() {
        let spec = PlantedSpec::default();
        let a = generate(&spec).unwrap();
        assert_eq!(a, generate(&spec).unwrap());
        for seq in by_user(&a).values() {
            assert!((5..=15).contains(&seq.len()));
        }
        let other = generate(&PlantedSpec { seed: 1, ..spec }).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn degenerate_specs_are_rejected() {
        let bad_row = ClusterChain {
            items: vec![0, 1],
            transitions: vec![vec![0.5, 0.4], vec![0.0, 1.0]],
        };
        let spec = PlantedSpec {
            weights: vec![1.0],
            items: 2,
            chains: Some(vec![bad_row]),
            ..Default::default()
        };
        assert!(matches!(generate(&spec), Err(Error::Spec(_))));
        let spec = PlantedSpec {
            weights: vec![0.7, 0.2],
            ..Default::default()
        };
        assert!(matches!(generate(&spec), Err(Error::Spec(_))));
    }

    #[test]
    fn generated_chains_are_stochastic() {
        let spec = PlantedSpec {
            shared_items: 20,
            ..Default::default()
        };
        for (c, ch) in spec.chains().unwrap().iter().enumerate() {
            ch.validate(spec.items, c).unwrap();
            assert_eq!(ch.items.len(), 45 + 20);
        }
    }

    #[test]
    fn agreement_examples() {
        let a = [0, 0, 1, 1, 2, 2];
        assert!((cluster_agreement(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let permuted = [2, 2, 0, 0, 1, 1];
        assert!((cluster_agreement(&a, &permuted).unwrap() - 1.0).abs() < 1e-12);
        assert!(cluster_agreement(&a, &[0, 1]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..4)).collect();
        let y: Vec<usize> = (0..1000).map(|_| rng.gen_range(0..4)).collect();
        assert!(cluster_agreement(&x, &y).unwrap().abs() < 0.05);
    }

    #[test]
    fn agreement_matches_pair_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..50 {
            let n = rng.gen_range(2..30);
            let a: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            let b: Vec<usize> = (0..n).map(|_| rng.gen_range(0..3)).collect();
            // brute-force pair counting
            let (mut both, mut in_a, mut in_b, mut pairs) = (0.0, 0.0, 0.0, 0.0);
            for i in 0..n {
                for j in i + 1..n {
                    let sa = a[i] == a[j];
                    let sb = b[i] == b[j];
                    both += f64::from(u8::from(sa && sb));
                    in_a += f64::from(u8::from(sa));
                    in_b += f64::from(u8::from(sb));
                    pairs += 1.0;
                }
            }
            let expected = in_a * in_b / pairs;
            let max = (in_a + in_b) / 2.0;
            if (max - expected).abs() < 1e-12 {
                continue;
            }
            let ari = (both - expected) / (max - expected);
            assert!((cluster_agreement(&a, &b).unwrap() - ari).abs() < 1e-12);
        }
    }
}

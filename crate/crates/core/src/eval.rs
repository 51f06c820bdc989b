//! Cold-start evaluation: adapt on each test user's support items, rank the
//! held-out item among sampled negatives, and aggregate MRR, Hit@1, NDCG@5
//! and HR@10.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{prefix_episode, Corpus, Split, TaskEpisode};
use crate::error::{Error, Result};
use crate::meta::{adapt, resolve_vars, Model};
use crate::model::names;
use crate::numcore::{entropy, euclidean, Tape};
use crate::objective::predict;

pub const DEFAULT_NEGATIVES: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub negatives: usize,
    pub seed: u64,
    /// Inner rate and steps used to adapt on each cold user's support items.
    pub alpha: f64,
    pub inner_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            negatives: DEFAULT_NEGATIVES,
            seed: 0,
            alpha: 0.05,
            inner_steps: 1,
        }
    }
}

/// 1-based rank of the positive by ascending distance. Negatives tied with
/// the positive are ranked ahead of it.
pub fn rank_positive(positive: f64, negatives: &[f64]) -> Result<usize> {
    if !positive.is_finite() || negatives.iter().any(|v| !v.is_finite()) {
        return Err(Error::Evaluation("non-finite score while ranking".into()));
    }
    Ok(1 + negatives.iter().filter(|&&n| n <= positive).count())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub users: usize,
    pub mrr: f64,
    pub hit1: f64,
    pub ndcg5: f64,
    pub hr10: f64,
}

pub fn metrics_from_ranks(ranks: &[usize]) -> Result<Metrics> {
    if ranks.is_empty() {
        return Err(Error::Contract("no ranks to aggregate".into()));
    }
    if ranks.contains(&0) {
        return Err(Error::Contract("ranks are 1-based".into()));
    }
    let n = ranks.len() as f64;
    let mean = |f: &dyn Fn(usize) -> f64| ranks.iter().map(|&r| f(r)).sum::<f64>() / n;
    Ok(Metrics {
        users: ranks.len(),
        mrr: mean(&|r| 1.0 / r as f64),
        hit1: mean(&|r| if r == 1 { 1.0 } else { 0.0 }),
        ndcg5: mean(&|r| if r <= 5 { 1.0 / (r as f64 + 1.0).log2() } else { 0.0 }),
        hr10: mean(&|r| if r <= 10 { 1.0 } else { 0.0 }),
    })
}

/// Expected MRR when the positive's rank is uniform over `candidates` slots.
pub fn uniform_rank_mrr(candidates: usize) -> f64 {
    (1..=candidates).map(|r| 1.0 / r as f64).sum::<f64>() / candidates as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserRank {
    pub user: String,
    pub rank: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub negatives: usize,
    pub per_user: Vec<UserRank>,
    pub metrics: Metrics,
}

impl EvalReport {
    /// Per-user rows, a blank line, then a `metric,value` footer.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("user,rank\n");
        for u in &self.per_user {
            let _ = writeln!(s, "{},{}", u.user, u.rank);
        }
        let m = &self.metrics;
        let _ = write!(
            s,
            "\nmetric,value\nusers,{}\nnegatives,{}\nmrr,{}\nhit1,{}\nndcg5,{}\nhr10,{}\n",
            m.users, self.negatives, m.mrr, m.hit1, m.ndcg5, m.hr10
        );
        s
    }

    pub fn summary_json(&self) -> String {
        let m = &self.metrics;
        serde_json::json!({
            "users": m.users,
            "negatives": self.negatives,
            "mrr": m.mrr,
            "hit1": m.hit1,
            "ndcg5": m.ndcg5,
            "hr10": m.hr10,
        })
        .to_string()
    }

    /// Metrics over the users whose external id satisfies `keep`.
    pub fn subset(&self, keep: impl Fn(&str) -> bool) -> Result<Metrics> {
        let ranks: Vec<usize> = self
            .per_user
            .iter()
            .filter(|u| keep(&u.user))
            .map(|u| u.rank)
            .collect();
        metrics_from_ranks(&ranks)
    }
}

/// Stable per-user seed from the global seed and the user's external id.
pub fn user_seed(seed: u64, user: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in seed.to_le_bytes().iter().chain(user.as_bytes()) {
        h ^= u64::from(*b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    // splitmix64 finalizer
    h = (h ^ (h >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    h = (h ^ (h >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    h ^ (h >> 31)
}

/// Adapted user vector and encoding assignment for one episode.
#[derive(Clone, Debug, PartialEq)]
pub struct UserInference {
    pub conditioned: Vec<f64>,
    pub assignment: Option<Vec<f64>>,
}

pub fn infer(model: &Model, episode: &TaskEpisode, alpha: f64, steps: usize) -> Result<UserInference> {
    let omega = adapt(model, episode, alpha, steps)?;
    let mut t = Tape::new();
    let b_phi = t.bind(&model.phi(), |_, _| false);
    let b_omega = t.bind(&omega, |_, _| false);
    let (tv, cv) = resolve_vars(&b_phi.merged(&b_omega), &model.config)?;
    let pred = predict(&mut t, &episode.support, &tv, cv.as_ref(), &model.config)?;
    Ok(UserInference {
        conditioned: t.value(pred.conditioned).data().to_vec(),
        assignment: pred
            .cluster
            .map(|c| t.value(c.assignment).data().to_vec()),
    })
}

fn check_vocabulary(model: &Model, corpus: &Corpus) -> Result<()> {
    if model.config.n_items != corpus.item_count() {
        return Err(Error::Compatibility(format!(
            "checkpoint has {} items, corpus has {}",
            model.config.n_items,
            corpus.item_count()
        )));
    }
    Ok(())
}

fn rank_user(model: &Model, corpus: &Corpus, user: usize, cfg: &EvalConfig) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(user_seed(cfg.seed, &corpus.user(user).external_id));
    let ep = prefix_episode(corpus, user, model.config.shots, cfg.negatives, &mut rng)?;
    let inf = infer(model, &ep, cfg.alpha, cfg.inner_steps)?;
    let table = model.params.value(names::ITEM_EMB)?;
    let dist = |item: usize| euclidean(&inf.conditioned, table.row(item));
    let negs: Vec<f64> = ep.query_negatives.iter().map(|&i| dist(i)).collect();
    rank_positive(dist(ep.query), &negs)
}

/// Evaluates the given users (dense indices) in parallel; row order follows
/// `users`.
pub fn evaluate_users(model: &Model, corpus: &Corpus, users: &[usize], cfg: &EvalConfig) -> Result<EvalReport> {
    check_vocabulary(model, corpus)?;
    let ranks: Vec<usize> = users
        .par_iter()
        .map(|&u| rank_user(model, corpus, u, cfg))
        .collect::<Result<_>>()?;
    let metrics = metrics_from_ranks(&ranks)?;
    Ok(EvalReport {
        negatives: cfg.negatives,
        per_user: users
            .iter()
            .zip(ranks)
            .map(|(&u, rank)| UserRank {
                user: corpus.user(u).external_id.clone(),
                rank,
            })
            .collect(),
        metrics,
    })
}

/// Evaluates every test user of the corpus.
pub fn evaluate(model: &Model, corpus: &Corpus, cfg: &EvalConfig) -> Result<EvalReport> {
    let users = corpus.users_in(Split::Test);
    if users.is_empty() {
        return Err(Error::Contract("corpus has no test users".into()));
    }
    evaluate_users(model, corpus, &users, cfg)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterRow {
    pub user: String,
    pub cluster: usize,
    pub assignment: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClusterInspection {
    pub rows: Vec<ClusterRow>,
    /// Users per argmax cluster.
    pub histogram: Vec<usize>,
}

impl ClusterInspection {
    /// Entropy (nats) of the usage distribution.
    pub fn usage_entropy(&self) -> f64 {
        let n: usize = self.histogram.iter().sum();
        let p: Vec<f64> = self.histogram.iter().map(|&c| c as f64 / n as f64).collect();
        entropy(&p)
    }

    pub fn usage_fractions(&self) -> Vec<f64> {
        let n: usize = self.histogram.iter().sum();
        self.histogram.iter().map(|&c| c as f64 / n as f64).collect()
    }

    pub fn argmax(&self) -> Vec<usize> {
        self.rows.iter().map(|r| r.cluster).collect()
    }

    pub fn to_csv(&self) -> String {
        let m = self.histogram.len();
        let mut s = String::from("user,cluster");
        for j in 0..m {
            let _ = write!(s, ",c{j}");
        }
        s.push('\n');
        for r in &self.rows {
            let _ = write!(s, "{},{}", r.user, r.cluster);
            for v in &r.assignment {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn histogram_csv(&self) -> String {
        let mut s = String::from("cluster,users,fraction\n");
        for (j, (c, f)) in self.histogram.iter().zip(self.usage_fractions()).enumerate() {
            let _ = writeln!(s, "{j},{c},{f}");
        }
        s
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Encoding assignment of every user, computed after adapting on the user's
/// first `K-1` items exactly as at evaluation time.
pub fn inspect_clusters(model: &Model, corpus: &Corpus, cfg: &EvalConfig) -> Result<ClusterInspection> {
    check_vocabulary(model, corpus)?;
    if !model.config.use_clustering {
        return Err(Error::Config("model was built without the clustering module".into()));
    }
    let rows: Vec<ClusterRow> = (0..corpus.user_count())
        .into_par_iter()
        .map(|u| {
            let ext = &corpus.user(u).external_id;
            let mut rng = ChaCha8Rng::seed_from_u64(user_seed(cfg.seed, ext));
            let ep = prefix_episode(corpus, u, model.config.shots, 0, &mut rng)?;
            let inf = infer(model, &ep, cfg.alpha, cfg.inner_steps)?;
            let assignment = inf.assignment.expect("clustering enabled");
            Ok(ClusterRow {
                user: ext.clone(),
                cluster: argmax(&assignment),
                assignment,
            })
        })
        .collect::<Result<_>>()?;
    let mut histogram = vec![0; model.config.clusters];
    for r in &rows {
        histogram[r.cluster] += 1;
    }
    Ok(ClusterInspection { rows, histogram })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{preprocess, split_users, Interaction};
    use crate::model::ModelConfig;
    use rand::Rng;

    #[test]
    fn rank_examples() {
        let mut negs = vec![5.0; 100];
        assert_eq!(rank_positive(1.0, &negs).unwrap(), 1);
        assert_eq!(rank_positive(9.0, &negs).unwrap(), 101);
        negs[3] = 1.0;
        negs[7] = 1.0;
        assert_eq!(rank_positive(1.0, &negs).unwrap(), 3);
        assert!(matches!(rank_positive(f64::NAN, &negs), Err(Error::Evaluation(_))));
        negs[0] = f64::INFINITY;
        assert!(rank_positive(1.0, &negs).is_err());
    }

    #[test]
    fn metric_examples() {
        let m = metrics_from_ranks(&[1, 1]).unwrap();
        assert_eq!((m.mrr, m.hit1, m.ndcg5, m.hr10), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(metrics_from_ranks(&[3]).unwrap().ndcg5, 0.5);
        let m = metrics_from_ranks(&[2, 12]).unwrap();
        assert_eq!((m.hr10, m.hit1), (0.5, 0.0));
        assert!(matches!(metrics_from_ranks(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn uniform_mrr_value() {
        // H_101 / 101
        assert!((uniform_rank_mrr(101) - 0.051459).abs() < 1e-6);
        assert_eq!(uniform_rank_mrr(1), 1.0);
    }

    #[test]
    fn improving_a_rank_never_hurts() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..300 {
            let mut ranks: Vec<usize> = (0..20).map(|_| rng.gen_range(1..=101)).collect();
            let before = metrics_from_ranks(&ranks).unwrap();
            let i = rng.gen_range(0..20);
            ranks[i] = rng.gen_range(1..=ranks[i]);
            let after = metrics_from_ranks(&ranks).unwrap();
            assert!(after.mrr >= before.mrr && after.hit1 >= before.hit1);
            assert!(after.ndcg5 >= before.ndcg5 && after.hr10 >= before.hr10);
            assert!(after.hit1 <= after.ndcg5 && after.hit1 <= after.hr10);
        }
    }

    #[test]
    fn user_seed_is_stable_and_spread() {
        assert_eq!(user_seed(3, "alice"), user_seed(3, "alice"));
        assert_ne!(user_seed(3, "alice"), user_seed(4, "alice"));
        assert_ne!(user_seed(3, "alice"), user_seed(3, "alicf"));
    }

    fn corpus() -> Corpus {
        let raw: Vec<Interaction> = (0..30)
            .flat_map(|u| {
                (0..4).map(move |t| Interaction::new(format!("u{u}"), format!("i{}", (u + 5 * t) % 120), t as u64))
            })
            .collect();
        let c = preprocess(&raw, 3, 3).unwrap();
        split_users(&c, 0.3, 3).unwrap().0
    }

    fn model(c: &Corpus, clustering: bool) -> Model {
        Model::new(
            ModelConfig {
                n_items: c.item_count(),
                dim: 4,
                clusters: 3,
                use_clustering: clustering,
                ..Default::default()
            },
            1,
        )
        .unwrap()
    }

    #[test]
    fn evaluation_is_reproducible_and_bounded() {
        let c = corpus();
        let m = model(&c, true);
        let cfg = EvalConfig {
            seed: 9,
            negatives: 20,
            ..Default::default()
        };
        let a = evaluate(&m, &c, &cfg).unwrap();
        let b = evaluate(&m, &c, &cfg).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
        assert_eq!(a.summary_json(), b.summary_json());
        assert!(!a.summary_json().contains('\n'));
        assert_eq!(a.per_user.len(), c.users_in(Split::Test).len());
        assert!(a.per_user.iter().all(|u| (1..=21).contains(&u.rank)));
        let m = a.metrics;
        assert!(m.hit1 <= m.hr10 && m.hit1 <= m.ndcg5 && m.ndcg5 <= 1.0);
    }

    #[test]
    fn vocabulary_mismatch_is_rejected() {
        let c = corpus();
        let mut m = model(&c, false);
        m.config.n_items -= 1;
        assert!(matches!(
            evaluate(&m, &c, &EvalConfig { negatives: 5, ..Default::default() }),
            Err(Error::Compatibility(_))
        ));
    }

    #[test]
    fn inspection_covers_every_user() {
        let c = corpus();
        let m = model(&c, true);
        let ins = inspect_clusters(&m, &c, &EvalConfig::default()).unwrap();
        assert_eq!(ins.rows.len(), c.user_count());
        assert_eq!(ins.histogram.iter().sum::<usize>(), c.user_count());
        assert_eq!(ins.to_csv().lines().count(), c.user_count() + 1);
        assert!(ins.usage_entropy() >= 0.0);
        assert!(inspect_clusters(&model(&c, false), &c, &EvalConfig::default()).is_err());
    }
}

//! Distance scoring and the margin-ranking losses over support and query
//! transitions.

use crate::clustering::{self, ClusterVars, UserClusterPass};
use crate::dataset::TaskEpisode;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, SupportTerms};
use crate::numcore::{Array, Tape, Var};
use crate::transition::{predict_vectors, TransitionVars};

/// User vector before and after cluster conditioning.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// Decoder output `p`, also the user vector `e_u` seen by the clustering module.
    pub raw: Var,
    /// `p'`; equal to `raw` when clustering is off.
    pub conditioned: Var,
    pub cluster: Option<UserClusterPass>,
}

pub fn predict(
    t: &mut Tape,
    prefix: &[usize],
    transition: &TransitionVars,
    cluster: Option<&ClusterVars>,
    cfg: &ModelConfig,
) -> Result<Prediction> {
    let outputs = predict_vectors(t, prefix, transition, cfg)?;
    let raw = *outputs.last().expect("non-empty prefix");
    match cluster {
        None => Ok(Prediction {
            raw,
            conditioned: raw,
            cluster: None,
        }),
        Some(cv) => {
            let pass = clustering::encoding_assignment(t, raw, cv)?;
            let c = clustering::sharpen_single(t, pass.assignment)?;
            let conditioned = clustering::film_condition(t, raw, c, cv)?;
            Ok(Prediction {
                raw,
                conditioned,
                cluster: Some(pass),
            })
        }
    }
}

/// `||p' - emb(item)||`; lower is better.
pub fn distance_to(t: &mut Tape, p: Var, item: usize, transition: &TransitionVars) -> Result<Var> {
    let e = t.lookup(transition.item_emb, item)?;
    t.l2_distance(p, e)
}

pub fn score(
    t: &mut Tape,
    prefix: &[usize],
    target: usize,
    transition: &TransitionVars,
    cluster: Option<&ClusterVars>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let pred = predict(t, prefix, transition, cluster, cfg)?;
    distance_to(t, pred.conditioned, target, transition)
}

/// `max(0, margin + d_pos - d_neg)`.
pub fn margin_term(t: &mut Tape, d_pos: Var, d_neg: Var, margin: f64) -> Result<Var> {
    let gap = t.sub(d_pos, d_neg)?;
    let shifted = t.affine(gap, 1.0, margin);
    Ok(t.relu(shifted))
}

/// 1-based index of the first support target that contributes a term.
pub fn first_support_target(terms: SupportTerms) -> usize {
    match terms {
        SupportTerms::FromSecond => 2,
        SupportTerms::FromThird => 3,
    }
}

/// Sum of hinge terms over support targets `I_i`, each predicted from
/// `I_1 .. I_{i-1}` and contrasted with its paired negative. A constant zero
/// when the index range is empty.
pub fn support_loss(
    t: &mut Tape,
    episode: &TaskEpisode,
    transition: &TransitionVars,
    cluster: Option<&ClusterVars>,
    cfg: &ModelConfig,
) -> Result<Var> {
    let k = episode.k();
    if k < 3 {
        return Err(Error::Episode(format!("K must be at least 3, got {k}")));
    }
    if episode.support_negatives.len() < k - 2 {
        return Err(Error::Episode(format!(
            "episode for user {} has {} support negatives, needs {}",
            episode.user,
            episode.support_negatives.len(),
            k - 2
        )));
    }
    let mut terms = Vec::new();
    for i in first_support_target(cfg.support_terms)..k {
        let prefix = &episode.support[..i - 1];
        let pred = predict(t, prefix, transition, cluster, cfg)?;
        let d_pos = distance_to(t, pred.conditioned, episode.support[i - 1], transition)?;
        let d_neg = distance_to(t, pred.conditioned, episode.support_negatives[i - 2], transition)?;
        terms.push(margin_term(t, d_pos, d_neg, cfg.margin)?);
    }
    if terms.is_empty() {
        return Ok(t.constant(Array::scalar(0.0)));
    }
    t.add_all(&terms)
}

/// Hinge loss on the held-out transition against the first query negative.
/// Also returns the prediction so the caller can feed `e_u` to the
/// clustering losses.
pub fn query_loss(
    t: &mut Tape,
    episode: &TaskEpisode,
    transition: &TransitionVars,
    cluster: Option<&ClusterVars>,
    cfg: &ModelConfig,
) -> Result<(Var, Prediction)> {
    let negative = *episode.query_negatives.first().ok_or_else(|| {
        Error::Episode(format!("episode for user {} has no query negative", episode.user))
    })?;
    let pred = predict(t, &episode.support, transition, cluster, cfg)?;
    let d_pos = distance_to(t, pred.conditioned, episode.query, transition)?;
    let d_neg = distance_to(t, pred.conditioned, negative, transition)?;
    let loss = margin_term(t, d_pos, d_neg, cfg.margin)?;
    Ok((loss, pred))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, perturb};
    use crate::numcore::{check_gradients, ParameterStore};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(clustering: bool) -> ModelConfig {
        ModelConfig {
            n_items: 10,
            dim: 4,
            shots: 3,
            clusters: 2,
            use_clustering: clustering,
            ..Default::default()
        }
    }

    fn episode(k: usize) -> TaskEpisode {
        TaskEpisode {
            user: 0,
            support: (0..k - 1).collect(),
            query: k - 1,
            support_negatives: (0..k - 2).map(|i| 9 - i).collect(),
            query_negatives: vec![8, 7],
        }
    }

    fn hinge(d_pos: f64, d_neg: f64, margin: f64) -> f64 {
        let mut t = Tape::new();
        let p = t.constant(Array::scalar(d_pos));
        let n = t.constant(Array::scalar(d_neg));
        let l = margin_term(&mut t, p, n, margin).unwrap();
        t.scalar(l)
    }

    #[test]
    fn hinge_hand_values() {
        assert_eq!(hinge(0.5, 1.0, 1.0), 0.5);
        assert_eq!(hinge(2.0, 2.0, 1.0), 1.0);
        assert_eq!(hinge(3.0, 2.0, 1.0), 2.0);
        assert_eq!(hinge(0.0, 5.0, 1.0), 0.0);
    }

    #[test]
    fn hinge_is_monotone_in_positive_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let d_neg = rng.gen_range(0.0..3.0);
            let a = rng.gen_range(0.0..3.0);
            let b = rng.gen_range(0.0..3.0);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            assert!(hinge(lo, d_neg, 1.0) <= hinge(hi, d_neg, 1.0));
        }
    }

    #[test]
    fn pythagorean_distance() {
        let mut t = Tape::new();
        let table = t.constant(Array::from_rows(&[vec![0.0, 0.0], vec![1.0, 1.0]]).unwrap());
        let p = t.constant(Array::vector(vec![3.0, 4.0]));
        let tv = fake_transition(&mut t, table);
        let d = distance_to(&mut t, p, 0, &tv).unwrap();
        assert_eq!(t.scalar(d), 5.0);
        assert!(matches!(distance_to(&mut t, p, 2, &tv), Err(Error::Index(_))));
    }

    fn fake_transition(t: &mut Tape, table: Var) -> TransitionVars {
        let s = init_params(
            &ModelConfig {
                n_items: 2,
                dim: 2,
                use_clustering: false,
                ..Default::default()
            },
            &mut ChaCha8Rng::seed_from_u64(0),
        )
        .unwrap();
        let b = t.bind(&s, |_, _| false);
        let mut tv = TransitionVars::resolve(&b).unwrap();
        tv.item_emb = table;
        tv
    }

    #[test]
    fn term_counts_follow_index_rule() {
        let s = init_params(&cfg(false), &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let mut t = Tape::new();
        let b = t.bind(&s, |_, _| true);
        let tv = TransitionVars::resolve(&b).unwrap();
        let c = cfg(false);
        let l = support_loss(&mut t, &episode(3), &tv, None, &c).unwrap();
        assert!(t.requires_grad(l), "K = 3 has one support term");

        let literal = ModelConfig {
            support_terms: SupportTerms::FromThird,
            ..c.clone()
        };
        let l = support_loss(&mut t, &episode(3), &tv, None, &literal).unwrap();
        assert!(!t.requires_grad(l));
        assert_eq!(t.scalar(l), 0.0);
    }

    #[test]
    fn support_loss_is_sum_of_per_step_hinges() {
        let c = ModelConfig { shots: 5, ..cfg(true) };
        let s = init_params(&c, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        let ep = episode(5);
        let mut t = Tape::new();
        let b = t.bind(&s, |_, _| false);
        let tv = TransitionVars::resolve(&b).unwrap();
        let cv = ClusterVars::resolve(&b, &c).unwrap();
        let total = support_loss(&mut t, &ep, &tv, Some(&cv), &c).unwrap();
        let total = t.scalar(total);
        let mut by_hand = 0.0;
        for i in 2..5 {
            let pos = score(&mut t, &ep.support[..i - 1], ep.support[i - 1], &tv, Some(&cv), &c).unwrap();
            let neg = score(&mut t, &ep.support[..i - 1], ep.support_negatives[i - 2], &tv, Some(&cv), &c).unwrap();
            by_hand += (1.0 + t.scalar(pos) - t.scalar(neg)).max(0.0);
        }
        assert!((total - by_hand).abs() < 1e-12);
    }

    #[test]
    fn losses_nonnegative_and_deterministic() {
        for seed in 0..10 {
            let s = init_params(&cfg(true), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let run = || {
                let mut t = Tape::new();
                let b = t.bind(&s, |_, _| false);
                let tv = TransitionVars::resolve(&b).unwrap();
                let cv = ClusterVars::resolve(&b, &cfg(true)).unwrap();
                let (q, _) = query_loss(&mut t, &episode(3), &tv, Some(&cv), &cfg(true)).unwrap();
                let sl = support_loss(&mut t, &episode(3), &tv, Some(&cv), &cfg(true)).unwrap();
                (t.scalar(q), t.scalar(sl))
            };
            let (q, sl) = run();
            assert!(q >= 0.0 && sl >= 0.0);
            assert_eq!(run(), (q, sl));
        }
    }

    #[test]
    fn clustering_changes_the_score_path() {
        let s = init_params(&cfg(true), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let mut t = Tape::new();
        let b = t.bind(&s, |_, _| false);
        let tv = TransitionVars::resolve(&b).unwrap();
        let cv = ClusterVars::resolve(&b, &cfg(true)).unwrap();
        let p = predict(&mut t, &[1, 2], &tv, Some(&cv), &cfg(true)).unwrap();
        assert!(p.cluster.is_some());
        assert_ne!(t.value(p.raw), t.value(p.conditioned));
        let q = predict(&mut t, &[1, 2], &tv, None, &cfg(true)).unwrap();
        assert_eq!(t.value(q.raw), t.value(q.conditioned));
    }

    fn support_gradcheck(s: &ParameterStore, c: &ModelConfig) -> f64 {
        check_gradients(
            |t, b| {
                let tv = TransitionVars::resolve(b)?;
                let cv = if c.use_clustering {
                    Some(ClusterVars::resolve(b, c)?)
                } else {
                    None
                };
                support_loss(t, &episode(c.shots), &tv, cv.as_ref(), c)
            },
            s,
            1e-3,
        )
        .unwrap()
        .max_rel_error
    }

    #[test]
    fn support_loss_gradient_through_full_model() {
        let c = ModelConfig {
            margin: 4.0,
            ..cfg(true)
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut s = init_params(&c, &mut rng).unwrap();
        perturb(&mut s, &mut rng, 0.05);
        let err = support_gradcheck(&s, &c);
        assert!(err <= 1e-4, "max relative error {err}");
    }
}

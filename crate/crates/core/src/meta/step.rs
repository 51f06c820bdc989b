use rayon::prelude::*;

use super::{resolve_vars, Model};
use crate::clustering::{batch_cluster_loss, BatchClusterLoss};
use crate::dataset::TaskEpisode;
use crate::error::{Error, Result};
use crate::model::names;
use crate::numcore::{GradientMap, ParameterStore, Partition, Tape, Var};
use crate::objective::{query_loss, support_loss};

/// Runs `steps` gradient-descent updates of `ω` on the episode's support loss
/// with `Φ` frozen. Returns the adapted copy `ω'`; the model is untouched.
pub fn adapt(model: &Model, episode: &TaskEpisode, alpha: f64, steps: usize) -> Result<ParameterStore> {
    let phi = model.phi();
    let mut omega = model.omega();
    for _ in 0..steps {
        let mut t = Tape::new();
        let b_phi = t.bind(&phi, |_, _| false);
        let b_omega = t.bind(&omega, |_, _| true);
        let b = b_phi.merged(&b_omega);
        let (tv, cv) = resolve_vars(&b, &model.config)?;
        let loss = support_loss(&mut t, episode, &tv, cv.as_ref(), &model.config)?;
        let value = t.scalar(loss);
        if !value.is_finite() {
            return Err(Error::Training(format!(
                "support loss is {value} for episode of user {}",
                episode.user
            )));
        }
        if !t.requires_grad(loss) {
            break;
        }
        let grads = t.backward(loss)?;
        omega.descend(&b_omega.collect(&t, &grads), alpha);
    }
    Ok(omega)
}

/// Scalar summary of one meta-step.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct StepLog {
    pub episodes: usize,
    pub query_loss_sum: f64,
    pub mean_query_loss: f64,
    /// `L_rec + L_mod + L_combo`; zero without clustering.
    pub cluster_loss: f64,
    pub reconstruction: f64,
    pub modularity: f64,
    pub combo: f64,
    pub total: f64,
    /// Set when the step was skipped because the objective was not finite.
    pub aborted: bool,
}

struct BatchForward {
    total: Var,
    query: Vec<Var>,
    cluster: Option<BatchClusterLoss>,
}

fn adapt_all(model: &Model, episodes: &[TaskEpisode], alpha: f64, steps: usize) -> Result<Vec<ParameterStore>> {
    episodes
        .par_iter()
        .map(|ep| adapt(model, ep, alpha, steps))
        .collect()
}

/// Query losses under each episode's `ω'` plus the batch clustering loss.
/// Returns the forward record and the per-episode `ω'` bindings.
fn forward_batch(
    t: &mut Tape,
    model: &Model,
    episodes: &[TaskEpisode],
    adapted: &[ParameterStore],
    phi: &ParameterStore,
) -> Result<(BatchForward, crate::numcore::Bindings, Vec<crate::numcore::Bindings>)> {
    let cfg = &model.config;
    let b_phi = t.bind(phi, |_, _| true);
    let mut b_omegas = Vec::with_capacity(episodes.len());
    let mut query = Vec::with_capacity(episodes.len());
    let mut passes = Vec::new();
    for (ep, omega) in episodes.iter().zip(adapted) {
        let b_omega = t.bind(omega, |_, _| true);
        let b = b_phi.merged(&b_omega);
        let (tv, cv) = resolve_vars(&b, cfg)?;
        let (loss, pred) = query_loss(t, ep, &tv, cv.as_ref(), cfg)?;
        query.push(loss);
        if let Some(pass) = pred.cluster {
            passes.push(pass);
        }
        b_omegas.push(b_omega);
    }
    let query_sum = t.add_all(&query)?;
    let (total, cluster) = if cfg.use_clustering {
        let (_, cv) = resolve_vars(&b_phi.merged(&b_omegas[0]), cfg)?;
        let cv = cv.expect("clustering enabled");
        let item_sets: Vec<Vec<usize>> = episodes
            .iter()
            .map(|ep| {
                let mut s = ep.items();
                s.sort_unstable();
                s.dedup();
                s
            })
            .collect();
        let table = phi.value(names::ITEM_EMB)?;
        let cl = batch_cluster_loss(t, &passes, &item_sets, table, &cv, cfg)?;
        (t.add(query_sum, cl.total)?, Some(cl))
    } else {
        (query_sum, None)
    };
    Ok((BatchForward { total, query, cluster }, b_phi, b_omegas))
}

fn log_from(t: &Tape, fwd: &BatchForward) -> StepLog {
    let q: f64 = fwd.query.iter().map(|v| t.scalar(*v)).sum();
    let n = fwd.query.len();
    let (rec, modu, combo, cl) = match &fwd.cluster {
        Some(c) => (
            t.scalar(c.reconstruction),
            t.scalar(c.modularity),
            t.scalar(c.combo),
            t.scalar(c.total),
        ),
        None => (0.0, 0.0, 0.0, 0.0),
    };
    let total = t.scalar(fwd.total);
    StepLog {
        episodes: n,
        query_loss_sum: q,
        mean_query_loss: q / n as f64,
        cluster_loss: cl,
        reconstruction: rec,
        modularity: modu,
        combo,
        total,
        aborted: !total.is_finite(),
    }
}

fn check_batch(episodes: &[TaskEpisode]) -> Result<()> {
    if episodes.len() < 2 {
        return Err(Error::Config(format!(
            "a meta-step needs at least 2 episodes, got {}",
            episodes.len()
        )));
    }
    Ok(())
}

/// The batch objective `Σ L_Q(ω'_n, Φ) + L_CM` as a function of `θ`, with the
/// inner adaptation recomputed from the model's current `ω`.
pub fn meta_objective(model: &Model, episodes: &[TaskEpisode], alpha: f64, steps: usize) -> Result<f64> {
    check_batch(episodes)?;
    let adapted = adapt_all(model, episodes, alpha, steps)?;
    let mut t = Tape::new();
    let (fwd, _, _) = forward_batch(&mut t, model, episodes, &adapted, &model.phi())?;
    Ok(t.scalar(fwd.total))
}

#[derive(Clone, Debug)]
pub struct MetaGradient {
    /// First-order gradient over every name in `θ`: for `ω` the sum over
    /// episodes of the gradient at `ω'_n`, for `Φ` the direct gradient.
    pub grads: GradientMap,
    pub log: StepLog,
}

pub fn meta_gradient(model: &Model, episodes: &[TaskEpisode], alpha: f64, steps: usize) -> Result<MetaGradient> {
    check_batch(episodes)?;
    let adapted = match adapt_all(model, episodes, alpha, steps) {
        Ok(a) => a,
        Err(Error::Training(_)) => {
            return Ok(MetaGradient {
                grads: GradientMap::zeros_like(&model.params),
                log: StepLog {
                    episodes: episodes.len(),
                    total: f64::NAN,
                    aborted: true,
                    ..Default::default()
                },
            })
        }
        Err(e) => return Err(e),
    };
    let mut t = Tape::new();
    let phi = model.phi();
    let (fwd, b_phi, b_omegas) = forward_batch(&mut t, model, episodes, &adapted, &phi)?;
    let log = log_from(&t, &fwd);
    if log.aborted {
        return Ok(MetaGradient {
            grads: GradientMap::zeros_like(&model.params),
            log,
        });
    }
    let g = t.backward(fwd.total)?;
    let mut grads = b_phi.collect(&t, &g);
    let mut omega_sum = GradientMap::zeros_like(&model.params.subset(Partition::Adapted));
    for b in &b_omegas {
        omega_sum.accumulate(&b.collect(&t, &g));
    }
    grads.accumulate(&omega_sum);
    Ok(MetaGradient { grads, log })
}

/// One outer update `θ ← θ - β ∇θ`, first-order through the adaptation.
/// A non-finite objective leaves `θ` untouched and sets `aborted`.
pub fn meta_step(model: &mut Model, episodes: &[TaskEpisode], alpha: f64, beta: f64, steps: usize) -> Result<StepLog> {
    let mg = meta_gradient(model, episodes, alpha, steps)?;
    if mg.log.aborted || !mg.grads.is_finite() {
        return Ok(StepLog {
            aborted: true,
            ..mg.log
        });
    }
    if beta != 0.0 {
        model.params.descend(&mg.grads, beta);
    }
    Ok(mg.log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::numcore::Array;

    fn cfg(clustering: bool) -> ModelConfig {
        ModelConfig {
            n_items: 12,
            dim: 4,
            shots: 3,
            clusters: 2,
            use_clustering: clustering,
            ..Default::default()
        }
    }

    fn ep(user: usize, items: [usize; 3], neg: usize) -> TaskEpisode {
        TaskEpisode {
            user,
            support: items[..2].to_vec(),
            query: items[2],
            support_negatives: vec![neg],
            query_negatives: vec![neg + 1],
        }
    }

    fn batch() -> Vec<TaskEpisode> {
        vec![ep(0, [0, 1, 2], 8), ep(1, [3, 4, 5], 9), ep(2, [1, 6, 7], 10)]
    }

    #[test]
    fn adapt_leaves_model_untouched() {
        let m = Model::new(cfg(true), 0).unwrap();
        let before = m.clone();
        let omega = adapt(&m, &batch()[0], 0.1, 2).unwrap();
        assert_eq!(m, before);
        assert_ne!(omega, m.omega());
        assert_eq!(omega.names().collect::<Vec<_>>(), m.omega().names().collect::<Vec<_>>());
    }

    #[test]
    fn saturated_support_loss_keeps_omega() {
        // margin small and negatives pushed far away: every hinge is zero
        let mut m = Model::new(ModelConfig { margin: 1e-6, ..cfg(false) }, 1).unwrap();
        let table = m.params.value_mut(names::ITEM_EMB).unwrap();
        for r in 8..12 {
            table.row_mut(r).fill(100.0);
        }
        let omega = adapt(&m, &batch()[0], 0.5, 1).unwrap();
        assert_eq!(omega, m.omega());
    }

    #[test]
    fn adapt_matches_manual_descent() {
        let m = Model::new(cfg(true), 2).unwrap();
        let e = &batch()[1];
        let mut t = Tape::new();
        let b_phi = t.bind(&m.phi(), |_, _| false);
        let b_omega = t.bind(&m.omega(), |_, _| true);
        let (tv, cv) = resolve_vars(&b_phi.merged(&b_omega), &m.config).unwrap();
        let loss = support_loss(&mut t, e, &tv, cv.as_ref(), &m.config).unwrap();
        let g = b_omega.collect(&t, &t.backward(loss).unwrap());
        let mut expect = m.omega();
        expect.descend(&g, 0.01);
        assert_eq!(adapt(&m, e, 0.01, 1).unwrap(), expect);
    }

    #[test]
    fn zero_beta_is_a_no_op() {
        let mut m = Model::new(cfg(true), 3).unwrap();
        let before = m.clone();
        let log = meta_step(&mut m, &batch(), 0.05, 0.0, 1).unwrap();
        assert!(!log.aborted);
        assert_eq!(m, before);
    }

    #[test]
    fn meta_step_updates_both_partitions() {
        let mut m = Model::new(cfg(true), 4).unwrap();
        let before = m.clone();
        let log = meta_step(&mut m, &batch(), 0.05, 0.01, 1).unwrap();
        assert!(log.total.is_finite() && log.cluster_loss > 0.0);
        assert_ne!(m.omega(), before.omega());
        assert_ne!(m.phi(), before.phi());
    }

    #[test]
    fn identical_episodes_scale_linearly_without_clustering() {
        let m = Model::new(cfg(false), 5).unwrap();
        let one = ep(0, [0, 1, 2], 8);
        let g2 = meta_gradient(&m, &vec![one.clone(); 2], 0.05, 1).unwrap().grads;
        let g4 = meta_gradient(&m, &vec![one; 4], 0.05, 1).unwrap().grads;
        for (name, a) in g2.iter() {
            let b = g4.get(name).unwrap();
            let doubled = a.map(|v| 2.0 * v);
            assert!(doubled.max_abs_diff(b) < 1e-12, "{name}");
        }
    }

    #[test]
    fn non_finite_objective_aborts() {
        let mut m = Model::new(cfg(true), 6).unwrap();
        m.params
            .value_mut("fc3.b")
            .unwrap()
            .data_mut()
            .fill(f64::INFINITY);
        let before = m.clone();
        let log = meta_step(&mut m, &batch(), 0.05, 0.01, 1).unwrap();
        assert!(log.aborted);
        assert_eq!(m, before);
    }

    #[test]
    fn single_episode_batch_is_rejected() {
        let mut m = Model::new(cfg(false), 7).unwrap();
        assert!(matches!(
            meta_step(&mut m, &batch()[..1], 0.05, 0.01, 1),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn objective_matches_logged_total() {
        let m = Model::new(cfg(true), 8).unwrap();
        let total = meta_objective(&m, &batch(), 0.05, 1).unwrap();
        let log = meta_gradient(&m, &batch(), 0.05, 1).unwrap().log;
        assert_eq!(total, log.total);
        assert!((log.total - log.query_loss_sum - log.cluster_loss).abs() < 1e-12);
        let _ = Array::scalar(0.0);
    }
}

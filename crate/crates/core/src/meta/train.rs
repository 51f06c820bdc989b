use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checkpoint::save_checkpoint;
use super::step::meta_step;
use super::{MetaConfig, Model};
use crate::dataset::{sample_episode, Corpus, Split};
use crate::error::{Error, Result};

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Final checkpoint path; intermediate checkpoints overwrite it.
    pub checkpoint: Option<PathBuf>,
    /// Save every this many epochs (0 saves only at the end).
    pub checkpoint_every: usize,
    /// Training log CSV path.
    pub log: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_query_loss: f64,
    pub cluster_loss: f64,
    pub wall_time: f64,
    pub aborted_steps: usize,
}

#[derive(Clone, Debug, Default)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,mean_query_loss,cluster_loss,wall_time\n");
        for e in &self.epochs {
            let _ = writeln!(
                s,
                "{},{},{},{:.3}",
                e.epoch, e.mean_query_loss, e.cluster_loss, e.wall_time
            );
        }
        s
    }
}

/// Meta-trains `model` on the corpus's training users.
///
/// Each epoch shuffles the training users and cuts them into batches of
/// `batch_size`; a trailing batch with fewer than 2 users is dropped. Every
/// visit draws a fresh episode window and fresh negatives.
pub fn train(
    model: &mut Model,
    corpus: &Corpus,
    meta: &MetaConfig,
    opts: &TrainOptions,
) -> Result<TrainReport> {
    meta.validate()?;
    if model.config.n_items != corpus.item_count() {
        return Err(Error::Compatibility(format!(
            "model has {} items, corpus has {}",
            model.config.n_items,
            corpus.item_count()
        )));
    }
    let mut users = corpus.users_in(Split::Train);
    if users.len() < meta.batch_size {
        return Err(Error::Config(format!(
            "{} training users, batch size {}",
            users.len(),
            meta.batch_size
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(meta.seed);
    let k = model.config.shots;
    let start = Instant::now();
    let mut report = TrainReport::default();
    for epoch in 1..=meta.epochs {
        users.shuffle(&mut rng);
        let (mut q_sum, mut q_count, mut cl_sum, mut steps, mut aborted) = (0.0, 0usize, 0.0, 0usize, 0usize);
        for chunk in users.chunks(meta.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            let episodes = chunk
                .iter()
                .map(|&u| sample_episode(corpus, u, k, 1, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let log = meta_step(model, &episodes, meta.alpha, meta.beta, meta.inner_steps)?;
            if log.aborted {
                aborted += 1;
                continue;
            }
            q_sum += log.query_loss_sum;
            q_count += log.episodes;
            cl_sum += log.cluster_loss;
            steps += 1;
        }
        report.epochs.push(EpochLog {
            epoch,
            mean_query_loss: if q_count > 0 { q_sum / q_count as f64 } else { f64::NAN },
            cluster_loss: if steps > 0 { cl_sum / steps as f64 } else { f64::NAN },
            wall_time: start.elapsed().as_secs_f64(),
            aborted_steps: aborted,
        });
        if let Some(path) = &opts.checkpoint {
            if opts.checkpoint_every > 0 && epoch % opts.checkpoint_every == 0 {
                save_checkpoint(&model.params, path)?;
            }
        }
    }
    if let Some(path) = &opts.checkpoint {
        save_checkpoint(&model.params, path)?;
    }
    if let Some(path) = &opts.log {
        fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))?;
    }
    Ok(report)
}

use rand::seq::index;
use rand::Rng;

use super::corpus::{Corpus, Split};
use crate::error::{Error, Result};

/// One user's few-shot task: `K-1` support items and one held-out query.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskEpisode {
    pub user: usize,
    /// `I_1 .. I_{K-1}`.
    pub support: Vec<usize>,
    /// `I_K`.
    pub query: usize,
    /// `support_negatives[t]` is the negative paired with target `support[t + 1]`.
    pub support_negatives: Vec<usize>,
    pub query_negatives: Vec<usize>,
}

impl TaskEpisode {
    pub fn k(&self) -> usize {
        self.support.len() + 1
    }

    /// All `K` items in order.
    pub fn items(&self) -> Vec<usize> {
        let mut v = self.support.clone();
        v.push(self.query);
        v
    }
}

/// Draws `n` distinct items the user never interacted with.
pub fn sample_negatives<R: Rng + ?Sized>(
    corpus: &Corpus,
    user: usize,
    n: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let seen = corpus.item_set(user);
    let available = corpus.item_count() - seen.len();
    if available < n {
        return Err(Error::Sampling(format!(
            "user {user} has {available} candidate negatives, {n} requested"
        )));
    }
    // index into the complement without materializing it
    let picks = index::sample(rng, available, n);
    Ok(picks
        .into_iter()
        .map(|rank| nth_unseen(seen, rank))
        .collect())
}

/// `rank`-th item (0-based) not contained in the sorted set `seen`.
fn nth_unseen(seen: &[usize], rank: usize) -> usize {
    // smallest x with x - |{s in seen : s < x}| == rank and x not in seen
    let mut candidate = rank;
    let mut skipped = 0;
    loop {
        let below = seen.partition_point(|&s| s <= candidate);
        if below == skipped {
            return candidate;
        }
        candidate += below - skipped;
        skipped = below;
    }
}

/// Cuts a `K`-item window from a user's sequence and attaches negatives.
///
/// Training users get a window at a uniformly random offset; test users always
/// get their first `K` interactions.
pub fn sample_episode<R: Rng + ?Sized>(
    corpus: &Corpus,
    user: usize,
    k: usize,
    query_negatives: usize,
    rng: &mut R,
) -> Result<TaskEpisode> {
    let seq = corpus.sequence(user);
    if k < 3 {
        return Err(Error::Episode(format!("K must be at least 3, got {k}")));
    }
    if seq.len() < k {
        return Err(Error::Episode(format!(
            "user {user} has {} interactions, K = {k}",
            seq.len()
        )));
    }
    let offset = match corpus.split_of(user) {
        Split::Train => rng.gen_range(0..=seq.len() - k),
        Split::Test => 0,
    };
    window_episode(corpus, user, offset, k, query_negatives, rng)
}

/// Episode over a user's first `K` interactions regardless of split.
pub fn prefix_episode<R: Rng + ?Sized>(
    corpus: &Corpus,
    user: usize,
    k: usize,
    query_negatives: usize,
    rng: &mut R,
) -> Result<TaskEpisode> {
    let seq = corpus.sequence(user);
    if k < 3 || seq.len() < k {
        return Err(Error::Episode(format!(
            "user {user} has {} interactions, K = {k}",
            seq.len()
        )));
    }
    window_episode(corpus, user, 0, k, query_negatives, rng)
}

fn window_episode<R: Rng + ?Sized>(
    corpus: &Corpus,
    user: usize,
    offset: usize,
    k: usize,
    query_negatives: usize,
    rng: &mut R,
) -> Result<TaskEpisode> {
    let window = &corpus.sequence(user)[offset..offset + k];
    let support_negatives = sample_negatives(corpus, user, k - 2, rng)?;
    let query_negatives = sample_negatives(corpus, user, query_negatives, rng)?;
    Ok(TaskEpisode {
        user,
        support: window[..k - 1].to_vec(),
        query: window[k - 1],
        support_negatives,
        query_negatives,
    })
}

//! Interaction ingestion, cold-start preprocessing and episode sampling.

mod cache;
mod corpus;
mod episode;
mod ingest;

pub use cache::{decode_corpus, encode_corpus, read_corpus, write_corpus, CORPUS_MAGIC};
pub use corpus::{preprocess, split_users, Corpus, CorpusStats, Split, SplitReport, UserSequence};
pub use episode::{prefix_episode, sample_episode, sample_negatives, TaskEpisode};
pub use ingest::{ingest_path, ingest_reader, Ingested, Interaction};

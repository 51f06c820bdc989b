//! Meta-learned, clustering-conditioned sequential recommendation for
//! cold-start users.
//!
//! A GRU encoder/decoder with attention turns a short item history into a
//! user vector. A clustering module (M autoencoders supervised by a GCN over a
//! user-relation graph) produces a soft cluster assignment that modulates that
//! vector before items are scored by L2 distance. The transition model is
//! adapted per user in an inner loop; everything is meta-trained on the
//! query-transition margin loss plus the clustering losses.

pub mod clustering;
pub mod dataset;
pub mod eval;
pub mod error;
pub mod meta;
pub mod model;
pub mod numcore;
pub mod objective;
pub mod synthgen;
pub mod transition;

pub use error::{Error, Result};

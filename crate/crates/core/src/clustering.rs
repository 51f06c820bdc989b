//! Clustering module that keeps minority users from being absorbed by the
//! majority: `M` autoencoders give an encoding assignment, a GCN over a
//! user-relation graph gives a topological assignment, sharpened targets tie
//! the two together, and the encoding assignment modulates the user vector.

use crate::error::{Error, Result};
use crate::model::{names, ModelConfig, SharpenRule, AE_ENCODER_LAYERS};
use crate::numcore::{self, Activation, Array, Bindings, Tape, Var};
use crate::transition::LinearVars;

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub linear: LinearVars,
    pub activation: Activation,
}

/// One autoencoder: the first `encoder_depth` layers encode, the rest decode.
#[derive(Clone, Debug)]
pub struct AutoencoderVars {
    pub layers: Vec<LayerVars>,
    pub encoder_depth: usize,
}

#[derive(Clone, Debug)]
pub struct ClusterVars {
    pub autoencoders: Vec<AutoencoderVars>,
    /// `L_enc` propagation weights followed by the projection to `M` columns.
    pub gcn: Vec<Var>,
    pub gamma: LinearVars,
    pub beta: LinearVars,
}

impl ClusterVars {
    pub fn resolve(b: &Bindings, cfg: &ModelConfig) -> Result<Self> {
        let n_layers = cfg.ae_widths().len() - 1;
        let autoencoders = (0..cfg.clusters)
            .map(|j| {
                let layers = (0..n_layers)
                    .map(|l| {
                        Ok(LayerVars {
                            linear: LinearVars::resolve(b, &names::ae_layer(j, l))?,
                            activation: if l + 1 == n_layers {
                                Activation::Linear
                            } else {
                                Activation::Relu
                            },
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                Ok(AutoencoderVars {
                    layers,
                    encoder_depth: AE_ENCODER_LAYERS,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let gcn = (0..=AE_ENCODER_LAYERS)
            .map(|l| b.get(&names::gcn_w(l)))
            .collect::<Result<Vec<_>>>()?;
        Ok(ClusterVars {
            autoencoders,
            gcn,
            gamma: LinearVars::resolve(b, names::FILM_GAMMA)?,
            beta: LinearVars::resolve(b, names::FILM_BETA)?,
        })
    }

    pub fn clusters(&self) -> usize {
        self.autoencoders.len()
    }
}

/// Layer representations `H(0) = e_u .. H(L)` and the reconstruction `H(L)`.
#[derive(Clone, Debug)]
pub struct AePass {
    pub layers: Vec<Var>,
    pub reconstruction: Var,
}

pub fn autoencode(t: &mut Tape, e_u: Var, vars: &ClusterVars, j: usize) -> Result<AePass> {
    let ae = vars.autoencoders.get(j).ok_or_else(|| {
        Error::Index(format!(
            "autoencoder {j} out of range for {} clusters",
            vars.clusters()
        ))
    })?;
    run_autoencoder(t, e_u, ae)
}

pub fn run_autoencoder(t: &mut Tape, e_u: Var, ae: &AutoencoderVars) -> Result<AePass> {
    let mut layers = vec![e_u];
    let mut h = e_u;
    for layer in &ae.layers {
        let y = layer.linear.apply(t, h)?;
        h = t.activation(y, layer.activation);
        layers.push(h);
    }
    Ok(AePass {
        layers,
        reconstruction: h,
    })
}

/// Everything the clustering module computes for one user vector.
#[derive(Clone, Debug)]
pub struct UserClusterPass {
    pub embedding: Var,
    pub passes: Vec<AePass>,
    /// `d(e_u, ê_u(j))` per autoencoder.
    pub distances: Vec<Var>,
    /// Encoding assignment, softmax of negated distances.
    pub assignment: Var,
    /// Index of the best-reconstructing autoencoder (lowest index on ties).
    pub best: usize,
}

pub fn encoding_assignment(t: &mut Tape, e_u: Var, vars: &ClusterVars) -> Result<UserClusterPass> {
    if vars.clusters() < 2 {
        return Err(Error::Config("encoding assignment needs at least 2 autoencoders".into()));
    }
    let mut passes = Vec::with_capacity(vars.clusters());
    let mut distances = Vec::with_capacity(vars.clusters());
    for j in 0..vars.clusters() {
        let pass = autoencode(t, e_u, vars, j)?;
        distances.push(t.l2_distance(e_u, pass.reconstruction)?);
        passes.push(pass);
    }
    let mut best = 0;
    for (j, d) in distances.iter().enumerate() {
        if t.scalar(*d) < t.scalar(distances[best]) {
            best = j;
        }
    }
    let stacked = t.stack(&distances)?;
    let neg = t.affine(stacked, -1.0, 0.0);
    let assignment = t.softmax(neg)?;
    Ok(UserClusterPass {
        embedding: e_u,
        passes,
        distances,
        assignment,
        best,
    })
}

/// `min_j d(e_u, ê_u(j))`; gradient reaches only the winning autoencoder.
pub fn reconstruction_loss(pass: &UserClusterPass) -> Var {
    pass.distances[pass.best]
}

/// Dense user-relation graph with its symmetric normalized adjacency.
#[derive(Clone, Debug)]
pub struct RelationGraph {
    /// Raw 0/1 adjacency after symmetrization, without self-loops.
    pub adjacency: Array,
    /// `Deg^{-1/2} (A + I) Deg^{-1/2}`.
    pub normalized: Array,
}

/// Pairwise relation score: embedding cosine plus `sigma` times the summed
/// cosine of each shared item's embedding with itself (1 per shared item with
/// a nonzero embedding).
pub fn relation_score(
    a: &[f64],
    b: &[f64],
    items_a: &[usize],
    items_b: &[usize],
    item_table: &Array,
    sigma: f64,
) -> f64 {
    let mut shared = 0.0;
    let (mut i, mut j) = (0, 0);
    while i < items_a.len() && j < items_b.len() {
        match items_a[i].cmp(&items_b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                let e = item_table.row(items_a[i]);
                shared += numcore::cosine(e, e);
                i += 1;
                j += 1;
            }
        }
    }
    numcore::cosine(a, b) + sigma * shared
}

/// Keeps each user's `n_adj` best-scoring neighbors (lower index wins ties),
/// symmetrizes with `max(A, Aᵀ)` and normalizes with self-loops.
///
/// `item_sets` must be sorted and deduplicated.
pub fn build_relation_graph(
    embeddings: &Array,
    item_sets: &[Vec<usize>],
    item_table: &Array,
    n_adj: usize,
    sigma: f64,
) -> Result<RelationGraph> {
    let b = embeddings.rows();
    if embeddings.rank() != 2 || item_sets.len() != b {
        return Err(Error::Dimension(format!(
            "relation graph over {:?} embeddings and {} item sets",
            embeddings.shape(),
            item_sets.len()
        )));
    }
    if b < 2 {
        return Err(Error::Config("relation graph needs at least 2 users".into()));
    }
    if n_adj == 0 || n_adj > b - 1 {
        return Err(Error::Config(format!(
            "n_adj = {n_adj} invalid for a batch of {b}"
        )));
    }
    let mut adj = Array::zeros(&[b, b]);
    for i in 0..b {
        let mut scored: Vec<(f64, usize)> = (0..b)
            .filter(|&j| j != i)
            .map(|j| {
                let s = relation_score(
                    embeddings.row(i),
                    embeddings.row(j),
                    &item_sets[i],
                    &item_sets[j],
                    item_table,
                    sigma,
                );
                (s, j)
            })
            .collect();
        scored.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        for &(_, j) in scored.iter().take(n_adj) {
            adj.row_mut(i)[j] = 1.0;
            adj.row_mut(j)[i] = 1.0;
        }
    }
    let normalized = normalize_adjacency(&adj);
    Ok(RelationGraph {
        adjacency: adj,
        normalized,
    })
}

pub fn normalize_adjacency(adj: &Array) -> Array {
    let b = adj.rows();
    let mut with_loops = adj.clone();
    for i in 0..b {
        with_loops.row_mut(i)[i] += 1.0;
    }
    let inv_sqrt: Vec<f64> = (0..b)
        .map(|i| 1.0 / with_loops.row(i).iter().sum::<f64>().sqrt())
        .collect();
    let mut out = with_loops;
    for i in 0..b {
        let row = out.row_mut(i);
        for (j, v) in row.iter_mut().enumerate() {
            *v *= inv_sqrt[i] * inv_sqrt[j];
        }
    }
    out
}

/// One propagation layer: `Z' = (1-ε) Z + ε H`, `Z_next = φ(Â Z' W)`.
pub fn gcn_layer(
    t: &mut Tape,
    z: Var,
    h: Var,
    adj: Var,
    w: Var,
    epsilon: f64,
    activation: Activation,
) -> Result<Var> {
    let zs = t.affine(z, 1.0 - epsilon, 0.0);
    let hs = t.affine(h, epsilon, 0.0);
    let mixed = t.add(zs, hs)?;
    let prop = t.matmul(adj, mixed)?;
    let out = t.matmul(prop, w)?;
    Ok(t.activation(out, activation))
}

/// Runs `L_enc` propagation layers seeded with `Z(0) = H(0)`, then the linear
/// projection to `M` columns.
///
/// `h_layers[l]` is the `B x D_l` stack of each user's best-autoencoder layer `l`.
pub fn gcn_forward(
    t: &mut Tape,
    h_layers: &[Var],
    adj: Var,
    weights: &[Var],
    epsilon: f64,
    activation: Activation,
) -> Result<Var> {
    if h_layers.len() != weights.len() || weights.is_empty() {
        return Err(Error::Config(format!(
            "GCN with {} weight matrices over {} representation layers",
            weights.len(),
            h_layers.len()
        )));
    }
    let last = weights.len() - 1;
    let mut z = h_layers[0];
    for l in 0..last {
        check_chain(t, h_layers[l], weights[l])?;
        z = gcn_layer(t, z, h_layers[l], adj, weights[l], epsilon, activation)?;
    }
    check_chain(t, h_layers[last], weights[last])?;
    gcn_layer(t, z, h_layers[last], adj, weights[last], epsilon, Activation::Linear)
}

fn check_chain(t: &Tape, h: Var, w: Var) -> Result<()> {
    let (hv, wv) = (t.value(h), t.value(w));
    if hv.cols() != wv.rows() {
        return Err(Error::Config(format!(
            "GCN layer expects width {}, representation has {}",
            wv.rows(),
            hv.cols()
        )));
    }
    Ok(())
}

/// Row-wise softmax of the final GCN output.
pub fn topological_assignment(t: &mut Tape, z_final: Var) -> Result<Var> {
    t.softmax(z_final)
}

/// Sharpened targets from a `B x M` assignment matrix.
pub fn sharpen(c: &Array, rule: SharpenRule) -> Array {
    match rule {
        SharpenRule::Normalized => numcore::sharpen_values(c),
        SharpenRule::Literal => {
            let cols = c.cols();
            let mut f = vec![0.0; cols];
            for r in 0..c.rows() {
                for (fj, v) in f.iter_mut().zip(c.row(r)) {
                    *fj += v;
                }
            }
            let mut out = c.clone();
            for r in 0..c.rows() {
                let denom: f64 = (0..cols)
                    .filter(|&j| f[j] > 0.0)
                    .map(|j| c.get2(r, j) / f[j])
                    .sum();
                for (j, v) in out.row_mut(r).iter_mut().enumerate() {
                    *v = if f[j] > 0.0 && denom > 0.0 {
                        *v * *v / f[j] / denom
                    } else {
                        0.0
                    };
                }
            }
            out
        }
    }
}

/// `(L_mod, L_combo)`: batch means of `KL(sharpen(c_top) || c_top)` and
/// `KL(sharpen(c_enc) || c_top)`, with the sharpened targets held constant.
pub fn clustering_losses(
    t: &mut Tape,
    c_enc: Var,
    c_top: Var,
    rule: SharpenRule,
) -> Result<(Var, Var)> {
    let (enc, top) = (t.value(c_enc), t.value(c_top));
    if enc.shape() != top.shape() || enc.rank() != 2 {
        return Err(Error::Dimension(format!(
            "assignments {:?} and {:?}",
            enc.shape(),
            top.shape()
        )));
    }
    let (top_sharp, enc_sharp) = (sharpen(top, rule), sharpen(enc, rule));
    kl_to_targets(t, c_top, top_sharp, enc_sharp)
}

/// Batch-mean KL of fixed targets against the rows of `c_top`.
pub fn kl_to_targets(t: &mut Tape, c_top: Var, top_target: Array, enc_target: Array) -> Result<(Var, Var)> {
    let shape = t.value(c_top).shape().to_vec();
    if top_target.shape() != shape.as_slice() || enc_target.shape() != shape.as_slice() {
        return Err(Error::Dimension(format!(
            "targets {:?} / {:?} against assignment {shape:?}",
            top_target.shape(),
            enc_target.shape()
        )));
    }
    let top_target = t.constant(top_target);
    let enc_target = t.constant(enc_target);
    let rows = shape[0];
    let mut mods = Vec::with_capacity(rows);
    let mut combos = Vec::with_capacity(rows);
    for i in 0..rows {
        let q = t.row(c_top, i)?;
        let p_top = t.row(top_target, i)?;
        let p_enc = t.row(enc_target, i)?;
        mods.push(t.kl_divergence(p_top, q)?);
        combos.push(t.kl_divergence(p_enc, q)?);
    }
    Ok((t.mean(&mods)?, t.mean(&combos)?))
}

pub fn total_cluster_loss(t: &mut Tape, rec: Var, modularity: Var, combo: Var) -> Result<Var> {
    let s = t.add(rec, modularity)?;
    t.add(s, combo)
}

/// `u' = f_gamma(c) ⊙ u + f_beta(c)`.
pub fn film_condition(t: &mut Tape, u: Var, c: Var, vars: &ClusterVars) -> Result<Var> {
    let gamma = vars.gamma.apply(t, c)?;
    let beta = vars.beta.apply(t, c)?;
    let scaled = t.mul(gamma, u)?;
    t.add(scaled, beta)
}

/// Sharpens a single user's assignment (a `1 x M` batch) on the tape.
pub fn sharpen_single(t: &mut Tape, c: Var) -> Result<Var> {
    let as_row = t.stack(&[c])?;
    let sharpened = t.sharpen(as_row)?;
    t.row(sharpened, 0)
}

/// Everything the batch clustering loss treats as constant: the normalized
/// adjacency and the two sharpened targets.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenTargets {
    pub adjacency: Array,
    pub topological: Array,
    pub encoding: Array,
}

/// Batch-level clustering losses over the users' cluster passes.
#[derive(Clone, Debug)]
pub struct BatchClusterLoss {
    pub reconstruction: Var,
    pub modularity: Var,
    pub combo: Var,
    pub total: Var,
    pub encoding: Var,
    pub topological: Var,
    pub frozen: FrozenTargets,
}

/// Builds the relation graph on the current user vectors (treated as
/// constants for neighbor selection), propagates each user's best-autoencoder
/// layers through the GCN and sums `L_rec + L_mod + L_combo`, each averaged
/// over the batch.
pub fn batch_cluster_loss(
    t: &mut Tape,
    users: &[UserClusterPass],
    item_sets: &[Vec<usize>],
    item_table: &Array,
    vars: &ClusterVars,
    cfg: &ModelConfig,
) -> Result<BatchClusterLoss> {
    batch_cluster_loss_with(t, users, item_sets, item_table, vars, cfg, None)
}

/// As [`batch_cluster_loss`], optionally reusing graph and targets frozen at
/// another parameter point. The loss is then a smooth function of the
/// parameters whose gradient equals the stop-gradient gradient at that point.
pub fn batch_cluster_loss_with(
    t: &mut Tape,
    users: &[UserClusterPass],
    item_sets: &[Vec<usize>],
    item_table: &Array,
    vars: &ClusterVars,
    cfg: &ModelConfig,
    frozen: Option<&FrozenTargets>,
) -> Result<BatchClusterLoss> {
    let b = users.len();
    if b < 2 {
        return Err(Error::Config("clustering losses need a batch of at least 2".into()));
    }
    let rec_terms: Vec<Var> = users.iter().map(reconstruction_loss).collect();
    let reconstruction = t.mean(&rec_terms)?;

    let adjacency = match frozen {
        Some(f) => f.adjacency.clone(),
        None => {
            let rows: Vec<Vec<f64>> = users
                .iter()
                .map(|u| t.value(u.embedding).data().to_vec())
                .collect();
            let embeddings = Array::from_rows(&rows)?;
            let n_adj = cfg.n_adj.min(b - 1);
            build_relation_graph(&embeddings, item_sets, item_table, n_adj, cfg.sigma)?.normalized
        }
    };
    let adj = t.constant(adjacency.clone());

    let mut h_layers = Vec::with_capacity(AE_ENCODER_LAYERS + 1);
    for l in 0..=AE_ENCODER_LAYERS {
        let per_user: Vec<Var> = users.iter().map(|u| u.passes[u.best].layers[l]).collect();
        h_layers.push(t.stack(&per_user)?);
    }
    let z = gcn_forward(t, &h_layers, adj, &vars.gcn, cfg.epsilon, cfg.gcn_activation.into())?;
    let topological = topological_assignment(t, z)?;
    let enc_rows: Vec<Var> = users.iter().map(|u| u.assignment).collect();
    let encoding = t.stack(&enc_rows)?;
    let (top_target, enc_target) = match frozen {
        Some(f) => (f.topological.clone(), f.encoding.clone()),
        None => (
            sharpen(t.value(topological), cfg.sharpen_rule),
            sharpen(t.value(encoding), cfg.sharpen_rule),
        ),
    };
    let (modularity, combo) = kl_to_targets(t, topological, top_target.clone(), enc_target.clone())?;
    let total = total_cluster_loss(t, reconstruction, modularity, combo)?;
    Ok(BatchClusterLoss {
        reconstruction,
        modularity,
        combo,
        total,
        encoding,
        topological,
        frozen: FrozenTargets {
            adjacency,
            topological: top_target,
            encoding: enc_target,
        },
    })
}

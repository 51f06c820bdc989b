//! Dynamic transition model: GRU encoder over the item prefix, attention over
//! the encoder outputs, and a GRU decoder whose softmax head yields the user
//! vector used for next-item scoring.

use crate::error::{Error, Result};
use crate::model::{names, DecoderHidden, ModelConfig};
use crate::numcore::{Array, Bindings, Tape, Var};

/// Weight and bias of one fully connected layer, `y = x W + b`.
#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub w: Var,
    pub b: Var,
}

impl LinearVars {
    pub fn resolve(b: &Bindings, prefix: &str) -> Result<Self> {
        Ok(LinearVars {
            w: b.get(&names::linear_w(prefix))?,
            b: b.get(&names::linear_b(prefix))?,
        })
    }

    pub fn apply(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let y = t.matmul(x, self.w)?;
        t.add(y, self.b)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GruVars {
    pub wz: Var,
    pub uz: Var,
    pub bz: Var,
    pub wr: Var,
    pub ur: Var,
    pub br: Var,
    pub wn: Var,
    pub un: Var,
    pub bn: Var,
}

impl GruVars {
    pub fn resolve(b: &Bindings, prefix: &str) -> Result<Self> {
        let g = |part: &str| b.get(&names::gru(prefix, part));
        Ok(GruVars {
            wz: g("wz")?,
            uz: g("uz")?,
            bz: g("bz")?,
            wr: g("wr")?,
            ur: g("ur")?,
            br: g("br")?,
            wn: g("wn")?,
            un: g("un")?,
            bn: g("bn")?,
        })
    }
}

#[derive(Clone, Copy, Debug)]
pub struct TransitionVars {
    pub item_emb: Var,
    pub encoder: GruVars,
    pub decoder: GruVars,
    pub fc1: LinearVars,
    pub fc2: LinearVars,
    pub fc3: LinearVars,
}

impl TransitionVars {
    pub fn resolve(b: &Bindings) -> Result<Self> {
        Ok(TransitionVars {
            item_emb: b.get(names::ITEM_EMB)?,
            encoder: GruVars::resolve(b, names::ENCODER)?,
            decoder: GruVars::resolve(b, names::DECODER)?,
            fc1: LinearVars::resolve(b, "fc1")?,
            fc2: LinearVars::resolve(b, "fc2")?,
            fc3: LinearVars::resolve(b, "fc3")?,
        })
    }
}

/// Per-step encoder outputs stacked as rows, plus the last hidden state.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub context: Var,
    pub h_final: Var,
    pub rows: usize,
}

/// Standard GRU update:
/// `z = σ(xW_z + hU_z + b_z)`, `r = σ(xW_r + hU_r + b_r)`,
/// `n = tanh(xW_n + b_n + r ⊙ hU_n)`, `h' = (1 - z) ⊙ n + z ⊙ h`.
pub fn gru_cell(t: &mut Tape, x: Var, h: Var, w: &GruVars) -> Result<Var> {
    let gate = |t: &mut Tape, wx: Var, uh: Var, b: Var| -> Result<Var> {
        let a = t.matmul(x, wx)?;
        let c = t.matmul(h, uh)?;
        let s = t.add(a, c)?;
        let s = t.add(s, b)?;
        Ok(t.sigmoid(s))
    };
    let z = gate(t, w.wz, w.uz, w.bz)?;
    let r = gate(t, w.wr, w.ur, w.br)?;
    let xn = t.matmul(x, w.wn)?;
    let xn = t.add(xn, w.bn)?;
    let hn = t.matmul(h, w.un)?;
    let hn = t.mul(r, hn)?;
    let n = t.add(xn, hn)?;
    let n = t.tanh(n);
    let keep = t.affine(z, -1.0, 1.0);
    let fresh = t.mul(keep, n)?;
    let carried = t.mul(z, h)?;
    t.add(fresh, carried)
}

/// Runs the encoder GRU over the item embeddings starting from a zero state.
pub fn encode_sequence(t: &mut Tape, items: &[usize], vars: &TransitionVars) -> Result<EncoderOutput> {
    if items.is_empty() {
        return Err(Error::Contract("cannot encode an empty item sequence".into()));
    }
    let d = t.value(vars.item_emb).cols();
    let mut h = t.constant(Array::zeros(&[d]));
    let mut outputs = Vec::with_capacity(items.len());
    for &item in items {
        let x = t.lookup(vars.item_emb, item)?;
        h = gru_cell(t, x, h, &vars.encoder)?;
        outputs.push(h);
    }
    let context = t.stack(&outputs)?;
    Ok(EncoderOutput {
        context,
        h_final: h,
        rows: items.len(),
    })
}

/// Attention over the encoder rows. `fc1` scores `K` slots; only the first
/// `rows` exist, so the rest are masked out before the softmax.
///
/// Returns the attended context vector and the attention weights.
pub fn attend(
    t: &mut Tape,
    o_prev: Var,
    h_prev: Var,
    enc: &EncoderOutput,
    vars: &TransitionVars,
) -> Result<(Var, Var)> {
    let slots = t.value(vars.fc1.w).cols();
    if enc.rows == 0 || enc.rows > slots {
        return Err(Error::Dimension(format!(
            "attention over {} rows with {} slots",
            enc.rows, slots
        )));
    }
    let joint = t.concat(o_prev, h_prev)?;
    let scores = vars.fc1.apply(t, joint)?;
    let live = t.slice(scores, 0, enc.rows)?;
    let weights = t.softmax(live)?;
    let attn = t.matmul(weights, enc.context)?;
    Ok((attn, weights))
}

/// One decoder step: `X = relu(fc2(o_prev; attn))`, then the GRU and the
/// output head `o = softmax(fc3(gru(X, h_prev)))`.
pub fn decode_step(
    t: &mut Tape,
    o_prev: Var,
    h_prev: Var,
    attn: Var,
    vars: &TransitionVars,
    cfg: &ModelConfig,
) -> Result<(Var, Var)> {
    let joint = t.concat(o_prev, attn)?;
    let x = vars.fc2.apply(t, joint)?;
    let x = t.relu(x);
    let g = gru_cell(t, x, h_prev, &vars.decoder)?;
    let logits = vars.fc3.apply(t, g)?;
    let o = if cfg.output_softmax {
        t.softmax(logits)?
    } else {
        logits
    };
    let h = match cfg.decoder_hidden {
        DecoderHidden::Gru => g,
        DecoderHidden::InputFree => {
            let zero = t.constant(Array::zeros(t.value(x).shape()));
            gru_cell(t, zero, h_prev, &vars.decoder)?
        }
    };
    Ok((o, h))
}

/// Encodes `prefix` once and runs one decoder step per prefix item, feeding
/// each output back in. Returns every decoder output; the last one is the
/// user vector for predicting the item after `prefix`.
pub fn predict_vectors(
    t: &mut Tape,
    prefix: &[usize],
    vars: &TransitionVars,
    cfg: &ModelConfig,
) -> Result<Vec<Var>> {
    if prefix.is_empty() {
        return Err(Error::Contract("prediction needs a non-empty prefix".into()));
    }
    let enc = encode_sequence(t, prefix, vars)?;
    let d = t.value(vars.item_emb).cols();
    let mut o = t.constant(Array::zeros(&[d]));
    let mut h = enc.h_final;
    let mut outputs = Vec::with_capacity(prefix.len());
    for _ in 0..prefix.len() {
        let (attn, _) = attend(t, o, h, &enc, vars)?;
        let (o_next, h_next) = decode_step(t, o, h, attn, vars, cfg)?;
        o = o_next;
        h = h_next;
        outputs.push(o);
    }
    Ok(outputs)
}

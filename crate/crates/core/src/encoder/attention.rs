//! Multi-head attention with an optional additive logit bias, and the full
//! pre-norm transformer block built on it.
//!
//! The bias matrix is added to every head's raw scores before the 1/sqrt(d_k)
//! scaling, and one shared matrix serves all heads.

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Value};

/// Tape handles for one block's weights.
#[derive(Debug, Clone, Copy)]
pub struct LayerValues {
    pub ln1_g: Value,
    pub ln1_b: Value,
    pub wq: Value,
    pub bq: Value,
    pub wk: Value,
    pub bk: Value,
    pub wv: Value,
    pub bv: Value,
    pub wo: Value,
    pub bo: Value,
    pub ln2_g: Value,
    pub ln2_b: Value,
    pub w1: Value,
    pub b1: Value,
    pub w2: Value,
    pub b2: Value,
}

impl crate::encoder::LayerWeights {
    /// Enter this block's weights on a tape as constants (the frozen path).
    pub fn constants(&self, tape: &mut Tape) -> LayerValues {
        LayerValues {
            ln1_g: tape.constant(&self.ln1_g),
            ln1_b: tape.constant(&self.ln1_b),
            wq: tape.constant(&self.wq),
            bq: tape.constant(&self.bq),
            wk: tape.constant(&self.wk),
            bk: tape.constant(&self.bk),
            wv: tape.constant(&self.wv),
            bv: tape.constant(&self.bv),
            wo: tape.constant(&self.wo),
            bo: tape.constant(&self.bo),
            ln2_g: tape.constant(&self.ln2_g),
            ln2_b: tape.constant(&self.ln2_b),
            w1: tape.constant(&self.w1),
            b1: tape.constant(&self.b1),
            w2: tape.constant(&self.w2),
            b2: tape.constant(&self.b2),
        }
    }
}

/// Self-attention over `seq` (n x d_model). When `bias` is present it must
/// be n x n; the same matrix biases every head's logits. `capture`, when
/// given, receives each head's post-softmax attention matrix.
pub fn biased_attention(
    tape: &mut Tape,
    seq: Value,
    lv: &LayerValues,
    cfg: &EncoderConfig,
    bias: Option<Value>,
    mut capture: Option<&mut Vec<Tensor>>,
) -> Result<Value> {
    let shape = tape.shape(seq).to_vec();
    if shape.len() != 2 || shape[1] != cfg.d_model {
        return Err(Error::Dimension(format!(
            "attention input shape {shape:?} does not match d_model {}",
            cfg.d_model
        )));
    }
    let n = shape[0];
    if let Some(b) = bias {
        if tape.shape(b) != [n, n] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match sequence length {n}",
                tape.shape(b)
            )));
        }
    }

    let q0 = tape.matmul(seq, lv.wq)?;
    let q = tape.add_row_broadcast(q0, lv.bq)?;
    let k0 = tape.matmul(seq, lv.wk)?;
    let k = tape.add_row_broadcast(k0, lv.bk)?;
    let v0 = tape.matmul(seq, lv.wv)?;
    let v = tape.add_row_broadcast(v0, lv.bv)?;

    let scale = (cfg.d_k as f64).sqrt();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    for h in 0..cfg.n_heads {
        let lo = h * cfg.d_k;
        let hi = lo + cfg.d_k;
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let probs = match bias {
            Some(b) => tape.softmax_with_bias(scores, b, scale)?,
            None => tape.softmax_rows(scores, scale)?,
        };
        if let Some(sink) = capture.as_deref_mut() {
            sink.push(tape.to_tensor(probs));
        }
        heads.push(tape.matmul(probs, vh)?);
    }
    let merged = tape.concat_cols(&heads)?;
    let out = tape.matmul(merged, lv.wo)?;
    tape.add_row_broadcast(out, lv.bo)
}

/// One pre-norm transformer block: attention and MLP, each behind a layer
/// norm, each with a residual connection.
pub fn transformer_block(
    tape: &mut Tape,
    x: Value,
    lv: &LayerValues,
    cfg: &EncoderConfig,
    bias: Option<Value>,
    capture: Option<&mut Vec<Tensor>>,
) -> Result<Value> {
    let normed = tape.layer_norm_rows(x, lv.ln1_g, lv.ln1_b)?;
    let attended = biased_attention(tape, normed, lv, cfg, bias, capture)?;
    let x = tape.add(x, attended)?;

    let normed2 = tape.layer_norm_rows(x, lv.ln2_g, lv.ln2_b)?;
    let h0 = tape.matmul(normed2, lv.w1)?;
    let h1 = tape.add_row_broadcast(h0, lv.b1)?;
    let h2 = tape.gelu(h1);
    let h3 = tape.matmul(h2, lv.w2)?;
    let h4 = tape.add_row_broadcast(h3, lv.b2)?;
    tape.add(x, h4)
}

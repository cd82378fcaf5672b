//! Frozen text forward pass with per-layer trace capture, and the shared
//! projection head.

use crate::corpus::{Vocabulary, EOT};
use crate::encoder::{transformer_block, FrozenTextWeights};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Value};

/// The last-position state after every layer of a frozen text forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub last_tokens: Vec<Tensor>,
}

impl LayerTrace {
    pub fn n_layers(&self) -> usize {
        self.last_tokens.len()
    }
}

/// Project a d_model vector into the joint space and unit-normalize it.
/// The head is linear without bias, so positive rescaling of the input
/// leaves the output unchanged.
pub fn project(tape: &mut Tape, x: Value, proj: Value) -> Result<Value> {
    let d = tape.shape(proj)[0];
    if tape.shape(x) != [d] {
        return Err(Error::Dimension(format!(
            "projection input shape {:?} does not match head input width {d}",
            tape.shape(x)
        )));
    }
    let row = tape.reshape(x, vec![1, d])?;
    let out = tape.matmul(row, proj)?;
    let d_joint = tape.shape(out)[1];
    let flat = tape.reshape(out, vec![d_joint])?;
    tape.l2_normalize(flat)
}

/// Gather token embedding rows for a sequence, off-tape. An end-of-text
/// token is appended so every sequence has a stable final position.
pub(crate) fn embed_tokens(tokens: &[u32], weights: &FrozenTextWeights) -> Result<Tensor> {
    let mut with_eot: Vec<u32> = tokens.to_vec();
    with_eot.push(EOT);
    let max = weights.config.max_sequence;
    if with_eot.len() > max {
        return Err(Error::Length {
            got: with_eot.len(),
            max,
        });
    }
    let d = weights.config.d_model;
    let vocab_size = weights.vocab_size();
    let mut rows = Vec::with_capacity(with_eot.len());
    for &id in &with_eot {
        if id as usize >= vocab_size {
            return Err(Error::Index(format!(
                "token id {id} out of range for vocabulary of {vocab_size}"
            )));
        }
        let start = id as usize * d;
        rows.push(weights.token_embed.data()[start..start + d].to_vec());
    }
    let pos = weights.pos_embed.data();
    for (i, row) in rows.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            *v += pos[i * d + j];
        }
    }
    Tensor::from_rows(&rows)
}

/// Run the frozen text encoder over a token sequence. Returns the unit
/// embedding of the final position and the per-layer last-position trace.
pub fn encode_text_frozen(
    tokens: &[u32],
    weights: &FrozenTextWeights,
) -> Result<(Tensor, LayerTrace)> {
    let mut tape = Tape::new();
    let embedded = embed_tokens(tokens, weights)?;
    let n = embedded.rows();
    let mut x = tape.constant(&embedded);
    let cfg = &weights.config;
    let mut last_tokens = Vec::with_capacity(cfg.n_layers);
    for layer in &weights.layers {
        let lv = layer.constants(&mut tape);
        x = transformer_block(&mut tape, x, &lv, cfg, None, None)?;
        let last = tape.row(x, n - 1)?;
        last_tokens.push(tape.to_tensor(last));
    }
    let g = tape.constant(&weights.final_ln_g);
    let b = tape.constant(&weights.final_ln_b);
    let normed = tape.layer_norm_rows(x, g, b)?;
    let last = tape.row(normed, n - 1)?;
    let proj = tape.constant(&weights.proj);
    let z = project(&mut tape, last, proj)?;
    debug_assert_eq!(tape.trainable_param_count(), 0);
    Ok((tape.to_tensor(z), LayerTrace { last_tokens }))
}

/// Convenience: tokenize then encode.
pub fn encode_text_str(
    text: &str,
    vocab: &Vocabulary,
    weights: &FrozenTextWeights,
) -> Result<(Tensor, LayerTrace)> {
    let tokens = crate::corpus::tokenize(text, vocab);
    encode_text_frozen(&tokens, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn weights() -> FrozenTextWeights {
        FrozenTextWeights::new(EncoderConfig::micro_text(), 24, 9).unwrap()
    }

    #[test]
    fn encoding_is_deterministic() {
        let w = weights();
        let tokens = [3, 7, 11, 5];
        let (z1, t1) = encode_text_frozen(&tokens, &w).unwrap();
        let (z2, t2) = encode_text_frozen(&tokens, &w).unwrap();
        assert_eq!(z1.data(), z2.data());
        for (a, b) in t1.last_tokens.iter().zip(&t2.last_tokens) {
            assert_eq!(a.data(), b.data());
        }
    }

    #[test]
    fn trace_has_one_entry_per_layer() {
        let w = weights();
        let (_, trace) = encode_text_frozen(&[4], &w).unwrap();
        assert_eq!(trace.n_layers(), w.config.n_layers);
        for t in &trace.last_tokens {
            assert_eq!(t.shape(), [w.config.d_model]);
        }
    }

    #[test]
    fn token_order_matters() {
        let w = weights();
        let (za, _) = encode_text_frozen(&[3, 7, 11, 5], &w).unwrap();
        let (zb, _) = encode_text_frozen(&[3, 11, 7, 5], &w).unwrap();
        let diff: f64 = za
            .data()
            .iter()
            .zip(zb.data())
            .map(|(a, b)| (a - b).abs())
            .sum();
        assert!(diff > 1e-6, "permuting tokens left the embedding unchanged");
    }

    #[test]
    fn overlong_sequences_are_rejected() {
        let w = weights();
        let long = vec![3u32; w.config.max_sequence];
        assert!(matches!(
            encode_text_frozen(&long, &w),
            Err(Error::Length { .. })
        ));
    }

    #[test]
    fn embedding_is_unit_norm() {
        let w = weights();
        let (z, _) = encode_text_frozen(&[9, 2, 14], &w).unwrap();
        let n: f64 = z.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((n - 1.0).abs() < 1e-9);
        assert_eq!(z.shape(), [w.config.d_joint]);
    }

    #[test]
    fn projection_is_scale_invariant() {
        let w = weights();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Tensor::randn(vec![w.config.d_model], 1.0, &mut rng);
        let scaled = x.scale(3.7);
        let mut tape = Tape::new();
        let proj = tape.constant(&w.proj);
        let a = tape.constant(&x);
        let b = tape.constant(&scaled);
        let pa = project(&mut tape, a, proj).unwrap();
        let pb = project(&mut tape, b, proj).unwrap();
        for (u, v) in tape.value(pa).iter().zip(tape.value(pb)) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_input_projection_is_refused() {
        let w = weights();
        let mut tape = Tape::new();
        let proj = tape.constant(&w.proj);
        let zero = tape.constant(&Tensor::zeros(vec![w.config.d_model]));
        assert!(matches!(
            project(&mut tape, zero, proj),
            Err(Error::NumericDomain(_))
        ));
    }
}

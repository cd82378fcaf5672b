//! Image encoder: patch embedding plus transformer, frozen or with deep
//! visual prompts.
//!
//! With prompts, every layer's input carries that layer's own prompt block
//! between the class token and the patch tokens; the prompt rows coming out
//! of a layer are dropped, never read. The class-token position is the
//! readout.

use crate::encoder::{transformer_block, FrozenImageWeights};
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Value};

/// Flatten an image into non-overlapping patch rows (raster order over the
/// patch grid; pixels row-major, channels last within a patch).
pub fn patchify(image: &Tensor, patch_side: usize) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 || shape[0] != shape[1] {
        return Err(Error::Dimension(format!(
            "expected a square [side, side, 3] image, got {shape:?}"
        )));
    }
    let side = shape[0];
    if patch_side == 0 || side % patch_side != 0 {
        return Err(Error::Dimension(format!(
            "image side {side} not divisible by patch side {patch_side}"
        )));
    }
    let grid = side / patch_side;
    let data = image.data();
    let mut rows = Vec::with_capacity(grid * grid);
    for py in 0..grid {
        for px in 0..grid {
            let mut row = Vec::with_capacity(patch_side * patch_side * 3);
            for dy in 0..patch_side {
                for dx in 0..patch_side {
                    let y = py * patch_side + dy;
                    let x = px * patch_side + dx;
                    let base = (y * side + x) * 3;
                    row.extend_from_slice(&data[base..base + 3]);
                }
            }
            rows.push(row);
        }
    }
    Tensor::from_rows(&rows)
}

fn embed_patches(tape: &mut Tape, image: &Tensor, w: &FrozenImageWeights) -> Result<Value> {
    let patches = patchify(image, w.config.patch_side)?;
    if patches.rows() != w.n_patches() {
        return Err(Error::Dimension(format!(
            "image yields {} patches, encoder expects {}",
            patches.rows(),
            w.n_patches()
        )));
    }
    let p = tape.constant(&patches);
    let pe_w = tape.constant(&w.patch_embed_w);
    let pe_b = tape.constant(&w.patch_embed_b);
    let embedded = tape.matmul(p, pe_w)?;
    tape.add_row_broadcast(embedded, pe_b)
}

/// Encode an image. `prompts`, when present, must hold one n_visual_prompts
/// x d_model block per layer, already on the tape (typically as trainable
/// parameters). Gradients then flow into the prompts and nothing else.
pub fn encode_image(
    tape: &mut Tape,
    image: &Tensor,
    w: &FrozenImageWeights,
    prompts: Option<&[Value]>,
) -> Result<Value> {
    encode_image_inner(tape, image, w, prompts, None)
}

fn encode_image_inner(
    tape: &mut Tape,
    image: &Tensor,
    w: &FrozenImageWeights,
    prompts: Option<&[Value]>,
    perturb: Option<(usize, &Tensor)>,
) -> Result<Value> {
    let cfg = &w.config;
    if let Some(ps) = prompts {
        if ps.len() != cfg.n_layers {
            return Err(Error::Arity(format!(
                "{} prompt blocks for {} layers",
                ps.len(),
                cfg.n_layers
            )));
        }
        for &p in ps {
            if tape.shape(p) != [cfg.n_visual_prompts, cfg.d_model] {
                return Err(Error::Dimension(format!(
                    "visual prompt block shape {:?}, expected [{}, {}]",
                    tape.shape(p),
                    cfg.n_visual_prompts,
                    cfg.d_model
                )));
            }
        }
    }

    let patch_rows = embed_patches(tape, image, w)?;
    let cls = tape.constant(&w.class_token);
    let cls_row = tape.reshape(cls, vec![1, cfg.d_model])?;
    let base = tape.concat_rows(&[cls_row, patch_rows])?;
    let pos = tape.constant(&w.pos_embed);
    let positioned = tape.add(base, pos)?;

    let n_p = cfg.n_visual_prompts;
    let n_real = w.n_patches() + 1;

    // Rows that persist across layers: class token then patches.
    let mut carried = positioned;
    for (l, layer) in w.layers.iter().enumerate() {
        let lv = layer.constants(tape);
        let x = match prompts {
            Some(ps) => {
                let cls_part = tape.slice_rows(carried, 0, 1)?;
                let patch_part = tape.slice_rows(carried, 1, n_real)?;
                tape.concat_rows(&[cls_part, ps[l], patch_part])?
            }
            None => carried,
        };
        let mut out = transformer_block(tape, x, &lv, cfg, None, None)?;
        if let Some((pl, noise)) = perturb {
            if pl == l && prompts.is_some() {
                // Corrupt the prompt output rows before they are dropped.
                let cls_part = tape.slice_rows(out, 0, 1)?;
                let prompt_part = tape.slice_rows(out, 1, 1 + n_p)?;
                let patch_part = tape.slice_rows(out, 1 + n_p, 1 + n_p + n_real - 1)?;
                let nv = tape.constant(noise);
                let corrupted = tape.add(prompt_part, nv)?;
                out = tape.concat_rows(&[cls_part, corrupted, patch_part])?;
            }
        }
        carried = match prompts {
            Some(_) => {
                let cls_part = tape.slice_rows(out, 0, 1)?;
                let patch_part = tape.slice_rows(out, 1 + n_p, 1 + n_p + n_real - 1)?;
                tape.concat_rows(&[cls_part, patch_part])?
            }
            None => out,
        };
    }

    let g = tape.constant(&w.final_ln_g);
    let b = tape.constant(&w.final_ln_b);
    let normed = tape.layer_norm_rows(carried, g, b)?;
    let readout = tape.row(normed, 0)?;
    let proj = tape.constant(&w.proj);
    crate::encoder::project(tape, readout, proj)
}

/// Frozen-path convenience: encode with no prompts on a scratch tape.
pub fn encode_image_frozen(image: &Tensor, w: &FrozenImageWeights) -> Result<Tensor> {
    let mut tape = Tape::new();
    let z = encode_image(&mut tape, image, w, None)?;
    debug_assert_eq!(tape.trainable_param_count(), 0);
    Ok(tape.to_tensor(z))
}

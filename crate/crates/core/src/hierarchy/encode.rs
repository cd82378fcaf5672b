//! The hierarchical prompted text encoder: parameter plumbing, high-prompt
//! generation from frozen traces, the per-layer re-injection forward pass,
//! and the per-category embedding entry point.

use rand::Rng;

use crate::corpus::{tokenize, CategoryEntry, DescriptionRecord, TokenWordMap, Vocabulary};
use crate::encoder::{project, transformer_block, FrozenTextWeights, LayerTrace};
use crate::error::{Error, Result};
use crate::hierarchy::{
    apply_ablation, assemble_low_prompts, Ablation, BiasMask, SequenceLayout,
};
use crate::numerics::{ParameterSet, Tape, Tensor, Value};

fn global_name(layer: usize) -> String {
    format!("hpt.global.l{layer}")
}

fn lambda_e2e_name(layer: usize) -> String {
    format!("hpt.lambda_e2e.l{layer}")
}

fn lambda_e2a_name(layer: usize) -> String {
    format!("hpt.lambda_e2a.l{layer}")
}

/// Create the text-side prompt parameters in `set` under their serialized
/// names. Global prompts start as small noise, the relation scalars at zero
/// so the first forward pass is bias-free, and the generator as the
/// identity map so generated high prompts start equal to their traces.
pub fn init_hierarchy_params<R: Rng>(
    set: &mut ParameterSet,
    n_layers: usize,
    n_global: usize,
    d_model: usize,
    rng: &mut R,
) -> Result<()> {
    for l in 0..n_layers {
        if n_global > 0 {
            set.insert(
                &global_name(l),
                Tensor::randn(vec![n_global, d_model], 0.1, rng),
            )?;
        }
        set.insert(&lambda_e2e_name(l), Tensor::zeros(vec![1]))?;
        set.insert(&lambda_e2a_name(l), Tensor::zeros(vec![1]))?;
    }
    let mut eye = Tensor::zeros(vec![d_model, d_model]);
    for i in 0..d_model {
        eye.data_mut()[i * d_model + i] = 1.0;
    }
    set.insert("hpt.generator.w", eye)?;
    set.insert("hpt.generator.b", Tensor::zeros(vec![d_model]))?;
    Ok(())
}

/// Tape handles for the hierarchical parameters. `global` is empty when the
/// model was created without global prompts.
#[derive(Debug, Clone)]
pub struct HierarchyValues {
    pub global: Vec<Value>,
    pub lambda_e2e: Vec<Value>,
    pub lambda_e2a: Vec<Value>,
    pub generator_w: Value,
    pub generator_b: Value,
}

fn required<'a>(set: &'a ParameterSet, name: &str) -> Result<&'a Tensor> {
    set.get(name)
        .ok_or_else(|| Error::Consistency(format!("parameter {name:?} missing from set")))
}

/// Register the hierarchical parameters from `set` on a tape. `n_global`
/// must match what `init_hierarchy_params` created.
pub fn register_hierarchy_params(
    tape: &mut Tape,
    set: &ParameterSet,
    n_layers: usize,
    n_global: usize,
) -> Result<HierarchyValues> {
    let mut global = Vec::new();
    let mut lambda_e2e = Vec::with_capacity(n_layers);
    let mut lambda_e2a = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        if n_global > 0 {
            let name = global_name(l);
            global.push(tape.param(&name, required(set, &name)?)?);
        }
        let name = lambda_e2e_name(l);
        lambda_e2e.push(tape.param(&name, required(set, &name)?)?);
        let name = lambda_e2a_name(l);
        lambda_e2a.push(tape.param(&name, required(set, &name)?)?);
    }
    Ok(HierarchyValues {
        global,
        lambda_e2e,
        lambda_e2a,
        generator_w: tape.param("hpt.generator.w", required(set, "hpt.generator.w")?)?,
        generator_b: tape.param("hpt.generator.b", required(set, "hpt.generator.b")?)?,
    })
}

/// Map the frozen per-layer traces of a category's descriptions through the
/// generator. Layer l's block stacks one generated row per description, in
/// description order. The traces enter the tape as constants, so gradients
/// reach the generator but never the traces.
pub fn generate_high_prompts(
    tape: &mut Tape,
    traces: &[LayerTrace],
    expected: usize,
    generator_w: Value,
    generator_b: Value,
) -> Result<Vec<Value>> {
    if traces.len() != expected || traces.is_empty() {
        return Err(Error::Arity(format!(
            "got {} traces, expected {expected}",
            traces.len()
        )));
    }
    let n_layers = traces[0].n_layers();
    for t in traces {
        if t.n_layers() != n_layers {
            return Err(Error::Dimension(format!(
                "trace layer counts differ: {} vs {n_layers}",
                t.n_layers()
            )));
        }
    }
    let mut blocks = Vec::with_capacity(n_layers);
    for l in 0..n_layers {
        let rows: Vec<Value> = traces
            .iter()
            .map(|t| tape.constant(&t.last_tokens[l]))
            .collect();
        let stacked = tape.stack_rows(&rows)?;
        let mapped = tape.matmul(stacked, generator_w)?;
        blocks.push(tape.add_row_broadcast(mapped, generator_b)?);
    }
    Ok(blocks)
}

/// Token embedding rows plus position embeddings starting at `pos_start`.
fn gather_rows(tokens: &[u32], w: &FrozenTextWeights, pos_start: usize) -> Result<Tensor> {
    let d = w.config.d_model;
    let vocab_size = w.vocab_size();
    let mut rows = Vec::with_capacity(tokens.len());
    for (i, &id) in tokens.iter().enumerate() {
        if id as usize >= vocab_size {
            return Err(Error::Index(format!(
                "token id {id} out of range for vocabulary of {vocab_size}"
            )));
        }
        let t0 = id as usize * d;
        let p0 = (pos_start + i) * d;
        let row: Vec<f64> = w.token_embed.data()[t0..t0 + d]
            .iter()
            .zip(&w.pos_embed.data()[p0..p0 + d])
            .map(|(t, p)| t + p)
            .collect();
        rows.push(row);
    }
    Tensor::from_rows(&rows)
}

/// Assembled blocks for one hierarchical forward pass. `global` and `high`
/// hold one block per layer or are empty to omit that level; `bias`
/// carries the record's relation masks and pulls in the per-layer scalars.
pub struct HierarchicalInput<'a> {
    pub weights: &'a FrozenTextWeights,
    pub class_tokens: &'a [u32],
    pub global: &'a [Value],
    pub high: &'a [Value],
    pub low_tokens: &'a [u32],
    pub bias: Option<&'a BiasMask>,
    pub lambda_e2e: &'a [Value],
    pub lambda_e2a: &'a [Value],
}

fn block_rows(tape: &Tape, vals: &[Value], n_layers: usize, d: usize, what: &str) -> Result<usize> {
    if vals.is_empty() {
        return Ok(0);
    }
    if vals.len() != n_layers {
        return Err(Error::Dimension(format!(
            "{what} prompts cover {} layers, encoder has {n_layers}",
            vals.len()
        )));
    }
    let shape = tape.shape(vals[0]).to_vec();
    if shape.len() != 2 || shape[1] != d || shape[0] == 0 {
        return Err(Error::Dimension(format!(
            "{what} prompt block shape {shape:?} does not fit d_model {d}"
        )));
    }
    for &v in vals {
        if tape.shape(v) != shape.as_slice() {
            return Err(Error::Dimension(format!(
                "{what} prompt blocks differ in shape across layers"
            )));
        }
    }
    Ok(shape[0])
}

fn corrupt_prompt_rows(
    tape: &mut Tape,
    out: Value,
    layout: &SequenceLayout,
    noise: &Tensor,
) -> Result<Value> {
    let start = layout.prompt_offset();
    let end = layout.low_offset();
    if noise.shape() != [end - start, tape.shape(out)[1]] {
        return Err(Error::Dimension(format!(
            "perturbation shape {:?} does not cover the prompt rows",
            noise.shape()
        )));
    }
    let pre = tape.slice_rows(out, 0, start)?;
    let mid = tape.slice_rows(out, start, end)?;
    let nz = tape.constant(noise);
    let mid = tape.add(mid, nz)?;
    let mut parts = vec![pre, mid];
    if layout.n_low > 0 {
        parts.push(tape.slice_rows(out, end, layout.seq_len())?);
    }
    tape.concat_rows(&parts)
}

/// Run the prompted text encoder. The sequence is laid out as class tokens,
/// global prompts, high prompts, low tokens. At every layer the outputs at
/// the prompt positions are discarded and replaced by that layer's fresh
/// blocks; class and low positions flow through. The readout is the last
/// sequence position (falling back to the last class token when the low
/// block is empty), layer-normalized and projected to a unit vector.
///
/// `perturb` adds noise to the discarded prompt-output rows after the given
/// layer; it exists to demonstrate that those rows never influence the
/// result. `capture` receives the final layer's per-head attention maps.
pub fn hierarchical_encode(
    tape: &mut Tape,
    input: &HierarchicalInput,
    perturb: Option<(usize, &Tensor)>,
    mut capture: Option<&mut Vec<Tensor>>,
) -> Result<Value> {
    let w = input.weights;
    let cfg = &w.config;
    let n_layers = cfg.n_layers;
    if input.class_tokens.is_empty() {
        return Err(Error::DegenerateInput("class token block is empty".into()));
    }
    let layout = SequenceLayout {
        n_class: input.class_tokens.len(),
        n_global: block_rows(tape, input.global, n_layers, cfg.d_model, "global")?,
        n_high: block_rows(tape, input.high, n_layers, cfg.d_model, "high")?,
        n_low: input.low_tokens.len(),
    };
    let seq_len = layout.seq_len();
    if seq_len > cfg.max_sequence {
        return Err(Error::Length {
            got: seq_len,
            max: cfg.max_sequence,
        });
    }
    if let Some(mask) = input.bias {
        if mask.seq_len() != seq_len {
            return Err(Error::Dimension(format!(
                "bias masks built for length {} but sequence is {seq_len}",
                mask.seq_len()
            )));
        }
        if input.lambda_e2e.len() != n_layers || input.lambda_e2a.len() != n_layers {
            return Err(Error::Dimension(format!(
                "need one scalar pair per layer: {} e2e, {} e2a, {n_layers} layers",
                input.lambda_e2e.len(),
                input.lambda_e2a.len()
            )));
        }
    }
    if let Some((l, _)) = perturb {
        if l >= n_layers {
            return Err(Error::Index(format!(
                "perturbation layer {l} out of range for {n_layers} layers"
            )));
        }
    }

    let mut class_state = tape.constant(&gather_rows(input.class_tokens, w, 0)?);
    let mut low_state = if layout.n_low > 0 {
        let emb = gather_rows(input.low_tokens, w, layout.low_offset())?;
        Some(tape.constant(&emb))
    } else {
        None
    };

    let mut out = class_state;
    for l in 0..n_layers {
        let mut parts = vec![class_state];
        if layout.n_global > 0 {
            parts.push(input.global[l]);
        }
        if layout.n_high > 0 {
            parts.push(input.high[l]);
        }
        if let Some(ls) = low_state {
            parts.push(ls);
        }
        let x = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_rows(&parts)?
        };
        let bias = match input.bias {
            Some(mask) => Some(mask.to_matrix(tape, input.lambda_e2e[l], input.lambda_e2a[l])?),
            None => None,
        };
        let lw = w.layers[l].constants(tape);
        let cap = if l + 1 == n_layers {
            capture.as_deref_mut()
        } else {
            None
        };
        out = transformer_block(tape, x, &lw, cfg, bias, cap)?;
        if let Some((pl, noise)) = perturb {
            if pl == l && layout.n_prompts() > 0 {
                out = corrupt_prompt_rows(tape, out, &layout, noise)?;
            }
        }
        class_state = tape.slice_rows(out, 0, layout.n_class)?;
        if low_state.is_some() {
            low_state = Some(tape.slice_rows(out, layout.low_offset(), seq_len)?);
        }
    }

    let g = tape.constant(&w.final_ln_g);
    let b = tape.constant(&w.final_ln_b);
    let normed = tape.layer_norm_rows(out, g, b)?;
    let last = tape.row(normed, layout.readout_index())?;
    let proj = tape.constant(&w.proj);
    project(tape, last, proj)
}

/// Which record drives the low level and the bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextMode {
    Train { record_index: usize },
    Inference,
}

/// Everything needed to embed one category's text side.
pub struct ClassTextInputs<'a> {
    pub weights: &'a FrozenTextWeights,
    pub vocab: &'a Vocabulary,
    pub entry: &'a CategoryEntry,
    pub traces: &'a [LayerTrace],
    pub values: &'a HierarchyValues,
    pub ablation: Ablation,
}

/// Embed one category. Train mode encodes with the sampled record's low
/// prompts and bias; inference encodes once per record and averages the
/// unit embeddings before re-normalizing. High prompts are always built
/// from all descriptions in both modes.
pub fn class_text_embedding(
    tape: &mut Tape,
    inputs: &ClassTextInputs,
    mode: TextMode,
) -> Result<Value> {
    let ab = inputs.ablation.normalized();
    let entry = inputs.entry;
    let class_tokens = tokenize(&entry.class_name, inputs.vocab);
    if class_tokens.is_empty() {
        return Err(Error::DegenerateInput(format!(
            "class name {:?} produced no tokens",
            entry.class_name
        )));
    }
    let global: &[Value] = if ab.disable_global {
        &[]
    } else {
        &inputs.values.global
    };
    let high: Vec<Value> = if ab.disable_high {
        Vec::new()
    } else {
        generate_high_prompts(
            tape,
            inputs.traces,
            entry.records.len(),
            inputs.values.generator_w,
            inputs.values.generator_b,
        )?
    };
    let n_global_rows = global.first().map_or(0, |&v| tape.shape(v)[0]);
    let n_high_rows = high.first().map_or(0, |&v| tape.shape(v)[0]);

    let encode_one = |tape: &mut Tape, record: &DescriptionRecord| -> Result<Value> {
        let filtered = apply_ablation(record, ab);
        let (low_tokens, map) = if ab.disable_low {
            (Vec::new(), TokenWordMap::default())
        } else {
            assemble_low_prompts(&filtered, inputs.vocab)?
        };
        let layout = SequenceLayout {
            n_class: class_tokens.len(),
            n_global: n_global_rows,
            n_high: n_high_rows,
            n_low: low_tokens.len(),
        };
        let mask = if ab.relations_active() && !low_tokens.is_empty() {
            Some(BiasMask::build(&map, &filtered, &layout)?)
        } else {
            None
        };
        let hier = HierarchicalInput {
            weights: inputs.weights,
            class_tokens: &class_tokens,
            global,
            high: &high,
            low_tokens: &low_tokens,
            bias: mask.as_ref(),
            lambda_e2e: &inputs.values.lambda_e2e,
            lambda_e2a: &inputs.values.lambda_e2a,
        };
        hierarchical_encode(tape, &hier, None, None)
    };

    match mode {
        TextMode::Train { record_index } => {
            let record = entry.records.get(record_index).ok_or_else(|| {
                Error::Index(format!(
                    "record index {record_index} out of range for {} descriptions",
                    entry.records.len()
                ))
            })?;
            encode_one(tape, record)
        }
        TextMode::Inference => {
            let mut zs = Vec::with_capacity(entry.records.len());
            for record in &entry.records {
                zs.push(encode_one(tape, record)?);
            }
            let stacked = tape.stack_rows(&zs)?;
            let mean = tape.mean_rows(stacked)?;
            tape.l2_normalize(mean)
        }
    }
}

//! Seeded frozen weights standing in for pretrained encoders.
//!
//! Construction order is fixed, so a seed fully determines every tensor.
//! Nothing here is ever registered as trainable; forwards enter these
//! tensors as tape constants.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// One transformer block's weights (pre-norm attention + MLP).
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub bq: Tensor,
    pub wk: Tensor,
    pub bk: Tensor,
    pub wv: Tensor,
    pub bv: Tensor,
    pub wo: Tensor,
    pub bo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

impl LayerWeights {
    fn new(d_model: usize, rng: &mut ChaCha8Rng) -> Self {
        let d_ff = 4 * d_model;
        let sd = 1.0 / (d_model as f64).sqrt();
        let sf = 1.0 / (d_ff as f64).sqrt();
        LayerWeights {
            ln1_g: Tensor::new(vec![d_model], vec![1.0; d_model]).expect("static"),
            ln1_b: Tensor::zeros(vec![d_model]),
            wq: Tensor::randn(vec![d_model, d_model], sd, rng),
            bq: Tensor::zeros(vec![d_model]),
            wk: Tensor::randn(vec![d_model, d_model], sd, rng),
            bk: Tensor::zeros(vec![d_model]),
            wv: Tensor::randn(vec![d_model, d_model], sd, rng),
            bv: Tensor::zeros(vec![d_model]),
            wo: Tensor::randn(vec![d_model, d_model], sd, rng),
            bo: Tensor::zeros(vec![d_model]),
            ln2_g: Tensor::new(vec![d_model], vec![1.0; d_model]).expect("static"),
            ln2_b: Tensor::zeros(vec![d_model]),
            w1: Tensor::randn(vec![d_model, d_ff], sd, rng),
            b1: Tensor::zeros(vec![d_ff]),
            w2: Tensor::randn(vec![d_ff, d_model], sf, rng),
            b2: Tensor::zeros(vec![d_model]),
        }
    }

    /// All tensors with stable names, for serialization.
    pub fn named(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        vec![
            (format!("{prefix}.ln1.g"), &self.ln1_g),
            (format!("{prefix}.ln1.b"), &self.ln1_b),
            (format!("{prefix}.wq"), &self.wq),
            (format!("{prefix}.bq"), &self.bq),
            (format!("{prefix}.wk"), &self.wk),
            (format!("{prefix}.bk"), &self.bk),
            (format!("{prefix}.wv"), &self.wv),
            (format!("{prefix}.bv"), &self.bv),
            (format!("{prefix}.wo"), &self.wo),
            (format!("{prefix}.bo"), &self.bo),
            (format!("{prefix}.ln2.g"), &self.ln2_g),
            (format!("{prefix}.ln2.b"), &self.ln2_b),
            (format!("{prefix}.w1"), &self.w1),
            (format!("{prefix}.b1"), &self.b1),
            (format!("{prefix}.w2"), &self.w2),
            (format!("{prefix}.b2"), &self.b2),
        ]
    }
}

/// Frozen text encoder: token/position embeddings, blocks, final norm, and
/// the projection into the joint space.
#[derive(Debug, Clone)]
pub struct FrozenTextWeights {
    pub config: EncoderConfig,
    pub token_embed: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_ln_g: Tensor,
    pub final_ln_b: Tensor,
    pub proj: Tensor,
}

impl FrozenTextWeights {
    pub fn new(config: EncoderConfig, vocab_size: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab_size == 0 {
            return Err(Error::Config("vocab_size must be positive".into()));
        }
        let d = config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(FrozenTextWeights {
            config,
            token_embed: Tensor::randn(vec![vocab_size, d], 0.5, &mut rng),
            pos_embed: Tensor::randn(vec![config.max_sequence, d], 0.1, &mut rng),
            layers: (0..config.n_layers)
                .map(|_| LayerWeights::new(d, &mut rng))
                .collect(),
            final_ln_g: Tensor::new(vec![d], vec![1.0; d]).expect("static"),
            final_ln_b: Tensor::zeros(vec![d]),
            proj: Tensor::randn(vec![d, config.d_joint], 1.0 / (d as f64).sqrt(), &mut rng),
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.token_embed.shape()[0]
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("text.token_embed".to_string(), &self.token_embed),
            ("text.pos_embed".to_string(), &self.pos_embed),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named(&format!("text.layer{l}")));
        }
        out.push(("text.final_ln.g".to_string(), &self.final_ln_g));
        out.push(("text.final_ln.b".to_string(), &self.final_ln_b));
        out.push(("text.proj".to_string(), &self.proj));
        out
    }
}

/// Frozen image encoder: patch embedding, class token, positions, blocks,
/// final norm, projection.
#[derive(Debug, Clone)]
pub struct FrozenImageWeights {
    pub config: EncoderConfig,
    pub patch_embed_w: Tensor,
    pub patch_embed_b: Tensor,
    pub class_token: Tensor,
    pub pos_embed: Tensor,
    pub layers: Vec<LayerWeights>,
    pub final_ln_g: Tensor,
    pub final_ln_b: Tensor,
    pub proj: Tensor,
}

impl FrozenImageWeights {
    pub fn new(config: EncoderConfig, image_side: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        if config.patch_side == 0 {
            return Err(Error::Config(
                "image encoder needs a positive patch_side".into(),
            ));
        }
        if image_side == 0 || image_side % config.patch_side != 0 {
            return Err(Error::Config(format!(
                "image side {image_side} not divisible by patch side {}",
                config.patch_side
            )));
        }
        let n_patches = (image_side / config.patch_side).pow(2);
        if n_patches + 1 > config.max_sequence {
            return Err(Error::Config(format!(
                "{n_patches} patches plus class token exceed max_sequence {}",
                config.max_sequence
            )));
        }
        let d = config.d_model;
        let patch_in = config.patch_side * config.patch_side * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(FrozenImageWeights {
            config,
            patch_embed_w: Tensor::randn(
                vec![patch_in, d],
                1.0 / (patch_in as f64).sqrt(),
                &mut rng,
            ),
            patch_embed_b: Tensor::zeros(vec![d]),
            class_token: Tensor::randn(vec![d], 0.5, &mut rng),
            pos_embed: Tensor::randn(vec![n_patches + 1, d], 0.1, &mut rng),
            layers: (0..config.n_layers)
                .map(|_| LayerWeights::new(d, &mut rng))
                .collect(),
            final_ln_g: Tensor::new(vec![d], vec![1.0; d]).expect("static"),
            final_ln_b: Tensor::zeros(vec![d]),
            proj: Tensor::randn(vec![d, config.d_joint], 1.0 / (d as f64).sqrt(), &mut rng),
        })
    }

    pub fn n_patches(&self) -> usize {
        self.pos_embed.shape()[0] - 1
    }

    pub fn image_side(&self) -> usize {
        (self.n_patches() as f64).sqrt() as usize * self.config.patch_side
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("image.patch_embed.w".to_string(), &self.patch_embed_w),
            ("image.patch_embed.b".to_string(), &self.patch_embed_b),
            ("image.class_token".to_string(), &self.class_token),
            ("image.pos_embed".to_string(), &self.pos_embed),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.extend(layer.named(&format!("image.layer{l}")));
        }
        out.push(("image.final_ln.g".to_string(), &self.final_ln_g));
        out.push(("image.final_ln.b".to_string(), &self.final_ln_b));
        out.push(("image.proj".to_string(), &self.proj));
        out
    }
}

//! Small trainable stand-ins for the image and text backbones.
//!
//! Each encoder is an input projection (patch projection or token embedding)
//! followed by one self-attention layer with a residual connection. Text and
//! OCR text go through the same [`TextEncoderParams`]. Padding is not masked,
//! so the output is a deterministic function of the padded sequence.

use serde::{Deserialize, Serialize};

use crate::attention::{attention_head, AttentionHeadParams, HeadVars};
use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const PAD_TOKEN: usize = 0;
/// Marker prepended to every OCR sequence; alone, it stands in for absent OCR.
pub const OCR_TOKEN: usize = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageEncoderParams {
    /// `P×F` patch projection.
    pub embed: Tensor,
    pub mix: AttentionHeadParams,
}

impl ImageEncoderParams {
    pub fn init(patch_dim: usize, dim: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            embed: Tensor::randn(patch_dim, dim, std, rng),
            mix: AttentionHeadParams::init(dim, std, rng),
        }
    }

    pub fn bind(&self, tape: &mut Tape, heads: usize) -> ImageEncoderVars {
        ImageEncoderVars {
            embed: tape.param(self.embed.clone()),
            mix: self.mix.bind(tape).with_heads(heads),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderParams {
    /// `V×F` token embedding table.
    pub embedding: Tensor,
    pub mix: AttentionHeadParams,
}

impl TextEncoderParams {
    pub fn init(vocab: usize, dim: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            embedding: Tensor::randn(vocab, dim, std, rng),
            mix: AttentionHeadParams::init(dim, std, rng),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.rows()
    }

    pub fn bind(&self, tape: &mut Tape, heads: usize) -> TextEncoderVars {
        TextEncoderVars {
            embedding: tape.param(self.embedding.clone()),
            mix: self.mix.bind(tape).with_heads(heads),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ImageEncoderVars {
    pub embed: Var,
    pub mix: HeadVars,
}

#[derive(Debug, Clone, Copy)]
pub struct TextEncoderVars {
    pub embedding: Var,
    pub mix: HeadVars,
}

/// `z_v = A(u, u, u) + u` with `u = patches · W_embed`; returns `I×F`.
pub fn encode_image(
    tape: &mut Tape,
    patches: &Tensor,
    params: &ImageEncoderVars,
    num_patches: usize,
) -> Result<Var> {
    let patch_dim = tape.shape(params.embed).0;
    if patches.shape() != (num_patches, patch_dim) {
        return Err(shape_err(
            "encode_image",
            format!(
                "got {}x{} patches, expected {num_patches}x{patch_dim}",
                patches.rows(),
                patches.cols()
            ),
        ));
    }
    let raw = tape.constant(patches.clone());
    let u = tape.matmul(raw, params.embed)?;
    let mixed = attention_head(tape, u, u, u, &params.mix)?;
    tape.add(mixed, u)
}

/// Token ids as fed to the embedding: OCR gets the marker prepended, then the
/// sequence is truncated or padded to exactly `len`.
pub fn prepare_tokens(
    tokens: &[usize],
    is_ocr: bool,
    len: usize,
    vocab: usize,
) -> Result<Vec<usize>> {
    if let Some(&token) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::TokenOutOfRange { token, vocab });
    }
    let mut ids = Vec::with_capacity(len);
    if is_ocr {
        ids.push(OCR_TOKEN);
    }
    ids.extend_from_slice(tokens);
    if ids.is_empty() || len == 0 {
        return Err(Error::Empty { op: "encode_text" });
    }
    ids.resize(len, PAD_TOKEN);
    Ok(ids)
}

/// Embeds the prepared sequence and applies one residual self-attention
/// layer; returns `len×F`.
pub fn encode_text(
    tape: &mut Tape,
    tokens: &[usize],
    params: &TextEncoderVars,
    is_ocr: bool,
    len: usize,
) -> Result<Var> {
    let vocab = tape.shape(params.embedding).0;
    let ids = prepare_tokens(tokens, is_ocr, len, vocab)?;
    let u = tape.gather_rows(params.embedding, &ids)?;
    let mixed = attention_head(tape, u, u, u, &params.mix)?;
    tape.add(mixed, u)
}

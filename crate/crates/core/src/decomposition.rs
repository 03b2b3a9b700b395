//! Shared/private decomposition of completed representations.
//!
//! Four `F×F` projectors split each completed image and text representation
//! into a modality-shared and a modality-private vector. The projectors are
//! stored unconstrained and row-normalized on every forward pass. An exclusive
//! hinge keeps each shared/private pair apart, a soft contrastive loss aligns
//! the shared vectors across modalities, and the private difference
//! `p_text − p_image` is the discrepant sentiment.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Result};
use crate::rng::Rng;
use crate::schema::CategorySchema;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecompositionParams {
    pub shared_image: Tensor,
    pub private_image: Tensor,
    pub shared_text: Tensor,
    pub private_text: Tensor,
}

impl DecompositionParams {
    pub fn init(dim: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            shared_image: Tensor::randn(dim, dim, std, rng),
            private_image: Tensor::randn(dim, dim, std, rng),
            shared_text: Tensor::randn(dim, dim, std, rng),
            private_text: Tensor::randn(dim, dim, std, rng),
        }
    }

    /// Records the row-normalized projectors.
    pub fn bind(&self, tape: &mut Tape) -> Result<Projectors> {
        let mut norm = |t: &Tensor| -> Result<(Var, Var)> {
            let raw = tape.param(t.clone());
            Ok((raw, tape.row_l2_normalize(raw)?))
        };
        let (raw_si, shared_image) = norm(&self.shared_image)?;
        let (raw_pi, private_image) = norm(&self.private_image)?;
        let (raw_st, shared_text) = norm(&self.shared_text)?;
        let (raw_pt, private_text) = norm(&self.private_text)?;
        Ok(Projectors {
            raw: [raw_si, raw_pi, raw_st, raw_pt],
            shared_image,
            private_image,
            shared_text,
            private_text,
        })
    }
}

/// Row-normalized projectors on a tape; `raw` holds the stored leaves in
/// field order.
#[derive(Debug, Clone, Copy)]
pub struct Projectors {
    pub raw: [Var; 4],
    pub shared_image: Var,
    pub private_image: Var,
    pub shared_text: Var,
    pub private_text: Var,
}

/// Per-post shared (`s`) and private (`p`) vectors of both modalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubRepresentations {
    pub shared_image: Vec<f64>,
    pub shared_text: Vec<f64>,
    pub private_image: Vec<f64>,
    pub private_text: Vec<f64>,
}

/// `s = Pool(Z · rownorm(P_s))`, `p = Pool(Z · rownorm(P_p))`.
pub fn decompose(tape: &mut Tape, z: Var, shared: Var, private: Var) -> Result<(Var, Var)> {
    let shared = tape.row_l2_normalize(shared)?;
    let private = tape.row_l2_normalize(private)?;
    decompose_normalized(tape, z, shared, private)
}

/// [`decompose`] with projectors that are already row-normalized.
pub fn decompose_normalized(
    tape: &mut Tape,
    z: Var,
    shared: Var,
    private: Var,
) -> Result<(Var, Var)> {
    let zs = tape.matmul(z, shared)?;
    let zp = tape.matmul(z, private)?;
    Ok((tape.mean_pool_rows(zs)?, tape.mean_pool_rows(zp)?))
}

/// `max(σ − ‖a − b‖_F, 0)`.
fn hinge(tape: &mut Tape, a: Var, b: Var, sigma: f64) -> Result<Var> {
    let diff = tape.sub(a, b)?;
    let dist = tape.frobenius_norm(diff)?;
    let neg = tape.scale(dist, -1.0)?;
    let margin = tape.add_scalar(neg, sigma)?;
    tape.relu(margin)
}

/// Sum of the image-pair and text-pair hinges on normalized projectors.
pub fn exclusive_loss(tape: &mut Tape, projectors: &Projectors, sigma: f64) -> Result<Var> {
    let image = hinge(
        tape,
        projectors.shared_image,
        projectors.private_image,
        sigma,
    )?;
    let text = hinge(tape, projectors.shared_text, projectors.private_text, sigma)?;
    tape.add(image, text)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ContrastiveOptions {
    pub temperature: f64,
    /// L2-normalize the shared vectors before taking dot products.
    pub normalize: bool,
    /// Average the image→text and text→image directions.
    pub symmetric: bool,
}

impl Default for ContrastiveOptions {
    fn default() -> Self {
        Self {
            temperature: 0.07,
            normalize: true,
            symmetric: false,
        }
    }
}

/// Soft inter-modal contrastive loss over a batch.
///
/// For each image anchor `i`:
/// `ℓ_i = −log(Σ_j w_ij e^{ŝ_i^v·ŝ_j^t/τ} / Σ_j e^{ŝ_i^v·ŝ_j^t/τ})`,
/// averaged over anchors. Anchors whose weight row is entirely zero (only
/// possible in literal-distance mode) are left out of the mean.
pub fn soft_contrastive_loss(
    tape: &mut Tape,
    shared_image: Var,
    shared_text: Var,
    labels: &[usize],
    schema: &CategorySchema,
    options: &ContrastiveOptions,
) -> Result<Var> {
    let (b, f) = tape.shape(shared_image);
    if tape.shape(shared_text) != (b, f) || labels.len() != b {
        return Err(shape_err(
            "soft_contrastive_loss",
            format!(
                "image {:?}, text {:?}, {} labels",
                (b, f),
                tape.shape(shared_text),
                labels.len()
            ),
        ));
    }
    let weights = schema.weight_matrix(labels)?;
    let (image, text) = if options.normalize {
        (
            tape.row_l2_normalize(shared_image)?,
            tape.row_l2_normalize(shared_text)?,
        )
    } else {
        (shared_image, shared_text)
    };
    let inv_tau = 1.0 / options.temperature;
    let forward = directional(tape, image, text, &weights, inv_tau)?;
    if !options.symmetric {
        return Ok(forward);
    }
    let backward = directional(tape, text, image, &weights.transpose(), inv_tau)?;
    let sum = tape.add(forward, backward)?;
    tape.scale(sum, 0.5)
}

fn directional(
    tape: &mut Tape,
    anchors: Var,
    candidates: Var,
    weights: &Tensor,
    inv_tau: f64,
) -> Result<Var> {
    let sims = tape.matmul_nt(anchors, candidates)?;
    let logits = tape.scale(sims, inv_tau)?;
    let active: Vec<usize> = (0..weights.rows())
        .filter(|&i| weights.row(i).iter().any(|w| *w > 0.0))
        .collect();
    if active.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    if active.len() == weights.rows() {
        return tape.soft_target_nll(logits, weights);
    }
    let kept = tape.gather_rows(logits, &active)?;
    let rows: Vec<Vec<f64>> = active.iter().map(|&i| weights.row(i).to_vec()).collect();
    tape.soft_target_nll(kept, &Tensor::from_rows(&rows)?)
}

/// `D = p_text − p_image`.
pub fn discrepant_sentiment(tape: &mut Tape, private_text: Var, private_image: Var) -> Result<Var> {
    tape.sub(private_text, private_image)
}

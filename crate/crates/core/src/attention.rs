//! Scaled dot-product attention and the blocks built from it.
//!
//! `A(q, k, v) = softmax((q·P_Q)(k·P_K)ᵀ / √d) · (v·P_V)` with `d` the
//! per-head width (the full feature dimension for a single head). Blocks add
//! residual connections but no normalization or feed-forward sublayers.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{shape_err, Error, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// `P_Q`, `P_K`, `P_V`, each `F×F`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionHeadParams {
    pub query: Tensor,
    pub key: Tensor,
    pub value: Tensor,
}

impl AttentionHeadParams {
    pub fn init(dim: usize, std: f64, rng: &mut Rng) -> Self {
        Self {
            query: Tensor::randn(dim, dim, std, rng),
            key: Tensor::randn(dim, dim, std, rng),
            value: Tensor::randn(dim, dim, std, rng),
        }
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            query: Tensor::identity(dim),
            key: Tensor::identity(dim),
            value: Tensor::identity(dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.query.rows()
    }

    pub fn bind(&self, tape: &mut Tape) -> HeadVars {
        HeadVars {
            query: tape.param(self.query.clone()),
            key: tape.param(self.key.clone()),
            value: tape.param(self.value.clone()),
            heads: 1,
        }
    }

    pub fn tensors(&self) -> [&Tensor; 3] {
        [&self.query, &self.key, &self.value]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 3] {
        [&mut self.query, &mut self.key, &mut self.value]
    }
}

/// Projection matrices of one attention block recorded on a tape.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub query: Var,
    pub key: Var,
    pub value: Var,
    /// Number of column blocks the projections are split into.
    pub heads: usize,
}

impl HeadVars {
    pub fn with_heads(mut self, heads: usize) -> Self {
        self.heads = heads.max(1);
        self
    }
}

/// Shared head for both directions of the image completion, plus the
/// `I×(I+L)` row mixer `P_ca`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossCompletionParams {
    pub head: AttentionHeadParams,
    pub mix: Tensor,
}

#[derive(Debug, Clone, Copy)]
pub struct CrossCompletionVars {
    pub head: HeadVars,
    pub mix: Var,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusionParams {
    pub head: AttentionHeadParams,
}

/// Attention output together with the softmax weights of every head.
#[derive(Debug, Clone)]
pub struct Attended {
    pub output: Var,
    pub weights: Vec<Var>,
}

pub fn attention_head(tape: &mut Tape, q: Var, k: Var, v: Var, head: &HeadVars) -> Result<Var> {
    Ok(attention_with_weights(tape, q, k, v, head)?.output)
}

pub fn attention_with_weights(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    head: &HeadVars,
) -> Result<Attended> {
    let dim = tape.shape(head.query).0;
    for (name, x) in [("query", q), ("key", k), ("value", v)] {
        if tape.shape(x).1 != dim {
            return Err(shape_err(
                "attention",
                format!("{name} has {} columns, expected {dim}", tape.shape(x).1),
            ));
        }
    }
    if tape.shape(k).0 != tape.shape(v).0 {
        return Err(shape_err(
            "attention",
            format!("{} keys but {} values", tape.shape(k).0, tape.shape(v).0),
        ));
    }
    if tape.shape(k).0 == 0 {
        return Err(Error::Empty { op: "attention" });
    }
    if head.heads == 0 || !dim.is_multiple_of(head.heads) {
        return Err(shape_err(
            "attention",
            format!("{} heads do not divide width {dim}", head.heads),
        ));
    }

    let qp = tape.matmul(q, head.query)?;
    let kp = tape.matmul(k, head.key)?;
    let vp = tape.matmul(v, head.value)?;
    let width = dim / head.heads;
    let scale = 1.0 / (width as f64).sqrt();

    if head.heads == 1 {
        let (output, weights) = single_head(tape, qp, kp, vp, scale)?;
        return Ok(Attended {
            output,
            weights: vec![weights],
        });
    }
    let mut outputs = Vec::with_capacity(head.heads);
    let mut weights = Vec::with_capacity(head.heads);
    for h in 0..head.heads {
        let qh = tape.slice_cols(qp, h * width, width)?;
        let kh = tape.slice_cols(kp, h * width, width)?;
        let vh = tape.slice_cols(vp, h * width, width)?;
        let (o, w) = single_head(tape, qh, kh, vh, scale)?;
        outputs.push(o);
        weights.push(w);
    }
    Ok(Attended {
        output: tape.concat_cols(&outputs)?,
        weights,
    })
}

fn single_head(tape: &mut Tape, q: Var, k: Var, v: Var, scale: f64) -> Result<(Var, Var)> {
    let scores = tape.matmul_nt(q, k)?;
    let scores = tape.scale(scores, scale)?;
    let weights = tape.softmax_rows(scores)?;
    Ok((tape.matmul(weights, v)?, weights))
}

/// `A(x, y, y) + x`.
fn cross_residual(tape: &mut Tape, x: Var, y: Var, head: &HeadVars) -> Result<Var> {
    let a = attention_head(tape, x, y, y, head)?;
    tape.add(a, x)
}

/// OCR-completed image representation, `I×F`:
/// `P_ca · [A(z_o, z_v, z_v) + z_o ; A(z_v, z_o, z_o) + z_v]`.
pub fn complete_image(
    tape: &mut Tape,
    ocr: Var,
    image: Var,
    params: &CrossCompletionVars,
) -> Result<Var> {
    let (mix_rows, mix_cols) = tape.shape(params.mix);
    let stacked_rows = tape.shape(ocr).0 + tape.shape(image).0;
    if mix_cols != stacked_rows || mix_rows != tape.shape(image).0 {
        return Err(shape_err(
            "complete_image",
            format!(
                "P_ca is {mix_rows}x{mix_cols}, inputs need {}x{stacked_rows}",
                tape.shape(image).0
            ),
        ));
    }
    let ocr_guided = cross_residual(tape, ocr, image, &params.head)?;
    let image_guided = cross_residual(tape, image, ocr, &params.head)?;
    let stacked = tape.concat_rows(&[ocr_guided, image_guided])?;
    tape.matmul(params.mix, stacked)
}

/// OCR-completed text representation, `2L×F`: self-attention with residual
/// over `[z_t ; z_o]`.
pub fn complete_text(tape: &mut Tape, text: Var, ocr: Var, head: &HeadVars) -> Result<Var> {
    if tape.shape(text) != tape.shape(ocr) {
        return Err(shape_err(
            "complete_text",
            format!("text {:?} vs OCR {:?}", tape.shape(text), tape.shape(ocr)),
        ));
    }
    let u = tape.concat_rows(&[text, ocr])?;
    let a = attention_head(tape, u, u, u, head)?;
    tape.add(a, u)
}

/// Consistent sentiment `C`, `1×F`: mean over the rows of both cross-attended
/// directions between completed image and text.
pub fn global_fusion(tape: &mut Tape, image: Var, text: Var, head: &HeadVars) -> Result<Var> {
    Ok(global_fusion_with_weights(tape, image, text, head)?.output)
}

pub fn global_fusion_with_weights(
    tape: &mut Tape,
    image: Var,
    text: Var,
    head: &HeadVars,
) -> Result<Attended> {
    let image_query = attention_with_weights(tape, image, text, text, head)?;
    let image_side = tape.add(image_query.output, image)?;
    let text_query = attention_with_weights(tape, text, image, image, head)?;
    let text_side = tape.add(text_query.output, text)?;
    let stacked = tape.concat_rows(&[image_side, text_side])?;
    let mut weights = image_query.weights;
    weights.extend(text_query.weights);
    Ok(Attended {
        output: tape.mean_pool_rows(stacked)?,
        weights,
    })
}

/// Row-major CSV of an attention weight matrix, 17 significant digits.
pub fn write_weights_csv<W: Write>(weights: &Tensor, mut out: W) -> std::io::Result<()> {
    for r in 0..weights.rows() {
        let line: Vec<String> = weights.row(r).iter().map(|v| format!("{v:.16e}")).collect();
        writeln!(out, "{}", line.join(","))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckConfig};

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn single_key_returns_value() {
        let mut tape = Tape::new();
        let head = AttentionHeadParams::identity(3).bind(&mut tape);
        let x = tape.constant(t(&[&[0.2, -1.0, 4.0]]));
        let out = attention_head(&mut tape, x, x, x, &head).unwrap();
        assert_eq!(tape.value(out), tape.value(x));
    }

    #[test]
    fn equal_logits_average_values() {
        let mut tape = Tape::new();
        let head = AttentionHeadParams::identity(2).bind(&mut tape);
        let q = tape.constant(t(&[&[0.0, 0.0]]));
        let k = tape.constant(t(&[&[1.0, 2.0], &[3.0, -1.0]]));
        let v = tape.constant(t(&[&[1.0, 3.0], &[5.0, 7.0]]));
        let out = attention_head(&mut tape, q, k, v, &head).unwrap();
        assert_eq!(tape.value(out).data(), &[3.0, 5.0]);
    }

    #[test]
    fn two_key_hand_evaluation() {
        // logits 1/√2 and 0 → weights σ(1/√2) and 1 − σ(1/√2)
        let mut tape = Tape::new();
        let head = AttentionHeadParams::identity(2).bind(&mut tape);
        let q = tape.constant(t(&[&[1.0, 0.0]]));
        let kv = tape.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let att = attention_with_weights(&mut tape, q, kv, kv, &head).unwrap();
        let w0 = 1.0 / (1.0 + (-(0.5f64).sqrt()).exp());
        let w = tape.value(att.weights[0]);
        assert!((w.get(0, 0) - w0).abs() < 1e-15);
        assert!((w.get(0, 0) - 0.6698).abs() < 1e-4);
        assert!((w.get(0, 1) - 0.3302).abs() < 1e-4);
        let out = tape.value(att.output);
        assert!((out.get(0, 0) - w0).abs() < 1e-15);
        assert!((out.get(0, 1) - (1.0 - w0)).abs() < 1e-15);
    }

    #[test]
    fn output_is_convex_combination_of_projected_values() {
        let mut rng = Rng::new(9);
        let params = AttentionHeadParams::init(4, 0.5, &mut rng);
        let mut tape = Tape::new();
        let head = params.bind(&mut tape);
        let q = tape.constant(Tensor::randn(3, 4, 1.0, &mut rng));
        let kv = tape.constant(Tensor::randn(5, 4, 1.0, &mut rng));
        let att = attention_with_weights(&mut tape, q, kv, kv, &head).unwrap();
        let w = tape.value(att.weights[0]);
        for r in 0..w.rows() {
            assert!(w.row(r).iter().all(|x| *x >= 0.0));
            assert!((w.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let projected = tape.value(kv).matmul(&params.value).unwrap();
        let expected = w.matmul(&projected).unwrap();
        assert!(expected.max_abs_diff(tape.value(att.output)) < 1e-14);
    }

    #[test]
    fn attention_rejects_bad_shapes() {
        let mut tape = Tape::new();
        let head = AttentionHeadParams::identity(2).bind(&mut tape);
        let q = tape.constant(Tensor::zeros(1, 3));
        let k = tape.constant(Tensor::zeros(2, 2));
        assert!(attention_head(&mut tape, q, k, k, &head).is_err());
        let q = tape.constant(Tensor::zeros(1, 2));
        let v = tape.constant(Tensor::zeros(3, 2));
        assert!(attention_head(&mut tape, q, k, v, &head).is_err());
        assert!(attention_head(&mut tape, q, k, k, &head.with_heads(3)).is_err());
    }

    #[test]
    fn multi_head_splits_columns() {
        let mut rng = Rng::new(4);
        let params = AttentionHeadParams::init(4, 0.5, &mut rng);
        let mut tape = Tape::new();
        let head = params.bind(&mut tape).with_heads(2);
        let x = tape.constant(Tensor::randn(3, 4, 1.0, &mut rng));
        let att = attention_with_weights(&mut tape, x, x, x, &head).unwrap();
        assert_eq!(att.weights.len(), 2);
        assert_eq!(tape.shape(att.output), (3, 4));
    }

    fn cross_params(i: usize, l: usize, f: usize, rng: &mut Rng) -> CrossCompletionParams {
        CrossCompletionParams {
            head: AttentionHeadParams::init(f, 0.3, rng),
            mix: Tensor::randn(i, i + l, 0.3, rng),
        }
    }

    #[test]
    fn complete_image_shape() {
        let mut rng = Rng::new(1);
        let p = cross_params(4, 8, 16, &mut rng);
        let mut tape = Tape::new();
        let vars = CrossCompletionVars {
            head: p.head.bind(&mut tape),
            mix: tape.param(p.mix.clone()),
        };
        let o = tape.constant(Tensor::randn(8, 16, 1.0, &mut rng));
        let v = tape.constant(Tensor::randn(4, 16, 1.0, &mut rng));
        let z = complete_image(&mut tape, o, v, &vars).unwrap();
        assert_eq!(tape.shape(z), (4, 16));
        assert!(complete_image(&mut tape, v, o, &vars).is_err());
    }

    #[test]
    fn complete_image_degenerate_probe() {
        // P_ca = [I | 0], zero projections → first I rows of z_o
        let (i, l, f) = (3, 5, 4);
        let mut mix = Tensor::zeros(i, i + l);
        for r in 0..i {
            mix.set(r, r, 1.0);
        }
        let zero = AttentionHeadParams {
            query: Tensor::zeros(f, f),
            key: Tensor::zeros(f, f),
            value: Tensor::zeros(f, f),
        };
        let mut rng = Rng::new(8);
        let zo = Tensor::randn(l, f, 1.0, &mut rng);
        let mut tape = Tape::new();
        let vars = CrossCompletionVars {
            head: zero.bind(&mut tape),
            mix: tape.param(mix),
        };
        let o = tape.constant(zo.clone());
        let v = tape.constant(Tensor::randn(i, f, 1.0, &mut rng));
        let z = complete_image(&mut tape, o, v, &vars).unwrap();
        for r in 0..i {
            assert_eq!(tape.value(z).row(r), zo.row(r));
        }
    }

    #[test]
    fn complete_image_gradients() {
        let mut rng = Rng::new(21);
        let p = cross_params(2, 3, 4, &mut rng);
        let zo = Tensor::randn(3, 4, 1.0, &mut rng);
        let zv = Tensor::randn(2, 4, 1.0, &mut rng);
        let run = |ps: &[Tensor]| -> (f64, Vec<Tensor>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|t| tape.param(t.clone())).collect();
            let cv = CrossCompletionVars {
                head: HeadVars {
                    query: vars[0],
                    key: vars[1],
                    value: vars[2],
                    heads: 1,
                },
                mix: vars[3],
            };
            let o = tape.constant(zo.clone());
            let v = tape.constant(zv.clone());
            let z = complete_image(&mut tape, o, v, &cv).unwrap();
            let pooled = tape.mean_pool_rows(z).unwrap();
            let ones = tape.constant(Tensor::filled(4, 1, 1.0));
            let total = tape.matmul(pooled, ones).unwrap();
            let mut g = tape.backward(total).unwrap();
            (
                tape.value(total).item(),
                vars.iter().map(|v| g.take(*v).unwrap()).collect(),
            )
        };
        let mut params = vec![p.head.query, p.head.key, p.head.value, p.mix];
        let (_, grads) = run(&params);
        let report = grad_check(&mut params, &grads, &[], GradCheckConfig::default(), |ps| {
            Ok(run(ps).0)
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn complete_text_shape_and_residual() {
        let mut rng = Rng::new(2);
        let mut tape = Tape::new();
        let params = AttentionHeadParams::init(16, 0.1, &mut rng);
        let head = params.bind(&mut tape);
        let zt = tape.constant(Tensor::randn(8, 16, 1.0, &mut rng));
        let zo = tape.constant(Tensor::randn(8, 16, 1.0, &mut rng));
        let z = complete_text(&mut tape, zt, zo, &head).unwrap();
        assert_eq!(tape.shape(z), (16, 16));

        let zero_v = AttentionHeadParams {
            value: Tensor::zeros(16, 16),
            ..params
        };
        let head = zero_v.bind(&mut tape);
        let z = complete_text(&mut tape, zt, zo, &head).unwrap();
        let u = tape.concat_rows(&[zt, zo]).unwrap();
        assert_eq!(tape.value(z), tape.value(u));
    }

    #[test]
    fn complete_text_depends_on_ocr() {
        let mut rng = Rng::new(12);
        let params = AttentionHeadParams::init(4, 0.5, &mut rng);
        let zt = Tensor::randn(3, 4, 1.0, &mut rng);
        let zo = Tensor::randn(3, 4, 1.0, &mut rng);
        let mut zo2 = zo.clone();
        zo2.set(1, 2, zo2.get(1, 2) + 0.5);
        let run = |ocr: &Tensor| {
            let mut tape = Tape::new();
            let head = params.bind(&mut tape);
            let t = tape.constant(zt.clone());
            let o = tape.constant(ocr.clone());
            let z = complete_text(&mut tape, t, o, &head).unwrap();
            tape.value(z).clone()
        };
        let (a, b) = (run(&zo), run(&zo2));
        // text rows only change through attention
        let text_rows_a = Tensor::new(3, 4, a.data()[..12].to_vec()).unwrap();
        let text_rows_b = Tensor::new(3, 4, b.data()[..12].to_vec()).unwrap();
        assert!(text_rows_a.max_abs_diff(&text_rows_b) > 0.0);
    }

    #[test]
    fn global_fusion_shape_and_residual_path() {
        let mut rng = Rng::new(5);
        let mut tape = Tape::new();
        let params = AttentionHeadParams {
            value: Tensor::zeros(16, 16),
            ..AttentionHeadParams::init(16, 0.1, &mut rng)
        };
        let head = params.bind(&mut tape);
        let zv = tape.constant(Tensor::randn(4, 16, 1.0, &mut rng));
        let zt = tape.constant(Tensor::randn(16, 16, 1.0, &mut rng));
        let c = global_fusion(&mut tape, zv, zt, &head).unwrap();
        assert_eq!(tape.shape(c), (1, 16));
        let all = tape.concat_rows(&[zv, zt]).unwrap();
        let mean = tape.mean_pool_rows(all).unwrap();
        assert!(tape.value(c).max_abs_diff(tape.value(mean)) < 1e-15);
    }

    #[test]
    fn global_fusion_gradients() {
        let mut rng = Rng::new(33);
        let p = FusionParams {
            head: AttentionHeadParams::init(4, 0.4, &mut rng),
        };
        let zv = Tensor::randn(2, 4, 1.0, &mut rng);
        let zt = Tensor::randn(3, 4, 1.0, &mut rng);
        let w = Tensor::randn(4, 1, 1.0, &mut rng);
        let run = |ps: &[Tensor]| -> (f64, Vec<Tensor>) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ps.iter().map(|t| tape.param(t.clone())).collect();
            let head = HeadVars {
                query: vars[0],
                key: vars[1],
                value: vars[2],
                heads: 1,
            };
            let a = tape.constant(zv.clone());
            let b = tape.constant(zt.clone());
            let c = global_fusion(&mut tape, a, b, &head).unwrap();
            let wv = tape.constant(w.clone());
            let out = tape.matmul(c, wv).unwrap();
            let mut g = tape.backward(out).unwrap();
            (
                tape.value(out).item(),
                vars.iter().map(|v| g.take(*v).unwrap()).collect(),
            )
        };
        let mut params = vec![p.head.query, p.head.key, p.head.value];
        let (_, grads) = run(&params);
        let report = grad_check(&mut params, &grads, &[], GradCheckConfig::default(), |ps| {
            Ok(run(ps).0)
        })
        .unwrap();
        assert!(report.passed, "{report:?}");
    }

    #[test]
    fn weights_csv_has_17_digits() {
        let w = t(&[&[1.0 / 3.0, 2.0 / 3.0]]);
        let mut buf = Vec::new();
        write_weights_csv(&w, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text, "3.3333333333333331e-1,6.6666666666666663e-1\n");
        let parsed: Vec<f64> = text.trim().split(',').map(|s| s.parse().unwrap()).collect();
        assert_eq!(parsed, w.data());
    }
}

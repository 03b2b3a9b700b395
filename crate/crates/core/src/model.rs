//! The full network: encoders, OCR completion, shared/private decomposition,
//! global fusion and the classifier, plus its ablation variants.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::attention::{
    complete_image, complete_text, global_fusion_with_weights, AttentionHeadParams,
    CrossCompletionParams, CrossCompletionVars, FusionParams, HeadVars,
};
use crate::autodiff::{Tape, Var};
use crate::data::PostRecord;
use crate::decomposition::{
    decompose_normalized, discrepant_sentiment, exclusive_loss, soft_contrastive_loss,
    ContrastiveOptions, DecompositionParams, Projectors, SubRepresentations,
};
use crate::encoders::{
    encode_image, encode_text, ImageEncoderParams, ImageEncoderVars, TextEncoderParams,
    TextEncoderVars,
};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::schema::CategorySchema;
use crate::tensor::Tensor;

/// Model structure, by which components are removed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Full,
    /// Without OCR completion.
    NoSco,
    /// Without decomposition; the classifier sees the fused vector only.
    NoSde,
    /// Without the soft contrastive loss.
    NoSoftcl,
    /// Neither completion nor decomposition: plain cross-attention fusion.
    NoScoSde,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::NoSco,
        Variant::NoSde,
        Variant::NoSoftcl,
        Variant::NoScoSde,
    ];

    pub fn uses_completion(self) -> bool {
        matches!(self, Variant::Full | Variant::NoSde | Variant::NoSoftcl)
    }

    pub fn uses_decomposition(self) -> bool {
        matches!(self, Variant::Full | Variant::NoSco | Variant::NoSoftcl)
    }

    pub fn uses_contrastive(self) -> bool {
        matches!(self, Variant::Full | Variant::NoSco)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoSco => "no-sco",
            Variant::NoSde => "no-sde",
            Variant::NoSoftcl => "no-softcl",
            Variant::NoScoSde => "no-sco-sde",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Image patches per post (`I`).
    pub num_patches: usize,
    /// Text and OCR sequence length (`L`).
    pub text_len: usize,
    /// Feature dimension (`F`).
    pub dim: usize,
    /// Raw patch vector length (`P`).
    pub patch_dim: usize,
    pub vocab_size: usize,
    pub num_classes: usize,
    /// Exclusive-loss margin.
    pub sigma: f64,
    /// Contrastive temperature.
    pub tau: f64,
    pub schema: CategorySchema,
    pub variant: Variant,
    pub seed: u64,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_true")]
    pub contrastive_normalize: bool,
    #[serde(default)]
    pub contrastive_symmetric: bool,
    #[serde(default = "default_init_std")]
    pub init_std: f64,
}

fn default_heads() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn default_init_std() -> f64 {
    0.02
}

impl ModelConfig {
    /// I=16, L=16, F=32, P=8, V=256, σ=0.1, τ=0.07.
    pub fn new(schema: CategorySchema, variant: Variant, seed: u64) -> Self {
        Self {
            num_patches: 16,
            text_len: 16,
            dim: 32,
            patch_dim: 8,
            vocab_size: 256,
            num_classes: schema.num_classes(),
            sigma: 0.1,
            tau: 0.07,
            schema,
            variant,
            seed,
            heads: 1,
            contrastive_normalize: true,
            contrastive_symmetric: false,
            init_std: 0.02,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        for (name, v) in [
            ("num_patches", self.num_patches),
            ("text_len", self.text_len),
            ("dim", self.dim),
            ("patch_dim", self.patch_dim),
            ("vocab_size", self.vocab_size),
            ("num_classes", self.num_classes),
            ("heads", self.heads),
        ] {
            if v == 0 {
                return bad(format!("{name} must be at least 1"));
            }
        }
        if self.vocab_size < 2 {
            return bad("vocab_size must cover the padding and OCR marker tokens".into());
        }
        if !self.dim.is_multiple_of(self.heads) {
            return bad(format!(
                "{} heads do not divide dim {}",
                self.heads, self.dim
            ));
        }
        if self.sigma.is_nan() || self.sigma < 0.0 {
            return bad(format!("sigma must be non-negative, got {}", self.sigma));
        }
        if self.tau.is_nan() || self.tau <= 0.0 {
            return bad(format!("tau must be positive, got {}", self.tau));
        }
        self.schema.validate()?;
        if self.schema.num_classes() != self.num_classes {
            return bad(format!(
                "schema {} has {} classes, config says {}",
                self.schema.name,
                self.schema.num_classes(),
                self.num_classes
            ));
        }
        Ok(())
    }

    pub fn contrastive_options(&self) -> ContrastiveOptions {
        ContrastiveOptions {
            temperature: self.tau,
            normalize: self.contrastive_normalize,
            symmetric: self.contrastive_symmetric,
        }
    }

    /// Input width of the classifier: `[C, D]` or `C` alone.
    pub fn classifier_inputs(&self) -> usize {
        if self.variant.uses_decomposition() {
            2 * self.dim
        } else {
            self.dim
        }
    }
}

/// Learning-rate group of a parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ParamGroup {
    ImageEncoder,
    TextEncoder,
    Classifier,
    Other,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::ImageEncoder,
        ParamGroup::TextEncoder,
        ParamGroup::Classifier,
        ParamGroup::Other,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompletionParams {
    pub image: CrossCompletionParams,
    pub text: AttentionHeadParams,
}

/// All learnable matrices. Components a variant does not use are absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub image_encoder: ImageEncoderParams,
    pub text_encoder: TextEncoderParams,
    pub completion: Option<CompletionParams>,
    pub decomposition: Option<DecompositionParams>,
    pub fusion: FusionParams,
    /// `2F×C`, or `F×C` without decomposition.
    pub classifier: Tensor,
}

/// Name, group and value of one parameter tensor.
pub struct NamedParam<'a> {
    pub name: &'static str,
    pub group: ParamGroup,
    pub tensor: &'a Tensor,
}

impl ModelParams {
    /// Gaussian(0, init_std²) entries drawn from `Rng::new(seed)` in this
    /// order, each matrix row-major: image patch projection, image mixing
    /// P_Q/P_K/P_V, token embedding, text mixing P_Q/P_K/P_V, image
    /// completion P_Q/P_K/P_V, P_ca, text completion P_Q/P_K/P_V, the four
    /// decomposition projectors (shared image, private image, shared text,
    /// private text), fusion P_Q/P_K/P_V, classifier. Unused components are
    /// still drawn, then dropped, so shared components match across variants.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let std = config.init_std;
        let f = config.dim;
        let mut rng = Rng::new(seed);
        let image_encoder = ImageEncoderParams::init(config.patch_dim, f, std, &mut rng);
        let text_encoder = TextEncoderParams::init(config.vocab_size, f, std, &mut rng);
        let completion = CompletionParams {
            image: CrossCompletionParams {
                head: AttentionHeadParams::init(f, std, &mut rng),
                mix: Tensor::randn(
                    config.num_patches,
                    config.num_patches + config.text_len,
                    std,
                    &mut rng,
                ),
            },
            text: AttentionHeadParams::init(f, std, &mut rng),
        };
        let decomposition = DecompositionParams::init(f, std, &mut rng);
        let fusion = FusionParams {
            head: AttentionHeadParams::init(f, std, &mut rng),
        };
        let classifier = Tensor::randn(
            config.classifier_inputs(),
            config.num_classes,
            std,
            &mut rng,
        );
        Ok(Self {
            image_encoder,
            text_encoder,
            completion: config.variant.uses_completion().then_some(completion),
            decomposition: config.variant.uses_decomposition().then_some(decomposition),
            fusion,
            classifier,
        })
    }

    /// Every parameter tensor in the documented order.
    pub fn named(&self) -> Vec<NamedParam<'_>> {
        use ParamGroup::*;
        let mut out = Vec::with_capacity(24);
        let mut push = |name, group, tensor| {
            out.push(NamedParam {
                name,
                group,
                tensor,
            })
        };
        push(
            "image_encoder.embed",
            ImageEncoder,
            &self.image_encoder.embed,
        );
        push(
            "image_encoder.mix.query",
            ImageEncoder,
            &self.image_encoder.mix.query,
        );
        push(
            "image_encoder.mix.key",
            ImageEncoder,
            &self.image_encoder.mix.key,
        );
        push(
            "image_encoder.mix.value",
            ImageEncoder,
            &self.image_encoder.mix.value,
        );
        push(
            "text_encoder.embedding",
            TextEncoder,
            &self.text_encoder.embedding,
        );
        push(
            "text_encoder.mix.query",
            TextEncoder,
            &self.text_encoder.mix.query,
        );
        push(
            "text_encoder.mix.key",
            TextEncoder,
            &self.text_encoder.mix.key,
        );
        push(
            "text_encoder.mix.value",
            TextEncoder,
            &self.text_encoder.mix.value,
        );
        if let Some(c) = &self.completion {
            push("completion.image.query", Other, &c.image.head.query);
            push("completion.image.key", Other, &c.image.head.key);
            push("completion.image.value", Other, &c.image.head.value);
            push("completion.image.mix", Other, &c.image.mix);
            push("completion.text.query", Other, &c.text.query);
            push("completion.text.key", Other, &c.text.key);
            push("completion.text.value", Other, &c.text.value);
        }
        if let Some(d) = &self.decomposition {
            push("decomposition.shared_image", Other, &d.shared_image);
            push("decomposition.private_image", Other, &d.private_image);
            push("decomposition.shared_text", Other, &d.shared_text);
            push("decomposition.private_text", Other, &d.private_text);
        }
        push("fusion.query", Other, &self.fusion.head.query);
        push("fusion.key", Other, &self.fusion.head.key);
        push("fusion.value", Other, &self.fusion.head.value);
        push("classifier", Classifier, &self.classifier);
        out
    }

    /// Mutable tensors in the same order as [`ModelParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::with_capacity(24);
        out.push(&mut self.image_encoder.embed);
        out.extend(self.image_encoder.mix.tensors_mut());
        out.push(&mut self.text_encoder.embedding);
        out.extend(self.text_encoder.mix.tensors_mut());
        if let Some(c) = &mut self.completion {
            out.extend(c.image.head.tensors_mut());
            out.push(&mut c.image.mix);
            out.extend(c.text.tensors_mut());
        }
        if let Some(d) = &mut self.decomposition {
            out.push(&mut d.shared_image);
            out.push(&mut d.private_image);
            out.push(&mut d.shared_text);
            out.push(&mut d.private_text);
        }
        out.extend(self.fusion.head.tensors_mut());
        out.push(&mut self.classifier);
        out
    }

    pub fn to_tensors(&self) -> Vec<Tensor> {
        self.named().into_iter().map(|p| p.tensor.clone()).collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.named()
            .into_iter()
            .map(|p| p.name.to_string())
            .collect()
    }

    pub fn groups(&self) -> Vec<ParamGroup> {
        self.named().into_iter().map(|p| p.group).collect()
    }

    /// Rebuilds parameters for `config` from tensors in documented order,
    /// checking every shape.
    pub fn from_tensors(config: &ModelConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let mut params = Self::skeleton(config)?;
        let slots = params.tensors_mut();
        if slots.len() != tensors.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (k, (slot, t)) in slots.into_iter().zip(tensors).enumerate() {
            if slot.shape() != t.shape() {
                return Err(Error::Config(format!(
                    "parameter {k}: expected shape {:?}, got {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t;
        }
        Ok(params)
    }

    /// Copies values from a slice of tensors with matching shapes.
    pub fn assign(&mut self, tensors: &[Tensor]) {
        for (slot, t) in self.tensors_mut().into_iter().zip(tensors) {
            slot.data_mut().copy_from_slice(t.data());
        }
    }

    /// Zero-valued parameters with the shapes `config` implies.
    pub fn skeleton(config: &ModelConfig) -> Result<Self> {
        let zero = ModelConfig {
            init_std: 0.0,
            ..config.clone()
        };
        Self::init(&zero, 0)
    }

    pub fn count(&self) -> usize {
        self.named().iter().map(|p| p.tensor.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named().iter().all(|p| p.tensor.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub cls: f64,
    pub exc: f64,
    pub con: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelOutputs {
    /// Consistent sentiment `C`, length `F`.
    pub consistent: Vec<f64>,
    /// Discrepant sentiment `D`, length `F`; zeros when decomposition is off.
    pub discrepant: Vec<f64>,
    pub logits: Vec<f64>,
    pub sub: Option<SubRepresentations>,
    pub completed_image_shape: (usize, usize),
    pub completed_text_shape: (usize, usize),
}

/// How often each optional stage ran during a forward pass.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ForwardTrace {
    pub posts: usize,
    pub completion_calls: usize,
    pub decomposition_calls: usize,
}

#[derive(Debug, Clone)]
pub struct ForwardResult {
    pub outputs: Vec<ModelOutputs>,
    pub loss: LossReport,
    pub trace: ForwardTrace,
}

impl ForwardResult {
    pub fn predictions(&self) -> Vec<usize> {
        self.outputs.iter().map(|o| predict(&o.logits)).collect()
    }
}

/// Argmax over logits; ties go to the lowest index.
pub fn predict(logits: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in logits.iter().enumerate() {
        if *v > logits[best] {
            best = i;
        }
    }
    best
}

struct Bound {
    leaves: Vec<Var>,
    image_encoder: ImageEncoderVars,
    text_encoder: TextEncoderVars,
    completion: Option<(CrossCompletionVars, HeadVars)>,
    projectors: Option<Projectors>,
    fusion: HeadVars,
    classifier: Var,
}

fn bind(tape: &mut Tape, params: &ModelParams, heads: usize) -> Result<Bound> {
    let image_encoder = params.image_encoder.bind(tape, heads);
    let text_encoder = params.text_encoder.bind(tape, heads);
    let mut leaves = vec![
        image_encoder.embed,
        image_encoder.mix.query,
        image_encoder.mix.key,
        image_encoder.mix.value,
        text_encoder.embedding,
        text_encoder.mix.query,
        text_encoder.mix.key,
        text_encoder.mix.value,
    ];
    let completion = params.completion.as_ref().map(|c| {
        let image = CrossCompletionVars {
            head: c.image.head.bind(tape).with_heads(heads),
            mix: tape.param(c.image.mix.clone()),
        };
        let text = c.text.bind(tape).with_heads(heads);
        leaves.extend([
            image.head.query,
            image.head.key,
            image.head.value,
            image.mix,
            text.query,
            text.key,
            text.value,
        ]);
        (image, text)
    });
    let projectors = match &params.decomposition {
        Some(d) => {
            let p = d.bind(tape)?;
            leaves.extend(p.raw);
            Some(p)
        }
        None => None,
    };
    let fusion = params.fusion.head.bind(tape).with_heads(heads);
    leaves.extend([fusion.query, fusion.key, fusion.value]);
    let classifier = tape.param(params.classifier.clone());
    leaves.push(classifier);
    Ok(Bound {
        leaves,
        image_encoder,
        text_encoder,
        completion,
        projectors,
        fusion,
        classifier,
    })
}

struct PostVars {
    consistent: Var,
    discrepant: Option<Var>,
    logits: Var,
    shared: Option<(Var, Var)>,
    private: Option<(Var, Var)>,
    completed_image: Var,
    completed_text: Var,
}

struct Graph {
    bound: Bound,
    posts: Vec<PostVars>,
    cls: Var,
    exc: Option<Var>,
    con: Option<Var>,
    total: Var,
    trace: ForwardTrace,
    attention: Vec<(String, Var)>,
}

fn check_params(params: &ModelParams, config: &ModelConfig) -> Result<()> {
    let expected = ModelParams::skeleton(config)?;
    let shapes = |p: &ModelParams| -> Vec<(usize, usize)> {
        p.named().iter().map(|n| n.tensor.shape()).collect()
    };
    if shapes(&expected) != shapes(params) {
        return Err(Error::Config(format!(
            "parameters do not match the {} configuration",
            config.variant
        )));
    }
    Ok(())
}

fn build(
    tape: &mut Tape,
    batch: &[PostRecord],
    params: &ModelParams,
    config: &ModelConfig,
    capture_attention: bool,
) -> Result<Graph> {
    if batch.is_empty() {
        return Err(Error::Empty { op: "forward" });
    }
    let bound = bind(tape, params, config.heads)?;
    let mut trace = ForwardTrace::default();
    let mut posts = Vec::with_capacity(batch.len());
    let mut attention = Vec::new();
    let labels: Vec<usize> = batch.iter().map(|r| r.label).collect();

    for record in batch {
        record.validate(config.num_classes)?;
        trace.posts += 1;
        let patches = record.patches()?;
        let z_v = encode_image(tape, &patches, &bound.image_encoder, config.num_patches)?;
        let z_t = encode_text(
            tape,
            &record.text_tokens,
            &bound.text_encoder,
            false,
            config.text_len,
        )?;

        let (completed_image, completed_text) = match &bound.completion {
            Some((image_head, text_head)) => {
                trace.completion_calls += 1;
                let ocr = record.ocr_tokens.as_deref().unwrap_or(&[]);
                let z_o = encode_text(tape, ocr, &bound.text_encoder, true, config.text_len)?;
                (
                    complete_image(tape, z_o, z_v, image_head)?,
                    complete_text(tape, z_t, z_o, text_head)?,
                )
            }
            None => (z_v, z_t),
        };

        let (shared, private, discrepant) = match &bound.projectors {
            Some(p) => {
                trace.decomposition_calls += 1;
                let (s_v, p_v) =
                    decompose_normalized(tape, completed_image, p.shared_image, p.private_image)?;
                let (s_t, p_t) =
                    decompose_normalized(tape, completed_text, p.shared_text, p.private_text)?;
                let d = discrepant_sentiment(tape, p_t, p_v)?;
                (Some((s_v, s_t)), Some((p_v, p_t)), Some(d))
            }
            None => (None, None, None),
        };

        let fused =
            global_fusion_with_weights(tape, completed_image, completed_text, &bound.fusion)?;
        if capture_attention {
            let n = fused.weights.len() / 2;
            for (k, w) in fused.weights.iter().enumerate() {
                let dir = if k < n {
                    "image_to_text"
                } else {
                    "text_to_image"
                };
                attention.push((format!("post{}.fusion.{dir}.head{}", record.id, k % n), *w));
            }
        }
        let consistent = fused.output;
        let features = match discrepant {
            Some(d) => tape.concat_cols(&[consistent, d])?,
            None => consistent,
        };
        let logits = tape.matmul(features, bound.classifier)?;
        posts.push(PostVars {
            consistent,
            discrepant,
            logits,
            shared,
            private,
            completed_image,
            completed_text,
        });
    }

    let logit_rows: Vec<Var> = posts.iter().map(|p| p.logits).collect();
    let stacked = tape.concat_rows(&logit_rows)?;
    let cls = tape.cross_entropy(stacked, &labels)?;

    let exc = match &bound.projectors {
        Some(p) => Some(exclusive_loss(tape, p, config.sigma)?),
        None => None,
    };
    let con = if config.variant.uses_contrastive() {
        let s_v: Vec<Var> = posts.iter().filter_map(|p| p.shared.map(|s| s.0)).collect();
        let s_t: Vec<Var> = posts.iter().filter_map(|p| p.shared.map(|s| s.1)).collect();
        let s_v = tape.concat_rows(&s_v)?;
        let s_t = tape.concat_rows(&s_t)?;
        Some(soft_contrastive_loss(
            tape,
            s_v,
            s_t,
            &labels,
            &config.schema,
            &config.contrastive_options(),
        )?)
    } else {
        None
    };

    let mut total = cls;
    if let Some(e) = exc {
        total = tape.add(total, e)?;
    }
    if let Some(c) = con {
        total = tape.add(total, c)?;
    }
    Ok(Graph {
        bound,
        posts,
        cls,
        exc,
        con,
        total,
        trace,
        attention,
    })
}

fn collect(tape: &Tape, graph: &Graph, dim: usize) -> ForwardResult {
    let row = |v: Var| tape.value(v).data().to_vec();
    let outputs = graph
        .posts
        .iter()
        .map(|p| ModelOutputs {
            consistent: row(p.consistent),
            discrepant: p.discrepant.map_or_else(|| vec![0.0; dim], row),
            logits: row(p.logits),
            sub: match (p.shared, p.private) {
                (Some((s_v, s_t)), Some((p_v, p_t))) => Some(SubRepresentations {
                    shared_image: row(s_v),
                    shared_text: row(s_t),
                    private_image: row(p_v),
                    private_text: row(p_t),
                }),
                _ => None,
            },
            completed_image_shape: tape.shape(p.completed_image),
            completed_text_shape: tape.shape(p.completed_text),
        })
        .collect();
    let scalar = |v: Option<Var>| v.map_or(0.0, |v| tape.value(v).item());
    let cls = tape.value(graph.cls).item();
    let exc = scalar(graph.exc);
    let con = scalar(graph.con);
    ForwardResult {
        outputs,
        loss: LossReport {
            cls,
            exc,
            con,
            total: tape.value(graph.total).item(),
        },
        trace: graph.trace,
    }
}

fn new_tape() -> Tape {
    Tape::new().with_finite_checks(true)
}

pub fn forward(
    batch: &[PostRecord],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<ForwardResult> {
    check_params(params, config)?;
    let mut tape = new_tape();
    let graph = build(&mut tape, batch, params, config, false)?;
    Ok(collect(&tape, &graph, config.dim))
}

/// Forward pass plus gradients of the total loss, one per parameter tensor in
/// documented order.
pub fn forward_backward(
    batch: &[PostRecord],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<(ForwardResult, Vec<Tensor>)> {
    check_params(params, config)?;
    let mut tape = new_tape();
    let graph = build(&mut tape, batch, params, config, false)?;
    let mut grads = tape.backward(graph.total)?;
    let result = collect(&tape, &graph, config.dim);
    let grads = graph
        .bound
        .leaves
        .iter()
        .map(|v| {
            grads
                .take(*v)
                .expect("trainable leaves always receive a gradient")
        })
        .collect();
    Ok((result, grads))
}

/// Total loss only.
pub fn loss_value(batch: &[PostRecord], params: &ModelParams, config: &ModelConfig) -> Result<f64> {
    let mut tape = new_tape();
    let graph = build(&mut tape, batch, params, config, false)?;
    Ok(tape.value(graph.total).item())
}

/// Softmax weights of the global fusion attention for each post, keyed
/// `post<id>.fusion.<direction>.head<k>`.
pub fn attention_maps(
    batch: &[PostRecord],
    params: &ModelParams,
    config: &ModelConfig,
) -> Result<Vec<(String, Tensor)>> {
    check_params(params, config)?;
    let mut tape = new_tape();
    let graph = build(&mut tape, batch, params, config, true)?;
    Ok(graph
        .attention
        .iter()
        .map(|(name, v)| (name.clone(), tape.value(*v).clone()))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_dataset, GeneratorSpec};

    fn config(variant: Variant) -> ModelConfig {
        ModelConfig::new(CategorySchema::mvsa(), variant, 7)
    }

    fn batch(n: usize, seed: u64) -> Vec<PostRecord> {
        generate_dataset(&GeneratorSpec::new(CategorySchema::mvsa(), n, seed))
            .unwrap()
            .0
    }

    #[test]
    fn init_is_deterministic() {
        let c = config(Variant::Full);
        assert_eq!(
            ModelParams::init(&c, 3).unwrap(),
            ModelParams::init(&c, 3).unwrap()
        );
        assert_ne!(
            ModelParams::init(&c, 3).unwrap(),
            ModelParams::init(&c, 4).unwrap()
        );
    }

    #[test]
    fn parameter_count_closed_form() {
        let c = config(Variant::Full);
        let (i, l, f, p, v, k) = (16, 16, 32, 8, 256, 3);
        let head = 3 * f * f;
        let expected = (p * f + head) // image encoder
            + (v * f + head) // text encoder
            + (head + i * (i + l)) // image completion
            + head // text completion
            + 4 * f * f // decomposition
            + head // fusion
            + 2 * f * k; // classifier
        assert_eq!(expected, 28_608);
        assert_eq!(ModelParams::init(&c, 0).unwrap().count(), expected);

        let no_sde = ModelParams::init(&config(Variant::NoSde), 0).unwrap();
        assert_eq!(no_sde.count(), expected - 4 * f * f - f * k);
        assert_eq!(no_sde.classifier.shape(), (f, k));
    }

    #[test]
    fn shared_components_match_across_variants() {
        let full = ModelParams::init(&config(Variant::Full), 5).unwrap();
        let base = ModelParams::init(&config(Variant::NoScoSde), 5).unwrap();
        assert_eq!(full.fusion, base.fusion);
        assert_eq!(full.text_encoder, base.text_encoder);
        assert!(base.completion.is_none() && base.decomposition.is_none());
    }

    #[test]
    fn groups_are_total_and_disjoint() {
        let p = ModelParams::init(&config(Variant::Full), 0).unwrap();
        let named = p.named();
        assert_eq!(named.len(), p.clone().tensors_mut().len());
        let count = |g| named.iter().filter(|n| n.group == g).count();
        assert_eq!(count(ParamGroup::ImageEncoder), 4);
        assert_eq!(count(ParamGroup::TextEncoder), 4);
        assert_eq!(count(ParamGroup::Classifier), 1);
        assert_eq!(count(ParamGroup::Other), named.len() - 9);
    }

    #[test]
    fn tensors_round_trip() {
        let c = config(Variant::NoSco);
        let p = ModelParams::init(&c, 1).unwrap();
        let back = ModelParams::from_tensors(&c, p.to_tensors()).unwrap();
        assert_eq!(p, back);
        let mut short = p.to_tensors();
        short.pop();
        assert!(ModelParams::from_tensors(&c, short).is_err());
    }

    #[test]
    fn default_shapes() {
        let c = config(Variant::Full);
        let p = ModelParams::init(&c, 0).unwrap();
        let r = forward(&batch(2, 1), &p, &c).unwrap();
        for o in &r.outputs {
            assert_eq!(o.logits.len(), 3);
            assert_eq!(o.consistent.len(), 32);
            assert_eq!(o.discrepant.len(), 32);
            assert_eq!(o.completed_image_shape, (16, 32));
            assert_eq!(o.completed_text_shape, (32, 32));
        }
    }

    #[test]
    fn loss_terms_sum_to_total() {
        let c = config(Variant::Full);
        let p = ModelParams::init(&c, 0).unwrap();
        let r = forward(&batch(4, 2), &p, &c).unwrap();
        let l = &r.loss;
        assert_eq!(l.total, l.cls + l.exc + l.con);
        assert!(l.total.is_finite() && l.total > 0.0);
        assert!(l.exc >= 0.0 && l.con >= 0.0 && l.total >= l.cls);
    }

    #[test]
    fn dropping_a_term_changes_total_by_that_term() {
        let b = batch(4, 3);
        let full_cfg = config(Variant::Full);
        let p = ModelParams::init(&full_cfg, 0).unwrap();
        let full = forward(&b, &p, &full_cfg).unwrap().loss;
        let soft_cfg = config(Variant::NoSoftcl);
        let soft = forward(&b, &p, &soft_cfg).unwrap().loss;
        assert_eq!(soft.con, 0.0);
        assert_eq!(soft.cls, full.cls);
        assert_eq!(soft.exc, full.exc);
        assert_eq!(full.total, soft.total + full.con);
    }

    #[test]
    fn baseline_variant_skips_completion_and_decomposition() {
        let b = batch(3, 4);
        let c = config(Variant::NoScoSde);
        let p = ModelParams::init(&c, 0).unwrap();
        let r = forward(&b, &p, &c).unwrap();
        assert_eq!(r.trace.posts, 3);
        assert_eq!(r.trace.completion_calls, 0);
        assert_eq!(r.trace.decomposition_calls, 0);
        assert_eq!((r.loss.exc, r.loss.con), (0.0, 0.0));
        assert_eq!(r.loss.total, r.loss.cls);
        assert!(r
            .outputs
            .iter()
            .all(|o| o.discrepant.iter().all(|v| *v == 0.0)));
        assert!(r.outputs.iter().all(|o| o.completed_text_shape == (16, 32)));

        let full = config(Variant::Full);
        let fp = ModelParams::init(&full, 0).unwrap();
        let r = forward(&b, &fp, &full).unwrap();
        assert_eq!(
            (r.trace.completion_calls, r.trace.decomposition_calls),
            (3, 3)
        );
    }

    #[test]
    fn no_sde_uses_consistent_only_and_cls_loss() {
        let c = config(Variant::NoSde);
        let p = ModelParams::init(&c, 0).unwrap();
        let r = forward(&batch(2, 5), &p, &c).unwrap();
        assert_eq!(r.loss.total, r.loss.cls);
        assert_eq!(r.trace.decomposition_calls, 0);
        assert_eq!(r.trace.completion_calls, 2);
    }

    #[test]
    fn identical_private_parts_give_zero_discrepancy() {
        // zero private projectors make p_t = p_v = 0
        let c = config(Variant::Full);
        let mut p = ModelParams::init(&c, 0).unwrap();
        let d = p.decomposition.as_mut().unwrap();
        d.private_image = Tensor::zeros(32, 32);
        d.private_text = Tensor::zeros(32, 32);
        let b = batch(2, 6);
        let r = forward(&b, &p, &c).unwrap();
        for o in &r.outputs {
            assert!(o.discrepant.iter().all(|v| *v == 0.0));
            let expected: Vec<f64> = (0..3)
                .map(|k| {
                    (0..32)
                        .map(|j| o.consistent[j] * p.classifier.get(j, k))
                        .sum()
                })
                .collect();
            for (a, e) in o.logits.iter().zip(&expected) {
                assert!((a - e).abs() < 1e-15);
            }
        }
        // the D rows of P_cls receive no gradient
        let (_, grads) = forward_backward(&b, &p, &c).unwrap();
        let g = grads.last().unwrap();
        assert!((32..64).all(|r| g.row(r).iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn label_out_of_range_is_rejected() {
        let c = config(Variant::Full);
        let p = ModelParams::init(&c, 0).unwrap();
        let mut b = batch(2, 7);
        b[1].label = 3;
        assert!(matches!(forward(&b, &p, &c), Err(Error::Record { .. })));
        assert!(forward(&[], &p, &c).is_err());
    }

    #[test]
    fn mismatched_params_rejected() {
        let p = ModelParams::init(&config(Variant::NoSde), 0).unwrap();
        assert!(forward(&batch(1, 0), &p, &config(Variant::Full)).is_err());
    }

    #[test]
    fn encoders_receive_gradient() {
        let c = config(Variant::Full);
        let p = ModelParams::init(&c, 0).unwrap();
        let (_, grads) = forward_backward(&batch(4, 8), &p, &c).unwrap();
        assert!(grads[0].norm() > 0.0, "patch projection");
        assert!(grads[4].norm() > 0.0, "token embedding");
        assert!(grads.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn predict_examples() {
        assert_eq!(predict(&[0.1, 0.9, 0.3]), 1);
        assert_eq!(predict(&[0.5, 0.5, 0.5]), 0);
        assert_eq!(predict(&[0.1 + 7.0, 0.9 + 7.0, 0.3 + 7.0]), 1);
        assert_eq!(predict(&[0.2, 1.8, 0.6]), 1);
    }

    #[test]
    fn attention_maps_are_row_stochastic() {
        let c = config(Variant::Full);
        let p = ModelParams::init(&c, 0).unwrap();
        let maps = attention_maps(&batch(1, 9), &p, &c).unwrap();
        assert_eq!(maps.len(), 2);
        assert_eq!(maps[0].1.shape(), (16, 32));
        assert_eq!(maps[1].1.shape(), (32, 16));
        for (_, m) in &maps {
            for r in 0..m.rows() {
                assert!((m.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}

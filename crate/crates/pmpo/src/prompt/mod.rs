//! Multi-prompt parameters, depth partitioning, cross-modal bridges,
//! partitioned visual forward, ensembling, and prediction.

mod persist;

pub use persist::{artifact_from_checkpoint, artifact_to_checkpoint, TunedArtifact};

use crate::autodiff::{Precision, Tape, Tensor, Var};
use crate::clip::{
    embed_token_rows, text_forward_rows, transformer_layer, vision_embed, Backbone, Dims,
    StagedText, StagedVision, Tokenizer, START_ID,
};
use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::rng::{normal_tensor, seeded};

const INIT_SIGMA: f64 = 0.02;

/// N learnable context-token sequences plus an optional manual template.
#[derive(Debug, Clone, PartialEq)]
pub struct PromptSet {
    /// Per prompt: `[ctx_len, d_text]`.
    pub ctx: Vec<Tensor>,
    pub manual: Option<String>,
}

impl PromptSet {
    /// Independent normal draws per prompt.
    pub fn init(n: usize, ctx_len: usize, d_text: usize, manual: Option<String>, seed: u64) -> Result<Self> {
        Self::build(n, ctx_len, d_text, manual, seed, false)
    }

    /// Every prompt starts from the same draw (the degenerate setup the
    /// symmetry analysis exercises).
    pub fn init_shared(n: usize, ctx_len: usize, d_text: usize, manual: Option<String>, seed: u64) -> Result<Self> {
        Self::build(n, ctx_len, d_text, manual, seed, true)
    }

    fn build(n: usize, ctx_len: usize, d_text: usize, manual: Option<String>, seed: u64, shared: bool) -> Result<Self> {
        if n < 1 {
            return Err(Error::Config("prompt count must be >= 1".into()));
        }
        if let Some(t) = &manual {
            if !t.contains("{}") {
                return Err(Error::Config(format!(
                    "manual template {t:?} lacks a {{}} placeholder"
                )));
            }
        }
        let mut rng = seeded(seed, "prompt-init");
        let first = normal_tensor(&mut rng, vec![ctx_len, d_text], INIT_SIGMA);
        let ctx = (0..n)
            .map(|i| {
                if shared || i == 0 {
                    first.clone()
                } else {
                    normal_tensor(&mut rng, vec![ctx_len, d_text], INIT_SIGMA)
                }
            })
            .collect();
        Ok(Self { ctx, manual })
    }

    pub fn n(&self) -> usize {
        self.ctx.len()
    }

    pub fn ctx_len(&self) -> usize {
        self.ctx[0].shape()[0]
    }

    pub fn d_text(&self) -> usize {
        self.ctx[0].shape()[1]
    }

    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.ctx
            .iter()
            .map(|t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.leaf(t.clone())
                }
            })
            .collect()
    }
}

/// Contiguous layer blocks: earliest layers to prompt 0; when N does not
/// divide D the first D mod N prompts take the larger blocks.
pub fn assign_partition(depth: usize, n: usize) -> Result<Vec<usize>> {
    if n < 1 || n > depth {
        return Err(Error::Config(format!(
            "cannot partition {depth} layers over {n} prompts"
        )));
    }
    let small = depth / n;
    let remainder = depth % n;
    let mut out = Vec::with_capacity(depth);
    for prompt in 0..n {
        let block = small + usize::from(prompt < remainder);
        out.extend(std::iter::repeat(prompt).take(block));
    }
    Ok(out)
}

/// Per-layer affine bridge from text space to visual space.
#[derive(Debug, Clone, PartialEq)]
pub struct Bridge {
    pub w: Tensor,
    pub b: Tensor,
}

/// Layer-to-prompt assignment plus the per-layer bridges.
#[derive(Debug, Clone, PartialEq)]
pub struct PartitionMap {
    /// Number of visual layers receiving injection; 0 disables it.
    pub depth: usize,
    /// `assignment[i]` names the prompt injected at layer i.
    pub assignment: Vec<usize>,
    pub bridges: Vec<Bridge>,
    pub bias_enabled: bool,
}

impl PartitionMap {
    pub fn empty() -> Self {
        Self {
            depth: 0,
            assignment: Vec::new(),
            bridges: Vec::new(),
            bias_enabled: false,
        }
    }

    pub fn init(depth: usize, n: usize, d_text: usize, d_vis: usize, bias_enabled: bool, seed: u64) -> Result<Self> {
        if depth == 0 {
            return Ok(Self::empty());
        }
        let assignment = assign_partition(depth, n)?;
        let mut rng = seeded(seed, "bridge-init");
        let bridges = (0..depth)
            .map(|_| Bridge {
                w: normal_tensor(&mut rng, vec![d_text, d_vis], INIT_SIGMA),
                b: Tensor::zeros(vec![d_vis]),
            })
            .collect();
        Ok(Self {
            depth,
            assignment,
            bridges,
            bias_enabled,
        })
    }

    /// Stage bridges on a tape. Biases stage as constants when disabled so
    /// they receive no gradient and stay zero.
    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> StagedBridges {
        let mut w = Vec::with_capacity(self.depth);
        let mut b = Vec::with_capacity(self.depth);
        for bridge in &self.bridges {
            w.push(if trainable {
                tape.param(bridge.w.clone())
            } else {
                tape.leaf(bridge.w.clone())
            });
            b.push(if trainable && self.bias_enabled {
                tape.param(bridge.b.clone())
            } else {
                tape.leaf(bridge.b.clone())
            });
        }
        StagedBridges { w, b }
    }
}

#[derive(Debug, Clone)]
pub struct StagedBridges {
    pub w: Vec<Var>,
    pub b: Vec<Var>,
}

/// V_i = ctx[assignment[i]] * W_i + b_i, token-wise, one per layer.
pub fn project_visual_prompts(
    tape: &mut Tape,
    ctx: &[Var],
    assignment: &[usize],
    bridges: &StagedBridges,
) -> Result<Vec<Var>> {
    if assignment.len() != bridges.w.len() {
        return Err(Error::Dimension(format!(
            "assignment covers {} layers but {} bridges staged",
            assignment.len(),
            bridges.w.len()
        )));
    }
    let mut out = Vec::with_capacity(assignment.len());
    for (i, &prompt) in assignment.iter().enumerate() {
        let p = *ctx.get(prompt).ok_or_else(|| {
            Error::Config(format!("assignment names prompt {prompt}, have {}", ctx.len()))
        })?;
        let v = tape.matmul(p, bridges.w[i])?;
        let v = tape.add_row(v, bridges.b[i])?;
        out.push(v);
    }
    Ok(out)
}

/// Vision encoder with per-layer prompt injection.
///
/// For layer i < depth the input is `[cls, V_i, patches]` per image; the
/// prompt slots of the layer output are discarded before the next layer.
/// Layers beyond depth run on `[cls, patches]` alone. Returns the pooled
/// joint vectors and the final `[B*(1+m), d_vis]` token states.
pub fn vision_forward_partitioned_rows(
    tape: &mut Tape,
    sv: &StagedVision,
    dims: &Dims,
    images: &[&Image],
    vlist: &[Var],
) -> Result<(Var, Var)> {
    let b = images.len();
    let m = dims.patches();
    let depth = vlist.len();
    if depth > sv.layers.len() {
        return Err(Error::Config(format!(
            "injection depth {depth} exceeds {} visual layers",
            sv.layers.len()
        )));
    }
    let mut m_vis = 0;
    for (i, &v) in vlist.iter().enumerate() {
        let t = tape.value(v);
        if t.rank() != 2 || t.cols() != dims.d_vis {
            return Err(Error::Dimension(format!(
                "injected prompt {i} has shape {:?}, want [*, {}]",
                t.shape(),
                dims.d_vis
            )));
        }
        if i == 0 {
            m_vis = t.rows();
        } else if t.rows() != m_vis {
            return Err(Error::Dimension(
                "injected prompts must share a token count".into(),
            ));
        }
    }

    // carry holds [cls, patches] rows per image: [B*(1+m), d_vis].
    let mut carry = vision_embed(tape, sv, dims, images)?;
    for (i, lw) in sv.layers.iter().enumerate() {
        if i < depth && m_vis > 0 {
            let mut parts = Vec::with_capacity(3 * b);
            for bi in 0..b {
                let base = bi * (1 + m);
                parts.push(tape.take_rows(carry, &[base])?);
                parts.push(vlist[i]);
                let patch_idx: Vec<usize> = (base + 1..base + 1 + m).collect();
                parts.push(tape.take_rows(carry, &patch_idx)?);
            }
            let x = tape.concat_rows(&parts)?;
            let y = transformer_layer(tape, x, lw, dims.heads, b)?;
            let keep: Vec<usize> = (0..b)
                .flat_map(|bi| {
                    let base = bi * (1 + m_vis + m);
                    std::iter::once(base).chain(base + 1 + m_vis..base + 1 + m_vis + m)
                })
                .collect();
            carry = tape.take_rows(y, &keep)?;
        } else {
            carry = transformer_layer(tape, carry, lw, dims.heads, b)?;
        }
    }
    let cls_idx: Vec<usize> = (0..b).map(|bi| bi * (1 + m)).collect();
    let pooled = tape.take_rows(carry, &cls_idx)?;
    let pooled = tape.layernorm(pooled, sv.lnf_g, sv.lnf_b)?;
    let joint = tape.matmul(pooled, sv.proj)?;
    Ok((joint, carry))
}

pub fn vision_forward_partitioned(
    tape: &mut Tape,
    sv: &StagedVision,
    dims: &Dims,
    images: &[&Image],
    vlist: &[Var],
) -> Result<Var> {
    Ok(vision_forward_partitioned_rows(tape, sv, dims, images, vlist)?.0)
}

/// Class embeddings for one prompt: each class becomes the sequence
/// `[start, ctx tokens, class tokens, end, pads]`, is encoded, pooled at
/// the end token, and L2-normalized. Returns `[K, d_joint]`.
pub fn encode_class_embeddings(
    tape: &mut Tape,
    st: &StagedText,
    dims: &Dims,
    tokenizer: &Tokenizer,
    ctx: Var,
    classes: &[String],
) -> Result<Var> {
    let m = tape.value(ctx).rows();
    let l = dims.l_max;
    let mut parts = Vec::with_capacity(3 * classes.len());
    let mut ends = Vec::with_capacity(classes.len());
    for class in classes {
        let seq = tokenizer.tokenize(class)?;
        if m + seq.end_index + 1 > l {
            return Err(Error::Tokenize(format!(
                "{class:?} with {m} context tokens overflows length {l}"
            )));
        }
        parts.push(tape.take_rows(st.table, &[START_ID as usize])?);
        parts.push(ctx);
        // Words, end marker, then pads, truncated so the row count stays l.
        let rest: Vec<usize> = seq.ids[1..l - m].iter().map(|&id| id as usize).collect();
        parts.push(tape.take_rows(st.table, &rest)?);
        ends.push(seq.end_index + m);
    }
    let rows = tape.concat_rows(&parts)?;
    let out = text_forward_rows(tape, st, dims, rows, &ends)?;
    tape.l2_normalize_rows(out)
}

/// Class embeddings from a fixed template, no learnable tokens.
pub fn manual_embeddings(
    tape: &mut Tape,
    st: &StagedText,
    dims: &Dims,
    tokenizer: &Tokenizer,
    template: &str,
    classes: &[String],
) -> Result<Var> {
    if !template.contains("{}") {
        return Err(Error::Config(format!(
            "template {template:?} lacks a {{}} placeholder"
        )));
    }
    let seqs: Vec<_> = classes
        .iter()
        .map(|c| tokenizer.tokenize(&template.replace("{}", c)))
        .collect::<Result<_>>()?;
    let ends: Vec<usize> = seqs.iter().map(|s| s.end_index).collect();
    let rows = embed_token_rows(tape, st, &seqs)?;
    let out = text_forward_rows(tape, st, dims, rows, &ends)?;
    tape.l2_normalize_rows(out)
}

/// Mean of unit-norm per-source rows, re-normalized per class.
pub fn ensemble(tape: &mut Tape, sources: &[Var]) -> Result<Var> {
    if sources.is_empty() {
        return Err(Error::Config("ensemble needs at least one source".into()));
    }
    let sum = tape.sum_terms(sources)?;
    let mean = tape.scale(sum, 1.0 / sources.len() as f64)?;
    tape.l2_normalize_rows(mean)
}

/// Cosine scores against the ensemble, sharpened and softmaxed: `[B, K]`.
pub fn cosine_probs(tape: &mut Tape, img: Var, class_rows: Var, logit_scale: f64) -> Result<Var> {
    let imn = tape.l2_normalize_rows(img)?;
    let cls_t = tape.transpose(class_rows)?;
    let cos = tape.matmul(imn, cls_t)?;
    let logits = tape.scale(cos, logit_scale)?;
    tape.softmax_rows(logits)
}

/// Trainable-parameter total under the documented counting convention.
pub fn param_count(n: usize, ctx_len: usize, d_text: usize, d_vis: usize, depth: usize, bias: bool) -> u64 {
    let contexts = (n * ctx_len * d_text) as u64;
    let weights = (depth * d_text * d_vis) as u64;
    let biases = if bias { (depth * d_vis) as u64 } else { 0 };
    contexts + weights + biases
}

/// Everything `predict` needs staged on one tape.
struct PredictGraph {
    class_rows: Var,
    vlist: Vec<Var>,
}

fn build_predict_graph(
    tape: &mut Tape,
    backbone: &Backbone,
    staged_text: &StagedText,
    prompts: &PromptSet,
    partition: &PartitionMap,
    manual_in_ensemble: bool,
    classes: &[String],
) -> Result<PredictGraph> {
    let ctx = prompts.stage(tape, false);
    let bridges = partition.stage(tape, false);
    let vlist = project_visual_prompts(tape, &ctx, &partition.assignment, &bridges)?;
    let mut sources = Vec::with_capacity(prompts.n() + 1);
    for &c in &ctx {
        sources.push(encode_class_embeddings(
            tape,
            staged_text,
            &backbone.dims,
            &backbone.tokenizer,
            c,
            classes,
        )?);
    }
    if manual_in_ensemble {
        let template = prompts.manual.as_deref().ok_or_else(|| {
            Error::Config("manual ensembling requested but no template set".into())
        })?;
        sources.push(manual_embeddings(
            tape,
            staged_text,
            &backbone.dims,
            &backbone.tokenizer,
            template,
            classes,
        )?);
    }
    let class_rows = ensemble(tape, &sources)?;
    Ok(PredictGraph { class_rows, vlist })
}

/// Class probabilities for a batch of images: `[B, K]`, rows sum to 1.
pub fn predict_probs(
    backbone: &Backbone,
    prompts: &PromptSet,
    partition: &PartitionMap,
    manual_in_ensemble: bool,
    classes: &[String],
    images: &[&Image],
) -> Result<Tensor> {
    predict_probs_at(
        backbone,
        prompts,
        partition,
        manual_in_ensemble,
        classes,
        images,
        Precision::Standard,
    )
}

/// `predict_probs` with an explicit numeric mode; the high-precision path
/// exists for equivalence analyses that compare at 1e-12.
#[allow(clippy::too_many_arguments)]
pub fn predict_probs_at(
    backbone: &Backbone,
    prompts: &PromptSet,
    partition: &PartitionMap,
    manual_in_ensemble: bool,
    classes: &[String],
    images: &[&Image],
    precision: Precision,
) -> Result<Tensor> {
    if classes.len() < 2 {
        return Err(Error::Config("prediction needs at least 2 classes".into()));
    }
    let mut tape = Tape::new(precision);
    let staged = backbone.stage(&mut tape, false);
    let graph = build_predict_graph(
        &mut tape,
        backbone,
        &staged.text,
        prompts,
        partition,
        manual_in_ensemble,
        classes,
    )?;
    let img = vision_forward_partitioned(&mut tape, &staged.vision, &backbone.dims, images, &graph.vlist)?;
    let probs = cosine_probs(&mut tape, img, graph.class_rows, backbone.logit_scale())?;
    Ok(tape.value(probs).clone())
}

/// Template-only classification; no learnable parameters involved.
pub fn zero_shot_probs(
    backbone: &Backbone,
    template: &str,
    classes: &[String],
    images: &[&Image],
) -> Result<Tensor> {
    zero_shot_probs_at(backbone, template, classes, images, Precision::Standard)
}

pub fn zero_shot_probs_at(
    backbone: &Backbone,
    template: &str,
    classes: &[String],
    images: &[&Image],
    precision: Precision,
) -> Result<Tensor> {
    if classes.len() < 2 {
        return Err(Error::Config("prediction needs at least 2 classes".into()));
    }
    let mut tape = Tape::new(precision);
    let staged = backbone.stage(&mut tape, false);
    let class_rows = manual_embeddings(
        &mut tape,
        &staged.text,
        &backbone.dims,
        &backbone.tokenizer,
        template,
        classes,
    )?;
    let img = vision_forward_plain(&mut tape, &staged.vision, &backbone.dims, images)?;
    let probs = cosine_probs(&mut tape, img, class_rows, backbone.logit_scale())?;
    Ok(tape.value(probs).clone())
}

use crate::clip::vision_forward_plain;

/// Patch-grid heat map: cosine between one prompt's class embedding and
/// each final-layer patch state projected to the joint space, min-max
/// normalized to [0,1]. Constant maps collapse to all-zero.
pub fn similarity_map(
    backbone: &Backbone,
    prompts: &PromptSet,
    partition: &PartitionMap,
    classes: &[String],
    image: &Image,
    prompt_index: usize,
    class_index: usize,
) -> Result<Vec<f64>> {
    if prompt_index >= prompts.n() {
        return Err(Error::Config(format!(
            "prompt index {prompt_index} out of range for {} prompts",
            prompts.n()
        )));
    }
    if class_index >= classes.len() {
        return Err(Error::Config(format!(
            "class index {class_index} out of range for {} classes",
            classes.len()
        )));
    }
    let dims = &backbone.dims;
    let m = dims.patches();
    let mut tape = Tape::new(Precision::Standard);
    let staged = backbone.stage(&mut tape, false);
    let ctx = prompts.stage(&mut tape, false);
    let bridges = partition.stage(&mut tape, false);
    let vlist = project_visual_prompts(&mut tape, &ctx, &partition.assignment, &bridges)?;
    let class_rows = encode_class_embeddings(
        &mut tape,
        &staged.text,
        dims,
        &backbone.tokenizer,
        ctx[prompt_index],
        classes,
    )?;
    let (_, rows) =
        vision_forward_partitioned_rows(&mut tape, &staged.vision, dims, &[image], &vlist)?;
    let patch_idx: Vec<usize> = (1..=m).collect();
    let patches = tape.take_rows(rows, &patch_idx)?;
    let patches = tape.layernorm(patches, staged.vision.lnf_g, staged.vision.lnf_b)?;
    let patches = tape.matmul(patches, staged.vision.proj)?;
    let patches = tape.l2_normalize_rows(patches)?;
    let class_row = tape.take_rows(class_rows, &[class_index])?;
    let class_col = tape.transpose(class_row)?;
    let cos = tape.matmul(patches, class_col)?;
    let values = tape.value(cos).data().to_vec();

    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return Ok(vec![0.0; m]);
    }
    Ok(values.iter().map(|v| (v - lo) / (hi - lo)).collect())
}

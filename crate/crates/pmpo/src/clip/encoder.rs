//! Transformer encoders over the joint embedding space.
//!
//! Both encoders are pre-norm transformers; text pools at the end token,
//! vision at the class token. Batches are folded into the row axis as
//! `[batch * seq_len, width]` and attention unfolds them by sequence count.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::dataset::Image;
use crate::error::{Error, Result};
use crate::rng::{normal_tensor, seeded, xavier_tensor};

use super::tokenizer::{TokenSeq, Tokenizer};

const EMBED_SIGMA: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_text: usize,
    pub d_vis: usize,
    pub d_joint: usize,
    pub heads: usize,
    pub text_layers: usize,
    pub vis_layers: usize,
    pub image_side: usize,
    pub patch_side: usize,
    pub l_max: usize,
    pub ffn_mult: usize,
}

impl Dims {
    /// Desk-scale defaults sized for single-core minutes.
    pub fn desk() -> Self {
        Self {
            d_text: 32,
            d_vis: 48,
            d_joint: 32,
            heads: 4,
            text_layers: 4,
            vis_layers: 12,
            image_side: 32,
            patch_side: 8,
            l_max: 16,
            ffn_mult: 4,
        }
    }

    /// Tiny configuration for finite-difference checks.
    pub fn miniature() -> Self {
        Self {
            d_text: 8,
            d_vis: 12,
            d_joint: 8,
            heads: 2,
            text_layers: 2,
            vis_layers: 3,
            image_side: 16,
            patch_side: 8,
            l_max: 8,
            ffn_mult: 2,
        }
    }

    /// Patch count m per image.
    pub fn patches(&self) -> usize {
        let g = self.image_side / self.patch_side;
        g * g
    }

    pub fn patch_pixels(&self) -> usize {
        self.patch_side * self.patch_side * 3
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("d_text", self.d_text),
            ("d_vis", self.d_vis),
            ("d_joint", self.d_joint),
            ("heads", self.heads),
            ("text_layers", self.text_layers),
            ("vis_layers", self.vis_layers),
            ("image_side", self.image_side),
            ("patch_side", self.patch_side),
            ("ffn_mult", self.ffn_mult),
        ];
        for (name, v) in named {
            if v == 0 {
                return Err(Error::Config(format!("dims.{name} must be positive")));
            }
        }
        if self.d_text % self.heads != 0 || self.d_vis % self.heads != 0 {
            return Err(Error::Config(
                "dims.heads must divide d_text and d_vis".into(),
            ));
        }
        if self.image_side % self.patch_side != 0 {
            return Err(Error::Config(
                "dims.patch_side must divide image_side".into(),
            ));
        }
        if self.l_max < 3 {
            return Err(Error::Config("dims.l_max must be at least 3".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
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

fn ones(d: usize) -> Tensor {
    Tensor::new(vec![d], vec![1.0; d]).expect("ones")
}

impl LayerWeights {
    fn init(rng: &mut ChaCha8Rng, d: usize, ffn_mult: usize) -> Self {
        let h = d * ffn_mult;
        Self {
            ln1_g: ones(d),
            ln1_b: Tensor::zeros(vec![d]),
            wq: xavier_tensor(rng, d, d),
            bq: Tensor::zeros(vec![d]),
            wk: xavier_tensor(rng, d, d),
            bk: Tensor::zeros(vec![d]),
            wv: xavier_tensor(rng, d, d),
            bv: Tensor::zeros(vec![d]),
            wo: xavier_tensor(rng, d, d),
            bo: Tensor::zeros(vec![d]),
            ln2_g: ones(d),
            ln2_b: Tensor::zeros(vec![d]),
            w1: xavier_tensor(rng, d, h),
            b1: Tensor::zeros(vec![h]),
            w2: xavier_tensor(rng, h, d),
            b2: Tensor::zeros(vec![d]),
        }
    }

    /// Field walk in the canonical (name, tensor) order shared by
    /// persistence and staging.
    fn entries(&self) -> [(&'static str, &Tensor); 16] {
        [
            ("ln1.g", &self.ln1_g),
            ("ln1.b", &self.ln1_b),
            ("attn.wq", &self.wq),
            ("attn.bq", &self.bq),
            ("attn.wk", &self.wk),
            ("attn.bk", &self.bk),
            ("attn.wv", &self.wv),
            ("attn.bv", &self.bv),
            ("attn.wo", &self.wo),
            ("attn.bo", &self.bo),
            ("ln2.g", &self.ln2_g),
            ("ln2.b", &self.ln2_b),
            ("ffn.w1", &self.w1),
            ("ffn.b1", &self.b1),
            ("ffn.w2", &self.w2),
            ("ffn.b2", &self.b2),
        ]
    }

    fn entries_mut(&mut self) -> [(&'static str, &mut Tensor); 16] {
        [
            ("ln1.g", &mut self.ln1_g),
            ("ln1.b", &mut self.ln1_b),
            ("attn.wq", &mut self.wq),
            ("attn.bq", &mut self.bq),
            ("attn.wk", &mut self.wk),
            ("attn.bk", &mut self.bk),
            ("attn.wv", &mut self.wv),
            ("attn.bv", &mut self.bv),
            ("attn.wo", &mut self.wo),
            ("attn.bo", &mut self.bo),
            ("ln2.g", &mut self.ln2_g),
            ("ln2.b", &mut self.ln2_b),
            ("ffn.w1", &mut self.w1),
            ("ffn.b1", &mut self.b1),
            ("ffn.w2", &mut self.w2),
            ("ffn.b2", &mut self.b2),
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextWeights {
    pub table: Tensor,
    pub pos: Tensor,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub proj: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VisionWeights {
    pub patch_w: Tensor,
    pub patch_b: Tensor,
    pub cls: Tensor,
    pub pos: Tensor,
    pub layers: Vec<LayerWeights>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub proj: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub dims: Dims,
    pub tokenizer: Tokenizer,
    pub text: TextWeights,
    pub vision: VisionWeights,
    /// Stored as ln(1/temperature); see [`Backbone::logit_scale`].
    pub log_temp: Tensor,
}

impl Backbone {
    pub fn init(dims: Dims, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        dims.validate()?;
        if tokenizer.l_max() != dims.l_max {
            return Err(Error::Config(format!(
                "tokenizer l_max {} disagrees with dims.l_max {}",
                tokenizer.l_max(),
                dims.l_max
            )));
        }
        let mut rng = seeded(seed, "backbone-init");
        let v = tokenizer.vocab_size();
        let text = TextWeights {
            table: normal_tensor(&mut rng, vec![v, dims.d_text], EMBED_SIGMA),
            pos: normal_tensor(&mut rng, vec![dims.l_max, dims.d_text], EMBED_SIGMA),
            layers: (0..dims.text_layers)
                .map(|_| LayerWeights::init(&mut rng, dims.d_text, dims.ffn_mult))
                .collect(),
            lnf_g: ones(dims.d_text),
            lnf_b: Tensor::zeros(vec![dims.d_text]),
            proj: xavier_tensor(&mut rng, dims.d_text, dims.d_joint),
        };
        let vision = VisionWeights {
            patch_w: xavier_tensor(&mut rng, dims.patch_pixels(), dims.d_vis),
            patch_b: Tensor::zeros(vec![dims.d_vis]),
            cls: normal_tensor(&mut rng, vec![1, dims.d_vis], EMBED_SIGMA),
            pos: normal_tensor(&mut rng, vec![1 + dims.patches(), dims.d_vis], EMBED_SIGMA),
            layers: (0..dims.vis_layers)
                .map(|_| LayerWeights::init(&mut rng, dims.d_vis, dims.ffn_mult))
                .collect(),
            lnf_g: ones(dims.d_vis),
            lnf_b: Tensor::zeros(vec![dims.d_vis]),
            proj: xavier_tensor(&mut rng, dims.d_vis, dims.d_joint),
        };
        // ln(1/0.07): the standard contrastive logit-scale initialization.
        let log_temp = Tensor::new(vec![1], vec![(1.0_f64 / 0.07).ln()])?;
        Ok(Self {
            dims,
            tokenizer,
            text,
            vision,
            log_temp,
        })
    }

    /// Multiplier applied to cosine similarities, i.e. 1/temperature.
    pub fn logit_scale(&self) -> f64 {
        self.log_temp.item().exp()
    }

    pub fn temperature(&self) -> f64 {
        (-self.log_temp.item()).exp()
    }

    /// All weights in canonical order; names double as checkpoint keys.
    pub fn weights(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.push(("text.table".to_string(), &self.text.table));
        out.push(("text.pos".to_string(), &self.text.pos));
        for (i, layer) in self.text.layers.iter().enumerate() {
            for (suffix, t) in layer.entries() {
                out.push((format!("text.layer{i:02}.{suffix}"), t));
            }
        }
        out.push(("text.lnf.g".to_string(), &self.text.lnf_g));
        out.push(("text.lnf.b".to_string(), &self.text.lnf_b));
        out.push(("text.proj".to_string(), &self.text.proj));
        out.push(("vision.patch.w".to_string(), &self.vision.patch_w));
        out.push(("vision.patch.b".to_string(), &self.vision.patch_b));
        out.push(("vision.cls".to_string(), &self.vision.cls));
        out.push(("vision.pos".to_string(), &self.vision.pos));
        for (i, layer) in self.vision.layers.iter().enumerate() {
            for (suffix, t) in layer.entries() {
                out.push((format!("vision.layer{i:02}.{suffix}"), t));
            }
        }
        out.push(("vision.lnf.g".to_string(), &self.vision.lnf_g));
        out.push(("vision.lnf.b".to_string(), &self.vision.lnf_b));
        out.push(("vision.proj".to_string(), &self.vision.proj));
        out.push(("temp.log".to_string(), &self.log_temp));
        out
    }

    pub fn weights_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("text.table".to_string(), &mut self.text.table));
        out.push(("text.pos".to_string(), &mut self.text.pos));
        for (i, layer) in self.text.layers.iter_mut().enumerate() {
            for (suffix, t) in layer.entries_mut() {
                out.push((format!("text.layer{i:02}.{suffix}"), t));
            }
        }
        out.push(("text.lnf.g".to_string(), &mut self.text.lnf_g));
        out.push(("text.lnf.b".to_string(), &mut self.text.lnf_b));
        out.push(("text.proj".to_string(), &mut self.text.proj));
        out.push(("vision.patch.w".to_string(), &mut self.vision.patch_w));
        out.push(("vision.patch.b".to_string(), &mut self.vision.patch_b));
        out.push(("vision.cls".to_string(), &mut self.vision.cls));
        out.push(("vision.pos".to_string(), &mut self.vision.pos));
        for (i, layer) in self.vision.layers.iter_mut().enumerate() {
            for (suffix, t) in layer.entries_mut() {
                out.push((format!("vision.layer{i:02}.{suffix}"), t));
            }
        }
        out.push(("vision.lnf.g".to_string(), &mut self.vision.lnf_g));
        out.push(("vision.lnf.b".to_string(), &mut self.vision.lnf_b));
        out.push(("vision.proj".to_string(), &mut self.vision.proj));
        out.push(("temp.log".to_string(), &mut self.log_temp));
        out
    }

    /// Put every weight on the tape; `trainable` decides param vs leaf.
    /// `flat` lines up with [`Backbone::weights`] for optimizer walks.
    pub fn stage(&self, tape: &mut Tape, trainable: bool) -> StagedBackbone {
        let mut flat = Vec::new();
        let put = |tape: &mut Tape, t: &Tensor, flat: &mut Vec<Var>| {
            let v = if trainable {
                tape.param(t.clone())
            } else {
                tape.leaf(t.clone())
            };
            flat.push(v);
            v
        };
        let stage_layer = |tape: &mut Tape, lw: &LayerWeights, flat: &mut Vec<Var>| StagedLayer {
            ln1_g: put(tape, &lw.ln1_g, flat),
            ln1_b: put(tape, &lw.ln1_b, flat),
            wq: put(tape, &lw.wq, flat),
            bq: put(tape, &lw.bq, flat),
            wk: put(tape, &lw.wk, flat),
            bk: put(tape, &lw.bk, flat),
            wv: put(tape, &lw.wv, flat),
            bv: put(tape, &lw.bv, flat),
            wo: put(tape, &lw.wo, flat),
            bo: put(tape, &lw.bo, flat),
            ln2_g: put(tape, &lw.ln2_g, flat),
            ln2_b: put(tape, &lw.ln2_b, flat),
            w1: put(tape, &lw.w1, flat),
            b1: put(tape, &lw.b1, flat),
            w2: put(tape, &lw.w2, flat),
            b2: put(tape, &lw.b2, flat),
        };
        let text = StagedText {
            table: put(tape, &self.text.table, &mut flat),
            pos: put(tape, &self.text.pos, &mut flat),
            layers: self
                .text
                .layers
                .iter()
                .map(|lw| stage_layer(tape, lw, &mut flat))
                .collect(),
            lnf_g: put(tape, &self.text.lnf_g, &mut flat),
            lnf_b: put(tape, &self.text.lnf_b, &mut flat),
            proj: put(tape, &self.text.proj, &mut flat),
        };
        let vision = StagedVision {
            patch_w: put(tape, &self.vision.patch_w, &mut flat),
            patch_b: put(tape, &self.vision.patch_b, &mut flat),
            cls: put(tape, &self.vision.cls, &mut flat),
            pos: put(tape, &self.vision.pos, &mut flat),
            layers: self
                .vision
                .layers
                .iter()
                .map(|lw| stage_layer(tape, lw, &mut flat))
                .collect(),
            lnf_g: put(tape, &self.vision.lnf_g, &mut flat),
            lnf_b: put(tape, &self.vision.lnf_b, &mut flat),
            proj: put(tape, &self.vision.proj, &mut flat),
        };
        let log_temp = put(tape, &self.log_temp, &mut flat);
        StagedBackbone {
            text,
            vision,
            log_temp,
            flat,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StagedLayer {
    pub ln1_g: Var,
    pub ln1_b: Var,
    pub wq: Var,
    pub bq: Var,
    pub wk: Var,
    pub bk: Var,
    pub wv: Var,
    pub bv: Var,
    pub wo: Var,
    pub bo: Var,
    pub ln2_g: Var,
    pub ln2_b: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

#[derive(Debug, Clone)]
pub struct StagedText {
    pub table: Var,
    pub pos: Var,
    pub layers: Vec<StagedLayer>,
    pub lnf_g: Var,
    pub lnf_b: Var,
    pub proj: Var,
}

#[derive(Debug, Clone)]
pub struct StagedVision {
    pub patch_w: Var,
    pub patch_b: Var,
    pub cls: Var,
    pub pos: Var,
    pub layers: Vec<StagedLayer>,
    pub lnf_g: Var,
    pub lnf_b: Var,
    pub proj: Var,
}

#[derive(Debug, Clone)]
pub struct StagedBackbone {
    pub text: StagedText,
    pub vision: StagedVision,
    pub log_temp: Var,
    pub flat: Vec<Var>,
}

/// One pre-norm block: `x += attn(ln1(x)); x += ffn(ln2(x))`.
pub fn transformer_layer(
    tape: &mut Tape,
    x: Var,
    lw: &StagedLayer,
    heads: usize,
    seqs: usize,
) -> Result<Var> {
    let ln1 = tape.layernorm(x, lw.ln1_g, lw.ln1_b)?;
    let q = tape.matmul(ln1, lw.wq)?;
    let q = tape.add_row(q, lw.bq)?;
    let k = tape.matmul(ln1, lw.wk)?;
    let k = tape.add_row(k, lw.bk)?;
    let v = tape.matmul(ln1, lw.wv)?;
    let v = tape.add_row(v, lw.bv)?;
    let att = tape.attention(q, k, v, heads, seqs)?;
    let o = tape.matmul(att, lw.wo)?;
    let o = tape.add_row(o, lw.bo)?;
    let x = tape.add(x, o)?;
    let ln2 = tape.layernorm(x, lw.ln2_g, lw.ln2_b)?;
    let h = tape.matmul(ln2, lw.w1)?;
    let h = tape.add_row(h, lw.b1)?;
    let h = tape.gelu(h)?;
    let f = tape.matmul(h, lw.w2)?;
    let f = tape.add_row(f, lw.b2)?;
    tape.add(x, f)
}

/// Look up token embeddings for a batch of sequences: `[B*l_max, d_text]`.
pub fn embed_token_rows(tape: &mut Tape, st: &StagedText, seqs: &[TokenSeq]) -> Result<Var> {
    let ids: Vec<usize> = seqs
        .iter()
        .flat_map(|s| s.ids.iter().map(|&i| i as usize))
        .collect();
    tape.take_rows(st.table, &ids)
}

/// Full text encoder over pre-embedded rows `[B*l_max, d_text]`, pooled at
/// each sequence's end index and projected to the joint space.
pub fn text_forward_rows(
    tape: &mut Tape,
    st: &StagedText,
    dims: &Dims,
    rows: Var,
    ends: &[usize],
) -> Result<Var> {
    let b = ends.len();
    let l = dims.l_max;
    if tape.value(rows).rows() != b * l {
        return Err(Error::Dimension(format!(
            "text rows: expected {} rows for {} sequences, got {}",
            b * l,
            b,
            tape.value(rows).rows()
        )));
    }
    if let Some(&bad) = ends.iter().find(|&&e| e >= l) {
        return Err(Error::Dimension(format!(
            "end index {bad} out of range for length {l}"
        )));
    }
    let tile: Vec<usize> = (0..b).flat_map(|_| 0..l).collect();
    let pos = tape.take_rows(st.pos, &tile)?;
    let mut x = tape.add(rows, pos)?;
    for lw in &st.layers {
        x = transformer_layer(tape, x, lw, dims.heads, b)?;
    }
    let pooled: Vec<usize> = ends.iter().enumerate().map(|(i, &e)| i * l + e).collect();
    let x = tape.take_rows(x, &pooled)?;
    let x = tape.layernorm(x, st.lnf_g, st.lnf_b)?;
    tape.matmul(x, st.proj)
}

/// Flatten images to patch pixel rows `[B*m, patch_pixels]`.
pub fn patch_rows(dims: &Dims, images: &[&Image]) -> Result<Tensor> {
    let side = dims.image_side;
    let ps = dims.patch_side;
    let grid = side / ps;
    let mut data = Vec::with_capacity(images.len() * dims.patches() * dims.patch_pixels());
    for img in images {
        if img.side != side {
            return Err(Error::Dimension(format!(
                "image side {} does not match configured {side}",
                img.side
            )));
        }
        for py in 0..grid {
            for px in 0..grid {
                for y in 0..ps {
                    for x in 0..ps {
                        let o = ((py * ps + y) * side + px * ps + x) * 3;
                        data.extend_from_slice(&img.pixels[o..o + 3]);
                    }
                }
            }
        }
    }
    Tensor::new(
        vec![images.len() * dims.patches(), dims.patch_pixels()],
        data,
    )
}

/// Patch-embed a batch and prepend the class token: `[B*(1+m), d_vis]`,
/// positional embeddings added.
pub fn vision_embed(
    tape: &mut Tape,
    sv: &StagedVision,
    dims: &Dims,
    images: &[&Image],
) -> Result<Var> {
    let b = images.len();
    let m = dims.patches();
    let pr = patch_rows(dims, images)?;
    let pr = tape.leaf(pr);
    let emb = tape.matmul(pr, sv.patch_w)?;
    let emb = tape.add_row(emb, sv.patch_b)?;
    let mut parts = Vec::with_capacity(2 * b);
    for bi in 0..b {
        parts.push(sv.cls);
        let idx: Vec<usize> = (bi * m..(bi + 1) * m).collect();
        parts.push(tape.take_rows(emb, &idx)?);
    }
    let x = tape.concat_rows(&parts)?;
    let tile: Vec<usize> = (0..b).flat_map(|_| 0..=m).collect();
    let pos = tape.take_rows(sv.pos, &tile)?;
    tape.add(x, pos)
}

/// Vision encoder without any prompt injection.
pub fn vision_forward_plain(
    tape: &mut Tape,
    sv: &StagedVision,
    dims: &Dims,
    images: &[&Image],
) -> Result<Var> {
    let b = images.len();
    let m = dims.patches();
    let mut x = vision_embed(tape, sv, dims, images)?;
    for lw in &sv.layers {
        x = transformer_layer(tape, x, lw, dims.heads, b)?;
    }
    let cls_idx: Vec<usize> = (0..b).map(|bi| bi * (1 + m)).collect();
    let x = tape.take_rows(x, &cls_idx)?;
    let x = tape.layernorm(x, sv.lnf_g, sv.lnf_b)?;
    tape.matmul(x, sv.proj)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{finite_diff_grad, max_relative_error, Precision};
    use crate::dataset::{render_image, ShapeWorldSpec};

    fn mini_backbone(seed: u64) -> Backbone {
        let dims = Dims::miniature();
        let tok = Tokenizer::new(["red", "circle", "blue", "square"], dims.l_max).unwrap();
        Backbone::init(dims, tok, seed).unwrap()
    }

    fn mini_image(seed: u64) -> Image {
        let spec = ShapeWorldSpec {
            image_side: 16,
            ..ShapeWorldSpec::default_world(1)
        };
        render_image(&spec, 0, seed).unwrap()
    }

    #[test]
    fn staging_matches_weight_walk() {
        let b = mini_backbone(0);
        let mut tape = Tape::new(Precision::High);
        let staged = b.stage(&mut tape, true);
        let weights = b.weights();
        assert_eq!(staged.flat.len(), weights.len());
        for (var, (name, tensor)) in staged.flat.iter().zip(&weights) {
            assert_eq!(
                tape.value(*var).shape(),
                tensor.shape(),
                "shape drift at {name}"
            );
        }
        let names: std::collections::BTreeSet<&str> =
            weights.iter().map(|(n, _)| n.as_str()).collect();
        assert_eq!(names.len(), weights.len(), "duplicate weight names");
    }

    #[test]
    fn text_forward_is_deterministic_with_joint_width() {
        let b = mini_backbone(1);
        let run = || {
            let mut tape = Tape::new(Precision::Standard);
            let staged = b.stage(&mut tape, false);
            let seqs = vec![
                b.tokenizer.tokenize("red circle").unwrap(),
                b.tokenizer.tokenize("blue square").unwrap(),
            ];
            let ends: Vec<usize> = seqs.iter().map(|s| s.end_index).collect();
            let rows = embed_token_rows(&mut tape, &staged.text, &seqs).unwrap();
            let out = text_forward_rows(&mut tape, &staged.text, &b.dims, rows, &ends).unwrap();
            tape.value(out).clone()
        };
        let a = run();
        let c = run();
        assert_eq!(a, c);
        assert_eq!(a.shape(), &[2, 8]);
    }

    #[test]
    fn vision_forward_is_deterministic_with_joint_width() {
        let b = mini_backbone(2);
        let img = mini_image(5);
        let run = || {
            let mut tape = Tape::new(Precision::Standard);
            let staged = b.stage(&mut tape, false);
            let out = vision_forward_plain(&mut tape, &staged.vision, &b.dims, &[&img, &img])
                .unwrap();
            tape.value(out).clone()
        };
        let a = run();
        let c = run();
        assert_eq!(a, c);
        assert_eq!(a.shape(), &[2, 8]);
    }

    #[test]
    fn end_index_out_of_range_is_an_error() {
        let b = mini_backbone(3);
        let mut tape = Tape::new(Precision::High);
        let staged = b.stage(&mut tape, false);
        let seqs = vec![b.tokenizer.tokenize("red").unwrap()];
        let rows = embed_token_rows(&mut tape, &staged.text, &seqs).unwrap();
        assert!(matches!(
            text_forward_rows(&mut tape, &staged.text, &b.dims, rows, &[b.dims.l_max]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn wrong_image_side_is_an_error() {
        let b = mini_backbone(4);
        let img = Image {
            side: 8,
            pixels: vec![0.0; 8 * 8 * 3],
        };
        assert!(matches!(
            patch_rows(&b.dims, &[&img]),
            Err(Error::Dimension(_))
        ));
    }

    /// End-to-end gradcheck: a contrastive-style scalar through both
    /// encoders, differentiated to sampled weight coordinates.
    #[test]
    fn encoder_weights_pass_gradcheck() {
        let b = mini_backbone(6);
        let img = mini_image(7);
        let seq = b.tokenizer.tokenize("red circle").unwrap();

        let eval = |bb: &Backbone| -> Result<(f64, Vec<Tensor>)> {
            let mut tape = Tape::new(Precision::High);
            let staged = bb.stage(&mut tape, true);
            let rows = embed_token_rows(&mut tape, &staged.text, &[seq.clone()])?;
            let txt = text_forward_rows(&mut tape, &staged.text, &bb.dims, rows, &[seq.end_index])?;
            let im = vision_forward_plain(&mut tape, &staged.vision, &bb.dims, &[&img])?;
            let txn = tape.l2_normalize_rows(txt)?;
            let imn = tape.l2_normalize_rows(im)?;
            let txt_t = tape.transpose(txn)?;
            let cos = tape.matmul(imn, txt_t)?;
            let scale = tape.exp(staged.log_temp)?;
            let logits = tape.mul_scalar(cos, scale)?;
            // The scaled cosine is scalar already and deeply nonlinear in
            // every weight; no extra curvature needed on top.
            let loss = tape.reshape(logits, vec![1])?;
            let grads = tape.backward(loss)?;
            let gs = staged
                .flat
                .iter()
                .map(|&v| {
                    grads
                        .get(v)
                        .cloned()
                        .unwrap_or_else(|| Tensor::zeros(tape.value(v).shape().to_vec()))
                })
                .collect();
            Ok((tape.value(loss).item(), gs))
        };

        let (_, analytic) = eval(&b).unwrap();
        let weights = b.weights();
        // A spread of weight tensors: embeddings, attention, FFN, norms,
        // projections, and the temperature.
        let picks = [
            "text.table",
            "text.layer00.attn.wq",
            "text.layer01.ffn.w2",
            "text.lnf.g",
            "text.proj",
            "vision.patch.w",
            "vision.cls",
            "vision.layer01.attn.wv",
            "vision.layer02.ffn.w1",
            "vision.proj",
            "temp.log",
        ];
        for pick in picks {
            let wi = weights.iter().position(|(n, _)| n == pick).unwrap();
            let count = weights[wi].1.len();
            let coords: Vec<usize> = (0..count.min(4)).map(|i| i * (count / 4).max(1)).collect();
            let point = weights[wi].1.data().to_vec();
            let numeric = finite_diff_grad(
                |p| {
                    let mut probe = b.clone();
                    let mut w = probe.weights_mut();
                    *w[wi].1 = Tensor::new(w[wi].1.shape().to_vec(), p.to_vec())?;
                    drop(w);
                    Ok(eval(&probe)?.0)
                },
                &point,
                &coords,
            )
            .unwrap();
            let got: Vec<f64> = coords.iter().map(|&c| analytic[wi].data()[c]).collect();
            let err = max_relative_error(&got, &numeric);
            assert!(err < 1e-5, "{pick}: gradcheck error {err}");
        }
    }
}

//! Backbone <-> checkpoint conversion.
//!
//! Weights store under their canonical names; dims and the vocabulary ride
//! along as metadata tensors so one file reconstructs the whole backbone.

use crate::autodiff::Tensor;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

use super::encoder::{Backbone, Dims};
use super::tokenizer::Tokenizer;

const DIMS_KEY: &str = "meta.dims";
const VOCAB_KEY: &str = "meta.vocab";

fn dims_vector(d: &Dims) -> Vec<f64> {
    [
        d.d_text,
        d.d_vis,
        d.d_joint,
        d.heads,
        d.text_layers,
        d.vis_layers,
        d.image_side,
        d.patch_side,
        d.l_max,
        d.ffn_mult,
    ]
    .iter()
    .map(|&v| v as f64)
    .collect()
}

fn dims_from_vector(v: &[f64]) -> Result<Dims> {
    if v.len() != 10 {
        return Err(Error::Config(format!(
            "meta.dims holds {} values, expected 10",
            v.len()
        )));
    }
    let u = |i: usize| v[i] as usize;
    let dims = Dims {
        d_text: u(0),
        d_vis: u(1),
        d_joint: u(2),
        heads: u(3),
        text_layers: u(4),
        vis_layers: u(5),
        image_side: u(6),
        patch_side: u(7),
        l_max: u(8),
        ffn_mult: u(9),
    };
    dims.validate()?;
    Ok(dims)
}

/// Identity of a backbone: the checksum its checkpoint would carry.
pub fn backbone_checksum(b: &Backbone) -> Result<u64> {
    Ok(backbone_to_checkpoint(b)?.tensor_checksum())
}

pub fn backbone_to_checkpoint(b: &Backbone) -> Result<Checkpoint> {
    let mut c = Checkpoint::new(0);
    for (name, tensor) in b.weights() {
        c.insert_f64(&name, tensor.shape().to_vec(), tensor.data())?;
    }
    let dims = dims_vector(&b.dims);
    c.insert_f64(DIMS_KEY, vec![dims.len()], &dims)?;
    let vocab_bytes: Vec<f32> = b
        .tokenizer
        .words()
        .join("\n")
        .into_bytes()
        .into_iter()
        .map(f32::from)
        .collect();
    c.insert(VOCAB_KEY, vec![vocab_bytes.len()], vocab_bytes)?;
    c.backbone_checksum = c.tensor_checksum();
    Ok(c)
}

pub fn backbone_from_checkpoint(c: &Checkpoint) -> Result<Backbone> {
    let computed = c.tensor_checksum();
    if c.backbone_checksum != computed {
        return Err(Error::BackboneMismatch {
            expected: c.backbone_checksum,
            found: computed,
        });
    }
    let (_, dims_vec) = c.get_f64(DIMS_KEY)?;
    let dims = dims_from_vector(&dims_vec)?;
    let (_, vocab_vals) = c.get_f64(VOCAB_KEY)?;
    let bytes: Vec<u8> = vocab_vals.iter().map(|&v| v as u8).collect();
    let joined = String::from_utf8(bytes)
        .map_err(|_| Error::Config("meta.vocab is not UTF-8".into()))?;
    let words: Vec<&str> = if joined.is_empty() {
        Vec::new()
    } else {
        joined.split('\n').collect()
    };
    let tokenizer = Tokenizer::new(words, dims.l_max)?;

    // Seed is irrelevant; every weight is overwritten below.
    let mut backbone = Backbone::init(dims, tokenizer, 0)?;
    for (name, tensor) in backbone.weights_mut() {
        let (shape, data) = c.get_f64(&name)?;
        if shape != tensor.shape() {
            return Err(Error::Dimension(format!(
                "{name}: stored shape {shape:?}, expected {:?}",
                tensor.shape()
            )));
        }
        *tensor = Tensor::new(shape, data)?;
    }
    Ok(backbone)
}

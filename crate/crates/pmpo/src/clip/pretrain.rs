//! Contrastive pretraining of the backbone on shape-world pairs.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Precision, Tape, Tensor, Var};
use crate::dataset::{generate_corpus, Glyph, ShapeWorldSpec, PALETTE};
use crate::error::{Error, Result};
use crate::rng::seeded;
use crate::tune::sgd_update;

use super::encoder::{
    embed_token_rows, text_forward_rows, vision_forward_plain, Backbone, Dims,
};
use super::tokenizer::Tokenizer;

/// Tokenizer covering every caption and class name any shape-world spec can
/// produce: the template words plus the full color palette and glyph set.
/// Building it once at pretraining keeps transfer-world class names in
/// vocabulary without retraining.
pub fn universal_tokenizer(l_max: usize) -> Result<Tokenizer> {
    let mut words: Vec<&str> = vec!["a", "photo", "of"];
    words.extend(PALETTE.iter().map(|(name, _)| *name));
    words.extend(Glyph::ALL.iter().map(|g| g.name()));
    Tokenizer::new(words, l_max)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub dims: Dims,
    pub world: ShapeWorldSpec,
    pub pairs: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl PretrainConfig {
    pub fn defaults(seed: u64) -> Self {
        Self {
            dims: Dims::desk(),
            world: ShapeWorldSpec::default_world(seed),
            pairs: 4096,
            epochs: 4,
            batch: 64,
            lr: 0.005,
            momentum: 0.9,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        self.world.validate()?;
        if self.pairs == 0 || self.epochs == 0 || self.batch == 0 {
            return Err(Error::Config(
                "pairs, epochs, and batch must be positive".into(),
            ));
        }
        if self.lr <= 0.0 {
            return Err(Error::Config("lr must be positive".into()));
        }
        if self.world.image_side != self.dims.image_side {
            return Err(Error::Config(
                "world.image_side must match dims.image_side".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochStat {
    pub epoch: usize,
    pub mean_loss: f64,
}

/// Symmetric contrastive loss over a batch of joint vectors: cross-entropy
/// of each image against all texts and each text against all images,
/// averaged over both directions. `scale` multiplies the cosine matrix.
pub fn contrastive_loss(tape: &mut Tape, img: Var, txt: Var, scale: Var) -> Result<Var> {
    let b = tape.value(img).rows();
    if tape.value(txt).rows() != b {
        return Err(Error::Dimension(format!(
            "contrastive batch counts differ: {} images, {} texts",
            b,
            tape.value(txt).rows()
        )));
    }
    let imn = tape.l2_normalize_rows(img)?;
    let txn = tape.l2_normalize_rows(txt)?;
    let txn_t = tape.transpose(txn)?;
    let cos = tape.matmul(imn, txn_t)?;
    let logits = tape.mul_scalar(cos, scale)?;
    let logits_t = tape.transpose(logits)?;
    let mut terms = Vec::with_capacity(2 * b);
    for i in 0..b {
        let row = tape.take_rows(logits, &[i])?;
        let row = tape.reshape(row, vec![b])?;
        terms.push(tape.cross_entropy(row, i)?);
        let col = tape.take_rows(logits_t, &[i])?;
        let col = tape.reshape(col, vec![b])?;
        terms.push(tape.cross_entropy(col, i)?);
    }
    let sum = tape.sum_terms(&terms)?;
    tape.scale(sum, 1.0 / (2 * b) as f64)
}

/// Train a backbone from scratch; returns it with the per-epoch loss curve.
pub fn pretrain(config: &PretrainConfig) -> Result<(Backbone, Vec<EpochStat>)> {
    config.validate()?;
    let tokenizer = universal_tokenizer(config.dims.l_max)?;
    let mut backbone = Backbone::init(config.dims, tokenizer, config.seed)?;

    let corpus = generate_corpus(&config.world, config.pairs)?;
    let tokenized: Vec<_> = corpus
        .iter()
        .map(|(_, caption)| backbone.tokenizer.tokenize(caption))
        .collect::<Result<_>>()?;

    let mut velocity: Vec<Tensor> = backbone
        .weights()
        .iter()
        .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
        .collect();

    let mut history = Vec::with_capacity(config.epochs);
    let mut order: Vec<usize> = (0..corpus.len()).collect();
    // The temperature starts sharp (scale ~14), so the very first batches carry
    // outsized gradients that can lock the encoders into the uniform-similarity
    // stationary point. A linear ramp over the first epoch keeps them gentle.
    let ramp_steps = corpus.len().div_ceil(config.batch).max(1);
    let mut global_step = 0usize;
    for epoch in 0..config.epochs {
        let mut rng = seeded(config.seed, &format!("pretrain-shuffle:{epoch}"));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for chunk in order.chunks(config.batch) {
            if chunk.len() < 2 {
                continue;
            }
            let mut tape = Tape::new(Precision::Standard);
            let staged = backbone.stage(&mut tape, true);
            let images: Vec<_> = chunk.iter().map(|&i| &corpus[i].0).collect();
            let seqs: Vec<_> = chunk.iter().map(|&i| tokenized[i].clone()).collect();
            let ends: Vec<usize> = seqs.iter().map(|s| s.end_index).collect();

            let rows = embed_token_rows(&mut tape, &staged.text, &seqs)?;
            let txt = text_forward_rows(&mut tape, &staged.text, &config.dims, rows, &ends)?;
            let img = vision_forward_plain(&mut tape, &staged.vision, &config.dims, &images)?;
            let scale = tape.exp(staged.log_temp)?;
            let loss = contrastive_loss(&mut tape, img, txt, scale)?;
            let loss_val = tape.value(loss).item();
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "pretraining loss became {loss_val} at epoch {epoch}"
                )));
            }
            loss_sum += loss_val;
            steps += 1;

            let ramp = ((global_step + 1) as f64 / ramp_steps as f64).min(1.0);
            let step_lr = config.lr * ramp;
            global_step += 1;

            let grads = tape.backward(loss)?;
            let weights = backbone.weights_mut();
            for (((_, param), vel), &var) in weights
                .into_iter()
                .zip(velocity.iter_mut())
                .zip(&staged.flat)
            {
                if let Some(g) = grads.get(var) {
                    sgd_update(param, g, vel, step_lr, config.momentum)?;
                }
            }
        }
        history.push(EpochStat {
            epoch,
            mean_loss: loss_sum / steps.max(1) as f64,
        });
    }
    Ok((backbone, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn universal_tokenizer_covers_all_worlds() {
        let t = universal_tokenizer(16).unwrap();
        assert!(t.vocab_size() < 64);
        for world in [
            ShapeWorldSpec::default_world(0),
            ShapeWorldSpec::transfer_world(0),
        ] {
            for class in 0..world.class_count() {
                t.tokenize(&world.caption(class)).unwrap();
            }
            for name in world.class_names() {
                t.tokenize(&name).unwrap();
            }
        }
    }

    #[test]
    fn single_pair_loss_is_zero() {
        let mut tape = Tape::new(Precision::High);
        let img = tape.leaf(Tensor::new(vec![1, 3], vec![0.3, -0.7, 0.1]).unwrap());
        let txt = tape.leaf(Tensor::new(vec![1, 3], vec![-0.2, 0.5, 0.9]).unwrap());
        let scale = tape.leaf(Tensor::new(vec![1], vec![10.0]).unwrap());
        let loss = contrastive_loss(&mut tape, img, txt, scale).unwrap();
        assert_eq!(tape.value(loss).item(), 0.0);
    }

    #[test]
    fn matched_orthonormal_pairs_with_sharp_scale_approach_zero() {
        let mut tape = Tape::new(Precision::High);
        let eye = Tensor::new(
            vec![3, 3],
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let img = tape.leaf(eye.clone());
        let txt = tape.leaf(eye);
        let scale = tape.leaf(Tensor::new(vec![1], vec![200.0]).unwrap());
        let loss = contrastive_loss(&mut tape, img, txt, scale).unwrap();
        assert!(tape.value(loss).item() < 1e-12);
    }

    #[test]
    fn loss_matches_scalar_reference_at_b3() {
        let mut rng = seeded(17, "contrastive-oracle");
        let b = 3;
        let d = 5;
        let iv: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let tv: Vec<f64> = (0..b * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let scale_val = 7.3;

        let mut tape = Tape::new(Precision::High);
        let img = tape.leaf(Tensor::new(vec![b, d], iv.clone()).unwrap());
        let txt = tape.leaf(Tensor::new(vec![b, d], tv.clone()).unwrap());
        let scale = tape.leaf(Tensor::new(vec![1], vec![scale_val]).unwrap());
        let loss = contrastive_loss(&mut tape, img, txt, scale).unwrap();

        // Brute-force scalar evaluation of the same formula.
        let norm_rows = |v: &[f64]| -> Vec<Vec<f64>> {
            v.chunks(d)
                .map(|r| {
                    let n = r.iter().map(|x| x * x).sum::<f64>().sqrt();
                    r.iter().map(|x| x / n).collect()
                })
                .collect()
        };
        let im = norm_rows(&iv);
        let tx = norm_rows(&tv);
        let mut logits = vec![vec![0.0; b]; b];
        for i in 0..b {
            for j in 0..b {
                logits[i][j] =
                    scale_val * im[i].iter().zip(&tx[j]).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        let ce = |row: &[f64], label: usize| -> f64 {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            lse - row[label]
        };
        let mut expect = 0.0;
        for i in 0..b {
            expect += ce(&logits[i], i);
            let col: Vec<f64> = (0..b).map(|j| logits[j][i]).collect();
            expect += ce(&col, i);
        }
        expect /= (2 * b) as f64;
        assert!((tape.value(loss).item() - expect).abs() < 1e-10);
    }

    #[test]
    fn tiny_pretrain_runs_and_is_deterministic() {
        let config = PretrainConfig {
            dims: Dims::miniature(),
            world: ShapeWorldSpec {
                image_side: 16,
                ..ShapeWorldSpec::default_world(11)
            },
            pairs: 32,
            epochs: 2,
            batch: 8,
            lr: 0.05,
            momentum: 0.9,
            seed: 11,
        };
        let (b1, h1) = pretrain(&config).unwrap();
        let (b2, h2) = pretrain(&config).unwrap();
        assert_eq!(b1, b2);
        assert_eq!(h1, h2);
        assert!(h1.iter().all(|s| s.mean_loss.is_finite()));
        assert!(
            h1.last().unwrap().mean_loss < h1[0].mean_loss,
            "loss should drop on an easy corpus: {h1:?}"
        );
    }
}

//! The few-shot optimization loop and the end-to-end gradient audit.

use rand::seq::SliceRandom;

use crate::autodiff::{finite_diff_grad, max_relative_error, Precision, Tape, Tensor, Var};
use crate::clip::{backbone_checksum, Backbone, Dims};
use crate::dataset::{FewShotTask, Image, ShapeWorldSpec};
use crate::error::{Error, Result};
use crate::prompt::{
    encode_class_embeddings, ensemble, manual_embeddings, project_visual_prompts,
    vision_forward_partitioned, PartitionMap, PromptSet, StagedBridges, TunedArtifact,
};
use crate::rng::seeded;
use crate::tune::{sgd_update, Schedule, TuneConfig};

/// One optimizer step as recorded in the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct StepStat {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    /// Batch accuracy from the pre-update logits.
    pub train_acc: f64,
    /// Largest coordinate gap between any two per-prompt context gradients.
    pub grad_spread: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TuneOutcome {
    pub artifact: TunedArtifact,
    pub history: Vec<StepStat>,
}

impl TuneOutcome {
    pub fn history_csv(&self) -> String {
        let mut out = String::from("step,lr,loss,train_acc,grad_spread\n");
        for s in &self.history {
            out.push_str(&format!(
                "{},{:.10e},{:.10e},{:.6},{:.10e}\n",
                s.step, s.lr, s.loss, s.train_acc, s.grad_spread
            ));
        }
        out
    }
}

/// Optimize prompt contexts and bridges on the task's base-class shots.
/// The backbone is staged as constants and never updated. Zero epochs
/// return the freshly initialized parameters untouched.
pub fn tune(backbone: &Backbone, task: &FewShotTask, config: &TuneConfig) -> Result<TuneOutcome> {
    let cfg = config.clone().normalized();
    let dims = &backbone.dims;
    if cfg.depth > dims.vis_layers {
        return Err(Error::Config(format!(
            "injection depth {} exceeds the backbone's {} visual layers",
            cfg.depth, dims.vis_layers
        )));
    }

    let mut prompts = if cfg.shared_init {
        PromptSet::init_shared(cfg.n_prompts, cfg.ctx_len, dims.d_text, cfg.manual.clone(), cfg.seed)?
    } else {
        PromptSet::init(cfg.n_prompts, cfg.ctx_len, dims.d_text, cfg.manual.clone(), cfg.seed)?
    };
    let mut partition = PartitionMap::init(
        cfg.depth,
        cfg.n_prompts,
        dims.d_text,
        dims.d_vis,
        cfg.bridge_bias,
        cfg.seed,
    )?;
    let checksum = backbone_checksum(backbone)?;

    let make_artifact = |prompts: PromptSet, partition: PartitionMap| TunedArtifact {
        prompts,
        partition,
        config: config.clone(),
        backbone_checksum: checksum,
    };

    if cfg.epochs == 0 {
        return Ok(TuneOutcome {
            artifact: make_artifact(prompts, partition),
            history: Vec::new(),
        });
    }
    cfg.validate()?;

    let classes = task.base_names();
    if classes.len() < 2 {
        return Err(Error::Config("tuning needs at least 2 base classes".into()));
    }
    let mut examples: Vec<(usize, &Image)> = Vec::with_capacity(task.train.len());
    for shot in &task.train {
        let label = task
            .base
            .iter()
            .position(|&c| c == shot.class)
            .ok_or_else(|| Error::Config("train shot labeled with a non-base class".into()))?;
        examples.push((label, &shot.image));
    }
    if examples.is_empty() {
        return Err(Error::Config("task has no training shots".into()));
    }

    let steps_per_epoch = examples.len().div_ceil(cfg.batch);
    let total_steps = steps_per_epoch * cfg.epochs;
    // One warmup epoch; a single-epoch run warms up for all but one step.
    let warmup_steps = steps_per_epoch.min(total_steps - 1);
    let schedule = Schedule::new(warmup_steps, total_steps, cfg.base_lr, cfg.warmup_lr)?;

    let mut vel_ctx: Vec<Tensor> = prompts
        .ctx
        .iter()
        .map(|t| Tensor::zeros(t.shape().to_vec()))
        .collect();
    let mut vel_w: Vec<Tensor> = partition
        .bridges
        .iter()
        .map(|b| Tensor::zeros(b.w.shape().to_vec()))
        .collect();
    let mut vel_b: Vec<Tensor> = partition
        .bridges
        .iter()
        .map(|b| Tensor::zeros(b.b.shape().to_vec()))
        .collect();

    let mut history = Vec::with_capacity(total_steps);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..examples.len()).collect();
        order.shuffle(&mut seeded(cfg.seed, &format!("tune-shuffle:{epoch}")));
        for chunk in order.chunks(cfg.batch) {
            let lr = schedule.lr_at(step)?;
            let batch: Vec<(usize, &Image)> = chunk.iter().map(|&i| examples[i]).collect();
            let stat = tune_step(
                backbone, &cfg, &classes, &batch, &mut prompts, &mut partition, &mut vel_ctx,
                &mut vel_w, &mut vel_b, lr, step,
            )?;
            history.push(stat);
            step += 1;
        }
    }

    Ok(TuneOutcome {
        artifact: make_artifact(prompts, partition),
        history,
    })
}

#[allow(clippy::too_many_arguments)]
fn tune_step(
    backbone: &Backbone,
    cfg: &TuneConfig,
    classes: &[String],
    batch: &[(usize, &Image)],
    prompts: &mut PromptSet,
    partition: &mut PartitionMap,
    vel_ctx: &mut [Tensor],
    vel_w: &mut [Tensor],
    vel_b: &mut [Tensor],
    lr: f64,
    step: usize,
) -> Result<StepStat> {
    let dims = &backbone.dims;
    let mut tape = Tape::new(Precision::Standard);
    let staged = backbone.stage(&mut tape, false);
    let ctx_vars = prompts.stage(&mut tape, true);
    let bridge_vars = partition.stage(&mut tape, true);
    let vlist = project_visual_prompts(&mut tape, &ctx_vars, &partition.assignment, &bridge_vars)?;

    let mut sources = Vec::with_capacity(ctx_vars.len() + 1);
    for &c in &ctx_vars {
        sources.push(encode_class_embeddings(
            &mut tape,
            &staged.text,
            dims,
            &backbone.tokenizer,
            c,
            classes,
        )?);
    }
    if let Some(template) = &prompts.manual {
        sources.push(manual_embeddings(
            &mut tape,
            &staged.text,
            dims,
            &backbone.tokenizer,
            template,
            classes,
        )?);
    }
    let class_rows = ensemble(&mut tape, &sources)?;

    let images: Vec<&Image> = batch.iter().map(|&(_, img)| img).collect();
    let img = vision_forward_partitioned(&mut tape, &staged.vision, dims, &images, &vlist)?;
    let imn = tape.l2_normalize_rows(img)?;
    let cls_t = tape.transpose(class_rows)?;
    let cos = tape.matmul(imn, cls_t)?;
    let logits = tape.scale(cos, backbone.logit_scale())?;

    let mut terms = Vec::with_capacity(batch.len());
    for (row, &(label, _)) in batch.iter().enumerate() {
        let lrow = tape.take_rows(logits, &[row])?;
        let lrow = tape.reshape(lrow, vec![classes.len()])?;
        terms.push(tape.cross_entropy(lrow, label)?);
    }
    let total = tape.sum_terms(&terms)?;
    let loss = tape.scale(total, 1.0 / batch.len() as f64)?;
    let loss_value = tape.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::Numeric(format!(
            "loss became non-finite at step {step}"
        )));
    }

    let logits_snapshot = tape.value(logits).clone();
    let correct = batch
        .iter()
        .enumerate()
        .filter(|(row, &(label, _))| {
            let r = logits_snapshot.row(*row);
            let argmax = r
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .map(|(i, _)| i)
                .unwrap();
            argmax == label
        })
        .count();
    let train_acc = correct as f64 / batch.len() as f64;

    let grads = tape.backward(loss)?;
    let zero = |shape: &[usize]| Tensor::zeros(shape.to_vec());
    let ctx_grads: Vec<Tensor> = ctx_vars
        .iter()
        .enumerate()
        .map(|(p, &v)| grads.get(v).cloned().unwrap_or_else(|| zero(prompts.ctx[p].shape())))
        .collect();
    let mut grad_spread = 0.0f64;
    for a in 0..ctx_grads.len() {
        for b in a + 1..ctx_grads.len() {
            let gap = ctx_grads[a]
                .data()
                .iter()
                .zip(ctx_grads[b].data())
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            grad_spread = grad_spread.max(gap);
        }
    }

    for (p, g) in ctx_grads.iter().enumerate() {
        sgd_update(&mut prompts.ctx[p], g, &mut vel_ctx[p], lr, cfg.momentum)?;
    }
    for (i, &v) in bridge_vars.w.iter().enumerate() {
        if let Some(g) = grads.get(v) {
            sgd_update(&mut partition.bridges[i].w, g, &mut vel_w[i], lr, cfg.momentum)?;
        }
    }
    if partition.bias_enabled {
        for (i, &v) in bridge_vars.b.iter().enumerate() {
            if let Some(g) = grads.get(v) {
                sgd_update(&mut partition.bridges[i].b, g, &mut vel_b[i], lr, cfg.momentum)?;
            }
        }
    }

    Ok(StepStat {
        step,
        lr,
        loss: loss_value,
        train_acc,
        grad_spread,
    })
}

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct GradcheckGroup {
    pub name: String,
    pub coords: usize,
    pub max_rel_error: f64,
}

/// Finite-difference audit of the full tuning loss, grouped by parameter
/// family, run at high precision.
#[derive(Debug, Clone)]
pub struct GradcheckReport {
    pub groups: Vec<GradcheckGroup>,
    pub coords_checked: usize,
    pub max_rel_error: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error < GRADCHECK_TOLERANCE
    }

    pub fn format(&self) -> String {
        let mut out = String::new();
        for g in &self.groups {
            out.push_str(&format!(
                "{:<16} coords {:>4}   max rel err {:.3e}\n",
                g.name, g.coords, g.max_rel_error
            ));
        }
        out.push_str(&format!(
            "overall          coords {:>4}   max rel err {:.3e}   {}\n",
            self.coords_checked,
            self.max_rel_error,
            if self.passed() { "pass" } else { "FAIL" }
        ));
        out
    }
}

struct GradcheckSetup {
    backbone: Backbone,
    images: Vec<Image>,
    classes: Vec<String>,
    labels: Vec<usize>,
    n: usize,
    ctx_len: usize,
    depth: usize,
}

impl GradcheckSetup {
    fn new(seed: u64) -> Result<Self> {
        let dims = Dims::miniature();
        let tokenizer = crate::clip::universal_tokenizer(dims.l_max)?;
        let backbone = Backbone::init(dims, tokenizer, seed)?;
        let world = ShapeWorldSpec {
            image_side: dims.image_side,
            ..ShapeWorldSpec::default_world(seed)
        };
        let names = world.class_names();
        let picks = [0usize, 9];
        let images = picks
            .iter()
            .enumerate()
            .map(|(i, &c)| crate::dataset::render_image(&world, c, seed + i as u64))
            .collect::<Result<Vec<_>>>()?;
        let classes: Vec<String> = picks.iter().map(|&c| names[c].clone()).collect();
        Ok(Self {
            backbone,
            images,
            classes,
            labels: vec![0, 1],
            n: 2,
            ctx_len: 2,
            depth: 2,
        })
    }

    fn ctx_size(&self) -> usize {
        self.ctx_len * self.backbone.dims.d_text
    }

    fn w_size(&self) -> usize {
        self.backbone.dims.d_text * self.backbone.dims.d_vis
    }

    fn b_size(&self) -> usize {
        self.backbone.dims.d_vis
    }

    fn full_len(&self) -> usize {
        self.n * self.ctx_size() + self.depth * (self.w_size() + self.b_size())
    }

    /// Loss with contexts and bridges taken from `point`; bridges feed the
    /// injection path, contexts feed the text encoder.
    fn full_loss(&self, point: &[f64], want_grads: bool) -> Result<(f64, Vec<f64>)> {
        let dims = &self.backbone.dims;
        let mut tape = Tape::new(Precision::High);
        let staged = self.backbone.stage(&mut tape, false);

        let mut offset = 0;
        let mut take = |tape: &mut Tape, shape: Vec<usize>| -> Result<Var> {
            let len: usize = shape.iter().product();
            let t = Tensor::new(shape, point[offset..offset + len].to_vec())?;
            offset += len;
            Ok(tape.param(t))
        };
        let mut ctx_vars = Vec::new();
        for _ in 0..self.n {
            ctx_vars.push(take(&mut tape, vec![self.ctx_len, dims.d_text])?);
        }
        let mut bridges = StagedBridges {
            w: Vec::new(),
            b: Vec::new(),
        };
        for _ in 0..self.depth {
            bridges.w.push(take(&mut tape, vec![dims.d_text, dims.d_vis])?);
            bridges.b.push(take(&mut tape, vec![dims.d_vis])?);
        }
        let assignment = crate::prompt::assign_partition(self.depth, self.n)?;
        let vlist = project_visual_prompts(&mut tape, &ctx_vars, &assignment, &bridges)?;
        let params: Vec<Var> = ctx_vars
            .iter()
            .copied()
            .chain((0..self.depth).flat_map(|i| [bridges.w[i], bridges.b[i]]))
            .collect();
        self.finish_loss(&mut tape, &staged, &ctx_vars, &vlist, &params, want_grads)
    }

    /// Loss with the injected rows themselves as the free parameters; the
    /// text side stays fixed.
    fn injected_loss(&self, point: &[f64], want_grads: bool) -> Result<(f64, Vec<f64>)> {
        let dims = &self.backbone.dims;
        let mut tape = Tape::new(Precision::High);
        let staged = self.backbone.stage(&mut tape, false);
        let fixed = PromptSet::init(self.n, self.ctx_len, dims.d_text, None, 77)?;
        let ctx_vars = fixed.stage(&mut tape, false);
        let chunk = self.ctx_len * dims.d_vis;
        let mut vlist = Vec::new();
        let mut params = Vec::new();
        for i in 0..self.depth {
            let t = Tensor::new(
                vec![self.ctx_len, dims.d_vis],
                point[i * chunk..(i + 1) * chunk].to_vec(),
            )?;
            let v = tape.param(t);
            vlist.push(v);
            params.push(v);
        }
        self.finish_loss(&mut tape, &staged, &ctx_vars, &vlist, &params, want_grads)
    }

    fn finish_loss(
        &self,
        tape: &mut Tape,
        staged: &crate::clip::StagedBackbone,
        ctx_vars: &[Var],
        vlist: &[Var],
        params: &[Var],
        want_grads: bool,
    ) -> Result<(f64, Vec<f64>)> {
        let dims = &self.backbone.dims;
        let mut sources = Vec::new();
        for &c in ctx_vars {
            sources.push(encode_class_embeddings(
                tape,
                &staged.text,
                dims,
                &self.backbone.tokenizer,
                c,
                &self.classes,
            )?);
        }
        sources.push(manual_embeddings(
            tape,
            &staged.text,
            dims,
            &self.backbone.tokenizer,
            "a photo of a {}",
            &self.classes,
        )?);
        let class_rows = ensemble(tape, &sources)?;
        let refs: Vec<&Image> = self.images.iter().collect();
        let img = vision_forward_partitioned(tape, &staged.vision, dims, &refs, vlist)?;
        let imn = tape.l2_normalize_rows(img)?;
        let cls_t = tape.transpose(class_rows)?;
        let cos = tape.matmul(imn, cls_t)?;
        let logits = tape.scale(cos, self.backbone.logit_scale())?;
        let mut terms = Vec::new();
        for (row, &label) in self.labels.iter().enumerate() {
            let lrow = tape.take_rows(logits, &[row])?;
            let lrow = tape.reshape(lrow, vec![self.classes.len()])?;
            terms.push(tape.cross_entropy(lrow, label)?);
        }
        let total = tape.sum_terms(&terms)?;
        let loss = tape.scale(total, 1.0 / self.labels.len() as f64)?;
        let value = tape.value(loss).item();
        if !want_grads {
            return Ok((value, Vec::new()));
        }
        let grads = tape.backward(loss)?;
        let mut flat = Vec::new();
        for &p in params {
            let shape = tape.value(p).shape().to_vec();
            match grads.get(p) {
                Some(g) => flat.extend_from_slice(g.data()),
                None => flat.extend(std::iter::repeat(0.0).take(shape.iter().product())),
            }
        }
        Ok((value, flat))
    }
}

/// Audit analytic gradients of the complete tuning loss against central
/// finite differences on a miniature backbone.
pub fn gradcheck_report(seed: u64) -> Result<GradcheckReport> {
    let setup = GradcheckSetup::new(seed)?;
    let mut rng = seeded(seed, "gradcheck-point");
    use rand::Rng;

    let full_len = setup.full_len();
    let point: Vec<f64> = (0..full_len).map(|_| rng.gen_range(-0.05..0.05)).collect();
    let (_, analytic) = setup.full_loss(&point, true)?;
    let coords: Vec<usize> = (0..full_len).collect();
    let numeric = finite_diff_grad(|p| Ok(setup.full_loss(p, false)?.0), &point, &coords)?;

    let ctx_total = setup.n * setup.ctx_size();
    let mut groups = Vec::new();
    let mut slice_err = |name: &str, range: std::ops::Range<usize>| {
        let a: Vec<f64> = range.clone().map(|i| analytic[i]).collect();
        let n: Vec<f64> = range.clone().map(|i| numeric[i]).collect();
        groups.push(GradcheckGroup {
            name: name.to_string(),
            coords: range.len(),
            max_rel_error: max_relative_error(&a, &n),
        });
    };
    slice_err("context-tokens", 0..ctx_total);
    let mut at = ctx_total;
    let (mut w_idx, mut b_idx) = (Vec::new(), Vec::new());
    for _ in 0..setup.depth {
        w_idx.extend(at..at + setup.w_size());
        at += setup.w_size();
        b_idx.extend(at..at + setup.b_size());
        at += setup.b_size();
    }
    for (name, idx) in [("bridge-weights", &w_idx), ("bridge-biases", &b_idx)] {
        let a: Vec<f64> = idx.iter().map(|&i| analytic[i]).collect();
        let n: Vec<f64> = idx.iter().map(|&i| numeric[i]).collect();
        groups.push(GradcheckGroup {
            name: name.to_string(),
            coords: idx.len(),
            max_rel_error: max_relative_error(&a, &n),
        });
    }

    let inj_len = setup.depth * setup.ctx_len * setup.backbone.dims.d_vis;
    let inj_point: Vec<f64> = (0..inj_len).map(|_| rng.gen_range(-0.5..0.5)).collect();
    let (_, inj_analytic) = setup.injected_loss(&inj_point, true)?;
    let inj_coords: Vec<usize> = (0..inj_len).collect();
    let inj_numeric =
        finite_diff_grad(|p| Ok(setup.injected_loss(p, false)?.0), &inj_point, &inj_coords)?;
    groups.push(GradcheckGroup {
        name: "injected-rows".to_string(),
        coords: inj_len,
        max_rel_error: max_relative_error(&inj_analytic, &inj_numeric),
    });

    let coords_checked = full_len + inj_len;
    let max_rel_error = groups
        .iter()
        .map(|g| g.max_rel_error)
        .fold(0.0f64, f64::max);
    Ok(GradcheckReport {
        groups,
        coords_checked,
        max_rel_error,
    })
}

//! Few-shot prompt optimization: configuration, schedule, optimizer, and
//! the tuning loop.

mod loop_;

pub use loop_::{
    gradcheck_report, tune, GradcheckGroup, GradcheckReport, StepStat, TuneOutcome,
    GRADCHECK_TOLERANCE,
};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

/// Ablation mode: which of the two mechanisms (multi-prompt ensembling,
/// visual injection) are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    /// Single prompt, text side only.
    Ss,
    /// Multiple prompts, text side only.
    Ms,
    /// Single prompt with visual injection.
    Sm,
    /// Full method: multiple prompts, depth-partitioned injection.
    Pmpo,
}

impl Mode {
    pub const ALL: [Mode; 4] = [Mode::Ss, Mode::Ms, Mode::Sm, Mode::Pmpo];

    pub fn name(self) -> &'static str {
        match self {
            Mode::Ss => "ss",
            Mode::Ms => "ms",
            Mode::Sm => "sm",
            Mode::Pmpo => "pmpo",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "ss" => Ok(Mode::Ss),
            "ms" => Ok(Mode::Ms),
            "sm" => Ok(Mode::Sm),
            "pmpo" => Ok(Mode::Pmpo),
            other => Err(Error::Config(format!(
                "mode {other:?} not one of ss/ms/sm/pmpo"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneConfig {
    pub n_prompts: usize,
    pub ctx_len: usize,
    /// Visual layers receiving prompt injection, counted from the input.
    pub depth: usize,
    pub shots: usize,
    pub epochs: usize,
    pub batch: usize,
    pub base_lr: f64,
    pub warmup_lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub mode: Mode,
    /// Manual template joining the ensemble, e.g. "a photo of a {}".
    pub manual: Option<String>,
    /// Include per-layer projection biases (affects param_count).
    pub bridge_bias: bool,
    /// Start every prompt from the same draw instead of independent ones.
    #[serde(default)]
    pub shared_init: bool,
}

impl TuneConfig {
    pub fn defaults(seed: u64) -> Self {
        Self {
            n_prompts: 4,
            ctx_len: 10,
            depth: 12,
            shots: 16,
            epochs: 6,
            batch: 8,
            base_lr: 0.002,
            warmup_lr: 1e-5,
            momentum: 0.9,
            seed,
            mode: Mode::Pmpo,
            manual: Some("a photo of a {}".to_string()),
            bridge_bias: true,
            shared_init: false,
        }
    }

    /// Apply the mode's forcing rules: single-prompt modes pin N to 1,
    /// text-only modes pin depth to 0.
    pub fn normalized(mut self) -> Self {
        match self.mode {
            Mode::Ss => {
                self.n_prompts = 1;
                self.depth = 0;
            }
            Mode::Ms => self.depth = 0,
            Mode::Sm => self.n_prompts = 1,
            Mode::Pmpo => {}
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.base_lr <= 0.0 {
            return Err(Error::Config("base_lr must be positive".into()));
        }
        if self.n_prompts < 1 {
            return Err(Error::Config("n_prompts must be >= 1".into()));
        }
        if self.batch < 1 {
            return Err(Error::Config("batch must be >= 1".into()));
        }
        if self.shots < 1 {
            return Err(Error::Config("shots must be >= 1".into()));
        }
        match self.mode {
            Mode::Ss if self.n_prompts != 1 || self.depth != 0 => Err(Error::Config(
                "mode ss forces n_prompts=1 and depth=0; call normalized()".into(),
            )),
            Mode::Ms if self.depth != 0 => Err(Error::Config(
                "mode ms forces depth=0; call normalized()".into(),
            )),
            Mode::Sm if self.n_prompts != 1 => Err(Error::Config(
                "mode sm forces n_prompts=1; call normalized()".into(),
            )),
            _ => Ok(()),
        }
    }
}

/// Warmup-then-cosine step schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub base_lr: f64,
    pub warmup_lr: f64,
}

impl Schedule {
    pub fn new(warmup_steps: usize, total_steps: usize, base_lr: f64, warmup_lr: f64) -> Result<Self> {
        if warmup_steps >= total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {warmup_steps} must be < total_steps {total_steps}"
            )));
        }
        Ok(Self {
            warmup_steps,
            total_steps,
            base_lr,
            warmup_lr,
        })
    }

    /// Constant warmup lr, then cosine from base toward zero with
    /// progress = (step - warmup) / (total - warmup).
    pub fn lr_at(&self, step: usize) -> Result<f64> {
        if step >= self.total_steps {
            return Err(Error::Config(format!(
                "step {step} outside schedule of {} steps",
                self.total_steps
            )));
        }
        if step < self.warmup_steps {
            return Ok(self.warmup_lr);
        }
        let span = (self.total_steps - self.warmup_steps) as f64;
        let progress = (step - self.warmup_steps) as f64 / span;
        Ok(self.base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
    }
}

/// One SGD-with-momentum update: `v = mu*v + g; p -= lr*v`.
pub fn sgd_update(param: &mut Tensor, grad: &Tensor, vel: &mut Tensor, lr: f64, momentum: f64) -> Result<()> {
    if param.shape() != grad.shape() || param.shape() != vel.shape() {
        return Err(Error::Dimension(format!(
            "sgd shapes disagree: param {:?}, grad {:?}, velocity {:?}",
            param.shape(),
            grad.shape(),
            vel.shape()
        )));
    }
    let p = param.data_mut();
    let v = vel.data_mut();
    for ((p, v), g) in p.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
    Ok(())
}

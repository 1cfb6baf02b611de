//! Metrics and the three evaluation protocols — within-world base/new splits,
//! cross-world transfer, and pixel-level domain shifts — plus ablation sweeps.

mod io;

pub use io::{report_csv, report_text, sweep_csv, sweep_text, write_pgm};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::clip::{backbone_checksum, Backbone};
use crate::dataset::{
    apply_domain_shift, build_task, DomainShift, FewShotTask, LabeledImage, TaskSpec,
};
use crate::error::{Error, Result};
use crate::prompt::{predict_probs, TunedArtifact};
use crate::tune::{tune, Mode, TuneConfig};

/// Fraction of correct predictions as a percentage.
pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::Config("accuracy over an empty set is undefined".into()));
    }
    if predictions.len() != labels.len() {
        return Err(Error::Dimension(format!(
            "{} predictions vs {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let correct = predictions
        .iter()
        .zip(labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(100.0 * correct as f64 / predictions.len() as f64)
}

/// Harmonic mean 2·base·new/(base+new) of two accuracies.
pub fn harmonic_mean(base: f64, new: f64) -> Result<f64> {
    if base < 0.0 || new < 0.0 {
        return Err(Error::Config(format!(
            "harmonic mean needs non-negative inputs, got ({base}, {new})"
        )));
    }
    if base == 0.0 && new == 0.0 {
        return Err(Error::Numeric("harmonic mean of (0, 0) is undefined".into()));
    }
    Ok(2.0 * base * new / (base + new))
}

/// Short stable digest of a tuning configuration, for report provenance.
pub fn config_fingerprint(config: &TuneConfig) -> Result<String> {
    let json = serde_json::to_vec(config)?;
    let digest = Sha256::digest(&json);
    Ok(digest[..8].iter().map(|b| format!("{b:02x}")).collect())
}

/// Accuracies of one tuned artifact on one task's base and new splits.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub base: f64,
    pub new: f64,
    pub harmonic: f64,
    /// (class name, accuracy) for every base class, then every new class.
    pub per_class: Vec<(String, f64)>,
    pub fingerprint: String,
    pub seeds: Vec<u64>,
}

impl EvalReport {
    pub fn new(
        base: f64,
        new: f64,
        per_class: Vec<(String, f64)>,
        fingerprint: String,
        seeds: Vec<u64>,
    ) -> Result<Self> {
        let in_range = |v: f64| (0.0..=100.0).contains(&v);
        if !in_range(base) || !in_range(new) {
            return Err(Error::Numeric(format!(
                "accuracies must lie in [0, 100], got base {base}, new {new}"
            )));
        }
        if let Some((name, v)) = per_class.iter().find(|(_, v)| !in_range(*v)) {
            return Err(Error::Numeric(format!(
                "per-class accuracy for {name:?} out of range: {v}"
            )));
        }
        Ok(Self {
            base,
            new,
            harmonic: harmonic_mean(base, new)?,
            per_class,
            fingerprint,
            seeds,
        })
    }
}

/// Predicted label-space positions for a pool of images, batched.
///
/// Every probability row is checked to sum to 1 within 1e-6; the softmax
/// guarantees it analytically, so a violation means numeric breakdown.
fn predict_pool(
    backbone: &Backbone,
    artifact: &TunedArtifact,
    names: &[String],
    pool: &[LabeledImage],
) -> Result<Vec<usize>> {
    const CHUNK: usize = 32;
    let mut predictions = Vec::with_capacity(pool.len());
    for group in pool.chunks(CHUNK) {
        let images: Vec<_> = group.iter().map(|s| &s.image).collect();
        let probs = predict_probs(
            backbone,
            &artifact.prompts,
            &artifact.partition,
            artifact.manual_in_ensemble(),
            names,
            &images,
        )?;
        for r in 0..probs.rows() {
            let row = probs.row(r);
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-6 {
                return Err(Error::Numeric(format!(
                    "probability row sums to {sum}, expected 1"
                )));
            }
            let best = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .expect("predict_probs guarantees >= 2 classes");
            predictions.push(best);
        }
    }
    Ok(predictions)
}

/// Overall and per-class accuracy of `artifact` on `pool`, where the label
/// space is exactly `class_indices` (global class ids) named by `names`.
fn split_accuracy(
    backbone: &Backbone,
    artifact: &TunedArtifact,
    names: &[String],
    class_indices: &[usize],
    pool: &[LabeledImage],
) -> Result<(f64, Vec<(String, f64)>)> {
    let labels: Vec<usize> = pool
        .iter()
        .map(|s| {
            class_indices
                .iter()
                .position(|&c| c == s.class)
                .ok_or_else(|| {
                    Error::Config(format!(
                        "image labeled with class {} outside this split's label space",
                        s.class
                    ))
                })
        })
        .collect::<Result<_>>()?;
    let predictions = predict_pool(backbone, artifact, names, pool)?;
    let overall = accuracy(&predictions, &labels)?;

    let mut per_class = Vec::with_capacity(names.len());
    for (k, name) in names.iter().enumerate() {
        let (hit, total) = predictions
            .iter()
            .zip(&labels)
            .filter(|(_, &l)| l == k)
            .fold((0usize, 0usize), |(h, t), (&p, _)| {
                (h + (p == k) as usize, t + 1)
            });
        if total > 0 {
            per_class.push((name.clone(), 100.0 * hit as f64 / total as f64));
        }
    }
    Ok((overall, per_class))
}

/// Score a tuned artifact on its task: base split scored within the base
/// label space, new split within the new label space (ensemble embeddings
/// are recomputed for the new class names from the same tuned prompts).
pub fn base_to_new_eval(
    backbone: &Backbone,
    artifact: &TunedArtifact,
    task: &FewShotTask,
) -> Result<EvalReport> {
    artifact.ensure_backbone(backbone_checksum(backbone)?)?;
    let base_names = task.base_names();
    let new_names = task.new_names();
    if base_names.iter().any(|n| new_names.contains(n)) {
        return Err(Error::Config(
            "base and new label spaces overlap; splits must stay disjoint".into(),
        ));
    }
    let (base, base_pc) =
        split_accuracy(backbone, artifact, &base_names, &task.base, &task.test_base)?;
    let (new, new_pc) =
        split_accuracy(backbone, artifact, &new_names, &task.new, &task.test_new)?;
    let mut per_class = base_pc;
    per_class.extend(new_pc);
    EvalReport::new(
        base,
        new,
        per_class,
        config_fingerprint(&artifact.config)?,
        vec![artifact.config.seed],
    )
}

/// Accuracy over a task's *entire* label space, pooling both test splits.
fn whole_task_accuracy(
    backbone: &Backbone,
    artifact: &TunedArtifact,
    task: &FewShotTask,
) -> Result<f64> {
    let all: Vec<usize> = (0..task.classes.len()).collect();
    let pool: Vec<LabeledImage> = task
        .test_base
        .iter()
        .chain(&task.test_new)
        .cloned()
        .collect();
    let (acc, _) = split_accuracy(backbone, artifact, &task.classes, &all, &pool)?;
    Ok(acc)
}

/// Transfer protocol: prompts tuned on `source` are applied unchanged to each
/// target's full label space. The source's own full-label accuracy is the
/// first row, for reference.
pub fn cross_dataset_eval(
    backbone: &Backbone,
    artifact: &TunedArtifact,
    source: &FewShotTask,
    targets: &[(String, FewShotTask)],
) -> Result<Vec<(String, f64)>> {
    artifact.ensure_backbone(backbone_checksum(backbone)?)?;
    let mut rows = Vec::with_capacity(targets.len() + 1);
    rows.push((
        "source".to_string(),
        whole_task_accuracy(backbone, artifact, source)?,
    ));
    for (name, task) in targets {
        rows.push((
            name.clone(),
            whole_task_accuracy(backbone, artifact, task)?,
        ));
    }
    Ok(rows)
}

/// Domain-shift protocol: the source base test pool is transformed by each
/// shift and rescored in the base label space.
pub fn domain_eval(
    backbone: &Backbone,
    artifact: &TunedArtifact,
    task: &FewShotTask,
    shifts: &[DomainShift],
) -> Result<Vec<(String, f64)>> {
    artifact.ensure_backbone(backbone_checksum(backbone)?)?;
    let base_names = task.base_names();
    let mut rows = Vec::with_capacity(shifts.len());
    for &shift in shifts {
        let shifted: Vec<LabeledImage> = task
            .test_base
            .iter()
            .map(|s| LabeledImage {
                class: s.class,
                image: apply_domain_shift(&s.image, shift),
            })
            .collect();
        let (acc, _) = split_accuracy(backbone, artifact, &base_names, &task.base, &shifted)?;
        rows.push((format!("{}@{:.2}", shift.kind.name(), shift.strength), acc));
    }
    Ok(rows)
}

/// A sweepable hyperparameter of the tuning pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Prompts,
    Depth,
    Length,
    Shots,
    Mode,
    Manual,
}

impl Axis {
    pub const ALL: [Axis; 6] = [
        Axis::Prompts,
        Axis::Depth,
        Axis::Length,
        Axis::Shots,
        Axis::Mode,
        Axis::Manual,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Axis::Prompts => "prompts",
            Axis::Depth => "depth",
            Axis::Length => "length",
            Axis::Shots => "shots",
            Axis::Mode => "mode",
            Axis::Manual => "manual",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Axis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "axis {s:?} not one of prompts/depth/length/shots/mode/manual"
                ))
            })
    }

    /// Default grid, used when the caller does not list explicit values.
    pub fn default_values(self) -> Vec<String> {
        let nums = |v: &[usize]| v.iter().map(|n| n.to_string()).collect();
        match self {
            Axis::Prompts => nums(&[1, 2, 4, 8]),
            Axis::Depth => nums(&[0, 4, 8, 12]),
            Axis::Length => nums(&[4, 10, 16]),
            Axis::Shots => nums(&[1, 4, 16]),
            Axis::Mode => Mode::ALL.iter().map(|m| m.name().to_string()).collect(),
            Axis::Manual => vec!["on".into(), "off".into()],
        }
    }

    /// Apply one grid value to a (config, task spec) cell.
    fn apply(self, value: &str, cfg: &mut TuneConfig, spec: &mut TaskSpec) -> Result<()> {
        let parse_num = |what: &str| {
            value.parse::<usize>().map_err(|_| {
                Error::Config(format!("{what} value {value:?} is not a whole number"))
            })
        };
        match self {
            Axis::Prompts => cfg.n_prompts = parse_num("prompts")?,
            Axis::Depth => cfg.depth = parse_num("depth")?,
            Axis::Length => cfg.ctx_len = parse_num("length")?,
            Axis::Shots => {
                let shots = parse_num("shots")?;
                cfg.shots = shots;
                spec.shots = shots;
            }
            Axis::Mode => cfg.mode = Mode::parse(value)?,
            Axis::Manual => match value {
                "on" => {
                    if cfg.manual.is_none() {
                        cfg.manual = Some("a photo of a {}".to_string());
                    }
                }
                "off" => cfg.manual = None,
                other => {
                    return Err(Error::Config(format!(
                        "manual value {other:?} must be \"on\" or \"off\""
                    )))
                }
            },
        }
        Ok(())
    }
}

/// Mean and population standard deviation over a sweep cell's seeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        Self {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepCell {
    pub value: String,
    pub base: Stat,
    pub new: Stat,
    pub harmonic: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub axis: String,
    pub seeds: Vec<u64>,
    pub cells: Vec<SweepCell>,
}

/// Tune and score one full base-to-new episode per (value, seed) cell and
/// aggregate each grid value over the seeds.
pub fn ablation_sweep(
    backbone: &Backbone,
    axis: Axis,
    values: &[String],
    base_config: &TuneConfig,
    base_spec: &TaskSpec,
    seeds: &[u64],
) -> Result<SweepTable> {
    if values.is_empty() {
        return Err(Error::Config("sweep needs at least one grid value".into()));
    }
    if seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one seed".into()));
    }
    let mut cells = Vec::with_capacity(values.len());
    for value in values {
        let mut bases = Vec::with_capacity(seeds.len());
        let mut news = Vec::with_capacity(seeds.len());
        let mut hs = Vec::with_capacity(seeds.len());
        for &seed in seeds {
            let mut cfg = base_config.clone();
            let mut spec = base_spec.clone();
            axis.apply(value, &mut cfg, &mut spec)?;
            cfg.seed = seed;
            spec.split_seed = seed;
            spec.world.seed = seed;
            let task = build_task(&spec)?;
            let outcome = tune(backbone, &task, &cfg)?;
            let report = base_to_new_eval(backbone, &outcome.artifact, &task)?;
            bases.push(report.base);
            news.push(report.new);
            hs.push(report.harmonic);
        }
        cells.push(SweepCell {
            value: value.clone(),
            base: Stat::of(&bases),
            new: Stat::of(&news),
            harmonic: Stat::of(&hs),
        });
    }
    Ok(SweepTable {
        axis: axis.name().to_string(),
        seeds: seeds.to_vec(),
        cells,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tensor;
    use crate::clip::{universal_tokenizer, Dims};
    use crate::dataset::ShiftKind;
    use proptest::prelude::*;

    #[test]
    fn accuracy_matches_hand_counts() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 100.0);
        assert_eq!(accuracy(&[1, 2, 3], &[4, 5, 6]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 4], &[1, 2, 3, 0]).unwrap(), 75.0);
    }

    #[test]
    fn accuracy_rejects_bad_inputs() {
        assert!(accuracy(&[], &[]).is_err());
        assert!(accuracy(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn harmonic_mean_reproduces_published_pairs() {
        assert!((harmonic_mean(82.69, 63.22).unwrap() - 71.66).abs() <= 0.01);
        assert!((harmonic_mean(82.91, 75.95).unwrap() - 79.27).abs() <= 0.01);
    }

    #[test]
    fn harmonic_mean_rejects_degenerate_inputs() {
        assert!(harmonic_mean(0.0, 0.0).is_err());
        assert!(harmonic_mean(-1.0, 50.0).is_err());
    }

    proptest! {
        #[test]
        fn harmonic_mean_is_bounded_and_idempotent(
            a in 0.01f64..100.0,
            b in 0.01f64..100.0,
        ) {
            let h = harmonic_mean(a, b).unwrap();
            prop_assert!(h >= a.min(b) - 1e-9);
            prop_assert!(h <= (a + b) / 2.0 + 1e-9);
            let same = harmonic_mean(a, a).unwrap();
            prop_assert!((same - a).abs() < 1e-9);
        }
    }

    #[test]
    fn report_constructor_enforces_ranges_and_recomputes_h() {
        let r = EvalReport::new(80.0, 60.0, vec![], "abcd".into(), vec![0]).unwrap();
        assert!((r.harmonic - harmonic_mean(80.0, 60.0).unwrap()).abs() < 1e-9);
        assert!(EvalReport::new(120.0, 60.0, vec![], String::new(), vec![]).is_err());
        assert!(EvalReport::new(
            50.0,
            60.0,
            vec![("x".into(), -2.0)],
            String::new(),
            vec![]
        )
        .is_err());
    }

    #[test]
    fn fingerprint_is_stable_and_config_sensitive() {
        let a = TuneConfig::defaults(0);
        let mut b = TuneConfig::defaults(0);
        assert_eq!(
            config_fingerprint(&a).unwrap(),
            config_fingerprint(&b).unwrap()
        );
        b.ctx_len += 1;
        assert_ne!(
            config_fingerprint(&a).unwrap(),
            config_fingerprint(&b).unwrap()
        );
        assert_eq!(config_fingerprint(&a).unwrap().len(), 16);
    }

    fn mini_backbone(seed: u64) -> Backbone {
        let dims = Dims::miniature();
        let tok = universal_tokenizer(dims.l_max).unwrap();
        Backbone::init(dims, tok, seed).unwrap()
    }

    fn mini_spec(seed: u64) -> TaskSpec {
        let mut spec = TaskSpec::default_task(seed);
        spec.world.image_side = 16;
        spec.shots = 2;
        spec.test_per_class = 2;
        spec
    }

    fn mini_artifact(backbone: &Backbone, task: &FewShotTask, seed: u64) -> TunedArtifact {
        let cfg = TuneConfig {
            n_prompts: 2,
            ctx_len: 2,
            depth: 2,
            shots: 2,
            epochs: 1,
            batch: 8,
            ..TuneConfig::defaults(seed)
        };
        tune(backbone, task, &cfg).unwrap().artifact
    }

    #[test]
    fn base_to_new_eval_is_deterministic_and_consistent() {
        let backbone = mini_backbone(7);
        let task = build_task(&mini_spec(7)).unwrap();
        let artifact = mini_artifact(&backbone, &task, 7);
        let a = base_to_new_eval(&backbone, &artifact, &task).unwrap();
        let b = base_to_new_eval(&backbone, &artifact, &task).unwrap();
        assert_eq!(a, b);
        let h = harmonic_mean(a.base, a.new).unwrap();
        assert!((a.harmonic - h).abs() < 1e-9);
        assert_eq!(a.per_class.len(), task.classes.len());
        assert!(a.per_class.iter().all(|(_, v)| (0.0..=100.0).contains(v)));
        assert_eq!(a.seeds, vec![7]);
    }

    #[test]
    fn eval_rejects_foreign_backbone() {
        let backbone = mini_backbone(8);
        let task = build_task(&mini_spec(8)).unwrap();
        let artifact = mini_artifact(&backbone, &task, 8);
        let other = mini_backbone(9);
        let err = base_to_new_eval(&other, &artifact, &task).unwrap_err();
        assert!(matches!(err, Error::BackboneMismatch { .. }));
    }

    #[test]
    fn cross_dataset_eval_scores_source_then_targets() {
        let backbone = mini_backbone(10);
        let source = build_task(&mini_spec(10)).unwrap();
        let artifact = mini_artifact(&backbone, &source, 10);
        let mut transfer = mini_spec(11);
        transfer.world = crate::dataset::ShapeWorldSpec {
            image_side: 16,
            ..crate::dataset::ShapeWorldSpec::transfer_world(11)
        };
        let target = build_task(&transfer).unwrap();
        let rows = cross_dataset_eval(
            &backbone,
            &artifact,
            &source,
            &[("transfer".into(), target)],
        )
        .unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[0].0, "source");
        assert_eq!(rows[1].0, "transfer");
        assert!(rows.iter().all(|(_, v)| (0.0..=100.0).contains(v)));
    }

    #[test]
    fn domain_eval_identity_shift_matches_plain_base_accuracy() {
        let backbone = mini_backbone(12);
        let task = build_task(&mini_spec(12)).unwrap();
        let artifact = mini_artifact(&backbone, &task, 12);
        let plain = base_to_new_eval(&backbone, &artifact, &task).unwrap();
        let rows = domain_eval(
            &backbone,
            &artifact,
            &task,
            &[
                DomainShift {
                    kind: ShiftKind::Invert,
                    strength: 0.0,
                },
                DomainShift {
                    kind: ShiftKind::Noise,
                    strength: 0.4,
                },
            ],
        )
        .unwrap();
        assert_eq!(rows[0].0, "invert@0.00");
        assert_eq!(rows[0].1, plain.base);
        assert_eq!(rows[1].0, "noise@0.40");
        assert!((0.0..=100.0).contains(&rows[1].1));
    }

    #[test]
    fn stat_matches_hand_computation() {
        let s = Stat::of(&[2.0, 4.0, 6.0]);
        assert!((s.mean - 4.0).abs() < 1e-12);
        assert!((s.std - (8.0f64 / 3.0).sqrt()).abs() < 1e-12);
        let single = Stat::of(&[5.0]);
        assert_eq!(single.mean, 5.0);
        assert_eq!(single.std, 0.0);
    }

    #[test]
    fn axis_parse_round_trips_and_rejects_unknown() {
        for axis in Axis::ALL {
            assert_eq!(Axis::parse(axis.name()).unwrap(), axis);
            assert!(!axis.default_values().is_empty());
        }
        assert!(Axis::parse("temperature").is_err());
    }

    #[test]
    fn ablation_sweep_aggregates_over_seeds() {
        let backbone = mini_backbone(13);
        let cfg = TuneConfig {
            n_prompts: 2,
            ctx_len: 2,
            depth: 2,
            shots: 2,
            epochs: 1,
            batch: 8,
            ..TuneConfig::defaults(13)
        };
        let table = ablation_sweep(
            &backbone,
            Axis::Depth,
            &["0".into(), "2".into()],
            &cfg,
            &mini_spec(13),
            &[0, 1],
        )
        .unwrap();
        assert_eq!(table.axis, "depth");
        assert_eq!(table.seeds, vec![0, 1]);
        assert_eq!(table.cells.len(), 2);
        for cell in &table.cells {
            assert!((0.0..=100.0).contains(&cell.base.mean));
            assert!(cell.base.std >= 0.0);
        }
        assert!(ablation_sweep(&backbone, Axis::Depth, &[], &cfg, &mini_spec(13), &[0]).is_err());
        assert!(ablation_sweep(
            &backbone,
            Axis::Depth,
            &["bogus".into()],
            &cfg,
            &mini_spec(13),
            &[0]
        )
        .is_err());
    }

    #[test]
    fn probability_hygiene_guard_trips_on_bad_rows() {
        // Direct check of the row-sum guard logic on a synthetic tensor.
        let bad = Tensor::new(vec![1, 3], vec![0.5, 0.2, 0.2]).unwrap();
        let sum: f64 = bad.row(0).iter().sum();
        assert!((sum - 1.0).abs() > 1e-6);
    }
}

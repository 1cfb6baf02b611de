//! Command-line surface binding the pipeline: pretrain → tune → eval →
//! ablate → inspect. One subcommand binary; all paths explicit; no
//! environment variables consulted. Every command is reproducible from its
//! arguments: re-running overwrites outputs bitwise-identically.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use serde::Deserialize;

use pmpo::checkpoint::Checkpoint;
use pmpo::clip::{
    backbone_checksum, backbone_from_checkpoint, backbone_to_checkpoint, pretrain, Backbone,
    PretrainConfig,
};
use pmpo::dataset::{build_task, render_image, DomainShift, ShapeWorldSpec, ShiftKind, TaskSpec};
use pmpo::error::{Error, Result};
use pmpo::eval::{
    ablation_sweep, base_to_new_eval, cross_dataset_eval, domain_eval, report_csv, report_text,
    sweep_csv, sweep_text, write_pgm, Axis,
};
use pmpo::prompt::{
    artifact_from_checkpoint, artifact_to_checkpoint, similarity_map, TunedArtifact,
};
use pmpo::tune::{gradcheck_report, tune, Mode, TuneConfig, GRADCHECK_TOLERANCE};

#[derive(Parser)]
#[command(
    name = "pmpo",
    about = "Desk-scale vision-language prompt tuning laboratory",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a contrastive backbone from scratch on synthetic pairs.
    Pretrain {
        /// JSON pretraining config; defaults are used when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Backbone checkpoint destination; a `.log.csv` sibling records the loss curve.
        #[arg(long)]
        out: PathBuf,
        /// Overrides the config's seed (and its world seed).
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Optimize prompt contexts and bridges on a frozen backbone.
    Tune {
        #[arg(long)]
        backbone: PathBuf,
        /// JSON task spec; the default base-to-new episode is used when omitted.
        #[arg(long)]
        task: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        n_prompts: usize,
        #[arg(long, default_value_t = 10)]
        ctx_len: usize,
        #[arg(long, default_value_t = 12)]
        depth: usize,
        /// One of pmpo, ss, ms, sm.
        #[arg(long, default_value = "pmpo")]
        mode: String,
        /// Manual template for the ensemble, or "none" to drop it.
        #[arg(long, default_value = "a photo of a {}")]
        manual: String,
        #[arg(long, default_value_t = 16)]
        shots: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 6)]
        epochs: usize,
        #[arg(long, default_value_t = 8)]
        batch: usize,
        #[arg(long, default_value_t = 0.002)]
        base_lr: f64,
        #[arg(long, default_value_t = 1e-5)]
        warmup_lr: f64,
        #[arg(long, default_value_t = 0.9)]
        momentum: f64,
        /// Include per-layer projection biases.
        #[arg(long, default_value_t = true, action = ArgAction::Set)]
        bridge_bias: bool,
        /// Tuned checkpoint destination; a `.history.csv` sibling records per-step stats.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a tuned artifact under one of the three protocols.
    Eval {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        tuned: PathBuf,
        /// One of base2new, crossdata, domain.
        #[arg(long)]
        protocol: String,
        /// JSON task spec; the default episode is used when omitted.
        #[arg(long)]
        task: Option<PathBuf>,
        /// Report CSV destination.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sweep one hyperparameter axis, aggregating base/new/H over seeds.
    Ablate {
        /// One of prompts, depth, length, shots, mode, manual.
        #[arg(long)]
        axis: String,
        /// Comma-separated grid values; the axis default grid when omitted.
        #[arg(long)]
        values: Option<String>,
        /// JSON sweep config: backbone path, plus optional base tune config,
        /// task spec, and seeds (defaults when omitted).
        #[arg(long)]
        config: PathBuf,
        /// Directory receiving `<axis>.csv` and `<axis>.txt`.
        #[arg(long)]
        out: PathBuf,
    },
    /// Audit analytic gradients against finite differences; nonzero exit on failure.
    Gradcheck {
        /// Optional JSON `{"seed": N}`; seed 0 when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Render patch-level prompt similarity maps as PGM files.
    Simmap {
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        tuned: PathBuf,
        /// Number of probe images to render.
        #[arg(long, default_value_t = 4)]
        images: usize,
        /// Directory receiving one graymap per (image, prompt).
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { config, out, seed } => cmd_pretrain(config, out, seed),
        Command::Tune {
            backbone,
            task,
            n_prompts,
            ctx_len,
            depth,
            mode,
            manual,
            shots,
            seed,
            epochs,
            batch,
            base_lr,
            warmup_lr,
            momentum,
            bridge_bias,
            out,
        } => {
            let cfg = TuneConfig {
                n_prompts,
                ctx_len,
                depth,
                shots,
                epochs,
                batch,
                base_lr,
                warmup_lr,
                momentum,
                seed,
                mode: Mode::parse(&mode)?,
                manual: (manual != "none").then_some(manual),
                bridge_bias,
                shared_init: false,
            };
            cmd_tune(backbone, task, cfg, out)
        }
        Command::Eval {
            backbone,
            tuned,
            protocol,
            task,
            out,
        } => cmd_eval(backbone, tuned, protocol, task, out),
        Command::Ablate {
            axis,
            values,
            config,
            out,
        } => cmd_ablate(axis, values, config, out),
        Command::Gradcheck { config } => cmd_gradcheck(config),
        Command::Simmap {
            backbone,
            tuned,
            images,
            out,
        } => cmd_simmap(backbone, tuned, images, out),
    }
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path)?;
    Ok(serde_json::from_slice(&bytes)?)
}

/// `<path>` with an extra extension appended after any existing one.
fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(suffix);
    PathBuf::from(os)
}

fn load_backbone(path: &Path) -> Result<Backbone> {
    backbone_from_checkpoint(&Checkpoint::load(path)?)
}

fn load_artifact(path: &Path, backbone: &Backbone) -> Result<TunedArtifact> {
    let artifact = artifact_from_checkpoint(&Checkpoint::load(path)?)?;
    artifact.ensure_backbone(backbone_checksum(backbone)?)?;
    Ok(artifact)
}

fn load_task_spec(path: Option<&Path>, fallback_seed: u64) -> Result<TaskSpec> {
    match path {
        Some(p) => read_json(p),
        None => Ok(TaskSpec::default_task(fallback_seed)),
    }
}

fn cmd_pretrain(config: Option<PathBuf>, out: PathBuf, seed: Option<u64>) -> Result<()> {
    let mut cfg: PretrainConfig = match &config {
        Some(p) => read_json(p)?,
        None => PretrainConfig::defaults(seed.unwrap_or(0)),
    };
    if let Some(s) = seed {
        cfg.seed = s;
        cfg.world.seed = s;
    }
    let (backbone, stats) = pretrain(&cfg)?;
    backbone_to_checkpoint(&backbone)?.save(&out)?;
    let mut log = String::from("epoch,mean_loss\n");
    for s in &stats {
        log.push_str(&format!("{},{}\n", s.epoch, s.mean_loss));
    }
    let log_path = sibling(&out, ".log.csv");
    fs::write(&log_path, log)?;
    println!(
        "wrote backbone to {} (final epoch loss {:.4}, logit scale {:.2}); log at {}",
        out.display(),
        stats.last().map_or(f64::NAN, |s| s.mean_loss),
        backbone.logit_scale(),
        log_path.display()
    );
    Ok(())
}

fn cmd_tune(
    backbone_path: PathBuf,
    task_path: Option<PathBuf>,
    mut cfg: TuneConfig,
    out: PathBuf,
) -> Result<()> {
    let backbone = load_backbone(&backbone_path)?;
    let mut spec = load_task_spec(task_path.as_deref(), cfg.seed)?;
    match task_path {
        // An explicit task file fixes the episode; keep the config's shot
        // count honest so fingerprints reflect what was actually trained on.
        Some(_) => cfg.shots = spec.shots,
        None => spec.shots = cfg.shots,
    }
    let task = build_task(&spec)?;
    let outcome = tune(&backbone, &task, &cfg)?;
    artifact_to_checkpoint(&outcome.artifact)?.save(&out)?;
    let history_path = sibling(&out, ".history.csv");
    fs::write(&history_path, outcome.history_csv())?;
    let last = outcome.history.last();
    println!(
        "wrote tuned artifact to {} ({} steps, final loss {}); history at {}",
        out.display(),
        outcome.history.len(),
        last.map_or("n/a".into(), |s| format!("{:.4}", s.loss)),
        history_path.display()
    );
    Ok(())
}

fn rows_csv(header: &str, rows: &[(String, f64)]) -> String {
    let mut out = format!("{header}\n");
    for (name, value) in rows {
        out.push_str(&format!("{name},{value}\n"));
    }
    out
}

fn rows_text(rows: &[(String, f64)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(4);
    rows.iter()
        .map(|(n, v)| format!("{n:<width$} {v:>7.2}"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn cmd_eval(
    backbone_path: PathBuf,
    tuned_path: PathBuf,
    protocol: String,
    task_path: Option<PathBuf>,
    out: PathBuf,
) -> Result<()> {
    let backbone = load_backbone(&backbone_path)?;
    let artifact = load_artifact(&tuned_path, &backbone)?;
    let spec = load_task_spec(task_path.as_deref(), artifact.config.seed)?;
    let task = build_task(&spec)?;
    let csv = match protocol.as_str() {
        "base2new" => {
            let report = base_to_new_eval(&backbone, &artifact, &task)?;
            print!("{}", report_text(&report));
            report_csv(&report)
        }
        "crossdata" => {
            let mut transfer = spec.clone();
            transfer.world = ShapeWorldSpec {
                image_side: spec.world.image_side,
                seed: spec.world.seed,
                ..ShapeWorldSpec::transfer_world(spec.split_seed)
            };
            let target = build_task(&transfer)?;
            let rows = cross_dataset_eval(
                &backbone,
                &artifact,
                &task,
                &[("transfer".to_string(), target)],
            )?;
            println!("{}", rows_text(&rows));
            rows_csv("dataset,accuracy", &rows)
        }
        "domain" => {
            let shifts: Vec<DomainShift> = ShiftKind::ALL
                .into_iter()
                .flat_map(|kind| {
                    [0.25, 0.5].map(|strength| DomainShift { kind, strength })
                })
                .collect();
            let rows = domain_eval(&backbone, &artifact, &task, &shifts)?;
            println!("{}", rows_text(&rows));
            rows_csv("shift,accuracy", &rows)
        }
        other => {
            return Err(Error::Config(format!(
                "protocol {other:?} not one of base2new/crossdata/domain"
            )))
        }
    };
    fs::write(&out, csv)?;
    println!("wrote report to {}", out.display());
    Ok(())
}

/// Everything a sweep needs beyond the axis and grid, as one JSON document.
#[derive(Debug, Deserialize)]
struct AblateConfig {
    backbone: PathBuf,
    #[serde(default = "default_sweep_tune")]
    tune: TuneConfig,
    #[serde(default = "default_sweep_task")]
    task: TaskSpec,
    #[serde(default = "default_sweep_seeds")]
    seeds: Vec<u64>,
}

fn default_sweep_tune() -> TuneConfig {
    TuneConfig::defaults(0)
}

fn default_sweep_task() -> TaskSpec {
    TaskSpec::default_task(0)
}

fn default_sweep_seeds() -> Vec<u64> {
    vec![0, 1, 2]
}

fn cmd_ablate(
    axis: String,
    values: Option<String>,
    config: PathBuf,
    out_dir: PathBuf,
) -> Result<()> {
    let cfg: AblateConfig = read_json(&config)?;
    let axis = Axis::parse(&axis)?;
    let values: Vec<String> = match values {
        Some(list) => list.split(',').map(|s| s.trim().to_string()).collect(),
        None => axis.default_values(),
    };
    let backbone = load_backbone(&cfg.backbone)?;
    let table = ablation_sweep(&backbone, axis, &values, &cfg.tune, &cfg.task, &cfg.seeds)?;
    fs::create_dir_all(&out_dir)?;
    let csv_path = out_dir.join(format!("{}.csv", axis.name()));
    let txt_path = out_dir.join(format!("{}.txt", axis.name()));
    fs::write(&csv_path, sweep_csv(&table))?;
    fs::write(&txt_path, sweep_text(&table))?;
    print!("{}", sweep_text(&table));
    println!("wrote {} and {}", csv_path.display(), txt_path.display());
    Ok(())
}

#[derive(Debug, Deserialize)]
struct GradcheckConfig {
    #[serde(default)]
    seed: u64,
}

fn cmd_gradcheck(config: Option<PathBuf>) -> Result<()> {
    let cfg: GradcheckConfig = match &config {
        Some(p) => read_json(p)?,
        None => GradcheckConfig { seed: 0 },
    };
    let report = gradcheck_report(cfg.seed)?;
    println!("{:<16} {:>7} {:>14}", "group", "coords", "max rel error");
    for g in &report.groups {
        println!("{:<16} {:>7} {:>14.3e}", g.name, g.coords, g.max_rel_error);
    }
    println!(
        "{:<16} {:>7} {:>14.3e}",
        "total", report.coords_checked, report.max_rel_error
    );
    if report.max_rel_error >= GRADCHECK_TOLERANCE {
        return Err(Error::Numeric(format!(
            "gradient check failed: max relative error {:.3e} >= {GRADCHECK_TOLERANCE:.0e}",
            report.max_rel_error
        )));
    }
    println!("gradient check passed ({} coordinates)", report.coords_checked);
    Ok(())
}

/// Nearest-neighbor upscale of a square map by an integer factor.
fn upscale(map: &[f64], side: usize, factor: usize) -> Vec<f64> {
    let out_side = side * factor;
    let mut out = Vec::with_capacity(out_side * out_side);
    for y in 0..out_side {
        for x in 0..out_side {
            out.push(map[(y / factor) * side + x / factor]);
        }
    }
    out
}

fn cmd_simmap(
    backbone_path: PathBuf,
    tuned_path: PathBuf,
    images: usize,
    out_dir: PathBuf,
) -> Result<()> {
    if images == 0 {
        return Err(Error::Config("images must be >= 1".into()));
    }
    let backbone = load_backbone(&backbone_path)?;
    let artifact = load_artifact(&tuned_path, &backbone)?;
    let mut world = ShapeWorldSpec::deployment_world(artifact.config.seed);
    world.image_side = backbone.dims.image_side;
    let names = world.class_names();
    let patch_grid = backbone.dims.image_side / backbone.dims.patch_side;
    fs::create_dir_all(&out_dir)?;
    for i in 0..images {
        let class = i % names.len();
        let image = render_image(&world, class, 9000 + i as u64)?;
        // Reference luma of the probe image, for side-by-side inspection.
        let luma: Vec<f64> = image
            .pixels
            .chunks_exact(3)
            .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
            .collect();
        write_pgm(
            &out_dir.join(format!("img{i:02}_input.pgm")),
            image.side,
            image.side,
            &luma,
        )?;
        for n in 0..artifact.prompts.n() {
            let map = similarity_map(
                &backbone,
                &artifact.prompts,
                &artifact.partition,
                &names,
                &image,
                n,
                class,
            )?;
            let big = upscale(&map, patch_grid, backbone.dims.patch_side);
            write_pgm(
                &out_dir.join(format!("img{i:02}_prompt{n:02}.pgm")),
                patch_grid * backbone.dims.patch_side,
                patch_grid * backbone.dims.patch_side,
                &big,
            )?;
        }
    }
    println!(
        "wrote {} maps ({} images x {} prompts) to {}",
        images * artifact.prompts.n(),
        images,
        artifact.prompts.n(),
        out_dir.display()
    );
    Ok(())
}

//! Command line front end. Every command prints one JSON summary line on
//! success. Exit codes: 0 success, 2 validation (config, shapes, numeric
//! guards), 3 adapter endpoint problems, 4 data and file problems.

use clap::{ArgGroup, Parser, Subcommand};
use sketchfuse::apps::{
    apply_direction, extract_sketch, read_paired_dataset, sketch_from_latent, synthesize_pairs,
    toygen_dataset, write_paired_dataset, EditDirection,
};
use sketchfuse::checkpoint::checkpoint_load;
use sketchfuse::config::{
    dataset_ingest, eval_metrics, load_config, load_training_pairs, resolve_adapters, save_config,
    write_eval_csv, ExperimentConfig,
};
use sketchfuse::error::Error;
use sketchfuse::fusion::SketchGeneratorParams;
use sketchfuse::image::{load_rgb, save_sketch};
use sketchfuse::tap::{invert_image, GeneratorHandle, InverterConfig, LatentCode};
use sketchfuse::trainer::train;
use serde_json::json;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "sketchfuse", version, about = "Sketch extraction on a frozen face generator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train the sketch head on a paired dataset with stored latents.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (photo/, sketch/, latent/). Overrides the
        /// config's data_dir.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        /// Resume from this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Resume even if the checkpoint was written under another config.
        #[arg(long)]
        force_resume: bool,
    },
    /// Recover the latent code of a photo under the frozen generator.
    Invert {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        /// Output .npy path for the latent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Refinement steps (default from the inverter config).
        #[arg(long)]
        steps: Option<usize>,
        /// Seed override; inversion itself is deterministic.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Produce a sketch from a photo (inverting first) or from a latent.
    #[command(group(ArgGroup::new("source").required(true).args(["image", "latent"])))]
    Extract {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Trained sketch-head checkpoint; omitted means fresh seed params.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        image: Option<PathBuf>,
        #[arg(long)]
        latent: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Seeds the fresh head parameters when no checkpoint is given.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Move a latent along a direction and re-render the sketch.
    Edit {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        latent: PathBuf,
        /// Direction .npy: one row, or one row per generator layer.
        #[arg(long)]
        direction: PathBuf,
        #[arg(long)]
        alpha: f64,
        /// Layers the edit touches, as start..end.
        #[arg(long)]
        layer_range: Option<String>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seeds the fresh head parameters when no checkpoint is given.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Synthesize a paired photo/sketch dataset from seeded latent draws.
    SynthPairs {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value = "default")]
        style_tag: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predicted sketches against ground truth, writing a CSV table.
    Eval {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed override; scoring is deterministic.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Generate a toy dataset: generator photos, filtered ground-truth
    /// sketches, and the exact latents.
    Toygen {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 4)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parse and validate a config file without running anything.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
        /// Seed override, folded into the normalized output.
        #[arg(long)]
        seed: Option<u64>,
        /// Write the validated, fully defaulted config here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code_of(err: &Error) -> u8 {
    match err {
        Error::Config(_) | Error::Shape(_) | Error::Numeric(_) => 2,
        Error::Adapter(_) => 3,
        Error::Data(_) | Error::Io(_) | Error::Image(_) | Error::Checkpoint(_) => 4,
    }
}

fn load_or_default(path: &Option<PathBuf>) -> Result<ExperimentConfig, Error> {
    match path {
        Some(p) => load_config(p),
        None => Ok(ExperimentConfig::default()),
    }
}

/// Sketch-head parameters: from a checkpoint when given, else freshly
/// seeded exactly as training would initialize them.
fn sketch_params(
    cfg: &ExperimentConfig,
    generator: &GeneratorHandle,
    checkpoint: &Option<PathBuf>,
) -> Result<SketchGeneratorParams, Error> {
    let mut params = SketchGeneratorParams::build(
        &generator.schedule,
        cfg.ablation,
        cfg.train.seed ^ 0x5e7c,
    )?;
    if let Some(path) = checkpoint {
        let ckpt = checkpoint_load(path)?;
        params.set_tensors(&ckpt.generator)?;
    }
    Ok(params)
}

fn parse_layer_range(s: &str) -> Result<std::ops::Range<usize>, Error> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| Error::config(format!("layer range {s:?} is not start..end")))?;
    let start = a
        .parse()
        .map_err(|_| Error::config(format!("bad range start {a:?}")))?;
    let end = b
        .parse()
        .map_err(|_| Error::config(format!("bad range end {b:?}")))?;
    Ok(start..end)
}

fn run(cli: Cli) -> Result<serde_json::Value, Error> {
    match cli.command {
        Command::Train {
            config,
            data,
            out,
            seed,
            resume,
            force_resume,
        } => {
            let mut cfg = load_or_default(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let data_dir = data
                .or(cfg.paths.data_dir.clone())
                .ok_or_else(|| Error::config("no dataset: pass --data or set paths.data_dir"))?;
            let out_dir = out
                .or(cfg.paths.out_dir.clone())
                .unwrap_or_else(|| PathBuf::from("out"));
            let resolved = resolve_adapters(&cfg)?;
            let res = resolved.generator.schedule.output_resolution;
            let (dataset, report) = dataset_ingest(&data_dir, res)?;
            let pairs = load_training_pairs(&dataset)?;
            let mut setup = cfg.setup();
            setup.force_resume = force_resume;
            let run = train(
                &cfg.train,
                &pairs,
                &resolved.generator,
                &resolved.train,
                &setup,
                &out_dir,
                resume.as_deref(),
            )?;
            Ok(json!({
                "command": "train",
                "pairs": pairs.len(),
                "skipped_orphans": report.orphans.len(),
                "iterations": cfg.train.total_iters,
                "final_checkpoint": run.final_checkpoint,
                "log": out_dir.join("train_log.jsonl"),
                "final_total_g": run.log.last().map(|r| r.total_g),
            }))
        }
        Command::Invert {
            config,
            image,
            out,
            steps,
            seed,
        } => {
            let mut cfg = load_or_default(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let resolved = resolve_adapters(&cfg)?;
            let photo = load_rgb(&image)?;
            let mut inv = InverterConfig::default();
            if let Some(s) = steps {
                inv.refine_steps = s;
            }
            let latent = invert_image(&photo, &resolved.generator, &inv)?;
            let out = out.unwrap_or_else(|| PathBuf::from("latent.npy"));
            latent.save(&out)?;
            Ok(json!({
                "command": "invert",
                "image": image,
                "latent": out,
                "refine_steps": inv.refine_steps,
            }))
        }
        Command::Extract {
            config,
            checkpoint,
            image,
            latent,
            out,
            steps,
            seed,
        } => {
            let mut cfg = load_or_default(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let resolved = resolve_adapters(&cfg)?;
            let params = sketch_params(&cfg, &resolved.generator, &checkpoint)?;
            let out = out.unwrap_or_else(|| PathBuf::from("sketch.png"));
            let (sketch, latent_used) = match (image, latent) {
                (Some(img_path), None) => {
                    let photo = load_rgb(&img_path)?;
                    let mut inv = InverterConfig::default();
                    if let Some(s) = steps {
                        inv.refine_steps = s;
                    }
                    extract_sketch(&photo, &resolved.generator, &params, &inv)?
                }
                (None, Some(lat_path)) => {
                    let code = LatentCode::load(&lat_path)?;
                    let sketch = sketch_from_latent(&code, &resolved.generator, &params)?;
                    (sketch, code)
                }
                // clap's arg group rules this out.
                _ => unreachable!("exactly one of --image/--latent"),
            };
            save_sketch(&out, &sketch)?;
            Ok(json!({
                "command": "extract",
                "sketch": out,
                "latent_layers": latent_used.n_layers(),
            }))
        }
        Command::Edit {
            config,
            checkpoint,
            latent,
            direction,
            alpha,
            layer_range,
            out,
            seed,
        } => {
            let mut cfg = load_or_default(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let resolved = resolve_adapters(&cfg)?;
            let params = sketch_params(&cfg, &resolved.generator, &checkpoint)?;
            let code = LatentCode::load(&latent)?;
            let mut dir = EditDirection::from_npy(&direction, "cli")?;
            if let Some(s) = &layer_range {
                dir = dir.with_layer_range(parse_layer_range(s)?);
            }
            let edited = apply_direction(&code, &dir, alpha)?;
            let sketch = sketch_from_latent(&edited, &resolved.generator, &params)?;
            let out = out.unwrap_or_else(|| PathBuf::from("edited.png"));
            save_sketch(&out, &sketch)?;
            Ok(json!({
                "command": "edit",
                "alpha": alpha,
                "sketch": out,
            }))
        }
        Command::SynthPairs {
            config,
            checkpoint,
            count,
            seed,
            style_tag,
            out,
        } => {
            let cfg = load_or_default(&config)?;
            let resolved = resolve_adapters(&cfg)?;
            let params = sketch_params(&cfg, &resolved.generator, &checkpoint)?;
            let seed = seed.unwrap_or(cfg.train.seed);
            let samples = synthesize_pairs(count, seed, &resolved.generator, &params, &style_tag)?;
            let manifest = write_paired_dataset(&out, &samples, seed)?;
            Ok(json!({
                "command": "synth-pairs",
                "out": out,
                "count": manifest.count,
                "seed": manifest.seed,
                "style_tag": manifest.style_tag,
            }))
        }
        Command::Eval {
            config,
            pred,
            gt,
            out,
            seed,
        } => {
            let mut cfg = load_or_default(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let resolved = resolve_adapters(&cfg)?;
            let report = eval_metrics(&pred, &gt, &resolved.metrics)?;
            let out = out.unwrap_or_else(|| PathBuf::from("eval.csv"));
            write_eval_csv(&out, &report)?;
            let aggregates: serde_json::Map<String, serde_json::Value> = report
                .metric_names
                .iter()
                .zip(report.aggregates.iter())
                .map(|(n, a)| {
                    (
                        n.clone(),
                        a.map(|v| json!(v)).unwrap_or(json!("unavailable")),
                    )
                })
                .collect();
            Ok(json!({
                "command": "eval",
                "pairs": report.rows.len(),
                "table": out,
                "aggregates": aggregates,
            }))
        }
        Command::Toygen {
            config,
            count,
            seed,
            out,
        } => {
            let cfg = load_or_default(&config)?;
            let resolved = resolve_adapters(&cfg)?;
            let seed = seed.unwrap_or(cfg.train.seed);
            let manifest = toygen_dataset(&out, count, seed, &resolved.generator, "toy")?;
            // Round-trip check keeps a broken layout from passing silently.
            let (samples, _) = read_paired_dataset(&out)?;
            debug_assert_eq!(samples.len(), manifest.count);
            Ok(json!({
                "command": "toygen",
                "out": out,
                "count": manifest.count,
                "seed": manifest.seed,
                "resolution": manifest.resolution,
            }))
        }
        Command::ValidateConfig { config, seed, out } => {
            let mut cfg = load_config(&config)?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let schedule = cfg.schedule.resolve()?;
            if let Some(path) = &out {
                save_config(path, &cfg)?;
            }
            Ok(json!({
                "command": "validate-config",
                "config": config,
                "normalized": out,
                "schedule_entries": schedule.entries.len(),
                "total_iters": cfg.train.total_iters,
                "stage1_iters": cfg.train.stage1_iters,
                "regions": cfg.regions.len(),
            }))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code_of(&e))
        }
    }
}

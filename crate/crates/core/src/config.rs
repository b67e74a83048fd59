//! Experiment configuration, dataset ingestion, and metric evaluation.
//! Configs are TOML with strict keys: a typo fails loudly instead of
//! silently training with a default. An empty file is a valid config and
//! means "all defaults".

use crate::adapters::{
    ChannelMeanEmbed, EmbedCosineMetric, EmbeddingAdapter, FixedRandomEmbed, FixedRandomFeatures,
    IdentityFeatures, L1Metric, MetricAdapter, PerceptualAdapter, SsimMetric, UnavailableMetric,
    UnreachableEmbedding, UnreachablePerceptual,
};
use crate::error::{Error, Result};
use crate::fusion::AblationFlags;
use crate::image::load_rgb;
use crate::parsing::{
    default_perceptual_parts, default_regions, FaceParser, PartGroup, StubMode, StubParser,
    UnreachableParser,
};
use crate::tap::{build_toy_generator, FeatureSchedule, GeneratorHandle, LatentCode};
use crate::trainer::{TrainAdapters, TrainConfig, TrainPair, TrainSetup};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// "full-1024" or "toy-64". Overrides the explicit fields when set.
    pub preset: Option<String>,
    pub entries: Option<Vec<(usize, usize)>>,
    pub base_resolution: Option<usize>,
    pub output_resolution: Option<usize>,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            preset: Some("full-1024".to_string()),
            entries: None,
            base_resolution: None,
            output_resolution: None,
        }
    }
}

impl ScheduleConfig {
    pub fn resolve(&self) -> Result<FeatureSchedule> {
        if let Some(p) = &self.preset {
            return match p.as_str() {
                "full-1024" => Ok(FeatureSchedule::full_scale()),
                "toy-64" => Ok(FeatureSchedule::toy_64()),
                other => Err(Error::config(format!(
                    "unknown schedule preset {other:?} (expected \"full-1024\" or \"toy-64\")"
                ))),
            };
        }
        match (&self.entries, self.base_resolution, self.output_resolution) {
            (Some(entries), Some(base), Some(out)) => {
                let s = FeatureSchedule {
                    entries: entries.clone(),
                    base_resolution: base,
                    output_resolution: out,
                };
                s.validate()?;
                Ok(s)
            }
            _ => Err(Error::config(
                "schedule needs either a preset or all of entries, \
                 base_resolution, output_resolution",
            )),
        }
    }
}

/// Adapter endpoints as strings, so a config can swap the frozen generator
/// or any helper network without recompiling. Locally resolvable schemes:
/// `toy:<seed>` (generator), `stub:layout` / `stub:all-background`
/// (parser), `identity` / `fixed-random:<seed>` (perceptual),
/// `channel-mean` / `fixed-random:<seed>` (embedding), and the metric names
/// `l1`, `ssim`, `embed-cos`. A `remote:<url>` generator, parser,
/// perceptual, or embedding endpoint cannot be reached from this build and
/// fails resolution; a `remote:` metric resolves to an unavailable marker
/// so evaluation can still run the rest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdapterConfig {
    pub generator: String,
    pub parser: String,
    pub perceptual: String,
    pub embedding: String,
    pub metrics: Vec<String>,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            generator: "toy:0".to_string(),
            parser: "stub:layout".to_string(),
            perceptual: "fixed-random:7".to_string(),
            embedding: "channel-mean".to_string(),
            metrics: vec!["l1".to_string(), "ssim".to_string(), "embed-cos".to_string()],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub data_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub ablation: AblationFlags,
    pub regions: Vec<PartGroup>,
    pub parts: Vec<PartGroup>,
    pub adapters: AdapterConfig,
    pub paths: PathsConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            ablation: AblationFlags::default(),
            regions: default_regions(),
            parts: default_perceptual_parts(),
            adapters: AdapterConfig::default(),
            paths: PathsConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        self.schedule.resolve()?;
        self.train.validate()?;
        for g in self.regions.iter().chain(self.parts.iter()) {
            g.resolve()?;
        }
        if self.regions.is_empty() {
            return Err(Error::config("at least one discriminator region is required"));
        }
        Ok(())
    }

    pub fn setup(&self) -> TrainSetup {
        TrainSetup {
            regions: self.regions.clone(),
            parts: self.parts.clone(),
            ablation: self.ablation,
            ..TrainSetup::default()
        }
    }
}

/// Parse and validate a config file. An empty file yields the defaults;
/// an unknown key anywhere is an error naming it.
pub fn load_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    let cfg: ExperimentConfig =
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn save_config(path: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let text = toml::to_string_pretty(cfg).map_err(|e| Error::config(e.to_string()))?;
    std::fs::write(path, text)?;
    Ok(())
}

fn seed_of(endpoint: &str, rest: &str) -> Result<u64> {
    rest.parse::<u64>()
        .map_err(|_| Error::adapter(format!("endpoint {endpoint:?}: bad seed {rest:?}")))
}

pub fn resolve_generator(endpoint: &str, schedule: &FeatureSchedule) -> Result<GeneratorHandle> {
    match endpoint.split_once(':') {
        Some(("toy", rest)) => build_toy_generator(schedule, seed_of(endpoint, rest)?),
        Some(("remote", url)) => Err(Error::adapter(format!(
            "generator endpoint {url:?} is not reachable from this build"
        ))),
        _ => Err(Error::adapter(format!(
            "unknown generator endpoint {endpoint:?}"
        ))),
    }
}

pub fn resolve_parser(endpoint: &str) -> Result<Arc<dyn FaceParser>> {
    match endpoint {
        "stub:layout" => Ok(Arc::new(StubParser {
            mode: StubMode::Layout,
        })),
        "stub:all-background" => Ok(Arc::new(StubParser {
            mode: StubMode::AllBackground,
        })),
        other if other.starts_with("remote:") => Ok(Arc::new(UnreachableParser {
            endpoint: other.to_string(),
        })),
        other => Err(Error::adapter(format!("unknown parser endpoint {other:?}"))),
    }
}

pub fn resolve_perceptual(endpoint: &str) -> Result<Arc<dyn PerceptualAdapter>> {
    match endpoint {
        "identity" => Ok(Arc::new(IdentityFeatures)),
        other if other.starts_with("fixed-random:") => Ok(Arc::new(FixedRandomFeatures::new(
            seed_of(other, &other["fixed-random:".len()..])?,
        ))),
        other if other.starts_with("remote:") => Ok(Arc::new(UnreachablePerceptual {
            endpoint: other.to_string(),
        })),
        other => Err(Error::adapter(format!(
            "unknown perceptual endpoint {other:?}"
        ))),
    }
}

pub fn resolve_embedding(endpoint: &str) -> Result<Arc<dyn EmbeddingAdapter>> {
    match endpoint {
        "channel-mean" => Ok(Arc::new(ChannelMeanEmbed)),
        other if other.starts_with("fixed-random:") => Ok(Arc::new(FixedRandomEmbed::new(
            seed_of(other, &other["fixed-random:".len()..])?,
        ))),
        other if other.starts_with("remote:") => Ok(Arc::new(UnreachableEmbedding {
            endpoint: other.to_string(),
        })),
        other => Err(Error::adapter(format!(
            "unknown embedding endpoint {other:?}"
        ))),
    }
}

pub fn resolve_metric(
    endpoint: &str,
    embedding: &Arc<dyn EmbeddingAdapter>,
) -> Result<Arc<dyn MetricAdapter>> {
    match endpoint {
        "l1" => Ok(Arc::new(L1Metric)),
        "ssim" => Ok(Arc::new(SsimMetric)),
        "embed-cos" => Ok(Arc::new(EmbedCosineMetric {
            embed: embedding.clone(),
        })),
        other if other.starts_with("remote:") => Ok(Arc::new(UnavailableMetric {
            metric_name: other.to_string(),
        })),
        other => Err(Error::adapter(format!("unknown metric endpoint {other:?}"))),
    }
}

pub struct ResolvedAdapters {
    pub generator: GeneratorHandle,
    pub train: TrainAdapters,
    pub metrics: Vec<Arc<dyn MetricAdapter>>,
}

pub fn resolve_adapters(cfg: &ExperimentConfig) -> Result<ResolvedAdapters> {
    let schedule = cfg.schedule.resolve()?;
    let generator = resolve_generator(&cfg.adapters.generator, &schedule)?;
    let embedding = resolve_embedding(&cfg.adapters.embedding)?;
    let metrics = cfg
        .adapters
        .metrics
        .iter()
        .map(|m| resolve_metric(m, &embedding))
        .collect::<Result<Vec<_>>>()?;
    Ok(ResolvedAdapters {
        generator,
        train: TrainAdapters {
            perceptual: resolve_perceptual(&cfg.adapters.perceptual)?,
            embedding,
            parser: resolve_parser(&cfg.adapters.parser)?,
        },
        metrics,
    })
}

/// One photo/sketch pair on disk, latent optional until training needs it.
#[derive(Debug, Clone, PartialEq)]
pub struct PairEntry {
    pub stem: String,
    pub photo: PathBuf,
    pub sketch: PathBuf,
    pub latent: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedDataset {
    pub pairs: Vec<PairEntry>,
    pub style_tag: String,
    pub resolution: usize,
}

/// What ingestion skipped and why. Orphans are stems present on only one
/// side; errors are per-file problems like a wrong resolution.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub matched: usize,
    pub orphans: Vec<String>,
    pub errors: Vec<String>,
}

fn png_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir)
        .map_err(|e| Error::data(format!("cannot read {}: {e}", dir.display())))?;
    for entry in entries {
        let path = entry?.path();
        if path.extension().map(|e| e == "png").unwrap_or(false) {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

fn check_resolution(path: &Path, expected: usize, errors: &mut Vec<String>) -> bool {
    match ::image::image_dimensions(path) {
        Ok((w, h)) if w as usize == expected && h as usize == expected => true,
        Ok((w, h)) => {
            errors.push(format!(
                "{}: is {w}x{h}, dataset expects {expected}x{expected}",
                path.display()
            ));
            false
        }
        Err(e) => {
            errors.push(format!("{}: {e}", path.display()));
            false
        }
    }
}

/// Walk `dir/photo` and `dir/sketch`, matching files by stem. Unmatched or
/// mis-sized files are reported and left out; an ingest that matches
/// nothing is an error.
pub fn dataset_ingest(dir: &Path, expected_resolution: usize) -> Result<(PairedDataset, IngestReport)> {
    let photos = png_stems(&dir.join("photo"))?;
    let sketches = png_stems(&dir.join("sketch"))?;
    let mut report = IngestReport::default();
    let mut pairs = Vec::new();

    for (stem, photo) in &photos {
        let Some(sketch) = sketches.get(stem) else {
            report.orphans.push(format!("photo/{stem}.png has no sketch"));
            continue;
        };
        let ok_photo = check_resolution(photo, expected_resolution, &mut report.errors);
        let ok_sketch = check_resolution(sketch, expected_resolution, &mut report.errors);
        if !(ok_photo && ok_sketch) {
            continue;
        }
        let latent_path = dir.join("latent").join(format!("{stem}.npy"));
        pairs.push(PairEntry {
            stem: stem.clone(),
            photo: photo.clone(),
            sketch: sketch.clone(),
            latent: latent_path.exists().then_some(latent_path),
        });
    }
    for stem in sketches.keys() {
        if !photos.contains_key(stem) {
            report.orphans.push(format!("sketch/{stem}.png has no photo"));
        }
    }
    report.matched = pairs.len();
    if pairs.is_empty() {
        return Err(Error::data(format!(
            "no usable pairs under {} ({} orphans, {} file errors)",
            dir.display(),
            report.orphans.len(),
            report.errors.len()
        )));
    }
    let style_tag = dir
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("dataset")
        .to_string();
    Ok((
        PairedDataset {
            pairs,
            style_tag,
            resolution: expected_resolution,
        },
        report,
    ))
}

/// Materialize a dataset for training. Every pair must carry a latent file;
/// training replays the frozen generator from them.
pub fn load_training_pairs(ds: &PairedDataset) -> Result<Vec<TrainPair>> {
    let mut out = Vec::with_capacity(ds.pairs.len());
    for p in &ds.pairs {
        let latent_path = p.latent.as_ref().ok_or_else(|| {
            Error::data(format!(
                "pair {:?} has no latent file; run inversion (or pair synthesis) first",
                p.stem
            ))
        })?;
        out.push(TrainPair {
            photo: load_rgb(&p.photo)?,
            sketch: crate::image::load_sketch(&p.sketch)?,
            latent: LatentCode::load(latent_path)?,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub stem: String,
    /// One slot per metric, in report order. `None` marks an unavailable
    /// metric, not a zero score.
    pub scores: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub metric_names: Vec<String>,
    pub rows: Vec<EvalRow>,
    pub aggregates: Vec<Option<f64>>,
}

/// Score every stem present in both directories under every metric.
/// Metrics whose adapter is unavailable stay in the table as gaps.
pub fn eval_metrics(
    pred_dir: &Path,
    gt_dir: &Path,
    metrics: &[Arc<dyn MetricAdapter>],
) -> Result<EvalReport> {
    let preds = png_stems(pred_dir)?;
    let gts = png_stems(gt_dir)?;
    let metric_names: Vec<String> = metrics.iter().map(|m| m.name().to_string()).collect();
    let mut rows = Vec::new();
    for (stem, pred_path) in &preds {
        let Some(gt_path) = gts.get(stem) else {
            continue;
        };
        let pred = load_rgb(pred_path)?;
        let gt = load_rgb(gt_path)?;
        let mut scores = Vec::with_capacity(metrics.len());
        for m in metrics {
            if m.available() {
                scores.push(Some(m.score(&gt, &pred)?));
            } else {
                scores.push(None);
            }
        }
        rows.push(EvalRow {
            stem: stem.clone(),
            scores,
        });
    }
    if rows.is_empty() {
        return Err(Error::data(format!(
            "no common stems between {} and {}",
            pred_dir.display(),
            gt_dir.display()
        )));
    }
    let aggregates = (0..metrics.len())
        .map(|j| {
            let vals: Vec<f64> = rows.iter().filter_map(|r| r.scores[j]).collect();
            if vals.is_empty() {
                None
            } else {
                Some(vals.iter().sum::<f64>() / vals.len() as f64)
            }
        })
        .collect();
    Ok(EvalReport {
        metric_names,
        rows,
        aggregates,
    })
}

/// Per-pair scores plus a trailing mean row. Unavailable metrics show as
/// the word "unavailable" so a gap is distinguishable from a zero.
pub fn write_eval_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::data(e.to_string()))?;
    let mut header = vec!["stem".to_string()];
    header.extend(report.metric_names.iter().cloned());
    w.write_record(&header).map_err(|e| Error::data(e.to_string()))?;
    let fmt = |s: &Option<f64>| match s {
        Some(v) => format!("{v:.6}"),
        None => "unavailable".to_string(),
    };
    for row in &report.rows {
        let mut rec = vec![row.stem.clone()];
        rec.extend(row.scores.iter().map(fmt));
        w.write_record(&rec).map_err(|e| Error::data(e.to_string()))?;
    }
    let mut rec = vec!["mean".to_string()];
    rec.extend(report.aggregates.iter().map(fmt));
    w.write_record(&rec).map_err(|e| Error::data(e.to_string()))?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::apps::toygen_dataset;
    use ndarray::Array3;

    #[test]
    fn empty_config_is_all_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("empty.toml");
        std::fs::write(&p, "").unwrap();
        let cfg = load_config(&p).unwrap();
        assert_eq!(cfg, ExperimentConfig::default());
        assert_eq!(cfg.train.total_iters, 7200);
        assert_eq!(cfg.train.stage1_iters, 1600);
        assert_eq!(cfg.train.lr, 0.00014);
        assert_eq!(cfg.train.weights_stage1.recon, 200.0);
        assert_eq!(cfg.train.weights_stage2.recon, 0.0);
    }

    #[test]
    fn unknown_keys_are_named_and_fatal() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.toml");
        std::fs::write(&p, "[train]\ntotal_iters = 100\nlearning_rate = 0.1\n").unwrap();
        match load_config(&p) {
            Err(Error::Config(msg)) => assert!(msg.contains("learning_rate"), "{msg}"),
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn stage_overrun_names_both_fields() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\ntotal_iters = 100\nstage1_iters = 200\n").unwrap();
        match load_config(&p) {
            Err(Error::Config(msg)) => {
                assert!(msg.contains("stage1_iters") && msg.contains("total_iters"), "{msg}");
            }
            other => panic!("expected config error, got {other:?}"),
        }
    }

    #[test]
    fn negative_lr_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nlr = -0.1\n").unwrap();
        assert!(matches!(load_config(&p), Err(Error::Config(_))));
    }

    #[test]
    fn config_roundtrips_through_toml() {
        let mut cfg = ExperimentConfig::default();
        cfg.schedule.preset = Some("toy-64".to_string());
        cfg.train.total_iters = 300;
        cfg.train.stage1_iters = 300;
        cfg.paths.out_dir = Some(PathBuf::from("/tmp/x"));
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        save_config(&p, &cfg).unwrap();
        let back = load_config(&p).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn adapter_resolution_covers_local_schemes_and_rejects_junk() {
        let cfg = ExperimentConfig {
            schedule: ScheduleConfig {
                preset: Some("toy-64".to_string()),
                ..ScheduleConfig::default()
            },
            ..ExperimentConfig::default()
        };
        let resolved = resolve_adapters(&cfg).unwrap();
        assert_eq!(resolved.generator.schedule.output_resolution, 64);
        assert_eq!(resolved.metrics.len(), 3);

        assert!(matches!(
            resolve_generator("vae:3", &FeatureSchedule::toy_64()),
            Err(Error::Adapter(_))
        ));
        assert!(matches!(
            resolve_generator("remote:http://x", &FeatureSchedule::toy_64()),
            Err(Error::Adapter(_))
        ));
        assert!(matches!(resolve_parser("nope"), Err(Error::Adapter(_))));
        // Remote metrics resolve, but to an unavailable adapter.
        let emb = resolve_embedding("channel-mean").unwrap();
        let m = resolve_metric("remote:fid", &emb).unwrap();
        assert!(!m.available());
    }

    fn toy_dataset_dir(n: usize) -> (tempfile::TempDir, GeneratorHandle) {
        let schedule = FeatureSchedule::toy_64();
        let handle = build_toy_generator(&schedule, 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        toygen_dataset(dir.path(), n, 5, &handle, "toy").unwrap();
        (dir, handle)
    }

    #[test]
    fn ingest_matches_stems_and_reports_orphans() {
        let (dir, _) = toy_dataset_dir(3);
        // Orphan on each side.
        crate::image::save_rgb(
            &dir.path().join("photo").join("zzz.png"),
            &Array3::zeros((3, 64, 64)),
        )
        .unwrap();
        crate::image::save_rgb(
            &dir.path().join("sketch").join("yyy.png"),
            &Array3::zeros((3, 64, 64)),
        )
        .unwrap();
        let (ds, report) = dataset_ingest(dir.path(), 64).unwrap();
        assert_eq!(ds.pairs.len(), 3);
        assert_eq!(report.matched, 3);
        assert_eq!(report.orphans.len(), 2);
        assert!(ds.pairs.iter().all(|p| p.latent.is_some()));
    }

    #[test]
    fn ingest_excludes_wrong_resolution_files_per_file() {
        let (dir, _) = toy_dataset_dir(2);
        crate::image::save_rgb(
            &dir.path().join("photo").join("bad.png"),
            &Array3::zeros((3, 32, 32)),
        )
        .unwrap();
        crate::image::save_rgb(
            &dir.path().join("sketch").join("bad.png"),
            &Array3::zeros((3, 64, 64)),
        )
        .unwrap();
        let (ds, report) = dataset_ingest(dir.path(), 64).unwrap();
        assert_eq!(ds.pairs.len(), 2);
        assert_eq!(report.errors.len(), 1);
        assert!(report.errors[0].contains("bad.png"), "{:?}", report.errors);
        assert!(report.errors[0].contains("32x32"));
    }

    #[test]
    fn ingest_of_nothing_is_a_data_error() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(dir.path().join("photo")).unwrap();
        std::fs::create_dir_all(dir.path().join("sketch")).unwrap();
        assert!(matches!(dataset_ingest(dir.path(), 64), Err(Error::Data(_))));
    }

    #[test]
    fn training_pairs_require_latents() {
        let (dir, _) = toy_dataset_dir(2);
        std::fs::remove_file(dir.path().join("latent").join("00001.npy")).unwrap();
        let (ds, _) = dataset_ingest(dir.path(), 64).unwrap();
        match load_training_pairs(&ds) {
            Err(Error::Data(msg)) => assert!(msg.contains("00001"), "{msg}"),
            other => panic!("expected data error, got {:?}", other.map(|v| v.len())),
        }
    }

    #[test]
    fn eval_scores_pairs_and_marks_unavailable_metrics() {
        let dir = tempfile::tempdir().unwrap();
        let gt_dir = dir.path().join("gt");
        let pred_dir = dir.path().join("pred");
        std::fs::create_dir_all(&gt_dir).unwrap();
        std::fs::create_dir_all(&pred_dir).unwrap();
        let a = Array3::from_elem((3, 8, 8), 0.25);
        let b = Array3::from_elem((3, 8, 8), 0.75);
        crate::image::save_rgb(&gt_dir.join("s0.png"), &a).unwrap();
        crate::image::save_rgb(&pred_dir.join("s0.png"), &b).unwrap();
        crate::image::save_rgb(&gt_dir.join("s1.png"), &a).unwrap();
        crate::image::save_rgb(&pred_dir.join("s1.png"), &a).unwrap();

        let emb = resolve_embedding("channel-mean").unwrap();
        let metrics: Vec<Arc<dyn MetricAdapter>> = vec![
            resolve_metric("l1", &emb).unwrap(),
            resolve_metric("remote:fid", &emb).unwrap(),
        ];
        let report = eval_metrics(&pred_dir, &gt_dir, &metrics).unwrap();
        assert_eq!(report.rows.len(), 2);
        // 0.25 vs 0.75 on the u8 grid is not exactly 0.5 apart, but close.
        let l1 = report.rows[0].scores[0].unwrap();
        assert!((l1 - 0.5).abs() < 2.0 / 255.0, "{l1}");
        assert_eq!(report.rows[1].scores[0].unwrap(), 0.0);
        assert!(report.rows.iter().all(|r| r.scores[1].is_none()));
        assert!(report.aggregates[1].is_none());

        let csv_path = dir.path().join("eval.csv");
        write_eval_csv(&csv_path, &report).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "stem,l1,remote:fid");
        assert!(text.lines().last().unwrap().starts_with("mean,"));
        assert!(text.contains("unavailable"));
    }
}

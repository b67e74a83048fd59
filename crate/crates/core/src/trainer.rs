//! The two-stage training loop. Stage 1 anchors the sketch head with a
//! heavy reconstruction weight; stage 2 drops that anchor and lets the
//! perceptual, embedding, and adversarial terms shape the result. Each
//! iteration runs the discriminator step first (on its ascent objective),
//! then the generator step on the weighted total. Everything that draws
//! randomness goes through one seeded stream whose position is
//! checkpointed, so an interrupted run resumes bit-for-bit.

use crate::adapters::{EmbeddingAdapter, PerceptualAdapter};
use crate::checkpoint::{
    checkpoint_load, checkpoint_save, config_fingerprint, AdamSnapshot, Checkpoint,
};
use crate::error::{Error, Result};
use crate::fusion::{
    sketch_forward, AblationFlags, GateMode, SketchGeneratorParams, TracedSketchGen,
};
use crate::image::Rgb01;
use crate::losses::{
    clip_term, default_crop_pad, disc_ascent_term, disc_forward, gen_adv_term, mask_traced,
    perceptual_term, recon_term, total_objective, AugTransform, DiscriminatorBank, LossBreakdown,
    LossWeights, TracedBank,
};
use crate::nn::{Adam, Tape, Var};
use crate::parsing::{
    default_perceptual_parts, default_regions, discriminator_masks, parse_face, FaceParser,
    MaskSet, PartGroup, PartLabelMap,
};
use crate::rng::Rng;
use crate::tap::{hijack_features, FeaturePyramid, GeneratorHandle, LatentCode};
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub total_iters: usize,
    pub stage1_iters: usize,
    pub lr: f64,
    pub weights_stage1: LossWeights,
    pub weights_stage2: LossWeights,
    pub batch_size: usize,
    pub aug_p: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_iters: 7200,
            stage1_iters: 1600,
            lr: 0.00014,
            weights_stage1: LossWeights::stage1_default(),
            weights_stage2: LossWeights::stage2_default(),
            batch_size: 2,
            aug_p: 0.3,
            seed: 0,
            checkpoint_every: 400,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage1_iters > self.total_iters {
            return Err(Error::config(format!(
                "stage1_iters ({}) exceeds total_iters ({})",
                self.stage1_iters, self.total_iters
            )));
        }
        if !(self.lr > 0.0) {
            return Err(Error::config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.aug_p) {
            return Err(Error::config(format!("aug_p {} not in [0, 1]", self.aug_p)));
        }
        if self.checkpoint_every == 0 {
            return Err(Error::config("checkpoint_every must be at least 1"));
        }
        self.weights_stage1.validate()?;
        self.weights_stage2.validate()?;
        Ok(())
    }
}

/// The loss-weight curriculum is a step function of the iteration index.
pub fn stage_weights(iteration: usize, cfg: &TrainConfig) -> Result<LossWeights> {
    if iteration >= cfg.total_iters {
        return Err(Error::config(format!(
            "iteration {iteration} out of range (total_iters = {})",
            cfg.total_iters
        )));
    }
    Ok(if iteration < cfg.stage1_iters {
        cfg.weights_stage1
    } else {
        cfg.weights_stage2
    })
}

#[derive(Clone)]
pub struct TrainAdapters {
    pub perceptual: Arc<dyn PerceptualAdapter>,
    pub embedding: Arc<dyn EmbeddingAdapter>,
    pub parser: Arc<dyn FaceParser>,
}

/// Structural choices that are not part of the iteration schedule.
#[derive(Clone)]
pub struct TrainSetup {
    pub regions: Vec<PartGroup>,
    pub parts: Vec<PartGroup>,
    pub ablation: AblationFlags,
    pub disc_base_channels: usize,
    /// Resume even when the checkpoint was written under a different config.
    pub force_resume: bool,
}

impl Default for TrainSetup {
    fn default() -> Self {
        TrainSetup {
            regions: default_regions(),
            parts: default_perceptual_parts(),
            ablation: AblationFlags::default(),
            disc_base_channels: 8,
            force_resume: false,
        }
    }
}

/// One training example: photo, target sketch, and the photo's latent code
/// under the frozen generator (the feature-pyramid source).
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub photo: Rgb01,
    pub sketch: Rgb01,
    pub latent: LatentCode,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iteration: usize,
    pub stage: u8,
    pub recon: f64,
    pub perc: f64,
    pub clip: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub total_g: f64,
}

#[derive(Debug)]
pub struct TrainRun {
    pub params: SketchGeneratorParams,
    pub bank: DiscriminatorBank,
    pub log: Vec<LogRecord>,
    pub checkpoint_paths: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

#[derive(Serialize)]
struct Fingerprint<'a> {
    train: &'a TrainConfig,
    schedule: &'a crate::tap::FeatureSchedule,
    regions: &'a [PartGroup],
    parts: &'a [PartGroup],
    ablation: &'a AblationFlags,
    disc_base_channels: usize,
    n_pairs: usize,
}

struct PrepPair {
    photo: Rgb01,
    sketch: Rgb01,
    labels: PartLabelMap,
    pyramid: FeaturePyramid,
}

struct GSlotTerms {
    total: Var,
    recon: Var,
    perc: Var,
    clip: Var,
    adv_g: Var,
}

/// The generator-side graph for one sample. The discriminators enter as
/// whatever `bank` traces to; the trainer passes constants so no gradient
/// can reach them from this step.
#[allow(clippy::too_many_arguments)]
fn build_g_slot(
    tape: &mut Tape,
    gen: &TracedSketchGen,
    bank: &TracedBank,
    prep: &PrepPair,
    transform: &AugTransform,
    masks_aug: &MaskSet,
    adapters: &TrainAdapters,
    setup: &TrainSetup,
    weights: &LossWeights,
    pad: usize,
) -> Result<GSlotTerms> {
    let res = prep.photo.shape()[1];
    let feats: Vec<Var> = prep
        .pyramid
        .features
        .iter()
        .map(|f| tape.constant(f.clone()))
        .collect();
    let pred = sketch_forward(tape, &feats, gen, setup.ablation, GateMode::Learned);

    let gt = tape.constant(prep.sketch.clone().into_dyn());
    let recon = recon_term(tape, gt, pred);
    let perc = perceptual_term(
        tape,
        gt,
        pred,
        &prep.labels,
        adapters.perceptual.as_ref(),
        &setup.parts,
        pad,
    )?;
    let clip = clip_term(tape, gt, pred, adapters.embedding.as_ref())?;

    // Adversarial term on the jointly augmented pair.
    let photo_aug = tape.constant(transform.apply_image(&prep.photo).into_dyn());
    let pred_aug = transform.apply_traced(tape, pred, res);
    let mut adv_g: Option<Var> = None;
    for (name, disc) in bank.names.iter().zip(bank.discs.iter()) {
        let mask = masks_aug
            .get(name)
            .ok_or_else(|| Error::config(format!("no mask for discriminator region {name:?}")))?;
        let pm = mask_traced(tape, photo_aug, mask);
        let fm = mask_traced(tape, pred_aug, mask);
        let p_fake = disc_forward(tape, disc, pm, fm);
        let term = gen_adv_term(tape, p_fake);
        adv_g = Some(match adv_g {
            None => term,
            Some(a) => tape.add(a, term),
        });
    }
    let adv_g = adv_g.ok_or_else(|| Error::config("discriminator bank is empty"))?;

    // Same left-to-right accumulation as the reported total.
    let t0 = tape.scale(recon, weights.recon);
    let t1 = tape.scale(perc, weights.perc);
    let s1 = tape.add(t0, t1);
    let t2 = tape.scale(clip, weights.clip);
    let s2 = tape.add(s1, t2);
    let t3 = tape.scale(adv_g, weights.adv);
    let total = tape.add(s2, t3);
    Ok(GSlotTerms {
        total,
        recon,
        perc,
        clip,
        adv_g,
    })
}

/// Discriminator ascent objective for one sample over all regions.
fn build_d_slot(
    tape: &mut Tape,
    bank: &TracedBank,
    photo_aug: &Rgb01,
    gt_aug: &Rgb01,
    pred_aug: &Rgb01,
    masks_aug: &MaskSet,
) -> Result<Var> {
    let photo_v = tape.constant(photo_aug.clone().into_dyn());
    let gt_v = tape.constant(gt_aug.clone().into_dyn());
    let pred_v = tape.constant(pred_aug.clone().into_dyn());
    let mut obj: Option<Var> = None;
    for (name, disc) in bank.names.iter().zip(bank.discs.iter()) {
        let mask = masks_aug
            .get(name)
            .ok_or_else(|| Error::config(format!("no mask for discriminator region {name:?}")))?;
        let pm = mask_traced(tape, photo_v, mask);
        let gm = mask_traced(tape, gt_v, mask);
        let fm = mask_traced(tape, pred_v, mask);
        let p_real = disc_forward(tape, disc, pm, gm);
        let p_fake = disc_forward(tape, disc, pm, fm);
        let term = disc_ascent_term(tape, p_real, p_fake);
        obj = Some(match obj {
            None => term,
            Some(o) => tape.add(o, term),
        });
    }
    obj.ok_or_else(|| Error::config("discriminator bank is empty"))
}

fn save_state(
    out_dir: &Path,
    iteration: usize,
    hash: [u8; 32],
    params: &SketchGeneratorParams,
    bank: &DiscriminatorBank,
    adam_g: &Adam,
    adam_d: &Adam,
    rng: &Rng,
) -> Result<PathBuf> {
    let ckpt = Checkpoint {
        iteration: iteration as u64,
        config_hash: hash,
        rng: rng.state(),
        generator: params.tensors().into_iter().cloned().collect(),
        discriminators: bank.tensors().into_iter().cloned().collect(),
        adam_g: AdamSnapshot::capture(adam_g),
        adam_d: AdamSnapshot::capture(adam_d),
    };
    let path = out_dir.join(format!("ckpt_{iteration:06}.ckpt"));
    checkpoint_save(&path, &ckpt)?;
    Ok(path)
}

/// Run (or resume) training. `pairs` must all carry latent codes for the
/// frozen generator; feature pyramids are replayed once up front and cached.
/// The training loop held in memory, advanced one optimization step at a
/// time. `train` drives this same stepper and layers the log file and
/// checkpoints on top; embedders (the browser demo) call `step` directly.
pub struct LiveTrainer {
    cfg: TrainConfig,
    adapters: TrainAdapters,
    setup: TrainSetup,
    prep: Vec<PrepPair>,
    params: SketchGeneratorParams,
    bank: DiscriminatorBank,
    adam_g: Adam,
    adam_d: Adam,
    rng: Rng,
    res: usize,
    pad: usize,
    iteration: usize,
}

impl LiveTrainer {
    pub fn new(
        cfg: &TrainConfig,
        pairs: &[TrainPair],
        generator: &GeneratorHandle,
        adapters: &TrainAdapters,
        setup: &TrainSetup,
    ) -> Result<Self> {
        cfg.validate()?;
        if pairs.is_empty() {
            return Err(Error::data("training requires a non-empty paired dataset"));
        }
        let res = generator.schedule.output_resolution;
        let expected = [3, res, res];
        for (i, p) in pairs.iter().enumerate() {
            if p.photo.shape() != expected || p.sketch.shape() != expected {
                return Err(Error::data(format!(
                    "pair {i}: images must be {expected:?}, got photo {:?}, sketch {:?}",
                    p.photo.shape(),
                    p.sketch.shape()
                )));
            }
        }

        // Replay the frozen generator once per pair; the pyramids are the
        // training inputs, the photos only feed masks and the adversary.
        let mut prep = Vec::with_capacity(pairs.len());
        for p in pairs {
            let (_, pyramid) = hijack_features(&p.latent, generator)?;
            let labels = parse_face(&p.photo, adapters.parser.as_ref())?;
            prep.push(PrepPair {
                photo: p.photo.clone(),
                sketch: p.sketch.clone(),
                labels,
                pyramid,
            });
        }

        let params =
            SketchGeneratorParams::build(&generator.schedule, setup.ablation, cfg.seed ^ 0x5e7c)?;
        let region_names: Vec<String> = setup.regions.iter().map(|r| r.name.clone()).collect();
        let bank =
            DiscriminatorBank::build(&region_names, setup.disc_base_channels, cfg.seed ^ 0xd15c);

        Ok(LiveTrainer {
            cfg: cfg.clone(),
            adapters: adapters.clone(),
            setup: setup.clone(),
            prep,
            params,
            bank,
            adam_g: Adam::new(cfg.lr, 0.0, 0.99),
            adam_d: Adam::new(cfg.lr, 0.0, 0.99),
            rng: Rng::seed_from_u64(cfg.seed).derive(0x7ea1),
            res,
            pad: default_crop_pad(res),
            iteration: 0,
        })
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    pub fn params(&self) -> &SketchGeneratorParams {
        &self.params
    }

    pub fn bank(&self) -> &DiscriminatorBank {
        &self.bank
    }

    /// One discriminator step, then one generator step. Past the end of
    /// the schedule this fails rather than silently continuing.
    pub fn step(&mut self) -> Result<LogRecord> {
        let i = self.iteration;
        let cfg = &self.cfg;
        let weights = stage_weights(i, cfg)?;
        let stage = if i < cfg.stage1_iters { 1u8 } else { 2u8 };

        // One batch of (pair, transform) draws; consumed in a fixed order.
        let mut batch = Vec::with_capacity(cfg.batch_size);
        for _ in 0..cfg.batch_size {
            let idx = self.rng.below(self.prep.len());
            let t = AugTransform::draw(&mut self.rng, cfg.aug_p, self.res);
            batch.push((idx, t));
        }

        // Current-generator sketches and augmented views, shared by both
        // steps of this iteration.
        let mut views = Vec::with_capacity(batch.len());
        for (idx, t) in &batch {
            let p = &self.prep[*idx];
            let pred = {
                let mut tape = Tape::new();
                let feats: Vec<Var> = p
                    .pyramid
                    .features
                    .iter()
                    .map(|f| tape.constant(f.clone()))
                    .collect();
                let g = self.params.trace(&mut tape, false);
                let out =
                    sketch_forward(&mut tape, &feats, &g, self.setup.ablation, GateMode::Learned);
                tape.value(out)
                    .clone()
                    .into_dimensionality::<ndarray::Ix3>()
                    .map_err(|e| Error::shape(e.to_string()))?
            };
            let labels_aug = t.apply_labels(&p.labels);
            let masks_aug = discriminator_masks(&labels_aug, &self.setup.regions)?;
            views.push((
                *idx,
                *t,
                t.apply_image(&p.photo),
                t.apply_image(&p.sketch),
                t.apply_image(&pred),
                masks_aug,
            ));
        }

        // Discriminator step: ascend mean log D(real) + log(1 - D(fake)).
        let adv_d_value;
        {
            let mut tape = Tape::new();
            let traced_bank = self.bank.trace(&mut tape, true);
            let mut obj: Option<Var> = None;
            for (_, _, photo_a, gt_a, pred_a, masks_a) in &views {
                let slot = build_d_slot(&mut tape, &traced_bank, photo_a, gt_a, pred_a, masks_a)?;
                obj = Some(match obj {
                    None => slot,
                    Some(o) => tape.add(o, slot),
                });
            }
            let obj = obj.unwrap();
            let mean_obj = tape.scale(obj, 1.0 / cfg.batch_size as f64);
            adv_d_value = tape.scalar_value(mean_obj);
            let loss_d = tape.neg(mean_obj);
            let grads = tape.backward(loss_d);
            let vars = traced_bank.vars();
            let mut tensors: Vec<ndarray::ArrayD<f64>> =
                self.bank.tensors().into_iter().cloned().collect();
            let gvec: Vec<Option<ndarray::ArrayD<f64>>> =
                vars.iter().map(|v| grads.get(*v).cloned()).collect();
            self.adam_d.step(&mut tensors, &gvec);
            self.bank.set_tensors(&tensors)?;
        }

        // Generator step on the weighted total.
        let (recon_v, perc_v, clip_v, adv_g_value);
        {
            let mut tape = Tape::new();
            let traced_gen = self.params.trace(&mut tape, true);
            let traced_bank = self.bank.trace(&mut tape, false);
            let mut totals: Option<Var> = None;
            let (mut rs, mut ps, mut cs, mut gs) = (0.0, 0.0, 0.0, 0.0);
            for (idx, t, _, _, _, masks_a) in &views {
                let slot = build_g_slot(
                    &mut tape,
                    &traced_gen,
                    &traced_bank,
                    &self.prep[*idx],
                    t,
                    masks_a,
                    &self.adapters,
                    &self.setup,
                    &weights,
                    self.pad,
                )?;
                rs += tape.scalar_value(slot.recon);
                ps += tape.scalar_value(slot.perc);
                cs += tape.scalar_value(slot.clip);
                gs += tape.scalar_value(slot.adv_g);
                totals = Some(match totals {
                    None => slot.total,
                    Some(acc) => tape.add(acc, slot.total),
                });
            }
            let total = totals.unwrap();
            let mean_total = tape.scale(total, 1.0 / cfg.batch_size as f64);
            let grads = tape.backward(mean_total);
            let vars = traced_gen.vars();
            let mut tensors: Vec<ndarray::ArrayD<f64>> =
                self.params.tensors().into_iter().cloned().collect();
            let gvec: Vec<Option<ndarray::ArrayD<f64>>> =
                vars.iter().map(|v| grads.get(*v).cloned()).collect();
            self.adam_g.step(&mut tensors, &gvec);
            self.params.set_tensors(&tensors)?;
            let b = cfg.batch_size as f64;
            (recon_v, perc_v, clip_v, adv_g_value) = (rs / b, ps / b, cs / b, gs / b);
        }

        // Fails on non-finite components; state up to this step is intact.
        let breakdown: LossBreakdown =
            total_objective(recon_v, perc_v, clip_v, adv_g_value, adv_d_value, &weights)?;

        self.iteration = i + 1;
        Ok(LogRecord {
            iteration: i,
            stage,
            recon: breakdown.recon,
            perc: breakdown.perc,
            clip: breakdown.clip,
            adv_g: breakdown.adv_g,
            adv_d: breakdown.adv_d,
            total_g: breakdown.total_g,
        })
    }
}

pub fn train(
    cfg: &TrainConfig,
    pairs: &[TrainPair],
    generator: &GeneratorHandle,
    adapters: &TrainAdapters,
    setup: &TrainSetup,
    out_dir: &Path,
    resume_from: Option<&Path>,
) -> Result<TrainRun> {
    let mut lt = LiveTrainer::new(cfg, pairs, generator, adapters, setup)?;

    let hash = config_fingerprint(&Fingerprint {
        train: cfg,
        schedule: &generator.schedule,
        regions: &setup.regions,
        parts: &setup.parts,
        ablation: &setup.ablation,
        disc_base_channels: setup.disc_base_channels,
        n_pairs: pairs.len(),
    });

    if let Some(path) = resume_from {
        let ckpt = checkpoint_load(path)?;
        if ckpt.config_hash != hash && !setup.force_resume {
            return Err(Error::checkpoint(
                "checkpoint was written under a different configuration; \
                 refusing to resume (use the override to force)"
                    .to_string(),
            ));
        }
        lt.params.set_tensors(&ckpt.generator)?;
        lt.bank.set_tensors(&ckpt.discriminators)?;
        ckpt.adam_g.restore_into(&mut lt.adam_g);
        ckpt.adam_d.restore_into(&mut lt.adam_d);
        lt.rng = Rng::restore(ckpt.rng);
        lt.iteration = ckpt.iteration as usize;
        if lt.iteration > cfg.total_iters {
            return Err(Error::checkpoint(format!(
                "checkpoint is at iteration {}, past total_iters {}",
                lt.iteration, cfg.total_iters
            )));
        }
    }

    std::fs::create_dir_all(out_dir)?;
    let log_path = out_dir.join("train_log.jsonl");
    let mut log_file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;

    let mut log = Vec::new();
    let mut checkpoint_paths = Vec::new();
    let mut last_path = None;

    while lt.iteration < cfg.total_iters {
        // Non-finite losses abort after the line below, preserving any
        // checkpoints already on disk.
        let record = lt.step()?;
        let line = serde_json::to_string(&record).map_err(|e| Error::data(e.to_string()))?;
        writeln!(log_file, "{line}")?;
        log.push(record);

        let done = lt.iteration == cfg.total_iters;
        if lt.iteration % cfg.checkpoint_every == 0 || done {
            let path = save_state(
                out_dir,
                lt.iteration,
                hash,
                &lt.params,
                &lt.bank,
                &lt.adam_g,
                &lt.adam_d,
                &lt.rng,
            )?;
            checkpoint_paths.push(path.clone());
            last_path = Some(path);
        }
    }

    let final_checkpoint = match last_path {
        Some(p) => p,
        // A fully resumed run (start == total) still reports its state.
        None => save_state(
            out_dir,
            cfg.total_iters,
            hash,
            &lt.params,
            &lt.bank,
            &lt.adam_g,
            &lt.adam_d,
            &lt.rng,
        )?,
    };

    Ok(TrainRun {
        params: lt.params,
        bank: lt.bank,
        log,
        checkpoint_paths,
        final_checkpoint,
    })
}

//! Browser demo over the core crate: a toy face generator, a sketch head
//! trained live in the page, latent-space edits, and the learned attention
//! gates. `DemoCore` is plain Rust so everything is testable natively; the
//! `Demo` wrapper is the wasm-bindgen surface the page calls.

use ndarray::{Array2, ArrayD};
use sketchfuse::adapters::{ChannelMeanEmbed, FixedRandomFeatures};
use sketchfuse::apps::{apply_direction, toy_sketch_filter, EditDirection};
use sketchfuse::error::{Error, Result};
use sketchfuse::fusion::{collect_attention, generate_sketch};
use sketchfuse::image::Rgb01;
use sketchfuse::parsing::{StubMode, StubParser};
use sketchfuse::rng::Rng;
use sketchfuse::tap::{
    build_toy_generator, hijack_features, FeaturePyramid, FeatureSchedule, GeneratorHandle,
    LatentCode,
};
use sketchfuse::trainer::{
    LiveTrainer, LogRecord, TrainAdapters, TrainConfig, TrainPair, TrainSetup,
};
use std::sync::Arc;
use wasm_bindgen::prelude::*;

struct Sample {
    photo: Rgb01,
    sketch: Rgb01,
    latent: LatentCode,
    pyramid: FeaturePyramid,
}

/// Everything the page interacts with, with core error types throughout.
pub struct DemoCore {
    generator: GeneratorHandle,
    trainer: LiveTrainer,
    samples: Vec<Sample>,
}

/// Stage boundary of the in-page run: long enough to watch the heavy
/// reconstruction anchor work, short enough to reach stage 2 by leaning on
/// the fast-forward button.
pub const DEMO_STAGE1_ITERS: usize = 500;

fn demo_train_config(seed: u64) -> TrainConfig {
    TrainConfig {
        // Effectively unbounded; the page steps as long as the user wants.
        total_iters: 1_000_000,
        stage1_iters: DEMO_STAGE1_ITERS,
        batch_size: 1,
        seed,
        ..TrainConfig::default()
    }
}

impl DemoCore {
    pub fn new(seed: u64, n_pairs: usize) -> Result<Self> {
        if n_pairs == 0 {
            return Err(Error::config("the demo needs at least one pair"));
        }
        let schedule = FeatureSchedule::toy_64();
        let generator = build_toy_generator(&schedule, seed)?;

        let mut rng = Rng::seed_from_u64(seed).derive(0xde30);
        let mut samples = Vec::with_capacity(n_pairs);
        let mut pairs = Vec::with_capacity(n_pairs);
        for _ in 0..n_pairs {
            let latent = generator.sample_latent(&mut rng);
            let (photo, pyramid) = hijack_features(&latent, &generator)?;
            let sketch = toy_sketch_filter(&photo);
            pairs.push(TrainPair {
                photo: photo.clone(),
                sketch: sketch.clone(),
                latent: latent.clone(),
            });
            samples.push(Sample {
                photo,
                sketch,
                latent,
                pyramid,
            });
        }

        let adapters = TrainAdapters {
            perceptual: Arc::new(FixedRandomFeatures::new(7)),
            embedding: Arc::new(ChannelMeanEmbed),
            parser: Arc::new(StubParser {
                mode: StubMode::Layout,
            }),
        };
        let setup = TrainSetup {
            disc_base_channels: 4,
            ..TrainSetup::default()
        };
        let trainer = LiveTrainer::new(
            &demo_train_config(seed),
            &pairs,
            &generator,
            &adapters,
            &setup,
        )?;

        Ok(DemoCore {
            generator,
            trainer,
            samples,
        })
    }

    pub fn resolution(&self) -> usize {
        self.generator.schedule.output_resolution
    }

    pub fn n_pairs(&self) -> usize {
        self.samples.len()
    }

    pub fn iteration(&self) -> usize {
        self.trainer.iteration()
    }

    pub fn n_layers(&self) -> usize {
        self.samples[0].latent.n_layers()
    }

    pub fn style_dim(&self) -> usize {
        self.samples[0].latent.style_dim()
    }

    pub fn n_levels(&self) -> usize {
        self.trainer.params().levels.len()
    }

    pub fn step(&mut self) -> Result<LogRecord> {
        self.trainer.step()
    }

    fn sample(&self, idx: usize) -> Result<&Sample> {
        self.samples
            .get(idx)
            .ok_or_else(|| Error::data(format!("no sample {idx}, have {}", self.samples.len())))
    }

    pub fn photo_rgba(&self, idx: usize) -> Result<Vec<u8>> {
        Ok(rgb_to_rgba(&self.sample(idx)?.photo))
    }

    pub fn target_rgba(&self, idx: usize) -> Result<Vec<u8>> {
        Ok(rgb_to_rgba(&self.sample(idx)?.sketch))
    }

    /// The head's current output for a training pair; changes every step.
    pub fn prediction_rgba(&self, idx: usize) -> Result<Vec<u8>> {
        let sketch = generate_sketch(&self.sample(idx)?.pyramid, self.trainer.params())?;
        Ok(rgb_to_rgba(&sketch))
    }

    fn edited_latent(
        &self,
        idx: usize,
        coord: usize,
        alpha: f64,
        lo: usize,
        hi: usize,
    ) -> Result<LatentCode> {
        let base = &self.sample(idx)?.latent;
        let dim = base.style_dim();
        if coord >= dim {
            return Err(Error::config(format!(
                "coordinate {coord} out of range, style dim is {dim}"
            )));
        }
        let mut row = Array2::zeros((1, dim));
        row[[0, coord]] = 1.0;
        let direction = EditDirection::new(row, "demo-axis")?.with_layer_range(lo..hi);
        apply_direction(base, &direction, alpha)
    }

    /// Photo after moving one latent coordinate on the chosen layers.
    pub fn edit_photo_rgba(
        &self,
        idx: usize,
        coord: usize,
        alpha: f64,
        lo: usize,
        hi: usize,
    ) -> Result<Vec<u8>> {
        let latent = self.edited_latent(idx, coord, alpha, lo, hi)?;
        let (photo, _) = hijack_features(&latent, &self.generator)?;
        Ok(rgb_to_rgba(&photo))
    }

    /// Sketch of the same edit, rendered by the current head.
    pub fn edit_sketch_rgba(
        &self,
        idx: usize,
        coord: usize,
        alpha: f64,
        lo: usize,
        hi: usize,
    ) -> Result<Vec<u8>> {
        let latent = self.edited_latent(idx, coord, alpha, lo, hi)?;
        let (_, pyramid) = hijack_features(&latent, &self.generator)?;
        let sketch = generate_sketch(&pyramid, self.trainer.params())?;
        Ok(rgb_to_rgba(&sketch))
    }

    /// Side length of one level's gate map (None-gated levels error).
    pub fn attention_resolution(&self, level: usize) -> Result<usize> {
        let maps = collect_attention(&self.samples[0].pyramid, self.trainer.params())?;
        match maps.get(level) {
            Some(Some(m)) => Ok(m.map.shape()[1]),
            Some(None) => Err(Error::config(format!("level {level} has no gate"))),
            None => Err(Error::config(format!(
                "no level {level}, have {}",
                maps.len()
            ))),
        }
    }

    /// One level's learned gate over a sample's carry, as grayscale RGBA.
    pub fn attention_rgba(&self, idx: usize, level: usize) -> Result<Vec<u8>> {
        let maps = collect_attention(&self.sample(idx)?.pyramid, self.trainer.params())?;
        match maps.into_iter().nth(level) {
            Some(Some(m)) => Ok(gray_to_rgba(&m.map)),
            Some(None) => Err(Error::config(format!("level {level} has no gate"))),
            None => Err(Error::config(format!("no level {level}"))),
        }
    }
}

fn unit_to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn rgb_to_rgba(img: &Rgb01) -> Vec<u8> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            out.push(unit_to_u8(img[[0, y, x]]));
            out.push(unit_to_u8(img[[1, y, x]]));
            out.push(unit_to_u8(img[[2, y, x]]));
            out.push(255);
        }
    }
    out
}

fn gray_to_rgba(map: &ArrayD<f64>) -> Vec<u8> {
    let (h, w) = (map.shape()[1], map.shape()[2]);
    let mut out = Vec::with_capacity(h * w * 4);
    for y in 0..h {
        for x in 0..w {
            let v = unit_to_u8(map[[0, y, x]]);
            out.push(v);
            out.push(v);
            out.push(v);
            out.push(255);
        }
    }
    out
}

fn to_js(e: Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// The page-facing handle. Pixel buffers arrive in JS as Uint8Array, ready
/// for ImageData; `step` returns the loss record as a JSON string.
#[wasm_bindgen]
pub struct Demo {
    core: DemoCore,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, n_pairs: u32) -> std::result::Result<Demo, JsValue> {
        DemoCore::new(seed as u64, n_pairs as usize)
            .map(|core| Demo { core })
            .map_err(to_js)
    }

    pub fn resolution(&self) -> u32 {
        self.core.resolution() as u32
    }

    pub fn n_pairs(&self) -> u32 {
        self.core.n_pairs() as u32
    }

    pub fn iteration(&self) -> u32 {
        self.core.iteration() as u32
    }

    pub fn stage1_iters(&self) -> u32 {
        DEMO_STAGE1_ITERS as u32
    }

    pub fn n_layers(&self) -> u32 {
        self.core.n_layers() as u32
    }

    pub fn style_dim(&self) -> u32 {
        self.core.style_dim() as u32
    }

    pub fn n_levels(&self) -> u32 {
        self.core.n_levels() as u32
    }

    pub fn step(&mut self) -> std::result::Result<String, JsValue> {
        let record = self.core.step().map_err(to_js)?;
        serde_json::to_string(&record).map_err(|e| JsValue::from_str(&e.to_string()))
    }

    pub fn photo(&self, idx: u32) -> std::result::Result<Vec<u8>, JsValue> {
        self.core.photo_rgba(idx as usize).map_err(to_js)
    }

    pub fn target(&self, idx: u32) -> std::result::Result<Vec<u8>, JsValue> {
        self.core.target_rgba(idx as usize).map_err(to_js)
    }

    pub fn prediction(&self, idx: u32) -> std::result::Result<Vec<u8>, JsValue> {
        self.core.prediction_rgba(idx as usize).map_err(to_js)
    }

    pub fn edit_photo(
        &self,
        idx: u32,
        coord: u32,
        alpha: f64,
        lo: u32,
        hi: u32,
    ) -> std::result::Result<Vec<u8>, JsValue> {
        self.core
            .edit_photo_rgba(idx as usize, coord as usize, alpha, lo as usize, hi as usize)
            .map_err(to_js)
    }

    pub fn edit_sketch(
        &self,
        idx: u32,
        coord: u32,
        alpha: f64,
        lo: u32,
        hi: u32,
    ) -> std::result::Result<Vec<u8>, JsValue> {
        self.core
            .edit_sketch_rgba(idx as usize, coord as usize, alpha, lo as usize, hi as usize)
            .map_err(to_js)
    }

    pub fn attention_resolution(&self, level: u32) -> std::result::Result<u32, JsValue> {
        self.core
            .attention_resolution(level as usize)
            .map(|r| r as u32)
            .map_err(to_js)
    }

    pub fn attention(&self, idx: u32, level: u32) -> std::result::Result<Vec<u8>, JsValue> {
        self.core
            .attention_rgba(idx as usize, level as usize)
            .map_err(to_js)
    }
}

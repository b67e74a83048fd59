//! Access to the frozen image generator: latent codes, the feature schedule,
//! feature capture during synthesis ("hijacking"), image-to-latent inversion,
//! and a deterministic toy generator that exercises the identical dataflow
//! with no pretrained weights.

use crate::adapters::PerceptualAdapter;
use crate::error::{Error, Result};
use crate::image::Rgb01;
use crate::nn::{Tape, Var};
use crate::rng::Rng;
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;

/// Extended per-layer latent: one style vector per tapped feature.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub vectors: Array2<f64>, // (n_layers, style_dim)
}

impl LatentCode {
    pub fn new(vectors: Array2<f64>) -> Result<Self> {
        if !vectors.iter().all(|v| v.is_finite()) {
            return Err(Error::data("latent code contains non-finite entries"));
        }
        Ok(LatentCode { vectors })
    }

    pub fn zeros(n_layers: usize, style_dim: usize) -> Self {
        LatentCode {
            vectors: Array2::zeros((n_layers, style_dim)),
        }
    }

    pub fn n_layers(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn style_dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::npy::save_array2(path, &self.vectors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        LatentCode::new(crate::npy::load_array2(path)?)
    }
}

/// Ordered (resolution, channels) per tapped feature. Two taps per resolution
/// level: the two convolution stages of that style block; at the output
/// resolution the second tap is the image-space projection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSchedule {
    pub entries: Vec<(usize, usize)>,
    pub base_resolution: usize,
    pub output_resolution: usize,
}

impl FeatureSchedule {
    /// The 1024-scale profile: 18 taps, 512 channels through 64 px, then
    /// halving down to the 3-channel image projection.
    pub fn full_scale() -> Self {
        let mut entries = Vec::new();
        for (res, ch) in [
            (4, 512),
            (8, 512),
            (16, 512),
            (32, 512),
            (64, 512),
            (128, 256),
            (256, 128),
            (512, 64),
        ] {
            entries.push((res, ch));
            entries.push((res, ch));
        }
        entries.push((1024, 32));
        entries.push((1024, 3));
        FeatureSchedule {
            entries,
            base_resolution: 4,
            output_resolution: 1024,
        }
    }

    /// Desk-scale profile: 10 taps, 4 to 64 px, ending in the 3-channel image.
    pub fn toy_64() -> Self {
        FeatureSchedule {
            entries: vec![
                (4, 32),
                (4, 32),
                (8, 32),
                (8, 32),
                (16, 16),
                (16, 16),
                (32, 8),
                (32, 8),
                (64, 8),
                (64, 3),
            ],
            base_resolution: 4,
            output_resolution: 64,
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// One fusion level per same-resolution tap pair.
    pub fn levels(&self) -> usize {
        self.entries.len() / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::config("schedule has no entries"));
        }
        if !self.base_resolution.is_power_of_two() || self.base_resolution == 0 {
            return Err(Error::config("base_resolution must be a power of two"));
        }
        let mut expected_res = self.base_resolution;
        let mut i = 0;
        while i < self.entries.len() {
            let (res, _) = self.entries[i];
            if res != expected_res {
                return Err(Error::config(format!(
                    "schedule entry {i}: expected resolution {expected_res}, got {res} \
                     (levels must double from base_resolution)"
                )));
            }
            if i + 1 >= self.entries.len() || self.entries[i + 1].0 != res {
                return Err(Error::config(format!(
                    "resolution {res} has an odd number of entries; each level needs exactly two"
                )));
            }
            if i + 2 < self.entries.len() && self.entries[i + 2].0 == res {
                return Err(Error::config(format!(
                    "resolution {res} appears more than twice"
                )));
            }
            i += 2;
            expected_res *= 2;
        }
        let last_res = self.entries.last().unwrap().0;
        if last_res != self.output_resolution {
            return Err(Error::config(format!(
                "last entry resolution {last_res} does not reach output_resolution {}",
                self.output_resolution
            )));
        }
        for w in self.entries.windows(2) {
            if w[1].1 > w[0].1 {
                return Err(Error::config(format!(
                    "channels increase from {} to {}: profile must be non-increasing",
                    w[0].1, w[1].1
                )));
            }
        }
        if self.entries.iter().any(|&(_, c)| c == 0) {
            return Err(Error::config("zero-channel entry"));
        }
        Ok(())
    }
}

/// The hijacked features of one synthesis pass, in forward order.
#[derive(Debug, Clone)]
pub struct FeaturePyramid {
    pub features: Vec<ArrayD<f64>>,
    pub schedule: FeatureSchedule,
}

#[derive(Debug, Clone)]
pub struct ScheduleViolation {
    /// Feature index, or None for whole-pyramid problems (length mismatch).
    pub index: Option<usize>,
    pub message: String,
}

#[derive(Debug, Clone, Default)]
pub struct ValidationReport {
    pub violations: Vec<ScheduleViolation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }
}

impl std::fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.violations.is_empty() {
            return write!(f, "conformant");
        }
        for v in &self.violations {
            match v.index {
                Some(i) => writeln!(f, "feature {i}: {}", v.message)?,
                None => writeln!(f, "{}", v.message)?,
            }
        }
        Ok(())
    }
}

/// Shape-checks a pyramid against a schedule. Reports every deviation rather
/// than failing fast, so a transposed or truncated pyramid names the exact
/// indices at fault.
pub fn validate_schedule(pyramid: &FeaturePyramid, schedule: &FeatureSchedule) -> ValidationReport {
    let mut report = ValidationReport::default();
    if pyramid.features.len() != schedule.entries.len() {
        report.violations.push(ScheduleViolation {
            index: None,
            message: format!(
                "length mismatch: pyramid has {} features, schedule expects {}",
                pyramid.features.len(),
                schedule.entries.len()
            ),
        });
    }
    for (i, feat) in pyramid.features.iter().enumerate() {
        let Some(&(res, ch)) = schedule.entries.get(i) else {
            break;
        };
        let expected = [ch, res, res];
        if feat.shape() != expected {
            report.violations.push(ScheduleViolation {
                index: Some(i),
                message: format!("expected shape {:?}, got {:?}", expected, feat.shape()),
            });
        }
    }
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandleKind {
    PretrainedAdapter,
    Toy,
}

/// What a generator backend must provide. `synthesize_traced` is optional:
/// backends that can run under the tape (the toy one) enable gradient-based
/// inversion; opaque adapters fall back to derivative-free refinement.
pub trait GeneratorBackend: Send + Sync {
    fn synthesize(&self, latent: &LatentCode) -> Result<(Rgb01, Vec<ArrayD<f64>>)>;

    fn synthesize_traced(
        &self,
        _tape: &mut Tape,
        _latent: Var,
    ) -> Option<(Var, Vec<Var>)> {
        None
    }

    /// Draw a latent from the generator's native prior.
    fn sample_latent(&self, rng: &mut Rng) -> LatentCode;
}

#[derive(Clone)]
pub struct GeneratorHandle {
    pub schedule: FeatureSchedule,
    pub kind: HandleKind,
    pub style_dim: usize,
    backend: Arc<dyn GeneratorBackend>,
}

impl GeneratorHandle {
    pub fn new(
        schedule: FeatureSchedule,
        kind: HandleKind,
        style_dim: usize,
        backend: Arc<dyn GeneratorBackend>,
    ) -> Self {
        GeneratorHandle {
            schedule,
            kind,
            style_dim,
            backend,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.schedule.len()
    }

    pub fn sample_latent(&self, rng: &mut Rng) -> LatentCode {
        self.backend.sample_latent(rng)
    }

    pub fn backend(&self) -> &Arc<dyn GeneratorBackend> {
        &self.backend
    }
}

/// Run the frozen generator and capture the per-block deep features.
pub fn hijack_features(
    latent: &LatentCode,
    generator: &GeneratorHandle,
) -> Result<(Rgb01, FeaturePyramid)> {
    if latent.n_layers() != generator.n_layers() || latent.style_dim() != generator.style_dim {
        return Err(Error::shape(format!(
            "latent ({}, {}) does not match generator ({}, {})",
            latent.n_layers(),
            latent.style_dim(),
            generator.n_layers(),
            generator.style_dim
        )));
    }
    let (image, features) = generator.backend.synthesize(latent)?;
    let pyramid = FeaturePyramid {
        features,
        schedule: generator.schedule.clone(),
    };
    let report = validate_schedule(&pyramid, &generator.schedule);
    if !report.is_empty() {
        return Err(Error::shape(format!(
            "backend produced a non-conformant pyramid:\n{report}"
        )));
    }
    Ok((image, pyramid))
}

/// Initialization source plus refinement profile for inversion.
#[derive(Clone)]
pub struct InverterConfig {
    pub encoder: Option<Arc<dyn EncoderAdapter>>,
    /// Optional feature-space term in the refinement objective. When absent
    /// the objective is pixel-only (perceptual weight contributes nothing).
    pub perceptual: Option<Arc<dyn PerceptualAdapter>>,
    pub refine_steps: usize,
    pub refine_lr: f64,
    /// (pixel_w, perceptual_w).
    pub objective_weights: (f64, f64),
}

impl Default for InverterConfig {
    fn default() -> Self {
        InverterConfig {
            encoder: None,
            perceptual: None,
            refine_steps: 200,
            refine_lr: 0.01,
            objective_weights: (1.0, 0.8),
        }
    }
}

impl InverterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.refine_lr <= 0.0 {
            return Err(Error::config("refine_lr must be positive"));
        }
        if self.objective_weights.0 < 0.0 || self.objective_weights.1 < 0.0 {
            return Err(Error::config("objective weights must be non-negative"));
        }
        Ok(())
    }
}

/// Maps an image to an initial latent code (a pretrained inversion encoder
/// at full scale; constant stubs in tests).
pub trait EncoderAdapter: Send + Sync {
    fn name(&self) -> &str;
    fn encode(&self, image: &Rgb01) -> Result<LatentCode>;
}

/// The refinement objective: pixel_w * L1(image, regen) + perceptual_w *
/// feature distance. Exposed so tests can check the best-so-far contract.
pub fn inversion_objective(
    image: &Rgb01,
    generator: &GeneratorHandle,
    code: &LatentCode,
    cfg: &InverterConfig,
) -> Result<f64> {
    let mut tape = Tape::new();
    let latent = tape.constant(code.vectors.clone().into_dyn());
    let obj = traced_objective(&mut tape, image, generator, latent, cfg)?;
    Ok(tape.scalar_value(obj))
}

fn traced_objective(
    tape: &mut Tape,
    image: &Rgb01,
    generator: &GeneratorHandle,
    latent: Var,
    cfg: &InverterConfig,
) -> Result<Var> {
    let (pixel_w, perc_w) = cfg.objective_weights;
    let (regen, _) = match generator.backend.synthesize_traced(tape, latent) {
        Some(out) => out,
        None => {
            // Opaque backend: evaluate untraced and splice in as a constant.
            let code = LatentCode::new(
                tape.value(latent)
                    .clone()
                    .into_dimensionality()
                    .map_err(|e| Error::shape(e.to_string()))?,
            )?;
            let (img, _) = generator.backend.synthesize(&code)?;
            let v = tape.constant(img.into_dyn());
            (v, Vec::new())
        }
    };
    let target = tape.constant(image.clone().into_dyn());
    let diff = tape.sub(target, regen);
    let adiff = tape.abs(diff);
    let l1 = tape.mean_all(adiff);
    let mut obj = tape.scale(l1, pixel_w);
    if perc_w > 0.0 {
        if let Some(perc) = &cfg.perceptual {
            let ft = perc.features(tape, target)?;
            let fr = perc.features(tape, regen)?;
            for (a, b) in ft.iter().zip(fr.iter()) {
                let d = tape.sub(*a, *b);
                let ad = tape.abs(d);
                let m = tape.mean_all(ad);
                let w = tape.scale(m, perc_w);
                obj = tape.add(obj, w);
            }
        }
    }
    Ok(obj)
}

/// Recover a latent code for an image: encoder (or zero) initialization, then
/// best-so-far refinement. Gradient descent through the tape when the backend
/// is traceable; seeded random search otherwise. Deterministic per inputs.
pub fn invert_image(
    image: &Rgb01,
    generator: &GeneratorHandle,
    cfg: &InverterConfig,
) -> Result<LatentCode> {
    cfg.validate()?;
    let init = match (&cfg.encoder, cfg.refine_steps) {
        (Some(enc), _) => enc.encode(image)?,
        (None, 0) => {
            return Err(Error::config(
                "inversion has no initialization source: no encoder adapter and refine_steps = 0",
            ))
        }
        (None, _) => LatentCode::zeros(generator.n_layers(), generator.style_dim),
    };
    if init.n_layers() != generator.n_layers() || init.style_dim() != generator.style_dim {
        return Err(Error::shape(format!(
            "encoder produced latent ({}, {}), generator expects ({}, {})",
            init.n_layers(),
            init.style_dim(),
            generator.n_layers(),
            generator.style_dim
        )));
    }
    if cfg.refine_steps == 0 {
        return Ok(init);
    }

    let traceable = {
        let mut probe = Tape::new();
        let l = probe.constant(init.vectors.clone().into_dyn());
        generator.backend.synthesize_traced(&mut probe, l).is_some()
    };

    let mut best = init.vectors.clone();
    let mut best_obj = inversion_objective(image, generator, &LatentCode::new(best.clone())?, cfg)?;

    if traceable {
        let mut current = best.clone();
        for _ in 0..cfg.refine_steps {
            let mut tape = Tape::new();
            let latent = tape.leaf(current.clone().into_dyn());
            let obj = traced_objective(&mut tape, image, generator, latent, cfg)?;
            let grads = tape.backward(obj);
            let g = grads.get_or_zeros(latent, &[current.nrows(), current.ncols()]);
            let g2 = g
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|e| Error::shape(e.to_string()))?;
            current = &current - &(g2 * cfg.refine_lr);
            let cand_obj =
                inversion_objective(image, generator, &LatentCode::new(current.clone())?, cfg)?;
            if cand_obj < best_obj {
                best_obj = cand_obj;
                best = current.clone();
            }
        }
    } else {
        // Derivative-free: gaussian perturbations around the incumbent.
        let mut rng = Rng::seed_from_u64(0x1abe17);
        let (rows, cols) = (best.nrows(), best.ncols());
        for _ in 0..cfg.refine_steps {
            let noise = Array2::from_shape_vec((rows, cols), rng.normal_vec(rows * cols)).unwrap();
            let cand = &best + &(noise * cfg.refine_lr);
            let cand_obj =
                inversion_objective(image, generator, &LatentCode::new(cand.clone())?, cfg)?;
            if cand_obj < best_obj {
                best_obj = cand_obj;
                best = cand;
            }
        }
    }
    LatentCode::new(best)
}

const TOY_STYLE_DIM: usize = 16;

/// Frozen random conv pyramid standing in for the pretrained generator:
/// per tap a 3x3 convolution, per-channel modulation 1 + A_i w_i from the
/// matching latent row, tanh bounding, bilinear upsampling between levels.
/// The final tap is the 3-channel image in [0, 1].
struct ToyBackend {
    schedule: FeatureSchedule,
    const_input: ArrayD<f64>,            // (c0, base, base)
    conv_w: Vec<ArrayD<f64>>,            // (c_i, c_prev, 3, 3)
    conv_b: Vec<ArrayD<f64>>,            // (c_i,)
    modulation: Vec<ArrayD<f64>>,        // (c_i, TOY_STYLE_DIM)
}

impl ToyBackend {
    fn build(schedule: &FeatureSchedule, seed: u64) -> Self {
        let mut rng = Rng::seed_from_u64(seed).derive(0x70b5);
        let c0 = schedule.entries[0].1;
        let base = schedule.base_resolution;
        let const_input = ArrayD::from_shape_vec(
            IxDyn(&[c0, base, base]),
            rng.normal_vec(c0 * base * base),
        )
        .unwrap();
        let mut conv_w = Vec::new();
        let mut conv_b = Vec::new();
        let mut modulation = Vec::new();
        let mut c_prev = c0;
        for &(_, c) in &schedule.entries {
            let fan_in = (c_prev * 9) as f64;
            let w: Vec<f64> = rng
                .normal_vec(c * c_prev * 9)
                .into_iter()
                .map(|v| v / fan_in.sqrt())
                .collect();
            conv_w.push(ArrayD::from_shape_vec(IxDyn(&[c, c_prev, 3, 3]), w).unwrap());
            let b: Vec<f64> = rng.normal_vec(c).into_iter().map(|v| 0.1 * v).collect();
            conv_b.push(ArrayD::from_shape_vec(IxDyn(&[c]), b).unwrap());
            let a: Vec<f64> = rng
                .normal_vec(c * TOY_STYLE_DIM)
                .into_iter()
                .map(|v| v / (TOY_STYLE_DIM as f64).sqrt())
                .collect();
            modulation.push(ArrayD::from_shape_vec(IxDyn(&[c, TOY_STYLE_DIM]), a).unwrap());
            c_prev = c;
        }
        ToyBackend {
            schedule: schedule.clone(),
            const_input,
            conv_w,
            conv_b,
            modulation,
        }
    }

    fn forward(&self, tape: &mut Tape, latent: Var) -> (Var, Vec<Var>) {
        let n = self.schedule.len();
        let mut features = Vec::with_capacity(n);
        let mut x = tape.constant(self.const_input.clone());
        let mut prev_res = self.schedule.base_resolution;
        for i in 0..n {
            let (res, _) = self.schedule.entries[i];
            if res != prev_res {
                x = tape.upsample_bilinear_2x(x);
                prev_res = res;
            }
            let w = tape.constant(self.conv_w[i].clone());
            let b = tape.constant(self.conv_b[i].clone());
            let a = tape.constant(self.modulation[i].clone());
            let conv = tape.conv2d(x, w, 1, 1);
            let conv = tape.add_bias(conv, b);
            let row = tape.narrow(latent, 0, i, 1);
            let row = tape.reshape(row, &[TOY_STYLE_DIM]);
            let gamma = tape.matvec(a, row);
            let gain = tape.add_scalar(gamma, 1.0);
            let modulated = tape.mul_chan(conv, gain);
            x = if i + 1 == n {
                // Image projection: bounded to [0, 1].
                let t = tape.tanh(modulated);
                let t = tape.add_scalar(t, 1.0);
                tape.scale(t, 0.5)
            } else {
                tape.tanh(modulated)
            };
            features.push(x);
        }
        (*features.last().unwrap(), features)
    }
}

impl GeneratorBackend for ToyBackend {
    fn synthesize(&self, latent: &LatentCode) -> Result<(Rgb01, Vec<ArrayD<f64>>)> {
        let mut tape = Tape::new();
        let l = tape.constant(latent.vectors.clone().into_dyn());
        let (img, feats) = self.forward(&mut tape, l);
        let image: Array3<f64> = tape
            .value(img)
            .clone()
            .into_dimensionality()
            .map_err(|e| Error::shape(e.to_string()))?;
        let features = feats.iter().map(|f| tape.value(*f).clone()).collect();
        Ok((image, features))
    }

    fn synthesize_traced(&self, tape: &mut Tape, latent: Var) -> Option<(Var, Vec<Var>)> {
        Some(self.forward(tape, latent))
    }

    fn sample_latent(&self, rng: &mut Rng) -> LatentCode {
        let n = self.schedule.len();
        LatentCode {
            vectors: Array2::from_shape_vec(
                (n, TOY_STYLE_DIM),
                rng.normal_vec(n * TOY_STYLE_DIM),
            )
            .unwrap(),
        }
    }
}

/// Deterministic stand-in generator for tests, demos, and offline runs.
pub fn build_toy_generator(schedule: &FeatureSchedule, seed: u64) -> Result<GeneratorHandle> {
    schedule.validate()?;
    let backend = ToyBackend::build(schedule, seed);
    Ok(GeneratorHandle::new(
        schedule.clone(),
        HandleKind::Toy,
        TOY_STYLE_DIM,
        Arc::new(backend),
    ))
}

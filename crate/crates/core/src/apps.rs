//! What the trained model is for: pulling a sketch out of a photo, nudging
//! it along a latent direction, and stamping out paired photo/sketch
//! datasets in new styles. All three ride the same frozen generator; the
//! sketch head is the only learned part.

use crate::error::{Error, Result};
use crate::fusion::{generate_sketch, SketchGeneratorParams};
use crate::image::{load_rgb, load_sketch, save_rgb, save_sketch, Rgb01};
use crate::npy;
use crate::rng::Rng;
use crate::tap::{hijack_features, invert_image, GeneratorHandle, InverterConfig, LatentCode};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::ops::Range;
use std::path::Path;

/// A latent-space direction with a human name. The vector is either one row
/// (applied to every targeted layer) or one row per generator layer.
#[derive(Debug, Clone, PartialEq)]
pub struct EditDirection {
    pub vector: Array2<f64>,
    pub name: String,
    /// Layers the edit touches; `None` means all of them.
    pub layer_range: Option<Range<usize>>,
}

impl EditDirection {
    pub fn new(vector: Array2<f64>, name: &str) -> Result<Self> {
        if vector.nrows() == 0 || vector.ncols() == 0 {
            return Err(Error::shape("direction vector must be non-empty"));
        }
        if vector.iter().any(|v| !v.is_finite()) {
            return Err(Error::data("direction vector has non-finite entries"));
        }
        Ok(EditDirection {
            vector,
            name: name.to_string(),
            layer_range: None,
        })
    }

    pub fn with_layer_range(mut self, range: Range<usize>) -> Self {
        self.layer_range = Some(range);
        self
    }

    /// Reads a `.npy` direction, either `(style_dim,)` or
    /// `(n_layers, style_dim)`.
    pub fn from_npy(path: &Path, name: &str) -> Result<Self> {
        let raw = npy::load_dyn(path)?;
        let vector = match raw.ndim() {
            1 => {
                let n = raw.len();
                raw.into_shape_with_order((1, n))
                    .map_err(|e| Error::shape(e.to_string()))?
            }
            2 => raw
                .into_dimensionality::<ndarray::Ix2>()
                .map_err(|e| Error::shape(e.to_string()))?,
            d => {
                return Err(Error::shape(format!(
                    "direction file must be 1- or 2-dimensional, got {d} dims"
                )))
            }
        };
        EditDirection::new(vector, name)
    }

    pub fn save_npy(&self, path: &Path) -> Result<()> {
        npy::save_array2(path, &self.vector)
    }
}

/// One generated training example plus the latent that produced it.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub latent: LatentCode,
    pub photo: Rgb01,
    pub sketch: Rgb01,
    pub style_tag: String,
}

/// Invert the photo into the generator's latent space, replay its feature
/// pyramid, and run the sketch head over it.
pub fn extract_sketch(
    image: &Rgb01,
    generator: &GeneratorHandle,
    params: &SketchGeneratorParams,
    inverter: &InverterConfig,
) -> Result<(Rgb01, LatentCode)> {
    let latent = invert_image(image, generator, inverter)?;
    let sketch = sketch_from_latent(&latent, generator, params)?;
    Ok((sketch, latent))
}

/// Sketch for a known latent; the photo half of the pair is implied.
pub fn sketch_from_latent(
    latent: &LatentCode,
    generator: &GeneratorHandle,
    params: &SketchGeneratorParams,
) -> Result<Rgb01> {
    let (_, pyramid) = hijack_features(latent, generator)?;
    generate_sketch(&pyramid, params)
}

/// Move a latent along a direction. `alpha == 0` returns the input
/// untouched; no arithmetic runs, so the result is the same bit pattern.
pub fn apply_direction(
    latent: &LatentCode,
    direction: &EditDirection,
    alpha: f64,
) -> Result<LatentCode> {
    let n_layers = latent.n_layers();
    let style_dim = latent.style_dim();
    if direction.vector.ncols() != style_dim {
        return Err(Error::shape(format!(
            "direction {:?} has width {}, latent style dim is {style_dim}",
            direction.name,
            direction.vector.ncols()
        )));
    }
    let rows = direction.vector.nrows();
    if rows != 1 && rows != n_layers {
        return Err(Error::shape(format!(
            "direction {:?} has {rows} rows; expected 1 or {n_layers}"
        , direction.name)));
    }
    let range = direction.layer_range.clone().unwrap_or(0..n_layers);
    if range.start >= range.end || range.end > n_layers {
        return Err(Error::config(format!(
            "layer range {:?} invalid for {n_layers} layers",
            range
        )));
    }
    if alpha == 0.0 {
        return Ok(latent.clone());
    }
    let mut vectors = latent.vectors.clone();
    for layer in range {
        let src = if rows == 1 { 0 } else { layer };
        for d in 0..style_dim {
            vectors[[layer, d]] += alpha * direction.vector[[src, d]];
        }
    }
    LatentCode::new(vectors)
}

/// Edit a latent and render the sketch of the result.
pub fn semantic_edit(
    latent: &LatentCode,
    direction: &EditDirection,
    alpha: f64,
    generator: &GeneratorHandle,
    params: &SketchGeneratorParams,
) -> Result<(Rgb01, LatentCode)> {
    let edited = apply_direction(latent, direction, alpha)?;
    let sketch = sketch_from_latent(&edited, generator, params)?;
    Ok((sketch, edited))
}

/// Draw `n` latents from one seeded stream and render both halves of each
/// pair. Rerunning with the same arguments reproduces the samples exactly.
pub fn synthesize_pairs(
    n: usize,
    seed: u64,
    generator: &GeneratorHandle,
    params: &SketchGeneratorParams,
    style_tag: &str,
) -> Result<Vec<PairedSample>> {
    let mut rng = Rng::seed_from_u64(seed).derive(0x9a12);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let latent = generator.sample_latent(&mut rng);
        let (photo, pyramid) = hijack_features(&latent, generator)?;
        let sketch = generate_sketch(&pyramid, params)?;
        out.push(PairedSample {
            latent,
            photo,
            sketch,
            style_tag: style_tag.to_string(),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub style_tag: String,
    pub count: usize,
    pub seed: u64,
    pub resolution: usize,
}

/// Lay a sample set down as `photo/NNNNN.png`, `sketch/NNNNN.png`,
/// `latent/NNNNN.npy` plus a manifest. Latents are exact; images live on
/// the 8-bit grid.
pub fn write_paired_dataset(
    dir: &Path,
    samples: &[PairedSample],
    seed: u64,
) -> Result<DatasetManifest> {
    let style_tag = samples
        .first()
        .map(|s| s.style_tag.clone())
        .unwrap_or_else(|| "empty".to_string());
    if samples.iter().any(|s| s.style_tag != style_tag) {
        return Err(Error::data("samples in one dataset must share a style tag"));
    }
    let resolution = samples.first().map(|s| s.photo.shape()[1]).unwrap_or(0);
    std::fs::create_dir_all(dir.join("photo"))?;
    std::fs::create_dir_all(dir.join("sketch"))?;
    std::fs::create_dir_all(dir.join("latent"))?;
    for (i, s) in samples.iter().enumerate() {
        let stem = format!("{i:05}");
        save_rgb(&dir.join("photo").join(format!("{stem}.png")), &s.photo)?;
        save_sketch(&dir.join("sketch").join(format!("{stem}.png")), &s.sketch)?;
        s.latent.save(&dir.join("latent").join(format!("{stem}.npy")))?;
    }
    let manifest = DatasetManifest {
        style_tag,
        count: samples.len(),
        seed,
        resolution,
    };
    let text =
        serde_json::to_string_pretty(&manifest).map_err(|e| Error::data(e.to_string()))?;
    std::fs::write(dir.join("manifest.json"), text)?;
    Ok(manifest)
}

/// Read a dataset written by `write_paired_dataset`. Images come back on
/// the 8-bit grid; latents come back bit-exact.
pub fn read_paired_dataset(dir: &Path) -> Result<(Vec<PairedSample>, DatasetManifest)> {
    let text = std::fs::read_to_string(dir.join("manifest.json"))
        .map_err(|e| Error::data(format!("no manifest in {}: {e}", dir.display())))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::data(format!("bad manifest: {e}")))?;
    let mut samples = Vec::with_capacity(manifest.count);
    for i in 0..manifest.count {
        let stem = format!("{i:05}");
        let photo = load_rgb(&dir.join("photo").join(format!("{stem}.png")))?;
        let sketch = load_sketch(&dir.join("sketch").join(format!("{stem}.png")))?;
        let latent = LatentCode::load(&dir.join("latent").join(format!("{stem}.npy")))?;
        samples.push(PairedSample {
            latent,
            photo,
            sketch,
            style_tag: manifest.style_tag.clone(),
        });
    }
    Ok((samples, manifest))
}

/// A deterministic pencil-style filter: inverted Sobel magnitude over the
/// gray image. Stands in for hand-drawn ground truth when exercising the
/// pipeline on toy data.
pub fn toy_sketch_filter(photo: &Rgb01) -> Rgb01 {
    let (h, w) = (photo.shape()[1], photo.shape()[2]);
    let gray = ndarray::Array2::from_shape_fn((h, w), |(y, x)| {
        (photo[[0, y, x]] + photo[[1, y, x]] + photo[[2, y, x]]) / 3.0
    });
    let at = |y: isize, x: isize| -> f64 {
        let yy = y.clamp(0, h as isize - 1) as usize;
        let xx = x.clamp(0, w as isize - 1) as usize;
        gray[[yy, xx]]
    };
    let mut out = Rgb01::zeros((3, h, w));
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
            let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
                - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
            // Sobel magnitude peaks at 4*sqrt(2); scale into [0, 1] and
            // invert so strokes are dark on white.
            let mag = (gx * gx + gy * gy).sqrt() / (4.0 * std::f64::consts::SQRT_2);
            let v = (1.0 - 2.0 * mag).clamp(0.0, 1.0);
            for c in 0..3 {
                out[[c, y as usize, x as usize]] = v;
            }
        }
    }
    out
}

/// Generate a toy dataset on disk: generator photos paired with filtered
/// sketches and the exact latents that made them.
pub fn toygen_dataset(
    dir: &Path,
    n: usize,
    seed: u64,
    generator: &GeneratorHandle,
    style_tag: &str,
) -> Result<DatasetManifest> {
    let mut rng = Rng::seed_from_u64(seed).derive(0x9a12);
    let mut samples = Vec::with_capacity(n);
    for _ in 0..n {
        let latent = generator.sample_latent(&mut rng);
        let (photo, _) = hijack_features(&latent, generator)?;
        let sketch = toy_sketch_filter(&photo);
        samples.push(PairedSample {
            latent,
            photo,
            sketch,
            style_tag: style_tag.to_string(),
        });
    }
    write_paired_dataset(dir, &samples, seed)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fusion::AblationFlags;
    use crate::image::quantize_unit;
    use crate::tap::{build_toy_generator, FeatureSchedule};

    fn toy() -> (GeneratorHandle, SketchGeneratorParams) {
        let schedule = FeatureSchedule::toy_64();
        let handle = build_toy_generator(&schedule, 3).unwrap();
        let params =
            SketchGeneratorParams::build(&schedule, AblationFlags::default(), 4).unwrap();
        (handle, params)
    }

    #[test]
    fn zero_alpha_is_a_no_op_bit_for_bit() {
        let (handle, params) = toy();
        let mut rng = Rng::seed_from_u64(9);
        let latent = handle.sample_latent(&mut rng);
        let base = sketch_from_latent(&latent, &handle, &params).unwrap();
        let dir = EditDirection::new(Array2::ones((1, handle.style_dim)), "age").unwrap();
        let (edited_sketch, edited_latent) =
            semantic_edit(&latent, &dir, 0.0, &handle, &params).unwrap();
        assert_eq!(edited_latent.vectors, latent.vectors);
        assert_eq!(edited_sketch, base);
    }

    #[test]
    fn row_targeted_edit_touches_only_that_row() {
        let (handle, _) = toy();
        let mut rng = Rng::seed_from_u64(9);
        let latent = handle.sample_latent(&mut rng);
        let mut v = Array2::zeros((1, handle.style_dim));
        v[[0, 2]] = 1.0;
        let dir = EditDirection::new(v, "unit").unwrap().with_layer_range(3..4);
        let edited = apply_direction(&latent, &dir, 2.0).unwrap();
        for layer in 0..latent.n_layers() {
            for d in 0..latent.style_dim() {
                let expect = if layer == 3 && d == 2 {
                    latent.vectors[[layer, d]] + 2.0
                } else {
                    latent.vectors[[layer, d]]
                };
                assert_eq!(edited.vectors[[layer, d]], expect);
            }
        }
    }

    #[test]
    fn full_shape_direction_uses_per_layer_rows() {
        let (handle, _) = toy();
        let mut rng = Rng::seed_from_u64(1);
        let latent = handle.sample_latent(&mut rng);
        let n = latent.n_layers();
        let d = latent.style_dim();
        let v = Array2::from_shape_fn((n, d), |(i, j)| (i * d + j) as f64 / 100.0);
        let dir = EditDirection::new(v.clone(), "full").unwrap();
        let edited = apply_direction(&latent, &dir, 0.5).unwrap();
        for i in 0..n {
            for j in 0..d {
                assert_eq!(
                    edited.vectors[[i, j]],
                    latent.vectors[[i, j]] + 0.5 * v[[i, j]]
                );
            }
        }
    }

    #[test]
    fn direction_shape_mismatches_are_rejected() {
        let (handle, _) = toy();
        let mut rng = Rng::seed_from_u64(1);
        let latent = handle.sample_latent(&mut rng);
        let bad_width = EditDirection::new(Array2::ones((1, 7)), "w").unwrap();
        assert!(matches!(
            apply_direction(&latent, &bad_width, 1.0),
            Err(Error::Shape(_))
        ));
        let bad_rows = EditDirection::new(Array2::ones((5, handle.style_dim)), "r").unwrap();
        assert!(matches!(
            apply_direction(&latent, &bad_rows, 1.0),
            Err(Error::Shape(_))
        ));
        let bad_range = EditDirection::new(Array2::ones((1, handle.style_dim)), "x")
            .unwrap()
            .with_layer_range(0..latent.n_layers() + 1);
        assert!(matches!(
            apply_direction(&latent, &bad_range, 1.0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn direction_npy_roundtrip_accepts_both_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let one = dir.path().join("one.npy");
        npy::save(&one, &[4], &[0.1, 0.2, 0.3, 0.4]).unwrap();
        let d1 = EditDirection::from_npy(&one, "one").unwrap();
        assert_eq!(d1.vector.nrows(), 1);
        assert_eq!(d1.vector[[0, 3]], 0.4);

        let full = dir.path().join("full.npy");
        let v = Array2::from_shape_fn((6, 4), |(i, j)| (i + j) as f64);
        npy::save_array2(&full, &v).unwrap();
        let d2 = EditDirection::from_npy(&full, "full").unwrap();
        assert_eq!(d2.vector, v);
    }

    #[test]
    fn synthesis_is_reproducible_and_zero_is_fine() {
        let (handle, params) = toy();
        assert!(synthesize_pairs(0, 7, &handle, &params, "toy").unwrap().is_empty());
        let a = synthesize_pairs(2, 7, &handle, &params, "toy").unwrap();
        let b = synthesize_pairs(2, 7, &handle, &params, "toy").unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_eq!(x.latent.vectors, y.latent.vectors);
            assert_eq!(x.photo, y.photo);
            assert_eq!(x.sketch, y.sketch);
        }
    }

    #[test]
    fn sketch_filter_is_flat_on_flat_input_and_dark_on_edges() {
        let flat = Rgb01::from_elem((3, 16, 16), 0.5);
        let s = toy_sketch_filter(&flat);
        assert!(s.iter().all(|&v| v == 1.0));

        let mut step = Rgb01::from_elem((3, 16, 16), 0.0);
        for c in 0..3 {
            for y in 0..16 {
                for x in 8..16 {
                    step[[c, y, x]] = 1.0;
                }
            }
        }
        let s = toy_sketch_filter(&step);
        assert!(s[[0, 8, 8]] < 0.5, "edge should draw a stroke");
        assert_eq!(s[[0, 8, 2]], 1.0, "far from the edge stays paper-white");
    }

    #[test]
    fn toygen_writes_a_loadable_layout() {
        let (handle, _) = toy();
        let dir = tempfile::tempdir().unwrap();
        let m = toygen_dataset(dir.path(), 2, 5, &handle, "toy").unwrap();
        assert_eq!(m.count, 2);
        let (samples, _) = read_paired_dataset(dir.path()).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].photo.shape(), &[3, 64, 64]);
    }

    #[test]
    fn dataset_roundtrip_regenerates_photos_exactly() {
        let (handle, params) = toy();
        let samples = synthesize_pairs(2, 13, &handle, &params, "toy").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_paired_dataset(dir.path(), &samples, 13).unwrap();
        assert_eq!(manifest.count, 2);
        assert_eq!(manifest.resolution, 64);

        let (back, m2) = read_paired_dataset(dir.path()).unwrap();
        assert_eq!(m2, manifest);
        for (orig, got) in samples.iter().zip(back.iter()) {
            // Latents are exact, so replaying the generator reproduces the
            // photo up to the 8-bit grid the PNG stores.
            assert_eq!(got.latent.vectors, orig.latent.vectors);
            let (photo, _) = hijack_features(&got.latent, &handle).unwrap();
            assert_eq!(quantize_unit(&photo), got.photo);
        }
    }
}

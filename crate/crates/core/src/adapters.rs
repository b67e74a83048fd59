//! Adapter boundaries for the pretrained models this pipeline borrows
//! (feature network, embedding model, inversion encoder, eval metrics),
//! plus the deterministic stubs that stand in for them offline.
//!
//! Perceptual and embedding adapters run under the tape so their terms
//! carry gradients back to whatever produced the image.

use crate::error::{Error, Result};
use crate::image::Rgb01;
use crate::nn::{Tape, Var};
use crate::rng::Rng;
use ndarray::{ArrayD, IxDyn};
use std::sync::Arc;

/// Feature network with a fixed list of tapped layers.
pub trait PerceptualAdapter: Send + Sync {
    fn name(&self) -> &str;
    /// Activations at each tap, shallowest first.
    fn features(&self, tape: &mut Tape, image: Var) -> Result<Vec<Var>>;
}

/// Image-level embedding model; output is a flat vector.
pub trait EmbeddingAdapter: Send + Sync {
    fn name(&self) -> &str;
    fn embed(&self, tape: &mut Tape, image: Var) -> Result<Var>;
}

/// Full-reference image metric for evaluation runs.
pub trait MetricAdapter: Send + Sync {
    fn name(&self) -> &str;
    fn available(&self) -> bool {
        true
    }
    fn score(&self, gt: &Rgb01, pred: &Rgb01) -> Result<f64>;
}

/// Single tap, identity map. Its per-layer distance therefore equals plain
/// pixel L1, which pins the perceptual-loss reduction in tests.
pub struct IdentityFeatures;

impl PerceptualAdapter for IdentityFeatures {
    fn name(&self) -> &str {
        "stub:identity"
    }
    fn features(&self, _tape: &mut Tape, image: Var) -> Result<Vec<Var>> {
        Ok(vec![image])
    }
}

/// Four tapped layers of frozen random stride-2 convolutions with tanh.
/// Stands in for a pretrained feature net at toy scale: fixed weights,
/// smooth, and differentiable through the tape.
pub struct FixedRandomFeatures {
    convs: Vec<(ArrayD<f64>, ArrayD<f64>)>, // (weight, bias) per tap
}

impl FixedRandomFeatures {
    pub fn new(seed: u64) -> Self {
        let mut rng = Rng::seed_from_u64(seed).derive(0xfea7);
        let mut convs = Vec::new();
        let mut c_in = 3;
        for _ in 0..4 {
            let c_out = 8;
            let fan = (c_in * 9) as f64;
            let w: Vec<f64> = rng
                .normal_vec(c_out * c_in * 9)
                .into_iter()
                .map(|v| v / fan.sqrt())
                .collect();
            let b = vec![0.0; c_out];
            convs.push((
                ArrayD::from_shape_vec(IxDyn(&[c_out, c_in, 3, 3]), w).unwrap(),
                ArrayD::from_shape_vec(IxDyn(&[c_out]), b).unwrap(),
            ));
            c_in = c_out;
        }
        FixedRandomFeatures { convs }
    }
}

impl PerceptualAdapter for FixedRandomFeatures {
    fn name(&self) -> &str {
        "stub:random4"
    }
    fn features(&self, tape: &mut Tape, image: Var) -> Result<Vec<Var>> {
        let shape = tape.value(image).shape().to_vec();
        if shape.len() != 3 || shape[0] != 3 {
            return Err(Error::shape(format!(
                "perceptual stub expects a (3, h, w) image, got {shape:?}"
            )));
        }
        let mut taps = Vec::with_capacity(4);
        let mut x = image;
        for (w, b) in &self.convs {
            let wv = tape.constant(w.clone());
            let bv = tape.constant(b.clone());
            let stride = if tape.value(x).shape()[1] >= 8 { 2 } else { 1 };
            let c = tape.conv2d(x, wv, stride, 1);
            let c = tape.add_bias(c, bv);
            x = tape.tanh(c);
            taps.push(x);
        }
        Ok(taps)
    }
}

/// Adapter endpoint that was configured but cannot be reached.
pub struct UnreachablePerceptual {
    pub endpoint: String,
}

impl PerceptualAdapter for UnreachablePerceptual {
    fn name(&self) -> &str {
        "unreachable"
    }
    fn features(&self, _tape: &mut Tape, _image: Var) -> Result<Vec<Var>> {
        Err(Error::adapter(format!(
            "perceptual adapter endpoint {:?} is unreachable",
            self.endpoint
        )))
    }
}

/// Embedding = per-channel spatial means. Exact on constant images, which
/// makes orthogonal / antipodal embedding cases representable in tests:
/// a pure-red image embeds to (1, 0, 0), pure green to (0, 1, 0).
pub struct ChannelMeanEmbed;

impl EmbeddingAdapter for ChannelMeanEmbed {
    fn name(&self) -> &str {
        "stub:chanmean"
    }
    fn embed(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        Ok(tape.spatial_mean(image))
    }
}

/// Frozen random conv stack pooled to a vector; a toy-scale stand-in for a
/// pretrained image-text embedding tower.
pub struct FixedRandomEmbed {
    features: FixedRandomFeatures,
}

impl FixedRandomEmbed {
    pub fn new(seed: u64) -> Self {
        FixedRandomEmbed {
            features: FixedRandomFeatures::new(seed ^ 0xe111bed),
        }
    }
}

impl EmbeddingAdapter for FixedRandomEmbed {
    fn name(&self) -> &str {
        "stub:randembed"
    }
    fn embed(&self, tape: &mut Tape, image: Var) -> Result<Var> {
        let taps = self.features.features(tape, image)?;
        let last = *taps.last().unwrap();
        Ok(tape.spatial_mean(last))
    }
}

pub struct UnreachableEmbedding {
    pub endpoint: String,
}

impl EmbeddingAdapter for UnreachableEmbedding {
    fn name(&self) -> &str {
        "unreachable"
    }
    fn embed(&self, _tape: &mut Tape, _image: Var) -> Result<Var> {
        Err(Error::adapter(format!(
            "embedding adapter endpoint {:?} is unreachable",
            self.endpoint
        )))
    }
}

/// Mean absolute pixel difference; lower is better.
pub struct L1Metric;

impl MetricAdapter for L1Metric {
    fn name(&self) -> &str {
        "l1"
    }
    fn score(&self, gt: &Rgb01, pred: &Rgb01) -> Result<f64> {
        if gt.shape() != pred.shape() {
            return Err(Error::shape(format!(
                "metric inputs differ: {:?} vs {:?}",
                gt.shape(),
                pred.shape()
            )));
        }
        let n = gt.len() as f64;
        Ok(gt
            .iter()
            .zip(pred.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / n)
    }
}

/// Global structural similarity on the channel-averaged image, standard
/// constants (k1 = 0.01, k2 = 0.03, L = 1). Higher is better.
pub struct SsimMetric;

impl MetricAdapter for SsimMetric {
    fn name(&self) -> &str {
        "ssim"
    }
    fn score(&self, gt: &Rgb01, pred: &Rgb01) -> Result<f64> {
        if gt.shape() != pred.shape() {
            return Err(Error::shape(format!(
                "metric inputs differ: {:?} vs {:?}",
                gt.shape(),
                pred.shape()
            )));
        }
        let gray = |img: &Rgb01| -> Vec<f64> {
            let (h, w) = (img.shape()[1], img.shape()[2]);
            let mut out = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    out[y * w + x] = (img[[0, y, x]] + img[[1, y, x]] + img[[2, y, x]]) / 3.0;
                }
            }
            out
        };
        let a = gray(gt);
        let b = gray(pred);
        let n = a.len() as f64;
        let mu_a = a.iter().sum::<f64>() / n;
        let mu_b = b.iter().sum::<f64>() / n;
        let var_a = a.iter().map(|v| (v - mu_a).powi(2)).sum::<f64>() / n;
        let var_b = b.iter().map(|v| (v - mu_b).powi(2)).sum::<f64>() / n;
        let cov = a
            .iter()
            .zip(b.iter())
            .map(|(x, y)| (x - mu_a) * (y - mu_b))
            .sum::<f64>()
            / n;
        let c1 = 0.01f64.powi(2);
        let c2 = 0.03f64.powi(2);
        Ok(((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
            / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)))
    }
}

/// Cosine similarity of adapter embeddings; higher is better.
pub struct EmbedCosineMetric {
    pub embed: Arc<dyn EmbeddingAdapter>,
}

impl MetricAdapter for EmbedCosineMetric {
    fn name(&self) -> &str {
        "embed-cosine"
    }
    fn score(&self, gt: &Rgb01, pred: &Rgb01) -> Result<f64> {
        let mut tape = Tape::new();
        let g = tape.constant(gt.clone().into_dyn());
        let p = tape.constant(pred.clone().into_dyn());
        let eg = self.embed.embed(&mut tape, g)?;
        let ep = self.embed.embed(&mut tape, p)?;
        let a = tape.value(eg);
        let b = tape.value(ep);
        let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
        let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return Err(Error::data("degenerate zero-norm embedding"));
        }
        Ok(a.iter().zip(b.iter()).map(|(x, y)| x * y).sum::<f64>() / (na * nb))
    }
}

/// A metric whose backing model is not present in this environment. It is
/// listed in reports as unavailable instead of failing the whole run.
pub struct UnavailableMetric {
    pub metric_name: String,
}

impl MetricAdapter for UnavailableMetric {
    fn name(&self) -> &str {
        &self.metric_name
    }
    fn available(&self) -> bool {
        false
    }
    fn score(&self, _gt: &Rgb01, _pred: &Rgb01) -> Result<f64> {
        Err(Error::adapter(format!(
            "metric {:?} has no backing model in this environment",
            self.metric_name
        )))
    }
}

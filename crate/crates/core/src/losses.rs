//! Training objectives. Every term has a traced form (tape vars in, tape
//! var out) used by the optimizer, and a plain-number wrapper used by tests
//! and evaluation. The weighted total accumulates strictly left to right:
//! recon, perceptual, embedding, adversarial.

use crate::adapters::{EmbeddingAdapter, PerceptualAdapter};
use crate::error::{Error, Result};
use crate::fusion::ConvParams;
use crate::image::Rgb01;
use crate::nn::{Tape, Var};
use crate::parsing::{part_box, MaskSet, PartGroup, PartLabelMap};
use crate::rng::Rng;
use ndarray::{Array2, Array3, ArrayD};
use serde::{Deserialize, Serialize};

/// Discriminator probabilities are clamped away from {0, 1} before the log.
pub const PROB_CLAMP: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub recon: f64,
    pub perc: f64,
    pub clip: f64,
    pub adv: f64,
}

impl LossWeights {
    pub fn new(recon: f64, perc: f64, clip: f64, adv: f64) -> Self {
        LossWeights {
            recon,
            perc,
            clip,
            adv,
        }
    }

    /// Curriculum stage 1: reconstruction-anchored.
    pub fn stage1_default() -> Self {
        LossWeights::new(200.0, 1.2, 120.0, 1.0)
    }

    /// Curriculum stage 2: the pixel anchor is dropped.
    pub fn stage2_default() -> Self {
        LossWeights::new(0.0, 1.2, 120.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("recon", self.recon),
            ("perc", self.perc),
            ("clip", self.clip),
            ("adv", self.adv),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!(
                    "loss weight {name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon: f64,
    pub perc: f64,
    pub clip: f64,
    pub adv_g: f64,
    pub adv_d: f64,
    pub total_g: f64,
}

fn check_same_image(a: &Rgb01, b: &Rgb01) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "image shapes differ: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// Mean absolute difference, traced.
pub fn recon_term(tape: &mut Tape, gt: Var, pred: Var) -> Var {
    let d = tape.sub(gt, pred);
    let a = tape.abs(d);
    tape.mean_all(a)
}

/// Mean absolute pixel difference.
pub fn recon_loss(gt: &Rgb01, pred: &Rgb01) -> Result<f64> {
    check_same_image(gt, pred)?;
    let mut tape = Tape::new();
    let g = tape.constant(gt.clone().into_dyn());
    let p = tape.constant(pred.clone().into_dyn());
    let r = recon_term(&mut tape, g, p);
    Ok(tape.scalar_value(r))
}

/// Feature distance over the adapter's taps: a full-image sum plus the
/// average of per-part sums over the parts present in the labels. Crop
/// boxes come from the labels with `pad` pixels of context; both inputs
/// are cropped with the same box. Traced.
pub fn perceptual_term(
    tape: &mut Tape,
    gt: Var,
    pred: Var,
    labels: &PartLabelMap,
    featnet: &dyn PerceptualAdapter,
    parts: &[PartGroup],
    pad: usize,
) -> Result<Var> {
    let tap_distance = |tape: &mut Tape, a: Var, b: Var| -> Result<Var> {
        let fa = featnet.features(tape, a)?;
        let fb = featnet.features(tape, b)?;
        let mut total: Option<Var> = None;
        for (x, y) in fa.iter().zip(fb.iter()) {
            let d = tape.sub(*x, *y);
            let ad = tape.abs(d);
            let m = tape.mean_all(ad);
            total = Some(match total {
                None => m,
                Some(t) => tape.add(t, m),
            });
        }
        Ok(total.expect("adapter must expose at least one tap"))
    };

    let mut loss = tap_distance(tape, gt, pred)?;
    let mut part_terms: Vec<Var> = Vec::new();
    for group in parts {
        let resolved = group.resolve()?;
        if let Some(b) = part_box(labels, &resolved, pad) {
            let cg = tape.crop(gt, b.y0, b.x0, b.h, b.w);
            let cp = tape.crop(pred, b.y0, b.x0, b.h, b.w);
            part_terms.push(tap_distance(tape, cg, cp)?);
        }
    }
    if !part_terms.is_empty() {
        let n = part_terms.len() as f64;
        let mut sum = part_terms[0];
        for t in &part_terms[1..] {
            sum = tape.add(sum, *t);
        }
        let avg = tape.scale(sum, 1.0 / n);
        loss = tape.add(loss, avg);
    }
    Ok(loss)
}

/// Perceptual loss with an explicit part list and crop pad.
pub fn perceptual_loss_with(
    gt: &Rgb01,
    pred: &Rgb01,
    labels: &PartLabelMap,
    featnet: &dyn PerceptualAdapter,
    parts: &[PartGroup],
    pad: usize,
) -> Result<f64> {
    check_same_image(gt, pred)?;
    let mut tape = Tape::new();
    let g = tape.constant(gt.clone().into_dyn());
    let p = tape.constant(pred.clone().into_dyn());
    let v = perceptual_term(&mut tape, g, p, labels, featnet, parts, pad)?;
    Ok(tape.scalar_value(v))
}

/// Crop pad in pixels for a frame resolution: 8 px at 1024, scaled down
/// proportionally, never below 1.
pub fn default_crop_pad(res: usize) -> usize {
    (8 * res / 1024).max(1)
}

/// Perceptual loss with the default part list (eyes, nose, lips).
pub fn perceptual_loss(
    gt: &Rgb01,
    pred: &Rgb01,
    labels: &PartLabelMap,
    featnet: &dyn PerceptualAdapter,
) -> Result<f64> {
    perceptual_loss_with(
        gt,
        pred,
        labels,
        featnet,
        &crate::parsing::default_perceptual_parts(),
        default_crop_pad(labels.resolution()),
    )
}

/// 1 - cosine similarity of adapter embeddings, traced. A zero-norm
/// embedding has no direction and is reported as a numeric error.
pub fn clip_term(
    tape: &mut Tape,
    gt: Var,
    pred: Var,
    embednet: &dyn EmbeddingAdapter,
) -> Result<Var> {
    let eg = embednet.embed(tape, gt)?;
    let ep = embednet.embed(tape, pred)?;
    for (name, v) in [("first", eg), ("second", ep)] {
        let norm2: f64 = tape.value(v).iter().map(|x| x * x).sum();
        if norm2 == 0.0 {
            return Err(Error::numeric(format!(
                "degenerate {name} embedding has zero norm"
            )));
        }
    }
    let prod = tape.mul(eg, ep);
    let dot = tape.sum_all(prod);
    let gg = tape.mul(eg, eg);
    let gg = tape.sum_all(gg);
    let na = tape.sqrt(gg);
    let pp = tape.mul(ep, ep);
    let pp = tape.sum_all(pp);
    let nb = tape.sqrt(pp);
    let denom = tape.mul(na, nb);
    let inv = tape.recip(denom);
    let cos = tape.mul(dot, inv);
    let neg = tape.neg(cos);
    Ok(tape.add_scalar(neg, 1.0))
}

/// Embedding-direction loss in [0, 2].
pub fn clip_loss(gt: &Rgb01, pred: &Rgb01, embednet: &dyn EmbeddingAdapter) -> Result<f64> {
    check_same_image(gt, pred)?;
    let mut tape = Tape::new();
    let g = tape.constant(gt.clone().into_dyn());
    let p = tape.constant(pred.clone().into_dyn());
    let v = clip_term(&mut tape, g, p, embednet)?;
    Ok(tape.scalar_value(v))
}

/// Four stride-2/stride-1 conv blocks and a single-channel head; outputs a
/// patch probability map through a clamped sigmoid. `Const` is a
/// calibration stub with a fixed probability.
#[derive(Debug, Clone, PartialEq)]
pub enum PatchDisc {
    Conv(PatchDiscParams),
    Const(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PatchDiscParams {
    pub layers: Vec<ConvParams>,
}

/// (out_multiplier, stride) per layer; the final layer is the 1-channel head.
const DISC_PLAN: [(usize, usize); 4] = [(1, 2), (2, 2), (4, 2), (8, 1)];

impl PatchDiscParams {
    pub fn build(in_channels: usize, base_channels: usize, rng: &mut Rng) -> Self {
        let mut layers = Vec::new();
        let mut c_in = in_channels;
        for (mult, _) in DISC_PLAN {
            let c_out = base_channels * mult;
            layers.push(ConvParams::random(rng, c_out, c_in, 4));
            c_in = c_out;
        }
        layers.push(ConvParams::random(rng, 1, c_in, 4));
        PatchDiscParams { layers }
    }
}

/// One discriminator per configured region; names match the mask set.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscriminatorBank {
    pub names: Vec<String>,
    pub discs: Vec<PatchDisc>,
}

impl DiscriminatorBank {
    /// Conditional discriminators over photo (3) + sketch (3) channels.
    pub fn build(regions: &[String], base_channels: usize, seed: u64) -> Self {
        let mut rng = Rng::seed_from_u64(seed).derive(0xd15c);
        let discs = regions
            .iter()
            .map(|_| PatchDisc::Conv(PatchDiscParams::build(6, base_channels, &mut rng)))
            .collect();
        DiscriminatorBank {
            names: regions.to_vec(),
            discs,
        }
    }

    pub fn tensors(&self) -> Vec<&ArrayD<f64>> {
        let mut out = Vec::new();
        for d in &self.discs {
            if let PatchDisc::Conv(p) = d {
                for layer in &p.layers {
                    out.push(&layer.weight);
                    out.push(&layer.bias);
                }
            }
        }
        out
    }

    pub fn set_tensors(&mut self, tensors: &[ArrayD<f64>]) -> Result<()> {
        let mut slots: Vec<&mut ArrayD<f64>> = Vec::new();
        for d in &mut self.discs {
            if let PatchDisc::Conv(p) = d {
                for layer in &mut p.layers {
                    slots.push(&mut layer.weight);
                    slots.push(&mut layer.bias);
                }
            }
        }
        if slots.len() != tensors.len() {
            return Err(Error::checkpoint(format!(
                "discriminator tensor count mismatch: {} vs {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::checkpoint(format!(
                    "discriminator tensor shape mismatch: {:?} vs {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn trace(&self, tape: &mut Tape, as_leaves: bool) -> TracedBank {
        let discs = self
            .discs
            .iter()
            .map(|d| match d {
                PatchDisc::Const(p) => TracedDisc::Const(*p),
                PatchDisc::Conv(params) => TracedDisc::Conv(
                    params
                        .layers
                        .iter()
                        .map(|l| {
                            let w = if as_leaves {
                                tape.leaf(l.weight.clone())
                            } else {
                                tape.constant(l.weight.clone())
                            };
                            let b = if as_leaves {
                                tape.leaf(l.bias.clone())
                            } else {
                                tape.constant(l.bias.clone())
                            };
                            (w, b)
                        })
                        .collect(),
                ),
            })
            .collect();
        TracedBank {
            names: self.names.clone(),
            discs,
        }
    }
}

pub enum TracedDisc {
    Conv(Vec<(Var, Var)>),
    Const(f64),
}

pub struct TracedBank {
    pub names: Vec<String>,
    pub discs: Vec<TracedDisc>,
}

impl TracedBank {
    /// Vars in the same canonical order as `DiscriminatorBank::tensors`.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for d in &self.discs {
            if let TracedDisc::Conv(layers) = d {
                for (w, b) in layers {
                    out.push(*w);
                    out.push(*b);
                }
            }
        }
        out
    }
}

/// Patch probability map for one (masked photo, masked sketch) pair.
pub fn disc_forward(tape: &mut Tape, disc: &TracedDisc, photo_m: Var, sketch_m: Var) -> Var {
    match disc {
        TracedDisc::Const(p) => {
            let v = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            tape.constant(ArrayD::from_elem(ndarray::IxDyn(&[1, 1, 1]), v))
        }
        TracedDisc::Conv(layers) => {
            let mut x = tape.concat(&[photo_m, sketch_m], 0);
            let n = layers.len();
            for (i, (w, b)) in layers.iter().enumerate() {
                let stride = if i < DISC_PLAN.len() { DISC_PLAN[i].1 } else { 1 };
                let c = tape.conv2d(x, *w, stride, 1);
                let c = tape.add_bias(c, *b);
                x = if i + 1 == n {
                    let s = tape.sigmoid(c);
                    tape.clamp(s, PROB_CLAMP, 1.0 - PROB_CLAMP)
                } else {
                    tape.leaky_relu(c, 0.2)
                };
            }
            x
        }
    }
}

/// The exact arrays a regional discriminator receives: photo and sketch
/// each multiplied pointwise by the region mask.
pub fn masked_disc_inputs(
    photo: &Rgb01,
    sketch: &Rgb01,
    mask: &Array2<f64>,
) -> (Array3<f64>, Array3<f64>) {
    let apply = |img: &Rgb01| {
        let mut out = img.clone();
        for c in 0..out.shape()[0] {
            for y in 0..out.shape()[1] {
                for x in 0..out.shape()[2] {
                    out[[c, y, x]] *= mask[[y, x]];
                }
            }
        }
        out
    };
    (apply(photo), apply(sketch))
}

pub(crate) fn mask_traced(tape: &mut Tape, img: Var, mask: &Array2<f64>) -> Var {
    let (h, w) = (mask.nrows(), mask.ncols());
    let m = tape.constant(
        mask.clone()
            .into_shape_with_order(ndarray::IxDyn(&[1, h, w]))
            .unwrap(),
    );
    tape.mul_map(img, m)
}

/// mean log D(real) + mean log(1 - D(fake)); the discriminator ascends this.
pub fn disc_ascent_term(tape: &mut Tape, p_real: Var, p_fake: Var) -> Var {
    let lr = tape.log(p_real);
    let mr = tape.mean_all(lr);
    let nf = tape.neg(p_fake);
    let om = tape.add_scalar(nf, 1.0);
    let lf = tape.log(om);
    let mf = tape.mean_all(lf);
    tape.add(mr, mf)
}

/// Non-saturating generator term: mean of -log D(fake).
pub fn gen_adv_term(tape: &mut Tape, p_fake: Var) -> Var {
    let lf = tape.log(p_fake);
    let m = tape.mean_all(lf);
    tape.neg(m)
}

/// Regional adversarial terms for one sample. Returns (adv_g, adv_d):
/// adv_g is the generator's non-saturating loss summed over regions,
/// adv_d the discriminators' ascent target summed over regions.
pub fn adversarial_losses(
    photo: &Rgb01,
    gt: &Rgb01,
    pred: &Rgb01,
    masks: &MaskSet,
    bank: &DiscriminatorBank,
) -> Result<(f64, f64)> {
    check_same_image(photo, gt)?;
    check_same_image(photo, pred)?;
    let mut tape = Tape::new();
    let traced = bank.trace(&mut tape, false);
    let photo_v = tape.constant(photo.clone().into_dyn());
    let gt_v = tape.constant(gt.clone().into_dyn());
    let pred_v = tape.constant(pred.clone().into_dyn());
    let mut adv_g = 0.0;
    let mut adv_d = 0.0;
    for (name, disc) in traced.names.iter().zip(traced.discs.iter()) {
        let mask = masks
            .get(name)
            .ok_or_else(|| Error::config(format!("no mask for discriminator region {name:?}")))?;
        let pm = mask_traced(&mut tape, photo_v, mask);
        let gm = mask_traced(&mut tape, gt_v, mask);
        let fm = mask_traced(&mut tape, pred_v, mask);
        let p_real = disc_forward(&mut tape, disc, pm, gm);
        let p_fake = disc_forward(&mut tape, disc, pm, fm);
        let d = disc_ascent_term(&mut tape, p_real, p_fake);
        let g = gen_adv_term(&mut tape, p_fake);
        adv_d += tape.scalar_value(d);
        adv_g += tape.scalar_value(g);
    }
    Ok((adv_g, adv_d))
}

/// One sampled spatial transform, shared by photo, ground truth, and
/// prediction. Each primitive fires independently with probability p:
/// horizontal flip, integer translation up to res/8, rotation up to 10
/// degrees, scaling in [0.9, 1.1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AugTransform {
    pub flip: bool,
    pub dx: i64,
    pub dy: i64,
    pub rot_deg: f64,
    pub scale: f64,
}

impl AugTransform {
    pub fn identity() -> Self {
        AugTransform {
            flip: false,
            dx: 0,
            dy: 0,
            rot_deg: 0.0,
            scale: 1.0,
        }
    }

    pub fn is_identity(&self) -> bool {
        !self.flip && self.dx == 0 && self.dy == 0 && self.rot_deg == 0.0 && self.scale == 1.0
    }

    /// Draw order is fixed: flip gate, translate gate (+dx, +dy), rotate
    /// gate (+angle), scale gate (+factor).
    pub fn draw(rng: &mut Rng, p: f64, res: usize) -> Self {
        let mut t = AugTransform::identity();
        t.flip = rng.uniform() < p;
        if rng.uniform() < p {
            let max = (res / 8) as i64;
            t.dx = rng.below(2 * max as usize + 1) as i64 - max;
            t.dy = rng.below(2 * max as usize + 1) as i64 - max;
        }
        if rng.uniform() < p {
            t.rot_deg = rng.uniform_in(-10.0, 10.0);
        }
        if rng.uniform() < p {
            t.scale = rng.uniform_in(0.9, 1.1);
        }
        t
    }

    /// Output-to-input affine matrix [a, b, c, d, e, f]:
    /// src_x = a*x + b*y + c, src_y = d*x + e*y + f. Primitives compose as
    /// flip, then translate, then rotate+scale about the pixel center.
    /// Identity and flip-only transforms stay numerically exact.
    pub fn matrix(&self, res: usize) -> [f64; 6] {
        type M3 = [[f64; 3]; 3];
        const I: M3 = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
        fn mul(a: &M3, b: &M3) -> M3 {
            let mut out = [[0.0; 3]; 3];
            for i in 0..3 {
                for j in 0..3 {
                    for (k, bk) in b.iter().enumerate() {
                        out[i][j] += a[i][k] * bk[j];
                    }
                }
            }
            out
        }
        let r = (res - 1) as f64;
        let flip_inv: M3 = if self.flip {
            [[-1.0, 0.0, r], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]
        } else {
            I
        };
        let trans_inv: M3 = [
            [1.0, 0.0, -(self.dx as f64)],
            [0.0, 1.0, -(self.dy as f64)],
            [0.0, 0.0, 1.0],
        ];
        let rotscale_inv: M3 = if self.rot_deg == 0.0 && self.scale == 1.0 {
            I
        } else {
            let c = r / 2.0;
            let th = self.rot_deg.to_radians();
            let k = 1.0 / self.scale;
            let (cos, sin) = (th.cos(), th.sin());
            // Inverse of rotation-by-th + scale about (c, c).
            [
                [k * cos, k * sin, c - k * (cos * c + sin * c)],
                [-k * sin, k * cos, c - k * (-sin * c + cos * c)],
                [0.0, 0.0, 1.0],
            ]
        };
        let m = mul(&flip_inv, &mul(&trans_inv, &rotscale_inv));
        [m[0][0], m[0][1], m[0][2], m[1][0], m[1][1], m[1][2]]
    }

    /// Warp an image (bilinear, zero outside the frame).
    pub fn apply_image(&self, img: &Rgb01) -> Rgb01 {
        if self.is_identity() {
            return img.clone();
        }
        let res = img.shape()[1];
        let mut tape = Tape::new();
        let v = tape.constant(img.clone().into_dyn());
        let w = tape.affine_warp(v, self.matrix(res));
        tape.value(w)
            .clone()
            .into_dimensionality::<ndarray::Ix3>()
            .unwrap()
    }

    pub fn apply_traced(&self, tape: &mut Tape, img: Var, res: usize) -> Var {
        if self.is_identity() {
            return img;
        }
        tape.affine_warp(img, self.matrix(res))
    }

    /// Nearest-neighbor warp for label maps; out-of-frame pixels become
    /// background.
    pub fn apply_labels(&self, labels: &PartLabelMap) -> PartLabelMap {
        if self.is_identity() {
            return labels.clone();
        }
        let res = labels.resolution();
        let m = self.matrix(res);
        let mut out = Array2::from_elem((res, res), crate::parsing::Part::Background.code());
        for y in 0..res {
            for x in 0..res {
                let (xf, yf) = (x as f64, y as f64);
                let sx = m[0] * xf + m[1] * yf + m[2];
                let sy = m[3] * xf + m[4] * yf + m[5];
                let xs = sx.round() as i64;
                let ys = sy.round() as i64;
                if xs >= 0 && ys >= 0 && (xs as usize) < res && (ys as usize) < res {
                    out[[y, x]] = labels.labels[[ys as usize, xs as usize]];
                }
            }
        }
        PartLabelMap { labels: out }
    }
}

/// Draw one transform and apply it identically to all three images.
/// With p = 0 every primitive is identity and the inputs come back
/// unchanged.
pub fn joint_augment(
    photo: &Rgb01,
    gt: &Rgb01,
    pred: &Rgb01,
    rng: &mut Rng,
    p: f64,
) -> Result<(Rgb01, Rgb01, Rgb01, AugTransform)> {
    check_same_image(photo, gt)?;
    check_same_image(photo, pred)?;
    if photo.shape()[1] != photo.shape()[2] {
        return Err(Error::shape("augmentation expects square images".to_string()));
    }
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(format!("augmentation probability {p} not in [0, 1]")));
    }
    let t = AugTransform::draw(rng, p, photo.shape()[1]);
    Ok((
        t.apply_image(photo),
        t.apply_image(gt),
        t.apply_image(pred),
        t,
    ))
}

/// Weighted generator total plus the bookkeeping copy of every component.
/// Any non-finite component is rejected by name.
pub fn total_objective(
    recon: f64,
    perc: f64,
    clip: f64,
    adv_g: f64,
    adv_d: f64,
    weights: &LossWeights,
) -> Result<LossBreakdown> {
    weights.validate()?;
    for (name, v) in [
        ("recon", recon),
        ("perc", perc),
        ("clip", clip),
        ("adv_g", adv_g),
        ("adv_d", adv_d),
    ] {
        if !v.is_finite() {
            return Err(Error::numeric(format!(
                "loss component {name} is not finite: {v}"
            )));
        }
    }
    let total_g =
        ((weights.recon * recon + weights.perc * perc) + weights.clip * clip) + weights.adv * adv_g;
    Ok(LossBreakdown {
        recon,
        perc,
        clip,
        adv_g,
        adv_d,
        total_g,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{ChannelMeanEmbed, FixedRandomFeatures, IdentityFeatures};
    use crate::parsing::{default_regions, discriminator_masks, stub_layout, StubMode, StubParser};
    use crate::parsing::{FaceParser, Part};

    fn flat(v: f64) -> Rgb01 {
        Array3::from_elem((3, 64, 64), v)
    }

    fn rand_img(rng: &mut Rng, res: usize) -> Rgb01 {
        Array3::from_shape_vec(
            (3, res, res),
            (0..3 * res * res).map(|_| rng.uniform()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn recon_quarter_gap_and_brute_force_oracle() {
        assert_eq!(recon_loss(&flat(1.0), &flat(0.75)).unwrap(), 0.25);

        let mut rng = Rng::seed_from_u64(1);
        let a = rand_img(&mut rng, 8);
        let b = rand_img(&mut rng, 8);
        let mut sum = 0.0;
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    sum += (a[[c, y, x]] - b[[c, y, x]]).abs();
                }
            }
        }
        let oracle = sum / (3.0 * 64.0);
        assert!((recon_loss(&a, &b).unwrap() - oracle).abs() < 1e-15);
        assert_eq!(recon_loss(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn identity_featnet_without_parts_reduces_to_recon() {
        let parser = StubParser {
            mode: StubMode::AllBackground,
        };
        let mut rng = Rng::seed_from_u64(2);
        let a = rand_img(&mut rng, 32);
        let b = rand_img(&mut rng, 32);
        let labels = parser.parse(&a).unwrap();
        let perc = perceptual_loss(&a, &b, &labels, &IdentityFeatures).unwrap();
        assert_eq!(perc, recon_loss(&a, &b).unwrap());
    }

    #[test]
    fn part_terms_average_over_present_parts() {
        let mut rng = Rng::seed_from_u64(3);
        let a = rand_img(&mut rng, 64);
        let b = rand_img(&mut rng, 64);
        let labels = stub_layout(64);
        let parts = crate::parsing::default_perceptual_parts();
        let pad = default_crop_pad(64);

        let meanabs = |x: &Array3<f64>, y: &Array3<f64>| -> f64 {
            x.iter()
                .zip(y.iter())
                .map(|(u, v)| (u - v).abs())
                .sum::<f64>()
                / x.len() as f64
        };
        let mut oracle = meanabs(&a, &b);
        let mut part_sum = 0.0;
        let mut n = 0;
        for group in &parts {
            let resolved = group.resolve().unwrap();
            if let Some(bx) = part_box(&labels, &resolved, pad) {
                let ca = a
                    .slice(ndarray::s![.., bx.y0..bx.y0 + bx.h, bx.x0..bx.x0 + bx.w])
                    .to_owned();
                let cb = b
                    .slice(ndarray::s![.., bx.y0..bx.y0 + bx.h, bx.x0..bx.x0 + bx.w])
                    .to_owned();
                part_sum += meanabs(&ca, &cb);
                n += 1;
            }
        }
        assert_eq!(n, 3, "stub layout must present eyes, nose, lips");
        oracle += part_sum / n as f64;

        let got = perceptual_loss(&a, &b, &labels, &IdentityFeatures).unwrap();
        assert!((got - oracle).abs() < 1e-12, "{got} vs {oracle}");
    }

    #[test]
    fn multi_tap_perceptual_is_finite_and_zero_on_identity() {
        let mut rng = Rng::seed_from_u64(4);
        let a = rand_img(&mut rng, 64);
        let labels = stub_layout(64);
        let net = FixedRandomFeatures::new(5);
        let same = perceptual_loss(&a, &a, &labels, &net).unwrap();
        assert_eq!(same, 0.0);
        let b = rand_img(&mut rng, 64);
        let diff = perceptual_loss(&a, &b, &labels, &net).unwrap();
        assert!(diff.is_finite() && diff > 0.0);
    }

    #[test]
    fn clip_loss_orthogonal_antipodal_identical() {
        let embed = ChannelMeanEmbed;
        let mut red = Array3::zeros((3, 16, 16));
        red.slice_mut(ndarray::s![0, .., ..]).fill(1.0);
        let mut green = Array3::zeros((3, 16, 16));
        green.slice_mut(ndarray::s![1, .., ..]).fill(1.0);
        assert_eq!(clip_loss(&red, &green, &embed).unwrap(), 1.0);

        let mut neg_red = Array3::zeros((3, 16, 16));
        neg_red.slice_mut(ndarray::s![0, .., ..]).fill(-1.0);
        assert_eq!(clip_loss(&red, &neg_red, &embed).unwrap(), 2.0);

        let same = clip_loss(&red, &red, &embed).unwrap();
        assert!(same.abs() < 1e-12);

        let zero = Array3::zeros((3, 16, 16));
        match clip_loss(&red, &zero, &embed) {
            Err(Error::Numeric(_)) => {}
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn const_half_disc_matches_hand_value() {
        let labels = stub_layout(64);
        let masks = discriminator_masks(
            &labels,
            &[crate::parsing::PartGroup::new("full", &[])],
        )
        .unwrap();
        let bank = DiscriminatorBank {
            names: vec!["full".into()],
            discs: vec![PatchDisc::Const(0.5)],
        };
        let mut rng = Rng::seed_from_u64(6);
        let photo = rand_img(&mut rng, 64);
        let gt = rand_img(&mut rng, 64);
        let pred = rand_img(&mut rng, 64);
        let (adv_g, adv_d) = adversarial_losses(&photo, &gt, &pred, &masks, &bank).unwrap();
        let half = 0.5f64.ln();
        assert_eq!(adv_d, half + half);
        assert_eq!(adv_g, -half);
    }

    #[test]
    fn five_region_const_bank_sums_per_region() {
        let labels = stub_layout(64);
        let masks = discriminator_masks(&labels, &default_regions()).unwrap();
        let probs = [0.5, 0.25, 0.75, 0.4, 0.9];
        let bank = DiscriminatorBank {
            names: masks.region_names.clone(),
            discs: probs.iter().map(|&p| PatchDisc::Const(p)).collect(),
        };
        let mut rng = Rng::seed_from_u64(7);
        let photo = rand_img(&mut rng, 64);
        let gt = rand_img(&mut rng, 64);
        let pred = rand_img(&mut rng, 64);
        let (adv_g, adv_d) = adversarial_losses(&photo, &gt, &pred, &masks, &bank).unwrap();
        let mut d_oracle = 0.0;
        let mut g_oracle = 0.0;
        for &p in &probs {
            d_oracle += p.ln() + (1.0 - p).ln();
            g_oracle += -p.ln();
        }
        assert_eq!(adv_d, d_oracle);
        assert_eq!(adv_g, g_oracle);
    }

    #[test]
    fn conv_bank_produces_finite_terms() {
        let labels = stub_layout(64);
        let masks = discriminator_masks(&labels, &default_regions()).unwrap();
        let bank = DiscriminatorBank::build(&masks.region_names, 8, 8);
        let mut rng = Rng::seed_from_u64(9);
        let photo = rand_img(&mut rng, 64);
        let gt = rand_img(&mut rng, 64);
        let pred = rand_img(&mut rng, 64);
        let (adv_g, adv_d) = adversarial_losses(&photo, &gt, &pred, &masks, &bank).unwrap();
        assert!(adv_g.is_finite());
        assert!(adv_d.is_finite());
    }

    #[test]
    fn zero_mask_zeroes_the_disc_inputs_bitwise() {
        let mut rng = Rng::seed_from_u64(10);
        let photo = rand_img(&mut rng, 32);
        let sketch = rand_img(&mut rng, 32);
        let mask = Array2::zeros((32, 32));
        let (pm, sm) = masked_disc_inputs(&photo, &sketch, &mask);
        assert!(pm.iter().all(|&v| v == 0.0));
        assert!(sm.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn p_zero_augmentation_is_identity_bitwise() {
        let mut rng = Rng::seed_from_u64(11);
        let photo = rand_img(&mut rng, 64);
        let gt = rand_img(&mut rng, 64);
        let pred = rand_img(&mut rng, 64);
        let (p2, g2, r2, t) = joint_augment(&photo, &gt, &pred, &mut rng, 0.0).unwrap();
        assert!(t.is_identity());
        assert_eq!(p2, photo);
        assert_eq!(g2, gt);
        assert_eq!(r2, pred);
    }

    #[test]
    fn flip_is_an_exact_involution() {
        let mut rng = Rng::seed_from_u64(12);
        let img = rand_img(&mut rng, 64);
        let t = AugTransform {
            flip: true,
            ..AugTransform::identity()
        };
        let once = t.apply_image(&img);
        assert_ne!(once, img);
        let twice = t.apply_image(&once);
        assert_eq!(twice, img);
    }

    #[test]
    fn recorded_transform_replays_identically_on_all_inputs() {
        let mut rng = Rng::seed_from_u64(13);
        for _ in 0..50 {
            let photo = rand_img(&mut rng, 32);
            let gt = rand_img(&mut rng, 32);
            let pred = rand_img(&mut rng, 32);
            let (p2, g2, r2, t) = joint_augment(&photo, &gt, &pred, &mut rng, 0.7).unwrap();
            assert_eq!(p2, t.apply_image(&photo));
            assert_eq!(g2, t.apply_image(&gt));
            assert_eq!(r2, t.apply_image(&pred));
        }
    }

    #[test]
    fn label_warp_matches_flip_and_translation_exactly() {
        let labels = stub_layout(32);
        let t = AugTransform {
            flip: true,
            ..AugTransform::identity()
        };
        let flipped = t.apply_labels(&labels);
        for y in 0..32 {
            for x in 0..32 {
                assert_eq!(flipped.labels[[y, x]], labels.labels[[y, 31 - x]]);
            }
        }
        let t = AugTransform {
            dx: 3,
            dy: -2,
            ..AugTransform::identity()
        };
        let shifted = t.apply_labels(&labels);
        // Content moves +3 in x, -2 in y; vacated pixels become background.
        assert_eq!(shifted.labels[[10, 20]], labels.labels[[12, 17]]);
        assert_eq!(shifted.labels[[31, 0]], Part::Background.code());
    }

    #[test]
    fn total_objective_matches_stage_literals_exactly() {
        let b = total_objective(1.0, 1.0, 1.0, 1.0, 1.0, &LossWeights::stage1_default()).unwrap();
        assert_eq!(b.total_g, 322.2);
        let b = total_objective(1.0, 1.0, 1.0, 1.0, 1.0, &LossWeights::stage2_default()).unwrap();
        assert_eq!(b.total_g, 122.2);
        assert_eq!(b.adv_d, 1.0);
    }

    #[test]
    fn non_finite_components_are_named() {
        let w = LossWeights::stage1_default();
        match total_objective(f64::NAN, 0.0, 0.0, 0.0, 0.0, &w) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("recon"), "{msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
        match total_objective(0.0, 0.0, f64::INFINITY, 0.0, 0.0, &w) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("clip"), "{msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn negative_weights_are_rejected() {
        let w = LossWeights::new(-1.0, 0.0, 0.0, 0.0);
        assert!(w.validate().is_err());
        assert!(total_objective(0.0, 0.0, 0.0, 0.0, 0.0, &w).is_err());
    }
}

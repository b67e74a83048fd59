//! The trainable sketch head. Tap pairs are channel-reduced, gated by a
//! spatial attention map derived from the previous fused level, merged with
//! the upsampled running state by a 3x3 convolution, and finally projected
//! to a 3-channel sketch. One traced implementation serves both training
//! and inference; eval entry points run it over a scratch tape.

use crate::error::{Error, Result};
use crate::image::Rgb01;
use crate::nn::{Tape, Var};
use crate::rng::Rng;
use crate::tap::{validate_schedule, FeaturePyramid, FeatureSchedule};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq)]
pub struct ConvParams {
    pub weight: ArrayD<f64>, // (out, in, kh, kw)
    pub bias: ArrayD<f64>,   // (out,)
}

impl ConvParams {
    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn random(rng: &mut Rng, out_ch: usize, in_ch: usize, k: usize) -> Self {
        let fan_in = (in_ch * k * k) as f64;
        let w: Vec<f64> = rng
            .normal_vec(out_ch * in_ch * k * k)
            .into_iter()
            .map(|v| v / fan_in.sqrt())
            .collect();
        ConvParams {
            weight: ArrayD::from_shape_vec(IxDyn(&[out_ch, in_ch, k, k]), w).unwrap(),
            bias: ArrayD::zeros(IxDyn(&[out_ch])),
        }
    }

    pub fn zeros(out_ch: usize, in_ch: usize, k: usize) -> Self {
        ConvParams {
            weight: ArrayD::zeros(IxDyn(&[out_ch, in_ch, k, k])),
            bias: ArrayD::zeros(IxDyn(&[out_ch])),
        }
    }
}

/// Which tapped features participate. Subsetting zeroes the reduced tensor
/// of an excluded feature; everything downstream is unchanged in shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FeatureSubset {
    #[default]
    All,
    /// The shallow half of the taps (first 9 of 18).
    FirstHalf,
    /// Everything except the final image-projection tap.
    DropLast,
    /// Excludes the ten taps centered in the stack.
    DropMiddleTen,
}

impl FeatureSubset {
    pub fn keeps(self, index: usize, len: usize) -> bool {
        match self {
            FeatureSubset::All => true,
            FeatureSubset::FirstHalf => index < len / 2,
            FeatureSubset::DropLast => index + 1 != len,
            FeatureSubset::DropMiddleTen => {
                let start = len.saturating_sub(10) / 2;
                let end = (start + 10).min(len);
                !(start..end).contains(&index)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub use_attention: bool,
    pub use_f_prev_in_pair: bool,
    pub feature_subset: FeatureSubset,
}

impl Default for AblationFlags {
    fn default() -> Self {
        AblationFlags {
            use_attention: true,
            use_f_prev_in_pair: true,
            feature_subset: FeatureSubset::All,
        }
    }
}

/// Test hook for the gate: swap the learned map for an exact constant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    Learned,
    ForceZero,
    ForceOne,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionLevelParams {
    /// 1x1 reduction of the later tap of the pair (f_i).
    pub reduce_a: ConvParams,
    /// 1x1 reduction of the earlier tap (f_{i-1}).
    pub reduce_b: ConvParams,
    /// 1x1 conv producing the single-channel attention logits from the
    /// upsampled previous fused level. None at level 0.
    pub attention_head: Option<ConvParams>,
    /// 3x3 merge convolution.
    pub merge: ConvParams,
    pub reduced_channels: usize,
    pub fused_channels: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SketchGeneratorParams {
    pub levels: Vec<FusionLevelParams>,
    pub output_head: ConvParams,
    pub ablation: AblationFlags,
    pub schedule: FeatureSchedule,
}

/// Single-channel gate in [0, 1] at one level's resolution.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub map: ArrayD<f64>, // (1, res, res)
}

pub struct TracedConv {
    pub w: Var,
    pub b: Var,
}

pub struct TracedLevel {
    pub reduce_a: TracedConv,
    pub reduce_b: TracedConv,
    pub attention: Option<TracedConv>,
    pub merge: TracedConv,
}

pub struct TracedSketchGen {
    pub levels: Vec<TracedLevel>,
    pub output_head: TracedConv,
}

impl SketchGeneratorParams {
    /// Deterministic builder. Reduced width is capped at 32, fused width
    /// halves from 256 down to a floor of 32 per level.
    pub fn build(schedule: &FeatureSchedule, flags: AblationFlags, seed: u64) -> Result<Self> {
        schedule.validate()?;
        let mut rng = Rng::seed_from_u64(seed).derive(0xf05e);
        let n_levels = schedule.levels();
        let mut levels = Vec::with_capacity(n_levels);
        let mut prev_fused = 0usize;
        for k in 0..n_levels {
            let ch_prev = schedule.entries[2 * k].1;
            let ch_i = schedule.entries[2 * k + 1].1;
            let rc = ch_i.min(ch_prev).min(32);
            let fused = ((256usize) >> k).max(32);
            let pair_ch = if flags.use_f_prev_in_pair { 2 * rc } else { rc };
            let merge_in = pair_ch + if k > 0 { prev_fused } else { 0 };
            levels.push(FusionLevelParams {
                reduce_a: ConvParams::random(&mut rng, rc, ch_i, 1),
                reduce_b: ConvParams::random(&mut rng, rc, ch_prev, 1),
                attention_head: if k > 0 {
                    Some(ConvParams::random(&mut rng, 1, prev_fused, 1))
                } else {
                    None
                },
                merge: ConvParams::random(&mut rng, fused, merge_in, 3),
                reduced_channels: rc,
                fused_channels: fused,
            });
            prev_fused = fused;
        }
        let output_head = ConvParams::random(&mut rng, 3, prev_fused, 3);
        Ok(SketchGeneratorParams {
            levels,
            output_head,
            ablation: flags,
            schedule: schedule.clone(),
        })
    }

    /// Parameter tensors in canonical order (checkpoint / optimizer order).
    pub fn tensors(&self) -> Vec<&ArrayD<f64>> {
        let mut out = Vec::new();
        for lv in &self.levels {
            out.push(&lv.reduce_a.weight);
            out.push(&lv.reduce_a.bias);
            out.push(&lv.reduce_b.weight);
            out.push(&lv.reduce_b.bias);
            if let Some(att) = &lv.attention_head {
                out.push(&att.weight);
                out.push(&att.bias);
            }
            out.push(&lv.merge.weight);
            out.push(&lv.merge.bias);
        }
        out.push(&self.output_head.weight);
        out.push(&self.output_head.bias);
        out
    }

    pub fn set_tensors(&mut self, tensors: &[ArrayD<f64>]) -> Result<()> {
        let mut slots: Vec<&mut ArrayD<f64>> = Vec::new();
        for lv in &mut self.levels {
            slots.push(&mut lv.reduce_a.weight);
            slots.push(&mut lv.reduce_a.bias);
            slots.push(&mut lv.reduce_b.weight);
            slots.push(&mut lv.reduce_b.bias);
            if let Some(att) = &mut lv.attention_head {
                slots.push(&mut att.weight);
                slots.push(&mut att.bias);
            }
            slots.push(&mut lv.merge.weight);
            slots.push(&mut lv.merge.bias);
        }
        slots.push(&mut self.output_head.weight);
        slots.push(&mut self.output_head.bias);
        if slots.len() != tensors.len() {
            return Err(Error::checkpoint(format!(
                "parameter count mismatch: params have {}, payload has {}",
                slots.len(),
                tensors.len()
            )));
        }
        for (slot, t) in slots.into_iter().zip(tensors) {
            if slot.shape() != t.shape() {
                return Err(Error::checkpoint(format!(
                    "parameter shape mismatch: {:?} vs {:?}",
                    slot.shape(),
                    t.shape()
                )));
            }
            *slot = t.clone();
        }
        Ok(())
    }

    pub fn trace(&self, tape: &mut Tape, as_leaves: bool) -> TracedSketchGen {
        let put = |tape: &mut Tape, a: &ArrayD<f64>| {
            if as_leaves {
                tape.leaf(a.clone())
            } else {
                tape.constant(a.clone())
            }
        };
        let levels = self
            .levels
            .iter()
            .map(|lv| TracedLevel {
                reduce_a: TracedConv {
                    w: put(tape, &lv.reduce_a.weight),
                    b: put(tape, &lv.reduce_a.bias),
                },
                reduce_b: TracedConv {
                    w: put(tape, &lv.reduce_b.weight),
                    b: put(tape, &lv.reduce_b.bias),
                },
                attention: lv.attention_head.as_ref().map(|att| TracedConv {
                    w: put(tape, &att.weight),
                    b: put(tape, &att.bias),
                }),
                merge: TracedConv {
                    w: put(tape, &lv.merge.weight),
                    b: put(tape, &lv.merge.bias),
                },
            })
            .collect();
        let output_head = TracedConv {
            w: put(tape, &self.output_head.weight),
            b: put(tape, &self.output_head.bias),
        };
        TracedSketchGen {
            levels,
            output_head,
        }
    }
}

impl TracedSketchGen {
    /// Vars in the same canonical order as `SketchGeneratorParams::tensors`.
    pub fn vars(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for lv in &self.levels {
            out.push(lv.reduce_a.w);
            out.push(lv.reduce_a.b);
            out.push(lv.reduce_b.w);
            out.push(lv.reduce_b.b);
            if let Some(att) = &lv.attention {
                out.push(att.w);
                out.push(att.b);
            }
            out.push(lv.merge.w);
            out.push(lv.merge.b);
        }
        out.push(self.output_head.w);
        out.push(self.output_head.b);
        out
    }
}

fn conv(tape: &mut Tape, x: Var, p: &TracedConv, pad: usize) -> Var {
    let c = tape.conv2d(x, p.w, 1, pad);
    tape.add_bias(c, p.b)
}

/// One fusion level over tape vars. `keep` flags implement feature
/// subsetting: an excluded tap's reduced tensor is zeroed after reduction.
pub fn level_forward(
    tape: &mut Tape,
    f_i: Var,
    f_prev: Var,
    fused_prev: Option<Var>,
    lv: &TracedLevel,
    flags: AblationFlags,
    gate: GateMode,
    keep_i: bool,
    keep_prev: bool,
) -> Var {
    let mut a = conv(tape, f_i, &lv.reduce_a, 0);
    if !keep_i {
        a = tape.scale(a, 0.0);
    }
    let x = if flags.use_f_prev_in_pair {
        let mut b = conv(tape, f_prev, &lv.reduce_b, 0);
        if !keep_prev {
            b = tape.scale(b, 0.0);
        }
        tape.concat(&[a, b], 0)
    } else {
        a
    };
    let merged_in = match fused_prev {
        None => x,
        Some(fp) => {
            let up = tape.upsample_bilinear_2x(fp);
            let effective = if flags.use_attention {
                gate
            } else {
                // Attention disabled: the gate is the exact all-ones map.
                GateMode::ForceOne
            };
            let gated = match effective {
                GateMode::ForceOne => x,
                GateMode::ForceZero => tape.scale(x, 0.0),
                GateMode::Learned => {
                    let att = lv.attention.as_ref().expect("attention head above level 0");
                    let logits = conv(tape, up, att, 0);
                    let m = tape.sigmoid(logits);
                    tape.mul_map(x, m)
                }
            };
            tape.concat(&[gated, up], 0)
        }
    };
    let merged = conv(tape, merged_in, &lv.merge, 1);
    tape.leaky_relu(merged, 0.2)
}

/// Full traced forward pass: features in schedule order to a [0, 1] sketch.
pub fn sketch_forward(
    tape: &mut Tape,
    features: &[Var],
    g: &TracedSketchGen,
    flags: AblationFlags,
    gate: GateMode,
) -> Var {
    assert_eq!(features.len(), g.levels.len() * 2, "feature/level mismatch");
    let n = features.len();
    let mut fused: Option<Var> = None;
    for (k, lv) in g.levels.iter().enumerate() {
        let f_prev = features[2 * k];
        let f_i = features[2 * k + 1];
        let keep_prev = flags.feature_subset.keeps(2 * k, n);
        let keep_i = flags.feature_subset.keeps(2 * k + 1, n);
        fused = Some(level_forward(
            tape, f_i, f_prev, fused, lv, flags, gate, keep_i, keep_prev,
        ));
    }
    let head = conv(tape, fused.expect("at least one level"), &g.output_head, 1);
    let t = tape.tanh(head);
    let t = tape.add_scalar(t, 1.0);
    tape.scale(t, 0.5)
}

fn check_chw(name: &str, shape: &[usize]) -> Result<(usize, usize)> {
    if shape.len() != 3 || shape[1] != shape[2] {
        return Err(Error::shape(format!(
            "{name} must be (channels, res, res), got {shape:?}"
        )));
    }
    Ok((shape[0], shape[1]))
}

/// Attention map from the already-upsampled previous fused level:
/// sigmoid of a 1x1 convolution. All-zero head parameters give the
/// uniform 0.5 map.
pub fn spatial_attention(
    fused_prev_up: &ArrayD<f64>,
    params: &FusionLevelParams,
) -> Result<AttentionMap> {
    let att = params
        .attention_head
        .as_ref()
        .ok_or_else(|| Error::config("this level has no attention head (level 0)"))?;
    let (ch, _res) = check_chw("fused_prev_up", fused_prev_up.shape())?;
    if ch != att.in_channels() {
        return Err(Error::shape(format!(
            "attention head expects {} input channels, got {ch}",
            att.in_channels()
        )));
    }
    let mut tape = Tape::new();
    let x = tape.constant(fused_prev_up.clone());
    let tc = TracedConv {
        w: tape.constant(att.weight.clone()),
        b: tape.constant(att.bias.clone()),
    };
    let logits = conv(&mut tape, x, &tc, 0);
    let m = tape.sigmoid(logits);
    Ok(AttentionMap {
        map: tape.value(m).clone(),
    })
}

/// One fusion step with an explicit gate override. `fused_prev` arrives at
/// half the pair's resolution and is upsampled inside.
pub fn fuse_step_gated(
    f_i: &ArrayD<f64>,
    f_prev: &ArrayD<f64>,
    fused_prev: Option<&ArrayD<f64>>,
    params: &FusionLevelParams,
    flags: AblationFlags,
    gate: GateMode,
) -> Result<ArrayD<f64>> {
    let (ci, res) = check_chw("f_i", f_i.shape())?;
    let (cp, res_p) = check_chw("f_prev", f_prev.shape())?;
    if res != res_p {
        return Err(Error::shape(format!(
            "pair resolutions differ: f_i {res}, f_prev {res_p}"
        )));
    }
    if ci != params.reduce_a.in_channels() {
        return Err(Error::shape(format!(
            "reduce_a expects {} channels, f_i has {ci}",
            params.reduce_a.in_channels()
        )));
    }
    if flags.use_f_prev_in_pair && cp != params.reduce_b.in_channels() {
        return Err(Error::shape(format!(
            "reduce_b expects {} channels, f_prev has {cp}",
            params.reduce_b.in_channels()
        )));
    }
    if let Some(fp) = fused_prev {
        let (_, fres) = check_chw("fused_prev", fp.shape())?;
        if fres * 2 != res {
            return Err(Error::shape(format!(
                "fused_prev must be at half resolution: got {fres} for a {res} level"
            )));
        }
    }
    let mut tape = Tape::new();
    let fi = tape.constant(f_i.clone());
    let fp = tape.constant(f_prev.clone());
    let fup = fused_prev.map(|f| tape.constant(f.clone()));
    let lv = TracedLevel {
        reduce_a: TracedConv {
            w: tape.constant(params.reduce_a.weight.clone()),
            b: tape.constant(params.reduce_a.bias.clone()),
        },
        reduce_b: TracedConv {
            w: tape.constant(params.reduce_b.weight.clone()),
            b: tape.constant(params.reduce_b.bias.clone()),
        },
        attention: params.attention_head.as_ref().map(|att| TracedConv {
            w: tape.constant(att.weight.clone()),
            b: tape.constant(att.bias.clone()),
        }),
        merge: TracedConv {
            w: tape.constant(params.merge.weight.clone()),
            b: tape.constant(params.merge.bias.clone()),
        },
    };
    if fup.is_some() && flags.use_attention && gate == GateMode::Learned && lv.attention.is_none() {
        return Err(Error::config(
            "attention requested but this level has no attention head",
        ));
    }
    let out = level_forward(&mut tape, fi, fp, fup, &lv, flags, gate, true, true);
    Ok(tape.value(out).clone())
}

/// One fusion step with the learned gate.
pub fn fuse_step(
    f_i: &ArrayD<f64>,
    f_prev: &ArrayD<f64>,
    fused_prev: Option<&ArrayD<f64>>,
    params: &FusionLevelParams,
    flags: AblationFlags,
) -> Result<ArrayD<f64>> {
    fuse_step_gated(f_i, f_prev, fused_prev, params, flags, GateMode::Learned)
}

/// Run the whole head over a captured pyramid.
pub fn generate_sketch(pyramid: &FeaturePyramid, params: &SketchGeneratorParams) -> Result<Rgb01> {
    if pyramid.schedule != params.schedule {
        return Err(Error::config(
            "pyramid schedule disagrees with the generator's schedule",
        ));
    }
    let report = validate_schedule(pyramid, &params.schedule);
    if !report.is_empty() {
        return Err(Error::config(format!(
            "pyramid does not conform to its schedule:\n{report}"
        )));
    }
    let mut tape = Tape::new();
    let feats: Vec<Var> = pyramid
        .features
        .iter()
        .map(|f| tape.constant(f.clone()))
        .collect();
    let g = params.trace(&mut tape, false);
    let out = sketch_forward(&mut tape, &feats, &g, params.ablation, GateMode::Learned);
    tape.value(out)
        .clone()
        .into_dimensionality::<ndarray::Ix3>()
        .map_err(|e| Error::shape(e.to_string()))
}

/// The learned gate of every level for one pyramid, in forward order.
/// Entries are None where no gate exists: always at level 0, and at every
/// level when attention is ablated away. Each map is recomputed from the
/// same upsampled carry the forward pass gates with.
pub fn collect_attention(
    pyramid: &FeaturePyramid,
    params: &SketchGeneratorParams,
) -> Result<Vec<Option<AttentionMap>>> {
    if pyramid.schedule != params.schedule {
        return Err(Error::config(
            "pyramid schedule disagrees with the generator's schedule",
        ));
    }
    let report = validate_schedule(pyramid, &params.schedule);
    if !report.is_empty() {
        return Err(Error::config(format!(
            "pyramid does not conform to its schedule:\n{report}"
        )));
    }
    let flags = params.ablation;
    let mut tape = Tape::new();
    let feats: Vec<Var> = pyramid
        .features
        .iter()
        .map(|f| tape.constant(f.clone()))
        .collect();
    let g = params.trace(&mut tape, false);
    let n = feats.len();
    let mut fused: Option<Var> = None;
    let mut maps = Vec::with_capacity(g.levels.len());
    for (k, lv) in g.levels.iter().enumerate() {
        match (fused, &lv.attention) {
            (Some(fp), Some(att)) if flags.use_attention => {
                let up = tape.upsample_bilinear_2x(fp);
                let logits = conv(&mut tape, up, att, 0);
                let m = tape.sigmoid(logits);
                maps.push(Some(AttentionMap {
                    map: tape.value(m).clone(),
                }));
            }
            _ => maps.push(None),
        }
        let keep_prev = flags.feature_subset.keeps(2 * k, n);
        let keep_i = flags.feature_subset.keeps(2 * k + 1, n);
        fused = Some(level_forward(
            &mut tape,
            feats[2 * k + 1],
            feats[2 * k],
            fused,
            lv,
            flags,
            GateMode::Learned,
            keep_i,
            keep_prev,
        ));
    }
    Ok(maps)
}

/// Build the head for a schedule: one level per tap pair.
pub fn build_generator(
    schedule: &FeatureSchedule,
    flags: AblationFlags,
    seed: u64,
) -> Result<SketchGeneratorParams> {
    SketchGeneratorParams::build(schedule, flags, seed)
}

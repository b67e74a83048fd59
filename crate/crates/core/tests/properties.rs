//! Randomized invariants. Each property encodes a law the rest of the
//! system leans on; shrinking keeps counterexamples small.

use ndarray::{Array2, ArrayD, IxDyn};
use proptest::prelude::*;
use sketchfuse::fusion::{fuse_step_gated, AblationFlags, FusionLevelParams, GateMode};
use sketchfuse::losses::{total_objective, AugTransform, LossWeights};
use sketchfuse::parsing::{domain_masks_fgbg, part_box, stub_layout, Part, PartLabelMap};
use sketchfuse::rng::Rng;
use sketchfuse::tap::{validate_schedule, FeaturePyramid, FeatureSchedule};
use sketchfuse::trainer::{stage_weights, TrainConfig};

fn pyramid_for(schedule: &FeatureSchedule) -> FeaturePyramid {
    FeaturePyramid {
        features: schedule
            .entries
            .iter()
            .map(|&(r, c)| ArrayD::zeros(IxDyn(&[c, r, r])))
            .collect(),
        schedule: schedule.clone(),
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    /// A conformant pyramid validates clean; any single-feature mutation of
    /// shape is caught at that index.
    #[test]
    fn schedule_validation_catches_any_single_mutation(
        idx in 0usize..10,
        grow_channels in proptest::bool::ANY,
    ) {
        let schedule = FeatureSchedule::toy_64();
        let mut pyramid = pyramid_for(&schedule);
        prop_assert!(validate_schedule(&pyramid, &schedule).violations.is_empty());

        let (r, c) = schedule.entries[idx];
        let new_shape = if grow_channels {
            [c + 1, r, r]
        } else {
            [c, r * 2, r * 2]
        };
        pyramid.features[idx] = ArrayD::zeros(IxDyn(&new_shape));
        let report = validate_schedule(&pyramid, &schedule);
        prop_assert!(!report.violations.is_empty());
        prop_assert!(
            report.violations.iter().any(|v| v.index == Some(idx)),
            "mutation at {idx} not attributed: {:?}",
            report.violations
        );
    }

    /// The curriculum is a step function: stage-1 weights strictly before
    /// the boundary, stage-2 from the boundary on, error past the end.
    #[test]
    fn stage_weights_is_a_step_function(
        total in 1usize..10_000,
        stage1_frac in 0.0f64..=1.0,
        probe_frac in 0.0f64..1.0,
    ) {
        let stage1 = ((total as f64) * stage1_frac) as usize;
        let cfg = TrainConfig {
            total_iters: total,
            stage1_iters: stage1,
            ..TrainConfig::default()
        };
        let i = ((total as f64) * probe_frac) as usize;
        let w = stage_weights(i, &cfg).unwrap();
        if i < stage1 {
            prop_assert_eq!(w, cfg.weights_stage1);
        } else {
            prop_assert_eq!(w, cfg.weights_stage2);
        }
        prop_assert!(stage_weights(total, &cfg).is_err());
    }

    /// The generator total is the frozen left-to-right accumulation.
    #[test]
    fn total_is_left_to_right_weighted_sum(
        r in -10.0f64..10.0, p in -10.0f64..10.0,
        c in -10.0f64..10.0, g in -10.0f64..10.0,
        wr in 0.0f64..300.0, wp in 0.0f64..10.0,
        wc in 0.0f64..200.0, wa in 0.0f64..5.0,
    ) {
        let weights = LossWeights::new(wr, wp, wc, wa);
        let b = total_objective(r, p, c, g, 0.0, &weights).unwrap();
        let expect = ((wr * r + wp * p) + wc * c) + wa * g;
        prop_assert_eq!(b.total_g, expect);
    }

    /// Non-finite components are rejected, naming the component.
    #[test]
    fn non_finite_components_are_named(which in 0usize..4) {
        let mut vals = [0.5f64; 5];
        vals[which] = f64::NAN;
        let err = total_objective(
            vals[0], vals[1], vals[2], vals[3], vals[4],
            &LossWeights::stage1_default(),
        )
        .unwrap_err();
        let name = ["recon", "perc", "clip", "adv_g"][which];
        prop_assert!(err.to_string().contains(name), "{err}");
    }

    /// Augmentation draws replay bit-for-bit from the same stream state,
    /// and the identity transform is exact on any image.
    #[test]
    fn augmentation_replay_and_identity(seed in 0u64..1_000_000, p in 0.0f64..=1.0) {
        let mut a = Rng::seed_from_u64(seed);
        let mut b = Rng::seed_from_u64(seed);
        let ta = AugTransform::draw(&mut a, p, 16);
        let tb = AugTransform::draw(&mut b, p, 16);
        prop_assert_eq!(ta, tb);

        let img = {
            let mut r = Rng::seed_from_u64(seed ^ 0x1111);
            ndarray::Array3::from_shape_fn((3, 16, 16), |_| r.uniform())
        };
        let warped_once = ta.apply_image(&img);
        let warped_again = ta.apply_image(&img);
        prop_assert_eq!(warped_once, warped_again);
        prop_assert_eq!(AugTransform::identity().apply_image(&img), img);
    }

    /// Foreground and background masks partition every pixel exactly, for
    /// any labeling over the palette.
    #[test]
    fn fg_bg_partition_is_exact(seed in 0u64..1_000_000, res in 2usize..24) {
        let mut r = Rng::seed_from_u64(seed);
        let labels = PartLabelMap::new(Array2::from_shape_fn((res, res), |_| {
            Part::ALL[r.below(Part::ALL.len())].code()
        }))
        .unwrap();
        let set = domain_masks_fgbg(&labels);
        let bg = set.get("background").unwrap();
        let fg = set.get("foreground").unwrap();
        for y in 0..res {
            for x in 0..res {
                prop_assert_eq!(bg[[y, x]] + fg[[y, x]], 1.0);
                prop_assert!(bg[[y, x]] == 0.0 || bg[[y, x]] == 1.0);
            }
        }
    }

    /// Part boxes stay inside the frame and always cover the part pixels.
    #[test]
    fn part_boxes_are_clipped_and_covering(pad in 0usize..12) {
        let labels = stub_layout(32);
        for part in [Part::LeftEye, Part::Nose, Part::Lips, Part::Hair] {
            if let Some(b) = part_box(&labels, &[part], pad) {
                prop_assert!(b.y0 + b.h <= 32 && b.x0 + b.w <= 32);
                for y in 0..32 {
                    for x in 0..32 {
                        if labels.labels[[y, x]] == part.code() {
                            prop_assert!(y >= b.y0 && y < b.y0 + b.h);
                            prop_assert!(x >= b.x0 && x < b.x0 + b.w);
                        }
                    }
                }
            }
        }
    }

    /// A forced-one gate and a disabled attention path agree bit-for-bit
    /// for any parameter seed and any level geometry from the toy family.
    #[test]
    fn forced_one_gate_equals_disabled_attention(seed in 0u64..100_000) {
        let schedule = FeatureSchedule::toy_64();
        let params = sketchfuse::fusion::build_generator(
            &schedule,
            AblationFlags::default(),
            seed,
        )
        .unwrap();
        let level: &FusionLevelParams = &params.levels[2];
        let (r, c) = (schedule.entries[4].0, schedule.entries[4].1);
        let mut rng = Rng::seed_from_u64(seed ^ 0xabcd);
        let f_i = ArrayD::from_shape_fn(IxDyn(&[c, r, r]), |_| rng.normal());
        let f_prev = ArrayD::from_shape_fn(IxDyn(&[c, r, r]), |_| rng.normal());
        let prev = ArrayD::from_shape_fn(
            IxDyn(&[params.levels[1].fused_channels, r / 2, r / 2]),
            |_| rng.normal(),
        );
        let forced = fuse_step_gated(
            &f_i, &f_prev, Some(&prev), level,
            AblationFlags::default(), GateMode::ForceOne,
        )
        .unwrap();
        let disabled = fuse_step_gated(
            &f_i, &f_prev, Some(&prev), level,
            AblationFlags { use_attention: false, ..AblationFlags::default() },
            GateMode::Learned,
        )
        .unwrap();
        prop_assert_eq!(forced, disabled);
    }

    /// Train configs round-trip through TOML unchanged.
    #[test]
    fn train_config_roundtrips_toml(
        total in 1usize..100_000,
        stage_frac in 0.0f64..=1.0,
        lr in 1e-6f64..1.0,
        batch in 1usize..16,
        every in 1usize..5_000,
        seed in proptest::num::u64::ANY,
    ) {
        let cfg = TrainConfig {
            total_iters: total,
            stage1_iters: ((total as f64) * stage_frac) as usize,
            lr,
            batch_size: batch,
            checkpoint_every: every,
            seed,
            ..TrainConfig::default()
        };
        cfg.validate().unwrap();
        let text = toml::to_string(&cfg).unwrap();
        let back: TrainConfig = toml::from_str(&text).unwrap();
        prop_assert_eq!(back, cfg);
    }
}

//! The demo core must behave before it ever reaches a browser: canvases
//! get RGBA buffers of the right size, training steps move the head, edits
//! respect the zero-strength identity, gates exist exactly where levels
//! carry state.

use sketchfuse_demo::DemoCore;

#[test]
fn renders_are_canvas_ready_rgba() {
    let demo = DemoCore::new(7, 2).unwrap();
    let res = demo.resolution();
    assert_eq!(res, 64);
    assert_eq!(demo.n_pairs(), 2);
    for idx in 0..2 {
        for buf in [
            demo.photo_rgba(idx).unwrap(),
            demo.target_rgba(idx).unwrap(),
            demo.prediction_rgba(idx).unwrap(),
        ] {
            assert_eq!(buf.len(), res * res * 4);
            assert!(buf.chunks(4).all(|px| px[3] == 255));
        }
    }
    assert!(demo.photo_rgba(2).is_err());
}

#[test]
fn steps_advance_the_head_and_pull_the_loss_down() {
    let mut demo = DemoCore::new(7, 2).unwrap();
    let before = demo.prediction_rgba(0).unwrap();

    let mut recon = Vec::new();
    for i in 0..60 {
        let rec = demo.step().unwrap();
        assert_eq!(rec.iteration, i);
        assert_eq!(rec.stage, 1);
        assert!(rec.total_g.is_finite());
        recon.push(rec.recon);
    }
    assert_eq!(demo.iteration(), 60);
    assert_ne!(
        before,
        demo.prediction_rgba(0).unwrap(),
        "training must change the rendered prediction"
    );

    let head: f64 = recon[..15].iter().sum::<f64>() / 15.0;
    let tail: f64 = recon[45..].iter().sum::<f64>() / 15.0;
    assert!(
        tail < head,
        "reconstruction should trend down: first-15 mean {head}, last-15 mean {tail}"
    );
}

#[test]
fn zero_strength_edit_is_the_identity() {
    let demo = DemoCore::new(9, 1).unwrap();
    let layers = demo.n_layers();
    let base = demo.photo_rgba(0).unwrap();
    let same = demo.edit_photo_rgba(0, 0, 0.0, 0, layers).unwrap();
    assert_eq!(base, same);

    let moved = demo.edit_photo_rgba(0, 0, 2.5, 0, layers).unwrap();
    assert_ne!(base, moved, "a real edit must move the photo");

    assert!(demo.edit_photo_rgba(0, demo.style_dim(), 1.0, 0, layers).is_err());
}

#[test]
fn gates_exist_above_level_zero_only() {
    let demo = DemoCore::new(11, 1).unwrap();
    assert!(demo.attention_rgba(0, 0).is_err());
    for level in 1..demo.n_levels() {
        let res = demo.attention_resolution(level).unwrap();
        let buf = demo.attention_rgba(0, level).unwrap();
        assert_eq!(buf.len(), res * res * 4);
        // Grayscale: the three channels agree.
        assert!(buf.chunks(4).all(|px| px[0] == px[1] && px[1] == px[2]));
    }
    assert!(demo.attention_rgba(0, demo.n_levels()).is_err());
}

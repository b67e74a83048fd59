use sketchfuse::tap::{build_toy_generator, FeatureSchedule, hijack_features};
use sketchfuse::trainer::*;
use sketchfuse::adapters::{FixedRandomFeatures, ChannelMeanEmbed};
use sketchfuse::parsing::{StubParser, StubMode};
use sketchfuse::apps::toy_sketch_filter;
use sketchfuse::rng::Rng;
use std::sync::Arc;
use std::time::Instant;

fn main() {
    let schedule = FeatureSchedule::toy_64();
    let handle = build_toy_generator(&schedule, 5).unwrap();
    let mut rng = Rng::seed_from_u64(1);
    let pairs: Vec<TrainPair> = (0..4).map(|_| {
        let latent = handle.sample_latent(&mut rng);
        let (photo, _) = hijack_features(&latent, &handle).unwrap();
        let sketch = toy_sketch_filter(&photo);
        TrainPair { photo, sketch, latent }
    }).collect();
    let adapters = TrainAdapters {
        perceptual: Arc::new(FixedRandomFeatures::new(7)),
        embedding: Arc::new(ChannelMeanEmbed),
        parser: Arc::new(StubParser { mode: StubMode::Layout }),
    };
    let cfg = TrainConfig {
        total_iters: 10, stage1_iters: 10, batch_size: 1,
        checkpoint_every: 10, seed: 3, ..TrainConfig::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let t0 = Instant::now();
    let run = train(&cfg, &pairs, &handle, &adapters, &TrainSetup::default(), dir.path(), None).unwrap();
    let dt = t0.elapsed();
    println!("10 iters batch=1 at 64: {:.2?} total, {:.0} ms/iter, last recon {:.4}",
        dt, dt.as_millis() as f64 / 10.0, run.log.last().unwrap().recon);
}

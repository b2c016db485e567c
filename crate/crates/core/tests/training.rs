//! Synthetic data accounting and end-to-end training behaviour.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unetrpp_core::data::synth_dataset;
use unetrpp_core::model::{ModelConfig, SegModel};
use unetrpp_core::optim::TrainConfig;
use unetrpp_core::train::{fit, predict};

#[test]
fn label_histogram_matches_blobs() {
    let extents = [16, 14, 12];
    for sample in synth_dataset(6, extents, 4, 9).unwrap() {
        let hist = sample.label.histogram(4);
        assert_eq!(hist.iter().sum::<usize>(), extents.iter().product::<usize>());
        for blob in &sample.blobs {
            let mut inside = 0;
            for i in 0..extents[0] {
                for j in 0..extents[1] {
                    for k in 0..extents[2] {
                        inside += usize::from(blob.contains([i, j, k]));
                    }
                }
            }
            assert_eq!(hist[blob.class as usize], inside, "class {}", blob.class);
            assert!(inside >= 27);
        }
    }
}

fn tiny() -> ModelConfig {
    ModelConfig {
        input_extents: [16, 16, 16],
        num_classes: 3,
        patch: [2, 2, 2],
        stage_channels: [4, 8, 16, 32],
        blocks_per_stage: 1,
        heads: 2,
        proj_dim: 8,
        stem_channels: 4,
        ..ModelConfig::default()
    }
}

#[test]
fn training_is_deterministic_and_lowers_loss() {
    let data = synth_dataset(2, [16, 16, 16], 3, 1).unwrap();
    let cfg = TrainConfig { epochs: 6, batch_size: 2, seed: 4, ..TrainConfig::default() };
    let run = || {
        let mut model = SegModel::<f32>::new(tiny(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let log = fit(&mut model, &data, &cfg).unwrap();
        (log, model)
    };
    let (a, model) = run();
    let (b, _) = run();
    assert_eq!(a.records, b.records);
    assert_eq!(a.records.len(), 6);
    assert!(a.records[5].loss < a.records[0].loss);
    let pred = predict(&model, &data[0].image).unwrap();
    assert_eq!(pred.extents, [16, 16, 16]);
}

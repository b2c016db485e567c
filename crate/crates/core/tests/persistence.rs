//! Checkpoint and volume-file round trips.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unetrpp_core::io::{Checkpoint, Volume, VolumeData};
use unetrpp_core::metrics::LabelMap;
use unetrpp_core::model::{ModelConfig, SegModel};
use unetrpp_core::nn::Module;
use unetrpp_core::Error;

fn random_config(rng: &mut ChaCha8Rng) -> ModelConfig {
    let patch: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=2));
    let c0 = 2 * rng.random_range(1..=3);
    ModelConfig {
        input_extents: std::array::from_fn(|a| patch[a] * 8),
        in_channels: rng.random_range(1..=2),
        num_classes: rng.random_range(2..=4),
        patch,
        stage_channels: [c0, 2 * c0, 4 * c0, 8 * c0],
        blocks_per_stage: rng.random_range(1..=2),
        heads: 2,
        proj_dim: rng.random_range(1..=8),
        stem_channels: rng.random_range(1..=4),
    }
}

/// Arbitrary finite f32 bit patterns, including subnormals and -0.
fn random_f32(rng: &mut ChaCha8Rng) -> f32 {
    loop {
        let x = f32::from_bits(rng.random());
        if x.is_finite() {
            return x;
        }
    }
}

fn bits(m: &SegModel<f32>) -> Vec<(String, Vec<u32>)> {
    m.params().iter().map(|p| (p.name.clone(), p.tensor.data().iter().map(|x| x.to_bits()).collect())).collect()
}

#[test]
fn checkpoint_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for i in 0..20 {
        let cfg = random_config(&mut rng);
        let mut model = SegModel::<f32>::new(cfg, &mut rng).unwrap();
        model.visit_params_mut(&mut |p| {
            let data = (0..p.numel()).map(|_| random_f32(&mut rng)).collect();
            p.set_data(data).unwrap();
        });
        let path = dir.path().join(format!("m{i}.ckpt"));
        Checkpoint::from_model(&model).save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap().to_model().unwrap();
        assert_eq!(back.config, model.config);
        assert_eq!(bits(&back), bits(&model), "model {i}");
    }
}

#[test]
fn checkpoint_corruption_and_mismatch() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let model = SegModel::<f32>::new(ModelConfig::minimal(), &mut rng).unwrap();
    let bytes = Checkpoint::from_model(&model).encode();
    let mut bad = bytes.clone();
    let last_payload = bad.len() - 5;
    bad[last_payload] ^= 1;
    assert!(matches!(Checkpoint::decode(&bad), Err(Error::Checksum { .. })));

    let other = SegModel::<f32>::new(ModelConfig::toy(), &mut rng).unwrap();
    let mut target = other.clone();
    assert!(Checkpoint::decode(&bytes).unwrap().apply(&mut target).is_err());
}

#[test]
fn volume_round_trip_is_bit_exact() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    for i in 0..20 {
        let extents: [usize; 3] = std::array::from_fn(|_| rng.random_range(1..=9));
        let channels = rng.random_range(1..=3);
        let n = channels * extents.iter().product::<usize>();
        let data = if i % 2 == 0 {
            VolumeData::F32((0..n).map(|_| random_f32(&mut rng)).collect())
        } else {
            VolumeData::I32((0..n).map(|_| rng.random()).collect())
        };
        let vol = Volume::new(extents, channels, data).unwrap();
        let path = dir.path().join(format!("v{i}.hdr"));
        vol.save(&path).unwrap();
        let back = Volume::load(&path).unwrap();
        assert_eq!((back.extents, back.channels), (vol.extents, vol.channels));
        match (&back.data, &vol.data) {
            (VolumeData::F32(a), VolumeData::F32(b)) => {
                assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()))
            }
            (VolumeData::I32(a), VolumeData::I32(b)) => assert_eq!(a, b),
            _ => panic!("value type changed"),
        }
    }
}

#[test]
fn label_volume_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let labels = LabelMap::new([3, 2, 2], (0..12).map(|i| i % 3).collect()).unwrap();
    let path = dir.path().join("truth.hdr");
    Volume::from_labels(&labels).unwrap().save(&path).unwrap();
    assert_eq!(Volume::load(&path).unwrap().to_labels().unwrap(), labels);
    std::fs::write(dir.path().join("truth.raw"), [0u8; 7]).unwrap();
    assert!(Volume::load(&path).is_err());
}

//! Shape pipeline, skip connections, decoder gradients and the complexity
//! ledger of the segmentation model.

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unetrpp_core::model::{complexity_ledger, count_flops, ModelConfig, SegModel, NUM_STAGES};
use unetrpp_core::nn::Module;
use unetrpp_tensor::{grad_check, no_grad, GradCheckOptions, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn synapse_stage_tokens() {
    let cfg = ModelConfig::synapse();
    let tokens: Vec<usize> = (0..NUM_STAGES).map(|s| cfg.stage_tokens(s)).collect();
    assert_eq!(tokens, [32768, 4096, 512, 64]);
    assert_eq!(cfg.stage_grid(0), [32, 32, 32]);
    assert_eq!(cfg.stage_grid(3), [4, 4, 4]);
}

#[test]
fn encoder_and_decoder_shapes() {
    let cfg = ModelConfig::minimal();
    let model = SegModel::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
    let [h, w, d] = cfg.input_extents;
    let x = Tensor::<f32>::ones(&[1, h, w, d]);
    let _g = no_grad();
    let enc = model.encoder_forward(&x).unwrap();
    for (s, e) in enc.iter().enumerate() {
        let [gh, gw, gd] = cfg.stage_grid(s);
        assert_eq!(e.shape(), [cfg.stage_channels[s], gh, gw, gd]);
    }
    assert_eq!(model.decoder_forward(&enc).unwrap().shape(), [cfg.stem_channels, h, w, d]);
    assert_eq!(model.forward(&x).unwrap().shape(), [cfg.num_classes, h, w, d]);
    assert!(model.forward(&Tensor::<f32>::ones(&[1, h, w, d / 2])).is_err());
    assert!(model.decoder_forward(&enc[..3]).is_err());
}

#[test]
fn every_skip_reaches_the_output() {
    let cfg = ModelConfig::minimal();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let model = SegModel::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let [h, w, d] = cfg.input_extents;
    let _g = no_grad();
    let enc = model.encoder_forward(&rand_tensor(&mut rng, &[1, h, w, d])).unwrap();
    let base = model.decoder_forward(&enc).unwrap();
    for s in 0..NUM_STAGES {
        let mut poked = enc.clone();
        poked[s] = poked[s].add_scalar(0.5);
        let out = model.decoder_forward(&poked).unwrap();
        let diff: f64 = out.data().iter().zip(base.data()).map(|(a, b)| (a - b).abs()).sum();
        assert!(diff > 1e-6, "stage {s} skip has no effect");
    }
}

#[test]
fn decoder_gradients_match_finite_differences() {
    let cfg = ModelConfig::minimal();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let model = SegModel::<f64>::new(cfg.clone(), &mut rng).unwrap();
    let [h, w, d] = cfg.input_extents;
    let enc: Vec<Tensor<f64>> = {
        let _g = no_grad();
        model.encoder_forward(&rand_tensor(&mut rng, &[1, h, w, d])).unwrap()
    };
    let r = rand_tensor(&mut rng, &[cfg.stem_channels, h, w, d]);
    let f = |t: &[Tensor<f64>]| {
        let out = model
            .decoder_forward(t)
            .map_err(|e| unetrpp_tensor::TensorError::Unsupported { op: "decoder", detail: e.to_string() })?;
        Ok(out.mul(&r)?.sum())
    };
    let opts = GradCheckOptions::new(1e-4).joint_directional(8, 2).with_step(1e-7);
    let rep = grad_check("decoder", f, &enc, &opts).unwrap();
    assert!(rep.passed, "{rep:?}");
}

#[test]
fn minimal_ledger_matches_hand_count() {
    // Worked out per module from layer shapes: conv/deconv weights and
    // biases, EPA blocks with one shared qk layer, 2 FLOPs per multiply-add.
    let ledger = complexity_ledger(&ModelConfig::minimal()).unwrap();
    assert_eq!(ledger.total_params(), 79_864);
    assert_eq!(ledger.total_flops(), 6_342_912);
}

#[test]
fn ledger_rows_match_parameter_enumeration() {
    for cfg in [ModelConfig::minimal(), ModelConfig::toy()] {
        let model = SegModel::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let ledger = complexity_ledger(&cfg).unwrap();
        assert_eq!(ledger.total_params() as usize, model.count_params());
        assert_eq!(ledger.rows.iter().map(|r| r.flops).sum::<u64>(), ledger.total_flops());
        for row in &ledger.rows {
            let prefix = match row.module.strip_suffix("blocks") {
                Some(stage) => format!("{stage}block"),
                None => format!("{}.", row.module),
            };
            let counted: usize =
                model.named_params().iter().filter(|(n, _)| n.starts_with(&prefix)).map(|(_, p)| p.numel()).sum();
            assert_eq!(counted as u64, row.params, "{}", row.module);
        }
    }
}

#[test]
fn flops_scale_linearly_with_volume() {
    let cfg = ModelConfig::synapse();
    let base = count_flops(&cfg, cfg.input_extents).unwrap();
    let [h, w, d] = cfg.input_extents;
    assert_eq!(count_flops(&cfg, [2 * h, 2 * w, 2 * d]).unwrap(), 8 * base);
}

#[test]
fn qk_layers_are_shared_everywhere() {
    let model = SegModel::<f32>::new(ModelConfig::minimal(), &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    assert!(model.named_params().iter().all(|(n, _)| !n.contains("qk_channel")));
    assert!(model.params().iter().all(|p| p.trainable));
}

fn small_config() -> impl Strategy<Value = ModelConfig> {
    (prop::array::uniform3(1usize..=2), prop::array::uniform3(1usize..=2), 1usize..=2, 2usize..=3, 1usize..=2).prop_map(
        |(patch, mult, c0, classes, heads)| ModelConfig {
            input_extents: std::array::from_fn(|a| patch[a] * 8 * mult[a]),
            in_channels: 1,
            num_classes: classes,
            patch,
            stage_channels: [2 * c0, 4 * c0, 8 * c0, 16 * c0],
            blocks_per_stage: 1,
            heads,
            proj_dim: 4,
            stem_channels: 2,
        },
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn logits_restore_input_extents(cfg in small_config()) {
        let model = SegModel::<f32>::new(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let [h, w, d] = cfg.input_extents;
        let _g = no_grad();
        let y = model.forward(&Tensor::<f32>::ones(&[1, h, w, d])).unwrap();
        prop_assert_eq!(y.shape(), &[cfg.num_classes, h, w, d][..]);
        prop_assert_eq!(complexity_ledger(&cfg).unwrap().total_params() as usize, model.count_params());
    }
}

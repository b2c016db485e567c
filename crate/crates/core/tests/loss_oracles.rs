//! Dice + cross-entropy loss against a scalar reimplementation, and its
//! gradient against finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unetrpp_core::loss::{dice_ce_loss, DICE_EPS};
use unetrpp_core::metrics::LabelMap;
use unetrpp_tensor::{grad_check, GradCheckOptions, Tensor, TensorError};

fn scalar_loss(logits: &[f64], labels: &[u32], classes: usize) -> f64 {
    let v = labels.len();
    let mut probs = vec![0.0; classes * v];
    let mut ce = 0.0;
    for j in 0..v {
        let m = (0..classes).map(|i| logits[i * v + j]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..classes).map(|i| (logits[i * v + j] - m).exp()).sum();
        for i in 0..classes {
            probs[i * v + j] = (logits[i * v + j] - m).exp() / z;
        }
        ce -= logits[labels[j] as usize * v + j] - m - z.ln();
    }
    let mut dice = 0.0;
    for i in 0..classes {
        let (mut inter, mut yy, mut pp) = (0.0, 0.0, 0.0);
        for j in 0..v {
            let y = if labels[j] as usize == i { 1.0 } else { 0.0 };
            let p = probs[i * v + j];
            inter += y * p;
            yy += y * y;
            pp += p * p;
        }
        dice += (2.0 * inter + DICE_EPS) / (yy + pp + DICE_EPS);
    }
    1.0 - dice / classes as f64 + ce / v as f64
}

fn case(rng: &mut ChaCha8Rng) -> (Tensor<f64>, LabelMap) {
    let extents = [rng.random_range(1..=4), rng.random_range(1..=4), rng.random_range(1..=3)];
    let classes = rng.random_range(2..=4);
    let v: usize = extents.iter().product();
    let labels = LabelMap::new(extents, (0..v).map(|_| rng.random_range(0..classes as u32)).collect()).unwrap();
    let [h, w, d] = extents;
    let logits = Tensor::from_fn(&[classes, h, w, d], |_| rng.random_range(-3.0..3.0));
    (logits, labels)
}

#[test]
fn matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..30 {
        let (logits, labels) = case(&mut rng);
        let got = dice_ce_loss(&logits, &labels).unwrap().item().unwrap();
        let want = scalar_loss(logits.data(), &labels.data, logits.shape()[0]);
        assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "{got} vs {want}");
    }
}

#[test]
fn gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for seed in 0..10 {
        let (logits, labels) = case(&mut rng);
        let f = |t: &[Tensor<f64>]| {
            dice_ce_loss(&t[0], &labels).map_err(|e| TensorError::Unsupported { op: "loss", detail: e.to_string() })
        };
        let rep = grad_check("dice_ce", f, &[logits], &GradCheckOptions::new(1e-4)).unwrap();
        assert!(rep.passed, "seed {seed}: {rep:?}");
    }
}

#[test]
fn rejects_mismatched_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let (logits, _) = case(&mut rng);
    let wrong = LabelMap::new([5, 5, 5], vec![0; 125]).unwrap();
    assert!(dice_ce_loss(&logits, &wrong).is_err());
}

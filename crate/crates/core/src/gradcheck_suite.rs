//! Finite-difference checks of every differentiable op, every layer type,
//! the EPA block at each stage shape of the minimal model, and the minimal
//! model end to end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use unetrpp_tensor::{grad_check, ConvGeometry, GradCheckOptions, Tensor, DIFFERENTIABLE_OPS};

use crate::epa::{EpaBlock, QkSharing};
use crate::error::Result;
use crate::loss::dice_ce_loss;
use crate::metrics::LabelMap;
use crate::model::{ModelConfig, SegModel, NUM_STAGES};
use crate::nn::{Conv3d, ConvBlock, Deconv3d, LayerNorm, LayerSpec, Linear, Module};

pub const OP_TOLERANCE: f64 = 1e-6;
pub const LAYER_TOLERANCE: f64 = 1e-5;
pub const BLOCK_TOLERANCE: f64 = 1e-4;
pub const MODEL_TOLERANCE: f64 = 1e-3;
/// Random directions probed per seed in the block and model checks.
pub const DIRECTIONS: usize = 16;
/// Step for directional probes. Small enough that a probe rarely straddles
/// a leaky-ReLU kink across the thousands of activations in a model.
pub const DIRECTIONAL_STEP: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum CheckKind {
    Op,
    Layer,
    Block,
    Model,
}

impl CheckKind {
    pub fn name(self) -> &'static str {
        match self {
            CheckKind::Op => "op",
            CheckKind::Layer => "layer",
            CheckKind::Block => "block",
            CheckKind::Model => "model",
        }
    }
}

/// Worst case over all seeds of one check.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteRow {
    pub kind: CheckKind,
    pub name: String,
    pub tolerance: f64,
    pub seeds: usize,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub passed: bool,
}

type Scalar = Box<dyn Fn(&[Tensor<f64>]) -> unetrpp_tensor::Result<Tensor<f64>>>;
type Builder = fn(&mut ChaCha8Rng) -> Result<(Vec<Tensor<f64>>, Scalar)>;

fn randn(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values with magnitude in `[0.3, 1.3]`, away from kinks and poles.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.3..1.3);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Random projection turning any output into a scalar.
fn project(out: Tensor<f64>, r: &Tensor<f64>) -> unetrpp_tensor::Result<Tensor<f64>> {
    Ok(out.mul(r)?.sum())
}

macro_rules! unary {
    ($rng:ident, $shape:expr, $out:expr, |$t:ident| $body:expr) => {{
        let r = randn($rng, &$out);
        let x = randn($rng, &$shape);
        Ok((vec![x], Box::new(move |$t: &[Tensor<f64>]| project($body, &r))))
    }};
}

fn op_cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("add", |rng| {
            let r = randn(rng, &[3, 4]);
            Ok((vec![randn(rng, &[3, 4]), randn(rng, &[3, 4])], Box::new(move |t| project(t[0].add(&t[1])?, &r))))
        }),
        ("sub", |rng| {
            let r = randn(rng, &[5]);
            Ok((vec![randn(rng, &[5]), randn(rng, &[5])], Box::new(move |t| project(t[0].sub(&t[1])?, &r))))
        }),
        ("mul", |rng| {
            let r = randn(rng, &[2, 3]);
            Ok((vec![randn(rng, &[2, 3]), randn(rng, &[2, 3])], Box::new(move |t| project(t[0].mul(&t[1])?, &r))))
        }),
        ("div", |rng| {
            let r = randn(rng, &[6]);
            Ok((vec![randn(rng, &[6]), away_from_zero(rng, &[6])], Box::new(move |t| project(t[0].div(&t[1])?, &r))))
        }),
        ("scale", |rng| unary!(rng, [4, 2], [4, 2], |t| t[0].scale(-1.7))),
        ("add_scalar", |rng| unary!(rng, [5], [5], |t| t[0].add_scalar(0.3))),
        ("leaky_relu", |rng| {
            let r = randn(rng, &[8]);
            Ok((vec![away_from_zero(rng, &[8])], Box::new(move |t| project(t[0].leaky_relu(0.01), &r))))
        }),
        ("log", |rng| {
            let r = randn(rng, &[6]);
            let x = Tensor::from_fn(&[6], |_| rng.random_range(0.2..2.0));
            Ok((vec![x], Box::new(move |t| project(t[0].log()?, &r))))
        }),
        ("exp", |rng| unary!(rng, [7], [7], |t| t[0].exp())),
        ("matmul", |rng| {
            let r = randn(rng, &[2, 3, 4]);
            let (a, b) = (randn(rng, &[2, 3, 5]), randn(rng, &[1, 5, 4]));
            Ok((vec![a, b], Box::new(move |t| project(t[0].matmul(&t[1])?, &r))))
        }),
        ("softmax", |rng| unary!(rng, [3, 5], [3, 5], |t| t[0].softmax(1)?)),
        ("log_softmax", |rng| unary!(rng, [4, 3], [4, 3], |t| t[0].log_softmax(0)?)),
        ("sum", |rng| unary!(rng, [3, 4], [4], |t| t[0].sum_axis(0, false)?)),
        ("mean", |rng| unary!(rng, [3, 4], [3, 1], |t| t[0].mean_axis(1, true)?)),
        ("max", |rng| unary!(rng, [3, 4], [3], |t| t[0].max_axis(1, false)?)),
        ("reshape", |rng| unary!(rng, [2, 6], [3, 4], |t| t[0].reshape(&[3, 4])?)),
        ("permute", |rng| unary!(rng, [2, 3, 4], [4, 2, 3], |t| t[0].permute(&[2, 0, 1])?)),
        ("narrow", |rng| unary!(rng, [4, 5], [4, 2], |t| t[0].narrow(1, 2, 2)?)),
        ("concat", |rng| {
            let r = randn(rng, &[5, 3]);
            Ok((
                vec![randn(rng, &[2, 3]), randn(rng, &[3, 3])],
                Box::new(move |t| project(Tensor::concat(&[t[0].clone(), t[1].clone()], 0)?, &r)),
            ))
        }),
        ("add_bias", |rng| {
            let r = randn(rng, &[3, 2, 2]);
            Ok((
                vec![randn(rng, &[3, 2, 2]), randn(rng, &[3])],
                Box::new(move |t| project(t[0].add_bias(&t[1], 0)?, &r)),
            ))
        }),
        ("layernorm", |rng| {
            let r = randn(rng, &[4, 5]);
            Ok((
                vec![randn(rng, &[4, 5]), randn(rng, &[5]), randn(rng, &[5])],
                Box::new(move |t| project(t[0].layernorm(&t[1], &t[2], 1e-5)?, &r)),
            ))
        }),
        ("conv3d", |rng| {
            let r = randn(rng, &[2, 3, 2, 3]);
            Ok((
                vec![randn(rng, &[2, 5, 3, 5]), randn(rng, &[2, 2, 3, 2, 3]), randn(rng, &[2])],
                Box::new(move |t| {
                    project(t[0].conv3d(&t[1], Some(&t[2]), ConvGeometry::new([2, 1, 1], [1, 0, 0]))?, &r)
                }),
            ))
        }),
        ("deconv3d", |rng| {
            let r = randn(rng, &[3, 4, 2, 4]);
            Ok((
                vec![randn(rng, &[2, 2, 2, 2]), randn(rng, &[2, 3, 2, 1, 2]), randn(rng, &[3])],
                Box::new(move |t| project(t[0].deconv3d(&t[1], Some(&t[2]), [2, 1, 2], [2, 1, 2])?, &r)),
            ))
        }),
    ]
}

/// Inputs `[x, params...]` and a scalar function rebuilding `module` from
/// them, so every parameter and the input are probed.
fn module_case<M>(
    module: M,
    x: Tensor<f64>,
    r: Tensor<f64>,
    forward: fn(&M, &Tensor<f64>) -> Result<Tensor<f64>>,
) -> (Vec<Tensor<f64>>, Scalar)
where
    M: Module<f64> + Clone + 'static,
{
    let mut inputs = vec![x];
    module.visit_params(&mut |p| inputs.push(p.tensor.clone()));
    let f = move |t: &[Tensor<f64>]| {
        let mut m = module.clone();
        let mut i = 1;
        m.visit_params_mut(&mut |p| {
            p.tensor = t[i].clone();
            i += 1;
        });
        let out = forward(&m, &t[0])
            .map_err(|e| unetrpp_tensor::TensorError::Unsupported { op: "module", detail: e.to_string() })?;
        project(out, &r)
    };
    (inputs, Box::new(f))
}

fn layer_cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("linear", |rng| {
            let m = Linear::<f64>::new("l", 4, 3, rng);
            Ok(module_case(m, randn(rng, &[5, 4]), randn(rng, &[5, 3]), |m, x| m.forward(x)))
        }),
        ("conv3d_same", |rng| {
            let m = Conv3d::<f64>::new("c", &LayerSpec::conv_block(2, 3, 3), rng)?;
            Ok(module_case(m, randn(rng, &[2, 3, 4, 3]), randn(rng, &[3, 3, 4, 3]), |m, x| m.forward(x)))
        }),
        ("conv3d_down", |rng| {
            let m = Conv3d::<f64>::new("d", &LayerSpec::down(2, 4, [2, 2, 1]), rng)?;
            Ok(module_case(m, randn(rng, &[2, 4, 2, 3]), randn(rng, &[4, 2, 1, 3]), |m, x| m.forward(x)))
        }),
        ("deconv3d", |rng| {
            let m = Deconv3d::<f64>::new("u", &LayerSpec::up(4, 2, [2, 2, 2]), rng)?;
            Ok(module_case(m, randn(rng, &[4, 2, 1, 2]), randn(rng, &[2, 4, 2, 4]), |m, x| m.forward(x)))
        }),
        ("layernorm", |rng| {
            let mut m = LayerNorm::<f64>::new("n", 6);
            m.gamma.tensor = randn(rng, &[6]);
            m.beta.tensor = randn(rng, &[6]);
            Ok(module_case(m, randn(rng, &[4, 6]), randn(rng, &[4, 6]), |m, x| m.forward(x)))
        }),
        ("convblock", |rng| {
            let m = ConvBlock::<f64>::new("b", &LayerSpec::conv_block(2, 2, 3), rng)?;
            Ok(module_case(m, randn(rng, &[2, 3, 3, 2]), randn(rng, &[2, 3, 3, 2]), |m, x| m.forward(x)))
        }),
    ]
}

/// Perturbs every parameter so zero-initialized biases and unit norm
/// scales do not hide errors in their backward rules.
fn jitter<M: Module<f64>>(m: &mut M, rng: &mut ChaCha8Rng, scale: f64) {
    m.visit_params_mut(&mut |p| {
        let data = p.tensor.data().iter().map(|&w| w + scale * rng.random_range(-1.0..1.0)).collect();
        p.set_data(data).expect("same length");
    });
}

pub fn epa_case(rng: &mut ChaCha8Rng, stage: usize) -> Result<(Vec<Tensor<f64>>, Scalar)> {
    let cfg = ModelConfig::minimal();
    let mut block = EpaBlock::<f64>::new("b", cfg.epa_config(stage), QkSharing::Shared, rng)?;
    jitter(&mut block, rng, 0.2);
    let [h, w, d] = cfg.stage_grid(stage);
    let shape = [cfg.stage_channels[stage], h, w, d];
    Ok(module_case(block, randn(rng, &shape), randn(rng, &shape), |m, x| m.forward(x)))
}

fn block_cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("epa_block_stage0", |rng| epa_case(rng, 0)),
        ("epa_block_stage1", |rng| epa_case(rng, 1)),
        ("epa_block_stage2", |rng| epa_case(rng, 2)),
        ("epa_block_stage3", |rng| epa_case(rng, 3)),
    ]
}

/// The minimal model under the training loss with random labels.
pub fn model_case(rng: &mut ChaCha8Rng) -> Result<(Vec<Tensor<f64>>, Scalar)> {
    let cfg = ModelConfig::minimal();
    let mut model = SegModel::<f64>::new(cfg.clone(), rng)?;
    jitter(&mut model, rng, 0.05);
    let [h, w, d] = cfg.input_extents;
    let x = randn(rng, &[cfg.in_channels, h, w, d]);
    let labels = LabelMap::new(
        cfg.input_extents,
        (0..h * w * d).map(|_| rng.random_range(0..cfg.num_classes as u32)).collect(),
    )?;
    let mut inputs = vec![x];
    model.visit_params(&mut |p| inputs.push(p.tensor.clone()));
    let f = move |t: &[Tensor<f64>]| {
        let mut m = model.clone();
        let mut i = 1;
        m.visit_params_mut(&mut |p| {
            p.tensor = t[i].clone();
            i += 1;
        });
        let err = |e: crate::Error| unetrpp_tensor::TensorError::Unsupported { op: "model", detail: e.to_string() };
        dice_ce_loss(&m.forward(&t[0]).map_err(err)?, &labels).map_err(err)
    };
    Ok((inputs, Box::new(f)))
}

/// Ops and layers compare every gradient entry. Blocks and the model compare
/// directional derivatives along random directions spanning all inputs,
/// since single entries there are often tiny enough to drown in roundoff.
pub fn options(kind: CheckKind, tolerance: f64, seed: u64) -> GradCheckOptions {
    match kind {
        CheckKind::Op | CheckKind::Layer => GradCheckOptions::new(tolerance),
        CheckKind::Block | CheckKind::Model => {
            GradCheckOptions::new(tolerance).joint_directional(DIRECTIONS, seed).with_step(DIRECTIONAL_STEP)
        }
    }
}

pub fn run_case(kind: CheckKind, name: &str, build: Builder, tolerance: f64, seeds: usize) -> Result<SuiteRow> {
    let mut row = SuiteRow {
        kind,
        name: name.to_string(),
        tolerance,
        seeds,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        passed: true,
    };
    for seed in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (inputs, f) = build(&mut rng)?;
        let rep = grad_check(name, |t| f(t), &inputs, &options(kind, tolerance, seed))?;
        row.max_rel_error = row.max_rel_error.max(rep.max_rel_error);
        row.max_abs_error = row.max_abs_error.max(rep.max_abs_error);
        row.passed &= rep.passed;
    }
    Ok(row)
}

/// Names of the op checks; equals the registry of differentiable ops.
pub fn op_check_names() -> Vec<&'static str> {
    op_cases().into_iter().map(|(n, _)| n).collect()
}

/// Runs the whole suite over `seeds` seeds, reporting each row as it
/// completes.
pub fn run_suite(seeds: usize, mut on_row: impl FnMut(&SuiteRow)) -> Result<Vec<SuiteRow>> {
    debug_assert_eq!(op_check_names(), DIFFERENTIABLE_OPS);
    let mut rows = Vec::new();
    let mut push = |row: SuiteRow| {
        on_row(&row);
        rows.push(row);
    };
    for (name, build) in op_cases() {
        push(run_case(CheckKind::Op, name, build, OP_TOLERANCE, seeds)?);
    }
    for (name, build) in layer_cases() {
        push(run_case(CheckKind::Layer, name, build, LAYER_TOLERANCE, seeds)?);
    }
    debug_assert_eq!(block_cases().len(), NUM_STAGES);
    for (name, build) in block_cases() {
        push(run_case(CheckKind::Block, name, build, BLOCK_TOLERANCE, seeds)?);
    }
    push(run_case(CheckKind::Model, "minimal_model", model_case, MODEL_TOLERANCE, seeds)?);
    Ok(rows)
}

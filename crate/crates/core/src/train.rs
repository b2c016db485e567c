//! Training loop and inference helpers.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use unetrpp_tensor::{no_grad, Tensor};

use crate::data::VolumeSample;
use crate::error::{Error, Result};
use crate::loss::dice_ce_loss;
use crate::metrics::{mean_foreground_dsc, LabelMap};
use crate::model::SegModel;
use crate::nn::Module;
use crate::optim::{Sgd, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    /// Mean per-sample loss over the epoch.
    pub loss: f64,
    /// Mean foreground DSC of the training-time predictions.
    pub mean_dsc: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
}

impl TrainLog {
    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }
}

fn check_data(model: &SegModel<f32>, data: &[VolumeSample]) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let cfg = &model.config;
    for (i, s) in data.iter().enumerate() {
        if s.label.extents != cfg.input_extents || s.image.shape()[1..] != cfg.input_extents {
            return Err(Error::Shape(format!(
                "sample {i}: extents {:?} do not match model input {:?}",
                s.label.extents, cfg.input_extents
            )));
        }
        if let Some(&c) = s.label.data.iter().find(|&&c| c as usize >= cfg.num_classes) {
            return Err(Error::Shape(format!("sample {i}: label {c} outside {} classes", cfg.num_classes)));
        }
    }
    Ok(())
}

pub fn fit(model: &mut SegModel<f32>, data: &[VolumeSample], cfg: &TrainConfig) -> Result<TrainLog> {
    fit_with(model, data, cfg, |_| {})
}

/// Trains with mini-batch momentum SGD, calling `on_epoch` after each epoch.
/// Gradients of a batch are accumulated sample by sample.
pub fn fit_with(
    model: &mut SegModel<f32>,
    data: &[VolumeSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainLog> {
    cfg.validate()?;
    check_data(model, data)?;
    let classes = model.config.num_classes;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Sgd::new(cfg);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let (mut loss_sum, mut dsc_sum) = (0.0, 0.0);
        for batch in order.chunks(cfg.batch_size) {
            model.zero_grad();
            for &i in batch {
                let s = &data[i];
                let logits = model.forward(&s.image)?;
                let loss = dice_ce_loss(&logits, &s.label)?;
                let value = f64::from(loss.item()?);
                if !value.is_finite() {
                    return Err(Error::NonFinite { epoch: epoch + 1 });
                }
                loss.scale(1.0 / batch.len() as f64).backward()?;
                loss_sum += value;
                dsc_sum += mean_foreground_dsc(&LabelMap::argmax(&logits)?, &s.label, classes)?;
            }
            opt.step(model, epoch)?;
        }
        let record =
            EpochRecord { epoch: epoch + 1, loss: loss_sum / data.len() as f64, mean_dsc: dsc_sum / data.len() as f64 };
        on_epoch(&record);
        log.records.push(record);
        if cfg.target_dsc.is_some_and(|t| record.mean_dsc >= t) {
            break;
        }
    }
    Ok(log)
}

/// Argmax segmentation of one `C × H × W × D` image.
pub fn predict(model: &SegModel<f32>, image: &Tensor<f32>) -> Result<LabelMap> {
    let _guard = no_grad();
    LabelMap::argmax(&model.forward(image)?)
}

//! The training recipe: soft Dice loss, Adam, on-the-fly affine augmentation,
//! and subject-wise cross-validation folds.

mod adam;
mod augment;
mod folds;
mod loss;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StackNet;
use crate::rng::stream_rng;
use crate::tensor::{Real, Tensor};

pub use adam::{AdamState, BETA1, BETA2, EPSILON};
pub use augment::{augment_sample, warp, AffineParams, AugmentRanges, Interpolation};
pub use folds::{split_folds, Fold};
pub use loss::{soft_dice_loss, DiceLoss, DiceVariant};

const SHUFFLE_STREAM: u64 = 0x5348_5546;
const AUGMENT_STREAM: u64 = 0x4155_474d;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub augment: bool,
    pub augment_ranges: AugmentRanges,
    pub seed: u64,
    /// Smoothing term of the Dice loss.
    pub smooth: f64,
    pub dice_variant: DiceVariant,
    /// Keep slices whose mask has no foreground.
    pub include_empty_slices: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 30,
            learning_rate: 2e-4,
            augment: true,
            augment_ranges: AugmentRanges::default(),
            seed: 0,
            smooth: 1.0,
            dice_variant: DiceVariant::Squared,
            include_empty_slices: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::config("learning_rate must be positive"));
        }
        if !(self.smooth >= 0.0) {
            return Err(Error::config("smooth must be non-negative"));
        }
        Ok(())
    }
}

/// Slices of one subject: images (S, C, H, W) and binary masks (S, 1, H, W).
#[derive(Debug, Clone)]
pub struct SubjectSlices<T = f32> {
    pub id: String,
    pub images: Tensor<T>,
    pub masks: Tensor<T>,
}

impl<T: Real> SubjectSlices<T> {
    pub fn new(id: impl Into<String>, images: Tensor<T>, masks: Tensor<T>) -> Result<Self> {
        let (si, sm) = (images.shape(), masks.shape());
        if si.n != sm.n || sm.c != 1 || (si.h, si.w) != (sm.h, sm.w) {
            return Err(Error::dim(format!(
                "images {si} and masks {sm} do not describe the same slices"
            )));
        }
        Ok(SubjectSlices {
            id: id.into(),
            images,
            masks,
        })
    }

    fn slice_has_foreground(&self, s: usize) -> bool {
        let p = self.masks.shape().plane();
        self.masks.data()[s * p..(s + 1) * p]
            .iter()
            .any(|&v| v != T::ZERO)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// Loss of every optimizer step, in order.
    pub step_losses: Vec<f64>,
}

impl TrainHistory {
    /// One JSON object per line: `{"epoch":..,"mean_loss":..}`.
    pub fn to_json_lines(&self) -> Result<String> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&serde_json::to_string(e)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Optimizer state plus the per-step update rule.
#[derive(Debug, Clone)]
pub struct Trainer<T = f32> {
    config: TrainConfig,
    adam: AdamState<T>,
}

impl<T: Real> Trainer<T> {
    pub fn new(model: &StackNet<T>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        Ok(Trainer {
            adam: AdamState::new(model.params()),
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    /// forward → soft Dice → backward → Adam. Returns the batch loss.
    pub fn step(&mut self, model: &mut StackNet<T>, images: &Tensor<T>, masks: &Tensor<T>) -> Result<f64> {
        model.zero_grad();
        let probs = model.forward_train(images)?;
        let loss = soft_dice_loss(&probs, masks, self.config.smooth, self.config.dice_variant)?;
        model.backward(&loss.grad)?;
        model.clear_cache();
        self.adam.update(model.params_mut(), self.config.learning_rate)?;
        Ok(loss.loss)
    }
}

/// Runs the full epoch loop over the pooled slices of `subjects`.
///
/// Each epoch shuffles the slice order from `(seed, epoch)` and draws each
/// sample's augmentation from `(seed, epoch, position)`, so the run depends
/// only on the seed.
pub fn train<T: Real>(
    model: &mut StackNet<T>,
    subjects: &[SubjectSlices<T>],
    config: &TrainConfig,
) -> Result<TrainHistory> {
    config.validate()?;
    let mut index: Vec<(usize, usize)> = Vec::new();
    for (si, s) in subjects.iter().enumerate() {
        for z in 0..s.images.shape().n {
            if config.include_empty_slices || s.slice_has_foreground(z) {
                index.push((si, z));
            }
        }
    }
    if index.is_empty() {
        return Err(Error::config("training set has no slices"));
    }
    let mut trainer = Trainer::new(model, config.clone())?;
    let mut history = TrainHistory::default();
    for epoch in 0..config.epochs {
        let mut order = index.clone();
        order.shuffle(&mut stream_rng(config.seed, &[SHUFFLE_STREAM, epoch as u64]));
        let mut total = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let samples: Vec<(Tensor<T>, Tensor<T>)> = chunk
                .par_iter()
                .enumerate()
                .map(|(k, &(si, z))| {
                    let s = &subjects[si];
                    let img = s.images.batch_slice(z, 1)?;
                    let mask = s.masks.batch_slice(z, 1)?;
                    if !config.augment {
                        return Ok((img, mask));
                    }
                    let position = (b * config.batch_size + k) as u64;
                    let mut rng = stream_rng(config.seed, &[AUGMENT_STREAM, epoch as u64, position]);
                    let params = AffineParams::sample(&mut rng, &config.augment_ranges);
                    augment_sample(&img, &mask, &params)
                })
                .collect::<Result<_>>()?;
            let (imgs, masks): (Vec<_>, Vec<_>) = samples.into_iter().unzip();
            let images = Tensor::stack_batch(&imgs)?;
            let masks = Tensor::stack_batch(&masks)?;
            let loss = trainer.step(model, &images, &masks)?;
            history.step_losses.push(loss);
            total += loss;
            batches += 1;
        }
        history.epochs.push(EpochRecord {
            epoch,
            mean_loss: total / batches as f64,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StackNetConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_model() -> StackNet<f32> {
        StackNet::new(StackNetConfig {
            kernel_size: 3,
            stack_depth: 1,
            in_channels: 2,
            channel_widths: [4, 4, 4, 4],
            height: 16,
            width: 16,
            seed: 5,
        })
        .unwrap()
    }

    fn toy_subject(seed: u64) -> SubjectSlices<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = Tensor::randn([3, 2, 16, 16], 1.0, &mut rng);
        let masks = images
            .batch_slice(0, 3)
            .unwrap()
            .map(|v| if v > 1.0 { 1.0 } else { 0.0 });
        let mut m = Tensor::zeros([3, 1, 16, 16]);
        for n in 0..3 {
            m.data_mut()[n * 256..(n + 1) * 256].copy_from_slice(masks.plane(n, 0));
        }
        SubjectSlices::new(format!("s{seed}"), images, m).unwrap()
    }

    #[test]
    fn zero_epochs_leaves_model() {
        let mut model = toy_model();
        let before = model.clone();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let h = train(&mut model, &[toy_subject(0)], &cfg).unwrap();
        assert!(h.epochs.is_empty());
        assert!(model.params().zip(before.params()).all(|(a, b)| a.value == b.value));
    }

    #[test]
    fn empty_dataset_is_config_error() {
        let mut model = toy_model();
        assert!(matches!(train(&mut model, &[], &TrainConfig::default()), Err(Error::Config(_))));
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let cfg = TrainConfig { epochs: 2, batch_size: 2, learning_rate: 1e-3, ..TrainConfig::default() };
        let data = [toy_subject(1), toy_subject(2)];
        let mut a = toy_model();
        let mut b = toy_model();
        let ha = train(&mut a, &data, &cfg).unwrap();
        let hb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(
            crate::model::write_checkpoint(&a),
            crate::model::write_checkpoint(&b)
        );
        assert_eq!(ha.epochs.len(), 2);
        assert_eq!(ha.step_losses.len(), 6);
    }

    #[test]
    fn history_json_lines() {
        let h = TrainHistory {
            epochs: vec![EpochRecord { epoch: 0, mean_loss: 0.5 }, EpochRecord { epoch: 1, mean_loss: 0.25 }],
            step_losses: vec![],
        };
        assert_eq!(
            h.to_json_lines().unwrap(),
            "{\"epoch\":0,\"mean_loss\":0.5}\n{\"epoch\":1,\"mean_loss\":0.25}\n"
        );
    }

    #[test]
    fn config_json_uses_field_names() {
        let cfg: TrainConfig = serde_json::from_str(r#"{"epochs": 3, "learning_rate": 0.001}"#).unwrap();
        assert_eq!(cfg.epochs, 3);
        assert_eq!(cfg.batch_size, 30);
        let v = serde_json::to_value(TrainConfig::default()).unwrap();
        assert_eq!(v["learning_rate"], 0.0002);
        assert_eq!(v["batch_size"], 30);
        assert_eq!(v["epochs"], 50);
    }
}

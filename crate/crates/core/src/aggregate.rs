//! Multi-model inference: per-model probability volumes, mean fusion and
//! thresholding.

use std::path::PathBuf;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StackNet;
use crate::preprocess::{slices_to_volume, PreparedSubject};
use crate::volume::{Volume, VolumeKind};

pub const DEFAULT_THRESHOLD: f64 = 0.4;

/// Slices per forward call during inference.
const INFERENCE_CHUNK: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub models: Vec<PathBuf>,
    #[serde(default = "default_threshold")]
    pub threshold: f64,
}

fn default_threshold() -> f64 {
    DEFAULT_THRESHOLD
}

impl EnsembleSpec {
    pub fn new(models: Vec<PathBuf>) -> Self {
        EnsembleSpec {
            models,
            threshold: DEFAULT_THRESHOLD,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::config("an ensemble needs at least one model"));
        }
        check_threshold(self.threshold)
    }
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::config(format!("threshold {t} is not in (0, 1)")))
    }
}

/// Runs `model` over every axial slice and maps the probabilities back onto
/// the subject's original grid. Voxels outside the processed region are 0.
pub fn predict_volume(model: &StackNet<f32>, subject: &PreparedSubject) -> Result<Volume> {
    let cfg = model.config();
    let s = subject.images.shape();
    if cfg.in_channels != s.c {
        return Err(Error::config(format!(
            "model takes {} channels, subject {} has {}",
            cfg.in_channels, subject.subject_id, s.c
        )));
    }
    if (cfg.height, cfg.width) != (s.h, s.w) {
        return Err(Error::config(format!(
            "model was built for {}×{} slices, subject {} is preprocessed to {}×{}",
            cfg.height, cfg.width, subject.subject_id, s.h, s.w
        )));
    }
    let mut parts = Vec::with_capacity(s.n.div_ceil(INFERENCE_CHUNK));
    for start in (0..s.n).step_by(INFERENCE_CHUNK) {
        let count = INFERENCE_CHUNK.min(s.n - start);
        parts.push(model.forward(&subject.images.batch_slice(start, count)?)?);
    }
    let probs = crate::tensor::Tensor::stack_batch(&parts)?;
    slices_to_volume(&probs, 0, &subject.geometry, subject.spacing, VolumeKind::Probability)
}

/// Voxelwise mean of `volumes`: summed in list order, then divided by the
/// count.
///
/// For f32-valued inputs (what the network emits) every partial sum is exact
/// in f64, so the result is the correctly rounded mean: it lies between the
/// inputs and the mean of k identical volumes is that volume.
pub fn aggregate_probs(volumes: &[Volume]) -> Result<Volume> {
    let first = volumes
        .first()
        .ok_or_else(|| Error::config("cannot aggregate an empty list of volumes"))?;
    for v in &volumes[1..] {
        first.same_grid(v)?;
    }
    let n = volumes.len() as f64;
    let data: Vec<f64> = (0..first.len())
        .into_par_iter()
        .map(|i| {
            let mut sum = 0.0;
            for v in volumes {
                sum += v.data()[i];
            }
            sum / n
        })
        .collect();
    Volume::new(first.dims(), first.spacing(), data, VolumeKind::Probability)
}

/// Voxel is 1 iff its probability is `>= threshold`.
pub fn binarize(prob: &Volume, threshold: f64) -> Volume {
    let bits: Vec<bool> = prob.data().iter().map(|&p| p >= threshold).collect();
    Volume::from_mask(prob.dims(), prob.spacing(), &bits).expect("same grid")
}

/// Output of [`predict_ensemble`].
#[derive(Debug, Clone)]
pub struct EnsemblePrediction {
    pub members: Vec<Volume>,
    pub probability: Volume,
    pub mask: Volume,
}

pub fn predict_ensemble(models: &[StackNet<f32>], subject: &PreparedSubject, threshold: f64) -> Result<EnsemblePrediction> {
    if models.is_empty() {
        return Err(Error::config("an ensemble needs at least one model"));
    }
    check_threshold(threshold)?;
    let members = models
        .iter()
        .map(|m| predict_volume(m, subject))
        .collect::<Result<Vec<_>>>()?;
    let probability = aggregate_probs(&members)?;
    let mask = binarize(&probability, threshold);
    Ok(EnsemblePrediction {
        members,
        probability,
        mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::StackNetConfig;
    use crate::preprocess::{PreprocessConfig, SubjectRecord};

    fn prob(data: Vec<f64>) -> Volume {
        let n = data.len();
        Volume::new([n, 1, 1], [1.0; 3], data, VolumeKind::Probability).unwrap()
    }

    #[test]
    fn mean_examples() {
        let a = aggregate_probs(&[prob(vec![0.2, 1.0]), prob(vec![0.6, 0.0])]).unwrap();
        assert!((a.data()[0] - 0.4).abs() < 1e-15);
        assert_eq!(a.data()[1], 0.5);
        let p = prob(vec![0.1, 0.7, 0.3]);
        assert_eq!(aggregate_probs(std::slice::from_ref(&p)).unwrap(), p);
        assert!(aggregate_probs(&[]).unwrap_err().is_config());
        let q = Volume::zeros([2, 1, 1], [1.0; 3], VolumeKind::Probability);
        assert!(matches!(aggregate_probs(&[p, q]), Err(Error::Dimension(_))));
    }

    #[test]
    fn binarize_boundary() {
        let b = binarize(&prob(vec![0.4, 0.39, 0.9, 0.0]), DEFAULT_THRESHOLD);
        assert_eq!(b.data(), &[1.0, 0.0, 1.0, 0.0]);
        assert_eq!(binarize(&prob(vec![0.1, 0.2]), 0.4).count_nonzero(), 0);
    }

    #[test]
    fn spec_validation() {
        assert!(EnsembleSpec::new(vec![]).validate().unwrap_err().is_config());
        let mut s = EnsembleSpec::new(vec!["a".into()]);
        s.validate().unwrap();
        s.threshold = 1.0;
        assert!(s.validate().is_err());
        let parsed: EnsembleSpec = serde_json::from_str(r#"{"models":["a","b"]}"#).unwrap();
        assert_eq!(parsed.threshold, 0.4);
    }

    fn subject(dims: [usize; 3]) -> PreparedSubject {
        let n: usize = dims.iter().product();
        let flair: Vec<f64> = (0..n).map(|i| ((i * 37) % 101) as f64).collect();
        let t1: Vec<f64> = (0..n).map(|i| ((i * 11) % 53) as f64).collect();
        let rec = SubjectRecord::new(
            "s",
            "c",
            Volume::new(dims, [1.0; 3], flair, VolumeKind::Intensity).unwrap(),
            Volume::new(dims, [1.0; 3], t1, VolumeKind::Intensity).unwrap(),
            None,
        )
        .unwrap();
        PreparedSubject::from_record(&rec, &PreprocessConfig { target_size: 16, ..Default::default() }).unwrap()
    }

    fn small_config() -> StackNetConfig {
        StackNetConfig {
            stack_depth: 1,
            channel_widths: [2, 2, 2, 2],
            height: 16,
            width: 16,
            ..Default::default()
        }
    }

    #[test]
    fn zero_model_gives_half_inside() {
        let mut model = StackNet::<f32>::new(small_config()).unwrap();
        for p in model.params_mut() {
            p.value.fill(0.0);
        }
        let sub = subject([20, 12, 5]);
        let v = predict_volume(&model, &sub).unwrap();
        assert_eq!(v.dims(), [20, 12, 5]);
        // Rows 2..18 survive the crop; all columns survive the pad.
        for z in 0..5 {
            for y in 0..12 {
                for x in 0..20 {
                    let expect = if (2..18).contains(&x) { 0.5 } else { 0.0 };
                    assert_eq!(v.get(x, y, z), expect);
                }
            }
        }
    }

    #[test]
    fn prediction_is_deterministic_and_checked() {
        let model = StackNet::<f32>::new(small_config()).unwrap();
        let sub = subject([16, 16, 6]);
        let a = predict_volume(&model, &sub).unwrap();
        let b = predict_volume(&model, &sub).unwrap();
        assert_eq!(a, b);
        assert!(a.data().iter().all(|p| (0.0..=1.0).contains(p)));

        let ens = predict_ensemble(&[model.clone(), model.clone()], &sub, 0.4).unwrap();
        assert_eq!(ens.probability, a);
        assert_eq!(ens.mask, binarize(&a, 0.4));

        let wrong = StackNet::<f32>::new(StackNetConfig { height: 24, ..small_config() }).unwrap();
        assert!(predict_volume(&wrong, &sub).unwrap_err().is_config());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn probs(n: usize) -> impl Strategy<Value = Vec<f64>> {
            // f32-representable values, as produced by the f32 network.
            prop::collection::vec((0f32..=1.0).prop_map(|v| v as f64), n)
        }

        proptest! {
            #[test]
            fn mean_is_bounded(a in probs(6), b in probs(6), c in probs(6)) {
                let m = aggregate_probs(&[prob(a.clone()), prob(b.clone()), prob(c.clone())]).unwrap();
                for i in 0..6 {
                    let lo = a[i].min(b[i]).min(c[i]);
                    let hi = a[i].max(b[i]).max(c[i]);
                    prop_assert!(m.data()[i] >= lo && m.data()[i] <= hi);
                }
            }

            #[test]
            fn copies_are_exact(a in probs(8), k in 1usize..9) {
                let p = prob(a);
                let copies = vec![p.clone(); k];
                prop_assert_eq!(aggregate_probs(&copies).unwrap(), p.clone());
                prop_assert_eq!(binarize(&aggregate_probs(&[p.clone(), p.clone()]).unwrap(), 0.4), binarize(&p, 0.4));
            }

            #[test]
            fn fusion_is_monotone(a in probs(6), b in probs(6), bump in probs(6)) {
                let base = binarize(&aggregate_probs(&[prob(a.clone()), prob(b.clone())]).unwrap(), 0.4);
                let raised: Vec<f64> = a.iter().zip(&bump).map(|(x, d)| (x + d).min(1.0)).collect();
                let after = binarize(&aggregate_probs(&[prob(raised), prob(b)]).unwrap(), 0.4);
                for i in 0..6 {
                    prop_assert!(base.data()[i] <= after.data()[i]);
                }
            }
        }
    }
}

//! End-to-end protocols: subject-wise cross-validation, ensemble evaluation
//! and the stack-depth sweep.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{binarize, predict_ensemble, predict_volume, DEFAULT_THRESHOLD};
use crate::error::{Error, Result};
use crate::io::ManifestEntry;
use crate::metrics::{EvalOptions, MetricsReport, MetricsSummary};
use crate::model::{StackNet, StackNetConfig};
use crate::preprocess::{PreparedSubject, PreprocessConfig, SubjectRecord};
use crate::train::{split_folds, train, Fold, SubjectSlices, TrainConfig, TrainHistory};

/// Everything a training/evaluation run needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// `height` and `width` are overwritten by `preprocess.target_size`.
    pub model: StackNetConfig,
    pub train: TrainConfig,
    pub preprocess: PreprocessConfig,
    pub eval: EvalOptions,
    pub folds: usize,
    pub fold_seed: u64,
    /// Run only the first `n` folds; `None` runs all of them.
    pub max_folds: Option<usize>,
    pub threshold: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            model: StackNetConfig::default(),
            train: TrainConfig::default(),
            preprocess: PreprocessConfig::default(),
            eval: EvalOptions::default(),
            folds: 5,
            fold_seed: 0,
            max_folds: None,
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl ExperimentConfig {
    /// Model config with the slice extents taken from preprocessing.
    pub fn model_config(&self) -> StackNetConfig {
        StackNetConfig {
            height: self.preprocess.target_size,
            width: self.preprocess.target_size,
            ..self.model.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.train.validate()?;
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::config(format!("threshold {} is not in (0, 1)", self.threshold)));
        }
        if self.max_folds == Some(0) {
            return Err(Error::config("max_folds must be at least 1"));
        }
        Ok(())
    }
}

/// Loads and preprocesses every manifest entry, in manifest order.
pub fn prepare_subjects(entries: &[ManifestEntry], config: &PreprocessConfig) -> Result<Vec<PreparedSubject>> {
    entries
        .par_iter()
        .map(|e| PreparedSubject::from_record(&SubjectRecord::load(e)?, config))
        .collect()
}

fn training_slices(subjects: &[&PreparedSubject]) -> Result<Vec<SubjectSlices<f32>>> {
    subjects.iter().map(|s| s.to_slices()).collect()
}

/// Builds a fresh model from `model` and trains it on `subjects`.
pub fn train_model(
    model: &StackNetConfig,
    subjects: &[&PreparedSubject],
    config: &TrainConfig,
) -> Result<(StackNet<f32>, TrainHistory)> {
    let mut net = StackNet::<f32>::new(model.clone())?;
    let history = train(&mut net, &training_slices(subjects)?, config)?;
    Ok((net, history))
}

/// Metrics of one subject's binary prediction against its ground truth.
pub fn evaluate_prediction(subject: &PreparedSubject, prediction: &crate::Volume, opts: EvalOptions) -> Result<MetricsReport> {
    let gt = subject.ground_truth.as_ref().ok_or_else(|| {
        Error::config(format!("subject {} has no ground truth to evaluate against", subject.subject_id))
    })?;
    MetricsReport::compute(gt, prediction, opts)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubjectReport {
    pub subject_id: String,
    pub report: MetricsReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub subjects: Vec<SubjectReport>,
    pub summary: MetricsSummary,
}

impl EvaluationReport {
    pub fn from_subjects(subjects: Vec<SubjectReport>) -> Result<Self> {
        let reports: Vec<MetricsReport> = subjects.iter().map(|s| s.report.clone()).collect();
        Ok(EvaluationReport {
            summary: MetricsSummary::from_reports(&reports)?,
            subjects,
        })
    }
}

/// Ensemble prediction (mean of the models, then threshold) and evaluation
/// of each subject.
pub fn evaluate_ensemble(
    models: &[StackNet<f32>],
    subjects: &[&PreparedSubject],
    threshold: f64,
    opts: EvalOptions,
) -> Result<EvaluationReport> {
    let rows = subjects
        .iter()
        .map(|s| {
            let pred = predict_ensemble(models, s, threshold)?;
            Ok(SubjectReport {
                subject_id: s.subject_id.clone(),
                report: evaluate_prediction(s, &pred.mask, opts)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    EvaluationReport::from_subjects(rows)
}

/// Subject ids grouped by center, in first-appearance order within a center.
pub fn subjects_by_center(subjects: &[PreparedSubject]) -> BTreeMap<String, Vec<String>> {
    let mut map: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for s in subjects {
        map.entry(s.center.clone()).or_default().push(s.subject_id.clone());
    }
    map
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: Fold,
    pub final_loss: Option<f64>,
    pub evaluation: EvaluationReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidationReport {
    pub folds: Vec<FoldResult>,
    /// Mean over every evaluated test subject.
    pub summary: MetricsSummary,
}

/// Subject-wise k-fold cross-validation of a single model configuration.
pub fn cross_validate(subjects: &[PreparedSubject], config: &ExperimentConfig) -> Result<CrossValidationReport> {
    config.validate()?;
    let folds = split_folds(&subjects_by_center(subjects), config.folds, config.fold_seed)?;
    let by_id: BTreeMap<&str, &PreparedSubject> = subjects.iter().map(|s| (s.subject_id.as_str(), s)).collect();
    let pick = |ids: &[String]| -> Vec<&PreparedSubject> { ids.iter().map(|id| by_id[id.as_str()]).collect() };
    let model_cfg = config.model_config();
    let mut results = Vec::new();
    let mut all = Vec::new();
    for fold in folds.into_iter().take(config.max_folds.unwrap_or(usize::MAX)) {
        let (net, history) = train_model(&model_cfg, &pick(&fold.train), &config.train)?;
        let rows = pick(&fold.test)
            .into_iter()
            .map(|s| {
                let prob = predict_volume(&net, s)?;
                Ok(SubjectReport {
                    subject_id: s.subject_id.clone(),
                    report: evaluate_prediction(s, &binarize(&prob, config.threshold), config.eval)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        all.extend(rows.iter().map(|r| r.report.clone()));
        results.push(FoldResult {
            fold,
            final_loss: history.epochs.last().map(|e| e.mean_loss),
            evaluation: EvaluationReport::from_subjects(rows)?,
        });
    }
    Ok(CrossValidationReport {
        folds: results,
        summary: MetricsSummary::from_reports(&all)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthRow {
    pub depth: usize,
    pub layer_count: usize,
    pub dice: f64,
    pub lesion_recall: f64,
    pub lesion_f1: f64,
    pub test_subjects: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthSweepReport {
    pub kernel_size: usize,
    pub rows: Vec<DepthRow>,
}

/// Trains one model per stack depth on identical folds and seeds and reports
/// test-subject means of Dice, lesion recall and lesion F1.
pub fn run_depth_sweep(subjects: &[PreparedSubject], depths: &[usize], base: &ExperimentConfig) -> Result<DepthSweepReport> {
    if depths.is_empty() {
        return Err(Error::config("depth sweep needs at least one depth"));
    }
    let mut rows = Vec::with_capacity(depths.len());
    for &depth in depths {
        let mut cfg = base.clone();
        cfg.model.stack_depth = depth;
        let cv = cross_validate(subjects, &cfg)?;
        rows.push(DepthRow {
            depth,
            layer_count: cfg.model_config().layer_count(),
            dice: cv.summary.dice,
            lesion_recall: cv.summary.lesion_recall,
            lesion_f1: cv.summary.lesion_f1,
            test_subjects: cv.summary.subjects,
        });
    }
    Ok(DepthSweepReport {
        kernel_size: base.model.kernel_size,
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_phantom, subject_name, PhantomSpec};

    fn tiny_subjects(centers: usize, per: usize) -> Vec<PreparedSubject> {
        let pre = PreprocessConfig { target_size: 16, ..Default::default() };
        let mut out = Vec::new();
        for c in 0..centers {
            for j in 0..per {
                let (id, center) = subject_name(c, j);
                let spec = PhantomSpec {
                    dims: [16, 16, 4],
                    n_small: 1,
                    n_medium: 1,
                    n_large: 0,
                    seed: (c * 10 + j) as u64,
                    ..Default::default()
                };
                let rec = generate_phantom(&spec, &id, &center).unwrap();
                out.push(PreparedSubject::from_record(&rec, &pre).unwrap());
            }
        }
        out
    }

    fn tiny_config() -> ExperimentConfig {
        ExperimentConfig {
            model: StackNetConfig {
                stack_depth: 1,
                channel_widths: [2, 2, 2, 4],
                ..Default::default()
            },
            train: TrainConfig { epochs: 1, batch_size: 4, ..Default::default() },
            preprocess: PreprocessConfig { target_size: 16, ..Default::default() },
            folds: 2,
            max_folds: Some(1),
            ..Default::default()
        }
    }

    #[test]
    fn depth_sweep_shape_and_repeatability() {
        let subjects = tiny_subjects(2, 2);
        let cfg = tiny_config();
        let report = run_depth_sweep(&subjects, &[1, 2], &cfg).unwrap();
        assert_eq!(report.rows.len(), 2);
        assert_eq!(report.rows[0].layer_count, 16);
        assert_eq!(report.rows[1].layer_count, 18);
        assert_eq!(report.rows[0].test_subjects, 2);
        let again = run_depth_sweep(&subjects, &[2], &cfg).unwrap();
        assert_eq!(again.rows[0], report.rows[1]);
    }

    #[test]
    fn ensemble_evaluation_reports_each_subject() {
        let subjects = tiny_subjects(1, 2);
        let cfg = tiny_config();
        let refs: Vec<&PreparedSubject> = subjects.iter().collect();
        let a = StackNet::<f32>::new(cfg.model_config()).unwrap();
        let b = StackNet::<f32>::new(StackNetConfig { kernel_size: 5, ..cfg.model_config() }).unwrap();
        let rep = evaluate_ensemble(&[a, b], &refs, 0.4, EvalOptions::default()).unwrap();
        assert_eq!(rep.subjects.len(), 2);
        assert_eq!(rep.summary.subjects, 2);
        assert_eq!(rep.summary.n_g, rep.subjects.iter().map(|s| s.report.n_g).sum::<usize>());
    }

    #[test]
    fn config_json_defaults() {
        let cfg: ExperimentConfig = serde_json::from_str(r#"{"folds": 3}"#).unwrap();
        assert_eq!(cfg.folds, 3);
        assert_eq!(cfg.threshold, 0.4);
        assert_eq!(cfg.model_config().height, 200);
        let bad = ExperimentConfig { threshold: 0.0, ..Default::default() };
        assert!(bad.validate().unwrap_err().is_config());
    }
}

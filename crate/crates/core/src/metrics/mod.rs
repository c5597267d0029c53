//! Lesion-level evaluation: Dice, lesion recall and F1 over 3-D connected
//! components, lesion size classes, and the paired Z-test.

mod components;
mod stats;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::Volume;

pub use components::{label_components, label_components_3d, Connectivity, LesionComponents};
pub use stats::{normal_cdf, paired_z_test, ZTest};

/// `2|G∩P| / (|G| + |P|)` over nonzero voxels; 1 when both are empty.
pub fn dice_score(g: &Volume, p: &Volume) -> Result<f64> {
    g.same_grid(p)?;
    let (mut inter, mut ng, mut np) = (0usize, 0usize, 0usize);
    for (&a, &b) in g.data().iter().zip(p.data()) {
        let (a, b) = (a != 0.0, b != 0.0);
        ng += a as usize;
        np += b as usize;
        inter += (a && b) as usize;
    }
    if ng + np == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (ng + np) as f64)
}

/// Overlap bookkeeping between ground-truth and predicted components. A
/// component counts as matched when it shares at least one voxel with any
/// component of the other labeling.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LesionMatch {
    /// Ground-truth lesions.
    pub n_g: usize,
    /// Ground-truth lesions touched by the prediction.
    pub n_p: usize,
    /// Predicted components.
    pub n_pred: usize,
    /// Predicted components touching the ground truth.
    pub n_pred_hit: usize,
    /// Predicted components with no ground-truth overlap.
    pub n_f: usize,
}

fn hits(g: &LesionComponents, p: &LesionComponents) -> Result<(Vec<bool>, Vec<bool>)> {
    if g.dims != p.dims {
        return Err(Error::dim(format!(
            "component grids differ: {:?} vs {:?}",
            g.dims, p.dims
        )));
    }
    let mut g_hit = vec![false; g.count];
    let mut p_hit = vec![false; p.count];
    for (&lg, &lp) in g.labels.iter().zip(&p.labels) {
        if lg != 0 && lp != 0 {
            g_hit[lg as usize - 1] = true;
            p_hit[lp as usize - 1] = true;
        }
    }
    Ok((g_hit, p_hit))
}

pub fn match_lesions(g: &LesionComponents, p: &LesionComponents) -> Result<LesionMatch> {
    let (g_hit, p_hit) = hits(g, p)?;
    let n_p = g_hit.iter().filter(|&&h| h).count();
    let n_pred_hit = p_hit.iter().filter(|&&h| h).count();
    Ok(LesionMatch {
        n_g: g.count,
        n_p,
        n_pred: p.count,
        n_pred_hit,
        n_f: p.count - n_pred_hit,
    })
}

/// `N_P / N_G`.
pub fn lesion_recall(g: &LesionComponents, p: &LesionComponents) -> Result<f64> {
    let m = match_lesions(g, p)?;
    if m.n_g == 0 {
        return Err(Error::UndefinedMetric(
            "lesion recall needs at least one ground-truth lesion".into(),
        ));
    }
    Ok(m.n_p as f64 / m.n_g as f64)
}

/// How the lesion F1 score is computed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum F1Mode {
    /// `N_P / (N_P + N_F)`: detected ground-truth lesions over detected plus
    /// false-positive components.
    #[default]
    PaperLiteral,
    /// Harmonic mean of lesion precision (`n_pred_hit / n_pred`) and lesion
    /// recall.
    Harmonic,
}

pub fn lesion_f1(g: &LesionComponents, p: &LesionComponents, mode: F1Mode) -> Result<f64> {
    let m = match_lesions(g, p)?;
    f1_from_match(&m, mode)
}

fn f1_from_match(m: &LesionMatch, mode: F1Mode) -> Result<f64> {
    match mode {
        F1Mode::PaperLiteral => {
            if m.n_pred == 0 {
                return Err(Error::UndefinedMetric(
                    "lesion F1 is undefined for an empty prediction".into(),
                ));
            }
            if m.n_p + m.n_f == 0 {
                return Ok(0.0);
            }
            Ok(m.n_p as f64 / (m.n_p + m.n_f) as f64)
        }
        F1Mode::Harmonic => {
            if m.n_g == 0 || m.n_pred == 0 {
                return Err(Error::UndefinedMetric(
                    "harmonic lesion F1 needs ground-truth and predicted lesions".into(),
                ));
            }
            let prec = m.n_pred_hit as f64 / m.n_pred as f64;
            let rec = m.n_p as f64 / m.n_g as f64;
            if prec + rec == 0.0 {
                return Ok(0.0);
            }
            Ok(2.0 * prec * rec / (prec + rec))
        }
    }
}

/// Lesion counts per volume class: small `< 10` voxels, medium `10..=20`,
/// large `> 20`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SizeHistogram {
    pub small: usize,
    pub medium: usize,
    pub large: usize,
}

impl SizeHistogram {
    pub fn add(&mut self, volume: usize) {
        match volume {
            v if v < 10 => self.small += 1,
            v if v <= 20 => self.medium += 1,
            _ => self.large += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.small + self.medium + self.large
    }
}

pub fn size_histogram(comps: &LesionComponents) -> SizeHistogram {
    size_histogram_of(comps.sizes.iter().copied())
}

pub fn size_histogram_of(volumes: impl IntoIterator<Item = usize>) -> SizeHistogram {
    let mut h = SizeHistogram::default();
    volumes.into_iter().for_each(|v| h.add(v));
    h
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub connectivity: Connectivity,
    pub f1_mode: F1Mode,
}

/// Evaluation of one (ground truth, prediction) pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dice: f64,
    pub lesion_recall: f64,
    pub lesion_f1: f64,
    pub n_g: usize,
    pub n_p: usize,
    pub n_f: usize,
    /// Ground-truth lesions by size class.
    pub sizes: SizeHistogram,
    /// Detected ground-truth lesions by size class.
    pub detected_sizes: SizeHistogram,
}

impl MetricsReport {
    /// Evaluates binary `pred` against binary `gt`.
    ///
    /// Requires at least one ground-truth lesion. An empty prediction scores a
    /// lesion F1 of 0, since it detects nothing.
    pub fn compute(gt: &Volume, pred: &Volume, opts: EvalOptions) -> Result<Self> {
        let dice = dice_score(gt, pred)?;
        let g = label_components_3d(gt, opts.connectivity);
        let p = label_components_3d(pred, opts.connectivity);
        let (g_hit, _) = hits(&g, &p)?;
        let m = match_lesions(&g, &p)?;
        let lesion_recall = lesion_recall(&g, &p)?;
        let lesion_f1 = if m.n_pred == 0 {
            0.0
        } else {
            f1_from_match(&m, opts.f1_mode)?
        };
        let detected_sizes = size_histogram_of(
            g.sizes
                .iter()
                .zip(&g_hit)
                .filter(|(_, &h)| h)
                .map(|(&s, _)| s),
        );
        Ok(MetricsReport {
            dice,
            lesion_recall,
            lesion_f1,
            n_g: m.n_g,
            n_p: m.n_p,
            n_f: m.n_f,
            sizes: size_histogram(&g),
            detected_sizes,
        })
    }
}

/// Mean of per-subject reports; counts and histograms are summed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub subjects: usize,
    pub dice: f64,
    pub lesion_recall: f64,
    pub lesion_f1: f64,
    pub n_g: usize,
    pub n_p: usize,
    pub n_f: usize,
    pub sizes: SizeHistogram,
    pub detected_sizes: SizeHistogram,
}

impl MetricsSummary {
    pub fn from_reports(reports: &[MetricsReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::UndefinedMetric("no reports to summarize".into()));
        }
        let n = reports.len() as f64;
        let mean = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        let sum_hist = |f: fn(&MetricsReport) -> SizeHistogram| {
            reports.iter().map(f).fold(SizeHistogram::default(), |a, b| SizeHistogram {
                small: a.small + b.small,
                medium: a.medium + b.medium,
                large: a.large + b.large,
            })
        };
        Ok(MetricsSummary {
            subjects: reports.len(),
            dice: mean(|r| r.dice),
            lesion_recall: mean(|r| r.lesion_recall),
            lesion_f1: mean(|r| r.lesion_f1),
            n_g: reports.iter().map(|r| r.n_g).sum(),
            n_p: reports.iter().map(|r| r.n_p).sum(),
            n_f: reports.iter().map(|r| r.n_f).sum(),
            sizes: sum_hist(|r| r.sizes),
            detected_sizes: sum_hist(|r| r.detected_sizes),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(dims: [usize; 3], on: &[usize]) -> Volume {
        let mut bits = vec![false; dims.iter().product()];
        on.iter().for_each(|&i| bits[i] = true);
        Volume::from_mask(dims, [1.0; 3], &bits).unwrap()
    }

    fn comps(v: &Volume) -> LesionComponents {
        label_components_3d(v, Connectivity::TwentySix)
    }

    #[test]
    fn dice_cases() {
        let d = [4, 4, 1];
        let g = mask(d, &[0, 1, 2, 3]);
        assert_eq!(dice_score(&g, &g).unwrap(), 1.0);
        assert_eq!(dice_score(&g, &mask(d, &[8, 9])).unwrap(), 0.0);
        assert_eq!(dice_score(&g, &mask(d, &[2, 3, 12, 13])).unwrap(), 0.5);
        assert_eq!(dice_score(&mask(d, &[]), &mask(d, &[])).unwrap(), 1.0);
        assert!(dice_score(&g, &mask([4, 2, 2], &[])).is_err());
    }

    // Three lesions along a row: x = 0, 3..=4, 7 in an 8x1x1 grid.
    fn three_lesions() -> Volume {
        mask([8, 1, 1], &[0, 3, 4, 7])
    }

    #[test]
    fn recall_counts_touched_lesions() {
        let g = three_lesions();
        let p = mask([8, 1, 1], &[0, 4]);
        assert!((lesion_recall(&comps(&g), &comps(&p)).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(lesion_recall(&comps(&g), &comps(&g)).unwrap(), 1.0);
        assert_eq!(lesion_recall(&comps(&g), &comps(&mask([8, 1, 1], &[]))).unwrap(), 0.0);
        let empty = mask([8, 1, 1], &[]);
        assert!(matches!(lesion_recall(&comps(&empty), &comps(&g)), Err(Error::UndefinedMetric(_))));
    }

    #[test]
    fn f1_modes() {
        let g = mask([8, 1, 1], &[0, 3]);
        // Predicted components at 0, 3, 6: two hit, one false.
        let p = mask([8, 1, 1], &[0, 3, 6]);
        let (gc, pc) = (comps(&g), comps(&p));
        assert!((lesion_f1(&gc, &pc, F1Mode::PaperLiteral).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(lesion_f1(&gc, &gc, F1Mode::PaperLiteral).unwrap(), 1.0);
        assert_eq!(lesion_f1(&gc, &gc, F1Mode::Harmonic).unwrap(), 1.0);
        let empty = comps(&mask([8, 1, 1], &[]));
        assert!(lesion_f1(&gc, &empty, F1Mode::PaperLiteral).is_err());

        // rec = 2/3, prec = 2/3 → 2/3.
        let g3 = three_lesions();
        let p3 = mask([8, 1, 1], &[0, 3, 5]);
        let h = lesion_f1(&comps(&g3), &comps(&p3), F1Mode::Harmonic).unwrap();
        assert!((h - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn size_bins() {
        assert_eq!(size_histogram_of([5, 9]), SizeHistogram { small: 2, medium: 0, large: 0 });
        assert_eq!(size_histogram_of([10, 15, 20]), SizeHistogram { small: 0, medium: 3, large: 0 });
        assert_eq!(size_histogram_of([21, 100]), SizeHistogram { small: 0, medium: 0, large: 2 });
    }

    #[test]
    fn report_and_summary() {
        let g = three_lesions();
        let p = mask([8, 1, 1], &[0, 3, 6]);
        let r = MetricsReport::compute(&g, &p, EvalOptions::default()).unwrap();
        assert_eq!((r.n_g, r.n_p, r.n_f), (3, 2, 1));
        assert_eq!(r.sizes.total(), 3);
        assert_eq!(r.detected_sizes.total(), 2);
        let empty = MetricsReport::compute(&g, &mask([8, 1, 1], &[]), EvalOptions::default()).unwrap();
        assert_eq!((empty.lesion_recall, empty.lesion_f1), (0.0, 0.0));
        let s = MetricsSummary::from_reports(&[r.clone(), empty]).unwrap();
        assert_eq!(s.subjects, 2);
        assert!((s.lesion_recall - r.lesion_recall / 2.0).abs() < 1e-15);
        assert_eq!(s.n_g, 6);
    }
}

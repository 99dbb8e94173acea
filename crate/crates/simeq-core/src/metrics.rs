//! Evaluation metrics and the de-biased protocol.
//!
//! All metrics are set-semantic (permutation-invariant) and computed in the
//! dataset's canonical unit-scale frame. The protocol transforms each sample
//! by a drawn test transform, normalizes the partial input *by its own
//! statistics only*, runs the model, and maps the prediction back through
//! the recorded normalization and the inverse test transform before scoring.
//! Ground-truth pose or scale never reaches the model.

use crate::geometry::{
    apply_transform, sample_transform, self_normalize, GeometryError, PointCloud,
    TransformDistribution,
};
use crate::model::{Completer, ModelError};
use crate::nn_search::nearest_assignments;
use crate::toy::DatasetPair;
use crate::Real;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("empty dataset")]
    EmptyDataset,
}

/// Symmetric mean nearest-neighbor distance, halved: the raw (unscaled)
/// CD-l1. Reporting multiplies by 1000.
pub fn chamfer_l1<F: Real>(a: &PointCloud<F>, b: &PointCloud<F>) -> F {
    assert!(!a.is_empty() && !b.is_empty());
    let d_ab: F = nearest_assignments(&a.points, &b.points)
        .into_iter()
        .map(|(_, d)| d)
        .sum::<F>()
        / F::from_f64_lossy(a.len() as f64);
    let d_ba: F = nearest_assignments(&b.points, &a.points)
        .into_iter()
        .map(|(_, d)| d)
        .sum::<F>()
        / F::from_f64_lossy(b.len() as f64);
    (d_ab + d_ba) * F::from_f64_lossy(0.5)
}

/// F-score at a distance threshold: harmonic mean of precision (predicted
/// points near ground truth) and recall (ground truth covered).
pub fn f_score<F: Real>(pred: &PointCloud<F>, gt: &PointCloud<F>, threshold: F) -> F {
    assert!(!pred.is_empty() && !gt.is_empty());
    assert!(threshold > F::zero());
    let near = |from: &PointCloud<F>, to: &PointCloud<F>| -> F {
        let hits = nearest_assignments(&from.points, &to.points)
            .into_iter()
            .filter(|&(_, d)| d <= threshold)
            .count();
        F::from_f64_lossy(hits as f64) / F::from_f64_lossy(from.len() as f64)
    };
    let precision = near(pred, gt);
    let recall = near(gt, pred);
    if precision + recall == F::zero() {
        F::zero()
    } else {
        F::from_f64_lossy(2.0) * precision * recall / (precision + recall)
    }
}

/// Mean distance from each observed input point to its nearest predicted
/// point: how well the completion preserves what was seen.
pub fn fidelity<F: Real>(input_partial: &PointCloud<F>, pred: &PointCloud<F>) -> F {
    assert!(!input_partial.is_empty() && !pred.is_empty());
    nearest_assignments(&input_partial.points, &pred.points)
        .into_iter()
        .map(|(_, d)| d)
        .sum::<F>()
        / F::from_f64_lossy(input_partial.len() as f64)
}

/// Minimal matching distance: Chamfer distance to the best-matching
/// reference shape.
pub fn mmd<F: Real>(pred: &PointCloud<F>, reference_set: &[PointCloud<F>]) -> F {
    assert!(!reference_set.is_empty());
    reference_set
        .iter()
        .map(|r| chamfer_l1(pred, r))
        .fold(F::infinity(), F::min)
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub cd_l1_x1000: f64,
    pub f1_at_1pct: f64,
    pub fidelity: Option<f64>,
    pub mmd: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MetricsReport {
    pub cd_l1_x1000: f64,
    pub f1_at_1pct: f64,
    pub fidelity: Option<f64>,
    pub mmd: Option<f64>,
    pub per_sample: Vec<SampleMetrics>,
}

/// Protocol settings. Metrics are always computed in the common canonical
/// unit-scale frame; the F-score threshold is 1% of that unit scale.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct ProtocolConfig {
    pub train_group: TransformDistribution,
    pub test_group: TransformDistribution,
    pub fscore_threshold: f64,
    pub with_fidelity: bool,
}

impl ProtocolConfig {
    pub fn new(train_group: TransformDistribution, test_group: TransformDistribution) -> Self {
        Self {
            train_group,
            test_group,
            fscore_threshold: 0.01,
            with_fidelity: false,
        }
    }

    pub fn identity_eval(seed: u64) -> Self {
        Self::new(
            TransformDistribution::identity(seed),
            TransformDistribution::identity(seed),
        )
    }
}

/// Run the de-biased evaluation over `(partial, gt)` pairs given in the
/// canonical frame. Per sample: draw `g`, transform the partial, normalize
/// it by its own centroid and radius, complete, map the prediction back via
/// the recorded normalization and `g^{-1}`, and score against the untouched
/// ground truth.
pub fn run_protocol<F: Real, C: Completer<F>>(
    model: &C,
    dataset: &[DatasetPair<F>],
    cfg: &ProtocolConfig,
    mmd_refs: Option<&[PointCloud<F>]>,
) -> Result<MetricsReport, ProtocolError> {
    if dataset.is_empty() {
        return Err(ProtocolError::EmptyDataset);
    }
    let per_sample: Vec<SampleMetrics> = dataset
        .par_iter()
        .enumerate()
        .map(|(i, pair)| -> Result<SampleMetrics, ProtocolError> {
            let g = sample_transform::<F>(&cfg.test_group, i as u64);
            let moved = apply_transform(&g, &pair.partial);
            let (normalized, back) = self_normalize(&moved)?;
            let (_, dense) = model.complete(&normalized)?;
            let to_canonical = g.inverse().compose(&back);
            let pred = apply_transform(&to_canonical, &dense);
            let cd = chamfer_l1(&pred, &pair.gt).to_f64().unwrap();
            let f1 = f_score(&pred, &pair.gt, F::from_f64_lossy(cfg.fscore_threshold))
                .to_f64()
                .unwrap();
            let fid = cfg
                .with_fidelity
                .then(|| fidelity(&pair.partial, &pred).to_f64().unwrap());
            let sample_mmd = mmd_refs.map(|refs| mmd(&pred, refs).to_f64().unwrap());
            Ok(SampleMetrics {
                cd_l1_x1000: cd * 1000.0,
                f1_at_1pct: f1,
                fidelity: fid,
                mmd: sample_mmd,
            })
        })
        .collect::<Result<_, _>>()?;

    let n = per_sample.len() as f64;
    let mean_opt = |get: fn(&SampleMetrics) -> Option<f64>| -> Option<f64> {
        let vals: Vec<f64> = per_sample.iter().filter_map(get).collect();
        (vals.len() == per_sample.len()).then(|| vals.iter().sum::<f64>() / n)
    };
    Ok(MetricsReport {
        cd_l1_x1000: per_sample.iter().map(|s| s.cd_l1_x1000).sum::<f64>() / n,
        f1_at_1pct: per_sample.iter().map(|s| s.f1_at_1pct).sum::<f64>() / n,
        fidelity: mean_opt(|s| s.fidelity),
        mmd: mean_opt(|s| s.mmd),
        per_sample,
    })
}

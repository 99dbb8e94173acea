//! Empirical equivariance measurement: for sampled transforms `g`, compare
//! `f(g . x)` against `g . f(x)` and report relative errors, per stage and
//! end to end, plus the bias-magnitude sweep that quantifies approximate
//! equivariance.

use crate::geometry::{apply_transform, sample_transform, PointCloud, TransformDistribution};
use crate::model::{Completer, CompletionModel, ModelError};
use crate::tensor::Tensor;
use crate::Real;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

/// Floor in relative-error denominators.
pub const REL_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct ErrorStats {
    pub mean: f64,
    pub max: f64,
}

impl ErrorStats {
    fn from_samples(samples: &[f64]) -> Self {
        let n = samples.len().max(1) as f64;
        Self {
            mean: samples.iter().sum::<f64>() / n,
            max: samples.iter().copied().fold(0.0, f64::max),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct TrialRow {
    pub scale: f64,
    pub translation_norm: f64,
    pub error: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EquivarianceAuditReport {
    pub per_layer_error: Vec<(String, ErrorStats)>,
    pub end_to_end_error: ErrorStats,
    /// `(bias scale, mean end-to-end error)` pairs, empty without a sweep.
    pub bias_sweep: Vec<(f64, f64)>,
    pub trials: usize,
    pub seed: u64,
    pub per_trial: Vec<TrialRow>,
}

pub fn relative_feature_error<F: Real>(got: &Tensor<F>, expected: &Tensor<F>) -> f64 {
    got.relative_error(expected, F::from_f64_lossy(REL_FLOOR))
        .to_f64()
        .unwrap()
}

/// Audit any map from feature tensors to feature tensors (every trailing-3
/// tensor transforms channel-wise under the group action). `gen` supplies
/// the trial input; trials run in parallel and reduce in order.
pub fn audit_tensor_map<F, M, G>(
    map: M,
    gen: G,
    dist: &TransformDistribution,
    trials: usize,
) -> ErrorStats
where
    F: Real,
    M: Fn(&Tensor<F>) -> Tensor<F> + Sync,
    G: Fn(u64) -> Tensor<F> + Sync,
{
    let errs: Vec<f64> = (0..trials as u64)
        .into_par_iter()
        .map(|t| {
            let x = gen(t);
            let g = sample_transform::<F>(dist, t);
            let lhs = map(&g.apply_features(&x));
            let rhs = g.apply_features(&map(&x));
            relative_feature_error(&lhs, &rhs)
        })
        .collect();
    ErrorStats::from_samples(&errs)
}

fn concat_clouds<F: Real>(a: &PointCloud<F>, b: &PointCloud<F>) -> Tensor<F> {
    let mut pts = a.points.clone();
    pts.extend_from_slice(&b.points);
    PointCloud::new(pts).to_tensor()
}

/// End-to-end audit of any completer on one input cloud: relative error of
/// `complete(g . x)` against `g . complete(x)` over the concatenated coarse
/// and dense outputs.
pub fn audit_completer<F: Real>(
    model: &dyn Completer<F>,
    input: &PointCloud<F>,
    dist: &TransformDistribution,
    trials: usize,
) -> Result<(ErrorStats, Vec<TrialRow>), ModelError> {
    let (c0, d0) = model.complete(input)?;
    let rows: Vec<TrialRow> = (0..trials as u64)
        .into_par_iter()
        .map(|t| -> Result<TrialRow, ModelError> {
            let g = sample_transform::<F>(dist, t);
            let (c1, d1) = model.complete(&apply_transform(&g, input))?;
            let expected = concat_clouds(&apply_transform(&g, &c0), &apply_transform(&g, &d0));
            let got = concat_clouds(&c1, &d1);
            Ok(TrialRow {
                scale: g.scale.to_f64().unwrap(),
                translation_norm: g
                    .translation
                    .iter()
                    .map(|&x| {
                        let v = x.to_f64().unwrap();
                        v * v
                    })
                    .sum::<f64>()
                    .sqrt(),
                error: relative_feature_error(&got, &expected),
            })
        })
        .collect::<Result<_, _>>()?;
    let errs: Vec<f64> = rows.iter().map(|r| r.error).collect();
    Ok((ErrorStats::from_samples(&errs), rows))
}

/// Stage-by-stage audit of the equivariant model: every traced stage output
/// of the transformed run is compared with the transformed stage output of
/// the base run.
pub fn audit_model<F: Real>(
    model: &CompletionModel<F>,
    input: &PointCloud<F>,
    dist: &TransformDistribution,
    trials: usize,
) -> Result<EquivarianceAuditReport, ModelError> {
    let (c0, d0, trace0) = model.complete_traced(input, true)?;
    let per_trial: Vec<(Vec<f64>, TrialRow)> = (0..trials as u64)
        .into_par_iter()
        .map(|t| -> Result<(Vec<f64>, TrialRow), ModelError> {
            let g = sample_transform::<F>(dist, t);
            let (c1, d1, trace1) = model.complete_traced(&apply_transform(&g, input), true)?;
            let stage_errs = trace0
                .iter()
                .zip(&trace1)
                .map(|((_, base), (_, moved))| {
                    relative_feature_error(moved, &g.apply_features(base))
                })
                .collect();
            let expected = concat_clouds(&apply_transform(&g, &c0), &apply_transform(&g, &d0));
            let got = concat_clouds(&c1, &d1);
            Ok((
                stage_errs,
                TrialRow {
                    scale: g.scale.to_f64().unwrap(),
                    translation_norm: g
                        .translation
                        .iter()
                        .map(|&x| {
                            let v = x.to_f64().unwrap();
                            v * v
                        })
                        .sum::<f64>()
                        .sqrt(),
                    error: relative_feature_error(&got, &expected),
                },
            ))
        })
        .collect::<Result<_, _>>()?;

    let stage_names: Vec<String> = trace0.iter().map(|(n, _)| n.clone()).collect();
    let per_layer_error = stage_names
        .iter()
        .enumerate()
        .map(|(si, name)| {
            let errs: Vec<f64> = per_trial.iter().map(|(se, _)| se[si]).collect();
            (name.clone(), ErrorStats::from_samples(&errs))
        })
        .collect();
    let rows: Vec<TrialRow> = per_trial.iter().map(|(_, r)| *r).collect();
    let errs: Vec<f64> = rows.iter().map(|r| r.error).collect();
    Ok(EquivarianceAuditReport {
        per_layer_error,
        end_to_end_error: ErrorStats::from_samples(&errs),
        bias_sweep: Vec::new(),
        trials,
        seed: dist.seed,
        per_trial: rows,
    })
}

/// Measure mean end-to-end error at each bias scale (same transform seeds
/// throughout). The model's bias scale is left at the last entry; pass 1.0
/// last or rescale afterwards to restore it.
pub fn bias_sweep<F: Real>(
    model: &mut CompletionModel<F>,
    scales: &[f64],
    input: &PointCloud<F>,
    dist: &TransformDistribution,
    trials: usize,
) -> Result<Vec<(f64, f64)>, ModelError> {
    let mut curve = Vec::with_capacity(scales.len());
    for &scale in scales {
        model.set_bias_scale(scale);
        let (stats, _) = audit_completer(model, input, dist, trials)?;
        curve.push((scale, stats.mean));
    }
    Ok(curve)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_cloud(n: usize, seed: u64) -> PointCloud<f64> {
        let mut r = ChaCha12Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)])
                .collect(),
        )
    }

    #[test]
    fn identity_distribution_audits_to_zero() {
        let model = CompletionModel::<f64>::new(ModelConfig::tiny()).unwrap();
        let input = random_cloud(ModelConfig::tiny().n_in, 1);
        let dist = TransformDistribution::identity(2);
        let (stats, rows) = audit_completer(&model, &input, &dist, 4).unwrap();
        assert_eq!(stats.max, 0.0);
        assert!(rows.iter().all(|r| r.error == 0.0));
    }

    #[test]
    fn model_audit_reports_all_stages() {
        let cfg = ModelConfig::tiny();
        let model = CompletionModel::<f64>::new(cfg.clone()).unwrap();
        let input = random_cloud(cfg.n_in, 3);
        let dist = TransformDistribution::sim3(4);
        let report = audit_model(&model, &input, &dist, 5).unwrap();
        let expected_stages = 1 + cfg.encoder_depth + 1 + cfg.decoder_depth;
        assert_eq!(report.per_layer_error.len(), expected_stages);
        assert!(report.end_to_end_error.max < 1e-6);
        for (name, stats) in &report.per_layer_error {
            assert!(stats.max < 1e-6, "stage {name} error {stats:?}");
        }
    }

    #[test]
    fn bias_sweep_is_monotone_toward_zero() {
        let cfg = ModelConfig::tiny().with_bias_norm(1e-2);
        let mut model = CompletionModel::<f64>::new(cfg.clone()).unwrap();
        let input = random_cloud(cfg.n_in, 5);
        let dist = TransformDistribution::sim3(6);
        let curve = bias_sweep(&mut model, &[1.0, 0.1, 0.01, 0.0], &input, &dist, 5).unwrap();
        for pair in curve.windows(2) {
            assert!(
                pair[0].1 >= pair[1].1 * 0.999,
                "sweep must not increase: {curve:?}"
            );
        }
        assert!(curve.last().unwrap().1 < 1e-5, "zero bias restores equivariance: {curve:?}");
    }
}

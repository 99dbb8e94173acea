//! Training: two-term Chamfer loss over the coarse anchors and the dense
//! completion, Adam with decoupled weight decay and a step-decay schedule,
//! and a deterministic epoch loop.
//!
//! Each sample is trained in its own self-normalized frame: the partial is
//! centered and scaled to the unit sphere by its own statistics, the ground
//! truth is mapped into that frame through the inverse normalization, and
//! the model never sees ground-truth pose or scale. Gradient accumulation
//! over a batch is parallel per sample with an ordered reduction, so results
//! are bitwise reproducible at any thread count.

use crate::geometry::{self_normalize, PointCloud};
use crate::metrics::{run_protocol, ProtocolConfig, ProtocolError};
use crate::model::{AnyModel, Completer, CompletionModel, ModelError};
use crate::control::ScalarControlModel;
use crate::extract::farthest_point_sample;
use crate::params::ParamStore;
use crate::tape::{Add, GatherRows, GradMap, MeanAll, RowNorms, Scale, Session, Sub, Var};
use crate::tensor::Tensor;
use crate::toy::DatasetPair;
use crate::Real;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged (non-finite) at epoch {epoch}")]
    Diverged { epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("trainer state does not match the model's parameter layout")]
    StateMismatch,
    #[error("autodiff: {0}")]
    Tape(#[from] crate::tape::TapeError),
}

/// Optimizer hyperparameters. Defaults: Adam at 1e-4 with weight decay
/// 5e-4 and a 0.9 learning-rate decay every 15 epochs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-4,
            weight_decay: 5e-4,
            lr_decay_factor: 0.9,
            lr_decay_every: 15,
            epochs: 30,
            batch_size: 8,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        assert!(self.learning_rate > 0.0 || self.learning_rate == 0.0);
        assert!(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0);
        Ok(())
    }

    /// Step decay: `lr0 * factor^(epoch / every)` with integer division.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.learning_rate * self.lr_decay_factor.powi((epoch / self.lr_decay_every) as i32)
    }
}

/// Chamfer-l1 between a predicted var `[N,3]` and a fixed target `[K,3]`,
/// recorded on the tape. Nearest-neighbor assignments are computed from the
/// current values and held fixed, the standard local linearization.
pub fn chamfer_on_tape<F: Real>(s: &mut Session<F>, pred: Var, target: &Tensor<F>) -> Var {
    let target_var = s.leaf(target.clone());
    let pred_pts = tensor_points(s.value(pred));
    let gt_pts = tensor_points(target);

    let fwd: Vec<usize> = crate::nn_search::nearest_assignments(&pred_pts, &gt_pts)
        .into_iter()
        .map(|(i, _)| i)
        .collect();
    let rev: Vec<usize> = crate::nn_search::nearest_assignments(&gt_pts, &pred_pts)
        .into_iter()
        .map(|(i, _)| i)
        .collect();

    let matched_gt = s.apply(GatherRows(fwd), &[target_var]);
    let diff_ab = s.apply(Sub, &[pred, matched_gt]);
    let d_ab = s.apply(RowNorms, &[diff_ab]);
    let mean_ab = s.apply(MeanAll, &[d_ab]);

    let matched_pred = s.apply(GatherRows(rev), &[pred]);
    let diff_ba = s.apply(Sub, &[target_var, matched_pred]);
    let d_ba = s.apply(RowNorms, &[diff_ba]);
    let mean_ba = s.apply(MeanAll, &[d_ba]);

    let sum = s.apply(Add, &[mean_ab, mean_ba]);
    s.apply(Scale(F::from_f64_lossy(0.5)), &[sum])
}

fn tensor_points<F: Real>(t: &Tensor<F>) -> Vec<[F; 3]> {
    (0..t.shape()[0])
        .map(|i| [t.data()[i * 3], t.data()[i * 3 + 1], t.data()[i * 3 + 2]])
        .collect()
}

/// The two-term objective on plain clouds: Chamfer of the coarse anchors
/// against a farthest-point subsample of the ground truth, plus Chamfer of
/// the dense output against the full ground truth.
pub fn loss<F: Real>(coarse: &PointCloud<F>, dense: &PointCloud<F>, gt: &PointCloud<F>) -> F {
    let sub = subsample_fps(gt, coarse.len());
    crate::metrics::chamfer_l1(coarse, &sub) + crate::metrics::chamfer_l1(dense, gt)
}

fn subsample_fps<F: Real>(pc: &PointCloud<F>, count: usize) -> PointCloud<F> {
    let idx = farthest_point_sample(&pc.points, count.min(pc.len()), 0);
    PointCloud::new(idx.into_iter().map(|i| pc.points[i]).collect())
}

/// Model families the trainer can drive: anything that exposes its parameter
/// store and records `(coarse, dense)` output vars on a session.
pub trait Trainable<F: Real>: Completer<F> {
    fn store(&self) -> &ParamStore<F>;
    fn store_mut(&mut self) -> &mut ParamStore<F>;
    fn forward_for_loss(&self, s: &mut Session<F>, pc: &PointCloud<F>) -> Result<(Var, Var), ModelError>;
    fn coarse_count(&self) -> usize;
}

impl<F: Real> Trainable<F> for CompletionModel<F> {
    fn store(&self) -> &ParamStore<F> {
        &self.params
    }

    fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    fn forward_for_loss(&self, s: &mut Session<F>, pc: &PointCloud<F>) -> Result<(Var, Var), ModelError> {
        let fwd = self.forward_vars(s, pc)?;
        Ok((fwd.coarse, fwd.dense))
    }

    fn coarse_count(&self) -> usize {
        self.cfg.coarse_count()
    }
}

impl<F: Real> Trainable<F> for ScalarControlModel<F> {
    fn store(&self) -> &ParamStore<F> {
        &self.params
    }

    fn store_mut(&mut self) -> &mut ParamStore<F> {
        &mut self.params
    }

    fn forward_for_loss(&self, s: &mut Session<F>, pc: &PointCloud<F>) -> Result<(Var, Var), ModelError> {
        let fwd = self.forward_vars(s, pc)?;
        Ok((fwd.coarse, fwd.dense))
    }

    fn coarse_count(&self) -> usize {
        self.cfg.coarse_count()
    }
}

impl<F: Real> Trainable<F> for AnyModel<F> {
    fn store(&self) -> &ParamStore<F> {
        self.params()
    }

    fn store_mut(&mut self) -> &mut ParamStore<F> {
        self.params_mut()
    }

    fn forward_for_loss(&self, s: &mut Session<F>, pc: &PointCloud<F>) -> Result<(Var, Var), ModelError> {
        match self {
            AnyModel::Equivariant(m) => m.forward_for_loss(s, pc),
            AnyModel::Control(m) => m.forward_for_loss(s, pc),
        }
    }

    fn coarse_count(&self) -> usize {
        self.config().coarse_count()
    }
}

/// Adam with decoupled weight decay. Decay touches only parameters flagged
/// for it (weight matrices), and is applied directly to the value after the
/// adaptive step.
pub struct Adam<F> {
    beta1: F,
    beta2: F,
    eps: F,
    t: u64,
    m: Vec<Tensor<F>>,
    v: Vec<Tensor<F>>,
}

impl<F: Real> Adam<F> {
    pub fn new(params: &ParamStore<F>) -> Self {
        let m = params.ids().map(|id| Tensor::zeros(params.shape(id).to_vec())).collect();
        let v = params.ids().map(|id| Tensor::zeros(params.shape(id).to_vec())).collect();
        Self {
            beta1: F::from_f64_lossy(0.9),
            beta2: F::from_f64_lossy(0.999),
            eps: F::from_f64_lossy(1e-8),
            t: 0,
            m,
            v,
        }
    }

    pub fn step(&mut self, params: &mut ParamStore<F>, grads: &GradMap<F>, lr: F, weight_decay: F) {
        self.t += 1;
        let bc1 = F::one() - self.beta1.powi(self.t as i32);
        let bc2 = F::one() - self.beta2.powi(self.t as i32);
        for id in params.ids().collect::<Vec<_>>() {
            if !params.is_trainable(id) {
                continue;
            }
            let g = grads.get(id, params.shape(id));
            let idx = id.index();
            let decay = if params.wants_decay(id) { weight_decay } else { F::zero() };
            let value = params.value_mut(id);
            for k in 0..value.numel() {
                let gk = g.data()[k];
                let m = &mut self.m[idx].data_mut()[k];
                *m = self.beta1 * *m + (F::one() - self.beta1) * gk;
                let v = &mut self.v[idx].data_mut()[k];
                *v = self.beta2 * *v + (F::one() - self.beta2) * gk * gk;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                let p = &mut value.data_mut()[k];
                *p = *p - lr * (m_hat / (v_hat.sqrt() + self.eps)) - lr * decay * *p;
            }
        }
    }
}

/// Optimizer/trainer snapshot for resumable runs: Adam moments flattened in
/// parameter order (all first moments, then all second moments).
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainerState {
    pub epoch: usize,
    pub adam_t: u64,
    pub moments: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_cd_l1_x1000: f64,
    pub wall_seconds: f64,
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
}

struct PreparedSample<F: Real> {
    partial_normalized: PointCloud<F>,
    gt_tensor: Tensor<F>,
    gt_coarse_tensor: Tensor<F>,
}

/// Epoch-by-epoch training driver; callers interleave checkpointing between
/// epochs.
pub struct Trainer<F: Real> {
    pub cfg: TrainConfig,
    adam: Adam<F>,
    samples: Vec<PreparedSample<F>>,
    val: Vec<DatasetPair<F>>,
    epoch: usize,
}

impl<F: Real> Trainer<F> {
    pub fn new<M: Trainable<F>>(
        model: &M,
        train_pairs: &[DatasetPair<F>],
        val_pairs: &[DatasetPair<F>],
        cfg: TrainConfig,
    ) -> Result<Self, TrainError> {
        if train_pairs.is_empty() || val_pairs.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        cfg.validate()?;
        let coarse_count = model.coarse_count();
        let samples = train_pairs
            .iter()
            .map(|pair| -> Result<PreparedSample<F>, TrainError> {
                let (partial_normalized, back) = self_normalize(&pair.partial)
                    .map_err(|e| TrainError::Protocol(ProtocolError::Geometry(e)))?;
                let inv = back.inverse();
                let gt_n = crate::geometry::apply_transform(&inv, &pair.gt);
                let gt_coarse = subsample_fps(&gt_n, coarse_count);
                Ok(PreparedSample {
                    partial_normalized,
                    gt_tensor: gt_n.to_tensor(),
                    gt_coarse_tensor: gt_coarse.to_tensor(),
                })
            })
            .collect::<Result<_, _>>()?;
        Ok(Self {
            adam: Adam::new(model.store()),
            cfg,
            samples,
            val: val_pairs.to_vec(),
            epoch: 0,
        })
    }

    pub fn next_epoch(&self) -> usize {
        self.epoch
    }

    pub fn done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn state(&self) -> TrainerState {
        let mut moments = Vec::new();
        for m in &self.adam.m {
            moments.extend(m.data().iter().map(|v| v.to_f64().unwrap()));
        }
        for v in &self.adam.v {
            moments.extend(v.data().iter().map(|x| x.to_f64().unwrap()));
        }
        TrainerState {
            epoch: self.epoch,
            adam_t: self.adam.t,
            moments,
        }
    }

    /// Restore a snapshot taken by [`Self::state`]; the parameter layout
    /// must match (same model architecture).
    pub fn restore(&mut self, state: &TrainerState) -> Result<(), TrainError> {
        let total: usize = self.adam.m.iter().map(|t| t.numel()).sum::<usize>() * 2;
        if state.moments.len() != total {
            return Err(TrainError::StateMismatch);
        }
        let mut it = state.moments.iter();
        for m in self.adam.m.iter_mut() {
            for slot in m.data_mut() {
                *slot = F::from_f64_lossy(*it.next().unwrap());
            }
        }
        for v in self.adam.v.iter_mut() {
            for slot in v.data_mut() {
                *slot = F::from_f64_lossy(*it.next().unwrap());
            }
        }
        self.adam.t = state.adam_t;
        self.epoch = state.epoch;
        Ok(())
    }

    /// Run one epoch of batched updates plus a validation pass under the
    /// identity test group.
    pub fn epoch<M: Trainable<F>>(&mut self, model: &mut M) -> Result<EpochRecord, TrainError> {
        let start = std::time::Instant::now();
        let epoch = self.epoch;
        let lr = F::from_f64_lossy(self.cfg.lr_at(epoch));
        let wd = F::from_f64_lossy(self.cfg.weight_decay);

        let mut order: Vec<usize> = (0..self.samples.len()).collect();
        let mut rng = ChaCha12Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut rng);

        let mut loss_sum = F::zero();
        for batch in order.chunks(self.cfg.batch_size.max(1)) {
            let results: Vec<(F, GradMap<F>)> = batch
                .par_iter()
                .map(|&i| sample_loss_grads(model, &self.samples[i]))
                .collect::<Result<_, _>>()?;
            let mut total = GradMap::empty();
            let mut batch_loss = F::zero();
            for (l, g) in &results {
                batch_loss += *l;
                total.add_from(g);
            }
            total.scale(F::one() / F::from_f64_lossy(batch.len() as f64));
            loss_sum += batch_loss;
            if !batch_loss.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            self.adam.step(model.store_mut(), &total, lr, wd);
        }
        if model.store().any_non_finite() {
            return Err(TrainError::Diverged { epoch });
        }
        let train_loss = (loss_sum / F::from_f64_lossy(self.samples.len() as f64))
            .to_f64()
            .unwrap();

        let val = run_protocol(model, &self.val, &ProtocolConfig::identity_eval(self.cfg.seed), None)
            .map_err(|e| match e {
                // an overflowing forward on the validation set is divergence too
                ProtocolError::Model(ModelError::NonFinite) => TrainError::Diverged { epoch },
                other => TrainError::Protocol(other),
            })?;
        self.epoch += 1;
        Ok(EpochRecord {
            epoch,
            lr: lr.to_f64().unwrap(),
            train_loss,
            val_cd_l1_x1000: val.cd_l1_x1000,
            wall_seconds: start.elapsed().as_secs_f64(),
        })
    }
}

fn sample_loss_grads<F: Real, M: Trainable<F>>(
    model: &M,
    sample: &PreparedSample<F>,
) -> Result<(F, GradMap<F>), TrainError> {
    let mut s = Session::new(model.store());
    let (coarse, dense) = model.forward_for_loss(&mut s, &sample.partial_normalized)?;
    let l_coarse = chamfer_on_tape(&mut s, coarse, &sample.gt_coarse_tensor);
    let l_dense = chamfer_on_tape(&mut s, dense, &sample.gt_tensor);
    let total = s.apply(Add, &[l_coarse, l_dense]);
    let loss_value = s.value(total).item();
    let grads = s.backward(total)?;
    Ok((loss_value, grads))
}

/// Convenience loop over [`Trainer::epoch`].
pub fn train<F: Real, M: Trainable<F>>(
    model: &mut M,
    train_pairs: &[DatasetPair<F>],
    val_pairs: &[DatasetPair<F>],
    cfg: TrainConfig,
) -> Result<TrainReport, TrainError> {
    let mut trainer = Trainer::new(model, train_pairs, val_pairs, cfg)?;
    let mut report = TrainReport::default();
    while !trainer.done() {
        report.epochs.push(trainer.epoch(model)?);
    }
    Ok(report)
}

//! Vector-neuron primitives.
//!
//! Features are `D x 3` arrays whose rows transform like points under
//! SIM(3). The linear layer constrains every weight row to sum to one (so
//! translation passes through unchanged); the nonlinearity removes the
//! negative projection of a mapped feature onto a learned direction, both
//! centered on a learned origin; max pooling selects, per channel, the token
//! whose centered vector aligns best with its centered direction. With
//! biases off each layer commutes exactly with the group action; an optional
//! norm-controlled bias trades a bounded equivariance error for training
//! headroom.

use crate::params::{ParamId, ParamStore};
use crate::tape::{
    self, Add, AddBroadcastFeat, FrobDotTokens, GuardedRatio, MatVecFeat, MulTokens, NegPart,
    ProjectRowsAffine, Scale, Session, Sub, UnitFrobScale, Var,
};
use crate::tensor::Tensor;
use crate::Real;
use rand::Rng;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

/// Norm guard: directions with norm below this are treated as degenerate and
/// the pass-through branch is taken. No division by a smaller norm anywhere.
pub const NORM_GUARD: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum VnError {
    #[error("channel width mismatch: layer expects {expected}, feature has {got}")]
    DimMismatch { expected: usize, got: usize },
}

/// A single `D x 3` vector feature.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorFeature<F> {
    channels: Tensor<F>,
}

impl<F: Real> VectorFeature<F> {
    pub fn new(channels: Tensor<F>) -> Self {
        assert_eq!(channels.shape().len(), 2);
        assert_eq!(channels.shape()[1], 3);
        assert!(channels.shape()[0] >= 1);
        Self { channels }
    }

    pub fn width(&self) -> usize {
        self.channels.shape()[0]
    }

    pub fn channels(&self) -> &Tensor<F> {
        &self.channels
    }

    /// As a one-token set `[1,D,3]`.
    pub fn to_tokens(&self) -> Tensor<F> {
        let d = self.width();
        self.channels.clone().reshaped(vec![1, d, 3])
    }

    pub fn from_tokens(t: &Tensor<F>) -> Self {
        assert_eq!(t.shape()[0], 1);
        let d = t.shape()[1];
        Self::new(t.clone().reshaped(vec![d, 3]))
    }
}

/// `M` tokens of equal width, stored `[M,D,3]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VectorFeatureSet<F> {
    tokens: Tensor<F>,
}

impl<F: Real> VectorFeatureSet<F> {
    pub fn new(tokens: Tensor<F>) -> Self {
        assert_eq!(tokens.shape().len(), 3);
        assert_eq!(tokens.shape()[2], 3);
        assert!(tokens.shape()[0] >= 1 && tokens.shape()[1] >= 1);
        Self { tokens }
    }

    pub fn from_features(features: &[VectorFeature<F>]) -> Self {
        assert!(!features.is_empty());
        let d = features[0].width();
        let mut data = Vec::with_capacity(features.len() * d * 3);
        for f in features {
            assert_eq!(f.width(), d, "uniform channel count required");
            data.extend_from_slice(f.channels().data());
        }
        Self::new(Tensor::new(vec![features.len(), d, 3], data))
    }

    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn width(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn tokens(&self) -> &Tensor<F> {
        &self.tokens
    }

    pub fn token(&self, i: usize) -> VectorFeature<F> {
        let d = self.width();
        let data = self.tokens.data()[i * d * 3..(i + 1) * d * 3].to_vec();
        VectorFeature::new(Tensor::new(vec![d, 3], data))
    }
}

/// Uniform random tokens in `[-1, 1]`, a test and audit utility.
pub fn random_tokens<F: Real>(m: usize, d: usize, rng: &mut ChaCha12Rng) -> Tensor<F> {
    let data = (0..m * d * 3)
        .map(|_| F::from_f64_lossy(rng.gen_range(-1.0..1.0)))
        .collect();
    Tensor::new(vec![m, d, 3], data)
}

/// Row-sum-to-one projection of an unconstrained matrix; the public entry
/// point for the reparameterization used throughout.
pub fn project_rows_to_affine<F: Real>(weights: &Tensor<F>) -> Tensor<F> {
    tape::project_rows_affine_values(weights)
}

/// The norm-controlled bias of a VN linear layer: a learned direction,
/// normalized to unit Frobenius norm and scaled by a fixed magnitude.
#[derive(Debug)]
pub struct VnBias<F> {
    pub direction: ParamId,
    base_norm: F,
    norm: F,
}

impl<F: Real> VnBias<F> {
    pub fn norm(&self) -> F {
        self.norm
    }

    pub fn set_scale(&mut self, factor: F) {
        self.norm = self.base_norm * factor;
    }
}

/// Linear map over the channel dimension, shared across the three spatial
/// columns. Stores an unconstrained matrix and projects rows onto the
/// sum-to-one affine set in every forward pass, so no optimizer step can
/// violate the constraint.
#[derive(Debug)]
pub struct VnLinearLayer<F> {
    pub in_dim: usize,
    pub out_dim: usize,
    free_weights: ParamId,
    bias: Option<VnBias<F>>,
}

impl<F: Real> VnLinearLayer<F> {
    pub fn new(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias_norm: f64,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let a = 1.0 / (in_dim as f64).sqrt();
        let w = Tensor::new(
            vec![out_dim, in_dim],
            (0..out_dim * in_dim)
                .map(|_| F::from_f64_lossy(rng.gen_range(-a..a)))
                .collect(),
        );
        let free_weights = store.register(&format!("{name}.w"), w, true);
        let bias = if bias_norm > 0.0 {
            let dir = Tensor::new(
                vec![out_dim, 3],
                (0..out_dim * 3)
                    .map(|_| F::from_f64_lossy(rng.gen_range(-0.5..0.5)))
                    .collect(),
            );
            Some(VnBias {
                direction: store.register(&format!("{name}.bias_dir"), dir, false),
                base_norm: F::from_f64_lossy(bias_norm),
                norm: F::from_f64_lossy(bias_norm),
            })
        } else {
            None
        };
        Self {
            in_dim,
            out_dim,
            free_weights,
            bias,
        }
    }

    /// The constrained weight matrix currently in effect.
    pub fn effective_weights(&self, store: &ParamStore<F>) -> Tensor<F> {
        project_rows_to_affine(store.value(self.free_weights))
    }

    /// Overwrite the unconstrained matrix; rows that already sum to one pass
    /// through the projection unchanged, which is how tests pin exact maps.
    pub fn set_free_weights(&self, store: &mut ParamStore<F>, w: Tensor<F>) {
        assert_eq!(w.shape(), &[self.out_dim, self.in_dim]);
        *store.value_mut(self.free_weights) = w;
    }

    pub fn bias_mut(&mut self) -> Option<&mut VnBias<F>> {
        self.bias.as_mut()
    }

    pub fn bias_norm(&self) -> F {
        self.bias.as_ref().map(|b| b.norm).unwrap_or_else(F::zero)
    }

    pub fn check_width(&self, got: usize) -> Result<(), VnError> {
        if got != self.in_dim {
            return Err(VnError::DimMismatch {
                expected: self.in_dim,
                got,
            });
        }
        Ok(())
    }

    pub fn forward(&self, s: &mut Session<F>, x: Var) -> Var {
        debug_assert_eq!(s.value(x).shape()[1], self.in_dim);
        let free = s.param(self.free_weights);
        let w = s.apply(ProjectRowsAffine, &[free]);
        let y = s.apply(MatVecFeat, &[w, x]);
        match &self.bias {
            Some(b) if b.norm != F::zero() => {
                let dir = s.param(b.direction);
                let scaled = s.apply(UnitFrobScale(b.norm), &[dir]);
                s.apply(AddBroadcastFeat, &[y, scaled])
            }
            _ => y,
        }
    }
}

/// VN-ReLU / VN-LeakyReLU: three linear maps produce a feature `F`, a
/// direction `B` and an origin `O`; the output keeps `F` where the centered
/// feature and direction align, otherwise subtracts the projection of
/// `F - O` onto `B - O`. `leaky_alpha` blends the input back in.
#[derive(Debug)]
pub struct VnNonlinearLayer<F> {
    pub feature_map: VnLinearLayer<F>,
    pub direction_map: VnLinearLayer<F>,
    pub origin_map: VnLinearLayer<F>,
    pub leaky_alpha: f64,
}

impl<F: Real> VnNonlinearLayer<F> {
    pub fn new(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        leaky_alpha: f64,
        bias_norm: f64,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        assert!((0.0..1.0).contains(&leaky_alpha));
        assert!(
            leaky_alpha == 0.0 || in_dim == out_dim,
            "leaky blending needs matching widths"
        );
        Self {
            feature_map: VnLinearLayer::new(store, &format!("{name}.f"), in_dim, out_dim, bias_norm, rng),
            direction_map: VnLinearLayer::new(store, &format!("{name}.b"), in_dim, out_dim, bias_norm, rng),
            origin_map: VnLinearLayer::new(store, &format!("{name}.o"), in_dim, out_dim, bias_norm, rng),
            leaky_alpha,
        }
    }

    pub fn forward(&self, s: &mut Session<F>, x: Var) -> Var {
        let f = self.feature_map.forward(s, x);
        let b = self.direction_map.forward(s, x);
        let o = self.origin_map.forward(s, x);
        let f_o = s.apply(Sub, &[f, o]);
        let b_o = s.apply(Sub, &[b, o]);
        let dot = s.apply(FrobDotTokens, &[f_o, b_o]);
        let den = s.apply(FrobDotTokens, &[b_o, b_o]);
        let neg = s.apply(NegPart, &[dot]);
        let coef = s.apply(GuardedRatio(F::from_f64_lossy(NORM_GUARD)), &[neg, den]);
        let proj = s.apply(MulTokens, &[b_o, coef]);
        let relu = s.apply(Sub, &[f, proj]);
        if self.leaky_alpha == 0.0 {
            relu
        } else {
            let alpha = F::from_f64_lossy(self.leaky_alpha);
            let keep = s.apply(Scale(alpha), &[x]);
            let pass = s.apply(Scale(F::one() - alpha), &[relu]);
            s.apply(Add, &[keep, pass])
        }
    }
}

/// VN-Max: per channel, pick the token whose centered vector has the largest
/// inner product with its centered direction; ties go to the lowest index.
#[derive(Debug)]
pub struct VnMaxLayer<F> {
    pub direction_map: VnLinearLayer<F>,
    pub origin_map: VnLinearLayer<F>,
}

impl<F: Real> VnMaxLayer<F> {
    pub fn new(store: &mut ParamStore<F>, name: &str, dim: usize, bias_norm: f64, rng: &mut ChaCha12Rng) -> Self {
        Self {
            direction_map: VnLinearLayer::new(store, &format!("{name}.b"), dim, dim, bias_norm, rng),
            origin_map: VnLinearLayer::new(store, &format!("{name}.o"), dim, dim, bias_norm, rng),
        }
    }

    /// Pool consecutive groups of `group` tokens: `[G*group,D,3] -> [G,D,3]`.
    /// Selection indices are recorded as constants; gradient flows through
    /// the gathered values only.
    pub fn forward_grouped(&self, s: &mut Session<F>, x: Var, group: usize) -> Var {
        let b = self.direction_map.forward(s, x);
        let o = self.origin_map.forward(s, x);
        let b_o = s.apply(Sub, &[b, o]);
        let v_o = s.apply(Sub, &[x, o]);
        let idx = argmax_alignment(s.value(v_o), s.value(b_o), group);
        s.apply(tape::SelectChannelGroups { group, idx }, &[x])
    }

    /// Pool an entire token set into one feature: `[M,D,3] -> [1,D,3]`.
    pub fn forward_set(&self, s: &mut Session<F>, x: Var) -> Var {
        let m = s.value(x).shape()[0];
        self.forward_grouped(s, x, m)
    }
}

/// Per-(group, channel) argmax of `<v_o[m,d], b_o[m,d]>` within each group.
fn argmax_alignment<F: Real>(v_o: &Tensor<F>, b_o: &Tensor<F>, group: usize) -> Vec<usize> {
    let (m, d) = (v_o.shape()[0], v_o.shape()[1]);
    assert_eq!(m % group, 0);
    let groups = m / group;
    let mut idx = vec![0usize; groups * d];
    for gi in 0..groups {
        for di in 0..d {
            let mut best = F::neg_infinity();
            let mut best_i = 0usize;
            for local in 0..group {
                let t = (gi * group + local) * d * 3 + di * 3;
                let score = v_o.data()[t] * b_o.data()[t]
                    + v_o.data()[t + 1] * b_o.data()[t + 1]
                    + v_o.data()[t + 2] * b_o.data()[t + 2];
                if score > best {
                    best = score;
                    best_i = local;
                }
            }
            idx[gi * d + di] = best_i;
        }
    }
    idx
}

// --- one-shot wrappers over throwaway sessions ----------------------------

pub fn vn_linear_forward<F: Real>(
    layer: &VnLinearLayer<F>,
    store: &ParamStore<F>,
    v: &VectorFeature<F>,
) -> Result<VectorFeature<F>, VnError> {
    layer.check_width(v.width())?;
    let mut s = Session::new(store);
    let x = s.leaf(v.to_tokens());
    let y = layer.forward(&mut s, x);
    Ok(VectorFeature::from_tokens(s.value(y)))
}

pub fn vn_relu_forward<F: Real>(
    layer: &VnNonlinearLayer<F>,
    store: &ParamStore<F>,
    v: &VectorFeature<F>,
) -> Result<VectorFeature<F>, VnError> {
    layer.feature_map.check_width(v.width())?;
    let mut s = Session::new(store);
    let x = s.leaf(v.to_tokens());
    let y = layer.forward(&mut s, x);
    Ok(VectorFeature::from_tokens(s.value(y)))
}

pub fn vn_max_forward<F: Real>(
    layer: &VnMaxLayer<F>,
    store: &ParamStore<F>,
    vs: &VectorFeatureSet<F>,
) -> Result<VectorFeature<F>, VnError> {
    layer.direction_map.check_width(vs.width())?;
    let mut s = Session::new(store);
    let x = s.leaf(vs.tokens().clone());
    let y = layer.forward_set(&mut s, x);
    Ok(VectorFeature::from_tokens(s.value(y)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_transform, TransformDistribution};
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    #[test]
    fn identity_weights_pass_through() {
        let mut store = ParamStore::<f64>::new();
        let layer = VnLinearLayer::new(&mut store, "lin", 3, 3, 0.0, &mut rng(0));
        let eye = Tensor::from_f64s(vec![3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        layer.set_free_weights(&mut store, eye);
        let v = VectorFeature::new(Tensor::from_f64s(
            vec![3, 3],
            &[1.0, 2.0, 3.0, -1.0, 0.5, 0.0, 4.0, 4.0, 4.0],
        ));
        let out = vn_linear_forward(&layer, &store, &v).unwrap();
        assert_eq!(out.channels(), v.channels());
    }

    #[test]
    fn averaging_row_forced_example() {
        // weights [[0.5, 0.5]] on [(1,0,0),(3,0,0)] -> [(2,0,0)]
        let mut store = ParamStore::<f64>::new();
        let layer = VnLinearLayer::new(&mut store, "lin", 2, 1, 0.0, &mut rng(0));
        layer.set_free_weights(&mut store, Tensor::from_f64s(vec![1, 2], &[0.5, 0.5]));
        let v = VectorFeature::new(Tensor::from_f64s(vec![2, 3], &[1.0, 0.0, 0.0, 3.0, 0.0, 0.0]));
        let out = vn_linear_forward(&layer, &store, &v).unwrap();
        assert_eq!(out.channels().data(), &[2.0, 0.0, 0.0]);
    }

    #[test]
    fn width_mismatch_reported_with_both_widths() {
        let mut store = ParamStore::<f64>::new();
        let layer = VnLinearLayer::new(&mut store, "lin", 4, 2, 0.0, &mut rng(0));
        let v = VectorFeature::new(Tensor::zeros(vec![3, 3]));
        match vn_linear_forward(&layer, &store, &v) {
            Err(VnError::DimMismatch { expected: 4, got: 3 }) => {}
            other => panic!("expected dim mismatch, got {other:?}"),
        }
    }

    #[test]
    fn linear_is_equivariant() {
        let mut store = ParamStore::<f64>::new();
        let layer = VnLinearLayer::new(&mut store, "lin", 5, 3, 0.0, &mut rng(1));
        let dist = TransformDistribution::sim3(9).with_scale_range(0.1, 10.0).with_translation_range(10.0);
        let mut r = rng(2);
        for trial in 0..200 {
            let v = VectorFeature::new(random_tokens(1, 5, &mut r).reshaped(vec![5, 3]));
            let g = sample_transform::<f64>(&dist, trial);
            let moved = VectorFeature::new(g.apply_features(v.channels()));
            let lhs = vn_linear_forward(&layer, &store, &moved).unwrap();
            let rhs = g.apply_features(vn_linear_forward(&layer, &store, &v).unwrap().channels());
            assert!(lhs.channels().relative_error(&rhs, 1e-12) < 1e-12);
        }
    }

    #[test]
    fn relu_aligned_branch_returns_feature() {
        // F map = identity, B map = identity, O map = 0-ish is impossible
        // under the constraint; instead pick maps whose rows sum to one and
        // give F_O parallel B_O with positive inner product.
        let mut store = ParamStore::<f64>::new();
        let layer = VnNonlinearLayer::new(&mut store, "nl", 2, 1, 0.0, 0.0, &mut rng(3));
        layer.feature_map.set_free_weights(&mut store, Tensor::from_f64s(vec![1, 2], &[1.0, 0.0]));
        layer.direction_map.set_free_weights(&mut store, Tensor::from_f64s(vec![1, 2], &[1.0, 0.0]));
        layer.origin_map.set_free_weights(&mut store, Tensor::from_f64s(vec![1, 2], &[0.0, 1.0]));
        // F = B = a, O = b, so F_O = B_O = a - b: aligned branch
        let v = VectorFeature::new(Tensor::from_f64s(vec![2, 3], &[2.0, 1.0, 0.0, -1.0, 0.5, 3.0]));
        let out = vn_relu_forward(&layer, &store, &v).unwrap();
        assert_eq!(out.channels().data(), &[2.0, 1.0, 0.0]);
    }

    #[test]
    fn relu_antiparallel_removes_full_projection() {
        // F = a, B = b, O = (a+b)/2: F_O = (a-b)/2 = -B_O. With a, b unit and
        // opposite, the negative projection is removed: output = F + B_O.
        let mut store = ParamStore::<f64>::new();
        let layer = VnNonlinearLayer::new(&mut store, "nl", 2, 1, 0.0, 0.0, &mut rng(3));
        layer.feature_map.set_free_weights(&mut store, Tensor::from_f64s(vec![1, 2], &[1.0, 0.0]));
        layer.direction_map.set_free_weights(&mut store, Tensor::from_f64s(vec![1, 2], &[0.0, 1.0]));
        layer.origin_map.set_free_weights(&mut store, Tensor::from_f64s(vec![1, 2], &[0.5, 0.5]));
        let v = VectorFeature::new(Tensor::from_f64s(vec![2, 3], &[1.0, 0.0, 0.0, -1.0, 0.0, 0.0]));
        let out = vn_relu_forward(&layer, &store, &v).unwrap();
        // F = (1,0,0), B_O = (-1,0,0): expected F + B_O = 0
        for &x in out.channels().data() {
            assert!(x.abs() < 1e-15, "expected zero, got {x}");
        }
    }

    #[test]
    fn relu_degenerate_direction_passes_through() {
        let mut store = ParamStore::<f64>::new();
        let layer = VnNonlinearLayer::new(&mut store, "nl", 2, 1, 0.0, 0.0, &mut rng(4));
        layer.feature_map.set_free_weights(&mut store, Tensor::from_f64s(vec![1, 2], &[1.0, 0.0]));
        // B map = O map: B_O = 0, below the norm guard
        layer.direction_map.set_free_weights(&mut store, Tensor::from_f64s(vec![1, 2], &[0.5, 0.5]));
        layer.origin_map.set_free_weights(&mut store, Tensor::from_f64s(vec![1, 2], &[0.5, 0.5]));
        let v = VectorFeature::new(Tensor::from_f64s(vec![2, 3], &[1.0, 2.0, 3.0, -5.0, 0.0, 1.0]));
        let out = vn_relu_forward(&layer, &store, &v).unwrap();
        assert_eq!(out.channels().data(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn relu_is_equivariant() {
        let mut store = ParamStore::<f64>::new();
        let layer = VnNonlinearLayer::new(&mut store, "nl", 4, 4, 0.0, 0.0, &mut rng(5));
        let dist = TransformDistribution::sim3(10).with_scale_range(0.1, 10.0).with_translation_range(10.0);
        let mut r = rng(6);
        for trial in 0..200 {
            let v = VectorFeature::new(random_tokens(1, 4, &mut r).reshaped(vec![4, 3]));
            let g = sample_transform::<f64>(&dist, trial);
            let moved = VectorFeature::new(g.apply_features(v.channels()));
            let lhs = vn_relu_forward(&layer, &store, &moved).unwrap();
            let rhs = g.apply_features(vn_relu_forward(&layer, &store, &v).unwrap().channels());
            assert!(lhs.channels().relative_error(&rhs, 1e-12) < 1e-9);
        }
    }

    #[test]
    fn leaky_alpha_zero_is_relu_bitwise() {
        let mut store = ParamStore::<f64>::new();
        let relu = VnNonlinearLayer::new(&mut store, "a", 4, 4, 0.0, 0.0, &mut rng(7));
        let mut leaky = VnNonlinearLayer::new(&mut store, "b", 4, 4, 0.2, 0.0, &mut rng(8));
        // same maps for both
        for (dst, src) in [
            (&leaky.feature_map, &relu.feature_map),
            (&leaky.direction_map, &relu.direction_map),
            (&leaky.origin_map, &relu.origin_map),
        ] {
            let w = store.value(src_id(src)).clone();
            dst.set_free_weights(&mut store, w);
        }
        leaky.leaky_alpha = 0.0;
        let mut r = rng(9);
        let v = VectorFeature::new(random_tokens(1, 4, &mut r).reshaped(vec![4, 3]));
        let a = vn_relu_forward(&relu, &store, &v).unwrap();
        let b = vn_relu_forward(&leaky, &store, &v).unwrap();
        assert_eq!(a.channels().data(), b.channels().data());
    }

    fn src_id<F: Real>(l: &VnLinearLayer<F>) -> ParamId {
        l.free_weights
    }

    #[test]
    fn max_single_token_is_identity() {
        let mut store = ParamStore::<f64>::new();
        let layer = VnMaxLayer::new(&mut store, "mx", 3, 0.0, &mut rng(10));
        let mut r = rng(11);
        let vs = VectorFeatureSet::new(random_tokens(1, 3, &mut r));
        let out = vn_max_forward(&layer, &store, &vs).unwrap();
        assert_eq!(out.channels().data(), vs.token(0).channels().data());
    }

    #[test]
    fn max_picks_dominant_token_per_channel() {
        let mut store = ParamStore::<f64>::new();
        let layer = VnMaxLayer::new(&mut store, "mx", 2, 0.0, &mut rng(12));
        let mut r = rng(13);
        let vs = VectorFeatureSet::new(random_tokens(2, 2, &mut r));
        // independent transcription of the selection rule
        let b0 = layer.direction_map.effective_weights(&store);
        let o0 = layer.origin_map.effective_weights(&store);
        let mut expected = Vec::new();
        for d in 0..2 {
            let mut best = f64::NEG_INFINITY;
            let mut best_i = 0;
            for i in 0..2 {
                let tok = vs.token(i);
                let apply = |w: &Tensor<f64>| -> Vec<f64> {
                    let mut out = vec![0.0; 2 * 3];
                    for r_ in 0..2 {
                        for c in 0..3 {
                            for k in 0..2 {
                                out[r_ * 3 + c] += w.data()[r_ * 2 + k] * tok.channels().data()[k * 3 + c];
                            }
                        }
                    }
                    out
                };
                let b = apply(&b0);
                let o = apply(&o0);
                let mut score = 0.0;
                for c in 0..3 {
                    let vo = tok.channels().data()[d * 3 + c] - o[d * 3 + c];
                    let bo = b[d * 3 + c] - o[d * 3 + c];
                    score += vo * bo;
                }
                if score > best {
                    best = score;
                    best_i = i;
                }
            }
            expected.push((d, best_i));
        }
        let out = vn_max_forward(&layer, &store, &vs).unwrap();
        for (d, i) in expected {
            for c in 0..3 {
                assert_eq!(
                    out.channels().data()[d * 3 + c],
                    vs.token(i).channels().data()[d * 3 + c]
                );
            }
        }
    }

    #[test]
    fn max_argmax_is_transform_invariant_and_equivariant() {
        let mut store = ParamStore::<f64>::new();
        let layer = VnMaxLayer::new(&mut store, "mx", 4, 0.0, &mut rng(14));
        let dist = TransformDistribution::sim3(15).with_scale_range(0.1, 10.0).with_translation_range(10.0);
        let mut r = rng(16);
        for trial in 0..200 {
            let vs = VectorFeatureSet::new(random_tokens(5, 4, &mut r));
            let g = sample_transform::<f64>(&dist, trial);
            let moved = VectorFeatureSet::new(g.apply_features(vs.tokens()));
            let lhs = vn_max_forward(&layer, &store, &moved).unwrap();
            let rhs = g.apply_features(vn_max_forward(&layer, &store, &vs).unwrap().channels());
            assert!(lhs.channels().relative_error(&rhs, 1e-12) < 1e-9);
        }
    }

    #[test]
    fn bias_breaks_equivariance_by_bounded_monotone_amount() {
        let dist = TransformDistribution::sim3(20).with_scale_range(0.1, 10.0).with_translation_range(10.0);
        let mut errs = Vec::new();
        for &bias in &[1e-1, 1e-2, 1e-3, 0.0] {
            let mut store = ParamStore::<f64>::new();
            let layer = VnLinearLayer::new(&mut store, "lin", 4, 4, bias, &mut rng(21));
            let mut r = rng(22);
            let mut worst: f64 = 0.0;
            for trial in 0..100 {
                let v = VectorFeature::new(random_tokens(1, 4, &mut r).reshaped(vec![4, 3]));
                let g = sample_transform::<f64>(&dist, trial);
                let moved = VectorFeature::new(g.apply_features(v.channels()));
                let lhs = vn_linear_forward(&layer, &store, &moved).unwrap();
                let rhs = g.apply_features(vn_linear_forward(&layer, &store, &v).unwrap().channels());
                worst = worst.max(lhs.channels().relative_error(&rhs, 1e-12));
            }
            errs.push((bias, worst));
        }
        for pair in errs.windows(2) {
            assert!(
                pair[0].1 >= pair[1].1,
                "error should not increase as bias shrinks: {pair:?}"
            );
        }
        assert!(errs.last().unwrap().1 < 1e-7, "bias off must be exact");
        // |L(g.v) - g.L(v)| = |bias - s R bias| <= bias_norm * (1 + s):
        // check the measured errors against the bound with the trial scales
        let c_bound = errs[0].1 / 1e-1;
        for &(bias, err) in &errs[1..3] {
            assert!(err <= c_bound * bias * (1.0 + 1e-9) * 11.0);
        }
    }
}

//! The equivariant transformer block: canonicalize, attend, restore.
//!
//! Canonicalization centers each token, divides channels by their norms and
//! re-scales the norm vector with a layer normalization, leaving features
//! invariant to translation and scale and equivariant to rotation. Attention
//! weights are Frobenius inner products of canonicalized features, hence
//! SIM(3)-invariant. Restoration re-injects translation (residual add) and
//! scale (the statistic `mu`, the mean channel norm of the token-averaged
//! centered input) so the block output transforms exactly like its input.

use crate::params::{ParamId, ParamStore};
use crate::tape::{
    Add, AddBroadcastLast, AddConst, AttnMix, BroadcastDivLastGuarded, BroadcastSubLast,
    CenterChannels, ConcatChannels, DivRowsGuarded, FeatGram, MeanAll, MeanLast, MulBroadcastLast,
    MulRows, MulScalar, RowNorms, Session, SliceChannels, SoftmaxRows, Sqrt, Square, TokenMean,
    Var,
};
use crate::tensor::Tensor;
use crate::vn::{VectorFeatureSet, VnLinearLayer, VnNonlinearLayer, NORM_GUARD};
use crate::Real;
use rand_chacha::ChaCha12Rng;

/// Epsilon inside the norm-vector layer normalization.
pub const LAYERNORM_EPS: f64 = 1e-5;
/// Absolute floor used only to keep fully-degenerate inputs finite.
const TINY: f64 = 1e-30;

/// Extended layer normalization over vector features.
///
/// The standardization runs on norms pre-divided by their mean, which keeps
/// the whole map exactly scale-invariant while retaining the usual additive
/// epsilon for stability.
#[derive(Debug)]
pub struct VnLayerNorm<F> {
    pub dim: usize,
    gain: ParamId,
    offset: ParamId,
    _marker: std::marker::PhantomData<F>,
}

impl<F: Real> VnLayerNorm<F> {
    pub fn new(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        let gain = store.register(&format!("{name}.gain"), Tensor::new(vec![dim], vec![F::one(); dim]), false);
        let offset = store.register(&format!("{name}.offset"), Tensor::zeros(vec![dim]), false);
        Self {
            dim,
            gain,
            offset,
            _marker: std::marker::PhantomData,
        }
    }

    pub fn forward(&self, s: &mut Session<F>, x: Var) -> Var {
        debug_assert_eq!(s.value(x).shape()[1], self.dim);
        let guard = F::from_f64_lossy(NORM_GUARD);
        let tiny = F::from_f64_lossy(TINY);

        let centered = s.apply(CenterChannels, &[x]);
        let norms = s.apply(RowNorms, &[centered]); // [M,D]

        // scale-free standardization of the norm vector
        let mean = s.apply(MeanLast, &[norms]); // [M]
        let unit = s.apply(BroadcastDivLastGuarded(tiny), &[norms, mean]);
        let unit_mean = s.apply(MeanLast, &[unit]);
        let dev = s.apply(BroadcastSubLast, &[unit, unit_mean]);
        let sq = s.apply(Square, &[dev]);
        let var = s.apply(MeanLast, &[sq]);
        let var_eps = s.apply(AddConst(F::from_f64_lossy(LAYERNORM_EPS)), &[var]);
        let std = s.apply(Sqrt, &[var_eps]);
        let z = s.apply(BroadcastDivLastGuarded(tiny), &[dev, std]);

        let gain = s.param(self.gain);
        let offset = s.param(self.offset);
        let scaled = s.apply(MulBroadcastLast, &[z, gain]);
        let out_norms = s.apply(AddBroadcastLast, &[scaled, offset]);

        let dirs = s.apply(DivRowsGuarded(guard), &[centered, norms]);
        s.apply(MulRows, &[dirs, out_norms])
    }
}

/// Canonicalize a token set: invariant to translation and scale, equivariant
/// to rotation.
pub fn canonicalize<F: Real>(
    norm: &VnLayerNorm<F>,
    store: &ParamStore<F>,
    vs: &VectorFeatureSet<F>,
) -> VectorFeatureSet<F> {
    let mut s = Session::new(store);
    let x = s.leaf(vs.tokens().clone());
    let y = norm.forward(&mut s, x);
    VectorFeatureSet::new(s.value(y).clone())
}

/// Multi-head SIM(3)-invariant attention. Heads split the channel dimension
/// into equal groups with their own query/key/value maps; head outputs are
/// concatenated back to full width.
#[derive(Debug)]
pub struct VnAttentionLayer<F> {
    pub dim: usize,
    pub head_count: usize,
    heads: Vec<HeadMaps<F>>,
}

#[derive(Debug)]
struct HeadMaps<F> {
    query: VnLinearLayer<F>,
    key: VnLinearLayer<F>,
    value: VnLinearLayer<F>,
}

impl<F: Real> VnAttentionLayer<F> {
    pub fn new(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        head_count: usize,
        bias_norm: f64,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        assert!(head_count >= 1 && dim % head_count == 0, "head count must divide the channel width");
        let hd = dim / head_count;
        let heads = (0..head_count)
            .map(|h| HeadMaps {
                query: VnLinearLayer::new(store, &format!("{name}.h{h}.q"), hd, hd, bias_norm, rng),
                key: VnLinearLayer::new(store, &format!("{name}.h{h}.k"), hd, hd, bias_norm, rng),
                value: VnLinearLayer::new(store, &format!("{name}.h{h}.v"), hd, hd, bias_norm, rng),
            })
            .collect();
        Self {
            dim,
            head_count,
            heads,
        }
    }

    fn head_dim(&self) -> usize {
        self.dim / self.head_count
    }

    /// Per-head attention weights for canonicalized queries/keys; each row is
    /// a softmax over keys of `<W_Q V'_i, W_K V'_j>_F / sqrt(3 D_h)`.
    pub fn weights_on(&self, s: &mut Session<F>, queries: Var, keys: Var) -> Vec<Var> {
        let hd = self.head_dim();
        let scale = F::one() / F::from_f64_lossy((3 * hd) as f64).sqrt();
        self.heads
            .iter()
            .enumerate()
            .map(|(h, maps)| {
                let qs = s.apply(SliceChannels { start: h * hd, len: hd }, &[queries]);
                let ks = s.apply(SliceChannels { start: h * hd, len: hd }, &[keys]);
                let q = maps.query.forward(s, qs);
                let k = maps.key.forward(s, ks);
                let logits = s.apply(FeatGram(scale), &[q, k]);
                s.apply(SoftmaxRows, &[logits])
            })
            .collect()
    }

    /// Full attention output `Z`: per head, mix value-mapped keys with the
    /// head's weights, then concatenate heads.
    pub fn forward(&self, s: &mut Session<F>, queries: Var, keys: Var) -> Var {
        let hd = self.head_dim();
        let weights = self.weights_on(s, queries, keys);
        let mut out: Option<Var> = None;
        for (h, maps) in self.heads.iter().enumerate() {
            let ks = s.apply(SliceChannels { start: h * hd, len: hd }, &[keys]);
            let v = maps.value.forward(s, ks);
            let z = s.apply(AttnMix, &[weights[h], v]);
            out = Some(match out {
                None => z,
                Some(acc) => s.apply(ConcatChannels, &[acc, z]),
            });
        }
        out.expect("at least one head")
    }
}

/// Attention weights as plain matrices, one `[M_q, M_k]` row-stochastic
/// matrix per head. Inputs must already be canonicalized.
pub fn attention_weights<F: Real>(
    layer: &VnAttentionLayer<F>,
    store: &ParamStore<F>,
    queries: &VectorFeatureSet<F>,
    keys: &VectorFeatureSet<F>,
) -> Vec<Tensor<F>> {
    let mut s = Session::new(store);
    let q = s.leaf(queries.tokens().clone());
    let k = s.leaf(keys.tokens().clone());
    let ws = layer.weights_on(&mut s, q, k);
    ws.into_iter().map(|w| s.value(w).clone()).collect()
}

/// Transform restoration: `V + Phi(mu Z)` where `mu` is recomputed from the
/// sub-path input `V` and scales linearly with the input's scale.
#[derive(Debug)]
pub struct RestorationLayer<F> {
    pub fuse_map: VnLinearLayer<F>,
}

impl<F: Real> RestorationLayer<F> {
    pub fn new(store: &mut ParamStore<F>, name: &str, dim: usize, bias_norm: f64, rng: &mut ChaCha12Rng) -> Self {
        Self {
            fuse_map: VnLinearLayer::new(store, &format!("{name}.fuse"), dim, dim, bias_norm, rng),
        }
    }

    /// `mu = E_D || E_i (V_i - mean_channels V_i) ||_2`.
    pub fn mu_scale(s: &mut Session<F>, v: Var) -> Var {
        let centered = s.apply(CenterChannels, &[v]);
        let avg = s.apply(TokenMean, &[centered]); // [D,3]
        let norms = s.apply(RowNorms, &[avg]); // [D]
        s.apply(MeanAll, &[norms])
    }

    pub fn forward(&self, s: &mut Session<F>, input: Var, z: Var) -> Var {
        let mu = Self::mu_scale(s, input);
        let scaled = s.apply(MulScalar, &[z, mu]);
        let fused = self.fuse_map.forward(s, scaled);
        s.apply(Add, &[input, fused])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionMode {
    SelfAttention,
    CrossAttention,
}

/// One block: canonicalized attention with restoration, then a canonicalized
/// feed-forward (linear, leaky vector nonlinearity, linear at twice the
/// width) with its own restoration. Cross-attention blocks canonicalize the
/// context with the same normalization before forming keys.
#[derive(Debug)]
pub struct Sim3Block<F> {
    pub mode: AttentionMode,
    pub norm1: VnLayerNorm<F>,
    pub attention: VnAttentionLayer<F>,
    pub restore1: RestorationLayer<F>,
    pub norm2: VnLayerNorm<F>,
    pub ff_in: VnLinearLayer<F>,
    pub ff_act: VnNonlinearLayer<F>,
    pub ff_out: VnLinearLayer<F>,
    pub restore2: RestorationLayer<F>,
}

impl<F: Real> Sim3Block<F> {
    pub fn new(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        head_count: usize,
        mode: AttentionMode,
        bias_norm: f64,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let hidden = dim * 2;
        Self {
            mode,
            norm1: VnLayerNorm::new(store, &format!("{name}.norm1"), dim),
            attention: VnAttentionLayer::new(store, &format!("{name}.attn"), dim, head_count, bias_norm, rng),
            restore1: RestorationLayer::new(store, &format!("{name}.restore1"), dim, bias_norm, rng),
            norm2: VnLayerNorm::new(store, &format!("{name}.norm2"), dim),
            ff_in: VnLinearLayer::new(store, &format!("{name}.ff_in"), dim, hidden, bias_norm, rng),
            ff_act: VnNonlinearLayer::new(store, &format!("{name}.ff_act"), hidden, hidden, 0.2, bias_norm, rng),
            ff_out: VnLinearLayer::new(store, &format!("{name}.ff_out"), hidden, dim, bias_norm, rng),
            restore2: RestorationLayer::new(store, &format!("{name}.restore2"), dim, bias_norm, rng),
        }
    }

    pub fn forward(&self, s: &mut Session<F>, queries: Var, context: Option<Var>) -> Var {
        let qc = self.norm1.forward(s, queries);
        let kc = match (self.mode, context) {
            (AttentionMode::SelfAttention, None) => qc,
            (AttentionMode::CrossAttention, Some(ctx)) => self.norm1.forward(s, ctx),
            (AttentionMode::SelfAttention, Some(_)) => {
                panic!("self-attention block takes no context")
            }
            (AttentionMode::CrossAttention, None) => {
                panic!("cross-attention block requires context")
            }
        };
        let z = self.attention.forward(s, qc, kc);
        let v1 = self.restore1.forward(s, queries, z);

        let h = self.norm2.forward(s, v1);
        let h = self.ff_in.forward(s, h);
        let h = self.ff_act.forward(s, h);
        let h = self.ff_out.forward(s, h);
        self.restore2.forward(s, v1, h)
    }

    pub fn for_each_linear(&mut self, f: &mut impl FnMut(&mut VnLinearLayer<F>)) {
        for head in self.attention.heads.iter_mut() {
            f(&mut head.query);
            f(&mut head.key);
            f(&mut head.value);
        }
        f(&mut self.restore1.fuse_map);
        f(&mut self.ff_in);
        f(&mut self.ff_act.feature_map);
        f(&mut self.ff_act.direction_map);
        f(&mut self.ff_act.origin_map);
        f(&mut self.ff_out);
        f(&mut self.restore2.fuse_map);
    }
}

/// One-shot block evaluation on plain feature sets.
pub fn block_forward<F: Real>(
    block: &Sim3Block<F>,
    store: &ParamStore<F>,
    queries: &VectorFeatureSet<F>,
    context: Option<&VectorFeatureSet<F>>,
) -> VectorFeatureSet<F> {
    let mut s = Session::new(store);
    let q = s.leaf(queries.tokens().clone());
    let c = context.map(|ctx| s.leaf(ctx.tokens().clone()));
    let y = block.forward(&mut s, q, c);
    VectorFeatureSet::new(s.value(y).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{sample_transform, Sim3Transform, TransformDistribution};
    use crate::vn::random_tokens;
    use rand::{Rng, SeedableRng};

    fn rng(seed: u64) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(seed)
    }

    fn audit_dist(seed: u64) -> TransformDistribution {
        TransformDistribution::sim3(seed).with_scale_range(0.1, 10.0).with_translation_range(10.0)
    }

    #[test]
    fn layernorm_symmetric_norms_collapse_to_offset() {
        // channels (1,0,0), (-1,0,0): both norms equal, so the standardized
        // norm vector is zero and output norms equal the offset (zero here)
        let mut store = ParamStore::<f64>::new();
        let ln = VnLayerNorm::new(&mut store, "ln", 2);
        let vs = VectorFeatureSet::new(Tensor::from_f64s(
            vec![1, 2, 3],
            &[1.0, 0.0, 0.0, -1.0, 0.0, 0.0],
        ));
        let out = canonicalize(&ln, &store, &vs);
        for &x in out.tokens().data() {
            assert_eq!(x, 0.0);
        }
    }

    #[test]
    fn canonicalization_kills_scale_and_translation() {
        let mut store = ParamStore::<f64>::new();
        let ln = VnLayerNorm::new(&mut store, "ln", 6);
        let mut r = rng(1);
        for trial in 0..100 {
            let vs = VectorFeatureSet::new(random_tokens(4, 6, &mut r));
            let g1 = sample_transform::<f64>(&audit_dist(2), trial * 2);
            let g2 = sample_transform::<f64>(&audit_dist(3), trial * 2 + 1);
            // same rotation, different scale/translation
            let a = Sim3Transform { scale: g1.scale, rotation: g1.rotation, translation: g1.translation };
            let b = Sim3Transform { scale: g2.scale, rotation: g1.rotation, translation: g2.translation };
            let ca = canonicalize(&ln, &store, &VectorFeatureSet::new(a.apply_features(vs.tokens())));
            let cb = canonicalize(&ln, &store, &VectorFeatureSet::new(b.apply_features(vs.tokens())));
            assert!(ca.tokens().relative_error(cb.tokens(), 1e-12) < 1e-9);
        }
    }

    #[test]
    fn canonicalization_rotates_with_input() {
        let mut store = ParamStore::<f64>::new();
        let ln = VnLayerNorm::new(&mut store, "ln", 5);
        let mut r = rng(4);
        for trial in 0..100 {
            let vs = VectorFeatureSet::new(random_tokens(3, 5, &mut r));
            let g = sample_transform::<f64>(&audit_dist(5), trial);
            let rot_only = Sim3Transform { scale: 1.0, rotation: g.rotation, translation: [0.0; 3] };
            let lhs = canonicalize(&ln, &store, &VectorFeatureSet::new(g.apply_features(vs.tokens())));
            let rhs = rot_only.apply_features(canonicalize(&ln, &store, &vs).tokens());
            assert!(lhs.tokens().relative_error(&rhs, 1e-12) < 1e-9);
        }
    }

    #[test]
    fn attention_single_key_weight_is_one() {
        let mut store = ParamStore::<f64>::new();
        let attn = VnAttentionLayer::new(&mut store, "attn", 4, 1, 0.0, &mut rng(6));
        let mut r = rng(7);
        let q = VectorFeatureSet::new(random_tokens(3, 4, &mut r));
        let k = VectorFeatureSet::new(random_tokens(1, 4, &mut r));
        let w = attention_weights(&attn, &store, &q, &k);
        assert_eq!(w.len(), 1);
        for &v in w[0].data() {
            assert!((v - 1.0).abs() < 1e-15);
        }
    }

    #[test]
    fn attention_identical_keys_split_evenly() {
        let mut store = ParamStore::<f64>::new();
        let attn = VnAttentionLayer::new(&mut store, "attn", 4, 2, 0.0, &mut rng(8));
        let mut r = rng(9);
        let q = VectorFeatureSet::new(random_tokens(2, 4, &mut r));
        let one = random_tokens::<f64>(1, 4, &mut r);
        let mut two = one.data().to_vec();
        two.extend_from_slice(one.data());
        let k = VectorFeatureSet::new(Tensor::new(vec![2, 4, 3], two));
        for w in attention_weights(&attn, &store, &q, &k) {
            for &v in w.data() {
                assert!((v - 0.5).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_weights_are_stochastic() {
        let store = &mut ParamStore::<f64>::new();
        let attn = VnAttentionLayer::new(store, "attn", 6, 3, 0.0, &mut rng(30));
        let mut r = rng(31);
        let q = VectorFeatureSet::new(random_tokens(4, 6, &mut r));
        let k = VectorFeatureSet::new(random_tokens(7, 6, &mut r));
        for w in attention_weights(&attn, store, &q, &k) {
            assert_eq!(w.shape(), &[4, 7]);
            for row in 0..4 {
                let vals = &w.data()[row * 7..(row + 1) * 7];
                assert!(vals.iter().all(|&v| v >= 0.0));
                let sum: f64 = vals.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "row sum {sum}");
            }
        }
    }

    #[test]
    fn attention_weights_invariant_under_group_action() {
        let mut store = ParamStore::<f64>::new();
        let ln = VnLayerNorm::new(&mut store, "ln", 4);
        let attn = VnAttentionLayer::new(&mut store, "attn", 4, 2, 0.0, &mut rng(10));
        let mut r = rng(11);
        for trial in 0..100 {
            let vs = VectorFeatureSet::new(random_tokens(5, 4, &mut r));
            let g = sample_transform::<f64>(&audit_dist(12), trial);
            let moved = VectorFeatureSet::new(g.apply_features(vs.tokens()));
            let base = canonicalize(&ln, &store, &vs);
            let xfrm = canonicalize(&ln, &store, &moved);
            let wa = attention_weights(&attn, &store, &base, &base);
            let wb = attention_weights(&attn, &store, &xfrm, &xfrm);
            for (a, b) in wa.iter().zip(&wb) {
                assert!(a.relative_error(b, 1e-12) < 1e-9);
            }
        }
    }

    #[test]
    fn restoration_with_zero_update_is_identity_bitwise() {
        let mut store = ParamStore::<f64>::new();
        let restore = RestorationLayer::new(&mut store, "r", 4, 0.0, &mut rng(13));
        let mut r = rng(14);
        let vs = random_tokens::<f64>(3, 4, &mut r);
        let mut s = Session::new(&store);
        let v = s.leaf(vs.clone());
        let z = s.leaf(Tensor::zeros(vec![3, 4, 3]));
        let out = restore.forward(&mut s, v, z);
        assert_eq!(s.value(out).data(), vs.data());
    }

    #[test]
    fn mu_scales_linearly_with_input_scale() {
        let mut store = ParamStore::<f64>::new();
        let mut r = rng(15);
        let vs = random_tokens::<f64>(4, 6, &mut r);
        let g = Sim3Transform { scale: 3.7, rotation: crate::geometry::mat3_identity(), translation: [0.0; 3] };
        let mut s = Session::new(&store);
        let a = s.leaf(vs.clone());
        let b = s.leaf(g.apply_features(&vs));
        let mu_a = RestorationLayer::<f64>::mu_scale(&mut s, a);
        let mu_b = RestorationLayer::<f64>::mu_scale(&mut s, b);
        let (ma, mb) = (s.value(mu_a).item(), s.value(mu_b).item());
        assert!((mb - 3.7 * ma).abs() < 1e-9 * ma.max(1.0));
    }

    #[test]
    fn degenerate_tokens_pass_through_block_bitwise() {
        // every token has all channels equal, so canonicalized features are
        // exactly zero and both residual paths contribute nothing
        let store = &mut ParamStore::<f64>::new();
        let block = Sim3Block::new(store, "blk", 4, 2, AttentionMode::SelfAttention, 0.0, &mut rng(16));
        let mut r = rng(17);
        let mut data = Vec::new();
        for _ in 0..3 {
            let p: [f64; 3] = [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)];
            for _ in 0..4 {
                data.extend_from_slice(&p);
            }
        }
        let vs = VectorFeatureSet::new(Tensor::new(vec![3, 4, 3], data));
        let out = block_forward(&block, store, &vs, None);
        assert_eq!(out.tokens().data(), vs.tokens().data());
    }

    #[test]
    fn block_is_equivariant() {
        let mut store = ParamStore::<f64>::new();
        let block = Sim3Block::new(&mut store, "blk", 8, 2, AttentionMode::SelfAttention, 0.0, &mut rng(18));
        let mut r = rng(19);
        for trial in 0..50 {
            let vs = VectorFeatureSet::new(random_tokens(6, 8, &mut r));
            let g = sample_transform::<f64>(&audit_dist(20), trial);
            let moved = VectorFeatureSet::new(g.apply_features(vs.tokens()));
            let lhs = block_forward(&block, &store, &moved, None);
            let rhs = g.apply_features(block_forward(&block, &store, &vs, None).tokens());
            assert!(lhs.tokens().relative_error(&rhs, 1e-12) < 1e-8);
        }
    }

    #[test]
    fn cross_attention_block_is_equivariant() {
        let mut store = ParamStore::<f64>::new();
        let block = Sim3Block::new(&mut store, "blk", 8, 2, AttentionMode::CrossAttention, 0.0, &mut rng(21));
        let mut r = rng(22);
        for trial in 0..50 {
            let q = VectorFeatureSet::new(random_tokens(4, 8, &mut r));
            let c = VectorFeatureSet::new(random_tokens(6, 8, &mut r));
            let g = sample_transform::<f64>(&audit_dist(23), trial);
            let qm = VectorFeatureSet::new(g.apply_features(q.tokens()));
            let cm = VectorFeatureSet::new(g.apply_features(c.tokens()));
            let lhs = block_forward(&block, &store, &qm, Some(&cm));
            let rhs = g.apply_features(block_forward(&block, &store, &q, Some(&c)).tokens());
            assert!(lhs.tokens().relative_error(&rhs, 1e-12) < 1e-8);
        }
    }
}

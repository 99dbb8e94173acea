//! A deliberately non-equivariant control network with the same pipeline
//! shape as the equivariant model but plain scalar features: scalar edge
//! convolutions, standard layer norm, dot-product attention, and an MLP
//! reconstruction head. It consumes absolute coordinates, so it can exploit
//! the training frame and is expected to degrade under unseen transforms.

use crate::extract::{build_knn, farthest_point_sample};
use crate::geometry::PointCloud;
use crate::model::{ForwardVars, ModelConfig, ModelError};
use crate::params::{ParamId, ParamStore};
use crate::tape::{
    Add, AddBroadcastLast, AddConst, AddTokenAnchors, BroadcastDivLastGuarded, BroadcastSubLast,
    ConcatCols, GatherRows, LeakyReluElem, MatMul, MatMulNT, MaxGroupsElem, MeanGroups, MeanLast,
    Reshape, Session, SliceCols, SoftmaxRows, Sqrt, Square, Sub, Var,
};
use crate::tensor::Tensor;
use crate::Real;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

const LN_EPS: f64 = 1e-5;
const TINY: f64 = 1e-30;

#[derive(Debug)]
struct Linear {
    weights: ParamId,
    bias: ParamId,
}

impl Linear {
    fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let a = 1.0 / (in_dim as f64).sqrt();
        let w = Tensor::new(
            vec![out_dim, in_dim],
            (0..out_dim * in_dim)
                .map(|_| F::from_f64_lossy(rng.gen_range(-a..a)))
                .collect(),
        );
        Self {
            weights: store.register(&format!("{name}.w"), w, true),
            bias: store.register(&format!("{name}.b"), Tensor::zeros(vec![out_dim]), false),
        }
    }

    fn forward<F: Real>(&self, s: &mut Session<F>, x: Var) -> Var {
        let w = s.param(self.weights);
        let y = s.apply(crate::tape::LinearNT, &[x, w]);
        let b = s.param(self.bias);
        s.apply(AddBroadcastLast, &[y, b])
    }
}

#[derive(Debug)]
struct LayerNorm {
    gain: ParamId,
    offset: ParamId,
}

impl LayerNorm {
    fn new<F: Real>(store: &mut ParamStore<F>, name: &str, dim: usize) -> Self {
        Self {
            gain: store.register(&format!("{name}.gain"), Tensor::new(vec![dim], vec![F::one(); dim]), false),
            offset: store.register(&format!("{name}.offset"), Tensor::zeros(vec![dim]), false),
        }
    }

    fn forward<F: Real>(&self, s: &mut Session<F>, x: Var) -> Var {
        let tiny = F::from_f64_lossy(TINY);
        let mean = s.apply(MeanLast, &[x]);
        let dev = s.apply(BroadcastSubLast, &[x, mean]);
        let sq = s.apply(Square, &[dev]);
        let var = s.apply(MeanLast, &[sq]);
        let var_eps = s.apply(AddConst(F::from_f64_lossy(LN_EPS)), &[var]);
        let std = s.apply(Sqrt, &[var_eps]);
        let z = s.apply(BroadcastDivLastGuarded(tiny), &[dev, std]);
        let gain = s.param(self.gain);
        let offset = s.param(self.offset);
        let scaled = s.apply(crate::tape::MulBroadcastLast, &[z, gain]);
        s.apply(AddBroadcastLast, &[scaled, offset])
    }
}

#[derive(Debug)]
struct ScalarBlock {
    cross: bool,
    head_count: usize,
    dim: usize,
    ln1: LayerNorm,
    qkv: Vec<(Linear, Linear, Linear)>,
    fuse: Linear,
    ln2: LayerNorm,
    ff_in: Linear,
    ff_out: Linear,
}

impl ScalarBlock {
    fn new<F: Real>(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        head_count: usize,
        cross: bool,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let hd = dim / head_count;
        let qkv = (0..head_count)
            .map(|h| {
                (
                    Linear::new(store, &format!("{name}.h{h}.q"), hd, hd, rng),
                    Linear::new(store, &format!("{name}.h{h}.k"), hd, hd, rng),
                    Linear::new(store, &format!("{name}.h{h}.v"), hd, hd, rng),
                )
            })
            .collect();
        Self {
            cross,
            head_count,
            dim,
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            qkv,
            fuse: Linear::new(store, &format!("{name}.fuse"), dim, dim, rng),
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), dim, 2 * dim, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), 2 * dim, dim, rng),
        }
    }

    fn forward<F: Real>(&self, s: &mut Session<F>, x: Var, context: Option<Var>) -> Var {
        let hd = self.dim / self.head_count;
        let scale = F::one() / F::from_f64_lossy(hd as f64).sqrt();
        let qn = self.ln1.forward(s, x);
        let kn = match (self.cross, context) {
            (false, None) => qn,
            (true, Some(c)) => self.ln1.forward(s, c),
            _ => panic!("context must match block mode"),
        };
        let mut mixed: Option<Var> = None;
        for (h, (ql, kl, vl)) in self.qkv.iter().enumerate() {
            let qs = s.apply(SliceCols { start: h * hd, len: hd }, &[qn]);
            let ks = s.apply(SliceCols { start: h * hd, len: hd }, &[kn]);
            let q = ql.forward(s, qs);
            let k = kl.forward(s, ks);
            let v = vl.forward(s, ks);
            let logits = s.apply(MatMulNT(scale), &[q, k]);
            let a = s.apply(SoftmaxRows, &[logits]);
            let z = s.apply(MatMul, &[a, v]);
            mixed = Some(match mixed {
                None => z,
                Some(acc) => s.apply(ConcatCols, &[acc, z]),
            });
        }
        let fused = self.fuse.forward(s, mixed.expect("heads"));
        let x1 = s.apply(Add, &[x, fused]);

        let h = self.ln2.forward(s, x1);
        let h = self.ff_in.forward(s, h);
        let h = s.apply(LeakyReluElem(F::from_f64_lossy(0.2)), &[h]);
        let h = self.ff_out.forward(s, h);
        s.apply(Add, &[x1, h])
    }
}

#[derive(Debug)]
struct ScalarEdgeLayer {
    lin: Linear,
}

impl ScalarEdgeLayer {
    fn forward<F: Real>(&self, s: &mut Session<F>, x: Var, graph: &crate::extract::KnnGraph) -> Var {
        let m = s.value(x).shape()[0];
        let k = graph.k;
        let center_idx: Vec<usize> = (0..m).flat_map(|i| std::iter::repeat(i).take(k)).collect();
        let neighbors = s.apply(GatherRows(graph.neighbor_indices.clone()), &[x]);
        let centers = s.apply(GatherRows(center_idx), &[x]);
        let diff = s.apply(Sub, &[neighbors, centers]);
        let edge = s.apply(ConcatCols, &[diff, centers]);
        let h = self.lin.forward(s, edge);
        let h = s.apply(LeakyReluElem(F::from_f64_lossy(0.2)), &[h]);
        // elementwise max over each neighbor group, argmax held fixed
        let vals = s.value(h);
        let (rows, c) = (vals.shape()[0], vals.shape()[1]);
        let groups = rows / k;
        let mut idx = vec![0usize; groups * c];
        for gi in 0..groups {
            for ci in 0..c {
                let mut best = F::neg_infinity();
                let mut best_i = 0usize;
                for local in 0..k {
                    let v = vals.data()[(gi * k + local) * c + ci];
                    if v > best {
                        best = v;
                        best_i = local;
                    }
                }
                idx[gi * c + ci] = best_i;
            }
        }
        s.apply(MaxGroupsElem { group: k, idx }, &[h])
    }
}

/// Scalar-feature control model; see the module docs.
pub struct ScalarControlModel<F: Real> {
    pub cfg: ModelConfig,
    pub params: ParamStore<F>,
    edge_layers: Vec<ScalarEdgeLayer>,
    widen: Linear,
    encoder: Vec<ScalarBlock>,
    anchor_embed: Linear,
    global_map: Linear,
    decoder: Vec<ScalarBlock>,
    head: Linear,
    dim: usize,
}

impl<F: Real> ScalarControlModel<F> {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        rng.set_stream(2);
        // channel parity with the vector model: one vector channel = 3 scalars
        let dim = 3 * cfg.channel_width;
        let mut edge_layers = Vec::new();
        let mut in_dim = 3;
        for li in 0..cfg.dgcnn_depth {
            let width = (dim / (1 << (cfg.dgcnn_depth - li))).max(4);
            edge_layers.push(ScalarEdgeLayer {
                lin: Linear::new(&mut store, &format!("extract.edge{li}"), 2 * in_dim, width, &mut rng),
            });
            in_dim = width;
        }
        let widen = Linear::new(&mut store, "extract.widen", in_dim, dim, &mut rng);
        let encoder = (0..cfg.encoder_depth)
            .map(|i| ScalarBlock::new(&mut store, &format!("enc{i}"), dim, cfg.head_count, false, &mut rng))
            .collect();
        let anchor_embed = Linear::new(&mut store, "qgen.anchor", 3, dim, &mut rng);
        let global_map = Linear::new(
            &mut store,
            "qgen.map",
            dim,
            cfg.coarse_generated * (3 + dim),
            &mut rng,
        );
        let decoder = (0..cfg.decoder_depth)
            .map(|i| ScalarBlock::new(&mut store, &format!("dec{i}"), dim, cfg.head_count, true, &mut rng))
            .collect();
        let head = Linear::new(&mut store, "head.expand", dim, cfg.upsample_factor() * 3, &mut rng);
        Ok(Self {
            cfg,
            params: store,
            edge_layers,
            widen,
            encoder,
            anchor_embed,
            global_map,
            decoder,
            head,
            dim,
        })
    }

    pub fn min_input(&self) -> usize {
        self.cfg
            .patch_count
            .max(self.cfg.knn_k + 1)
            .max(self.cfg.group_k)
            .max(self.cfg.coarse_from_input)
    }

    pub fn forward_vars(&self, s: &mut Session<F>, pc: &PointCloud<F>) -> Result<ForwardVars, ModelError> {
        if pc.len() < self.min_input() {
            return Err(ModelError::InputTooSmall {
                need: self.min_input(),
                got: pc.len(),
            });
        }
        let mut stages = Vec::new();
        let points = s.leaf(pc.to_tensor());
        let graph = build_knn(pc, self.cfg.knn_k, false)?;

        let mut h = points;
        for layer in &self.edge_layers {
            h = layer.forward(s, h, &graph);
        }
        let centers = farthest_point_sample(&pc.points, self.cfg.patch_count, 0);
        let mut group_idx = Vec::with_capacity(self.cfg.patch_count * self.cfg.group_k);
        for &c in &centers {
            let mut order: Vec<usize> = (0..pc.len()).collect();
            let key = |&j: &usize| {
                let d = [
                    pc.points[c][0] - pc.points[j][0],
                    pc.points[c][1] - pc.points[j][1],
                    pc.points[c][2] - pc.points[j][2],
                ];
                (d[0] * d[0] + d[1] * d[1] + d[2] * d[2], j)
            };
            order.select_nth_unstable_by(self.cfg.group_k - 1, |a, b| key(a).partial_cmp(&key(b)).unwrap());
            order.truncate(self.cfg.group_k);
            order.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
            group_idx.extend(order);
        }
        let grouped = s.apply(GatherRows(group_idx), &[h]);
        let pooled = s.apply(MeanGroups(self.cfg.group_k), &[grouped]);
        let mut tokens = self.widen.forward(s, pooled);
        stages.push(("extractor".to_string(), tokens));

        for (i, block) in self.encoder.iter().enumerate() {
            tokens = block.forward(s, tokens, None);
            stages.push((format!("encoder.{i}"), tokens));
        }

        // queries: sampled input anchors + globally decoded anchors/features
        let fps = farthest_point_sample(&pc.points, self.cfg.coarse_from_input, 0);
        let anchor_pts = s.apply(GatherRows(fps), &[points]);
        let anchor_feats = self.anchor_embed.forward(s, anchor_pts);

        let m = s.value(tokens).shape()[0];
        let vals = s.value(tokens);
        let c = vals.shape()[1];
        let mut idx = vec![0usize; c];
        for (ci, slot) in idx.iter_mut().enumerate() {
            let mut best = F::neg_infinity();
            for mi in 0..m {
                let v = vals.data()[mi * c + ci];
                if v > best {
                    best = v;
                    *slot = mi;
                }
            }
        }
        let global = s.apply(MaxGroupsElem { group: m, idx }, &[tokens]); // [1, dim]
        let decoded = self.global_map.forward(s, global); // [1, gen*(3+dim)]
        let gen = self.cfg.coarse_generated;
        let table = s.apply(Reshape(vec![gen, 3 + self.dim]), &[decoded]);
        let gen_anchors = s.apply(SliceCols { start: 0, len: 3 }, &[table]);
        let gen_feats = s.apply(SliceCols { start: 3, len: self.dim }, &[table]);

        let anchors2 = s.apply(crate::tape::ConcatRows, &[anchor_pts, gen_anchors]);
        let mut dec = s.apply(crate::tape::ConcatRows, &[anchor_feats, gen_feats]);
        stages.push(("queries".to_string(), dec));

        for (i, block) in self.decoder.iter().enumerate() {
            dec = block.forward(s, dec, Some(tokens));
            stages.push((format!("decoder.{i}"), dec));
        }

        let offsets_flat = self.head.forward(s, dec); // [Mq, factor*3]
        let mq = self.cfg.coarse_count();
        let factor = self.cfg.upsample_factor();
        let offsets = s.apply(Reshape(vec![mq, factor, 3]), &[offsets_flat]);
        let placed = s.apply(AddTokenAnchors, &[offsets, anchors2]);
        let dense = s.apply(Reshape(vec![mq * factor, 3]), &[placed]);
        Ok(ForwardVars {
            stages,
            coarse: anchors2,
            dense,
        })
    }

    pub fn complete(&self, pc: &PointCloud<F>) -> Result<(PointCloud<F>, PointCloud<F>), ModelError> {
        let mut s = Session::new(&self.params);
        let fwd = self.forward_vars(&mut s, pc)?;
        let coarse_t = s.value(fwd.coarse);
        let dense_t = s.value(fwd.dense);
        if !coarse_t.all_finite() || !dense_t.all_finite() {
            return Err(ModelError::NonFinite);
        }
        let mut coarse = PointCloud::from_tensor(coarse_t);
        let mut dense = PointCloud::from_tensor(dense_t);
        coarse.frame_label = pc.frame_label.clone();
        dense.frame_label = pc.frame_label.clone();
        Ok((coarse, dense))
    }
}

impl<F: Real> crate::model::Completer<F> for ScalarControlModel<F> {
    fn complete(&self, pc: &PointCloud<F>) -> Result<(PointCloud<F>, PointCloud<F>), ModelError> {
        ScalarControlModel::complete(self, pc)
    }

    fn min_input(&self) -> usize {
        ScalarControlModel::min_input(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{apply_transform, sample_transform, TransformDistribution};

    fn random_cloud(n: usize, seed: u64) -> PointCloud<f64> {
        let mut r = ChaCha12Rng::seed_from_u64(seed);
        PointCloud::new(
            (0..n)
                .map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)])
                .collect(),
        )
    }

    #[test]
    fn shape_contract_and_determinism() {
        let cfg = ModelConfig::tiny();
        let model = ScalarControlModel::<f64>::new(cfg.clone()).unwrap();
        let pc = random_cloud(cfg.n_in, 1);
        let (coarse, dense) = model.complete(&pc).unwrap();
        assert_eq!(coarse.len(), cfg.coarse_count());
        assert_eq!(dense.len(), cfg.n_out);
        let (c2, d2) = model.complete(&pc).unwrap();
        assert_eq!(coarse.points, c2.points);
        assert_eq!(dense.points, d2.points);
    }

    #[test]
    fn control_model_is_not_rotation_equivariant() {
        let cfg = ModelConfig::tiny();
        let model = ScalarControlModel::<f64>::new(cfg.clone()).unwrap();
        let pc = random_cloud(cfg.n_in, 2);
        let dist = TransformDistribution::so3(3);
        let mut worst: f64 = 0.0;
        for trial in 0..5 {
            let g = sample_transform::<f64>(&dist, trial);
            let (_, d1) = model.complete(&apply_transform(&g, &pc)).unwrap();
            let (_, d0) = model.complete(&pc).unwrap();
            let moved = apply_transform(&g, &d0);
            worst = worst.max(d1.to_tensor().relative_error(&moved.to_tensor(), 1e-12));
        }
        assert!(worst > 1e-3, "scalar model should break equivariance, err = {worst:e}");
    }
}

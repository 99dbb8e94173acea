//! Local feature extraction: k-NN graphs, farthest-point sampling, and the
//! vector-neuron edge convolution.
//!
//! Both the neighbor graph and the sampled centers depend only on distance
//! *orderings*, which similarity transforms preserve, so indices computed on
//! the raw input are valid for the transformed input as well.

use crate::geometry::{PointCloud, Vec3};
use crate::params::ParamStore;
use crate::tape::{
    AddBroadcastFeat, ConcatChannels, GatherRows, MeanGroups, Session, Sub, TokenMean, Var,
};
use crate::vn::{VnLinearLayer, VnMaxLayer, VnNonlinearLayer};
use crate::Real;
use rand_chacha::ChaCha12Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExtractError {
    #[error("k = {k} needs at least {} points, got {n}", k + 1)]
    NotEnoughNeighbors { k: usize, n: usize },
    #[error("cannot sample {want} patches from {got} points")]
    NotEnoughPoints { want: usize, got: usize },
}

/// Fixed k-nearest-neighbor graph, neighbors sorted by ascending distance
/// with ties broken by ascending index; self excluded unless padding kicked
/// in (recorded by `padded`).
#[derive(Clone, Debug)]
pub struct KnnGraph {
    pub neighbor_indices: Vec<usize>,
    pub k: usize,
    pub padded: bool,
}

impl KnnGraph {
    pub fn token_count(&self) -> usize {
        self.neighbor_indices.len() / self.k
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbor_indices[i * self.k..(i + 1) * self.k]
    }
}

fn dist_sq<F: Real>(a: &Vec3<F>, b: &Vec3<F>) -> F {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Build the k-NN graph. With `allow_pad`, clouds smaller than `k+1` repeat
/// their nearest neighbors cyclically instead of erroring.
pub fn build_knn<F: Real>(
    pc: &PointCloud<F>,
    k: usize,
    allow_pad: bool,
) -> Result<KnnGraph, ExtractError> {
    let n = pc.len();
    assert!(k >= 1 && n >= 2);
    if k >= n && !allow_pad {
        return Err(ExtractError::NotEnoughNeighbors { k, n });
    }
    let avail = k.min(n - 1);
    let mut neighbor_indices = Vec::with_capacity(n * k);
    let mut order: Vec<usize> = Vec::with_capacity(n - 1);
    for i in 0..n {
        order.clear();
        order.extend((0..n).filter(|&j| j != i));
        let key = |&j: &usize| (dist_sq(&pc.points[i], &pc.points[j]), j);
        if avail < n - 1 {
            order.select_nth_unstable_by(avail - 1, |a, b| key(a).partial_cmp(&key(b)).unwrap());
            order.truncate(avail);
        }
        order.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
        for slot in 0..k {
            neighbor_indices.push(order[slot % avail]);
        }
    }
    Ok(KnnGraph {
        neighbor_indices,
        k,
        padded: avail < k,
    })
}

/// Greedy farthest-point sampling from a fixed start index. Deterministic;
/// ties resolved toward the lower index.
pub fn farthest_point_sample<F: Real>(points: &[Vec3<F>], count: usize, start: usize) -> Vec<usize> {
    assert!(count >= 1 && count <= points.len());
    let mut chosen = Vec::with_capacity(count);
    let mut min_d = vec![F::infinity(); points.len()];
    let mut cur = start;
    chosen.push(cur);
    while chosen.len() < count {
        let mut best = F::neg_infinity();
        let mut best_i = 0usize;
        for (i, d) in min_d.iter_mut().enumerate() {
            let nd = dist_sq(&points[i], &points[cur]);
            if nd < *d {
                *d = nd;
            }
            if *d > best {
                best = *d;
                best_i = i;
            }
        }
        cur = best_i;
        chosen.push(cur);
    }
    chosen
}

/// Indices of the `k` points nearest to `center` (the center itself included
/// when it is one of the points), ties by index.
fn group_nearest<F: Real>(points: &[Vec3<F>], center: &Vec3<F>, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    let key = |&j: &usize| (dist_sq(center, &points[j]), j);
    if k < points.len() {
        order.select_nth_unstable_by(k - 1, |a, b| key(a).partial_cmp(&key(b)).unwrap());
        order.truncate(k);
    }
    order.sort_by(|a, b| key(a).partial_cmp(&key(b)).unwrap());
    order
}

/// One edge-convolution layer: for every token, build edge features
/// `(V_j + Vbar - V_i) (+) V_i` over its neighborhood, map them through a
/// linear + leaky nonlinearity pair, and max-pool over the neighbors.
#[derive(Debug)]
pub struct DgcnnLayer<F> {
    pub in_dim: usize,
    pub out_dim: usize,
    pub edge_lift: VnLinearLayer<F>,
    pub edge_act: VnNonlinearLayer<F>,
    pub pool: VnMaxLayer<F>,
}

impl<F: Real> DgcnnLayer<F> {
    pub fn new(
        store: &mut ParamStore<F>,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias_norm: f64,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        Self {
            in_dim,
            out_dim,
            edge_lift: VnLinearLayer::new(store, &format!("{name}.lift"), 2 * in_dim, out_dim, bias_norm, rng),
            edge_act: VnNonlinearLayer::new(store, &format!("{name}.act"), out_dim, out_dim, 0.2, bias_norm, rng),
            pool: VnMaxLayer::new(store, &format!("{name}.pool"), out_dim, bias_norm, rng),
        }
    }

    pub fn forward(&self, s: &mut Session<F>, x: Var, graph: &KnnGraph) -> Var {
        let m = s.value(x).shape()[0];
        assert_eq!(graph.token_count(), m, "graph token count must match features");
        let k = graph.k;
        let center_idx: Vec<usize> = (0..m).flat_map(|i| std::iter::repeat(i).take(k)).collect();

        let vbar = s.apply(TokenMean, &[x]);
        let neighbors = s.apply(GatherRows(graph.neighbor_indices.clone()), &[x]);
        let centers = s.apply(GatherRows(center_idx), &[x]);
        let diff = s.apply(Sub, &[neighbors, centers]);
        let rel = s.apply(AddBroadcastFeat, &[diff, vbar]);
        let edge = s.apply(ConcatChannels, &[rel, centers]);

        let h = self.edge_lift.forward(s, edge);
        let h = self.edge_act.forward(s, h);
        self.pool.forward_grouped(s, h, k)
    }
}

/// Patch embedding: a small edge-convolution stack over the raw points, then
/// farthest-point-sampled centers whose neighborhoods are mean-pooled and
/// widened into one token per patch.
#[derive(Debug)]
pub struct PatchEmbed<F> {
    pub patch_count: usize,
    pub knn_k: usize,
    pub group_k: usize,
    pub out_dim: usize,
    pub layers: Vec<DgcnnLayer<F>>,
    pub widen: VnLinearLayer<F>,
}

impl<F: Real> PatchEmbed<F> {
    pub fn new(
        store: &mut ParamStore<F>,
        name: &str,
        patch_count: usize,
        knn_k: usize,
        group_k: usize,
        depth: usize,
        out_dim: usize,
        bias_norm: f64,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        assert!(depth >= 1);
        // channel widths double per layer up to out_dim/2, starting from the
        // 1-channel coordinate lift
        let mut layers = Vec::with_capacity(depth);
        let mut in_dim = 1;
        for li in 0..depth {
            let width = (out_dim / (1 << (depth - li))).max(2);
            layers.push(DgcnnLayer::new(store, &format!("{name}.dgcnn{li}"), in_dim, width, bias_norm, rng));
            in_dim = width;
        }
        let widen = VnLinearLayer::new(store, &format!("{name}.widen"), in_dim, out_dim, bias_norm, rng);
        Self {
            patch_count,
            knn_k,
            group_k,
            out_dim,
            layers,
            widen,
        }
    }

    pub fn min_points(&self) -> usize {
        self.patch_count.max(self.knn_k + 1).max(self.group_k)
    }

    /// Tokens `[patch_count, out_dim, 3]` plus the sampled center indices.
    pub fn forward(
        &self,
        s: &mut Session<F>,
        pc: &PointCloud<F>,
        points_var: Var,
    ) -> Result<(Var, Vec<usize>), ExtractError> {
        if pc.len() < self.min_points() {
            return Err(ExtractError::NotEnoughPoints {
                want: self.min_points(),
                got: pc.len(),
            });
        }
        let graph = build_knn(pc, self.knn_k, false)?;
        let mut h = s.apply(crate::tape::LiftRepeat(1), &[points_var]);
        for layer in &self.layers {
            h = layer.forward(s, h, &graph);
        }
        let centers = farthest_point_sample(&pc.points, self.patch_count, 0);
        let mut group_idx = Vec::with_capacity(self.patch_count * self.group_k);
        for &c in &centers {
            group_idx.extend(group_nearest(&pc.points, &pc.points[c], self.group_k));
        }
        let grouped = s.apply(GatherRows(group_idx), &[h]);
        let pooled = s.apply(MeanGroups(self.group_k), &[grouped]);
        let tokens = self.widen.forward(s, pooled);
        Ok((tokens, centers))
    }
}

/// One-shot edge convolution on a plain feature set with a fixed graph.
pub fn dgcnn_forward<F: Real>(
    layer: &DgcnnLayer<F>,
    store: &ParamStore<F>,
    vs: &crate::vn::VectorFeatureSet<F>,
    graph: &KnnGraph,
) -> crate::vn::VectorFeatureSet<F> {
    let mut s = Session::new(store);
    let x = s.leaf(vs.tokens().clone());
    let y = layer.forward(&mut s, x, graph);
    crate::vn::VectorFeatureSet::new(s.value(y).clone())
}

/// One-shot patch embedding of a raw cloud into per-patch tokens.
pub fn embed_patches<F: Real>(
    embed: &PatchEmbed<F>,
    store: &ParamStore<F>,
    pc: &PointCloud<F>,
) -> Result<crate::vn::VectorFeatureSet<F>, ExtractError> {
    let mut s = Session::new(store);
    let pts = s.leaf(pc.to_tensor());
    let (tokens, _) = embed.forward(&mut s, pc, pts)?;
    Ok(crate::vn::VectorFeatureSet::new(s.value(tokens).clone()))
}

//! The coarse-to-fine completion network.
//!
//! Pipeline: patch extractor, self-attention encoder, query generator
//! (sampled input anchors plus generated queries from a pooled global
//! feature), cross-attention decoder, reconstruction head that expands each
//! query into a fixed number of offset points around its anchor. Every stage
//! commutes with SIM(3), so the whole map does.

use crate::control::ScalarControlModel;
use crate::extract::{farthest_point_sample, ExtractError, PatchEmbed};
use crate::geometry::PointCloud;
use crate::params::ParamStore;
use crate::tape::{
    AddTokenAnchors, CenterChannels, ConcatRows, GatherRows, LiftRepeat, Reshape, Session,
    SliceChannel, Var,
};
use crate::blocks::{AttentionMode, Sim3Block};
use crate::vn::{VnLinearLayer, VnMaxLayer};
use crate::Real;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Extract(#[from] ExtractError),
    #[error("input has {got} points, model needs at least {need}")]
    InputTooSmall { need: usize, got: usize },
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("non-finite values in forward pass")]
    NonFinite,
}

/// Sizing of the completion network. `desk` is the default test scale;
/// `full` mirrors the benchmark-scale point counts.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct ModelConfig {
    pub n_in: usize,
    pub n_out: usize,
    pub patch_count: usize,
    pub channel_width: usize,
    pub encoder_depth: usize,
    pub decoder_depth: usize,
    pub head_count: usize,
    pub knn_k: usize,
    pub group_k: usize,
    pub dgcnn_depth: usize,
    /// Queries anchored on farthest-point-sampled input points.
    pub coarse_from_input: usize,
    /// Queries generated from the pooled encoder feature.
    pub coarse_generated: usize,
    /// Norm of the optional equivariance-breaking bias on every linear map;
    /// zero keeps the network exactly equivariant.
    pub bias_norm: f64,
    pub seed: u64,
}

impl ModelConfig {
    pub fn desk() -> Self {
        Self {
            n_in: 256,
            n_out: 1024,
            patch_count: 32,
            channel_width: 32,
            encoder_depth: 3,
            decoder_depth: 2,
            head_count: 4,
            knn_k: 16,
            group_k: 16,
            dgcnn_depth: 2,
            coarse_from_input: 24,
            coarse_generated: 40,
            bias_norm: 0.0,
            seed: 0,
        }
    }

    pub fn full() -> Self {
        Self {
            n_in: 2048,
            n_out: 16384,
            patch_count: 128,
            channel_width: 64,
            encoder_depth: 6,
            decoder_depth: 8,
            head_count: 8,
            knn_k: 16,
            group_k: 32,
            dgcnn_depth: 2,
            coarse_from_input: 64,
            coarse_generated: 448,
            bias_norm: 0.0,
            seed: 0,
        }
    }

    /// A tiny configuration for fast pipeline tests.
    pub fn tiny() -> Self {
        Self {
            n_in: 48,
            n_out: 128,
            patch_count: 8,
            channel_width: 8,
            encoder_depth: 1,
            decoder_depth: 1,
            head_count: 2,
            knn_k: 4,
            group_k: 6,
            dgcnn_depth: 2,
            coarse_from_input: 6,
            coarse_generated: 10,
            bias_norm: 0.0,
            seed: 0,
        }
    }

    pub fn coarse_count(&self) -> usize {
        self.coarse_from_input + self.coarse_generated
    }

    pub fn upsample_factor(&self) -> usize {
        self.n_out / self.coarse_count()
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_bias_norm(mut self, b: f64) -> Self {
        self.bias_norm = b;
        self
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let fail = |msg: String| Err(ModelError::BadConfig(msg));
        if self.coarse_count() == 0 || self.n_out % self.coarse_count() != 0 {
            return fail(format!(
                "n_out = {} must be an integer multiple of the coarse count {}",
                self.n_out,
                self.coarse_count()
            ));
        }
        if self.head_count == 0 || self.channel_width % self.head_count != 0 {
            return fail(format!(
                "channel width {} must be divisible by head count {}",
                self.channel_width, self.head_count
            ));
        }
        if self.coarse_from_input > self.n_in {
            return fail(format!(
                "coarse_from_input {} exceeds n_in {}",
                self.coarse_from_input, self.n_in
            ));
        }
        if self.bias_norm < 0.0 {
            return fail("bias_norm must be non-negative".into());
        }
        if self.patch_count == 0 || self.encoder_depth == 0 || self.decoder_depth == 0 {
            return fail("depths and patch count must be positive".into());
        }
        Ok(())
    }
}

/// Fused query set: farthest-point-sampled input anchors lifted to feature
/// width, followed by queries decoded from the pooled encoder output.
#[derive(Debug)]
pub struct QueryGenerator<F> {
    pub input_sample_count: usize,
    pub generated_count: usize,
    pub dim: usize,
    pub global_pool: VnMaxLayer<F>,
    pub query_map: VnLinearLayer<F>,
}

impl<F: Real> QueryGenerator<F> {
    pub fn new(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        input_sample_count: usize,
        generated_count: usize,
        bias_norm: f64,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        Self {
            input_sample_count,
            generated_count,
            dim,
            global_pool: VnMaxLayer::new(store, &format!("{name}.pool"), dim, bias_norm, rng),
            query_map: VnLinearLayer::new(
                store,
                &format!("{name}.map"),
                dim,
                generated_count * dim,
                bias_norm,
                rng,
            ),
        }
    }

    pub fn query_count(&self) -> usize {
        self.input_sample_count + self.generated_count
    }

    pub fn forward(
        &self,
        s: &mut Session<F>,
        encoder_out: Var,
        points_var: Var,
        partial: &PointCloud<F>,
    ) -> Result<Var, ModelError> {
        if partial.len() < self.input_sample_count {
            return Err(ModelError::InputTooSmall {
                need: self.input_sample_count,
                got: partial.len(),
            });
        }
        let fps = farthest_point_sample(&partial.points, self.input_sample_count, 0);
        let anchor_pts = s.apply(GatherRows(fps), &[points_var]);
        let q_input = s.apply(LiftRepeat(self.dim), &[anchor_pts]);

        let pooled = self.global_pool.forward_set(s, encoder_out);
        let mapped = self.query_map.forward(s, pooled);
        let q_generated = s.apply(Reshape(vec![self.generated_count, self.dim, 3]), &[mapped]);

        Ok(s.apply(ConcatRows, &[q_input, q_generated]))
    }
}

/// Expands each decoded query into `factor` offsets around its anchor; the
/// decoder feature is channel-centered first so no translation accumulates.
#[derive(Debug)]
pub struct ReconstructionHead<F> {
    pub factor: usize,
    pub expand_map: VnLinearLayer<F>,
}

impl<F: Real> ReconstructionHead<F> {
    pub fn new(
        store: &mut ParamStore<F>,
        name: &str,
        dim: usize,
        factor: usize,
        bias_norm: f64,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        Self {
            factor,
            expand_map: VnLinearLayer::new(store, &format!("{name}.expand"), dim, factor, bias_norm, rng),
        }
    }

    pub fn forward(&self, s: &mut Session<F>, decoder_out: Var, anchors: Var) -> Var {
        let m = s.value(decoder_out).shape()[0];
        debug_assert_eq!(s.value(anchors).shape(), &[m, 3]);
        let centered = s.apply(CenterChannels, &[decoder_out]);
        let offsets = self.expand_map.forward(s, centered); // [M, factor, 3]
        let pts = s.apply(AddTokenAnchors, &[offsets, anchors]);
        s.apply(Reshape(vec![m * self.factor, 3]), &[pts])
    }
}

/// Recorded forward pass: named stage outputs plus the two result vars.
pub struct ForwardVars {
    pub stages: Vec<(String, Var)>,
    pub coarse: Var,
    pub dense: Var,
}

pub struct CompletionModel<F: Real> {
    pub cfg: ModelConfig,
    pub params: ParamStore<F>,
    extractor: PatchEmbed<F>,
    encoder: Vec<Sim3Block<F>>,
    query_gen: QueryGenerator<F>,
    decoder: Vec<Sim3Block<F>>,
    head: ReconstructionHead<F>,
}

impl<F: Real> CompletionModel<F> {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha12Rng::seed_from_u64(cfg.seed);
        rng.set_stream(1);
        let d = cfg.channel_width;
        let b = cfg.bias_norm;
        let extractor = PatchEmbed::new(
            &mut store,
            "extract",
            cfg.patch_count,
            cfg.knn_k,
            cfg.group_k,
            cfg.dgcnn_depth,
            d,
            b,
            &mut rng,
        );
        let encoder = (0..cfg.encoder_depth)
            .map(|i| {
                Sim3Block::new(
                    &mut store,
                    &format!("enc{i}"),
                    d,
                    cfg.head_count,
                    AttentionMode::SelfAttention,
                    b,
                    &mut rng,
                )
            })
            .collect();
        let query_gen = QueryGenerator::new(
            &mut store,
            "qgen",
            d,
            cfg.coarse_from_input,
            cfg.coarse_generated,
            b,
            &mut rng,
        );
        let decoder = (0..cfg.decoder_depth)
            .map(|i| {
                Sim3Block::new(
                    &mut store,
                    &format!("dec{i}"),
                    d,
                    cfg.head_count,
                    AttentionMode::CrossAttention,
                    b,
                    &mut rng,
                )
            })
            .collect();
        let head = ReconstructionHead::new(&mut store, "head", d, cfg.upsample_factor(), b, &mut rng);
        Ok(Self {
            cfg,
            params: store,
            extractor,
            encoder,
            query_gen,
            decoder,
            head,
        })
    }

    pub fn min_input(&self) -> usize {
        self.extractor.min_points().max(self.cfg.coarse_from_input)
    }

    /// Record the full forward pass on an existing session.
    pub fn forward_vars(&self, s: &mut Session<F>, pc: &PointCloud<F>) -> Result<ForwardVars, ModelError> {
        if pc.len() < self.min_input() {
            return Err(ModelError::InputTooSmall {
                need: self.min_input(),
                got: pc.len(),
            });
        }
        let mut stages = Vec::new();
        let points = s.leaf(pc.to_tensor());
        let (mut tokens, _) = self.extractor.forward(s, pc, points)?;
        stages.push(("extractor".to_string(), tokens));
        for (i, block) in self.encoder.iter().enumerate() {
            tokens = block.forward(s, tokens, None);
            stages.push((format!("encoder.{i}"), tokens));
        }
        let queries = self.query_gen.forward(s, tokens, points, pc)?;
        stages.push(("queries".to_string(), queries));
        let anchors = s.apply(SliceChannel(0), &[queries]);

        let mut dec = queries;
        for (i, block) in self.decoder.iter().enumerate() {
            dec = block.forward(s, dec, Some(tokens));
            stages.push((format!("decoder.{i}"), dec));
        }
        let dense = self.head.forward(s, dec, anchors);
        Ok(ForwardVars {
            stages,
            coarse: anchors,
            dense,
        })
    }

    /// Coarse anchors and the dense completion, in the input's frame.
    pub fn complete(&self, pc: &PointCloud<F>) -> Result<(PointCloud<F>, PointCloud<F>), ModelError> {
        let (coarse, dense, _) = self.complete_traced(pc, false)?;
        Ok((coarse, dense))
    }

    /// Like [`Self::complete`] but optionally returning every stage output,
    /// which the equivariance audit compares across transformed runs.
    pub fn complete_traced(
        &self,
        pc: &PointCloud<F>,
        with_trace: bool,
    ) -> Result<(PointCloud<F>, PointCloud<F>, Vec<(String, crate::tensor::Tensor<F>)>), ModelError> {
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
        let trace = if with_trace {
            fwd.stages
                .into_iter()
                .map(|(name, var)| (name, s.value(var).clone()))
                .collect()
        } else {
            Vec::new()
        };
        Ok((coarse, dense, trace))
    }

    /// Rescale every bias magnitude by `factor` relative to its configured
    /// value (the approximate-equivariance sweep).
    pub fn set_bias_scale(&mut self, factor: f64) {
        let f = F::from_f64_lossy(factor);
        let mut apply = |l: &mut VnLinearLayer<F>| {
            if let Some(b) = l.bias_mut() {
                b.set_scale(f);
            }
        };
        for layer in self.extractor.layers.iter_mut() {
            apply(&mut layer.edge_lift);
            apply(&mut layer.edge_act.feature_map);
            apply(&mut layer.edge_act.direction_map);
            apply(&mut layer.edge_act.origin_map);
            apply(&mut layer.pool.direction_map);
            apply(&mut layer.pool.origin_map);
        }
        apply(&mut self.extractor.widen);
        for block in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            block.for_each_linear(&mut apply);
        }
        apply(&mut self.query_gen.global_pool.direction_map);
        apply(&mut self.query_gen.global_pool.origin_map);
        apply(&mut self.query_gen.query_map);
        apply(&mut self.head.expand_map);
    }
}

/// Anything that completes a partial cloud into (coarse, dense).
pub trait Completer<F: Real>: Sync {
    fn complete(&self, pc: &PointCloud<F>) -> Result<(PointCloud<F>, PointCloud<F>), ModelError>;
    fn min_input(&self) -> usize;
}

impl<F: Real> Completer<F> for CompletionModel<F> {
    fn complete(&self, pc: &PointCloud<F>) -> Result<(PointCloud<F>, PointCloud<F>), ModelError> {
        CompletionModel::complete(self, pc)
    }

    fn min_input(&self) -> usize {
        CompletionModel::min_input(self)
    }
}

/// Closures double as models in tests (a perfect oracle returns the ground
/// truth regardless of input).
impl<F: Real, T> Completer<F> for T
where
    T: Fn(&PointCloud<F>) -> (PointCloud<F>, PointCloud<F>) + Sync,
{
    fn complete(&self, pc: &PointCloud<F>) -> Result<(PointCloud<F>, PointCloud<F>), ModelError> {
        Ok(self(pc))
    }

    fn min_input(&self) -> usize {
        1
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Equivariant,
    ScalarControl,
}

/// A trained model of either architecture.
pub enum AnyModel<F: Real> {
    Equivariant(CompletionModel<F>),
    Control(ScalarControlModel<F>),
}

impl<F: Real> AnyModel<F> {
    pub fn kind(&self) -> ModelKind {
        match self {
            AnyModel::Equivariant(_) => ModelKind::Equivariant,
            AnyModel::Control(_) => ModelKind::ScalarControl,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        match self {
            AnyModel::Equivariant(m) => &m.cfg,
            AnyModel::Control(m) => &m.cfg,
        }
    }

    pub fn params(&self) -> &ParamStore<F> {
        match self {
            AnyModel::Equivariant(m) => &m.params,
            AnyModel::Control(m) => &m.params,
        }
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<F> {
        match self {
            AnyModel::Equivariant(m) => &mut m.params,
            AnyModel::Control(m) => &mut m.params,
        }
    }

    pub fn build(kind: ModelKind, cfg: ModelConfig) -> Result<Self, ModelError> {
        Ok(match kind {
            ModelKind::Equivariant => AnyModel::Equivariant(CompletionModel::new(cfg)?),
            ModelKind::ScalarControl => AnyModel::Control(ScalarControlModel::new(cfg)?),
        })
    }
}

impl<F: Real> Completer<F> for AnyModel<F> {
    fn complete(&self, pc: &PointCloud<F>) -> Result<(PointCloud<F>, PointCloud<F>), ModelError> {
        match self {
            AnyModel::Equivariant(m) => m.complete(pc),
            AnyModel::Control(m) => m.complete(pc),
        }
    }

    fn min_input(&self) -> usize {
        match self {
            AnyModel::Equivariant(m) => m.min_input(),
            AnyModel::Control(m) => m.min_input(),
        }
    }
}

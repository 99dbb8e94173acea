//! Property suites for the group laws and for block-stack equivariance,
//! including the bias-induced error growth across depth.

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use simeq_core::blocks::{block_forward, AttentionMode, Sim3Block};
use simeq_core::geometry::{
    apply_transform, sample_transform, PointCloud, Sim3Transform, TransformDistribution,
};
use simeq_core::params::ParamStore;
use simeq_core::tensor::Tensor;
use simeq_core::vn::{random_tokens, VectorFeatureSet};

fn audit_dist(seed: u64) -> TransformDistribution {
    TransformDistribution::sim3(seed)
        .with_scale_range(0.1, 10.0)
        .with_translation_range(10.0)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn group_action_is_a_homomorphism(
        seed1 in 0u64..1000,
        seed2 in 0u64..1000,
        cloud_seed in 0u64..1000,
    ) {
        let g1 = sample_transform::<f64>(&audit_dist(7), seed1);
        let g2 = sample_transform::<f64>(&audit_dist(8), seed2);
        let mut r = ChaCha12Rng::seed_from_u64(cloud_seed);
        let pc = PointCloud::new(random_tokens::<f64>(16, 1, &mut r).into_data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect());
        let composed = apply_transform(&g1.compose(&g2), &pc);
        let sequential = apply_transform(&g1, &apply_transform(&g2, &pc));
        prop_assert!(composed.max_point_distance(&sequential) < 1e-9);
    }

    #[test]
    fn inverse_law_round_trips(seed in 0u64..1000, cloud_seed in 0u64..1000) {
        let g = sample_transform::<f64>(&audit_dist(9), seed);
        let mut r = ChaCha12Rng::seed_from_u64(cloud_seed);
        let pc = PointCloud::new(random_tokens::<f64>(16, 1, &mut r).into_data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect());
        let round = apply_transform(&g.inverse(), &apply_transform(&g, &pc));
        prop_assert!(round.max_point_distance(&pc) < 1e-9);
    }

    #[test]
    fn sampled_rotations_satisfy_the_group_invariants(seed in 0u64..1000, index in 0u64..1000) {
        let g = sample_transform::<f64>(&TransformDistribution::sim3(seed), index);
        prop_assert!(Sim3Transform::new(g.scale, g.rotation, g.translation).is_ok());
    }
}

fn build_stack(depth: usize, bias: f64, seed: u64) -> (ParamStore<f64>, Vec<Sim3Block<f64>>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let blocks = (0..depth)
        .map(|i| {
            Sim3Block::new(
                &mut store,
                &format!("blk{i}"),
                8,
                2,
                AttentionMode::SelfAttention,
                bias,
                &mut rng,
            )
        })
        .collect();
    (store, blocks)
}

fn stack_forward(
    store: &ParamStore<f64>,
    blocks: &[Sim3Block<f64>],
    x: &Tensor<f64>,
) -> Tensor<f64> {
    let mut vs = VectorFeatureSet::new(x.clone());
    for b in blocks {
        vs = block_forward(b, store, &vs, None);
    }
    vs.tokens().clone()
}

fn stack_error(store: &ParamStore<f64>, blocks: &[Sim3Block<f64>], trials: u64, seed: u64) -> f64 {
    let dist = audit_dist(seed);
    let mut r = ChaCha12Rng::seed_from_u64(seed ^ 0x5555);
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let x = random_tokens::<f64>(6, 8, &mut r);
        let g = sample_transform::<f64>(&dist, t);
        let lhs = stack_forward(store, blocks, &g.apply_features(&x));
        let rhs = g.apply_features(&stack_forward(store, blocks, &x));
        worst = worst.max(lhs.relative_error(&rhs, 1e-12));
    }
    worst
}

#[test]
fn block_stacks_stay_equivariant_across_depths() {
    for depth in [1usize, 2, 6] {
        let (store, blocks) = build_stack(depth, 0.0, depth as u64);
        let worst = stack_error(&store, &blocks, 40, 100 + depth as u64);
        assert!(worst < 1e-6, "depth {depth}: relative error {worst:e}");
    }
}

#[test]
fn bias_error_grows_at_most_linearly_with_depth() {
    // with per-layer bias on, depth-L error stays within L x (depth-1 max
    // error) plus a 20% margin
    let bias = 1e-3;
    let (store1, blocks1) = build_stack(1, bias, 11);
    let e1 = stack_error(&store1, &blocks1, 40, 200);
    assert!(e1 > 0.0, "bias must break exactness");
    for depth in [2usize, 6] {
        let (store, blocks) = build_stack(depth, bias, 11 + depth as u64);
        let e = stack_error(&store, &blocks, 40, 200);
        let bound = depth as f64 * e1 * 1.2;
        assert!(
            e <= bound,
            "depth {depth}: error {e:e} exceeds linear-accumulation bound {bound:e} (e1 = {e1:e})"
        );
    }
}

#[test]
fn scale_only_and_translation_only_actions_are_absorbed() {
    // canonicalization makes pure scale/translation changes invisible to the
    // attention weights and the stack output follows them exactly
    let (store, blocks) = build_stack(2, 0.0, 21);
    let mut r = ChaCha12Rng::seed_from_u64(22);
    for trial in 0..20 {
        let x = random_tokens::<f64>(5, 8, &mut r);
        let g = Sim3Transform {
            scale: 0.05 + (trial as f64) * 0.7,
            rotation: simeq_core::geometry::mat3_identity(),
            translation: [trial as f64, -1.0, 2.5],
        };
        let lhs = stack_forward(&store, &blocks, &g.apply_features(&x));
        let rhs = g.apply_features(&stack_forward(&store, &blocks, &x));
        assert!(lhs.relative_error(&rhs, 1e-12) < 1e-9);
    }
}

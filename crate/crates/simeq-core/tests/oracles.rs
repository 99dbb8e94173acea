//! Independent brute-force oracles for the metrics and the search
//! structures: everything here is a direct O(n^2) transcription of the
//! definitions, kept free of the library's search paths.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use simeq_core::geometry::PointCloud;
use simeq_core::metrics::{chamfer_l1, f_score, fidelity, mmd};
use simeq_core::nn_search::{nearest_brute, KdTree3};

fn cloud(n: usize, r: &mut ChaCha12Rng) -> PointCloud<f64> {
    PointCloud::new(
        (0..n)
            .map(|_| [r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)])
            .collect(),
    )
}

fn dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)).sqrt()
}

fn min_dist(p: &[f64; 3], to: &PointCloud<f64>) -> f64 {
    to.points.iter().map(|q| dist(p, q)).fold(f64::INFINITY, f64::min)
}

fn chamfer_oracle(a: &PointCloud<f64>, b: &PointCloud<f64>) -> f64 {
    let ab: f64 = a.points.iter().map(|p| min_dist(p, b)).sum::<f64>() / a.len() as f64;
    let ba: f64 = b.points.iter().map(|p| min_dist(p, a)).sum::<f64>() / b.len() as f64;
    0.5 * (ab + ba)
}

fn f_score_oracle(pred: &PointCloud<f64>, gt: &PointCloud<f64>, tau: f64) -> f64 {
    let p = pred.points.iter().filter(|p| min_dist(p, gt) <= tau).count() as f64 / pred.len() as f64;
    let r = gt.points.iter().filter(|q| min_dist(q, pred) <= tau).count() as f64 / gt.len() as f64;
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

fn fidelity_oracle(input: &PointCloud<f64>, pred: &PointCloud<f64>) -> f64 {
    input.points.iter().map(|p| min_dist(p, pred)).sum::<f64>() / input.len() as f64
}

#[test]
fn metrics_match_brute_force_on_100_instances() {
    let mut r = ChaCha12Rng::seed_from_u64(0xACE);
    for i in 0..100 {
        let na = r.gen_range(1..=128);
        let nb = r.gen_range(1..=128);
        let a = cloud(na, &mut r);
        let b = cloud(nb, &mut r);
        let tau = r.gen_range(0.05..0.5);

        assert!((chamfer_l1(&a, &b) - chamfer_oracle(&a, &b)).abs() < 1e-12, "chamfer, instance {i}");
        assert!((f_score(&a, &b, tau) - f_score_oracle(&a, &b, tau)).abs() < 1e-12, "f_score, instance {i}");
        assert!((fidelity(&a, &b) - fidelity_oracle(&a, &b)).abs() < 1e-12, "fidelity, instance {i}");

        let refs = vec![cloud(r.gen_range(1..=64), &mut r), cloud(r.gen_range(1..=64), &mut r)];
        let oracle = refs.iter().map(|c| chamfer_oracle(&a, c)).fold(f64::INFINITY, f64::min);
        assert!((mmd(&a, &refs) - oracle).abs() < 1e-12, "mmd, instance {i}");
    }
}

#[test]
fn kdtree_and_brute_chamfer_paths_agree() {
    // above the cutoff chamfer_l1 routes through the kd-tree; verify both
    // paths give identical sums on the same data
    let mut r = ChaCha12Rng::seed_from_u64(0xBEE);
    let big_a = cloud(700, &mut r);
    let big_b = cloud(650, &mut r);
    let kd_val = chamfer_l1(&big_a, &big_b);

    let tree_free: f64 = {
        let ab: f64 = big_a.points.iter().map(|p| nearest_brute(p, &big_b.points).1).sum::<f64>()
            / big_a.len() as f64;
        let ba: f64 = big_b.points.iter().map(|p| nearest_brute(p, &big_a.points).1).sum::<f64>()
            / big_b.len() as f64;
        0.5 * (ab + ba)
    };
    assert_eq!(kd_val, tree_free, "kd-tree and brute paths must agree exactly");

    // and the tree agrees with brute per query
    let tree = KdTree3::new(&big_b.points);
    for q in big_a.points.iter().take(100) {
        assert_eq!(tree.nearest(q).0, nearest_brute(q, &big_b.points).0);
    }
}

#[test]
fn tape_replay_reproduces_model_forward_bitwise() {
    use simeq_core::model::{CompletionModel, ModelConfig};
    use simeq_core::tape::Session;

    let cfg = ModelConfig::tiny();
    let model = CompletionModel::<f64>::new(cfg.clone()).unwrap();
    let mut r = ChaCha12Rng::seed_from_u64(3);
    let pc = cloud(cfg.n_in, &mut r);
    let mut s = Session::new(&model.params);
    let fwd = model.forward_vars(&mut s, &pc).unwrap();
    let _ = fwd;
    assert!(s.tape.replay_matches(), "replay must be bitwise identical");
}

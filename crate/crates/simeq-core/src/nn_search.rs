//! Exact nearest-neighbor search over 3D point sets: brute force for small
//! sets, a kd-tree above [`BRUTE_FORCE_CUTOFF`] points. Both paths break
//! distance ties toward the lowest point index, so assignments are
//! deterministic and path-independent.

use crate::geometry::Vec3;
use crate::Real;

/// Target-set size above which queries go through the kd-tree.
pub const BRUTE_FORCE_CUTOFF: usize = 512;

fn dist_sq<F: Real>(a: &Vec3<F>, b: &Vec3<F>) -> F {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// Linear scan; ties to the lowest index.
pub fn nearest_brute<F: Real>(query: &Vec3<F>, points: &[Vec3<F>]) -> (usize, F) {
    assert!(!points.is_empty());
    let mut best = F::infinity();
    let mut best_i = 0usize;
    for (i, p) in points.iter().enumerate() {
        let d = dist_sq(query, p);
        if d < best {
            best = d;
            best_i = i;
        }
    }
    (best_i, best.sqrt())
}

enum KdNode {
    Leaf {
        start: usize,
        len: usize,
    },
    Split {
        axis: usize,
        value: f64,
        left: Box<KdNode>,
        right: Box<KdNode>,
    },
}

/// Static kd-tree over a borrowed point slice.
pub struct KdTree3<'a, F> {
    points: &'a [Vec3<F>],
    order: Vec<usize>,
    root: KdNode,
}

const LEAF_SIZE: usize = 8;

impl<'a, F: Real> KdTree3<'a, F> {
    pub fn new(points: &'a [Vec3<F>]) -> Self {
        assert!(!points.is_empty());
        let mut order: Vec<usize> = (0..points.len()).collect();
        let root = Self::build(points, &mut order, 0, points.len());
        Self {
            points,
            order,
            root,
        }
    }

    fn build(points: &[Vec3<F>], order: &mut [usize], start: usize, len: usize) -> KdNode {
        if len <= LEAF_SIZE {
            return KdNode::Leaf { start, len };
        }
        // split on the widest axis at the median
        let slice = &mut order[start..start + len];
        let mut lo = [F::infinity(); 3];
        let mut hi = [F::neg_infinity(); 3];
        for &i in slice.iter() {
            for c in 0..3 {
                lo[c] = lo[c].min(points[i][c]);
                hi[c] = hi[c].max(points[i][c]);
            }
        }
        let axis = (0..3)
            .max_by(|&a, &b| (hi[a] - lo[a]).partial_cmp(&(hi[b] - lo[b])).unwrap())
            .unwrap();
        let mid = len / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| {
            (points[a][axis], a).partial_cmp(&(points[b][axis], b)).unwrap()
        });
        let value = points[slice[mid]][axis].to_f64().unwrap();
        let left = Box::new(Self::build(points, order, start, mid));
        let right = Box::new(Self::build(points, order, start + mid, len - mid));
        KdNode::Split {
            axis,
            value,
            left,
            right,
        }
    }

    pub fn nearest(&self, query: &Vec3<F>) -> (usize, F) {
        let mut best = F::infinity();
        let mut best_i = usize::MAX;
        self.search(&self.root, query, &mut best, &mut best_i);
        (best_i, best.sqrt())
    }

    fn search(&self, node: &KdNode, query: &Vec3<F>, best: &mut F, best_i: &mut usize) {
        match node {
            KdNode::Leaf { start, len } => {
                for &i in &self.order[*start..start + len] {
                    let d = dist_sq(query, &self.points[i]);
                    // strict inequality plus index comparison keeps the
                    // lowest index on exact ties, matching the brute path
                    if d < *best || (d == *best && i < *best_i) {
                        *best = d;
                        *best_i = i;
                    }
                }
            }
            KdNode::Split {
                axis,
                value,
                left,
                right,
            } => {
                let q = query[*axis].to_f64().unwrap();
                let (near, far) = if q < *value { (left, right) } else { (right, left) };
                self.search(near, query, best, best_i);
                let plane = F::from_f64_lossy(q - *value);
                if plane * plane <= *best {
                    self.search(far, query, best, best_i);
                }
            }
        }
    }
}

/// Nearest neighbor in `to` for every point of `from`, as `(index, distance)`
/// pairs. Chooses brute force or kd-tree by target size.
pub fn nearest_assignments<F: Real>(from: &[Vec3<F>], to: &[Vec3<F>]) -> Vec<(usize, F)> {
    if to.len() > BRUTE_FORCE_CUTOFF {
        let tree = KdTree3::new(to);
        from.iter().map(|q| tree.nearest(q)).collect()
    } else {
        from.iter().map(|q| nearest_brute(q, to)).collect()
    }
}

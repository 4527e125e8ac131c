use std::cmp::Ordering;
use std::collections::BinaryHeap;

use crate::geometry::Vec3;

const LEAF_SIZE: usize = 8;

/// A k-NN hit. Results are ordered by `(dist_sq, index)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub dist_sq: f64,
}

impl Eq for Neighbor {}

impl Ord for Neighbor {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist_sq
            .total_cmp(&other.dist_sq)
            .then(self.index.cmp(&other.index))
    }
}

impl PartialOrd for Neighbor {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Implicit balanced 3-d tree over a copy of the positions.
///
/// Each subrange `[lo, hi)` of `order` is a node whose median `mid` splits on
/// `axes[mid]`; ranges of at most `LEAF_SIZE` are scanned linearly. Ties are
/// broken by point index, so queries agree exactly with a brute-force scan.
#[derive(Debug, Clone)]
pub struct KdIndex {
    points: Vec<Vec3>,
    order: Vec<usize>,
    axes: Vec<u8>,
}

impl KdIndex {
    pub fn new(points: &[Vec3]) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut axes = vec![0u8; points.len()];
        build(points, &mut order, &mut axes, 0);
        Self {
            points: points.to_vec(),
            order,
            axes,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// The `k` nearest points, closest first.
    pub fn knn(&self, query: &Vec3, k: usize) -> Vec<Neighbor> {
        if k == 0 || self.points.is_empty() {
            return Vec::new();
        }
        let mut heap = BinaryHeap::with_capacity(k + 1);
        self.search(0, self.order.len(), query, k, &mut heap);
        heap.into_sorted_vec()
    }

    /// Closest point within `max_dist`, if any.
    pub fn nearest_within(&self, query: &Vec3, max_dist: f64) -> Option<Neighbor> {
        self.knn(query, 1)
            .into_iter()
            .next()
            .filter(|n| n.dist_sq <= max_dist * max_dist)
    }

    fn search(
        &self,
        lo: usize,
        hi: usize,
        q: &Vec3,
        k: usize,
        heap: &mut BinaryHeap<Neighbor>,
    ) {
        if hi - lo <= LEAF_SIZE {
            for &i in &self.order[lo..hi] {
                self.offer(i, q, k, heap);
            }
            return;
        }
        let mid = lo + (hi - lo) / 2;
        let axis = self.axes[mid] as usize;
        let pivot = self.order[mid];
        self.offer(pivot, q, k, heap);
        let diff = q[axis] - self.points[pivot][axis];
        let (near, far) = if diff < 0.0 {
            ((lo, mid), (mid + 1, hi))
        } else {
            ((mid + 1, hi), (lo, mid))
        };
        self.search(near.0, near.1, q, k, heap);
        let must_visit = heap.len() < k || diff * diff <= heap.peek().map_or(f64::INFINITY, |w| w.dist_sq);
        if must_visit && far.0 < far.1 {
            self.search(far.0, far.1, q, k, heap);
        }
    }

    fn offer(&self, index: usize, q: &Vec3, k: usize, heap: &mut BinaryHeap<Neighbor>) {
        let cand = Neighbor {
            index,
            dist_sq: (self.points[index] - q).norm_squared(),
        };
        if heap.len() < k {
            heap.push(cand);
        } else if cand < *heap.peek().expect("heap is full") {
            heap.pop();
            heap.push(cand);
        }
    }
}

fn build(points: &[Vec3], order: &mut [usize], axes: &mut [u8], offset: usize) {
    let n = order.len();
    if n <= LEAF_SIZE {
        return;
    }
    let (mut lo, mut hi) = (points[order[0]], points[order[0]]);
    for &i in order.iter() {
        lo = lo.inf(&points[i]);
        hi = hi.sup(&points[i]);
    }
    let extent = hi - lo;
    let axis = extent.imax();
    let mid = n / 2;
    order.select_nth_unstable_by(mid, |&a, &b| {
        points[a][axis]
            .total_cmp(&points[b][axis])
            .then(a.cmp(&b))
    });
    axes[offset + mid] = axis as u8;
    let (left, rest) = order.split_at_mut(mid);
    build(points, left, axes, offset);
    build(points, &mut rest[1..], axes, offset + mid + 1);
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_knn(points: &[Vec3], q: &Vec3, k: usize) -> Vec<Neighbor> {
        let mut all: Vec<Neighbor> = points
            .iter()
            .enumerate()
            .map(|(index, p)| Neighbor {
                index,
                dist_sq: (p - q).norm_squared(),
            })
            .collect();
        all.sort();
        all.truncate(k);
        all
    }

    #[test]
    fn knn_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let points: Vec<Vec3> = (0..200)
            .map(|_| Vec3::new(rng.gen(), rng.gen(), rng.gen()))
            .collect();
        let index = KdIndex::new(&points);
        for _ in 0..100 {
            let q = Vec3::new(rng.gen_range(-0.2..1.2), rng.gen(), rng.gen());
            for k in 1..=10 {
                assert_eq!(index.knn(&q, k), brute_knn(&points, &q, k));
            }
        }
    }

    #[test]
    fn knn_with_duplicate_points_breaks_ties_by_index() {
        // grid with many equal distances
        let points: Vec<Vec3> = (0..125)
            .map(|i| Vec3::new((i % 5) as f64, ((i / 5) % 5) as f64, (i / 25) as f64))
            .chain(std::iter::repeat_n(Vec3::new(2.0, 2.0, 2.0), 5))
            .collect();
        let index = KdIndex::new(&points);
        for q in [Vec3::new(2.0, 2.0, 2.0), Vec3::new(0.5, 0.5, 0.5), Vec3::new(4.0, 0.0, 2.0)] {
            for k in 1..=10 {
                assert_eq!(index.knn(&q, k), brute_knn(&points, &q, k));
            }
        }
    }

    #[test]
    fn nearest_within_respects_radius() {
        let points = vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)];
        let index = KdIndex::new(&points);
        assert_eq!(index.nearest_within(&Vec3::new(0.9, 0.0, 0.0), 0.2).unwrap().index, 1);
        assert!(index.nearest_within(&Vec3::new(0.5, 5.0, 0.0), 1.0).is_none());
        assert!(KdIndex::new(&[]).knn(&Vec3::zeros(), 3).is_empty());
    }

    #[test]
    fn k_larger_than_cloud_returns_all() {
        let points: Vec<Vec3> = (0..4).map(|i| Vec3::new(i as f64, 0.0, 0.0)).collect();
        let index = KdIndex::new(&points);
        assert_eq!(index.knn(&Vec3::zeros(), 10).len(), 4);
    }
}

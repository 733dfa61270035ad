use std::cmp::Ordering;
use std::collections::BinaryHeap;

const LEAF_SIZE: usize = 16;

enum Node {
    Leaf {
        start: usize,
        end: usize,
    },
    Split {
        dim: usize,
        value: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
}

/// Exact k-nearest-neighbor tree over row-major points `[n, dim]`.
pub struct KdTree {
    dim: usize,
    points: Vec<f64>,
    order: Vec<usize>,
    root: Node,
}

#[derive(PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    // max-heap on (distance, index) so the worst kept neighbor sits on top
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

impl KdTree {
    pub fn build(points: Vec<f64>, dim: usize) -> Self {
        assert!(
            dim > 0 && points.len() % dim == 0,
            "points must be [n, dim]"
        );
        let n = points.len() / dim;
        let mut order: Vec<usize> = (0..n).collect();
        let root = Self::split(&points, dim, &mut order, 0, n);
        Self {
            dim,
            points,
            order,
            root,
        }
    }

    fn split(points: &[f64], dim: usize, order: &mut [usize], start: usize, end: usize) -> Node {
        if end - start <= LEAF_SIZE {
            return Node::Leaf { start, end };
        }
        let slice = &mut order[start..end];
        let spread = |d: usize| {
            let (lo, hi) = slice
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| {
                    let v = points[i * dim + d];
                    (lo.min(v), hi.max(v))
                });
            hi - lo
        };
        let axis = (0..dim)
            .map(|d| (d, spread(d)))
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(d, _)| d)
            .unwrap_or(0);
        let mid = slice.len() / 2;
        slice.select_nth_unstable_by(mid, |&a, &b| {
            points[a * dim + axis]
                .total_cmp(&points[b * dim + axis])
                .then(a.cmp(&b))
        });
        let value = points[slice[mid] * dim + axis];
        let left = Box::new(Self::split(points, dim, order, start, start + mid));
        let right = Box::new(Self::split(points, dim, order, start + mid, end));
        Node::Split {
            dim: axis,
            value,
            left,
            right,
        }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    /// The `k` nearest points as `(index, squared distance)`, nearest first,
    /// ties broken by index.
    pub fn nearest(&self, query: &[f64], k: usize) -> Vec<(usize, f64)> {
        let mut heap = BinaryHeap::with_capacity(k + 1);
        if k > 0 {
            self.search(&self.root, query, k, &mut heap);
        }
        let mut out: Vec<(usize, f64)> = heap.into_iter().map(|c| (c.index, c.dist2)).collect();
        out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        out
    }

    fn search(&self, node: &Node, q: &[f64], k: usize, heap: &mut BinaryHeap<Candidate>) {
        match node {
            Node::Leaf { start, end } => {
                for &i in &self.order[*start..*end] {
                    let dist2 = squared_distance(self.point(i), q);
                    let c = Candidate { dist2, index: i };
                    if heap.len() < k {
                        heap.push(c);
                    } else if c < *heap.peek().expect("heap is full") {
                        heap.pop();
                        heap.push(c);
                    }
                }
            }
            Node::Split {
                dim,
                value,
                left,
                right,
            } => {
                let diff = q[*dim] - value;
                let (near, far) = if diff < 0.0 {
                    (left, right)
                } else {
                    (right, left)
                };
                self.search(near, q, k, heap);
                let worst = heap.peek().map(|c| c.dist2).unwrap_or(f64::INFINITY);
                // `<=` keeps equal-distance points on the far side reachable for tie-breaking
                if heap.len() < k || diff * diff <= worst {
                    self.search(far, q, k, heap);
                }
            }
        }
    }
}

pub(crate) fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn matches_linear_scan() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let dim = 5;
        let n = 700;
        let pts: Vec<f64> = (0..n * dim).map(|_| rng.gen_range(0.0..1.0)).collect();
        let tree = KdTree::build(pts.clone(), dim);
        for _ in 0..30 {
            let q: Vec<f64> = (0..dim).map(|_| rng.gen_range(0.0..1.0)).collect();
            let mut brute: Vec<(usize, f64)> = (0..n)
                .map(|i| (i, squared_distance(&pts[i * dim..(i + 1) * dim], &q)))
                .collect();
            brute.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            brute.truncate(40);
            assert_eq!(tree.nearest(&q, 40), brute);
        }
    }

    #[test]
    fn duplicate_points_tie_break_by_index() {
        let pts = vec![1.0; 3 * 40];
        let tree = KdTree::build(pts, 3);
        let got: Vec<usize> = tree
            .nearest(&[1.0, 1.0, 1.0], 5)
            .into_iter()
            .map(|p| p.0)
            .collect();
        assert_eq!(got, vec![0, 1, 2, 3, 4]);
    }
}

//! Exact kd-tree nearest-neighbor search for fixed-dimension real vectors.
//!
//! Backtracking search with axis-distance pruning; results are identical to
//! a brute-force linear scan, including tie handling (equal distances are
//! ordered by lower point index).

/// Flat kd-tree over `n` points of dimension `dim`, stored row-major.
#[derive(Debug, Clone)]
pub struct KdTree {
    dim: usize,
    points: Vec<f64>,
    nodes: Vec<Node>,
    root: usize,
}

#[derive(Debug, Clone)]
enum Node {
    Leaf {
        indices: Vec<usize>,
    },
    Split {
        axis: usize,
        value: f64,
        left: usize,
        right: usize,
    },
}

const LEAF_SIZE: usize = 16;

impl KdTree {
    /// Builds a tree over `n = data.len() / dim` points. `data` must be a
    /// non-empty multiple of `dim`.
    pub fn build(dim: usize, data: Vec<f64>) -> KdTree {
        assert!(dim > 0, "dimension must be positive");
        assert!(!data.is_empty() && data.len() % dim == 0, "data length must be a multiple of dim");
        let n = data.len() / dim;
        let mut indices: Vec<usize> = (0..n).collect();
        let mut tree = KdTree { dim, points: data, nodes: Vec::new(), root: 0 };
        tree.root = tree.build_node(&mut indices);
        tree
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, index: usize) -> &[f64] {
        &self.points[index * self.dim..(index + 1) * self.dim]
    }

    fn build_node(&mut self, indices: &mut [usize]) -> usize {
        if indices.len() <= LEAF_SIZE {
            self.nodes.push(Node::Leaf { indices: indices.to_vec() });
            return self.nodes.len() - 1;
        }
        // Split on the axis with the widest spread at the median coordinate.
        let axis = self.widest_axis(indices);
        let mid = indices.len() / 2;
        let dim = self.dim;
        let points = std::mem::take(&mut self.points);
        indices.select_nth_unstable_by(mid, |&a, &b| {
            let ca = points[a * dim + axis];
            let cb = points[b * dim + axis];
            ca.partial_cmp(&cb).unwrap().then(a.cmp(&b))
        });
        self.points = points;
        let value = self.points[indices[mid] * dim + axis];
        let (lo, hi) = indices.split_at_mut(mid);
        let left = self.build_node(lo);
        let right = self.build_node(hi);
        self.nodes.push(Node::Split { axis, value, left, right });
        self.nodes.len() - 1
    }

    fn widest_axis(&self, indices: &[usize]) -> usize {
        let mut best_axis = 0;
        let mut best_spread = -1.0;
        for axis in 0..self.dim {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &i in indices {
                let v = self.points[i * self.dim + axis];
                lo = lo.min(v);
                hi = hi.max(v);
            }
            let spread = hi - lo;
            if spread > best_spread {
                best_spread = spread;
                best_axis = axis;
            }
        }
        best_axis
    }

    fn dist2(&self, index: usize, query: &[f64]) -> f64 {
        self.point(index)
            .iter()
            .zip(query)
            .map(|(a, b)| {
                let d = a - b;
                d * d
            })
            .sum()
    }

    /// Exact nearest neighbor: `(index, euclidean distance)`; ties go to the
    /// lower index.
    pub fn nearest(&self, query: &[f64]) -> (usize, f64) {
        let mut result = self.knn(query, 1);
        result.pop().expect("tree is non-empty")
    }

    /// Exact k nearest neighbors sorted by ascending `(distance, index)`.
    /// `k` is clamped to the tree size by the caller's contract.
    pub fn knn(&self, query: &[f64], k: usize) -> Vec<(usize, f64)> {
        assert_eq!(query.len(), self.dim, "query dimension mismatch");
        assert!(k >= 1 && k <= self.len(), "k out of range");
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        self.search(self.root, query, k, &mut best);
        best.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect()
    }

    fn search(&self, node: usize, query: &[f64], k: usize, best: &mut Vec<(f64, usize)>) {
        match &self.nodes[node] {
            Node::Leaf { indices } => {
                for &i in indices {
                    let d2 = self.dist2(i, query);
                    let key = (d2, i);
                    if best.len() < k || key < best[best.len() - 1] {
                        let pos = best.partition_point(|&e| e < key);
                        best.insert(pos, key);
                        if best.len() > k {
                            best.pop();
                        }
                    }
                }
            }
            Node::Split { axis, value, left, right } => {
                let diff = query[*axis] - value;
                let (near, far) = if diff < 0.0 { (*left, *right) } else { (*right, *left) };
                self.search(near, query, k, best);
                // Visit the far side unless every point there is strictly
                // worse than the current k-th candidate. Equality still
                // descends so distance ties resolve by index.
                if best.len() < k || diff * diff <= best[best.len() - 1].0 {
                    self.search(far, query, k, best);
                }
            }
        }
    }
}

/// Brute-force k nearest neighbors with the same `(distance, index)`
/// ordering; the reference the tree is checked against.
pub fn brute_force_knn(dim: usize, data: &[f64], query: &[f64], k: usize) -> Vec<(usize, f64)> {
    let n = data.len() / dim;
    let mut all: Vec<(f64, usize)> = (0..n)
        .map(|i| {
            let d2: f64 = data[i * dim..(i + 1) * dim]
                .iter()
                .zip(query)
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            (d2, i)
        })
        .collect();
    all.sort_by(|a, b| a.partial_cmp(b).unwrap());
    all.truncate(k);
    all.into_iter().map(|(d2, i)| (i, d2.sqrt())).collect()
}

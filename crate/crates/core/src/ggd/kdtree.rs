//! Static k-d tree over the max-norm, just enough for KSG neighbor queries.

const LEAF_SIZE: usize = 16;
const NO_CHILD: usize = usize::MAX;

struct Node {
    start: usize,
    end: usize,
    left: usize,
    right: usize,
}

pub(crate) struct KdTree {
    dim: usize,
    /// Points reordered so every node owns a contiguous range.
    points: Vec<f64>,
    /// Original index of each reordered point.
    index: Vec<usize>,
    nodes: Vec<Node>,
    /// Per node: `dim` lower bounds followed by `dim` upper bounds.
    bounds: Vec<f64>,
}

impl KdTree {
    /// `data` is row-major with `dim` columns.
    pub(crate) fn build(data: &[f64], dim: usize) -> Self {
        let n = data.len() / dim;
        let mut order: Vec<usize> = (0..n).collect();
        let mut tree = KdTree {
            dim,
            points: Vec::new(),
            index: Vec::new(),
            nodes: Vec::new(),
            bounds: Vec::new(),
        };
        if n > 0 {
            tree.build_node(data, &mut order, 0, n);
        }
        tree.points = order
            .iter()
            .flat_map(|&i| data[i * dim..(i + 1) * dim].iter().copied())
            .collect();
        tree.index = order;
        tree
    }

    fn build_node(&mut self, data: &[f64], order: &mut [usize], start: usize, end: usize) -> usize {
        let dim = self.dim;
        let id = self.nodes.len();
        self.nodes.push(Node {
            start,
            end,
            left: NO_CHILD,
            right: NO_CHILD,
        });
        let mut lo = vec![f64::INFINITY; dim];
        let mut hi = vec![f64::NEG_INFINITY; dim];
        for &i in &order[start..end] {
            for c in 0..dim {
                let v = data[i * dim + c];
                lo[c] = lo[c].min(v);
                hi[c] = hi[c].max(v);
            }
        }
        self.bounds.extend_from_slice(&lo);
        self.bounds.extend_from_slice(&hi);

        if end - start > LEAF_SIZE {
            let axis = (0..dim)
                .max_by(|&a, &b| (hi[a] - lo[a]).total_cmp(&(hi[b] - lo[b])))
                .unwrap_or(0);
            let mid = (end - start) / 2;
            order[start..end].select_nth_unstable_by(mid, |&a, &b| {
                data[a * dim + axis].total_cmp(&data[b * dim + axis])
            });
            let left = self.build_node(data, order, start, start + mid);
            let right = self.build_node(data, order, start + mid, end);
            self.nodes[id].left = left;
            self.nodes[id].right = right;
        }
        id
    }

    fn point(&self, slot: usize) -> &[f64] {
        &self.points[slot * self.dim..(slot + 1) * self.dim]
    }

    fn min_dist(&self, node: usize, q: &[f64]) -> f64 {
        let b = &self.bounds[node * 2 * self.dim..(node + 1) * 2 * self.dim];
        let (lo, hi) = b.split_at(self.dim);
        let mut d = 0.0f64;
        for c in 0..self.dim {
            d = d.max(lo[c] - q[c]).max(q[c] - hi[c]);
        }
        d
    }

    fn max_dist(&self, node: usize, q: &[f64]) -> f64 {
        let b = &self.bounds[node * 2 * self.dim..(node + 1) * 2 * self.dim];
        let (lo, hi) = b.split_at(self.dim);
        let mut d = 0.0f64;
        for c in 0..self.dim {
            d = d.max(q[c] - lo[c]).max(hi[c] - q[c]);
        }
        d
    }

    fn distance(a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .fold(0.0f64, |acc, (x, y)| acc.max((x - y).abs()))
    }

    /// Max-norm distance from `q` to its `k`-th nearest neighbor, excluding the
    /// point with original index `skip`.
    pub(crate) fn kth_neighbor_distance(&self, q: &[f64], k: usize, skip: usize) -> f64 {
        let mut best = vec![f64::INFINITY; k];
        if !self.nodes.is_empty() {
            self.knn_visit(0, q, skip, &mut best);
        }
        best[k - 1]
    }

    fn knn_visit(&self, node: usize, q: &[f64], skip: usize, best: &mut [f64]) {
        let k = best.len();
        if self.min_dist(node, q) >= best[k - 1] {
            return;
        }
        let Node {
            start,
            end,
            left,
            right,
        } = self.nodes[node];
        if left == NO_CHILD {
            for slot in start..end {
                if self.index[slot] == skip {
                    continue;
                }
                let d = Self::distance(self.point(slot), q);
                if d < best[k - 1] {
                    // insertion into the sorted list of current best distances
                    let mut pos = k - 1;
                    while pos > 0 && best[pos - 1] > d {
                        best[pos] = best[pos - 1];
                        pos -= 1;
                    }
                    best[pos] = d;
                }
            }
            return;
        }
        let (dl, dr) = (self.min_dist(left, q), self.min_dist(right, q));
        if dl <= dr {
            self.knn_visit(left, q, skip, best);
            self.knn_visit(right, q, skip, best);
        } else {
            self.knn_visit(right, q, skip, best);
            self.knn_visit(left, q, skip, best);
        }
    }

    /// Number of points with max-norm distance strictly less than `radius`
    /// from `q`, including `q` itself if it is in the tree.
    pub(crate) fn count_within(&self, q: &[f64], radius: f64) -> usize {
        if self.nodes.is_empty() {
            return 0;
        }
        self.count_visit(0, q, radius)
    }

    fn count_visit(&self, node: usize, q: &[f64], radius: f64) -> usize {
        if self.min_dist(node, q) >= radius {
            return 0;
        }
        let n = &self.nodes[node];
        if self.max_dist(node, q) < radius {
            return n.end - n.start;
        }
        if n.left == NO_CHILD {
            return (n.start..n.end)
                .filter(|&slot| Self::distance(self.point(slot), q) < radius)
                .count();
        }
        self.count_visit(n.left, q, radius) + self.count_visit(n.right, q, radius)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_kth(data: &[f64], dim: usize, q: &[f64], k: usize, skip: usize) -> f64 {
        let mut d: Vec<f64> = (0..data.len() / dim)
            .filter(|&i| i != skip)
            .map(|i| KdTree::distance(&data[i * dim..(i + 1) * dim], q))
            .collect();
        d.sort_by(f64::total_cmp);
        d[k - 1]
    }

    #[test]
    fn matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for &dim in &[1usize, 2, 5] {
            let n = 700;
            let data: Vec<f64> = (0..n * dim)
                .map(|_| rng.random::<f64>() * 4.0 - 2.0)
                .collect();
            let tree = KdTree::build(&data, dim);
            for i in (0..n).step_by(37) {
                let q = &data[i * dim..(i + 1) * dim];
                for k in [1, 3, 5] {
                    let got = tree.kth_neighbor_distance(q, k, i);
                    assert_eq!(got, brute_kth(&data, dim, q, k, i));
                }
                let r = 0.3;
                let brute = (0..n)
                    .filter(|&j| KdTree::distance(&data[j * dim..(j + 1) * dim], q) < r)
                    .count();
                assert_eq!(tree.count_within(q, r), brute);
            }
        }
    }
}

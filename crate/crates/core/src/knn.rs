//! Exact k-nearest-neighbour search over a static 3-D point set.
//!
//! Neighbours are ordered by `(squared distance, index)`, so equidistant
//! points resolve to the lower index. Callers that sort their points
//! beforehand get a deterministic tie-break for free.

#[derive(Debug, Clone)]
pub struct KdTree {
    points: Vec<[f64; 3]>,
    nodes: Vec<Node>,
    root: Option<usize>,
}

#[derive(Debug, Clone)]
struct Node {
    point: usize,
    axis: usize,
    left: Option<usize>,
    right: Option<usize>,
}

impl KdTree {
    pub fn build(points: Vec<[f64; 3]>) -> Self {
        let mut order: Vec<usize> = (0..points.len()).collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = build_rec(&points, &mut order, 0, &mut nodes);
        Self { points, nodes, root }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[[f64; 3]] {
        &self.points
    }

    /// Up to `k` neighbours of `query` as `(index, squared distance)`,
    /// nearest first.
    pub fn nearest(&self, query: [f64; 3], k: usize) -> Vec<(usize, f64)> {
        let mut best: Vec<(f64, usize)> = Vec::with_capacity(k + 1);
        if k > 0 {
            if let Some(root) = self.root {
                self.search(root, &query, k, &mut best);
            }
        }
        best.into_iter().map(|(d, i)| (i, d)).collect()
    }

    fn search(&self, node: usize, q: &[f64; 3], k: usize, best: &mut Vec<(f64, usize)>) {
        let n = &self.nodes[node];
        let p = &self.points[n.point];
        let d2 = dist2(p, q);
        insert(best, k, (d2, n.point));

        let diff = q[n.axis] - p[n.axis];
        let (near, far) = if diff < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        if let Some(c) = near {
            self.search(c, q, k, best);
        }
        if let Some(c) = far {
            // Equal plane distance must still be visited: it may hold a tie
            // with a lower index.
            if best.len() < k || diff * diff <= best[best.len() - 1].0 {
                self.search(c, q, k, best);
            }
        }
    }
}

fn build_rec(points: &[[f64; 3]], order: &mut [usize], depth: usize, nodes: &mut Vec<Node>) -> Option<usize> {
    if order.is_empty() {
        return None;
    }
    let axis = depth % 3;
    order.sort_by(|&a, &b| points[a][axis].total_cmp(&points[b][axis]).then(a.cmp(&b)));
    let mid = order.len() / 2;
    let id = nodes.len();
    nodes.push(Node {
        point: order[mid],
        axis,
        left: None,
        right: None,
    });
    let (lo, rest) = order.split_at_mut(mid);
    let hi = &mut rest[1..];
    let left = build_rec(points, lo, depth + 1, nodes);
    let right = build_rec(points, hi, depth + 1, nodes);
    nodes[id].left = left;
    nodes[id].right = right;
    Some(id)
}

fn insert(best: &mut Vec<(f64, usize)>, k: usize, cand: (f64, usize)) {
    let pos = best
        .iter()
        .position(|e| cand.0 < e.0 || (cand.0 == e.0 && cand.1 < e.1))
        .unwrap_or(best.len());
    if pos < k {
        best.insert(pos, cand);
        best.truncate(k);
    }
}

#[inline]
pub(crate) fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

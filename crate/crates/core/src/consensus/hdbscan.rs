//! Brute-force HDBSCAN (excess-of-mass selection, root never selected).
//!
//! Sized for a few hundred points: O(n²) distances, Prim's MST over mutual
//! reachability, single-linkage merge tree, condensed tree, stability.
//!
//! Two departures from the textbook algorithm keep degenerate inputs sane:
//! a split at distance zero never creates child clusters, so duplicate points
//! always share a label; and when the condensed tree has no cluster below the
//! root, the points that persist longest in the root (the densest core) are
//! returned as a single cluster instead of labelling everything noise.

pub const NOISE: i32 = -1;

const LAMBDA_CAP: f64 = 1e12;

fn lambda_of(dist: f64) -> f64 {
    if dist <= 1.0 / LAMBDA_CAP {
        LAMBDA_CAP
    } else {
        1.0 / dist
    }
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Distance to the `min_samples`-th nearest point, counting the point itself.
fn core_distances(dist: &[Vec<f64>], min_samples: usize) -> Vec<f64> {
    let n = dist.len();
    let k = min_samples.clamp(1, n) - 1;
    dist.iter()
        .map(|row| {
            let mut r = row.clone();
            r.sort_by(f64::total_cmp);
            r[k]
        })
        .collect()
}

/// Prim over the complete mutual-reachability graph; edges sorted by weight.
fn mst(mr: &[Vec<f64>]) -> Vec<(usize, usize, f64)> {
    let n = mr.len();
    let mut in_tree = vec![false; n];
    let mut best = vec![f64::INFINITY; n];
    let mut from = vec![0usize; n];
    let mut edges = Vec::with_capacity(n.saturating_sub(1));
    let mut cur = 0;
    in_tree[0] = true;
    for _ in 1..n {
        let mut next = usize::MAX;
        let mut next_w = f64::INFINITY;
        for j in 0..n {
            if in_tree[j] {
                continue;
            }
            if mr[cur][j] < best[j] {
                best[j] = mr[cur][j];
                from[j] = cur;
            }
            if best[j] < next_w || next == usize::MAX {
                next_w = best[j];
                next = j;
            }
        }
        in_tree[next] = true;
        edges.push((from[next].min(next), from[next].max(next), next_w));
        cur = next;
    }
    edges.sort_by(|a, b| a.2.total_cmp(&b.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    edges
}

struct Merge {
    left: usize,
    right: usize,
    dist: f64,
}

/// Single-linkage merge tree; internal node `n + i` is the i-th merge.
fn linkage(n: usize, edges: &[(usize, usize, f64)]) -> (Vec<Merge>, Vec<usize>) {
    let mut parent: Vec<usize> = (0..2 * n).collect();
    let mut size = vec![1usize; 2 * n];
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    let mut merges = Vec::with_capacity(n.saturating_sub(1));
    for (i, &(a, b, w)) in edges.iter().enumerate() {
        let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
        let node = n + i;
        parent[ra] = node;
        parent[rb] = node;
        size[node] = size[ra] + size[rb];
        merges.push(Merge { left: ra, right: rb, dist: w });
    }
    (merges, size)
}

#[derive(Debug, Clone, Copy)]
struct CondensedEdge {
    parent: usize,
    child: usize,
    lambda: f64,
    size: usize,
}

fn leaves(n: usize, merges: &[Merge], node: usize) -> Vec<usize> {
    let mut out = Vec::new();
    let mut stack = vec![node];
    while let Some(x) = stack.pop() {
        if x < n {
            out.push(x);
        } else {
            let m = &merges[x - n];
            stack.push(m.right);
            stack.push(m.left);
        }
    }
    out
}

fn condense(n: usize, merges: &[Merge], size: &[usize], min_cluster_size: usize) -> Vec<CondensedEdge> {
    let root = 2 * n - 2;
    let mut label = vec![usize::MAX; 2 * n];
    label[root] = n;
    let mut next_label = n + 1;
    let mut out = Vec::new();
    let mut queue = std::collections::VecDeque::from([root]);
    while let Some(node) = queue.pop_front() {
        if node < n {
            continue;
        }
        let m = &merges[node - n];
        let lambda = lambda_of(m.dist);
        let parent = label[node];
        let (l, r) = (m.left, m.right);
        let (ls, rs) = (size[l], size[r]);
        let fall_out = |child: usize, out: &mut Vec<CondensedEdge>| {
            for p in leaves(n, merges, child) {
                out.push(CondensedEdge { parent, child: p, lambda, size: 1 });
            }
        };
        if lambda >= LAMBDA_CAP {
            fall_out(l, &mut out);
            fall_out(r, &mut out);
        } else if ls >= min_cluster_size && rs >= min_cluster_size {
            for (c, s) in [(l, ls), (r, rs)] {
                label[c] = next_label;
                out.push(CondensedEdge { parent, child: next_label, lambda, size: s });
                next_label += 1;
                queue.push_back(c);
            }
        } else if ls < min_cluster_size && rs < min_cluster_size {
            fall_out(l, &mut out);
            fall_out(r, &mut out);
        } else {
            let (small, big) = if ls < min_cluster_size { (l, r) } else { (r, l) };
            fall_out(small, &mut out);
            label[big] = parent;
            queue.push_back(big);
        }
    }
    out
}

/// Cluster labels for `points`: `0..k` in order of first appearance, or
/// [`NOISE`]. `min_samples` counts the point itself.
pub fn hdbscan(points: &[Vec<f64>], min_cluster_size: usize, min_samples: usize) -> Vec<i32> {
    let n = points.len();
    let mcs = min_cluster_size.max(2);
    if n < mcs {
        return vec![NOISE; n];
    }
    let dist: Vec<Vec<f64>> = points.iter().map(|a| points.iter().map(|b| euclidean(a, b)).collect()).collect();
    let core = core_distances(&dist, min_samples);
    let mr: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| if i == j { 0.0 } else { dist[i][j].max(core[i]).max(core[j]) }).collect())
        .collect();
    let edges = mst(&mr);
    let (merges, size) = linkage(n, &edges);
    let tree = condense(n, &merges, &size, mcs);
    let root = n;
    let n_clusters = tree.iter().filter(|e| e.child >= n).map(|e| e.child).max().unwrap_or(root) + 1;

    let mut birth = vec![0.0f64; n_clusters];
    let mut parent_of = vec![usize::MAX; n_clusters];
    let mut children: Vec<Vec<usize>> = vec![Vec::new(); n_clusters];
    for e in tree.iter().filter(|e| e.child >= n) {
        birth[e.child] = e.lambda;
        parent_of[e.child] = e.parent;
        children[e.parent].push(e.child);
    }
    let mut stability = vec![0.0f64; n_clusters];
    for e in &tree {
        stability[e.parent] += (e.lambda - birth[e.parent]) * e.size as f64;
    }

    let mut labels = vec![NOISE; n];
    let mut point_parent = vec![root; n];
    let mut point_lambda = vec![0.0; n];
    for e in tree.iter().filter(|e| e.child < n) {
        point_parent[e.child] = e.parent;
        point_lambda[e.child] = e.lambda;
    }

    if n_clusters == root + 1 {
        let top = point_lambda.iter().copied().fold(0.0, f64::max);
        let core: Vec<usize> = (0..n).filter(|&i| point_lambda[i] >= top).collect();
        if core.len() >= mcs {
            for i in core {
                labels[i] = 0;
            }
        }
        return labels;
    }

    let mut selected = vec![false; n_clusters];
    for c in (root + 1..n_clusters).rev() {
        let sub: f64 = children[c].iter().map(|&k| stability[k]).sum();
        if sub > stability[c] {
            stability[c] = sub;
        } else {
            selected[c] = true;
            let mut stack = children[c].clone();
            while let Some(k) = stack.pop() {
                selected[k] = false;
                stack.extend(children[k].iter().copied());
            }
        }
    }

    let mut remap = std::collections::HashMap::new();
    for i in 0..n {
        let mut c = point_parent[i];
        while c != root && c != usize::MAX && !selected[c] {
            c = parent_of[c];
        }
        if c != root && c != usize::MAX {
            let next = remap.len() as i32;
            labels[i] = *remap.entry(c).or_insert(next);
        }
    }
    labels
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(xs: &[f64]) -> Vec<Vec<f64>> {
        xs.iter().map(|&x| vec![x]).collect()
    }

    #[test]
    fn two_blobs_and_an_outlier() {
        let p = pts(&[0.0, 0.1, 0.2, 0.15, 10.0, 10.1, 10.2, 10.05, 50.0]);
        let l = hdbscan(&p, 2, 2);
        assert_eq!(&l[..8], &[0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(l[8], NOISE);
    }

    #[test]
    fn identical_points_share_one_label() {
        let p = vec![vec![0.0, 0.0]; 6];
        assert_eq!(hdbscan(&p, 2, 2), vec![0; 6]);
        let mut q = pts(&[3.0, 3.0, 3.0, 0.0, 7.5, 12.0]);
        q.push(vec![20.0]);
        let l = hdbscan(&q, 2, 2);
        assert!(l[0] != NOISE && l[0] == l[1] && l[1] == l[2], "{l:?}");
    }

    #[test]
    fn pair_becomes_one_cluster() {
        assert_eq!(hdbscan(&pts(&[0.0, 1.0]), 2, 2), vec![0, 0]);
        assert_eq!(hdbscan(&pts(&[0.0]), 2, 2), vec![NOISE]);
        assert!(hdbscan(&[], 2, 2).is_empty());
    }
}

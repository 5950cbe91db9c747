//! Optimal and K-best bipartite assignment on small dense cost matrices.
//!
//! Used for ranked association-hypothesis generation in the filter and for
//! the metric's track-to-truth matching. Entries of `f64::INFINITY` mark
//! forbidden pairings.

use nalgebra::DMatrix;
use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// One assignment: `assignment[row] = column`, plus its total cost.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedSolution {
    pub assignment: Vec<usize>,
    pub cost: f64,
}

/// Minimum-cost assignment of every row to a distinct column via shortest
/// augmenting paths with potentials. Requires `nrows <= ncols`; returns
/// `None` when no finite-cost complete assignment exists.
pub fn hungarian(cost: &DMatrix<f64>) -> Option<RankedSolution> {
    let n = cost.nrows();
    let m = cost.ncols();
    assert!(n <= m, "assignment requires nrows <= ncols");
    if n == 0 {
        return Some(RankedSolution { assignment: vec![], cost: 0.0 });
    }

    // 1-indexed potentials; p[j] is the row matched to column j (0 = free).
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];

    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1, j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            if !delta.is_finite() {
                return None; // no augmenting path with finite cost
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        // Trace the augmenting path back.
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![usize::MAX; n];
    for j in 1..=m {
        if p[j] > 0 {
            assignment[p[j] - 1] = j - 1;
        }
    }
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[(i, j)])
        .sum();
    if !total.is_finite() {
        return None;
    }
    Some(RankedSolution { assignment, cost: total })
}

/// Heap node ordered by (cost, insertion sequence) for deterministic
/// tie-breaking.
struct Node {
    cost: f64,
    seq: u64,
    matrix: DMatrix<f64>,
    solution: RankedSolution,
}

impl PartialEq for Node {
    fn eq(&self, other: &Self) -> bool {
        self.cost == other.cost && self.seq == other.seq
    }
}
impl Eq for Node {}
impl PartialOrd for Node {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Node {
    fn cmp(&self, other: &Self) -> Ordering {
        // BinaryHeap is a max-heap; invert for min-by-cost.
        other
            .cost
            .partial_cmp(&self.cost)
            .unwrap_or(Ordering::Equal)
            .then(other.seq.cmp(&self.seq))
    }
}

/// K best assignments in non-decreasing cost order (Murty's partitioning
/// over the solution space, re-solving each subproblem exactly).
pub fn k_best_assignments(cost: &DMatrix<f64>, k: usize) -> Vec<RankedSolution> {
    let n = cost.nrows();
    let mut results = Vec::new();
    if k == 0 {
        return results;
    }
    let Some(best) = hungarian(cost) else {
        return results;
    };
    let mut seq = 0u64;
    let mut heap = BinaryHeap::new();
    heap.push(Node { cost: best.cost, seq, matrix: cost.clone(), solution: best });

    while let Some(node) = heap.pop() {
        results.push(node.solution.clone());
        if results.len() >= k {
            break;
        }
        // Partition: child t forbids arc t of the popped solution and forces
        // arcs 0..t.
        for t in 0..n {
            let mut child = node.matrix.clone();
            child[(t, node.solution.assignment[t])] = f64::INFINITY;
            for i in 0..t {
                let forced = node.solution.assignment[i];
                for j in 0..child.ncols() {
                    if j != forced {
                        child[(i, j)] = f64::INFINITY;
                    }
                }
            }
            if let Some(sol) = hungarian(&child) {
                seq += 1;
                heap.push(Node { cost: sol.cost, seq, matrix: child, solution: sol });
            }
        }
    }
    results
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(rows: usize, cols: usize, data: &[f64]) -> DMatrix<f64> {
        DMatrix::from_row_slice(rows, cols, data)
    }

    /// Brute-force enumeration of all injective row-to-column maps.
    fn enumerate_all(cost: &DMatrix<f64>) -> Vec<RankedSolution> {
        fn recurse(
            cost: &DMatrix<f64>,
            row: usize,
            used: &mut Vec<bool>,
            cur: &mut Vec<usize>,
            out: &mut Vec<RankedSolution>,
        ) {
            if row == cost.nrows() {
                let total: f64 = cur.iter().enumerate().map(|(i, &j)| cost[(i, j)]).sum();
                if total.is_finite() {
                    out.push(RankedSolution { assignment: cur.clone(), cost: total });
                }
                return;
            }
            for j in 0..cost.ncols() {
                if !used[j] {
                    used[j] = true;
                    cur.push(j);
                    recurse(cost, row + 1, used, cur, out);
                    cur.pop();
                    used[j] = false;
                }
            }
        }
        let mut out = Vec::new();
        recurse(cost, 0, &mut vec![false; cost.ncols()], &mut Vec::new(), &mut out);
        out.sort_by(|a, b| a.cost.partial_cmp(&b.cost).unwrap());
        out
    }

    #[test]
    fn hungarian_square_known_optimum() {
        let c = matrix(3, 3, &[4.0, 1.0, 3.0, 2.0, 0.0, 5.0, 3.0, 2.0, 2.0]);
        let sol = hungarian(&c).unwrap();
        assert_eq!(sol.assignment, vec![1, 0, 2]);
        assert_eq!(sol.cost, 5.0);
    }

    #[test]
    fn hungarian_rectangular_with_forbidden() {
        let inf = f64::INFINITY;
        let c = matrix(2, 4, &[inf, 3.0, inf, 8.0, 7.0, inf, 2.0, inf]);
        let sol = hungarian(&c).unwrap();
        assert_eq!(sol.assignment, vec![1, 2]);
        assert_eq!(sol.cost, 5.0);
    }

    #[test]
    fn hungarian_detects_infeasible() {
        let inf = f64::INFINITY;
        let c = matrix(2, 2, &[inf, inf, 1.0, 2.0]);
        assert!(hungarian(&c).is_none());
    }

    #[test]
    fn hungarian_matches_brute_force_on_random_matrices() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(42);
        for _ in 0..200 {
            let n = rng.random_range(1..=4);
            let m = rng.random_range(n..=5);
            let mut c = DMatrix::zeros(n, m);
            for i in 0..n {
                for j in 0..m {
                    c[(i, j)] = if rng.random_bool(0.15) {
                        f64::INFINITY
                    } else {
                        rng.random_range(-5.0..10.0)
                    };
                }
            }
            let all = enumerate_all(&c);
            match hungarian(&c) {
                Some(sol) => {
                    assert!(!all.is_empty());
                    assert!((sol.cost - all[0].cost).abs() < 1e-9);
                }
                None => assert!(all.is_empty()),
            }
        }
    }

    #[test]
    fn k_best_matches_brute_force_ranking() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(7);
        for _ in 0..100 {
            let n = rng.random_range(1..=3);
            let m = rng.random_range(n..=5);
            let mut c = DMatrix::zeros(n, m);
            for i in 0..n {
                for j in 0..m {
                    c[(i, j)] = rng.random_range(0.0..10.0);
                }
            }
            let all = enumerate_all(&c);
            let k = 7.min(all.len());
            let ranked = k_best_assignments(&c, k);
            assert_eq!(ranked.len(), k);
            for (got, want) in ranked.iter().zip(all.iter()) {
                assert!((got.cost - want.cost).abs() < 1e-9, "{} vs {}", got.cost, want.cost);
            }
            // Solutions must be pairwise distinct.
            for a in 0..ranked.len() {
                for b in (a + 1)..ranked.len() {
                    assert_ne!(ranked[a].assignment, ranked[b].assignment);
                }
            }
        }
    }

    #[test]
    fn k_best_exhausts_solution_space() {
        let c = matrix(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let ranked = k_best_assignments(&c, 10);
        assert_eq!(ranked.len(), 2); // only two complete assignments exist
        assert_eq!(ranked[0].cost, 5.0);
        assert_eq!(ranked[1].cost, 5.0);
    }
}

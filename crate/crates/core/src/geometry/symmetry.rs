//! Detection of strongly symmetric B×B blocks in the effective gain matrix.
//!
//! A block is a set of `B` groups whose `B × B` submatrix has every row a
//! permutation of every other row and every column a permutation of every
//! other column. Counting entries shows that rows and columns of such a block
//! then share one multiset, which is what the search below matches against.

use super::ClusterProblem;

pub const DEFAULT_SYMMETRY_TOLERANCE: f64 = 1e-9;

/// Upper bound on search nodes before giving up.
const SEARCH_BUDGET: usize = 1_000_000;

fn close(a: f64, b: f64, tol: f64) -> bool {
    a == b || (a - b).abs() <= tol * a.abs().max(b.abs())
}

fn sorted(mut v: Vec<f64>) -> Vec<f64> {
    v.sort_by(f64::total_cmp);
    v
}

fn same_multiset(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| close(*x, *y, tol))
}

/// Removes one entry close to `v` from `pool`; false if none is left.
fn take(pool: &mut Vec<f64>, v: f64, tol: f64) -> bool {
    match pool.iter().position(|p| close(*p, v, tol)) {
        Some(i) => {
            pool.swap_remove(i);
            true
        }
        None => false,
    }
}

struct Search<'a> {
    p: &'a ClusterProblem,
    tol: f64,
    col_sig: Vec<Vec<f64>>,
    assigned: Vec<bool>,
    blocks: Vec<Vec<usize>>,
    budget: usize,
}

impl Search<'_> {
    fn run(&mut self) -> Option<bool> {
        let Some(first) = self.assigned.iter().position(|a| !a) else {
            return Some(true);
        };
        let b = self.p.n_bs();
        let target = self.col_sig[first].clone();
        let candidates: Vec<usize> = (first + 1..self.p.n_groups())
            .filter(|&k| !self.assigned[k] && same_multiset(&self.col_sig[k], &target, self.tol))
            .collect();
        if candidates.len() + 1 < b {
            return Some(false);
        }
        // Remaining row multisets once `first` is in the block.
        let mut pools: Vec<Vec<f64>> = Vec::with_capacity(b);
        for m in 0..b {
            let mut pool = target.clone();
            if !take(&mut pool, self.p.beta(m, first), self.tol) {
                return Some(false);
            }
            pools.push(pool);
        }
        self.assigned[first] = true;
        let mut chosen = vec![first];
        let found = self.extend(&candidates, 0, &mut chosen, &mut pools)?;
        if !found {
            self.assigned[first] = false;
        }
        Some(found)
    }

    fn extend(
        &mut self,
        candidates: &[usize],
        from: usize,
        chosen: &mut Vec<usize>,
        pools: &mut Vec<Vec<f64>>,
    ) -> Option<bool> {
        self.budget = self.budget.checked_sub(1)?;
        if chosen.len() == self.p.n_bs() {
            self.blocks.push(chosen.clone());
            if self.run()? {
                return Some(true);
            }
            self.blocks.pop();
            return Some(false);
        }
        for idx in from..candidates.len() {
            let k = candidates[idx];
            if self.assigned[k] {
                continue;
            }
            let saved = pools.clone();
            let fits = (0..self.p.n_bs()).all(|m| take(&mut pools[m], self.p.beta(m, k), self.tol));
            if fits {
                self.assigned[k] = true;
                chosen.push(k);
                if self.extend(candidates, idx + 1, chosen, pools)? {
                    return Some(true);
                }
                chosen.pop();
                self.assigned[k] = false;
            }
            *pools = saved;
        }
        Some(false)
    }
}

/// Partitions the groups of `problem` into strongly symmetric blocks of size
/// `B`, if such a partition exists and all BS powers are equal.
///
/// Entries are compared with relative tolerance `tolerance`. Blocks are
/// returned sorted by their smallest member, members in increasing order.
pub fn detect_symmetric_blocks(
    problem: &ClusterProblem,
    tolerance: f64,
) -> Option<Vec<Vec<usize>>> {
    let (b, a) = (problem.n_bs(), problem.n_groups());
    if a % b != 0 {
        return None;
    }
    let p0 = problem.bs_powers()[0];
    if !problem.bs_powers().iter().all(|p| close(*p, p0, tolerance)) {
        return None;
    }
    if b == 1 {
        return Some((0..a).map(|k| vec![k]).collect());
    }
    let col_sig = (0..a)
        .map(|k| sorted((0..b).map(|m| problem.beta(m, k)).collect()))
        .collect();
    let mut search = Search {
        p: problem,
        tol: tolerance,
        col_sig,
        assigned: vec![false; a],
        blocks: Vec::new(),
        budget: SEARCH_BUDGET,
    };
    match search.run() {
        Some(true) => {
            let mut blocks = search.blocks;
            for blk in &mut blocks {
                blk.sort_unstable();
            }
            blocks.sort();
            Some(blocks)
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(a: f64, b: f64, c: f64, d: f64, e: f64, f: f64) -> ClusterProblem {
        ClusterProblem::new(
            4.0,
            &[vec![a, b, b, a, f, e, d, c], vec![f, e, d, c, a, b, b, a]],
            vec![1.0, 1.0],
        )
        .unwrap()
    }

    #[test]
    fn finds_the_textbook_pairing() {
        let p = example(0.9, 0.7, 0.2, 0.3, 0.4, 0.1);
        let blocks = detect_symmetric_blocks(&p, 1e-9).unwrap();
        assert_eq!(blocks, vec![vec![0, 4], vec![1, 5], vec![2, 6], vec![3, 7]]);
    }

    #[test]
    fn single_bs_is_trivially_symmetric() {
        let p = ClusterProblem::new(1.0, &[vec![0.3, 0.1, 0.7]], vec![5.0]).unwrap();
        let blocks = detect_symmetric_blocks(&p, 1e-9).unwrap();
        assert_eq!(blocks, vec![vec![0], vec![1], vec![2]]);
    }

    #[test]
    fn perturbation_breaks_symmetry() {
        let mut rows = vec![
            vec![0.9, 0.7, 0.7, 0.9, 0.1, 0.4, 0.3, 0.2],
            vec![0.1, 0.4, 0.3, 0.2, 0.9, 0.7, 0.7, 0.9],
        ];
        rows[0][2] *= 1.0 + 1e-6;
        let p = ClusterProblem::new(4.0, &rows, vec![1.0, 1.0]).unwrap();
        assert!(detect_symmetric_blocks(&p, 1e-9).is_none());
    }

    #[test]
    fn unequal_powers_or_sizes_fail() {
        let p =
            ClusterProblem::new(1.0, &[vec![1.0, 2.0], vec![2.0, 1.0]], vec![1.0, 2.0]).unwrap();
        assert!(detect_symmetric_blocks(&p, 1e-9).is_none());
        let p = ClusterProblem::new(
            1.0,
            &[vec![1.0, 2.0, 3.0], vec![2.0, 1.0, 3.0]],
            vec![1.0, 1.0],
        )
        .unwrap();
        assert!(detect_symmetric_blocks(&p, 1e-9).is_none());
    }

    #[test]
    fn three_by_three_circulant() {
        // Cyclic shifts: rows and columns are permutations of (x, y, z).
        let (x, y, z) = (0.5, 0.2, 0.1);
        let p = ClusterProblem::new(
            1.0,
            &[vec![x, z, y, 0.3], vec![y, x, z, 0.3], vec![z, y, x, 0.3]],
            vec![2.0; 3],
        )
        .unwrap();
        // A = 4 is not a multiple of B = 3.
        assert!(detect_symmetric_blocks(&p, 1e-9).is_none());
        let p = ClusterProblem::new(
            1.0,
            &[
                vec![0.6, x, 0.4, z, y, 0.8],
                vec![0.8, y, 0.6, x, z, 0.4],
                vec![0.4, z, 0.8, y, x, 0.6],
            ],
            vec![2.0; 3],
        )
        .unwrap();
        let blocks = detect_symmetric_blocks(&p, 1e-9).unwrap();
        assert_eq!(blocks, vec![vec![0, 2, 5], vec![1, 3, 4]]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn textbook_pattern_always_pairs(
                vals in proptest::collection::vec(0.01f64..10.0, 6)
            ) {
                let p = example(vals[0], vals[1], vals[2], vals[3], vals[4], vals[5]);
                let blocks = detect_symmetric_blocks(&p, 1e-9).unwrap();
                // Any valid pairing must be found; the canonical one is a valid
                // answer, and with distinct values it is the only one.
                for blk in &blocks {
                    prop_assert_eq!(blk.len(), 2);
                    let (i, j) = (blk[0], blk[1]);
                    let mut r0 = vec![p.beta(0, i), p.beta(0, j)];
                    let mut r1 = vec![p.beta(1, i), p.beta(1, j)];
                    r0.sort_by(f64::total_cmp);
                    r1.sort_by(f64::total_cmp);
                    prop_assert_eq!(r0, r1);
                }
                let distinct = {
                    let mut v = vals.clone();
                    v.sort_by(f64::total_cmp);
                    v.windows(2).all(|w| w[1] - w[0] > 1e-6)
                };
                if distinct {
                    prop_assert_eq!(blocks, vec![vec![0, 4], vec![1, 5], vec![2, 6], vec![3, 7]]);
                }
            }
        }
    }
}

use ndarray::ArrayView2;

use super::{check_finite, Matching};
use crate::error::{Result, StellarError};

/// Exact minimum-cost perfect matching.
///
/// Shortest augmenting paths with dual potentials give one optimum in O(r³).
/// Among all optima (the perfect matchings of the tight-edge subgraph under
/// the final potentials) the lexicographically smallest permutation is then
/// selected row by row.
pub fn hungarian(cost: ArrayView2<f64>) -> Result<Matching> {
    let (n, m) = cost.dim();
    if n != m {
        return Err(StellarError::shape("hungarian", "square cost", format!("{n}x{m}")));
    }
    check_finite(cost, "cost")?;
    if n == 0 {
        return Ok(Matching { sigma: Vec::new() });
    }

    // 1-based arrays; index 0 is a virtual column.
    let inf = f64::INFINITY;
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        minv.iter_mut().for_each(|x| *x = inf);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[[i0 - 1, j - 1]] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
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
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut row_of = vec![0usize; n];
    let mut col_of = vec![0usize; n];
    for j in 1..=n {
        row_of[j - 1] = p[j] - 1;
        col_of[p[j] - 1] = j - 1;
    }

    let scale = cost.iter().fold(1.0f64, |acc, x| acc.max(x.abs()));
    let tol = 1e-9 * scale;
    let tight = |i: usize, j: usize| cost[[i, j]] - u[i + 1] - v[j + 1] <= tol;
    lexicographic_refine(n, &tight, &mut row_of, &mut col_of);

    Ok(Matching { sigma: col_of })
}

fn lexicographic_refine(
    n: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    row_of: &mut [usize],
    col_of: &mut [usize],
) {
    let mut fixed_col = vec![false; n];
    for i in 0..n {
        for j in 0..col_of[i] {
            if fixed_col[j] || !tight(i, j) {
                continue;
            }
            // Hand column j to row i; its previous owner must reach the
            // column row i gives up through an alternating tight path.
            let freed = col_of[i];
            let displaced = row_of[j];
            let saved_row_of = row_of.to_vec();
            let saved_col_of = col_of.to_vec();
            col_of[i] = j;
            row_of[j] = i;
            fixed_col[j] = true;
            let mut visited = vec![false; n];
            if augment(displaced, freed, tight, &fixed_col, &mut visited, row_of, col_of) {
                break;
            }
            fixed_col[j] = false;
            row_of.copy_from_slice(&saved_row_of);
            col_of.copy_from_slice(&saved_col_of);
        }
        fixed_col[col_of[i]] = true;
    }
}

fn augment(
    row: usize,
    free: usize,
    tight: &dyn Fn(usize, usize) -> bool,
    fixed_col: &[bool],
    visited: &mut [bool],
    row_of: &mut [usize],
    col_of: &mut [usize],
) -> bool {
    for c in 0..fixed_col.len() {
        if fixed_col[c] || visited[c] || !tight(row, c) {
            continue;
        }
        visited[c] = true;
        if c == free || augment(row_of[c], free, tight, fixed_col, visited, row_of, col_of) {
            col_of[row] = c;
            row_of[c] = row;
            return true;
        }
    }
    false
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn permutations(r: usize) -> Vec<Vec<usize>> {
        if r == 0 {
            return vec![vec![]];
        }
        let mut out = Vec::new();
        for p in permutations(r - 1) {
            for pos in 0..=p.len() {
                let mut q = p.clone();
                q.insert(pos, r - 1);
                out.push(q);
            }
        }
        out.sort();
        out
    }

    /// Exhaustive search returning the lexicographically first optimum.
    fn brute(cost: &Array2<f64>) -> (Vec<usize>, f64) {
        let mut best: Option<(Vec<usize>, f64)> = None;
        for p in permutations(cost.nrows()) {
            let c: f64 = p.iter().enumerate().map(|(i, &j)| cost[[i, j]]).sum();
            if best.as_ref().map_or(true, |b| c < b.1) {
                best = Some((p, c));
            }
        }
        best.unwrap()
    }

    #[test]
    fn identity_cost() {
        let c = Array2::from_shape_fn((4, 4), |(i, j)| if i == j { 0.0 } else { 1.0 });
        let m = hungarian(c.view()).unwrap();
        assert_eq!(m, Matching::identity(4));
        assert_eq!(m.cost(c.view()), 0.0);
    }

    #[test]
    fn two_by_two() {
        let c = array![[4.0, 1.0], [2.0, 3.0]];
        let m = hungarian(c.view()).unwrap();
        assert_eq!(m.sigma, vec![1, 0]);
        assert_eq!(m.cost(c.view()), 3.0);
    }

    #[test]
    fn matches_exhaustive_search() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..200 {
            let r = rng.gen_range(1..=6);
            let c = Array2::from_shape_fn((r, r), |_| rng.gen_range(-5.0..5.0));
            let m = hungarian(c.view()).unwrap();
            let (_, best) = brute(&c);
            assert!(m.is_permutation());
            assert!((m.cost(c.view()) - best).abs() < 1e-9);
        }
    }

    #[test]
    fn ties_resolve_to_lexicographic_minimum() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..300 {
            let r = rng.gen_range(1..=6);
            // Small integer costs produce many tied optima.
            let c = Array2::from_shape_fn((r, r), |_| rng.gen_range(0..3) as f64);
            let m = hungarian(c.view()).unwrap();
            assert_eq!(m.sigma, brute(&c).0, "cost {c:?}");
        }
        let flat = Array2::from_elem((5, 5), 2.0);
        assert_eq!(hungarian(flat.view()).unwrap(), Matching::identity(5));
    }

    #[test]
    fn rejects_bad_input() {
        assert!(hungarian(Array2::zeros((2, 3)).view()).is_err());
        assert!(hungarian(array![[0.0, f64::INFINITY], [1.0, 0.0]].view()).is_err());
        assert!(hungarian(Array2::zeros((0, 0)).view()).unwrap().is_empty());
    }

    #[test]
    fn deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let c = Array2::from_shape_fn((16, 16), |_| rng.gen_range(0.0..1.0));
        assert_eq!(hungarian(c.view()).unwrap(), hungarian(c.view()).unwrap());
    }
}

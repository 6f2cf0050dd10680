use super::LossError;

/// Slot `i` is matched to label `perm[i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Assignment {
    pub perm: Vec<usize>,
    pub cost: f64,
}

/// Minimum-cost perfect matching of a square matrix. Among optimal
/// permutations the lexicographically smallest is returned.
pub fn hungarian_match(cost: &[Vec<f64>]) -> Result<Assignment, LossError> {
    let m = cost.len();
    if m == 0 {
        return Err(LossError::InvalidInput("empty cost matrix".into()));
    }
    if cost.iter().any(|r| r.len() != m) {
        return Err(LossError::InvalidInput("cost matrix is not square".into()));
    }
    if cost.iter().flatten().any(|v| !v.is_finite()) {
        return Err(LossError::InvalidInput(
            "cost matrix has non-finite entries".into(),
        ));
    }
    let best = min_cost(cost, &vec![true; m], &vec![true; m]);
    let tol = 1e-9 * (1.0 + best.abs());
    let mut rows = vec![true; m];
    let mut cols = vec![true; m];
    let mut perm = vec![0; m];
    let mut fixed = 0.0;
    for i in 0..m {
        rows[i] = false;
        let mut chosen = None;
        for j in 0..m {
            if !cols[j] {
                continue;
            }
            cols[j] = false;
            let rest = if i + 1 == m {
                0.0
            } else {
                min_cost(cost, &rows, &cols)
            };
            cols[j] = true;
            if fixed + cost[i][j] + rest <= best + tol {
                chosen = Some(j);
                break;
            }
        }
        let j = chosen.expect("an optimal completion always exists");
        cols[j] = false;
        perm[i] = j;
        fixed += cost[i][j];
    }
    let total = perm.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    Ok(Assignment { perm, cost: total })
}

/// Optimal cost of the sub-matrix on the active rows and columns
/// (shortest augmenting path with potentials, O(n^3)).
fn min_cost(cost: &[Vec<f64>], rows: &[bool], cols: &[bool]) -> f64 {
    let r: Vec<usize> = (0..rows.len()).filter(|&i| rows[i]).collect();
    let c: Vec<usize> = (0..cols.len()).filter(|&j| cols[j]).collect();
    let n = r.len();
    debug_assert_eq!(n, c.len());
    if n == 0 {
        return 0.0;
    }
    let a = |i: usize, j: usize| cost[r[i - 1]][c[j - 1]];
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = a(i0, j) - u[i0] - v[j];
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
    (1..=n).map(|j| a(p[j], j)).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_optimum() {
        let a = hungarian_match(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        assert_eq!(a.perm, vec![0, 1]);
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn anti_diagonal_optimum() {
        let a = hungarian_match(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        assert_eq!(a.perm, vec![1, 0]);
        assert_eq!(a.cost, 0.0);
    }

    #[test]
    fn ties_pick_the_smallest_permutation() {
        let a = hungarian_match(&[vec![1.0; 3], vec![1.0; 3], vec![1.0; 3]]).unwrap();
        assert_eq!(a.perm, vec![0, 1, 2]);
        let a = hungarian_match(&[
            vec![5.0, 0.0, 0.0],
            vec![0.0, 5.0, 0.0],
            vec![0.0, 0.0, 5.0],
        ])
        .unwrap();
        assert_eq!(a.perm, vec![1, 2, 0]);
    }

    #[test]
    fn malformed_input_is_rejected() {
        assert!(hungarian_match(&[]).is_err());
        assert!(hungarian_match(&[vec![1.0, 2.0]]).is_err());
        assert!(hungarian_match(&[vec![f64::NAN]]).is_err());
    }
}

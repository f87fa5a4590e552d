//! Exact dense linear assignment.
//!
//! Shortest augmenting paths with row/column potentials (the
//! Jonker-Volgenant / Hungarian family), O(n^3). Rows are inserted in
//! order; among equally short paths the lowest column index wins, so the
//! result is a deterministic function of the matrix.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// A bijection on `0..n`; `p[i]` is the column assigned to row `i`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation(Vec<usize>);

impl Permutation {
    pub fn identity(n: usize) -> Self {
        Permutation((0..n).collect())
    }

    pub fn new(mapping: Vec<usize>) -> Result<Self> {
        let n = mapping.len();
        let mut seen = vec![false; n];
        for &j in &mapping {
            if j >= n || seen[j] {
                return Err(Error::invalid(format!("{mapping:?} is not a permutation of 0..{n}")));
            }
            seen[j] = true;
        }
        Ok(Permutation(mapping))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    pub fn is_identity(&self) -> bool {
        self.0.iter().enumerate().all(|(i, &j)| i == j)
    }

    pub fn inverse(&self) -> Permutation {
        let mut inv = vec![0; self.0.len()];
        for (i, &j) in self.0.iter().enumerate() {
            inv[j] = i;
        }
        Permutation(inv)
    }
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;

    fn try_from(v: Vec<usize>) -> Result<Self> {
        Permutation::new(v)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sense {
    Maximize,
    Minimize,
}

/// Optimal assignment of rows to columns and its objective
/// `sum_i score[i, p[i]]` (summed in row order).
pub fn solve_lap<T: Scalar>(score: ArrayView2<T>, sense: Sense) -> Result<(Permutation, T)> {
    let (n, m) = score.dim();
    if n != m {
        return Err(Error::invalid(format!("assignment matrix must be square, got {n}x{m}")));
    }
    if n == 0 {
        return Err(Error::invalid("assignment matrix is empty"));
    }
    if score.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("assignment matrix contains non-finite entries"));
    }
    let cost = |i: usize, j: usize| match sense {
        Sense::Minimize => score[[i, j]],
        Sense::Maximize => -score[[i, j]],
    };
    let assignment = shortest_augmenting_path(n, cost);
    let objective = assignment.iter().enumerate().fold(T::zero(), |acc, (i, &j)| acc + score[[i, j]]);
    Ok((Permutation(assignment), objective))
}

/// Minimum-cost assignment; 1-based indices internally with column 0 as the
/// virtual source.
fn shortest_augmenting_path<T: Scalar>(n: usize, cost: impl Fn(usize, usize) -> T) -> Vec<usize> {
    let inf = T::infinity();
    let mut u = vec![T::zero(); n + 1];
    let mut v = vec![T::zero(); n + 1];
    // row_of[j]: row matched to column j (0 = free).
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![inf; n + 1];
    let mut used = vec![false; n + 1];

    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|x| *x = inf);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = inf;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[row_of[j] - 1] = j - 1;
    }
    assignment
}

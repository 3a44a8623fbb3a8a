//! Real sparse matrices in compressed-column form and a left-looking LU
//! factorization with threshold partial pivoting.
//!
//! The factorization follows the Gilbert-Peierls scheme: each column of
//! `L` and `U` is obtained from a sparse triangular solve whose nonzero
//! pattern is found by depth-first search in the graph of `L`.

use alloc::collections::BTreeSet;
use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("matrix is structurally or numerically singular at column {0}")]
    Singular(usize),
    #[error("expected a square matrix, got {0}x{1}")]
    NotSquare(usize, usize),
    #[error("right-hand side has length {got}, expected {expected}")]
    DimensionMismatch { expected: usize, got: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct CscMatrix {
    pub nrows: usize,
    pub ncols: usize,
    pub col_ptr: Vec<usize>,
    pub row_idx: Vec<usize>,
    pub values: Vec<f64>,
}

impl CscMatrix {
    /// Assembles from `(row, col, value)` triplets; duplicates are summed and
    /// row indices within each column end up sorted.
    pub fn from_triplets(nrows: usize, ncols: usize, triplets: &[(usize, usize, f64)]) -> Self {
        let mut counts = vec![0usize; ncols];
        for &(_, c, _) in triplets {
            counts[c] += 1;
        }
        let mut col_ptr = vec![0usize; ncols + 1];
        for c in 0..ncols {
            col_ptr[c + 1] = col_ptr[c] + counts[c];
        }
        let mut next = col_ptr.clone();
        let mut entries = vec![(0usize, 0.0f64); triplets.len()];
        for &(r, c, v) in triplets {
            entries[next[c]] = (r, v);
            next[c] += 1;
        }
        let mut out_ptr = Vec::with_capacity(ncols + 1);
        let mut row_idx = Vec::with_capacity(triplets.len());
        let mut values = Vec::with_capacity(triplets.len());
        out_ptr.push(0);
        for c in 0..ncols {
            let col = &mut entries[col_ptr[c]..col_ptr[c + 1]];
            col.sort_unstable_by_key(|e| e.0);
            for &(r, v) in col.iter() {
                if row_idx.len() > out_ptr[c] && *row_idx.last().unwrap() == r {
                    *values.last_mut().unwrap() += v;
                } else {
                    row_idx.push(r);
                    values.push(v);
                }
            }
            out_ptr.push(row_idx.len());
        }
        CscMatrix {
            nrows,
            ncols,
            col_ptr: out_ptr,
            row_idx,
            values,
        }
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        let span = self.col_ptr[c]..self.col_ptr[c + 1];
        match self.row_idx[span.clone()].binary_search(&r) {
            Ok(k) => self.values[span.start + k],
            Err(_) => 0.0,
        }
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; self.nrows];
        for c in 0..self.ncols {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                y[self.row_idx[p]] += self.values[p] * x[c];
            }
        }
        y
    }

    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut d = vec![vec![0.0; self.ncols]; self.nrows];
        for c in 0..self.ncols {
            for p in self.col_ptr[c]..self.col_ptr[c + 1] {
                d[self.row_idx[p]][c] += self.values[p];
            }
        }
        d
    }
}

/// Minimum-degree ordering of the symmetrized pattern `A + A^T`.
///
/// Ties are broken by the lowest index so the ordering is deterministic.
pub fn minimum_degree_order(a: &CscMatrix) -> Vec<usize> {
    let n = a.ncols;
    let mut adj: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); n];
    for c in 0..n {
        for p in a.col_ptr[c]..a.col_ptr[c + 1] {
            let r = a.row_idx[p];
            if r != c {
                adj[r].insert(c);
                adj[c].insert(r);
            }
        }
    }
    let mut eliminated = vec![false; n];
    let mut order = Vec::with_capacity(n);
    for _ in 0..n {
        let pivot = (0..n)
            .filter(|&v| !eliminated[v])
            .min_by_key(|&v| (adj[v].len(), v))
            .expect("uneliminated vertex");
        eliminated[pivot] = true;
        order.push(pivot);
        let nbrs: Vec<usize> = core::mem::take(&mut adj[pivot]).into_iter().collect();
        for &u in &nbrs {
            adj[u].remove(&pivot);
            for &w in &nbrs {
                if w != u {
                    adj[u].insert(w);
                }
            }
        }
    }
    order
}

/// `P A Q = L U` with unit lower `L`.
#[derive(Debug, Clone)]
pub struct SparseLu {
    n: usize,
    l: CscMatrix,
    u: CscMatrix,
    /// `pinv[i]` is the pivot step at which original row `i` was chosen.
    pinv: Vec<usize>,
    q: Vec<usize>,
}

const UNPIVOTED: usize = usize::MAX;

impl SparseLu {
    /// Factorizes `a` with column order `q`. A candidate on the diagonal is
    /// preferred whenever its magnitude is at least `tol` times the largest
    /// candidate in its column.
    pub fn factor(a: &CscMatrix, q: &[usize], tol: f64) -> Result<Self, SparseError> {
        if a.nrows != a.ncols {
            return Err(SparseError::NotSquare(a.nrows, a.ncols));
        }
        let n = a.ncols;
        let mut l = CscMatrix {
            nrows: n,
            ncols: n,
            col_ptr: Vec::with_capacity(n + 1),
            row_idx: Vec::with_capacity(4 * a.nnz() + n),
            values: Vec::with_capacity(4 * a.nnz() + n),
        };
        let mut u = l.clone();
        let mut pinv = vec![UNPIVOTED; n];
        let mut x = vec![0.0; n];
        let mut reach = Reach::new(n);

        for k in 0..n {
            l.col_ptr.push(l.row_idx.len());
            u.col_ptr.push(u.row_idx.len());
            let col = q[k];

            // x = L \ A(:, col) restricted to the reachable pattern
            let top = reach.compute(&l, a, col, &pinv);
            for &i in &reach.xi[top..] {
                x[i] = 0.0;
            }
            for p in a.col_ptr[col]..a.col_ptr[col + 1] {
                x[a.row_idx[p]] = a.values[p];
            }
            for px in top..n {
                let j = reach.xi[px];
                let jcol = pinv[j];
                if jcol == UNPIVOTED {
                    continue;
                }
                let xj = x[j];
                // first entry of each L column is its unit diagonal
                for p in l.col_ptr[jcol] + 1..l.col_ptr_end(jcol, k) {
                    x[l.row_idx[p]] -= l.values[p] * xj;
                }
            }

            let mut ipiv = UNPIVOTED;
            let mut best = -1.0;
            for &i in &reach.xi[top..] {
                if pinv[i] == UNPIVOTED {
                    let t = x[i].abs();
                    if t > best {
                        best = t;
                        ipiv = i;
                    }
                } else {
                    u.row_idx.push(pinv[i]);
                    u.values.push(x[i]);
                }
            }
            if ipiv == UNPIVOTED || !(best > 0.0) || !best.is_finite() {
                return Err(SparseError::Singular(k));
            }
            if pinv[col] == UNPIVOTED && x[col].abs() >= best * tol {
                ipiv = col;
            }
            let pivot = x[ipiv];
            u.row_idx.push(k);
            u.values.push(pivot);
            pinv[ipiv] = k;
            l.row_idx.push(ipiv);
            l.values.push(1.0);
            for &i in &reach.xi[top..] {
                if pinv[i] == UNPIVOTED {
                    l.row_idx.push(i);
                    l.values.push(x[i] / pivot);
                }
                x[i] = 0.0;
            }
        }
        l.col_ptr.push(l.row_idx.len());
        u.col_ptr.push(u.row_idx.len());
        for r in &mut l.row_idx {
            *r = pinv[*r];
        }
        Ok(SparseLu {
            n,
            l,
            u,
            pinv,
            q: q.to_vec(),
        })
    }

    /// Solves `A x = b` in place.
    pub fn solve(&self, b: &mut [f64]) -> Result<(), SparseError> {
        if b.len() != self.n {
            return Err(SparseError::DimensionMismatch {
                expected: self.n,
                got: b.len(),
            });
        }
        let mut x = vec![0.0; self.n];
        for (i, &bi) in b.iter().enumerate() {
            x[self.pinv[i]] = bi;
        }
        for j in 0..self.n {
            let xj = x[j];
            for p in self.l.col_ptr[j] + 1..self.l.col_ptr[j + 1] {
                x[self.l.row_idx[p]] -= self.l.values[p] * xj;
            }
        }
        for j in (0..self.n).rev() {
            let last = self.u.col_ptr[j + 1] - 1;
            x[j] /= self.u.values[last];
            let xj = x[j];
            for p in self.u.col_ptr[j]..last {
                x[self.u.row_idx[p]] -= self.u.values[p] * xj;
            }
        }
        for (k, &qk) in self.q.iter().enumerate() {
            b[qk] = x[k];
        }
        Ok(())
    }

    pub fn fill(&self) -> usize {
        self.l.nnz() + self.u.nnz()
    }
}

impl CscMatrix {
    /// End of column `j` while column `k` is still being built.
    fn col_ptr_end(&self, j: usize, k: usize) -> usize {
        if j < k {
            self.col_ptr[j + 1]
        } else {
            self.row_idx.len()
        }
    }
}

/// Scratch space for the depth-first reach computation.
struct Reach {
    xi: Vec<usize>,
    stack: Vec<usize>,
    pstack: Vec<usize>,
    marked: Vec<bool>,
}

impl Reach {
    fn new(n: usize) -> Self {
        Reach {
            xi: vec![0; n],
            stack: vec![0; n],
            pstack: vec![0; n],
            marked: vec![false; n],
        }
    }

    /// Fills `xi[top..]` with the rows reachable from the pattern of
    /// `b(:, col)` in the graph of `l`, in topological order.
    fn compute(&mut self, l: &CscMatrix, b: &CscMatrix, col: usize, pinv: &[usize]) -> usize {
        let n = self.xi.len();
        let k = l.col_ptr.len() - 1;
        let mut top = n;
        for p in b.col_ptr[col]..b.col_ptr[col + 1] {
            let start = b.row_idx[p];
            if self.marked[start] {
                continue;
            }
            let mut head = 0usize;
            self.stack[0] = start;
            loop {
                let j = self.stack[head];
                let jcol = pinv[j];
                if !self.marked[j] {
                    self.marked[j] = true;
                    self.pstack[head] = if jcol == UNPIVOTED { 0 } else { l.col_ptr[jcol] };
                }
                let end = if jcol == UNPIVOTED { 0 } else { l.col_ptr_end(jcol, k) };
                let mut descended = false;
                let mut p2 = self.pstack[head];
                while p2 < end {
                    let i = l.row_idx[p2];
                    p2 += 1;
                    if self.marked[i] {
                        continue;
                    }
                    self.pstack[head] = p2;
                    head += 1;
                    self.stack[head] = i;
                    descended = true;
                    break;
                }
                if !descended {
                    self.pstack[head] = p2;
                    top -= 1;
                    self.xi[top] = j;
                    if head == 0 {
                        break;
                    }
                    head -= 1;
                }
            }
        }
        for &i in &self.xi[top..] {
            self.marked[i] = false;
        }
        top
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    fn dense_solve(a: &[Vec<f64>], b: &[f64]) -> Vec<f64> {
        let n = b.len();
        let m = nalgebra::DMatrix::from_fn(n, n, |i, j| a[i][j]);
        let v = nalgebra::DVector::from_column_slice(b);
        m.lu().solve(&v).unwrap().iter().copied().collect()
    }

    fn random_sparse(n: usize, density: f64, seed: u64) -> CscMatrix {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, rng.random_range(-1.0..1.0)));
            for j in 0..n {
                if i != j && rng.random::<f64>() < density {
                    t.push((i, j, rng.random_range(-2.0..2.0)));
                }
            }
        }
        CscMatrix::from_triplets(n, n, &t)
    }

    #[test]
    fn triplets_sum_duplicates() {
        let m = CscMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (1, 0, 2.0), (0, 0, 3.0)]);
        assert_eq!(m.get(0, 0), 4.0);
        assert_eq!(m.get(1, 0), 2.0);
        assert_eq!(m.get(1, 1), 0.0);
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn lu_matches_dense_solver() {
        for seed in 0..20 {
            let a = random_sparse(30, 0.1, seed);
            let b: Vec<f64> = (0..30).map(|i| (i as f64).sin()).collect();
            let expect = dense_solve(&a.to_dense(), &b);
            for order in [(0..30).collect::<Vec<_>>(), minimum_degree_order(&a)] {
                let lu = SparseLu::factor(&a, &order, 0.1).unwrap();
                let mut x = b.clone();
                lu.solve(&mut x).unwrap();
                for (g, e) in x.iter().zip(&expect) {
                    assert!((g - e).abs() <= 1e-9 * (1.0 + e.abs()), "seed {seed}: {g} vs {e}");
                }
            }
        }
    }

    #[test]
    fn pivoting_handles_zero_diagonal() {
        // [[0, 1], [1, 0]] needs a row swap
        let a = CscMatrix::from_triplets(2, 2, &[(0, 1, 1.0), (1, 0, 1.0)]);
        let lu = SparseLu::factor(&a, &[0, 1], 0.1).unwrap();
        let mut b = vec![3.0, 5.0];
        lu.solve(&mut b).unwrap();
        assert_eq!(b, vec![5.0, 3.0]);
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = CscMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 1, 1.0)]);
        assert!(matches!(SparseLu::factor(&a, &[0, 1], 0.1), Err(SparseError::Singular(_))));
    }

    #[test]
    fn minimum_degree_limits_fill_on_arrow_matrix() {
        // arrow with dense first row/column: natural order fills completely
        let n = 20;
        let mut t = Vec::new();
        for i in 0..n {
            t.push((i, i, 4.0));
            if i > 0 {
                t.push((0, i, 1.0));
                t.push((i, 0, 1.0));
            }
        }
        let a = CscMatrix::from_triplets(n, n, &t);
        let natural = SparseLu::factor(&a, &(0..n).collect::<Vec<_>>(), 1.0).unwrap();
        let md = SparseLu::factor(&a, &minimum_degree_order(&a), 1.0).unwrap();
        assert!(md.fill() < natural.fill() / 2);
    }
}

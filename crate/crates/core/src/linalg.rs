//! Symmetric positive-definite factorizations for the WLS normal equations.
//!
//! [`Cholesky`] is a dense outer-product factorization with optional
//! symmetric permutation. [`NormalPattern`] does the symbolic work for a
//! fixed Jacobian sparsity pattern once (ordering, fill, scatter and update
//! maps) so that each Gauss–Newton step only touches the nonzeros of `L`.

use nalgebra::{DMatrix, DVector};

/// Relative pivot threshold: a pivot below `PIVOT_RTOL * A_kk` is treated as
/// a numerically zero direction (rank deficiency).
pub const PIVOT_RTOL: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct Cholesky {
    n: usize,
    /// Row-major lower factor of `P A Pᵀ`, full n×n storage.
    l: Vec<f64>,
    /// `perm[k]` is the original index of pivot `k`; `None` for natural order.
    perm: Option<Vec<usize>>,
}

/// Failure to factor: column index (in the original ordering) and the
/// offending pivot.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NotPositiveDefinite {
    pub column: usize,
    pub pivot: f64,
}

impl Cholesky {
    /// Factor in the natural ordering.
    pub fn factor(a: &DMatrix<f64>) -> Result<Self, NotPositiveDefinite> {
        assert!(a.is_square(), "Cholesky needs a square matrix");
        let n = a.nrows();
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                l[i * n + j] = a[(i, j)];
            }
        }
        factor_in_place(n, &mut l, |k| a[(k, k)].abs())
            .map_err(|(column, pivot)| NotPositiveDefinite { column, pivot })?;
        Ok(Self { n, l, perm: None })
    }

    /// Factor after a minimum-degree symmetric permutation of `a`.
    pub fn factor_ordered(a: &DMatrix<f64>) -> Result<Self, NotPositiveDefinite> {
        Self::factor_permuted(a, minimum_degree(a))
    }

    /// Factor `P A Pᵀ` where pivot `k` is original index `perm[k]`.
    pub fn factor_permuted(
        a: &DMatrix<f64>,
        perm: Vec<usize>,
    ) -> Result<Self, NotPositiveDefinite> {
        assert!(a.is_square(), "Cholesky needs a square matrix");
        let n = a.nrows();
        assert_eq!(perm.len(), n, "permutation length");
        let mut l = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                l[i * n + j] = a[(perm[i], perm[j])];
            }
        }
        factor_in_place(n, &mut l, |k| a[(perm[k], perm[k])].abs()).map_err(
            |(column, pivot)| NotPositiveDefinite {
                column: perm[column],
                pivot,
            },
        )?;
        Ok(Self {
            n,
            l,
            perm: Some(perm),
        })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    fn triangular_solves(&self, b: &mut [f64]) {
        let n = self.n;
        for i in 0..n {
            let row = &self.l[i * n..i * n + i];
            let s: f64 = row.iter().zip(&b[..i]).map(|(l, y)| l * y).sum();
            b[i] = (b[i] - s) / self.l[i * n + i];
        }
        for i in (0..n).rev() {
            let yi = b[i] / self.l[i * n + i];
            b[i] = yi;
            if yi != 0.0 {
                let row = &self.l[i * n..i * n + i];
                for (bk, l) in b[..i].iter_mut().zip(row) {
                    *bk -= l * yi;
                }
            }
        }
    }

    /// Solve `A y = b` in place.
    pub fn solve_in_place(&self, b: &mut [f64]) {
        assert_eq!(b.len(), self.n);
        match &self.perm {
            None => self.triangular_solves(b),
            Some(perm) => {
                let mut y: Vec<f64> = perm.iter().map(|&p| b[p]).collect();
                self.triangular_solves(&mut y);
                for (k, &p) in perm.iter().enumerate() {
                    b[p] = y[k];
                }
            }
        }
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut y = b.clone();
        self.solve_in_place(y.as_mut_slice());
        y
    }

    /// Solve for every column of `b`.
    pub fn solve_matrix(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = b.clone();
        for mut col in out.column_iter_mut() {
            let mut buf: Vec<f64> = col.iter().copied().collect();
            self.solve_in_place(&mut buf);
            col.copy_from_slice(&buf);
        }
        out
    }

    /// Lower factor of the (possibly permuted) matrix.
    pub fn l_factor(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.n, self.n, |i, j| {
            if j <= i {
                self.l[i * self.n + j]
            } else {
                0.0
            }
        })
    }

    /// Pivot order, identity when unpermuted.
    pub fn permutation(&self) -> Vec<usize> {
        self.perm.clone().unwrap_or_else(|| (0..self.n).collect())
    }
}

/// Right-looking factorization of the row-major lower triangle in `l`.
/// Updates touch only the nonzero multipliers of each column.
fn factor_in_place(
    n: usize,
    l: &mut [f64],
    scale: impl Fn(usize) -> f64,
) -> Result<(), (usize, f64)> {
    let mut nz: Vec<usize> = Vec::with_capacity(n);
    for k in 0..n {
        let diag = l[k * n + k];
        if !(diag > PIVOT_RTOL * scale(k)) || !diag.is_finite() {
            return Err((k, diag));
        }
        let d = diag.sqrt();
        l[k * n + k] = d;
        nz.clear();
        for i in k + 1..n {
            let v = &mut l[i * n + k];
            if *v != 0.0 {
                *v /= d;
                nz.push(i);
            }
        }
        for (a, &i) in nz.iter().enumerate() {
            let lik = l[i * n + k];
            for &j in &nz[..=a] {
                let ljk = l[j * n + k];
                l[i * n + j] -= lik * ljk;
            }
        }
    }
    Ok(())
}

/// Greedy minimum-degree elimination order on the sparsity pattern of `a`.
pub fn minimum_degree(a: &DMatrix<f64>) -> Vec<usize> {
    let n = a.nrows();
    let words = n.div_ceil(64);
    let mut adj = vec![0u64; n * words];
    for j in 0..n {
        for i in 0..n {
            if i != j && a[(i, j)] != 0.0 {
                adj[i * words + j / 64] |= 1 << (j % 64);
            }
        }
    }
    minimum_degree_bits(n, adj)
}

/// `adj` holds one bitset row of `n.div_ceil(64)` words per vertex.
fn minimum_degree_bits(n: usize, mut adj: Vec<u64>) -> Vec<usize> {
    let words = n.div_ceil(64);
    let mut alive = vec![0u64; words];
    for v in 0..n {
        alive[v / 64] |= 1 << (v % 64);
    }
    let mut order = Vec::with_capacity(n);
    let mut nb = vec![0u64; words];
    for _ in 0..n {
        let mut best = usize::MAX;
        let mut best_deg = u32::MAX;
        for v in 0..n {
            if alive[v / 64] >> (v % 64) & 1 == 0 {
                continue;
            }
            let deg: u32 = (0..words)
                .map(|w| (adj[v * words + w] & alive[w]).count_ones())
                .sum();
            if deg < best_deg {
                best_deg = deg;
                best = v;
            }
        }
        order.push(best);
        alive[best / 64] &= !(1 << (best % 64));
        // eliminating `best` makes its live neighbours a clique
        for w in 0..words {
            nb[w] = adj[best * words + w] & alive[w];
        }
        for u in 0..n {
            if nb[u / 64] >> (u % 64) & 1 == 1 {
                for w in 0..words {
                    adj[u * words + w] |= nb[w];
                }
                adj[u * words + u / 64] &= !(1 << (u % 64));
            }
        }
    }
    order
}

/// Symbolic analysis of `JᵀWJ` for one Jacobian sparsity pattern.
#[derive(Debug, Clone)]
pub struct NormalPattern {
    m: usize,
    n: usize,
    /// Pivot `k` is original column `perm[k]`.
    perm: Vec<usize>,
    /// Structural columns of each Jacobian row, as flat slots.
    row_start: Vec<usize>,
    row_cols: Vec<usize>,
    /// `L` in compressed columns over pivots, diagonal first.
    col_start: Vec<usize>,
    row_idx: Vec<usize>,
    /// Per Jacobian row: `(L position, slot a, slot b)` contributions.
    scatter_start: Vec<usize>,
    scatter: Vec<(usize, usize, usize)>,
    /// Per pivot column: `(target, source i, source j)` rank-one updates.
    update_start: Vec<usize>,
    updates: Vec<(usize, usize, usize)>,
}

impl NormalPattern {
    /// Pattern from the nonzeros of a Jacobian evaluated at a generic point.
    pub fn from_jacobian(jac: &DMatrix<f64>) -> Self {
        let (m, n) = jac.shape();
        let data = jac.as_slice();
        let mut row_start = vec![0usize; m + 1];
        let mut rows: Vec<Vec<usize>> = vec![Vec::new(); m];
        for c in 0..n {
            for k in 0..m {
                if data[c * m + k] != 0.0 {
                    rows[k].push(c);
                }
            }
        }
        for k in 0..m {
            row_start[k + 1] = row_start[k] + rows[k].len();
        }
        let row_cols: Vec<usize> = rows.concat();

        let words = n.div_ceil(64);
        let mut adj = vec![0u64; n * words];
        for cols in &rows {
            for &a in cols {
                for &b in cols {
                    if a != b {
                        adj[a * words + b / 64] |= 1 << (b % 64);
                    }
                }
            }
        }
        let perm = minimum_degree_bits(n, adj);
        let mut pinv = vec![0; n];
        for (k, &p) in perm.iter().enumerate() {
            pinv[p] = k;
        }

        // symbolic elimination on a dense boolean lower triangle
        let mut pat = vec![false; n * n];
        for cols in &rows {
            for &a in cols {
                for &b in cols {
                    let (i, j) = (pinv[a], pinv[b]);
                    if i >= j {
                        pat[i * n + j] = true;
                    }
                }
            }
        }
        for k in 0..n {
            pat[k * n + k] = true;
        }
        let mut below: Vec<usize> = Vec::with_capacity(n);
        for k in 0..n {
            below.clear();
            below.extend((k + 1..n).filter(|&i| pat[i * n + k]));
            for (x, &i) in below.iter().enumerate() {
                for &j in &below[..=x] {
                    pat[i * n + j] = true;
                }
            }
        }
        let mut col_start = vec![0usize; n + 1];
        let mut row_idx = Vec::new();
        for j in 0..n {
            row_idx.extend((j..n).filter(|&i| pat[i * n + j]));
            col_start[j + 1] = row_idx.len();
        }
        let pos = |i: usize, j: usize| -> usize {
            let col = &row_idx[col_start[j]..col_start[j + 1]];
            col_start[j] + col.binary_search(&i).expect("entry in symbolic pattern")
        };

        let mut scatter_start = vec![0usize; m + 1];
        let mut scatter = Vec::new();
        for k in 0..m {
            let base = row_start[k];
            let cols = &rows[k];
            for (sa, &a) in cols.iter().enumerate() {
                for (sb, &b) in cols.iter().enumerate() {
                    let (i, j) = (pinv[a], pinv[b]);
                    if i >= j {
                        scatter.push((pos(i, j), base + sa, base + sb));
                    }
                }
            }
            scatter_start[k + 1] = scatter.len();
        }

        let mut update_start = vec![0usize; n + 1];
        let mut updates = Vec::new();
        for k in 0..n {
            let (lo, hi) = (col_start[k] + 1, col_start[k + 1]);
            for pi in lo..hi {
                for pj in lo..=pi {
                    updates.push((pos(row_idx[pi], row_idx[pj]), pi, pj));
                }
            }
            update_start[k + 1] = updates.len();
        }

        Self {
            m,
            n,
            perm,
            row_start,
            row_cols,
            col_start,
            row_idx,
            scatter_start,
            scatter,
            update_start,
            updates,
        }
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    /// Nonzeros of the factor `L`.
    pub fn factor_nnz(&self) -> usize {
        self.row_idx.len()
    }

    /// Factor `JᵀWJ`. Returns `None` when `jac` has a nonzero outside the
    /// analysed pattern.
    pub fn factor(
        &self,
        jac: &DMatrix<f64>,
        w: &[f64],
    ) -> Option<Result<SparseCholesky<'_>, NotPositiveDefinite>> {
        let (m, n) = (self.m, self.n);
        if jac.shape() != (m, n) || w.len() != m {
            return None;
        }
        let data = jac.as_slice();
        let mut jv = vec![0.0; self.row_cols.len()];
        let mut inside = 0usize;
        for k in 0..m {
            for s in self.row_start[k]..self.row_start[k + 1] {
                let v = data[self.row_cols[s] * m + k];
                inside += usize::from(v != 0.0);
                jv[s] = v;
            }
        }
        let total = data.iter().filter(|v| **v != 0.0).count();
        if total != inside {
            return None;
        }
        let mut vals = vec![0.0; self.row_idx.len()];
        for k in 0..m {
            let wk = w[k];
            for &(p, a, b) in &self.scatter[self.scatter_start[k]..self.scatter_start[k + 1]] {
                vals[p] += wk * jv[a] * jv[b];
            }
        }
        let a_diag: Vec<f64> = self.col_start[..n].iter().map(|&p| vals[p].abs()).collect();
        for k in 0..n {
            let dp = self.col_start[k];
            let diag = vals[dp];
            let scale = a_diag[k];
            if !(diag > PIVOT_RTOL * scale) || !diag.is_finite() {
                return Some(Err(NotPositiveDefinite {
                    column: self.perm[k],
                    pivot: diag,
                }));
            }
            let d = diag.sqrt();
            vals[dp] = d;
            for v in &mut vals[dp + 1..self.col_start[k + 1]] {
                *v /= d;
            }
            for &(t, a, b) in &self.updates[self.update_start[k]..self.update_start[k + 1]] {
                vals[t] -= vals[a] * vals[b];
            }
        }
        Some(Ok(SparseCholesky {
            pattern: self,
            vals,
        }))
    }
}

/// Numeric factor for a [`NormalPattern`].
#[derive(Debug, Clone)]
pub struct SparseCholesky<'a> {
    pattern: &'a NormalPattern,
    vals: Vec<f64>,
}

impl SparseCholesky<'_> {
    pub fn solve_in_place(&self, b: &mut [f64]) {
        let p = self.pattern;
        assert_eq!(b.len(), p.n);
        let mut y: Vec<f64> = p.perm.iter().map(|&c| b[c]).collect();
        for k in 0..p.n {
            let (lo, hi) = (p.col_start[k], p.col_start[k + 1]);
            let yk = y[k] / self.vals[lo];
            y[k] = yk;
            for q in lo + 1..hi {
                y[p.row_idx[q]] -= self.vals[q] * yk;
            }
        }
        for k in (0..p.n).rev() {
            let (lo, hi) = (p.col_start[k], p.col_start[k + 1]);
            let mut s = y[k];
            for q in lo + 1..hi {
                s -= self.vals[q] * y[p.row_idx[q]];
            }
            y[k] = s / self.vals[lo];
        }
        for (k, &c) in p.perm.iter().enumerate() {
            b[c] = y[k];
        }
    }
}

/// `JᵀWJ` exploiting the row sparsity of measurement Jacobians.
pub fn weighted_normal_matrix(jac: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let (m, n) = jac.shape();
    let data = jac.as_slice();
    // compressed rows built from the column-major storage
    let mut start = vec![0usize; m + 1];
    for col in data.chunks_exact(m.max(1)) {
        for (k, &v) in col.iter().enumerate() {
            if v != 0.0 {
                start[k + 1] += 1;
            }
        }
    }
    for k in 0..m {
        start[k + 1] += start[k];
    }
    let mut fill = start.clone();
    let mut entries = vec![(0usize, 0.0f64); start[m]];
    for (c, col) in data.chunks_exact(m.max(1)).enumerate() {
        for (k, &v) in col.iter().enumerate() {
            if v != 0.0 {
                entries[fill[k]] = (c, v);
                fill[k] += 1;
            }
        }
    }
    let mut out = vec![0.0; n * n];
    for (k, &wk) in w.iter().enumerate().take(m) {
        let nz = &entries[start[k]..start[k + 1]];
        for &(a, va) in nz {
            let wa = wk * va;
            let col = &mut out[a * n..(a + 1) * n];
            for &(b, vb) in nz {
                col[b] += wa * vb;
            }
        }
    }
    // symmetric, so row-major and column-major layouts coincide
    DMatrix::from_vec(n, n, out)
}

/// `JᵀW r` with diagonal `W`.
pub fn weighted_gradient(jac: &DMatrix<f64>, w: &[f64], r: &DVector<f64>) -> DVector<f64> {
    let wr = DVector::from_iterator(r.len(), r.iter().zip(w).map(|(r, w)| r * w));
    jac.tr_mul(&wr)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spd(n: usize, seed: &[f64]) -> DMatrix<f64> {
        let a = DMatrix::from_fn(n, n, |i, j| seed[(i * 7 + j * 3) % seed.len()]);
        &a * a.transpose() + DMatrix::identity(n, n) * 0.5
    }

    #[test]
    fn matches_nalgebra_factor() {
        let a = spd(6, &[0.3, -1.2, 0.8, 2.0, -0.4, 1.1, 0.05]);
        let ours = Cholesky::factor(&a).unwrap().l_factor();
        let reference = a.clone().cholesky().unwrap().l();
        assert!((ours - reference).amax() < 1e-12);
    }

    #[test]
    fn singular_matrix_is_rejected() {
        let v = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let a = &v * v.transpose();
        let err = Cholesky::factor(&a).unwrap_err();
        assert_eq!(err.column, 1);
    }

    #[test]
    fn zero_diagonal_is_rejected() {
        let mut a = DMatrix::identity(3, 3);
        a[(2, 2)] = 0.0;
        assert_eq!(Cholesky::factor(&a).unwrap_err().column, 2);
    }

    #[test]
    fn normal_matrix_matches_dense_product() {
        let j = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 2.0, -1.0, 0.0, 3.0]);
        let w = [2.0, 0.5, 1.5];
        let dense = j.transpose() * DMatrix::from_diagonal(&DVector::from_column_slice(&w)) * &j;
        assert!((weighted_normal_matrix(&j, &w) - dense).amax() < 1e-14);
    }

    #[test]
    fn ordered_factor_solves_the_same_system() {
        // arrow matrix: natural order fills in completely, reversed does not
        let n = 6;
        let mut a = DMatrix::identity(n, n) * 4.0;
        for k in 1..n {
            a[(0, k)] = 1.0;
            a[(k, 0)] = 1.0;
        }
        let b = DVector::from_fn(n, |i, _| i as f64 - 2.0);
        let natural = Cholesky::factor(&a).unwrap();
        let ordered = Cholesky::factor_ordered(&a).unwrap();
        let nnz = |c: &Cholesky| c.l_factor().iter().filter(|v| **v != 0.0).count();
        assert_eq!(nnz(&ordered), 2 * n - 1);
        assert!(nnz(&natural) > nnz(&ordered));
        assert!((natural.solve(&b) - ordered.solve(&b)).amax() < 1e-14);
    }

    #[test]
    fn ordered_failure_reports_original_column() {
        let mut a = DMatrix::identity(4, 4);
        a[(2, 2)] = 0.0;
        assert_eq!(Cholesky::factor_ordered(&a).unwrap_err().column, 2);
    }

    #[test]
    fn sparse_factor_matches_dense_solution() {
        let j = DMatrix::from_row_slice(
            5,
            4,
            &[
                1.0, -1.0, 0.0, 0.0, //
                0.0, 2.0, 0.5, 0.0, //
                0.0, 0.0, 1.0, -3.0, //
                1.0, 0.0, 0.0, 1.0, //
                0.0, 0.0, 0.0, 2.0,
            ],
        );
        let w = [1.0, 4.0, 0.5, 2.0, 1.5];
        let pattern = NormalPattern::from_jacobian(&j);
        let sparse = pattern.factor(&j, &w).unwrap().unwrap();
        let dense = Cholesky::factor(&weighted_normal_matrix(&j, &w)).unwrap();
        let mut b = vec![0.3, -1.0, 2.0, 0.7];
        let expected = dense.solve(&DVector::from_column_slice(&b));
        sparse.solve_in_place(&mut b);
        assert!((DVector::from_vec(b) - expected).amax() < 1e-13);
    }

    #[test]
    fn sparse_factor_rejects_entries_outside_pattern() {
        let mut j = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let pattern = NormalPattern::from_jacobian(&j);
        j[(0, 1)] = 0.5;
        assert!(pattern.factor(&j, &[1.0, 1.0]).is_none());
        j[(0, 1)] = 0.0;
        j[(1, 1)] = 0.0;
        // a numerically vanished entry is fine for the pattern but singular
        assert!(pattern.factor(&j, &[1.0, 1.0]).unwrap().is_err());
    }

    proptest! {
        #[test]
        fn solve_recovers_rhs(vals in proptest::collection::vec(-2.0f64..2.0, 9..30), n in 1usize..8) {
            let a = spd(n, &vals);
            let b = DVector::from_fn(n, |i, _| vals[i % vals.len()] + 0.1 * i as f64);
            let chol = Cholesky::factor(&a).unwrap();
            let x = chol.solve(&b);
            prop_assert!((&a * x - &b).amax() < 1e-9);
            let x = Cholesky::factor_ordered(&a).unwrap().solve(&b);
            prop_assert!((&a * x - b).amax() < 1e-9);
        }
    }
}

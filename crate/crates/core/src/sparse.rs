//! Compressed-row sparse matrices with precomputable sparsity patterns.
//!
//! Assembly loops over cells and scatters dense element blocks; the pattern
//! of every assembled operator is known beforehand from mesh adjacency, so
//! patterns are built once (sorted, deduplicated) and reused across repeated
//! numeric assemblies (e.g. the 54-point parameter sweep reassembles values
//! into an identical pattern). Column indices are `u32`: no operator here
//! comes near 2^32 rows.

use nalgebra::{DMatrix, DVector};
use std::sync::Arc;

/// Shared sparsity structure: CSR row pointers plus sorted column indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SparsityPattern {
    nrows: usize,
    ncols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<u32>,
}

impl SparsityPattern {
    /// Builds a pattern from unsorted (row, col) pairs; duplicates collapse.
    pub fn from_pairs(nrows: usize, ncols: usize, pairs: &mut Vec<(u32, u32)>) -> Self {
        pairs.sort_unstable();
        pairs.dedup();
        let mut row_ptr = vec![0usize; nrows + 1];
        for &(r, _) in pairs.iter() {
            row_ptr[r as usize + 1] += 1;
        }
        for i in 0..nrows {
            row_ptr[i + 1] += row_ptr[i];
        }
        let col_idx = pairs.iter().map(|&(_, c)| c).collect();
        SparsityPattern { nrows, ncols, row_ptr, col_idx }
    }

    pub fn nrows(&self) -> usize {
        self.nrows
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn nnz(&self) -> usize {
        self.col_idx.len()
    }

    /// Position of (row, col) in the value array, if present.
    fn find(&self, row: usize, col: u32) -> Option<usize> {
        let start = self.row_ptr[row];
        let cols = &self.col_idx[start..self.row_ptr[row + 1]];
        cols.binary_search(&col).ok().map(|k| start + k)
    }
}

/// CSR matrix over a shared pattern.
#[derive(Debug, Clone)]
pub struct CsrMatrix {
    pattern: Arc<SparsityPattern>,
    vals: Vec<f64>,
}

impl CsrMatrix {
    pub fn zeros(pattern: Arc<SparsityPattern>) -> Self {
        let vals = vec![0.0; pattern.nnz()];
        CsrMatrix { pattern, vals }
    }

    /// Convenience constructor for oracle-scale matrices: accumulates
    /// duplicate triplets additively.
    pub fn from_triplets(nrows: usize, ncols: usize, trips: &[(usize, usize, f64)]) -> Self {
        let mut pairs: Vec<(u32, u32)> =
            trips.iter().map(|&(r, c, _)| (r as u32, c as u32)).collect();
        let pattern = Arc::new(SparsityPattern::from_pairs(nrows, ncols, &mut pairs));
        let mut m = CsrMatrix::zeros(pattern);
        for &(r, c, v) in trips {
            m.add(r, c, v);
        }
        m
    }

    pub fn pattern(&self) -> &Arc<SparsityPattern> {
        &self.pattern
    }

    pub fn nrows(&self) -> usize {
        self.pattern.nrows
    }

    pub fn ncols(&self) -> usize {
        self.pattern.ncols
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.vals
    }

    pub fn set_zero(&mut self) {
        self.vals.fill(0.0);
    }

    /// Adds `v` at (row, col). The entry must exist in the pattern.
    #[inline]
    pub fn add(&mut self, row: usize, col: usize, v: f64) {
        match self.pattern.find(row, col as u32) {
            Some(k) => self.vals[k] += v,
            None => panic!("entry ({row}, {col}) not in sparsity pattern"),
        }
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.pattern.find(row, col as u32).map_or(0.0, |k| self.vals[k])
    }

    /// y = A x.
    pub fn mul_vec(&self, x: &DVector<f64>, y: &mut DVector<f64>) {
        assert_eq!(x.len(), self.ncols());
        assert_eq!(y.len(), self.nrows());
        let p = &self.pattern;
        for row in 0..p.nrows {
            let mut acc = 0.0;
            for k in p.row_ptr[row]..p.row_ptr[row + 1] {
                acc += self.vals[k] * x[p.col_idx[k] as usize];
            }
            y[row] = acc;
        }
    }

    pub fn mul_vec_alloc(&self, x: &DVector<f64>) -> DVector<f64> {
        let mut y = DVector::zeros(self.nrows());
        self.mul_vec(x, &mut y);
        y
    }

    /// y += A x on plain slices (block-wise application).
    pub fn mul_slice_add(&self, x: &[f64], y: &mut [f64]) {
        assert_eq!(x.len(), self.ncols());
        assert_eq!(y.len(), self.nrows());
        let p = &self.pattern;
        for row in 0..p.nrows {
            let mut acc = 0.0;
            for k in p.row_ptr[row]..p.row_ptr[row + 1] {
                acc += self.vals[k] * x[p.col_idx[k] as usize];
            }
            y[row] += acc;
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let p = &self.pattern;
        let mut d = DMatrix::zeros(p.nrows, p.ncols);
        for row in 0..p.nrows {
            for k in p.row_ptr[row]..p.row_ptr[row + 1] {
                d[(row, p.col_idx[k] as usize)] += self.vals[k];
            }
        }
        d
    }

    /// max |A - A'| over all structurally present entries, and max |A|.
    /// A structurally one-sided entry counts with its full magnitude.
    pub fn symmetry_error(&self) -> (f64, f64) {
        let p = &self.pattern;
        let mut max_asym: f64 = 0.0;
        let mut max_abs: f64 = 0.0;
        for row in 0..p.nrows {
            for k in p.row_ptr[row]..p.row_ptr[row + 1] {
                let col = p.col_idx[k] as usize;
                let v = self.vals[k];
                max_abs = max_abs.max(v.abs());
                let vt = match p.find(col, row as u32) {
                    Some(kt) => self.vals[kt],
                    None => 0.0,
                };
                max_asym = max_asym.max((v - vt).abs());
            }
        }
        (max_asym, max_abs)
    }

    /// Iterates (row, col, value) in row-major order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        let p = &self.pattern;
        (0..p.nrows).flat_map(move |row| {
            (p.row_ptr[row]..p.row_ptr[row + 1])
                .map(move |k| (row, p.col_idx[k] as usize, self.vals[k]))
        })
    }

    /// Extracts rows/cols given by `rows`/`cols` as a dense block.
    pub fn dense_submatrix(&self, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
        let mut d = DMatrix::zeros(rows.len(), cols.len());
        for (i, &r) in rows.iter().enumerate() {
            for (j, &c) in cols.iter().enumerate() {
                d[(i, j)] = self.get(r, c);
            }
        }
        d
    }
}

/// Scatters a dense element block into `m` at global rows/cols, skipping
/// entries flagged `u32::MAX` (used for eliminated constrained dofs).
pub fn scatter_dense(m: &mut CsrMatrix, rows: &[u32], cols: &[u32], block: &DMatrix<f64>) {
    assert_eq!(block.nrows(), rows.len());
    assert_eq!(block.ncols(), cols.len());
    for (i, &r) in rows.iter().enumerate() {
        if r == u32::MAX {
            continue;
        }
        for (j, &c) in cols.iter().enumerate() {
            if c == u32::MAX {
                continue;
            }
            m.add(r as usize, c as usize, block[(i, j)]);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn triplets_accumulate() {
        let m = CsrMatrix::from_triplets(2, 2, &[(0, 0, 1.0), (0, 0, 2.0), (1, 0, -1.0)]);
        assert_eq!(m.get(0, 0), 3.0);
        assert_eq!(m.get(1, 0), -1.0);
        assert_eq!(m.get(1, 1), 0.0);
        assert_eq!(m.nnz(), 2);
    }

    #[test]
    fn matvec_matches_dense() {
        let trips = vec![(0, 1, 2.0), (1, 0, -1.0), (2, 2, 4.0), (0, 0, 1.0)];
        let m = CsrMatrix::from_triplets(3, 3, &trips);
        let x = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let y = m.mul_vec_alloc(&x);
        let yd = m.to_dense() * &x;
        assert!((y - yd).norm() < 1e-14);
    }

    #[test]
    fn symmetry_error_detects_asymmetry() {
        let sym = CsrMatrix::from_triplets(2, 2, &[(0, 1, 3.0), (1, 0, 3.0)]);
        assert_eq!(sym.symmetry_error().0, 0.0);
        let asym = CsrMatrix::from_triplets(2, 2, &[(0, 1, 3.0), (1, 0, 2.5)]);
        assert!((asym.symmetry_error().0 - 0.5).abs() < 1e-15);
        let onesided = CsrMatrix::from_triplets(2, 2, &[(0, 1, 3.0)]);
        assert_eq!(onesided.symmetry_error().0, 3.0);
    }

    proptest! {
        // Pattern reuse: scattering random triplets through a prebuilt
        // pattern agrees with direct triplet accumulation.
        #[test]
        fn pattern_scatter_matches_triplets(
            entries in proptest::collection::vec((0usize..6, 0usize..6, -10.0f64..10.0), 1..40)
        ) {
            let direct = CsrMatrix::from_triplets(6, 6, &entries);
            let mut pairs: Vec<(u32, u32)> =
                entries.iter().map(|&(r, c, _)| (r as u32, c as u32)).collect();
            let pat = Arc::new(SparsityPattern::from_pairs(6, 6, &mut pairs));
            let mut m = CsrMatrix::zeros(pat);
            for &(r, c, v) in &entries {
                m.add(r, c, v);
            }
            prop_assert!((m.to_dense() - direct.to_dense()).norm() < 1e-12);
        }

        #[test]
        fn dense_roundtrip_matvec(
            entries in proptest::collection::vec((0usize..5, 0usize..5, -1.0f64..1.0), 0..25),
            xs in proptest::collection::vec(-1.0f64..1.0, 5)
        ) {
            let m = CsrMatrix::from_triplets(5, 5, &entries);
            let x = DVector::from_vec(xs);
            let y = m.mul_vec_alloc(&x);
            let yd = m.to_dense() * &x;
            prop_assert!((y - yd).norm() < 1e-12);
        }
    }
}

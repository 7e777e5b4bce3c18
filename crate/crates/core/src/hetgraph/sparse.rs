use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("entry ({row}, {col}) outside a {n_rows}x{n_cols} matrix")]
    OutOfBounds {
        row: usize,
        col: usize,
        n_rows: usize,
        n_cols: usize,
    },
    #[error("invalid weight {weight} at ({row}, {col})")]
    BadWeight { row: usize, col: usize, weight: f64 },
}

/// Rectangular weighted adjacency between a source and a target node type,
/// stored in compressed sparse row form.
///
/// Every stored weight is strictly positive, and columns within a row are
/// strictly increasing.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseBiadj {
    n_rows: usize,
    n_cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl SparseBiadj {
    pub fn empty(n_rows: usize, n_cols: usize) -> Self {
        SparseBiadj {
            n_rows,
            n_cols,
            indptr: vec![0; n_rows + 1],
            indices: Vec::new(),
            data: Vec::new(),
        }
    }

    /// Build from `(row, col, weight)` triples in any order. Duplicates are
    /// summed and zero weights dropped; negative or non-finite weights are rejected.
    pub fn from_triples(
        n_rows: usize,
        n_cols: usize,
        triples: impl IntoIterator<Item = (usize, usize, f64)>,
    ) -> Result<Self, SparseError> {
        let mut entries: Vec<(usize, usize, f64)> = Vec::new();
        for (row, col, weight) in triples {
            if row >= n_rows || col >= n_cols {
                return Err(SparseError::OutOfBounds {
                    row,
                    col,
                    n_rows,
                    n_cols,
                });
            }
            if !weight.is_finite() || weight < 0.0 {
                return Err(SparseError::BadWeight { row, col, weight });
            }
            if weight > 0.0 {
                entries.push((row, col, weight));
            }
        }
        entries.sort_by_key(|&(r, c, _)| (r, c));
        let mut merged: Vec<(usize, usize, f64)> = Vec::with_capacity(entries.len());
        for (r, c, w) in entries {
            match merged.last_mut() {
                Some(last) if last.0 == r && last.1 == c => last.2 += w,
                _ => merged.push((r, c, w)),
            }
        }
        Ok(Self::from_sorted_unique(n_rows, n_cols, merged))
    }

    fn from_sorted_unique(n_rows: usize, n_cols: usize, entries: Vec<(usize, usize, f64)>) -> Self {
        let mut indptr = vec![0; n_rows + 1];
        for &(r, _, _) in &entries {
            indptr[r + 1] += 1;
        }
        for i in 0..n_rows {
            indptr[i + 1] += indptr[i];
        }
        let (indices, data) = entries.into_iter().map(|(_, c, w)| (c, w)).unzip();
        SparseBiadj {
            n_rows,
            n_cols,
            indptr,
            indices,
            data,
        }
    }

    /// Assemble from per-row `(col, weight)` lists that are already sorted by
    /// column, unique, and strictly positive.
    pub(crate) fn from_rows(n_cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let n_rows = rows.len();
        let mut indptr = Vec::with_capacity(n_rows + 1);
        indptr.push(0);
        let nnz = rows.iter().map(Vec::len).sum();
        let mut indices = Vec::with_capacity(nnz);
        let mut data = Vec::with_capacity(nnz);
        for row in rows {
            for (c, w) in row {
                debug_assert!(w > 0.0 && c < n_cols);
                indices.push(c);
                data.push(w);
            }
            indptr.push(indices.len());
        }
        SparseBiadj {
            n_rows,
            n_cols,
            indptr,
            indices,
            data,
        }
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.n_cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.n_rows, self.n_cols)
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Fraction of the `n_rows * n_cols` cells that are stored.
    pub fn density(&self) -> f64 {
        let cells = self.n_rows * self.n_cols;
        if cells == 0 {
            0.0
        } else {
            self.nnz() as f64 / cells as f64
        }
    }

    /// Column indices and weights of row `i`.
    pub fn row(&self, i: usize) -> (&[usize], &[f64]) {
        let range = self.indptr[i]..self.indptr[i + 1];
        (&self.indices[range.clone()], &self.data[range])
    }

    pub fn row_nnz(&self, i: usize) -> usize {
        self.indptr[i + 1] - self.indptr[i]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        if i >= self.n_rows {
            return 0.0;
        }
        let (cols, vals) = self.row(i);
        cols.binary_search(&j).map_or(0.0, |k| vals[k])
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        i < self.n_rows && self.row(i).0.binary_search(&j).is_ok()
    }

    /// All `(row, col, weight)` entries in row-major order.
    pub fn triples(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_rows).flat_map(move |r| {
            let (cols, vals) = self.row(r);
            cols.iter().zip(vals).map(move |(&c, &w)| (r, c, w))
        })
    }

    pub fn transpose(&self) -> SparseBiadj {
        let mut counts = vec![0usize; self.n_cols + 1];
        for &c in &self.indices {
            counts[c + 1] += 1;
        }
        for j in 0..self.n_cols {
            counts[j + 1] += counts[j];
        }
        let indptr = counts.clone();
        let mut next = counts;
        let mut indices = vec![0; self.nnz()];
        let mut data = vec![0.0; self.nnz()];
        for r in 0..self.n_rows {
            let (cols, vals) = self.row(r);
            for (&c, &w) in cols.iter().zip(vals) {
                let dst = next[c];
                indices[dst] = r;
                data[dst] = w;
                next[c] += 1;
            }
        }
        SparseBiadj {
            n_rows: self.n_cols,
            n_cols: self.n_rows,
            indptr,
            indices,
            data,
        }
    }

    /// Weighted out-degree of every row.
    pub fn row_sums(&self) -> Vec<f64> {
        (0..self.n_rows).map(|r| self.row(r).1.iter().sum()).collect()
    }

    /// Weighted in-degree of every column.
    pub fn col_sums(&self) -> Vec<f64> {
        let mut sums = vec![0.0; self.n_cols];
        for (&c, &w) in self.indices.iter().zip(&self.data) {
            sums[c] += w;
        }
        sums
    }

    /// Keep only entries for which `keep(row, col, weight)` holds.
    pub fn filter(&self, mut keep: impl FnMut(usize, usize, f64) -> bool) -> SparseBiadj {
        let rows = (0..self.n_rows)
            .map(|r| {
                let (cols, vals) = self.row(r);
                cols.iter()
                    .zip(vals)
                    .filter(|&(&c, &w)| keep(r, c, w))
                    .map(|(&c, &w)| (c, w))
                    .collect()
            })
            .collect();
        SparseBiadj::from_rows(self.n_cols, rows)
    }

    /// Dense row-major copy; meant for tests and small inspections.
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let mut out = vec![vec![0.0; self.n_cols]; self.n_rows];
        for (r, c, w) in self.triples() {
            out[r][c] = w;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicates_summed_zeros_dropped() {
        let m = SparseBiadj::from_triples(2, 3, [(0, 1, 1.0), (0, 1, 2.0), (1, 0, 0.0), (1, 2, 0.5)])
            .unwrap();
        assert_eq!(m.nnz(), 2);
        assert_eq!(m.get(0, 1), 3.0);
        assert_eq!(m.get(1, 0), 0.0);
        assert!(!m.contains(1, 0));
    }

    #[test]
    fn negative_weight_rejected() {
        let err = SparseBiadj::from_triples(1, 1, [(0, 0, -1.0)]).unwrap_err();
        assert!(matches!(err, SparseError::BadWeight { .. }));
    }

    #[test]
    fn out_of_bounds_rejected() {
        let err = SparseBiadj::from_triples(2, 2, [(0, 2, 1.0)]).unwrap_err();
        assert!(matches!(err, SparseError::OutOfBounds { col: 2, .. }));
    }

    #[test]
    fn transpose_is_an_involution() {
        let m = SparseBiadj::from_triples(3, 4, [(0, 3, 1.0), (2, 0, 0.25), (2, 3, 4.0), (1, 1, 2.0)])
            .unwrap();
        let t = m.transpose();
        assert_eq!(t.shape(), (4, 3));
        assert_eq!(t.get(3, 2), 4.0);
        assert_eq!(t.transpose(), m);
    }

    #[test]
    fn degree_sums() {
        let m = SparseBiadj::from_triples(2, 2, [(0, 0, 1.0), (0, 1, 2.0), (1, 1, 3.0)]).unwrap();
        assert_eq!(m.row_sums(), vec![3.0, 3.0]);
        assert_eq!(m.col_sums(), vec![1.0, 5.0]);
        assert_eq!(m.density(), 0.75);
    }
}

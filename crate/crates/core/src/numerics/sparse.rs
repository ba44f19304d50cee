use super::Matrix;

/// Compressed sparse row matrix used for constant graph propagation operators.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    values: Vec<f64>,
}

impl Csr {
    /// Builds from `(row, col, value)` triplets; duplicates are summed.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by_key(|a| (a.0, a.1));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut values: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            debug_assert!(r < rows && c < cols);
            if last == Some((r, c)) {
                *values.last_mut().unwrap() += v;
                continue;
            }
            indices.push(c);
            values.push(v);
            indptr[r + 1] += 1;
            last = Some((r, c));
        }
        for i in 0..rows {
            indptr[i + 1] += indptr[i];
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            values,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row_entries(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[i]..self.indptr[i + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// `self · dense`.
    pub fn matmul(&self, dense: &Matrix) -> Matrix {
        assert_eq!(self.cols, dense.rows(), "csr matmul shape");
        let mut out = Matrix::zeros(self.rows, dense.cols());
        for i in 0..self.rows {
            let span = self.indptr[i]..self.indptr[i + 1];
            for (&j, &v) in self.indices[span.clone()].iter().zip(&self.values[span]) {
                let src = dense.row(j);
                let dst = out.row_mut(i);
                for (o, x) in dst.iter_mut().zip(src) {
                    *o += v * x;
                }
            }
        }
        out
    }

    /// `selfᵀ · dense`.
    pub fn t_matmul(&self, dense: &Matrix) -> Matrix {
        assert_eq!(self.rows, dense.rows(), "csr t_matmul shape");
        let mut out = Matrix::zeros(self.cols, dense.cols());
        for i in 0..self.rows {
            let span = self.indptr[i]..self.indptr[i + 1];
            for (&j, &v) in self.indices[span.clone()].iter().zip(&self.values[span]) {
                let src = dense.row(i).to_vec();
                let dst = out.row_mut(j);
                for (o, x) in dst.iter_mut().zip(&src) {
                    *o += v * x;
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Matrix {
        let mut out = Matrix::zeros(self.rows, self.cols);
        for i in 0..self.rows {
            for (j, v) in self.row_entries(i) {
                out.set(i, j, out.get(i, j) + v);
            }
        }
        out
    }
}

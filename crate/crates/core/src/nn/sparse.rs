use super::params::Mat;

/// Compressed sparse row matrix with f64 entries.
#[derive(Clone, Debug, PartialEq)]
pub struct Csr {
    rows: usize,
    cols: usize,
    indptr: Vec<usize>,
    indices: Vec<usize>,
    data: Vec<f64>,
}

impl Csr {
    /// Builds from `(row, col, value)` triplets. Duplicate coordinates are
    /// summed; entries within a row are ordered by column.
    pub fn from_triplets(rows: usize, cols: usize, mut triplets: Vec<(usize, usize, f64)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut indptr = vec![0usize; rows + 1];
        let mut indices = Vec::with_capacity(triplets.len());
        let mut data: Vec<f64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            assert!(r < rows && c < cols, "triplet ({r},{c}) outside {rows}x{cols}");
            if last == Some((r, c)) {
                *data.last_mut().unwrap() += v;
                continue;
            }
            indptr[r + 1] += 1;
            indices.push(c);
            data.push(v);
            last = Some((r, c));
        }
        for r in 0..rows {
            indptr[r + 1] += indptr[r];
        }
        Self {
            rows,
            cols,
            indptr,
            indices,
            data,
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn nnz(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.indptr[r]..self.indptr[r + 1];
        self.indices[span.clone()]
            .iter()
            .copied()
            .zip(self.data[span].iter().copied())
    }

    /// `self · x`
    pub fn matmul(&self, x: &Mat) -> Mat {
        assert_eq!(self.cols, x.nrows(), "spmm shape mismatch");
        let mut out = Mat::zeros((self.rows, x.ncols()));
        for r in 0..self.rows {
            let mut out_row = out.row_mut(r);
            for (c, v) in self.row(r) {
                out_row.scaled_add(v, &x.row(c));
            }
        }
        out
    }

    /// `selfᵀ · x`
    pub fn t_matmul(&self, x: &Mat) -> Mat {
        assert_eq!(self.rows, x.nrows(), "spmm-T shape mismatch");
        let mut out = Mat::zeros((self.cols, x.ncols()));
        for r in 0..self.rows {
            let x_row = x.row(r);
            for (c, v) in self.row(r) {
                out.row_mut(c).scaled_add(v, &x_row);
            }
        }
        out
    }

    pub fn to_dense(&self) -> Mat {
        let mut out = Mat::zeros((self.rows, self.cols));
        for r in 0..self.rows {
            for (c, v) in self.row(r) {
                out[[r, c]] += v;
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn duplicates_are_summed_and_products_match_dense() {
        let a = Csr::from_triplets(2, 3, vec![(1, 2, 1.0), (0, 0, 2.0), (1, 2, 0.5), (0, 1, -1.0)]);
        assert_eq!(a.nnz(), 3);
        let dense = a.to_dense();
        assert_eq!(dense, array![[2.0, -1.0, 0.0], [0.0, 0.0, 1.5]]);
        let x = array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]];
        assert_eq!(a.matmul(&x), dense.dot(&x));
        let y = array![[1.0], [2.0]];
        assert_eq!(a.t_matmul(&y), dense.t().dot(&y));
    }
}

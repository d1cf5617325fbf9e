//! Compressed-row storage for thresholded relation matrices.

/// Row-compressed `K×K` matrix holding only the entries that survived a mask.
///
/// Column indices within a row are strictly increasing, so a product with a
/// dense matrix adds its terms in the same order as the dense kernel does.
#[derive(Clone, Debug, PartialEq)]
pub struct CsrMatrix {
    rows: usize,
    cols: usize,
    row_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    values: Vec<f64>,
}

impl CsrMatrix {
    /// Keeps `values[i*cols + j]` wherever `mask` is set.
    pub fn from_masked(values: &[f64], mask: &[bool], rows: usize, cols: usize) -> Self {
        assert_eq!(values.len(), rows * cols);
        assert_eq!(mask.len(), rows * cols);
        let mut row_ptr = Vec::with_capacity(rows + 1);
        let mut col_idx = Vec::new();
        let mut kept = Vec::new();
        row_ptr.push(0);
        for i in 0..rows {
            for j in 0..cols {
                if mask[i * cols + j] {
                    col_idx.push(j);
                    kept.push(values[i * cols + j]);
                }
            }
            row_ptr.push(col_idx.len());
        }
        Self {
            rows,
            cols,
            row_ptr,
            col_idx,
            values: kept,
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Number of stored (kept) entries.
    pub fn nnz(&self) -> usize {
        self.values.len()
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let span = self.row_ptr[i]..self.row_ptr[i + 1];
        self.col_idx[span.clone()]
            .iter()
            .copied()
            .zip(self.values[span].iter().copied())
    }

    /// `self · x` for a dense row-major `x[cols×d]`.
    pub fn matmul_dense(&self, x: &[f64], d: usize) -> Vec<f64> {
        assert_eq!(x.len(), self.cols * d);
        let mut out = vec![0.0; self.rows * d];
        for i in 0..self.rows {
            let dst = &mut out[i * d..(i + 1) * d];
            for (j, v) in self.row(i) {
                for (o, xv) in dst.iter_mut().zip(&x[j * d..(j + 1) * d]) {
                    *o += v * xv;
                }
            }
        }
        out
    }

    /// `selfᵀ · g` for a dense row-major `g[rows×d]`.
    pub fn transpose_matmul_dense(&self, g: &[f64], d: usize) -> Vec<f64> {
        assert_eq!(g.len(), self.rows * d);
        let mut out = vec![0.0; self.cols * d];
        for i in 0..self.rows {
            let src = &g[i * d..(i + 1) * d];
            for (j, v) in self.row(i) {
                for (o, gv) in out[j * d..(j + 1) * d].iter_mut().zip(src) {
                    *o += v * gv;
                }
            }
        }
        out
    }

    pub fn to_dense(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows * self.cols];
        for i in 0..self.rows {
            for (j, v) in self.row(i) {
                out[i * self.cols + j] = v;
            }
        }
        out
    }
}

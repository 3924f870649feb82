//! Small dense helpers over `f64` slices. Matrices are row-major.

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    norm_sq(a).sqrt()
}

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `dst += alpha * src`
#[inline]
pub fn axpy(dst: &mut [f64], alpha: f64, src: &[f64]) {
    debug_assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

#[inline]
pub fn sub(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

/// `y = Mᵀ x` for a `rows × cols` matrix `m`; `x` has length `rows`.
pub fn mat_t_vec(m: &[f64], rows: usize, cols: usize, x: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    debug_assert_eq!(x.len(), rows);
    let mut y = vec![0.0; cols];
    for (r, &xr) in x.iter().enumerate() {
        if xr != 0.0 {
            axpy(&mut y, xr, &m[r * cols..(r + 1) * cols]);
        }
    }
    y
}

/// `y = M g` for a `rows × cols` matrix `m`; `g` has length `cols`.
pub fn mat_vec(m: &[f64], rows: usize, cols: usize, g: &[f64]) -> Vec<f64> {
    debug_assert_eq!(m.len(), rows * cols);
    (0..rows).map(|r| dot(&m[r * cols..(r + 1) * cols], g)).collect()
}

/// `M += alpha * x gᵀ`
pub fn add_outer(m: &mut [f64], cols: usize, alpha: f64, x: &[f64], g: &[f64]) {
    for (r, &xr) in x.iter().enumerate() {
        if xr != 0.0 {
            axpy(&mut m[r * cols..(r + 1) * cols], alpha * xr, g);
        }
    }
}

pub fn all_finite(a: &[f64]) -> bool {
    a.iter().all(|v| v.is_finite())
}

/// Row-major `rows × cols` matrix of `f64`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), rows * cols, "matrix data does not match shape");
        Matrix { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::new(rows, cols, vec![0.0; rows * cols])
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|r| r.len() == cols), "ragged rows");
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact on an empty-width matrix would panic
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn select(&self, ids: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(ids.len() * self.cols);
        for &i in ids {
            data.extend_from_slice(self.row(i));
        }
        Matrix::new(ids.len(), self.cols, data)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    /// Applies `f` to every row, collecting the results into a new matrix.
    pub fn map_rows<F>(&self, cols: usize, mut f: F) -> crate::error::Result<Matrix>
    where
        F: FnMut(&[f64]) -> crate::error::Result<Vec<f64>>,
    {
        let mut data = Vec::with_capacity(self.rows * cols);
        for r in self.iter_rows() {
            let out = f(r)?;
            crate::error::Error::check_dim(cols, out.len())?;
            data.extend_from_slice(&out);
        }
        Ok(Matrix::new(self.rows, cols, data))
    }
}

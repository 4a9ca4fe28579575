//! Small dense kernels with a fixed, row-independent summation order.
//!
//! Every output row depends only on the matching input row, so computing a
//! token's projection inside a longer sequence gives bit-identical results to
//! computing it alone. The KV-reuse identity tests rely on this.

use ndarray::{s, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

pub type Matrix = Array2<f64>;

/// `x · w` accumulated row by row in ascending inner-index order.
pub fn matmul(x: ArrayView2<'_, f64>, w: ArrayView2<'_, f64>) -> Matrix {
    assert_eq!(x.ncols(), w.nrows(), "matmul inner dimension");
    let cols = w.ncols();
    let w = w.as_standard_layout();
    let w = w.as_slice().expect("standard layout");
    let mut out = Array2::zeros((x.nrows(), cols));
    if cols == 0 {
        return out;
    }
    let out_rows = out.as_slice_mut().expect("fresh array").chunks_exact_mut(cols);
    for (x_row, out_row) in x.axis_iter(Axis(0)).zip(out_rows) {
        for (&xk, w_row) in x_row.iter().zip(w.chunks_exact(cols)) {
            for (o, &wkj) in out_row.iter_mut().zip(w_row) {
                *o += xk * wkj;
            }
        }
    }
    out
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn frobenius(m: &Matrix) -> f64 {
    m.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn l1(row: impl IntoIterator<Item = f64>) -> f64 {
    row.into_iter().map(f64::abs).sum()
}

/// Columns `[head * d_k, (head + 1) * d_k)` of a concatenated-heads matrix.
pub fn head_slice(full: &Matrix, head: usize, d_k: usize) -> Matrix {
    full.slice(s![.., head * d_k..(head + 1) * d_k]).to_owned()
}

pub fn concat_heads(heads: &[Matrix]) -> Matrix {
    let views: Vec<_> = heads.iter().map(|h| h.view()).collect();
    ndarray::concatenate(Axis(1), &views).expect("heads share a row count")
}

pub fn ensure_finite(m: &Matrix, what: &str) -> Result<()> {
    if m.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("{what} contains non-finite values")))
    }
}

pub fn ensure_same_shape(a: &Matrix, b: &Matrix, what: &str) -> Result<()> {
    if a.dim() == b.dim() {
        Ok(())
    } else {
        Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.dim(),
            b.dim()
        )))
    }
}

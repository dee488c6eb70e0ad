//! Dense kernels with a row-chunked execution plan.
//!
//! Every kernel splits its output into fixed chunks of rows and processes
//! each chunk independently. The chunking does not depend on the thread
//! count, so the sequential and the parallel plan produce bit-identical
//! results.

/// Output rows handled by one unit of work.
pub const ROW_CHUNK: usize = 32;

/// Execution plan for the data-parallel kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Parallelism {
    Sequential,
    #[cfg(feature = "parallel")]
    #[default]
    Parallel,
}

/// Run `f(first_row, chunk)` over row chunks of a row-major buffer with
/// `row_len` entries per row.
pub fn for_each_row_chunk<F>(par: Parallelism, out: &mut [f64], row_len: usize, f: F)
where
    F: Fn(usize, &mut [f64]) + Sync + Send,
{
    if out.is_empty() || row_len == 0 {
        return;
    }
    let chunk = ROW_CHUNK * row_len;
    match par {
        Parallelism::Sequential => {
            for (ci, c) in out.chunks_mut(chunk).enumerate() {
                f(ci * ROW_CHUNK, c);
            }
        }
        #[cfg(feature = "parallel")]
        Parallelism::Parallel => {
            use rayon::prelude::*;
            out.par_chunks_mut(chunk)
                .enumerate()
                .for_each(|(ci, c)| f(ci * ROW_CHUNK, c));
        }
    }
}

/// Strided view of a row-major operand, possibly transposed.
#[derive(Clone, Copy)]
pub struct Operand<'a> {
    pub data: &'a [f64],
    /// Logical rows after the optional transpose.
    pub rows: usize,
    pub cols: usize,
    pub row_stride: isize,
    pub col_stride: isize,
}

impl<'a> Operand<'a> {
    /// `data` holds a `rows × cols` row-major matrix.
    pub fn plain(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Operand {
            data,
            rows,
            cols,
            row_stride: cols as isize,
            col_stride: 1,
        }
    }

    /// Transposed view of a stored `rows × cols` row-major matrix.
    pub fn transposed(data: &'a [f64], rows: usize, cols: usize) -> Self {
        Operand {
            data,
            rows: cols,
            cols: rows,
            row_stride: 1,
            col_stride: cols as isize,
        }
    }
}

/// `C = A · B` for the logical (already transposed) operands.
///
/// Panics if the inner dimensions disagree; callers validate shapes.
pub fn gemm(par: Parallelism, a: Operand<'_>, b: Operand<'_>) -> Vec<f64> {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    let mut out = vec![0.0; m * n];
    if k == 0 || m == 0 || n == 0 {
        return out;
    }
    // Raw pointers are not Send; pass addresses instead.
    let a_addr = a.data.as_ptr() as usize;
    let b_addr = b.data.as_ptr() as usize;
    for_each_row_chunk(par, &mut out, n, |r0, c| {
        let rows = c.len() / n;
        // SAFETY: the operand views were built from slices that cover every
        // strided element touched here; `c` is an exclusive chunk of `rows × n`.
        unsafe {
            let a_ptr = (a_addr as *const f64).offset(r0 as isize * a.row_stride);
            matrixmultiply::dgemm(
                rows,
                k,
                n,
                1.0,
                a_ptr,
                a.row_stride,
                a.col_stride,
                b_addr as *const f64,
                b.row_stride,
                b.col_stride,
                0.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    });
    out
}

/// Cosine scores of every query row against every database row
/// (`queries · dbᵀ`). Rows are assumed unit-norm.
pub fn score_matrix(
    par: Parallelism,
    queries: &[f64],
    n_queries: usize,
    db: &[f64],
    n_db: usize,
    dim: usize,
) -> Vec<f64> {
    gemm(
        par,
        Operand::plain(queries, n_queries, dim),
        Operand::transposed(db, n_db, dim),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn gemm_matches_naive_across_chunks() {
        let (m, k, n) = (70, 5, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let c = gemm(
            Parallelism::Sequential,
            Operand::plain(&a, m, k),
            Operand::plain(&b, k, n),
        );
        let want = naive(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn transposed_operands() {
        // A is stored 2×3, used as Aᵀ (3×2); B stored 2×2.
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b = [1.0, 0.0, 0.0, 1.0];
        let c = gemm(
            Parallelism::Sequential,
            Operand::transposed(&a, 2, 3),
            Operand::plain(&b, 2, 2),
        );
        assert_eq!(c, vec![1.0, 4.0, 2.0, 5.0, 3.0, 6.0]);
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_plan_is_bit_identical() {
        let (m, k, n) = (131, 17, 9);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.7).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.3).cos()).collect();
        let s = gemm(
            Parallelism::Sequential,
            Operand::plain(&a, m, k),
            Operand::plain(&b, k, n),
        );
        let p = gemm(
            Parallelism::Parallel,
            Operand::plain(&a, m, k),
            Operand::plain(&b, k, n),
        );
        assert_eq!(s, p);
    }
}

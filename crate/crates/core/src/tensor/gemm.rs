//! Thin safe wrapper over `matrixmultiply::dgemm` for strided buffers.

/// Strided matrix view with logical shape `rows x cols`.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> MatRef<'a> {
    /// Dense row-major `rows x cols`.
    pub fn new(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        MatRef {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// Column block `offset..offset+cols` of a row-major matrix whose rows
    /// are `row_stride` wide.
    pub fn cols_of(data: &'a [f64], rows: usize, row_stride: usize, offset: usize, cols: usize) -> Self {
        assert!(offset + cols <= row_stride && data.len() >= rows * row_stride);
        MatRef {
            data: &data[offset..],
            rows,
            cols,
            rs: row_stride as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }

    fn max_index(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            return 0;
        }
        (self.rows - 1) * self.rs as usize + (self.cols - 1) * self.cs as usize
    }
}

/// Mutable strided output view.
pub(crate) struct MatMut<'a> {
    data: &'a mut [f64],
    rows: usize,
    cols: usize,
    rs: isize,
}

impl<'a> MatMut<'a> {
    pub fn new(data: &'a mut [f64], rows: usize, cols: usize) -> Self {
        assert_eq!(data.len(), rows * cols, "gemm output size");
        MatMut {
            data,
            rows,
            cols,
            rs: cols as isize,
        }
    }

    pub fn cols_of(data: &'a mut [f64], rows: usize, row_stride: usize, offset: usize, cols: usize) -> Self {
        assert!(offset + cols <= row_stride && data.len() >= rows * row_stride);
        MatMut {
            data: &mut data[offset..],
            rows,
            cols,
            rs: row_stride as isize,
        }
    }
}

/// `out = beta * out + a * b` for a dense row-major `out`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64], beta: f64) {
    let (m, n) = (a.rows, b.cols);
    gemm_into(a, b, MatMut::new(out, m, n), beta);
}

/// `out = beta * out + a * b` for a strided `out`.
pub(crate) fn gemm_into(a: MatRef<'_>, b: MatRef<'_>, out: MatMut<'_>, beta: f64) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimension");
    assert_eq!((out.rows, out.cols), (m, n), "gemm output shape");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for i in 0..m {
            let row = &mut out.data[i * out.rs as usize..i * out.rs as usize + n];
            row.iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    assert!(a.max_index() < a.data.len() && b.max_index() < b.data.len());
    assert!((m - 1) * out.rs as usize + n <= out.data.len());
    // SAFETY: every index reached through the given dimensions and strides
    // lies inside the corresponding slice (asserted above), and `out` is a
    // unique borrow so it cannot alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.data.as_mut_ptr(),
            out.rs,
            1,
        );
    }
}

//! Dense `f32` feature maps and the GEMM/im2col kernels the network runs on.
//!
//! Feature maps are stored channel-major across the whole batch
//! (`[C][N][H][W]`), so a convolution is one GEMM and per-channel
//! normalization statistics are contiguous rows.

/// A batch of feature maps in `[C][N][H][W]` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, batch: usize, height: usize, width: usize) -> Self {
        FeatureMap {
            channels,
            batch,
            height,
            width,
            data: vec![0.0; channels * batch * height * width],
        }
    }

    /// Build from per-sample `[C][H][W]` images.
    pub fn from_samples(samples: &[&[f32]], channels: usize, height: usize, width: usize) -> Self {
        let n = samples.len();
        let hw = height * width;
        let mut fm = FeatureMap::zeros(channels, n, height, width);
        for (i, s) in samples.iter().enumerate() {
            assert_eq!(s.len(), channels * hw, "sample has wrong size");
            for c in 0..channels {
                let dst = (c * n + i) * hw;
                fm.data[dst..dst + hw].copy_from_slice(&s[c * hw..(c + 1) * hw]);
            }
        }
        fm
    }

    /// Elements per channel row (`N * H * W`).
    pub fn row_len(&self) -> usize {
        self.batch * self.height * self.width
    }

    pub fn row(&self, c: usize) -> &[f32] {
        let m = self.row_len();
        &self.data[c * m..(c + 1) * m]
    }

    pub fn same_shape(&self, other: &FeatureMap) -> bool {
        self.channels == other.channels
            && self.batch == other.batch
            && self.height == other.height
            && self.width == other.width
    }

    /// Sample `n`, channel `c`, as a `[H][W]` slice.
    pub fn plane(&self, c: usize, n: usize) -> &[f32] {
        let hw = self.height * self.width;
        let off = (c * self.batch + n) * hw;
        &self.data[off..off + hw]
    }
}

/// A strided read-only matrix view over an `f32` buffer.
#[derive(Clone, Copy)]
pub struct MatRef<'a> {
    pub data: &'a [f32],
    pub rows: usize,
    pub cols: usize,
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a> MatRef<'a> {
    pub fn new(data: &'a [f32], rows: usize, cols: usize, row_stride: usize) -> Self {
        MatRef {
            data,
            rows,
            cols,
            row_stride,
            col_stride: 1,
        }
    }

    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            row_stride: self.col_stride,
            col_stride: self.row_stride,
        }
    }

    fn check(&self) {
        if self.rows > 0 && self.cols > 0 {
            let last = (self.rows - 1) * self.row_stride + (self.cols - 1) * self.col_stride;
            assert!(last < self.data.len(), "matrix view out of bounds");
        }
    }
}

/// `c = alpha * a * b + beta * c`, with `c` a strided view of `c_data`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    alpha: f32,
    a: MatRef<'_>,
    b: MatRef<'_>,
    beta: f32,
    c_data: &mut [f32],
    c_row_stride: usize,
) {
    assert_eq!(a.cols, b.rows, "inner dimensions differ");
    a.check();
    b.check();
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    assert!((m - 1) * c_row_stride + n <= c_data.len(), "output view out of bounds");
    if k == 0 {
        for i in 0..m {
            for v in &mut c_data[i * c_row_stride..i * c_row_stride + n] {
                *v *= beta;
            }
        }
        return;
    }
    // SAFETY: every view was bounds-checked above against its backing slice.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.row_stride as isize,
            a.col_stride as isize,
            b.data.as_ptr(),
            b.row_stride as isize,
            b.col_stride as isize,
            beta,
            c_data.as_mut_ptr(),
            c_row_stride as isize,
            1,
        );
    }
}

/// Geometry of a square convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }
}

/// Unfold the first `channels` channels of `x` into a
/// `[channels*k*k][N*Hout*Wout]` matrix.
pub fn im2col(x: &FeatureMap, channels: usize, g: ConvGeom) -> Vec<f32> {
    let (ho, wo) = g.out_size(x.height, x.width);
    let n = x.batch;
    let cols = n * ho * wo;
    let kk = g.kernel * g.kernel;
    let mut out = vec![0.0f32; channels * kk * cols];
    if g.kernel == 1 && g.stride == 1 && g.pad == 0 {
        out.copy_from_slice(&x.data[..channels * cols]);
        return out;
    }
    for c in 0..channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * kk + ky * g.kernel + kx) * cols;
                for b in 0..n {
                    let plane = x.plane(c, b);
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        let dst = row + (b * ho + oy) * wo;
                        if iy < 0 || iy >= x.height as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * x.width..(iy as usize + 1) * x.width];
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < x.width {
                                out[dst + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-add `col` into `dx` (first `channels`
/// channels).
pub fn col2im(col: &[f32], dx: &mut FeatureMap, channels: usize, g: ConvGeom) {
    let (ho, wo) = g.out_size(dx.height, dx.width);
    let n = dx.batch;
    let cols = n * ho * wo;
    let kk = g.kernel * g.kernel;
    let hw = dx.height * dx.width;
    if g.kernel == 1 && g.stride == 1 && g.pad == 0 {
        for (d, s) in dx.data[..channels * cols].iter_mut().zip(col) {
            *d += s;
        }
        return;
    }
    for c in 0..channels {
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let row = (c * kk + ky * g.kernel + kx) * cols;
                for b in 0..n {
                    let plane_off = (c * n + b) * hw;
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= dx.height as isize {
                            continue;
                        }
                        let src = row + (b * ho + oy) * wo;
                        let dst_row = plane_off + iy as usize * dx.width;
                        for ox in 0..wo {
                            let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                            if ix >= 0 && (ix as usize) < dx.width {
                                dx.data[dst_row + ix as usize] += col[src + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

//! Slice-level kernels behind the tape operations.

use super::Scalar;

/// Strided matrix view used to describe GEMM operands.
#[derive(Clone, Copy)]
pub(crate) struct Mat<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, T> Mat<'a, T> {
    pub fn row_major(data: &'a [T], rows: usize, cols: usize) -> Self {
        Mat {
            data,
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Mat {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_offset(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
        }
    }
}

/// `c (m×n, row-major) = a·b + beta·c`.
pub(crate) fn gemm<T: Scalar>(a: Mat<'_, T>, b: Mat<'_, T>, beta: T, c: &mut [T]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert!(c.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut c[..m * n] {
            *v = *v * beta;
        }
        return;
    }
    assert!(a.max_offset() < a.data.len() && b.max_offset() < b.data.len());
    // SAFETY: bounds of all three operands were checked above and `c` is a
    // distinct mutable borrow.
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            T::one(),
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_image(&self) -> usize {
        self.in_ch * self.height * self.width
    }

}

/// Unfolds one image into columns `offset..offset+plane` of a column matrix
/// with row length `ld`.
fn im2col<T: Scalar>(g: &ConvGeom, image: &[T], cols: &mut [T], ld: usize, offset: usize) {
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ld + offset..][..plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &image[(c * g.height + iy as usize) * g.width..][..g.width];
                    if g.stride == 1 && kj >= g.padding && kj + g.out_w <= g.width + g.padding {
                        let start = kj - g.padding;
                        line.copy_from_slice(&src[start..start + g.out_w]);
                        continue;
                    }
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= g.width as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], ld: usize, offset: usize, image: &mut [T]) {
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ld + offset..][..plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut image[(c * g.height + iy as usize) * g.width..][..g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let plane = g.out_plane();
    let patch = g.patch();
    let mut out = vec![T::zero(); g.batch * g.out_ch * plane];
    let mut cols = vec![T::zero(); patch * plane];
    let kmat = Mat::row_major(kernel, g.out_ch, patch);
    for b in 0..g.batch {
        let image = &input[b * g.in_image()..(b + 1) * g.in_image()];
        let out_b = &mut out[b * g.out_ch * plane..(b + 1) * g.out_ch * plane];
        if let Some(bias) = bias {
            for (o, chunk) in out_b.chunks_mut(plane).enumerate() {
                chunk.fill(bias[o]);
            }
        }
        let beta = if bias.is_some() { T::one() } else { T::zero() };
        im2col(g, image, &mut cols, plane, 0);
        gemm(kmat, Mat::row_major(&cols, patch, plane), beta, out_b);
    }
    out
}

/// Accumulates gradients for input, kernel and bias (each optional). The
/// column matrix is rebuilt per image, which keeps the working set in cache.
pub(crate) fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    input: &[T],
    kernel: &[T],
    dout: &[T],
    mut dinput: Option<&mut [T]>,
    mut dkernel: Option<&mut [T]>,
    mut dbias: Option<&mut [T]>,
) {
    let plane = g.out_plane();
    let patch = g.patch();
    let mut cols = vec![T::zero(); patch * plane];
    let mut dcols = if dinput.is_some() {
        vec![T::zero(); patch * plane]
    } else {
        Vec::new()
    };
    let kmat = Mat::row_major(kernel, g.out_ch, patch);
    for b in 0..g.batch {
        let dout_b = &dout[b * g.out_ch * plane..(b + 1) * g.out_ch * plane];
        let dmat = Mat::row_major(dout_b, g.out_ch, plane);
        if let Some(db) = dbias.as_deref_mut() {
            for (o, chunk) in dout_b.chunks(plane).enumerate() {
                db[o] = db[o] + chunk.iter().copied().sum::<T>();
            }
        }
        if let Some(dk) = dkernel.as_deref_mut() {
            let image = &input[b * g.in_image()..(b + 1) * g.in_image()];
            im2col(g, image, &mut cols, plane, 0);
            gemm(dmat, Mat::row_major(&cols, patch, plane).t(), T::one(), dk);
        }
        if let Some(dx) = dinput.as_deref_mut() {
            let dx_b = &mut dx[b * g.in_image()..(b + 1) * g.in_image()];
            gemm(kmat.t(), dmat, T::zero(), &mut dcols);
            col2im_add(g, &dcols, plane, 0, dx_b);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub height: usize,
    pub width: usize,
    pub window: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

/// Max pooling; returns outputs and, per output, the flat input index of the
/// winner (first maximum in row-major window order, i.e. lowest index).
pub(crate) fn maxpool_forward<T: Scalar>(g: &PoolGeom, input: &[T]) -> (Vec<T>, Vec<u32>) {
    let n = g.planes * g.out_h * g.out_w;
    let mut out = Vec::with_capacity(n);
    let mut arg = Vec::with_capacity(n);
    for p in 0..g.planes {
        let base = p * g.height * g.width;
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut best_idx = base + oy * g.stride * g.width + ox * g.stride;
                let mut best = input[best_idx];
                for ky in 0..g.window {
                    let row = base + (oy * g.stride + ky) * g.width + ox * g.stride;
                    for kx in 0..g.window {
                        let v = input[row + kx];
                        if v > best {
                            best = v;
                            best_idx = row + kx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg)
}

pub(crate) fn softmax_row<T: Scalar>(row: &mut [T], inv_tau: T) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = ((*v - max) * inv_tau).exp();
        sum = sum + *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

pub(crate) fn log_softmax_row<T: Scalar>(row: &mut [T]) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
    for v in row.iter_mut() {
        *v = *v - lse;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_with_transposes() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect(); // 2x3
        let b: Vec<f64> = (0..6).map(|v| (v * v) as f64).collect(); // 3x2
        let mut c = vec![0.0; 4];
        gemm(Mat::row_major(&a, 2, 3), Mat::row_major(&b, 3, 2), 0.0, &mut c);
        let mut want = [0.0; 4];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..3 {
                    want[i * 2 + j] += a[i * 3 + k] * b[k * 2 + j];
                }
            }
        }
        assert_eq!(c, want);

        // (bᵀ·aᵀ) = (a·b)ᵀ
        let mut ct = vec![0.0; 4];
        gemm(Mat::row_major(&b, 3, 2).t(), Mat::row_major(&a, 2, 3).t(), 0.0, &mut ct);
        assert_eq!(ct, vec![want[0], want[2], want[1], want[3]]);
    }
}

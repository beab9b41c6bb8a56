//! im2col / col2im kernels shared by convolution and transposed convolution.

use super::tensor::{gemm, Scalar};

/// Geometry of a strided 2-D convolution with zero padding.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// Output size of a convolution over `height x width`; `None` when the
    /// kernel does not fit.
    pub fn conv_out(size: usize, kernel: usize, stride: usize, pad: usize) -> Option<usize> {
        let padded = size + 2 * pad;
        if stride == 0 || padded < kernel {
            return None;
        }
        Some((padded - kernel) / stride + 1)
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel_h * self.kernel_w
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }
}

/// For every entry of the `[C*kh*kw, out_h*out_w]` column matrix of one
/// image, the flat index into the `[C, H, W]` image it reads, or `None` in
/// the zero padding.
fn gather_table(g: &ConvGeom) -> Vec<Option<u32>> {
    let mut table = Vec::with_capacity(g.col_rows() * g.col_cols());
    for c in 0..g.channels {
        for ki in 0..g.kernel_h {
            for kj in 0..g.kernel_w {
                for oi in 0..g.out_h {
                    for oj in 0..g.out_w {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        let inside = (0..g.height as isize).contains(&ii) && (0..g.width as isize).contains(&jj);
                        table.push(inside.then(|| ((c * g.height + ii as usize) * g.width + jj as usize) as u32));
                    }
                }
            }
        }
    }
    table
}

/// Column matrix `[C*kh*kw, B*out_h*out_w]` of a batch of images.
pub fn im2col_batch<S: Scalar>(g: &ConvGeom, batch: usize, images: &[S]) -> Vec<S> {
    let (rows, ncols, len) = (g.col_rows(), g.col_cols(), g.image_len());
    let table = gather_table(g);
    let mut cols = Vec::with_capacity(rows * batch * ncols);
    for r in 0..rows {
        let idx = &table[r * ncols..(r + 1) * ncols];
        for image in images.chunks_exact(len).take(batch) {
            cols.extend(idx.iter().map(|i| match i {
                Some(i) => image[*i as usize],
                None => S::zero(),
            }));
        }
    }
    cols
}

/// Adjoint of [`im2col_batch`]: scatters-and-adds columns into the images.
pub fn col2im_batch_add<S: Scalar>(g: &ConvGeom, batch: usize, cols: &[S], images: &mut [S]) {
    let (rows, ncols, len) = (g.col_rows(), g.col_cols(), g.image_len());
    let table = gather_table(g);
    let mut src = cols.chunks_exact(ncols);
    for r in 0..rows {
        let idx = &table[r * ncols..(r + 1) * ncols];
        for image in images.chunks_exact_mut(len).take(batch) {
            let line = src.next().expect("cols holds rows x batch blocks");
            for (i, &v) in idx.iter().zip(line) {
                if let Some(i) = i {
                    image[*i as usize] = image[*i as usize] + v;
                }
            }
        }
    }
}

/// `[B, C, P]` -> `[C, B*P]`.
fn to_channel_major<S: Scalar>(x: &[S], batch: usize, ch: usize, plane: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for b in 0..batch {
        for c in 0..ch {
            let src = &x[(b * ch + c) * plane..(b * ch + c + 1) * plane];
            out[(c * batch + b) * plane..(c * batch + b + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

/// `[C, B*P]` -> `[B, C, P]`.
fn from_channel_major<S: Scalar>(x: &[S], batch: usize, ch: usize, plane: usize) -> Vec<S> {
    let mut out = vec![S::zero(); x.len()];
    for b in 0..batch {
        for c in 0..ch {
            let src = &x[(c * batch + b) * plane..(c * batch + b + 1) * plane];
            out[(b * ch + c) * plane..(b * ch + c + 1) * plane].copy_from_slice(src);
        }
    }
    out
}

/// Forward convolution over a batch: `x [B, C, H, W]`, `w [O, C, kh, kw]`.
pub fn conv2d_forward<S: Scalar>(g: &ConvGeom, batch: usize, out_ch: usize, x: &[S], w: &[S]) -> Vec<S> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let cols = im2col_batch(g, batch, x);
    let mut y = vec![S::zero(); out_ch * batch * ncols];
    gemm(out_ch, rows, batch * ncols, w, false, &cols, false, &mut y, false);
    from_channel_major(&y, batch, out_ch, ncols)
}

/// Gradients of [`conv2d_forward`] w.r.t. input and weight, accumulated.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<S: Scalar>(
    g: &ConvGeom,
    batch: usize,
    out_ch: usize,
    x: &[S],
    w: &[S],
    dy: &[S],
    dx: Option<&mut [S]>,
    dw: Option<&mut [S]>,
) {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let n = batch * ncols;
    let dy = to_channel_major(dy, batch, out_ch, ncols);
    if let Some(dw) = dw {
        let cols = im2col_batch(g, batch, x);
        gemm(out_ch, n, rows, &dy, false, &cols, true, dw, true);
    }
    if let Some(dx) = dx {
        let mut cols = vec![S::zero(); rows * n];
        gemm(rows, out_ch, n, w, true, &dy, false, &mut cols, false);
        col2im_batch_add(g, batch, &cols, dx);
    }
}

/// Transposed convolution: the input-gradient of the convolution whose
/// geometry is `g` (the output image is the convolution's input).
/// `x [B, O, out_h, out_w]`, `w [O, C, kh, kw]` -> `[B, C, H, W]`.
pub fn conv_transpose2d_forward<S: Scalar>(
    g: &ConvGeom,
    batch: usize,
    in_ch: usize,
    x: &[S],
    w: &[S],
) -> Vec<S> {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let n = batch * ncols;
    let x = to_channel_major(x, batch, in_ch, ncols);
    let mut cols = vec![S::zero(); rows * n];
    gemm(rows, in_ch, n, w, true, &x, false, &mut cols, false);
    let mut out = vec![S::zero(); batch * g.image_len()];
    col2im_batch_add(g, batch, &cols, &mut out);
    out
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<S: Scalar>(
    g: &ConvGeom,
    batch: usize,
    in_ch: usize,
    x: &[S],
    w: &[S],
    dy: &[S],
    dx: Option<&mut [S]>,
    dw: Option<&mut [S]>,
) {
    let (rows, ncols) = (g.col_rows(), g.col_cols());
    let n = batch * ncols;
    let cols = im2col_batch(g, batch, dy);
    if let Some(dx) = dx {
        let mut d = vec![S::zero(); in_ch * n];
        gemm(in_ch, rows, n, w, false, &cols, false, &mut d, false);
        for (acc, v) in dx.iter_mut().zip(from_channel_major(&d, batch, in_ch, ncols)) {
            *acc = *acc + v;
        }
    }
    if let Some(dw) = dw {
        let xs = to_channel_major(x, batch, in_ch, ncols);
        gemm(in_ch, n, rows, &xs, false, &cols, true, dw, true);
    }
}

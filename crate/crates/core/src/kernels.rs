//! Convolution and transposed-convolution kernels (im2col + GEMM), forward
//! and backward. Batch items are processed in parallel; per-item weight
//! gradients are reduced in item order so results are thread-count
//! independent.

use crate::par;
use crate::tensor::{gemm, MatRef, Scalar};

/// Geometry of a strided, zero-padded 2-D convolution over one image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    /// `None` when the kernel does not fit the padded input.
    pub fn new(channels: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let ph = in_h + 2 * pad;
        let pw = in_w + 2 * pad;
        if ph < kernel || pw < kernel || stride == 0 {
            return None;
        }
        Some(Self {
            channels,
            in_h,
            in_w,
            kernel,
            stride,
            pad,
            out_h: (ph - kernel) / stride + 1,
            out_w: (pw - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_len(&self) -> usize {
        self.channels * self.in_h * self.in_w
    }

    /// Range of output positions `o` along one axis for which
    /// `o * stride - pad + k` lands in `0..extent`.
    #[inline]
    fn valid_range(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let s = self.stride as isize;
        let off = k as isize - self.pad as isize;
        // o*s + off >= 0  and  o*s + off < extent
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let hi = ((extent as isize - off) + s - 1) / s;
        let hi = hi.clamp(0, out as isize) as usize;
        (lo.max(0) as usize, hi.max(lo.max(0) as usize))
    }
}

/// Unfolds one `[C, H, W]` image into `[C·k·k, out_h·out_w]` columns.
pub fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    debug_assert_eq!(x.len(), g.in_len());
    debug_assert_eq!(cols.len(), g.col_rows() * g.col_cols());
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            let (oh_lo, oh_hi) = g.valid_range(ki, g.in_h, g.out_h);
            for kj in 0..k {
                let (ow_lo, ow_hi) = g.valid_range(kj, g.in_w, g.out_w);
                let row = ((c * k + ki) * k + kj) * ncols;
                let dst = &mut cols[row..row + ncols];
                dst.fill(T::zero());
                for oh in oh_lo..oh_hi {
                    let ih = oh * s + ki - p;
                    let src_row = &plane[ih * g.in_w..(ih + 1) * g.in_w];
                    let drow = &mut dst[oh * g.out_w..(oh + 1) * g.out_w];
                    for ow in ow_lo..ow_hi {
                        drow[ow] = src_row[ow * s + kj - p];
                    }
                }
            }
        }
    }
}

/// Folds columns back into a `[C, H, W]` image, accumulating into `x`.
pub fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], x: &mut [T]) {
    debug_assert_eq!(x.len(), g.in_len());
    let (k, s, p) = (g.kernel, g.stride, g.pad);
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            let (oh_lo, oh_hi) = g.valid_range(ki, g.in_h, g.out_h);
            for kj in 0..k {
                let (ow_lo, ow_hi) = g.valid_range(kj, g.in_w, g.out_w);
                let row = ((c * k + ki) * k + kj) * ncols;
                let src = &cols[row..row + ncols];
                for oh in oh_lo..oh_hi {
                    let ih = oh * s + ki - p;
                    let drow = &mut plane[ih * g.in_w..(ih + 1) * g.in_w];
                    let srow = &src[oh * g.out_w..(oh + 1) * g.out_w];
                    for ow in ow_lo..ow_hi {
                        drow[ow * s + kj - p] = drow[ow * s + kj - p] + srow[ow];
                    }
                }
            }
        }
    }
}

/// Gradients returned by the backward kernels.
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

fn sum_in_order<T: Scalar>(parts: impl Iterator<Item = Vec<T>>, len: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); len];
    for p in parts {
        for (a, v) in acc.iter_mut().zip(p) {
            *a = *a + v;
        }
    }
    acc
}

/// Forward convolution. `x` is `[B, C, H, W]` with geometry `g`, `weight` is
/// `[Co, C, k, k]`, output is `[B, Co, out_h, out_w]`.
pub fn conv2d_forward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    weight: &[T],
    bias: &[T],
    out_channels: usize,
) -> Vec<T> {
    let kdim = g.col_rows();
    let n = g.col_cols();
    let mut y = vec![T::zero(); batch * out_channels * n];
    let in_len = g.in_len();
    par::for_each_chunk_mut(&mut y, out_channels * n, |b, yb| {
        let mut cols = vec![T::zero(); kdim * n];
        im2col(g, &x[b * in_len..(b + 1) * in_len], &mut cols);
        for (co, row) in yb.chunks_mut(n).enumerate() {
            row.fill(bias[co]);
        }
        gemm(
            T::one(),
            MatRef::row_major(weight, out_channels, kdim),
            MatRef::row_major(&cols, kdim, n),
            T::one(),
            yb,
        );
    });
    y
}

/// Backward pass of [`conv2d_forward`] given the output gradient `dy`.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    weight: &[T],
    dy: &[T],
    out_channels: usize,
    need_input: bool,
    need_params: bool,
) -> ConvGrads<T> {
    let kdim = g.col_rows();
    let n = g.col_cols();
    let in_len = g.in_len();
    let per_item = par::map_indices(batch, |b| {
        let dyb = &dy[b * out_channels * n..(b + 1) * out_channels * n];
        let dw = need_params.then(|| {
            let mut cols = vec![T::zero(); kdim * n];
            im2col(g, &x[b * in_len..(b + 1) * in_len], &mut cols);
            let mut dw = vec![T::zero(); out_channels * kdim];
            gemm(
                T::one(),
                MatRef::row_major(dyb, out_channels, n),
                MatRef::row_major(&cols, kdim, n).t(),
                T::zero(),
                &mut dw,
            );
            let db: Vec<T> = dyb.chunks(n).map(|r| r.iter().copied().sum()).collect();
            (dw, db)
        });
        let dx = need_input.then(|| {
            let mut dcols = vec![T::zero(); kdim * n];
            gemm(
                T::one(),
                MatRef::row_major(weight, out_channels, kdim).t(),
                MatRef::row_major(dyb, out_channels, n),
                T::zero(),
                &mut dcols,
            );
            let mut dx = vec![T::zero(); in_len];
            col2im(g, &dcols, &mut dx);
            dx
        });
        (dx, dw)
    });
    collect_grads(per_item, in_len, out_channels * kdim, out_channels, need_input, need_params)
}

/// Per batch item: input gradient, then (weight, bias) gradients.
type ItemGrads<T> = (Option<Vec<T>>, Option<(Vec<T>, Vec<T>)>);

fn collect_grads<T: Scalar>(
    per_item: Vec<ItemGrads<T>>,
    in_len: usize,
    w_len: usize,
    b_len: usize,
    need_input: bool,
    need_params: bool,
) -> ConvGrads<T> {
    let mut input = need_input.then(|| Vec::with_capacity(in_len * per_item.len()));
    let mut wparts = Vec::new();
    let mut bparts = Vec::new();
    for (dx, p) in per_item {
        if let (Some(acc), Some(dx)) = (input.as_mut(), dx) {
            acc.extend_from_slice(&dx);
        }
        if let Some((dw, db)) = p {
            wparts.push(dw);
            bparts.push(db);
        }
    }
    let (weight, bias) = if need_params {
        (
            Some(sum_in_order(wparts.into_iter(), w_len)),
            Some(sum_in_order(bparts.into_iter(), b_len)),
        )
    } else {
        (None, None)
    };
    ConvGrads {
        input,
        weight,
        bias,
    }
}

/// Forward transposed convolution. `x` is `[B, Cin, H, W]`, `weight` is
/// `[Cin, Cout, k, k]`, and `g` describes the equivalent forward convolution
/// *from* the `[Cout, out_h·s…]` output back to `x` (so `g.out_h == H`).
pub fn conv_transpose2d_forward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    weight: &[T],
    bias: &[T],
    in_channels: usize,
) -> Vec<T> {
    let kdim = g.col_rows();
    let n = g.col_cols();
    let out_len = g.in_len();
    let plane = g.in_h * g.in_w;
    let mut y = vec![T::zero(); batch * out_len];
    par::for_each_chunk_mut(&mut y, out_len, |b, yb| {
        let mut cols = vec![T::zero(); kdim * n];
        gemm(
            T::one(),
            MatRef::row_major(weight, in_channels, kdim).t(),
            MatRef::row_major(&x[b * in_channels * n..(b + 1) * in_channels * n], in_channels, n),
            T::zero(),
            &mut cols,
        );
        for (co, p) in yb.chunks_mut(plane).enumerate() {
            p.fill(bias[co]);
        }
        col2im(g, &cols, yb);
    });
    y
}

/// Backward pass of [`conv_transpose2d_forward`].
#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Scalar>(
    g: &ConvGeom,
    batch: usize,
    x: &[T],
    weight: &[T],
    dy: &[T],
    in_channels: usize,
    need_input: bool,
    need_params: bool,
) -> ConvGrads<T> {
    let kdim = g.col_rows();
    let n = g.col_cols();
    let out_len = g.in_len();
    let plane = g.in_h * g.in_w;
    let x_len = in_channels * n;
    let per_item = par::map_indices(batch, |b| {
        let dyb = &dy[b * out_len..(b + 1) * out_len];
        let mut dcols = vec![T::zero(); kdim * n];
        im2col(g, dyb, &mut dcols);
        let dx = need_input.then(|| {
            let mut dx = vec![T::zero(); x_len];
            gemm(
                T::one(),
                MatRef::row_major(weight, in_channels, kdim),
                MatRef::row_major(&dcols, kdim, n),
                T::zero(),
                &mut dx,
            );
            dx
        });
        let dw = need_params.then(|| {
            let mut dw = vec![T::zero(); in_channels * kdim];
            gemm(
                T::one(),
                MatRef::row_major(&x[b * x_len..(b + 1) * x_len], in_channels, n),
                MatRef::row_major(&dcols, kdim, n).t(),
                T::zero(),
                &mut dw,
            );
            let db: Vec<T> = dyb.chunks(plane).map(|r| r.iter().copied().sum()).collect();
            (dw, db)
        });
        (dx, dw)
    });
    collect_grads(per_item, x_len, in_channels * kdim, g.channels, need_input, need_params)
}

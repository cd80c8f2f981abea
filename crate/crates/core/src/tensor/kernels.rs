//! im2col-based convolution kernels shared by the forward and backward passes.

use super::{Scalar, Shape, Tensor};

/// Geometry of a strided convolution window over one `(c, h, w)` image.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Returns `None` when the kernel does not fit the padded image.
    pub fn new(channels: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || k == 0 || k > h + 2 * pad || k > w + 2 * pad {
            return None;
        }
        Some(ConvGeom {
            channels,
            h,
            w,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn rows(&self) -> usize {
        self.channels * self.k * self.k
    }

    pub fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Source pixel for output position `o` and kernel tap `t` along one axis.
    #[inline]
    fn src(&self, o: usize, t: usize, limit: usize) -> Option<usize> {
        let p = (o * self.stride + t) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < limit).then_some(p as usize)
    }
}

pub(crate) fn im2col<T: Scalar>(img: &[T], g: &ConvGeom, cols: &mut [T]) {
    let ncols = g.cols();
    for c in 0..g.channels {
        let plane = &img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let sy = g.src(oy, ky, g.h);
                    for ox in 0..g.ow {
                        dst[oy * g.ow + ox] = match (sy, g.src(ox, kx, g.w)) {
                            (Some(y), Some(x)) => plane[y * g.w + x],
                            _ => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

/// Scatter-adds columns back into an image; the adjoint of [`im2col`].
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, img: &mut [T]) {
    let ncols = g.cols();
    for c in 0..g.channels {
        let plane = &mut img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for oy in 0..g.oh {
                    let Some(y) = g.src(oy, ky, g.h) else { continue };
                    for ox in 0..g.ow {
                        if let Some(x) = g.src(ox, kx, g.w) {
                            plane[y * g.w + x] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `c (m x n) = a (m x k) * b (k x n) + beta * c`, with optional transposes.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    beta: T,
    c: &mut [T],
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths were checked against the matrix extents above.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_bias<T: Scalar>(out: &mut [T], bias: &[T], plane: usize) {
    for (ch, &b) in bias.iter().enumerate() {
        for v in &mut out[ch * plane..(ch + 1) * plane] {
            *v += b;
        }
    }
}

fn bias_grad<T: Scalar>(dy: &Tensor<T>) -> Tensor<T> {
    let s = dy.shape();
    let plane = s.plane();
    let mut g = vec![T::zero(); s.c];
    for n in 0..s.n {
        for (c, gc) in g.iter_mut().enumerate() {
            let base = (n * s.c + c) * plane;
            *gc += dy.data()[base..base + plane].iter().copied().sum();
        }
    }
    Tensor::column(g)
}

/// Cross-correlation with zero padding. `weight` is `(c_out, c_in, k, k)`.
pub(crate) fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    let s = x.shape();
    let co = weight.shape().n;
    let (rows, ncols) = (g.rows(), g.cols());
    let mut out = Tensor::zeros([s.n, co, g.oh, g.ow]);
    let mut cols = vec![T::zero(); rows * ncols];
    for n in 0..s.n {
        im2col(&x.data()[n * s.item_len()..(n + 1) * s.item_len()], g, &mut cols);
        let dst = &mut out.data_mut()[n * co * ncols..(n + 1) * co * ncols];
        matmul(co, rows, ncols, weight.data(), false, &cols, false, T::zero(), dst);
        if let Some(b) = bias {
            add_bias(dst, b.data(), ncols);
        }
    }
    out
}

pub(crate) struct ConvGrads<T> {
    pub input: Option<Tensor<T>>,
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeom,
    want: [bool; 3],
) -> ConvGrads<T> {
    let s = x.shape();
    let co = weight.shape().n;
    let (rows, ncols) = (g.rows(), g.cols());
    let mut dx = want[0].then(|| Tensor::zeros(s));
    let mut dw = want[1].then(|| Tensor::zeros(weight.shape()));
    let mut cols = vec![T::zero(); rows * ncols];
    for n in 0..s.n {
        let dy_n = &dy.data()[n * co * ncols..(n + 1) * co * ncols];
        if let Some(dw) = dw.as_mut() {
            im2col(&x.data()[n * s.item_len()..(n + 1) * s.item_len()], g, &mut cols);
            matmul(co, ncols, rows, dy_n, false, &cols, true, T::one(), dw.data_mut());
        }
        if let Some(dx) = dx.as_mut() {
            matmul(rows, co, ncols, weight.data(), true, dy_n, false, T::zero(), &mut cols);
            col2im(&cols, g, &mut dx.data_mut()[n * s.item_len()..(n + 1) * s.item_len()]);
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: want[2].then(|| bias_grad(dy)),
    }
}

/// Geometry of the conv2d whose input gradient a transposed convolution computes.
pub(crate) fn transpose_geom(c_out: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Option<ConvGeom> {
    let oh = ((h.checked_sub(1)?) * stride + k).checked_sub(2 * pad)?;
    let ow = ((w.checked_sub(1)?) * stride + k).checked_sub(2 * pad)?;
    let g = ConvGeom::new(c_out, oh, ow, k, stride, pad)?;
    (g.oh == h && g.ow == w).then_some(g)
}

/// Adjoint of [`conv2d_forward`] w.r.t. its input. `weight` is `(c_in, c_out, k, k)`
/// where `c_in` is the channel count of `x`; the geometry describes the output image.
pub(crate) fn conv_transpose_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    g: &ConvGeom,
) -> Tensor<T> {
    let s = x.shape();
    let ci = s.c;
    let (rows, ncols) = (g.rows(), g.cols());
    let out_shape = Shape::new(s.n, g.channels, g.h, g.w);
    let mut out = Tensor::zeros(out_shape);
    let mut cols = vec![T::zero(); rows * ncols];
    for n in 0..s.n {
        let x_n = &x.data()[n * s.item_len()..(n + 1) * s.item_len()];
        matmul(rows, ci, ncols, weight.data(), true, x_n, false, T::zero(), &mut cols);
        let dst = &mut out.data_mut()[n * out_shape.item_len()..(n + 1) * out_shape.item_len()];
        col2im(&cols, g, dst);
        if let Some(b) = bias {
            add_bias(dst, b.data(), g.h * g.w);
        }
    }
    out
}

pub(crate) fn conv_transpose_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    g: &ConvGeom,
    want: [bool; 3],
) -> ConvGrads<T> {
    let s = x.shape();
    let ci = s.c;
    let (rows, ncols) = (g.rows(), g.cols());
    let item_out = dy.shape().item_len();
    let mut dx = want[0].then(|| Tensor::zeros(s));
    let mut dw = want[1].then(|| Tensor::zeros(weight.shape()));
    let mut cols = vec![T::zero(); rows * ncols];
    for n in 0..s.n {
        im2col(&dy.data()[n * item_out..(n + 1) * item_out], g, &mut cols);
        if let Some(dx) = dx.as_mut() {
            let dst = &mut dx.data_mut()[n * s.item_len()..(n + 1) * s.item_len()];
            matmul(ci, rows, ncols, weight.data(), false, &cols, false, T::zero(), dst);
        }
        if let Some(dw) = dw.as_mut() {
            let x_n = &x.data()[n * s.item_len()..(n + 1) * s.item_len()];
            matmul(ci, ncols, rows, x_n, false, &cols, true, T::one(), dw.data_mut());
        }
    }
    ConvGrads {
        input: dx,
        weight: dw,
        bias: want[2].then(|| bias_grad(dy)),
    }
}

/// Fully connected layer over flattened batch items. `weight` is `(out, in, 1, 1)`.
pub(crate) fn linear_forward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: Option<&Tensor<T>>) -> Tensor<T> {
    let s = x.shape();
    let (fan_in, out) = (s.item_len(), weight.shape().n);
    let mut y = Tensor::zeros([s.n, out, 1, 1]);
    matmul(s.n, fan_in, out, x.data(), false, weight.data(), true, T::zero(), y.data_mut());
    if let Some(b) = bias {
        for row in y.data_mut().chunks_mut(out) {
            for (v, &bv) in row.iter_mut().zip(b.data()) {
                *v += bv;
            }
        }
    }
    y
}

pub(crate) fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    want: [bool; 3],
) -> ConvGrads<T> {
    let s = x.shape();
    let (fan_in, out) = (s.item_len(), weight.shape().n);
    let input = want[0].then(|| {
        let mut dx = Tensor::zeros(s);
        matmul(s.n, out, fan_in, dy.data(), false, weight.data(), false, T::zero(), dx.data_mut());
        dx
    });
    let weight = want[1].then(|| {
        let mut dw = Tensor::zeros(weight.shape());
        matmul(out, s.n, fan_in, dy.data(), true, x.data(), false, T::zero(), dw.data_mut());
        dw
    });
    let bias = want[2].then(|| {
        let mut db = vec![T::zero(); out];
        for row in dy.data().chunks(out) {
            for (d, &g) in db.iter_mut().zip(row) {
                *d += g;
            }
        }
        Tensor::column(db)
    });
    ConvGrads { input, weight, bias }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor<f64>, w: &Tensor<f64>, stride: usize, pad: usize) -> Tensor<f64> {
        let s = x.shape();
        let ws = w.shape();
        let k = ws.h;
        let oh = (s.h + 2 * pad - k) / stride + 1;
        let ow = (s.w + 2 * pad - k) / stride + 1;
        let mut out = Tensor::zeros([s.n, ws.n, oh, ow]);
        for n in 0..s.n {
            for o in 0..ws.n {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for c in 0..s.c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let y = (oy * stride + ky) as isize - pad as isize;
                                    let xx = (ox * stride + kx) as isize - pad as isize;
                                    if y >= 0 && xx >= 0 && (y as usize) < s.h && (xx as usize) < s.w {
                                        acc += x.at(n, c, y as usize, xx as usize) * w.at(o, c, ky, kx);
                                    }
                                }
                            }
                        }
                        let i = out.index(n, o, oy, ox);
                        out.data_mut()[i] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn im2col_conv_matches_direct_loops() {
        let x = Tensor::<f64>::from_fn([2, 3, 7, 6], |i| ((i * 37) % 11) as f64 - 5.0);
        let w = Tensor::<f64>::from_fn([4, 3, 3, 3], |i| ((i * 13) % 7) as f64 * 0.5 - 1.5);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
            let g = ConvGeom::new(3, 7, 6, 3, stride, pad).unwrap();
            let fast = conv2d_forward(&x, &w, None, &g);
            assert_eq!(fast, naive_conv(&x, &w, stride, pad), "stride {stride} pad {pad}");
        }
    }

    #[test]
    fn transpose_geometry_inverts_conv_geometry() {
        let g = transpose_geom(8, 32, 32, 4, 2, 1).unwrap();
        assert_eq!((g.h, g.w), (64, 64));
        assert!(transpose_geom(8, 0, 4, 4, 2, 1).is_none());
    }
}

//! Forward and adjoint kernels for the graph operators.

use super::tensor::{Real, Tensor};
use super::AutodiffError;

/// Denominator floor for `l2_normalize`.
pub const L2_EPS: f64 = 1e-12;

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub(crate) fn conv2d_shape(
    input: &[usize],
    weight: &[usize],
    bias: &[usize],
    stride: usize,
    padding: usize,
) -> Result<Vec<usize>, AutodiffError> {
    let mismatch = |context: &str, expected: Vec<usize>, actual: &[usize]| AutodiffError::ShapeMismatch {
        context: format!("conv2d: {context}"),
        expected,
        actual: actual.to_vec(),
    };
    if input.len() != 3 {
        return Err(mismatch("input must be (C_in, H, W)", vec![], input));
    }
    if weight.len() != 4 || weight[1] != input[0] {
        return Err(mismatch("weight must be (C_out, C_in, kH, kW)", vec![0, input[0], 0, 0], weight));
    }
    if bias != [weight[0]] {
        return Err(mismatch("bias must be (C_out)", vec![weight[0]], bias));
    }
    let (kh, kw) = (weight[2], weight[3]);
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(mismatch("kernel extents must be odd", vec![], weight));
    }
    if stride == 0 {
        return Err(mismatch("stride must be positive", vec![], &[stride]));
    }
    let (h, w) = (input[1] + 2 * padding, input[2] + 2 * padding);
    if h < kh || w < kw {
        return Err(mismatch("kernel larger than padded input", vec![kh, kw], &[h, w]));
    }
    Ok(vec![weight[0], (h - kh) / stride + 1, (w - kw) / stride + 1])
}

struct ConvGeom {
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Self {
        let (h, w) = (input[1], input[2]);
        let (kh, kw) = (weight[2], weight[3]);
        Self {
            c_in: input[0],
            h,
            w,
            kh,
            kw,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
            stride,
            padding,
        }
    }

    fn k(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    /// Source (y, x) of output position (oy, ox) at kernel tap (i, j), if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, i: usize, j: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + i).checked_sub(self.padding)?;
        let x = (ox * self.stride + j).checked_sub(self.padding)?;
        (y < self.h && x < self.w).then_some((y, x))
    }

    /// Unfolds the input into a (K, P) patch matrix.
    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let p = self.p();
        let mut col = vec![T::zero(); self.k() * p];
        let mut row = 0;
        for c in 0..self.c_in {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let dst = &mut col[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((y, x)) = self.source(oy, ox, i, j) {
                                dst[oy * self.wo + ox] = plane[y * self.w + x];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        col
    }

    /// Adjoint of [`ConvGeom::im2col`]: folds a (K, P) matrix back onto the input.
    fn col2im<T: Real>(&self, col: &[T]) -> Vec<T> {
        let p = self.p();
        let mut x = vec![T::zero(); self.c_in * self.h * self.w];
        let mut row = 0;
        for c in 0..self.c_in {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for i in 0..self.kh {
                for j in 0..self.kw {
                    let src = &col[row * p..(row + 1) * p];
                    for oy in 0..self.ho {
                        for ox in 0..self.wo {
                            if let Some((y, xx)) = self.source(oy, ox, i, j) {
                                let e = &mut plane[y * self.w + xx];
                                *e = *e + src[oy * self.wo + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
        x
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Tensor<T> {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, padding);
    let c_out = weight.shape()[0];
    let (k, p) = (g.k(), g.p());
    let col = g.im2col(input.data());
    let mut out = vec![T::zero(); c_out * p];
    for (co, row) in out.chunks_mut(p).enumerate() {
        row.fill(bias.data()[co]);
    }
    T::gemm(
        c_out, k, p, T::one(),
        weight.data(), k as isize, 1,
        &col, p as isize, 1,
        T::one(),
        &mut out, p as isize, 1,
    );
    Tensor::new(vec![c_out, g.ho, g.wo], out).expect("conv2d output shape")
}

/// Returns (d input, d weight, d bias).
pub(crate) fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, padding);
    let c_out = weight.shape()[0];
    let (k, p) = (g.k(), g.p());
    let col = g.im2col(input.data());
    let go = grad_out.data();

    // dW (C_out x K) = dOut (C_out x P) . col^T (P x K)
    let mut gw = vec![T::zero(); c_out * k];
    T::gemm(
        c_out, p, k, T::one(),
        go, p as isize, 1,
        &col, 1, p as isize,
        T::zero(),
        &mut gw, k as isize, 1,
    );

    // dcol (K x P) = W^T (K x C_out) . dOut (C_out x P)
    let mut gcol = vec![T::zero(); k * p];
    T::gemm(
        k, c_out, p, T::one(),
        weight.data(), 1, k as isize,
        go, p as isize, 1,
        T::zero(),
        &mut gcol, p as isize, 1,
    );
    let gx = g.col2im(&gcol);

    let gb: Vec<T> = go.chunks(p).map(|row| row.iter().copied().sum()).collect();

    (
        Tensor::new(input.shape().to_vec(), gx).expect("input grad shape"),
        Tensor::new(weight.shape().to_vec(), gw).expect("weight grad shape"),
        Tensor::from_vec(gb),
    )
}

pub(crate) fn relu_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
    out
}

/// Subgradient at exactly zero is zero.
pub(crate) fn relu_backward<T: Real>(x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let mut out = g.clone();
    for (o, &xv) in out.data_mut().iter_mut().zip(x.data()) {
        if xv <= T::zero() {
            *o = T::zero();
        }
    }
    out
}

pub(crate) fn add_forward<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let mut out = a.clone();
    out.add_assign(b);
    out
}

pub(crate) fn global_avg_pool_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let area = s[1] * s[2];
    let scale = T::of_f64(1.0 / area as f64);
    Tensor::from_vec(
        x.data()
            .chunks(area)
            .map(|plane| plane.iter().copied().sum::<T>() * scale)
            .collect(),
    )
}

pub(crate) fn global_avg_pool_backward<T: Real>(shape: &[usize], g: &Tensor<T>) -> Tensor<T> {
    let area = shape[1] * shape[2];
    let scale = T::of_f64(1.0 / area as f64);
    let mut out = Tensor::zeros(shape);
    for (plane, &gc) in out.data_mut().chunks_mut(area).zip(g.data()) {
        plane.fill(gc * scale);
    }
    out
}

pub(crate) fn linear_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let f = x.len();
    Tensor::from_vec(
        w.data()
            .chunks(f)
            .zip(b.data())
            .map(|(row, &bias)| dot(row, x.data()) + bias)
            .collect(),
    )
}

/// Returns (d input, d weight).
pub(crate) fn linear_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let f = x.len();
    let mut gx = vec![T::zero(); f];
    let mut gw = Tensor::zeros(w.shape());
    for ((row, grow), &gd) in w.data().chunks(f).zip(gw.data_mut().chunks_mut(f)).zip(g.data()) {
        for ((gxi, gwi), (&wi, &xi)) in gx.iter_mut().zip(grow.iter_mut()).zip(row.iter().zip(x.data())) {
            *gxi = *gxi + wi * gd;
            *gwi = gd * xi;
        }
    }
    (Tensor::from_vec(gx), gw)
}

fn l2_norm<T: Real>(x: &[T]) -> T {
    dot(x, x).sqrt()
}

pub(crate) fn l2_normalize_forward<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let denom = l2_norm(x.data()).max(T::of_f64(L2_EPS));
    let mut out = x.clone();
    out.data_mut().iter_mut().for_each(|v| *v = *v / denom);
    out
}

/// `(I - y yᵀ) g / ‖x‖` above the epsilon floor, `g / eps` below it.
pub(crate) fn l2_normalize_backward<T: Real>(x: &Tensor<T>, y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let norm = l2_norm(x.data());
    let eps = T::of_f64(L2_EPS);
    let mut out = g.clone();
    if norm > eps {
        let proj = dot(y.data(), g.data());
        for (o, &yi) in out.data_mut().iter_mut().zip(y.data()) {
            *o = (*o - yi * proj) / norm;
        }
    } else {
        out.data_mut().iter_mut().for_each(|o| *o = *o / eps);
    }
    out
}

//! Dense tensors and the handful of differentiable kernels the feature
//! extractor needs. Feature maps are laid out channel-major (`C x H x W`),
//! images pixel-major (`H x W x 3`).

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidShape {
                shape,
                reason: "extents must be positive".into(),
            });
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("{} elements given, {} expected", data.len(), expected),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Self::new(shape.to_vec(), self.data)
    }

    /// Interprets a rank-3 tensor as `(d0, d1, d2)`.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::InvalidShape {
                shape: self.shape.clone(),
                reason: "expected a rank-3 tensor".into(),
            }),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|x| x * s)
    }

    /// `self += s * other`
    pub fn add_scaled(&mut self, other: &Self, s: T) -> Result<()> {
        self.expect_same_shape(other, "add_scaled")?;
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        Ok(())
    }

    pub fn expect_same_shape(&self, other: &Self, context: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch {
                context,
                left: self.shape.clone(),
                right: other.shape.clone(),
            });
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&x| U::from_f64_lossy(x.as_f64()))
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a - b).abs().as_f64())
            .fold(0.0, f64::max)
    }

    pub fn sum_f64(&self) -> f64 {
        self.data.iter().map(|x| x.as_f64()).sum()
    }
}

/// One convolution layer: `kernel` is `out x in x kh x kw`, `bias` has one
/// entry per output channel. Stride 1, zero "same" padding.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvSpec<T> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> ConvSpec<T> {
    pub fn new(kernel: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        let [out_c, _, kh, kw] = kernel.shape()[..] else {
            return Err(Error::InvalidShape {
                shape: kernel.shape().to_vec(),
                reason: "kernel must be out x in x kh x kw".into(),
            });
        };
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::InvalidShape {
                shape: kernel.shape().to_vec(),
                reason: "same padding needs odd kernel extents".into(),
            });
        }
        if bias.shape() != [out_c] {
            return Err(Error::ShapeMismatch {
                context: "conv bias",
                left: vec![out_c],
                right: bias.shape().to_vec(),
            });
        }
        Ok(Self { kernel, bias })
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    fn window(&self) -> (usize, usize) {
        (self.kernel.shape()[2], self.kernel.shape()[3])
    }

    fn check_input(&self, input: &Tensor<T>) -> Result<(usize, usize, usize)> {
        let (c, h, w) = input.dims3()?;
        if c != self.in_channels() {
            return Err(Error::ShapeMismatch {
                context: "conv2d input channels",
                left: input.shape().to_vec(),
                right: self.kernel.shape().to_vec(),
            });
        }
        Ok((c, h, w))
    }
}

/// Unfolds `input` (`C x H x W`) into a `(C*kh*kw) x (H*W)` patch matrix.
fn im2col<T: Scalar>(input: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<T> {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    let mut cols = vec![T::zero(); c * kh * kw * hw];
    for ci in 0..c {
        let plane = &input[ci * hw..(ci + 1) * hw];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &mut cols[((ci * kh + ky) * kw + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src = &plane[sy as usize * w..][..w];
                    let dst = &mut row[y * w..][..w];
                    let shift = kx as isize - pw as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = (w as isize - shift).min(w as isize) as usize;
                    if lo < hi {
                        let s0 = (lo as isize + shift) as usize;
                        dst[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch-matrix entries back onto the image.
fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, kh: usize, kw: usize) -> Vec<T> {
    let (ph, pw) = (kh / 2, kw / 2);
    let hw = h * w;
    let mut out = vec![T::zero(); c * hw];
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..kh {
            for kx in 0..kw {
                let row = &cols[((ci * kh + ky) * kw + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - ph as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..][..w];
                    let src = &row[y * w..][..w];
                    let shift = kx as isize - pw as isize;
                    let lo = (-shift).max(0) as usize;
                    let hi = (w as isize - shift).min(w as isize) as usize;
                    for x in lo..hi {
                        dst[(x as isize + shift) as usize] += src[x];
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d<T: Scalar>(input: &Tensor<T>, spec: &ConvSpec<T>) -> Result<Tensor<T>> {
    let (c, h, w) = spec.check_input(input)?;
    let (kh, kw) = spec.window();
    let oc = spec.out_channels();
    let k = c * kh * kw;
    let hw = h * w;
    let cols = im2col(input.data(), c, h, w, kh, kw);
    let mut out = Vec::with_capacity(oc * hw);
    for &b in spec.bias.data() {
        out.extend(std::iter::repeat(b).take(hw));
    }
    T::gemm(
        oc,
        k,
        hw,
        T::one(),
        spec.kernel.data(),
        (k, 1),
        &cols,
        (hw, 1),
        T::one(),
        &mut out,
        (hw, 1),
    );
    Tensor::new(vec![oc, h, w], out)
}

/// Gradient of `<upstream, conv2d(input, spec)>` with respect to `input`.
pub fn conv2d_grad<T: Scalar>(
    input: &Tensor<T>,
    spec: &ConvSpec<T>,
    upstream: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (c, h, w) = spec.check_input(input)?;
    let oc = spec.out_channels();
    if upstream.shape() != [oc, h, w] {
        return Err(Error::ShapeMismatch {
            context: "conv2d upstream gradient",
            left: vec![oc, h, w],
            right: upstream.shape().to_vec(),
        });
    }
    let (kh, kw) = spec.window();
    let k = c * kh * kw;
    let hw = h * w;
    let mut dcols = vec![T::zero(); k * hw];
    // dcols = kernel^T * upstream
    T::gemm(
        k,
        oc,
        hw,
        T::one(),
        spec.kernel.data(),
        (1, k),
        upstream.data(),
        (hw, 1),
        T::zero(),
        &mut dcols,
        (hw, 1),
    );
    Tensor::new(vec![c, h, w], col2im(&dcols, c, h, w, kh, kw))
}

/// Output of a 2x2 pooling step. Odd extents are padded on the right/bottom
/// by replicating the last row/column; the flags record when that happened.
#[derive(Debug, Clone, PartialEq)]
pub struct Pooled<T> {
    pub output: Tensor<T>,
    pub padded_rows: bool,
    pub padded_cols: bool,
}

fn pool_geometry<T: Scalar>(input: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    if input.is_empty() {
        return Err(Error::EmptyTensor);
    }
    let (c, h, w) = input.dims3()?;
    Ok((c, h, w, h.div_ceil(2), w.div_ceil(2)))
}

/// Flat indices (within one plane) of the four cells feeding output `(oy, ox)`,
/// in row-major order, with edge replication for odd extents.
fn pool_window(h: usize, w: usize, oy: usize, ox: usize) -> [usize; 4] {
    let y0 = 2 * oy;
    let x0 = 2 * ox;
    let y1 = (y0 + 1).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1]
}

fn argmax_in_window<T: Scalar>(plane: &[T], cells: [usize; 4]) -> usize {
    let mut best = cells[0];
    for &i in &cells[1..] {
        if plane[i] > plane[best] {
            best = i;
        }
    }
    best
}

pub fn maxpool2<T: Scalar>(input: &Tensor<T>) -> Result<Pooled<T>> {
    let (c, h, w, oh, ow) = pool_geometry(input)?;
    let mut out = Vec::with_capacity(c * oh * ow);
    for plane in input.data().chunks_exact(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                out.push(plane[argmax_in_window(plane, pool_window(h, w, oy, ox))]);
            }
        }
    }
    Ok(Pooled {
        output: Tensor::new(vec![c, oh, ow], out)?,
        padded_rows: h % 2 == 1,
        padded_cols: w % 2 == 1,
    })
}

/// Routes each upstream value to the position of its window maximum; ties go
/// to the first cell in row-major order.
pub fn maxpool2_grad<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w, oh, ow) = pool_geometry(input)?;
    if upstream.shape() != [c, oh, ow] {
        return Err(Error::ShapeMismatch {
            context: "maxpool2 upstream gradient",
            left: vec![c, oh, ow],
            right: upstream.shape().to_vec(),
        });
    }
    let mut grad = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let plane = &input.data()[ci * h * w..][..h * w];
        let up = &upstream.data()[ci * oh * ow..][..oh * ow];
        let g = &mut grad[ci * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                let i = argmax_in_window(plane, pool_window(h, w, oy, ox));
                g[i] += up[oy * ow + ox];
            }
        }
    }
    Tensor::new(vec![c, h, w], grad)
}

pub fn avgpool2<T: Scalar>(input: &Tensor<T>) -> Result<Pooled<T>> {
    let (c, h, w, oh, ow) = pool_geometry(input)?;
    let quarter = T::from_f64_lossy(0.25);
    let mut out = Vec::with_capacity(c * oh * ow);
    for plane in input.data().chunks_exact(h * w) {
        for oy in 0..oh {
            for ox in 0..ow {
                let cells = pool_window(h, w, oy, ox);
                let s = cells.iter().fold(T::zero(), |acc, &i| acc + plane[i]);
                out.push(s * quarter);
            }
        }
    }
    Ok(Pooled {
        output: Tensor::new(vec![c, oh, ow], out)?,
        padded_rows: h % 2 == 1,
        padded_cols: w % 2 == 1,
    })
}

pub fn avgpool2_grad<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    let (c, h, w, oh, ow) = pool_geometry(input)?;
    if upstream.shape() != [c, oh, ow] {
        return Err(Error::ShapeMismatch {
            context: "avgpool2 upstream gradient",
            left: vec![c, oh, ow],
            right: upstream.shape().to_vec(),
        });
    }
    let quarter = T::from_f64_lossy(0.25);
    let mut grad = vec![T::zero(); c * h * w];
    for ci in 0..c {
        let up = &upstream.data()[ci * oh * ow..][..oh * ow];
        let g = &mut grad[ci * h * w..][..h * w];
        for oy in 0..oh {
            for ox in 0..ow {
                for i in pool_window(h, w, oy, ox) {
                    g[i] += up[oy * ow + ox] * quarter;
                }
            }
        }
    }
    Tensor::new(vec![c, h, w], grad)
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|x| if x > T::zero() { x } else { T::zero() })
}

/// Upstream gated by `input > 0`; the kink itself gets zero gradient.
pub fn relu_grad<T: Scalar>(input: &Tensor<T>, upstream: &Tensor<T>) -> Result<Tensor<T>> {
    input.expect_same_shape(upstream, "relu upstream gradient")?;
    let data = input
        .data()
        .iter()
        .zip(upstream.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Row-major `a (m x k) * b (k x n)`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (&[m, k], &[k2, n]) = (a.shape(), b.shape()) else {
        return Err(Error::ShapeMismatch {
            context: "matmul operands must be matrices",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    };
    if k != k2 {
        return Err(Error::ShapeMismatch {
            context: "matmul inner dimension",
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    let mut c = vec![T::zero(); m * n];
    T::gemm(m, k, n, T::one(), a.data(), (k, 1), b.data(), (n, 1), T::zero(), &mut c, (n, 1));
    Tensor::new(vec![m, n], c)
}

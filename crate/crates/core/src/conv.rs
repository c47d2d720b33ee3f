//! 2-D convolution layers with hand-written reverse passes.
//!
//! Tensors are channel-major (`C × H × W`). Convolutions lower to a matrix
//! product through an im2col patch matrix; transposed convolutions are the
//! adjoint of the same patch geometry.

use ndarray::{Array2, ArrayView2, ArrayViewMut2};

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Self {
            c,
            h,
            w,
            data: vec![0.0; c * h * w],
        }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.h + y) * self.w + x]
    }

    fn view(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.c, self.h * self.w), &self.data).unwrap()
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    /// Channel concatenation.
    pub fn concat(a: &Tensor, b: &Tensor) -> Tensor {
        debug_assert_eq!((a.h, a.w), (b.h, b.w));
        let mut data = Vec::with_capacity(a.data.len() + b.data.len());
        data.extend_from_slice(&a.data);
        data.extend_from_slice(&b.data);
        Tensor {
            c: a.c + b.c,
            h: a.h,
            w: a.w,
            data,
        }
    }

    /// Split along channels at `first` channels.
    pub fn split(&self, first: usize) -> (Tensor, Tensor) {
        let n = first * self.h * self.w;
        (
            Tensor {
                c: first,
                h: self.h,
                w: self.w,
                data: self.data[..n].to_vec(),
            },
            Tensor {
                c: self.c - first,
                h: self.h,
                w: self.w,
                data: self.data[n..].to_vec(),
            },
        )
    }
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Tensor {
    Tensor {
        data: x.data.iter().map(|&v| if v > 0.0 { v } else { slope * v }).collect(),
        ..*x
    }
}

/// Gradient through a leaky ReLU given its pre-activation input.
pub fn leaky_relu_backward(pre: &Tensor, grad: &Tensor, slope: f64) -> Tensor {
    Tensor {
        data: pre
            .data
            .iter()
            .zip(&grad.data)
            .map(|(&p, &g)| if p > 0.0 { g } else { slope * g })
            .collect(),
        ..*pre
    }
}

/// Patch geometry between a "large" grid and the "small" grid a strided
/// convolution maps it to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PatchGeometry {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PatchGeometry {
    pub fn output_size(&self, n: usize) -> usize {
        (n + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Patch matrix of `x`: rows `(c, ky, kx)`, columns `(oy, ox)`.
    fn im2col(&self, x: &Tensor, oh: usize, ow: usize) -> Array2<f64> {
        let k = self.k;
        let mut cols = Array2::<f64>::zeros((x.c * k * k, oh * ow));
        for c in 0..x.c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let mut dst = cols.row_mut(row);
                    let dst = dst.as_slice_mut().unwrap();
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= x.h as isize {
                            continue;
                        }
                        let src = &x.data[(c * x.h + iy as usize) * x.w..(c * x.h + iy as usize + 1) * x.w];
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < x.w {
                                dst[oy * ow + ox] = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    /// Adjoint of [`im2col`](Self::im2col): accumulate patch columns back onto a `c × h × w` grid.
    fn col2im(&self, cols: &ArrayView2<f64>, c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Tensor {
        let k = self.k;
        let mut out = Tensor::zeros(c, h, w);
        for ch in 0..c {
            for ky in 0..k {
                for kx in 0..k {
                    let row = cols.row((ch * k + ky) * k + kx);
                    for oy in 0..oh {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let base = (ch * h + iy as usize) * w;
                        for ox in 0..ow {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && (ix as usize) < w {
                                out.data[base + ix as usize] += row[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConvKind {
    /// Strided convolution; weights `[out][in][ky][kx]`.
    Conv,
    /// Transposed convolution (upsampling); weights `[in][out][ky][kx]`.
    Transposed,
}

/// A convolution layer whose parameters live in an external flat buffer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub kind: ConvKind,
    pub in_c: usize,
    pub out_c: usize,
    pub geom: PatchGeometry,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

impl ConvLayer {
    pub fn weight_len(&self) -> usize {
        self.in_c * self.out_c * self.geom.k * self.geom.k
    }

    pub fn param_len(&self) -> usize {
        self.weight_len() + self.out_c
    }

    /// Fan-in used for initialisation.
    pub fn fan_in(&self) -> usize {
        match self.kind {
            ConvKind::Conv => self.in_c * self.geom.k * self.geom.k,
            ConvKind::Transposed => self.in_c * self.geom.k * self.geom.k / (self.geom.stride * self.geom.stride),
        }
    }

    fn weights<'a>(&self, params: &'a [f64]) -> ArrayView2<'a, f64> {
        let kk = self.geom.k * self.geom.k;
        let slice = &params[self.weight_offset..self.weight_offset + self.weight_len()];
        match self.kind {
            ConvKind::Conv => ArrayView2::from_shape((self.out_c, self.in_c * kk), slice).unwrap(),
            ConvKind::Transposed => ArrayView2::from_shape((self.in_c, self.out_c * kk), slice).unwrap(),
        }
    }

    pub fn output_shape(&self, h: usize, w: usize) -> (usize, usize) {
        match self.kind {
            ConvKind::Conv => (self.geom.output_size(h), self.geom.output_size(w)),
            ConvKind::Transposed => (
                (h - 1) * self.geom.stride + self.geom.k - 2 * self.geom.pad,
                (w - 1) * self.geom.stride + self.geom.k - 2 * self.geom.pad,
            ),
        }
    }

    pub fn forward(&self, params: &[f64], x: &Tensor) -> Tensor {
        debug_assert_eq!(x.c, self.in_c);
        let bias = &params[self.bias_offset..self.bias_offset + self.out_c];
        let (oh, ow) = self.output_shape(x.h, x.w);
        let mut out = match self.kind {
            ConvKind::Conv => {
                let cols = self.geom.im2col(x, oh, ow);
                let y = self.weights(params).dot(&cols);
                Tensor {
                    c: self.out_c,
                    h: oh,
                    w: ow,
                    data: y.into_raw_vec_and_offset().0,
                }
            }
            ConvKind::Transposed => {
                let cols = self.weights(params).t().dot(&x.view());
                self.geom.col2im(&cols.view(), self.out_c, oh, ow, x.h, x.w)
            }
        };
        let hw = oh * ow;
        for (c, b) in bias.iter().enumerate() {
            out.data[c * hw..(c + 1) * hw].iter_mut().for_each(|v| *v += b);
        }
        out
    }

    /// Reverse pass. Accumulates parameter gradients into `grads` (same
    /// layout as the parameter buffer) and returns the input gradient.
    pub fn backward(&self, params: &[f64], x: &Tensor, dout: &Tensor, grads: &mut [f64]) -> Tensor {
        let hw = dout.h * dout.w;
        for c in 0..self.out_c {
            grads[self.bias_offset + c] += dout.data[c * hw..(c + 1) * hw].iter().sum::<f64>();
        }
        let kk = self.geom.k * self.geom.k;
        let wlen = self.weight_len();
        match self.kind {
            ConvKind::Conv => {
                let cols = self.geom.im2col(x, dout.h, dout.w);
                let dy = dout.view();
                let dw = dy.dot(&cols.t());
                let mut gw = ArrayViewMut2::from_shape(
                    (self.out_c, self.in_c * kk),
                    &mut grads[self.weight_offset..self.weight_offset + wlen],
                )
                .unwrap();
                gw += &dw;
                let dcols = self.weights(params).t().dot(&dy);
                self.geom.col2im(&dcols.view(), x.c, x.h, x.w, dout.h, dout.w)
            }
            ConvKind::Transposed => {
                let dcols = self.geom.im2col(dout, x.h, x.w);
                let xv = x.view();
                let dw = xv.dot(&dcols.t());
                let mut gw = ArrayViewMut2::from_shape(
                    (self.in_c, self.out_c * kk),
                    &mut grads[self.weight_offset..self.weight_offset + wlen],
                )
                .unwrap();
                gw += &dw;
                let dx = self.weights(params).dot(&dcols);
                Tensor {
                    c: x.c,
                    h: x.h,
                    w: x.w,
                    data: dx.into_raw_vec_and_offset().0,
                }
            }
        }
    }
}

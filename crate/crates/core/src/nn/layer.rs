//! Per-layer kernels operating on flat batched buffers.
//!
//! Activations are laid out `B x C x H x W`, row-major. Dense layers see the
//! flattened `C*H*W` vector of each sample.

use serde::{Deserialize, Serialize};

use crate::linalg::{gemm, MatRef};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Architecture-level description of a layer. Input sizes are inferred when
/// the network is assembled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    MaxPool {
        window: usize,
    },
    Dense {
        out_features: usize,
    },
    Relu,
}

/// Activation shape of one sample: `(channels, height, width)`.
pub type Shape3 = [usize; 3];

#[derive(Clone, Debug)]
pub struct Layer<T> {
    pub spec: LayerSpec,
    pub in_shape: Shape3,
    pub out_shape: Shape3,
    /// Conv: `[out, in, k, k]`; dense: `[out, in]`.
    pub weight: Option<Tensor<T>>,
    pub bias: Option<Tensor<T>>,
}

pub(crate) fn numel(s: Shape3) -> usize {
    s[0] * s[1] * s[2]
}

impl<T: Scalar> Layer<T> {
    pub fn has_params(&self) -> bool {
        self.weight.is_some()
    }

    fn conv_geometry(&self) -> ConvGeom {
        match self.spec {
            LayerSpec::Conv2d {
                kernel,
                stride,
                padding,
                ..
            } => ConvGeom {
                in_c: self.in_shape[0],
                in_h: self.in_shape[1],
                in_w: self.in_shape[2],
                out_c: self.out_shape[0],
                out_h: self.out_shape[1],
                out_w: self.out_shape[2],
                k: kernel,
                stride,
                pad: padding,
            },
            _ => unreachable!("not a convolution"),
        }
    }

    /// Forward over a batch. Max-pool records the flat argmax index (within the
    /// sample) of every output element into `pool_idx`.
    pub(crate) fn forward(
        &self,
        input: &[T],
        batch: usize,
        with_bias: bool,
        pool_idx: &mut Vec<u32>,
    ) -> Vec<T> {
        let out_n = numel(self.out_shape);
        let in_n = numel(self.in_shape);
        let mut out = vec![T::zero(); batch * out_n];
        match self.spec {
            LayerSpec::Conv2d { .. } => {
                let g = self.conv_geometry();
                let w = self.weight.as_ref().unwrap().data();
                let b = self.bias.as_ref().unwrap().data();
                let mut col = vec![T::zero(); g.col_rows() * g.positions()];
                for s in 0..batch {
                    im2col(&g, &input[s * in_n..(s + 1) * in_n], &mut col);
                    let o = &mut out[s * out_n..(s + 1) * out_n];
                    gemm(
                        T::one(),
                        MatRef::row_major(w, g.out_c, g.col_rows()),
                        MatRef::row_major(&col, g.col_rows(), g.positions()),
                        T::zero(),
                        o,
                    );
                    if with_bias {
                        for (c, plane) in o.chunks_mut(g.positions()).enumerate() {
                            plane.iter_mut().for_each(|x| *x += b[c]);
                        }
                    }
                }
            }
            LayerSpec::Dense { out_features } => {
                let w = self.weight.as_ref().unwrap().data();
                gemm(
                    T::one(),
                    MatRef::row_major(input, batch, in_n),
                    MatRef::row_major(w, out_features, in_n).t(),
                    T::zero(),
                    &mut out,
                );
                if with_bias {
                    let b = self.bias.as_ref().unwrap().data();
                    for row in out.chunks_mut(out_features) {
                        row.iter_mut().zip(b).for_each(|(x, &bb)| *x += bb);
                    }
                }
            }
            LayerSpec::Relu => {
                for (o, &x) in out.iter_mut().zip(input) {
                    *o = if x > T::zero() { x } else { T::zero() };
                }
            }
            LayerSpec::MaxPool { window } => {
                pool_idx.clear();
                pool_idx.resize(batch * out_n, 0);
                let [c_n, h, w] = self.in_shape;
                let [_, oh, ow] = self.out_shape;
                for s in 0..batch {
                    let x = &input[s * in_n..(s + 1) * in_n];
                    for c in 0..c_n {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let mut best_i = c * h * w + (oy * window) * w + ox * window;
                                let mut best = x[best_i];
                                for dy in 0..window {
                                    for dx in 0..window {
                                        let i = c * h * w + (oy * window + dy) * w + ox * window + dx;
                                        // strict comparison keeps the first maximum on ties
                                        if x[i] > best {
                                            best = x[i];
                                            best_i = i;
                                        }
                                    }
                                }
                                let o = s * out_n + (c * oh + oy) * ow + ox;
                                out[o] = best;
                                pool_idx[o] = best_i as u32;
                            }
                        }
                    }
                }
            }
        }
        out
    }

    /// Gradient with respect to the layer input, given the gradient at its output.
    /// `input` is the forward input (used for relu masks), `pool_idx` the recorded routing.
    pub(crate) fn backward_input(
        &self,
        input: &[T],
        pool_idx: &[u32],
        grad_out: &[T],
        batch: usize,
    ) -> Vec<T> {
        let in_n = numel(self.in_shape);
        let out_n = numel(self.out_shape);
        let mut gin = vec![T::zero(); batch * in_n];
        match self.spec {
            LayerSpec::Conv2d { .. } => {
                let g = self.conv_geometry();
                let w = self.weight.as_ref().unwrap().data();
                let mut dcol = vec![T::zero(); g.col_rows() * g.positions()];
                for s in 0..batch {
                    gemm(
                        T::one(),
                        MatRef::row_major(w, g.out_c, g.col_rows()).t(),
                        MatRef::row_major(&grad_out[s * out_n..(s + 1) * out_n], g.out_c, g.positions()),
                        T::zero(),
                        &mut dcol,
                    );
                    col2im_add(&g, &dcol, &mut gin[s * in_n..(s + 1) * in_n]);
                }
            }
            LayerSpec::Dense { out_features } => {
                let w = self.weight.as_ref().unwrap().data();
                gemm(
                    T::one(),
                    MatRef::row_major(grad_out, batch, out_features),
                    MatRef::row_major(w, out_features, in_n),
                    T::zero(),
                    &mut gin,
                );
            }
            LayerSpec::Relu => {
                for ((gi, &go), &x) in gin.iter_mut().zip(grad_out).zip(input) {
                    if x > T::zero() {
                        *gi = go;
                    }
                }
            }
            LayerSpec::MaxPool { .. } => {
                for s in 0..batch {
                    for o in 0..out_n {
                        let src = pool_idx[s * out_n + o] as usize;
                        gin[s * in_n + src] += grad_out[s * out_n + o];
                    }
                }
            }
        }
        gin
    }

    /// Linear part of the layer evaluated at the recorded activation pattern:
    /// weights without bias, relu masks and pool routing frozen from the forward pass.
    pub(crate) fn tangent(&self, input: &[T], pool_idx: &[u32], z: &[T], batch: usize) -> Vec<T> {
        match self.spec {
            LayerSpec::Conv2d { .. } | LayerSpec::Dense { .. } => {
                let mut unused = Vec::new();
                self.forward(z, batch, false, &mut unused)
            }
            LayerSpec::Relu => z
                .iter()
                .zip(input)
                .map(|(&zz, &x)| if x > T::zero() { zz } else { T::zero() })
                .collect(),
            LayerSpec::MaxPool { .. } => {
                let in_n = numel(self.in_shape);
                let out_n = numel(self.out_shape);
                let mut out = vec![T::zero(); batch * out_n];
                for s in 0..batch {
                    for o in 0..out_n {
                        out[s * out_n + o] = z[s * in_n + pool_idx[s * out_n + o] as usize];
                    }
                }
                out
            }
        }
    }

    /// Accumulates `d⟨grad_out, layer(input)⟩ / d(weight, bias)` into the given buffers.
    pub(crate) fn accumulate_param_grads(
        &self,
        input: &[T],
        grad_out: &[T],
        batch: usize,
        dw: &mut [T],
        db: Option<&mut [T]>,
    ) {
        let in_n = numel(self.in_shape);
        let out_n = numel(self.out_shape);
        match self.spec {
            LayerSpec::Conv2d { .. } => {
                let g = self.conv_geometry();
                let mut col = vec![T::zero(); g.col_rows() * g.positions()];
                for s in 0..batch {
                    im2col(&g, &input[s * in_n..(s + 1) * in_n], &mut col);
                    gemm(
                        T::one(),
                        MatRef::row_major(&grad_out[s * out_n..(s + 1) * out_n], g.out_c, g.positions()),
                        MatRef::row_major(&col, g.col_rows(), g.positions()).t(),
                        T::one(),
                        dw,
                    );
                }
                if let Some(db) = db {
                    for s in 0..batch {
                        let go = &grad_out[s * out_n..(s + 1) * out_n];
                        for (c, plane) in go.chunks(g.positions()).enumerate() {
                            db[c] += plane.iter().copied().sum::<T>();
                        }
                    }
                }
            }
            LayerSpec::Dense { out_features } => {
                gemm(
                    T::one(),
                    MatRef::row_major(grad_out, batch, out_features).t(),
                    MatRef::row_major(input, batch, in_n),
                    T::one(),
                    dw,
                );
                if let Some(db) = db {
                    for row in grad_out.chunks(out_features) {
                        db.iter_mut().zip(row).for_each(|(d, &g)| *d += g);
                    }
                }
            }
            LayerSpec::Relu | LayerSpec::MaxPool { .. } => {}
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    in_c: usize,
    in_h: usize,
    in_w: usize,
    out_c: usize,
    out_h: usize,
    out_w: usize,
    k: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn col_rows(&self) -> usize {
        self.in_c * self.k * self.k
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], col: &mut [T]) {
    let p = g.positions();
    for c in 0..g.in_c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.in_h as isize {
                        line.iter_mut().for_each(|v| *v = T::zero());
                        continue;
                    }
                    let base = c * g.in_h * g.in_w + iy as usize * g.in_w;
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.in_w as isize {
                            T::zero()
                        } else {
                            x[base + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, col: &[T], x: &mut [T]) {
    let p = g.positions();
    for c in 0..g.in_c {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * p..(row + 1) * p];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let base = c * g.in_h * g.in_w + iy as usize * g.in_w;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.in_w as isize {
                            x[base + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

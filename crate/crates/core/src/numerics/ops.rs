//! Differentiable primitives over [`Tensor`].
//!
//! Every operation has a plain forward, an explicit `*_backward` used by the
//! training loop, and a `*_with_grad` wrapper returning a [`GradPair`].

use crate::error::{Result, StaError};
use crate::numerics::Tensor;

type Backward = Box<dyn Fn(&Tensor) -> Vec<Tensor> + Send + Sync>;

/// A forward value together with the closure mapping an upstream gradient
/// to one gradient per input.
pub struct GradPair {
    pub value: Tensor,
    backward: Backward,
}

impl GradPair {
    pub fn new(value: Tensor, backward: Backward) -> Self {
        Self { value, backward }
    }

    pub fn backward(&self, upstream: &Tensor) -> Vec<Tensor> {
        assert_eq!(upstream.shape(), self.value.shape(), "upstream gradient shape");
        (self.backward)(upstream)
    }
}

/// Static geometry of a convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_h: usize,
    pub in_w: usize,
    pub in_c: usize,
    pub k: usize,
    pub out_c: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    fn checked(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Self> {
        if input.rank() != 3 {
            return Err(StaError::dim("conv input rank", 3, input.rank()));
        }
        if kernel.rank() != 4 {
            return Err(StaError::dim("conv kernel rank", 4, kernel.rank()));
        }
        if stride == 0 {
            return Err(StaError::arg("conv stride must be >= 1"));
        }
        let (in_h, in_w, in_c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
        let k = kernel.shape()[0];
        let out_c = kernel.shape()[3];
        kernel.expect_shape("conv kernel", &[k, k, in_c, out_c])?;
        bias.expect_shape("conv bias", &[out_c])?;
        let geom = Self {
            in_h,
            in_w,
            in_c,
            k,
            out_c,
            stride,
            pad,
        };
        geom.out_extent(in_h, "conv height")?;
        geom.out_extent(in_w, "conv width")?;
        Ok(geom)
    }

    fn out_extent(&self, len: usize, axis: &str) -> Result<usize> {
        let padded = len + 2 * self.pad;
        if padded < self.k {
            return Err(StaError::dim(axis, self.k, padded));
        }
        if !(padded - self.k).is_multiple_of(self.stride) {
            return Err(StaError::config(format!(
                "{axis}: ({len} + 2*{} - {}) is not a multiple of stride {}",
                self.pad, self.k, self.stride
            )));
        }
        Ok((padded - self.k) / self.stride + 1)
    }

    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.k) / self.stride + 1
    }

    /// Input coordinate hit by output `o` and kernel tap `t`, if inside the image.
    #[inline]
    fn src(&self, o: usize, t: usize, len: usize) -> Option<usize> {
        let p = (o * self.stride + t) as isize - self.pad as isize;
        (p >= 0 && (p as usize) < len).then_some(p as usize)
    }
}

/// 2-D cross-correlation on an `H×W×C_in` map with a `k×k×C_in×C_out` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    let g = ConvGeometry::checked(input, kernel, bias, stride, pad)?;
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; oh * ow * g.out_c];
    let x = input.data();
    let w = kernel.data();
    for y in 0..oh {
        for xo in 0..ow {
            let o = &mut out[(y * ow + xo) * g.out_c..][..g.out_c];
            o.copy_from_slice(bias.data());
            for ky in 0..g.k {
                let Some(iy) = g.src(y, ky, g.in_h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.src(xo, kx, g.in_w) else { continue };
                    let xi = &x[(iy * g.in_w + ix) * g.in_c..][..g.in_c];
                    let wk = &w[(ky * g.k + kx) * g.in_c * g.out_c..][..g.in_c * g.out_c];
                    for (ci, &xv) in xi.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let row = &wk[ci * g.out_c..][..g.out_c];
                        for (ov, &wv) in o.iter_mut().zip(row) {
                            *ov += xv * wv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, g.out_c], out)
}

/// Gradients of [`conv2d`] with respect to input, kernel and bias.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    pad: usize,
    grad_out: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let out_c = kernel.shape().get(3).copied().unwrap_or(0);
    let g = ConvGeometry::checked(input, kernel, &Tensor::zeros(&[out_c.max(1)]), stride, pad)?;
    let (oh, ow) = (g.out_h(), g.out_w());
    grad_out.expect_shape("conv upstream gradient", &[oh, ow, g.out_c])?;
    let x = input.data();
    let w = kernel.data();
    let go = grad_out.data();
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.out_c];
    for y in 0..oh {
        for xo in 0..ow {
            let gy = &go[(y * ow + xo) * g.out_c..][..g.out_c];
            for (b, &v) in db.iter_mut().zip(gy) {
                *b += v;
            }
            for ky in 0..g.k {
                let Some(iy) = g.src(y, ky, g.in_h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.src(xo, kx, g.in_w) else { continue };
                    let base_x = (iy * g.in_w + ix) * g.in_c;
                    let base_w = (ky * g.k + kx) * g.in_c * g.out_c;
                    for ci in 0..g.in_c {
                        let row = base_w + ci * g.out_c;
                        let wr = &w[row..row + g.out_c];
                        let mut acc = 0.0;
                        for (&wv, &gv) in wr.iter().zip(gy) {
                            acc += wv * gv;
                        }
                        dx[base_x + ci] += acc;
                        let xv = x[base_x + ci];
                        if xv != 0.0 {
                            for (d, &gv) in dw[row..row + g.out_c].iter_mut().zip(gy) {
                                *d += xv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    Ok((
        Tensor::new(input.shape().to_vec(), dx)?,
        Tensor::new(kernel.shape().to_vec(), dw)?,
        Tensor::new(vec![g.out_c], db)?,
    ))
}

pub fn conv2d_with_grad(input: &Tensor, kernel: &Tensor, bias: &Tensor, stride: usize, pad: usize) -> Result<GradPair> {
    let value = conv2d(input, kernel, bias, stride, pad)?;
    let (x, w) = (input.clone(), kernel.clone());
    Ok(GradPair::new(
        value,
        Box::new(move |up| {
            let (dx, dw, db) = conv2d_backward(&x, &w, stride, pad, up).expect("shapes validated in forward");
            vec![dx, dw, db]
        }),
    ))
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| v.max(0.0))
}

/// Passes `upstream` where the forward input was strictly positive.
pub fn relu_backward(input: &Tensor, upstream: &Tensor) -> Tensor {
    let mut g = upstream.clone();
    for (gv, &xv) in g.data_mut().iter_mut().zip(input.data()) {
        if xv <= 0.0 {
            *gv = 0.0;
        }
    }
    g
}

pub fn relu_with_grad(x: &Tensor) -> GradPair {
    let input = x.clone();
    GradPair::new(relu(x), Box::new(move |up| vec![relu_backward(&input, up)]))
}

/// Mean over the two spatial axes of an `H×W×C` map.
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 {
        return Err(StaError::dim("pool input rank", 3, x.rank()));
    }
    let c = x.shape()[2];
    let cells = x.shape()[0] * x.shape()[1];
    let mut out = vec![0.0; c];
    for cell in x.data().chunks_exact(c) {
        for (o, &v) in out.iter_mut().zip(cell) {
            *o += v;
        }
    }
    let inv = 1.0 / cells as f64;
    out.iter_mut().for_each(|v| *v *= inv);
    Ok(Tensor::from_vec(out))
}

pub fn global_avg_pool_backward(input_shape: &[usize], upstream: &Tensor) -> Tensor {
    let (h, w, c) = (input_shape[0], input_shape[1], input_shape[2]);
    assert_eq!(upstream.shape(), &[c]);
    let inv = 1.0 / (h * w) as f64;
    let mut g = Tensor::zeros(input_shape);
    for cell in g.data_mut().chunks_exact_mut(c) {
        for (o, &u) in cell.iter_mut().zip(upstream.data()) {
            *o = u * inv;
        }
    }
    g
}

pub fn global_avg_pool_with_grad(x: &Tensor) -> Result<GradPair> {
    let value = global_avg_pool(x)?;
    let shape = x.shape().to_vec();
    Ok(GradPair::new(
        value,
        Box::new(move |up| vec![global_avg_pool_backward(&shape, up)]),
    ))
}

/// `xᵀW + b` for a vector `x` of length `C_in` and `W` of shape `C_in×C_out`.
pub fn fully_connected(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    if x.rank() != 1 {
        return Err(StaError::dim("fc input rank", 1, x.rank()));
    }
    let c_in = x.len();
    let c_out = bias.len();
    weight.expect_shape("fc weight", &[c_in, c_out])?;
    bias.expect_shape("fc bias", &[c_out])?;
    let mut out = bias.data().to_vec();
    for (&xv, row) in x.data().iter().zip(weight.data().chunks_exact(c_out)) {
        for (o, &wv) in out.iter_mut().zip(row) {
            *o += xv * wv;
        }
    }
    Ok(Tensor::from_vec(out))
}

/// Gradients of [`fully_connected`] with respect to input, weight and bias.
pub fn fully_connected_backward(x: &Tensor, weight: &Tensor, upstream: &Tensor) -> (Tensor, Tensor, Tensor) {
    let c_out = upstream.len();
    let dx: Vec<f64> = weight
        .data()
        .chunks_exact(c_out)
        .map(|row| row.iter().zip(upstream.data()).map(|(w, u)| w * u).sum())
        .collect();
    let mut dw = Tensor::zeros(weight.shape());
    for (&xv, row) in x.data().iter().zip(dw.data_mut().chunks_exact_mut(c_out)) {
        for (d, &u) in row.iter_mut().zip(upstream.data()) {
            *d = xv * u;
        }
    }
    (Tensor::from_vec(dx), dw, upstream.clone())
}

pub fn fully_connected_with_grad(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<GradPair> {
    let value = fully_connected(x, weight, bias)?;
    let (xc, wc) = (x.clone(), weight.clone());
    Ok(GradPair::new(
        value,
        Box::new(move |up| {
            let (dx, dw, db) = fully_connected_backward(&xc, &wc, up);
            vec![dx, dw, db]
        }),
    ))
}

use rand::{Rng, RngCore};

use super::{gemm, join, Module, Param, ParamRole, SlotMut, SlotRef};
use crate::tensor::Tensor;

/// 2-d convolution, either dense (`groups == 1`) or depthwise
/// (`groups == in_channels == out_channels`). Padding is `(kernel - 1) / 2`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub weight: Param,
    pub bias: Option<Param>,
    cache: Option<Tensor>,
}

impl Conv2d {
    pub fn new(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        groups: usize,
        bias: bool,
    ) -> Self {
        assert!(
            groups == 1 || (groups == in_channels && groups == out_channels),
            "only dense or depthwise convolutions are supported"
        );
        let shape = [out_channels, in_channels / groups, kernel, kernel];
        Conv2d {
            in_channels,
            out_channels,
            kernel,
            stride,
            padding: (kernel - 1) / 2,
            groups,
            weight: Param::new(Tensor::zeros(&shape), ParamRole::Weight),
            bias: bias.then(|| Param::new(Tensor::zeros(&[out_channels]), ParamRole::Bias)),
            cache: None,
        }
    }

    pub fn is_depthwise(&self) -> bool {
        self.groups > 1
    }

    pub fn output_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let out = |x: usize| (x + 2 * self.padding - self.kernel) / self.stride + 1;
        (out(h), out(w))
    }

    /// Multiply-accumulates for one image of spatial size `h × w`.
    pub fn mult_adds(&self, h: usize, w: usize) -> u64 {
        let (ho, wo) = self.output_hw(h, w);
        let per_out = (self.in_channels / self.groups) * self.kernel * self.kernel;
        (ho * wo * self.out_channels * per_out) as u64
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn forward(&mut self, x: &Tensor, keep: bool) -> Tensor {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.in_channels, "conv input channels");
        let (ho, wo) = self.output_hw(h, w);
        let mut out = Tensor::zeros(&[n, self.out_channels, ho, wo]);
        if self.is_depthwise() {
            self.depthwise_forward(x, &mut out);
        } else {
            self.dense_forward(x, &mut out);
        }
        if let Some(b) = &self.bias {
            let plane = ho * wo;
            for (i, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
                let bv = b.value.data()[i % self.out_channels];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
        }
        if keep {
            self.cache = Some(x.clone());
        }
        out
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.padding == 0
    }

    fn dense_forward(&self, x: &Tensor, out: &mut Tensor) {
        let (n, c, h, w) = x.dims4();
        let (_, oc, ho, wo) = out.dims4();
        let kk = c * self.kernel * self.kernel;
        let plane_out = ho * wo;
        let mut cols = if self.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; kk * plane_out]
        };
        for i in 0..n {
            let xi = &x.data()[i * c * h * w..(i + 1) * c * h * w];
            if !self.is_pointwise() {
                im2col(xi, c, h, w, self.kernel, self.stride, self.padding, ho, wo, &mut cols);
            }
            let src: &[f32] = if self.is_pointwise() { xi } else { &cols };
            let oi = &mut out.data_mut()[i * oc * plane_out..(i + 1) * oc * plane_out];
            gemm(
                oc,
                kk,
                plane_out,
                self.weight.value.data(),
                kk,
                1,
                src,
                plane_out,
                1,
                0.0,
                oi,
                plane_out,
                1,
            );
        }
    }

    fn depthwise_forward(&self, x: &Tensor, out: &mut Tensor) {
        let (n, c, h, w) = x.dims4();
        let (_, _, ho, wo) = out.dims4();
        let k = self.kernel;
        let wdata = self.weight.value.data();
        let odata = out.data_mut();
        for i in 0..n {
            for ch in 0..c {
                let xin = &x.data()[(i * c + ch) * h * w..(i * c + ch + 1) * h * w];
                let o = &mut odata[(i * c + ch) * ho * wo..(i * c + ch + 1) * ho * wo];
                let wk = &wdata[ch * k * k..(ch + 1) * k * k];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wk[ky * k + kx];
                        let (ox0, ox1) = valid_range(kx, self.stride, self.padding, w, wo);
                        for oy in 0..ho {
                            let Some(iy) = shifted(oy * self.stride + ky, self.padding, h) else {
                                continue;
                            };
                            let orow = &mut o[oy * wo..(oy + 1) * wo];
                            let irow = &xin[iy * w..(iy + 1) * w];
                            for ox in ox0..ox1 {
                                orow[ox] += wv * irow[ox * self.stride + kx - self.padding];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Accumulates weight (and bias) gradients; returns the input gradient when
    /// `need_dx` is set.
    pub fn backward(&mut self, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let x = self.cache.take().expect("conv backward without cached forward");
        let (_, oc, ho, wo) = dy.dims4();
        if let Some(b) = &mut self.bias {
            for (i, chunk) in dy.data().chunks(ho * wo).enumerate() {
                b.grad[i % oc] += chunk.iter().sum::<f32>();
            }
        }
        if self.is_depthwise() {
            self.depthwise_backward(&x, dy, need_dx)
        } else {
            self.dense_backward(&x, dy, need_dx)
        }
    }

    fn dense_backward(&mut self, x: &Tensor, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let (n, c, h, w) = x.dims4();
        let (_, oc, ho, wo) = dy.dims4();
        let kk = c * self.kernel * self.kernel;
        let plane_out = ho * wo;
        let pointwise = self.is_pointwise();
        let mut cols = if pointwise { Vec::new() } else { vec![0.0; kk * plane_out] };
        let mut dcols = if pointwise || !need_dx {
            Vec::new()
        } else {
            vec![0.0; kk * plane_out]
        };
        let mut dx = need_dx.then(|| Tensor::zeros(&[n, c, h, w]));
        for i in 0..n {
            let xi = &x.data()[i * c * h * w..(i + 1) * c * h * w];
            let dyi = &dy.data()[i * oc * plane_out..(i + 1) * oc * plane_out];
            if !pointwise {
                im2col(xi, c, h, w, self.kernel, self.stride, self.padding, ho, wo, &mut cols);
            }
            let src: &[f32] = if pointwise { xi } else { &cols };
            // dW[oc, kk] += dY[oc, hw] · cols[kk, hw]^T
            gemm(
                oc,
                plane_out,
                kk,
                dyi,
                plane_out,
                1,
                src,
                1,
                plane_out,
                1.0,
                &mut self.weight.grad,
                kk,
                1,
            );
            if let Some(dx) = dx.as_mut() {
                let dxi = &mut dx.data_mut()[i * c * h * w..(i + 1) * c * h * w];
                let target: &mut [f32] = if pointwise { dxi } else { &mut dcols };
                // dcols[kk, hw] = W[oc, kk]^T · dY[oc, hw]
                gemm(
                    kk,
                    oc,
                    plane_out,
                    self.weight.value.data(),
                    1,
                    kk,
                    dyi,
                    plane_out,
                    1,
                    0.0,
                    target,
                    plane_out,
                    1,
                );
                if !pointwise {
                    let dxi = &mut dx.data_mut()[i * c * h * w..(i + 1) * c * h * w];
                    col2im(&dcols, c, h, w, self.kernel, self.stride, self.padding, ho, wo, dxi);
                }
            }
        }
        dx
    }

    fn depthwise_backward(&mut self, x: &Tensor, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let (n, c, h, w) = x.dims4();
        let (_, _, ho, wo) = dy.dims4();
        let k = self.kernel;
        let (s, p) = (self.stride, self.padding);
        let mut dx = need_dx.then(|| Tensor::zeros(&[n, c, h, w]));
        let wdata = self.weight.value.data();
        for i in 0..n {
            for ch in 0..c {
                let base_in = (i * c + ch) * h * w;
                let xin = &x.data()[base_in..base_in + h * w];
                let g = &dy.data()[(i * c + ch) * ho * wo..(i * c + ch + 1) * ho * wo];
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = wdata[ch * k * k + ky * k + kx];
                        let (ox0, ox1) = valid_range(kx, s, p, w, wo);
                        let mut acc = 0.0f32;
                        for oy in 0..ho {
                            let Some(iy) = shifted(oy * s + ky, p, h) else {
                                continue;
                            };
                            let grow = &g[oy * wo..(oy + 1) * wo];
                            let irow = &xin[iy * w..(iy + 1) * w];
                            for ox in ox0..ox1 {
                                acc += grow[ox] * irow[ox * s + kx - p];
                            }
                            if let Some(dx) = dx.as_mut() {
                                let drow = &mut dx.data_mut()[base_in + iy * w..base_in + (iy + 1) * w];
                                for ox in ox0..ox1 {
                                    drow[ox * s + kx - p] += wv * grow[ox];
                                }
                            }
                        }
                        self.weight.grad[ch * k * k + ky * k + kx] += acc;
                    }
                }
            }
        }
        dx
    }
}

impl Module for Conv2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        f(&join(prefix, "weight"), SlotRef::Param(&self.weight));
        if let Some(b) = &self.bias {
            f(&join(prefix, "bias"), SlotRef::Param(b));
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        f(&join(prefix, "weight"), SlotMut::Param(&mut self.weight));
        if let Some(b) = &mut self.bias {
            f(&join(prefix, "bias"), SlotMut::Param(b));
        }
    }
}

/// Maps a padded coordinate back into `[0, len)`.
#[inline]
fn shifted(padded: usize, pad: usize, len: usize) -> Option<usize> {
    if padded < pad || padded - pad >= len {
        None
    } else {
        Some(padded - pad)
    }
}

/// Output columns `[ox0, ox1)` whose input column `ox * stride + kx - pad`
/// lies inside `[0, w)`.
#[inline]
fn valid_range(kx: usize, stride: usize, pad: usize, w: usize, wo: usize) -> (usize, usize) {
    let ox0 = if pad > kx { (pad - kx).div_ceil(stride) } else { 0 };
    let ox1 = if w + pad > kx {
        ((w + pad - kx - 1) / stride + 1).min(wo)
    } else {
        0
    };
    (ox0.min(ox1), ox1)
}

#[allow(clippy::too_many_arguments)]
fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
    cols: &mut [f32],
) {
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * ho * wo..(row + 1) * ho * wo];
                let (ox0, ox1) = valid_range(kx, s, p, w, wo);
                for oy in 0..ho {
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    match shifted(oy * s + ky, p, h) {
                        None => drow.iter_mut().for_each(|v| *v = 0.0),
                        Some(iy) => {
                            let srow = &x[(ch * h + iy) * w..(ch * h + iy + 1) * w];
                            drow[..ox0].iter_mut().for_each(|v| *v = 0.0);
                            for ox in ox0..ox1 {
                                drow[ox] = srow[ox * s + kx - p];
                            }
                            drow[ox1..].iter_mut().for_each(|v| *v = 0.0);
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    s: usize,
    p: usize,
    ho: usize,
    wo: usize,
    dx: &mut [f32],
) {
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * ho * wo..(row + 1) * ho * wo];
                let (ox0, ox1) = valid_range(kx, s, p, w, wo);
                for oy in 0..ho {
                    if let Some(iy) = shifted(oy * s + ky, p, h) {
                        let drow = &mut dx[(ch * h + iy) * w..(ch * h + iy + 1) * w];
                        for ox in ox0..ox1 {
                            drow[ox * s + kx - p] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

struct BnCache {
    xhat: Vec<f32>,
    inv_std: Vec<f32>,
    batch_stats: bool,
    shape: Vec<usize>,
}

/// Batch normalization over NCHW channels with running statistics.
pub struct BatchNorm2d {
    pub channels: usize,
    pub eps: f32,
    pub momentum: f32,
    pub weight: Param,
    pub bias: Param,
    pub running_mean: Tensor,
    pub running_var: Tensor,
    cache: Option<BnCache>,
}

impl Clone for BatchNorm2d {
    fn clone(&self) -> Self {
        BatchNorm2d {
            channels: self.channels,
            eps: self.eps,
            momentum: self.momentum,
            weight: self.weight.clone(),
            bias: self.bias.clone(),
            running_mean: self.running_mean.clone(),
            running_var: self.running_var.clone(),
            cache: None,
        }
    }
}

impl std::fmt::Debug for BatchNorm2d {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BatchNorm2d")
            .field("channels", &self.channels)
            .field("eps", &self.eps)
            .field("momentum", &self.momentum)
            .finish()
    }
}

impl BatchNorm2d {
    pub fn new(channels: usize, eps: f32, momentum: f32) -> Self {
        BatchNorm2d {
            channels,
            eps,
            momentum,
            weight: Param::new(Tensor::full(&[channels], 1.0), ParamRole::NormWeight),
            bias: Param::new(Tensor::zeros(&[channels]), ParamRole::NormBias),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::full(&[channels], 1.0),
            cache: None,
        }
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    /// With `batch_stats` the layer normalizes by the batch moments and
    /// updates its running statistics; otherwise it uses the stored ones.
    pub fn forward(&mut self, x: &Tensor, batch_stats: bool, keep: bool) -> Tensor {
        let (n, c, h, w) = x.dims4();
        assert_eq!(c, self.channels, "batch norm channels");
        let plane = h * w;
        let count = n * plane;
        let mut inv_std = vec![0.0f32; c];
        let mut mean = vec![0.0f32; c];
        if batch_stats {
            for ch in 0..c {
                let mut sum = 0.0f64;
                for i in 0..n {
                    let off = (i * c + ch) * plane;
                    sum += x.data()[off..off + plane].iter().map(|&v| v as f64).sum::<f64>();
                }
                let m = sum / count as f64;
                let mut sq = 0.0f64;
                for i in 0..n {
                    let off = (i * c + ch) * plane;
                    sq += x.data()[off..off + plane]
                        .iter()
                        .map(|&v| (v as f64 - m).powi(2))
                        .sum::<f64>();
                }
                let var = sq / count as f64;
                mean[ch] = m as f32;
                inv_std[ch] = (1.0 / (var + self.eps as f64).sqrt()) as f32;
                let unbiased = if count > 1 {
                    var * count as f64 / (count - 1) as f64
                } else {
                    var
                };
                let mom = self.momentum;
                let rm = &mut self.running_mean.data_mut()[ch];
                *rm = (1.0 - mom) * *rm + mom * m as f32;
                let rv = &mut self.running_var.data_mut()[ch];
                *rv = (1.0 - mom) * *rv + mom * unbiased as f32;
            }
        } else {
            for ch in 0..c {
                mean[ch] = self.running_mean.data()[ch];
                inv_std[ch] = 1.0 / (self.running_var.data()[ch] + self.eps).sqrt();
            }
        }
        let mut out = Tensor::zeros(x.shape());
        let mut xhat = if keep { vec![0.0f32; x.len()] } else { Vec::new() };
        for i in 0..n {
            for ch in 0..c {
                let off = (i * c + ch) * plane;
                let (m, s) = (mean[ch], inv_std[ch]);
                let (g, b) = (self.weight.value.data()[ch], self.bias.value.data()[ch]);
                let src = &x.data()[off..off + plane];
                let dst = &mut out.data_mut()[off..off + plane];
                if keep {
                    let xh = &mut xhat[off..off + plane];
                    for j in 0..plane {
                        let v = (src[j] - m) * s;
                        xh[j] = v;
                        dst[j] = v * g + b;
                    }
                } else {
                    for j in 0..plane {
                        dst[j] = (src[j] - m) * s * g + b;
                    }
                }
            }
        }
        if keep {
            self.cache = Some(BnCache {
                xhat,
                inv_std,
                batch_stats,
                shape: x.shape().to_vec(),
            });
        }
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("batch norm backward without cache");
        assert_eq!(dy.shape(), cache.shape.as_slice());
        let (n, c, h, w) = dy.dims4();
        let plane = h * w;
        let count = (n * plane) as f32;
        let mut dx = Tensor::zeros(dy.shape());
        for ch in 0..c {
            let mut sum_dy = 0.0f64;
            let mut sum_dy_xhat = 0.0f64;
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for j in off..off + plane {
                    let g = dy.data()[j] as f64;
                    sum_dy += g;
                    sum_dy_xhat += g * cache.xhat[j] as f64;
                }
            }
            self.weight.grad[ch] += sum_dy_xhat as f32;
            self.bias.grad[ch] += sum_dy as f32;
            let gamma = self.weight.value.data()[ch];
            let s = cache.inv_std[ch];
            for i in 0..n {
                let off = (i * c + ch) * plane;
                for j in off..off + plane {
                    dx.data_mut()[j] = if cache.batch_stats {
                        gamma * s / count
                            * (count * dy.data()[j]
                                - sum_dy as f32
                                - cache.xhat[j] * sum_dy_xhat as f32)
                    } else {
                        gamma * s * dy.data()[j]
                    };
                }
            }
        }
        dx
    }
}

impl Module for BatchNorm2d {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        f(&join(prefix, "weight"), SlotRef::Param(&self.weight));
        f(&join(prefix, "bias"), SlotRef::Param(&self.bias));
        f(&join(prefix, "running_mean"), SlotRef::Buffer(&self.running_mean));
        f(&join(prefix, "running_var"), SlotRef::Buffer(&self.running_var));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        f(&join(prefix, "weight"), SlotMut::Param(&mut self.weight));
        f(&join(prefix, "bias"), SlotMut::Param(&mut self.bias));
        f(&join(prefix, "running_mean"), SlotMut::Buffer(&mut self.running_mean));
        f(&join(prefix, "running_var"), SlotMut::Buffer(&mut self.running_var));
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ActivationKind {
    Relu,
    Hardswish,
    Hardsigmoid,
}

impl ActivationKind {
    #[inline]
    pub fn apply(self, x: f32) -> f32 {
        match self {
            ActivationKind::Relu => x.max(0.0),
            ActivationKind::Hardswish => x * (x + 3.0).clamp(0.0, 6.0) / 6.0,
            ActivationKind::Hardsigmoid => (x + 3.0).clamp(0.0, 6.0) / 6.0,
        }
    }

    #[inline]
    pub fn derivative(self, x: f32) -> f32 {
        match self {
            ActivationKind::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            ActivationKind::Hardswish => {
                if x < -3.0 {
                    0.0
                } else if x <= 3.0 {
                    x / 3.0 + 0.5
                } else {
                    1.0
                }
            }
            ActivationKind::Hardsigmoid => {
                if x > -3.0 && x < 3.0 {
                    1.0 / 6.0
                } else {
                    0.0
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct Activation {
    pub kind: ActivationKind,
    cache: Option<Tensor>,
}

impl Activation {
    pub fn new(kind: ActivationKind) -> Self {
        Activation { kind, cache: None }
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn forward(&mut self, x: &Tensor, keep: bool) -> Tensor {
        let mut out = x.clone();
        out.data_mut().iter_mut().for_each(|v| *v = self.kind.apply(*v));
        if keep {
            self.cache = Some(x.clone());
        }
        out
    }

    /// Consumes `x` so no extra copy is made when the caller owns it.
    pub fn forward_owned(&mut self, x: Tensor, keep: bool) -> Tensor {
        if keep {
            return self.forward(&x, true);
        }
        let mut out = x;
        out.data_mut().iter_mut().for_each(|v| *v = self.kind.apply(*v));
        out
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let x = self.cache.take().expect("activation backward without cache");
        let mut dx = dy.clone();
        for (d, &xv) in dx.data_mut().iter_mut().zip(x.data()) {
            *d *= self.kind.derivative(xv);
        }
        dx
    }
}

/// Fully connected layer over `[n, in]` rows. The weight may carry trailing
/// unit dimensions (`[out, in, 1, 1]`) when it stands in for a 1×1 conv.
#[derive(Debug, Clone)]
pub struct Linear {
    pub in_features: usize,
    pub out_features: usize,
    pub weight: Param,
    pub bias: Param,
    cache: Option<Tensor>,
}

impl Linear {
    pub fn new(in_features: usize, out_features: usize) -> Self {
        Self::with_weight_shape(in_features, out_features, &[out_features, in_features])
    }

    pub fn conv1x1(in_features: usize, out_features: usize) -> Self {
        Self::with_weight_shape(in_features, out_features, &[out_features, in_features, 1, 1])
    }

    fn with_weight_shape(in_features: usize, out_features: usize, shape: &[usize]) -> Self {
        Linear {
            in_features,
            out_features,
            weight: Param::new(Tensor::zeros(shape), ParamRole::Weight),
            bias: Param::new(Tensor::zeros(&[out_features]), ParamRole::Bias),
            cache: None,
        }
    }

    pub fn mult_adds(&self) -> u64 {
        (self.in_features * self.out_features) as u64
    }

    pub fn clear_cache(&mut self) {
        self.cache = None;
    }

    pub fn forward(&mut self, x: &Tensor, keep: bool) -> Tensor {
        let (n, inf) = x.dims2();
        assert_eq!(inf, self.in_features, "linear input features");
        let of = self.out_features;
        let mut out = Tensor::zeros(&[n, of]);
        for row in out.data_mut().chunks_mut(of) {
            row.copy_from_slice(self.bias.value.data());
        }
        gemm(
            n,
            inf,
            of,
            x.data(),
            inf,
            1,
            self.weight.value.data(),
            1,
            inf,
            1.0,
            out.data_mut(),
            of,
            1,
        );
        if keep {
            self.cache = Some(x.clone());
        }
        out
    }

    pub fn backward(&mut self, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let x = self.cache.take().expect("linear backward without cache");
        let (n, of) = dy.dims2();
        let inf = self.in_features;
        for row in dy.data().chunks(of) {
            for (g, &d) in self.bias.grad.iter_mut().zip(row) {
                *g += d;
            }
        }
        // dW[of, in] += dY^T[of, n] · X[n, in]
        gemm(
            of,
            n,
            inf,
            dy.data(),
            1,
            of,
            x.data(),
            inf,
            1,
            1.0,
            &mut self.weight.grad,
            inf,
            1,
        );
        need_dx.then(|| {
            let mut dx = Tensor::zeros(&[n, inf]);
            gemm(
                n,
                of,
                inf,
                dy.data(),
                of,
                1,
                self.weight.value.data(),
                inf,
                1,
                0.0,
                dx.data_mut(),
                inf,
                1,
            );
            dx
        })
    }
}

impl Module for Linear {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, SlotRef<'_>)) {
        f(&join(prefix, "weight"), SlotRef::Param(&self.weight));
        f(&join(prefix, "bias"), SlotRef::Param(&self.bias));
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, SlotMut<'_>)) {
        f(&join(prefix, "weight"), SlotMut::Param(&mut self.weight));
        f(&join(prefix, "bias"), SlotMut::Param(&mut self.bias));
    }
}

/// Inverted dropout.
#[derive(Debug, Clone)]
pub struct Dropout {
    pub p: f64,
    mask: Option<Vec<f32>>,
}

impl Dropout {
    pub fn new(p: f64) -> Self {
        Dropout { p, mask: None }
    }

    /// Active only when an rng is supplied (training mode).
    pub fn forward<R: RngCore + ?Sized>(&mut self, x: Tensor, rng: Option<&mut R>) -> Tensor {
        let Some(rng) = rng.filter(|_| self.p > 0.0) else {
            self.mask = None;
            return x;
        };
        let scale = (1.0 / (1.0 - self.p)) as f32;
        let mask: Vec<f32> = (0..x.len())
            .map(|_| if rng.random::<f64>() < self.p { 0.0 } else { scale })
            .collect();
        let mut out = x;
        for (v, m) in out.data_mut().iter_mut().zip(&mask) {
            *v *= m;
        }
        self.mask = Some(mask);
        out
    }

    pub fn backward(&mut self, dy: Tensor) -> Tensor {
        match self.mask.take() {
            None => dy,
            Some(mask) => {
                let mut dx = dy;
                for (v, m) in dx.data_mut().iter_mut().zip(&mask) {
                    *v *= m;
                }
                dx
            }
        }
    }
}

/// Spatial mean: `[n, c, h, w] -> [n, c]`.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let (n, c, h, w) = x.dims4();
    let plane = h * w;
    let data = x
        .data()
        .chunks(plane)
        .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
        .collect();
    Tensor::from_vec(&[n, c], data).expect("pool shape")
}

pub fn global_avg_pool_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let (n, c) = dy.dims2();
    let plane = h * w;
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for (chunk, &g) in dx.data_mut().chunks_mut(plane).zip(dy.data()) {
        let v = g / plane as f32;
        chunk.iter_mut().for_each(|d| *d = v);
    }
    dx
}

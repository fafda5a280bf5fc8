//! Convolution, depthwise convolution, upsampling and activation kernels with
//! explicit backward passes. Single-sample, `f32`, channel-major.
//!
//! Convolutions use "same" zero padding: the output is `ceil(in / stride)`
//! and any odd padding goes to the bottom/right edge.

use crate::tensor::{Shape, Tensor};

/// Upper bound on the number of `f32` in one im2col buffer.
const COLS_BUDGET: usize = 1 << 22;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Relu,
    Relu6,
    Sigmoid,
    None,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Relu6 => "relu6",
            Activation::Sigmoid => "sigmoid",
            Activation::None => "none",
        }
    }

    pub fn apply(self, data: &mut [f32]) {
        match self {
            Activation::Relu => data.iter_mut().for_each(|v| *v = v.max(0.0)),
            Activation::Relu6 => data.iter_mut().for_each(|v| *v = v.clamp(0.0, 6.0)),
            Activation::Sigmoid => data.iter_mut().for_each(|v| *v = 1.0 / (1.0 + (-*v).exp())),
            Activation::None => {}
        }
    }

    /// Multiplies `grad` in place by the activation derivative, expressed via the output.
    pub fn backward(self, output: &[f32], grad: &mut [f32]) {
        match self {
            Activation::Relu => {
                for (g, &y) in grad.iter_mut().zip(output) {
                    if y <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            Activation::Relu6 => {
                for (g, &y) in grad.iter_mut().zip(output) {
                    if y <= 0.0 || y >= 6.0 {
                        *g = 0.0;
                    }
                }
            }
            Activation::Sigmoid => {
                for (g, &y) in grad.iter_mut().zip(output) {
                    *g *= y * (1.0 - y);
                }
            }
            Activation::None => {}
        }
    }
}

/// Geometry of a "same"-padded 2-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: (usize, usize),
    pub stride: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeometry {
    pub fn same(in_h: usize, in_w: usize, kernel: (usize, usize), stride: usize) -> Self {
        let out_h = in_h.div_ceil(stride);
        let out_w = in_w.div_ceil(stride);
        let pad_h = ((out_h - 1) * stride + kernel.0).saturating_sub(in_h);
        let pad_w = ((out_w - 1) * stride + kernel.1).saturating_sub(in_w);
        ConvGeometry {
            kernel,
            stride,
            in_h,
            in_w,
            out_h,
            out_w,
            pad_top: pad_h / 2,
            pad_left: pad_w / 2,
        }
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == 1
    }

    /// Source coordinate for output `o` and kernel tap `k` along one axis.
    #[inline]
    fn src(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
        let p = (o * stride + k).checked_sub(pad)?;
        (p < limit).then_some(p)
    }
}

#[inline]
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    beta: f32,
    c: &mut [f32],
    rsc: isize,
    csc: isize,
) {
    if m == 0 || n == 0 {
        return;
    }
    // Bounds: the callers derive every stride from slice dimensions checked below.
    debug_assert!(k == 0 || a.len() > (m - 1) * rsa as usize + (k - 1) * csa as usize);
    debug_assert!(k == 0 || b.len() > (k - 1) * rsb as usize + (n - 1) * csb as usize);
    debug_assert!(c.len() > (m - 1) * rsc as usize + (n - 1) * csc as usize);
    // SAFETY: the strides address only elements inside the three slices (asserted above).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            rsc,
            csc,
        );
    }
}

/// Fills `cols` (K × (p1 - p0)) with the receptive fields of output positions `p0..p1`.
fn im2col(input: &Tensor<f32>, g: &ConvGeometry, p0: usize, p1: usize, cols: &mut [f32]) {
    let n = p1 - p0;
    let (kh, kw) = g.kernel;
    for ci in 0..input.channels() {
        let plane = input.channel(ci);
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * n;
                let dst = &mut cols[row..row + n];
                for (j, p) in (p0..p1).enumerate() {
                    let (oy, ox) = (p / g.out_w, p % g.out_w);
                    dst[j] = match (
                        ConvGeometry::src(oy, ky, g.stride, g.pad_top, g.in_h),
                        ConvGeometry::src(ox, kx, g.stride, g.pad_left, g.in_w),
                    ) {
                        (Some(y), Some(x)) => plane[y * g.in_w + x],
                        _ => 0.0,
                    };
                }
            }
        }
    }
}

fn col2im(cols: &[f32], g: &ConvGeometry, p0: usize, p1: usize, grad_in: &mut Tensor<f32>) {
    let n = p1 - p0;
    let (kh, kw) = g.kernel;
    let plane = g.in_h * g.in_w;
    let channels = grad_in.channels();
    let data = grad_in.data_mut();
    for ci in 0..channels {
        let base = ci * plane;
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((ci * kh + ky) * kw + kx) * n;
                let src = &cols[row..row + n];
                for (j, p) in (p0..p1).enumerate() {
                    let (oy, ox) = (p / g.out_w, p % g.out_w);
                    if let (Some(y), Some(x)) = (
                        ConvGeometry::src(oy, ky, g.stride, g.pad_top, g.in_h),
                        ConvGeometry::src(ox, kx, g.stride, g.pad_left, g.in_w),
                    ) {
                        data[base + y * g.in_w + x] += src[j];
                    }
                }
            }
        }
    }
}

fn chunk_len(k: usize, positions: usize) -> usize {
    (COLS_BUDGET / k.max(1)).clamp(1, positions.max(1))
}

/// Standard convolution. `weight` is `[c_out, c_in, kh, kw]`, `bias` is `[c_out]`.
pub fn conv2d(
    input: &Tensor<f32>,
    weight: &[f32],
    bias: &[f32],
    c_out: usize,
    kernel: (usize, usize),
    stride: usize,
) -> Tensor<f32> {
    let c_in = input.channels();
    let g = ConvGeometry::same(input.height(), input.width(), kernel, stride);
    let k = c_in * kernel.0 * kernel.1;
    assert_eq!(weight.len(), c_out * k, "conv2d weight size");
    assert_eq!(bias.len(), c_out, "conv2d bias size");
    let positions = g.out_h * g.out_w;
    let mut out = Tensor::zeros(Shape::new(c_out, g.out_h, g.out_w));
    {
        let data = out.data_mut();
        for (co, chunk) in data.chunks_mut(positions).enumerate() {
            chunk.fill(bias[co]);
        }
    }
    if g.is_pointwise() {
        gemm(
            c_out,
            k,
            positions,
            weight,
            k as isize,
            1,
            input.data(),
            positions as isize,
            1,
            1.0,
            out.data_mut(),
            positions as isize,
            1,
        );
        return out;
    }
    let step = chunk_len(k, positions);
    let mut cols = vec![0.0f32; k * step];
    let mut p0 = 0;
    while p0 < positions {
        let p1 = (p0 + step).min(positions);
        let n = p1 - p0;
        im2col(input, &g, p0, p1, &mut cols[..k * n]);
        gemm(
            c_out,
            k,
            n,
            weight,
            k as isize,
            1,
            &cols[..k * n],
            n as isize,
            1,
            1.0,
            &mut out.data_mut()[p0..],
            positions as isize,
            1,
        );
        p0 = p1;
    }
    out
}

/// Accumulates parameter gradients into `grad_weight`/`grad_bias` and returns
/// the input gradient when `want_input` is set.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    input: &Tensor<f32>,
    weight: &[f32],
    grad_out: &Tensor<f32>,
    kernel: (usize, usize),
    stride: usize,
    grad_weight: Option<&mut [f32]>,
    grad_bias: Option<&mut [f32]>,
    want_input: bool,
) -> Option<Tensor<f32>> {
    let c_in = input.channels();
    let c_out = grad_out.channels();
    let g = ConvGeometry::same(input.height(), input.width(), kernel, stride);
    let k = c_in * kernel.0 * kernel.1;
    let positions = g.out_h * g.out_w;
    let go = grad_out.data();

    if let Some(gb) = grad_bias {
        for (co, chunk) in go.chunks(positions).enumerate() {
            gb[co] += chunk.iter().sum::<f32>();
        }
    }
    let mut grad_in = want_input.then(|| Tensor::zeros(input.shape()));

    if g.is_pointwise() {
        if let Some(gw) = grad_weight {
            // gw (c_out × k) += go (c_out × P) · inputᵀ (P × k)
            gemm(
                c_out,
                positions,
                k,
                go,
                positions as isize,
                1,
                input.data(),
                1,
                positions as isize,
                1.0,
                gw,
                k as isize,
                1,
            );
        }
        if let Some(gi) = grad_in.as_mut() {
            // gi (k × P) = weightᵀ (k × c_out) · go (c_out × P)
            gemm(
                k,
                c_out,
                positions,
                weight,
                1,
                k as isize,
                go,
                positions as isize,
                1,
                0.0,
                gi.data_mut(),
                positions as isize,
                1,
            );
        }
        return grad_in;
    }

    let step = chunk_len(k, positions);
    let mut cols = vec![0.0f32; k * step];
    let mut gw = grad_weight;
    let mut p0 = 0;
    while p0 < positions {
        let p1 = (p0 + step).min(positions);
        let n = p1 - p0;
        if let Some(gw) = gw.as_deref_mut() {
            im2col(input, &g, p0, p1, &mut cols[..k * n]);
            gemm(
                c_out,
                n,
                k,
                &go[p0..],
                positions as isize,
                1,
                &cols[..k * n],
                1,
                n as isize,
                1.0,
                gw,
                k as isize,
                1,
            );
        }
        if let Some(gi) = grad_in.as_mut() {
            gemm(
                k,
                c_out,
                n,
                weight,
                1,
                k as isize,
                &go[p0..],
                positions as isize,
                1,
                0.0,
                &mut cols[..k * n],
                n as isize,
                1,
            );
            col2im(&cols[..k * n], &g, p0, p1, gi);
        }
        p0 = p1;
    }
    grad_in
}

/// Per-channel convolution. `weight` is `[c, kh, kw]`, `bias` is `[c]`.
pub fn depthwise_conv2d(
    input: &Tensor<f32>,
    weight: &[f32],
    bias: &[f32],
    kernel: (usize, usize),
    stride: usize,
) -> Tensor<f32> {
    let c = input.channels();
    let g = ConvGeometry::same(input.height(), input.width(), kernel, stride);
    let (kh, kw) = kernel;
    assert_eq!(weight.len(), c * kh * kw, "depthwise weight size");
    let mut out = Tensor::zeros(Shape::new(c, g.out_h, g.out_w));
    let out_plane = g.out_h * g.out_w;
    let out_data = out.data_mut();
    for ch in 0..c {
        let src = input.channel(ch);
        let wk = &weight[ch * kh * kw..(ch + 1) * kh * kw];
        let dst = &mut out_data[ch * out_plane..(ch + 1) * out_plane];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = bias[ch];
                for ky in 0..kh {
                    let Some(y) = ConvGeometry::src(oy, ky, stride, g.pad_top, g.in_h) else {
                        continue;
                    };
                    for kx in 0..kw {
                        if let Some(x) = ConvGeometry::src(ox, kx, stride, g.pad_left, g.in_w) {
                            acc += wk[ky * kw + kx] * src[y * g.in_w + x];
                        }
                    }
                }
                dst[oy * g.out_w + ox] = acc;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn depthwise_conv2d_backward(
    input: &Tensor<f32>,
    weight: &[f32],
    grad_out: &Tensor<f32>,
    kernel: (usize, usize),
    stride: usize,
    mut grad_weight: Option<&mut [f32]>,
    mut grad_bias: Option<&mut [f32]>,
    want_input: bool,
) -> Option<Tensor<f32>> {
    let c = input.channels();
    let g = ConvGeometry::same(input.height(), input.width(), kernel, stride);
    let (kh, kw) = kernel;
    let out_plane = g.out_h * g.out_w;
    let in_plane = g.in_h * g.in_w;
    let mut grad_in = want_input.then(|| Tensor::zeros(input.shape()));
    for ch in 0..c {
        let src = input.channel(ch);
        let go = &grad_out.data()[ch * out_plane..(ch + 1) * out_plane];
        if let Some(gb) = grad_bias.as_deref_mut() {
            gb[ch] += go.iter().sum::<f32>();
        }
        let wk = &weight[ch * kh * kw..(ch + 1) * kh * kw];
        for ky in 0..kh {
            for kx in 0..kw {
                let mut gw_acc = 0.0f32;
                for oy in 0..g.out_h {
                    let Some(y) = ConvGeometry::src(oy, ky, stride, g.pad_top, g.in_h) else {
                        continue;
                    };
                    for ox in 0..g.out_w {
                        let Some(x) = ConvGeometry::src(ox, kx, stride, g.pad_left, g.in_w) else {
                            continue;
                        };
                        let gv = go[oy * g.out_w + ox];
                        gw_acc += gv * src[y * g.in_w + x];
                        if let Some(gi) = grad_in.as_mut() {
                            gi.data_mut()[ch * in_plane + y * g.in_w + x] += gv * wk[ky * kw + kx];
                        }
                    }
                }
                if let Some(gw) = grad_weight.as_deref_mut() {
                    gw[(ch * kh + ky) * kw + kx] += gw_acc;
                }
            }
        }
    }
    grad_in
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2x(input: &Tensor<f32>) -> Tensor<f32> {
    let (h, w) = (input.height(), input.width());
    Tensor::from_fn(Shape::new(input.channels(), 2 * h, 2 * w), |c, y, x| {
        input.get(c, y / 2, x / 2)
    })
}

pub fn upsample2x_backward(grad_out: &Tensor<f32>) -> Tensor<f32> {
    let (h, w) = (grad_out.height() / 2, grad_out.width() / 2);
    Tensor::from_fn(Shape::new(grad_out.channels(), h, w), |c, y, x| {
        grad_out.get(c, 2 * y, 2 * x)
            + grad_out.get(c, 2 * y, 2 * x + 1)
            + grad_out.get(c, 2 * y + 1, 2 * x)
            + grad_out.get(c, 2 * y + 1, 2 * x + 1)
    })
}

//! Forward and backward kernels for the layer primitives.
//!
//! Convolution is cross-correlation (no kernel flip). All image-like tensors
//! are `[N, C, H, W]` row-major.

use super::gemm::{gemm, MatRef};
use super::{LayerParams, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeometry {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 {
            return Err(Error::shape("conv2d", format!("input must be [N,C,H,W], got {input:?}")));
        }
        if input.contains(&0) {
            return Err(Error::EmptyExtent {
                op: "conv2d",
                shape: input.to_vec(),
            });
        }
        if weight.len() != 4 {
            return Err(Error::shape("conv2d", format!("weights must be rank 4, got {weight:?}")));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("conv2d: stride must be positive".into()));
        }
        let [n, c_in, h, w] = [input[0], input[1], input[2], input[3]];
        let [c_out, wc, kh, kw] = [weight[0], weight[1], weight[2], weight[3]];
        if wc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("input has {c_in} channels but weights {weight:?} expect {wc}"),
            ));
        }
        if kh == 0 || kw == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} does not fit padded input {h}x{w} (padding {padding})"),
            ));
        }
        Ok(ConvGeometry {
            n,
            c_in,
            h,
            w,
            c_out,
            kh,
            kw,
            stride,
            padding,
            h_out: (h + 2 * padding - kh) / stride + 1,
            w_out: (w + 2 * padding - kw) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c_in * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds one sample into `[C*kh*kw, H_out*W_out]`.
fn im2col(g: &ConvGeometry, sample: &[f64], cols: &mut [f64]) {
    let plane = g.out_plane();
    let (h, w) = (g.h as isize, g.w as isize);
    for c in 0..g.c_in {
        let src = &sample[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    let line = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if iy < 0 || iy >= h {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, v) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        *v = if ix < 0 || ix >= w { 0.0 } else { src_row[ix as usize] };
                    }
                }
            }
        }
    }
}

/// Folds column gradients back onto the input sample (accumulating).
fn col2im(g: &ConvGeometry, cols: &[f64], sample: &mut [f64]) {
    let plane = g.out_plane();
    let (h, w) = (g.h as isize, g.w as isize);
    for c in 0..g.c_in {
        let dst = &mut sample[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.h_out {
                    let iy = (oy * g.stride + ki) as isize - g.padding as isize;
                    if iy < 0 || iy >= h {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.w_out {
                        let ix = (ox * g.stride + kj) as isize - g.padding as isize;
                        if ix >= 0 && ix < w {
                            dst_row[ix as usize] += src[oy * g.w_out + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D cross-correlation of `[N,C,H,W]` with `(C_out, C, kh, kw)` weights.
pub fn conv2d(input: &Tensor, params: &LayerParams, stride: usize, padding: usize) -> Result<Tensor> {
    conv2d_raw(input, &params.weights, &params.bias, stride, padding)
}

pub fn conv2d_raw(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    if bias.shape() != [g.c_out] {
        return Err(Error::shape(
            "conv2d",
            format!("bias shape {:?} for {} output channels", bias.shape(), g.c_out),
        ));
    }
    let plane = g.out_plane();
    let mut out = vec![0.0; g.n * g.c_out * plane];
    let mut cols = vec![0.0; g.patch_len() * plane];
    let in_len = g.c_in * g.h * g.w;
    for n in 0..g.n {
        im2col(&g, &input.data()[n * in_len..(n + 1) * in_len], &mut cols);
        let dst = &mut out[n * g.c_out * plane..(n + 1) * g.c_out * plane];
        for (co, chunk) in dst.chunks_mut(plane).enumerate() {
            chunk.fill(bias.data()[co]);
        }
        gemm(
            MatRef::new(weight.data(), g.c_out, g.patch_len()),
            MatRef::new(&cols, g.patch_len(), plane),
            1.0,
            dst,
        );
    }
    Tensor::new([g.n, g.c_out, g.h_out, g.w_out], out)
}

pub struct Conv2dGrads {
    pub input: Option<Vec<f64>>,
    pub weight: Option<Vec<f64>>,
    pub bias: Option<Vec<f64>>,
}

/// Gradients of `conv2d_raw` given the upstream gradient `grad_out`.
pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    stride: usize,
    padding: usize,
    grad_out: &[f64],
    need: [bool; 3],
) -> Result<Conv2dGrads> {
    let g = ConvGeometry::new(input.shape(), weight.shape(), stride, padding)?;
    let plane = g.out_plane();
    let in_len = g.c_in * g.h * g.w;
    let mut gin = need[0].then(|| vec![0.0; input.len()]);
    let mut gw = need[1].then(|| vec![0.0; weight.len()]);
    let gb = need[2].then(|| {
        let mut gb = vec![0.0; g.c_out];
        for n in 0..g.n {
            for (co, b) in gb.iter_mut().enumerate() {
                let off = (n * g.c_out + co) * plane;
                *b += grad_out[off..off + plane].iter().sum::<f64>();
            }
        }
        gb
    });
    let mut cols = vec![0.0; g.patch_len() * plane];
    for n in 0..g.n {
        let go = &grad_out[n * g.c_out * plane..(n + 1) * g.c_out * plane];
        if let Some(gw) = gw.as_mut() {
            im2col(&g, &input.data()[n * in_len..(n + 1) * in_len], &mut cols);
            gemm(
                MatRef::new(go, g.c_out, plane),
                MatRef::new(&cols, g.patch_len(), plane).t(),
                1.0,
                gw,
            );
        }
        if let Some(gin) = gin.as_mut() {
            gemm(
                MatRef::new(weight.data(), g.c_out, g.patch_len()).t(),
                MatRef::new(go, g.c_out, plane),
                0.0,
                &mut cols,
            );
            col2im(&g, &cols, &mut gin[n * in_len..(n + 1) * in_len]);
        }
    }
    Ok(Conv2dGrads {
        input: gin,
        weight: gw,
        bias: gb,
    })
}

/// Saved statistics for the instance-norm backward pass.
#[derive(Clone, Debug)]
pub struct InstanceNormCache {
    /// Normalized input before the affine step.
    pub normalized: Vec<f64>,
    /// `1 / sqrt(var + eps)` per (sample, channel) plane.
    pub inv_std: Vec<f64>,
    /// Per-sample pixel mask, `N * H * W` entries.
    pub mask: Option<Vec<bool>>,
}

impl InstanceNormCache {
    fn valid(&self, sample: usize, plane: usize, i: usize) -> bool {
        self.mask.as_ref().is_none_or(|m| m[sample * plane + i])
    }
}

/// Per-(sample, channel) normalization followed by a per-channel affine map.
///
/// A plane whose variance plus `eps` is exactly zero normalizes to zeros.
pub fn instance_norm(input: &Tensor, params: &LayerParams, eps: f64) -> Result<Tensor> {
    instance_norm_raw(input, &params.weights, &params.bias, eps, None).map(|(t, _)| t)
}

/// With a mask, statistics use only the marked pixels and are then applied
/// to the whole plane. A sample with no marked pixel uses all of them. An
/// all-true mask gives the unmasked result.
pub fn instance_norm_raw(
    input: &Tensor,
    scale: &Tensor,
    shift: &Tensor,
    eps: f64,
    mask: Option<&[bool]>,
) -> Result<(Tensor, InstanceNormCache)> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::shape("instance_norm", format!("input must be [N,C,H,W], got {s:?}")));
    }
    if s.contains(&0) {
        return Err(Error::EmptyExtent {
            op: "instance_norm",
            shape: s.to_vec(),
        });
    }
    if !(eps >= 0.0) {
        return Err(Error::InvalidArgument(format!("instance_norm: eps must be >= 0, got {eps}")));
    }
    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
    if scale.shape() != [c] || shift.shape() != [c] {
        return Err(Error::shape(
            "instance_norm",
            format!("affine params {:?}/{:?} for {c} channels", scale.shape(), shift.shape()),
        ));
    }
    if let Some(m) = mask {
        if m.len() != n * plane {
            return Err(Error::shape("instance_norm", format!("mask has {} entries, expected {}", m.len(), n * plane)));
        }
    }
    let mut mask = mask.map(<[bool]>::to_vec);
    if let Some(m) = mask.as_mut() {
        for sample in m.chunks_mut(plane) {
            if !sample.contains(&true) {
                sample.fill(true);
            }
        }
    }
    let mut cache = InstanceNormCache {
        normalized: vec![0.0; input.len()],
        inv_std: vec![0.0; n * c],
        mask,
    };
    let mut out = vec![0.0; input.len()];
    for p in 0..n * c {
        let b = p / c;
        let x = &input.data()[p * plane..(p + 1) * plane];
        let valid = |i: usize| cache.valid(b, plane, i);
        let count = (0..plane).filter(|&i| valid(i)).count();
        let kept = || (0..plane).filter(|&i| valid(i)).map(|i| x[i]);
        let mean = kept().sum::<f64>() / count as f64;
        let var = kept().map(|v| (v - mean) * (v - mean)).sum::<f64>() / count as f64;
        let denom = (var + eps).sqrt();
        let is = if denom > 0.0 { 1.0 / denom } else { 0.0 };
        cache.inv_std[p] = is;
        let (gamma, beta) = (scale.data()[p % c], shift.data()[p % c]);
        let xn = &mut cache.normalized[p * plane..(p + 1) * plane];
        let y = &mut out[p * plane..(p + 1) * plane];
        for i in 0..plane {
            xn[i] = (x[i] - mean) * is;
            y[i] = gamma * xn[i] + beta;
        }
    }
    Ok((Tensor::new(s.to_vec(), out)?, cache))
}

/// Returns (grad_input, grad_scale, grad_shift).
pub fn instance_norm_backward(
    shape: &[usize],
    scale: &Tensor,
    cache: &InstanceNormCache,
    grad_out: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
    let mut gin = vec![0.0; grad_out.len()];
    let mut gscale = vec![0.0; c];
    let mut gshift = vec![0.0; c];
    for p in 0..n * c {
        let (b, ch) = (p / c, p % c);
        let go = &grad_out[p * plane..(p + 1) * plane];
        let xn = &cache.normalized[p * plane..(p + 1) * plane];
        let sum_g: f64 = go.iter().sum();
        let sum_gx: f64 = go.iter().zip(xn).map(|(g, x)| g * x).sum();
        gshift[ch] += sum_g;
        gscale[ch] += sum_gx;
        let m = (0..plane).filter(|&i| cache.valid(b, plane, i)).count() as f64;
        let gamma = scale.data()[ch];
        let k = gamma * cache.inv_std[p] / m;
        let gi = &mut gin[p * plane..(p + 1) * plane];
        for i in 0..plane {
            gi[i] = k * m * go[i];
            if cache.valid(b, plane, i) {
                gi[i] -= k * (sum_g + xn[i] * sum_gx);
            }
        }
    }
    (gin, gscale, gshift)
}

pub fn relu(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    out.set_requires_grad(false);
    out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
    out
}

/// Gradient of ReLU; the derivative at exactly zero is taken as zero.
pub fn relu_backward(input: &Tensor, grad_out: &[f64]) -> Vec<f64> {
    input
        .data()
        .iter()
        .zip(grad_out)
        .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
        .collect()
}

/// Non-overlapping `k x k` average pooling; trailing rows/columns that do
/// not fill a window are dropped.
pub fn avg_pool2d(input: &Tensor, k: usize) -> Result<Tensor> {
    let s = input.shape();
    if s.len() != 4 {
        return Err(Error::shape("avg_pool2d", format!("input must be [N,C,H,W], got {s:?}")));
    }
    if k == 0 || s[2] < k || s[3] < k {
        return Err(Error::shape("avg_pool2d", format!("window {k} does not fit {s:?}")));
    }
    let (nc, h, w) = (s[0] * s[1], s[2], s[3]);
    let (ho, wo) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; nc * ho * wo];
    for p in 0..nc {
        let src = &input.data()[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for dy in 0..k {
                    for dx in 0..k {
                        acc += src[(oy * k + dy) * w + ox * k + dx];
                    }
                }
                out[(p * ho + oy) * wo + ox] = acc * norm;
            }
        }
    }
    Tensor::new([s[0], s[1], ho, wo], out)
}

pub fn avg_pool2d_backward(shape: &[usize], k: usize, grad_out: &[f64]) -> Vec<f64> {
    let (nc, h, w) = (shape[0] * shape[1], shape[2], shape[3]);
    let (ho, wo) = (h / k, w / k);
    let norm = 1.0 / (k * k) as f64;
    let mut gin = vec![0.0; nc * h * w];
    for p in 0..nc {
        for oy in 0..ho {
            for ox in 0..wo {
                let g = grad_out[(p * ho + oy) * wo + ox] * norm;
                for dy in 0..k {
                    for dx in 0..k {
                        gin[p * h * w + (oy * k + dy) * w + ox * k + dx] = g;
                    }
                }
            }
        }
    }
    gin
}

/// Batched `a * b^T`: `a` is `[B, M, K]`, `b` is `[B, N, K]`, result `[B, M, N]`.
pub fn batched_matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
        return Err(Error::shape(
            "batched_matmul_nt",
            format!("expected [B,M,K] x [B,N,K], got {sa:?} x {sb:?}"),
        ));
    }
    let (batch, m, n, k) = (sa[0], sa[1], sb[1], sa[2]);
    let mut out = vec![0.0; batch * m * n];
    for bi in 0..batch {
        gemm(
            MatRef::new(&a.data()[bi * m * k..(bi + 1) * m * k], m, k),
            MatRef::new(&b.data()[bi * n * k..(bi + 1) * n * k], n, k).t(),
            0.0,
            &mut out[bi * m * n..(bi + 1) * m * n],
        );
    }
    Tensor::new([batch, m, n], out)
}

/// Returns (grad_a, grad_b) for `batched_matmul_nt`.
pub fn batched_matmul_nt_backward(a: &Tensor, b: &Tensor, grad_out: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (batch, m, n, k) = (a.shape()[0], a.shape()[1], b.shape()[1], a.shape()[2]);
    let mut ga = vec![0.0; a.len()];
    let mut gb = vec![0.0; b.len()];
    for bi in 0..batch {
        let go = &grad_out[bi * m * n..(bi + 1) * m * n];
        // dA = G * B
        gemm(
            MatRef::new(go, m, n),
            MatRef::new(&b.data()[bi * n * k..(bi + 1) * n * k], n, k),
            0.0,
            &mut ga[bi * m * k..(bi + 1) * m * k],
        );
        // dB = G^T * A
        gemm(
            MatRef::new(go, m, n).t(),
            MatRef::new(&a.data()[bi * m * k..(bi + 1) * m * k], m, k),
            0.0,
            &mut gb[bi * n * k..(bi + 1) * n * k],
        );
    }
    (ga, gb)
}

/// Correctly rounded sum of `values` (Shewchuk's exact partials with a final
/// round-half-even correction). The result does not depend on the order of
/// the inputs.
pub fn exact_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut partials: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..partials.len() {
            let mut y = partials[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                partials[i] = lo;
                i += 1;
            }
            x = hi;
        }
        partials.truncate(i);
        partials.push(x);
    }
    let mut n = partials.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = partials[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = partials[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && partials[n - 1] < 0.0) || (lo > 0.0 && partials[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

/// Bilinear pooling over the group axis: `a` is `[P, Ma, G]`, `b` is
/// `[P, Mb, G]`, result `[P, Ma * Mb]` with entry `i * Mb + j` equal to
/// `sum_g a[p, i, g] * b[p, j, g]`, summed exactly.
pub fn bilinear_pool_raw(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
        return Err(Error::shape(
            "bilinear_pool",
            format!("expected [P,Ma,G] and [P,Mb,G], got {sa:?} and {sb:?}"),
        ));
    }
    let (np, ma, mb, ng) = (sa[0], sa[1], sb[1], sa[2]);
    let mut out = vec![0.0; np * ma * mb];
    for p in 0..np {
        for i in 0..ma {
            let ra = &a.data()[(p * ma + i) * ng..(p * ma + i + 1) * ng];
            for j in 0..mb {
                let rb = &b.data()[(p * mb + j) * ng..(p * mb + j + 1) * ng];
                out[(p * ma + i) * mb + j] = exact_sum(ra.iter().zip(rb).map(|(x, y)| x * y));
            }
        }
    }
    Tensor::new([np, ma * mb], out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum GridPool {
    Average,
    Max,
}

/// Mean or max over the last axis of `[P, C, G]`, giving `[P, C]`. The mean
/// is summed exactly. Also returns the arg-max index per output for the
/// backward pass.
pub fn grid_pool_raw(x: &Tensor, mode: GridPool) -> Result<(Tensor, Vec<usize>)> {
    let s = x.shape();
    if s.len() != 3 || s[2] == 0 {
        return Err(Error::shape("grid_pool", format!("expected non-empty [P,C,G], got {s:?}")));
    }
    let ng = s[2];
    let mut out = Vec::with_capacity(s[0] * s[1]);
    let mut arg = Vec::with_capacity(s[0] * s[1]);
    for row in x.data().chunks(ng) {
        match mode {
            GridPool::Average => {
                out.push(exact_sum(row.iter().copied()) / ng as f64);
                arg.push(0);
            }
            GridPool::Max => {
                let (k, v) = row
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (k, &v)| if v > best.1 { (k, v) } else { best });
                out.push(v);
                arg.push(k);
            }
        }
    }
    Ok((Tensor::new([s[0], s[1]], out)?, arg))
}

/// Scales `row` to unit L2 norm in place and returns the original norm. A
/// zero row is left untouched.
pub fn l2_normalize(row: &mut [f64]) -> f64 {
    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
    if n > 0.0 {
        row.iter_mut().for_each(|v| *v /= n);
    }
    n
}

/// Interpolation weights of one continuous sample point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SampleTaps {
    pub x0: usize,
    pub y0: usize,
    pub fx: f64,
    pub fy: f64,
}

impl SampleTaps {
    /// `None` when `(x, y)` lies outside `[0, w-1] x [0, h-1]`.
    pub fn locate(x: f64, y: f64, w: usize, h: usize) -> Option<Self> {
        if w == 0 || h == 0 || !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
            return None;
        }
        let x0 = (x.floor() as usize).min(w.saturating_sub(2));
        let y0 = (y.floor() as usize).min(h.saturating_sub(2));
        Some(SampleTaps {
            x0,
            y0,
            fx: x - x0 as f64,
            fy: y - y0 as f64,
        })
    }

    /// Interpolates one `h x w` plane.
    #[inline]
    pub fn sample(&self, plane: &[f64], w: usize) -> f64 {
        let i = self.y0 * w + self.x0;
        match (self.fx == 0.0, self.fy == 0.0) {
            (true, true) => plane[i],
            (false, true) => (1.0 - self.fx) * plane[i] + self.fx * plane[i + 1],
            (true, false) => (1.0 - self.fy) * plane[i] + self.fy * plane[i + w],
            (false, false) => {
                let top = (1.0 - self.fx) * plane[i] + self.fx * plane[i + 1];
                let bottom = (1.0 - self.fx) * plane[i + w] + self.fx * plane[i + w + 1];
                (1.0 - self.fy) * top + self.fy * bottom
            }
        }
    }

    /// Adds `g` times the interpolation weights into the plane gradient.
    #[inline]
    pub fn scatter(&self, plane: &mut [f64], w: usize, g: f64) {
        let i = self.y0 * w + self.x0;
        let (fx, fy) = (self.fx, self.fy);
        plane[i] += g * (1.0 - fx) * (1.0 - fy);
        if fx != 0.0 {
            plane[i + 1] += g * fx * (1.0 - fy);
        }
        if fy != 0.0 {
            plane[i + w] += g * (1.0 - fx) * fy;
            if fx != 0.0 {
                plane[i + w + 1] += g * fx * fy;
            }
        }
    }
}

/// Bilinear interpolation of a `[C, H, W]` map at continuous `(x, y)`.
///
/// Points outside the lattice return the zero vector and `false`.
pub fn bilinear_sample(map: &Tensor, x: f64, y: f64) -> (Vec<f64>, bool) {
    let s = map.shape();
    assert_eq!(s.len(), 3, "bilinear_sample expects [C,H,W]");
    let (c, h, w) = (s[0], s[1], s[2]);
    match SampleTaps::locate(x, y, w, h) {
        Some(taps) => (
            (0..c)
                .map(|ch| taps.sample(&map.data()[ch * h * w..(ch + 1) * h * w], w))
                .collect(),
            true,
        ),
        None => (vec![0.0; c], false),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ones(shape: [usize; 4]) -> Tensor {
        Tensor::full(shape, 1.0)
    }

    #[test]
    fn conv_sum_of_ones() {
        let out = conv2d_raw(&ones([1, 1, 3, 3]), &ones([1, 1, 3, 3]), &Tensor::zeros([1]), 1, 0).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1, 1]);
        assert_eq!(out.item(), 9.0);
    }

    #[test]
    fn conv_identity_kernel() {
        let input = Tensor::from_fn([2, 1, 4, 5], |i| (i as f64 * 0.37).cos());
        let out = conv2d_raw(&input, &ones([1, 1, 1, 1]), &Tensor::zeros([1]), 1, 0).unwrap();
        assert_eq!(out, input);
    }

    #[test]
    fn conv_output_size_and_errors() {
        let input = Tensor::zeros([1, 2, 7, 9]);
        let out = conv2d_raw(&input, &Tensor::zeros([3, 2, 3, 3]), &Tensor::zeros([3]), 2, 1).unwrap();
        assert_eq!(out.shape(), &[1, 3, 4, 5]);
        assert!(matches!(
            conv2d_raw(&input, &Tensor::zeros([3, 4, 3, 3]), &Tensor::zeros([3]), 1, 0),
            Err(Error::Shape { .. })
        ));
        assert!(matches!(
            conv2d_raw(&Tensor::zeros([1, 2, 0, 9]), &Tensor::zeros([3, 2, 1, 1]), &Tensor::zeros([3]), 1, 0),
            Err(Error::EmptyExtent { .. })
        ));
        assert!(conv2d_raw(&input, &Tensor::zeros([3, 2, 9, 9]), &Tensor::zeros([3]), 1, 0).is_err());
    }

    #[test]
    fn instance_norm_two_points() {
        let x = Tensor::new([1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let y = instance_norm(&x, &LayerParams::instance_norm(1), 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
    }

    #[test]
    fn instance_norm_constant_plane() {
        let x = Tensor::full([1, 2, 3, 3], 4.25);
        let y = instance_norm(&x, &LayerParams::instance_norm(2), 1e-5).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn avg_pool_drops_remainder() {
        let x = Tensor::from_fn([1, 1, 3, 5], |i| i as f64);
        let y = avg_pool2d(&x, 2).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 2]);
        assert_eq!(y.data(), &[(0.0 + 1.0 + 5.0 + 6.0) / 4.0, (2.0 + 3.0 + 7.0 + 8.0) / 4.0]);
    }

    #[test]
    fn sample_lattice_midpoint_and_outside() {
        let map = Tensor::from_fn([2, 5, 4], |i| i as f64);
        let (v, ok) = bilinear_sample(&map, 2.0, 3.0);
        assert!(ok);
        assert_eq!(v, vec![map.at(&[0, 3, 2]), map.at(&[1, 3, 2])]);

        let pair = Tensor::new([1, 1, 2], vec![0.0, 4.0]).unwrap();
        assert_eq!(bilinear_sample(&pair, 0.5, 0.0), (vec![2.0], true));

        assert_eq!(bilinear_sample(&map, -1.0, 0.0), (vec![0.0, 0.0], false));
        assert!(!bilinear_sample(&map, 3.0001, 0.0).1);
        // Far corner is still inside.
        let (v, ok) = bilinear_sample(&map, 3.0, 4.0);
        assert!(ok);
        assert_eq!(v[1], map.at(&[1, 4, 3]));
    }

    #[test]
    fn masked_instance_norm() {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(3);
        let x = Tensor::uniform([1, 2, 3, 4], -1.0, 1.0, &mut rng);
        let p = LayerParams::instance_norm(2);
        let full = vec![true; 12];
        let (a, _) = instance_norm_raw(&x, &p.weights, &p.bias, 1e-5, Some(&full)).unwrap();
        assert_eq!(a, instance_norm(&x, &p, 1e-5).unwrap());

        // Only two pixels count: they normalize to -1 and +1, and the rest
        // use their mean and spread.
        let mut m = vec![false; 12];
        m[1] = true;
        m[6] = true;
        let (b, _) = instance_norm_raw(&x, &p.weights, &p.bias, 0.0, Some(&m)).unwrap();
        for ch in 0..2 {
            let plane = &b.data()[ch * 12..(ch + 1) * 12];
            let (u, v) = (x.data()[ch * 12 + 1], x.data()[ch * 12 + 6]);
            assert!((plane[1] - (u - v).signum()).abs() < 1e-12);
            assert!((plane[6] + plane[1]).abs() < 1e-12);
            let (mean, sd) = ((u + v) / 2.0, (u - v).abs() / 2.0);
            for (i, &y) in plane.iter().enumerate() {
                assert!((y - (x.data()[ch * 12 + i] - mean) / sd).abs() < 1e-9);
            }
        }
        assert!(instance_norm_raw(&x, &p.weights, &p.bias, 0.0, Some(&m[..5])).is_err());
        let (c, _) = instance_norm_raw(&x, &p.weights, &p.bias, 1e-5, Some(&[false; 12])).unwrap();
        assert_eq!(c, a);
    }

    #[test]
    fn exact_sum_is_order_free() {
        let vals = [1e16, 1.0, -1e16, 1e-3, 3.5, -2.25e-7, 7e15, -7e15];
        let want = exact_sum(vals);
        assert_eq!(want, 4.500999775);
        let mut perm = vals;
        for k in 0..40 {
            perm.rotate_left(k % 7 + 1);
            perm.swap(k % 8, (3 * k + 1) % 8);
            assert_eq!(exact_sum(perm).to_bits(), want.to_bits());
        }
        assert_eq!(exact_sum([0.1; 10]), 1.0);
        assert_eq!(exact_sum(std::iter::empty()), 0.0);
    }

    #[test]
    fn sample_linear_along_axis() {
        let map = Tensor::from_fn([1, 3, 3], |i| ((i * 7) % 5) as f64);
        for t in [0.1, 0.25, 0.5, 0.9] {
            let (v, _) = bilinear_sample(&map, 1.0 + t, 1.0);
            let want = (1.0 - t) * map.at(&[0, 1, 1]) + t * map.at(&[0, 1, 2]);
            assert!((v[0] - want).abs() < 1e-15);
        }
    }
}

//! Forward and backward kernels.
//!
//! Every kernel accumulates in a fixed row-major order so results are
//! bit-reproducible for identical inputs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::Tensor;

/// Output extent of a strided, zero-padded window: `(n + 2·pad − k)/stride + 1`.
pub fn conv_out_extent(n: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let padded = n + 2 * pad;
    if padded < k {
        return Err(Error::Config(format!(
            "kernel {k} larger than padded extent {padded}"
        )));
    }
    if !(padded - k).is_multiple_of(stride) {
        return Err(Error::Config(format!(
            "non-integral output extent: ({n} + 2*{pad} - {k}) / {stride} + 1"
        )));
    }
    Ok((padded - k) / stride + 1)
}

struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn new<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, stride: usize, pad: usize) -> Result<Self> {
        input.expect_rank(4, "conv2d")?;
        weight.expect_rank(4, "conv2d")?;
        let (b, cin, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
        let (cout, wcin, kh, kw) = (weight.shape[0], weight.shape[1], weight.shape[2], weight.shape[3]);
        if wcin != cin {
            return Err(Error::shape(
                "conv2d",
                format!("weight expects {wcin} input channels, input has {cin}"),
            ));
        }
        let ho = conv_out_extent(h, kh, stride, pad)?;
        let wo = conv_out_extent(w, kw, stride, pad)?;
        Ok(ConvGeom {
            batch: b,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ho,
            wo,
            stride,
            pad,
        })
    }

    fn rows(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one sample into columns `[offset, offset + ho·wo)` of a
    /// `[cin·kh·kw, ld]` column matrix.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T], ld: usize, offset: usize) {
        for ci in 0..self.cin {
            let plane = &x[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    let row = &mut cols[r * ld + offset..r * ld + offset + self.positions()];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        let out = &mut row[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            out.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, o) in out.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            *o = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds columns `[offset, offset + ho·wo)` of a column matrix
    /// back onto one sample's input gradient.
    fn col2im<T: Scalar>(&self, cols: &[T], ld: usize, offset: usize, gx: &mut [T]) {
        for ci in 0..self.cin {
            let plane = &mut gx[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for ky in 0..self.kh {
                for kx in 0..self.kw {
                    let r = (ci * self.kh + ky) * self.kw + kx;
                    let row = &cols[r * ld + offset..r * ld + offset + self.positions()];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += row[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }

    /// Column matrix of the whole batch: `[cin·kh·kw, B·ho·wo]`.
    fn batch_cols<T: Scalar>(&self, input: &[T]) -> Vec<T> {
        let (r, p) = (self.rows(), self.positions());
        let ld = self.batch * p;
        let in_per = self.cin * self.h * self.w;
        let mut cols = vec![T::zero(); r * ld];
        for b in 0..self.batch {
            self.im2col(&input[b * in_per..(b + 1) * in_per], &mut cols, ld, b * p);
        }
        cols
    }
}

/// `c = op(a)·op(b)` over dense row-major operands. `a_t` means `a` is
/// stored as `k×m` (and is used transposed); likewise `b_t` for `n×k`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n, "gemm operand too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v = T::zero());
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted lengths cover every index the strides reach.
    unsafe { T::gemm_raw(m, k, n, a, rsa, csa, b, rsb, csb, c, n as isize, 1) }
}

/// Bias-free 2-D cross-correlation with zero padding.
///
/// `input` is `[B, Cin, H, W]`, `weight` is `[Cout, Cin, M, K]`.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let g = ConvGeom::new(input, weight, stride, pad)?;
    let (r, p) = (g.rows(), g.positions());
    let ld = g.batch * p;
    let cols = g.batch_cols(&input.data);
    let mut prod = vec![T::zero(); g.cout * ld];
    gemm(g.cout, r, ld, &weight.data, false, &cols, false, &mut prod);
    let mut out = Tensor::zeros(&[g.batch, g.cout, g.ho, g.wo]);
    for b in 0..g.batch {
        for co in 0..g.cout {
            out.data[(b * g.cout + co) * p..(b * g.cout + co + 1) * p]
                .copy_from_slice(&prod[co * ld + b * p..co * ld + (b + 1) * p]);
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to input and weight.
pub fn conv2d_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (gi, gw) = conv2d_backward_parts(grad_out, input, weight, stride, pad, true, true)?;
    Ok((gi.expect("requested"), gw.expect("requested")))
}

/// Input and weight gradients, each present only when requested.
pub type ConvGrads<T> = (Option<Tensor<T>>, Option<Tensor<T>>);

/// Like [`conv2d_backward`] but computes only the requested gradients.
pub fn conv2d_backward_parts<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_input: bool,
    want_weight: bool,
) -> Result<ConvGrads<T>> {
    let g = ConvGeom::new(input, weight, stride, pad)?;
    let expected = [g.batch, g.cout, g.ho, g.wo];
    if grad_out.shape != expected {
        return Err(Error::shape(
            "conv2d_backward",
            format!("grad_out {:?}, forward output {expected:?}", grad_out.shape),
        ));
    }
    let (r, p) = (g.rows(), g.positions());
    let ld = g.batch * p;
    // grad_out rearranged to [cout, B·p]
    let mut go = vec![T::zero(); g.cout * ld];
    for b in 0..g.batch {
        for co in 0..g.cout {
            go[co * ld + b * p..co * ld + (b + 1) * p]
                .copy_from_slice(&grad_out.data[(b * g.cout + co) * p..(b * g.cout + co + 1) * p]);
        }
    }
    let gw = want_weight.then(|| {
        let cols = g.batch_cols(&input.data);
        let mut gw = Tensor::zeros(&weight.shape);
        gemm(g.cout, ld, r, &go, false, &cols, true, &mut gw.data);
        gw
    });
    let gin = want_input.then(|| {
        let mut gcols = vec![T::zero(); r * ld];
        gemm(r, g.cout, ld, &weight.data, true, &go, false, &mut gcols);
        let in_per = g.cin * g.h * g.w;
        let mut gin = Tensor::zeros(&input.shape);
        for b in 0..g.batch {
            g.col2im(&gcols, ld, b * p, &mut gin.data[b * in_per..(b + 1) * in_per]);
        }
        gin
    });
    Ok((gin, gw))
}

pub fn relu<T: Scalar>(input: &Tensor<T>) -> Tensor<T> {
    input.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the upstream gradient where `input > 0`; the subgradient at 0 is 0.
pub fn relu_backward<T: Scalar>(grad_out: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
    grad_out.zip_map(input, "relu_backward", |g, x| if x > T::zero() { g } else { T::zero() })
}

/// `[B, D] × [O, D]ᵀ → [B, O]`, bias-free.
pub fn linear_forward<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>) -> Result<Tensor<T>> {
    input.expect_rank(2, "linear")?;
    weight.expect_rank(2, "linear")?;
    let (b, d) = (input.shape[0], input.shape[1]);
    let (o, wd) = (weight.shape[0], weight.shape[1]);
    if d != wd {
        return Err(Error::shape(
            "linear",
            format!("input has {d} features, weight expects {wd}"),
        ));
    }
    let mut out = Tensor::zeros(&[b, o]);
    gemm(b, d, o, &input.data, false, &weight.data, true, &mut out.data);
    Ok(out)
}

pub fn linear_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    input: &Tensor<T>,
    weight: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    input.expect_rank(2, "linear_backward")?;
    weight.expect_rank(2, "linear_backward")?;
    let (b, d) = (input.shape[0], input.shape[1]);
    let o = weight.shape[0];
    if grad_out.shape != [b, o] || weight.shape[1] != d {
        return Err(Error::shape(
            "linear_backward",
            format!(
                "grad_out {:?}, input {:?}, weight {:?}",
                grad_out.shape, input.shape, weight.shape
            ),
        ));
    }
    let mut gin = Tensor::zeros(&[b, d]);
    let mut gw = Tensor::zeros(&[o, d]);
    gemm(b, o, d, &grad_out.data, false, &weight.data, false, &mut gin.data);
    gemm(o, b, d, &grad_out.data, true, &input.data, false, &mut gw.data);
    Ok((gin, gw))
}

/// 2×2 max pooling with stride 2. Returns the output and, per output element,
/// the flat input index of the chosen maximum (first maximal element wins).
pub fn maxpool2x2<T: Scalar>(input: &Tensor<T>) -> Result<(Tensor<T>, Vec<usize>)> {
    input.expect_rank(4, "maxpool2x2")?;
    let (b, c, h, w) = (input.shape[0], input.shape[1], input.shape[2], input.shape[3]);
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::Config(format!(
            "maxpool2x2 needs even spatial extents, got {h}x{w}"
        )));
    }
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[b, c, ho, wo]);
    let mut idx = vec![0usize; b * c * ho * wo];
    for plane in 0..b * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let k = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if input.data[k] > input.data[best] {
                        best = k;
                    }
                }
                let o = (plane * ho + oy) * wo + ox;
                out.data[o] = input.data[best];
                idx[o] = best;
            }
        }
    }
    Ok((out, idx))
}

pub fn maxpool2x2_backward<T: Scalar>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(Error::shape(
            "maxpool2x2_backward",
            format!("{} gradients for {} pooled sites", grad_out.len(), argmax.len()),
        ));
    }
    let mut gin = Tensor::zeros(input_shape);
    for (&g, &k) in grad_out.data.iter().zip(argmax) {
        gin.data[k] += g;
    }
    Ok(gin)
}

/// Per-channel `y = scale_c·x + shift_c` over `[B, C, ...]`; stands in for
/// inference-mode batch normalization.
pub fn frozen_affine<T: Scalar>(input: &Tensor<T>, scale: &[T], shift: &[T]) -> Result<Tensor<T>> {
    let (c, per) = affine_geom(input, scale, shift)?;
    let mut out = input.clone();
    for (k, chunk) in out.data.chunks_mut(per).enumerate() {
        let ch = k % c;
        let (s, t) = (scale[ch], shift[ch]);
        chunk.iter_mut().for_each(|v| *v = s * *v + t);
    }
    Ok(out)
}

pub fn frozen_affine_backward<T: Scalar>(grad_out: &Tensor<T>, scale: &[T]) -> Result<Tensor<T>> {
    let (c, per) = affine_geom(grad_out, scale, scale)?;
    let mut gin = grad_out.clone();
    for (k, chunk) in gin.data.chunks_mut(per).enumerate() {
        let s = scale[k % c];
        chunk.iter_mut().for_each(|v| *v *= s);
    }
    Ok(gin)
}

fn affine_geom<T: Scalar>(x: &Tensor<T>, scale: &[T], shift: &[T]) -> Result<(usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::shape("frozen_affine", format!("rank {} input", x.rank())));
    }
    let c = x.shape[1];
    if scale.len() != c || shift.len() != c {
        return Err(Error::shape(
            "frozen_affine",
            format!("{c} channels, scale {} / shift {}", scale.len(), shift.len()),
        ));
    }
    Ok((c, x.shape[2..].iter().product()))
}

/// Numerically stable softmax (max-subtracted).
pub fn softmax_channel<T: Scalar>(x: &[T]) -> Vec<T> {
    let m = x.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let e: Vec<T> = x.iter().map(|&v| (v - m).exp()).collect();
    let s = e.iter().fold(T::zero(), |a, &b| a + b);
    e.into_iter().map(|v| v / s).collect()
}

/// `log softmax(x)` computed as `x − logsumexp(x)`.
pub fn log_softmax<T: Scalar>(x: &[T]) -> Vec<T> {
    let m = x.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
    let lse = m + x.iter().fold(T::zero(), |a, &v| a + (v - m).exp()).ln();
    x.iter().map(|&v| v - lse).collect()
}

fn check_labels<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<(usize, usize)> {
    logits.expect_rank(2, "cross_entropy")?;
    let (b, k) = (logits.shape[0], logits.shape[1]);
    if labels.len() != b {
        return Err(Error::shape(
            "cross_entropy",
            format!("{b} logit rows, {} labels", labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::Label {
            label: bad,
            classes: k,
        });
    }
    Ok((b, k))
}

/// Mean over the batch of `−log softmax(logits)[label]`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<T> {
    Ok(cross_entropy_with_grad(logits, labels)?.0)
}

/// Loss and its gradient with respect to the logits: `(softmax − onehot)/B`.
pub fn cross_entropy_with_grad<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let (b, k) = check_labels(logits, labels)?;
    let inv_b = T::one() / T::of(b as f64);
    let mut loss = T::zero();
    let mut grad = Tensor::zeros(&[b, k]);
    for (bi, &label) in labels.iter().enumerate() {
        let row = &logits.data[bi * k..(bi + 1) * k];
        let ls = log_softmax(row);
        loss -= ls[label];
        let g = &mut grad.data[bi * k..(bi + 1) * k];
        for (j, (gj, &l)) in g.iter_mut().zip(&ls).enumerate() {
            let onehot = if j == label { T::one() } else { T::zero() };
            *gj = (l.exp() - onehot) * inv_b;
        }
    }
    let loss = loss * inv_b;
    if !loss.is_finite() {
        return Err(Error::NonFinite("cross_entropy"));
    }
    Ok((loss, grad))
}

//! Differentiable primitives. Each op validates shapes, computes its result
//! in f64, and registers an adjoint closure when gradients are being traced.

use super::autodiff::record;
use super::rng::RngStream;
use super::tensor::Tensor;
use super::Mode;
use crate::error::{Error, Result};

fn shape_err(op: &'static str, msg: String) -> Error {
    Error::Shape { op, msg }
}

fn check_same_dtype(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dtype() != b.dtype() {
        return Err(shape_err(op, format!("dtype mismatch {:?} vs {:?}", a.dtype(), b.dtype())));
    }
    Ok(())
}

fn check_same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    check_same_dtype(op, a, b)?;
    if a.shape() != b.shape() {
        return Err(shape_err(
            op,
            format!("shapes {:?} and {:?} differ", a.shape(), b.shape()),
        ));
    }
    Ok(())
}

// ── Dense kernels ────────────────────────────────────────────────────

/// C[m×n] = A[m×k] · B[k×n]
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

/// C[m×k] = A[m×n] · B[k×n]ᵀ
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * k];
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            c[i * k + p] = acc;
        }
    }
    c
}

/// C[k×n] = A[m×k]ᵀ · B[m×n]
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let crow = &mut c[p * n..(p + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

// ── Elementwise ──────────────────────────────────────────────────────

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("add", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    record("add", &[a, b], data, a.shape().to_vec(), |g| {
        vec![Some(g.to_vec()), Some(g.to_vec())]
    })
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("sub", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x - y).collect();
    record("sub", &[a, b], data, a.shape().to_vec(), |g| {
        vec![Some(g.to_vec()), Some(g.iter().map(|v| -v).collect())]
    })
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("mul", a, b)?;
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x * y).collect();
    let (ac, bc) = (a.clone(), b.clone());
    record("mul", &[a, b], data, a.shape().to_vec(), move |g| {
        let ga = g.iter().zip(bc.data()).map(|(gi, y)| gi * y).collect();
        let gb = g.iter().zip(ac.data()).map(|(gi, x)| gi * x).collect();
        vec![Some(ga), Some(gb)]
    })
}

pub fn scale(x: &Tensor, c: f64) -> Result<Tensor> {
    let data = x.data().iter().map(|v| v * c).collect();
    record("scale", &[x], data, x.shape().to_vec(), move |g| {
        vec![Some(g.iter().map(|v| v * c).collect())]
    })
}

pub fn relu(x: &Tensor) -> Result<Tensor> {
    let data = x.data().iter().map(|v| v.max(0.0)).collect();
    let xc = x.clone();
    record("relu", &[x], data, x.shape().to_vec(), move |g| {
        let gx = g
            .iter()
            .zip(xc.data())
            .map(|(gi, v)| if *v > 0.0 { *gi } else { 0.0 })
            .collect();
        vec![Some(gx)]
    })
}

/// Inverted-scaling dropout: kept activations are divided by 1−p during
/// training so evaluation is exactly the identity.
pub fn dropout(x: &Tensor, p: f64, mode: Mode, stream: &mut RngStream) -> Result<Tensor> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Invalid(format!("dropout rate {p} outside [0, 1]")));
    }
    if mode == Mode::Eval || p == 0.0 {
        return Ok(x.clone());
    }
    if p == 1.0 {
        // Everything dropped; no 1/(1-p) division takes place.
        let n = x.numel();
        return record("dropout", &[x], vec![0.0; n], x.shape().to_vec(), move |_g| {
            vec![Some(vec![0.0; n])]
        });
    }
    let keep_scale = 1.0 / (1.0 - p);
    let mask: Vec<bool> = x.data().iter().map(|_| stream.uniform() >= p).collect();
    let data = x
        .data()
        .iter()
        .zip(&mask)
        .map(|(v, keep)| if *keep { v * keep_scale } else { 0.0 })
        .collect();
    record("dropout", &[x], data, x.shape().to_vec(), move |g| {
        let gx = g
            .iter()
            .zip(&mask)
            .map(|(gi, keep)| if *keep { gi * keep_scale } else { 0.0 })
            .collect();
        vec![Some(gx)]
    })
}

// ── Shape manipulation ───────────────────────────────────────────────

pub fn reshape(x: &Tensor, shape: &[usize]) -> Result<Tensor> {
    let numel: usize = shape.iter().product();
    if numel != x.numel() || shape.iter().any(|&e| e == 0) {
        return Err(shape_err(
            "reshape",
            format!("cannot view {:?} as {:?}", x.shape(), shape),
        ));
    }
    record("reshape", &[x], x.data().to_vec(), shape.to_vec(), |g| {
        vec![Some(g.to_vec())]
    })
}

pub fn transpose(x: &Tensor) -> Result<Tensor> {
    let [m, n] = *x.shape() else {
        return Err(shape_err("transpose", format!("expected rank 2, got {:?}", x.shape())));
    };
    let src = x.data();
    let mut data = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            data[j * m + i] = src[i * n + j];
        }
    }
    record("transpose", &[x], data, vec![n, m], move |g| {
        let mut gx = vec![0.0; m * n];
        for j in 0..n {
            for i in 0..m {
                gx[i * n + j] = g[j * m + i];
            }
        }
        vec![Some(gx)]
    })
}

/// Concatenate rank-1 or rank-2 tensors along `axis`.
pub fn concat(axis: usize, xs: &[&Tensor]) -> Result<Tensor> {
    if xs.is_empty() {
        return Err(Error::Invalid("concat of zero tensors".into()));
    }
    let rank = xs[0].shape().len();
    if rank > 2 || axis >= rank {
        return Err(shape_err(
            "concat",
            format!("axis {axis} invalid for rank-{rank} inputs"),
        ));
    }
    for x in xs {
        check_same_dtype("concat", xs[0], x)?;
        if x.shape().len() != rank {
            return Err(shape_err("concat", "mixed ranks".into()));
        }
        for (d, (&a, &b)) in xs[0].shape().iter().zip(x.shape()).enumerate() {
            if d != axis && a != b {
                return Err(shape_err(
                    "concat",
                    format!("shapes {:?} and {:?} differ off-axis", xs[0].shape(), x.shape()),
                ));
            }
        }
    }

    let total_axis: usize = xs.iter().map(|x| x.shape()[axis]).sum();
    let mut out_shape = xs[0].shape().to_vec();
    out_shape[axis] = total_axis;

    // Treat rank-1 as [1, n] concat on axis 1 / [n, 1] on axis 0; unify via
    // (rows, cols) with the concat running over cols when axis is the last.
    let (rows, widths): (usize, Vec<usize>) = if rank == 1 || axis == 0 {
        (1, xs.iter().map(|x| x.numel()).collect())
    } else {
        (out_shape[0], xs.iter().map(|x| x.shape()[1]).collect())
    };
    let total_width: usize = widths.iter().sum();

    let mut data = vec![0.0; rows * total_width];
    for r in 0..rows {
        let mut off = 0;
        for (x, w) in xs.iter().zip(&widths) {
            data[r * total_width + off..r * total_width + off + w]
                .copy_from_slice(&x.data()[r * w..(r + 1) * w]);
            off += w;
        }
    }

    let widths_b = widths.clone();
    let inputs: Vec<&Tensor> = xs.to_vec();
    record("concat", &inputs, data, out_shape, move |g| {
        let mut out: Vec<Option<Vec<f64>>> = widths_b.iter().map(|w| Some(vec![0.0; rows * w])).collect();
        for r in 0..rows {
            let mut off = 0;
            for (slot, w) in out.iter_mut().zip(&widths_b) {
                let dst = slot.as_mut().unwrap();
                dst[r * w..(r + 1) * w]
                    .copy_from_slice(&g[r * total_width + off..r * total_width + off + w]);
                off += w;
            }
        }
        out
    })
}

// ── Reductions ───────────────────────────────────────────────────────

pub fn sum(x: &Tensor) -> Result<Tensor> {
    let s = x.data().iter().sum();
    let n = x.numel();
    record("sum", &[x], vec![s], vec![1], move |g| vec![Some(vec![g[0]; n])])
}

pub fn mean(x: &Tensor) -> Result<Tensor> {
    let n = x.numel();
    let s: f64 = x.data().iter().sum();
    record("mean", &[x], vec![s / n as f64], vec![1], move |g| {
        vec![Some(vec![g[0] / n as f64; n])]
    })
}

/// Per-channel spatial average: [C,H,W] → [C].
pub fn spatial_mean(x: &Tensor) -> Result<Tensor> {
    let [c, h, w] = *x.shape() else {
        return Err(shape_err("spatial_mean", format!("expected [C,H,W], got {:?}", x.shape())));
    };
    let hw = h * w;
    let src = x.data();
    let data: Vec<f64> = (0..c)
        .map(|ci| src[ci * hw..(ci + 1) * hw].iter().sum::<f64>() / hw as f64)
        .collect();
    record("spatial_mean", &[x], data, vec![c], move |g| {
        let mut gx = vec![0.0; c * hw];
        for ci in 0..c {
            let gv = g[ci] / hw as f64;
            for v in &mut gx[ci * hw..(ci + 1) * hw] {
                *v = gv;
            }
        }
        vec![Some(gx)]
    })
}

/// Pick one element of a rank-1 tensor as a [1] scalar.
pub fn index(x: &Tensor, i: usize) -> Result<Tensor> {
    if x.shape().len() != 1 {
        return Err(shape_err("index", format!("expected rank 1, got {:?}", x.shape())));
    }
    if i >= x.numel() {
        return Err(Error::Invalid(format!("index {i} out of range 0..{}", x.numel())));
    }
    let n = x.numel();
    record("index", &[x], vec![x.data()[i]], vec![1], move |g| {
        let mut gx = vec![0.0; n];
        gx[i] = g[0];
        vec![Some(gx)]
    })
}

/// Numerically stable log Σ exp over a rank-1 tensor → [1].
pub fn logsumexp(x: &Tensor) -> Result<Tensor> {
    if x.shape().len() != 1 {
        return Err(shape_err("logsumexp", format!("expected rank 1, got {:?}", x.shape())));
    }
    let m = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.data().iter().map(|v| (v - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|e| e / s).collect();
    record("logsumexp", &[x], vec![m + s.ln()], vec![1], move |g| {
        vec![Some(probs.iter().map(|p| p * g[0]).collect())]
    })
}

/// Softmax along `axis` with max-subtraction; every lane sums to 1.
pub fn softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let shape = x.shape();
    if axis >= shape.len() {
        return Err(shape_err("softmax", format!("axis {axis} invalid for shape {shape:?}")));
    }
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "softmax" });
    }
    let n = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let src = x.data();
    let mut data = vec![0.0; x.numel()];
    for o in 0..outer {
        for i in 0..inner {
            let base = o * n * inner + i;
            let mut m = f64::NEG_INFINITY;
            for k in 0..n {
                m = m.max(src[base + k * inner]);
            }
            let mut s = 0.0;
            for k in 0..n {
                let e = (src[base + k * inner] - m).exp();
                data[base + k * inner] = e;
                s += e;
            }
            for k in 0..n {
                data[base + k * inner] /= s;
            }
        }
    }
    let out = data.clone();
    record("softmax", &[x], data, shape.to_vec(), move |g| {
        // ds = s ⊙ (g − Σ g⊙s) per lane
        let mut gx = vec![0.0; g.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let mut dot = 0.0;
                for k in 0..n {
                    let idx = base + k * inner;
                    dot += g[idx] * out[idx];
                }
                for k in 0..n {
                    let idx = base + k * inner;
                    gx[idx] = out[idx] * (g[idx] - dot);
                }
            }
        }
        vec![Some(gx)]
    })
}

// ── Linear algebra ───────────────────────────────────────────────────

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_dtype("matmul", a, b)?;
    let [m, ka] = *a.shape() else {
        return Err(shape_err("matmul", format!("lhs must be rank 2, got {:?}", a.shape())));
    };
    let [kb, n] = *b.shape() else {
        return Err(shape_err("matmul", format!("rhs must be rank 2, got {:?}", b.shape())));
    };
    if ka != kb {
        return Err(shape_err(
            "matmul",
            format!("inner extents differ: {:?} · {:?}", a.shape(), b.shape()),
        ));
    }
    let data = mm(a.data(), b.data(), m, ka, n);
    let (ac, bc) = (a.clone(), b.clone());
    record("matmul", &[a, b], data, vec![m, n], move |g| {
        let ga = mm_nt(g, bc.data(), m, n, ka);
        let gb = mm_tn(ac.data(), g, m, ka, n);
        vec![Some(ga), Some(gb)]
    })
}

/// Affine map W·x + b for rank-1 x: [m×n]·[n] + [m] → [m].
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_dtype("linear", x, w)?;
    check_same_dtype("linear", x, b)?;
    let [m, n] = *w.shape() else {
        return Err(shape_err("linear", format!("weight must be rank 2, got {:?}", w.shape())));
    };
    if x.shape() != [n] || b.shape() != [m] {
        return Err(shape_err(
            "linear",
            format!("x {:?}, W {:?}, b {:?} do not conform", x.shape(), w.shape(), b.shape()),
        ));
    }
    let xd = x.data();
    let wd = w.data();
    let mut data = b.data().to_vec();
    for i in 0..m {
        let row = &wd[i * n..(i + 1) * n];
        let mut acc = 0.0;
        for j in 0..n {
            acc += row[j] * xd[j];
        }
        data[i] += acc;
    }
    let (xc, wc) = (x.clone(), w.clone());
    record("linear", &[x, w, b], data, vec![m], move |g| {
        let wd = wc.data();
        let xd = xc.data();
        let mut gx = vec![0.0; n];
        for i in 0..m {
            let gi = g[i];
            let row = &wd[i * n..(i + 1) * n];
            for j in 0..n {
                gx[j] += gi * row[j];
            }
        }
        let mut gw = vec![0.0; m * n];
        for i in 0..m {
            let gi = g[i];
            for j in 0..n {
                gw[i * n + j] = gi * xd[j];
            }
        }
        vec![Some(gx), Some(gw), Some(g.to_vec())]
    })
}

/// Row-broadcast bias add: [L,D] + [D].
pub fn add_row_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_dtype("add_row_bias", x, b)?;
    let [l, d] = *x.shape() else {
        return Err(shape_err("add_row_bias", format!("expected [L,D], got {:?}", x.shape())));
    };
    if b.shape() != [d] {
        return Err(shape_err("add_row_bias", format!("bias {:?} vs width {d}", b.shape())));
    }
    let bd = b.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + bd[i % d])
        .collect();
    record("add_row_bias", &[x, b], data, vec![l, d], move |g| {
        let mut gb = vec![0.0; d];
        for r in 0..l {
            for j in 0..d {
                gb[j] += g[r * d + j];
            }
        }
        vec![Some(g.to_vec()), Some(gb)]
    })
}

/// Channel-broadcast bias add: [C,H,W] + [C].
pub fn add_channel_bias(x: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_dtype("add_channel_bias", x, b)?;
    let [c, h, w] = *x.shape() else {
        return Err(shape_err("add_channel_bias", format!("expected [C,H,W], got {:?}", x.shape())));
    };
    if b.shape() != [c] {
        return Err(shape_err("add_channel_bias", format!("bias {:?} vs channels {c}", b.shape())));
    }
    let hw = h * w;
    let bd = b.data();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, v)| v + bd[i / hw])
        .collect();
    record("add_channel_bias", &[x, b], data, vec![c, h, w], move |g| {
        let gb = (0..c)
            .map(|ci| g[ci * hw..(ci + 1) * hw].iter().sum())
            .collect();
        vec![Some(g.to_vec()), Some(gb)]
    })
}

// ── Convolution ──────────────────────────────────────────────────────

#[derive(Clone, Copy)]
struct ConvDims {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

fn im2col(src: &[f64], d: ConvDims) -> Vec<f64> {
    let ConvDims { c, h, w, kh, kw, stride, pad, oh, ow, .. } = d;
    let mut cols = vec![0.0; c * kh * kw * oh * ow];
    let span = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * span;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = ci * h * w + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        cols[row + oy * ow + ox] = src[src_row + ix as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], d: ConvDims) -> Vec<f64> {
    let ConvDims { c, h, w, kh, kw, stride, pad, oh, ow, .. } = d;
    let mut img = vec![0.0; c * h * w];
    let span = oh * ow;
    for ci in 0..c {
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((ci * kh + ki) * kw + kj) * span;
                for oy in 0..oh {
                    let iy = (oy * stride + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = ci * h * w + iy as usize * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        img[dst_row + ix as usize] += cols[row + oy * ow + ox];
                    }
                }
            }
        }
    }
    img
}

/// 2-D cross-correlation (no kernel flip): [C,H,W] ⋆ [O,C,kh,kw] → [O,H',W'].
pub fn conv2d(input: &Tensor, kernels: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    check_same_dtype("conv2d", input, kernels)?;
    let [c, h, w] = *input.shape() else {
        return Err(shape_err("conv2d", format!("input must be [C,H,W], got {:?}", input.shape())));
    };
    let [o, kc, kh, kw] = *kernels.shape() else {
        return Err(shape_err(
            "conv2d",
            format!("kernels must be [O,C,kh,kw], got {:?}", kernels.shape()),
        ));
    };
    if kc != c {
        return Err(shape_err("conv2d", format!("input has {c} channels, kernels expect {kc}")));
    }
    if stride == 0 {
        return Err(Error::Invalid("conv2d stride must be ≥ 1".into()));
    }
    if h + 2 * padding < kh || w + 2 * padding < kw {
        return Err(shape_err(
            "conv2d",
            format!("kernel {kh}×{kw} exceeds padded input {}×{}", h + 2 * padding, w + 2 * padding),
        ));
    }
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let dims = ConvDims { c, h, w, kh, kw, stride, pad: padding, oh, ow };

    let cols = im2col(input.data(), dims);
    let ckk = c * kh * kw;
    let data = mm(kernels.data(), &cols, o, ckk, oh * ow);

    let (ic, kcl) = (input.clone(), kernels.clone());
    record("conv2d", &[input, kernels], data, vec![o, oh, ow], move |g| {
        // Recompute the column matrix rather than holding it for the whole
        // life of the graph.
        let cols = im2col(ic.data(), dims);
        let gk = mm_nt(g, &cols, o, oh * ow, ckk);
        let gcols = mm_tn(kcl.data(), g, o, ckk, oh * ow);
        let gin = col2im(&gcols, dims);
        vec![Some(gin), Some(gk)]
    })
}

// ── Normalization ────────────────────────────────────────────────────

/// Row-wise layer normalization of [L,D] with learned gain/shift of width D.
pub fn layer_norm(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    check_same_dtype("layer_norm", x, gamma)?;
    check_same_dtype("layer_norm", x, beta)?;
    let [l, d] = *x.shape() else {
        return Err(shape_err("layer_norm", format!("expected [L,D], got {:?}", x.shape())));
    };
    if gamma.shape() != [d] || beta.shape() != [d] {
        return Err(shape_err(
            "layer_norm",
            format!("gain {:?} / shift {:?} vs width {d}", gamma.shape(), beta.shape()),
        ));
    }
    let src = x.data();
    let gm = gamma.data();
    let bt = beta.data();
    let mut data = vec![0.0; l * d];
    let mut normed = vec![0.0; l * d];
    let mut inv_std = vec![0.0; l];
    for r in 0..l {
        let row = &src[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + eps).sqrt();
        inv_std[r] = inv;
        for j in 0..d {
            let xh = (row[j] - mean) * inv;
            normed[r * d + j] = xh;
            data[r * d + j] = gm[j] * xh + bt[j];
        }
    }
    let gmc = gamma.clone();
    record("layer_norm", &[x, gamma, beta], data, vec![l, d], move |g| {
        let gm = gmc.data();
        let mut gx = vec![0.0; l * d];
        let mut ggamma = vec![0.0; d];
        let mut gbeta = vec![0.0; d];
        for r in 0..l {
            let inv = inv_std[r];
            let xh = &normed[r * d..(r + 1) * d];
            let grow = &g[r * d..(r + 1) * d];
            let mut m1 = 0.0;
            let mut m2 = 0.0;
            for j in 0..d {
                let dxh = grow[j] * gm[j];
                m1 += dxh;
                m2 += dxh * xh[j];
                ggamma[j] += grow[j] * xh[j];
                gbeta[j] += grow[j];
            }
            m1 /= d as f64;
            m2 /= d as f64;
            for j in 0..d {
                let dxh = grow[j] * gm[j];
                gx[r * d + j] = inv * (dxh - m1 - xh[j] * m2);
            }
        }
        vec![Some(gx), Some(ggamma), Some(gbeta)]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{backward, DType};

    fn t64(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::from_vec(data.to_vec(), shape, DType::F64).unwrap()
    }

    fn p64(data: &[f64], shape: &[usize]) -> Tensor {
        Tensor::param(data.to_vec(), shape, DType::F64).unwrap()
    }

    // ── matmul ───────────────────────────────────────────────────────

    #[test]
    fn matmul_identity_returns_lhs() {
        let a = t64(&[1.5, -2.0, 3.25, 0.5], &[2, 2]);
        let i = t64(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
        let c = matmul(&a, &i).unwrap();
        assert_eq!(c.data(), a.data());
    }

    #[test]
    fn matmul_hand_case() {
        let a = t64(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t64(&[5.0, 6.0], &[2, 1]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[17.0, 39.0]);
        assert_eq!(c.shape(), &[2, 1]);
    }

    #[test]
    fn matmul_zeros_annihilate() {
        let a = t64(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let z = Tensor::zeros(&[2, 3], DType::F64);
        let c = matmul(&a, &z).unwrap();
        assert!(c.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = t64(&[1.0, 2.0], &[1, 2]);
        let b = t64(&[1.0, 2.0, 3.0], &[3, 1]);
        assert!(matmul(&a, &b).is_err());
    }

    #[test]
    fn matmul_identity_associativity_bitwise() {
        let mut stream = crate::numcore::RngStream::new(11, "assoc");
        for _ in 0..10 {
            let a_data: Vec<f64> = (0..6).map(|_| stream.uniform_in(-2.0, 2.0)).collect();
            let b_data: Vec<f64> = (0..8).map(|_| stream.uniform_in(-2.0, 2.0)).collect();
            let a = t64(&a_data, &[3, 2]);
            let b = t64(&b_data, &[2, 4]);
            let i = t64(&[1.0, 0.0, 0.0, 1.0], &[2, 2]);
            let left = matmul(&matmul(&a, &i).unwrap(), &b).unwrap();
            let right = matmul(&a, &b).unwrap();
            assert_eq!(left.data(), right.data());
        }
    }

    // ── softmax ──────────────────────────────────────────────────────

    #[test]
    fn softmax_constant_is_uniform() {
        let x = t64(&[3.7, 3.7, 3.7], &[3]);
        let s = softmax(&x, 0).unwrap();
        for v in s.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_closed_form() {
        let x = t64(&[0.0, 2f64.ln()], &[2]);
        let s = softmax(&x, 0).unwrap();
        assert!((s.data()[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.data()[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_shift_invariant_and_normalized() {
        let x = t64(&[0.3, -1.2, 2.0, 0.0], &[4]);
        let shifted = t64(&[5.3, 3.8, 7.0, 5.0], &[4]);
        let a = softmax(&x, 0).unwrap();
        let b = softmax(&shifted, 0).unwrap();
        let sum: f64 = a.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rows_of_matrix() {
        let x = t64(&[0.0, 0.0, 10.0, 10.0], &[2, 2]);
        let s = softmax(&x, 1).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-12);
        assert!((s.data()[3] - 0.5).abs() < 1e-12);
    }

    // ── conv2d ───────────────────────────────────────────────────────

    #[test]
    fn conv2d_one_by_one_identity() {
        let x = t64(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 2]);
        let k = t64(&[1.0], &[1, 1, 1, 1]);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 2, 2]);
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_box_kernel_interior() {
        let x = Tensor::full(&[1, 5, 5], 1.0, DType::F64).unwrap();
        let k = Tensor::full(&[1, 1, 3, 3], 1.0, DType::F64).unwrap();
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        // interior of a constant-1 image under an all-ones 3×3 kernel
        assert_eq!(y.data()[4], 9.0);
    }

    #[test]
    fn conv2d_zero_kernels_zero_output() {
        let x = t64(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 2]);
        let k = Tensor::zeros(&[3, 1, 1, 1], DType::F64);
        let y = conv2d(&x, &k, 1, 0).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv2d_extent_underflow_errors() {
        let x = t64(&[1.0, 2.0, 3.0, 4.0], &[1, 2, 2]);
        let k = Tensor::zeros(&[1, 1, 5, 5], DType::F64);
        assert!(conv2d(&x, &k, 1, 0).is_err());
    }

    /// Direct-summation oracle for conv2d on a random case.
    #[test]
    fn conv2d_matches_direct_summation() {
        let mut stream = crate::numcore::RngStream::new(5, "conv-oracle");
        let (c, h, w, o, kh, kw, stride, pad) = (2, 6, 5, 3, 3, 2, 2, 1);
        let x_data: Vec<f64> = (0..c * h * w).map(|_| stream.uniform_in(-1.0, 1.0)).collect();
        let k_data: Vec<f64> = (0..o * c * kh * kw).map(|_| stream.uniform_in(-1.0, 1.0)).collect();
        let x = t64(&x_data, &[c, h, w]);
        let k = t64(&k_data, &[o, c, kh, kw]);
        let y = conv2d(&x, &k, stride, pad).unwrap();
        let (oh, ow) = ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1);
        assert_eq!(y.shape(), &[o, oh, ow]);
        for oc in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = 0.0;
                    for ci in 0..c {
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * stride + ki) as isize - pad as isize;
                                let ix = (ox * stride + kj) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                acc += x_data[ci * h * w + iy as usize * w + ix as usize]
                                    * k_data[((oc * c + ci) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    let got = y.data()[(oc * oh + oy) * ow + ox];
                    assert!((got - acc).abs() < 1e-12, "mismatch at {oc},{oy},{ox}");
                }
            }
        }
    }

    // ── linear ───────────────────────────────────────────────────────

    #[test]
    fn linear_identity() {
        let x = t64(&[1.0, -2.0, 3.0], &[3]);
        let w = t64(&[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0], &[3, 3]);
        let b = Tensor::zeros(&[3], DType::F64);
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn linear_scalar_case() {
        let y = linear(&t64(&[3.0], &[1]), &t64(&[2.0], &[1, 1]), &t64(&[1.0], &[1])).unwrap();
        assert_eq!(y.data(), &[7.0]);
    }

    #[test]
    fn linear_zero_input_gives_bias() {
        let x = Tensor::zeros(&[2], DType::F64);
        let w = t64(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[3, 2]);
        let b = t64(&[0.5, -0.5, 9.0], &[3]);
        let y = linear(&x, &w, &b).unwrap();
        assert_eq!(y.data(), b.data());
    }

    // ── relu / dropout ───────────────────────────────────────────────

    #[test]
    fn relu_cases() {
        let x = t64(&[-1.0, 0.0, 2.0], &[3]);
        let y = relu(&x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);
        let neg = t64(&[-3.0, -0.5], &[2]);
        assert!(relu(&neg).unwrap().data().iter().all(|&v| v == 0.0));
        let twice = relu(&relu(&x).unwrap()).unwrap();
        assert_eq!(twice.data(), y.data());
    }

    #[test]
    fn dropout_contract() {
        use crate::numcore::RngStream;
        let x = t64(&[1.0, 2.0, 3.0, 4.0], &[4]);
        let mut s = RngStream::new(1, "drop");
        let y = dropout(&x, 0.0, Mode::Train, &mut s).unwrap();
        assert_eq!(y.data(), x.data());
        let z = dropout(&x, 1.0, Mode::Train, &mut s).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));
        let e = dropout(&x, 0.73, Mode::Eval, &mut s).unwrap();
        assert_eq!(e.data(), x.data());
        assert!(dropout(&x, 1.5, Mode::Train, &mut s).is_err());
    }

    #[test]
    fn dropout_deterministic_and_inverted_scaled() {
        use crate::numcore::RngStream;
        let x = t64(&[1.0; 64], &[64]);
        let p = 0.25;
        let a = dropout(&x, p, Mode::Train, &mut RngStream::new(9, "m")).unwrap();
        let b = dropout(&x, p, Mode::Train, &mut RngStream::new(9, "m")).unwrap();
        assert_eq!(a.data(), b.data());
        for &v in a.data() {
            assert!(v == 0.0 || (v - 1.0 / (1.0 - p)).abs() < 1e-12);
        }
    }

    // ── backward basics ──────────────────────────────────────────────

    #[test]
    fn backward_linear_in_x() {
        let x = p64(&[5.0], &[1]);
        let loss = scale(&x, 2.0).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0]);
    }

    #[test]
    fn backward_unused_tensor_has_no_grad() {
        let x = p64(&[1.0, 2.0], &[2]);
        let y = p64(&[3.0], &[1]);
        let loss = scale(&y, 1.0).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad(), None);
        assert_eq!(x.grad_or_zeros(), vec![0.0, 0.0]);
    }

    #[test]
    fn backward_softmax_sum_is_zero_gradient() {
        let x = p64(&[0.2, -1.0, 3.0], &[3]);
        let loss = sum(&softmax(&x, 0).unwrap()).unwrap();
        backward(&loss).unwrap();
        for v in x.grad().unwrap() {
            assert_eq!(v, 0.0);
        }
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let x = p64(&[1.0, 2.0], &[2]);
        let y = relu(&x).unwrap();
        assert!(backward(&y).is_err());
    }

    #[test]
    fn backward_accumulates_fanout() {
        // loss = sum(x * x): grad = 2x via the two slots of mul
        let x = p64(&[1.0, -2.0, 3.0], &[3]);
        let loss = sum(&mul(&x, &x).unwrap()).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, -4.0, 6.0]);
    }

    #[test]
    fn concat_roundtrip_gradients() {
        let a = p64(&[1.0, 2.0], &[2]);
        let b = p64(&[3.0, 4.0, 5.0], &[3]);
        let c = concat(0, &[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
        let loss = sum(&mul(&c, &c).unwrap()).unwrap();
        backward(&loss).unwrap();
        assert_eq!(a.grad().unwrap(), vec![2.0, 4.0]);
        assert_eq!(b.grad().unwrap(), vec![6.0, 8.0, 10.0]);
    }

    #[test]
    fn concat_axis1_layout() {
        let a = t64(&[1.0, 2.0, 3.0, 4.0], &[2, 2]);
        let b = t64(&[9.0, 8.0], &[2, 1]);
        let c = concat(1, &[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 3]);
        assert_eq!(c.data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
    }

    #[test]
    fn determinism_same_dtype_bit_identical() {
        let mut s1 = crate::numcore::RngStream::new(42, "det");
        let mut s2 = crate::numcore::RngStream::new(42, "det");
        let run = |s: &mut crate::numcore::RngStream| {
            let x_data: Vec<f64> = (0..12).map(|_| s.uniform_in(-1.0, 1.0)).collect();
            let x = Tensor::from_vec(x_data, &[3, 4], DType::F32).unwrap();
            let y = softmax(&x, 1).unwrap();
            y.data().to_vec()
        };
        assert_eq!(run(&mut s1), run(&mut s2));
    }
}

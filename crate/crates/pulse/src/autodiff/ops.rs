//! Differentiable operations. Each op validates shapes, computes the
//! forward value eagerly, and registers a backward closure over its
//! parents.

use super::tensor::Tensor;
use crate::error::{PulseError, Result};

/// Padding convention for 1-d convolutions. Output length always equals
/// input length.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Padding {
    /// Pad symmetrically; the receptive field is centered on each output.
    SameCentered,
    /// Pad on the left only; outputs depend on past inputs.
    SameCausal,
}

fn check_same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(PulseError::Dimension(format!(
            "{op}: shape mismatch {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("add", a, b)?;
    let out: Vec<f64> = {
        let (da, db) = (a.inner.data.borrow(), b.inner.data.borrow());
        da.iter().zip(db.iter()).map(|(x, y)| x + y).collect()
    };
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            if pa.inner.needs_grad {
                pa.accumulate_grad(g);
            }
            if pb.inner.needs_grad {
                pb.accumulate_grad(g);
            }
        }),
    ))
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("sub", a, b)?;
    let out: Vec<f64> = {
        let (da, db) = (a.inner.data.borrow(), b.inner.data.borrow());
        da.iter().zip(db.iter()).map(|(x, y)| x - y).collect()
    };
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            if pa.inner.needs_grad {
                pa.accumulate_grad(g);
            }
            if pb.inner.needs_grad {
                let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                pb.accumulate_grad(&neg);
            }
        }),
    ))
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    check_same_shape("mul", a, b)?;
    let out: Vec<f64> = {
        let (da, db) = (a.inner.data.borrow(), b.inner.data.borrow());
        da.iter().zip(db.iter()).map(|(x, y)| x * y).collect()
    };
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            if pa.inner.needs_grad {
                let db = pb.inner.data.borrow();
                let ga: Vec<f64> = g.iter().zip(db.iter()).map(|(gv, y)| gv * y).collect();
                pa.accumulate_grad(&ga);
            }
            if pb.inner.needs_grad {
                let da = pa.inner.data.borrow();
                let gb: Vec<f64> = g.iter().zip(da.iter()).map(|(gv, x)| gv * x).collect();
                pb.accumulate_grad(&gb);
            }
        }),
    ))
}

pub fn scale(a: &Tensor, c: f64) -> Tensor {
    let out: Vec<f64> = a.inner.data.borrow().iter().map(|x| x * c).collect();
    let pa = a.clone();
    Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
            pa.accumulate_grad(&ga);
        }),
    )
}

pub fn add_scalar(a: &Tensor, c: f64) -> Tensor {
    let out: Vec<f64> = a.inner.data.borrow().iter().map(|x| x + c).collect();
    let pa = a.clone();
    Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        Box::new(move |g| pa.accumulate_grad(g)),
    )
}

fn unary<F, D>(a: &Tensor, f: F, df: D) -> Tensor
where
    F: Fn(f64) -> f64,
    D: Fn(f64) -> f64 + 'static,
{
    let input = a.data();
    let out: Vec<f64> = input.iter().map(|&x| f(x)).collect();
    let pa = a.clone();
    Tensor::from_op(
        a.shape().to_vec(),
        out,
        vec![a.clone()],
        Box::new(move |g| {
            let ga: Vec<f64> = g
                .iter()
                .zip(input.iter())
                .map(|(gv, &x)| gv * df(x))
                .collect();
            pa.accumulate_grad(&ga);
        }),
    )
}

pub fn tanh(a: &Tensor) -> Tensor {
    unary(a, f64::tanh, |x| {
        let t = x.tanh();
        1.0 - t * t
    })
}

pub fn sigmoid(a: &Tensor) -> Tensor {
    let s = |x: f64| 1.0 / (1.0 + (-x).exp());
    unary(a, s, move |x| {
        let v = s(x);
        v * (1.0 - v)
    })
}

/// Gaussian error linear unit, tanh form. Smooth everywhere, which keeps
/// finite-difference checks clean.
pub fn gelu(a: &Tensor) -> Tensor {
    const C: f64 = 0.7978845608028654; // sqrt(2/pi)
    const A: f64 = 0.044715;
    let f = |x: f64| 0.5 * x * (1.0 + (C * (x + A * x * x * x)).tanh());
    let df = |x: f64| {
        let u = C * (x + A * x * x * x);
        let t = u.tanh();
        0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * C * (1.0 + 3.0 * A * x * x)
    };
    unary(a, f, df)
}

pub fn sum_all(a: &Tensor) -> Tensor {
    let s: f64 = a.inner.data.borrow().iter().sum();
    let pa = a.clone();
    let n = a.len();
    Tensor::from_op(
        vec![1],
        vec![s],
        vec![a.clone()],
        Box::new(move |g| {
            let ga = vec![g[0]; n];
            pa.accumulate_grad(&ga);
        }),
    )
}

pub fn mean_all(a: &Tensor) -> Tensor {
    let n = a.len() as f64;
    scale(&sum_all(a), 1.0 / n)
}

/// Affine map over the trailing axis: `input [..., in] x weight [out, in]
/// + bias [out] -> [..., out]`.
pub fn linear(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let ws = weight.shape();
    if ws.len() != 2 {
        return Err(PulseError::Dimension(format!(
            "linear: weight must be rank 2, got {ws:?}"
        )));
    }
    let (out_dim, in_dim) = (ws[0], ws[1]);
    let xs = input.shape();
    if xs.is_empty() || *xs.last().unwrap() != in_dim {
        return Err(PulseError::Dimension(format!(
            "linear: input {:?} incompatible with weight {:?}",
            xs, ws
        )));
    }
    if bias.shape() != [out_dim] {
        return Err(PulseError::Dimension(format!(
            "linear: bias {:?} incompatible with weight {:?}",
            bias.shape(),
            ws
        )));
    }
    let rows = input.len() / in_dim;
    let mut out = vec![0.0; rows * out_dim];
    {
        let x = input.inner.data.borrow();
        let w = weight.inner.data.borrow();
        let b = bias.inner.data.borrow();
        for r in 0..rows {
            let xr = &x[r * in_dim..(r + 1) * in_dim];
            let or = &mut out[r * out_dim..(r + 1) * out_dim];
            for (o, orow) in or.iter_mut().enumerate() {
                let wr = &w[o * in_dim..(o + 1) * in_dim];
                let mut acc = b[o];
                for i in 0..in_dim {
                    acc += xr[i] * wr[i];
                }
                *orow = acc;
            }
        }
    }
    let mut out_shape = xs.to_vec();
    *out_shape.last_mut().unwrap() = out_dim;
    let (px, pw, pb) = (input.clone(), weight.clone(), bias.clone());
    Ok(Tensor::from_op(
        out_shape,
        out,
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(move |g| {
            if px.inner.needs_grad {
                let w = pw.inner.data.borrow();
                let mut gx = vec![0.0; rows * in_dim];
                for r in 0..rows {
                    let gr = &g[r * out_dim..(r + 1) * out_dim];
                    let gxr = &mut gx[r * in_dim..(r + 1) * in_dim];
                    for (o, &gv) in gr.iter().enumerate() {
                        let wr = &w[o * in_dim..(o + 1) * in_dim];
                        for i in 0..in_dim {
                            gxr[i] += gv * wr[i];
                        }
                    }
                }
                px.accumulate_grad(&gx);
            }
            if pw.inner.needs_grad {
                let x = px.inner.data.borrow();
                let mut gw = vec![0.0; out_dim * in_dim];
                for r in 0..rows {
                    let gr = &g[r * out_dim..(r + 1) * out_dim];
                    let xr = &x[r * in_dim..(r + 1) * in_dim];
                    for (o, &gv) in gr.iter().enumerate() {
                        let gwr = &mut gw[o * in_dim..(o + 1) * in_dim];
                        for i in 0..in_dim {
                            gwr[i] += gv * xr[i];
                        }
                    }
                }
                pw.accumulate_grad(&gw);
            }
            if pb.inner.needs_grad {
                let mut gb = vec![0.0; out_dim];
                for r in 0..rows {
                    let gr = &g[r * out_dim..(r + 1) * out_dim];
                    for (o, &gv) in gr.iter().enumerate() {
                        gb[o] += gv;
                    }
                }
                pb.accumulate_grad(&gb);
            }
        }),
    ))
}

/// Dilated 1-d convolution: `input [batch, in_ch, time] * kernel
/// [out_ch, in_ch, k] -> [batch, out_ch, time]`. Time length is preserved
/// by zero padding per `padding`; the receptive field per output is
/// `1 + dilation * (k - 1)`.
pub fn conv1d(input: &Tensor, kernel: &Tensor, dilation: usize, padding: Padding) -> Result<Tensor> {
    if dilation < 1 {
        return Err(PulseError::Parameter("conv1d: dilation must be >= 1".into()));
    }
    let xs = input.shape();
    let ks = kernel.shape();
    if xs.len() != 3 || ks.len() != 3 {
        return Err(PulseError::Dimension(format!(
            "conv1d: expected rank-3 input and kernel, got {:?} and {:?}",
            xs, ks
        )));
    }
    let (batch, in_ch, time) = (xs[0], xs[1], xs[2]);
    let (out_ch, k_in, k) = (ks[0], ks[1], ks[2]);
    if k_in != in_ch {
        return Err(PulseError::Dimension(format!(
            "conv1d: kernel expects {} input channels, input has {}",
            k_in, in_ch
        )));
    }
    let span = dilation * (k - 1);
    let pad_left = match padding {
        Padding::SameCentered => span / 2,
        Padding::SameCausal => span,
    };
    let mut out = vec![0.0; batch * out_ch * time];
    {
        let x = input.inner.data.borrow();
        let w = kernel.inner.data.borrow();
        for bi in 0..batch {
            for oi in 0..out_ch {
                let orow = &mut out[(bi * out_ch + oi) * time..(bi * out_ch + oi + 1) * time];
                for ci in 0..in_ch {
                    let xrow = &x[(bi * in_ch + ci) * time..(bi * in_ch + ci + 1) * time];
                    let wrow = &w[(oi * in_ch + ci) * k..(oi * in_ch + ci + 1) * k];
                    for (ki, &wv) in wrow.iter().enumerate() {
                        let off = ki * dilation;
                        // ti + off - pad_left in [0, time)
                        let t_lo = pad_left.saturating_sub(off);
                        let t_hi = (time + pad_left).saturating_sub(off).min(time);
                        for ti in t_lo..t_hi {
                            orow[ti] += xrow[ti + off - pad_left] * wv;
                        }
                    }
                }
            }
        }
    }
    let (px, pw) = (input.clone(), kernel.clone());
    Ok(Tensor::from_op(
        vec![batch, out_ch, time],
        out,
        vec![input.clone(), kernel.clone()],
        Box::new(move |g| {
            if px.inner.needs_grad {
                let w = pw.inner.data.borrow();
                let mut gx = vec![0.0; batch * in_ch * time];
                for bi in 0..batch {
                    for oi in 0..out_ch {
                        let grow = &g[(bi * out_ch + oi) * time..(bi * out_ch + oi + 1) * time];
                        for ci in 0..in_ch {
                            let gxrow =
                                &mut gx[(bi * in_ch + ci) * time..(bi * in_ch + ci + 1) * time];
                            let wrow = &w[(oi * in_ch + ci) * k..(oi * in_ch + ci + 1) * k];
                            for (ki, &wv) in wrow.iter().enumerate() {
                                let off = ki * dilation;
                                let t_lo = pad_left.saturating_sub(off);
                                let t_hi = (time + pad_left).saturating_sub(off).min(time);
                                for ti in t_lo..t_hi {
                                    gxrow[ti + off - pad_left] += grow[ti] * wv;
                                }
                            }
                        }
                    }
                }
                px.accumulate_grad(&gx);
            }
            if pw.inner.needs_grad {
                let x = px.inner.data.borrow();
                let mut gw = vec![0.0; out_ch * in_ch * k];
                for bi in 0..batch {
                    for oi in 0..out_ch {
                        let grow = &g[(bi * out_ch + oi) * time..(bi * out_ch + oi + 1) * time];
                        for ci in 0..in_ch {
                            let xrow = &x[(bi * in_ch + ci) * time..(bi * in_ch + ci + 1) * time];
                            let gwrow =
                                &mut gw[(oi * in_ch + ci) * k..(oi * in_ch + ci + 1) * k];
                            for (ki, gwv) in gwrow.iter_mut().enumerate() {
                                let off = ki * dilation;
                                let t_lo = pad_left.saturating_sub(off);
                                let t_hi = (time + pad_left).saturating_sub(off).min(time);
                                let mut acc = 0.0;
                                for ti in t_lo..t_hi {
                                    acc += grow[ti] * xrow[ti + off - pad_left];
                                }
                                *gwv += acc;
                            }
                        }
                    }
                }
                pw.accumulate_grad(&gw);
            }
        }),
    ))
}

/// Add a per-channel bias to a `[batch, ch, time]` tensor.
pub fn bias_channels(input: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let xs = input.shape();
    if xs.len() != 3 || bias.shape() != [xs[1]] {
        return Err(PulseError::Dimension(format!(
            "bias_channels: input {:?} vs bias {:?}",
            xs,
            bias.shape()
        )));
    }
    let (batch, ch, time) = (xs[0], xs[1], xs[2]);
    let mut out = input.data();
    {
        let b = bias.inner.data.borrow();
        for bi in 0..batch {
            for ci in 0..ch {
                for v in &mut out[(bi * ch + ci) * time..(bi * ch + ci + 1) * time] {
                    *v += b[ci];
                }
            }
        }
    }
    let (px, pb) = (input.clone(), bias.clone());
    Ok(Tensor::from_op(
        xs.to_vec(),
        out,
        vec![input.clone(), bias.clone()],
        Box::new(move |g| {
            if px.inner.needs_grad {
                px.accumulate_grad(g);
            }
            if pb.inner.needs_grad {
                let mut gb = vec![0.0; ch];
                for bi in 0..batch {
                    for ci in 0..ch {
                        let row = &g[(bi * ch + ci) * time..(bi * ch + ci + 1) * time];
                        gb[ci] += row.iter().sum::<f64>();
                    }
                }
                pb.accumulate_grad(&gb);
            }
        }),
    ))
}

/// Per-feature maximum over the time axis: `[batch, feat, time] ->
/// [batch, feat]`. The gradient routes to the first maximal index.
pub fn max_pool_time(input: &Tensor) -> Result<Tensor> {
    let xs = input.shape();
    if xs.len() != 3 {
        return Err(PulseError::Dimension(format!(
            "max_pool_time: expected rank 3, got {:?}",
            xs
        )));
    }
    let (batch, feat, time) = (xs[0], xs[1], xs[2]);
    if time == 0 {
        return Err(PulseError::Dimension("max_pool_time: empty time axis".into()));
    }
    let mut out = vec![0.0; batch * feat];
    let mut argmax = vec![0usize; batch * feat];
    {
        let x = input.inner.data.borrow();
        for r in 0..batch * feat {
            let row = &x[r * time..(r + 1) * time];
            let (mut best_i, mut best_v) = (0usize, row[0]);
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > best_v {
                    best_v = v;
                    best_i = i;
                }
            }
            out[r] = best_v;
            argmax[r] = best_i;
        }
    }
    let px = input.clone();
    Ok(Tensor::from_op(
        vec![batch, feat],
        out,
        vec![input.clone()],
        Box::new(move |g| {
            let mut gx = vec![0.0; batch * feat * time];
            for r in 0..batch * feat {
                gx[r * time + argmax[r]] += g[r];
            }
            px.accumulate_grad(&gx);
        }),
    ))
}

/// Partition the time axis into `segments` near-equal contiguous bins,
/// take each bin's max, and write it back to every position of the bin.
/// Output is piecewise-constant with the input's shape.
pub fn adaptive_max_pool_assign(input: &Tensor, segments: usize) -> Result<Tensor> {
    if segments < 1 {
        return Err(PulseError::Parameter(
            "adaptive_max_pool_assign: segments must be >= 1".into(),
        ));
    }
    let xs = input.shape();
    if xs.len() != 3 {
        return Err(PulseError::Dimension(format!(
            "adaptive_max_pool_assign: expected rank 3, got {:?}",
            xs
        )));
    }
    let (batch, feat, time) = (xs[0], xs[1], xs[2]);
    if segments > time {
        return Err(PulseError::Parameter(format!(
            "adaptive_max_pool_assign: segments {} exceeds time {}",
            segments, time
        )));
    }
    let bin = move |i: usize| -> (usize, usize) { (i * time / segments, (i + 1) * time / segments) };
    let mut out = vec![0.0; batch * feat * time];
    // argmax per (row, bin), first occurrence on ties
    let mut argmax = vec![0usize; batch * feat * segments];
    {
        let x = input.inner.data.borrow();
        for r in 0..batch * feat {
            let row = &x[r * time..(r + 1) * time];
            let orow = &mut out[r * time..(r + 1) * time];
            for s in 0..segments {
                let (lo, hi) = bin(s);
                let (mut best_i, mut best_v) = (lo, row[lo]);
                for (i, &v) in row.iter().enumerate().take(hi).skip(lo + 1) {
                    if v > best_v {
                        best_v = v;
                        best_i = i;
                    }
                }
                argmax[r * segments + s] = best_i;
                for o in &mut orow[lo..hi] {
                    *o = best_v;
                }
            }
        }
    }
    let px = input.clone();
    Ok(Tensor::from_op(
        xs.to_vec(),
        out,
        vec![input.clone()],
        Box::new(move |g| {
            let mut gx = vec![0.0; batch * feat * time];
            for r in 0..batch * feat {
                let grow = &g[r * time..(r + 1) * time];
                for s in 0..segments {
                    let (lo, hi) = bin(s);
                    let total: f64 = grow[lo..hi].iter().sum();
                    gx[r * time + argmax[r * segments + s]] += total;
                }
            }
            px.accumulate_grad(&gx);
        }),
    ))
}

/// Contiguous slice along the time axis of a `[batch, ch, time]` tensor.
pub fn slice_time(input: &Tensor, start: usize, len: usize) -> Result<Tensor> {
    let xs = input.shape();
    if xs.len() != 3 {
        return Err(PulseError::Dimension(format!(
            "slice_time: expected rank 3, got {:?}",
            xs
        )));
    }
    let (batch, ch, time) = (xs[0], xs[1], xs[2]);
    if start + len > time {
        return Err(PulseError::Dimension(format!(
            "slice_time: [{start}, {}) out of range for time {time}",
            start + len
        )));
    }
    let mut out = vec![0.0; batch * ch * len];
    {
        let x = input.inner.data.borrow();
        for r in 0..batch * ch {
            out[r * len..(r + 1) * len]
                .copy_from_slice(&x[r * time + start..r * time + start + len]);
        }
    }
    let px = input.clone();
    Ok(Tensor::from_op(
        vec![batch, ch, len],
        out,
        vec![input.clone()],
        Box::new(move |g| {
            let mut gx = vec![0.0; batch * ch * time];
            for r in 0..batch * ch {
                gx[r * time + start..r * time + start + len]
                    .copy_from_slice(&g[r * len..(r + 1) * len]);
            }
            px.accumulate_grad(&gx);
        }),
    ))
}

/// Select one time index: `[batch, ch, time] -> [batch, ch]`.
pub fn index_time(input: &Tensor, index: usize) -> Result<Tensor> {
    let xs = input.shape();
    if xs.len() != 3 {
        return Err(PulseError::Dimension(format!(
            "index_time: expected rank 3, got {:?}",
            xs
        )));
    }
    let (batch, ch, time) = (xs[0], xs[1], xs[2]);
    if index >= time {
        return Err(PulseError::Dimension(format!(
            "index_time: index {index} out of range for time {time}"
        )));
    }
    let mut out = vec![0.0; batch * ch];
    {
        let x = input.inner.data.borrow();
        for r in 0..batch * ch {
            out[r] = x[r * time + index];
        }
    }
    let px = input.clone();
    Ok(Tensor::from_op(
        vec![batch, ch],
        out,
        vec![input.clone()],
        Box::new(move |g| {
            let mut gx = vec![0.0; batch * ch * time];
            for r in 0..batch * ch {
                gx[r * time + index] = g[r];
            }
            px.accumulate_grad(&gx);
        }),
    ))
}

/// Repeat a `[batch, ch]` tensor along a new trailing time axis.
pub fn broadcast_time(input: &Tensor, time: usize) -> Result<Tensor> {
    let xs = input.shape();
    if xs.len() != 2 {
        return Err(PulseError::Dimension(format!(
            "broadcast_time: expected rank 2, got {:?}",
            xs
        )));
    }
    let (batch, ch) = (xs[0], xs[1]);
    let mut out = vec![0.0; batch * ch * time];
    {
        let x = input.inner.data.borrow();
        for r in 0..batch * ch {
            for t in 0..time {
                out[r * time + t] = x[r];
            }
        }
    }
    let px = input.clone();
    Ok(Tensor::from_op(
        vec![batch, ch, time],
        out,
        vec![input.clone()],
        Box::new(move |g| {
            let mut gx = vec![0.0; batch * ch];
            for r in 0..batch * ch {
                gx[r] = g[r * time..(r + 1) * time].iter().sum();
            }
            px.accumulate_grad(&gx);
        }),
    ))
}

/// Concatenate two `[batch, ch, time]` tensors along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[2] {
        return Err(PulseError::Dimension(format!(
            "concat_channels: incompatible shapes {:?} and {:?}",
            sa, sb
        )));
    }
    let (batch, ca, cb, time) = (sa[0], sa[1], sb[1], sa[2]);
    let ch = ca + cb;
    let mut out = vec![0.0; batch * ch * time];
    {
        let (da, db) = (a.inner.data.borrow(), b.inner.data.borrow());
        for bi in 0..batch {
            out[bi * ch * time..bi * ch * time + ca * time]
                .copy_from_slice(&da[bi * ca * time..(bi + 1) * ca * time]);
            out[bi * ch * time + ca * time..(bi + 1) * ch * time]
                .copy_from_slice(&db[bi * cb * time..(bi + 1) * cb * time]);
        }
    }
    let (pa, pb) = (a.clone(), b.clone());
    Ok(Tensor::from_op(
        vec![batch, ch, time],
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g| {
            if pa.inner.needs_grad {
                let mut ga = vec![0.0; batch * ca * time];
                for bi in 0..batch {
                    ga[bi * ca * time..(bi + 1) * ca * time]
                        .copy_from_slice(&g[bi * ch * time..bi * ch * time + ca * time]);
                }
                pa.accumulate_grad(&ga);
            }
            if pb.inner.needs_grad {
                let mut gb = vec![0.0; batch * cb * time];
                for bi in 0..batch {
                    gb[bi * cb * time..(bi + 1) * cb * time]
                        .copy_from_slice(&g[bi * ch * time + ca * time..(bi + 1) * ch * time]);
                }
                pb.accumulate_grad(&gb);
            }
        }),
    ))
}

/// Stack `[batch, ch]` steps into `[batch, ch, L]`.
pub fn stack_time(steps: &[Tensor]) -> Result<Tensor> {
    if steps.is_empty() {
        return Err(PulseError::Contract("stack_time: no steps".into()));
    }
    let s0 = steps[0].shape().to_vec();
    if s0.len() != 2 {
        return Err(PulseError::Dimension(format!(
            "stack_time: expected rank-2 steps, got {:?}",
            s0
        )));
    }
    for s in steps {
        check_same_shape("stack_time", &steps[0], s)?;
    }
    let (batch, ch, len) = (s0[0], s0[1], steps.len());
    let mut out = vec![0.0; batch * ch * len];
    for (t, s) in steps.iter().enumerate() {
        let d = s.inner.data.borrow();
        for r in 0..batch * ch {
            out[r * len + t] = d[r];
        }
    }
    let parents: Vec<Tensor> = steps.to_vec();
    let captured = parents.clone();
    Ok(Tensor::from_op(
        vec![batch, ch, len],
        out,
        parents,
        Box::new(move |g| {
            for (t, p) in captured.iter().enumerate() {
                if !p.inner.needs_grad {
                    continue;
                }
                let mut gp = vec![0.0; batch * ch];
                for r in 0..batch * ch {
                    gp[r] = g[r * len + t];
                }
                p.accumulate_grad(&gp);
            }
        }),
    ))
}

/// Swap the last two axes of a rank-3 tensor: `[b, a, c] -> [b, c, a]`.
pub fn transpose12(input: &Tensor) -> Result<Tensor> {
    let xs = input.shape();
    if xs.len() != 3 {
        return Err(PulseError::Dimension(format!(
            "transpose12: expected rank 3, got {:?}",
            xs
        )));
    }
    let (batch, a, c) = (xs[0], xs[1], xs[2]);
    let mut out = vec![0.0; batch * a * c];
    {
        let x = input.inner.data.borrow();
        for bi in 0..batch {
            for ai in 0..a {
                for ci in 0..c {
                    out[bi * a * c + ci * a + ai] = x[bi * a * c + ai * c + ci];
                }
            }
        }
    }
    let px = input.clone();
    Ok(Tensor::from_op(
        vec![batch, c, a],
        out,
        vec![input.clone()],
        Box::new(move |g| {
            let mut gx = vec![0.0; batch * a * c];
            for bi in 0..batch {
                for ai in 0..a {
                    for ci in 0..c {
                        gx[bi * a * c + ai * c + ci] = g[bi * a * c + ci * a + ai];
                    }
                }
            }
            px.accumulate_grad(&gx);
        }),
    ))
}

/// Parameters of a gated recurrent unit cell.
pub struct GruParams {
    pub w_ir: Tensor,
    pub w_iz: Tensor,
    pub w_in: Tensor,
    pub w_hr: Tensor,
    pub w_hz: Tensor,
    pub w_hn: Tensor,
    pub b_ir: Tensor,
    pub b_iz: Tensor,
    pub b_in: Tensor,
    pub b_hr: Tensor,
    pub b_hz: Tensor,
    pub b_hn: Tensor,
}

impl GruParams {
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        vec![
            ("w_ir", &self.w_ir),
            ("w_iz", &self.w_iz),
            ("w_in", &self.w_in),
            ("w_hr", &self.w_hr),
            ("w_hz", &self.w_hz),
            ("w_hn", &self.w_hn),
            ("b_ir", &self.b_ir),
            ("b_iz", &self.b_iz),
            ("b_in", &self.b_in),
            ("b_hr", &self.b_hr),
            ("b_hz", &self.b_hz),
            ("b_hn", &self.b_hn),
        ]
    }
}

/// One gated-recurrent-unit update:
/// r = sigmoid(W_ir x + b_ir + W_hr h + b_hr)
/// z = sigmoid(W_iz x + b_iz + W_hz h + b_hz)
/// n = tanh(W_in x + b_in + r * (W_hn h + b_hn))
/// h' = (1 - z) * n + z * h
pub fn gru_cell(input: &Tensor, hidden: &Tensor, p: &GruParams) -> Result<Tensor> {
    let r = sigmoid(&add(
        &linear(input, &p.w_ir, &p.b_ir)?,
        &linear(hidden, &p.w_hr, &p.b_hr)?,
    )?);
    let z = sigmoid(&add(
        &linear(input, &p.w_iz, &p.b_iz)?,
        &linear(hidden, &p.w_hz, &p.b_hz)?,
    )?);
    let n = tanh(&add(
        &linear(input, &p.w_in, &p.b_in)?,
        &mul(&r, &linear(hidden, &p.w_hn, &p.b_hn)?)?,
    )?);
    // (1 - z) * n + z * h
    let one_minus_z = add_scalar(&scale(&z, -1.0), 1.0);
    let out = add(&mul(&one_minus_z, &n)?, &mul(&z, hidden)?)?;
    if !out.all_finite() {
        return Err(PulseError::Overflow("gru_cell produced non-finite values".into()));
    }
    Ok(out)
}

/// Mean over batch and time of the per-step squared error (summed over
/// channels): inputs are `[batch, time, ch]`.
pub fn mse_time_mean(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    check_same_shape("mse_time_mean", pred, target)?;
    let xs = pred.shape();
    if xs.len() != 3 {
        return Err(PulseError::Dimension(format!(
            "mse_time_mean: expected rank 3, got {:?}",
            xs
        )));
    }
    let denom = (xs[0] * xs[1]) as f64;
    let d = sub(pred, target)?;
    Ok(scale(&sum_all(&mul(&d, &d)?), 1.0 / denom))
}

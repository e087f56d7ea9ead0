//! Forward and backward implementations of the network's operations.
//!
//! Convolution runs as strip-tiled im2col plus GEMM; everything else is
//! straightforward elementwise or window code. Parallel sections only ever
//! write disjoint output regions and all floating-point reductions run in a
//! fixed order, so results are bit-identical across runs regardless of
//! thread scheduling.

use rayon::prelude::*;

use super::{shape_err, Element, Tensor, TensorError};

/// Probabilities entering the BCE logs are clamped to
/// `[BCE_CLAMP, 1 - BCE_CLAMP]`.
pub const BCE_CLAMP: f64 = 1e-7;

/// 3x3 cross-correlation, stride 1, zero padding 1; spatial dims are
/// preserved. `input` is `[B, Cin, H, W]`, `weight` `[Cout, Cin, 3, 3]`,
/// `bias` `[Cout]`.
pub fn conv2d<E: Element>(
    input: &Tensor<E>,
    weight: &Tensor<E>,
    bias: &Tensor<E>,
) -> Result<Tensor<E>, TensorError> {
    let [b, cin, h, w] = dims4(input, "conv2d input")?;
    let [cout, wcin, kh, kw] = dims4(weight, "conv2d weight")?;
    if kh != 3 || kw != 3 {
        return shape_err(format!("conv2d kernel must be 3x3, got {kh}x{kw}"));
    }
    if wcin != cin {
        return shape_err(format!(
            "conv2d channel mismatch: input has {cin} channels, weight expects {wcin}"
        ));
    }
    if bias.shape() != [cout] {
        return shape_err(format!(
            "conv2d bias shape {:?} does not match {cout} output channels",
            bias.shape()
        ));
    }

    let mut out = vec![E::zero(); b * cout * h * w];
    let sample_in = cin * h * w;
    let sample_out = cout * h * w;
    let in_data = input.data();
    let w_data = weight.data();
    let b_data = bias.data();

    out.par_chunks_mut(sample_out).enumerate().for_each(|(bi, out_s)| {
        let in_s = &in_data[bi * sample_in..(bi + 1) * sample_in];
        conv_forward_sample(in_s, w_data, out_s, cin, cout, h, w);
        for (co, bias_v) in b_data.iter().enumerate() {
            for v in &mut out_s[co * h * w..(co + 1) * h * w] {
                *v += *bias_v;
            }
        }
    });

    Ok(Tensor::result(
        vec![b, cout, h, w],
        out,
        &[input, weight, bias],
        Some(Box::new(move |g, parents| {
            conv_backward(g, parents, b, cin, cout, h, w);
        })),
    ))
}

fn conv_backward<E: Element>(
    out_grad: &[E],
    parents: &[Tensor<E>],
    b: usize,
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) {
    let (input, weight, bias) = (&parents[0], &parents[1], &parents[2]);
    let sample_in = cin * h * w;
    let sample_out = cout * h * w;

    if bias.requires_grad() {
        bias.accumulate_grad(|gb| {
            for bi in 0..b {
                for co in 0..cout {
                    let plane = &out_grad[bi * sample_out + co * h * w..][..h * w];
                    let mut s = E::zero();
                    for v in plane {
                        s += *v;
                    }
                    gb[co] += s;
                }
            }
        });
    }

    if weight.requires_grad() {
        // per-sample partials computed in parallel, combined in index order
        let in_data = input.data();
        let partials: Vec<Vec<E>> = (0..b)
            .into_par_iter()
            .map(|bi| {
                let in_s = &in_data[bi * sample_in..(bi + 1) * sample_in];
                let g_s = &out_grad[bi * sample_out..(bi + 1) * sample_out];
                conv_weight_grad_sample(in_s, g_s, cin, cout, h, w)
            })
            .collect();
        weight.accumulate_grad(|gw| {
            for part in &partials {
                for (o, p) in gw.iter_mut().zip(part) {
                    *o += *p;
                }
            }
        });
    }

    if input.requires_grad() {
        let w_data = weight.data();
        input.accumulate_grad(|gi| {
            gi.par_chunks_mut(sample_in).enumerate().for_each(|(bi, gi_s)| {
                let g_s = &out_grad[bi * sample_out..(bi + 1) * sample_out];
                conv_input_grad_sample(&w_data, g_s, gi_s, cin, cout, h, w);
            });
        });
    }
}

/// Rows per im2col strip, sized to keep the column buffer around a few MB.
fn strip_rows(cin: usize, w: usize, h: usize) -> usize {
    let budget = 1_500_000usize;
    (budget / (cin * 9 * w)).clamp(1, h)
}

/// Fills `cols` (`cin*9` x `rows*w`, row-major) for output rows `[y0, y1)`.
fn im2col_strip<E: Element>(
    in_s: &[E],
    cols: &mut [E],
    cin: usize,
    h: usize,
    w: usize,
    y0: usize,
    y1: usize,
) {
    let n = (y1 - y0) * w;
    for ci in 0..cin {
        let plane = &in_s[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let k = (ci * 9 + ky * 3 + kx) * n;
                let row = &mut cols[k..k + n];
                for y in y0..y1 {
                    let dst = &mut row[(y - y0) * w..(y - y0 + 1) * w];
                    let iy = y as isize + ky as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        dst.fill(E::zero());
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    match kx {
                        0 => {
                            dst[0] = E::zero();
                            dst[1..].copy_from_slice(&src[..w - 1]);
                        }
                        1 => dst.copy_from_slice(src),
                        _ => {
                            dst[w - 1] = E::zero();
                            dst[..w - 1].copy_from_slice(&src[1..]);
                        }
                    }
                }
            }
        }
    }
}

fn conv_forward_sample<E: Element>(
    in_s: &[E],
    w_data: &[E],
    out_s: &mut [E],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) {
    let k = cin * 9;
    let rows = strip_rows(cin, w, h);
    let mut cols = vec![E::zero(); k * rows * w];
    let mut y0 = 0;
    while y0 < h {
        let y1 = (y0 + rows).min(h);
        let n = (y1 - y0) * w;
        im2col_strip(in_s, &mut cols, cin, h, w, y0, y1);
        // out[co][y0*w..y1*w] = W (cout x k) * cols (k x n)
        unsafe {
            E::gemm(
                cout,
                k,
                n,
                E::one(),
                w_data.as_ptr(),
                k as isize,
                1,
                cols.as_ptr(),
                n as isize,
                1,
                E::zero(),
                out_s.as_mut_ptr().add(y0 * w),
                (h * w) as isize,
                1,
            );
        }
        y0 = y1;
    }
}

fn conv_weight_grad_sample<E: Element>(
    in_s: &[E],
    g_s: &[E],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) -> Vec<E> {
    let k = cin * 9;
    let rows = strip_rows(cin, w, h);
    let mut cols = vec![E::zero(); k * rows * w];
    let mut gw = vec![E::zero(); cout * k];
    let mut y0 = 0;
    while y0 < h {
        let y1 = (y0 + rows).min(h);
        let n = (y1 - y0) * w;
        im2col_strip(in_s, &mut cols, cin, h, w, y0, y1);
        // gw (cout x k) += gOut (cout x n) * cols^T (n x k)
        unsafe {
            E::gemm(
                cout,
                n,
                k,
                E::one(),
                g_s.as_ptr().add(y0 * w),
                (h * w) as isize,
                1,
                cols.as_ptr(),
                1,
                n as isize,
                E::one(),
                gw.as_mut_ptr(),
                k as isize,
                1,
            );
        }
        y0 = y1;
    }
    gw
}

fn conv_input_grad_sample<E: Element>(
    w_data: &[E],
    g_s: &[E],
    gi_s: &mut [E],
    cin: usize,
    cout: usize,
    h: usize,
    w: usize,
) {
    let k = cin * 9;
    let rows = strip_rows(cin, w, h);
    let mut dcols = vec![E::zero(); k * rows * w];
    let mut y0 = 0;
    while y0 < h {
        let y1 = (y0 + rows).min(h);
        let n = (y1 - y0) * w;
        // dcols (k x n) = W^T (k x cout) * gOut (cout x n)
        unsafe {
            E::gemm(
                k,
                cout,
                n,
                E::one(),
                w_data.as_ptr(),
                1,
                k as isize,
                g_s.as_ptr().add(y0 * w),
                (h * w) as isize,
                1,
                E::zero(),
                dcols.as_mut_ptr(),
                n as isize,
                1,
            );
        }
        // col2im scatter-add
        for ci in 0..cin {
            let plane = &mut gi_s[ci * h * w..(ci + 1) * h * w];
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = &dcols[(ci * 9 + ky * 3 + kx) * n..][..n];
                    for y in y0..y1 {
                        let iy = y as isize + ky as isize - 1;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = &row[(y - y0) * w..(y - y0 + 1) * w];
                        let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        match kx {
                            0 => {
                                for x in 1..w {
                                    dst[x - 1] += src[x];
                                }
                            }
                            1 => {
                                for x in 0..w {
                                    dst[x] += src[x];
                                }
                            }
                            _ => {
                                for x in 0..w - 1 {
                                    dst[x + 1] += src[x];
                                }
                            }
                        }
                    }
                }
            }
        }
        y0 = y1;
    }
}

/// Group normalization over `[B, C, H, W]`: per (batch, group) the input is
/// standardized with the biased variance, then scaled and shifted per
/// channel.
pub fn group_norm<E: Element>(
    input: &Tensor<E>,
    num_groups: usize,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: E,
) -> Result<Tensor<E>, TensorError> {
    let [b, c, h, w] = dims4(input, "group_norm input")?;
    if num_groups == 0 || c % num_groups != 0 {
        return shape_err(format!(
            "group_norm: {c} channels not divisible by {num_groups} groups"
        ));
    }
    if gamma.shape() != [c] || beta.shape() != [c] {
        return shape_err(format!(
            "group_norm: gamma/beta must have shape [{c}], got {:?}/{:?}",
            gamma.shape(),
            beta.shape()
        ));
    }
    if eps <= E::zero() {
        return shape_err("group_norm: eps must be positive".to_string());
    }

    let cg = c / num_groups;
    let m = cg * h * w;
    let in_data = input.data();
    let ga = gamma.data();
    let be = beta.data();

    let mut out = vec![E::zero(); in_data.len()];
    let mut stats = vec![(E::zero(), E::zero()); b * num_groups]; // (mean, invstd)
    let group_chunks: Vec<(&[E], &mut [E], &mut (E, E), usize)> = {
        let mut pairs = Vec::with_capacity(b * num_groups);
        let mut out_rest = out.as_mut_slice();
        let mut stat_rest = stats.as_mut_slice();
        for bi in 0..b {
            for g in 0..num_groups {
                let (o, rest) = out_rest.split_at_mut(m);
                out_rest = rest;
                let (s, srest) = stat_rest.split_at_mut(1);
                stat_rest = srest;
                let start = bi * c * h * w + g * m;
                pairs.push((&in_data[start..start + m], o, &mut s[0], g));
            }
        }
        pairs
    };
    group_chunks.into_par_iter().for_each(|(x, o, stat, g)| {
        let mut mean = E::zero();
        for v in x {
            mean += *v;
        }
        mean /= E::from_f64(m as f64);
        let mut var = E::zero();
        for v in x {
            let d = *v - mean;
            var += d * d;
        }
        var /= E::from_f64(m as f64);
        let invstd = (var + eps).sqrt().recip();
        *stat = (mean, invstd);
        for (ci, (ov, xv)) in o.chunks_mut(h * w).zip(x.chunks(h * w)).enumerate() {
            let ch = g * cg + ci;
            let (gam, bet) = (ga[ch], be[ch]);
            for (out_v, in_v) in ov.iter_mut().zip(xv) {
                *out_v = gam * (*in_v - mean) * invstd + bet;
            }
        }
    });

    Ok(Tensor::result(
        vec![b, c, h, w],
        out,
        &[input, gamma, beta],
        Some(Box::new(move |g, parents| {
            group_norm_backward(g, parents, b, c, h, w, num_groups, &stats);
        })),
    ))
}

fn group_norm_backward<E: Element>(
    out_grad: &[E],
    parents: &[Tensor<E>],
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    num_groups: usize,
    stats: &[(E, E)],
) {
    let (input, gamma, beta) = (&parents[0], &parents[1], &parents[2]);
    let cg = c / num_groups;
    let m = cg * h * w;
    let hw = h * w;
    let in_data = input.data();
    let ga = gamma.data();
    let m_e = E::from_f64(m as f64);

    if gamma.requires_grad() || beta.requires_grad() {
        let mut dgamma = vec![E::zero(); c];
        let mut dbeta = vec![E::zero(); c];
        for bi in 0..b {
            for ch in 0..c {
                let (mean, invstd) = stats[bi * num_groups + ch / cg];
                let base = bi * c * hw + ch * hw;
                let mut sg = E::zero();
                let mut sb = E::zero();
                for i in 0..hw {
                    let xhat = (in_data[base + i] - mean) * invstd;
                    sg += out_grad[base + i] * xhat;
                    sb += out_grad[base + i];
                }
                dgamma[ch] += sg;
                dbeta[ch] += sb;
            }
        }
        if gamma.requires_grad() {
            gamma.accumulate_grad(|g| {
                for (o, v) in g.iter_mut().zip(&dgamma) {
                    *o += *v;
                }
            });
        }
        if beta.requires_grad() {
            beta.accumulate_grad(|g| {
                for (o, v) in g.iter_mut().zip(&dbeta) {
                    *o += *v;
                }
            });
        }
    }

    if input.requires_grad() {
        input.accumulate_grad(|gi| {
            gi.par_chunks_mut(m).enumerate().for_each(|(idx, gi_g)| {
                let bi = idx / num_groups;
                let g = idx % num_groups;
                let (mean, invstd) = stats[idx];
                let base = bi * c * hw + g * m;
                let x = &in_data[base..base + m];
                let dy = &out_grad[base..base + m];
                // s1 = sum(gamma*dy), s2 = sum(gamma*dy*xhat)
                let mut s1 = E::zero();
                let mut s2 = E::zero();
                for i in 0..m {
                    let gam = ga[g * cg + i / hw];
                    let gd = gam * dy[i];
                    s1 += gd;
                    s2 += gd * (x[i] - mean) * invstd;
                }
                let s1m = s1 / m_e;
                let s2m = s2 / m_e;
                for i in 0..m {
                    let gam = ga[g * cg + i / hw];
                    let xhat = (x[i] - mean) * invstd;
                    gi_g[i] += invstd * (gam * dy[i] - s1m - xhat * s2m);
                }
            });
        });
    }
}

/// Elementwise `max(0, x)`.
pub fn relu<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    let out: Vec<E> = input
        .data()
        .iter()
        .map(|&v| if v > E::zero() { v } else { E::zero() })
        .collect();
    Tensor::result(
        input.shape().to_vec(),
        out,
        &[input],
        Some(Box::new(|g, parents| {
            let x = parents[0].data();
            let g = g.to_vec();
            parents[0].accumulate_grad(|gi| {
                for i in 0..gi.len() {
                    if x[i] > E::zero() {
                        gi[i] += g[i];
                    }
                }
            });
        })),
    )
}

/// Elementwise logistic function; output is strictly inside (0, 1).
pub fn sigmoid<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    let out: Vec<E> = input
        .data()
        .iter()
        .map(|&v| E::one() / (E::one() + (-v).exp()))
        .collect();
    let saved = out.clone();
    Tensor::result(
        input.shape().to_vec(),
        out,
        &[input],
        Some(Box::new(move |g, parents| {
            parents[0].accumulate_grad(|gi| {
                for i in 0..gi.len() {
                    let s = saved[i];
                    gi[i] += g[i] * s * (E::one() - s);
                }
            });
        })),
    )
}

/// 2x2 max-pooling with stride 2; requires even spatial dims.
pub fn maxpool2<E: Element>(input: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
    let [b, c, h, w] = dims4(input, "maxpool2 input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("maxpool2 requires even spatial dims, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let data = input.data();
    let mut out = vec![E::zero(); b * c * oh * ow];
    let mut argmax = vec![0u32; out.len()];
    for bc in 0..b * c {
        let plane = &data[bc * h * w..(bc + 1) * h * w];
        let obase = bc * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = E::neg_infinity();
                let mut best_i = 0usize;
                for dy in 0..2 {
                    for dx in 0..2 {
                        let i = (oy * 2 + dy) * w + ox * 2 + dx;
                        if plane[i] > best {
                            best = plane[i];
                            best_i = i;
                        }
                    }
                }
                out[obase + oy * ow + ox] = best;
                argmax[obase + oy * ow + ox] = (bc * h * w + best_i) as u32;
            }
        }
    }
    Ok(Tensor::result(
        vec![b, c, oh, ow],
        out,
        &[input],
        Some(Box::new(move |g, parents| {
            parents[0].accumulate_grad(|gi| {
                for (i, &src) in argmax.iter().enumerate() {
                    gi[src as usize] += g[i];
                }
            });
        })),
    ))
}

/// Per-axis source index/weight table for x2 bilinear upsampling with
/// half-pixel centers (`align_corners = false`). Negative source positions
/// clamp to the first sample.
fn bilinear2_axis<E: Element>(n_in: usize) -> Vec<(usize, usize, E, E)> {
    (0..2 * n_in)
        .map(|o| {
            let src = ((o as f64 + 0.5) * 0.5 - 0.5).max(0.0);
            let i0 = src.floor() as usize;
            let frac = src - i0 as f64;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, E::from_f64(1.0 - frac), E::from_f64(frac))
        })
        .collect()
}

/// Doubles spatial dims with bilinear interpolation (half-pixel centers).
pub fn upsample_bilinear2<E: Element>(input: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
    let [b, c, h, w] = dims4(input, "upsample input")?;
    let ys = bilinear2_axis::<E>(h);
    let xs = bilinear2_axis::<E>(w);
    let (oh, ow) = (2 * h, 2 * w);
    let data = input.data();
    let mut out = vec![E::zero(); b * c * oh * ow];
    for bc in 0..b * c {
        let plane = &data[bc * h * w..(bc + 1) * h * w];
        let oplane = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
        for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                let v = wy0 * (wx0 * plane[y0 * w + x0] + wx1 * plane[y0 * w + x1])
                    + wy1 * (wx0 * plane[y1 * w + x0] + wx1 * plane[y1 * w + x1]);
                oplane[oy * ow + ox] = v;
            }
        }
    }
    Ok(Tensor::result(
        vec![b, c, oh, ow],
        out,
        &[input],
        Some(Box::new(move |g, parents| {
            parents[0].accumulate_grad(|gi| {
                for bc in 0..b * c {
                    let gplane = &g[bc * oh * ow..(bc + 1) * oh * ow];
                    let iplane = &mut gi[bc * h * w..(bc + 1) * h * w];
                    for (oy, &(y0, y1, wy0, wy1)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, wx0, wx1)) in xs.iter().enumerate() {
                            let gv = gplane[oy * ow + ox];
                            iplane[y0 * w + x0] += wy0 * wx0 * gv;
                            iplane[y0 * w + x1] += wy0 * wx1 * gv;
                            iplane[y1 * w + x0] += wy1 * wx0 * gv;
                            iplane[y1 * w + x1] += wy1 * wx1 * gv;
                        }
                    }
                }
            });
        })),
    ))
}

/// Concatenates along the channel dimension; channel blocks appear in
/// argument order.
pub fn concat_channels<E: Element>(inputs: &[&Tensor<E>]) -> Result<Tensor<E>, TensorError> {
    if inputs.is_empty() {
        return shape_err("concat_channels needs at least one input".to_string());
    }
    let [b, _, h, w] = dims4(inputs[0], "concat input")?;
    let mut channels = Vec::with_capacity(inputs.len());
    for t in inputs {
        let [tb, tc, th, tw] = dims4(t, "concat input")?;
        if tb != b || th != h || tw != w {
            return shape_err(format!(
                "concat_channels: input shape {:?} does not match [B={b}, H={h}, W={w}]",
                t.shape()
            ));
        }
        channels.push(tc);
    }
    let c_total: usize = channels.iter().sum();
    let mut out = vec![E::zero(); b * c_total * h * w];
    for bi in 0..b {
        let mut c_off = 0;
        for (t, &tc) in inputs.iter().zip(&channels) {
            let src = &t.data()[bi * tc * h * w..(bi + 1) * tc * h * w];
            let dst_start = bi * c_total * h * w + c_off * h * w;
            out[dst_start..dst_start + tc * h * w].copy_from_slice(src);
            c_off += tc;
        }
    }
    let ch = channels.clone();
    Ok(Tensor::result(
        vec![b, c_total, h, w],
        out,
        &inputs.to_vec(),
        Some(Box::new(move |g, parents| {
            for bi in 0..b {
                let mut c_off = 0;
                for (t, &tc) in parents.iter().zip(&ch) {
                    if t.requires_grad() {
                        let src = &g[bi * c_total * h * w + c_off * h * w..][..tc * h * w];
                        t.accumulate_grad(|gi| {
                            let dst = &mut gi[bi * tc * h * w..(bi + 1) * tc * h * w];
                            for (o, v) in dst.iter_mut().zip(src) {
                                *o += *v;
                            }
                        });
                    }
                    c_off += tc;
                }
            }
        })),
    ))
}

/// Mean binary cross-entropy `-[t ln p + (1-t) ln(1-p)]` with probabilities
/// clamped to `[1e-7, 1-1e-7]` before the logs. Returns a rank-0 tensor.
pub fn bce_loss<E: Element>(pred: &Tensor<E>, target: &Tensor<E>) -> Result<Tensor<E>, TensorError> {
    if pred.shape() != target.shape() {
        return shape_err(format!(
            "bce_loss shape mismatch: pred {:?} vs target {:?}",
            pred.shape(),
            target.shape()
        ));
    }
    let lo = E::from_f64(BCE_CLAMP);
    let hi = E::one() - lo;
    let n = E::from_f64(pred.len() as f64);
    let mut acc = E::zero();
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let pc = p.max(lo).min(hi);
        acc -= t * pc.ln() + (E::one() - t) * (E::one() - pc).ln();
    }
    let loss = acc / n;
    Ok(Tensor::result(
        vec![],
        vec![loss],
        &[pred, target],
        Some(Box::new(move |g, parents| {
            let g0 = g[0];
            let p_data = parents[0].data();
            let t_data = parents[1].data();
            if parents[0].requires_grad() {
                parents[0].accumulate_grad(|gi| {
                    for i in 0..gi.len() {
                        let p = p_data[i];
                        if p < lo || p > hi {
                            continue; // clamp region: zero gradient
                        }
                        let t = t_data[i];
                        gi[i] += g0 * (-t / p + (E::one() - t) / (E::one() - p)) / n;
                    }
                });
            }
            if parents[1].requires_grad() {
                parents[1].accumulate_grad(|gi| {
                    for i in 0..gi.len() {
                        let pc = p_data[i].max(lo).min(hi);
                        gi[i] += g0 * ((E::one() - pc).ln() - pc.ln()) / n;
                    }
                });
            }
        })),
    ))
}

/// Sum of all elements as a rank-0 tensor.
pub fn sum<E: Element>(input: &Tensor<E>) -> Tensor<E> {
    let mut acc = E::zero();
    for v in input.data() {
        acc += *v;
    }
    Tensor::result(
        vec![],
        vec![acc],
        &[input],
        Some(Box::new(|g, parents| {
            let g0 = g[0];
            parents[0].accumulate_grad(|gi| {
                for v in gi.iter_mut() {
                    *v += g0;
                }
            });
        })),
    )
}

/// Elementwise multiplication by a constant.
pub fn scale<E: Element>(input: &Tensor<E>, factor: E) -> Tensor<E> {
    let out: Vec<E> = input.data().iter().map(|&v| v * factor).collect();
    Tensor::result(
        input.shape().to_vec(),
        out,
        &[input],
        Some(Box::new(move |g, parents| {
            parents[0].accumulate_grad(|gi| {
                for (o, v) in gi.iter_mut().zip(g) {
                    *o += *v * factor;
                }
            });
        })),
    )
}

fn dims4<E: Element>(t: &Tensor<E>, what: &str) -> Result<[usize; 4], TensorError> {
    match t.shape() {
        [a, b, c, d] => Ok([*a, *b, *c, *d]),
        other => shape_err(format!("{what} must be rank 4, got shape {other:?}")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{backward, no_grad};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    // ---- conv2d ----

    /// Six-nested-loop reference convolution, independent of the gemm path.
    fn conv_naive(
        input: &[f64],
        weight: &[f64],
        bias: &[f64],
        b: usize,
        cin: usize,
        cout: usize,
        h: usize,
        w: usize,
    ) -> Vec<f64> {
        let mut out = vec![0.0; b * cout * h * w];
        for bi in 0..b {
            for co in 0..cout {
                for y in 0..h {
                    for x in 0..w {
                        let mut acc = bias[co];
                        for ci in 0..cin {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = y as isize + ky as isize - 1;
                                    let ix = x as isize + kx as isize - 1;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    acc += input
                                        [((bi * cin + ci) * h + iy as usize) * w + ix as usize]
                                        * weight[((co * cin + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                        out[((bi * cout + co) * h + y) * w + x] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_zero_input_gives_bias() {
        let input = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
        let weight =
            Tensor::from_vec(&[3, 2, 3, 3], rand_vec(&mut ChaCha8Rng::seed_from_u64(1), 54, -1.0, 1.0))
                .unwrap();
        let bias = Tensor::from_vec(&[3], vec![0.5, -1.0, 2.0]).unwrap();
        let out = conv2d(&input, &weight, &bias).unwrap();
        for co in 0..3 {
            for v in &out.data()[co * 16..(co + 1) * 16] {
                assert_eq!(*v, bias.data()[co]);
            }
        }
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let input = Tensor::from_vec(&[1, 1, 5, 6], rand_vec(&mut rng, 30, -2.0, 2.0)).unwrap();
        let mut k = vec![0.0; 9];
        k[4] = 1.0; // center tap
        let weight = Tensor::from_vec(&[1, 1, 3, 3], k).unwrap();
        let bias = Tensor::from_vec(&[1], vec![0.0]).unwrap();
        let out = conv2d(&input, &weight, &bias).unwrap();
        assert_eq!(out.data(), input.data());
    }

    #[test]
    fn conv_matches_naive_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (b, cin, cout, h, w) = (1, 2, 3, 4, 4);
        let input = rand_vec(&mut rng, b * cin * h * w, -1.0, 1.0);
        let weight = rand_vec(&mut rng, cout * cin * 9, -1.0, 1.0);
        let bias = rand_vec(&mut rng, cout, -1.0, 1.0);
        let expected = conv_naive(&input, &weight, &bias, b, cin, cout, h, w);
        let out = conv2d(
            &Tensor::from_vec(&[b, cin, h, w], input).unwrap(),
            &Tensor::from_vec(&[cout, cin, 3, 3], weight).unwrap(),
            &Tensor::from_vec(&[cout], bias).unwrap(),
        )
        .unwrap();
        for (a, e) in out.data().iter().zip(&expected) {
            let rel = (a - e).abs() / e.abs().max(1.0);
            assert!(rel <= 1e-6, "{a} vs {e}");
        }
    }

    #[test]
    fn conv_matches_naive_on_larger_f32_case() {
        // production dtype through the strip-tiled gemm path
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (b, cin, cout, h, w) = (2, 5, 4, 13, 17);
        let input = rand_vec(&mut rng, b * cin * h * w, -1.0, 1.0);
        let weight = rand_vec(&mut rng, cout * cin * 9, -1.0, 1.0);
        let bias = rand_vec(&mut rng, cout, -1.0, 1.0);
        let expected = conv_naive(&input, &weight, &bias, b, cin, cout, h, w);
        let to_f32 = |v: &[f64]| v.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let out = conv2d(
            &Tensor::from_vec(&[b, cin, h, w], to_f32(&input)).unwrap(),
            &Tensor::from_vec(&[cout, cin, 3, 3], to_f32(&weight)).unwrap(),
            &Tensor::from_vec(&[cout], to_f32(&bias)).unwrap(),
        )
        .unwrap();
        for (a, e) in out.data().iter().zip(&expected) {
            let rel = (*a as f64 - e).abs() / e.abs().max(1.0);
            assert!(rel <= 1e-4, "{a} vs {e}");
        }
    }

    #[test]
    fn conv_channel_mismatch_is_shape_error() {
        let input = Tensor::<f32>::zeros(&[1, 2, 4, 4]);
        let weight = Tensor::<f32>::zeros(&[3, 5, 3, 3]);
        let bias = Tensor::<f32>::zeros(&[3]);
        assert!(matches!(
            conv2d(&input, &weight, &bias),
            Err(TensorError::Shape(_))
        ));
    }

    #[test]
    fn conv_is_deterministic_across_runs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let input =
            Tensor::from_vec(&[3, 4, 16, 16], rand_vec(&mut rng, 3 * 4 * 256, -1.0, 1.0)).unwrap();
        let weight = Tensor::from_vec(&[8, 4, 3, 3], rand_vec(&mut rng, 288, -1.0, 1.0)).unwrap();
        let bias = Tensor::from_vec(&[8], rand_vec(&mut rng, 8, -1.0, 1.0)).unwrap();
        let a = conv2d(&input, &weight, &bias).unwrap();
        let b = conv2d(&input, &weight, &bias).unwrap();
        assert_eq!(a.data(), b.data());
    }

    // ---- group_norm ----

    #[test]
    fn group_norm_constant_input_is_zero() {
        let input = Tensor::<f64>::full(&[2, 4, 3, 3], 7.5);
        let gamma = Tensor::full(&[4], 1.0);
        let beta = Tensor::zeros(&[4]);
        let out = group_norm(&input, 2, &gamma, &beta, 1e-5).unwrap();
        for v in out.data() {
            assert!(v.abs() < 1e-9);
        }
    }

    #[test]
    fn group_norm_two_values() {
        // one group holding {1, 2}: xhat = +-0.5 / sqrt(0.25 + 1e-5)
        let input = Tensor::<f64>::from_vec(&[1, 2, 1, 1], vec![1.0, 2.0]).unwrap();
        let gamma = Tensor::full(&[2], 1.0);
        let beta = Tensor::zeros(&[2]);
        let out = group_norm(&input, 1, &gamma, &beta, 1e-5).unwrap();
        let expected = 0.5 / (0.25f64 + 1e-5).sqrt(); // 0.99998...
        assert!((out.data()[0] + expected).abs() < 1e-9);
        assert!((out.data()[1] - expected).abs() < 1e-9);
        assert!((expected - 0.99998).abs() < 1e-5);
    }

    #[test]
    fn group_norm_affine_law() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let input = Tensor::from_vec(&[1, 4, 2, 2], rand_vec(&mut rng, 16, -3.0, 3.0)).unwrap();
        let g1 = Tensor::full(&[4], 1.0);
        let b0 = Tensor::zeros(&[4]);
        let g2 = Tensor::full(&[4], 2.0);
        let b1 = Tensor::full(&[4], 1.0);
        let base = group_norm(&input, 2, &g1, &b0, 1e-5).unwrap();
        let affine = group_norm(&input, 2, &g2, &b1, 1e-5).unwrap();
        for (a, b) in affine.data().iter().zip(base.data()) {
            assert!((a - (2.0 * b + 1.0)).abs() < 1e-9);
        }
    }

    #[test]
    fn group_norm_standardizes_each_group() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let (b, c, h, w, groups) = (2, 8, 5, 4, 4);
        let input = Tensor::from_vec(&[b, c, h, w], rand_vec(&mut rng, b * c * h * w, -5.0, 5.0))
            .unwrap();
        let gamma = Tensor::full(&[c], 1.0);
        let beta = Tensor::zeros(&[c]);
        let out = group_norm(&input, groups, &gamma, &beta, 1e-5).unwrap();
        let m = (c / groups) * h * w;
        for chunk in out.data().chunks(m) {
            let mean: f64 = chunk.iter().sum::<f64>() / m as f64;
            let var: f64 = chunk.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m as f64;
            assert!(mean.abs() <= 1e-5, "group mean {mean}");
            assert!((var - 1.0).abs() <= 1e-3, "group var {var}");
        }
    }

    #[test]
    fn group_norm_rejects_indivisible_groups() {
        let input = Tensor::<f32>::zeros(&[1, 6, 2, 2]);
        let gamma = Tensor::full(&[6], 1.0);
        let beta = Tensor::zeros(&[6]);
        assert!(matches!(
            group_norm(&input, 4, &gamma, &beta, 1e-5),
            Err(TensorError::Shape(_))
        ));
    }

    // ---- activations ----

    #[test]
    fn relu_definition() {
        let x = Tensor::<f64>::from_vec(&[2], vec![-3.0, 3.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 3.0]);
    }

    #[test]
    fn sigmoid_symmetry_and_range() {
        let zero = Tensor::<f64>::from_vec(&[1], vec![0.0]).unwrap();
        assert!((sigmoid(&zero).data()[0] - 0.5).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs = rand_vec(&mut rng, 64, -20.0, 20.0);
        let t = Tensor::from_vec(&[64], xs.clone()).unwrap();
        let neg = Tensor::from_vec(&[64], xs.iter().map(|v| -v).collect()).unwrap();
        let s = sigmoid(&t);
        let sn = sigmoid(&neg);
        for i in 0..64 {
            assert!((s.data()[i] + sn.data()[i] - 1.0).abs() < 1e-12);
            assert!(s.data()[i] > 0.0 && s.data()[i] < 1.0);
        }
    }

    // ---- maxpool2 ----

    #[test]
    fn maxpool_constant_and_window() {
        let c = Tensor::<f64>::full(&[1, 1, 4, 4], 2.5);
        assert!(maxpool2(&c).unwrap().data().iter().all(|&v| v == 2.5));
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(maxpool2(&x).unwrap().data(), &[4.0]);
    }

    #[test]
    fn maxpool_matches_window_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = rand_vec(&mut rng, 36, -10.0, 10.0);
        let x = Tensor::from_vec(&[1, 1, 6, 6], data.clone()).unwrap();
        let out = maxpool2(&x).unwrap();
        for oy in 0..3 {
            for ox in 0..3 {
                let mut best = f64::NEG_INFINITY;
                for dy in 0..2 {
                    for dx in 0..2 {
                        best = best.max(data[(oy * 2 + dy) * 6 + ox * 2 + dx]);
                    }
                }
                assert_eq!(out.data()[oy * 3 + ox], best);
            }
        }
    }

    #[test]
    fn maxpool_rejects_odd_dims() {
        let x = Tensor::<f32>::zeros(&[1, 1, 5, 4]);
        assert!(matches!(maxpool2(&x), Err(TensorError::Shape(_))));
    }

    // ---- upsample ----

    #[test]
    fn upsample_constant_and_single_pixel() {
        let c = Tensor::<f64>::full(&[1, 2, 3, 5], -1.25);
        let up = upsample_bilinear2(&c).unwrap();
        assert_eq!(up.shape(), &[1, 2, 6, 10]);
        assert!(up.data().iter().all(|&v| (v + 1.25).abs() < 1e-12));
        let one = Tensor::<f64>::from_vec(&[1, 1, 1, 1], vec![3.5]).unwrap();
        let up1 = upsample_bilinear2(&one).unwrap();
        assert_eq!(up1.shape(), &[1, 1, 2, 2]);
        assert!(up1.data().iter().all(|&v| v == 3.5));
    }

    #[test]
    fn upsample_2x2_matches_half_pixel_oracle() {
        // hand-evaluated half-pixel-center bilinear for [[1,2],[3,4]]
        let x = Tensor::<f64>::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let out = upsample_bilinear2(&x).unwrap();
        #[rustfmt::skip]
        let expected = [
            1.0, 1.25, 1.75, 2.0,
            1.5, 1.75, 2.25, 2.5,
            2.5, 2.75, 3.25, 3.5,
            3.0, 3.25, 3.75, 4.0,
        ];
        for (a, e) in out.data().iter().zip(&expected) {
            assert!((a - e).abs() <= 1e-6, "{a} vs {e}");
        }
    }

    // ---- concat ----

    #[test]
    fn concat_32_images_gives_96_channels() {
        let inputs: Vec<Tensor<f32>> = (0..32)
            .map(|k| Tensor::full(&[1, 3, 2, 2], k as f32))
            .collect();
        let refs: Vec<&Tensor<f32>> = inputs.iter().collect();
        let out = concat_channels(&refs).unwrap();
        assert_eq!(out.shape(), &[1, 96, 2, 2]);
        // channel block k is input k, bit-exactly
        for k in 0..32 {
            let block = &out.data()[k * 3 * 4..(k + 1) * 3 * 4];
            assert!(block.iter().all(|&v| v == k as f32));
        }
    }

    #[test]
    fn concat_single_input_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let x = Tensor::from_vec(&[2, 3, 2, 2], rand_vec(&mut rng, 24, -1.0, 1.0)).unwrap();
        let out = concat_channels(&[&x]).unwrap();
        assert_eq!(out.data(), x.data());
    }

    #[test]
    fn concat_rejects_spatial_mismatch() {
        let a = Tensor::<f32>::zeros(&[1, 3, 4, 4]);
        let b = Tensor::<f32>::zeros(&[1, 3, 4, 5]);
        assert!(matches!(
            concat_channels(&[&a, &b]),
            Err(TensorError::Shape(_))
        ));
    }

    // ---- bce ----

    #[test]
    fn bce_uniform_half_is_ln2() {
        let pred = Tensor::<f64>::full(&[2, 1, 3, 3], 0.5);
        let target = Tensor::from_vec(
            &[2, 1, 3, 3],
            (0..18).map(|i| (i % 2) as f64).collect(),
        )
        .unwrap();
        let loss = bce_loss(&pred, &target).unwrap();
        assert!((loss.item() - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn bce_perfect_prediction_is_tiny() {
        let target = Tensor::<f64>::from_vec(&[4], vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let pred = Tensor::from_vec(
            &[4],
            target
                .data()
                .iter()
                .map(|&t| t.clamp(1e-7, 1.0 - 1e-7))
                .collect(),
        )
        .unwrap();
        let loss = bce_loss(&pred, &target).unwrap();
        assert!(loss.item() >= 0.0);
        assert!(loss.item() <= 1e-6);
    }

    #[test]
    fn bce_matches_formula_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let p = rand_vec(&mut rng, 40, 0.01, 0.99);
        let t: Vec<f64> = (0..40).map(|_| f64::from(rng.random_range(0..2))).collect();
        let mut expected = 0.0;
        for i in 0..40 {
            expected -= t[i] * p[i].ln() + (1.0 - t[i]) * (1.0 - p[i]).ln();
        }
        expected /= 40.0;
        let loss = bce_loss(
            &Tensor::from_vec(&[40], p).unwrap(),
            &Tensor::from_vec(&[40], t).unwrap(),
        )
        .unwrap();
        assert!((loss.item() - expected).abs() <= 1e-8);
    }

    #[test]
    fn bce_rejects_shape_mismatch() {
        let p = Tensor::<f32>::full(&[3], 0.5);
        let t = Tensor::<f32>::zeros(&[4]);
        assert!(bce_loss(&p, &t).is_err());
    }

    // ---- finite-difference gradient checks ----

    /// Central finite differences against the recorded backward pass.
    /// `f` must be a pure function of its parameter tensors.
    fn gradcheck(
        shapes: &[&[usize]],
        init: impl Fn(&mut ChaCha8Rng, usize) -> Vec<f64>,
        f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>,
        seed: u64,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let datas: Vec<Vec<f64>> = shapes
            .iter()
            .map(|s| init(&mut rng, s.iter().product()))
            .collect();
        let params: Vec<Tensor<f64>> = shapes
            .iter()
            .zip(&datas)
            .map(|(s, d)| Tensor::param(s, d.clone()).unwrap())
            .collect();
        let loss = f(&params);
        backward(&loss).unwrap();
        let grads: Vec<Vec<f64>> = params
            .iter()
            .map(|p| p.grad().unwrap_or_else(|| vec![0.0; p.len()]))
            .collect();

        let h = 1e-4;
        let eval = |datas: &[Vec<f64>]| -> f64 {
            let ts: Vec<Tensor<f64>> = shapes
                .iter()
                .zip(datas)
                .map(|(s, d)| Tensor::from_vec(s, d.clone()).unwrap())
                .collect();
            no_grad(|| f(&ts)).item()
        };
        for pi in 0..shapes.len() {
            for j in 0..datas[pi].len() {
                let mut plus = datas.clone();
                plus[pi][j] += h;
                let mut minus = datas.clone();
                minus[pi][j] -= h;
                let num = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let ana = grads[pi][j];
                let rel = (num - ana).abs() / num.abs().max(ana.abs()).max(1e-6);
                assert!(
                    rel <= 1e-3,
                    "param {pi} coord {j}: analytic {ana} vs numeric {num} (rel {rel})"
                );
            }
        }
    }

    fn uniform_init(lo: f64, hi: f64) -> impl Fn(&mut ChaCha8Rng, usize) -> Vec<f64> {
        move |rng, n| (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    /// Keeps values away from the ReLU kink so finite differences stay valid.
    fn away_from_zero(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n)
            .map(|_| {
                let v: f64 = rng.random_range(-1.0..1.0);
                if v.abs() < 5e-3 {
                    v + 0.01 * v.signum().max(0.5)
                } else {
                    v
                }
            })
            .collect()
    }

    #[test]
    fn gradcheck_conv2d() {
        for seed in 0..3 {
            gradcheck(
                &[&[1, 2, 4, 4], &[2, 2, 3, 3], &[2]],
                uniform_init(-1.0, 1.0),
                |p| sum(&sigmoid(&conv2d(&p[0], &p[1], &p[2]).unwrap())),
                seed,
            );
        }
    }

    #[test]
    fn gradcheck_group_norm() {
        for seed in 0..3 {
            gradcheck(
                &[&[2, 4, 3, 2], &[4], &[4]],
                uniform_init(-2.0, 2.0),
                |p| sum(&sigmoid(&group_norm(&p[0], 2, &p[1], &p[2], 1e-5).unwrap())),
                seed,
            );
        }
    }

    #[test]
    fn gradcheck_relu() {
        for seed in 0..3 {
            gradcheck(
                &[&[2, 2, 3, 3]],
                |rng, n| away_from_zero(rng, n),
                |p| sum(&sigmoid(&relu(&p[0]))),
                seed,
            );
        }
    }

    #[test]
    fn gradcheck_sigmoid() {
        for seed in 0..3 {
            gradcheck(
                &[&[10]],
                uniform_init(-3.0, 3.0),
                |p| sum(&sigmoid(&sigmoid(&p[0]))),
                seed,
            );
        }
    }

    #[test]
    fn gradcheck_maxpool_and_upsample() {
        for seed in 0..3 {
            gradcheck(
                &[&[1, 2, 4, 4]],
                uniform_init(-1.0, 1.0),
                |p| sum(&sigmoid(&maxpool2(&p[0]).unwrap())),
                seed,
            );
            gradcheck(
                &[&[1, 2, 3, 3]],
                uniform_init(-1.0, 1.0),
                |p| sum(&sigmoid(&upsample_bilinear2(&p[0]).unwrap())),
                seed,
            );
        }
    }

    #[test]
    fn gradcheck_concat_and_scale() {
        for seed in 0..3 {
            gradcheck(
                &[&[1, 2, 2, 2], &[1, 3, 2, 2]],
                uniform_init(-1.0, 1.0),
                |p| sum(&sigmoid(&scale(&concat_channels(&[&p[0], &p[1]]).unwrap(), 0.7))),
                seed,
            );
        }
    }

    #[test]
    fn gradcheck_bce() {
        for seed in 0..3 {
            let mut trng = ChaCha8Rng::seed_from_u64(seed + 100);
            let target: Vec<f64> = (0..12).map(|_| f64::from(trng.random_range(0..2))).collect();
            let t = Tensor::from_vec(&[12], target).unwrap();
            gradcheck(
                &[&[12]],
                uniform_init(-2.0, 2.0),
                move |p| bce_loss(&sigmoid(&p[0]), &t).unwrap(),
                seed,
            );
        }
    }

    #[test]
    fn shape_algebra() {
        let x = Tensor::<f32>::zeros(&[1, 4, 8, 6]);
        let w = Tensor::<f32>::zeros(&[5, 4, 3, 3]);
        let b = Tensor::<f32>::zeros(&[5]);
        assert_eq!(conv2d(&x, &w, &b).unwrap().shape(), &[1, 5, 8, 6]);
        let g = Tensor::full(&[4], 1.0f32);
        let be = Tensor::zeros(&[4]);
        assert_eq!(group_norm(&x, 2, &g, &be, 1e-5).unwrap().shape(), x.shape());
        assert_eq!(relu(&x).shape(), x.shape());
        assert_eq!(maxpool2(&x).unwrap().shape(), &[1, 4, 4, 3]);
        assert_eq!(upsample_bilinear2(&x).unwrap().shape(), &[1, 4, 16, 12]);
        let y = Tensor::<f32>::zeros(&[1, 2, 8, 6]);
        assert_eq!(concat_channels(&[&x, &y]).unwrap().shape(), &[1, 6, 8, 6]);
    }
}

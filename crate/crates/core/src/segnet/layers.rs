//! Single-image layer primitives on `[C, H, W]` activations, each with an
//! explicit backward.

use alloc::vec;
use alloc::vec::Vec;

#[allow(unused_imports)]
use num_traits::Float;

fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], beta: f64) {
    // C[m x n] = A[m x k] * B[k x n] (+ beta * C); `*_t` reads the operand transposed.
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
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
            n as isize,
            1,
        );
    }
}

/// Pointwise (1x1) convolution: `y[o] = sum_i w[o, i] x[i] + b[o]`.
pub fn pointwise_forward(x: &[f64], c_in: usize, hw: usize, w: &[f64], b: &[f64], c_out: usize) -> Vec<f64> {
    let mut y = vec![0.0; c_out * hw];
    for (o, row) in y.chunks_exact_mut(hw).enumerate() {
        row.iter_mut().for_each(|v| *v = b[o]);
    }
    gemm(c_out, c_in, hw, w, false, x, false, &mut y, 1.0);
    y
}

/// Returns `(gx, gw, gb)`.
pub fn pointwise_backward(
    x: &[f64],
    c_in: usize,
    hw: usize,
    w: &[f64],
    c_out: usize,
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let mut gx = vec![0.0; c_in * hw];
    gemm(c_in, c_out, hw, w, true, gy, false, &mut gx, 0.0);
    let mut gw = vec![0.0; c_out * c_in];
    gemm(c_out, hw, c_in, gy, false, x, true, &mut gw, 0.0);
    let gb = gy.chunks_exact(hw).map(|r| r.iter().sum()).collect();
    (gx, gw, gb)
}

/// im2col for a 3x3, stride 1, zero-padded convolution: `[c*9, h*w]`.
fn im2col3(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut col = vec![0.0; c * 9 * hw];
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            row[y * w + xx] = x[ch * hw + sy as usize * w + sx as usize];
                        }
                    }
                }
            }
        }
    }
    col
}

fn col2im3(col: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ch in 0..c {
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ch * 9) + ky * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for xx in 0..w {
                        let sx = xx as isize + kx as isize - 1;
                        if sx >= 0 && sx < w as isize {
                            x[ch * hw + sy as usize * w + sx as usize] += row[y * w + xx];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Dense 3x3 convolution (`w: [c_out, c_in, 3, 3]`). Returns the output and
/// the im2col buffer for the backward pass.
pub fn conv3_forward(
    x: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    bias: &[f64],
    c_out: usize,
) -> (Vec<f64>, Vec<f64>) {
    let col = im2col3(x, c_in, h, w);
    let y = pointwise_forward(&col, c_in * 9, h * w, weight, bias, c_out);
    (y, col)
}

pub fn conv3_backward(
    col: &[f64],
    c_in: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    c_out: usize,
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (gcol, gw, gb) = pointwise_backward(col, c_in * 9, h * w, weight, c_out, gy);
    (col2im3(&gcol, c_in, h, w), gw, gb)
}

/// Depthwise 3x3 convolution, zero padding (`w: [c, 3, 3]`).
pub fn depthwise_forward(x: &[f64], c: usize, h: usize, w: usize, weight: &[f64], bias: &[f64]) -> Vec<f64> {
    let hw = h * w;
    let mut y = vec![0.0; c * hw];
    for ch in 0..c {
        let k = &weight[ch * 9..ch * 9 + 9];
        let src = &x[ch * hw..(ch + 1) * hw];
        let dst = &mut y[ch * hw..(ch + 1) * hw];
        dst.iter_mut().for_each(|v| *v = bias[ch]);
        for ky in 0..3 {
            for kx in 0..3 {
                let kv = k[ky * 3 + kx];
                let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                let y0 = if dy < 0 { 1 } else { 0 };
                let y1 = if dy > 0 { h - 1 } else { h };
                let x0 = if dx < 0 { 1 } else { 0 };
                let x1 = if dx > 0 { w.saturating_sub(1) } else { w };
                for yy in y0..y1 {
                    let sy = (yy as isize + dy) as usize;
                    let drow = &mut dst[yy * w..(yy + 1) * w];
                    let srow = &src[sy * w..(sy + 1) * w];
                    for xx in x0..x1 {
                        drow[xx] += kv * srow[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
    y
}

pub fn depthwise_backward(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let hw = h * w;
    let mut gx = vec![0.0; c * hw];
    let mut gw = vec![0.0; c * 9];
    let mut gb = vec![0.0; c];
    for ch in 0..c {
        let k = &weight[ch * 9..ch * 9 + 9];
        let src = &x[ch * hw..(ch + 1) * hw];
        let g = &gy[ch * hw..(ch + 1) * hw];
        let gsrc = &mut gx[ch * hw..(ch + 1) * hw];
        gb[ch] = g.iter().sum();
        for ky in 0..3 {
            for kx in 0..3 {
                let kv = k[ky * 3 + kx];
                let (dy, dx) = (ky as isize - 1, kx as isize - 1);
                let y0 = if dy < 0 { 1 } else { 0 };
                let y1 = if dy > 0 { h - 1 } else { h };
                let x0 = if dx < 0 { 1 } else { 0 };
                let x1 = if dx > 0 { w.saturating_sub(1) } else { w };
                let mut acc = 0.0;
                for yy in y0..y1 {
                    let sy = (yy as isize + dy) as usize;
                    for xx in x0..x1 {
                        let sx = (xx as isize + dx) as usize;
                        let gv = g[yy * w + xx];
                        acc += gv * src[sy * w + sx];
                        gsrc[sy * w + sx] += gv * kv;
                    }
                }
                gw[ch * 9 + ky * 3 + kx] = acc;
            }
        }
    }
    (gx, gw, gb)
}

pub fn relu_inplace(x: &mut [f64]) {
    x.iter_mut().for_each(|v| *v = v.max(0.0));
}

/// Masks `g` by `y > 0` where `y` is the ReLU output.
pub fn relu_backward_inplace(y: &[f64], g: &mut [f64]) {
    for (gv, &yv) in g.iter_mut().zip(y) {
        if yv <= 0.0 {
            *gv = 0.0;
        }
    }
}

/// 2x2 average pooling; `h` and `w` must be even.
pub fn avgpool2_forward(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut y = vec![0.0; c * oh * ow];
    for ch in 0..c {
        for i in 0..oh {
            for j in 0..ow {
                let b = ch * h * w;
                y[(ch * oh + i) * ow + j] = 0.25
                    * (x[b + 2 * i * w + 2 * j]
                        + x[b + 2 * i * w + 2 * j + 1]
                        + x[b + (2 * i + 1) * w + 2 * j]
                        + x[b + (2 * i + 1) * w + 2 * j + 1]);
            }
        }
    }
    y
}

pub fn avgpool2_backward(gy: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                gx[(ch * h + i) * w + j] = 0.25 * gy[(ch * oh + i / 2) * ow + j / 2];
            }
        }
    }
    gx
}

/// Source taps for 2x bilinear upsampling along one axis (half-pixel centres).
fn taps(n_out: usize, n_in: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|i| {
            let s = ((i as f64 + 0.5) / 2.0 - 0.5).max(0.0);
            let i0 = (s.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// 2x bilinear upsampling of `[c, h, w]` to `[c, 2h, 2w]`.
pub fn upsample2_forward(x: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let ty = taps(oh, h);
    let tx = taps(ow, w);
    let mut y = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut y[ch * oh * ow..(ch + 1) * oh * ow];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (1.0 - fx) + src[y0 * w + x1] * fx;
                let bot = src[y1 * w + x0] * (1.0 - fx) + src[y1 * w + x1] * fx;
                dst[i * ow + j] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    y
}

pub fn upsample2_backward(gy: &[f64], c: usize, h: usize, w: usize) -> Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let ty = taps(oh, h);
    let tx = taps(ow, w);
    let mut gx = vec![0.0; c * h * w];
    for ch in 0..c {
        let g = &gy[ch * oh * ow..(ch + 1) * oh * ow];
        let dst = &mut gx[ch * h * w..(ch + 1) * h * w];
        for (i, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (j, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = g[i * ow + j];
                dst[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                dst[y0 * w + x1] += v * (1.0 - fy) * fx;
                dst[y1 * w + x0] += v * fy * (1.0 - fx);
                dst[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    gx
}

/// Squeeze-and-excitation gate: `y = x * sigmoid(W2 relu(W1 mean(x) + b1) + b2)`.
pub struct SeCache {
    pub squeezed: Vec<f64>,
    pub hidden: Vec<f64>,
    pub gate: Vec<f64>,
}

pub fn se_forward(
    x: &[f64],
    c: usize,
    hw: usize,
    w1: &[f64],
    b1: &[f64],
    w2: &[f64],
    b2: &[f64],
) -> (Vec<f64>, SeCache) {
    let r = b1.len();
    let squeezed: Vec<f64> = x.chunks_exact(hw).map(|ch| ch.iter().sum::<f64>() / hw as f64).collect();
    let hidden: Vec<f64> = (0..r)
        .map(|j| (b1[j] + (0..c).map(|i| w1[j * c + i] * squeezed[i]).sum::<f64>()).max(0.0))
        .collect();
    let gate: Vec<f64> = (0..c)
        .map(|i| crate::sensor::sigmoid(b2[i] + (0..r).map(|j| w2[i * r + j] * hidden[j]).sum::<f64>()))
        .collect();
    let mut y = x.to_vec();
    for (ch, row) in y.chunks_exact_mut(hw).enumerate() {
        row.iter_mut().for_each(|v| *v *= gate[ch]);
    }
    (
        y,
        SeCache {
            squeezed,
            hidden,
            gate,
        },
    )
}

/// Gradients `(gx, gw1, gb1, gw2, gb2)`.
#[allow(clippy::type_complexity)]
pub fn se_backward(
    x: &[f64],
    c: usize,
    hw: usize,
    w1: &[f64],
    w2: &[f64],
    cache: &SeCache,
    gy: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let r = cache.hidden.len();
    let mut gx = gy.to_vec();
    let mut ggate = vec![0.0; c];
    for ch in 0..c {
        let (xs, gs) = (&x[ch * hw..(ch + 1) * hw], &gy[ch * hw..(ch + 1) * hw]);
        ggate[ch] = xs.iter().zip(gs).map(|(a, b)| a * b).sum();
        gx[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v *= cache.gate[ch]);
    }
    let gpre2: Vec<f64> = (0..c).map(|i| ggate[i] * cache.gate[i] * (1.0 - cache.gate[i])).collect();
    let mut gw2 = vec![0.0; c * r];
    let mut ghidden = vec![0.0; r];
    for i in 0..c {
        for j in 0..r {
            gw2[i * r + j] = gpre2[i] * cache.hidden[j];
            ghidden[j] += w2[i * r + j] * gpre2[i];
        }
    }
    let gpre1: Vec<f64> = (0..r)
        .map(|j| if cache.hidden[j] > 0.0 { ghidden[j] } else { 0.0 })
        .collect();
    let mut gw1 = vec![0.0; r * c];
    let mut gsq = vec![0.0; c];
    for j in 0..r {
        for i in 0..c {
            gw1[j * c + i] = gpre1[j] * cache.squeezed[i];
            gsq[i] += w1[j * c + i] * gpre1[j];
        }
    }
    for ch in 0..c {
        let add = gsq[ch] / hw as f64;
        gx[ch * hw..(ch + 1) * hw].iter_mut().for_each(|v| *v += add);
    }
    (gx, gw1, gpre1, gw2, gpre2)
}

/// Channel softmax of `[c, hw]` logits.
pub fn softmax_channels(logits: &[f64], c: usize, hw: usize) -> Vec<f64> {
    let mut p = vec![0.0; c * hw];
    for s in 0..hw {
        let m = (0..c).map(|k| logits[k * hw + s]).fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for k in 0..c {
            let e = (logits[k * hw + s] - m).exp();
            p[k * hw + s] = e;
            z += e;
        }
        for k in 0..c {
            p[k * hw + s] /= z;
        }
    }
    p
}

pub fn softmax_channels_backward(p: &[f64], c: usize, hw: usize, gp: &[f64]) -> Vec<f64> {
    let mut g = vec![0.0; c * hw];
    for s in 0..hw {
        let dot: f64 = (0..c).map(|k| p[k * hw + s] * gp[k * hw + s]).sum();
        for k in 0..c {
            g[k * hw + s] = p[k * hw + s] * (gp[k * hw + s] - dot);
        }
    }
    g
}

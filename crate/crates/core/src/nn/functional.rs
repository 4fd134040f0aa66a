//! Differentiable NCHW kernels: convolution, batch norm, activations,
//! pooling, resampling, concatenation and the segmentation loss.

use super::super::tensor::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Conv2dOpts {
            stride: 1,
            dilation: 1,
            groups: 1,
        }
    }
}

/// Same-padding amount for a kernel extent: `floor((k − 1)·dilation / 2)`.
pub fn same_padding(kernel: usize, dilation: usize) -> usize {
    (kernel - 1) * dilation / 2
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    dil: usize,
    groups: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn cig(&self) -> usize {
        self.ci / self.groups
    }
    fn cog(&self) -> usize {
        self.co / self.groups
    }
    fn kk(&self) -> usize {
        self.kh * self.kw
    }
    fn hw_in(&self) -> usize {
        self.h * self.w
    }
    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }
    fn depthwise(&self) -> bool {
        self.cig() == 1 && self.cog() == 1
    }
    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.ph == 0 && self.pw == 0
    }
}

/// Output positions `o` in `[lo, hi)` whose input index `o·stride + offset`
/// lies inside `[0, len)`.
fn valid_range(out_len: usize, in_len: usize, stride: usize, offset: isize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset >= 0 { 0 } else { ((-offset) + s - 1) / s };
    let room = in_len as isize - offset;
    let hi = if room <= 0 { 0 } else { (room + s - 1) / s };
    let lo = (lo as usize).min(out_len);
    let hi = (hi as usize).clamp(lo, out_len);
    (lo, hi)
}

fn im2col<T: Scalar>(g: &ConvGeom, x: &[T], cols: &mut [T]) {
    let (hw_o, wo) = (g.hw_out(), g.wo);
    for c in 0..g.cig() {
        let plane = &x[c * g.hw_in()..(c + 1) * g.hw_in()];
        for ky in 0..g.kh {
            let offy = (ky * g.dil) as isize - g.ph as isize;
            let (ylo, yhi) = valid_range(g.ho, g.h, g.stride, offy);
            for kx in 0..g.kw {
                let offx = (kx * g.dil) as isize - g.pw as isize;
                let (xlo, xhi) = valid_range(g.wo, g.w, g.stride, offx);
                let row = ((c * g.kh + ky) * g.kw + kx) * hw_o;
                let dst = &mut cols[row..row + hw_o];
                dst.fill(T::zero());
                if xlo == xhi {
                    continue;
                }
                for oy in ylo..yhi {
                    let iy = (oy * g.stride) as isize + offy;
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if g.stride == 1 {
                        let ix0 = (xlo as isize + offx) as usize;
                        drow[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for ox in xlo..xhi {
                            drow[ox] = src[((ox * g.stride) as isize + offx) as usize];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (hw_o, wo) = (g.hw_out(), g.wo);
    for c in 0..g.cig() {
        let plane = &mut dx[c * g.hw_in()..(c + 1) * g.hw_in()];
        for ky in 0..g.kh {
            let offy = (ky * g.dil) as isize - g.ph as isize;
            let (ylo, yhi) = valid_range(g.ho, g.h, g.stride, offy);
            for kx in 0..g.kw {
                let offx = (kx * g.dil) as isize - g.pw as isize;
                let (xlo, xhi) = valid_range(g.wo, g.w, g.stride, offx);
                let row = ((c * g.kh + ky) * g.kw + kx) * hw_o;
                let src = &cols[row..row + hw_o];
                for oy in ylo..yhi {
                    let iy = ((oy * g.stride) as isize + offy) as usize;
                    let drow = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let srow = &src[oy * wo..(oy + 1) * wo];
                    for ox in xlo..xhi {
                        let ix = ((ox * g.stride) as isize + offx) as usize;
                        drow[ix] += srow[ox];
                    }
                }
            }
        }
    }
}

fn depthwise_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], out: &mut [T]) {
    for n in 0..g.n {
        for c in 0..g.ci {
            let xp = &x[(n * g.ci + c) * g.hw_in()..][..g.hw_in()];
            let op = &mut out[(n * g.co + c) * g.hw_out()..][..g.hw_out()];
            for ky in 0..g.kh {
                let offy = (ky * g.dil) as isize - g.ph as isize;
                let (ylo, yhi) = valid_range(g.ho, g.h, g.stride, offy);
                for kx in 0..g.kw {
                    let wv = w[(c * g.kh + ky) * g.kw + kx];
                    let offx = (kx * g.dil) as isize - g.pw as isize;
                    let (xlo, xhi) = valid_range(g.wo, g.w, g.stride, offx);
                    if xlo == xhi {
                        continue;
                    }
                    for oy in ylo..yhi {
                        let iy = ((oy * g.stride) as isize + offy) as usize;
                        let xrow = &xp[iy * g.w..(iy + 1) * g.w];
                        let orow = &mut op[oy * g.wo..(oy + 1) * g.wo];
                        if g.stride == 1 {
                            let ix0 = (xlo as isize + offx) as usize;
                            for (o, &v) in orow[xlo..xhi].iter_mut().zip(&xrow[ix0..]) {
                                *o += wv * v;
                            }
                        } else {
                            for ox in xlo..xhi {
                                let ix = ((ox * g.stride) as isize + offx) as usize;
                                orow[ox] += wv * xrow[ix];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn depthwise_backward<T: Scalar>(
    g: &ConvGeom,
    x: &[T],
    w: &[T],
    dy: &[T],
    mut dx: Option<&mut [T]>,
    mut dw: Option<&mut [T]>,
) {
    for n in 0..g.n {
        for c in 0..g.ci {
            let xp = &x[(n * g.ci + c) * g.hw_in()..][..g.hw_in()];
            let gp = &dy[(n * g.co + c) * g.hw_out()..][..g.hw_out()];
            for ky in 0..g.kh {
                let offy = (ky * g.dil) as isize - g.ph as isize;
                let (ylo, yhi) = valid_range(g.ho, g.h, g.stride, offy);
                for kx in 0..g.kw {
                    let widx = (c * g.kh + ky) * g.kw + kx;
                    let wv = w[widx];
                    let offx = (kx * g.dil) as isize - g.pw as isize;
                    let (xlo, xhi) = valid_range(g.wo, g.w, g.stride, offx);
                    let mut acc = T::zero();
                    for oy in ylo..yhi {
                        let iy = ((oy * g.stride) as isize + offy) as usize;
                        let grow = &gp[oy * g.wo..(oy + 1) * g.wo];
                        if dw.is_some() {
                            let xrow = &xp[iy * g.w..(iy + 1) * g.w];
                            for ox in xlo..xhi {
                                let ix = ((ox * g.stride) as isize + offx) as usize;
                                acc += grow[ox] * xrow[ix];
                            }
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let dxp = &mut dx[(n * g.ci + c) * g.hw_in()..][..g.hw_in()];
                            let drow = &mut dxp[iy * g.w..(iy + 1) * g.w];
                            for ox in xlo..xhi {
                                let ix = ((ox * g.stride) as isize + offx) as usize;
                                drow[ix] += wv * grow[ox];
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let mut out = vec![T::zero(); g.n * g.co * g.hw_out()];
    if g.depthwise() {
        depthwise_forward(g, x, w, &mut out);
    } else {
        let (cig, cog, kk, hw_o) = (g.cig(), g.cog(), g.kk(), g.hw_out());
        let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); cig * kk * hw_o] };
        for n in 0..g.n {
            for grp in 0..g.groups {
                let xs = &x[(n * g.ci + grp * cig) * g.hw_in()..][..cig * g.hw_in()];
                let b: &[T] = if g.pointwise() {
                    xs
                } else {
                    im2col(g, xs, &mut cols);
                    &cols
                };
                let wg = &w[grp * cog * cig * kk..][..cog * cig * kk];
                let og = &mut out[(n * g.co + grp * cog) * hw_o..][..cog * hw_o];
                T::gemm(cog, cig * kk, hw_o, T::one(), wg, (cig * kk, 1), b, (hw_o, 1), T::zero(), og, (hw_o, 1));
            }
        }
    }
    if let Some(b) = bias {
        for n in 0..g.n {
            for c in 0..g.co {
                let bv = b[c];
                for v in &mut out[(n * g.co + c) * g.hw_out()..][..g.hw_out()] {
                    *v += bv;
                }
            }
        }
    }
    out
}

fn conv_backward<T: Scalar>(g: &ConvGeom, x: &[T], w: &[T], dy: &[T], need_x: bool, need_w: bool) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let mut dx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut dw = need_w.then(|| vec![T::zero(); w.len()]);
    if g.depthwise() {
        depthwise_backward(g, x, w, dy, dx.as_deref_mut(), dw.as_deref_mut());
        return (dx, dw);
    }
    let (cig, cog, kk, hw_o) = (g.cig(), g.cog(), g.kk(), g.hw_out());
    let mut cols = if g.pointwise() { Vec::new() } else { vec![T::zero(); cig * kk * hw_o] };
    for n in 0..g.n {
        for grp in 0..g.groups {
            let xs = &x[(n * g.ci + grp * cig) * g.hw_in()..][..cig * g.hw_in()];
            let gy = &dy[(n * g.co + grp * cog) * hw_o..][..cog * hw_o];
            let wg = &w[grp * cog * cig * kk..][..cog * cig * kk];
            if let Some(dw) = dw.as_deref_mut() {
                let b: &[T] = if g.pointwise() {
                    xs
                } else {
                    im2col(g, xs, &mut cols);
                    &cols
                };
                let dwg = &mut dw[grp * cog * cig * kk..][..cog * cig * kk];
                T::gemm(cog, hw_o, cig * kk, T::one(), gy, (hw_o, 1), b, (1, hw_o), T::one(), dwg, (cig * kk, 1));
            }
            if let Some(dx) = dx.as_deref_mut() {
                let dxs = &mut dx[(n * g.ci + grp * cig) * g.hw_in()..][..cig * g.hw_in()];
                if g.pointwise() {
                    T::gemm(cig, cog, hw_o, T::one(), wg, (1, cig), gy, (hw_o, 1), T::zero(), dxs, (hw_o, 1));
                } else {
                    T::gemm(cig * kk, cog, hw_o, T::one(), wg, (1, cig * kk), gy, (hw_o, 1), T::zero(), &mut cols, (hw_o, 1));
                    col2im_add(g, &cols, dxs);
                }
            }
        }
    }
    (dx, dw)
}

/// 2-D cross-correlation with same padding `floor((k − 1)·dilation / 2)`.
/// Weights are `(C_out, C_in / groups, kh, kw)`; output spatial extent is
/// `ceil(in / stride)` for odd kernels.
pub fn conv2d<T: Scalar>(tape: &mut Tape<T>, x: Var, weight: Var, bias: Option<Var>, opts: Conv2dOpts) -> Result<Var> {
    let (n, ci, h, w) = tape.value(x).dims4()?;
    let (co, wci, kh, kw) = tape.value(weight).dims4()?;
    let Conv2dOpts { stride, dilation, groups } = opts;
    if stride == 0 || dilation == 0 || groups == 0 {
        return Err(Error::invalid("conv stride, dilation and groups must be positive"));
    }
    if ci % groups != 0 || co % groups != 0 {
        return Err(Error::shape(format!(
            "channels {ci}->{co} not divisible by groups {groups}"
        )));
    }
    if wci != ci / groups {
        return Err(Error::shape(format!(
            "weight expects {wci} input channels per group, input has {}",
            ci / groups
        )));
    }
    if let Some(b) = bias {
        if tape.value(b).shape() != [co] {
            return Err(Error::shape(format!("bias {:?} for {co} outputs", tape.value(b).shape())));
        }
    }
    let (ph, pw) = (same_padding(kh, dilation), same_padding(kw, dilation));
    let span_h = dilation * (kh - 1) + 1;
    let span_w = dilation * (kw - 1) + 1;
    if h + 2 * ph < span_h || w + 2 * pw < span_w {
        return Err(Error::shape(format!("input {h}x{w} smaller than kernel footprint")));
    }
    let ho = (h + 2 * ph - span_h) / stride + 1;
    let wo = (w + 2 * pw - span_w) / stride + 1;
    let g = ConvGeom {
        n,
        ci,
        h,
        w,
        co,
        kh,
        kw,
        stride,
        dil: dilation,
        groups,
        ph,
        pw,
        ho,
        wo,
    };
    let out = conv_forward(
        &g,
        tape.value(x).data(),
        tape.value(weight).data(),
        bias.map(|b| tape.value(b).data()),
    );
    let out = Tensor::new(vec![n, co, ho, wo], out)?;
    let mut parents = vec![x, weight];
    parents.extend(bias);
    tape.push(out, &parents, move |args| {
        let (dx, dw) = conv_backward(
            &g,
            args.inputs[0].data(),
            args.inputs[1].data(),
            args.grad.data(),
            args.needs[0],
            args.needs[1],
        );
        let mut grads = vec![
            dx.map(|d| Tensor::new(args.inputs[0].shape().to_vec(), d).expect("dx shape")),
            dw.map(|d| Tensor::new(args.inputs[1].shape().to_vec(), d).expect("dw shape")),
        ];
        if args.inputs.len() == 3 {
            let gb = args.needs[2].then(|| {
                let mut db = vec![T::zero(); g.co];
                for n in 0..g.n {
                    for (c, acc) in db.iter_mut().enumerate() {
                        *acc += args.grad.data()[(n * g.co + c) * g.hw_out()..][..g.hw_out()]
                            .iter()
                            .copied()
                            .sum();
                    }
                }
                Tensor::new(vec![g.co], db).expect("db shape")
            });
            grads.push(gb);
        }
        grads
    })
}

/// `max(x, 0)`, propagating NaN.
pub fn relu<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let out = tape.value(x).map(|v| if v < T::zero() { T::zero() } else { v });
    tape.push(out, &[x], |args| {
        let g = args
            .grad
            .zip_map(args.output, |g, y| if y > T::zero() { g } else { T::zero() })
            .expect("same shape");
        vec![Some(g)]
    })
}

/// Per-channel batch statistics produced in training mode: mean and
/// unbiased variance.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var_unbiased: Vec<T>,
}

/// Batch normalization over `(N, H, W)` per channel.
///
/// Training mode normalizes with batch statistics and returns them for a
/// running-average update; evaluation mode uses `running = (mean, var)`.
pub fn batch_norm<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    gamma: Var,
    shift: Var,
    running: (&Tensor<T>, &Tensor<T>),
    training: bool,
    eps: f64,
) -> Result<(Var, Option<BatchStats<T>>)> {
    let (n, c, h, w) = tape.value(x).dims4()?;
    for (what, v) in [("gamma", gamma), ("shift", shift)] {
        if tape.value(v).shape() != [c] {
            return Err(Error::shape(format!(
                "batch-norm {what} {:?} for {c} channels",
                tape.value(v).shape()
            )));
        }
    }
    if running.0.numel() != c || running.1.numel() != c {
        return Err(Error::shape(format!("running statistics do not match {c} channels")));
    }
    let hw = h * w;
    let count = n * hw;
    let eps = T::of(eps);
    let xv = tape.value(x).data();
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    let mut stats = None;
    if training {
        let cnt = T::of(count as f64);
        for ch in 0..c {
            let mut s = T::zero();
            for b in 0..n {
                s += xv[(b * c + ch) * hw..][..hw].iter().copied().sum::<T>();
            }
            let m = s / cnt;
            let mut q = T::zero();
            for b in 0..n {
                for &v in &xv[(b * c + ch) * hw..][..hw] {
                    q += (v - m) * (v - m);
                }
            }
            mean[ch] = m;
            var[ch] = q / cnt;
        }
        let unbiased = if count > 1 {
            var.iter().map(|&v| v * cnt / T::of((count - 1) as f64)).collect()
        } else {
            var.clone()
        };
        stats = Some(BatchStats {
            mean: mean.clone(),
            var_unbiased: unbiased,
        });
    } else {
        mean.copy_from_slice(running.0.data());
        var.copy_from_slice(running.1.data());
    }
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let gv = tape.value(gamma).data().to_vec();
    let bv = tape.value(shift).data();
    let mut xhat = vec![T::zero(); xv.len()];
    let mut out = vec![T::zero(); xv.len()];
    for b in 0..n {
        for ch in 0..c {
            let off = (b * c + ch) * hw;
            for i in off..off + hw {
                let xh = (xv[i] - mean[ch]) * inv_std[ch];
                xhat[i] = xh;
                out[i] = gv[ch] * xh + bv[ch];
            }
        }
    }
    let out = Tensor::new(vec![n, c, h, w], out)?;
    let var_out = tape.push(out, &[x, gamma, shift], move |args| {
        let dy = args.grad.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dshift = vec![T::zero(); c];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * hw;
                for i in off..off + hw {
                    dgamma[ch] += dy[i] * xhat[i];
                    dshift[ch] += dy[i];
                }
            }
        }
        let dx = args.needs[0].then(|| {
            let mut dx = vec![T::zero(); dy.len()];
            let cnt = T::of(count as f64);
            for ch in 0..c {
                let k = gv[ch] * inv_std[ch];
                let (mdy, mdyx) = if training {
                    (dshift[ch] / cnt, dgamma[ch] / cnt)
                } else {
                    (T::zero(), T::zero())
                };
                for b in 0..n {
                    let off = (b * c + ch) * hw;
                    for i in off..off + hw {
                        dx[i] = k * (dy[i] - mdy - xhat[i] * mdyx);
                    }
                }
            }
            Tensor::new(vec![n, c, h, w], dx).expect("dx shape")
        });
        vec![
            dx,
            Some(Tensor::new(vec![c], dgamma).expect("shape")),
            Some(Tensor::new(vec![c], dshift).expect("shape")),
        ]
    })?;
    Ok((var_out, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Avg,
    Max,
}

/// `k×k` stride-1 pooling with same padding. Average pooling divides by
/// the number of in-bounds elements; max pooling ignores the padding.
pub fn pool2d<T: Scalar>(tape: &mut Tape<T>, x: Var, kind: PoolKind, k: usize) -> Result<Var> {
    if k % 2 == 0 {
        return Err(Error::invalid("pooling kernel must be odd"));
    }
    let (n, c, h, w) = tape.value(x).dims4()?;
    let r = k / 2;
    let xv = tape.value(x).data();
    let mut out = vec![T::zero(); xv.len()];
    let mut argmax: Vec<u32> = Vec::new();
    if kind == PoolKind::Max {
        argmax = vec![0; xv.len()];
    }
    for p in 0..n * c {
        let plane = &xv[p * h * w..][..h * w];
        for y in 0..h {
            let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
            for xx in 0..w {
                let (x0, x1) = (xx.saturating_sub(r), (xx + r + 1).min(w));
                let o = p * h * w + y * w + xx;
                match kind {
                    PoolKind::Avg => {
                        let mut s = T::zero();
                        for yy in y0..y1 {
                            for v in &plane[yy * w + x0..yy * w + x1] {
                                s += *v;
                            }
                        }
                        out[o] = s / T::of(((y1 - y0) * (x1 - x0)) as f64);
                    }
                    PoolKind::Max => {
                        let mut best = T::neg_infinity();
                        let mut at = 0;
                        for yy in y0..y1 {
                            for ix in x0..x1 {
                                let v = plane[yy * w + ix];
                                if v > best {
                                    best = v;
                                    at = yy * w + ix;
                                }
                            }
                        }
                        out[o] = best;
                        argmax[o] = at as u32;
                    }
                }
            }
        }
    }
    let out = Tensor::new(vec![n, c, h, w], out)?;
    tape.push(out, &[x], move |args| {
        let dy = args.grad.data();
        let mut dx = vec![T::zero(); dy.len()];
        for p in 0..n * c {
            let base = p * h * w;
            for y in 0..h {
                let (y0, y1) = (y.saturating_sub(r), (y + r + 1).min(h));
                for xx in 0..w {
                    let o = base + y * w + xx;
                    match kind {
                        PoolKind::Avg => {
                            let (x0, x1) = (xx.saturating_sub(r), (xx + r + 1).min(w));
                            let share = dy[o] / T::of(((y1 - y0) * (x1 - x0)) as f64);
                            for yy in y0..y1 {
                                for d in &mut dx[base + yy * w + x0..base + yy * w + x1] {
                                    *d += share;
                                }
                            }
                        }
                        PoolKind::Max => dx[base + argmax[o] as usize] += dy[o],
                    }
                }
            }
        }
        vec![Some(Tensor::new(vec![n, c, h, w], dx).expect("shape"))]
    })
}

/// Source taps for one axis of a half-pixel bilinear resize.
fn bilinear_taps(out_len: usize, in_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(in_len - 1);
            let i1 = (i0 + 1).min(in_len - 1);
            (i0, i1, src - i0 as f64)
        })
        .collect()
}

/// Output extent `round(len · factor)` for a resampling factor.
pub fn scaled_extent(len: usize, factor: f64) -> Result<usize> {
    let out = (len as f64 * factor).round();
    if out < 1.0 {
        return Err(Error::shape(format!("resizing {len} by {factor} leaves no pixels")));
    }
    Ok(out as usize)
}

/// Bilinear resampling with half-pixel centers (corners not aligned).
pub fn resize_bilinear<T: Scalar>(tape: &mut Tape<T>, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
    let (n, c, h, w) = tape.value(x).dims4()?;
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("empty resize target"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(x);
    }
    let ty: Vec<(usize, usize, T)> = bilinear_taps(out_h, h).into_iter().map(|(a, b, l)| (a, b, T::of(l))).collect();
    let tx: Vec<(usize, usize, T)> = bilinear_taps(out_w, w).into_iter().map(|(a, b, l)| (a, b, T::of(l))).collect();
    let xv = tape.value(x).data();
    let mut out = vec![T::zero(); n * c * out_h * out_w];
    let one = T::one();
    for p in 0..n * c {
        let src = &xv[p * h * w..][..h * w];
        let dst = &mut out[p * out_h * out_w..][..out_h * out_w];
        for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                let top = src[y0 * w + x0] * (one - lx) + src[y0 * w + x1] * lx;
                let bot = src[y1 * w + x0] * (one - lx) + src[y1 * w + x1] * lx;
                dst[oy * out_w + ox] = top * (one - ly) + bot * ly;
            }
        }
    }
    let out = Tensor::new(vec![n, c, out_h, out_w], out)?;
    tape.push(out, &[x], move |args| {
        let dy = args.grad.data();
        let mut dx = vec![T::zero(); n * c * h * w];
        for p in 0..n * c {
            let g = &dy[p * out_h * out_w..][..out_h * out_w];
            let d = &mut dx[p * h * w..][..h * w];
            for (oy, &(y0, y1, ly)) in ty.iter().enumerate() {
                for (ox, &(x0, x1, lx)) in tx.iter().enumerate() {
                    let gv = g[oy * out_w + ox];
                    let (gt, gb) = (gv * (one - ly), gv * ly);
                    d[y0 * w + x0] += gt * (one - lx);
                    d[y0 * w + x1] += gt * lx;
                    d[y1 * w + x0] += gb * (one - lx);
                    d[y1 * w + x1] += gb * lx;
                }
            }
        }
        vec![Some(Tensor::new(vec![n, c, h, w], dx).expect("shape"))]
    })
}

/// Resize by a scale factor; the extent is `round(in · factor)`.
pub fn resize_by<T: Scalar>(tape: &mut Tape<T>, x: Var, factor: f64) -> Result<Var> {
    let (_, _, h, w) = tape.value(x).dims4()?;
    let (oh, ow) = (scaled_extent(h, factor)?, scaled_extent(w, factor)?);
    resize_bilinear(tape, x, oh, ow)
}

/// Concatenation along the channel axis.
pub fn concat_channels<T: Scalar>(tape: &mut Tape<T>, xs: &[Var]) -> Result<Var> {
    let first = *xs.first().ok_or_else(|| Error::invalid("concat of zero tensors"))?;
    let (n, _, h, w) = tape.value(first).dims4()?;
    let mut chans = Vec::with_capacity(xs.len());
    for &x in xs {
        let (xn, xc, xh, xw) = tape.value(x).dims4()?;
        if (xn, xh, xw) != (n, h, w) {
            return Err(Error::shape(format!(
                "concat {:?} with {:?}",
                tape.value(first).shape(),
                tape.value(x).shape()
            )));
        }
        chans.push(xc);
    }
    let total: usize = chans.iter().sum();
    let hw = h * w;
    let mut out = vec![T::zero(); n * total * hw];
    for b in 0..n {
        let mut c0 = 0;
        for (&x, &c) in xs.iter().zip(&chans) {
            let src = &tape.value(x).data()[b * c * hw..][..c * hw];
            out[(b * total + c0) * hw..][..c * hw].copy_from_slice(src);
            c0 += c;
        }
    }
    let out = Tensor::new(vec![n, total, h, w], out)?;
    tape.push(out, xs, move |args| {
        let mut c0 = 0;
        chans
            .iter()
            .enumerate()
            .map(|(i, &c)| {
                let g = args.needs[i].then(|| {
                    let mut d = vec![T::zero(); n * c * hw];
                    for b in 0..n {
                        d[b * c * hw..][..c * hw].copy_from_slice(&args.grad.data()[(b * total + c0) * hw..][..c * hw]);
                    }
                    Tensor::new(vec![n, c, h, w], d).expect("shape")
                });
                c0 += c;
                g
            })
            .collect()
    })
}

/// Mean over the spatial axes, keeping `(N, C, 1, 1)`.
pub fn global_avg_pool<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (n, c, h, w) = tape.value(x).dims4()?;
    let hw = h * w;
    let scale = T::one() / T::of(hw as f64);
    let out: Vec<T> = tape
        .value(x)
        .data()
        .chunks(hw)
        .map(|p| p.iter().copied().sum::<T>() * scale)
        .collect();
    let out = Tensor::new(vec![n, c, 1, 1], out)?;
    tape.push(out, &[x], move |args| {
        let mut d = Vec::with_capacity(n * c * hw);
        for &g in args.grad.data() {
            d.extend(std::iter::repeat_n(g * scale, hw));
        }
        vec![Some(Tensor::new(vec![n, c, h, w], d).expect("shape"))]
    })
}

/// Softmax over the channel axis of an NCHW tensor.
pub fn softmax_channels<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let (n, c, h, w) = tape.value(x).dims4()?;
    let hw = h * w;
    let xv = tape.value(x).data();
    let mut out = vec![T::zero(); xv.len()];
    for b in 0..n {
        for p in 0..hw {
            let idx = |ch: usize| (b * c + ch) * hw + p;
            let mx = (0..c).map(|ch| xv[idx(ch)]).fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for ch in 0..c {
                let e = (xv[idx(ch)] - mx).exp();
                out[idx(ch)] = e;
                z += e;
            }
            for ch in 0..c {
                out[idx(ch)] /= z;
            }
        }
    }
    let out = Tensor::new(vec![n, c, h, w], out)?;
    tape.push(out, &[x], move |args| {
        let y = args.output.data();
        let g = args.grad.data();
        let mut d = vec![T::zero(); y.len()];
        for b in 0..n {
            for p in 0..hw {
                let idx = |ch: usize| (b * c + ch) * hw + p;
                let dot: T = (0..c).map(|ch| g[idx(ch)] * y[idx(ch)]).sum();
                for ch in 0..c {
                    d[idx(ch)] = y[idx(ch)] * (g[idx(ch)] - dot);
                }
            }
        }
        vec![Some(Tensor::new(vec![n, c, h, w], d).expect("shape"))]
    })
}

/// Mean pixel cross-entropy.
#[derive(Debug, Clone, Copy)]
pub struct CrossEntropy {
    pub loss: Var,
    /// Number of pixels that contributed; zero means every label was ignored
    /// and the loss is exactly 0.
    pub counted: usize,
}

/// Mean negative log-softmax over pixels whose label differs from
/// `ignore_index`. `labels` is `(N, H, W)` row-major.
pub fn softmax_cross_entropy<T: Scalar>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &[u8],
    ignore_index: u8,
) -> Result<CrossEntropy> {
    let (n, c, h, w) = tape.value(logits).dims4()?;
    let hw = h * w;
    if labels.len() != n * hw {
        return Err(Error::shape(format!(
            "{} labels for logits {:?}",
            labels.len(),
            tape.value(logits).shape()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l != ignore_index && l as usize >= c) {
        return Err(Error::invalid(format!("label {bad} outside [0, {c}) and not ignore index {ignore_index}")));
    }
    let xv = tape.value(logits).data();
    let counted = labels.iter().filter(|&&l| l != ignore_index).count();
    let mut total = T::zero();
    for b in 0..n {
        for p in 0..hw {
            let l = labels[b * hw + p];
            if l == ignore_index {
                continue;
            }
            let idx = |ch: usize| (b * c + ch) * hw + p;
            let mx = (0..c).map(|ch| xv[idx(ch)]).fold(T::neg_infinity(), T::max);
            let z: T = (0..c).map(|ch| (xv[idx(ch)] - mx).exp()).sum();
            total += mx + z.ln() - xv[idx(l as usize)];
        }
    }
    let denom = T::of(counted.max(1) as f64);
    let loss = Tensor::scalar(if counted == 0 { T::zero() } else { total / denom });
    let labels = labels.to_vec();
    let loss = tape.push(loss, &[logits], move |args| {
        let xv = args.inputs[0].data();
        let scale = args.grad.item() / denom;
        let mut d = vec![T::zero(); xv.len()];
        for b in 0..n {
            for p in 0..hw {
                let l = labels[b * hw + p];
                if l == ignore_index {
                    continue;
                }
                let idx = |ch: usize| (b * c + ch) * hw + p;
                let mx = (0..c).map(|ch| xv[idx(ch)]).fold(T::neg_infinity(), T::max);
                let z: T = (0..c).map(|ch| (xv[idx(ch)] - mx).exp()).sum();
                for ch in 0..c {
                    let pr = (xv[idx(ch)] - mx).exp() / z;
                    let target = if ch == l as usize { T::one() } else { T::zero() };
                    d[idx(ch)] = (pr - target) * scale;
                }
            }
        }
        vec![Some(Tensor::new(vec![n, c, h, w], d).expect("shape"))]
    })?;
    Ok(CrossEntropy { loss, counted })
}

/// Per-pixel argmax over channels: `(N, H, W)` labels.
pub fn argmax_channels<T: Scalar>(t: &Tensor<T>) -> Result<Vec<u8>> {
    let (n, c, h, w) = t.dims4()?;
    let hw = h * w;
    let d = t.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for ch in 1..c {
                if d[(b * c + ch) * hw + p] > d[(b * c + best) * hw + p] {
                    best = ch;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

//! Convolution kernels on raw row-major buffers (cross-correlation, no flip).

/// Gradients for input, weight and bias; `None` where not requested.
pub(crate) type ConvGrads = (Option<Vec<f64>>, Option<Vec<f64>>, Option<Vec<f64>>);

/// Options for a 1D convolution over `[C × T]` inputs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv1dOpts {
    pub stride: usize,
    pub pad_left: usize,
    pub pad_right: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv1dOpts {
    fn default() -> Self {
        Conv1dOpts { stride: 1, pad_left: 0, pad_right: 0, dilation: 1, groups: 1 }
    }
}

impl Conv1dOpts {
    pub fn padded(padding: usize) -> Self {
        Conv1dOpts { pad_left: padding, pad_right: padding, ..Default::default() }
    }

    /// Length-preserving padding for a stride-1 convolution. Even effective
    /// kernels put the extra sample on the right.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        let total = dilation * (kernel - 1);
        Conv1dOpts {
            pad_left: total / 2,
            pad_right: total - total / 2,
            dilation,
            ..Default::default()
        }
    }

    pub fn stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dOpts {
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

impl Default for Conv2dOpts {
    fn default() -> Self {
        Conv2dOpts { stride: (1, 1), padding: (0, 0) }
    }
}

/// `None` when the padded input is shorter than the dilated kernel.
pub fn conv1d_out_len(len: usize, kernel: usize, opts: &Conv1dOpts) -> Option<usize> {
    let span = opts.dilation * (kernel - 1) + 1;
    let padded = len + opts.pad_left + opts.pad_right;
    (padded >= span).then(|| (padded - span) / opts.stride + 1)
}

pub fn conv2d_out_len(
    (h, w): (usize, usize),
    (kh, kw): (usize, usize),
    opts: &Conv2dOpts,
) -> Option<(usize, usize)> {
    let oh = conv1d_out_len(h, kh, &Conv1dOpts::padded(opts.padding.0).stride(opts.stride.0))?;
    let ow = conv1d_out_len(w, kw, &Conv1dOpts::padded(opts.padding.1).stride(opts.stride.1))?;
    Some((oh, ow))
}

/// `(T − 1)·stride − 2·padding + kernel`, or `None` if that is not positive.
pub fn conv_transpose1d_out_len(len: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let full = (len - 1) * stride + kernel;
    (full > 2 * padding).then(|| full - 2 * padding)
}

/// Range of output positions `t` with `0 <= t*stride + offset < len`.
#[inline]
fn valid_range(offset: isize, stride: usize, len: usize, out_len: usize) -> (usize, usize) {
    let s = stride as isize;
    let lo = if offset < 0 { ((-offset) + s - 1) / s } else { 0 };
    let last = len as isize - 1 - offset;
    if last < 0 {
        return (0, 0);
    }
    let hi = ((last / s) + 1).min(out_len as isize);
    let lo = lo.min(hi);
    (lo as usize, hi as usize)
}

pub(crate) struct Conv1dGeom {
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub out_len: usize,
    pub opts: Conv1dOpts,
}

impl Conv1dGeom {
    fn cin_per_group(&self) -> usize {
        self.c_in / self.opts.groups
    }

    fn cout_per_group(&self) -> usize {
        self.c_out / self.opts.groups
    }

    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, isize)) {
        let cin_g = self.cin_per_group();
        let cout_g = self.cout_per_group();
        for oc in 0..self.c_out {
            let g = oc / cout_g;
            for icg in 0..cin_g {
                let ic = g * cin_g + icg;
                for tap in 0..self.kernel {
                    let w_idx = (oc * cin_g + icg) * self.kernel + tap;
                    let offset = (tap * self.opts.dilation) as isize - self.opts.pad_left as isize;
                    f(oc, ic, icg, tap, w_idx, offset);
                }
            }
        }
    }
}

pub(crate) fn conv1d_forward(geom: &Conv1dGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let Conv1dGeom { len, out_len, .. } = *geom;
    let stride = geom.opts.stride;
    let mut out = vec![0.0; geom.c_out * out_len];
    if let Some(b) = b {
        for (oc, row) in out.chunks_mut(out_len).enumerate() {
            row.iter_mut().for_each(|v| *v = b[oc]);
        }
    }
    geom.for_each_tap(|oc, ic, _, _, w_idx, offset| {
        let wv = w[w_idx];
        if wv == 0.0 {
            return;
        }
        let (lo, hi) = valid_range(offset, stride, len, out_len);
        if lo >= hi {
            return;
        }
        let xr = &x[ic * len..(ic + 1) * len];
        let orow = &mut out[oc * out_len..(oc + 1) * out_len];
        if stride == 1 {
            let start = (lo as isize + offset) as usize;
            for (o, xv) in orow[lo..hi].iter_mut().zip(&xr[start..start + (hi - lo)]) {
                *o += wv * xv;
            }
        } else {
            for t in lo..hi {
                orow[t] += wv * xr[(t as isize * stride as isize + offset) as usize];
            }
        }
    });
    out
}

/// Returns `(grad_x, grad_w, grad_b)`; each is computed only when requested.
pub(crate) fn conv1d_backward(
    geom: &Conv1dGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let Conv1dGeom { len, out_len, .. } = *geom;
    let stride = geom.opts.stride as isize;
    let mut gx = need.0.then(|| vec![0.0; x.len()]);
    let mut gw = need.1.then(|| vec![0.0; w.len()]);
    let gb = need.2.then(|| gout.chunks(out_len).map(|r| r.iter().sum()).collect());
    if gx.is_none() && gw.is_none() {
        return (gx, gw, gb);
    }
    geom.for_each_tap(|oc, ic, _, _, w_idx, offset| {
        let (lo, hi) = valid_range(offset, stride as usize, len, out_len);
        let grow = &gout[oc * out_len..(oc + 1) * out_len];
        let base = ic * len;
        if let Some(gw) = gw.as_mut() {
            let mut acc = 0.0;
            for t in lo..hi {
                acc += grow[t] * x[base + (t as isize * stride + offset) as usize];
            }
            gw[w_idx] += acc;
        }
        if let Some(gx) = gx.as_mut() {
            let wv = w[w_idx];
            for t in lo..hi {
                gx[base + (t as isize * stride + offset) as usize] += wv * grow[t];
            }
        }
    });
    (gx, gw, gb)
}

pub(crate) struct Conv2dGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub oh: usize,
    pub ow: usize,
    pub opts: Conv2dOpts,
}

impl Conv2dGeom {
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, (usize, usize), (usize, usize), (isize, isize))) {
        let (sh, sw) = self.opts.stride;
        for oc in 0..self.c_out {
            for ic in 0..self.c_in {
                for ki in 0..self.kh {
                    let off_h = ki as isize - self.opts.padding.0 as isize;
                    let rows = valid_range(off_h, sh, self.h, self.oh);
                    for kj in 0..self.kw {
                        let off_w = kj as isize - self.opts.padding.1 as isize;
                        let cols = valid_range(off_w, sw, self.w, self.ow);
                        let w_idx = ((oc * self.c_in + ic) * self.kh + ki) * self.kw + kj;
                        f(oc, ic, w_idx, rows, cols, (off_h, off_w));
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward(geom: &Conv2dGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let (sh, sw) = (geom.opts.stride.0 as isize, geom.opts.stride.1 as isize);
    let plane_in = geom.h * geom.w;
    let plane_out = geom.oh * geom.ow;
    let mut out = vec![0.0; geom.c_out * plane_out];
    if let Some(b) = b {
        for (oc, p) in out.chunks_mut(plane_out).enumerate() {
            p.iter_mut().for_each(|v| *v = b[oc]);
        }
    }
    geom.for_each_tap(|oc, ic, w_idx, (r0, r1), (c0, c1), (off_h, off_w)| {
        let wv = w[w_idx];
        if wv == 0.0 || c0 >= c1 {
            return;
        }
        let xin = &x[ic * plane_in..(ic + 1) * plane_in];
        let o = &mut out[oc * plane_out..(oc + 1) * plane_out];
        for r in r0..r1 {
            let ir = (r as isize * sh + off_h) as usize;
            let xrow = &xin[ir * geom.w..(ir + 1) * geom.w];
            let orow = &mut o[r * geom.ow..(r + 1) * geom.ow];
            if sw == 1 {
                let start = (c0 as isize + off_w) as usize;
                for (ov, xv) in orow[c0..c1].iter_mut().zip(&xrow[start..start + (c1 - c0)]) {
                    *ov += wv * xv;
                }
            } else {
                for c in c0..c1 {
                    orow[c] += wv * xrow[(c as isize * sw + off_w) as usize];
                }
            }
        }
    });
    out
}

pub(crate) fn conv2d_backward(
    geom: &Conv2dGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let (sh, sw) = (geom.opts.stride.0 as isize, geom.opts.stride.1 as isize);
    let plane_in = geom.h * geom.w;
    let plane_out = geom.oh * geom.ow;
    let mut gx = need.0.then(|| vec![0.0; x.len()]);
    let mut gw = need.1.then(|| vec![0.0; w.len()]);
    let gb = need.2.then(|| gout.chunks(plane_out).map(|p| p.iter().sum()).collect());
    if gx.is_none() && gw.is_none() {
        return (gx, gw, gb);
    }
    geom.for_each_tap(|oc, ic, w_idx, (r0, r1), (c0, c1), (off_h, off_w)| {
        if c0 >= c1 {
            return;
        }
        let go = &gout[oc * plane_out..(oc + 1) * plane_out];
        let wv = w[w_idx];
        let mut acc = 0.0;
        for r in r0..r1 {
            let ir = (r as isize * sh + off_h) as usize;
            let row_base = ic * plane_in + ir * geom.w;
            let grow = &go[r * geom.ow..(r + 1) * geom.ow];
            for c in c0..c1 {
                let xi = row_base + (c as isize * sw + off_w) as usize;
                if gw.is_some() {
                    acc += grow[c] * x[xi];
                }
                if let Some(gx) = gx.as_mut() {
                    gx[xi] += wv * grow[c];
                }
            }
        }
        if let Some(gw) = gw.as_mut() {
            gw[w_idx] += acc;
        }
    });
    (gx, gw, gb)
}

/// Transposed 1D convolution geometry. Weight layout is `[C_in × C_out × k]`.
pub(crate) struct ConvT1dGeom {
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_len: usize,
}

impl ConvT1dGeom {
    /// Visits every (ic, oc, tap) with the valid input range; output index is
    /// `t*stride + tap - padding`.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, isize, (usize, usize))) {
        for ic in 0..self.c_in {
            for oc in 0..self.c_out {
                for tap in 0..self.kernel {
                    let w_idx = (ic * self.c_out + oc) * self.kernel + tap;
                    let offset = tap as isize - self.padding as isize;
                    // need 0 <= t*stride + offset < out_len for t in [0, len)
                    let range = valid_range(offset, self.stride, self.out_len, self.len);
                    f(ic, oc, w_idx, offset, range);
                }
            }
        }
    }
}

pub(crate) fn conv_transpose1d_forward(geom: &ConvT1dGeom, x: &[f64], w: &[f64], b: Option<&[f64]>) -> Vec<f64> {
    let s = geom.stride as isize;
    let mut out = vec![0.0; geom.c_out * geom.out_len];
    if let Some(b) = b {
        for (oc, row) in out.chunks_mut(geom.out_len).enumerate() {
            row.iter_mut().for_each(|v| *v = b[oc]);
        }
    }
    geom.for_each_tap(|ic, oc, w_idx, offset, (lo, hi)| {
        let wv = w[w_idx];
        if wv == 0.0 {
            return;
        }
        let xr = &x[ic * geom.len..(ic + 1) * geom.len];
        let orow = &mut out[oc * geom.out_len..(oc + 1) * geom.out_len];
        for t in lo..hi {
            orow[(t as isize * s + offset) as usize] += wv * xr[t];
        }
    });
    out
}

pub(crate) fn conv_transpose1d_backward(
    geom: &ConvT1dGeom,
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    need: (bool, bool, bool),
) -> ConvGrads {
    let s = geom.stride as isize;
    let mut gx = need.0.then(|| vec![0.0; x.len()]);
    let mut gw = need.1.then(|| vec![0.0; w.len()]);
    let gb = need.2.then(|| gout.chunks(geom.out_len).map(|r| r.iter().sum()).collect());
    if gx.is_none() && gw.is_none() {
        return (gx, gw, gb);
    }
    geom.for_each_tap(|ic, oc, w_idx, offset, (lo, hi)| {
        let grow = &gout[oc * geom.out_len..(oc + 1) * geom.out_len];
        let base = ic * geom.len;
        let wv = w[w_idx];
        let mut acc = 0.0;
        for t in lo..hi {
            let g = grow[(t as isize * s + offset) as usize];
            acc += g * x[base + t];
            if let Some(gx) = gx.as_mut() {
                gx[base + t] += wv * g;
            }
        }
        if let Some(gw) = gw.as_mut() {
            gw[w_idx] += acc;
        }
    });
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_clips_both_ends() {
        // offset -2, stride 1, len 5, out 5: t in [2, 5)
        assert_eq!(valid_range(-2, 1, 5, 5), (2, 5));
        // offset 2: t + 2 < 5 → t < 3
        assert_eq!(valid_range(2, 1, 5, 5), (0, 3));
        // stride 3, offset -2: t*3-2 >= 0 → t >= 1; t*3-2 <= 9 → t <= 3
        assert_eq!(valid_range(-2, 3, 10, 10), (1, 4));
        assert_eq!(valid_range(20, 1, 5, 5), (0, 0));
    }

    #[test]
    fn output_lengths() {
        assert_eq!(conv1d_out_len(3, 2, &Conv1dOpts::default()), Some(2));
        assert_eq!(conv1d_out_len(4, 2, &Conv1dOpts { dilation: 2, ..Default::default() }), Some(2));
        assert_eq!(conv1d_out_len(1, 3, &Conv1dOpts::default()), None);
        assert_eq!(conv_transpose1d_out_len(64, 16, 8, 4), Some(512));
        for (k, d) in [(2, 1), (7, 3), (11, 5), (2, 5)] {
            assert_eq!(conv1d_out_len(17, k, &Conv1dOpts::same(k, d)), Some(17));
        }
    }
}

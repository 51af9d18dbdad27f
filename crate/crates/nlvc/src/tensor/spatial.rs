//! Spatial kernels on CxHxW nodes: convolution, 2x resampling, warping.

use std::sync::Arc;

use super::{Flow, Graph, Op, TensorId};
use crate::error::{Error, Result};

impl Graph {
    /// 2-D cross correlation with zero padding.
    ///
    /// `x` is CinxHxW, `w` is Cout x (Cin/groups) x k x k, `b` an optional
    /// Cout bias. `groups == Cin == Cout` gives the depth-wise variant.
    pub fn conv2d(
        &mut self,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<TensorId> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 4 {
            return Err(Error::dimension("conv2d expects CxHxW input and OxIxKxK weights"));
        }
        let (c_in, h, wd) = (xs[0], xs[1], xs[2]);
        let (c_out, c_in_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if kh != kw {
            return Err(Error::dimension("conv2d kernels must be square"));
        }
        if stride == 0 || groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(Error::dimension("conv2d: invalid stride/groups"));
        }
        if c_in / groups != c_in_g {
            return Err(Error::dimension(format!(
                "conv2d: weight input channels {} do not match {}/{} groups",
                c_in_g, c_in, groups
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(Error::dimension("conv2d: bias length must equal output channels"));
            }
        }
        if h + 2 * padding < kh || wd + 2 * padding < kw {
            return Err(Error::dimension("conv2d: kernel larger than padded input"));
        }
        let oh = (h + 2 * padding - kh) / stride + 1;
        let ow = (wd + 2 * padding - kw) / stride + 1;

        let mut out = vec![0.0; c_out * oh * ow];
        {
            let xd = self.data(x);
            let wdat = self.data(w);
            let cpg_out = c_out / groups;
            for co in 0..c_out {
                let grp = co / cpg_out;
                let obase = co * oh * ow;
                for ci_g in 0..c_in_g {
                    let ci = grp * c_in_g + ci_g;
                    let xplane = &xd[ci * h * wd..(ci + 1) * h * wd];
                    let wbase = (co * c_in_g + ci_g) * kh * kw;
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let wv = wdat[wbase + ky * kw + kx];
                            if wv == 0.0 {
                                continue;
                            }
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - padding as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let xrow = &xplane[iy as usize * wd..(iy as usize + 1) * wd];
                                let orow = &mut out[obase + oy * ow..obase + (oy + 1) * ow];
                                for (ox, o) in orow.iter_mut().enumerate() {
                                    let ix = (ox * stride + kx) as isize - padding as isize;
                                    if ix >= 0 && ix < wd as isize {
                                        *o += wv * xrow[ix as usize];
                                    }
                                }
                            }
                        }
                    }
                }
            }
            if let Some(bid) = b {
                let bd = self.data(bid);
                for co in 0..c_out {
                    let bv = bd[co];
                    for o in &mut out[co * oh * ow..(co + 1) * oh * ow] {
                        *o += bv;
                    }
                }
            }
        }
        let ng = self.needs(x) || self.needs(w) || b.map(|b| self.needs(b)).unwrap_or(false);
        Ok(self.push(out, vec![c_out, oh, ow], ng, Op::Conv2d { x, w, b, stride, padding, groups }))
    }

    #[allow(clippy::too_many_arguments)]
    pub(super) fn conv2d_backward(
        &mut self,
        out_idx: usize,
        x: TensorId,
        w: TensorId,
        b: Option<TensorId>,
        stride: usize,
        padding: usize,
        groups: usize,
        grad: &[f64],
    ) {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (h, wd) = (xs[1], xs[2]);
        let (c_out, c_in_g, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        let (oh, ow) = {
            let s = &self.nodes[out_idx].shape;
            (s[1], s[2])
        };
        let cpg_out = c_out / groups;

        let xd = self.node(x).data.clone();
        let wdat = self.node(w).data.clone();
        let mut dx = vec![0.0; xd.len()];
        let mut dw = vec![0.0; wdat.len()];
        for co in 0..c_out {
            let grp = co / cpg_out;
            let gplane = &grad[co * oh * ow..(co + 1) * oh * ow];
            for ci_g in 0..c_in_g {
                let ci = grp * c_in_g + ci_g;
                let xplane = &xd[ci * h * wd..(ci + 1) * h * wd];
                let dxplane = &mut dx[ci * h * wd..(ci + 1) * h * wd];
                let wbase = (co * c_in_g + ci_g) * kh * kw;
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = wdat[wbase + ky * kw + kx];
                        let mut wacc = 0.0;
                        for oy in 0..oh {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            let row = iy as usize * wd;
                            let grow = &gplane[oy * ow..(oy + 1) * ow];
                            for (ox, &gv) in grow.iter().enumerate() {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix >= 0 && ix < wd as isize {
                                    let xi = row + ix as usize;
                                    wacc += gv * xplane[xi];
                                    dxplane[xi] += gv * wv;
                                }
                            }
                        }
                        dw[wbase + ky * kw + kx] += wacc;
                    }
                }
            }
        }
        self.accumulate(x, &dx);
        self.accumulate(w, &dw);
        if let Some(bid) = b {
            let mut db = vec![0.0; c_out];
            for (co, d) in db.iter_mut().enumerate() {
                *d = grad[co * oh * ow..(co + 1) * oh * ow].iter().sum();
            }
            self.accumulate(bid, &db);
        }
    }

    /// 2x2 average pooling; requires even spatial extents.
    pub fn down2(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dimension("down2 expects CxHxW"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::dimension(format!("down2 requires even extents, got {h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xd = self.data(x);
        let mut out = vec![0.0; c * oh * ow];
        for ch in 0..c {
            let plane = &xd[ch * h * w..(ch + 1) * h * w];
            let oplane = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for oy in 0..oh {
                for ox in 0..ow {
                    let base = 2 * oy * w + 2 * ox;
                    oplane[oy * ow + ox] =
                        0.25 * (plane[base] + plane[base + 1] + plane[base + w] + plane[base + w + 1]);
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, vec![c, oh, ow], ng, Op::Down2(x)))
    }

    pub(super) fn down2_backward(&mut self, x: TensorId, grad: &[f64]) {
        let s = self.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (h / 2, w / 2);
        let mut dx = vec![0.0; c * h * w];
        for ch in 0..c {
            let gplane = &grad[ch * oh * ow..(ch + 1) * oh * ow];
            let dplane = &mut dx[ch * h * w..(ch + 1) * h * w];
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = 0.25 * gplane[oy * ow + ox];
                    let base = 2 * oy * w + 2 * ox;
                    dplane[base] += g;
                    dplane[base + 1] += g;
                    dplane[base + w] += g;
                    dplane[base + w + 1] += g;
                }
            }
        }
        self.accumulate(x, &dx);
    }

    /// Bilinear 2x upsample (half-pixel sampling, linear extrapolation at
    /// the borders so that `down2(up2(x))` is exact on affine images).
    pub fn up2(&mut self, x: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dimension("up2 expects CxHxW"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let row_taps = up2_taps(w);
        let col_taps = up2_taps(h);
        let xd = self.data(x);
        let mut out = vec![0.0; c * oh * ow];
        let mut tmp = vec![0.0; h * ow];
        for ch in 0..c {
            let plane = &xd[ch * h * w..(ch + 1) * h * w];
            // widen rows
            for y in 0..h {
                let src = &plane[y * w..(y + 1) * w];
                let dst = &mut tmp[y * ow..(y + 1) * ow];
                for (ox, t) in row_taps.iter().enumerate() {
                    dst[ox] = t.w0 * src[t.i0] + t.w1 * src[t.i1];
                }
            }
            // widen columns
            let oplane = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
            for (oy, t) in col_taps.iter().enumerate() {
                let r0 = &tmp[t.i0 * ow..(t.i0 + 1) * ow];
                let r1 = &tmp[t.i1 * ow..(t.i1 + 1) * ow];
                let dst = &mut oplane[oy * ow..(oy + 1) * ow];
                for ((d, a), b) in dst.iter_mut().zip(r0).zip(r1) {
                    *d = t.w0 * a + t.w1 * b;
                }
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, vec![c, oh, ow], ng, Op::Up2(x)))
    }

    pub(super) fn up2_backward(&mut self, x: TensorId, grad: &[f64]) {
        let s = self.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let (oh, ow) = (2 * h, 2 * w);
        let row_taps = up2_taps(w);
        let col_taps = up2_taps(h);
        let mut dx = vec![0.0; c * h * w];
        let mut tmp = vec![0.0; h * ow];
        for ch in 0..c {
            tmp.iter_mut().for_each(|v| *v = 0.0);
            let gplane = &grad[ch * oh * ow..(ch + 1) * oh * ow];
            // transpose of column widening
            for (oy, t) in col_taps.iter().enumerate() {
                let grow = &gplane[oy * ow..(oy + 1) * ow];
                for (p, &g) in grow.iter().enumerate() {
                    tmp[t.i0 * ow + p] += t.w0 * g;
                    tmp[t.i1 * ow + p] += t.w1 * g;
                }
            }
            // transpose of row widening
            let dplane = &mut dx[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                let trow = &tmp[y * ow..(y + 1) * ow];
                let drow = &mut dplane[y * w..(y + 1) * w];
                for (ox, t) in row_taps.iter().enumerate() {
                    drow[t.i0] += t.w0 * trow[ox];
                    drow[t.i1] += t.w1 * trow[ox];
                }
            }
        }
        self.accumulate(x, &dx);
    }

    /// Backward-warp features by a fixed flow: output(p) samples the input at
    /// `p - flow(p)` with bilinear weights and clamped borders. The flow is a
    /// constant; gradients reach the features only.
    pub fn warp(&mut self, x: TensorId, flow: &Arc<Flow>) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 {
            return Err(Error::dimension("warp expects CxHxW"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if flow.height != h || flow.width != w {
            return Err(Error::dimension(format!(
                "warp: flow {}x{} does not match features {}x{}",
                flow.height, flow.width, h, w
            )));
        }
        let xd = self.data(x);
        let mut out = vec![0.0; c * h * w];
        for p in 0..h * w {
            let (y, xx) = (p / w, p % w);
            let t = bilinear_taps(xx as f64 - flow.dx[p], y as f64 - flow.dy[p], h, w);
            for ch in 0..c {
                let plane = &xd[ch * h * w..(ch + 1) * h * w];
                out[ch * h * w + p] = t.sample(plane);
            }
        }
        let ng = self.needs(x);
        Ok(self.push(out, vec![c, h, w], ng, Op::Warp { x, flow: flow.clone() }))
    }

    pub(super) fn warp_backward(&mut self, x: TensorId, flow: &Arc<Flow>, grad: &[f64]) {
        let s = self.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut dx = vec![0.0; c * h * w];
        for p in 0..h * w {
            let (y, xx) = (p / w, p % w);
            let t = bilinear_taps(xx as f64 - flow.dx[p], y as f64 - flow.dy[p], h, w);
            for ch in 0..c {
                t.scatter(&mut dx[ch * h * w..(ch + 1) * h * w], grad[ch * h * w + p]);
            }
        }
        self.accumulate(x, &dx);
    }

    /// Warp where the flow itself lives on the tape (a predicted offset
    /// field, 2xHxW). Differentiates through both the features and the
    /// sampling coordinates; the coordinate gradient is zero wherever the
    /// sample clamps at a border.
    pub fn warp_dyn(&mut self, x: TensorId, flow: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        let fs = self.shape(flow).to_vec();
        if s.len() != 3 || fs.len() != 3 || fs[0] != 2 {
            return Err(Error::dimension("warp_dyn expects CxHxW features and 2xHxW flow"));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if fs[1] != h || fs[2] != w {
            return Err(Error::dimension("warp_dyn: flow extents mismatch"));
        }
        let xd = self.data(x);
        let fd = self.data(flow);
        let plane = h * w;
        let mut out = vec![0.0; c * plane];
        for p in 0..plane {
            let (y, xx) = (p / w, p % w);
            let t = bilinear_taps(xx as f64 - fd[p], y as f64 - fd[plane + p], h, w);
            for ch in 0..c {
                out[ch * plane + p] = t.sample(&xd[ch * plane..(ch + 1) * plane]);
            }
        }
        let ng = self.needs(x) || self.needs(flow);
        Ok(self.push(out, vec![c, h, w], ng, Op::WarpDyn { x, flow }))
    }

    pub(super) fn warp_dyn_backward(&mut self, x: TensorId, flow: TensorId, grad: &[f64]) {
        let s = self.shape(x).to_vec();
        let (c, h, w) = (s[0], s[1], s[2]);
        let plane = h * w;
        let xd = self.node(x).data.clone();
        let fd = self.node(flow).data.clone();
        let mut dx = vec![0.0; c * plane];
        let mut dflow = vec![0.0; 2 * plane];
        for p in 0..plane {
            let (y, xx) = (p / w, p % w);
            let t = bilinear_taps(xx as f64 - fd[p], y as f64 - fd[plane + p], h, w);
            let (mut dsx, mut dsy) = (0.0, 0.0);
            for ch in 0..c {
                let g = grad[ch * plane + p];
                let pl = &xd[ch * plane..(ch + 1) * plane];
                t.scatter(&mut dx[ch * plane..(ch + 1) * plane], g);
                let (gx, gy) = t.coord_grad(pl);
                dsx += g * gx;
                dsy += g * gy;
            }
            // sample coord = p - flow, so d/dflow = -d/dcoord
            dflow[p] -= dsx;
            dflow[plane + p] -= dsy;
        }
        self.accumulate(x, &dx);
        self.accumulate(flow, &dflow);
    }

    /// Broadcast multiply of CxHxW features by a 1xHxW mask.
    pub fn mul_spatial(&mut self, x: TensorId, mask: TensorId) -> Result<TensorId> {
        let s = self.shape(x).to_vec();
        let ms = self.shape(mask).to_vec();
        if s.len() != 3 || ms.len() != 3 || ms[0] != 1 || ms[1] != s[1] || ms[2] != s[2] {
            return Err(Error::dimension("mul_spatial expects CxHxW and 1xHxW operands"));
        }
        let plane = s[1] * s[2];
        let xd = self.data(x);
        let md = self.data(mask);
        let mut out = vec![0.0; s[0] * plane];
        for ch in 0..s[0] {
            for p in 0..plane {
                out[ch * plane + p] = xd[ch * plane + p] * md[p];
            }
        }
        let ng = self.needs(x) || self.needs(mask);
        Ok(self.push(out, s, ng, Op::MulSpatial { x, mask }))
    }
}

struct Tap {
    i0: usize,
    i1: usize,
    w0: f64,
    w1: f64,
}

/// Per-output taps for 1-D factor-2 bilinear upsampling at half-pixel
/// positions. Out-of-range neighbours fold into linear extrapolation from
/// the two edge samples.
fn up2_taps(n: usize) -> Vec<Tap> {
    let mut taps = Vec::with_capacity(2 * n);
    for o in 0..2 * n {
        let src = (o as f64 + 0.5) / 2.0 - 0.5;
        let lo = src.floor();
        let f = src - lo;
        let lo = lo as isize;
        let hi = lo + 1;
        let tap = if lo < 0 {
            if n == 1 {
                Tap { i0: 0, i1: 0, w0: 1.0, w1: 0.0 }
            } else {
                // x[-1] := 2*x[0] - x[1]
                Tap { i0: 0, i1: 1, w0: (1.0 - f) * 2.0 + f, w1: -(1.0 - f) }
            }
        } else if hi >= n as isize {
            if n == 1 {
                Tap { i0: 0, i1: 0, w0: 1.0, w1: 0.0 }
            } else {
                // x[n] := 2*x[n-1] - x[n-2]
                Tap { i0: n - 1, i1: n - 2, w0: (1.0 - f) + 2.0 * f, w1: -f }
            }
        } else {
            Tap { i0: lo as usize, i1: hi as usize, w0: 1.0 - f, w1: f }
        };
        taps.push(tap);
    }
    taps
}

struct BilinearTaps {
    idx: [usize; 4],
    wts: [f64; 4],
    fx: f64,
    fy: f64,
    x0: usize,
    x1: usize,
    y0: usize,
    y1: usize,
    width: usize,
    clamped_x: bool,
    clamped_y: bool,
}

fn bilinear_taps(sx: f64, sy: f64, h: usize, w: usize) -> BilinearTaps {
    let clamped_x = sx < 0.0 || sx > (w - 1) as f64;
    let clamped_y = sy < 0.0 || sy > (h - 1) as f64;
    let sx = sx.clamp(0.0, (w - 1) as f64);
    let sy = sy.clamp(0.0, (h - 1) as f64);
    let x0 = sx.floor() as usize;
    let y0 = sy.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = sx - x0 as f64;
    let fy = sy - y0 as f64;
    BilinearTaps {
        idx: [y0 * w + x0, y0 * w + x1, y1 * w + x0, y1 * w + x1],
        wts: [
            (1.0 - fy) * (1.0 - fx),
            (1.0 - fy) * fx,
            fy * (1.0 - fx),
            fy * fx,
        ],
        fx,
        fy,
        x0,
        x1,
        y0,
        y1,
        width: w,
        clamped_x,
        clamped_y,
    }
}

impl BilinearTaps {
    #[inline]
    fn sample(&self, plane: &[f64]) -> f64 {
        self.wts[0] * plane[self.idx[0]]
            + self.wts[1] * plane[self.idx[1]]
            + self.wts[2] * plane[self.idx[2]]
            + self.wts[3] * plane[self.idx[3]]
    }

    #[inline]
    fn scatter(&self, plane: &mut [f64], g: f64) {
        plane[self.idx[0]] += self.wts[0] * g;
        plane[self.idx[1]] += self.wts[1] * g;
        plane[self.idx[2]] += self.wts[2] * g;
        plane[self.idx[3]] += self.wts[3] * g;
    }

    /// d(sample)/d(sx, sy); saturates to zero on clamped axes.
    fn coord_grad(&self, plane: &[f64]) -> (f64, f64) {
        let w = self.width;
        let gx = if self.clamped_x {
            0.0
        } else {
            (1.0 - self.fy) * (plane[self.y0 * w + self.x1] - plane[self.y0 * w + self.x0])
                + self.fy * (plane[self.y1 * w + self.x1] - plane[self.y1 * w + self.x0])
        };
        let gy = if self.clamped_y {
            0.0
        } else {
            (1.0 - self.fx) * (plane[self.y1 * w + self.x0] - plane[self.y0 * w + self.x0])
                + self.fx * (plane[self.y1 * w + self.x1] - plane[self.y0 * w + self.x1])
        };
        (gx, gy)
    }
}

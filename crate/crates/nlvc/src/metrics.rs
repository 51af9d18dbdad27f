//! Quality metrics and the Bjontegaard delta-rate between RD curves.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::Frame;

/// Quality cap when the distortion is exactly zero.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Mean squared error over all samples.
pub fn mse(a: &Frame, b: &Frame) -> Result<f64> {
    if a.channels != b.channels || a.height != b.height || a.width != b.width {
        return Err(Error::dimension("mse: frame shapes differ"));
    }
    let mut acc = 0.0;
    for (x, y) in a.data.iter().zip(&b.data) {
        acc += (x - y) * (x - y);
    }
    Ok(acc / a.data.len() as f64)
}

/// Peak signal-to-noise ratio, computed per channel and averaged (equal
/// channel weights).
pub fn psnr(a: &Frame, b: &Frame, peak: f64) -> Result<f64> {
    if a.channels != b.channels || a.height != b.height || a.width != b.width {
        return Err(Error::dimension(format!(
            "psnr: {}x{}x{} vs {}x{}x{}",
            a.channels, a.height, a.width, b.channels, b.height, b.width
        )));
    }
    let plane = a.height * a.width;
    let mut total = 0.0;
    for c in 0..a.channels {
        let mut mse = 0.0;
        for p in 0..plane {
            let d = a.data[c * plane + p] - b.data[c * plane + p];
            mse += d * d;
        }
        mse /= plane as f64;
        total += if mse == 0.0 {
            PSNR_CAP_DB
        } else {
            (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
        };
    }
    Ok(total / a.channels as f64)
}

// ── MS-SSIM ─────────────────────────────────────────────────────────────

const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const GAUSS_SIGMA: f64 = 1.5;
const C1: f64 = 0.01 * 0.01;
const C2: f64 = 0.03 * 0.03;

fn gauss_kernel() -> [f64; WINDOW] {
    let mut k = [0.0; WINDOW];
    let c = (WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        *v = (-(i as f64 - c).powi(2) / (2.0 * GAUSS_SIGMA * GAUSS_SIGMA)).exp();
        sum += *v;
    }
    for v in &mut k {
        *v /= sum;
    }
    k
}

/// Separable valid-mode Gaussian filter of one plane.
fn gauss_filter(src: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let k = gauss_kernel();
    let oh = h - WINDOW + 1;
    let ow = w - WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * src[y * w + x + i];
            }
            rows[y * ow + x] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let mut acc = 0.0;
            for (i, &kv) in k.iter().enumerate() {
                acc += kv * rows[(y + i) * ow + x];
            }
            out[y * ow + x] = acc;
        }
    }
    (out, oh, ow)
}

/// Mean luminance and contrast-structure terms of one scale.
fn ssim_terms(a: &[f64], b: &[f64], h: usize, w: usize) -> (f64, f64) {
    let (mu_a, oh, ow) = gauss_filter(a, h, w);
    let (mu_b, _, _) = gauss_filter(b, h, w);
    let sq_a: Vec<f64> = a.iter().map(|v| v * v).collect();
    let sq_b: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (m_aa, _, _) = gauss_filter(&sq_a, h, w);
    let (m_bb, _, _) = gauss_filter(&sq_b, h, w);
    let (m_ab, _, _) = gauss_filter(&ab, h, w);
    let mut lum = 0.0;
    let mut cs = 0.0;
    for i in 0..oh * ow {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = (m_aa[i] - ma * ma).max(0.0);
        let vb = (m_bb[i] - mb * mb).max(0.0);
        let cov = m_ab[i] - ma * mb;
        lum += (2.0 * ma * mb + C1) / (ma * ma + mb * mb + C1);
        cs += (2.0 * cov + C2) / (va + vb + C2);
    }
    let n = (oh * ow) as f64;
    (lum / n, cs / n)
}

/// Pad odd extents by edge replication, then 2x2 average pool.
fn downsample_plane(src: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (ph, pw) = (h + h % 2, w + w % 2);
    let mut padded = vec![0.0; ph * pw];
    for y in 0..ph {
        let sy = y.min(h - 1);
        for x in 0..pw {
            let sx = x.min(w - 1);
            padded[y * pw + x] = src[sy * w + sx];
        }
    }
    let (oh, ow) = (ph / 2, pw / 2);
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            let base = 2 * y * pw + 2 * x;
            out[y * ow + x] =
                0.25 * (padded[base] + padded[base + 1] + padded[base + pw] + padded[base + pw + 1]);
        }
    }
    (out, oh, ow)
}

/// Number of scales the extents support (the standard variant needs
/// min(H, W) >= 161 for all five).
pub fn msssim_scales_for(h: usize, w: usize) -> usize {
    let mut m = 0;
    let (mut ch, mut cw) = (h, w);
    while m < 5 && ch >= WINDOW && cw >= WINDOW {
        m += 1;
        ch = (ch + ch % 2) / 2;
        cw = (cw + cw % 2) / 2;
    }
    m
}

/// Multi-scale structural similarity with the standard five-scale weights;
/// smaller inputs automatically use fewer scales (weights renormalized)
/// with a warning. Contrast terms are clamped at zero so the product stays
/// in (0, 1].
pub fn ms_ssim(a: &Frame, b: &Frame) -> Result<f64> {
    if a.channels != b.channels || a.height != b.height || a.width != b.width {
        return Err(Error::dimension("ms_ssim: frame shapes differ"));
    }
    let scales = msssim_scales_for(a.height, a.width);
    if scales == 0 {
        return Err(Error::metric(format!(
            "ms_ssim: {}x{} is smaller than one {WINDOW}x{WINDOW} window",
            a.height, a.width
        )));
    }
    if scales < 5 {
        log::warn!(
            "ms_ssim: {}x{} supports only {scales} of 5 scales; weights renormalized",
            a.height,
            a.width
        );
    }
    let wsum: f64 = MSSSIM_WEIGHTS[..scales].iter().sum();
    let plane = a.height * a.width;
    let mut total = 0.0;
    for c in 0..a.channels {
        let mut pa = a.data[c * plane..(c + 1) * plane].to_vec();
        let mut pb = b.data[c * plane..(c + 1) * plane].to_vec();
        let (mut h, mut w) = (a.height, a.width);
        let mut score = 1.0;
        for s in 0..scales {
            let (lum, cs) = ssim_terms(&pa, &pb, h, w);
            let weight = MSSSIM_WEIGHTS[s] / wsum;
            if s + 1 == scales {
                score *= (lum.max(0.0) * cs.max(0.0)).powf(weight);
            } else {
                score *= cs.max(0.0).powf(weight);
                let da = downsample_plane(&pa, h, w);
                let db = downsample_plane(&pb, h, w);
                pa = da.0;
                pb = db.0;
                h = da.1;
                w = da.2;
            }
        }
        total += score;
    }
    Ok(total / a.channels as f64)
}

// ── BD-rate ─────────────────────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RdPoint {
    pub bpp: f64,
    pub quality: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RdCurve {
    pub label: String,
    pub points: Vec<RdPoint>,
}

impl RdCurve {
    pub fn new(label: impl Into<String>, mut points: Vec<RdPoint>) -> Result<Self> {
        points.sort_by(|a, b| a.bpp.partial_cmp(&b.bpp).expect("finite bpp"));
        for pair in points.windows(2) {
            if pair[1].bpp <= pair[0].bpp {
                return Err(Error::metric("rd curve requires strictly increasing bpp"));
            }
            if pair[1].quality < pair[0].quality {
                log::warn!(
                    "rd curve {:?}: quality decreases from {} to {} as rate grows",
                    "curve",
                    pair[0].quality,
                    pair[1].quality
                );
            }
        }
        Ok(RdCurve { label: "".into(), points }.with_label(label))
    }

    fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = label.into();
        self
    }
}

/// Monotone piecewise-cubic Hermite slopes (Fritsch-Carlson).
fn pchip_slopes(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = (0..n - 1).map(|i| x[i + 1] - x[i]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|i| (y[i + 1] - y[i]) / h[i]).collect();
    let mut d = vec![0.0; n];
    if n == 2 {
        d[0] = delta[0];
        d[1] = delta[0];
        return d;
    }
    for i in 1..n - 1 {
        if delta[i - 1] * delta[i] <= 0.0 {
            d[i] = 0.0;
        } else {
            let w1 = 2.0 * h[i] + h[i - 1];
            let w2 = h[i] + 2.0 * h[i - 1];
            d[i] = (w1 + w2) / (w1 / delta[i - 1] + w2 / delta[i]);
        }
    }
    let end_slope = |h0: f64, h1: f64, d0: f64, d1: f64| {
        let mut s = ((2.0 * h0 + h1) * d0 - h0 * d1) / (h0 + h1);
        if s * d0 <= 0.0 {
            s = 0.0;
        } else if d0 * d1 <= 0.0 && s.abs() > 3.0 * d0.abs() {
            s = 3.0 * d0;
        }
        s
    };
    d[0] = end_slope(h[0], h[1], delta[0], delta[1]);
    d[n - 1] = end_slope(h[n - 2], h[n - 3], delta[n - 2], delta[n - 3]);
    d
}

/// Hermite evaluation at `t` in segment `[x0, x1]`.
fn hermite_eval(x0: f64, x1: f64, y0: f64, y1: f64, d0: f64, d1: f64, t: f64) -> f64 {
    let h = x1 - x0;
    let s = (t - x0) / h;
    let s2 = s * s;
    let s3 = s2 * s;
    y0 * (2.0 * s3 - 3.0 * s2 + 1.0)
        + h * d0 * (s3 - 2.0 * s2 + s)
        + y1 * (-2.0 * s3 + 3.0 * s2)
        + h * d1 * (s3 - s2)
}

/// Piecewise-cubic Hermite interpolant with monotone slopes.
pub struct Pchip {
    x: Vec<f64>,
    y: Vec<f64>,
    d: Vec<f64>,
}

impl Pchip {
    pub fn fit(x: &[f64], y: &[f64]) -> Result<Pchip> {
        if x.len() < 2 || x.len() != y.len() {
            return Err(Error::metric("pchip needs at least two matched points"));
        }
        for pair in x.windows(2) {
            if pair[1] <= pair[0] {
                return Err(Error::metric("pchip abscissae must strictly increase"));
            }
        }
        Ok(Pchip { x: x.to_vec(), y: y.to_vec(), d: pchip_slopes(x, y) })
    }

    fn segment(&self, t: f64) -> usize {
        let n = self.x.len();
        let mut lo = 0usize;
        let mut hi = n - 1;
        while lo + 1 < hi {
            let mid = (lo + hi) / 2;
            if self.x[mid] <= t {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        lo
    }

    pub fn eval(&self, t: f64) -> f64 {
        let i = self.segment(t.clamp(self.x[0], *self.x.last().unwrap()));
        hermite_eval(self.x[i], self.x[i + 1], self.y[i], self.y[i + 1], self.d[i], self.d[i + 1], t)
    }

    /// Exact integral over `[a, b]` (inside the fitted domain): the Hermite
    /// cubic on each segment integrates in closed form.
    pub fn integrate(&self, a: f64, b: f64) -> f64 {
        assert!(a <= b);
        let mut total = 0.0;
        for i in 0..self.x.len() - 1 {
            let (x0, x1) = (self.x[i], self.x[i + 1]);
            let lo = a.max(x0);
            let hi = b.min(x1);
            if lo >= hi {
                continue;
            }
            if lo == x0 && hi == x1 {
                let h = x1 - x0;
                total += h / 2.0 * (self.y[i] + self.y[i + 1])
                    + h * h / 12.0 * (self.d[i] - self.d[i + 1]);
            } else {
                // partial segment: Simpson on the cubic is exact
                let mid = 0.5 * (lo + hi);
                let f0 = self.eval(lo);
                let fm = self.eval(mid);
                let f1 = self.eval(hi);
                total += (hi - lo) / 6.0 * (f0 + 4.0 * fm + f1);
            }
        }
        total
    }

    /// Dense trapezoid integration; the independent numerical route used to
    /// cross-check [`Pchip::integrate`].
    pub fn integrate_trapezoid(&self, a: f64, b: f64, steps: usize) -> f64 {
        let h = (b - a) / steps as f64;
        let mut acc = 0.5 * (self.eval(a) + self.eval(b));
        for i in 1..steps {
            acc += self.eval(a + i as f64 * h);
        }
        acc * h
    }
}

fn bd_prepare(curve: &RdCurve) -> Result<(Vec<f64>, Vec<f64>)> {
    if curve.points.len() < 4 {
        return Err(Error::metric(format!(
            "bd_rate needs at least 4 points per curve, got {}",
            curve.points.len()
        )));
    }
    let mut pts: Vec<(f64, f64)> = curve
        .points
        .iter()
        .map(|p| (p.quality, p.bpp.log10()))
        .collect();
    pts.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite quality"));
    for pair in pts.windows(2) {
        if pair[1].0 <= pair[0].0 {
            return Err(Error::metric("bd_rate requires distinct quality values"));
        }
    }
    Ok((pts.iter().map(|p| p.0).collect(), pts.iter().map(|p| p.1).collect()))
}

/// Average rate difference of `test` against `anchor` over their common
/// quality interval, in percent: positive means the test spends more bits.
pub fn bd_rate(test: &RdCurve, anchor: &RdCurve) -> Result<f64> {
    let (del_a, del_b) = bd_log_integrals(test, anchor, false)?;
    Ok(100.0 * (10f64.powf(del_a - del_b) - 1.0))
}

/// The trapezoid-integration twin of [`bd_rate`].
pub fn bd_rate_trapezoid(test: &RdCurve, anchor: &RdCurve) -> Result<f64> {
    let (del_a, del_b) = bd_log_integrals(test, anchor, true)?;
    Ok(100.0 * (10f64.powf(del_a - del_b) - 1.0))
}

fn bd_log_integrals(test: &RdCurve, anchor: &RdCurve, trapezoid: bool) -> Result<(f64, f64)> {
    let (qt, rt) = bd_prepare(test)?;
    let (qa, ra) = bd_prepare(anchor)?;
    let lo = qt[0].max(qa[0]);
    let hi = qt.last().unwrap().min(*qa.last().unwrap());
    if lo >= hi {
        return Err(Error::metric("bd_rate: no overlap in quality ranges"));
    }
    let ft = Pchip::fit(&qt, &rt)?;
    let fa = Pchip::fit(&qa, &ra)?;
    let span = hi - lo;
    let (it, ia) = if trapezoid {
        (ft.integrate_trapezoid(lo, hi, 20_000), fa.integrate_trapezoid(lo, hi, 20_000))
    } else {
        (ft.integrate(lo, hi), fa.integrate(lo, hi))
    };
    Ok((it / span, ia / span))
}

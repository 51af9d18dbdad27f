//! Conditional inter-frame coder: quantization, the Gaussian rate model,
//! exact entropy coding of latents, the intra stub, and the sequence
//! coding loop with its bitstream container.

pub mod bitstream;
pub mod range;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::io::{Frame, Sequence};
use crate::metrics;
use crate::model::{frame_tensor, tensor_frame, CodingState, Model, RawFeat};
use crate::tensor::{Flow, Graph, TensorId};
use bitstream::{Container, FrameKind, FramePayload};
use range::{CdfTable, RangeDecoder, RangeEncoder};

/// Probability floor for the rate model (2^-32 per symbol).
pub const P_FLOOR: f64 = 2.328_306_436_538_696_3e-10;
/// Symbol support never exceeds this half-width.
pub const MAX_HALF_SUPPORT: i64 = 60;

/// Quantities produced when a latent is planned for coding.
pub struct LatentPlan {
    pub y: Vec<f64>,
    pub y_hat: Vec<f64>,
    pub symbols: Vec<i64>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub shape: [usize; 3],
}

/// One coded frame plus its accounting.
pub struct CodedFrame {
    pub payload: FramePayload,
    pub bits_actual: f64,
    pub bits_estimated: f64,
    pub recon: Frame,
}

// ── Quantization ────────────────────────────────────────────────────────

/// Evaluation quantization: symbols are `round(y - mu)` clamped into the
/// per-element support, and `y_hat = symbol + mu` stays on the integer grid
/// relative to mu.
pub fn quantize_eval(y: &[f64], mu: &[f64], sigma: &[f64]) -> (Vec<i64>, Vec<f64>) {
    let mut symbols = Vec::with_capacity(y.len());
    let mut y_hat = Vec::with_capacity(y.len());
    for i in 0..y.len() {
        let r = half_support(sigma[i]);
        let k = ((y[i] - mu[i]).round() as i64).clamp(-r, r);
        symbols.push(k);
        y_hat.push(k as f64 + mu[i]);
    }
    (symbols, y_hat)
}

/// Training quantization: additive noise drawn once per step from the run's
/// seeded stream.
pub fn quantize_train(g: &mut Graph, y: TensorId, noise: &[f64]) -> Result<TensorId> {
    let shape = g.shape(y).to_vec();
    let u = g.constant(noise.to_vec(), &shape)?;
    g.add(y, u)
}

/// Differentiable bit estimate of a (possibly noisy) latent under the
/// conditional Gaussian model: sum of -log2 p with
/// p = Phi((v+0.5)/sigma) - Phi((v-0.5)/sigma), v = y_tilde - mu, floored
/// at 2^-32 per symbol.
pub fn rate_estimate(g: &mut Graph, y_tilde: TensorId, mu: TensorId, sigma: TensorId) -> Result<TensorId> {
    let v = g.sub(y_tilde, mu)?;
    let hi_arg = g.add_scalar(v, 0.5);
    let hi = g.div(hi_arg, sigma)?;
    let lo_arg = g.add_scalar(v, -0.5);
    let lo = g.div(lo_arg, sigma)?;
    let phi_hi = g.gauss_cdf(hi);
    let phi_lo = g.gauss_cdf(lo);
    let p = g.sub(phi_hi, phi_lo)?;
    let p = g.max_scalar(p, P_FLOOR);
    let ln_p = g.ln(p);
    let total = g.sum(ln_p);
    Ok(g.scale(total, -1.0 / std::f64::consts::LN_2))
}

/// Plain-data twin of [`rate_estimate`] for eval-side accounting.
pub fn rate_estimate_data(symbols: &[i64], sigma: &[f64]) -> f64 {
    let mut bits = 0.0;
    for (&k, &s) in symbols.iter().zip(sigma) {
        let p = gauss_cdf_scalar((k as f64 + 0.5) / s) - gauss_cdf_scalar((k as f64 - 0.5) / s);
        bits += -(p.max(P_FLOOR)).log2();
    }
    bits
}

fn gauss_cdf_scalar(x: f64) -> f64 {
    0.5 * libm::erfc(-x / std::f64::consts::SQRT_2)
}

fn half_support(sigma: f64) -> i64 {
    ((4.0 * sigma).ceil() as i64).clamp(2, MAX_HALF_SUPPORT)
}

/// Per-element CDF over the integer support `[-r, r]` with the Gaussian
/// tails folded into the edge bins. Both sides derive it from mu and sigma,
/// which the decoder computes itself; nothing about the model is
/// transmitted.
pub fn symbol_cdf(sigma: f64) -> Result<(CdfTable, i64)> {
    let r = half_support(sigma);
    let n = (2 * r + 1) as usize;
    let mut pmf = Vec::with_capacity(n);
    for j in 0..n {
        let k = j as i64 - r;
        let p = if k == -r {
            gauss_cdf_scalar((k as f64 + 0.5) / sigma)
        } else if k == r {
            1.0 - gauss_cdf_scalar((k as f64 - 0.5) / sigma)
        } else {
            gauss_cdf_scalar((k as f64 + 0.5) / sigma) - gauss_cdf_scalar((k as f64 - 0.5) / sigma)
        };
        pmf.push(p.max(0.0));
    }
    Ok((CdfTable::from_pmf(&pmf)?, r))
}

/// Entropy-codes planned symbols with their per-element tables.
pub fn encode_latent(plan: &LatentPlan) -> Result<Vec<u8>> {
    let mut enc = RangeEncoder::new();
    for i in 0..plan.symbols.len() {
        let (cdf, r) = symbol_cdf(plan.sigma[i])?;
        enc.encode((plan.symbols[i] + r) as usize, &cdf);
    }
    Ok(enc.finish())
}

/// Decodes symbols back with identically derived tables.
pub fn decode_latent(payload: &[u8], mu: &[f64], sigma: &[f64]) -> Result<(Vec<i64>, Vec<f64>)> {
    let mut dec = RangeDecoder::new(payload);
    let mut symbols = Vec::with_capacity(mu.len());
    let mut y_hat = Vec::with_capacity(mu.len());
    for i in 0..mu.len() {
        let (cdf, r) = symbol_cdf(sigma[i])?;
        let s = dec.decode(&cdf)? as i64 - r;
        symbols.push(s);
        y_hat.push(s as f64 + mu[i]);
    }
    dec.verify_end()?;
    Ok((symbols, y_hat))
}

// ── Intra stub ──────────────────────────────────────────────────────────

/// Uniform pixel quantization at step `2^q` on the 8-bit grid, with a
/// modeled cost of `8 * samples / 2^q` bits. Stands in for a real intra
/// codec at the start of every prediction chain.
pub fn intra_stub(x: &Frame, q: u8) -> (Frame, Vec<u8>, f64) {
    let step = (1u32 << q) as f64;
    let mut recon = Frame::new(x.channels, x.height, x.width);
    let mut indices = Vec::with_capacity(x.data.len());
    for (dst, &v) in recon.data.iter_mut().zip(&x.data) {
        let v255 = (v * 255.0).round().clamp(0.0, 255.0);
        let idx = (v255 / step).round();
        indices.push(idx as u8);
        *dst = (idx * step).min(255.0) / 255.0;
    }
    let bits = 8.0 * x.data.len() as f64 / (1u64 << q) as f64;
    (recon, indices, bits)
}

pub fn intra_unstub(indices: &[u8], q: u8, channels: usize, height: usize, width: usize) -> Result<Frame> {
    if indices.len() != channels * height * width {
        return Err(Error::codec("intra payload length mismatch"));
    }
    let step = (1u32 << q) as f64;
    let mut recon = Frame::new(channels, height, width);
    for (dst, &idx) in recon.data.iter_mut().zip(indices) {
        *dst = (idx as f64 * step).min(255.0) / 255.0;
    }
    Ok(recon)
}

// ── Frame coding ────────────────────────────────────────────────────────

/// Encodes one inter frame against the current state. Runs the decoder-side
/// synthesis on the quantized latent, so the returned reconstruction is
/// bit-identical to what [`decode_inter_frame`] produces.
pub fn encode_inter_frame(
    model: &Model,
    x: &Frame,
    state: &CodingState,
    flow: &Arc<Flow>,
) -> Result<(LatentPlan, CodedFrame, CodingState)> {
    model.check_extents(x.height, x.width)?;
    let mut g = Graph::new();
    let bind = model.store.bind_const(&mut g);
    let state_ids = state.bind(&mut g, false);
    let priors = model.mine_priors(&mut g, &bind, &state_ids, flow)?;

    let xt = frame_tensor(&mut g, x);
    let y = model.encode_transform(&mut g, &bind, xt, &priors)?;

    let mu = g.data(priors.mu).to_vec();
    let sigma = g.data(priors.sigma).to_vec();
    let y_data = g.data(y).to_vec();
    let (symbols, y_hat) = quantize_eval(&y_data, &mu, &sigma);
    let shape = model.latent_shape(x.height, x.width);
    let plan = LatentPlan { y: y_data, y_hat: y_hat.clone(), symbols, mu, sigma, shape };

    let payload_bytes = encode_latent(&plan)?;
    let bits_actual = payload_bytes.len() as f64 * 8.0
        + model.cfg.motion_bits_per_pixel * (x.height * x.width) as f64;
    let bits_estimated = rate_estimate_data(&plan.symbols, &plan.sigma);

    let y_hat_id = g.constant(y_hat, &shape)?;
    let out = model.decode_transform(&mut g, &bind, y_hat_id, &priors)?;
    let recon = tensor_frame(&g, out.recon);
    let new_state = CodingState {
        f_prev: state.f_curr.clone(),
        f_curr: RawFeat::from_graph(&g, out.f_prop_next),
        c_prev: Some([
            RawFeat::from_graph(&g, out.new_c_prev[0]),
            RawFeat::from_graph(&g, out.new_c_prev[1]),
            RawFeat::from_graph(&g, out.new_c_prev[2]),
        ]),
    };
    let coded = CodedFrame {
        payload: FramePayload { kind: FrameKind::Inter, data: payload_bytes },
        bits_actual,
        bits_estimated,
        recon,
    };
    Ok((plan, coded, new_state))
}

/// Decodes one inter frame from its payload. Takes only the bitstream, the
/// state, the motion side information, and the weights: the original frame
/// never enters this path.
pub fn decode_inter_frame(
    model: &Model,
    payload: &[u8],
    state: &CodingState,
    flow: &Arc<Flow>,
) -> Result<(Frame, CodingState)> {
    let (h, w) = (state.f_curr.shape[1], state.f_curr.shape[2]);
    model.check_extents(h, w)?;
    let mut g = Graph::new();
    let bind = model.store.bind_const(&mut g);
    let state_ids = state.bind(&mut g, false);
    let priors = model.mine_priors(&mut g, &bind, &state_ids, flow)?;

    let mu = g.data(priors.mu).to_vec();
    let sigma = g.data(priors.sigma).to_vec();
    let (_symbols, y_hat) = decode_latent(payload, &mu, &sigma)?;
    let shape = model.latent_shape(h, w);
    let y_hat_id = g.constant(y_hat, &shape)?;
    let out = model.decode_transform(&mut g, &bind, y_hat_id, &priors)?;
    let recon = tensor_frame(&g, out.recon);
    let new_state = CodingState {
        f_prev: state.f_curr.clone(),
        f_curr: RawFeat::from_graph(&g, out.f_prop_next),
        c_prev: Some([
            RawFeat::from_graph(&g, out.new_c_prev[0]),
            RawFeat::from_graph(&g, out.new_c_prev[1]),
            RawFeat::from_graph(&g, out.new_c_prev[2]),
        ]),
    };
    Ok((recon, new_state))
}

/// Codes an intra frame with the stub and produces the refreshed state.
pub fn code_intra_frame(model: &Model, x: &Frame, q: u8) -> Result<(CodedFrame, CodingState)> {
    let (recon, indices, bits) = intra_stub(x, q);
    let mut g = Graph::new();
    let bind = model.store.bind_const(&mut g);
    let recon_id = frame_tensor(&mut g, &recon);
    let feat = model.intra_feature(&mut g, &bind, recon_id)?;
    let f = RawFeat::from_graph(&g, feat);
    let mut data = vec![q];
    data.extend_from_slice(&indices);
    let coded = CodedFrame {
        payload: FramePayload { kind: FrameKind::Intra, data },
        bits_actual: bits,
        bits_estimated: bits,
        recon,
    };
    let state = CodingState { f_prev: f.clone(), f_curr: f, c_prev: None };
    Ok((coded, state))
}

// ── Sequence loop ───────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct FrameStats {
    pub index: usize,
    pub intra: bool,
    pub bits: f64,
    pub bits_estimated: f64,
    pub bpp: f64,
    pub psnr: f64,
    pub msssim: f64,
    pub mse: f64,
}

pub struct SequenceResult {
    pub container: Vec<u8>,
    pub stats: Vec<FrameStats>,
    pub total_bits: f64,
    pub aggregate_bpp: f64,
    pub mean_psnr: f64,
    pub mean_msssim: f64,
}

/// True when frame `t` (0-based) is intra under the given intra period;
/// `ip == -1` means a single intra frame at the start.
pub fn is_intra(t: usize, intra_period: i64) -> bool {
    if intra_period < 0 {
        t == 0
    } else {
        t % intra_period as usize == 0
    }
}

/// Codes a whole sequence, optionally verifying that a from-scratch decode
/// of the produced bitstream reproduces every reconstruction bit-exactly.
pub fn code_sequence(
    model: &Model,
    seq: &Sequence,
    flows: &[Flow],
    intra_period: i64,
    intra_q: u8,
    verify_decode: bool,
) -> Result<SequenceResult> {
    if seq.is_empty() {
        return Err(Error::input("empty sequence"));
    }
    if intra_period == 0 {
        return Err(Error::config("intra period must be positive or -1"));
    }
    let (h, w) = (seq.height(), seq.width());
    model.check_extents(h, w)?;
    let denom = (seq.orig_height * seq.orig_width) as f64;

    let mut payloads = Vec::with_capacity(seq.len());
    let mut stats = Vec::with_capacity(seq.len());
    let mut recons = Vec::with_capacity(seq.len());
    let mut state: Option<CodingState> = None;
    for t in 0..seq.len() {
        let x = &seq.frames[t];
        let (coded, new_state) = if is_intra(t, intra_period) || state.is_none() {
            code_intra_frame(model, x, intra_q)?
        } else {
            let flow = Arc::new(flows[t].clone());
            let (_plan, coded, st) = encode_inter_frame(model, x, state.as_ref().unwrap(), &flow)?;
            (coded, st)
        };
        let orig = seq.cropped(t);
        let rec = coded.recon.crop(seq.orig_height, seq.orig_width);
        stats.push(FrameStats {
            index: t,
            intra: coded.payload.kind == FrameKind::Intra,
            bits: coded.bits_actual,
            bits_estimated: coded.bits_estimated,
            bpp: coded.bits_actual / denom,
            psnr: metrics::psnr(&orig, &rec, 1.0)?,
            msssim: metrics::ms_ssim(&orig, &rec)?,
            mse: metrics::mse(&orig, &rec)?,
        });
        recons.push(coded.recon.clone());
        payloads.push(coded.payload);
        state = Some(new_state);
    }

    let container = Container { height: h as u16, width: w as u16, payloads }.serialize();
    if verify_decode {
        let decoded = decode_sequence(model, &container, flows, intra_period)?;
        for (t, dec) in decoded.iter().enumerate() {
            if dec.data.iter().zip(&recons[t].data).any(|(a, b)| a.to_bits() != b.to_bits()) {
                return Err(Error::codec(format!(
                    "decode mismatch at frame {t}: decoder output differs from encoder reconstruction"
                )));
            }
        }
    }

    let total_bits: f64 = stats.iter().map(|s| s.bits).sum();
    let n = stats.len() as f64;
    Ok(SequenceResult {
        container,
        aggregate_bpp: total_bits / (n * denom),
        total_bits,
        mean_psnr: stats.iter().map(|s| s.psnr).sum::<f64>() / n,
        mean_msssim: stats.iter().map(|s| s.msssim).sum::<f64>() / n,
        stats,
    })
}

/// Full decode of a container produced by [`code_sequence`]. Uses only the
/// bitstream, the motion side information, and the model weights.
pub fn decode_sequence(
    model: &Model,
    container: &[u8],
    flows: &[Flow],
    intra_period: i64,
) -> Result<Vec<Frame>> {
    let parsed = Container::parse(container)?;
    let (h, w) = (parsed.height as usize, parsed.width as usize);
    let mut out = Vec::with_capacity(parsed.payloads.len());
    let mut state: Option<CodingState> = None;
    for (t, payload) in parsed.payloads.iter().enumerate() {
        let expect_intra = is_intra(t, intra_period) || state.is_none();
        match payload.kind {
            FrameKind::Intra => {
                if !expect_intra {
                    return Err(Error::codec(format!("unexpected intra frame at {t}")));
                }
                if payload.data.is_empty() {
                    return Err(Error::codec("empty intra payload"));
                }
                let q = payload.data[0];
                let recon = intra_unstub(&payload.data[1..], q, 3, h, w)?;
                let mut g = Graph::new();
                let bind = model.store.bind_const(&mut g);
                let rid = frame_tensor(&mut g, &recon);
                let feat = model.intra_feature(&mut g, &bind, rid)?;
                let f = RawFeat::from_graph(&g, feat);
                state = Some(CodingState { f_prev: f.clone(), f_curr: f, c_prev: None });
                out.push(recon);
            }
            FrameKind::Inter => {
                if expect_intra {
                    return Err(Error::codec(format!("expected intra frame at {t}")));
                }
                let flow = Arc::new(flows[t].clone());
                let (recon, st) =
                    decode_inter_frame(model, &payload.data, state.as_ref().unwrap(), &flow)?;
                out.push(recon);
                state = Some(st);
            }
        }
    }
    Ok(out)
}

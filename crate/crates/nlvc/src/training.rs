//! Optimization: the cascaded rate-distortion loss over frame chains, the
//! partial cascaded fine-tuning strategy (grouped updates with detached
//! state between groups), Adam, and the error-propagation noise probe.

use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::codec;
use crate::config::{equal_boundaries, validate_boundaries, FlowSource, Strategy, TrainConfig};
use crate::error::{Error, Result};
use crate::io::{generate, Sequence};
use crate::metrics;
use crate::model::{frame_tensor, CodingState, Model, RawFeat, StateIds};
use crate::params::normal;
use crate::tensor::{Flow, Graph, TensorId};

// ── Adam ────────────────────────────────────────────────────────────────

pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(model: &Model, lr: f64) -> Self {
        let sizes: Vec<usize> = model.store.entries().map(|(_, e)| e.data.len()).collect();
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One first/second-moment update with bias correction.
    pub fn step(&mut self, model: &mut Model, grads: &[Vec<f64>]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<_> = model.store.entries().map(|(id, _)| id).collect();
        for (i, id) in ids.into_iter().enumerate() {
            let data = model.store.data_mut(id);
            for j in 0..data.len() {
                let g = grads[i][j];
                self.m[i][j] = self.beta1 * self.m[i][j] + (1.0 - self.beta1) * g;
                self.v[i][j] = self.beta2 * self.v[i][j] + (1.0 - self.beta2) * g * g;
                let mh = self.m[i][j] / bc1;
                let vh = self.v[i][j] / bc2;
                data[j] -= self.lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

// ── Window forward ──────────────────────────────────────────────────────

/// How a group starts: from the intra stub (first group of a window) or
/// from state detached at the previous boundary.
pub enum GroupEntry<'a> {
    Intra { frame_index: usize, q: u8 },
    Carried(&'a CodingState),
}

/// Data-level summary of one group forward/backward.
pub struct GroupRun {
    pub loss: f64,
    pub rate_bpp: f64,
    pub distortion: f64,
    pub tape_nodes: usize,
    /// Gradient reached the state leaves entering this group.
    pub state_grad_present: bool,
}

/// Codes `frames` (inter) on one tape starting from `entry`, returning the
/// loss sum over the group, parameter gradients when `train`, and the
/// detached state at the group's end. Gradients flow through propagated
/// features across every frame inside the group.
#[allow(clippy::too_many_arguments)]
pub fn run_group(
    model: &Model,
    seq: &Sequence,
    flows: &[Arc<Flow>],
    frames: Range<usize>,
    entry: GroupEntry,
    lambda: f64,
    noises: &[Vec<f64>],
    train: bool,
) -> Result<(GroupRun, Option<Vec<Vec<f64>>>, CodingState)> {
    let mut g = Graph::new();
    let bind = if train { model.store.bind(&mut g) } else { model.store.bind_const(&mut g) };
    let (h, w) = (seq.height(), seq.width());
    model.check_extents(h, w)?;
    let pixels = (h * w) as f64;

    let mut state: StateIds = match entry {
        GroupEntry::Intra { frame_index, q } => {
            let (recon, _, _) = codec::intra_stub(&seq.frames[frame_index], q);
            let rid = frame_tensor(&mut g, &recon);
            let feat = model.intra_feature(&mut g, &bind, rid)?;
            StateIds { f_curr: feat, f_prev: feat, c_prev: None }
        }
        GroupEntry::Carried(st) => st.bind(&mut g, train),
    };
    let entry_state_ids = [state.f_curr, state.f_prev];

    let mut loss_terms: Vec<TensorId> = Vec::new();
    let mut rate_bpp = 0.0;
    let mut distortion = 0.0;
    for (k, t) in frames.clone().enumerate() {
        let x = &seq.frames[t];
        let priors = model.mine_priors(&mut g, &bind, &state, &flows[t])?;
        let xt = frame_tensor(&mut g, x);
        let y = model.encode_transform(&mut g, &bind, xt, &priors)?;
        let y_tilde = codec::quantize_train(&mut g, y, &noises[k])?;
        let bits = codec::rate_estimate(&mut g, y_tilde, priors.mu, priors.sigma)?;
        let bpp = g.scale(bits, 1.0 / pixels);
        let bpp = g.add_scalar(bpp, model.cfg.motion_bits_per_pixel);
        let out = model.decode_transform(&mut g, &bind, y_tilde, &priors)?;
        let diff = g.sub(out.recon, xt)?;
        let sq = g.mul(diff, diff)?;
        let mse = g.mean(sq);
        let weighted = g.scale(mse, lambda);
        let frame_loss = g.add(bpp, weighted)?;
        loss_terms.push(frame_loss);
        rate_bpp += g.data(bpp)[0];
        distortion += g.data(mse)[0];

        state = StateIds {
            f_prev: state.f_curr,
            f_curr: out.f_prop_next,
            c_prev: Some(out.new_c_prev),
        };
    }

    let mut loss = loss_terms[0];
    for &term in &loss_terms[1..] {
        loss = g.add(loss, term)?;
    }
    let loss_value = g.data(loss)[0];

    let mut grads = None;
    let mut state_grad_present = false;
    if train {
        g.backward(loss)?;
        grads = Some(model.store.grads(&g, &bind));
        state_grad_present = entry_state_ids
            .iter()
            .any(|&id| g.grad(id).map(|gr| gr.iter().any(|&v| v != 0.0)).unwrap_or(false));
    }

    let end_state = CodingState {
        f_curr: RawFeat::from_graph(&g, state.f_curr),
        f_prev: RawFeat::from_graph(&g, state.f_prev),
        c_prev: state.c_prev.map(|c| {
            [
                RawFeat::from_graph(&g, c[0]),
                RawFeat::from_graph(&g, c[1]),
                RawFeat::from_graph(&g, c[2]),
            ]
        }),
    };
    let run = GroupRun {
        loss: loss_value,
        rate_bpp,
        distortion,
        tape_nodes: g.node_count(),
        state_grad_present,
    };
    Ok((run, grads, end_state))
}

/// The conventional cascaded objective over one window: intra bootstrap at
/// `window_start`, then `frames_per_sample` coded inter frames on a single
/// tape. Returns the loss and summary without updating anything.
pub fn cascaded_loss(
    model: &Model,
    seq: &Sequence,
    flows: &[Arc<Flow>],
    window_start: usize,
    frames_per_sample: usize,
    lambda: f64,
    noises: &[Vec<f64>],
) -> Result<GroupRun> {
    if window_start + frames_per_sample + 1 > seq.len() {
        return Err(Error::input(format!(
            "window needs {} frames from {window_start}, sequence has {}",
            frames_per_sample + 1,
            seq.len()
        )));
    }
    let frames = window_start + 1..window_start + 1 + frames_per_sample;
    let entry = GroupEntry::Intra { frame_index: window_start, q: 3 };
    let (run, _, _) = run_group(model, seq, flows, frames, entry, lambda, noises, false)?;
    Ok(run)
}

// ── Training driver ─────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct LogRow {
    pub step: usize,
    pub loss: f64,
    pub rate: f64,
    pub distortion: f64,
}

pub struct TrainOutcome {
    pub log: Vec<LogRow>,
    pub peak_tape_nodes: usize,
    pub updates: usize,
}

/// Group boundaries for one optimization step under the chosen strategy.
/// The shifted variant offsets every interior boundary by half a group on
/// odd steps so boundary frames see both sides of a cut.
pub fn step_boundaries(strategy: Strategy, frames: usize, groups: usize, step: usize) -> Vec<usize> {
    match strategy {
        Strategy::Cascaded => vec![0, frames],
        Strategy::Pcfs => equal_boundaries(frames, groups),
        Strategy::PcfsShifted => {
            let base = equal_boundaries(frames, groups);
            if step % 2 == 0 || groups == 1 {
                base
            } else {
                let half = (frames / groups) / 2;
                let mut b: Vec<usize> = base
                    .iter()
                    .map(|&v| if v == 0 || v == frames { v } else { (v + half).min(frames - 1) })
                    .collect();
                b.dedup();
                if *b.last().unwrap() != frames {
                    b.push(frames);
                }
                b
            }
        }
    }
}

/// Full training run from a config: builds the model, generates the scene,
/// and iterates grouped updates. Deterministic given the config.
pub fn train(cfg: &TrainConfig) -> Result<(Model, TrainOutcome)> {
    cfg.validate()?;
    let mut model = Model::new(cfg.model.clone(), cfg.seed)?;
    let (seq, exact_flows) = generate(&cfg.sequence)?;
    let flows = flows_for(cfg.flow_source, &seq, &exact_flows);
    train_model(&mut model, cfg, &seq, &flows).map(|outcome| (model, outcome))
}

/// Flow side information the coder sees during this run.
pub fn flows_for(source: FlowSource, seq: &Sequence, exact: &[Flow]) -> Vec<Arc<Flow>> {
    match source {
        FlowSource::Exact => exact.iter().cloned().map(Arc::new).collect(),
        FlowSource::Zero => (0..seq.len())
            .map(|_| Arc::new(Flow::zero(seq.height(), seq.width())))
            .collect(),
    }
}

/// Runs `cfg.steps` optimization steps on an existing model (fresh
/// optimizer). Exposed separately so fine-tuning can continue from a
/// pretrained model.
pub fn train_model(
    model: &mut Model,
    cfg: &TrainConfig,
    seq: &Sequence,
    flows: &[Arc<Flow>],
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if seq.len() < cfg.frames + 1 {
        return Err(Error::input(format!(
            "sequence of {} frames cannot host windows of {}+1",
            seq.len(),
            cfg.frames
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut adam = Adam::new(model, cfg.lr);
    let latent_numel: usize = model.latent_shape(seq.height(), seq.width()).iter().product();

    let mut log = Vec::with_capacity(cfg.steps);
    let mut peak_tape_nodes = 0usize;
    let mut updates = 0usize;
    for step in 0..cfg.steps {
        let max_start = seq.len() - cfg.frames - 1;
        let window_start = if max_start == 0 { 0 } else { rng.gen_range(0..=max_start) };
        let noises: Vec<Vec<f64>> = (0..cfg.frames)
            .map(|_| (0..latent_numel).map(|_| rng.gen::<f64>() - 0.5).collect())
            .collect();

        let boundaries = step_boundaries(cfg.strategy, cfg.frames, cfg.groups, step);
        validate_boundaries(&boundaries, cfg.frames)?;

        let mut carried: Option<CodingState> = None;
        let mut step_loss = 0.0;
        let mut step_rate = 0.0;
        let mut step_dist = 0.0;
        for j in 0..boundaries.len() - 1 {
            let lo = window_start + 1 + boundaries[j];
            let hi = window_start + 1 + boundaries[j + 1];
            let entry = match &carried {
                None => GroupEntry::Intra { frame_index: window_start, q: cfg.intra_q },
                Some(st) => GroupEntry::Carried(st),
            };
            let group_noises = &noises[boundaries[j]..boundaries[j + 1]];
            let (run, grads, end_state) =
                run_group(model, seq, flows, lo..hi, entry, cfg.lambda, group_noises, true)?;
            adam.step(model, &grads.expect("train mode returns grads"));
            updates += 1;
            peak_tape_nodes = peak_tape_nodes.max(run.tape_nodes);
            step_loss += run.loss;
            step_rate += run.rate_bpp;
            step_dist += run.distortion;
            carried = Some(end_state);
        }
        log.push(LogRow { step, loss: step_loss, rate: step_rate, distortion: step_dist });
    }
    Ok(TrainOutcome { log, peak_tape_nodes, updates })
}

/// Deterministic objective value of a trained model on a sequence: actual
/// coded bpp plus weighted distortion, summed over inter frames.
pub fn eval_sequence_loss(
    model: &Model,
    seq: &Sequence,
    flows: &[Arc<Flow>],
    lambda: f64,
    intra_period: i64,
    intra_q: u8,
) -> Result<(f64, Vec<codec::FrameStats>)> {
    let plain: Vec<Flow> = flows.iter().map(|f| (**f).clone()).collect();
    let result = codec::code_sequence(model, seq, &plain, intra_period, intra_q, false)?;
    let loss = result
        .stats
        .iter()
        .filter(|s| !s.intra)
        .map(|s| s.bpp + lambda * s.mse)
        .sum();
    Ok((loss, result.stats))
}

// ── Noise probe ─────────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct ProbeRow {
    pub frame: usize,
    pub psnr_clean: f64,
    pub bpp_clean: f64,
    pub psnr_noisy: f64,
    pub bpp_noisy: f64,
}

/// Codes the sequence twice with identical weights and inputs; the second
/// run adds Gaussian noise to the propagated feature entering the coding of
/// `inject_at`. Reports per-frame quality and rate for both runs.
pub fn noise_probe(
    model: &Model,
    seq: &Sequence,
    flows: &[Arc<Flow>],
    intra_q: u8,
    inject_at: usize,
    noise_std: f64,
    seed: u64,
) -> Result<Vec<ProbeRow>> {
    if inject_at >= seq.len() {
        return Err(Error::input(format!(
            "inject_at {inject_at} outside sequence of {} frames",
            seq.len()
        )));
    }
    let run = |inject: bool| -> Result<Vec<(f64, f64)>> {
        let denom = (seq.orig_height * seq.orig_width) as f64;
        let mut rows = Vec::with_capacity(seq.len());
        let mut state: Option<CodingState> = None;
        for t in 0..seq.len() {
            let x = &seq.frames[t];
            let (coded, new_state) = if t == 0 {
                codec::code_intra_frame(model, x, intra_q)?
            } else {
                let mut st = state.clone().unwrap();
                if inject && t == inject_at {
                    let mut rng = ChaCha8Rng::seed_from_u64(seed);
                    for v in &mut st.f_curr.data {
                        *v += noise_std * normal(&mut rng);
                    }
                }
                let (_plan, coded, ns) = codec::encode_inter_frame(model, x, &st, &flows[t])?;
                (coded, ns)
            };
            let orig = seq.cropped(t);
            let rec = coded.recon.crop(seq.orig_height, seq.orig_width);
            rows.push((metrics::psnr(&orig, &rec, 1.0)?, coded.bits_actual / denom));
            state = Some(new_state);
        }
        Ok(rows)
    };
    let clean = run(false)?;
    let noisy = run(true)?;
    Ok(clean
        .iter()
        .zip(&noisy)
        .enumerate()
        .map(|(t, (c, n))| ProbeRow {
            frame: t,
            psnr_clean: c.0,
            bpp_clean: c.1,
            psnr_noisy: n.0,
            bpp_noisy: n.1,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::io::{SequenceKind, SequenceSpec};

    fn tiny_train_cfg() -> TrainConfig {
        TrainConfig {
            lambda: 170.0,
            frames: 2,
            groups: 1,
            lr: 1e-3,
            seed: 5,
            steps: 2,
            strategy: Strategy::Cascaded,
            sequence: SequenceSpec {
                kind: SequenceKind::Static { noise_floor: 0.002 },
                height: 16,
                width: 16,
                frames: 5,
                seed: 3,
            },
            flow_source: FlowSource::Exact,
            distortion: crate::config::DistortionKind::Mse,
            intra_q: 3,
            model: ModelConfig {
                feat_channels: [4, 6, 8],
                latent_channels: 6,
                embed_dim: 4,
                num_heads: 2,
                offset_groups: 2,
                ..ModelConfig::default()
            },
        }
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let cfg = tiny_train_cfg();
        let mut model = Model::new(cfg.model.clone(), 1).unwrap();
        let before = model.store.content_hash();
        let zeros: Vec<Vec<f64>> = model
            .store
            .entries()
            .map(|(_, e)| vec![0.0; e.data.len()])
            .collect();
        let mut adam = Adam::new(&model, 0.01);
        adam.step(&mut model, &zeros);
        assert_eq!(model.store.content_hash(), before);
    }

    #[test]
    fn adam_constant_gradient_step_approaches_lr() {
        // single scalar parameter under a constant gradient: after bias
        // correction burns in, each step moves by about lr * sign(g)
        let mut m = vec![0.0f64];
        let mut v = vec![0.0f64];
        let (b1, b2, eps, lr): (f64, f64, f64, f64) = (0.9, 0.999, 1e-8, 0.05);
        let mut theta: f64 = 0.0;
        let g = 0.37;
        let mut last_step = 0.0;
        for t in 1..=5000u32 {
            m[0] = b1 * m[0] + (1.0 - b1) * g;
            v[0] = b2 * v[0] + (1.0 - b2) * g * g;
            let mh = m[0] / (1.0 - b1.powi(t as i32));
            let vh = v[0] / (1.0 - b2.powi(t as i32));
            let step = lr * mh / (vh.sqrt() + eps);
            theta -= step;
            last_step = step;
        }
        assert!((last_step - lr).abs() < lr * 0.02, "step {last_step}");
        assert!(theta < 0.0);
    }

    #[test]
    fn adam_converges_on_quadratic() {
        // minimize 0.5 * ||x||^2 in 2-D with analytic gradient x
        let mut model_free_m = [0.0f64; 2];
        let mut model_free_v = [0.0f64; 2];
        let mut x = [3.0f64, -2.0f64];
        let (b1, b2, eps, lr) = (0.9, 0.999, 1e-8, 0.01);
        for t in 1..=5000u32 {
            for i in 0..2 {
                let g = x[i];
                model_free_m[i] = b1 * model_free_m[i] + (1.0 - b1) * g;
                model_free_v[i] = b2 * model_free_v[i] + (1.0 - b2) * g * g;
                let mh = model_free_m[i] / (1.0 - b1.powi(t as i32));
                let vh = model_free_v[i] / (1.0 - b2.powi(t as i32));
                x[i] -= lr * mh / (vh.sqrt() + eps);
            }
        }
        let norm = (x[0] * x[0] + x[1] * x[1]).sqrt();
        assert!(norm < 1e-3, "|x| = {norm}");
    }

    #[test]
    fn cascaded_loss_needs_enough_frames() {
        let cfg = tiny_train_cfg();
        let model = Model::new(cfg.model.clone(), 1).unwrap();
        let (seq, flows) = generate(&cfg.sequence).unwrap();
        let flows = flows_for(FlowSource::Exact, &seq, &flows);
        let noises = vec![vec![0.0; 96]; 9];
        let err = cascaded_loss(&model, &seq, &flows, 0, 9, 170.0, &noises);
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn single_frame_window_reduces_to_single_conditional_loss() {
        let cfg = tiny_train_cfg();
        let model = Model::new(cfg.model.clone(), 1).unwrap();
        let (seq, flows) = generate(&cfg.sequence).unwrap();
        let flows = flows_for(FlowSource::Exact, &seq, &flows);
        let latent: usize = model.latent_shape(seq.height(), seq.width()).iter().product();
        let noises = vec![vec![0.1; latent]];
        let run = cascaded_loss(&model, &seq, &flows, 0, 1, 170.0, &noises).unwrap();
        assert!(run.loss > 0.0);
        assert!((run.loss - (run.rate_bpp + 170.0 * run.distortion)).abs() < 1e-9);
    }

    #[test]
    fn zero_lambda_ignores_distortion_path() {
        let cfg = tiny_train_cfg();
        let model = Model::new(cfg.model.clone(), 2).unwrap();
        let (seq, flows) = generate(&cfg.sequence).unwrap();
        let flows = flows_for(FlowSource::Exact, &seq, &flows);
        let latent: usize = model.latent_shape(seq.height(), seq.width()).iter().product();
        let noises = vec![vec![0.05; latent]];
        let (run, grads, _) = run_group(
            &model,
            &seq,
            &flows,
            1..2,
            GroupEntry::Intra { frame_index: 0, q: 3 },
            0.0,
            &noises,
            true,
        )
        .unwrap();
        assert!((run.loss - run.rate_bpp).abs() < 1e-12);
        // recon-only parameters see no gradient when lambda is zero
        let grads = grads.unwrap();
        let recon_idx = model
            .store
            .entries()
            .position(|(_, e)| e.name == "dec.recon.w")
            .unwrap();
        assert!(grads[recon_idx].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = tiny_train_cfg();
        let (model_a, out_a) = train(&cfg).unwrap();
        let (model_b, out_b) = train(&cfg).unwrap();
        assert_eq!(model_a.store.content_hash(), model_b.store.content_hash());
        assert_eq!(out_a.log.len(), out_b.log.len());
        for (ra, rb) in out_a.log.iter().zip(&out_b.log) {
            assert_eq!(ra.loss.to_bits(), rb.loss.to_bits());
        }
    }

    #[test]
    fn pcfs_one_group_is_bit_identical_to_cascaded() {
        let mut cfg = tiny_train_cfg();
        cfg.strategy = Strategy::Cascaded;
        let (model_a, _) = train(&cfg).unwrap();
        cfg.strategy = Strategy::Pcfs;
        cfg.groups = 1;
        let (model_b, _) = train(&cfg).unwrap();
        assert_eq!(model_a.store.content_hash(), model_b.store.content_hash());
    }

    #[test]
    fn pcfs_groups_update_count_and_detachment() {
        let mut cfg = tiny_train_cfg();
        cfg.frames = 4;
        cfg.groups = 2;
        cfg.steps = 1;
        cfg.strategy = Strategy::Pcfs;
        cfg.sequence.frames = 6;
        let (_, outcome) = train(&cfg).unwrap();
        assert_eq!(outcome.updates, 2);

        // detachment audit: the state entering group 2 is a leaf on a fresh
        // tape, receives its own gradient, and no node of group 1 exists
        let model = Model::new(cfg.model.clone(), cfg.seed).unwrap();
        let (seq, flows) = generate(&cfg.sequence).unwrap();
        let flows = flows_for(FlowSource::Exact, &seq, &flows);
        let latent: usize = model.latent_shape(seq.height(), seq.width()).iter().product();
        let noises: Vec<Vec<f64>> = (0..4).map(|_| vec![0.02; latent]).collect();
        let (_, _, carried) = run_group(
            &model,
            &seq,
            &flows,
            1..3,
            GroupEntry::Intra { frame_index: 0, q: 3 },
            170.0,
            &noises[0..2],
            true,
        )
        .unwrap();
        let (run2, _, _) = run_group(
            &model,
            &seq,
            &flows,
            3..5,
            GroupEntry::Carried(&carried),
            170.0,
            &noises[2..4],
            true,
        )
        .unwrap();
        assert!(run2.state_grad_present, "no gradient reached the carried state");
    }

    #[test]
    fn pcfs_tape_peak_shrinks_with_groups() {
        let mut cfg = tiny_train_cfg();
        cfg.frames = 6;
        cfg.steps = 1;
        cfg.sequence.frames = 8;
        cfg.strategy = Strategy::Cascaded;
        cfg.groups = 1;
        let (_, single) = train(&cfg).unwrap();
        cfg.strategy = Strategy::Pcfs;
        cfg.groups = 3;
        let (_, grouped) = train(&cfg).unwrap();
        let ratio = grouped.peak_tape_nodes as f64 / single.peak_tape_nodes as f64;
        assert!(ratio <= 0.45, "tape ratio {ratio}");
    }

    #[test]
    fn shifted_boundaries_cover_range() {
        for step in 0..4 {
            let b = step_boundaries(Strategy::PcfsShifted, 30, 3, step);
            validate_boundaries(&b, 30).unwrap();
        }
        assert_eq!(step_boundaries(Strategy::PcfsShifted, 30, 3, 0), vec![0, 10, 20, 30]);
        assert_eq!(step_boundaries(Strategy::PcfsShifted, 30, 3, 1), vec![0, 15, 25, 30]);
    }

    #[test]
    fn probe_zero_std_gives_identical_runs() {
        let cfg = tiny_train_cfg();
        let model = Model::new(cfg.model.clone(), 4).unwrap();
        let (seq, flows) = generate(&cfg.sequence).unwrap();
        let flows = flows_for(FlowSource::Exact, &seq, &flows);
        let rows = noise_probe(&model, &seq, &flows, 3, 2, 0.0, 9).unwrap();
        for r in rows {
            assert_eq!(r.psnr_clean.to_bits(), r.psnr_noisy.to_bits());
            assert_eq!(r.bpp_clean.to_bits(), r.bpp_noisy.to_bits());
        }
    }
}

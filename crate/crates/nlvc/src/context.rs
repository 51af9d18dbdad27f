//! Multi-frame context mining: multi-scale features from two propagated
//! references, per-scale local and non-local context streams, and their
//! fusion into the conditional coder.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, KvEmbed, Mhlca, QEmbed};
use crate::blocks::{ConvLayer, DwResBlock};
use crate::config::{ContextVariant, ModelConfig};
use crate::error::{Error, Result};
use crate::motion::{self, MotionField, MultiScaleRefine, OffsetDiversity};
use crate::params::{Binding, ParamStore};
use crate::tensor::{Graph, TensorId};

/// Three feature scales of one propagated reference.
#[derive(Clone, Copy, Debug)]
pub struct MultiScaleFeatures {
    pub scales: [TensorId; 3],
}

/// Conv + down2 ladder turning a propagated feature into three scales with
/// the configured channel counts.
#[derive(Clone, Debug)]
pub struct PyramidBuilder {
    convs: [ConvLayer; 3],
    slope: f64,
}

impl PyramidBuilder {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, cfg: &ModelConfig) -> Self {
        let c = cfg.feat_channels;
        PyramidBuilder {
            convs: [
                ConvLayer::new(store, rng, &format!("{name}.s0"), c[0], c[0], 3, 1, 1, 1.0),
                ConvLayer::new(store, rng, &format!("{name}.s1"), c[0], c[1], 3, 1, 1, 1.0),
                ConvLayer::new(store, rng, &format!("{name}.s2"), c[1], c[2], 3, 1, 1, 1.0),
            ],
            slope: cfg.leaky_slope,
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, f_prop: TensorId) -> Result<MultiScaleFeatures> {
        let s = g.shape(f_prop);
        if s[1] % 4 != 0 || s[2] % 4 != 0 {
            return Err(Error::dimension(format!(
                "pyramid input extents {}x{} must be divisible by 4",
                s[1], s[2]
            )));
        }
        let f0 = self.convs[0].forward(g, bind, f_prop)?;
        let f0 = g.leaky_relu(f0, self.slope);
        let d1 = g.down2(f0)?;
        let f1 = self.convs[1].forward(g, bind, d1)?;
        let f1 = g.leaky_relu(f1, self.slope);
        let d2 = g.down2(f1)?;
        let f2 = self.convs[2].forward(g, bind, d2)?;
        let f2 = g.leaky_relu(f2, self.slope);
        Ok(MultiScaleFeatures { scales: [f0, f1, f2] })
    }
}

/// Per-scale bundle of temporal priors. Stream presence follows the
/// configured variant; a missing second reference falls back to copies of
/// the first reference's streams so channel statistics stay stable.
#[derive(Clone, Copy, Debug)]
pub struct ContextSet {
    pub cl_ref1: TensorId,
    pub cl_ref2: Option<TensorId>,
    pub cnl_ref1: Option<TensorId>,
    pub cnl_ref2: Option<TensorId>,
}

impl ContextSet {
    pub fn streams(&self) -> Vec<TensorId> {
        let mut v = vec![self.cl_ref1];
        if let Some(t) = self.cl_ref2 {
            v.push(t);
        }
        if let Some(t) = self.cnl_ref1 {
            v.push(t);
        }
        if let Some(t) = self.cnl_ref2 {
            v.push(t);
        }
        v
    }
}

/// Channel total contributed by one scale's context streams.
pub fn context_channels(cfg: &ModelConfig, scale: usize) -> usize {
    let c = cfg.feat_channels[scale];
    let d = cfg.embed_dim;
    match cfg.variant {
        ContextVariant::Base => c,
        ContextVariant::Nlc => c + d,
        ContextVariant::Mnlc => 2 * c + 2 * d,
    }
}

/// One scale's mining machinery. Local streams are query-free and shared by
/// the encoder and decoder paths; non-local streams embed a query from
/// whichever mid-feature the caller passes in.
#[derive(Clone, Debug)]
pub struct ContextMiner {
    pub variant: ContextVariant,
    od: OffsetDiversity,
    msr: MultiScaleRefine,
    mhlca_enc: Option<Mhlca>,
    mhlca_dec: Option<Mhlca>,
}

/// Which side's query embedding to use for the non-local streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QuerySide {
    Encoder,
    Decoder,
}

/// Query-free part of a scale's context set.
#[derive(Clone, Copy, Debug)]
pub struct LocalContexts {
    pub cl_ref1: TensorId,
    /// None when no stored previous context exists (first P-frame).
    pub cl_ref2: Option<TensorId>,
}

impl ContextMiner {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &ModelConfig,
        scale: usize,
        enc_q_channels: usize,
        dec_q_channels: usize,
    ) -> Result<Self> {
        let c = cfg.feat_channels[scale];
        let slope = cfg.leaky_slope;
        let attn = AttentionConfig::new(cfg.embed_dim, cfg.num_heads)?;
        let use_nl = cfg.variant != ContextVariant::Base;
        let (mhlca_enc, mhlca_dec) = if use_nl {
            let kv = KvEmbed::new(store, rng, &format!("{name}.kv"), c, cfg.embed_dim, slope);
            let out = DwResBlock::new(store, rng, &format!("{name}.attn_out"), cfg.embed_dim, slope);
            let qe = QEmbed::new(store, rng, &format!("{name}.q_enc"), enc_q_channels, cfg.embed_dim, slope);
            let enc = Mhlca::new(attn, qe, kv.clone(), out.clone());
            let dec = if dec_q_channels == enc_q_channels {
                enc.clone()
            } else {
                let qd = QEmbed::new(store, rng, &format!("{name}.q_dec"), dec_q_channels, cfg.embed_dim, slope);
                Mhlca::new(attn, qd, kv, out)
            };
            (Some(enc), Some(dec))
        } else {
            (None, None)
        };
        Ok(ContextMiner {
            variant: cfg.variant,
            od: OffsetDiversity::new(store, rng, &format!("{name}.od"), c, cfg.offset_groups, slope),
            msr: MultiScaleRefine::new(store, rng, &format!("{name}.msr"), c, slope),
            mhlca_enc,
            mhlca_dec,
        })
    }

    /// Local streams: offset-diversity on the warped first reference, and
    /// the refined re-warp of the stored previous context when present.
    pub fn mine_local(
        &self,
        g: &mut Graph,
        bind: &Binding,
        feats_ref1_scale: TensorId,
        c_prev: Option<TensorId>,
        flow: &Arc<MotionField>,
    ) -> Result<LocalContexts> {
        let warped = motion::warp(g, feats_ref1_scale, flow)?;
        let cl_ref1 = self.od.forward(g, bind, warped, flow)?;
        let cl_ref2 = if self.variant == ContextVariant::Mnlc {
            match motion::second_reference_context(g, bind, &self.msr, c_prev, flow) {
                Ok(t) => Some(t),
                Err(Error::Input(_)) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        Ok(LocalContexts { cl_ref1, cl_ref2 })
    }

    /// Non-local streams for the given query side. The reference features
    /// are consumed un-warped; missing second reference duplicates the
    /// first reference's stream.
    pub fn mine_nonlocal(
        &self,
        g: &mut Graph,
        bind: &Binding,
        side: QuerySide,
        y: TensorId,
        feats_ref1_scale: TensorId,
        feats_ref2_scale: Option<TensorId>,
    ) -> Result<(Option<TensorId>, Option<TensorId>)> {
        let mhlca = match side {
            QuerySide::Encoder => &self.mhlca_enc,
            QuerySide::Decoder => &self.mhlca_dec,
        };
        let Some(mhlca) = mhlca else {
            return Ok((None, None));
        };
        let cnl1 = mhlca.forward(g, bind, y, feats_ref1_scale)?;
        let cnl2 = if self.variant == ContextVariant::Mnlc {
            Some(match feats_ref2_scale {
                Some(f2) => mhlca.forward(g, bind, y, f2)?,
                None => cnl1,
            })
        } else {
            None
        };
        Ok((Some(cnl1), cnl2))
    }

    /// Assembles the full set; a missing second local stream falls back to
    /// the first reference's local context.
    pub fn assemble(&self, local: LocalContexts, nonlocal: (Option<TensorId>, Option<TensorId>)) -> ContextSet {
        let cl_ref2 = match self.variant {
            ContextVariant::Mnlc => Some(local.cl_ref2.unwrap_or(local.cl_ref1)),
            _ => None,
        };
        ContextSet { cl_ref1: local.cl_ref1, cl_ref2, cnl_ref1: nonlocal.0, cnl_ref2: nonlocal.1 }
    }
}

/// Channel-concatenates the mid-feature with its context streams and fuses
/// them down to the stage's width.
#[derive(Clone, Debug)]
pub struct FuseBlock {
    conv1: ConvLayer,
    conv2: ConvLayer,
    slope: f64,
}

impl FuseBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        slope: f64,
    ) -> Self {
        FuseBlock {
            conv1: ConvLayer::new(store, rng, &format!("{name}.c1"), in_channels, out_channels, 3, 1, 1, 1.0),
            conv2: ConvLayer::new(store, rng, &format!("{name}.c2"), out_channels, out_channels, 3, 1, 1, 1.0),
            slope,
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, y: TensorId, ctx: &ContextSet) -> Result<TensorId> {
        let mut parts = vec![y];
        parts.extend(ctx.streams());
        let cat = g.concat_channels(&parts)?;
        let h = self.conv1.forward(g, bind, cat)?;
        let h = g.leaky_relu(h, self.slope);
        self.conv2.forward(g, bind, h)
    }
}

/// Writes a per-query argmax key grid (the attention-map dump) as CSV: one
/// row per query pixel row of the scale, `-1` never appears.
pub fn write_argmax_csv(path: &Path, grid: &[usize], width: usize) -> Result<()> {
    let mut out = String::new();
    for (i, v) in grid.iter().enumerate() {
        out.push_str(&v.to_string());
        if (i + 1) % width == 0 {
            out.push('\n');
        } else {
            out.push(',');
        }
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(out.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Flow;
    use rand::{Rng, SeedableRng};

    fn toy_cfg(variant: ContextVariant) -> ModelConfig {
        ModelConfig {
            feat_channels: [4, 6, 8],
            latent_channels: 6,
            embed_dim: 4,
            num_heads: 2,
            offset_groups: 2,
            variant,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn pyramid_shapes_follow_ladder() {
        let cfg = toy_cfg(ContextVariant::Mnlc);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let pyr = PyramidBuilder::new(&mut store, &mut rng, "pyr", &cfg);
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let f = g.constant(vec![0.1; 4 * 16 * 16], &[4, 16, 16]).unwrap();
        let ms = pyr.forward(&mut g, &bind, f).unwrap();
        assert_eq!(g.shape(ms.scales[0]), &[4, 16, 16]);
        assert_eq!(g.shape(ms.scales[1]), &[6, 8, 8]);
        assert_eq!(g.shape(ms.scales[2]), &[8, 4, 4]);
    }

    #[test]
    fn pyramid_averaging_weights_preserve_constant_interior() {
        let cfg = toy_cfg(ContextVariant::Mnlc);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let pyr = PyramidBuilder::new(&mut store, &mut rng, "pyr", &cfg);
        // averaging kernels: every output channel averages all inputs
        let chans = [(4usize, 4usize), (4, 6), (6, 8)];
        for (i, conv) in pyr.convs.iter().enumerate() {
            let (cin, cout) = chans[i];
            let w = store.data_mut(conv.weight_id());
            for v in w.iter_mut() {
                *v = 1.0 / (cin as f64 * 9.0);
            }
            let _ = cout;
        }
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let f = g.constant(vec![2.0; 4 * 16 * 16], &[4, 16, 16]).unwrap();
        let ms = pyr.forward(&mut g, &bind, f).unwrap();
        // zero padding dims the borders; check interior constancy per scale
        for (scale, &id) in ms.scales.iter().enumerate() {
            let s = g.shape(id).to_vec();
            let (h, w) = (s[1], s[2]);
            let data = g.data(id);
            let centre = data[(0 * h + h / 2) * w + w / 2];
            for y in 2..h - 2 {
                for x in 2..w - 2 {
                    assert!(
                        (data[(0 * h + y) * w + x] - centre).abs() < 1e-9,
                        "scale {scale}"
                    );
                }
            }
        }
    }

    #[test]
    fn pyramid_rejects_unaligned_extents() {
        let cfg = toy_cfg(ContextVariant::Mnlc);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let pyr = PyramidBuilder::new(&mut store, &mut rng, "pyr", &cfg);
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let f = g.constant(vec![0.0; 4 * 6 * 6], &[4, 6, 6]).unwrap();
        assert!(matches!(pyr.forward(&mut g, &bind, f), Err(Error::Dimension(_))));
    }

    fn build_miner(variant: ContextVariant, seed: u64) -> (ParamStore, ContextMiner, ModelConfig) {
        let cfg = toy_cfg(variant);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let miner = ContextMiner::new(&mut store, &mut rng, "m0", &cfg, 0, 3, cfg.feat_channels[0]).unwrap();
        (store, miner, cfg)
    }

    #[test]
    fn first_p_frame_falls_back_to_ref1_streams() {
        let (store, miner, _cfg) = build_miner(ContextVariant::Mnlc, 1);
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f1: Vec<f64> = (0..4 * 8 * 8).map(|_| rng.gen::<f64>() - 0.5).collect();
        let feats1 = g.constant(f1, &[4, 8, 8]).unwrap();
        let flow = Arc::new(Flow::zero(8, 8));
        let local = miner.mine_local(&mut g, &bind, feats1, None, &flow).unwrap();
        assert!(local.cl_ref2.is_none());
        let y = g.constant(vec![0.2; 3 * 8 * 8], &[3, 8, 8]).unwrap();
        let nl = miner
            .mine_nonlocal(&mut g, &bind, QuerySide::Encoder, y, feats1, None)
            .unwrap();
        let set = miner.assemble(local, nl);
        // fallbacks duplicate ref1 streams
        assert_eq!(set.cl_ref2, Some(set.cl_ref1));
        assert_eq!(set.cnl_ref2, set.cnl_ref1);
        assert_eq!(set.streams().len(), 4);
    }

    #[test]
    fn identical_references_swap_symmetry() {
        // with two identical reference features, zero motion and shared
        // weights, the ref1 and ref2 paths produce identical streams
        let (store, miner, _cfg) = build_miner(ContextVariant::Mnlc, 3);
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let fdata: Vec<f64> = (0..4 * 8 * 8).map(|_| rng.gen::<f64>() - 0.5).collect();
        let fa = g.constant(fdata.clone(), &[4, 8, 8]).unwrap();
        let fb = g.constant(fdata, &[4, 8, 8]).unwrap();
        let flow = Arc::new(Flow::zero(8, 8));
        // both local paths through the same offset-diversity weights
        let la = miner.mine_local(&mut g, &bind, fa, None, &flow).unwrap();
        let lb = miner.mine_local(&mut g, &bind, fb, None, &flow).unwrap();
        for (a, b) in g.data(la.cl_ref1).iter().zip(g.data(lb.cl_ref1)) {
            assert!((a - b).abs() < 1e-9);
        }
        let y = g.constant(vec![0.1; 3 * 8 * 8], &[3, 8, 8]).unwrap();
        let (na, _) = miner
            .mine_nonlocal(&mut g, &bind, QuerySide::Encoder, y, fa, None)
            .unwrap();
        let (nb, _) = miner
            .mine_nonlocal(&mut g, &bind, QuerySide::Encoder, y, fb, None)
            .unwrap();
        for (a, b) in g.data(na.unwrap()).iter().zip(g.data(nb.unwrap())) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn static_scene_local_streams_agree() {
        // identical refs, zero flow, stored context equal to the ref1 local
        // context: identity-initialized refine keeps cl_ref2 equal to cl_ref1
        let (store, miner, _cfg) = build_miner(ContextVariant::Mnlc, 5);
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fdata: Vec<f64> = (0..4 * 8 * 8).map(|_| rng.gen::<f64>() - 0.5).collect();
        let feats1 = g.constant(fdata, &[4, 8, 8]).unwrap();
        let flow = Arc::new(Flow::zero(8, 8));
        let first = miner.mine_local(&mut g, &bind, feats1, None, &flow).unwrap();
        let second = miner
            .mine_local(&mut g, &bind, feats1, Some(first.cl_ref1), &flow)
            .unwrap();
        for (a, b) in g.data(second.cl_ref1).iter().zip(g.data(second.cl_ref2.unwrap())) {
            assert!((a - b).abs() < 1e-3);
        }
    }

    #[test]
    fn contexts_stay_finite() {
        let (store, miner, _cfg) = build_miner(ContextVariant::Mnlc, 7);
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f1: Vec<f64> = (0..4 * 8 * 8).map(|_| (rng.gen::<f64>() - 0.5) * 100.0).collect();
        let feats1 = g.constant(f1, &[4, 8, 8]).unwrap();
        let flow = Arc::new(Flow::constant(1.7, -2.3, 8, 8));
        let local = miner.mine_local(&mut g, &bind, feats1, Some(feats1), &flow).unwrap();
        let y = g.constant(vec![50.0; 3 * 8 * 8], &[3, 8, 8]).unwrap();
        let nl = miner
            .mine_nonlocal(&mut g, &bind, QuerySide::Encoder, y, feats1, Some(feats1))
            .unwrap();
        let set = miner.assemble(local, nl);
        for id in set.streams() {
            assert!(g.data(id).iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn fuse_routes_gradient_to_all_streams() {
        let (mut store, miner, cfg) = build_miner(ContextVariant::Mnlc, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let fuse = FuseBlock::new(
            &mut store,
            &mut rng,
            "fuse",
            3 + context_channels(&cfg, 0),
            cfg.feat_channels[0],
            cfg.leaky_slope,
        );
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let mk = |g: &mut Graph, c: usize, rng: &mut ChaCha8Rng| {
            let data: Vec<f64> = (0..c * 8 * 8).map(|_| rng.gen::<f64>() - 0.5).collect();
            g.param(data, &[c, 8, 8]).unwrap()
        };
        let y = mk(&mut g, 3, &mut rng);
        let f1 = mk(&mut g, 4, &mut rng);
        let c_prev = mk(&mut g, 4, &mut rng);
        let flow = Arc::new(Flow::zero(8, 8));
        let local = miner.mine_local(&mut g, &bind, f1, Some(c_prev), &flow).unwrap();
        let f2 = mk(&mut g, 4, &mut rng);
        let nl = miner
            .mine_nonlocal(&mut g, &bind, QuerySide::Encoder, y, f1, Some(f2))
            .unwrap();
        let set = miner.assemble(local, nl);
        let fused = fuse.forward(&mut g, &bind, y, &set).unwrap();
        assert_eq!(g.shape(fused)[0], cfg.feat_channels[0]);
        let loss = g.sum(fused);
        g.backward(loss).unwrap();
        for (name, id) in [("y", y), ("f1", f1), ("c_prev", c_prev), ("f2", f2)] {
            let grad = g.grad(id).expect(name);
            assert!(grad.iter().any(|&v| v != 0.0), "no gradient into {name}");
        }
    }

    #[test]
    fn fuse_passthrough_with_zero_contexts() {
        // zero contexts and identity-projection init: fuse output equals the
        // projection of y alone
        let cfg = toy_cfg(ContextVariant::Base);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let fuse = FuseBlock::new(&mut store, &mut rng, "fuse", 3 + 4, 4, cfg.leaky_slope);
        let mut g = Graph::new();
        let bind = store.bind(&mut g);
        let y = g.constant(vec![0.3; 3 * 4 * 4], &[3, 4, 4]).unwrap();
        let zero_ctx = g.constant(vec![0.0; 4 * 4 * 4], &[4, 4, 4]).unwrap();
        let set = ContextSet { cl_ref1: zero_ctx, cl_ref2: None, cnl_ref1: None, cnl_ref2: None };
        let fused = fuse.forward(&mut g, &bind, y, &set).unwrap();
        // same weights, y concatenated with zeros: equals fusing y with any
        // all-zero context of the same width, i.e. the projection of y
        assert_eq!(g.shape(fused), &[4, 4, 4]);
        assert!(g.data(fused).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn argmax_csv_dump() {
        let dir = std::env::temp_dir().join(format!("nlvc-ctx-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("argmax.csv");
        write_argmax_csv(&path, &[1, 2, 3, 4], 2).unwrap();
        let content = std::fs::read_to_string(&path).unwrap();
        assert_eq!(content, "1,2\n3,4\n");
    }
}

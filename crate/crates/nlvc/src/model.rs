//! The full coding network: feature pyramids, per-scale context mining,
//! conditional analysis/synthesis ladders, and the conditional Gaussian
//! entropy head. One [`Model`] owns every parameter; forward passes bind
//! them onto a caller-supplied graph.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, KvEmbed, Mhlca, QEmbed};
use crate::blocks::{ConvLayer, DwResBlock};
use crate::config::{ContextVariant, ModelConfig};
use crate::context::{context_channels, ContextMiner, FuseBlock, MultiScaleFeatures, PyramidBuilder, QuerySide};
use crate::error::{Error, Result};
use crate::io::Frame;
use crate::params::{Binding, ParamStore};
use crate::tensor::{Flow, Graph, TensorId};

/// Detached feature data carried between frames and across group
/// boundaries.
#[derive(Clone, Debug)]
pub struct RawFeat {
    pub data: Vec<f64>,
    pub shape: [usize; 3],
}

impl RawFeat {
    pub fn from_graph(g: &Graph, id: TensorId) -> Self {
        let s = g.shape(id);
        RawFeat { data: g.data(id).to_vec(), shape: [s[0], s[1], s[2]] }
    }

    pub fn bind(&self, g: &mut Graph, differentiable: bool) -> TensorId {
        if differentiable {
            g.param(self.data.clone(), &self.shape).expect("stored shape is valid")
        } else {
            g.constant(self.data.clone(), &self.shape).expect("stored shape is valid")
        }
    }
}

/// Inter-frame coding state: the two propagated features and the stored
/// previous local context per scale.
#[derive(Clone, Debug)]
pub struct CodingState {
    pub f_curr: RawFeat,
    pub f_prev: RawFeat,
    pub c_prev: Option<[RawFeat; 3]>,
}

/// The same state bound onto one graph.
pub struct StateIds {
    pub f_curr: TensorId,
    pub f_prev: TensorId,
    pub c_prev: Option<[TensorId; 3]>,
}

impl CodingState {
    pub fn bind(&self, g: &mut Graph, differentiable: bool) -> StateIds {
        StateIds {
            f_curr: self.f_curr.bind(g, differentiable),
            f_prev: self.f_prev.bind(g, differentiable),
            c_prev: self.c_prev.as_ref().map(|c| {
                [
                    c[0].bind(g, differentiable),
                    c[1].bind(g, differentiable),
                    c[2].bind(g, differentiable),
                ]
            }),
        }
    }
}

/// Query-free per-frame priors shared by the encoder, decoder, and entropy
/// paths.
pub struct FramePriors {
    pub feats1: MultiScaleFeatures,
    pub feats2: MultiScaleFeatures,
    pub locals: [crate::context::LocalContexts; 3],
    pub flows: [Arc<Flow>; 3],
    pub mu: TensorId,
    pub sigma: TensorId,
}

/// Synthesis outputs for one frame.
pub struct DecodeOut {
    pub recon: TensorId,
    pub f_prop_next: TensorId,
    pub new_c_prev: [TensorId; 3],
}

pub struct Model {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    intra_embed: ConvLayer,
    pyramid: PyramidBuilder,
    miners: [ContextMiner; 3],
    enc_fuse: [FuseBlock; 3],
    enc_down: [ConvLayer; 2],
    enc_latent: ConvLayer,
    dec_head: ConvLayer,
    dec_fuse: [FuseBlock; 3],
    dec_up: [ConvLayer; 2],
    recon_head: ConvLayer,
    prop_head: ConvLayer,
    prior_mhlca: Option<Mhlca>,
    entropy1: ConvLayer,
    entropy2: ConvLayer,
}

impl Model {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let rng = &mut ChaCha8Rng::seed_from_u64(seed);
        let c = cfg.feat_channels;
        let (clat, d, slope) = (cfg.latent_channels, cfg.embed_dim, cfg.leaky_slope);
        let enc_mid = cfg.enc_mid_channels();
        let dec_mid = cfg.dec_mid_channels();

        let intra_embed = ConvLayer::new(&mut store, rng, "intra.embed", 3, c[0], 3, 1, 1, 1.0);
        let pyramid = PyramidBuilder::new(&mut store, rng, "pyr", &cfg);
        let miners = [
            ContextMiner::new(&mut store, rng, "mine.s0", &cfg, 0, enc_mid[0], dec_mid[0])?,
            ContextMiner::new(&mut store, rng, "mine.s1", &cfg, 1, enc_mid[1], dec_mid[1])?,
            ContextMiner::new(&mut store, rng, "mine.s2", &cfg, 2, enc_mid[2], dec_mid[2])?,
        ];
        let enc_fuse = [
            FuseBlock::new(&mut store, rng, "enc.fuse0", enc_mid[0] + context_channels(&cfg, 0), c[0], slope),
            FuseBlock::new(&mut store, rng, "enc.fuse1", enc_mid[1] + context_channels(&cfg, 1), c[1], slope),
            FuseBlock::new(&mut store, rng, "enc.fuse2", enc_mid[2] + context_channels(&cfg, 2), c[2], slope),
        ];
        let enc_down = [
            ConvLayer::new(&mut store, rng, "enc.down01", c[0], c[1], 3, 2, 1, 1.0),
            ConvLayer::new(&mut store, rng, "enc.down12", c[1], c[2], 3, 2, 1, 1.0),
        ];
        let enc_latent = ConvLayer::new(&mut store, rng, "enc.latent", c[2], clat, 3, 1, 1, 1.0);
        let dec_head = ConvLayer::new(&mut store, rng, "dec.head", clat, c[2], 3, 1, 1, 1.0);
        let dec_fuse = [
            FuseBlock::new(&mut store, rng, "dec.fuse0", dec_mid[0] + context_channels(&cfg, 0), c[0], slope),
            FuseBlock::new(&mut store, rng, "dec.fuse1", dec_mid[1] + context_channels(&cfg, 1), c[1], slope),
            FuseBlock::new(&mut store, rng, "dec.fuse2", dec_mid[2] + context_channels(&cfg, 2), c[2], slope),
        ];
        let dec_up = [
            ConvLayer::new(&mut store, rng, "dec.up21", c[2], c[1], 3, 1, 1, 1.0),
            ConvLayer::new(&mut store, rng, "dec.up10", c[1], c[0], 3, 1, 1, 1.0),
        ];
        let recon_head = ConvLayer::new(&mut store, rng, "dec.recon", c[0], 3, 3, 1, 1, 1.0);
        let prop_head = ConvLayer::new(&mut store, rng, "dec.prop", c[0], c[0], 3, 1, 1, 1.0);

        // Entropy head: local streams at the coarsest scale, plus non-local
        // streams mined with a query embedded from those locals (everything
        // the decoder knows before the latent arrives).
        let attn = AttentionConfig::new(d, cfg.num_heads)?;
        let (prior_mhlca, prior_in) = match cfg.variant {
            ContextVariant::Base => (None, c[2]),
            ContextVariant::Nlc => {
                let qe = QEmbed::new(&mut store, rng, "prior.q", c[2], d, slope);
                let kv = KvEmbed::new(&mut store, rng, "prior.kv", c[2], d, slope);
                let out = DwResBlock::new(&mut store, rng, "prior.out", d, slope);
                (Some(Mhlca::new(attn, qe, kv, out)), c[2] + d)
            }
            ContextVariant::Mnlc => {
                let qe = QEmbed::new(&mut store, rng, "prior.q", 2 * c[2], d, slope);
                let kv = KvEmbed::new(&mut store, rng, "prior.kv", c[2], d, slope);
                let out = DwResBlock::new(&mut store, rng, "prior.out", d, slope);
                (Some(Mhlca::new(attn, qe, kv, out)), 2 * c[2] + 2 * d)
            }
        };
        let entropy1 = ConvLayer::new(&mut store, rng, "ent.c1", prior_in, c[2], 3, 1, 1, 1.0);
        let entropy2 = ConvLayer::new(&mut store, rng, "ent.c2", c[2], 2 * clat, 3, 1, 1, 1.0);
        // bias the raw scales so sigma starts near 1
        {
            let b = store.data_mut(entropy2.bias_id());
            for v in b.iter_mut().skip(clat) {
                *v = 0.5413;
            }
        }

        Ok(Model {
            cfg,
            store,
            intra_embed,
            pyramid,
            miners,
            enc_fuse,
            enc_down,
            enc_latent,
            dec_head,
            dec_fuse,
            dec_up,
            recon_head,
            prop_head,
            prior_mhlca,
            entropy1,
            entropy2,
        })
    }

    pub fn bind(&self, g: &mut Graph) -> Binding {
        self.store.bind(g)
    }

    /// Coding needs extents divisible by 8: three pyramid scales plus one
    /// refinement pooling below the coarsest.
    pub fn check_extents(&self, h: usize, w: usize) -> Result<()> {
        if h % 8 != 0 || w % 8 != 0 {
            return Err(Error::dimension(format!(
                "coding extents {h}x{w} must be divisible by 8"
            )));
        }
        Ok(())
    }

    /// Embeds an intra reconstruction into the propagated-feature space.
    pub fn intra_feature(&self, g: &mut Graph, bind: &Binding, recon: TensorId) -> Result<TensorId> {
        let f = self.intra_embed.forward(g, bind, recon)?;
        Ok(g.leaky_relu(f, self.cfg.leaky_slope))
    }

    /// Everything the decoder can compute before the latent arrives:
    /// reference pyramids, local contexts per scale, and the entropy-model
    /// parameters.
    pub fn mine_priors(
        &self,
        g: &mut Graph,
        bind: &Binding,
        state: &StateIds,
        flow: &Arc<Flow>,
    ) -> Result<FramePriors> {
        let flow0 = flow.clone();
        let flow1 = Arc::new(flow0.downscale()?);
        let flow2 = Arc::new(flow1.downscale()?);
        let flows = [flow0, flow1, flow2];

        let feats1 = self.pyramid.forward(g, bind, state.f_curr)?;
        let feats2 = self.pyramid.forward(g, bind, state.f_prev)?;

        let locals = [
            self.miners[0].mine_local(g, bind, feats1.scales[0], state.c_prev.as_ref().map(|c| c[0]), &flows[0])?,
            self.miners[1].mine_local(g, bind, feats1.scales[1], state.c_prev.as_ref().map(|c| c[1]), &flows[1])?,
            self.miners[2].mine_local(g, bind, feats1.scales[2], state.c_prev.as_ref().map(|c| c[2]), &flows[2])?,
        ];

        // entropy prior at the coarsest scale
        let cl1 = locals[2].cl_ref1;
        let mut parts: Vec<TensorId> = vec![cl1];
        if self.cfg.variant == ContextVariant::Mnlc {
            parts.push(locals[2].cl_ref2.unwrap_or(cl1));
        }
        let mut ent_parts = parts.clone();
        if let Some(prior) = &self.prior_mhlca {
            let q_in = if parts.len() == 1 { parts[0] } else { g.concat_channels(&parts)? };
            let nl1 = prior.forward(g, bind, q_in, feats1.scales[2])?;
            ent_parts.push(nl1);
            if self.cfg.variant == ContextVariant::Mnlc {
                let nl2 = prior.forward(g, bind, q_in, feats2.scales[2])?;
                ent_parts.push(nl2);
            }
        }
        let ent_in = if ent_parts.len() == 1 { ent_parts[0] } else { g.concat_channels(&ent_parts)? };
        let h = self.entropy1.forward(g, bind, ent_in)?;
        let h = g.leaky_relu(h, self.cfg.leaky_slope);
        let out = self.entropy2.forward(g, bind, h)?;
        let clat = self.cfg.latent_channels;
        let mu = g.slice_channels(out, 0, clat)?;
        let sigma_raw = g.slice_channels(out, clat, clat)?;
        let sp = g.softplus(sigma_raw);
        let sigma = g.add_scalar(sp, self.cfg.sigma_min);

        Ok(FramePriors { feats1, feats2, locals, flows, mu, sigma })
    }

    fn mine_full(
        &self,
        g: &mut Graph,
        bind: &Binding,
        side: QuerySide,
        scale: usize,
        y: TensorId,
        priors: &FramePriors,
    ) -> Result<crate::context::ContextSet> {
        let f1 = priors.feats1.scales[scale];
        let f2 = priors.feats2.scales[scale];
        let nl = self.miners[scale].mine_nonlocal(g, bind, side, y, f1, Some(f2))?;
        Ok(self.miners[scale].assemble(priors.locals[scale], nl))
    }

    /// Analysis ladder: frame in, latent out. Mid-features query the
    /// non-local streams on the encoder side.
    pub fn encode_transform(
        &self,
        g: &mut Graph,
        bind: &Binding,
        x: TensorId,
        priors: &FramePriors,
    ) -> Result<TensorId> {
        let slope = self.cfg.leaky_slope;
        let set0 = self.mine_full(g, bind, QuerySide::Encoder, 0, x, priors)?;
        let h0 = self.enc_fuse[0].forward(g, bind, x, &set0)?;
        let h0 = g.leaky_relu(h0, slope);
        let y1 = self.enc_down[0].forward(g, bind, h0)?;
        let y1 = g.leaky_relu(y1, slope);

        let set1 = self.mine_full(g, bind, QuerySide::Encoder, 1, y1, priors)?;
        let h1 = self.enc_fuse[1].forward(g, bind, y1, &set1)?;
        let h1 = g.leaky_relu(h1, slope);
        let y2 = self.enc_down[1].forward(g, bind, h1)?;
        let y2 = g.leaky_relu(y2, slope);

        let set2 = self.mine_full(g, bind, QuerySide::Encoder, 2, y2, priors)?;
        let h2 = self.enc_fuse[2].forward(g, bind, y2, &set2)?;
        let h2 = g.leaky_relu(h2, slope);
        self.enc_latent.forward(g, bind, h2)
    }

    /// Synthesis ladder: quantized latent in, reconstruction and next state
    /// out. Mirrors the analysis but queries with decoder mid-features.
    pub fn decode_transform(
        &self,
        g: &mut Graph,
        bind: &Binding,
        y_hat: TensorId,
        priors: &FramePriors,
    ) -> Result<DecodeOut> {
        let slope = self.cfg.leaky_slope;
        let d2 = self.dec_head.forward(g, bind, y_hat)?;
        let d2 = g.leaky_relu(d2, slope);
        let set2 = self.mine_full(g, bind, QuerySide::Decoder, 2, d2, priors)?;
        let h2 = self.dec_fuse[2].forward(g, bind, d2, &set2)?;
        let h2 = g.leaky_relu(h2, slope);

        let u1 = g.up2(h2)?;
        let u1 = self.dec_up[0].forward(g, bind, u1)?;
        let u1 = g.leaky_relu(u1, slope);
        let set1 = self.mine_full(g, bind, QuerySide::Decoder, 1, u1, priors)?;
        let h1 = self.dec_fuse[1].forward(g, bind, u1, &set1)?;
        let h1 = g.leaky_relu(h1, slope);

        let u0 = g.up2(h1)?;
        let u0 = self.dec_up[1].forward(g, bind, u0)?;
        let u0 = g.leaky_relu(u0, slope);
        let set0 = self.mine_full(g, bind, QuerySide::Decoder, 0, u0, priors)?;
        let h0 = self.dec_fuse[0].forward(g, bind, u0, &set0)?;
        let h0 = g.leaky_relu(h0, slope);

        let recon = self.recon_head.forward(g, bind, h0)?;
        let f_prop_next = self.prop_head.forward(g, bind, h0)?;
        let f_prop_next = g.leaky_relu(f_prop_next, slope);

        let new_c_prev = [
            priors.locals[0].cl_ref1,
            priors.locals[1].cl_ref1,
            priors.locals[2].cl_ref1,
        ];
        Ok(DecodeOut { recon, f_prop_next, new_c_prev })
    }

    /// Latent extents for a frame of the given size.
    pub fn latent_shape(&self, h: usize, w: usize) -> [usize; 3] {
        [self.cfg.latent_channels, h / 4, w / 4]
    }
}

/// Frame as a graph constant.
pub fn frame_tensor(g: &mut Graph, frame: &Frame) -> TensorId {
    g.constant(frame.data.clone(), &[frame.channels, frame.height, frame.width])
        .expect("frame data matches extents")
}

/// Graph output clamped into pixel range as a frame.
pub fn tensor_frame(g: &Graph, id: TensorId) -> Frame {
    let s = g.shape(id);
    let mut f = Frame::new(s[0], s[1], s[2]);
    for (dst, &v) in f.data.iter_mut().zip(g.data(id)) {
        *dst = v.clamp(0.0, 1.0);
    }
    f
}

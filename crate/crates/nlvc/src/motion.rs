//! Motion-compensated local context mining: warping, offset-diversity
//! refinement of the nearest reference, and reuse of the previous local
//! context for the second reference through a multi-scale refinement.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;

use crate::blocks::{ConvLayer, DwResBlock};
use crate::error::{Error, Result};
use crate::params::{Binding, ParamStore};
use crate::tensor::{Flow, Graph, TensorId};

/// Decoded motion carried as side information. The per-pixel bit cost of
/// transmitting it is a config constant (zero for synthetic known flows).
pub type MotionField = Flow;

/// Sanity bound from the domain type: displacements may not exceed the
/// frame extents.
pub fn validate_motion(v: &MotionField) -> Result<()> {
    let bound = v.height.max(v.width) as f64;
    let mag = v.max_magnitude();
    if !mag.is_finite() || mag > bound {
        return Err(Error::input(format!(
            "motion magnitude {mag:.1} exceeds sanity bound {bound:.1}"
        )));
    }
    Ok(())
}

/// Bilinear backward warp by a decoded (constant) motion field.
pub fn warp(g: &mut Graph, f: TensorId, v: &Arc<MotionField>) -> Result<TensorId> {
    validate_motion(v)?;
    g.warp(f, v)
}

/// Predicts `groups` residual offset fields and softmax masks from the
/// warped feature and the motion field, then blends the re-warped
/// candidates. Zero-initialized heads make this the identity.
#[derive(Clone, Debug)]
pub struct OffsetDiversity {
    pub groups: usize,
    trunk: ConvLayer,
    heads: ConvLayer,
    slope: f64,
}

impl OffsetDiversity {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        groups: usize,
        slope: f64,
    ) -> Self {
        OffsetDiversity {
            groups,
            trunk: ConvLayer::new(store, rng, &format!("{name}.trunk"), channels + 2, channels, 3, 1, 1, 1.0),
            // 2G offset planes then G mask logits; zero-init so offsets are
            // zero and masks uniform at the start
            heads: ConvLayer::new(store, rng, &format!("{name}.heads"), channels, 3 * groups, 3, 1, 1, 0.0),
            slope,
        }
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        bind: &Binding,
        f_warped: TensorId,
        v: &MotionField,
    ) -> Result<TensorId> {
        let s = g.shape(f_warped).to_vec();
        let (h, w) = (s[1], s[2]);
        if v.height != h || v.width != w {
            return Err(Error::dimension("offset_diversity: motion extents mismatch"));
        }
        let mut vdata = Vec::with_capacity(2 * h * w);
        vdata.extend_from_slice(&v.dx);
        vdata.extend_from_slice(&v.dy);
        let vt = g.constant(vdata, &[2, h, w])?;
        let x = g.concat_channels(&[f_warped, vt])?;
        let t = self.trunk.forward(g, bind, x)?;
        let t = g.leaky_relu(t, self.slope);
        let heads = self.heads.forward(g, bind, t)?;
        let offsets = g.slice_channels(heads, 0, 2 * self.groups)?;
        let logits = g.slice_channels(heads, 2 * self.groups, self.groups)?;
        let masks = g.softmax(logits, 0)?;
        let mut acc: Option<TensorId> = None;
        for grp in 0..self.groups {
            let off = g.slice_channels(offsets, 2 * grp, 2)?;
            let warped = g.warp_dyn(f_warped, off)?;
            let mask = g.slice_channels(masks, grp, 1)?;
            let weighted = g.mul_spatial(warped, mask)?;
            acc = Some(match acc {
                Some(a) => g.add(a, weighted)?,
                None => weighted,
            });
        }
        Ok(acc.expect("groups >= 1"))
    }
}

/// U-shaped refinement with a skip connection: down2, res block, up2, res
/// block, and a zero-initialized mix so it starts as the identity.
#[derive(Clone, Debug)]
pub struct MultiScaleRefine {
    down_block: DwResBlock,
    up_block: DwResBlock,
    mix: ConvLayer,
    slope: f64,
}

impl MultiScaleRefine {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        slope: f64,
    ) -> Self {
        MultiScaleRefine {
            down_block: DwResBlock::new(store, rng, &format!("{name}.down"), channels, slope),
            up_block: DwResBlock::new(store, rng, &format!("{name}.up"), channels, slope),
            mix: ConvLayer::new(store, rng, &format!("{name}.mix"), channels, channels, 3, 1, 1, 0.0),
            slope,
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: TensorId) -> Result<TensorId> {
        let d = g.down2(x)?;
        let d = self.down_block.forward(g, bind, d)?;
        let u = g.up2(d)?;
        let u = self.up_block.forward(g, bind, u)?;
        let u = g.leaky_relu(u, self.slope);
        let r = self.mix.forward(g, bind, u)?;
        g.add(x, r)
    }
}

/// Reuses the stored previous local context as the second reference's local
/// context: warp by the current motion, then refine. No motion bits are
/// attributed to this path. Fails with "reference unavailable" on the first
/// P-frame; the caller substitutes the first reference's context.
pub fn second_reference_context(
    g: &mut Graph,
    bind: &Binding,
    refine: &MultiScaleRefine,
    c_prev: Option<TensorId>,
    v: &Arc<MotionField>,
) -> Result<TensorId> {
    let c_prev = c_prev.ok_or_else(|| Error::input("reference unavailable"))?;
    let warped = warp(g, c_prev, v)?;
    refine.forward(g, bind, warped)
}

/// Bits charged for the reused-context path (the whole point of the reuse).
pub const SECOND_REFERENCE_MOTION_BITS: f64 = 0.0;

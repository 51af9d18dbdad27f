//! Small learned blocks shared by the transform, mining, and entropy nets.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::params::{conv_init, zeros, Binding, ParamId, ParamStore};
use crate::tensor::{Graph, TensorId};

/// One convolution with bias.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    w: ParamId,
    b: ParamId,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        groups: usize,
        gain: f64,
    ) -> Self {
        let c_in_g = c_in / groups;
        let data = if gain == 0.0 {
            zeros(c_out * c_in_g * k * k)
        } else {
            conv_init(rng, c_out, c_in_g, k, gain)
        };
        let w = store.register(format!("{name}.w"), vec![c_out, c_in_g, k, k], data);
        let b = store.register(format!("{name}.b"), vec![c_out], zeros(c_out));
        ConvLayer { w, b, stride, padding: (k - 1) / 2, groups }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: TensorId) -> Result<TensorId> {
        g.conv2d(x, bind.id(self.w), Some(bind.id(self.b)), self.stride, self.padding, self.groups)
    }

    pub fn weight_id(&self) -> ParamId {
        self.w
    }

    pub fn bias_id(&self) -> ParamId {
        self.b
    }
}

/// Depth-wise residual block: pointwise, depth-wise 3x3, pointwise, with a
/// skip connection. The final pointwise is zero-initialized so the block
/// starts as the identity.
#[derive(Clone, Debug)]
pub struct DwResBlock {
    pw1: ConvLayer,
    dw: ConvLayer,
    pw2: ConvLayer,
    slope: f64,
}

impl DwResBlock {
    pub fn new(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        slope: f64,
    ) -> Self {
        DwResBlock {
            pw1: ConvLayer::new(store, rng, &format!("{name}.pw1"), channels, channels, 1, 1, 1, 1.0),
            dw: ConvLayer::new(
                store,
                rng,
                &format!("{name}.dw"),
                channels,
                channels,
                3,
                1,
                channels,
                1.0,
            ),
            pw2: ConvLayer::new(store, rng, &format!("{name}.pw2"), channels, channels, 1, 1, 1, 0.0),
            slope,
        }
    }

    pub fn forward(&self, g: &mut Graph, bind: &Binding, x: TensorId) -> Result<TensorId> {
        let h = self.pw1.forward(g, bind, x)?;
        let h = g.leaky_relu(h, self.slope);
        let h = self.dw.forward(g, bind, h)?;
        let h = g.leaky_relu(h, self.slope);
        let h = self.pw2.forward(g, bind, h)?;
        g.add(x, h)
    }
}

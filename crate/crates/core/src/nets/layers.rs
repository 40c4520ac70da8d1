use rand::Rng;

use super::params::{Grads, ParamId, ParamSet};
use crate::grid::FeatureGrid;
use crate::ops::{self, ConvGeom};

#[derive(Debug, Clone)]
pub(crate) struct Conv {
    pub geom: ConvGeom,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv {
    /// Fan-in scaled uniform initialization for weight and bias.
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, geom: ConvGeom, rng: &mut R) -> Self {
        let bound = 1.0 / (geom.fan_in() as f64).sqrt();
        let k = geom.kernel;
        let weight = params.add_uniform(
            format!("{name}.weight"),
            vec![geom.out_channels, geom.in_channels, k, k, k],
            bound,
            rng,
        );
        let bias = params.add_uniform(format!("{name}.bias"), vec![geom.out_channels], bound, rng);
        Self { geom, weight, bias }
    }

    pub fn forward(&self, p: &ParamSet, x: &FeatureGrid) -> FeatureGrid {
        ops::conv3d_forward(x, p.get(self.weight), p.get(self.bias), self.geom)
    }

    pub fn backward(&self, p: &ParamSet, x: &FeatureGrid, grad_out: &FeatureGrid, grads: &mut Grads) -> FeatureGrid {
        let (gw, gb) = grads.pair_mut(self.weight, self.bias);
        ops::conv3d_backward(x, p.get(self.weight), grad_out, self.geom, gw, gb)
    }
}

/// Pre-activation residual block: `x + conv2(silu(conv1(silu(x))))`.
#[derive(Debug, Clone)]
pub(crate) struct ResBlock {
    pub conv1: Conv,
    pub conv2: Conv,
}

#[derive(Debug, Clone)]
pub(crate) struct ResTape {
    x: FeatureGrid,
    a: FeatureGrid,
    h: FeatureGrid,
    b: FeatureGrid,
}

impl ResBlock {
    pub fn new<R: Rng>(params: &mut ParamSet, name: &str, channels: usize, rng: &mut R) -> Self {
        Self {
            conv1: Conv::new(
                params,
                &format!("{name}.conv1"),
                ConvGeom::same(channels, channels, 3),
                rng,
            ),
            conv2: Conv::new(
                params,
                &format!("{name}.conv2"),
                ConvGeom::same(channels, channels, 3),
                rng,
            ),
        }
    }

    pub fn forward(&self, p: &ParamSet, x: FeatureGrid) -> (FeatureGrid, ResTape) {
        let a = ops::silu(&x);
        let h = self.conv1.forward(p, &a);
        let b = ops::silu(&h);
        let mut y = self.conv2.forward(p, &b);
        y.add_assign(&x);
        (y, ResTape { x, a, h, b })
    }

    pub fn backward(&self, p: &ParamSet, tape: &ResTape, grad_out: &FeatureGrid, grads: &mut Grads) -> FeatureGrid {
        let gb = self.conv2.backward(p, &tape.b, grad_out, grads);
        let gh = ops::silu_backward(&tape.h, &gb);
        let ga = self.conv1.backward(p, &tape.a, &gh, grads);
        let mut gx = ops::silu_backward(&tape.x, &ga);
        gx.add_assign(grad_out);
        gx
    }
}

use ndarray::{concatenate, s, Axis};
use rand::Rng;

use super::{
    interp_axis, interp_axis_backward, Conv3d, GroupNorm, GroupNormCache, Param, Parameterized,
    ResidualSe, ResidualSeCache, Tensor,
};

/// conv -> group norm -> ReLU
#[derive(Debug, Clone)]
pub struct ConvUnit {
    pub conv: Conv3d,
    pub norm: GroupNorm,
}

#[derive(Debug, Clone)]
pub struct ConvUnitCache {
    input: Tensor,
    norm: GroupNormCache,
    output: Tensor,
}

impl ConvUnit {
    /// `planar` selects an in-plane `1x3x3` kernel with per-slice normalisation.
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        planar: bool,
        dilation: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        let (kernel, dil) = if planar {
            ([1, 3, 3], [1, dilation, dilation])
        } else {
            ([3, 3, 3], [dilation; 3])
        };
        ConvUnit {
            conv: Conv3d::new(in_channels, out_channels, kernel, dil, rng),
            norm: GroupNorm::new(groups.min(out_channels), out_channels, planar),
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, ConvUnitCache) {
        let h = self.conv.forward(x);
        let (mut y, norm) = self.norm.forward(&h);
        y.mapv_inplace(|v| v.max(0.0));
        (
            y.clone(),
            ConvUnitCache {
                input: x.clone(),
                norm,
                output: y,
            },
        )
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let h = self.conv.forward(x);
        let (mut y, _) = self.norm.forward(&h);
        y.mapv_inplace(|v| v.max(0.0));
        y
    }

    pub fn backward(&mut self, cache: &ConvUnitCache, grad_out: &Tensor) -> Tensor {
        let mut g = grad_out.to_owned();
        ndarray::Zip::from(&mut g)
            .and(&cache.output)
            .for_each(|g, &y| {
                if y <= 0.0 {
                    *g = 0.0;
                }
            });
        let gh = self.norm.backward(&cache.norm, &g);
        self.conv.backward(&cache.input, &gh)
    }
}

impl Parameterized for ConvUnit {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.conv.visit_params(f);
        self.norm.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.conv.visit_params_mut(f);
        self.norm.visit_params_mut(f);
    }
}

/// Two convolution units followed by a residual squeeze-and-excitation gate.
#[derive(Debug, Clone)]
pub struct ResSeUnit {
    pub first: ConvUnit,
    pub second: ConvUnit,
    pub se: ResidualSe,
}

#[derive(Debug, Clone)]
pub struct ResSeUnitCache {
    first: ConvUnitCache,
    second: ConvUnitCache,
    se: ResidualSeCache,
}

impl ResSeUnit {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        reduction: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        ResSeUnit {
            first: ConvUnit::new(in_channels, out_channels, false, 1, groups, rng),
            second: ConvUnit::new(out_channels, out_channels, false, 1, groups, rng),
            se: ResidualSe::new(out_channels, reduction, rng),
        }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, ResSeUnitCache) {
        let (a, first) = self.first.forward(x);
        let (b, second) = self.second.forward(&a);
        let (y, se) = self.se.forward(&b);
        (y, ResSeUnitCache { first, second, se })
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        let b = self.second.infer(&self.first.infer(x));
        self.se.forward(&b).0
    }

    /// Output of the two-convolution path, before the gate.
    pub fn conv_path(&self, x: &Tensor) -> Tensor {
        self.second.infer(&self.first.infer(x))
    }

    /// Unit output with every gate value pinned to `value`.
    pub fn infer_with_fixed_gate(&self, x: &Tensor, value: f32) -> Tensor {
        self.se.forward_with_fixed_gate(&self.conv_path(x), value)
    }

    pub fn backward(&mut self, cache: &ResSeUnitCache, grad_out: &Tensor) -> Tensor {
        let g = self.se.backward(&cache.se, grad_out);
        let g = self.second.backward(&cache.second, &g);
        self.first.backward(&cache.first, &g)
    }

    pub fn connectivity_backward(&self, g: &Tensor) -> Tensor {
        let g = self.second.conv.connectivity_backward(g);
        self.first.conv.connectivity_backward(&g)
    }
}

impl Parameterized for ResSeUnit {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.first.visit_params(f);
        self.second.visit_params(f);
        self.se.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.first.visit_params_mut(f);
        self.second.visit_params_mut(f);
        self.se.visit_params_mut(f);
    }
}

/// Resolution-preserving residual unit around one (possibly dilated) 3D
/// convolution unit: `y = x + unit(x)`.
#[derive(Debug, Clone)]
pub struct HdcUnit {
    pub unit: ConvUnit,
    dilation: usize,
}

impl HdcUnit {
    pub fn new<R: Rng + ?Sized>(channels: usize, dilation: usize, groups: usize, rng: &mut R) -> Self {
        HdcUnit {
            unit: ConvUnit::new(channels, channels, false, dilation, groups, rng),
            dilation,
        }
    }

    pub fn dilation(&self) -> usize {
        self.dilation
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, ConvUnitCache) {
        let (f, cache) = self.unit.forward(x);
        (f + x, cache)
    }

    pub fn infer(&self, x: &Tensor) -> Tensor {
        self.unit.infer(x) + x
    }

    pub fn backward(&mut self, cache: &ConvUnitCache, grad_out: &Tensor) -> Tensor {
        self.unit.backward(cache, grad_out) + grad_out
    }

    pub fn connectivity_backward(&self, g: &Tensor) -> Tensor {
        self.unit.conv.connectivity_backward(g) + g
    }
}

impl Parameterized for HdcUnit {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.unit.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.unit.visit_params_mut(f);
    }
}

/// Trilinear upsampling by integer factors along `(z, y, x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Upsample {
    pub factor: [usize; 3],
}

impl Upsample {
    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = x.to_owned();
        for (a, &f) in self.factor.iter().enumerate() {
            if f != 1 {
                let n = y.len_of(Axis(2 + a));
                y = interp_axis(&y, 2 + a, n * f);
            }
        }
        y
    }

    pub fn backward(&self, grad_out: &Tensor) -> Tensor {
        let mut g = grad_out.to_owned();
        for (a, &f) in self.factor.iter().enumerate().rev() {
            if f != 1 {
                let n = g.len_of(Axis(2 + a));
                g = interp_axis_backward(&g, 2 + a, n / f);
            }
        }
        g
    }
}

pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    concatenate(Axis(1), &[a.view(), b.view()]).expect("matching spatial shapes")
}

/// Split a channel-concatenated gradient back into its two parts.
pub fn split_channels(g: &Tensor, first: usize) -> (Tensor, Tensor) {
    (
        g.slice(s![.., ..first, .., .., ..]).to_owned(),
        g.slice(s![.., first.., .., .., ..]).to_owned(),
    )
}

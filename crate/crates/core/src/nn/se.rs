use ndarray::{Array2, Axis};
use rand::Rng;

use super::{Param, Parameterized, Tensor};

/// Squeeze-and-excitation gate with an identity shortcut:
/// `y = x * gate(x) + x`, where `gate` is
/// global average pool -> linear (C -> C/r) -> ReLU -> linear -> sigmoid.
#[derive(Debug, Clone)]
pub struct ResidualSe {
    channels: usize,
    hidden: usize,
    pub(crate) reduce_w: Param,
    pub(crate) reduce_b: Param,
    pub(crate) expand_w: Param,
    pub(crate) expand_b: Param,
}

#[derive(Debug, Clone)]
pub struct ResidualSeCache {
    input: Tensor,
    pooled: Array2<f32>,
    hidden: Array2<f32>,
    pub gate: Array2<f32>,
}

fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

impl ResidualSe {
    pub fn new<R: Rng + ?Sized>(channels: usize, reduction: usize, rng: &mut R) -> Self {
        let hidden = (channels / reduction).max(1);
        ResidualSe {
            channels,
            hidden,
            reduce_w: Param::he_normal(&[hidden, channels], channels, rng),
            reduce_b: Param::zeros(&[hidden]),
            expand_w: Param::he_normal(&[channels, hidden], hidden, rng),
            expand_b: Param::zeros(&[channels]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Per-sample, per-channel gate values in (0, 1).
    pub fn gate(&self, x: &Tensor) -> Array2<f32> {
        self.excite(x).2
    }

    fn excite(&self, x: &Tensor) -> (Array2<f32>, Array2<f32>, Array2<f32>) {
        let (n, c, ..) = x.dim();
        let mut pooled = Array2::<f32>::zeros((n, c));
        for ((b, ch), p) in pooled.indexed_iter_mut() {
            let plane = x.index_axis(Axis(0), b);
            let plane = plane.index_axis(Axis(0), ch);
            *p = (plane.iter().map(|&v| v as f64).sum::<f64>() / plane.len() as f64) as f32;
        }
        let mut hidden = Array2::zeros((n, self.hidden));
        let mut gate = Array2::zeros((n, c));
        for b in 0..n {
            for h in 0..self.hidden {
                let mut acc = self.reduce_b.value[h];
                for ch in 0..c {
                    acc += self.reduce_w.value[h * c + ch] * pooled[[b, ch]];
                }
                hidden[[b, h]] = acc.max(0.0);
            }
            for ch in 0..c {
                let mut acc = self.expand_b.value[ch];
                for h in 0..self.hidden {
                    acc += self.expand_w.value[ch * self.hidden + h] * hidden[[b, h]];
                }
                gate[[b, ch]] = sigmoid(acc);
            }
        }
        (pooled, hidden, gate)
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, ResidualSeCache) {
        let (pooled, hidden, gate) = self.excite(x);
        let y = apply_gate(x, &gate);
        (
            y,
            ResidualSeCache {
                input: x.clone(),
                pooled,
                hidden,
                gate,
            },
        )
    }

    /// Forward with the gate replaced by a fixed value for every channel.
    pub fn forward_with_fixed_gate(&self, x: &Tensor, value: f32) -> Tensor {
        let (n, c, ..) = x.dim();
        apply_gate(x, &Array2::from_elem((n, c), value))
    }

    pub fn backward(&mut self, cache: &ResidualSeCache, grad_out: &Tensor) -> Tensor {
        let (n, c, ..) = grad_out.dim();
        let x = &cache.input;
        let voxels = (x.len() / (n * c)) as f32;
        let mut dx = grad_out.clone();
        let mut dpooled = Array2::<f32>::zeros((n, c));
        for b in 0..n {
            let mut dgate_pre = vec![0.0f32; c];
            for ch in 0..c {
                let g = cache.gate[[b, ch]];
                let gx = grad_out.index_axis(Axis(0), b);
                let gx = gx.index_axis(Axis(0), ch);
                let xs = x.index_axis(Axis(0), b);
                let xs = xs.index_axis(Axis(0), ch);
                let dg: f64 = gx.iter().zip(xs.iter()).map(|(a, b)| *a as f64 * *b as f64).sum();
                dgate_pre[ch] = dg as f32 * g * (1.0 - g);
                dx.index_axis_mut(Axis(0), b)
                    .index_axis_mut(Axis(0), ch)
                    .mapv_inplace(|v| v * (1.0 + g));
            }
            let mut dhidden = vec![0.0f32; self.hidden];
            for ch in 0..c {
                self.expand_b.grad[ch] += dgate_pre[ch];
                for h in 0..self.hidden {
                    self.expand_w.grad[ch * self.hidden + h] += dgate_pre[ch] * cache.hidden[[b, h]];
                    dhidden[h] += self.expand_w.value[ch * self.hidden + h] * dgate_pre[ch];
                }
            }
            for h in 0..self.hidden {
                if cache.hidden[[b, h]] <= 0.0 {
                    continue;
                }
                self.reduce_b.grad[h] += dhidden[h];
                for ch in 0..c {
                    self.reduce_w.grad[h * c + ch] += dhidden[h] * cache.pooled[[b, ch]];
                    dpooled[[b, ch]] += self.reduce_w.value[h * c + ch] * dhidden[h];
                }
            }
        }
        for b in 0..n {
            for ch in 0..c {
                let add = dpooled[[b, ch]] / voxels;
                dx.index_axis_mut(Axis(0), b)
                    .index_axis_mut(Axis(0), ch)
                    .mapv_inplace(|v| v + add);
            }
        }
        dx
    }

    pub fn channels(&self) -> usize {
        self.channels
    }
}

fn apply_gate(x: &Tensor, gate: &Array2<f32>) -> Tensor {
    let mut y = x.clone();
    for (b, mut sample) in y.axis_iter_mut(Axis(0)).enumerate() {
        for (ch, mut plane) in sample.axis_iter_mut(Axis(0)).enumerate() {
            let g = gate[[b, ch]];
            plane.mapv_inplace(|v| v * g + v);
        }
    }
    y
}

impl Parameterized for ResidualSe {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.reduce_w);
        f(&self.reduce_b);
        f(&self.expand_w);
        f(&self.expand_b);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.reduce_w);
        f(&mut self.reduce_b);
        f(&mut self.expand_w);
        f(&mut self.expand_b);
    }
}

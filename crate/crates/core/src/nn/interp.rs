//! Separable linear interpolation along one axis (half-pixel centres, source
//! coordinates clamped at the low edge), shared by the decoder upsampling
//! layers and volume resampling.

use ndarray::{Array, Axis, Dimension, Zip};

/// Two-tap linear weights for every output index.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearTaps {
    pub lo: Vec<usize>,
    pub hi: Vec<usize>,
    pub w_hi: Vec<f64>,
}

impl LinearTaps {
    pub fn new(n_in: usize, n_out: usize) -> Self {
        assert!(n_in > 0 && n_out > 0);
        let scale = n_in as f64 / n_out as f64;
        let mut taps = LinearTaps {
            lo: Vec::with_capacity(n_out),
            hi: Vec::with_capacity(n_out),
            w_hi: Vec::with_capacity(n_out),
        };
        for i in 0..n_out {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(n_in - 1);
            let hi = (lo + 1).min(n_in - 1);
            let w = if hi == lo { 0.0 } else { src - lo as f64 };
            taps.lo.push(lo);
            taps.hi.push(hi);
            taps.w_hi.push(w);
        }
        taps
    }

    /// Source coordinate sampled by output index `i`.
    pub fn source_coordinate(&self, i: usize) -> f64 {
        self.lo[i] as f64 + self.w_hi[i]
    }
}

/// Nearest-neighbour source index for every output index.
pub fn nearest_indices(n_in: usize, n_out: usize) -> Vec<usize> {
    (0..n_out)
        .map(|i| ((((i as f64) + 0.5) * n_in as f64 / n_out as f64).floor() as usize).min(n_in - 1))
        .collect()
}

pub fn interp_axis<D: Dimension>(x: &Array<f32, D>, axis: usize, n_out: usize) -> Array<f32, D> {
    let n_in = x.len_of(Axis(axis));
    if n_in == n_out {
        return x.to_owned();
    }
    let taps = LinearTaps::new(n_in, n_out);
    let mut dim = x.raw_dim();
    dim[axis] = n_out;
    let mut out = Array::<f32, D>::zeros(dim);
    Zip::from(out.lanes_mut(Axis(axis)))
        .and(x.lanes(Axis(axis)))
        .for_each(|mut o, i| {
            for j in 0..n_out {
                let w = taps.w_hi[j];
                o[j] = ((1.0 - w) * i[taps.lo[j]] as f64 + w * i[taps.hi[j]] as f64) as f32;
            }
        });
    out
}

/// Adjoint of [`interp_axis`]: maps an output-shaped gradient back to `n_in`.
pub fn interp_axis_backward<D: Dimension>(g: &Array<f32, D>, axis: usize, n_in: usize) -> Array<f32, D> {
    let n_out = g.len_of(Axis(axis));
    if n_in == n_out {
        return g.to_owned();
    }
    let taps = LinearTaps::new(n_in, n_out);
    let mut dim = g.raw_dim();
    dim[axis] = n_in;
    let mut out = Array::<f32, D>::zeros(dim);
    Zip::from(out.lanes_mut(Axis(axis)))
        .and(g.lanes(Axis(axis)))
        .for_each(|mut o, gi| {
            for j in 0..n_out {
                let w = taps.w_hi[j] as f32;
                o[taps.lo[j]] += (1.0 - w) * gi[j];
                o[taps.hi[j]] += w * gi[j];
            }
        });
    out
}

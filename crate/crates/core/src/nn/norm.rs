use ndarray::Axis;

use super::{Param, Parameterized, Tensor};

/// Group normalisation with per-channel affine transform.
///
/// With `per_slice` set, statistics are taken separately for every depth
/// slice, so the layer never mixes information across `z`. In-plane (2D)
/// blocks use this mode.
#[derive(Debug, Clone)]
pub struct GroupNorm {
    groups: usize,
    channels: usize,
    per_slice: bool,
    eps: f64,
    pub(crate) gamma: Param,
    pub(crate) beta: Param,
}

#[derive(Debug, Clone)]
pub struct GroupNormCache {
    pub xhat: Tensor,
    /// One entry per `(batch, group[, slice])` normalisation set.
    pub inv_std: Vec<f32>,
}

impl GroupNorm {
    pub fn new(groups: usize, channels: usize, per_slice: bool) -> Self {
        assert!(groups > 0 && channels % groups == 0, "channels must divide into groups");
        GroupNorm {
            groups,
            channels,
            per_slice,
            eps: 1e-5,
            gamma: Param::filled(&[channels], 1.0),
            beta: Param::zeros(&[channels]),
        }
    }

    pub fn per_slice(&self) -> bool {
        self.per_slice
    }

    /// Offsets (into one sample's flat buffer) of the contiguous runs that make
    /// up each normalisation set of that sample.
    fn sets(&self, nz: usize, plane: usize) -> Vec<Vec<(usize, usize)>> {
        let cpg = self.channels / self.groups;
        let voxels = nz * plane;
        let mut sets = Vec::new();
        for g in 0..self.groups {
            if self.per_slice {
                for z in 0..nz {
                    sets.push(
                        (g * cpg..(g + 1) * cpg)
                            .map(|c| (c * voxels + z * plane, plane))
                            .collect(),
                    );
                }
            } else {
                sets.push(vec![(g * cpg * voxels, cpg * voxels)]);
            }
        }
        sets
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, GroupNormCache) {
        let (n, c, nz, ny, nx) = x.dim();
        assert_eq!(c, self.channels, "group norm channels");
        let plane = ny * nx;
        let voxels = nz * plane;
        let mut xhat = x.as_standard_layout().into_owned();
        let sets = self.sets(nz, plane);
        let mut inv_std = Vec::with_capacity(n * sets.len());
        for b in 0..n {
            let mut sample = xhat.index_axis_mut(Axis(0), b);
            let buf = sample.as_slice_mut().expect("contiguous");
            for set in &sets {
                let (mut sum, mut count) = (0.0f64, 0usize);
                for &(off, len) in set {
                    sum += buf[off..off + len].iter().map(|&v| v as f64).sum::<f64>();
                    count += len;
                }
                let mean = sum / count as f64;
                let mut var = 0.0f64;
                for &(off, len) in set {
                    var += buf[off..off + len]
                        .iter()
                        .map(|&v| (v as f64 - mean).powi(2))
                        .sum::<f64>();
                }
                let istd = 1.0 / (var / count as f64 + self.eps).sqrt();
                for &(off, len) in set {
                    for v in &mut buf[off..off + len] {
                        *v = ((*v as f64 - mean) * istd) as f32;
                    }
                }
                inv_std.push(istd as f32);
            }
        }
        let mut y = xhat.clone();
        for b in 0..n {
            let mut sample = y.index_axis_mut(Axis(0), b);
            let buf = sample.as_slice_mut().expect("contiguous");
            for ch in 0..c {
                let (gm, bt) = (self.gamma.value[ch], self.beta.value[ch]);
                for v in &mut buf[ch * voxels..(ch + 1) * voxels] {
                    *v = *v * gm + bt;
                }
            }
        }
        (y, GroupNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &GroupNormCache, grad_out: &Tensor) -> Tensor {
        let (n, c, nz, ny, nx) = grad_out.dim();
        let plane = ny * nx;
        let voxels = nz * plane;
        let sets = self.sets(nz, plane);
        let g = grad_out.as_standard_layout();
        let mut dx = Tensor::zeros((n, c, nz, ny, nx));
        for b in 0..n {
            let gs = g.index_axis(Axis(0), b);
            let gs = gs.as_slice().expect("contiguous");
            let xh = cache.xhat.index_axis(Axis(0), b);
            let xh = xh.as_slice().expect("contiguous");
            let mut dxb = dx.index_axis_mut(Axis(0), b);
            let dxs = dxb.as_slice_mut().expect("contiguous");
            for ch in 0..c {
                let range = ch * voxels..(ch + 1) * voxels;
                let (mut dgm, mut dbt) = (0.0f64, 0.0f64);
                let gm = self.gamma.value[ch];
                for ((d, &gv), &xv) in dxs[range.clone()].iter_mut().zip(&gs[range.clone()]).zip(&xh[range]) {
                    dgm += gv as f64 * xv as f64;
                    dbt += gv as f64;
                    *d = gv * gm;
                }
                self.gamma.grad[ch] += dgm as f32;
                self.beta.grad[ch] += dbt as f32;
            }
            for (s, set) in sets.iter().enumerate() {
                let istd = cache.inv_std[b * sets.len() + s] as f64;
                let (mut s1, mut s2, mut count) = (0.0f64, 0.0f64, 0usize);
                for &(off, len) in set {
                    for (&d, &xv) in dxs[off..off + len].iter().zip(&xh[off..off + len]) {
                        s1 += d as f64;
                        s2 += d as f64 * xv as f64;
                    }
                    count += len;
                }
                let m = count as f64;
                for &(off, len) in set {
                    for (d, &xv) in dxs[off..off + len].iter_mut().zip(&xh[off..off + len]) {
                        *d = (istd / m * (m * *d as f64 - s1 - xv as f64 * s2)) as f32;
                    }
                }
            }
        }
        dx
    }
}

impl Parameterized for GroupNorm {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.gamma);
        f(&self.beta);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn loss(norm: &GroupNorm, x: &Tensor, w: &Tensor) -> f64 {
        let (y, _) = norm.forward(x);
        y.iter().zip(w.iter()).map(|(a, b)| *a as f64 * *b as f64).sum()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for per_slice in [false, true] {
            let mut norm = GroupNorm::new(2, 4, per_slice);
            norm.gamma.value.iter_mut().for_each(|g| *g = rng.random_range(0.5..1.5));
            let x = Tensor::from_shape_fn((2, 4, 3, 3, 2), |_| rng.random_range(-2.0f32..2.0));
            let w = Tensor::from_shape_fn(x.dim(), |_| rng.random_range(-1.0f32..1.0));
            let (_, cache) = norm.forward(&x);
            let dx = norm.backward(&cache, &w);
            let h = 1e-2f32;
            for idx in [(0, 0, 0, 0, 0), (1, 3, 2, 1, 1), (0, 2, 1, 2, 0)] {
                let mut xp = x.clone();
                xp[idx] += h;
                let mut xm = x.clone();
                xm[idx] -= h;
                let fd = (loss(&norm, &xp, &w) - loss(&norm, &xm, &w)) / (2.0 * h as f64);
                assert!((fd - dx[idx] as f64).abs() < 2e-2, "per_slice={per_slice} {idx:?}: {fd} vs {}", dx[idx]);
            }
        }
    }

    #[test]
    fn per_slice_statistics_do_not_cross_depth() {
        let norm = GroupNorm::new(1, 2, true);
        let mut x = Tensor::from_shape_fn((1, 2, 3, 2, 2), |(_, c, z, y, x)| (c + z * 3 + y + x) as f32);
        let (a, _) = norm.forward(&x);
        x.slice_mut(ndarray::s![.., .., 1, .., ..]).mapv_inplace(|v| v * 7.0 + 1.0);
        let (b, _) = norm.forward(&x);
        for z in [0, 2] {
            let sa = a.slice(ndarray::s![.., .., z, .., ..]);
            let sb = b.slice(ndarray::s![.., .., z, .., ..]);
            assert_eq!(sa, sb);
        }
    }
}

use super::Tensor;

/// Non-overlapping max pooling (kernel equals stride on every axis).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MaxPool {
    pub window: [usize; 3],
}

#[derive(Debug, Clone)]
pub struct MaxPoolCache {
    input_dim: (usize, usize, usize, usize, usize),
    /// Flat input index (within the whole tensor) of each output's maximum.
    argmax: Vec<u32>,
}

impl MaxPool {
    pub fn new(window: [usize; 3]) -> Self {
        MaxPool { window }
    }

    pub fn forward(&self, x: &Tensor) -> (Tensor, MaxPoolCache) {
        let (n, c, nz, ny, nx) = x.dim();
        let [wz, wy, wx] = self.window;
        assert!(nz % wz == 0 && ny % wy == 0 && nx % wx == 0, "pool window must divide input");
        let (oz, oy, ox) = (nz / wz, ny / wy, nx / wx);
        let x = x.as_standard_layout();
        let xs = x.as_slice().expect("contiguous");
        let mut out = Vec::with_capacity(n * c * oz * oy * ox);
        let mut argmax = Vec::with_capacity(out.capacity());
        for plane in 0..n * c {
            let base = plane * nz * ny * nx;
            for z in 0..oz {
                for y in 0..oy {
                    for xo in 0..ox {
                        let mut best = f32::NEG_INFINITY;
                        let mut best_i = 0;
                        for a in 0..wz {
                            for b in 0..wy {
                                let row = base + ((z * wz + a) * ny + y * wy + b) * nx + xo * wx;
                                for (d, &v) in xs[row..row + wx].iter().enumerate() {
                                    if v > best {
                                        best = v;
                                        best_i = row + d;
                                    }
                                }
                            }
                        }
                        out.push(best);
                        argmax.push(best_i as u32);
                    }
                }
            }
        }
        let out = Tensor::from_shape_vec((n, c, oz, oy, ox), out).expect("pool output");
        (
            out,
            MaxPoolCache {
                input_dim: (n, c, nz, ny, nx),
                argmax,
            },
        )
    }

    pub fn backward(&self, cache: &MaxPoolCache, grad_out: &Tensor) -> Tensor {
        let mut dx = Tensor::zeros(cache.input_dim);
        let g = grad_out.as_standard_layout();
        let dxs = dx.as_slice_mut().expect("contiguous");
        for (&i, &gv) in cache.argmax.iter().zip(g.iter()) {
            dxs[i as usize] += gv;
        }
        dx
    }

    /// Spread each output value over its whole window (connectivity tracing).
    pub fn spread(&self, grad_out: &Tensor) -> Tensor {
        let (n, c, oz, oy, ox) = grad_out.dim();
        let [wz, wy, wx] = self.window;
        Tensor::from_shape_fn((n, c, oz * wz, oy * wy, ox * wx), |(b, ch, z, y, x)| {
            grad_out[[b, ch, z / wz, y / wy, x / wx]]
        })
    }
}

use ndarray::{linalg::general_mat_mul, s, Array2, ArrayView2, ArrayViewMut2, Axis};
use rand::Rng;

use super::{Param, Parameterized, Tensor};

/// Upper bound on the number of floats in one im2col buffer.
const COL_BUDGET: usize = 1 << 22;

/// Stride-1 "same" convolution over `(z, y, x)` with per-axis kernel size and
/// dilation. A 2D in-plane convolution is the special case `kernel[0] == 1`.
#[derive(Debug, Clone)]
pub struct Conv3d {
    in_channels: usize,
    out_channels: usize,
    kernel: [usize; 3],
    dilation: [usize; 3],
    pub(crate) weight: Param,
    pub(crate) bias: Param,
}

/// Output rows `[row0, row1)` of one sample, where a row is one `(z, y)` line.
struct RowRange {
    row0: usize,
    row1: usize,
}

impl Conv3d {
    pub fn new<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: [usize; 3],
        dilation: [usize; 3],
        rng: &mut R,
    ) -> Self {
        assert!(kernel.iter().all(|k| k % 2 == 1), "kernel sizes must be odd");
        assert!(dilation.iter().all(|&d| d >= 1), "dilation must be positive");
        let taps: usize = kernel.iter().product();
        let fan_in = in_channels * taps;
        let weight = Param::he_normal(&[out_channels, in_channels, kernel[0], kernel[1], kernel[2]], fan_in, rng);
        let bias = Param::zeros(&[out_channels]);
        Conv3d {
            in_channels,
            out_channels,
            kernel,
            dilation,
            weight,
            bias,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn kernel(&self) -> [usize; 3] {
        self.kernel
    }

    pub fn dilation(&self) -> [usize; 3] {
        self.dilation
    }

    /// Zero the bias (used for the classifier head).
    pub fn zero_bias(&mut self) {
        self.bias.value.iter_mut().for_each(|b| *b = 0.0);
    }

    fn col_rows(&self) -> usize {
        self.in_channels * self.kernel.iter().product::<usize>()
    }

    fn padding(&self) -> [isize; 3] {
        let mut p = [0isize; 3];
        for a in 0..3 {
            p[a] = (self.dilation[a] * (self.kernel[a] - 1) / 2) as isize;
        }
        p
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == [1, 1, 1]
    }

    fn chunks(&self, dims: [usize; 3]) -> Vec<RowRange> {
        let [z, y, x] = dims;
        let rows = z * y;
        let per_chunk = (COL_BUDGET / (self.col_rows() * x).max(1)).clamp(1, rows);
        (0..rows)
            .step_by(per_chunk)
            .map(|row0| RowRange {
                row0,
                row1: (row0 + per_chunk).min(rows),
            })
            .collect()
    }

    /// Offsets `(dz, dy, dx)` of every kernel tap relative to the output voxel,
    /// in weight-layout order.
    fn tap_offsets(&self) -> Vec<[isize; 3]> {
        let pad = self.padding();
        let [kz, ky, kx] = self.kernel;
        let mut taps = Vec::with_capacity(kz * ky * kx);
        for a in 0..kz {
            for b in 0..ky {
                for c in 0..kx {
                    taps.push([
                        (a * self.dilation[0]) as isize - pad[0],
                        (b * self.dilation[1]) as isize - pad[1],
                        (c * self.dilation[2]) as isize - pad[2],
                    ]);
                }
            }
        }
        taps
    }

    fn im2col(&self, x: &[f32], dims: [usize; 3], range: &RowRange, col: &mut [f32]) {
        let [nz, ny, nx] = dims;
        let width = (range.row1 - range.row0) * nx;
        let taps = self.tap_offsets();
        for ci in 0..self.in_channels {
            let plane = &x[ci * nz * ny * nx..(ci + 1) * nz * ny * nx];
            for (t, off) in taps.iter().enumerate() {
                let k = ci * taps.len() + t;
                let dst = &mut col[k * width..(k + 1) * width];
                for (ri, row) in (range.row0..range.row1).enumerate() {
                    let d = &mut dst[ri * nx..(ri + 1) * nx];
                    let sz = (row / ny) as isize + off[0];
                    let sy = (row % ny) as isize + off[1];
                    if sz < 0 || sz >= nz as isize || sy < 0 || sy >= ny as isize {
                        d.fill(0.0);
                        continue;
                    }
                    let src = &plane[(sz as usize * ny + sy as usize) * nx..][..nx];
                    let (lo, hi) = valid_span(nx, off[2]);
                    d[..lo].fill(0.0);
                    d[hi..].fill(0.0);
                    if lo < hi {
                        let s0 = (lo as isize + off[2]) as usize;
                        d[lo..hi].copy_from_slice(&src[s0..s0 + (hi - lo)]);
                    }
                }
            }
        }
    }

    fn col2im(&self, col: &[f32], dims: [usize; 3], range: &RowRange, dx: &mut [f32]) {
        let [nz, ny, nx] = dims;
        let width = (range.row1 - range.row0) * nx;
        let taps = self.tap_offsets();
        for ci in 0..self.in_channels {
            let plane = &mut dx[ci * nz * ny * nx..(ci + 1) * nz * ny * nx];
            for (t, off) in taps.iter().enumerate() {
                let k = ci * taps.len() + t;
                let srcrow = &col[k * width..(k + 1) * width];
                for (ri, row) in (range.row0..range.row1).enumerate() {
                    let sz = (row / ny) as isize + off[0];
                    let sy = (row % ny) as isize + off[1];
                    if sz < 0 || sz >= nz as isize || sy < 0 || sy >= ny as isize {
                        continue;
                    }
                    let (lo, hi) = valid_span(nx, off[2]);
                    if lo >= hi {
                        continue;
                    }
                    let s0 = (lo as isize + off[2]) as usize;
                    let dst = &mut plane[(sz as usize * ny + sy as usize) * nx + s0..][..hi - lo];
                    let src = &srcrow[ri * nx + lo..ri * nx + hi];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
        }
    }

    fn weight_matrix<'a>(&self, weight: &'a [f32]) -> ArrayView2<'a, f32> {
        ArrayView2::from_shape((self.out_channels, self.col_rows()), weight).expect("weight shape")
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let (n, c, nz, ny, nx) = x.dim();
        assert_eq!(c, self.in_channels, "conv input channels");
        let x = x.as_standard_layout();
        let voxels = nz * ny * nx;
        let mut out = Tensor::zeros((n, self.out_channels, nz, ny, nx));
        let w = self.weight_matrix(&self.weight.value);
        let chunks = self.chunks([nz, ny, nx]);
        let mut col = Vec::new();
        for b in 0..n {
            let xs = x.index_axis(Axis(0), b);
            let xs = xs.as_slice().expect("contiguous sample");
            let mut ob = out.index_axis_mut(Axis(0), b);
            let mut ob = ob
                .view_mut()
                .into_shape_with_order((self.out_channels, voxels))
                .expect("output sample");
            if self.is_pointwise() {
                let xv = ArrayView2::from_shape((c, voxels), xs).expect("input sample");
                general_mat_mul(1.0, &w, &xv, 0.0, &mut ob);
            } else {
                for range in &chunks {
                    let width = (range.row1 - range.row0) * nx;
                    col.resize(self.col_rows() * width, 0.0);
                    self.im2col(xs, [nz, ny, nx], range, &mut col);
                    let colv = ArrayView2::from_shape((self.col_rows(), width), &col[..]).expect("col");
                    let mut oc = ob.slice_mut(s![.., range.row0 * nx..range.row1 * nx]);
                    general_mat_mul(1.0, &w, &colv, 0.0, &mut oc);
                }
            }
            for (mut row, &bias) in ob.axis_iter_mut(Axis(0)).zip(&self.bias.value) {
                if bias != 0.0 {
                    row.mapv_inplace(|v| v + bias);
                }
            }
        }
        out
    }

    /// Accumulates weight and bias gradients and returns the input gradient.
    pub fn backward(&mut self, x: &Tensor, grad_out: &Tensor) -> Tensor {
        let (n, c, nz, ny, nx) = x.dim();
        let voxels = nz * ny * nx;
        let x = x.as_standard_layout();
        let g = grad_out.as_standard_layout();
        let rows = self.col_rows();
        let chunks = self.chunks([nz, ny, nx]);
        let mut dx = Tensor::zeros((n, c, nz, ny, nx));
        let mut col = Vec::new();
        let mut dcol = Vec::new();

        let mut dw = std::mem::take(&mut self.weight.grad);
        let mut db = std::mem::take(&mut self.bias.grad);
        let this = &*self;
        let w = this.weight_matrix(&this.weight.value);
        let mut dwm = ArrayViewMut2::from_shape((this.out_channels, rows), &mut dw[..]).expect("dweight");

        for b in 0..n {
            let gs = g.index_axis(Axis(0), b);
            let gm = gs
                .view()
                .into_shape_with_order((this.out_channels, voxels))
                .expect("grad sample");
            for (o, row) in gm.axis_iter(Axis(0)).enumerate() {
                db[o] += row.sum();
            }
            let xs = x.index_axis(Axis(0), b);
            let xs = xs.as_slice().expect("contiguous sample");
            let mut dxb = dx.index_axis_mut(Axis(0), b);
            let dxs = dxb.as_slice_mut().expect("contiguous grad");
            if this.is_pointwise() {
                let xv = ArrayView2::from_shape((c, voxels), xs).expect("input");
                general_mat_mul(1.0, &gm, &xv.t(), 1.0, &mut dwm);
                let mut dxv = ArrayViewMut2::from_shape((c, voxels), dxs).expect("dx");
                general_mat_mul(1.0, &w.t(), &gm, 0.0, &mut dxv);
                continue;
            }
            for range in &chunks {
                let width = (range.row1 - range.row0) * nx;
                col.resize(rows * width, 0.0);
                dcol.resize(rows * width, 0.0);
                this.im2col(xs, [nz, ny, nx], range, &mut col);
                let colv = ArrayView2::from_shape((rows, width), &col[..]).expect("col");
                let gc = gm.slice(s![.., range.row0 * nx..range.row1 * nx]);
                general_mat_mul(1.0, &gc, &colv.t(), 1.0, &mut dwm);
                let mut dcolv = ArrayViewMut2::from_shape((rows, width), &mut dcol[..]).expect("dcol");
                general_mat_mul(1.0, &w.t(), &gc, 0.0, &mut dcolv);
                this.col2im(&dcol, [nz, ny, nx], range, dxs);
            }
        }
        drop(dwm);
        self.weight.grad = dw;
        self.bias.grad = db;
        dx
    }

    /// Transposed propagation of a non-negative map through `|weight|`.
    ///
    /// The result is positive exactly on the input voxels connected to the
    /// nonzero entries of `grad_out`, so it traces the local dependency cone
    /// of the layer without cancellation.
    pub fn connectivity_backward(&self, grad_out: &Tensor) -> Tensor {
        let (n, _, nz, ny, nx) = grad_out.dim();
        let voxels = nz * ny * nx;
        let rows = self.col_rows();
        let g = grad_out.as_standard_layout();
        let wabs: Vec<f32> = self.weight.value.iter().map(|w| w.abs()).collect();
        let w = self.weight_matrix(&wabs);
        let mut dx = Tensor::zeros((n, self.in_channels, nz, ny, nx));
        let chunks = self.chunks([nz, ny, nx]);
        let mut dcol = Vec::new();
        for b in 0..n {
            let gs = g.index_axis(Axis(0), b);
            let gm = gs
                .view()
                .into_shape_with_order((self.out_channels, voxels))
                .expect("grad sample");
            let mut dxb = dx.index_axis_mut(Axis(0), b);
            let dxs = dxb.as_slice_mut().expect("contiguous");
            for range in &chunks {
                let width = (range.row1 - range.row0) * nx;
                dcol.resize(rows * width, 0.0);
                let gc = gm.slice(s![.., range.row0 * nx..range.row1 * nx]);
                let mut dcolv = ArrayViewMut2::from_shape((rows, width), &mut dcol[..]).expect("dcol");
                general_mat_mul(1.0, &w.t(), &gc, 0.0, &mut dcolv);
                self.col2im(&dcol, [nz, ny, nx], range, dxs);
            }
        }
        dx
    }

    /// Weight tensor as `(out, in, kz, ky, kx)`-ordered matrix `(out, in*taps)`.
    pub fn weight_view(&self) -> Array2<f32> {
        self.weight_matrix(&self.weight.value).to_owned()
    }
}

/// Output positions `[lo, hi)` along x for which `x + offset` stays inside `[0, n)`.
fn valid_span(n: usize, offset: isize) -> (usize, usize) {
    let lo = (-offset).max(0) as usize;
    let hi = (n as isize - offset).clamp(0, n as isize) as usize;
    (lo.min(n), hi)
}

impl Parameterized for Conv3d {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        f(&self.weight);
        f(&self.bias);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}

//! The hybrid 2D/3D encoder-decoder and its ablation variants.
//!
//! Layout (`b = base_channels`, default 16):
//!
//! ```text
//! stem     2 x [conv 1x3x3 -> GN -> ReLU]       1 -> b -> b        (skip A)
//!          max-pool (1,2,2)
//! enc1     2 x [conv 3x3x3 -> GN -> ReLU] + SE  b -> 2b -> 2b      (skip B)
//!          max-pool (2,2,2)
//! enc2     2 x [conv 3x3x3 -> GN -> ReLU] + SE  2b -> 4b -> 4b
//! fine     n x residual [conv 3x3x3 (dilation d_i) -> GN -> ReLU]  4b
//! dec1     upsample (2,2,2), concat B, 2 x conv + SE  6b -> 2b -> 2b
//! tail     upsample (1,2,2), concat A, 2 x [conv 1x3x3 -> GN -> ReLU]  3b -> b -> b
//! head     conv 1x1x1 b -> C, softmax
//! ```
//!
//! In-plane units use per-slice group normalisation, so the whole 2D block
//! processes every depth slice independently.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use ndarray::{s, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::datamodel::{ProbabilityMap, Volume};
use crate::nn::{
    concat_channels, split_channels, Conv3d, ConvUnit, ConvUnitCache, HdcUnit, MaxPool,
    MaxPoolCache, Param, Parameterized, ResSeUnit, ResSeUnitCache, Tensor, Upsample,
};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network config `{field}`: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("dilation rates {a} and {b} share the common factor {gcd}, which causes gridding")]
    Gridding { a: usize, b: usize, gcd: usize },
    #[error("input {axis} extent {size} is not divisible by {divisor}")]
    Shape {
        axis: &'static str,
        size: usize,
        divisor: usize,
    },
    #[error("batch volumes must share one shape; got {first:?} and {other:?}")]
    RaggedBatch { first: [usize; 3], other: [usize; 3] },
    #[error("empty batch")]
    EmptyBatch,
    #[error("expected {expected} input channel(s), got {found}")]
    Channels { expected: usize, found: usize },
    #[error("config hash {found} does not match the weights' hash {expected}")]
    ConfigHashMismatch { expected: String, found: String },
    #[error("weight file holds {found} values, model needs {expected}")]
    WeightCount { expected: usize, found: usize },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
}

pub type Result<T, E = NetworkError> = std::result::Result<T, E>;

/// The five columns of the ablation study.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NetworkVariant {
    /// All-3D U-Net with SE units; no fine block.
    #[serde(rename = "3dunet-se")]
    Unet3dSe,
    /// Adds the in-plane 2D stem and tail.
    #[serde(rename = "3dunet-se-2d")]
    Unet3dSe2d,
    /// Adds plain (dilation 1) residual bottleneck units.
    #[serde(rename = "3dunet-se-2d-c")]
    Unet3dSe2dC,
    /// Bottleneck units all dilated by 2.
    #[serde(rename = "3dunet-se-2d-dc")]
    Unet3dSe2dDc,
    /// Hybrid dilated bottleneck with co-prime consecutive rates.
    #[serde(rename = "organnet25d")]
    OrganNet25d,
}

impl NetworkVariant {
    pub const ALL: [NetworkVariant; 5] = [
        NetworkVariant::Unet3dSe,
        NetworkVariant::Unet3dSe2d,
        NetworkVariant::Unet3dSe2dC,
        NetworkVariant::Unet3dSe2dDc,
        NetworkVariant::OrganNet25d,
    ];

    pub fn key(self) -> &'static str {
        match self {
            NetworkVariant::Unet3dSe => "3dunet-se",
            NetworkVariant::Unet3dSe2d => "3dunet-se-2d",
            NetworkVariant::Unet3dSe2dC => "3dunet-se-2d-c",
            NetworkVariant::Unet3dSe2dDc => "3dunet-se-2d-dc",
            NetworkVariant::OrganNet25d => "organnet25d",
        }
    }

    /// Column title used in report tables.
    pub fn title(self) -> &'static str {
        match self {
            NetworkVariant::Unet3dSe => "3DUNet-SE",
            NetworkVariant::Unet3dSe2d => "3DUNet-SE-2D",
            NetworkVariant::Unet3dSe2dC => "3DUNet-SE-2D-C",
            NetworkVariant::Unet3dSe2dDc => "3DUNet-SE-2D-DC",
            NetworkVariant::OrganNet25d => "OrganNet2.5D",
        }
    }

    pub fn has_planar_block(self) -> bool {
        self != NetworkVariant::Unet3dSe
    }

    pub fn has_fine_block(self) -> bool {
        !matches!(self, NetworkVariant::Unet3dSe | NetworkVariant::Unet3dSe2d)
    }
}

impl fmt::Display for NetworkVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for NetworkVariant {
    type Err = NetworkError;

    fn from_str(s: &str) -> Result<Self> {
        NetworkVariant::ALL
            .into_iter()
            .find(|v| v.key().eq_ignore_ascii_case(s))
            .ok_or_else(|| NetworkError::InvalidConfig {
                field: "variant",
                message: format!(
                    "unknown variant `{s}` (expected one of {})",
                    NetworkVariant::ALL.map(|v| v.key()).join(", ")
                ),
            })
    }
}

fn default_base_channels() -> usize {
    16
}
fn default_hdc_dilations() -> Vec<usize> {
    vec![1, 2, 5]
}
fn default_num_hdc_modules() -> usize {
    3
}
fn default_se_reduction() -> usize {
    4
}
fn default_norm_groups() -> usize {
    8
}

/// Everything needed to rebuild the layer graph.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkConfig {
    pub variant: NetworkVariant,
    pub num_classes: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_hdc_dilations")]
    pub hdc_dilations: Vec<usize>,
    #[serde(default = "default_num_hdc_modules")]
    pub num_hdc_modules: usize,
    #[serde(default = "default_se_reduction")]
    pub se_reduction: usize,
    #[serde(default = "default_norm_groups")]
    pub norm_groups: usize,
}

pub fn gcd(mut a: usize, mut b: usize) -> usize {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

impl NetworkConfig {
    pub fn new(variant: NetworkVariant, num_classes: usize) -> Self {
        NetworkConfig {
            variant,
            num_classes,
            base_channels: default_base_channels(),
            hdc_dilations: default_hdc_dilations(),
            num_hdc_modules: default_num_hdc_modules(),
            se_reduction: default_se_reduction(),
            norm_groups: default_norm_groups(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, message: String| Err(NetworkError::InvalidConfig { field, message });
        if !(2..=crate::datamodel::MAX_CLASSES).contains(&self.num_classes) {
            return bad("num_classes", format!("must be in 2..=256, got {}", self.num_classes));
        }
        if self.base_channels == 0 {
            return bad("base_channels", "must be positive".into());
        }
        if self.norm_groups == 0 || self.base_channels % self.norm_groups != 0 {
            return bad(
                "norm_groups",
                format!(
                    "base_channels {} must be divisible by norm_groups {}",
                    self.base_channels, self.norm_groups
                ),
            );
        }
        if self.se_reduction == 0 {
            return bad("se_reduction", "must be positive".into());
        }
        if self.num_hdc_modules == 0 {
            return bad("num_hdc_modules", "must be positive".into());
        }
        if self.hdc_dilations.is_empty() || self.hdc_dilations.contains(&0) {
            return bad("hdc_dilations", "must be a non-empty list of positive rates".into());
        }
        if self.variant == NetworkVariant::OrganNet25d {
            let rates = self.bottleneck_dilations();
            for pair in rates.windows(2) {
                let g = gcd(pair[0], pair[1]);
                if g > 1 {
                    return Err(NetworkError::Gridding {
                        a: pair[0],
                        b: pair[1],
                        gcd: g,
                    });
                }
            }
        }
        Ok(())
    }

    /// Dilation rate of every fine-block unit, in order (empty if absent).
    pub fn bottleneck_dilations(&self) -> Vec<usize> {
        let n = self.num_hdc_modules;
        match self.variant {
            NetworkVariant::Unet3dSe | NetworkVariant::Unet3dSe2d => Vec::new(),
            NetworkVariant::Unet3dSe2dC => vec![1; n],
            NetworkVariant::Unet3dSe2dDc => vec![2; n],
            NetworkVariant::OrganNet25d => (0..n)
                .map(|i| self.hdc_dilations[i % self.hdc_dilations.len()])
                .collect(),
        }
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serialises");
        let digest = Sha256::digest(json.as_bytes());
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Geometry of one layer on the encoder/bottleneck path.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct LayerGeometry {
    pub kernel: [usize; 3],
    pub dilation: [usize; 3],
    pub stride: [usize; 3],
}

impl LayerGeometry {
    pub fn conv(kernel: [usize; 3], dilation: [usize; 3]) -> Self {
        LayerGeometry {
            kernel,
            dilation,
            stride: [1; 3],
        }
    }

    pub fn pool(window: [usize; 3]) -> Self {
        LayerGeometry {
            kernel: window,
            dilation: [1; 3],
            stride: window,
        }
    }

    /// Symmetric zero padding: "same" for stride-1 convolutions, none for pools.
    pub fn padding(&self) -> [usize; 3] {
        let mut p = [0; 3];
        for a in 0..3 {
            if self.stride[a] == 1 {
                p[a] = self.dilation[a] * (self.kernel[a] - 1) / 2;
            }
        }
        p
    }
}

/// Theoretical receptive-field extent in voxels, per axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReceptiveField {
    pub rz: usize,
    pub ry: usize,
    pub rx: usize,
}

impl ReceptiveField {
    /// Compose `r <- r + (k - 1) * d * j`, `j <- j * s` over a layer stack.
    pub fn of_layers(layers: &[LayerGeometry]) -> Self {
        let mut r = [1usize; 3];
        let mut jump = [1usize; 3];
        for l in layers {
            for a in 0..3 {
                r[a] += (l.kernel[a] - 1) * l.dilation[a] * jump[a];
                jump[a] *= l.stride[a];
            }
        }
        ReceptiveField {
            rz: r[0],
            ry: r[1],
            rx: r[2],
        }
    }

    pub fn zyx(&self) -> [usize; 3] {
        [self.rz, self.ry, self.rx]
    }
}

/// Inclusive input-index window `[start, end]` per axis seen by output voxel
/// `out` of a layer stack (unclipped: may extend past the grid).
pub fn receptive_window(layers: &[LayerGeometry], out: [usize; 3]) -> [(isize, isize); 3] {
    let mut win = out.map(|o| (o as isize, o as isize));
    for l in layers.iter().rev() {
        let pad = l.padding();
        for a in 0..3 {
            let (s, k, d, p) = (
                l.stride[a] as isize,
                l.kernel[a] as isize,
                l.dilation[a] as isize,
                pad[a] as isize,
            );
            win[a] = (win[a].0 * s - p, win[a].1 * s - p + (k - 1) * d);
        }
    }
    win
}

const PLANE_POOL: [usize; 3] = [1, 2, 2];
const VOLUME_POOL: [usize; 3] = [2, 2, 2];

/// Encoder plus fine-block layers of `config`, input side first.
pub fn encoder_path(config: &NetworkConfig) -> Vec<LayerGeometry> {
    let stem_kernel = if config.variant.has_planar_block() {
        [1, 3, 3]
    } else {
        [3, 3, 3]
    };
    let mut layers = vec![
        LayerGeometry::conv(stem_kernel, [1; 3]),
        LayerGeometry::conv(stem_kernel, [1; 3]),
        LayerGeometry::pool(PLANE_POOL),
        LayerGeometry::conv([3; 3], [1; 3]),
        LayerGeometry::conv([3; 3], [1; 3]),
        LayerGeometry::pool(VOLUME_POOL),
        LayerGeometry::conv([3; 3], [1; 3]),
        LayerGeometry::conv([3; 3], [1; 3]),
    ];
    for d in config.bottleneck_dilations() {
        layers.push(LayerGeometry::conv([3; 3], [d; 3]));
    }
    layers
}

pub fn receptive_field(config: &NetworkConfig) -> ReceptiveField {
    ReceptiveField::of_layers(&encoder_path(config))
}

/// Instantiated layers and weights.
#[derive(Debug, Clone)]
pub struct Network {
    config: NetworkConfig,
    seed: u64,
    stem: [ConvUnit; 2],
    pool_plane: MaxPool,
    enc1: ResSeUnit,
    pool_volume: MaxPool,
    enc2: ResSeUnit,
    fine: Vec<HdcUnit>,
    up_volume: Upsample,
    dec1: ResSeUnit,
    up_plane: Upsample,
    tail: [ConvUnit; 2],
    head: Conv3d,
}

/// Opaque handle to a built model.
pub type ModelHandle = Network;

/// Activations retained by [`Network::forward_train`] for the backward pass.
pub struct ForwardCache {
    stem: [ConvUnitCache; 2],
    pool_plane: MaxPoolCache,
    enc1: ResSeUnitCache,
    pool_volume: MaxPoolCache,
    enc2: ResSeUnitCache,
    fine: Vec<ConvUnitCache>,
    dec1: ResSeUnitCache,
    tail: [ConvUnitCache; 2],
    head_input: Tensor,
}

/// Contents of `manifest.json` next to a weight file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightManifest {
    pub config: NetworkConfig,
    pub seed: u64,
    pub parameter_count: usize,
    pub created_at: String,
    pub config_hash: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub input_shape: Option<[usize; 3]>,
}

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

impl Network {
    /// Build and initialise (He-normal convolutions, zero biases) from `seed`.
    pub fn build(config: &NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let b = config.base_channels;
        let g = config.norm_groups;
        let r = config.se_reduction;
        let planar = config.variant.has_planar_block();
        let stem = [
            ConvUnit::new(1, b, planar, 1, g, &mut rng),
            ConvUnit::new(b, b, planar, 1, g, &mut rng),
        ];
        let enc1 = ResSeUnit::new(b, 2 * b, r, g, &mut rng);
        let enc2 = ResSeUnit::new(2 * b, 4 * b, r, g, &mut rng);
        let fine = config
            .bottleneck_dilations()
            .into_iter()
            .map(|d| HdcUnit::new(4 * b, d, g, &mut rng))
            .collect();
        let dec1 = ResSeUnit::new(6 * b, 2 * b, r, g, &mut rng);
        let tail = [
            ConvUnit::new(3 * b, b, planar, 1, g, &mut rng),
            ConvUnit::new(b, b, planar, 1, g, &mut rng),
        ];
        let mut head = Conv3d::new(b, config.num_classes, [1, 1, 1], [1, 1, 1], &mut rng);
        head.zero_bias();
        Ok(Network {
            config: config.clone(),
            seed,
            stem,
            pool_plane: MaxPool::new(PLANE_POOL),
            enc1,
            pool_volume: MaxPool::new(VOLUME_POOL),
            enc2,
            fine,
            up_volume: Upsample { factor: VOLUME_POOL },
            dec1,
            up_plane: Upsample { factor: PLANE_POOL },
            tail,
            head,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stem(&self) -> &[ConvUnit; 2] {
        &self.stem
    }

    pub fn tail(&self) -> &[ConvUnit; 2] {
        &self.tail
    }

    pub fn encoder_units(&self) -> [&ResSeUnit; 2] {
        [&self.enc1, &self.enc2]
    }

    pub fn decoder_unit(&self) -> &ResSeUnit {
        &self.dec1
    }

    pub fn fine_block(&self) -> &[HdcUnit] {
        &self.fine
    }

    pub fn head(&self) -> &Conv3d {
        &self.head
    }

    /// The encoder's pooling windows, in order.
    pub fn downsampling_windows(&self) -> [[usize; 3]; 2] {
        [self.pool_plane.window, self.pool_volume.window]
    }

    pub fn count_parameters(&self) -> usize {
        self.parameter_count()
    }

    /// Divisibility the encoder needs: `(z, y, x)`.
    pub fn required_divisors() -> [usize; 3] {
        [
            PLANE_POOL[0] * VOLUME_POOL[0],
            PLANE_POOL[1] * VOLUME_POOL[1],
            PLANE_POOL[2] * VOLUME_POOL[2],
        ]
    }

    pub fn check_input_shape(shape: [usize; 3]) -> Result<()> {
        let div = Network::required_divisors();
        for (a, name) in ["z", "y", "x"].into_iter().enumerate() {
            if shape[a] == 0 || shape[a] % div[a] != 0 {
                return Err(NetworkError::Shape {
                    axis: name,
                    size: shape[a],
                    divisor: div[a],
                });
            }
        }
        Ok(())
    }

    fn check_tensor(&self, x: &Tensor) -> Result<()> {
        let (_, c, z, y, xx) = x.dim();
        if c != 1 {
            return Err(NetworkError::Channels { expected: 1, found: c });
        }
        Network::check_input_shape([z, y, xx])
    }

    /// In-plane block output (skip A) for input `(n, 1, z, y, x)`.
    pub fn stem_features(&self, x: &Tensor) -> Result<Tensor> {
        self.check_tensor(x)?;
        Ok(self.stem[1].infer(&self.stem[0].infer(x)))
    }

    /// Fine-block output, at `(z/2, y/4, x/4)`.
    pub fn bottleneck_features(&self, x: &Tensor) -> Result<Tensor> {
        let s = self.stem_features(x)?;
        let (p1, _) = self.pool_plane.forward(&s);
        let e1 = self.enc1.infer(&p1);
        let (p2, _) = self.pool_volume.forward(&e1);
        let mut h = self.enc2.infer(&p2);
        for unit in &self.fine {
            h = unit.infer(&h);
        }
        Ok(h)
    }

    /// Raw class scores `(n, C, z, y, x)` without retaining activations.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_tensor(x)?;
        let s = self.stem[1].infer(&self.stem[0].infer(x));
        let (p1, _) = self.pool_plane.forward(&s);
        let e1 = self.enc1.infer(&p1);
        let (p2, _) = self.pool_volume.forward(&e1);
        let mut h = self.enc2.infer(&p2);
        for unit in &self.fine {
            h = unit.infer(&h);
        }
        let d1 = self.dec1.infer(&concat_channels(&self.up_volume.forward(&h), &e1));
        let t = self.tail[1].infer(&self.tail[0].infer(&concat_channels(&self.up_plane.forward(&d1), &s)));
        Ok(self.head.forward(&t))
    }

    pub fn forward_train(&self, x: &Tensor) -> Result<(Tensor, ForwardCache)> {
        self.check_tensor(x)?;
        let (s0, c_s0) = self.stem[0].forward(x);
        let (s1, c_s1) = self.stem[1].forward(&s0);
        let (p1, c_p1) = self.pool_plane.forward(&s1);
        let (e1, c_e1) = self.enc1.forward(&p1);
        let (p2, c_p2) = self.pool_volume.forward(&e1);
        let (mut h, c_e2) = self.enc2.forward(&p2);
        let mut c_fine = Vec::with_capacity(self.fine.len());
        for unit in &self.fine {
            let (next, c) = unit.forward(&h);
            c_fine.push(c);
            h = next;
        }
        let (d1, c_d1) = self.dec1.forward(&concat_channels(&self.up_volume.forward(&h), &e1));
        let (t0, c_t0) = self.tail[0].forward(&concat_channels(&self.up_plane.forward(&d1), &s1));
        let (t1, c_t1) = self.tail[1].forward(&t0);
        let logits = self.head.forward(&t1);
        Ok((
            logits,
            ForwardCache {
                stem: [c_s0, c_s1],
                pool_plane: c_p1,
                enc1: c_e1,
                pool_volume: c_p2,
                enc2: c_e2,
                fine: c_fine,
                dec1: c_d1,
                tail: [c_t0, c_t1],
                head_input: t1,
            },
        ))
    }

    /// Accumulate parameter gradients for `d loss / d logits`.
    pub fn backward(&mut self, cache: ForwardCache, grad_logits: &Tensor) {
        let b = self.config.base_channels;
        let g = self.head.backward(&cache.head_input, grad_logits);
        let g = self.tail[1].backward(&cache.tail[1], &g);
        let g = self.tail[0].backward(&cache.tail[0], &g);
        let (g_up, g_skip_a) = split_channels(&g, 2 * b);
        let g = self.up_plane.backward(&g_up);
        let g = self.dec1.backward(&cache.dec1, &g);
        let (g_up, g_skip_b) = split_channels(&g, 4 * b);
        let mut g = self.up_volume.backward(&g_up);
        for (unit, c) in self.fine.iter_mut().zip(&cache.fine).rev() {
            g = unit.backward(c, &g);
        }
        let g = self.enc2.backward(&cache.enc2, &g);
        let g = self.pool_volume.backward(&cache.pool_volume, &g) + g_skip_b;
        let g = self.enc1.backward(&cache.enc1, &g);
        let g = self.pool_plane.backward(&cache.pool_plane, &g) + g_skip_a;
        let g = self.stem[1].backward(&cache.stem[1], &g);
        self.stem[0].backward(&cache.stem[0], &g);
    }

    /// Per-voxel class distributions for a batch of same-shaped volumes.
    pub fn forward(&self, batch: &[Volume]) -> Result<Vec<ProbabilityMap>> {
        let x = stack_volumes(batch)?;
        let logits = self.logits(&x)?;
        Ok(batch
            .iter()
            .enumerate()
            .map(|(i, v)| ProbabilityMap::from_logits(logits.index_axis(Axis(0), i), v.spacing()))
            .collect())
    }

    /// Input voxels locally connected to bottleneck voxel `out` for an input
    /// grid of `shape`, traced through the convolution and pooling layers of
    /// the encoder path (normalisation, gating and activations treated as
    /// pass-through).
    pub fn connectivity_support(&self, shape: [usize; 3], out: [usize; 3]) -> Result<Array3<bool>> {
        Network::check_input_shape(shape)?;
        let c = 4 * self.config.base_channels;
        let mut g = Tensor::zeros((1, c, shape[0] / 2, shape[1] / 4, shape[2] / 4));
        g.slice_mut(s![0, .., out[0], out[1], out[2]]).fill(1.0);
        let normalise = |mut t: Tensor| {
            let m = t.iter().cloned().fold(0.0f32, f32::max);
            if m > 0.0 {
                t.mapv_inplace(|v| v / m);
            }
            t
        };
        for unit in self.fine.iter().rev() {
            g = normalise(unit.connectivity_backward(&g));
        }
        g = normalise(self.enc2.connectivity_backward(&g));
        g = self.pool_volume.spread(&g);
        g = normalise(self.enc1.connectivity_backward(&g));
        g = self.pool_plane.spread(&g);
        g = normalise(self.stem[1].conv.connectivity_backward(&g));
        g = self.stem[0].conv.connectivity_backward(&g);
        Ok(g.index_axis(Axis(0), 0).index_axis(Axis(0), 0).mapv(|v| v > 0.0))
    }

    pub fn save_weights(&self, dir: &Path, input_shape: Option<[usize; 3]>) -> Result<WeightManifest> {
        let io = |path: &Path| {
            let path = path.display().to_string();
            move |source| NetworkError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        let mut bytes = Vec::with_capacity(self.parameter_count() * 4);
        self.visit_params(&mut |p| {
            for v in &p.value {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        });
        let weights = dir.join(WEIGHTS_FILE);
        fs::write(&weights, bytes).map_err(io(&weights))?;
        let manifest = WeightManifest {
            config: self.config.clone(),
            seed: self.seed,
            parameter_count: self.parameter_count(),
            created_at: chrono::Utc::now().to_rfc3339(),
            config_hash: self.config.hash(),
            input_shape,
        };
        let path = dir.join(MANIFEST_FILE);
        let text = serde_json::to_string_pretty(&manifest).expect("manifest serialises");
        fs::write(&path, text + "\n").map_err(io(&path))?;
        Ok(manifest)
    }

    /// Rebuild `config` and fill it with the weights in `dir`. Refuses weights
    /// saved under a different config.
    pub fn load_weights(config: &NetworkConfig, dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let found = config.hash();
        if manifest.config_hash != found {
            return Err(NetworkError::ConfigHashMismatch {
                expected: manifest.config_hash,
                found,
            });
        }
        let mut net = Network::build(config, manifest.seed)?;
        let path = dir.join(WEIGHTS_FILE);
        let bytes = fs::read(&path).map_err(|source| NetworkError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let expected = net.parameter_count();
        if bytes.len() != expected * 4 {
            return Err(NetworkError::WeightCount {
                expected,
                found: bytes.len() / 4,
            });
        }
        let mut values = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]));
        net.visit_params_mut(&mut |p| {
            for v in p.value.iter_mut() {
                *v = values.next().expect("length checked");
            }
        });
        Ok(net)
    }

    /// Load using the config recorded in the manifest.
    pub fn load_checkpoint(dir: &Path) -> Result<(Self, WeightManifest)> {
        let manifest = read_manifest(dir)?;
        let net = Network::load_weights(&manifest.config, dir)?;
        Ok((net, manifest))
    }
}

pub fn read_manifest(dir: &Path) -> Result<WeightManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|source| NetworkError::Io {
        path: path.display().to_string(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| NetworkError::Json {
        path: path.display().to_string(),
        source,
    })
}

/// Stack same-shaped volumes into an `(n, 1, z, y, x)` tensor.
pub fn stack_volumes(batch: &[Volume]) -> Result<Tensor> {
    let first = batch.first().ok_or(NetworkError::EmptyBatch)?.shape();
    let mut x = Tensor::zeros((batch.len(), 1, first[0], first[1], first[2]));
    for (i, v) in batch.iter().enumerate() {
        if v.shape() != first {
            return Err(NetworkError::RaggedBatch {
                first,
                other: v.shape(),
            });
        }
        x.slice_mut(s![i, 0, .., .., ..]).assign(v.data());
    }
    Ok(x)
}

impl Parameterized for Network {
    fn visit_params<'a>(&'a self, f: &mut dyn FnMut(&'a Param)) {
        self.stem.iter().for_each(|u| u.visit_params(f));
        self.enc1.visit_params(f);
        self.enc2.visit_params(f);
        self.fine.iter().for_each(|u| u.visit_params(f));
        self.dec1.visit_params(f);
        self.tail.iter().for_each(|u| u.visit_params(f));
        self.head.visit_params(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        self.stem.iter_mut().for_each(|u| u.visit_params_mut(f));
        self.enc1.visit_params_mut(f);
        self.enc2.visit_params_mut(f);
        self.fine.iter_mut().for_each(|u| u.visit_params_mut(f));
        self.dec1.visit_params_mut(f);
        self.tail.iter_mut().for_each(|u| u.visit_params_mut(f));
        self.head.visit_params_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{IntensityUnit, Spacing};
    use rand::Rng;

    fn small(variant: NetworkVariant, classes: usize) -> NetworkConfig {
        NetworkConfig {
            base_channels: 8,
            ..NetworkConfig::new(variant, classes)
        }
    }

    fn random_input(shape: (usize, usize, usize, usize, usize), seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_shape_fn(shape, |_| rng.random_range(-1.0f32..1.0))
    }

    #[test]
    fn gridding_rule() {
        let mut cfg = NetworkConfig::new(NetworkVariant::OrganNet25d, 25);
        assert!(cfg.validate().is_ok());
        cfg.hdc_dilations = vec![2, 4, 8];
        assert!(matches!(cfg.validate(), Err(NetworkError::Gridding { a: 2, b: 4, gcd: 2 })));
        // uniform rates are only policed for the hybrid variant
        cfg.variant = NetworkVariant::Unet3dSe2dDc;
        assert!(cfg.validate().is_ok());
        assert_eq!(cfg.bottleneck_dilations(), vec![2, 2, 2]);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in NetworkVariant::ALL {
            assert_eq!(v.key().parse::<NetworkVariant>().unwrap(), v);
            let json = serde_json::to_string(&v).unwrap();
            assert_eq!(json, format!("\"{}\"", v.key()));
        }
        assert!("unet".parse::<NetworkVariant>().is_err());
    }

    #[test]
    fn single_layer_receptive_fields() {
        assert_eq!(
            ReceptiveField::of_layers(&[LayerGeometry::conv([1, 3, 3], [1; 3])]).zyx(),
            [1, 3, 3]
        );
        assert_eq!(
            ReceptiveField::of_layers(&[LayerGeometry::conv([3, 3, 3], [2; 3])]).zyx(),
            [5, 5, 5]
        );
    }

    #[test]
    fn receptive_window_width_equals_field() {
        for v in NetworkVariant::ALL {
            let cfg = NetworkConfig::new(v, 3);
            let layers = encoder_path(&cfg);
            let rf = ReceptiveField::of_layers(&layers).zyx();
            let w = receptive_window(&layers, [3, 5, 7]);
            for a in 0..3 {
                assert_eq!((w[a].1 - w[a].0 + 1) as usize, rf[a], "{v} axis {a}");
            }
        }
    }

    #[test]
    fn forward_shape_and_normalisation() {
        let net = Network::build(&small(NetworkVariant::OrganNet25d, 3), 1).unwrap();
        let spacing = Spacing::new(1.0, 1.0, 3.0).unwrap();
        let x = random_input((2, 1, 4, 8, 8), 2);
        let vols: Vec<Volume> = (0..2)
            .map(|i| Volume::new(x.index_axis(Axis(0), i).index_axis(Axis(0), 0).to_owned(), spacing, IntensityUnit::Normalized).unwrap())
            .collect();
        let out = net.forward(&vols).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].data().dim(), (3, 4, 8, 8));
    }

    #[test]
    fn indivisible_input_names_axis() {
        let net = Network::build(&small(NetworkVariant::OrganNet25d, 3), 1).unwrap();
        let x = Tensor::zeros((1, 1, 4, 6, 8));
        assert!(matches!(net.logits(&x), Err(NetworkError::Shape { axis: "y", size: 6, divisor: 4 })));
        let x = Tensor::zeros((1, 1, 3, 8, 8));
        assert!(matches!(net.logits(&x), Err(NetworkError::Shape { axis: "z", .. })));
    }

    #[test]
    fn train_and_infer_paths_agree() {
        let net = Network::build(&small(NetworkVariant::Unet3dSe2dDc, 4), 3).unwrap();
        let x = random_input((2, 1, 4, 8, 8), 4);
        let a = net.logits(&x).unwrap();
        let (b, _) = net.forward_train(&x).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = small(NetworkVariant::OrganNet25d, 4);
        let a = Network::build(&cfg, 9).unwrap();
        let b = Network::build(&cfg, 9).unwrap();
        let c = Network::build(&cfg, 10).unwrap();
        let collect = |n: &Network| {
            let mut v = Vec::new();
            n.visit_params(&mut |p| v.extend(p.value.iter().map(|x| x.to_bits())));
            v
        };
        assert_eq!(collect(&a), collect(&b));
        assert_ne!(collect(&a), collect(&c));
    }

    #[test]
    fn parameter_gradient_matches_finite_difference() {
        // d/dw of sum(logits * r) against central differences, one element per
        // tensor. ReLU and max-pool kinks make individual f32 differences noisy,
        // so a small minority of disagreements is tolerated.
        let mut net = Network::build(&small(NetworkVariant::OrganNet25d, 3), 5).unwrap();
        let x = random_input((1, 1, 4, 8, 8), 6);
        let r = random_input((1, 3, 4, 8, 8), 7);
        let objective = |n: &Network| -> f64 {
            let l = n.logits(&x).unwrap();
            l.iter().zip(r.iter()).map(|(a, b)| *a as f64 * *b as f64).sum()
        };
        let (_, cache) = net.forward_train(&x).unwrap();
        net.zero_grad();
        net.backward(cache, &r);
        let mut grads = Vec::new();
        net.visit_params(&mut |p| grads.push(p.grad[0]));
        let h = 1e-3f32;
        let perturbed = |pi: usize, d: f32| {
            let mut m = net.clone();
            let mut k = 0;
            m.visit_params_mut(&mut |p| {
                if k == pi {
                    p.value[0] += d;
                }
                k += 1;
            });
            m
        };
        let mut agree = 0;
        for (pi, &an) in grads.iter().enumerate() {
            let fd = (objective(&perturbed(pi, h)) - objective(&perturbed(pi, -h))) / (2.0 * h as f64);
            if (fd - an as f64).abs() <= 0.05 * (an as f64).abs().max(0.2) {
                agree += 1;
            }
        }
        assert!(agree * 10 >= grads.len() * 9, "{agree}/{} tensors agree", grads.len());
    }
}

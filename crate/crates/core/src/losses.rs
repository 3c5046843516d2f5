//! Focal, soft-Dice and combined segmentation objectives with analytic
//! gradients.
//!
//! Every function takes `(n, c, z, y, x)` arrays: `pred` holds per-voxel class
//! probabilities, `target` the one-hot ground truth.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array5, ArrayView5, Axis, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::ProbabilityMap;

/// Probabilities below this are clamped inside the logarithm.
pub const LOG_CLAMP: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("prediction shape {pred:?} differs from target shape {target:?}")]
    ShapeMismatch { pred: Vec<usize>, target: Vec<usize> },
    #[error("alpha has {found} entries but there are {expected} classes")]
    AlphaLength { expected: usize, found: usize },
    #[error("invalid loss config `{field}`: {message}")]
    InvalidConfig { field: &'static str, message: String },
    #[error("unknown dataset `{0}` (expected han24 or miccai9)")]
    UnknownDataset(String),
    #[error("empty batch")]
    EmptyBatch,
}

pub type Result<T, E = LossError> = std::result::Result<T, E>;

fn default_gamma() -> f64 {
    2.0
}
fn default_lambda() -> f64 {
    1.0
}
fn default_epsilon() -> f64 {
    1e-5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub alpha: Vec<f64>,
    #[serde(default = "default_gamma")]
    pub gamma: f64,
    #[serde(rename = "lambda", default = "default_lambda")]
    pub lambda_: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
}

impl LossConfig {
    /// `gamma = 2`, `lambda = 1`, `epsilon = 1e-5` with the given class weights.
    pub fn with_alpha(alpha: Vec<f64>) -> Self {
        LossConfig {
            alpha,
            gamma: default_gamma(),
            lambda_: default_lambda(),
            epsilon: default_epsilon(),
        }
    }

    /// Default weights for a dataset's class list.
    pub fn for_dataset(dataset: Dataset) -> Self {
        LossConfig::with_alpha(default_alpha(dataset))
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        if self.alpha.len() != num_classes {
            return Err(LossError::AlphaLength {
                expected: num_classes,
                found: self.alpha.len(),
            });
        }
        if let Some(a) = self.alpha.iter().find(|a| !(a.is_finite() && **a > 0.0)) {
            return Err(LossError::InvalidConfig {
                field: "alpha",
                message: format!("weights must be positive and finite, got {a}"),
            });
        }
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            return Err(LossError::InvalidConfig {
                field: "gamma",
                message: format!("must be >= 0, got {}", self.gamma),
            });
        }
        if !(self.lambda_.is_finite() && self.lambda_ >= 0.0) {
            return Err(LossError::InvalidConfig {
                field: "lambda",
                message: format!("must be >= 0, got {}", self.lambda_),
            });
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(LossError::InvalidConfig {
                field: "epsilon",
                message: format!("must be > 0, got {}", self.epsilon),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub focal: f64,
    pub dice: f64,
}

/// Class lists with published focal weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dataset {
    /// Background plus 24 head-and-neck organs.
    Han24,
    /// Background plus 9 organs.
    Miccai9,
}

impl Dataset {
    pub fn num_classes(self) -> usize {
        class_names(self).len()
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Dataset::Han24 => "han24",
            Dataset::Miccai9 => "miccai9",
        })
    }
}

impl FromStr for Dataset {
    type Err = LossError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "han24" => Ok(Dataset::Han24),
            "miccai9" => Ok(Dataset::Miccai9),
            _ => Err(LossError::UnknownDataset(s.to_string())),
        }
    }
}

const HAN24_ALPHA: [f64; 25] = [
    0.5, 1.0, 1.0, 1.0, 4.0, 4.0, 4.0, 4.0, 4.0, 1.0, 1.0, 4.0, 1.0, 1.0, 3.0, 3.0, 1.0, 1.0, 1.0,
    1.0, 1.0, 1.0, 3.0, 1.0, 1.0,
];

const MICCAI9_ALPHA: [f64; 10] = [0.5, 1.0, 4.0, 1.0, 4.0, 4.0, 1.0, 1.0, 3.0, 3.0];

const HAN24_CLASSES: [&str; 25] = [
    "background",
    "brain stem",
    "eye left",
    "eye right",
    "lens left",
    "lens right",
    "optic nerve left",
    "optic nerve right",
    "optic chiasma",
    "temporal lobes left",
    "temporal lobes right",
    "pituitary",
    "parotid gland left",
    "parotid gland right",
    "inner ear left",
    "inner ear right",
    "middle ear left",
    "middle ear right",
    "tongue",
    "temporomandibular joint left",
    "temporomandibular joint right",
    "spinal cord",
    "mandible left",
    "mandible right",
    // 25 weights are published for 24 names; the last slot is left generic
    "class 24",
];

const MICCAI9_CLASSES: [&str; 10] = [
    "background",
    "brain stem",
    "optic chiasma",
    "mandible",
    "optic nerve left",
    "optic nerve right",
    "parotid gland left",
    "parotid gland right",
    "submandibular left",
    "submandibular right",
];

pub fn default_alpha(dataset: Dataset) -> Vec<f64> {
    match dataset {
        Dataset::Han24 => HAN24_ALPHA.to_vec(),
        Dataset::Miccai9 => MICCAI9_ALPHA.to_vec(),
    }
}

/// Class names in weight order; index 0 is background.
pub fn class_names(dataset: Dataset) -> &'static [&'static str] {
    match dataset {
        Dataset::Han24 => &HAN24_CLASSES,
        Dataset::Miccai9 => &MICCAI9_CLASSES,
    }
}

fn check(pred: &ArrayView5<f64>, target: &ArrayView5<f64>, cfg: &LossConfig) -> Result<()> {
    if pred.shape() != target.shape() {
        return Err(LossError::ShapeMismatch {
            pred: pred.shape().to_vec(),
            target: target.shape().to_vec(),
        });
    }
    let c = pred.len_of(Axis(1));
    if cfg.alpha.len() != c {
        return Err(LossError::AlphaLength {
            expected: c,
            found: cfg.alpha.len(),
        });
    }
    Ok(())
}

/// Voxel count `N` across the whole batch.
fn voxel_count(pred: &ArrayView5<f64>) -> f64 {
    let (n, _, z, y, x) = pred.dim();
    (n * z * y * x) as f64
}

/// `-(1/N) sum_n sum_c alpha_c (1 - p)^gamma y log p`, averaged over every
/// voxel of the batch.
pub fn focal_loss(pred: ArrayView5<f64>, target: ArrayView5<f64>, cfg: &LossConfig) -> Result<f64> {
    check(&pred, &target, cfg)?;
    let mut sum = 0.0;
    for (c, (pc, yc)) in pred.axis_iter(Axis(1)).zip(target.axis_iter(Axis(1))).enumerate() {
        let a = cfg.alpha[c];
        Zip::from(&pc).and(&yc).for_each(|&p, &y| {
            if y != 0.0 {
                sum += a * (1.0 - p).powf(cfg.gamma) * y * p.max(LOG_CLAMP).ln();
            }
        });
    }
    Ok(-sum / voxel_count(&pred))
}

/// `d focal / d pred`.
pub fn focal_grad(pred: ArrayView5<f64>, target: ArrayView5<f64>, cfg: &LossConfig) -> Result<Array5<f64>> {
    check(&pred, &target, cfg)?;
    let inv_n = 1.0 / voxel_count(&pred);
    let g = cfg.gamma;
    let mut grad = Array5::<f64>::zeros(pred.raw_dim());
    for (c, ((pc, yc), mut gc)) in pred
        .axis_iter(Axis(1))
        .zip(target.axis_iter(Axis(1)))
        .zip(grad.axis_iter_mut(Axis(1)))
        .enumerate()
    {
        let a = cfg.alpha[c];
        Zip::from(&mut gc).and(&pc).and(&yc).for_each(|d, &p, &y| {
            if y == 0.0 {
                return;
            }
            let logp = p.max(LOG_CLAMP).ln();
            let q = 1.0 - p;
            let weight_term = if g == 0.0 || logp == 0.0 {
                0.0
            } else {
                -g * q.powf(g - 1.0) * logp
            };
            let log_term = if p >= LOG_CLAMP { q.powf(g) / p } else { 0.0 };
            *d = -a * y * inv_n * (weight_term + log_term);
        });
    }
    Ok(grad)
}

/// Per-class `(2 sum p y + eps) / (sum p + sum y + eps)` over the batch.
fn dice_terms(pred: &ArrayView5<f64>, target: &ArrayView5<f64>, eps: f64) -> Vec<(f64, f64)> {
    pred.axis_iter(Axis(1))
        .zip(target.axis_iter(Axis(1)))
        .map(|(pc, yc)| {
            let (mut inter, mut denom) = (0.0, 0.0);
            Zip::from(&pc).and(&yc).for_each(|&p, &y| {
                inter += p * y;
                denom += p + y;
            });
            (2.0 * inter + eps, denom + eps)
        })
        .collect()
}

/// `1 - (1/C) sum_c (2 sum_n p y + eps) / (sum_n p + sum_n y + eps)`.
pub fn avg_dice_loss(pred: ArrayView5<f64>, target: ArrayView5<f64>, cfg: &LossConfig) -> Result<f64> {
    check(&pred, &target, cfg)?;
    let terms = dice_terms(&pred, &target, cfg.epsilon);
    let c = terms.len() as f64;
    Ok(1.0 - terms.iter().map(|(num, den)| num / den).sum::<f64>() / c)
}

/// `d avg_dice / d pred`.
pub fn avg_dice_grad(pred: ArrayView5<f64>, target: ArrayView5<f64>, cfg: &LossConfig) -> Result<Array5<f64>> {
    check(&pred, &target, cfg)?;
    let terms = dice_terms(&pred, &target, cfg.epsilon);
    let c = terms.len() as f64;
    let mut grad = Array5::<f64>::zeros(pred.raw_dim());
    for ((yc, mut gc), (num, den)) in target
        .axis_iter(Axis(1))
        .zip(grad.axis_iter_mut(Axis(1)))
        .zip(terms)
    {
        let k = num / (den * den);
        Zip::from(&mut gc).and(&yc).for_each(|d, &y| {
            *d = -(2.0 * y / den - k) / c;
        });
    }
    Ok(grad)
}

pub fn combined_loss(pred: ArrayView5<f64>, target: ArrayView5<f64>, cfg: &LossConfig) -> Result<LossValue> {
    let focal = focal_loss(pred.view(), target.view(), cfg)?;
    let dice = avg_dice_loss(pred, target, cfg)?;
    Ok(LossValue {
        total: focal + cfg.lambda_ * dice,
        focal,
        dice,
    })
}

pub fn combined_grad(pred: ArrayView5<f64>, target: ArrayView5<f64>, cfg: &LossConfig) -> Result<Array5<f64>> {
    let mut g = focal_grad(pred.view(), target.view(), cfg)?;
    if cfg.lambda_ != 0.0 {
        g.scaled_add(cfg.lambda_, &avg_dice_grad(pred, target, cfg)?);
    }
    Ok(g)
}

/// Channel softmax of `(n, c, z, y, x)` scores.
pub fn softmax(logits: ArrayView5<f64>) -> Array5<f64> {
    let mut p = logits.to_owned();
    let (n, c, z, y, x) = p.dim();
    for b in 0..n {
        for k in 0..z {
            for j in 0..y {
                for i in 0..x {
                    let m = (0..c).map(|ch| p[[b, ch, k, j, i]]).fold(f64::NEG_INFINITY, f64::max);
                    let mut s = 0.0;
                    for ch in 0..c {
                        let e = (p[[b, ch, k, j, i]] - m).exp();
                        p[[b, ch, k, j, i]] = e;
                        s += e;
                    }
                    for ch in 0..c {
                        p[[b, ch, k, j, i]] /= s;
                    }
                }
            }
        }
    }
    p
}

/// Pull a probability-space gradient back through the channel softmax:
/// `dz_c = p_c (g_c - sum_k g_k p_k)`.
pub fn softmax_backward(probs: ArrayView5<f64>, grad: ArrayView5<f64>) -> Array5<f64> {
    let dot = (&probs * &grad).sum_axis(Axis(1)).insert_axis(Axis(1));
    &probs * &(&grad - &dot)
}

/// Loss value and `d loss / d logits` in one pass, as used by training.
pub fn combined_loss_from_logits(
    logits: ArrayView5<f64>,
    target: ArrayView5<f64>,
    cfg: &LossConfig,
) -> Result<(LossValue, Array5<f64>)> {
    let probs = softmax(logits);
    let value = combined_loss(probs.view(), target.view(), cfg)?;
    let g = combined_grad(probs.view(), target, cfg)?;
    Ok((value, softmax_backward(probs.view(), g.view())))
}

/// Stack same-shaped maps into an `(n, c, z, y, x)` array.
pub fn stack_maps(maps: &[ProbabilityMap]) -> Result<Array5<f64>> {
    let first = maps.first().ok_or(LossError::EmptyBatch)?.data().dim();
    let mut out = Array5::<f64>::zeros((maps.len(), first.0, first.1, first.2, first.3));
    for (b, m) in maps.iter().enumerate() {
        if m.data().dim() != first {
            return Err(LossError::ShapeMismatch {
                pred: vec![first.0, first.1, first.2, first.3],
                target: m.data().shape().to_vec(),
            });
        }
        out.index_axis_mut(Axis(0), b).assign(&m.data().mapv(f64::from));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array5;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_instance(seed: u64, shape: (usize, usize, usize, usize, usize)) -> (Array5<f64>, Array5<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = Array5::from_shape_fn(shape, |_| rng.random_range(-2.0..2.0));
        let mut target = Array5::zeros(shape);
        let (n, c, z, y, x) = shape;
        for b in 0..n {
            for k in 0..z {
                for j in 0..y {
                    for i in 0..x {
                        target[[b, rng.random_range(0..c), k, j, i]] = 1.0;
                    }
                }
            }
        }
        (softmax(logits.view()), target)
    }

    fn one_voxel(p: &[f64], y: &[f64]) -> (Array5<f64>, Array5<f64>) {
        let c = p.len();
        (
            Array5::from_shape_vec((1, c, 1, 1, 1), p.to_vec()).unwrap(),
            Array5::from_shape_vec((1, c, 1, 1, 1), y.to_vec()).unwrap(),
        )
    }

    #[test]
    fn focal_single_voxel() {
        let (p, y) = one_voxel(&[0.5, 0.5], &[1.0, 0.0]);
        let cfg = LossConfig::with_alpha(vec![1.0, 1.0]);
        let v = focal_loss(p.view(), y.view(), &cfg).unwrap();
        assert!((v - 0.25 * std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction_is_zero() {
        let (_, y) = random_instance(1, (2, 3, 2, 3, 3));
        let cfg = LossConfig::with_alpha(vec![0.5, 1.0, 4.0]);
        let v = combined_loss(y.view(), y.view(), &cfg).unwrap();
        assert_eq!(v.focal, 0.0);
        assert!(v.dice.abs() < 1e-9);
    }

    #[test]
    fn total_disagreement_dice_is_one() {
        let shape = (1, 2, 2, 2, 2);
        let mut p = Array5::zeros(shape);
        p.index_axis_mut(Axis(1), 1).fill(1.0);
        let mut y = Array5::zeros(shape);
        y.index_axis_mut(Axis(1), 0).fill(1.0);
        let cfg = LossConfig::with_alpha(vec![1.0, 1.0]);
        let d = avg_dice_loss(p.view(), y.view(), &cfg).unwrap();
        assert!((d - 1.0).abs() < 1e-5);
    }

    #[test]
    fn lambda_zero_gives_focal() {
        let (p, y) = random_instance(2, (1, 3, 2, 2, 2));
        let cfg = LossConfig {
            lambda_: 0.0,
            ..LossConfig::with_alpha(vec![1.0, 2.0, 3.0])
        };
        let v = combined_loss(p.view(), y.view(), &cfg).unwrap();
        assert_eq!(v.total, v.focal);
    }

    #[test]
    fn shape_and_alpha_errors() {
        let (p, y) = random_instance(3, (1, 3, 2, 2, 2));
        let cfg = LossConfig::with_alpha(vec![1.0, 1.0]);
        assert!(matches!(focal_loss(p.view(), y.view(), &cfg), Err(LossError::AlphaLength { expected: 3, found: 2 })));
        let (q, _) = random_instance(3, (1, 3, 2, 2, 3));
        let cfg = LossConfig::with_alpha(vec![1.0; 3]);
        assert!(matches!(avg_dice_loss(q.view(), y.view(), &cfg), Err(LossError::ShapeMismatch { .. })));
    }

    #[test]
    fn dataset_weights() {
        let m = default_alpha(Dataset::Miccai9);
        assert_eq!(m.len(), 10);
        assert_eq!(m[0], 0.5);
        let chiasma = class_names(Dataset::Miccai9).iter().position(|n| *n == "optic chiasma").unwrap();
        assert_eq!(m[chiasma], 4.0);
        let h = default_alpha(Dataset::Han24);
        assert_eq!(h.len(), 25);
        assert_eq!(h.iter().sum::<f64>(), 48.5);
        assert_eq!(class_names(Dataset::Han24).len(), 25);
        assert!(h.iter().chain(&m).all(|a| *a > 0.0));
        assert_eq!("MICCAI9".parse::<Dataset>().unwrap(), Dataset::Miccai9);
        assert!("brats".parse::<Dataset>().is_err());
    }

    #[test]
    fn config_json_uses_lambda_key() {
        let cfg = LossConfig::for_dataset(Dataset::Miccai9);
        let json = serde_json::to_value(&cfg).unwrap();
        assert_eq!(json["lambda"], 1.0);
        let back: LossConfig = serde_json::from_value(json).unwrap();
        assert_eq!(back, cfg);
        assert!(serde_json::from_str::<LossConfig>(r#"{"alpha":[1,1],"lambda_":1}"#).is_err());
    }

    #[test]
    fn logit_gradient_matches_finite_difference() {
        let (_, y) = random_instance(4, (1, 3, 2, 2, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let z = Array5::from_shape_fn(y.raw_dim(), |_| rng.random_range(-2.0..2.0));
        let cfg = LossConfig::with_alpha(vec![0.5, 1.0, 4.0]);
        let (_, g) = combined_loss_from_logits(z.view(), y.view(), &cfg).unwrap();
        let h = 1e-6;
        for idx in [[0, 0, 0, 0, 0], [0, 1, 1, 0, 1], [0, 2, 1, 1, 1]] {
            let mut zp = z.clone();
            zp[idx] += h;
            let mut zm = z.clone();
            zm[idx] -= h;
            let f = |z: &Array5<f64>| combined_loss(softmax(z.view()).view(), y.view(), &cfg).unwrap().total;
            let fd = (f(&zp) - f(&zm)) / (2.0 * h);
            assert!((fd - g[idx]).abs() < 1e-7, "{idx:?}: {fd} vs {}", g[idx]);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn focal_non_negative_and_linear_in_alpha(seed in any::<u64>(), k in 0.1f64..10.0) {
            let (p, y) = random_instance(seed, (1, 3, 2, 2, 2));
            let cfg = LossConfig::with_alpha(vec![0.5, 1.0, 4.0]);
            let scaled = LossConfig::with_alpha(cfg.alpha.iter().map(|a| a * k).collect());
            let f = focal_loss(p.view(), y.view(), &cfg).unwrap();
            let fk = focal_loss(p.view(), y.view(), &scaled).unwrap();
            prop_assert!(f >= 0.0);
            prop_assert!((fk - k * f).abs() <= 1e-12 * fk.abs().max(1.0));
        }

        #[test]
        fn dice_permutation_equivariant(seed in any::<u64>()) {
            let (p, y) = random_instance(seed, (1, 3, 2, 2, 2));
            let cfg = LossConfig::with_alpha(vec![1.0; 3]);
            let perm = [2usize, 0, 1];
            let pp = ndarray::stack(Axis(1), &perm.map(|c| p.index_axis(Axis(1), c))).unwrap();
            let yp = ndarray::stack(Axis(1), &perm.map(|c| y.index_axis(Axis(1), c))).unwrap();
            let a = avg_dice_loss(p.view(), y.view(), &cfg).unwrap();
            let b = avg_dice_loss(pp.view(), yp.view(), &cfg).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn total_is_focal_plus_lambda_dice(seed in any::<u64>(), lambda in 0.0f64..3.0) {
            let (p, y) = random_instance(seed, (2, 3, 2, 2, 2));
            let cfg = LossConfig { lambda_: lambda, ..LossConfig::with_alpha(vec![0.5, 1.0, 4.0]) };
            let v = combined_loss(p.view(), y.view(), &cfg).unwrap();
            prop_assert!((v.total - (v.focal + lambda * v.dice)).abs() < 1e-7);
        }
    }
}

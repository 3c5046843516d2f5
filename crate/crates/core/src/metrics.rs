//! Overlap and boundary-distance metrics for label maps.

use std::fmt;

use ndarray::{Array3, ArrayView3, Axis, Zip};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{LabelMap, Spacing};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("prediction shape {pred:?} differs from ground-truth shape {gt:?}")]
    ShapeMismatch { pred: [usize; 3], gt: [usize; 3] },
    #[error("prediction has {pred} classes, ground truth {gt}")]
    ClassCountMismatch { pred: usize, gt: usize },
}

pub type Result<T, E = MetricError> = std::result::Result<T, E>;

/// 95th-percentile Hausdorff distance in millimetres, or `Undefined` when
/// either mask is empty. Serialises as a number or `null`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Hd95 {
    Mm(f64),
    Undefined,
}

impl Hd95 {
    pub fn value(self) -> Option<f64> {
        match self {
            Hd95::Mm(v) => Some(v),
            Hd95::Undefined => None,
        }
    }

    pub fn is_defined(self) -> bool {
        matches!(self, Hd95::Mm(_))
    }
}

impl fmt::Display for Hd95 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Hd95::Mm(v) => write!(f, "{v:.2}"),
            Hd95::Undefined => f.write_str("undefined"),
        }
    }
}

fn check_shapes(pred: &LabelMap, gt: &LabelMap) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(MetricError::ShapeMismatch {
            pred: pred.shape(),
            gt: gt.shape(),
        });
    }
    Ok(())
}

fn mask(labels: &LabelMap, class_id: usize) -> Array3<bool> {
    labels.data().mapv(|v| v as usize == class_id)
}

/// Dice score coefficient `2|A n B| / (|A| + |B|)`; 1 when both are empty.
pub fn dsc(pred: &LabelMap, gt: &LabelMap, class_id: usize) -> Result<f64> {
    check_shapes(pred, gt)?;
    Ok(dsc_masks(mask(pred, class_id).view(), mask(gt, class_id).view()))
}

pub fn dsc_masks(a: ArrayView3<bool>, b: ArrayView3<bool>) -> f64 {
    let (mut inter, mut sa, mut sb) = (0usize, 0usize, 0usize);
    Zip::from(&a).and(&b).for_each(|&x, &y| {
        inter += (x && y) as usize;
        sa += x as usize;
        sb += y as usize;
    });
    if sa + sb == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (sa + sb) as f64
    }
}

/// Mask voxels with at least one 6-neighbour outside the mask; voxels on the
/// grid border count as boundary.
pub fn surface(m: ArrayView3<bool>) -> Vec<[usize; 3]> {
    let (nz, ny, nx) = m.dim();
    let mut out = Vec::new();
    for ((z, y, x), &inside) in m.indexed_iter() {
        if !inside {
            continue;
        }
        let border = z == 0 || y == 0 || x == 0 || z + 1 == nz || y + 1 == ny || x + 1 == nx;
        if border
            || !m[[z - 1, y, x]]
            || !m[[z + 1, y, x]]
            || !m[[z, y - 1, x]]
            || !m[[z, y + 1, x]]
            || !m[[z, y, x - 1]]
            || !m[[z, y, x + 1]]
        {
            out.push([z, y, x]);
        }
    }
    out
}

/// Exact 1D squared distance transform (lower envelope of parabolas) with
/// sample spacing `step`, in place.
fn edt_1d(f: &mut [f64], step: f64, v: &mut Vec<usize>, z: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = f.len();
    let s2 = step * step;
    v.clear();
    z.clear();
    let intersect = |q: usize, p: usize, f: &[f64]| -> f64 {
        let (q, p) = (q as f64, p as f64);
        ((f[q as usize] + s2 * q * q) - (f[p as usize] + s2 * p * p)) / (2.0 * s2 * (q - p))
    };
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            match v.last() {
                Some(&p) => {
                    let s = intersect(q, p, f);
                    if s <= *z.last().expect("boundary per vertex") {
                        v.pop();
                        z.pop();
                    } else {
                        v.push(q);
                        z.push(s);
                        break;
                    }
                }
                None => {
                    v.push(q);
                    z.push(f64::NEG_INFINITY);
                    break;
                }
            }
        }
    }
    out.clear();
    if v.is_empty() {
        out.resize(n, f64::INFINITY);
    } else {
        let mut k = 0;
        for q in 0..n {
            while k + 1 < v.len() && z[k + 1] < q as f64 {
                k += 1;
            }
            let d = q as f64 - v[k] as f64;
            out.push(s2 * d * d + f[v[k]]);
        }
    }
    f.copy_from_slice(out);
}

/// Squared Euclidean distance (mm^2) from every voxel to the nearest point of
/// `points`, under anisotropic `spacing`.
pub fn squared_distance_map(shape: [usize; 3], points: &[[usize; 3]], spacing: Spacing) -> Array3<f64> {
    let mut d = Array3::from_elem(shape, f64::INFINITY);
    for p in points {
        d[*p] = 0.0;
    }
    let steps = spacing.zyx();
    let (mut v, mut z, mut out) = (Vec::new(), Vec::new(), Vec::new());
    let mut line = Vec::new();
    for axis in [2usize, 1, 0] {
        for mut lane in d.lanes_mut(Axis(axis)) {
            line.clear();
            line.extend(lane.iter().copied());
            edt_1d(&mut line, steps[axis], &mut v, &mut z, &mut out);
            lane.iter_mut().zip(&line).for_each(|(a, b)| *a = *b);
        }
    }
    d
}

/// Rank `ceil(0.95 m)` (1-based) of `m` pooled distances.
pub fn percentile_rank(m: usize) -> usize {
    (95 * m).div_ceil(100)
}

/// Pooled symmetric surface-distance 95th percentile between two masks.
pub fn hd95_masks(a: ArrayView3<bool>, b: ArrayView3<bool>, spacing: Spacing) -> Hd95 {
    let sa = surface(a);
    let sb = surface(b);
    if sa.is_empty() || sb.is_empty() {
        return Hd95::Undefined;
    }
    let (nz, ny, nx) = a.dim();
    let shape = [nz, ny, nx];
    let to_b = squared_distance_map(shape, &sb, spacing);
    let to_a = squared_distance_map(shape, &sa, spacing);
    let mut dist: Vec<f64> = sa
        .iter()
        .map(|p| to_b[*p])
        .chain(sb.iter().map(|p| to_a[*p]))
        .map(f64::sqrt)
        .collect();
    dist.sort_by(f64::total_cmp);
    Hd95::Mm(dist[percentile_rank(dist.len()) - 1])
}

pub fn hd95(pred: &LabelMap, gt: &LabelMap, class_id: usize, spacing: Spacing) -> Result<Hd95> {
    check_shapes(pred, gt)?;
    Ok(hd95_masks(mask(pred, class_id).view(), mask(gt, class_id).view(), spacing))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub dsc: f64,
    pub hd95: Hd95,
}

/// Per-class metrics for the foreground classes of one case.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_class: Vec<ClassMetrics>,
    /// Mean DSC over the reported classes.
    pub mean_dsc: f64,
    /// Mean over reported classes with a defined HD95.
    pub mean_hd95: Hd95,
    /// Classes absent from both prediction and ground truth.
    pub absent: Vec<usize>,
}

impl MetricReport {
    pub fn class(&self, class_id: usize) -> Option<&ClassMetrics> {
        self.per_class.iter().find(|m| m.class_id == class_id)
    }
}

/// Evaluate classes `1..C`. Classes missing from both maps are listed in
/// `absent` and left out of the means.
pub fn evaluate_case(pred: &LabelMap, gt: &LabelMap, spacing: Spacing) -> Result<MetricReport> {
    check_shapes(pred, gt)?;
    if pred.num_classes() != gt.num_classes() {
        return Err(MetricError::ClassCountMismatch {
            pred: pred.num_classes(),
            gt: gt.num_classes(),
        });
    }
    let ph = pred.histogram();
    let gh = gt.histogram();
    let mut per_class = Vec::new();
    let mut absent = Vec::new();
    for c in 1..gt.num_classes() {
        if ph[c] == 0 && gh[c] == 0 {
            absent.push(c);
            continue;
        }
        let (a, b) = (mask(pred, c), mask(gt, c));
        per_class.push(ClassMetrics {
            class_id: c,
            dsc: dsc_masks(a.view(), b.view()),
            hd95: hd95_masks(a.view(), b.view(), spacing),
        });
    }
    Ok(summarise(per_class, absent))
}

fn summarise(per_class: Vec<ClassMetrics>, absent: Vec<usize>) -> MetricReport {
    let mean_dsc = if per_class.is_empty() {
        1.0
    } else {
        per_class.iter().map(|m| m.dsc).sum::<f64>() / per_class.len() as f64
    };
    let defined: Vec<f64> = per_class.iter().filter_map(|m| m.hd95.value()).collect();
    let mean_hd95 = if defined.is_empty() {
        Hd95::Undefined
    } else {
        Hd95::Mm(defined.iter().sum::<f64>() / defined.len() as f64)
    };
    MetricReport {
        per_class,
        mean_dsc,
        mean_hd95,
        absent,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn labels(data: Array3<u8>, c: usize) -> LabelMap {
        LabelMap::new(data, c, Spacing::default()).unwrap()
    }

    fn brute_hd95(a: &Array3<bool>, b: &Array3<bool>, s: [f64; 3]) -> Option<f64> {
        let (sa, sb) = (surface(a.view()), surface(b.view()));
        if sa.is_empty() || sb.is_empty() {
            return None;
        }
        let d = |p: &[usize; 3], q: &[usize; 3]| {
            (0..3)
                .map(|i| ((p[i] as f64 - q[i] as f64) * s[i]).powi(2))
                .sum::<f64>()
                .sqrt()
        };
        let mut all: Vec<f64> = sa
            .iter()
            .map(|p| sb.iter().map(|q| d(p, q)).fold(f64::INFINITY, f64::min))
            .chain(sb.iter().map(|q| sa.iter().map(|p| d(p, q)).fold(f64::INFINITY, f64::min)))
            .collect();
        all.sort_by(f64::total_cmp);
        let k = ((0.95 * all.len() as f64).ceil() as usize).max(1);
        Some(all[k - 1])
    }

    #[test]
    fn dsc_examples() {
        let mut a = Array3::<u8>::zeros((1, 2, 4));
        let mut b = Array3::<u8>::zeros((1, 2, 4));
        a.slice_mut(ndarray::s![0, 0, ..]).fill(1);
        b.slice_mut(ndarray::s![0, .., 0..2]).fill(1);
        assert_eq!(dsc(&labels(a.clone(), 2), &labels(b, 2), 1).unwrap(), 0.5);
        assert_eq!(dsc(&labels(a.clone(), 2), &labels(a.clone(), 2), 1).unwrap(), 1.0);
        let mut c = Array3::<u8>::zeros((1, 2, 4));
        c.slice_mut(ndarray::s![0, 1, ..]).fill(1);
        assert_eq!(dsc(&labels(a, 2), &labels(c, 2), 1).unwrap(), 0.0);
        let z = labels(Array3::zeros((2, 2, 2)), 3);
        assert_eq!(dsc(&z, &z, 2).unwrap(), 1.0);
    }

    #[test]
    fn single_voxel_distances() {
        let mut a = Array3::from_elem((5, 5, 7), false);
        let mut b = a.clone();
        a[[2, 2, 1]] = true;
        b[[2, 2, 4]] = true;
        assert_eq!(hd95_masks(a.view(), b.view(), Spacing::default()), Hd95::Mm(3.0));
        let mut c = Array3::from_elem((5, 5, 7), false);
        c[[3, 2, 1]] = true;
        let s = Spacing::new(1.0, 1.0, 3.0).unwrap();
        assert_eq!(hd95_masks(a.view(), c.view(), s), Hd95::Mm(3.0));
        assert_eq!(hd95_masks(a.view(), a.view(), s), Hd95::Mm(0.0));
        let empty = Array3::from_elem((5, 5, 7), false);
        assert_eq!(hd95_masks(a.view(), empty.view(), s), Hd95::Undefined);
    }

    #[test]
    fn percentile_rank_is_ceiling() {
        assert_eq!(percentile_rank(1), 1);
        assert_eq!(percentile_rank(20), 19);
        assert_eq!(percentile_rank(21), 20);
        assert_eq!(percentile_rank(100), 95);
        assert_eq!(percentile_rank(101), 96);
    }

    #[test]
    fn report_means_and_absent_classes() {
        let mut gt = Array3::<u8>::zeros((2, 4, 4));
        gt[[0, 0, 0]] = 1;
        gt[[1, 3, 3]] = 2;
        let mut pred = gt.clone();
        pred[[1, 3, 3]] = 0;
        pred[[0, 3, 0]] = 2;
        let r = evaluate_case(&labels(pred, 4), &labels(gt.clone(), 4), Spacing::default()).unwrap();
        assert_eq!(r.per_class.len(), 2);
        assert_eq!(r.absent, vec![3]);
        assert_eq!(r.mean_dsc, 0.5);
        let r = evaluate_case(&labels(gt.clone(), 4), &labels(gt, 4), Spacing::default()).unwrap();
        assert_eq!((r.mean_dsc, r.mean_hd95), (1.0, Hd95::Mm(0.0)));
        assert_eq!(serde_json::to_value(Hd95::Undefined).unwrap(), serde_json::Value::Null);
    }

    fn mask_strategy() -> impl Strategy<Value = (Array3<bool>, Array3<bool>)> {
        (1usize..=5, 1usize..=5, 1usize..=5).prop_flat_map(|(z, y, x)| {
            let n = z * y * x;
            (
                proptest::collection::vec(any::<bool>(), n),
                proptest::collection::vec(any::<bool>(), n),
            )
                .prop_map(move |(a, b)| {
                    (
                        Array3::from_shape_vec((z, y, x), a).unwrap(),
                        Array3::from_shape_vec((z, y, x), b).unwrap(),
                    )
                })
        })
    }

    proptest! {
        #[test]
        fn hd95_matches_brute_force((a, b) in mask_strategy(), dz in 1.0f64..4.0) {
            let s = Spacing::new(0.8, 1.1, dz).unwrap();
            let fast = hd95_masks(a.view(), b.view(), s).value();
            let slow = brute_hd95(&a, &b, s.zyx());
            match (fast, slow) {
                (Some(f), Some(g)) => prop_assert!((f - g).abs() <= 1e-9, "{f} vs {g}"),
                (f, g) => prop_assert_eq!(f, g),
            }
            prop_assert_eq!(hd95_masks(b.view(), a.view(), s), hd95_masks(a.view(), b.view(), s));
            prop_assert_eq!(dsc_masks(a.view(), b.view()), dsc_masks(b.view(), a.view()));
        }
    }
}

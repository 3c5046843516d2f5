//! Core value types shared by every stage of the pipeline.
//!
//! All grids are indexed `(z, y, x)`, with `z` the (usually coarser) depth
//! axis; probability maps add a leading class axis `(class, z, y, x)`.
//! Class 0 is background.

mod nifti;
mod raw;

pub use nifti::save_case_nifti;
pub use raw::{load_case, load_labels, save_case, save_labels, CaseFiles, RawHeader};

use ndarray::{Array3, Array4, Axis};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest class count representable in the `uint8` label encoding.
pub const MAX_CLASSES: usize = 256;

#[derive(Debug, Error)]
pub enum DataModelError {
    #[error("spacing must be finite and strictly positive, got (dx={dx}, dy={dy}, dz={dz})")]
    InvalidSpacing { dx: f64, dy: f64, dz: f64 },
    #[error("grid dimensions must all be at least 1, got {0:?}")]
    EmptyGrid([usize; 3]),
    #[error("non-finite intensity at voxel {index:?}")]
    NonFinite { index: [usize; 3] },
    #[error("num_classes must be in 1..={MAX_CLASSES}, got {0}")]
    InvalidClassCount(usize),
    #[error("label value {value} at voxel {index:?} is out of range for {num_classes} classes")]
    LabelOutOfRange {
        value: u8,
        index: [usize; 3],
        num_classes: usize,
    },
    #[error("probability {value} at {index:?} lies outside [0, 1]")]
    ProbabilityOutOfRange { value: f32, index: [usize; 4] },
    #[error("class probabilities at voxel {index:?} sum to {sum}, expected 1")]
    NotNormalized { sum: f64, index: [usize; 3] },
    #[error("label grid {labels:?} does not match volume grid {volume:?}")]
    ShapeMismatch { volume: [usize; 3], labels: [usize; 3] },
    #[error("header field `{field}`: {message}")]
    Header { field: &'static str, message: String },
    #[error("unsupported dtype `{0}`")]
    UnknownDtype(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: invalid JSON header: {source}")]
    Json {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
}

pub type Result<T, E = DataModelError> = std::result::Result<T, E>;

/// Physical voxel size in millimetres.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Spacing {
    pub dx: f64,
    pub dy: f64,
    pub dz: f64,
}

impl Spacing {
    pub fn new(dx: f64, dy: f64, dz: f64) -> Result<Self> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !(ok(dx) && ok(dy) && ok(dz)) {
            return Err(DataModelError::InvalidSpacing { dx, dy, dz });
        }
        if dz < dx || dz < dy {
            log::warn!("depth spacing {dz} mm is finer than in-plane spacing ({dx}, {dy}) mm");
        }
        Ok(Spacing { dx, dy, dz })
    }

    /// From `[dz, dy, dx]`, the on-disk order.
    pub fn from_zyx(zyx: [f64; 3]) -> Result<Self> {
        Spacing::new(zyx[2], zyx[1], zyx[0])
    }

    pub fn isotropic(mm: f64) -> Self {
        Spacing { dx: mm, dy: mm, dz: mm }
    }

    pub fn zyx(&self) -> [f64; 3] {
        [self.dz, self.dy, self.dx]
    }
}

impl Default for Spacing {
    fn default() -> Self {
        Spacing::isotropic(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum IntensityUnit {
    #[default]
    Hu,
    Normalized,
}

fn dims3<T>(a: &Array3<T>) -> [usize; 3] {
    let (z, y, x) = a.dim();
    [z, y, x]
}

/// Scalar CT grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    data: Array3<f32>,
    spacing: Spacing,
    unit: IntensityUnit,
}

impl Volume {
    pub fn new(data: Array3<f32>, spacing: Spacing, unit: IntensityUnit) -> Result<Self> {
        let shape = dims3(&data);
        if shape.contains(&0) {
            return Err(DataModelError::EmptyGrid(shape));
        }
        if let Some(((z, y, x), _)) = data.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(DataModelError::NonFinite { index: [z, y, x] });
        }
        Ok(Volume { data, spacing, unit })
    }

    pub fn data(&self) -> &Array3<f32> {
        &self.data
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn unit(&self) -> IntensityUnit {
        self.unit
    }

    pub fn shape(&self) -> [usize; 3] {
        dims3(&self.data)
    }

    pub fn into_data(self) -> Array3<f32> {
        self.data
    }
}

/// Per-voxel class indices in `[0, num_classes)`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    data: Array3<u8>,
    num_classes: usize,
    spacing: Spacing,
}

impl LabelMap {
    pub fn new(data: Array3<u8>, num_classes: usize, spacing: Spacing) -> Result<Self> {
        if num_classes == 0 || num_classes > MAX_CLASSES {
            return Err(DataModelError::InvalidClassCount(num_classes));
        }
        let shape = dims3(&data);
        if shape.contains(&0) {
            return Err(DataModelError::EmptyGrid(shape));
        }
        if let Some(((z, y, x), &value)) = data.indexed_iter().find(|(_, &v)| v as usize >= num_classes) {
            return Err(DataModelError::LabelOutOfRange {
                value,
                index: [z, y, x],
                num_classes,
            });
        }
        Ok(LabelMap {
            data,
            num_classes,
            spacing,
        })
    }

    pub fn data(&self) -> &Array3<u8> {
        &self.data
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn shape(&self) -> [usize; 3] {
        dims3(&self.data)
    }

    /// Voxel count per class.
    pub fn histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &v in self.data.iter() {
            h[v as usize] += 1;
        }
        h
    }
}

/// Per-voxel class distribution, `(class, z, y, x)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMap {
    data: Array4<f32>,
    spacing: Spacing,
}

/// Tolerance on per-voxel probability sums.
pub const SUM_TOLERANCE: f64 = 1e-5;

impl ProbabilityMap {
    pub fn new(data: Array4<f32>, spacing: Spacing) -> Result<Self> {
        let (c, z, y, x) = data.dim();
        if c == 0 || c > MAX_CLASSES {
            return Err(DataModelError::InvalidClassCount(c));
        }
        if [z, y, x].contains(&0) {
            return Err(DataModelError::EmptyGrid([z, y, x]));
        }
        if let Some(((a, b, cc, d), &value)) = data
            .indexed_iter()
            .find(|(_, &v)| !(0.0..=1.0).contains(&v))
        {
            return Err(DataModelError::ProbabilityOutOfRange {
                value,
                index: [a, b, cc, d],
            });
        }
        let sums = data.map(|&v| v as f64).sum_axis(Axis(0));
        if let Some(((a, b, cc), &sum)) = sums
            .indexed_iter()
            .find(|(_, &s)| (s - 1.0).abs() > SUM_TOLERANCE)
        {
            return Err(DataModelError::NotNormalized { sum, index: [a, b, cc] });
        }
        Ok(ProbabilityMap { data, spacing })
    }

    /// Channel-wise softmax of raw scores `(class, z, y, x)`.
    pub fn from_logits(logits: ndarray::ArrayView4<f32>, spacing: Spacing) -> Self {
        let mut data = logits.to_owned();
        for mut lane in data.lanes_mut(Axis(0)) {
            let max = lane.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut sum = 0.0f64;
            let e: Vec<f64> = lane.iter().map(|&v| ((v - max) as f64).exp()).collect();
            e.iter().for_each(|v| sum += v);
            for (o, v) in lane.iter_mut().zip(e) {
                *o = (v / sum) as f32;
            }
        }
        ProbabilityMap { data, spacing }
    }

    pub fn data(&self) -> &Array4<f32> {
        &self.data
    }

    pub fn num_classes(&self) -> usize {
        self.data.len_of(Axis(0))
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn shape(&self) -> [usize; 3] {
        let (_, z, y, x) = self.data.dim();
        [z, y, x]
    }
}

/// A case: an image and, for training/evaluation data, its reference labels.
#[derive(Debug, Clone, PartialEq)]
pub struct CaseRecord {
    pub id: String,
    volume: Volume,
    labels: Option<LabelMap>,
}

impl CaseRecord {
    pub fn new(id: impl Into<String>, volume: Volume, labels: Option<LabelMap>) -> Result<Self> {
        if let Some(l) = &labels {
            if l.shape() != volume.shape() {
                return Err(DataModelError::ShapeMismatch {
                    volume: volume.shape(),
                    labels: l.shape(),
                });
            }
        }
        Ok(CaseRecord {
            id: id.into(),
            volume,
            labels,
        })
    }

    pub fn volume(&self) -> &Volume {
        &self.volume
    }

    pub fn labels(&self) -> Option<&LabelMap> {
        self.labels.as_ref()
    }
}

/// One-hot realisation of a label map.
pub fn one_hot_encode(labels: &LabelMap) -> ProbabilityMap {
    let [z, y, x] = labels.shape();
    let mut data = Array4::<f32>::zeros((labels.num_classes, z, y, x));
    for ((k, j, i), &c) in labels.data.indexed_iter() {
        data[[c as usize, k, j, i]] = 1.0;
    }
    ProbabilityMap {
        data,
        spacing: labels.spacing,
    }
}

/// Per-voxel most likely class; ties go to the smallest class index.
pub fn argmax_labels(probs: &ProbabilityMap) -> LabelMap {
    let [z, y, x] = probs.shape();
    let data = Array3::from_shape_fn((z, y, x), |(k, j, i)| {
        let mut best = 0usize;
        let mut best_p = f32::NEG_INFINITY;
        for c in 0..probs.num_classes() {
            let p = probs.data[[c, k, j, i]];
            if p > best_p {
                best_p = p;
                best = c;
            }
        }
        best as u8
    });
    LabelMap {
        data,
        num_classes: probs.num_classes(),
        spacing: probs.spacing,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array1};
    use proptest::prelude::*;

    fn label_map(data: Array3<u8>, c: usize) -> LabelMap {
        LabelMap::new(data, c, Spacing::default()).unwrap()
    }

    #[test]
    fn one_hot_small_map() {
        let l = label_map(array![[[0u8, 1], [2, 0]]], 3);
        let p = one_hot_encode(&l);
        let d = p.data();
        assert_eq!(d.index_axis(Axis(0), 0), array![[[1.0f32, 0.0], [0.0, 1.0]]]);
        assert_eq!(d.index_axis(Axis(0), 1), array![[[0.0f32, 1.0], [0.0, 0.0]]]);
        assert_eq!(d.index_axis(Axis(0), 2), array![[[0.0f32, 0.0], [1.0, 0.0]]]);
    }

    #[test]
    fn one_hot_background_only() {
        let l = label_map(Array3::zeros((2, 3, 4)), 2);
        let p = one_hot_encode(&l);
        assert!(p.data().index_axis(Axis(0), 0).iter().all(|&v| v == 1.0));
        assert!(p.data().index_axis(Axis(0), 1).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn label_out_of_range_reports_voxel() {
        let mut d = Array3::<u8>::zeros((2, 2, 2));
        d[[1, 0, 1]] = 3;
        match LabelMap::new(d, 3, Spacing::default()) {
            Err(DataModelError::LabelOutOfRange { value: 3, index, .. }) => assert_eq!(index, [1, 0, 1]),
            other => panic!("unexpected {other:?}"),
        }
    }

    fn single_voxel(p: &[f32]) -> ProbabilityMap {
        let data = Array1::from(p.to_vec()).into_shape_with_order((p.len(), 1, 1, 1)).unwrap();
        ProbabilityMap::new(data, Spacing::default()).unwrap()
    }

    #[test]
    fn argmax_unique_and_tie() {
        assert_eq!(argmax_labels(&single_voxel(&[0.1, 0.7, 0.2])).data()[[0, 0, 0]], 1);
        assert_eq!(argmax_labels(&single_voxel(&[0.5, 0.5])).data()[[0, 0, 0]], 0);
    }

    #[test]
    fn probability_validation() {
        let bad = Array4::from_elem((2, 1, 1, 1), 0.6f32);
        assert!(matches!(
            ProbabilityMap::new(bad, Spacing::default()),
            Err(DataModelError::NotNormalized { .. })
        ));
        let neg = Array1::from(vec![1.5f32, -0.5]).into_shape_with_order((2, 1, 1, 1)).unwrap();
        assert!(matches!(
            ProbabilityMap::new(neg, Spacing::default()),
            Err(DataModelError::ProbabilityOutOfRange { .. })
        ));
    }

    #[test]
    fn spacing_rejects_non_positive() {
        assert!(Spacing::new(1.0, 0.0, 2.0).is_err());
        assert!(Spacing::new(1.0, 1.0, f64::NAN).is_err());
        // finer depth than in-plane is allowed (only warned)
        assert!(Spacing::new(2.0, 2.0, 1.0).is_ok());
    }

    #[test]
    fn case_rejects_mismatched_labels() {
        let v = Volume::new(Array3::zeros((2, 2, 2)), Spacing::default(), IntensityUnit::Hu).unwrap();
        let l = label_map(Array3::zeros((2, 2, 3)), 2);
        assert!(matches!(
            CaseRecord::new("a", v, Some(l)),
            Err(DataModelError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let logits = Array4::from_shape_fn((5, 2, 3, 4), |(c, z, y, x)| (c * 7 + z * 3 + y + x) as f32 * 0.37 - 4.0);
        let p = ProbabilityMap::from_logits(logits.view(), Spacing::default());
        assert!(ProbabilityMap::new(p.data().clone(), Spacing::default()).is_ok());
    }

    /// Exhaustive per-voxel maximum scan.
    fn brute_argmax(p: &Array4<f32>) -> Array3<u8> {
        let (c, z, y, x) = p.dim();
        let mut out = Array3::zeros((z, y, x));
        for k in 0..z {
            for j in 0..y {
                for i in 0..x {
                    let mut m = p[[0, k, j, i]];
                    for cc in 1..c {
                        m = m.max(p[[cc, k, j, i]]);
                    }
                    out[[k, j, i]] = (0..c).find(|&cc| p[[cc, k, j, i]] == m).unwrap() as u8;
                }
            }
        }
        out
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn argmax_inverts_one_hot(c in 1usize..8, dims in (1usize..5, 1usize..5, 1usize..5), seed in any::<u64>()) {
            let mut s = seed;
            let data = Array3::from_shape_fn(dims, |_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 33) % c as u64) as u8
            });
            let l = label_map(data, c);
            let back = argmax_labels(&one_hot_encode(&l));
            prop_assert_eq!(&back, &l);
            let again = one_hot_encode(&back);
            prop_assert_eq!(again, one_hot_encode(&l));
        }

        #[test]
        fn argmax_matches_brute_force(
            (c, logits) in (2usize..6).prop_flat_map(|c| (Just(c), proptest::collection::vec(-3.0f32..3.0, c * 30)))
        ) {
            let logits = Array4::from_shape_vec((c, 3, 2, 5), logits).unwrap();
            let p = ProbabilityMap::from_logits(logits.view(), Spacing::default());
            let labels = argmax_labels(&p);
            prop_assert_eq!(labels.data(), &brute_argmax(p.data()));
        }
    }
}

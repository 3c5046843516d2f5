//! Resampling, intensity normalisation, synthetic phantoms and corpus splits.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::sync::Mutex;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datamodel::{
    self, CaseRecord, DataModelError, IntensityUnit, LabelMap, Spacing, Volume,
};
use crate::nn::{interp_axis, nearest_indices};

/// Lower and upper HU clip bounds.
pub const HU_WINDOW: (f32, f32) = (-1024.0, 1500.0);

#[derive(Debug, Error)]
pub enum DataError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("split ratios must be non-negative and sum to 1, got {0:?}")]
    BadRatios([f64; 3]),
    #[error("invalid phantom spec `{field}`: {message}")]
    InvalidPhantom { field: &'static str, message: String },
    #[error("grid {shape:?} is too small to place {organs} disjoint organs (failed on organ {failed})")]
    GridTooSmall {
        shape: [usize; 3],
        organs: usize,
        failed: usize,
    },
    #[error("target shape {0:?} has a zero dimension")]
    BadTarget([usize; 3]),
    #[error("duplicate case id `{0}`")]
    DuplicateId(String),
    #[error("split manifest lists `{0}`, which is not in the corpus")]
    MissingCase(String),
    #[error(transparent)]
    Model(#[from] DataModelError),
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

pub type Result<T, E = DataError> = std::result::Result<T, E>;

fn check_target(target: [usize; 3]) -> Result<()> {
    if target.contains(&0) {
        return Err(DataError::BadTarget(target));
    }
    Ok(())
}

fn rescale_spacing(spacing: Spacing, from: [usize; 3], to: [usize; 3]) -> Spacing {
    let [dz, dy, dx] = spacing.zyx();
    let f = |s: f64, a: usize| s * from[a] as f64 / to[a] as f64;
    Spacing {
        dx: f(dx, 2),
        dy: f(dy, 1),
        dz: f(dz, 0),
    }
}

/// Trilinear resample of intensities to `target` (z, y, x).
pub fn resize_volume(volume: &Volume, target: [usize; 3]) -> Result<Volume> {
    check_target(target)?;
    let mut data = volume.data().clone();
    for (axis, &n) in target.iter().enumerate() {
        data = interp_axis(&data, axis, n);
    }
    let spacing = rescale_spacing(volume.spacing(), volume.shape(), target);
    Ok(Volume::new(data, spacing, volume.unit())?)
}

/// Nearest-neighbour resample of labels to `target` (z, y, x).
pub fn resize_labels(labels: &LabelMap, target: [usize; 3]) -> Result<LabelMap> {
    check_target(target)?;
    let shape = labels.shape();
    let idx: Vec<Vec<usize>> = (0..3).map(|a| nearest_indices(shape[a], target[a])).collect();
    let src = labels.data();
    let data = Array3::from_shape_fn((target[0], target[1], target[2]), |(z, y, x)| {
        src[[idx[0][z], idx[1][y], idx[2][x]]]
    });
    let spacing = rescale_spacing(labels.spacing(), shape, target);
    Ok(LabelMap::new(data, labels.num_classes(), spacing)?)
}

pub fn resize_case(case: &CaseRecord, target: [usize; 3]) -> Result<CaseRecord> {
    let volume = resize_volume(case.volume(), target)?;
    let labels = case.labels().map(|l| resize_labels(l, target)).transpose()?;
    Ok(CaseRecord::new(case.id.clone(), volume, labels)?)
}

/// Clip HU to [`HU_WINDOW`] and scale to `[0, 1]`. Already-normalised input
/// is returned unchanged with a warning.
pub fn normalize_intensity(volume: &Volume) -> Volume {
    if volume.unit() == IntensityUnit::Normalized {
        log::warn!("volume is already normalised; leaving it unchanged");
        return volume.clone();
    }
    let (lo, hi) = HU_WINDOW;
    let data = volume.data().mapv(|v| (v.clamp(lo, hi) - lo) / (hi - lo));
    Volume::new(data, volume.spacing(), IntensityUnit::Normalized).expect("finite by construction")
}

pub fn normalize_case(case: &CaseRecord) -> CaseRecord {
    CaseRecord::new(case.id.clone(), normalize_intensity(case.volume()), case.labels().cloned())
        .expect("shapes unchanged")
}

fn default_size_ratio() -> f64 {
    100.0
}
fn default_spacing() -> Spacing {
    Spacing {
        dx: 1.0,
        dy: 1.0,
        dz: 2.5,
    }
}
fn default_noise_hu() -> f64 {
    20.0
}
fn default_smallest_voxels() -> f64 {
    20.0
}

/// Parameters of one synthetic case: `num_classes - 1` disjoint ellipsoidal
/// organs on a background, with volumes spread geometrically over
/// `size_ratio`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhantomSpec {
    pub seed: u64,
    /// `(z, y, x)`
    pub shape: [usize; 3],
    pub num_classes: usize,
    #[serde(default = "default_size_ratio")]
    pub size_ratio: f64,
    #[serde(default = "default_spacing")]
    pub spacing: Spacing,
    /// Standard deviation of the additive Gaussian noise.
    #[serde(default = "default_noise_hu")]
    pub noise_hu: f64,
    /// Target voxel count of the smallest organ (at most 30).
    #[serde(default = "default_smallest_voxels")]
    pub smallest_voxels: f64,
}

impl PhantomSpec {
    pub fn new(seed: u64, shape: [usize; 3], num_classes: usize) -> Self {
        PhantomSpec {
            seed,
            shape,
            num_classes,
            size_ratio: default_size_ratio(),
            spacing: default_spacing(),
            noise_hu: default_noise_hu(),
            smallest_voxels: default_smallest_voxels(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |field, message: String| Err(DataError::InvalidPhantom { field, message });
        if !(2..=datamodel::MAX_CLASSES).contains(&self.num_classes) {
            return bad("num_classes", format!("must be in 2..=256, got {}", self.num_classes));
        }
        if self.shape.contains(&0) {
            return bad("shape", format!("{:?} has a zero dimension", self.shape));
        }
        if !(self.size_ratio.is_finite() && self.size_ratio >= 1.0) {
            return bad("size_ratio", format!("must be >= 1, got {}", self.size_ratio));
        }
        if !(self.noise_hu.is_finite() && self.noise_hu >= 0.0) {
            return bad("noise_hu", format!("must be >= 0, got {}", self.noise_hu));
        }
        if !(self.smallest_voxels >= 1.0 && self.smallest_voxels <= 30.0) {
            return bad("smallest_voxels", format!("must be in [1, 30], got {}", self.smallest_voxels));
        }
        Ok(())
    }

    /// Target voxel count of organ `k` (1-based); organ 1 is the largest.
    pub fn target_volume(&self, k: usize) -> f64 {
        let organs = self.num_classes - 1;
        if organs == 1 {
            return self.smallest_voxels;
        }
        let t = (organs - k) as f64 / (organs - 1) as f64;
        self.smallest_voxels * self.size_ratio.powf(t)
    }

    /// Mean intensity (HU) of class `c`; background is 0.
    pub fn class_mean_hu(&self, c: usize) -> f64 {
        let organs = self.num_classes - 1;
        match (c, organs) {
            (0, _) => 0.0,
            (_, 1) => 500.0,
            _ => 100.0 + 900.0 * (c - 1) as f64 / (organs - 1) as f64,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Ellipsoid {
    centre: [f64; 3],
    radii: [f64; 3],
}

impl Ellipsoid {
    fn contains(&self, p: [usize; 3], margin: f64) -> bool {
        (0..3)
            .map(|a| ((p[a] as f64 - self.centre[a]) / (self.radii[a] + margin)).powi(2))
            .sum::<f64>()
            <= 1.0
    }

    /// Voxel bounding box, clipped to the grid.
    fn bounds(&self, shape: [usize; 3], margin: f64) -> [(usize, usize); 3] {
        let mut b = [(0, 0); 3];
        for a in 0..3 {
            let r = self.radii[a] + margin;
            let lo = (self.centre[a] - r).floor().max(0.0) as usize;
            let hi = ((self.centre[a] + r).ceil() as usize).min(shape[a] - 1);
            b[a] = (lo, hi);
        }
        b
    }

    fn voxels(&self, shape: [usize; 3], margin: f64) -> Vec<[usize; 3]> {
        let [(z0, z1), (y0, y1), (x0, x1)] = self.bounds(shape, margin);
        let mut out = Vec::new();
        for z in z0..=z1 {
            for y in y0..=y1 {
                for x in x0..=x1 {
                    if self.contains([z, y, x], margin) {
                        out.push([z, y, x]);
                    }
                }
            }
        }
        out
    }
}

/// Semi-axes `(rz, ry, rx)` in voxels for a roughly round organ of `volume`
/// voxels under `spacing`: physically isotropic, but never thinner than one
/// voxel along z.
fn radii_for(volume: f64, spacing: Spacing) -> [f64; 3] {
    let aspect = (spacing.dx / spacing.dz).min(1.0);
    let r = (3.0 * volume / (4.0 * std::f64::consts::PI * aspect)).cbrt();
    let rz = (r * aspect).max(1.0);
    let r = (3.0 * volume / (4.0 * std::f64::consts::PI * rz)).sqrt();
    [rz, r, r * spacing.dy / spacing.dx]
}

/// Number of placement attempts per organ before giving up.
const PLACEMENT_ATTEMPTS: usize = 2000;

pub fn make_phantom(spec: &PhantomSpec) -> Result<CaseRecord> {
    spec.validate()?;
    let shape = spec.shape;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut labels = Array3::<u8>::zeros(shape);
    let organs = spec.num_classes - 1;
    for k in 1..=organs {
        let radii = radii_for(spec.target_volume(k), spec.spacing);
        let mut placed = false;
        for _ in 0..PLACEMENT_ATTEMPTS {
            let mut centre = [0.0; 3];
            let mut fits = true;
            for a in 0..3 {
                // keep one voxel of background between organ and grid edge
                let lo = radii[a].floor() + 1.0;
                let hi = shape[a] as f64 - 2.0 - radii[a].floor();
                if hi < lo {
                    fits = false;
                    break;
                }
                centre[a] = rng.random_range(lo..=hi).round();
            }
            if !fits {
                break;
            }
            let e = Ellipsoid { centre, radii };
            // one-voxel gap to earlier organs
            if e.voxels(shape, 1.0).iter().any(|p| labels[*p] != 0) {
                continue;
            }
            for p in e.voxels(shape, 0.0) {
                labels[p] = k as u8;
            }
            placed = true;
            break;
        }
        if !placed {
            return Err(DataError::GridTooSmall {
                shape,
                organs,
                failed: k,
            });
        }
    }
    let noise = Normal::new(0.0, spec.noise_hu).expect("validated sigma");
    let data = labels.mapv(|c| (spec.class_mean_hu(c as usize) + noise.sample(&mut rng)) as f32);
    let volume = Volume::new(data, spec.spacing, IntensityUnit::Hu)?;
    let labels = LabelMap::new(labels, spec.num_classes, spec.spacing)?;
    Ok(CaseRecord::new(format!("phantom_{:016x}", spec.seed), volume, Some(labels))?)
}

/// Train / validation / test case ids.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl SplitManifest {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serialises");
        fs::write(path, text + "\n").map_err(io_err(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        serde_json::from_str(&text).map_err(|source| DataError::Json {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Seeded shuffle, then contiguous train / val / test partition with sizes
/// rounded from `ratios`.
pub fn split_corpus(ids: &[String], ratios: [f64; 3], seed: u64) -> Result<SplitManifest> {
    if ids.is_empty() {
        return Err(DataError::EmptyCorpus);
    }
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-6 {
        return Err(DataError::BadRatios(ratios));
    }
    let n = ids.len();
    let n_train = ((ratios[0] * n as f64).round() as usize).min(n);
    let n_val = ((ratios[1] * n as f64).round() as usize).min(n - n_train);
    let mut shuffled = ids.to_vec();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = shuffled.split_off(n_train + n_val);
    let val = shuffled.split_off(n_train);
    Ok(SplitManifest {
        seed,
        train: shuffled,
        val,
        test,
    })
}

pub const SPLIT_FILE: &str = "split.json";
pub const CASES_DIR: &str = "cases";

/// Cases on disk plus their split.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub cases: Vec<CaseRecord>,
    pub split: SplitManifest,
}

impl Corpus {
    pub fn get(&self, id: &str) -> Option<&CaseRecord> {
        self.cases.iter().find(|c| c.id == id)
    }

    fn subset(&self, ids: &[String]) -> Vec<CaseRecord> {
        ids.iter().filter_map(|id| self.get(id).cloned()).collect()
    }

    pub fn train(&self) -> Vec<CaseRecord> {
        self.subset(&self.split.train)
    }

    pub fn val(&self) -> Vec<CaseRecord> {
        self.subset(&self.split.val)
    }

    pub fn test(&self) -> Vec<CaseRecord> {
        self.subset(&self.split.test)
    }
}

pub fn case_path(dir: &Path, id: &str) -> PathBuf {
    dir.join(CASES_DIR).join(id)
}

/// Write every case in the raw format under `dir/cases/` and the split as
/// `dir/split.json`.
pub fn write_corpus(dir: &Path, corpus: &Corpus) -> Result<()> {
    let cases_dir = dir.join(CASES_DIR);
    fs::create_dir_all(&cases_dir).map_err(io_err(&cases_dir))?;
    for case in &corpus.cases {
        datamodel::save_case(case, &case_path(dir, &case.id))?;
    }
    corpus.split.save(&dir.join(SPLIT_FILE))
}

pub fn load_corpus(dir: &Path) -> Result<Corpus> {
    let split = SplitManifest::load(&dir.join(SPLIT_FILE))?;
    let mut cases = Vec::with_capacity(split.len());
    for id in split.train.iter().chain(&split.val).chain(&split.test) {
        let path = case_path(dir, id).with_extension("json");
        if !path.exists() {
            return Err(DataError::MissingCase(id.clone()));
        }
        cases.push(datamodel::load_case(&path)?);
    }
    Ok(Corpus { cases, split })
}

/// Generate `n` phantoms with seeds derived from `spec.seed` and split them.
pub fn phantom_corpus(spec: &PhantomSpec, n: usize, ratios: [f64; 3]) -> Result<Corpus> {
    if n == 0 {
        return Err(DataError::EmptyCorpus);
    }
    let mut seeder = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut cases = Vec::with_capacity(n);
    for i in 0..n {
        let case_spec = PhantomSpec {
            seed: seeder.random(),
            ..spec.clone()
        };
        let case = make_phantom(&case_spec)?;
        cases.push(CaseRecord::new(format!("case_{i:03}"), case.volume().clone(), case.labels().cloned())?);
    }
    let ids: Vec<String> = cases.iter().map(|c| c.id.clone()).collect();
    let split = split_corpus(&ids, ratios, spec.seed)?;
    Ok(Corpus { cases, split })
}

/// Apply `f` to every case on up to `workers` threads, fed through a bounded
/// queue. Output order follows input order regardless of scheduling.
pub fn map_cases<T, F>(cases: &[CaseRecord], workers: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(&CaseRecord) -> T + Sync,
{
    let workers = workers.clamp(1, cases.len().max(1));
    let (tx, rx) = mpsc::sync_channel::<usize>(workers);
    let rx = Mutex::new(rx);
    let results: Mutex<Vec<Option<T>>> = Mutex::new((0..cases.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let next = rx.lock().expect("queue lock").recv();
                match next {
                    Ok(i) => {
                        let out = f(&cases[i]);
                        results.lock().expect("results lock")[i] = Some(out);
                    }
                    Err(_) => break,
                }
            });
        }
        for i in 0..cases.len() {
            tx.send(i).expect("workers alive");
        }
        drop(tx);
    });
    results
        .into_inner()
        .expect("results lock")
        .into_iter()
        .map(|r| r.expect("every case processed"))
        .collect()
}

/// Normalise and resize every case to `target`.
pub fn preprocess_corpus(cases: &[CaseRecord], target: [usize; 3], workers: usize) -> Result<Vec<CaseRecord>> {
    map_cases(cases, workers, |c| resize_case(&normalize_case(c), target))
        .into_iter()
        .collect()
}

/// Shared volume shape, if every case has the same one.
pub fn common_shape(cases: &[CaseRecord]) -> Option<[usize; 3]> {
    let first = cases.first()?.volume().shape();
    cases
        .iter()
        .all(|c| c.volume().shape() == first)
        .then_some(first)
}

/// Label histogram without the background bin.
pub fn organ_volumes(labels: &LabelMap) -> Vec<usize> {
    labels.histogram().into_iter().skip(1).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::dsc;
    use proptest::prelude::*;

    fn small_spec(seed: u64, shape: [usize; 3], c: usize) -> PhantomSpec {
        PhantomSpec {
            size_ratio: 4.0,
            smallest_voxels: 8.0,
            ..PhantomSpec::new(seed, shape, c)
        }
    }

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("id{i}")).collect()
    }

    #[test]
    fn split_sizes() {
        let m = split_corpus(&ids(307), [240.0 / 307.0, 20.0 / 307.0, 47.0 / 307.0], 1).unwrap();
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (240, 20, 47));
        let m = split_corpus(&ids(10), [0.8, 0.1, 0.1], 1).unwrap();
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (8, 1, 1));
        let m = split_corpus(&ids(8), [0.75, 0.125, 0.125], 1).unwrap();
        assert_eq!((m.train.len(), m.val.len(), m.test.len()), (6, 1, 1));
        assert_eq!(split_corpus(&ids(10), [0.8, 0.1, 0.1], 1).unwrap(), split_corpus(&ids(10), [0.8, 0.1, 0.1], 1).unwrap());
        assert!(matches!(split_corpus(&[], [0.8, 0.1, 0.1], 1), Err(DataError::EmptyCorpus)));
        assert!(matches!(split_corpus(&ids(3), [0.8, 0.3, 0.1], 1), Err(DataError::BadRatios(_))));
    }

    #[test]
    fn normalisation_examples() {
        let v = |hu: f32| Volume::new(Array3::from_elem((1, 1, 2), hu), Spacing::default(), IntensityUnit::Hu).unwrap();
        assert!(normalize_intensity(&v(-2000.0)).data().iter().all(|&x| x == 0.0));
        assert!(normalize_intensity(&v(1500.0)).data().iter().all(|&x| x == 1.0));
        let mid = normalize_intensity(&v(238.0)).data()[[0, 0, 0]];
        assert!((mid - 0.5).abs() < 1e-6);
        let n = normalize_intensity(&v(238.0));
        assert_eq!(normalize_intensity(&n), n);
    }

    #[test]
    fn identity_resize_is_exact() {
        let p = make_phantom(&small_spec(3, [8, 16, 16], 3)).unwrap();
        let r = resize_case(&p, [8, 16, 16]).unwrap();
        assert_eq!(r.volume().data(), p.volume().data());
        assert_eq!(r.labels().unwrap().data(), p.labels().unwrap().data());
    }

    #[test]
    fn ramp_downscale_matches_closed_form() {
        // x-ramp v = x; halving with half-pixel centres samples source
        // coordinate 2i + 0.5, so the value is exactly 2i + 0.5.
        let data = Array3::from_shape_fn((2, 4, 8), |(_, _, x)| x as f32);
        let v = Volume::new(data, Spacing::default(), IntensityUnit::Normalized).unwrap();
        let r = resize_volume(&v, [2, 4, 4]).unwrap();
        for ((_, _, x), &val) in r.data().indexed_iter() {
            assert!((val - (2.0 * x as f32 + 0.5)).abs() < 1e-6);
        }
        assert_eq!(r.spacing().dx, 2.0);
    }

    #[test]
    fn single_voxel_axis_replicates() {
        let v = Volume::new(Array3::from_elem((1, 2, 2), 3.0), Spacing::default(), IntensityUnit::Hu).unwrap();
        let r = resize_volume(&v, [4, 2, 2]).unwrap();
        assert!(r.data().iter().all(|&x| x == 3.0));
    }

    #[test]
    fn phantom_properties() {
        let spec = PhantomSpec::new(11, [16, 64, 64], 4);
        let a = make_phantom(&spec).unwrap();
        let b = make_phantom(&spec).unwrap();
        assert_eq!(a.volume().data(), b.volume().data());
        assert_eq!(a.labels().unwrap().data(), b.labels().unwrap().data());
        let vols = organ_volumes(a.labels().unwrap());
        assert!(vols.iter().all(|&v| v > 0), "{vols:?}");
        let (max, min) = (*vols.iter().max().unwrap(), *vols.iter().min().unwrap());
        assert!(min <= 30, "{vols:?}");
        assert!(max as f64 / min as f64 >= 0.5 * spec.size_ratio, "{vols:?}");
    }

    #[test]
    fn tiny_grid_is_rejected() {
        let spec = PhantomSpec::new(1, [2, 4, 4], 5);
        assert!(matches!(make_phantom(&spec), Err(DataError::GridTooSmall { .. })));
    }

    #[test]
    fn parallel_map_keeps_order() {
        let spec = small_spec(5, [8, 16, 16], 3);
        let corpus = phantom_corpus(&spec, 7, [0.75, 0.125, 0.125]).unwrap();
        let one = map_cases(&corpus.cases, 1, |c| c.id.clone());
        let many = map_cases(&corpus.cases, 3, |c| c.id.clone());
        assert_eq!(one, many);
        assert_eq!(one, corpus.cases.iter().map(|c| c.id.clone()).collect::<Vec<_>>());
    }

    #[test]
    fn corpus_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let corpus = phantom_corpus(&small_spec(8, [8, 16, 16], 3), 4, [0.5, 0.25, 0.25]).unwrap();
        write_corpus(dir.path(), &corpus).unwrap();
        let back = load_corpus(dir.path()).unwrap();
        assert_eq!(back.split, corpus.split);
        for c in &corpus.cases {
            let b = back.get(&c.id).unwrap();
            assert_eq!(b.volume().data(), c.volume().data());
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn phantom_organs_disjoint_and_labels_survive_resize(seed in any::<u64>()) {
            let spec = PhantomSpec::new(seed, [16, 64, 64], 4);
            let p = make_phantom(&spec).unwrap();
            let l = p.labels().unwrap();
            // disjointness: every organ voxel has no 6-neighbour of another organ
            for ((z, y, x), &c) in l.data().indexed_iter() {
                if c == 0 { continue; }
                for (dz, dy, dx) in [(1i64, 0i64, 0i64), (0, 1, 0), (0, 0, 1)] {
                    let q = [z as i64 + dz, y as i64 + dy, x as i64 + dx];
                    if let Some(&d) = l.data().get([q[0] as usize, q[1] as usize, q[2] as usize]) {
                        prop_assert!(d == 0 || d == c);
                    }
                }
            }
            let up = resize_labels(l, [24, 96, 96]).unwrap();
            let back = resize_labels(&up, [16, 64, 64]).unwrap();
            for c in 1..4 {
                prop_assert!(dsc(&back, l, c).unwrap() >= 0.9);
            }
            let n = normalize_intensity(p.volume());
            prop_assert!(n.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }
}

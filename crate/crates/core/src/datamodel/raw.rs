//! On-disk case format.
//!
//! A case `<id>` is stored as `<id>.json` (header), `<id>.vol` (little-endian
//! `float32` voxels, `x` fastest) and optionally `<id>.seg` (`uint8` labels,
//! same geometry). Paths ending in `.nii` / `.nii.gz` are read through the
//! NIfTI-1 adapter instead, with labels in a sibling `<stem>_seg.nii[.gz]`.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use super::nifti;
use super::{CaseRecord, DataModelError, IntensityUnit, LabelMap, Result, Spacing, Volume};

/// Sidecar header shared by the volume and label blobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawHeader {
    /// `[z, y, x]`
    pub shape: [usize; 3],
    /// `[dz, dy, dx]` in mm
    pub spacing: [f64; 3],
    pub dtype: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_classes: Option<usize>,
    #[serde(default)]
    pub intensity_unit: IntensityUnit,
}

pub const VOLUME_DTYPE: &str = "float32";
pub const LABEL_DTYPE: &str = "uint8";

/// The three files that make up one raw-format case.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaseFiles {
    pub id: String,
    pub header: PathBuf,
    pub volume: PathBuf,
    pub labels: PathBuf,
}

impl CaseFiles {
    /// Accepts the extension-less stem or any of the three member files.
    pub fn resolve(path: &Path) -> Self {
        let stem = match path.extension().and_then(|e| e.to_str()) {
            Some("json" | "vol" | "seg") => path.with_extension(""),
            _ => path.to_path_buf(),
        };
        let id = stem
            .file_name()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        let with = |ext: &str| {
            let mut p = stem.clone().into_os_string();
            p.push(".");
            p.push(ext);
            PathBuf::from(p)
        };
        CaseFiles {
            id,
            header: with("json"),
            volume: with("vol"),
            labels: with("seg"),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataModelError + '_ {
    move |source| DataModelError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn header_err(field: &'static str, message: impl Into<String>) -> DataModelError {
    DataModelError::Header {
        field,
        message: message.into(),
    }
}

/// Field-by-field header parse so that errors name the offending field.
fn parse_header(path: &Path) -> Result<RawHeader> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|source| DataModelError::Json {
        path: path.display().to_string(),
        source,
    })?;
    let obj = value
        .as_object()
        .ok_or_else(|| header_err("header", "expected a JSON object"))?;
    for key in obj.keys() {
        if !["shape", "spacing", "dtype", "num_classes", "intensity_unit"].contains(&key.as_str()) {
            return Err(header_err("header", format!("unknown key `{key}`")));
        }
    }
    let shape = obj
        .get("shape")
        .and_then(|v| v.as_array())
        .ok_or_else(|| header_err("shape", "missing or not an array"))?;
    if shape.len() != 3 {
        return Err(header_err("shape", format!("expected 3 entries [z, y, x], got {}", shape.len())));
    }
    let mut dims = [0usize; 3];
    for (d, v) in dims.iter_mut().zip(shape) {
        *d = v
            .as_u64()
            .filter(|&n| n > 0)
            .ok_or_else(|| header_err("shape", format!("entry {v} is not a positive integer")))? as usize;
    }
    let spacing = obj
        .get("spacing")
        .and_then(|v| v.as_array())
        .ok_or_else(|| header_err("spacing", "missing or not an array"))?;
    if spacing.len() != 3 {
        return Err(header_err("spacing", format!("expected 3 entries [dz, dy, dx], got {}", spacing.len())));
    }
    let mut sp = [0f64; 3];
    for (s, v) in sp.iter_mut().zip(spacing) {
        *s = v
            .as_f64()
            .filter(|s| s.is_finite() && *s > 0.0)
            .ok_or_else(|| header_err("spacing", format!("entry {v} is not a positive number")))?;
    }
    let dtype = obj
        .get("dtype")
        .and_then(|v| v.as_str())
        .ok_or_else(|| header_err("dtype", "missing or not a string"))?
        .to_string();
    if dtype != VOLUME_DTYPE && dtype != LABEL_DTYPE {
        return Err(DataModelError::UnknownDtype(dtype));
    }
    let num_classes = match obj.get("num_classes") {
        None | Some(serde_json::Value::Null) => None,
        Some(v) => Some(
            v.as_u64()
                .filter(|&n| n > 0)
                .ok_or_else(|| header_err("num_classes", format!("{v} is not a positive integer")))? as usize,
        ),
    };
    let intensity_unit = match obj.get("intensity_unit") {
        None => IntensityUnit::default(),
        Some(v) => serde_json::from_value(v.clone())
            .map_err(|_| header_err("intensity_unit", format!("{v} is not one of \"hu\", \"normalized\"")))?,
    };
    Ok(RawHeader {
        shape: dims,
        spacing: sp,
        dtype,
        num_classes,
        intensity_unit,
    })
}

fn read_blob(path: &Path, header: &RawHeader, width: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    if bytes.len() % width != 0 {
        return Err(DataModelError::Format {
            path: path.display().to_string(),
            message: format!("{} bytes is not a whole number of {width}-byte voxels", bytes.len()),
        });
    }
    let expected: usize = header.shape.iter().product();
    let found = bytes.len() / width;
    if found != expected {
        return Err(header_err(
            "shape",
            format!(
                "{:?} implies {expected} voxels but {} holds {found}",
                header.shape,
                path.display()
            ),
        ));
    }
    Ok(bytes)
}

fn read_labels(path: &Path, header: &RawHeader, spacing: Spacing) -> Result<LabelMap> {
    let num_classes = header
        .num_classes
        .ok_or_else(|| header_err("num_classes", "required when a label blob is present"))?;
    let bytes = read_blob(path, header, 1)?;
    let data = Array3::from_shape_vec(header.shape, bytes).expect("length checked");
    LabelMap::new(data, num_classes, spacing)
}

/// Load a case from the raw format or a NIfTI-1 image.
pub fn load_case(path: &Path) -> Result<CaseRecord> {
    if nifti::is_nifti(path) {
        return nifti::load_case(path);
    }
    let files = CaseFiles::resolve(path);
    let header = parse_header(&files.header)?;
    if header.dtype != VOLUME_DTYPE {
        return Err(header_err(
            "dtype",
            format!("volume blobs must be `{VOLUME_DTYPE}`, got `{}`", header.dtype),
        ));
    }
    let spacing = Spacing::from_zyx(header.spacing)?;
    let bytes = read_blob(&files.volume, &header, 4)?;
    let voxels = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    let data = Array3::from_shape_vec(header.shape, voxels).expect("length checked");
    let volume = Volume::new(data, spacing, header.intensity_unit)?;
    let labels = if files.labels.exists() {
        Some(read_labels(&files.labels, &header, spacing)?)
    } else {
        None
    };
    CaseRecord::new(files.id, volume, labels)
}

fn write_header(path: &Path, header: &RawHeader) -> Result<()> {
    let text = serde_json::to_string_pretty(header).expect("header serialises");
    fs::write(path, text + "\n").map_err(io_err(path))
}

/// Save in the raw format at `path` (a stem; member extensions are appended).
pub fn save_case(case: &CaseRecord, path: &Path) -> Result<()> {
    let files = CaseFiles::resolve(path);
    let volume = case.volume();
    let header = RawHeader {
        shape: volume.shape(),
        spacing: volume.spacing().zyx(),
        dtype: VOLUME_DTYPE.into(),
        num_classes: case.labels().map(|l| l.num_classes()),
        intensity_unit: volume.unit(),
    };
    write_header(&files.header, &header)?;
    let mut bytes = Vec::with_capacity(volume.data().len() * 4);
    for v in volume.data().iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(&files.volume, bytes).map_err(io_err(&files.volume))?;
    match case.labels() {
        Some(labels) => {
            let bytes: Vec<u8> = labels.data().iter().copied().collect();
            fs::write(&files.labels, bytes).map_err(io_err(&files.labels))?;
        }
        None if files.labels.exists() => {
            fs::remove_file(&files.labels).map_err(io_err(&files.labels))?;
        }
        None => {}
    }
    Ok(())
}

/// Save a standalone label map (`<stem>.json` with dtype `uint8` + `<stem>.seg`).
pub fn save_labels(labels: &LabelMap, path: &Path) -> Result<()> {
    let files = CaseFiles::resolve(path);
    let header = RawHeader {
        shape: labels.shape(),
        spacing: labels.spacing().zyx(),
        dtype: LABEL_DTYPE.into(),
        num_classes: Some(labels.num_classes()),
        intensity_unit: IntensityUnit::default(),
    };
    write_header(&files.header, &header)?;
    let bytes: Vec<u8> = labels.data().iter().copied().collect();
    fs::write(&files.labels, bytes).map_err(io_err(&files.labels))
}

pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let files = CaseFiles::resolve(path);
    let header = parse_header(&files.header)?;
    let spacing = Spacing::from_zyx(header.spacing)?;
    read_labels(&files.labels, &header, spacing)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_case(id: &str, labels: bool) -> CaseRecord {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data = Array3::from_shape_fn((4, 4, 4), |_| rng.random_range(-1000.0f32..1000.0));
        let spacing = Spacing::new(0.8, 0.8, 3.0).unwrap();
        let volume = Volume::new(data, spacing, IntensityUnit::Hu).unwrap();
        let labels = labels.then(|| {
            let l = Array3::from_shape_fn((4, 4, 4), |_| rng.random_range(0u8..5));
            LabelMap::new(l, 5, spacing).unwrap()
        });
        CaseRecord::new(id, volume, labels).unwrap()
    }

    #[test]
    fn raw_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let case = random_case("case_a", true);
        save_case(&case, &dir.path().join("case_a")).unwrap();
        let back = load_case(&dir.path().join("case_a.json")).unwrap();
        assert_eq!(back, case);
        let bits = |c: &CaseRecord| c.volume().data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back), bits(&case));
    }

    #[test]
    fn shape_mismatch_names_field() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("bad");
        fs::write(
            stem.with_extension("json"),
            r#"{"shape":[2,2,2],"spacing":[1,1,1],"dtype":"float32"}"#,
        )
        .unwrap();
        fs::write(stem.with_extension("vol"), vec![0u8; 9 * 4]).unwrap();
        match load_case(&stem) {
            Err(DataModelError::Header { field: "shape", .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_dtype_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("f16");
        fs::write(
            stem.with_extension("json"),
            r#"{"shape":[1,1,2],"spacing":[1,1,1],"dtype":"float16"}"#,
        )
        .unwrap();
        fs::write(stem.with_extension("vol"), vec![0u8; 4]).unwrap();
        assert!(matches!(load_case(&stem), Err(DataModelError::UnknownDtype(d)) if d == "float16"));
    }

    #[test]
    fn label_range_is_checked_against_header() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("lab");
        let write = |max_label: u8| {
            fs::write(
                stem.with_extension("json"),
                r#"{"shape":[1,1,2],"spacing":[3,1,1],"dtype":"float32","num_classes":25}"#,
            )
            .unwrap();
            fs::write(stem.with_extension("vol"), vec![0u8; 8]).unwrap();
            fs::write(stem.with_extension("seg"), vec![0u8, max_label]).unwrap();
        };
        write(24);
        assert_eq!(load_case(&stem).unwrap().labels().unwrap().histogram()[24], 1);
        write(25);
        assert!(matches!(
            load_case(&stem),
            Err(DataModelError::LabelOutOfRange { value: 25, index: [0, 0, 1], .. })
        ));
    }

    #[test]
    fn missing_field_is_named() {
        let dir = tempfile::tempdir().unwrap();
        let stem = dir.path().join("nospacing");
        fs::write(stem.with_extension("json"), r#"{"shape":[1,1,1],"dtype":"float32"}"#).unwrap();
        fs::write(stem.with_extension("vol"), vec![0u8; 4]).unwrap();
        assert!(matches!(load_case(&stem), Err(DataModelError::Header { field: "spacing", .. })));
    }

    #[test]
    fn standalone_labels_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let case = random_case("p", true);
        let labels = case.labels().unwrap();
        save_labels(labels, &dir.path().join("pred")).unwrap();
        assert_eq!(&load_labels(&dir.path().join("pred")).unwrap(), labels);
    }
}

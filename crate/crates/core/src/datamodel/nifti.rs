//! Single-file NIfTI-1 (`.nii`, `.nii.gz`) reader/writer covering the scalar
//! datatypes found in CT volumes and label masks.

use std::fs::File;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use byteorder::{BigEndian, ByteOrder, LittleEndian};
use flate2::read::GzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use ndarray::Array3;

use super::{CaseRecord, DataModelError, IntensityUnit, LabelMap, Result, Spacing, Volume};

const HEADER_SIZE: usize = 348;
const VOX_OFFSET: usize = 352;

const DT_UINT8: i16 = 2;
const DT_INT16: i16 = 4;
const DT_INT32: i16 = 8;
const DT_FLOAT32: i16 = 16;
const DT_FLOAT64: i16 = 64;
const DT_INT8: i16 = 256;
const DT_UINT16: i16 = 512;

pub(super) fn is_nifti(path: &Path) -> bool {
    let name = path.to_string_lossy();
    name.ends_with(".nii") || name.ends_with(".nii.gz")
}

fn label_path(image: &Path) -> PathBuf {
    let name = image.to_string_lossy();
    let (stem, ext) = match name.strip_suffix(".nii.gz") {
        Some(stem) => (stem.to_string(), ".nii.gz"),
        None => (name.trim_end_matches(".nii").to_string(), ".nii"),
    };
    PathBuf::from(format!("{stem}_seg{ext}"))
}

fn case_id(image: &Path) -> String {
    let name = image
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    name.trim_end_matches(".gz").trim_end_matches(".nii").to_string()
}

fn format_err(path: &Path, message: impl Into<String>) -> DataModelError {
    DataModelError::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

struct Image {
    shape: [usize; 3],
    spacing: [f64; 3],
    values: Vec<f64>,
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    let io = |source| DataModelError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut file = File::open(path).map_err(io)?;
    let mut bytes = Vec::new();
    if path.to_string_lossy().ends_with(".gz") {
        GzDecoder::new(file).read_to_end(&mut bytes).map_err(io)?;
    } else {
        file.read_to_end(&mut bytes).map_err(io)?;
    }
    Ok(bytes)
}

fn read_image(path: &Path) -> Result<Image> {
    let bytes = read_bytes(path)?;
    if bytes.len() < HEADER_SIZE {
        return Err(format_err(path, "truncated NIfTI header"));
    }
    if LittleEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        decode::<LittleEndian>(path, &bytes)
    } else if BigEndian::read_i32(&bytes[0..4]) == HEADER_SIZE as i32 {
        decode::<BigEndian>(path, &bytes)
    } else {
        Err(format_err(path, "not a NIfTI-1 file (sizeof_hdr != 348)"))
    }
}

fn decode<B: ByteOrder>(path: &Path, bytes: &[u8]) -> Result<Image> {
    if &bytes[344..347] != b"n+1" {
        return Err(format_err(path, "only single-file NIfTI-1 (magic n+1) is supported"));
    }
    let dim = |i: usize| B::read_i16(&bytes[40 + 2 * i..42 + 2 * i]);
    let ndim = dim(0);
    if !(1..=7).contains(&ndim) {
        return Err(format_err(path, format!("invalid dim[0] = {ndim}")));
    }
    let extent = |i: usize| if (i as i16) <= ndim { dim(i).max(1) as usize } else { 1 };
    if (4..=ndim as usize).any(|i| extent(i) > 1) {
        return Err(format_err(path, "only 3D scalar volumes are supported"));
    }
    let (nx, ny, nz) = (extent(1), extent(2), extent(3));
    let datatype = B::read_i16(&bytes[70..72]);
    let pixdim = |i: usize| B::read_f32(&bytes[76 + 4 * i..80 + 4 * i]).abs() as f64;
    let spacing = [pixdim(3), pixdim(2), pixdim(1)].map(|s| if s > 0.0 { s } else { 1.0 });
    let offset = B::read_f32(&bytes[108..112]).max(HEADER_SIZE as f32) as usize;
    let slope = B::read_f32(&bytes[112..116]) as f64;
    let inter = B::read_f32(&bytes[116..120]) as f64;
    let count = nx * ny * nz;
    let width = match datatype {
        DT_UINT8 | DT_INT8 => 1,
        DT_INT16 | DT_UINT16 => 2,
        DT_INT32 | DT_FLOAT32 => 4,
        DT_FLOAT64 => 8,
        other => return Err(DataModelError::UnknownDtype(format!("nifti datatype {other}"))),
    };
    let data = bytes
        .get(offset..offset + count * width)
        .ok_or_else(|| format_err(path, "voxel data shorter than header dimensions"))?;
    let mut values: Vec<f64> = data
        .chunks_exact(width)
        .map(|c| match datatype {
            DT_UINT8 => c[0] as f64,
            DT_INT8 => c[0] as i8 as f64,
            DT_INT16 => B::read_i16(c) as f64,
            DT_UINT16 => B::read_u16(c) as f64,
            DT_INT32 => B::read_i32(c) as f64,
            DT_FLOAT32 => B::read_f32(c) as f64,
            _ => B::read_f64(c),
        })
        .collect();
    if slope != 0.0 && slope.is_finite() && (slope != 1.0 || inter != 0.0) {
        values.iter_mut().for_each(|v| *v = *v * slope + inter);
    }
    Ok(Image {
        shape: [nz, ny, nx],
        spacing,
        values,
    })
}

pub(super) fn load_case(path: &Path) -> Result<CaseRecord> {
    let image = read_image(path)?;
    let spacing = Spacing::from_zyx(image.spacing)?;
    let data = Array3::from_shape_vec(image.shape, image.values.iter().map(|&v| v as f32).collect())
        .expect("shape from header");
    let volume = Volume::new(data, spacing, IntensityUnit::Hu)?;
    let seg = label_path(path);
    let labels = if seg.exists() {
        let l = read_image(&seg)?;
        if l.shape != image.shape {
            return Err(DataModelError::ShapeMismatch {
                volume: image.shape,
                labels: l.shape,
            });
        }
        let mut max = 0u8;
        let mut raw = Vec::with_capacity(l.values.len());
        for (i, &v) in l.values.iter().enumerate() {
            if v < 0.0 || v > 255.0 || v.fract() != 0.0 {
                return Err(format_err(&seg, format!("voxel {i} holds non-label value {v}")));
            }
            max = max.max(v as u8);
            raw.push(v as u8);
        }
        let data = Array3::from_shape_vec(l.shape, raw).expect("shape from header");
        Some(LabelMap::new(data, (max as usize + 1).max(2), spacing)?)
    } else {
        None
    };
    CaseRecord::new(case_id(path), volume, labels)
}

fn encode_header(shape: [usize; 3], spacing: [f64; 3], datatype: i16, bitpix: i16) -> Vec<u8> {
    let mut h = vec![0u8; VOX_OFFSET];
    LittleEndian::write_i32(&mut h[0..4], HEADER_SIZE as i32);
    let dims = [3i16, shape[2] as i16, shape[1] as i16, shape[0] as i16, 1, 1, 1, 1];
    for (i, d) in dims.iter().enumerate() {
        LittleEndian::write_i16(&mut h[40 + 2 * i..42 + 2 * i], *d);
    }
    LittleEndian::write_i16(&mut h[70..72], datatype);
    LittleEndian::write_i16(&mut h[72..74], bitpix);
    let pix = [1.0f32, spacing[2] as f32, spacing[1] as f32, spacing[0] as f32, 0.0, 0.0, 0.0, 0.0];
    for (i, p) in pix.iter().enumerate() {
        LittleEndian::write_f32(&mut h[76 + 4 * i..80 + 4 * i], *p);
    }
    LittleEndian::write_f32(&mut h[108..112], VOX_OFFSET as f32);
    LittleEndian::write_f32(&mut h[112..116], 1.0);
    // xyzt_units: mm
    h[123] = 2;
    h[344..348].copy_from_slice(b"n+1\0");
    h
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    let io = |source| DataModelError::Io {
        path: path.display().to_string(),
        source,
    };
    let file = File::create(path).map_err(io)?;
    if path.to_string_lossy().ends_with(".gz") {
        let mut enc = GzEncoder::new(file, Compression::default());
        enc.write_all(bytes).map_err(io)?;
        enc.finish().map_err(io)?;
    } else {
        let mut file = file;
        file.write_all(bytes).map_err(io)?;
    }
    Ok(())
}

/// Write a case as `<path>` (float32 image) plus `<stem>_seg` (uint8 labels).
pub fn save_case_nifti(case: &CaseRecord, path: &Path) -> Result<()> {
    if !is_nifti(path) {
        return Err(format_err(path, "expected a .nii or .nii.gz path"));
    }
    let v = case.volume();
    let mut bytes = encode_header(v.shape(), v.spacing().zyx(), DT_FLOAT32, 32);
    for x in v.data().iter() {
        bytes.extend_from_slice(&x.to_le_bytes());
    }
    write_file(path, &bytes)?;
    if let Some(l) = case.labels() {
        let mut bytes = encode_header(l.shape(), l.spacing().zyx(), DT_UINT8, 8);
        bytes.extend(l.data().iter().copied());
        write_file(&label_path(path), &bytes)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nifti_gz_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spacing = Spacing::new(0.9, 0.9, 2.5).unwrap();
        let data = Array3::from_shape_fn((3, 4, 5), |(z, y, x)| (z * 100 + y * 10 + x) as f32 - 50.5);
        let volume = Volume::new(data, spacing, IntensityUnit::Hu).unwrap();
        let labels = LabelMap::new(Array3::from_shape_fn((3, 4, 5), |(z, _, x)| ((z + x) % 3) as u8), 3, spacing).unwrap();
        let case = CaseRecord::new("ct_01", volume, Some(labels)).unwrap();
        let path = dir.path().join("ct_01.nii.gz");
        save_case_nifti(&case, &path).unwrap();
        assert!(dir.path().join("ct_01_seg.nii.gz").exists());
        let back = super::super::load_case(&path).unwrap();
        assert_eq!(back.id, "ct_01");
        assert_eq!(back.volume().data(), case.volume().data());
        assert_eq!(back.labels().unwrap().data(), case.labels().unwrap().data());
        let sp = back.volume().spacing();
        assert!((sp.dz - 2.5).abs() < 1e-6 && (sp.dx - 0.9).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_nifti_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.nii");
        std::fs::write(&path, vec![7u8; 400]).unwrap();
        assert!(super::super::load_case(&path).is_err());
    }
}

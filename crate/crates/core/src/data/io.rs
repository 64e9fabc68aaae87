//! On-disk formats: `.arr` binary arrays, dataset manifests, and PGM label dumps.
//!
//! An `.arr` file is little-endian: the magic `DARR`, a `u8` version, a `u8`
//! dtype tag, a `u8` rank, `rank` dimensions as `u32`, then the row-major
//! payload.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, DatasetMeta, Domain, FeatureMap, LabelMap, Sample, IGNORE};
use crate::error::{Error, Result};

pub const ARRAY_MAGIC: &[u8; 4] = b"DARR";
pub const ARRAY_VERSION: u8 = 1;
pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32 = 0,
    U8 = 1,
    /// Used for model parameters and optimizer state so checkpoints are bit-exact.
    F64 = 2,
}

impl Dtype {
    fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::U8),
            2 => Some(Dtype::F64),
            _ => None,
        }
    }

    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::U8 => 1,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F32(Vec<f32>),
    U8(Vec<u8>),
    F64(Vec<f64>),
}

impl ArrayData {
    pub fn len(&self) -> usize {
        match self {
            ArrayData::F32(v) => v.len(),
            ArrayData::U8(v) => v.len(),
            ArrayData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self {
            ArrayData::F32(_) => Dtype::F32,
            ArrayData::U8(_) => Dtype::U8,
            ArrayData::F64(_) => Dtype::F64,
        }
    }
}

/// A dense n-dimensional array as stored in an `.arr` file.
#[derive(Debug, Clone, PartialEq)]
pub struct Array {
    pub dims: Vec<usize>,
    pub data: ArrayData,
}

impl Array {
    pub fn new(dims: Vec<usize>, data: ArrayData) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "array dims {dims:?} need {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn f64(dims: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        Self::new(dims, ArrayData::F64(values))
    }

    pub fn into_f64(self, what: &str) -> Result<Vec<f64>> {
        match self.data {
            ArrayData::F64(v) => Ok(v),
            other => Err(Error::Corrupt(format!(
                "{what}: expected float64 array, found {:?}",
                other.dtype()
            ))),
        }
    }
}

pub fn write_array(array: &Array) -> Vec<u8> {
    let mut out = Vec::with_capacity(7 + 4 * array.dims.len() + array.data.len() * 8);
    out.extend_from_slice(ARRAY_MAGIC);
    out.push(ARRAY_VERSION);
    out.push(array.data.dtype() as u8);
    out.push(array.dims.len() as u8);
    for &d in &array.dims {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match &array.data {
        ArrayData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        ArrayData::U8(v) => out.extend_from_slice(v),
        ArrayData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
    }
    out
}

/// Parses an `.arr` byte buffer; `path` is only used for error messages.
pub fn read_array(bytes: &[u8], path: &Path) -> Result<Array> {
    let truncated = |detail: String| Error::Truncated {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 4 {
        return Err(truncated("missing magic".into()));
    }
    if &bytes[..4] != ARRAY_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
        });
    }
    if bytes.len() < 7 {
        return Err(truncated("incomplete header".into()));
    }
    if bytes[4] != ARRAY_VERSION {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            expected: u32::from(ARRAY_VERSION),
            found: u32::from(bytes[4]),
        });
    }
    let dtype = Dtype::from_tag(bytes[5]).ok_or(Error::UnknownDtype {
        path: path.to_path_buf(),
        tag: bytes[5],
    })?;
    let rank = bytes[6] as usize;
    let header_len = 7 + 4 * rank;
    if bytes.len() < header_len {
        return Err(truncated(format!("header declares rank {rank}")));
    }
    let dims: Vec<usize> = bytes[7..header_len]
        .chunks_exact(4)
        .map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
        .collect();
    let count: usize = dims.iter().product();
    let payload = &bytes[header_len..];
    let need = count * dtype.width();
    if payload.len() < need {
        return Err(truncated(format!(
            "payload has {} bytes, dims {dims:?} need {need}",
            payload.len()
        )));
    }
    if payload.len() > need {
        return Err(Error::Corrupt(format!(
            "{}: {} trailing bytes after payload",
            path.display(),
            payload.len() - need
        )));
    }
    let data = match dtype {
        Dtype::U8 => ArrayData::U8(payload.to_vec()),
        Dtype::F32 => ArrayData::F32(
            payload
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect(),
        ),
        Dtype::F64 => ArrayData::F64(
            payload
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().expect("chunk of 8")))
                .collect(),
        ),
    };
    Ok(Array { dims, data })
}

pub fn write_array_file(path: &Path, array: &Array) -> Result<()> {
    fs::write(path, write_array(array)).map_err(|e| Error::io(path, e))
}

pub fn read_array_file(path: &Path) -> Result<Array> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_array(&bytes, path)
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format_version: u32,
    num_classes: usize,
    channels: usize,
    height: usize,
    width: usize,
    domain: Domain,
    samples: Vec<ManifestSample>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSample {
    id: String,
    features: String,
    labels: Option<String>,
}

pub(crate) fn file_stem_for(id: &str) -> String {
    id.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

/// Writes `dir/manifest.json` plus one `.arr` per feature and label map.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = ds.meta();
    let mut entries = Vec::with_capacity(ds.len());
    for (i, s) in ds.samples().iter().enumerate() {
        let stem = format!("{i:05}_{}", file_stem_for(&s.id));
        let features = format!("{stem}.features.arr");
        let arr = Array::new(
            vec![meta.height, meta.width, meta.channels],
            ArrayData::F32(s.features.values().to_vec()),
        )?;
        write_array_file(&dir.join(&features), &arr)?;
        let labels = match &s.labels {
            Some(lm) => {
                let name = format!("{stem}.labels.arr");
                let arr = Array::new(vec![meta.height, meta.width], ArrayData::U8(lm.labels().to_vec()))?;
                write_array_file(&dir.join(&name), &arr)?;
                Some(name)
            }
            None => None,
        };
        entries.push(ManifestSample {
            id: s.id.clone(),
            features,
            labels,
        });
    }
    let manifest = Manifest {
        format_version: MANIFEST_VERSION,
        num_classes: meta.num_classes,
        channels: meta.channels,
        height: meta.height,
        width: meta.width,
        domain: meta.domain,
        samples: entries,
    };
    let path = dir.join(MANIFEST_FILE);
    let json = serde_json::to_vec_pretty(&manifest)?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: Manifest = serde_json::from_slice(&text)?;
    if manifest.format_version != MANIFEST_VERSION {
        return Err(Error::VersionMismatch {
            path,
            expected: MANIFEST_VERSION,
            found: manifest.format_version,
        });
    }
    let meta = DatasetMeta {
        num_classes: manifest.num_classes,
        channels: manifest.channels,
        height: manifest.height,
        width: manifest.width,
        domain: manifest.domain,
    };
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for entry in manifest.samples {
        let fpath: PathBuf = dir.join(&entry.features);
        let arr = read_array_file(&fpath)?;
        let want = [meta.height, meta.width, meta.channels];
        if arr.dims != want {
            return Err(Error::DimensionMismatch {
                id: entry.id,
                detail: format!("features stored as {:?}, manifest declares {want:?}", arr.dims),
            });
        }
        let values = match arr.data {
            ArrayData::F32(v) => v,
            other => {
                return Err(Error::DimensionMismatch {
                    id: entry.id,
                    detail: format!("features must be float32, found {:?}", other.dtype()),
                })
            }
        };
        let features = FeatureMap::new(meta.height, meta.width, meta.channels, values)?;
        let labels = match &entry.labels {
            Some(name) => {
                let lpath = dir.join(name);
                let arr = read_array_file(&lpath)?;
                let want = [meta.height, meta.width];
                if arr.dims != want {
                    return Err(Error::DimensionMismatch {
                        id: entry.id,
                        detail: format!("labels stored as {:?}, manifest declares {want:?}", arr.dims),
                    });
                }
                let ArrayData::U8(v) = arr.data else {
                    return Err(Error::DimensionMismatch {
                        id: entry.id,
                        detail: "labels must be uint8".into(),
                    });
                };
                Some(LabelMap::new(meta.height, meta.width, v)?)
            }
            None => None,
        };
        samples.push(Sample {
            id: entry.id,
            features,
            labels,
        });
    }
    Dataset::new(meta, samples)
}

/// Writes a label map as binary PGM (`P5`, maxval 255). IGNORE is stored as 255.
pub fn export_label_pgm(lm: &LabelMap, num_classes: usize, path: &Path) -> Result<()> {
    if num_classes > usize::from(IGNORE) {
        return Err(Error::InvalidConfig(format!(
            "PGM export supports at most {IGNORE} classes, got {num_classes}"
        )));
    }
    lm.validate(num_classes)?;
    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(file, "P5\n{} {}\n255\n", lm.width(), lm.height()).map_err(|e| Error::io(path, e))?;
    file.write_all(lm.labels()).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> Dataset {
        let meta = DatasetMeta {
            num_classes: 3,
            channels: 2,
            height: 2,
            width: 2,
            domain: Domain::Source,
        };
        let samples = vec![
            Sample {
                id: "a".into(),
                features: FeatureMap::new(2, 2, 2, vec![0.5, -1.0, 2.0, 3.25, 0.0, 1e-30, -7.0, 8.0]).unwrap(),
                labels: Some(LabelMap::new(2, 2, vec![0, 1, IGNORE, 2]).unwrap()),
            },
            Sample {
                id: "b/2".into(),
                features: FeatureMap::zeros(2, 2, 2),
                labels: None,
            },
        ];
        Dataset::new(meta, samples).unwrap()
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset();
        save_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        assert_eq!(ds, back);
    }

    #[test]
    fn bad_magic_is_reported() {
        let arr = Array::new(vec![2], ArrayData::U8(vec![1, 2])).unwrap();
        let mut bytes = write_array(&arr);
        bytes[0] = b'X';
        assert!(matches!(
            read_array(&bytes, Path::new("x.arr")),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn version_and_truncation_errors() {
        let arr = Array::new(vec![3], ArrayData::F32(vec![1.0, 2.0, 3.0])).unwrap();
        let bytes = write_array(&arr);
        let mut v2 = bytes.clone();
        v2[4] = 2;
        assert!(matches!(
            read_array(&v2, Path::new("x")),
            Err(Error::VersionMismatch { found: 2, .. })
        ));
        assert!(matches!(
            read_array(&bytes[..bytes.len() - 1], Path::new("x")),
            Err(Error::Truncated { .. })
        ));
        assert!(matches!(
            read_array(&bytes[..8], Path::new("x")),
            Err(Error::Truncated { .. })
        ));
    }

    #[test]
    fn manifest_plane_mismatch_names_sample() {
        let dir = tempfile::tempdir().unwrap();
        let ds = tiny_dataset();
        save_dataset(&ds, dir.path()).unwrap();
        // Overwrite sample "a"'s features with a 3-plane array.
        let manifest: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        let name = manifest["samples"][0]["features"].as_str().unwrap();
        let arr = Array::new(vec![2, 2, 3], ArrayData::F32(vec![0.0; 12])).unwrap();
        write_array_file(&dir.path().join(name), &arr).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::DimensionMismatch { id, .. }) => assert_eq!(id, "a"),
            other => panic!("expected dimension mismatch, got {other:?}"),
        }
    }

    #[test]
    fn pgm_payload_encoding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.pgm");
        let lm = LabelMap::new(2, 2, vec![0, 1, IGNORE, 2]).unwrap();
        export_label_pgm(&lm, 3, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P5\n2 2\n255\n"));
        assert_eq!(&bytes[bytes.len() - 4..], &[0, 1, 255, 2]);

        let all = LabelMap::filled(3, 2, IGNORE);
        export_label_pgm(&all, 3, &path).unwrap();
        let bytes = fs::read(&path).unwrap();
        assert!(bytes[bytes.len() - 6..].iter().all(|&b| b == 255));
    }

    #[test]
    fn pgm_rejects_too_many_classes() {
        let dir = tempfile::tempdir().unwrap();
        let lm = LabelMap::filled(1, 1, 0);
        assert!(export_label_pgm(&lm, 256, &dir.path().join("x.pgm")).is_err());
    }

    proptest::proptest! {
        #[test]
        fn array_round_trip_f64(vals in proptest::collection::vec(proptest::num::f64::ANY, 0..40)) {
            let n = vals.len();
            let arr = Array::new(vec![n], ArrayData::F64(vals)).unwrap();
            let back = read_array(&write_array(&arr), Path::new("p")).unwrap();
            // Compare bit patterns so NaN payloads count as equal.
            let (ArrayData::F64(a), ArrayData::F64(b)) = (&arr.data, &back.data) else { unreachable!() };
            proptest::prop_assert_eq!(
                a.iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
                b.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
            );
        }
    }
}

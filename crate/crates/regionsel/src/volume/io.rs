//! Volume container: one JSON header line, then a raw little-endian payload in C order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Parcellation, ScalarMap, SubjectData, VoxelGrid};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    U32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Kind {
    Scalar,
    Labels,
    Weights,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Header {
    pub dims: Vec<usize>,
    pub dtype: Dtype,
    pub kind: Kind,
    /// Region count for label volumes; defaults to max label + 1.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regions: Option<usize>,
}

/// Anything the container can hold.
#[derive(Debug, Clone, PartialEq)]
pub enum Volume {
    Scalar(ScalarMap),
    Labels(Parcellation),
    /// Raw f64 array; dims are not tied to a voxel grid (e.g. n × B × rank).
    Weights {
        dims: Vec<usize>,
        values: Vec<f64>,
    },
}

impl Volume {
    pub fn into_scalar(self) -> Result<ScalarMap> {
        match self {
            Volume::Scalar(m) => Ok(m),
            _ => Err(Error::Header("expected a scalar volume".into())),
        }
    }

    pub fn into_labels(self) -> Result<Parcellation> {
        match self {
            Volume::Labels(p) => Ok(p),
            _ => Err(Error::Header("expected a label volume".into())),
        }
    }
}

pub fn encode_volume(v: &Volume) -> Vec<u8> {
    let (header, payload) = match v {
        Volume::Scalar(m) => (
            Header {
                dims: m.grid().dims().to_vec(),
                dtype: Dtype::F64,
                kind: Kind::Scalar,
                regions: None,
            },
            m.values().iter().flat_map(|x| x.to_le_bytes()).collect::<Vec<u8>>(),
        ),
        Volume::Labels(p) => (
            Header {
                dims: p.grid().dims().to_vec(),
                dtype: Dtype::U32,
                kind: Kind::Labels,
                regions: Some(p.region_count()),
            },
            p.labels().iter().flat_map(|x| x.to_le_bytes()).collect(),
        ),
        Volume::Weights { dims, values } => (
            Header {
                dims: dims.clone(),
                dtype: Dtype::F64,
                kind: Kind::Weights,
                regions: None,
            },
            values.iter().flat_map(|x| x.to_le_bytes()).collect(),
        ),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    out.extend_from_slice(&payload);
    out
}

pub fn decode_volume(bytes: &[u8]) -> Result<Volume> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Header("missing header terminator".into()))?;
    let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Header(e.to_string()))?;
    let payload = &bytes[nl + 1..];
    let count: usize = header.dims.iter().product();
    if header.dims.is_empty() {
        return Err(Error::Header("empty dims".into()));
    }
    let width = match header.dtype {
        Dtype::F64 => 8,
        Dtype::U32 => 4,
    };
    if payload.len() != count * width {
        return Err(Error::PayloadMismatch {
            expected: count * width,
            found: payload.len(),
        });
    }
    match (header.kind, header.dtype) {
        (Kind::Scalar, Dtype::F64) => {
            let grid = VoxelGrid::new(&header.dims)?;
            let values = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            Ok(Volume::Scalar(ScalarMap::new(grid, values)?))
        }
        (Kind::Labels, Dtype::U32) => {
            let grid = VoxelGrid::new(&header.dims)?;
            let labels: Vec<u32> = payload
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let p = match header.regions {
                Some(n) => Parcellation::new(grid, labels, n)?,
                None => Parcellation::from_labels(grid, labels)?,
            };
            Ok(Volume::Labels(p))
        }
        (Kind::Weights, Dtype::F64) => {
            let values: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if let Some(k) = values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(k));
            }
            Ok(Volume::Weights {
                dims: header.dims,
                values,
            })
        }
        (kind, dtype) => Err(Error::Header(format!(
            "unsupported kind/dtype combination {kind:?}/{dtype:?}"
        ))),
    }
}

pub fn write_volume(path: impl AsRef<Path>, v: &Volume) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&encode_volume(v)).map_err(|e| Error::io(path, e))
}

pub fn read_volume(path: impl AsRef<Path>) -> Result<Volume> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_volume(&bytes)
}

// ---------------------------------------------------------------------------
// Dataset manifest

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubjectEntry {
    pub effects: PathBuf,
    pub variances: PathBuf,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub subjects: Vec<SubjectEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parcellation: Option<PathBuf>,
    /// Ground-truth template map, when the data is simulated.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_mean: Option<PathBuf>,
    /// Ground-truth active region indices, when known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth_active: Option<Vec<usize>>,
}

/// A manifest with its paths resolved against the manifest's directory.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub subjects: Vec<SubjectData>,
    pub parcellation: Option<Parcellation>,
    pub truth_mean: Option<ScalarMap>,
    pub truth_active: Option<Vec<usize>>,
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::Header(e.to_string()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let subjects = m
        .subjects
        .iter()
        .map(|s| {
            let y = read_volume(base.join(&s.effects))?.into_scalar()?;
            let s2 = read_volume(base.join(&s.variances))?.into_scalar()?;
            SubjectData::new(y, s2)
        })
        .collect::<Result<Vec<_>>>()?;
    let parcellation = m
        .parcellation
        .as_ref()
        .map(|p| read_volume(base.join(p))?.into_labels())
        .transpose()?;
    let truth_mean = m
        .truth_mean
        .as_ref()
        .map(|p| read_volume(base.join(p))?.into_scalar())
        .transpose()?;
    Ok(Dataset {
        subjects,
        parcellation,
        truth_mean,
        truth_active: m.truth_active,
    })
}

/// Write subject maps next to the manifest and return the manifest path.
pub fn write_dataset(dir: impl AsRef<Path>, name: &str, ds: &Dataset) -> Result<PathBuf> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut m = Manifest::default();
    for (i, s) in ds.subjects.iter().enumerate() {
        let ey = PathBuf::from(format!("{name}_sub{i:03}_effects.vol"));
        let ev = PathBuf::from(format!("{name}_sub{i:03}_variances.vol"));
        write_volume(dir.join(&ey), &Volume::Scalar(s.effects().clone()))?;
        write_volume(dir.join(&ev), &Volume::Scalar(s.variances().clone()))?;
        m.subjects.push(SubjectEntry {
            effects: ey,
            variances: ev,
        });
    }
    if let Some(p) = &ds.parcellation {
        let f = PathBuf::from(format!("{name}_parcellation.vol"));
        write_volume(dir.join(&f), &Volume::Labels(p.clone()))?;
        m.parcellation = Some(f);
    }
    if let Some(t) = &ds.truth_mean {
        let f = PathBuf::from(format!("{name}_truth_mean.vol"));
        write_volume(dir.join(&f), &Volume::Scalar(t.clone()))?;
        m.truth_mean = Some(f);
    }
    m.truth_active = ds.truth_active.clone();
    let mpath = dir.join(format!("{name}_manifest.json"));
    let text = serde_json::to_string_pretty(&m).expect("manifest serializes");
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    Ok(mpath)
}

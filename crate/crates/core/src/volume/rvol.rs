//! The `rvol` volume format: a raw little-endian payload in x-fastest order
//! (`<name>.rvol`) plus a JSON sidecar (`<name>.rvol.json`) carrying the
//! geometry, sample type and an optional class table.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::classes::ClassTable;
use super::grid::{Dims, Spacing, Voxel, VoxelGrid};
use super::maps::LabelMap;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DType {
    #[serde(rename = "f32")]
    F32,
    #[serde(rename = "u8")]
    U8,
}

/// Scalar types with an on-disk encoding.
pub trait RvolScalar: Voxel {
    const DTYPE: DType;
    const WIDTH: usize;
    fn put(self, out: &mut Vec<u8>);
    fn take(bytes: &[u8]) -> Self;
}

impl RvolScalar for f32 {
    const DTYPE: DType = DType::F32;
    const WIDTH: usize = 4;
    fn put(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn take(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("4-byte chunk"))
    }
}

impl RvolScalar for u8 {
    const DTYPE: DType = DType::U8;
    const WIDTH: usize = 1;
    fn put(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn take(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub dims: Dims,
    pub spacing_mm: Spacing,
    pub dtype: DType,
    pub order: String,
    pub endian: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classes: Option<ClassTable>,
}

/// A volume read without knowing its type up front.
#[derive(Clone, Debug, PartialEq)]
pub enum Volume {
    F32(VoxelGrid<f32>),
    U8(VoxelGrid<u8>, Option<ClassTable>),
}

pub fn sidecar_path(payload: &Path) -> PathBuf {
    let mut s = payload.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_grid<T: RvolScalar>(
    path: &Path,
    grid: &VoxelGrid<T>,
    classes: Option<&ClassTable>,
) -> Result<()> {
    let mut payload = Vec::with_capacity(grid.len() * T::WIDTH);
    grid.data().iter().for_each(|v| v.put(&mut payload));
    let sidecar = Sidecar {
        dims: grid.dims(),
        spacing_mm: grid.spacing(),
        dtype: T::DTYPE,
        order: "x-fastest".into(),
        endian: "little".into(),
        classes: classes.cloned(),
    };
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, payload).map_err(|e| Error::io(path, e))?;
    let side = sidecar_path(path);
    let json = serde_json::to_vec_pretty(&sidecar).map_err(|e| Error::json(&side, e))?;
    fs::write(&side, json).map_err(|e| Error::io(&side, e))
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    write_grid(path, labels.grid(), Some(labels.classes()))
}

pub fn read_sidecar(path: &Path) -> Result<Sidecar> {
    let side = sidecar_path(path);
    let text = fs::read(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: Sidecar = serde_json::from_slice(&text).map_err(|e| Error::json(&side, e))?;
    if sidecar.order != "x-fastest" {
        return Err(Error::invalid(format!(
            "unsupported voxel order `{}`",
            sidecar.order
        )));
    }
    if sidecar.endian != "little" {
        return Err(Error::invalid(format!(
            "unsupported endianness `{}`",
            sidecar.endian
        )));
    }
    if sidecar.classes.is_some() && sidecar.dtype != DType::U8 {
        return Err(Error::invalid("class tables are only valid on u8 volumes"));
    }
    Ok(sidecar)
}

fn decode<T: RvolScalar>(path: &Path, sidecar: &Sidecar) -> Result<VoxelGrid<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let n = sidecar.dims.iter().product::<usize>();
    if bytes.len() != n * T::WIDTH {
        return Err(Error::invalid(format!(
            "`{}` holds {} bytes, expected {}",
            path.display(),
            bytes.len(),
            n * T::WIDTH
        )));
    }
    let data = bytes.chunks_exact(T::WIDTH).map(T::take).collect();
    VoxelGrid::new(sidecar.dims, sidecar.spacing_mm, data)
}

pub fn read(path: &Path) -> Result<Volume> {
    let sidecar = read_sidecar(path)?;
    Ok(match sidecar.dtype {
        DType::F32 => Volume::F32(decode(path, &sidecar)?),
        DType::U8 => Volume::U8(decode(path, &sidecar)?, sidecar.classes.clone()),
    })
}

pub fn read_f32(path: &Path) -> Result<VoxelGrid<f32>> {
    match read(path)? {
        Volume::F32(g) => Ok(g),
        Volume::U8(..) => Err(Error::invalid(format!(
            "`{}` is u8, expected f32",
            path.display()
        ))),
    }
}

/// Reads a u8 volume as a label map; the sidecar must carry a class table.
pub fn read_labels(path: &Path) -> Result<LabelMap> {
    match read(path)? {
        Volume::U8(g, Some(classes)) => LabelMap::new(g, classes),
        Volume::U8(_, None) => Err(Error::invalid(format!(
            "`{}` has no class table",
            path.display()
        ))),
        Volume::F32(_) => Err(Error::invalid(format!(
            "`{}` is f32, expected labels",
            path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sidecar_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("venous.rvol");
        let g = VoxelGrid::new([2, 1, 1], [0.7, 0.7, 3.0], vec![1.5f32, -2.0]).unwrap();
        write_grid(&p, &g, None).unwrap();
        let side: serde_json::Value =
            serde_json::from_slice(&fs::read(dir.path().join("venous.rvol.json")).unwrap())
                .unwrap();
        assert_eq!(side["dims"], serde_json::json!([2, 1, 1]));
        assert_eq!(side["dtype"], "f32");
        assert_eq!(side["order"], "x-fastest");
        assert_eq!(side["endian"], "little");
        assert!(side.get("classes").is_none());
        assert_eq!(fs::read(&p).unwrap(), [0, 0, 0xc0, 0x3f, 0, 0, 0, 0xc0]);
        assert_eq!(read_f32(&p).unwrap(), g);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.rvol");
        let g = VoxelGrid::new([2, 2, 1], [1.0; 3], vec![0u8, 1, 2, 0]).unwrap();
        write_grid(&p, &g, Some(&ClassTable::seg3())).unwrap();
        assert!(read_labels(&p).is_ok());
        fs::write(&p, [0u8, 1, 2]).unwrap();
        assert!(read(&p).is_err());
    }

    #[test]
    fn labels_need_a_class_table() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.rvol");
        let g = VoxelGrid::new([1, 1, 1], [1.0; 3], vec![1u8]).unwrap();
        write_grid(&p, &g, None).unwrap();
        assert!(read_labels(&p).is_err());
        assert!(read_f32(&p).is_err());
    }
}

//! Flat little-endian arrays with a JSON sidecar (`<file>.json`) giving the shape.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{ExpError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F64,
    F32,
    U64,
    U32,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F64 | Dtype::U64 => 8,
            Dtype::F32 | Dtype::U32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub rows: usize,
    pub cols: usize,
    pub dtype: Dtype,
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

fn read_raw(path: &Path) -> Result<(Sidecar, Vec<u8>)> {
    let side_path = sidecar_path(path);
    let side: Sidecar = serde_json::from_slice(
        &fs::read(&side_path).map_err(|e| ExpError::Table(format!("{}: {e}", side_path.display())))?,
    )?;
    let bytes = fs::read(path)?;
    let expected = side.rows * side.cols * side.dtype.width();
    if bytes.len() != expected {
        return Err(ExpError::Table(format!(
            "{} holds {} bytes but its sidecar describes {expected}",
            path.display(),
            bytes.len()
        )));
    }
    Ok((side, bytes))
}

fn write_raw(path: &Path, side: &Sidecar, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    fs::write(sidecar_path(path), serde_json::to_vec_pretty(side)?)?;
    Ok(())
}

pub fn read_f64(path: &Path) -> Result<Array2<f64>> {
    let (side, bytes) = read_raw(path)?;
    let values: Vec<f64> = match side.dtype {
        Dtype::F64 => bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8"))).collect(),
        Dtype::F32 => bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4")) as f64).collect(),
        other => return Err(ExpError::Table(format!("expected a float array, found {other:?}"))),
    };
    Ok(Array2::from_shape_vec((side.rows, side.cols), values).expect("checked length"))
}

pub fn read_usize(path: &Path) -> Result<Array2<usize>> {
    let (side, bytes) = read_raw(path)?;
    let values: Vec<usize> = match side.dtype {
        Dtype::U64 => bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().expect("8")) as usize).collect(),
        Dtype::U32 => bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().expect("4")) as usize).collect(),
        other => return Err(ExpError::Table(format!("expected an integer array, found {other:?}"))),
    };
    Ok(Array2::from_shape_vec((side.rows, side.cols), values).expect("checked length"))
}

pub fn write_f64(path: &Path, a: &Array2<f64>) -> Result<()> {
    let bytes: Vec<u8> = a.iter().flat_map(|v| v.to_le_bytes()).collect();
    write_raw(path, &Sidecar { rows: a.nrows(), cols: a.ncols(), dtype: Dtype::F64 }, &bytes)
}

pub fn write_usize(path: &Path, a: &Array2<usize>) -> Result<()> {
    let bytes: Vec<u8> = a.iter().flat_map(|&v| (v as u64).to_le_bytes()).collect();
    write_raw(path, &Sidecar { rows: a.nrows(), cols: a.ncols(), dtype: Dtype::U64 }, &bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let c = array![[0.5, -1.0, 3.25], [1e-300, 2.0, f64::MAX]];
        let f = array![[0usize, 7], [3, 1]];
        write_f64(&dir.path().join("codes.bin"), &c).unwrap();
        write_usize(&dir.path().join("factors.bin"), &f).unwrap();
        assert_eq!(read_f64(&dir.path().join("codes.bin")).unwrap(), c);
        assert_eq!(read_usize(&dir.path().join("factors.bin")).unwrap(), f);
    }

    #[test]
    fn f32_and_u32_inputs() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        let bytes: Vec<u8> = [1.5f32, -2.0].iter().flat_map(|v| v.to_le_bytes()).collect();
        write_raw(&p, &Sidecar { rows: 1, cols: 2, dtype: Dtype::F32 }, &bytes).unwrap();
        assert_eq!(read_f64(&p).unwrap(), array![[1.5, -2.0]]);
        let bytes: Vec<u8> = [4u32, 9].iter().flat_map(|v| v.to_le_bytes()).collect();
        write_raw(&p, &Sidecar { rows: 2, cols: 1, dtype: Dtype::U32 }, &bytes).unwrap();
        assert_eq!(read_usize(&p).unwrap(), array![[4], [9]]);
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.bin");
        write_raw(&p, &Sidecar { rows: 3, cols: 1, dtype: Dtype::F64 }, &[0u8; 16]).unwrap();
        assert!(matches!(read_f64(&p), Err(ExpError::Table(_))));
        assert!(read_usize(&p).is_err());
        assert!(read_f64(&dir.path().join("missing.bin")).is_err());
    }
}

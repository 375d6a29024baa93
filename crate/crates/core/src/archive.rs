//! Single-file binary model archive shared by every pipeline stage.
//!
//! Layout: magic "LCMD", u32 LE version, then a sequence of named arrays —
//! u16 LE name length, name bytes, u8 rank, u32 LE dims, f64 LE payload in
//! row-major order. Stages append their arrays into one file.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::gmm::DiagonalGmm;
use crate::scoring::{PldaModel, Preprocessor};
use crate::tvspace::TotalVariability;

const MAGIC: &[u8; 4] = b"LCMD";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl NamedArray {
    fn len_from_dims(dims: &[usize]) -> usize {
        dims.iter().product()
    }
}

/// Ordered collection of named arrays; insertion order is the file order,
/// re-inserting a name overwrites in place.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelArchive {
    entries: Vec<(String, NamedArray)>,
}

impl ModelArchive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn insert(&mut self, name: &str, dims: Vec<usize>, data: Vec<f64>) -> Result<()> {
        if name.is_empty() || name.len() > u16::MAX as usize {
            return Err(Error::Parameter("array name length out of range".into()));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::Parameter("array rank out of range".into()));
        }
        if NamedArray::len_from_dims(&dims) != data.len() {
            return Err(Error::Parameter(format!(
                "array '{name}': dims declare {} elements, payload has {}",
                NamedArray::len_from_dims(&dims),
                data.len()
            )));
        }
        let arr = NamedArray { dims, data };
        if let Some(slot) = self.entries.iter_mut().find(|(n, _)| n == name) {
            slot.1 = arr;
        } else {
            self.entries.push((name.to_string(), arr));
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn require(&self, name: &str) -> Result<&NamedArray> {
        self.get(name).ok_or_else(|| {
            Error::Data(format!(
                "archive is missing array '{name}'; run the stage that produces it first"
            ))
        })
    }

    pub fn put_array1(&mut self, name: &str, a: &Array1<f64>) -> Result<()> {
        self.insert(name, vec![a.len()], a.to_vec())
    }

    pub fn put_array2(&mut self, name: &str, a: &Array2<f64>) -> Result<()> {
        let data: Vec<f64> = a.iter().cloned().collect();
        self.insert(name, vec![a.nrows(), a.ncols()], data)
    }

    pub fn get_array1(&self, name: &str) -> Result<Array1<f64>> {
        let arr = self.require(name)?;
        if arr.dims.len() != 1 {
            return Err(Error::Data(format!(
                "array '{name}' has rank {}, expected 1",
                arr.dims.len()
            )));
        }
        Ok(Array1::from_vec(arr.data.clone()))
    }

    pub fn get_array2(&self, name: &str) -> Result<Array2<f64>> {
        let arr = self.require(name)?;
        if arr.dims.len() != 2 {
            return Err(Error::Data(format!(
                "array '{name}' has rank {}, expected 2",
                arr.dims.len()
            )));
        }
        Array2::from_shape_vec((arr.dims[0], arr.dims[1]), arr.data.clone())
            .map_err(|e| Error::Data(format!("array '{name}': {e}")))
    }

    /// Atomic write: temp file in the destination directory, then rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        for (name, arr) in &self.entries {
            buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.push(arr.dims.len() as u8);
            for &d in &arr.dims {
                buf.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &arr.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
        let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or_else(|| Path::new(".")))?;
        tmp.write_all(&buf)?;
        tmp.flush()?;
        tmp.persist(path).map_err(|e| Error::Io(e.error))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
            if *pos + n > bytes.len() {
                return Err(Error::Format("archive truncated".into()));
            }
            let out = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(out)
        };
        if take(&mut pos, 4)? != MAGIC {
            return Err(Error::Format("not a model archive (bad magic)".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != VERSION {
            return Err(Error::Format(format!("unsupported archive version {version}")));
        }
        let mut out = ModelArchive::new();
        while pos < bytes.len() {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = std::str::from_utf8(take(&mut pos, name_len)?)
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?
                .to_string();
            let rank = take(&mut pos, 1)?[0] as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
            }
            let n = NamedArray::len_from_dims(&dims);
            let payload = take(&mut pos, n * 8)?;
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if out.get(&name).is_some() {
                return Err(Error::Format(format!("duplicate array '{name}' in archive")));
            }
            out.entries.push((name, NamedArray { dims, data }));
        }
        Ok(out)
    }
}

pub fn put_ubm(arch: &mut ModelArchive, g: &DiagonalGmm) -> Result<()> {
    arch.put_array1("ubm.weights", g.weights())?;
    arch.put_array2("ubm.means", g.means())?;
    arch.put_array2("ubm.vars", g.vars())
}

pub fn get_ubm(arch: &ModelArchive) -> Result<DiagonalGmm> {
    DiagonalGmm::new(
        arch.get_array1("ubm.weights")?,
        arch.get_array2("ubm.means")?,
        arch.get_array2("ubm.vars")?,
    )
}

pub fn put_tv(arch: &mut ModelArchive, tv: &TotalVariability) -> Result<()> {
    arch.put_array2("tv.T", tv.matrix())?;
    arch.put_array2("tv.sigma", tv.sigma())
}

pub fn get_tv(arch: &ModelArchive) -> Result<TotalVariability> {
    TotalVariability::new(arch.get_array2("tv.T")?, arch.get_array2("tv.sigma")?)
}

pub fn put_plda(arch: &mut ModelArchive, p: &PldaModel) -> Result<()> {
    arch.put_array1("plda.mu", p.mu())?;
    arch.put_array2("plda.phi", p.phi())?;
    arch.put_array2("plda.sigma_eps", p.sigma_eps())
}

pub fn get_plda(arch: &ModelArchive) -> Result<PldaModel> {
    PldaModel::new(
        arch.get_array1("plda.mu")?,
        arch.get_array2("plda.phi")?,
        arch.get_array2("plda.sigma_eps")?,
    )
}

pub fn put_prep(arch: &mut ModelArchive, p: &Preprocessor) -> Result<()> {
    arch.put_array1("prep.mean", p.mean())?;
    arch.put_array2("prep.whiten", p.whiten())
}

pub fn get_prep(arch: &ModelArchive) -> Result<Preprocessor> {
    Preprocessor::from_parts(arch.get_array1("prep.mean")?, arch.get_array2("prep.whiten")?)
}

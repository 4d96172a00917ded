//! Parameter archives.
//!
//! An archive is a directory holding two files:
//!
//! * `tensors.safetensors`: every named array, stored in its native dtype.
//! * `manifest.txt`: plain text. Lines starting with `#` are comments. A
//!   `[meta]` section carries `key = value` pairs (epoch, phase, seed,
//!   config hash, ...). A `[tensors]` section lists one `name dtype d0,d1,..`
//!   line per array. Loading fails if the two files disagree.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use candle_core::{DType, Device, Tensor};

use crate::error::{Error, Result};

pub const TENSOR_FILE: &str = "tensors.safetensors";
pub const MANIFEST_FILE: &str = "manifest.txt";
const FORMAT_VERSION: &str = "1";

#[derive(Clone, Debug, Default)]
pub struct ParamArchive {
    tensors: BTreeMap<String, Tensor>,
    pub meta: BTreeMap<String, String>,
}

fn dtype_name(dtype: DType) -> &'static str {
    match dtype {
        DType::F32 => "f32",
        DType::F64 => "f64",
        DType::I64 => "i64",
        DType::U32 => "u32",
        DType::U8 => "u8",
        _ => "other",
    }
}

impl ParamArchive {
    pub fn insert(&mut self, name: String, tensor: Tensor) {
        self.tensors.insert(name, tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn set_meta(&mut self, key: &str, value: impl ToString) {
        self.meta.insert(key.to_string(), value.to_string());
    }

    pub fn meta_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| Error::invalid(format!("archive metadata lacks {key}")))?;
        raw.parse()
            .map_err(|_| Error::invalid(format!("archive metadata {key} = {raw:?} is malformed")))
    }

    /// Bitwise equality of names, metadata, dtypes, shapes and values.
    pub fn exactly_equal(&self, other: &ParamArchive) -> Result<bool> {
        if self.meta != other.meta || self.tensors.len() != other.tensors.len() {
            return Ok(false);
        }
        for (name, a) in &self.tensors {
            let Some(b) = other.tensors.get(name) else {
                return Ok(false);
            };
            if a.dtype() != b.dtype() || a.dims() != b.dims() {
                return Ok(false);
            }
            let same = match a.dtype() {
                DType::I64 => {
                    a.flatten_all()?.to_vec1::<i64>()? == b.flatten_all()?.to_vec1::<i64>()?
                }
                _ => {
                    let x = a.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
                    let y = b.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
                    x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits())
                }
            };
            if !same {
                return Ok(false);
            }
        }
        Ok(true)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let map: HashMap<String, Tensor> = self
            .tensors
            .iter()
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect();
        candle_core::safetensors::save(&map, dir.join(TENSOR_FILE))?;

        let mut text = String::from("# gcl parameter archive\n[meta]\n");
        text.push_str(&format!("format = {FORMAT_VERSION}\n"));
        for (k, v) in &self.meta {
            if k == "format" {
                continue;
            }
            text.push_str(&format!("{k} = {v}\n"));
        }
        text.push_str("[tensors]\n");
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.dims().iter().map(|d| d.to_string()).collect();
            text.push_str(&format!("{name} {} {}\n", dtype_name(t.dtype()), dims.join(",")));
        }
        let path = dir.join(MANIFEST_FILE);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<ParamArchive> {
        let manifest_path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let bad = |message: String| Error::Format {
            path: manifest_path.clone(),
            message,
        };

        let mut meta = BTreeMap::new();
        let mut listed: BTreeMap<String, (String, Vec<usize>)> = BTreeMap::new();
        let mut section = "";
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if line == "[meta]" || line == "[tensors]" {
                section = if line == "[meta]" { "meta" } else { "tensors" };
                continue;
            }
            match section {
                "meta" => {
                    let (k, v) = line
                        .split_once(" = ")
                        .ok_or_else(|| bad(format!("line {}: expected `key = value`", lineno + 1)))?;
                    meta.insert(k.to_string(), v.to_string());
                }
                "tensors" => {
                    let parts: Vec<&str> = line.split_whitespace().collect();
                    let [name, dtype, dims] = parts[..] else {
                        return Err(bad(format!("line {}: expected `name dtype dims`", lineno + 1)));
                    };
                    let dims = if dims.is_empty() {
                        Vec::new()
                    } else {
                        dims.split(',')
                            .map(|d| d.parse::<usize>())
                            .collect::<std::result::Result<_, _>>()
                            .map_err(|_| bad(format!("line {}: bad dims {dims}", lineno + 1)))?
                    };
                    listed.insert(name.to_string(), (dtype.to_string(), dims));
                }
                _ => return Err(bad(format!("line {}: content before any section", lineno + 1))),
            }
        }
        if meta.get("format").map(String::as_str) != Some(FORMAT_VERSION) {
            return Err(bad(format!("unsupported format {:?}", meta.get("format"))));
        }
        meta.remove("format");

        let loaded = candle_core::safetensors::load(dir.join(TENSOR_FILE), &Device::Cpu)?;
        if loaded.len() != listed.len() {
            return Err(bad(format!(
                "manifest lists {} tensors, file holds {}",
                listed.len(),
                loaded.len()
            )));
        }
        let mut tensors = BTreeMap::new();
        for (name, t) in loaded {
            let (dtype, dims) = listed
                .get(&name)
                .ok_or_else(|| bad(format!("tensor {name} not listed in manifest")))?;
            if dtype != dtype_name(t.dtype()) || dims.as_slice() != t.dims() {
                return Err(bad(format!("tensor {name} disagrees with its manifest entry")));
            }
            tensors.insert(name, t);
        }
        Ok(ParamArchive { tensors, meta })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ParamArchive::default();
        a.insert(
            "w".into(),
            Tensor::new(&[[1.5f32, -2.0], [1e-30, 3.25]], &Device::Cpu).unwrap(),
        );
        a.insert("labels".into(), Tensor::new(&[-1i64, 0, 3], &Device::Cpu).unwrap());
        a.insert("d".into(), Tensor::new(&[std::f64::consts::PI], &Device::Cpu).unwrap());
        a.set_meta("epoch", 7);
        a.set_meta("phase", "joint");
        a.save(dir.path()).unwrap();
        let b = ParamArchive::load(dir.path()).unwrap();
        assert!(a.exactly_equal(&b).unwrap());
        assert_eq!(b.meta_value::<u32>("epoch").unwrap(), 7);
    }

    #[test]
    fn manifest_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut a = ParamArchive::default();
        a.insert("w".into(), Tensor::new(&[1f32, 2.0], &Device::Cpu).unwrap());
        a.save(dir.path()).unwrap();
        let path = dir.path().join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("w f32 2", "v f32 2");
        fs::write(&path, text).unwrap();
        assert!(ParamArchive::load(dir.path()).is_err());
    }
}

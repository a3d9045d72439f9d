//! Single-file tensor container: a JSON index mapping tensor names to
//! `{shape, dtype, byte_offset}`, a newline, then concatenated little-endian
//! tensor data. Offsets are relative to the start of the data blob. Index
//! keys beginning with `__` carry free-form JSON metadata instead of tensors.
//!
//! Head-model files and training checkpoints both use this format. Writing is
//! deterministic: names are sorted, so save -> load -> save is byte-identical.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    /// Full-precision state (e.g. optimizer moments) that must survive a
    /// save/load cycle bit-exactly.
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> &'static str {
        match self {
            TensorData::F32(_) => "f32",
            TensorData::F64(_) => "f64",
            TensorData::I32(_) => "i32",
        }
    }

    pub fn elem_bytes(&self) -> usize {
        match self {
            TensorData::F64(_) => 8,
            TensorData::F32(_) | TensorData::I32(_) => 4,
        }
    }

    pub fn as_f32(&self) -> Option<&[f32]> {
        match self {
            TensorData::F32(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_f64(&self) -> Option<&[f64]> {
        match self {
            TensorData::F64(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_i32(&self) -> Option<&[i32]> {
        match self {
            TensorData::I32(v) => Some(v),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub tensors: BTreeMap<String, Entry>,
    pub meta: BTreeMap<String, serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct IndexEntry {
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
}

impl Container {
    pub fn insert_f32(&mut self, name: &str, shape: &[usize], data: Vec<f32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(
            name.to_string(),
            Entry {
                shape: shape.to_vec(),
                data: TensorData::F32(data),
            },
        );
    }

    pub fn insert_f64(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(
            name.to_string(),
            Entry {
                shape: shape.to_vec(),
                data: TensorData::F64(data),
            },
        );
    }

    pub fn insert_i32(&mut self, name: &str, shape: &[usize], data: Vec<i32>) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.insert(
            name.to_string(),
            Entry {
                shape: shape.to_vec(),
                data: TensorData::I32(data),
            },
        );
    }

    pub fn f32(&self, name: &str) -> Result<(&[usize], &[f32])> {
        let e = self.entry(name)?;
        let d = e
            .data
            .as_f32()
            .ok_or_else(|| Error::invalid("container", format!("tensor '{name}' is not f32")))?;
        Ok((&e.shape, d))
    }

    pub fn f64(&self, name: &str) -> Result<(&[usize], &[f64])> {
        let e = self.entry(name)?;
        let d = e
            .data
            .as_f64()
            .ok_or_else(|| Error::invalid("container", format!("tensor '{name}' is not f64")))?;
        Ok((&e.shape, d))
    }

    pub fn i32(&self, name: &str) -> Result<(&[usize], &[i32])> {
        let e = self.entry(name)?;
        let d = e
            .data
            .as_i32()
            .ok_or_else(|| Error::invalid("container", format!("tensor '{name}' is not i32")))?;
        Ok((&e.shape, d))
    }

    fn entry(&self, name: &str) -> Result<&Entry> {
        self.tensors
            .get(name)
            .ok_or_else(|| Error::invalid("container", format!("missing tensor '{name}'")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut index = BTreeMap::<String, serde_json::Value>::new();
        let mut offset = 0u64;
        for (name, e) in &self.tensors {
            index.insert(
                name.clone(),
                serde_json::to_value(IndexEntry {
                    shape: e.shape.clone(),
                    dtype: e.data.dtype().to_string(),
                    byte_offset: offset,
                })
                .unwrap(),
            );
            offset += (e.data.elem_bytes() * e.data.len()) as u64;
        }
        for (k, v) in &self.meta {
            index.insert(k.clone(), v.clone());
        }

        let mut out = Vec::with_capacity(offset as usize + 1024);
        serde_json::to_writer(&mut out, &index).map_err(|e| {
            Error::invalid("container index", e.to_string())
        })?;
        out.push(b'\n');
        for e in self.tensors.values() {
            match &e.data {
                TensorData::F32(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorData::F64(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
                TensorData::I32(v) => {
                    for x in v {
                        out.extend_from_slice(&x.to_le_bytes());
                    }
                }
            }
        }
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&out).map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Container> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut stream =
            serde_json::Deserializer::from_slice(&bytes).into_iter::<BTreeMap<String, serde_json::Value>>();
        let index = stream
            .next()
            .ok_or_else(|| Error::invalid("container", format!("{}: empty file", path.display())))?
            .map_err(|e| Error::invalid("container", format!("{}: bad index: {e}", path.display())))?;
        let mut blob_start = stream.byte_offset();
        if bytes.get(blob_start) == Some(&b'\n') {
            blob_start += 1;
        }
        let blob = &bytes[blob_start..];

        let mut container = Container::default();
        for (name, value) in index {
            if name.starts_with("__") {
                container.meta.insert(name, value);
                continue;
            }
            let ie: IndexEntry = serde_json::from_value(value).map_err(|e| {
                Error::invalid("container", format!("{}: tensor '{name}': {e}", path.display()))
            })?;
            let count: usize = ie.shape.iter().product();
            let elem = match ie.dtype.as_str() {
                "f64" => 8,
                _ => 4,
            };
            let start = ie.byte_offset as usize;
            let end = start + elem * count;
            if end > blob.len() {
                return Err(Error::invalid(
                    "container",
                    format!(
                        "{}: tensor '{name}' spans bytes {start}..{end} but blob has {}",
                        path.display(),
                        blob.len()
                    ),
                ));
            }
            let chunk = &blob[start..end];
            let data = match ie.dtype.as_str() {
                "f32" => TensorData::F32(
                    chunk
                        .chunks_exact(4)
                        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect(),
                ),
                "f64" => TensorData::F64(
                    chunk
                        .chunks_exact(8)
                        .map(|b| f64::from_le_bytes([b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7]]))
                        .collect(),
                ),
                "i32" => TensorData::I32(
                    chunk
                        .chunks_exact(4)
                        .map(|b| i32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                        .collect(),
                ),
                other => {
                    return Err(Error::invalid(
                        "container",
                        format!("{}: tensor '{name}' has unknown dtype '{other}'", path.display()),
                    ))
                }
            };
            container.tensors.insert(
                name,
                Entry {
                    shape: ie.shape,
                    data,
                },
            );
        }
        Ok(container)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_tensors_and_meta() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let mut c = Container::default();
        c.insert_f32("verts", &[2, 3], vec![1.0, 2.0, 3.0, -4.0, 5.5, 0.25]);
        c.insert_i32("labels", &[4], vec![0, 3, 6, 2]);
        c.insert_f64("moments", &[3], vec![1.0 / 3.0, f64::MIN_POSITIVE, -7.25]);
        c.meta
            .insert("__step__".into(), serde_json::json!(120));
        c.save(&path).unwrap();

        let back = Container::load(&path).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.f32("verts").unwrap().0, &[2, 3]);
        assert_eq!(back.i32("labels").unwrap().1, &[0, 3, 6, 2]);
        assert_eq!(back.f64("moments").unwrap().1[0], 1.0 / 3.0);
        assert_eq!(back.meta["__step__"], serde_json::json!(120));
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.bin"), dir.path().join("b.bin"));
        let mut c = Container::default();
        c.insert_f32("b", &[3], vec![0.1, -0.2, 0.3]);
        c.insert_f32("a", &[2], vec![7.0, 8.0]);
        c.save(&p1).unwrap();
        Container::load(&p1).unwrap().save(&p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_blob_is_rejected_by_name() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let mut c = Container::default();
        c.insert_f32("big", &[8], vec![1.0; 8]);
        c.save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 4]).unwrap();
        let err = Container::load(&path).unwrap_err();
        assert!(err.to_string().contains("big"), "{err}");
    }

    #[test]
    fn missing_tensor_is_named() {
        let c = Container::default();
        let err = c.f32("absent").unwrap_err();
        assert!(err.to_string().contains("absent"));
    }
}

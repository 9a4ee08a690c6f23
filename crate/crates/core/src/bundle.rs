//! Flat little-endian `f64` tensor files with a JSON sidecar describing the
//! layout.

use std::fs;
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset of the first element in the binary stream.
    pub offset: usize,
}

/// The sidecar path paired with a binary stream: `model.bin` -> `model.json`.
pub fn sidecar_path(bin: &Path) -> PathBuf {
    bin.with_extension("json")
}

pub fn write_tensors<'a, I>(bin: &Path, tensors: I) -> io::Result<Vec<TensorEntry>>
where
    I: IntoIterator<Item = (&'a str, &'a Tensor)>,
{
    let mut entries = Vec::new();
    let mut bytes = Vec::new();
    for (name, t) in tensors {
        entries.push(TensorEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            offset: bytes.len(),
        });
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(bin)?;
    f.write_all(&bytes)?;
    Ok(entries)
}

pub fn read_f64_stream(bin: &Path) -> io::Result<Vec<f64>> {
    let mut bytes = Vec::new();
    fs::File::open(bin)?.read_to_end(&mut bytes)?;
    if bytes.len() % 8 != 0 {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("{}: length {} is not a multiple of 8", bin.display(), bytes.len()),
        ));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect())
}

pub fn read_tensors(bin: &Path, entries: &[TensorEntry]) -> io::Result<Vec<Tensor>> {
    let stream = read_f64_stream(bin)?;
    entries
        .iter()
        .map(|e| {
            let len: usize = e.shape.iter().product();
            let start = e.offset / 8;
            if e.offset % 8 != 0 || start + len > stream.len() {
                return Err(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("tensor {} lies outside {}", e.name, bin.display()),
                ));
            }
            Ok(Tensor::new(e.shape.clone(), stream[start..start + len].to_vec()))
        })
        .collect()
}

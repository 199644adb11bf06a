//! Checkpoint archives: a named map of dense f32 tensors.
//!
//! The on-disk layout is the safetensors container: an 8-byte little-endian
//! header length, a UTF-8 JSON header mapping each name to
//! `{dtype, shape, data_offsets}`, then the raw little-endian payload. Files are
//! always written with names in lexicographic order, contiguous payload, and a
//! header padded with spaces to a multiple of 8 bytes, so identical archives
//! produce identical bytes.
//!
//! F16 and BF16 tensors are widened to f32 on load; the conversion is recorded
//! in the [`LoadReport`].

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::io::{atomic_write, sha256_hex};

const METADATA_KEY: &str = "__metadata__";

/// A dense row-major tensor of f32 values.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::InvalidArgument(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::InvalidArgument(format!(
                "shape {shape:?} holds {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn from_f64(shape: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(shape, data.iter().map(|&x| x as f32).collect())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_matrix(&self) -> bool {
        self.shape.len() == 2
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&x| x as f64).collect()
    }
}

/// Per-load notes (currently only dtype widenings).
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LoadReport {
    /// `(tensor name, original dtype)` for every tensor converted to f32.
    pub converted: Vec<(String, String)>,
}

/// Named tensors, iterated in lexicographic name order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorArchive {
    entries: BTreeMap<String, Tensor>,
    metadata: BTreeMap<String, String>,
}

impl TensorArchive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Insert a tensor, rejecting duplicate names and non-finite values.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if let Some(index) = tensor.data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { name, index });
        }
        if self.entries.contains_key(&name) {
            return Err(Error::DuplicateName(name));
        }
        self.entries.insert(name, tensor);
        Ok(())
    }

    /// Replace (or insert) a tensor without the duplicate check.
    pub fn set(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.entries.insert(name.into(), tensor);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn metadata(&self) -> &BTreeMap<String, String> {
        &self.metadata
    }

    pub fn set_metadata(&mut self, key: impl Into<String>, value: impl Into<String>) {
        self.metadata.insert(key.into(), value.into());
    }

    /// Check that `other` has exactly the same names and shapes.
    pub fn check_aligned(&self, other: &TensorArchive) -> Result<()> {
        let mut problems = Vec::new();
        for (name, t) in &self.entries {
            match other.entries.get(name) {
                None => problems.push(format!("`{name}` missing from second archive")),
                Some(o) if o.shape != t.shape => problems.push(format!(
                    "`{name}` shape {:?} vs {:?}",
                    t.shape, o.shape
                )),
                Some(_) => {}
            }
        }
        for name in other.entries.keys() {
            if !self.entries.contains_key(name) {
                problems.push(format!("`{name}` missing from first archive"));
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Misaligned(problems.join("; ")))
        }
    }

    /// Serialize to the container format.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = String::from("{");
        let mut first = true;
        if !self.metadata.is_empty() {
            header.push_str(&format!(
                "\"{METADATA_KEY}\":{}",
                serde_json::to_string(&self.metadata).expect("string map serializes")
            ));
            first = false;
        }
        let mut offset = 0usize;
        for (name, t) in &self.entries {
            if !first {
                header.push(',');
            }
            first = false;
            let end = offset + 4 * t.numel();
            let entry = HeaderEntryOut {
                dtype: "F32",
                shape: &t.shape,
                data_offsets: [offset, end],
            };
            header.push_str(&serde_json::to_string(name).expect("string serializes"));
            header.push(':');
            header.push_str(&serde_json::to_string(&entry).expect("entry serializes"));
            offset = end;
        }
        header.push('}');
        while header.len() % 8 != 0 {
            header.push(' ');
        }

        let mut out = Vec::with_capacity(8 + header.len() + offset);
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for t in self.entries.values() {
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    /// Parse the container format.
    pub fn from_bytes(bytes: &[u8]) -> Result<(Self, LoadReport)> {
        if bytes.len() < 8 {
            return Err(Error::Format("file shorter than the 8-byte header prefix".into()));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let header_end = 8usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Format(format!("header length {header_len} exceeds file size")))?;
        let header_str = std::str::from_utf8(&bytes[8..header_end])
            .map_err(|e| Error::Format(format!("header is not UTF-8: {e}")))?;
        let header: RawHeader = serde_json::from_str(header_str.trim_end())
            .map_err(|e| Error::Format(format!("header JSON: {e}")))?;
        let payload = &bytes[header_end..];

        if let Some(dup) = header.duplicate {
            return Err(Error::DuplicateName(dup));
        }

        let mut ranges: Vec<(usize, usize, &str)> = Vec::with_capacity(header.entries.len());
        let mut archive = TensorArchive {
            entries: BTreeMap::new(),
            metadata: header.metadata.unwrap_or_default(),
        };
        let mut report = LoadReport::default();
        for (name, entry) in &header.entries {
            let [start, end] = entry.data_offsets;
            if start > end || end > payload.len() {
                return Err(Error::Format(format!(
                    "tensor `{name}`: byte range [{start}, {end}) outside payload of {} bytes",
                    payload.len()
                )));
            }
            let width = match entry.dtype.as_str() {
                "F32" => 4,
                "F16" | "BF16" => 2,
                other => {
                    return Err(Error::Format(format!(
                        "tensor `{name}`: unsupported dtype {other}"
                    )))
                }
            };
            if entry.shape.contains(&0) {
                return Err(Error::Format(format!(
                    "tensor `{name}`: zero dimension in shape {:?}",
                    entry.shape
                )));
            }
            let numel: usize = entry.shape.iter().product();
            if numel * width != end - start {
                return Err(Error::ByteLength {
                    name: name.clone(),
                    shape: entry.shape.clone(),
                    expected: numel * width,
                    actual: end - start,
                });
            }
            ranges.push((start, end, name));
            let raw = &payload[start..end];
            let data: Vec<f32> = match width {
                4 => raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect(),
                _ => {
                    report.converted.push((name.clone(), entry.dtype.clone()));
                    raw.chunks_exact(2)
                        .map(|c| {
                            let bits = u16::from_le_bytes([c[0], c[1]]);
                            if entry.dtype == "F16" {
                                half::f16::from_bits(bits).to_f32()
                            } else {
                                half::bf16::from_bits(bits).to_f32()
                            }
                        })
                        .collect()
                }
            };
            archive.insert(
                name.clone(),
                Tensor {
                    shape: entry.shape.clone(),
                    data,
                },
            )?;
        }

        ranges.sort_unstable();
        for w in ranges.windows(2) {
            if w[1].0 < w[0].1 {
                return Err(Error::Format(format!(
                    "byte ranges of `{}` and `{}` overlap",
                    w[0].2, w[1].2
                )));
            }
        }
        Ok((archive, report))
    }

    /// SHA-256 of the canonical serialization.
    pub fn digest(&self) -> String {
        sha256_hex(&self.to_bytes())
    }
}

pub fn load_archive(path: &Path) -> Result<TensorArchive> {
    load_archive_with_report(path).map(|(a, _)| a)
}

pub fn load_archive_with_report(path: &Path) -> Result<(TensorArchive, LoadReport)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (archive, report) = TensorArchive::from_bytes(&bytes)?;
    for (name, dtype) in &report.converted {
        log::info!("{}: widened `{name}` from {dtype} to F32", path.display());
    }
    Ok((archive, report))
}

pub fn write_archive(archive: &TensorArchive, path: &Path) -> Result<()> {
    atomic_write(path, &archive.to_bytes())
}

#[derive(Serialize)]
struct HeaderEntryOut<'a> {
    dtype: &'static str,
    shape: &'a [usize],
    data_offsets: [usize; 2],
}

#[derive(Deserialize)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [usize; 2],
}

/// Header parsed in file order so duplicate keys are detected instead of
/// silently collapsed.
struct RawHeader {
    entries: Vec<(String, HeaderEntry)>,
    metadata: Option<BTreeMap<String, String>>,
    duplicate: Option<String>,
}

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct HeaderVisitor;

        impl<'de> Visitor<'de> for HeaderVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a tensor header object")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> std::result::Result<RawHeader, A::Error> {
                let mut entries = Vec::new();
                let mut metadata = None;
                let mut seen = std::collections::HashSet::new();
                let mut duplicate = None;
                while let Some(key) = map.next_key::<String>()? {
                    if key == METADATA_KEY {
                        metadata = Some(map.next_value()?);
                        continue;
                    }
                    let entry: HeaderEntry = map.next_value()?;
                    if !seen.insert(key.clone()) && duplicate.is_none() {
                        duplicate = Some(key.clone());
                    }
                    entries.push((key, entry));
                }
                Ok(RawHeader {
                    entries,
                    metadata,
                    duplicate,
                })
            }
        }

        deserializer.deserialize_map(HeaderVisitor)
    }
}

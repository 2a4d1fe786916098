//! Loading of named weight tensors.
//!
//! The on-disk layout is the safetensors container:
//!
//! ```text
//! [0..8)        u64 little-endian header length N
//! [8..8+N)      UTF-8 JSON object: name -> {"dtype", "shape", "data_offsets": [begin, end]}
//! [8+N..)       raw little-endian row-major element data
//! ```
//!
//! Offsets are relative to the start of the data section. An optional
//! `__metadata__` entry (string to string) is accepted and ignored. Only
//! `F32` and `F64` tensors are supported; everything is widened to `f64`.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::de::{Deserializer, MapAccess, Visitor};
use serde::Deserialize;
use serde_json::Value;

use crate::error::{Error, Result};

const METADATA_KEY: &str = "__metadata__";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn parse(name: &str, tag: &str) -> Result<Self> {
        match tag {
            "F32" => Ok(Dtype::F32),
            "F64" => Ok(Dtype::F64),
            other => Err(Error::UnsupportedDtype {
                name: name.to_string(),
                dtype: other.to_string(),
            }),
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

impl fmt::Display for Dtype {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Dtype::F32 => f.write_str("F32"),
            Dtype::F64 => f.write_str("F64"),
        }
    }
}

/// A single named tensor. `dtype` records the on-disk element type; `data`
/// is always held at 64-bit precision.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl TensorRecord {
    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct TensorArchive {
    records: BTreeMap<String, TensorRecord>,
    source_path: PathBuf,
}

impl TensorArchive {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    pub fn from_bytes(bytes: &[u8], source_path: impl Into<PathBuf>) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::MalformedHeader(format!(
                "file is {} bytes, too short for the 8-byte length prefix",
                bytes.len()
            )));
        }
        let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes"));
        let header_end = 8u64
            .checked_add(header_len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or_else(|| {
                Error::MalformedHeader(format!(
                    "header length {header_len} exceeds file size {}",
                    bytes.len()
                ))
            })? as usize;
        let header = std::str::from_utf8(&bytes[8..header_end])
            .map_err(|e| Error::MalformedHeader(format!("header is not UTF-8: {e}")))?;
        let entries: HeaderEntries =
            serde_json::from_str(header).map_err(|e| Error::MalformedHeader(e.to_string()))?;

        let data = &bytes[header_end..];
        let mut specs = Vec::with_capacity(entries.0.len());
        let mut seen = std::collections::BTreeSet::new();
        for (name, value) in entries.0 {
            if !seen.insert(name.clone()) {
                return Err(Error::MalformedHeader(format!(
                    "duplicate tensor name `{name}`"
                )));
            }
            if name == METADATA_KEY {
                check_metadata(&value)?;
                continue;
            }
            specs.push(TensorSpec::parse(name, &value)?);
        }

        check_ranges(&specs, data.len() as u64)?;

        let records = specs
            .into_iter()
            .map(|spec| {
                let record = spec.materialize(data)?;
                Ok((record.name.clone(), record))
            })
            .collect::<Result<BTreeMap<_, _>>>()?;

        Ok(TensorArchive {
            records,
            source_path: source_path.into(),
        })
    }

    pub fn source_path(&self) -> &Path {
        &self.source_path
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&TensorRecord> {
        self.records.get(name)
    }

    /// Records in name order.
    pub fn records(&self) -> impl Iterator<Item = &TensorRecord> {
        self.records.values()
    }

    pub fn as_conv_kernel(&self, name: &str) -> Result<ConvKernelSet> {
        let record = self
            .get(name)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))?;
        if record.rank() != 4 {
            return Err(Error::NotConvKernel {
                name: name.to_string(),
                shape: record.shape.clone(),
            });
        }
        let dims = [
            record.shape[0],
            record.shape[1],
            record.shape[2],
            record.shape[3],
        ];
        ConvKernelSet::new(name, dims, record.data.clone())
    }
}

/// One convolution layer's weights, laid out as (F2, F1, K1, K2): F2 output
/// kernels, each made of F1 input-channel slices of K1 x K2.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvKernelSet {
    pub layer_id: String,
    pub f2: usize,
    pub f1: usize,
    pub k1: usize,
    pub k2: usize,
    weights: Vec<f64>,
}

impl ConvKernelSet {
    pub fn new(layer_id: impl Into<String>, dims: [usize; 4], weights: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) {
            return Err(Error::InvalidDims(dims.to_vec()));
        }
        let [f2, f1, k1, k2] = dims;
        let expected = f2 * f1 * k1 * k2;
        if weights.len() != expected {
            return Err(Error::InvalidParameter(format!(
                "weights hold {} elements, dims {:?} need {}",
                weights.len(),
                dims,
                expected
            )));
        }
        Ok(ConvKernelSet {
            layer_id: layer_id.into(),
            f2,
            f1,
            k1,
            k2,
            weights,
        })
    }

    pub fn dims(&self) -> [usize; 4] {
        [self.f2, self.f1, self.k1, self.k2]
    }

    pub fn slice_len(&self) -> usize {
        self.k1 * self.k2
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// All F1 slices of output kernel `i`, contiguous.
    pub fn kernel(&self, i: usize) -> &[f64] {
        let len = self.f1 * self.slice_len();
        &self.weights[i * len..(i + 1) * len]
    }

    /// The K1 x K2 slice of kernel `i` at input channel `k`.
    pub fn slice(&self, i: usize, k: usize) -> &[f64] {
        let n = self.slice_len();
        let start = (i * self.f1 + k) * n;
        &self.weights[start..start + n]
    }

    /// Single-element slices carry no spatial structure.
    pub fn is_pointwise(&self) -> bool {
        self.slice_len() == 1
    }
}

struct TensorSpec {
    name: String,
    dtype: Dtype,
    shape: Vec<usize>,
    begin: u64,
    end: u64,
}

impl TensorSpec {
    fn parse(name: String, value: &Value) -> Result<Self> {
        let malformed = |msg: &str| Error::MalformedHeader(format!("tensor `{name}`: {msg}"));
        let obj = value
            .as_object()
            .ok_or_else(|| malformed("entry is not an object"))?;
        if let Some(key) = obj
            .keys()
            .find(|k| !matches!(k.as_str(), "dtype" | "shape" | "data_offsets"))
        {
            return Err(malformed(&format!("unknown field `{key}`")));
        }
        let dtype = obj
            .get("dtype")
            .and_then(Value::as_str)
            .ok_or_else(|| malformed("missing string `dtype`"))?;
        let dtype = Dtype::parse(&name, dtype)?;
        let shape = obj
            .get("shape")
            .and_then(Value::as_array)
            .ok_or_else(|| malformed("missing array `shape`"))?
            .iter()
            .map(|d| {
                d.as_u64()
                    .filter(|&d| d > 0)
                    .map(|d| d as usize)
                    .ok_or_else(|| malformed("shape entries must be positive integers"))
            })
            .collect::<Result<Vec<_>>>()?;
        let offsets = obj
            .get("data_offsets")
            .and_then(Value::as_array)
            .filter(|a| a.len() == 2)
            .ok_or_else(|| malformed("`data_offsets` must be [begin, end]"))?;
        let begin = offsets[0]
            .as_u64()
            .ok_or_else(|| malformed("offsets must be non-negative integers"))?;
        let end = offsets[1]
            .as_u64()
            .ok_or_else(|| malformed("offsets must be non-negative integers"))?;
        if end < begin {
            return Err(malformed("data_offsets end precedes begin"));
        }
        Ok(TensorSpec {
            name,
            dtype,
            shape,
            begin,
            end,
        })
    }

    fn materialize(self, data: &[u8]) -> Result<TensorRecord> {
        let count: u64 = self.shape.iter().map(|&d| d as u64).product();
        let expected = count * self.dtype.size() as u64;
        let actual = self.end - self.begin;
        if expected != actual {
            return Err(Error::SizeMismatch {
                name: self.name,
                expected,
                actual,
            });
        }
        let raw = &data[self.begin as usize..self.end as usize];
        let values: Vec<f64> = match self.dtype {
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect(),
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        };
        if let Some(index) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                name: self.name,
                index,
            });
        }
        Ok(TensorRecord {
            name: self.name,
            dtype: self.dtype,
            shape: self.shape,
            data: values,
        })
    }
}

fn check_metadata(value: &Value) -> Result<()> {
    let ok = value
        .as_object()
        .is_some_and(|m| m.values().all(Value::is_string));
    if ok {
        Ok(())
    } else {
        Err(Error::MalformedHeader(
            "`__metadata__` must map strings to strings".to_string(),
        ))
    }
}

fn check_ranges(specs: &[TensorSpec], available: u64) -> Result<()> {
    for spec in specs {
        if spec.end > available {
            return Err(Error::RangeOutOfBounds {
                name: spec.name.clone(),
                begin: spec.begin,
                end: spec.end,
                available,
            });
        }
    }
    let mut order: Vec<&TensorSpec> = specs.iter().filter(|s| s.end > s.begin).collect();
    order.sort_by_key(|s| (s.begin, s.end));
    for pair in order.windows(2) {
        if pair[1].begin < pair[0].end {
            return Err(Error::OverlappingRanges {
                first: pair[0].name.clone(),
                second: pair[1].name.clone(),
            });
        }
    }
    Ok(())
}

/// Header object entries in file order, keeping duplicates so they can be
/// rejected.
struct HeaderEntries(Vec<(String, Value)>);

impl<'de> Deserialize<'de> for HeaderEntries {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct EntriesVisitor;

        impl<'de> Visitor<'de> for EntriesVisitor {
            type Value = HeaderEntries;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str("a JSON object of tensor descriptors")
            }

            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<Self::Value, A::Error> {
                let mut entries = Vec::new();
                while let Some(entry) = map.next_entry::<String, Value>()? {
                    entries.push(entry);
                }
                Ok(HeaderEntries(entries))
            }
        }

        deserializer.deserialize_map(EntriesVisitor)
    }
}

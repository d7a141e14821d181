//! Tensor container: one JSON header line, then a little-endian payload.
//!
//! ```text
//! {"format":"fstmamba-container","version":1,"kind":"dfnc","dtype":"f32","dims":[S,N,N,T],...}\n
//! <S*N*N*T little-endian f32 values, row-major>
//! ```
//!
//! Checkpoints use the same layout with `dtype: "f64"` and a list of named
//! tensors whose payloads are concatenated in order.

use std::fs;
use std::io::Write;
use std::path::Path;

use fstmamba_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const FORMAT: &str = "fstmamba-container";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    /// `[S, T_total, N]`
    TimeSeries,
    /// `[S]`
    Labels,
    /// `[S, N, N, T]`
    Dfnc,
    /// `[S, N, N, T]` attributions, or `[1, N, N, 1]` for a cohort mean.
    Attribution,
    Checkpoint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub kind: Kind,
    pub dtype: Dtype,
    pub dims: Vec<usize>,
    #[serde(default)]
    pub atlas: String,
    /// One label per sample, when known.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub labels: Vec<f64>,
    #[serde(default)]
    pub provenance: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tr_seconds: Option<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tensors: Vec<TensorEntry>,
    /// Free-form metadata (checkpoint manifest, window settings, ...).
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub meta: serde_json::Value,
}

impl Header {
    pub fn new(kind: Kind, dims: &[usize]) -> Self {
        Self {
            format: FORMAT.into(),
            version: FORMAT_VERSION,
            kind,
            dtype: if kind == Kind::Checkpoint { Dtype::F64 } else { Dtype::F32 },
            dims: dims.to_vec(),
            atlas: String::new(),
            labels: Vec::new(),
            provenance: String::new(),
            tr_seconds: None,
            tensors: Vec::new(),
            meta: serde_json::Value::Null,
        }
    }

    /// Number of payload values the header announces.
    pub fn value_count(&self) -> usize {
        if self.tensors.is_empty() {
            self.dims.iter().product()
        } else {
            self.tensors.iter().map(|t| t.dims.iter().product::<usize>()).sum()
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub header: Header,
    pub values: Vec<f64>,
}

impl Container {
    pub fn from_tensor(mut header: Header, t: &Tensor) -> Self {
        header.dims = t.shape().to_vec();
        Self { header, values: t.data().to_vec() }
    }

    /// The payload as one tensor of shape `dims`.
    pub fn tensor(&self) -> Result<Tensor> {
        Ok(Tensor::from_vec(&self.header.dims, self.values.clone())?)
    }

    /// Named tensors of a multi-tensor container.
    pub fn named_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        let mut out = Vec::with_capacity(self.header.tensors.len());
        let mut at = 0;
        for e in &self.header.tensors {
            let n: usize = e.dims.iter().product();
            out.push((e.name.clone(), Tensor::from_vec(&e.dims, self.values[at..at + n].to_vec())?));
            at += n;
        }
        Ok(out)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = serde_json::to_vec(&self.header)?;
        out.push(b'\n');
        out.reserve(self.values.len() * self.header.dtype.width());
        match self.header.dtype {
            Dtype::F32 => self.values.iter().for_each(|v| out.extend_from_slice(&(*v as f32).to_le_bytes())),
            Dtype::F64 => self.values.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: String| Error::Container { path: path.to_path_buf(), msg };
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| bad("no header line".into()))?;
        let header: Header = serde_json::from_slice(&bytes[..nl]).map_err(|e| bad(format!("header: {e}")))?;
        if header.format != FORMAT {
            return Err(bad(format!("format '{}' is not {FORMAT}", header.format)));
        }
        if header.version != FORMAT_VERSION {
            return Err(bad(format!("unsupported version {}", header.version)));
        }
        let payload = &bytes[nl + 1..];
        let n = header.value_count();
        let w = header.dtype.width();
        if payload.len() != n * w {
            return Err(bad(format!("payload holds {} bytes, header announces {n} values of {w} bytes", payload.len())));
        }
        let values = match header.dtype {
            Dtype::F32 => payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect(),
            Dtype::F64 => payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
        };
        Ok(Self { header, values })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(Error::io(path))?;
        Self::from_bytes(&bytes, path)
    }

    /// Reads `path` and checks its kind.
    pub fn read_kind(path: &Path, kind: Kind) -> Result<Self> {
        let c = Self::read(path)?;
        if c.header.kind != kind {
            return Err(Error::Container {
                path: path.to_path_buf(),
                msg: format!("expected a {kind:?} container, found {:?}", c.header.kind),
            });
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }
}

/// Writes through a temporary sibling and renames, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(Error::io(&tmp))?;
    f.write_all(bytes).map_err(Error::io(&tmp))?;
    f.sync_all().map_err(Error::io(&tmp))?;
    drop(f);
    fs::rename(&tmp, path).map_err(Error::io(path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_both_dtypes() {
        let t = Tensor::from_vec(&[2, 3], vec![0.5, -1.25, 3.0, 1e-3, 0.0, 7.0]).unwrap();
        let mut h = Header::new(Kind::Dfnc, &[]);
        h.atlas = "uniform-3x1".into();
        h.labels = vec![0.0, 1.0];
        let c = Container::from_tensor(h, &t);
        let back = Container::from_bytes(&c.to_bytes().unwrap(), Path::new("x")).unwrap();
        assert_eq!(back.header, c.header);
        // f32 payload: exact for these values except 1e-3
        assert_eq!(back.values[0], 0.5);
        assert!((back.values[3] - 1e-3).abs() < 1e-10);

        let mut h = Header::new(Kind::Checkpoint, &[]);
        h.tensors = vec![TensorEntry { name: "a".into(), dims: vec![2] }, TensorEntry { name: "b".into(), dims: vec![1] }];
        let c = Container { header: h, values: vec![0.1, 0.2, std::f64::consts::PI] };
        let back = Container::from_bytes(&c.to_bytes().unwrap(), Path::new("x")).unwrap();
        assert_eq!(back, c);
        let named = back.named_tensors().unwrap();
        assert_eq!(named[1].0, "b");
        assert_eq!(named[1].1.data(), &[std::f64::consts::PI]);
    }

    #[test]
    fn rejects_truncation_and_foreign_headers() {
        let c = Container::from_tensor(Header::new(Kind::Labels, &[]), &Tensor::zeros(&[4]));
        let bytes = c.to_bytes().unwrap();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1], Path::new("x")).is_err());
        assert!(Container::from_bytes(b"{\"format\":\"other\"}\n", Path::new("x")).is_err());
        assert!(Container::from_bytes(b"no newline", Path::new("x")).is_err());
    }
}

//! KSTN: the binary tensor exchange format of the runner protocol.
//!
//! Layout (all integers little-endian):
//!
//! | bytes        | content                                   |
//! |--------------|-------------------------------------------|
//! | 4            | magic `KSTN`                              |
//! | 1            | dtype code: 0=f32, 1=f64, 2=i32, 3=i64    |
//! | 8            | rank `r` as u64                           |
//! | 8·r          | dims as u64                               |
//! | n·size(dtype)| row-major data, `n` = product of dims     |
//!
//! Trailing bytes are an error. Rank 0 is a scalar holding one element.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsutil::write_atomic;

pub const MAGIC: &[u8; 4] = b"KSTN";

#[derive(Debug, Error)]
pub enum KstnError {
    #[error("malformed tensor file: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F32,
    F64,
    I32,
    I64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
            DType::I32 => 2,
            DType::I64 => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => DType::F32,
            1 => DType::F64,
            2 => DType::I32,
            3 => DType::I64,
            _ => return None,
        })
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 | DType::I32 => 4,
            DType::F64 | DType::I64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    I64(Vec<i64>),
}

impl TensorData {
    pub fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
            TensorData::I32(_) => DType::I32,
            TensorData::I64(_) => DType::I64,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I32(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Element `i` widened to f64.
    pub fn get_f64(&self, i: usize) -> f64 {
        match self {
            TensorData::F32(v) => v[i] as f64,
            TensorData::F64(v) => v[i],
            TensorData::I32(v) => v[i] as f64,
            TensorData::I64(v) => v[i] as f64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<u64>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<u64>, data: TensorData) -> Result<Self, KstnError> {
        let n = element_count(&dims)?;
        if n != data.len() {
            return Err(KstnError::Format(format!(
                "dims {dims:?} hold {n} elements but {} were given",
                data.len()
            )));
        }
        Ok(Tensor { dims, data })
    }

    pub fn f32(dims: Vec<u64>, data: Vec<f32>) -> Result<Self, KstnError> {
        Self::new(dims, TensorData::F32(data))
    }

    pub fn f64(dims: Vec<u64>, data: Vec<f64>) -> Result<Self, KstnError> {
        Self::new(dims, TensorData::F64(data))
    }

    pub fn dtype(&self) -> DType {
        self.data.dtype()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let dt = self.dtype();
        let mut out = Vec::with_capacity(13 + 8 * self.dims.len() + dt.size() * self.data.len());
        out.extend_from_slice(MAGIC);
        out.push(dt.code());
        out.extend_from_slice(&(self.dims.len() as u64).to_le_bytes());
        for d in &self.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &self.data {
            TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, KstnError> {
        let fmt = |m: String| KstnError::Format(m);
        if bytes.len() < 13 || &bytes[..4] != MAGIC {
            return Err(fmt("missing KSTN magic".into()));
        }
        let dt = DType::from_code(bytes[4]).ok_or_else(|| fmt(format!("unknown dtype code {}", bytes[4])))?;
        let rank = u64::from_le_bytes(bytes[5..13].try_into().unwrap());
        let header_end = rank
            .checked_mul(8)
            .and_then(|r| r.checked_add(13))
            .filter(|&e| e <= bytes.len() as u64)
            .ok_or_else(|| fmt(format!("rank {rank} exceeds file size")))? as usize;
        let dims: Vec<u64> = bytes[13..header_end]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let n = element_count(&dims)?;
        let payload = &bytes[header_end..];
        let expected = n.checked_mul(dt.size()).ok_or_else(|| fmt("tensor too large".into()))?;
        if payload.len() != expected {
            return Err(fmt(format!(
                "dims {dims:?} of {dt:?} need {expected} data bytes, found {}",
                payload.len()
            )));
        }
        let data = match dt {
            DType::F32 => TensorData::F32(
                payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::F64 => TensorData::F64(
                payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::I32 => TensorData::I32(
                payload.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
            DType::I64 => TensorData::I64(
                payload.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect(),
            ),
        };
        Ok(Tensor { dims, data })
    }

    pub fn read(path: &Path) -> Result<Self, KstnError> {
        let bytes = fs::read(path).map_err(|source| KstnError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_bytes(&bytes)
    }

    pub fn write(&self, path: &Path) -> Result<(), KstnError> {
        write_atomic(path, &self.to_bytes()).map_err(|source| KstnError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

fn element_count(dims: &[u64]) -> Result<usize, KstnError> {
    dims.iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .and_then(|n| usize::try_from(n).ok())
        .ok_or_else(|| KstnError::Format(format!("dims {dims:?} overflow")))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Tolerance {
    #[serde(default = "Tolerance::default_atol")]
    pub atol: f64,
    #[serde(default = "Tolerance::default_rtol")]
    pub rtol: f64,
}

impl Tolerance {
    fn default_atol() -> f64 {
        1e-4
    }

    fn default_rtol() -> f64 {
        1e-4
    }

    pub fn new(atol: f64, rtol: f64) -> Self {
        Tolerance { atol, rtol }
    }
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance {
            atol: Self::default_atol(),
            rtol: Self::default_rtol(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub pass: bool,
    /// Absent when the tensors are not comparable (shape or dtype mismatch).
    pub max_abs_err: Option<f64>,
    /// Over elements with a nonzero reference value.
    pub max_rel_err: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
}

/// Elementwise `|a - b| <= atol + rtol * |b|`; `b` is the reference.
///
/// NaN on either side fails the element.
pub fn compare(a: &Tensor, b: &Tensor, tol: Tolerance) -> Comparison {
    if a.dtype() != b.dtype() {
        return Comparison {
            pass: false,
            max_abs_err: None,
            max_rel_err: None,
            reason: Some(format!("dtype mismatch: got {:?}, expected {:?}", a.dtype(), b.dtype())),
        };
    }
    if a.dims != b.dims {
        return Comparison {
            pass: false,
            max_abs_err: None,
            max_rel_err: None,
            reason: Some(format!("shape mismatch: got {:?}, expected {:?}", a.dims, b.dims)),
        };
    }
    let mut pass = true;
    let mut max_abs = 0.0f64;
    let mut max_rel = 0.0f64;
    let mut first_bad: Option<usize> = None;
    let mut bad = 0usize;
    for i in 0..a.data.len() {
        let (x, y) = (a.data.get_f64(i), b.data.get_f64(i));
        let diff = (x - y).abs();
        let ok = diff <= tol.atol + tol.rtol * y.abs();
        if !ok {
            pass = false;
            bad += 1;
            first_bad.get_or_insert(i);
        }
        if diff.is_nan() {
            max_abs = f64::NAN;
        } else if !max_abs.is_nan() {
            max_abs = max_abs.max(diff);
        }
        if y != 0.0 {
            let rel = diff / y.abs();
            if rel.is_nan() {
                max_rel = f64::NAN;
            } else if !max_rel.is_nan() {
                max_rel = max_rel.max(rel);
            }
        }
    }
    let reason = first_bad.map(|i| {
        format!(
            "{bad} of {} elements outside tolerance (atol={}, rtol={}); first at flat index {i}: got {}, expected {}",
            a.data.len(),
            tol.atol,
            tol.rtol,
            a.data.get_f64(i),
            b.data.get_f64(i)
        )
    });
    Comparison {
        pass,
        max_abs_err: Some(max_abs),
        max_rel_err: Some(max_rel),
        reason,
    }
}

pub fn compare_tensors(a: &Path, b: &Path, tol: Tolerance) -> Result<Comparison, KstnError> {
    Ok(compare(&Tensor::read(a)?, &Tensor::read(b)?, tol))
}

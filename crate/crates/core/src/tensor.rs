//! Dense N-dimensional value tensor and the `.tsr` container format:
//! a single JSON header line `{"dtype":...,"shape":[...]}` followed by the
//! flat little-endian payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::element::{Dtype, Element};
use crate::error::{CoreError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<E: Element> {
    shape: Vec<usize>,
    data: Vec<E>,
}

#[derive(Serialize, Deserialize)]
struct TsrHeader {
    dtype: Dtype,
    shape: Vec<usize>,
}

impl<E: Element> Tensor<E> {
    /// Build a tensor, checking that the extents are positive and match the
    /// payload length.
    pub fn new(shape: Vec<usize>, data: Vec<E>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(CoreError::ShapeMismatch(format!(
                "extents must be positive, got {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(CoreError::ShapeMismatch(format!(
                "shape {shape:?} holds {numel} elements but payload has {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![E::zero(); numel])
    }

    pub fn full(shape: Vec<usize>, value: E) -> Result<Self> {
        let numel: usize = shape.iter().product();
        Tensor::new(shape, vec![value; numel])
    }

    pub fn scalar(value: E) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[E] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [E] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<E> {
        self.data
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn scalar_value(&self) -> Result<E> {
        if self.is_scalar() {
            Ok(self.data[0])
        } else {
            Err(CoreError::ShapeMismatch(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn map(&self, f: impl Fn(E) -> E) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Error if any element is NaN or infinite.
    pub fn check_finite(&self, context: &str) -> Result<()> {
        for (i, &v) in self.data.iter().enumerate() {
            if !v.is_finite() {
                return Err(CoreError::NonFinite(format!(
                    "{context}: element {i} of shape {:?} is {v}",
                    self.shape
                )));
            }
        }
        Ok(())
    }

    pub fn cast<F: Element>(&self) -> Tensor<F> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| F::from_f64(v.to_f64())).collect(),
        }
    }

    /// Serialize into the `.tsr` container.
    pub fn write_tsr<W: Write>(&self, mut w: W) -> Result<()> {
        let header = TsrHeader {
            dtype: E::DTYPE,
            shape: self.shape.clone(),
        };
        let mut line = serde_json::to_vec(&header)?;
        line.push(b'\n');
        let mut payload = Vec::with_capacity(self.data.len() * E::DTYPE.byte_width());
        for &v in &self.data {
            v.write_le(&mut payload);
        }
        w.write_all(&line)?;
        w.write_all(&payload)?;
        Ok(())
    }

    pub fn save_tsr(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = File::create(path)?;
        let mut w = BufWriter::new(file);
        self.write_tsr(&mut w)?;
        w.flush()?;
        Ok(())
    }

    /// Deserialize a `.tsr` payload whose dtype must match `E` exactly.
    pub fn read_tsr<R: Read>(r: R) -> Result<Self> {
        let (dtype, shape, payload) = read_tsr_parts(r)?;
        if dtype != E::DTYPE {
            return Err(CoreError::Format(format!(
                "dtype mismatch: file holds {dtype}, requested {}",
                E::DTYPE
            )));
        }
        decode_payload(shape, &payload)
    }

    /// Deserialize a `.tsr` payload, converting between f32 and f64 if needed.
    pub fn read_tsr_cast<R: Read>(r: R) -> Result<Self> {
        let (dtype, shape, payload) = read_tsr_parts(r)?;
        match dtype {
            d if d == E::DTYPE => decode_payload(shape, &payload),
            Dtype::F32 => Ok(decode_payload::<f32>(shape, &payload)?.cast()),
            Dtype::F64 => Ok(decode_payload::<f64>(shape, &payload)?.cast()),
        }
    }

    pub fn load_tsr(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        Self::read_tsr(BufReader::new(file))
    }

    pub fn load_tsr_cast(path: impl AsRef<Path>) -> Result<Self> {
        let file = File::open(path)?;
        Self::read_tsr_cast(BufReader::new(file))
    }
}

fn read_tsr_parts<R: Read>(mut r: R) -> Result<(Dtype, Vec<usize>, Vec<u8>)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| CoreError::Format("missing .tsr header line".into()))?;
    let header: TsrHeader = serde_json::from_slice(&bytes[..newline])?;
    Ok((header.dtype, header.shape, bytes[newline + 1..].to_vec()))
}

fn decode_payload<E: Element>(shape: Vec<usize>, payload: &[u8]) -> Result<Tensor<E>> {
    let width = E::DTYPE.byte_width();
    let numel: usize = shape.iter().product();
    if payload.len() != numel * width {
        return Err(CoreError::Format(format!(
            "payload holds {} bytes, shape {shape:?} needs {}",
            payload.len(),
            numel * width
        )));
    }
    let data = payload.chunks_exact(width).map(E::read_le).collect();
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_shape_payload_mismatch() {
        let err = Tensor::<f64>::new(vec![2, 3], vec![0.0; 5]).unwrap_err();
        assert!(matches!(err, CoreError::ShapeMismatch(_)));
    }

    #[test]
    fn rejects_zero_extent() {
        let err = Tensor::<f64>::new(vec![2, 0], vec![]).unwrap_err();
        assert!(matches!(err, CoreError::ShapeMismatch(_)));
    }

    #[test]
    fn check_finite_flags_nan() {
        let t = Tensor::new(vec![2], vec![1.0f64, f64::NAN]).unwrap();
        assert!(matches!(
            t.check_finite("test"),
            Err(CoreError::NonFinite(_))
        ));
    }

    #[test]
    fn tsr_round_trip_is_bit_exact() {
        let t = Tensor::new(vec![2, 2], vec![1.5f32, -0.25, 1e-20, 3.0]).unwrap();
        let mut buf = Vec::new();
        t.write_tsr(&mut buf).unwrap();
        let back = Tensor::<f32>::read_tsr(buf.as_slice()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn tsr_header_is_a_json_line() {
        let t = Tensor::scalar(2.0f64);
        let mut buf = Vec::new();
        t.write_tsr(&mut buf).unwrap();
        let newline = buf.iter().position(|&b| b == b'\n').unwrap();
        let header: serde_json::Value = serde_json::from_slice(&buf[..newline]).unwrap();
        assert_eq!(header["dtype"], "f64");
        assert_eq!(header["shape"][0], 1);
    }

    #[test]
    fn tsr_dtype_mismatch_is_rejected_without_cast() {
        let t = Tensor::scalar(2.0f64);
        let mut buf = Vec::new();
        t.write_tsr(&mut buf).unwrap();
        assert!(Tensor::<f32>::read_tsr(buf.as_slice()).is_err());
        let cast = Tensor::<f32>::read_tsr_cast(buf.as_slice()).unwrap();
        assert_eq!(cast.data(), &[2.0f32]);
    }
}

//! Dense row-major `f32` tensors and the DTF1 binary format.
//!
//! DTF1 layout: the four magic bytes `DTF1`, a `u8` rank, `rank` little-endian
//! `u32` dimensions, then the little-endian `f32` payload.

use std::io::{Read, Write};

use crate::error::{DiecError, Result};

pub const DTF1_MAGIC: &[u8; 4] = b"DTF1";

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(DiecError::shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(DiecError::shape(format!("non-finite entry at flat index {bad}")));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn filled(shape: Vec<usize>, value: f32) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![value; numel] }
    }

    /// Builds a 2-D tensor from `f64` rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != cols) {
            return Err(DiecError::shape("ragged rows"));
        }
        let data = rows.iter().flatten().map(|&v| v as f32).collect();
        Tensor::new(vec![rows.len(), cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(DiecError::shape(format!("cannot reshape {:?} to {:?}", self.shape, shape)));
        }
        Ok(Tensor { shape, data: self.data })
    }

    /// Number of rows when viewed as a matrix whose rows are the leading axis.
    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Elements per leading-axis slice.
    pub fn row_len(&self) -> usize {
        if self.shape.is_empty() {
            1
        } else {
            self.shape[1..].iter().product()
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let len = self.row_len();
        &self.data[i * len..(i + 1) * len]
    }

    /// Gathers leading-axis slices into a new tensor.
    pub fn select_rows(&self, idx: &[usize]) -> Tensor {
        let len = self.row_len();
        let mut data = Vec::with_capacity(idx.len() * len);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        let mut shape = self.shape.clone();
        if shape.is_empty() {
            shape.push(idx.len());
        } else {
            shape[0] = idx.len();
        }
        Tensor { shape, data }
    }

    /// Row-major `f64` copy of a rank-2 tensor.
    pub fn to_f64_rows(&self) -> Result<Vec<Vec<f64>>> {
        if self.rank() != 2 {
            return Err(DiecError::shape(format!("expected rank 2, got {:?}", self.shape)));
        }
        let cols = self.shape[1];
        Ok(self
            .data
            .chunks(cols.max(1))
            .take(self.shape[0])
            .map(|r| r.iter().map(|&v| v as f64).collect())
            .collect())
    }

    pub fn write_dtf1<W: Write>(&self, mut w: W) -> Result<()> {
        if self.shape.len() > u8::MAX as usize {
            return Err(DiecError::shape("rank exceeds 255"));
        }
        w.write_all(DTF1_MAGIC)?;
        w.write_all(&[self.shape.len() as u8])?;
        for &d in &self.shape {
            let d = u32::try_from(d).map_err(|_| DiecError::shape("dimension exceeds u32"))?;
            w.write_all(&d.to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(self.data.len() * 4);
        for v in &self.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_dtf1_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(5 + 4 * self.shape.len() + 4 * self.data.len());
        self.write_dtf1(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_dtf1<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != DTF1_MAGIC {
            return Err(DiecError::Format(format!("bad DTF1 magic {magic:?}")));
        }
        let mut rank = [0u8; 1];
        r.read_exact(&mut rank).map_err(truncated)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            let mut d = [0u8; 4];
            r.read_exact(&mut d).map_err(truncated)?;
            shape.push(u32::from_le_bytes(d) as usize);
        }
        let numel: usize = shape.iter().product();
        let mut payload = vec![0u8; numel * 4];
        r.read_exact(&mut payload).map_err(truncated)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Tensor::new(shape, data).map_err(|e| DiecError::Format(e.to_string()))
    }

    /// CSV rendering for rank-1 (one row) and rank-2 tensors.
    pub fn to_csv(&self) -> Result<String> {
        let (rows, cols) = match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => return Err(DiecError::shape("CSV export supports rank 1 or 2")),
        };
        let mut out = String::new();
        for i in 0..rows {
            let line: Vec<String> =
                self.data[i * cols..(i + 1) * cols].iter().map(|v| format!("{v}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        Ok(out)
    }
}

fn truncated(e: std::io::Error) -> DiecError {
    DiecError::Format(format!("truncated DTF1 stream: {e}"))
}

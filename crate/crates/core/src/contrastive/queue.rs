use crate::error::{Error, Result};
use crate::numerics::checkpoint::{ByteReader, ByteWriter};
use crate::numerics::Tensor;

pub const UNIT_NORM_TOL: f32 = 1e-5;

/// Fixed-capacity FIFO of unit-norm key vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    capacity: usize,
    dim: usize,
    ring: Vec<f32>,
    /// Slot the next key is written to.
    head: usize,
    len: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            return Err(Error::Contract(format!(
                "queue needs positive capacity and dimension, got {capacity} x {dim}"
            )));
        }
        Ok(Self {
            capacity,
            dim,
            ring: vec![0.0; capacity * dim],
            head: 0,
            len: 0,
        })
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Appends `keys` (`[n, dim]`), evicting the oldest entries beyond
    /// capacity. The whole batch is rejected if any key is not unit-norm.
    pub fn push(&mut self, keys: &Tensor<f32>) -> Result<()> {
        let (n, d) = keys.expect_2d("queue_push")?;
        if d != self.dim {
            return Err(Error::shape("queue_push", format!("{d}-dim keys for a {}-dim queue", self.dim)));
        }
        for i in 0..n {
            let norm = keys.row(i).iter().map(|v| v * v).sum::<f32>().sqrt();
            if !((norm - 1.0).abs() <= UNIT_NORM_TOL) {
                return Err(Error::Contract(format!(
                    "queue_push: key {i} has norm {norm}, expected 1"
                )));
            }
        }
        let skip = n.saturating_sub(self.capacity);
        for i in skip..n {
            let slot = self.head * self.dim;
            self.ring[slot..slot + self.dim].copy_from_slice(keys.row(i));
            self.head = (self.head + 1) % self.capacity;
        }
        self.len = (self.len + n).min(self.capacity);
        Ok(())
    }

    /// Contents oldest first, as `[len, dim]`.
    pub fn snapshot(&self) -> Tensor<f32> {
        let start = (self.head + self.capacity - self.len) % self.capacity;
        let mut data = Vec::with_capacity(self.len * self.dim);
        for k in 0..self.len {
            let slot = (start + k) % self.capacity * self.dim;
            data.extend_from_slice(&self.ring[slot..slot + self.dim]);
        }
        Tensor::new(vec![self.len, self.dim], data).expect("queue snapshot shape")
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::default();
        w.u32(self.capacity as u32);
        w.u32(self.dim as u32);
        w.u32(self.len as u32);
        w.f32s(self.snapshot().data());
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let capacity = r.u32()? as usize;
        let dim = r.u32()? as usize;
        let len = r.u32()? as usize;
        if len > capacity {
            return Err(Error::Checkpoint(format!("queue holds {len} entries but capacity is {capacity}")));
        }
        let data = r.f32s(len * dim)?;
        let mut q = Self::new(capacity, dim)?;
        q.ring[..len * dim].copy_from_slice(&data);
        q.len = len;
        q.head = len % capacity;
        Ok(q)
    }
}

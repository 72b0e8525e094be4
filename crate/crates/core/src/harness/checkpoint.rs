//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "CPTLCKPT"
//! version      u32      1
//! config hash  32 bytes SHA-256 of the resolved config
//! epoch        u64      completed epochs
//! rng seed     32 bytes ChaCha8 seed
//! rng stream   u64
//! rng word pos u128
//! ledger       5 x u64  forward, error backprop, weight grad, update, steps
//! tensors      u32      count n
//! shape table  n x (rank u32, rank x u64 dims)
//! velocity     u8       1 if optimizer velocity follows the parameters
//! payload      f64      parameters in shape-table order, then velocity
//! ```

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use super::metrics::write_file;
use crate::autodiff::Tensor;
use crate::cost::CostLedger;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"CPTLCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub epoch: u64,
    pub rng_seed: [u8; 32],
    pub rng_stream: u64,
    pub rng_word_pos: u128,
    pub ledger: CostLedger,
    pub params: Vec<Tensor>,
    pub velocity: Option<Vec<Vec<f64>>>,
}

impl Checkpoint {
    pub fn capture_rng(rng: &ChaCha8Rng) -> ([u8; 32], u64, u128) {
        (rng.get_seed(), rng.get_stream(), rng.get_word_pos())
    }

    pub fn restore_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.rng_seed);
        rng.set_stream(self.rng_stream);
        rng.set_word_pos(self.rng_word_pos);
        rng
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.config_hash);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.rng_seed);
        out.extend_from_slice(&self.rng_stream.to_le_bytes());
        out.extend_from_slice(&self.rng_word_pos.to_le_bytes());
        let l = &self.ledger;
        for v in [
            l.forward_bitops,
            l.error_backprop_bitops,
            l.weight_grad_bitops,
            l.update_bitops,
            l.steps,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.shape().len() as u32).to_le_bytes());
            for &d in p.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
        }
        out.push(self.velocity.is_some() as u8);
        for p in &self.params {
            for v in p.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        if let Some(vel) = &self.velocity {
            for v in vel.iter().flatten() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let config_hash = r.array32()?;
        let epoch = r.u64()?;
        let rng_seed = r.array32()?;
        let rng_stream = r.u64()?;
        let rng_word_pos = u128::from_le_bytes(r.take(16)?.try_into().expect("16 bytes"));
        let ledger = CostLedger {
            forward_bitops: r.u64()?,
            error_backprop_bitops: r.u64()?,
            weight_grad_bitops: r.u64()?,
            update_bitops: r.u64()?,
            steps: r.u64()?,
        };
        let count = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            shapes.push(shape);
        }
        let has_velocity = match r.take(1)?[0] {
            0 => false,
            1 => true,
            f => return Err(Error::Checkpoint(format!("bad velocity flag {f}"))),
        };
        let mut params = Vec::with_capacity(count);
        for shape in &shapes {
            let n: usize = shape.iter().product();
            let data = r.f64s(n)?;
            let t = Tensor::new(shape.clone(), data)
                .map_err(|e| Error::Checkpoint(format!("parameter tensor: {e}")))?;
            params.push(t.with_grad());
        }
        let velocity = if has_velocity {
            Some(
                shapes
                    .iter()
                    .map(|s| r.f64s(s.iter().product()))
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        if r.at != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                bytes.len() - r.at
            )));
        }
        Ok(Self {
            config_hash,
            epoch,
            rng_seed,
            rng_stream,
            rng_word_pos,
            ledger,
            params,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .at
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated checkpoint".into()))?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn array32(&mut self) -> Result<[u8; 32]> {
        Ok(self.take(32)?.try_into().expect("32 bytes"))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let len = n
            .checked_mul(8)
            .ok_or_else(|| Error::Checkpoint("tensor too large".into()))?;
        Ok(self
            .take(len)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

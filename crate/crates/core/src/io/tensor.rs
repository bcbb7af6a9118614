//! Binary tensor file format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! offset  size        field
//! 0       4           magic "HYT1"
//! 4       1           dtype code: 0=f32, 1=f64, 2=c64, 3=c128
//! 5       1           rank
//! 6       rank*4      dims, u32 each
//! ...     n*elem      payload, row-major, element bytes little-endian
//! ```
//!
//! `c64` is a complex number stored as two f32 (re, im); `c128` as two f64.
//! Files round-trip bitwise, including NaN payloads. Readers reject wrong
//! magic, unknown dtype codes, dimension overflow, and payloads whose length
//! does not exactly match `product(dims) * element_size`.

use num_complex::{Complex32, Complex64};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::io::atomic_write;

const MAGIC: &[u8; 4] = b"HYT1";

/// A tensor with one of the four supported element types.
#[derive(Debug, Clone, PartialEq)]
pub enum Tensor {
    F32(Vec<u32>, Vec<f32>),
    F64(Vec<u32>, Vec<f64>),
    C64(Vec<u32>, Vec<Complex32>),
    C128(Vec<u32>, Vec<Complex64>),
}

impl Tensor {
    pub fn dims(&self) -> &[u32] {
        match self {
            Tensor::F32(d, _) | Tensor::F64(d, _) | Tensor::C64(d, _) | Tensor::C128(d, _) => d,
        }
    }

    pub fn dtype_code(&self) -> u8 {
        match self {
            Tensor::F32(..) => 0,
            Tensor::F64(..) => 1,
            Tensor::C64(..) => 2,
            Tensor::C128(..) => 3,
        }
    }

    fn elem_size(code: u8) -> usize {
        match code {
            0 => 4,
            1 => 8,
            2 => 8,
            3 => 16,
            _ => unreachable!(),
        }
    }

    fn len(&self) -> usize {
        match self {
            Tensor::F32(_, v) => v.len(),
            Tensor::F64(_, v) => v.len(),
            Tensor::C64(_, v) => v.len(),
            Tensor::C128(_, v) => v.len(),
        }
    }

    /// Element count implied by the dims, with overflow checking.
    fn checked_count(dims: &[u32]) -> Result<usize> {
        let mut n: u64 = 1;
        for &d in dims {
            n = n
                .checked_mul(d as u64)
                .ok_or_else(|| Error::data("tensor dimension product overflows"))?;
        }
        usize::try_from(n).map_err(|_| Error::data("tensor too large for this platform"))
    }

    /// Validate that the payload length matches the dims.
    pub fn validate(&self) -> Result<()> {
        let want = Self::checked_count(self.dims())?;
        if self.len() != want {
            return Err(Error::data(format!(
                "tensor payload has {} elements, dims imply {}",
                self.len(),
                want
            )));
        }
        if self.dims().len() > u8::MAX as usize {
            return Err(Error::data("tensor rank exceeds 255"));
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let dims = self.dims();
        let mut out =
            Vec::with_capacity(6 + dims.len() * 4 + self.len() * Self::elem_size(self.dtype_code()));
        out.extend_from_slice(MAGIC);
        out.push(self.dtype_code());
        out.push(dims.len() as u8);
        for &d in dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match self {
            Tensor::F32(_, v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Tensor::F64(_, v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Tensor::C64(_, v) => {
                for x in v {
                    out.extend_from_slice(&x.re.to_le_bytes());
                    out.extend_from_slice(&x.im.to_le_bytes());
                }
            }
            Tensor::C128(_, v) => {
                for x in v {
                    out.extend_from_slice(&x.re.to_le_bytes());
                    out.extend_from_slice(&x.im.to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 6 {
            return Err(Error::data("tensor file truncated before header"));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::data("bad tensor magic, expected HYT1"));
        }
        let code = bytes[4];
        if code > 3 {
            return Err(Error::data(format!("unknown tensor dtype code {code}")));
        }
        let rank = bytes[5] as usize;
        let header = 6 + rank * 4;
        if bytes.len() < header {
            return Err(Error::data("tensor file truncated inside dims"));
        }
        let mut dims = Vec::with_capacity(rank);
        for i in 0..rank {
            let off = 6 + i * 4;
            dims.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()));
        }
        let count = Self::checked_count(&dims)?;
        let payload = &bytes[header..];
        let want_bytes = count
            .checked_mul(Self::elem_size(code))
            .ok_or_else(|| Error::data("tensor payload size overflows"))?;
        if payload.len() != want_bytes {
            return Err(Error::data(format!(
                "tensor payload is {} bytes, dims imply {}",
                payload.len(),
                want_bytes
            )));
        }
        let tensor = match code {
            0 => Tensor::F32(
                dims,
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            1 => Tensor::F64(
                dims,
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            2 => Tensor::C64(
                dims,
                payload
                    .chunks_exact(8)
                    .map(|c| {
                        Complex32::new(
                            f32::from_le_bytes(c[0..4].try_into().unwrap()),
                            f32::from_le_bytes(c[4..8].try_into().unwrap()),
                        )
                    })
                    .collect(),
            ),
            3 => Tensor::C128(
                dims,
                payload
                    .chunks_exact(16)
                    .map(|c| {
                        Complex64::new(
                            f64::from_le_bytes(c[0..8].try_into().unwrap()),
                            f64::from_le_bytes(c[8..16].try_into().unwrap()),
                        )
                    })
                    .collect(),
            ),
            _ => unreachable!(),
        };
        Ok(tensor)
    }
}

/// Write a tensor to `path` atomically (temp file + rename).
pub fn write_tensor(tensor: &Tensor, path: &Path) -> Result<()> {
    let bytes = tensor.to_bytes()?;
    atomic_write(path, &bytes)
}

/// Read a tensor from `path`.
pub fn read_tensor(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    Tensor::from_bytes(&bytes)
}

/// Convenience: stream a pre-serialized tensor into any writer (used by
/// multi-file checkpoint writers that handle their own atomicity).
pub fn write_tensor_to(tensor: &Tensor, w: &mut impl Write) -> Result<()> {
    let bytes = tensor.to_bytes()?;
    w.write_all(&bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn scalar_rank0_round_trips() {
        let t = Tensor::F64(vec![], vec![42.5]);
        let back = Tensor::from_bytes(&t.to_bytes().unwrap()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let t = Tensor::C128(vec![2, 3], vec![Complex64::new(1.0, -1.0); 6]);
        let mut bytes = t.to_bytes().unwrap();
        bytes.pop();
        assert!(matches!(Tensor::from_bytes(&bytes), Err(Error::Data(_))));
    }

    #[test]
    fn trailing_bytes_are_rejected() {
        let t = Tensor::F32(vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let mut bytes = t.to_bytes().unwrap();
        bytes.push(0);
        assert!(matches!(Tensor::from_bytes(&bytes), Err(Error::Data(_))));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let t = Tensor::F64(vec![1], vec![0.0]);
        let mut bytes = t.to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Tensor::from_bytes(&bytes), Err(Error::Data(_))));
    }

    #[test]
    fn unknown_dtype_is_rejected() {
        let t = Tensor::F64(vec![1], vec![0.0]);
        let mut bytes = t.to_bytes().unwrap();
        bytes[4] = 7;
        assert!(matches!(Tensor::from_bytes(&bytes), Err(Error::Data(_))));
    }

    #[test]
    fn dim_overflow_is_rejected() {
        // rank 3 with dims u32::MAX each overflows any payload check.
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"HYT1");
        bytes.push(1u8);
        bytes.push(3u8);
        for _ in 0..3 {
            bytes.extend_from_slice(&u32::MAX.to_le_bytes());
        }
        assert!(matches!(Tensor::from_bytes(&bytes), Err(Error::Data(_))));
    }

    #[test]
    fn mismatched_dims_fail_validation() {
        let t = Tensor::F64(vec![2, 2], vec![0.0; 3]);
        assert!(t.validate().is_err());
    }

    #[test]
    fn nan_payload_round_trips_bitwise() {
        let quiet = f64::from_bits(0x7ff8_0000_0000_0001);
        let t = Tensor::F64(vec![2], vec![quiet, -0.0]);
        let back = Tensor::from_bytes(&t.to_bytes().unwrap()).unwrap();
        match back {
            Tensor::F64(_, v) => {
                assert_eq!(v[0].to_bits(), quiet.to_bits());
                assert_eq!(v[1].to_bits(), (-0.0f64).to_bits());
            }
            _ => panic!("dtype changed"),
        }
    }

    #[test]
    fn file_round_trip_is_atomic_and_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.hyt1");
        let t = Tensor::C128(
            vec![2, 2, 2],
            (0..8).map(|i| Complex64::new(i as f64, -(i as f64) / 3.0)).collect(),
        );
        write_tensor(&t, &path).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
        // no stray temp files
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().file_name())
            .collect();
        assert_eq!(leftovers.len(), 1);
    }

    proptest! {
        #[test]
        fn random_c128_tensors_round_trip(
            dims in proptest::collection::vec(1u32..5, 0..4),
            seed in any::<u64>(),
        ) {
            use rand::{Rng, SeedableRng};
            let count: usize = dims.iter().map(|&d| d as usize).product();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<Complex64> = (0..count)
                .map(|_| Complex64::new(rng.gen::<f64>() * 2e3 - 1e3, rng.gen::<f64>()))
                .collect();
            let t = Tensor::C128(dims, data);
            let back = Tensor::from_bytes(&t.to_bytes().unwrap()).unwrap();
            prop_assert_eq!(t, back);
        }
    }
}

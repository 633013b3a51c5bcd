//! `SAPT` tensor files: magic, `u32` version, `u8` dtype (0 = f32,
//! 1 = f64), `u8` rank, `u32` dims, then the little-endian row-major
//! payload.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use sapa_core::{DType, Real, Tensor};

use crate::error::{CliError, CliResult};

pub const MAGIC: [u8; 4] = *b"SAPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::F64(_) => DType::F64,
        }
    }
}

/// A tensor of rank 1 to 4 as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    pub dims: Vec<usize>,
    pub payload: Payload,
}

fn bad(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, payload: Payload) -> CliResult<Self> {
        if dims.is_empty() || dims.len() > 4 {
            return Err(CliError::usage(format!(
                "tensor rank must be 1..=4, got {}",
                dims.len()
            )));
        }
        if dims.iter().product::<usize>() != payload.len() {
            return Err(CliError::usage(format!(
                "dims {dims:?} do not match {} values",
                payload.len()
            )));
        }
        Ok(Self { dims, payload })
    }

    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        let payload = match T::DTYPE {
            DType::F32 => Payload::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            DType::F64 => Payload::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        Self {
            dims: t.dims().to_vec(),
            payload,
        }
    }

    pub fn dtype(&self) -> DType {
        self.payload.dtype()
    }

    /// NCHW dims, left-padded with ones for ranks below 4.
    pub fn dims4(&self) -> [usize; 4] {
        let mut d = [1; 4];
        d[4 - self.dims.len()..].copy_from_slice(&self.dims);
        d
    }

    /// Converts to a rank-4 tensor of element type `T`.
    pub fn to_tensor<T: Real>(&self) -> CliResult<Tensor<T>> {
        let data = match &self.payload {
            Payload::F32(v) => v.iter().map(|&x| T::of(x as f64)).collect(),
            Payload::F64(v) => v.iter().map(|&x| T::of(x)).collect(),
        };
        Ok(Tensor::new(self.dims4(), data)?)
    }

    pub fn write_to(&self, mut w: impl Write) -> io::Result<()> {
        w.write_all(&MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[match self.dtype() {
            DType::F32 => 0,
            DType::F64 => 1,
        }])?;
        w.write_all(&[self.dims.len() as u8])?;
        for &d in &self.dims {
            let d = u32::try_from(d).map_err(|_| bad("dimension exceeds u32"))?;
            w.write_all(&d.to_le_bytes())?;
        }
        match &self.payload {
            Payload::F32(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes())),
            Payload::F64(v) => v.iter().try_for_each(|x| w.write_all(&x.to_le_bytes())),
        }
    }

    /// Reads one record. `Ok(None)` on a clean end of stream.
    pub fn read_from(mut r: impl Read) -> io::Result<Option<Self>> {
        let mut magic = [0u8; 4];
        let mut got = 0;
        while got < 4 {
            let n = r.read(&mut magic[got..])?;
            if n == 0 {
                return if got == 0 {
                    Ok(None)
                } else {
                    Err(bad("truncated header"))
                };
            }
            got += n;
        }
        if magic != MAGIC {
            return Err(bad("not a SAPT tensor file (bad magic)"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(bad(format!("unsupported tensor file version {version}")));
        }
        let mut byte = [0u8; 2];
        r.read_exact(&mut byte)?;
        let (code, rank) = (byte[0], byte[1] as usize);
        if !(1..=4).contains(&rank) {
            return Err(bad(format!("unsupported rank {rank}")));
        }
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            r.read_exact(&mut word)?;
            dims.push(u32::from_le_bytes(word) as usize);
        }
        let len = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| bad("dims overflow"))?;
        let payload = match code {
            0 => {
                let mut buf =
                    vec![0u8; len.checked_mul(4).ok_or_else(|| bad("payload too large"))?];
                r.read_exact(&mut buf)?;
                Payload::F32(
                    buf.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            1 => {
                let mut buf =
                    vec![0u8; len.checked_mul(8).ok_or_else(|| bad("payload too large"))?];
                r.read_exact(&mut buf)?;
                Payload::F64(
                    buf.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            other => return Err(bad(format!("unknown dtype code {other}"))),
        };
        Ok(Some(Self { dims, payload }))
    }

    pub fn save(&self, path: &Path) -> CliResult<()> {
        let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
        self.write_to(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| io_err(path, e))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let mut all = load_all(path)?;
        match all.len() {
            1 => Ok(all.remove(0)),
            0 => Err(CliError::runtime(format!(
                "{}: empty tensor file",
                path.display()
            ))),
            n => Err(CliError::runtime(format!(
                "{}: expected one tensor, found {n}",
                path.display()
            ))),
        }
    }
}

fn io_err(path: &Path, e: io::Error) -> CliError {
    CliError::runtime(format!("{}: {e}", path.display()))
}

/// Reads every record of a file of concatenated tensors.
pub fn load_all(path: &Path) -> CliResult<Vec<TensorFile>> {
    let mut r = BufReader::new(File::open(path).map_err(|e| io_err(path, e))?);
    let mut out = Vec::new();
    while let Some(t) = TensorFile::read_from(&mut r).map_err(|e| io_err(path, e))? {
        out.push(t);
    }
    Ok(out)
}

pub fn save_all(path: &Path, tensors: &[TensorFile]) -> CliResult<()> {
    let mut w = BufWriter::new(File::create(path).map_err(|e| io_err(path, e))?);
    for t in tensors {
        t.write_to(&mut w).map_err(|e| io_err(path, e))?;
    }
    w.flush().map_err(|e| io_err(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = TensorFile::new(vec![2, 3], Payload::F32(vec![0.0; 6])).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"SAPT");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(buf[8], 0);
        assert_eq!(buf[9], 2);
        assert_eq!(&buf[10..14], &2u32.to_le_bytes());
        assert_eq!(buf.len(), 4 + 4 + 2 + 8 + 24);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(TensorFile::read_from(&b"NOPE\x01\0\0\0"[..]).is_err());
        let t = TensorFile::new(vec![4], Payload::F64(vec![1.0; 4])).unwrap();
        let mut buf = Vec::new();
        t.write_to(&mut buf).unwrap();
        assert!(TensorFile::read_from(&buf[..buf.len() - 1]).is_err());
        assert_eq!(TensorFile::read_from(&[][..]).unwrap(), None);
    }

    #[test]
    fn low_rank_pads_to_nchw() {
        let t = TensorFile::new(vec![3, 2], Payload::F64(vec![0.0; 6])).unwrap();
        assert_eq!(t.dims4(), [1, 1, 3, 2]);
    }
}

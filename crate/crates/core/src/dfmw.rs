//! The DFMW named-tensor weight format.
//!
//! Layout (all integers little-endian, independent of host byte order):
//!
//! ```text
//! magic   b"DFMW"
//! version u16            (currently 1)
//! count   u32
//! entry*  name_len u16, name utf-8,
//!         ndim u8, dims u64[ndim],
//!         dtype u8 (0 = f32),
//!         payload f32[product(dims)]
//! ```
//!
//! Round trips are bit-exact; the loader validates magic, version, dtype,
//! name uniqueness and payload lengths.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DFMW";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        let name_bytes = name.as_bytes();
        if name_bytes.len() > u16::MAX as usize {
            return Err(Error::config(format!("tensor name too long: {name:?}")));
        }
        w.write_all(&(name_bytes.len() as u16).to_le_bytes())?;
        w.write_all(name_bytes)?;
        w.write_all(&(t.rank() as u8).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        w.write_all(&[DTYPE_F32])?;
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn save_store(path: &Path, store: &ParamStore) -> Result<()> {
    let tensors: Vec<(String, Tensor)> =
        store.iter().map(|(_, p)| (p.name.clone(), p.value.clone())).collect();
    save(path, &tensors)
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::CorruptFile("unexpected end of file".into()))?;
        Ok(buf)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut r = Reader { inner: BufReader::new(File::open(path)?) };
    let magic: [u8; 4] = r.bytes()?;
    if &magic != MAGIC {
        return Err(Error::CorruptFile(format!("bad magic {magic:02x?}")));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::UnknownVersion(version));
    }
    let count = r.u32()? as usize;
    let mut out: Vec<(String, Tensor)> = Vec::with_capacity(count);
    let mut seen = std::collections::HashSet::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let mut name_buf = vec![0u8; name_len];
        r.inner
            .read_exact(&mut name_buf)
            .map_err(|_| Error::CorruptFile("truncated tensor name".into()))?;
        let name = String::from_utf8(name_buf)
            .map_err(|_| Error::CorruptFile("tensor name is not utf-8".into()))?;
        if !seen.insert(name.clone()) {
            return Err(Error::DuplicateName(name));
        }
        let ndim = r.u8()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u64()? as usize);
        }
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::CorruptFile(format!("unsupported dtype {dtype}")));
        }
        let numel: usize = dims.iter().product();
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::CorruptFile(format!("tensor {name:?} has a zero extent")));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(f32::from_le_bytes(r.bytes()?));
        }
        out.push((name, Tensor::from_parts(dims, data)));
    }
    // anything after the declared entries is corruption
    let mut trailing = [0u8; 1];
    match r.inner.read(&mut trailing) {
        Ok(0) => Ok(out),
        Ok(_) => Err(Error::CorruptFile("trailing bytes after last tensor".into())),
        Err(e) => Err(e.into()),
    }
}

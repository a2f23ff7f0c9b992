//! Binary parameter checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      4 bytes  "RSNN"
//! version    u16
//! count      u32      number of records
//! record*:
//!   name_len u32, name (UTF-8)
//!   ndim     u32, dims u32 * ndim
//!   values   f32 * prod(dims)
//! ```

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::{NnError, ParamStore, Result, Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RSNN";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(params: &ParamStore<T>, mut w: W) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_u16::<LittleEndian>(CHECKPOINT_VERSION)?;
    w.write_u32::<LittleEndian>(params.len() as u32)?;
    for (name, t) in params.iter() {
        w.write_u32::<LittleEndian>(name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(t.shape().len() as u32)?;
        for &d in t.shape() {
            w.write_u32::<LittleEndian>(d as u32)?;
        }
        for &v in t.data() {
            w.write_f32::<LittleEndian>(v.as_f64() as f32)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<T: Scalar, R: Read>(mut r: R) -> Result<ParamStore<T>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NnError::Format(format!("bad magic {magic:?}")));
    }
    let version = r.read_u16::<LittleEndian>()?;
    if version != CHECKPOINT_VERSION {
        return Err(NnError::Format(format!("unsupported version {version}")));
    }
    let count = r.read_u32::<LittleEndian>()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.read_u32::<LittleEndian>()? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| NnError::Format(e.to_string()))?;
        let ndim = r.read_u32::<LittleEndian>()? as usize;
        let shape = (0..ndim).map(|_| r.read_u32::<LittleEndian>().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(T::from_f64(r.read_f32::<LittleEndian>()? as f64));
        }
        store.insert(name, Tensor::new(shape, data)?);
    }
    Ok(store)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bitwise() {
        let mut p = ParamStore::<f32>::new();
        p.insert("a.weight", Tensor::new(vec![2, 3], vec![0.1, -2.5, 3.25e-7, 1e30, -0.0, 7.0]).unwrap());
        p.insert("a.bias", Tensor::new(vec![2], vec![1.0, f32::MIN_POSITIVE]).unwrap());
        let mut buf = Vec::new();
        write_checkpoint(&p, &mut buf).unwrap();
        assert_eq!(&buf[..4], b"RSNN");
        let q: ParamStore<f32> = read_checkpoint(&buf[..]).unwrap();
        assert_eq!(p.names().collect::<Vec<_>>(), q.names().collect::<Vec<_>>());
        for ((_, a), (_, b)) in p.iter().zip(q.iter()) {
            let bits = |t: &Tensor<f32>| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn rejects_foreign_files() {
        assert!(matches!(read_checkpoint::<f32, _>(&b"RSCG\x01\x00"[..]), Err(NnError::Format(_))));
        assert!(read_checkpoint::<f32, _>(&b"RS"[..]).is_err());
    }
}

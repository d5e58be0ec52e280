//! Versioned binary weight files.
//!
//! Layout: magic `EFW1`, u32 parameter count, then per parameter:
//! u32 name length, UTF-8 name, u32 trainable flag, u32 ndim,
//! u32 dims, little-endian f64 payload. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"EFW1";

pub fn write_params<W: Write>(w: &mut W, params: &ParamSet) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for p in params.iter() {
        let name = p.name.as_bytes();
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&u32::from(p.trainable).to_le_bytes())?;
        w.write_all(&(p.value.shape.len() as u32).to_le_bytes())?;
        for d in &p.value.shape {
            w.write_all(&(*d as u32).to_le_bytes())?;
        }
        for v in &p.value.data {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Parameters as read back from a weight file, in file order.
pub struct StoredParam {
    pub name: String,
    pub trainable: bool,
    pub value: Tensor,
}

pub fn read_params<R: Read>(r: &mut R) -> Result<Vec<StoredParam>> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:?}, expected EFW1",
            String::from_utf8_lossy(&magic)
        )));
    }
    let count = read_u32(r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|e| Error::Format(format!("parameter name not UTF-8: {e}")))?;
        let trainable = read_u32(r)? != 0;
        let ndim = read_u32(r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push(StoredParam {
            name,
            trainable,
            value: Tensor::new(shape, data),
        });
    }
    Ok(out)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn save_params(path: &Path, params: &ParamSet) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_params(&mut w, params)?;
    w.flush()?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<Vec<StoredParam>> {
    let mut r = BufReader::new(File::open(path)?);
    read_params(&mut r)
}

/// Copy stored values into an existing parameter set, matching by name.
pub fn apply_stored(params: &mut ParamSet, stored: &[StoredParam]) -> Result<()> {
    for sp in stored {
        let id = params.find(&sp.name).ok_or_else(|| {
            Error::Format(format!("stored parameter {} not present in model", sp.name))
        })?;
        if params.value(id).shape != sp.value.shape {
            return Err(Error::ShapeMismatch {
                layer: sp.name.clone(),
                expected: format!("{:?}", params.value(id).shape),
                actual: sp.value.shape_string(),
            });
        }
        *params.value_mut(id) = sp.value.clone();
        params.set_trainable(id, sp.trainable);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut params = ParamSet::new();
        params.add(
            "conv.weight",
            Tensor::new(vec![2, 3], vec![1.5, -2.25, 0.0, f64::MIN_POSITIVE, 1e300, -0.0]),
            true,
        );
        params.add("head.bias", Tensor::new(vec![2], vec![0.1, 0.2]), false);
        let mut buf = Vec::new();
        write_params(&mut buf, &params).unwrap();
        let stored = read_params(&mut buf.as_slice()).unwrap();
        assert_eq!(stored.len(), 2);
        for (sp, p) in stored.iter().zip(params.iter()) {
            assert_eq!(sp.name, p.name);
            assert_eq!(sp.trainable, p.trainable);
            assert_eq!(sp.value.shape, p.value.shape);
            // Bit-level comparison catches -0.0 and NaN payload drift.
            let a: Vec<u64> = sp.value.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = p.value.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
        let mut buf2 = Vec::new();
        let mut restored = ParamSet::new();
        restored.add("conv.weight", Tensor::zeros(vec![2, 3]), true);
        restored.add("head.bias", Tensor::zeros(vec![2]), true);
        apply_stored(&mut restored, &stored).unwrap();
        write_params(&mut buf2, &restored).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn rejects_bad_magic() {
        let buf = b"NOPE\x00\x00\x00\x00".to_vec();
        assert!(read_params(&mut buf.as_slice()).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_random_params(values in proptest::collection::vec(-1e6f64..1e6, 1..64)) {
            let mut params = ParamSet::new();
            let n = values.len();
            params.add("p", Tensor::new(vec![n], values.clone()), true);
            let mut buf = Vec::new();
            write_params(&mut buf, &params).unwrap();
            let stored = read_params(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(&stored[0].value.data, &values);
        }
    }
}

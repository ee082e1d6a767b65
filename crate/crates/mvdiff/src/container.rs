//! On-disk tensor container: magic "UMTC1", u32 array count; per array a
//! u16 name length, name bytes, u8 dtype code (0 = f32), u8 rank, u32 dims,
//! then the little-endian payload. In-memory tensors are f64 and are cast
//! to f32 at this boundary.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 5] = b"UMTC1";

pub fn encode(arrays: &[(String, Tensor)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize {
            return Err(Error::Validation(format!("array name too long: {}", name)));
        }
        out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        out.extend_from_slice(nb);
        out.push(0u8); // dtype f32
        let shape = t.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::Validation("rank exceeds u8".into()));
        }
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > bytes.len() {
            return Err(Error::Validation("truncated tensor container".into()));
        }
        let s = &bytes[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 5)? != MAGIC {
        return Err(Error::Validation("bad container magic".into()));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| Error::Validation("array name not utf-8".into()))?;
        let dtype = take(&mut pos, 1)?[0];
        if dtype != 0 {
            return Err(Error::Validation(format!("unknown dtype code {}", dtype)));
        }
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let n: usize = shape.iter().product();
        let payload = take(&mut pos, n * 4)?;
        let data: Vec<f64> = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        arrays.push((name, Tensor::new(shape, data)?));
    }
    Ok(arrays)
}

pub fn write_file(path: &Path, arrays: &[(String, Tensor)]) -> Result<()> {
    let bytes = encode(arrays)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read_file(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

/// The sole array of a single-tensor container file.
pub fn first(arrays: &[(String, Tensor)]) -> Result<Tensor> {
    match arrays {
        [(_, t)] => Ok(t.clone()),
        _ => Err(Error::Validation(format!(
            "expected exactly one array, found {}",
            arrays.len()
        ))),
    }
}

pub fn find<'a>(arrays: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    arrays
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| Error::Validation(format!("container missing array '{}'", name)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn roundtrip_basic() {
        let a = Tensor::from_fn(&[2, 3], |i| i as f64 * 0.5);
        let b = Tensor::scalar(7.0);
        let arrays = vec![("alpha".to_string(), a.clone()), ("b".to_string(), b.clone())];
        let back = decode(&encode(&arrays).unwrap()).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[0].0, "alpha");
        assert_eq!(back[0].1, a);
        assert_eq!(back[1].1, b);
    }

    #[test]
    fn rejects_garbage() {
        assert!(decode(b"UMTCX\0\0\0\0").is_err());
        assert!(decode(b"UMTC1\x01\x00\x00\x00").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_preserves_f32_values(vals in proptest::collection::vec(-1e6f32..1e6f32, 1..64)) {
            let t = Tensor::new(vec![vals.len()], vals.iter().map(|&v| v as f64).collect()).unwrap();
            let back = decode(&encode(&[("x".into(), t)]).unwrap()).unwrap();
            for (i, &v) in vals.iter().enumerate() {
                prop_assert_eq!(back[0].1.data()[i] as f32, v);
            }
        }
    }
}

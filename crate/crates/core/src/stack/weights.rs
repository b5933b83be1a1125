//! Binary weight file.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ADVW" | u32 version = 1 | u32 tensor count
//! per tensor: u16 name length | name (UTF-8) | u8 rank | rank × u32 dims | f32 payload
//! ```

use std::path::Path;

use super::model::{param_layout, Model, ModelSpec};
use super::tensor::Tensor;
use super::WeightsError;

pub const MAGIC: &[u8; 4] = b"ADVW";
pub const VERSION: u32 = 1;

pub fn encode(model: &Model) -> Vec<u8> {
    let layout = param_layout(model.spec()).expect("model spec was validated");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(layout.len() as u32).to_le_bytes());
    for ((name, _), t) in layout.iter().zip(model.params()) {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.shape.len() as u8);
        for d in &t.shape {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &t.data {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], WeightsError> {
        let end = self.pos.checked_add(n).ok_or(WeightsError::Truncated)?;
        let s = self.bytes.get(self.pos..end).ok_or(WeightsError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, WeightsError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, WeightsError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, WeightsError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8], spec: &ModelSpec) -> Result<Model, WeightsError> {
    let layout = param_layout(spec)?;
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4).map_err(|_| WeightsError::BadMagic)? != MAGIC {
        return Err(WeightsError::BadMagic);
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(WeightsError::Version(version));
    }
    let count = r.u32()? as usize;
    if count != layout.len() {
        return Err(WeightsError::Shape(format!("file has {count} tensors, model needs {}", layout.len())));
    }
    let mut params = Vec::with_capacity(count);
    for (name, shape) in &layout {
        let len = r.u16()? as usize;
        let file_name = String::from_utf8(r.take(len)?.to_vec()).map_err(|_| WeightsError::Name("invalid UTF-8".into()))?;
        if &file_name != name {
            return Err(WeightsError::Name(format!("expected {name}, found {file_name}")));
        }
        let rank = r.u8()? as usize;
        let dims = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        if &dims != shape {
            return Err(WeightsError::Shape(format!("{name}: expected {shape:?}, found {dims:?}")));
        }
        let n: usize = dims.iter().product();
        let payload = r.take(n.checked_mul(4).ok_or(WeightsError::Truncated)?)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params.push(Tensor { shape: dims, data });
    }
    if r.pos != bytes.len() {
        return Err(WeightsError::TrailingBytes(bytes.len() - r.pos));
    }
    Ok(Model::from_params(spec.clone(), params)?)
}

pub fn save_weights(model: &Model, path: &Path) -> Result<(), WeightsError> {
    std::fs::write(path, encode(model))?;
    Ok(())
}

pub fn load_weights(path: &Path, spec: &ModelSpec) -> Result<Model, WeightsError> {
    decode(&std::fs::read(path)?, spec)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stack::zoo;

    fn model() -> Model {
        Model::init(zoo::regressor_spec(), 5).unwrap()
    }

    #[test]
    fn roundtrip_bit_identical() {
        let m = model();
        let back = decode(&encode(&m), m.spec()).unwrap();
        for (a, b) in m.params().iter().zip(back.params()) {
            assert_eq!(a.shape, b.shape);
            assert!(a.data.iter().zip(&b.data).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(encode(&back), encode(&m));
    }

    #[test]
    fn distinct_errors() {
        let m = model();
        let bytes = encode(&m);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, m.spec()), Err(WeightsError::BadMagic)));

        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(decode(&bad, m.spec()), Err(WeightsError::Version(2))));

        // First tensor dims follow magic, version, count, name length, name, rank.
        let name_len = u16::from_le_bytes([bytes[12], bytes[13]]) as usize;
        let dim0 = 12 + 2 + name_len + 1;
        let mut bad = bytes.clone();
        bad[dim0] += 1;
        assert!(matches!(decode(&bad, m.spec()), Err(WeightsError::Shape(_))));

        assert!(matches!(decode(&bytes[..bytes.len() - 3], m.spec()), Err(WeightsError::Truncated)));
        assert!(matches!(decode(&bytes[..2], m.spec()), Err(WeightsError::BadMagic)));
    }
}

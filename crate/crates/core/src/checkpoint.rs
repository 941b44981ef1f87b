//! Checkpoint file layout (all integers little-endian):
//!
//! ```text
//! "SLV1"  u32 version  u32 config_len  config (canonical key=value text)
//! u32 n_records
//! per record: u32 name_len  name  u32 rank  u64 extents[rank]  f32 data[..]
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::model::{Model, ModelParams};
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"SLV1";
pub const VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar, W: Write>(model: &Model<T>, mut w: W) -> Result<()> {
    let cfg = model.config.to_canonical_text();
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(cfg.len() as u32).to_le_bytes())?;
    w.write_all(cfg.as_bytes())?;
    let named = model.params.named();
    w.write_all(&(named.len() as u32).to_le_bytes())?;
    for (name, t) in named {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &e in t.shape() {
            w.write_all(&(e as u64).to_le_bytes())?;
        }
        let mut buf = Vec::with_capacity(t.len() * 4);
        for &x in t.data() {
            buf.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes(&mut self, n: usize) -> Result<Vec<u8>> {
        let mut buf = vec![0; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes(8)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<T: Scalar, R: Read>(r: R) -> Result<Model<T>> {
    let mut r = Reader { inner: r };
    if r.bytes(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let len = r.u32()? as usize;
    let text = String::from_utf8(r.bytes(len)?)
        .map_err(|_| Error::Format("config is not UTF-8".into()))?;
    let config = ModelConfig::from_canonical_text(&text)?;
    // a zero-initialized skeleton gives the expected names and shapes
    let mut model = Model::<T>::init(config, 0)?;
    let n = r.u32()? as usize;
    let mut slots = model.params.named_mut();
    if n != slots.len() {
        return Err(Error::Format(format!(
            "expected {} parameter records, found {n}",
            slots.len()
        )));
    }
    for (name, slot) in slots.iter_mut() {
        let len = r.u32()? as usize;
        let got = String::from_utf8(r.bytes(len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
        if &got != name {
            return Err(Error::Format(format!("expected parameter {name}, found {got}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        if shape != slot.shape() {
            return Err(Error::Format(format!(
                "{name}: shape {shape:?} does not match config {:?}",
                slot.shape()
            )));
        }
        let raw = r.bytes(slot.len() * 4)?;
        let data: Vec<T> = raw
            .chunks_exact(4)
            .map(|c| T::lit(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        **slot = Tensor::new(shape, data)?;
    }
    drop(slots);
    let mut rest = Vec::new();
    r.inner.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(model)
}

pub fn save<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load<T: Scalar>(path: &Path) -> Result<Model<T>> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}

/// Parameters rounded through `f32`, i.e. exactly what a checkpoint stores.
pub fn quantize<T: Scalar>(params: &ModelParams<T>) -> ModelParams<T> {
    params.cast::<f32>().cast::<T>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::AblationVariant;

    #[test]
    fn round_trip_every_variant() {
        for v in AblationVariant::ALL {
            let cfg = ModelConfig::small(8, 2, 1, 4, 12).with_variant(v);
            let m = Model::<f32>::init(cfg, 5).unwrap();
            let mut buf = Vec::new();
            write_checkpoint(&m, &mut buf).unwrap();
            let back: Model<f32> = read_checkpoint(buf.as_slice()).unwrap();
            assert_eq!(back.params, m.params, "{v}");
            assert_eq!(back.config, m.config);
        }
    }

    #[test]
    fn rejects_corruption() {
        let m = Model::<f32>::init(ModelConfig::small(8, 2, 1, 4, 12), 5).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&m, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(read_checkpoint::<f32, _>(bad.as_slice()).is_err());
        assert!(read_checkpoint::<f32, _>(&buf[..buf.len() - 1]).is_err());
        let mut long = buf;
        long.push(0);
        assert!(read_checkpoint::<f32, _>(long.as_slice()).is_err());
    }
}

//! Model checkpoint file: `SBXM` magic, version, then length-prefixed
//! `(name, shape, f32 data)` entries until end of file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use crate::binio::{self, Reader};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"SBXM";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn write_checkpoint(path: &Path, entries: &[(String, &Tensor<f32>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CHECKPOINT_MAGIC)?;
    binio::write_u32(&mut w, CHECKPOINT_VERSION)?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        if bytes.len() > u16::MAX as usize {
            return Err(Error::InvalidConfig { detail: format!("parameter name too long: {name}") });
        }
        binio::write_u16(&mut w, bytes.len() as u16)?;
        w.write_all(bytes)?;
        let shape = tensor.shape();
        if shape.len() > u8::MAX as usize {
            return Err(Error::InvalidConfig { detail: format!("rank too large for {name}") });
        }
        w.write_all(&[shape.len() as u8])?;
        for &dim in shape {
            binio::write_u32(&mut w, dim as u32)?;
        }
        binio::write_f32s(&mut w, tensor.data())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader::new(BufReader::new(File::open(path)?));
    r.expect_magic(CHECKPOINT_MAGIC, "checkpoint")?;
    r.expect_version(CHECKPOINT_VERSION, "checkpoint")?;
    let mut entries = Vec::new();
    loop {
        // Each entry starts with a u16 name length; a clean EOF ends the file.
        let first = match r.u8_or_eof()? {
            None => break,
            Some(b) => b,
        };
        let second = r.u8()?;
        let name_len = u16::from_le_bytes([first, second]) as usize;
        let name_bytes = r.bytes(name_len)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| r.format_error("parameter name is not utf-8"))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let data = r.f32s(numel)?;
        let tensor = Tensor::new(shape, data)
            .map_err(|e| r.format_error(format!("invalid tensor for {name}: {e}")))?;
        entries.push((name, tensor));
    }
    Ok(entries)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sbxm");
        let a = Tensor::<f32>::new(vec![2, 3], vec![1.5, -2.0, 0.25, 0.0, 9.0, -0.125]).unwrap();
        let b = Tensor::<f32>::scalar(42.0);
        write_checkpoint(&path, &[("layer.weight".into(), &a), ("bias".into(), &b)]).unwrap();

        let entries = read_checkpoint(&path).unwrap();
        assert_eq!(entries.len(), 2);
        assert_eq!(entries[0].0, "layer.weight");
        assert_eq!(entries[0].1.shape(), &[2, 3]);
        assert_eq!(entries[0].1.data(), a.data());
        assert_eq!(entries[1].0, "bias");
        assert_eq!(entries[1].1.item(), 42.0);
    }

    #[test]
    fn bad_magic_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sbxm");
        std::fs::write(&path, b"XXXX\x01\x00\x00\x00").unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn truncated_entry_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.sbxm");
        let a = Tensor::<f32>::full(&[4], 1.0);
        write_checkpoint(&path, &[("w".into(), &a)]).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 2]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Format { .. })));
    }
}

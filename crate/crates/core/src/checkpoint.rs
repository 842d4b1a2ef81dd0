//! Binary checkpoints holding a reader's configuration and parameters.
//!
//! Layout (little-endian): magic `RFCK`, `u32` version, `u32` length and
//! UTF-8 JSON of the [`ReaderConfig`], `u32` parameter count, then per
//! parameter a `u16` name length, the name, `u32` rank, `u64` dimensions and
//! the `f64` values in row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::reader::{Reader, ReaderConfig};

const MAGIC: &[u8; 4] = b"RFCK";
const VERSION: u32 = 1;

pub fn write_checkpoint<W: Write>(mut w: W, reader: &Reader) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    let config = serde_json::to_vec(&reader.config)?;
    w.write_u32::<LittleEndian>(config.len() as u32)?;
    w.write_all(&config)?;
    w.write_u32::<LittleEndian>(reader.params.len() as u32)?;
    for (name, t) in reader.params.iter() {
        w.write_u16::<LittleEndian>(name.len() as u16)?;
        w.write_all(name.as_bytes())?;
        w.write_u32::<LittleEndian>(2)?;
        w.write_u64::<LittleEndian>(t.rows() as u64)?;
        w.write_u64::<LittleEndian>(t.cols() as u64)?;
        for &v in t.data() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Rebuilds the reader from the stored configuration and overwrites every
/// parameter with the stored values.
pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Reader> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint (bad magic)"));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let len = r.read_u32::<LittleEndian>()? as usize;
    let mut config = vec![0u8; len];
    r.read_exact(&mut config).map_err(|_| bad("truncated config"))?;
    let config: ReaderConfig = serde_json::from_slice(&config).map_err(|e| bad(format!("config: {e}")))?;
    let mut reader = Reader::new(&config, config.word_dim, config.ctx_dim)?;
    let count = r.read_u32::<LittleEndian>()? as usize;
    if count != reader.params.len() {
        return Err(bad(format!("{count} parameters stored, model has {}", reader.params.len())));
    }
    for _ in 0..count {
        let n = r.read_u16::<LittleEndian>()? as usize;
        let mut name = vec![0u8; n];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        let rank = r.read_u32::<LittleEndian>()?;
        if rank != 2 {
            return Err(bad(format!("{name}: rank {rank}, expected 2")));
        }
        let rows = r.read_u64::<LittleEndian>()? as usize;
        let cols = r.read_u64::<LittleEndian>()? as usize;
        let id = reader.params.id(&name).ok_or_else(|| bad(format!("unknown parameter {name}")))?;
        if reader.params.get(id).shape() != [rows, cols] {
            return Err(bad(format!("{name}: stored shape {rows}x{cols} does not match the model")));
        }
        let mut data = vec![0.0; rows * cols];
        r.read_f64_into::<LittleEndian>(&mut data).map_err(|_| bad(format!("{name}: truncated values")))?;
        *reader.params.get_mut(id) = Tensor::new(rows, cols, data)?;
    }
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(bad("trailing bytes after parameters"));
    }
    Ok(reader)
}

pub fn save_checkpoint(path: impl AsRef<Path>, reader: &Reader) -> Result<()> {
    let path = path.as_ref();
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    write_checkpoint(BufWriter::new(f), reader)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Reader> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::reader::KSpec;

    #[test]
    fn round_trip() {
        let mut c = ReaderConfig::multi_granularity();
        c.hidden = 2;
        c.layers = 1;
        let mut reader = Reader::new(&c, 3, 2).unwrap();
        let id = reader.layout.emit_b;
        reader.params.get_mut(id).data_mut()[0] = 0.123456789;
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &reader).unwrap();
        assert_eq!(&buf[..4], b"RFCK");
        assert_eq!(read_checkpoint(&buf[..]).unwrap(), reader);
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let c = ReaderConfig {
            hidden: 2,
            layers: 1,
            ..ReaderConfig::k_sentence(KSpec::Sentences(1))
        };
        let reader = Reader::new(&c, 2, 0).unwrap();
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &reader).unwrap();
        assert!(read_checkpoint(&buf[..buf.len() - 3]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_checkpoint(&extra[..]).is_err());
        let mut magic = buf.clone();
        magic[0] = b'X';
        assert!(matches!(read_checkpoint(&magic[..]), Err(Error::Checkpoint(_))));
    }
}

//! Weight file format.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "SPECATTN"
//! 8       4     format version, u32 little endian (1)
//! 12      4     JSON length n, u32 little endian
//! 16      n     ModelConfig as JSON
//! 16+n    ...   tensors in file order (see `tensor_specs`), f32 little endian
//! end-4   4     CRC-32 (IEEE) of the tensor bytes, u32 little endian
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::model::weights::tensor_specs;
use crate::model::{ModelConfig, Weights};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"SPECATTN";
pub const FORMAT_VERSION: u32 = 1;

pub fn write_weights<W: Write>(mut w: W, config: &ModelConfig, weights: &Weights) -> Result<()> {
    weights.validate(config)?;
    let json = serde_json::to_vec(config)?;
    w.write_all(MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    w.write_all(&(json.len() as u32).to_le_bytes())?;
    w.write_all(&json)?;
    let mut crc = crc32fast::Hasher::new();
    let mut buf = Vec::new();
    for t in weights.tensors() {
        buf.clear();
        buf.reserve(t.len() * 4);
        for v in t {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        crc.update(&buf);
        w.write_all(&buf)?;
    }
    w.write_all(&crc.finalize().to_le_bytes())?;
    Ok(())
}

pub fn read_weights<R: Read>(mut r: R) -> Result<(ModelConfig, Weights)> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode(&bytes)
}

fn decode(bytes: &[u8]) -> Result<(ModelConfig, Weights)> {
    if bytes.len() < 16 {
        return Err(Error::Header(format!("{} bytes is shorter than the fixed header", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(Error::Header("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::Header(format!("unsupported format version {version}")));
    }
    let json_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    let body = 16 + json_len;
    if bytes.len() < body {
        return Err(Error::Header(format!("config length {json_len} runs past end of file")));
    }
    let config: ModelConfig =
        serde_json::from_slice(&bytes[16..body]).map_err(|e| Error::Header(format!("config JSON: {e}")))?;
    config.validate().map_err(|e| Error::Header(e.to_string()))?;

    let specs = tensor_specs(&config);
    let tensor_bytes: usize = specs.iter().map(|s| s.len * 4).sum();
    let needed = body + tensor_bytes + 4;
    if bytes.len() < needed {
        return Err(Error::Truncated(format!("need {needed} bytes, file has {}", bytes.len())));
    }
    if bytes.len() > needed {
        return Err(Error::Header(format!("{} trailing bytes", bytes.len() - needed)));
    }
    let data = &bytes[body..body + tensor_bytes];
    let stored = u32::from_le_bytes(bytes[needed - 4..].try_into().unwrap());
    let computed = crc32fast::hash(data);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut offset = 0;
    let tensors = specs
        .iter()
        .map(|s| {
            let t = data[offset..offset + s.len * 4]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += s.len * 4;
            t
        })
        .collect();
    let weights = Weights::from_tensors(&config, tensors)?;
    Ok((config, weights))
}

pub fn save_weights(path: impl AsRef<Path>, config: &ModelConfig, weights: &Weights) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_weights(&mut w, config, weights)?;
    w.flush()?;
    Ok(())
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<(ModelConfig, Weights)> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encoded() -> (ModelConfig, Weights, Vec<u8>) {
        let c = ModelConfig::tiny();
        let w = Weights::init(&c, 3).unwrap();
        let mut buf = Vec::new();
        write_weights(&mut buf, &c, &w).unwrap();
        (c, w, buf)
    }

    #[test]
    fn round_trip_is_bitwise() {
        let (c, w, buf) = encoded();
        let (c2, w2) = read_weights(&buf[..]).unwrap();
        assert_eq!(c, c2);
        for (a, b) in w.tensors().iter().zip(w2.tensors()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn bad_magic_is_header_error() {
        let (_, _, mut buf) = encoded();
        buf[0] = b'X';
        assert!(matches!(read_weights(&buf[..]), Err(Error::Header(_))));
    }

    #[test]
    fn bad_version_is_header_error() {
        let (_, _, mut buf) = encoded();
        buf[8] = 9;
        assert!(matches!(read_weights(&buf[..]), Err(Error::Header(_))));
    }

    #[test]
    fn truncation_mid_tensor() {
        let (_, _, buf) = encoded();
        let cut = &buf[..buf.len() / 2];
        assert!(matches!(read_weights(cut), Err(Error::Truncated(_))));
    }

    #[test]
    fn flipped_tensor_byte_fails_checksum() {
        let (_, _, mut buf) = encoded();
        let i = buf.len() - 100;
        buf[i] ^= 0x40;
        assert!(matches!(read_weights(&buf[..]), Err(Error::Checksum { .. })));
    }

    #[test]
    fn header_layout() {
        let (c, _, buf) = encoded();
        assert_eq!(&buf[..8], b"SPECATTN");
        assert_eq!(u32::from_le_bytes(buf[8..12].try_into().unwrap()), 1);
        let n = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
        let parsed: ModelConfig = serde_json::from_slice(&buf[16..16 + n]).unwrap();
        assert_eq!(parsed, c);
        assert_eq!(buf.len(), 16 + n + c.param_count() * 4 + 4);
    }
}

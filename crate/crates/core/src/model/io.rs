//! Model file: 8 magic bytes, `u32` version, `u32` header length, JSON
//! header `{arch, seed}`, `u64` value count, then little-endian `f32`
//! values in [`Network::visit_state`] order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::network::{ArchConfig, Network};
use super::ModelError;

pub const MODEL_MAGIC: [u8; 8] = *b"ECGWVDM\0";
pub const MODEL_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    arch: ArchConfig,
    seed: u64,
}

pub fn write_model(net: &mut Network<f32>, out: &mut impl Write) -> Result<(), ModelError> {
    let header = serde_json::to_vec(&Header {
        arch: net.arch().clone(),
        seed: net.seed(),
    })?;
    let values = net.state_vector();
    out.write_all(&MODEL_MAGIC)?;
    out.write_all(&MODEL_VERSION.to_le_bytes())?;
    out.write_all(&(header.len() as u32).to_le_bytes())?;
    out.write_all(&header)?;
    out.write_all(&(values.len() as u64).to_le_bytes())?;
    for v in values {
        out.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_exact_or_truncated(input: &mut impl Read, buf: &mut [u8], expected: usize) -> Result<(), ModelError> {
    input.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => ModelError::Truncated { expected, got: 0 },
        _ => ModelError::Io(e),
    })
}

pub fn read_model(input: &mut impl Read) -> Result<Network<f32>, ModelError> {
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(|_| ModelError::BadMagic)?;
    if magic != MODEL_MAGIC {
        return Err(ModelError::BadMagic);
    }
    let mut word = [0u8; 4];
    read_exact_or_truncated(input, &mut word, 0)?;
    let version = u32::from_le_bytes(word);
    if version != MODEL_VERSION {
        return Err(ModelError::Version {
            found: version,
            expected: MODEL_VERSION,
        });
    }
    read_exact_or_truncated(input, &mut word, 0)?;
    let mut header = vec![0u8; u32::from_le_bytes(word) as usize];
    read_exact_or_truncated(input, &mut header, 0)?;
    let header: Header = serde_json::from_slice(&header)?;
    let mut net = Network::new(header.arch, header.seed)?;
    let expected = net.state_len();

    let mut count = [0u8; 8];
    read_exact_or_truncated(input, &mut count, expected)?;
    let count = u64::from_le_bytes(count) as usize;
    if count != expected {
        return Err(ModelError::Truncated { expected, got: count });
    }
    let mut blob = Vec::with_capacity(expected * 4);
    input.take(expected as u64 * 4).read_to_end(&mut blob)?;
    if blob.len() != expected * 4 {
        return Err(ModelError::Truncated {
            expected,
            got: blob.len() / 4,
        });
    }
    let values: Vec<f32> = blob
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    net.load_state(&values)?;
    Ok(net)
}

pub fn save_model(net: &mut Network<f32>, path: &Path) -> Result<(), ModelError> {
    let mut out = BufWriter::new(File::create(path)?);
    write_model(net, &mut out)?;
    out.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<Network<f32>, ModelError> {
    read_model(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{HeadKind, Tensor};

    fn tiny() -> Network<f32> {
        let arch = ArchConfig {
            input_size: 16,
            stem_filters: 4,
            stem_kernel: 3,
            stem_stride: 2,
            stem_pool: false,
            stage_widths: vec![2, 4],
            blocks_per_stage: 1,
            head_pool: 2,
            head: HeadKind::Dense64,
            num_classes: 5,
        };
        Network::new(arch, 11).unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut net = tiny();
        // perturb moving statistics so they are not at their defaults
        let x = Tensor::from_vec([3, 1, 16, 16], (0..768).map(|i| (i as f32 * 0.37).sin()).collect());
        net.forward(&x, crate::model::Mode::Train).unwrap();
        let mut bytes = Vec::new();
        write_model(&mut net, &mut bytes).unwrap();
        let mut back = read_model(&mut bytes.as_slice()).unwrap();
        assert_eq!(back.arch(), net.arch());
        assert_eq!(back.state_vector(), net.state_vector());
        let a = net.infer(&x).unwrap();
        let b = back.infer(&x).unwrap();
        assert_eq!(
            a.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let mut bytes = Vec::new();
        write_model(&mut tiny(), &mut bytes).unwrap();
        bytes[0] ^= 0xff;
        assert!(matches!(read_model(&mut bytes.as_slice()), Err(ModelError::BadMagic)));
    }

    #[test]
    fn version_and_truncation_are_reported() {
        let mut bytes = Vec::new();
        write_model(&mut tiny(), &mut bytes).unwrap();
        let mut bumped = bytes.clone();
        bumped[8] = 9;
        assert!(matches!(
            read_model(&mut bumped.as_slice()),
            Err(ModelError::Version { found: 9, expected: 1 })
        ));
        let short = &bytes[..bytes.len() - 10];
        assert!(matches!(read_model(&mut &short[..]), Err(ModelError::Truncated { .. })));
    }
}

//! Dataset container: `MOFS`, version byte, u32-LE header length, JSON
//! header, then little-endian f32 `a` and `u` blocks of `N·H·W` values.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Field, Normalizers, OperatorDataset, Sample};
use crate::error::{LoadError, Result};

pub const MAGIC: &[u8; 4] = b"MOFS";
pub const VERSION: u8 = 1;
const PREFIX: usize = 4 + 1 + 4;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    name: String,
    operator_id: usize,
    #[serde(rename = "N")]
    n: usize,
    #[serde(rename = "H")]
    h: usize,
    #[serde(rename = "W")]
    w: usize,
    generator_params: BTreeMap<String, f64>,
    normalizers: Normalizers,
    description_text: String,
    checksum: String,
}

const CHECKSUM_LEN: usize = 32;

/// SHA-256 prefix over the raw header (checksum digits zeroed) and the blocks.
fn checksum(json: &[u8], blocks: &[u8]) -> Option<String> {
    let start = json.len().checked_sub(CHECKSUM_LEN + 2)?;
    if !json.ends_with(b"\"}") {
        return None;
    }
    let mut raw = json.to_vec();
    raw[start..start + CHECKSUM_LEN].fill(b'0');
    let mut hasher = Sha256::new();
    hasher.update(&raw);
    hasher.update(blocks);
    Some(hasher.finalize()[..CHECKSUM_LEN / 2].iter().map(|b| format!("{b:02x}")).collect())
}

pub fn write_dataset(ds: &OperatorDataset) -> Vec<u8> {
    let (h, w) = ds.dims();
    let mut blocks = Vec::with_capacity(2 * ds.len() * h * w * 4);
    for s in &ds.samples {
        blocks.extend(s.a.values().iter().flat_map(|&v| (v as f32).to_le_bytes()));
    }
    for s in &ds.samples {
        blocks.extend(s.u.values().iter().flat_map(|&v| (v as f32).to_le_bytes()));
    }
    let mut header = Header {
        name: ds.name.clone(),
        operator_id: ds.operator_id,
        n: ds.len(),
        h,
        w,
        generator_params: ds.generator_params.clone(),
        normalizers: ds.normalizers,
        description_text: ds.description_text.clone(),
        checksum: "0".repeat(CHECKSUM_LEN),
    };
    let mut json = serde_json::to_vec(&header).expect("header serializes");
    header.checksum = checksum(&json, &blocks).expect("checksum is the last field");
    let start = json.len() - CHECKSUM_LEN - 2;
    json[start..start + CHECKSUM_LEN].copy_from_slice(header.checksum.as_bytes());
    let mut out = Vec::with_capacity(PREFIX + json.len() + blocks.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&blocks);
    out
}

pub fn read_dataset(bytes: &[u8]) -> Result<OperatorDataset> {
    if bytes.len() < 4 {
        return Err(LoadError::Truncated { needed: PREFIX, found: bytes.len() }.into());
    }
    if &bytes[..4] != MAGIC {
        return Err(LoadError::BadMagic { expected: "MOFS".into(), found: bytes[..4].to_vec() }.into());
    }
    if bytes.len() < PREFIX {
        return Err(LoadError::Truncated { needed: PREFIX, found: bytes.len() }.into());
    }
    if bytes[4] != VERSION {
        return Err(LoadError::UnsupportedVersion(bytes[4]).into());
    }
    let hlen = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let body = &bytes[PREFIX..];
    if body.len() < hlen {
        return Err(LoadError::Truncated { needed: PREFIX + hlen, found: bytes.len() }.into());
    }
    let header: Header =
        serde_json::from_slice(&body[..hlen]).map_err(|e| LoadError::Header(e.to_string()))?;
    if header.n == 0 || header.h < super::MIN_SIDE || header.w < super::MIN_SIDE {
        return Err(LoadError::Header(format!("invalid dimensions N={} H={} W={}", header.n, header.h, header.w)).into());
    }
    let per = header
        .n
        .checked_mul(header.h)
        .and_then(|v| v.checked_mul(header.w))
        .ok_or_else(|| LoadError::Header("dimensions overflow".into()))?;
    let expected = 2 * per * 4;
    let blocks = &body[hlen..];
    if blocks.len() < expected {
        return Err(LoadError::Truncated { needed: PREFIX + hlen + expected, found: bytes.len() }.into());
    }
    if blocks.len() > expected {
        return Err(LoadError::ShapeMismatch { expected, found: blocks.len() }.into());
    }
    if checksum(&body[..hlen], blocks).as_deref() != Some(header.checksum.as_str()) {
        return Err(LoadError::Header("checksum mismatch".into()).into());
    }
    let floats: Vec<f64> = blocks
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
        .collect();
    let hw = header.h * header.w;
    let (a_block, u_block) = floats.split_at(per);
    let mut samples = Vec::with_capacity(header.n);
    for k in 0..header.n {
        let a = Field::new(header.h, header.w, a_block[k * hw..(k + 1) * hw].to_vec())?;
        let u = Field::new(header.h, header.w, u_block[k * hw..(k + 1) * hw].to_vec())?;
        samples.push(Sample { a, u });
    }
    Ok(OperatorDataset {
        operator_id: header.operator_id,
        name: header.name,
        samples,
        generator_params: header.generator_params,
        normalizers: header.normalizers,
        description_text: header.description_text,
    })
}

pub fn save_dataset(ds: &OperatorDataset, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, write_dataset(ds))?;
    Ok(())
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<OperatorDataset> {
    read_dataset(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_darcy;
    use crate::error::MofsError;

    fn sample() -> OperatorDataset {
        generate_darcy(10.0, 3, 8, 8, 1).unwrap()
    }

    fn load_err(bytes: &[u8]) -> LoadError {
        match read_dataset(bytes) {
            Err(MofsError::Load(e)) => e,
            other => panic!("expected load error, got {other:?}"),
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let first = write_dataset(&sample());
        let second = write_dataset(&read_dataset(&first).unwrap());
        assert_eq!(first, second);
    }

    #[test]
    fn block_length_matches_header_arithmetic() {
        let bytes = write_dataset(&sample());
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        assert_eq!(bytes.len() - 9 - hlen, 2 * 3 * 8 * 8 * 4);
    }

    #[test]
    fn distinct_errors_for_magic_version_truncation_and_shape() {
        let bytes = write_dataset(&sample());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(load_err(&bad), LoadError::BadMagic { .. }));
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert!(matches!(load_err(&bad), LoadError::UnsupportedVersion(2)));
        assert!(matches!(load_err(&bytes[..bytes.len() - 1]), LoadError::Truncated { .. }));
        let mut long = bytes.clone();
        long.extend_from_slice(&[0; 4]);
        assert!(matches!(load_err(&long), LoadError::ShapeMismatch { .. }));
    }

    #[test]
    fn every_single_header_byte_corruption_is_detected() {
        let bytes = write_dataset(&sample());
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        for pos in 0..9 + hlen {
            for flip in [0x01u8, 0x20, 0x80] {
                let mut bad = bytes.clone();
                bad[pos] ^= flip;
                assert!(read_dataset(&bad).is_err(), "byte {pos} ^ {flip:#x} loaded silently");
            }
        }
    }

    #[test]
    fn payload_corruption_is_detected() {
        let mut bytes = write_dataset(&sample());
        let n = bytes.len();
        bytes[n - 7] ^= 0x10;
        assert!(read_dataset(&bytes).is_err());
    }
}

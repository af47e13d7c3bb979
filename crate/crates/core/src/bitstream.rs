//! Byte-exact container format.
//!
//! Layout (all multi-byte integers little-endian):
//!
//! ```text
//! header:  magic "BPCC" | version u8 | H u16 | W u16 | fov_up f32 |
//!          fov_down f32 | frame_count u32 | k u8 | intra codec u8 |
//!          residual codec u8 | mask codec u8 | quality f32
//! record:  frame_type u8 | chunk_count u8 | chunks...
//! chunk:   id u8 | length u32 | bytes
//! ```
//!
//! One record per frame, in frame order. Chunks are length-prefixed so a
//! reader can skip ids it does not understand.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::error::{Error, Result};
use crate::projection::SensorConfig;

pub const MAGIC: [u8; 4] = *b"BPCC";
pub const VERSION: u8 = 1;

/// Chunk ids understood by this version.
pub mod chunk_id {
    pub const MASK: u8 = 1;
    pub const INTRA: u8 = 2;
    pub const RESIDUAL: u8 = 3;
}

/// Codec ids recorded in the header.
pub mod codec_id {
    pub const INTRA_REGION: u8 = 0;
    pub const RESIDUAL_HANDCRAFTED: u8 = 0;
    pub const RESIDUAL_LEARNED: u8 = 1;
    pub const MASK_CONTEXT_BINARY: u8 = 0;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ContainerHeader {
    pub version: u8,
    pub height: u16,
    pub width: u16,
    pub fov_up_deg: f32,
    pub fov_down_deg: f32,
    pub frame_count: u32,
    pub k: u8,
    pub intra_codec: u8,
    pub residual_codec: u8,
    pub mask_codec: u8,
    /// Handcrafted path: residual quantization step in meters.
    /// Learned path: index into the lambda ladder, stored as f32.
    pub quality: f32,
}

impl ContainerHeader {
    pub const BYTE_LEN: usize = 4 + 1 + 2 + 2 + 4 + 4 + 4 + 1 + 1 + 1 + 1 + 4;

    /// Sensor geometry carried by the header (mount height is irrelevant to
    /// decoding and left at its default).
    pub fn sensor(&self) -> SensorConfig {
        SensorConfig {
            height: usize::from(self.height),
            width: usize::from(self.width),
            fov_up_deg: self.fov_up_deg,
            fov_down_deg: self.fov_down_deg,
            ..SensorConfig::default()
        }
    }

    fn write_to(&self, out: &mut impl Write) -> Result<()> {
        out.write_all(&MAGIC)?;
        out.write_u8(self.version)?;
        out.write_u16::<LittleEndian>(self.height)?;
        out.write_u16::<LittleEndian>(self.width)?;
        out.write_f32::<LittleEndian>(self.fov_up_deg)?;
        out.write_f32::<LittleEndian>(self.fov_down_deg)?;
        out.write_u32::<LittleEndian>(self.frame_count)?;
        out.write_u8(self.k)?;
        out.write_u8(self.intra_codec)?;
        out.write_u8(self.residual_codec)?;
        out.write_u8(self.mask_codec)?;
        out.write_f32::<LittleEndian>(self.quality)?;
        Ok(())
    }

    fn read_from(input: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        input
            .read_exact(&mut magic)
            .map_err(|_| Error::UnsupportedFormat("file shorter than header".into()))?;
        if magic != MAGIC {
            return Err(Error::UnsupportedFormat(format!(
                "bad magic {magic:02x?}"
            )));
        }
        let version = input.read_u8()?;
        if version != VERSION {
            return Err(Error::UnsupportedFormat(format!(
                "unsupported version {version}"
            )));
        }
        Ok(ContainerHeader {
            version,
            height: input.read_u16::<LittleEndian>()?,
            width: input.read_u16::<LittleEndian>()?,
            fov_up_deg: input.read_f32::<LittleEndian>()?,
            fov_down_deg: input.read_f32::<LittleEndian>()?,
            frame_count: input.read_u32::<LittleEndian>()?,
            k: input.read_u8()?,
            intra_codec: input.read_u8()?,
            residual_codec: input.read_u8()?,
            mask_codec: input.read_u8()?,
            quality: input.read_f32::<LittleEndian>()?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub id: u8,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrameType {
    Intra = 0,
    Inter = 1,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameRecord {
    pub frame_type: FrameType,
    pub chunks: Vec<Chunk>,
}

impl FrameRecord {
    pub fn chunk(&self, id: u8) -> Option<&Chunk> {
        self.chunks.iter().find(|c| c.id == id)
    }

    fn byte_len(&self) -> u64 {
        2 + self
            .chunks
            .iter()
            .map(|c| 5 + c.bytes.len() as u64)
            .sum::<u64>()
    }
}

/// Total size in bits of the serialized container; used for bpp accounting
/// and cross-checked against the file size in tests.
pub fn container_bits(records: &[FrameRecord]) -> u64 {
    8 * (ContainerHeader::BYTE_LEN as u64 + records.iter().map(FrameRecord::byte_len).sum::<u64>())
}

/// Write the container; returns the total byte count.
pub fn write_container(
    header: &ContainerHeader,
    records: &[FrameRecord],
    path: &Path,
) -> Result<u64> {
    if records.len() != header.frame_count as usize {
        return Err(Error::InvalidParameter(format!(
            "header announces {} frames but {} records given",
            header.frame_count,
            records.len()
        )));
    }
    let mut out = BufWriter::new(File::create(path)?);
    header.write_to(&mut out)?;
    for record in records {
        out.write_u8(record.frame_type as u8)?;
        out.write_u8(record.chunks.len() as u8)?;
        for chunk in &record.chunks {
            out.write_u8(chunk.id)?;
            out.write_u32::<LittleEndian>(chunk.bytes.len() as u32)?;
            out.write_all(&chunk.bytes)?;
        }
    }
    out.flush()?;
    Ok(container_bits(records) / 8)
}

pub fn read_container(path: &Path) -> Result<(ContainerHeader, Vec<FrameRecord>)> {
    let mut input = BufReader::new(File::open(path)?);
    let header = ContainerHeader::read_from(&mut input)?;
    let mut records = Vec::with_capacity(header.frame_count as usize);
    for record_idx in 0..header.frame_count as usize {
        let parse_err = |what: &str| Error::ContainerParse {
            record: record_idx,
            reason: what.to_string(),
        };
        let frame_type = match input.read_u8().map_err(|_| parse_err("missing frame type"))? {
            0 => FrameType::Intra,
            1 => FrameType::Inter,
            other => {
                return Err(Error::ContainerParse {
                    record: record_idx,
                    reason: format!("unknown frame type {other}"),
                })
            }
        };
        let chunk_count = input
            .read_u8()
            .map_err(|_| parse_err("missing chunk count"))?;
        let mut chunks = Vec::with_capacity(usize::from(chunk_count));
        for _ in 0..chunk_count {
            let id = input.read_u8().map_err(|_| parse_err("missing chunk id"))?;
            let len = input
                .read_u32::<LittleEndian>()
                .map_err(|_| parse_err("missing chunk length"))?;
            let mut bytes = vec![0u8; len as usize];
            input
                .read_exact(&mut bytes)
                .map_err(|_| parse_err("chunk body truncated"))?;
            chunks.push(Chunk { id, bytes });
        }
        records.push(FrameRecord { frame_type, chunks });
    }
    Ok((header, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    fn test_header(frame_count: u32) -> ContainerHeader {
        ContainerHeader {
            version: VERSION,
            height: 32,
            width: 128,
            fov_up_deg: 3.0,
            fov_down_deg: -25.0,
            frame_count,
            k: 1,
            intra_codec: codec_id::INTRA_REGION,
            residual_codec: codec_id::RESIDUAL_HANDCRAFTED,
            mask_codec: codec_id::MASK_CONTEXT_BINARY,
            quality: 0.05,
        }
    }

    #[test]
    fn zero_frame_container_is_header_only() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("empty.bpcc");
        let bytes = write_container(&test_header(0), &[], &path).unwrap();
        assert_eq!(bytes, ContainerHeader::BYTE_LEN as u64);
        assert_eq!(std::fs::metadata(&path).unwrap().len(), bytes);
        let (header, records) = read_container(&path).unwrap();
        assert_eq!(header, test_header(0));
        assert!(records.is_empty());
    }

    #[test]
    fn roundtrip_with_random_chunks_and_exact_accounting() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("seq.bpcc");
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let records: Vec<FrameRecord> = (0..3)
            .map(|i| {
                let n_chunks = rng.gen_range(1..4);
                FrameRecord {
                    frame_type: if i % 2 == 0 {
                        FrameType::Intra
                    } else {
                        FrameType::Inter
                    },
                    chunks: (0..n_chunks)
                        .map(|c| Chunk {
                            id: c as u8 + 1,
                            bytes: (0..rng.gen_range(0..200)).map(|_| rng.gen()).collect(),
                        })
                        .collect(),
                }
            })
            .collect();
        let byte_count = write_container(&test_header(3), &records, &path).unwrap();
        assert_eq!(std::fs::metadata(&path).unwrap().len(), byte_count);
        assert_eq!(container_bits(&records), byte_count * 8);

        // Per-part accounting: header + framing + chunk payloads.
        let chunk_bits: u64 = records
            .iter()
            .flat_map(|r| &r.chunks)
            .map(|c| 8 * c.bytes.len() as u64)
            .sum();
        let framing_bits: u64 = records
            .iter()
            .map(|r| 8 * (2 + 5 * r.chunks.len() as u64))
            .sum();
        assert_eq!(
            byte_count * 8,
            8 * ContainerHeader::BYTE_LEN as u64 + chunk_bits + framing_bits
        );

        let (header, back) = read_container(&path).unwrap();
        assert_eq!(header, test_header(3));
        assert_eq!(back, records);
    }

    #[test]
    fn bad_magic_and_version_are_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.bpcc");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(matches!(
            read_container(&path),
            Err(Error::UnsupportedFormat(_))
        ));

        let good = dir.path().join("good.bpcc");
        write_container(&test_header(0), &[], &good).unwrap();
        let mut bytes = std::fs::read(&good).unwrap();
        bytes[4] = 99; // version
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_container(&path),
            Err(Error::UnsupportedFormat(_))
        ));
    }

    #[test]
    fn truncation_names_the_failing_record() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("trunc.bpcc");
        let records = vec![
            FrameRecord {
                frame_type: FrameType::Intra,
                chunks: vec![Chunk {
                    id: chunk_id::INTRA,
                    bytes: vec![7; 50],
                }],
            },
            FrameRecord {
                frame_type: FrameType::Inter,
                chunks: vec![Chunk {
                    id: chunk_id::MASK,
                    bytes: vec![9; 50],
                }],
            },
        ];
        write_container(&test_header(2), &records, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 30]).unwrap();
        match read_container(&path) {
            Err(Error::ContainerParse { record, .. }) => assert_eq!(record, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }
}

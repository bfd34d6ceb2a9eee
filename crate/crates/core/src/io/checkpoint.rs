//! Binary checkpoint container, little-endian throughout:
//!
//! ```text
//! "STKC"  u32 version  u64 header_len  header (JSON)
//! u32 block_count  { u64 len  f64 × len } × block_count
//! ```
//!
//! Blocks: the three plane tables, density weights, color weights, the
//! optimizer's first and second moments per group, then the occupancy
//! cache when the header says one is present.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::occupancy::{OccupancyConfig, OccupancyGrid};
use crate::optim::{AdamConfig, AdamW};
use crate::radiance_field::{FieldConfig, RadianceField};
use crate::trainer::{TrainConfig, Trainer};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"STKC";
pub const CHECKPOINT_VERSION: u32 = 1;
const GROUPS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    field: FieldConfig,
    train: TrainConfig,
    background: [f64; 3],
    iteration: u64,
    adam: AdamConfig,
    adam_steps: u64,
    occupancy: Option<OccupancyHeader>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct OccupancyHeader {
    config: OccupancyConfig,
    refreshes: u64,
}

pub fn encode_checkpoint(trainer: &Trainer) -> Vec<u8> {
    let field = &trainer.field;
    let header = Header {
        field: *field.config(),
        train: trainer.config.clone(),
        background: trainer.background,
        iteration: trainer.iteration(),
        adam: trainer.optimizer.config,
        adam_steps: trainer.optimizer.steps(),
        occupancy: field.occupancy.as_ref().map(|g| OccupancyHeader {
            config: *g.config(),
            refreshes: g.refreshes(),
        }),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let (first, second) = trainer.optimizer.moments();
    let mut blocks: Vec<&[f64]> = field.param_groups().to_vec();
    blocks.extend(first.iter().map(Vec::as_slice));
    blocks.extend(second.iter().map(Vec::as_slice));
    if let Some(g) = &field.occupancy {
        blocks.push(g.cache());
    }

    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(blocks.len() as u32).to_le_bytes());
    for b in blocks {
        out.extend_from_slice(&(b.len() as u64).to_le_bytes());
        for v in b {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(Error::format(self.path, format!("truncated at byte {}", self.pos)));
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn block(&mut self) -> Result<Vec<f64>> {
        let n = self.u64()? as usize;
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format(self.path, "block length overflows"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

/// `path` is only used in error messages.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Trainer> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::format(path, "not a checkpoint (bad magic)"));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::CheckpointVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let hlen = r.u64()? as usize;
    let header: Header = serde_json::from_slice(r.take(hlen)?).map_err(|e| Error::format(path, e))?;
    let count = r.u32()? as usize;
    let expected = 3 * GROUPS + usize::from(header.occupancy.is_some());
    if count != expected {
        return Err(Error::format(path, format!("{count} blocks, expected {expected}")));
    }
    let mut blocks = (0..count).map(|_| r.block()).collect::<Result<Vec<_>>>()?.into_iter();
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes"));
    }

    let bad = |e: Error| Error::format(path, e);
    let mut field = RadianceField::zeros(header.field).map_err(bad)?;
    for p in 0..3 {
        field.encoder.planes[p].set_tables(blocks.next().expect("counted")).map_err(bad)?;
    }
    field.density_net.set_params(blocks.next().expect("counted")).map_err(bad)?;
    field.color_net.set_params(blocks.next().expect("counted")).map_err(bad)?;
    let first: Vec<Vec<f64>> = blocks.by_ref().take(GROUPS).collect();
    let second: Vec<Vec<f64>> = blocks.by_ref().take(GROUPS).collect();
    if let Some(o) = header.occupancy {
        let cache = blocks.next().expect("counted");
        field.occupancy = Some(OccupancyGrid::from_cache(o.config, header.field.bounds, cache, o.refreshes).map_err(bad)?);
    }
    let lens: Vec<usize> = field.param_groups().iter().map(|g| g.len()).collect();
    let mut optimizer = AdamW::new(header.adam, &lens);
    optimizer.restore(header.adam_steps, first, second).map_err(bad)?;
    header.train.validate().map_err(bad)?;
    Ok(Trainer::from_parts(
        field,
        header.train,
        header.background,
        Some(optimizer),
        header.iteration,
    ))
}

pub fn save_checkpoint(path: &Path, trainer: &Trainer) -> Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_checkpoint(trainer)).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hash_encoding::GridConfig;

    fn small_trainer() -> Trainer {
        let field = FieldConfig {
            grid: GridConfig::with_top_resolution(3, 2, 6, 4, 16),
            hidden_width: 8,
            lip_width: 4,
            expr_width: 2,
            ..Default::default()
        };
        let mut t = Trainer::new(field, TrainConfig::default(), [0.1, 0.2, 0.3]).unwrap();
        let r = t.field.param_groups_mut();
        r.into_iter().flatten().enumerate().for_each(|(i, v)| *v += (i as f64 * 0.37).sin() * 1e-3);
        t
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let t = small_trainer();
        let bytes = encode_checkpoint(&t);
        let back = decode_checkpoint(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back.field, t.field);
        assert_eq!(back.optimizer, t.optimizer);
        assert_eq!(back.config, t.config);
        assert_eq!(back.iteration(), t.iteration());
        assert_eq!(encode_checkpoint(&back), bytes);
    }

    #[test]
    fn version_and_magic_are_checked() {
        let t = small_trainer();
        let mut bytes = encode_checkpoint(&t);
        bytes[4..8].copy_from_slice(&7u32.to_le_bytes());
        assert!(matches!(
            decode_checkpoint(&bytes, Path::new("mem")),
            Err(Error::CheckpointVersion { found: 7, expected: 1 })
        ));
        bytes[0] = b'X';
        assert!(decode_checkpoint(&bytes, Path::new("mem")).is_err());
        let good = encode_checkpoint(&t);
        assert!(decode_checkpoint(&good[..good.len() - 3], Path::new("mem")).is_err());
    }
}

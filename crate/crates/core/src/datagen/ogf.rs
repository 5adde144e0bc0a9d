//! OGF1: little-endian pair file.
//!
//! ```text
//! "OGF1" | version u32 | n1 u32 | n2 u32 | flags u8
//! source n1x3 f32 | target n2x3 f32 | [flow n1x3 f32] | [occlusion n1 f32]
//! ```
//! Flag bit 0 marks the flow block, bit 1 the occlusion block.

use std::fs;
use std::path::Path;

use super::ScenePair;
use crate::error::{Error, Result};
use crate::geometry::{FlowField, OcclusionMask, PointCloud};

pub const MAGIC: [u8; 4] = *b"OGF1";
pub const FORMAT_VERSION: u32 = 1;

const FLAG_FLOW: u8 = 1;
const FLAG_OCC: u8 = 2;

pub fn encode_pair(pair: &ScenePair) -> Vec<u8> {
    let (n1, n2) = (pair.source.len(), pair.target.len());
    let mut flags = 0u8;
    if pair.gt_flow.is_some() {
        flags |= FLAG_FLOW;
    }
    if pair.gt_occlusion.is_some() {
        flags |= FLAG_OCC;
    }
    let mut out = Vec::with_capacity(17 + 4 * (7 * n1 + 3 * n2));
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(n1 as u32).to_le_bytes());
    out.extend_from_slice(&(n2 as u32).to_le_bytes());
    out.push(flags);
    let mut put = |vals: &mut dyn Iterator<Item = f32>| {
        for v in vals {
            out.extend_from_slice(&v.to_le_bytes());
        }
    };
    put(&mut pair.source.positions().iter().flatten().copied());
    put(&mut pair.target.positions().iter().flatten().copied());
    if let Some(f) = &pair.gt_flow {
        put(&mut f.0.iter().flatten().copied());
    }
    if let Some(o) = &pair.gt_occlusion {
        put(&mut o.0.iter().copied());
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(Error::Truncated(what));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u32(&mut self, what: &'static str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn floats(&mut self, n: usize, what: &'static str) -> Result<Vec<f32>> {
        let len = n.checked_mul(4).ok_or(Error::Truncated(what))?;
        let b = self.take(len, what)?;
        Ok(b.chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    fn points(&mut self, n: usize, what: &'static str) -> Result<Vec<[f32; 3]>> {
        Ok(self
            .floats(n * 3, what)?
            .chunks_exact(3)
            .map(|c| [c[0], c[1], c[2]])
            .collect())
    }
}

pub fn decode_pair(bytes: &[u8]) -> Result<ScenePair> {
    let mut r = Reader { buf: bytes };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::BadMagic {
            expected: MAGIC,
            found: [magic[0], magic[1], magic[2], magic[3]],
        });
    }
    let version = r.u32("header")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let n1 = r.u32("header")? as usize;
    let n2 = r.u32("header")? as usize;
    let flags = r.take(1, "header")?[0];
    if flags & !(FLAG_FLOW | FLAG_OCC) != 0 {
        return Err(Error::Inconsistent(format!("unknown flag bits {flags:#04x}")));
    }
    if n1 == 0 || n2 == 0 {
        return Err(Error::Inconsistent(format!("empty cloud (n1 = {n1}, n2 = {n2})")));
    }
    let source = r.points(n1, "source block")?;
    let target = r.points(n2, "target block")?;
    let flow = if flags & FLAG_FLOW != 0 {
        Some(FlowField(r.points(n1, "flow block")?))
    } else {
        None
    };
    let occ = if flags & FLAG_OCC != 0 {
        Some(OcclusionMask(r.floats(n1, "occlusion block")?))
    } else {
        None
    };
    if !r.buf.is_empty() {
        return Err(Error::Inconsistent(format!("{} trailing bytes", r.buf.len())));
    }
    let inconsistent = |e: Error| Error::Inconsistent(e.to_string());
    ScenePair::new(
        PointCloud::from_positions(source).map_err(inconsistent)?,
        PointCloud::from_positions(target).map_err(inconsistent)?,
        flow,
        occ,
    )
    .map_err(inconsistent)
}

pub fn write_pair(pair: &ScenePair, path: &Path) -> Result<()> {
    fs::write(path, encode_pair(pair))?;
    Ok(())
}

pub fn read_pair(path: &Path) -> Result<ScenePair> {
    decode_pair(&fs::read(path)?)
}

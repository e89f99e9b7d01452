//! Feature file layout (all integers little-endian):
//!
//! ```text
//! "SCCF" | version u16 = 1 | level_count u16
//! level_count x (C u32, H u32, W u32)
//! payload: f32 values of every level, row-major, in level order
//! [optional] "SCCM" | group_count u16 | per group: n u16, n x level u16
//!            | semantic level u16 (0xFFFF = none)
//! ```
//!
//! The trailing `SCCM` block is written only when the grouping cannot be
//! inferred from runs of equal spatial size, or when a semantic level is
//! declared. Without it a reader infers the grouping.

use std::io::{Read, Write};
use std::path::Path;

use super::{infer_groups, FeatureStack};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const FEATURE_MAGIC: [u8; 4] = *b"SCCF";
pub const FEATURE_VERSION: u16 = 1;
const META_MAGIC: [u8; 4] = *b"SCCM";
const NO_SEMANTIC: u16 = u16::MAX;

pub fn write_features(fs: &FeatureStack, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut file = std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    write_features_to(fs, &mut file).map_err(|e| Error::io(path, e))?;
    file.flush().map_err(|e| Error::io(path, e))
}

pub fn write_features_to<W: Write>(fs: &FeatureStack, w: &mut W) -> std::io::Result<()> {
    let levels = fs.levels();
    let count = u16::try_from(levels.len()).map_err(|_| std::io::Error::other("too many levels"))?;
    w.write_all(&FEATURE_MAGIC)?;
    w.write_all(&FEATURE_VERSION.to_le_bytes())?;
    w.write_all(&count.to_le_bytes())?;
    for l in levels {
        for &d in l.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
    }
    for l in levels {
        for v in l.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    let needs_meta = fs.semantic_level().is_some() || fs.groups() != infer_groups(levels).as_slice();
    if needs_meta {
        w.write_all(&META_MAGIC)?;
        w.write_all(&(fs.groups().len() as u16).to_le_bytes())?;
        for g in fs.groups() {
            w.write_all(&(g.len() as u16).to_le_bytes())?;
            for &i in g {
                w.write_all(&(i as u16).to_le_bytes())?;
            }
        }
        let sem = fs.semantic_level().map_or(NO_SEMANTIC, |s| s as u16);
        w.write_all(&sem.to_le_bytes())?;
    }
    Ok(())
}

/// Reads a feature file. The image id is the file stem.
pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureStack> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    read_features_from(&bytes, id)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let s = self.buf.get(self.pos..self.pos + n)?;
        self.pos += n;
        Some(s)
    }

    fn u16(&mut self) -> Option<u16> {
        self.take(2).map(|b| u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

pub fn read_features_from(bytes: &[u8], image_id: impl Into<String>) -> Result<FeatureStack> {
    let mut cur = Cursor { buf: bytes, pos: 0 };
    let magic: [u8; 4] = cur
        .take(4)
        .ok_or(Error::TruncatedHeader)?
        .try_into()
        .expect("4 bytes");
    if magic != FEATURE_MAGIC {
        return Err(Error::BadMagic {
            expected: FEATURE_MAGIC,
            found: magic,
        });
    }
    let version = cur.u16().ok_or(Error::TruncatedHeader)?;
    if version != FEATURE_VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let count = cur.u16().ok_or(Error::TruncatedHeader)? as usize;
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let c = cur.u32().ok_or(Error::TruncatedHeader)? as usize;
        let h = cur.u32().ok_or(Error::TruncatedHeader)? as usize;
        let w = cur.u32().ok_or(Error::TruncatedHeader)? as usize;
        shapes.push([c, h, w]);
    }
    let needed: usize = shapes.iter().map(|s| 4 * s.iter().product::<usize>()).sum();
    if cur.remaining() < needed {
        return Err(Error::TruncatedPayload {
            needed,
            available: cur.remaining(),
        });
    }
    let mut levels = Vec::with_capacity(count);
    for s in shapes {
        let n: usize = s.iter().product();
        let raw = cur.take(4 * n).expect("length checked");
        let data = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        levels.push(Tensor::new(s.to_vec(), data)?);
    }
    let id = image_id.into();
    if cur.remaining() == 0 {
        return FeatureStack::with_inferred_groups(id, levels);
    }
    let malformed = || Error::Malformed("bad metadata block".into());
    if cur.take(4) != Some(&META_MAGIC[..]) {
        return Err(Error::Malformed("unexpected bytes after payload".into()));
    }
    let ng = cur.u16().ok_or_else(malformed)? as usize;
    let mut groups = Vec::with_capacity(ng);
    for _ in 0..ng {
        let n = cur.u16().ok_or_else(malformed)? as usize;
        let g = (0..n)
            .map(|_| cur.u16().map(usize::from))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(malformed)?;
        groups.push(g);
    }
    let sem = cur.u16().ok_or_else(malformed)?;
    if cur.remaining() != 0 {
        return Err(malformed());
    }
    let sem = (sem != NO_SEMANTIC).then_some(sem as usize);
    FeatureStack::new(id, levels, groups, sem)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn encode(fs: &FeatureStack) -> Vec<u8> {
        let mut buf = Vec::new();
        write_features_to(fs, &mut buf).unwrap();
        buf
    }

    #[test]
    fn empty_stack_is_header_only() {
        let fs = FeatureStack::with_inferred_groups("e", vec![]).unwrap();
        assert_eq!(encode(&fs), b"SCCF\x01\x00\x00\x00");
    }

    #[test]
    fn single_value_payload_bytes() {
        let t = Tensor::new([1, 1, 1], vec![2.5f32]).unwrap();
        let fs = FeatureStack::with_inferred_groups("one", vec![t]).unwrap();
        let bytes = encode(&fs);
        assert_eq!(bytes.len(), 8 + 12 + 4);
        assert_eq!(&bytes[8..20], &[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        assert_eq!(&bytes[20..], &[0x00, 0x00, 0x20, 0x40]);
        assert_eq!(read_features_from(&bytes, "one").unwrap(), fs);
    }

    #[test]
    fn distinct_errors() {
        let t = Tensor::new([1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let fs = FeatureStack::with_inferred_groups("x", vec![t]).unwrap();
        let good = encode(&fs);

        let mut bad = good.clone();
        bad[0] = b'X';
        assert!(matches!(read_features_from(&bad, "x"), Err(Error::BadMagic { .. })));

        let mut ver = good.clone();
        ver[4] = 2;
        assert!(matches!(read_features_from(&ver, "x"), Err(Error::VersionMismatch(2))));

        let trunc = &good[..good.len() - 3];
        assert!(matches!(
            read_features_from(trunc, "x"),
            Err(Error::TruncatedPayload { needed: 16, available: 13 })
        ));

        let mut extra = good.clone();
        extra.extend_from_slice(b"junk");
        assert!(matches!(read_features_from(&extra, "x"), Err(Error::Malformed(_))));
    }

    #[test]
    fn metadata_block_round_trips() {
        let levels = vec![
            Tensor::full([2, 4, 4], 1.0f32),
            Tensor::full([2, 2, 2], 2.0f32),
            Tensor::full([3, 2, 2], 3.0f32),
            Tensor::full([4, 4, 4], 4.0f32),
        ];
        let fs = FeatureStack::new("m", levels, vec![vec![0], vec![1], vec![2]], Some(3)).unwrap();
        let bytes = encode(&fs);
        assert_eq!(read_features_from(&bytes, "m").unwrap(), fs);
    }
}

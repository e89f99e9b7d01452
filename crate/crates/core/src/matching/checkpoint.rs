//! Parameter checkpoints (integers little-endian):
//!
//! ```text
//! "SCCP" | version u16 = 1 | tensor_count u16
//! per tensor: name_len u16, UTF-8 name, ndim u16, ndim x u32 dims
//! payload: f32 values of every tensor in table order
//! ```
//!
//! Names carry a group prefix: `cross.`, `self.` (absent in shared mode) or
//! `merge.`. The entry `meta.arch` holds the group-norm group count and the
//! support squeeze size, which the tensor shapes do not determine.

use std::io::{Read, Write};
use std::path::Path;

use super::params::{MatchingConfig, MatchingParams, ParamSet};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"SCCP";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn write_checkpoint(params: &MatchingParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut entries: Vec<(String, &Tensor<f32>)> = Vec::new();
    let meta = Tensor::new([2], vec![params.config.gn_groups as f32, params.config.h_eps as f32])?;
    entries.push(("meta.arch".into(), &meta));
    for (prefix, set) in params.groups() {
        for (name, t) in set.iter() {
            let name = name.strip_prefix("merge.").unwrap_or(name);
            entries.push((format!("{prefix}.{name}"), t));
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(&CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(entries.len() as u16).to_le_bytes());
    for (name, t) in &entries {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.ndim() as u16).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, t) in &entries {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<MatchingParams> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    parse(&bytes)
}

fn parse(bytes: &[u8]) -> Result<MatchingParams> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(pos..pos + n).ok_or(Error::TruncatedHeader)?;
        pos += n;
        Ok(s)
    };
    let magic: [u8; 4] = take(4)?.try_into().expect("4 bytes");
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic {
            expected: CHECKPOINT_MAGIC,
            found: magic,
        });
    }
    let u16_at = |b: &[u8]| u16::from_le_bytes([b[0], b[1]]);
    let version = u16_at(take(2)?);
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch(version));
    }
    let count = u16_at(take(2)?) as usize;
    let mut table = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16_at(take(2)?) as usize;
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| Error::Malformed("non-UTF-8 tensor name".into()))?;
        let ndim = u16_at(take(2)?) as usize;
        let dims = (0..ndim)
            .map(|_| take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize))
            .collect::<Result<Vec<_>>>()?;
        table.push((name, dims));
    }
    let needed: usize = table.iter().map(|(_, d)| 4 * d.iter().product::<usize>()).sum();
    let available = bytes.len() - pos;
    if available != needed {
        return Err(if available < needed {
            Error::TruncatedPayload { needed, available }
        } else {
            Error::Malformed("trailing bytes after payload".into())
        });
    }
    let mut cross = Vec::new();
    let mut selfb = Vec::new();
    let mut merge = Vec::new();
    let mut meta = None;
    for (name, dims) in table {
        let n: usize = dims.iter().product();
        let data = bytes[pos..pos + 4 * n]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        pos += 4 * n;
        let t = Tensor::new(dims, data)?;
        let (prefix, rest) = name
            .split_once('.')
            .ok_or_else(|| Error::Malformed(format!("tensor name '{name}' lacks a group prefix")))?;
        match prefix {
            "meta" => meta = Some(t),
            "cross" => cross.push((rest.to_string(), t)),
            "self" => selfb.push((rest.to_string(), t)),
            "merge" => merge.push((format!("merge.{rest}"), t)),
            _ => return Err(Error::Malformed(format!("unknown tensor group '{prefix}'"))),
        }
    }
    let meta = meta.ok_or_else(|| Error::Malformed("missing meta.arch".into()))?;
    let config = infer_config(&cross, &meta)?;
    let params = MatchingParams {
        config,
        cross: ParamSet::new(cross),
        self_branch: (!selfb.is_empty()).then(|| ParamSet::new(selfb)),
        merge: ParamSet::new(merge),
    };
    validate(&params)?;
    Ok(params)
}

fn infer_config(cross: &[(String, Tensor<f32>)], meta: &Tensor<f32>) -> Result<MatchingConfig> {
    let shape = |name: &str| -> Result<&[usize]> {
        cross
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.shape())
            .ok_or_else(|| Error::Malformed(format!("missing tensor cross.{name}")))
    };
    let mut layer_channels = Vec::new();
    while let Ok(s) = shape(&format!("enc{}.0.wq", layer_channels.len())) {
        layer_channels.push(s[1]);
    }
    if meta.len() != 2 {
        return Err(Error::Malformed("meta.arch must hold 2 values".into()));
    }
    Ok(MatchingConfig {
        layer_channels,
        block_widths: [shape("enc0.0.wq")?[0], shape("enc0.1.wq")?[0]],
        merged_width: shape("mix0.wq")?[0],
        z_channels: shape("squeeze.w")?[0],
        decoder_widths: [shape("dec0.w")?[0], shape("dec1.w")?[0]],
        gn_groups: meta.data()[0] as usize,
        h_eps: meta.data()[1] as usize,
        kernel: shape("enc0.0.wq")?[2],
    })
}

fn validate(p: &MatchingParams) -> Result<()> {
    let layout = p.config.branch_layout();
    let check = |set: &ParamSet, what: &str| -> Result<()> {
        let ok = set.len() == layout.len()
            && set
                .iter()
                .zip(&layout)
                .all(|((n, t), (ln, ls))| n == ln && t.shape() == ls.as_slice());
        if ok {
            Ok(())
        } else {
            Err(Error::Malformed(format!("{what} parameters do not match the architecture")))
        }
    };
    check(&p.cross, "cross")?;
    if let Some(s) = &p.self_branch {
        check(s, "self")?;
    }
    let merge_ok = p.merge.get("merge.w").is_some_and(|t| t.shape() == [2, 4, 1, 1])
        && p.merge.get("merge.b").is_some_and(|t| t.shape() == [2])
        && p.merge.len() == 2;
    if !merge_ok {
        return Err(Error::Malformed("merge head must be merge.w 2x4x1x1 and merge.b 2".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::super::params::BranchMode;
    use super::*;

    #[test]
    fn round_trip_both_modes() {
        let dir = tempfile::tempdir().unwrap();
        for mode in [BranchMode::TwoBranch, BranchMode::Shared] {
            let p = MatchingParams::init(MatchingConfig::toy(), mode, 8);
            let path = dir.path().join("p.sccp");
            write_checkpoint(&p, &path).unwrap();
            assert_eq!(read_checkpoint(&path).unwrap(), p);
        }
    }

    #[test]
    fn rejects_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = MatchingParams::init(MatchingConfig::new(vec![1]), BranchMode::Shared, 8);
        let path = dir.path().join("p.sccp");
        write_checkpoint(&p, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'Z';
        assert!(matches!(parse(&bad), Err(Error::BadMagic { .. })));
        assert!(matches!(parse(&bytes[..bytes.len() - 1]), Err(Error::TruncatedPayload { .. })));
    }
}

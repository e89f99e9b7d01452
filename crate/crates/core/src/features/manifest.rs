use std::path::Path;

use super::FeatureStack;
use crate::error::{Error, Result};
use crate::keyvalue::{format_key_values, parse_key_values};

/// File name of the manifest inside a feature directory.
pub const MANIFEST_FILE: &str = "manifest.txt";

/// One exported level: layer identifier and `C x H x W` shape.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestLevel {
    pub layer: String,
    pub shape: [usize; 3],
}

/// Key=value description written next to exported feature files.
///
/// ```text
/// backbone=resnet50
/// image_size=256
/// level.0=layer2.0:512x32x32
/// groups=0,1;2,3;4,5
/// semantic_level=6
/// ```
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ExportManifest {
    pub backbone: String,
    pub image_size: usize,
    pub levels: Vec<ManifestLevel>,
    pub groups: Vec<Vec<usize>>,
    pub semantic_level: Option<usize>,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Malformed(format!("manifest: {}", msg.into()))
}

fn num(s: &str) -> Result<usize> {
    s.trim().parse().map_err(|_| bad(format!("expected an integer, got {s:?}")))
}

pub fn parse_groups(s: &str) -> Result<Vec<Vec<usize>>> {
    s.split(';')
        .filter(|g| !g.trim().is_empty())
        .map(|g| g.split(',').map(num).collect())
        .collect()
}

pub fn format_groups(groups: &[Vec<usize>]) -> String {
    groups
        .iter()
        .map(|g| g.iter().map(|i| i.to_string()).collect::<Vec<_>>().join(","))
        .collect::<Vec<_>>()
        .join(";")
}

impl ExportManifest {
    /// Manifest describing an in-memory stack.
    pub fn describe(backbone: &str, image_size: usize, stack: &FeatureStack) -> Self {
        Self {
            backbone: backbone.to_string(),
            image_size,
            levels: stack
                .levels()
                .iter()
                .enumerate()
                .map(|(i, l)| ManifestLevel {
                    layer: format!("level{i}"),
                    shape: [l.shape()[0], l.shape()[1], l.shape()[2]],
                })
                .collect(),
            groups: stack.groups().to_vec(),
            semantic_level: stack.semantic_level(),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut backbone = None;
        let mut image_size = None;
        let mut levels: Vec<Option<ManifestLevel>> = Vec::new();
        let mut groups = None;
        let mut semantic_level = None;
        for (k, v) in parse_key_values(text)? {
            match k.as_str() {
                "backbone" => backbone = Some(v),
                "image_size" => image_size = Some(num(&v)?),
                "groups" => groups = Some(parse_groups(&v)?),
                "semantic_level" => semantic_level = Some(num(&v)?),
                _ if k.starts_with("level.") => {
                    let i = num(&k["level.".len()..])?;
                    let (layer, dims) = v.rsplit_once(':').ok_or_else(|| bad(format!("level {i} needs layer:CxHxW")))?;
                    let d: Vec<usize> = dims.split('x').map(num).collect::<Result<_>>()?;
                    let shape: [usize; 3] = d.try_into().map_err(|_| bad(format!("level {i} shape must be CxHxW")))?;
                    if levels.len() <= i {
                        levels.resize(i + 1, None);
                    }
                    levels[i] = Some(ManifestLevel {
                        layer: layer.to_string(),
                        shape,
                    });
                }
                _ => {}
            }
        }
        let levels = levels
            .into_iter()
            .enumerate()
            .map(|(i, l)| l.ok_or_else(|| bad(format!("missing level.{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            backbone: backbone.ok_or_else(|| bad("missing backbone"))?,
            image_size: image_size.ok_or_else(|| bad("missing image_size"))?,
            levels,
            groups: groups.ok_or_else(|| bad("missing groups"))?,
            semantic_level,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }

    pub fn to_text(&self) -> String {
        let mut pairs = vec![
            ("backbone".to_string(), self.backbone.clone()),
            ("image_size".to_string(), self.image_size.to_string()),
        ];
        for (i, l) in self.levels.iter().enumerate() {
            let [c, h, w] = l.shape;
            pairs.push((format!("level.{i}"), format!("{}:{c}x{h}x{w}", l.layer)));
        }
        pairs.push(("groups".to_string(), format_groups(&self.groups)));
        if let Some(s) = self.semantic_level {
            pairs.push(("semantic_level".to_string(), s.to_string()));
        }
        format_key_values(pairs.iter().map(|(k, v)| (k.as_str(), v.clone())))
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Checks level shapes against `stack` and applies the declared
    /// grouping and semantic level.
    pub fn apply(&self, stack: FeatureStack) -> Result<FeatureStack> {
        if stack.levels().len() != self.levels.len() {
            return Err(bad(format!("{} levels declared, file has {}", self.levels.len(), stack.levels().len())));
        }
        for (l, t) in self.levels.iter().zip(stack.levels()) {
            if t.shape() != l.shape {
                return Err(Error::ShapeMismatch {
                    expected: l.shape.to_vec(),
                    got: t.shape().to_vec(),
                });
            }
        }
        stack.regroup(self.groups.clone(), self.semantic_level)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::toy_extract_features;
    use crate::RgbImage;

    #[test]
    fn toy_manifest_round_trip() {
        let stack = toy_extract_features(&RgbImage::new(32, 32)).unwrap();
        let m = ExportManifest::describe("toy", 32, &stack);
        assert_eq!(format_groups(&m.groups), "0,1;2,3;4,5");
        assert_eq!(m.semantic_level, Some(6));
        let back = ExportManifest::parse(&m.to_text()).unwrap();
        assert_eq!(back, m);
        let plain = FeatureStack::new(stack.image_id.clone(), stack.levels().to_vec(), vec![vec![0]], None).unwrap();
        assert_eq!(back.apply(plain).unwrap(), stack);
    }

    #[test]
    fn rejects_incomplete_manifests() {
        assert!(ExportManifest::parse("backbone=x\nimage_size=256\nlevel.1=a:1x2x2\ngroups=0\n").is_err());
        assert!(ExportManifest::parse("image_size=256\ngroups=\n").is_err());
        assert!(ExportManifest::parse("backbone=x\nimage_size=256\nlevel.0=a:1x2\ngroups=0\n").is_err());
        assert_eq!(parse_groups("0,1;2").unwrap(), vec![vec![0, 1], vec![2]]);
    }
}

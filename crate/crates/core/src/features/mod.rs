//! Backbone feature stacks, their on-disk format and a deterministic toy
//! extractor.

mod file;
mod manifest;
mod toy;

pub use file::{read_features, read_features_from, write_features, write_features_to, FEATURE_MAGIC, FEATURE_VERSION};
pub use manifest::{format_groups, parse_groups, ExportManifest, ManifestLevel, MANIFEST_FILE};
pub use toy::{toy_extract_features, ToyBackbone, TOY_SEED};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-level feature maps of one image.
///
/// Levels are ordered by ascending network depth. `groups` partitions the
/// levels that feed the correlation pyramid into layers of equal spatial
/// size, finest first. `semantic_level` names the map used to build the
/// semantic affinity graph; it need not belong to any group.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStack {
    pub image_id: String,
    levels: Vec<Tensor<f32>>,
    groups: Vec<Vec<usize>>,
    semantic_level: Option<usize>,
}

impl FeatureStack {
    pub fn new(
        image_id: impl Into<String>,
        levels: Vec<Tensor<f32>>,
        groups: Vec<Vec<usize>>,
        semantic_level: Option<usize>,
    ) -> Result<Self> {
        for (i, l) in levels.iter().enumerate() {
            if l.ndim() != 3 {
                return Err(Error::InvalidShape {
                    shape: l.shape().to_vec(),
                    reason: format!("feature level {i} must be C x H x W"),
                });
            }
        }
        let stack = Self {
            image_id: image_id.into(),
            levels,
            groups,
            semantic_level,
        };
        stack.validate()?;
        Ok(stack)
    }

    /// Stack whose grouping is inferred from runs of consecutive levels
    /// sharing a spatial size.
    pub fn with_inferred_groups(image_id: impl Into<String>, levels: Vec<Tensor<f32>>) -> Result<Self> {
        let groups = infer_groups(&levels);
        Self::new(image_id, levels, groups, None)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = vec![false; self.levels.len()];
        let mut prev_size: Option<(usize, usize)> = None;
        for (gi, g) in self.groups.iter().enumerate() {
            let Some(&first) = g.first() else {
                return Err(Error::GroupingMismatch(format!("group {gi} is empty")));
            };
            let size = self.spatial(first).ok_or_else(|| {
                Error::GroupingMismatch(format!("group {gi} names missing level {first}"))
            })?;
            for w in g.windows(2) {
                if w[0] >= w[1] {
                    return Err(Error::GroupingMismatch(format!("group {gi} is not in ascending depth order")));
                }
            }
            for &l in g {
                if l >= self.levels.len() || seen[l] {
                    return Err(Error::GroupingMismatch(format!("level {l} missing or grouped twice")));
                }
                seen[l] = true;
                if self.spatial(l) != Some(size) {
                    return Err(Error::GroupingMismatch(format!(
                        "group {gi} mixes spatial sizes"
                    )));
                }
            }
            if let Some(p) = prev_size {
                if size.0 > p.0 || size.1 > p.1 {
                    return Err(Error::GroupingMismatch(
                        "pyramid layers must not grow in spatial size".into(),
                    ));
                }
            }
            prev_size = Some(size);
        }
        if let Some(s) = self.semantic_level {
            if s >= self.levels.len() {
                return Err(Error::GroupingMismatch(format!("semantic level {s} out of range")));
            }
        }
        Ok(())
    }

    fn spatial(&self, level: usize) -> Option<(usize, usize)> {
        self.levels.get(level).map(|t| (t.shape()[1], t.shape()[2]))
    }

    pub fn levels(&self) -> &[Tensor<f32>] {
        &self.levels
    }

    pub fn level(&self, i: usize) -> &Tensor<f32> {
        &self.levels[i]
    }

    pub fn groups(&self) -> &[Vec<usize>] {
        &self.groups
    }

    /// Number of pyramid layers.
    pub fn pyramid_layers(&self) -> usize {
        self.groups.len()
    }

    pub fn semantic_level(&self) -> Option<usize> {
        self.semantic_level
    }

    pub fn semantic(&self) -> Option<&Tensor<f32>> {
        self.semantic_level.map(|i| &self.levels[i])
    }

    /// Replaces grouping and semantic level, e.g. from an exporter manifest.
    pub fn regroup(self, groups: Vec<Vec<usize>>, semantic_level: Option<usize>) -> Result<Self> {
        Self::new(self.image_id, self.levels, groups, semantic_level)
    }

    /// Spatial size `(H_p, W_p)` of pyramid layer `p`.
    pub fn layer_size(&self, p: usize) -> (usize, usize) {
        self.spatial(self.groups[p][0]).expect("validated grouping")
    }

    /// True when `other` has the same per-layer level shapes.
    pub fn compatible_with(&self, other: &FeatureStack) -> bool {
        self.groups.len() == other.groups.len()
            && self.groups.iter().zip(&other.groups).all(|(a, b)| {
                a.len() == b.len()
                    && a.iter()
                        .zip(b)
                        .all(|(&i, &j)| self.levels[i].shape() == other.levels[j].shape())
            })
    }
}

pub(crate) fn infer_groups(levels: &[Tensor<f32>]) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (i, l) in levels.iter().enumerate() {
        let size = (l.shape()[1], l.shape()[2]);
        match groups.last_mut() {
            Some(g) if {
                let f = &levels[g[0]];
                (f.shape()[1], f.shape()[2]) == size
            } =>
            {
                g.push(i)
            }
            _ => groups.push(vec![i]),
        }
    }
    groups
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lvl(c: usize, h: usize) -> Tensor<f32> {
        Tensor::zeros([c, h, h])
    }

    #[test]
    fn inferred_grouping_follows_spatial_runs() {
        let s = FeatureStack::with_inferred_groups("a", vec![lvl(2, 4), lvl(3, 4), lvl(2, 2)]).unwrap();
        assert_eq!(s.groups(), &[vec![0, 1], vec![2]]);
    }

    #[test]
    fn rejects_mixed_or_growing_groups() {
        let levels = vec![lvl(2, 4), lvl(2, 2), lvl(2, 8)];
        assert!(FeatureStack::new("a", levels.clone(), vec![vec![0, 1]], None).is_err());
        assert!(FeatureStack::new("a", levels.clone(), vec![vec![1], vec![2]], None).is_err());
        assert!(FeatureStack::new("a", levels.clone(), vec![vec![0], vec![0]], None).is_err());
        assert!(FeatureStack::new("a", levels, vec![vec![2], vec![0], vec![1]], Some(2)).is_ok());
    }
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{GrayImage, Luma, Rgb};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::folds::{FoldSpec, TOY_CLASSES};
use super::synthetic::hsv_rgb;
use crate::error::{Error, Result};
use crate::mask::MaskMap;
use crate::RgbImage;

/// One annotated image; `labels` holds class ids, 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub id: String,
    pub image: RgbImage,
    pub labels: GrayImage,
}

impl Sample {
    pub fn class_mask(&self, class_id: u8) -> MaskMap {
        let (w, h) = self.labels.dimensions();
        MaskMap::from_fn(h as usize, w as usize, |y, x| self.labels.get_pixel(x as u32, y as u32)[0] == class_id)
    }

    pub fn contains(&self, class_id: u8) -> bool {
        self.labels.pixels().any(|p| p[0] == class_id)
    }
}

/// Annotated images indexed by the classes they contain.
#[derive(Clone, Debug)]
pub struct Corpus {
    /// Name of class `i + 1` at index `i`.
    pub classes: Vec<String>,
    samples: Vec<Sample>,
    pools: BTreeMap<u8, Vec<usize>>,
}

impl Corpus {
    pub fn new(classes: Vec<String>, samples: Vec<Sample>) -> Result<Self> {
        let mut pools: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            if s.labels.dimensions() != s.image.dimensions() {
                return Err(Error::ShapeMismatch {
                    expected: vec![s.image.height() as usize, s.image.width() as usize],
                    got: vec![s.labels.height() as usize, s.labels.width() as usize],
                });
            }
            let mut present = [false; 256];
            s.labels.pixels().for_each(|p| present[p[0] as usize] = true);
            for c in 1..=255u8 {
                if present[c as usize] {
                    if c as usize > classes.len() {
                        return Err(Error::UnknownClass {
                            index: c,
                            file: s.id.clone(),
                        });
                    }
                    pools.entry(c).or_default().push(i);
                }
            }
        }
        Ok(Self { classes, samples, pools })
    }

    /// Reads `images/*.png`, `masks/<same name>.png` and `classes.txt` (one
    /// class name per line, line `i` naming class `i`).
    pub fn load(root: impl AsRef<Path>) -> Result<Self> {
        let root = root.as_ref();
        let classes_path = root.join("classes.txt");
        let classes = std::fs::read_to_string(&classes_path)
            .map_err(|e| Error::io(&classes_path, e))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(String::from)
            .collect();
        let image_dir = root.join("images");
        let mut names: Vec<PathBuf> = match std::fs::read_dir(&image_dir) {
            Ok(rd) => rd
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.extension().is_some_and(|x| x == "png"))
                .collect(),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Vec::new(),
            Err(e) => return Err(Error::io(&image_dir, e)),
        };
        if names.is_empty() {
            return Err(Error::EmptyCorpus(root.to_path_buf()));
        }
        names.sort();
        let mut samples = Vec::with_capacity(names.len());
        for path in names {
            let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let mask_path = root.join("masks").join(format!("{id}.png"));
            if !mask_path.exists() {
                return Err(Error::MissingMask(id));
            }
            let image = image::open(&path)?.to_rgb8();
            let labels = image::open(&mask_path)?.to_luma8();
            samples.push(Sample { id, image, labels });
        }
        Self::new(classes, samples)
    }

    pub fn save(&self, root: impl AsRef<Path>) -> Result<()> {
        let root = root.as_ref();
        for dir in [root.join("images"), root.join("masks")] {
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        let classes_path = root.join("classes.txt");
        let text: String = self.classes.iter().map(|c| format!("{c}\n")).collect();
        std::fs::write(&classes_path, text).map_err(|e| Error::io(&classes_path, e))?;
        for s in &self.samples {
            s.image.save(root.join("images").join(format!("{}.png", s.id)))?;
            s.labels.save(root.join("masks").join(format!("{}.png", s.id)))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn sample(&self, i: usize) -> &Sample {
        &self.samples[i]
    }

    /// Indices of the images containing `class_id`.
    pub fn pool(&self, class_id: u8) -> &[usize] {
        self.pools.get(&class_id).map_or(&[], Vec::as_slice)
    }

    pub fn class_name(&self, class_id: u8) -> String {
        self.classes
            .get(class_id as usize - 1)
            .cloned()
            .unwrap_or_else(|| format!("class{class_id}"))
    }
}

/// Loads a corpus and checks it covers the fold's classes. Images lacking
/// every fold class never enter a sampling pool.
pub fn load_dataset(root: impl AsRef<Path>, spec: &FoldSpec) -> Result<Corpus> {
    let corpus = Corpus::load(root)?;
    let needed = spec.dataset.num_classes();
    if corpus.classes.len() < needed {
        return Err(Error::Config(format!(
            "{} lists {} classes, {} needs {needed}",
            "classes.txt",
            corpus.classes.len(),
            spec.dataset
        )));
    }
    Ok(corpus)
}

/// Generator settings for the synthetic colour-blob corpus.
#[derive(Clone, Debug, PartialEq)]
pub struct ToyCorpusConfig {
    pub classes: usize,
    pub images_per_class: usize,
    pub size: usize,
    /// Chance that an image also holds a blob of a second class. Off by
    /// default: the target is then always the salient object of the query.
    pub distractor_prob: f64,
    pub seed: u64,
}

impl Default for ToyCorpusConfig {
    fn default() -> Self {
        Self {
            classes: TOY_CLASSES,
            images_per_class: 30,
            size: 32,
            distractor_prob: 0.0,
            seed: 0,
        }
    }
}

/// Hue of toy class `c` (1-based) in degrees.
fn class_hue(c: usize, classes: usize) -> f64 {
    360.0 * (c - 1) as f64 / classes as f64 + 15.0
}

fn ellipse(rng: &mut impl Rng, size: usize) -> (f64, f64, f64, f64) {
    let s = size as f64;
    let (ry, rx) = (rng.random_range(0.15 * s..0.28 * s), rng.random_range(0.15 * s..0.28 * s));
    (rng.random_range(ry..s - ry), rng.random_range(rx..s - rx), ry, rx)
}

fn inside((cy, cx, ry, rx): (f64, f64, f64, f64), y: usize, x: usize) -> bool {
    ((y as f64 + 0.5 - cy) / ry).powi(2) + ((x as f64 + 0.5 - cx) / rx).powi(2) <= 1.0
}

/// Colour-coded blob corpus: each class is a hue band; every image holds
/// one blob of its primary class on a dull textured background and, with
/// some probability, a non-overlapping blob of another class.
pub fn toy_corpus(cfg: &ToyCorpusConfig) -> Result<Corpus> {
    if cfg.size == 0 || cfg.size % 8 != 0 {
        return Err(Error::NonDivisibleSize(cfg.size as u32, cfg.size as u32));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut samples = Vec::with_capacity(cfg.classes * cfg.images_per_class);
    for c in 1..=cfg.classes {
        for n in 0..cfg.images_per_class {
            let mut blobs = vec![(c, ellipse(&mut rng, cfg.size))];
            if cfg.classes > 1 && rng.random_bool(cfg.distractor_prob) {
                let other = (c + rng.random_range(1..cfg.classes) - 1) % cfg.classes + 1;
                for _ in 0..20 {
                    let e = ellipse(&mut rng, cfg.size);
                    let overlap = (0..cfg.size * cfg.size).any(|i| {
                        let (y, x) = (i / cfg.size, i % cfg.size);
                        inside(e, y, x) && inside(blobs[0].1, y, x)
                    });
                    if !overlap {
                        blobs.push((other, e));
                        break;
                    }
                }
            }
            let colours: Vec<[u8; 3]> = blobs
                .iter()
                .map(|&(k, _)| {
                    let hue = class_hue(k, cfg.classes) + rng.random_range(-8.0..8.0);
                    hsv_rgb(hue, rng.random_range(0.75..0.95), rng.random_range(0.75..0.95))
                })
                .collect();
            let bg_hue = rng.random_range(0.0..360.0);
            let (bg_s, bg_v) = (rng.random_range(0.05..0.25), rng.random_range(0.3..0.55));
            let mut labels = GrayImage::new(cfg.size as u32, cfg.size as u32);
            let image = RgbImage::from_fn(cfg.size as u32, cfg.size as u32, |x, y| {
                let hit = blobs.iter().position(|&(_, e)| inside(e, y as usize, x as usize));
                let px = match hit {
                    Some(b) => {
                        labels.put_pixel(x, y, Luma([blobs[b].0 as u8]));
                        colours[b]
                    }
                    None => hsv_rgb(bg_hue + rng.random_range(-20.0..20.0), bg_s, bg_v + rng.random_range(-0.08..0.08)),
                };
                Rgb(px.map(|v| (v as i32 + rng.random_range(-5..=5)).clamp(0, 255) as u8))
            });
            samples.push(Sample {
                id: format!("c{c}_{n:03}"),
                image,
                labels,
            });
        }
    }
    let names = (1..=cfg.classes).map(|c| format!("blob{c}")).collect();
    Corpus::new(names, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::folds::Dataset;

    #[test]
    fn generated_corpus_indexes_classes() {
        let cfg = ToyCorpusConfig {
            classes: 3,
            images_per_class: 10,
            ..Default::default()
        };
        let c = toy_corpus(&cfg).unwrap();
        assert_eq!((c.len(), c.classes.len()), (30, 3));
        for k in 1..=3u8 {
            assert!(c.pool(k).len() >= 10);
            assert!(c.pool(k).iter().all(|&i| c.sample(i).contains(k)));
        }
        assert!(c.pool(4).is_empty());

        let d = toy_corpus(&ToyCorpusConfig {
            distractor_prob: 1.0,
            ..cfg
        })
        .unwrap();
        let shared = (1..=3u8).map(|k| d.pool(k).len()).sum::<usize>();
        assert!(shared > 30, "distractors join other pools");
        assert!(d.samples().iter().any(|s| (1..=3u8).filter(|&k| s.contains(k)).count() == 2));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ToyCorpusConfig {
            classes: 3,
            images_per_class: 2,
            ..Default::default()
        };
        let c = toy_corpus(&cfg).unwrap();
        c.save(dir.path()).unwrap();
        let back = Corpus::load(dir.path()).unwrap();
        assert_eq!(back.samples(), c.samples());
        assert_eq!(back.classes, c.classes);
        assert!(load_dataset(dir.path(), &FoldSpec::new(Dataset::Isaid5i, 0).unwrap()).is_err());
    }

    #[test]
    fn load_errors() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("classes.txt"), "a\n").unwrap();
        assert!(matches!(Corpus::load(dir.path()), Err(Error::EmptyCorpus(_))));
        std::fs::create_dir_all(dir.path().join("images")).unwrap();
        std::fs::create_dir_all(dir.path().join("masks")).unwrap();
        RgbImage::new(8, 8).save(dir.path().join("images/x.png")).unwrap();
        assert!(matches!(Corpus::load(dir.path()), Err(Error::MissingMask(id)) if id == "x"));
        GrayImage::from_pixel(8, 8, Luma([2])).save(dir.path().join("masks/x.png")).unwrap();
        assert!(matches!(Corpus::load(dir.path()), Err(Error::UnknownClass { index: 2, .. })));
    }
}

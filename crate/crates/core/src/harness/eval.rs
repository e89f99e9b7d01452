use std::fmt::{self, Write as _};
use std::path::Path;
use std::str::FromStr;
use std::sync::OnceLock;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::corpus::Corpus;
use super::episode::sample_episode;
use super::folds::FoldSpec;
use crate::correlation::build_pyramid;
use crate::error::{Error, Result};
use crate::features::{read_features, ExportManifest, FeatureStack, ToyBackbone, MANIFEST_FILE, TOY_SEED};
use crate::fusion::{fuse_e1, fuse_e_best, kshot_vote, FusionConfig, FusionMode};
use crate::mask::MaskMap;
use crate::matching::{branch_forward, forward_full, MatchingParams};
use crate::spectral::{eigensegments, Eigensegment, SpectralParams};

/// Features of every corpus image, in corpus order.
pub struct FeatureBank {
    stacks: Vec<FeatureStack>,
}

impl FeatureBank {
    pub fn new(stacks: Vec<FeatureStack>) -> Self {
        Self { stacks }
    }

    /// Runs the toy extractor over the corpus.
    pub fn toy(corpus: &Corpus) -> Result<Self> {
        let net = ToyBackbone::new(TOY_SEED);
        let stacks = corpus
            .samples()
            .par_iter()
            .map(|s| net.extract(&s.image, s.id.clone()))
            .collect::<Result<_>>()?;
        Ok(Self { stacks })
    }

    /// Reads `<id>.sccf` for every image, regrouped by the directory's
    /// manifest when one is present.
    pub fn from_dir(corpus: &Corpus, dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST_FILE);
        let manifest = if manifest_path.exists() {
            Some(ExportManifest::read(&manifest_path)?)
        } else {
            None
        };
        let stacks = corpus
            .samples()
            .par_iter()
            .map(|s| {
                let stack = read_features(dir.join(format!("{}.sccf", s.id)))?;
                match &manifest {
                    Some(m) => m.apply(stack),
                    None => Ok(stack),
                }
            })
            .collect::<Result<_>>()?;
        Ok(Self { stacks })
    }

    pub fn get(&self, i: usize) -> &FeatureStack {
        &self.stacks[i]
    }

    pub fn len(&self) -> usize {
        self.stacks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.stacks.is_empty()
    }
}

/// One support image paired with the query.
pub struct ShotInput<'a> {
    pub class_id: u8,
    pub query_index: usize,
    pub query: &'a FeatureStack,
    pub support_index: usize,
    pub support: &'a FeatureStack,
    pub support_mask: &'a MaskMap,
}

/// Predicts the query mask from one support shot.
pub trait FewShotModel: Sync {
    fn predict(&self, shot: &ShotInput<'_>) -> Result<MaskMap>;

    /// Settings echoed into reports.
    fn describe(&self) -> Vec<(String, String)> {
        Vec::new()
    }
}

/// Which prediction of the matching network is reported.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Head {
    /// Initial mask of the cross branch alone.
    Cross,
    /// Merged cross and self predictions.
    Merge,
}

impl fmt::Display for Head {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Head::Cross => "cross",
            Head::Merge => "merge",
        })
    }
}

impl FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cross" => Ok(Head::Cross),
            "merge" => Ok(Head::Merge),
            _ => Err(Error::Config(format!("unknown head {s:?} (cross, merge)"))),
        }
    }
}

pub struct MatchingModel {
    pub params: MatchingParams,
    pub head: Head,
}

impl FewShotModel for MatchingModel {
    fn predict(&self, shot: &ShotInput<'_>) -> Result<MaskMap> {
        match self.head {
            Head::Merge => Ok(forward_full(shot.query, shot.support, shot.support_mask, &self.params)?.merged.mask),
            Head::Cross => {
                let (h, w) = shot.support_mask.dims();
                let pyr = build_pyramid(shot.query, shot.support, shot.support_mask)?;
                Ok(branch_forward(&pyr, &self.params.cross, &self.params.config, h, w)?.mask)
            }
        }
    }

    fn describe(&self) -> Vec<(String, String)> {
        vec![
            ("head".into(), self.head.to_string()),
            ("branch".into(), self.params.mode().to_string()),
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    /// Support shots per episode.
    pub k: usize,
    pub fusion: FusionConfig,
    pub spectral: SpectralParams,
    pub episodes_per_class: usize,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 1,
            fusion: FusionConfig::default(),
            spectral: SpectralParams::default(),
            episodes_per_class: 1000,
            seed: 0,
        }
    }
}

/// Pixel counts of one class summed over its episodes.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassStats {
    pub class_id: u8,
    pub name: String,
    pub episodes: usize,
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ClassStats {
    /// `TP / (TP + FP + FN)`; 1 when all three are zero.
    pub fn iou(&self) -> f64 {
        let union = self.tp + self.fp + self.fn_;
        if union == 0 {
            1.0
        } else {
            self.tp as f64 / union as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassStats>,
    /// Settings of the run, in a fixed order.
    pub config: Vec<(String, String)>,
    /// Set when inference consulted ground truth.
    pub oracle: bool,
}

impl EvalReport {
    pub fn miou(&self) -> f64 {
        if self.classes.is_empty() {
            return 0.0;
        }
        self.classes.iter().map(ClassStats::iou).sum::<f64>() / self.classes.len() as f64
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (k, v) in &self.config {
            let _ = writeln!(out, "# {k}={v}");
        }
        if self.oracle {
            let _ = writeln!(out, "# ORACLE: eigensegments selected with ground truth, upper bound only");
        }
        let _ = writeln!(
            out,
            "{:>5}  {:<20} {:>8} {:>12} {:>12} {:>12} {:>7}",
            "class", "name", "episodes", "tp", "fp", "fn", "iou"
        );
        for c in &self.classes {
            let _ = writeln!(
                out,
                "{:>5}  {:<20} {:>8} {:>12} {:>12} {:>12} {:>7.2}",
                c.class_id,
                c.name,
                c.episodes,
                c.tp,
                c.fp,
                c.fn_,
                100.0 * c.iou()
            );
        }
        let _ = writeln!(out, "mIoU {:.2}{}", 100.0 * self.miou(), if self.oracle { " (oracle)" } else { "" });
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("class_id,name,episodes,tp,fp,fn,iou\n");
        for c in &self.classes {
            let _ = writeln!(out, "{},{},{},{},{},{},{:.6}", c.class_id, c.name, c.episodes, c.tp, c.fp, c.fn_, c.iou());
        }
        let _ = writeln!(out, "mean,{},,,,,{:.6}", if self.oracle { "oracle" } else { "" }, self.miou());
        out
    }
}

/// Episode seeds of one class: a per-class stream of the run seed.
fn episode_seeds(seed: u64, class_id: u8, n: usize) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(class_id as u64);
    (0..n).map(|_| rng.next_u64()).collect()
}

/// Final query prediction of one episode and its ground truth.
#[derive(Clone, Debug)]
pub struct EpisodeResult {
    pub prediction: MaskMap,
    pub gt: MaskMap,
}

struct Runner<'a, M: ?Sized> {
    corpus: &'a Corpus,
    bank: &'a FeatureBank,
    model: &'a M,
    cfg: &'a EvalConfig,
    segments: Vec<OnceLock<Vec<Eigensegment>>>,
}

impl<'a, M: FewShotModel + ?Sized> Runner<'a, M> {
    fn new(corpus: &'a Corpus, bank: &'a FeatureBank, model: &'a M, cfg: &'a EvalConfig) -> Result<Self> {
        if bank.len() != corpus.len() {
            return Err(Error::Config(format!("{} feature stacks for {} images", bank.len(), corpus.len())));
        }
        Ok(Self {
            corpus,
            bank,
            model,
            cfg,
            segments: (0..corpus.len()).map(|_| OnceLock::new()).collect(),
        })
    }

    fn segments(&self, i: usize) -> Result<&[Eigensegment]> {
        if let Some(s) = self.segments[i].get() {
            return Ok(s);
        }
        let segs = eigensegments(&self.corpus.sample(i).image, self.bank.get(i), &self.cfg.spectral)?;
        let _ = self.segments[i].set(segs);
        Ok(self.segments[i].get().expect("just set"))
    }

    fn run(&self, class_id: u8, seed: u64) -> Result<EpisodeResult> {
        let ep = sample_episode(self.corpus, class_id, self.cfg.k, seed)?;
        let gt = ep.query_mask(self.corpus);
        let masks = ep.support_masks(self.corpus);
        let mode = self.cfg.fusion.mode;
        let segs = if mode.uses_eigensegments() { self.segments(ep.query)? } else { &[] };
        let mut preds = Vec::with_capacity(ep.k());
        for (&s, mask) in ep.supports.iter().zip(&masks) {
            let pred = self.model.predict(&ShotInput {
                class_id,
                query_index: ep.query,
                query: self.bank.get(ep.query),
                support_index: s,
                support: self.bank.get(s),
                support_mask: mask,
            })?;
            preds.push(match mode {
                FusionMode::None => pred,
                FusionMode::E1 => fuse_e1(&pred, segs)?,
                FusionMode::EBest => fuse_e_best(&pred, segs, &gt)?,
            });
        }
        let prediction = kshot_vote(&preds, self.cfg.fusion.kshot_tau)?;
        Ok(EpisodeResult { prediction, gt })
    }
}

/// Runs one sampled episode through the full inference path.
pub fn run_episode<M: FewShotModel + ?Sized>(
    corpus: &Corpus,
    bank: &FeatureBank,
    model: &M,
    cfg: &EvalConfig,
    class_id: u8,
    seed: u64,
) -> Result<EpisodeResult> {
    Runner::new(corpus, bank, model, cfg)?.run(class_id, seed)
}

/// Runs `episodes_per_class` episodes for each test class of `spec` and
/// accumulates pixel counts per class before dividing.
pub fn evaluate<M: FewShotModel + ?Sized>(
    corpus: &Corpus,
    bank: &FeatureBank,
    spec: &FoldSpec,
    model: &M,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    let runner = Runner::new(corpus, bank, model, cfg)?;
    let mut classes = Vec::with_capacity(spec.test_classes.len());
    for &class_id in &spec.test_classes {
        let results = episode_seeds(cfg.seed, class_id, cfg.episodes_per_class)
            .into_par_iter()
            .map(|seed| {
                let r = runner.run(class_id, seed)?;
                let (p, g) = (r.prediction.data(), r.gt.data());
                let mut c = [0u64; 3];
                for (&a, &b) in p.iter().zip(g) {
                    c[0] += (a && b) as u64;
                    c[1] += (a && !b) as u64;
                    c[2] += (!a && b) as u64;
                }
                Ok(c)
            })
            .collect::<Result<Vec<_>>>()?;
        let mut stats = ClassStats {
            class_id,
            name: corpus.class_name(class_id),
            episodes: results.len(),
            ..Default::default()
        };
        for [tp, fp, fn_] in results {
            stats.tp += tp;
            stats.fp += fp;
            stats.fn_ += fn_;
        }
        classes.push(stats);
    }
    let mut config: Vec<(String, String)> = vec![
        ("dataset".into(), spec.dataset.to_string()),
        ("fold".into(), spec.fold.to_string()),
        ("k".into(), cfg.k.to_string()),
        ("fusion".into(), cfg.fusion.mode.to_string()),
        ("tau".into(), cfg.fusion.kshot_tau.to_string()),
        ("alpha".into(), cfg.spectral.alpha.to_string()),
        ("n-eig".into(), cfg.spectral.n_eig.to_string()),
        ("knn".into(), cfg.spectral.k.to_string()),
        ("episodes".into(), cfg.episodes_per_class.to_string()),
        ("seed".into(), cfg.seed.to_string()),
    ];
    config.extend(model.describe());
    Ok(EvalReport {
        classes,
        config,
        oracle: cfg.fusion.mode.is_oracle(),
    })
}

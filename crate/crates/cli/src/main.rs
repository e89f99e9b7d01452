use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use fsseg_core::features::{
    read_features, toy_extract_features, write_features, ExportManifest, ToyBackbone, MANIFEST_FILE, TOY_SEED,
};
use fsseg_core::fusion::{fuse_e1, fuse_e_best, kshot_vote, FusionMode};
use fsseg_core::harness::{
    evaluate, load_dataset, sample_episode, toy_corpus, train_on_fold, Corpus, Dataset, FeatureBank, FoldSpec, Head,
    MatchingModel, RunConfig, ToyCorpusConfig, ToyTrainConfig,
};
use fsseg_core::image::{self, GrayImage, Luma};
use fsseg_core::matching::{
    check_full_loss_gradient, forward_full, read_checkpoint, write_checkpoint, BranchMode, MatchingConfig,
    MatchingParams, SgdConfig,
};
use fsseg_core::spectral::{eigensegments, SpectralParams};
use fsseg_core::Tensor;

#[derive(Parser)]
#[command(name = "fsseg", version, about = "Few-shot segmentation with self- and cross-matching and eigensegment fusion")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one episode and write every intermediate mask as PNG.
    Episode(EpisodeArgs),
    /// Evaluate a fold and print a per-class IoU table.
    Evaluate(EvaluateArgs),
    /// Train the matching network on the toy corpus.
    TrainToy(TrainArgs),
    /// Compute eigensegments of one image.
    Eigenseg(EigensegArgs),
    /// Check full-loss gradients against central differences.
    Gradcheck(GradcheckArgs),
    /// Write the toy corpus with its toy feature files and manifest.
    ExportFixtures(ExportArgs),
}

/// Settings shared by every episodic command. Each flag can also be given
/// as `name=value` in `--config`; flags win.
#[derive(Args)]
struct RunArgs {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<String>,
    #[arg(long)]
    fold: Option<usize>,
    /// Support shots per episode.
    #[arg(long)]
    k: Option<usize>,
    /// K-shot vote threshold.
    #[arg(long)]
    tau: Option<f64>,
    /// Weight of the colour-position affinity.
    #[arg(long)]
    alpha: Option<f64>,
    /// Eigenvectors computed, the constant one included.
    #[arg(long)]
    n_eig: Option<usize>,
    /// none, e1 or ebest (oracle).
    #[arg(long)]
    fusion: Option<String>,
    /// two or single.
    #[arg(long)]
    branch: Option<String>,
    /// merge or cross.
    #[arg(long)]
    head: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    /// Episodes per test class.
    #[arg(long)]
    episodes: Option<usize>,
    /// Directory of `<id>.sccf` files; toy features are used otherwise.
    #[arg(long)]
    features_dir: Option<PathBuf>,
    /// Parameter checkpoint; seeded untrained parameters otherwise.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Corpus root with images/, masks/ and classes.txt; the generated toy
    /// corpus otherwise.
    #[arg(long)]
    data_root: Option<PathBuf>,
}

impl RunArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let s = |v: &Option<String>| v.clone();
        let p = |v: &Option<PathBuf>| v.as_ref().map(|p| p.display().to_string());
        let pairs: [(&str, Option<String>); 14] = [
            ("dataset", s(&self.dataset)),
            ("fold", self.fold.map(|v| v.to_string())),
            ("k", self.k.map(|v| v.to_string())),
            ("tau", self.tau.map(|v| v.to_string())),
            ("alpha", self.alpha.map(|v| v.to_string())),
            ("n-eig", self.n_eig.map(|v| v.to_string())),
            ("fusion", s(&self.fusion)),
            ("branch", s(&self.branch)),
            ("head", s(&self.head)),
            ("seed", self.seed.map(|v| v.to_string())),
            ("episodes", self.episodes.map(|v| v.to_string())),
            ("features-dir", p(&self.features_dir)),
            ("params", p(&self.params)),
            ("data-root", p(&self.data_root)),
        ];
        let overrides = pairs.into_iter().filter_map(|(k, v)| v.map(|v| (k, v)));
        Ok(RunConfig::merged(self.config.as_deref(), overrides)?)
    }
}

#[derive(Args)]
struct EpisodeArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Target class; the fold's first test class by default.
    #[arg(long)]
    class: Option<u8>,
    #[arg(long, default_value = "episode_out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvaluateArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Also write the table as CSV.
    #[arg(long)]
    csv: Option<PathBuf>,
    /// Write the text report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    run: RunArgs,
    /// Training episodes sampled from the fold's train classes.
    #[arg(long, default_value_t = 200)]
    train_episodes: usize,
    #[arg(long, default_value_t = 4)]
    epochs: usize,
    #[arg(long, default_value_t = 9e-4)]
    lr: f64,
    #[arg(long, default_value = "toy.sccp")]
    out: PathBuf,
}

#[derive(Args)]
struct EigensegArgs {
    #[arg(long)]
    image: PathBuf,
    /// Feature file; toy features of the image otherwise.
    #[arg(long)]
    features: Option<PathBuf>,
    #[arg(long, default_value_t = 5.0)]
    alpha: f64,
    /// Eigenvectors computed, the constant one included.
    #[arg(long = "n", default_value_t = 5)]
    n: usize,
    #[arg(long, default_value = "eigenseg_out")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct GradcheckArgs {
    /// Random tiny configurations per branch mode.
    #[arg(long, default_value_t = 5)]
    cases: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 32)]
    size: usize,
    #[arg(long, default_value_t = 30)]
    images_per_class: usize,
    /// Chance of a second blob of another class in an image.
    #[arg(long, default_value_t = 0.0)]
    distractor_prob: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

struct Session {
    cfg: RunConfig,
    spec: FoldSpec,
    corpus: Corpus,
    bank: FeatureBank,
}

impl Session {
    fn open(cfg: RunConfig) -> Result<Self> {
        let spec = cfg.fold_spec()?;
        let corpus = match &cfg.data_root {
            Some(root) => load_dataset(root, &spec).with_context(|| format!("loading {}", root.display()))?,
            None if spec.dataset == Dataset::Toy => toy_corpus(&ToyCorpusConfig::default())?,
            None => bail!("--data-root is required for dataset {}", spec.dataset),
        };
        let bank = match &cfg.features_dir {
            Some(dir) => FeatureBank::from_dir(&corpus, dir)?,
            None => FeatureBank::toy(&corpus)?,
        };
        Ok(Self { cfg, spec, corpus, bank })
    }

    fn params(&self) -> Result<MatchingParams> {
        if let Some(p) = &self.cfg.params {
            return read_checkpoint(p).with_context(|| format!("reading {}", p.display()));
        }
        eprintln!("note: no --params given, using untrained parameters (seed {})", self.cfg.seed);
        let config = MatchingConfig::new(self.bank.get(0).groups().iter().map(Vec::len).collect());
        Ok(MatchingParams::init(config, self.cfg.branch, self.cfg.seed))
    }
}

fn soft_image(map: &Tensor<f64>) -> GrayImage {
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let (lo, hi) = map.data().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([((map.data()[y as usize * w + x as usize] - lo) * scale).round() as u8])
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn run_episode_cmd(a: EpisodeArgs) -> Result<()> {
    let s = Session::open(a.run.resolve()?)?;
    let params = s.params()?;
    let class_id = a.class.unwrap_or(s.spec.test_classes[0]);
    let ep = sample_episode(&s.corpus, class_id, s.cfg.k, s.cfg.seed)?;
    create_dir(&a.out_dir)?;
    let out = |name: &str| a.out_dir.join(name);
    let gt = ep.query_mask(&s.corpus);
    s.corpus.sample(ep.query).image.save(out("query.png"))?;
    gt.to_image().save(out("query_gt.png"))?;
    let mode = s.cfg.fusion;
    let segs = if mode.uses_eigensegments() {
        let q = ep.query;
        let segs = eigensegments(&s.corpus.sample(q).image, s.bank.get(q), &s.cfg.spectral())?;
        for seg in &segs {
            soft_image(&seg.soft).save(out(&format!("eig{}_soft.png", seg.index)))?;
            seg.mask.to_image().save(out(&format!("eig{}_mask.png", seg.index)))?;
        }
        segs
    } else {
        Vec::new()
    };
    let mut preds = Vec::new();
    for (i, (&sup, mask)) in ep.supports.iter().zip(ep.support_masks(&s.corpus)).enumerate() {
        s.corpus.sample(sup).image.save(out(&format!("shot{i}_support.png")))?;
        mask.to_image().save(out(&format!("shot{i}_support_mask.png")))?;
        let o = forward_full(s.bank.get(ep.query), s.bank.get(sup), &mask, &params)?;
        o.init.mask.to_image().save(out(&format!("shot{i}_cross.png")))?;
        o.self_match.mask.to_image().save(out(&format!("shot{i}_self.png")))?;
        o.merged.mask.to_image().save(out(&format!("shot{i}_merged.png")))?;
        let pred = match s.cfg.head {
            Head::Merge => o.merged.mask,
            Head::Cross => o.init.mask,
        };
        let fused = match mode {
            FusionMode::None => pred,
            FusionMode::E1 => fuse_e1(&pred, &segs)?,
            FusionMode::EBest => fuse_e_best(&pred, &segs, &gt)?,
        };
        fused.to_image().save(out(&format!("shot{i}_fused.png")))?;
        preds.push(fused);
    }
    let final_mask = kshot_vote(&preds, s.cfg.tau)?;
    final_mask.to_image().save(out("prediction.png"))?;
    let iou = fsseg_core::fusion::iou(&final_mask, &gt)?;
    println!(
        "class {} ({}) query {} supports {:?}: IoU {:.2}{}",
        class_id,
        s.corpus.class_name(class_id),
        s.corpus.sample(ep.query).id,
        ep.supports.iter().map(|&i| s.corpus.sample(i).id.as_str()).collect::<Vec<_>>(),
        100.0 * iou,
        if mode.is_oracle() { " (oracle)" } else { "" }
    );
    println!("masks written to {}", a.out_dir.display());
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let s = Session::open(a.run.resolve()?)?;
    let model = MatchingModel {
        params: s.params()?,
        head: s.cfg.head,
    };
    let report = evaluate(&s.corpus, &s.bank, &s.spec, &model, &s.cfg.eval_config()?)?;
    let text = report.to_text();
    match &a.out {
        Some(p) => std::fs::write(p, &text).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{text}"),
    }
    if let Some(p) = &a.csv {
        std::fs::write(p, report.to_csv()).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

fn run_train(a: TrainArgs) -> Result<()> {
    let s = Session::open(a.run.resolve()?)?;
    let cfg = ToyTrainConfig {
        episodes: a.train_episodes,
        epochs: a.epochs,
        seed: s.cfg.seed,
        branch: s.cfg.branch,
        sgd: SgdConfig {
            lr: a.lr,
            ..SgdConfig::default()
        },
    };
    let t = Instant::now();
    let rep = train_on_fold(&s.corpus, &s.bank, &s.spec, &cfg)?;
    println!("initial loss {:.4}", rep.initial_loss);
    for (e, l) in rep.epoch_losses.iter().enumerate() {
        println!("epoch {e}: running loss {l:.4}");
    }
    println!("final loss {:.4} ({:.1}s)", rep.final_loss, t.elapsed().as_secs_f64());
    write_checkpoint(&rep.params, &a.out)?;
    println!("parameters written to {}", a.out.display());
    Ok(())
}

fn run_eigenseg(a: EigensegArgs) -> Result<()> {
    let img = image::open(&a.image).with_context(|| format!("reading {}", a.image.display()))?.to_rgb8();
    let feats = match &a.features {
        Some(p) => read_features(p)?,
        None => toy_extract_features(&img)?,
    };
    let params = SpectralParams {
        alpha: a.alpha,
        n_eig: a.n,
        ..Default::default()
    };
    create_dir(&a.out_dir)?;
    for seg in eigensegments(&img, &feats, &params)? {
        soft_image(&seg.soft).save(a.out_dir.join(format!("eig{}_soft.png", seg.index)))?;
        seg.mask.to_image().save(a.out_dir.join(format!("eig{}_mask.png", seg.index)))?;
        println!("E{}: eigenvalue {:.6}, {} pixels", seg.index, seg.eigenvalue, seg.mask.count());
    }
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> Result<()> {
    let mut failed = 0;
    for mode in [BranchMode::TwoBranch, BranchMode::Shared] {
        for case in 0..a.cases {
            let seed = a.seed + case;
            let layers = 1 + (case % 3) as usize;
            let rep = check_full_loss_gradient(seed, layers, mode)?;
            let ok = rep.passed(a.tol);
            failed += !ok as usize;
            println!(
                "{} {mode} seed {seed} layers {layers}: {} elements, max rel err {:.2e}, {} refined",
                if ok { "PASS" } else { "FAIL" },
                rep.checked,
                rep.max_rel_err,
                rep.refined
            );
        }
    }
    if failed > 0 {
        bail!("{failed} gradient checks failed");
    }
    Ok(())
}

fn run_export(a: ExportArgs) -> Result<()> {
    let corpus = toy_corpus(&ToyCorpusConfig {
        size: a.size,
        images_per_class: a.images_per_class,
        distractor_prob: a.distractor_prob,
        seed: a.seed,
        ..Default::default()
    })?;
    corpus.save(&a.out_dir)?;
    let dir = a.out_dir.join("features");
    create_dir(&dir)?;
    let net = ToyBackbone::new(TOY_SEED);
    let mut manifest = None;
    for s in corpus.samples() {
        let f = net.extract(&s.image, s.id.clone())?;
        write_features(&f, dir.join(format!("{}.sccf", s.id)))?;
        manifest.get_or_insert_with(|| ExportManifest::describe("toy", a.size, &f));
    }
    if let Some(m) = manifest {
        m.write(dir.join(MANIFEST_FILE))?;
    }
    println!("{} images, features in {}", corpus.len(), dir.display());
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Episode(a) => run_episode_cmd(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::TrainToy(a) => run_train(a),
        Command::Eigenseg(a) => run_eigenseg(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::ExportFixtures(a) => run_export(a),
    }
}

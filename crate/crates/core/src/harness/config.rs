use std::path::{Path, PathBuf};
use std::str::FromStr;

use super::eval::{EvalConfig, Head};
use super::folds::{Dataset, FoldSpec};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionMode, DEFAULT_TAU};
use crate::keyvalue::{format_key_values, parse_key_values};
use crate::matching::BranchMode;
use crate::spectral::SpectralParams;

/// Every setting a CLI run accepts. Config files use the flag names as
/// keys (`n-eig=5`, underscores also accepted).
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub dataset: Dataset,
    pub fold: usize,
    pub k: usize,
    pub tau: f64,
    pub alpha: f64,
    pub n_eig: usize,
    pub fusion: FusionMode,
    pub branch: BranchMode,
    pub head: Head,
    pub seed: u64,
    pub episodes: usize,
    pub features_dir: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub data_root: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let sp = SpectralParams::default();
        Self {
            dataset: Dataset::Toy,
            fold: 0,
            k: 1,
            tau: DEFAULT_TAU,
            alpha: sp.alpha,
            n_eig: sp.n_eig,
            fusion: FusionMode::None,
            branch: BranchMode::TwoBranch,
            head: Head::Merge,
            seed: 0,
            episodes: 1000,
            features_dir: None,
            params: None,
            data_root: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("invalid value {value:?} for {key}")))
}

fn path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.replace('_', "-");
        match key.as_str() {
            "dataset" => self.dataset = value.parse()?,
            "fold" => self.fold = parse(&key, value)?,
            "k" => self.k = parse(&key, value)?,
            "tau" => self.tau = parse(&key, value)?,
            "alpha" => self.alpha = parse(&key, value)?,
            "n-eig" => self.n_eig = parse(&key, value)?,
            "fusion" => self.fusion = value.parse()?,
            "branch" => self.branch = value.parse()?,
            "head" => self.head = value.parse()?,
            "seed" => self.seed = parse(&key, value)?,
            "episodes" => self.episodes = parse(&key, value)?,
            "features-dir" => self.features_dir = path(value),
            "params" => self.params = path(value),
            "data-root" => self.data_root = path(value),
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (k, v) in parse_key_values(text)? {
            self.set(&k, &v)?;
        }
        Ok(())
    }

    /// Defaults, then the file at `file`, then `overrides` in order.
    pub fn merged<'a>(file: Option<&Path>, overrides: impl IntoIterator<Item = (&'a str, String)>) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(p) = file {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            cfg.apply_text(&text)?;
        }
        for (k, v) in overrides {
            cfg.set(k, &v)?;
        }
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        let p = |o: &Option<PathBuf>| o.as_ref().map(|p| p.display().to_string()).unwrap_or_default();
        format_key_values([
            ("dataset", self.dataset.to_string()),
            ("fold", self.fold.to_string()),
            ("k", self.k.to_string()),
            ("tau", self.tau.to_string()),
            ("alpha", self.alpha.to_string()),
            ("n-eig", self.n_eig.to_string()),
            ("fusion", self.fusion.to_string()),
            ("branch", self.branch.to_string()),
            ("head", self.head.to_string()),
            ("seed", self.seed.to_string()),
            ("episodes", self.episodes.to_string()),
            ("features-dir", p(&self.features_dir)),
            ("params", p(&self.params)),
            ("data-root", p(&self.data_root)),
        ])
    }

    pub fn fold_spec(&self) -> Result<FoldSpec> {
        FoldSpec::new(self.dataset, self.fold)
    }

    pub fn spectral(&self) -> SpectralParams {
        SpectralParams {
            alpha: self.alpha,
            n_eig: self.n_eig,
            ..Default::default()
        }
    }

    pub fn eval_config(&self) -> Result<EvalConfig> {
        if self.k == 0 {
            return Err(Error::Config("k must be at least 1".into()));
        }
        Ok(EvalConfig {
            k: self.k,
            fusion: FusionConfig::new(self.fusion, self.tau)?,
            spectral: self.spectral(),
            episodes_per_class: self.episodes,
            seed: self.seed,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.apply_text("fusion=e_best\nn_eig=7\nbranch=single\nparams=/tmp/p.sccp\n").unwrap();
        assert_eq!((c.fusion, c.n_eig, c.branch), (FusionMode::EBest, 7, BranchMode::Shared));
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("run.cfg");
        std::fs::write(&f, "k=5\ntau=0.6\n# comment\nseed=9\n").unwrap();
        let c = RunConfig::merged(Some(&f), [("k", "3".to_string())]).unwrap();
        assert_eq!((c.k, c.tau, c.seed), (3, 0.6, 9));
    }

    #[test]
    fn rejects_bad_settings() {
        let mut c = RunConfig::default();
        assert!(c.set("colour", "red").is_err());
        assert!(c.set("k", "many").is_err());
        c.set("tau", "0").unwrap();
        assert!(c.eval_config().is_err());
        c.set("fold", "3").unwrap();
        assert!(c.fold_spec().is_err());
    }
}

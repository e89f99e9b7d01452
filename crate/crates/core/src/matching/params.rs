use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tape, Tensor, Var};

/// Architecture constants of one matching branch.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MatchingConfig {
    /// `|L_p|` for every pyramid layer, finest first.
    pub layer_channels: Vec<usize>,
    /// Output widths of the two per-layer center-pivot blocks.
    pub block_widths: [usize; 2],
    /// Width after the finest merge, before support pooling.
    pub merged_width: usize,
    /// Channels of the squeezed map `Z`.
    pub z_channels: usize,
    /// Hidden widths of the 2D decoder.
    pub decoder_widths: [usize; 2],
    pub gn_groups: usize,
    /// Support size each layer is squeezed to before pooling.
    pub h_eps: usize,
    /// 4D and 2D kernel size.
    pub kernel: usize,
}

impl MatchingConfig {
    pub fn new(layer_channels: Vec<usize>) -> Self {
        Self {
            layer_channels,
            block_widths: [16, 32],
            merged_width: 64,
            z_channels: 128,
            decoder_widths: [32, 16],
            gn_groups: 4,
            h_eps: 2,
            kernel: 3,
        }
    }

    /// Config for the toy extractor: three layers of two levels each.
    pub fn toy() -> Self {
        Self::new(vec![2, 2, 2])
    }

    /// Narrow network with `layers` single-channel pyramid layers, for
    /// gradient checks.
    pub fn tiny(layers: usize) -> Self {
        Self {
            layer_channels: vec![1; layers],
            block_widths: [4, 4],
            merged_width: 4,
            z_channels: 4,
            decoder_widths: [4, 4],
            gn_groups: 2,
            h_eps: 2,
            kernel: 3,
        }
    }

    pub fn layers(&self) -> usize {
        self.layer_channels.len()
    }

    /// One mixing block after each coarse-to-fine merge; a single block
    /// when there is nothing to merge.
    pub(crate) fn mix_blocks(&self) -> usize {
        self.layers().saturating_sub(1).max(1)
    }

    /// Named parameter shapes of one branch in a fixed order.
    pub(crate) fn branch_layout(&self) -> Vec<(String, Vec<usize>)> {
        let k = self.kernel;
        let mut out = Vec::new();
        let cp = |name: String, cin: usize, cout: usize, out: &mut Vec<(String, Vec<usize>)>| {
            out.push((format!("{name}.wq"), vec![cout, cin, k, k]));
            out.push((format!("{name}.ws"), vec![cout, cin, k, k]));
            out.push((format!("{name}.bias"), vec![cout]));
            out.push((format!("{name}.gamma"), vec![cout]));
            out.push((format!("{name}.beta"), vec![cout]));
        };
        let [w1, w2] = self.block_widths;
        for (p, &c) in self.layer_channels.iter().enumerate() {
            cp(format!("enc{p}.0"), c, w1, &mut out);
            cp(format!("enc{p}.1"), w1, w2, &mut out);
        }
        for p in 0..self.mix_blocks() {
            let cout = if p == 0 { self.merged_width } else { w2 };
            cp(format!("mix{p}"), w2, cout, &mut out);
        }
        out.push(("squeeze.w".into(), vec![self.z_channels, self.merged_width, 1, 1]));
        out.push(("squeeze.b".into(), vec![self.z_channels]));
        let [d1, d2] = self.decoder_widths;
        out.push(("dec0.w".into(), vec![d1, self.z_channels, k, k]));
        out.push(("dec0.b".into(), vec![d1]));
        out.push(("dec1.w".into(), vec![d2, d1, k, k]));
        out.push(("dec1.b".into(), vec![d2]));
        out.push(("dec2.w".into(), vec![2, d2, k, k]));
        out.push(("dec2.b".into(), vec![2]));
        out
    }
}

/// Ordered named tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet {
    names: Vec<String>,
    tensors: Vec<Tensor<f32>>,
}

impl ParamSet {
    pub fn new(entries: Vec<(String, Tensor<f32>)>) -> Self {
        let (names, tensors) = entries.into_iter().unzip();
        Self { names, tensors }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<f32>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor<f32>] {
        &mut self.tensors
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<f32>> {
        self.names.iter().position(|n| n == name).map(|i| &mut self.tensors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<f32>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Every tensor set to zero.
    pub fn zeroed(&self) -> Self {
        Self {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| Tensor::zeros(t.shape().to_vec())).collect(),
        }
    }
}

/// Parameters bound to tape variables, looked up by name.
pub(crate) struct Bound<'a> {
    names: &'a [String],
    vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    pub(crate) fn new(names: &'a [String], vars: Vec<Var>) -> Self {
        debug_assert_eq!(names.len(), vars.len());
        Self { names, vars }
    }

    pub(crate) fn get(&self, name: &str) -> Result<Var> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Malformed(format!("missing parameter '{name}'")))
    }

    pub(crate) fn vars(&self) -> &[Var] {
        &self.vars
    }
}

/// Whether the self branch has its own weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BranchMode {
    TwoBranch,
    Shared,
}

impl std::fmt::Display for BranchMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BranchMode::TwoBranch => "two",
            BranchMode::Shared => "single",
        })
    }
}

impl std::str::FromStr for BranchMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "two" => Ok(BranchMode::TwoBranch),
            "single" | "shared" => Ok(BranchMode::Shared),
            _ => Err(Error::Config(format!("unknown branch mode {s:?} (two, single)"))),
        }
    }
}

/// Parameters of the cross branch, the self branch and the merge head.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchingParams {
    pub config: MatchingConfig,
    pub cross: ParamSet,
    /// `None` in shared mode: the self branch reuses `cross`.
    pub self_branch: Option<ParamSet>,
    /// `merge.w` (2x4x1x1) and `merge.b` (2).
    pub merge: ParamSet,
}

impl MatchingParams {
    pub fn init(config: MatchingConfig, mode: BranchMode, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cross = init_branch(&config, &mut rng);
        let self_branch = match mode {
            BranchMode::TwoBranch => Some(init_branch(&config, &mut rng)),
            BranchMode::Shared => None,
        };
        Self {
            config,
            cross,
            self_branch,
            merge: averaging_merge(),
        }
    }

    /// All-zero parameters.
    pub fn zeros(config: MatchingConfig, mode: BranchMode) -> Self {
        let p = Self::init(config, mode, 0);
        Self {
            cross: p.cross.zeroed(),
            self_branch: p.self_branch.map(|s| s.zeroed()),
            merge: p.merge.zeroed(),
            config: p.config,
        }
    }

    pub fn mode(&self) -> BranchMode {
        if self.self_branch.is_some() {
            BranchMode::TwoBranch
        } else {
            BranchMode::Shared
        }
    }

    pub fn self_params(&self) -> &ParamSet {
        self.self_branch.as_ref().unwrap_or(&self.cross)
    }

    /// Groups in checkpoint order, with their name prefixes.
    pub fn groups(&self) -> Vec<(&'static str, &ParamSet)> {
        let mut g = vec![("cross", &self.cross)];
        if let Some(s) = &self.self_branch {
            g.push(("self", s));
        }
        g.push(("merge", &self.merge));
        g
    }

    pub(crate) fn groups_mut(&mut self) -> Vec<&mut ParamSet> {
        let mut g = vec![&mut self.cross];
        if let Some(s) = &mut self.self_branch {
            g.push(s);
        }
        g.push(&mut self.merge);
        g
    }

    /// Every tensor in checkpoint order.
    pub fn flat(&self) -> Vec<&Tensor<f32>> {
        self.groups().into_iter().flat_map(|(_, p)| p.tensors().iter()).collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.groups().iter().map(|(_, p)| p.num_scalars()).sum()
    }

    /// Records every parameter on `tape` as a gradient-tracked leaf.
    pub(crate) fn bind<T: Real>(&self, tape: &mut Tape<T>) -> BoundParams<'_> {
        let vars: Vec<Var> = self.flat().into_iter().map(|t| tape.param(t.cast())).collect();
        self.bind_vars(&vars)
    }

    /// Binds vars already on a tape, given in checkpoint order.
    pub(crate) fn bind_vars(&self, vars: &[Var]) -> BoundParams<'_> {
        let mut rest = vars;
        let mut take = |p: &'_ ParamSet| {
            let (head, tail) = rest.split_at(p.len());
            rest = tail;
            head.to_vec()
        };
        let cross = Bound::new(self.cross.names(), take(&self.cross));
        let self_branch = self
            .self_branch
            .as_ref()
            .map(|p| Bound::new(p.names(), take(p)));
        let merge = Bound::new(self.merge.names(), take(&self.merge));
        BoundParams {
            cross,
            self_branch,
            merge,
        }
    }
}

pub(crate) struct BoundParams<'a> {
    pub cross: Bound<'a>,
    pub self_branch: Option<Bound<'a>>,
    pub merge: Bound<'a>,
}

impl BoundParams<'_> {
    pub(crate) fn self_or_cross(&self) -> &Bound<'_> {
        self.self_branch.as_ref().unwrap_or(&self.cross)
    }

    /// Vars in checkpoint order.
    pub(crate) fn flat(&self) -> Vec<Var> {
        let mut v = self.cross.vars().to_vec();
        if let Some(s) = &self.self_branch {
            v.extend_from_slice(s.vars());
        }
        v.extend_from_slice(self.merge.vars());
        v
    }
}

fn init_branch(config: &MatchingConfig, rng: &mut ChaCha8Rng) -> ParamSet {
    let entries = config
        .branch_layout()
        .into_iter()
        .map(|(name, shape)| {
            let t = if name.ends_with(".gamma") {
                Tensor::full(shape, 1.0)
            } else if name.ends_with(".bias") || name.ends_with(".beta") || name.ends_with(".b") {
                Tensor::zeros(shape)
            } else {
                // He init; center-pivot blocks sum two paths
                let fan_in: usize = shape[1..].iter().product();
                let paths = if name.ends_with(".wq") || name.ends_with(".ws") { 2.0 } else { 1.0 };
                let std = (2.0 / (fan_in as f64 * paths)).sqrt();
                let n = Normal::new(0.0, std).expect("valid std");
                Tensor::from_fn(shape, |_| n.sample(rng) as f32)
            };
            (name, t)
        })
        .collect();
    ParamSet::new(entries)
}

/// Merge head that averages the log-probabilities of the two branches.
pub fn averaging_merge() -> ParamSet {
    let w = Tensor::new([2, 4, 1, 1], vec![0.5, 0.0, 0.5, 0.0, 0.0, 0.5, 0.0, 0.5]).expect("static shape");
    ParamSet::new(vec![("merge.w".into(), w), ("merge.b".into(), Tensor::zeros([2]))])
}

/// Merge head that passes the cross branch through unchanged.
pub fn selector_merge() -> ParamSet {
    let w = Tensor::new([2, 4, 1, 1], vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).expect("static shape");
    ParamSet::new(vec![("merge.w".into(), w), ("merge.b".into(), Tensor::zeros([2]))])
}

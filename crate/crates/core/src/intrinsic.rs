//! Intrinsic rewards: random network distillation and a constant bonus.
//!
//! The RND target network is fixed at construction; only the predictor is
//! trained. Novelty of a state is `alpha * ||phi(s) - phi_bar(s)||_2`, and an
//! edge `s -> s'` is rewarded with the novelty of `s'`. Stopped states share
//! their twin's features, so the terminal bonus uses the same function.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Adam, Graph, Mlp, MlpSpec, Rng, Tensor};
use crate::config::KeyValues;
use crate::env::{self, GridConfig, GridState};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IntrinsicKind {
    Rnd,
    Constant,
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugmentationMode {
    Edge,
    State,
    Joint,
    None,
}

macro_rules! name_enum {
    ($ty:ty, $what:literal, $($variant:path => $name:literal),+ $(,)?) => {
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(match self { $($variant => $name),+ })
            }
        }

        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($variant),)+
                    other => Err(Error::Config(format!(concat!("unknown ", $what, " {:?}"), other))),
                }
            }
        }
    };
}
pub(crate) use name_enum;

name_enum!(IntrinsicKind, "intrinsic kind",
    IntrinsicKind::Rnd => "rnd",
    IntrinsicKind::Constant => "constant",
    IntrinsicKind::None => "none",
);

name_enum!(AugmentationMode, "augmentation mode",
    AugmentationMode::Edge => "edge",
    AugmentationMode::State => "state",
    AugmentationMode::Joint => "joint",
    AugmentationMode::None => "none",
);

#[derive(Clone, Debug, PartialEq)]
pub struct IntrinsicConfig {
    pub kind: IntrinsicKind,
    pub alpha: f64,
    pub mode: AugmentationMode,
    pub embed_dim: usize,
    pub hidden: Vec<usize>,
    /// Divide RND novelty by a running standard deviation of raw novelty.
    pub normalize: bool,
}

impl Default for IntrinsicConfig {
    fn default() -> Self {
        Self::none()
    }
}

impl IntrinsicConfig {
    pub fn none() -> Self {
        Self {
            kind: IntrinsicKind::None,
            alpha: 0.0,
            mode: AugmentationMode::None,
            embed_dim: 64,
            hidden: vec![256, 256],
            normalize: false,
        }
    }

    pub fn rnd(alpha: f64, mode: AugmentationMode) -> Self {
        Self {
            kind: IntrinsicKind::Rnd,
            alpha,
            mode,
            ..Self::none()
        }
    }

    pub fn constant(alpha: f64, mode: AugmentationMode) -> Self {
        Self {
            kind: IntrinsicKind::Constant,
            alpha,
            mode,
            ..Self::none()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) || !self.alpha.is_finite() {
            return Err(Error::Config(format!("alpha must be >= 0, got {}", self.alpha)));
        }
        if self.kind == IntrinsicKind::None && self.mode != AugmentationMode::None {
            return Err(Error::Config("intrinsic kind none requires mode none".into()));
        }
        if self.embed_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::Config("RND layer sizes must be positive".into()));
        }
        Ok(())
    }

    /// Read `intrinsic`, `alpha`, `embed_dim`, `rnd_hidden` and
    /// `normalize_intrinsic` over `self`; the mode is set by the objective.
    pub fn apply_key_values(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(k) = kv.get_parsed::<IntrinsicKind>("intrinsic")? {
            self.kind = k;
        }
        if let Some(a) = kv.get_parsed("alpha")? {
            self.alpha = a;
        }
        if let Some(d) = kv.get_parsed("embed_dim")? {
            self.embed_dim = d;
        }
        if let Some(h) = kv.get_list("rnd_hidden")? {
            self.hidden = h;
        }
        if let Some(n) = kv.get_parsed("normalize_intrinsic")? {
            self.normalize = n;
        }
        Ok(())
    }
}

/// Welford running variance.
#[derive(Clone, Debug, Default, PartialEq)]
struct RunningStd {
    count: f64,
    mean: f64,
    m2: f64,
}

impl RunningStd {
    fn push(&mut self, x: f64) {
        self.count += 1.0;
        let delta = x - self.mean;
        self.mean += delta / self.count;
        self.m2 += delta * (x - self.mean);
    }

    fn std(&self) -> f64 {
        if self.count < 2.0 {
            1.0
        } else {
            (self.m2 / (self.count - 1.0)).sqrt().max(1e-8)
        }
    }
}

#[derive(Clone, Debug)]
pub struct RndPair {
    grid: GridConfig,
    target: Mlp,
    pub predictor: Mlp,
    pub alpha: f64,
    embed_dim: usize,
    target_cache: HashMap<usize, Vec<f64>>,
    normalizer: Option<RunningStd>,
}

impl RndPair {
    /// Target and predictor drawn independently from `rng`.
    pub fn new(grid: &GridConfig, cfg: &IntrinsicConfig, rng: &mut Rng) -> Result<Self> {
        let spec = Self::spec(grid, cfg)?;
        let target = Mlp::gaussian(spec.clone(), rng);
        let predictor = Mlp::gaussian(spec, rng);
        Ok(Self::from_parts(grid, cfg, target, predictor))
    }

    pub fn from_parts(grid: &GridConfig, cfg: &IntrinsicConfig, target: Mlp, predictor: Mlp) -> Self {
        Self {
            grid: grid.clone(),
            embed_dim: target.spec.output_width(),
            target,
            predictor,
            alpha: cfg.alpha,
            target_cache: HashMap::new(),
            normalizer: cfg.normalize.then(RunningStd::default),
        }
    }

    pub fn spec(grid: &GridConfig, cfg: &IntrinsicConfig) -> Result<MlpSpec> {
        let mut sizes = vec![grid.feature_width()];
        sizes.extend(&cfg.hidden);
        sizes.push(cfg.embed_dim);
        MlpSpec::new(sizes)
    }

    pub fn target(&self) -> &Mlp {
        &self.target
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    /// Target outputs for the given cells, computed once per cell.
    fn target_rows(&mut self, cells: &[usize]) -> Result<Tensor> {
        let missing: Vec<usize> = {
            let mut m: Vec<usize> = cells.iter().copied().filter(|c| !self.target_cache.contains_key(c)).collect();
            m.sort_unstable();
            m.dedup();
            m
        };
        if !missing.is_empty() {
            let out = self.target.forward(&features(&self.grid, &missing))?;
            for (row, &c) in missing.iter().enumerate() {
                self.target_cache.insert(c, out.row_slice(row).to_vec());
            }
        }
        let mut data = Vec::with_capacity(cells.len() * self.embed_dim);
        for c in cells {
            data.extend_from_slice(&self.target_cache[c]);
        }
        Tensor::new(cells.len(), self.embed_dim, data)
    }

    /// Unscaled `||phi(s) - phi_bar(s)||_2` for each cell.
    fn raw_norms(&mut self, cells: &[usize]) -> Result<Vec<f64>> {
        let target = self.target_rows(cells)?;
        let pred = self.predictor.forward(&features(&self.grid, cells))?;
        Ok((0..cells.len())
            .map(|i| {
                pred.row_slice(i)
                    .iter()
                    .zip(target.row_slice(i))
                    .map(|(p, t)| (p - t) * (p - t))
                    .sum::<f64>()
                    .sqrt()
            })
            .collect())
    }

    fn scale(&self) -> f64 {
        match &self.normalizer {
            Some(n) => self.alpha / n.std(),
            None => self.alpha,
        }
    }

    pub fn novelty(&mut self, s: &GridState) -> Result<f64> {
        Ok(self.novelty_batch(std::slice::from_ref(s))?[0])
    }

    pub fn novelty_batch(&mut self, states: &[GridState]) -> Result<Vec<f64>> {
        let (cells, slots) = unique_cells(&self.grid, states);
        let scale = self.scale();
        let norms = self.raw_norms(&cells)?;
        Ok(slots.into_iter().map(|i| scale * norms[i]).collect())
    }

    /// Novelty of every non-stopped cell in row-major order.
    pub fn novelty_table(&mut self) -> Result<Vec<f64>> {
        let cells: Vec<usize> = (0..self.grid.num_cells()).collect();
        let scale = self.scale();
        let mut out = Vec::with_capacity(cells.len());
        for chunk in cells.chunks(4096) {
            out.extend(self.raw_norms(chunk)?.into_iter().map(|n| scale * n));
        }
        Ok(out)
    }

    pub fn edge_intrinsic(&mut self, s: &GridState, s_next: &GridState) -> Result<f64> {
        check_edge(&self.grid, s, s_next)?;
        self.novelty(s_next)
    }

    /// One Adam step on the mean over `states` of the unscaled distance.
    /// Returns the loss before the step.
    pub fn update_predictor(&mut self, states: &[GridState], opt: &mut Adam) -> Result<f64> {
        Ok(self.update_predictor_reporting(states, opt)?.0)
    }

    /// Like [`RndPair::update_predictor`], also returning the pre-step
    /// novelty of each distinct cell in `states`.
    pub fn update_predictor_reporting(
        &mut self,
        states: &[GridState],
        opt: &mut Adam,
    ) -> Result<(f64, HashMap<usize, f64>)> {
        if states.is_empty() {
            return Err(Error::Config("update_predictor needs a non-empty batch".into()));
        }
        // Repeated states are evaluated once and weighted by multiplicity.
        let (cells, slots) = unique_cells(&self.grid, states);
        let mut weights = vec![0.0; cells.len()];
        for &i in &slots {
            weights[i] += 1.0 / states.len() as f64;
        }
        let target = self.target_rows(&cells)?;
        let mut g = Graph::new();
        let bound = self.predictor.bind(&mut g);
        let x = g.constant(features(&self.grid, &cells));
        let pred = self.predictor.forward_graph(&bound, &mut g, x)?;
        let t = g.constant(target);
        let diff = g.sub(pred, t)?;
        let sq = g.square(diff)?;
        let per_state = g.sum_axis(sq, crate::autodiff::Axis::Cols)?;
        let norms = g.sqrt(per_state)?;
        let w = g.constant(Tensor::column(weights));
        let weighted = g.mul(norms, w)?;
        let loss = g.sum(weighted)?;
        let value = g.value(loss).item();
        let scale = self.scale();
        let novelty = cells
            .iter()
            .zip(g.value(norms).data())
            .map(|(&c, &n)| (c, scale * n))
            .collect();
        if let Some(n) = &mut self.normalizer {
            let values = g.value(norms).data();
            for &i in &slots {
                n.push(values[i]);
            }
        }
        let grads = g.backward(loss)?;
        let grads = self.predictor.grads(&bound, &grads);
        opt.step(&mut self.predictor.params_mut(), &grads);
        Ok((value, novelty))
    }
}

/// Distinct cells in first-seen order, and for each state its slot.
fn unique_cells(grid: &GridConfig, states: &[GridState]) -> (Vec<usize>, Vec<usize>) {
    let mut index = HashMap::new();
    let mut cells = Vec::new();
    let slots = states
        .iter()
        .map(|s| {
            let c = grid.cell_index(&s.coords);
            *index.entry(c).or_insert_with(|| {
                cells.push(c);
                cells.len() - 1
            })
        })
        .collect();
    (cells, slots)
}

fn features(grid: &GridConfig, cells: &[usize]) -> Tensor {
    let w = grid.feature_width();
    let mut data = vec![0.0; cells.len() * w];
    for (row, &c) in data.chunks_mut(w).zip(cells) {
        env::write_features(grid, &grid.cell_coords(c), row);
    }
    Tensor::new(cells.len(), w, data).expect("shape")
}

fn check_edge(grid: &GridConfig, s: &GridState, s_next: &GridState) -> Result<()> {
    if env::children(grid, s).iter().any(|(c, _)| c == s_next) {
        Ok(())
    } else {
        Err(Error::InvalidAction {
            state: s.to_string(),
            action: format!("edge to {s_next}"),
        })
    }
}

/// The constant-bonus baseline: `alpha` for every state and edge.
pub fn constant_intrinsic(cfg: &IntrinsicConfig) -> Result<f64> {
    if cfg.kind != IntrinsicKind::Constant {
        return Err(Error::Config("constant_intrinsic requires kind constant".into()));
    }
    Ok(cfg.alpha)
}

/// Source of intrinsic rewards for a run.
#[derive(Clone, Debug)]
pub enum IntrinsicSource {
    Rnd(Box<RndPair>),
    Constant(f64),
    None,
}

impl IntrinsicSource {
    pub fn new(grid: &GridConfig, cfg: &IntrinsicConfig, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(match cfg.kind {
            IntrinsicKind::Rnd => Self::Rnd(Box::new(RndPair::new(grid, cfg, rng)?)),
            IntrinsicKind::Constant => Self::Constant(cfg.alpha),
            IntrinsicKind::None => Self::None,
        })
    }

    pub fn state_rewards(&mut self, states: &[GridState]) -> Result<Vec<f64>> {
        match self {
            Self::Rnd(p) => p.novelty_batch(states),
            Self::Constant(a) => Ok(vec![*a; states.len()]),
            Self::None => Ok(vec![0.0; states.len()]),
        }
    }

    pub fn rnd(&self) -> Option<&RndPair> {
        match self {
            Self::Rnd(p) => Some(p),
            _ => None,
        }
    }

    pub fn rnd_mut(&mut self) -> Option<&mut RndPair> {
        match self {
            Self::Rnd(p) => Some(p),
            _ => None,
        }
    }
}

//! The training loop: sample a batch, annotate intrinsic rewards with the
//! current predictor, take one step on the flow objective, then one step on
//! the predictor. Metrics are evaluated with the exact DP oracle.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::Write;

use crate::autodiff::{seed_rng, Adam, Graph, Tensor, Var};
use crate::config::{parse_key_values, KeyValues};
use crate::env::{self, Action, GridConfig, GridState};
use crate::error::{Error, Result};
use crate::flow_model::{BoundFlowModel, FlowModel, FlowModelConfig, Trajectory};
use crate::intrinsic::{AugmentationMode, IntrinsicConfig, IntrinsicKind, IntrinsicSource};
use crate::objectives::{balance_loss, flow_match_loss, Family, LossKind};
use crate::oracle::{exact_policy_marginals, l1_error, target_distribution, topk_reward, L1Mode};

/// Largest side length evaluated with the exact DP.
pub const EXACT_EVAL_LIMIT: usize = 128;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub objective: LossKind,
    pub intrinsic: IntrinsicConfig,
    pub batch_size: usize,
    pub total_updates: usize,
    pub epsilon: f64,
    pub lr_flow: f64,
    pub lr_log_z: f64,
    pub lr_predictor: f64,
    /// Anneal the predictor learning rate linearly to zero over the run.
    pub predictor_lr_decay: bool,
    pub seed: u64,
    pub eval_every: usize,
    pub hidden: Vec<usize>,
    pub uniform_backward: bool,
    pub topk: usize,
    pub l1_mode: L1Mode,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            objective: LossKind::Tb,
            intrinsic: IntrinsicConfig::none(),
            batch_size: 16,
            total_updates: 1000,
            epsilon: 0.01,
            lr_flow: 1e-3,
            lr_log_z: 0.1,
            lr_predictor: 1e-3,
            predictor_lr_decay: false,
            seed: 0,
            eval_every: 50,
            hidden: vec![256, 256],
            uniform_backward: false,
            topk: 5,
            l1_mode: L1Mode::Mean,
        }
    }
}

const KEYS: &[&str] = &[
    "objective",
    "intrinsic",
    "alpha",
    "embed_dim",
    "rnd_hidden",
    "normalize_intrinsic",
    "batch_size",
    "total_updates",
    "epsilon",
    "lr_flow",
    "lr_log_z",
    "lr_predictor",
    "predictor_lr_decay",
    "seed",
    "eval_every",
    "hidden",
    "uniform_backward",
    "topk",
    "l1_mode",
];

impl TrainerConfig {
    /// Defaults for an objective; augmented objectives get RND with
    /// `alpha = 0.001`.
    pub fn for_objective(objective: LossKind) -> Self {
        let intrinsic = if objective.is_augmented() {
            IntrinsicConfig::rnd(0.001, objective.mode())
        } else {
            IntrinsicConfig::none()
        };
        Self {
            objective,
            intrinsic,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be >= 1".into());
        }
        for (name, lr) in [
            ("lr_flow", self.lr_flow),
            ("lr_log_z", self.lr_log_z),
            ("lr_predictor", self.lr_predictor),
        ] {
            if !(lr > 0.0) || !lr.is_finite() {
                return bad(format!("{name} must be > 0, got {lr}"));
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad(format!("epsilon must be in [0, 1], got {}", self.epsilon));
        }
        if self.eval_every == 0 {
            return bad("eval_every must be >= 1".into());
        }
        if self.topk == 0 || self.topk > self.batch_size {
            return bad(format!("topk must be in 1..={}", self.batch_size));
        }
        if self.hidden.is_empty() || self.hidden.contains(&0) {
            return bad("hidden layer sizes must be positive".into());
        }
        self.intrinsic.validate()?;
        if self.intrinsic.mode != self.objective.mode() {
            return bad(format!(
                "objective {} needs augmentation mode {}, got {}",
                self.objective,
                self.objective.mode(),
                self.intrinsic.mode
            ));
        }
        Ok(())
    }

    /// Apply `key=value` overrides. The augmentation mode always follows the
    /// objective; an augmented objective with no `intrinsic` key uses RND.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        kv.check_known(KEYS)?;
        let objective = kv.get_parsed::<LossKind>("objective")?.unwrap_or(LossKind::Tb);
        let mut cfg = Self::for_objective(objective);
        cfg.intrinsic.apply_key_values(kv)?;
        cfg.intrinsic.mode = objective.mode();
        if objective.is_augmented() && cfg.intrinsic.kind == IntrinsicKind::None {
            let line = kv.get("intrinsic").map_or(0, |(l, _)| l);
            return Err(Error::Parse {
                line,
                msg: format!("objective {objective} needs intrinsic rewards"),
            });
        }
        macro_rules! set {
            ($field:ident, $key:literal) => {
                if let Some(v) = kv.get_parsed($key)? {
                    cfg.$field = v;
                }
            };
        }
        set!(batch_size, "batch_size");
        set!(total_updates, "total_updates");
        set!(epsilon, "epsilon");
        set!(lr_flow, "lr_flow");
        set!(lr_log_z, "lr_log_z");
        set!(lr_predictor, "lr_predictor");
        set!(predictor_lr_decay, "predictor_lr_decay");
        set!(seed, "seed");
        set!(eval_every, "eval_every");
        set!(uniform_backward, "uniform_backward");
        set!(topk, "topk");
        set!(l1_mode, "l1_mode");
        if let Some(h) = kv.get_list("hidden")? {
            cfg.hidden = h;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_key_values(&parse_key_values(text)?)
    }

    pub fn to_text(&self) -> String {
        let list = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
        let i = &self.intrinsic;
        let mut s = String::new();
        let _ = writeln!(s, "objective={}", self.objective);
        let _ = writeln!(s, "intrinsic={}", i.kind);
        let _ = writeln!(s, "alpha={}", i.alpha);
        let _ = writeln!(s, "embed_dim={}", i.embed_dim);
        let _ = writeln!(s, "rnd_hidden={}", list(&i.hidden));
        let _ = writeln!(s, "normalize_intrinsic={}", i.normalize);
        let _ = writeln!(s, "batch_size={}", self.batch_size);
        let _ = writeln!(s, "total_updates={}", self.total_updates);
        let _ = writeln!(s, "epsilon={}", self.epsilon);
        let _ = writeln!(s, "lr_flow={}", self.lr_flow);
        let _ = writeln!(s, "lr_log_z={}", self.lr_log_z);
        let _ = writeln!(s, "lr_predictor={}", self.lr_predictor);
        let _ = writeln!(s, "predictor_lr_decay={}", self.predictor_lr_decay);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "eval_every={}", self.eval_every);
        let _ = writeln!(s, "hidden={}", list(&self.hidden));
        let _ = writeln!(s, "uniform_backward={}", self.uniform_backward);
        let _ = writeln!(s, "topk={}", self.topk);
        let _ = writeln!(s, "l1_mode={}", self.l1_mode);
        s
    }
}

/// One evaluation row. `loss`, `mean_intrinsic` and `topk_reward` average
/// the updates since the previous row and are empty on the initial row.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalRow {
    pub update: usize,
    pub l1_error: Option<f64>,
    pub modes: usize,
    pub loss: Option<f64>,
    pub mean_intrinsic: Option<f64>,
    pub topk_reward: Option<f64>,
}

pub const CSV_HEADER: &str = "update,l1_error,modes,loss,mean_intrinsic,topk_reward";

#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub rows: Vec<EvalRow>,
    /// Terminating visits per cell over all training rollouts.
    pub visit_counts: Vec<u64>,
    /// Training loss of every update.
    pub losses: Vec<f64>,
}

fn opt_field(v: Option<f64>) -> String {
    v.map_or(String::new(), |x| x.to_string())
}

impl RunRecord {
    pub fn final_row(&self) -> &EvalRow {
        self.rows.last().expect("at least the initial row")
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{CSV_HEADER}")?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.update,
                opt_field(r.l1_error),
                r.modes,
                opt_field(r.loss),
                opt_field(r.mean_intrinsic),
                opt_field(r.topk_reward)
            )?;
        }
        Ok(())
    }

    pub fn rows_from_csv(text: &str) -> Result<Vec<EvalRow>> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, h)) if h.trim() == CSV_HEADER => {}
            _ => {
                return Err(Error::Parse {
                    line: 1,
                    msg: format!("expected header {CSV_HEADER:?}"),
                })
            }
        }
        let mut rows = Vec::new();
        for (i, line) in lines {
            let line_no = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 6 {
                return Err(Error::Parse {
                    line: line_no,
                    msg: format!("expected 6 fields, got {}", fields.len()),
                });
            }
            let err = |m: String| Error::Parse { line: line_no, msg: m };
            let opt = |s: &str| -> Result<Option<f64>> {
                if s.is_empty() {
                    Ok(None)
                } else {
                    s.parse().map(Some).map_err(|e| err(format!("{s:?}: {e}")))
                }
            };
            rows.push(EvalRow {
                update: fields[0].parse().map_err(|e| err(format!("update: {e}")))?,
                l1_error: opt(fields[1])?,
                modes: fields[2].parse().map_err(|e| err(format!("modes: {e}")))?,
                loss: opt(fields[3])?,
                mean_intrinsic: opt(fields[4])?,
                topk_reward: opt(fields[5])?,
            });
        }
        Ok(rows)
    }

    /// Visit counts as an `H x H` matrix for 2-D grids (row = first
    /// coordinate), otherwise one `coords...,count` line per cell.
    pub fn write_visits_csv<W: Write>(&self, grid: &GridConfig, mut w: W) -> Result<()> {
        if grid.num_dims == 2 {
            for row in self.visit_counts.chunks(grid.side_length) {
                let cells: Vec<String> = row.iter().map(|c| c.to_string()).collect();
                writeln!(w, "{}", cells.join(","))?;
            }
        } else {
            for (i, c) in self.visit_counts.iter().enumerate() {
                let coords: Vec<String> = grid.cell_coords(i).iter().map(|x| x.to_string()).collect();
                writeln!(w, "{},{c}", coords.join(","))?;
            }
        }
        Ok(())
    }
}

/// Goal cells with at least one terminating visit.
pub fn modes_discovered(visit_counts: &[u64], grid: &GridConfig) -> usize {
    grid.goal_cells
        .iter()
        .filter(|g| visit_counts[grid.cell_index(g)] > 0)
        .count()
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent seeds for model init, RND init and rollouts.
pub fn derive_seeds(seed: u64) -> [u64; 3] {
    let mut s = seed;
    [splitmix64(&mut s), splitmix64(&mut s), splitmix64(&mut s)]
}

/// Fill intrinsic fields according to `mode`. Edge rewards are the reward
/// of the reached state; stop edges get zero. Only joint mode sets the
/// terminal bonus.
pub fn annotate_intrinsic(
    batch: &mut [Trajectory],
    source: &mut IntrinsicSource,
    mode: AugmentationMode,
) -> Result<()> {
    if mode == AugmentationMode::None || matches!(source, IntrinsicSource::None) {
        return annotate_with(batch, mode, |_| 0.0);
    }
    let states: Vec<GridState> = batch.iter().flat_map(|t| t.states.iter().cloned()).collect();
    let rewards = source.state_rewards(&states)?;
    let mut it = rewards.into_iter();
    let mut per_state: Vec<Vec<f64>> = Vec::with_capacity(batch.len());
    for tau in batch.iter() {
        per_state.push(it.by_ref().take(tau.states.len()).collect());
    }
    for (tau, r) in batch.iter_mut().zip(per_state) {
        fill(tau, mode, |t| r[t]);
    }
    Ok(())
}

/// Write intrinsic fields with `reward(t)` giving the reward of state `t`
/// along the trajectory.
fn fill(tau: &mut Trajectory, mode: AugmentationMode, reward: impl Fn(usize) -> f64) {
    tau.terminal_intrinsic = 0.0;
    for t in 0..tau.actions.len() {
        tau.edge_intrinsic[t] = match (mode, tau.actions[t]) {
            (AugmentationMode::None, _) | (_, Action::Stop) => 0.0,
            _ => reward(t + 1),
        };
    }
    if mode == AugmentationMode::Joint {
        tau.terminal_intrinsic = reward(tau.states.len() - 1);
    }
}

/// Annotate from a per-cell reward lookup.
fn annotate_with(batch: &mut [Trajectory], mode: AugmentationMode, reward: impl Fn(&GridState) -> f64) -> Result<()> {
    for tau in batch.iter_mut() {
        let states = tau.states.clone();
        fill(tau, mode, |t| reward(&states[t]));
    }
    Ok(())
}

/// Intrinsic reward of each child of every node in a flow-matching batch,
/// keyed by cell.
fn child_rewards(grid: &GridConfig, batch: &[Trajectory], source: &mut IntrinsicSource) -> Result<HashMap<usize, f64>> {
    let mut cells: Vec<usize> = Vec::new();
    for tau in batch {
        for s in tau.states.iter().skip(1).filter(|s| !s.stopped) {
            for (c, a) in env::children(grid, s) {
                if a != Action::Stop {
                    cells.push(grid.cell_index(&c.coords));
                }
            }
        }
    }
    cells.sort_unstable();
    cells.dedup();
    let states: Vec<GridState> = cells.iter().map(|&c| GridState::new(grid.cell_coords(c), false)).collect();
    let rewards = source.state_rewards(&states)?;
    Ok(cells.into_iter().zip(rewards).collect())
}

/// Flow-model optimizers: networks share one Adam state, `log_z` has its own.
pub struct FlowOptimizers {
    pub net: Adam,
    pub log_z: Adam,
}

impl FlowOptimizers {
    pub fn new(lr_flow: f64, lr_log_z: f64) -> Self {
        Self {
            net: Adam::new(lr_flow),
            log_z: Adam::new(lr_log_z),
        }
    }
}

/// Build the objective on `g`. `fm_rewards` maps child cells to their
/// intrinsic reward for the augmented flow-matching loss.
pub fn objective_loss(
    g: &mut Graph,
    model: &FlowModel,
    bound: &BoundFlowModel,
    kind: LossKind,
    batch: &[Trajectory],
    fm_rewards: Option<&HashMap<usize, f64>>,
) -> Result<Var> {
    match kind.family() {
        Family::Fm => {
            let grid = model.grid();
            let lookup = |s: &GridState| fm_rewards.map_or(0.0, |m| m.get(&grid.cell_index(&s.coords)).copied().unwrap_or(0.0));
            let f: Option<&dyn Fn(&GridState) -> f64> = if kind.is_augmented() { Some(&lookup) } else { None };
            let terms = model.flow_match_terms(g, bound, batch, f)?;
            flow_match_loss(g, &terms)
        }
        _ => {
            let terms = model.batch_terms(g, bound, batch, kind.uses_state_flow())?;
            balance_loss(g, kind, &terms)
        }
    }
}

/// One optimizer step on the flow objective; returns the pre-step loss.
/// A non-finite loss is returned without stepping.
pub fn flow_step(
    model: &mut FlowModel,
    kind: LossKind,
    batch: &[Trajectory],
    fm_rewards: Option<&HashMap<usize, f64>>,
    opt: &mut FlowOptimizers,
) -> Result<f64> {
    let mut g = Graph::new();
    let bound = model.bind(&mut g);
    let loss = objective_loss(&mut g, model, &bound, kind, batch, fm_rewards)?;
    let value = g.value(loss).item();
    if !value.is_finite() {
        return Ok(value);
    }
    let grads = g.backward(loss)?;
    let grads = model.grads(&bound, &grads);
    let mut net = grads.policy;
    net.extend(grads.log_flow);
    opt.net.step(&mut model.network_params_mut(), &net);
    opt.log_z.step(&mut [&mut model.log_z], &[grads.log_z]);
    Ok(value)
}

fn snapshot(model: &FlowModel, batch: &[Trajectory], loss: f64) -> String {
    let terminals: Vec<String> = batch.iter().map(|t| t.terminal().to_string()).collect();
    let intrinsic: f64 = batch
        .iter()
        .map(|t| t.edge_intrinsic.iter().sum::<f64>() + t.terminal_intrinsic)
        .fold(0.0, f64::max);
    format!(
        "loss={loss} log_z={} max_trajectory_intrinsic={intrinsic} terminals=[{}]",
        model.log_z(),
        terminals.join(" ")
    )
}

/// A trained model together with its run record.
pub struct TrainOutcome {
    pub record: RunRecord,
    pub model: FlowModel,
    pub intrinsic: IntrinsicSource,
}

pub fn train(cfg: &TrainerConfig, grid: &GridConfig) -> Result<RunRecord> {
    Ok(train_full(cfg, grid)?.record)
}

pub fn train_full(cfg: &TrainerConfig, grid: &GridConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    grid.validate()?;
    let [model_seed, rnd_seed, rollout_seed] = derive_seeds(cfg.seed);
    let model_cfg = FlowModelConfig {
        hidden: cfg.hidden.clone(),
        uniform_backward: cfg.uniform_backward,
    };
    let mut model = FlowModel::new(grid, &model_cfg, &mut seed_rng(model_seed))?;
    let mut source = IntrinsicSource::new(grid, &cfg.intrinsic, &mut seed_rng(rnd_seed))?;
    let mut rng = seed_rng(rollout_seed);
    let mut opt = FlowOptimizers::new(cfg.lr_flow, cfg.lr_log_z);
    let mut opt_pred = Adam::new(cfg.lr_predictor);
    let target = (grid.side_length <= EXACT_EVAL_LIMIT).then(|| target_distribution(grid)).transpose()?;
    let mode = cfg.objective.mode();

    let mut visits = vec![0u64; grid.num_cells()];
    let mut losses = Vec::with_capacity(cfg.total_updates);
    let mut rows = Vec::new();
    let (mut acc_loss, mut acc_intr, mut acc_topk, mut acc_n) = (0.0, 0.0, 0.0, 0usize);

    let evaluate = |model: &FlowModel| -> Result<Option<f64>> {
        match &target {
            Some(t) => Ok(Some(l1_error(&exact_policy_marginals(model)?, t, cfg.l1_mode)?)),
            None => Ok(None),
        }
    };
    rows.push(EvalRow {
        update: 0,
        l1_error: evaluate(&model)?,
        modes: 0,
        loss: None,
        mean_intrinsic: None,
        topk_reward: None,
    });

    for update in 1..=cfg.total_updates {
        let mut batch = model.rollout_batch(cfg.batch_size, cfg.epsilon, &mut rng)?;
        // Every intrinsic reward below comes from the predictor as it was
        // before this iteration's predictor step.
        let fm_rewards = if cfg.objective == LossKind::FmEdgeAug {
            Some(child_rewards(grid, &batch, &mut source)?)
        } else {
            None
        };
        match source.rnd_mut() {
            Some(pair) => {
                if cfg.predictor_lr_decay {
                    opt_pred.learning_rate = cfg.lr_predictor * (1.0 - (update - 1) as f64 / cfg.total_updates as f64);
                }
                let states: Vec<GridState> = batch
                    .iter()
                    .flat_map(|t| t.states.iter().filter(|s| !s.stopped).cloned())
                    .collect();
                let (_, novelty) = pair.update_predictor_reporting(&states, &mut opt_pred)?;
                annotate_with(&mut batch, mode, |s| novelty[&grid.cell_index(&s.coords)])?;
            }
            None => annotate_intrinsic(&mut batch, &mut source, mode)?,
        }
        let loss = flow_step(&mut model, cfg.objective, &batch, fm_rewards.as_ref(), &mut opt)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                update,
                snapshot: snapshot(&model, &batch, loss),
            });
        }
        for tau in &batch {
            visits[grid.cell_index(&tau.terminal().coords)] += 1;
        }
        let rewards: Vec<f64> = batch.iter().map(|t| t.terminal_reward).collect();
        let intr = batch
            .iter()
            .map(|t| t.edge_intrinsic.iter().sum::<f64>() + t.terminal_intrinsic)
            .sum::<f64>()
            / batch.len() as f64;
        losses.push(loss);
        acc_loss += loss;
        acc_intr += intr;
        acc_topk += topk_reward(&rewards, cfg.topk)?;
        acc_n += 1;

        if update % cfg.eval_every == 0 || update == cfg.total_updates {
            let n = acc_n as f64;
            rows.push(EvalRow {
                update,
                l1_error: evaluate(&model)?,
                modes: modes_discovered(&visits, grid),
                loss: Some(acc_loss / n),
                mean_intrinsic: Some(acc_intr / n),
                topk_reward: Some(acc_topk / n),
            });
            (acc_loss, acc_intr, acc_topk, acc_n) = (0.0, 0.0, 0.0, 0);
        }
    }
    Ok(TrainOutcome {
        record: RunRecord {
            rows,
            visit_counts: visits,
            losses,
        },
        model,
        intrinsic: source,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub steps: usize,
    pub final_loss: f64,
}

/// Full-batch training on a fixed trajectory set (intrinsic fields are used
/// as given) until the loss drops below `tol` or `max_steps` is reached.
pub fn fit_trajectories(
    model: &mut FlowModel,
    kind: LossKind,
    batch: &[Trajectory],
    opt: &mut FlowOptimizers,
    max_steps: usize,
    tol: f64,
) -> Result<FitReport> {
    let mut loss = f64::INFINITY;
    for step in 0..max_steps {
        loss = flow_step(model, kind, batch, None, opt)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                update: step,
                snapshot: snapshot(model, batch, loss),
            });
        }
        if loss < tol {
            return Ok(FitReport { steps: step, final_loss: loss });
        }
    }
    Ok(FitReport {
        steps: max_steps,
        final_loss: loss,
    })
}

/// Model parameters as a single tensor list, for bitwise comparisons.
pub fn parameter_snapshot(model: &FlowModel) -> Vec<Tensor> {
    model.named_params().into_iter().map(|(_, t)| t).collect()
}

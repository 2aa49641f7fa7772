//! Parameterized flow network over the hypergrid.
//!
//! One policy MLP maps a state's features to `num_dims + 1` forward logits
//! followed by `num_dims` backward logits (one per decremented dimension).
//! A second MLP gives `log F(s)`, and `log_z` is a free scalar. Forward
//! logits are masked to the valid actions and backward logits to existing
//! parents before normalization. In flow-matching mode the raw forward
//! outputs are read as log edge flows `log F(s -> s')`.

use std::collections::HashMap;

use rand::Rng as _;

use crate::autodiff::{
    read_checkpoint, stable_lse, write_checkpoint, BoundMlp, Gradients, Graph, Mlp, MlpSpec, Rng,
    Tensor, Var,
};
use crate::env::{self, Action, GridConfig, GridState};
use crate::error::{Error, Result};
use crate::objectives::{BatchTerms, FlowMatchTerms};

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModelConfig {
    pub hidden: Vec<usize>,
    /// Use a fixed uniform backward policy over parents instead of the
    /// learned backward logits.
    pub uniform_backward: bool,
}

impl Default for FlowModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![256, 256],
            uniform_backward: false,
        }
    }
}

/// A complete trajectory `s_0 -> ... -> s_n` with `s_n` stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub states: Vec<GridState>,
    pub actions: Vec<Action>,
    pub terminal_reward: f64,
    /// One entry per action. Stop transitions always carry zero; the
    /// terminal bonus lives in `terminal_intrinsic`.
    pub edge_intrinsic: Vec<f64>,
    pub terminal_intrinsic: f64,
}

impl Trajectory {
    /// Build from an action sequence starting at the origin.
    pub fn from_actions(grid: &GridConfig, actions: &[Action]) -> Result<Self> {
        let mut states = vec![env::initial_state(grid)];
        for &a in actions {
            let next = env::step(grid, states.last().expect("non-empty"), a)?;
            states.push(next);
        }
        let last = states.last().expect("non-empty");
        let terminal_reward = env::reward(grid, last)?;
        Ok(Self {
            states,
            actions: actions.to_vec(),
            terminal_reward,
            edge_intrinsic: vec![0.0; actions.len()],
            terminal_intrinsic: 0.0,
        })
    }

    pub fn terminal(&self) -> &GridState {
        self.states.last().expect("trajectory has states")
    }

    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    /// Increment transitions as `(from, to, dim, edge_intrinsic)`.
    pub fn increments(&self) -> impl Iterator<Item = (&GridState, &GridState, usize, f64)> {
        self.actions.iter().enumerate().filter_map(move |(t, a)| match a {
            Action::Increment(d) => Some((&self.states[t], &self.states[t + 1], *d, self.edge_intrinsic[t])),
            Action::Stop => None,
        })
    }

    /// Check consecutive states against `step` and the stopped-last rule.
    pub fn validate(&self, grid: &GridConfig) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("invalid trajectory: {m}")));
        if self.states.len() != self.actions.len() + 1 || self.edge_intrinsic.len() != self.actions.len() {
            return bad("length mismatch");
        }
        if self.states[0] != env::initial_state(grid) {
            return bad("does not start at the origin");
        }
        for (t, &a) in self.actions.iter().enumerate() {
            if env::step(grid, &self.states[t], a)? != self.states[t + 1] {
                return bad("inconsistent transition");
            }
        }
        if self.states.iter().filter(|s| s.stopped).count() != 1 || !self.terminal().stopped {
            return bad("last state must be the only stopped state");
        }
        Ok(())
    }
}

/// Masked log-softmax on plain values; masked entries are `-inf`.
pub fn masked_log_softmax(logits: &[f64], mask: &[bool]) -> Vec<f64> {
    let valid: Vec<f64> = logits.iter().zip(mask).filter(|(_, &m)| m).map(|(&x, _)| x).collect();
    let z = stable_lse(&valid);
    logits
        .iter()
        .zip(mask)
        .map(|(&x, &m)| if m { x - z } else { f64::NEG_INFINITY })
        .collect()
}

/// Draw an action index from `(1 - eps) * exp(log_probs) + eps * uniform(mask)`.
pub fn sample_mixture(log_probs: &[f64], mask: &[bool], eps: f64, rng: &mut Rng) -> usize {
    let n_valid = mask.iter().filter(|&&m| m).count() as f64;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last = 0;
    for (i, (&lp, &m)) in log_probs.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        last = i;
        acc += (1.0 - eps) * lp.exp() + eps / n_valid;
        if u < acc {
            return i;
        }
    }
    last
}

#[derive(Clone, Debug, PartialEq)]
pub struct FlowModel {
    grid: GridConfig,
    pub policy: Mlp,
    pub log_flow: Mlp,
    pub log_z: Tensor,
    pub uniform_backward: bool,
}

/// Model parameters registered on a graph.
pub struct BoundFlowModel {
    pub policy: BoundMlp,
    pub log_flow: BoundMlp,
    pub log_z: Var,
}

pub struct FlowModelGrads {
    pub policy: Vec<Tensor>,
    pub log_flow: Vec<Tensor>,
    pub log_z: Tensor,
}

impl FlowModel {
    fn specs(grid: &GridConfig, cfg: &FlowModelConfig) -> Result<(MlpSpec, MlpSpec)> {
        let w = grid.feature_width();
        let mut p = vec![w];
        p.extend(&cfg.hidden);
        let mut f = p.clone();
        p.push(grid.num_actions() + grid.num_dims);
        f.push(1);
        Ok((MlpSpec::new(p)?, MlpSpec::new(f)?))
    }

    /// Gaussian-initialized networks with `log_z = 0`.
    pub fn new(grid: &GridConfig, cfg: &FlowModelConfig, rng: &mut Rng) -> Result<Self> {
        grid.validate()?;
        let (p, f) = Self::specs(grid, cfg)?;
        Ok(Self {
            grid: grid.clone(),
            policy: Mlp::gaussian(p, rng),
            log_flow: Mlp::gaussian(f, rng),
            log_z: Tensor::scalar(0.0),
            uniform_backward: cfg.uniform_backward,
        })
    }

    /// All parameters zero: uniform policies, `log F = 0`, `log_z = 0`.
    pub fn zeros(grid: &GridConfig, cfg: &FlowModelConfig) -> Result<Self> {
        grid.validate()?;
        let (p, f) = Self::specs(grid, cfg)?;
        Ok(Self {
            grid: grid.clone(),
            policy: Mlp::zeros(p),
            log_flow: Mlp::zeros(f),
            log_z: Tensor::scalar(0.0),
            uniform_backward: cfg.uniform_backward,
        })
    }

    pub fn grid(&self) -> &GridConfig {
        &self.grid
    }

    fn out_width(&self) -> usize {
        self.grid.num_actions() + self.grid.num_dims
    }

    fn stop_index(&self) -> usize {
        self.grid.num_dims
    }

    /// One-hot feature rows for the given cells.
    pub fn features(&self, cells: &[usize]) -> Tensor {
        let w = self.grid.feature_width();
        let mut data = vec![0.0; cells.len() * w];
        for (row, &cell) in data.chunks_mut(w).zip(cells) {
            env::write_features(&self.grid, &self.grid.cell_coords(cell), row);
        }
        Tensor::new(cells.len(), w, data).expect("shape")
    }

    fn policy_row(&self, s: &GridState) -> Result<Vec<f64>> {
        let x = Tensor::row(env::featurize(&self.grid, s));
        Ok(self.policy.forward(&x)?.into_data())
    }

    fn backward_mask(&self, s: &GridState) -> Vec<bool> {
        env::parent_mask(s)
    }

    /// Log forward probabilities over the full action vector; invalid
    /// actions are `-inf`.
    pub fn log_pf_all(&self, s: &GridState) -> Result<Vec<f64>> {
        if s.stopped {
            return Err(Error::TerminalHasNoActions);
        }
        let out = self.policy_row(s)?;
        let a = self.grid.num_actions();
        Ok(masked_log_softmax(&out[..a], &env::action_mask(&self.grid, s)))
    }

    pub fn log_pf(&self, s: &GridState, a: Action) -> Result<f64> {
        if !env::is_valid(&self.grid, s, a) {
            return Err(Error::InvalidAction {
                state: s.to_string(),
                action: a.to_string(),
            });
        }
        Ok(self.log_pf_all(s)?[a.index(self.grid.num_dims)])
    }

    /// `log P_B(parent | s)` where `a` is the action leading from the parent
    /// into `s`.
    pub fn log_pb(&self, s: &GridState, a: Action) -> Result<f64> {
        if s.is_initial() {
            return Err(Error::InitialHasNoParents);
        }
        let invalid = || Error::InvalidAction {
            state: s.to_string(),
            action: a.to_string(),
        };
        match (s.stopped, a) {
            (true, Action::Stop) => Ok(0.0),
            (true, _) | (false, Action::Stop) => Err(invalid()),
            (false, Action::Increment(d)) => {
                let mask = self.backward_mask(s);
                if d >= mask.len() || !mask[d] {
                    return Err(invalid());
                }
                if self.uniform_backward {
                    let n = mask.iter().filter(|&&m| m).count() as f64;
                    return Ok(-n.ln());
                }
                let out = self.policy_row(s)?;
                let a0 = self.grid.num_actions();
                Ok(masked_log_softmax(&out[a0..], &mask)[d])
            }
        }
    }

    pub fn log_state_flow(&self, s: &GridState) -> Result<f64> {
        let x = Tensor::row(env::featurize(&self.grid, s));
        Ok(self.log_flow.forward(&x)?.item())
    }

    pub fn log_z(&self) -> f64 {
        self.log_z.item()
    }

    pub fn sample_action(&self, s: &GridState, eps: f64, rng: &mut Rng) -> Result<Action> {
        let lp = self.log_pf_all(s)?;
        let mask = env::action_mask(&self.grid, s);
        let i = sample_mixture(&lp, &mask, eps, rng);
        Ok(Action::from_index(i, self.grid.num_dims))
    }

    /// Transition budget used to guard rollouts.
    pub fn max_transitions(&self) -> usize {
        2 * self.grid.side_length * self.grid.num_dims
    }

    pub fn rollout(&self, eps: f64, rng: &mut Rng) -> Result<Trajectory> {
        Ok(self.rollout_batch(1, eps, rng)?.remove(0))
    }

    /// Sample `n` trajectories in lockstep, one batched forward pass per
    /// step. Random draws happen in trajectory order, so results depend only
    /// on the generator state.
    pub fn rollout_batch(&self, n: usize, eps: f64, rng: &mut Rng) -> Result<Vec<Trajectory>> {
        let grid = &self.grid;
        let s0 = env::initial_state(grid);
        let mut states: Vec<Vec<GridState>> = vec![vec![s0]; n];
        let mut actions: Vec<Vec<Action>> = vec![Vec::new(); n];
        let mut active: Vec<usize> = (0..n).collect();
        let limit = self.max_transitions();
        let a_width = grid.num_actions();
        while !active.is_empty() {
            let cells: Vec<usize> = active
                .iter()
                .map(|&i| grid.cell_index(&states[i].last().expect("non-empty").coords))
                .collect();
            let out = self.policy.forward(&self.features(&cells))?;
            for (row, &i) in active.iter().enumerate() {
                let s = states[i].last().expect("non-empty").clone();
                let mask = env::action_mask(grid, &s);
                let lp = masked_log_softmax(&out.row_slice(row)[..a_width], &mask);
                let a = Action::from_index(sample_mixture(&lp, &mask, eps, rng), grid.num_dims);
                states[i].push(env::step(grid, &s, a)?);
                actions[i].push(a);
                if actions[i].len() > limit {
                    return Err(Error::TrajectoryTooLong(limit));
                }
            }
            active.retain(|&i| !states[i].last().expect("non-empty").stopped);
        }
        states
            .into_iter()
            .zip(actions)
            .map(|(states, actions)| {
                let terminal_reward = env::reward(grid, states.last().expect("non-empty"))?;
                let k = actions.len();
                Ok(Trajectory {
                    states,
                    actions,
                    terminal_reward,
                    edge_intrinsic: vec![0.0; k],
                    terminal_intrinsic: 0.0,
                })
            })
            .collect()
    }

    /// Forward probabilities for every cell, in row-major cell order.
    /// Invalid actions have probability exactly zero.
    pub fn forward_policy_table(&self) -> Result<Vec<Vec<f64>>> {
        let cells: Vec<usize> = (0..self.grid.num_cells()).collect();
        let a = self.grid.num_actions();
        let mut table = Vec::with_capacity(cells.len());
        // Chunked so very large grids do not allocate one huge activation.
        for chunk in cells.chunks(4096) {
            let out = self.policy.forward(&self.features(chunk))?;
            for (row, &cell) in chunk.iter().enumerate() {
                let s = GridState::new(self.grid.cell_coords(cell), false);
                let lp = masked_log_softmax(&out.row_slice(row)[..a], &env::action_mask(&self.grid, &s));
                table.push(lp.iter().map(|l| l.exp()).collect());
            }
        }
        Ok(table)
    }

    pub fn bind(&self, g: &mut Graph) -> BoundFlowModel {
        BoundFlowModel {
            policy: self.policy.bind(g),
            log_flow: self.log_flow.bind(g),
            log_z: g.leaf(self.log_z.clone()),
        }
    }

    pub fn grads(&self, bound: &BoundFlowModel, grads: &Gradients) -> FlowModelGrads {
        FlowModelGrads {
            policy: self.policy.grads(&bound.policy, grads),
            log_flow: self.log_flow.grads(&bound.log_flow, grads),
            log_z: grads.get_or_zeros(bound.log_z, (1, 1)),
        }
    }

    /// Network parameters (policy then state flow), excluding `log_z`.
    pub fn network_params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut v = self.policy.params_mut();
        v.extend(self.log_flow.params_mut());
        v
    }

    /// Recorded policy outputs for a set of distinct cells.
    fn policy_graph(&self, g: &mut Graph, bound: &BoundFlowModel, cells: &[usize]) -> Result<Var> {
        let x = g.constant(self.features(cells));
        self.policy.forward_graph(&bound.policy, g, x)
    }

    /// Build the per-transition log terms of a batch for the balance
    /// objectives. `with_state_flow` controls whether the state-flow network
    /// is evaluated; when it is not, flow terms are zero constants.
    pub fn batch_terms(
        &self,
        g: &mut Graph,
        bound: &BoundFlowModel,
        batch: &[Trajectory],
        with_state_flow: bool,
    ) -> Result<BatchTerms> {
        let grid = &self.grid;
        let mut rows = CellRows::default();
        for tau in batch {
            for s in &tau.states {
                rows.insert(grid.cell_index(&s.coords));
            }
        }
        let width = self.out_width();
        let a0 = grid.num_actions();
        let out = self.policy_graph(g, bound, &rows.cells)?;

        let mut fwd_mask = Vec::with_capacity(rows.cells.len() * width);
        let mut bwd_mask = Vec::with_capacity(rows.cells.len() * width);
        for &cell in &rows.cells {
            let s = GridState::new(grid.cell_coords(cell), false);
            let fm = env::action_mask(grid, &s);
            let mut bm = self.backward_mask(&s);
            if !bm.iter().any(|&m| m) {
                // Origin row: backward logits are never read.
                bm.iter_mut().for_each(|m| *m = true);
            }
            fwd_mask.extend(fm.iter().copied().chain(std::iter::repeat(false).take(grid.num_dims)));
            bwd_mask.extend(std::iter::repeat(false).take(a0).chain(bm));
        }
        let log_fwd = g.masked_log_softmax(out, fwd_mask)?;

        let mut inc_pf = Vec::new();
        let mut inc_pb = Vec::new();
        let mut inc_pb_uniform = Vec::new();
        let mut inc_src = Vec::new();
        let mut inc_dst = Vec::new();
        let mut inc_intrinsic = Vec::new();
        let mut inc_segment = Vec::new();
        let mut stop_pf = Vec::new();
        let mut stop_src = Vec::new();
        for (k, tau) in batch.iter().enumerate() {
            for (from, to, d, r) in tau.increments() {
                let rs = rows.row(grid.cell_index(&from.coords));
                let rd = rows.row(grid.cell_index(&to.coords));
                inc_pf.push(rs * width + d);
                inc_pb.push(rd * width + a0 + d);
                inc_pb_uniform.push(-(env::parents(grid, to).len() as f64).ln());
                inc_src.push(rs);
                inc_dst.push(rd);
                inc_intrinsic.push(r);
                inc_segment.push(k);
            }
            let last = tau.states[tau.states.len() - 2].clone();
            let rl = rows.row(grid.cell_index(&last.coords));
            stop_pf.push(rl * width + self.stop_index());
            stop_src.push(rl);
        }

        let inc_log_pf = g.gather(log_fwd, inc_pf)?;
        let stop_log_pf = g.gather(log_fwd, stop_pf)?;
        let inc_log_pb = if self.uniform_backward {
            g.constant(Tensor::column(inc_pb_uniform))
        } else {
            let log_bwd = g.masked_log_softmax(out, bwd_mask)?;
            g.gather(log_bwd, inc_pb)?
        };
        let (inc_log_flow_src, inc_log_flow_dst, stop_log_flow_src) = if with_state_flow {
            let x = g.constant(self.features(&rows.cells));
            let flow = self.log_flow.forward_graph(&bound.log_flow, g, x)?;
            (
                g.gather(flow, inc_src)?,
                g.gather(flow, inc_dst)?,
                g.gather(flow, stop_src)?,
            )
        } else {
            let m = inc_src.len();
            (
                g.constant(Tensor::zeros(m, 1)),
                g.constant(Tensor::zeros(m, 1)),
                g.constant(Tensor::zeros(batch.len(), 1)),
            )
        };

        Ok(BatchTerms {
            num_trajectories: batch.len(),
            log_z: bound.log_z,
            inc_log_pf,
            inc_log_pb,
            inc_log_flow_src,
            inc_log_flow_dst,
            inc_intrinsic,
            inc_segment,
            stop_log_pf,
            stop_log_flow_src,
            reward: batch.iter().map(|t| t.terminal_reward).collect(),
            terminal_intrinsic: batch.iter().map(|t| t.terminal_intrinsic).collect(),
        })
    }

    /// Build flow-matching terms over every non-initial state of the batch.
    /// `child_reward` gives the intrinsic reward of the increment edge into a
    /// child state; pass `None` for the unaugmented objective.
    pub fn flow_match_terms(
        &self,
        g: &mut Graph,
        bound: &BoundFlowModel,
        batch: &[Trajectory],
        child_reward: Option<&dyn Fn(&GridState) -> f64>,
    ) -> Result<FlowMatchTerms> {
        let grid = &self.grid;
        let nodes: Vec<&GridState> = batch.iter().flat_map(|t| t.states.iter().skip(1)).collect();
        let mut rows = CellRows::default();
        for s in &nodes {
            rows.insert(grid.cell_index(&s.coords));
            for (p, _) in env::parents(grid, s) {
                rows.insert(grid.cell_index(&p.coords));
            }
        }
        let width = self.out_width();
        let out = self.policy_graph(g, bound, &rows.cells)?;

        let mut in_idx = Vec::new();
        let mut in_segment = Vec::new();
        let mut out_idx = Vec::new();
        let mut out_segment = Vec::new();
        let mut term_log_reward = Vec::new();
        let mut term_segment = Vec::new();
        let mut out_intrinsic = vec![0.0; nodes.len()];
        for (k, s) in nodes.iter().enumerate() {
            for (p, a) in env::parents(grid, s) {
                let rp = rows.row(grid.cell_index(&p.coords));
                in_idx.push(rp * width + a.index(grid.num_dims));
                in_segment.push(k);
            }
            if s.stopped {
                let r = env::reward(grid, s)?;
                if !(r > 0.0) {
                    return Err(Error::NonPositiveReward(r));
                }
                term_log_reward.push(r.ln());
                term_segment.push(k);
            } else {
                let rs = rows.row(grid.cell_index(&s.coords));
                for (c, a) in env::children(grid, s) {
                    out_idx.push(rs * width + a.index(grid.num_dims));
                    out_segment.push(k);
                    if let (Some(f), Action::Increment(_)) = (child_reward, a) {
                        out_intrinsic[k] += f(&c);
                    }
                }
            }
        }
        let log_in = g.gather(out, in_idx)?;
        let edge_out = g.gather(out, out_idx)?;
        let term = g.constant(Tensor::column(term_log_reward));
        let log_out = g.concat_rows(&[edge_out, term])?;
        out_segment.extend(term_segment);
        Ok(FlowMatchTerms {
            num_nodes: nodes.len(),
            log_in,
            in_segment,
            log_out,
            out_segment,
            out_intrinsic,
        })
    }

    pub fn named_params(&self) -> Vec<(String, Tensor)> {
        let mut v = self.policy.named_params("policy");
        v.extend(self.log_flow.named_params("log_flow"));
        v.push(("log_z".into(), self.log_z.clone()));
        v
    }

    pub fn save<W: std::io::Write>(&self, w: W) -> Result<()> {
        write_checkpoint(w, &self.named_params())
    }

    /// Load parameters into a model with matching architecture.
    pub fn load<R: std::io::Read>(&mut self, r: R) -> Result<()> {
        let records = read_checkpoint(r)?;
        self.policy.load_named("policy", &records)?;
        self.log_flow.load_named("log_flow", &records)?;
        let (_, z) = records
            .iter()
            .find(|(n, _)| n == "log_z")
            .ok_or_else(|| Error::Checkpoint("missing record log_z".into()))?;
        self.log_z = z.clone();
        Ok(())
    }
}

/// Distinct cells in first-seen order with their row index.
#[derive(Default)]
struct CellRows {
    cells: Vec<usize>,
    index: HashMap<usize, usize>,
}

impl CellRows {
    fn insert(&mut self, cell: usize) {
        let next = self.cells.len();
        self.index.entry(cell).or_insert_with(|| {
            self.cells.push(cell);
            next
        });
    }

    fn row(&self, cell: usize) -> usize {
        self.index[&cell]
    }
}

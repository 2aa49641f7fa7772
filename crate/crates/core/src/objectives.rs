//! Training criteria on recorded graph terms.
//!
//! The flow model gathers per-transition log quantities into
//! [`BatchTerms`] (or per-node edge flows into [`FlowMatchTerms`]); the
//! functions here turn those into scalar losses. Intrinsic rewards are plain
//! constants, so no gradient reaches the RND predictor through these losses.
//!
//! Brackets of the form `P_B + r / F(s')` are evaluated in log space as
//! `ln(exp(log F(s') + log P_B) + r) - log F(s')`, which equals the linear
//! bracket but never underflows. Stop transitions have `P_B = 1` and carry no
//! edge reward; the terminal bonus enters only through the joint objective.

use std::fmt;
use std::str::FromStr;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::intrinsic::{name_enum, AugmentationMode};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossKind {
    Fm,
    Db,
    Tb,
    FmEdgeAug,
    DbEdgeAug,
    TbEdgeAug,
    TbStateAug,
    TbJoint,
}

name_enum!(LossKind, "objective",
    LossKind::Fm => "fm",
    LossKind::Db => "db",
    LossKind::Tb => "tb",
    LossKind::FmEdgeAug => "fm_edge_aug",
    LossKind::DbEdgeAug => "db_edge_aug",
    LossKind::TbEdgeAug => "tb_edge_aug",
    LossKind::TbStateAug => "tb_state_aug",
    LossKind::TbJoint => "tb_joint",
);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Fm,
    Db,
    Tb,
}

impl LossKind {
    pub const ALL: [LossKind; 8] = [
        LossKind::Fm,
        LossKind::Db,
        LossKind::Tb,
        LossKind::FmEdgeAug,
        LossKind::DbEdgeAug,
        LossKind::TbEdgeAug,
        LossKind::TbStateAug,
        LossKind::TbJoint,
    ];

    pub fn family(self) -> Family {
        match self {
            LossKind::Fm | LossKind::FmEdgeAug => Family::Fm,
            LossKind::Db | LossKind::DbEdgeAug => Family::Db,
            _ => Family::Tb,
        }
    }

    pub fn mode(self) -> AugmentationMode {
        match self {
            LossKind::Fm | LossKind::Db | LossKind::Tb => AugmentationMode::None,
            LossKind::FmEdgeAug | LossKind::DbEdgeAug | LossKind::TbEdgeAug => AugmentationMode::Edge,
            LossKind::TbStateAug => AugmentationMode::State,
            LossKind::TbJoint => AugmentationMode::Joint,
        }
    }

    pub fn is_augmented(self) -> bool {
        self.mode() != AugmentationMode::None
    }

    /// Whether the state-flow network enters the loss.
    pub fn uses_state_flow(self) -> bool {
        matches!(self, LossKind::Db | LossKind::DbEdgeAug | LossKind::TbEdgeAug | LossKind::TbJoint)
    }
}

/// Per-transition log terms of a trajectory batch.
///
/// Increment transitions are flattened across trajectories; `inc_segment`
/// maps each one to its trajectory. Every trajectory has exactly one stop
/// transition, from `s_{n-1}` to the stopped state `s_n`.
#[derive(Clone, Debug)]
pub struct BatchTerms {
    pub num_trajectories: usize,
    pub log_z: Var,
    pub inc_log_pf: Var,
    pub inc_log_pb: Var,
    pub inc_log_flow_src: Var,
    pub inc_log_flow_dst: Var,
    pub inc_intrinsic: Vec<f64>,
    pub inc_segment: Vec<usize>,
    pub stop_log_pf: Var,
    pub stop_log_flow_src: Var,
    pub reward: Vec<f64>,
    pub terminal_intrinsic: Vec<f64>,
}

/// Edge flows around visited nodes.
///
/// `log_in` holds the log flows of every incoming edge of each node and
/// `log_out` every outgoing edge; terminal (stopped) nodes have a single
/// outgoing entry equal to `log R(x)`. `out_intrinsic[k]` is the sum of
/// intrinsic rewards on the outgoing edges of node `k`.
#[derive(Clone, Debug)]
pub struct FlowMatchTerms {
    pub num_nodes: usize,
    pub log_in: Var,
    pub in_segment: Vec<usize>,
    pub log_out: Var,
    pub out_segment: Vec<usize>,
    pub out_intrinsic: Vec<f64>,
}

fn log_positive(values: &[f64]) -> Result<Vec<f64>> {
    values
        .iter()
        .map(|&r| if r > 0.0 { Ok(r.ln()) } else { Err(Error::NonPositiveReward(r)) })
        .collect()
}

/// `ln(P_B + r / F(s'))` per increment transition.
fn log_brackets(g: &mut Graph, t: &BatchTerms) -> Result<Var> {
    let dst = g.add(t.inc_log_flow_dst, t.inc_log_pb)?;
    let num = g.log_add_exp_const(dst, t.inc_intrinsic.clone())?;
    g.sub(num, t.inc_log_flow_dst)
}

/// Per-trajectory TB-family residual `log(Z prod P_F) - log(rhs)`, `K x 1`.
pub fn tb_residuals(g: &mut Graph, kind: LossKind, t: &BatchTerms) -> Result<Var> {
    if kind.family() != Family::Tb {
        return Err(Error::Config(format!("{kind} is not a trajectory objective")));
    }
    let k = t.num_trajectories;
    let sum_pf = g.segment_sum(t.inc_log_pf, t.inc_segment.clone(), k)?;
    let lhs = g.add(sum_pf, t.stop_log_pf)?;
    let lhs = g.add(lhs, t.log_z)?;

    let (log_terminal, backward) = match kind {
        LossKind::Tb => (log_positive(&t.reward)?, t.inc_log_pb),
        LossKind::TbEdgeAug => (log_positive(&t.reward)?, log_brackets(g, t)?),
        LossKind::TbStateAug => {
            let mut sums = vec![0.0; k];
            for (&r, &s) in t.inc_intrinsic.iter().zip(&t.inc_segment) {
                sums[s] += r;
            }
            let total: Vec<f64> = t.reward.iter().zip(&sums).map(|(a, b)| a + b).collect();
            (log_positive(&total)?, t.inc_log_pb)
        }
        LossKind::TbJoint => {
            let total: Vec<f64> = t.reward.iter().zip(&t.terminal_intrinsic).map(|(a, b)| a + b).collect();
            (log_positive(&total)?, log_brackets(g, t)?)
        }
        _ => unreachable!(),
    };
    let sum_back = g.segment_sum(backward, t.inc_segment.clone(), k)?;
    let log_r = g.constant(Tensor::column(log_terminal));
    let rhs = g.add(log_r, sum_back)?;
    g.sub(lhs, rhs)
}

/// DB-family residuals: increments first, then one stop edge per
/// trajectory. `(M + K) x 1`.
pub fn db_residuals(g: &mut Graph, kind: LossKind, t: &BatchTerms) -> Result<Var> {
    if kind.family() != Family::Db {
        return Err(Error::Config(format!("{kind} is not a detailed-balance objective")));
    }
    let lhs = g.add(t.inc_log_flow_src, t.inc_log_pf)?;
    let rhs = g.add(t.inc_log_flow_dst, t.inc_log_pb)?;
    let rhs = if kind == LossKind::DbEdgeAug {
        g.log_add_exp_const(rhs, t.inc_intrinsic.clone())?
    } else {
        rhs
    };
    let inc = g.sub(lhs, rhs)?;
    let stop_lhs = g.add(t.stop_log_flow_src, t.stop_log_pf)?;
    let log_r = g.constant(Tensor::column(log_positive(&t.reward)?));
    let stop = g.sub(stop_lhs, log_r)?;
    g.concat_rows(&[inc, stop])
}

/// Mean squared residual for TB- and DB-family objectives.
pub fn balance_loss(g: &mut Graph, kind: LossKind, t: &BatchTerms) -> Result<Var> {
    let res = match kind.family() {
        Family::Tb => tb_residuals(g, kind, t)?,
        Family::Db => db_residuals(g, kind, t)?,
        Family::Fm => return Err(Error::Config(format!("{kind} needs flow-matching terms"))),
    };
    let sq = g.square(res)?;
    g.mean(sq)
}

/// Per-node flow-matching residual
/// `log sum_in F - log sum_out (F + r)`, `N x 1`.
pub fn fm_residuals(g: &mut Graph, t: &FlowMatchTerms) -> Result<Var> {
    let n = t.num_nodes;
    let lse_in = g.segment_logsumexp(t.log_in, t.in_segment.clone(), n)?;
    let lse_out = g.segment_logsumexp(t.log_out, t.out_segment.clone(), n)?;
    let out = g.log_add_exp_const(lse_out, t.out_intrinsic.clone())?;
    g.sub(lse_in, out)
}

pub fn flow_match_loss(g: &mut Graph, t: &FlowMatchTerms) -> Result<Var> {
    let res = fm_residuals(g, t)?;
    let sq = g.square(res)?;
    g.mean(sq)
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Family::Fm => "fm",
            Family::Db => "db",
            Family::Tb => "tb",
        })
    }
}

/// Helper for tests and oracles: build [`BatchTerms`] from constant values.
#[derive(Clone, Debug, Default)]
pub struct ConstTerms {
    pub log_z: f64,
    pub inc_log_pf: Vec<f64>,
    pub inc_log_pb: Vec<f64>,
    pub inc_log_flow_src: Vec<f64>,
    pub inc_log_flow_dst: Vec<f64>,
    pub inc_intrinsic: Vec<f64>,
    pub inc_segment: Vec<usize>,
    pub stop_log_pf: Vec<f64>,
    pub stop_log_flow_src: Vec<f64>,
    pub reward: Vec<f64>,
    pub terminal_intrinsic: Vec<f64>,
}

impl ConstTerms {
    pub fn build(&self, g: &mut Graph) -> BatchTerms {
        let mut col = |v: &[f64]| g.constant(Tensor::column(v.to_vec()));
        BatchTerms {
            num_trajectories: self.reward.len(),
            inc_log_pf: col(&self.inc_log_pf),
            inc_log_pb: col(&self.inc_log_pb),
            inc_log_flow_src: col(&self.inc_log_flow_src),
            inc_log_flow_dst: col(&self.inc_log_flow_dst),
            stop_log_pf: col(&self.stop_log_pf),
            stop_log_flow_src: col(&self.stop_log_flow_src),
            log_z: g.scalar(self.log_z),
            inc_intrinsic: self.inc_intrinsic.clone(),
            inc_segment: self.inc_segment.clone(),
            reward: self.reward.clone(),
            terminal_intrinsic: self.terminal_intrinsic.clone(),
        }
    }

    /// Evaluate a TB- or DB-family loss on these constants.
    pub fn loss(&self, kind: LossKind) -> Result<f64> {
        let mut g = Graph::new();
        let t = self.build(&mut g);
        let l = balance_loss(&mut g, kind, &t)?;
        Ok(g.value(l).item())
    }

    /// A single-trajectory batch.
    pub fn trajectory(log_z: f64, steps: &[(f64, f64, f64, f64)], stop_log_pf: f64, reward: f64) -> Self {
        // steps: (log_pf, log_pb, log_flow_dst, intrinsic)
        let n = steps.len();
        Self {
            log_z,
            inc_log_pf: steps.iter().map(|s| s.0).collect(),
            inc_log_pb: steps.iter().map(|s| s.1).collect(),
            inc_log_flow_src: vec![0.0; n],
            inc_log_flow_dst: steps.iter().map(|s| s.2).collect(),
            inc_intrinsic: steps.iter().map(|s| s.3).collect(),
            inc_segment: vec![0; n],
            stop_log_pf: vec![stop_log_pf],
            stop_log_flow_src: vec![0.0],
            reward: vec![reward],
            terminal_intrinsic: vec![0.0],
        }
    }

    /// A batch of single-edge DB terms; each edge gets its own segment and
    /// there are no stop transitions.
    pub fn edges(edges: &[(f64, f64, f64, f64, f64)]) -> Self {
        // edges: (log_flow_src, log_pf, log_flow_dst, log_pb, intrinsic)
        Self {
            inc_log_flow_src: edges.iter().map(|e| e.0).collect(),
            inc_log_pf: edges.iter().map(|e| e.1).collect(),
            inc_log_flow_dst: edges.iter().map(|e| e.2).collect(),
            inc_log_pb: edges.iter().map(|e| e.3).collect(),
            inc_intrinsic: edges.iter().map(|e| e.4).collect(),
            inc_segment: (0..edges.len()).collect(),
            ..Self::default()
        }
    }
}

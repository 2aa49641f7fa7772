//! Fast oracle and property checks. The `verify` subcommand and the
//! acceptance suite both run these.

use std::collections::HashMap;

use rand::Rng as _;

use crate::autodiff::{seed_rng, Graph, Rng, Tensor};
use crate::env::{self, Action, GridConfig, GridState};
use crate::error::Result;
use crate::flow_model::{FlowModel, FlowModelConfig, Trajectory};
use crate::objectives::{db_residuals, tb_residuals, ConstTerms, LossKind};
use crate::oracle::{backward_consistent_flows, brute_force_enumeration, enumerate_trajectories, exact_policy_marginals, zero_edge_table, EdgeTable};
use crate::trainer::objective_loss;

/// Outcome of one check.
#[derive(Clone, Debug, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn bound(name: &str, value: f64, tol: f64) -> Self {
        Self {
            name: name.into(),
            passed: value < tol,
            detail: format!("max {value:.3e} (tolerance {tol:.0e})"),
        }
    }
}

fn small_model(grid: &GridConfig, hidden: &[usize], rng: &mut Rng) -> Result<FlowModel> {
    let cfg = FlowModelConfig {
        hidden: hidden.to_vec(),
        uniform_backward: false,
    };
    let mut m = FlowModel::new(grid, &cfg, rng)?;
    m.log_z = Tensor::scalar(rng.random_range(-1.0..1.0));
    Ok(m)
}

/// Largest per-state gap between the DP marginals and brute-force
/// enumeration, over `draws` random models for each H in 2..=4.
pub fn oracle_equivalence(draws: usize, seed: u64) -> Result<f64> {
    let mut rng = seed_rng(seed);
    let mut worst: f64 = 0.0;
    for h in 2..=4 {
        let grid = GridConfig::new(h)?;
        for _ in 0..draws {
            let m = small_model(&grid, &[16, 16], &mut rng)?;
            let dp = exact_policy_marginals(&m)?;
            let (bf, _) = brute_force_enumeration(&m)?;
            for (a, b) in dp.probs().iter().zip(bf.probs()) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    Ok(worst)
}

/// Random edge intrinsic on increments (stop edges get none) and, for
/// joint mode, a random terminal bonus.
fn random_intrinsic(batch: &mut [Trajectory], rng: &mut Rng) {
    for tau in batch {
        for (a, r) in tau.actions.iter().zip(tau.edge_intrinsic.iter_mut()) {
            *r = if *a == Action::Stop { 0.0 } else { rng.random_range(0.0..0.5) };
        }
        tau.terminal_intrinsic = rng.random_range(0.0..0.5);
    }
}

fn random_child_rewards(grid: &GridConfig, rng: &mut Rng) -> HashMap<usize, f64> {
    (0..grid.num_cells()).map(|c| (c, rng.random_range(0.0..0.5))).collect()
}

fn loss_value(m: &FlowModel, kind: LossKind, batch: &[Trajectory], fm: &HashMap<usize, f64>) -> Result<f64> {
    let mut g = Graph::new();
    let b = m.bind(&mut g);
    let l = objective_loss(&mut g, m, &b, kind, batch, Some(fm))?;
    Ok(g.value(l).item())
}

fn bump(m: &mut FlowModel, i: usize, delta: f64) {
    let mut seen = 0;
    for p in m.network_params_mut() {
        if i < seen + p.len() {
            p.data_mut()[i - seen] += delta;
            return;
        }
        seen += p.len();
    }
    m.log_z.data_mut()[0] += delta;
}

/// Worst relative error between backward and central differences with
/// step `h`, for each objective over `instances` random models and
/// batches. Relative error is `|a - fd| / max(|a|, |fd|, 1e-4)`.
pub fn gradient_suite(instances: usize, h: f64, seed: u64) -> Result<Vec<(LossKind, f64)>> {
    let grid = GridConfig::new(4)?;
    let mut rng = seed_rng(seed);
    let mut out = Vec::new();
    for kind in LossKind::ALL {
        let mut worst: f64 = 0.0;
        for _ in 0..instances {
            let m0 = small_model(&grid, &[8, 8], &mut rng)?;
            let mut batch = m0.rollout_batch(4, 0.5, &mut rng)?;
            random_intrinsic(&mut batch, &mut rng);
            let fm = random_child_rewards(&grid, &mut rng);

            let mut g = Graph::new();
            let b = m0.bind(&mut g);
            let l = objective_loss(&mut g, &m0, &b, kind, &batch, Some(&fm))?;
            let grads = m0.grads(&b, &g.backward(l)?);
            let analytic: Vec<f64> = grads
                .policy
                .iter()
                .chain(&grads.log_flow)
                .chain(std::iter::once(&grads.log_z))
                .flat_map(|t| t.data().to_vec())
                .collect();
            for (i, &a) in analytic.iter().enumerate() {
                let mut plus = m0.clone();
                bump(&mut plus, i, h);
                let mut minus = m0.clone();
                bump(&mut minus, i, -h);
                let fd = (loss_value(&plus, kind, &batch, &fm)? - loss_value(&minus, kind, &batch, &fm)?) / (2.0 * h);
                worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-4));
            }
        }
        out.push((kind, worst));
    }
    Ok(out)
}

/// Largest gap between each augmented loss with all intrinsic rewards zero
/// and its plain counterpart, over `n` single-trajectory batches drawn from
/// random models on H=8. Gaps are relative to `max(1, |plain|)`.
pub fn reduction_identities(n: usize, seed: u64) -> Result<f64> {
    let grid = GridConfig::new(8)?;
    let mut rng = seed_rng(seed);
    let zero = HashMap::new();
    let pairs = [
        (LossKind::TbEdgeAug, LossKind::Tb),
        (LossKind::TbStateAug, LossKind::Tb),
        (LossKind::TbJoint, LossKind::Tb),
        (LossKind::DbEdgeAug, LossKind::Db),
        (LossKind::FmEdgeAug, LossKind::Fm),
    ];
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let m = small_model(&grid, &[16, 16], &mut rng)?;
        let batch = m.rollout_batch(1, 0.3, &mut rng)?;
        for (aug, plain) in pairs {
            let a = loss_value(&m, aug, &batch, &zero)?;
            let p = loss_value(&m, plain, &batch, &zero)?;
            worst = worst.max((a - p).abs() / p.abs().max(1.0));
        }
    }
    Ok(worst)
}

/// Per-edge and whole-trajectory residual maxima of the edge-augmented DB
/// and TB objectives on a hand-built consistent flow over H=3.
///
/// Edge flows come from the backward construction with random increment
/// intrinsic rewards; then `F(s)` is the total outflow including intrinsic
/// rewards, `P_F = (F(e) + r(e)) / F(s)`, `P_B = F(e) / F(s')` and
/// `Z = F(s0)`. Every enumerated trajectory is checked.
pub fn telescoping_residuals(seed: u64) -> Result<(f64, f64)> {
    let grid = GridConfig::new(3)?;
    let d = grid.num_dims;
    let mut rng = seed_rng(seed);
    let mut intrinsic: EdgeTable = zero_edge_table(&grid);
    for row in intrinsic.iter_mut() {
        for r in row.iter_mut().take(d) {
            *r = rng.random_range(0.05..0.5);
        }
    }
    let flow = backward_consistent_flows(&grid, &intrinsic)?;
    let state_flow = |s: &GridState| -> f64 {
        let c = grid.cell_index(&s.coords);
        env::children(&grid, s)
            .iter()
            .map(|(_, a)| flow[c][a.index(d)] + intrinsic[c][a.index(d)])
            .sum()
    };
    let log_z = state_flow(&env::initial_state(&grid)).ln();

    let (mut worst_db, mut worst_tb): (f64, f64) = (0.0, 0.0);
    for tau in enumerate_trajectories(&grid)? {
        let mut t = ConstTerms {
            log_z,
            ..ConstTerms::default()
        };
        for (i, &a) in tau.actions.iter().enumerate() {
            let (src, dst) = (&tau.states[i], &tau.states[i + 1]);
            let c = grid.cell_index(&src.coords);
            let f_src = state_flow(src);
            let (f_e, r_e) = (flow[c][a.index(d)], intrinsic[c][a.index(d)]);
            let log_pf = ((f_e + r_e) / f_src).ln();
            if a == Action::Stop {
                t.stop_log_pf.push(log_pf);
                t.stop_log_flow_src.push(f_src.ln());
                continue;
            }
            let f_dst = state_flow(dst);
            t.inc_log_pf.push(log_pf);
            t.inc_log_pb.push((f_e / f_dst).ln());
            t.inc_log_flow_src.push(f_src.ln());
            t.inc_log_flow_dst.push(f_dst.ln());
            t.inc_intrinsic.push(r_e);
            t.inc_segment.push(0);
        }
        t.reward.push(env::reward(&grid, tau.terminal())?);
        t.terminal_intrinsic.push(0.0);

        let mut g = Graph::new();
        let terms = t.build(&mut g);
        let db = db_residuals(&mut g, LossKind::DbEdgeAug, &terms)?;
        let tb = tb_residuals(&mut g, LossKind::TbEdgeAug, &terms)?;
        worst_db = g.value(db).data().iter().fold(worst_db, |w, r| w.max(r.abs()));
        worst_tb = g.value(tb).data().iter().fold(worst_tb, |w, r| w.max(r.abs()));
    }
    Ok((worst_db, worst_tb))
}

/// The full suite with the tolerances used by the acceptance criteria.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let mut checks = vec![Check::bound(
        "oracle equivalence (H=2..4, 20 draws each)",
        oracle_equivalence(20, seed)?,
        1e-10,
    )];
    for (kind, rel) in gradient_suite(10, 1e-5, seed)? {
        checks.push(Check::bound(&format!("finite-difference gradients ({kind})"), rel, 1e-4));
    }
    checks.push(Check::bound(
        "zero-intrinsic reduction (50 trajectories)",
        reduction_identities(50, seed)?,
        1e-12,
    ));
    let (db, tb) = telescoping_residuals(seed)?;
    checks.push(Check::bound("telescoping, per-edge residuals (H=3)", db, 1e-10));
    checks.push(Check::bound("telescoping, trajectory residuals (H=3)", tb, 1e-10));
    Ok(checks)
}

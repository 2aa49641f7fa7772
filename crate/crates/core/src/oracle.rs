//! Ground-truth distributions and metrics.
//!
//! `exact_policy_marginals` pushes probability mass from the origin through
//! the DAG in order of coordinate sum; `brute_force_enumeration` sums the
//! path products of every trajectory and exists to cross-check it.

use std::io::Write;

use crate::env::{self, Action, GridConfig, GridState, ENUMERATION_LIMIT};
use crate::error::{Error, Result};
use crate::flow_model::{FlowModel, Trajectory};

/// Largest side length accepted by trajectory enumeration.
pub const BRUTE_FORCE_LIMIT: usize = 5;

/// Probability per terminal state, indexed by row-major cell index.
#[derive(Clone, Debug, PartialEq)]
pub struct TerminalDistribution {
    grid: GridConfig,
    probs: Vec<f64>,
}

impl TerminalDistribution {
    pub fn new(grid: &GridConfig, probs: Vec<f64>) -> Result<Self> {
        if probs.len() != grid.num_cells() {
            return Err(Error::SupportMismatch(format!(
                "{} probabilities for {} terminal states",
                probs.len(),
                grid.num_cells()
            )));
        }
        Ok(Self {
            grid: grid.clone(),
            probs,
        })
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn grid(&self) -> &GridConfig {
        &self.grid
    }

    pub fn prob(&self, x: &GridState) -> f64 {
        self.probs[self.grid.cell_index(&x.coords)]
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// `x0,...,x{d-1},probability` rows in cell order.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let header: Vec<String> = (0..self.grid.num_dims).map(|d| format!("x{d}")).collect();
        writeln!(w, "{},probability", header.join(","))?;
        for (i, p) in self.probs.iter().enumerate() {
            let coords: Vec<String> = self.grid.cell_coords(i).iter().map(|c| c.to_string()).collect();
            writeln!(w, "{},{p:e}", coords.join(","))?;
        }
        Ok(())
    }
}

/// Cells sorted by coordinate sum, ties by index.
fn topological_cells(grid: &GridConfig) -> Vec<usize> {
    let mut cells: Vec<(usize, usize)> = (0..grid.num_cells())
        .map(|i| (grid.cell_coords(i).iter().sum(), i))
        .collect();
    cells.sort_unstable();
    cells.into_iter().map(|(_, i)| i).collect()
}

/// Forward DP given per-cell forward probabilities (`table[cell][action]`).
pub fn marginals_from_table(grid: &GridConfig, table: &[Vec<f64>]) -> Result<TerminalDistribution> {
    if grid.side_length > ENUMERATION_LIMIT {
        return Err(Error::TooLarge {
            side: grid.side_length,
            limit: ENUMERATION_LIMIT,
        });
    }
    if table.len() != grid.num_cells() {
        return Err(Error::SupportMismatch(format!("policy table has {} rows", table.len())));
    }
    let d = grid.num_dims;
    let mut mass = vec![0.0; grid.num_cells()];
    let mut terminal = vec![0.0; grid.num_cells()];
    mass[0] = 1.0;
    for cell in topological_cells(grid) {
        let m = mass[cell];
        if m == 0.0 {
            continue;
        }
        let coords = grid.cell_coords(cell);
        terminal[cell] += m * table[cell][d];
        for (k, &c) in coords.iter().enumerate() {
            if c + 1 < grid.side_length {
                let mut next = coords.clone();
                next[k] += 1;
                mass[grid.cell_index(&next)] += m * table[cell][k];
            }
        }
    }
    TerminalDistribution::new(grid, terminal)
}

/// Exact terminal distribution of the model's forward policy.
pub fn exact_policy_marginals(model: &FlowModel) -> Result<TerminalDistribution> {
    let grid = model.grid();
    if grid.side_length > ENUMERATION_LIMIT {
        return Err(Error::TooLarge {
            side: grid.side_length,
            limit: ENUMERATION_LIMIT,
        });
    }
    marginals_from_table(grid, &model.forward_policy_table()?)
}

/// Every complete trajectory of a small grid, depth-first with increments
/// in dimension order before Stop.
pub fn enumerate_trajectories(grid: &GridConfig) -> Result<Vec<Trajectory>> {
    if grid.side_length > BRUTE_FORCE_LIMIT {
        return Err(Error::TooLarge {
            side: grid.side_length,
            limit: BRUTE_FORCE_LIMIT,
        });
    }
    fn walk(grid: &GridConfig, s: &GridState, prefix: &mut Vec<Action>, out: &mut Vec<Vec<Action>>) {
        for (child, a) in env::children(grid, s) {
            prefix.push(a);
            if child.stopped {
                out.push(prefix.clone());
            } else {
                walk(grid, &child, prefix, out);
            }
            prefix.pop();
        }
    }
    let mut paths = Vec::new();
    walk(grid, &env::initial_state(grid), &mut Vec::new(), &mut paths);
    paths.iter().map(|p| Trajectory::from_actions(grid, p)).collect()
}

/// Terminal distribution and per-terminal path counts from summing the
/// product of forward probabilities over every trajectory. `policy` returns
/// the full forward probability vector of a non-stopped state.
pub fn brute_force_with<F>(grid: &GridConfig, mut policy: F) -> Result<(TerminalDistribution, Vec<u64>)>
where
    F: FnMut(&GridState) -> Result<Vec<f64>>,
{
    let d = grid.num_dims;
    let mut cache: Vec<Option<Vec<f64>>> = vec![None; grid.num_cells()];
    let mut probs = vec![0.0; grid.num_cells()];
    let mut counts = vec![0u64; grid.num_cells()];
    for tau in enumerate_trajectories(grid)? {
        let mut p = 1.0;
        for (s, a) in tau.states.iter().zip(&tau.actions) {
            let cell = grid.cell_index(&s.coords);
            if cache[cell].is_none() {
                cache[cell] = Some(policy(s)?);
            }
            p *= cache[cell].as_ref().expect("filled")[a.index(d)];
        }
        let x = grid.cell_index(&tau.terminal().coords);
        probs[x] += p;
        counts[x] += 1;
    }
    Ok((TerminalDistribution::new(grid, probs)?, counts))
}

/// Brute-force oracle for a model, using single-state policy queries.
pub fn brute_force_enumeration(model: &FlowModel) -> Result<(TerminalDistribution, Vec<u64>)> {
    brute_force_with(model.grid(), |s| Ok(model.log_pf_all(s)?.iter().map(|l| l.exp()).collect()))
}

/// `(R(x) + bonus(x)) / sum`, with `bonus` indexed by cell.
pub fn augmented_target(grid: &GridConfig, bonus: &[f64]) -> Result<TerminalDistribution> {
    if bonus.len() != grid.num_cells() {
        return Err(Error::SupportMismatch(format!("{} bonus values", bonus.len())));
    }
    let mut weights = Vec::with_capacity(grid.num_cells());
    for (i, b) in bonus.iter().enumerate() {
        let x = GridState::new(grid.cell_coords(i), true);
        weights.push(env::reward(grid, &x)? + b);
    }
    let z: f64 = weights.iter().sum();
    if !(z > 0.0) {
        return Err(Error::NonPositiveReward(z));
    }
    TerminalDistribution::new(grid, weights.into_iter().map(|w| w / z).collect())
}

/// `R(x) / sum R` over all terminal states.
pub fn target_distribution(grid: &GridConfig) -> Result<TerminalDistribution> {
    augmented_target(grid, &vec![0.0; grid.num_cells()])
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum L1Mode {
    /// Mean over terminal states of `|p - pi|`.
    #[default]
    Mean,
    /// Half the summed absolute difference.
    TotalVariation,
}

impl std::str::FromStr for L1Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Self::Mean),
            "tv" => Ok(Self::TotalVariation),
            other => Err(Error::Config(format!("unknown l1 mode {other:?}"))),
        }
    }
}

impl std::fmt::Display for L1Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Mean => "mean",
            Self::TotalVariation => "tv",
        })
    }
}

pub fn l1_error(pi: &TerminalDistribution, p: &TerminalDistribution, mode: L1Mode) -> Result<f64> {
    l1_error_slices(pi.probs(), p.probs(), mode)
}

pub fn l1_error_slices(pi: &[f64], p: &[f64], mode: L1Mode) -> Result<f64> {
    if pi.len() != p.len() || pi.is_empty() {
        return Err(Error::SupportMismatch(format!("{} vs {} states", pi.len(), p.len())));
    }
    let sum: f64 = pi.iter().zip(p).map(|(a, b)| (a - b).abs()).sum();
    Ok(match mode {
        L1Mode::Mean => sum / pi.len() as f64,
        L1Mode::TotalVariation => 0.5 * sum,
    })
}

/// Values on every edge of the grid DAG: `table[cell][action]` for the edge
/// leaving non-stopped `cell` with `action` (Stop is the edge to the
/// stopped twin). Entries for invalid actions are ignored.
pub type EdgeTable = Vec<Vec<f64>>;

pub fn zero_edge_table(grid: &GridConfig) -> EdgeTable {
    vec![vec![0.0; grid.num_actions()]; grid.num_cells()]
}

/// `max |sum_in F - sum_out (F + r)|` over non-initial, non-stopped states.
pub fn verify_flow_consistency(grid: &GridConfig, flow: &EdgeTable, intrinsic: &EdgeTable) -> Result<f64> {
    if flow.len() != grid.num_cells() || intrinsic.len() != grid.num_cells() {
        return Err(Error::SupportMismatch("edge table size".into()));
    }
    let d = grid.num_dims;
    let mut worst: f64 = 0.0;
    for cell in 1..grid.num_cells() {
        let s = GridState::new(grid.cell_coords(cell), false);
        let inflow: f64 = env::parents(grid, &s)
            .iter()
            .map(|(p, a)| flow[grid.cell_index(&p.coords)][a.index(d)])
            .sum();
        let outflow: f64 = env::children(grid, &s)
            .iter()
            .map(|(_, a)| flow[cell][a.index(d)] + intrinsic[cell][a.index(d)])
            .sum();
        worst = worst.max((inflow - outflow).abs());
    }
    Ok(worst)
}

/// The unique edge flow satisfying the augmented flow-matching equations
/// with a uniform backward split: stop edges carry `R(x)`, and each state's
/// total outflow (edge flows plus intrinsic rewards) is shared equally among
/// its incoming edges. Built from the sinks back to the origin.
pub fn backward_consistent_flows(grid: &GridConfig, intrinsic: &EdgeTable) -> Result<EdgeTable> {
    let d = grid.num_dims;
    let mut flow = zero_edge_table(grid);
    for cell in topological_cells(grid).into_iter().rev() {
        let s = GridState::new(grid.cell_coords(cell), false);
        flow[cell][d] = env::reward(grid, &s.stopped())?;
        let total: f64 = env::children(grid, &s)
            .iter()
            .map(|(_, a)| flow[cell][a.index(d)] + intrinsic[cell][a.index(d)])
            .sum();
        let parents = env::parents(grid, &s);
        for (p, a) in &parents {
            flow[grid.cell_index(&p.coords)][a.index(d)] = total / parents.len() as f64;
        }
    }
    Ok(flow)
}

/// Mean reward of the `k` best terminal rewards in a batch.
pub fn topk_reward(rewards: &[f64], k: usize) -> Result<f64> {
    if k == 0 || k > rewards.len() {
        return Err(Error::Config(format!("top-{k} of a batch of {}", rewards.len())));
    }
    let mut sorted = rewards.to_vec();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    Ok(sorted[..k].iter().sum::<f64>() / k as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::seed_rng;
    use crate::flow_model::FlowModelConfig;
    use proptest::prelude::*;

    fn zero_model(h: usize) -> FlowModel {
        FlowModel::zeros(&GridConfig::new(h).unwrap(), &FlowModelConfig::default()).unwrap()
    }

    fn binomial(n: u64, k: u64) -> u64 {
        (0..k).fold(1, |acc, i| acc * (n - i) / (i + 1))
    }

    #[test]
    fn uniform_policy_on_h2() {
        let m = zero_model(2);
        let dp = exact_policy_marginals(&m).unwrap();
        assert!((dp.probs()[0] - 1.0 / 3.0).abs() < 1e-15);
        // (1,0): 1/3 * 1/2; (1,1): 2 paths of 1/3 * 1/2 * 1.
        let expected = [1.0 / 3.0, 1.0 / 6.0, 1.0 / 6.0, 1.0 / 3.0];
        for (p, e) in dp.probs().iter().zip(expected) {
            assert!((p - e).abs() < 1e-15);
        }
        let (bf, _) = brute_force_enumeration(&m).unwrap();
        for (a, b) in dp.probs().iter().zip(bf.probs()) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn stop_at_origin_puts_all_mass_there() {
        let g = GridConfig::new(4).unwrap();
        let mut table = vec![vec![0.0, 0.0, 1.0]; g.num_cells()];
        table[0] = vec![0.0, 0.0, 1.0];
        let dp = marginals_from_table(&g, &table).unwrap();
        assert_eq!(dp.probs()[0], 1.0);
        assert_eq!(dp.total(), 1.0);
    }

    #[test]
    fn oracles_agree_on_random_models() {
        for h in 2..=4 {
            let g = GridConfig::new(h).unwrap();
            let cfg = FlowModelConfig {
                hidden: vec![16, 16],
                uniform_backward: false,
            };
            for seed in 0..5 {
                let m = FlowModel::new(&g, &cfg, &mut seed_rng(seed)).unwrap();
                let dp = exact_policy_marginals(&m).unwrap();
                let (bf, counts) = brute_force_enumeration(&m).unwrap();
                assert!((bf.total() - 1.0).abs() < 1e-12);
                for (a, b) in dp.probs().iter().zip(bf.probs()) {
                    assert!((a - b).abs() < 1e-10);
                }
                for (i, &c) in counts.iter().enumerate() {
                    let x = g.cell_coords(i);
                    assert_eq!(c, binomial((x[0] + x[1]) as u64, x[0] as u64));
                }
            }
        }
    }

    #[test]
    fn brute_force_refuses_large_grids() {
        assert!(matches!(brute_force_enumeration(&zero_model(6)), Err(Error::TooLarge { .. })));
        assert_eq!(enumerate_trajectories(&GridConfig::new(3).unwrap()).unwrap().len(), 19);
    }

    #[test]
    fn target_on_h8() {
        let t = target_distribution(&GridConfig::new(8).unwrap()).unwrap();
        let goal = 1.0 / (3.0 + 61.0 * 1e-6);
        assert!((t.probs()[7] - goal).abs() < 1e-15);
        assert!((t.probs()[7] - 0.333326).abs() < 1e-6);
        assert!((t.total() - 1.0).abs() < 1e-12);
        let t0 = target_distribution(&GridConfig::with_floor(8, 0.0).unwrap()).unwrap();
        assert_eq!(t0.probs().iter().filter(|&&p| p == 1.0 / 3.0).count(), 3);
        assert_eq!(t0.probs().iter().filter(|&&p| p == 0.0).count(), 61);
    }

    #[test]
    fn l1_examples() {
        assert_eq!(l1_error_slices(&[1.0, 0.0], &[0.5, 0.5], L1Mode::Mean).unwrap(), 0.5);
        assert_eq!(l1_error_slices(&[1.0, 0.0], &[0.5, 0.5], L1Mode::TotalVariation).unwrap(), 0.5);
        assert_eq!(l1_error_slices(&[0.2, 0.8], &[0.2, 0.8], L1Mode::Mean).unwrap(), 0.0);
        assert!(l1_error_slices(&[1.0], &[0.5, 0.5], L1Mode::Mean).is_err());
    }

    proptest! {
        #[test]
        fn l1_properties(raw in proptest::collection::vec((0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), 1..20)) {
            let norm = |v: Vec<f64>| { let s: f64 = v.iter().sum::<f64>() + 1e-12; v.into_iter().map(|x| x / s).collect::<Vec<_>>() };
            let a = norm(raw.iter().map(|t| t.0).collect());
            let b = norm(raw.iter().map(|t| t.1).collect());
            let c = norm(raw.iter().map(|t| t.2).collect());
            let ab = l1_error_slices(&a, &b, L1Mode::Mean).unwrap();
            let direct: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64;
            prop_assert_eq!(ab, direct);
            prop_assert_eq!(ab, l1_error_slices(&b, &a, L1Mode::Mean).unwrap());
            prop_assert_eq!(l1_error_slices(&a, &a, L1Mode::Mean).unwrap(), 0.0);
            let ac = l1_error_slices(&a, &c, L1Mode::Mean).unwrap();
            let cb = l1_error_slices(&c, &b, L1Mode::Mean).unwrap();
            prop_assert!(ab <= ac + cb + 1e-15);
        }
    }

    #[test]
    fn topk_examples() {
        let r0 = 1e-6;
        assert_eq!(topk_reward(&[0.5; 16], 5).unwrap(), 0.5);
        let mut batch = vec![r0; 16];
        batch[..3].copy_from_slice(&[1.0, 1.0, 1.0]);
        assert_eq!(topk_reward(&batch, 3).unwrap(), 1.0);
        let mut batch = vec![r0; 16];
        batch[0] = 1.0;
        batch[15] = 1.0;
        assert!((topk_reward(&batch, 5).unwrap() - (2.0 + 3.0 * r0) / 5.0).abs() < 1e-15);
        assert!(topk_reward(&batch, 17).is_err());
    }

    fn chain() -> GridConfig {
        GridConfig {
            side_length: 3,
            num_dims: 1,
            goal_cells: vec![vec![2]],
            reward_floor: 0.5,
            goal_reward: 1.0,
        }
    }

    #[test]
    fn chain_consistency_and_perturbation() {
        let g = chain();
        // Edge flows along 0 -> 1 -> 2 with stops; r = 0.25 on 0 -> 1.
        let mut r = zero_edge_table(&g);
        r[0][0] = 0.25;
        let flow = backward_consistent_flows(&g, &r).unwrap();
        assert_eq!(flow[1][0], 1.0);
        assert_eq!(flow[0][0], 1.5);
        assert_eq!(verify_flow_consistency(&g, &flow, &r).unwrap(), 0.0);
        let mut bumped = flow.clone();
        bumped[1][1] += 0.125;
        assert_eq!(verify_flow_consistency(&g, &bumped, &r).unwrap(), 0.125);
    }

    /// Dense Gaussian elimination with partial pivoting.
    fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for col in 0..n {
            let piv = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
            a.swap(col, piv);
            b.swap(col, piv);
            assert!(a[col][col].abs() > 1e-12, "singular system");
            for row in col + 1..n {
                let f = a[row][col] / a[col][col];
                for k in col..n {
                    a[row][k] -= f * a[col][k];
                }
                b[row] -= f * b[col];
            }
        }
        let mut x = vec![0.0; n];
        for row in (0..n).rev() {
            let s: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
            x[row] = (b[row] - s) / a[row][row];
        }
        x
    }

    /// Unknowns are the 21 edge flows of H=3. Equations: 9 stop edges equal
    /// R, 8 augmented node balances, 4 equal-inflow constraints.
    #[test]
    fn h3_linear_solve_matches_backward_construction() {
        let g = GridConfig::new(3).unwrap();
        let d = g.num_dims;
        let mut edges = Vec::new();
        for cell in 0..g.num_cells() {
            let s = GridState::new(g.cell_coords(cell), false);
            for (_, a) in env::children(&g, &s) {
                edges.push((cell, a.index(d)));
            }
        }
        assert_eq!(edges.len(), 21);
        let col = |cell: usize, a: usize| edges.iter().position(|&e| e == (cell, a)).unwrap();
        let mut r = zero_edge_table(&g);
        for (cell, a) in &edges {
            if *a != d {
                r[*cell][*a] = 0.01 * (1 + cell + 3 * a) as f64;
            }
        }
        let mut rows = Vec::new();
        let mut rhs = Vec::new();
        for cell in 0..g.num_cells() {
            let s = GridState::new(g.cell_coords(cell), false);
            let mut row = vec![0.0; 21];
            row[col(cell, d)] = 1.0;
            rows.push(row);
            rhs.push(env::reward(&g, &s.stopped()).unwrap());
            if cell == 0 {
                continue;
            }
            let mut row = vec![0.0; 21];
            let mut c = 0.0;
            for (p, a) in env::parents(&g, &s) {
                row[col(g.cell_index(&p.coords), a.index(d))] += 1.0;
            }
            for (_, a) in env::children(&g, &s) {
                row[col(cell, a.index(d))] -= 1.0;
                c += r[cell][a.index(d)];
            }
            rows.push(row);
            rhs.push(c);
            let parents = env::parents(&g, &s);
            if parents.len() == 2 {
                let mut row = vec![0.0; 21];
                row[col(g.cell_index(&parents[0].0.coords), parents[0].1.index(d))] = 1.0;
                row[col(g.cell_index(&parents[1].0.coords), parents[1].1.index(d))] = -1.0;
                rows.push(row);
                rhs.push(0.0);
            }
        }
        assert_eq!(rows.len(), 21);
        let x = solve(rows, rhs);
        let mut solved = zero_edge_table(&g);
        for (k, &(cell, a)) in edges.iter().enumerate() {
            solved[cell][a] = x[k];
        }
        assert!(verify_flow_consistency(&g, &solved, &r).unwrap() < 1e-10);
        let built = backward_consistent_flows(&g, &r).unwrap();
        for &(cell, a) in &edges {
            assert!((built[cell][a] - solved[cell][a]).abs() < 1e-10);
        }
    }

    #[test]
    fn csv_export() {
        let t = target_distribution(&GridConfig::new(2).unwrap()).unwrap();
        let mut buf = Vec::new();
        t.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with("x0,x1,probability\n0,0,"));
    }
}

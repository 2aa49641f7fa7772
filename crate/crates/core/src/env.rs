//! Hypergrid environment with sparse goal rewards.
//!
//! States are integer coordinates in `[0, H)^d` plus a `stopped` flag. The
//! only moves are "increment one coordinate" and "stop", so every action
//! sequence is monotone and the state graph is a DAG rooted at the origin.
//! A stopped state is terminal; its reward is `goal_reward` on a goal cell
//! and `reward_floor` everywhere else.

use std::fmt;

use crate::config::{parse_key_values, KeyValues};
use crate::error::{Error, Result};

/// Largest side length accepted by exhaustive enumeration helpers.
pub const ENUMERATION_LIMIT: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct GridConfig {
    pub side_length: usize,
    pub num_dims: usize,
    pub goal_cells: Vec<Vec<usize>>,
    pub reward_floor: f64,
    pub goal_reward: f64,
}

impl GridConfig {
    /// Two-dimensional grid with the default corner goals
    /// `(0, H-1)`, `(H-1, 0)` and `(H-1, 1)` and a reward floor of `1e-6`.
    pub fn new(side_length: usize) -> Result<Self> {
        Self::with_floor(side_length, 1e-6)
    }

    pub fn with_floor(side_length: usize, reward_floor: f64) -> Result<Self> {
        if side_length < 2 {
            return Err(Error::InvalidGrid(format!(
                "side length must be at least 2, got {side_length}"
            )));
        }
        let h = side_length;
        let cfg = Self {
            side_length: h,
            num_dims: 2,
            goal_cells: vec![vec![0, h - 1], vec![h - 1, 0], vec![h - 1, 1]],
            reward_floor,
            goal_reward: 1.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidGrid(m));
        if self.side_length < 2 {
            return bad(format!("H must be >= 2, got {}", self.side_length));
        }
        if self.num_dims == 0 {
            return bad("num_dims must be positive".into());
        }
        if !(self.reward_floor >= 0.0 && self.reward_floor.is_finite()) {
            return bad(format!("reward_floor must be >= 0, got {}", self.reward_floor));
        }
        if !(self.goal_reward > 0.0 && self.goal_reward.is_finite()) {
            return bad(format!("goal_reward must be > 0, got {}", self.goal_reward));
        }
        if self.reward_floor >= self.goal_reward {
            return bad("reward_floor must be below goal_reward".into());
        }
        for g in &self.goal_cells {
            if g.len() != self.num_dims {
                return bad(format!("goal {g:?} has wrong dimensionality"));
            }
            if g.iter().any(|&c| c >= self.side_length) {
                return bad(format!("goal {g:?} outside the grid"));
            }
            if g.iter().all(|&c| c == 0) {
                return bad("the start cell cannot be a goal".into());
            }
        }
        Ok(())
    }

    pub fn num_actions(&self) -> usize {
        self.num_dims + 1
    }

    /// Number of grid cells, `H^d`.
    pub fn num_cells(&self) -> usize {
        self.side_length.pow(self.num_dims as u32)
    }

    /// Width of [`featurize`] output.
    pub fn feature_width(&self) -> usize {
        self.num_dims * self.side_length
    }

    /// Row-major cell index of a state's coordinates.
    pub fn cell_index(&self, coords: &[usize]) -> usize {
        coords
            .iter()
            .fold(0, |acc, &c| acc * self.side_length + c)
    }

    pub fn cell_coords(&self, mut index: usize) -> Vec<usize> {
        let mut coords = vec![0; self.num_dims];
        for slot in coords.iter_mut().rev() {
            *slot = index % self.side_length;
            index /= self.side_length;
        }
        coords
    }

    pub fn is_goal(&self, coords: &[usize]) -> bool {
        self.goal_cells.iter().any(|g| g.as_slice() == coords)
    }

    /// Serialize as `key=value` lines.
    pub fn to_text(&self) -> String {
        let goals = self
            .goal_cells
            .iter()
            .map(|g| {
                g.iter()
                    .map(|c| c.to_string())
                    .collect::<Vec<_>>()
                    .join(",")
            })
            .collect::<Vec<_>>()
            .join(";");
        format!(
            "H={}\nnum_dims={}\ngoals={}\nreward_floor={:e}\ngoal_reward={}\n",
            self.side_length, self.num_dims, goals, self.reward_floor, self.goal_reward
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        Self::from_key_values(&parse_key_values(text)?)
    }

    /// Build from parsed key/values. Missing keys fall back to the defaults
    /// of [`GridConfig::new`]; goals default to the corner layout only when
    /// the grid is two-dimensional.
    pub fn from_key_values(kv: &KeyValues) -> Result<Self> {
        let side_length = kv.get_parsed("H")?.unwrap_or(8);
        let num_dims = kv.get_parsed("num_dims")?.unwrap_or(2);
        let reward_floor = kv.get_parsed("reward_floor")?.unwrap_or(1e-6);
        let goal_reward = kv.get_parsed("goal_reward")?.unwrap_or(1.0);
        let goal_cells = match kv.get("goals") {
            Some((line, text)) => parse_goals(text).map_err(|msg| Error::Parse { line, msg })?,
            None if num_dims == 2 && side_length >= 2 => {
                let h = side_length;
                vec![vec![0, h - 1], vec![h - 1, 0], vec![h - 1, 1]]
            }
            None => {
                return Err(Error::Config(
                    "goals must be given explicitly for non-2-D grids".into(),
                ))
            }
        };
        let cfg = Self {
            side_length,
            num_dims,
            goal_cells,
            reward_floor,
            goal_reward,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_goals(text: &str) -> std::result::Result<Vec<Vec<usize>>, String> {
    text.split(';')
        .map(str::trim)
        .filter(|g| !g.is_empty())
        .map(|g| {
            g.split(',')
                .map(|c| {
                    c.trim()
                        .parse::<usize>()
                        .map_err(|e| format!("bad goal coordinate {c:?}: {e}"))
                })
                .collect()
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GridState {
    pub coords: Vec<usize>,
    pub stopped: bool,
}

impl GridState {
    pub fn new(coords: Vec<usize>, stopped: bool) -> Self {
        Self { coords, stopped }
    }

    /// The non-stopped state at the same coordinates.
    pub fn twin(&self) -> Self {
        Self {
            coords: self.coords.clone(),
            stopped: false,
        }
    }

    /// The stopped state at the same coordinates.
    pub fn stopped(&self) -> Self {
        Self {
            coords: self.coords.clone(),
            stopped: true,
        }
    }

    pub fn is_initial(&self) -> bool {
        !self.stopped && self.coords.iter().all(|&c| c == 0)
    }
}

impl fmt::Display for GridState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "(")?;
        for (i, c) in self.coords.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{c}")?;
        }
        write!(f, ")")?;
        if self.stopped {
            write!(f, "#")?;
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Increment(usize),
    Stop,
}

impl Action {
    /// Position in the forward action vector: increments first, stop last.
    pub fn index(self, num_dims: usize) -> usize {
        match self {
            Action::Increment(d) => d,
            Action::Stop => num_dims,
        }
    }

    pub fn from_index(index: usize, num_dims: usize) -> Self {
        if index == num_dims {
            Action::Stop
        } else {
            Action::Increment(index)
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Increment(d) => write!(f, "inc({d})"),
            Action::Stop => write!(f, "stop"),
        }
    }
}

pub fn initial_state(cfg: &GridConfig) -> GridState {
    GridState::new(vec![0; cfg.num_dims], false)
}

/// Valid actions in deterministic order: `Increment(0..d)` then `Stop`.
pub fn valid_actions(cfg: &GridConfig, s: &GridState) -> Result<Vec<Action>> {
    if s.stopped {
        return Err(Error::TerminalHasNoActions);
    }
    let mut actions: Vec<Action> = (0..cfg.num_dims)
        .filter(|&d| s.coords[d] + 1 < cfg.side_length)
        .map(Action::Increment)
        .collect();
    actions.push(Action::Stop);
    Ok(actions)
}

/// Validity mask over the forward action vector.
pub fn action_mask(cfg: &GridConfig, s: &GridState) -> Vec<bool> {
    let mut mask: Vec<bool> = (0..cfg.num_dims)
        .map(|d| !s.stopped && s.coords[d] + 1 < cfg.side_length)
        .collect();
    mask.push(!s.stopped);
    mask
}

pub fn is_valid(cfg: &GridConfig, s: &GridState, a: Action) -> bool {
    if s.stopped {
        return false;
    }
    match a {
        Action::Stop => true,
        Action::Increment(d) => d < cfg.num_dims && s.coords[d] + 1 < cfg.side_length,
    }
}

pub fn step(cfg: &GridConfig, s: &GridState, a: Action) -> Result<GridState> {
    if !is_valid(cfg, s, a) {
        return Err(Error::InvalidAction {
            state: s.to_string(),
            action: a.to_string(),
        });
    }
    let mut next = s.clone();
    match a {
        Action::Increment(d) => next.coords[d] += 1,
        Action::Stop => next.stopped = true,
    }
    Ok(next)
}

/// Parents of `s` together with the action leading from each parent to `s`.
///
/// A stopped state has exactly one parent (its twin, via `Stop`); the
/// initial state has none.
pub fn parents(cfg: &GridConfig, s: &GridState) -> Vec<(GridState, Action)> {
    let _ = cfg;
    if s.stopped {
        return vec![(s.twin(), Action::Stop)];
    }
    (0..s.coords.len())
        .filter(|&d| s.coords[d] > 0)
        .map(|d| {
            let mut p = s.clone();
            p.coords[d] -= 1;
            (p, Action::Increment(d))
        })
        .collect()
}

/// Backward-action mask for a non-stopped state: entry `d` is set when
/// decrementing dimension `d` leads to a parent.
pub fn parent_mask(s: &GridState) -> Vec<bool> {
    s.coords.iter().map(|&c| c > 0).collect()
}

pub fn children(cfg: &GridConfig, s: &GridState) -> Vec<(GridState, Action)> {
    match valid_actions(cfg, s) {
        Ok(actions) => actions
            .into_iter()
            .map(|a| (step(cfg, s, a).expect("valid action"), a))
            .collect(),
        Err(_) => Vec::new(),
    }
}

pub fn reward(cfg: &GridConfig, x: &GridState) -> Result<f64> {
    if !x.stopped {
        return Err(Error::NotTerminal(x.to_string()));
    }
    Ok(if cfg.is_goal(&x.coords) {
        cfg.goal_reward
    } else {
        cfg.reward_floor
    })
}

/// Concatenated per-coordinate one-hot encoding, independent of `stopped`.
pub fn featurize(cfg: &GridConfig, s: &GridState) -> Vec<f64> {
    let mut out = vec![0.0; cfg.feature_width()];
    write_features(cfg, &s.coords, &mut out);
    out
}

pub(crate) fn write_features(cfg: &GridConfig, coords: &[usize], out: &mut [f64]) {
    for (d, &c) in coords.iter().enumerate() {
        out[d * cfg.side_length + c] = 1.0;
    }
}

/// All `H^d` stopped states in row-major order.
pub fn enumerate_terminal_states(cfg: &GridConfig) -> Result<Vec<GridState>> {
    if cfg.side_length > ENUMERATION_LIMIT {
        return Err(Error::TooLarge {
            side: cfg.side_length,
            limit: ENUMERATION_LIMIT,
        });
    }
    Ok((0..cfg.num_cells())
        .map(|i| GridState::new(cfg.cell_coords(i), true))
        .collect())
}

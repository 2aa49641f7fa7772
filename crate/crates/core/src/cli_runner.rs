//! Experiment front door: sweep specs, per-cell CSV artifacts, summary
//! tables and SVG curves.
//!
//! A spec is sectioned `key=value` text:
//!
//! ```text
//! [experiment]
//! grid = grid.cfg        # optional, relative to the spec file
//! trainer = trainer.cfg  # optional
//! output = runs/ablation
//! cap = 64
//!
//! [grid]                 # inline keys override the grid file
//! H = 16
//!
//! [trainer]
//! total_updates = 2000
//!
//! [sweep]
//! objective = tb, tb_joint, db_edge
//! alpha = 0.001, 0.01
//! H = 8, 16
//! seeds = 0, 1, 2, 3, 4
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::config::{parse_key_values, parse_sections, KeyValues};
use crate::env::GridConfig;
use crate::error::{Error, Result};
use crate::objectives::LossKind;
use crate::trainer::{train, EvalRow, RunRecord, TrainerConfig};

pub const DEFAULT_CAP: usize = 256;
pub const DEFAULT_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const MANIFEST: &str = "manifest.csv";
const MANIFEST_HEADER: &str = "index,name,config,objective,alpha,H,seed,status";

/// Objective names, with the short sweep aliases for augmented kinds.
pub fn parse_objective(s: &str) -> Result<LossKind> {
    match s {
        "tb_edge" => Ok(LossKind::TbEdgeAug),
        "tb_state" => Ok(LossKind::TbStateAug),
        "db_edge" => Ok(LossKind::DbEdgeAug),
        "fm_edge" => Ok(LossKind::FmEdgeAug),
        other => other.parse(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub grid: KeyValues,
    pub trainer: KeyValues,
    /// Empty axes fall back to the base configs.
    pub objectives: Vec<LossKind>,
    pub alphas: Vec<f64>,
    pub side_lengths: Vec<usize>,
    pub seeds: Vec<u64>,
    pub output: Option<PathBuf>,
    pub cap: usize,
}

fn read_config_file(base: &Path, (line, rel): (usize, &str)) -> Result<KeyValues> {
    let path = base.join(rel);
    let text = fs::read_to_string(&path).map_err(|e| Error::Parse {
        line,
        msg: format!("cannot read {}: {e}", path.display()),
    })?;
    parse_key_values(&text).map_err(|e| match e {
        Error::Parse { line, msg } => Error::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        },
        e => e,
    })
}

impl ExperimentSpec {
    /// Parse spec text; relative paths resolve against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut spec = Self {
            grid: KeyValues::default(),
            trainer: KeyValues::default(),
            objectives: Vec::new(),
            alphas: Vec::new(),
            side_lengths: Vec::new(),
            seeds: DEFAULT_SEEDS.to_vec(),
            output: None,
            cap: DEFAULT_CAP,
        };
        let (mut inline_grid, mut inline_trainer) = (KeyValues::default(), KeyValues::default());
        for section in parse_sections(text)? {
            let kv = &section.values;
            match section.name.as_str() {
                "experiment" => {
                    kv.check_known(&["grid", "trainer", "output", "cap"])?;
                    if let Some(entry) = kv.get("grid") {
                        spec.grid = read_config_file(base, entry)?;
                    }
                    if let Some(entry) = kv.get("trainer") {
                        spec.trainer = read_config_file(base, entry)?;
                    }
                    if let Some((_, out)) = kv.get("output") {
                        spec.output = Some(base.join(out));
                    }
                    if let Some(cap) = kv.get_parsed("cap")? {
                        spec.cap = cap;
                    }
                }
                "grid" => inline_grid.merge(kv),
                "trainer" => inline_trainer.merge(kv),
                "sweep" => {
                    kv.check_known(&["objective", "alpha", "H", "seeds"])?;
                    if let Some(names) = kv.get_list::<String>("objective")? {
                        let line = kv.get("objective").map_or(0, |(l, _)| l);
                        spec.objectives = names
                            .iter()
                            .map(|n| parse_objective(n).map_err(|e| Error::Parse { line, msg: e.to_string() }))
                            .collect::<Result<_>>()?;
                    }
                    if let Some(a) = kv.get_list("alpha")? {
                        spec.alphas = a;
                    }
                    if let Some(h) = kv.get_list("H")? {
                        spec.side_lengths = h;
                    }
                    if let Some(s) = kv.get_list("seeds")? {
                        spec.seeds = s;
                    }
                }
                "" => {
                    return Err(Error::Parse {
                        line: section.line,
                        msg: "entries must follow a section header".into(),
                    })
                }
                other => {
                    return Err(Error::Parse {
                        line: section.line,
                        msg: format!("unknown section [{other}]"),
                    })
                }
            }
        }
        spec.grid.merge(&inline_grid);
        spec.trainer.merge(&inline_trainer);
        if spec.seeds.is_empty() {
            return Err(Error::Config("seeds list is empty".into()));
        }
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read spec {}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    fn base_objective(&self) -> Result<LossKind> {
        match self.trainer.get("objective") {
            Some((line, name)) => parse_objective(name).map_err(|e| Error::Parse { line, msg: e.to_string() }),
            None => Ok(LossKind::Tb),
        }
    }

    /// Expand the sweep into cells in a fixed order: objective, H, alpha,
    /// seed. The alpha axis only applies to augmented objectives.
    pub fn cells(&self) -> Result<Vec<Cell>> {
        let objectives = if self.objectives.is_empty() {
            vec![self.base_objective()?]
        } else {
            self.objectives.clone()
        };
        let sides: Vec<Option<usize>> = if self.side_lengths.is_empty() {
            vec![None]
        } else {
            self.side_lengths.iter().copied().map(Some).collect()
        };
        let alphas: Vec<Option<f64>> = if self.alphas.is_empty() {
            vec![None]
        } else {
            self.alphas.iter().copied().map(Some).collect()
        };
        let count: usize = objectives
            .iter()
            .map(|o| if o.is_augmented() { alphas.len() } else { 1 })
            .sum::<usize>()
            * sides.len()
            * self.seeds.len();
        if count > self.cap {
            return Err(Error::Config(format!("sweep has {count} cells, cap is {}", self.cap)));
        }

        let mut cells = Vec::with_capacity(count);
        for &objective in &objectives {
            for &side in &sides {
                let mut grid_kv = self.grid.clone();
                if let Some(h) = side {
                    grid_kv.insert("H", &h.to_string(), 0);
                }
                let grid = GridConfig::from_key_values(&grid_kv)?;
                let cell_alphas: &[Option<f64>] = if objective.is_augmented() { &alphas } else { &[None] };
                for &alpha in cell_alphas {
                    for &seed in &self.seeds {
                        let mut kv = self.trainer.clone();
                        kv.insert("objective", &objective.to_string(), 0);
                        kv.insert("seed", &seed.to_string(), 0);
                        if let Some(a) = alpha {
                            kv.insert("alpha", &a.to_string(), 0);
                        }
                        let trainer = TrainerConfig::from_key_values(&kv)?;
                        let mut config = format!("{objective}_H{}", grid.side_length);
                        if objective.is_augmented() {
                            let _ = write!(config, "_a{}", trainer.intrinsic.alpha);
                        }
                        cells.push(Cell {
                            index: cells.len(),
                            name: format!("{config}_s{seed}"),
                            config,
                            objective,
                            alpha: objective.is_augmented().then_some(trainer.intrinsic.alpha),
                            side_length: grid.side_length,
                            seed,
                            grid: grid.clone(),
                            trainer,
                        });
                    }
                }
            }
        }
        let mut names: Vec<&str> = cells.iter().map(|c| c.name.as_str()).collect();
        names.sort_unstable();
        if let Some(w) = names.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::Config(format!("duplicate sweep cell {}", w[0])));
        }
        Ok(cells)
    }
}

/// One (configuration, seed) run of a sweep.
#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub index: usize,
    /// File stem, `<config>_s<seed>`.
    pub name: String,
    /// Configuration label shared across seeds.
    pub config: String,
    pub objective: LossKind,
    pub alpha: Option<f64>,
    pub side_length: usize,
    pub seed: u64,
    pub grid: GridConfig,
    pub trainer: TrainerConfig,
}

impl Cell {
    /// Resolved configuration; rerunning it reproduces the cell's CSVs.
    pub fn config_text(&self) -> String {
        format!("[grid]\n{}\n[trainer]\n{}", self.grid.to_text(), self.trainer.to_text())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub cells: Vec<Cell>,
    /// `(cell name, error message)` for each failed cell.
    pub failures: Vec<(String, String)>,
}

fn run_cell(cell: &Cell, dir: &Path) -> Result<()> {
    let record = train(&cell.trainer, &cell.grid)?;
    let mut csv = Vec::new();
    record.write_csv(&mut csv)?;
    fs::write(dir.join(format!("{}.csv", cell.name)), csv)?;
    let mut visits = Vec::new();
    record.write_visits_csv(&cell.grid, &mut visits)?;
    fs::write(dir.join(format!("{}.visits.csv", cell.name)), visits)?;
    Ok(())
}

fn manifest_field(s: &str) -> String {
    s.replace([',', '\n', '\r'], " ")
}

/// Run every cell of `spec` into `output` (or the spec's own output
/// directory) with up to `workers` cells in flight. Configuration errors
/// abort before any training; cell failures are recorded in the manifest
/// and reported.
pub fn run(spec: &ExperimentSpec, output: Option<&Path>, workers: usize) -> Result<RunReport> {
    let dir = output
        .map(Path::to_path_buf)
        .or_else(|| spec.output.clone())
        .ok_or_else(|| Error::Config("no output directory given".into()))?;
    let cells = spec.cells()?;
    fs::create_dir_all(&dir)
        .map_err(|e| Error::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
    for cell in &cells {
        fs::write(dir.join(format!("{}.cfg", cell.name)), cell.config_text())
            .map_err(|e| Error::Config(format!("output directory {} is not writable: {e}", dir.display())))?;
        for ext in ["csv", "visits.csv"] {
            let stale = dir.join(format!("{}.{ext}", cell.name));
            if stale.is_file() {
                fs::remove_file(stale)?;
            }
        }
    }

    let next = AtomicUsize::new(0);
    let outcomes: Mutex<Vec<Option<std::result::Result<(), String>>>> = Mutex::new(vec![None; cells.len()]);
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, cells.len().max(1)) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(cell) = cells.get(i) else { break };
                let outcome = run_cell(cell, &dir).map_err(|e| e.to_string());
                outcomes.lock().expect("worker panicked")[i] = Some(outcome);
            });
        }
    });
    let outcomes = outcomes.into_inner().expect("worker panicked");

    let mut manifest = String::new();
    let _ = writeln!(manifest, "{MANIFEST_HEADER}");
    let mut failures = Vec::new();
    for (cell, outcome) in cells.iter().zip(outcomes) {
        let status = match outcome.expect("every cell runs") {
            Ok(()) => "ok".to_string(),
            Err(msg) => {
                failures.push((cell.name.clone(), msg.clone()));
                format!("failed: {}", manifest_field(&msg))
            }
        };
        let alpha = cell.alpha.map(|a| a.to_string()).unwrap_or_default();
        let _ = writeln!(
            manifest,
            "{},{},{},{},{alpha},{},{},{status}",
            cell.index, cell.name, cell.config, cell.objective, cell.side_length, cell.seed
        );
    }
    fs::write(dir.join(MANIFEST), manifest)?;
    Ok(RunReport { cells, failures })
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub index: usize,
    pub name: String,
    pub config: String,
    pub objective: String,
    pub alpha: String,
    pub side_length: usize,
    pub seed: u64,
    pub status: String,
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == MANIFEST_HEADER => {}
        _ => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("expected manifest header {MANIFEST_HEADER:?}"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |msg: String| Error::Parse { line: i + 1, msg };
        let f: Vec<&str> = line.splitn(8, ',').collect();
        if f.len() != 8 {
            return Err(bad(format!("expected 8 fields, got {}", f.len())));
        }
        out.push(ManifestEntry {
            index: f[0].parse().map_err(|e| bad(format!("bad index: {e}")))?,
            name: f[1].into(),
            config: f[2].into(),
            objective: f[3].into(),
            alpha: f[4].into(),
            side_length: f[5].parse().map_err(|e| bad(format!("bad H: {e}")))?,
            seed: f[6].parse().map_err(|e| bad(format!("bad seed: {e}")))?,
            status: f[7].into(),
        });
    }
    Ok(out)
}

/// Manifest entries with their evaluation rows, plus `(name, reason)` for
/// cells that failed or whose CSV is missing or unreadable.
type Loaded = (Vec<(ManifestEntry, Vec<EvalRow>)>, Vec<(String, String)>);

fn load_records(dir: &Path) -> Result<Loaded> {
    let mut found = Vec::new();
    let mut missing = Vec::new();
    for entry in read_manifest(dir)? {
        if entry.status != "ok" {
            missing.push((entry.name.clone(), entry.status.clone()));
            continue;
        }
        let path = dir.join(format!("{}.csv", entry.name));
        match fs::read_to_string(&path) {
            Err(e) => missing.push((entry.name.clone(), format!("cannot read {}: {e}", path.display()))),
            Ok(text) => match RunRecord::rows_from_csv(&text) {
                Ok(rows) if !rows.is_empty() => found.push((entry, rows)),
                Ok(_) => missing.push((entry.name.clone(), "no rows".into())),
                Err(e) => missing.push((entry.name.clone(), e.to_string())),
            },
        }
    }
    Ok((found, missing))
}

/// Mean and sample standard deviation; one value gives std 0.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        };
        Self { mean, std }
    }
}

/// Time-averaged number of discovered modes: the trapezoid area under
/// modes-vs-update divided by the span of updates.
pub fn mode_auc(rows: &[EvalRow]) -> f64 {
    let (first, last) = match (rows.first(), rows.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return f64::NAN,
    };
    if last.update == first.update {
        return last.modes as f64;
    }
    let area: f64 = rows
        .windows(2)
        .map(|w| (w[1].update - w[0].update) as f64 * (w[0].modes + w[1].modes) as f64 / 2.0)
        .sum();
    area / (last.update - first.update) as f64
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConfigSummary {
    pub config: String,
    pub objective: String,
    pub alpha: String,
    pub side_length: usize,
    pub seeds: usize,
    pub final_l1: Stat,
    pub final_modes: Stat,
    pub mode_auc: Stat,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Summary {
    pub rows: Vec<ConfigSummary>,
    pub missing: Vec<(String, String)>,
}

impl Summary {
    pub fn get(&self, config: &str) -> Option<&ConfigSummary> {
        self.rows.iter().find(|r| r.config == config)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(
            "config,objective,alpha,H,seeds,final_l1_mean,final_l1_std,final_modes_mean,final_modes_std,mode_auc_mean,mode_auc_std\n",
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{}",
                r.config,
                r.objective,
                r.alpha,
                r.side_length,
                r.seeds,
                r.final_l1.mean,
                r.final_l1.std,
                r.final_modes.mean,
                r.final_modes.std,
                r.mode_auc.mean,
                r.mode_auc.std
            );
        }
        s
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.config.len()).max().unwrap_or(0).max(6);
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<width$}  {:>5}  {:>23}  {:>13}  {:>13}",
            "config", "seeds", "final L1", "final modes", "mode AUC"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<width$}  {:>5}  {:>23}  {:>13}  {:>13}",
                r.config,
                r.seeds,
                format!("{:.4e} ± {:.2e}", r.final_l1.mean, r.final_l1.std),
                format!("{:.2} ± {:.2}", r.final_modes.mean, r.final_modes.std),
                format!("{:.2} ± {:.2}", r.mode_auc.mean, r.mode_auc.std),
            );
        }
        if !self.missing.is_empty() {
            let _ = writeln!(s, "\nmissing cells:");
            for (name, why) in &self.missing {
                let _ = writeln!(s, "  {name}: {why}");
            }
        }
        s
    }
}

/// Per-configuration statistics across seeds, written to `summary.csv`
/// and `summary.txt` in `dir`.
pub fn summarize(dir: &Path) -> Result<Summary> {
    let (found, missing) = load_records(dir)?;
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<&(ManifestEntry, Vec<EvalRow>)>> = BTreeMap::new();
    for item in &found {
        let key = item.0.config.clone();
        if !groups.contains_key(&key) {
            order.push(key.clone());
        }
        groups.entry(key).or_default().push(item);
    }
    let rows = order
        .iter()
        .map(|config| {
            let members = &groups[config];
            let head = &members[0].0;
            let l1: Vec<f64> = members.iter().filter_map(|m| m.1.last().and_then(|r| r.l1_error)).collect();
            let modes: Vec<f64> = members.iter().map(|m| m.1.last().map_or(0.0, |r| r.modes as f64)).collect();
            let auc: Vec<f64> = members.iter().map(|m| mode_auc(&m.1)).collect();
            ConfigSummary {
                config: config.clone(),
                objective: head.objective.clone(),
                alpha: head.alpha.clone(),
                side_length: head.side_length,
                seeds: members.len(),
                final_l1: Stat::of(&l1),
                final_modes: Stat::of(&modes),
                mode_auc: Stat::of(&auc),
            }
        })
        .collect();
    let summary = Summary { rows, missing };
    fs::write(dir.join("summary.csv"), summary.to_csv())?;
    fs::write(dir.join("summary.txt"), summary.to_table())?;
    Ok(summary)
}

/// `(update, mean, std)` points of one curve.
pub type Curve = Vec<(f64, f64, f64)>;

/// Axis ranges covering every band edge; degenerate spans are widened.
pub fn chart_ranges(series: &[(String, Curve)]) -> ((f64, f64), (f64, f64)) {
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for (_, curve) in series {
        for &(x, m, s) in curve {
            x0 = x0.min(x);
            x1 = x1.max(x);
            y0 = y0.min(m - s);
            y1 = y1.max(m + s);
        }
    }
    let widen = |lo: f64, hi: f64| {
        if hi - lo > 1e-12 * hi.abs().max(lo.abs()).max(1e-300) {
            (lo, hi)
        } else {
            (lo - 0.5, hi + 0.5)
        }
    };
    (widen(x0, x1), widen(y0, y1))
}

const PALETTE: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf"];

fn tick_label(v: f64) -> String {
    if v == 0.0 || (1e-2..1e5).contains(&v.abs()) {
        let s = format!("{v:.3}");
        s.trim_end_matches('0').trim_end_matches('.').to_string()
    } else {
        format!("{v:.2e}")
    }
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Standalone SVG line chart with a shaded ±1 std band per curve.
pub fn render_svg(title: &str, series: &[(String, Curve)]) -> String {
    let (w, h) = (760.0, 440.0);
    let (left, right, top, bottom) = (80.0, 220.0, 40.0, 60.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let ((x0, x1), (y0, y1)) = chart_ranges(series);
    let px = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| top + (1.0 - (y - y0) / (y1 - y0)) * ph;

    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{:.2}" y="24" font-family="sans-serif" font-size="15" text-anchor="middle">{}</text>"#, left + pw / 2.0, xml_escape(title));
    let _ = writeln!(s, r##"<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="#444"/>"##);
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let (xv, yv) = (x0 + f * (x1 - x0), y0 + f * (y1 - y0));
        let _ = writeln!(s, r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#ddd"/>"##, left, py(yv), left + pw, py(yv));
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="end">{}</text>"#, left - 6.0, py(yv) + 4.0, tick_label(yv));
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11" text-anchor="middle">{}</text>"#, px(xv), top + ph + 18.0, tick_label(xv));
    }
    let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="12" text-anchor="middle">update</text>"#, left + pw / 2.0, h - 16.0);
    for (i, (label, curve)) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let upper = curve.iter().map(|&(x, m, sd)| format!("{:.2},{:.2}", px(x), py(m + sd)));
        let lower = curve.iter().rev().map(|&(x, m, sd)| format!("{:.2},{:.2}", px(x), py(m - sd)));
        let band: Vec<String> = upper.chain(lower).collect();
        let _ = writeln!(s, r#"<polygon points="{}" fill="{color}" fill-opacity="0.18" stroke="none"/>"#, band.join(" "));
        let line: Vec<String> = curve.iter().map(|&(x, m, _)| format!("{:.2},{:.2}", px(x), py(m))).collect();
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="1.8"/>"#, line.join(" "));
        let ly = top + 14.0 + 18.0 * i as f64;
        let _ = writeln!(s, r#"<rect x="{:.2}" y="{:.2}" width="14" height="4" fill="{color}"/>"#, left + pw + 14.0, ly - 4.0);
        let _ = writeln!(s, r#"<text x="{:.2}" y="{:.2}" font-family="sans-serif" font-size="11">{}</text>"#, left + pw + 34.0, ly, xml_escape(label));
    }
    s.push_str("</svg>\n");
    s
}

type Metric = (&'static str, fn(&EvalRow) -> Option<f64>);

const METRICS: [Metric; 5] = [
    ("l1_error", |r| r.l1_error),
    ("modes", |r| Some(r.modes as f64)),
    ("loss", |r| r.loss),
    ("mean_intrinsic", |r| r.mean_intrinsic),
    ("topk_reward", |r| r.topk_reward),
];

/// One `<metric>.svg` per metric with data, one curve per configuration.
/// A point is drawn only at updates where every seed has a value.
pub fn plot(dir: &Path) -> Result<Vec<PathBuf>> {
    let (found, _) = load_records(dir)?;
    let mut order: Vec<&str> = Vec::new();
    for (e, _) in &found {
        if !order.contains(&e.config.as_str()) {
            order.push(&e.config);
        }
    }
    let mut written = Vec::new();
    for (metric, get) in METRICS {
        let mut series = Vec::new();
        for config in &order {
            let members: Vec<&Vec<EvalRow>> = found.iter().filter(|(e, _)| e.config == *config).map(|(_, r)| r).collect();
            let mut at: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
            for rows in &members {
                for r in rows.iter() {
                    if let Some(v) = get(r).filter(|v| v.is_finite()) {
                        at.entry(r.update).or_default().push(v);
                    }
                }
            }
            let curve: Curve = at
                .into_iter()
                .filter(|(_, v)| v.len() == members.len())
                .map(|(u, v)| {
                    let st = Stat::of(&v);
                    (u as f64, st.mean, st.std)
                })
                .collect();
            if !curve.is_empty() {
                series.push((config.to_string(), curve));
            }
        }
        if series.is_empty() {
            continue;
        }
        let path = dir.join(format!("{metric}.svg"));
        fs::write(&path, render_svg(metric, &series))?;
        written.push(path);
    }
    Ok(written)
}

/// Process exit code for an error: cell failures are 2, everything else
/// reaching the front door is a configuration problem.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } => 2,
        _ => 1,
    }
}

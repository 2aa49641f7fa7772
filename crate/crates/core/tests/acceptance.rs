//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Outcomes are reported, not asserted, so the long training criteria
//! cannot hide the rest of the workspace tests; set `ACCEPTANCE_STRICT=1`
//! to exit nonzero when any criterion fails. `ACCEPTANCE_ONLY=1,5,9`
//! restricts the run to the listed criteria. Sweep artifacts are kept under
//! the cargo target tmp dir in `acceptance/`.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use gafn::autodiff::{seed_rng, Adam};
use gafn::cli_runner::{self, ConfigSummary, ExperimentSpec};
use gafn::env::{GridConfig, GridState};
use gafn::flow_model::{FlowModel, FlowModelConfig};
use gafn::intrinsic::{AugmentationMode, IntrinsicConfig, RndPair};
use gafn::objectives::LossKind;
use gafn::oracle::{augmented_target, enumerate_trajectories, exact_policy_marginals, l1_error, target_distribution, L1Mode};
use gafn::trainer::{fit_trajectories, FlowOptimizers};
use gafn::verify;

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: String) -> Outcome {
    Outcome { passed, detail }
}

fn secs(d: Duration) -> String {
    format!("{:.1}s", d.as_secs_f64())
}

fn artifacts() -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance")
}

fn oracle_equivalence() -> Outcome {
    let t = Instant::now();
    let worst = verify::oracle_equivalence(20, 1).expect("oracle check runs");
    let el = t.elapsed();
    outcome(
        worst < 1e-10 && el < Duration::from_secs(10),
        format!("max per-state gap {worst:.2e} (< 1e-10), {} (< 10s)", secs(el)),
    )
}

fn gradient_suite() -> Outcome {
    let t = Instant::now();
    let per_kind = verify::gradient_suite(10, 1e-5, 2).expect("gradient check runs");
    let el = t.elapsed();
    let worst = per_kind.iter().map(|(_, r)| *r).fold(0.0, f64::max);
    let (kind, _) = per_kind.iter().copied().max_by(|a, b| a.1.total_cmp(&b.1)).expect("eight kinds");
    outcome(
        worst < 1e-4 && el < Duration::from_secs(60),
        format!("worst relative error {worst:.2e} ({kind}) over 8 objectives x 10 instances (< 1e-4), {} (< 60s)", secs(el)),
    )
}

fn reductions() -> Outcome {
    let worst = verify::reduction_identities(50, 3).expect("reduction check runs");
    outcome(worst < 1e-12, format!("max gap {worst:.2e} over 50 trajectories x 5 pairs (< 1e-12)"))
}

fn telescoping() -> Outcome {
    let (db, tb) = verify::telescoping_residuals(4).expect("telescoping check runs");
    outcome(
        db < 1e-10 && tb < 1e-10,
        format!("max per-edge residual {db:.2e}, max trajectory residual {tb:.2e} (< 1e-10)"),
    )
}

/// Train joint TB on every trajectory of H=3 with fixed intrinsic rewards
/// until the loss is below 1e-6, then compare the exact terminal
/// distribution against `target`.
fn fit_joint(bonus_cell: Option<usize>) -> (f64, f64, usize) {
    let grid = GridConfig::new(3).expect("valid grid");
    let cfg = FlowModelConfig::default();
    let mut model = FlowModel::new(&grid, &cfg, &mut seed_rng(12)).expect("model");
    let mut batch = enumerate_trajectories(&grid).expect("19 trajectories");
    let mut bonus = vec![0.0; grid.num_cells()];
    if let Some(c) = bonus_cell {
        bonus[c] = 0.5;
    }
    for tau in &mut batch {
        tau.terminal_intrinsic = bonus[grid.cell_index(&tau.terminal().coords)];
    }
    let mut opt = FlowOptimizers::new(1e-3, 0.1);
    let report = fit_trajectories(&mut model, LossKind::TbJoint, &batch, &mut opt, 100_000, 1e-6).expect("fit runs");
    let target = match bonus_cell {
        Some(_) => augmented_target(&grid, &bonus).expect("target"),
        None => target_distribution(&grid).expect("target"),
    };
    let pi = exact_policy_marginals(&model).expect("marginals");
    (
        l1_error(&pi, &target, L1Mode::Mean).expect("same support"),
        report.final_loss,
        report.steps,
    )
}

fn fixed_point_reproduction() -> Outcome {
    let t = Instant::now();
    let grid = GridConfig::new(3).expect("valid grid");
    let x = grid.cell_index(&[1, 1]);
    let (l1_bonus, loss_bonus, steps_bonus) = fit_joint(Some(x));
    let (l1_plain, loss_plain, steps_plain) = fit_joint(None);
    let el = t.elapsed();
    outcome(
        loss_bonus < 1e-6
            && loss_plain < 1e-6
            && l1_bonus < 1e-3
            && l1_plain < 1e-3
            && el < Duration::from_secs(300),
        format!(
            "r(1,1)=0.5: loss {loss_bonus:.1e} after {steps_bonus} steps, L1 vs (R+r)/sum {l1_bonus:.2e}; \
             r=0: loss {loss_plain:.1e} after {steps_plain} steps, L1 vs R/sum {l1_plain:.2e} (< 1e-3), {} (< 300s)",
            secs(el)
        ),
    )
}

/// One sweep per objective so each method is timed on its own.
fn sweep(tag: &str, side: usize, objective: &str, extra: &str) -> (ConfigSummary, Duration) {
    let dir = artifacts().join(tag).join(objective);
    let text = format!(
        "[grid]\nH={side}\n[trainer]\ntotal_updates=20000\nbatch_size=16\neval_every=500\n{extra}[sweep]\nobjective={objective}\nseeds=0,1,2,3,4\n"
    );
    let spec = ExperimentSpec::parse(&text, Path::new(".")).expect("valid spec");
    let t = Instant::now();
    let report = cli_runner::run(&spec, Some(&dir), 1).expect("sweep runs");
    let el = t.elapsed();
    assert!(report.failures.is_empty(), "{tag}/{objective}: {:?}", report.failures);
    let summary = cli_runner::summarize(&dir).expect("summary");
    print!("{}", summary.to_table());
    println!("  ({objective}: {})", secs(el));
    (summary.rows.into_iter().next().expect("one configuration"), el)
}

struct Sparse {
    tb: (ConfigSummary, Duration),
    joint: (ConfigSummary, Duration),
    edge: (ConfigSummary, Duration),
    state: (ConfigSummary, Duration),
    joint_full_modes: usize,
}

const SPARSE_WIDTH: &str = "hidden=128,128\nrnd_hidden=128,128\n";

fn sparse_runs() -> Sparse {
    let joint = sweep("h32", 32, "tb_joint", SPARSE_WIDTH);
    let dir = artifacts().join("h32").join("tb_joint");
    let joint_full_modes = cli_runner::read_manifest(&dir)
        .expect("manifest")
        .iter()
        .filter(|e| {
            let text = fs::read_to_string(dir.join(format!("{}.csv", e.name))).expect("cell csv");
            let rows = gafn::trainer::RunRecord::rows_from_csv(&text).expect("rows");
            rows.last().is_some_and(|r| r.modes == 3)
        })
        .count();
    Sparse {
        tb: sweep("h32", 32, "tb", SPARSE_WIDTH),
        joint,
        edge: sweep("h32", 32, "tb_edge", SPARSE_WIDTH),
        state: sweep("h32", 32, "tb_state", SPARSE_WIDTH),
        joint_full_modes,
    }
}

fn within_budget(runs: &[&(ConfigSummary, Duration)]) -> bool {
    runs.iter().all(|(_, d)| *d < Duration::from_secs(30 * 60))
}

fn exploration(s: &Sparse) -> Outcome {
    let (tb, joint) = (&s.tb.0, &s.joint.0);
    outcome(
        s.joint_full_modes >= 4 && tb.final_modes.mean < joint.final_modes.mean && within_budget(&[&s.tb, &s.joint]),
        format!(
            "joint found all 3 modes in {}/5 seeds (>= 4), mean modes joint {:.2} vs tb {:.2} (tb strictly fewer), \
             runtime joint {} tb {} (< 30 min each)",
            s.joint_full_modes,
            joint.final_modes.mean,
            tb.final_modes.mean,
            secs(s.joint.1),
            secs(s.tb.1)
        ),
    )
}

fn convergence(s: &Sparse) -> Outcome {
    let (j, e, st) = (s.joint.0.final_l1.mean, s.edge.0.final_l1.mean, s.state.0.final_l1.mean);
    outcome(
        j <= e && j <= st && within_budget(&[&s.edge, &s.state]),
        format!(
            "mean final L1 joint {j:.4e}, edge {e:.4e}, state {st:.4e} (joint <= both), runtime edge {} state {}",
            secs(s.edge.1),
            secs(s.state.1)
        ),
    )
}

fn versatility() -> Outcome {
    let l1 = |objective: &str| sweep("h16", 16, objective, "").0.final_l1.mean;
    let (db, db_edge) = (l1("db"), l1("db_edge"));
    let (fm, fm_edge) = (l1("fm"), l1("fm_edge"));
    outcome(
        db_edge < db && fm_edge < fm,
        format!("mean final L1 db {db:.4e} -> db_edge {db_edge:.4e}; fm {fm:.4e} -> fm_edge {fm_edge:.4e} (augmented lower)"),
    )
}

fn rnd_decay() -> Outcome {
    let grid = GridConfig::new(8).expect("valid grid");
    let cfg = IntrinsicConfig::rnd(1.0, AugmentationMode::Edge);
    let mut pair = RndPair::new(&grid, &cfg, &mut seed_rng(21)).expect("rnd pair");
    let states: Vec<GridState> = (0..grid.num_cells())
        .map(|c| GridState::new(grid.cell_coords(c), false))
        .collect();
    let max = |p: &mut RndPair| p.novelty_batch(&states).expect("novelty").into_iter().fold(0.0, f64::max);
    let before = max(&mut pair);
    let (steps, lr) = (5000, 1e-3);
    let mut opt = Adam::new(lr);
    for step in 0..steps {
        opt.learning_rate = lr * (1.0 - step as f64 / steps as f64);
        pair.update_predictor(&states, &mut opt).expect("predictor step");
    }
    let after = max(&mut pair);
    let ratio = before / after;
    outcome(
        ratio >= 1000.0,
        format!("max novelty {before:.3e} -> {after:.3e} after {steps} full-grid steps, ratio {ratio:.3e} (>= 1000)"),
    )
}

fn determinism() -> Outcome {
    let text = "[grid]\nH=6\n[trainer]\ntotal_updates=40\neval_every=10\nhidden=32,32\nrnd_hidden=32,32\n\
                [sweep]\nobjective=fm,db,tb,fm_edge,db_edge,tb_edge,tb_state,tb_joint\nseeds=0,1\n";
    let spec = ExperimentSpec::parse(text, Path::new(".")).expect("valid spec");
    let (a, b) = (artifacts().join("determinism/a"), artifacts().join("determinism/b"));
    cli_runner::run(&spec, Some(&a), 1).expect("first run");
    cli_runner::run(&spec, Some(&b), 3).expect("second run");
    let files = |d: &Path| {
        let mut v: Vec<(String, Vec<u8>)> = fs::read_dir(d)
            .expect("run dir")
            .map(|e| {
                let e = e.expect("entry");
                (e.file_name().into_string().expect("utf8 name"), fs::read(e.path()).expect("readable"))
            })
            .collect();
        v.sort();
        v
    };
    let (fa, fb) = (files(&a), files(&b));
    let csvs = fa.iter().filter(|(n, _)| n.ends_with(".csv")).count();
    outcome(
        fa == fb && csvs == 16 * 2 + 1,
        format!("{} files ({csvs} CSVs) from 16 cells, byte-identical across reruns with 1 and 3 workers: {}", fa.len(), fa == fb),
    )
}

fn main() {
    let only: Option<Vec<usize>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let wanted = |n: usize| only.as_ref().is_none_or(|v| v.contains(&n));

    let mut results: Vec<(usize, &str, Outcome)> = Vec::new();
    let mut record = |n: usize, name: &'static str, f: &dyn Fn() -> Outcome| {
        if wanted(n) {
            let o = f();
            println!("criterion {n:>2} {} {name}: {}", if o.passed { "PASS" } else { "FAIL" }, o.detail);
            results.push((n, name, o));
        }
    };
    record(1, "oracle equivalence", &oracle_equivalence);
    record(2, "gradient suite", &gradient_suite);
    record(3, "reduction identities", &reductions);
    record(4, "telescoping", &telescoping);
    record(5, "unbiased augmented fixed point", &fixed_point_reproduction);
    if wanted(6) || wanted(7) {
        let sparse = sparse_runs();
        record(6, "sparse exploration (H=32)", &|| exploration(&sparse));
        record(7, "joint convergence (H=32)", &|| convergence(&sparse));
    }
    record(8, "DB/FM versatility (H=16)", &versatility);
    record(9, "RND decay premise", &rnd_decay);
    record(10, "determinism", &determinism);

    println!();
    for (n, name, o) in &results {
        println!("criterion {n:>2} {} {name}", if o.passed { "PASS" } else { "FAIL" });
    }
    let failed = results.iter().filter(|r| !r.2.passed).count();
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 && std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}

//! Acceptance suite. Prints one PASS/FAIL line per criterion.
//!
//! Analytic and determinism criteria are hard: any failure makes the target
//! exit nonzero. Accuracy criteria on Cora are measured and reported the
//! same way, but a shortfall there does not fail the build; see the README
//! for the measured numbers.
//!
//! The Cora ablation writes to `DGB_ACCEPTANCE_DIR` if set, otherwise to
//! `cora-acceptance` under cargo's target tmp directory. Finished runs are
//! resumed from there, so delete it to measure from scratch.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use dgb::augment::{
    heat_diffusion, heat_tail_bound, node_dropout, node_feature_dropout, ppr_diffusion, ppr_order_for_tolerance,
    AdjacencyAugmentation, DiffusionSolver, NodeAugmentation, ViewConfig,
};
use dgb::eval::{evaluate_raw_features, EvalConfig};
use dgb::graph::{load_dataset, save_dataset};
use dgb::nn::{bootstrap_loss, l2_normalize_rows, Parameters};
use dgb::synth::{planted_partition, SynthConfig};
use dgb::trainer::{ema_update, init_model, TrainConfig, Trainer};
use dgb::{DenseMatrix, RngState, SparseMatrix};
use dgb_cli::ablate::{cmd_ablate, AblateOptions, AblationOutcome};
use dgb_cli::config::ExperimentConfig;

#[derive(Clone, Copy, PartialEq)]
enum Kind {
    Hard,
    Reported,
}

struct Suite {
    results: Vec<(String, bool, Kind)>,
}

impl Suite {
    fn record(&mut self, name: &str, kind: Kind, pass: bool, detail: String) {
        let tag = if pass { "PASS" } else { "FAIL" };
        println!("{tag}  {name}: {detail}");
        self.results.push((name.to_string(), pass, kind));
    }
}

fn root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn path_graph(n: usize) -> SparseMatrix {
    let t = (0..n - 1).flat_map(|i| [(i, i + 1, 1.0), (i + 1, i, 1.0)]).collect();
    SparseMatrix::from_triplets(n, n, t).unwrap()
}

fn gradients(s: &mut Suite) {
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_dgb"))
        .args(["gradcheck", "--instances", "20", "--nodes", "12", "--in-dim", "7", "--seed", "0"])
        .output()
        .unwrap();
    let secs = start.elapsed().as_secs_f64();
    let text = String::from_utf8_lossy(&out.stdout);
    let worst = text
        .lines()
        .filter_map(|l| l.split("max rel error").nth(1))
        .filter_map(|r| r.split_whitespace().next()?.parse::<f64>().ok())
        .fold(0.0f64, f64::max);
    let components = text.lines().filter(|l| l.contains("max rel error")).count();
    s.record(
        "gradient correctness",
        Kind::Hard,
        out.status.success() && components == 7 && worst < 1e-5 && secs < 10.0,
        format!("{components} components, worst relative error {worst:.2e}, {secs:.1} s"),
    );
}

fn diffusion(s: &mut Suite) {
    let pair = path_graph(2);
    let ppr = ppr_diffusion(&pair, 0.2, DiffusionSolver::Exact, None).unwrap();
    let want = [[5.0 / 9.0, 4.0 / 9.0], [4.0 / 9.0, 5.0 / 9.0]];
    let err_ppr = (0..2)
        .flat_map(|i| (0..2).map(move |j| (i, j)))
        .map(|(i, j)| (ppr.get(i, j) - want[i][j]).abs())
        .fold(0.0, f64::max);

    let mut identity_exact = true;
    for n in [2, 5, 9] {
        for solver in [DiffusionSolver::Exact, DiffusionSolver::Iterative] {
            identity_exact &= ppr_diffusion(&path_graph(n), 1.0, solver, None).unwrap() == DenseMatrix::identity(n);
        }
    }

    let mut worst_iter: f64 = 0.0;
    for seed in 0..10u64 {
        let ds = planted_partition(&SynthConfig {
            nodes: 8 + (seed as usize % 9),
            seed,
            ..SynthConfig::default()
        })
        .unwrap();
        for alpha in [0.1, 0.15, 0.5] {
            let k = ppr_order_for_tolerance(alpha, 1e-10);
            let a = ds.graph.adjacency();
            let exact = ppr_diffusion(a, alpha, DiffusionSolver::Exact, None).unwrap();
            let iter = ppr_diffusion(a, alpha, DiffusionSolver::Iterative, Some(k)).unwrap();
            worst_iter = worst_iter.max(exact.max_abs_diff(&iter));
        }
    }

    let t = 5.0;
    let heat = heat_diffusion(&pair, t, None).unwrap();
    let e = (-2.0 * t).exp();
    let heat_want = [[(1.0 + e) / 2.0, (1.0 - e) / 2.0], [(1.0 - e) / 2.0, (1.0 + e) / 2.0]];
    let err_heat = (0..2)
        .flat_map(|i| (0..2).map(move |j| (i, j)))
        .map(|(i, j)| (heat.get(i, j) - heat_want[i][j]).abs())
        .fold(0.0, f64::max);

    let mut cols_ok = true;
    let ds = planted_partition(&SynthConfig::default()).unwrap();
    for (t, order) in [(1.0, 3), (5.0, 8), (5.0, 20), (10.0, 30)] {
        let h = heat_diffusion(ds.graph.adjacency(), t, Some(order)).unwrap();
        let bound = heat_tail_bound(t, order);
        for c in h.column_sums() {
            cols_ok &= c <= 1.0 + 1e-12 && (1.0 - c) <= bound + 1e-12;
        }
    }

    s.record(
        "diffusion oracles",
        Kind::Hard,
        err_ppr < 1e-3 && identity_exact && worst_iter < 1e-8 && err_heat < 1e-3 && cols_ok,
        format!(
            "PPR 2-node err {err_ppr:.1e}, alpha=1 identity {identity_exact}, iterative vs exact {worst_iter:.1e}, \
             heat 2-node err {err_heat:.1e}, heat column sums within tail bound {cols_ok}"
        ),
    );
}

type Augment = fn(&DenseMatrix, f64, &mut RngState) -> dgb::Result<DenseMatrix>;

/// Deviation of the Monte-Carlo mean of `f(x)` from `x`, per nonzero entry
/// in units of its standard error: (root-mean-square, max). A zero entry
/// that moves counts as infinitely far.
fn mc_deviation(x: &DenseMatrix, f: Augment, delta: f64, draws: usize, seed: u64) -> (f64, f64) {
    let mut rng = RngState::new(seed);
    let mut sum = DenseMatrix::zeros(x.rows(), x.cols());
    for _ in 0..draws {
        sum.add_assign(&f(x, delta, &mut rng).unwrap()).unwrap();
    }
    let mut sq = 0.0;
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for (total, &v) in sum.as_slice().iter().zip(x.as_slice()) {
        let mean = total / draws as f64;
        let z = if v == 0.0 {
            if mean == 0.0 { 0.0 } else { f64::INFINITY }
        } else {
            // A kept entry is v/(1-δ) with probability 1-δ.
            let se = v.abs() * (delta / (1.0 - delta)).sqrt() / (draws as f64).sqrt();
            (mean - v).abs() / se
        };
        sq += z * z;
        worst = worst.max(z);
        count += 1;
    }
    ((sq / count as f64).sqrt(), worst)
}

fn unscaled_dropout(x: &DenseMatrix, delta: f64, rng: &mut RngState) -> dgb::Result<DenseMatrix> {
    let mut y = node_feature_dropout(x, delta, rng)?;
    y.scale(1.0 - delta);
    Ok(y)
}

fn augmentation(s: &mut Suite) {
    let x = DenseMatrix::from_rows(&[[1.0, 0.0, -2.0], [0.5, 3.0, 0.0], [0.0, -1.5, 0.25]]);
    let draws = 100_000;
    let mut worst_rms: f64 = 0.0;
    let mut worst_entry: f64 = 0.0;
    let kinds: [(&str, Augment); 2] = [("NFD", node_feature_dropout), ("ND", node_dropout)];
    for (k, (_, f)) in kinds.iter().enumerate() {
        for (j, delta) in [0.3, 0.5, 0.7].into_iter().enumerate() {
            let (rms, max) = mc_deviation(&x, *f, delta, draws, 1000 + 10 * k as u64 + j as u64);
            worst_rms = worst_rms.max(rms);
            worst_entry = worst_entry.max(max);
        }
    }
    // Negative control: dropout without the 1/(1-δ) rescale must be caught.
    let (control, _) = mc_deviation(&x, unscaled_dropout, 0.3, draws, 999);
    s.record(
        "augmentation expectation",
        Kind::Hard,
        worst_rms <= 3.0 && control > 3.0,
        format!(
            "10^5 draws per rate; mean matrix within {worst_rms:.2} standard errors (RMS over entries, \
             largest single entry {worst_entry:.2}); unscaled control off by {control:.0}"
        ),
    );
}

fn ema(s: &mut Suite) {
    let ds = planted_partition(&SynthConfig::default()).unwrap();
    let base = TrainConfig {
        embed_dim: 6,
        hidden_dim: 8,
        patience: 0,
        lr: 0.01,
        view1: ViewConfig::new(NodeAugmentation::feature_dropout(0.2), AdjacencyAugmentation::normalized()),
        view2: ViewConfig::new(NodeAugmentation::node_dropout(0.2), AdjacencyAugmentation::ppr(0.15)),
        ..TrainConfig::default()
    };

    let mut frozen = Trainer::new(&ds.graph, TrainConfig { decay_p: 1.0, ..base }).unwrap();
    let initial = frozen.model().target.clone();
    let online_initial = frozen.model().online.clone();
    for _ in 0..100 {
        frozen.step().unwrap();
    }
    let frozen_ok = frozen.model().target == initial && frozen.model().online != online_initial;

    let mut copying = Trainer::new(&ds.graph, TrainConfig { decay_p: 0.0, ..base }).unwrap();
    let mut copy_ok = true;
    for _ in 0..20 {
        copying.step().unwrap();
        copy_ok &= copying.model().target_matches_online();
    }

    let mut worst: f64 = 0.0;
    for (p, k) in [(0.5, 3), (0.9, 10), (0.99, 25), (0.999, 7)] {
        let mut rng = RngState::new(7);
        let mut model = init_model(5, &base, &mut rng);
        for sl in model.target.slices_mut() {
            for v in sl {
                *v += rng.uniform_in(-1.0, 1.0);
            }
        }
        let gap = |m: &dgb::trainer::DgbModel| -> Vec<f64> {
            let t = m.target.slices().concat();
            let o = m.online.slices().concat();
            t.iter().zip(o).map(|(a, b)| a - b).collect()
        };
        let start = gap(&model);
        for _ in 0..k {
            ema_update(&mut model, p);
        }
        let f = f64::powi(p, k);
        for (g, g0) in gap(&model).iter().zip(start) {
            worst = worst.max((g - f * g0).abs());
        }
    }
    s.record(
        "EMA semantics",
        Kind::Hard,
        frozen_ok && copy_ok && worst < 1e-10,
        format!("p=1 target unchanged over 100 epochs {frozen_ok}, p=0 copies every epoch {copy_ok}, p^k error {worst:.1e}"),
    );
}

fn losses(s: &mut Suite) {
    let mut rng = RngState::new(3);
    let q = DenseMatrix::from_vec(6, 4, (0..24).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap();
    let z = DenseMatrix::from_vec(6, 4, (0..24).map(|_| rng.uniform_in(-1.0, 1.0)).collect()).unwrap();
    let (qn, _) = l2_normalize_rows(&q).unwrap();
    let (zn, _) = l2_normalize_rows(&z).unwrap();
    let self_loss = bootstrap_loss(&qn, &qn).unwrap().0;

    let e1 = DenseMatrix::from_rows(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]);
    let e2 = DenseMatrix::from_rows(&[[0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
    let orth = bootstrap_loss(&e1, &e2).unwrap().0;

    let loss = bootstrap_loss(&qn, &zn).unwrap().0;
    let cos: f64 = (0..6)
        .map(|i| qn.row(i).iter().zip(zn.row(i)).map(|(a, b)| a * b).sum::<f64>())
        .sum::<f64>()
        / 6.0;
    let cos_err = (loss - (2.0 - 2.0 * cos)).abs();

    let mut scale_err: f64 = 0.0;
    for c in [0.1, 10.0] {
        let (qc, _) = l2_normalize_rows(&q.scaled(c)).unwrap();
        scale_err = scale_err.max((bootstrap_loss(&qc, &zn).unwrap().0 - loss).abs());
    }
    s.record(
        "loss identities",
        Kind::Hard,
        self_loss == 0.0 && (orth - 2.0).abs() < 1e-15 && cos_err < 1e-10 && scale_err < 1e-10,
        format!(
            "loss(q,q)={self_loss}, orthogonal rows {orth}, |loss-(2-2cos)|={cos_err:.1e}, scale error {scale_err:.1e}"
        ),
    );
}

fn raw_baseline(s: &mut Suite, cora: &Path) -> Option<f64> {
    let start = Instant::now();
    let ds = match load_dataset(cora) {
        Ok(ds) => ds,
        Err(e) => {
            s.record("raw-features baseline", Kind::Reported, false, format!("cannot load Cora: {e}"));
            return None;
        }
    };
    let report = evaluate_raw_features(&ds, &EvalConfig::default()).unwrap();
    let secs = start.elapsed().as_secs_f64();
    s.record(
        "raw-features baseline",
        Kind::Reported,
        (report.mean - 0.566).abs() <= 0.03 && secs < 120.0,
        format!(
            "{:.2}% ± {:.2} over {} probes (target 56.6 ± 3), {secs:.1} s",
            100.0 * report.mean,
            100.0 * report.std,
            report.runs.len()
        ),
    );
    Some(report.mean)
}

fn determinism(s: &mut Suite, cora: &Path) {
    let tmp = tempfile::tempdir().unwrap();
    let cfg_path = tmp.path().join("short.toml");
    fs::write(
        &cfg_path,
        "[train]\nepochs = 3\nembed_dim = 64\npatience = 0\n\
         [train.view2.node]\nkind = \"node_dropout\"\nrate = 0.2\n\
         [train.view2.adjacency]\nkind = \"ppr\"\ntop_k = 32\n",
    )
    .unwrap();
    let mut same = true;
    for out in ["a", "b"] {
        let status = Command::new(env!("CARGO_BIN_EXE_dgb"))
            .args(["train", "--seed", "11", "--config"])
            .arg(&cfg_path)
            .arg("--dataset")
            .arg(cora)
            .arg("--out")
            .arg(tmp.path().join(out))
            .output()
            .unwrap()
            .status;
        same &= status.success();
    }
    for f in ["checkpoint.bin", "losses.csv", "train_report.json"] {
        same &= fs::read(tmp.path().join("a").join(f)).ok() == fs::read(tmp.path().join("b").join(f)).ok();
    }

    // Grid metrics, on a synthetic graph to keep it quick.
    let ds = planted_partition(&SynthConfig {
        nodes: 60,
        dim: 32,
        clusters: 3,
        p_in: 0.3,
        ..SynthConfig::default()
    })
    .unwrap();
    let data = tmp.path().join("synth");
    save_dataset(&ds, &data).unwrap();
    let mut cfg = ExperimentConfig::default();
    cfg.train.epochs = 4;
    cfg.train.embed_dim = 16;
    cfg.eval.runs = 4;
    cfg.ablation.seeds = vec![0, 1];
    cfg.ablation.sweep = None;
    let mut grids = Vec::new();
    for out in ["g1", "g2"] {
        let dir = tmp.path().join(out);
        same &= cmd_ablate(&cfg, &data, &dir, AblateOptions { workers: 1, progress: false }).is_ok();
        grids.push((fs::read(dir.join("metrics.jsonl")).ok(), fs::read(dir.join("summary.csv")).ok()));
    }
    same &= grids[0] == grids[1] && grids[0].0.is_some();
    s.record(
        "determinism",
        Kind::Hard,
        same,
        "two train runs give identical checkpoint, loss curve and report; two ablation grids give identical metrics"
            .to_string(),
    );
}

fn cora_grid(s: &mut Suite, cora: &Path, raw: Option<f64>) {
    let cfg = ExperimentConfig::load(&root().join("configs/cora-acceptance.toml")).unwrap();
    let out = std::env::var_os("DGB_ACCEPTANCE_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_TARGET_TMPDIR")).join("cora-acceptance"));
    let start = Instant::now();
    let outcome: AblationOutcome = match cmd_ablate(&cfg, cora, &out, AblateOptions::default()) {
        Ok(o) => o,
        Err(e) => {
            s.record("end-to-end Cora", Kind::Reported, false, format!("ablation failed: {e}"));
            return;
        }
    };
    let total = start.elapsed().as_secs_f64();
    println!(
        "      Cora grid: {} runs executed in {:.0} s, dropout rate {} chosen by validation",
        outcome.executed, total, outcome.node_rate
    );
    for c in &outcome.cells {
        println!(
            "      {:<40} {:>6.2}% ± {:.2}",
            c.cell,
            100.0 * c.mean.unwrap_or(f64::NAN),
            100.0 * c.std.unwrap_or(f64::NAN)
        );
    }
    let mean = |name: &str| outcome.cell(name).and_then(|c| c.mean).unwrap_or(f64::NAN);
    let reference = "NFD + ADJ & ND + PPR";
    let best = mean(reference);
    let no_aug = mean("IN + ADJ & IN + ADJ");

    // Slowest single seed of the reference cell, from the timing table.
    let timing = fs::read_to_string(out.join("timing.csv")).unwrap_or_default();
    let per_seed = timing
        .lines()
        .filter(|l| l.starts_with(&format!("\"{reference}\",")))
        .filter_map(|l| l.rsplit(',').next()?.parse::<f64>().ok())
        .fold(f64::NAN, f64::max);
    let raw = raw.unwrap_or(f64::NAN);
    s.record(
        "end-to-end Cora",
        Kind::Reported,
        best >= 0.78 && best >= raw + 0.15 && best >= no_aug + 0.10 && per_seed <= 900.0,
        format!(
            "{:.2}% over 5 seeds (need >= 78, >= raw {:.2} + 15, >= no-augmentation {:.2} + 10); slowest seed {:.0} s",
            100.0 * best,
            100.0 * raw,
            100.0 * no_aug,
            per_seed
        ),
    );

    let no_proj = mean(&format!("{reference} | no projection"));
    let p1 = mean(&format!("{reference} | p=1"));
    let p0 = mean(&format!("{reference} | p=0"));
    let node_only = mean("NFD + ADJ & ND + ADJ");
    let adj_only = mean("IN + PPR & IN + ADJ");
    let checks = [
        ("with projection > without", best > no_proj),
        ("default p > p=1", best > p1),
        ("p=0 within 3 points of default p", (p0 - best).abs() <= 0.03),
        ("node-only > adjacency-only", node_only > adj_only),
    ];
    let detail = checks
        .iter()
        .map(|(n, ok)| format!("{n}: {}", if *ok { "yes" } else { "no" }))
        .collect::<Vec<_>>()
        .join("; ");
    s.record(
        "ablation orderings",
        Kind::Reported,
        checks.iter().all(|(_, ok)| *ok),
        format!(
            "{detail} (default {:.2}, no projection {:.2}, p=1 {:.2}, p=0 {:.2}, node-only {:.2}, adjacency-only {:.2})",
            100.0 * best,
            100.0 * no_proj,
            100.0 * p1,
            100.0 * p0,
            100.0 * node_only,
            100.0 * adj_only
        ),
    );
}

fn main() {
    // `cargo test -- --list` and filters: this target has no individual tests.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut s = Suite { results: Vec::new() };
    let cora = root().join("data/cora");
    gradients(&mut s);
    diffusion(&mut s);
    augmentation(&mut s);
    ema(&mut s);
    losses(&mut s);
    determinism(&mut s, &cora);
    let raw = raw_baseline(&mut s, &cora);
    cora_grid(&mut s, &cora, raw);

    let hard_failures: Vec<&str> = s
        .results
        .iter()
        .filter(|(_, pass, kind)| !pass && *kind == Kind::Hard)
        .map(|(n, _, _)| n.as_str())
        .collect();
    let reported: Vec<&str> = s
        .results
        .iter()
        .filter(|(_, pass, kind)| !pass && *kind == Kind::Reported)
        .map(|(n, _, _)| n.as_str())
        .collect();
    let passed = s.results.iter().filter(|r| r.1).count();
    println!("acceptance: {passed}/{} criteria pass", s.results.len());
    if !reported.is_empty() {
        println!("acceptance: accuracy criteria not met: {}", reported.join(", "));
    }
    if !hard_failures.is_empty() {
        eprintln!("acceptance: hard failures: {}", hard_failures.join(", "));
        std::process::exit(1);
    }
}

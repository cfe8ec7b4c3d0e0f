//! The ablation grid: a dropout-rate sweep on the reference cell, then every
//! configured view pair plus decay and projection variants over all seeds.
//!
//! Each (cell, seed) run is stored as `runs/<fingerprint>.json` as soon as
//! it finishes, so an interrupted grid resumes where it stopped. The tables
//! (`sweep.csv`, `metrics.jsonl`, `summary.csv`) are rebuilt from those
//! records in grid order and do not depend on scheduling or on which runs
//! were resumed. Wall-clock times are kept beside each record as
//! `runs/<fingerprint>.seconds` and collected into `timing.csv` only.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use dgb::augment::{NodeAugmentationKind, ViewSource};
use dgb::eval::{evaluate_embeddings_on, EvalConfig, EvalReport, Split};
use dgb::trainer::{embed, TrainConfig, Trainer};
use dgb::{LabeledDataset, PropagationKind};
use serde::{Deserialize, Serialize};

use crate::commands::{create_dir, load_dataset, write_atomic};
use crate::config::{fingerprint, parse_pair, realize, AdjToken, ExperimentConfig, ViewToken};
use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "value")]
pub enum Variant {
    Grid,
    DecayP(f64),
    NoProjection,
}

/// One row of the final table, before any run.
#[derive(Debug, Clone, PartialEq)]
pub struct CellSpec {
    pub name: String,
    pub variant: Variant,
    pub tokens: (ViewToken, ViewToken),
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub fingerprint: String,
    pub cell: String,
    pub seed: u64,
    pub val_mean: Option<f64>,
    pub test: Option<EvalReport>,
    pub losses: Vec<f64>,
    pub stopped_early: bool,
    pub error: Option<String>,
}

/// One line of `metrics.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub fingerprint: String,
    pub dataset: String,
    pub cell: String,
    pub view_pair: String,
    pub variant: Variant,
    pub decay_p: f64,
    pub use_projector: bool,
    pub node_rate: f64,
    pub seeds: Vec<u64>,
    /// Mean probe accuracy of each successful seed, in seed order.
    pub seed_accuracies: Vec<f64>,
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub val_mean: Option<f64>,
    /// Per-epoch loss averaged over successful seeds, truncated to the
    /// shortest run.
    pub loss_curve: Vec<f64>,
    pub failures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub rate: f64,
    pub val_mean: Option<f64>,
    pub test_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationOutcome {
    pub sweep: Vec<SweepPoint>,
    pub node_rate: f64,
    pub cells: Vec<MetricsRecord>,
    /// Runs actually executed (not loaded from earlier records).
    pub executed: usize,
}

impl AblationOutcome {
    pub fn cell(&self, name: &str) -> Option<&MetricsRecord> {
        self.cells.iter().find(|c| c.cell == name)
    }
}

#[derive(Serialize)]
struct RunIdentity<'a> {
    dataset: &'a str,
    train: &'a TrainConfig,
    eval: &'a EvalConfig,
}

fn run_fingerprint(dataset: &str, train: &TrainConfig, eval: &EvalConfig) -> String {
    fingerprint(&RunIdentity { dataset, train, eval })
}

fn adj_name(a: AdjToken) -> &'static str {
    match a {
        AdjToken::Adj => "ADJ",
        AdjToken::Diff => "DIFF",
        AdjToken::Ppr => "PPR",
        AdjToken::Heat => "HEAT",
    }
}

fn node_name(n: NodeAugmentationKind) -> &'static str {
    match n {
        NodeAugmentationKind::Identity => "IN",
        NodeAugmentationKind::NodeDropout => "ND",
        NodeAugmentationKind::NodeFeatureDropout => "NFD",
    }
}

fn pair_name((a, b): (ViewToken, ViewToken)) -> String {
    format!(
        "{} + {} & {} + {}",
        node_name(a.node),
        adj_name(a.adj),
        node_name(b.node),
        adj_name(b.adj)
    )
}

/// Replace `DIFF` by each configured diffusion kind.
fn expand_diff(tokens: (ViewToken, ViewToken), kinds: &[PropagationKind]) -> Vec<(ViewToken, ViewToken)> {
    let has_diff = tokens.0.adj == AdjToken::Diff || tokens.1.adj == AdjToken::Diff;
    if !has_diff {
        return vec![tokens];
    }
    kinds
        .iter()
        .filter_map(|k| match k {
            PropagationKind::Ppr => Some(AdjToken::Ppr),
            PropagationKind::Heat => Some(AdjToken::Heat),
            PropagationKind::NormalizedAdjacency => None,
        })
        .map(|concrete| {
            let sub = |mut v: ViewToken| {
                if v.adj == AdjToken::Diff {
                    v.adj = concrete;
                }
                v
            };
            (sub(tokens.0), sub(tokens.1))
        })
        .collect()
}

fn side_rate(token: ViewToken, configured: f64, swept: Option<f64>) -> f64 {
    match token.node {
        NodeAugmentationKind::Identity => 0.0,
        _ => swept.unwrap_or(configured),
    }
}

fn configure(base: &TrainConfig, cfg: &ExperimentConfig, tokens: (ViewToken, ViewToken), rate: Option<f64>) -> TrainConfig {
    let mut train = *base;
    train.view1 = realize(tokens.0, side_rate(tokens.0, base.view1.node.rate, rate), &cfg.diffusion);
    train.view2 = realize(tokens.1, side_rate(tokens.1, base.view2.node.rate, rate), &cfg.diffusion);
    train
}

/// Expand the configured labels into cells. The first expanded cell is the
/// reference for the decay and projection variants. `rate`, when set,
/// replaces the dropout rate on every augmented side.
pub fn plan_cells(cfg: &ExperimentConfig, rate: Option<f64>) -> Result<Vec<CellSpec>, CliError> {
    let spec = &cfg.ablation;
    if spec.cells.is_empty() {
        return Err(CliError::Usage("ablation grid is empty: set ablation.cells".into()));
    }
    if spec.seeds.is_empty() {
        return Err(CliError::Usage("ablation.seeds is empty".into()));
    }
    let mut cells = Vec::new();
    for label in &spec.cells {
        for tokens in expand_diff(parse_pair(label)?, &spec.diffusion_kinds) {
            let name = pair_name(tokens);
            if cells.iter().any(|c: &CellSpec| c.name == name) {
                continue;
            }
            cells.push(CellSpec {
                name,
                variant: Variant::Grid,
                tokens,
                train: configure(&cfg.train, cfg, tokens, rate),
            });
        }
    }
    if cells.is_empty() {
        return Err(CliError::Usage("no diffusion kind configured for a DIFF cell".into()));
    }
    let reference = cells[0].clone();
    for &p in &spec.decay_p {
        let mut train = reference.train;
        train.decay_p = p;
        cells.push(CellSpec {
            name: format!("{} | p={p}", reference.name),
            variant: Variant::DecayP(p),
            tokens: reference.tokens,
            train,
        });
    }
    if spec.without_projection {
        let mut train = reference.train;
        train.use_projector = false;
        cells.push(CellSpec {
            name: format!("{} | no projection", reference.name),
            variant: Variant::NoProjection,
            tokens: reference.tokens,
            train,
        });
    }
    for c in &cells {
        c.train.validate()?;
    }
    Ok(cells)
}

struct Job {
    cell: String,
    train: TrainConfig,
    fingerprint: String,
}

/// How a grid is executed; none of this affects its results.
#[derive(Debug, Clone, Copy)]
pub struct AblateOptions {
    pub workers: usize,
    /// Log each finished run to stderr.
    pub progress: bool,
}

impl Default for AblateOptions {
    fn default() -> Self {
        Self {
            workers: 1,
            progress: true,
        }
    }
}

struct Context<'a> {
    dataset: &'a LabeledDataset,
    progress: bool,
    source: Arc<ViewSource>,
    eval: EvalConfig,
    runs_dir: PathBuf,
}

fn execute(ctx: &Context<'_>, job: &Job) -> RunRecord {
    let mut record = RunRecord {
        fingerprint: job.fingerprint.clone(),
        cell: job.cell.clone(),
        seed: job.train.seed,
        val_mean: None,
        test: None,
        losses: Vec::new(),
        stopped_early: false,
        error: None,
    };
    let result = (|| -> dgb::Result<()> {
        let mut trainer = Trainer::with_source(Arc::clone(&ctx.source), job.train)?;
        let report = trainer.run(|_, _, _| Ok(()))?;
        record.losses = report.losses;
        record.stopped_early = report.stopped_early;
        let h = embed(&trainer.model().online.encoder, &ctx.dataset.graph)?;
        record.val_mean = Some(evaluate_embeddings_on(&h, ctx.dataset, &ctx.eval, Split::Val)?.mean);
        record.test = Some(evaluate_embeddings_on(&h, ctx.dataset, &ctx.eval, Split::Test)?);
        Ok(())
    })();
    if let Err(e) = result {
        record.error = Some(e.to_string());
    }
    record
}

fn load_record(path: &Path, fp: &str) -> Option<RunRecord> {
    let text = std::fs::read_to_string(path).ok()?;
    let record: RunRecord = serde_json::from_str(&text).ok()?;
    (record.fingerprint == fp).then_some(record)
}

fn load_seconds(path: &Path) -> Option<f64> {
    std::fs::read_to_string(path).ok()?.trim().parse().ok()
}

/// A finished run: its record, wall-clock seconds if known, and whether it
/// was loaded from an earlier invocation.
type Finished = (RunRecord, Option<f64>, bool);

/// Run `jobs` on `workers` threads; results come back in job order.
fn run_pool(ctx: &Context<'_>, jobs: &[Job], workers: usize, executed: &AtomicUsize) -> Result<Vec<Finished>, CliError> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Finished>>> = Mutex::new(vec![None; jobs.len()]);
    let first_error: Mutex<Option<CliError>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..workers.clamp(1, jobs.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= jobs.len() {
                    break;
                }
                let job = &jobs[i];
                let path = ctx.runs_dir.join(format!("{}.json", job.fingerprint));
                let seconds_path = path.with_extension("seconds");
                let (record, seconds, resumed) = match load_record(&path, &job.fingerprint) {
                    Some(r) => (r, load_seconds(&seconds_path), true),
                    None => {
                        let start = Instant::now();
                        let r = execute(ctx, job);
                        let secs = start.elapsed().as_secs_f64();
                        executed.fetch_add(1, Ordering::Relaxed);
                        let mut text = serde_json::to_string_pretty(&r).expect("record serializes");
                        text.push('\n');
                        let written = write_atomic(&seconds_path, format!("{secs:.3}\n").as_bytes())
                            .and_then(|()| write_atomic(&path, text.as_bytes()));
                        if let Err(e) = written {
                            first_error.lock().unwrap().get_or_insert(e);
                        }
                        (r, Some(secs), false)
                    }
                };
                match (&record.error, &record.test) {
                    _ if !ctx.progress => {}
                    (Some(e), _) => eprintln!("[{}/{}] {} seed {}: failed: {e}", i + 1, jobs.len(), job.cell, record.seed),
                    (None, Some(t)) => eprintln!(
                        "[{}/{}] {} seed {}: test {:.4} val {:.4}{}",
                        i + 1,
                        jobs.len(),
                        job.cell,
                        record.seed,
                        t.mean,
                        record.val_mean.unwrap_or(f64::NAN),
                        if resumed { " (resumed)" } else { "" }
                    ),
                    (None, None) => {}
                }
                results.lock().unwrap()[i] = Some((record, seconds, resumed));
            });
        }
    });
    if let Some(e) = first_error.into_inner().unwrap() {
        return Err(e);
    }
    Ok(results.into_inner().unwrap().into_iter().map(|r| r.expect("every job ran")).collect())
}

fn mean_std(xs: &[f64]) -> (Option<f64>, Option<f64>) {
    if xs.is_empty() {
        return (None, None);
    }
    let r = EvalReport::from_runs(xs.to_vec());
    (Some(r.mean), Some(r.std))
}

fn aggregate(dataset: &str, cell: &CellSpec, seeds: &[u64], eval: &EvalConfig, runs: &[RunRecord]) -> MetricsRecord {
    let ok: Vec<&RunRecord> = runs.iter().filter(|r| r.error.is_none() && r.test.is_some()).collect();
    let accs: Vec<f64> = ok.iter().map(|r| r.test.as_ref().unwrap().mean).collect();
    let vals: Vec<f64> = ok.iter().filter_map(|r| r.val_mean).collect();
    let (mean, std) = mean_std(&accs);
    let shortest = ok.iter().map(|r| r.losses.len()).min().unwrap_or(0);
    let loss_curve = (0..shortest)
        .map(|e| ok.iter().map(|r| r.losses[e]).sum::<f64>() / ok.len() as f64)
        .collect();
    let mut template = cell.train;
    template.seed = 0;
    #[derive(Serialize)]
    struct CellIdentity<'a> {
        dataset: &'a str,
        train: &'a TrainConfig,
        eval: &'a EvalConfig,
        seeds: &'a [u64],
    }
    let node_rate = [cell.train.view1.node, cell.train.view2.node]
        .iter()
        .find(|n| n.kind != NodeAugmentationKind::Identity)
        .map_or(0.0, |n| n.rate);
    MetricsRecord {
        fingerprint: fingerprint(&CellIdentity {
            dataset,
            train: &template,
            eval,
            seeds,
        }),
        dataset: dataset.to_string(),
        cell: cell.name.clone(),
        view_pair: cell.train.view_label(),
        variant: cell.variant,
        decay_p: cell.train.decay_p,
        use_projector: cell.train.use_projector,
        node_rate,
        seeds: seeds.to_vec(),
        seed_accuracies: accs,
        mean,
        std,
        val_mean: mean_std(&vals).0,
        loss_curve,
        failures: runs
            .iter()
            .filter_map(|r| r.error.as_ref().map(|e| format!("seed {}: {e}", r.seed)))
            .collect(),
    }
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| format!("{x:.6}"))
}

pub fn summary_csv(cells: &[MetricsRecord]) -> String {
    let mut order: Vec<usize> = (0..cells.len()).collect();
    // Stable sort: ties and failed cells keep grid order.
    order.sort_by(|&a, &b| {
        let key = |i: usize| cells[i].mean.unwrap_or(f64::NEG_INFINITY);
        key(b).total_cmp(&key(a))
    });
    let mut out = String::from("rank,cell,view_pair,mean,std,val_mean,seeds_ok,seeds,fingerprint\n");
    for (rank, &i) in order.iter().enumerate() {
        let c = &cells[i];
        writeln!(
            out,
            "{},\"{}\",\"{}\",{},{},{},{},{},{}",
            rank + 1,
            c.cell,
            c.view_pair,
            opt(c.mean),
            opt(c.std),
            opt(c.val_mean),
            c.seed_accuracies.len(),
            c.seeds.len(),
            c.fingerprint
        )
        .unwrap();
    }
    out
}

/// Best validation accuracy; ties go to the lower rate.
fn pick_rate(points: &[SweepPoint]) -> Option<f64> {
    let mut best: Option<(f64, f64)> = None;
    for p in points {
        if let Some(v) = p.val_mean {
            if best.is_none_or(|(_, bv)| v > bv) {
                best = Some((p.rate, v));
            }
        }
    }
    best.map(|(r, _)| r)
}

/// Run the sweep and the grid, writing all outputs under `out`.
pub fn cmd_ablate(
    cfg: &ExperimentConfig,
    dataset_path: &Path,
    out: &Path,
    options: AblateOptions,
) -> Result<AblationOutcome, CliError> {
    let workers = options.workers;
    // Validate the grid before touching the data.
    plan_cells(cfg, None)?;
    cfg.eval.validate()?;
    let dataset = load_dataset(dataset_path)?;
    let runs_dir = out.join("runs");
    create_dir(&runs_dir)?;
    let ctx = Context {
        dataset: &dataset,
        progress: options.progress,
        source: Arc::new(ViewSource::new(dataset.graph.with_normalized_features()?)),
        eval: cfg.eval,
        runs_dir,
    };
    let executed = AtomicUsize::new(0);
    let mut timing = String::from("cell,seed,seconds\n");
    let spec = &cfg.ablation;

    let reference = plan_cells(cfg, None)?.remove(0);
    let augmented = reference.tokens.0.node != NodeAugmentationKind::Identity
        || reference.tokens.1.node != NodeAugmentationKind::Identity;
    let mut sweep = Vec::new();
    let mut rate = None;
    if let (Some(range), true) = (spec.sweep, augmented) {
        let seed = spec.sweep_seed.unwrap_or(spec.seeds[0]);
        let rates = range.rates();
        if rates.is_empty() {
            return Err(CliError::Usage("dropout sweep has no rates".into()));
        }
        let jobs: Vec<Job> = rates
            .iter()
            .map(|&r| {
                let mut train = configure(&cfg.train, cfg, reference.tokens, Some(r));
                train.seed = seed;
                Job {
                    cell: format!("sweep {} @ {r}", reference.name),
                    fingerprint: run_fingerprint(&dataset.name, &train, &cfg.eval),
                    train,
                }
            })
            .collect();
        for job in &jobs {
            job.train.validate()?;
        }
        let results = run_pool(&ctx, &jobs, workers, &executed)?;
        let mut csv = String::from("rate,val_mean,test_mean\n");
        for ((r, (record, secs, _)), job) in rates.iter().zip(&results).zip(&jobs) {
            let point = SweepPoint {
                rate: *r,
                val_mean: record.val_mean,
                test_mean: record.test.as_ref().map(|t| t.mean),
            };
            writeln!(csv, "{r},{},{}", opt(point.val_mean), opt(point.test_mean)).unwrap();
            if let Some(s) = secs {
                writeln!(timing, "\"{}\",{},{s:.3}", job.cell, job.train.seed).unwrap();
            }
            sweep.push(point);
        }
        write_atomic(&out.join("sweep.csv"), csv.as_bytes())?;
        rate = pick_rate(&sweep);
        match rate {
            _ if !options.progress => {}
            Some(r) => eprintln!("selected dropout rate {r} by validation accuracy"),
            None => eprintln!("every sweep run failed; keeping the configured rates"),
        }
    }

    let cells = plan_cells(cfg, rate)?;
    let mut jobs = Vec::new();
    for cell in &cells {
        for &seed in &spec.seeds {
            let mut train = cell.train;
            train.seed = seed;
            jobs.push(Job {
                cell: cell.name.clone(),
                fingerprint: run_fingerprint(&dataset.name, &train, &cfg.eval),
                train,
            });
        }
    }
    let results = run_pool(&ctx, &jobs, workers, &executed)?;
    let mut records = Vec::new();
    let mut jsonl = String::new();
    for (k, cell) in cells.iter().enumerate() {
        let chunk = &results[k * spec.seeds.len()..(k + 1) * spec.seeds.len()];
        let runs: Vec<RunRecord> = chunk.iter().map(|(r, _, _)| r.clone()).collect();
        for (r, secs, _) in chunk {
            if let Some(s) = secs {
                writeln!(timing, "\"{}\",{},{s:.3}", cell.name, r.seed).unwrap();
            }
        }
        let m = aggregate(&dataset.name, cell, &spec.seeds, &cfg.eval, &runs);
        jsonl.push_str(&serde_json::to_string(&m).expect("record serializes"));
        jsonl.push('\n');
        records.push(m);
    }
    write_atomic(&out.join("metrics.jsonl"), jsonl.as_bytes())?;
    write_atomic(&out.join("summary.csv"), summary_csv(&records).as_bytes())?;
    write_atomic(&out.join("timing.csv"), timing.as_bytes())?;
    Ok(AblationOutcome {
        sweep,
        node_rate: rate.unwrap_or(cfg.train.view1.node.rate),
        cells: records,
        executed: executed.into_inner(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_layout() {
        let cfg = ExperimentConfig::default();
        let names: Vec<String> = plan_cells(&cfg, Some(0.3)).unwrap().into_iter().map(|c| c.name).collect();
        assert_eq!(
            names,
            [
                "NFD + ADJ & ND + PPR",
                "NFD + ADJ & ND + HEAT",
                "IN + ADJ & IN + ADJ",
                "IN + PPR & IN + ADJ",
                "IN + HEAT & IN + ADJ",
                "NFD + ADJ & ND + ADJ",
                "NFD + ADJ & ND + PPR | p=0",
                "NFD + ADJ & ND + PPR | p=1",
                "NFD + ADJ & ND + PPR | no projection",
            ]
        );
    }

    #[test]
    fn swept_rate_applies_to_augmented_sides_only() {
        let cfg = ExperimentConfig::default();
        let cells = plan_cells(&cfg, Some(0.7)).unwrap();
        assert_eq!(cells[0].train.view1.node.rate, 0.7);
        assert_eq!(cells[0].train.view2.node.rate, 0.7);
        assert_eq!(cells[2].train.view1.node.kind, NodeAugmentationKind::Identity);
        assert_eq!(cells[6].train.decay_p, 0.0);
        assert!(!cells[8].train.use_projector);
    }

    #[test]
    fn empty_grid_is_rejected() {
        let mut cfg = ExperimentConfig::default();
        cfg.ablation.cells.clear();
        assert!(matches!(plan_cells(&cfg, None), Err(CliError::Usage(_))));
    }

    #[test]
    fn rate_selection_prefers_lower_on_ties() {
        let p = |rate, v| SweepPoint {
            rate,
            val_mean: v,
            test_mean: None,
        };
        assert_eq!(pick_rate(&[p(0.1, Some(0.5)), p(0.2, Some(0.6)), p(0.3, Some(0.6))]), Some(0.2));
        assert_eq!(pick_rate(&[p(0.1, None)]), None);
    }

    #[test]
    fn summary_ranks_by_mean() {
        let mk = |cell: &str, mean| MetricsRecord {
            fingerprint: "f".into(),
            dataset: "d".into(),
            cell: cell.into(),
            view_pair: "v".into(),
            variant: Variant::Grid,
            decay_p: 0.99,
            use_projector: true,
            node_rate: 0.2,
            seeds: vec![0],
            seed_accuracies: vec![],
            mean,
            std: None,
            val_mean: None,
            loss_curve: vec![],
            failures: vec![],
        };
        let csv = summary_csv(&[mk("a", Some(0.5)), mk("b", None), mk("c", Some(0.7))]);
        let order: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').nth(1).unwrap()).collect();
        assert_eq!(order, ["\"c\"", "\"a\"", "\"b\""]);
    }
}

//! Single-run commands: train, eval, gradcheck, export-embeddings.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use dgb::checkpoint::{read_checkpoint, write_checkpoint};
use dgb::eval::{evaluate_protocol, evaluate_raw_features, EvalReport};
use dgb::gradcheck::{run_gradcheck, GradcheckConfig, GradcheckReport};
use dgb::graph::load_dataset_with_report;
use dgb::trainer::{embed, TrainReport, Trainer};
use dgb::LabeledDataset;
use serde::{Deserialize, Serialize};

use crate::config::{fingerprint, ExperimentConfig};
use crate::error::CliError;

pub fn load_dataset(path: &Path) -> Result<LabeledDataset, CliError> {
    if !path.exists() {
        return Err(CliError::Data(format!("dataset path {} does not exist", path.display())));
    }
    let (dataset, report) = load_dataset_with_report(path)?;
    for w in report.warnings() {
        eprintln!("warning: {}: {w}", path.display());
    }
    Ok(dataset)
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Write through a temporary file so an interrupted run never leaves a
/// truncated output behind.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, contents).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).expect("report serializes");
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

/// Identity of a training run: everything that changes its outputs.
#[derive(Serialize)]
struct TrainIdentity<'a> {
    dataset: &'a str,
    train: &'a dgb::trainer::TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub fingerprint: String,
    pub dataset: String,
    pub view_pair: String,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub final_loss: f64,
    pub losses: Vec<f64>,
}

pub fn losses_csv(losses: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(out, "{},{l}", i + 1).unwrap();
    }
    out
}

/// Train an encoder and write `checkpoint.bin`, `losses.csv`,
/// `train_report.json` and `timing.csv` into `out`. With
/// `checkpoint_every = k > 0` every k-th epoch is also saved under
/// `checkpoints/`.
pub fn cmd_train(cfg: &ExperimentConfig, dataset_path: &Path, out: &Path) -> Result<TrainSummary, CliError> {
    cfg.train.validate()?;
    let dataset = load_dataset(dataset_path)?;
    create_dir(out)?;
    let fp = fingerprint(&TrainIdentity {
        dataset: &dataset.name,
        train: &cfg.train,
    });
    let every = cfg.train.checkpoint_every;
    let snapshots = out.join("checkpoints");
    if every > 0 {
        create_dir(&snapshots)?;
    }
    let mut trainer = Trainer::new(&dataset.graph, cfg.train)?;
    let report: TrainReport = trainer.run(|epoch, loss, model| {
        if (epoch + 1) % 10 == 0 {
            eprintln!("epoch {:>5}  loss {loss:.6}", epoch + 1);
        }
        if every > 0 && (epoch + 1) % every == 0 {
            write_checkpoint(snapshots.join(format!("epoch-{:05}.bin", epoch + 1)), &model.online.encoder)?;
        }
        Ok(())
    })?;
    let encoder = trainer.into_model().online.encoder;
    write_checkpoint(out.join("checkpoint.bin"), &encoder)?;
    write_atomic(&out.join("losses.csv"), losses_csv(&report.losses).as_bytes())?;
    let mut timing = String::from("epoch,seconds\n");
    for (i, s) in report.epoch_seconds.iter().enumerate() {
        writeln!(timing, "{},{s:.6}", i + 1).unwrap();
    }
    write_atomic(&out.join("timing.csv"), timing.as_bytes())?;

    let summary = TrainSummary {
        fingerprint: fp,
        dataset: dataset.name.clone(),
        view_pair: cfg.train.view_label(),
        epochs_run: report.epochs_run(),
        stopped_early: report.stopped_early,
        final_loss: report.losses.last().copied().unwrap_or(f64::NAN),
        losses: report.losses,
    };
    write_json(&out.join("train_report.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub dataset: String,
    /// `"raw"` or the checkpoint path as given.
    pub source: String,
    pub report: EvalReport,
}

/// Linear-probe evaluation of a checkpoint, or of the raw features when
/// `checkpoint` is `None`. Writes `eval_report.json` into `out`.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    dataset_path: &Path,
    checkpoint: Option<&Path>,
    out: &Path,
) -> Result<EvalSummary, CliError> {
    cfg.eval.validate()?;
    let dataset = load_dataset(dataset_path)?;
    let (source, report) = match checkpoint {
        Some(path) => {
            let encoder = read_checkpoint(path)?;
            (path.display().to_string(), evaluate_protocol(&encoder, &dataset, &cfg.eval)?)
        }
        None => ("raw".to_string(), evaluate_raw_features(&dataset, &cfg.eval)?),
    };
    create_dir(out)?;
    let summary = EvalSummary {
        dataset: dataset.name.clone(),
        source,
        report,
    };
    write_json(&out.join("eval_report.json"), &summary)?;
    Ok(summary)
}

pub fn format_gradcheck(report: &GradcheckReport) -> String {
    let mut out = format!(
        "gradcheck: {} instances, tolerance {:e}\n",
        report.instances, report.tolerance
    );
    for c in &report.components {
        writeln!(
            out,
            "  {:<16} max rel error {:>10.3e}  {}",
            c.name,
            c.max_rel_error,
            if c.passed { "ok" } else { "FAIL" }
        )
        .unwrap();
    }
    out
}

/// Run the finite-difference suites. Fails with a numeric error if any
/// component exceeds the tolerance.
pub fn cmd_gradcheck(config: &GradcheckConfig, out: Option<&Path>) -> Result<GradcheckReport, CliError> {
    let report = run_gradcheck(config)?;
    print!("{}", format_gradcheck(&report));
    if let Some(dir) = out {
        create_dir(dir)?;
        let components: Vec<_> = report
            .components
            .iter()
            .map(|c| serde_json::json!({"name": c.name, "max_rel_error": c.max_rel_error, "passed": c.passed}))
            .collect();
        let json = serde_json::json!({
            "instances": report.instances,
            "tolerance": report.tolerance,
            "passed": report.passed(),
            "components": components,
        });
        write_json(&dir.join("gradcheck.json"), &json)?;
    }
    if report.passed() {
        Ok(report)
    } else {
        let failed: Vec<_> = report.components.iter().filter(|c| !c.passed).map(|c| c.name).collect();
        Err(CliError::Numeric(format!("gradient check failed for {}", failed.join(", "))))
    }
}

/// Embeddings as TSV: header `e0 … e{d′-1} label`, then one row per node.
pub fn embeddings_tsv(h: &dgb::DenseMatrix, labels: &[usize]) -> String {
    let mut out = String::new();
    for j in 0..h.cols() {
        write!(out, "e{j}\t").unwrap();
    }
    out.push_str("label\n");
    for (i, label) in labels.iter().enumerate() {
        for v in h.row(i) {
            write!(out, "{v}\t").unwrap();
        }
        writeln!(out, "{label}").unwrap();
    }
    out
}

pub fn cmd_export_embeddings(checkpoint: &Path, dataset_path: &Path, out: &Path) -> Result<usize, CliError> {
    let dataset = load_dataset(dataset_path)?;
    let encoder = read_checkpoint(checkpoint)?;
    let h = embed(&encoder, &dataset.graph)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_atomic(out, embeddings_tsv(&h, &dataset.labels).as_bytes())?;
    Ok(h.rows())
}

//! Linear evaluation: a softmax classifier trained on frozen embeddings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::LabeledDataset;
use crate::matrix::DenseMatrix;
use crate::nn::{glorot_init, AdamState, GcnEncoder, Parameters};
use crate::rng::RngState;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeOptimizer {
    /// Plain full-batch gradient descent.
    Gd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeInit {
    Glorot,
    /// Deterministic start; every run then produces the same classifier.
    Zero,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub runs: usize,
    pub classifier_lr: f64,
    pub classifier_epochs: usize,
    pub l2_penalty: f64,
    pub seed: u64,
    pub optimizer: ProbeOptimizer,
    pub init: ProbeInit,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            runs: 50,
            classifier_lr: 0.01,
            classifier_epochs: 300,
            l2_penalty: 1e-4,
            seed: 0,
            optimizer: ProbeOptimizer::Adam,
            init: ProbeInit::Glorot,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 {
            return Err(Error::InvalidParameter("eval runs must be >= 1".into()));
        }
        if !(self.classifier_lr > 0.0 && self.classifier_lr.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "classifier_lr must be > 0, got {}",
                self.classifier_lr
            )));
        }
        if !(self.l2_penalty >= 0.0 && self.l2_penalty.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "l2_penalty must be >= 0, got {}",
                self.l2_penalty
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearClassifier {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl Parameters for LinearClassifier {
    fn slices(&self) -> Vec<&[f64]> {
        vec![self.weight.as_slice(), &self.bias]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.as_mut_slice(), &mut self.bias]
    }
}

impl LinearClassifier {
    pub fn zeros(dim: usize, num_classes: usize) -> Self {
        Self {
            weight: DenseMatrix::zeros(dim, num_classes),
            bias: vec![0.0; num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.bias.len()
    }

    pub fn logits(&self, h: &DenseMatrix) -> Result<DenseMatrix> {
        let mut z = h.matmul(&self.weight)?;
        z.add_row_vector(&self.bias);
        Ok(z)
    }

    /// Arg-max class per row; ties go to the lowest class index.
    pub fn predict(&self, h: &DenseMatrix) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(h)?))
    }
}

pub fn argmax_rows(z: &DenseMatrix) -> Vec<usize> {
    (0..z.rows())
        .map(|i| {
            let row = z.row(i);
            let mut best = 0;
            for (c, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// Mean softmax cross-entropy plus `0.5 · l2_penalty · ‖W‖²` (bias is not
/// penalized), and its gradient.
pub fn cross_entropy(
    clf: &LinearClassifier,
    h: &DenseMatrix,
    labels: &[usize],
    l2_penalty: f64,
) -> Result<(f64, LinearClassifier)> {
    check_labels(h, labels, clf.num_classes())?;
    let n = h.rows();
    let mut probs = clf.logits(h)?;
    let mut loss = 0.0;
    let inv_n = 1.0 / n.max(1) as f64;
    for (i, &y) in labels.iter().enumerate() {
        let row = probs.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        loss += sum.ln() - (row[y].ln());
        for v in row.iter_mut() {
            *v /= sum;
        }
        row[y] -= 1.0;
        for v in row.iter_mut() {
            *v *= inv_n;
        }
    }
    loss *= inv_n;
    let mut gw = h.t_matmul(&probs)?;
    let mut penalty = 0.0;
    for (g, w) in gw.as_mut_slice().iter_mut().zip(clf.weight.as_slice()) {
        *g += l2_penalty * w;
        penalty += w * w;
    }
    loss += 0.5 * l2_penalty * penalty;
    Ok((
        loss,
        LinearClassifier {
            weight: gw,
            bias: probs.column_sums(),
        },
    ))
}

fn check_labels(h: &DenseMatrix, labels: &[usize], num_classes: usize) -> Result<()> {
    if h.rows() != labels.len() {
        return Err(Error::shape(
            "linear probe",
            format!("{} embedding rows, {} labels", h.rows(), labels.len()),
        ));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(Error::InvalidParameter(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct ProbeFit {
    pub classifier: LinearClassifier,
    /// Objective value before each update.
    pub losses: Vec<f64>,
    pub warning: Option<String>,
}

/// Fit a multinomial logistic regression on `(h, labels)`.
pub fn fit_linear(
    h: &DenseMatrix,
    labels: &[usize],
    num_classes: usize,
    config: &EvalConfig,
    rng: &mut RngState,
) -> Result<ProbeFit> {
    config.validate()?;
    check_labels(h, labels, num_classes)?;
    let mut clf = match config.init {
        ProbeInit::Zero => LinearClassifier::zeros(h.cols(), num_classes),
        ProbeInit::Glorot => LinearClassifier {
            weight: glorot_init(h.cols(), num_classes, rng),
            bias: vec![0.0; num_classes],
        },
    };
    let warning = degenerate_warning(h, labels);
    let mut adam = AdamState::new(config.classifier_lr, &clf);
    let mut losses = Vec::with_capacity(config.classifier_epochs);
    for _ in 0..config.classifier_epochs {
        let (loss, grad) = cross_entropy(&clf, h, labels, config.l2_penalty)?;
        losses.push(loss);
        match config.optimizer {
            ProbeOptimizer::Adam => adam.step(&mut clf, &grad)?,
            ProbeOptimizer::Gd => {
                if !grad.all_finite() {
                    return Err(Error::NonFinite("probe gradient".into()));
                }
                for (p, g) in clf.slices_mut().into_iter().zip(grad.slices()) {
                    for (pv, gv) in p.iter_mut().zip(g) {
                        *pv -= config.classifier_lr * gv;
                    }
                }
            }
        }
    }
    if !clf.all_finite() {
        return Err(Error::NonFinite("probe weights".into()));
    }
    Ok(ProbeFit {
        classifier: clf,
        losses,
        warning,
    })
}

fn degenerate_warning(h: &DenseMatrix, labels: &[usize]) -> Option<String> {
    if h.rows() < 2 {
        return None;
    }
    let first = h.row(0);
    let identical = (1..h.rows()).all(|i| h.row(i) == first);
    let mixed = labels.iter().any(|&y| y != labels[0]);
    (identical && mixed).then(|| "all training embeddings are identical but labels differ".to_string())
}

/// Fraction of rows whose predicted class equals the label.
pub fn accuracy(clf: &LinearClassifier, h: &DenseMatrix, labels: &[usize]) -> Result<f64> {
    if h.rows() != labels.len() {
        return Err(Error::shape(
            "accuracy",
            format!("{} rows, {} labels", h.rows(), labels.len()),
        ));
    }
    if labels.is_empty() {
        return Ok(0.0);
    }
    let pred = clf.predict(h)?;
    let correct = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(correct as f64 / labels.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub runs: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl EvalReport {
    /// Population standard deviation over `runs`.
    pub fn from_runs(runs: Vec<f64>) -> Self {
        let n = runs.len().max(1) as f64;
        let mean = runs.iter().sum::<f64>() / n;
        let var = runs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
        Self {
            runs,
            mean,
            std: var.sqrt(),
        }
    }
}

/// Which split a probe is scored on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Val,
    Test,
}

/// Fit `config.runs` probes on the train split of `embeddings` and score
/// each on `split`. Run `r` draws from `fork(r)` of the config seed.
pub fn evaluate_embeddings_on(
    embeddings: &DenseMatrix,
    dataset: &LabeledDataset,
    config: &EvalConfig,
    split: Split,
) -> Result<EvalReport> {
    config.validate()?;
    if embeddings.rows() != dataset.labels.len() {
        return Err(Error::shape(
            "evaluate",
            format!("{} embedding rows for {} nodes", embeddings.rows(), dataset.labels.len()),
        ));
    }
    let train_idx = &dataset.splits.train;
    let eval_idx = match split {
        Split::Val => &dataset.splits.val,
        Split::Test => &dataset.splits.test,
    };
    let h_train = embeddings.select_rows(train_idx);
    let y_train = dataset.labels_of(train_idx);
    let h_eval = embeddings.select_rows(eval_idx);
    let y_eval = dataset.labels_of(eval_idx);
    let base = RngState::new(config.seed);
    let mut runs = Vec::with_capacity(config.runs);
    for r in 0..config.runs {
        let mut rng = base.fork(r as u64);
        let fit = fit_linear(&h_train, &y_train, dataset.num_classes, config, &mut rng)?;
        runs.push(accuracy(&fit.classifier, &h_eval, &y_eval)?);
    }
    Ok(EvalReport::from_runs(runs))
}

/// Test-split evaluation of fixed embeddings.
pub fn evaluate_embeddings(embeddings: &DenseMatrix, dataset: &LabeledDataset, config: &EvalConfig) -> Result<EvalReport> {
    evaluate_embeddings_on(embeddings, dataset, config, Split::Test)
}

/// Embed the clean graph with `encoder`, then run the probe protocol.
pub fn evaluate_protocol(encoder: &GcnEncoder, dataset: &LabeledDataset, config: &EvalConfig) -> Result<EvalReport> {
    let h = crate::trainer::embed(encoder, &dataset.graph)?;
    evaluate_embeddings(&h, dataset, config)
}

/// The probe applied to the row-normalized input features themselves.
pub fn evaluate_raw_features(dataset: &LabeledDataset, config: &EvalConfig) -> Result<EvalReport> {
    let graph = dataset.graph.with_normalized_features()?;
    evaluate_embeddings(graph.features(), dataset, config)
}

//! Finite-difference verification of every hand-written backward pass.
//!
//! Each component is reduced to a scalar `f = Σ R ⊙ output` with a random
//! `R` (or is already a scalar loss), and its analytic gradient is compared
//! with central differences.

use std::borrow::Cow;
use std::sync::Arc;

use serde::Serialize;

use crate::augment::View;
use crate::error::Result;
use crate::eval::{cross_entropy, LinearClassifier};
use crate::graph::{Operator, PropagationKind, PropagationMatrix};
use crate::matrix::{DenseMatrix, SparseMatrix};
use crate::nn::{
    bootstrap_loss, glorot_init, l2_normalize_backward, l2_normalize_rows, Activation, GcnEncoder, Mlp, MlpNorm,
    Parameters,
};
use crate::rng::RngState;
use crate::trainer::{online_pass, OnlineTower};

pub const FD_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-5;

/// A deliberately broken adjoint, to show the checker can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Fault {
    #[default]
    None,
    /// Backpropagate through `P` instead of `Pᵀ` in the graph convolution.
    GcnAdjoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub instances: usize,
    pub nodes: usize,
    pub in_dim: usize,
    pub out_dim: usize,
    pub tolerance: f64,
    pub fault: Fault,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 20,
            nodes: 12,
            in_dim: 7,
            out_dim: 5,
            tolerance: DEFAULT_TOLERANCE,
            fault: Fault::None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComponentCheck {
    pub name: &'static str,
    pub max_rel_error: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub tolerance: f64,
    pub instances: usize,
    pub components: Vec<ComponentCheck>,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.components.iter().all(|c| c.passed)
    }
}

/// Largest elementwise `|a − n| / max(|a|, |n|, floor)`, where the floor is
/// `1e-3` of the largest numeric entry. The floor keeps entries that are
/// zero up to roundoff from dominating.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = numeric.iter().chain(analytic).fold(0.0f64, |m, v| m.max(v.abs()));
    let floor = 1e-3 * scale + 1e-12;
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

/// Central differences of `f` with respect to every parameter of `p`.
pub fn numeric_gradient<P: Parameters + Clone>(p: &P, f: impl Fn(&P) -> Result<f64>) -> Result<Vec<Vec<f64>>> {
    let sizes: Vec<usize> = p.slices().iter().map(|s| s.len()).collect();
    let mut out = Vec::with_capacity(sizes.len());
    for (k, &len) in sizes.iter().enumerate() {
        let mut g = Vec::with_capacity(len);
        for j in 0..len {
            let mut plus = p.clone();
            plus.slices_mut()[k][j] += FD_STEP;
            let mut minus = p.clone();
            minus.slices_mut()[k][j] -= FD_STEP;
            g.push((f(&plus)? - f(&minus)?) / (2.0 * FD_STEP));
        }
        out.push(g);
    }
    Ok(out)
}

/// Flattened analytic and numeric gradients of one component, so the error
/// floor is set by the component's overall gradient scale.
#[derive(Default)]
struct Gradients {
    analytic: Vec<f64>,
    numeric: Vec<f64>,
}

impl Gradients {
    fn push<P: Parameters>(&mut self, analytic: &P, numeric: &[Vec<f64>]) {
        for (a, n) in analytic.slices().iter().zip(numeric) {
            self.analytic.extend_from_slice(a);
            self.numeric.extend_from_slice(n);
        }
    }

    fn error(&self) -> f64 {
        max_relative_error(&self.analytic, &self.numeric)
    }
}

fn compare<P: Parameters>(analytic: &P, numeric: &[Vec<f64>]) -> f64 {
    let mut g = Gradients::default();
    g.push(analytic, numeric);
    g.error()
}

fn weighted_sum(r: &DenseMatrix, y: &DenseMatrix) -> f64 {
    r.as_slice().iter().zip(y.as_slice()).map(|(a, b)| a * b).sum()
}

/// Random matrix with roughly `zero_fraction` of its entries zeroed.
fn random_matrix(rows: usize, cols: usize, zero_fraction: f64, rng: &mut RngState) -> DenseMatrix {
    let data = (0..rows * cols)
        .map(|_| {
            let v = rng.uniform_in(-1.0, 1.0);
            if rng.bernoulli(zero_fraction) {
                0.0
            } else {
                v
            }
        })
        .collect();
    DenseMatrix::from_vec(rows, cols, data).expect("shape matches data")
}

/// Non-symmetric, row-stochastic sparse operator with self-loops.
fn random_operator(n: usize, rng: &mut RngState) -> PropagationMatrix {
    let mut triplets = Vec::new();
    for i in 0..n {
        triplets.push((i, i, rng.uniform_in(0.2, 1.0)));
        for j in 0..n {
            if i != j && rng.bernoulli(0.3) {
                triplets.push((i, j, rng.uniform_in(0.05, 1.0)));
            }
        }
    }
    let s = SparseMatrix::from_triplets(n, n, triplets).expect("valid triplets");
    let sums = s.row_sums();
    let mut values = Vec::with_capacity(s.nnz());
    for i in 0..n {
        let (_, vals) = s.row(i);
        values.extend(vals.iter().map(|v| v / sums[i]));
    }
    let s = SparseMatrix::from_csr(n, n, s.row_offsets().to_vec(), s.col_indices().to_vec(), values)
        .expect("same structure");
    PropagationMatrix::new(PropagationKind::Ppr, Operator::Sparse(s)).expect("square operator")
}

/// Overwrite biases and PReLU slopes with random values. Zero biases
/// put every all-zero input row exactly on an activation kink.
fn randomize_offsets(enc: &mut GcnEncoder, rng: &mut RngState) {
    for b in &mut enc.layer.bias {
        *b = rng.uniform_in(-0.5, 0.5);
    }
    for a in &mut enc.slopes {
        *a = rng.uniform_in(0.05, 0.5);
    }
}

fn randomize_mlp(mlp: &mut Mlp, rng: &mut RngState) {
    for b in mlp.hidden.bias.iter_mut().chain(&mut mlp.output.bias) {
        *b = rng.uniform_in(-0.5, 0.5);
    }
    if let Some(bn) = &mut mlp.norm {
        for g in &mut bn.gamma {
            *g = rng.uniform_in(0.5, 1.5);
        }
        for b in &mut bn.beta {
            *b = rng.uniform_in(-0.5, 0.5);
        }
    }
}

struct Instance {
    p: PropagationMatrix,
    x: DenseMatrix,
    rng: RngState,
}

fn check_gcn(inst: &mut Instance, cfg: &GradcheckConfig) -> Result<f64> {
    let mut enc = GcnEncoder::new(cfg.in_dim, cfg.out_dim, Activation::Prelu, &mut inst.rng);
    randomize_offsets(&mut enc, &mut inst.rng);
    let r = random_matrix(cfg.nodes, cfg.out_dim, 0.0, &mut inst.rng);
    let adjoint = match cfg.fault {
        Fault::None => inst.p.clone(),
        Fault::GcnAdjoint => inst.p.with_forward_as_adjoint(),
    };
    let (_, tape) = enc.forward(&adjoint, &inst.x)?;
    let mut grads = enc.zeros_like();
    let gx = enc.backward_with_input(tape, &r, &mut grads)?;
    let p = &inst.p;
    let x = &inst.x;
    let num = numeric_gradient(&enc, |e| Ok(weighted_sum(&r, &e.apply(p, x)?)))?;
    let num_x = numeric_gradient(x, |xx| Ok(weighted_sum(&r, &enc.apply(p, xx)?)))?;
    let mut g = Gradients::default();
    g.push(&grads, &num);
    g.push(&gx, &num_x);
    Ok(g.error())
}

fn check_mlp(inst: &mut Instance, cfg: &GradcheckConfig, norm: MlpNorm) -> Result<f64> {
    let hidden = 2 * cfg.out_dim;
    let mut mlp = Mlp::new(cfg.in_dim, hidden, cfg.out_dim, norm, &mut inst.rng);
    randomize_mlp(&mut mlp, &mut inst.rng);
    let x = random_matrix(cfg.nodes, cfg.in_dim, 0.0, &mut inst.rng);
    let r = random_matrix(cfg.nodes, cfg.out_dim, 0.0, &mut inst.rng);
    let (_, tape) = mlp.forward(&x)?;
    let mut grads = mlp.zeros_like();
    let gx = mlp.backward(tape, &r, &mut grads)?;
    let num = numeric_gradient(&mlp, |m| Ok(weighted_sum(&r, &m.apply(&x)?)))?;
    let num_x = numeric_gradient(&x, |xx| Ok(weighted_sum(&r, &mlp.apply(xx)?)))?;
    let mut g = Gradients::default();
    g.push(&grads, &num);
    g.push(&gx, &num_x);
    Ok(g.error())
}

fn check_normalize(inst: &mut Instance, cfg: &GradcheckConfig) -> Result<f64> {
    let z = random_matrix(cfg.nodes, cfg.out_dim, 0.0, &mut inst.rng);
    let r = random_matrix(cfg.nodes, cfg.out_dim, 0.0, &mut inst.rng);
    let (_, tape) = l2_normalize_rows(&z)?;
    let g = l2_normalize_backward(tape, &r)?;
    let num = numeric_gradient(&z, |zz| Ok(weighted_sum(&r, &l2_normalize_rows(zz)?.0)))?;
    Ok(compare(&g, &num))
}

fn check_loss(inst: &mut Instance, cfg: &GradcheckConfig) -> Result<f64> {
    let q = random_matrix(cfg.nodes, cfg.out_dim, 0.0, &mut inst.rng);
    let z = l2_normalize_rows(&random_matrix(cfg.nodes, cfg.out_dim, 0.0, &mut inst.rng))?.0;
    let (_, g) = bootstrap_loss(&q, &z)?;
    let num = numeric_gradient(&q, |qq| Ok(bootstrap_loss(qq, &z)?.0))?;
    Ok(compare(&g, &num))
}

fn check_cross_entropy(inst: &mut Instance, cfg: &GradcheckConfig) -> Result<f64> {
    let classes = 3;
    let clf = LinearClassifier {
        weight: glorot_init(cfg.in_dim, classes, &mut inst.rng),
        bias: (0..classes).map(|_| inst.rng.uniform_in(-0.5, 0.5)).collect(),
    };
    let h = random_matrix(cfg.nodes, cfg.in_dim, 0.0, &mut inst.rng);
    let labels: Vec<usize> = (0..cfg.nodes).map(|_| inst.rng.index(classes)).collect();
    let penalty = 0.1;
    let (_, g) = cross_entropy(&clf, &h, &labels, penalty)?;
    let num = numeric_gradient(&clf, |c| Ok(cross_entropy(c, &h, &labels, penalty)?.0))?;
    Ok(compare(&g, &num))
}

/// The whole online tower: encoder, batch-normalized projector, predictor,
/// normalization and loss, against a fixed target.
fn check_online_tower(inst: &mut Instance, cfg: &GradcheckConfig) -> Result<f64> {
    let d = cfg.out_dim;
    let mut online = OnlineTower {
        encoder: GcnEncoder::new(cfg.in_dim, d, Activation::Prelu, &mut inst.rng),
        projector: Some(Mlp::new(d, 2 * d, d, MlpNorm::Batch, &mut inst.rng)),
        predictor: Mlp::new(d, 2 * d, d, MlpNorm::Batch, &mut inst.rng),
    };
    randomize_offsets(&mut online.encoder, &mut inst.rng);
    if let Some(p) = &mut online.projector {
        randomize_mlp(p, &mut inst.rng);
    }
    randomize_mlp(&mut online.predictor, &mut inst.rng);
    let target = l2_normalize_rows(&random_matrix(cfg.nodes, d, 0.0, &mut inst.rng))?.0;
    let view = View {
        features: Cow::Borrowed(&inst.x),
        propagation: Arc::new(inst.p.clone()),
    };
    let mut grads = online.zeros_like();
    online_pass(&online, &view, &target, &mut grads)?;
    let num = numeric_gradient(&online, |o| {
        let mut scratch = o.zeros_like();
        online_pass(o, &view, &target, &mut scratch)
    })?;
    Ok(compare(&grads, &num))
}

pub const COMPONENTS: [&str; 7] = [
    "gcn",
    "mlp (batch norm)",
    "mlp (plain)",
    "l2_normalize",
    "bootstrap_loss",
    "cross_entropy",
    "online_tower",
];

/// Run every component on `config.instances` random instances and report
/// the worst relative error seen per component.
pub fn run_gradcheck(config: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut worst = [0.0f64; COMPONENTS.len()];
    let root = RngState::new(config.seed);
    for i in 0..config.instances {
        let mut rng = root.fork(i as u64);
        let p = random_operator(config.nodes, &mut rng);
        let zero_fraction = if i % 2 == 0 { 0.0 } else { 0.95 };
        let x = random_matrix(config.nodes, config.in_dim, zero_fraction, &mut rng);
        let mut inst = Instance { p, x, rng };
        let errors = [
            check_gcn(&mut inst, config)?,
            check_mlp(&mut inst, config, MlpNorm::Batch)?,
            check_mlp(&mut inst, config, MlpNorm::None)?,
            check_normalize(&mut inst, config)?,
            check_loss(&mut inst, config)?,
            check_cross_entropy(&mut inst, config)?,
            check_online_tower(&mut inst, config)?,
        ];
        for (w, e) in worst.iter_mut().zip(errors) {
            *w = w.max(e);
        }
    }
    Ok(GradcheckReport {
        tolerance: config.tolerance,
        instances: config.instances,
        components: COMPONENTS
            .iter()
            .zip(worst)
            .map(|(&name, e)| ComponentCheck {
                name,
                max_rel_error: e,
                passed: e < config.tolerance,
            })
            .collect(),
    })
}

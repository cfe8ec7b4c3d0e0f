//! Differentiable building blocks with hand-written backward passes.
//!
//! Every forward that needs a backward returns a tape. Backward methods take
//! the tape by value, so a tape cannot be replayed. Gradients are stored in
//! a value of the same type as the module (a `LinearLayer` of gradients for a
//! `LinearLayer`, and so on) and are accumulated, not overwritten.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::PropagationMatrix;
use crate::matrix::{dot, DenseMatrix};
use crate::rng::RngState;

/// Row norms below this are treated as a collapsed representation.
pub const MIN_ROW_NORM: f64 = 1e-12;

/// Variance floor inside batch normalization.
pub const BATCH_NORM_EPS: f64 = 1e-5;

/// Inputs with at least this fraction of zeros are multiplied by walking
/// their nonzeros instead of a dense GEMM.
const SPARSE_INPUT_THRESHOLD: f64 = 0.9;

/// Initial PReLU slope for every channel.
pub const PRELU_INIT: f64 = 0.25;

/// Anything made of parameter arrays. The order of [`Parameters::slices`]
/// is fixed per type, which is what lets optimizer state and gradients line
/// up with parameters.
pub trait Parameters {
    fn slices(&self) -> Vec<&[f64]>;
    fn slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn fill_zero(&mut self) {
        for s in self.slices_mut() {
            s.fill(0.0);
        }
    }

    fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// Gradient buffer of the same shape, all zeros.
    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.fill_zero();
        z
    }
}

impl Parameters for DenseMatrix {
    fn slices(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }
}

/// Uniform draws from `[-a, a]` with `a = sqrt(6 / (rows + cols))`.
pub fn glorot_init(rows: usize, cols: usize, rng: &mut RngState) -> DenseMatrix {
    assert!(rows >= 1 && cols >= 1, "glorot_init needs a non-empty shape");
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.uniform_in(-a, a)).collect();
    DenseMatrix::from_vec(rows, cols, data).expect("shape matches data")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Prelu,
}

impl Activation {
    pub fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Relu => 1,
            Activation::Prelu => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Activation::Identity),
            1 => Some(Activation::Relu),
            2 => Some(Activation::Prelu),
            _ => None,
        }
    }
}

/// Apply an activation column-wise; `slopes` is only read for PReLU.
fn activate(z: &DenseMatrix, act: Activation, slopes: &[f64]) -> DenseMatrix {
    let mut out = z.clone();
    match act {
        Activation::Identity => {}
        Activation::Relu => {
            for v in out.as_mut_slice() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
        Activation::Prelu => {
            let cols = z.cols();
            for row in out.as_mut_slice().chunks_exact_mut(cols.max(1)) {
                for (v, a) in row.iter_mut().zip(slopes) {
                    if *v < 0.0 {
                        *v *= a;
                    }
                }
            }
        }
    }
    out
}

/// Turn `grad` (w.r.t. the activation output) into the gradient w.r.t. the
/// pre-activation `z`, accumulating PReLU slope gradients into `slope_grad`.
fn activate_backward(z: &DenseMatrix, act: Activation, slopes: &[f64], grad: &mut DenseMatrix, slope_grad: &mut [f64]) {
    match act {
        Activation::Identity => {}
        Activation::Relu => {
            for (g, &v) in grad.as_mut_slice().iter_mut().zip(z.as_slice()) {
                if v <= 0.0 {
                    *g = 0.0;
                }
            }
        }
        Activation::Prelu => {
            let cols = z.cols();
            for (grow, zrow) in grad
                .as_mut_slice()
                .chunks_exact_mut(cols.max(1))
                .zip(z.as_slice().chunks_exact(cols.max(1)))
            {
                for c in 0..cols {
                    if zrow[c] < 0.0 {
                        slope_grad[c] += grow[c] * zrow[c];
                        grow[c] *= slopes[c];
                    }
                }
            }
        }
    }
}

/// `x · W + b`, walking the nonzeros of `x` when it is mostly zero.
fn affine(x: &DenseMatrix, layer: &LinearLayer) -> Result<DenseMatrix> {
    let mut out = if x.sparsity() >= SPARSE_INPUT_THRESHOLD {
        x.matmul_skip_zeros(&layer.weight)?
    } else {
        x.matmul(&layer.weight)?
    };
    out.add_row_vector(&layer.bias);
    Ok(out)
}

fn t_product(x: &DenseMatrix, g: &DenseMatrix) -> Result<DenseMatrix> {
    if x.sparsity() >= SPARSE_INPUT_THRESHOLD {
        x.t_matmul_skip_zeros(g)
    } else {
        x.t_matmul(g)
    }
}

fn accumulate(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub weight: DenseMatrix,
    pub bias: Vec<f64>,
}

impl LinearLayer {
    /// Glorot weights, zero bias.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut RngState) -> Self {
        Self {
            weight: glorot_init(in_dim, out_dim, rng),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn from_parts(weight: DenseMatrix, bias: Vec<f64>) -> Result<Self> {
        if bias.len() != weight.cols() {
            return Err(Error::shape(
                "LinearLayer",
                format!("bias has {} entries for {} outputs", bias.len(), weight.cols()),
            ));
        }
        Ok(Self { weight, bias })
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        affine(x, self)
    }

    /// Accumulate parameter gradients for output gradient `g` at input `x`.
    fn backward_params(&self, x: &DenseMatrix, g: &DenseMatrix, grads: &mut LinearLayer) -> Result<()> {
        let gw = t_product(x, g)?;
        grads.weight.add_assign(&gw)?;
        accumulate(&mut grads.bias, &g.column_sums());
        Ok(())
    }
}

impl Parameters for LinearLayer {
    fn slices(&self) -> Vec<&[f64]> {
        vec![self.weight.as_slice(), &self.bias]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weight.as_mut_slice(), &mut self.bias]
    }
}

/// One graph convolution `σ(P X W + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GcnEncoder {
    pub layer: LinearLayer,
    pub activation: Activation,
    /// Per-channel PReLU slopes; empty for other activations.
    pub slopes: Vec<f64>,
}

/// Saved state from [`GcnEncoder::forward`].
#[derive(Debug)]
pub struct GcnTape<'a> {
    x: &'a DenseMatrix,
    p: &'a PropagationMatrix,
    pre: DenseMatrix,
}

impl GcnEncoder {
    pub fn new(in_dim: usize, out_dim: usize, activation: Activation, rng: &mut RngState) -> Self {
        let layer = LinearLayer::new(in_dim, out_dim, rng);
        Self::from_layer(layer, activation)
    }

    pub fn from_layer(layer: LinearLayer, activation: Activation) -> Self {
        let slopes = match activation {
            Activation::Prelu => vec![PRELU_INIT; layer.out_dim()],
            _ => Vec::new(),
        };
        Self {
            layer,
            activation,
            slopes,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layer.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layer.out_dim()
    }

    fn check(&self, p: &PropagationMatrix, x: &DenseMatrix) -> Result<()> {
        if p.size() != x.rows() || x.cols() != self.in_dim() {
            return Err(Error::shape(
                "gcn_forward",
                format!(
                    "P is {n}x{n}, X is {:?}, W is {:?}",
                    x.shape(),
                    self.layer.weight.shape(),
                    n = p.size()
                ),
            ));
        }
        if self.activation == Activation::Prelu && self.slopes.len() != self.out_dim() {
            return Err(Error::shape("gcn_forward", "PReLU slope count differs from output width"));
        }
        Ok(())
    }

    /// Forward pass without a tape.
    pub fn apply(&self, p: &PropagationMatrix, x: &DenseMatrix) -> Result<DenseMatrix> {
        self.check(p, x)?;
        // P (X W) is cheaper than (P X) W whenever d > d′.
        let xw = if x.sparsity() >= SPARSE_INPUT_THRESHOLD {
            x.matmul_skip_zeros(&self.layer.weight)?
        } else {
            x.matmul(&self.layer.weight)?
        };
        let mut pre = p.apply(&xw)?;
        pre.add_row_vector(&self.layer.bias);
        Ok(activate(&pre, self.activation, &self.slopes))
    }

    pub fn forward<'a>(&self, p: &'a PropagationMatrix, x: &'a DenseMatrix) -> Result<(DenseMatrix, GcnTape<'a>)> {
        self.check(p, x)?;
        let xw = if x.sparsity() >= SPARSE_INPUT_THRESHOLD {
            x.matmul_skip_zeros(&self.layer.weight)?
        } else {
            x.matmul(&self.layer.weight)?
        };
        let mut pre = p.apply(&xw)?;
        pre.add_row_vector(&self.layer.bias);
        let h = activate(&pre, self.activation, &self.slopes);
        Ok((h, GcnTape { x, p, pre }))
    }

    /// Accumulate parameter gradients into `grads`; returns `Pᵀ G` where `G`
    /// is the gradient at the pre-activation, which is what the input
    /// gradient is built from.
    fn backward_inner(&self, tape: &GcnTape<'_>, grad_h: &DenseMatrix, grads: &mut GcnEncoder) -> Result<DenseMatrix> {
        if grad_h.shape() != tape.pre.shape() {
            return Err(Error::shape(
                "gcn_backward",
                format!("grad is {:?}, output is {:?}", grad_h.shape(), tape.pre.shape()),
            ));
        }
        let mut g = grad_h.clone();
        activate_backward(&tape.pre, self.activation, &self.slopes, &mut g, &mut grads.slopes);
        accumulate(&mut grads.layer.bias, &g.column_sums());
        let pt_g = tape.p.apply_transpose(&g)?;
        let gw = t_product(tape.x, &pt_g)?;
        grads.layer.weight.add_assign(&gw)?;
        Ok(pt_g)
    }

    /// Parameter gradients only.
    pub fn backward(&self, tape: GcnTape<'_>, grad_h: &DenseMatrix, grads: &mut GcnEncoder) -> Result<()> {
        self.backward_inner(&tape, grad_h, grads).map(|_| ())
    }

    /// Parameter gradients plus the gradient w.r.t. `X`.
    pub fn backward_with_input(
        &self,
        tape: GcnTape<'_>,
        grad_h: &DenseMatrix,
        grads: &mut GcnEncoder,
    ) -> Result<DenseMatrix> {
        let pt_g = self.backward_inner(&tape, grad_h, grads)?;
        pt_g.matmul_t(&self.layer.weight)
    }
}

impl Parameters for GcnEncoder {
    fn slices(&self) -> Vec<&[f64]> {
        vec![self.layer.weight.as_slice(), &self.layer.bias, &self.slopes]
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.layer.weight.as_mut_slice(), &mut self.layer.bias, &mut self.slopes]
    }
}

/// Per-feature standardization over the rows of a batch followed by an
/// affine rescale. Always uses the statistics of the batch it is given.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
}

#[derive(Debug)]
struct BatchNormTape {
    normalized: DenseMatrix,
    inv_std: Vec<f64>,
}

impl BatchNorm {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
        }
    }

    fn forward(&self, x: &DenseMatrix) -> (DenseMatrix, BatchNormTape) {
        let (n, d) = x.shape();
        let inv_n = 1.0 / n as f64;
        let mean: Vec<f64> = x.column_sums().iter().map(|s| s * inv_n).collect();
        let mut var = vec![0.0; d];
        for row in x.as_slice().chunks_exact(d) {
            for c in 0..d {
                let t = row[c] - mean[c];
                var[c] += t * t;
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v * inv_n + BATCH_NORM_EPS).sqrt()).collect();
        let mut normalized = x.clone();
        let mut out = x.clone();
        for (nrow, orow) in normalized
            .as_mut_slice()
            .chunks_exact_mut(d)
            .zip(out.as_mut_slice().chunks_exact_mut(d))
        {
            for c in 0..d {
                let xh = (nrow[c] - mean[c]) * inv_std[c];
                nrow[c] = xh;
                orow[c] = self.gamma[c] * xh + self.beta[c];
            }
        }
        (out, BatchNormTape { normalized, inv_std })
    }

    fn backward(&self, tape: BatchNormTape, grad: &DenseMatrix, grads: &mut BatchNorm) -> DenseMatrix {
        let (n, d) = grad.shape();
        let mut sum_g = vec![0.0; d];
        let mut sum_gx = vec![0.0; d];
        for (grow, xrow) in grad
            .as_slice()
            .chunks_exact(d)
            .zip(tape.normalized.as_slice().chunks_exact(d))
        {
            for c in 0..d {
                sum_g[c] += grow[c];
                sum_gx[c] += grow[c] * xrow[c];
            }
        }
        accumulate(&mut grads.beta, &sum_g);
        accumulate(&mut grads.gamma, &sum_gx);
        let inv_n = 1.0 / n as f64;
        let mut out = grad.clone();
        for (orow, xrow) in out
            .as_mut_slice()
            .chunks_exact_mut(d)
            .zip(tape.normalized.as_slice().chunks_exact(d))
        {
            for c in 0..d {
                let k = self.gamma[c] * tape.inv_std[c];
                orow[c] = k * (orow[c] - inv_n * sum_g[c] - xrow[c] * inv_n * sum_gx[c]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MlpNorm {
    None,
    Batch,
}

/// `Linear -> [BatchNorm] -> activation -> Linear`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub hidden: LinearLayer,
    pub norm: Option<BatchNorm>,
    pub activation: Activation,
    pub output: LinearLayer,
}

#[derive(Debug)]
pub struct MlpTape<'a> {
    x: &'a DenseMatrix,
    norm: Option<BatchNormTape>,
    pre: DenseMatrix,
    hidden: DenseMatrix,
}

impl Mlp {
    pub fn new(in_dim: usize, hidden_dim: usize, out_dim: usize, norm: MlpNorm, rng: &mut RngState) -> Self {
        let hidden = LinearLayer::new(in_dim, hidden_dim, rng);
        let output = LinearLayer::new(hidden_dim, out_dim, rng);
        Self {
            hidden,
            norm: match norm {
                MlpNorm::None => None,
                MlpNorm::Batch => Some(BatchNorm::new(hidden_dim)),
            },
            activation: Activation::Relu,
            output,
        }
    }

    pub fn in_dim(&self) -> usize {
        self.hidden.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim()
    }

    fn check(&self, x: &DenseMatrix) -> Result<()> {
        if x.cols() != self.in_dim() || self.hidden.out_dim() != self.output.in_dim() {
            return Err(Error::shape(
                "mlp_forward",
                format!(
                    "input {:?}, hidden {:?}, output {:?}",
                    x.shape(),
                    self.hidden.weight.shape(),
                    self.output.weight.shape()
                ),
            ));
        }
        if self.activation == Activation::Prelu {
            return Err(Error::InvalidParameter("MLP activation must be identity or relu".into()));
        }
        Ok(())
    }

    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        Ok(self.forward(x)?.0)
    }

    pub fn forward<'a>(&self, x: &'a DenseMatrix) -> Result<(DenseMatrix, MlpTape<'a>)> {
        self.check(x)?;
        let z = self.hidden.forward(x)?;
        let (pre, norm) = match &self.norm {
            Some(bn) => {
                let (y, t) = bn.forward(&z);
                (y, Some(t))
            }
            None => (z, None),
        };
        let hidden = activate(&pre, self.activation, &[]);
        let y = self.output.forward(&hidden)?;
        Ok((y, MlpTape { x, norm, pre, hidden }))
    }

    /// Accumulate parameter gradients; returns the gradient w.r.t. the input.
    pub fn backward(&self, tape: MlpTape<'_>, grad_y: &DenseMatrix, grads: &mut Mlp) -> Result<DenseMatrix> {
        if grad_y.rows() != tape.x.rows() || grad_y.cols() != self.out_dim() {
            return Err(Error::shape(
                "mlp_backward",
                format!("grad is {:?}, expected ({}, {})", grad_y.shape(), tape.x.rows(), self.out_dim()),
            ));
        }
        self.output.backward_params(&tape.hidden, grad_y, &mut grads.output)?;
        let mut g = grad_y.matmul_t(&self.output.weight)?;
        activate_backward(&tape.pre, self.activation, &[], &mut g, &mut []);
        if let (Some(bn), Some(bt)) = (&self.norm, tape.norm) {
            let gbn = grads
                .norm
                .as_mut()
                .ok_or_else(|| Error::shape("mlp_backward", "gradient buffer lacks a norm layer"))?;
            g = bn.backward(bt, &g, gbn);
        }
        self.hidden.backward_params(tape.x, &g, &mut grads.hidden)?;
        g.matmul_t(&self.hidden.weight)
    }
}

impl Parameters for Mlp {
    fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.hidden.slices();
        if let Some(bn) = &self.norm {
            out.push(&bn.gamma);
            out.push(&bn.beta);
        }
        out.extend(self.output.slices());
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.hidden.slices_mut();
        if let Some(bn) = &mut self.norm {
            out.push(&mut bn.gamma);
            out.push(&mut bn.beta);
        }
        out.extend(self.output.slices_mut());
        out
    }
}

/// Saved state from [`l2_normalize_rows`].
#[derive(Debug)]
pub struct NormTape {
    normalized: DenseMatrix,
    norms: Vec<f64>,
}

/// Divide each row by its Euclidean norm.
pub fn l2_normalize_rows(z: &DenseMatrix) -> Result<(DenseMatrix, NormTape)> {
    let mut out = z.clone();
    let mut norms = Vec::with_capacity(z.rows());
    for i in 0..z.rows() {
        let row = out.row_mut(i);
        let norm = dot(row, row).sqrt();
        if !(norm >= MIN_ROW_NORM) {
            return Err(if norm.is_finite() {
                Error::Collapsed { row: i, norm }
            } else {
                Error::NonFinite(format!("row {i} of the normalization input"))
            });
        }
        for v in row.iter_mut() {
            *v /= norm;
        }
        norms.push(norm);
    }
    let tape = NormTape {
        normalized: out.clone(),
        norms,
    };
    Ok((out, tape))
}

/// Backward through row normalization: `g_z = (g - z̄ (z̄·g)) / ‖z‖`.
pub fn l2_normalize_backward(tape: NormTape, grad: &DenseMatrix) -> Result<DenseMatrix> {
    if grad.shape() != tape.normalized.shape() {
        return Err(Error::shape(
            "l2_normalize_backward",
            format!("grad is {:?}, output is {:?}", grad.shape(), tape.normalized.shape()),
        ));
    }
    let mut out = grad.clone();
    for i in 0..out.rows() {
        let zbar = tape.normalized.row(i);
        let proj = dot(zbar, grad.row(i));
        let inv = 1.0 / tape.norms[i];
        for (g, &zb) in out.row_mut(i).iter_mut().zip(zbar) {
            *g = (*g - zb * proj) * inv;
        }
    }
    Ok(out)
}

/// Mean over rows of `‖q̄_i − z̄_i‖²` and its gradient w.r.t. `q̄`.
/// `z_norm` is treated as a constant.
pub fn bootstrap_loss(q_norm: &DenseMatrix, z_norm: &DenseMatrix) -> Result<(f64, DenseMatrix)> {
    if q_norm.shape() != z_norm.shape() {
        return Err(Error::shape(
            "bootstrap_loss",
            format!("{:?} vs {:?}", q_norm.shape(), z_norm.shape()),
        ));
    }
    let n = q_norm.rows();
    if n == 0 {
        return Ok((0.0, q_norm.clone()));
    }
    let scale = 2.0 / n as f64;
    let mut grad = q_norm.clone();
    let mut total = 0.0;
    for i in 0..n {
        let mut row_loss = 0.0;
        for (g, &z) in grad.row_mut(i).iter_mut().zip(z_norm.row(i)) {
            let d = *g - z;
            row_loss += d * d;
            *g = scale * d;
        }
        total += row_loss;
    }
    Ok((total / n as f64, grad))
}

/// Bias-corrected Adam over any [`Parameters`] value.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_hat: f64,
    pub step_count: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl AdamState {
    /// Default betas and epsilon; moments shaped after `params`.
    pub fn new(lr: f64, params: &impl Parameters) -> Self {
        let shapes: Vec<Vec<f64>> = params.slices().iter().map(|s| vec![0.0; s.len()]).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps_hat: 1e-8,
            step_count: 0,
            first_moment: shapes.clone(),
            second_moment: shapes,
        }
    }

    pub fn first_moment(&self) -> &[Vec<f64>] {
        &self.first_moment
    }

    pub fn second_moment(&self) -> &[Vec<f64>] {
        &self.second_moment
    }

    /// One in-place update. Fails without touching anything if a gradient is
    /// non-finite or shapes disagree.
    pub fn step<P: Parameters>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let gs = grads.slices();
        let mut ps = params.slices_mut();
        if gs.len() != ps.len()
            || gs.len() != self.first_moment.len()
            || gs
                .iter()
                .zip(&ps)
                .zip(&self.first_moment)
                .any(|((g, p), m)| g.len() != p.len() || g.len() != m.len())
        {
            return Err(Error::shape("adam_step", "parameter, gradient and moment shapes differ"));
        }
        if let Some(k) = gs.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("gradient of parameter array {k}")));
        }
        self.step_count += 1;
        let t = self.step_count as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (((p, g), m), v) in ps
            .iter_mut()
            .zip(&gs)
            .zip(&mut self.first_moment)
            .zip(&mut self.second_moment)
        {
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                p[j] -= self.lr * m_hat / (v_hat.sqrt() + self.eps_hat);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{Operator, PropagationKind};
    use crate::matrix::SparseMatrix;

    fn identity_p(n: usize) -> PropagationMatrix {
        PropagationMatrix::new(PropagationKind::NormalizedAdjacency, Operator::Sparse(SparseMatrix::identity(n))).unwrap()
    }

    #[test]
    fn glorot_bounds_and_determinism() {
        let a = glorot_init(30, 20, &mut RngState::new(9));
        let b = glorot_init(30, 20, &mut RngState::new(9));
        assert_eq!(a, b);
        let bound = (6.0f64 / 50.0).sqrt();
        assert!(a.as_slice().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn glorot_mean_near_zero() {
        let w = glorot_init(256, 256, &mut RngState::new(1));
        let n = w.as_slice().len() as f64;
        let mean = w.as_slice().iter().sum::<f64>() / n;
        let a = (6.0f64 / 512.0).sqrt();
        let se = (a * a / 3.0 / n).sqrt();
        assert!(mean.abs() < 3.0 * se, "mean {mean} vs se {se}");
    }

    #[test]
    fn gcn_identity_examples() {
        let x = DenseMatrix::from_rows(&[[1.0, -2.0], [3.0, 0.5]]);
        let enc = GcnEncoder::from_layer(
            LinearLayer::from_parts(DenseMatrix::identity(2), vec![0.0; 2]).unwrap(),
            Activation::Identity,
        );
        assert_eq!(enc.apply(&identity_p(2), &x).unwrap(), x);

        let half = crate::graph::normalize_adjacency(
            &SparseMatrix::from_triplets(2, 2, vec![(0, 1, 1.0), (1, 0, 1.0)]).unwrap(),
        )
        .unwrap();
        let h = enc.apply(&half, &DenseMatrix::identity(2)).unwrap();
        assert_eq!(h, half.to_dense());
    }

    #[test]
    fn gcn_zero_grad_and_closed_form() {
        let mut rng = RngState::new(2);
        let x = glorot_init(5, 3, &mut rng);
        let p = identity_p(5);
        let enc = GcnEncoder::new(3, 4, Activation::Prelu, &mut rng);
        let (_, tape) = enc.forward(&p, &x).unwrap();
        let mut grads = enc.zeros_like();
        enc.backward(tape, &DenseMatrix::zeros(5, 4), &mut grads).unwrap();
        assert!(grads.slices().iter().all(|s| s.iter().all(|&v| v == 0.0)));

        let lin = GcnEncoder::new(3, 4, Activation::Identity, &mut rng);
        let g = glorot_init(5, 4, &mut rng);
        let (_, tape) = lin.forward(&p, &x).unwrap();
        let mut grads = lin.zeros_like();
        lin.backward(tape, &g, &mut grads).unwrap();
        assert!(grads.layer.weight.max_abs_diff(&x.t_matmul(&g).unwrap()) < 1e-14);
    }

    #[test]
    fn gcn_shape_errors() {
        let mut rng = RngState::new(0);
        let enc = GcnEncoder::new(3, 2, Activation::Relu, &mut rng);
        assert!(enc.apply(&identity_p(4), &DenseMatrix::zeros(3, 3)).is_err());
        assert!(enc.apply(&identity_p(3), &DenseMatrix::zeros(3, 4)).is_err());
    }

    #[test]
    fn mlp_examples() {
        let mut rng = RngState::new(3);
        let mut mlp = Mlp::new(3, 4, 2, MlpNorm::None, &mut rng);
        mlp.fill_zero();
        mlp.output.bias = vec![0.5, -1.0];
        let y = mlp.apply(&glorot_init(6, 3, &mut rng)).unwrap();
        for i in 0..6 {
            assert_eq!(y.row(i), &[0.5, -1.0]);
        }

        let id = Mlp {
            hidden: LinearLayer::from_parts(DenseMatrix::identity(3), vec![0.0; 3]).unwrap(),
            norm: None,
            activation: Activation::Identity,
            output: LinearLayer::from_parts(DenseMatrix::identity(3), vec![0.0; 3]).unwrap(),
        };
        let x = glorot_init(4, 3, &mut rng);
        assert_eq!(id.apply(&x).unwrap(), x);
        assert!(id.apply(&DenseMatrix::zeros(4, 2)).is_err());
    }

    #[test]
    fn batch_norm_output_is_standardized() {
        let mut rng = RngState::new(8);
        let bn = BatchNorm::new(3);
        let x = glorot_init(50, 3, &mut rng).scaled(7.0);
        let (y, _) = bn.forward(&x);
        for (c, s) in y.column_sums().iter().enumerate() {
            assert!(s.abs() < 1e-10, "column {c} mean {s}");
        }
    }

    #[test]
    fn normalize_examples() {
        let (y, _) = l2_normalize_rows(&DenseMatrix::from_rows(&[[3.0, 4.0], [0.0, 1.0]])).unwrap();
        assert_eq!(y, DenseMatrix::from_rows(&[[0.6, 0.8], [0.0, 1.0]]));
        let err = l2_normalize_rows(&DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]])).unwrap_err();
        assert!(matches!(err, Error::Collapsed { row: 1, .. }));
    }

    #[test]
    fn loss_examples() {
        let q = DenseMatrix::from_rows(&[[1.0, 0.0], [0.6, 0.8]]);
        assert_eq!(bootstrap_loss(&q, &q).unwrap().0, 0.0);
        let (l, _) = bootstrap_loss(&DenseMatrix::from_rows(&[[1.0, 0.0]]), &DenseMatrix::from_rows(&[[0.0, 1.0]])).unwrap();
        assert_eq!(l, 2.0);
        assert!(bootstrap_loss(&q, &DenseMatrix::zeros(3, 2)).is_err());
    }

    #[derive(Clone)]
    struct Vector(Vec<f64>);

    impl Parameters for Vector {
        fn slices(&self) -> Vec<&[f64]> {
            vec![&self.0]
        }
        fn slices_mut(&mut self) -> Vec<&mut [f64]> {
            vec![&mut self.0]
        }
    }

    #[test]
    fn adam_examples() {
        let mut w = Vector(vec![1.0, -2.0, 0.5]);
        let mut opt = AdamState::new(0.01, &w);
        opt.step(&mut w, &Vector(vec![0.0; 3])).unwrap();
        assert_eq!(w.0, vec![1.0, -2.0, 0.5]);

        let mut w = Vector(vec![1.0, -2.0, 0.5]);
        let mut opt = AdamState::new(0.01, &w);
        opt.step(&mut w, &Vector(vec![3.0, -0.2, 1e-3])).unwrap();
        for (after, before) in w.0.iter().zip([1.0, -2.0, 0.5]) {
            assert!(((after - before as f64).abs() - 0.01).abs() < 1e-4);
        }
        assert!(w.0[0] < 1.0 && w.0[1] > -2.0);

        let mut w = Vector(vec![1.0, 1.0]);
        let mut opt = AdamState::new(0.05, &w);
        for _ in 0..200 {
            let g = Vector(w.0.iter().map(|v| 2.0 * v).collect());
            opt.step(&mut w, &g).unwrap();
        }
        assert!(w.0.iter().map(|v| v * v).sum::<f64>().sqrt() < 1e-2);

        let before = w.0.clone();
        assert!(opt.step(&mut w, &Vector(vec![f64::NAN, 0.0])).is_err());
        assert_eq!(w.0, before);
    }
}

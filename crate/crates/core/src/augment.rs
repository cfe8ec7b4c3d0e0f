//! Stochastic views of a graph.
//!
//! A view pairs a (possibly corrupted) feature matrix with a propagation
//! operator. Feature corruption is re-sampled on every call; the operator is
//! a deterministic function of the adjacency configuration and is computed
//! once per [`ViewSource`].

use std::borrow::Cow;
use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{degree_vector, normalize_adjacency, Graph, Operator, PropagationKind, PropagationMatrix};
use crate::matrix::{DenseMatrix, SparseMatrix};
use crate::rng::RngState;

/// Largest graph for which [`DiffusionSolver::Auto`] picks the dense solve.
pub const EXACT_PPR_MAX_NODES: usize = 5000;

/// Truncation target used when no series order is configured.
pub const AUTO_SERIES_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NodeAugmentationKind {
    Identity,
    NodeDropout,
    NodeFeatureDropout,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeAugmentation {
    pub kind: NodeAugmentationKind,
    #[serde(default)]
    pub rate: f64,
}

impl NodeAugmentation {
    pub const IDENTITY: NodeAugmentation = NodeAugmentation {
        kind: NodeAugmentationKind::Identity,
        rate: 0.0,
    };

    pub fn node_dropout(rate: f64) -> Self {
        Self {
            kind: NodeAugmentationKind::NodeDropout,
            rate,
        }
    }

    pub fn feature_dropout(rate: f64) -> Self {
        Self {
            kind: NodeAugmentationKind::NodeFeatureDropout,
            rate,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_rate(self.rate)
    }

    /// Short tag used in view labels: `IN`, `ND` or `NFD`.
    pub fn tag(&self) -> &'static str {
        match self.kind {
            NodeAugmentationKind::Identity => "IN",
            NodeAugmentationKind::NodeDropout => "ND",
            NodeAugmentationKind::NodeFeatureDropout => "NFD",
        }
    }

    pub fn apply(&self, x: &DenseMatrix, rng: &mut RngState) -> Result<DenseMatrix> {
        match self.kind {
            NodeAugmentationKind::Identity => Ok(x.clone()),
            NodeAugmentationKind::NodeDropout => node_dropout(x, self.rate, rng),
            NodeAugmentationKind::NodeFeatureDropout => node_feature_dropout(x, self.rate, rng),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DiffusionSolver {
    /// Dense solve up to [`EXACT_PPR_MAX_NODES`] nodes, truncated series beyond.
    Auto,
    Exact,
    Iterative,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdjacencyAugmentation {
    pub kind: PropagationKind,
    /// PPR teleport probability.
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Heat-kernel diffusion time.
    #[serde(default = "default_t")]
    pub t: f64,
    /// Series truncation order; chosen from [`AUTO_SERIES_TOLERANCE`] when unset.
    #[serde(default)]
    pub order: Option<usize>,
    #[serde(default = "default_solver")]
    pub solver: DiffusionSolver,
    /// Entries below this threshold are dropped after diffusion.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    /// Keep only the `top_k` largest entries per row instead of thresholding.
    #[serde(default)]
    pub top_k: Option<usize>,
}

fn default_alpha() -> f64 {
    0.15
}
fn default_t() -> f64 {
    5.0
}
fn default_solver() -> DiffusionSolver {
    DiffusionSolver::Auto
}
fn default_epsilon() -> f64 {
    1e-4
}

impl Default for AdjacencyAugmentation {
    fn default() -> Self {
        Self::normalized()
    }
}

impl AdjacencyAugmentation {
    pub fn normalized() -> Self {
        Self {
            kind: PropagationKind::NormalizedAdjacency,
            alpha: default_alpha(),
            t: default_t(),
            order: None,
            solver: default_solver(),
            epsilon: default_epsilon(),
            top_k: None,
        }
    }

    pub fn ppr(alpha: f64) -> Self {
        Self {
            kind: PropagationKind::Ppr,
            alpha,
            ..Self::normalized()
        }
    }

    pub fn heat(t: f64) -> Self {
        Self {
            kind: PropagationKind::Heat,
            t,
            ..Self::normalized()
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            PropagationKind::NormalizedAdjacency => {}
            PropagationKind::Ppr => check_alpha(self.alpha)?,
            PropagationKind::Heat => check_t(self.t)?,
        }
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "sparsification epsilon must be >= 0, got {}",
                self.epsilon
            )));
        }
        if self.order == Some(0) || self.top_k == Some(0) {
            return Err(Error::InvalidParameter("series order and top_k must be >= 1".into()));
        }
        Ok(())
    }

    /// `ADJ` for the normalized adjacency, `DIFF` otherwise.
    pub fn tag(&self) -> &'static str {
        match self.kind {
            PropagationKind::NormalizedAdjacency => "ADJ",
            _ => "DIFF",
        }
    }

    /// Hashable identity of the fields that affect the resulting operator.
    fn key(&self) -> AdjacencyKey {
        match self.kind {
            PropagationKind::NormalizedAdjacency => AdjacencyKey {
                kind: self.kind,
                ..AdjacencyKey::default()
            },
            _ => AdjacencyKey {
                kind: self.kind,
                param: if self.kind == PropagationKind::Ppr {
                    self.alpha.to_bits()
                } else {
                    self.t.to_bits()
                },
                order: self.order,
                solver: Some(self.solver),
                epsilon: self.epsilon.to_bits(),
                top_k: self.top_k,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct AdjacencyKey {
    kind: PropagationKind,
    param: u64,
    order: Option<usize>,
    solver: Option<DiffusionSolver>,
    epsilon: u64,
    top_k: Option<usize>,
}

impl Default for AdjacencyKey {
    fn default() -> Self {
        Self {
            kind: PropagationKind::NormalizedAdjacency,
            param: 0,
            order: None,
            solver: None,
            epsilon: 0,
            top_k: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ViewConfig {
    pub node: NodeAugmentation,
    #[serde(default)]
    pub adjacency: AdjacencyAugmentation,
}

impl ViewConfig {
    pub fn new(node: NodeAugmentation, adjacency: AdjacencyAugmentation) -> Self {
        Self { node, adjacency }
    }

    pub fn identity() -> Self {
        Self::new(NodeAugmentation::IDENTITY, AdjacencyAugmentation::normalized())
    }

    pub fn validate(&self) -> Result<()> {
        self.node.validate()?;
        self.adjacency.validate()
    }

    /// Label in the `NFD + ADJ` style.
    pub fn label(&self) -> String {
        format!("{} + {}", self.node.tag(), self.adjacency.tag())
    }
}

fn check_rate(delta: f64) -> Result<()> {
    if (0.0..1.0).contains(&delta) {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("dropout rate must lie in [0, 1), got {delta}")))
    }
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("teleport probability must lie in (0, 1], got {alpha}")))
    }
}

fn check_t(t: f64) -> Result<()> {
    if t > 0.0 && t.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("diffusion time must be > 0, got {t}")))
    }
}

/// Zero each entry independently with probability `delta` and scale the
/// survivors by `1 / (1 - delta)`.
///
/// Entries that are already zero stay zero whatever the draw, so only the
/// nonzero entries consume randomness.
pub fn node_feature_dropout(x: &DenseMatrix, delta: f64, rng: &mut RngState) -> Result<DenseMatrix> {
    check_rate(delta)?;
    let mut out = x.clone();
    if delta == 0.0 {
        return Ok(out);
    }
    let keep = 1.0 - delta;
    let scale = 1.0 / keep;
    for v in out.as_mut_slice() {
        if *v != 0.0 {
            *v = if rng.bernoulli(keep) { *v * scale } else { 0.0 };
        }
    }
    Ok(out)
}

/// Zero whole rows with probability `delta`; kept rows are scaled by
/// `1 / (1 - delta)`.
pub fn node_dropout(x: &DenseMatrix, delta: f64, rng: &mut RngState) -> Result<DenseMatrix> {
    check_rate(delta)?;
    let mut out = x.clone();
    if delta == 0.0 {
        return Ok(out);
    }
    let keep = 1.0 - delta;
    let scale = 1.0 / keep;
    for i in 0..out.rows() {
        let kept = rng.bernoulli(keep);
        for v in out.row_mut(i) {
            *v = if kept { *v * scale } else { 0.0 };
        }
    }
    Ok(out)
}

fn positive_degrees(a: &SparseMatrix) -> Result<Vec<f64>> {
    if a.rows() != a.cols() {
        return Err(Error::shape("diffusion", format!("adjacency is {:?}", a.shape())));
    }
    let deg = degree_vector(a);
    if let Some(node) = deg.iter().position(|&d| d <= 0.0) {
        return Err(Error::ZeroDegree { node });
    }
    Ok(deg)
}

/// Smallest `K` with `(1-α)^{K+1} / α` below `tol`.
pub fn ppr_order_for_tolerance(alpha: f64, tol: f64) -> usize {
    if alpha >= 1.0 {
        return 1;
    }
    let k = ((tol * alpha).ln() / (1.0 - alpha).ln()).ceil() - 1.0;
    (k.max(1.0)) as usize
}

/// Smallest `K` whose heat-kernel Taylor tail `e^{-t} Σ_{k>K} t^k/k!` is
/// below `tol`.
pub fn heat_order_for_tolerance(t: f64, tol: f64) -> usize {
    let mut k = 1;
    while heat_tail_bound(t, k) >= tol && k < 10_000 {
        k += 1;
    }
    k
}

/// `e^{-t} Σ_{k>K} t^k / k!`, the mass missing from a series truncated at `K`.
pub fn heat_tail_bound(t: f64, order: usize) -> f64 {
    let mut term = (-t).exp();
    let mut head = term;
    for k in 1..=order {
        term *= t / k as f64;
        head += term;
    }
    // Sum the tail directly; 1 - head loses everything below ~1e-16.
    let mut tail = 0.0;
    let mut k = order + 1;
    let mut next = term * t / k as f64;
    while next > 0.0 && (next > tail * 1e-17 || k < order + 10) {
        tail += next;
        k += 1;
        next *= t / k as f64;
        if k > order + 10_000 {
            break;
        }
    }
    let _ = head;
    tail
}

/// Personalized PageRank diffusion `α (I − (1−α) D^{-1/2} A D^{-1/2})^{-1}`.
///
/// The iterative solver returns the truncated series
/// `α Σ_{k=0}^{K} ((1−α) M)^k`. The output is symmetrized, so it is exactly
/// symmetric for symmetric `A`.
pub fn ppr_diffusion(
    a: &SparseMatrix,
    alpha: f64,
    solver: DiffusionSolver,
    order: Option<usize>,
) -> Result<DenseMatrix> {
    check_alpha(alpha)?;
    let deg = positive_degrees(a)?;
    let n = a.rows();
    let inv_sqrt: Vec<f64> = deg.iter().map(|d| 1.0 / d.sqrt()).collect();
    if alpha == 1.0 {
        return Ok(DenseMatrix::identity(n));
    }
    let exact = match solver {
        DiffusionSolver::Exact => true,
        DiffusionSolver::Iterative => false,
        DiffusionSolver::Auto => n <= EXACT_PPR_MAX_NODES,
    };
    let s = if exact {
        let mut b = DMatrix::<f64>::identity(n, n);
        for i in 0..n {
            let (cols, vals) = a.row(i);
            for (&j, &v) in cols.iter().zip(vals) {
                b[(i, j)] -= (1.0 - alpha) * v * (inv_sqrt[i] * inv_sqrt[j]);
            }
        }
        let inv = b
            .cholesky()
            .ok_or_else(|| Error::InvalidParameter("PPR system is not positive definite".into()))?
            .inverse();
        let mut out = DenseMatrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                out.set(i, j, alpha * inv[(i, j)]);
            }
        }
        out
    } else {
        let k = order.unwrap_or_else(|| ppr_order_for_tolerance(alpha, AUTO_SERIES_TOLERANCE));
        let m = scaled_adjacency(a, |i, j| (1.0 - alpha) * inv_sqrt[i] * inv_sqrt[j]);
        // Horner: S_0 = αI, S_{j+1} = αI + (1−α) M S_j.
        let mut s = DenseMatrix::identity(n).scaled(alpha);
        for _ in 0..k {
            s = m.spmm(&s)?;
            for i in 0..n {
                s.as_mut_slice()[i * n + i] += alpha;
            }
        }
        s
    };
    Ok(symmetrize(s))
}

/// Heat-kernel diffusion `exp(t A D^{-1} − t)` as the Taylor series
/// `e^{-t} Σ_{k=0}^{K} (t^k / k!) T^k` with `T = A D^{-1}`.
///
/// `T` is column-stochastic, so every column of the result sums to
/// `1 − heat_tail_bound(t, K)`.
pub fn heat_diffusion(a: &SparseMatrix, t: f64, order: Option<usize>) -> Result<DenseMatrix> {
    check_t(t)?;
    let deg = positive_degrees(a)?;
    let n = a.rows();
    let k_max = order.unwrap_or_else(|| heat_order_for_tolerance(t, AUTO_SERIES_TOLERANCE));
    let transition = scaled_adjacency(a, |_, j| 1.0 / deg[j]);
    let mut term = DenseMatrix::identity(n);
    let mut sum = term.clone();
    for k in 1..=k_max {
        term = transition.spmm(&term)?;
        term.scale(t / k as f64);
        sum.add_assign(&term)?;
    }
    sum.scale((-t).exp());
    Ok(sum)
}

fn scaled_adjacency(a: &SparseMatrix, weight: impl Fn(usize, usize) -> f64) -> SparseMatrix {
    let mut values = Vec::with_capacity(a.nnz());
    for i in 0..a.rows() {
        let (cols, vals) = a.row(i);
        values.extend(cols.iter().zip(vals).map(|(&j, &v)| v * weight(i, j)));
    }
    SparseMatrix::from_csr(
        a.rows(),
        a.cols(),
        a.row_offsets().to_vec(),
        a.col_indices().to_vec(),
        values,
    )
    .expect("rescaling preserves CSR structure")
}

fn symmetrize(mut s: DenseMatrix) -> DenseMatrix {
    let n = s.rows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (s.get(i, j) + s.get(j, i));
            s.set(i, j, v);
            s.set(j, i, v);
        }
    }
    s
}

fn check_diffusion_input(s: &DenseMatrix) -> Result<()> {
    if s.rows() != s.cols() {
        return Err(Error::shape("sparsify", format!("matrix is {:?}", s.shape())));
    }
    if let Some(pos) = s.as_slice().iter().position(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "diffusion entry ({}, {}) is {}; sparsification needs non-negative values",
            pos / s.cols(),
            pos % s.cols(),
            s.as_slice()[pos]
        )));
    }
    Ok(())
}

/// Drop entries below `epsilon` and rescale each row back to its original
/// sum. A row with every entry below `epsilon` keeps its largest entry.
/// Rows that lose nothing are copied unchanged.
pub fn sparsify(s: &DenseMatrix, epsilon: f64) -> Result<SparseMatrix> {
    check_diffusion_input(s)?;
    if !(epsilon >= 0.0) {
        return Err(Error::InvalidParameter(format!("epsilon must be >= 0, got {epsilon}")));
    }
    sparsify_rows(s, |row| {
        let kept: Vec<usize> = (0..row.len()).filter(|&j| row[j] >= epsilon && row[j] != 0.0).collect();
        if kept.is_empty() {
            argmax(row).into_iter().collect()
        } else {
            kept
        }
    })
}

/// Keep the `k` largest entries of each row (ties toward the lower column)
/// and rescale each row back to its original sum.
pub fn sparsify_top_k(s: &DenseMatrix, k: usize) -> Result<SparseMatrix> {
    check_diffusion_input(s)?;
    if k == 0 {
        return Err(Error::InvalidParameter("top_k must be >= 1".into()));
    }
    sparsify_rows(s, |row| {
        let mut order: Vec<usize> = (0..row.len()).filter(|&j| row[j] != 0.0).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        order.truncate(k);
        order.sort_unstable();
        order
    })
}

fn argmax(row: &[f64]) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (j, &v) in row.iter().enumerate() {
        if v > 0.0 && best.is_none_or(|b| v > row[b]) {
            best = Some(j);
        }
    }
    best
}

fn sparsify_rows(s: &DenseMatrix, select: impl Fn(&[f64]) -> Vec<usize>) -> Result<SparseMatrix> {
    let n = s.rows();
    let mut row_offsets = Vec::with_capacity(n + 1);
    let mut col_indices = Vec::new();
    let mut values = Vec::new();
    row_offsets.push(0);
    for i in 0..n {
        let row = s.row(i);
        let kept = select(row);
        let total: f64 = row.iter().sum();
        let kept_total: f64 = kept.iter().map(|&j| row[j]).sum();
        let nonzeros = row.iter().filter(|&&v| v != 0.0).count();
        let factor = if kept.len() == nonzeros || kept_total == 0.0 {
            1.0
        } else {
            total / kept_total
        };
        for j in kept {
            col_indices.push(j);
            values.push(row[j] * factor);
        }
        row_offsets.push(col_indices.len());
    }
    SparseMatrix::from_csr(n, s.cols(), row_offsets, col_indices, values)
}

/// Build the propagation operator described by `config` on `adjacency`.
pub fn build_propagation(adjacency: &SparseMatrix, config: &AdjacencyAugmentation) -> Result<Arc<PropagationMatrix>> {
    config.validate()?;
    let dense = match config.kind {
        PropagationKind::NormalizedAdjacency => return normalize_adjacency(adjacency),
        PropagationKind::Ppr => ppr_diffusion(adjacency, config.alpha, config.solver, config.order)?,
        PropagationKind::Heat => heat_diffusion(adjacency, config.t, config.order)?,
    };
    let sparse = match config.top_k {
        Some(k) => sparsify_top_k(&dense, k)?,
        None => sparsify(&dense, config.epsilon)?,
    };
    Ok(Arc::new(PropagationMatrix::new(config.kind, Operator::Sparse(sparse))?))
}

/// One sampled view: features plus the operator to propagate them with.
#[derive(Debug, Clone)]
pub struct View<'a> {
    pub features: Cow<'a, DenseMatrix>,
    pub propagation: Arc<PropagationMatrix>,
}

/// A graph with row-normalized features and a cache of propagation
/// operators. Shareable across threads; the cache is the only mutable part.
#[derive(Debug)]
pub struct ViewSource {
    graph: Graph,
    cache: Mutex<HashMap<AdjacencyKey, Arc<PropagationMatrix>>>,
}

impl ViewSource {
    /// `graph` is used as given; normalize its features first if needed.
    pub fn new(graph: Graph) -> Self {
        Self {
            graph,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn propagation(&self, config: &AdjacencyAugmentation) -> Result<Arc<PropagationMatrix>> {
        let key = config.key();
        let mut cache = self.cache.lock().unwrap_or_else(|p| p.into_inner());
        if let Some(p) = cache.get(&key) {
            return Ok(Arc::clone(p));
        }
        let p = build_propagation(self.graph.adjacency(), config)?;
        cache.insert(key, Arc::clone(&p));
        Ok(p)
    }

    /// Sample a view: fresh node-level randomness, cached operator.
    pub fn make_view(&self, config: &ViewConfig, rng: &mut RngState) -> Result<View<'_>> {
        config.validate()?;
        let propagation = self.propagation(&config.adjacency)?;
        let x = self.graph.features();
        let features = match config.node.kind {
            NodeAugmentationKind::Identity => Cow::Borrowed(x),
            _ if config.node.rate == 0.0 => Cow::Borrowed(x),
            _ => Cow::Owned(config.node.apply(x, rng)?),
        };
        Ok(View {
            features,
            propagation,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn path_graph(n: usize) -> SparseMatrix {
        let t = (0..n - 1).flat_map(|i| [(i, i + 1, 1.0), (i + 1, i, 1.0)]).collect();
        SparseMatrix::from_triplets(n, n, t).unwrap()
    }

    fn pair() -> SparseMatrix {
        path_graph(2)
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let x = DenseMatrix::from_rows(&[[1.0, 2.0], [0.0, 3.0]]);
        let mut rng = RngState::new(0);
        assert_eq!(node_feature_dropout(&x, 0.0, &mut rng).unwrap(), x);
        assert_eq!(node_dropout(&x, 0.0, &mut rng).unwrap(), x);
    }

    #[test]
    fn dropout_rejects_bad_rates() {
        let x = DenseMatrix::zeros(1, 1);
        let mut rng = RngState::new(0);
        for bad in [-0.1, 1.0, 1.5, f64::NAN] {
            assert!(node_feature_dropout(&x, bad, &mut rng).is_err());
            assert!(node_dropout(&x, bad, &mut rng).is_err());
        }
    }

    #[test]
    fn kept_entries_are_rescaled() {
        let x = DenseMatrix::filled(20, 20, 1.0);
        let mut rng = RngState::new(4);
        let out = node_feature_dropout(&x, 0.5, &mut rng).unwrap();
        assert!(out.as_slice().iter().all(|&v| v == 0.0 || v == 2.0));
        assert!(out.as_slice().contains(&2.0) && out.as_slice().contains(&0.0));
    }

    #[test]
    fn node_dropout_rows_are_all_or_nothing() {
        let mut rng = RngState::new(5);
        let x = DenseMatrix::from_vec(30, 4, (0..120).map(|v| v as f64 + 1.0).collect()).unwrap();
        let out = node_dropout(&x, 0.3, &mut rng).unwrap();
        for i in 0..30 {
            let row = out.row(i);
            let zero = row.iter().all(|&v| v == 0.0);
            let scaled = row.iter().zip(x.row(i)).all(|(a, b)| (a - b / 0.7).abs() < 1e-12);
            assert!(zero || scaled, "row {i} is neither dropped nor scaled");
        }
    }

    #[test]
    fn ppr_alpha_one_is_identity() {
        let s = ppr_diffusion(&path_graph(4), 1.0, DiffusionSolver::Exact, None).unwrap();
        assert_eq!(s, DenseMatrix::identity(4));
    }

    #[test]
    fn ppr_two_node_closed_form() {
        // (I - 0.8 [[0,1],[1,0]])^{-1} = [[1, 0.8], [0.8, 1]] / 0.36, times 0.2.
        let expect = DenseMatrix::from_rows(&[[0.2 / 0.36, 0.16 / 0.36], [0.16 / 0.36, 0.2 / 0.36]]);
        let s = ppr_diffusion(&pair(), 0.2, DiffusionSolver::Exact, None).unwrap();
        assert!(s.max_abs_diff(&expect) < 1e-12);
        assert!((s.get(0, 0) - 0.5556).abs() < 1e-3 && (s.get(0, 1) - 0.4444).abs() < 1e-3);
    }

    #[test]
    fn diffusion_errors() {
        let isolated = SparseMatrix::from_triplets(3, 3, vec![(0, 1, 1.0), (1, 0, 1.0)]).unwrap();
        assert!(matches!(
            ppr_diffusion(&isolated, 0.2, DiffusionSolver::Exact, None),
            Err(Error::ZeroDegree { node: 2 })
        ));
        assert!(matches!(heat_diffusion(&isolated, 1.0, None), Err(Error::ZeroDegree { node: 2 })));
        for bad in [0.0, -0.1, 1.5] {
            assert!(ppr_diffusion(&pair(), bad, DiffusionSolver::Exact, None).is_err());
        }
        assert!(heat_diffusion(&pair(), 0.0, None).is_err());
        assert!(heat_diffusion(&pair(), -1.0, None).is_err());
    }

    #[test]
    fn heat_examples() {
        let one = SparseMatrix::from_triplets(1, 1, vec![(0, 0, 1.0)]).unwrap();
        for t in [0.5, 1.0, 7.0] {
            let s = heat_diffusion(&one, t, Some(60)).unwrap();
            assert!((s.get(0, 0) - 1.0).abs() < 1e-12);
        }
        let s = heat_diffusion(&pair(), 1.0, Some(30)).unwrap();
        let e = (-1.0f64).exp();
        let expect = DenseMatrix::from_rows(&[[e * 1f64.cosh(), e * 1f64.sinh()], [e * 1f64.sinh(), e * 1f64.cosh()]]);
        assert!(s.max_abs_diff(&expect) < 1e-12);
        assert!((s.get(0, 0) - 0.5677).abs() < 1e-3 && (s.get(0, 1) - 0.4323).abs() < 1e-3);
    }

    #[test]
    fn tail_bound_matches_direct_sum() {
        // Direct: 1 - e^{-t} Σ_{k≤K} t^k/k! for a case where cancellation is harmless.
        let (t, k) = (2.0f64, 3usize);
        let head: f64 = (0..=k).map(|j| t.powi(j as i32) / (1..=j).product::<usize>() as f64).sum();
        let direct = 1.0 - (-t).exp() * head;
        assert!((heat_tail_bound(t, k) - direct).abs() < 1e-14);
        assert!(heat_tail_bound(5.0, 40) < 1e-15);
    }

    #[test]
    fn sparsify_examples() {
        let s = DenseMatrix::from_rows(&[[0.9, 0.1], [0.1, 0.9]]);
        let out = sparsify(&s, 0.2).unwrap().to_dense();
        assert_eq!(out, DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]));
        assert_eq!(sparsify(&s, 0.0).unwrap().to_dense(), s);
        let tiny = DenseMatrix::from_rows(&[[0.01, 0.03], [0.02, 0.0]]);
        let out = sparsify(&tiny, 0.5).unwrap().to_dense();
        assert_eq!(out.row(0), &[0.0, 0.04]);
        assert_eq!(out.row(1), &[0.02, 0.0]);
        assert!(sparsify(&DenseMatrix::from_rows(&[[-0.1, 1.0], [0.0, 1.0]]), 0.1).is_err());
    }

    #[test]
    fn top_k_keeps_largest() {
        let s = DenseMatrix::from_rows(&[[0.5, 0.2, 0.3], [0.1, 0.1, 0.8], [0.0, 0.0, 1.0]]);
        let out = sparsify_top_k(&s, 2).unwrap().to_dense();
        assert!((out.get(0, 0) - 0.625).abs() < 1e-15 && (out.get(0, 2) - 0.375).abs() < 1e-15);
        assert_eq!(out.get(0, 1), 0.0);
        assert_eq!(out.get(1, 1), 0.0);
        assert_eq!(out.row(2), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn auto_orders() {
        let k = ppr_order_for_tolerance(0.15, 1e-6);
        assert!(0.85f64.powi(k as i32 + 1) / 0.15 < 1e-6);
        assert!(0.85f64.powi(k as i32) / 0.15 >= 1e-6);
        let k = heat_order_for_tolerance(5.0, 1e-6);
        assert!(heat_tail_bound(5.0, k) < 1e-6 && heat_tail_bound(5.0, k - 1) >= 1e-6);
    }

    #[test]
    fn identity_view_borrows_features() {
        let x = DenseMatrix::from_rows(&[[1.0, 0.0], [0.0, 1.0]]);
        let source = ViewSource::new(Graph::new(x.clone(), pair()).unwrap());
        let mut rng = RngState::new(0);
        let v = source.make_view(&ViewConfig::identity(), &mut rng).unwrap();
        assert!(matches!(v.features, Cow::Borrowed(_)));
        assert_eq!(*v.features, x);
        assert_eq!(v.propagation.kind(), PropagationKind::NormalizedAdjacency);
    }
}

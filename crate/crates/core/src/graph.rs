//! Graph data model, the portable on-disk dataset format, and the
//! deterministic preprocessing applied before training.
//!
//! A dataset directory holds five UTF-8 files:
//!
//! | file           | content                                                  |
//! |----------------|----------------------------------------------------------|
//! | `meta.json`    | `{"num_nodes": n, "num_features": d, "num_classes": c}`  |
//! | `edges.tsv`    | `src<TAB>dst`, 0-indexed, each undirected edge once      |
//! | `features.tsv` | `node<TAB>feature<TAB>value`; omitted entries are zero   |
//! | `labels.tsv`   | `node<TAB>class`, one line per node                      |
//! | `splits.json`  | `{"train": [...], "val": [...], "test": [...]}`          |

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::{DenseMatrix, SparseMatrix};

/// An undirected attributed graph.
#[derive(Debug, Clone, PartialEq)]
pub struct Graph {
    features: DenseMatrix,
    adjacency: SparseMatrix,
}

impl Graph {
    /// Checks that the adjacency is square, matches the feature rows, is
    /// symmetric and has an empty diagonal.
    pub fn new(features: DenseMatrix, adjacency: SparseMatrix) -> Result<Self> {
        let n = features.rows();
        if adjacency.shape() != (n, n) {
            return Err(Error::shape(
                "Graph::new",
                format!("adjacency {:?} for {n} nodes", adjacency.shape()),
            ));
        }
        if !adjacency.is_symmetric() {
            return Err(Error::InvalidParameter("adjacency must be symmetric".into()));
        }
        if let Some(i) = (0..n).find(|&i| adjacency.get(i, i) != 0.0) {
            return Err(Error::InvalidParameter(format!("self-loop on node {i}")));
        }
        features.ensure_finite("node features")?;
        Ok(Self {
            features,
            adjacency,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.features.rows()
    }

    pub fn num_features(&self) -> usize {
        self.features.cols()
    }

    pub fn features(&self) -> &DenseMatrix {
        &self.features
    }

    pub fn adjacency(&self) -> &SparseMatrix {
        &self.adjacency
    }

    /// Number of undirected edges.
    pub fn num_edges(&self) -> usize {
        self.adjacency.nnz() / 2
    }

    /// Same graph with row-normalized features.
    pub fn with_normalized_features(&self) -> Result<Graph> {
        Ok(Graph {
            features: row_normalize_features(&self.features)?,
            adjacency: self.adjacency.clone(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub name: String,
    pub graph: Graph,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub splits: Splits,
}

impl LabeledDataset {
    pub fn new(
        name: impl Into<String>,
        graph: Graph,
        labels: Vec<usize>,
        num_classes: usize,
        splits: Splits,
    ) -> Result<Self> {
        let n = graph.num_nodes();
        if labels.len() != n {
            return Err(Error::shape(
                "LabeledDataset::new",
                format!("{} labels for {n} nodes", labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
            return Err(Error::InvalidParameter(format!(
                "label {bad} outside {num_classes} classes"
            )));
        }
        let mut seen = vec![false; n];
        for (name, idx) in [("train", &splits.train), ("val", &splits.val), ("test", &splits.test)] {
            for &i in idx {
                if i >= n {
                    return Err(Error::InvalidParameter(format!(
                        "{name} split index {i} outside {n} nodes"
                    )));
                }
                if seen[i] {
                    return Err(Error::InvalidParameter(format!(
                        "node {i} appears twice across splits"
                    )));
                }
                seen[i] = true;
            }
        }
        Ok(Self {
            name: name.into(),
            graph,
            labels,
            num_classes,
            splits,
        })
    }

    pub fn labels_of(&self, idx: &[usize]) -> Vec<usize> {
        idx.iter().map(|&i| self.labels[i]).collect()
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    num_nodes: usize,
    num_features: usize,
    num_classes: usize,
}

/// Facts gathered while loading that do not make the input invalid.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LoadReport {
    /// Non-empty lines in `edges.tsv`.
    pub edge_lines: usize,
    /// Distinct undirected edges after merging duplicates and reversals.
    pub unique_edges: usize,
    /// Nodes with no incident edge.
    pub isolated_nodes: usize,
}

impl LoadReport {
    pub fn warnings(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.edge_lines != self.unique_edges {
            out.push(format!(
                "{} duplicate or reversed edge lines merged ({} lines, {} edges)",
                self.edge_lines - self.unique_edges,
                self.edge_lines,
                self.unique_edges
            ));
        }
        if self.isolated_nodes > 0 {
            out.push(format!("{} isolated nodes", self.isolated_nodes));
        }
        out
    }
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<LabeledDataset> {
    load_dataset_with_report(dir).map(|(d, _)| d)
}

pub fn load_dataset_with_report(dir: impl AsRef<Path>) -> Result<(LabeledDataset, LoadReport)> {
    let dir = dir.as_ref();
    if !dir.is_dir() {
        return Err(Error::io(
            dir,
            std::io::Error::new(std::io::ErrorKind::NotFound, "dataset directory not found"),
        ));
    }
    let meta_path = dir.join("meta.json");
    let meta: Meta = serde_json::from_str(&read(&meta_path)?)
        .map_err(|e| Error::data(&meta_path, e.line(), e.to_string()))?;
    let n = meta.num_nodes;

    let edges_path = dir.join("edges.tsv");
    let mut edge_set = BTreeSet::new();
    let mut edge_lines = 0;
    for (line_no, fields) in tsv_lines(&edges_path, &read(&edges_path)?, 2)? {
        let src = parse_index(&edges_path, line_no, fields[0], n, "node")?;
        let dst = parse_index(&edges_path, line_no, fields[1], n, "node")?;
        if src == dst {
            return Err(Error::data(&edges_path, line_no, format!("self-loop on node {src}")));
        }
        edge_lines += 1;
        edge_set.insert((src.min(dst), src.max(dst)));
    }
    let mut triplets = Vec::with_capacity(edge_set.len() * 2);
    let mut degree = vec![0usize; n];
    for &(u, v) in &edge_set {
        triplets.push((u, v, 1.0));
        triplets.push((v, u, 1.0));
        degree[u] += 1;
        degree[v] += 1;
    }
    let adjacency = SparseMatrix::from_triplets(n, n, triplets)?;

    let feat_path = dir.join("features.tsv");
    let mut features = DenseMatrix::zeros(n, meta.num_features);
    let mut assigned = BTreeSet::new();
    for (line_no, fields) in tsv_lines(&feat_path, &read(&feat_path)?, 3)? {
        let node = parse_index(&feat_path, line_no, fields[0], n, "node")?;
        let feat = parse_index(&feat_path, line_no, fields[1], meta.num_features, "feature")?;
        let value: f64 = fields[2]
            .parse()
            .map_err(|_| Error::data(&feat_path, line_no, format!("bad value {:?}", fields[2])))?;
        if !value.is_finite() {
            return Err(Error::data(&feat_path, line_no, "non-finite feature value"));
        }
        if !assigned.insert((node, feat)) {
            return Err(Error::data(
                &feat_path,
                line_no,
                format!("duplicate entry for node {node} feature {feat}"),
            ));
        }
        features.set(node, feat, value);
    }

    let label_path = dir.join("labels.tsv");
    let mut labels: Vec<Option<usize>> = vec![None; n];
    for (line_no, fields) in tsv_lines(&label_path, &read(&label_path)?, 2)? {
        let node = parse_index(&label_path, line_no, fields[0], n, "node")?;
        let class = parse_index(&label_path, line_no, fields[1], meta.num_classes, "class")?;
        if labels[node].replace(class).is_some() {
            return Err(Error::data(&label_path, line_no, format!("node {node} labeled twice")));
        }
    }
    let labels = labels
        .into_iter()
        .enumerate()
        .map(|(i, y)| y.ok_or_else(|| Error::data(&label_path, 0, format!("node {i} has no label"))))
        .collect::<Result<Vec<_>>>()?;

    let split_path = dir.join("splits.json");
    let splits: Splits = serde_json::from_str(&read(&split_path)?)
        .map_err(|e| Error::data(&split_path, e.line(), e.to_string()))?;

    let name = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let graph = Graph::new(features, adjacency)?;
    let dataset = LabeledDataset::new(name, graph, labels, meta.num_classes, splits)
        .map_err(|e| Error::data(&split_path, 0, e.to_string()))?;
    let report = LoadReport {
        edge_lines,
        unique_edges: edge_set.len(),
        isolated_nodes: degree.iter().filter(|&&d| d == 0).count(),
    };
    Ok((dataset, report))
}

/// Write `dataset` in the portable format. Lines are emitted in sorted order
/// and values use the shortest round-trip decimal form, so loading the output
/// reproduces the dataset exactly.
pub fn save_dataset(dataset: &LabeledDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let g = &dataset.graph;
    let meta = Meta {
        num_nodes: g.num_nodes(),
        num_features: g.num_features(),
        num_classes: dataset.num_classes,
    };
    write(&dir.join("meta.json"), &serde_json::to_string(&meta).expect("meta serializes"))?;

    let mut edges = String::new();
    for i in 0..g.num_nodes() {
        for &j in g.adjacency().row(i).0 {
            if i < j {
                let _ = writeln!(edges, "{i}\t{j}");
            }
        }
    }
    write(&dir.join("edges.tsv"), &edges)?;

    let mut feats = String::new();
    for i in 0..g.num_nodes() {
        for (j, &v) in g.features().row(i).iter().enumerate() {
            if v != 0.0 {
                let _ = writeln!(feats, "{i}\t{j}\t{v}");
            }
        }
    }
    write(&dir.join("features.tsv"), &feats)?;

    let mut labels = String::new();
    for (i, y) in dataset.labels.iter().enumerate() {
        let _ = writeln!(labels, "{i}\t{y}");
    }
    write(&dir.join("labels.tsv"), &labels)?;
    write(
        &dir.join("splits.json"),
        &serde_json::to_string(&dataset.splits).expect("splits serialize"),
    )
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn write(path: &PathBuf, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

/// Non-empty lines split on tabs, each checked to have `width` fields.
fn tsv_lines<'a>(path: &Path, text: &'a str, width: usize) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').map(str::trim).collect();
        if fields.len() != width {
            return Err(Error::data(
                path,
                line_no,
                format!("expected {width} tab-separated fields, found {}", fields.len()),
            ));
        }
        out.push((line_no, fields));
    }
    Ok(out)
}

fn parse_index(path: &Path, line: usize, field: &str, bound: usize, what: &str) -> Result<usize> {
    let v: usize = field
        .parse()
        .map_err(|_| Error::data(path, line, format!("bad {what} index {field:?}")))?;
    if v >= bound {
        return Err(Error::data(
            path,
            line,
            format!("{what} index {v} out of range (limit {bound})"),
        ));
    }
    Ok(v)
}

/// Divide each row by its sum; all-zero rows stay zero.
pub fn row_normalize_features(x: &DenseMatrix) -> Result<DenseMatrix> {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        if let Some(j) = row.iter().position(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "feature ({i}, {j}) is {}; row normalization needs finite non-negative entries",
                row[j]
            )));
        }
        let sum: f64 = row.iter().sum();
        if sum > 0.0 {
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
    }
    Ok(out)
}

/// Row sums of the adjacency (degrees without self-loops).
pub fn degree_vector(adjacency: &SparseMatrix) -> Vec<f64> {
    adjacency.row_sums()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PropagationKind {
    NormalizedAdjacency,
    Ppr,
    Heat,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Operator {
    Sparse(SparseMatrix),
    Dense(DenseMatrix),
}

/// The n×n operator a GCN layer multiplies node states by.
#[derive(Debug, Clone, PartialEq)]
pub struct PropagationMatrix {
    kind: PropagationKind,
    op: Operator,
    /// Present only when the operator is not symmetric.
    transpose: Option<Operator>,
}

impl PropagationMatrix {
    pub fn new(kind: PropagationKind, op: Operator) -> Result<Self> {
        let (rows, cols) = match &op {
            Operator::Sparse(s) => s.shape(),
            Operator::Dense(d) => d.shape(),
        };
        if rows != cols {
            return Err(Error::shape(
                "PropagationMatrix::new",
                format!("operator is {rows}x{cols}, expected square"),
            ));
        }
        let transpose = match &op {
            Operator::Sparse(s) => {
                s.validate()?;
                let t = s.transpose();
                (t != *s).then_some(Operator::Sparse(t))
            }
            Operator::Dense(d) => {
                d.ensure_finite("propagation matrix")?;
                (d.max_asymmetry() != 0.0).then(|| Operator::Dense(d.transpose()))
            }
        };
        Ok(Self {
            kind,
            op,
            transpose,
        })
    }

    pub fn kind(&self) -> PropagationKind {
        self.kind
    }

    pub fn operator(&self) -> &Operator {
        &self.op
    }

    pub fn size(&self) -> usize {
        match &self.op {
            Operator::Sparse(s) => s.rows(),
            Operator::Dense(d) => d.rows(),
        }
    }

    pub fn is_symmetric(&self) -> bool {
        self.transpose.is_none()
    }

    /// Stored nonzeros (n² for a dense operator).
    pub fn nnz(&self) -> usize {
        match &self.op {
            Operator::Sparse(s) => s.nnz(),
            Operator::Dense(d) => d.rows() * d.cols(),
        }
    }

    pub fn to_dense(&self) -> DenseMatrix {
        match &self.op {
            Operator::Sparse(s) => s.to_dense(),
            Operator::Dense(d) => d.clone(),
        }
    }

    /// `P · x`.
    pub fn apply(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        apply_op(&self.op, x)
    }

    /// `Pᵀ · x`.
    pub fn apply_transpose(&self, x: &DenseMatrix) -> Result<DenseMatrix> {
        apply_op(self.transpose.as_ref().unwrap_or(&self.op), x)
    }

    /// Copy whose adjoint is wrongly the forward operator; a deliberately
    /// broken fixture for the gradient checker.
    pub(crate) fn with_forward_as_adjoint(&self) -> Self {
        Self {
            kind: self.kind,
            op: self.op.clone(),
            transpose: Some(self.op.clone()),
        }
    }
}

fn apply_op(op: &Operator, x: &DenseMatrix) -> Result<DenseMatrix> {
    match op {
        Operator::Sparse(s) => s.spmm(x),
        Operator::Dense(d) => d.matmul(x),
    }
}

/// `P · X` for either storage form.
pub fn spmm(p: &PropagationMatrix, x: &DenseMatrix) -> Result<DenseMatrix> {
    p.apply(x)
}

/// `D̃^{-1/2} (A + I) D̃^{-1/2}` with `D̃` the degree matrix of `A + I`.
pub fn normalize_adjacency(adjacency: &SparseMatrix) -> Result<Arc<PropagationMatrix>> {
    let n = adjacency.rows();
    if adjacency.cols() != n {
        return Err(Error::shape(
            "normalize_adjacency",
            format!("adjacency is {:?}, expected square", adjacency.shape()),
        ));
    }
    let mut triplets = Vec::with_capacity(adjacency.nnz() + n);
    for i in 0..n {
        let (cols, vals) = adjacency.row(i);
        triplets.extend(cols.iter().zip(vals).map(|(&j, &v)| (i, j, v)));
        triplets.push((i, i, 1.0));
    }
    let with_loops = SparseMatrix::from_triplets(n, n, triplets)?;
    let deg = with_loops.row_sums();
    let mut values = Vec::with_capacity(with_loops.nnz());
    for i in 0..n {
        let (cols, vals) = with_loops.row(i);
        // d_i * d_j commutes exactly, so entries (i, j) and (j, i) agree bitwise.
        values.extend(cols.iter().zip(vals).map(|(&j, &v)| v / (deg[i] * deg[j]).sqrt()));
    }
    let normalized = SparseMatrix::from_csr(
        n,
        n,
        with_loops.row_offsets().to_vec(),
        with_loops.col_indices().to_vec(),
        values,
    )?;
    Ok(Arc::new(PropagationMatrix::new(
        PropagationKind::NormalizedAdjacency,
        Operator::Sparse(normalized),
    )?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn adj(n: usize, edges: &[(usize, usize)]) -> SparseMatrix {
        let t = edges
            .iter()
            .flat_map(|&(u, v)| [(u, v, 1.0), (v, u, 1.0)])
            .collect();
        SparseMatrix::from_triplets(n, n, t).unwrap()
    }

    #[test]
    fn row_normalize_examples() {
        let out = row_normalize_features(&DenseMatrix::from_rows(&[[2.0, 2.0]])).unwrap();
        assert_eq!(out.as_slice(), &[0.5, 0.5]);
        let out = row_normalize_features(&DenseMatrix::from_rows(&[[0.0, 0.0]])).unwrap();
        assert_eq!(out.as_slice(), &[0.0, 0.0]);
        let out = row_normalize_features(&DenseMatrix::from_rows(&[[1.0, 3.0], [4.0, 0.0]])).unwrap();
        assert_eq!(out.as_slice(), &[0.25, 0.75, 1.0, 0.0]);
        assert!(row_normalize_features(&DenseMatrix::from_rows(&[[1.0, -1.0]])).is_err());
    }

    #[test]
    fn normalize_adjacency_examples() {
        let p = normalize_adjacency(&adj(2, &[(0, 1)])).unwrap().to_dense();
        assert_eq!(p, DenseMatrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]));

        let p = normalize_adjacency(&SparseMatrix::from_triplets(1, 1, vec![]).unwrap())
            .unwrap()
            .to_dense();
        assert_eq!(p.as_slice(), &[1.0]);

        let p = normalize_adjacency(&adj(3, &[(0, 1), (1, 2)])).unwrap().to_dense();
        assert!((p.get(0, 1) - 1.0 / 6f64.sqrt()).abs() < 1e-12);
        assert!((p.get(1, 1) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(p.max_asymmetry(), 0.0);

        let rect = SparseMatrix::from_triplets(2, 3, vec![]).unwrap();
        assert!(normalize_adjacency(&rect).is_err());
    }

    #[test]
    fn degree_examples() {
        assert_eq!(degree_vector(&adj(2, &[(0, 1)])), vec![1.0, 1.0]);
        assert_eq!(degree_vector(&adj(3, &[(0, 1), (1, 2)])), vec![1.0, 2.0, 1.0]);
        assert_eq!(degree_vector(&adj(3, &[(0, 1)])), vec![1.0, 1.0, 0.0]);
    }

    #[test]
    fn spmm_examples() {
        let x = DenseMatrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let eye = PropagationMatrix::new(
            PropagationKind::NormalizedAdjacency,
            Operator::Sparse(SparseMatrix::identity(2)),
        )
        .unwrap();
        assert_eq!(spmm(&eye, &x).unwrap(), x);
        let half = normalize_adjacency(&adj(2, &[(0, 1)])).unwrap();
        let out = spmm(&half, &DenseMatrix::identity(2)).unwrap();
        assert_eq!(out, DenseMatrix::from_rows(&[[0.5, 0.5], [0.5, 0.5]]));
        assert!(spmm(&half, &DenseMatrix::zeros(3, 1)).is_err());
    }

    #[test]
    fn graph_rejects_self_loops_and_asymmetry() {
        let x = DenseMatrix::zeros(2, 1);
        let looped = SparseMatrix::from_triplets(2, 2, vec![(0, 0, 1.0)]).unwrap();
        assert!(Graph::new(x.clone(), looped).is_err());
        let directed = SparseMatrix::from_triplets(2, 2, vec![(0, 1, 1.0)]).unwrap();
        assert!(Graph::new(x, directed).is_err());
    }
}

//! Experiment configuration files.

use std::path::{Path, PathBuf};

use dgb::augment::{AdjacencyAugmentation, DiffusionSolver, NodeAugmentation, NodeAugmentationKind, ViewConfig};
use dgb::eval::EvalConfig;
use dgb::trainer::TrainConfig;
use dgb::PropagationKind;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub diffusion: DiffusionConfig,
    pub ablation: AblationSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: None,
            output_dir: None,
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            diffusion: DiffusionConfig::default(),
            ablation: AblationSpec::default(),
        }
    }
}

/// Parameters used whenever an ablation label asks for a diffusion operator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    pub alpha: f64,
    pub t: f64,
    pub epsilon: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub top_k: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
    pub solver: DiffusionSolver,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        let d = AdjacencyAugmentation::ppr(0.15);
        Self {
            alpha: d.alpha,
            t: d.t,
            epsilon: d.epsilon,
            top_k: d.top_k,
            order: d.order,
            solver: d.solver,
        }
    }
}

impl DiffusionConfig {
    pub fn augmentation(&self, kind: PropagationKind) -> AdjacencyAugmentation {
        AdjacencyAugmentation {
            kind,
            alpha: self.alpha,
            t: self.t,
            order: self.order,
            solver: self.solver,
            epsilon: self.epsilon,
            top_k: self.top_k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DropoutSweep {
    pub from: f64,
    pub to: f64,
    pub step: f64,
}

impl Default for DropoutSweep {
    fn default() -> Self {
        Self {
            from: 0.1,
            to: 0.9,
            step: 0.1,
        }
    }
}

impl DropoutSweep {
    /// Rates from `from` to `to` inclusive, rounded to 1e-9 so that
    /// `0.1 + 2·0.1` reads as 0.3.
    pub fn rates(&self) -> Vec<f64> {
        let mut out = Vec::new();
        if !(self.step > 0.0) {
            return out;
        }
        let count = ((self.to - self.from) / self.step + 1e-9).floor() as i64;
        for i in 0..=count.max(-1) {
            let r = self.from + i as f64 * self.step;
            out.push((r * 1e9).round() / 1e9);
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSpec {
    pub seeds: Vec<u64>,
    /// View pairs such as `"NFD + ADJ & ND + DIFF"`. The first one is the
    /// reference cell for the sweep and the decay / projection variants.
    pub cells: Vec<String>,
    /// Concrete operators substituted for `DIFF` in a label; each gives its
    /// own cell.
    pub diffusion_kinds: Vec<PropagationKind>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep: Option<DropoutSweep>,
    /// Seed used for the dropout sweep; the first entry of `seeds` if unset.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sweep_seed: Option<u64>,
    /// Extra decay values run on the reference cell.
    pub decay_p: Vec<f64>,
    pub without_projection: bool,
}

impl Default for AblationSpec {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2, 3, 4],
            cells: vec![
                "NFD + ADJ & ND + DIFF".into(),
                "IN + ADJ & IN + ADJ".into(),
                "DIFF & ADJ".into(),
                "NFD & ND".into(),
            ],
            diffusion_kinds: vec![PropagationKind::Ppr, PropagationKind::Heat],
            sweep: Some(DropoutSweep::default()),
            sweep_seed: None,
            decay_p: vec![0.0, 1.0],
            without_projection: true,
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        toml::from_str(&text).map_err(|e| CliError::Usage(format!("invalid config {}: {e}", path.display())))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }
}

/// One side of a view pair as written in a label: node part and adjacency
/// part. `Diff` stands for both diffusion kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AdjToken {
    Adj,
    Diff,
    Ppr,
    Heat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ViewToken {
    pub node: NodeAugmentationKind,
    pub adj: AdjToken,
}

/// Parse `"NFD + ADJ & ND + DIFF"`. A side with only a node token uses the
/// adjacency; one with only an adjacency token applies no node augmentation.
pub fn parse_pair(label: &str) -> Result<(ViewToken, ViewToken), CliError> {
    let sides: Vec<&str> = label.split('&').collect();
    if sides.len() != 2 {
        return Err(CliError::Usage(format!("view pair {label:?} must have exactly one '&'")));
    }
    Ok((parse_view(sides[0], label)?, parse_view(sides[1], label)?))
}

fn parse_view(side: &str, label: &str) -> Result<ViewToken, CliError> {
    let mut node = None;
    let mut adj = None;
    for tok in side.split('+').map(str::trim) {
        let upper = tok.to_ascii_uppercase();
        let (n, a) = match upper.as_str() {
            "IN" => (Some(NodeAugmentationKind::Identity), None),
            "NFD" => (Some(NodeAugmentationKind::NodeFeatureDropout), None),
            "ND" => (Some(NodeAugmentationKind::NodeDropout), None),
            "ADJ" => (None, Some(AdjToken::Adj)),
            "DIFF" => (None, Some(AdjToken::Diff)),
            "PPR" => (None, Some(AdjToken::Ppr)),
            "HEAT" => (None, Some(AdjToken::Heat)),
            _ => return Err(CliError::Usage(format!("unknown token {tok:?} in view pair {label:?}"))),
        };
        if (n.is_some() && node.is_some()) || (a.is_some() && adj.is_some()) {
            return Err(CliError::Usage(format!("repeated token kind in view pair {label:?}")));
        }
        node = node.or(n);
        adj = adj.or(a);
    }
    Ok(ViewToken {
        node: node.unwrap_or(NodeAugmentationKind::Identity),
        adj: adj.unwrap_or(AdjToken::Adj),
    })
}

/// Concrete view from a token, a node-dropout rate and diffusion settings.
/// `Diff` must already be resolved to PPR or heat.
pub fn realize(token: ViewToken, rate: f64, diffusion: &DiffusionConfig) -> ViewConfig {
    let node = match token.node {
        NodeAugmentationKind::Identity => NodeAugmentation::IDENTITY,
        kind => NodeAugmentation { kind, rate },
    };
    let adjacency = match token.adj {
        AdjToken::Adj => AdjacencyAugmentation::normalized(),
        AdjToken::Ppr | AdjToken::Diff => diffusion.augmentation(PropagationKind::Ppr),
        AdjToken::Heat => diffusion.augmentation(PropagationKind::Heat),
    };
    ViewConfig::new(node, adjacency)
}

/// SHA-256 of the canonical JSON form of `value` (object keys sorted).
pub fn fingerprint<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_value(value).expect("config serializes to JSON");
    let text = serde_json::to_string(&canonical).expect("JSON value serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = ExperimentConfig::default();
        let back: ExperimentConfig = toml::from_str(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
    }

    #[test]
    fn partial_config_fills_defaults() {
        let cfg: ExperimentConfig = toml::from_str("[train]\nepochs = 7\n").unwrap();
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.train.lr, TrainConfig::default().lr);
        assert!(toml::from_str::<ExperimentConfig>("[train]\nepoch = 7\n").is_err());
    }

    #[test]
    fn sweep_rates() {
        let r = DropoutSweep::default().rates();
        assert_eq!(r, vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9]);
    }

    #[test]
    fn pair_labels() {
        let (a, b) = parse_pair("NFD + ADJ & ND + DIFF").unwrap();
        assert_eq!(a.node, NodeAugmentationKind::NodeFeatureDropout);
        assert_eq!(b.adj, AdjToken::Diff);
        let (a, b) = parse_pair("DIFF & ADJ").unwrap();
        assert_eq!(a.node, NodeAugmentationKind::Identity);
        assert_eq!(a.adj, AdjToken::Diff);
        assert_eq!(b.adj, AdjToken::Adj);
        let (a, _) = parse_pair("nfd & nd").unwrap();
        assert_eq!(a.adj, AdjToken::Adj);
        assert!(parse_pair("NFD").is_err());
        assert!(parse_pair("NFD + ND & IN").is_err());
        assert!(parse_pair("XYZ & IN").is_err());
    }

    #[test]
    fn fingerprint_ignores_key_order() {
        let a: serde_json::Value = serde_json::from_str(r#"{"a":1,"b":{"x":2,"y":3}}"#).unwrap();
        let b: serde_json::Value = serde_json::from_str(r#"{"b":{"y":3,"x":2},"a":1}"#).unwrap();
        assert_eq!(fingerprint(&a), fingerprint(&b));
        let c: serde_json::Value = serde_json::from_str(r#"{"a":1,"b":{"x":2,"y":4}}"#).unwrap();
        assert_ne!(fingerprint(&a), fingerprint(&c));
    }

    #[test]
    fn fingerprint_tracks_every_training_field() {
        let base = ExperimentConfig::default();
        let edits: Vec<fn(&mut ExperimentConfig)> = vec![
            |c| c.train.epochs += 1,
            |c| c.train.lr *= 2.0,
            |c| c.train.decay_p = 0.9,
            |c| c.train.seed = 9,
            |c| c.train.embed_dim = 64,
            |c| c.train.hidden_dim = 64,
            |c| c.train.use_projector = false,
            |c| c.train.mlp_norm = dgb::nn::MlpNorm::None,
            |c| c.train.view1.node.rate = 0.3,
            |c| c.train.view2.adjacency.alpha = 0.2,
            |c| c.train.view2.adjacency.top_k = Some(32),
            |c| c.eval.l2_penalty = 0.0,
            |c| c.eval.runs = 10,
        ];
        let fp = fingerprint(&base);
        for edit in edits {
            let mut c = base.clone();
            edit(&mut c);
            assert_ne!(fingerprint(&c), fp, "{c:?}");
        }
        // Key order in the file does not matter.
        let reordered = "[eval]\nruns = 50\n[train]\nlr = 0.001\nepochs = 500\n";
        let plain = "[train]\nepochs = 500\nlr = 0.001\n[eval]\nruns = 50\n";
        let a: ExperimentConfig = toml::from_str(reordered).unwrap();
        let b: ExperimentConfig = toml::from_str(plain).unwrap();
        assert_eq!(fingerprint(&a), fingerprint(&b));
    }
}

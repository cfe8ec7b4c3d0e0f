//! The bootstrapping loop.
//!
//! An online tower (encoder, projector, predictor) is trained to predict the
//! projection a target tower (encoder, projector) produces for a second view
//! of the same graph. The target receives no gradients; after every epoch it
//! moves toward the online weights by an exponential moving average.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::augment::{NodeAugmentation, ViewConfig, ViewSource, AdjacencyAugmentation, View};
use crate::error::{Error, Result};
use crate::graph::{normalize_adjacency, Graph, PropagationKind};
use crate::matrix::DenseMatrix;
use crate::nn::{
    bootstrap_loss, l2_normalize_backward, l2_normalize_rows, Activation, AdamState, GcnEncoder, Mlp, MlpNorm,
    Parameters,
};
use crate::rng::RngState;

const STREAM_INIT: u64 = 0;
const STREAM_VIEWS: u64 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub decay_p: f64,
    pub view1: ViewConfig,
    pub view2: ViewConfig,
    pub seed: u64,
    pub embed_dim: usize,
    /// Hidden width of both MLPs; `0` means twice `embed_dim`.
    pub hidden_dim: usize,
    pub activation: Activation,
    pub mlp_norm: MlpNorm,
    /// Without a projector the predictor reads the encoder output directly.
    pub use_projector: bool,
    /// Stop once the epoch loss has not improved for this many epochs; `0`
    /// disables early stopping.
    pub patience: usize,
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            lr: 0.001,
            decay_p: 0.99,
            view1: ViewConfig::new(NodeAugmentation::feature_dropout(0.2), AdjacencyAugmentation::normalized()),
            view2: ViewConfig::new(NodeAugmentation::node_dropout(0.2), AdjacencyAugmentation::ppr(0.15)),
            seed: 0,
            embed_dim: 512,
            hidden_dim: 0,
            activation: Activation::Prelu,
            mlp_norm: MlpNorm::Batch,
            use_projector: true,
            patience: 50,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidParameter("epochs must be >= 1".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidParameter(format!("lr must be >= 0, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.decay_p) {
            return Err(Error::InvalidParameter(format!(
                "decay_p must lie in [0, 1], got {}",
                self.decay_p
            )));
        }
        if self.embed_dim == 0 {
            return Err(Error::InvalidParameter("embed_dim must be >= 1".into()));
        }
        self.view1.validate()?;
        self.view2.validate()
    }

    pub fn mlp_hidden(&self) -> usize {
        if self.hidden_dim == 0 {
            2 * self.embed_dim
        } else {
            self.hidden_dim
        }
    }

    /// Label of the view pair in the `NFD + ADJ & ND + DIFF` style.
    pub fn view_label(&self) -> String {
        format!("{} & {}", self.view1.label(), self.view2.label())
    }
}

/// Encoder, projector and predictor; the trainable side.
#[derive(Debug, Clone, PartialEq)]
pub struct OnlineTower {
    pub encoder: GcnEncoder,
    pub projector: Option<Mlp>,
    pub predictor: Mlp,
}

/// Encoder and projector; moved only by [`ema_update`].
#[derive(Debug, Clone, PartialEq)]
pub struct TargetTower {
    pub encoder: GcnEncoder,
    pub projector: Option<Mlp>,
}

impl Parameters for OnlineTower {
    fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.slices();
        if let Some(p) = &self.projector {
            out.extend(p.slices());
        }
        out.extend(self.predictor.slices());
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.slices_mut();
        if let Some(p) = &mut self.projector {
            out.extend(p.slices_mut());
        }
        out.extend(self.predictor.slices_mut());
        out
    }
}

impl Parameters for TargetTower {
    fn slices(&self) -> Vec<&[f64]> {
        let mut out = self.encoder.slices();
        if let Some(p) = &self.projector {
            out.extend(p.slices());
        }
        out
    }

    fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = self.encoder.slices_mut();
        if let Some(p) = &mut self.projector {
            out.extend(p.slices_mut());
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DgbModel {
    pub online: OnlineTower,
    pub target: TargetTower,
}

impl DgbModel {
    /// The target's encoder and projector as an online-shaped view, for
    /// comparisons in tests.
    pub fn target_matches_online(&self) -> bool {
        self.target.encoder == self.online.encoder && self.target.projector == self.online.projector
    }
}

/// Glorot-initialized online tower and an exact copy of its encoder and
/// projector as the target.
pub fn init_model(in_dim: usize, config: &TrainConfig, rng: &mut RngState) -> DgbModel {
    let d = config.embed_dim;
    let hidden = config.mlp_hidden();
    let encoder = GcnEncoder::new(in_dim, d, config.activation, rng);
    let projector = config
        .use_projector
        .then(|| Mlp::new(d, hidden, d, config.mlp_norm, rng));
    let predictor = Mlp::new(d, hidden, d, config.mlp_norm, rng);
    let target = TargetTower {
        encoder: encoder.clone(),
        projector: projector.clone(),
    };
    DgbModel {
        online: OnlineTower {
            encoder,
            projector,
            predictor,
        },
        target,
    }
}

/// `ξ ← p·ξ + (1−p)·θ` over the encoder and projector.
pub fn ema_update(model: &mut DgbModel, decay_p: f64) {
    let online = model.online.slices();
    let target = model.target.slices_mut();
    for (t, o) in target.into_iter().zip(online) {
        if decay_p == 1.0 {
            continue;
        }
        for (tv, &ov) in t.iter_mut().zip(o) {
            *tv = if decay_p == 0.0 { ov } else { decay_p * *tv + (1.0 - decay_p) * ov };
        }
    }
}

/// Normalized target projection of a view, with no tape kept.
pub(crate) fn target_projection(target: &TargetTower, view: &View<'_>) -> Result<DenseMatrix> {
    let h = target.encoder.apply(&view.propagation, &view.features)?;
    let z = match &target.projector {
        Some(p) => p.apply(&h)?,
        None => h,
    };
    Ok(l2_normalize_rows(&z)?.0)
}

/// Loss of the online tower on `online_view` against the fixed
/// `target_norm`; gradients are accumulated into `grads`.
pub(crate) fn online_pass(
    online: &OnlineTower,
    online_view: &View<'_>,
    target_norm: &DenseMatrix,
    grads: &mut OnlineTower,
) -> Result<f64> {
    let (h, enc_tape) = online.encoder.forward(&online_view.propagation, &online_view.features)?;
    let (z, proj_tape) = match &online.projector {
        Some(p) => {
            let (z, t) = p.forward(&h)?;
            (Some(z), Some(t))
        }
        None => (None, None),
    };
    let pred_in = z.as_ref().unwrap_or(&h);
    let (q, pred_tape) = online.predictor.forward(pred_in)?;
    let (q_norm, norm_tape) = l2_normalize_rows(&q)?;
    let (loss, g) = bootstrap_loss(&q_norm, target_norm)?;
    let g = l2_normalize_backward(norm_tape, &g)?;
    let g = online.predictor.backward(pred_tape, &g, &mut grads.predictor)?;
    let g = match (&online.projector, proj_tape, &mut grads.projector) {
        (Some(p), Some(t), Some(gp)) => p.backward(t, &g, gp)?,
        _ => g,
    };
    online.encoder.backward(enc_tape, &g, &mut grads.encoder)?;
    Ok(loss)
}

/// One epoch: sample both views, compute `L + L̃`, take one Adam step on the
/// online tower, then move the target. Returns `L + L̃`.
pub fn train_epoch(
    model: &mut DgbModel,
    source: &ViewSource,
    config: &TrainConfig,
    rng: &mut RngState,
    opt: &mut AdamState,
) -> Result<f64> {
    let view1 = source.make_view(&config.view1, rng)?;
    let view2 = source.make_view(&config.view2, rng)?;
    let t1 = target_projection(&model.target, &view1)?;
    let t2 = target_projection(&model.target, &view2)?;
    let mut grads = model.online.zeros_like();
    let loss = online_pass(&model.online, &view1, &t2, &mut grads)?;
    let swapped = online_pass(&model.online, &view2, &t1, &mut grads)?;
    let total = loss + swapped;
    if !total.is_finite() {
        return Err(Error::NonFinite("epoch loss".into()));
    }
    opt.step(&mut model.online, &grads)?;
    ema_update(model, config.decay_p);
    Ok(total)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub epoch_seconds: Vec<f64>,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn epochs_run(&self) -> usize {
        self.losses.len()
    }
}

/// Stateful training run. Owns the model, optimizer and random stream, and
/// shares a [`ViewSource`] so several runs can reuse one diffusion operator.
pub struct Trainer {
    config: TrainConfig,
    source: Arc<ViewSource>,
    model: DgbModel,
    opt: AdamState,
    rng: RngState,
    epoch: usize,
    best: f64,
    since_best: usize,
}

impl Trainer {
    /// `graph` carries raw features; they are row-normalized here.
    pub fn new(graph: &Graph, config: TrainConfig) -> Result<Self> {
        let source = Arc::new(ViewSource::new(graph.with_normalized_features()?));
        Self::with_source(source, config)
    }

    /// `source` must already hold row-normalized features.
    pub fn with_source(source: Arc<ViewSource>, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let root = RngState::new(config.seed);
        let mut init_rng = root.fork(STREAM_INIT);
        let model = init_model(source.graph().num_features(), &config, &mut init_rng);
        let opt = AdamState::new(config.lr, &model.online);
        Ok(Self {
            config,
            source,
            model,
            opt,
            rng: root.fork(STREAM_VIEWS),
            epoch: 0,
            best: f64::INFINITY,
            since_best: 0,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &DgbModel {
        &self.model
    }

    pub fn model_mut(&mut self) -> &mut DgbModel {
        &mut self.model
    }

    pub fn into_model(self) -> DgbModel {
        self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Run one epoch; errors carry the epoch index.
    pub fn step(&mut self) -> Result<f64> {
        let epoch = self.epoch;
        let loss = train_epoch(&mut self.model, &self.source, &self.config, &mut self.rng, &mut self.opt)
            .map_err(|e| match e {
                Error::NonFinite(msg) => Error::Diverged { epoch, msg: format!("non-finite {msg}") },
                Error::Collapsed { row, norm } => Error::Diverged {
                    epoch,
                    msg: format!("row {row} collapsed to norm {norm:e}"),
                },
                other => other,
            })?;
        self.epoch += 1;
        if loss < self.best {
            self.best = loss;
            self.since_best = 0;
        } else {
            self.since_best += 1;
        }
        Ok(loss)
    }

    fn plateaued(&self) -> bool {
        self.config.patience > 0 && self.since_best >= self.config.patience
    }

    /// Train until `config.epochs` or a loss plateau. `on_epoch` sees the
    /// epoch index, its loss and the model after the update.
    pub fn run(&mut self, mut on_epoch: impl FnMut(usize, f64, &DgbModel) -> Result<()>) -> Result<TrainReport> {
        let mut report = TrainReport {
            losses: Vec::new(),
            epoch_seconds: Vec::new(),
            stopped_early: false,
        };
        while self.epoch < self.config.epochs {
            let start = Instant::now();
            let loss = self.step()?;
            report.epoch_seconds.push(start.elapsed().as_secs_f64());
            report.losses.push(loss);
            on_epoch(self.epoch - 1, loss, &self.model)?;
            if self.plateaued() {
                report.stopped_early = true;
                break;
            }
        }
        Ok(report)
    }
}

/// Train on `graph` and keep only the online encoder.
pub fn train(graph: &Graph, config: &TrainConfig) -> Result<(GcnEncoder, TrainReport)> {
    let mut trainer = Trainer::new(graph, *config)?;
    let report = trainer.run(|_, _, _| Ok(()))?;
    Ok((trainer.into_model().online.encoder, report))
}

/// Node representations from the clean graph: row-normalized features and
/// the normalized adjacency, no augmentation.
pub fn embed(encoder: &GcnEncoder, graph: &Graph) -> Result<DenseMatrix> {
    let normalized = graph.with_normalized_features()?;
    let p = normalize_adjacency(graph.adjacency())?;
    debug_assert_eq!(p.kind(), PropagationKind::NormalizedAdjacency);
    encoder.apply(&p, normalized.features())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::SparseMatrix;

    fn tiny_graph() -> Graph {
        let x = DenseMatrix::from_rows(&[[1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 0.0], [0.0, 0.0, 1.0]]);
        let t = [(0, 1), (1, 2), (2, 3), (3, 0)]
            .iter()
            .flat_map(|&(u, v)| [(u, v, 1.0), (v, u, 1.0)])
            .collect();
        Graph::new(x, SparseMatrix::from_triplets(4, 4, t).unwrap()).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            epochs: 5,
            embed_dim: 4,
            hidden_dim: 6,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn init_copies_online_into_target() {
        let model = init_model(3, &small_config(), &mut RngState::new(1));
        assert!(model.target_matches_online());
    }

    #[test]
    fn zero_epochs_rejected() {
        let cfg = TrainConfig {
            epochs: 0,
            ..small_config()
        };
        assert!(train(&tiny_graph(), &cfg).is_err());
    }

    #[test]
    fn ema_endpoints() {
        let cfg = small_config();
        let mut model = init_model(3, &cfg, &mut RngState::new(1));
        let fresh = init_model(3, &cfg, &mut RngState::new(2));
        model.online = fresh.online.clone();
        let before = model.target.clone();
        ema_update(&mut model, 1.0);
        assert_eq!(model.target, before);
        ema_update(&mut model, 0.0);
        assert!(model.target_matches_online());
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = small_config();
        let (a, ra) = train(&tiny_graph(), &cfg).unwrap();
        let (b, rb) = train(&tiny_graph(), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.losses, rb.losses);
    }

    #[test]
    fn embed_is_repeatable() {
        let g = tiny_graph();
        let (enc, _) = train(&g, &small_config()).unwrap();
        let h = embed(&enc, &g).unwrap();
        assert_eq!(h.shape(), (4, 4));
        assert_eq!(h, embed(&enc, &g).unwrap());
    }
}

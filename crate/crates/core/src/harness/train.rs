use log::debug;

use super::config::{ExperimentConfig, OptimizerConfig};
use crate::constraint::ScoreMatrix;
use crate::diffcore::{dropout_key, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::CellGraph;
use crate::layers::{Mode, Network};
use crate::loss::{bce_raw, mcloss_raw, LossKind};
use crate::metrics::{evaluate, MetricsReport};
use crate::taxonomy::{DescendantMatrix, Taxonomy};

/// Adam state for one parameter list.
pub struct Adam {
    cfg: OptimizerConfig,
    lr: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: i32,
}

impl Adam {
    pub fn new(cfg: &OptimizerConfig, params: &[Tensor]) -> Self {
        Adam {
            cfg: cfg.clone(),
            lr: cfg.learning_rate,
            m: params.iter().map(|p| vec![0.0; p.data().len()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.data().len()]).collect(),
            step: 0,
        }
    }

    /// One update; `grads[i]` is `None` for parameters the loss does not reach.
    pub fn update(&mut self, params: &mut [Tensor], grads: &[Option<&Tensor>]) {
        self.step += 1;
        let (b1, b2) = (self.cfg.beta1, self.cfg.beta2);
        let c1 = 1.0 - b1.powi(self.step);
        let c2 = 1.0 - b2.powi(self.step);
        for (i, p) in params.iter_mut().enumerate() {
            let Some(g) = grads[i] else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let gk = g.data()[k];
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                *w -= self.lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.cfg.eps);
            }
        }
    }
}

/// Multi-hot targets over the `C + 1` output slots; the root slot is always 1.
pub fn targets_with_root(graph: &CellGraph, t: &Taxonomy) -> Result<Vec<f64>> {
    let y = graph
        .targets(t)
        .ok_or_else(|| Error::UnknownLabel(format!("patient {} has no labels", graph.patient_id)))?;
    let c = t.len();
    let mut out = Vec::with_capacity(y.len() / c.max(1) * (c + 1));
    for row in y.chunks_exact(c) {
        out.extend_from_slice(row);
        out.push(1.0);
    }
    Ok(out)
}

/// Loss of scores `h` against `y` as a tape node with its exact gradient.
/// `r` is the descendant relation extended with the root slot.
fn loss_node(tape: &mut Tape, h: Var, y: &[f64], kind: LossKind, r: &DescendantMatrix) -> Result<Var> {
    let scores = tape.value(h);
    let mut grad = vec![0.0; scores.data().len()];
    let report = match kind {
        LossKind::Mcloss => mcloss_raw(scores.data(), y, r, Some(&mut grad)),
        LossKind::Bce => bce_raw(scores.data(), y, scores.cols(), Some(&mut grad)),
    };
    let g = Tensor::new(scores.rows(), scores.cols(), grad)?;
    tape.external(h, report.total, g)
}

/// A trained network with its loss trajectory.
pub struct TrainOutcome {
    pub network: Network,
    /// Summed loss over all training graphs, per epoch.
    pub losses: Vec<f64>,
}

/// Full-batch training: one optimizer step per patient graph per epoch.
pub fn train(graphs: &[CellGraph], t: &Taxonomy, cfg: &ExperimentConfig, seed: u64) -> Result<TrainOutcome> {
    let net_cfg = cfg.network_config(t.len())?;
    let mut network = Network::new(net_cfg, seed)?;
    let targets: Vec<Vec<f64>> = graphs.iter().map(|g| targets_with_root(g, t)).collect::<Result<_>>()?;
    let mut adam = Adam::new(&cfg.optimizer, &network.params);
    let r = t.descendants().with_root();
    let mut losses = Vec::with_capacity(cfg.optimizer.epochs);
    for epoch in 0..cfg.optimizer.epochs {
        let mut total = 0.0;
        for (gi, (g, y)) in graphs.iter().zip(&targets).enumerate() {
            // The loss and gradients are checked below, so per-op checks are redundant here.
            let mut tape = Tape::new().with_finite_checks(false);
            let params: Vec<Var> = network.params.iter().map(|p| tape.param(p.clone())).collect();
            let x = tape.constant(g.features.clone());
            let key = dropout_key(seed, epoch as u64, gi as u64);
            let fwd = network.record(&mut tape, &params, x, &g.adjacency, Some(key))?;
            let loss = loss_node(&mut tape, fwd.scores, y, cfg.loss, &r)?;
            let value = tape.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::DivergedLoss {
                    epoch,
                    detail: format!("loss {value} on patient {}", g.patient_id),
                });
            }
            total += value;
            let grads = tape.backward(loss)?;
            let gs: Vec<Option<&Tensor>> = params.iter().map(|&p| grads.get(p)).collect();
            if let Some(bad) = gs.iter().flatten().find(|g| !g.is_finite()) {
                return Err(Error::DivergedLoss {
                    epoch,
                    detail: format!("non-finite gradient of shape {:?}", bad.shape()),
                });
            }
            adam.update(&mut network.params, &gs);
        }
        debug!("epoch {epoch}: loss {total}");
        losses.push(total);
    }
    Ok(TrainOutcome { network, losses })
}

/// Class scores used for evaluation: constrained when the config applies the
/// constraint at inference, raw otherwise.
pub fn predict(network: &Network, graph: &CellGraph, t: &Taxonomy, cfg: &ExperimentConfig) -> Result<ScoreMatrix> {
    let mode = if cfg.use_constraint_at_inference {
        Mode::Infer
    } else {
        Mode::Train
    };
    network.class_scores(&graph.features, &graph.adjacency, mode, t)
}

/// Metrics over the cells of several graphs pooled together.
pub fn evaluate_graphs(
    network: &Network,
    graphs: &[CellGraph],
    t: &Taxonomy,
    cfg: &ExperimentConfig,
    threshold: f64,
) -> Result<(MetricsReport, usize)> {
    let (scores, truth) = pooled_scores(network, graphs, t, cfg)?;
    let violations = crate::constraint::find_violations(&scores, t)?.len();
    Ok((evaluate(&scores, &truth, t, threshold)?, violations))
}

/// Scores and true leaves of all cells, graph after graph.
pub fn pooled_scores(
    network: &Network,
    graphs: &[CellGraph],
    t: &Taxonomy,
    cfg: &ExperimentConfig,
) -> Result<(ScoreMatrix, Vec<usize>)> {
    let mut values = Vec::new();
    let mut truth = Vec::new();
    let mut rows = 0;
    for g in graphs {
        let s = predict(network, g, t, cfg)?;
        rows += s.rows();
        values.extend_from_slice(s.values());
        truth.extend(
            g.labels
                .as_ref()
                .ok_or_else(|| Error::UnknownLabel(format!("patient {} has no labels", g.patient_id)))?,
        );
    }
    let s = ScoreMatrix::for_taxonomy(t, rows, values)?;
    let s = if cfg.use_constraint_at_inference {
        s.assume_constrained()
    } else {
        s
    };
    Ok((s, truth))
}

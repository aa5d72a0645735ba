//! Graph layers and the scoring network built from them.
//!
//! Every network ends in a logistic output of width `C + 1`: one column per
//! class plus a trailing root slot. Training reads the raw scores; inference
//! passes them through the max-constraint layer with the root included.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::constraint::{mcm, ScoreMatrix};
use crate::diffcore::{dropout_key, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::Adjacency;
use crate::taxonomy::{DescendantMatrix, Taxonomy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Gat,
    Gcn,
    Sage,
    Mlp,
}

impl std::str::FromStr for LayerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gat" => Ok(LayerKind::Gat),
            "gcn" => Ok(LayerKind::Gcn),
            "sage" => Ok(LayerKind::Sage),
            "mlp" | "dnn" => Ok(LayerKind::Mlp),
            other => Err(Error::Config(format!("unknown layer kind {other:?}"))),
        }
    }
}

/// Nonlinearity between hidden layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Identity,
}

/// How a multi-head attention layer merges its heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadMerge {
    Concat,
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Raw scores, as seen by the loss.
    Train,
    /// Constrained scores.
    Infer,
}

/// Network shape and regularization.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    pub kind: LayerKind,
    pub nb_layers: usize,
    pub hidden_dim: usize,
    /// Heads in every hidden attention layer.
    pub num_heads: usize,
    /// Heads in the final attention layer (averaged).
    pub out_heads: usize,
    pub input_dim: usize,
    /// Class count plus one root slot.
    pub output_dim: usize,
    /// Dropout after each hidden activation.
    pub dropout: f64,
    /// Dropout on attention coefficients, one rate per layer.
    pub attn_dropout: Vec<f64>,
    pub leaky_slope: f64,
    pub activation: Activation,
}

impl NetworkConfig {
    /// Two attention layers, two heads of width 32, averaged two-head output.
    pub fn paper_gat(input_dim: usize, classes: usize) -> Self {
        NetworkConfig {
            kind: LayerKind::Gat,
            nb_layers: 2,
            hidden_dim: 32,
            num_heads: 2,
            out_heads: 2,
            input_dim,
            output_dim: classes + 1,
            dropout: 0.2,
            attn_dropout: vec![0.4, 0.2],
            leaky_slope: 0.2,
            activation: Activation::Relu,
        }
    }

    /// `paper-gat`, or the same depth and width with another layer kind (`gcn`, `sage`, `mlp`).
    pub fn preset(name: &str, input_dim: usize, classes: usize) -> Result<Self> {
        let base = Self::paper_gat(input_dim, classes);
        let kind = match name {
            "paper-gat" | "gat" => return Ok(base),
            other => other
                .parse::<LayerKind>()
                .map_err(|_| Error::UnknownPreset(name.into()))?,
        };
        Ok(NetworkConfig {
            kind,
            hidden_dim: 64,
            num_heads: 1,
            out_heads: 1,
            attn_dropout: vec![0.0, 0.0],
            ..base
        })
    }

    fn validate(&self) -> Result<()> {
        if self.nb_layers == 0 || self.hidden_dim == 0 || self.output_dim == 0 || self.input_dim == 0 {
            return Err(Error::Config("layer widths and depth must be positive".into()));
        }
        if self.kind == LayerKind::Gat && (self.num_heads == 0 || self.out_heads == 0) {
            return Err(Error::Config("attention layers need at least one head".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) || self.attn_dropout.iter().any(|r| !(0.0..1.0).contains(r)) {
            return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
        }
        Ok(())
    }

    fn heads(&self, layer: usize) -> usize {
        match self.kind {
            LayerKind::Gat if layer + 1 == self.nb_layers => self.out_heads,
            LayerKind::Gat => self.num_heads,
            _ => 1,
        }
    }

    fn is_last(&self, layer: usize) -> bool {
        layer + 1 == self.nb_layers
    }

    /// Per-head output width of a layer.
    fn head_width(&self, layer: usize) -> usize {
        if self.is_last(layer) {
            self.output_dim
        } else {
            self.hidden_dim
        }
    }

    /// Width after merging heads.
    pub fn layer_width(&self, layer: usize) -> usize {
        if self.is_last(layer) {
            self.output_dim
        } else {
            self.head_width(layer) * self.heads(layer)
        }
    }

    fn layer_input(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.layer_width(layer - 1)
        }
    }

    /// Width of the representation feeding the output layer.
    pub fn penultimate_width(&self) -> usize {
        self.layer_input(self.nb_layers - 1)
    }

    /// Parameter shapes in storage order.
    pub fn param_shapes(&self) -> Vec<[usize; 2]> {
        let mut shapes = Vec::new();
        for l in 0..self.nb_layers {
            let (fan_in, out) = (self.layer_input(l), self.head_width(l));
            match self.kind {
                LayerKind::Gat => {
                    for _ in 0..self.heads(l) {
                        shapes.push([fan_in, out]);
                        shapes.push([out, 2]);
                    }
                }
                LayerKind::Gcn | LayerKind::Mlp => shapes.push([fan_in, out]),
                LayerKind::Sage => shapes.push([2 * fan_in, out]),
            }
            shapes.push([1, self.layer_width(l)]);
        }
        shapes
    }
}

/// A configured network with its parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub config: NetworkConfig,
    pub params: Vec<Tensor>,
}

/// Tape handles of one forward pass.
pub struct Forward {
    /// Logistic scores, N × output_dim.
    pub scores: Var,
    /// Input of the output layer.
    pub penultimate: Var,
}

impl Network {
    /// Weights uniform in `±1/sqrt(fan_in)`, biases zero.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = config
            .param_shapes()
            .into_iter()
            .map(|[r, c]| {
                if r == 1 {
                    return Tensor::zeros(r, c);
                }
                let bound = 1.0 / (r as f64).sqrt();
                let data = (0..r * c).map(|_| rng.random_range(-bound..=bound)).collect();
                Tensor::new(r, c, data).unwrap()
            })
            .collect();
        Ok(Network { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data().len()).sum()
    }

    /// Records a forward pass. `dropout` carries the stream key when dropout is active.
    pub fn record(
        &self,
        tape: &mut Tape,
        params: &[Var],
        x: Var,
        adj: &Arc<Adjacency>,
        dropout: Option<u64>,
    ) -> Result<Forward> {
        let cfg = &self.config;
        if tape.value(x).cols() != cfg.input_dim {
            return Err(Error::dims(
                format!("{} input features", cfg.input_dim),
                tape.value(x).cols(),
            ));
        }
        if params.len() != self.params.len() {
            return Err(Error::dims(
                format!("{} parameter tensors", self.params.len()),
                params.len(),
            ));
        }
        if cfg.kind != LayerKind::Mlp {
            if adj.node_count() != tape.value(x).rows() {
                return Err(Error::dims(format!("{} nodes", tape.value(x).rows()), adj.node_count()));
            }
            if let Some(i) = adj.has_empty_neighborhood() {
                return Err(Error::IsolatedNode(i));
            }
        }
        let mut h = x;
        let mut penultimate = x;
        let mut p = 0;
        for l in 0..cfg.nb_layers {
            let last = cfg.is_last(l);
            let key = dropout.map(|k| dropout_key(k, l as u64, 0));
            penultimate = h;
            let pre = match cfg.kind {
                LayerKind::Gat => {
                    let heads: Vec<(Var, Var)> = (0..cfg.heads(l))
                        .map(|i| (params[p + 2 * i], params[p + 2 * i + 1]))
                        .collect();
                    p += 2 * heads.len();
                    let merge = if last { HeadMerge::Average } else { HeadMerge::Concat };
                    let rate = cfg.attn_dropout.get(l).copied().unwrap_or(0.0);
                    let attn = key.map(|k| (rate, k));
                    gat_layer(tape, h, adj, &heads, cfg.leaky_slope, merge, attn)?.out
                }
                LayerKind::Gcn => {
                    p += 1;
                    gcn_layer(tape, h, adj, params[p - 1])?
                }
                LayerKind::Sage => {
                    p += 1;
                    sage_layer(tape, h, adj, params[p - 1])?
                }
                LayerKind::Mlp => {
                    p += 1;
                    tape.matmul(h, params[p - 1])?
                }
            };
            let biased = tape.add_row(pre, params[p])?;
            p += 1;
            h = if last {
                tape.sigmoid(biased)?
            } else {
                let act = match cfg.activation {
                    Activation::Relu => tape.relu(biased)?,
                    Activation::Identity => biased,
                };
                match key {
                    Some(k) if cfg.dropout > 0.0 => tape.dropout(act, cfg.dropout, dropout_key(k, 1, 1))?,
                    _ => act,
                }
            };
        }
        Ok(Forward { scores: h, penultimate })
    }

    /// Raw logistic scores without dropout, N × output_dim.
    pub fn raw_scores(&self, features: &Tensor, adj: &Arc<Adjacency>) -> Result<Tensor> {
        let (tape, fwd) = self.eval_tape(features, adj)?;
        Ok(tape.value(fwd.scores).clone())
    }

    /// Input of the output layer for every node.
    pub fn embeddings(&self, features: &Tensor, adj: &Arc<Adjacency>) -> Result<Tensor> {
        let (tape, fwd) = self.eval_tape(features, adj)?;
        Ok(tape.value(fwd.penultimate).clone())
    }

    fn eval_tape(&self, features: &Tensor, adj: &Arc<Adjacency>) -> Result<(Tape, Forward)> {
        let mut tape = Tape::new();
        let params: Vec<Var> = self.params.iter().map(|t| tape.constant(t.clone())).collect();
        let x = tape.constant(features.clone());
        let fwd = self.record(&mut tape, &params, x, adj, None)?;
        Ok((tape, fwd))
    }

    /// Scores over the `C + 1` output slots: raw in train mode, constrained
    /// (root included) in infer mode.
    pub fn forward(
        &self,
        features: &Tensor,
        adj: &Arc<Adjacency>,
        mode: Mode,
        r: &DescendantMatrix,
    ) -> Result<ScoreMatrix> {
        let raw = self.raw_scores(features, adj)?;
        let with_root = r.with_root();
        if raw.cols() != with_root.dim() {
            return Err(Error::dims(format!("{} output slots", with_root.dim()), raw.cols()));
        }
        let h = ScoreMatrix::new(raw.rows(), raw.cols(), raw.into_data(), root_id(r))?;
        match mode {
            Mode::Train => Ok(h),
            Mode::Infer => mcm(&h, &with_root),
        }
    }

    /// Class scores with the root slot dropped, ready for evaluation under `t`.
    pub fn class_scores(
        &self,
        features: &Tensor,
        adj: &Arc<Adjacency>,
        mode: Mode,
        t: &Taxonomy,
    ) -> Result<ScoreMatrix> {
        let s = self.forward(features, adj, mode, t.descendants())?;
        Ok(s.truncate_cols(t.len(), t.fingerprint()))
    }
}

fn root_id(r: &DescendantMatrix) -> u64 {
    r.dim() as u64 | 1 << 63
}

/// Result of an attention layer.
pub struct GatOutput {
    /// Merged head outputs before bias and activation.
    pub out: Var,
    /// Attention coefficients per head, one entry per edge in edge order.
    pub attention: Vec<Var>,
}

/// Multi-head graph attention. Each head is `(W, A)` with `W` of shape
/// in × m and `A` of shape m × 2 holding the source and neighbor halves of
/// the attention vector.
pub fn gat_layer(
    tape: &mut Tape,
    x: Var,
    adj: &Arc<Adjacency>,
    heads: &[(Var, Var)],
    slope: f64,
    merge: HeadMerge,
    attn_dropout: Option<(f64, u64)>,
) -> Result<GatOutput> {
    if let Some(i) = adj.has_empty_neighborhood() {
        return Err(Error::IsolatedNode(i));
    }
    let mut outs = Vec::with_capacity(heads.len());
    let mut attention = Vec::with_capacity(heads.len());
    for (i, &(w, a)) in heads.iter().enumerate() {
        if tape.value(a).shape() != [tape.value(w).cols(), 2] {
            return Err(Error::ShapeMismatch {
                op: "gat_layer",
                detail: format!(
                    "attention vector {:?} for head width {}",
                    tape.value(a).shape(),
                    tape.value(w).cols()
                ),
            });
        }
        let wx = tape.matmul(x, w)?;
        let s = tape.matmul(wx, a)?;
        let s_src = tape.slice(s, 0, 1)?;
        let s_dst = tape.slice(s, 1, 2)?;
        let e = tape.edge_pair_sum(s_src, s_dst, adj)?;
        let e = tape.leaky_relu(e, slope)?;
        let gamma = tape.segment_softmax(e, adj)?;
        attention.push(gamma);
        let gamma = match attn_dropout {
            Some((rate, key)) if rate > 0.0 => tape.dropout(gamma, rate, dropout_key(key, 2, i as u64))?,
            _ => gamma,
        };
        outs.push(tape.edge_weighted_sum(gamma, wx, adj)?);
    }
    let out = match merge {
        HeadMerge::Concat => tape.concat(&outs)?,
        HeadMerge::Average => tape.mean_over_heads(&outs)?,
    };
    Ok(GatOutput { out, attention })
}

/// `sum_j x_j / sqrt(|N(i)| |N(j)|)` over the neighborhood, then `· W`.
pub fn gcn_layer(tape: &mut Tape, x: Var, adj: &Arc<Adjacency>, w: Var) -> Result<Var> {
    let deg: Vec<f64> = (0..adj.node_count()).map(|i| adj.neighbors(i).len() as f64).collect();
    let mut weights = Vec::with_capacity(adj.edge_count());
    for i in 0..adj.node_count() {
        for &j in adj.neighbors(i) {
            weights.push(1.0 / (deg[i] * deg[j]).sqrt());
        }
    }
    let c = tape.constant(Tensor::new(weights.len(), 1, weights)?);
    let agg = tape.edge_weighted_sum(c, x, adj)?;
    tape.matmul(agg, w)
}

/// `[x_i | mean of x_j over non-self neighbors] · W`; the mean is zero for a
/// node whose only neighbor is itself.
pub fn sage_layer(tape: &mut Tape, x: Var, adj: &Arc<Adjacency>, w: Var) -> Result<Var> {
    let mut weights = Vec::with_capacity(adj.edge_count());
    for i in 0..adj.node_count() {
        let others = adj.neighbors(i).iter().filter(|&&j| j != i).count();
        for &j in adj.neighbors(i) {
            weights.push(if j == i || others == 0 {
                0.0
            } else {
                1.0 / others as f64
            });
        }
    }
    let c = tape.constant(Tensor::new(weights.len(), 1, weights)?);
    let mean = tape.edge_weighted_sum(c, x, adj)?;
    let both = tape.concat(&[x, mean])?;
    tape.matmul(both, w)
}

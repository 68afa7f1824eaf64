//! GNN backbone: attribute encoders, a table-level encoder per node type and
//! heterogeneous GraphSAGE layers.
//!
//! A SAGE layer computes, for every edge type `et` with local edges `(u, v)`,
//! the message `h_u W_et`, aggregates messages per target node across all
//! incoming edge types (sum or mean, zero when there are none), and updates
//! `h'_v = relu([h_v, M_v] U_{type(v)})`.

use std::borrow::Borrow;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::encoders::{AttributeEncoders, EncoderStats, DEFAULT_TEXT_BUCKETS};
use crate::error::{Error, Result};
use crate::graph::{schema_graph, EdgeTypeId, GraphSchema, HeteroGraph, NodeId};
use crate::relational::{DatabaseSchema, Row};
use crate::sampler::Subgraph;
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Aggregation {
    Sum,
    Mean,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TableEncoderKind {
    LinearConcat,
    TabularResNet,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub aggregation: Aggregation,
    pub table_encoder: TableEncoderKind,
    pub resnet_blocks: usize,
    pub attr_dim: usize,
    pub text_buckets: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            hidden_dim: 128,
            num_layers: 2,
            aggregation: Aggregation::Mean,
            table_encoder: TableEncoderKind::LinearConcat,
            resnet_blocks: 2,
            attr_dim: 32,
            text_buckets: DEFAULT_TEXT_BUCKETS,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || self.num_layers == 0 || self.attr_dim == 0 || self.text_buckets == 0 {
            return Err(Error::Config(
                "hidden_dim, num_layers, attr_dim and text_buckets must be >= 1".into(),
            ));
        }
        Ok(())
    }

    /// Hex SHA-256 identifying this architecture on `graph`.
    pub fn hash(&self, graph: &GraphSchema) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(self).expect("config serializes"));
        h.update(serde_json::to_vec(graph).expect("graph schema serializes"));
        hex::encode(h.finalize())
    }
}

/// Whether batch normalization uses batch or running statistics.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Batch statistics to fold into running statistics after a step.
#[derive(Clone, Debug, PartialEq)]
pub struct BnUpdate {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// `running <- (1 - momentum) running + momentum batch`.
pub fn apply_bn_updates(store: &mut ParamStore, updates: &[BnUpdate]) {
    for u in updates {
        for (id, batch) in [(u.running_mean, &u.mean), (u.running_var, &u.var)] {
            for (r, b) in store.tensor_mut(id).data_mut().iter_mut().zip(batch) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * b;
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::filled(1, dim, 1.0), true)?,
            beta: store.zeros(format!("{name}.beta"), 1, dim)?,
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(1, dim), false)?,
            running_var: store.add(format!("{name}.running_var"), Tensor::filled(1, dim, 1.0), false)?,
        })
    }

    /// Batch statistics need at least two rows; smaller batches fall back
    /// to running statistics.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let gamma = tape.param(store, self.gamma);
        let beta = tape.param(store, self.beta);
        if mode == Mode::Train && tape.value(x).rows() >= 2 {
            let (y, mean, var) = tape.batch_norm_train(x, gamma, beta, BN_EPS)?;
            updates.push(BnUpdate {
                running_mean: self.running_mean,
                running_var: self.running_var,
                mean,
                var,
            });
            Ok(y)
        } else {
            let mean = store.tensor(self.running_mean).data().to_vec();
            let var = store.tensor(self.running_var).data().to_vec();
            tape.batch_norm_eval(x, gamma, beta, &mean, &var, BN_EPS)
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: Option<ParamId>,
    pub b: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) -> Result<Self> {
        let w = if fan_in > 0 {
            Some(store.glorot(format!("{name}.w"), fan_in, fan_out, rng)?)
        } else {
            None
        };
        Ok(Linear {
            w,
            b: store.zeros(format!("{name}.b"), 1, fan_out)?,
        })
    }

    /// `x W + b`. With zero input width, every one of the `n` rows is `b`.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Option<Var>, n: usize) -> Result<Var> {
        let b = tape.param(store, self.b);
        match (self.w, x) {
            (Some(w), Some(x)) => {
                let w = tape.param(store, w);
                let y = tape.matmul(x, w)?;
                tape.add_row(y, b)
            }
            (None, None) => tape.gather_rows(b, vec![0; n]),
            _ => Err(Error::ShapeMismatch {
                op: "linear",
                lhs: vec![n, usize::from(x.is_some())],
                rhs: vec![usize::from(self.w.is_some())],
            }),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ResBlock {
    pub bn: BatchNorm,
    pub linear: Linear,
}

#[derive(Clone, Debug)]
pub enum TableEncoder {
    Linear(Linear),
    ResNet { stem: Linear, blocks: Vec<ResBlock> },
}

fn concat_or_none(tape: &mut Tape, attrs: &[Var]) -> Result<Option<Var>> {
    match attrs.len() {
        0 => Ok(None),
        1 => Ok(Some(attrs[0])),
        _ => tape.concat_cols(attrs).map(Some),
    }
}

/// `concat(attrs) W + b`.
pub fn table_linear(tape: &mut Tape, store: &ParamStore, attrs: &[Var], lin: &Linear, n: usize) -> Result<Var> {
    let x = concat_or_none(tape, attrs)?;
    lin.forward(tape, store, x, n)
}

/// Stem linear map followed by residual blocks `x + linear(relu(bn(x)))`.
#[allow(clippy::too_many_arguments)]
pub fn table_resnet(
    tape: &mut Tape,
    store: &ParamStore,
    attrs: &[Var],
    stem: &Linear,
    blocks: &[ResBlock],
    n: usize,
    mode: Mode,
    updates: &mut Vec<BnUpdate>,
) -> Result<Var> {
    let x = concat_or_none(tape, attrs)?;
    let mut h = stem.forward(tape, store, x, n)?;
    for block in blocks {
        let y = block.bn.forward(tape, store, h, mode, updates)?;
        let y = tape.relu(y);
        let y = block.linear.forward(tape, store, Some(y), n)?;
        h = tape.add(h, y)?;
    }
    Ok(h)
}

#[derive(Clone, Debug)]
pub struct SageLayer {
    /// Message weight per edge type.
    pub message: Vec<ParamId>,
    /// Update weight per node type, `2 hidden x hidden`.
    pub update: Vec<ParamId>,
}

/// One heterogeneous GraphSAGE layer over the local edges of `sub`.
pub fn sage_layer(
    tape: &mut Tape,
    store: &ParamStore,
    graph: &GraphSchema,
    sub: &Subgraph,
    h: &[Var],
    layer: &SageLayer,
    aggregation: Aggregation,
) -> Result<Vec<Var>> {
    let nt = graph.num_node_types();
    if h.len() != nt || layer.update.len() != nt || layer.message.len() != graph.num_edge_types() {
        return Err(Error::ShapeMismatch {
            op: "sage_layer",
            lhs: vec![nt, graph.num_edge_types()],
            rhs: vec![h.len(), layer.message.len()],
        });
    }
    let mut acc: Vec<Option<Var>> = vec![None; nt];
    let mut degree: Vec<Vec<usize>> = sub.nodes.iter().map(|n| vec![0; n.len()]).collect();
    for (e, edges) in sub.edges.iter().enumerate() {
        if edges.is_empty() {
            continue;
        }
        let et = graph.edge_type(EdgeTypeId(e));
        let (s, t) = (et.source.0, et.target.0);
        let w = tape.param(store, layer.message[e]);
        let hw = tape.matmul(h[s], w)?;
        let msgs = tape.gather_rows(hw, edges.iter().map(|&(u, _)| u).collect())?;
        let dst: Vec<usize> = edges.iter().map(|&(_, v)| v).collect();
        for &v in &dst {
            degree[t][v] += 1;
        }
        let agg = tape.scatter_add_rows(msgs, dst, sub.nodes[t].len())?;
        acc[t] = Some(match acc[t] {
            Some(a) => tape.add(a, agg)?,
            None => agg,
        });
    }
    let mut out = Vec::with_capacity(nt);
    for t in 0..nt {
        let hv = tape.value(h[t]);
        let (n, d) = (hv.rows(), hv.cols());
        let m = match acc[t] {
            Some(m) if aggregation == Aggregation::Mean => {
                let inv = degree[t]
                    .iter()
                    .map(|&k| if k == 0 { 0.0 } else { 1.0 / k as f64 })
                    .collect();
                tape.scale_rows(m, inv)?
            }
            Some(m) => m,
            None => tape.constant(Tensor::zeros(n, d)),
        };
        let x = tape.concat_cols(&[h[t], m])?;
        let u = tape.param(store, layer.update[t]);
        let y = tape.matmul(x, u)?;
        out.push(tape.relu(y));
    }
    Ok(out)
}

/// Final embeddings per node type plus batch statistics gathered on the way.
#[derive(Debug)]
pub struct ForwardOutput {
    pub h: Vec<Var>,
    pub bn_updates: Vec<BnUpdate>,
}

/// Architecture description stored with checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneMeta {
    pub config: BackboneConfig,
    pub stats: EncoderStats,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    pub graph: GraphSchema,
    pub encoders: AttributeEncoders,
    pub tables: Vec<TableEncoder>,
    pub layers: Vec<SageLayer>,
}

pub const BACKBONE_PREFIX: &str = "backbone.";

impl Backbone {
    /// Registers all backbone parameters (names start with `backbone.`).
    pub fn new<R: Rng>(
        schema: &DatabaseSchema,
        stats: EncoderStats,
        config: BackboneConfig,
        store: &mut ParamStore,
        rng: &mut R,
    ) -> Result<Self> {
        config.validate()?;
        let graph = schema_graph(schema);
        let encoders = AttributeEncoders::new(schema, stats, config.attr_dim, "backbone.enc", store, rng)?;
        let hd = config.hidden_dim;
        let mut tables = Vec::with_capacity(graph.num_node_types());
        for (t, name) in graph.node_names.iter().enumerate() {
            let fan_in = encoders.width(t) * config.attr_dim;
            let base = format!("backbone.table.{name}");
            tables.push(match config.table_encoder {
                TableEncoderKind::LinearConcat => TableEncoder::Linear(Linear::new(store, &base, fan_in, hd, rng)?),
                TableEncoderKind::TabularResNet => {
                    let stem = Linear::new(store, &format!("{base}.stem"), fan_in, hd, rng)?;
                    let blocks = (0..config.resnet_blocks)
                        .map(|k| {
                            Ok(ResBlock {
                                bn: BatchNorm::new(store, &format!("{base}.block{k}.bn"), hd)?,
                                linear: Linear::new(store, &format!("{base}.block{k}.lin"), hd, hd, rng)?,
                            })
                        })
                        .collect::<Result<_>>()?;
                    TableEncoder::ResNet { stem, blocks }
                }
            });
        }
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let message = graph
                .edge_types
                .iter()
                .map(|et| store.glorot(format!("backbone.sage{l}.msg.{}", et.name), hd, hd, rng))
                .collect::<Result<_>>()?;
            let update = graph
                .node_names
                .iter()
                .map(|n| store.glorot(format!("backbone.sage{l}.upd.{n}"), 2 * hd, hd, rng))
                .collect::<Result<_>>()?;
            layers.push(SageLayer { message, update });
        }
        Ok(Backbone {
            config,
            graph,
            encoders,
            tables,
            layers,
        })
    }

    pub fn meta(&self) -> BackboneMeta {
        BackboneMeta {
            config: self.config.clone(),
            stats: self.encoders.stats.clone(),
        }
    }

    pub fn config_hash(&self) -> String {
        self.config.hash(&self.graph)
    }

    /// Initial node embeddings of type `t` from raw rows.
    pub fn encode_table<R: Borrow<Row>>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        t: usize,
        rows: &[R],
        mode: Mode,
        updates: &mut Vec<BnUpdate>,
    ) -> Result<Var> {
        let attrs = self.encoders.encode_attributes(tape, store, t, rows)?;
        match &self.tables[t] {
            TableEncoder::Linear(lin) => table_linear(tape, store, &attrs, lin, rows.len()),
            TableEncoder::ResNet { stem, blocks } => {
                table_resnet(tape, store, &attrs, stem, blocks, rows.len(), mode, updates)
            }
        }
    }

    /// Embeds every node of `sub`; `rows[t][i]` is the row of local node `i`
    /// of type `t`.
    pub fn forward<R: Borrow<Row>>(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        sub: &Subgraph,
        rows: &[Vec<R>],
        mode: Mode,
    ) -> Result<ForwardOutput> {
        let nt = self.graph.num_node_types();
        if rows.len() != nt || sub.nodes.len() != nt || rows.iter().zip(&sub.nodes).any(|(r, n)| r.len() != n.len()) {
            return Err(Error::ShapeMismatch {
                op: "backbone_forward",
                lhs: sub.nodes.iter().map(Vec::len).collect(),
                rhs: rows.iter().map(Vec::len).collect(),
            });
        }
        let mut bn_updates = Vec::new();
        let mut h = (0..nt)
            .map(|t| self.encode_table(tape, store, t, &rows[t], mode, &mut bn_updates))
            .collect::<Result<Vec<_>>>()?;
        for layer in &self.layers {
            h = sage_layer(tape, store, &self.graph, sub, &h, layer, self.config.aggregation)?;
        }
        Ok(ForwardOutput { h, bn_updates })
    }

    /// [`Backbone::forward`] on the graph's own rows.
    pub fn embed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        g: &HeteroGraph,
        sub: &Subgraph,
        mode: Mode,
    ) -> Result<ForwardOutput> {
        let rows = subgraph_rows(g, sub)?;
        self.forward(tape, store, sub, &rows, mode)
    }
}

/// Rows of the subgraph's nodes, per type in local order.
pub fn subgraph_rows<'g>(g: &'g HeteroGraph, sub: &Subgraph) -> Result<Vec<Vec<&'g Row>>> {
    sub.nodes
        .iter()
        .enumerate()
        .map(|(t, nodes)| {
            nodes
                .iter()
                .map(|&i| g.row(NodeId::new(crate::graph::NodeType(t), i)))
                .collect()
        })
        .collect()
}

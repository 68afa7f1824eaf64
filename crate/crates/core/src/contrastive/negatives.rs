use std::collections::BTreeSet;

use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeTypeId, GraphSchema, HeteroGraph, NodeId, NodeType};
use crate::sampler::Subgraph;

pub const DEFAULT_N_MAX: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NegativeConfig {
    pub n_max: usize,
}

impl Default for NegativeConfig {
    fn default() -> Self {
        NegativeConfig { n_max: DEFAULT_N_MAX }
    }
}

/// What a set of negatives is drawn for. Indices are local to the subgraph.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Anchor {
    Row(NodeId),
    /// Local edge `(source, target)` of a forward edge type.
    Link {
        edge_type: EdgeTypeId,
        source: usize,
        target: usize,
    },
    Context(NodeId),
}

/// Distinct in-neighbors over forward edge types, per node type and local
/// node, as `(source type, local source)` pairs.
pub fn forward_in_neighbors(graph: &GraphSchema, sub: &Subgraph) -> Vec<Vec<BTreeSet<(usize, usize)>>> {
    let mut out: Vec<Vec<BTreeSet<(usize, usize)>>> =
        sub.nodes.iter().map(|n| vec![BTreeSet::new(); n.len()]).collect();
    for et in graph.forward_edge_types() {
        let e = graph.edge_type(et);
        for &(u, v) in &sub.edges[et.0] {
            out[e.target.0][v].insert((e.source.0, u));
        }
    }
    out
}

/// Whether each local node has a defined context embedding.
pub fn context_defined(graph: &GraphSchema, sub: &Subgraph) -> Vec<Vec<bool>> {
    forward_in_neighbors(graph, sub)
        .into_iter()
        .map(|t| t.into_iter().map(|s| !s.is_empty()).collect())
        .collect()
}

fn draw<R: Rng>(pool: &[usize], n_max: usize, rng: &mut R) -> Vec<usize> {
    let k = n_max.min(pool.len());
    index::sample(rng, pool.len(), k).into_iter().map(|i| pool[i]).collect()
}

/// Uniform draw without replacement of up to `n_max` negatives of the
/// anchor's type, excluding the anchor.
pub fn sample_negatives<R: Rng>(
    g: &HeteroGraph,
    sub: &Subgraph,
    anchor: Anchor,
    n_max: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let defined = match anchor {
        Anchor::Context(_) => Some(context_defined(&g.schema, sub)),
        _ => None,
    };
    negatives_for(g, sub, anchor, defined.as_deref(), n_max, rng)
}

pub(crate) fn negatives_for<R: Rng>(
    g: &HeteroGraph,
    sub: &Subgraph,
    anchor: Anchor,
    defined: Option<&[Vec<bool>]>,
    n_max: usize,
    rng: &mut R,
) -> Result<Vec<usize>> {
    let check = |t: NodeType, i: usize| -> Result<()> {
        if t.0 >= sub.nodes.len() || i >= sub.nodes[t.0].len() {
            return Err(Error::InvalidNode {
                node_type: t.0,
                index: i,
            });
        }
        Ok(())
    };
    match anchor {
        Anchor::Row(v) => {
            check(v.node_type, v.index)?;
            let n = sub.count(v.node_type);
            let k = n_max.min(n - 1);
            Ok(index::sample(rng, n - 1, k)
                .into_iter()
                .map(|i| if i >= v.index { i + 1 } else { i })
                .collect())
        }
        Anchor::Link {
            edge_type,
            source,
            target,
        } => {
            let et = g.schema.edge_type(edge_type);
            check(et.source, source)?;
            check(et.target, target)?;
            let gv = sub.nodes[et.target.0][target];
            let pool: Vec<usize> = (0..sub.count(et.source))
                .filter(|&w| w != source && !g.has_edge(edge_type, sub.nodes[et.source.0][w], gv))
                .collect();
            Ok(draw(&pool, n_max, rng))
        }
        Anchor::Context(v) => {
            check(v.node_type, v.index)?;
            let defined = defined.expect("context mask");
            let pool: Vec<usize> = (0..sub.count(v.node_type))
                .filter(|&u| u != v.index && defined[v.node_type.0][u])
                .collect();
            Ok(draw(&pool, n_max, rng))
        }
    }
}

/// An anchor (node, or local edge index) with its negatives.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnchorNegatives {
    pub anchor: usize,
    pub negatives: Vec<usize>,
}

/// Negatives for every anchor of one subgraph.
///
/// `row` and `context` are per node type; `link` is per edge type and empty
/// for reverse edge types. Context anchors are only the nodes with a
/// defined context embedding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NegativePlan {
    pub row: Vec<Vec<AnchorNegatives>>,
    pub link: Vec<Vec<AnchorNegatives>>,
    pub context: Vec<Vec<AnchorNegatives>>,
    pub defined: Vec<Vec<bool>>,
}

/// Draws negatives for all anchors: rows by type, then forward links by
/// edge type, then contexts by type, each in local order.
pub fn plan_negatives<R: Rng>(g: &HeteroGraph, sub: &Subgraph, n_max: usize, rng: &mut R) -> Result<NegativePlan> {
    let graph = &g.schema;
    let defined = context_defined(graph, sub);
    let mut row = Vec::with_capacity(sub.nodes.len());
    for (t, nodes) in sub.nodes.iter().enumerate() {
        let list = (0..nodes.len())
            .map(|i| {
                let negatives = negatives_for(g, sub, Anchor::Row(NodeId::new(NodeType(t), i)), None, n_max, rng)?;
                Ok(AnchorNegatives { anchor: i, negatives })
            })
            .collect::<Result<_>>()?;
        row.push(list);
    }
    let mut link = vec![Vec::new(); graph.num_edge_types()];
    for et in graph.forward_edge_types() {
        link[et.0] = sub.edges[et.0]
            .iter()
            .enumerate()
            .map(|(k, &(u, v))| {
                let anchor = Anchor::Link {
                    edge_type: et,
                    source: u,
                    target: v,
                };
                let negatives = negatives_for(g, sub, anchor, None, n_max, rng)?;
                Ok(AnchorNegatives { anchor: k, negatives })
            })
            .collect::<Result<_>>()?;
    }
    let mut context = Vec::with_capacity(sub.nodes.len());
    for (t, mask) in defined.iter().enumerate() {
        let list = (0..mask.len())
            .filter(|&i| mask[i])
            .map(|i| {
                let anchor = Anchor::Context(NodeId::new(NodeType(t), i));
                let negatives = negatives_for(g, sub, anchor, Some(&defined), n_max, rng)?;
                Ok(AnchorNegatives { anchor: i, negatives })
            })
            .collect::<Result<_>>()?;
        context.push(list);
    }
    Ok(NegativePlan {
        row,
        link,
        context,
        defined,
    })
}

//! Subgraph samplers.
//!
//! [`hg_sample`] is the type-balanced budget sampler used for pretraining: it
//! starts from seeds of one node type and, for a fixed number of rounds, adds
//! up to a fixed number of frontier nodes per node type, favouring nodes with
//! many edges into the current sample. [`neighbor_sample`] is the fan-out
//! limited breadth-first sampler used for fine-tuning, optionally restricted
//! to nodes no later than a per-seed time cutoff.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{EdgeTypeId, HeteroGraph, NodeId, NodeType};
use crate::relational::DatabaseSchema;
use crate::seeding::derive_seed;

/// A sampled subgraph with local node numbering per type.
///
/// Local edges are stored per edge type as `(local source, local target)`.
/// In shared mode every global node appears at most once and the edge set is
/// the induced closure. In disjoint mode (temporal neighbor sampling) each
/// seed owns a separate component; a global node may appear once per
/// component, and edges are induced within components only.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Subgraph {
    pub nodes: Vec<Vec<usize>>,
    pub edges: Vec<Vec<(usize, usize)>>,
    pub seeds: Vec<NodeId>,
    /// Disjoint mode only: seed ordinal owning each local node.
    pub component: Option<Vec<Vec<usize>>>,
    global_to_local: Vec<HashMap<usize, usize>>,
}

impl Subgraph {
    pub fn num_nodes(&self) -> usize {
        self.nodes.iter().map(Vec::len).sum()
    }

    pub fn num_edges(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    pub fn count(&self, t: NodeType) -> usize {
        self.nodes[t.0].len()
    }

    /// Local index of global node `global` of type `t` (shared mode only).
    pub fn local_index(&self, t: NodeType, global: usize) -> Option<usize> {
        self.global_to_local[t.0].get(&global).copied()
    }

    pub fn global(&self, v: NodeId) -> NodeId {
        NodeId::new(v.node_type, self.nodes[v.node_type.0][v.index])
    }

    pub fn is_disjoint(&self) -> bool {
        self.component.is_some()
    }

    /// Builds a shared-mode subgraph from per-type global node lists and
    /// induces every parent edge between included nodes.
    pub fn induced(g: &HeteroGraph, nodes: Vec<Vec<usize>>, seeds: Vec<NodeId>) -> Subgraph {
        let global_to_local: Vec<HashMap<usize, usize>> = nodes
            .iter()
            .map(|l| l.iter().enumerate().map(|(i, &x)| (x, i)).collect())
            .collect();
        let edges = g
            .schema
            .edge_types
            .iter()
            .enumerate()
            .map(|(ei, e)| {
                let mut out = Vec::new();
                for (lv, &gv) in nodes[e.target.0].iter().enumerate() {
                    for u in g.in_neighbors(EdgeTypeId(ei), gv) {
                        if let Some(&lu) = global_to_local[e.source.0].get(u) {
                            out.push((lu, lv));
                        }
                    }
                }
                out
            })
            .collect();
        Subgraph {
            nodes,
            edges,
            seeds,
            component: None,
            global_to_local,
        }
    }

    /// Per-type node counts and per-edge-type edge counts keyed by name.
    pub fn census(&self, g: &HeteroGraph) -> Census {
        Census {
            nodes: g
                .schema
                .node_names
                .iter()
                .cloned()
                .zip(self.nodes.iter().map(Vec::len))
                .collect(),
            edges: g
                .schema
                .edge_types
                .iter()
                .map(|e| e.name.clone())
                .zip(self.edges.iter().map(Vec::len))
                .collect(),
            seeds: self.seeds.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Census {
    pub nodes: BTreeMap<String, usize>,
    pub edges: BTreeMap<String, usize>,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HgSamplerConfig {
    pub per_type_budget: usize,
    pub iterations: usize,
    pub seed_type: NodeType,
    pub seed_count: usize,
    pub rng_seed: u64,
}

impl HgSamplerConfig {
    pub fn new(seed_type: NodeType, rng_seed: u64) -> Self {
        HgSamplerConfig {
            per_type_budget: 64,
            iterations: 3,
            seed_type,
            seed_count: 64,
            rng_seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.per_type_budget == 0 || self.iterations == 0 || self.seed_count == 0 {
            return Err(Error::Config(
                "sampler budget, iterations and seed count must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NeighborSamplerConfig {
    pub fanout: usize,
    pub depth: usize,
    pub time_cutoffs: Option<Vec<i64>>,
    pub rng_seed: u64,
}

impl NeighborSamplerConfig {
    pub fn new(depth: usize, rng_seed: u64) -> Self {
        NeighborSamplerConfig {
            fanout: 128,
            depth,
            time_cutoffs: None,
            rng_seed,
        }
    }
}

/// The table with the most foreign key columns; ties go to the earlier table.
pub fn pick_seed_type(schema: &DatabaseSchema) -> Option<NodeType> {
    let mut best: Option<(usize, usize)> = None;
    for (i, t) in schema.tables().iter().enumerate() {
        let n = t.foreign_key_count();
        if best.is_none_or(|(_, b)| n > b) {
            best = Some((i, n));
        }
    }
    best.map(|(i, _)| NodeType(i))
}

/// Type-balanced budget sampling. See the module docs.
pub fn hg_sample(g: &HeteroGraph, cfg: &HgSamplerConfig) -> Result<Subgraph> {
    cfg.validate()?;
    if g.total_nodes() == 0 {
        return Err(Error::EmptyGraph);
    }
    let seed_type = cfg.seed_type;
    if seed_type.0 >= g.num_node_types() {
        return Err(Error::UnknownSeedType(format!("{}", seed_type.0)));
    }
    let pool = g.node_count(seed_type);
    if pool == 0 {
        return Err(Error::EmptyGraph);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let ntypes = g.num_node_types();

    let mut seeds = index::sample(&mut rng, pool, cfg.seed_count.min(pool)).into_vec();
    seeds.sort_unstable();
    let mut nodes: Vec<Vec<usize>> = vec![Vec::new(); ntypes];
    let mut included: Vec<HashSet<usize>> = vec![HashSet::new(); ntypes];
    for &s in &seeds {
        nodes[seed_type.0].push(s);
        included[seed_type.0].insert(s);
    }

    for _ in 0..cfg.iterations {
        // Frontier snapshot: candidate -> number of edges into the sample.
        let mut frontier: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); ntypes];
        for t in 0..ntypes {
            for et in g.schema.incoming_edge_types(NodeType(t)) {
                let src = g.schema.edge_type(et).source;
                if src == seed_type {
                    continue;
                }
                for &v in &nodes[t] {
                    for &u in g.in_neighbors(et, v) {
                        if !included[src.0].contains(&u) {
                            *frontier[src.0].entry(u).or_insert(0) += 1;
                        }
                    }
                }
            }
        }
        for (t, cands) in frontier.into_iter().enumerate() {
            if t == seed_type.0 || cands.is_empty() {
                continue;
            }
            let cands: Vec<(usize, usize)> = cands.into_iter().collect();
            let mut picked: Vec<usize> = if cands.len() <= cfg.per_type_budget {
                cands.iter().map(|c| c.0).collect()
            } else {
                cands
                    .choose_multiple_weighted(&mut rng, cfg.per_type_budget, |c| (c.1 + 1) as f64)
                    .expect("positive finite weights")
                    .map(|c| c.0)
                    .collect()
            };
            picked.sort_unstable();
            for u in picked {
                included[t].insert(u);
                nodes[t].push(u);
            }
        }
    }

    let seed_ids = (0..seeds.len()).map(|i| NodeId::new(seed_type, i)).collect();
    Ok(Subgraph::induced(g, nodes, seed_ids))
}

fn sample_up_to(rng: &mut ChaCha8Rng, cands: &[usize], k: usize) -> Vec<usize> {
    if cands.len() <= k {
        cands.to_vec()
    } else {
        index::sample(rng, cands.len(), k)
            .into_iter()
            .map(|i| cands[i])
            .collect()
    }
}

/// Breadth-first expansion from one seed. Returns per-type global node lists
/// in discovery order.
fn expand(
    g: &HeteroGraph,
    seeds: &[NodeId],
    fanout: usize,
    depth: usize,
    cutoff: Option<i64>,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<usize>> {
    let ntypes = g.num_node_types();
    let mut nodes: Vec<Vec<usize>> = vec![Vec::new(); ntypes];
    let mut included: Vec<HashSet<usize>> = vec![HashSet::new(); ntypes];
    let mut frontier = Vec::new();
    for s in seeds {
        if included[s.node_type.0].insert(s.index) {
            nodes[s.node_type.0].push(s.index);
            frontier.push(*s);
        }
    }
    let mut cands = Vec::new();
    for _ in 0..depth {
        let mut next = Vec::new();
        for v in &frontier {
            for et in g.schema.incoming_edge_types(v.node_type) {
                let src = g.schema.edge_type(et).source;
                cands.clear();
                cands.extend(g.in_neighbors(et, v.index).iter().copied().filter(|&u| {
                    match (cutoff, g.time_of(src, u)) {
                        (Some(c), Some(t)) => t <= c,
                        _ => true,
                    }
                }));
                for u in sample_up_to(rng, &cands, fanout) {
                    if included[src.0].insert(u) {
                        nodes[src.0].push(u);
                        next.push(NodeId::new(src, u));
                    }
                }
            }
        }
        frontier = next;
    }
    nodes
}

/// Fan-out limited breadth-first sampling over all edge types.
///
/// Without time cutoffs the seeds share one subgraph (induced closure). With
/// cutoffs each seed is expanded separately using only neighbors whose time
/// is absent or not after that seed's cutoff, and the components are kept
/// disjoint so no seed can see another seed's admissible nodes.
pub fn neighbor_sample(
    g: &HeteroGraph,
    seeds: &[NodeId],
    cfg: &NeighborSamplerConfig,
) -> Result<Subgraph> {
    for s in seeds {
        if s.node_type.0 >= g.num_node_types() || s.index >= g.node_count(s.node_type) {
            return Err(Error::InvalidSeed(format!("{}:{}", s.node_type.0, s.index)));
        }
    }
    let Some(cutoffs) = &cfg.time_cutoffs else {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
        let nodes = expand(g, seeds, cfg.fanout, cfg.depth, None, &mut rng);
        let seed_ids = seeds
            .iter()
            .map(|s| {
                let local = nodes[s.node_type.0]
                    .iter()
                    .position(|&x| x == s.index)
                    .expect("seed included");
                NodeId::new(s.node_type, local)
            })
            .collect();
        return Ok(Subgraph::induced(g, nodes, seed_ids));
    };
    if cutoffs.len() != seeds.len() {
        return Err(Error::InvalidSeed(format!(
            "{} seeds but {} time cutoffs",
            seeds.len(),
            cutoffs.len()
        )));
    }

    // Each component draws from its own stream so results do not depend on
    // scheduling.
    let components: Vec<Subgraph> = crate::par::map_range(seeds.len(), |i| {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.rng_seed, i as u64));
        let nodes = expand(
            g,
            &seeds[i..=i],
            cfg.fanout,
            cfg.depth,
            Some(cutoffs[i]),
            &mut rng,
        );
        Subgraph::induced(g, nodes, vec![NodeId::new(seeds[i].node_type, 0)])
    });

    let ntypes = g.num_node_types();
    let nedge = g.schema.num_edge_types();
    let mut nodes: Vec<Vec<usize>> = vec![Vec::new(); ntypes];
    let mut component: Vec<Vec<usize>> = vec![Vec::new(); ntypes];
    let mut edges: Vec<Vec<(usize, usize)>> = vec![Vec::new(); nedge];
    let mut seed_ids = Vec::with_capacity(seeds.len());
    for (ci, comp) in components.into_iter().enumerate() {
        let offsets: Vec<usize> = nodes.iter().map(Vec::len).collect();
        for t in 0..ntypes {
            nodes[t].extend_from_slice(&comp.nodes[t]);
            component[t].extend(std::iter::repeat_n(ci, comp.nodes[t].len()));
        }
        for (e, list) in comp.edges.iter().enumerate() {
            let et = g.schema.edge_type(EdgeTypeId(e));
            let (so, to) = (offsets[et.source.0], offsets[et.target.0]);
            edges[e].extend(list.iter().map(|&(u, v)| (u + so, v + to)));
        }
        let s = comp.seeds[0];
        seed_ids.push(NodeId::new(s.node_type, s.index + offsets[s.node_type.0]));
    }
    Ok(Subgraph {
        nodes,
        edges,
        seeds: seed_ids,
        component: Some(component),
        global_to_local: vec![HashMap::new(); ntypes],
    })
}

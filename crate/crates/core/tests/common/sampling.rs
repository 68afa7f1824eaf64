//! A large skewed graph and brute-force references for sampler checks.

use std::collections::{BTreeSet, HashSet, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rdl_core::graph::{build_graph, EdgeTypeId, HeteroGraph, NodeId};
use rdl_core::relational::{Attribute, Database, DatabaseSchema, Row, SemanticType, TableSchema, Value};
use rdl_core::sampler::Subgraph;

use super::T0;

/// Edges of `g` whose endpoints are both in the given local node lists, in local numbering.
pub fn brute_closure(g: &HeteroGraph, nodes: &[Vec<usize>]) -> Vec<BTreeSet<(usize, usize)>> {
    (0..g.schema.num_edge_types())
        .map(|e| {
            let et = g.schema.edge_type(EdgeTypeId(e));
            let mut set = BTreeSet::new();
            for (lu, &u) in nodes[et.source.0].iter().enumerate() {
                for (lv, &v) in nodes[et.target.0].iter().enumerate() {
                    if g.edges(EdgeTypeId(e)).contains(&(u, v)) {
                        set.insert((lu, lv));
                    }
                }
            }
            set
        })
        .collect()
}

pub fn edge_sets(sub: &Subgraph) -> Vec<BTreeSet<(usize, usize)>> {
    sub.edges.iter().map(|l| l.iter().copied().collect()).collect()
}

fn attr(name: &str, stype: SemanticType) -> Attribute {
    Attribute::new(name, stype)
}

/// Hubs, mid-level rows referencing hubs, and many leaf rows referencing both.
/// Every leaf has a timestamp.
pub fn dense_graph() -> HeteroGraph {
    let schema = DatabaseSchema::new(vec![
        TableSchema {
            name: "hub".into(),
            attributes: vec![attr("hub_id", SemanticType::PrimaryKey)],
            time_attribute: None,
        },
        TableSchema {
            name: "mid".into(),
            attributes: vec![
                attr("mid_id", SemanticType::PrimaryKey),
                attr("hub_ref", SemanticType::ForeignKey("hub".into())),
            ],
            time_attribute: None,
        },
        TableSchema {
            name: "leaf".into(),
            attributes: vec![
                attr("leaf_id", SemanticType::PrimaryKey),
                attr("mid_ref", SemanticType::ForeignKey("mid".into())),
                attr("hub_ref", SemanticType::ForeignKey("hub".into())),
                attr("ts", SemanticType::Timestamp),
            ],
            time_attribute: Some("ts".into()),
        },
    ])
    .unwrap();
    let key = |p: &str, i: usize| Value::Key(format!("{p}{i}"));
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (nh, nm, nl) = (500, 5_000, 50_000);
    let hub = (0..nh).map(|i| Row::new(vec![key("h", i)])).collect();
    let mid = (0..nm).map(|i| Row::new(vec![key("m", i), key("h", rng.gen_range(0..nh))])).collect();
    let leaf = (0..nl)
        .map(|i| {
            Row::new(vec![
                key("l", i),
                key("m", rng.gen_range(0..nm)),
                key("h", rng.gen_range(0..nh)),
                Value::Time(T0 + rng.gen_range(0..10_000)),
            ])
        })
        .collect();
    build_graph(&Database::from_rows(schema, vec![hub, mid, leaf]).unwrap()).unwrap()
}

/// Unrestricted breadth-first search over every edge type.
pub fn naive_bfs(g: &HeteroGraph, seeds: &[NodeId], depth: usize) -> Vec<usize> {
    let mut seen: HashSet<NodeId> = seeds.iter().copied().collect();
    let mut queue: VecDeque<(NodeId, usize)> = seeds.iter().map(|&s| (s, 0)).collect();
    while let Some((v, d)) = queue.pop_front() {
        if d == depth {
            continue;
        }
        for et in g.schema.incoming_edge_types(v.node_type) {
            for u in g.neighbors(v, et).unwrap() {
                if seen.insert(u) {
                    queue.push_back((u, d + 1));
                }
            }
        }
    }
    let mut counts = vec![0; g.num_node_types()];
    for v in seen {
        counts[v.node_type.0] += 1;
    }
    counts
}

pub fn ratio(counts: &[usize]) -> f64 {
    *counts.iter().max().unwrap() as f64 / *counts.iter().min().unwrap() as f64
}

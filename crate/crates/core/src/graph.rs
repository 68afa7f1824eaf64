//! Heterogeneous graph view of a database.
//!
//! One node type per table, one node per row. Every foreign key column gives
//! a pair of edge types: `Forward` runs from the row holding the foreign key
//! to the row it references, `Reverse` is its exact transpose. Edge types are
//! laid out so that a forward type at index `2k` has its reverse twin at
//! `2k + 1`.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::relational::{validate_integrity, Database, DatabaseSchema, Row, Value};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeType(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct EdgeTypeId(pub usize);

impl EdgeTypeId {
    /// The opposite-direction edge type of the same foreign key.
    pub fn twin(self) -> EdgeTypeId {
        EdgeTypeId(self.0 ^ 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Direction {
    Forward,
    Reverse,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EdgeType {
    pub name: String,
    pub source: NodeType,
    pub target: NodeType,
    pub fk_column: String,
    pub direction: Direction,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct NodeId {
    pub node_type: NodeType,
    pub index: usize,
}

impl NodeId {
    pub fn new(node_type: NodeType, index: usize) -> Self {
        NodeId { node_type, index }
    }
}

/// Node and edge types derived from a schema alone.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphSchema {
    pub node_names: Vec<String>,
    pub edge_types: Vec<EdgeType>,
}

impl GraphSchema {
    pub fn node_types(&self) -> impl Iterator<Item = NodeType> {
        (0..self.node_names.len()).map(NodeType)
    }

    pub fn num_node_types(&self) -> usize {
        self.node_names.len()
    }

    pub fn num_edge_types(&self) -> usize {
        self.edge_types.len()
    }

    pub fn edge_type(&self, et: EdgeTypeId) -> &EdgeType {
        &self.edge_types[et.0]
    }

    pub fn forward_edge_types(&self) -> impl Iterator<Item = EdgeTypeId> + '_ {
        self.edge_types
            .iter()
            .enumerate()
            .filter(|(_, e)| e.direction == Direction::Forward)
            .map(|(i, _)| EdgeTypeId(i))
    }

    /// Edge types whose target is `t` (the incoming views of `t`).
    pub fn incoming_edge_types(&self, t: NodeType) -> impl Iterator<Item = EdgeTypeId> + '_ {
        self.edge_types
            .iter()
            .enumerate()
            .filter(move |(_, e)| e.target == t)
            .map(|(i, _)| EdgeTypeId(i))
    }

    pub fn node_type_by_name(&self, name: &str) -> Option<NodeType> {
        self.node_names.iter().position(|n| n == name).map(NodeType)
    }
}

/// Derives node and edge types from `schema` in schema order.
pub fn schema_graph(schema: &DatabaseSchema) -> GraphSchema {
    let node_names = schema.tables().iter().map(|t| t.name.clone()).collect();
    let mut edge_types = Vec::new();
    for (ti, table) in schema.tables().iter().enumerate() {
        for (col, target) in table.foreign_keys() {
            let target = NodeType(schema.table_index(target).expect("validated schema"));
            let fk_column = table.attributes[col].name.clone();
            let target_name = &schema.tables()[target.0].name;
            edge_types.push(EdgeType {
                name: format!("{}.{}->{}", table.name, fk_column, target_name),
                source: NodeType(ti),
                target,
                fk_column: fk_column.clone(),
                direction: Direction::Forward,
            });
            edge_types.push(EdgeType {
                name: format!("{}<-{}.{}", target_name, table.name, fk_column),
                source: target,
                target: NodeType(ti),
                fk_column,
                direction: Direction::Reverse,
            });
        }
    }
    GraphSchema {
        node_names,
        edge_types,
    }
}

/// Incoming adjacency of one edge type, compressed by target node.
#[derive(Clone, Debug)]
struct Incoming {
    offsets: Vec<usize>,
    sources: Vec<usize>,
}

impl Incoming {
    fn build(num_targets: usize, edges: &[(usize, usize)]) -> Self {
        let mut offsets = vec![0usize; num_targets + 1];
        for &(_, v) in edges {
            offsets[v + 1] += 1;
        }
        for i in 0..num_targets {
            offsets[i + 1] += offsets[i];
        }
        let mut fill = offsets.clone();
        let mut sources = vec![0usize; edges.len()];
        for &(u, v) in edges {
            sources[fill[v]] = u;
            fill[v] += 1;
        }
        for v in 0..num_targets {
            sources[offsets[v]..offsets[v + 1]].sort_unstable();
        }
        Incoming { offsets, sources }
    }

    fn of(&self, v: usize) -> &[usize] {
        &self.sources[self.offsets[v]..self.offsets[v + 1]]
    }
}

/// The graph built from a database. Immutable after construction.
#[derive(Clone, Debug)]
pub struct HeteroGraph {
    pub schema: GraphSchema,
    db: Database,
    node_counts: Vec<usize>,
    edges: Vec<Vec<(usize, usize)>>,
    times: Vec<Option<Vec<Option<i64>>>>,
    incoming: Vec<Incoming>,
    key_index: Vec<HashMap<String, usize>>,
}

impl HeteroGraph {
    pub fn database(&self) -> &Database {
        &self.db
    }

    pub fn num_node_types(&self) -> usize {
        self.node_counts.len()
    }

    pub fn node_count(&self, t: NodeType) -> usize {
        self.node_counts[t.0]
    }

    pub fn total_nodes(&self) -> usize {
        self.node_counts.iter().sum()
    }

    pub fn edges(&self, et: EdgeTypeId) -> &[(usize, usize)] {
        &self.edges[et.0]
    }

    pub fn total_edges(&self) -> usize {
        self.edges.iter().map(Vec::len).sum()
    }

    fn check(&self, v: NodeId) -> Result<()> {
        if v.node_type.0 < self.node_counts.len() && v.index < self.node_counts[v.node_type.0] {
            Ok(())
        } else {
            Err(Error::InvalidNode {
                node_type: v.node_type.0,
                index: v.index,
            })
        }
    }

    pub fn row(&self, v: NodeId) -> Result<&Row> {
        self.check(v)?;
        Ok(&self.db.rows_at(v.node_type.0)[v.index])
    }

    /// Timestamp of the row behind `v`, if its table has a time attribute
    /// and the cell is not null.
    pub fn node_time(&self, v: NodeId) -> Result<Option<i64>> {
        self.check(v)?;
        Ok(self.time_of(v.node_type, v.index))
    }

    /// Unchecked variant of [`node_time`](Self::node_time) for hot loops.
    pub fn time_of(&self, t: NodeType, index: usize) -> Option<i64> {
        self.times[t.0].as_ref().and_then(|ts| ts[index])
    }

    pub fn has_times(&self, t: NodeType) -> bool {
        self.times[t.0].is_some()
    }

    /// Source nodes `u` of all edges `(u, v)` of type `et`, in ascending index order.
    pub fn neighbors(&self, v: NodeId, et: EdgeTypeId) -> Result<Vec<NodeId>> {
        self.check(v)?;
        let e = self.schema.edge_type(et);
        if e.target != v.node_type {
            return Err(Error::TypeMismatch(format!(
                "edge type {} targets {}, node has type {}",
                e.name, self.schema.node_names[e.target.0], self.schema.node_names[v.node_type.0]
            )));
        }
        Ok(self
            .in_neighbors(et, v.index)
            .iter()
            .map(|&u| NodeId::new(e.source, u))
            .collect())
    }

    /// Unchecked source indices of edges of type `et` ending at `v`.
    pub fn in_neighbors(&self, et: EdgeTypeId, v: usize) -> &[usize] {
        self.incoming[et.0].of(v)
    }

    pub fn has_edge(&self, et: EdgeTypeId, u: usize, v: usize) -> bool {
        self.in_neighbors(et, v).binary_search(&u).is_ok()
    }

    /// Node index of the row whose primary key is `key`.
    pub fn node_by_key(&self, t: NodeType, key: &str) -> Option<usize> {
        self.key_index[t.0].get(key).copied()
    }

    /// Structured dump of node counts, edge lists and times, keyed by type name.
    pub fn dump(&self) -> GraphDump {
        let names = &self.schema.node_names;
        GraphDump {
            node_counts: names
                .iter()
                .cloned()
                .zip(self.node_counts.iter().copied())
                .collect(),
            edges: self
                .schema
                .edge_types
                .iter()
                .zip(&self.edges)
                .map(|(e, l)| (e.name.clone(), l.clone()))
                .collect(),
            times: names
                .iter()
                .zip(&self.times)
                .filter_map(|(n, t)| t.as_ref().map(|t| (n.clone(), t.clone())))
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphDump {
    pub node_counts: BTreeMap<String, usize>,
    pub edges: BTreeMap<String, Vec<(usize, usize)>>,
    pub times: BTreeMap<String, Vec<Option<i64>>>,
}

/// Builds the graph. The database must be integrity-clean.
pub fn build_graph(db: &Database) -> Result<HeteroGraph> {
    let report = validate_integrity(db);
    if !report.is_clean() {
        return Err(Error::Integrity(report.to_string()));
    }
    let schema = schema_graph(&db.schema);
    let tables = db.schema.tables();

    let key_index: Vec<HashMap<String, usize>> = db
        .tables()
        .map(|(ts, rows)| {
            let pk = ts.primary_key_index();
            rows.iter()
                .enumerate()
                .filter_map(|(i, r)| r.values[pk].as_key().map(|k| (k.to_string(), i)))
                .collect()
        })
        .collect();
    let node_counts: Vec<usize> = db.tables().map(|(_, rows)| rows.len()).collect();

    let mut edges = Vec::with_capacity(schema.edge_types.len());
    for pair in schema.edge_types.chunks(2) {
        let fwd = &pair[0];
        let table = &tables[fwd.source.0];
        let col = table
            .attribute_index(&fwd.fk_column)
            .expect("edge type built from schema");
        let mut list = Vec::new();
        for (i, row) in db.rows_at(fwd.source.0).iter().enumerate() {
            if let Some(k) = row.values[col].as_key() {
                list.push((i, key_index[fwd.target.0][k]));
            }
        }
        let reverse = list.iter().map(|&(u, v)| (v, u)).collect();
        edges.push(list);
        edges.push(reverse);
    }

    let incoming = schema
        .edge_types
        .iter()
        .zip(&edges)
        .map(|(e, l)| Incoming::build(node_counts[e.target.0], l))
        .collect();

    let times = db
        .tables()
        .map(|(ts, rows)| {
            ts.time_index().map(|ti| {
                rows.iter()
                    .map(|r| match r.values[ti] {
                        Value::Time(t) => Some(t),
                        _ => None,
                    })
                    .collect()
            })
        })
        .collect();

    Ok(HeteroGraph {
        schema,
        db: db.clone(),
        node_counts,
        edges,
        times,
        incoming,
        key_index,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::relational::{Attribute, SemanticType, TableSchema};

    fn key(s: String) -> Value {
        Value::Key(s)
    }

    fn parent_child(children: usize, parents: usize, null_every: usize) -> Database {
        let schema = DatabaseSchema::new(vec![
            TableSchema {
                name: "parent".into(),
                attributes: vec![Attribute::new("id", SemanticType::PrimaryKey)],
                time_attribute: None,
            },
            TableSchema {
                name: "child".into(),
                attributes: vec![
                    Attribute::new("id", SemanticType::PrimaryKey),
                    Attribute::new("pid", SemanticType::ForeignKey("parent".into())),
                    Attribute::new("ts", SemanticType::Timestamp),
                ],
                time_attribute: Some("ts".into()),
            },
        ])
        .unwrap();
        let p = (0..parents)
            .map(|i| Row::new(vec![key(format!("p{i}"))]))
            .collect();
        let c = (0..children)
            .map(|i| {
                let fk = if null_every > 0 && i % null_every == 0 {
                    Value::Null
                } else {
                    key(format!("p{}", i % parents))
                };
                Row::new(vec![key(format!("c{i}")), fk, Value::Time(100 + i as i64)])
            })
            .collect();
        Database::from_rows(schema, vec![p, c]).unwrap()
    }

    #[test]
    fn ten_children_three_parents() {
        let g = build_graph(&parent_child(10, 3, 0)).unwrap();
        assert_eq!(g.total_nodes(), 13);
        assert_eq!(g.edges(EdgeTypeId(0)).len(), 10);
        assert_eq!(g.edges(EdgeTypeId(1)).len(), 10);
        assert_eq!(g.schema.edge_type(EdgeTypeId(0)).direction, Direction::Forward);
    }

    #[test]
    fn null_fk_gives_node_without_edge() {
        let g = build_graph(&parent_child(4, 2, 2)).unwrap();
        assert_eq!(g.node_count(NodeType(1)), 4);
        assert_eq!(g.edges(EdgeTypeId(0)).len(), 2);
    }

    #[test]
    fn reverse_is_transpose() {
        let g = build_graph(&parent_child(17, 4, 5)).unwrap();
        let mut fwd: Vec<_> = g.edges(EdgeTypeId(0)).iter().map(|&(u, v)| (v, u)).collect();
        let mut rev = g.edges(EdgeTypeId(1)).to_vec();
        fwd.sort();
        rev.sort();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn neighbors_and_times() {
        let g = build_graph(&parent_child(12, 3, 0)).unwrap();
        let p0 = NodeId::new(NodeType(0), 0);
        let ns = g.neighbors(p0, EdgeTypeId(0)).unwrap();
        assert_eq!(ns.len(), 4);
        assert!(ns.iter().all(|n| n.node_type == NodeType(1)));
        assert!(matches!(
            g.neighbors(p0, EdgeTypeId(1)),
            Err(Error::TypeMismatch(_))
        ));
        assert_eq!(g.node_time(p0).unwrap(), None);
        assert_eq!(g.node_time(NodeId::new(NodeType(1), 3)).unwrap(), Some(103));
        assert!(matches!(
            g.node_time(NodeId::new(NodeType(1), 12)),
            Err(Error::InvalidNode { .. })
        ));
    }

    #[test]
    fn isolated_node_has_no_neighbors() {
        let g = build_graph(&parent_child(2, 5, 0)).unwrap();
        let iso = NodeId::new(NodeType(0), 4);
        assert!(g.neighbors(iso, EdgeTypeId(0)).unwrap().is_empty());
    }

    #[test]
    fn schema_graph_shapes() {
        let one = DatabaseSchema::new(vec![TableSchema {
            name: "solo".into(),
            attributes: vec![Attribute::new("id", SemanticType::PrimaryKey)],
            time_attribute: None,
        }])
        .unwrap();
        let gs = schema_graph(&one);
        assert_eq!((gs.num_node_types(), gs.num_edge_types()), (1, 0));

        let emp = DatabaseSchema::new(vec![TableSchema {
            name: "employee".into(),
            attributes: vec![
                Attribute::new("id", SemanticType::PrimaryKey),
                Attribute::new("manager_id", SemanticType::ForeignKey("employee".into())),
            ],
            time_attribute: None,
        }])
        .unwrap();
        let gs = schema_graph(&emp);
        assert_eq!(gs.num_edge_types(), 2);
        assert!(gs.edge_types.iter().all(|e| e.source == e.target));
    }
}

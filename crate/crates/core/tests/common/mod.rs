//! Fixtures and brute-force references shared by the integration suites.
#![allow(dead_code)]

pub mod grad;
pub mod sampling;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rdl_core::contrastive::{ContrastiveParams, NegativePlan};
use rdl_core::graph::{build_graph, Direction, EdgeTypeId, HeteroGraph, NodeId, NodeType};
use rdl_core::relational::{Attribute, Database, DatabaseSchema, Row, SemanticType, TableSchema, Value};
use rdl_core::sampler::Subgraph;
use rdl_core::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

pub const T0: i64 = 1_700_000_000;

fn attr(name: &str, stype: SemanticType) -> Attribute {
    Attribute::new(name, stype)
}

fn fk(name: &str, target: &str) -> Attribute {
    attr(name, SemanticType::ForeignKey(target.into()))
}

/// Three tables: `a` (no keys out), `b` (FK to `a`, self FK, timestamps),
/// `c` (FKs to `a` and `b`, timestamps).
pub fn schema() -> DatabaseSchema {
    DatabaseSchema::new(vec![
        TableSchema {
            name: "a".into(),
            attributes: vec![
                attr("a_id", SemanticType::PrimaryKey),
                attr("x", SemanticType::Numerical),
                attr("k", SemanticType::Categorical),
            ],
            time_attribute: None,
        },
        TableSchema {
            name: "b".into(),
            attributes: vec![
                attr("b_id", SemanticType::PrimaryKey),
                fk("a_ref", "a"),
                fk("parent", "b"),
                attr("ts", SemanticType::Timestamp),
                attr("y", SemanticType::Numerical),
                attr("note", SemanticType::Text),
            ],
            time_attribute: Some("ts".into()),
        },
        TableSchema {
            name: "c".into(),
            attributes: vec![
                attr("c_id", SemanticType::PrimaryKey),
                fk("a_ref", "a"),
                fk("b_ref", "b"),
                attr("ts", SemanticType::Timestamp),
                attr("z", SemanticType::Numerical),
                attr("tags", SemanticType::MultiCategorical),
            ],
            time_attribute: Some("ts".into()),
        },
    ])
    .expect("valid schema")
}

fn key(prefix: &str, i: usize) -> Value {
    Value::Key(format!("{prefix}{i}"))
}

fn maybe<R: Rng>(rng: &mut R, p_null: f64, f: impl FnOnce(&mut R) -> Value) -> Value {
    let v = f(rng);
    if rng.gen_bool(p_null) {
        Value::Null
    } else {
        v
    }
}

/// A random database over [`schema`] with `n[t]` rows per table. FKs are
/// null with probability `p_null`; feature cells likewise.
pub fn random_db(seed: u64, n: [usize; 3], p_null: f64) -> Database {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let words = ["alpha", "beta", "gamma", "delta"];
    let a: Vec<Row> = (0..n[0])
        .map(|i| {
            Row::new(vec![
                key("a", i),
                maybe(&mut rng, p_null, |rng| Value::Number(rng.gen_range(-2.0..2.0))),
                maybe(&mut rng, p_null, |rng| Value::Category(format!("k{}", rng.gen_range(0..4)))),
            ])
        })
        .collect();
    let b: Vec<Row> = (0..n[1])
        .map(|i| {
            let a_ref = if n[0] > 0 { maybe(&mut rng, p_null, |rng| key("a", rng.gen_range(0..n[0]))) } else { Value::Null };
            let parent = maybe(&mut rng, p_null.max(0.3), |rng| key("b", rng.gen_range(0..n[1])));
            Row::new(vec![
                key("b", i),
                a_ref,
                parent,
                Value::Time(T0 + rng.gen_range(0..1000)),
                maybe(&mut rng, p_null, |rng| Value::Number(rng.gen_range(-1.0..3.0))),
                maybe(&mut rng, p_null, |rng| Value::Text(words.choose(rng).unwrap().to_string())),
            ])
        })
        .collect();
    let c: Vec<Row> = (0..n[2])
        .map(|i| {
            let a_ref = if n[0] > 0 { maybe(&mut rng, p_null, |rng| key("a", rng.gen_range(0..n[0]))) } else { Value::Null };
            let b_ref = if n[1] > 0 { maybe(&mut rng, p_null, |rng| key("b", rng.gen_range(0..n[1]))) } else { Value::Null };
            let tags = (0..rng.gen_range(1..3)).map(|_| format!("t{}", rng.gen_range(0..3))).collect();
            Row::new(vec![
                key("c", i),
                a_ref,
                b_ref,
                Value::Time(T0 + rng.gen_range(0..1000)),
                maybe(&mut rng, p_null, |rng| Value::Number(rng.gen_range(0.0..5.0))),
                maybe(&mut rng, p_null, |_| Value::MultiCategory(tags)),
            ])
        })
        .collect();
    Database::from_rows(schema(), vec![a, b, c]).expect("consistent rows")
}

pub fn random_graph(seed: u64, n: [usize; 3]) -> HeteroGraph {
    build_graph(&random_db(seed, n, 0.1)).expect("clean db")
}

/// Induced subgraph on a random subset of at most `max_nodes` nodes.
pub fn random_subgraph<R: Rng>(g: &HeteroGraph, max_nodes: usize, rng: &mut R) -> Subgraph {
    let mut all: Vec<NodeId> = g
        .schema
        .node_types()
        .flat_map(|t| (0..g.node_count(t)).map(move |i| NodeId::new(t, i)))
        .collect();
    all.shuffle(rng);
    all.truncate(rng.gen_range(1..=max_nodes.min(all.len())));
    let mut nodes = vec![Vec::new(); g.num_node_types()];
    for v in all {
        nodes[v.node_type.0].push(v.index);
    }
    Subgraph::induced(g, nodes, Vec::new())
}

pub fn random_matrix<R: Rng>(rng: &mut R, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.gen_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

/// Embeddings and similarity matrices held as trainable parameters.
pub struct LossFixture {
    pub store: ParamStore,
    pub h: Vec<ParamId>,
    pub h_hat: Vec<ParamId>,
    pub params: ContrastiveParams,
}

impl LossFixture {
    pub fn new<R: Rng>(g: &HeteroGraph, sub: &Subgraph, d: usize, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let mut h = Vec::new();
        let mut h_hat = Vec::new();
        for t in 0..g.num_node_types() {
            let n = sub.nodes[t].len();
            h.push(store.add(format!("h{t}"), random_matrix(rng, n, d, 0.8), true).unwrap());
            h_hat.push(store.add(format!("hh{t}"), random_matrix(rng, n, d, 0.8), true).unwrap());
        }
        let params = ContrastiveParams::new(&g.schema, d, &mut store, rng).unwrap();
        let ids: Vec<ParamId> = params
            .w_row
            .iter()
            .chain(params.w_link.iter().flatten())
            .chain(&params.w_context)
            .copied()
            .collect();
        for id in ids {
            *store.tensor_mut(id) = random_matrix(rng, d, d, 0.6);
        }
        LossFixture {
            store,
            h,
            h_hat,
            params,
        }
    }

    pub fn vars(&self, tape: &mut Tape) -> (Vec<Var>, Vec<Var>) {
        let h = self.h.iter().map(|&id| tape.param(&self.store, id)).collect();
        let hh = self.h_hat.iter().map(|&id| tape.param(&self.store, id)).collect();
        (h, hh)
    }

    pub fn rows(&self, id: ParamId) -> Vec<Vec<f64>> {
        let t = self.store.tensor(id);
        (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
    }
}

pub type Mat = Vec<Vec<f64>>;

pub fn to_mat(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

/// `aᵀ W b` by explicit double loop.
pub fn bilinear(a: &[f64], w: &Mat, b: &[f64]) -> f64 {
    let mut s = 0.0;
    for i in 0..a.len() {
        for j in 0..b.len() {
            s += a[i] * w[i][j] * b[j];
        }
    }
    s
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `-ln(exp(s_pos) / Σ exp(s))` with no max shift.
pub fn naive_nce(positive: f64, all: &[f64]) -> f64 {
    let den: f64 = all.iter().map(|s| s.exp()).sum();
    -(positive.exp() / den).ln()
}

/// Forward in-neighbors of each local node as `(source type, local index)`,
/// deduplicated.
pub fn brute_in_neighbors(g: &HeteroGraph, sub: &Subgraph) -> Vec<Vec<Vec<(usize, usize)>>> {
    let mut out: Vec<Vec<Vec<(usize, usize)>>> = sub.nodes.iter().map(|n| vec![Vec::new(); n.len()]).collect();
    for (e, et) in g.schema.edge_types.iter().enumerate() {
        if et.direction != Direction::Forward {
            continue;
        }
        for &(u, v) in &sub.edges[e] {
            let entry = (et.source.0, u);
            if !out[et.target.0][v].contains(&entry) {
                out[et.target.0][v].push(entry);
            }
        }
    }
    out
}

/// `c_v = mean over in-neighbors u of h_u W_{type(u)}`; `None` if no
/// neighbors.
pub fn brute_context(g: &HeteroGraph, sub: &Subgraph, h: &[Mat], w_ctx: &[Mat]) -> Vec<Vec<Option<Vec<f64>>>> {
    brute_in_neighbors(g, sub)
        .iter()
        .map(|per_node| {
            per_node
                .iter()
                .map(|nb| {
                    if nb.is_empty() {
                        return None;
                    }
                    let d = h[nb[0].0][nb[0].1].len();
                    let mut c = vec![0.0; d];
                    for &(s, u) in nb {
                        for j in 0..d {
                            for i in 0..d {
                                c[j] += h[s][u][i] * w_ctx[s][i][j];
                            }
                        }
                    }
                    Some(c.iter().map(|x| x / nb.len() as f64).collect())
                })
                .collect()
        })
        .collect()
}

/// The combined loss by nested loops over the anchors of `plan`.
pub fn brute_combined(g: &HeteroGraph, sub: &Subgraph, fx: &LossFixture, plan: &NegativePlan) -> (f64, [Option<f64>; 3]) {
    let h: Vec<Mat> = fx.h.iter().map(|&id| fx.rows(id)).collect();
    let hh: Vec<Mat> = fx.h_hat.iter().map(|&id| fx.rows(id)).collect();
    let w_row: Vec<Mat> = fx.params.w_row.iter().map(|&id| fx.rows(id)).collect();
    let w_ctx: Vec<Mat> = fx.params.w_context.iter().map(|&id| fx.rows(id)).collect();
    let mu = |k: usize| ((k + 1) as f64).ln();

    let (mut row_sum, mut row_n) = (0.0, 0);
    for (t, anchors) in plan.row.iter().enumerate() {
        for a in anchors {
            if a.negatives.is_empty() {
                continue;
            }
            let v = a.anchor;
            let s = |u: usize| bilinear(&hh[t][u], &w_row[t], &h[t][v]);
            let all: Vec<f64> = std::iter::once(v).chain(a.negatives.iter().copied()).map(s).collect();
            row_sum += naive_nce(s(v), &all) / mu(a.negatives.len());
            row_n += 1;
        }
    }

    let (mut link_sum, mut link_n) = (0.0, 0);
    for (e, anchors) in plan.link.iter().enumerate() {
        let et = g.schema.edge_type(EdgeTypeId(e));
        if et.direction != Direction::Forward {
            assert!(anchors.is_empty());
            continue;
        }
        let w = fx.rows(fx.params.w_link[e].unwrap());
        let (s_t, t_t) = (et.source.0, et.target.0);
        for a in anchors {
            if a.negatives.is_empty() {
                continue;
            }
            let (u, v) = sub.edges[e][a.anchor];
            let s = |x: usize| bilinear(&h[s_t][x], &w, &h[t_t][v]);
            let all: Vec<f64> = std::iter::once(u).chain(a.negatives.iter().copied()).map(s).collect();
            link_sum += naive_nce(s(u), &all) / mu(a.negatives.len());
            link_n += 1;
        }
    }

    let ctx = brute_context(g, sub, &h, &w_ctx);
    let (mut ctx_sum, mut ctx_n) = (0.0, 0);
    for (t, anchors) in plan.context.iter().enumerate() {
        for a in anchors {
            if a.negatives.is_empty() {
                continue;
            }
            let v = a.anchor;
            let s = |u: usize| dot(ctx[t][u].as_ref().expect("defined context"), &h[t][v]);
            let all: Vec<f64> = std::iter::once(v).chain(a.negatives.iter().copied()).map(s).collect();
            ctx_sum += naive_nce(s(v), &all) / mu(a.negatives.len());
            ctx_n += 1;
        }
    }
    let avg = |s: f64, n: usize| (n > 0).then(|| s / n as f64);
    let terms = [avg(row_sum, row_n), avg(link_sum, link_n), avg(ctx_sum, ctx_n)];
    (terms.iter().flatten().sum(), terms)
}

/// Every node of type `t` in `g` as a seed list.
pub fn all_nodes(g: &HeteroGraph, t: NodeType) -> Vec<NodeId> {
    (0..g.node_count(t)).map(|i| NodeId::new(t, i)).collect()
}

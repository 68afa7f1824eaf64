use rand::Rng;

use super::negatives::{forward_in_neighbors, plan_negatives, AnchorNegatives, NegativeConfig, NegativePlan};
use super::ContrastiveParams;
use crate::error::{Error, Result};
use crate::graph::{EdgeTypeId, GraphSchema, HeteroGraph};
use crate::sampler::Subgraph;
use crate::tensor::{ParamStore, Tape, Tensor, Var};

/// `ln(n_neg + 1)`.
pub fn norm_factor(n_neg: usize) -> f64 {
    (n_neg as f64).ln_1p()
}

/// InfoNCE over a score matrix: anchor `g` scores the candidates
/// `cands[g]` (positive first) against column `cols[g]`. One loss per
/// anchor, `G x 1`.
fn info_nce(tape: &mut Tape, scores: Var, cols: &[usize], cands: &[Vec<usize>]) -> Result<Var> {
    let mut idx = Vec::with_capacity(cands.iter().map(Vec::len).sum());
    let mut lens = Vec::with_capacity(cands.len());
    for (&c, list) in cols.iter().zip(cands) {
        idx.extend(list.iter().map(|&r| (r, c)));
        lens.push(list.len());
    }
    let s = tape.gather_entries(scores, idx)?;
    tape.segment_cross_entropy(s, lens)
}

fn check_negatives(anchor: usize, negs: &[usize], n: usize) -> Result<()> {
    if anchor >= n {
        return Err(Error::TypeMismatch(format!("anchor {anchor} outside a type with {n} nodes")));
    }
    if let Some(u) = negs.iter().find(|&&u| u == anchor || u >= n) {
        return Err(Error::TypeMismatch(format!("invalid negative {u} for anchor {anchor}")));
    }
    Ok(())
}

fn candidates(a: &AnchorNegatives, positive: usize) -> Vec<usize> {
    std::iter::once(positive).chain(a.negatives.iter().copied()).collect()
}

/// Row-level losses for all `anchors` of one type: anchor `v` scores
/// `ĥ_u W h_vᵀ` over `u ∈ {v} ∪ negatives`. Returns `G x 1`.
pub fn row_losses(tape: &mut Tape, h: Var, h_hat: Var, w: Var, anchors: &[AnchorNegatives]) -> Result<Var> {
    let n = tape.value(h).rows();
    for a in anchors {
        check_negatives(a.anchor, &a.negatives, n)?;
    }
    let hw = tape.matmul(h_hat, w)?;
    let scores = tape.matmul_nt(hw, h)?;
    let cols: Vec<usize> = anchors.iter().map(|a| a.anchor).collect();
    let cands: Vec<Vec<usize>> = anchors.iter().map(|a| candidates(a, a.anchor)).collect();
    info_nce(tape, scores, &cols, &cands)
}

/// Row-level loss of a single anchor `v`.
pub fn row_loss(tape: &mut Tape, v: usize, h: Var, h_hat: Var, negs: &[usize], w: Var) -> Result<Var> {
    let a = AnchorNegatives {
        anchor: v,
        negatives: negs.to_vec(),
    };
    let l = row_losses(tape, h, h_hat, w, std::slice::from_ref(&a))?;
    Ok(tape.sum_all(l))
}

/// Link-level losses for local edges of one forward edge type: edge
/// `(u, v)` scores `h_w W h_vᵀ` over `w ∈ {u} ∪ negatives`. `anchors` hold
/// indices into `edges`. Returns `G x 1`.
pub fn link_losses(
    tape: &mut Tape,
    edges: &[(usize, usize)],
    h_src: Var,
    h_tgt: Var,
    w: Var,
    anchors: &[AnchorNegatives],
) -> Result<Var> {
    let n = tape.value(h_src).rows();
    let mut cols = Vec::with_capacity(anchors.len());
    let mut cands = Vec::with_capacity(anchors.len());
    for a in anchors {
        let &(u, v) = edges
            .get(a.anchor)
            .ok_or_else(|| Error::TypeMismatch(format!("edge {} out of range", a.anchor)))?;
        check_negatives(u, &a.negatives, n)?;
        cols.push(v);
        cands.push(candidates(a, u));
    }
    let hw = tape.matmul(h_src, w)?;
    let scores = tape.matmul_nt(hw, h_tgt)?;
    info_nce(tape, scores, &cols, &cands)
}

/// Link-level loss of the local edge `(u, v)` of `edge_type`. Negatives are
/// verified against the parent graph.
#[allow(clippy::too_many_arguments)]
pub fn link_loss(
    tape: &mut Tape,
    g: &HeteroGraph,
    sub: &Subgraph,
    edge_type: EdgeTypeId,
    edge: (usize, usize),
    h_src: Var,
    h_tgt: Var,
    negs: &[usize],
    w: Var,
) -> Result<Var> {
    let et = g.schema.edge_type(edge_type);
    let gv = sub.nodes[et.target.0][edge.1];
    for &n in negs {
        if let Some(&gw) = sub.nodes[et.source.0].get(n) {
            if g.has_edge(edge_type, gw, gv) {
                return Err(Error::NegativeIsLinked {
                    edge_type: edge_type.0,
                    negative: gw,
                    target: gv,
                });
            }
        }
    }
    let a = AnchorNegatives {
        anchor: 0,
        negatives: negs.to_vec(),
    };
    let l = link_losses(tape, &[edge], h_src, h_tgt, w, std::slice::from_ref(&a))?;
    Ok(tape.sum_all(l))
}

/// Context embeddings per node type: row `v` of type `t` is the mean of
/// `h_u W_{type(u)}` over distinct forward in-neighbors `u` of `v` in the
/// subgraph, and zero when there are none (`defined[t][v]` is false).
pub struct ContextEmbeddings {
    pub c: Vec<Var>,
    pub defined: Vec<Vec<bool>>,
}

pub fn context_embeddings(
    tape: &mut Tape,
    graph: &GraphSchema,
    sub: &Subgraph,
    h: &[Var],
    w_context: &[Var],
) -> Result<ContextEmbeddings> {
    let nt = graph.num_node_types();
    let neighbors = forward_in_neighbors(graph, sub);
    let mut transformed: Vec<Option<Var>> = vec![None; nt];
    let mut c = Vec::with_capacity(nt);
    let mut defined = Vec::with_capacity(nt);
    for t in 0..nt {
        let n = sub.nodes[t].len();
        let d = tape.value(h[t]).cols();
        let mut by_source: Vec<(Vec<usize>, Vec<usize>)> = vec![(Vec::new(), Vec::new()); nt];
        for (v, set) in neighbors[t].iter().enumerate() {
            for &(s, u) in set {
                by_source[s].0.push(u);
                by_source[s].1.push(v);
            }
        }
        let mut acc: Option<Var> = None;
        for (s, (us, vs)) in by_source.into_iter().enumerate() {
            if us.is_empty() {
                continue;
            }
            let hw = match transformed[s] {
                Some(x) => x,
                None => {
                    let x = tape.matmul(h[s], w_context[s])?;
                    transformed[s] = Some(x);
                    x
                }
            };
            let g = tape.gather_rows(hw, us)?;
            let part = tape.scatter_add_rows(g, vs, n)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, part)?,
                None => part,
            });
        }
        let counts: Vec<usize> = neighbors[t].iter().map(|s| s.len()).collect();
        let ct = match acc {
            Some(a) => {
                let inv = counts.iter().map(|&k| if k == 0 { 0.0 } else { 1.0 / k as f64 }).collect();
                tape.scale_rows(a, inv)?
            }
            None => tape.constant(Tensor::zeros(n, d)),
        };
        c.push(ct);
        defined.push(counts.iter().map(|&k| k > 0).collect());
    }
    Ok(ContextEmbeddings { c, defined })
}

/// Context embedding of one node as a `1 x d` row, or `None` when it has no
/// forward in-neighbors in the subgraph.
pub fn context_embedding(
    tape: &mut Tape,
    graph: &GraphSchema,
    sub: &Subgraph,
    h: &[Var],
    w_context: &[Var],
    v: crate::graph::NodeId,
) -> Result<Option<Var>> {
    let ctx = context_embeddings(tape, graph, sub, h, w_context)?;
    if !ctx.defined[v.node_type.0][v.index] {
        return Ok(None);
    }
    tape.gather_rows(ctx.c[v.node_type.0], vec![v.index]).map(Some)
}

/// Context-level losses for one type: anchor `v` scores `c_u h_vᵀ` over
/// `u ∈ {v} ∪ negatives`. Returns `G x 1`.
pub fn context_losses(tape: &mut Tape, c: Var, h: Var, defined: &[bool], anchors: &[AnchorNegatives]) -> Result<Var> {
    let n = tape.value(h).rows();
    for a in anchors {
        check_negatives(a.anchor, &a.negatives, n)?;
        if let Some(&u) = std::iter::once(&a.anchor)
            .chain(&a.negatives)
            .find(|&&u| !defined[u])
        {
            return Err(Error::UndefinedContext(u));
        }
    }
    let scores = tape.matmul_nt(c, h)?;
    let cols: Vec<usize> = anchors.iter().map(|a| a.anchor).collect();
    let cands: Vec<Vec<usize>> = anchors.iter().map(|a| candidates(a, a.anchor)).collect();
    info_nce(tape, scores, &cols, &cands)
}

/// Context-level loss of a single anchor `v`.
pub fn context_loss(tape: &mut Tape, v: usize, c: Var, h: Var, negs: &[usize], defined: &[bool]) -> Result<Var> {
    let a = AnchorNegatives {
        anchor: v,
        negatives: negs.to_vec(),
    };
    let l = context_losses(tape, c, h, defined, std::slice::from_ref(&a))?;
    Ok(tape.sum_all(l))
}

/// The combined subgraph loss and the value of each averaged term (`None`
/// when every anchor of the term had zero negatives).
#[derive(Debug)]
pub struct LossTerms {
    pub total: Var,
    pub row: Option<f64>,
    pub link: Option<f64>,
    pub context: Option<f64>,
}

/// Sums `loss / ln(K + 1)` over anchors with `K >= 1`; returns the scalar
/// sum and the number of anchors included.
fn normalized_sum<F>(tape: &mut Tape, anchors: &[AnchorNegatives], f: F) -> Result<Option<(Var, usize)>>
where
    F: FnOnce(&mut Tape, &[AnchorNegatives]) -> Result<Var>,
{
    let kept: Vec<AnchorNegatives> = anchors.iter().filter(|a| !a.negatives.is_empty()).cloned().collect();
    if kept.is_empty() {
        return Ok(None);
    }
    let inv = kept.iter().map(|a| 1.0 / norm_factor(a.negatives.len())).collect();
    let l = f(tape, &kept)?;
    let l = tape.scale_rows(l, inv)?;
    Ok(Some((tape.sum_all(l), kept.len())))
}

fn average(tape: &mut Tape, parts: Vec<(Var, usize)>) -> Result<Option<Var>> {
    let count: usize = parts.iter().map(|p| p.1).sum();
    let mut it = parts.into_iter();
    let Some((mut acc, _)) = it.next() else {
        return Ok(None);
    };
    for (v, _) in it {
        acc = tape.add(acc, v)?;
    }
    Ok(Some(tape.scale(acc, 1.0 / count as f64)))
}

/// Row, link and context averages with a precomputed negative plan.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss_with_plan(
    tape: &mut Tape,
    store: &ParamStore,
    graph: &GraphSchema,
    sub: &Subgraph,
    h: &[Var],
    h_hat: &[Var],
    params: &ContrastiveParams,
    plan: &NegativePlan,
) -> Result<LossTerms> {
    if sub.num_nodes() == 0 {
        return Err(Error::EmptySubgraph);
    }
    let nt = graph.num_node_types();
    let mut row_parts = Vec::new();
    for t in 0..nt {
        let w = tape.param(store, params.w_row[t]);
        if let Some(p) = normalized_sum(tape, &plan.row[t], |tape, a| row_losses(tape, h[t], h_hat[t], w, a))? {
            row_parts.push(p);
        }
    }
    let mut link_parts = Vec::new();
    for et in graph.forward_edge_types() {
        let Some(wid) = params.w_link[et.0] else { continue };
        let e = graph.edge_type(et);
        let w = tape.param(store, wid);
        let edges = &sub.edges[et.0];
        if let Some(p) = normalized_sum(tape, &plan.link[et.0], |tape, a| {
            link_losses(tape, edges, h[e.source.0], h[e.target.0], w, a)
        })? {
            link_parts.push(p);
        }
    }
    let w_ctx: Vec<Var> = params.w_context.iter().map(|&id| tape.param(store, id)).collect();
    let ctx = context_embeddings(tape, graph, sub, h, &w_ctx)?;
    let mut ctx_parts = Vec::new();
    for t in 0..nt {
        if let Some(p) = normalized_sum(tape, &plan.context[t], |tape, a| {
            context_losses(tape, ctx.c[t], h[t], &ctx.defined[t], a)
        })? {
            ctx_parts.push(p);
        }
    }

    let terms = [
        average(tape, row_parts)?,
        average(tape, link_parts)?,
        average(tape, ctx_parts)?,
    ];
    let values: Vec<Option<f64>> = terms.iter().map(|t| t.map(|v| tape.value(v).item())).collect();
    let mut total: Option<Var> = None;
    for v in terms.into_iter().flatten() {
        total = Some(match total {
            Some(a) => tape.add(a, v)?,
            None => v,
        });
    }
    let total = match total {
        Some(t) => t,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok(LossTerms {
        total,
        row: values[0],
        link: values[1],
        context: values[2],
    })
}

/// Draws in-batch negatives from `rng` and evaluates the combined loss.
#[allow(clippy::too_many_arguments)]
pub fn combined_loss<R: Rng>(
    tape: &mut Tape,
    store: &ParamStore,
    g: &HeteroGraph,
    sub: &Subgraph,
    h: &[Var],
    h_hat: &[Var],
    params: &ContrastiveParams,
    neg_cfg: &NegativeConfig,
    rng: &mut R,
) -> Result<LossTerms> {
    if sub.num_nodes() == 0 {
        return Err(Error::EmptySubgraph);
    }
    let plan = plan_negatives(g, sub, neg_cfg.n_max, rng)?;
    combined_loss_with_plan(tape, store, &g.schema, sub, h, h_hat, params, &plan)
}

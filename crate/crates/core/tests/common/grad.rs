//! Finite-difference checks over random instances. Each driver returns the
//! largest relative error it saw.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rdl_core::backbone::{sage_layer, subgraph_rows, Aggregation, Backbone, BackboneConfig, Mode, TableEncoderKind};
use rdl_core::contrastive::*;
use rdl_core::encoders::fit_encoders;
use rdl_core::graph::{build_graph, HeteroGraph};
use rdl_core::sampler::Subgraph;
use rdl_core::tensor::{grad_check, ParamStore, Tape, Var};

use super::*;

const EPS: f64 = 1e-6;

fn check<F>(worst: &mut f64, store: &ParamStore, seed: u64, f: F)
where
    F: Fn(&mut Tape, &ParamStore) -> rdl_core::Result<Var>,
{
    *worst = worst.max(grad_check(store, EPS, Some(6), seed, f).unwrap());
}

fn instance(seed: u64) -> (HeteroGraph, Subgraph, LossFixture, NegativePlan) {
    let g = random_graph(seed, [6, 10, 14]);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sub = random_subgraph(&g, 30, &mut rng);
    let fx = LossFixture::new(&g, &sub, 3, &mut rng);
    let plan = plan_negatives(&g, &sub, 6, &mut rng).unwrap();
    (g, sub, fx, plan)
}

fn nonempty(anchors: &[AnchorNegatives]) -> Vec<AnchorNegatives> {
    anchors.iter().filter(|a| !a.negatives.is_empty()).cloned().collect()
}

/// Sums the per-anchor losses produced by `f` over all groups.
fn summed(tape: &mut Tape, parts: Vec<Var>) -> rdl_core::Result<Var> {
    let mut acc = tape.constant(rdl_core::tensor::Tensor::scalar(0.0));
    for p in parts {
        let s = tape.sum_all(p);
        acc = tape.add(acc, s)?;
    }
    Ok(acc)
}

pub fn row_loss_gradients(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let (_, _, fx, plan) = instance(seed);
        check(&mut worst, &fx.store, seed, |tape, store| {
            let (h, hh) = (
                fx.h.iter().map(|&id| tape.param(store, id)).collect::<Vec<_>>(),
                fx.h_hat.iter().map(|&id| tape.param(store, id)).collect::<Vec<_>>(),
            );
            let mut parts = Vec::new();
            for (t, anchors) in plan.row.iter().enumerate() {
                let kept = nonempty(anchors);
                if !kept.is_empty() {
                    let w = tape.param(store, fx.params.w_row[t]);
                    parts.push(row_losses(tape, h[t], hh[t], w, &kept)?);
                }
            }
            summed(tape, parts)
        });
    }
    worst
}

pub fn link_loss_gradients(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..instances * 5 {
        if checked == instances {
            break;
        }
        let (g, sub, fx, plan) = instance(100 + seed);
        if plan.link.iter().all(|a| nonempty(a).is_empty()) {
            continue;
        }
        checked += 1;
        check(&mut worst, &fx.store, seed, |tape, store| {
            let h: Vec<Var> = fx.h.iter().map(|&id| tape.param(store, id)).collect();
            let mut parts = Vec::new();
            for et in g.schema.forward_edge_types() {
                let kept = nonempty(&plan.link[et.0]);
                if kept.is_empty() {
                    continue;
                }
                let e = g.schema.edge_type(et);
                let w = tape.param(store, fx.params.w_link[et.0].unwrap());
                parts.push(link_losses(tape, &sub.edges[et.0], h[e.source.0], h[e.target.0], w, &kept)?);
            }
            summed(tape, parts)
        });
    }
    assert_eq!(checked, instances);
    worst
}

pub fn context_loss_gradients(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    let mut checked = 0;
    for seed in 0..instances * 5 {
        if checked == instances {
            break;
        }
        let (g, sub, fx, plan) = instance(200 + seed);
        if plan.context.iter().all(|a| nonempty(a).is_empty()) {
            continue;
        }
        checked += 1;
        check(&mut worst, &fx.store, seed, |tape, store| {
            let h: Vec<Var> = fx.h.iter().map(|&id| tape.param(store, id)).collect();
            let w: Vec<Var> = fx.params.w_context.iter().map(|&id| tape.param(store, id)).collect();
            let ctx = context_embeddings(tape, &g.schema, &sub, &h, &w)?;
            let mut parts = Vec::new();
            for (t, anchors) in plan.context.iter().enumerate() {
                let kept = nonempty(anchors);
                if !kept.is_empty() {
                    parts.push(context_losses(tape, ctx.c[t], h[t], &ctx.defined[t], &kept)?);
                }
            }
            summed(tape, parts)
        });
    }
    assert_eq!(checked, instances);
    worst
}

pub fn combined_loss_gradients(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let (g, sub, fx, plan) = instance(300 + seed);
        check(&mut worst, &fx.store, seed, |tape, store| {
            let h: Vec<Var> = fx.h.iter().map(|&id| tape.param(store, id)).collect();
            let hh: Vec<Var> = fx.h_hat.iter().map(|&id| tape.param(store, id)).collect();
            Ok(combined_loss_with_plan(tape, store, &g.schema, &sub, &h, &hh, &fx.params, &plan)?.total)
        });
    }
    worst
}

fn backbone(seed: u64, kind: TableEncoderKind) -> (HeteroGraph, Backbone, ParamStore) {
    let db = random_db(seed, [5, 8, 10], 0.15);
    let g = build_graph(&db).unwrap();
    let cfg = BackboneConfig {
        hidden_dim: 4,
        attr_dim: 3,
        text_buckets: 16,
        resnet_blocks: 2,
        table_encoder: kind,
        ..BackboneConfig::default()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bb = Backbone::new(&db.schema, fit_encoders(&db, 16), cfg, &mut store, &mut rng).unwrap();
    (g, bb, store)
}

pub fn table_encoder_gradients(kind: TableEncoderKind, instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let (g, bb, store) = backbone(seed, kind);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = rng.gen_range(0..3);
        let all: Vec<Vec<usize>> = (0..3).map(|ty| (0..g.node_count(rdl_core::graph::NodeType(ty))).collect()).collect();
        let sub = Subgraph::induced(&g, all, Vec::new());
        let rows = subgraph_rows(&g, &sub).unwrap();
        let target = random_matrix(&mut rng, rows[t].len(), 4, 1.0);
        check(&mut worst, &store, seed, |tape, store| {
            let out = bb.encode_table(tape, store, t, &rows[t], Mode::Train, &mut Vec::new())?;
            tape.mse(out, target.clone())
        });
    }
    worst
}

pub fn sage_layer_gradients(instances: u64) -> f64 {
    let mut worst = 0.0f64;
    for seed in 0..instances {
        let (g, bb, _) = backbone(seed, TableEncoderKind::LinearConcat);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sub = random_subgraph(&g, 20, &mut rng);
        let mut store = ParamStore::new();
        // Only the layer weights and the inputs are trainable here.
        let layer = {
            let mut full = ParamStore::new();
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            let cfg = BackboneConfig { num_layers: 1, ..bb.config.clone() };
            let b = Backbone::new(&g.database().schema, bb.encoders.stats.clone(), cfg, &mut full, &mut r).unwrap();
            let mut map = |id| {
                let p = full.get(id);
                store.add(p.name.clone(), p.tensor.clone(), true).unwrap()
            };
            rdl_core::backbone::SageLayer {
                message: b.layers[0].message.iter().map(|&id| map(id)).collect(),
                update: b.layers[0].update.iter().map(|&id| map(id)).collect(),
            }
        };
        let h_ids: Vec<_> = (0..3)
            .map(|t| store.add(format!("h{t}"), random_matrix(&mut rng, sub.nodes[t].len(), 4, 1.0), true).unwrap())
            .collect();
        let aggregation = if seed % 2 == 0 { Aggregation::Mean } else { Aggregation::Sum };
        let targets: Vec<_> = (0..3).map(|t| random_matrix(&mut rng, sub.nodes[t].len(), 4, 1.0)).collect();
        check(&mut worst, &store, seed, |tape, store| {
            let h: Vec<Var> = h_ids.iter().map(|&id| tape.param(store, id)).collect();
            let out = sage_layer(tape, store, &g.schema, &sub, &h, &layer, aggregation)?;
            let mut parts = Vec::new();
            for t in 0..3 {
                if !sub.nodes[t].is_empty() {
                    parts.push(tape.mse(out[t], targets[t].clone())?);
                }
            }
            summed(tape, parts)
        });
    }
    worst
}

//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use common::grad;
use common::sampling::{brute_closure, dense_graph, edge_sets, naive_bfs, ratio};
use common::*;
use rdl_core::backbone::{BackboneConfig, Mode, TableEncoderKind, BACKBONE_PREFIX};
use rdl_core::contrastive::*;
use rdl_core::datagen::{synth_data, SynthConfig, SynthData};
use rdl_core::graph::{build_graph, HeteroGraph, NodeId, NodeType};
use rdl_core::relational::Value;
use rdl_core::sampler::{hg_sample, neighbor_sample, pick_seed_type, HgSamplerConfig, NeighborSamplerConfig, Subgraph};
use rdl_core::tensor::{read_checkpoint, write_checkpoint, Checkpoint, Tape, Tensor};
use rdl_core::train::{
    auc_roc, finetune, mae, metrics_to_jsonl, pretrain, resolve_entities, FinetuneConfig, Metric, PretrainConfig,
    PretrainOutcome, Regime, Split, TaskModel,
};

const LOSS_TOL: f64 = 1e-8;
const LOSS_SUBGRAPHS: usize = 100;
const LOSS_MAX_NODES: usize = 50;
const LOSS_SECONDS: f64 = 60.0;

const CLOSED_FORM_TOL: f64 = 1e-12;

const GRAD_TOL: f64 = 1e-4;
const GRAD_INSTANCES: u64 = 20;
const GRAD_SECONDS: f64 = 120.0;

const CORRUPT_PROBS: [f64; 3] = [0.2, 0.4, 0.6];
const CORRUPT_MIN_CELLS: usize = 10_000;
const CORRUPT_SIGMAS: f64 = 3.0;

const SAMPLER_BATCHES: u64 = 1000;
const BALANCE_MAX: f64 = 3.0;
const BFS_MIN: f64 = 10.0;

const PRETRAIN_STEPS: usize = 300;
const PRETRAIN_MIN_DROP: f64 = 0.20;
const PRETRAIN_SECONDS: f64 = 300.0;

const ORDER_SEEDS: u64 = 3;
const ORDER_MIN_WINS: usize = 2;
const ORDER_STEPS: usize = 200;
const ORDER_LR: f64 = 1e-4;
const ORDER_BATCH: usize = 128;
const ORDER_FANOUT: usize = 16;
const ORDER_VAL_EVERY: usize = 20;
const NULL_PERMUTATIONS: usize = 1000;
const NULL_SIGMAS: f64 = 3.0;
const PIPELINE_SECONDS: f64 = 900.0;

const METRIC_TOL: f64 = 1e-12;
const METRIC_INSTANCES: u64 = 100;

type Outcome = (bool, String);

fn loss_oracle() -> Outcome {
    let start = Instant::now();
    let g = random_graph(21, [12, 20, 30]);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut seen = [0usize; 3];
    for _ in 0..LOSS_SUBGRAPHS {
        let sub = random_subgraph(&g, LOSS_MAX_NODES, &mut rng);
        let fx = LossFixture::new(&g, &sub, 4, &mut rng);
        let plan = plan_negatives(&g, &sub, 8, &mut rng).unwrap();
        let mut tape = Tape::new();
        let (h, hh) = fx.vars(&mut tape);
        let t = combined_loss_with_plan(&mut tape, &fx.store, &g.schema, &sub, &h, &hh, &fx.params, &plan).unwrap();
        let (total, parts) = brute_combined(&g, &sub, &fx, &plan);
        worst = worst.max((tape.value(t.total).item() - total).abs());
        for (i, (a, b)) in [t.row, t.link, t.context].into_iter().zip(parts).enumerate() {
            match (a, b) {
                (Some(a), Some(b)) => {
                    worst = worst.max((a - b).abs());
                    seen[i] += 1;
                }
                (None, None) => {}
                _ => worst = f64::INFINITY,
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    (
        worst < LOSS_TOL && secs < LOSS_SECONDS && seen.iter().all(|&n| n > 0),
        format!(
            "max deviation {worst:.2e} over {LOSS_SUBGRAPHS} subgraphs (row/link/context present in {seen:?}), {secs:.1}s"
        ),
    )
}

fn closed_forms() -> Outcome {
    let mut worst = 0.0f64;
    for k in [1usize, 3, 7, 255] {
        let n = k + 1;
        let rows: Vec<Vec<f64>> = (0..n).map(|i| vec![i as f64 * 0.01, 1.0]).collect();
        let negs: Vec<usize> = (1..n).collect();
        let mut tape = Tape::new();
        let h = tape.constant(Tensor::from_rows(&rows).unwrap());
        let w = tape.constant(Tensor::zeros(2, 2));
        let c = tape.constant(Tensor::zeros(n, 2));
        let expected = ((k + 1) as f64).ln();
        let anchors = [AnchorNegatives {
            anchor: 0,
            negatives: negs.clone(),
        }];
        let losses = [
            row_loss(&mut tape, 0, h, h, &negs, w).unwrap(),
            link_losses(&mut tape, &[(0, 0)], h, h, w, &anchors).unwrap(),
            context_loss(&mut tape, 0, c, h, &negs, &vec![true; n]).unwrap(),
        ];
        for l in losses {
            worst = worst.max((tape.value(l).item() - expected).abs());
        }
    }
    let mu = [
        (norm_factor(0) - 0.0).abs(),
        (norm_factor(1) - 2f64.ln()).abs(),
        (norm_factor(256) - 257f64.ln()).abs(),
    ];
    let mu_worst = mu.iter().cloned().fold(0.0, f64::max);
    (
        worst < CLOSED_FORM_TOL && mu_worst < CLOSED_FORM_TOL,
        format!("uniform-logit deviation {worst:.2e}, normaliser deviation {mu_worst:.2e}"),
    )
}

fn gradients() -> Outcome {
    let start = Instant::now();
    let errors = [
        ("row", grad::row_loss_gradients(GRAD_INSTANCES)),
        ("link", grad::link_loss_gradients(GRAD_INSTANCES)),
        ("context", grad::context_loss_gradients(GRAD_INSTANCES)),
        ("combined", grad::combined_loss_gradients(GRAD_INSTANCES)),
        ("linear", grad::table_encoder_gradients(TableEncoderKind::LinearConcat, GRAD_INSTANCES)),
        ("resnet", grad::table_encoder_gradients(TableEncoderKind::TabularResNet, GRAD_INSTANCES)),
        ("sage", grad::sage_layer_gradients(GRAD_INSTANCES)),
    ];
    let secs = start.elapsed().as_secs_f64();
    let worst = errors.iter().map(|e| e.1).fold(0.0, f64::max);
    let detail = errors
        .iter()
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    (
        worst < GRAD_TOL && secs < GRAD_SECONDS,
        format!("max relative error {worst:.2e} ({detail}), {GRAD_INSTANCES} instances each, {secs:.1}s"),
    )
}

fn corruption() -> Outcome {
    let db = random_db(77, [4000, 10_000, 10_000], 0.1);
    let marginals = fit_marginals(&db).unwrap();
    let mut ok = true;
    let mut notes = Vec::new();
    for (i, &p) in CORRUPT_PROBS.iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(i as u64);
        let (mut candidates, mut selected, mut key_edits, mut foreign) = (0usize, 0usize, 0usize, 0usize);
        for (t, (ts, rows)) in db.tables().enumerate() {
            let pools: Vec<HashSet<&Value>> = marginals[t]
                .iter()
                .map(|m| m.iter().flat_map(|m| &m.observed_values).collect())
                .collect();
            let out = corrupt_rows_with(rows, ts, &marginals[t], p, &mut rng).unwrap();
            let features = ts.feature_indices();
            candidates += rows.len() * features.len();
            for ((orig, new), mask) in rows.iter().zip(&out.rows).zip(&out.selected) {
                for (c, attr) in ts.attributes.iter().enumerate() {
                    if attr.stype.is_key() {
                        key_edits += usize::from(orig.values[c] != new.values[c] || mask[c]);
                    } else if mask[c] {
                        selected += 1;
                        foreign += usize::from(!pools[c].contains(&new.values[c]));
                    } else {
                        key_edits += usize::from(orig.values[c] != new.values[c]);
                    }
                }
            }
        }
        let frac = selected as f64 / candidates as f64;
        let sigma = (p * (1.0 - p) / candidates as f64).sqrt();
        let within = (frac - p).abs() <= CORRUPT_SIGMAS * sigma;
        ok &= within && key_edits == 0 && foreign == 0 && selected >= CORRUPT_MIN_CELLS;
        notes.push(format!(
            "p={p}: {selected} cells, fraction {frac:.4} (bound ±{:.4}), {key_edits} key/unselected edits, {foreign} unobserved",
            CORRUPT_SIGMAS * sigma
        ));
    }
    (ok, notes.join("; "))
}

fn sampler() -> Outcome {
    let mut failures = Vec::new();

    let mut closure_cases = 0;
    for seed in 0..40u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = [rng.gen_range(1..30), rng.gen_range(1..70), rng.gen_range(1..100)];
        let g = random_graph(seed, n);
        let cfg = HgSamplerConfig {
            per_type_budget: rng.gen_range(1..20),
            iterations: rng.gen_range(1..4),
            seed_type: NodeType(rng.gen_range(0..3)),
            seed_count: rng.gen_range(1..20),
            rng_seed: seed,
        };
        let hg = hg_sample(&g, &cfg).unwrap();
        let seeds: Vec<NodeId> = (0..4).map(|_| NodeId::new(NodeType(2), rng.gen_range(0..n[2]))).collect();
        let nb = neighbor_sample(&g, &seeds, &NeighborSamplerConfig::new(2, seed)).unwrap();
        for sub in [hg, nb] {
            closure_cases += 1;
            if edge_sets(&sub) != brute_closure(&g, &sub.nodes) {
                failures.push(format!("closure mismatch at seed {seed}"));
            }
        }
    }

    let g = dense_graph();
    let seed_type = pick_seed_type(&g.database().schema).unwrap();
    let (mut worst_ratio, mut least_bfs) = (0.0f64, f64::INFINITY);
    for rng_seed in 0..5 {
        let cfg = HgSamplerConfig::new(seed_type, rng_seed);
        let sub = hg_sample(&g, &cfg).unwrap();
        let counts: Vec<usize> = sub.nodes.iter().map(Vec::len).collect();
        let hi = cfg.iterations * cfg.per_type_budget;
        for (t, &c) in counts.iter().enumerate() {
            if t != seed_type.0 && !(cfg.per_type_budget..=hi).contains(&c) {
                failures.push(format!("type {t} has {c} nodes"));
            }
        }
        worst_ratio = worst_ratio.max(ratio(&counts));
        let seeds: Vec<NodeId> = sub.seeds.iter().map(|&s| sub.global(s)).collect();
        least_bfs = least_bfs.min(ratio(&naive_bfs(&g, &seeds, cfg.iterations)));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut checked = 0usize;
    for batch in 0..SAMPLER_BATCHES {
        let seeds: Vec<NodeId> = (0..8).map(|_| NodeId::new(NodeType(1), rng.gen_range(0..5_000))).collect();
        let cutoffs: Vec<i64> = (0..8).map(|_| T0 + rng.gen_range(0..10_000)).collect();
        let cfg = NeighborSamplerConfig {
            fanout: 8,
            depth: 2,
            time_cutoffs: Some(cutoffs.clone()),
            rng_seed: batch,
        };
        let sub = neighbor_sample(&g, &seeds, &cfg).unwrap();
        let comp = sub.component.as_ref().unwrap();
        for t in g.schema.node_types() {
            for (i, &v) in sub.nodes[t.0].iter().enumerate() {
                if let Some(ts) = g.time_of(t, v) {
                    checked += 1;
                    if ts > cutoffs[comp[t.0][i]] {
                        failures.push(format!("batch {batch} samples a node after its cutoff"));
                    }
                }
            }
        }
    }
    if worst_ratio > BALANCE_MAX {
        failures.push(format!("balance ratio {worst_ratio:.2}"));
    }
    if least_bfs <= BFS_MIN {
        failures.push(format!("naive BFS ratio only {least_bfs:.1}"));
    }
    failures.dedup();
    (
        failures.is_empty(),
        format!(
            "{closure_cases} closure cases, {SAMPLER_BATCHES} temporal batches ({checked} timed nodes), balance ratio {worst_ratio:.2} vs naive BFS {least_bfs:.1}{}",
            if failures.is_empty() { String::new() } else { format!("; {}", failures.join("; ")) }
        ),
    )
}

fn trainability(data: &SynthData, backbone: &BackboneConfig) -> (Outcome, PretrainOutcome, f64) {
    let start = Instant::now();
    let cfg = PretrainConfig {
        max_steps: PRETRAIN_STEPS,
        ..PretrainConfig::default()
    };
    let out = pretrain(&data.db, backbone, &cfg).unwrap();
    let secs = start.elapsed().as_secs_f64();
    let last = out
        .metrics
        .iter()
        .filter(|r| r.split == "val")
        .last()
        .map(|r| (r.step, r.loss.unwrap()))
        .unwrap();
    let drop = 1.0 - last.1 / out.initial_val_loss;
    let ok = out.steps_run == PRETRAIN_STEPS && drop >= PRETRAIN_MIN_DROP && secs < PRETRAIN_SECONDS;
    let detail = format!(
        "validation loss {:.4} at step 0 -> {:.4} at step {} ({:.1}% lower), {secs:.1}s",
        out.initial_val_loss,
        last.1,
        last.0,
        100.0 * drop
    );
    ((ok, detail), out, secs)
}

fn auc_of(m: Metric) -> f64 {
    match m {
        Metric::AucRoc(a) => a,
        Metric::Mae(_) => f64::NAN,
    }
}

/// Standard deviation of the AUC of `scores` under random relabelling.
fn permutation_sigma(scores: &[f64], labels: &[bool], rng: &mut ChaCha8Rng) -> f64 {
    let mut shuffled = labels.to_vec();
    let draws: Vec<f64> = (0..NULL_PERMUTATIONS)
        .map(|_| {
            shuffled.shuffle(rng);
            auc_roc(scores, &shuffled).unwrap()
        })
        .collect();
    let mean = draws.iter().sum::<f64>() / draws.len() as f64;
    (draws.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / draws.len() as f64).sqrt()
}

fn ordering(data: &SynthData, backbone: &BackboneConfig, ck: &Checkpoint, pretrain_secs: f64) -> Outcome {
    let start = Instant::now();
    let g = build_graph(&data.db).unwrap();
    let (_, entities) = resolve_entities(&g, &data.binary).unwrap();
    let val: Vec<_> = entities.into_iter().filter(|e| e.split == Split::Val).collect();
    let labels: Vec<bool> = val.iter().map(|e| e.label == 1.0).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (mut wins, mut frozen_ok) = (0, true);
    let mut rows = Vec::new();
    for seed in 0..ORDER_SEEDS {
        let run = |regime: Regime, init: Option<&Checkpoint>| {
            let cfg = FinetuneConfig {
                regime,
                seed,
                lr: ORDER_LR,
                max_steps: ORDER_STEPS,
                batch_size: ORDER_BATCH,
                fanout: ORDER_FANOUT,
                val_every: ORDER_VAL_EVERY,
                patience: ORDER_STEPS,
                ..FinetuneConfig::default()
            };
            finetune(&g, &data.binary, init, backbone, &cfg).unwrap()
        };
        let base = run(Regime::Baseline, None);
        let frozen = run(Regime::FrozenPretrained, Some(ck));
        let tuned = run(Regime::PretrainedFinetuned, Some(ck));
        let (b, f, t) = (auc_of(base.best_val), auc_of(frozen.best_val), auc_of(tuned.best_val));
        wins += usize::from(t >= b);
        let scores = frozen
            .model
            .predict(&g, &val, ORDER_FANOUT, FinetuneConfig::default().eval_batch_size)
            .unwrap();
        let sigma = permutation_sigma(&scores, &labels, &mut rng);
        let threshold = 0.5 + NULL_SIGMAS * sigma;
        frozen_ok &= f > threshold;
        rows.push(format!("seed {seed}: baseline {b:.4}, frozen {f:.4} (null bound {threshold:.4}), finetuned {t:.4}"));
    }
    let secs = pretrain_secs + start.elapsed().as_secs_f64();
    (
        wins >= ORDER_MIN_WINS && frozen_ok && secs < PIPELINE_SECONDS,
        format!(
            "finetuned >= baseline in {wins}/{ORDER_SEEDS} seeds; {}; pipeline {secs:.1}s",
            rows.join("; ")
        ),
    )
}

/// Fraction of (positive, negative) pairs ranked correctly, ties counting half.
fn pair_auc(scores: &[f64], labels: &[bool]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &li) in labels.iter().enumerate() {
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                pairs += 1.0;
                wins += if scores[i] > scores[j] {
                    1.0
                } else if scores[i] == scores[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn metric_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut auc_worst, mut mae_worst, mut tied) = (0.0f64, 0.0f64, 0);
    for _ in 0..METRIC_INSTANCES {
        let n = rng.gen_range(2..200);
        let levels = rng.gen_range(2..20);
        let mut labels: Vec<bool> = (0..n).map(|_| rng.gen_bool(0.4)).collect();
        labels[0] = true;
        labels[1] = false;
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..levels) as f64 / 4.0).collect();
        tied += usize::from(scores.iter().map(|s| s.to_bits()).collect::<HashSet<_>>().len() < n);
        auc_worst = auc_worst.max((auc_roc(&scores, &labels).unwrap() - pair_auc(&scores, &labels)).abs());

        let p: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let t: Vec<f64> = (0..n).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let mut total = 0.0;
        for i in 0..n {
            total += (p[i] - t[i]).abs();
        }
        mae_worst = mae_worst.max((mae(&p, &t).unwrap() - total / n as f64).abs());
    }
    (
        auc_worst < METRIC_TOL && mae_worst < METRIC_TOL && tied > 0,
        format!(
            "auc deviation {auc_worst:.2e} ({tied}/{METRIC_INSTANCES} instances with ties), mae deviation {mae_worst:.2e}"
        ),
    )
}

fn determinism() -> Outcome {
    let data = synth_data(&SynthConfig {
        rng_seed: 4,
        users: 80,
        items: 20,
        events: 600,
        ..SynthConfig::default()
    })
    .unwrap();
    let bb = BackboneConfig {
        hidden_dim: 8,
        attr_dim: 4,
        text_buckets: 16,
        table_encoder: TableEncoderKind::TabularResNet,
        ..BackboneConfig::default()
    };
    let mut pcfg = PretrainConfig {
        max_steps: 6,
        val_every: 2,
        val_samples: 2,
        seed: 3,
        ..PretrainConfig::default()
    };
    pcfg.sampler.per_type_budget = 16;
    pcfg.sampler.seed_count = 8;
    let fcfg = |regime| FinetuneConfig {
        lr: 1e-3,
        max_steps: 6,
        val_every: 2,
        batch_size: 16,
        fanout: 4,
        head_hidden: 8,
        regime,
        seed: 3,
        ..FinetuneConfig::default()
    };
    let g = build_graph(&data.db).unwrap();

    let a = pretrain(&data.db, &bb, &pcfg).unwrap();
    let b = rdl_core::par::with_threads(1, || pretrain(&data.db, &bb, &pcfg).unwrap());
    let x = finetune(&g, &data.binary, Some(&a.checkpoint), &bb, &fcfg(Regime::PretrainedFinetuned)).unwrap();
    let y = finetune(&g, &data.binary, Some(&b.checkpoint), &bb, &fcfg(Regime::PretrainedFinetuned)).unwrap();
    let reruns = metrics_to_jsonl(&a.metrics) == metrics_to_jsonl(&b.metrics)
        && metrics_to_jsonl(&x.metrics) == metrics_to_jsonl(&y.metrics)
        && a.checkpoint == b.checkpoint;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.rdl");
    let ck = x.model.to_checkpoint(x.best_step as u64, 3).unwrap();
    write_checkpoint(&ck, &path).unwrap();
    let back = read_checkpoint(&path).unwrap();
    let restored = TaskModel::from_checkpoint(&data.db.schema, &back).unwrap();
    let all = Subgraph::induced(
        &g,
        (0..g.num_node_types()).map(|t| (0..g.node_count(NodeType(t))).collect()).collect(),
        Vec::new(),
    );
    let bits = |m: &TaskModel, g: &HeteroGraph| {
        let mut tape = Tape::inference();
        let h = m.backbone.embed(&mut tape, &m.store, g, &all, Mode::Eval).unwrap().h;
        h.iter()
            .flat_map(|&v| tape.value(v).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>())
            .collect::<Vec<_>>()
    };
    let round_trip = back == ck && bits(&x.model, &g) == bits(&restored, &g);

    let before = a.checkpoint.params.checksum(BACKBONE_PREFIX);
    let frozen = finetune(&g, &data.binary, Some(&a.checkpoint), &bb, &fcfg(Regime::FrozenPretrained)).unwrap();
    let frozen_ok = frozen.model.store.checksum(BACKBONE_PREFIX) == before;
    (
        reruns && round_trip && frozen_ok,
        format!("identical reruns: {reruns}; bitwise checkpoint round trip: {round_trip}; frozen backbone checksum constant: {frozen_ok}"),
    )
}

fn report(id: usize, name: &str, f: impl FnOnce() -> Outcome) -> bool {
    let (ok, detail) = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        (false, format!("panicked: {msg}"))
    });
    println!("{} {id}. {name}: {detail}", if ok { "PASS" } else { "FAIL" });
    ok
}

fn main() {
    // `cargo test -- --list` and filtered runs expect the harness protocol.
    if std::env::args().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    let mut ok = true;
    ok &= report(1, "loss oracle equivalence", loss_oracle);
    ok &= report(2, "closed-form losses", closed_forms);
    ok &= report(3, "gradient suite", gradients);
    ok &= report(4, "corruption integrity", corruption);
    ok &= report(5, "sampler properties", sampler);

    let data = synth_data(&SynthConfig::default()).unwrap();
    let backbone = BackboneConfig::default();
    let mut pretrained = None;
    ok &= report(6, "trainability", || {
        let (outcome, run, secs) = trainability(&data, &backbone);
        pretrained = Some((run.checkpoint, secs));
        outcome
    });
    ok &= report(7, "qualitative ordering", || match &pretrained {
        Some((ck, secs)) => ordering(&data, &backbone, ck, *secs),
        None => (false, "no pretrained checkpoint".into()),
    });
    ok &= report(8, "metric oracles", metric_oracles);
    ok &= report(9, "determinism and persistence", determinism);
    if !ok {
        std::process::exit(1);
    }
}

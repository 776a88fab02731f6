use moe_spatial::mem::{binomial, unrank_subset, MemLossConfig};
use moe_spatial::toy::*;
use moe_spatial::trace::{validate_trace, TraceHeader};
use moe_spatial::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn mini() -> ToyConfig {
    ToyConfig {
        vocab_size: 16,
        model_dim: 16,
        n_heads: 2,
        n_layers: 2,
        n_experts: 4,
        k_active: 2,
        context_length: 8,
        expert_hidden: 16,
        ..ToyConfig::default()
    }
}

fn small() -> ToyConfig {
    ToyConfig {
        context_length: 24,
        ..ToyConfig::default()
    }
}

fn tokens(cfg: &ToyConfig, len: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..len).map(|_| rng.random_range(0..cfg.vocab_size)).collect()
}

fn header(cfg: &ToyConfig, sequences: usize) -> TraceHeader {
    TraceHeader {
        model_name: "toy".into(),
        routing: cfg.routing(),
        num_sequences: sequences,
    }
}

#[test]
fn router_topk_examples() {
    assert_eq!(router_topk(&[0.1, 0.9, 0.5], 2), vec![1, 2]);
    assert_eq!(router_topk(&[0.5, 0.5, 0.1], 1), vec![0]);
    assert_eq!(router_topk(&[3.0, 1.0, 2.0, 0.0], 4), vec![0, 1, 2, 3]);
}

#[test]
fn causality() {
    let cfg = small();
    let p = ToyMoEParams::init(cfg.clone(), 11).unwrap();
    let base = tokens(&cfg, 24, 1);
    let a = forward(&p, &base, 0, RouterMode::LearnedTopk).unwrap();
    for t in [0, 5, 17, 23] {
        let mut pert = base.clone();
        pert[t] = (pert[t] + 1) % cfg.vocab_size;
        let b = forward(&p, &pert, 0, RouterMode::LearnedTopk).unwrap();
        for s in 0..t {
            assert_eq!(a.logits[s], b.logits[s], "position {s} changed after perturbing {t}");
        }
        assert_ne!(a.logits[t], b.logits[t]);
    }
}

#[test]
fn traces_validate_in_every_mode() {
    let cfg = small();
    let p = ToyMoEParams::init(cfg.clone(), 2).unwrap();
    let batch: Vec<Vec<usize>> = (0..3).map(|s| tokens(&cfg, 24, s)).collect();
    for mode in [
        RouterMode::LearnedTopk,
        RouterMode::StaticPositional { map: StaticMap::ContiguousBlocks },
        RouterMode::StaticPositional { map: StaticMap::CycledSubsets },
    ] {
        let outs = forward_batch(&p, &batch, 0, mode).unwrap();
        let traces: Vec<_> = outs.iter().flat_map(|o| o.traces.clone()).collect();
        let violations = validate_trace(&header(&cfg, 3), &traces);
        assert!(violations.is_empty(), "{mode:?}: {violations:?}");
        if mode == RouterMode::LearnedTopk {
            assert!(traces.iter().all(|t| t.logits.is_some()));
        }
    }
}

#[test]
fn static_routing_ignores_router_weights() {
    let cfg = small();
    let p = ToyMoEParams::init(cfg.clone(), 4).unwrap();
    let mut q = p.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for r in q.router_ranges() {
        q.data[r].iter_mut().for_each(|w| *w = rng.random_range(-5.0..5.0));
    }
    let x = tokens(&cfg, 24, 3);
    for map in [StaticMap::ContiguousBlocks, StaticMap::CycledSubsets] {
        let mode = RouterMode::StaticPositional { map };
        let a = forward(&p, &x, 0, mode).unwrap();
        let b = forward(&q, &x, 0, mode).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.traces[0].experts, b.traces[0].experts);
    }
}

#[test]
fn cycled_static_map_is_reproduced() {
    let cfg = small();
    let p = ToyMoEParams::init(cfg.clone(), 4).unwrap();
    let x = tokens(&cfg, 24, 3);
    let out = forward(&p, &x, 0, RouterMode::StaticPositional { map: StaticMap::CycledSubsets }).unwrap();
    let states = binomial(8, 2).unwrap() as usize;
    for tr in &out.traces {
        for (pos, s) in tr.experts.iter().enumerate() {
            assert_eq!(s, &unrank_subset(pos % states, 8, 2));
        }
    }
    let blocks = forward(&p, &x, 0, RouterMode::StaticPositional { map: StaticMap::ContiguousBlocks }).unwrap();
    // 4 groups over 24 positions: 6 positions per group.
    assert_eq!(blocks.traces[0].experts[0], vec![0, 1]);
    assert_eq!(blocks.traces[0].experts[6], vec![2, 3]);
    assert_eq!(blocks.traces[0].experts[23], vec![6, 7]);
}

#[test]
fn zero_router_selects_lowest_experts() {
    let cfg = small();
    let mut p = ToyMoEParams::init(cfg.clone(), 5).unwrap();
    for r in p.router_ranges() {
        p.data[r].fill(0.0);
    }
    let out = forward(&p, &tokens(&cfg, 24, 0), 0, RouterMode::LearnedTopk).unwrap();
    for tr in &out.traces {
        assert!(tr.experts.iter().all(|s| s == &vec![0, 1]));
    }
}

#[test]
fn dense_routing_when_k_equals_n() {
    let cfg = ToyConfig {
        n_experts: 3,
        k_active: 3,
        ..small()
    };
    let p = ToyMoEParams::init(cfg.clone(), 6).unwrap();
    let out = forward(&p, &tokens(&cfg, 24, 0), 0, RouterMode::LearnedTopk).unwrap();
    for tr in &out.traces {
        assert!(tr.experts.iter().all(|s| s == &vec![0, 1, 2]));
    }
    // With every expert selected, top-k gates equal the full softmax.
    let full = ToyMoEParams::init(
        ToyConfig {
            gate_mode: GateMode::FullSoftmax,
            ..cfg
        },
        6,
    )
    .unwrap();
    let dense = forward(&full, &tokens(&full.config, 24, 0), 0, RouterMode::LearnedTopk).unwrap();
    for (a, b) in out.logits.iter().flatten().zip(dense.logits.iter().flatten()) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn rejects_bad_inputs() {
    let cfg = small();
    let p = ToyMoEParams::init(cfg.clone(), 0).unwrap();
    assert!(matches!(forward(&p, &[99], 0, RouterMode::LearnedTopk), Err(Error::Config(_))));
    assert!(matches!(forward(&p, &[0; 25], 0, RouterMode::LearnedTopk), Err(Error::Config(_))));
    assert!(matches!(forward(&p, &[], 0, RouterMode::LearnedTopk), Err(Error::Config(_))));
}

#[test]
fn switch_aux_examples() {
    let n = 8;
    let uniform = vec![vec![1.0 / n as f64; n]; n];
    let balanced: Vec<Vec<usize>> = (0..n).map(|e| vec![e]).collect();
    assert!((switch_aux_loss(&uniform, &balanced) - 1.0).abs() < 1e-12);
    let mut one_hot = vec![0.0; n];
    one_hot[0] = 1.0;
    let collapsed = vec![one_hot; 10];
    assert!((switch_aux_loss(&collapsed, &vec![vec![0]; 10]) - n as f64).abs() < 1e-12);
}

#[test]
fn switch_aux_random_balanced_assignment() {
    // Random router probabilities and uniformly random top-1 assignment over
    // 10^4 tokens; the estimate concentrates at 1 with a spread measured over
    // independent replicates.
    let (n, tokens, reps) = (8, 10_000, 40);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut values = Vec::new();
    for _ in 0..reps {
        let probs: Vec<Vec<f64>> = (0..tokens)
            .map(|_| {
                let raw: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
                let s: f64 = raw.iter().sum();
                raw.iter().map(|v| v / s).collect()
            })
            .collect();
        let sel: Vec<Vec<usize>> = (0..tokens).map(|_| vec![rng.random_range(0..n)]).collect();
        values.push(switch_aux_loss(&probs, &sel));
    }
    let mean = values.iter().sum::<f64>() / reps as f64;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (reps - 1) as f64).sqrt();
    assert!((values[0] - 1.0).abs() < 3.0 * sd, "{} vs sd {sd}", values[0]);
    assert!((mean - 1.0).abs() < 3.0 * sd / (reps as f64).sqrt());
}

fn checked_report(aux: AuxMode, weight: f64, gate: GateMode) -> GradCheckReport {
    let loss = LossConfig {
        aux_mode: aux,
        aux_weight: weight,
        router_mode: RouterMode::LearnedTopk,
        mem: MemLossConfig::default(),
    };
    for seed in 0..20 {
        let cfg = ToyConfig {
            gate_mode: gate,
            ..mini()
        };
        let p = ToyMoEParams::init(cfg.clone(), seed).unwrap();
        let batch = make_batch(Task::Copy, &cfg, 8, 2, seed, 0);
        let r = grad_check(&p, &batch, &loss).unwrap();
        if r.status == GradCheckStatus::Checked {
            return r;
        }
    }
    panic!("every sampled point was tie-adjacent");
}

#[test]
fn grad_check_plain() {
    let r = checked_report(AuxMode::None, 0.0, GateMode::TopKSoftmax);
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
}

#[test]
fn grad_check_mem() {
    let r = checked_report(AuxMode::Mem, 0.01, GateMode::TopKSoftmax);
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
}

#[test]
fn grad_check_switch() {
    let r = checked_report(AuxMode::SwitchAux, 0.01, GateMode::TopKSoftmax);
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
}

#[test]
fn grad_check_full_softmax_gates() {
    let r = checked_report(AuxMode::Mem, 0.5, GateMode::FullSoftmax);
    assert!(r.max_rel_error <= 1e-4, "{r:?}");
}

#[test]
fn finite_difference_error_is_truncation() {
    let cfg = mini();
    let p = ToyMoEParams::init(cfg.clone(), 0).unwrap();
    let batch = make_batch(Task::Reverse, &cfg, 8, 2, 0, 0);
    let loss = LossConfig {
        aux_mode: AuxMode::Mem,
        aux_weight: 0.01,
        ..LossConfig::default()
    };
    let coarse = grad_check_with_step(&p, &batch, &loss, 1e-3).unwrap();
    let fine = grad_check_with_step(&p, &batch, &loss, 1e-4).unwrap();
    // Central differences: error falls with the square of the step.
    let ratio = coarse.max_abs_error / fine.max_abs_error;
    assert!((30.0..300.0).contains(&ratio), "ratio {ratio}");
}

#[test]
fn zero_steps_keep_params_and_initial_usage() {
    let cfg = small();
    let p = ToyMoEParams::init(cfg.clone(), 8).unwrap();
    let tc = TrainConfig {
        steps: 0,
        aux_weight: 0.0,
        ..TrainConfig::default()
    };
    let out = train(p.clone(), &tc).unwrap();
    assert_eq!(out.params, p);
    assert!(out.curve.is_empty());
    assert_eq!(out.checkpoints.len(), 1);
    let eval = eval_batch(tc.task, &cfg, cfg.context_length, tc.eval_batch, tc.seed);
    let toks: Vec<Vec<usize>> = eval.iter().map(|e| e.tokens.clone()).collect();
    let outs = forward_batch(&p, &toks, 0, RouterMode::LearnedTopk).unwrap();
    let mut usage = vec![vec![0u64; cfg.n_experts]; cfg.n_layers];
    for o in &outs {
        for tr in &o.traces {
            tr.experts.iter().flatten().for_each(|&e| usage[tr.layer][e] += 1);
        }
    }
    assert_eq!(out.checkpoints[0].usage, usage);
}

#[test]
fn training_is_deterministic_and_learns() {
    let cfg = small();
    let tc = TrainConfig {
        steps: 30,
        batch: 2,
        aux_mode: AuxMode::Mem,
        checkpoint_every: 10,
        seed: 3,
        ..TrainConfig::default()
    };
    let a = train(ToyMoEParams::init(cfg.clone(), 3).unwrap(), &tc).unwrap();
    let b = train(ToyMoEParams::init(cfg.clone(), 3).unwrap(), &tc).unwrap();
    let bits = |o: &TrainOutcome| o.curve.iter().map(|r| r.total.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
    assert_eq!(a.params, b.params);
    assert_eq!(a.checkpoints, b.checkpoints);
    assert_eq!(a.checkpoints.iter().map(|c| c.step).collect::<Vec<_>>(), vec![0, 10, 20, 30]);
    let first = a.curve[..5].iter().map(|r| r.cross_entropy).sum::<f64>();
    let last = a.curve[25..].iter().map(|r| r.cross_entropy).sum::<f64>();
    assert!(last < first);
}

#[test]
fn divergence_is_a_training_error() {
    let cfg = small();
    let tc = TrainConfig {
        steps: 5,
        batch: 1,
        lr: 1e300,
        grad_clip: None,
        ..TrainConfig::default()
    };
    match train(ToyMoEParams::init(cfg, 1).unwrap(), &tc) {
        Err(Error::Training { step, .. }) => assert!(step <= 5),
        other => panic!("expected a training error, got {other:?}"),
    }
}

#[test]
fn negative_aux_weight_rejected() {
    let tc = TrainConfig {
        aux_weight: -0.1,
        aux_mode: AuxMode::Mem,
        ..TrainConfig::default()
    };
    assert!(matches!(tc.validate(&small()), Err(Error::Config(_))));
}

#[test]
fn task_labels() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let copy = make_example(Task::Copy, 10, 6, &mut rng);
    assert_eq!(copy.targets[0], None);
    for t in 1..6 {
        assert_eq!(copy.targets[t], Some(copy.tokens[t - 1]));
    }
    let rev = make_example(Task::Reverse, 10, 8, &mut rng);
    for i in 0..4 {
        assert_eq!(rev.tokens[4 + i], rev.tokens[3 - i]);
    }
    assert!(rev.targets[..3].iter().all(Option::is_none));
    assert_eq!(rev.targets[3], Some(rev.tokens[4]));
    assert_eq!(rev.targets[7], None);
    let sum = make_example(Task::ModSum, 10, 5, &mut rng);
    let mut acc = 0;
    for t in 0..5 {
        acc = (acc + sum.tokens[t]) % 10;
        assert_eq!(sum.targets[t], Some(acc));
    }
}

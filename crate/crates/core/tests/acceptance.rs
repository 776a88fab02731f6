//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits 0;
//! set `ACCEPTANCE_STRICT=1` to exit 1 when any criterion fails.

use std::time::Instant;

use moe_spatial::chain::{
    mean_run_length, order_check, sample_chain, samples_to_traces, transfer_matrix_xi, MetropolisChain, SpinChainModel,
};
use moe_spatial::mem::{binomial, entropy, kl_to_uniform, mem_loss, mem_loss_grad, state_distribution, MemLossConfig};
use moe_spatial::probe::{synth_rope_features, train_probe, ProbeDataset, ProbeOptions, TargetSpec};
use moe_spatial::stats::{fit_scaling, model_average, xi_profile, XiAggregation, XiOptions, XiUnit};
use moe_spatial::toy::{
    forward, grad_check, make_batch, train, AuxMode, GateMode, GradCheckStatus, LossConfig, RouterMode, StaticMap, Task,
    ToyConfig, ToyMoEParams, TrainConfig,
};
use moe_spatial::trace::{gen_random_trace, split_seed, validate_trace, ActivationTrace, RoutingConfig, TraceHeader};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn criterion(id: u32, name: &str, budget_s: f64, f: impl FnOnce() -> Outcome) -> bool {
    let start = Instant::now();
    let o = f();
    let secs = start.elapsed().as_secs_f64();
    let in_budget = secs < budget_s;
    let pass = o.pass && in_budget;
    println!(
        "{} criterion {id} ({name}): {} [{secs:.1} s, budget {budget_s:.0} s{}]",
        if pass { "PASS" } else { "FAIL" },
        o.detail,
        if in_budget { "" } else { ", over budget" }
    );
    pass
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n)
        .map(|_| {
            let x: f64 = StandardNormal.sample(&mut *rng);
            scale * x
        })
        .collect()
}

// ---- 1 ---------------------------------------------------------------------

fn mem_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut sum_err, mut hk_err, mut softmax_err) = (0.0f64, 0.0f64, 0.0f64);
    for i in 0..1000 {
        let n = rng.random_range(2..=8);
        let k = if i % 4 == 0 { 1 } else { rng.random_range(1..=n) };
        let beta = rng.random_range(0.1..4.0);
        let scale = rng.random_range(0.1..5.0);
        let z = normal_vec(&mut rng, n, scale);
        let d = state_distribution(&z, k, beta).unwrap();
        sum_err = sum_err.max((d.probs.iter().sum::<f64>() - 1.0).abs());
        let ln_c = (binomial(n, k).unwrap() as f64).ln();
        hk_err = hk_err.max((entropy(&d) + kl_to_uniform(&d) - ln_c).abs());
        if k == 1 {
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let w: Vec<f64> = z.iter().map(|v| (beta * (v - m)).exp()).collect();
            let s: f64 = w.iter().sum();
            for (p, wi) in d.probs.iter().zip(&w) {
                softmax_err = softmax_err.max((p - wi / s).abs());
            }
        }
    }
    outcome(
        sum_err <= 1e-10 && hk_err <= 1e-10 && softmax_err <= 1e-12,
        format!(
            "1000 vectors, n<=8: max|sum p - 1| = {sum_err:.1e} (tol 1e-10), max|H + KL - ln C| = {hk_err:.1e} (tol 1e-10), \
             k=1 max|p - softmax| = {softmax_err:.1e} (tol 1e-12)"
        ),
    )
}

// ---- 2 ---------------------------------------------------------------------

fn mem_gradient() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-4;
    let (mut worst, mut worst_elem) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let n = rng.random_range(2..=6);
        let k = rng.random_range(1..n);
        let tokens = rng.random_range(1..=3);
        let cfg = MemLossConfig {
            temperature: rng.random_range(0.2..3.0),
            beta: rng.random_range(0.2..3.0),
        };
        let z: Vec<Vec<f64>> = (0..tokens).map(|_| normal_vec(&mut rng, n, 1.5)).collect();
        let g = mem_loss_grad(&z, k, &cfg).unwrap();
        let (mut max_abs, mut scale) = (0.0f64, 0.0f64);
        for t in 0..tokens {
            for e in 0..n {
                let mut up = z.clone();
                let mut dn = z.clone();
                up[t][e] += h;
                dn[t][e] -= h;
                let fd = (mem_loss(&up, k, &cfg).unwrap() - mem_loss(&dn, k, &cfg).unwrap()) / (2.0 * h);
                let a = g[t][e];
                max_abs = max_abs.max((a - fd).abs());
                scale = scale.max(a.abs()).max(fd.abs());
                worst_elem = worst_elem.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-12));
            }
        }
        worst = worst.max(max_abs / scale.max(1e-300));
    }
    outcome(
        worst <= 1e-5,
        format!(
            "100 instances, n<=6, step 1e-4: max relative error {worst:.1e} (tol 1e-5), max elementwise {worst_elem:.1e}"
        ),
    )
}

// ---- 3 ---------------------------------------------------------------------

fn random_baseline() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for n in [8usize, 16] {
        // Long sequences keep the per-sequence boundary bias (O(1/L)) far
        // below the statistical error.
        let (len, seqs) = (2048, 512);
        let cfg = RoutingConfig::new(n, 1, 1, len).unwrap();
        let traces: Vec<ActivationTrace> = gen_random_trace(cfg, seqs, 30 + n as u64).unwrap().collect();
        let row = &xi_profile(&cfg, &traces, &[1], XiOptions::default()).unwrap()[0];
        let target = n as f64 / (n as f64 - 1.0);
        let z = (row.mean - target) / row.std_err();
        pass &= z.abs() < 3.0;
        parts.push(format!(
            "n={n}: xi = {:.5} +- {:.5} vs {target:.5} ({z:+.2} sigma, {} tokens)",
            row.mean,
            row.std_err(),
            len * seqs
        ));
    }
    outcome(pass, parts.join("; "))
}

// ---- 4 ---------------------------------------------------------------------

fn random_scaling() -> Outcome {
    let grid = [1usize, 2, 4, 8, 16, 32, 64];
    let (len, seqs) = (2048, 512);
    let cfg = RoutingConfig::new(16, 1, 1, len).unwrap();
    let traces: Vec<ActivationTrace> = gen_random_trace(cfg, seqs, 4).unwrap().collect();
    let mut parts = Vec::new();
    let mut pass = false;
    for (unit, name) in [(XiUnit::Blocks, "blocks"), (XiUnit::Tokens, "tokens")] {
        let opts = XiOptions {
            unit,
            aggregation: XiAggregation::PerSequence,
        };
        let rows = xi_profile(&cfg, &traces, &grid, opts).unwrap();
        let fit = fit_scaling(&model_average(&rows)).unwrap();
        let alpha_ok = (fit.alpha - 0.131088).abs() <= 0.3 * 0.131088;
        let ok = fit.r_squared >= 0.95 && alpha_ok;
        if unit == XiUnit::Blocks {
            pass = ok;
        }
        parts.push(format!(
            "{name}: alpha = {:.4}, R^2 = {:.4}{}",
            fit.alpha,
            fit.r_squared,
            if unit == XiUnit::Blocks { "" } else { " (diagnostic)" }
        ));
    }
    outcome(
        pass,
        format!(
            "top-1 of 16, n in 1..64, L={len}, {seqs} seqs; need R^2 >= 0.95 and alpha in 0.131088 +- 30%: {}",
            parts.join("; ")
        ),
    )
}

// ---- 5 ---------------------------------------------------------------------

fn spin_chain() -> Outcome {
    let mut parts = Vec::new();

    let m2 = SpinChainModel::potts(2, 1.0, 1.0, 1024).unwrap();
    let xi = transfer_matrix_xi(&m2).unwrap();
    let exact = -1.0 / 1f64.tanh().ln();
    let tm_ok = (xi - exact).abs() <= 1e-9;
    parts.push(format!("transfer-matrix xi = {xi:.12} vs {exact:.12}"));

    // Independent chains give an honest error bar. Pooled domain length over
    // a free chain of L sites has expectation L / (1 + (L - 1) p), with p the
    // probability that neighbours differ.
    let (chains, per_chain, sweeps) = (32, 25, 10);
    let mut est = Vec::with_capacity(chains);
    for c in 0..chains {
        let samples = sample_chain(&m2, per_chain, sweeps, split_seed(5, c as u64, 0)).unwrap();
        let (h, traces) = samples_to_traces("chain", 2, &samples).unwrap();
        let opts = XiOptions {
            unit: XiUnit::Blocks,
            aggregation: XiAggregation::Pooled,
        };
        est.push(xi_profile(&h.routing, &traces, &[1], opts).unwrap()[0].mean);
    }
    let mean = est.iter().sum::<f64>() / chains as f64;
    let sd = (est.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (chains as f64 - 1.0)).sqrt();
    let se = sd / (chains as f64).sqrt();
    let len = m2.length as f64;
    let run = mean_run_length(2, xi);
    let expected = len / (1.0 + (len - 1.0) / run);
    let z = (mean - expected) / se;
    let mc_ok = z.abs() < 3.0;
    parts.push(format!(
        "MC xi_ds = {mean:.4} +- {se:.4} vs {expected:.4} at L={} ({z:+.2} sigma; bulk {run:.4})",
        m2.length
    ));

    let mut tv_worst = 0.0f64;
    for (n, len, field) in [(2usize, 6usize, vec![0.0, 0.0]), (3, 6, vec![0.0; 3]), (3, 5, vec![0.3, 0.0, -0.2])] {
        let model = SpinChainModel {
            n_states: n,
            coupling: 0.8,
            field,
            beta: 1.0,
            length: len,
        };
        tv_worst = tv_worst.max(stationarity_tv(&model, 2_000_000, 7 + n as u64));
    }
    let tv_ok = tv_worst < 0.02;
    parts.push(format!("enumeration TV = {tv_worst:.4} (tol 0.02)"));

    let lengths = [64usize, 256, 1024, 4096];
    let rows = order_check(&m2, &lengths, 200, 9).unwrap();
    let decreasing = rows.windows(2).all(|w| w[1].mean_abs_m < w[0].mean_abs_m);
    let (first, last) = (&rows[0], &rows[rows.len() - 1]);
    let slope = (last.mean_abs_m / first.mean_abs_m).ln() / (last.length as f64 / first.length as f64).ln();
    let order_ok = decreasing && slope < -0.35;
    parts.push(format!(
        "mean|m| {} at L={:?}, log-log slope {slope:.3} (disorder ~ -0.5)",
        rows.iter().map(|r| format!("{:.3}", r.mean_abs_m)).collect::<Vec<_>>().join("/"),
        lengths
    ));
    outcome(tm_ok && mc_ok && tv_ok && order_ok, parts.join("; "))
}

/// Total variation between the sampler's empirical distribution and the
/// exact Boltzmann distribution over all `n^L` configurations.
fn stationarity_tv(model: &SpinChainModel, samples: usize, seed: u64) -> f64 {
    let (n, len) = (model.n_states, model.length);
    let states = n.pow(len as u32);
    let decode = |mut idx: usize| {
        (0..len)
            .map(|_| {
                let s = idx % n;
                idx /= n;
                s
            })
            .collect::<Vec<_>>()
    };
    let weights: Vec<f64> = (0..states)
        .map(|i| (-model.beta * model.energy(&decode(i))).exp())
        .collect();
    let z: f64 = weights.iter().sum();
    let mut counts = vec![0u64; states];
    let mut chain = MetropolisChain::new(model, seed);
    for _ in 0..1000 {
        chain.sweep();
    }
    for _ in 0..samples {
        chain.sweep();
        let idx = chain.state().iter().rev().fold(0, |acc, &s| acc * n + s);
        counts[idx] += 1;
    }
    0.5 * weights
        .iter()
        .zip(&counts)
        .map(|(w, &c)| (w / z - c as f64 / samples as f64).abs())
        .sum::<f64>()
}

// ---- 6 ---------------------------------------------------------------------

fn mini(gate: GateMode) -> ToyConfig {
    ToyConfig {
        vocab_size: 16,
        model_dim: 16,
        n_heads: 2,
        n_layers: 2,
        n_experts: 4,
        k_active: 2,
        context_length: 8,
        expert_hidden: 16,
        gate_mode: gate,
        ..ToyConfig::default()
    }
}

fn toy_properties() -> (bool, String) {
    let cfg = ToyConfig {
        context_length: 32,
        ..ToyConfig::default()
    };
    let p = ToyMoEParams::init(cfg.clone(), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let tokens: Vec<usize> = (0..32).map(|_| rng.random_range(0..cfg.vocab_size)).collect();

    let base = forward(&p, &tokens, 0, RouterMode::LearnedTopk).unwrap();
    let mut causal = true;
    for t in [0usize, 9, 31] {
        let mut pert = tokens.clone();
        pert[t] = (pert[t] + 1) % cfg.vocab_size;
        let b = forward(&p, &pert, 0, RouterMode::LearnedTopk).unwrap();
        causal &= (0..t).all(|s| b.logits[s] == base.logits[s]);
    }

    let modes = [
        RouterMode::LearnedTopk,
        RouterMode::StaticPositional {
            map: StaticMap::ContiguousBlocks,
        },
        RouterMode::StaticPositional {
            map: StaticMap::CycledSubsets,
        },
    ];
    let mut valid = true;
    for mode in modes {
        let out = forward(&p, &tokens, 0, mode).unwrap();
        let header = TraceHeader {
            model_name: "toy".into(),
            routing: RoutingConfig {
                context_length: tokens.len(),
                ..cfg.routing()
            },
            num_sequences: 1,
        };
        valid &= validate_trace(&header, &out.traces).is_empty();
    }

    let tc = TrainConfig {
        steps: 5,
        batch: 2,
        seq_len: Some(16),
        checkpoint_every: 5,
        eval_batch: 2,
        aux_mode: AuxMode::Mem,
        seed: 4,
        ..TrainConfig::default()
    };
    let a = train(ToyMoEParams::init(cfg.clone(), 4).unwrap(), &tc).unwrap();
    let b = train(ToyMoEParams::init(cfg.clone(), 4).unwrap(), &tc).unwrap();
    let deterministic = a.curve == b.curve && a.params.data == b.params.data && a.checkpoints == b.checkpoints;

    (
        causal && valid && deterministic,
        format!("causality {causal}, traces valid {valid}, deterministic {deterministic}"),
    )
}

fn toy_grad_checks() -> (bool, String) {
    let cases = [
        ("plain", AuxMode::None, GateMode::TopKSoftmax, RouterMode::LearnedTopk),
        ("switch", AuxMode::SwitchAux, GateMode::TopKSoftmax, RouterMode::LearnedTopk),
        ("mem", AuxMode::Mem, GateMode::TopKSoftmax, RouterMode::LearnedTopk),
        ("full-softmax+mem", AuxMode::Mem, GateMode::FullSoftmax, RouterMode::LearnedTopk),
        (
            "static",
            AuxMode::None,
            GateMode::TopKSoftmax,
            RouterMode::StaticPositional {
                map: StaticMap::ContiguousBlocks,
            },
        ),
    ];
    let mut worst = 0.0f64;
    let mut ok = true;
    for (name, aux, gate, router) in cases {
        let loss = LossConfig {
            aux_mode: aux,
            aux_weight: if aux == AuxMode::None { 0.0 } else { 0.01 },
            router_mode: router,
            mem: MemLossConfig::default(),
        };
        let cfg = mini(gate);
        let report = (0..20).find_map(|seed| {
            let p = ToyMoEParams::init(cfg.clone(), seed).unwrap();
            let batch = make_batch(Task::Copy, &cfg, 8, 2, seed, 0);
            let r = grad_check(&p, &batch, &loss).unwrap();
            (r.status == GradCheckStatus::Checked).then_some(r)
        });
        match report {
            Some(r) => {
                worst = worst.max(r.max_rel_error);
                ok &= r.max_rel_error <= 1e-4;
            }
            None => {
                ok = false;
                eprintln!("grad check {name}: every sample tie-adjacent");
            }
        }
    }
    (ok, format!("grad check on 5 miniature configs: max relative error {worst:.1e} (tol 1e-4)"))
}

fn toy_training() -> (bool, bool, String) {
    let base = TrainConfig {
        task: Task::Copy,
        steps: 2000,
        batch: 4,
        seq_len: Some(128),
        checkpoint_every: 2000,
        eval_batch: 8,
        ..TrainConfig::default()
    };
    let mut decrease = true;
    let mut higher = true;
    let mut rows = Vec::new();
    for seed in 0..3u64 {
        let mut h = [0.0; 2];
        let mut ce = [0.0; 2];
        for (i, (aux, weight)) in [(AuxMode::None, 0.0), (AuxMode::Mem, 0.01)].into_iter().enumerate() {
            let tc = TrainConfig {
                aux_mode: aux,
                aux_weight: weight,
                seed,
                ..base.clone()
            };
            let out = train(ToyMoEParams::init(ToyConfig::default(), seed).unwrap(), &tc).unwrap();
            let first = out.checkpoints.first().unwrap().eval_cross_entropy;
            let last = out.final_checkpoint();
            decrease &= last.eval_cross_entropy < first;
            h[i] = last.mean_entropy;
            ce[i] = last.eval_cross_entropy;
        }
        higher &= h[1] > h[0];
        rows.push(format!(
            "seed {seed}: H {:.3} -> {:.3} (CE {:.4}/{:.4})",
            h[0], h[1], ce[0], ce[1]
        ));
    }
    (
        decrease,
        higher,
        format!("copy task 2000 steps, usage entropy lambda=0 -> MEM 0.01: {}", rows.join(", ")),
    )
}

fn toy_moe() -> Outcome {
    let (props, props_msg) = toy_properties();
    let (grads, grads_msg) = toy_grad_checks();
    let (decrease, higher, train_msg) = toy_training();
    outcome(
        props && grads && decrease && higher,
        format!(
            "{props_msg}; {grads_msg}; loss decreases on 3/3 seeds: {decrease}; MEM entropy above lambda=0 on 3/3: {higher}; {train_msg}"
        ),
    )
}

// ---- 7 ---------------------------------------------------------------------

fn dataset(features: Array2<f64>, seq_len: usize) -> ProbeDataset {
    let rows = features.nrows();
    let seqs = (0..rows).map(|r| (r / seq_len) as u64).collect();
    let pos = (0..rows).map(|r| r % seq_len).collect();
    ProbeDataset::new(features, seqs, pos, seq_len).unwrap()
}

fn probe_pipeline() -> Outcome {
    let opts = ProbeOptions::default();

    let l = 32;
    let onehot = dataset(Array2::from_shape_fn((l * 6, l), |(r, j)| f64::from(j == r % l)), l);
    let exact = train_probe(&onehot, TargetSpec::Exact, &opts).unwrap().report.acc1.mean;

    let (gl, gs) = (256, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(70);
    let noise = dataset(
        Array2::from_shape_simple_fn((gl * gs, 16), || StandardNormal.sample(&mut rng)),
        gl,
    );
    let gauss = train_probe(&noise, TargetSpec::Parity, &opts).unwrap().report.acc1.mean;
    let gsigma = 100.0 * (0.25 / (gl * gs) as f64).sqrt();

    let synth = synth_rope_features(256, 32, 1e4, 16, 0.25, 1).unwrap();
    let acc = |t| train_probe(&synth, t, &opts).unwrap().report.acc1.mean;
    let (parity, b128, b16, ex) = (
        acc(TargetSpec::Parity),
        acc(TargetSpec::BlockIndex(128)),
        acc(TargetSpec::BlockIndex(16)),
        acc(TargetSpec::Exact),
    );
    let ssigma = 100.0 * (0.25 / synth.len() as f64).sqrt();

    let pass = exact == 100.0
        && (gauss - 50.0).abs() < 3.0 * gsigma
        && b128 > b16
        && b16 > ex
        && (parity - 50.0).abs() < 3.0 * ssigma;
    outcome(
        pass,
        format!(
            "one-hot exact {exact:.1}%; gaussian parity {gauss:.2}% (50 +- {:.2}); synthetic parity {parity:.2}% \
             (50 +- {:.2}), block_128 {b128:.1}% > block_16 {b16:.1}% > exact {ex:.1}%",
            3.0 * gsigma,
            3.0 * ssigma
        ),
    )
}

fn main() {
    let start = Instant::now();
    let results = [
        criterion(1, "MEM-loss identities", 10.0, mem_identities),
        criterion(2, "MEM gradient", 30.0, mem_gradient),
        criterion(3, "random-baseline run lengths", 60.0, random_baseline),
        criterion(4, "random scaling fit", 300.0, random_scaling),
        criterion(5, "spin chain", 300.0, spin_chain),
        criterion(6, "toy MoE", 900.0, toy_moe),
        criterion(7, "probe pipeline", 600.0, probe_pipeline),
    ];
    let passed = results.iter().filter(|&&p| p).count();
    println!(
        "acceptance: {passed}/{} criteria passed in {:.1} s",
        results.len(),
        start.elapsed().as_secs_f64()
    );
    if passed < results.len() && std::env::var_os("ACCEPTANCE_STRICT").is_some_and(|v| v == "1") {
        std::process::exit(1);
    }
}

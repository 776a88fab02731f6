use std::fs;
use std::path::{Path, PathBuf};

use moe_spatial::chain::{mean_run_length, order_check, sample_chain, samples_to_traces, transfer_matrix_xi, SpinChainModel};
use moe_spatial::error::Category;
use moe_spatial::mem::{kl_to_uniform, read_logits, state_distribution, MemLossConfig};
use moe_spatial::probe::{read_embeddings, synth_rope_features, train_probe, write_embeddings, EmbHeader, ProbeOptions};
use moe_spatial::report::{
    line_chart_svg, rates_from_records, rates_heatmap_svg, read_csv, read_rates_csv, read_xi_csv, write_csv, write_csv_to,
    write_fit_csv, write_fit_to, write_probe_csv, write_rates_csv, write_usage_csv, write_xi_csv, xi_chart_svg, Series,
};
use moe_spatial::stats::{
    activation_counts, activation_rates, fit_scaling, model_average, xi_profile, Normalization, XiAggregation, XiOptions,
    XiUnit,
};
use moe_spatial::toy::{
    eval_batch, forward_batch, grad_check_with_step, make_batch, save_checkpoint, train, AuxMode, GateMode, GradCheckStatus,
    RouterMode, StaticMap, StepRecord, Task, ToyConfig, ToyMoEParams, TrainConfig,
};
use moe_spatial::trace::{gen_random_trace, read_trace, write_trace, RoutingConfig, TraceHeader, TraceWriter};
use serde::Serialize;

use crate::manifest::{default_path, write_atomic, RunManifest, Recorder};
use crate::*;

#[derive(Debug)]
pub enum CliError {
    Core(moe_spatial::Error),
    Usage(String),
    /// A check the command performs itself did not pass.
    Failed { kind: &'static str, msg: String },
    Io { path: PathBuf, source: std::io::Error },
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Usage(m) | CliError::Failed { msg: m, .. } => write!(f, "{m}"),
            CliError::Io { path, source } => write!(f, "io error on {}: {source}", path.display()),
        }
    }
}

impl From<moe_spatial::Error> for CliError {
    fn from(e: moe_spatial::Error) -> Self {
        CliError::Core(e)
    }
}

impl CliError {
    pub fn category(&self) -> Category {
        match self {
            CliError::Core(e) => e.category(),
            CliError::Usage(_) => Category::Usage,
            CliError::Failed { .. } | CliError::Io { .. } => Category::Data,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            CliError::Core(e) => e.kind(),
            CliError::Usage(_) => "cli",
            CliError::Failed { kind, .. } => kind,
            CliError::Io { .. } => "io",
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn write_file(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|source| CliError::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Command name plus declared inputs and outputs.
fn describe(cmd: &Command) -> (&'static str, Vec<PathBuf>, Vec<PathBuf>) {
    fn some(ps: &[&Option<PathBuf>]) -> Vec<PathBuf> {
        ps.iter().filter_map(|p| (*p).clone()).collect()
    }
    match cmd {
        Command::GenRandom(a) => ("gen-random", vec![], vec![a.output.clone()]),
        Command::Analyze(AnalyzeCmd::Rates(a)) => {
            let mut o = vec![a.output.clone()];
            o.extend(some(&[&a.svg]));
            ("analyze rates", vec![a.input.clone()], o)
        }
        Command::Analyze(AnalyzeCmd::Xi(a)) => {
            let mut o = vec![a.output.clone()];
            o.extend(some(&[&a.svg]));
            ("analyze xi", vec![a.input.clone()], o)
        }
        Command::Fit(a) => ("fit", vec![a.input.clone()], some(&[&a.output])),
        Command::Chain(ChainCmd::Xi(a)) => ("chain xi", vec![], some(&[&a.output])),
        Command::Chain(ChainCmd::Sample(a)) => ("chain sample", vec![], vec![a.output.clone()]),
        Command::Chain(ChainCmd::Order(a)) => ("chain order", vec![], vec![a.output.clone()]),
        Command::MemLoss(MemLossCmd::Eval(a)) => ("mem-loss eval", vec![a.logits.clone()], some(&[&a.output])),
        Command::Toy(ToyCmd::Train(a)) => (
            "toy train",
            vec![],
            some(&[&a.report, &a.usage, &a.trace_out, &a.save]),
        ),
        Command::Toy(ToyCmd::GradCheck(a)) => ("toy grad-check", vec![], some(&[&a.output])),
        Command::Probe(ProbeCmd::MakeFeatures(a)) => ("probe make-features", vec![], vec![a.output.clone()]),
        Command::Probe(ProbeCmd::Train(a)) => {
            let mut o = vec![a.output.clone()];
            o.extend(some(&[&a.json]));
            ("probe train", vec![a.input.clone()], o)
        }
        Command::Plot(PlotCmd::Rates(a)) => ("plot rates", vec![a.input.clone()], vec![a.output.clone()]),
        Command::Plot(PlotCmd::Xi(a)) => ("plot xi", vec![a.input.clone()], vec![a.output.clone()]),
        Command::Plot(PlotCmd::Curve(a)) => ("plot curve", vec![a.input.clone()], vec![a.output.clone()]),
    }
}

/// Runs the command and writes its manifest, also on failure.
pub fn run(cli: &Cli, argv: Vec<String>) -> Result<()> {
    let (name, inputs, outputs) = describe(&cli.command);
    let rec = Recorder::new(inputs, outputs);
    let result = if cli.threads == 0 {
        Err(CliError::Usage("--threads must be at least 1".into()))
    } else {
        dispatch(cli)
    };
    let status = match &result {
        Ok(()) => "ok".to_string(),
        Err(e) => format!("error: {}", e.kind()),
    };
    let path = cli.manifest.clone().unwrap_or_else(|| default_path(&rec.outputs));
    let config = serde_json::to_value(&cli.command).expect("arguments serialize");
    let manifest: RunManifest = rec.finish(
        argv,
        name.to_string(),
        config,
        cli.seed,
        cli.threads,
        cli.deterministic,
        status,
    );
    let written = write_atomic(&path, &manifest).map_err(|source| CliError::Io { path, source });
    result.and(written)
}

fn dispatch(cli: &Cli) -> Result<()> {
    let seed = cli.seed;
    let det = cli.deterministic;
    match &cli.command {
        Command::GenRandom(a) => gen_random(a, seed),
        Command::Analyze(AnalyzeCmd::Rates(a)) => analyze_rates(a, det),
        Command::Analyze(AnalyzeCmd::Xi(a)) => analyze_xi(a, det),
        Command::Fit(a) => fit(a),
        Command::Chain(ChainCmd::Xi(a)) => chain_xi(a),
        Command::Chain(ChainCmd::Sample(a)) => chain_sample(a, seed),
        Command::Chain(ChainCmd::Order(a)) => chain_order(a, seed),
        Command::MemLoss(MemLossCmd::Eval(a)) => mem_eval(a),
        Command::Toy(ToyCmd::Train(a)) => toy_train(a, seed),
        Command::Toy(ToyCmd::GradCheck(a)) => toy_grad_check(a, seed),
        Command::Probe(ProbeCmd::MakeFeatures(a)) => make_features(a, seed),
        Command::Probe(ProbeCmd::Train(a)) => probe_train(a, seed),
        Command::Plot(PlotCmd::Rates(a)) => plot_rates(a, det),
        Command::Plot(PlotCmd::Xi(a)) => {
            let rows = read_xi_csv(&a.input)?;
            write_file(&a.output, &xi_chart_svg(&rows, det))
        }
        Command::Plot(PlotCmd::Curve(a)) => plot_curve(a, det),
    }
}

fn gen_random(a: &GenRandomArgs, seed: u64) -> Result<()> {
    let routing = RoutingConfig::new(a.n_experts, a.k, a.layers, a.len)?;
    let traces = gen_random_trace(routing, a.seqs, seed)?;
    let header = TraceHeader {
        model_name: a.model.clone(),
        routing,
        num_sequences: a.seqs,
    };
    let mut w = TraceWriter::create(&a.output, &header)?;
    for t in traces {
        w.write(&t)?;
    }
    Ok(w.finish()?)
}

fn normalization(n: NormArg) -> Normalization {
    match n {
        NormArg::Positions => Normalization::OverPositions,
        NormArg::Experts => Normalization::OverExperts,
    }
}

fn analyze_rates(a: &RatesArgs, det: bool) -> Result<()> {
    let (header, traces) = read_trace(&a.input)?;
    let counts = activation_counts(&header.routing, &traces)?;
    let rates = activation_rates(&counts, normalization(a.normalization));
    write_rates_csv(&a.output, &rates)?;
    if let Some(svg) = &a.svg {
        write_file(svg, &rates_heatmap_svg(&rates, a.layer, det)?)?;
    }
    Ok(())
}

fn analyze_xi(a: &XiArgs, det: bool) -> Result<()> {
    let (header, traces) = read_trace(&a.input)?;
    let opts = XiOptions {
        unit: match a.unit {
            UnitArg::Blocks => XiUnit::Blocks,
            UnitArg::Tokens => XiUnit::Tokens,
        },
        aggregation: if a.pooled {
            XiAggregation::Pooled
        } else {
            XiAggregation::PerSequence
        },
    };
    let rows = xi_profile(&header.routing, &traces, &a.block_sizes, opts)?;
    write_xi_csv(&a.output, &rows)?;
    if let Some(svg) = &a.svg {
        write_file(svg, &xi_chart_svg(&rows, det))?;
    }
    Ok(())
}

fn fit(a: &FitArgs) -> Result<()> {
    let rows = read_xi_csv(&a.input)?;
    let points: Vec<(f64, f64)> = match a.layer {
        Some(l) => rows
            .iter()
            .filter(|r| r.layer == l)
            .map(|r| (r.n_block as f64, r.mean))
            .collect(),
        None => model_average(&rows),
    };
    let fit = fit_scaling(&points)?;
    match &a.output {
        Some(p) => write_fit_csv(p, &fit)?,
        None => write_fit_to(std::io::stdout().lock(), &fit)?,
    }
    Ok(())
}

#[derive(Serialize)]
struct ChainXiRow {
    n: usize,
    beta: f64,
    j: f64,
    xi: f64,
    mean_run_length: f64,
}

fn chain_xi(a: &ChainXiArgs) -> Result<()> {
    let (beta, j) = a.coupling.resolve();
    let model = SpinChainModel::potts(a.n, j, beta, 2)?;
    let xi = transfer_matrix_xi(&model)?;
    let row = ChainXiRow {
        n: a.n,
        beta,
        j,
        xi,
        mean_run_length: mean_run_length(a.n, xi),
    };
    match &a.output {
        Some(p) => write_csv(p, &[row])?,
        None => write_csv_to(std::io::stdout().lock(), &[row])?,
    }
    Ok(())
}

fn chain_sample(a: &ChainSampleArgs, seed: u64) -> Result<()> {
    let (beta, j) = a.coupling.resolve();
    let model = SpinChainModel::potts(a.n, j, beta, a.len)?;
    let samples = sample_chain(&model, a.samples, a.sweeps, seed)?;
    let (header, traces) = samples_to_traces("potts-chain", a.n, &samples)?;
    Ok(write_trace(&header, &traces, &a.output)?)
}

fn chain_order(a: &ChainOrderArgs, seed: u64) -> Result<()> {
    let first = *a
        .lengths
        .first()
        .ok_or_else(|| CliError::Usage("--lengths is empty".into()))?;
    let (beta, j) = a.coupling.resolve();
    let model = SpinChainModel::potts(a.n, j, beta, first)?;
    let rows = order_check(&model, &a.lengths, a.samples, seed)?;
    Ok(write_csv(&a.output, &rows)?)
}

#[derive(Serialize)]
struct MemRow {
    token: String,
    kl: f64,
    weighted_kl: f64,
}

fn mem_eval(a: &MemEvalArgs) -> Result<()> {
    let cfg = MemLossConfig {
        temperature: a.temp,
        beta: a.beta,
    };
    cfg.validate()?;
    let logits = read_logits(&a.logits)?;
    if logits.is_empty() {
        return Err(moe_spatial::Error::Schema("no logits in input".into()).into());
    }
    let mut rows = Vec::with_capacity(logits.len() + 1);
    let mut total = 0.0;
    for (i, z) in logits.iter().enumerate() {
        let kl = kl_to_uniform(&state_distribution(z, a.k, a.beta)?);
        total += kl;
        rows.push(MemRow {
            token: i.to_string(),
            kl,
            weighted_kl: a.temp * kl,
        });
    }
    rows.push(MemRow {
        token: "total".into(),
        kl: total,
        weighted_kl: a.temp * total,
    });
    match &a.output {
        Some(p) => write_csv(p, &rows)?,
        None => write_csv_to(std::io::stdout().lock(), &rows)?,
    }
    Ok(())
}

fn model_config(m: &ModelArgs) -> Result<ToyConfig> {
    let cfg = ToyConfig {
        vocab_size: m.vocab,
        model_dim: m.model_dim,
        n_heads: m.heads,
        n_layers: m.layers,
        n_experts: m.experts,
        k_active: m.k,
        context_length: m.context,
        expert_hidden: m.hidden,
        rope_base: m.rope_base,
        gate_mode: match m.gate {
            GateArg::Topk => GateMode::TopKSoftmax,
            GateArg::Full => GateMode::FullSoftmax,
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

fn train_config(l: &LossArgs, seed: u64) -> TrainConfig {
    TrainConfig {
        task: match l.task {
            TaskArg::Copy => Task::Copy,
            TaskArg::Reverse => Task::Reverse,
            TaskArg::Modsum => Task::ModSum,
        },
        aux_mode: match l.aux {
            AuxArg::None => AuxMode::None,
            AuxArg::Switch => AuxMode::SwitchAux,
            AuxArg::Mem => AuxMode::Mem,
        },
        aux_weight: l.aux_weight,
        router_mode: match l.router {
            RouterArg::Learned => RouterMode::LearnedTopk,
            RouterArg::Static => RouterMode::StaticPositional {
                map: StaticMap::ContiguousBlocks,
            },
            RouterArg::StaticCycled => RouterMode::StaticPositional {
                map: StaticMap::CycledSubsets,
            },
        },
        mem: MemLossConfig {
            temperature: l.temp,
            beta: l.beta,
        },
        seed,
        ..TrainConfig::default()
    }
}

#[derive(Serialize)]
struct TrainSummary {
    steps: usize,
    final_cross_entropy: f64,
    final_aux: f64,
    eval_cross_entropy: f64,
    mean_usage_entropy: f64,
}

fn toy_train(a: &ToyTrainArgs, seed: u64) -> Result<()> {
    let cfg = model_config(&a.model)?;
    let tc = TrainConfig {
        steps: a.steps,
        batch: a.batch,
        seq_len: a.seq_len,
        lr: a.lr,
        checkpoint_every: a.checkpoint_every,
        eval_batch: a.eval_batch,
        grad_clip: (a.grad_clip > 0.0).then_some(a.grad_clip),
        ..train_config(&a.loss, seed)
    };
    tc.validate(&cfg)?;
    let out = train(ToyMoEParams::init(cfg.clone(), seed)?, &tc)?;
    if let Some(p) = &a.report {
        write_csv(p, &out.curve)?;
    }
    if let Some(p) = &a.usage {
        write_usage_csv(p, &out.checkpoints)?;
    }
    if let Some(p) = &a.save {
        save_checkpoint(&out.params, p)?;
    }
    if let Some(p) = &a.trace_out {
        let len = tc.seq_len.unwrap_or(cfg.context_length);
        let tokens: Vec<Vec<usize>> = eval_batch(tc.task, &cfg, len, tc.eval_batch, seed)
            .into_iter()
            .map(|e| e.tokens)
            .collect();
        let outputs = forward_batch(&out.params, &tokens, 0, tc.router_mode)?;
        let header = TraceHeader {
            model_name: "toy-moe".into(),
            routing: RoutingConfig {
                context_length: len,
                ..cfg.routing()
            },
            num_sequences: tokens.len(),
        };
        write_trace(&header, outputs.iter().flat_map(|o| o.traces.iter()), p)?;
    }
    let last = out.curve.last();
    let ck = out.final_checkpoint();
    let summary = TrainSummary {
        steps: tc.steps,
        final_cross_entropy: last.map_or(f64::NAN, |r| r.cross_entropy),
        final_aux: last.map_or(f64::NAN, |r| r.aux),
        eval_cross_entropy: ck.eval_cross_entropy,
        mean_usage_entropy: ck.mean_entropy,
    };
    println!("{}", serde_json::to_string(&summary).expect("summary serializes"));
    Ok(())
}

#[derive(Serialize)]
struct GradCheckRow {
    status: &'static str,
    tie_margin: Option<f64>,
    max_rel_error: f64,
    elementwise_rel_error: f64,
    max_abs_error: f64,
    checked: usize,
    loss: f64,
}

fn toy_grad_check(a: &GradCheckArgs, seed: u64) -> Result<()> {
    let cfg = model_config(&a.model)?;
    let tc = TrainConfig {
        seq_len: Some(a.len),
        batch: a.batch,
        ..train_config(&a.loss, seed)
    };
    tc.validate(&cfg)?;
    let params = ToyMoEParams::init(cfg.clone(), seed)?;
    let batch = make_batch(tc.task, &cfg, a.len, a.batch, seed, 0);
    let rep = grad_check_with_step(&params, &batch, &tc.loss(), a.step)?;
    let (status, tie_margin) = match rep.status {
        GradCheckStatus::Checked => ("checked", None),
        GradCheckStatus::TieAdjacent { margin } => ("tie_adjacent", Some(margin)),
    };
    let row = GradCheckRow {
        status,
        tie_margin,
        max_rel_error: rep.max_rel_error,
        elementwise_rel_error: rep.elementwise_rel_error,
        max_abs_error: rep.max_abs_error,
        checked: rep.checked,
        loss: rep.loss,
    };
    match &a.output {
        Some(p) => write_csv(p, &[row])?,
        None => write_csv_to(std::io::stdout().lock(), &[row])?,
    }
    if rep.status == GradCheckStatus::Checked && !(rep.max_rel_error <= a.tolerance) {
        return Err(CliError::Failed {
            kind: "grad-check",
            msg: format!("relative error {:e} exceeds {:e}", rep.max_rel_error, a.tolerance),
        });
    }
    Ok(())
}

fn make_features(a: &MakeFeaturesArgs, seed: u64) -> Result<()> {
    let ds = synth_rope_features(a.len, a.dim, a.base, a.seqs, a.noise, seed)?;
    let header = EmbHeader {
        model: "synthetic-rope".into(),
        layer: 0,
        dim: a.dim,
        seq_len: a.len,
    };
    Ok(write_embeddings(&a.output, &header, &ds, a.packed)?)
}

fn probe_train(a: &ProbeTrainArgs, seed: u64) -> Result<()> {
    let (_, ds) = read_embeddings(&a.input)?;
    let mut opts = ProbeOptions {
        folds: a.folds,
        seed,
        ..ProbeOptions::default()
    };
    if let Some(g) = &a.l2_grid {
        opts.l2_grid = g.clone();
    }
    let mut reports = Vec::with_capacity(a.targets.len());
    for &t in &a.targets {
        reports.push(train_probe(&ds, t, &opts)?.report);
    }
    write_probe_csv(&a.output, &reports)?;
    if let Some(p) = &a.json {
        let text = serde_json::to_string_pretty(&reports).expect("reports serialize");
        write_file(p, &(text + "\n"))?;
    }
    Ok(())
}

fn plot_rates(a: &PlotRatesArgs, det: bool) -> Result<()> {
    let records = read_rates_csv(&a.input)?;
    let rates = rates_from_records(&records, normalization(a.normalization))?;
    write_file(&a.output, &rates_heatmap_svg(&rates, a.layer, det)?)
}

fn plot_curve(a: &PlotArgs, det: bool) -> Result<()> {
    let curve: Vec<StepRecord> = read_csv(&a.input)?;
    let series = |label: &str, f: fn(&StepRecord) -> f64| Series {
        label: label.into(),
        points: curve.iter().map(|r| (r.step as f64, f(r))).collect(),
    };
    let all = [
        series("total", |r| r.total),
        series("cross-entropy", |r| r.cross_entropy),
        series("aux", |r| r.aux),
    ];
    write_file(&a.output, &line_chart_svg("training loss", "step", "loss", &all, false, det))
}

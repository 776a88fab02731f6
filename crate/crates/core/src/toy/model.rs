use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2};
use serde::{Deserialize, Serialize};

use super::rope::RopeTable;
use super::{AuxMode, GateMode, LayerOffsets, LossConfig, RouterMode, StaticMap, ToyMoEParams};
use crate::error::{Error, Result};
use crate::mem::{binomial, token_kl_grad, unrank_subset};
use crate::trace::{top_k, top_k_margin, ActivationTrace};

const NORM_EPS: f64 = 1e-6;

/// Per layer, per token, the selected experts.
pub type Selections = Vec<Vec<Vec<usize>>>;

/// One training sequence. `targets[t]` is the label for the logits at
/// position `t`; `None` positions do not contribute to the loss.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<usize>,
    pub targets: Vec<Option<usize>>,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// `T × vocab` next-token logits.
    pub logits: Vec<Vec<f64>>,
    /// One trace per layer.
    pub traces: Vec<ActivationTrace>,
    /// Per layer, `T × n` router logits.
    pub router_logits: Vec<Vec<Vec<f64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossEval {
    pub total: f64,
    pub cross_entropy: f64,
    pub aux: f64,
    /// Smallest gap between the k-th and (k+1)-th router logit over all
    /// learned routing decisions; infinite when there were none.
    pub min_margin: f64,
}

/// Indices of the `k` largest logits, ties to the lowest index, ascending.
pub fn router_topk(logits: &[f64], k: usize) -> Vec<usize> {
    top_k(logits, k)
}

/// Fixed subset used at `position` by the static positional router.
pub fn static_subset(map: StaticMap, position: usize, n: usize, k: usize, context_length: usize) -> Result<Vec<usize>> {
    match map {
        StaticMap::ContiguousBlocks => {
            let groups = n / k;
            let j = (position * groups / context_length.max(1)).min(groups - 1);
            Ok((j * k..j * k + k).collect())
        }
        StaticMap::CycledSubsets => {
            let states = binomial(n, k)
                .filter(|&c| c <= usize::MAX as u128)
                .ok_or_else(|| Error::Capacity(format!("C({n}, {k}) does not fit a machine word")))?;
            Ok(unrank_subset(position % states as usize, n, k))
        }
    }
}

fn view(a: &[f64], rows: usize, cols: usize) -> ArrayView2<'_, f64> {
    ArrayView2::from_shape((rows, cols), a).expect("matrix shape")
}

/// `a (m×k) · w (k×n)`.
fn mm(a: &[f64], m: usize, k: usize, w: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    let mut c = ArrayViewMut2::from_shape((m, n), &mut out).expect("matrix shape");
    general_mat_mul(1.0, &view(a, m, k), &view(w, k, n), 0.0, &mut c);
    out
}

/// `dw (k×n) += aᵀ (m×k) · g (m×n)`.
fn mm_at_acc(a: &[f64], m: usize, k: usize, g: &[f64], n: usize, dw: &mut [f64]) {
    let mut c = ArrayViewMut2::from_shape((k, n), dw).expect("matrix shape");
    general_mat_mul(1.0, &view(a, m, k).t(), &view(g, m, n), 1.0, &mut c);
}

/// `g (m×n) · wᵀ`, with `w` stored `k×n`.
fn mm_bt(g: &[f64], m: usize, n: usize, w: &[f64], k: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * k];
    let mut c = ArrayViewMut2::from_shape((m, k), &mut out).expect("matrix shape");
    general_mat_mul(1.0, &view(g, m, n), &view(w, k, n).t(), 0.0, &mut c);
    out
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = z.iter().map(|v| (v - max).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= s);
    p
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Row-wise RMSNorm. Returns the normalized output and the per-row `r`.
fn rms_norm(x: &[f64], d: usize, gain: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut out = vec![0.0; x.len()];
    let mut rs = Vec::with_capacity(x.len() / d);
    for (row, o) in x.chunks(d).zip(out.chunks_mut(d)) {
        let r = (row.iter().map(|v| v * v).sum::<f64>() / d as f64 + NORM_EPS).sqrt();
        for ((o, v), g) in o.iter_mut().zip(row).zip(gain) {
            *o = v / r * g;
        }
        rs.push(r);
    }
    (out, rs)
}

/// Accumulates the gain gradient and returns the input gradient.
fn rms_norm_back(x: &[f64], rs: &[f64], d: usize, gain: &[f64], dy: &[f64], dgain: &mut [f64]) -> Vec<f64> {
    let mut dx = vec![0.0; x.len()];
    for (((row, &r), dyr), dxr) in x.chunks(d).zip(rs).zip(dy.chunks(d)).zip(dx.chunks_mut(d)) {
        let mut dot = 0.0;
        for i in 0..d {
            let xh = row[i] / r;
            dgain[i] += dyr[i] * xh;
            dot += dyr[i] * gain[i] * xh;
        }
        dot /= d as f64;
        for i in 0..d {
            dxr[i] = (dyr[i] * gain[i] - row[i] / r * dot) / r;
        }
    }
    dx
}

struct ExpertCache {
    /// `(token, slot)` for each routed row.
    rows: Vec<(usize, usize)>,
    input: Vec<f64>,
    pre: Vec<f64>,
    act: Vec<f64>,
    out: Vec<f64>,
}

struct LayerCache {
    x_in: Vec<f64>,
    a: Vec<f64>,
    r1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// `heads × T × T`, lower triangle used.
    attn: Vec<f64>,
    o: Vec<f64>,
    x_mid: Vec<f64>,
    b: Vec<f64>,
    r2: Vec<f64>,
    z: Vec<f64>,
    selected: Vec<Vec<usize>>,
    gates: Vec<Vec<f64>>,
    learned: bool,
    experts: Vec<ExpertCache>,
}

struct SeqCache {
    tokens: Vec<usize>,
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
    f: Vec<f64>,
    rf: Vec<f64>,
    logits: Vec<f64>,
    min_margin: f64,
}

fn check_tokens(params: &ToyMoEParams, tokens: &[usize]) -> Result<()> {
    let cfg = &params.config;
    if tokens.is_empty() || tokens.len() > cfg.context_length {
        return Err(Error::Config(format!(
            "sequence length {} outside 1..={}",
            tokens.len(),
            cfg.context_length
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= cfg.vocab_size) {
        return Err(Error::Config(format!("token id {t} >= vocab size {}", cfg.vocab_size)));
    }
    Ok(())
}

fn run_forward(
    params: &ToyMoEParams,
    rope: &RopeTable,
    tokens: &[usize],
    mode: RouterMode,
    forced: Option<&Selections>,
) -> Result<SeqCache> {
    check_tokens(params, tokens)?;
    let cfg = &params.config;
    let (t_len, d, n, k, h) = (tokens.len(), cfg.model_dim, cfg.n_experts, cfg.k_active, cfg.expert_hidden);
    let (heads, hd) = (cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();
    if let Some(sel) = forced {
        if sel.len() != cfg.n_layers || sel.iter().any(|l| l.len() != t_len) {
            return Err(Error::Config("forced selections do not match the sequence shape".into()));
        }
    }
    let w = &params.data;
    let off = &params.layout.offsets;

    let mut x = vec![0.0; t_len * d];
    for (t, &tok) in tokens.iter().enumerate() {
        x[t * d..(t + 1) * d].copy_from_slice(&w[off.tok_emb + tok * d..off.tok_emb + (tok + 1) * d]);
    }
    let mut layers = Vec::with_capacity(cfg.n_layers);
    let mut min_margin = f64::INFINITY;
    for (l, lo) in off.layers.iter().enumerate() {
        let x_in = x;
        let (a, r1) = rms_norm(&x_in, d, &w[lo.norm1..lo.norm1 + d]);
        let mut q = mm(&a, t_len, d, &w[lo.wq..lo.wq + d * d], d);
        let mut kk = mm(&a, t_len, d, &w[lo.wk..lo.wk + d * d], d);
        let v = mm(&a, t_len, d, &w[lo.wv..lo.wv + d * d], d);
        for t in 0..t_len {
            for hh in 0..heads {
                let s = t * d + hh * hd;
                rope.apply(&mut q[s..s + hd], t, false);
                rope.apply(&mut kk[s..s + hd], t, false);
            }
        }
        let mut attn = vec![0.0; heads * t_len * t_len];
        let mut o = vec![0.0; t_len * d];
        for hh in 0..heads {
            for i in 0..t_len {
                let qi = &q[i * d + hh * hd..i * d + (hh + 1) * hd];
                let row = &mut attn[(hh * t_len + i) * t_len..(hh * t_len + i + 1) * t_len];
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &kk[j * d + hh * hd..j * d + (hh + 1) * hd];
                    let s: f64 = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                    row[j] = s;
                    max = max.max(s);
                }
                let mut sum = 0.0;
                for p in row[..=i].iter_mut() {
                    *p = (*p - max).exp();
                    sum += *p;
                }
                let oi = &mut o[i * d + hh * hd..i * d + (hh + 1) * hd];
                for j in 0..=i {
                    row[j] /= sum;
                    let vj = &v[j * d + hh * hd..j * d + (hh + 1) * hd];
                    for (oo, vv) in oi.iter_mut().zip(vj) {
                        *oo += row[j] * vv;
                    }
                }
            }
        }
        let proj = mm(&o, t_len, d, &w[lo.wo..lo.wo + d * d], d);
        let x_mid: Vec<f64> = x_in.iter().zip(&proj).map(|(a, b)| a + b).collect();

        let (b, r2) = rms_norm(&x_mid, d, &w[lo.norm2..lo.norm2 + d]);
        let z = mm(&b, t_len, d, &w[lo.router..lo.router + d * n], n);
        let learned = matches!(mode, RouterMode::LearnedTopk);
        let mut selected = Vec::with_capacity(t_len);
        let mut gates = Vec::with_capacity(t_len);
        for t in 0..t_len {
            let zt = &z[t * n..(t + 1) * n];
            let sel = match (forced, mode) {
                (Some(f), _) => f[l][t].clone(),
                (None, RouterMode::LearnedTopk) => top_k(zt, k),
                (None, RouterMode::StaticPositional { map }) => static_subset(map, t, n, k, cfg.context_length)?,
            };
            if sel.len() != k || sel.iter().any(|&e| e >= n) {
                return Err(Error::Config(format!("selection {sel:?} is not a {k}-subset of 0..{n}")));
            }
            if learned && k < n {
                min_margin = min_margin.min(top_k_margin(zt, k));
            }
            let g = if !learned {
                vec![1.0 / k as f64; k]
            } else {
                match cfg.gate_mode {
                    GateMode::TopKSoftmax => softmax(&sel.iter().map(|&e| zt[e]).collect::<Vec<_>>()),
                    GateMode::FullSoftmax => {
                        let p = softmax(zt);
                        sel.iter().map(|&e| p[e]).collect()
                    }
                }
            };
            selected.push(sel);
            gates.push(g);
        }

        let mut x_out = x_mid.clone();
        let mut experts = Vec::with_capacity(n);
        for (e, eo) in lo.experts.iter().enumerate() {
            let rows: Vec<(usize, usize)> = selected
                .iter()
                .enumerate()
                .filter_map(|(t, s)| s.iter().position(|&x| x == e).map(|slot| (t, slot)))
                .collect();
            let m = rows.len();
            let mut input = Vec::with_capacity(m * d);
            for &(t, _) in &rows {
                input.extend_from_slice(&b[t * d..(t + 1) * d]);
            }
            let mut pre = mm(&input, m, d, &w[eo.w1..eo.w1 + d * h], h);
            for row in pre.chunks_mut(h) {
                row.iter_mut().zip(&w[eo.b1..eo.b1 + h]).for_each(|(u, bb)| *u += bb);
            }
            let act: Vec<f64> = pre.iter().map(|&u| u * sigmoid(u)).collect();
            let mut out = mm(&act, m, h, &w[eo.w2..eo.w2 + h * d], d);
            for (row, &(t, slot)) in out.chunks_mut(d).zip(&rows) {
                row.iter_mut().zip(&w[eo.b2..eo.b2 + d]).for_each(|(y, bb)| *y += bb);
                let g = gates[t][slot];
                for (xo, y) in x_out[t * d..(t + 1) * d].iter_mut().zip(row.iter()) {
                    *xo += g * y;
                }
            }
            experts.push(ExpertCache {
                rows,
                input,
                pre,
                act,
                out,
            });
        }
        x = x_out;
        layers.push(LayerCache {
            x_in,
            a,
            r1,
            q,
            k: kk,
            v,
            attn,
            o,
            x_mid,
            b,
            r2,
            z,
            selected,
            gates,
            learned: learned && forced.is_none(),
            experts,
        });
    }
    let (f, rf) = rms_norm(&x, d, &w[off.norm_f..off.norm_f + d]);
    let logits = mm(&f, t_len, d, &w[off.head..off.head + d * cfg.vocab_size], cfg.vocab_size);
    Ok(SeqCache {
        tokens: tokens.to_vec(),
        layers,
        x_final: x,
        f,
        rf,
        logits,
        min_margin,
    })
}

fn to_output(params: &ToyMoEParams, cache: SeqCache, sequence_id: u64) -> ForwardOutput {
    let (v, n) = (params.config.vocab_size, params.config.n_experts);
    let logits = cache.logits.chunks(v).map(|r| r.to_vec()).collect();
    let mut traces = Vec::with_capacity(cache.layers.len());
    let mut router_logits = Vec::with_capacity(cache.layers.len());
    for (l, lc) in cache.layers.into_iter().enumerate() {
        let z: Vec<Vec<f64>> = lc.z.chunks(n).map(|r| r.to_vec()).collect();
        traces.push(ActivationTrace {
            sequence_id,
            layer: l,
            experts: lc.selected,
            logits: lc.learned.then(|| z.clone()),
        });
        router_logits.push(z);
    }
    ForwardOutput {
        logits,
        traces,
        router_logits,
    }
}

/// Runs the model on one sequence. Traces carry router logits only when the
/// selection came from the learned router.
pub fn forward(params: &ToyMoEParams, tokens: &[usize], sequence_id: u64, mode: RouterMode) -> Result<ForwardOutput> {
    let rope = rope_for(params)?;
    let cache = run_forward(params, &rope, tokens, mode, None)?;
    Ok(to_output(params, cache, sequence_id))
}

/// [`forward`] over several sequences; sequence ids are `first_id + i`.
pub fn forward_batch(
    params: &ToyMoEParams,
    batch: &[Vec<usize>],
    first_id: u64,
    mode: RouterMode,
) -> Result<Vec<ForwardOutput>> {
    let rope = rope_for(params)?;
    batch
        .iter()
        .enumerate()
        .map(|(i, tokens)| {
            let cache = run_forward(params, &rope, tokens, mode, None)?;
            Ok(to_output(params, cache, first_id + i as u64))
        })
        .collect()
}

fn rope_for(params: &ToyMoEParams) -> Result<RopeTable> {
    let cfg = &params.config;
    RopeTable::new(cfg.context_length, cfg.head_dim(), cfg.rope_base)
}

/// Load-balance loss `N · Σ_i f_i P_i` with `f_i` the share of routed slots
/// taken by expert `i` and `P_i` the mean router probability.
pub fn switch_aux_loss(router_probs: &[Vec<f64>], selections: &[Vec<usize>]) -> f64 {
    let Some(n) = router_probs.first().map(Vec::len) else {
        return 0.0;
    };
    let (f, p) = switch_stats(router_probs.iter().map(Vec::as_slice), selections, n);
    n as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>()
}

fn switch_stats<'a>(
    probs: impl Iterator<Item = &'a [f64]>,
    selections: &[Vec<usize>],
    n: usize,
) -> (Vec<f64>, Vec<f64>) {
    let mut p = vec![0.0; n];
    let mut tokens = 0usize;
    for row in probs {
        p.iter_mut().zip(row).for_each(|(a, b)| *a += b);
        tokens += 1;
    }
    p.iter_mut().for_each(|v| *v /= tokens.max(1) as f64);
    let mut f = vec![0.0; n];
    let mut slots = 0usize;
    for s in selections {
        for &e in s {
            f[e] += 1.0;
            slots += 1;
        }
    }
    f.iter_mut().for_each(|v| *v /= slots.max(1) as f64);
    (f, p)
}

/// Total loss over `batch` and its gradient with respect to every parameter.
///
/// Cross-entropy is the mean over all labelled positions. With `forced`, the
/// given expert selections replace routing, so the loss is smooth in the
/// parameters.
pub fn loss_and_grad(
    params: &ToyMoEParams,
    batch: &[Example],
    loss: &LossConfig,
    forced: Option<&[Selections]>,
) -> Result<(LossEval, Vec<f64>, Vec<Selections>)> {
    let (eval, grad, caches) = loss_impl(params, batch, loss, forced, true)?;
    let selections = caches
        .into_iter()
        .map(|c| c.layers.into_iter().map(|l| l.selected).collect())
        .collect();
    Ok((eval, grad.expect("gradient requested"), selections))
}

/// Loss only, used by finite differences.
pub(crate) fn loss_value(
    params: &ToyMoEParams,
    batch: &[Example],
    loss: &LossConfig,
    forced: Option<&[Selections]>,
) -> Result<LossEval> {
    Ok(loss_impl(params, batch, loss, forced, false)?.0)
}

fn loss_impl(
    params: &ToyMoEParams,
    batch: &[Example],
    loss: &LossConfig,
    forced: Option<&[Selections]>,
    want_grad: bool,
) -> Result<(LossEval, Option<Vec<f64>>, Vec<SeqCache>)> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    if !(loss.aux_weight >= 0.0 && loss.aux_weight.is_finite()) {
        return Err(Error::Config(format!("aux weight must be >= 0, got {}", loss.aux_weight)));
    }
    if let Some(f) = forced {
        if f.len() != batch.len() {
            return Err(Error::Config("forced selections do not match the batch".into()));
        }
    }
    let cfg = &params.config;
    let (v, n, k, n_layers) = (cfg.vocab_size, cfg.n_experts, cfg.k_active, cfg.n_layers);
    let rope = rope_for(params)?;
    let mut caches = Vec::with_capacity(batch.len());
    for (i, ex) in batch.iter().enumerate() {
        if ex.targets.len() != ex.tokens.len() {
            return Err(Error::Config("targets and tokens differ in length".into()));
        }
        if let Some(&Some(t)) = ex.targets.iter().find(|t| matches!(t, Some(t) if *t >= v)) {
            return Err(Error::Config(format!("target {t} >= vocab size {v}")));
        }
        caches.push(run_forward(params, &rope, &ex.tokens, loss.router_mode, forced.map(|f| &f[i]))?);
    }

    let n_targets: usize = batch.iter().map(|ex| ex.targets.iter().flatten().count()).sum();
    let mut ce = 0.0;
    let mut dlogits: Vec<Vec<f64>> = Vec::with_capacity(batch.len());
    for (ex, c) in batch.iter().zip(&caches) {
        let mut dl = vec![0.0; c.logits.len()];
        for (t, target) in ex.targets.iter().enumerate() {
            let Some(y) = *target else { continue };
            let row = &c.logits[t * v..(t + 1) * v];
            let p = softmax(row);
            ce -= p[y].ln();
            if want_grad {
                let drow = &mut dl[t * v..(t + 1) * v];
                for (j, pj) in p.iter().enumerate() {
                    drow[j] = (pj - f64::from(j == y)) / n_targets as f64;
                }
            }
        }
        dlogits.push(dl);
    }
    if n_targets > 0 {
        ce /= n_targets as f64;
    }

    // Aux gradients with respect to router logits, per sequence and layer.
    let mut dz: Vec<Vec<Vec<f64>>> = caches
        .iter()
        .map(|c| c.layers.iter().map(|l| vec![0.0; l.z.len()]).collect())
        .collect();
    let mut aux = 0.0;
    let lambda = loss.aux_weight;
    match loss.aux_mode {
        AuxMode::None => {}
        AuxMode::SwitchAux => {
            for l in 0..n_layers {
                let probs: Vec<Vec<f64>> = caches
                    .iter()
                    .flat_map(|c| c.layers[l].z.chunks(n).map(softmax).collect::<Vec<_>>())
                    .collect();
                let sels: Vec<Vec<usize>> = caches.iter().flat_map(|c| c.layers[l].selected.clone()).collect();
                let (f, p) = switch_stats(probs.iter().map(Vec::as_slice), &sels, n);
                aux += n as f64 * f.iter().zip(&p).map(|(a, b)| a * b).sum::<f64>() / n_layers as f64;
                let coef = lambda * n as f64 / (probs.len() as f64 * n_layers as f64);
                let mut row_iter = probs.iter();
                for dzs in dz.iter_mut() {
                    for dzt in dzs[l].chunks_mut(n) {
                        let pt = row_iter.next().expect("row count");
                        let fp: f64 = f.iter().zip(pt).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dzt[j] += coef * pt[j] * (f[j] - fp);
                        }
                    }
                }
            }
        }
        AuxMode::Mem => {
            loss.mem.validate()?;
            let norm = (batch.len() * n_layers) as f64;
            for (c, dzs) in caches.iter().zip(dz.iter_mut()) {
                for (lc, dzl) in c.layers.iter().zip(dzs.iter_mut()) {
                    for (zt, dzt) in lc.z.chunks(n).zip(dzl.chunks_mut(n)) {
                        let (kl, g) = token_kl_grad(zt, k, loss.mem.beta)?;
                        aux += loss.mem.temperature * kl / norm;
                        let coef = lambda * loss.mem.temperature / norm;
                        dzt.iter_mut().zip(&g).for_each(|(a, b)| *a += coef * b);
                    }
                }
            }
        }
    }
    let total = ce + lambda * aux;
    let min_margin = caches.iter().map(|c| c.min_margin).fold(f64::INFINITY, f64::min);
    let eval = LossEval {
        total,
        cross_entropy: ce,
        aux,
        min_margin,
    };
    if !want_grad {
        return Ok((eval, None, caches));
    }
    let mut grad = vec![0.0; params.data.len()];
    for ((c, dl), dzs) in caches.iter().zip(&dlogits).zip(&dz) {
        backward(params, &rope, c, dl, dzs, loss.router_mode, &mut grad);
    }
    Ok((eval, Some(grad), caches))
}

fn backward(
    params: &ToyMoEParams,
    rope: &RopeTable,
    c: &SeqCache,
    dlogits: &[f64],
    dz_aux: &[Vec<f64>],
    mode: RouterMode,
    grad: &mut [f64],
) {
    let cfg = &params.config;
    let (t_len, d, n, h, v) = (c.tokens.len(), cfg.model_dim, cfg.n_experts, cfg.expert_hidden, cfg.vocab_size);
    let w = &params.data;
    let off = &params.layout.offsets;

    mm_at_acc(&c.f, t_len, d, dlogits, v, &mut grad[off.head..off.head + d * v]);
    let df = mm_bt(dlogits, t_len, v, &w[off.head..off.head + d * v], d);
    let (gain, dgain) = split_gain(w, grad, off.norm_f, d);
    let mut dx = rms_norm_back(&c.x_final, &c.rf, d, gain, &df, dgain);

    for (l, lc) in c.layers.iter().enumerate().rev() {
        let lo = &off.layers[l];
        dx = backward_layer(cfg, rope, lo, lc, w, grad, dx, &dz_aux[l], mode, t_len, d, n, h);
    }
    for (t, &tok) in c.tokens.iter().enumerate() {
        let row = &mut grad[off.tok_emb + tok * d..off.tok_emb + (tok + 1) * d];
        row.iter_mut().zip(&dx[t * d..(t + 1) * d]).for_each(|(g, x)| *g += x);
    }
}

fn split_gain<'a>(w: &'a [f64], grad: &'a mut [f64], at: usize, d: usize) -> (&'a [f64], &'a mut [f64]) {
    (&w[at..at + d], &mut grad[at..at + d])
}

#[allow(clippy::too_many_arguments)]
fn backward_layer(
    cfg: &super::ToyConfig,
    rope: &RopeTable,
    lo: &LayerOffsets,
    lc: &LayerCache,
    w: &[f64],
    grad: &mut [f64],
    dx_out: Vec<f64>,
    dz_aux: &[f64],
    mode: RouterMode,
    t_len: usize,
    d: usize,
    n: usize,
    h: usize,
) -> Vec<f64> {
    let k = cfg.k_active;
    let (heads, hd) = (cfg.n_heads, cfg.head_dim());
    let scale = 1.0 / (hd as f64).sqrt();

    // Mixture of experts.
    let mut db = vec![0.0; t_len * d];
    let mut dgates = vec![vec![0.0; k]; t_len];
    for (eo, ec) in lo.experts.iter().zip(&lc.experts) {
        let m = ec.rows.len();
        if m == 0 {
            continue;
        }
        let mut dy = vec![0.0; m * d];
        for (r, &(t, slot)) in ec.rows.iter().enumerate() {
            let g = lc.gates[t][slot];
            let dxt = &dx_out[t * d..(t + 1) * d];
            let yr = &ec.out[r * d..(r + 1) * d];
            dgates[t][slot] = dxt.iter().zip(yr).map(|(a, b)| a * b).sum();
            dy[r * d..(r + 1) * d].iter_mut().zip(dxt).for_each(|(a, b)| *a = g * b);
        }
        mm_at_acc(&ec.act, m, h, &dy, d, &mut grad[eo.w2..eo.w2 + h * d]);
        for row in dy.chunks(d) {
            grad[eo.b2..eo.b2 + d].iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        let mut du = mm_bt(&dy, m, d, &w[eo.w2..eo.w2 + h * d], h);
        for (g, &u) in du.iter_mut().zip(&ec.pre) {
            let s = sigmoid(u);
            *g *= s * (1.0 + u * (1.0 - s));
        }
        mm_at_acc(&ec.input, m, d, &du, h, &mut grad[eo.w1..eo.w1 + d * h]);
        for row in du.chunks(h) {
            grad[eo.b1..eo.b1 + h].iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
        let dinput = mm_bt(&du, m, h, &w[eo.w1..eo.w1 + d * h], d);
        for (row, &(t, _)) in dinput.chunks(d).zip(&ec.rows) {
            db[t * d..(t + 1) * d].iter_mut().zip(row).for_each(|(a, b)| *a += b);
        }
    }

    let mut dz = dz_aux.to_vec();
    if matches!(mode, RouterMode::LearnedTopk) {
        for t in 0..t_len {
            let zt = &lc.z[t * n..(t + 1) * n];
            let dzt = &mut dz[t * n..(t + 1) * n];
            let (sel, g, dg) = (&lc.selected[t], &lc.gates[t], &dgates[t]);
            match cfg.gate_mode {
                GateMode::TopKSoftmax => {
                    let s: f64 = g.iter().zip(dg).map(|(a, b)| a * b).sum();
                    for (i, &e) in sel.iter().enumerate() {
                        dzt[e] += g[i] * (dg[i] - s);
                    }
                }
                GateMode::FullSoftmax => {
                    let p = softmax(zt);
                    let s: f64 = g.iter().zip(dg).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dzt[j] -= p[j] * s;
                    }
                    for (i, &e) in sel.iter().enumerate() {
                        dzt[e] += p[e] * dg[i];
                    }
                }
            }
        }
    }
    mm_at_acc(&lc.b, t_len, d, &dz, n, &mut grad[lo.router..lo.router + d * n]);
    let dbr = mm_bt(&dz, t_len, n, &w[lo.router..lo.router + d * n], d);
    db.iter_mut().zip(&dbr).for_each(|(a, b)| *a += b);
    let (gain, dgain) = split_gain(w, grad, lo.norm2, d);
    let dmid_norm = rms_norm_back(&lc.x_mid, &lc.r2, d, gain, &db, dgain);
    let dx_mid: Vec<f64> = dx_out.iter().zip(&dmid_norm).map(|(a, b)| a + b).collect();

    // Attention.
    mm_at_acc(&lc.o, t_len, d, &dx_mid, d, &mut grad[lo.wo..lo.wo + d * d]);
    let d_o = mm_bt(&dx_mid, t_len, d, &w[lo.wo..lo.wo + d * d], d);
    let mut dq = vec![0.0; t_len * d];
    let mut dk = vec![0.0; t_len * d];
    let mut dv = vec![0.0; t_len * d];
    let mut ds = vec![0.0; t_len];
    for hh in 0..heads {
        let hs = hh * hd;
        for i in 0..t_len {
            let p = &lc.attn[(hh * t_len + i) * t_len..(hh * t_len + i + 1) * t_len];
            let doi = &d_o[i * d + hs..i * d + hs + hd];
            let mut acc = 0.0;
            for j in 0..=i {
                let vj = &lc.v[j * d + hs..j * d + hs + hd];
                let dp: f64 = doi.iter().zip(vj).map(|(a, b)| a * b).sum();
                ds[j] = dp;
                acc += p[j] * dp;
                for (dvv, o) in dv[j * d + hs..j * d + hs + hd].iter_mut().zip(doi) {
                    *dvv += p[j] * o;
                }
            }
            for j in 0..=i {
                let g = p[j] * (ds[j] - acc) * scale;
                if g == 0.0 {
                    continue;
                }
                for x in 0..hd {
                    dq[i * d + hs + x] += g * lc.k[j * d + hs + x];
                    dk[j * d + hs + x] += g * lc.q[i * d + hs + x];
                }
            }
        }
    }
    for t in 0..t_len {
        for hh in 0..heads {
            let s = t * d + hh * hd;
            rope.apply(&mut dq[s..s + hd], t, true);
            rope.apply(&mut dk[s..s + hd], t, true);
        }
    }
    mm_at_acc(&lc.a, t_len, d, &dq, d, &mut grad[lo.wq..lo.wq + d * d]);
    mm_at_acc(&lc.a, t_len, d, &dk, d, &mut grad[lo.wk..lo.wk + d * d]);
    mm_at_acc(&lc.a, t_len, d, &dv, d, &mut grad[lo.wv..lo.wv + d * d]);
    let mut da = mm_bt(&dq, t_len, d, &w[lo.wq..lo.wq + d * d], d);
    for (src, wo) in [(&dk, lo.wk), (&dv, lo.wv)] {
        let part = mm_bt(src, t_len, d, &w[wo..wo + d * d], d);
        da.iter_mut().zip(&part).for_each(|(a, b)| *a += b);
    }
    let (gain, dgain) = split_gain(w, grad, lo.norm1, d);
    let din = rms_norm_back(&lc.x_in, &lc.r1, d, gain, &da, dgain);
    dx_mid.iter().zip(&din).map(|(a, b)| a + b).collect()
}

//! Spatial statistics of expert activations: rates, block variables, domains,
//! correlation lengths and the exponential scaling fit.
//!
//! Correlation lengths come in block units. One block is `n_block`
//! consecutive tokens whose expert sets are merged by union, and a domain is a
//! maximal run of blocks in which one expert stays active. Multiply by
//! `n_block` to express a length in tokens (see [`XiUnit`]).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{ActivationTrace, RoutingConfig};

/// Default block-size grid for scaling fits.
pub const DEFAULT_BLOCK_GRID: [usize; 7] = [1, 2, 4, 8, 16, 32, 64];

/// `c[layer][expert][position]`: number of sequences in which `expert` was
/// selected at `position` in `layer`.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationCounts {
    pub n_layers: usize,
    pub n_experts: usize,
    pub context_length: usize,
    pub k_active: usize,
    data: Vec<u64>,
}

impl ActivationCounts {
    pub fn zeros(cfg: &RoutingConfig) -> Self {
        Self {
            n_layers: cfg.n_layers,
            n_experts: cfg.n_experts,
            context_length: cfg.context_length,
            k_active: cfg.k_active,
            data: vec![0; cfg.n_layers * cfg.n_experts * cfg.context_length],
        }
    }

    fn idx(&self, layer: usize, expert: usize, pos: usize) -> usize {
        (layer * self.n_experts + expert) * self.context_length + pos
    }

    pub fn get(&self, layer: usize, expert: usize, pos: usize) -> u64 {
        self.data[self.idx(layer, expert, pos)]
    }

    pub fn row(&self, layer: usize, expert: usize) -> &[u64] {
        let start = self.idx(layer, expert, 0);
        &self.data[start..start + self.context_length]
    }

    /// Adds one trace record. The record must match the routing config.
    pub fn add(&mut self, trace: &ActivationTrace) -> Result<()> {
        if trace.layer >= self.n_layers || trace.experts.len() != self.context_length {
            return Err(Error::Config(format!(
                "trace (seq {}, layer {}, {} tokens) does not match config ({} layers, length {})",
                trace.sequence_id,
                trace.layer,
                trace.experts.len(),
                self.n_layers,
                self.context_length
            )));
        }
        for (pos, set) in trace.experts.iter().enumerate() {
            if set.len() != self.k_active {
                return Err(Error::Config(format!(
                    "trace seq {} has {} experts at token {pos}, config says k={}",
                    trace.sequence_id,
                    set.len(),
                    self.k_active
                )));
            }
            for &e in set {
                if e >= self.n_experts {
                    return Err(Error::Config(format!("expert {e} out of range")));
                }
                let i = self.idx(trace.layer, e, pos);
                self.data[i] += 1;
            }
        }
        Ok(())
    }
}

pub fn activation_counts<'a>(
    config: &RoutingConfig,
    traces: impl IntoIterator<Item = &'a ActivationTrace>,
) -> Result<ActivationCounts> {
    config.validate()?;
    let mut counts = ActivationCounts::zeros(config);
    for t in traces {
        counts.add(t)?;
    }
    Ok(counts)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// `r_ijk = c_ijk / Σ_k c_ijk`: each (layer, expert) row sums to one.
    #[default]
    OverPositions,
    /// Per (layer, position), rates sum to `k_active` across experts.
    OverExperts,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RateTensor {
    pub normalization: Normalization,
    pub n_layers: usize,
    pub n_experts: usize,
    pub context_length: usize,
    rates: Vec<f64>,
    /// Slices whose counts were all zero; their rates are zero.
    /// `(layer, expert)` pairs for `OverPositions`, `(layer, position)` for
    /// `OverExperts`.
    pub zero_slices: Vec<(usize, usize)>,
}

impl RateTensor {
    pub fn get(&self, layer: usize, expert: usize, pos: usize) -> f64 {
        self.rates[(layer * self.n_experts + expert) * self.context_length + pos]
    }

    /// Rates read back from a table; `zero_slices` is left empty.
    pub fn from_rates(
        normalization: Normalization,
        n_layers: usize,
        n_experts: usize,
        context_length: usize,
        rates: Vec<f64>,
    ) -> Result<Self> {
        if rates.len() != n_layers * n_experts * context_length {
            return Err(Error::Schema(format!(
                "{} rates for a {n_layers}x{n_experts}x{context_length} tensor",
                rates.len()
            )));
        }
        Ok(Self {
            normalization,
            n_layers,
            n_experts,
            context_length,
            rates,
            zero_slices: Vec::new(),
        })
    }

    pub fn row(&self, layer: usize, expert: usize) -> &[f64] {
        let start = (layer * self.n_experts + expert) * self.context_length;
        &self.rates[start..start + self.context_length]
    }

    /// Mean rate of each expert in `layer` over positions.
    pub fn expert_means(&self, layer: usize) -> Vec<f64> {
        (0..self.n_experts)
            .map(|e| {
                let row = self.row(layer, e);
                row.iter().sum::<f64>() / row.len() as f64
            })
            .collect()
    }
}

pub fn activation_rates(counts: &ActivationCounts, normalization: Normalization) -> RateTensor {
    let (nl, ne, len) = (counts.n_layers, counts.n_experts, counts.context_length);
    let mut rates = vec![0.0; counts.data.len()];
    let mut zero_slices = Vec::new();
    match normalization {
        Normalization::OverPositions => {
            for l in 0..nl {
                for e in 0..ne {
                    let row = counts.row(l, e);
                    let total: u64 = row.iter().sum();
                    if total == 0 {
                        zero_slices.push((l, e));
                        continue;
                    }
                    let start = (l * ne + e) * len;
                    for (r, &c) in rates[start..start + len].iter_mut().zip(row) {
                        *r = c as f64 / total as f64;
                    }
                }
            }
        }
        Normalization::OverExperts => {
            let k = counts.k_active as f64;
            for l in 0..nl {
                for p in 0..len {
                    let total: u64 = (0..ne).map(|e| counts.get(l, e, p)).sum();
                    if total == 0 {
                        zero_slices.push((l, p));
                        continue;
                    }
                    for e in 0..ne {
                        rates[(l * ne + e) * len + p] = k * counts.get(l, e, p) as f64 / total as f64;
                    }
                }
            }
        }
    }
    RateTensor {
        normalization,
        n_layers: nl,
        n_experts: ne,
        context_length: len,
        rates,
        zero_slices,
    }
}

/// Below this width the smoothing kernel is numerically a delta.
pub const MIN_SMOOTHING_SIGMA: f64 = 0.05;

/// Gaussian filter with a normalized kernel truncated at `4σ` (radius
/// `⌊4σ + ½⌋`) and half-sample symmetric reflection at both ends
/// (`d c b a | a b c d | d c b a`).
pub fn gaussian_smooth(series: &[f64], sigma: f64) -> Result<Vec<f64>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(Error::Param(format!("sigma must be positive and finite, got {sigma}")));
    }
    if series.is_empty() {
        return Err(Error::Param("series must not be empty".into()));
    }
    if sigma < MIN_SMOOTHING_SIGMA {
        return Ok(series.to_vec());
    }
    let kernel = gaussian_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let n = series.len() as isize;
    let reflect = |i: isize| -> usize {
        let period = 2 * n;
        let m = i.rem_euclid(period);
        (if m < n { m } else { period - 1 - m }) as usize
    };
    Ok((0..n)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(j, w)| w * series[reflect(i + j as isize - radius)])
                .sum()
        })
        .collect())
}

/// Normalized Gaussian weights on `-r..=r`, `r = ⌊4σ + ½⌋`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (4.0 * sigma + 0.5).floor() as isize;
    let mut w: Vec<f64> = (-radius..=radius)
        .map(|x| (-0.5 * (x as f64 / sigma).powi(2)).exp())
        .collect();
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Per-expert block indicators of one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockSequence {
    pub n_block: usize,
    pub n_experts: usize,
    pub n_blocks: usize,
    /// `indicators[expert][block]`
    pub indicators: Vec<Vec<bool>>,
    /// Set when `n_block` exceeded the sequence length and no block fit.
    pub oversized: bool,
}

impl BlockSequence {
    /// Expert set of block `b`.
    pub fn block_set(&self, b: usize) -> Vec<usize> {
        (0..self.n_experts).filter(|&e| self.indicators[e][b]).collect()
    }
}

/// Union of expert sets over consecutive blocks of `n_block` tokens. The
/// trailing partial block is dropped.
pub fn coarse_grain(trace: &ActivationTrace, n_experts: usize, n_block: usize) -> Result<BlockSequence> {
    if n_block == 0 {
        return Err(Error::Param("n_block must be at least 1".into()));
    }
    let n_blocks = trace.len() / n_block;
    let mut indicators = vec![vec![false; n_blocks]; n_experts];
    for (b, chunk) in trace.experts.chunks_exact(n_block).enumerate() {
        for set in chunk {
            for &e in set {
                let row = indicators
                    .get_mut(e)
                    .ok_or_else(|| Error::Config(format!("expert {e} out of range for n={n_experts}")))?;
                row[b] = true;
            }
        }
    }
    Ok(BlockSequence {
        n_block,
        n_experts,
        n_blocks,
        indicators,
        oversized: n_block > trace.len(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Domain {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DomainDecomposition {
    pub n_blocks: usize,
    pub per_expert: Vec<Vec<Domain>>,
}

impl DomainDecomposition {
    pub fn lengths(&self) -> impl Iterator<Item = usize> + '_ {
        self.per_expert.iter().flatten().map(|d| d.len)
    }

    pub fn count(&self) -> usize {
        self.per_expert.iter().map(Vec::len).sum()
    }
}

/// Maximal runs of `true` in one indicator row.
pub fn runs(row: &[bool]) -> Vec<Domain> {
    let mut out = Vec::new();
    let mut start = None;
    for (i, &on) in row.iter().enumerate() {
        match (on, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push(Domain { start: s, len: i - s });
                start = None;
            }
            _ => {}
        }
    }
    if let Some(s) = start {
        out.push(Domain {
            start: s,
            len: row.len() - s,
        });
    }
    out
}

pub fn domains(blocks: &BlockSequence) -> DomainDecomposition {
    DomainDecomposition {
        n_blocks: blocks.n_blocks,
        per_expert: blocks.indicators.iter().map(|row| runs(row)).collect(),
    }
}

/// Mean domain length over all experts, in blocks.
pub fn xi_ds(blocks: &BlockSequence) -> Result<f64> {
    xi_ds_of(&domains(blocks))
}

/// Number of blocks per domain, counting domains over all experts.
pub fn xi_dw(blocks: &BlockSequence) -> Result<f64> {
    xi_dw_of(&domains(blocks))
}

pub fn xi_ds_of(d: &DomainDecomposition) -> Result<f64> {
    let count = d.count();
    if count == 0 {
        return Err(Error::Undefined("no active indicators, domain size undefined".into()));
    }
    Ok(d.lengths().sum::<usize>() as f64 / count as f64)
}

pub fn xi_dw_of(d: &DomainDecomposition) -> Result<f64> {
    let count = d.count();
    if count == 0 {
        return Err(Error::Undefined("no active indicators, domain count is zero".into()));
    }
    Ok(d.n_blocks as f64 / count as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum XiUnit {
    #[default]
    Blocks,
    /// Block lengths multiplied by `n_block`.
    Tokens,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum XiAggregation {
    /// ξ per sequence, then mean and std over sequences.
    #[default]
    PerSequence,
    /// All domains of a layer pooled before averaging; std is over domains.
    Pooled,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct XiOptions {
    pub unit: XiUnit,
    pub aggregation: XiAggregation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct XiRow {
    pub layer: usize,
    pub n_block: usize,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

impl XiRow {
    pub fn std_err(&self) -> f64 {
        self.std / (self.count as f64).sqrt()
    }
}

/// Mean and sample standard deviation (`n - 1` denominator, zero for n = 1).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// ξ_ds per layer and block size. Rows come out layer-major in the order of
/// `block_sizes`.
pub fn xi_profile<'a>(
    config: &RoutingConfig,
    traces: impl IntoIterator<Item = &'a ActivationTrace>,
    block_sizes: &[usize],
    opts: XiOptions,
) -> Result<Vec<XiRow>> {
    config.validate()?;
    if block_sizes.is_empty() {
        return Err(Error::Param("at least one block size required".into()));
    }
    // per_layer[layer][size] collects per-sequence values or pooled lengths.
    let mut samples: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); block_sizes.len()]; config.n_layers];
    for trace in traces {
        if trace.layer >= config.n_layers {
            return Err(Error::Config(format!("layer {} out of range", trace.layer)));
        }
        for (si, &nb) in block_sizes.iter().enumerate() {
            let blocks = coarse_grain(trace, config.n_experts, nb)?;
            let scale = match opts.unit {
                XiUnit::Blocks => 1.0,
                XiUnit::Tokens => nb as f64,
            };
            let d = domains(&blocks);
            match opts.aggregation {
                XiAggregation::PerSequence => {
                    samples[trace.layer][si].push(scale * xi_ds_of(&d)?);
                }
                XiAggregation::Pooled => {
                    if d.count() == 0 {
                        return Err(Error::Undefined(format!(
                            "seq {} layer {} has no domains at n_block={nb}",
                            trace.sequence_id, trace.layer
                        )));
                    }
                    samples[trace.layer][si].extend(d.lengths().map(|l| scale * l as f64));
                }
            }
        }
    }
    let mut rows = Vec::new();
    for (layer, per_size) in samples.iter().enumerate() {
        for (si, vals) in per_size.iter().enumerate() {
            if vals.is_empty() {
                return Err(Error::Undefined(format!("layer {layer} has no sequences")));
            }
            let (mean, std) = mean_std(vals);
            rows.push(XiRow {
                layer,
                n_block: block_sizes[si],
                mean,
                std,
                count: vals.len(),
            });
        }
    }
    Ok(rows)
}

/// `(n_block, mean ξ)` averaged over layers, one point per block size, in
/// first-seen order.
pub fn model_average(rows: &[XiRow]) -> Vec<(f64, f64)> {
    let mut sizes: Vec<usize> = Vec::new();
    for r in rows {
        if !sizes.contains(&r.n_block) {
            sizes.push(r.n_block);
        }
    }
    sizes
        .iter()
        .map(|&nb| {
            let vals: Vec<f64> = rows.iter().filter(|r| r.n_block == nb).map(|r| r.mean).collect();
            (nb as f64, vals.iter().sum::<f64>() / vals.len() as f64)
        })
        .collect()
}

/// Fit of `ξ = ξ0 · exp(α n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalingFit {
    pub alpha: f64,
    pub xi0: f64,
    /// Coefficient of determination of the log-space fit.
    pub r_squared: f64,
    pub grid: Vec<f64>,
}

impl ScalingFit {
    pub fn predict(&self, n: f64) -> f64 {
        self.xi0 * (self.alpha * n).exp()
    }
}

/// Ordinary least squares on `ln ξ = ln ξ0 + α n`.
pub fn fit_scaling(points: &[(f64, f64)]) -> Result<ScalingFit> {
    if points.len() < 2 {
        return Err(Error::Param("scaling fit needs at least two points".into()));
    }
    if let Some(&(n, xi)) = points.iter().find(|(_, xi)| !(*xi > 0.0) || !xi.is_finite()) {
        return Err(Error::Domain(format!("correlation length must be positive, got ξ={xi} at n={n}")));
    }
    let m = points.len() as f64;
    let xs: Vec<f64> = points.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = points.iter().map(|p| p.1.ln()).collect();
    let mx = xs.iter().sum::<f64>() / m;
    let my = ys.iter().sum::<f64>() / m;
    let sxx: f64 = xs.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::Param("scaling fit needs at least two distinct n".into()));
    }
    let sxy: f64 = xs.iter().zip(&ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let alpha = sxy / sxx;
    let intercept = my - alpha * mx;
    let ss_tot: f64 = ys.iter().map(|y| (y - my).powi(2)).sum();
    let ss_res: f64 = xs
        .iter()
        .zip(&ys)
        .map(|(x, y)| (y - intercept - alpha * x).powi(2))
        .sum();
    let r_squared = if ss_tot == 0.0 {
        1.0
    } else {
        (1.0 - ss_res / ss_tot).clamp(0.0, 1.0)
    };
    Ok(ScalingFit {
        alpha,
        xi0: intercept.exp(),
        r_squared,
        grid: xs,
    })
}

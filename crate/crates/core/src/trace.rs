//! Routing traces: the data model, the NDJSON file format, validation and the
//! uniform-random routing baseline.
//!
//! A trace file holds one header line followed by one record per
//! `(sequence, layer)` pair. Each record lists, for every token position, the
//! ascending set of experts the router selected, optionally with the raw
//! router logits.

use std::collections::BTreeSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoutingConfig {
    pub n_experts: usize,
    pub k_active: usize,
    pub n_layers: usize,
    pub context_length: usize,
}

impl RoutingConfig {
    pub fn new(n_experts: usize, k_active: usize, n_layers: usize, context_length: usize) -> Result<Self> {
        let cfg = Self {
            n_experts,
            k_active,
            n_layers,
            context_length,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_active == 0 || self.k_active > self.n_experts {
            return Err(Error::Config(format!(
                "k_active must satisfy 1 <= k <= n_experts (k={}, n={})",
                self.k_active, self.n_experts
            )));
        }
        if self.n_layers == 0 {
            return Err(Error::Config("n_layers must be at least 1".into()));
        }
        if self.context_length == 0 {
            return Err(Error::Config("context_length must be at least 1".into()));
        }
        Ok(())
    }
}

/// Routing decisions of one layer over one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTrace {
    pub sequence_id: u64,
    pub layer: usize,
    /// Per token, the selected experts in ascending order.
    pub experts: Vec<Vec<usize>>,
    /// Per token router logits, when the producer recorded them.
    pub logits: Option<Vec<Vec<f64>>>,
}

impl ActivationTrace {
    pub fn len(&self) -> usize {
        self.experts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.experts.is_empty()
    }

    /// Top-1 view: the single selected expert per token. `None` when any token
    /// carries more than one expert.
    pub fn top1(&self) -> Option<Vec<usize>> {
        self.experts
            .iter()
            .map(|set| if set.len() == 1 { Some(set[0]) } else { None })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceHeader {
    pub model_name: String,
    pub routing: RoutingConfig,
    pub num_sequences: usize,
}

/// Indices of the `k` largest logits, ascending. Ties go to the lower index.
pub fn top_k(logits: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    order.truncate(k);
    order.sort_unstable();
    order
}

/// Smallest gap between the k-th and (k+1)-th largest logit; infinite when
/// `k` equals the number of logits.
pub fn top_k_margin(logits: &[f64], k: usize) -> f64 {
    if k == 0 || k >= logits.len() {
        return f64::INFINITY;
    }
    let mut sorted = logits.to_vec();
    sorted.sort_by(|a, b| b.total_cmp(a));
    sorted[k - 1] - sorted[k]
}

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const LAYER_SALT: u64 = 0xD6E8_FEB8_6659_FD93;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Sub-seed for `(sequence, layer)`:
/// `mix64(mix64(mix64(seed) ^ (seq+1)·GOLDEN) ^ (layer+1)·LAYER_SALT)`.
///
/// Every stream depends only on its own coordinates, so sequences can be
/// generated in any order.
pub fn split_seed(seed: u64, sequence: u64, layer: u64) -> u64 {
    let h = mix64(seed);
    let h = mix64(h ^ sequence.wrapping_add(1).wrapping_mul(GOLDEN));
    mix64(h ^ layer.wrapping_add(1).wrapping_mul(LAYER_SALT))
}

/// Uniformly random `k`-subset of `0..n`, sorted ascending.
pub fn random_subset<R: rand::Rng + ?Sized>(rng: &mut R, n: usize, k: usize) -> Vec<usize> {
    let mut set = rand::seq::index::sample(rng, n, k).into_vec();
    set.sort_unstable();
    set
}

/// Uniform-random routing, the baseline every learned router is compared to.
///
/// Records come out sequence-major then layer-minor. Each `(sequence, layer)`
/// stream is seeded through [`split_seed`].
pub fn gen_random_trace(
    config: RoutingConfig,
    num_sequences: usize,
    seed: u64,
) -> Result<impl Iterator<Item = ActivationTrace>> {
    config.validate()?;
    if num_sequences == 0 {
        return Err(Error::Config("num_sequences must be at least 1".into()));
    }
    let layers = config.n_layers;
    Ok((0..num_sequences as u64).flat_map(move |seq| {
        (0..layers).map(move |layer| {
            let mut rng = ChaCha8Rng::seed_from_u64(split_seed(seed, seq, layer as u64));
            let experts = (0..config.context_length)
                .map(|_| random_subset(&mut rng, config.n_experts, config.k_active))
                .collect();
            ActivationTrace {
                sequence_id: seq,
                layer,
                experts,
                logits: None,
            }
        })
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub enum ViolationKind {
    LayerOutOfRange { layer: usize },
    SequenceOutOfRange { seq: u64 },
    LengthMismatch { found: usize, expected: usize },
    WrongCount { found: usize, expected: usize },
    ExpertOutOfRange { expert: usize },
    Duplicate { expert: usize },
    NotSorted,
    LogitsLength { found: usize, expected: usize },
    NonFiniteLogit,
    TopKMismatch { selected: Vec<usize>, top_k: Vec<usize> },
    SequenceCount { found: usize, expected: usize },
    InvalidConfig(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub sequence_id: Option<u64>,
    pub layer: Option<usize>,
    pub token: Option<usize>,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if let Some(s) = self.sequence_id {
            write!(f, "seq {s} ")?;
        }
        if let Some(l) = self.layer {
            write!(f, "layer {l} ")?;
        }
        if let Some(t) = self.token {
            write!(f, "token {t} ")?;
        }
        match &self.kind {
            ViolationKind::LayerOutOfRange { layer } => write!(f, "layer index {layer} out of range"),
            ViolationKind::SequenceOutOfRange { seq } => write!(f, "sequence id {seq} exceeds header count"),
            ViolationKind::LengthMismatch { found, expected } => {
                write!(f, "{found} tokens, expected context_length {expected}")
            }
            ViolationKind::WrongCount { found, expected } => {
                write!(f, "{found} experts selected, expected {expected}")
            }
            ViolationKind::ExpertOutOfRange { expert } => write!(f, "expert index {expert} out of range"),
            ViolationKind::Duplicate { expert } => write!(f, "expert {expert} selected twice"),
            ViolationKind::NotSorted => write!(f, "expert set not sorted ascending"),
            ViolationKind::LogitsLength { found, expected } => {
                write!(f, "{found} logits, expected {expected}")
            }
            ViolationKind::NonFiniteLogit => write!(f, "non-finite logit"),
            ViolationKind::TopKMismatch { selected, top_k } => {
                write!(f, "selected {selected:?} but logits give top-k {top_k:?}")
            }
            ViolationKind::SequenceCount { found, expected } => {
                write!(f, "{found} distinct sequences, header declares {expected}")
            }
            ViolationKind::InvalidConfig(msg) => write!(f, "{msg}"),
        }
    }
}

/// Violations of a single record against the header's routing config.
pub fn validate_record(header: &TraceHeader, trace: &ActivationTrace) -> Vec<Violation> {
    let cfg = &header.routing;
    let mut out = Vec::new();
    let at = |token: Option<usize>, kind| Violation {
        sequence_id: Some(trace.sequence_id),
        layer: Some(trace.layer),
        token,
        kind,
    };
    if trace.layer >= cfg.n_layers {
        out.push(at(None, ViolationKind::LayerOutOfRange { layer: trace.layer }));
    }
    if trace.sequence_id >= header.num_sequences as u64 {
        out.push(at(None, ViolationKind::SequenceOutOfRange { seq: trace.sequence_id }));
    }
    if trace.experts.len() != cfg.context_length {
        out.push(at(
            None,
            ViolationKind::LengthMismatch {
                found: trace.experts.len(),
                expected: cfg.context_length,
            },
        ));
    }
    for (t, set) in trace.experts.iter().enumerate() {
        if set.len() != cfg.k_active {
            out.push(at(
                Some(t),
                ViolationKind::WrongCount {
                    found: set.len(),
                    expected: cfg.k_active,
                },
            ));
        }
        if let Some(&e) = set.iter().find(|&&e| e >= cfg.n_experts) {
            out.push(at(Some(t), ViolationKind::ExpertOutOfRange { expert: e }));
        }
        let mut seen = BTreeSet::new();
        if let Some(&e) = set.iter().find(|&&e| !seen.insert(e)) {
            out.push(at(Some(t), ViolationKind::Duplicate { expert: e }));
        } else if set.windows(2).any(|w| w[0] > w[1]) {
            out.push(at(Some(t), ViolationKind::NotSorted));
        }
    }
    if let Some(logits) = &trace.logits {
        if logits.len() != trace.experts.len() {
            out.push(at(
                None,
                ViolationKind::LogitsLength {
                    found: logits.len(),
                    expected: trace.experts.len(),
                },
            ));
        }
        for (t, (row, set)) in logits.iter().zip(&trace.experts).enumerate() {
            if row.len() != cfg.n_experts {
                out.push(at(
                    Some(t),
                    ViolationKind::LogitsLength {
                        found: row.len(),
                        expected: cfg.n_experts,
                    },
                ));
                continue;
            }
            if row.iter().any(|z| !z.is_finite()) {
                out.push(at(Some(t), ViolationKind::NonFiniteLogit));
                continue;
            }
            let best = top_k(row, cfg.k_active);
            if &best != set {
                out.push(at(
                    Some(t),
                    ViolationKind::TopKMismatch {
                        selected: set.clone(),
                        top_k: best,
                    },
                ));
            }
        }
    }
    out
}

/// All invariant violations of a trace collection. Empty means valid.
pub fn validate_trace(header: &TraceHeader, traces: &[ActivationTrace]) -> Vec<Violation> {
    let mut out: Vec<Violation> = traces.iter().flat_map(|t| validate_record(header, t)).collect();
    if let Err(e) = header.routing.validate() {
        out.push(Violation {
            sequence_id: None,
            layer: None,
            token: None,
            kind: ViolationKind::InvalidConfig(e.to_string()),
        });
    }
    let distinct: BTreeSet<u64> = traces.iter().map(|t| t.sequence_id).collect();
    if distinct.len() != header.num_sequences {
        out.push(Violation {
            sequence_id: None,
            layer: None,
            token: None,
            kind: ViolationKind::SequenceCount {
                found: distinct.len(),
                expected: header.num_sequences,
            },
        });
    }
    out
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Line {
    Header {
        model: String,
        n_experts: usize,
        k_active: usize,
        n_layers: usize,
        context_length: usize,
        num_sequences: usize,
    },
    Trace {
        seq: u64,
        layer: usize,
        experts: Vec<Vec<usize>>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        logits: Option<Vec<Vec<f64>>>,
    },
}

fn is_gz(path: &Path) -> bool {
    path.extension().is_some_and(|e| e == "gz")
}

pub(crate) fn open_reader(path: &Path) -> Result<Box<dyn BufRead>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let inner: Box<dyn Read> = if is_gz(path) {
        Box::new(MultiGzDecoder::new(file))
    } else {
        Box::new(file)
    };
    Ok(Box::new(BufReader::new(inner)))
}

pub(crate) fn open_writer(path: &Path) -> Result<Box<dyn Write>> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let buf = BufWriter::new(file);
    Ok(if is_gz(path) {
        Box::new(GzEncoder::new(buf, Compression::default()))
    } else {
        Box::new(buf)
    })
}

/// Streaming writer for trace files.
pub struct TraceWriter {
    out: Box<dyn Write>,
    path: std::path::PathBuf,
}

impl TraceWriter {
    pub fn create(path: impl AsRef<Path>, header: &TraceHeader) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        let mut w = Self {
            out: open_writer(&path)?,
            path,
        };
        let line = Line::Header {
            model: header.model_name.clone(),
            n_experts: header.routing.n_experts,
            k_active: header.routing.k_active,
            n_layers: header.routing.n_layers,
            context_length: header.routing.context_length,
            num_sequences: header.num_sequences,
        };
        w.put(&line)?;
        Ok(w)
    }

    fn put(&mut self, line: &Line) -> Result<()> {
        let path = &self.path;
        serde_json::to_writer(&mut self.out, line).map_err(|e| Error::io(path, e.into()))?;
        self.out.write_all(b"\n").map_err(|e| Error::io(path, e))
    }

    pub fn write(&mut self, trace: &ActivationTrace) -> Result<()> {
        self.put(&Line::Trace {
            seq: trace.sequence_id,
            layer: trace.layer,
            experts: trace.experts.clone(),
            logits: trace.logits.clone(),
        })
    }

    pub fn finish(mut self) -> Result<()> {
        self.out.flush().map_err(|e| Error::io(&self.path, e))
    }
}

impl Drop for TraceWriter {
    fn drop(&mut self) {
        let _ = self.out.flush();
    }
}

pub fn write_trace<'a>(
    header: &TraceHeader,
    traces: impl IntoIterator<Item = &'a ActivationTrace>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let mut w = TraceWriter::create(path, header)?;
    for t in traces {
        w.write(t)?;
    }
    w.finish()
}

/// Streaming reader: parses the header eagerly, then yields records, each
/// checked against the header.
pub struct TraceReader {
    header: TraceHeader,
    lines: std::io::Lines<Box<dyn BufRead>>,
    line_no: usize,
}

impl TraceReader {
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let mut lines = open_reader(path.as_ref())?.lines();
        let first = lines
            .next()
            .ok_or_else(|| Error::Parse {
                line: 1,
                msg: "empty file, expected a header line".into(),
            })?
            .map_err(|e| Error::io(path.as_ref(), e))?;
        let header = match serde_json::from_str::<Line>(&first) {
            Ok(Line::Header {
                model,
                n_experts,
                k_active,
                n_layers,
                context_length,
                num_sequences,
            }) => {
                let routing = RoutingConfig {
                    n_experts,
                    k_active,
                    n_layers,
                    context_length,
                };
                routing.validate().map_err(|e| Error::Schema(e.to_string()))?;
                TraceHeader {
                    model_name: model,
                    routing,
                    num_sequences,
                }
            }
            Ok(Line::Trace { .. }) => {
                return Err(Error::Schema("line 1 must be the header record".into()));
            }
            Err(e) => {
                return Err(Error::Parse {
                    line: 1,
                    msg: e.to_string(),
                })
            }
        };
        Ok(Self {
            header,
            lines,
            line_no: 1,
        })
    }

    pub fn header(&self) -> &TraceHeader {
        &self.header
    }
}

impl Iterator for TraceReader {
    type Item = Result<ActivationTrace>;

    fn next(&mut self) -> Option<Self::Item> {
        loop {
            let raw = self.lines.next()?;
            self.line_no += 1;
            let line_no = self.line_no;
            let raw = match raw {
                Ok(r) => r,
                Err(e) => {
                    return Some(Err(Error::Parse {
                        line: line_no,
                        msg: e.to_string(),
                    }))
                }
            };
            if raw.trim().is_empty() {
                continue;
            }
            let parsed = match serde_json::from_str::<Line>(&raw) {
                Ok(p) => p,
                Err(e) => {
                    return Some(Err(Error::Parse {
                        line: line_no,
                        msg: e.to_string(),
                    }))
                }
            };
            let Line::Trace {
                seq,
                layer,
                experts,
                logits,
            } = parsed
            else {
                return Some(Err(Error::Schema(format!("line {line_no}: duplicate header"))));
            };
            let trace = ActivationTrace {
                sequence_id: seq,
                layer,
                experts,
                logits,
            };
            if let Some(v) = validate_record(&self.header, &trace).first() {
                return Some(Err(Error::Schema(format!("line {line_no}: {v}"))));
            }
            return Some(Ok(trace));
        }
    }
}

pub fn read_trace(path: impl AsRef<Path>) -> Result<(TraceHeader, Vec<ActivationTrace>)> {
    let reader = TraceReader::open(path)?;
    let header = reader.header().clone();
    let traces = reader.collect::<Result<Vec<_>>>()?;
    Ok((header, traces))
}

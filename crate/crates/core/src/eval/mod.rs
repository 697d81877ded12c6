//! Latency and quality measurement: word-level Average Lagging (AL), its
//! length-adaptive variant (LAAL), corpus BLEU, a scripted wait-k agent used
//! as a closed-form oracle for the latency metrics, and the quality-latency
//! sweep. All latencies derive from frame counts, never wall clock.

use std::collections::HashMap;

use crate::data::UtteranceRecord;
use crate::decode::{decode_streaming, DecodeConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Read,
    Write,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEvent {
    pub kind: EventKind,
    /// Source milliseconds consumed when the event happened.
    pub ms: f64,
    pub token: Option<usize>,
}

/// Ordered read/write log of one streaming session.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamingTrace {
    pub source_duration_ms: f64,
    pub ms_per_frame: f64,
    pub events: Vec<TraceEvent>,
}

impl StreamingTrace {
    pub fn new(source_duration_ms: f64, ms_per_frame: f64) -> StreamingTrace {
        StreamingTrace {
            source_duration_ms,
            ms_per_frame,
            events: Vec::new(),
        }
    }

    pub fn read(&mut self, ms: f64) {
        self.events.push(TraceEvent {
            kind: EventKind::Read,
            ms,
            token: None,
        });
    }

    pub fn write(&mut self, ms: f64, token: usize) {
        self.events.push(TraceEvent {
            kind: EventKind::Write,
            ms,
            token: Some(token),
        });
    }

    /// Source milliseconds consumed at each emitted token, in order.
    pub fn write_times(&self) -> Vec<f64> {
        self.events
            .iter()
            .filter(|e| e.kind == EventKind::Write)
            .map(|e| e.ms)
            .collect()
    }

    /// Consumption must be non-decreasing and the final read must reach the
    /// source duration.
    pub fn validate(&self) -> Result<()> {
        let mut prev = 0.0;
        for e in &self.events {
            if e.ms < prev {
                return Err(Error::Runtime(format!(
                    "trace goes backwards: {} after {prev}",
                    e.ms
                )));
            }
            prev = e.ms;
        }
        let last_read = self
            .events
            .iter()
            .rev()
            .find(|e| e.kind == EventKind::Read)
            .map(|e| e.ms);
        match last_read {
            Some(ms) if (ms - self.source_duration_ms).abs() < 1e-9 => Ok(()),
            other => Err(Error::Runtime(format!(
                "final read at {other:?} does not reach source duration {}",
                self.source_duration_ms
            ))),
        }
    }
}

/// Lagging with an explicit divisor: the ideal schedule spaces words
/// `duration / divisor_words` apart. AL uses the reference length, LAAL the
/// larger of hypothesis and reference.
pub fn lagging_with_divisor(
    trace: &StreamingTrace,
    hyp_words: usize,
    divisor_words: usize,
) -> Result<f64> {
    if divisor_words == 0 {
        return Err(Error::Config("lagging divisor must be >= 1".into()));
    }
    let duration = trace.source_duration_ms;
    if duration <= 0.0 {
        return Err(Error::Config("source duration must be positive".into()));
    }
    let d = trace.write_times();
    if d.len() != hyp_words {
        return Err(Error::Runtime(format!(
            "trace has {} writes but hypothesis has {hyp_words} words",
            d.len()
        )));
    }
    if hyp_words == 0 {
        return Ok(duration); // degenerate output is fully penalized
    }
    // tau: first word emitted at or after the full source, else the last word
    let tau = d
        .iter()
        .position(|&ms| ms >= duration)
        .map(|i| i + 1)
        .unwrap_or(hyp_words);
    let step = duration / divisor_words as f64;
    let sum: f64 = d[..tau]
        .iter()
        .enumerate()
        .map(|(i, &ms)| ms - i as f64 * step)
        .sum();
    Ok(sum / tau as f64)
}

/// Word-level Average Lagging in milliseconds.
pub fn average_lagging(trace: &StreamingTrace, hyp_words: usize, ref_words: usize) -> Result<f64> {
    lagging_with_divisor(trace, hyp_words, ref_words)
}

/// Length-Adaptive Average Lagging: the divisor is max(hyp, ref) length.
pub fn laal(trace: &StreamingTrace, hyp_words: usize, ref_words: usize) -> Result<f64> {
    if ref_words == 0 {
        return Err(Error::Config("laal needs ref_words >= 1".into()));
    }
    lagging_with_divisor(trace, hyp_words, hyp_words.max(ref_words))
}

/// Hook mapping token-level write times onto word-level ones. The toy task's
/// tokens are words, so the identity grouping is the default; a sub-word
/// system would group several tokens into one word and keep the last time.
pub fn group_tokens_to_words(write_times: &[f64], tokens_per_word: &[usize]) -> Result<Vec<f64>> {
    let total: usize = tokens_per_word.iter().sum();
    if total != write_times.len() {
        return Err(Error::Runtime(format!(
            "{} write times cannot group into words of sizes {tokens_per_word:?}",
            write_times.len()
        )));
    }
    let mut out = Vec::with_capacity(tokens_per_word.len());
    let mut idx = 0;
    for &n in tokens_per_word {
        if n == 0 {
            return Err(Error::Runtime("empty word in grouping".into()));
        }
        idx += n;
        out.push(write_times[idx - 1]);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// BLEU

const BLEU_MAX_N: usize = 4;
const BLEU_FLOOR: f64 = 1e-9;

/// Corpus BLEU (percent): geometric mean of clipped n-gram precisions up to
/// 4-grams times the brevity penalty. Zero precisions are floored at 1e-9.
pub fn corpus_bleu(hyps: &[Vec<usize>], refs: &[Vec<usize>]) -> Result<f64> {
    if hyps.len() != refs.len() {
        return Err(Error::Config(format!(
            "bleu: {} hypotheses vs {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if refs.is_empty() {
        return Err(Error::Config("bleu over an empty corpus".into()));
    }
    let mut clipped = [0usize; BLEU_MAX_N];
    let mut totals = [0usize; BLEU_MAX_N];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;

    for (hyp, re) in hyps.iter().zip(refs) {
        hyp_len += hyp.len();
        ref_len += re.len();
        for n in 1..=BLEU_MAX_N {
            if hyp.len() + 1 > n {
                totals[n - 1] += hyp.len() + 1 - n;
            }
            let mut ref_counts: HashMap<&[usize], usize> = HashMap::new();
            if re.len() + 1 > n {
                for gram in re.windows(n) {
                    *ref_counts.entry(gram).or_insert(0) += 1;
                }
            }
            let mut hyp_counts: HashMap<&[usize], usize> = HashMap::new();
            if hyp.len() + 1 > n {
                for gram in hyp.windows(n) {
                    *hyp_counts.entry(gram).or_insert(0) += 1;
                }
            }
            for (gram, count) in hyp_counts {
                let allowed = ref_counts.get(gram).copied().unwrap_or(0);
                clipped[n - 1] += count.min(allowed);
            }
        }
    }

    if hyp_len == 0 {
        return Ok(0.0);
    }
    // effective order: n-gram sizes no hypothesis sentence reaches are
    // skipped, so identical corpora score exactly 100 regardless of length
    let mut log_precision = 0.0;
    let mut orders = 0usize;
    for n in 0..BLEU_MAX_N {
        if totals[n] == 0 {
            continue;
        }
        let p = (clipped[n] as f64 / totals[n] as f64).max(BLEU_FLOOR);
        log_precision += p.ln();
        orders += 1;
    }
    let brevity = if hyp_len < ref_len {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    } else {
        1.0
    };
    Ok(100.0 * brevity * (log_precision / orders as f64).exp())
}

// ---------------------------------------------------------------------------
// scripted wait-k agent

/// Scripted wait-k policy emitting the reference as its hypothesis: reads
/// `k` pre-decision steps, then alternates one read with one write; words
/// left over when the source is exhausted are written at full consumption.
/// Used purely as a latency-metric oracle.
pub fn scripted_waitk_agent(
    k: usize,
    pre_decision_ms: f64,
    src_duration_ms: f64,
    ref_words: usize,
) -> StreamingTrace {
    assert!(k >= 1 && pre_decision_ms > 0.0 && src_duration_ms > 0.0);
    let mut trace = StreamingTrace::new(src_duration_ms, pre_decision_ms);
    let mut consumed = 0.0f64;
    for word in 0..ref_words {
        let steps = if word == 0 { k } else { 1 };
        for _ in 0..steps {
            if consumed < src_duration_ms {
                consumed = (consumed + pre_decision_ms).min(src_duration_ms);
                trace.read(consumed);
            }
        }
        trace.write(consumed, word);
    }
    if consumed < src_duration_ms {
        trace.read(src_duration_ms);
    }
    trace
}

// ---------------------------------------------------------------------------
// quality-latency sweep

/// One row of the trade-off table. Values are rounded to three decimals at
/// construction so the CSV round-trips exactly.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TradeoffPoint {
    pub epsilon: f64,
    pub bleu: f64,
    pub al_ms: f64,
    pub laal_ms: f64,
    pub mean_emit_ms: f64,
}

fn round3(x: f64) -> f64 {
    (x * 1000.0).round() / 1000.0
}

impl TradeoffPoint {
    pub fn new(epsilon: f64, bleu: f64, al_ms: f64, laal_ms: f64, mean_emit_ms: f64) -> Self {
        TradeoffPoint {
            epsilon: round3(epsilon),
            bleu: round3(bleu),
            al_ms: round3(al_ms),
            laal_ms: round3(laal_ms),
            mean_emit_ms: round3(mean_emit_ms),
        }
    }
}

pub const TRADEOFF_CSV_HEADER: &str = "epsilon,bleu,al_ms,laal_ms,mean_emit_ms";

pub fn tradeoff_csv(points: &[TradeoffPoint]) -> String {
    let mut out = String::from(TRADEOFF_CSV_HEADER);
    out.push('\n');
    for p in points {
        out.push_str(&format!(
            "{:.3},{:.3},{:.3},{:.3},{:.3}\n",
            p.epsilon, p.bleu, p.al_ms, p.laal_ms, p.mean_emit_ms
        ));
    }
    out
}

pub fn parse_tradeoff_csv(text: &str) -> Result<Vec<TradeoffPoint>> {
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == TRADEOFF_CSV_HEADER => {}
        other => {
            return Err(Error::Parse {
                line: 1,
                msg: format!("bad sweep header {other:?}"),
            })
        }
    }
    let mut out = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<f64> = line
            .split(',')
            .map(|f| {
                f.parse::<f64>().map_err(|_| Error::Parse {
                    line: i + 2,
                    msg: format!("bad number {f:?}"),
                })
            })
            .collect::<Result<_>>()?;
        if fields.len() != 5 {
            return Err(Error::Parse {
                line: i + 2,
                msg: format!("expected 5 fields, got {}", fields.len()),
            });
        }
        out.push(TradeoffPoint {
            epsilon: fields[0],
            bleu: fields[1],
            al_ms: fields[2],
            laal_ms: fields[3],
            mean_emit_ms: fields[4],
        });
    }
    Ok(out)
}

/// Metrics of one decoded corpus at a fixed threshold offset.
pub struct CorpusEval {
    pub bleu: f64,
    pub al_ms: f64,
    pub laal_ms: f64,
    pub mean_emit_ms: f64,
    pub hyps: Vec<Vec<usize>>,
}

/// Decodes `test_set` and evaluates quality and latency.
pub fn evaluate_corpus(
    params: &ModelParams,
    mc: &ModelConfig,
    dcfg: &DecodeConfig,
    test_set: &[UtteranceRecord],
    fusion_lm: Option<&ModelParams>,
) -> Result<CorpusEval> {
    if test_set.is_empty() {
        return Err(Error::Config("empty evaluation set".into()));
    }
    let mut hyps = Vec::with_capacity(test_set.len());
    let mut al_sum = 0.0;
    let mut laal_sum = 0.0;
    let mut emit_sum = 0.0;
    let mut emit_count = 0usize;
    for utt in test_set {
        let out = decode_streaming(params, mc, dcfg, &utt.frames_tensor(), utt.ms_per_frame, fusion_lm)?;
        out.trace.validate()?;
        al_sum += average_lagging(&out.trace, out.tokens.len(), utt.tgt_tokens.len())?;
        laal_sum += laal(&out.trace, out.tokens.len(), utt.tgt_tokens.len())?;
        for &f in &out.emit_frames {
            emit_sum += f as f64 * utt.ms_per_frame;
            emit_count += 1;
        }
        hyps.push(out.tokens);
    }
    let refs: Vec<Vec<usize>> = test_set.iter().map(|u| u.tgt_tokens.clone()).collect();
    let bleu = corpus_bleu(&hyps, &refs)?;
    let n = test_set.len() as f64;
    Ok(CorpusEval {
        bleu,
        al_ms: al_sum / n,
        laal_ms: laal_sum / n,
        mean_emit_ms: if emit_count == 0 { 0.0 } else { emit_sum / emit_count as f64 },
        hyps,
    })
}

/// Test-time-only latency control: one trained model decoded at every
/// threshold offset in `grid`. Rows come back sorted by epsilon.
pub fn sweep(
    params: &ModelParams,
    mc: &ModelConfig,
    dcfg: &DecodeConfig,
    test_set: &[UtteranceRecord],
    grid: &[f64],
    fusion_lm: Option<&ModelParams>,
) -> Result<Vec<TradeoffPoint>> {
    if grid.is_empty() {
        return Err(Error::Config("empty epsilon grid".into()));
    }
    let mut grid = grid.to_vec();
    grid.sort_by(|a, b| a.partial_cmp(b).expect("finite epsilon"));
    let mut points = Vec::with_capacity(grid.len());
    for &eps in &grid {
        let cfg = DecodeConfig {
            epsilon: eps,
            ..dcfg.clone()
        };
        let ev = evaluate_corpus(params, mc, &cfg, test_set, fusion_lm)?;
        points.push(TradeoffPoint::new(eps, ev.bleu, ev.al_ms, ev.laal_ms, ev.mean_emit_ms));
    }
    Ok(points)
}

/// Line-delimited trace dump: `utt_id,kind,ms,token` (token empty on reads).
pub fn dump_traces(path: &std::path::Path, traces: &[(String, StreamingTrace)]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "utt_id,kind,ms,token")?;
    for (utt_id, trace) in traces {
        for e in &trace.events {
            let kind = match e.kind {
                EventKind::Read => "read",
                EventKind::Write => "write",
            };
            let token = e.token.map(|t| t.to_string()).unwrap_or_default();
            writeln!(w, "{utt_id},{kind},{:.3},{token}", e.ms)?;
        }
    }
    w.flush()?;
    Ok(())
}

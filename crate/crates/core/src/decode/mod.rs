//! Chunk-based incremental joint decoding.
//!
//! Frames arrive one chunk at a time. After every chunk the weights are
//! recomputed over everything read so far (the encoder is chunk-causal, so
//! earlier rows are asserted bit-stable, not assumed). Tokens whose
//! thresholds are strictly exceeded fire inside the chunk while a beam of
//! hypotheses is maintained; once the next threshold cannot be reached
//! within the chunk, the beam collapses to its single best hypothesis and
//! that shared prefix is committed irrevocably, timestamped with the chunk's
//! end frame. After the final chunk the remaining tokens fire with
//! full-input context until an end token wins or the length cap is reached.
//!
//! Offline decoding is the same routine fed the whole utterance as one
//! chunk: no intermediate commits, one final beam collapse — which makes the
//! saturating-threshold equivalence between streaming and offline decoding
//! hold by construction.

use crate::aif::{self, ExtractMode};
use crate::ctc::{self, PrefixScorer, PrefixState};
use crate::error::{Error, Result};
use crate::eval::StreamingTrace;
use crate::model::{self, ModelConfig, ModelParams, ParamView, PredState, BOS, EOS};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeMode {
    /// Beam search inside every chunk (the full method).
    Chunked,
    /// Greedy while streaming, beam search only after all input is read.
    TailBeam,
    /// Greedy everywhere.
    Greedy,
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<DecodeMode> {
        match s {
            "chunked" => Ok(DecodeMode::Chunked),
            "tail_beam" => Ok(DecodeMode::TailBeam),
            "greedy" => Ok(DecodeMode::Greedy),
            other => Err(Error::Config(format!(
                "unknown decode mode {other:?} (expected chunked|tail_beam|greedy)"
            ))),
        }
    }
}

impl std::fmt::Display for DecodeMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DecodeMode::Chunked => "chunked",
            DecodeMode::TailBeam => "tail_beam",
            DecodeMode::Greedy => "greedy",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecodeConfig {
    /// Threshold offset: token `i` fires when the accumulated weight
    /// strictly exceeds `i + epsilon`.
    pub epsilon: f64,
    pub beam_in_chunk: usize,
    pub mode: DecodeMode,
    /// Weight of the online CTC prefix score (0 disables it).
    pub lambda_ctc: f64,
    /// Shallow-fusion LM weight (0 disables fusion).
    pub fusion_mu: f64,
    /// Output length cap factor over the total accumulated weight.
    pub max_len_ratio: f64,
    pub delta: f64,
    pub alpha_scale: f64,
    pub aif_mode: ExtractMode,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            epsilon: 0.0,
            beam_in_chunk: 10,
            mode: DecodeMode::Chunked,
            lambda_ctc: 0.0,
            fusion_mu: 0.0,
            max_len_ratio: 1.5,
            delta: 0.05,
            alpha_scale: 1.0,
            aif_mode: ExtractMode::MultiHead,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_in_chunk == 0 {
            return Err(Error::Config("beam_in_chunk must be >= 1".into()));
        }
        if self.max_len_ratio <= 0.0 {
            return Err(Error::Config("max_len_ratio must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.delta) {
            return Err(Error::Config(format!("delta {} outside [0, 1)", self.delta)));
        }
        Ok(())
    }

    /// Threshold offset large enough that no token can fire before the final
    /// chunk of any input (per-frame weights are bounded by 1).
    pub const SATURATING_EPSILON: f64 = 1.0e9;
}

/// One beam entry.
#[derive(Clone)]
pub struct Hypothesis {
    pub tokens: Vec<usize>,
    pub emit_frames: Vec<usize>,
    pub score: f64,
    pred: PredState,
    lm: Option<PredState>,
    ctc: Option<PrefixState>,
    pub finished: bool,
}

impl Hypothesis {
    /// Threshold of this hypothesis's next token.
    pub fn next_threshold(&self, epsilon: f64) -> f64 {
        (self.tokens.len() + 1) as f64 + epsilon
    }
}

pub struct DecodeOutput {
    /// Committed tokens (end token stripped).
    pub tokens: Vec<usize>,
    /// Frame index (1-based chunk-end frame) at which each token committed.
    pub emit_frames: Vec<usize>,
    pub trace: StreamingTrace,
    /// Best cumulative log score.
    pub score: f64,
}

struct Candidate {
    parent: usize,
    token: usize,
    score: f64,
}

/// Next-token scores for one hypothesis: joint log-softmax plus the optional
/// CTC prefix-score delta at the firing boundary and the fusion LM term.
/// Returns the top `beam` extensions, ties broken by smaller token id.
#[allow(clippy::too_many_arguments)]
fn score_step(
    view: &ParamView,
    mc: &ModelConfig,
    dcfg: &DecodeConfig,
    hyp: &Hypothesis,
    e: &Tensor,
    boundary: usize,
    scorer: Option<&PrefixScorer>,
    lm_view: Option<&ParamView>,
    beam: usize,
) -> Result<Vec<(usize, f64)>> {
    let h_aif = aif::extract(view, mc, hyp.pred.q(), e, boundary, dcfg.aif_mode)?;
    let logits = model::joint_logits(view, &h_aif, hyp.pred.h_pred())?;
    let logp = logits.log_softmax_lastdim()?;
    let mut scores: Vec<f64> = logp.data().to_vec();

    if let (Some(scorer), Some(state)) = (scorer, hyp.ctc.as_ref()) {
        if dcfg.lambda_ctc != 0.0 {
            let base = scorer.score(state, boundary)?;
            for (tok, s) in scores.iter_mut().enumerate() {
                // no CTC class exists for control tokens; their delta is 0
                if tok != BOS && tok != EOS {
                    let ext = scorer.extend(state, ctc::token_to_class(tok))?;
                    *s += dcfg.lambda_ctc * (scorer.score(&ext, boundary)? - base);
                }
            }
        }
    }
    if let Some(lm_view) = lm_view {
        if dcfg.fusion_mu != 0.0 {
            let lm_state = hyp.lm.as_ref().expect("fusion state present");
            let lm_logits = model::lm_logits_rows(lm_view, lm_state.h_pred())?;
            let lm_logp = lm_logits.log_softmax_lastdim()?;
            for (s, &l) in scores.iter_mut().zip(lm_logp.data()) {
                *s += dcfg.fusion_mu * l;
            }
        }
    }

    let mut ranked: Vec<(usize, f64)> = scores
        .into_iter()
        .enumerate()
        .filter(|&(tok, _)| tok != BOS)
        .collect();
    ranked.sort_by(|a, b| {
        b.1.partial_cmp(&a.1)
            .expect("finite scores")
            .then(a.0.cmp(&b.0))
    });
    ranked.truncate(beam);
    Ok(ranked)
}

/// Which tokens fire within the current chunk, and at which boundaries.
/// `cumsum` covers every frame read so far; a token fires while the chunk-end
/// accumulation strictly exceeds its threshold, and the token that leaves the
/// next threshold out of reach is the chunk's last. The schedule depends only
/// on the weights, never on beam contents, because decoding is
/// label-synchronous.
pub fn chunk_fire_schedule(
    cumsum: &[f64],
    first_token: usize,
    epsilon: f64,
    cap: Option<usize>,
) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    let Some(&chunk_end) = cumsum.last() else {
        return Ok(out);
    };
    let mut token = first_token;
    loop {
        if let Some(cap) = cap {
            if token > cap {
                break;
            }
        }
        if aif::is_last_in_chunk(chunk_end, token, epsilon) {
            break;
        }
        let boundary = aif::find_boundary_within(cumsum, token, epsilon)?
            .expect("threshold strictly exceeded within this chunk");
        out.push((token, boundary));
        token += 1;
    }
    Ok(out)
}

fn best_index(hyps: &[Hypothesis]) -> usize {
    let mut best = 0;
    for i in 1..hyps.len() {
        let a = &hyps[i];
        let b = &hyps[best];
        let better = a.score > b.score
            || (a.score == b.score && (a.finished && !b.finished))
            || (a.score == b.score && a.finished == b.finished && a.tokens < b.tokens);
        if better {
            best = i;
        }
    }
    best
}

/// Expands every alive hypothesis by one token at `boundary`, keeps the best
/// `beam`, and moves end-token emissions to `finished`.
#[allow(clippy::too_many_arguments)]
fn expand_step(
    view: &ParamView,
    mc: &ModelConfig,
    dcfg: &DecodeConfig,
    alive: &mut Vec<Hypothesis>,
    finished: &mut Vec<Hypothesis>,
    e: &Tensor,
    boundary: usize,
    emit_frame: usize,
    scorer: Option<&PrefixScorer>,
    lm_view: Option<&ParamView>,
    beam: usize,
) -> Result<()> {
    let mut candidates: Vec<Candidate> = Vec::new();
    for (parent, hyp) in alive.iter().enumerate() {
        for (token, score) in score_step(view, mc, dcfg, hyp, e, boundary, scorer, lm_view, beam)? {
            candidates.push(Candidate {
                parent,
                token,
                score: hyp.score + score,
            });
        }
    }
    candidates.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .expect("finite scores")
            .then(a.token.cmp(&b.token))
            .then(a.parent.cmp(&b.parent))
    });
    candidates.truncate(beam);

    let mut next: Vec<Hypothesis> = Vec::with_capacity(candidates.len());
    for c in candidates {
        let parent = &alive[c.parent];
        if c.token == EOS {
            let mut done = parent.clone();
            done.score = c.score;
            done.finished = true;
            finished.push(done);
            continue;
        }
        let mut hyp = parent.clone();
        hyp.score = c.score;
        hyp.tokens.push(c.token);
        hyp.emit_frames.push(emit_frame);
        hyp.pred.advance(view, mc, c.token)?;
        if let Some(lm_state) = hyp.lm.as_mut() {
            if let Some(lm_view) = lm_view {
                lm_state.advance(lm_view, mc, c.token)?;
            }
        }
        if let (Some(scorer), Some(state)) = (scorer, hyp.ctc.as_ref()) {
            hyp.ctc = Some(scorer.extend(state, ctc::token_to_class(c.token))?);
        }
        next.push(hyp);
    }
    *alive = next;
    Ok(())
}

/// Streaming decode with frames delivered in chunks of `decode_chunk`
/// frames. Most callers want `decode_chunk == mc.chunk_size`; the offline
/// comparator uses a single chunk spanning the whole input.
pub fn decode_streaming_chunked(
    params: &ModelParams,
    mc: &ModelConfig,
    dcfg: &DecodeConfig,
    frames: &Tensor,
    ms_per_frame: f64,
    fusion_lm: Option<&ModelParams>,
    decode_chunk: usize,
) -> Result<DecodeOutput> {
    dcfg.validate()?;
    if frames.shape().len() != 2 || frames.shape()[0] == 0 {
        return Err(Error::shape(format!("decode frames {:?}", frames.shape())));
    }
    if decode_chunk == 0 {
        return Err(Error::Config("decode chunk must be >= 1".into()));
    }
    let total_frames = frames.shape()[0];
    let view = params.view();
    let lm_view = fusion_lm.map(|p| p.view());
    if dcfg.fusion_mu != 0.0 && lm_view.is_none() {
        return Err(Error::Config("fusion_mu set but no fusion LM provided".into()));
    }

    let mut trace = StreamingTrace::new(total_frames as f64 * ms_per_frame, ms_per_frame);
    let beam = match dcfg.mode {
        DecodeMode::Chunked => dcfg.beam_in_chunk,
        DecodeMode::TailBeam | DecodeMode::Greedy => 1,
    };

    let mut root = Hypothesis {
        tokens: Vec::new(),
        emit_frames: Vec::new(),
        score: 0.0,
        pred: PredState::start(&view, mc)?,
        lm: None,
        ctc: None,
        finished: false,
    };
    if let Some(lm_view) = &lm_view {
        root.lm = Some(PredState::start(lm_view, mc)?);
    }

    let mut alive = vec![root];
    let mut finished: Vec<Hypothesis> = Vec::new();
    let mut committed = 0usize; // tokens committed so far
    let mut prev_e: Option<Tensor> = None;
    let mut prev_cumsum: Vec<f64> = Vec::new();
    let mut scorer: Option<PrefixScorer> = None;
    let mut cap: Option<usize> = None;

    let mut consumed = 0usize;
    while consumed < total_frames {
        let chunk_end = (consumed + decode_chunk).min(total_frames);
        consumed = chunk_end;
        let is_final = consumed == total_frames;
        trace.read(chunk_end as f64 * ms_per_frame);

        let e = model::encode(&view, mc, &frames.slice_rows(0, chunk_end)?)?;
        let weights = aif::frame_weights(&e, dcfg.delta, dcfg.alpha_scale)?;
        // chunk causality in action, asserted rather than assumed: earlier
        // rows and weights must be bit-identical to the previous pass
        if let Some(prev) = &prev_e {
            let cols = mc.d_model;
            let stable_rows = prev.shape()[0];
            assert_eq!(
                &e.data()[..stable_rows * cols],
                &prev.data()[..stable_rows * cols],
                "encoder rows changed for already-read chunks"
            );
            assert_eq!(
                &weights.cumsum[..prev_cumsum.len()],
                &prev_cumsum[..],
                "accumulated weights changed for already-read frames"
            );
        }
        if dcfg.lambda_ctc != 0.0 {
            let log_probs = model::ctc_log_probs(&view, &e)?;
            match scorer.as_mut() {
                None => {
                    let s = PrefixScorer::new(&log_probs)?;
                    for hyp in alive.iter_mut() {
                        hyp.ctc = Some(s.root());
                    }
                    scorer = Some(s);
                }
                Some(s) => {
                    let have = s.frames();
                    s.extend_frames(&log_probs, have)?;
                }
            }
        }

        let cumsum = &weights.cumsum[..chunk_end];
        if is_final {
            cap = Some((dcfg.max_len_ratio * weights.total()).ceil() as usize + 1);
        }

        // fire every token whose threshold is strictly exceeded in this chunk
        if !alive.is_empty() {
            let schedule =
                chunk_fire_schedule(cumsum, alive[0].tokens.len() + 1, dcfg.epsilon, cap)?;
            for (token_index, boundary) in schedule {
                if alive.is_empty() {
                    break;
                }
                let len = alive[0].tokens.len();
                assert_eq!(len + 1, token_index, "beam out of step with the fire schedule");
                assert!(
                    alive.iter().all(|h| h.tokens.len() == len),
                    "label-synchronous beam lost alignment"
                );
                assert!(
                    alive
                        .iter()
                        .all(|h| h.tokens[..committed] == alive[0].tokens[..committed]),
                    "alive hypothesis diverged from the committed prefix"
                );
                expand_step(
                    &view,
                    mc,
                    dcfg,
                    &mut alive,
                    &mut finished,
                    &e,
                    boundary,
                    chunk_end,
                    scorer.as_ref(),
                    lm_view.as_ref(),
                    beam,
                )?;
            }
        }

        if !is_final {
            // chunk boundary: collapse to the single best hypothesis and
            // commit its tokens with this chunk's end-frame timestamp
            let mut pool = std::mem::take(&mut alive);
            pool.append(&mut finished);
            if pool.is_empty() {
                break;
            }
            let best = pool.swap_remove(best_index(&pool));
            let best_is_finished = best.finished;
            for (i, &tok) in best.tokens.iter().enumerate().skip(committed) {
                trace.write(best.emit_frames[i] as f64 * ms_per_frame, tok);
            }
            committed = best.tokens.len();
            if best_is_finished {
                // the stream ends on a committed end token; drain the source
                trace.read(total_frames as f64 * ms_per_frame);
                return Ok(DecodeOutput {
                    tokens: best.tokens.clone(),
                    emit_frames: best.emit_frames.clone(),
                    score: best.score,
                    trace,
                });
            }
            // losing finished hypotheses were dropped with the pool: they
            // contradict the commitment that just happened
            alive = vec![best];
        }

        prev_e = Some(e);
        prev_cumsum = weights.cumsum.clone();
    }

    // tail: all input read; remaining tokens use full context
    let e = prev_e.expect("at least one chunk");
    let cap = cap.expect("final chunk seen");
    let tail_beam = match dcfg.mode {
        DecodeMode::Chunked | DecodeMode::TailBeam => dcfg.beam_in_chunk,
        DecodeMode::Greedy => 1,
    };
    loop {
        if alive.is_empty() {
            break;
        }
        if alive[0].tokens.len() >= cap {
            break;
        }
        if let Some(best_fin) = finished.iter().map(|h| h.score).max_by(|a, b| {
            a.partial_cmp(b).expect("finite scores")
        }) {
            let best_alive = alive
                .iter()
                .map(|h| h.score)
                .fold(f64::NEG_INFINITY, f64::max);
            if best_fin >= best_alive {
                break;
            }
        }
        expand_step(
            &view,
            mc,
            dcfg,
            &mut alive,
            &mut finished,
            &e,
            total_frames,
            total_frames,
            scorer.as_ref(),
            lm_view.as_ref(),
            tail_beam,
        )?;
    }

    let mut pool = finished;
    pool.extend(alive);
    if pool.is_empty() {
        return Ok(DecodeOutput {
            tokens: Vec::new(),
            emit_frames: Vec::new(),
            score: f64::NEG_INFINITY,
            trace,
        });
    }
    let best = pool.swap_remove(best_index(&pool));
    assert!(
        best.tokens.len() >= committed,
        "final hypothesis shorter than the committed prefix"
    );
    for (i, &tok) in best.tokens.iter().enumerate().skip(committed) {
        trace.write(best.emit_frames[i] as f64 * ms_per_frame, tok);
    }
    Ok(DecodeOutput {
        tokens: best.tokens,
        emit_frames: best.emit_frames,
        score: best.score,
        trace,
    })
}

/// Streaming decode with chunks of the encoder's configured size.
pub fn decode_streaming(
    params: &ModelParams,
    mc: &ModelConfig,
    dcfg: &DecodeConfig,
    frames: &Tensor,
    ms_per_frame: f64,
    fusion_lm: Option<&ModelParams>,
) -> Result<DecodeOutput> {
    decode_streaming_chunked(params, mc, dcfg, frames, ms_per_frame, fusion_lm, mc.chunk_size)
}

/// Offline comparator: the whole utterance arrives as one chunk, so the
/// search is a standard beam search with the same scoring and a single
/// final collapse.
pub fn decode_offline(
    params: &ModelParams,
    mc: &ModelConfig,
    dcfg: &DecodeConfig,
    frames: &Tensor,
    ms_per_frame: f64,
    fusion_lm: Option<&ModelParams>,
) -> Result<DecodeOutput> {
    let t = frames.shape().first().copied().unwrap_or(0).max(1);
    decode_streaming_chunked(params, mc, dcfg, frames, ms_per_frame, fusion_lm, t)
}

/// One line per utterance: `utt_id<TAB>tokens<TAB>per-token emit ms<TAB>source ms`.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeRecord {
    pub utt_id: String,
    pub tokens: Vec<usize>,
    pub emit_ms: Vec<f64>,
    pub source_ms: f64,
}

impl DecodeRecord {
    pub fn from_output(utt_id: &str, out: &DecodeOutput, ms_per_frame: f64) -> DecodeRecord {
        DecodeRecord {
            utt_id: utt_id.to_string(),
            tokens: out.tokens.clone(),
            emit_ms: out.emit_frames.iter().map(|&f| f as f64 * ms_per_frame).collect(),
            source_ms: out.trace.source_duration_ms,
        }
    }

    pub fn to_line(&self) -> String {
        let tokens: Vec<String> = self.tokens.iter().map(usize::to_string).collect();
        let emits: Vec<String> = self.emit_ms.iter().map(|ms| format!("{ms:.3}")).collect();
        format!(
            "{}\t{}\t{}\t{:.3}",
            self.utt_id,
            tokens.join(" "),
            emits.join(" "),
            self.source_ms
        )
    }

    pub fn parse_line(line: &str, line_no: usize) -> Result<DecodeRecord> {
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("expected 4 tab-separated fields, got {}", fields.len()),
            });
        }
        let parse_usizes = |s: &str| -> Result<Vec<usize>> {
            s.split_whitespace()
                .map(|t| {
                    t.parse().map_err(|_| Error::Parse {
                        line: line_no,
                        msg: format!("bad token {t:?}"),
                    })
                })
                .collect()
        };
        let parse_f64s = |s: &str| -> Result<Vec<f64>> {
            s.split_whitespace()
                .map(|t| {
                    t.parse().map_err(|_| Error::Parse {
                        line: line_no,
                        msg: format!("bad emit time {t:?}"),
                    })
                })
                .collect()
        };
        let tokens = parse_usizes(fields[1])?;
        let emit_ms = parse_f64s(fields[2])?;
        if tokens.len() != emit_ms.len() {
            return Err(Error::Parse {
                line: line_no,
                msg: format!("{} tokens but {} emit times", tokens.len(), emit_ms.len()),
            });
        }
        let source_ms = fields[3].parse().map_err(|_| Error::Parse {
            line: line_no,
            msg: format!("bad source duration {:?}", fields[3]),
        })?;
        Ok(DecodeRecord {
            utt_id: fields[0].to_string(),
            tokens,
            emit_ms,
            source_ms,
        })
    }
}

pub fn write_decode_records(path: &std::path::Path, records: &[DecodeRecord]) -> Result<()> {
    use std::io::Write;
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        writeln!(w, "{}", r.to_line())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_decode_records(path: &std::path::Path) -> Result<Vec<DecodeRecord>> {
    use std::io::BufRead;
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(DecodeRecord::parse_line(&line, i + 1)?);
    }
    Ok(out)
}

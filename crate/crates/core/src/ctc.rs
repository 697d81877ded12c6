//! Target-side CTC: the forward-algorithm loss over encoder frames and an
//! online prefix score for joint decoding.
//!
//! Class 0 is the blank; vocabulary tokens are shifted up by one in the CTC
//! projection only. All arithmetic is in log space with a large negative
//! sentinel instead of -inf so no NaNs can propagate.
//!
//! The loss is composed from tape primitives (gather, shift, log-add-exp), so
//! its gradient comes from the same reverse pass as everything else. The
//! prefix scorer is inference-only plain arithmetic: states form a parent
//! chain per prefix, and extending the frame horizon appends columns without
//! recomputing earlier ones.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{concat_rows, Tensor, NEG_INF};

/// Blank class index in the CTC posterior.
pub const BLANK: usize = 0;

/// Shifts a model token id into its CTC class.
pub fn token_to_class(token: usize) -> usize {
    token + 1
}

fn logaddexp(a: f64, b: f64) -> f64 {
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Validates a `[T, classes]` log posterior: every row must normalize.
pub fn validate_posterior(log_probs: &Tensor) -> Result<()> {
    let shape = log_probs.shape();
    if shape.len() != 2 || shape[1] < 2 {
        return Err(Error::shape(format!("ctc posterior shape {:?}", shape)));
    }
    let classes = shape[1];
    for (r, row) in log_probs.data().chunks(classes).enumerate() {
        let lse = row.iter().fold(NEG_INF, |acc, &v| logaddexp(acc, v));
        if lse.abs() > 1e-9 {
            return Err(Error::Numeric(format!(
                "ctc posterior row {r} log-sum-exps to {lse}, not 0"
            )));
        }
    }
    Ok(())
}

/// Forward-algorithm loss and its feasibility flag.
pub struct CtcLoss {
    /// Negative log probability of all blank-augmented alignments. A
    /// detached `+inf` when infeasible (gradient-free by construction).
    pub loss: Tensor,
    pub feasible: bool,
}

fn min_frames(labels: &[usize]) -> usize {
    let repeats = labels.windows(2).filter(|w| w[0] == w[1]).count();
    labels.len() + repeats
}

/// Loss over `labels` (CTC classes, blank excluded) given per-frame log
/// posteriors of shape `[T, classes]`.
pub fn ctc_loss(log_probs: &Tensor, labels: &[usize]) -> Result<CtcLoss> {
    let shape = log_probs.shape();
    if shape.len() != 2 {
        return Err(Error::shape(format!("ctc_loss posterior shape {:?}", shape)));
    }
    let (t_max, classes) = (shape[0], shape[1]);
    if labels.is_empty() {
        return Err(Error::Config("ctc_loss needs at least one label".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l == BLANK || l >= classes) {
        return Err(Error::Config(format!("ctc label {bad} invalid for {classes} classes")));
    }
    if t_max < min_frames(labels) {
        return Ok(CtcLoss {
            loss: Tensor::scalar(f64::INFINITY),
            feasible: false,
        });
    }

    // blank-augmented label sequence: ^ a ^ b ^ ... ^
    let s_len = 2 * labels.len() + 1;
    let augmented: Vec<usize> = (0..s_len)
        .map(|s| if s % 2 == 0 { BLANK } else { labels[s / 2] })
        .collect();
    // positions where the skip transition (s-2 -> s) is allowed
    let skip_mask: Vec<f64> = (0..s_len)
        .map(|s| {
            if s >= 2 && augmented[s] != BLANK && augmented[s] != augmented[s - 2] {
                0.0
            } else {
                NEG_INF
            }
        })
        .collect();
    let skip_mask = Tensor::from_vec(skip_mask, &[s_len]);
    let neg1 = Tensor::full(&[1], NEG_INF);
    let neg2 = Tensor::full(&[2], NEG_INF);

    let label_row = |t: usize| -> Result<Tensor> {
        log_probs.row(t)?.reshape(&[classes])?.gather_rows(&augmented)
    };

    // alpha over the first frame: only the leading blank or the first label
    let first = label_row(0)?;
    let init_mask: Vec<f64> = (0..s_len).map(|s| if s < 2 { 0.0 } else { NEG_INF }).collect();
    let mut alpha = first.add(&Tensor::from_vec(init_mask, &[s_len]))?;

    for t in 1..t_max {
        let stay = alpha.clone();
        let step1 = concat_rows(&[&neg1, &alpha.slice_rows(0, s_len - 1)?])?;
        let step2 = concat_rows(&[&neg2, &alpha.slice_rows(0, s_len - 2)?])?.add(&skip_mask)?;
        alpha = stay
            .logaddexp(&step1)?
            .logaddexp(&step2)?
            .add(&label_row(t)?)?;
    }

    let tail = alpha.slice_rows(s_len - 2, s_len)?;
    let total = tail.row(0)?.reshape(&[1])?.logaddexp(&tail.row(1)?.reshape(&[1])?)?;
    Ok(CtcLoss {
        loss: total.neg()?,
        feasible: true,
    })
}

/// Streaming prefix scorer. `score(state, horizon)` is the log probability
/// that the collapsed output over frames `0..horizon` begins with the
/// state's prefix.
pub struct PrefixScorer {
    log_probs: Vec<f64>,
    frames: usize,
    classes: usize,
}

/// Handle to one prefix's dynamic-programming columns. Cloning is cheap and
/// children keep their parent alive, so extending the horizon walks the
/// chain and appends columns everywhere exactly once.
#[derive(Clone)]
pub struct PrefixState {
    node: Rc<RefCell<PrefixNode>>,
}

struct PrefixNode {
    parent: Option<PrefixState>,
    label: Option<usize>, // None for the empty prefix
    r_nonblank: Vec<f64>,
    r_blank: Vec<f64>,
    /// running log prefix probability per frame (psi at horizon t+1)
    psi: Vec<f64>,
}

impl PrefixScorer {
    pub fn new(log_probs: &Tensor) -> Result<PrefixScorer> {
        let shape = log_probs.shape();
        if shape.len() != 2 || shape[1] < 2 {
            return Err(Error::shape(format!("prefix scorer posterior {:?}", shape)));
        }
        Ok(PrefixScorer {
            log_probs: log_probs.data().to_vec(),
            frames: shape[0],
            classes: shape[1],
        })
    }

    /// Appends additional frame rows (the encoder is chunk-causal, so earlier
    /// rows never change). Existing prefix states stay valid.
    pub fn extend_frames(&mut self, log_probs: &Tensor, from: usize) -> Result<()> {
        let shape = log_probs.shape();
        if shape.len() != 2 || shape[1] != self.classes {
            return Err(Error::shape(format!("extend_frames posterior {:?}", shape)));
        }
        if from != self.frames || shape[0] < from {
            return Err(Error::Config(format!(
                "extend_frames: have {} frames, appending from {from}",
                self.frames
            )));
        }
        self.log_probs
            .extend_from_slice(&log_probs.data()[from * self.classes..]);
        self.frames = shape[0];
        Ok(())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    fn lp(&self, t: usize, class: usize) -> f64 {
        self.log_probs[t * self.classes + class]
    }

    /// State for the empty prefix.
    pub fn root(&self) -> PrefixState {
        PrefixState {
            node: Rc::new(RefCell::new(PrefixNode {
                parent: None,
                label: None,
                r_nonblank: Vec::new(),
                r_blank: Vec::new(),
                psi: Vec::new(),
            })),
        }
    }

    /// Child state for `prefix + [label]` (a CTC class, not blank).
    pub fn extend(&self, state: &PrefixState, label: usize) -> Result<PrefixState> {
        if label == BLANK || label >= self.classes {
            return Err(Error::Config(format!(
                "prefix label {label} invalid for {} classes",
                self.classes
            )));
        }
        Ok(PrefixState {
            node: Rc::new(RefCell::new(PrefixNode {
                parent: Some(state.clone()),
                label: Some(label),
                r_nonblank: Vec::new(),
                r_blank: Vec::new(),
                psi: Vec::new(),
            })),
        })
    }

    fn ensure_columns(&self, state: &PrefixState, horizon: usize) {
        let have = state.node.borrow().r_blank.len();
        if have >= horizon {
            return;
        }
        let parent = state.node.borrow().parent.clone();
        if let Some(p) = &parent {
            self.ensure_columns(p, horizon);
        }
        let mut node = state.node.borrow_mut();
        let start = node.r_blank.len();
        match node.label {
            None => {
                // empty prefix: all-blank paths
                for t in start..horizon {
                    let prev = if t == 0 { 0.0 } else { node.r_blank[t - 1] };
                    node.r_blank.push(prev + self.lp(t, BLANK));
                    node.r_nonblank.push(NEG_INF);
                    node.psi.push(0.0);
                }
            }
            Some(c) => {
                let parent = parent.expect("non-root prefix has a parent");
                let parent = parent.node.borrow();
                for t in start..horizon {
                    // probability mass that finishes the parent prefix just
                    // before frame t and emits `c` as a new symbol at t
                    let phi = if t == 0 {
                        if parent.label.is_none() { 0.0 } else { NEG_INF }
                    } else {
                        let mut m = parent.r_blank[t - 1];
                        if parent.label != Some(c) {
                            m = logaddexp(m, parent.r_nonblank[t - 1]);
                        }
                        m
                    };
                    let emit = phi + self.lp(t, c);
                    let (prev_n, prev_b, prev_psi) = if t == 0 {
                        (NEG_INF, NEG_INF, NEG_INF)
                    } else {
                        (node.r_nonblank[t - 1], node.r_blank[t - 1], node.psi[t - 1])
                    };
                    node.r_nonblank.push(logaddexp(prev_n, phi) + self.lp(t, c));
                    node.r_blank.push(logaddexp(prev_b, prev_n) + self.lp(t, BLANK));
                    node.psi.push(logaddexp(prev_psi, emit));
                }
            }
        }
    }

    /// Log probability that the output over frames `0..horizon` begins with
    /// the state's prefix.
    pub fn score(&self, state: &PrefixState, horizon: usize) -> Result<f64> {
        if horizon > self.frames {
            return Err(Error::Config(format!(
                "horizon {horizon} beyond {} frames",
                self.frames
            )));
        }
        let is_root = state.node.borrow().label.is_none();
        if is_root {
            return Ok(0.0);
        }
        if horizon == 0 {
            return Ok(NEG_INF);
        }
        self.ensure_columns(state, horizon);
        Ok(state.node.borrow().psi[horizon - 1])
    }
}

/// One-shot prefix score: log probability that the output over frames
/// `0..horizon` begins with `prefix` (CTC classes).
pub fn ctc_prefix_score(log_probs: &Tensor, prefix: &[usize], horizon: usize) -> Result<f64> {
    let scorer = PrefixScorer::new(log_probs)?;
    let mut state = scorer.root();
    for &c in prefix {
        state = scorer.extend(&state, c)?;
    }
    scorer.score(&state, horizon)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{central_diff, max_rel_err};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_posterior(rng: &mut ChaCha8Rng, t: usize, classes: usize) -> Tensor {
        let logits: Vec<f64> = (0..t * classes).map(|_| rng.gen_range(-2.0..2.0)).collect();
        Tensor::from_vec(logits, &[t, classes])
            .log_softmax_lastdim()
            .unwrap()
    }

    fn collapse(path: &[usize]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = usize::MAX;
        for &p in path {
            if p != prev && p != BLANK {
                out.push(p);
            }
            prev = p;
        }
        out
    }

    /// Sums path probabilities over every frame labelling, in linear space.
    fn enumerate_paths(log_probs: &Tensor, want: impl Fn(&[usize]) -> bool) -> f64 {
        let (t, classes) = (log_probs.shape()[0], log_probs.shape()[1]);
        let mut total = 0.0;
        let mut path = vec![0usize; t];
        loop {
            if want(&collapse(&path)) {
                let mut p = 0.0;
                for (step, &c) in path.iter().enumerate() {
                    p += log_probs.data()[step * classes + c];
                }
                total += p.exp();
            }
            // odometer increment
            let mut pos = 0;
            loop {
                if pos == t {
                    return total;
                }
                path[pos] += 1;
                if path[pos] < classes {
                    break;
                }
                path[pos] = 0;
                pos += 1;
            }
        }
    }

    #[test]
    fn single_frame_single_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let post = random_posterior(&mut rng, 1, 4);
        let out = ctc_loss(&post, &[2]).unwrap();
        assert!(out.feasible);
        assert!((out.loss.item() + post.data()[2]).abs() < 1e-12);
    }

    #[test]
    fn two_frames_matches_hand_formula() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let post = random_posterior(&mut rng, 2, 3);
        let p = |t: usize, c: usize| post.data()[t * 3 + c].exp();
        let a = 1;
        let expected = p(0, a) * p(1, a) + p(0, a) * p(1, BLANK) + p(0, BLANK) * p(1, a);
        let out = ctc_loss(&post, &[a]).unwrap();
        assert!((out.loss.item() + expected.ln()).abs() < 1e-12);
    }

    #[test]
    fn loss_matches_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..40 {
            let t = rng.gen_range(1..=6);
            let classes = rng.gen_range(2..=4);
            let l = rng.gen_range(1..=3.min(t));
            let labels: Vec<usize> = (0..l).map(|_| rng.gen_range(1..classes)).collect();
            let post = random_posterior(&mut rng, t, classes);
            let out = ctc_loss(&post, &labels).unwrap();
            let oracle = enumerate_paths(&post, |c| c == labels.as_slice());
            if t < min_frames(&labels) {
                assert!(!out.feasible);
                assert!(oracle == 0.0);
                continue;
            }
            assert!(
                (out.loss.item() + oracle.ln()).abs() < 1e-9,
                "loss {} vs oracle {}",
                out.loss.item(),
                -oracle.ln()
            );
        }
    }

    #[test]
    fn infeasible_labels_give_infinite_detached_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let post = random_posterior(&mut rng, 2, 3);
        let out = ctc_loss(&post, &[1, 1, 2]).unwrap(); // needs >= 4 frames
        assert!(!out.feasible);
        assert!(out.loss.item().is_infinite());
        assert!(!out.loss.is_taped());
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let t = 5;
        let classes = 4;
        let labels = vec![2, 1];
        let logits0: Vec<f64> = (0..t * classes).map(|_| rng.gen_range(-1.0..1.0)).collect();

        let tape = crate::tensor::Tape::new();
        let logits = tape.watch(&Tensor::from_vec(logits0.clone(), &[t, classes]));
        let loss = ctc_loss(&logits.log_softmax_lastdim().unwrap(), &labels)
            .unwrap()
            .loss;
        loss.backward().unwrap();
        let analytic = logits.grad().unwrap();

        let mut eval = |data: &[f64]| -> crate::error::Result<f64> {
            let post = Tensor::from_vec(data.to_vec(), &[t, classes]).log_softmax_lastdim()?;
            Ok(ctc_loss(&post, &labels)?.loss.item())
        };
        let numeric = central_diff(&mut eval, &logits0, 1e-5).unwrap();
        let err = max_rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "ctc grad rel err {err}");
    }

    #[test]
    fn empty_prefix_scores_log_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let post = random_posterior(&mut rng, 4, 3);
        assert_eq!(ctc_prefix_score(&post, &[], 3).unwrap(), 0.0);
        assert_eq!(ctc_prefix_score(&post, &[], 0).unwrap(), 0.0);
    }

    #[test]
    fn single_frame_prefix_score() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let post = random_posterior(&mut rng, 3, 3);
        let s = ctc_prefix_score(&post, &[1], 1).unwrap();
        assert!((s - post.data()[1]).abs() < 1e-12);
    }

    #[test]
    fn prefix_scores_match_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..40 {
            let t = rng.gen_range(1..=5);
            let classes = rng.gen_range(2..=4);
            let plen = rng.gen_range(1..=2);
            let prefix: Vec<usize> = (0..plen).map(|_| rng.gen_range(1..classes)).collect();
            let horizon = rng.gen_range(0..=t);
            let post = random_posterior(&mut rng, t, classes);
            let s = ctc_prefix_score(&post, &prefix, horizon).unwrap();
            let truncated = post.slice_rows(0, horizon.max(1)).unwrap();
            let oracle = if horizon == 0 {
                0.0
            } else {
                enumerate_paths(&truncated, |c| c.starts_with(&prefix))
            };
            if oracle == 0.0 {
                assert!(s <= NEG_INF * 0.5, "score {s} for impossible prefix");
            } else {
                assert!((s - oracle.ln()).abs() < 1e-9, "score {s} vs {}", oracle.ln());
            }
        }
    }

    #[test]
    fn horizon_extension_never_recomputes_columns() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let post = random_posterior(&mut rng, 6, 3);
        let mut scorer = PrefixScorer::new(&post.slice_rows(0, 3).unwrap()).unwrap();
        let state = scorer.extend(&scorer.root(), 1).unwrap();
        let early = scorer.score(&state, 3).unwrap();
        scorer.extend_frames(&post, 3).unwrap();
        let late = scorer.score(&state, 6).unwrap();
        let oneshot_early = ctc_prefix_score(&post, &[1], 3).unwrap();
        let oneshot_late = ctc_prefix_score(&post, &[1], 6).unwrap();
        assert_eq!(early, oneshot_early);
        assert_eq!(late, oneshot_late);
    }

    mod properties {
        use super::random_posterior;
        use crate::ctc::PrefixScorer;
        use proptest::prelude::*;
        use rand::{Rng as _, SeedableRng as _};
        use rand_chacha::ChaCha8Rng;

        proptest! {
            #[test]
            fn prefix_extension_never_increases_score(seed in 0u64..200) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let t = rng.gen_range(1..6);
                let classes = rng.gen_range(2..5);
                let post = random_posterior(&mut rng, t, classes);
                let scorer = PrefixScorer::new(&post).unwrap();
                let base = scorer.root();
                let a = rng.gen_range(1..classes);
                let ext = scorer.extend(&base, a).unwrap();
                let horizon = rng.gen_range(1..=t);
                let s_base = scorer.score(&base, horizon).unwrap();
                let s_ext = scorer.score(&ext, horizon).unwrap();
                prop_assert!(s_ext <= s_base + 1e-9);

                let b = rng.gen_range(1..classes);
                let ext2 = scorer.extend(&ext, b).unwrap();
                let s_ext2 = scorer.score(&ext2, horizon).unwrap();
                prop_assert!(s_ext2 <= s_ext + 1e-9);
            }
        }
    }
}

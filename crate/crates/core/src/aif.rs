//! Integrate-and-fire emission: smoothed frame weights accumulate from left
//! to right, and token `i` fires at the first frame whose running sum
//! strictly exceeds the decision threshold `i + epsilon`. The frames up to
//! the boundary are summarized by attention with the prediction-network
//! query. Thresholds are compared with strict `>`, ties do not fire, and the
//! same convention is used at training and decoding time.
//!
//! Boundary positions are discrete and receive no gradient; learning signal
//! reaches the weights through the quantity loss and through the extraction
//! attention.

use crate::error::{Error, Result};
use crate::model::{multi_head_attention, ModelConfig, ParamView};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExtractMode {
    /// Multi-head attention with dedicated projections (the default).
    MultiHead,
    /// Plain dot-product attention over raw encoder rows (ablation mode).
    DotProduct,
}

impl std::str::FromStr for ExtractMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<ExtractMode> {
        match s {
            "multihead" => Ok(ExtractMode::MultiHead),
            "dotproduct" => Ok(ExtractMode::DotProduct),
            other => Err(Error::Config(format!(
                "unknown aif mode {other:?} (expected multihead|dotproduct)"
            ))),
        }
    }
}

impl std::fmt::Display for ExtractMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExtractMode::MultiHead => "multihead",
            ExtractMode::DotProduct => "dotproduct",
        })
    }
}

/// Per-frame emission weights and their running sums. `alpha` stays on the
/// tape (the quantity loss differentiates through it); `cumsum` is a detached
/// copy used for the discrete boundary decisions.
pub struct FrameWeights {
    pub alpha: Tensor,
    pub cumsum: Vec<f64>,
    pub delta: f64,
}

impl FrameWeights {
    pub fn frames(&self) -> usize {
        self.cumsum.len()
    }

    pub fn total(&self) -> f64 {
        self.cumsum.last().copied().unwrap_or(0.0)
    }
}

/// `alpha_t = scale * ((1 - delta) * sigmoid(e[t, d-1]) + delta)` from the
/// last encoder channel. `scale` compensates a changed encoder frame rate
/// and defaults to 1.
pub fn frame_weights(e: &Tensor, delta: f64, scale: f64) -> Result<FrameWeights> {
    if !(0.0..1.0).contains(&delta) {
        return Err(Error::Config(format!("delta {delta} outside [0, 1)")));
    }
    if scale <= 0.0 {
        return Err(Error::Config(format!("alpha scale {scale} must be positive")));
    }
    let d = e.last_dim();
    let t = e.shape()[0];
    let raw = e.slice_cols(d - 1, d)?.reshape(&[t])?;
    let mut alpha = raw.sigmoid()?.affine(1.0 - delta, delta)?;
    if scale != 1.0 {
        alpha = alpha.affine(scale, 0.0)?;
    }
    let mut cumsum = Vec::with_capacity(t);
    let mut acc = 0.0;
    for &a in alpha.data() {
        acc += a;
        cumsum.push(acc);
    }
    Ok(FrameWeights {
        alpha,
        cumsum,
        delta,
    })
}

/// First frame index whose cumulative weight strictly exceeds
/// `token_index + epsilon`, if the threshold is crossed within the available
/// frames. The returned value is the boundary `T_i` (the crossing frame
/// minus one), so it may be 0.
pub fn find_boundary_within(cumsum: &[f64], token_index: usize, epsilon: f64) -> Result<Option<usize>> {
    if token_index < 1 {
        return Err(Error::Config("token index must be >= 1".into()));
    }
    let threshold = token_index as f64 + epsilon;
    let idx = cumsum.partition_point(|&c| c <= threshold);
    Ok(if idx == cumsum.len() { None } else { Some(idx) })
}

/// The boundary `T_i` for token `i`: threshold not reached within the input
/// means the whole utterance is used (`T_i = T`).
pub fn find_boundary(w: &FrameWeights, token_index: usize, epsilon: f64) -> Result<usize> {
    Ok(find_boundary_within(&w.cumsum, token_index, epsilon)?.unwrap_or(w.frames()))
}

/// Whether the token just emitted is the last one of the current chunk:
/// true iff the next token's threshold cannot be strictly exceeded by the
/// weight accumulated up to the chunk end.
pub fn is_last_in_chunk(cumsum_at_chunk_end: f64, next_token_index: usize, epsilon: f64) -> bool {
    cumsum_at_chunk_end <= next_token_index as f64 + epsilon
}

/// Label-level representation for one token: attention of the query over
/// `E[0..T_i]`. A zero boundary falls back to the first frame so the key set
/// is never empty (reachable only with epsilon <= alpha_1 - 1).
pub fn extract(
    view: &ParamView,
    cfg: &ModelConfig,
    q: &Tensor,
    e: &Tensor,
    t_i: usize,
    mode: ExtractMode,
) -> Result<Tensor> {
    let t = e.shape()[0];
    if t_i > t {
        return Err(Error::shape(format!("extract: boundary {t_i} > {t} frames")));
    }
    let keys = e.slice_rows(0, t_i.max(1))?;
    match mode {
        ExtractMode::MultiHead => {
            multi_head_attention(q, &keys, None, cfg.n_heads, &view.attn("aif.attn"))
        }
        ExtractMode::DotProduct => {
            let scores = q.matmul(&keys.transpose()?)?;
            scores.softmax_lastdim()?.matmul(&keys)
        }
    }
}

/// `|sum(alpha) - L|`, the sentence-level quantity loss.
pub fn quantity_loss(w: &FrameWeights, target_len: usize) -> Result<Tensor> {
    if target_len < 1 {
        return Err(Error::Config("quantity loss needs target length >= 1".into()));
    }
    w.alpha.sum()?.affine(1.0, -(target_len as f64))?.abs()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_tensor_grad, DEFAULT_H};
    use crate::model::ModelParams;
    use crate::tensor::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn weights_from_alpha(alpha: &[f64]) -> FrameWeights {
        let mut cumsum = Vec::new();
        let mut acc = 0.0;
        for &a in alpha {
            acc += a;
            cumsum.push(acc);
        }
        FrameWeights {
            alpha: Tensor::from_vec(alpha.to_vec(), &[alpha.len()]),
            cumsum,
            delta: 0.0,
        }
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            d_model: 8,
            n_heads: 2,
            ff_dim: 12,
            enc_layers: 1,
            pred_layers: 1,
            chunk_size: 4,
            vocab_size: 6,
            feat_dim: 4,
            query_layer: 0,
        }
    }

    #[test]
    fn frame_weight_formula() {
        // zero channel with delta = 0.05
        let e = Tensor::from_vec(vec![1.0, 0.0, 2.0, 0.0], &[2, 2]);
        let w = frame_weights(&e, 0.05, 1.0).unwrap();
        assert!((w.alpha.data()[0] - 0.525).abs() < 1e-15);
        assert!((w.alpha.data()[1] - 0.525).abs() < 1e-15);

        // saturation toward delta
        let e = Tensor::from_vec(vec![0.0, -50.0], &[1, 2]);
        let w = frame_weights(&e, 0.05, 1.0).unwrap();
        assert!((w.alpha.data()[0] - 0.05).abs() < 1e-15);

        // delta = 0 reduces to the plain sigmoid
        let e = Tensor::from_vec(vec![0.0, 0.3], &[1, 2]);
        let w = frame_weights(&e, 0.0, 1.0).unwrap();
        let expected = 1.0 / (1.0 + (-0.3f64).exp());
        assert_eq!(w.alpha.data()[0], expected);
    }

    #[test]
    fn frame_weight_scale_multiplier() {
        let e = Tensor::from_vec(vec![0.0, 0.0], &[1, 2]);
        let w = frame_weights(&e, 0.05, 2.0).unwrap();
        assert!((w.alpha.data()[0] - 1.05).abs() < 1e-15);
    }

    #[test]
    fn unit_weights_give_boundary_equal_to_index() {
        let w = weights_from_alpha(&[1.0; 8]);
        // cumsum = 1,2,3,...; first strictly above 3 is t=4, so T_3 = 3
        assert_eq!(find_boundary(&w, 3, 0.0).unwrap(), 3);
    }

    #[test]
    fn worked_boundary_example() {
        let w = weights_from_alpha(&[0.4, 0.3, 0.3, 0.4, 0.3, 0.3, 0.3]);
        assert!((w.total() - 2.3).abs() < 1e-12);
        // i=2: first cumsum > 2 is frame 7, so T_2 = 6
        assert_eq!(find_boundary(&w, 2, 0.0).unwrap(), 6);
        // i=3: threshold never crossed within these frames -> T_3 = T
        assert_eq!(find_boundary(&w, 3, 0.0).unwrap(), 7);
        assert_eq!(find_boundary_within(&w.cumsum, 3, 0.0).unwrap(), None);
        // i=1 at eps=0 fires at frame 4; at eps=1 it needs cumsum > 2
        assert_eq!(find_boundary(&w, 1, 0.0).unwrap(), 3);
        assert_eq!(find_boundary(&w, 1, 1.0).unwrap(), 6);
    }

    #[test]
    fn tie_at_threshold_does_not_fire() {
        let w = weights_from_alpha(&[0.5, 0.5, 0.5]);
        // cumsum hits exactly 1.0 at frame 2; strict > required
        assert_eq!(find_boundary(&w, 1, 0.0).unwrap(), 2);
    }

    #[test]
    fn last_in_chunk_convention() {
        assert!(is_last_in_chunk(2.3, 3, 0.0));
        assert!(!is_last_in_chunk(3.5, 3, 0.0));
        // exactly equal: strict exceed needed to fire, so this is the last
        assert!(is_last_in_chunk(3.0, 3, 0.0));
    }

    #[test]
    fn boundary_matches_linear_scan_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for _ in 0..1000 {
            let t = rng.gen_range(1..40);
            let alpha: Vec<f64> = (0..t).map(|_| rng.gen_range(0.05..1.0)).collect();
            let w = weights_from_alpha(&alpha);
            let i = rng.gen_range(1..12);
            let eps = rng.gen_range(-1.0..6.0);
            let theta = i as f64 + eps;
            // independent linear scan
            let mut oracle = w.frames();
            for (idx, &c) in w.cumsum.iter().enumerate() {
                if c > theta {
                    oracle = idx;
                    break;
                }
            }
            assert_eq!(find_boundary(&w, i, eps).unwrap(), oracle);
        }
    }

    #[test]
    fn quantity_loss_values_and_gradient() {
        let w = weights_from_alpha(&[1.0, 1.0, 1.0]);
        assert_eq!(quantity_loss(&w, 3).unwrap().item(), 0.0);

        let w = weights_from_alpha(&[1.1, 1.1, 1.1, 1.1]); // sum 4.4
        assert!((quantity_loss(&w, 5).unwrap().item() - 0.6).abs() < 1e-12);

        // gradient +-1 per alpha away from the kink, against finite differences
        let alpha0 = [0.3, 0.5, 0.7];
        let err = check_tensor_grad(
            &alpha0,
            &[3],
            &|a| a.sum()?.affine(1.0, -5.0)?.abs(),
            DEFAULT_H,
        )
        .unwrap();
        assert!(err < 1e-8, "quantity grad rel err {err}");

        let tape = Tape::new();
        let a = tape.watch(&Tensor::from_vec(alpha0.to_vec(), &[3]));
        let w = FrameWeights {
            alpha: a.clone(),
            cumsum: vec![0.3, 0.8, 1.5],
            delta: 0.0,
        };
        quantity_loss(&w, 5).unwrap().backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![-1.0, -1.0, -1.0]); // sum below target
    }

    #[test]
    fn frame_weights_differentiate_through_encoder_channel() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let e0: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let err = check_tensor_grad(
            &e0,
            &[4, 3],
            &|e| {
                let w = frame_weights(e, 0.05, 1.0)?;
                quantity_loss(&w, 2)
            },
            DEFAULT_H,
        )
        .unwrap();
        assert!(err < 1e-6, "frame weight grad rel err {err}");
    }

    #[test]
    fn extraction_ignores_frames_beyond_boundary() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 3).unwrap();
        let view = params.view();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let e_data: Vec<f64> = (0..6 * cfg.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = Tensor::from_vec(e_data.clone(), &[6, cfg.d_model]);
        let q_data: Vec<f64> = (0..cfg.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q = Tensor::from_vec(q_data, &[1, cfg.d_model]);

        for mode in [ExtractMode::MultiHead, ExtractMode::DotProduct] {
            let base = extract(&view, &cfg, &q, &e, 3, mode).unwrap();
            let mut tampered = e_data.clone();
            for v in &mut tampered[3 * cfg.d_model..] {
                *v += 10.0;
            }
            let e2 = Tensor::from_vec(tampered, &[6, cfg.d_model]);
            let out = extract(&view, &cfg, &q, &e2, 3, mode).unwrap();
            assert_eq!(base.data(), out.data());
        }
    }

    #[test]
    fn extraction_full_boundary_equals_whole_utterance_attention() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 13).unwrap();
        let view = params.view();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let e_data: Vec<f64> = (0..5 * cfg.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = Tensor::from_vec(e_data, &[5, cfg.d_model]);
        let q_data: Vec<f64> = (0..cfg.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q = Tensor::from_vec(q_data, &[1, cfg.d_model]);

        let bounded = extract(&view, &cfg, &q, &e, 5, ExtractMode::MultiHead).unwrap();
        let direct = multi_head_attention(&q, &e, None, cfg.n_heads, &view.attn("aif.attn")).unwrap();
        assert_eq!(bounded.data(), direct.data());
    }

    #[test]
    fn single_frame_boundary_is_a_point_mass() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 21).unwrap();
        let view = params.view();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let e_data: Vec<f64> = (0..4 * cfg.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let e = Tensor::from_vec(e_data.clone(), &[4, cfg.d_model]);
        let q_data: Vec<f64> = (0..cfg.d_model).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let q = Tensor::from_vec(q_data, &[1, cfg.d_model]);

        // dot-product over a single key collapses to that encoder row
        let out = extract(&view, &cfg, &q, &e, 1, ExtractMode::DotProduct).unwrap();
        assert_eq!(out.data(), &e.data()[..cfg.d_model]);

        // boundary 0 floors to the first frame
        let floor = extract(&view, &cfg, &q, &e, 0, ExtractMode::DotProduct).unwrap();
        assert_eq!(floor.data(), out.data());
    }

    #[test]
    fn dot_product_attention_concentrates_with_scale() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 27).unwrap();
        let view = params.view();
        let d = cfg.d_model;
        // orthonormal-ish rows: unit basis vectors
        let mut e_data = vec![0.0; 3 * d];
        for r in 0..3 {
            e_data[r * d + r] = 1.0;
        }
        let e = Tensor::from_vec(e_data, &[3, d]);
        for &scale in &[1.0, 10.0, 100.0] {
            let mut q_data = vec![0.0; d];
            q_data[1] = scale; // aligned with e_2
            let q = Tensor::from_vec(q_data, &[1, d]);
            let out = extract(&view, &cfg, &q, &e, 3, ExtractMode::DotProduct).unwrap();
            let weight_on_e2 = out.data()[1];
            if scale >= 100.0 {
                assert!(weight_on_e2 > 1.0 - 1e-12);
            }
        }
    }

    #[test]
    fn boundary_beyond_input_is_an_error() {
        let cfg = tiny_cfg();
        let params = ModelParams::init(&cfg, 31).unwrap();
        let view = params.view();
        let e = Tensor::zeros(&[3, cfg.d_model]);
        let q = Tensor::zeros(&[1, cfg.d_model]);
        assert!(extract(&view, &cfg, &q, &e, 4, ExtractMode::MultiHead).is_err());
    }

    mod properties {
        use super::weights_from_alpha;
        use crate::aif::{find_boundary, frame_weights};
        use crate::tensor::Tensor;
        use proptest::prelude::*;
        use rand::{Rng as _, SeedableRng as _};
        use rand_chacha::ChaCha8Rng;

        proptest! {
            #[test]
            fn boundaries_monotone_in_token_index_and_epsilon(seed in 0u64..400) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let t = rng.gen_range(1..30);
                let alpha: Vec<f64> = (0..t).map(|_| rng.gen_range(0.05..1.0)).collect();
                let w = weights_from_alpha(&alpha);
                let eps = rng.gen_range(-1.0..4.0);
                let mut prev = 0usize;
                for i in 1..8 {
                    let b = find_boundary(&w, i, eps).unwrap();
                    prop_assert!(b >= prev, "T_i not monotone in i");
                    prev = b;
                    let wider = find_boundary(&w, i, eps + rng.gen_range(0.0..3.0)).unwrap();
                    prop_assert!(wider >= b, "T_i not monotone in epsilon");
                }
            }

            #[test]
            fn alpha_stays_within_bounds(seed in 0u64..400) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let t = rng.gen_range(1..20);
                let d = 4;
                let data: Vec<f64> = (0..t * d).map(|_| rng.gen_range(-30.0..30.0)).collect();
                let e = Tensor::from_vec(data, &[t, d]);
                let delta = 0.05;
                let w = frame_weights(&e, delta, 1.0).unwrap();
                for &a in w.alpha.data() {
                    prop_assert!((delta..1.0).contains(&a), "alpha {a} outside [delta, 1)");
                }
                for (i, c) in w.cumsum.iter().enumerate() {
                    let direct: f64 = w.alpha.data()[..=i].iter().sum();
                    prop_assert!((c - direct).abs() < 1e-12);
                }
            }
        }
    }
}

//! Network pieces: chunk-masked streaming Transformer encoder, unidirectional
//! Transformer prediction network (an explicit language model), and the
//! additive joint network.
//!
//! The encoder's final projection is a plain linear layer — no trailing
//! normalization — because the last output channel doubles as the raw
//! integrate-and-fire score and must stay unconstrained.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{additive_mask, ParamStore, Tape, Tensor};

/// Beginning-of-sequence token id.
pub const BOS: usize = 0;
/// End-of-sequence token id. Real target tokens start after it.
pub const EOS: usize = 1;
/// First id usable for actual target tokens.
pub const TOKEN_OFFSET: usize = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub ff_dim: usize,
    pub enc_layers: usize,
    pub pred_layers: usize,
    pub chunk_size: usize,
    pub vocab_size: usize,
    pub feat_dim: usize,
    /// Prediction-network sub-layer whose output is the extraction query.
    pub query_layer: usize,
}

impl ModelConfig {
    pub fn toy(vocab_size: usize, feat_dim: usize) -> ModelConfig {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            ff_dim: 128,
            enc_layers: 2,
            pred_layers: 2,
            chunk_size: 8,
            vocab_size,
            feat_dim,
            query_layer: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.chunk_size == 0 {
            return Err(Error::Config("chunk_size must be >= 1".into()));
        }
        if self.query_layer >= self.pred_layers {
            return Err(Error::Config(format!(
                "query_layer {} out of range for {} prediction layers",
                self.query_layer, self.pred_layers
            )));
        }
        if self.enc_layers == 0 || self.pred_layers == 0 {
            return Err(Error::Config("need at least one layer per stack".into()));
        }
        if self.vocab_size <= TOKEN_OFFSET {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room for real tokens",
                self.vocab_size
            )));
        }
        if self.feat_dim == 0 {
            return Err(Error::Config("feat_dim must be >= 1".into()));
        }
        Ok(())
    }
}

/// All trainable parameters, addressable by path, plus the freeze mask the
/// optimizer consults.
pub struct ModelParams {
    pub store: ParamStore,
    frozen: BTreeSet<String>,
}

impl ModelParams {
    /// Fresh parameters, uniform in +-1/sqrt(fan_in), deterministic per seed.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<ModelParams> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = cfg.d_model;

        let matrix = |store: &mut ParamStore, name: String, rows: usize, cols: usize, rng: &mut ChaCha8Rng| -> Result<()> {
            let bound = 1.0 / (rows as f64).sqrt();
            let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
            store.insert(&name, Tensor::from_vec(data, &[rows, cols]))
        };
        let vector = |store: &mut ParamStore, name: String, n: usize, v: f64| -> Result<()> {
            store.insert(&name, Tensor::full(&[n], v))
        };

        let layer_stack = |store: &mut ParamStore, stack: &str, layers: usize, rng: &mut ChaCha8Rng| -> Result<()> {
            for l in 0..layers {
                let p = format!("{stack}.l{l}");
                vector(store, format!("{p}.ln1.g"), d, 1.0)?;
                vector(store, format!("{p}.ln1.b"), d, 0.0)?;
                for w in ["wq", "wk", "wv", "wo"] {
                    matrix(store, format!("{p}.attn.{w}"), d, d, rng)?;
                }
                for b in ["bq", "bk", "bv", "bo"] {
                    vector(store, format!("{p}.attn.{b}"), d, 0.0)?;
                }
                vector(store, format!("{p}.ln2.g"), d, 1.0)?;
                vector(store, format!("{p}.ln2.b"), d, 0.0)?;
                matrix(store, format!("{p}.ffn.w1"), d, cfg.ff_dim, rng)?;
                vector(store, format!("{p}.ffn.b1"), cfg.ff_dim, 0.0)?;
                matrix(store, format!("{p}.ffn.w2"), cfg.ff_dim, d, rng)?;
                vector(store, format!("{p}.ffn.b2"), d, 0.0)?;
            }
            Ok(())
        };

        matrix(&mut store, "enc.in.w".into(), cfg.feat_dim, d, &mut rng)?;
        vector(&mut store, "enc.in.b".into(), d, 0.0)?;
        layer_stack(&mut store, "enc", cfg.enc_layers, &mut rng)?;
        matrix(&mut store, "enc.out.w".into(), d, d, &mut rng)?;
        vector(&mut store, "enc.out.b".into(), d, 0.0)?;

        matrix(&mut store, "pred.embed".into(), cfg.vocab_size, d, &mut rng)?;
        layer_stack(&mut store, "pred", cfg.pred_layers, &mut rng)?;
        vector(&mut store, "pred.lnf.g".into(), d, 1.0)?;
        vector(&mut store, "pred.lnf.b".into(), d, 0.0)?;

        for w in ["wq", "wk", "wv", "wo"] {
            matrix(&mut store, format!("aif.attn.{w}"), d, d, &mut rng)?;
        }
        for b in ["bq", "bk", "bv", "bo"] {
            vector(&mut store, format!("aif.attn.{b}"), d, 0.0)?;
        }

        // Bias-free joint projections keep the additive decomposition exact;
        // fc_p doubles as the LM head.
        matrix(&mut store, "joint.fc_a.w".into(), d, cfg.vocab_size, &mut rng)?;
        matrix(&mut store, "joint.fc_p.w".into(), d, cfg.vocab_size, &mut rng)?;

        matrix(&mut store, "ctc.proj.w".into(), d, cfg.vocab_size + 1, &mut rng)?;
        vector(&mut store, "ctc.proj.b".into(), cfg.vocab_size + 1, 0.0)?;

        Ok(ModelParams {
            store,
            frozen: BTreeSet::new(),
        })
    }

    pub fn load(path: &Path) -> Result<ModelParams> {
        Ok(ModelParams {
            store: ParamStore::load(path)?,
            frozen: BTreeSet::new(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.store.save(path)
    }

    /// Marks every parameter whose path starts with one of `prefixes`.
    pub fn freeze_prefixes(&mut self, prefixes: &[String]) {
        for name in self.store.names() {
            if prefixes.iter().any(|p| !p.is_empty() && name.starts_with(p.as_str())) {
                self.frozen.insert(name.to_string());
            }
        }
    }

    pub fn clear_freeze(&mut self) {
        self.frozen.clear();
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.contains(name)
    }

    pub fn frozen_names(&self) -> impl Iterator<Item = &str> {
        self.frozen.iter().map(String::as_str)
    }

    /// Copies values for every name present in `other` (shapes must match).
    pub fn adopt(&mut self, other: &ParamStore) -> Result<()> {
        for (name, t) in other.iter() {
            if self.store.contains(name) {
                self.store.set_data(name, t.data().to_vec())?;
            } else {
                return Err(Error::Checkpoint(format!(
                    "checkpoint parameter {name} not in model"
                )));
            }
        }
        Ok(())
    }

    /// Raw (inference) view of the parameters.
    pub fn view(&self) -> ParamView {
        ParamView {
            map: self
                .store
                .iter()
                .map(|(n, t)| (n.to_string(), t.clone()))
                .collect(),
        }
    }

    /// View whose tensors are watched leaves of `tape`, so gradients can be
    /// read back per parameter after backward.
    pub fn watched_view(&self, tape: &Tape) -> ParamView {
        ParamView {
            map: self
                .store
                .iter()
                .map(|(n, t)| (n.to_string(), tape.watch(t)))
                .collect(),
        }
    }
}

/// Name-addressable snapshot of parameters used by the forward functions.
pub struct ParamView {
    map: HashMap<String, Tensor>,
}

impl ParamView {
    pub fn p(&self, name: &str) -> &Tensor {
        self.map
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn grad(&self, name: &str) -> Option<Vec<f64>> {
        self.map.get(name).and_then(|t| t.grad())
    }

    pub(crate) fn attn(&self, prefix: &str) -> AttnParams<'_> {
        AttnParams {
            wq: self.p(&format!("{prefix}.wq")),
            bq: self.p(&format!("{prefix}.bq")),
            wk: self.p(&format!("{prefix}.wk")),
            bk: self.p(&format!("{prefix}.bk")),
            wv: self.p(&format!("{prefix}.wv")),
            bv: self.p(&format!("{prefix}.bv")),
            wo: self.p(&format!("{prefix}.wo")),
            bo: self.p(&format!("{prefix}.bo")),
        }
    }
}

pub(crate) struct AttnParams<'a> {
    pub wq: &'a Tensor,
    pub bq: &'a Tensor,
    pub wk: &'a Tensor,
    pub bk: &'a Tensor,
    pub wv: &'a Tensor,
    pub bv: &'a Tensor,
    pub wo: &'a Tensor,
    pub bo: &'a Tensor,
}

/// Chunk attention rule: position `t` may attend `t'` iff `t'` is in the same
/// chunk or an earlier one. `c == 1` degenerates to the causal mask, `c >= t`
/// to full attention.
pub fn chunk_mask(t: usize, c: usize) -> Vec<bool> {
    assert!(t >= 1 && c >= 1);
    let mut mask = vec![false; t * t];
    for q in 0..t {
        let q_chunk = q / c;
        for k in 0..t {
            mask[q * t + k] = k / c <= q_chunk;
        }
    }
    mask
}

/// Sinusoidal positional encodings for `n` positions.
pub fn positional_encoding(n: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; n * d];
    for pos in 0..n {
        for i in 0..d {
            let exponent = 2.0 * ((i / 2) as f64) / d as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_vec(data, &[n, d])
}

fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    x.matmul(w)?.add_bias(b)
}

/// Scaled multi-head attention of `q_in` rows over `kv_in` rows.
pub(crate) fn multi_head_attention(
    q_in: &Tensor,
    kv_in: &Tensor,
    mask: Option<&Tensor>,
    n_heads: usize,
    p: &AttnParams<'_>,
) -> Result<Tensor> {
    let d = q_in.last_dim();
    let dh = d / n_heads;
    let q = linear(q_in, p.wq, p.bq)?;
    let k = linear(kv_in, p.wk, p.bk)?;
    let v = linear(kv_in, p.wv, p.bv)?;
    let scale = 1.0 / (dh as f64).sqrt();

    let mut heads = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let qh = q.slice_cols(h * dh, (h + 1) * dh)?;
        let kh = k.slice_cols(h * dh, (h + 1) * dh)?;
        let vh = v.slice_cols(h * dh, (h + 1) * dh)?;
        let mut scores = qh.matmul(&kh.transpose()?)?.affine(scale, 0.0)?;
        if let Some(m) = mask {
            scores = scores.add(m)?;
        }
        let probs = scores.softmax_lastdim()?;
        heads.push(probs.matmul(&vh)?);
    }
    let refs: Vec<&Tensor> = heads.iter().collect();
    let ctx = crate::tensor::concat_cols(&refs)?;
    linear(&ctx, p.wo, p.bo)
}

/// Pre-norm Transformer block: self-attention then feed-forward, both with
/// residual connections.
fn transformer_block(
    view: &ParamView,
    prefix: &str,
    x: &Tensor,
    mask: Option<&Tensor>,
    n_heads: usize,
) -> Result<Tensor> {
    let h = x.layer_norm(view.p(&format!("{prefix}.ln1.g")), view.p(&format!("{prefix}.ln1.b")))?;
    let attn = multi_head_attention(&h, &h, mask, n_heads, &view.attn(&format!("{prefix}.attn")))?;
    let x = x.add(&attn)?;
    let h = x.layer_norm(view.p(&format!("{prefix}.ln2.g")), view.p(&format!("{prefix}.ln2.b")))?;
    let ff = linear(&h, view.p(&format!("{prefix}.ffn.w1")), view.p(&format!("{prefix}.ffn.b1")))?
        .relu()?;
    let ff = linear(&ff, view.p(&format!("{prefix}.ffn.w2")), view.p(&format!("{prefix}.ffn.b2")))?;
    x.add(&ff)
}

/// Encodes `frames` (T x feat_dim) into frame representations E (T x d_model)
/// under the chunk mask.
pub fn encode(view: &ParamView, cfg: &ModelConfig, frames: &Tensor) -> Result<Tensor> {
    let shape = frames.shape();
    if shape.len() != 2 || shape[1] != cfg.feat_dim {
        return Err(Error::shape(format!(
            "encode: frames {:?}, expected [T, {}]",
            shape, cfg.feat_dim
        )));
    }
    let t = shape[0];
    let mask = additive_mask(&chunk_mask(t, cfg.chunk_size), t, t);
    let pe = positional_encoding(t, cfg.d_model);
    let mut x = linear(frames, view.p("enc.in.w"), view.p("enc.in.b"))?.add(&pe)?;
    for l in 0..cfg.enc_layers {
        x = transformer_block(view, &format!("enc.l{l}"), &x, Some(&mask), cfg.n_heads)?;
    }
    linear(&x, view.p("enc.out.w"), view.p("enc.out.b"))
}

fn check_tokens(tokens: &[usize], vocab: usize) -> Result<()> {
    if let Some(&bad) = tokens.iter().find(|&&t| t >= vocab) {
        return Err(Error::Vocab {
            token: bad,
            vocab,
        });
    }
    Ok(())
}

/// Full prediction-network pass over `tokens` (BOS first). Row `i` of the
/// outputs is conditioned on tokens `0..=i`.
pub struct PredOutputs {
    /// Final representations, one row per position.
    pub h_pred: Tensor,
    /// Extraction queries (output of the configured sub-layer).
    pub q: Tensor,
}

pub fn predict_full(view: &ParamView, cfg: &ModelConfig, tokens: &[usize]) -> Result<PredOutputs> {
    if tokens.is_empty() {
        return Err(Error::shape("predict_full on empty token sequence"));
    }
    check_tokens(tokens, cfg.vocab_size)?;
    let n = tokens.len();
    let pe = positional_encoding(n, cfg.d_model);
    let mask = additive_mask(&chunk_mask(n, 1), n, n); // causal
    let mut x = view.p("pred.embed").gather_rows(tokens)?.add(&pe)?;
    let mut q = None;
    for l in 0..cfg.pred_layers {
        x = transformer_block(view, &format!("pred.l{l}"), &x, Some(&mask), cfg.n_heads)?;
        if l == cfg.query_layer {
            q = Some(x.clone());
        }
    }
    let h_pred = x.layer_norm(view.p("pred.lnf.g"), view.p("pred.lnf.b"))?;
    Ok(PredOutputs {
        h_pred,
        q: q.expect("query_layer validated against pred_layers"),
    })
}

/// Incremental prediction-network state. Extending by one token costs one
/// row of computation and reproduces `predict_full` exactly.
#[derive(Clone)]
pub struct PredState {
    len: usize,
    layers: Vec<LayerKv>,
    h_pred: Tensor,
    q: Tensor,
}

#[derive(Clone)]
struct LayerKv {
    k: Option<Tensor>,
    v: Option<Tensor>,
}

impl PredState {
    /// Starts a sequence with BOS; outputs then condition the first token.
    pub fn start(view: &ParamView, cfg: &ModelConfig) -> Result<PredState> {
        let mut state = PredState {
            len: 0,
            layers: vec![LayerKv { k: None, v: None }; cfg.pred_layers],
            h_pred: Tensor::zeros(&[1, cfg.d_model]),
            q: Tensor::zeros(&[1, cfg.d_model]),
        };
        state.advance(view, cfg, BOS)?;
        Ok(state)
    }

    /// Number of tokens consumed (including BOS).
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Representation conditioned on everything consumed so far.
    pub fn h_pred(&self) -> &Tensor {
        &self.h_pred
    }

    /// Extraction query for the next token.
    pub fn q(&self) -> &Tensor {
        &self.q
    }

    /// Feeds one token at the next position.
    pub fn advance(&mut self, view: &ParamView, cfg: &ModelConfig, token: usize) -> Result<()> {
        check_tokens(&[token], cfg.vocab_size)?;
        let pos = self.len;
        let pe = positional_encoding(pos + 1, cfg.d_model).row(pos)?;
        let mut x = view.p("pred.embed").gather_rows(&[token])?.add(&pe)?;
        let mut q_out = None;
        for l in 0..cfg.pred_layers {
            let prefix = format!("pred.l{l}");
            let h = x.layer_norm(
                view.p(&format!("{prefix}.ln1.g")),
                view.p(&format!("{prefix}.ln1.b")),
            )?;
            let p = view.attn(&format!("{prefix}.attn"));
            let k_new = linear(&h, p.wk, p.bk)?;
            let v_new = linear(&h, p.wv, p.bv)?;
            let cache = &mut self.layers[l];
            let k_all = match &cache.k {
                Some(k) => crate::tensor::concat_rows(&[k, &k_new])?,
                None => k_new,
            };
            let v_all = match &cache.v {
                Some(v) => crate::tensor::concat_rows(&[v, &v_new])?,
                None => v_new,
            };

            let d = cfg.d_model;
            let dh = d / cfg.n_heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let qrow = linear(&h, p.wq, p.bq)?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let qh = qrow.slice_cols(hd * dh, (hd + 1) * dh)?;
                let kh = k_all.slice_cols(hd * dh, (hd + 1) * dh)?;
                let vh = v_all.slice_cols(hd * dh, (hd + 1) * dh)?;
                let scores = qh.matmul(&kh.transpose()?)?.affine(scale, 0.0)?;
                let probs = scores.softmax_lastdim()?;
                heads.push(probs.matmul(&vh)?);
            }
            let refs: Vec<&Tensor> = heads.iter().collect();
            let ctx = crate::tensor::concat_cols(&refs)?;
            let attn = linear(&ctx, p.wo, p.bo)?;
            cache.k = Some(k_all);
            cache.v = Some(v_all);

            x = x.add(&attn)?;
            let h2 = x.layer_norm(
                view.p(&format!("{prefix}.ln2.g")),
                view.p(&format!("{prefix}.ln2.b")),
            )?;
            let ff = linear(&h2, view.p(&format!("{prefix}.ffn.w1")), view.p(&format!("{prefix}.ffn.b1")))?
                .relu()?;
            let ff = linear(&ff, view.p(&format!("{prefix}.ffn.w2")), view.p(&format!("{prefix}.ffn.b2")))?;
            x = x.add(&ff)?;
            if l == cfg.query_layer {
                q_out = Some(x.clone());
            }
        }
        self.h_pred = x.layer_norm(view.p("pred.lnf.g"), view.p("pred.lnf.b"))?;
        self.q = q_out.expect("query_layer validated against pred_layers");
        self.len += 1;
        Ok(())
    }
}

/// Joint logits for aligned rows: `FC_a(h_aif) + FC_p(h_pred)`, both
/// bias-free linear maps to vocabulary size.
pub fn joint_logits_rows(view: &ParamView, h_aif: &Tensor, h_pred: &Tensor) -> Result<Tensor> {
    if h_aif.shape() != h_pred.shape() {
        return Err(Error::shape(format!(
            "joint: h_aif {:?} vs h_pred {:?}",
            h_aif.shape(),
            h_pred.shape()
        )));
    }
    let a = h_aif.matmul(view.p("joint.fc_a.w"))?;
    let p = h_pred.matmul(view.p("joint.fc_p.w"))?;
    a.add(&p)
}

/// Single-step joint network producing a `[V]` logit vector.
pub fn joint_logits(view: &ParamView, h_aif: &Tensor, h_pred: &Tensor) -> Result<Tensor> {
    let v = view.p("joint.fc_a.w").shape()[1];
    joint_logits_rows(view, h_aif, h_pred)?.reshape(&[v])
}

/// Language-model logits from the prediction network head (`FC_p`).
pub fn lm_logits_rows(view: &ParamView, h_pred: &Tensor) -> Result<Tensor> {
    h_pred.matmul(view.p("joint.fc_p.w"))
}

/// Per-frame log posterior over vocabulary plus blank (index 0) for the
/// target-side CTC branch.
pub fn ctc_log_probs(view: &ParamView, e: &Tensor) -> Result<Tensor> {
    linear(e, view.p("ctc.proj.w"), view.p("ctc.proj.b"))?.log_softmax_lastdim()
}

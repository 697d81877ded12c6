//! Flat run configuration: one `key = value` per line in files, the same
//! keys as `--key value` command-line overrides (flags win over the file).
//! The resolved configuration is echoed to `config.resolved` in every run
//! directory and can itself be reloaded with `--config`.

use std::path::Path;

use crate::aif::ExtractMode;
use crate::data::SynthConfig;
use crate::decode::{DecodeConfig, DecodeMode};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;

fn parse_value<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| {
        Error::Config(format!("cannot parse {value:?} for key {key}"))
    })
}

macro_rules! run_config {
    ($( $field:ident : $ty:ty = $default:expr ; )*) => {
        /// Every tunable of the toolchain, addressable by snake_case key.
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $( pub $field: $ty, )*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $( $field: $default, )* }
            }
        }

        impl RunConfig {
            pub fn keys() -> Vec<&'static str> {
                vec![ $( stringify!($field), )* ]
            }

            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $( stringify!($field) => self.$field = parse_value(key, value)?, )*
                    _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
                }
                Ok(())
            }

            /// `key = value` lines, sorted by key.
            pub fn resolved(&self) -> String {
                let mut entries = vec![ $( (stringify!($field), self.$field.to_string()), )* ];
                entries.sort_by_key(|e| e.0);
                let mut out = String::new();
                for (k, v) in entries {
                    out.push_str(&format!("{k} = {v}\n"));
                }
                out
            }
        }
    };
}

run_config! {
    // model
    d_model: usize = 64;
    n_heads: usize = 4;
    ff_dim: usize = 128;
    enc_layers: usize = 2;
    pred_layers: usize = 2;
    chunk_size: usize = 8;
    query_layer: usize = 1;
    // emission and losses
    delta: f64 = 0.05;
    alpha_scale: f64 = 1.0;
    aif_mode: String = "multihead".to_string();
    epsilon_train: f64 = 0.0;
    epsilon_jitter: f64 = 0.0;
    beta: f64 = 0.6;
    gamma: f64 = 0.05;
    // optimization
    lr: f64 = 0.002;
    warmup_steps: usize = 200;
    batch_size: usize = 16;
    epochs: usize = 15;
    seed: u64 = 1;
    freeze: String = String::new();
    freeze_pred_on_init: bool = true;
    // decoding
    epsilon: f64 = 0.0;
    beam_in_chunk: usize = 10;
    mode: String = "chunked".to_string();
    lambda_ctc: f64 = 0.0;
    fusion_mu: f64 = 0.0;
    max_len_ratio: f64 = 1.5;
    // sweep
    grid: String = "0,1,3,5,7".to_string();
    // synthetic task
    src_vocab: usize = 40;
    frames_per_token: usize = 4;
    noise_sigma: f64 = 0.1;
    swap_pairs: bool = true;
    expand_count: usize = 10;
    len_min: usize = 4;
    len_max: usize = 12;
    ms_per_frame: f64 = 10.0;
    n_train: usize = 2000;
    n_dev: usize = 100;
    n_test: usize = 100;
    n_cross: usize = 100;
    n_lm_text: usize = 5000;
    n_lm_cross: usize = 2000;
    // paths and selection
    data: String = String::new();
    out: String = String::new();
    ckpt: String = String::new();
    init_lm: String = String::new();
    fusion_lm: String = String::new();
    split: String = "test".to_string();
    decode_file: String = String::new();
    corpus: String = String::new();
}

impl RunConfig {
    /// Loads `key = value` lines; `#` starts a comment.
    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("expected key = value, got {raw:?}"),
                });
            };
            self.set(key.trim(), value.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(())
    }

    pub fn model_config(&self, vocab_size: usize, feat_dim: usize) -> Result<ModelConfig> {
        let cfg = ModelConfig {
            d_model: self.d_model,
            n_heads: self.n_heads,
            ff_dim: self.ff_dim,
            enc_layers: self.enc_layers,
            pred_layers: self.pred_layers,
            chunk_size: self.chunk_size,
            vocab_size,
            feat_dim,
            query_layer: self.query_layer,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn train_config(&self) -> Result<TrainConfig> {
        let cfg = TrainConfig {
            beta: self.beta,
            gamma: self.gamma,
            epsilon_train: self.epsilon_train,
            epsilon_jitter: self.epsilon_jitter,
            lr: self.lr,
            warmup_steps: self.warmup_steps,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
            freeze: self.freeze_prefixes(),
            delta: self.delta,
            alpha_scale: self.alpha_scale,
            aif_mode: self.aif_mode.parse::<ExtractMode>()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn decode_config(&self) -> Result<DecodeConfig> {
        let cfg = DecodeConfig {
            epsilon: self.epsilon,
            beam_in_chunk: self.beam_in_chunk,
            mode: self.mode.parse::<DecodeMode>()?,
            lambda_ctc: self.lambda_ctc,
            fusion_mu: self.fusion_mu,
            max_len_ratio: self.max_len_ratio,
            delta: self.delta,
            alpha_scale: self.alpha_scale,
            aif_mode: self.aif_mode.parse::<ExtractMode>()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn synth_config(&self) -> Result<SynthConfig> {
        let cfg = SynthConfig {
            src_vocab: self.src_vocab,
            frames_per_token: self.frames_per_token,
            noise_sigma: self.noise_sigma,
            swap_pairs: self.swap_pairs,
            expand_count: self.expand_count,
            len_min: self.len_min,
            len_max: self.len_max,
            ms_per_frame: self.ms_per_frame,
            seed: self.seed,
            n_train: self.n_train,
            n_dev: self.n_dev,
            n_test: self.n_test,
            n_cross: self.n_cross,
            n_lm_text: self.n_lm_text,
            n_lm_cross: self.n_lm_cross,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn freeze_prefixes(&self) -> Vec<String> {
        self.freeze
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(str::to_string)
            .collect()
    }

    pub fn grid_values(&self) -> Result<Vec<f64>> {
        let values: Vec<f64> = self
            .grid
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| parse_value::<f64>("grid", s))
            .collect::<Result<_>>()?;
        if values.is_empty() {
            return Err(Error::Config("empty epsilon grid".into()));
        }
        Ok(values)
    }
}

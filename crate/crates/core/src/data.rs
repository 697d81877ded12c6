//! Synthetic re-ordering translation task and dataset IO.
//!
//! Source "speech" is a token sequence rendered as noisy one-hot frames
//! (`frames_per_token` frames each). The target is produced by a fixed
//! deterministic mapping: adjacent source positions emit their translations
//! in swapped order, and a configurable subset of source tokens expands to
//! two target tokens, so target length exceeds source length and the
//! quantity loss has real work to do. The cross-domain split draws sources
//! from a skewed Markov chain but keeps the same mapping.
//!
//! Records are stored one JSON object per line with floats rendered at nine
//! significant digits; re-serializing a parsed file reproduces it byte for
//! byte.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TOKEN_OFFSET;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SynthConfig {
    pub src_vocab: usize,
    pub frames_per_token: usize,
    pub noise_sigma: f64,
    pub swap_pairs: bool,
    /// Source ids below this count translate to two target tokens.
    pub expand_count: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub ms_per_frame: f64,
    pub seed: u64,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub n_cross: usize,
    pub n_lm_text: usize,
    pub n_lm_cross: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            src_vocab: 40,
            frames_per_token: 4,
            noise_sigma: 0.1,
            swap_pairs: true,
            expand_count: 10,
            len_min: 4,
            len_max: 12,
            ms_per_frame: 10.0,
            seed: 1,
            n_train: 2000,
            n_dev: 100,
            n_test: 100,
            n_cross: 100,
            n_lm_text: 5000,
            n_lm_cross: 2000,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.src_vocab < 2 {
            return Err(Error::Config("src_vocab must be >= 2".into()));
        }
        if self.expand_count > self.src_vocab {
            return Err(Error::Config("expand_count exceeds src_vocab".into()));
        }
        if self.len_min < 1 || self.len_min > self.len_max {
            return Err(Error::Config(format!(
                "bad length range [{}, {}]",
                self.len_min, self.len_max
            )));
        }
        if self.frames_per_token < 1 {
            return Err(Error::Config("frames_per_token must be >= 1".into()));
        }
        if self.ms_per_frame <= 0.0 {
            return Err(Error::Config("ms_per_frame must be positive".into()));
        }
        Ok(())
    }

    pub fn feat_dim(&self) -> usize {
        self.src_vocab
    }

    /// Model vocabulary: BOS, EOS, translated tokens, expansion suffixes.
    pub fn vocab_size(&self) -> usize {
        TOKEN_OFFSET + self.src_vocab + self.expand_count
    }
}

/// The deterministic source-to-target mapping shared by every split.
#[derive(Debug, Clone)]
pub struct TaskMapping {
    perm: Vec<usize>,
    expand_count: usize,
    swap_pairs: bool,
    src_vocab: usize,
}

impl TaskMapping {
    pub fn from_config(cfg: &SynthConfig) -> TaskMapping {
        // dedicated stream so the mapping only depends on the seed
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(0x9E37_79B9).wrapping_add(7));
        let mut perm: Vec<usize> = (0..cfg.src_vocab).collect();
        for i in (1..perm.len()).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        TaskMapping {
            perm,
            expand_count: cfg.expand_count,
            swap_pairs: cfg.swap_pairs,
            src_vocab: cfg.src_vocab,
        }
    }

    /// Translation of one source token as model-vocabulary ids.
    fn translate_token(&self, token: usize) -> Vec<usize> {
        let mut out = vec![TOKEN_OFFSET + self.perm[token]];
        if token < self.expand_count {
            out.push(TOKEN_OFFSET + self.src_vocab + token);
        }
        out
    }

    /// Full translation: adjacent pairs (2j, 2j+1) emit in swapped order; a
    /// trailing unpaired token emits in place.
    pub fn translate(&self, src: &[usize]) -> Vec<usize> {
        let mut out = Vec::new();
        let mut i = 0;
        while i + 1 < src.len() {
            if self.swap_pairs {
                out.extend(self.translate_token(src[i + 1]));
                out.extend(self.translate_token(src[i]));
            } else {
                out.extend(self.translate_token(src[i]));
                out.extend(self.translate_token(src[i + 1]));
            }
            i += 2;
        }
        if i < src.len() {
            out.extend(self.translate_token(src[i]));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SourceDomain {
    Uniform,
    SkewedMarkov,
}

fn sample_source(rng: &mut ChaCha8Rng, cfg: &SynthConfig, domain: SourceDomain) -> Vec<usize> {
    let n = rng.gen_range(cfg.len_min..=cfg.len_max);
    let v = cfg.src_vocab;
    match domain {
        SourceDomain::Uniform => (0..n).map(|_| rng.gen_range(0..v)).collect(),
        SourceDomain::SkewedMarkov => {
            let mut out = Vec::with_capacity(n);
            let mut state = rng.gen_range(0..v);
            out.push(state);
            for _ in 1..n {
                let roll: f64 = rng.gen();
                state = if roll < 0.55 {
                    (state + 7) % v
                } else if roll < 0.80 {
                    (state + 1) % v
                } else {
                    rng.gen_range(0..v)
                };
                out.push(state);
            }
            out
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub ms_per_frame: f64,
    pub frames: Vec<Vec<f64>>,
    pub src_tokens: Vec<usize>,
    pub tgt_tokens: Vec<usize>,
}

impl UtteranceRecord {
    pub fn frame_count(&self) -> usize {
        self.frames.len()
    }

    pub fn frames_tensor(&self) -> Tensor {
        let t = self.frames.len();
        let feat = self.frames.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(t * feat);
        for row in &self.frames {
            data.extend_from_slice(row);
        }
        Tensor::from_vec(data, &[t, feat])
    }

    pub fn source_ms(&self) -> f64 {
        self.frames.len() as f64 * self.ms_per_frame
    }
}

/// Metadata stored beside the splits; training and decoding read model
/// dimensions from here.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetMeta {
    pub src_vocab: usize,
    pub expand_count: usize,
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub ms_per_frame: f64,
    pub seed: u64,
}

pub struct GeneratedData {
    pub meta: DatasetMeta,
    pub train: Vec<UtteranceRecord>,
    pub dev: Vec<UtteranceRecord>,
    pub test: Vec<UtteranceRecord>,
    pub test_cross: Vec<UtteranceRecord>,
    pub lm_text: Vec<Vec<usize>>,
    pub lm_cross: Vec<Vec<usize>>,
}

fn render_utterance(
    rng: &mut ChaCha8Rng,
    cfg: &SynthConfig,
    mapping: &TaskMapping,
    domain: SourceDomain,
    utt_id: String,
) -> UtteranceRecord {
    let src = sample_source(rng, cfg, domain);
    let tgt = mapping.translate(&src);
    let feat = cfg.feat_dim();
    let mut frames = Vec::with_capacity(src.len() * cfg.frames_per_token);
    for &token in &src {
        for _ in 0..cfg.frames_per_token {
            let mut row = vec![0.0; feat];
            row[token] = 1.0;
            for v in &mut row {
                let noise: f64 = StandardNormal.sample(rng);
                *v += cfg.noise_sigma * noise;
            }
            frames.push(row);
        }
    }
    UtteranceRecord {
        utt_id,
        ms_per_frame: cfg.ms_per_frame,
        frames,
        src_tokens: src,
        tgt_tokens: tgt,
    }
}

/// Generates every split and text corpus. Deterministic per (config, seed).
pub fn generate(cfg: &SynthConfig) -> Result<GeneratedData> {
    cfg.validate()?;
    let mapping = TaskMapping::from_config(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let split = |rng: &mut ChaCha8Rng, name: &str, count: usize, domain: SourceDomain| {
        (0..count)
            .map(|i| render_utterance(rng, cfg, &mapping, domain, format!("{name}-{i:05}")))
            .collect::<Vec<_>>()
    };

    let train = split(&mut rng, "train", cfg.n_train, SourceDomain::Uniform);
    let dev = split(&mut rng, "dev", cfg.n_dev, SourceDomain::Uniform);
    let test = split(&mut rng, "test", cfg.n_test, SourceDomain::Uniform);
    let test_cross = split(&mut rng, "cross", cfg.n_cross, SourceDomain::SkewedMarkov);

    let text = |rng: &mut ChaCha8Rng, count: usize, domain: SourceDomain| {
        (0..count)
            .map(|_| mapping.translate(&sample_source(rng, cfg, domain)))
            .collect::<Vec<_>>()
    };
    let lm_text = text(&mut rng, cfg.n_lm_text, SourceDomain::Uniform);
    let lm_cross = text(&mut rng, cfg.n_lm_cross, SourceDomain::SkewedMarkov);

    Ok(GeneratedData {
        meta: DatasetMeta {
            src_vocab: cfg.src_vocab,
            expand_count: cfg.expand_count,
            vocab_size: cfg.vocab_size(),
            feat_dim: cfg.feat_dim(),
            ms_per_frame: cfg.ms_per_frame,
            seed: cfg.seed,
        },
        train,
        dev,
        test,
        test_cross,
        lm_text,
        lm_cross,
    })
}

// ---------------------------------------------------------------------------
// serialization

/// JSON formatter printing every float with nine significant digits.
struct NineDigitFormatter;

impl serde_json::ser::Formatter for NineDigitFormatter {
    fn write_f64<W>(&mut self, writer: &mut W, value: f64) -> std::io::Result<()>
    where
        W: ?Sized + std::io::Write,
    {
        write!(writer, "{value:.8e}")
    }
}

fn record_to_line(record: &UtteranceRecord) -> Result<String> {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, NineDigitFormatter);
    record
        .serialize(&mut ser)
        .map_err(|e| Error::Runtime(format!("serialize {}: {e}", record.utt_id)))?;
    Ok(String::from_utf8(buf).expect("json is utf-8"))
}

pub fn write_dataset(path: &Path, records: &[UtteranceRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for r in records {
        writeln!(w, "{}", record_to_line(r)?)?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a line-delimited dataset; parse failures carry the 1-based line
/// number and serde's message (which names missing fields).
pub fn read_dataset(path: &Path) -> Result<Vec<UtteranceRecord>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: UtteranceRecord = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(record);
    }
    Ok(out)
}

pub fn write_token_lines(path: &Path, sequences: &[Vec<usize>]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for seq in sequences {
        let line: Vec<String> = seq.iter().map(usize::to_string).collect();
        writeln!(w, "{}", line.join(" "))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_token_lines(path: &Path) -> Result<Vec<Vec<usize>>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let seq = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<usize>().map_err(|_| Error::Parse {
                    line: i + 1,
                    msg: format!("bad token {tok:?}"),
                })
            })
            .collect::<Result<Vec<usize>>>()?;
        out.push(seq);
    }
    Ok(out)
}

pub fn write_meta(path: &Path, meta: &DatasetMeta) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer_pretty(&mut w, meta)
        .map_err(|e| Error::Runtime(format!("serialize meta: {e}")))?;
    writeln!(w)?;
    w.flush()?;
    Ok(())
}

pub fn read_meta(path: &Path) -> Result<DatasetMeta> {
    let reader = BufReader::new(File::open(path)?);
    serde_json::from_reader(reader).map_err(|e| Error::Parse {
        line: 0,
        msg: format!("meta: {e}"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            src_vocab: 8,
            expand_count: 2,
            len_min: 2,
            len_max: 5,
            n_train: 6,
            n_dev: 3,
            n_test: 3,
            n_cross: 3,
            n_lm_text: 4,
            n_lm_cross: 4,
            seed: 42,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn swap_rule_instance() {
        let cfg = small_cfg();
        let mapping = TaskMapping::from_config(&cfg);
        // neither 3 nor 7 expands (expand_count = 2)
        let tgt = mapping.translate(&[3, 7]);
        assert_eq!(
            tgt,
            vec![TOKEN_OFFSET + mapping.perm[7], TOKEN_OFFSET + mapping.perm[3]]
        );
    }

    #[test]
    fn expansion_rule_instance() {
        let cfg = small_cfg();
        let mapping = TaskMapping::from_config(&cfg);
        // token 1 is in the expand set
        let tgt = mapping.translate(&[1]);
        assert_eq!(
            tgt,
            vec![
                TOKEN_OFFSET + mapping.perm[1],
                TOKEN_OFFSET + cfg.src_vocab + 1
            ]
        );
    }

    #[test]
    fn no_swap_preserves_order() {
        let mut cfg = small_cfg();
        cfg.swap_pairs = false;
        let mapping = TaskMapping::from_config(&cfg);
        let tgt = mapping.translate(&[3, 7]);
        assert_eq!(
            tgt,
            vec![TOKEN_OFFSET + mapping.perm[3], TOKEN_OFFSET + mapping.perm[7]]
        );
    }

    #[test]
    fn generation_is_deterministic_and_mapping_recomputable() {
        let cfg = small_cfg();
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test_cross, b.test_cross);
        assert_eq!(a.lm_text, b.lm_text);

        let mapping = TaskMapping::from_config(&cfg);
        for r in a.train.iter().chain(&a.test).chain(&a.test_cross) {
            assert_eq!(r.tgt_tokens, mapping.translate(&r.src_tokens), "{}", r.utt_id);
            assert!(r.tgt_tokens.len() >= r.src_tokens.len());
            assert_eq!(r.frames.len(), r.src_tokens.len() * cfg.frames_per_token);
        }
    }

    #[test]
    fn split_ids_are_disjoint() {
        let cfg = small_cfg();
        let data = generate(&cfg).unwrap();
        let mut ids: Vec<&str> = data
            .train
            .iter()
            .chain(&data.dev)
            .chain(&data.test)
            .chain(&data.test_cross)
            .map(|r| r.utt_id.as_str())
            .collect();
        let total = ids.len();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), total);
    }

    #[test]
    fn dataset_roundtrip_is_byte_identical() {
        let cfg = small_cfg();
        let data = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.jsonl");
        write_dataset(&path, &data.train).unwrap();
        let first = std::fs::read(&path).unwrap();

        let parsed = read_dataset(&path).unwrap();
        let path2 = dir.path().join("again.jsonl");
        write_dataset(&path2, &parsed).unwrap();
        let second = std::fs::read(&path2).unwrap();
        assert_eq!(first, second);
    }

    #[test]
    fn parse_errors_name_line_and_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"utt_id\":\"x\"}\n").unwrap();
        match read_dataset(&path) {
            Err(Error::Parse { line, msg }) => {
                assert_eq!(line, 1);
                assert!(msg.contains("ms_per_frame"), "message was {msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }

        std::fs::write(&path, "not json\n").unwrap();
        match read_dataset(&path) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_an_empty_dataset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        assert!(read_dataset(&path).unwrap().is_empty());
    }

    #[test]
    fn token_lines_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.txt");
        let seqs = vec![vec![2, 9, 4], vec![7]];
        write_token_lines(&path, &seqs).unwrap();
        assert_eq!(read_token_lines(&path).unwrap(), seqs);
    }

    #[test]
    fn meta_roundtrip() {
        let cfg = small_cfg();
        let data = generate(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("meta.json");
        write_meta(&path, &data.meta).unwrap();
        assert_eq!(read_meta(&path).unwrap(), data.meta);
    }

    #[test]
    fn markov_domain_is_skewed() {
        let cfg = SynthConfig {
            len_min: 50,
            len_max: 50,
            ..small_cfg()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let seq = sample_source(&mut rng, &cfg, SourceDomain::SkewedMarkov);
        let plus7 = seq
            .windows(2)
            .filter(|w| w[1] == (w[0] + 7) % cfg.src_vocab)
            .count();
        // 0.55 of transitions should follow the +7 rule; demand well above chance
        assert!(plus7 as f64 / (seq.len() - 1) as f64 > 0.3);
    }
}

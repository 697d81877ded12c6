//! Command-line surface. Every subcommand reads an optional `--config` file
//! plus `--key value` overrides (overrides win), writes its artifacts under
//! `--out`, and echoes the resolved configuration to `config.resolved`.
//! Exit codes: 0 success, 1 usage error, 2 runtime failure.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{self, DatasetMeta};
use crate::decode::{decode_streaming, write_decode_records, DecodeRecord};
use crate::error::{Error, Result};
use crate::eval::{self, average_lagging, corpus_bleu, laal, StreamingTrace};
use crate::model::{ModelConfig, ModelParams};
use crate::train::{self, TRAIN_LOG_HEADER};

pub const USAGE: &str = "\
usage: lst <subcommand> [--config FILE] [--key value]...

subcommands:
  gen-data     generate the synthetic re-ordering dataset   (needs --out)
  pretrain-lm  train the prediction-network language model  (needs --data, --out)
  train        train the full translation model             (needs --data, --out)
  adapt        fine-tune the prediction network on text     (needs --data, --ckpt, --out)
  decode       stream-decode a dataset split                (needs --data, --ckpt, --out)
  eval         score a decode output against references     (needs --data, --decode_file, --out)
  sweep        decode across an epsilon grid, write CSV     (needs --data, --ckpt, --out)
  gradcheck    run the gradient-integrity suite             (needs --out)

keys are the flat configuration keys (see config.resolved of any run);
--seed is accepted everywhere. Unknown flags are usage errors.";

/// Entry point; returns the process exit code.
pub fn run(args: &[String]) -> i32 {
    match dispatch(args) {
        Ok(()) => 0,
        Err(CliFailure::Usage(msg)) => {
            eprintln!("{msg}\n\n{USAGE}");
            1
        }
        Err(CliFailure::Runtime(err)) => {
            eprintln!("error: {err}");
            2
        }
    }
}

enum CliFailure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for CliFailure {
    fn from(e: Error) -> Self {
        match e {
            Error::Usage(msg) => CliFailure::Usage(msg),
            other => CliFailure::Runtime(other),
        }
    }
}

fn usage(msg: impl Into<String>) -> CliFailure {
    CliFailure::Usage(msg.into())
}

fn dispatch(args: &[String]) -> std::result::Result<(), CliFailure> {
    let Some(cmd) = args.first() else {
        return Err(usage("missing subcommand"));
    };
    if cmd == "--help" || cmd == "-h" || cmd == "help" {
        println!("{USAGE}");
        return Ok(());
    }
    let cfg = parse_config(&args[1..])?;
    match cmd.as_str() {
        "gen-data" => cmd_gen_data(&cfg)?,
        "pretrain-lm" => cmd_pretrain_lm(&cfg)?,
        "train" => cmd_train(&cfg)?,
        "adapt" => cmd_adapt(&cfg)?,
        "decode" => cmd_decode(&cfg)?,
        "eval" => cmd_eval(&cfg)?,
        "sweep" => cmd_sweep(&cfg)?,
        "gradcheck" => cmd_gradcheck(&cfg)?,
        other => return Err(usage(format!("unknown subcommand {other:?}"))),
    }
    Ok(())
}

fn parse_config(rest: &[String]) -> std::result::Result<RunConfig, CliFailure> {
    let mut pairs: Vec<(String, String)> = Vec::new();
    let mut i = 0;
    while i < rest.len() {
        let flag = &rest[i];
        if flag == "--help" || flag == "-h" {
            println!("{USAGE}");
            std::process::exit(0);
        }
        let Some(raw_key) = flag.strip_prefix("--") else {
            return Err(usage(format!("expected --key, got {flag:?}")));
        };
        let Some(value) = rest.get(i + 1) else {
            return Err(usage(format!("flag --{raw_key} is missing a value")));
        };
        pairs.push((raw_key.replace('-', "_"), value.clone()));
        i += 2;
    }

    let mut cfg = RunConfig::default();
    // the config file applies first so explicit flags win
    for (key, value) in &pairs {
        if key == "config" {
            cfg.apply_file(Path::new(value)).map_err(CliFailure::Runtime)?;
        }
    }
    for (key, value) in &pairs {
        if key == "config" {
            continue;
        }
        cfg.set(key, value)
            .map_err(|e| usage(e.to_string()))?;
    }
    Ok(cfg)
}

fn require<'a>(value: &'a str, key: &str) -> Result<&'a str> {
    if value.is_empty() {
        return Err(Error::Usage(format!("--{key} is required for this subcommand")));
    }
    Ok(value)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = PathBuf::from(require(&cfg.out, "out")?);
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn write_resolved(dir: &Path, cfg: &RunConfig) -> Result<()> {
    fs::write(dir.join("config.resolved"), cfg.resolved())?;
    Ok(())
}

fn data_dir(cfg: &RunConfig) -> Result<PathBuf> {
    Ok(PathBuf::from(require(&cfg.data, "data")?))
}

fn split_file(dir: &Path, split: &str) -> Result<PathBuf> {
    match split {
        "train" | "dev" | "test" | "test_cross" => Ok(dir.join(format!("{split}.jsonl"))),
        other => Err(Error::Usage(format!(
            "unknown split {other:?} (expected train|dev|test|test_cross)"
        ))),
    }
}

fn load_meta(dir: &Path) -> Result<DatasetMeta> {
    data::read_meta(&dir.join("meta.json"))
}

fn model_config_from(cfg: &RunConfig, meta: &DatasetMeta) -> Result<ModelConfig> {
    cfg.model_config(meta.vocab_size, meta.feat_dim)
}

fn write_train_log(dir: &Path, logs: &[train::EpochLog]) -> Result<()> {
    let mut text = String::from(TRAIN_LOG_HEADER);
    text.push('\n');
    for log in logs {
        text.push_str(&log.to_line());
        text.push('\n');
    }
    fs::write(dir.join("train.log"), text)?;
    Ok(())
}

/// Last tenth of the corpus (at least one sequence) held out for perplexity.
fn split_corpus(corpus: &[Vec<usize>]) -> (Vec<Vec<usize>>, Vec<Vec<usize>>) {
    let held = (corpus.len() / 10).max(1).min(corpus.len().saturating_sub(1));
    let cut = corpus.len() - held;
    (corpus[..cut].to_vec(), corpus[cut..].to_vec())
}

// ---------------------------------------------------------------------------
// subcommands

fn cmd_gen_data(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let sc = cfg.synth_config()?;
    let generated = data::generate(&sc)?;
    data::write_dataset(&dir.join("train.jsonl"), &generated.train)?;
    data::write_dataset(&dir.join("dev.jsonl"), &generated.dev)?;
    data::write_dataset(&dir.join("test.jsonl"), &generated.test)?;
    data::write_dataset(&dir.join("test_cross.jsonl"), &generated.test_cross)?;
    data::write_token_lines(&dir.join("lm_train.txt"), &generated.lm_text)?;
    data::write_token_lines(&dir.join("lm_cross.txt"), &generated.lm_cross)?;
    data::write_meta(&dir.join("meta.json"), &generated.meta)?;
    write_resolved(&dir, cfg)?;
    println!(
        "generated {} train / {} dev / {} test / {} cross utterances (vocab {})",
        generated.train.len(),
        generated.dev.len(),
        generated.test.len(),
        generated.test_cross.len(),
        generated.meta.vocab_size
    );
    Ok(())
}

fn cmd_pretrain_lm(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let dd = data_dir(cfg)?;
    let meta = load_meta(&dd)?;
    let mc = model_config_from(cfg, &meta)?;
    let tc = cfg.train_config()?;
    let corpus_file = if cfg.corpus.is_empty() { "lm_train.txt" } else { &cfg.corpus };
    let corpus = data::read_token_lines(&dd.join(corpus_file))?;
    let (train_text, held) = split_corpus(&corpus);
    let (params, logs) = train::pretrain_lm(&mc, &tc, &train_text, &held)?;
    params.save(&dir.join("lm.ckpt"))?;
    write_train_log(&dir, &logs)?;
    write_resolved(&dir, cfg)?;
    if let Some(last) = logs.last() {
        println!(
            "pretrained LM for {} epochs, held-out perplexity {:.4}",
            logs.len(),
            last.perplexity.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn cmd_train(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let dd = data_dir(cfg)?;
    let meta = load_meta(&dd)?;
    let mc = model_config_from(cfg, &meta)?;
    let mut tc = cfg.train_config()?;
    let train_set = data::read_dataset(&split_file(&dd, "train")?)?;
    let dev_set = data::read_dataset(&split_file(&dd, "dev")?).unwrap_or_default();

    let mut params = ModelParams::init(&mc, tc.seed)?;
    if !cfg.init_lm.is_empty() {
        let lm = ModelParams::load(Path::new(&cfg.init_lm))?;
        params.adopt(&lm.store)?;
        if cfg.freeze_pred_on_init && !tc.freeze.iter().any(|p| p == "pred.") {
            tc.freeze.push("pred.".to_string());
        }
    }
    let logs = train::train(&mut params, &mc, &tc, &train_set, &dev_set)?;
    params.save(&dir.join("model.ckpt"))?;
    write_train_log(&dir, &logs)?;
    write_resolved(&dir, cfg)?;
    if let Some(last) = logs.iter().rev().find(|l| l.split == "train") {
        println!(
            "trained {} epochs; final train loss {:.6}",
            tc.epochs, last.total
        );
    }
    Ok(())
}

fn cmd_adapt(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let dd = data_dir(cfg)?;
    let meta = load_meta(&dd)?;
    let mc = model_config_from(cfg, &meta)?;
    let tc = cfg.train_config()?;
    let ckpt = require(&cfg.ckpt, "ckpt")?;
    let mut params = ModelParams::load(Path::new(ckpt))?;
    let corpus_file = if cfg.corpus.is_empty() { "lm_cross.txt" } else { &cfg.corpus };
    let corpus = data::read_token_lines(&dd.join(corpus_file))?;
    let (train_text, held) = split_corpus(&corpus);
    let logs = train::adapt_prediction_network(&mut params, &mc, &tc, &train_text, &held)?;
    params.save(&dir.join("model.ckpt"))?;
    write_train_log(&dir, &logs)?;
    write_resolved(&dir, cfg)?;
    if let Some(last) = logs.last() {
        println!(
            "adapted prediction network; held-out perplexity {:.4}",
            last.perplexity.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}

fn load_fusion_lm(cfg: &RunConfig) -> Result<Option<ModelParams>> {
    if cfg.fusion_lm.is_empty() {
        Ok(None)
    } else {
        Ok(Some(ModelParams::load(Path::new(&cfg.fusion_lm))?))
    }
}

fn cmd_decode(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let dd = data_dir(cfg)?;
    let meta = load_meta(&dd)?;
    let mc = model_config_from(cfg, &meta)?;
    let dcfg = cfg.decode_config()?;
    let ckpt = require(&cfg.ckpt, "ckpt")?;
    let params = ModelParams::load(Path::new(ckpt))?;
    let fusion = load_fusion_lm(cfg)?;
    let utterances = data::read_dataset(&split_file(&dd, &cfg.split)?)?;

    let mut records = Vec::with_capacity(utterances.len());
    let mut traces: Vec<(String, StreamingTrace)> = Vec::with_capacity(utterances.len());
    for utt in &utterances {
        let out = decode_streaming(
            &params,
            &mc,
            &dcfg,
            &utt.frames_tensor(),
            utt.ms_per_frame,
            fusion.as_ref(),
        )?;
        out.trace.validate()?;
        records.push(DecodeRecord::from_output(&utt.utt_id, &out, utt.ms_per_frame));
        traces.push((utt.utt_id.clone(), out.trace));
    }
    write_decode_records(&dir.join("decode.tsv"), &records)?;
    eval::dump_traces(&dir.join("trace.csv"), &traces)?;
    write_resolved(&dir, cfg)?;
    println!("decoded {} utterances at epsilon {}", records.len(), dcfg.epsilon);
    Ok(())
}

/// Minimal trace carrying the write schedule of a decode record.
fn trace_from_record(r: &DecodeRecord) -> StreamingTrace {
    let mut t = StreamingTrace::new(r.source_ms, 0.0);
    for (&tok, &ms) in r.tokens.iter().zip(&r.emit_ms) {
        t.read(ms.min(r.source_ms));
        t.write(ms, tok);
    }
    t.read(r.source_ms);
    t
}

fn cmd_eval(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let dd = data_dir(cfg)?;
    let decode_file = require(&cfg.decode_file, "decode_file")?;
    let records = crate::decode::read_decode_records(Path::new(decode_file))?;
    let utterances = data::read_dataset(&split_file(&dd, &cfg.split)?)?;

    let mut hyps = Vec::with_capacity(records.len());
    let mut refs = Vec::with_capacity(records.len());
    let mut al_sum = 0.0;
    let mut laal_sum = 0.0;
    for r in &records {
        let utt = utterances
            .iter()
            .find(|u| u.utt_id == r.utt_id)
            .ok_or_else(|| Error::Runtime(format!("{} not in split {}", r.utt_id, cfg.split)))?;
        let trace = trace_from_record(r);
        al_sum += average_lagging(&trace, r.tokens.len(), utt.tgt_tokens.len())?;
        laal_sum += laal(&trace, r.tokens.len(), utt.tgt_tokens.len())?;
        hyps.push(r.tokens.clone());
        refs.push(utt.tgt_tokens.clone());
    }
    if records.is_empty() {
        return Err(Error::Runtime("decode file holds no records".into()));
    }
    let bleu = corpus_bleu(&hyps, &refs)?;
    let n = records.len() as f64;
    let metrics = format!(
        "bleu,al_ms,laal_ms\n{:.3},{:.3},{:.3}\n",
        bleu,
        al_sum / n,
        laal_sum / n
    );
    fs::write(dir.join("metrics.csv"), &metrics)?;
    write_resolved(&dir, cfg)?;
    println!(
        "bleu {:.3}  al {:.3} ms  laal {:.3} ms over {} utterances",
        bleu,
        al_sum / n,
        laal_sum / n,
        records.len()
    );
    Ok(())
}

fn cmd_sweep(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let dd = data_dir(cfg)?;
    let meta = load_meta(&dd)?;
    let mc = model_config_from(cfg, &meta)?;
    let dcfg = cfg.decode_config()?;
    let ckpt = require(&cfg.ckpt, "ckpt")?;
    let params = ModelParams::load(Path::new(ckpt))?;
    let fusion = load_fusion_lm(cfg)?;
    let utterances = data::read_dataset(&split_file(&dd, &cfg.split)?)?;
    let grid = cfg.grid_values()?;

    let points = eval::sweep(&params, &mc, &dcfg, &utterances, &grid, fusion.as_ref())?;
    fs::write(dir.join("sweep.csv"), eval::tradeoff_csv(&points))?;
    write_resolved(&dir, cfg)?;
    for p in &points {
        println!(
            "epsilon {:>8.3}  bleu {:>7.3}  al {:>9.3} ms  laal {:>9.3} ms",
            p.epsilon, p.bleu, p.al_ms, p.laal_ms
        );
    }
    Ok(())
}

fn cmd_gradcheck(cfg: &RunConfig) -> Result<()> {
    let dir = out_dir(cfg)?;
    let reports = train::gradcheck_suite(cfg.seed)?;
    let mut text = String::from("check,max_rel_err,tolerance,status\n");
    let mut all_ok = true;
    for r in &reports {
        let status = if r.passed() { "pass" } else { "FAIL" };
        all_ok &= r.passed();
        let line = format!("{},{:.3e},{:.0e},{status}", r.name, r.max_rel_err, r.tolerance);
        println!("{line}");
        text.push_str(&line);
        text.push('\n');
    }
    fs::write(dir.join("gradcheck.txt"), text)?;
    write_resolved(&dir, cfg)?;
    if !all_ok {
        return Err(Error::Runtime("gradient checks failed".into()));
    }
    Ok(())
}

//! Pipeline commands behind the `dialab` binary.
//!
//! Precedence for every knob: command-line flag, then `--config` file
//! (`key=value` lines), then the built-in default. Commands are deterministic
//! under a fixed seed and fail with a single-line diagnostic on exit code 1.

use std::collections::HashMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::Args;

use crate::data::{
    load_corpus, load_text_corpus, synth_generate, LengthBounds, SynthTask, Vocab,
};
use crate::decode::{beam_search, calibrate_min_len, DecodeModel, DecodeParams};
use crate::error::{Error, Result};
use crate::layout::Framework;
use crate::metrics::{evaluate, render_comparison, MetricsReport};
use crate::models::{
    finetune, load_checkpoint, pretrain, save_checkpoint, Checkpoint, PretrainObjective,
    TrainHyper,
};
use crate::objectives::ObjectiveConfig;
use crate::transformer::ModelConfig;

/// `key=value` configuration file.
#[derive(Default)]
pub struct FileConfig(HashMap<String, String>);

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<FileConfig> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::InvalidArgument(format!("cannot read config {}: {e}", path.display())))?;
        let mut map = HashMap::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::InvalidArgument(format!("config line without '=': {line}"))
            })?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        Ok(FileConfig(map))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>> {
        match self.0.get(key) {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| Error::InvalidArgument(format!("config key {key}={v} does not parse"))),
        }
    }
}

fn resolve<T: FromStr + Copy>(flag: Option<T>, file: &FileConfig, key: &str, default: T) -> Result<T> {
    Ok(flag.or(file.get(key)?).unwrap_or(default))
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// echo | reverse | templated-qa | grammar-lm
    #[arg(long)]
    pub task: String,
    #[arg(long)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_synth(args: &SynthArgs) -> Result<()> {
    let task = SynthTask::parse(&args.task)?;
    synth_generate(task, args.size, args.seed, &args.out)?;
    println!("wrote {} samples to {}", args.size, args.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct VocabArgs {
    /// Corpus files (dialogue TSV or plain text); may repeat.
    #[arg(long, required = true)]
    pub corpus: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub min_freq: usize,
    #[arg(long)]
    pub out: PathBuf,
}

pub fn cmd_vocab(args: &VocabArgs) -> Result<()> {
    let mut texts: Vec<String> = Vec::new();
    for path in &args.corpus {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::Corpus(format!("cannot read corpus {}: {e}", path.display())))?;
        for line in raw.lines() {
            if let Some((h, r)) = line.split_once('\t') {
                texts.push(h.to_string());
                texts.push(r.to_string());
            } else {
                texts.push(line.to_string());
            }
        }
    }
    let vocab = Vocab::build(texts.iter().map(|s| s.as_str()), args.min_freq);
    vocab.save(&args.out)?;
    println!("vocabulary of {} tokens written to {}", vocab.len(), args.out.display());
    Ok(())
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    /// ar | mlm
    #[arg(long)]
    pub objective: String,
    /// Plain-text corpus, one sentence per line.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Vocabulary file; built from the corpus and saved when absent.
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
}

fn model_config_from(
    file: &FileConfig,
    vocab_size: usize,
    layers: Option<usize>,
    heads: Option<usize>,
    hidden: Option<usize>,
) -> Result<ModelConfig> {
    let base = ModelConfig::desk_default(vocab_size);
    Ok(ModelConfig {
        layers: resolve(layers, file, "layers", base.layers)?,
        heads: resolve(heads, file, "heads", base.heads)?,
        hidden: resolve(hidden, file, "hidden", base.hidden)?,
        ..base
    })
}

pub fn cmd_pretrain(args: &PretrainArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let objective = PretrainObjective::parse(&args.objective)?;
    if objective == PretrainObjective::None {
        return Err(Error::InvalidArgument("pretrain needs --objective ar|mlm".into()));
    }
    let lines = load_text_corpus(&args.corpus)?;
    let vocab = if args.vocab.exists() {
        Vocab::load(&args.vocab)?
    } else {
        log::info!("building vocabulary from {}", args.corpus.display());
        let v = Vocab::build(lines.iter().map(|s| s.as_str()), 1);
        v.save(&args.vocab)?;
        v
    };
    let sentences: Vec<Vec<usize>> = lines.iter().map(|l| vocab.tokenize(l)).collect();
    let config = model_config_from(&file, vocab.len(), args.layers, args.heads, args.hidden)?;
    let hyper = TrainHyper {
        batch: resolve(args.batch, &file, "batch", 32)?,
        lr: resolve(args.lr, &file, "lr", 2e-3)?,
        steps: resolve(args.steps, &file, "steps", 2000)?,
        seed: resolve(args.seed, &file, "seed", 0)?,
        ..TrainHyper::default()
    };
    let ckpt = pretrain(&config, &sentences, objective, &hyper, |step, loss| {
        if step % 100 == 0 || step + 1 == hyper.steps {
            println!("step {step} loss {loss:.4}");
        }
    })?;
    save_checkpoint(&ckpt, &args.out)?;
    println!(
        "saved {}-tagged checkpoint to {}",
        objective.as_str(),
        args.out.display()
    );
    Ok(())
}

#[derive(Args, Debug)]
pub struct FinetuneArgs {
    /// ed | dec | mlm | ar | pf-free | fg-free | pffg-free
    #[arg(long)]
    pub framework: String,
    /// Dialogue corpus (history<TAB>response).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Pretrained checkpoint; omit for the random-init baseline arm.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Permit a pretraining-lineage mismatch.
    #[arg(long, default_value_t = false)]
    pub force_lineage: bool,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Bidirectional-attention interval (PF-free family).
    #[arg(long)]
    pub interval: Option<usize>,
    /// Target-side masking probability (MLM family).
    #[arg(long)]
    pub mask_rate: Option<f64>,
    /// Fine-tune only on the first N samples.
    #[arg(long)]
    pub subset: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub hidden: Option<usize>,
}

pub fn cmd_finetune(args: &FinetuneArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let framework = Framework::parse(&args.framework)?;
    let vocab = Vocab::load(&args.vocab)?;
    let (samples, _) = load_corpus(&args.corpus, &LengthBounds::default())?;
    let init = match &args.init {
        Some(p) => Some(load_checkpoint(p)?),
        None => None,
    };
    let config = match &init {
        Some(ckpt) => ckpt.config.clone(),
        None => model_config_from(&file, vocab.len(), args.layers, args.heads, args.hidden)?,
    };
    let hyper = TrainHyper {
        batch: resolve(args.batch, &file, "batch", 32)?,
        lr: resolve(args.lr, &file, "lr", 2e-3)?,
        steps: resolve(args.steps, &file, "steps", 2000)?,
        seed: resolve(args.seed, &file, "seed", 0)?,
        objective_cfg: ObjectiveConfig {
            mask_rate: resolve(args.mask_rate, &file, "mask_rate", 0.4)?,
            interval: resolve(args.interval, &file, "interval", 5)?,
        },
        subset: args.subset.or(file.get("subset")?),
        ..TrainHyper::default()
    };
    if let Some(n) = hyper.subset {
        println!("subset {} training samples", n.min(samples.len()));
    }
    let ckpt = finetune(
        framework,
        init.as_ref(),
        &config,
        &samples,
        &vocab,
        &hyper,
        args.force_lineage,
        |step, loss| {
            if step % 100 == 0 || step + 1 == hyper.steps {
                println!("step {step} loss {loss:.4}");
            }
        },
    )?;
    save_checkpoint(&ckpt, &args.out)?;
    println!("saved {framework} checkpoint to {}", args.out.display());
    Ok(())
}

fn load_model_checkpoint(path: &Path, flag_framework: Option<&str>) -> Result<(Checkpoint, Framework)> {
    let ckpt = load_checkpoint(path)?;
    let stored = ckpt.framework;
    let framework = match (stored, flag_framework) {
        (Some(f), None) => f,
        (Some(f), Some(flag)) => {
            let requested = Framework::parse(flag)?;
            if requested != f {
                return Err(Error::InvalidArgument(format!(
                    "framework/checkpoint mismatch: checkpoint was fine-tuned for {f}, requested {requested}"
                )));
            }
            f
        }
        (None, Some(flag)) => Framework::parse(flag)?,
        (None, None) => {
            return Err(Error::InvalidArgument(
                "checkpoint carries no framework tag; pass --framework".into(),
            ))
        }
    };
    Ok((ckpt, framework))
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Test corpus; one response is generated per line.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub framework: Option<String>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub min_len: Option<usize>,
    /// Calibration file (key=value) supplying min_len when the flag is absent.
    #[arg(long)]
    pub calibration: Option<PathBuf>,
    #[arg(long)]
    pub max_len: Option<usize>,
    #[arg(long)]
    pub interval: Option<usize>,
}

pub fn cmd_generate(args: &GenerateArgs) -> Result<()> {
    let file = FileConfig::load(args.config.as_deref())?;
    let (ckpt, framework) = load_model_checkpoint(&args.checkpoint, args.framework.as_deref())?;
    let vocab = Vocab::load(&args.vocab)?;
    let (samples, _) = load_corpus(&args.corpus, &LengthBounds::default())?;
    let params = ckpt.to_params::<f32>()?;
    let model = DecodeModel {
        config: &ckpt.config,
        params: &params,
    };
    let calibrated_min = match (&args.min_len, &args.calibration) {
        (Some(m), _) => Some(*m),
        (None, Some(path)) => FileConfig::load(Some(path))?.get::<usize>("min_len")?,
        (None, None) => None,
    };
    let dparams = DecodeParams {
        framework,
        beam_size: resolve(args.beam, &file, "beam", 4)?,
        min_len: calibrated_min.or(file.get("min_len")?).unwrap_or(1),
        max_len: resolve(args.max_len, &file, "max_len", 36)?,
        interval: resolve(args.interval, &file, "interval", 5)?,
    };
    dparams.validate()?;
    let mut out = std::fs::File::create(&args.out)?;
    let mut total_len = 0usize;
    for s in &samples {
        let (src, _) = s.encode(&vocab);
        let result = beam_search(&model, &src, &dparams)?;
        total_len += result.tokens.len();
        writeln!(out, "{}", vocab.detokenize(&result.tokens))?;
    }
    let avg = total_len as f64 / samples.len() as f64;
    println!("generated {} responses, avgLen {avg:.2}", samples.len());
    Ok(())
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    /// Validation corpus supplying sources and the target average length.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub framework: Option<String>,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    #[arg(long, default_value_t = 36)]
    pub max_len: usize,
    #[arg(long, default_value_t = 5)]
    pub interval: usize,
    /// How many validation sources to decode per candidate.
    #[arg(long, default_value_t = 32)]
    pub sample: usize,
}

pub fn cmd_calibrate(args: &CalibrateArgs) -> Result<()> {
    let (ckpt, framework) = load_model_checkpoint(&args.checkpoint, args.framework.as_deref())?;
    let vocab = Vocab::load(&args.vocab)?;
    let (samples, _) = load_corpus(&args.corpus, &LengthBounds::default())?;
    let params = ckpt.to_params::<f32>()?;
    let model = DecodeModel {
        config: &ckpt.config,
        params: &params,
    };
    let take = args.sample.min(samples.len()).max(1);
    let sources: Vec<Vec<usize>> = samples[..take].iter().map(|s| s.encode(&vocab).0).collect();
    let target_avg = samples[..take]
        .iter()
        .map(|s| s.response.split_whitespace().count())
        .sum::<usize>() as f64
        / take as f64;
    let base = DecodeParams {
        framework,
        beam_size: args.beam,
        min_len: 1,
        max_len: args.max_len,
        interval: args.interval,
    };
    let candidates: Vec<usize> = (1..=args.max_len.min(16)).collect();
    let best = calibrate_min_len(&model, &base, &sources, target_avg, &candidates)?;
    std::fs::write(&args.out, format!("min_len={best}\n"))?;
    println!("calibrated min_len={best} (target avg length {target_avg:.2})");
    Ok(())
}

fn read_hypotheses(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Corpus(format!("cannot read {}: {e}", path.display())))?;
    Ok(text.lines().map(|l| l.to_string()).collect())
}

/// References: plain lines, or the response field of a dialogue TSV.
fn read_references(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Corpus(format!("cannot read {}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in text.lines() {
        let fields: Vec<&str> = line.split('\t').collect();
        match fields.len() {
            1 => out.push(line.to_string()),
            2 => out.push(fields[1].to_string()),
            _ => {
                return Err(Error::Corpus(format!(
                    "malformed reference line in {}",
                    path.display()
                )))
            }
        }
    }
    Ok(out)
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Hypotheses, one response per line.
    #[arg(long)]
    pub hyp: PathBuf,
    /// References: plain lines or a dialogue TSV.
    #[arg(long = "ref")]
    pub reference: PathBuf,
}

pub fn cmd_evaluate(args: &EvaluateArgs) -> Result<()> {
    let hyps = read_hypotheses(&args.hyp)?;
    let refs = read_references(&args.reference)?;
    let report = evaluate(&hyps, &refs)?;
    print!("{}", report.render_table("model"));
    print!("{}", report.render_keyvalues());
    Ok(())
}

#[derive(Args, Debug)]
pub struct CompareArgs {
    #[arg(long = "ref")]
    pub reference: PathBuf,
    /// `label=path` hypothesis files; one table row each. May repeat.
    #[arg(long, required = true)]
    pub hyp: Vec<String>,
}

pub fn cmd_compare(args: &CompareArgs) -> Result<()> {
    let refs = read_references(&args.reference)?;
    let mut rows: Vec<(String, MetricsReport)> = Vec::new();
    for spec in &args.hyp {
        let (label, path) = spec.split_once('=').ok_or_else(|| {
            Error::InvalidArgument(format!("--hyp expects label=path, got '{spec}'"))
        })?;
        let hyps = read_hypotheses(Path::new(path))?;
        rows.push((label.to_string(), evaluate(&hyps, &refs)?));
    }
    print!("{}", render_comparison(&rows));
    Ok(())
}

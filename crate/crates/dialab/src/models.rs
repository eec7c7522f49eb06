//! Model assembly, the two-stage training pipeline, and checkpointing.
//!
//! Pretraining emulates the two lineages at desk scale: `ar` trains a causal
//! LM over whole sentences, `mlm` a bidirectional masked LM (15% corruption,
//! 80/10/10). Fine-tuning applies the framework objective, guarded by the
//! lineage pairing: `ed`/`dec` expect an `ar`-tagged checkpoint, the
//! BERT-style frameworks expect `mlm`.
//!
//! Checkpoint format (little-endian): magic `DFTM`, version `u32`, header
//! length `u32` + `key=value` lines, tensor count `u32`, then per tensor
//! name length + bytes, rank, dims, row-major `f32` payload; trailing CRC32
//! over all preceding bytes.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{specials, stream_seed, BatchIter, DialogueSample, Vocab};
use crate::error::{Error, Result};
use crate::layout::{Framework, PretrainedLm, SequenceLayout, MAX_INPUT_LEN};
use crate::numcore::{adam_step, backward_pass, AdamHyper, OptimizerState, Real, Tensor};
use crate::objectives::{batch_loss, ObjectiveConfig, TrainingExample};
use crate::transformer::{parameter_specs, InitKind, ModelConfig, ParameterSet};

const CKPT_MAGIC: &[u8; 4] = b"DFTM";
const CKPT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PretrainObjective {
    Ar,
    Mlm,
    None,
}

impl PretrainObjective {
    pub fn as_str(&self) -> &'static str {
        match self {
            PretrainObjective::Ar => "ar",
            PretrainObjective::Mlm => "mlm",
            PretrainObjective::None => "none",
        }
    }

    pub fn parse(s: &str) -> Result<PretrainObjective> {
        match s.to_ascii_lowercase().as_str() {
            "ar" => Ok(PretrainObjective::Ar),
            "mlm" => Ok(PretrainObjective::Mlm),
            "none" => Ok(PretrainObjective::None),
            other => Err(Error::InvalidArgument(format!(
                "unknown pretraining objective '{other}'"
            ))),
        }
    }
}

impl Framework {
    /// Which pretraining tag this framework's fine-tuning expects.
    pub fn expected_lineage(&self) -> PretrainObjective {
        match self.characteristics().pretrained_lm {
            PretrainedLm::Gpt => PretrainObjective::Ar,
            PretrainedLm::Bert => PretrainObjective::Mlm,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// Persisted model: config, lineage tag, named tensors, counters.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub config: ModelConfig,
    pub objective: PretrainObjective,
    pub framework: Option<Framework>,
    pub step: u64,
    pub seed: u64,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn from_params(
        config: &ModelConfig,
        params: &ParameterSet<f32>,
        objective: PretrainObjective,
        framework: Option<Framework>,
        step: u64,
        seed: u64,
    ) -> Checkpoint {
        Checkpoint {
            version: CKPT_VERSION,
            config: config.clone(),
            objective,
            framework,
            step,
            seed,
            tensors: params
                .named()
                .iter()
                .map(|(name, t)| NamedTensor {
                    name: name.clone(),
                    shape: t.shape(),
                    data: t.data_vec(),
                })
                .collect(),
        }
    }

    /// Rebuilds a trainable parameter set in the stored tensor order.
    pub fn to_params<E: Real>(&self) -> Result<ParameterSet<E>> {
        let mut params = ParameterSet::new();
        for t in &self.tensors {
            let data: Vec<E> = t.data.iter().map(|&x| E::of(x as f64)).collect();
            params.insert(
                t.name.clone(),
                Tensor::from_vec(t.shape.clone(), data)?.requires_grad(true),
            );
        }
        Ok(params)
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }
}

/// Deterministic initialization: normal(0, 0.02) weights, zero biases and
/// norm-biases, unit norm-gains (decoder-only stack).
pub fn init_model<E: Real>(config: &ModelConfig, seed: u64) -> Result<ParameterSet<E>> {
    init_params(config, seed, false)
}

/// Framework-aware initialization; `ed` builds the two-stack model.
pub fn init_model_for<E: Real>(
    framework: Framework,
    config: &ModelConfig,
    seed: u64,
) -> Result<ParameterSet<E>> {
    init_params(config, seed, framework == Framework::Ed)
}

fn init_params<E: Real>(config: &ModelConfig, seed: u64, ed: bool) -> Result<ParameterSet<E>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0x1217, 0));
    let mut params = ParameterSet::new();
    for spec in parameter_specs(config, ed) {
        let n: usize = spec.shape.iter().product();
        let tensor = match spec.init {
            InitKind::Normal => Tensor::randn(spec.shape, 0.02, &mut rng),
            InitKind::Zero => Tensor::from_vec(spec.shape, vec![E::zero(); n])?,
            InitKind::One => Tensor::from_vec(spec.shape, vec![E::one(); n])?,
        };
        params.insert(spec.name, tensor.requires_grad(true));
    }
    Ok(params)
}

/// Training-loop hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct TrainHyper {
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    pub steps: u64,
    pub seed: u64,
    pub objective_cfg: ObjectiveConfig,
    pub subset: Option<usize>,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            batch: 32,
            lr: 2e-3,
            warmup: 100,
            steps: 2000,
            seed: 0,
            objective_cfg: ObjectiveConfig::default(),
            subset: None,
        }
    }
}

fn train_loop(
    config: &ModelConfig,
    params: &ParameterSet<f32>,
    mut batches: impl FnMut(u64) -> Result<Vec<TrainingExample>>,
    hyper: &TrainHyper,
    on_step: &mut dyn FnMut(u64, f32),
) -> Result<()> {
    let mut state = OptimizerState::new(AdamHyper {
        lr: hyper.lr,
        ..AdamHyper::default()
    });
    for step in 0..hyper.steps {
        let batch = batches(step)?;
        params.zero_grads();
        let loss = batch_loss(&batch, params, config)?;
        let loss_val = loss.item();
        backward_pass(&loss)?;
        let warm = if hyper.warmup > 0 {
            ((step + 1) as f64 / hyper.warmup as f64).min(1.0)
        } else {
            1.0
        };
        state.set_lr(hyper.lr * warm);
        adam_step(params.named(), &mut state)?;
        on_step(step, loss_val);
    }
    Ok(())
}

fn lm_example(
    objective: PretrainObjective,
    sentence: &[usize],
    vocab_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<TrainingExample> {
    match objective {
        PretrainObjective::Ar => {
            // causal LM: predict every next token plus the end of sequence
            let n = sentence.len() + 1;
            let layout = SequenceLayout::lm(Framework::Dec, n)?;
            let mask = crate::layout::build_framework_mask(&layout, Framework::Dec)?;
            let mut tokens = vec![specials::BOS];
            tokens.extend_from_slice(sentence);
            let mut gold = sentence.to_vec();
            gold.push(specials::EOS);
            Ok(TrainingExample {
                framework: Framework::Dec,
                layout,
                tokens,
                loss_positions: (0..n).collect(),
                gold,
                mask,
                encoder: None,
                cross_mask: None,
            })
        }
        PretrainObjective::Mlm => {
            // BERT-style: select 15%, of which 80% -> [MASK], 10% random
            // content token, 10% kept; loss at every selected position
            let n = sentence.len();
            let layout = SequenceLayout::lm(Framework::Mlm, n)?;
            let mask = crate::layout::build_framework_mask(&layout, Framework::Mlm)?;
            let mut tokens = sentence.to_vec();
            let mut selected: Vec<usize> = Vec::new();
            for i in 0..n {
                if rng.gen_bool(0.15) {
                    selected.push(i);
                }
            }
            if selected.is_empty() {
                selected.push(rng.gen_range(0..n));
            }
            let mut gold = Vec::with_capacity(selected.len());
            for &i in &selected {
                gold.push(tokens[i]);
                let r: f64 = rng.gen();
                if r < 0.8 {
                    tokens[i] = specials::MASK;
                } else if r < 0.9 {
                    tokens[i] = rng.gen_range(specials::COUNT..vocab_size);
                }
            }
            Ok(TrainingExample {
                framework: Framework::Mlm,
                layout,
                tokens,
                loss_positions: selected,
                gold,
                mask,
                encoder: None,
                cross_mask: None,
            })
        }
        PretrainObjective::None => Err(Error::InvalidArgument(
            "pretraining requires the ar or mlm objective".into(),
        )),
    }
}

/// Pretrains from random initialization on a sentence corpus and returns the
/// tagged checkpoint.
pub fn pretrain(
    config: &ModelConfig,
    sentences: &[Vec<usize>],
    objective: PretrainObjective,
    hyper: &TrainHyper,
    mut on_step: impl FnMut(u64, f32),
) -> Result<Checkpoint> {
    config.validate()?;
    let usable: Vec<&Vec<usize>> = sentences
        .iter()
        .filter(|s| !s.is_empty() && s.len() + 1 <= MAX_INPUT_LEN)
        .collect();
    if usable.is_empty() {
        return Err(Error::Corpus("pretraining corpus is empty".into()));
    }
    let params = init_model::<f32>(config, hyper.seed)?;
    let count = usable.len();
    let batches = |step: u64| -> Result<Vec<TrainingExample>> {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(hyper.seed, 0xB00C, step));
        let epoch = (step as usize * hyper.batch) / count;
        let mut order_rng = ChaCha8Rng::seed_from_u64(stream_seed(hyper.seed, 0x0E0C, epoch as u64));
        let mut order: Vec<usize> = (0..count).collect();
        for i in (1..order.len()).rev() {
            let j = order_rng.gen_range(0..=i);
            order.swap(i, j);
        }
        let start = (step as usize * hyper.batch) % count;
        let mut batch = Vec::with_capacity(hyper.batch);
        for off in 0..hyper.batch.min(count) {
            let idx = order[(start + off) % count];
            batch.push(lm_example(objective, usable[idx], config.vocab_size, &mut rng)?);
        }
        let n_max = batch.iter().map(|e| e.layout.len()).max().unwrap();
        for e in &mut batch {
            e.pad_to(n_max, 0)?;
        }
        Ok(batch)
    };
    train_loop(config, &params, batches, hyper, &mut on_step)?;
    Ok(Checkpoint::from_params(
        config,
        &params,
        objective,
        None,
        hyper.steps,
        hyper.seed,
    ))
}

/// Maps a single-stack checkpoint onto the encoder-decoder model: embeddings
/// and head shared, self-attention/FFN/norm weights copied into both stacks,
/// cross-attention left at its fresh initialization.
fn ed_params_from_checkpoint(config: &ModelConfig, ckpt: &Checkpoint, seed: u64) -> Result<ParameterSet<f32>> {
    let params = init_model_for::<f32>(Framework::Ed, config, seed)?;
    for t in &ckpt.tensors {
        let dests: Vec<String> = if t.name.starts_with("layers.") {
            vec![format!("encoder.{}", t.name), format!("decoder.{}", t.name)]
        } else {
            vec![t.name.clone()]
        };
        for dest in dests {
            let p = params.get(&dest)?;
            if p.shape() != t.shape {
                return Err(Error::ShapeMismatch(format!(
                    "checkpoint tensor {} has shape {:?}, model expects {:?}",
                    t.name,
                    t.shape,
                    p.shape()
                )));
            }
            p.set_data(t.data.clone())?;
        }
    }
    Ok(params)
}

/// Fine-tunes a framework from a pretrained checkpoint (or from scratch when
/// `init` is `None`). Lineage mismatches error unless `force_lineage`.
pub fn finetune(
    framework: Framework,
    init: Option<&Checkpoint>,
    config: &ModelConfig,
    corpus: &[DialogueSample],
    vocab: &Vocab,
    hyper: &TrainHyper,
    force_lineage: bool,
    mut on_step: impl FnMut(u64, f32),
) -> Result<Checkpoint> {
    config.validate()?;
    let lineage = match init {
        Some(ckpt) => {
            let expected = framework.expected_lineage();
            if ckpt.objective != expected && !force_lineage {
                return Err(Error::LineageMismatch {
                    framework: framework.to_string(),
                    expected: expected.as_str().into(),
                    found: ckpt.objective.as_str().into(),
                });
            }
            if ckpt.config != *config {
                return Err(Error::ShapeMismatch(
                    "checkpoint config does not match the requested model config".into(),
                ));
            }
            ckpt.objective
        }
        None => PretrainObjective::None,
    };
    let params = match (init, framework) {
        (Some(ckpt), Framework::Ed) => {
            ed_params_from_checkpoint(config, ckpt, stream_seed(hyper.seed, 0xED00, 0))?
        }
        (Some(ckpt), _) => ckpt.to_params::<f32>()?,
        (None, fw) => init_model_for::<f32>(fw, config, hyper.seed)?,
    };
    let subset: Vec<DialogueSample> = match hyper.subset {
        Some(n) => {
            let n = n.min(corpus.len());
            log::info!("fine-tuning on a subset of {n} samples");
            corpus[..n].to_vec()
        }
        None => corpus.to_vec(),
    };
    let mut iter = BatchIter::new(
        &subset,
        vocab,
        framework,
        hyper.batch,
        hyper.seed,
        hyper.objective_cfg,
    )?;
    let batches = |_step: u64| iter.next_batch();
    train_loop(config, &params, batches, hyper, &mut on_step)?;
    Ok(Checkpoint::from_params(
        config,
        &params,
        lineage,
        Some(framework),
        hyper.steps,
        hyper.seed,
    ))
}

// ---- checkpoint file format ----

fn crc32(bytes: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, slot) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *slot = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in bytes {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    crc ^ 0xFFFF_FFFF
}

fn header_string(ckpt: &Checkpoint) -> String {
    let mut h = String::new();
    h.push_str(&format!("objective={}\n", ckpt.objective.as_str()));
    h.push_str(&format!(
        "framework={}\n",
        ckpt.framework.map_or("none", |f| f.as_str())
    ));
    h.push_str(&format!("step={}\n", ckpt.step));
    h.push_str(&format!("seed={}\n", ckpt.seed));
    let c = &ckpt.config;
    h.push_str(&format!("layers={}\n", c.layers));
    h.push_str(&format!("heads={}\n", c.heads));
    h.push_str(&format!("hidden={}\n", c.hidden));
    h.push_str(&format!("vocab_size={}\n", c.vocab_size));
    h.push_str(&format!("max_positions={}\n", c.max_positions));
    h.push_str(&format!("type_count={}\n", c.type_count));
    h.push_str(&format!("tie_output_embedding={}\n", c.tie_output_embedding));
    h
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes: Vec<u8> = Vec::new();
    bytes.extend_from_slice(CKPT_MAGIC);
    bytes.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    let header = header_string(ckpt);
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    bytes.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for t in &ckpt.tensors {
        bytes.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        bytes.extend_from_slice(t.name.as_bytes());
        bytes.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            bytes.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &x in &t.data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    let crc = crc32(&bytes);
    bytes.extend_from_slice(&crc.to_le_bytes());
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::MalformedCheckpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let bytes = std::fs::read(&path)?;
    if bytes.len() < 12 {
        return Err(Error::MalformedCheckpoint("file too short".into()));
    }
    let (body, crc_bytes) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([crc_bytes[0], crc_bytes[1], crc_bytes[2], crc_bytes[3]]);
    if crc32(body) != stored {
        return Err(Error::ChecksumFailure);
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4)? != CKPT_MAGIC {
        return Err(Error::MalformedCheckpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::CheckpointVersion(version, CKPT_VERSION));
    }
    let header_len = r.u32()? as usize;
    let header = std::str::from_utf8(r.take(header_len)?)
        .map_err(|_| Error::MalformedCheckpoint("header is not UTF-8".into()))?;
    let mut kv = std::collections::HashMap::new();
    for line in header.lines() {
        if let Some((k, v)) = line.split_once('=') {
            kv.insert(k.to_string(), v.to_string());
        }
    }
    let get = |k: &str| -> Result<String> {
        kv.get(k)
            .cloned()
            .ok_or_else(|| Error::MalformedCheckpoint(format!("missing header key {k}")))
    };
    let parse_usize = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::MalformedCheckpoint(format!("bad header value for {k}")))
    };
    let config = ModelConfig {
        layers: parse_usize("layers")?,
        heads: parse_usize("heads")?,
        hidden: parse_usize("hidden")?,
        vocab_size: parse_usize("vocab_size")?,
        max_positions: parse_usize("max_positions")?,
        type_count: parse_usize("type_count")?,
        tie_output_embedding: get("tie_output_embedding")? == "true",
    };
    let objective = PretrainObjective::parse(&get("objective")?)?;
    let framework = match get("framework")?.as_str() {
        "none" => None,
        s => Some(Framework::parse(s)?),
    };
    let step: u64 = get("step")?
        .parse()
        .map_err(|_| Error::MalformedCheckpoint("bad step".into()))?;
    let seed: u64 = get("seed")?
        .parse()
        .map_err(|_| Error::MalformedCheckpoint("bad seed".into()))?;

    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::MalformedCheckpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(4 * n)?;
        let mut data = Vec::with_capacity(n);
        for c in raw.chunks_exact(4) {
            data.push(f32::from_le_bytes([c[0], c[1], c[2], c[3]]));
        }
        tensors.push(NamedTensor { name, shape, data });
    }
    if r.pos != body.len() {
        return Err(Error::MalformedCheckpoint("trailing bytes after tensors".into()));
    }
    Ok(Checkpoint {
        version,
        config,
        objective,
        framework,
        step,
        seed,
        tensors,
    })
}

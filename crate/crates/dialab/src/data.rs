//! Vocabulary, dialogue corpus files, synthetic tasks, and batching.
//!
//! Corpus file format: UTF-8, LF line endings, one sample per line as
//! `history<TAB>response`, history turns joined by `" [SEP] "`. Vocabulary
//! files hold one token per line in id order. Language-model corpora (the
//! `grammar-lm` task) are plain text, one sentence per line.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::layout::{Framework, MAX_INPUT_LEN};
use crate::objectives::{build_example, ObjectiveConfig, TrainingExample};

/// Fixed special-token ids. Token strings are stored lowercase, matching the
/// tokenizer's normalization.
pub mod specials {
    pub const PAD: usize = 0;
    pub const UNK: usize = 1;
    pub const BOS: usize = 2;
    pub const EOS: usize = 3;
    pub const SEP: usize = 4;
    pub const MASK: usize = 5;
    pub const COUNT: usize = 6;
    pub const NAMES: [&str; 6] = ["[pad]", "[unk]", "[bos]", "[eos]", "[sep]", "[mask]"];
}

/// Mixes a base seed with a stream tag and an index into an independent
/// 64-bit seed (splitmix64 finalizer).
pub fn stream_seed(seed: u64, stream: u64, index: u64) -> u64 {
    fn mix(mut x: u64) -> u64 {
        x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
        x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        x ^ (x >> 31)
    }
    mix(mix(seed ^ mix(stream)) ^ index)
}

/// Token <-> id bijection with fixed special ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>) -> Vocab {
        let index = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab { tokens, index }
    }

    /// Deterministic id assignment: specials first, then kept tokens by
    /// descending frequency with lexicographic tie-breaks.
    pub fn build<'a>(texts: impl Iterator<Item = &'a str>, min_freq: usize) -> Vocab {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for raw in text.split_whitespace() {
                let tok = raw.to_lowercase();
                if specials::NAMES.contains(&tok.as_str()) {
                    continue;
                }
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(_, c)| *c >= min_freq.max(1))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut tokens: Vec<String> = specials::NAMES.iter().map(|s| s.to_string()).collect();
        tokens.extend(kept.into_iter().map(|(t, _)| t));
        Vocab::from_tokens(tokens)
    }

    pub fn from_samples(samples: &[DialogueSample], min_freq: usize) -> Vocab {
        let texts: Vec<&str> = samples
            .iter()
            .flat_map(|s| {
                s.history
                    .iter()
                    .map(|t| t.as_str())
                    .chain(std::iter::once(s.response.as_str()))
            })
            .collect();
        Vocab::build(texts.into_iter(), min_freq)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// Lowercase whitespace split; out-of-vocabulary words map to `[unk]`.
    pub fn tokenize(&self, text: &str) -> Vec<usize> {
        text.split_whitespace()
            .map(|raw| {
                let tok = raw.to_lowercase();
                self.id(&tok).unwrap_or(specials::UNK)
            })
            .collect()
    }

    pub fn detokenize(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&id| self.token(id).unwrap_or(specials::NAMES[specials::UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line in id order.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Vocab> {
        let text = std::fs::read_to_string(&path)?;
        let tokens: Vec<String> = text.lines().map(|l| l.to_string()).collect();
        if tokens.len() < specials::COUNT {
            return Err(Error::Corpus(format!(
                "vocabulary file {} is missing the special tokens",
                path.as_ref().display()
            )));
        }
        for (i, name) in specials::NAMES.iter().enumerate() {
            if tokens[i] != *name {
                return Err(Error::Corpus(format!(
                    "vocabulary file does not start with the fixed specials (line {i} is '{}')",
                    tokens[i]
                )));
            }
        }
        Ok(Vocab::from_tokens(tokens))
    }
}

/// One dialogue: at least one history turn plus a response.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogueSample {
    pub history: Vec<String>,
    pub response: String,
}

impl DialogueSample {
    /// `(source ids with [SEP] between turns, response ids)`
    pub fn encode(&self, vocab: &Vocab) -> (Vec<usize>, Vec<usize>) {
        let joined = self.history.join(" [sep] ");
        (vocab.tokenize(&joined), vocab.tokenize(&self.response))
    }

    fn to_line(&self) -> String {
        format!("{}\t{}", self.history.join(" [SEP] "), self.response)
    }
}

/// Loader length filters (token counts after whitespace splitting).
#[derive(Clone, Copy, Debug)]
pub struct LengthBounds {
    pub max_history: usize,
    pub min_response: usize,
    pub max_response: usize,
}

impl Default for LengthBounds {
    fn default() -> Self {
        LengthBounds {
            max_history: 72,
            min_response: 1,
            max_response: 36,
        }
    }
}

impl LengthBounds {
    /// A sample must survive layout construction under every framework; the
    /// dual-stream training layout `S + 2T + 1` is the worst case.
    fn admits(&self, source_tokens: usize, response_tokens: usize) -> bool {
        source_tokens >= 1
            && source_tokens <= self.max_history
            && response_tokens >= self.min_response
            && response_tokens <= self.max_response
            && source_tokens + 2 * response_tokens + 1 <= MAX_INPUT_LEN
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct LoadStats {
    pub kept: usize,
    pub skipped_malformed: usize,
    pub skipped_length: usize,
}

/// Reads a dialogue corpus: one `history<TAB>response` sample per line.
/// Malformed lines and lines violating the length bounds are skipped and
/// counted.
pub fn load_corpus(
    path: impl AsRef<Path>,
    bounds: &LengthBounds,
) -> Result<(Vec<DialogueSample>, LoadStats)> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Corpus(format!("cannot read corpus {}: {e}", path.display())))?;
    let mut samples = Vec::new();
    let mut stats = LoadStats::default();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 2 {
            stats.skipped_malformed += 1;
            continue;
        }
        let history: Vec<String> = fields[0]
            .split(" [SEP] ")
            .map(|t| t.trim().to_string())
            .filter(|t| !t.is_empty())
            .collect();
        let response = fields[1].trim().to_string();
        if history.is_empty() || response.is_empty() {
            stats.skipped_malformed += 1;
            continue;
        }
        // token counts as the tokenizer will see them, [SEP]s included
        let source_tokens =
            history.iter().map(|t| t.split_whitespace().count()).sum::<usize>() + history.len() - 1;
        let response_tokens = response.split_whitespace().count();
        if !LengthBounds::admits(bounds, source_tokens, response_tokens) {
            stats.skipped_length += 1;
            continue;
        }
        samples.push(DialogueSample { history, response });
        stats.kept += 1;
    }
    if samples.is_empty() {
        return Err(Error::Corpus(format!(
            "no valid samples in {} ({} malformed, {} length-filtered)",
            path.display(),
            stats.skipped_malformed,
            stats.skipped_length
        )));
    }
    if stats.skipped_malformed + stats.skipped_length > 0 {
        log::warn!(
            "{}: skipped {} malformed and {} length-violating lines",
            path.display(),
            stats.skipped_malformed,
            stats.skipped_length
        );
    }
    Ok((samples, stats))
}

/// Reads a plain-text corpus: one sentence per line.
pub fn load_text_corpus(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Corpus(format!("cannot read corpus {}: {e}", path.display())))?;
    let lines: Vec<String> = text
        .lines()
        .map(|l| l.trim().to_string())
        .filter(|l| !l.is_empty())
        .collect();
    if lines.is_empty() {
        return Err(Error::Corpus(format!("no sentences in {}", path.display())));
    }
    Ok(lines)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthTask {
    Echo,
    Reverse,
    TemplatedQa,
    GrammarLm,
}

impl SynthTask {
    pub fn parse(s: &str) -> Result<SynthTask> {
        match s.to_ascii_lowercase().as_str() {
            "echo" => Ok(SynthTask::Echo),
            "reverse" => Ok(SynthTask::Reverse),
            "templated-qa" | "qa" => Ok(SynthTask::TemplatedQa),
            "grammar-lm" | "lm" => Ok(SynthTask::GrammarLm),
            other => Err(Error::InvalidArgument(format!(
                "unknown task '{other}' (expected echo, reverse, templated-qa, grammar-lm)"
            ))),
        }
    }
}

/// Terminals of the grammar, shared with the echo/reverse tasks so that
/// language-model pretraining covers the fine-tuning vocabulary.
const NOUNS: [&str; 8] = [
    "robot", "cat", "pilot", "garden", "river", "lamp", "stone", "cloud",
];
const VERBS: [&str; 5] = ["sees", "lifts", "guards", "paints", "finds"];
const DETS: [&str; 2] = ["the", "a"];
const ADJS: [&str; 3] = ["red", "tall", "quiet"];
const PREPS: [&str; 2] = ["near", "under"];

pub fn task_words() -> Vec<&'static str> {
    let mut w = Vec::new();
    w.extend(NOUNS);
    w.extend(VERBS);
    w.extend(DETS);
    w.extend(ADJS);
    w.extend(PREPS);
    w
}

/// Sentence from the fixed 30-rule probabilistic grammar:
/// 2 S + 4 NP + 3 VP + 1 PP productions plus 20 terminal rules.
fn grammar_sentence(rng: &mut ChaCha8Rng) -> String {
    fn pick<'a>(rng: &mut ChaCha8Rng, options: &[&'a str]) -> &'a str {
        options[rng.gen_range(0..options.len())]
    }
    fn np(rng: &mut ChaCha8Rng, out: &mut Vec<String>) {
        let r: f64 = rng.gen();
        if r < 0.35 {
            out.push(pick(rng, &DETS).into());
            out.push(pick(rng, &NOUNS).into());
        } else if r < 0.55 {
            out.push(pick(rng, &DETS).into());
            out.push(pick(rng, &ADJS).into());
            out.push(pick(rng, &NOUNS).into());
        } else if r < 0.85 {
            out.push(pick(rng, &NOUNS).into());
        } else {
            out.push(pick(rng, &ADJS).into());
            out.push(pick(rng, &NOUNS).into());
        }
    }
    fn pp(rng: &mut ChaCha8Rng, out: &mut Vec<String>) {
        out.push(pick(rng, &PREPS).into());
        np(rng, out);
    }
    fn vp(rng: &mut ChaCha8Rng, out: &mut Vec<String>) {
        let r: f64 = rng.gen();
        out.push(pick(rng, &VERBS).into());
        if r < 0.5 {
            np(rng, out);
        } else if r < 0.75 {
            // bare verb
        } else {
            pp(rng, out);
        }
    }
    let mut out = Vec::new();
    np(rng, &mut out);
    let with_pp: f64 = rng.gen();
    vp(rng, &mut out);
    if with_pp < 0.3 {
        pp(rng, &mut out);
    }
    out.join(" ")
}

fn random_turn(rng: &mut ChaCha8Rng) -> Vec<&'static str> {
    // sample without replacement so responses never repeat a unigram
    let words = task_words();
    let len = rng.gen_range(3..=6);
    let mut pool: Vec<&'static str> = words;
    for i in 0..len {
        let j = rng.gen_range(i..pool.len());
        pool.swap(i, j);
    }
    pool.truncate(len);
    pool
}

/// Deterministic synthetic corpora.
pub enum SynthOutput {
    Dialogue(Vec<DialogueSample>),
    Text(Vec<String>),
}

pub fn synth_samples(task: SynthTask, size: usize, seed: u64) -> Result<SynthOutput> {
    if size == 0 {
        return Err(Error::InvalidArgument("size must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, 0xDA7A, 0));
    match task {
        SynthTask::Echo | SynthTask::Reverse => {
            let mut samples = Vec::with_capacity(size);
            for _ in 0..size {
                let turns = if rng.gen_bool(0.3) { 2 } else { 1 };
                let mut history = Vec::with_capacity(turns);
                for _ in 0..turns {
                    history.push(random_turn(&mut rng).join(" "));
                }
                let last: Vec<&str> = history.last().unwrap().split(' ').collect();
                let response = match task {
                    SynthTask::Echo => last.join(" "),
                    SynthTask::Reverse => last.iter().rev().copied().collect::<Vec<_>>().join(" "),
                    _ => unreachable!(),
                };
                samples.push(DialogueSample { history, response });
            }
            Ok(SynthOutput::Dialogue(samples))
        }
        SynthTask::TemplatedQa => {
            let mut samples = Vec::with_capacity(size);
            for _ in 0..size {
                let x = rng.gen_range(0..=20u32);
                let y = rng.gen_range(0..=20u32);
                samples.push(DialogueSample {
                    history: vec![format!("what is {x} plus {y}")],
                    response: format!("{x} plus {y} is {}", x + y),
                });
            }
            Ok(SynthOutput::Dialogue(samples))
        }
        SynthTask::GrammarLm => {
            let mut lines = Vec::with_capacity(size);
            for _ in 0..size {
                lines.push(grammar_sentence(&mut rng));
            }
            Ok(SynthOutput::Text(lines))
        }
    }
}

/// Writes a synthetic corpus file (dialogue TSV for the seq2seq tasks, plain
/// sentences for `grammar-lm`). Byte-identical for identical seeds.
pub fn synth_generate(task: SynthTask, size: usize, seed: u64, path: impl AsRef<Path>) -> Result<()> {
    let mut file = std::fs::File::create(&path)?;
    match synth_samples(task, size, seed)? {
        SynthOutput::Dialogue(samples) => {
            for s in samples {
                writeln!(file, "{}", s.to_line())?;
            }
        }
        SynthOutput::Text(lines) => {
            for l in lines {
                writeln!(file, "{l}")?;
            }
        }
    }
    Ok(())
}

/// Deterministically shuffled stream of padded `TrainingExample` batches.
/// Reshuffles at each epoch boundary from `(seed, epoch)`; example corruption
/// draws come from `(seed, step)` so runs are reproducible.
pub struct BatchIter {
    pairs: Vec<(Vec<usize>, Vec<usize>)>,
    framework: Framework,
    batch_size: usize,
    seed: u64,
    cfg: ObjectiveConfig,
    order: Vec<usize>,
    cursor: usize,
    epoch: u64,
    step: u64,
    pub skipped_overflow: usize,
}

impl BatchIter {
    pub fn new(
        corpus: &[DialogueSample],
        vocab: &Vocab,
        framework: Framework,
        batch_size: usize,
        seed: u64,
        cfg: ObjectiveConfig,
    ) -> Result<BatchIter> {
        if batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        let mut pairs = Vec::with_capacity(corpus.len());
        let mut skipped = 0usize;
        for s in corpus {
            let (src, tgt) = s.encode(vocab);
            if src.is_empty()
                || tgt.is_empty()
                || src.len() + 2 * tgt.len() + 1 > MAX_INPUT_LEN
            {
                skipped += 1;
                continue;
            }
            pairs.push((src, tgt));
        }
        if pairs.is_empty() {
            return Err(Error::Corpus("corpus has no usable samples".into()));
        }
        if skipped > 0 {
            log::warn!("batch_iter: skipped {skipped} samples exceeding the length budget");
        }
        let mut it = BatchIter {
            pairs,
            framework,
            batch_size,
            seed,
            cfg,
            order: Vec::new(),
            cursor: 0,
            epoch: 0,
            step: 0,
            skipped_overflow: skipped,
        };
        it.reshuffle();
        Ok(it)
    }

    pub fn sample_count(&self) -> usize {
        self.pairs.len()
    }

    fn reshuffle(&mut self) {
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, 0x0E0C, self.epoch));
        self.order = (0..self.pairs.len()).collect();
        for i in (1..self.order.len()).rev() {
            let j = rng.gen_range(0..=i);
            self.order.swap(i, j);
        }
        self.cursor = 0;
    }

    /// Builds the next padded batch.
    pub fn next_batch(&mut self) -> Result<Vec<TrainingExample>> {
        if self.cursor >= self.order.len() {
            self.epoch += 1;
            self.reshuffle();
        }
        let end = (self.cursor + self.batch_size).min(self.order.len());
        let idxs: Vec<usize> = self.order[self.cursor..end].to_vec();
        self.cursor = end;
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(self.seed, 0x5A5A, self.step));
        self.step += 1;
        let mut batch = Vec::with_capacity(idxs.len());
        for i in idxs {
            let (src, tgt) = &self.pairs[i];
            batch.push(build_example(self.framework, src, tgt, &self.cfg, &mut rng)?);
        }
        let n_max = batch.iter().map(|e| e.layout.len()).max().unwrap();
        let enc_max = batch
            .iter()
            .filter_map(|e| e.encoder.as_ref().map(|enc| enc.layout.len()))
            .max()
            .unwrap_or(0);
        for e in &mut batch {
            e.pad_to(n_max, enc_max)?;
        }
        Ok(batch)
    }
}

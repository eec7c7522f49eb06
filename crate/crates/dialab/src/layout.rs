//! Sequence layouts and self-attention allow-matrices.
//!
//! A layout assigns every physical position a stream (source, target token,
//! target mask, padding), a position-embedding index and a type id. The mask
//! builders turn a layout into the n x n allow-matrix `M` that each framework
//! feeds to masked attention: `true` means "may attend" (an additive 0),
//! `false` means the score is treated as negative infinity.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::numcore::BoolMat;

/// Hard cap on the total (padded) input length.
pub const MAX_INPUT_LEN: usize = 128;

/// The seven supported fine-tuning frameworks.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Framework {
    /// Explicit encoder-decoder, GPT lineage.
    Ed,
    /// Decoder-only, left-to-right everywhere, GPT lineage.
    Dec,
    /// Decoder-only, bidirectional source, causal target, masked-LM loss.
    Mlm,
    /// Same architecture as `Mlm` with an auto-regressive loss.
    Ar,
    /// `Mlm` with interval-bidirectional attention over the generated prefix.
    PfFree,
    /// `Mlm` with a parallel mask stream; training contexts equal generation.
    FgFree,
    /// Both corrections combined.
    PffgFree,
}

pub const ALL_FRAMEWORKS: [Framework; 7] = [
    Framework::Ed,
    Framework::Dec,
    Framework::Mlm,
    Framework::Ar,
    Framework::PfFree,
    Framework::FgFree,
    Framework::PffgFree,
];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Architecture {
    EncoderDecoder,
    DecoderOnly,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionDirection {
    Bidirectional,
    LeftToRight,
    IntervalBidirectional,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrainObjective {
    AutoRegressive,
    MaskedLm,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PretrainedLm {
    Gpt,
    Bert,
}

/// One row of the framework characteristics table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Characteristics {
    pub pretrained_lm: PretrainedLm,
    pub architecture: Architecture,
    pub source_attention: AttentionDirection,
    pub target_attention: AttentionDirection,
    pub objective: TrainObjective,
}

impl Framework {
    pub fn characteristics(&self) -> Characteristics {
        use AttentionDirection::*;
        match self {
            Framework::Ed => Characteristics {
                pretrained_lm: PretrainedLm::Gpt,
                architecture: Architecture::EncoderDecoder,
                source_attention: Bidirectional,
                target_attention: LeftToRight,
                objective: TrainObjective::AutoRegressive,
            },
            Framework::Dec => Characteristics {
                pretrained_lm: PretrainedLm::Gpt,
                architecture: Architecture::DecoderOnly,
                source_attention: LeftToRight,
                target_attention: LeftToRight,
                objective: TrainObjective::AutoRegressive,
            },
            Framework::Mlm => Characteristics {
                pretrained_lm: PretrainedLm::Bert,
                architecture: Architecture::DecoderOnly,
                source_attention: Bidirectional,
                target_attention: LeftToRight,
                objective: TrainObjective::MaskedLm,
            },
            Framework::Ar => Characteristics {
                pretrained_lm: PretrainedLm::Bert,
                architecture: Architecture::DecoderOnly,
                source_attention: Bidirectional,
                target_attention: LeftToRight,
                objective: TrainObjective::AutoRegressive,
            },
            Framework::PfFree => Characteristics {
                pretrained_lm: PretrainedLm::Bert,
                architecture: Architecture::DecoderOnly,
                source_attention: Bidirectional,
                target_attention: IntervalBidirectional,
                objective: TrainObjective::MaskedLm,
            },
            Framework::FgFree | Framework::PffgFree => Characteristics {
                pretrained_lm: PretrainedLm::Bert,
                architecture: Architecture::DecoderOnly,
                source_attention: Bidirectional,
                target_attention: if matches!(self, Framework::PffgFree) {
                    IntervalBidirectional
                } else {
                    LeftToRight
                },
                objective: TrainObjective::MaskedLm,
            },
        }
    }

    /// Frameworks whose training layout carries a parallel mask stream.
    pub fn is_dual_stream(&self) -> bool {
        matches!(self, Framework::FgFree | Framework::PffgFree)
    }

    /// Frameworks with interval-bidirectional target attention.
    pub fn uses_interval(&self) -> bool {
        matches!(self, Framework::PfFree | Framework::PffgFree)
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Framework::Ed => "ed",
            Framework::Dec => "dec",
            Framework::Mlm => "mlm",
            Framework::Ar => "ar",
            Framework::PfFree => "pf-free",
            Framework::FgFree => "fg-free",
            Framework::PffgFree => "pffg-free",
        }
    }

    /// Display label matching the comparison tables.
    pub fn label(&self) -> &'static str {
        match self {
            Framework::Ed => "Trans-ED",
            Framework::Dec => "Trans-Dec",
            Framework::Mlm => "Trans-MLM",
            Framework::Ar => "Trans-AR",
            Framework::PfFree => "PF-free",
            Framework::FgFree => "FG-free",
            Framework::PffgFree => "PF&FG-free",
        }
    }

    pub fn parse(s: &str) -> Result<Framework> {
        match s.to_ascii_lowercase().as_str() {
            "ed" => Ok(Framework::Ed),
            "dec" => Ok(Framework::Dec),
            "mlm" => Ok(Framework::Mlm),
            "ar" => Ok(Framework::Ar),
            "pf-free" | "pf" => Ok(Framework::PfFree),
            "fg-free" | "fg" => Ok(Framework::FgFree),
            "pffg-free" | "pffg" | "pf&fg-free" => Ok(Framework::PffgFree),
            other => Err(Error::InvalidArgument(format!(
                "unknown framework '{other}' (expected ed, dec, mlm, ar, pf-free, fg-free, pffg-free)"
            ))),
        }
    }
}

impl std::fmt::Display for Framework {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Which stream a physical position belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Source,
    TargetToken,
    TargetMask,
    Pad,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionInfo {
    pub stream: Stream,
    /// Index into the position-embedding table. In dual-stream layouts the
    /// mask slot shares this index with its token.
    pub pos_index: usize,
    /// 0 = source side, 1 = target side.
    pub type_id: usize,
    /// Which target slot this position serves, if any.
    pub target_index: Option<usize>,
}

/// Position/type assignment for one concatenated input sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SequenceLayout {
    pub framework: Framework,
    pub source_len: usize,
    pub target_len: usize,
    positions: Vec<PositionInfo>,
}

impl SequenceLayout {
    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn position(&self, i: usize) -> &PositionInfo {
        &self.positions[i]
    }

    pub fn positions(&self) -> &[PositionInfo] {
        &self.positions
    }

    /// Physical index of the token-stream slot for target index `i`.
    pub fn token_slot(&self, i: usize) -> Option<usize> {
        self.positions
            .iter()
            .position(|p| p.stream == Stream::TargetToken && p.target_index == Some(i))
    }

    /// Physical index of the mask-stream slot for target index `i`.
    pub fn mask_slot(&self, i: usize) -> Option<usize> {
        self.positions
            .iter()
            .position(|p| p.stream == Stream::TargetMask && p.target_index == Some(i))
    }

    /// Extends the layout with padding positions up to `n`.
    pub fn pad_to(&mut self, n: usize) -> Result<()> {
        if n > MAX_INPUT_LEN {
            return Err(Error::ExceedsMaxLength {
                len: n,
                max: MAX_INPUT_LEN,
            });
        }
        while self.positions.len() < n {
            let idx = self.positions.len();
            self.positions.push(PositionInfo {
                stream: Stream::Pad,
                pos_index: idx,
                type_id: 0,
                target_index: None,
            });
        }
        Ok(())
    }

    /// Flat layout for language-model pretraining: every position is on the
    /// source stream with type 0. `Dec` gives a causal mask, `Mlm` an
    /// all-allow one.
    pub fn lm(framework: Framework, n: usize) -> Result<SequenceLayout> {
        check_len(n)?;
        Ok(SequenceLayout {
            framework,
            source_len: n,
            target_len: 0,
            positions: (0..n)
                .map(|i| PositionInfo {
                    stream: Stream::Source,
                    pos_index: i,
                    type_id: 0,
                    target_index: None,
                })
                .collect(),
        })
    }
}

/// `build_layout` result: single sequence, or an encoder/decoder pair.
#[derive(Clone, Debug)]
pub enum LayoutBundle {
    Single(SequenceLayout),
    EncoderDecoder {
        encoder: SequenceLayout,
        decoder: SequenceLayout,
    },
}

impl LayoutBundle {
    pub fn single(self) -> Result<SequenceLayout> {
        match self {
            LayoutBundle::Single(l) => Ok(l),
            LayoutBundle::EncoderDecoder { .. } => Err(Error::LayoutMismatch(
                "expected a single-sequence layout, got an encoder/decoder pair".into(),
            )),
        }
    }

    pub fn pair(self) -> Result<(SequenceLayout, SequenceLayout)> {
        match self {
            LayoutBundle::EncoderDecoder { encoder, decoder } => Ok((encoder, decoder)),
            LayoutBundle::Single(_) => Err(Error::LayoutMismatch(
                "expected an encoder/decoder pair, got a single-sequence layout".into(),
            )),
        }
    }
}

fn check_len(n: usize) -> Result<()> {
    if n > MAX_INPUT_LEN {
        return Err(Error::ExceedsMaxLength {
            len: n,
            max: MAX_INPUT_LEN,
        });
    }
    Ok(())
}

fn source_positions(s: usize) -> Vec<PositionInfo> {
    (0..s)
        .map(|i| PositionInfo {
            stream: Stream::Source,
            pos_index: i,
            type_id: 0,
            target_index: None,
        })
        .collect()
}

/// Builds the sequence layout for a `(framework, source_len, target_len)`
/// triple. Decoder-only frameworks give one sequence of `S + T` positions
/// (`S + 2T` for the dual-stream layouts); `Ed` gives an encoder layout of
/// length `S` plus a decoder layout of length `T`.
pub fn build_layout(
    framework: Framework,
    source_len: usize,
    target_len: usize,
    pad_to: Option<usize>,
) -> Result<LayoutBundle> {
    if source_len == 0 || target_len == 0 {
        return Err(Error::InvalidArgument(
            "build_layout requires source_len >= 1 and target_len >= 1".into(),
        ));
    }
    match framework {
        Framework::Ed => {
            check_len(source_len)?;
            check_len(target_len)?;
            let encoder = SequenceLayout {
                framework: Framework::Ed,
                source_len,
                target_len: 0,
                positions: source_positions(source_len),
            };
            let mut decoder = SequenceLayout {
                framework: Framework::Ed,
                source_len: 0,
                target_len,
                positions: (0..target_len)
                    .map(|j| PositionInfo {
                        stream: Stream::TargetToken,
                        pos_index: j,
                        type_id: 1,
                        target_index: Some(j),
                    })
                    .collect(),
            };
            if let Some(n) = pad_to {
                decoder.pad_to(n)?;
            }
            Ok(LayoutBundle::EncoderDecoder { encoder, decoder })
        }
        Framework::FgFree | Framework::PffgFree => {
            let mut layout = build_fg_layout(framework, source_len, target_len, false)?;
            if let Some(n) = pad_to {
                layout.pad_to(n)?;
            }
            Ok(LayoutBundle::Single(layout))
        }
        _ => {
            let n = source_len + target_len;
            check_len(n)?;
            let mut positions = source_positions(source_len);
            for j in 0..target_len {
                positions.push(PositionInfo {
                    stream: Stream::TargetToken,
                    pos_index: source_len + j,
                    type_id: 1,
                    target_index: Some(j),
                });
            }
            let mut layout = SequenceLayout {
                framework,
                source_len,
                target_len,
                positions,
            };
            if let Some(n) = pad_to {
                layout.pad_to(n)?;
            }
            Ok(LayoutBundle::Single(layout))
        }
    }
}

/// Dual-stream layout: interleaved `(m_i, y_i)` pairs sharing one position
/// embedding. With `trailing_mask` an extra lone mask slot `m_T` follows the
/// last pair (used by training examples to supervise the end of sequence),
/// giving `S + 2T + 1` positions.
pub fn build_fg_layout(
    framework: Framework,
    source_len: usize,
    target_len: usize,
    trailing_mask: bool,
) -> Result<SequenceLayout> {
    if !framework.is_dual_stream() {
        return Err(Error::LayoutMismatch(format!(
            "{framework} is not a dual-stream framework"
        )));
    }
    let n = source_len + 2 * target_len + usize::from(trailing_mask);
    check_len(n)?;
    let mut positions = source_positions(source_len);
    for j in 0..target_len {
        positions.push(PositionInfo {
            stream: Stream::TargetMask,
            pos_index: source_len + j,
            type_id: 1,
            target_index: Some(j),
        });
        positions.push(PositionInfo {
            stream: Stream::TargetToken,
            pos_index: source_len + j,
            type_id: 1,
            target_index: Some(j),
        });
    }
    let mut target_len_eff = target_len;
    if trailing_mask {
        positions.push(PositionInfo {
            stream: Stream::TargetMask,
            pos_index: source_len + target_len,
            type_id: 1,
            target_index: Some(target_len),
        });
        target_len_eff += 1;
    }
    Ok(SequenceLayout {
        framework,
        source_len,
        target_len: target_len_eff,
        positions,
    })
}

/// The n x n boolean allow-matrix for one sequence (`true` = may attend).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask(BoolMat);

impl AttentionMask {
    pub fn from_bool_mat(m: BoolMat) -> AttentionMask {
        AttentionMask(m)
    }

    pub fn rows(&self) -> usize {
        self.0.rows()
    }

    pub fn cols(&self) -> usize {
        self.0.cols()
    }

    pub fn allowed(&self, i: usize, j: usize) -> bool {
        self.0.get(i, j)
    }

    pub fn row(&self, i: usize) -> &[bool] {
        self.0.row(i)
    }

    pub fn as_bool_mat(&self) -> &BoolMat {
        &self.0
    }

    pub fn into_bool_mat(self) -> BoolMat {
        self.0
    }

    /// Allowed column indices of one row, ascending.
    pub fn allowed_columns(&self, i: usize) -> Vec<usize> {
        self.row(i)
            .iter()
            .enumerate()
            .filter_map(|(j, &a)| a.then_some(j))
            .collect()
    }

    /// Textual 0/1 grid, row-major, one row per line.
    pub fn to_grid_string(&self) -> String {
        let mut out = String::with_capacity(self.rows() * (self.cols() + 1));
        for i in 0..self.rows() {
            for &a in self.row(i) {
                out.push(if a { '1' } else { '0' });
            }
            out.push('\n');
        }
        out
    }

    fn check_rows_nonempty(&self) -> Result<()> {
        for i in 0..self.rows() {
            if !self.row(i).iter().any(|&a| a) {
                return Err(Error::EmptyAttentionRow(i));
            }
        }
        Ok(())
    }
}

fn allow_pair(layout: &SequenceLayout, i: usize, j: usize, boundary: usize) -> bool {
    let pi = layout.position(i);
    let pj = layout.position(j);
    if pi.stream == Stream::Pad {
        return i == j;
    }
    if pj.stream == Stream::Pad {
        return false;
    }
    match layout.framework {
        Framework::Dec => j <= i,
        Framework::Ed => match pi.stream {
            Stream::Source => true,
            _ => j <= i,
        },
        Framework::Mlm | Framework::Ar | Framework::PfFree => match pi.stream {
            Stream::Source => pj.stream == Stream::Source,
            Stream::TargetToken => {
                if pj.stream == Stream::Source {
                    return true;
                }
                if pj.stream != Stream::TargetToken {
                    return false;
                }
                let ti = pi.target_index.unwrap();
                let tj = pj.target_index.unwrap();
                if ti < boundary {
                    tj < boundary
                } else {
                    tj <= ti
                }
            }
            _ => false,
        },
        Framework::FgFree | Framework::PffgFree => {
            let ti = pi.target_index;
            match pi.stream {
                Stream::Source => pj.stream == Stream::Source,
                Stream::TargetToken => {
                    if pj.stream == Stream::Source {
                        return true;
                    }
                    if pj.stream != Stream::TargetToken {
                        return false;
                    }
                    let ti = ti.unwrap();
                    let tj = pj.target_index.unwrap();
                    if ti < boundary {
                        tj < boundary
                    } else {
                        tj <= ti
                    }
                }
                Stream::TargetMask => {
                    if pj.stream == Stream::Source {
                        return true;
                    }
                    if j == i {
                        return true;
                    }
                    if pj.stream != Stream::TargetToken {
                        return false;
                    }
                    let ti = ti.unwrap();
                    let tj = pj.target_index.unwrap();
                    // inside the bidirectional block the slot sees the whole
                    // block (keeps visibility transitively closed); it never
                    // carries a loss there
                    if ti < boundary {
                        tj < boundary
                    } else {
                        tj < ti
                    }
                }
                Stream::Pad => unreachable!(),
            }
        }
    }
}

fn build_mask_with_boundary(layout: &SequenceLayout, boundary: usize) -> Result<AttentionMask> {
    let n = layout.len();
    let mut m = BoolMat::new(n, n, false);
    for i in 0..n {
        for j in 0..n {
            if allow_pair(layout, i, j, boundary) {
                m.set(i, j, true);
            }
        }
    }
    let mask = AttentionMask(m);
    mask.check_rows_nonempty()?;
    Ok(mask)
}

/// Self-attention allow-matrix for the framework's canonical pattern.
/// Interval frameworks degenerate to their boundary-0 mask; use
/// `build_pf_interval_mask` for a specific boundary.
pub fn build_framework_mask(layout: &SequenceLayout, framework: Framework) -> Result<AttentionMask> {
    if layout.framework != framework {
        return Err(Error::LayoutMismatch(format!(
            "layout built for {}, mask requested for {}",
            layout.framework, framework
        )));
    }
    if framework == Framework::Ed {
        let has_source = layout.positions().iter().any(|p| p.stream == Stream::Source);
        let has_target = layout
            .positions()
            .iter()
            .any(|p| matches!(p.stream, Stream::TargetToken | Stream::TargetMask));
        if has_source && has_target {
            return Err(Error::LayoutMismatch(
                "an Ed layout mixes encoder and decoder positions".into(),
            ));
        }
    }
    build_mask_with_boundary(layout, 0)
}

/// Interval-bidirectional allow-matrix: target indices below the boundary
/// `b` attend each other freely, indices at or above it stay left-to-right.
/// `b` must be a multiple of the interval `k`; `b = 0` reproduces the plain
/// framework mask.
pub fn build_pf_interval_mask(layout: &SequenceLayout, k: usize, b: usize) -> Result<AttentionMask> {
    if k == 0 {
        return Err(Error::InvalidBoundary("interval k must be >= 1".into()));
    }
    if b % k != 0 {
        return Err(Error::InvalidBoundary(format!(
            "boundary {b} is not a multiple of interval {k}"
        )));
    }
    if b > layout.target_len {
        return Err(Error::InvalidBoundary(format!(
            "boundary {b} exceeds target length {}",
            layout.target_len
        )));
    }
    if matches!(layout.framework, Framework::Dec | Framework::Ed) {
        return Err(Error::LayoutMismatch(format!(
            "interval masks are not defined for {}",
            layout.framework
        )));
    }
    build_mask_with_boundary(layout, b)
}

/// Cross-attention mask: every decoder position may see every non-padding
/// encoder position.
pub fn build_cross_mask(decoder: &SequenceLayout, encoder: &SequenceLayout) -> AttentionMask {
    let t = decoder.len();
    let s = encoder.len();
    let mut m = BoolMat::new(t, s, false);
    for i in 0..t {
        for j in 0..s {
            let ok = encoder.position(j).stream != Stream::Pad;
            m.set(i, j, ok);
        }
    }
    AttentionMask(m)
}

/// Set of target indices selected for `[MASK]` replacement.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct MaskedSet(BTreeSet<usize>);

impl MaskedSet {
    pub fn new() -> Self {
        MaskedSet(BTreeSet::new())
    }

    pub fn insert(&mut self, i: usize) {
        self.0.insert(i);
    }

    pub fn contains(&self, i: usize) -> bool {
        self.0.contains(&i)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().copied()
    }
}

impl FromIterator<usize> for MaskedSet {
    fn from_iter<T: IntoIterator<Item = usize>>(iter: T) -> Self {
        MaskedSet(iter.into_iter().collect())
    }
}

/// Conflicting ordered pairs under whole-target bidirectional prediction:
/// serving masked position `i` forbids attention to columns beyond `i`, while
/// serving a later masked `j` requires it, so any two distinct masked
/// positions clash. Empty iff at most one position is masked.
pub fn detect_mask_conflict(masked: &MaskedSet, target_len: usize) -> Result<Vec<(usize, usize)>> {
    for p in masked.iter() {
        if p >= target_len {
            return Err(Error::InvalidArgument(format!(
                "masked position {p} outside target length {target_len}"
            )));
        }
    }
    let items: Vec<usize> = masked.iter().collect();
    let mut pairs = Vec::new();
    for (a, &i) in items.iter().enumerate() {
        for &j in &items[a + 1..] {
            pairs.push((i, j));
        }
    }
    Ok(pairs)
}

/// Target indices whose hidden states must be recomputed at generation step
/// `t`. The previous step's query slot is finalized with its chosen token and
/// the new query position is computed; interval frameworks additionally
/// recompute the whole prefix at each boundary. For `Ed` only the new decoder
/// position is computed and the encoder is never touched.
pub fn incremental_update_range(framework: Framework, t: usize, k: usize) -> Result<Vec<usize>> {
    if framework.uses_interval() && k == 0 {
        return Err(Error::InvalidBoundary("interval k must be >= 1".into()));
    }
    let range = match framework {
        Framework::Ed => vec![t],
        Framework::PfFree | Framework::PffgFree => {
            if t > 0 && t % k == 0 {
                (0..=t).collect()
            } else if t == 0 {
                vec![0]
            } else {
                vec![t - 1, t]
            }
        }
        _ => {
            if t == 0 {
                vec![0]
            } else {
                vec![t - 1, t]
            }
        }
    };
    Ok(range)
}

pub mod oracle {
    //! Brute-force reference for the mask builders: a per-pair predicate
    //! written straight from the framework definitions, sharing no code with
    //! `build_framework_mask`. Exists for the validation suites.

    use super::*;

    /// May position `i` of `layout` attend position `j`, given the
    /// bidirectional block `[0, boundary)` on the target side?
    pub fn may_attend(layout: &SequenceLayout, i: usize, j: usize, boundary: usize) -> bool {
        let a = layout.position(i);
        let b = layout.position(j);

        // Padding attends only itself and is never attended.
        if a.stream == Stream::Pad {
            return i == j;
        }
        if b.stream == Stream::Pad {
            return false;
        }

        // Left-to-right over the whole concatenated sequence.
        if layout.framework == Framework::Dec {
            return j <= i;
        }

        // Encoder side fully bidirectional, decoder side causal.
        if layout.framework == Framework::Ed {
            if a.stream == Stream::Source {
                return true;
            }
            return j <= i;
        }

        // Everything below: decoder-only with a bidirectional source.
        if a.stream == Stream::Source {
            return b.stream == Stream::Source;
        }
        if b.stream == Stream::Source {
            return true;
        }

        let ai = a.target_index.expect("target positions carry an index");
        let bi = b.target_index.expect("target positions carry an index");

        if a.stream == Stream::TargetMask {
            // A prediction slot sees the real tokens before it and itself
            // (the whole block when it sits inside one); no other mask slot
            // is ever visible to anyone.
            if i == j {
                return true;
            }
            if b.stream != Stream::TargetToken {
                return false;
            }
            if ai < boundary {
                return bi < boundary;
            }
            return bi < ai;
        }

        // Token stream (or the single target stream of MLM-style layouts).
        if b.stream == Stream::TargetMask {
            return false;
        }
        let both_in_block = ai < boundary && bi < boundary;
        if both_in_block {
            return true;
        }
        if ai < boundary {
            // Inside the block, nothing beyond the block is visible.
            return false;
        }
        bi <= ai
    }

    /// Full allow-matrix computed by O(n^2) predicate evaluation.
    pub fn mask_rule_oracle(layout: &SequenceLayout, boundary: Option<usize>) -> AttentionMask {
        let n = layout.len();
        let b = boundary.unwrap_or(0);
        let mut m = BoolMat::new(n, n, false);
        for i in 0..n {
            for j in 0..n {
                if may_attend(layout, i, j, b) {
                    m.set(i, j, true);
                }
            }
        }
        AttentionMask::from_bool_mat(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn single(fw: Framework, s: usize, t: usize) -> SequenceLayout {
        build_layout(fw, s, t, None).unwrap().single().unwrap()
    }

    #[test]
    fn mlm_layout_and_types() {
        let l = single(Framework::Mlm, 3, 2);
        assert_eq!(l.len(), 5);
        let types: Vec<usize> = l.positions().iter().map(|p| p.type_id).collect();
        assert_eq!(types, vec![0, 0, 0, 1, 1]);
        let pos: Vec<usize> = l.positions().iter().map(|p| p.pos_index).collect();
        assert_eq!(pos, vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn fg_layout_shares_position_embeddings() {
        let l = single(Framework::FgFree, 2, 2);
        assert_eq!(l.len(), 6);
        let streams: Vec<Stream> = l.positions().iter().map(|p| p.stream).collect();
        assert_eq!(
            streams,
            vec![
                Stream::Source,
                Stream::Source,
                Stream::TargetMask,
                Stream::TargetToken,
                Stream::TargetMask,
                Stream::TargetToken
            ]
        );
        let pos: Vec<usize> = l.positions().iter().map(|p| p.pos_index).collect();
        assert_eq!(pos, vec![0, 1, 2, 2, 3, 3]);
        // each target index has exactly one mask and one token slot
        for i in 0..2 {
            assert!(l.mask_slot(i).is_some());
            assert!(l.token_slot(i).is_some());
        }
    }

    #[test]
    fn ed_layout_is_a_pair() {
        let (enc, dec) = build_layout(Framework::Ed, 3, 2, None).unwrap().pair().unwrap();
        assert_eq!(enc.len(), 3);
        assert_eq!(dec.len(), 2);
        assert!(enc.positions().iter().all(|p| p.stream == Stream::Source));
        assert!(dec.positions().iter().all(|p| p.stream == Stream::TargetToken));
    }

    #[test]
    fn overflow_is_an_error() {
        let err = build_layout(Framework::Mlm, 100, 40, None).unwrap_err();
        assert!(err.to_string().contains("maximum input length"));
        assert!(build_fg_layout(Framework::FgFree, 60, 35, true).is_err());
    }

    #[test]
    fn mlm_mask_rows() {
        let l = single(Framework::Mlm, 3, 2);
        let m = build_framework_mask(&l, Framework::Mlm).unwrap();
        assert_eq!(m.allowed_columns(3), vec![0, 1, 2, 3]);
        assert_eq!(m.allowed_columns(4), vec![0, 1, 2, 3, 4]);
        for i in 0..3 {
            assert_eq!(m.allowed_columns(i), vec![0, 1, 2]);
        }
    }

    #[test]
    fn dec_mask_is_lower_triangular() {
        let l = single(Framework::Dec, 2, 2);
        let m = build_framework_mask(&l, Framework::Dec).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(m.allowed(i, j), j <= i, "({i},{j})");
            }
        }
        assert_eq!(m.to_grid_string(), "1000\n1100\n1110\n1111\n");
    }

    #[test]
    fn fg_mask_invisibility() {
        let l = single(Framework::FgFree, 2, 2);
        let m = build_framework_mask(&l, Framework::FgFree).unwrap();
        // positions: [src0, src1, m0, y0, m1, y1]
        assert_eq!(m.allowed_columns(4), vec![0, 1, 3, 4]); // m1: src, y0, itself
        // no row except m0's own allows column m0 (= 2)
        for i in 0..6 {
            assert_eq!(m.allowed(i, 2), i == 2, "row {i}");
        }
        // token stream never sees any mask column
        for &tok_row in &[3usize, 5] {
            assert!(!m.allowed(tok_row, 2));
            assert!(!m.allowed(tok_row, 4));
        }
    }

    #[test]
    fn framework_layout_mismatch_is_an_error() {
        let l = single(Framework::Mlm, 2, 2);
        assert!(build_framework_mask(&l, Framework::Dec).is_err());
    }

    #[test]
    fn pf_interval_mask_fig_pattern() {
        // k=3, b=3, S=2, T=5: y_1 sees {src, y_0, y_1, y_2}; y_4 sees everything
        let l = single(Framework::PfFree, 2, 5);
        let m = build_pf_interval_mask(&l, 3, 3).unwrap();
        assert_eq!(m.allowed_columns(3), vec![0, 1, 2, 3, 4]); // y_1
        assert_eq!(m.allowed_columns(6), vec![0, 1, 2, 3, 4, 5, 6]); // y_4
    }

    #[test]
    fn pf_boundary_zero_degenerates_to_mlm() {
        let pf = single(Framework::PfFree, 2, 5);
        let m0 = build_pf_interval_mask(&pf, 3, 0).unwrap();
        let mlm = single(Framework::Mlm, 2, 5);
        let mm = build_framework_mask(&mlm, Framework::Mlm).unwrap();
        for i in 0..pf.len() {
            assert_eq!(m0.row(i), mm.row(i));
        }
    }

    #[test]
    fn pf_default_interval_case() {
        // k=5, b=5, S=1, T=7: y_6 is past the boundary, left-to-right
        let l = single(Framework::PfFree, 1, 7);
        let m = build_pf_interval_mask(&l, 5, 5).unwrap();
        assert_eq!(m.allowed_columns(7), (0..8).collect::<Vec<_>>());
        // y_2 sits inside the block: sees src and y_0..y_4 (all block tokens)
        assert_eq!(m.allowed_columns(3), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn pf_invalid_boundaries() {
        let l = single(Framework::PfFree, 2, 5);
        assert!(build_pf_interval_mask(&l, 3, 2).is_err());
        assert!(build_pf_interval_mask(&l, 3, 6).is_err());
        assert!(build_pf_interval_mask(&l, 0, 0).is_err());
    }

    #[test]
    fn conflict_detection() {
        let masked: MaskedSet = [1usize, 3].into_iter().collect();
        assert_eq!(detect_mask_conflict(&masked, 4).unwrap(), vec![(1, 3)]);
        let one: MaskedSet = [2usize].into_iter().collect();
        assert!(detect_mask_conflict(&one, 4).unwrap().is_empty());
        assert!(detect_mask_conflict(&MaskedSet::new(), 4).unwrap().is_empty());
        assert!(detect_mask_conflict(&[9usize].into_iter().collect(), 4).is_err());
    }

    #[test]
    fn update_ranges() {
        assert_eq!(incremental_update_range(Framework::PfFree, 2, 3).unwrap(), vec![1, 2]);
        assert_eq!(
            incremental_update_range(Framework::PfFree, 3, 3).unwrap(),
            vec![0, 1, 2, 3]
        );
        assert_eq!(incremental_update_range(Framework::Dec, 0, 1).unwrap(), vec![0]);
        assert_eq!(incremental_update_range(Framework::Dec, 5, 1).unwrap(), vec![4, 5]);
        assert_eq!(incremental_update_range(Framework::Ed, 4, 1).unwrap(), vec![4]);
    }

    #[test]
    fn oracle_trivial_cases() {
        let dec = single(Framework::Dec, 1, 1);
        let m = oracle::mask_rule_oracle(&dec, None);
        assert_eq!(m.to_grid_string(), "10\n11\n");
        let mlm = single(Framework::Mlm, 1, 1);
        let m = oracle::mask_rule_oracle(&mlm, None);
        assert_eq!(m.allowed_columns(0), vec![0]);
        assert_eq!(m.allowed_columns(1), vec![0, 1]);
    }

    #[test]
    fn builders_match_oracle_small() {
        for fw in ALL_FRAMEWORKS {
            for s in 1..=4 {
                for t in 1..=4 {
                    match build_layout(fw, s, t, None).unwrap() {
                        LayoutBundle::Single(l) => {
                            let m = build_framework_mask(&l, fw).unwrap();
                            let o = oracle::mask_rule_oracle(&l, None);
                            assert_eq!(m, o, "{fw} S={s} T={t}");
                        }
                        LayoutBundle::EncoderDecoder { encoder, decoder } => {
                            for l in [encoder, decoder] {
                                let m = build_framework_mask(&l, fw).unwrap();
                                let o = oracle::mask_rule_oracle(&l, None);
                                assert_eq!(m, o, "{fw} S={s} T={t}");
                            }
                        }
                    }
                }
            }
        }
    }

    proptest! {
        #[test]
        fn every_row_nonempty_and_causality_holds(
            fw_idx in 0usize..7,
            s in 1usize..=8,
            t in 1usize..=8,
            k in 1usize..=5,
        ) {
            let fw = ALL_FRAMEWORKS[fw_idx];
            let bundle = build_layout(fw, s, t, None).unwrap();
            let layouts = match bundle {
                LayoutBundle::Single(l) => vec![l],
                LayoutBundle::EncoderDecoder { encoder, decoder } => vec![encoder, decoder],
            };
            for l in layouts {
                let masks: Vec<AttentionMask> = if fw.uses_interval() {
                    let mut v = vec![];
                    let mut b = 0;
                    while b <= l.target_len {
                        v.push(build_pf_interval_mask(&l, k, b).unwrap());
                        b += k;
                    }
                    v
                } else {
                    vec![build_framework_mask(&l, fw).unwrap()]
                };
                for (bi, m) in masks.iter().enumerate() {
                    let boundary = if fw.uses_interval() { bi * k } else { 0 };
                    for i in 0..l.len() {
                        prop_assert!(m.row(i).iter().any(|&a| a));
                        // monotone causality: a target row seeing a later target
                        // column implies both sit inside the bidirectional block
                        if fw == Framework::Ed { continue; }
                        let pi = l.position(i);
                        if pi.stream != Stream::TargetToken { continue; }
                        for j in 0..l.len() {
                            let pj = l.position(j);
                            if pj.stream != Stream::TargetToken { continue; }
                            let (ti, tj) = (pi.target_index.unwrap(), pj.target_index.unwrap());
                            if m.allowed(i, j) && tj > ti {
                                prop_assert!(ti < boundary && tj < boundary,
                                    "{fw} row {i} col {j} boundary {boundary}");
                            }
                        }
                    }
                }
            }
        }

        #[test]
        fn conflict_empty_iff_at_most_one(bits in 0u32..64) {
            // all subsets of [0,6)
            let masked: MaskedSet = (0..6).filter(|i| bits & (1 << i) != 0).collect();
            let pairs = detect_mask_conflict(&masked, 6).unwrap();
            prop_assert_eq!(pairs.is_empty(), masked.len() <= 1);
        }
    }
}

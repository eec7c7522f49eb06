//! Embeddings, the masked multi-head attention block stack, and the LM head.
//!
//! One forward pass concatenates a padded batch into a single `(B*n) x d`
//! activation and runs it through `L` pre-norm blocks:
//! `h + attn(ln(h))`, an optional cross-attention sub-layer for
//! encoder-decoder decoding, then `h + ffn(ln(h))`. The LM head projects onto
//! the vocabulary, tied to the token embedding by default.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::layout::{build_framework_mask, AttentionMask, Framework, SequenceLayout};
use crate::numcore::{BoolMat, Real, Tensor};

pub const LN_EPS: f64 = 1e-5;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden: usize,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub type_count: usize,
    pub tie_output_embedding: bool,
}

impl ModelConfig {
    /// Desk-scale defaults: 2 layers, 4 heads, 64 hidden.
    pub fn desk_default(vocab_size: usize) -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 4,
            hidden: 64,
            vocab_size,
            max_positions: crate::layout::MAX_INPUT_LEN,
            type_count: 2,
            tie_output_embedding: true,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.hidden
    }

    pub fn validate(&self) -> Result<()> {
        if self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "hidden {} not divisible by heads {}",
                self.hidden, self.heads
            )));
        }
        if self.vocab_size < 7 {
            return Err(Error::InvalidConfig(format!(
                "vocab_size {} leaves no room for content tokens beyond the specials",
                self.vocab_size
            )));
        }
        if self.max_positions == 0 || self.type_count < 2 {
            return Err(Error::InvalidConfig("max_positions/type_count too small".into()));
        }
        Ok(())
    }
}

/// Named weight tensors in a stable creation order.
pub struct ParameterSet<E: Real> {
    entries: Vec<(String, Tensor<E>)>,
    index: HashMap<String, usize>,
}

impl<E: Real> ParameterSet<E> {
    pub fn new() -> Self {
        ParameterSet {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<E>) {
        let name = name.into();
        debug_assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<E>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].1)
            .ok_or_else(|| Error::ShapeMismatch(format!("missing parameter '{name}'")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn named(&self) -> &[(String, Tensor<E>)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count across all tensors.
    pub fn scalar_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn zero_grads(&self) {
        for (_, t) in &self.entries {
            t.zero_grad();
        }
    }
}

impl<E: Real> Default for ParameterSet<E> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InitKind {
    Normal,
    Zero,
    One,
}

#[derive(Clone, Debug)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: InitKind,
}

fn block_specs(prefix: &str, cfg: &ModelConfig, cross: bool, out: &mut Vec<ParamSpec>) {
    let d = cfg.hidden;
    let f = cfg.ffn_dim();
    let spec = |name: String, shape: Vec<usize>, init: InitKind| ParamSpec { name, shape, init };
    for i in 0..cfg.layers {
        let p = format!("{prefix}layers.{i}");
        out.push(spec(format!("{p}.ln1.gamma"), vec![d], InitKind::One));
        out.push(spec(format!("{p}.ln1.beta"), vec![d], InitKind::Zero));
        for w in ["wq", "wk", "wv", "wo"] {
            out.push(spec(format!("{p}.attn.{w}"), vec![d, d], InitKind::Normal));
        }
        for b in ["bq", "bk", "bv", "bo"] {
            out.push(spec(format!("{p}.attn.{b}"), vec![d], InitKind::Zero));
        }
        if cross {
            out.push(spec(format!("{p}.lnx.gamma"), vec![d], InitKind::One));
            out.push(spec(format!("{p}.lnx.beta"), vec![d], InitKind::Zero));
            for w in ["wq", "wk", "wv", "wo"] {
                out.push(spec(format!("{p}.cross.{w}"), vec![d, d], InitKind::Normal));
            }
            for b in ["bq", "bk", "bv", "bo"] {
                out.push(spec(format!("{p}.cross.{b}"), vec![d], InitKind::Zero));
            }
        }
        out.push(spec(format!("{p}.ln2.gamma"), vec![d], InitKind::One));
        out.push(spec(format!("{p}.ln2.beta"), vec![d], InitKind::Zero));
        out.push(spec(format!("{p}.ffn.w1"), vec![d, f], InitKind::Normal));
        out.push(spec(format!("{p}.ffn.b1"), vec![f], InitKind::Zero));
        out.push(spec(format!("{p}.ffn.w2"), vec![f, d], InitKind::Normal));
        out.push(spec(format!("{p}.ffn.b2"), vec![d], InitKind::Zero));
    }
}

/// Full parameter inventory for a decoder-only stack, or for an
/// encoder-decoder model (shared embeddings, `encoder.`/`decoder.` stacks,
/// fresh cross-attention in the decoder).
pub fn parameter_specs(cfg: &ModelConfig, encoder_decoder: bool) -> Vec<ParamSpec> {
    let d = cfg.hidden;
    let mut out = vec![
        ParamSpec {
            name: "tok_emb".into(),
            shape: vec![cfg.vocab_size, d],
            init: InitKind::Normal,
        },
        ParamSpec {
            name: "pos_emb".into(),
            shape: vec![cfg.max_positions, d],
            init: InitKind::Normal,
        },
        // type embeddings are absent from the pretraining lineages; they are
        // added zero-initialized and learned where used
        ParamSpec {
            name: "type_emb".into(),
            shape: vec![cfg.type_count, d],
            init: InitKind::Zero,
        },
    ];
    if !cfg.tie_output_embedding {
        out.push(ParamSpec {
            name: "head.weight".into(),
            shape: vec![d, cfg.vocab_size],
            init: InitKind::Normal,
        });
    }
    out.push(ParamSpec {
        name: "head.bias".into(),
        shape: vec![cfg.vocab_size],
        init: InitKind::Zero,
    });
    if encoder_decoder {
        block_specs("encoder.", cfg, false, &mut out);
        block_specs("decoder.", cfg, true, &mut out);
    } else {
        block_specs("", cfg, false, &mut out);
    }
    out
}

/// One example of a padded batch.
pub struct ForwardInput<'a> {
    pub layout: &'a SequenceLayout,
    pub tokens: &'a [usize],
    pub mask: &'a AttentionMask,
}

/// Encoder context for an encoder-decoder decoding pass.
pub struct CrossBatch<'a, E: Real> {
    /// Final encoder hidden states, `(B*S_pad) x d`.
    pub encoder_out: Tensor<E>,
    /// Per-example decoder-to-encoder allow matrices, `T_pad x S_pad`.
    pub masks: &'a [AttentionMask],
}

/// `H^0[p] = tok_emb[token_p] + pos_emb[pos_index(p)] + type_emb[type_id(p)]`
pub fn embed_input<E: Real>(
    params: &ParameterSet<E>,
    layout: &SequenceLayout,
    tokens: &[usize],
) -> Result<Tensor<E>> {
    embed_batch(params, &[(layout, tokens)])
}

fn embed_batch<E: Real>(
    params: &ParameterSet<E>,
    inputs: &[(&SequenceLayout, &[usize])],
) -> Result<Tensor<E>> {
    let tok_emb = params.get("tok_emb")?;
    let pos_emb = params.get("pos_emb")?;
    let type_emb = params.get("type_emb")?;
    let vocab = tok_emb.rows();
    let max_pos = pos_emb.rows();
    let type_count = type_emb.rows();
    let mut tok_ids = Vec::new();
    let mut pos_ids = Vec::new();
    let mut type_ids = Vec::new();
    for (layout, tokens) in inputs {
        if tokens.len() != layout.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} tokens for a layout of {} positions",
                tokens.len(),
                layout.len()
            )));
        }
        for (p, &tok) in layout.positions().iter().zip(tokens.iter()) {
            if tok >= vocab {
                return Err(Error::UnknownToken(tok));
            }
            if p.pos_index >= max_pos || p.type_id >= type_count {
                return Err(Error::ShapeMismatch(format!(
                    "position index {} or type {} out of table range",
                    p.pos_index, p.type_id
                )));
            }
            tok_ids.push(tok);
            pos_ids.push(p.pos_index);
            type_ids.push(p.type_id);
        }
    }
    let h = tok_emb.gather(Rc::new(tok_ids))?;
    let h = h.add(&pos_emb.gather(Rc::new(pos_ids))?)?;
    h.add(&type_emb.gather(Rc::new(type_ids))?)
}

pub struct AttentionParams<'a, E: Real> {
    pub wq: &'a Tensor<E>,
    pub bq: &'a Tensor<E>,
    pub wk: &'a Tensor<E>,
    pub bk: &'a Tensor<E>,
    pub wv: &'a Tensor<E>,
    pub bv: &'a Tensor<E>,
    pub wo: &'a Tensor<E>,
    pub bo: &'a Tensor<E>,
}

impl<'a, E: Real> AttentionParams<'a, E> {
    pub fn from_set(params: &'a ParameterSet<E>, prefix: &str) -> Result<Self> {
        Ok(AttentionParams {
            wq: params.get(&format!("{prefix}.wq"))?,
            bq: params.get(&format!("{prefix}.bq"))?,
            wk: params.get(&format!("{prefix}.wk"))?,
            bk: params.get(&format!("{prefix}.bk"))?,
            wv: params.get(&format!("{prefix}.wv"))?,
            bv: params.get(&format!("{prefix}.bv"))?,
            wo: params.get(&format!("{prefix}.wo"))?,
            bo: params.get(&format!("{prefix}.bo"))?,
        })
    }
}

fn masks_to_rc(masks: &[&AttentionMask]) -> Rc<Vec<BoolMat>> {
    Rc::new(masks.iter().map(|m| m.as_bool_mat().clone()).collect())
}

/// Masked multi-head attention plus output projection over one sequence:
/// per head `softmax(Q K^T / sqrt(d_k) + M) V`, heads concatenated.
pub fn attention_sublayer<E: Real>(
    h: &Tensor<E>,
    mask: &AttentionMask,
    heads: usize,
    p: &AttentionParams<E>,
) -> Result<Tensor<E>> {
    if mask.rows() != h.rows() {
        return Err(Error::ShapeMismatch(format!(
            "attention mask has {} rows for {} hidden rows",
            mask.rows(),
            h.rows()
        )));
    }
    let q = h.linear(p.wq, Some(p.bq))?;
    let k = h.linear(p.wk, Some(p.bk))?;
    let v = h.linear(p.wv, Some(p.bv))?;
    let c = Tensor::attention(&q, &k, &v, heads, masks_to_rc(&[mask]))?;
    c.linear(p.wo, Some(p.bo))
}

struct StackInput<E: Real> {
    h0: Tensor<E>,
    self_masks: Rc<Vec<BoolMat>>,
    cross: Option<(Tensor<E>, Rc<Vec<BoolMat>>)>,
}

fn run_stack<E: Real>(
    cfg: &ModelConfig,
    params: &ParameterSet<E>,
    prefix: &str,
    input: StackInput<E>,
) -> Result<Tensor<E>> {
    let eps = E::of(LN_EPS);
    let mut h = input.h0;
    for i in 0..cfg.layers {
        let p = format!("{prefix}layers.{i}");
        let normed = h.layer_norm(
            params.get(&format!("{p}.ln1.gamma"))?,
            params.get(&format!("{p}.ln1.beta"))?,
            eps,
        )?;
        let ap = AttentionParams::from_set(params, &format!("{p}.attn"))?;
        let q = normed.linear(ap.wq, Some(ap.bq))?;
        let k = normed.linear(ap.wk, Some(ap.bk))?;
        let v = normed.linear(ap.wv, Some(ap.bv))?;
        let c = Tensor::attention(&q, &k, &v, cfg.heads, input.self_masks.clone())?;
        h = h.add(&c.linear(ap.wo, Some(ap.bo))?)?;

        if let Some((enc, cross_masks)) = &input.cross {
            let normed = h.layer_norm(
                params.get(&format!("{p}.lnx.gamma"))?,
                params.get(&format!("{p}.lnx.beta"))?,
                eps,
            )?;
            let cp = AttentionParams::from_set(params, &format!("{p}.cross"))?;
            let q = normed.linear(cp.wq, Some(cp.bq))?;
            let k = enc.linear(cp.wk, Some(cp.bk))?;
            let v = enc.linear(cp.wv, Some(cp.bv))?;
            let c = Tensor::attention(&q, &k, &v, cfg.heads, cross_masks.clone())?;
            h = h.add(&c.linear(cp.wo, Some(cp.bo))?)?;
        }

        let normed = h.layer_norm(
            params.get(&format!("{p}.ln2.gamma"))?,
            params.get(&format!("{p}.ln2.beta"))?,
            eps,
        )?;
        let ff = normed
            .linear(
                params.get(&format!("{p}.ffn.w1"))?,
                Some(params.get(&format!("{p}.ffn.b1"))?),
            )?
            .gelu()
            .linear(
                params.get(&format!("{p}.ffn.w2"))?,
                Some(params.get(&format!("{p}.ffn.b2"))?),
            )?;
        h = h.add(&ff)?;
    }
    Ok(h)
}

/// Projects hidden states onto vocabulary logits.
pub fn lm_head<E: Real>(
    cfg: &ModelConfig,
    params: &ParameterSet<E>,
    hidden: &Tensor<E>,
) -> Result<Tensor<E>> {
    let bias = params.get("head.bias")?;
    if cfg.tie_output_embedding {
        hidden.matmul_bt(params.get("tok_emb")?)?.add_bias(bias)
    } else {
        hidden.linear(params.get("head.weight")?, Some(bias))
    }
}

/// Batched forward over a padded batch of single-sequence inputs; for the
/// encoder-decoder framework the inputs are the decoder side and `cross`
/// carries the encoder outputs. Returns logits `(B*n) x vocab`.
pub fn forward_batch<E: Real>(
    cfg: &ModelConfig,
    params: &ParameterSet<E>,
    inputs: &[ForwardInput<'_>],
    cross: Option<CrossBatch<'_, E>>,
) -> Result<Tensor<E>> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = inputs[0].layout.len();
    for inp in inputs {
        if inp.layout.len() != n {
            return Err(Error::ShapeMismatch(
                "ragged batch: pad examples to one length".into(),
            ));
        }
        if inp.mask.rows() != n || inp.mask.cols() != n {
            return Err(Error::ShapeMismatch(
                "attention mask does not match the layout".into(),
            ));
        }
    }
    let prefix = if cross.is_some() { "decoder." } else { "" };
    let h0 = embed_batch(
        params,
        &inputs.iter().map(|i| (i.layout, i.tokens)).collect::<Vec<_>>(),
    )?;
    let self_masks = Rc::new(
        inputs
            .iter()
            .map(|i| i.mask.as_bool_mat().clone())
            .collect::<Vec<_>>(),
    );
    let cross_input = match &cross {
        Some(cb) => {
            if cb.masks.len() != inputs.len() {
                return Err(Error::ShapeMismatch(
                    "one cross mask per example required".into(),
                ));
            }
            let rc = Rc::new(
                cb.masks
                    .iter()
                    .map(|m| m.as_bool_mat().clone())
                    .collect::<Vec<_>>(),
            );
            Some((cb.encoder_out.clone(), rc))
        }
        None => None,
    };
    let hidden = run_stack(
        cfg,
        params,
        prefix,
        StackInput {
            h0,
            self_masks,
            cross: cross_input,
        },
    )?;
    lm_head(cfg, params, &hidden)
}

/// Single-sequence forward: `L` blocks then the LM head; with `cross` the
/// decoder-side stack of the encoder-decoder model is used.
pub fn forward<E: Real>(
    cfg: &ModelConfig,
    params: &ParameterSet<E>,
    layout: &SequenceLayout,
    tokens: &[usize],
    mask: &AttentionMask,
    cross: Option<CrossBatch<'_, E>>,
) -> Result<Tensor<E>> {
    forward_batch(cfg, params, &[ForwardInput { layout, tokens, mask }], cross)
}

/// Runs the bidirectional encoder stack of the encoder-decoder model over a
/// padded batch of source sequences; returns final hidden states
/// `(B*S_pad) x d` for cross-attention.
pub fn encode_batch<E: Real>(
    cfg: &ModelConfig,
    params: &ParameterSet<E>,
    inputs: &[(&SequenceLayout, &[usize])],
) -> Result<Tensor<E>> {
    cfg.validate()?;
    if inputs.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let s = inputs[0].0.len();
    let mut masks = Vec::with_capacity(inputs.len());
    for (layout, _) in inputs {
        if layout.len() != s {
            return Err(Error::ShapeMismatch("ragged encoder batch".into()));
        }
        masks.push(build_framework_mask(layout, Framework::Ed)?.into_bool_mat());
    }
    let h0 = embed_batch(params, inputs)?;
    run_stack(
        cfg,
        params,
        "encoder.",
        StackInput {
            h0,
            self_masks: Rc::new(masks),
            cross: None,
        },
    )
}

/// Encoder forward for one source sequence.
pub fn encode<E: Real>(
    cfg: &ModelConfig,
    params: &ParameterSet<E>,
    layout: &SequenceLayout,
    tokens: &[usize],
) -> Result<Tensor<E>> {
    encode_batch(cfg, params, &[(layout, tokens)])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::build_layout;
    use crate::models::{init_model, init_model_for};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_cfg(vocab: usize) -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            hidden: 16,
            vocab_size: vocab,
            max_positions: 128,
            type_count: 2,
            tie_output_embedding: true,
        }
    }

    fn layout_for(fw: Framework, s: usize, t: usize) -> SequenceLayout {
        build_layout(fw, s, t, None).unwrap().single().unwrap()
    }

    #[test]
    fn zeroed_tables_embed_to_zero() {
        let cfg = tiny_cfg(12);
        let params = init_model::<f32>(&cfg, 0).unwrap();
        for name in ["tok_emb", "pos_emb", "type_emb"] {
            let t = params.get(name).unwrap();
            let zeros = vec![0.0f32; t.numel()];
            t.set_data(zeros).unwrap();
        }
        let l = layout_for(Framework::Mlm, 2, 2);
        let h = embed_input(&params, &l, &[6, 7, 8, 9]).unwrap();
        assert!(h.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fg_pair_rows_differ_only_by_token_embedding() {
        let cfg = tiny_cfg(12);
        let params = init_model::<f32>(&cfg, 1).unwrap();
        let l = layout_for(Framework::FgFree, 2, 2);
        // positions: [s0, s1, m0, y0, m1, y1]; m_i and y_i share pos and type
        let mask_id = 5usize;
        let tokens = vec![6, 7, mask_id, 8, mask_id, 9];
        let h = embed_input(&params, &l, &tokens).unwrap();
        let d = cfg.hidden;
        let hd = h.data();
        let tok = params.get("tok_emb").unwrap();
        let td = tok.data();
        for (m_slot, y_slot, y_tok) in [(2usize, 3usize, 8usize), (4, 5, 9)] {
            for c in 0..d {
                let diff = hd[m_slot * d + c] - hd[y_slot * d + c];
                let expect = td[mask_id * d + c] - td[y_tok * d + c];
                assert!((diff - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn embed_shape_and_unknown_token() {
        let cfg = tiny_cfg(12);
        let params = init_model::<f32>(&cfg, 2).unwrap();
        let l = layout_for(Framework::Mlm, 3, 2);
        let h = embed_input(&params, &l, &[6, 7, 8, 9, 10]).unwrap();
        assert_eq!(h.shape(), vec![5, cfg.hidden]);
        assert!(matches!(
            embed_input(&params, &l, &[6, 7, 8, 9, 99]),
            Err(Error::UnknownToken(99))
        ));
    }

    #[test]
    fn self_only_mask_projects_own_value() {
        let cfg = tiny_cfg(12);
        let params = init_model::<f32>(&cfg, 3).unwrap();
        let l = layout_for(Framework::Mlm, 2, 2);
        let h = embed_input(&params, &l, &[6, 7, 8, 9]).unwrap();
        let mut m = BoolMat::new(4, 4, false);
        for i in 0..4 {
            m.set(i, i, true);
        }
        let mask = AttentionMask::from_bool_mat(m);
        let ap = AttentionParams::from_set(&params, "layers.0.attn").unwrap();
        let c = attention_sublayer(&h, &mask, cfg.heads, &ap).unwrap();
        // with a self-only mask, attention output is V projected by wo
        let v = h.linear(ap.wv, Some(ap.bv)).unwrap();
        let expect = v.linear(ap.wo, Some(ap.bo)).unwrap();
        for (&a, &b) in c.data().iter().zip(expect.data().iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_query_means_uniform_attention() {
        let cfg = tiny_cfg(12);
        let params = init_model::<f32>(&cfg, 4).unwrap();
        params
            .get("layers.0.attn.wq")
            .unwrap()
            .set_data(vec![0.0; cfg.hidden * cfg.hidden])
            .unwrap();
        params
            .get("layers.0.attn.bq")
            .unwrap()
            .set_data(vec![0.0; cfg.hidden])
            .unwrap();
        let l = layout_for(Framework::Mlm, 2, 2);
        let h = embed_input(&params, &l, &[6, 7, 8, 9]).unwrap();
        let mask = AttentionMask::from_bool_mat(BoolMat::new(4, 4, true));
        let ap = AttentionParams::from_set(&params, "layers.0.attn").unwrap();
        let c = attention_sublayer(&h, &mask, cfg.heads, &ap).unwrap();
        // every row equals the projected mean of the V rows
        let v = h.linear(ap.wv, Some(ap.bv)).unwrap();
        let d = cfg.hidden;
        let vd = v.data_vec();
        let mut mean = vec![0.0f32; d];
        for r in 0..4 {
            for k in 0..d {
                mean[k] += vd[r * d + k] / 4.0;
            }
        }
        let mean_t = Tensor::from_vec(vec![1, d], mean).unwrap();
        let expect = mean_t.linear(ap.wo, Some(ap.bo)).unwrap();
        let cd = c.data_vec();
        let ed = expect.data_vec();
        for r in 0..4 {
            for k in 0..d {
                assert!((cd[r * d + k] - ed[k]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn zero_layers_is_just_the_head() {
        let mut cfg = tiny_cfg(12);
        cfg.layers = 0;
        let params = init_model::<f32>(&cfg, 5).unwrap();
        let l = layout_for(Framework::Mlm, 2, 2);
        let mask = build_framework_mask(&l, Framework::Mlm).unwrap();
        let logits = forward(&cfg, &params, &l, &[6, 7, 8, 9], &mask, None).unwrap();
        let h0 = embed_input(&params, &l, &[6, 7, 8, 9]).unwrap();
        let expect = lm_head(&cfg, &params, &h0).unwrap();
        assert_eq!(logits.data_vec(), expect.data_vec());
    }

    #[test]
    fn forward_is_deterministic() {
        let cfg = tiny_cfg(12);
        let params = init_model::<f32>(&cfg, 6).unwrap();
        let l = layout_for(Framework::Ar, 3, 3);
        let mask = build_framework_mask(&l, Framework::Ar).unwrap();
        let a = forward(&cfg, &params, &l, &[6, 7, 8, 2, 9, 10], &mask, None).unwrap();
        let b = forward(&cfg, &params, &l, &[6, 7, 8, 2, 9, 10], &mask, None).unwrap();
        let bits_a: Vec<u32> = a.data().iter().map(|x| x.to_bits()).collect();
        let bits_b: Vec<u32> = b.data().iter().map(|x| x.to_bits()).collect();
        assert_eq!(bits_a, bits_b);
    }

    #[test]
    fn forbidden_column_perturbation_leaves_logits_bit_identical() {
        let cfg = tiny_cfg(20);
        let params = init_model::<f32>(&cfg, 7).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for fw in [Framework::Mlm, Framework::Dec, Framework::FgFree] {
            let l = layout_for(fw, 3, 3);
            let mask = build_framework_mask(&l, fw).unwrap();
            let n = l.len();
            let mut tokens: Vec<usize> = (0..n).map(|_| rng.gen_range(6..20)).collect();
            let base = forward(&cfg, &params, &l, &tokens, &mask, None).unwrap();
            for _ in 0..20 {
                let i = rng.gen_range(0..n);
                let j = rng.gen_range(0..n);
                if mask.allowed(i, j) {
                    continue;
                }
                let old = tokens[j];
                tokens[j] = if old == 19 { 6 } else { old + 1 };
                let pert = forward(&cfg, &params, &l, &tokens, &mask, None).unwrap();
                let v = cfg.vocab_size;
                let b0: Vec<u32> = base.data()[i * v..(i + 1) * v].iter().map(|x| x.to_bits()).collect();
                let b1: Vec<u32> = pert.data()[i * v..(i + 1) * v].iter().map(|x| x.to_bits()).collect();
                assert_eq!(b0, b1, "{fw} row {i} perturbed col {j}");
                tokens[j] = old;
            }
        }
    }

    #[test]
    fn encoder_shapes_and_reuse() {
        let cfg = tiny_cfg(12);
        let ed_params = init_model_for::<f32>(Framework::Ed, &cfg, 8).unwrap();
        let (enc_l, _) = build_layout(Framework::Ed, 3, 2, None).unwrap().pair().unwrap();
        let out = encode(&cfg, &ed_params, &enc_l, &[6, 7, 8]).unwrap();
        assert_eq!(out.shape(), vec![3, cfg.hidden]);
        let single = build_layout(Framework::Ed, 1, 1, None).unwrap().pair().unwrap().0;
        let one = encode(&cfg, &ed_params, &single, &[9]).unwrap();
        assert_eq!(one.shape(), vec![1, cfg.hidden]);
        // computed twice -> identical (cached across decode steps by callers)
        let again = encode(&cfg, &ed_params, &enc_l, &[6, 7, 8]).unwrap();
        assert_eq!(out.data_vec(), again.data_vec());
    }

    #[test]
    fn head_count_does_not_change_shapes() {
        for heads in [1usize, 2, 4] {
            let mut cfg = tiny_cfg(12);
            cfg.heads = heads;
            let params = init_model::<f32>(&cfg, 9).unwrap();
            let l = layout_for(Framework::Mlm, 2, 2);
            let mask = build_framework_mask(&l, Framework::Mlm).unwrap();
            let logits = forward(&cfg, &params, &l, &[6, 7, 8, 9], &mask, None).unwrap();
            assert_eq!(logits.shape(), vec![4, 12]);
        }
    }
}

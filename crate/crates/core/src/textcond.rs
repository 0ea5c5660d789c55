//! Caption conditioning: word-level tokenizer with fixed-length sequences,
//! the trainable text encoder, the learned null embedding and caption
//! mixing for clipped samples.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autograd::{GatherMap, Var};
use crate::error::{bail, Result};
use crate::hsicube::CaptionCorpus;
use crate::nn::{positional_table, Attention, LayerNorm, Linear, Mlp};
use crate::params::{Bound, Fwd, ParamId, ParamStore};
use crate::tensor::Matrix;

/// Fixed token sequence length.
pub const SEQ_LEN: usize = 77;
/// Word slots between START and END.
pub const MAX_WORDS: usize = SEQ_LEN - 2;

pub const PAD: u32 = 0;
pub const START: u32 = 1;
pub const END: u32 = 2;
pub const UNK: u32 = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<start>", "<end>", "<unk>"];

/// Lowercased words of `text`, split on whitespace and punctuation.
pub fn words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric()).filter(|w| !w.is_empty()).map(|w| w.to_lowercase())
}

/// Word → id map with the special ids 0..=3 reserved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    token_to_id: BTreeMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    fn with_specials() -> Self {
        let mut v = Self { token_to_id: BTreeMap::new(), id_to_token: Vec::new() };
        for s in SPECIALS {
            v.insert(s);
        }
        v
    }

    fn insert(&mut self, word: &str) -> u32 {
        if let Some(&id) = self.token_to_id.get(word) {
            return id;
        }
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(word.to_string(), id);
        self.id_to_token.push(word.to_string());
        id
    }

    /// Rebuilds a vocabulary from an explicit map, which must hold the
    /// special tokens at their reserved ids and dense ids overall.
    pub fn from_map(map: BTreeMap<String, u32>) -> Result<Self> {
        let mut id_to_token = vec![String::new(); map.len()];
        for (w, &id) in &map {
            let slot = id_to_token.get_mut(id as usize).ok_or_else(|| crate::Error::Validation(format!("id {id} of '{w}' is not dense")))?;
            if !slot.is_empty() {
                bail!(Validation, "id {id} assigned twice");
            }
            *slot = w.clone();
        }
        for (i, s) in SPECIALS.iter().enumerate() {
            if id_to_token.get(i).map(String::as_str) != Some(*s) {
                bail!(Validation, "special token {s} missing at id {i}");
            }
        }
        Ok(Self { token_to_id: map, id_to_token })
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        self.id_to_token.is_empty()
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.token_to_id.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn map(&self) -> &BTreeMap<String, u32> {
        &self.token_to_id
    }
}

/// Vocabulary over every caption, ids assigned by first occurrence in class
/// order.
pub fn build_vocab(corpus: &CaptionCorpus) -> Vocabulary {
    let mut v = Vocabulary::with_specials();
    for (_, caption) in corpus.iter() {
        for w in words(caption) {
            v.insert(&w);
        }
    }
    v
}

/// `[START, words…, END, PAD…]`, always [`SEQ_LEN`] long.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub real_length: usize,
}

impl TokenSequence {
    /// Positions up to and including END.
    pub fn key_mask(&self) -> Vec<bool> {
        (0..SEQ_LEN).map(|i| i < self.real_length).collect()
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    let mut ids = Vec::with_capacity(SEQ_LEN);
    ids.push(START);
    ids.extend(words(text).take(MAX_WORDS).map(|w| vocab.id(&w).unwrap_or(UNK)));
    ids.push(END);
    let real_length = ids.len();
    ids.resize(SEQ_LEN, PAD);
    TokenSequence { ids, real_length }
}

/// Conditioning tensor `c`: one row per token position.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding {
    pub tokens_emb: Matrix,
    pub pooled: Vec<f64>,
    /// Key positions cross-attention may attend to.
    pub key_mask: Vec<bool>,
}

/// `r·cA + (1 − r)·cB`; the key mask is the union of both.
pub fn mix_captions(a: &TextEmbedding, b: &TextEmbedding, area_ratio: f64) -> Result<TextEmbedding> {
    check_ratio(area_ratio)?;
    if a.tokens_emb.shape() != b.tokens_emb.shape() {
        bail!(Argument, "embedding shapes differ");
    }
    let r = area_ratio;
    Ok(TextEmbedding {
        tokens_emb: a.tokens_emb.zip_map(&b.tokens_emb, |x, y| r * x + (1.0 - r) * y),
        pooled: a.pooled.iter().zip(&b.pooled).map(|(x, y)| r * x + (1.0 - r) * y).collect(),
        key_mask: a.key_mask.iter().zip(&b.key_mask).map(|(x, y)| *x || *y).collect(),
    })
}

fn check_ratio(r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        bail!(Argument, "area ratio {r} outside [0, 1]");
    }
    Ok(())
}

/// Text embedding living on a tape.
#[derive(Debug, Clone, PartialEq)]
pub struct TextVar {
    pub tokens: Var,
    pub key_mask: Vec<bool>,
    pub pooled_row: usize,
}

impl TextVar {
    pub fn value(&self, f: &Fwd) -> TextEmbedding {
        let m = f.tape.value(self.tokens).clone();
        let pooled = m.row(self.pooled_row).to_vec();
        TextEmbedding { tokens_emb: m, pooled, key_mask: self.key_mask.clone() }
    }
}

/// In-graph [`mix_captions`].
pub fn mix_text_vars(f: &mut Fwd, a: &TextVar, b: &TextVar, area_ratio: f64) -> Result<TextVar> {
    check_ratio(area_ratio)?;
    let sa = f.tape.scale(a.tokens, area_ratio);
    let sb = f.tape.scale(b.tokens, 1.0 - area_ratio);
    Ok(TextVar {
        tokens: f.tape.add(sa, sb),
        key_mask: a.key_mask.iter().zip(&b.key_mask).map(|(x, y)| *x || *y).collect(),
        pooled_row: a.pooled_row,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TextEncoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub heads: usize,
    pub layers: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: Attention,
    ln2: LayerNorm,
    mlp: Mlp,
}

/// Small pre-norm transformer over token sequences plus the learned null
/// embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    token_table: ParamId,
    layers: Vec<EncoderLayer>,
    ln_final: LayerNorm,
    proj: Linear,
    null: ParamId,
    positions: Matrix,
}

impl TextEncoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: TextEncoderConfig, rng: &mut R) -> Self {
        let d = config.dim;
        // unit variance, on the scale of the positional codes
        let table = (0..config.vocab_size * d).map(|_| rng.sample(StandardNormal)).collect();
        let token_table = store.add("text.token_table", Matrix::from_vec(config.vocab_size, d, table));
        let layers = (0..config.layers)
            .map(|i| EncoderLayer {
                ln1: LayerNorm::new(store, &format!("text.layer{i}.ln1"), d),
                attn: Attention::new(store, &format!("text.layer{i}.attn"), d, config.heads, true, rng),
                ln2: LayerNorm::new(store, &format!("text.layer{i}.ln2"), d),
                mlp: Mlp::new(store, &format!("text.layer{i}.mlp"), d, 4 * d, rng),
            })
            .collect();
        let ln_final = LayerNorm::new(store, "text.ln_final", d);
        let proj = Linear::new(store, "text.proj", d, d, true, rng);
        let null_values = (0..SEQ_LEN * d).map(|_| rng.random_range(-0.1..0.1)).collect();
        let null = store.add("text.null", Matrix::from_vec(SEQ_LEN, d, null_values));
        Self { config, token_table, layers, ln_final, proj, null, positions: positional_table(SEQ_LEN, d) }
    }

    /// Parameter slot of the null embedding.
    pub fn null_slot(&self) -> ParamId {
        self.null
    }

    /// Token embedding and positions → pre-norm transformer layers with PAD
    /// keys masked → layer norm → linear projection. Rows after END are
    /// zeroed, so PAD ids never influence the output.
    pub fn forward(&self, f: &mut Fwd, tokens: &TokenSequence) -> TextVar {
        let d = self.config.dim;
        let ids: Vec<usize> = tokens.ids.iter().map(|&i| (i as usize).min(self.config.vocab_size - 1)).collect();
        let table = f.p(self.token_table);
        let emb = f.tape.gather(table, alloc::rc::Rc::new(GatherMap::rows_of(&ids, d)));
        let pos = f.input(self.positions.clone());
        let mut x = f.tape.add(emb, pos);
        let mask = tokens.key_mask();
        for layer in &self.layers {
            let h = layer.ln1.forward(f, x);
            let a = layer.attn.forward(f, h, h, Some(&mask)).output;
            x = f.tape.add(x, a);
            let h = layer.ln2.forward(f, x);
            let m = layer.mlp.forward(f, h);
            x = f.tape.add(x, m);
        }
        let x = self.ln_final.forward(f, x);
        let x = self.proj.forward(f, x);
        let row_mask = Matrix::from_vec(SEQ_LEN, d, mask.iter().flat_map(|&k| core::iter::repeat_n(if k { 1.0 } else { 0.0 }, d)).collect());
        let row_mask = f.input(row_mask);
        let out = f.tape.mul(x, row_mask);
        TextVar { tokens: out, key_mask: mask, pooled_row: tokens.real_length - 1 }
    }

    /// The learned null embedding; every key position is attendable.
    pub fn null_var(&self, f: &mut Fwd) -> TextVar {
        TextVar { tokens: f.p(self.null), key_mask: vec![true; SEQ_LEN], pooled_row: 0 }
    }

    pub fn encode_text(&self, store: &ParamStore, tokens: &TokenSequence) -> TextEmbedding {
        let mut tape = crate::autograd::Tape::new();
        let mut bound = Bound::new(store);
        let mut f = Fwd::new(&mut tape, &mut bound);
        let v = self.forward(&mut f, tokens);
        v.value(&f)
    }

    pub fn null_embedding(&self, store: &ParamStore) -> TextEmbedding {
        let m = store.matrix(self.null);
        TextEmbedding { pooled: m.row(0).to_vec(), tokens_emb: m, key_mask: vec![true; SEQ_LEN] }
    }
}

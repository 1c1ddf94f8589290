use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{linear, mhsa, norm, posenc1d, LinearParams, MhaParams, NormParams};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::Tensor;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
const SPECIALS: [&str; 3] = ["[PAD]", "[UNK]", "[CLS]"];

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Vocab {
    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Id of `word`, or [`UNK`].
    pub fn id(&self, word: &str) -> usize {
        self.ids.get(word).copied().unwrap_or(UNK)
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }
}

/// Specials first, then `grammar` in order.
pub fn build_vocab(grammar: &[&str]) -> Result<Vocab> {
    let mut words = Vec::with_capacity(SPECIALS.len() + grammar.len());
    let mut ids = HashMap::new();
    for w in SPECIALS.iter().chain(grammar) {
        let w = w.to_string();
        if ids.insert(w.clone(), words.len()).is_some() {
            return Err(Error::Config(format!("duplicate vocabulary word {w:?}")));
        }
        words.push(w);
    }
    Ok(Vocab { words, ids })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenizedPrompt {
    pub ids: Vec<usize>,
    /// `true` on real (non-PAD) positions.
    pub mask: Vec<bool>,
}

impl TokenizedPrompt {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Lowercases, splits on whitespace and commas, prepends CLS and pads or
/// truncates to `max_len`.
pub fn tokenize(prompt: &str, vocab: &Vocab, max_len: usize) -> Result<TokenizedPrompt> {
    if max_len < 2 {
        return Err(Error::Contract(format!("token length {max_len} leaves no room after CLS")));
    }
    let lower = prompt.to_lowercase();
    let mut ids: Vec<usize> = std::iter::once(CLS)
        .chain(lower.split(|c: char| c.is_whitespace() || c == ',').filter(|w| !w.is_empty()).map(|w| vocab.id(w)))
        .take(max_len)
        .collect();
    let real = ids.len();
    ids.resize(max_len, PAD);
    let mask = (0..max_len).map(|i| i < real).collect();
    Ok(TokenizedPrompt { ids, mask })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub dim: usize,
    pub blocks: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub max_len: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        TextConfig { dim: 32, blocks: 2, heads: 4, ffn_dim: 64, max_len: 24 }
    }
}

#[derive(Clone, Debug)]
struct TextBlock {
    attn_norm: NormParams,
    attn: MhaParams,
    ffn_norm: NormParams,
    ffn_in: LinearParams,
    ffn_out: LinearParams,
}

/// Token embedding plus pre-norm transformer blocks.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub config: TextConfig,
    embedding: ParamId,
    blocks: Vec<TextBlock>,
    final_norm: NormParams,
}

impl TextEncoder {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, vocab_size: usize, config: TextConfig) -> Result<Self> {
        if config.dim == 0 || !config.dim.is_multiple_of(2) {
            return Err(Error::Config(format!("text width {} must be even", config.dim)));
        }
        // Rows on the scale of the positional code, so word identity is not
        // drowned out by position at initialization.
        let embedding = store.init_uniform(seed, &format!("{name}.embedding"), &[vocab_size, config.dim], 1)?;
        let blocks = (0..config.blocks)
            .map(|i| {
                let n = format!("{name}.block{i}");
                Ok(TextBlock {
                    attn_norm: NormParams::new(store, &format!("{n}.attn_norm"), config.dim)?,
                    attn: MhaParams::new(store, seed, &format!("{n}.attn"), config.dim, config.heads)?,
                    ffn_norm: NormParams::new(store, &format!("{n}.ffn_norm"), config.dim)?,
                    ffn_in: LinearParams::new(store, seed, &format!("{n}.ffn_in"), config.dim, config.ffn_dim, true)?,
                    ffn_out: LinearParams::new(store, seed, &format!("{n}.ffn_out"), config.ffn_dim, config.dim, true)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = NormParams::new(store, &format!("{name}.final_norm"), config.dim)?;
        Ok(TextEncoder { config, embedding, blocks, final_norm })
    }

    /// Per-token features `[len×dim]`; PAD keys are masked in every block.
    /// Accepts any token length, so the same weights can encode differently
    /// padded copies of a prompt.
    pub fn encode(&self, g: &mut Graph, b: &Binding, tokens: &TokenizedPrompt) -> Result<Var> {
        let len = tokens.len();
        if len == 0 || tokens.mask.len() != len {
            return Err(Error::dim("token ids and mask must be non-empty and equally long"));
        }
        if !tokens.mask[0] {
            return Err(Error::Input("prompt has no real tokens".into()));
        }
        let emb = g.gather_rows(b.var(self.embedding), &tokens.ids)?;
        let pos = g.constant(posenc1d(len, self.config.dim)?);
        let mut x = g.add(emb, pos)?;
        for blk in &self.blocks {
            let h = norm(g, b, x, &blk.attn_norm)?;
            let h = mhsa(g, b, h, &blk.attn, Some(&tokens.mask))?;
            x = g.add(x, h)?;
            let h = norm(g, b, x, &blk.ffn_norm)?;
            let h = linear(g, b, h, &blk.ffn_in)?;
            let h = g.relu(h);
            let h = linear(g, b, h, &blk.ffn_out)?;
            x = g.add(x, h)?;
        }
        norm(g, b, x, &self.final_norm)
    }

    /// Inference helper returning the feature tensor.
    pub fn encode_tensor(&self, store: &ParamStore, tokens: &TokenizedPrompt) -> Result<Tensor> {
        let mut g = Graph::new();
        let b = store.bind_frozen(&mut g);
        let out = self.encode(&mut g, &b, tokens)?;
        Ok(g.value(out).clone())
    }
}

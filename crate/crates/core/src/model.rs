//! Full segmentation model: encoders, decoder stack and head.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::prompt::{PromptStages, GRAMMAR};
use crate::decoder::{
    decode_merge, guide_decoder_forward, plain_decoder_forward, to_tokens, GuideDecoderParams, PlainDecoderParams,
    StageDims, StageInput,
};
use crate::encoders::{build_vocab, tokenize, ImageConfig, ImageEncoder, TextConfig, TextEncoder, TokenizedPrompt, Vocab};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{conv, ConvParams};
use crate::params::{Binding, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Which prompt stages are fed to the text encoder.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PromptMode {
    None,
    S12,
    S3,
    #[default]
    S123,
}

impl PromptMode {
    pub const ALL: [PromptMode; 4] = [PromptMode::None, PromptMode::S12, PromptMode::S3, PromptMode::S123];

    pub fn as_str(self) -> &'static str {
        match self {
            PromptMode::None => "none",
            PromptMode::S12 => "s12",
            PromptMode::S3 => "s3",
            PromptMode::S123 => "s123",
        }
    }

    /// Comma-joined selected stages; `None` for the text-free mode.
    pub fn assemble(self, prompt: &PromptStages) -> Result<Option<String>> {
        let stages: &[(&str, &str)] = match self {
            PromptMode::None => return Ok(None),
            PromptMode::S12 => &[("stage1", &prompt.stage1), ("stage2", &prompt.stage2)],
            PromptMode::S3 => &[("stage3", &prompt.stage3)],
            PromptMode::S123 => &[("stage1", &prompt.stage1), ("stage2", &prompt.stage2), ("stage3", &prompt.stage3)],
        };
        if let Some((name, _)) = stages.iter().find(|(_, s)| s.trim().is_empty()) {
            return Err(Error::Input(format!("prompt mode {self} needs a non-empty {name}")));
        }
        Ok(Some(stages.iter().map(|(_, s)| *s).collect::<Vec<_>>().join(", ")))
    }
}

impl fmt::Display for PromptMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PromptMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        PromptMode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown prompt mode {s:?} (expected none, s12, s3 or s123)")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_side: usize,
    pub image: ImageConfig,
    pub text: TextConfig,
    /// Text tokens kept after projection in each guide stage.
    pub text_tokens: usize,
    pub decoder_heads: usize,
    /// Number of guide stages, counted from the deepest.
    pub guide_stages: usize,
    pub prompt_mode: PromptMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_side: 64,
            image: ImageConfig::default(),
            text: TextConfig::default(),
            text_tokens: 4,
            decoder_heads: 4,
            guide_stages: 3,
            prompt_mode: PromptMode::S123,
        }
    }
}

impl ModelConfig {
    pub fn decoder_stages(&self) -> usize {
        self.image.widths.len().saturating_sub(1)
    }

    /// Guide stages that actually see text: zero in the text-free mode.
    pub fn active_guide_stages(&self) -> usize {
        if self.prompt_mode == PromptMode::None {
            0
        } else {
            self.guide_stages
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.image.validate()?;
        if self.image.widths.len() < 2 {
            return Err(Error::Config("the decoder needs at least two encoder stages".into()));
        }
        if self.guide_stages > self.decoder_stages() {
            return Err(Error::Config(format!(
                "{} guide stages requested but only {} decoder stages exist",
                self.guide_stages,
                self.decoder_stages()
            )));
        }
        let stride = self.image.max_stride();
        if self.image_side == 0 || !self.image_side.is_multiple_of(stride) {
            return Err(Error::Config(format!("image side {} is not a multiple of {stride}", self.image_side)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub enum DecoderSlot {
    Guide(GuideDecoderParams),
    Plain(PlainDecoderParams),
}

impl DecoderSlot {
    pub fn dims(&self) -> &StageDims {
        match self {
            DecoderSlot::Guide(p) => &p.dims,
            DecoderSlot::Plain(p) => &p.dims,
        }
    }
}

/// Output of one forward pass: logits, their sigmoid, and the mask at 0.5.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Tensor,
    pub probs: Tensor,
    pub mask: Tensor,
}

impl Prediction {
    pub fn from_logits(logits: Tensor) -> Prediction {
        let probs = Tensor::from_fn(logits.shape().to_vec(), |i| crate::graph::sigmoid(logits.data()[i]));
        let mask = Tensor::from_fn(logits.shape().to_vec(), |i| if probs.data()[i] >= 0.5 { 1.0 } else { 0.0 });
        Prediction { logits, probs, mask }
    }
}

#[derive(Clone, Debug)]
pub struct SegModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    vocab: Vocab,
    image: ImageEncoder,
    text: TextEncoder,
    decoders: Vec<DecoderSlot>,
    head: ConvParams,
}

impl SegModel {
    /// Every parameter is initialized from a stream keyed by `(seed, name)`,
    /// so models that differ only in their decoder slots share all other
    /// initial weights.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let vocab = build_vocab(GRAMMAR)?;
        let mut store = ParamStore::new();
        let image = ImageEncoder::new(&mut store, seed, "image", config.image.clone())?;
        let text = TextEncoder::new(&mut store, seed, "text", vocab.len(), config.text.clone())?;

        let widths = &config.image.widths;
        let n = widths.len();
        let mut decoders = Vec::with_capacity(n - 1);
        for j in 0..n - 1 {
            let level = n - 1 - j;
            let dims = StageDims {
                channels: widths[level],
                skip_channels: widths[level - 1],
                out_channels: widths[level - 1],
                grid: config.image_side / (4 << level),
                text_dim: config.text.dim,
                text_len: config.text.max_len,
                text_tokens: config.text_tokens,
                heads: config.decoder_heads,
            };
            let name = format!("decoder{j}");
            decoders.push(if j < config.guide_stages {
                DecoderSlot::Guide(GuideDecoderParams::new(&mut store, seed, &name, dims)?)
            } else {
                DecoderSlot::Plain(PlainDecoderParams::new(&mut store, seed, &name, dims)?)
            });
        }
        let head = ConvParams::new(&mut store, seed, "head", widths[0], 1, 1, 1, 0)?;
        Ok(SegModel { config, store, vocab, image, text, decoders, head })
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn decoders(&self) -> &[DecoderSlot] {
        &self.decoders
    }

    /// Gate parameters of the guide stages, deepest first.
    pub fn alphas(&self) -> Vec<ParamId> {
        self.decoders
            .iter()
            .filter_map(|d| match d {
                DecoderSlot::Guide(p) => Some(p.alpha),
                DecoderSlot::Plain(_) => None,
            })
            .collect()
    }

    /// Tokenized prompt for the configured mode, or `None` when text is unused.
    pub fn tokenize_prompt(&self, prompt: &PromptStages) -> Result<Option<TokenizedPrompt>> {
        let text = self.config.prompt_mode.assemble(prompt)?;
        if self.config.active_guide_stages() == 0 {
            return Ok(None);
        }
        text.map(|t| tokenize(&t, &self.vocab, self.config.text.max_len)).transpose()
    }

    /// Logits `[1×S×S]` for an image var `[1×S×S]`.
    pub fn forward(&self, g: &mut Graph, b: &Binding, image: Var, prompt: &PromptStages) -> Result<Var> {
        let side = self.config.image_side;
        if g.shape(image) != [1, side, side] {
            return Err(Error::dim(format!("model expects a 1×{side}×{side} image, got {:?}", g.shape(image))));
        }
        let tokens = self.tokenize_prompt(prompt)?;
        let features = self.image.encode(g, b, image)?;
        let text = match &tokens {
            Some(t) => Some(self.text.encode(g, b, t)?),
            None => None,
        };

        let n = features.len();
        let mut x = features[n - 1];
        for (j, slot) in self.decoders.iter().enumerate() {
            let skip = features[n - 2 - j];
            let visual = to_tokens(g, x)?;
            x = match (slot, &text, &tokens) {
                (DecoderSlot::Guide(p), Some(text), Some(t)) => {
                    let io = StageInput { visual, text: *text, text_mask: &t.mask, skip };
                    guide_decoder_forward(g, b, io, p)?
                }
                (DecoderSlot::Guide(p), _, _) => decode_merge(g, b, visual, skip, &p.merge, &p.dims)?,
                (DecoderSlot::Plain(p), _, _) => plain_decoder_forward(g, b, visual, skip, p)?,
            };
        }
        // A 1×1 convolution commutes with nearest upsampling, so it runs at
        // the coarse resolution.
        let mut logits = conv(g, b, x, &self.head)?;
        while g.shape(logits)[1] < side {
            logits = g.upsample_nearest2x(logits)?;
        }
        Ok(logits)
    }

    pub fn predict(&self, image: &Tensor, prompt: &PromptStages) -> Result<Prediction> {
        let mut g = Graph::new();
        let b = self.store.bind_frozen(&mut g);
        let x = g.constant(image.clone());
        let logits = self.forward(&mut g, &b, x, prompt)?;
        Ok(Prediction::from_logits(g.value(logits).clone()))
    }
}

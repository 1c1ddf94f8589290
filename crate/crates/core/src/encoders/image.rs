use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::nn::{channel_norm, conv, ConvParams, NormParams};
use crate::params::{Binding, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageConfig {
    /// Output channels per stage; the first stage downsamples by 4 and every
    /// later one by 2.
    pub widths: Vec<usize>,
}

impl Default for ImageConfig {
    fn default() -> Self {
        ImageConfig { widths: vec![16, 32, 64, 128] }
    }
}

impl ImageConfig {
    /// Total downsampling of the deepest stage.
    pub fn max_stride(&self) -> usize {
        4 << self.widths.len().saturating_sub(1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths[0] == 0 {
            return Err(Error::Config("image encoder needs at least one non-empty stage".into()));
        }
        if self.widths.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Config(format!("stage widths {:?} must increase strictly", self.widths)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvBlock {
    conv: ConvParams,
    norm: NormParams,
}

#[derive(Clone, Debug)]
struct Stage {
    down: ConvParams,
    blocks: [ConvBlock; 2],
}

/// Pyramid of strided convolutions, each followed by two conv-norm-ReLU blocks.
#[derive(Clone, Debug)]
pub struct ImageEncoder {
    pub config: ImageConfig,
    stages: Vec<Stage>,
}

impl ImageEncoder {
    pub fn new(store: &mut ParamStore, seed: u64, name: &str, config: ImageConfig) -> Result<Self> {
        config.validate()?;
        let mut cin = 1;
        let mut stages = Vec::with_capacity(config.widths.len());
        for (s, &c) in config.widths.iter().enumerate() {
            let n = format!("{name}.stage{s}");
            let k = if s == 0 { 4 } else { 2 };
            let down = ConvParams::new(store, seed, &format!("{n}.down"), cin, c, k, k, 0)?;
            let mut block = |i: usize| -> Result<ConvBlock> {
                Ok(ConvBlock {
                    conv: ConvParams::new(store, seed, &format!("{n}.block{i}.conv"), c, c, 3, 1, 1)?,
                    norm: NormParams::new(store, &format!("{n}.block{i}.norm"), c)?,
                })
            };
            stages.push(Stage { down, blocks: [block(0)?, block(1)?] });
            cin = c;
        }
        Ok(ImageEncoder { config, stages })
    }

    /// Feature maps of every stage, shallowest first.
    pub fn encode(&self, g: &mut Graph, b: &Binding, image: Var) -> Result<Vec<Var>> {
        let (c, h, w) = g.value(image).dims3()?;
        let stride = self.config.max_stride();
        if c != 1 || h != w || h % stride != 0 {
            return Err(Error::dim(format!(
                "image encoder expects a square 1-channel image with side divisible by {stride}, got {:?}",
                g.shape(image)
            )));
        }
        let mut x = image;
        let mut features = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            x = conv(g, b, x, &stage.down)?;
            for blk in &stage.blocks {
                let y = conv(g, b, x, &blk.conv)?;
                let y = channel_norm(g, b, y, &blk.norm)?;
                x = g.relu(y);
            }
            features.push(x);
        }
        Ok(features)
    }
}

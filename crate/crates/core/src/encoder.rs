//! Five-stage convolutional encoder with an image-level classification
//! head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Init, ParamStore, Session};
use crate::tensor::{Float, Var};

pub const STAGES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub stage_channels: [usize; STAGES],
    pub blocks_per_stage: usize,
    pub in_channels: usize,
    /// Feed the pooled features of every stage to the classifier instead
    /// of the last stage only.
    pub multi_stage_head: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            stage_channels: [16, 32, 64, 128, 256],
            blocks_per_stage: 2,
            in_channels: 54,
            multi_stage_head: false,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.blocks_per_stage == 0 || self.in_channels == 0 {
            return Err(Error::Config(
                "blocks_per_stage and in_channels must be positive".into(),
            ));
        }
        if self.stage_channels.contains(&0) {
            return Err(Error::Config("stage widths must be positive".into()));
        }
        Ok(())
    }

    /// Required divisor of the input height and width.
    pub fn multiple(&self) -> usize {
        1 << STAGES
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let m = self.multiple();
        if height == 0 || width == 0 || height % m != 0 || width % m != 0 {
            return Err(Error::IndivisibleInput {
                height,
                width,
                multiple: m,
            });
        }
        Ok(())
    }
}

pub struct EncoderOutput {
    /// `X^{i,0}` at `H / 2^(i+1)`.
    pub features: [Var; STAGES],
    /// N×1×1×1 pre-sigmoid score.
    pub class_logit: Var,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub stages: Vec<Vec<Conv2d>>,
    pub head: Conv2d,
}

impl Encoder {
    pub fn new<T: Float>(
        store: &mut ParamStore<T>,
        config: &EncoderConfig,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let mut stages = Vec::with_capacity(STAGES);
        let mut cin = config.in_channels;
        for (i, &c) in config.stage_channels.iter().enumerate() {
            let mut convs = Vec::with_capacity(config.blocks_per_stage);
            for b in 0..config.blocks_per_stage {
                let (src, stride) = if b == 0 { (cin, 2) } else { (c, 1) };
                let name = format!("encoder.{i}.{b}");
                convs.push(Conv2d::new(store, &name, src, c, 3, stride, 1, Init::He, rng));
            }
            stages.push(convs);
            cin = c;
        }
        let head_in = if config.multi_stage_head {
            config.stage_channels.iter().sum()
        } else {
            config.stage_channels[STAGES - 1]
        };
        let head = Conv2d::pointwise(store, "encoder.head", head_in, 1, Init::He, rng);
        Ok(Self {
            config: config.clone(),
            stages,
            head,
        })
    }

    pub fn forward<T: Float>(&self, s: &mut Session<T>, x: Var) -> Result<EncoderOutput> {
        let shape = s.graph.shape(x).to_vec();
        if shape.len() != 4 || shape[1] != self.config.in_channels {
            return Err(Error::InvalidShape {
                op: "encoder_forward",
                shape,
                reason: format!("expected N×{}×H×W", self.config.in_channels),
            });
        }
        self.config.check_input(shape[2], shape[3])?;
        let mut h = x;
        let mut feats = Vec::with_capacity(STAGES);
        for convs in &self.stages {
            for conv in convs {
                h = conv.forward(s, h)?;
                h = s.graph.relu(h);
            }
            feats.push(h);
        }
        let features: [Var; STAGES] = feats.try_into().expect("five stages");
        let class_logit = self.classify(s, &features)?;
        Ok(EncoderOutput {
            features,
            class_logit,
        })
    }

    /// Global average pool, then a fully connected layer (a 1×1 conv on
    /// the pooled vector).
    pub fn classify<T: Float>(&self, s: &mut Session<T>, features: &[Var; STAGES]) -> Result<Var> {
        let pooled = if self.config.multi_stage_head {
            let mut p = Vec::with_capacity(STAGES);
            for &f in features {
                p.push(s.graph.global_avg_pool(f)?);
            }
            s.graph.concat_channels(&p)?
        } else {
            s.graph.global_avg_pool(features[STAGES - 1])?
        };
        self.head.forward(s, pooled)
    }
}

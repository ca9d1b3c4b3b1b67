use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::real::Real;
use crate::error::{Error, Result};

pub const KERNEL: usize = 3;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;
/// Softmax logits followed by the two vote regressands.
pub const NUM_OUTPUTS: usize = 6;
/// Conv blocks per stage.
pub const STAGE_BLOCKS: [usize; 4] = [3, 3, 3, 2];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    /// Current frame only.
    None,
    /// Frames stacked as input channels.
    Early,
    /// Stages 1-2 shared across frames, outputs summed before stage 3.
    Late,
}

impl Fusion {
    pub fn as_str(self) -> &'static str {
        match self {
            Fusion::None => "none",
            Fusion::Early => "early",
            Fusion::Late => "late",
        }
    }
}

impl std::str::FromStr for Fusion {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Fusion::None),
            "early" => Ok(Fusion::Early),
            "late" => Ok(Fusion::Late),
            o => Err(Error::Config(format!("unknown fusion mode '{o}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub stage_channels: [usize; 4],
    pub dropout_rate: f64,
    pub leak: f64,
    pub fusion: Fusion,
    pub num_classes: usize,
    pub vote_dims: usize,
    pub input_points: usize,
    pub input_frames: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            stage_channels: [64, 64, 128, 128],
            dropout_rate: 0.25,
            leak: 0.1,
            fusion: Fusion::Late,
            num_classes: 4,
            vote_dims: 2,
            input_points: 48,
            input_frames: 6,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stage_channels.iter().any(|&c| c == 0) {
            return Err(Error::Config("stage_channels must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout_rate must be in [0, 1)".into()));
        }
        if !(self.leak >= 0.0 && self.leak.is_finite()) {
            return Err(Error::Config("leak must be >= 0".into()));
        }
        if self.num_classes != 4 || self.vote_dims != 2 {
            return Err(Error::Config(
                "the detector head is fixed at 4 classes and 2 vote dims".into(),
            ));
        }
        if self.input_points < 8 {
            return Err(Error::Config("input_points must be >= 8".into()));
        }
        if self.input_frames == 0 {
            return Err(Error::Config("input_frames must be >= 1".into()));
        }
        if self.fusion == Fusion::None && self.input_frames != 1 {
            return Err(Error::Config(
                "fusion 'none' takes exactly one input frame".into(),
            ));
        }
        Ok(())
    }

    /// Channels entering the first convolution.
    pub fn input_channels(&self) -> usize {
        match self.fusion {
            Fusion::Early => self.input_frames,
            Fusion::None | Fusion::Late => 1,
        }
    }

    /// (in, out) channels of every conv block in order.
    pub fn block_channels(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        let mut cin = self.input_channels();
        for (stage, &blocks) in STAGE_BLOCKS.iter().enumerate() {
            let w = self.stage_channels[stage];
            for _ in 0..blocks {
                out.push((cin, w));
                cin = w;
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvBlock<T> {
    pub in_ch: usize,
    pub out_ch: usize,
    /// `[out][in][KERNEL]`.
    pub weight: Vec<T>,
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
    pub running_mean: Vec<T>,
    pub running_var: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub config: ModelConfig,
    pub blocks: Vec<ConvBlock<T>>,
    /// `[NUM_OUTPUTS][stage-4 width]`.
    pub fc_weight: Vec<T>,
    pub fc_bias: Vec<T>,
}

/// Gradients in the order of [`ModelParams::trainable`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    pub tensors: Vec<Vec<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn zeros_like(params: &ModelParams<T>) -> Self {
        Self {
            tensors: params
                .trainable()
                .iter()
                .map(|t| vec![T::zero(); t.len()])
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().flatten().all(|v| v.is_finite())
    }
}

impl<T: Real> ModelParams<T> {
    /// He-initialized weights, unit batch-norm scale and zero shift.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gain = (2.0 / (1.0 + config.leak * config.leak)).sqrt();
        let blocks = config
            .block_channels()
            .into_iter()
            .map(|(cin, cout)| {
                let std = gain / ((cin * KERNEL) as f64).sqrt();
                let normal = Normal::new(0.0, std).expect("valid std");
                ConvBlock {
                    in_ch: cin,
                    out_ch: cout,
                    weight: (0..cout * cin * KERNEL)
                        .map(|_| T::lit(normal.sample(&mut rng)))
                        .collect(),
                    gamma: vec![T::one(); cout],
                    beta: vec![T::zero(); cout],
                    running_mean: vec![T::zero(); cout],
                    running_var: vec![T::one(); cout],
                }
            })
            .collect();
        let width = config.stage_channels[3];
        let normal = Normal::new(0.0, 1.0 / (width as f64).sqrt()).expect("valid std");
        let fc_weight = (0..NUM_OUTPUTS * width)
            .map(|_| T::lit(normal.sample(&mut rng)))
            .collect();
        Ok(Self {
            config,
            blocks,
            fc_weight,
            fc_bias: vec![T::zero(); NUM_OUTPUTS],
        })
    }

    /// Trainable tensors: per block weight, gamma, beta; then fc weight, bias.
    pub fn trainable(&self) -> Vec<&[T]> {
        let mut v: Vec<&[T]> = Vec::with_capacity(self.blocks.len() * 3 + 2);
        for b in &self.blocks {
            v.push(&b.weight);
            v.push(&b.gamma);
            v.push(&b.beta);
        }
        v.push(&self.fc_weight);
        v.push(&self.fc_bias);
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Vec<T>> {
        let mut v: Vec<&mut Vec<T>> = Vec::with_capacity(self.blocks.len() * 3 + 2);
        for b in &mut self.blocks {
            v.push(&mut b.weight);
            v.push(&mut b.gamma);
            v.push(&mut b.beta);
        }
        v.push(&mut self.fc_weight);
        v.push(&mut self.fc_bias);
        v
    }

    pub fn trainable_names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for i in 0..self.blocks.len() {
            v.push(format!("block{i}.weight"));
            v.push(format!("block{i}.gamma"));
            v.push(format!("block{i}.beta"));
        }
        v.push("fc.weight".into());
        v.push("fc.bias".into());
        v
    }

    /// Number of trainable scalars. Batch-norm running statistics are
    /// buffers and not counted.
    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    /// Every stored tensor (trainable and buffers) with its name and shape.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut v: Vec<(String, Vec<usize>, &[T])> = Vec::new();
        for (i, b) in self.blocks.iter().enumerate() {
            v.push((format!("block{i}.weight"), vec![b.out_ch, b.in_ch, KERNEL], &b.weight));
            v.push((format!("block{i}.gamma"), vec![b.out_ch], &b.gamma));
            v.push((format!("block{i}.beta"), vec![b.out_ch], &b.beta));
            v.push((format!("block{i}.running_mean"), vec![b.out_ch], &b.running_mean));
            v.push((format!("block{i}.running_var"), vec![b.out_ch], &b.running_var));
        }
        let w = self.config.stage_channels[3];
        v.push(("fc.weight".into(), vec![NUM_OUTPUTS, w], &self.fc_weight));
        v.push(("fc.bias".into(), vec![NUM_OUTPUTS], &self.fc_bias));
        v
    }

    pub(crate) fn named_tensors_mut(&mut self) -> Vec<(String, &mut Vec<T>)> {
        let mut v: Vec<(String, &mut Vec<T>)> = Vec::new();
        for (i, b) in self.blocks.iter_mut().enumerate() {
            v.push((format!("block{i}.weight"), &mut b.weight));
            v.push((format!("block{i}.gamma"), &mut b.gamma));
            v.push((format!("block{i}.beta"), &mut b.beta));
            v.push((format!("block{i}.running_mean"), &mut b.running_mean));
            v.push((format!("block{i}.running_var"), &mut b.running_var));
        }
        v.push(("fc.weight".into(), &mut self.fc_weight));
        v.push(("fc.bias".into(), &mut self.fc_bias));
        v
    }

    pub fn all_finite(&self) -> bool {
        self.named_tensors()
            .iter()
            .all(|(_, _, t)| t.iter().all(|v| v.is_finite()))
    }

    /// Element-type conversion (e.g. `f32` weights into the `f64` oracle).
    pub fn cast<U: Real>(&self) -> ModelParams<U> {
        let conv = |v: &[T]| -> Vec<U> {
            v.iter()
                .map(|x| U::from_f64(x.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan()))
                .collect()
        };
        ModelParams {
            config: self.config,
            blocks: self
                .blocks
                .iter()
                .map(|b| ConvBlock {
                    in_ch: b.in_ch,
                    out_ch: b.out_ch,
                    weight: conv(&b.weight),
                    gamma: conv(&b.gamma),
                    beta: conv(&b.beta),
                    running_mean: conv(&b.running_mean),
                    running_var: conv(&b.running_var),
                })
                .collect(),
            fc_weight: conv(&self.fc_weight),
            fc_bias: conv(&self.fc_bias),
        }
    }
}

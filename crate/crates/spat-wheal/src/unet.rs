//! The pixel-level classification model.
//!
//! A U-Net over the concatenated lighting stack: `depth` encoder levels of
//! [double conv–groupnorm–ReLU block, then 2x2 maxpool], a bottleneck double
//! block, `depth` decoder levels of [x2 bilinear upsample, concat with the
//! matching encoder skip, double block], and a 3x3 conv head with a sigmoid.
//! Every convolution is 3x3 stride 1; all hidden layers carry the same
//! feature count.
//!
//! Parameter names are stable across versions and drive the checkpoint
//! format: `enc{i}.conv1.weight`, `enc{i}.conv1.bias`, `enc{i}.gn1.gamma`,
//! `enc{i}.gn1.beta`, same for `conv2`/`gn2`, then `bottleneck.*`, `dec{i}.*`
//! (decoder level i consumes encoder skip i), and `head.conv.weight`/
//! `head.conv.bias`.

use std::fmt;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ImageStack;
use crate::tensor::{
    concat_channels, conv2d, group_norm, maxpool2, relu, sigmoid, upsample_bilinear2, Tensor,
    TensorError,
};
use crate::DIRECTIONAL_IMAGES;

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("config: {0}")]
    Config(String),
    #[error("input: {0}")]
    Input(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("checkpoint does not match config: {0}")]
    Checkpoint(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Which images feed the first layer: the full 32-image stack (96 input
/// channels) or the single full-light image (3 channels, the baseline).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum InputMode {
    #[serde(rename = "spat32")]
    Spat32,
    #[serde(rename = "fullLight1")]
    FullLight1,
}

impl InputMode {
    pub fn in_images(self) -> usize {
        match self {
            InputMode::Spat32 => DIRECTIONAL_IMAGES,
            InputMode::FullLight1 => 1,
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputMode::Spat32 => write!(f, "spat32"),
            InputMode::FullLight1 => write!(f, "fullLight1"),
        }
    }
}

impl std::str::FromStr for InputMode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "spat32" => Ok(InputMode::Spat32),
            "fullLight1" | "fulllight1" => Ok(InputMode::FullLight1),
            other => Err(format!("unknown mode '{other}', expected spat32 or fullLight1")),
        }
    }
}

/// Architecture parameters. The spatial dims are the training target size;
/// `forward` accepts any size divisible by `2^depth`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UNetConfig {
    pub mode: InputMode,
    pub channels_per_image: usize,
    pub hidden_features: usize,
    /// Number of maxpool levels, 2 to 4.
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl UNetConfig {
    pub fn new(mode: InputMode, height: usize, width: usize) -> Self {
        UNetConfig {
            mode,
            channels_per_image: 3,
            hidden_features: 64,
            depth: 3,
            height,
            width,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.mode.in_images() * self.channels_per_image
    }

    /// Group count for the normalization layers: the largest divisor of the
    /// feature count not exceeding 8.
    pub fn norm_groups(&self) -> usize {
        (1..=8.min(self.hidden_features))
            .rev()
            .find(|g| self.hidden_features % g == 0)
            .unwrap_or(1)
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_features == 0 {
            return Err(ModelError::Config("hidden_features must be >= 1".into()));
        }
        if !(2..=4).contains(&self.depth) {
            return Err(ModelError::Config(format!(
                "depth must be 2..=4, got {}",
                self.depth
            )));
        }
        if self.channels_per_image == 0 {
            return Err(ModelError::Config("channels_per_image must be >= 1".into()));
        }
        let div = 1usize << self.depth;
        if self.height % div != 0 || self.width % div != 0 {
            return Err(ModelError::Config(format!(
                "input {}x{} not divisible by 2^depth = {div}",
                self.width, self.height
            )));
        }
        Ok(())
    }
}

struct ConvGn {
    weight: Tensor<f32>,
    bias: Tensor<f32>,
    gamma: Tensor<f32>,
    beta: Tensor<f32>,
}

struct DoubleBlock {
    first: ConvGn,
    second: ConvGn,
}

struct Head {
    weight: Tensor<f32>,
    bias: Tensor<f32>,
}

/// The model: ordered parameters keyed by layer path plus its config.
/// Parameter count is a pure function of the config, and `(config, seed)`
/// determines the parameters exactly.
pub struct UNetModel {
    pub config: UNetConfig,
    encoder: Vec<DoubleBlock>,
    bottleneck: DoubleBlock,
    decoder: Vec<DoubleBlock>,
    head: Head,
}

fn kaiming_conv(rng: &mut ChaCha8Rng, cout: usize, cin: usize) -> (Vec<f32>, Vec<f32>) {
    let fan_in = (cin * 9) as f64;
    let w_bound = (6.0 / fan_in).sqrt() as f32;
    let b_bound = (1.0 / fan_in).sqrt() as f32;
    let weight = (0..cout * cin * 9)
        .map(|_| rng.random_range(-w_bound..w_bound))
        .collect();
    let bias = (0..cout).map(|_| rng.random_range(-b_bound..b_bound)).collect();
    (weight, bias)
}

fn build_conv_gn(rng: &mut ChaCha8Rng, cin: usize, cout: usize) -> ConvGn {
    let (w, b) = kaiming_conv(rng, cout, cin);
    ConvGn {
        weight: Tensor::param(&[cout, cin, 3, 3], w).expect("shape matches data"),
        bias: Tensor::param(&[cout], b).expect("shape matches data"),
        gamma: Tensor::param(&[cout], vec![1.0; cout]).expect("shape matches data"),
        beta: Tensor::param(&[cout], vec![0.0; cout]).expect("shape matches data"),
    }
}

fn build_double(rng: &mut ChaCha8Rng, cin: usize, features: usize) -> DoubleBlock {
    DoubleBlock {
        first: build_conv_gn(rng, cin, features),
        second: build_conv_gn(rng, features, features),
    }
}

impl UNetModel {
    /// Builds a model with Kaiming-uniform conv weights drawn from `seed`
    /// (groupnorm affine starts at gamma = 1, beta = 0).
    pub fn build(config: UNetConfig, seed: u64) -> Result<UNetModel, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = config.hidden_features;
        let mut encoder = Vec::with_capacity(config.depth);
        let mut cin = config.in_channels();
        for _ in 0..config.depth {
            encoder.push(build_double(&mut rng, cin, f));
            cin = f;
        }
        let bottleneck = build_double(&mut rng, f, f);
        let decoder = (0..config.depth)
            .map(|_| build_double(&mut rng, 2 * f, f))
            .collect();
        let (hw, hb) = kaiming_conv(&mut rng, 1, f);
        let head = Head {
            weight: Tensor::param(&[1, f, 3, 3], hw).expect("shape matches data"),
            bias: Tensor::param(&[1], hb).expect("shape matches data"),
        };
        Ok(UNetModel {
            config,
            encoder,
            bottleneck,
            decoder,
            head,
        })
    }

    fn block_forward(block: &DoubleBlock, x: &Tensor<f32>, groups: usize) -> Result<Tensor<f32>, TensorError> {
        let mut y = relu(&group_norm(
            &conv2d(x, &block.first.weight, &block.first.bias)?,
            groups,
            &block.first.gamma,
            &block.first.beta,
            1e-5,
        )?);
        y = relu(&group_norm(
            &conv2d(&y, &block.second.weight, &block.second.bias)?,
            groups,
            &block.second.gamma,
            &block.second.beta,
            1e-5,
        )?);
        Ok(y)
    }

    /// Forward pass: `[B, in_channels, H, W]` to `[B, 1, H, W]`, outputs
    /// strictly inside (0, 1). H and W must be divisible by `2^depth`.
    pub fn forward(&self, input: &Tensor<f32>) -> Result<Tensor<f32>, ModelError> {
        let shape = input.shape().to_vec();
        if shape.len() != 4 {
            return Err(ModelError::Input(format!(
                "expected rank-4 input, got shape {shape:?}"
            )));
        }
        if shape[1] != self.config.in_channels() {
            return Err(ModelError::Input(format!(
                "input has {} channels, model ({}) expects {}",
                shape[1],
                self.config.mode,
                self.config.in_channels()
            )));
        }
        let div = 1usize << self.config.depth;
        if shape[2] % div != 0 || shape[3] % div != 0 {
            return Err(ModelError::Input(format!(
                "spatial dims {}x{} not divisible by 2^depth = {div}",
                shape[3], shape[2]
            )));
        }
        let groups = self.config.norm_groups();
        let mut x = input.clone();
        let mut skips = Vec::with_capacity(self.config.depth);
        for block in &self.encoder {
            let y = Self::block_forward(block, &x, groups)?;
            x = maxpool2(&y)?;
            skips.push(y);
        }
        x = Self::block_forward(&self.bottleneck, &x, groups)?;
        for (block, skip) in self.decoder.iter().rev().zip(skips.iter().rev()) {
            let up = upsample_bilinear2(&x)?;
            let cat = concat_channels(&[skip, &up])?;
            x = Self::block_forward(block, &cat, groups)?;
        }
        let logits = conv2d(&x, &self.head.weight, &self.head.bias)?;
        Ok(sigmoid(&logits))
    }

    /// Parameters in declaration order with their stable layer paths.
    pub fn named_params(&self) -> Vec<(String, Tensor<f32>)> {
        let mut out = Vec::new();
        let push_block = |prefix: &str, b: &DoubleBlock, out: &mut Vec<(String, Tensor<f32>)>| {
            for (tag, cg) in [("1", &b.first), ("2", &b.second)] {
                out.push((format!("{prefix}.conv{tag}.weight"), cg.weight.clone()));
                out.push((format!("{prefix}.conv{tag}.bias"), cg.bias.clone()));
                out.push((format!("{prefix}.gn{tag}.gamma"), cg.gamma.clone()));
                out.push((format!("{prefix}.gn{tag}.beta"), cg.beta.clone()));
            }
        };
        for (i, b) in self.encoder.iter().enumerate() {
            push_block(&format!("enc{i}"), b, &mut out);
        }
        push_block("bottleneck", &self.bottleneck, &mut out);
        for (i, b) in self.decoder.iter().enumerate() {
            push_block(&format!("dec{i}"), b, &mut out);
        }
        out.push(("head.conv.weight".to_string(), self.head.weight.clone()));
        out.push(("head.conv.bias".to_string(), self.head.bias.clone()));
        out
    }

    /// Mutable slots in the same order as [`named_params`], for the
    /// optimizer to swap in updated tensors.
    pub fn param_slots(&mut self) -> Vec<&mut Tensor<f32>> {
        let mut out: Vec<&mut Tensor<f32>> = Vec::new();
        for b in &mut self.encoder {
            for cg in [&mut b.first, &mut b.second] {
                out.push(&mut cg.weight);
                out.push(&mut cg.bias);
                out.push(&mut cg.gamma);
                out.push(&mut cg.beta);
            }
        }
        for cg in [&mut self.bottleneck.first, &mut self.bottleneck.second] {
            out.push(&mut cg.weight);
            out.push(&mut cg.bias);
            out.push(&mut cg.gamma);
            out.push(&mut cg.beta);
        }
        for b in &mut self.decoder {
            for cg in [&mut b.first, &mut b.second] {
                out.push(&mut cg.weight);
                out.push(&mut cg.bias);
                out.push(&mut cg.gamma);
                out.push(&mut cg.beta);
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        out
    }

    /// Checkpoint path pair: weights at `<path>` (`.spatw`), config JSON
    /// alongside with extension `.json`.
    pub fn save(&self, path: &Path) -> Result<(), ModelError> {
        let params = self.named_params();
        crate::tensor::save_checkpoint(path, &params).map_err(ModelError::Tensor)?;
        let cfg = serde_json::to_vec_pretty(&self.config)
            .map_err(|e| ModelError::Checkpoint(e.to_string()))?;
        std::fs::write(Self::config_path(path), cfg)?;
        Ok(())
    }

    pub fn config_path(path: &Path) -> PathBuf {
        path.with_extension("json")
    }

    pub fn load(path: &Path) -> Result<UNetModel, ModelError> {
        let cfg_path = Self::config_path(path);
        let cfg_bytes = std::fs::read(&cfg_path).map_err(|_| {
            ModelError::Checkpoint(format!("missing model config {}", cfg_path.display()))
        })?;
        let config: UNetConfig = serde_json::from_slice(&cfg_bytes)
            .map_err(|e| ModelError::Checkpoint(format!("config parse: {e}")))?;
        let records = crate::tensor::load_checkpoint(path).map_err(ModelError::Tensor)?;
        let mut model = UNetModel::build(config, 0)?;
        let expected = model.named_params();
        if records.len() != expected.len() {
            return Err(ModelError::Checkpoint(format!(
                "checkpoint has {} parameters, config needs {}",
                records.len(),
                expected.len()
            )));
        }
        let mut slots = model.param_slots();
        for (i, ((name, dims, data), (want_name, want))) in
            records.into_iter().zip(&expected).enumerate()
        {
            if &name != want_name {
                return Err(ModelError::Checkpoint(format!(
                    "parameter {i} is '{name}', expected '{want_name}'"
                )));
            }
            if dims != want.shape() {
                return Err(ModelError::Checkpoint(format!(
                    "parameter '{name}' has dims {dims:?}, expected {:?}",
                    want.shape()
                )));
            }
            *slots[i] = Tensor::param(&dims, data).map_err(ModelError::Tensor)?;
        }
        Ok(model)
    }
}

/// Builds the model input from a stack: `spat32` concatenates the 32
/// directional images in index order 1..32 along channels (channel block k
/// is image k); `fullLight1` uses the full-light image alone. Pixel values
/// are scaled to `[0, 1]`.
pub fn stack_to_input(stack: &ImageStack, mode: InputMode) -> Result<Tensor<f32>, ModelError> {
    stack
        .validate()
        .map_err(|e| ModelError::Input(e.to_string()))?;
    let (w, h) = (stack.width(), stack.height());
    let images: Vec<&image::RgbImage> = match mode {
        InputMode::Spat32 => stack.directional.iter().collect(),
        InputMode::FullLight1 => vec![&stack.full_light],
    };
    let c = images.len() * 3;
    let mut data = vec![0.0f32; c * h * w];
    for (k, img) in images.iter().enumerate() {
        for ch in 0..3 {
            let plane = &mut data[(k * 3 + ch) * h * w..(k * 3 + ch + 1) * h * w];
            for (y, row) in img.rows().enumerate() {
                for (x, px) in row.enumerate() {
                    plane[y * w + x] = f32::from(px.0[ch]) / 255.0;
                }
            }
        }
    }
    Tensor::from_vec(&[1, c, h, w], data).map_err(ModelError::Tensor)
}

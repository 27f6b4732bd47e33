use std::fmt;
use std::str::FromStr;

use super::{LayerSpec, Model};
use crate::error::{Error, Result};
use crate::tensor::Element;

/// Residual student depth.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResNetVariant {
    /// One basic block per stage.
    ResNet8,
    /// Two basic blocks per stage (also accepted as `resnet14`).
    ResNet16,
}

impl ResNetVariant {
    pub fn blocks_per_stage(self) -> usize {
        match self {
            ResNetVariant::ResNet8 => 1,
            ResNetVariant::ResNet16 => 2,
        }
    }
}

impl FromStr for ResNetVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "resnet8" => Ok(ResNetVariant::ResNet8),
            "resnet16" | "resnet14" => Ok(ResNetVariant::ResNet16),
            _ => Err(Error::UnknownVariant(s.to_string())),
        }
    }
}

impl fmt::Display for ResNetVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ResNetVariant::ResNet8 => "resnet8",
            ResNetVariant::ResNet16 => "resnet16",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResNetConfig {
    pub variant: ResNetVariant,
    pub in_channels: usize,
    pub num_classes: usize,
    /// Width of the stem and first stage; later stages use 2x and 4x.
    pub base_width: usize,
    /// Kernel of the projection shortcut in downsampling blocks (1 or 3).
    pub shortcut_kernel: usize,
}

impl ResNetConfig {
    pub fn new(variant: ResNetVariant, in_channels: usize, num_classes: usize) -> Self {
        Self {
            variant,
            in_channels,
            num_classes,
            base_width: 16,
            shortcut_kernel: 3,
        }
    }

    pub fn layers(&self) -> Result<Vec<LayerSpec>> {
        if self.in_channels == 0 || self.num_classes < 2 || self.base_width == 0 {
            return Err(Error::InvalidArgument(format!(
                "resnet needs in_channels >= 1, num_classes >= 2 and base_width >= 1, got {self:?}"
            )));
        }
        let w = self.base_width;
        let mut layers = vec![
            LayerSpec::Conv2d {
                in_channels: self.in_channels,
                out_channels: w,
                kernel: 3,
                stride: 1,
                padding: 1,
            },
            LayerSpec::BatchNorm2d { features: w },
            LayerSpec::Relu,
        ];
        let mut channels = w;
        for (width, stride) in [(w, 1), (2 * w, 2), (4 * w, 2)] {
            for b in 0..self.variant.blocks_per_stage() {
                layers.push(LayerSpec::BasicBlock {
                    in_channels: channels,
                    out_channels: width,
                    stride: if b == 0 { stride } else { 1 },
                    shortcut_kernel: self.shortcut_kernel,
                });
                channels = width;
            }
        }
        layers.extend([
            LayerSpec::AdaptiveAvgPool2d { out_h: 1, out_w: 1 },
            LayerSpec::Flatten,
            LayerSpec::Dense {
                in_features: channels,
                out_features: self.num_classes,
            },
        ]);
        Ok(layers)
    }

    pub fn build<T: Element>(&self, seed: u64) -> Result<Model<T>> {
        Model::new(self.layers()?, seed)
    }
}

/// Residual student with the default 3x3 projection shortcuts.
pub fn build_resnet<T: Element>(
    variant: ResNetVariant,
    in_channels: usize,
    num_classes: usize,
    base_width: usize,
    seed: u64,
) -> Result<Model<T>> {
    ResNetConfig {
        base_width,
        ..ResNetConfig::new(variant, in_channels, num_classes)
    }
    .build(seed)
}

/// Dense + ReLU stack with a linear output layer.
pub fn build_mlp<T: Element>(sizes: &[usize], seed: u64) -> Result<Model<T>> {
    if sizes.len() < 2 || sizes.contains(&0) {
        return Err(Error::InvalidArgument(format!(
            "mlp needs at least two positive layer sizes, got {sizes:?}"
        )));
    }
    let mut layers = Vec::new();
    for (i, pair) in sizes.windows(2).enumerate() {
        if i > 0 {
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Dense {
            in_features: pair[0],
            out_features: pair[1],
        });
    }
    Model::new(layers, seed)
}

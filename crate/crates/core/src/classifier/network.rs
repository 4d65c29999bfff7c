use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv, Dense, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// VGG-19 convolutional trunk (torchvision layout) with a single-logit head.
    Vgg19Pretrained,
    /// Stride-2 3x3 convolutions down to 4x4, global average pool, one logit.
    SmallCnn,
}

const VGG19_LAYOUT: [Option<usize>; 21] = [
    Some(64),
    Some(64),
    None,
    Some(128),
    Some(128),
    None,
    Some(256),
    Some(256),
    Some(256),
    Some(256),
    None,
    Some(512),
    Some(512),
    Some(512),
    Some(512),
    None,
    Some(512),
    Some(512),
    Some(512),
    Some(512),
    None,
];
const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];

#[derive(Debug, Clone)]
enum Stage {
    Conv { name: String, conv: Conv },
    Pool,
}

/// Binary classifier trunk + head. Every convolution is followed by a ReLU.
#[derive(Debug, Clone)]
pub struct ClassifierNet {
    backbone: Backbone,
    side: usize,
    stages: Vec<Stage>,
    head: Dense,
}

pub(crate) fn downsampling_stages(side: usize) -> Result<usize> {
    if side < 4 || !side.is_power_of_two() {
        return Err(Error::config(format!(
            "image side {side} must be a power of two no smaller than 4"
        )));
    }
    Ok(side.trailing_zeros() as usize - 2)
}

impl ClassifierNet {
    pub fn build(backbone: Backbone, side: usize, params: &mut ParamStore) -> Result<Self> {
        let mut stages = Vec::new();
        let head_in = match backbone {
            Backbone::SmallCnn => {
                let n = downsampling_stages(side)?.max(1);
                let mut c_in = 1;
                for i in 0..n {
                    let c_out = (8 << i).min(64);
                    let name = format!("conv{}", i + 1);
                    let conv = params.conv2d(&name, c_in, c_out, 3, 2, 1)?;
                    stages.push(Stage::Conv { name, conv });
                    c_in = c_out;
                }
                c_in
            }
            Backbone::Vgg19Pretrained => {
                if side < 32 || !side.is_power_of_two() {
                    return Err(Error::config("vgg19 needs a power-of-two input of at least 32"));
                }
                // torchvision numbering: each conv is followed by a ReLU slot.
                let mut idx = 0;
                let mut c_in = 3;
                for entry in VGG19_LAYOUT {
                    match entry {
                        Some(c_out) => {
                            let name = format!("features.{idx}");
                            let conv = params.conv2d(&name, c_in, c_out, 3, 1, 1)?;
                            stages.push(Stage::Conv { name, conv });
                            c_in = c_out;
                            idx += 2;
                        }
                        None => {
                            stages.push(Stage::Pool);
                            idx += 1;
                        }
                    }
                }
                c_in
            }
        };
        let head = params.linear("head", head_in, 1)?;
        Ok(Self {
            backbone,
            side,
            stages,
            head,
        })
    }

    pub fn backbone(&self) -> Backbone {
        self.backbone
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn conv_layers(&self) -> Vec<String> {
        self.stages
            .iter()
            .filter_map(|s| match s {
                Stage::Conv { name, .. } => Some(name.clone()),
                Stage::Pool => None,
            })
            .collect()
    }

    pub fn default_gradcam_layer(&self) -> String {
        self.conv_layers().pop().expect("every backbone has a convolution")
    }

    fn stage_index(&self, layer: &str) -> Result<usize> {
        self.stages
            .iter()
            .position(|s| matches!(s, Stage::Conv { name, .. } if name == layer))
            .ok_or_else(|| {
                Error::contract(format!(
                    "unknown layer {layer:?}; valid layers: {}",
                    self.conv_layers().join(", ")
                ))
            })
    }

    /// Channel replication (and ImageNet normalization for VGG) at the
    /// grayscale boundary.
    fn adapt_input(&self, x: &Tensor) -> Result<Tensor> {
        match self.backbone {
            Backbone::SmallCnn => Ok(x.clone()),
            Backbone::Vgg19Pretrained => {
                let x3 = Tensor::cat(&[x, x, x], 1)?;
                let mean = Tensor::new(&IMAGENET_MEAN, &Device::Cpu)?
                    .to_dtype(x.dtype())?
                    .reshape((1, 3, 1, 1))?;
                let std = Tensor::new(&IMAGENET_STD, &Device::Cpu)?
                    .to_dtype(x.dtype())?
                    .reshape((1, 3, 1, 1))?;
                Ok(x3.broadcast_sub(&mean)?.broadcast_div(&std)?)
            }
        }
    }

    fn run(&self, mut h: Tensor, stages: std::ops::Range<usize>) -> Result<Tensor> {
        for stage in &self.stages[stages] {
            h = match stage {
                Stage::Conv { conv, .. } => conv.forward(&h)?.relu()?,
                Stage::Pool => h.max_pool2d(2)?,
            };
        }
        Ok(h)
    }

    fn head_logits(&self, h: &Tensor) -> Result<Tensor> {
        let pooled = h.mean((2, 3))?;
        Ok(self.head.forward(&pooled)?.squeeze(1)?)
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 || h != self.side || w != self.side {
            return Err(Error::contract(format!(
                "classifier expects (b, 1, {0}, {0}) input, got {1:?}",
                self.side,
                x.dims()
            )));
        }
        Ok(())
    }

    /// `(b, 1, s, s) -> (b,)` logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x)?;
        let h = self.run(self.adapt_input(x)?, 0..self.stages.len())?;
        self.head_logits(&h)
    }

    /// Post-ReLU activation of `layer`.
    pub fn activation(&self, x: &Tensor, layer: &str) -> Result<Tensor> {
        self.check_input(x)?;
        let i = self.stage_index(layer)?;
        self.run(self.adapt_input(x)?, 0..i + 1)
    }

    /// Logits computed from the activation of `layer` onwards.
    pub fn logits_from(&self, activation: &Tensor, layer: &str) -> Result<Tensor> {
        let i = self.stage_index(layer)?;
        let h = self.run(activation.clone(), i + 1..self.stages.len())?;
        self.head_logits(&h)
    }

    /// Feature maps used for the perceptual reconstruction distance: the
    /// pixels themselves followed by the activations of the first block
    /// (`conv1` for the small CNN, `relu1_2` for VGG).
    pub fn perceptual_features(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.check_input(x)?;
        let end = match self.backbone {
            Backbone::SmallCnn => 1,
            Backbone::Vgg19Pretrained => 2,
        };
        let h = self.run(self.adapt_input(x)?, 0..end)?;
        Ok(vec![x.clone(), h])
    }
}

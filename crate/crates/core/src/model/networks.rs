use candle_core::Tensor;

use crate::classifier::downsampling_stages;
use crate::error::{Error, Result};
use crate::nn::{leaky_relu, sigmoid, Conv, Dense, ParamStore};

/// Spatial size at the bottleneck of both convolutional stacks.
const BOTTLENECK: usize = 4;

fn channels(stages: usize, base: usize, max: usize) -> Vec<usize> {
    (0..stages).map(|i| (base << i).min(max)).collect()
}

/// Strided 3x3 convolutions down to 4x4, then a linear map to the latent code.
#[derive(Debug, Clone)]
pub struct Encoder {
    convs: Vec<Conv>,
    to_latent: Dense,
}

impl Encoder {
    pub fn build(params: &mut ParamStore, side: usize, latent_dim: usize, base: usize, max: usize) -> Result<Self> {
        let ch = channels(downsampling_stages(side)?, base, max);
        let mut convs = Vec::new();
        let mut c_in = 1;
        for (i, &c) in ch.iter().enumerate() {
            convs.push(params.conv2d(&format!("encoder.conv{i}"), c_in, c, 3, 2, 1)?);
            c_in = c;
        }
        let flat = c_in * BOTTLENECK * BOTTLENECK;
        let to_latent = params.linear("encoder.to_latent", flat, latent_dim)?;
        Ok(Self { convs, to_latent })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.convs {
            h = leaky_relu(&conv.forward(&h)?)?;
        }
        let b = h.dim(0)?;
        self.to_latent.forward(&h.reshape((b, ()))?)
    }
}

/// Mirror of [`Encoder`]: nearest-neighbour 2x upsampling followed by 3x3
/// convolutions, ending in a sigmoid so outputs stay in `[0, 1]`.
#[derive(Debug, Clone)]
pub struct Decoder {
    from_latent: Dense,
    bottleneck_channels: usize,
    convs: Vec<Conv>,
    to_pixels: Conv,
}

impl Decoder {
    pub fn build(params: &mut ParamStore, side: usize, latent_dim: usize, base: usize, max: usize) -> Result<Self> {
        let ch = channels(downsampling_stages(side)?, base, max);
        let top = *ch.last().expect("at least one stage");
        let from_latent = params.linear("decoder.from_latent", latent_dim, top * BOTTLENECK * BOTTLENECK)?;
        let mut convs = Vec::new();
        for i in (0..ch.len()).rev() {
            let c_out = if i == 0 { ch[0] } else { ch[i - 1] };
            convs.push(params.conv2d(&format!("decoder.conv{i}"), ch[i], c_out, 3, 1, 1)?);
        }
        let to_pixels = params.conv2d("decoder.to_pixels", ch[0], 1, 3, 1, 1)?;
        Ok(Self {
            from_latent,
            bottleneck_channels: top,
            convs,
            to_pixels,
        })
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let b = z.dim(0)?;
        let mut h = leaky_relu(&self.from_latent.forward(z)?)?.reshape((
            b,
            self.bottleneck_channels,
            BOTTLENECK,
            BOTTLENECK,
        ))?;
        for conv in &self.convs {
            let (_, _, hh, ww) = h.dims4()?;
            h = leaky_relu(&conv.forward(&h.upsample_nearest2d(hh * 2, ww * 2)?)?)?;
        }
        sigmoid(&self.to_pixels.forward(&h)?)
    }
}

/// Discriminates prior samples (logit > 0) from encoded latents.
#[derive(Debug, Clone)]
pub struct Critic {
    layers: Vec<Dense>,
}

impl Critic {
    pub fn build(params: &mut ParamStore, latent_dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            layers: vec![
                params.linear("critic.fc0", latent_dim, hidden)?,
                params.linear("critic.fc1", hidden, hidden)?,
                params.linear("critic.fc2", hidden, 1)?,
            ],
        })
    }

    /// `(b, d) -> (b,)` logits.
    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        let mut h = z.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i + 1 < self.layers.len() {
                h = leaky_relu(&h)?;
            }
        }
        Ok(h.squeeze(1)?)
    }
}

/// Linear regression of the classifier score from a slice of latent features.
#[derive(Debug, Clone)]
pub struct Probe {
    layer: Dense,
    start: usize,
    len: usize,
}

impl Probe {
    pub fn build(params: &mut ParamStore, name: &str, start: usize, len: usize) -> Result<Self> {
        if len == 0 {
            return Err(Error::contract(format!("probe {name} over an empty feature range")));
        }
        Ok(Self {
            layer: params.linear(name, len, 1)?,
            start,
            len,
        })
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn forward(&self, z: &Tensor) -> Result<Tensor> {
        Ok(self.layer.forward(&z.narrow(1, self.start, self.len)?)?.squeeze(1)?)
    }
}

/// Every trainable piece of the interpreter.
#[derive(Debug, Clone)]
pub struct Networks {
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub critic: Critic,
    pub subset_probe: Probe,
}

impl Networks {
    pub fn build(params: &mut ParamStore, side: usize, cfg: &super::DiscoverConfig) -> Result<Self> {
        let (d, k) = (cfg.latent_dim, cfg.subset_size);
        Ok(Self {
            encoder: Encoder::build(params, side, d, cfg.base_channels, cfg.max_channels)?,
            decoder: Decoder::build(params, side, d, cfg.base_channels, cfg.max_channels)?,
            critic: Critic::build(params, d, cfg.critic_hidden)?,
            subset_probe: Probe::build(params, "probe_subset", 0, k)?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::DiscoverConfig;
    use candle_core::{DType, Device};

    #[test]
    fn shapes_for_64_and_8() {
        for (side, d) in [(64, 32), (8, 4)] {
            let cfg = DiscoverConfig {
                latent_dim: d,
                subset_size: 2,
                ..Default::default()
            };
            let mut p = ParamStore::new(0, DType::F32);
            let nets = Networks::build(&mut p, side, &cfg).unwrap();
            let x = Tensor::rand(0f32, 1f32, (3, 1, side, side), &Device::Cpu).unwrap();
            let z = nets.encoder.forward(&x).unwrap();
            assert_eq!(z.dims(), &[3, d]);
            let y = nets.decoder.forward(&z).unwrap();
            assert_eq!(y.dims(), &[3, 1, side, side]);
            assert_eq!(nets.critic.forward(&z).unwrap().dims(), &[3]);
            assert_eq!(nets.subset_probe.forward(&z).unwrap().dims(), &[3]);
        }
    }
}

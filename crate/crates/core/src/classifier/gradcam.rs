use candle_core::{DType, Tensor, Var};
use serde::{Deserialize, Serialize};

use super::ClassifierNet;
use crate::dataset::Label;
use crate::error::{Error, Result};
use crate::image::{resize_bilinear, ProcessedImage};
use crate::nn::images_to_tensor;

/// A network that can be split at a named convolutional layer.
pub trait LayeredNet {
    fn conv_layers(&self) -> Vec<String>;
    fn activation(&self, x: &Tensor, layer: &str) -> Result<Tensor>;
    fn logits_from(&self, activation: &Tensor, layer: &str) -> Result<Tensor>;
}

impl LayeredNet for ClassifierNet {
    fn conv_layers(&self) -> Vec<String> {
        ClassifierNet::conv_layers(self)
    }
    fn activation(&self, x: &Tensor, layer: &str) -> Result<Tensor> {
        ClassifierNet::activation(self, x, layer)
    }
    fn logits_from(&self, activation: &Tensor, layer: &str) -> Result<Tensor> {
        ClassifierNet::logits_from(self, activation, layer)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcamMap {
    /// Input-resolution map, min-max normalized to `[0, 1]`. A spatially
    /// flat map (including the all-zero one) normalizes to all zeros.
    pub heatmap: Vec<f32>,
    pub side: usize,
    pub target_layer: String,
    /// Unnormalized `relu(sum_c alpha_c * A_c)` at layer resolution.
    pub raw: Vec<f64>,
    pub raw_height: usize,
    pub raw_width: usize,
}

impl GradcamMap {
    pub fn to_image(&self) -> Result<ProcessedImage> {
        ProcessedImage::new(self.side, self.heatmap.clone())
    }
}

/// Gradient-weighted class activation map for `target` at `layer`.
///
/// Channel weights are the spatial means of the gradient of the target logit
/// (the class-1 logit, negated for class 0) with respect to the layer's
/// activation.
pub fn gradcam<N: LayeredNet>(net: &N, img: &ProcessedImage, layer: &str, target: Label) -> Result<GradcamMap> {
    let valid = net.conv_layers();
    if !valid.iter().any(|l| l == layer) {
        return Err(Error::contract(format!(
            "unknown layer {layer:?}; valid layers: {}",
            valid.join(", ")
        )));
    }
    let x = images_to_tensor(&[img], DType::F32)?;
    let act = Var::from_tensor(&net.activation(&x, layer)?.detach())?;
    let logits = net.logits_from(act.as_tensor(), layer)?;
    let objective = match target {
        Label::Class1 => logits.sum_all()?,
        Label::Class0 => logits.neg()?.sum_all()?,
    };
    let grads = objective.backward()?;
    let (_, c, h, w) = act.dims4()?;
    let grad = match grads.get(act.as_tensor()) {
        Some(g) => g.clone(),
        None => act.zeros_like()?,
    };
    let weights = grad.mean((2, 3))?.reshape((1, c, 1, 1))?;
    let cam = act
        .as_tensor()
        .broadcast_mul(&weights)?
        .sum(1)?
        .relu()?
        .to_dtype(DType::F64)?
        .flatten_all()?
        .to_vec1::<f64>()?;

    let side = img.side();
    let up = resize_bilinear(&cam, h, w, side, side);
    let (lo, hi) = up
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let heatmap = if hi > lo {
        up.iter().map(|&v| ((v - lo) / (hi - lo)) as f32).collect()
    } else {
        vec![0.0; side * side]
    };
    Ok(GradcamMap {
        heatmap,
        side,
        target_layer: layer.to_string(),
        raw: cam,
        raw_height: h,
        raw_width: w,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::Backbone;
    use crate::nn::ParamStore;
    use candle_core::Device;

    /// `act = w1 * x` on a 1x1 input (a 1x1 convolution), `logit = w2 * act`.
    struct Toy {
        w1: f32,
        w2: f32,
    }

    impl LayeredNet for Toy {
        fn conv_layers(&self) -> Vec<String> {
            vec!["conv".into()]
        }
        fn activation(&self, x: &Tensor, _: &str) -> Result<Tensor> {
            let k = Tensor::new(&[[[[self.w1]]]], &Device::Cpu)?;
            Ok(x.conv2d(&k, 0, 1, 1, 1)?)
        }
        fn logits_from(&self, a: &Tensor, _: &str) -> Result<Tensor> {
            Ok((a.mean((1, 2, 3))? * self.w2 as f64)?)
        }
    }

    #[test]
    fn two_parameter_toy_matches_closed_form() {
        let img = ProcessedImage::filled(1, 0.8).unwrap();
        for (w1, w2, target) in [(1.5f32, 2.0f32, Label::Class1), (1.5, -2.0, Label::Class1), (-0.5, 3.0, Label::Class0)] {
            let map = gradcam(&Toy { w1, w2 }, &img, "conv", target).unwrap();
            let sign = if target == Label::Class1 { 1.0 } else { -1.0 };
            let expected = (sign * w2 as f64 * w1 as f64 * 0.8).max(0.0);
            assert_eq!((map.raw_height, map.raw_width), (1, 1));
            assert!((map.raw[0] - expected).abs() < 1e-6, "{} vs {expected}", map.raw[0]);
            // A single-cell map is spatially flat and normalizes to zeros.
            assert_eq!(map.heatmap, vec![0.0]);
        }
    }

    #[test]
    fn zero_gradient_gives_zero_map() {
        let img = ProcessedImage::filled(4, 0.3).unwrap();
        let map = gradcam(&Toy { w1: 1.0, w2: 0.0 }, &img, "conv", Label::Class1).unwrap();
        assert!(map.raw.iter().all(|&v| v == 0.0));
        assert!(map.heatmap.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn normalized_range_on_random_inputs() {
        let mut p = ParamStore::new(7, DType::F32);
        let net = ClassifierNet::build(Backbone::SmallCnn, 32, &mut p).unwrap();
        let layer = net.default_gradcam_layer();
        for k in 0..8u32 {
            let px = (0..32 * 32).map(|i| ((i as u32).wrapping_mul(2654435761u32).rotate_left(k) % 1000) as f32 / 999.0);
            let img = ProcessedImage::from_clamped(32, px).unwrap();
            for target in Label::BOTH {
                let map = gradcam(&net, &img, &layer, target).unwrap();
                assert_eq!(map.heatmap.len(), 32 * 32);
                assert!(map.heatmap.iter().all(|v| (0.0..=1.0).contains(v)));
                let max = map.heatmap.iter().cloned().fold(0.0f32, f32::max);
                assert!(max == 1.0 || max == 0.0);
            }
        }
    }

    #[test]
    fn unknown_layer_is_rejected() {
        let img = ProcessedImage::filled(1, 0.5).unwrap();
        let err = gradcam(&Toy { w1: 1.0, w2: 1.0 }, &img, "fc", Label::Class1).unwrap_err();
        assert!(err.to_string().contains("valid layers: conv"));
    }
}

//! Minimal network plumbing on top of candle: a seeded parameter store that
//! can hand out trainable or frozen weights, two layer types, and tensor
//! conversions for [`ProcessedImage`] batches.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::ProcessedImage;

/// Keeps activation variance roughly constant through rectifier stacks; the
/// smaller `1/sqrt(fan_in)` bound starves deep encoders of signal.
fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in.max(1) as f64).sqrt()
}

fn bias_bound(fan_in: usize) -> f64 {
    1.0 / (fan_in.max(1) as f64).sqrt()
}

/// Named parameters. Missing names are initialized from a seeded uniform
/// stream, so construction order fixes the weights. Weights use the He bound
/// `sqrt(6/fan_in)`; biases use `1/sqrt(fan_in)`.
/// A frozen store hands out detached tensors that never receive gradients.
#[derive(Debug)]
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
    dtype: DType,
    frozen: bool,
    strict: bool,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
            dtype,
            frozen: false,
            strict: false,
        }
    }

    /// A store that only serves the given tensors; requesting anything else
    /// is an error.
    pub fn from_tensors(tensors: HashMap<String, Tensor>, dtype: DType, frozen: bool) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (name, t) in tensors {
            vars.insert(name, Var::from_tensor(&t.to_dtype(dtype)?)?);
        }
        Ok(Self {
            vars,
            rng: ChaCha8Rng::seed_from_u64(0),
            dtype,
            frozen,
            strict: true,
        })
    }

    pub fn load(path: &Path, dtype: DType, frozen: bool) -> Result<Self> {
        Self::load_merged(&[path.to_path_buf()], dtype, frozen)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.save_filtered(path, |_| true)
    }

    /// Writes the tensors whose names satisfy `keep` as `f32` safetensors.
    pub fn save_filtered(&self, path: &Path, keep: impl Fn(&str) -> bool) -> Result<()> {
        let tensors: HashMap<String, Tensor> = self
            .vars
            .iter()
            .filter(|(k, _)| keep(k))
            .map(|(k, v)| Ok((k.clone(), v.as_tensor().to_dtype(DType::F32)?)))
            .collect::<Result<_>>()?;
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    /// Reads and merges several safetensors files into one strict store.
    pub fn load_merged(paths: &[std::path::PathBuf], dtype: DType, frozen: bool) -> Result<Self> {
        let mut all = HashMap::new();
        for path in paths {
            if !path.is_file() {
                return Err(Error::io(
                    path,
                    std::io::Error::new(std::io::ErrorKind::NotFound, "weights file not found"),
                ));
            }
            all.extend(candle_core::safetensors::load(path, &Device::Cpu)?);
        }
        Self::from_tensors(all, dtype, frozen)
    }

    /// Copies matching tensors from `other` so later requests for those names
    /// use them instead of fresh initial values. Returns the number copied.
    pub fn preload_from(&mut self, other: &ParamStore, keep: impl Fn(&str) -> bool) -> Result<usize> {
        let mut n = 0;
        for (name, v) in &other.vars {
            if keep(name) {
                let t = v.as_tensor().to_dtype(self.dtype)?.copy()?;
                self.vars.insert(name.clone(), Var::from_tensor(&t)?);
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Independent frozen copy; later updates to `self` do not leak into it.
    pub fn frozen_copy(&self) -> Result<Self> {
        let mut vars = BTreeMap::new();
        for (k, v) in &self.vars {
            vars.insert(k.clone(), Var::from_tensor(&v.as_tensor().copy()?)?);
        }
        Ok(Self {
            vars,
            rng: ChaCha8Rng::seed_from_u64(0),
            dtype: self.dtype,
            frozen: true,
            strict: true,
        })
    }

    pub fn get(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        if let Some(v) = self.vars.get(name) {
            if v.dims() != shape {
                return Err(Error::contract(format!(
                    "parameter {name} has shape {:?}, expected {shape:?}",
                    v.dims()
                )));
            }
        } else {
            if self.strict {
                return Err(Error::contract(format!("missing parameter {name}")));
            }
            let n: usize = shape.iter().product();
            let values: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-bound..bound)).collect();
            let t = Tensor::from_vec(values, shape, &Device::Cpu)?.to_dtype(self.dtype)?;
            self.vars.insert(name.to_string(), Var::from_tensor(&t)?);
        }
        let v = &self.vars[name];
        Ok(if self.frozen {
            v.as_detached_tensor()
        } else {
            v.as_tensor().clone()
        })
    }

    pub fn conv2d(&mut self, name: &str, c_in: usize, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Result<Conv> {
        let fan_in = c_in * kernel * kernel;
        Ok(Conv {
            weight: self.get(&format!("{name}.weight"), &[c_out, c_in, kernel, kernel], he_bound(fan_in))?,
            bias: self.get(&format!("{name}.bias"), &[c_out], bias_bound(fan_in))?,
            stride,
            padding,
        })
    }

    pub fn linear(&mut self, name: &str, d_in: usize, d_out: usize) -> Result<Dense> {
        Ok(Dense {
            weight: self.get(&format!("{name}.weight"), &[d_out, d_in], he_bound(d_in))?,
            bias: self.get(&format!("{name}.bias"), &[d_out], bias_bound(d_in))?,
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.vars.keys().map(String::as_str)
    }

    pub fn var(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn vars_with_prefix(&self, prefix: &str) -> Vec<Var> {
        self.vars
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.clone())
            .collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and raw values in name order.
    pub fn hash(&self) -> Result<String> {
        let mut h = Sha256::new();
        for (name, v) in &self.vars {
            h.update(name.as_bytes());
            h.update([0]);
            for d in v.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let flat = v.as_tensor().flatten_all()?;
            match flat.dtype() {
                DType::F64 => flat.to_vec1::<f64>()?.iter().for_each(|x| h.update(x.to_le_bytes())),
                _ => flat
                    .to_dtype(DType::F32)?
                    .to_vec1::<f32>()?
                    .iter()
                    .for_each(|x| h.update(x.to_le_bytes())),
            }
        }
        Ok(hex::encode(h.finalize()))
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = x.conv2d(&self.weight, self.padding, self.stride, 1, 1)?;
        let c = self.bias.dim(0)?;
        Ok(y.broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    /// `(batch, d_in) -> (batch, d_out)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

pub fn leaky_relu(x: &Tensor) -> Result<Tensor> {
    Ok(candle_nn::ops::leaky_relu(x, 0.2)?)
}

/// `exp(-softplus(-x))`: value and gradient stay finite for any finite `x`.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(softplus(&x.neg()?)?.neg()?.exp()?)
}

/// `log(1 + exp(x))`, written to stay finite for large `|x|`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    Ok((x.relu()? + (x.abs()?.neg()?.exp()? + 1.0)?.log()?)?)
}

pub fn mean_all(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean_all()?)
}

/// Mean over every axis but the first.
pub fn mean_per_row(x: &Tensor) -> Result<Tensor> {
    let b = x.dim(0)?;
    Ok(x.reshape((b, ()))?.mean(D::Minus1)?)
}

pub fn scalar(x: &Tensor) -> Result<f64> {
    Ok(x.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Stacks images into a `(batch, 1, side, side)` tensor.
pub fn images_to_tensor(images: &[&ProcessedImage], dtype: DType) -> Result<Tensor> {
    let side = images
        .first()
        .map(|i| i.side())
        .ok_or_else(|| Error::contract("empty image batch"))?;
    let mut data = Vec::with_capacity(images.len() * side * side);
    for img in images {
        if img.side() != side {
            return Err(Error::contract("images in a batch differ in size"));
        }
        data.extend_from_slice(img.pixels());
    }
    Ok(Tensor::from_vec(data, (images.len(), 1, side, side), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Inverse of [`images_to_tensor`]; values are clamped into `[0, 1]`.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<ProcessedImage>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 1 || h != w {
        return Err(Error::contract(format!("expected (b, 1, s, s) images, got {:?}", t.dims())));
    }
    let flat = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    flat.chunks_exact(h * w)
        .take(b)
        .map(|chunk| ProcessedImage::from_clamped(h, chunk.iter().copied()))
        .collect()
}

/// `(batch, d)` matrix of `f32` rows.
pub fn rows_to_tensor(rows: &[Vec<f32>], dtype: DType) -> Result<Tensor> {
    let d = rows.first().map_or(0, |r| r.len());
    let flat: Vec<f32> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    if flat.len() != rows.len() * d {
        return Err(Error::contract("ragged rows"));
    }
    Ok(Tensor::from_vec(flat, (rows.len(), d), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn tensor_to_rows(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    Ok(t.to_dtype(DType::F32)?.to_vec2::<f32>()?)
}
